#pragma once

// Image-fidelity and prompt-alignment metrics: CLIP-I, CLIP-T, KID and LPIPS
// diversity, over pluggable embedding and perceptual-distance providers.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <memory>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "textloc/autodiff.hpp"
#include "textloc/conditioning.hpp"
#include "textloc/datasets.hpp"
#include "textloc/errors.hpp"
#include "textloc/image.hpp"

namespace textloc {

class EmbeddingProvider {
 public:
  virtual ~EmbeddingProvider() = default;
  virtual std::string name() const = 0;
  virtual int dimension() const = 0;
  virtual bool embeds_images() const { return true; }
  virtual bool embeds_text() const { return true; }
  virtual Vector embed_image(const Image& image) const = 0;
  virtual Vector embed_text(const std::string& text) const = 0;
};

class PerceptualDistanceProvider {
 public:
  virtual ~PerceptualDistanceProvider() = default;
  virtual std::string name() const = 0;
  // Non-negative, zero for identical images.
  virtual double distance(const Image& a, const Image& b) const = 0;
};

namespace detail {

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

inline Vector gaussian_vector(std::uint64_t seed, int dim) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  Vector v(dim);
  for (int i = 0; i < dim; ++i) v(i) = n(rng);
  return v;
}

}  // namespace detail

// Deterministic stand-in for a CLIP encoder. Images: 4x4 area-pooled colour
// layout through a fixed random projection. Text: sum of hashed per-word
// vectors. Both carry a constant component so no embedding is zero.
class MockEmbeddingProvider final : public EmbeddingProvider {
 public:
  explicit MockEmbeddingProvider(int dimension = 64) : dim_(dimension) {
    if (dim_ < 2) throw ArgumentError("mock embedding dimension must be at least 2");
    projection_ = Matrix(dim_ - 1, 48);
    for (int j = 0; j < 48; ++j) projection_.col(j) = detail::gaussian_vector(0x1ab0ULL + static_cast<std::uint64_t>(j), dim_ - 1);
  }

  std::string name() const override { return "mock-embedding-v1(dim=" + std::to_string(dim_) + ")"; }
  int dimension() const override { return dim_; }

  Vector embed_image(const Image& image) const override {
    if (image.channels < 1) throw ArgumentError("embed_image: image has no channels");
    const Image rgb = image.channels == 3 ? image : to_rgb(image);
    Vector pooled(48);
    for (int c = 0; c < 3; ++c) {
      const Matrix p = area_resize(channel_plane(rgb, c), 4, 4) / 255.0;
      for (int y = 0; y < 4; ++y) {
        for (int x = 0; x < 4; ++x) pooled(c * 16 + y * 4 + x) = p(y, x);
      }
    }
    Vector out(dim_);
    out.head(dim_ - 1) = projection_ * pooled / std::sqrt(48.0);
    out(dim_ - 1) = 1.0;
    return out;
  }

  Vector embed_text(const std::string& text) const override {
    Vector out = Vector::Zero(dim_);
    for (const std::string& w : split_words(text)) out.head(dim_ - 1) += detail::gaussian_vector(detail::fnv1a(w), dim_ - 1);
    out(dim_ - 1) = 1.0;
    return out;
  }

 private:
  int dim_;
  Matrix projection_;
};

// Deterministic stand-in for LPIPS: root-mean-square difference of pixel
// values scaled to [0, 1] after resizing both images to a common grid.
class MockPerceptualDistance final : public PerceptualDistanceProvider {
 public:
  std::string name() const override { return "mock-perceptual-rms-v1"; }

  double distance(const Image& a, const Image& b) const override {
    const Image ra = a.channels == 3 ? a : to_rgb(a);
    Image rb = b.channels == 3 ? b : to_rgb(b);
    if (rb.width != ra.width || rb.height != ra.height) rb = resize_image(rb, ra.width, ra.height);
    double sum = 0.0;
    for (std::size_t i = 0; i < ra.pixels.size(); ++i) {
      const double d = (static_cast<double>(ra.pixels[i]) - static_cast<double>(rb.pixels[i])) / 255.0;
      sum += d * d;
    }
    return std::sqrt(sum / static_cast<double>(ra.pixels.size()));
  }
};

// ---------------------------------------------------------------------------
// Metrics

inline double cosine_similarity(const Vector& a, const Vector& b) {
  if (a.size() != b.size()) throw ArgumentError("cosine similarity: dimension mismatch");
  const double na = a.norm();
  const double nb = b.norm();
  if (!(na > 0.0) || !(nb > 0.0)) throw ArgumentError("cosine similarity: zero vector");
  return std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
}

// Mean cosine similarity over every (generated, real) pair.
inline double clip_i(const std::vector<Vector>& generated, const std::vector<Vector>& real) {
  if (generated.empty() || real.empty()) throw ArgumentError("clip_i: both embedding sets must be non-empty");
  double sum = 0.0;
  for (const Vector& g : generated) {
    for (const Vector& r : real) sum += cosine_similarity(g, r);
  }
  return sum / (static_cast<double>(generated.size()) * static_cast<double>(real.size()));
}

// Mean cosine similarity between each image embedding and the prompt with the
// identifier words removed.
inline double clip_t(const std::vector<Vector>& image_embeddings, const std::string& prompt,
                     const std::vector<std::string>& identifiers, const EmbeddingProvider& text_embedder) {
  if (image_embeddings.empty()) throw ArgumentError("clip_t: no image embeddings");
  const Vector t = text_embedder.embed_text(strip_identifiers(prompt, identifiers));
  double sum = 0.0;
  for (const Vector& e : image_embeddings) sum += cosine_similarity(e, t);
  return sum / static_cast<double>(image_embeddings.size());
}

// Unbiased MMD^2 with the cubic polynomial kernel; rows are feature vectors.
inline double kid(const Matrix& x, const Matrix& y) {
  const Eigen::Index m = x.rows();
  const Eigen::Index n = y.rows();
  if (m < 2 || n < 2) throw ArgumentError("kid: each feature set needs at least two rows");
  if (x.cols() != y.cols() || x.cols() == 0) throw ArgumentError("kid: feature dimensions differ");
  // The estimator is symmetric in (x, y); evaluating it in a canonical
  // argument order keeps kid(x, y) == kid(y, x) bit for bit.
  if (m != n ? n < m : std::lexicographical_compare(y.data(), y.data() + y.size(), x.data(), x.data() + x.size())) {
    return kid(y, x);
  }
  const double d = static_cast<double>(x.cols());
  auto kernel = [d](const Matrix& a, const Matrix& b) {
    Matrix k = (a * b.transpose()).array() / d + 1.0;
    return Matrix(k.array().cube());
  };
  const Matrix kxx = kernel(x, x);
  const Matrix kyy = kernel(y, y);
  const Matrix kxy = kernel(x, y);
  const double sxx = (kxx.sum() - kxx.trace()) / (static_cast<double>(m) * static_cast<double>(m - 1));
  const double syy = (kyy.sum() - kyy.trace()) / (static_cast<double>(n) * static_cast<double>(n - 1));
  const double sxy = kxy.sum() / (static_cast<double>(m) * static_cast<double>(n));
  return sxx + syy - 2.0 * sxy;
}

inline Matrix stack_rows(const std::vector<Vector>& rows) {
  if (rows.empty()) return Matrix(0, 0);
  Matrix m(static_cast<Eigen::Index>(rows.size()), rows.front().size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != m.cols()) throw ArgumentError("stack_rows: dimension mismatch");
    m.row(static_cast<Eigen::Index>(i)) = rows[i].transpose();
  }
  return m;
}

// Mean distance over all unordered pairs.
inline double lpips_diversity(const std::vector<Image>& images, const PerceptualDistanceProvider* provider) {
  if (!provider) throw CapabilityError("lpips_diversity: no perceptual distance provider configured");
  if (images.size() < 2) throw ArgumentError("lpips_diversity: needs at least two images");
  double sum = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    for (std::size_t j = i + 1; j < images.size(); ++j) {
      sum += provider->distance(images[i], images[j]);
      ++pairs;
    }
  }
  return sum / static_cast<double>(pairs);
}

// ---------------------------------------------------------------------------
// Reports

struct MetricRow {
  std::string target;      // concept or group id
  std::string prompt_set;  // "single" or "multi"
  double clip_i = 0.0;
  double clip_t = 0.0;
  double kid = 0.0;
  double lpips_diversity = 0.0;
  int generated = 0;
  int real = 0;
};

struct MetricReport {
  std::vector<MetricRow> rows;
  nlohmann::json provenance;
};

struct EvaluationProviders {
  const EmbeddingProvider* embedding = nullptr;
  const PerceptualDistanceProvider* perceptual = nullptr;
  std::string kid_features = "embedding";  // features used for KID
};

namespace detail {

inline std::vector<fs::path> numbered_pngs(const fs::path& dir) {
  std::vector<std::pair<int, fs::path>> found;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file() || e.path().extension() != ".png") continue;
    const std::string stem = e.path().stem().string();
    if (stem.empty() || !std::all_of(stem.begin(), stem.end(), [](unsigned char c) { return std::isdigit(c); })) continue;
    found.emplace_back(std::stoi(stem), e.path());
  }
  std::sort(found.begin(), found.end());
  std::vector<fs::path> out;
  for (auto& [i, p] : found) out.push_back(std::move(p));
  return out;
}

inline std::string fixed(double v, int digits = 6) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

}  // namespace detail

// Scores every <samples_root>/<target>/ directory written by the sampler
// against the real images of that target in the manifest.
inline MetricReport evaluate(const fs::path& samples_root, const ConceptManifest& manifest,
                             const EvaluationProviders& providers) {
  if (!providers.embedding) throw CapabilityError("evaluate: no embedding provider configured");
  if (!fs::is_directory(samples_root)) throw ValidationError("evaluate: '" + samples_root.string() + "' is not a directory");
  std::vector<fs::path> targets;
  for (const auto& e : fs::directory_iterator(samples_root)) {
    if (e.is_directory()) targets.push_back(e.path());
  }
  std::sort(targets.begin(), targets.end());
  if (targets.empty()) throw ValidationError("evaluate: no sample directories under '" + samples_root.string() + "'");

  const EmbeddingProvider& emb = *providers.embedding;
  MetricReport report;
  for (const fs::path& dir : targets) {
    const std::string target = dir.filename().string();
    std::vector<fs::path> real_paths;
    std::string prompt_set = "single";
    if (const ConceptGroup* g = manifest.group_by_id(target)) {
      real_paths = g->images;
      prompt_set = "multi";
    } else {
      real_paths = manifest.concept_by_id(target).images;
    }
    const fs::path prompts_path = dir / "prompts.json";
    if (!fs::exists(prompts_path)) throw ValidationError("evaluate: missing '" + prompts_path.string() + "'");
    const nlohmann::json prompts = nlohmann::json::parse(std::ifstream(prompts_path));

    std::vector<Vector> real;
    for (const fs::path& p : real_paths) real.push_back(emb.embed_image(read_png(p.string())));

    std::vector<Vector> generated;
    double clip_t_sum = 0.0;
    double lpips_sum = 0.0;
    int prompt_count = 0;
    for (const auto& p : prompts) {
      const fs::path pdir = dir / std::to_string(p.at("index").get<int>());
      if (!fs::is_directory(pdir)) throw ValidationError("evaluate: missing prompt directory '" + pdir.string() + "'");
      std::vector<Image> images;
      for (const fs::path& f : detail::numbered_pngs(pdir)) images.push_back(read_png(f.string()));
      if (images.empty()) throw ValidationError("evaluate: no samples in '" + pdir.string() + "'");
      std::vector<Vector> e;
      for (const Image& im : images) e.push_back(emb.embed_image(im));
      clip_t_sum += clip_t(e, p.at("text").get<std::string>(), p.at("identifiers").get<std::vector<std::string>>(), emb);
      if (providers.perceptual && images.size() >= 2) lpips_sum += lpips_diversity(images, providers.perceptual);
      generated.insert(generated.end(), e.begin(), e.end());
      ++prompt_count;
    }
    if (prompt_count == 0) throw ValidationError("evaluate: '" + prompts_path.string() + "' lists no prompts");

    MetricRow row;
    row.target = target;
    row.prompt_set = prompt_set;
    row.clip_i = clip_i(generated, real);
    row.clip_t = clip_t_sum / prompt_count;
    row.kid = (generated.size() >= 2 && real.size() >= 2) ? kid(stack_rows(generated), stack_rows(real)) : std::nan("");
    row.lpips_diversity = providers.perceptual ? lpips_sum / prompt_count : std::nan("");
    row.generated = static_cast<int>(generated.size());
    row.real = static_cast<int>(real.size());
    report.rows.push_back(row);
  }
  report.provenance = nlohmann::json{{"embedding_provider", emb.name()},
                                     {"perceptual_provider", providers.perceptual ? providers.perceptual->name() : "none"},
                                     {"kid_features", providers.kid_features + ":" + emb.name()},
                                     {"samples_root", samples_root.string()}};
  return report;
}

inline std::string report_csv(const MetricReport& r) {
  std::ostringstream out;
  out << "# embedding_provider=" << r.provenance.value("embedding_provider", "")
      << " perceptual_provider=" << r.provenance.value("perceptual_provider", "") << "\n";
  out << "target,prompt_set,clip_i,clip_t,kid,lpips_diversity,generated,real\n";
  for (const MetricRow& row : r.rows) {
    out << row.target << ',' << row.prompt_set << ',' << detail::fixed(row.clip_i) << ',' << detail::fixed(row.clip_t)
        << ',' << detail::fixed(row.kid) << ',' << detail::fixed(row.lpips_diversity) << ',' << row.generated << ','
        << row.real << '\n';
  }
  return out.str();
}

inline std::string report_markdown(const MetricReport& r) {
  std::ostringstream out;
  out << "| Target | Prompts | CLIP-I | CLIP-T | KID | LPIPS diversity | Generated | Real |\n";
  out << "|---|---|---|---|---|---|---|---|\n";
  for (const MetricRow& row : r.rows) {
    out << "| " << row.target << " | " << row.prompt_set << " | " << detail::fixed(row.clip_i, 4) << " | "
        << detail::fixed(row.clip_t, 4) << " | " << detail::fixed(row.kid, 4) << " | "
        << detail::fixed(row.lpips_diversity, 4) << " | " << row.generated << " | " << row.real << " |\n";
  }
  out << "\nEmbedding provider: `" << r.provenance.value("embedding_provider", "") << "`  \n";
  out << "Perceptual provider: `" << r.provenance.value("perceptual_provider", "") << "`  \n";
  out << "KID features: `" << r.provenance.value("kid_features", "") << "`\n";
  const std::string e = r.provenance.value("embedding_provider", "");
  if (e.rfind("mock", 0) == 0) {
    out << "\nScores come from deterministic mock providers on a toy backbone. They check the pipeline "
           "and are not comparable with scores from real CLIP or LPIPS networks.\n";
  }
  return out.str();
}

inline void write_reports(const MetricReport& r, const fs::path& dir) {
  fs::create_directories(dir);
  std::ofstream(dir / "metrics.csv") << report_csv(r);
  std::ofstream(dir / "metrics.md") << report_markdown(r);
}

}  // namespace textloc
