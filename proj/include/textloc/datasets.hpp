#pragma once

// Concept manifests, segmentation masks and class-prior image sets.

#include <nlohmann/json.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "textloc/backbone.hpp"
#include "textloc/conditioning.hpp"
#include "textloc/guidance.hpp"
#include "textloc/image.hpp"
#include "textloc/sampling.hpp"

namespace textloc {

namespace fs = std::filesystem;

struct ConceptEntry {
  std::string id;
  std::string class_name;
  std::string identifier;
  std::vector<fs::path> images;
  std::vector<fs::path> masks;  // masks[i] belongs to images[i]
};

// Images containing every member concept; masks.at(concept)[i] belongs to
// images[i].
struct ConceptGroup {
  std::string id;
  std::vector<std::string> concepts;
  std::vector<fs::path> images;
  std::map<std::string, std::vector<fs::path>> masks;
};

struct ConceptManifest {
  fs::path root;
  std::vector<ConceptEntry> concepts;
  std::vector<ConceptGroup> groups;
  std::vector<std::string> warnings;

  const ConceptEntry& concept_by_id(const std::string& id) const {
    for (const auto& c : concepts) {
      if (c.id == id) return c;
    }
    throw ArgumentError("unknown concept '" + id + "'");
  }

  const ConceptGroup* group_by_id(const std::string& id) const {
    for (const auto& g : groups) {
      if (g.id == id) return &g;
    }
    return nullptr;
  }
};

// Reads a single-channel mask, values scaled to [0, 1]. Colour files are
// accepted only when every pixel is gray and the file is fully opaque.
inline SegMask load_mask(const fs::path& path, const std::string& concept_id = "") {
  png_image pi{};
  pi.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&pi, path.string().c_str())) {
    throw FormatError("cannot read mask '" + path.string() + "': " + pi.message);
  }
  pi.format = PNG_FORMAT_RGBA;
  std::vector<std::uint8_t> px(PNG_IMAGE_SIZE(pi));
  if (!png_image_finish_read(&pi, nullptr, px.data(), 0, nullptr)) {
    png_image_free(&pi);
    throw FormatError("cannot decode mask '" + path.string() + "': " + pi.message);
  }
  const int w = static_cast<int>(pi.width);
  const int h = static_cast<int>(pi.height);
  Matrix m(h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const std::uint8_t* p = &px[(static_cast<std::size_t>(y) * w + x) * 4];
      if (p[0] != p[1] || p[1] != p[2] || p[3] != 255) {
        throw FormatError("mask '" + path.string() + "' is not a single-channel image");
      }
      m(y, x) = p[0] / 255.0;
    }
  }
  try {
    return SegMask(std::move(m), concept_id);
  } catch (const ArgumentError& e) {
    throw ValidationError("mask '" + path.string() + "': " + e.what());
  }
}

enum class MaskResizeMode { Soft, Binary };

// Soft: area average (guidance target). Binary: 1 wherever the output cell
// covers any source value > 0 (support of the inverse mask). On upscales that
// is plain nearest-neighbour replication.
inline SegMask resize_mask(const SegMask& mask, int height, int width, MaskResizeMode mode) {
  if (height <= 0 || width <= 0) throw ArgumentError("resize_mask: target size must be positive");
  if (mode == MaskResizeMode::Soft) {
    Matrix v = area_resize(mask.values(), height, width).cwiseMax(0.0).cwiseMin(1.0);
    return SegMask(std::move(v), mask.concept_id());
  }
  Matrix v = area_resize(mask.values(), height, width);
  v = (v.array() > 0.0).select(Matrix::Ones(height, width), 0.0);
  return SegMask(std::move(v), mask.concept_id());
}

// Applies the image geometry (centre crop to square) to a mask, then builds
// the guidance target at resolution x resolution.
inline GuidanceTarget make_guidance_target(const SegMask& native, int resolution) {
  const Matrix& v = native.values();
  const Eigen::Index side = std::min(v.rows(), v.cols());
  Matrix cropped = v.block((v.rows() - side) / 2, (v.cols() - side) / 2, side, side);
  SegMask square(std::move(cropped), native.concept_id());
  SegMask soft = resize_mask(square, resolution, resolution, MaskResizeMode::Soft);
  SegMask binary = resize_mask(square, resolution, resolution, MaskResizeMode::Binary);
  return GuidanceTarget(std::move(soft), inverse_mask(binary));
}

inline bool is_binary_mask(const SegMask& m) {
  return ((m.values().array() == 0.0) || (m.values().array() == 1.0)).all();
}

struct ManifestOptions {
  bool strict = false;  // soft (non-binary) masks become errors
  const Vocabulary* vocabulary = &Vocabulary::toy();
};

namespace detail {

inline std::vector<fs::path> read_paths(const nlohmann::json& j, const char* key, const fs::path& root,
                                        const std::string& where, std::vector<std::string>& errors) {
  std::vector<fs::path> out;
  if (!j.contains(key) || !j.at(key).is_array()) {
    errors.push_back(where + ": missing array '" + key + "'");
    return out;
  }
  for (const auto& p : j.at(key)) {
    if (!p.is_string()) {
      errors.push_back(where + ": non-string entry in '" + key + "'");
      continue;
    }
    fs::path path(p.get<std::string>());
    out.push_back(path.is_absolute() ? path : root / path);
  }
  return out;
}

inline std::optional<Image> check_image(const fs::path& p, const std::string& where, std::vector<std::string>& errors) {
  if (!fs::exists(p)) {
    errors.push_back(where + ": image '" + p.string() + "' does not exist");
    return std::nullopt;
  }
  try {
    return read_png(p.string());
  } catch (const std::exception& e) {
    errors.push_back(where + ": image '" + p.string() + "' does not decode (" + e.what() + ")");
    return std::nullopt;
  }
}

inline void check_mask(const fs::path& mask, const std::optional<Image>& image, const std::string& where,
                       const ManifestOptions& options, std::vector<std::string>& errors,
                       std::vector<std::string>& warnings) {
  if (!fs::exists(mask)) {
    errors.push_back(where + ": mask '" + mask.string() + "' does not exist");
    return;
  }
  try {
    const SegMask m = load_mask(mask);
    if (image && (m.rows() != image->height || m.cols() != image->width)) {
      errors.push_back(where + ": mask '" + mask.string() + "' size differs from its image");
    }
    if (!is_binary_mask(m)) {
      const std::string msg = where + ": mask '" + mask.string() + "' has soft (non-binary) values";
      (options.strict ? errors : warnings).push_back(msg);
    }
  } catch (const std::exception& e) {
    errors.push_back(where + ": " + e.what());
  }
}

}  // namespace detail

// Parses and eagerly validates a manifest. Every violation is collected and
// reported in one ValidationError.
inline ConceptManifest load_manifest(const fs::path& path, const ManifestOptions& options = {}) {
  if (!fs::exists(path)) throw ValidationError("manifest '" + path.string() + "' does not exist");
  nlohmann::json j;
  try {
    std::ifstream in(path);
    j = nlohmann::json::parse(in);
  } catch (const std::exception& e) {
    throw ValidationError("manifest '" + path.string() + "' does not parse: " + e.what());
  }

  ConceptManifest m;
  m.root = path.parent_path();
  std::vector<std::string> errors;

  if (!j.contains("concepts") || !j["concepts"].is_array() || j["concepts"].empty()) {
    errors.push_back("manifest has no concepts");
  } else {
    std::set<std::string> ids;
    std::set<std::string> identifiers;
    for (const auto& c : j["concepts"]) {
      ConceptEntry e;
      e.id = c.value("id", "");
      e.class_name = c.value("class", "");
      e.identifier = c.value("identifier", "");
      const std::string where = "concept '" + e.id + "'";
      if (e.id.empty()) errors.push_back("concept without id");
      if (!ids.insert(e.id).second) errors.push_back(where + ": duplicate id");
      if (e.class_name.empty()) errors.push_back(where + ": missing class");
      try {
        make_identifier(*options.vocabulary, e.identifier);
        if (!identifiers.insert(e.identifier).second) errors.push_back(where + ": identifier '" + e.identifier + "' reused");
      } catch (const std::exception& ex) {
        errors.push_back(where + ": " + ex.what());
      }
      e.images = detail::read_paths(c, "images", m.root, where, errors);
      e.masks = detail::read_paths(c, "masks", m.root, where, errors);
      if (e.images.empty()) errors.push_back(where + ": no images");
      for (std::size_t i = 0; i < e.images.size(); ++i) {
        const auto img = detail::check_image(e.images[i], where, errors);
        if (i >= e.masks.size()) {
          errors.push_back(where + ": image '" + e.images[i].string() + "' has no mask");
          continue;
        }
        detail::check_mask(e.masks[i], img, where, options, errors, m.warnings);
      }
      if (e.masks.size() > e.images.size()) errors.push_back(where + ": more masks than images");
      m.concepts.push_back(std::move(e));
    }
  }

  if (j.contains("groups")) {
    std::set<std::string> group_ids;
    for (const auto& g : j["groups"]) {
      ConceptGroup grp;
      grp.id = g.value("id", "");
      const std::string where = "group '" + grp.id + "'";
      if (grp.id.empty()) errors.push_back("group without id");
      if (!group_ids.insert(grp.id).second) errors.push_back(where + ": duplicate id");
      if (g.contains("concepts") && g["concepts"].is_array()) {
        for (const auto& c : g["concepts"]) grp.concepts.push_back(c.get<std::string>());
      }
      if (grp.concepts.size() != 2 || grp.concepts[0] == grp.concepts[1]) {
        errors.push_back(where + ": a group pairs exactly two distinct concepts");
      }
      for (const auto& cid : grp.concepts) {
        const bool known = std::any_of(m.concepts.begin(), m.concepts.end(), [&](const auto& c) { return c.id == cid; });
        if (!known) errors.push_back(where + ": unknown concept '" + cid + "'");
      }
      grp.images = detail::read_paths(g, "images", m.root, where, errors);
      if (grp.images.empty()) errors.push_back(where + ": no images");
      std::vector<std::optional<Image>> decoded;
      for (const auto& p : grp.images) decoded.push_back(detail::check_image(p, where, errors));
      for (const auto& cid : grp.concepts) {
        if (!g.contains("masks") || !g["masks"].contains(cid)) {
          errors.push_back(where + ": no masks for member concept '" + cid + "'");
          continue;
        }
        auto masks = detail::read_paths(g["masks"], cid.c_str(), m.root, where, errors);
        for (std::size_t i = 0; i < grp.images.size(); ++i) {
          if (i >= masks.size()) {
            errors.push_back(where + ": image '" + grp.images[i].string() + "' has no mask for '" + cid + "'");
            continue;
          }
          detail::check_mask(masks[i], decoded[i], where, options, errors, m.warnings);
        }
        grp.masks[cid] = std::move(masks);
      }
      m.groups.push_back(std::move(grp));
    }
  }

  if (!errors.empty()) {
    std::string msg = "manifest '" + path.string() + "' is invalid:";
    for (const auto& e : errors) msg += "\n  - " + e;
    throw ValidationError(msg);
  }
  return m;
}

inline void save_manifest(const fs::path& path, const ConceptManifest& m) {
  auto rel = [&](const fs::path& p) { return fs::relative(p, path.parent_path()).generic_string(); };
  nlohmann::json j;
  j["concepts"] = nlohmann::json::array();
  for (const auto& c : m.concepts) {
    nlohmann::json e{{"id", c.id}, {"class", c.class_name}, {"identifier", c.identifier}};
    for (const auto& p : c.images) e["images"].push_back(rel(p));
    for (const auto& p : c.masks) e["masks"].push_back(rel(p));
    j["concepts"].push_back(e);
  }
  j["groups"] = nlohmann::json::array();
  for (const auto& g : m.groups) {
    nlohmann::json e{{"id", g.id}, {"concepts", g.concepts}};
    for (const auto& p : g.images) e["images"].push_back(rel(p));
    for (const auto& [cid, paths] : g.masks) {
      for (const auto& p : paths) e["masks"][cid].push_back(rel(p));
    }
    j["groups"].push_back(e);
  }
  std::ofstream(path) << j.dump(2) << "\n";
}

inline constexpr int kDefaultPriorCount = 200;

struct PriorSet {
  std::string class_name;
  std::vector<fs::path> images;
  std::string backbone_id;
  std::uint64_t seed = 0;
  std::string prompt;

  bool empty() const { return images.empty(); }
};

// Seed of prior image i; one independent stream per image.
inline std::uint64_t prior_seed(std::uint64_t seed, int index) { return seed * 1000003ULL + static_cast<std::uint64_t>(index); }

// Samples `count` images from the backbone prompted with the bare class name
// into <out_root>/<class>/<index>.png plus provenance.json.
inline PriorSet generate_priors(Backbone& backbone, const std::string& class_name, int count, std::uint64_t seed,
                                const fs::path& out_root) {
  if (count < 0) throw ArgumentError("generate_priors: negative count");
  check_backbone(backbone).require("sampling_to_image");
  PriorSet set;
  set.class_name = class_name;
  set.backbone_id = backbone.id();
  set.seed = seed;
  set.prompt = class_name;
  const fs::path dir = out_root / class_name;
  fs::create_directories(dir);
  const TokenSequence tokens = tokenize(backbone.vocabulary(), class_name);
  for (int i = 0; i < count; ++i) {
    const SampleResult s = sample_latent(backbone, tokens, prior_seed(seed, i));
    const fs::path p = dir / (std::to_string(i) + ".png");
    write_png(p.string(), backbone.decode(s.latent));
    set.images.push_back(p);
  }
  nlohmann::json prov{{"backbone", set.backbone_id}, {"seed", seed}, {"count", count}, {"prompt", set.prompt}};
  std::ofstream(dir / "provenance.json") << prov.dump(2) << "\n";
  return set;
}

inline PriorSet load_priors(const fs::path& root, const std::string& class_name) {
  const fs::path dir = root / class_name;
  const fs::path prov_path = dir / "provenance.json";
  if (!fs::exists(prov_path)) throw ValidationError("prior set '" + dir.string() + "' has no provenance.json");
  nlohmann::json prov = nlohmann::json::parse(std::ifstream(prov_path));
  PriorSet set;
  set.class_name = class_name;
  set.backbone_id = prov.value("backbone", "");
  set.seed = prov.value("seed", std::uint64_t{0});
  set.prompt = prov.value("prompt", class_name);
  const int count = prov.value("count", 0);
  for (int i = 0; i < count; ++i) {
    const fs::path p = dir / (std::to_string(i) + ".png");
    if (!fs::exists(p)) throw ValidationError("prior set '" + dir.string() + "' is missing " + p.filename().string());
    set.images.push_back(p);
  }
  return set;
}

// ---------------------------------------------------------------------------
// Synthetic two-shape dataset: a red square and a blue disc on a dark
// background, with exact masks.

struct ShapesSample {
  Image image;
  Matrix square_mask;  // 1 inside the square
  Matrix disc_mask;    // 1 inside the disc
};

inline ShapesSample render_shapes(std::mt19937_64& rng, int size = 32) {
  std::uniform_int_distribution<int> side_d(size * 9 / 32, size * 13 / 32);
  std::uniform_int_distribution<int> radius_d(size * 5 / 32, size * 7 / 32);
  std::uniform_int_distribution<int> jitter(-8, 8);
  const int side = side_d(rng);
  const int radius = radius_d(rng);
  int sx = 0, sy = 0, cx = 0, cy = 0;
  for (int attempt = 0;; ++attempt) {
    sx = std::uniform_int_distribution<int>(1, size - side - 1)(rng);
    sy = std::uniform_int_distribution<int>(1, size - side - 1)(rng);
    cx = std::uniform_int_distribution<int>(radius + 1, size - radius - 2)(rng);
    cy = std::uniform_int_distribution<int>(radius + 1, size - radius - 2)(rng);
    const bool apart = cx + radius + 1 < sx || cx - radius - 1 > sx + side - 1 || cy + radius + 1 < sy ||
                       cy - radius - 1 > sy + side - 1;
    if (apart) break;
    if (attempt > 10000) throw std::runtime_error("render_shapes: cannot place shapes");
  }
  ShapesSample s;
  s.image = Image(size, size, 3);
  s.square_mask = Matrix::Zero(size, size);
  s.disc_mask = Matrix::Zero(size, size);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      int rgb[3] = {40 + jitter(rng), 40 + jitter(rng), 40 + jitter(rng)};
      if (x >= sx && x < sx + side && y >= sy && y < sy + side) {
        rgb[0] = 220 + jitter(rng);
        rgb[1] = 40 + jitter(rng);
        rgb[2] = 40 + jitter(rng);
        s.square_mask(y, x) = 1.0;
      } else if ((x - cx) * (x - cx) + (y - cy) * (y - cy) <= radius * radius) {
        rgb[0] = 40 + jitter(rng);
        rgb[1] = 70 + jitter(rng);
        rgb[2] = 220 + jitter(rng);
        s.disc_mask(y, x) = 1.0;
      }
      for (int c = 0; c < 3; ++c) s.image.at(x, y, c) = to_byte(rgb[c]);
    }
  }
  return s;
}

// Writes `count` two-shape images and a manifest with concepts "square"
// (identifier sks) and "disc" (identifier ktn) plus their pairing group.
inline ConceptManifest make_shapes_dataset(const fs::path& dir, int count, std::uint64_t seed) {
  if (count <= 0) throw ArgumentError("make_shapes_dataset: count must be positive");
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "masks" / "square");
  fs::create_directories(dir / "masks" / "disc");
  std::mt19937_64 rng(seed);
  ConceptManifest m;
  m.root = dir;
  ConceptEntry square{"square", "square", "sks", {}, {}};
  ConceptEntry disc{"disc", "circle", "ktn", {}, {}};
  ConceptGroup pair{"square+disc", {"square", "disc"}, {}, {}};
  for (int i = 0; i < count; ++i) {
    const ShapesSample s = render_shapes(rng);
    const std::string name = std::to_string(i) + ".png";
    write_png((dir / "images" / name).string(), s.image);
    write_png((dir / "masks" / "square" / name).string(), map_to_gray(s.square_mask));
    write_png((dir / "masks" / "disc" / name).string(), map_to_gray(s.disc_mask));
    square.images.push_back(dir / "images" / name);
    square.masks.push_back(dir / "masks" / "square" / name);
    disc.images.push_back(dir / "images" / name);
    disc.masks.push_back(dir / "masks" / "disc" / name);
    pair.images.push_back(dir / "images" / name);
    pair.masks["square"].push_back(dir / "masks" / "square" / name);
    pair.masks["disc"].push_back(dir / "masks" / "disc" / name);
  }
  m.concepts = {square, disc};
  m.groups = {pair};
  save_manifest(dir / "manifest.json", m);
  return m;
}

// ---------------------------------------------------------------------------
// Captioned shapes used to pretrain the toy backbone before fine-tuning: one
// or two shapes of named colours, captioned "a red square and a blue circle".

struct CaptionedShape {
  Image image;
  std::string caption;
};

inline CaptionedShape render_captioned_shapes(std::mt19937_64& rng, int size = 32) {
  static constexpr std::array<std::pair<const char*, std::array<int, 3>>, 6> kColours = {{
      {"red", {220, 40, 40}},
      {"green", {40, 200, 60}},
      {"blue", {40, 70, 220}},
      {"yellow", {230, 220, 50}},
      {"purple", {150, 50, 200}},
      {"white", {235, 235, 235}},
  }};
  static constexpr std::array<const char*, 3> kShapes = {"square", "circle", "triangle"};
  std::uniform_int_distribution<int> jitter(-8, 8);
  const int count = std::uniform_int_distribution<int>(1, 2)(rng);
  CaptionedShape out;
  out.image = Image(size, size, 3);
  std::vector<int> owner(static_cast<std::size_t>(size * size), -1);
  std::vector<std::array<int, 3>> fill;
  for (int k = 0; k < count; ++k) {
    const auto& [colour, rgb] = kColours[std::uniform_int_distribution<std::size_t>(0, kColours.size() - 1)(rng)];
    const char* shape = kShapes[std::uniform_int_distribution<std::size_t>(0, kShapes.size() - 1)(rng)];
    const int r = std::uniform_int_distribution<int>(size * 4 / 32, size * 7 / 32)(rng);
    const int cx = std::uniform_int_distribution<int>(r + 1, size - r - 2)(rng);
    const int cy = std::uniform_int_distribution<int>(r + 1, size - r - 2)(rng);
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        const int dx = x - cx;
        const int dy = y - cy;
        bool inside = false;
        if (std::string_view(shape) == "square") inside = std::abs(dx) <= r && std::abs(dy) <= r;
        if (std::string_view(shape) == "circle") inside = dx * dx + dy * dy <= r * r;
        if (std::string_view(shape) == "triangle") inside = dy <= r && dy >= -r && 2 * std::abs(dx) <= dy + r;
        if (inside) owner[static_cast<std::size_t>(y * size + x)] = k;
      }
    }
    fill.push_back(rgb);
    out.caption += std::string(k == 0 ? "a " : " and a ") + colour + " " + shape;
  }
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const int k = owner[static_cast<std::size_t>(y * size + x)];
      for (int c = 0; c < 3; ++c) {
        const int base = k < 0 ? 40 : fill[static_cast<std::size_t>(k)][static_cast<std::size_t>(c)];
        out.image.at(x, y, c) = to_byte(base + jitter(rng));
      }
    }
  }
  return out;
}

}  // namespace textloc
