// Acceptance suite: one PASS/FAIL line per criterion, exit status 0 only when
// every criterion passes. Oracles come from support.hpp.

#include <nlohmann/json.hpp>

#include <chrono>
#include <cmath>
#include <algorithm>
#include <fstream>
#include <functional>
#include <map>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "cli.hpp"
#include "fixtures.hpp"
#include "support.hpp"
#include "textloc/trainer.hpp"

using namespace textloc;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v, int digits = 4) {
  std::ostringstream s;
  s.precision(digits);
  s << v;
  return s.str();
}

Matrix random_mask(int n, std::mt19937_64& rng) {
  Matrix m = oracle::uniform(n, n, rng);
  std::bernoulli_distribution zero(0.4), binary(0.5);
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    if (zero(rng)) m.data()[i] = 0.0;
    else if (binary(rng)) m.data()[i] = 1.0;
  }
  m(0, 0) = 1.0;
  return m;
}

// ---------------------------------------------------------------------------

Verdict loss_oracle() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(101);
  double worst = 0.0;
  int cases = 0;
  for (int n : {4, 8, 17}) {
    for (int i = 0; i < 200; ++i) {
      const Matrix attn = oracle::uniform(n, n, rng);
      const SegMask seg(random_mask(n, rng), "c");
      worst = std::max(worst, std::abs(hard_guidance_loss(attn, seg) - oracle::hard_loss(attn, seg.values())));
      worst = std::max(worst, std::abs(soft_guidance_loss(attn, seg) - oracle::soft_loss(attn, seg.values())));
      ++cases;
    }
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-9 && secs < 5.0,
          std::to_string(cases) + " cases per mode, max |diff| " + fmt(worst) + ", " + fmt(secs, 3) + " s"};
}

// Plain forward of softmax -> head mean -> bilinear mean -> loss, coded
// without the library.
double oracle_forward(const std::vector<std::vector<Matrix>>& logits, const std::vector<std::pair<int, int>>& grids,
                      int token, int res, const Matrix& seg, bool soft) {
  Matrix agg = Matrix::Zero(res, res);
  for (std::size_t l = 0; l < logits.size(); ++l) {
    const auto [gh, gw] = grids[l];
    Matrix grid = Matrix::Zero(gh, gw);
    for (const Matrix& z : logits[l]) {
      for (int p = 0; p < z.rows(); ++p) {
        double mx = z.row(p).maxCoeff(), sum = 0;
        for (int k = 0; k < z.cols(); ++k) sum += std::exp(z(p, k) - mx);
        grid(p / gw, p % gw) += std::exp(z(p, token) - mx) / sum / static_cast<double>(logits[l].size());
      }
    }
    agg += oracle::bilinear(grid, res, res);
  }
  agg /= static_cast<double>(logits.size());
  return soft ? oracle::soft_loss(agg, seg) : oracle::hard_loss(agg, seg);
}

Verdict gradient_check() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(202);
  double worst = 0.0;
  for (int config = 0; config < 20; ++config) {
    const int heads = 1 + config % 3;
    const int tokens = 3 + config % 4;
    const int token = config % tokens;
    const int res = 6 + config % 5;
    const bool soft = config % 2 == 1;
    std::vector<std::pair<int, int>> grids;
    for (int f : {2, 4, 8}) {
      if (config % 4 == 3 && f == 8) continue;  // some configurations use two layers
      grids.emplace_back(16 / f, 16 / f);
    }
    std::vector<std::vector<Matrix>> logits(grids.size());
    for (std::size_t l = 0; l < grids.size(); ++l) {
      for (int h = 0; h < heads; ++h) logits[l].push_back(oracle::gaussian(grids[l].first * grids[l].second, tokens, rng, 0.0, 1.5));
    }
    const Matrix seg = random_mask(res, rng);
    const GuidanceTarget target{SegMask(seg, "c")};

    ad::Tape tape;
    std::vector<std::vector<ad::Var>> leaves(grids.size());
    std::vector<ad::Var> maps;
    for (std::size_t l = 0; l < grids.size(); ++l) {
      std::vector<ad::Var> head_maps;
      for (const Matrix& z : logits[l]) {
        leaves[l].push_back(tape.leaf(z));
        head_maps.push_back(ad::softmax_rows(leaves[l].back()));
      }
      maps.push_back(ad::extract_token_map(head_maps, grids[l].first, grids[l].second, token));
    }
    const ad::Var loss = ad::guidance_loss(ad::aggregate_maps(maps, res, res), target, soft ? GuidanceMode::Soft : GuidanceMode::Hard);
    tape.backward(loss);

    for (std::size_t l = 0; l < grids.size(); ++l) {
      for (std::size_t h = 0; h < logits[l].size(); ++h) {
        const Matrix fd = oracle::numeric_gradient(
            [&](const Matrix& z) {
              auto copy = logits;
              copy[l][h] = z;
              return oracle_forward(copy, grids, token, res, seg, soft);
            },
            logits[l][h], 1e-4);
        worst = std::max(worst, oracle::norm_relative_error(tape.grad(leaves[l][h]), fd));
      }
    }
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-4 && secs < 60.0, "20 configurations, max relative error " + fmt(worst) + ", " + fmt(secs, 3) + " s"};
}

Verdict normalisation() {
  std::mt19937_64 rng(303);
  std::uniform_int_distribution<int> heads_d(1, 4), dim_d(1, 16), tok_d(1, 30), side_d(1, 8);
  std::uniform_real_distribution<double> scale_d(0.01, 30.0);
  double worst_row = 0.0, lo = 1.0, hi = 0.0;
  for (int call = 0; call < 1000; ++call) {
    AttentionLayerConfig layer{"l", 2, heads_d(rng), dim_d(rng)};
    const int gh = side_d(rng), gw = side_d(rng), tokens = tok_d(rng);
    const int d_model = dim_d(rng), d_text = dim_d(rng), dv = dim_d(rng);
    const double s = scale_d(rng);
    const Matrix x = oracle::gaussian(gh * gw, d_model, rng, 0.0, s);
    const Matrix text = oracle::gaussian(tokens, d_text, rng, 0.0, s);
    const CrossAttentionWeights w{oracle::gaussian(d_model, layer.head_count * layer.key_dim, rng),
                                  oracle::gaussian(d_text, layer.head_count * layer.key_dim, rng),
                                  oracle::gaussian(d_text, layer.head_count * dv, rng)};
    const CrossAttentionResult r = cross_attention(x, text, w, layer, gh, gw);
    worst_row = std::max(worst_row, max_row_sum_error(r.record));
    const Matrix agg = aggregate_maps({extract_token_map(r.record, call % tokens)}, 12, 12).values;
    lo = std::min(lo, agg.minCoeff());
    hi = std::max(hi, agg.maxCoeff());
  }
  return {worst_row < 1e-5 && lo >= 0.0 && hi <= 1.0,
          "1000 calls, max |row sum - 1| " + fmt(worst_row) + ", aggregated range [" + fmt(lo) + ", " + fmt(hi) + "]"};
}

ToyDenoiserConfig freezing_model() {
  ToyDenoiserConfig c;
  c.latent = LatentSpec{16, 16, 3, 1};
  c.channels = 8;
  c.text_dim = 12;
  c.seed = 4;
  return c;
}

Verdict freezing(const ConceptManifest& manifest) {
  bool ok = true;
  std::ostringstream detail;
  for (ParameterSet set : {ParameterSet::KV, ParameterSet::QV, ParameterSet::QKV}) {
    ToyDenoiser model(freezing_model());
    TrainConfig cfg;
    cfg.learning_rate = 1e-3;
    cfg.lambda = 0.0;
    cfg.attn_resolution = 16;
    cfg.selector = ParameterSetSelector{set, false};
    const TrainingData data = build_training_data(model, manifest, "square", cfg.attn_resolution);
    auto all = [](ParamKind) { return true; };
    const ParameterSnapshot before = snapshot(model.parameters(), all);
    const ParameterSnapshot proj_before = snapshot(model.parameters());
    Trainer trainer(model, cfg);
    for (int s = 1; s <= 50; ++s) {
      std::mt19937_64 rng = step_rng(9, s);
      trainer.step(s, draw_batch(data.examples, 2, rng), {}, rng);
    }
    const ParameterSnapshot after = snapshot(model.parameters(), all);
    const WeightChangeReport report = weight_change_rate(proj_before, snapshot(model.parameters()), 50);
    int frozen_moved = 0, trained_still = 0;
    for (std::size_t i = 0; i < before.size(); ++i) {
      if (!cfg.selector.selects(before[i].kind) && !(before[i].value == after[i].value)) ++frozen_moved;  // bitwise
    }
    for (const LayerChange& l : report.layers) {
      if (cfg.selector.selects(l.kind)) {
        trained_still += !(l.delta > 0.0);
      } else {
        frozen_moved += l.delta != 0.0;
      }
    }
    ok = ok && frozen_moved == 0 && trained_still == 0;
    detail << to_string(set) << ": dQ " << fmt(report.mean(ParamKind::Query)) << " dK " << fmt(report.mean(ParamKind::Key))
           << " dV " << fmt(report.mean(ParamKind::Value)) << " (frozen moved " << frozen_moved << ", trained unchanged "
           << trained_still << "); ";
  }
  return {ok, "50 steps each; " + detail.str()};
}

// ---------------------------------------------------------------------------
// Toy localisation experiments

struct Localisation {
  double in = 0.0;   // mean aggregated attention inside the square
  double out = 0.0;  // and outside it
  double ratio() const { return in / out; }
};

constexpr int kProbeResolution = 64;

class Lab {
 public:
  explicit Lab(const fs::path& root) : root_(root) {
    manifest_ = make_shapes_dataset(root_ / "shapes", 64, 7);
    std::mt19937_64 held_rng(999);
    for (int i = 0; i < 8; ++i) held_.push_back(render_shapes(held_rng));
  }

  const ConceptManifest& manifest() const { return manifest_; }

  ToyDenoiserConfig model_config() const {
    ToyDenoiserConfig mc;
    mc.text_dim = 96;
    mc.seed = 1;
    return mc;
  }

  // Base model pretrained on captioned shapes, built once.
  fs::path base() {
    const fs::path dir = root_ / "base";
    if (!fs::exists(dir / "manifest.json")) {
      const auto t0 = std::chrono::steady_clock::now();
      ToyDenoiser model(model_config());
      pretrain_on_shapes(model, PretrainOptions{3000, 2e-3, 4, 1});
      save_checkpoint(dir, model, 0, nlohmann::json(model.config()));
      pretrain_seconds_ = seconds_since(t0);
    }
    return dir;
  }
  double pretrain_seconds() const { return pretrain_seconds_; }

  TrainConfig config(GuidanceMode mode, ParameterSet set, int steps, std::uint64_t seed) {
    TrainConfig cfg;
    cfg.steps = steps;
    cfg.learning_rate = 1e-4;
    cfg.lambda = 0.0;
    cfg.guidance_mode = mode;
    cfg.selector = ParameterSetSelector{set, true};
    cfg.attn_resolution = kProbeResolution;
    cfg.seed = seed;
    cfg.target = "square";
    cfg.checkpoint_every = steps;
    cfg.base_checkpoint = base().string();
    cfg.model = model_config();
    return cfg;
  }

  FinetuneResult train(const TrainConfig& cfg, const std::string& name) {
    auto model = make_backbone(cfg);
    return finetune(cfg, manifest_, *model, root_ / name);
  }

  // Timestep-mean identifier attention on noised held-out images.
  Localisation probe(const fs::path& checkpoint) {
    auto model = load_toy_checkpoint(checkpoint).model;
    const RenderedPrompt prompt = render_prompt(model->vocabulary(), single_concept_template(),
                                                {Binding{make_identifier(model->vocabulary(), "sks"), "square"}});
    ProbeRequest req;
    req.token_positions = {prompt.identifier_positions[0][0]};
    req.resolution = kProbeResolution;
    std::vector<int> ts;
    for (int t = 1; t <= model->schedule().steps(); t += 3) ts.push_back(t);
    std::mt19937_64 rng(5);
    double in = 0, out = 0;
    long ni = 0, no = 0;
    for (const ShapesSample& h : held_) {
      const Matrix map = probe_noised(*model, image_to_latent(h.image), prompt.tokens, req, ts, rng).maps[0];
      const Matrix mask = nearest_resize(h.square_mask, map.rows(), map.cols());
      for (Eigen::Index i = 0; i < map.size(); ++i) {
        if (mask.data()[i] > 0.5) {
          in += map.data()[i];
          ++ni;
        } else {
          out += map.data()[i];
          ++no;
        }
      }
    }
    return Localisation{in / static_cast<double>(ni), out / static_cast<double>(no)};
  }

 private:
  fs::path root_;
  ConceptManifest manifest_;
  std::vector<ShapesSample> held_;
  double pretrain_seconds_ = 0.0;
};

struct LocalisationRuns {
  Localisation start, hard, none, soft;
  double seconds = 0.0;
};

LocalisationRuns localisation_runs(Lab& lab) {
  lab.base();
  const auto t0 = std::chrono::steady_clock::now();
  LocalisationRuns r;
  const int steps = 2000;
  const FinetuneResult hard = lab.train(lab.config(GuidanceMode::Hard, ParameterSet::KV, steps, 1), "hard");
  const FinetuneResult none = lab.train(lab.config(GuidanceMode::None, ParameterSet::KV, steps, 1), "none");
  r.seconds = seconds_since(t0) + lab.pretrain_seconds();  // the soft run belongs to the next criterion
  const FinetuneResult soft = lab.train(lab.config(GuidanceMode::Soft, ParameterSet::KV, steps, 1), "soft");
  r.start = lab.probe(hard.run_dir / "checkpoints" / "initial");
  r.hard = lab.probe(hard.final_checkpoint);
  r.none = lab.probe(none.final_checkpoint);
  r.soft = lab.probe(soft.final_checkpoint);
  return r;
}

Verdict hard_localisation(const LocalisationRuns& r) {
  const bool ok = r.hard.ratio() >= 2.0 && r.none.ratio() < 1.5 && r.seconds <= 900.0;
  return {ok, "2000 steps: hard in/out " + fmt(r.hard.ratio()) + " (need >= 2), no-guidance control " +
                  fmt(r.none.ratio()) + " (need < 1.5), step 0 " + fmt(r.start.ratio()) + "; " + fmt(r.seconds, 4) +
                  " s for base pretraining plus both runs"};
}

Verdict soft_suppression(const LocalisationRuns& r) {
  const double out_fraction = r.soft.out / r.start.out;
  // Soft guidance leaves in-mask attention alone: it must not rise above its
  // starting level and must end further from the binary target than the hard run.
  const bool not_driven = r.soft.in <= r.start.in && std::abs(1.0 - r.soft.in) > std::abs(1.0 - r.hard.in);
  return {out_fraction <= 0.5 && not_driven,
          "out-of-mask mean " + fmt(r.start.out) + " -> " + fmt(r.soft.out) + " (" + fmt(100 * out_fraction, 3) +
              "% of step 0, need <= 50%); in-mask " + fmt(r.start.in) + " -> " + fmt(r.soft.in) + " (hard run " +
              fmt(r.hard.in) + ")"};
}

Verdict weight_change_ordering(Lab& lab) {
  const auto t0 = std::chrono::steady_clock::now();
  int wins = 0;
  std::ostringstream detail;
  for (std::uint64_t seed = 11; seed <= 15; ++seed) {
    TrainConfig cfg = lab.config(GuidanceMode::None, ParameterSet::QKV, 1000, seed);
    cfg.selector.include_text_encoder = false;
    const FinetuneResult r = lab.train(cfg, "qkv_" + std::to_string(seed));
    const double dq = r.report.mean(ParamKind::Query), dv = r.report.mean(ParamKind::Value);
    wins += dv > dq;
    detail << "seed " << seed << " dV " << fmt(dv, 3) << " dQ " << fmt(dq, 3) << "; ";
  }
  return {wins >= 4, std::to_string(wins) + "/5 seeds with dV > dQ; " + detail.str() + fmt(seconds_since(t0), 3) + " s"};
}

// ---------------------------------------------------------------------------

Verdict kid_checks() {
  std::mt19937_64 rng(808);
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    const Matrix x = oracle::gaussian(5 + i % 4, 3, rng), y = oracle::gaussian(5 + i % 3, 3, rng, 0.2);
    worst = std::max(worst, std::abs(kid(x, y) - oracle::mmd(x, y)));
  }
  std::vector<double> null;
  int larger = 0;
  const int trials = 200;
  for (int t = 0; t < trials; ++t) {
    const Matrix x = oracle::gaussian(50, 8, rng), y = oracle::gaussian(50, 8, rng);
    const Matrix shifted = y.array() + 1.0;
    const double k0 = kid(x, y);
    null.push_back(k0);
    larger += kid(x, shifted) > k0;
  }
  double mean = 0, var = 0;
  for (double v : null) mean += v / trials;
  for (double v : null) var += (v - mean) * (v - mean) / (trials - 1);
  const double se = std::sqrt(var / trials);
  const bool ok = worst < 1e-10 && std::abs(mean) <= 3 * se && larger >= 0.95 * trials;
  return {ok, "oracle max |diff| " + fmt(worst) + "; null mean " + fmt(mean) + " (3 SE = " + fmt(3 * se) +
                  "); shifted larger in " + std::to_string(larger) + "/" + std::to_string(trials)};
}

// Images are told apart by their first pixel; distances come from a table.
class TablePerceptual final : public PerceptualDistanceProvider {
 public:
  explicit TablePerceptual(std::map<std::pair<int, int>, double> table) : table_(std::move(table)) {}
  std::string name() const override { return "table"; }
  double distance(const Image& a, const Image& b) const override {
    const int i = a.pixels[0], j = b.pixels[0];
    return i == j ? 0.0 : table_.at({std::min(i, j), std::max(i, j)});
  }

 private:
  std::map<std::pair<int, int>, double> table_;
};

Image tagged(int tag) {
  Image im(2, 2, 1);
  im.pixels[0] = static_cast<std::uint8_t>(tag);
  return im;
}

Verdict metric_identities() {
  auto v2 = [](double a, double b) {
    Vector v(2);
    v << a, b;
    return v;
  };
  int failed = 0;
  auto check = [&](bool c) { failed += !c; };
  check(clip_i({v2(0.3, 0.4)}, {v2(0.3, 0.4)}) == 1.0);
  check(clip_i({v2(1, 0)}, {v2(1, 0), v2(0, 1)}) == 0.5);
  check(clip_i({v2(1, 0)}, {v2(0, 1)}) == 0.0);
  const MockEmbeddingProvider emb;
  const Vector t = emb.embed_text("photo of a dog");
  check(std::abs(clip_t({t}, "photo of a dog", {}, emb) - 1.0) < 1e-12);
  check(std::abs(clip_t({-t}, "photo of a dog", {}, emb) + 1.0) < 1e-12);
  check(strip_identifiers("photo of a sks dog", {"sks"}) == "photo of a dog");
  check(emb.embed_text(strip_identifiers("photo of a sks dog", {"sks"})) == emb.embed_text("photo of a dog"));
  check(clip_t({t}, "photo of a sks dog", {"sks"}, emb) == clip_t({t}, "photo of a dog", {}, emb));
  const Vocabulary& v = Vocabulary::toy();
  check(join_words(strip_identifiers(tokenize(v, "photo of a sks dog"), {make_identifier(v, "sks")})) == "photo of a dog");
  const MockPerceptualDistance perc;
  std::mt19937_64 rng(9);
  const Image im = render_shapes(rng).image;
  check(lpips_diversity({im, im, im}, &perc) == 0.0);
  const TablePerceptual table({{{1, 2}, 0.2}, {{1, 3}, 0.4}, {{2, 3}, 0.6}});
  check(std::abs(lpips_diversity({tagged(1), tagged(2), tagged(3)}, &table) - 0.4) < 1e-15);
  check(kid(Matrix::Zero(2, 1), Matrix::Zero(2, 1)) == 0.0);
  check(kid(Matrix::Ones(2, 1), Matrix::Zero(2, 1)) == 7.0);
  return {failed == 0, std::to_string(13 - failed) + "/13 identities hold"};
}

std::vector<std::pair<std::string, std::string>> output_files(const fs::path& root) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    const std::string ext = e.path().extension().string();
    if (ext == ".png" || e.path().filename() == "metrics.csv" || e.path().filename() == "metrics.md") {
      out.emplace_back(fs::relative(e.path(), root).generic_string(), testing_support::read_bytes(e.path()));
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

Verdict end_to_end(const fs::path& root) {
  auto run = [](std::vector<std::string> args) {
    args.insert(args.begin(), "textloc");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream sink;
    return cli::run(static_cast<int>(argv.size()), argv.data(), sink, sink);
  };
  TrainConfig cfg;
  cfg.steps = 30;
  cfg.learning_rate = 1e-3;
  cfg.lambda = 0.0;
  cfg.attn_resolution = 32;
  cfg.target = "square";
  cfg.seed = 4;
  cfg.checkpoint_every = 10;
  cfg.model = fixtures::small_config(3);
  fs::create_directories(root);
  std::ofstream(root / "train.json") << nlohmann::json(cfg).dump(2);
  std::vector<std::vector<std::pair<std::string, std::string>>> outputs;
  for (const char* tag : {"first", "second"}) {
    const fs::path dir = root / tag;
    const std::string manifest = (dir / "data" / "manifest.json").string();
    int code = run({"--seed", "7", "prepare", manifest, "--synthesize", "3"});
    code |= run({"--seed", "7", "--config", (root / "train.json").string(), "--out", (dir / "run").string(), "train",
                 "--manifest", manifest});
    code |= run({"--seed", "7", "--out", (dir / "samples").string(), "sample", "--checkpoint",
                 (dir / "run" / "checkpoints" / "final").string(), "--count", "3", "--prompt-limit", "2"});
    code |= run({"--out", (dir / "eval").string(), "eval", "--run", (dir / "samples").string(), "--manifest", manifest});
    if (code != 0) return {false, std::string("CLI pipeline failed in run '") + tag + "'"};
    outputs.push_back(output_files(dir / "samples"));
    auto reports = output_files(dir / "eval");
    outputs.back().insert(outputs.back().end(), reports.begin(), reports.end());
  }
  const bool same = outputs[0] == outputs[1];
  return {same && outputs[0].size() >= 8,
          std::to_string(outputs[0].size()) + " image and report files compared, " + (same ? "byte-identical" : "differ")};
}

}  // namespace

int main() {
  testing_support::TempDir scratch("acceptance");
  int failures = 0;
  auto report = [&](int n, const std::string& name, const Verdict& v) {
    failures += !v.pass;
    std::cout << (v.pass ? "PASS" : "FAIL") << " criterion " << n << " (" << name << "): " << v.detail << std::endl;
  };

  report(1, "loss oracle equivalence", loss_oracle());
  report(2, "gradient verification", gradient_check());
  report(3, "attention normalisation", normalisation());

  Lab lab(scratch.path());
  report(4, "freezing soundness", freezing(lab.manifest()));
  const LocalisationRuns runs = localisation_runs(lab);
  report(5, "synthetic localisation, hard guidance", hard_localisation(runs));
  report(6, "soft-guidance suppression", soft_suppression(runs));
  report(7, "weight change ordering", weight_change_ordering(lab));
  report(8, "KID correctness", kid_checks());
  report(9, "metric identities", metric_identities());
  report(10, "end-to-end determinism", end_to_end(scratch / "e2e"));

  std::cout << (failures == 0 ? "all acceptance criteria pass" : std::to_string(failures) + " criterion/criteria failed")
            << std::endl;
  return failures == 0 ? 0 : 1;
}
