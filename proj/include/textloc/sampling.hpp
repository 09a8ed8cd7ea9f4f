#pragma once

// Ancestral DDPM sampling with optional attention probing, and the
// noised-input probe used to measure concept localisation.

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "textloc/attention.hpp"
#include "textloc/backbone.hpp"
#include "textloc/diffusion.hpp"
#include "textloc/image.hpp"

namespace textloc {

struct ProbeRequest {
  std::vector<int> token_positions;  // one map per entry
  std::set<int> factors{2, 4, 8};
  int resolution = kDefaultMapResolution;
};

struct ProbeResult {
  std::vector<Matrix> maps;            // timestep-mean aggregated map per token position
  std::vector<std::string> layer_ids;  // layers contributing
  int first_timestep = 0;
  int last_timestep = 0;
  int timestep_count = 0;
};

struct SampleResult {
  Matrix latent;
  ProbeResult probe;  // empty unless probing was requested
};

namespace detail {

// Folds the capture buffer of one forward pass into per-token running means.
inline void accumulate_probe(const AttentionCapture& capture, const ProbeRequest& req,
                             std::vector<RunningMapMean>& means, std::vector<std::string>& layer_ids) {
  std::vector<const AttentionRecord*> records;
  for (const CapturedAttention& c : capture.entries()) records.push_back(&c.record);
  if (records.empty()) throw ConfigurationError("probe: no attention captured");
  if (layer_ids.empty()) {
    for (const AttentionRecord* r : records) layer_ids.push_back(r->layer.layer_id);
  }
  for (std::size_t i = 0; i < req.token_positions.size(); ++i) {
    std::vector<Matrix> maps;
    for (const AttentionRecord* r : records) maps.push_back(extract_token_map(*r, req.token_positions[i]));
    means[i].add(aggregate_maps(maps, req.resolution, req.resolution, req.token_positions[i]).values);
  }
}

inline ProbeResult finish_probe(const std::vector<RunningMapMean>& means, std::vector<std::string> layer_ids,
                                int first, int last, int count) {
  ProbeResult r;
  for (const RunningMapMean& m : means) r.maps.push_back(m.mean());
  r.layer_ids = std::move(layer_ids);
  r.first_timestep = first;
  r.last_timestep = last;
  r.timestep_count = count;
  return r;
}

}  // namespace detail

// Draws one latent from the backbone. With `probe`, the aggregated maps of the
// requested tokens are averaged over every denoising step. The backbone's
// capture slot is detached on return.
inline SampleResult sample_latent(Backbone& backbone, const TokenSequence& tokens, std::uint64_t seed,
                                  const ProbeRequest* probe = nullptr) {
  check_backbone(backbone).require("sampling_to_image");
  const LatentSpec ls = backbone.latent_spec();
  const NoiseSchedule& sched = backbone.schedule();
  std::mt19937_64 rng(seed);
  Matrix z = standard_normal(ls.positions(), ls.channels, rng);

  std::shared_ptr<AttentionCapture> capture;
  std::vector<RunningMapMean> means;
  std::vector<std::string> layer_ids;
  if (probe) {
    capture = register_capture(backbone, probe->factors);
    means.resize(probe->token_positions.size());
  } else {
    backbone.attach_capture(nullptr);
  }
  for (int t = sched.steps(); t >= 1; --t) {
    ad::Tape tape;
    const BoundParameters params = backbone.parameters().bind(tape, /*frozen=*/true);
    const Matrix eps = backbone.predict_noise(tape, params, z, t, tokens).value();
    if (capture) {
      detail::accumulate_probe(*capture, *probe, means, layer_ids);
      capture->clear();
    }
    z = ddpm_step(sched, z, eps, t, rng);
  }
  backbone.attach_capture(nullptr);

  SampleResult out;
  out.latent = std::move(z);
  if (probe) out.probe = detail::finish_probe(means, std::move(layer_ids), sched.steps(), 1, sched.steps());
  return out;
}

// Timestep-mean aggregated maps for a known clean latent: z0 is noised at each
// timestep in `timesteps` with fresh noise and the resulting maps averaged.
inline ProbeResult probe_noised(Backbone& backbone, const Matrix& z0, const TokenSequence& tokens,
                                const ProbeRequest& probe, const std::vector<int>& timesteps, std::mt19937_64& rng) {
  if (timesteps.empty()) throw ArgumentError("probe_noised: no timesteps");
  auto capture = register_capture(backbone, probe.factors);
  std::vector<RunningMapMean> means(probe.token_positions.size());
  std::vector<std::string> layer_ids;
  for (int t : timesteps) {
    ad::Tape tape;
    const BoundParameters params = backbone.parameters().bind(tape, /*frozen=*/true);
    const Matrix eps = standard_normal(z0.rows(), z0.cols(), rng);
    backbone.predict_noise(tape, params, add_noise(backbone.schedule(), z0, t, eps), t, tokens);
    detail::accumulate_probe(*capture, probe, means, layer_ids);
    capture->clear();
  }
  backbone.attach_capture(nullptr);
  return detail::finish_probe(means, std::move(layer_ids), timesteps.front(), timesteps.back(),
                              static_cast<int>(timesteps.size()));
}

// Probe output: 8-bit map (value = round(255 v)) at `png` and a sidecar with
// the same stem and a .json extension.
inline void write_probe(const std::filesystem::path& png, const Matrix& map, const ProbeResult& probe, int token_index) {
  if (png.has_parent_path()) std::filesystem::create_directories(png.parent_path());
  write_png(png.string(), map_to_gray(map));
  nlohmann::json side{{"layer_ids", probe.layer_ids},
                      {"token_index", token_index},
                      {"timestep_range", {probe.first_timestep, probe.last_timestep}},
                      {"timestep_count", probe.timestep_count}};
  std::filesystem::path json_path = png;
  json_path.replace_extension(".json");
  std::ofstream(json_path) << side.dump(2) << "\n";
}

}  // namespace textloc
