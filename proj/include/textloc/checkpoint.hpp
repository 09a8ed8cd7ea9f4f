#pragma once

// Checkpoint directories: manifest.json plus one raw little-endian float64
// file per parameter group (column-major), keyed by kind and layer id.

#include <nlohmann/json.hpp>

#include <bit>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>

#include "textloc/backbone.hpp"
#include "textloc/parameters.hpp"
#include "textloc/toy_denoiser.hpp"

namespace textloc {

static_assert(std::endian::native == std::endian::little, "checkpoint files assume a little-endian host");

inline constexpr const char* kCheckpointFormat = "textloc-checkpoint-1";

namespace detail {

inline std::string param_file_name(const ParameterGroup& g) { return to_string(g.kind) + "__" + g.layer_id + ".bin"; }

inline void write_matrix(const std::filesystem::path& path, const Matrix& m) {
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
}

inline Matrix read_matrix(const std::filesystem::path& path, Eigen::Index rows, Eigen::Index cols) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("missing parameter file '" + path.string() + "'");
  Matrix m(rows, cols);
  in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
  if (in.gcount() != static_cast<std::streamsize>(m.size() * sizeof(double))) {
    throw ValidationError("truncated parameter file '" + path.string() + "'");
  }
  return m;
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open '" + path.string() + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const std::exception& e) {
    throw ValidationError("'" + path.string() + "' does not parse: " + e.what());
  }
}

}  // namespace detail

// `model` describes how to rebuild the backbone; `extra` is stored verbatim.
inline void save_checkpoint(const std::filesystem::path& dir, const Backbone& backbone, int step,
                            const nlohmann::json& model, const nlohmann::json& extra = nlohmann::json::object()) {
  std::filesystem::create_directories(dir / "params");
  const NoiseSchedule& s = backbone.schedule();
  const LatentSpec ls = backbone.latent_spec();
  nlohmann::json j{{"format", kCheckpointFormat},
                   {"backbone", backbone.id()},
                   {"step", step},
                   {"model", model},
                   {"schedule", {{"T", s.steps()}, {"beta_start", s.beta_start()}, {"beta_end", s.beta_end()}}},
                   {"latent",
                    {{"height", ls.height}, {"width", ls.width}, {"channels", ls.channels},
                     {"encoder_factor", ls.encoder_factor}}},
                   {"extra", extra}};
  j["parameters"] = nlohmann::json::array();
  for (const ParameterGroup& g : backbone.parameters().groups()) {
    const std::string file = "params/" + detail::param_file_name(g);
    detail::write_matrix(dir / file, g.value);
    j["parameters"].push_back({{"kind", to_string(g.kind)},
                               {"layer_id", g.layer_id},
                               {"rows", g.value.rows()},
                               {"cols", g.value.cols()},
                               {"trainable", g.trainable},
                               {"file", file}});
  }
  std::ofstream(dir / "manifest.json") << j.dump(2) << "\n";
}

inline nlohmann::json read_checkpoint_manifest(const std::filesystem::path& dir) {
  nlohmann::json j = detail::read_json(dir / "manifest.json");
  if (j.value("format", "") != kCheckpointFormat) throw ValidationError("'" + dir.string() + "' is not a checkpoint");
  return j;
}

// Overwrites the values of `store` with those of the checkpoint. Every group
// must be present with a matching shape.
inline void load_parameters(const std::filesystem::path& dir, ParameterStore& store) {
  const nlohmann::json j = read_checkpoint_manifest(dir);
  for (const auto& p : j.at("parameters")) {
    const std::string layer = p.at("layer_id");
    if (!store.contains(layer)) throw ValidationError("checkpoint parameter '" + layer + "' unknown to the backbone");
    ParameterGroup& g = store.at(layer);
    const auto rows = p.at("rows").get<Eigen::Index>();
    const auto cols = p.at("cols").get<Eigen::Index>();
    if (g.value.rows() != rows || g.value.cols() != cols || to_string(g.kind) != p.at("kind")) {
      throw ValidationError("checkpoint parameter '" + layer + "' does not match the backbone");
    }
    g.value = detail::read_matrix(dir / p.at("file").get<std::string>(), rows, cols);
  }
}

// Snapshot of the attention projections stored in a checkpoint.
inline ParameterSnapshot load_snapshot(const std::filesystem::path& dir) {
  const nlohmann::json j = read_checkpoint_manifest(dir);
  ParameterSnapshot s;
  for (const auto& p : j.at("parameters")) {
    const ParamKind kind = parse_param_kind(p.at("kind"));
    if (!is_projection(kind)) continue;
    s.push_back(SnapshotEntry{kind, p.at("layer_id"),
                              detail::read_matrix(dir / p.at("file").get<std::string>(), p.at("rows"), p.at("cols"))});
  }
  return s;
}

struct LoadedCheckpoint {
  std::unique_ptr<ToyDenoiser> model;
  int step = 0;
  nlohmann::json extra;
};

inline LoadedCheckpoint load_toy_checkpoint(const std::filesystem::path& dir) {
  const nlohmann::json j = read_checkpoint_manifest(dir);
  if (j.value("backbone", "") != ToyDenoiser::kId) {
    throw CapabilityError("checkpoint backbone '" + j.value("backbone", "") + "' is not the toy denoiser");
  }
  LoadedCheckpoint out;
  out.model = std::make_unique<ToyDenoiser>(j.at("model").get<ToyDenoiserConfig>());
  load_parameters(dir, out.model->parameters());
  for (const auto& p : j.at("parameters")) out.model->parameters().at(p.at("layer_id")).trainable = p.value("trainable", false);
  out.step = j.value("step", 0);
  out.extra = j.value("extra", nlohmann::json::object());
  return out;
}

}  // namespace textloc
