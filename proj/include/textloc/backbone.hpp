#pragma once

// Contract between the fine-tuning toolkit and a denoising backbone.
//
// The bundled toy denoiser implements every capability. Adapters for external
// latent-diffusion models implement the same interface; features whose
// requirements are missing are reported, never silently emulated.

#include <memory>
#include <set>
#include <string>
#include <vector>

#include "textloc/attention.hpp"
#include "textloc/autodiff.hpp"
#include "textloc/conditioning.hpp"
#include "textloc/diffusion.hpp"
#include "textloc/errors.hpp"
#include "textloc/image.hpp"
#include "textloc/parameters.hpp"

namespace textloc {

struct BackboneCapabilities {
  bool latent_encode = false;
  bool latent_decode = false;
  bool noise_prediction = false;
  bool layer_enumeration = false;
  bool kind_labeled_projections = false;
  bool text_embedding = false;
};

class Backbone {
 public:
  virtual ~Backbone() = default;

  virtual std::string id() const = 0;
  virtual BackboneCapabilities capabilities() const = 0;
  virtual LatentSpec latent_spec() const = 0;
  virtual const NoiseSchedule& schedule() const = 0;
  virtual const Vocabulary& vocabulary() const = 0;

  virtual ParameterStore& parameters() = 0;
  virtual const ParameterStore& parameters() const = 0;
  // layer_id of the token embedding table (rows indexed by vocabulary id).
  virtual std::string embedding_table() const = 0;

  virtual std::vector<AttentionLayerConfig> attention_layers() const = 0;
  // Subsequent forward passes append to `capture` for accepted layers. A null
  // pointer detaches.
  virtual void attach_capture(std::shared_ptr<AttentionCapture> capture) = 0;

  // Predicted noise for z_t, positions x channels.
  virtual ad::Var predict_noise(ad::Tape& tape, const BoundParameters& params, const Matrix& z_t, int t,
                                const TokenSequence& tokens) = 0;

  virtual Matrix encode(const Image& image) const = 0;
  virtual Image decode(const Matrix& latent) const = 0;
};

struct CapabilityEntry {
  std::string feature;
  bool available = false;
  std::string reason;  // empty when available
};

struct CapabilityReport {
  std::vector<CapabilityEntry> entries;

  bool available(const std::string& feature) const {
    for (const auto& e : entries) {
      if (e.feature == feature) return e.available;
    }
    return false;
  }

  std::string reason(const std::string& feature) const {
    for (const auto& e : entries) {
      if (e.feature == feature) return e.reason;
    }
    return "unknown feature '" + feature + "'";
  }

  void require(const std::string& feature) const {
    if (!available(feature)) throw CapabilityError(feature + " unavailable: " + reason(feature));
  }
};

// Derives which toolkit features the backbone supports.
inline CapabilityReport check_backbone(const BackboneCapabilities& c) {
  auto missing = [](std::initializer_list<std::pair<bool, const char*>> reqs) {
    std::string out;
    for (const auto& [ok, name] : reqs) {
      if (ok) continue;
      if (!out.empty()) out += ", ";
      out += name;
    }
    return out.empty() ? out : "missing " + out;
  };
  CapabilityReport r;
  auto add = [&](const char* feature, std::string why) {
    r.entries.push_back(CapabilityEntry{feature, why.empty(), std::move(why)});
  };
  add("capture", missing({{c.layer_enumeration, "cross-attention layer enumeration"},
                          {c.noise_prediction, "noise prediction"}}));
  add("selector", missing({{c.kind_labeled_projections, "kind-labelled projections"}}));
  add("guidance", missing({{c.layer_enumeration, "cross-attention layer enumeration"},
                           {c.noise_prediction, "noise prediction"},
                           {c.text_embedding, "text embedding"}}));
  add("training", missing({{c.noise_prediction, "noise prediction"},
                           {c.latent_encode, "latent encode"},
                           {c.text_embedding, "text embedding"},
                           {c.kind_labeled_projections, "kind-labelled projections"}}));
  add("sampling_to_image", missing({{c.noise_prediction, "noise prediction"}, {c.latent_decode, "latent decode"}}));
  return r;
}

inline CapabilityReport check_backbone(const Backbone& backbone) { return check_backbone(backbone.capabilities()); }

// Attaches a fresh capture buffer for the layers whose downsample factor is
// in `factors`.
inline std::shared_ptr<AttentionCapture> register_capture(Backbone& backbone, const std::set<int>& factors) {
  check_backbone(backbone).require("capture");
  bool any = false;
  for (const AttentionLayerConfig& l : backbone.attention_layers()) any = any || factors.count(l.downsample_factor) > 0;
  if (!any) {
    std::string f;
    for (int x : factors) f += (f.empty() ? "" : ",") + std::to_string(x);
    throw ConfigurationError("no cross-attention layer matches downsample factors {" + f + "}");
  }
  auto capture = std::make_shared<AttentionCapture>(factors);
  backbone.attach_capture(capture);
  return capture;
}

}  // namespace textloc
