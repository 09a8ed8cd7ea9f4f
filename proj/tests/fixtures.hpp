#pragma once

// Small library-backed fixtures shared by several test binaries.

#include <memory>
#include <string>

#include "textloc/backbone.hpp"
#include "textloc/toy_denoiser.hpp"

namespace fixtures {

using namespace textloc;

inline ToyDenoiserConfig small_config(std::uint64_t seed = 0) {
  ToyDenoiserConfig c;
  c.latent = LatentSpec{16, 16, 3, 1};
  c.channels = 8;
  c.text_dim = 12;
  c.seed = seed;
  return c;
}

// Backbone whose advertised capabilities can be switched off; it forwards
// everything else to a toy denoiser.
class RestrictedBackbone final : public Backbone {
 public:
  RestrictedBackbone(BackboneCapabilities caps) : caps_(caps), inner_(small_config()) {}
  std::string id() const override { return "restricted"; }
  BackboneCapabilities capabilities() const override { return caps_; }
  LatentSpec latent_spec() const override { return inner_.latent_spec(); }
  const NoiseSchedule& schedule() const override { return inner_.schedule(); }
  const Vocabulary& vocabulary() const override { return inner_.vocabulary(); }
  ParameterStore& parameters() override { return inner_.parameters(); }
  const ParameterStore& parameters() const override { return inner_.parameters(); }
  std::string embedding_table() const override { return inner_.embedding_table(); }
  std::vector<AttentionLayerConfig> attention_layers() const override { return inner_.attention_layers(); }
  void attach_capture(std::shared_ptr<AttentionCapture> c) override { inner_.attach_capture(std::move(c)); }
  ad::Var predict_noise(ad::Tape& t, const BoundParameters& p, const Matrix& z, int step, const TokenSequence& tok) override {
    return inner_.predict_noise(t, p, z, step, tok);
  }
  Matrix encode(const Image& i) const override { return inner_.encode(i); }
  Image decode(const Matrix& l) const override { return inner_.decode(l); }

 private:
  BackboneCapabilities caps_;
  ToyDenoiser inner_;
};

}  // namespace fixtures
