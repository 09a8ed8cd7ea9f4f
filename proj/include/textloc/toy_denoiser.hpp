#pragma once

// Desk-scale conditional denoiser.
//
// Identity "autoencoder" over a 32x32x3 working grid; an encoder-decoder of
// per-position residual MLP blocks with one cross-attention layer at each of
// the downsample factors 2, 4 and 8; a learned token embedding table with
// positional embeddings and a pooled sequence mixer as text encoder.

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "textloc/backbone.hpp"

namespace textloc {

struct ToyDenoiserConfig {
  LatentSpec latent{32, 32, 3, 1};
  int channels = 32;
  int text_dim = 96;  // wider than the U-Net channels, as in latent diffusion backbones
  int heads = 2;
  int key_dim = 8;
  int value_dim = 8;  // per head
  int max_tokens = 24;
  int timesteps = 100;
  std::uint64_t seed = 0;
};

inline void to_json(nlohmann::json& j, const ToyDenoiserConfig& c) {
  j = nlohmann::json{{"latent_height", c.latent.height}, {"latent_width", c.latent.width},
                     {"latent_channels", c.latent.channels}, {"encoder_factor", c.latent.encoder_factor},
                     {"channels", c.channels}, {"text_dim", c.text_dim}, {"heads", c.heads},
                     {"key_dim", c.key_dim}, {"value_dim", c.value_dim}, {"max_tokens", c.max_tokens},
                     {"timesteps", c.timesteps}, {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, ToyDenoiserConfig& c) {
  ToyDenoiserConfig d;
  c.latent.height = j.value("latent_height", d.latent.height);
  c.latent.width = j.value("latent_width", d.latent.width);
  c.latent.channels = j.value("latent_channels", d.latent.channels);
  c.latent.encoder_factor = j.value("encoder_factor", d.latent.encoder_factor);
  c.channels = j.value("channels", d.channels);
  c.text_dim = j.value("text_dim", d.text_dim);
  c.heads = j.value("heads", d.heads);
  c.key_dim = j.value("key_dim", d.key_dim);
  c.value_dim = j.value("value_dim", d.value_dim);
  c.max_tokens = j.value("max_tokens", d.max_tokens);
  c.timesteps = j.value("timesteps", d.timesteps);
  c.seed = j.value("seed", d.seed);
}

class ToyDenoiser final : public Backbone {
 public:
  static constexpr int kFactors[3] = {2, 4, 8};
  static constexpr const char* kId = "toy-denoiser-v1";

  explicit ToyDenoiser(ToyDenoiserConfig config = {})
      : config_(config), schedule_(NoiseSchedule::linear_scaled(config.timesteps)) {
    for (int f : kFactors) {
      validate_layer(AttentionLayerConfig{level_name(f) + ".attn", f, config_.heads, config_.key_dim},
                     config_.latent.height, config_.latent.width);
    }
    if (config_.channels <= 0 || config_.text_dim <= 0 || config_.value_dim <= 0 || config_.max_tokens <= 0) {
      throw ConfigurationError("toy denoiser: dimensions must be positive");
    }
    initialise();
  }

  const ToyDenoiserConfig& config() const { return config_; }

  std::string id() const override { return kId; }

  BackboneCapabilities capabilities() const override { return {true, true, true, true, true, true}; }
  LatentSpec latent_spec() const override { return config_.latent; }
  const NoiseSchedule& schedule() const override { return schedule_; }
  const Vocabulary& vocabulary() const override { return Vocabulary::toy(); }
  ParameterStore& parameters() override { return params_; }
  const ParameterStore& parameters() const override { return params_; }
  std::string embedding_table() const override { return "text.embedding"; }

  std::vector<AttentionLayerConfig> attention_layers() const override {
    std::vector<AttentionLayerConfig> out;
    for (int f : kFactors) out.push_back(AttentionLayerConfig{level_name(f) + ".attn", f, config_.heads, config_.key_dim});
    return out;
  }

  void attach_capture(std::shared_ptr<AttentionCapture> capture) override { capture_ = std::move(capture); }

  // Text encoder output, tokens x text_dim.
  ad::Var encode_text(const BoundParameters& p, const TokenSequence& tokens) const {
    if (tokens.size() == 0) throw ConfigurationError("toy denoiser: empty token sequence");
    if (static_cast<int>(tokens.size()) > config_.max_tokens) {
      throw ConfigurationError("toy denoiser: prompt has " + std::to_string(tokens.size()) + " tokens, limit " +
                               std::to_string(config_.max_tokens));
    }
    std::vector<int> positions(tokens.size());
    for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int>(i);
    ad::Var e = ad::add(ad::gather_rows(p.at("text.embedding"), tokens.ids), ad::gather_rows(p.at("text.position"), positions));
    ad::Var context = ad::silu(ad::add_row(ad::matmul(ad::mean_rows(e), p.at("text.mix.w")), p.at("text.mix.b")));
    return ad::add_row(e, context);
  }

  ad::Var predict_noise(ad::Tape& tape, const BoundParameters& p, const Matrix& z_t, int t,
                        const TokenSequence& tokens) override {
    const LatentSpec& ls = config_.latent;
    if (z_t.rows() != ls.positions() || z_t.cols() != ls.channels) {
      throw ConfigurationError("toy denoiser: latent must be " + std::to_string(ls.positions()) + "x" +
                               std::to_string(ls.channels));
    }
    if (t < 1 || t > schedule_.steps()) throw ArgumentError("toy denoiser: timestep out of range");
    const ad::Var text = encode_text(p, tokens);

    ad::Var temb = ad::silu(ad::add_row(ad::matmul(tape.constant(timestep_embedding(t)), p.at("time.w")), p.at("time.b")));
    ad::Var h0 = ad::add_row(ad::add_row(ad::matmul(tape.constant(z_t), p.at("stem.w")), p.at("stem.b")), temb);

    const int H = ls.height;
    const int W = ls.width;
    // Encoder: pool by 2 then residual block then cross-attention, three times.
    ad::Var d1 = level(tape, p, ad::avg_pool(h0, H, W, 2), text, 2, t);
    ad::Var d2 = level(tape, p, ad::avg_pool(d1, H / 2, W / 2, 2), text, 4, t);
    ad::Var d3 = level(tape, p, ad::avg_pool(d2, H / 4, W / 4, 2), text, 8, t);

    // Decoder with skip connections.
    ad::Var u2 = residual(p, "up2", ad::add(ad::upsample_nearest(d3, H / 8, W / 8, 2), d2));
    ad::Var u1 = residual(p, "up1", ad::add(ad::upsample_nearest(u2, H / 4, W / 4, 2), d1));
    ad::Var u0 = residual(p, "up0", ad::add(ad::upsample_nearest(u1, H / 2, W / 2, 2), h0));
    return ad::add_row(ad::matmul(u0, p.at("out.w")), p.at("out.b"));
  }

  Matrix encode(const Image& image) const override {
    const Image square = center_crop_square(image);
    const LatentSpec& ls = config_.latent;
    Image resized = (square.width == ls.width && square.height == ls.height) ? square
                                                                           : resize_image(square, ls.width, ls.height);
    if (resized.channels != ls.channels) throw ConfigurationError("toy denoiser: image channel count mismatch");
    return image_to_latent(resized);
  }

  Image decode(const Matrix& latent) const override {
    return latent_to_image(latent, config_.latent.width, config_.latent.height);
  }

  static std::string level_name(int factor) {
    switch (factor) {
      case 2: return "down1";
      case 4: return "down2";
      case 8: return "down3";
    }
    throw ConfigurationError("toy denoiser has no level at factor " + std::to_string(factor));
  }

 private:
  Matrix timestep_embedding(int t) const {
    const int c = config_.channels;
    Matrix e(1, c);
    const int half = c / 2;
    for (int i = 0; i < c; ++i) {
      const double freq = std::exp(-std::log(1000.0) * static_cast<double>(i % half) / std::max(1, half));
      e(0, i) = i < half ? std::sin(t * freq) : std::cos(t * freq);
    }
    return e;
  }

  ad::Var residual(const BoundParameters& p, const std::string& name, ad::Var h) const {
    ad::Var inner = ad::silu(ad::add_row(ad::matmul(h, p.at(name + ".res.w1")), p.at(name + ".res.b1")));
    return ad::add(h, ad::add_row(ad::matmul(inner, p.at(name + ".res.w2")), p.at(name + ".res.b2")));
  }

  ad::Var level(ad::Tape& tape, const BoundParameters& p, ad::Var h, ad::Var text, int factor, int t) {
    const std::string name = level_name(factor);
    h = residual(p, name, h);
    const AttentionLayerConfig layer{name + ".attn", factor, config_.heads, config_.key_dim};
    auto attn = ad::cross_attention(h, text, p.at(name + ".attn.w_q"), p.at(name + ".attn.w_k"),
                                    p.at(name + ".attn.w_v"), layer);
    if (capture_ && capture_->accepts(factor)) {
      CapturedAttention entry;
      entry.record.layer = layer;
      entry.record.grid_height = config_.latent.height / factor;
      entry.record.grid_width = config_.latent.width / factor;
      entry.record.timestep = t;
      for (const ad::Var& m : attn.maps) entry.record.heads.push_back(m.value());
      entry.maps = attn.maps;
      capture_->append(std::move(entry));
    }
    (void)tape;
    return ad::add(h, ad::matmul(attn.output, p.at(name + ".attn.w_o")));
  }

  void initialise() {
    std::mt19937_64 rng(config_.seed);
    auto gaussian = [&](int rows, int cols, double stddev) {
      std::normal_distribution<double> n(0.0, stddev);
      Matrix m(rows, cols);
      for (int j = 0; j < cols; ++j) {
        for (int i = 0; i < rows; ++i) m(i, j) = n(rng);
      }
      return m;
    };
    auto dense = [&](int in, int out) { return gaussian(in, out, 1.0 / std::sqrt(static_cast<double>(in))); };
    const int c = config_.channels;
    const int e = config_.text_dim;
    const int qk = config_.heads * config_.key_dim;
    const int v = config_.heads * config_.value_dim;

    params_.add(ParamKind::TextEncoder, "text.embedding", gaussian(Vocabulary::toy().size(), e, 1.0));
    params_.add(ParamKind::TextEncoder, "text.position", gaussian(config_.max_tokens, e, 0.1));
    params_.add(ParamKind::TextEncoder, "text.mix.w", dense(e, e));
    params_.add(ParamKind::TextEncoder, "text.mix.b", Matrix::Zero(1, e));

    params_.add(ParamKind::Other, "time.w", dense(c, c));
    params_.add(ParamKind::Other, "time.b", Matrix::Zero(1, c));
    params_.add(ParamKind::Other, "stem.w", dense(config_.latent.channels, c));
    params_.add(ParamKind::Other, "stem.b", Matrix::Zero(1, c));
    auto add_residual = [&](const std::string& name) {
      params_.add(ParamKind::Other, name + ".res.w1", dense(c, c));
      params_.add(ParamKind::Other, name + ".res.b1", Matrix::Zero(1, c));
      params_.add(ParamKind::Other, name + ".res.w2", dense(c, c) * 0.5);
      params_.add(ParamKind::Other, name + ".res.b2", Matrix::Zero(1, c));
    };
    for (int f : kFactors) {
      const std::string name = level_name(f);
      add_residual(name);
      params_.add(ParamKind::Query, name + ".attn.w_q", dense(c, qk));
      params_.add(ParamKind::Key, name + ".attn.w_k", dense(e, qk));
      params_.add(ParamKind::Value, name + ".attn.w_v", dense(e, v));
      params_.add(ParamKind::Other, name + ".attn.w_o", dense(v, c));
    }
    add_residual("up2");
    add_residual("up1");
    add_residual("up0");
    params_.add(ParamKind::Other, "out.w", dense(c, config_.latent.channels));
    params_.add(ParamKind::Other, "out.b", Matrix::Zero(1, config_.latent.channels));
  }

  ToyDenoiserConfig config_;
  NoiseSchedule schedule_;
  ParameterStore params_;
  std::shared_ptr<AttentionCapture> capture_;
};

}  // namespace textloc
