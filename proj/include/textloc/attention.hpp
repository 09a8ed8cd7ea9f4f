#pragma once

// Cross-attention, attention-map capture and identifier-map aggregation.

#include <algorithm>
#include <cmath>
#include <memory>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "textloc/autodiff.hpp"
#include "textloc/errors.hpp"

namespace textloc {

struct AttentionLayerConfig {
  std::string layer_id;
  int downsample_factor = 2;  // relative to the latent grid
  int head_count = 1;
  int key_dim = 1;  // per head
};

// Throws ConfigurationError unless the layer is well formed for a latent grid
// of latent_height x latent_width.
inline void validate_layer(const AttentionLayerConfig& layer, int latent_height, int latent_width) {
  if (layer.head_count <= 0 || layer.key_dim <= 0) {
    throw ConfigurationError("layer '" + layer.layer_id + "': head_count and key_dim must be positive");
  }
  const int f = layer.downsample_factor;
  if (f <= 0 || latent_height % f != 0 || latent_width % f != 0) {
    throw ConfigurationError("layer '" + layer.layer_id + "': downsample factor " + std::to_string(f) +
                             " does not divide the latent grid " + std::to_string(latent_height) + "x" +
                             std::to_string(latent_width));
  }
}

// Softmax attention weights of one layer for one forward pass. heads[h] is
// query_positions x token_count and row-stochastic.
struct AttentionRecord {
  AttentionLayerConfig layer;
  std::vector<Matrix> heads;
  int grid_height = 0;
  int grid_width = 0;
  int timestep = 0;

  int head_count() const { return static_cast<int>(heads.size()); }
  int query_positions() const { return heads.empty() ? 0 : static_cast<int>(heads.front().rows()); }
  int token_count() const { return heads.empty() ? 0 : static_cast<int>(heads.front().cols()); }
};

// Largest |row sum - 1| over all heads and query positions.
inline double max_row_sum_error(const AttentionRecord& record) {
  double worst = 0.0;
  for (const Matrix& h : record.heads) worst = std::max(worst, (h.rowwise().sum().array() - 1.0).abs().maxCoeff());
  return worst;
}

struct CrossAttentionWeights {
  Matrix w_q;  // d_model x (heads * key_dim)
  Matrix w_k;  // d_text  x (heads * key_dim)
  Matrix w_v;  // d_text  x (heads * value_dim)
};

namespace detail {

inline void check_cross_attention_shapes(const AttentionLayerConfig& layer, const Matrix& x, const Matrix& text,
                                         const Matrix& w_q, const Matrix& w_k, const Matrix& w_v) {
  auto fail = [&](const std::string& why) {
    throw ConfigurationError("cross-attention layer '" + layer.layer_id + "': " + why);
  };
  if (layer.head_count <= 0) fail("head_count must be positive");
  if (x.cols() != w_q.rows()) fail("query features width does not match W_Q rows");
  if (text.cols() != w_k.rows() || text.cols() != w_v.rows()) fail("text embedding width does not match W_K/W_V rows");
  if (text.rows() == 0) fail("empty conditioning sequence");
  if (w_q.cols() != w_k.cols()) fail("W_Q and W_K output widths differ");
  if (w_k.cols() != static_cast<Eigen::Index>(layer.head_count) * layer.key_dim) {
    fail("W_K output width is not head_count * key_dim");
  }
  if (w_v.cols() % layer.head_count != 0) fail("W_V output width is not divisible by head_count");
}

}  // namespace detail

namespace ad {

struct CrossAttentionVars {
  Var output;               // positions x (heads * value_dim)
  std::vector<Var> maps;    // per head: positions x tokens
};

// softmax(Q K^T / sqrt(d)) V per head, heads concatenated along columns.
inline CrossAttentionVars cross_attention(Var x, Var text, Var w_q, Var w_k, Var w_v,
                                          const AttentionLayerConfig& layer) {
  textloc::detail::check_cross_attention_shapes(layer, x.value(), text.value(), w_q.value(), w_k.value(), w_v.value());
  const int heads = layer.head_count;
  const Eigen::Index dk = layer.key_dim;
  const Eigen::Index dv = w_v.value().cols() / heads;
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(dk));

  Var q = matmul(x, w_q);
  Var k = matmul(text, w_k);
  Var v = matmul(text, w_v);

  CrossAttentionVars out;
  std::vector<Var> head_outputs;
  for (int h = 0; h < heads; ++h) {
    Var logits = scale(matmul_nt(slice_cols(q, h * dk, dk), slice_cols(k, h * dk, dk)), inv_sqrt_d);
    Var weights = softmax_rows(logits);
    out.maps.push_back(weights);
    head_outputs.push_back(matmul(weights, slice_cols(v, h * dv, dv)));
  }
  out.output = heads == 1 ? head_outputs.front() : hcat(head_outputs);
  return out;
}

}  // namespace ad

struct CrossAttentionResult {
  Matrix output;
  AttentionRecord record;
};

// Value-only cross-attention. `grid_height` x `grid_width` must equal the
// number of query positions.
inline CrossAttentionResult cross_attention(const Matrix& query_features, const Matrix& key_source,
                                            const CrossAttentionWeights& weights, const AttentionLayerConfig& layer,
                                            int grid_height, int grid_width, int timestep = 0) {
  if (static_cast<Eigen::Index>(grid_height) * grid_width != query_features.rows()) {
    throw ConfigurationError("cross-attention layer '" + layer.layer_id + "': grid does not match query positions");
  }
  ad::Tape tape;
  auto vars = ad::cross_attention(tape.constant(query_features), tape.constant(key_source),
                                  tape.constant(weights.w_q), tape.constant(weights.w_k),
                                  tape.constant(weights.w_v), layer);
  CrossAttentionResult result;
  result.output = vars.output.value();
  result.record.layer = layer;
  result.record.grid_height = grid_height;
  result.record.grid_width = grid_width;
  result.record.timestep = timestep;
  for (const ad::Var& m : vars.maps) result.record.heads.push_back(m.value());
  return result;
}

// One captured layer evaluation. `maps` refers into the tape of the forward
// pass that produced it and is only meaningful while that tape is alive.
struct CapturedAttention {
  AttentionRecord record;
  std::vector<ad::Var> maps;
};

// Per-step buffer of captured attention. Owned by one training or inference
// loop at a time.
class AttentionCapture {
 public:
  explicit AttentionCapture(std::set<int> factors) : factors_(std::move(factors)) {}

  bool accepts(int downsample_factor) const { return enabled_ && factors_.count(downsample_factor) > 0; }
  const std::set<int>& factors() const { return factors_; }

  void set_enabled(bool enabled) { enabled_ = enabled; }
  bool enabled() const { return enabled_; }

  void append(CapturedAttention entry) { buffer_.push_back(std::move(entry)); }
  void clear() { buffer_.clear(); }

  std::size_t size() const { return buffer_.size(); }
  const std::vector<CapturedAttention>& entries() const { return buffer_; }

 private:
  std::set<int> factors_;
  bool enabled_ = true;
  std::vector<CapturedAttention> buffer_;
};

// Head-averaged attention column of one token, reshaped onto the layer grid.
inline Matrix extract_token_map(const AttentionRecord& record, int token_index) {
  if (record.heads.empty()) throw ArgumentError("extract_token_map: record has no heads");
  if (token_index < 0 || token_index >= record.token_count()) {
    throw ArgumentError("extract_token_map: token index " + std::to_string(token_index) + " out of range for " +
                        std::to_string(record.token_count()) + " tokens");
  }
  if (record.grid_height * record.grid_width != record.query_positions()) {
    throw ArgumentError("extract_token_map: grid does not match query positions");
  }
  Vector column = Vector::Zero(record.query_positions());
  for (const Matrix& h : record.heads) column += h.col(token_index);
  column /= static_cast<double>(record.heads.size());
  Matrix grid(record.grid_height, record.grid_width);
  for (int y = 0; y < record.grid_height; ++y) {
    for (int x = 0; x < record.grid_width; ++x) grid(y, x) = column(y * record.grid_width + x);
  }
  return grid;
}

// Rows of the linear map that resamples a length-`in` signal to length `out`
// with bilinear weights, half-pixel centres (align_corners disabled).
inline Matrix bilinear_weights(int in, int out) {
  if (in <= 0 || out <= 0) throw ArgumentError("bilinear_weights: sizes must be positive");
  Matrix w = Matrix::Zero(out, in);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * ratio - 0.5;
    if (src < 0.0) src = 0.0;
    int i0 = static_cast<int>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const int i1 = std::min(i0 + 1, in - 1);
    const double frac = src - i0;
    w(o, i0) += 1.0 - frac;
    w(o, i1) += frac;
  }
  return w;
}

inline Matrix bilinear_resize(const Matrix& map, int out_height, int out_width) {
  if (map.rows() == out_height && map.cols() == out_width) return map;
  const Matrix ry = bilinear_weights(static_cast<int>(map.rows()), out_height);
  const Matrix rx = bilinear_weights(static_cast<int>(map.cols()), out_width);
  return ry * map * rx.transpose();
}

struct AggregatedTokenMap {
  Matrix values;  // out_height x out_width, in [0, 1]
  int token_index = -1;
  int source_layer_count = 0;
};

inline constexpr int kDefaultMapResolution = 256;

// Upscales every per-layer map to out_height x out_width and averages them.
inline AggregatedTokenMap aggregate_maps(const std::vector<Matrix>& per_layer_maps,
                                         int out_height = kDefaultMapResolution,
                                         int out_width = kDefaultMapResolution, int token_index = -1) {
  if (per_layer_maps.empty()) throw ArgumentError("aggregate_maps: no maps to aggregate");
  if (out_height <= 0 || out_width <= 0) throw ArgumentError("aggregate_maps: output size must be positive");
  AggregatedTokenMap result;
  result.values = Matrix::Zero(out_height, out_width);
  for (const Matrix& m : per_layer_maps) {
    if (m.size() == 0 || !m.allFinite()) throw ArgumentError("aggregate_maps: map is empty or non-finite");
    if (m.minCoeff() < 0.0 || m.maxCoeff() > 1.0) throw ArgumentError("aggregate_maps: map values outside [0, 1]");
    result.values += bilinear_resize(m, out_height, out_width);
  }
  result.values /= static_cast<double>(per_layer_maps.size());
  result.token_index = token_index;
  result.source_layer_count = static_cast<int>(per_layer_maps.size());
  return result;
}

namespace ad {

// Differentiable extract_token_map over the per-head map variables of one layer.
inline Var extract_token_map(const std::vector<Var>& heads, int grid_height, int grid_width, int token_index) {
  if (heads.empty()) throw ArgumentError("extract_token_map: no heads");
  const Eigen::Index positions = heads.front().value().rows();
  const Eigen::Index tokens = heads.front().value().cols();
  if (token_index < 0 || token_index >= tokens) throw ArgumentError("extract_token_map: token index out of range");
  if (static_cast<Eigen::Index>(grid_height) * grid_width != positions) {
    throw ArgumentError("extract_token_map: grid does not match query positions");
  }
  const double inv_heads = 1.0 / static_cast<double>(heads.size());
  Matrix grid = Matrix::Zero(grid_height, grid_width);
  for (const Var& h : heads) {
    for (int y = 0; y < grid_height; ++y) {
      for (int x = 0; x < grid_width; ++x) grid(y, x) += h.value()(y * grid_width + x, token_index);
    }
  }
  grid *= inv_heads;
  return heads.front().tape->derived(
      std::move(grid), heads, [heads, grid_height, grid_width, token_index, positions, tokens, inv_heads](
                                  Tape& t, const Matrix& g) {
        Matrix d = Matrix::Zero(positions, tokens);
        for (int y = 0; y < grid_height; ++y) {
          for (int x = 0; x < grid_width; ++x) d(y * grid_width + x, token_index) = g(y, x) * inv_heads;
        }
        for (const Var& h : heads) t.accumulate(h, d);
      });
}

inline Var bilinear_resize(Var map, int out_height, int out_width) {
  const Matrix ry = bilinear_weights(static_cast<int>(map.value().rows()), out_height);
  const Matrix rx = bilinear_weights(static_cast<int>(map.value().cols()), out_width);
  Matrix out = ry * map.value() * rx.transpose();
  return map.tape->derived(std::move(out), {map}, [map, ry, rx](Tape& t, const Matrix& g) {
    t.accumulate(map, ry.transpose() * g * rx);
  });
}

inline Var aggregate_maps(const std::vector<Var>& per_layer_maps, int out_height, int out_width) {
  if (per_layer_maps.empty()) throw ArgumentError("aggregate_maps: no maps to aggregate");
  std::vector<Var> scaled;
  scaled.reserve(per_layer_maps.size());
  for (const Var& m : per_layer_maps) scaled.push_back(bilinear_resize(m, out_height, out_width));
  Var sum = scaled.front();
  for (std::size_t i = 1; i < scaled.size(); ++i) sum = add(sum, scaled[i]);
  return scale(sum, 1.0 / static_cast<double>(scaled.size()));
}

// Aggregated map of one token over every captured layer in `entries`.
inline Var aggregate_token_map(const std::vector<const CapturedAttention*>& entries, int token_index, int out_height,
                               int out_width) {
  std::vector<Var> maps;
  for (const CapturedAttention* e : entries) {
    maps.push_back(extract_token_map(e->maps, e->record.grid_height, e->record.grid_width, token_index));
  }
  return aggregate_maps(maps, out_height, out_width);
}

}  // namespace ad

// Running mean of aggregated maps, used to average attention over all
// denoising steps of a sampling run.
class RunningMapMean {
 public:
  void add(const Matrix& map) {
    if (count_ == 0) {
      mean_ = map;
    } else {
      if (map.rows() != mean_.rows() || map.cols() != mean_.cols()) throw ArgumentError("RunningMapMean: shape changed");
      mean_ += (map - mean_) / static_cast<double>(count_ + 1);
    }
    ++count_;
  }
  const Matrix& mean() const { return mean_; }
  int count() const { return count_; }

 private:
  Matrix mean_;
  int count_ = 0;
};

}  // namespace textloc
