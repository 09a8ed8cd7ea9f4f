#pragma once

// Loss terms of the fine-tuning objective: denoising and prior-preservation
// MSE, hard and soft attention guidance, and the weighted total.

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "textloc/attention.hpp"
#include "textloc/autodiff.hpp"
#include "textloc/errors.hpp"

namespace textloc {

// Segmentation target at guidance resolution. Values in [0, 1], not all zero.
class SegMask {
 public:
  SegMask() = default;
  SegMask(Matrix values, std::string concept_id) : values_(std::move(values)), concept_id_(std::move(concept_id)) {
    validate();
  }

  const Matrix& values() const { return values_; }
  const std::string& concept_id() const { return concept_id_; }
  Eigen::Index rows() const { return values_.rows(); }
  Eigen::Index cols() const { return values_.cols(); }

 private:
  void validate() const {
    if (values_.size() == 0) throw ArgumentError("SegMask '" + concept_id_ + "': empty");
    if (!values_.allFinite() || values_.minCoeff() < 0.0 || values_.maxCoeff() > 1.0) {
      throw ArgumentError("SegMask '" + concept_id_ + "': values outside [0, 1]");
    }
    if (values_.maxCoeff() <= 0.0) throw ArgumentError("SegMask '" + concept_id_ + "': mask is empty (all zero)");
  }

  Matrix values_;
  std::string concept_id_;
};

enum class GuidanceMode { Hard, Soft, None };

inline std::string to_string(GuidanceMode mode) {
  switch (mode) {
    case GuidanceMode::Hard: return "hard";
    case GuidanceMode::Soft: return "soft";
    case GuidanceMode::None: return "none";
  }
  return "none";
}

inline GuidanceMode parse_guidance_mode(const std::string& s) {
  if (s == "hard") return GuidanceMode::Hard;
  if (s == "soft") return GuidanceMode::Soft;
  if (s == "none") return GuidanceMode::None;
  throw ConfigurationError("unknown guidance mode '" + s + "' (expected hard, soft or none)");
}

namespace detail {

inline void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ArgumentError(std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                        std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                        std::to_string(b.cols()) + ")");
  }
}

inline double mean_squared_error(const Matrix& a, const Matrix& b, const char* op) {
  require_same_shape(a, b, op);
  if (a.size() == 0) throw ArgumentError(std::string(op) + ": empty input");
  return (a - b).squaredNorm() / static_cast<double>(a.size());
}

}  // namespace detail

inline double denoise_loss(const Matrix& predicted_noise, const Matrix& true_noise) {
  return detail::mean_squared_error(predicted_noise, true_noise, "denoise_loss");
}

inline double prior_loss(const Matrix& predicted_noise_on_prior, const Matrix& true_noise) {
  return detail::mean_squared_error(predicted_noise_on_prior, true_noise, "prior_loss");
}

// 1 where seg == 0, 0 where seg > 0.
inline Matrix inverse_mask(const Matrix& seg) { return (seg.array() > 0.0).select(Matrix::Zero(seg.rows(), seg.cols()), 1.0); }
inline Matrix inverse_mask(const SegMask& seg) { return inverse_mask(seg.values()); }

inline double hard_guidance_loss(const Matrix& attn, const SegMask& seg) {
  detail::require_same_shape(attn, seg.values(), "hard_guidance_loss");
  return (seg.values() - attn).squaredNorm() / static_cast<double>(attn.size());
}

inline double hard_guidance_loss(const AggregatedTokenMap& attn, const SegMask& seg) {
  return hard_guidance_loss(attn.values, seg);
}

// `inverse_support` is the B_Inv matrix; by default derived from `seg`.
inline double soft_guidance_loss(const Matrix& attn, const SegMask& seg, const Matrix& inverse_support) {
  detail::require_same_shape(attn, seg.values(), "soft_guidance_loss");
  detail::require_same_shape(attn, inverse_support, "soft_guidance_loss");
  return ((seg.values() - attn).array().square() * inverse_support.array()).sum() / static_cast<double>(attn.size());
}

inline double soft_guidance_loss(const Matrix& attn, const SegMask& seg) {
  return soft_guidance_loss(attn, seg, inverse_mask(seg));
}

inline double soft_guidance_loss(const AggregatedTokenMap& attn, const SegMask& seg) {
  return soft_guidance_loss(attn.values, seg);
}

// Gradient of the guidance loss with respect to the aggregated map.
inline Matrix guidance_loss_gradient(const Matrix& attn, const SegMask& seg, GuidanceMode mode) {
  detail::require_same_shape(attn, seg.values(), "guidance_loss_gradient");
  const double n = static_cast<double>(attn.size());
  Matrix g = (attn - seg.values()) * (2.0 / n);
  if (mode == GuidanceMode::Soft) g.array() *= inverse_mask(seg).array();
  if (mode == GuidanceMode::None) g.setZero();
  return g;
}

// Guidance target: soft values drive the hard loss, `inverse_support` the
// soft loss.
struct GuidanceTarget {
  SegMask seg;
  Matrix inverse_support;

  explicit GuidanceTarget(SegMask s) : seg(std::move(s)), inverse_support(inverse_mask(seg)) {}
  GuidanceTarget(SegMask s, Matrix inv) : seg(std::move(s)), inverse_support(std::move(inv)) {
    detail::require_same_shape(seg.values(), inverse_support, "GuidanceTarget");
  }
};

inline double guidance_loss(const Matrix& attn, const GuidanceTarget& target, GuidanceMode mode) {
  switch (mode) {
    case GuidanceMode::Hard: return hard_guidance_loss(attn, target.seg);
    case GuidanceMode::Soft: return soft_guidance_loss(attn, target.seg, target.inverse_support);
    case GuidanceMode::None: return 0.0;
  }
  return 0.0;
}

// Mean of per-identifier guidance losses.
inline double multi_concept_attn_loss(const std::vector<std::pair<AggregatedTokenMap, SegMask>>& pairs,
                                      GuidanceMode mode) {
  if (pairs.empty()) throw ArgumentError("multi_concept_attn_loss: no identifier/mask pairs");
  double sum = 0.0;
  for (const auto& [attn, seg] : pairs) sum += guidance_loss(attn.values, GuidanceTarget(seg), mode);
  return sum / static_cast<double>(pairs.size());
}

namespace ad {

inline Var guidance_loss(Var attn, const GuidanceTarget& target, GuidanceMode mode) {
  detail::require_same_shape(attn.value(), target.seg.values(), "guidance_loss");
  const double n = static_cast<double>(attn.value().size());
  Matrix residual = attn.value() - target.seg.values();
  if (mode == GuidanceMode::Soft) residual.array() *= target.inverse_support.array();
  if (mode == GuidanceMode::None) residual.setZero();
  Matrix out(1, 1);
  // For soft mode inverse_support is binary, so masking the residual once
  // equals masking the squared residual.
  out(0, 0) = residual.squaredNorm() / n;
  return attn.tape->derived(std::move(out), {attn}, [attn, residual, n](Tape& t, const Matrix& g) {
    t.accumulate(attn, residual * (2.0 * g(0, 0) / n));
  });
}

}  // namespace ad

struct LossBreakdown {
  double l_denoise = 0.0;
  double l_prior = 0.0;
  double l_attn = 0.0;
  double lambda = 1.0;
  double delta = 1.0;
  double total = 0.0;
};

inline constexpr double kDefaultPriorWeight = 1.0;      // lambda
inline constexpr double kDefaultAttentionWeight = 1.0;  // delta

inline LossBreakdown total_loss(double l_denoise, double l_prior, double l_attn, double lambda = kDefaultPriorWeight,
                                double delta = kDefaultAttentionWeight) {
  const std::pair<const char*, double> parts[] = {
      {"l_denoise", l_denoise}, {"l_prior", l_prior}, {"l_attn", l_attn}, {"lambda", lambda}, {"delta", delta}};
  for (const auto& [name, v] : parts) {
    if (!std::isfinite(v)) throw TrainingStepError(name, std::string("non-finite loss component: ") + name);
  }
  LossBreakdown b{l_denoise, l_prior, l_attn, lambda, delta, 0.0};
  b.total = l_denoise + lambda * l_prior + delta * l_attn;
  return b;
}

}  // namespace textloc
