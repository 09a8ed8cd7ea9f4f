#pragma once

// Noise schedule and forward diffusion process.

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "textloc/autodiff.hpp"
#include "textloc/errors.hpp"

namespace textloc {

class NoiseSchedule {
 public:
  NoiseSchedule() : NoiseSchedule(linear(1000, 1e-4, 0.02)) {}

  // Linear variance schedule over t = 1..T.
  static NoiseSchedule linear(int steps, double beta_start, double beta_end) {
    if (steps <= 0) throw ArgumentError("NoiseSchedule: T must be positive");
    if (!(beta_start > 0.0) || !(beta_end < 1.0) || beta_end < beta_start) {
      throw ArgumentError("NoiseSchedule: betas must satisfy 0 < beta_start <= beta_end < 1");
    }
    NoiseSchedule s(0);
    s.beta_start_ = beta_start;
    s.beta_end_ = beta_end;
    s.betas_.resize(steps + 1, 0.0);
    s.alpha_bars_.resize(steps + 1, 1.0);
    for (int t = 1; t <= steps; ++t) {
      const double frac = steps == 1 ? 0.0 : static_cast<double>(t - 1) / (steps - 1);
      s.betas_[t] = beta_start + frac * (beta_end - beta_start);
      s.alpha_bars_[t] = s.alpha_bars_[t - 1] * (1.0 - s.betas_[t]);
    }
    return s;
  }

  // Linear schedule whose per-step variances are stretched so a chain of
  // `steps` reaches roughly the same final alpha_bar as the 1000-step one.
  static NoiseSchedule linear_scaled(int steps) {
    const double k = 1000.0 / static_cast<double>(steps);
    return linear(steps, 1e-4 * k, std::min(0.02 * k, 0.999));
  }

  int steps() const { return static_cast<int>(betas_.size()) - 1; }
  double beta_start() const { return beta_start_; }
  double beta_end() const { return beta_end_; }

  double beta(int t) const { return betas_.at(check(t)); }
  double alpha(int t) const { return 1.0 - beta(t); }

  // Cumulative product of (1 - beta) up to t; alpha_bar(0) = 1.
  double alpha_bar(int t) const {
    if (t == 0) return 1.0;
    return alpha_bars_.at(check(t));
  }

 private:
  explicit NoiseSchedule(int) {}

  int check(int t) const {
    if (t < 1 || t > steps()) {
      throw ArgumentError("timestep " + std::to_string(t) + " outside [1, " + std::to_string(steps()) + "]");
    }
    return t;
  }

  double beta_start_ = 0.0;
  double beta_end_ = 0.0;
  std::vector<double> betas_;
  std::vector<double> alpha_bars_;
};

struct LatentSpec {
  int height = 32;
  int width = 32;
  int channels = 3;
  int encoder_factor = 1;  // pixel H = height * encoder_factor

  int positions() const { return height * width; }

  void validate_pixels(int pixel_height, int pixel_width) const {
    if (pixel_height != height * encoder_factor || pixel_width != width * encoder_factor) {
      throw ConfigurationError("image " + std::to_string(pixel_width) + "x" + std::to_string(pixel_height) +
                               " does not match latent " + std::to_string(width) + "x" + std::to_string(height) +
                               " at encoder factor " + std::to_string(encoder_factor));
    }
  }
};

// z_t = sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps
inline Matrix add_noise_with(double alpha_bar, const Matrix& z0, const Matrix& eps) {
  if (z0.rows() != eps.rows() || z0.cols() != eps.cols()) throw ArgumentError("add_noise: shape mismatch");
  return std::sqrt(alpha_bar) * z0 + std::sqrt(1.0 - alpha_bar) * eps;
}

inline Matrix add_noise(const NoiseSchedule& schedule, const Matrix& z0, int t, const Matrix& eps) {
  if (t < 1 || t > schedule.steps()) throw ArgumentError("add_noise: timestep " + std::to_string(t) + " out of range");
  return add_noise_with(schedule.alpha_bar(t), z0, eps);
}

inline Matrix standard_normal(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j) {
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = n(rng);
  }
  return m;
}

// One ancestral DDPM reverse step from z_t to z_{t-1}.
inline Matrix ddpm_step(const NoiseSchedule& s, const Matrix& z_t, const Matrix& predicted_noise, int t,
                        std::mt19937_64& rng) {
  const double beta = s.beta(t);
  const double alpha = 1.0 - beta;
  const double ab = s.alpha_bar(t);
  Matrix mean = (z_t - (beta / std::sqrt(1.0 - ab)) * predicted_noise) / std::sqrt(alpha);
  if (t == 1) return mean;
  return mean + std::sqrt(beta) * standard_normal(z_t.rows(), z_t.cols(), rng);
}

}  // namespace textloc
