#pragma once

// Kind-labelled parameter groups, trainable-set selection, snapshots and the
// per-layer weight-change rate.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "textloc/autodiff.hpp"
#include "textloc/errors.hpp"

namespace textloc {

enum class ParamKind { Query, Key, Value, TextEncoder, Other };

inline std::string to_string(ParamKind kind) {
  switch (kind) {
    case ParamKind::Query: return "w_q";
    case ParamKind::Key: return "w_k";
    case ParamKind::Value: return "w_v";
    case ParamKind::TextEncoder: return "text_encoder";
    case ParamKind::Other: return "other";
  }
  return "other";
}

inline ParamKind parse_param_kind(const std::string& s) {
  if (s == "w_q") return ParamKind::Query;
  if (s == "w_k") return ParamKind::Key;
  if (s == "w_v") return ParamKind::Value;
  if (s == "text_encoder") return ParamKind::TextEncoder;
  if (s == "other") return ParamKind::Other;
  throw FormatError("unknown parameter kind '" + s + "'");
}

inline bool is_projection(ParamKind kind) {
  return kind == ParamKind::Query || kind == ParamKind::Key || kind == ParamKind::Value;
}

// One parameter tensor. (kind, layer_id) is unique within a store.
struct ParameterGroup {
  ParamKind kind = ParamKind::Other;
  std::string layer_id;
  Matrix value;
  bool trainable = false;

  std::string key() const { return to_string(kind) + "/" + layer_id; }
};

// Tape variables for every parameter, keyed by layer_id.
using BoundParameters = std::unordered_map<std::string, ad::Var>;

class ParameterStore {
 public:
  ParameterGroup& add(ParamKind kind, std::string layer_id, Matrix value) {
    if (index_.count(layer_id)) throw ConfigurationError("duplicate parameter '" + layer_id + "'");
    index_[layer_id] = groups_.size();
    groups_.push_back(ParameterGroup{kind, std::move(layer_id), std::move(value), false});
    return groups_.back();
  }

  ParameterGroup& at(const std::string& layer_id) {
    auto it = index_.find(layer_id);
    if (it == index_.end()) throw ArgumentError("unknown parameter '" + layer_id + "'");
    return groups_[it->second];
  }
  const ParameterGroup& at(const std::string& layer_id) const {
    return const_cast<ParameterStore*>(this)->at(layer_id);
  }
  bool contains(const std::string& layer_id) const { return index_.count(layer_id) > 0; }

  std::vector<ParameterGroup>& groups() { return groups_; }
  const std::vector<ParameterGroup>& groups() const { return groups_; }

  // Trainable groups become gradient leaves, everything else constants.
  // `frozen` binds every group as a constant (inference).
  BoundParameters bind(ad::Tape& tape, bool frozen = false) const {
    BoundParameters bound;
    for (const ParameterGroup& g : groups_) {
      bound.emplace(g.layer_id, (g.trainable && !frozen) ? tape.leaf(g.value) : tape.constant(g.value));
    }
    return bound;
  }

  std::size_t trainable_count() const {
    return static_cast<std::size_t>(std::count_if(groups_.begin(), groups_.end(), [](const auto& g) { return g.trainable; }));
  }

 private:
  std::vector<ParameterGroup> groups_;
  std::unordered_map<std::string, std::size_t> index_;
};

enum class ParameterSet { KV, QV, QKV, All };

inline std::string to_string(ParameterSet set) {
  switch (set) {
    case ParameterSet::KV: return "kv";
    case ParameterSet::QV: return "qv";
    case ParameterSet::QKV: return "qkv";
    case ParameterSet::All: return "all";
  }
  return "kv";
}

inline ParameterSet parse_parameter_set(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (s == "kv") return ParameterSet::KV;
  if (s == "qv") return ParameterSet::QV;
  if (s == "qkv") return ParameterSet::QKV;
  if (s == "all") return ParameterSet::All;
  throw ConfigurationError("unknown parameter set '" + s + "' (expected kv, qv, qkv or all)");
}

struct ParameterSetSelector {
  ParameterSet set = ParameterSet::KV;
  bool include_text_encoder = true;

  bool selects(ParamKind kind) const {
    switch (kind) {
      case ParamKind::Query: return set == ParameterSet::QV || set == ParameterSet::QKV || set == ParameterSet::All;
      case ParamKind::Key: return set == ParameterSet::KV || set == ParameterSet::QKV || set == ParameterSet::All;
      case ParamKind::Value: return true;
      case ParamKind::TextEncoder: return include_text_encoder;
      case ParamKind::Other: return set == ParameterSet::All;
    }
    return false;
  }
};

inline void select_trainable(ParameterStore& store, const ParameterSetSelector& selector) {
  for (ParameterGroup& g : store.groups()) g.trainable = selector.selects(g.kind);
}

struct SnapshotEntry {
  ParamKind kind = ParamKind::Other;
  std::string layer_id;
  Matrix value;
};

using ParameterSnapshot = std::vector<SnapshotEntry>;

// Copies the groups accepted by `filter` (default: the attention projections).
template <typename Filter>
ParameterSnapshot snapshot(const ParameterStore& store, Filter filter) {
  ParameterSnapshot s;
  for (const ParameterGroup& g : store.groups()) {
    if (filter(g.kind)) s.push_back(SnapshotEntry{g.kind, g.layer_id, g.value});
  }
  return s;
}

inline ParameterSnapshot snapshot(const ParameterStore& store) { return snapshot(store, is_projection); }

struct LayerChange {
  ParamKind kind = ParamKind::Other;
  std::string layer_id;
  double delta = 0.0;
};

struct WeightChangeReport {
  int step = 0;
  std::vector<LayerChange> layers;

  // Mean delta over layers of `kind`; 0 when the kind is absent.
  double mean(ParamKind kind) const {
    double sum = 0.0;
    int n = 0;
    for (const LayerChange& l : layers) {
      if (l.kind == kind) {
        sum += l.delta;
        ++n;
      }
    }
    return n == 0 ? 0.0 : sum / n;
  }

  std::map<ParamKind, std::vector<LayerChange>> by_kind() const {
    std::map<ParamKind, std::vector<LayerChange>> out;
    for (const LayerChange& l : layers) out[l.kind].push_back(l);
    return out;
  }
};

// delta_l = ||after_l - before_l||_F / ||before_l||_F for every layer.
inline WeightChangeReport weight_change_rate(const ParameterSnapshot& before, const ParameterSnapshot& after,
                                             int step = 0) {
  if (before.size() != after.size()) throw ArgumentError("weight_change_rate: snapshots cover different parameter sets");
  WeightChangeReport report;
  report.step = step;
  for (std::size_t i = 0; i < before.size(); ++i) {
    const SnapshotEntry& b = before[i];
    const SnapshotEntry& a = after[i];
    if (b.kind != a.kind || b.layer_id != a.layer_id || b.value.rows() != a.value.rows() ||
        b.value.cols() != a.value.cols()) {
      throw ArgumentError("weight_change_rate: snapshots cover different parameter sets at '" + b.layer_id + "'");
    }
    const double norm = b.value.norm();
    if (!(norm > 0.0)) throw ArgumentError("weight_change_rate: degenerate layer '" + b.layer_id + "' has zero norm");
    report.layers.push_back(LayerChange{b.kind, b.layer_id, (a.value - b.value).norm() / norm});
  }
  return report;
}

// AdamW with decoupled weight decay. Only trainable groups are touched.
class AdamW {
 public:
  struct Options {
    double learning_rate = 1e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double weight_decay = 1e-2;
  };

  AdamW() = default;
  explicit AdamW(Options options) : options_(options) {}

  const Options& options() const { return options_; }
  int step_count() const { return step_; }

  // grads[layer_id] holds the gradient of each trainable group; missing
  // entries count as zero gradient.
  void step(ParameterStore& store, const std::unordered_map<std::string, Matrix>& grads) {
    ++step_;
    const double bc1 = 1.0 - std::pow(options_.beta1, step_);
    const double bc2 = 1.0 - std::pow(options_.beta2, step_);
    for (ParameterGroup& g : store.groups()) {
      if (!g.trainable) continue;
      State& s = state_[g.layer_id];
      if (s.m.size() == 0) {
        s.m = Matrix::Zero(g.value.rows(), g.value.cols());
        s.v = Matrix::Zero(g.value.rows(), g.value.cols());
      }
      auto it = grads.find(g.layer_id);
      if (it != grads.end() && it->second.size() != 0) {
        s.m = options_.beta1 * s.m + (1.0 - options_.beta1) * it->second;
        s.v = options_.beta2 * s.v + (1.0 - options_.beta2) * it->second.cwiseAbs2();
      } else {
        s.m *= options_.beta1;
        s.v *= options_.beta2;
      }
      g.value *= 1.0 - options_.learning_rate * options_.weight_decay;
      g.value.array() -= options_.learning_rate * (s.m.array() / bc1) / ((s.v.array() / bc2).sqrt() + options_.epsilon);
    }
  }

 private:
  struct State {
    Matrix m;
    Matrix v;
  };
  Options options_;
  int step_ = 0;
  std::unordered_map<std::string, State> state_;
};

}  // namespace textloc
