#pragma once

// Fine-tuning loop: one concept batch and one prior batch per step, the
// attention guidance term on the identifier maps, AdamW over the selected
// parameter groups, JSON-lines log, periodic checkpoints and weight-change
// reports.

#include <nlohmann/json.hpp>

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "textloc/attention.hpp"
#include "textloc/backbone.hpp"
#include "textloc/checkpoint.hpp"
#include "textloc/conditioning.hpp"
#include "textloc/datasets.hpp"
#include "textloc/guidance.hpp"
#include "textloc/parameters.hpp"
#include "textloc/sampling.hpp"
#include "textloc/toy_denoiser.hpp"

namespace textloc {

struct TrainConfig {
  int steps = 400;
  double learning_rate = 1e-5;
  int batch_size = 2;
  double lambda = kDefaultPriorWeight;
  double delta = kDefaultAttentionWeight;
  GuidanceMode guidance_mode = GuidanceMode::Hard;
  ParameterSetSelector selector{};
  std::set<int> capture_factors{2, 4, 8};
  int attn_resolution = kDefaultMapResolution;
  std::uint64_t seed = 0;
  std::string target;  // concept or group id; empty with a single-concept manifest
  int checkpoint_every = 100;
  double weight_decay = 1e-2;
  std::string priors_dir;
  std::string resume_from;
  std::string base_checkpoint;  // pretrained weights to start from
  ToyDenoiserConfig model{};

  void validate() const {
    auto fail = [](const std::string& why) { throw ConfigurationError("train config: " + why); };
    if (steps <= 0) fail("steps must be positive");
    if (batch_size <= 0) fail("batch_size must be positive");
    if (!(learning_rate > 0.0)) fail("learning_rate must be positive");
    if (!(lambda >= 0.0) || !(delta >= 0.0)) fail("lambda and delta must be non-negative");
    if (!(weight_decay >= 0.0)) fail("weight_decay must be non-negative");
    if (capture_factors.empty()) fail("capture_factors is empty");
    if (attn_resolution <= 0) fail("attn_resolution must be positive");
    if (checkpoint_every <= 0) fail("checkpoint_every must be positive");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"steps", c.steps},
                     {"learning_rate", c.learning_rate},
                     {"batch_size", c.batch_size},
                     {"lambda", c.lambda},
                     {"delta", c.delta},
                     {"guidance_mode", to_string(c.guidance_mode)},
                     {"selector", to_string(c.selector.set)},
                     {"include_text_encoder", c.selector.include_text_encoder},
                     {"capture_factors", c.capture_factors},
                     {"attn_resolution", c.attn_resolution},
                     {"seed", c.seed},
                     {"target", c.target},
                     {"checkpoint_every", c.checkpoint_every},
                     {"weight_decay", c.weight_decay},
                     {"priors_dir", c.priors_dir},
                     {"resume_from", c.resume_from},
                     {"base_checkpoint", c.base_checkpoint},
                     {"model", c.model}};
}

// Missing keys keep their defaults; unknown keys are rejected so typos do not
// silently fall back to a default.
inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  if (!j.is_object()) throw ConfigurationError("train config must be a JSON object");
  static const std::set<std::string> known = {
      "steps",  "learning_rate", "batch_size",       "lambda",       "delta",      "guidance_mode",
      "selector", "include_text_encoder", "capture_factors", "attn_resolution", "seed", "target",
      "checkpoint_every", "weight_decay", "priors_dir", "resume_from", "base_checkpoint", "model"};
  for (const auto& [k, v] : j.items()) {
    if (!known.count(k)) throw ConfigurationError("train config: unknown key '" + k + "'");
  }
  try {
    TrainConfig d;
    c.steps = j.value("steps", d.steps);
    c.learning_rate = j.value("learning_rate", d.learning_rate);
    c.batch_size = j.value("batch_size", d.batch_size);
    c.lambda = j.value("lambda", d.lambda);
    c.delta = j.value("delta", d.delta);
    c.guidance_mode = parse_guidance_mode(j.value("guidance_mode", to_string(d.guidance_mode)));
    c.selector.set = parse_parameter_set(j.value("selector", to_string(d.selector.set)));
    c.selector.include_text_encoder = j.value("include_text_encoder", d.selector.include_text_encoder);
    c.capture_factors = j.value("capture_factors", d.capture_factors);
    c.attn_resolution = j.value("attn_resolution", d.attn_resolution);
    c.seed = j.value("seed", d.seed);
    c.target = j.value("target", d.target);
    c.checkpoint_every = j.value("checkpoint_every", d.checkpoint_every);
    c.weight_decay = j.value("weight_decay", d.weight_decay);
    c.priors_dir = j.value("priors_dir", d.priors_dir);
    c.resume_from = j.value("resume_from", d.resume_from);
    c.base_checkpoint = j.value("base_checkpoint", d.base_checkpoint);
    c.model = j.contains("model") ? j.at("model").get<ToyDenoiserConfig>() : d.model;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigurationError(std::string("train config: ") + e.what());
  }
}

inline TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigurationError("cannot open config '" + path.string() + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const std::exception& e) {
    throw ConfigurationError("config '" + path.string() + "' does not parse: " + e.what());
  }
  return j.get<TrainConfig>();
}

// Backbone for a run: the resume checkpoint, else the base checkpoint, else
// a freshly initialised toy denoiser built from `model`.
inline std::unique_ptr<ToyDenoiser> make_backbone(const TrainConfig& config) {
  if (!config.resume_from.empty()) return load_toy_checkpoint(config.resume_from).model;
  if (!config.base_checkpoint.empty()) return load_toy_checkpoint(config.base_checkpoint).model;
  return std::make_unique<ToyDenoiser>(config.model);
}

// ---------------------------------------------------------------------------
// Training data

struct IdentifierTarget {
  std::string concept_id;
  int token_position = 0;
  GuidanceTarget target;
};

struct TrainingExample {
  Matrix z0;
  TokenSequence tokens;
  std::vector<IdentifierTarget> identifiers;
};

struct PriorExample {
  Matrix z0;
  TokenSequence tokens;
};

struct TrainingData {
  std::string target;
  std::vector<Binding> bindings;  // one per trained identifier
  std::vector<std::string> concept_ids;
  std::vector<TrainingExample> examples;

  std::vector<std::string> class_names() const {
    std::vector<std::string> out;
    for (const Binding& b : bindings) out.push_back(b.class_name);
    return out;
  }
};

// Resolves the target (a concept id or a multi-concept group id) and builds
// prompts, latents and guidance targets for every training image.
inline TrainingData build_training_data(const Backbone& backbone, const ConceptManifest& manifest, std::string target,
                                        int resolution) {
  const Vocabulary& vocab = backbone.vocabulary();
  if (target.empty()) {
    if (manifest.concepts.size() != 1) {
      throw ConfigurationError("train config: 'target' is required when the manifest has several concepts");
    }
    target = manifest.concepts.front().id;
  }
  TrainingData data;
  data.target = target;

  auto make_example = [&](const fs::path& image, const RenderedPrompt& prompt,
                          const std::vector<std::pair<std::string, fs::path>>& masks) {
    TrainingExample ex;
    ex.z0 = backbone.encode(read_png(image.string()));
    ex.tokens = prompt.tokens;
    for (std::size_t i = 0; i < masks.size(); ++i) {
      const auto& positions = prompt.identifier_positions.at(i);
      if (positions.empty()) throw ConfigurationError("identifier missing from rendered prompt '" + prompt.text + "'");
      const SegMask native = load_mask(masks[i].second, masks[i].first);
      ex.identifiers.push_back(IdentifierTarget{masks[i].first, positions.front(), make_guidance_target(native, resolution)});
    }
    return ex;
  };

  if (const ConceptGroup* group = manifest.group_by_id(target)) {
    if (group->concepts.size() != 2) throw ConfigurationError("group '" + target + "' must have two concepts");
    for (const std::string& cid : group->concepts) {
      const ConceptEntry& c = manifest.concept_by_id(cid);
      data.bindings.push_back(Binding{make_identifier(vocab, c.identifier), c.class_name});
      data.concept_ids.push_back(cid);
      auto it = group->masks.find(cid);
      if (it == group->masks.end() || it->second.size() != group->images.size()) {
        throw ConfigurationError("group '" + target + "' lacks masks for identifier '" + c.identifier + "'");
      }
    }
    const RenderedPrompt prompt = render_prompt(vocab, multi_concept_template(), data.bindings);
    for (std::size_t i = 0; i < group->images.size(); ++i) {
      std::vector<std::pair<std::string, fs::path>> masks;
      for (const std::string& cid : data.concept_ids) masks.emplace_back(cid, group->masks.at(cid)[i]);
      data.examples.push_back(make_example(group->images[i], prompt, masks));
    }
  } else {
    const ConceptEntry* concept_entry = nullptr;
    for (const auto& c : manifest.concepts) {
      if (c.id == target) concept_entry = &c;
    }
    if (!concept_entry) throw ConfigurationError("target '" + target + "' is neither a concept nor a group");
    if (concept_entry->masks.size() != concept_entry->images.size()) {
      throw ConfigurationError("concept '" + target + "' lacks masks for identifier '" + concept_entry->identifier + "'");
    }
    data.bindings.push_back(Binding{make_identifier(vocab, concept_entry->identifier), concept_entry->class_name});
    data.concept_ids.push_back(concept_entry->id);
    const RenderedPrompt prompt = render_prompt(vocab, single_concept_template(), data.bindings);
    for (std::size_t i = 0; i < concept_entry->images.size(); ++i) {
      data.examples.push_back(make_example(concept_entry->images[i], prompt, {{concept_entry->id, concept_entry->masks[i]}}));
    }
  }
  if (data.examples.empty()) throw ConfigurationError("target '" + target + "' has no training images");
  return data;
}

inline std::vector<PriorExample> load_prior_examples(const Backbone& backbone, const fs::path& priors_dir,
                                                     const std::vector<std::string>& class_names) {
  std::vector<PriorExample> out;
  for (const std::string& cls : class_names) {
    const PriorSet set = load_priors(priors_dir, cls);
    const TokenSequence tokens = tokenize(backbone.vocabulary(), cls);
    for (const fs::path& p : set.images) out.push_back(PriorExample{backbone.encode(read_png(p.string())), tokens});
  }
  return out;
}

inline nlohmann::json bindings_to_json(const TrainingData& data) {
  nlohmann::json out = nlohmann::json::array();
  for (std::size_t i = 0; i < data.bindings.size(); ++i) {
    out.push_back({{"concept", data.concept_ids[i]},
                   {"identifier", data.bindings[i].identifier.surface},
                   {"class", data.bindings[i].class_name}});
  }
  return out;
}

// Identifier bindings stored with a fine-tuned checkpoint.
struct StoredBindings {
  std::string target;
  std::vector<Binding> bindings;
  std::vector<std::string> concept_ids;
};

inline StoredBindings stored_bindings(const nlohmann::json& extra, const Vocabulary& vocab) {
  StoredBindings out;
  out.target = extra.value("target", "");
  if (!extra.contains("bindings")) throw ConfigurationError("checkpoint carries no identifier bindings (not a fine-tuned run)");
  for (const auto& b : extra.at("bindings")) {
    out.bindings.push_back(Binding{make_identifier(vocab, b.at("identifier")), b.at("class")});
    out.concept_ids.push_back(b.at("concept"));
  }
  return out;
}

// ---------------------------------------------------------------------------
// One optimisation step

struct TrainStepResult {
  int step = 0;
  LossBreakdown loss;
  int t = 0;
  double wall_seconds = 0.0;
};

// Test hook: may replace the aggregated map of an identifier (given by
// concept id) before the guidance loss is taken. Returning nullopt keeps it.
using AttentionOverride = std::function<std::optional<Matrix>(const std::string& concept_id, const Matrix& map)>;

class Trainer {
 public:
  Trainer(Backbone& backbone, TrainConfig config) : backbone_(backbone), config_(std::move(config)) {
    config_.validate();
    const CapabilityReport caps = check_backbone(backbone_);
    caps.require("training");
    caps.require("selector");
    select_trainable(backbone_.parameters(), config_.selector);
    if (config_.guidance_mode != GuidanceMode::None) {
      caps.require("guidance");
      capture_ = register_capture(backbone_, config_.capture_factors);
    } else {
      backbone_.attach_capture(nullptr);
    }
    optimizer_ = AdamW(AdamW::Options{config_.learning_rate, 0.9, 0.999, 1e-8, config_.weight_decay});
  }

  ~Trainer() { backbone_.attach_capture(nullptr); }
  Trainer(const Trainer&) = delete;
  Trainer& operator=(const Trainer&) = delete;

  const TrainConfig& config() const { return config_; }
  void set_attention_override(AttentionOverride hook) { override_ = std::move(hook); }

  TrainStepResult step(int step_index, const std::vector<const TrainingExample*>& concept_batch,
                       const std::vector<const PriorExample*>& prior_batch, std::mt19937_64& rng) {
    const auto start = std::chrono::steady_clock::now();
    if (concept_batch.empty()) throw ArgumentError("training step: empty concept batch");
    const bool use_prior = config_.lambda > 0.0;
    if (use_prior && prior_batch.empty()) throw ConfigurationError("training step: lambda > 0 but no prior batch");
    const bool guided = config_.guidance_mode != GuidanceMode::None;
    const NoiseSchedule& sched = backbone_.schedule();
    const int t = std::uniform_int_distribution<int>(1, sched.steps())(rng);

    ad::Tape tape;
    const BoundParameters params = backbone_.parameters().bind(tape);
    std::vector<ad::Var> denoise_terms;
    std::vector<ad::Var> attn_terms;
    for (const TrainingExample* ex : concept_batch) {
      const Matrix eps = standard_normal(ex->z0.rows(), ex->z0.cols(), rng);
      if (capture_) {
        capture_->clear();
        capture_->set_enabled(guided);
      }
      ad::Var pred = backbone_.predict_noise(tape, params, add_noise(sched, ex->z0, t, eps), t, ex->tokens);
      denoise_terms.push_back(ad::mse(pred, eps));
      if (!guided) continue;
      std::vector<const CapturedAttention*> entries;
      for (const CapturedAttention& c : capture_->entries()) entries.push_back(&c);
      if (entries.empty()) throw ConfigurationError("training step: no attention captured");
      std::vector<ad::Var> per_identifier;
      for (const IdentifierTarget& id : ex->identifiers) {
        ad::Var map = ad::aggregate_token_map(entries, id.token_position, config_.attn_resolution, config_.attn_resolution);
        if (override_) {
          if (auto forced = override_(id.concept_id, map.value())) map = tape.constant(std::move(*forced));
        }
        per_identifier.push_back(ad::guidance_loss(map, id.target, config_.guidance_mode));
      }
      if (per_identifier.empty()) throw ConfigurationError("training step: example has no identifier masks");
      attn_terms.push_back(ad::mean_of(per_identifier));
    }
    if (capture_) {
      capture_->clear();
      capture_->set_enabled(false);
    }

    std::vector<ad::Var> prior_terms;
    if (use_prior) {
      for (const PriorExample* ex : prior_batch) {
        const Matrix eps = standard_normal(ex->z0.rows(), ex->z0.cols(), rng);
        ad::Var pred = backbone_.predict_noise(tape, params, add_noise(sched, ex->z0, t, eps), t, ex->tokens);
        prior_terms.push_back(ad::mse(pred, eps));
      }
    }

    const ad::Var l_denoise = ad::mean_of(denoise_terms);
    const std::optional<ad::Var> l_prior = prior_terms.empty() ? std::nullopt : std::optional(ad::mean_of(prior_terms));
    const std::optional<ad::Var> l_attn = attn_terms.empty() ? std::nullopt : std::optional(ad::mean_of(attn_terms));
    const double lambda = use_prior ? config_.lambda : 0.0;
    const double delta = guided ? config_.delta : 0.0;

    TrainStepResult result;
    result.step = step_index;
    result.t = t;
    result.loss = total_loss(l_denoise.value()(0, 0), l_prior ? l_prior->value()(0, 0) : 0.0,
                             l_attn ? l_attn->value()(0, 0) : 0.0, lambda, delta);

    std::vector<ad::Var> terms{l_denoise};
    std::vector<double> weights{1.0};
    if (l_prior) {
      terms.push_back(*l_prior);
      weights.push_back(lambda);
    }
    if (l_attn) {
      terms.push_back(*l_attn);
      weights.push_back(delta);
    }
    const ad::Var total = ad::weighted_sum(terms, weights);
    tape.backward(total);

    std::unordered_map<std::string, Matrix> grads;
    for (const ParameterGroup& g : backbone_.parameters().groups()) {
      if (!g.trainable) continue;
      const Matrix& grad = tape.grad(params.at(g.layer_id));
      if (grad.size() == 0) continue;
      if (!grad.allFinite()) throw TrainingStepError("gradient", "non-finite gradient for '" + g.layer_id + "'");
      grads.emplace(g.layer_id, grad);
    }
    optimizer_.step(backbone_.parameters(), grads);
    if (capture_) capture_->set_enabled(true);

    result.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return result;
  }

 private:
  Backbone& backbone_;
  TrainConfig config_;
  AdamW optimizer_;
  std::shared_ptr<AttentionCapture> capture_;
  AttentionOverride override_;
};

// Per-step generator: depends only on (seed, step), so a resumed run draws
// the same batches as an uninterrupted one.
inline std::mt19937_64 step_rng(std::uint64_t seed, int step) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(step), 0x7452u};
  return std::mt19937_64(seq);
}

template <typename T>
std::vector<const T*> draw_batch(const std::vector<T>& pool, int count, std::mt19937_64& rng) {
  std::vector<const T*> out;
  if (pool.empty()) return out;
  std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
  for (int i = 0; i < count; ++i) out.push_back(&pool[pick(rng)]);
  return out;
}

inline nlohmann::json log_line(const TrainStepResult& r) {
  return nlohmann::json{{"step", r.step},
                        {"t", r.t},
                        {"l_denoise", r.loss.l_denoise},
                        {"l_prior", r.loss.l_prior},
                        {"l_attn", r.loss.l_attn},
                        {"total", r.loss.total}};
}

inline nlohmann::json report_to_json(const WeightChangeReport& r) {
  nlohmann::json layers = nlohmann::json::array();
  for (const LayerChange& l : r.layers) layers.push_back({{"kind", to_string(l.kind)}, {"layer_id", l.layer_id}, {"delta", l.delta}});
  return nlohmann::json{{"step", r.step},
                        {"layers", layers},
                        {"mean",
                         {{"w_q", r.mean(ParamKind::Query)},
                          {"w_k", r.mean(ParamKind::Key)},
                          {"w_v", r.mean(ParamKind::Value)}}}};
}

// ---------------------------------------------------------------------------
// Full run

struct FinetuneResult {
  fs::path run_dir;
  fs::path final_checkpoint;
  fs::path log_path;
  WeightChangeReport report;
  std::vector<WeightChangeReport> curve;  // one per checkpoint, step order
  int steps_run = 0;
};

struct FinetuneOptions {
  AttentionOverride attention_override;
  // Called after every step, e.g. for progress output.
  std::function<void(const TrainStepResult&)> on_step;
};

// Layout of `run_dir`:
//   train_log.jsonl, checkpoints/{initial,step_N,final}/,
//   weight_change.csv, weight_change_report.json
inline FinetuneResult finetune(const TrainConfig& config, const ConceptManifest& manifest, Backbone& backbone,
                               const fs::path& run_dir, const FinetuneOptions& options = {}) {
  config.validate();
  fs::create_directories(run_dir / "checkpoints");
  const auto* toy = dynamic_cast<const ToyDenoiser*>(&backbone);
  const nlohmann::json model_json = toy ? nlohmann::json(toy->config()) : nlohmann::json(config.model);

  int start_step = 0;
  ParameterSnapshot initial;
  if (!config.resume_from.empty()) {
    const nlohmann::json manifest_json = read_checkpoint_manifest(config.resume_from);
    load_parameters(config.resume_from, backbone.parameters());
    start_step = manifest_json.value("step", 0);
    const std::string initial_dir = manifest_json.at("extra").value("initial_checkpoint", "");
    initial = initial_dir.empty() ? snapshot(backbone.parameters()) : load_snapshot(initial_dir);
    if (start_step >= config.steps) throw ConfigurationError("resume: checkpoint already at step " + std::to_string(start_step));
  }

  TrainingData data = build_training_data(backbone, manifest, config.target, config.attn_resolution);
  std::vector<PriorExample> priors;
  if (config.lambda > 0.0) {
    if (config.priors_dir.empty()) throw ConfigurationError("lambda > 0 requires priors_dir (or set lambda to 0)");
    priors = load_prior_examples(backbone, config.priors_dir, data.class_names());
    if (priors.empty()) throw ConfigurationError("lambda > 0 but the prior set is empty");
  }

  if (config.resume_from.empty()) {
    Matrix& table = backbone.parameters().at(backbone.embedding_table()).value;
    for (const Binding& b : data.bindings) init_identifier_embedding(b.identifier, table);
  }

  Trainer trainer(backbone, config);
  if (options.attention_override) trainer.set_attention_override(options.attention_override);

  const fs::path initial_dir = run_dir / "checkpoints" / "initial";
  if (config.resume_from.empty()) {
    save_checkpoint(initial_dir, backbone, 0, model_json);
    initial = snapshot(backbone.parameters());
  }
  const nlohmann::json extra{{"initial_checkpoint", config.resume_from.empty()
                                                        ? fs::absolute(initial_dir).string()
                                                        : read_checkpoint_manifest(config.resume_from)
                                                              .at("extra")
                                                              .value("initial_checkpoint", "")},
                             {"target", data.target},
                             {"bindings", bindings_to_json(data)},
                             {"train_config", nlohmann::json(config)}};

  FinetuneResult result;
  result.run_dir = run_dir;
  result.log_path = run_dir / "train_log.jsonl";
  std::ofstream log(result.log_path, config.resume_from.empty() ? std::ios::trunc : std::ios::app);
  std::ofstream csv(run_dir / "weight_change.csv", config.resume_from.empty() ? std::ios::trunc : std::ios::app);
  if (config.resume_from.empty()) csv << "step,kind,layer_id,delta\n";

  auto record_change = [&](int step) {
    WeightChangeReport r = weight_change_rate(initial, snapshot(backbone.parameters()), step);
    for (const LayerChange& l : r.layers) csv << step << ',' << to_string(l.kind) << ',' << l.layer_id << ',' << l.delta << '\n';
    csv.flush();
    result.curve.push_back(r);
    return r;
  };

  for (int s = start_step + 1; s <= config.steps; ++s) {
    std::mt19937_64 rng = step_rng(config.seed, s);
    const auto concept_batch = draw_batch(data.examples, config.batch_size, rng);
    const auto prior_batch = draw_batch(priors, config.batch_size, rng);
    const TrainStepResult r = trainer.step(s, concept_batch, prior_batch, rng);
    log << log_line(r).dump() << '\n';
    log.flush();
    if (options.on_step) options.on_step(r);
    ++result.steps_run;
    if (s % config.checkpoint_every == 0 && s != config.steps) {
      save_checkpoint(run_dir / "checkpoints" / ("step_" + std::to_string(s)), backbone, s, model_json, extra);
      record_change(s);
    }
  }

  result.final_checkpoint = run_dir / "checkpoints" / "final";
  save_checkpoint(result.final_checkpoint, backbone, config.steps, model_json, extra);
  result.report = record_change(config.steps);
  std::ofstream(run_dir / "weight_change_report.json") << report_to_json(result.report).dump(2) << '\n';
  return result;
}

// ---------------------------------------------------------------------------
// Sampling over a prompt bank

struct SampleRequest {
  std::vector<PromptTemplate> prompts;
  std::vector<Binding> bindings;
  std::vector<std::string> concept_ids;  // parallel to bindings; names the probe files
  int samples_per_prompt = 50;
  std::uint64_t seed = 0;
  bool probe = false;
  std::set<int> probe_factors{2, 4, 8};
  int probe_resolution = kDefaultMapResolution;
};

inline std::uint64_t sample_seed(std::uint64_t seed, int prompt_index, int sample_index) {
  return seed * 1000003ULL + static_cast<std::uint64_t>(prompt_index) * 100003ULL + static_cast<std::uint64_t>(sample_index);
}

// Writes <out_dir>/<prompt_idx>/<sample_idx>.png for every prompt, plus
// prompts.json. With probing, each sample also gets
// <sample_idx>_attn_<concept>.png and its sidecar. Returns the image count.
inline int sample_prompt_bank(Backbone& backbone, const SampleRequest& req, const fs::path& out_dir) {
  if (req.samples_per_prompt <= 0) throw ArgumentError("samples per prompt must be positive");
  if (req.prompts.empty()) throw ArgumentError("empty prompt bank");
  if (req.probe && req.concept_ids.size() != req.bindings.size()) {
    throw ArgumentError("sample_prompt_bank: concept_ids must parallel bindings");
  }
  fs::create_directories(out_dir);
  nlohmann::json prompts = nlohmann::json::array();
  int written = 0;
  for (std::size_t p = 0; p < req.prompts.size(); ++p) {
    const RenderedPrompt rp = render_prompt(backbone.vocabulary(), req.prompts[p], req.bindings);
    std::vector<std::string> surfaces;
    for (const Binding& b : req.bindings) surfaces.push_back(b.identifier.surface);
    prompts.push_back({{"index", p}, {"text", rp.text}, {"template", req.prompts[p].text()}, {"identifiers", surfaces}});
    const fs::path dir = out_dir / std::to_string(p);
    fs::create_directories(dir);
    ProbeRequest probe;
    if (req.probe) {
      probe.factors = req.probe_factors;
      probe.resolution = req.probe_resolution;
      for (const auto& pos : rp.identifier_positions) probe.token_positions.push_back(pos.front());
    }
    for (int s = 0; s < req.samples_per_prompt; ++s) {
      const SampleResult r =
          sample_latent(backbone, rp.tokens, sample_seed(req.seed, static_cast<int>(p), s), req.probe ? &probe : nullptr);
      write_png((dir / (std::to_string(s) + ".png")).string(), backbone.decode(r.latent));
      ++written;
      if (!req.probe) continue;
      for (std::size_t i = 0; i < r.probe.maps.size(); ++i) {
        write_probe(dir / (std::to_string(s) + "_attn_" + req.concept_ids[i] + ".png"), r.probe.maps[i], r.probe,
                    probe.token_positions[i]);
      }
    }
  }
  std::ofstream(out_dir / "prompts.json") << prompts.dump(2) << '\n';
  return written;
}

// ---------------------------------------------------------------------------
// Base-model pretraining on captioned shapes. Fine-tuning experiments start
// from a backbone that already ties words to colours and shapes, the way a
// real backbone arrives pretrained.

struct PretrainOptions {
  int steps = 3000;
  double learning_rate = 2e-3;
  int batch_size = 4;
  std::uint64_t seed = 0;
};

inline void pretrain_on_shapes(Backbone& backbone, const PretrainOptions& options,
                               const std::function<void(const TrainStepResult&)>& on_step = {}) {
  TrainConfig cfg;
  cfg.steps = options.steps;
  cfg.learning_rate = options.learning_rate;
  cfg.batch_size = options.batch_size;
  cfg.lambda = 0.0;
  cfg.guidance_mode = GuidanceMode::None;
  cfg.selector = ParameterSetSelector{ParameterSet::All, true};
  cfg.weight_decay = 0.0;
  Trainer trainer(backbone, cfg);
  const int size = backbone.latent_spec().width;
  for (int s = 1; s <= options.steps; ++s) {
    std::mt19937_64 rng = step_rng(options.seed ^ 0x5eedULL, s);
    std::vector<TrainingExample> batch;
    for (int i = 0; i < options.batch_size; ++i) {
      const CaptionedShape shape = render_captioned_shapes(rng, size);
      batch.push_back(TrainingExample{backbone.encode(shape.image), tokenize(backbone.vocabulary(), shape.caption), {}});
    }
    std::vector<const TrainingExample*> ptrs;
    for (const TrainingExample& e : batch) ptrs.push_back(&e);
    const TrainStepResult r = trainer.step(s, ptrs, {}, rng);
    if (on_step) on_step(r);
  }
  for (ParameterGroup& g : backbone.parameters().groups()) g.trainable = false;
}

}  // namespace textloc
