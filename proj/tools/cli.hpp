#pragma once

// textloc command line: prepare, pretrain, priors, train, sample, attn, eval
// and ablate. Exit codes: 0 success, 1 validation or configuration error,
// 2 missing backbone capability, 3 runtime failure.

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "textloc/checkpoint.hpp"
#include "textloc/datasets.hpp"
#include "textloc/evaluation.hpp"
#include "textloc/plot.hpp"
#include "textloc/run_record.hpp"
#include "textloc/sampling.hpp"
#include "textloc/toy_denoiser.hpp"
#include "textloc/trainer.hpp"

namespace textloc::cli {

enum ExitCode : int { kOk = 0, kValidation = 1, kCapability = 2, kRuntime = 3 };

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

inline std::uint64_t seed_or(const Globals& g, std::uint64_t fallback) { return g.seed ? *g.seed : fallback; }

inline fs::path require_out(const Globals& g) {
  if (g.out.empty()) throw ArgumentError("--out is required");
  return g.out;
}

inline std::set<int> parse_factors(const std::string& s) {
  std::set<int> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    try {
      out.insert(std::stoi(item));
    } catch (const std::exception&) {
      throw ArgumentError("bad downsample factor '" + item + "'");
    }
  }
  if (out.empty()) throw ArgumentError("no downsample factors given");
  return out;
}

// ---------------------------------------------------------------------------

struct PrepareArgs {
  std::string manifest;
  bool strict = false;
  int synthesize = 0;
};

inline int cmd_prepare(const Globals& g, const PrepareArgs& a, std::ostream& out) {
  const fs::path path = a.manifest;
  if (a.synthesize > 0) {
    const fs::path dir = path.has_parent_path() ? path.parent_path() : fs::path(".");
    make_shapes_dataset(dir, a.synthesize, seed_or(g, 0));
    if (path.filename() != "manifest.json") fs::rename(dir / "manifest.json", path);
    RunRecord rec = make_run_record("prepare", {{"synthesize", a.synthesize}, {"seed", seed_or(g, 0)}});
    write_run_record(dir, rec);
  }
  ManifestOptions opts;
  opts.strict = a.strict;
  const ConceptManifest m = load_manifest(path, opts);
  out << "manifest " << path.string() << ": ok\n";
  out << "concepts: " << m.concepts.size() << "\n";
  for (const auto& c : m.concepts) {
    out << "  " << c.id << " (class " << c.class_name << ", identifier " << c.identifier << "): " << c.images.size()
        << " images\n";
  }
  out << "groups: " << m.groups.size() << "\n";
  for (const auto& gr : m.groups) out << "  " << gr.id << ": " << gr.images.size() << " images\n";
  for (const auto& w : m.warnings) out << "warning: " << w << "\n";
  return kOk;
}

struct PretrainArgs {
  int steps = PretrainOptions{}.steps;
  double learning_rate = PretrainOptions{}.learning_rate;
  int batch_size = PretrainOptions{}.batch_size;
};

inline int cmd_pretrain(const Globals& g, const PretrainArgs& a, std::ostream& out) {
  const fs::path dir = require_out(g);
  ToyDenoiserConfig mc;
  if (!g.config.empty()) mc = load_train_config(g.config).model;
  if (g.seed) mc.seed = *g.seed;
  ToyDenoiser model(mc);
  PretrainOptions po{a.steps, a.learning_rate, a.batch_size, mc.seed};
  pretrain_on_shapes(model, po, [&](const TrainStepResult& r) {
    if (r.step % 500 == 0) out << "pretrain step " << r.step << " l_denoise " << r.loss.l_denoise << "\n";
  });
  const nlohmann::json cfg{{"model", mc}, {"steps", po.steps}, {"learning_rate", po.learning_rate},
                           {"batch_size", po.batch_size}, {"seed", po.seed}};
  save_checkpoint(dir, model, 0, nlohmann::json(mc), {{"pretrain", cfg}});
  RunRecord rec = make_run_record("pretrain", cfg);
  if (!g.config.empty()) rec.add_input(g.config);
  write_run_record(dir, rec);
  out << "base checkpoint written to " << dir.string() << "\n";
  return kOk;
}

struct PriorsArgs {
  std::string class_name;
  int count = kDefaultPriorCount;
  std::string checkpoint;
};

inline std::unique_ptr<ToyDenoiser> load_or_fresh(const std::string& checkpoint, std::uint64_t seed) {
  if (!checkpoint.empty()) return load_toy_checkpoint(checkpoint).model;
  ToyDenoiserConfig mc;
  mc.seed = seed;
  return std::make_unique<ToyDenoiser>(mc);
}

inline int cmd_priors(const Globals& g, const PriorsArgs& a, std::ostream& out) {
  const fs::path root = require_out(g);
  if (a.count <= 0) throw ArgumentError("--count must be positive");
  if (a.class_name.empty()) throw ArgumentError("--class is required");
  auto model = load_or_fresh(a.checkpoint, seed_or(g, 0));
  const PriorSet set = generate_priors(*model, a.class_name, a.count, seed_or(g, 0), root);
  RunRecord rec = make_run_record(
      "priors", {{"class", a.class_name}, {"count", a.count}, {"seed", seed_or(g, 0)}, {"checkpoint", a.checkpoint}});
  if (!a.checkpoint.empty()) rec.add_input(fs::path(a.checkpoint) / "manifest.json");
  write_run_record(root / a.class_name, rec);
  out << set.images.size() << " prior images for '" << a.class_name << "' in " << (root / a.class_name).string() << "\n";
  return kOk;
}

struct TrainArgs {
  std::string manifest;
  std::string mode;
  std::string selector;
  int steps = 0;
  std::string resume;
  std::string base;
};

inline TrainConfig resolve_train_config(const Globals& g, const TrainArgs& a) {
  if (g.config.empty()) throw ArgumentError("--config is required");
  TrainConfig cfg = load_train_config(g.config);
  if (g.seed) cfg.seed = *g.seed;
  if (!a.mode.empty()) cfg.guidance_mode = parse_guidance_mode(a.mode);
  if (!a.selector.empty()) cfg.selector.set = parse_parameter_set(a.selector);
  if (a.steps > 0) cfg.steps = a.steps;
  if (!a.resume.empty()) cfg.resume_from = a.resume;
  if (!a.base.empty()) cfg.base_checkpoint = a.base;
  cfg.validate();
  return cfg;
}

inline FinetuneResult run_training(const TrainConfig& cfg, const fs::path& manifest_path, const fs::path& dir,
                                   std::ostream& out, const std::string& command = "train") {
  const ConceptManifest manifest = load_manifest(manifest_path);
  auto model = make_backbone(cfg);
  FinetuneOptions opts;
  opts.on_step = [&](const TrainStepResult& r) {
    if (r.step % 100 == 0) {
      out << "step " << r.step << " total " << r.loss.total << " l_denoise " << r.loss.l_denoise << " l_attn "
          << r.loss.l_attn << "\n";
    }
  };
  FinetuneResult res = finetune(cfg, manifest, *model, dir, opts);
  RunRecord rec = make_run_record(command, nlohmann::json(cfg));
  rec.add_input(manifest_path);
  if (!cfg.base_checkpoint.empty()) rec.add_input(fs::path(cfg.base_checkpoint) / "manifest.json");
  write_run_record(dir, rec);
  return res;
}

inline int cmd_train(const Globals& g, const TrainArgs& a, std::ostream& out) {
  const fs::path dir = require_out(g);
  if (a.manifest.empty()) throw ArgumentError("--manifest is required");
  const TrainConfig cfg = resolve_train_config(g, a);
  const FinetuneResult res = run_training(cfg, a.manifest, dir, out);
  out << "trained " << res.steps_run << " steps; final checkpoint " << res.final_checkpoint.string() << "\n";
  out << "mean delta w_q " << res.report.mean(ParamKind::Query) << " w_k " << res.report.mean(ParamKind::Key) << " w_v "
      << res.report.mean(ParamKind::Value) << "\n";
  return kOk;
}

struct SampleArgs {
  std::string checkpoint;
  int count = 50;
  std::string prompts;
  bool probe = false;
  int prompt_limit = 0;
};

inline int sample_checkpoint(const fs::path& checkpoint, const SampleArgs& a, std::uint64_t seed, const fs::path& out_root) {
  LoadedCheckpoint ck = load_toy_checkpoint(checkpoint);
  const StoredBindings sb = stored_bindings(ck.extra, ck.model->vocabulary());
  SampleRequest req;
  req.prompts = a.prompts.empty() ? default_prompt_bank(static_cast<int>(sb.bindings.size())) : load_prompt_bank(a.prompts);
  if (a.prompt_limit > 0 && static_cast<int>(req.prompts.size()) > a.prompt_limit) req.prompts.erase(req.prompts.begin() + a.prompt_limit, req.prompts.end());
  req.bindings = sb.bindings;
  req.concept_ids = sb.concept_ids;
  req.samples_per_prompt = a.count;
  req.seed = seed;
  req.probe = a.probe;
  return sample_prompt_bank(*ck.model, req, out_root / sb.target);
}

inline int cmd_sample(const Globals& g, const SampleArgs& a, std::ostream& out) {
  const fs::path dir = require_out(g);
  if (a.checkpoint.empty()) throw ArgumentError("--checkpoint is required");
  const int n = sample_checkpoint(a.checkpoint, a, seed_or(g, 0), dir);
  RunRecord rec = make_run_record("sample", {{"checkpoint", a.checkpoint}, {"count", a.count}, {"prompts", a.prompts},
                                             {"probe", a.probe}, {"prompt_limit", a.prompt_limit}, {"seed", seed_or(g, 0)}});
  rec.add_input(fs::path(a.checkpoint) / "manifest.json");
  if (!a.prompts.empty()) rec.add_input(a.prompts);
  write_run_record(dir, rec);
  out << n << " images written under " << dir.string() << "\n";
  return kOk;
}

struct AttnArgs {
  std::string checkpoint;
  std::string prompt;
  std::string factors = "2,4,8";
  int resolution = kDefaultMapResolution;
};

inline int cmd_attn(const Globals& g, const AttnArgs& a, std::ostream& out) {
  const fs::path dir = require_out(g);
  if (a.checkpoint.empty()) throw ArgumentError("--checkpoint is required");
  if (a.prompt.empty()) throw ArgumentError("--prompt is required");
  LoadedCheckpoint ck = load_toy_checkpoint(a.checkpoint);
  const StoredBindings sb = stored_bindings(ck.extra, ck.model->vocabulary());
  const TokenSequence tokens = tokenize(ck.model->vocabulary(), a.prompt);
  ProbeRequest probe;
  probe.factors = parse_factors(a.factors);
  probe.resolution = a.resolution;
  std::vector<std::string> names;
  for (std::size_t i = 0; i < sb.bindings.size(); ++i) {
    for (std::size_t k = 0; k < tokens.size(); ++k) {
      if (tokens.ids[k] == sb.bindings[i].identifier.vocab_id) {
        probe.token_positions.push_back(static_cast<int>(k));
        names.push_back(sb.concept_ids[i]);
        break;
      }
    }
  }
  if (probe.token_positions.empty()) throw ArgumentError("prompt contains none of the trained identifiers");
  const SampleResult r = sample_latent(*ck.model, tokens, seed_or(g, 0), &probe);
  fs::create_directories(dir);
  const Image sample = ck.model->decode(r.latent);
  write_png((dir / "sample.png").string(), sample);
  for (std::size_t i = 0; i < names.size(); ++i) {
    write_probe(dir / ("attn_" + names[i] + ".png"), r.probe.maps[i], r.probe, probe.token_positions[i]);
  }
  write_png((dir / "grid.png").string(), attention_grid(sample, r.probe.maps));
  RunRecord rec = make_run_record("attn", {{"checkpoint", a.checkpoint}, {"prompt", a.prompt}, {"factors", a.factors},
                                           {"resolution", a.resolution}, {"seed", seed_or(g, 0)}});
  rec.add_input(fs::path(a.checkpoint) / "manifest.json");
  write_run_record(dir, rec);
  out << "maps for " << names.size() << " identifier(s) averaged over " << r.probe.timestep_count << " timesteps in "
      << dir.string() << "\n";
  return kOk;
}

struct EvalArgs {
  std::string run;
  std::string manifest;
  std::string providers;
};

struct ProviderSet {
  std::unique_ptr<EmbeddingProvider> embedding;
  std::unique_ptr<PerceptualDistanceProvider> perceptual;
};

// {"embedding": "mock", "dimension": 64, "perceptual": "mock" | "none"}
inline ProviderSet load_providers(const std::string& path) {
  nlohmann::json j = nlohmann::json::object();
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigurationError("cannot open providers config '" + path + "'");
    j = nlohmann::json::parse(in);
  }
  ProviderSet p;
  const std::string emb = j.value("embedding", "mock");
  if (emb != "mock") throw CapabilityError("embedding provider '" + emb + "' is not available in this build");
  p.embedding = std::make_unique<MockEmbeddingProvider>(j.value("dimension", 64));
  const std::string per = j.value("perceptual", "mock");
  if (per == "mock") {
    p.perceptual = std::make_unique<MockPerceptualDistance>();
  } else if (per != "none") {
    throw CapabilityError("perceptual provider '" + per + "' is not available in this build");
  }
  return p;
}

inline int cmd_eval(const Globals& g, const EvalArgs& a, std::ostream& out) {
  const fs::path dir = require_out(g);
  if (a.run.empty() || a.manifest.empty()) throw ArgumentError("--run and --manifest are required");
  if (!fs::is_directory(a.run)) throw ValidationError("run directory '" + a.run + "' does not exist");
  const ProviderSet p = load_providers(a.providers);
  const ConceptManifest manifest = load_manifest(a.manifest);
  const MetricReport report = evaluate(a.run, manifest, EvaluationProviders{p.embedding.get(), p.perceptual.get()});
  write_reports(report, dir);
  RunRecord rec = make_run_record("eval", {{"run", a.run}, {"manifest", a.manifest}, {"providers", report.provenance}});
  rec.add_input(a.manifest);
  if (!a.providers.empty()) rec.add_input(a.providers);
  write_run_record(dir, rec);
  out << report_markdown(report);
  return kOk;
}

struct AblateArgs {
  std::string manifest;
  std::string sets = "qkv,qv,kv";
  int samples = 4;
  int prompt_limit = 2;
};

inline int cmd_ablate(const Globals& g, const AblateArgs& a, std::ostream& out) {
  const fs::path dir = require_out(g);
  if (a.manifest.empty()) throw ArgumentError("--manifest is required");
  std::vector<ParameterSet> sets;
  {
    std::stringstream in(a.sets);
    std::string item;
    while (std::getline(in, item, ',')) sets.push_back(parse_parameter_set(item));
  }
  if (sets.empty()) throw ArgumentError("--sets is empty");
  TrainConfig base = resolve_train_config(g, TrainArgs{});
  const ConceptManifest manifest = load_manifest(a.manifest);
  const ProviderSet providers = load_providers("");

  std::ofstream curves_csv((fs::create_directories(dir), dir / "weight_change_curves.csv"));
  curves_csv << "set,step,kind,mean_delta\n";
  std::vector<std::pair<std::string, MetricRow>> table;
  for (ParameterSet set : sets) {
    const std::string name = to_string(set);
    TrainConfig cfg = base;
    cfg.selector.set = set;
    out << "== " << name << "\n";
    const FinetuneResult res = run_training(cfg, a.manifest, dir / name, out, "ablate-train");
    std::vector<Series> series;
    for (ParamKind kind : {ParamKind::Query, ParamKind::Key, ParamKind::Value}) {
      Series s{to_string(kind), {}, {}};
      for (const WeightChangeReport& r : res.curve) {
        curves_csv << name << ',' << r.step << ',' << to_string(kind) << ',' << r.mean(kind) << '\n';
        s.x.push_back(r.step);
        s.y.push_back(r.mean(kind));
      }
      series.push_back(std::move(s));
    }
    std::ofstream(dir / ("weight_change_" + name + ".svg"))
        << line_chart_svg(series, "Weight change rate, " + name, "step", "mean delta");

    SampleArgs sa;
    sa.count = a.samples;
    sa.prompt_limit = a.prompt_limit;
    const fs::path samples = dir / name / "samples";
    sample_checkpoint(res.final_checkpoint, sa, cfg.seed, samples);
    const MetricReport report =
        evaluate(samples, manifest, EvaluationProviders{providers.embedding.get(), providers.perceptual.get()});
    write_reports(report, dir / name / "eval");
    for (const MetricRow& row : report.rows) table.emplace_back(name, row);
  }

  std::ofstream md(dir / "ablation.md");
  md << "| Parameters | Target | CLIP-I | CLIP-T | KID | LPIPS diversity |\n|---|---|---|---|---|---|\n";
  std::ofstream csv(dir / "ablation.csv");
  csv << "set,target,clip_i,clip_t,kid,lpips_diversity\n";
  for (const auto& [set, row] : table) {
    md << "| " << set << " | " << row.target << " | " << detail::fixed(row.clip_i, 4) << " | " << detail::fixed(row.clip_t, 4)
       << " | " << detail::fixed(row.kid, 4) << " | " << detail::fixed(row.lpips_diversity, 4) << " |\n";
    csv << set << ',' << row.target << ',' << detail::fixed(row.clip_i) << ',' << detail::fixed(row.clip_t) << ','
        << detail::fixed(row.kid) << ',' << detail::fixed(row.lpips_diversity) << '\n';
  }
  md << "\nEmbedding provider: `" << providers.embedding->name() << "`; perceptual provider: `"
     << providers.perceptual->name() << "`\n";
  RunRecord rec = make_run_record("ablate", {{"train", nlohmann::json(base)}, {"sets", a.sets}, {"samples", a.samples},
                                             {"prompt_limit", a.prompt_limit}});
  rec.add_input(a.manifest);
  rec.add_input(g.config);
  write_run_record(dir, rec);
  out << "ablation written to " << dir.string() << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Attention-localised concept fine-tuning on a toy diffusion backbone", "textloc"};
  app.require_subcommand(1);
  Globals g;
  std::uint64_t seed = 0;
  app.add_option("--config", g.config, "JSON config file")->envname("TEXTLOC_CONFIG");
  auto* seed_opt = app.add_option("--seed", seed, "random seed")->envname("TEXTLOC_SEED");
  app.add_option("--out", g.out, "output directory")->envname("TEXTLOC_OUT");

  PrepareArgs prepare;
  auto* c_prepare = app.add_subcommand("prepare", "validate a concept manifest");
  c_prepare->add_option("manifest", prepare.manifest, "manifest.json")->required();
  c_prepare->add_flag("--strict", prepare.strict, "treat soft masks as errors");
  c_prepare->add_option("--synthesize", prepare.synthesize, "first write a synthetic two-shape dataset of N images");

  PretrainArgs pretrain;
  auto* c_pretrain = app.add_subcommand("pretrain", "pretrain the toy backbone on captioned shapes");
  c_pretrain->add_option("--steps", pretrain.steps);
  c_pretrain->add_option("--lr", pretrain.learning_rate);
  c_pretrain->add_option("--batch", pretrain.batch_size);

  PriorsArgs priors;
  auto* c_priors = app.add_subcommand("priors", "sample class-prior images");
  c_priors->add_option("--class", priors.class_name)->required();
  c_priors->add_option("--count", priors.count);
  c_priors->add_option("--checkpoint", priors.checkpoint, "backbone checkpoint (default: fresh toy backbone)");

  TrainArgs train;
  auto* c_train = app.add_subcommand("train", "fine-tune on a concept or concept group");
  c_train->add_option("--manifest", train.manifest)->required();
  c_train->add_option("--mode", train.mode, "hard, soft or none");
  c_train->add_option("--selector", train.selector, "kv, qv, qkv or all");
  c_train->add_option("--steps", train.steps);
  c_train->add_option("--resume", train.resume, "checkpoint to resume from");
  c_train->add_option("--base", train.base, "pretrained base checkpoint");

  SampleArgs sample;
  auto* c_sample = app.add_subcommand("sample", "sample the prompt bank from a fine-tuned checkpoint");
  c_sample->add_option("--checkpoint", sample.checkpoint)->required();
  c_sample->add_option("--count", sample.count, "samples per prompt");
  c_sample->add_option("--prompts", sample.prompts, "prompt template file");
  c_sample->add_option("--prompt-limit", sample.prompt_limit, "use only the first N prompts");
  c_sample->add_flag("--probe", sample.probe, "also write timestep-mean identifier attention maps");

  AttnArgs attn;
  auto* c_attn = app.add_subcommand("attn", "probe identifier attention maps while sampling one prompt");
  c_attn->add_option("--checkpoint", attn.checkpoint)->required();
  c_attn->add_option("--prompt", attn.prompt)->required();
  c_attn->add_option("--factors", attn.factors, "downsample factors, comma separated");
  c_attn->add_option("--resolution", attn.resolution);

  EvalArgs eval;
  auto* c_eval = app.add_subcommand("eval", "score sampled images");
  c_eval->add_option("--run", eval.run, "samples directory")->required();
  c_eval->add_option("--manifest", eval.manifest)->required();
  c_eval->add_option("--providers", eval.providers, "providers config JSON");

  AblateArgs ablate;
  auto* c_ablate = app.add_subcommand("ablate", "compare trainable parameter sets");
  c_ablate->add_option("--manifest", ablate.manifest)->required();
  c_ablate->add_option("--sets", ablate.sets);
  c_ablate->add_option("--samples", ablate.samples, "samples per prompt for the metric table");
  c_ablate->add_option("--prompt-limit", ablate.prompt_limit);

  for (CLI::App* sub : app.get_subcommands([](CLI::App*) { return true; })) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kValidation;
  }
  if (seed_opt->count() > 0) g.seed = seed;

  try {
    if (*c_prepare) return cmd_prepare(g, prepare, out);
    if (*c_pretrain) return cmd_pretrain(g, pretrain, out);
    if (*c_priors) return cmd_priors(g, priors, out);
    if (*c_train) return cmd_train(g, train, out);
    if (*c_sample) return cmd_sample(g, sample, out);
    if (*c_attn) return cmd_attn(g, attn, out);
    if (*c_eval) return cmd_eval(g, eval, out);
    if (*c_ablate) return cmd_ablate(g, ablate, out);
  } catch (const CapabilityError& e) {
    err << "capability error: " << e.what() << "\n";
    return kCapability;
  } catch (const ValidationError& e) {
    err << "validation error: " << e.what() << "\n";
    return kValidation;
  } catch (const ConfigurationError& e) {
    err << "configuration error: " << e.what() << "\n";
    return kValidation;
  } catch (const FormatError& e) {
    err << "format error: " << e.what() << "\n";
    return kValidation;
  } catch (const ArgumentError& e) {
    err << "argument error: " << e.what() << "\n";
    return kValidation;
  } catch (const TrainingStepError& e) {
    err << "training aborted (" << e.component() << "): " << e.what() << "\n";
    return kRuntime;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kValidation;
}

}  // namespace textloc::cli
