#pragma once

#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "grdd/checkpoint.hpp"
#include "grdd/config.hpp"
#include "grdd/data.hpp"
#include "grdd/errors.hpp"
#include "grdd/eval.hpp"
#include "grdd/global_stage.hpp"
#include "grdd/meta_stage.hpp"
#include "grdd/metrics.hpp"
#include "grdd/pipeline.hpp"

#ifndef GRDD_VERSION_STRING
#define GRDD_VERSION_STRING "0.1.0"
#endif

namespace grdd::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitNumeric = 4;

// Options shared by every subcommand.
struct CommonOptions {
  std::string config_file;
  std::vector<std::string> overrides;
  std::string data;
  std::string out_dir;
};

inline RunConfig resolve_config(const CommonOptions& o) {
  RunConfig c = o.config_file.empty() ? RunConfig{} : RunConfig::from_file(o.config_file);
  for (const auto& s : o.overrides) c.apply_override(s);
  if (!o.data.empty()) {
    if (o.data == "synthetic") {
      c.set("data.source", "synthetic");
    } else {
      c.set("data.path", o.data);
      if (c.get("data.source") == "synthetic") {
        c.set("data.source", std::filesystem::is_regular_file(c.data_path()) ? "packed_binary" : "class_folders");
      }
    }
  }
  if (!o.out_dir.empty()) c.set("run.output_dir", o.out_dir);
  c.validate();
  return c;
}

// The run directory only ever gains files: the first command writes
// config.resolved; later commands with a different configuration write
// config.<command>.resolved next to it. The manifest is appended to.
class RunDir {
 public:
  RunDir(const RunConfig& config, std::string command) : config_(config), command_(std::move(command)) {
    dir_ = config.output_dir();
    std::error_code ec;
    std::filesystem::create_directories(dir_, ec);
    if (ec || !std::filesystem::is_directory(dir_)) {
      throw DataError("cannot create run directory '" + dir_.string() + "'");
    }
    const std::string text = config.resolved_text();
    config_file_ = "config.resolved";
    if (std::filesystem::exists(dir_ / config_file_) && read_text(dir_ / config_file_) != text) {
      config_file_ = "config." + command_ + ".resolved";
    }
    std::ofstream(dir_ / config_file_, std::ios::trunc) << text;
  }

  const std::filesystem::path& path() const { return dir_; }
  std::filesystem::path operator/(const std::string& name) const { return dir_ / name; }

  JsonlMetrics& metrics() {
    if (!metrics_) metrics_.emplace(dir_ / "metrics.jsonl");
    return *metrics_;
  }

  void add_output(const std::filesystem::path& p) { outputs_.push_back(p.string()); }

  void append_manifest(const std::string& status, const nlohmann::json& extra = nlohmann::json::object()) const {
    nlohmann::json m{{"command", command_},
                     {"version", GRDD_VERSION_STRING},
                     {"status", status},
                     {"config", config_file_},
                     {"config_hash", fnv1a64(config_.resolved_text())},
                     {"root_seed", config_.root_seed()},
                     {"seeds",
                      {{"data", config_.seed_for("data")},
                       {"split", config_.seed_for("split")},
                       {"model", config_.seed_for("model")},
                       {"student_model", config_.seed_for("student_model")},
                       {"stage1", config_.seed_for("stage1")},
                       {"stage2", config_.seed_for("stage2")},
                       {"eval", config_.seed_for("eval")}}},
                     {"outputs", outputs_}};
    for (const auto& [k, v] : extra.items()) m[k] = v;
    std::ofstream(dir_ / "manifest.jsonl", std::ios::app) << m.dump() << '\n';
  }

 private:
  static std::string read_text(const std::filesystem::path& p) {
    std::ifstream is(p);
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
  }

  const RunConfig& config_;
  std::string command_;
  std::filesystem::path dir_;
  std::string config_file_;
  std::optional<JsonlMetrics> metrics_;
  std::vector<std::string> outputs_;
};

inline EncoderSpec teacher_spec(const RunConfig& c, const Dataset& ds) {
  return {c.architecture(), ds.shape(), c.seed_for("model"), c.pooling()};
}

inline EncoderSpec student_spec(const RunConfig& c, const Dataset& ds) {
  return {c.student_architecture(), ds.shape(), c.seed_for("student_model"), c.pooling()};
}

// Loads a checkpoint's encoder and checks it can read `ds`'s images.
inline Encoder load_encoder_for(const std::filesystem::path& path, const Dataset& ds) {
  if (!std::filesystem::exists(path)) throw CheckpointError("checkpoint '" + path.string() + "' does not exist");
  const Checkpoint ck = load_checkpoint(path);
  if (!(ck.header.input == ds.shape())) {
    throw CheckpointError("checkpoint '" + path.string() + "' (" + to_string(ck.header.architecture) + ", input " +
                          to_string(ck.header.input) + ") is incompatible with dataset images of shape " +
                          to_string(ds.shape()));
  }
  return encoder_from_checkpoint(ck);
}

inline void cmd_pretrain(const RunConfig& c, std::ostream& out) {
  RunDir run(c, "pretrain");
  const Dataset ds = load_configured_dataset(c);
  GlobalLearner learner = GlobalLearner::build(teacher_spec(c, ds), ds.categories_in(Split::train));
  const auto ckpt = run / "stage1.ckpt";
  try {
    const StageOneResult r = train_global(ds, learner, c.stage_one(), {&run.metrics(), ckpt});
    run.add_output(ckpt);
    run.append_manifest("ok", {{"final_train_acc", r.epoch_accuracy.back()}});
    out << "stage 1 finished: " << r.history.size() << " iterations, train accuracy "
        << r.epoch_accuracy.back() << "\ncheckpoint: " << ckpt.string() << '\n';
  } catch (const DivergenceError&) {
    run.add_output(ckpt);
    run.append_manifest("diverged");
    throw;
  }
}

inline void cmd_distill(const RunConfig& c, const std::string& teacher_path, std::ostream& out) {
  RunDir run(c, "distill");
  const Dataset ds = load_configured_dataset(c);
  const std::filesystem::path tpath = teacher_path.empty() ? run / "stage1.ckpt" : std::filesystem::path(teacher_path);
  const Encoder teacher = load_encoder_for(tpath, ds);
  const StageTwoConfig cfg = c.stage_two();
  Encoder student = make_student(teacher, student_spec(c, ds), cfg.student_init, ds, c.stage_one(), &run.metrics());
  const auto ckpt = run / "stage2.ckpt";
  const std::uint64_t before = teacher.parameters().hash();
  try {
    const StageTwoResult r = train_meta(teacher, student, ds, cfg, {&run.metrics(), ckpt});
    if (teacher.parameters().hash() != before) throw Error("teacher parameters changed during distillation");
    run.add_output(ckpt);
    nlohmann::json extra{{"teacher", tpath.string()}, {"ablation", to_string(cfg.ablation)}, {"best_epoch", r.best_epoch}};
    if (r.best_val_acc) extra["best_val_acc"] = *r.best_val_acc;
    run.append_manifest("ok", extra);
    out << "stage 2 (" << to_string(cfg.ablation) << ") finished: " << r.history.size() << " episodes";
    if (r.best_val_acc) out << ", best validation accuracy " << *r.best_val_acc << " at epoch " << r.best_epoch;
    out << "\ncheckpoint: " << ckpt.string() << '\n';
  } catch (const DivergenceError&) {
    run.add_output(ckpt);
    run.append_manifest("diverged", {{"teacher", tpath.string()}});
    throw;
  }
}

inline std::string eval_file_name(const EvalSpec& s) {
  return std::string("eval_") + to_string(s.split) + "_" + std::to_string(s.episode.way) + "way_" +
         std::to_string(s.episode.shot) + "shot.json";
}

inline EvalResult cmd_eval(const RunConfig& c, const std::string& ckpt_path, std::ostream& out) {
  RunDir run(c, "eval");
  const Dataset ds = load_configured_dataset(c);
  const std::filesystem::path path = ckpt_path.empty() ? run / "stage2.ckpt" : std::filesystem::path(ckpt_path);
  const Encoder student = load_encoder_for(path, ds);
  const EvalSpec spec = c.eval_spec();
  const EvalResult r = evaluate(student, ds, spec);
  const auto file = run / eval_file_name(spec);
  nlohmann::json j = to_json(r);
  j["checkpoint"] = path.string();
  j["split"] = to_string(spec.split);
  j["way"] = spec.episode.way;
  j["shot"] = spec.episode.shot;
  j["queries_per_class"] = spec.episode.queries_per_class;
  std::ofstream(file, std::ios::trunc) << j.dump(2) << '\n';
  run.add_output(file);
  run.append_manifest("ok", {{"checkpoint", path.string()}, {"mean_accuracy", r.mean_accuracy},
                             {"ci95_halfwidth", r.ci95_halfwidth}});
  out << spec.episode.way << "-way " << spec.episode.shot << "-shot accuracy on " << to_string(spec.split) << ": "
      << format_accuracy(r) << " % over " << r.n_episodes << " episodes\nresult: " << file.string() << '\n';
  return r;
}

inline void cmd_export_embeddings(const RunConfig& c, const std::string& ckpt_path, const std::string& out_path,
                                  std::ostream& out) {
  RunDir run(c, "export-embeddings");
  const Dataset ds = load_configured_dataset(c);
  const std::filesystem::path path = ckpt_path.empty() ? run / "stage2.ckpt" : std::filesystem::path(ckpt_path);
  const Encoder student = load_encoder_for(path, ds);
  const Split split = parse_split(c.get("eval.split"));
  const std::filesystem::path file = out_path.empty() ? run / "embeddings.bin" : std::filesystem::path(out_path);
  const auto n = static_cast<std::size_t>(c.get_int("eval.n_samples"));
  export_embeddings(student, ds, split, n, file);
  run.add_output(file);
  run.append_manifest("ok", {{"checkpoint", path.string()}, {"split", to_string(split)}});
  out << "wrote " << std::min(n, ds.indices_in(split).size()) << " embeddings of width " << student.embed_dim()
      << " to " << file.string() << '\n';
}

inline std::vector<AblationRow> cmd_ablate(const RunConfig& c, const std::string& teacher_path, std::ostream& out) {
  RunDir run(c, "ablate");
  const Dataset ds = load_configured_dataset(c);
  const std::filesystem::path tpath = teacher_path.empty() ? run / "stage1.ckpt" : std::filesystem::path(teacher_path);
  const Encoder teacher = load_encoder_for(tpath, ds);
  const AblationOptions opt{c.stage_two(), c.stage_one(), student_spec(c, ds), c.eval_spec(), &run.metrics()};
  const auto rows = ablation_table(teacher, ds, c.ablation_rows(), opt);
  const std::string table = format_ablation_table(rows);
  std::ofstream(run / "ablation.txt", std::ios::trunc) << table;
  std::ofstream(run / "ablation.json", std::ios::trunc) << to_json(rows).dump(2) << '\n';
  run.add_output(run / "ablation.txt");
  run.add_output(run / "ablation.json");
  run.append_manifest("ok", {{"teacher", tpath.string()}});
  out << table;
  return rows;
}

// pretrain, distill and eval in one run directory.
inline EvalResult cmd_run(const RunConfig& c, std::ostream& out) {
  cmd_pretrain(c, out);
  cmd_distill(c, "", out);
  return cmd_eval(c, "", out);
}

// Runs `fn`, mapping failures to exit codes with a one-line diagnostic.
template <class Fn>
int guarded(Fn&& fn, std::ostream& err) {
  try {
    fn();
    return kExitOk;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const ShapeError& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
}

inline int main(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Few-shot learning by global relatedness decoupled distillation", "grdd"};
  app.require_subcommand(1);
  app.set_version_flag("--version", GRDD_VERSION_STRING);

  CommonOptions common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config_file, "config file with flat dotted keys")->check(CLI::ExistingFile);
    sub->add_option("--set", common.overrides, "override one key, e.g. --set stage2.gamma=0.5")->take_all();
    sub->add_option("--data", common.data, "'synthetic' or a dataset path");
    sub->add_option("--out", common.out_dir, "run directory (run.output_dir)");
  };

  std::string teacher, checkpoint, out_file;
  std::optional<int> way, shot, n_samples;
  std::string split, modes;

  auto* pretrain = app.add_subcommand("pretrain", "stage 1: train the global learner");
  add_common(pretrain);
  auto* distill = app.add_subcommand("distill", "stage 2: distill relatedness into the meta learner");
  add_common(distill);
  distill->add_option("--teacher", teacher, "stage-1 checkpoint (default <run>/stage1.ckpt)");
  auto* eval = app.add_subcommand("eval", "episodic evaluation with a 95% confidence interval");
  add_common(eval);
  eval->add_option("--checkpoint", checkpoint, "encoder checkpoint (default <run>/stage2.ckpt)");
  eval->add_option("--way", way, "classes per episode (eval.way)");
  eval->add_option("--shot", shot, "supports per class (eval.shot)");
  eval->add_option("--split", split, "train | val | test (eval.split)");
  auto* exp = app.add_subcommand("export-embeddings", "write embeddings and labels as packed binary");
  add_common(exp);
  exp->add_option("--checkpoint", checkpoint, "encoder checkpoint (default <run>/stage2.ckpt)");
  exp->add_option("--output", out_file, "output file (default <run>/embeddings.bin)");
  exp->add_option("--n-samples", n_samples, "rows to write (eval.n_samples)");
  exp->add_option("--split", split, "train | val | test (eval.split)");
  auto* ablate = app.add_subcommand("ablate", "train and evaluate each ablation mode");
  add_common(ablate);
  ablate->add_option("--teacher", teacher, "stage-1 checkpoint (default <run>/stage1.ckpt)");
  ablate->add_option("--modes", modes, "comma-separated rows (ablate.modes)");
  auto* run = app.add_subcommand("run", "pretrain, distill and eval in one run directory");
  add_common(run);

  std::vector<std::string> argv(args.rbegin(), args.rend());
  try {
    app.parse(argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::CallForVersion&) {
    out << GRDD_VERSION_STRING << '\n';
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << '\n';
    return kExitConfig;
  }

  return guarded(
      [&] {
        RunConfig c = resolve_config(common);
        if (way) c.set("eval.way", std::to_string(*way));
        if (shot) c.set("eval.shot", std::to_string(*shot));
        if (n_samples) c.set("eval.n_samples", std::to_string(*n_samples));
        if (!split.empty()) c.set("eval.split", split);
        if (!modes.empty()) c.set("ablate.modes", modes);
        c.validate();
        if (pretrain->parsed()) cmd_pretrain(c, out);
        if (distill->parsed()) cmd_distill(c, teacher, out);
        if (eval->parsed()) cmd_eval(c, checkpoint, out);
        if (exp->parsed()) cmd_export_embeddings(c, checkpoint, out_file, out);
        if (ablate->parsed()) cmd_ablate(c, teacher, out);
        if (run->parsed()) cmd_run(c, out);
      },
      err);
}

}  // namespace grdd::cli
