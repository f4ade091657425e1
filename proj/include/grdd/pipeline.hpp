#pragma once

#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "grdd/data.hpp"
#include "grdd/encoders.hpp"
#include "grdd/errors.hpp"
#include "grdd/eval.hpp"
#include "grdd/global_stage.hpp"
#include "grdd/meta_stage.hpp"
#include "grdd/metrics.hpp"

namespace grdd {

// Starting point for the stage-2 student. A student sharing the teacher's
// architecture and pooling starts from the teacher's weights; a different
// architecture is first trained through stage 1 on its own.
inline Encoder make_student(const Encoder& teacher, const EncoderSpec& student_spec, StudentInit init,
                            const Dataset& dataset, const StageOneConfig& stage1, MetricsSink* metrics = nullptr) {
  if (init == StudentInit::random) return Encoder::build(student_spec);
  const EncoderSpec& t = teacher.spec();
  if (t.architecture == student_spec.architecture && t.pooling == student_spec.pooling &&
      t.input == student_spec.input) {
    return teacher;
  }
  GlobalLearner own = GlobalLearner::build(student_spec, dataset.categories_in(Split::train));
  train_global(dataset, own, stage1, {metrics, std::nullopt});
  return own.encoder;
}

// One row of an ablation table. The "cl" row evaluates the stage-1 encoder
// as is; every other row is a stage-2 run with that ablation mode.
struct AblationRow {
  std::string mode;
  std::string label;
  EvalResult result;
};

inline const std::vector<std::string>& ablation_modes() {
  static const std::vector<std::string> modes{"cl", "episodic_labels_only", "full", "no_rdd", "no_rt"};
  return modes;
}

inline std::string ablation_label(const std::string& mode) {
  if (mode == "cl") return "CL";
  if (mode == "episodic_labels_only") return "CL+EL";
  if (mode == "full") return "CL+GR";
  if (mode == "no_rdd") return "w/o RDD";
  if (mode == "no_rt") return "w/o L_rt";
  throw ConfigError("unknown ablation row '" + mode + "'");
}

struct AblationOptions {
  StageTwoConfig stage2;    // its ablation field is overridden per row
  StageOneConfig stage1;    // used only when the student needs its own stage 1
  EncoderSpec student_spec;
  EvalSpec eval;
  MetricsSink* metrics = nullptr;
};

// Trains (when needed) and evaluates every requested mode with the same
// seeds, so rows differ only in the objective.
inline std::vector<AblationRow> ablation_table(const Encoder& teacher, const Dataset& dataset,
                                               const std::vector<std::string>& modes, const AblationOptions& opt) {
  if (modes.empty()) throw ConfigError("the ablation table needs at least one mode");
  std::vector<AblationRow> rows;
  std::optional<Encoder> base;
  for (const std::string& mode : modes) {
    AblationRow row{mode, ablation_label(mode), {}};
    if (mode == "cl") {
      row.result = evaluate(teacher, dataset, opt.eval);
    } else {
      if (!base) base = make_student(teacher, opt.student_spec, opt.stage2.student_init, dataset, opt.stage1, opt.metrics);
      Encoder student = *base;
      StageTwoConfig cfg = opt.stage2;
      cfg.ablation = parse_ablation(mode);
      train_meta(teacher, student, dataset, cfg, {opt.metrics, std::nullopt});
      row.result = evaluate(student, dataset, opt.eval);
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

inline std::string format_ablation_table(const std::vector<AblationRow>& rows) {
  std::size_t w_label = 5, w_mode = 4;
  for (const auto& r : rows) {
    w_label = std::max(w_label, r.label.size());
    w_mode = std::max(w_mode, r.mode.size());
  }
  auto pad = [](const std::string& s, std::size_t w) { return s + std::string(w - s.size(), ' '); };
  std::string out = pad("Model", w_label) + "  " + pad("Mode", w_mode) + "  Accuracy (%)\n";
  out += std::string(w_label, '-') + "  " + std::string(w_mode, '-') + "  ------------\n";
  for (const auto& r : rows) out += pad(r.label, w_label) + "  " + pad(r.mode, w_mode) + "  " + format_accuracy(r.result) + "\n";
  return out;
}

inline nlohmann::json to_json(const std::vector<AblationRow>& rows) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : rows) {
    nlohmann::json j = to_json(r.result);
    j.erase("per_episode_accuracy");
    j["mode"] = r.mode;
    j["label"] = r.label;
    out.push_back(j);
  }
  return out;
}

}  // namespace grdd
