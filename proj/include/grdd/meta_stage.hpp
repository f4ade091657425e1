#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "grdd/checkpoint.hpp"
#include "grdd/data.hpp"
#include "grdd/encoders.hpp"
#include "grdd/episodes.hpp"
#include "grdd/errors.hpp"
#include "grdd/eval.hpp"
#include "grdd/metrics.hpp"
#include "grdd/nn.hpp"
#include "grdd/optim.hpp"
#include "grdd/rdd.hpp"
#include "grdd/rng.hpp"

namespace grdd {

// full:                  group-wise KL + gamma * L_rt
// no_rdd:                whole-matrix KL + gamma * L_rt
// no_rt:                 group-wise KL only (gamma forced to 0)
// episodic_labels_only:  L_rt only, no teacher
enum class Ablation { full, no_rdd, no_rt, episodic_labels_only };

inline std::string to_string(Ablation a) {
  switch (a) {
    case Ablation::full: return "full";
    case Ablation::no_rdd: return "no_rdd";
    case Ablation::no_rt: return "no_rt";
    case Ablation::episodic_labels_only: return "episodic_labels_only";
  }
  return "?";
}

inline Ablation parse_ablation(const std::string& s) {
  if (s == "full") return Ablation::full;
  if (s == "no_rdd") return Ablation::no_rdd;
  if (s == "no_rt") return Ablation::no_rt;
  if (s == "episodic_labels_only") return Ablation::episodic_labels_only;
  throw ConfigError("unknown ablation '" + s + "' (expected full, no_rdd, no_rt or episodic_labels_only)");
}

enum class StudentInit { from_stage1, random };

inline std::string to_string(StudentInit s) { return s == StudentInit::from_stage1 ? "from_stage1" : "random"; }

inline StudentInit parse_student_init(const std::string& s) {
  if (s == "from_stage1") return StudentInit::from_stage1;
  if (s == "random") return StudentInit::random;
  throw ConfigError("unknown student_init '" + s + "' (expected from_stage1 or random)");
}

struct StageTwoConfig {
  double lr2 = 1e-3;
  int epochs = 15;
  int episodes_per_epoch = 100;
  double gamma = 0.2;
  double temperature = 4.0;
  double lr_decay_factor = 0.1;
  int decay_start_epoch = 10;  // epochs >= this use lr2 * lr_decay_factor
  Ablation ablation = Ablation::full;
  StudentInit student_init = StudentInit::from_stage1;
  std::uint64_t seed = 0;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  nn::Mode student_mode = nn::Mode::train;  // batch-norm mode of the student's forward pass
  EpisodeSpec episode{5, 1, 15};
  EpisodeSpec val_episode{5, 1, 15};
  int val_episodes = 100;

  void validate() const {
    if (!(lr2 >= 0.0)) throw ConfigError("stage-2 lr2 must be >= 0");
    if (epochs < 1) throw ConfigError("stage-2 epochs must be >= 1");
    if (episodes_per_epoch < 1) throw ConfigError("stage-2 episodes_per_epoch must be >= 1");
    if (!(gamma >= 0.0)) throw ConfigError("gamma must be >= 0");
    if (!(temperature > 0.0) || !std::isfinite(temperature)) throw ConfigError("temperature must be finite and > 0");
    if (!(lr_decay_factor >= 0.0)) throw ConfigError("lr_decay_factor must be >= 0");
    if (val_episodes < 0) throw ConfigError("val_episodes must be >= 0");
  }

  double lr_at(int epoch) const { return epoch >= decay_start_epoch ? lr2 * lr_decay_factor : lr2; }

  MetaObjectiveOptions objective() const {
    switch (ablation) {
      case Ablation::full: return {temperature, gamma, DistillTerm::decoupled};
      case Ablation::no_rdd: return {temperature, gamma, DistillTerm::whole_matrix};
      case Ablation::no_rt: return {temperature, 0.0, DistillTerm::decoupled};
      case Ablation::episodic_labels_only: return {temperature, 1.0, DistillTerm::none};
    }
    return {};
  }
};

struct MetaReport {
  int epoch = 0;
  std::size_t episode = 0;
  double l_kl = 0.0;
  double l_rt = 0.0;
  double total = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;
};

struct MetaGradients {
  MetaObjective objective;
  Gradients grads;
  nn::Tape tape;
};

// Stage-2 objective on one episode and its gradient with respect to the
// student's parameters. The teacher is only read, in eval mode.
inline MetaGradients meta_loss_and_gradients(const Encoder& teacher, const Encoder& student, const Episode& episode,
                                             const MetaObjectiveOptions& opt, nn::Mode student_mode) {
  const std::size_t ns = episode.support_images.dim(0);
  const Tensor images = concat_rows(episode.support_images, episode.query_images);
  const std::size_t n = images.dim(0);

  Tensor t_support, t_query;
  if (opt.distill != DistillTerm::none) {
    const Tensor t = teacher.forward(images, nn::Mode::eval);
    t_support = slice_rows(t, 0, ns);
    t_query = slice_rows(t, ns, n);
  }
  MetaGradients out;
  const Tensor s = student.forward(images, student_mode, &out.tape);
  const Tensor s_support = slice_rows(s, 0, ns);
  const Tensor s_query = slice_rows(s, ns, n);
  out.objective = meta_objective(t_support, t_query, s_support, s_query, episode.support_labels, episode.query_labels,
                                 episode.way(), opt);
  out.grads = zero_gradients(student.parameters());
  student.backward(concat_rows(out.objective.student_grad.support, out.objective.student_grad.query), out.tape,
                   out.grads);
  return out;
}

// One SGD step on the student. Throws DivergenceError, leaving the student
// untouched, when the loss or any gradient is non-finite.
inline MetaReport distill_step(const Encoder& teacher, Encoder& student, Sgd& optimizer, const Episode& episode,
                               const StageTwoConfig& config, double lr) {
  MetaGradients mg;
  try {
    mg = meta_loss_and_gradients(teacher, student, episode, config.objective(), config.student_mode);
  } catch (const NumericError& e) {
    throw DivergenceError(std::string("stage-2 loss is not finite: ") + e.what());
  }
  const MetaObjective& o = mg.objective;
  if (!std::isfinite(o.total) || !all_finite(mg.grads) || !nn::stats_finite(mg.tape)) throw DivergenceError("stage-2 loss is not finite");
  optimizer.step(student.parameters(), mg.grads, lr);
  if (config.student_mode == nn::Mode::train) student.commit_batch_stats(mg.tape);
  MetaReport r;
  r.l_kl = o.l_kl;
  r.l_rt = o.l_rt;
  r.total = o.total;
  r.lr = lr;
  r.grad_norm = std::sqrt(squared_norm(mg.grads));
  return r;
}

inline CheckpointHeader student_checkpoint_header(const Encoder& student, const StageTwoConfig& config) {
  const EncoderSpec& s = student.spec();
  CheckpointHeader h{s.architecture, s.input, s.seed, 2, s.pooling, nlohmann::json::object()};
  h.tags["ablation"] = to_string(config.ablation);
  h.tags["gamma"] = config.gamma;
  h.tags["temperature"] = config.temperature;
  return h;
}

inline void save_student(const std::filesystem::path& path, const Encoder& student, const StageTwoConfig& config) {
  save_checkpoint(path, student_checkpoint_header(student, config), {&student.parameters()});
}

struct StageTwoOptions {
  MetricsSink* metrics = nullptr;
  std::optional<std::filesystem::path> checkpoint;  // best-on-validation student
};

struct StageTwoResult {
  std::vector<MetaReport> history;            // one entry per episode
  std::vector<std::optional<double>> val_acc;  // per epoch; empty when validation is off
  int best_epoch = -1;
  std::optional<double> best_val_acc;
};

// Episodic distillation on the train split. After each epoch the student is
// scored on validation episodes; the best-scoring parameters (the last ones
// when validation is off or unavailable) are left in `student` and written
// to the checkpoint. On divergence the best parameters so far are
// checkpointed and DivergenceError propagates.
inline StageTwoResult train_meta(const Encoder& teacher, Encoder& student, const Dataset& dataset,
                                 const StageTwoConfig& config, const StageTwoOptions& options = {}) {
  config.validate();
  if (dataset.indices_in(Split::train).empty()) throw DataError("the train split is empty");
  if (config.ablation != Ablation::episodic_labels_only && !(teacher.spec().input == student.spec().input)) {
    throw ShapeError("teacher and student expect different input shapes");
  }
  const bool validate = config.val_episodes > 0 &&
                        dataset.categories_in(Split::val).size() >= static_cast<std::size_t>(config.val_episode.way);

  Sgd optimizer(student.parameters(), {config.momentum, config.weight_decay});
  const Rng episode_root(derive_seed(config.seed, "stage2.episodes"));
  const std::uint64_t val_seed = derive_seed(config.seed, "stage2.validation");
  StageTwoResult result;
  ParameterSet best = student.parameters();
  std::size_t global_episode = 0;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = config.lr_at(epoch);
    const EpisodeStream stream(dataset, Split::train, config.episode,
                               static_cast<std::size_t>(config.episodes_per_epoch),
                               episode_root.substream(static_cast<std::uint64_t>(epoch)).next());
    for (std::size_t i = 0; i < stream.size(); ++i, ++global_episode) {
      MetaReport rep;
      try {
        rep = distill_step(teacher, student, optimizer, stream[i], config, lr);
      } catch (const DivergenceError&) {
        if (options.checkpoint) {
          Encoder keep = student;
          keep.parameters() = best;
          save_student(*options.checkpoint, keep, config);
        }
        throw DivergenceError("stage-2 loss diverged at epoch " + std::to_string(epoch) + ", episode " +
                              std::to_string(i));
      }
      rep.epoch = epoch;
      rep.episode = global_episode;
      result.history.push_back(rep);
      if (options.metrics) {
        options.metrics->record({{"stage", 2}, {"epoch", epoch}, {"episode", global_episode}, {"l_kl", rep.l_kl},
                                 {"l_rt", rep.l_rt}, {"total", rep.total}, {"lr", lr},
                                 {"ablation", to_string(config.ablation)}});
      }
    }

    std::optional<double> val;
    if (validate) {
      const EvalSpec spec{Split::val, config.val_episode, static_cast<std::size_t>(config.val_episodes), val_seed};
      val = evaluate(student, dataset, spec).mean_accuracy;
    }
    result.val_acc.push_back(val);
    if (!validate || !result.best_val_acc || *val > *result.best_val_acc) {
      best = student.parameters();
      result.best_epoch = epoch;
      result.best_val_acc = val;
    }
    if (options.metrics) {
      nlohmann::json rec{{"stage", 2}, {"epoch", epoch}, {"event", "epoch_end"}, {"lr", lr},
                         {"ablation", to_string(config.ablation)}};
      rec["val_acc"] = val ? nlohmann::json(*val) : nlohmann::json(nullptr);
      options.metrics->record(rec);
    }
  }
  student.parameters() = best;
  if (options.checkpoint) save_student(*options.checkpoint, student, config);
  return result;
}

}  // namespace grdd
