#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "grdd/checkpoint.hpp"
#include "grdd/data.hpp"
#include "grdd/encoders.hpp"
#include "grdd/errors.hpp"
#include "grdd/metrics.hpp"
#include "grdd/nn.hpp"
#include "grdd/optim.hpp"
#include "grdd/rng.hpp"

namespace grdd {

struct StageOneConfig {
  int batch_size = 64;
  int epochs = 90;
  double lr_init = 5e-2;
  double poly_power = 0.9;
  double weight_decay = 5e-4;
  double momentum = 0.9;
  std::uint64_t seed = 0;

  void validate() const {
    if (batch_size < 1) throw ConfigError("stage-1 batch size must be >= 1");
    if (epochs < 1) throw ConfigError("stage-1 epochs must be >= 1");
    if (!(lr_init >= 0.0)) throw ConfigError("stage-1 lr_init must be >= 0");
    if (!(poly_power >= 0.0)) throw ConfigError("stage-1 poly power must be >= 0");
  }
};

struct LossReport {
  int epoch = 0;
  std::size_t iteration = 0;
  double l_c = 0.0;
  double l_r = 0.0;
  double total = 0.0;
  double lr = 0.0;
  double train_acc = 0.0;  // category accuracy over the rotated batch
};

struct CrossEntropy {
  double loss = 0.0;
  Tensor grad;  // d(loss)/d(logits)
  std::size_t correct = 0;
};

// Mean negative log-likelihood of softmax(logits) at the labels.
inline CrossEntropy softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw ShapeError("logits " + Tensor::shape_string(logits.shape()) + " do not match " +
                     std::to_string(labels.size()) + " labels");
  }
  if (!logits.all_finite()) throw NumericError("non-finite logits");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  CrossEntropy out{0.0, Tensor(logits.shape()), 0};
  for (std::size_t i = 0; i < n; ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= c) {
      throw ShapeError("label " + std::to_string(y) + " outside [0, " + std::to_string(c) + ")");
    }
    auto row = logits.row(i);
    std::size_t arg = 0;
    double mx = row[0];
    for (std::size_t j = 1; j < c; ++j) {
      if (row[j] > mx) {
        mx = row[j];
        arg = j;
      }
    }
    double sum = 0.0;
    for (double v : row) sum += std::exp(v - mx);
    const double lse = mx + std::log(sum);
    out.loss += lse - row[static_cast<std::size_t>(y)];
    for (std::size_t j = 0; j < c; ++j) {
      out.grad.at(i, j) = (std::exp(row[j] - lse) - (j == static_cast<std::size_t>(y) ? 1.0 : 0.0)) / static_cast<double>(n);
    }
    out.correct += arg == static_cast<std::size_t>(y) ? 1 : 0;
  }
  out.loss /= static_cast<double>(n);
  return out;
}

inline double category_loss(const Tensor& logits, std::span<const int> labels) {
  return softmax_cross_entropy(logits, labels).loss;
}

inline double rotation_loss(const Tensor& rotation_logits, std::span<const int> rotation_labels) {
  if (rotation_logits.rank() != 2 || rotation_logits.dim(1) != 4) throw ShapeError("rotation logits must be [B, 4]");
  return softmax_cross_entropy(rotation_logits, rotation_labels).loss;
}

// Encoder plus category head (embedding -> C_base logits) and rotation head
// (category logits -> 4 rotation logits).
struct GlobalLearner {
  Encoder encoder;
  Head category_head;
  Head rotation_head;
  std::vector<int> head_classes;  // category-head index -> global category id

  static GlobalLearner build(const EncoderSpec& spec, std::vector<int> train_categories) {
    if (train_categories.empty()) throw DataError("the global learner needs at least one training category");
    GlobalLearner g;
    g.encoder = Encoder::build(spec);
    g.category_head = Head::build("category_head", g.encoder.embed_dim(), train_categories.size(),
                                  derive_seed(spec.seed, "category_head"));
    g.rotation_head = Head::build("rotation_head", train_categories.size(), 4, derive_seed(spec.seed, "rotation_head"));
    g.head_classes = std::move(train_categories);
    return g;
  }

  std::vector<int> head_labels(std::span<const int> global_labels) const {
    std::map<int, int> index;
    for (std::size_t i = 0; i < head_classes.size(); ++i) index[head_classes[i]] = static_cast<int>(i);
    std::vector<int> out;
    out.reserve(global_labels.size());
    for (int y : global_labels) {
      const auto it = index.find(y);
      if (it == index.end()) throw DataError("category " + std::to_string(y) + " is not a training category");
      out.push_back(it->second);
    }
    return out;
  }

  std::uint64_t hash() const {
    return encoder.parameters().hash() ^ splitmix64(category_head.parameters().hash()) ^
           splitmix64(splitmix64(rotation_head.parameters().hash()));
  }
};

struct GlobalGradients {
  double l_c = 0.0;
  double l_r = 0.0;
  std::size_t correct = 0;
  Gradients encoder;
  Gradients category;
  Gradients rotation;
  nn::Tape tape;
};

// Joint category + rotation loss on an already-augmented batch (labels are
// category-head indices) and its gradients with respect to all three
// parameter sets.
inline GlobalGradients global_loss_and_gradients(const GlobalLearner& g, const Tensor& images,
                                                 std::span<const int> head_labels, std::span<const int> rotation_labels) {
  GlobalGradients out;
  const Tensor h = g.encoder.forward(images, nn::Mode::train, &out.tape);
  const Tensor p = g.category_head.forward(h);
  const Tensor r = g.rotation_head.forward(p);
  const CrossEntropy lc = softmax_cross_entropy(p, head_labels);
  const CrossEntropy lr = softmax_cross_entropy(r, rotation_labels);
  out.l_c = lc.loss;
  out.l_r = lr.loss;
  out.correct = lc.correct;

  out.encoder = zero_gradients(g.encoder.parameters());
  out.category = zero_gradients(g.category_head.parameters());
  out.rotation = zero_gradients(g.rotation_head.parameters());
  Tensor dp = g.rotation_head.backward(p, lr.grad, out.rotation);
  for (std::size_t i = 0; i < dp.size(); ++i) dp[i] += lc.grad[i];
  const Tensor dh = g.category_head.backward(h, dp, out.category);
  g.encoder.backward(dh, out.tape, out.encoder);
  return out;
}

inline CheckpointHeader global_checkpoint_header(const GlobalLearner& g) {
  const EncoderSpec& s = g.encoder.spec();
  CheckpointHeader h{s.architecture, s.input, s.seed, 1, s.pooling, nlohmann::json::object()};
  h.tags["head_classes"] = g.head_classes;
  return h;
}

inline void save_global_learner(const std::filesystem::path& path, const GlobalLearner& g) {
  save_checkpoint(path, global_checkpoint_header(g),
                  {&g.encoder.parameters(), &g.category_head.parameters(), &g.rotation_head.parameters()});
}

inline GlobalLearner global_learner_from_checkpoint(const Checkpoint& ck) {
  if (!ck.header.tags.contains("head_classes")) throw CheckpointError("checkpoint has no category head");
  GlobalLearner g = GlobalLearner::build({ck.header.architecture, ck.header.input, ck.header.seed, ck.header.pooling},
                                         ck.header.tags.at("head_classes").get<std::vector<int>>());
  restore_parameters(ck, g.encoder.parameters(), "encoder");
  restore_parameters(ck, g.category_head.parameters(), "category head");
  restore_parameters(ck, g.rotation_head.parameters(), "rotation head");
  return g;
}

struct StageOneOptions {
  MetricsSink* metrics = nullptr;
  std::optional<std::filesystem::path> checkpoint;  // written at the end, or on divergence
};

struct StageOneResult {
  std::vector<LossReport> history;      // one entry per iteration
  std::vector<double> epoch_accuracy;   // training category accuracy per epoch
};

// Mini-batch SGD over the train split with rotation augmentation and a
// per-iteration poly learning-rate schedule. On a non-finite loss or
// gradient, `learner` keeps its last finite parameters, the checkpoint (if
// requested) is written from them, and DivergenceError is thrown.
inline StageOneResult train_global(const Dataset& dataset, GlobalLearner& learner, const StageOneConfig& config,
                                   const StageOneOptions& options = {}) {
  config.validate();
  std::vector<std::size_t> pool = dataset.indices_in(Split::train);
  if (pool.empty()) throw DataError("the train split is empty");
  if (!(dataset.shape() == learner.encoder.spec().input)) {
    throw ShapeError("dataset images are " + to_string(dataset.shape()) + " but the encoder expects " +
                     to_string(learner.encoder.spec().input));
  }
  const auto batch = static_cast<std::size_t>(config.batch_size);
  const std::size_t per_epoch = (pool.size() + batch - 1) / batch;
  const std::size_t total_iters = per_epoch * static_cast<std::size_t>(config.epochs);

  const SgdOptions sgd{config.momentum, config.weight_decay};
  Sgd opt_encoder(learner.encoder.parameters(), sgd);
  Sgd opt_category(learner.category_head.parameters(), sgd);
  Sgd opt_rotation(learner.rotation_head.parameters(), sgd);
  const Rng shuffle_root(config.seed);

  StageOneResult result;
  std::size_t iter = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    Rng rng = shuffle_root.substream(static_cast<std::uint64_t>(epoch));
    std::vector<std::size_t> order = pool;
    rng.shuffle(order);
    std::size_t correct = 0, seen = 0;
    for (std::size_t b = 0; b < per_epoch; ++b, ++iter) {
      const std::size_t begin = b * batch;
      const std::size_t end = std::min(begin + batch, order.size());
      const std::span<const std::size_t> ids(order.data() + begin, end - begin);
      std::vector<int> labels;
      for (std::size_t id : ids) labels.push_back(dataset.labels()[id]);
      const RotationBatch rb = augment_rotations(dataset.gather(ids), labels);
      const std::vector<int> head = learner.head_labels(rb.category_labels);

      GlobalGradients gg;
      bool finite = true;
      try {
        gg = global_loss_and_gradients(learner, rb.images, head, rb.rotation_labels);
        finite = std::isfinite(gg.l_c) && std::isfinite(gg.l_r) && all_finite(gg.encoder) &&
                 all_finite(gg.category) && all_finite(gg.rotation) && nn::stats_finite(gg.tape);
      } catch (const NumericError&) {
        finite = false;
      }
      const double lr = poly_lr(config.lr_init, iter, total_iters, config.poly_power);
      if (!finite) {
        if (options.checkpoint) save_global_learner(*options.checkpoint, learner);
        throw DivergenceError("stage-1 loss diverged at iteration " + std::to_string(iter));
      }
      opt_encoder.step(learner.encoder.parameters(), gg.encoder, lr);
      opt_category.step(learner.category_head.parameters(), gg.category, lr);
      opt_rotation.step(learner.rotation_head.parameters(), gg.rotation, lr);
      learner.encoder.commit_batch_stats(gg.tape);

      LossReport rep{epoch, iter, gg.l_c, gg.l_r, gg.l_c + gg.l_r, lr,
                     static_cast<double>(gg.correct) / static_cast<double>(head.size())};
      correct += gg.correct;
      seen += head.size();
      result.history.push_back(rep);
      if (options.metrics) {
        options.metrics->record({{"stage", 1}, {"epoch", epoch}, {"iter", iter}, {"l_c", rep.l_c}, {"l_r", rep.l_r},
                                 {"lr", lr}, {"train_acc", rep.train_acc}});
      }
    }
    const double acc = static_cast<double>(correct) / static_cast<double>(seen);
    result.epoch_accuracy.push_back(acc);
    if (options.metrics) {
      options.metrics->record({{"stage", 1}, {"epoch", epoch}, {"event", "epoch_end"}, {"train_acc", acc}});
    }
  }
  if (options.checkpoint) save_global_learner(*options.checkpoint, learner);
  return result;
}

}  // namespace grdd
