#pragma once

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "grdd/data.hpp"
#include "grdd/errors.hpp"
#include "grdd/nn.hpp"
#include "grdd/rng.hpp"
#include "grdd/tensor.hpp"

namespace grdd {

enum class Architecture { convnet4, resnet12, tiny };

inline const char* to_string(Architecture a) {
  switch (a) {
    case Architecture::convnet4: return "convnet4";
    case Architecture::resnet12: return "resnet12";
    case Architecture::tiny: return "tiny";
  }
  return "?";
}

inline Architecture parse_architecture(const std::string& s) {
  if (s == "convnet4") return Architecture::convnet4;
  if (s == "resnet12") return Architecture::resnet12;
  if (s == "tiny") return Architecture::tiny;
  throw ConfigError("unknown architecture '" + s + "' (expected convnet4, resnet12 or tiny)");
}

// How the final feature map becomes the embedding vector.
enum class Pooling { global_average, flatten };

inline const char* to_string(Pooling p) { return p == Pooling::global_average ? "global_average" : "flatten"; }

inline Pooling parse_pooling(const std::string& s) {
  if (s == "global_average") return Pooling::global_average;
  if (s == "flatten") return Pooling::flatten;
  throw ConfigError("unknown pooling '" + s + "' (expected global_average or flatten)");
}

// Channel widths of each block/stage. The number of entries is also the
// number of 2x2 pooling steps.
inline std::vector<std::size_t> architecture_widths(Architecture a) {
  switch (a) {
    case Architecture::convnet4: return {64, 64, 64, 64};
    case Architecture::resnet12: return {64, 160, 320, 640};
    case Architecture::tiny: return {16, 32};
  }
  return {};
}

// Embedding width for the given input, or ShapeError if any pooling step
// would see a spatial extent below 2.
inline std::size_t embedding_dim(Architecture a, InputShape input, Pooling pooling) {
  const auto widths = architecture_widths(a);
  std::size_t h = input.height, w = input.width;
  for (std::size_t i = 0; i < widths.size(); ++i) {
    if (h < 2 || w < 2) {
      throw ShapeError(std::string("input ") + to_string(input) + " is too small for the " +
                       std::to_string(widths.size()) + "-step pooling pyramid of " + to_string(a));
    }
    h /= 2;
    w /= 2;
  }
  return pooling == Pooling::global_average ? widths.back() : h * w * widths.back();
}

struct EncoderSpec {
  Architecture architecture = Architecture::tiny;
  InputShape input;
  std::uint64_t seed = 0;
  Pooling pooling = Pooling::global_average;

  friend bool operator==(const EncoderSpec&, const EncoderSpec&) = default;
};

// Convolutional feature extractor mapping [B, H, W, C] images to [B, d]
// embeddings. Parameters are owned by value, so copying an encoder copies
// its weights. Forward and backward are const; training-mode batch
// statistics only reach the running estimates through commit_batch_stats.
class Encoder {
 public:
  Encoder() = default;

  static Encoder build(const EncoderSpec& spec) {
    Encoder e;
    e.spec_ = spec;
    e.embed_dim_ = embedding_dim(spec.architecture, spec.input, spec.pooling);
    if (spec.input.channels == 0) throw ShapeError("input must have at least one channel");
    Rng rng(spec.seed);
    const auto widths = architecture_widths(spec.architecture);
    std::size_t in = spec.input.channels;
    for (std::size_t i = 0; i < widths.size(); ++i) {
      if (spec.architecture == Architecture::resnet12) {
        const std::string prefix = "encoder.stage" + std::to_string(i);
        e.nodes_.emplace_back(nn::ResidualStage::create(e.params_, prefix, in, widths[i], 0.1, rng));
      } else {
        const std::string prefix = "encoder.block" + std::to_string(i);
        e.nodes_.emplace_back(nn::Conv2d::create(e.params_, prefix + ".conv", in, widths[i], 3, rng));
        e.nodes_.emplace_back(nn::BatchNorm2d::create(e.params_, prefix + ".bn", widths[i]));
        e.nodes_.emplace_back(nn::Activation{0.0});
        e.nodes_.emplace_back(nn::MaxPool2d{});
      }
      in = widths[i];
    }
    if (spec.pooling == Pooling::global_average) {
      e.nodes_.emplace_back(nn::GlobalAvgPool{});
    } else {
      e.nodes_.emplace_back(nn::Flatten{});
    }
    return e;
  }

  const EncoderSpec& spec() const { return spec_; }
  std::size_t embed_dim() const { return embed_dim_; }
  ParameterSet& parameters() { return params_; }
  const ParameterSet& parameters() const { return params_; }

  // Embeddings for a [B, H, W, C] batch. With a tape, records what the
  // backward pass needs.
  Tensor forward(const Tensor& images, nn::Mode mode, nn::Tape* tape = nullptr) const {
    const InputShape s = spec_.input;
    if (images.rank() != 4 || images.dim(1) != s.height || images.dim(2) != s.width || images.dim(3) != s.channels) {
      throw ShapeError("encoder built for " + to_string(s) + " images received " + Tensor::shape_string(images.shape()));
    }
    if (tape) tape->nodes.assign(nodes_.size(), nn::Cache{});
    Tensor x = images;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      nn::Cache* c = tape ? &tape->nodes[i] : nullptr;
      x = std::visit([&](const auto& node) { return node.forward(params_, x, mode, c); }, nodes_[i]);
    }
    return x;
  }

  // Accumulates parameter gradients for dL/d(embeddings) = `grad` into
  // `grads` and returns dL/d(images).
  Tensor backward(const Tensor& grad, const nn::Tape& tape, Gradients& grads) const {
    if (tape.nodes.size() != nodes_.size()) throw Error("tape does not belong to this encoder");
    Tensor d = grad;
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      d = std::visit([&](const auto& node) { return node.backward(params_, d, tape.nodes[i], grads); }, nodes_[i]);
    }
    return d;
  }

  // Folds the batch statistics of a training-mode pass into the running
  // batch-norm estimates.
  void commit_batch_stats(const nn::Tape& tape, double momentum = 0.1) {
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (const auto* bn = std::get_if<nn::BatchNorm2d>(&nodes_[i])) {
        bn->commit(params_, tape.nodes[i], momentum);
      } else if (const auto* st = std::get_if<nn::ResidualStage>(&nodes_[i])) {
        st->commit(params_, tape.nodes[i], momentum);
      }
    }
  }

 private:
  EncoderSpec spec_;
  std::size_t embed_dim_ = 0;
  std::vector<nn::Node> nodes_;
  ParameterSet params_;
};

inline Encoder build_encoder(Architecture architecture, InputShape input, std::uint64_t seed,
                             Pooling pooling = Pooling::global_average) {
  return Encoder::build({architecture, input, seed, pooling});
}

// Fully connected layer: logits = features * weight^T + bias with weight
// [out, in]. Used for the category head and the rotation head.
class Head {
 public:
  Head() = default;

  static Head build(const std::string& name, std::size_t in_dim, std::size_t out_dim, std::uint64_t seed) {
    if (in_dim == 0 || out_dim == 0) throw ShapeError("head '" + name + "' needs nonzero dimensions");
    Head h;
    h.name_ = name;
    h.in_ = in_dim;
    h.out_ = out_dim;
    Rng rng(seed);
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_dim));
    Tensor w({out_dim, in_dim});
    for (double& v : w.values()) v = rng.uniform(-bound, bound);
    h.params_.add(name + ".fc.weight", std::move(w));
    h.params_.add(name + ".fc.bias", Tensor({out_dim}));
    return h;
  }

  const std::string& name() const { return name_; }
  std::size_t in_dim() const { return in_; }
  std::size_t out_dim() const { return out_; }
  ParameterSet& parameters() { return params_; }
  const ParameterSet& parameters() const { return params_; }
  const Tensor& weight() const { return params_.value(0); }
  const Tensor& bias() const { return params_.value(1); }

  Tensor forward(const Tensor& features) const {
    if (features.rank() != 2 || features.dim(1) != in_) {
      throw ShapeError("head '" + name_ + "' expects [B," + std::to_string(in_) + "] features, got " +
                       Tensor::shape_string(features.shape()));
    }
    const std::size_t b = features.dim(0);
    const Tensor& w = weight();
    Tensor out({b, out_});
    for (std::size_t r = 0; r < b; ++r) {
      for (std::size_t o = 0; o < out_; ++o) {
        double acc = bias()[o];
        for (std::size_t i = 0; i < in_; ++i) acc += features.at(r, i) * w.at(o, i);
        out.at(r, o) = acc;
      }
    }
    return out;
  }

  // Accumulates into `grads` (aligned with parameters()) and returns
  // dL/d(features).
  Tensor backward(const Tensor& features, const Tensor& grad_out, Gradients& grads) const {
    const std::size_t b = features.dim(0);
    const Tensor& w = weight();
    Tensor dx({b, in_});
    for (std::size_t r = 0; r < b; ++r) {
      for (std::size_t o = 0; o < out_; ++o) {
        const double g = grad_out.at(r, o);
        grads[1][o] += g;
        for (std::size_t i = 0; i < in_; ++i) {
          grads[0].at(o, i) += g * features.at(r, i);
          dx.at(r, i) += g * w.at(o, i);
        }
      }
    }
    return dx;
  }

 private:
  std::string name_;
  std::size_t in_ = 0;
  std::size_t out_ = 0;
  ParameterSet params_;
};

}  // namespace grdd
