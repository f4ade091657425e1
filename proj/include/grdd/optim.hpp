#pragma once

#include <cmath>
#include <cstddef>

#include "grdd/errors.hpp"
#include "grdd/nn.hpp"

namespace grdd {

// lr_init * (1 - iter / total)^power, for iter in [0, total).
inline double poly_lr(double lr_init, std::size_t iter, std::size_t total, double power) {
  if (total == 0) return lr_init;
  const double frac = 1.0 - static_cast<double>(iter) / static_cast<double>(total);
  return lr_init * std::pow(frac > 0.0 ? frac : 0.0, power);
}

struct SgdOptions {
  double momentum = 0.9;
  double weight_decay = 5e-4;
};

// SGD with heavy-ball momentum and L2 weight decay:
//   g <- grad + weight_decay * theta;  v <- momentum * v + g;  theta <- theta - lr * v
// Non-trainable entries (running statistics) are never touched.
class Sgd {
 public:
  Sgd() = default;
  Sgd(const ParameterSet& params, SgdOptions options) : options_(options), velocity_(zero_gradients(params)) {}

  void step(ParameterSet& params, const Gradients& grads, double lr) {
    if (grads.size() != params.size() || velocity_.size() != params.size()) {
      throw Error("optimizer state does not match the parameter set");
    }
    for (std::size_t p = 0; p < params.size(); ++p) {
      if (!params[p].trainable) continue;
      Tensor& theta = params[p].value;
      Tensor& v = velocity_[p];
      const Tensor& g = grads[p];
      for (std::size_t i = 0; i < theta.size(); ++i) {
        const double gi = g[i] + options_.weight_decay * theta[i];
        v[i] = options_.momentum * v[i] + gi;
        theta[i] -= lr * v[i];
      }
    }
  }

  const SgdOptions& options() const { return options_; }

 private:
  SgdOptions options_;
  Gradients velocity_;
};

}  // namespace grdd
