#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "grdd/errors.hpp"
#include "grdd/rng.hpp"
#include "grdd/tensor.hpp"

namespace grdd {

struct Parameter {
  std::string name;
  Tensor value;
  bool trainable = true;  // false for batch-norm running statistics
};

// Ordered collection of named arrays. Order is creation order and is the
// order used by optimizers, gradients, hashing and checkpoints.
class ParameterSet {
 public:
  std::size_t add(std::string name, Tensor value, bool trainable = true) {
    if (find(name)) throw Error("duplicate parameter name '" + name + "'");
    items_.push_back({std::move(name), std::move(value), trainable});
    return items_.size() - 1;
  }

  std::size_t size() const { return items_.size(); }
  Parameter& operator[](std::size_t i) { return items_[i]; }
  const Parameter& operator[](std::size_t i) const { return items_[i]; }
  auto begin() { return items_.begin(); }
  auto end() { return items_.end(); }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }

  std::optional<std::size_t> find(const std::string& name) const {
    for (std::size_t i = 0; i < items_.size(); ++i) {
      if (items_[i].name == name) return i;
    }
    return std::nullopt;
  }

  const Tensor& value(std::size_t i) const { return items_[i].value; }

  // Number of trainable scalars.
  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : items_) n += p.trainable ? p.value.size() : 0;
    return n;
  }

  // FNV-1a over names, shapes and the raw bytes of every value.
  std::uint64_t hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](const void* data, std::size_t n) {
      const auto* bytes = static_cast<const unsigned char*>(data);
      for (std::size_t i = 0; i < n; ++i) {
        h ^= bytes[i];
        h *= 0x100000001b3ULL;
      }
    };
    for (const auto& p : items_) {
      mix(p.name.data(), p.name.size());
      for (std::size_t d : p.value.shape()) mix(&d, sizeof d);
      mix(p.value.data(), p.value.size() * sizeof(double));
    }
    return h;
  }

  friend bool operator==(const ParameterSet& a, const ParameterSet& b) {
    if (a.items_.size() != b.items_.size()) return false;
    for (std::size_t i = 0; i < a.items_.size(); ++i) {
      if (a.items_[i].name != b.items_[i].name || !(a.items_[i].value == b.items_[i].value)) return false;
    }
    return true;
  }

 private:
  std::vector<Parameter> items_;
};

// One gradient tensor per parameter (zero for non-trainable entries).
using Gradients = std::vector<Tensor>;

inline Gradients zero_gradients(const ParameterSet& params) {
  Gradients g;
  g.reserve(params.size());
  for (const auto& p : params) g.emplace_back(p.value.shape());
  return g;
}

inline double squared_norm(const Gradients& g) {
  double s = 0.0;
  for (const auto& t : g) {
    for (double v : t.values()) s += v * v;
  }
  return s;
}

inline bool all_finite(const Gradients& g) {
  return std::all_of(g.begin(), g.end(), [](const Tensor& t) { return t.all_finite(); });
}

namespace nn {

enum class Mode { train, eval };

// Intermediate values recorded by a forward pass for the backward pass.
struct Cache {
  Tensor input;
  Tensor saved;
  std::vector<std::size_t> input_shape;
  std::vector<double> stats;
  std::vector<std::size_t> index;
  std::vector<Cache> children;
};

inline void require_nhwc(const Tensor& x, std::size_t channels, const char* layer) {
  if (x.rank() != 4 || x.dim(3) != channels) {
    throw ShapeError(std::string(layer) + " expects [N,H,W," + std::to_string(channels) + "] input, got " +
                     Tensor::shape_string(x.shape()));
  }
}

// Stride-1 convolution with "same" zero padding. Weight layout is
// [kernel, kernel, in_channels, out_channels].
struct Conv2d {
  std::size_t weight = 0;
  std::size_t bias = 0;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 3;

  static Conv2d create(ParameterSet& params, const std::string& prefix, std::size_t in, std::size_t out,
                       std::size_t kernel, Rng& rng) {
    Conv2d c;
    c.in_channels = in;
    c.out_channels = out;
    c.kernel = kernel;
    const double bound = std::sqrt(6.0 / static_cast<double>(kernel * kernel * in));
    Tensor w({kernel, kernel, in, out});
    for (double& v : w.values()) v = rng.uniform(-bound, bound);
    c.weight = params.add(prefix + ".weight", std::move(w));
    c.bias = params.add(prefix + ".bias", Tensor({out}));
    return c;
  }

  Tensor forward(const ParameterSet& params, const Tensor& x, Mode, Cache* cache) const {
    require_nhwc(x, in_channels, "conv");
    const std::size_t n = x.dim(0), h = x.dim(1), w = x.dim(2);
    const std::size_t ci = in_channels, co = out_channels;
    const auto pad = static_cast<std::ptrdiff_t>(kernel / 2);
    const double* wt = params.value(weight).data();
    const double* b = params.value(bias).data();
    Tensor y({n, h, w, co});
    for (std::size_t s = 0; s < n; ++s) {
      for (std::size_t r = 0; r < h; ++r) {
        for (std::size_t c = 0; c < w; ++c) {
          double* out = y.data() + ((s * h + r) * w + c) * co;
          std::copy_n(b, co, out);
          for (std::size_t ky = 0; ky < kernel; ++ky) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(r + ky) - pad;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
            for (std::size_t kx = 0; kx < kernel; ++kx) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(c + kx) - pad;
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
              const double* in = x.data() + ((s * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)) * ci;
              const double* wk = wt + (ky * kernel + kx) * ci * co;
              for (std::size_t i = 0; i < ci; ++i) {
                const double a = in[i];
                if (a == 0.0) continue;
                const double* wr = wk + i * co;
                for (std::size_t o = 0; o < co; ++o) out[o] += a * wr[o];
              }
            }
          }
        }
      }
    }
    if (cache) cache->input = x;
    return y;
  }

  Tensor backward(const ParameterSet& params, const Tensor& dy, const Cache& cache, Gradients& grads) const {
    const Tensor& x = cache.input;
    const std::size_t n = x.dim(0), h = x.dim(1), w = x.dim(2);
    const std::size_t ci = in_channels, co = out_channels;
    const auto pad = static_cast<std::ptrdiff_t>(kernel / 2);
    const double* wt = params.value(weight).data();
    double* dw = grads[weight].data();
    double* db = grads[bias].data();
    Tensor dx(x.shape());
    for (std::size_t s = 0; s < n; ++s) {
      for (std::size_t r = 0; r < h; ++r) {
        for (std::size_t c = 0; c < w; ++c) {
          const double* d = dy.data() + ((s * h + r) * w + c) * co;
          for (std::size_t o = 0; o < co; ++o) db[o] += d[o];
          for (std::size_t ky = 0; ky < kernel; ++ky) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(r + ky) - pad;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
            for (std::size_t kx = 0; kx < kernel; ++kx) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(c + kx) - pad;
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
              const std::size_t off = ((s * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)) * ci;
              const double* in = x.data() + off;
              double* din = dx.data() + off;
              const double* wk = wt + (ky * kernel + kx) * ci * co;
              double* dwk = dw + (ky * kernel + kx) * ci * co;
              for (std::size_t i = 0; i < ci; ++i) {
                const double a = in[i];
                const double* wr = wk + i * co;
                double* dwr = dwk + i * co;
                double acc = 0.0;
                for (std::size_t o = 0; o < co; ++o) {
                  acc += d[o] * wr[o];
                  dwr[o] += a * d[o];
                }
                din[i] += acc;
              }
            }
          }
        }
      }
    }
    return dx;
  }
};

// Per-channel batch normalization over (N, H, W). Training mode normalizes
// with batch statistics; evaluation mode with the running estimates.
struct BatchNorm2d {
  std::size_t gamma = 0;
  std::size_t beta = 0;
  std::size_t running_mean = 0;
  std::size_t running_var = 0;
  std::size_t channels = 0;
  double eps = 1e-5;

  static BatchNorm2d create(ParameterSet& params, const std::string& prefix, std::size_t channels) {
    BatchNorm2d bn;
    bn.channels = channels;
    bn.gamma = params.add(prefix + ".gamma", Tensor({channels}, 1.0));
    bn.beta = params.add(prefix + ".beta", Tensor({channels}));
    bn.running_mean = params.add(prefix + ".running_mean", Tensor({channels}), false);
    bn.running_var = params.add(prefix + ".running_var", Tensor({channels}, 1.0), false);
    return bn;
  }

  // cache->stats layout: [inv_std (C) | batch mean (C) | unbiased batch var (C) | mode]
  Tensor forward(const ParameterSet& params, const Tensor& x, Mode mode, Cache* cache) const {
    require_nhwc(x, channels, "batch-norm");
    const std::size_t m = x.size() / channels;
    std::vector<double> mean(channels, 0.0), var(channels, 0.0), unbiased(channels, 0.0);
    if (mode == Mode::train) {
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t c = 0; c < channels; ++c) mean[c] += x[i * channels + c];
      }
      for (double& v : mean) v /= static_cast<double>(m);
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t c = 0; c < channels; ++c) {
          const double d = x[i * channels + c] - mean[c];
          var[c] += d * d;
        }
      }
      for (std::size_t c = 0; c < channels; ++c) {
        unbiased[c] = m > 1 ? var[c] / static_cast<double>(m - 1) : 0.0;
        var[c] /= static_cast<double>(m);
      }
    } else {
      const Tensor& rm = params.value(running_mean);
      const Tensor& rv = params.value(running_var);
      for (std::size_t c = 0; c < channels; ++c) {
        mean[c] = rm[c];
        var[c] = rv[c];
      }
    }
    std::vector<double> inv(channels);
    for (std::size_t c = 0; c < channels; ++c) inv[c] = 1.0 / std::sqrt(var[c] + eps);
    const Tensor& g = params.value(gamma);
    const Tensor& b = params.value(beta);
    Tensor y(x.shape());
    Tensor xhat(cache ? x.shape() : std::vector<std::size_t>{0});
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t c = 0; c < channels; ++c) {
        const double xh = (x[i * channels + c] - mean[c]) * inv[c];
        if (cache) xhat[i * channels + c] = xh;
        y[i * channels + c] = g[c] * xh + b[c];
      }
    }
    if (cache) {
      cache->saved = std::move(xhat);
      cache->stats = inv;
      cache->stats.insert(cache->stats.end(), mean.begin(), mean.end());
      cache->stats.insert(cache->stats.end(), unbiased.begin(), unbiased.end());
      cache->stats.push_back(mode == Mode::train ? 1.0 : 0.0);
    }
    return y;
  }

  Tensor backward(const ParameterSet& params, const Tensor& dy, const Cache& cache, Gradients& grads) const {
    const Tensor& xhat = cache.saved;
    const std::size_t m = xhat.size() / channels;
    const bool train = cache.stats.back() != 0.0;
    const Tensor& g = params.value(gamma);
    std::vector<double> sum_d(channels, 0.0), sum_dx(channels, 0.0);
    double* dg = grads[gamma].data();
    double* dbeta = grads[beta].data();
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t c = 0; c < channels; ++c) {
        const double d = dy[i * channels + c];
        dg[c] += d * xhat[i * channels + c];
        dbeta[c] += d;
        sum_d[c] += d * g[c];
        sum_dx[c] += d * g[c] * xhat[i * channels + c];
      }
    }
    Tensor dx(xhat.shape());
    const auto md = static_cast<double>(m);
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t c = 0; c < channels; ++c) {
        const double dxh = dy[i * channels + c] * g[c];
        const double inv = cache.stats[c];
        dx[i * channels + c] =
            train ? inv / md * (md * dxh - sum_d[c] - xhat[i * channels + c] * sum_dx[c]) : dxh * inv;
      }
    }
    return dx;
  }

  void commit(ParameterSet& params, const Cache& cache, double momentum) const {
    if (cache.stats.empty() || cache.stats.back() == 0.0) return;
    Tensor& rm = params[running_mean].value;
    Tensor& rv = params[running_var].value;
    for (std::size_t c = 0; c < channels; ++c) {
      rm[c] = (1.0 - momentum) * rm[c] + momentum * cache.stats[channels + c];
      rv[c] = (1.0 - momentum) * rv[c] + momentum * cache.stats[2 * channels + c];
    }
  }
};

// ReLU when slope == 0, leaky ReLU otherwise.
struct Activation {
  double slope = 0.0;

  Tensor forward(const ParameterSet&, const Tensor& x, Mode, Cache* cache) const {
    Tensor y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > 0.0 ? x[i] : slope * x[i];
    if (cache) cache->input = x;
    return y;
  }

  Tensor backward(const ParameterSet&, const Tensor& dy, const Cache& cache, Gradients&) const {
    Tensor dx(dy.shape());
    for (std::size_t i = 0; i < dy.size(); ++i) dx[i] = cache.input[i] > 0.0 ? dy[i] : slope * dy[i];
    return dx;
  }
};

// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
// Ties resolve to the first element in row-major window order.
struct MaxPool2d {
  Tensor forward(const ParameterSet&, const Tensor& x, Mode, Cache* cache) const {
    const std::size_t n = x.dim(0), h = x.dim(1), w = x.dim(2), ch = x.dim(3);
    const std::size_t oh = h / 2, ow = w / 2;
    if (oh == 0 || ow == 0) throw ShapeError("max-pool input " + Tensor::shape_string(x.shape()) + " is too small");
    Tensor y({n, oh, ow, ch});
    std::vector<std::size_t> arg(cache ? y.size() : 0);
    for (std::size_t s = 0; s < n; ++s) {
      for (std::size_t r = 0; r < oh; ++r) {
        for (std::size_t c = 0; c < ow; ++c) {
          for (std::size_t k = 0; k < ch; ++k) {
            std::size_t best = ((s * h + 2 * r) * w + 2 * c) * ch + k;
            for (std::size_t dr = 0; dr < 2; ++dr) {
              for (std::size_t dc = 0; dc < 2; ++dc) {
                const std::size_t idx = ((s * h + 2 * r + dr) * w + 2 * c + dc) * ch + k;
                if (x[idx] > x[best]) best = idx;
              }
            }
            const std::size_t o = ((s * oh + r) * ow + c) * ch + k;
            y[o] = x[best];
            if (cache) arg[o] = best;
          }
        }
      }
    }
    if (cache) {
      cache->index = std::move(arg);
      cache->input_shape = x.shape();
    }
    return y;
  }

  Tensor backward(const ParameterSet&, const Tensor& dy, const Cache& cache, Gradients&) const {
    Tensor dx(cache.input_shape);
    for (std::size_t o = 0; o < dy.size(); ++o) dx[cache.index[o]] += dy[o];
    return dx;
  }
};

struct GlobalAvgPool {
  Tensor forward(const ParameterSet&, const Tensor& x, Mode, Cache* cache) const {
    const std::size_t n = x.dim(0), hw = x.dim(1) * x.dim(2), ch = x.dim(3);
    Tensor y({n, ch});
    for (std::size_t s = 0; s < n; ++s) {
      for (std::size_t p = 0; p < hw; ++p) {
        for (std::size_t k = 0; k < ch; ++k) y[s * ch + k] += x[(s * hw + p) * ch + k];
      }
      for (std::size_t k = 0; k < ch; ++k) y[s * ch + k] /= static_cast<double>(hw);
    }
    if (cache) cache->input_shape = x.shape();
    return y;
  }

  Tensor backward(const ParameterSet&, const Tensor& dy, const Cache& cache, Gradients&) const {
    const std::vector<std::size_t>& shape = cache.input_shape;
    const std::size_t n = shape[0], hw = shape[1] * shape[2], ch = shape[3];
    Tensor dx(shape);
    for (std::size_t s = 0; s < n; ++s) {
      for (std::size_t p = 0; p < hw; ++p) {
        for (std::size_t k = 0; k < ch; ++k) dx[(s * hw + p) * ch + k] = dy[s * ch + k] / static_cast<double>(hw);
      }
    }
    return dx;
  }
};

struct Flatten {
  Tensor forward(const ParameterSet&, const Tensor& x, Mode, Cache* cache) const {
    if (cache) cache->input_shape = x.shape();
    return x.reshaped({x.dim(0), x.size() / x.dim(0)});
  }

  Tensor backward(const ParameterSet&, const Tensor& dy, const Cache& cache, Gradients&) const {
    return dy.reshaped(cache.input_shape);
  }
};

// Three 3x3 conv + batch-norm layers with a 1x1 conv + batch-norm shortcut,
// summed, activated, then 2x2 max-pooled.
struct ResidualStage {
  Conv2d conv_a, conv_b, conv_c, shortcut;
  BatchNorm2d bn_a, bn_b, bn_c, bn_shortcut;
  Activation act;
  MaxPool2d pool;

  static ResidualStage create(ParameterSet& params, const std::string& prefix, std::size_t in, std::size_t out,
                              double slope, Rng& rng) {
    ResidualStage st;
    st.conv_a = Conv2d::create(params, prefix + ".conv_a", in, out, 3, rng);
    st.bn_a = BatchNorm2d::create(params, prefix + ".bn_a", out);
    st.conv_b = Conv2d::create(params, prefix + ".conv_b", out, out, 3, rng);
    st.bn_b = BatchNorm2d::create(params, prefix + ".bn_b", out);
    st.conv_c = Conv2d::create(params, prefix + ".conv_c", out, out, 3, rng);
    st.bn_c = BatchNorm2d::create(params, prefix + ".bn_c", out);
    st.shortcut = Conv2d::create(params, prefix + ".shortcut", in, out, 1, rng);
    st.bn_shortcut = BatchNorm2d::create(params, prefix + ".bn_shortcut", out);
    st.act.slope = slope;
    return st;
  }

  Tensor forward(const ParameterSet& p, const Tensor& x, Mode mode, Cache* cache) const {
    std::vector<Cache>* ch = nullptr;
    if (cache) {
      cache->children.assign(12, Cache{});
      ch = &cache->children;
    }
    auto slot = [&](std::size_t i) { return ch ? &(*ch)[i] : nullptr; };
    Tensor h = conv_a.forward(p, x, mode, slot(0));
    h = bn_a.forward(p, h, mode, slot(1));
    h = act.forward(p, h, mode, slot(2));
    h = conv_b.forward(p, h, mode, slot(3));
    h = bn_b.forward(p, h, mode, slot(4));
    h = act.forward(p, h, mode, slot(5));
    h = conv_c.forward(p, h, mode, slot(6));
    h = bn_c.forward(p, h, mode, slot(7));
    Tensor s = shortcut.forward(p, x, mode, slot(8));
    s = bn_shortcut.forward(p, s, mode, slot(9));
    for (std::size_t i = 0; i < h.size(); ++i) h[i] += s[i];
    h = act.forward(p, h, mode, slot(10));
    return pool.forward(p, h, mode, slot(11));
  }

  Tensor backward(const ParameterSet& p, const Tensor& dy, const Cache& cache, Gradients& g) const {
    const auto& ch = cache.children;
    Tensor dz = pool.backward(p, dy, ch[11], g);
    dz = act.backward(p, dz, ch[10], g);
    Tensor ds = bn_shortcut.backward(p, dz, ch[9], g);
    ds = shortcut.backward(p, ds, ch[8], g);
    Tensor dh = bn_c.backward(p, dz, ch[7], g);
    dh = conv_c.backward(p, dh, ch[6], g);
    dh = act.backward(p, dh, ch[5], g);
    dh = bn_b.backward(p, dh, ch[4], g);
    dh = conv_b.backward(p, dh, ch[3], g);
    dh = act.backward(p, dh, ch[2], g);
    dh = bn_a.backward(p, dh, ch[1], g);
    dh = conv_a.backward(p, dh, ch[0], g);
    for (std::size_t i = 0; i < dh.size(); ++i) dh[i] += ds[i];
    return dh;
  }

  void commit(ParameterSet& p, const Cache& cache, double momentum) const {
    const auto& ch = cache.children;
    bn_a.commit(p, ch[1], momentum);
    bn_b.commit(p, ch[4], momentum);
    bn_c.commit(p, ch[7], momentum);
    bn_shortcut.commit(p, ch[9], momentum);
  }
};

using Node = std::variant<Conv2d, BatchNorm2d, Activation, MaxPool2d, GlobalAvgPool, Flatten, ResidualStage>;

struct Tape {
  std::vector<Cache> nodes;
};

// True when every recorded batch statistic is finite, i.e. committing the
// tape cannot poison the running statistics.
inline bool stats_finite(const Cache& c) {
  for (double v : c.stats) {
    if (!std::isfinite(v)) return false;
  }
  return std::all_of(c.children.begin(), c.children.end(), [](const Cache& k) { return stats_finite(k); });
}

inline bool stats_finite(const Tape& t) {
  return std::all_of(t.nodes.begin(), t.nodes.end(), [](const Cache& k) { return stats_finite(k); });
}

}  // namespace nn
}  // namespace grdd
