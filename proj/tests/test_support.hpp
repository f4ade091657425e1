#pragma once

// Independent scalar-loop references and small fixtures for the tests. None
// of the oracles call into the library's math; they work on nested vectors.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "grdd/data.hpp"
#include "grdd/nn.hpp"
#include "grdd/rng.hpp"
#include "grdd/tensor.hpp"

namespace grdd::testing {

using Matrix = std::vector<std::vector<double>>;

inline Matrix to_matrix(const Tensor& t) {
  Matrix m(t.dim(0), std::vector<double>(t.dim(1)));
  for (std::size_t i = 0; i < t.dim(0); ++i)
    for (std::size_t j = 0; j < t.dim(1); ++j) m[i][j] = t.at(i, j);
  return m;
}

inline Tensor to_tensor(const Matrix& m) {
  Tensor t({m.size(), m.empty() ? 0 : m[0].size()});
  for (std::size_t i = 0; i < m.size(); ++i)
    for (std::size_t j = 0; j < m[i].size(); ++j) t.at(i, j) = m[i][j];
  return t;
}

inline Matrix random_matrix(std::mt19937_64& gen, std::size_t rows, std::size_t cols, double scale = 1.0) {
  std::normal_distribution<double> nd(0.0, scale);
  Matrix m(rows, std::vector<double>(cols));
  for (auto& r : m)
    for (auto& v : r) v = nd(gen);
  return m;
}

// R[i][j] = <s_i, q_j> / (|s_i| |q_j|)
inline Matrix oracle_cosine(const Matrix& s, const Matrix& q) {
  Matrix r(s.size(), std::vector<double>(q.size()));
  for (std::size_t i = 0; i < s.size(); ++i) {
    for (std::size_t j = 0; j < q.size(); ++j) {
      double dot = 0, a = 0, b = 0;
      for (std::size_t k = 0; k < s[i].size(); ++k) {
        dot += s[i][k] * q[j][k];
        a += s[i][k] * s[i][k];
        b += q[j][k] * q[j][k];
      }
      r[i][j] = dot / std::sqrt(a * b);
    }
  }
  return r;
}

inline std::vector<double> oracle_softmax(const std::vector<double>& z, double t) {
  std::vector<double> e(z.size());
  double sum = 0;
  for (std::size_t j = 0; j < z.size(); ++j) {
    e[j] = std::exp(z[j] / t);
    sum += e[j];
  }
  for (auto& v : e) v /= sum;
  return e;
}

inline Matrix oracle_decouple(const Matrix& r, double t) {
  Matrix out;
  for (const auto& row : r) out.push_back(oracle_softmax(row, t));
  return out;
}

inline double oracle_kl(const std::vector<double>& p, const std::vector<double>& q) {
  double s = 0;
  for (std::size_t j = 0; j < p.size(); ++j) s += p[j] * std::log(p[j] / q[j]);
  return s;
}

inline double oracle_grouped_kl(const Matrix& rg, const Matrix& re, double t) {
  const Matrix wg = oracle_decouple(rg, t), we = oracle_decouple(re, t);
  double s = 0;
  for (std::size_t i = 0; i < wg.size(); ++i) s += oracle_kl(wg[i], we[i]);
  return s;
}

inline double oracle_whole_kl(const Matrix& rg, const Matrix& re, double t) {
  std::vector<double> a, b;
  for (const auto& r : rg) a.insert(a.end(), r.begin(), r.end());
  for (const auto& r : re) b.insert(b.end(), r.begin(), r.end());
  return oracle_kl(oracle_softmax(a, t), oracle_softmax(b, t));
}

// scores[q][c] = softmax_c( sum over supports s with label c of R[s][q] )
inline Matrix oracle_class_scores(const Matrix& r, const std::vector<int>& support_labels, int classes) {
  const std::size_t nq = r.empty() ? 0 : r[0].size();
  Matrix out(nq);
  for (std::size_t q = 0; q < nq; ++q) {
    std::vector<double> raw(static_cast<std::size_t>(classes), 0.0);
    for (std::size_t s = 0; s < r.size(); ++s) raw[static_cast<std::size_t>(support_labels[s])] += r[s][q];
    out[q] = oracle_softmax(raw, 1.0);
  }
  return out;
}

inline double oracle_regularizer(const Matrix& scores, const std::vector<int>& query_labels) {
  double s = 0;
  for (std::size_t q = 0; q < scores.size(); ++q) s -= std::log(scores[q][static_cast<std::size_t>(query_labels[q])]);
  return s / static_cast<double>(scores.size());
}

inline double oracle_cross_entropy(const Matrix& logits, const std::vector<int>& labels) {
  double total = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    double sum = 0;
    for (double v : logits[i]) sum += std::exp(v);
    total += -std::log(std::exp(logits[i][static_cast<std::size_t>(labels[i])]) / sum);
  }
  return total / static_cast<double>(logits.size());
}

// Counterclockwise quarter turn of a side x side single-channel image given
// as rows: the top row becomes the left column read bottom to top.
inline Matrix oracle_rotate_ccw(const Matrix& in) {
  const std::size_t n = in.size();
  Matrix out(n, std::vector<double>(n));
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < n; ++c) out[n - 1 - c][r] = in[r][c];
  return out;
}

// |a - b| / max(|a|, |b|, floor)
inline double relative_error(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

// Centered difference of f with respect to *x.
inline double central_difference(double* x, const std::function<double()>& f, double eps = 1e-3) {
  const double keep = *x;
  *x = keep + eps;
  const double up = f();
  *x = keep - eps;
  const double down = f();
  *x = keep;
  return (up - down) / (2.0 * eps);
}

// Fingerprint of every piecewise-linear branch taken in a forward pass:
// the sign of each cached layer input and each max-pool winner. Equal
// fingerprints at theta - eps and theta + eps mean the centered difference
// did not straddle a ReLU or max-pool kink.
inline std::uint64_t kink_signature(const nn::Cache& c, std::uint64_t h = 0xcbf29ce484222325ULL) {
  auto mix = [&h](std::uint64_t v) { h = (h ^ v) * 0x100000001b3ULL; };
  for (double v : c.input.values()) mix(v > 0.0 ? 1 : (v < 0.0 ? 2 : 3));
  for (std::size_t i : c.index) mix(i);
  for (const auto& child : c.children) h = kink_signature(child, h);
  return h;
}

inline std::uint64_t kink_signature(const nn::Tape& t) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& c : t.nodes) h = kink_signature(c, h);
  return h;
}

struct Difference {
  double numeric = 0.0;
  bool smooth = true;  // no kink between x - eps and x + eps
};

// Centered difference plus a kink check; `signature` runs a forward pass at
// the current value of *x and returns its kink_signature.
inline Difference checked_difference(double* x, const std::function<double()>& f,
                                     const std::function<std::uint64_t()>& signature, double eps = 1e-3) {
  const double keep = *x;
  const std::uint64_t mid = signature();
  *x = keep + eps;
  const double up = f();
  const std::uint64_t s_up = signature();
  *x = keep - eps;
  const double down = f();
  const std::uint64_t s_down = signature();
  *x = keep;
  return {(up - down) / (2.0 * eps), s_up == mid && s_down == mid};
}

inline Tensor random_images(std::size_t n, InputShape s, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t({n, s.height, s.width, s.channels});
  for (double& v : t.values()) v = rng.uniform();
  return t;
}

inline Tensor random_like(const std::vector<std::size_t>& shape, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t(shape);
  for (double& v : t.values()) v = rng.normal();
  return t;
}

inline double dot(const Tensor& a, const Tensor& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

struct Coordinate {
  std::size_t param;
  std::size_t index;
};

// `count` random trainable coordinates, drawn proportionally to tensor size.
inline std::vector<Coordinate> pick_coordinates(const ParameterSet& params, std::size_t count, std::uint64_t seed) {
  std::vector<Coordinate> all;
  for (std::size_t p = 0; p < params.size(); ++p) {
    if (!params[p].trainable) continue;
    for (std::size_t i = 0; i < params[p].value.size(); ++i) all.push_back({p, i});
  }
  Rng rng(seed);
  rng.shuffle(all);
  all.resize(std::min(count, all.size()));
  return all;
}

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("grdd_test_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace grdd::testing
