#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "grdd/errors.hpp"
#include "grdd/tensor.hpp"

// Relatedness between support and query embeddings, its decoupling into
// per-support distributions over queries, and the losses built on them.
// Every loss has a companion that returns its gradient with respect to the
// student relatedness matrix; relatedness_backward carries that on to the
// student embeddings. Teacher quantities are constants throughout.

namespace grdd {

enum class RelatednessSource { teacher, student };

// values(i, j) = cosine(support_i, query_j); shape [N_S, N_Q].
struct RelatednessMatrix {
  Tensor values;
  RelatednessSource source = RelatednessSource::student;

  std::size_t supports() const { return values.dim(0); }
  std::size_t queries() const { return values.dim(1); }
};

// One softmax-over-queries distribution per support row; shape [N_S, N_Q].
struct DecoupledRelatedness {
  Tensor groups;
  double temperature = 1.0;

  std::size_t size() const { return groups.dim(0); }
  std::span<const double> group(std::size_t i) const { return groups.row(i); }
};

// Per-query class distribution; shape [N_Q, C].
struct ClassScores {
  Tensor scores;
};

namespace detail {

inline std::vector<double> row_norms(const Tensor& emb, const char* what) {
  if (emb.rank() != 2) throw ShapeError(std::string(what) + " embeddings must be a [count, dim] matrix");
  std::vector<double> norms(emb.dim(0));
  for (std::size_t r = 0; r < emb.dim(0); ++r) {
    double s = 0.0;
    for (double v : emb.row(r)) s += v * v;
    norms[r] = std::sqrt(s);
    if (!(norms[r] > 0.0)) {
      throw NumericError(std::string(what) + " embedding " + std::to_string(r) +
                         " has zero norm; cosine relatedness is undefined");
    }
  }
  return norms;
}

// log-softmax of `z / temperature` over a contiguous span.
inline void log_softmax(std::span<const double> z, double temperature, std::span<double> out) {
  double mx = -INFINITY;
  for (double v : z) mx = std::max(mx, v / temperature);
  double sum = 0.0;
  for (double v : z) sum += std::exp(v / temperature - mx);
  const double lse = mx + std::log(sum);
  for (std::size_t j = 0; j < z.size(); ++j) out[j] = z[j] / temperature - lse;
}

inline void require_temperature(double t) {
  if (!(t > 0.0) || !std::isfinite(t)) throw ConfigError("temperature must be finite and > 0, got " + std::to_string(t));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shapes " + Tensor::shape_string(a.shape()) + " and " +
                     Tensor::shape_string(b.shape()) + " differ");
  }
}

}  // namespace detail

inline RelatednessMatrix relatedness(const Tensor& support, const Tensor& query,
                                     RelatednessSource source = RelatednessSource::student) {
  const auto ns = detail::row_norms(support, "support");
  const auto nq = detail::row_norms(query, "query");
  if (support.dim(1) != query.dim(1)) throw ShapeError("support and query embeddings differ in width");
  const std::size_t d = support.dim(1);
  RelatednessMatrix r{Tensor({support.dim(0), query.dim(0)}), source};
  for (std::size_t i = 0; i < support.dim(0); ++i) {
    for (std::size_t j = 0; j < query.dim(0); ++j) {
      double dot = 0.0;
      for (std::size_t k = 0; k < d; ++k) dot += support.at(i, k) * query.at(j, k);
      r.values.at(i, j) = dot / (ns[i] * nq[j]);
    }
  }
  return r;
}

struct EmbeddingGrad {
  Tensor support;
  Tensor query;
};

// Chain rule through the cosine: given dL/dR, returns dL/d(support) and
// dL/d(query).
inline EmbeddingGrad relatedness_backward(const Tensor& support, const Tensor& query, const RelatednessMatrix& r,
                                          const Tensor& grad_r) {
  const auto ns = detail::row_norms(support, "support");
  const auto nq = detail::row_norms(query, "query");
  const std::size_t s = support.dim(0), q = query.dim(0), d = support.dim(1);
  EmbeddingGrad g{Tensor(support.shape()), Tensor(query.shape())};
  for (std::size_t i = 0; i < s; ++i) {
    for (std::size_t j = 0; j < q; ++j) {
      const double gij = grad_r.at(i, j);
      if (gij == 0.0) continue;
      const double rij = r.values.at(i, j);
      for (std::size_t k = 0; k < d; ++k) {
        const double sh = support.at(i, k) / ns[i];
        const double qh = query.at(j, k) / nq[j];
        g.support.at(i, k) += gij * (qh - rij * sh) / ns[i];
        g.query.at(j, k) += gij * (sh - rij * qh) / nq[j];
      }
    }
  }
  return g;
}

inline DecoupledRelatedness decouple(const RelatednessMatrix& r, double temperature) {
  detail::require_temperature(temperature);
  DecoupledRelatedness out{Tensor(r.values.shape()), temperature};
  for (std::size_t i = 0; i < r.supports(); ++i) {
    auto row = out.groups.row(i);
    detail::log_softmax(r.values.row(i), temperature, row);
    for (double& v : row) v = std::exp(v);
  }
  return out;
}

// Sum over support rows of KL(teacher_i || student_i), evaluated in log
// space from the relatedness matrices.
inline double kl_distill_loss(const RelatednessMatrix& teacher, const RelatednessMatrix& student, double temperature) {
  detail::require_temperature(temperature);
  detail::require_same_shape(teacher.values, student.values, "decoupled distillation");
  const std::size_t q = teacher.queries();
  std::vector<double> lp(q), lq(q);
  double loss = 0.0;
  for (std::size_t i = 0; i < teacher.supports(); ++i) {
    detail::log_softmax(teacher.values.row(i), temperature, lp);
    detail::log_softmax(student.values.row(i), temperature, lq);
    for (std::size_t j = 0; j < q; ++j) loss += std::exp(lp[j]) * (lp[j] - lq[j]);
  }
  return loss;
}

// Same quantity from already-decoupled distributions.
inline double kl_distill_loss(const DecoupledRelatedness& teacher, const DecoupledRelatedness& student) {
  detail::require_same_shape(teacher.groups, student.groups, "decoupled distillation");
  double loss = 0.0;
  for (std::size_t i = 0; i < teacher.groups.size(); ++i) {
    const double p = teacher.groups[i];
    if (p > 0.0) loss += p * (std::log(p) - std::log(student.groups[i]));
  }
  return loss;
}

// d(kl_distill_loss)/d(student relatedness) = (student_i - teacher_i) / T.
inline Tensor kl_distill_grad(const DecoupledRelatedness& teacher, const DecoupledRelatedness& student) {
  detail::require_same_shape(teacher.groups, student.groups, "decoupled distillation");
  Tensor g(student.groups.shape());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = (student.groups[i] - teacher.groups[i]) / student.temperature;
  return g;
}

// Ablation baseline: one softmax over all N_S * N_Q entries per matrix and a
// single KL between the two flattened distributions.
inline double whole_matrix_distill_loss(const RelatednessMatrix& teacher, const RelatednessMatrix& student,
                                        double temperature) {
  detail::require_temperature(temperature);
  detail::require_same_shape(teacher.values, student.values, "whole-matrix distillation");
  const std::size_t n = teacher.values.size();
  std::vector<double> lp(n), lq(n);
  detail::log_softmax(teacher.values.values(), temperature, lp);
  detail::log_softmax(student.values.values(), temperature, lq);
  double loss = 0.0;
  for (std::size_t j = 0; j < n; ++j) loss += std::exp(lp[j]) * (lp[j] - lq[j]);
  return loss;
}

inline Tensor whole_matrix_distill_grad(const RelatednessMatrix& teacher, const RelatednessMatrix& student,
                                        double temperature) {
  detail::require_temperature(temperature);
  detail::require_same_shape(teacher.values, student.values, "whole-matrix distillation");
  const std::size_t n = teacher.values.size();
  std::vector<double> lp(n), lq(n);
  detail::log_softmax(teacher.values.values(), temperature, lp);
  detail::log_softmax(student.values.values(), temperature, lq);
  Tensor g(student.values.shape());
  for (std::size_t j = 0; j < n; ++j) g[j] = (std::exp(lq[j]) - std::exp(lp[j])) / temperature;
  return g;
}

// Raw score of class c for query q is the sum of R(s, q) over supports s of
// class c; each query's raw scores are then softmax-normalized over classes.
inline ClassScores class_scores(const RelatednessMatrix& r, std::span<const int> support_labels, int classes) {
  if (classes < 1) throw ShapeError("class scores need at least one class");
  if (support_labels.size() != r.supports()) throw ShapeError("support label count does not match relatedness rows");
  const auto c = static_cast<std::size_t>(classes);
  for (int y : support_labels) {
    if (y < 0 || y >= classes) throw ShapeError("support label " + std::to_string(y) + " outside [0, " +
                                                std::to_string(classes) + ")");
  }
  ClassScores out{Tensor({r.queries(), c})};
  std::vector<double> raw(c), lsm(c);
  for (std::size_t q = 0; q < r.queries(); ++q) {
    std::fill(raw.begin(), raw.end(), 0.0);
    for (std::size_t s = 0; s < r.supports(); ++s) raw[static_cast<std::size_t>(support_labels[s])] += r.values.at(s, q);
    detail::log_softmax(raw, 1.0, lsm);
    for (std::size_t k = 0; k < c; ++k) out.scores.at(q, k) = std::exp(lsm[k]);
  }
  return out;
}

// Mean over queries of -log scores(q, label(q)).
inline double regularizer_loss(const ClassScores& scores, std::span<const int> query_labels) {
  const Tensor& s = scores.scores;
  if (query_labels.size() != s.dim(0)) throw ShapeError("query label count does not match class scores");
  double loss = 0.0;
  for (std::size_t q = 0; q < s.dim(0); ++q) {
    const int y = query_labels[q];
    if (y < 0 || static_cast<std::size_t>(y) >= s.dim(1)) {
      throw ShapeError("query label " + std::to_string(y) + " outside [0, " + std::to_string(s.dim(1)) + ")");
    }
    const double p = s.at(q, static_cast<std::size_t>(y));
    if (!(p > 0.0)) throw NumericError("class score of the true label underflowed to zero for query " + std::to_string(q));
    loss -= std::log(p);
  }
  return loss / static_cast<double>(s.dim(0));
}

// d(regularizer_loss)/d(relatedness): (scores - onehot) / N_Q routed back to
// every support of the corresponding class.
inline Tensor regularizer_grad(const ClassScores& scores, std::span<const int> support_labels,
                               std::span<const int> query_labels) {
  const Tensor& s = scores.scores;
  const std::size_t nq = s.dim(0);
  Tensor g({support_labels.size(), nq});
  for (std::size_t q = 0; q < nq; ++q) {
    for (std::size_t i = 0; i < support_labels.size(); ++i) {
      const auto k = static_cast<std::size_t>(support_labels[i]);
      const double onehot = static_cast<std::size_t>(query_labels[q]) == k ? 1.0 : 0.0;
      g.at(i, q) = (s.at(q, k) - onehot) / static_cast<double>(nq);
    }
  }
  return g;
}

inline double combined_meta_loss(double l_kl, double l_rt, double gamma) {
  if (!(gamma >= 0.0)) throw ConfigError("gamma must be >= 0");
  return l_kl + gamma * l_rt;
}

// Which distillation term the meta objective uses.
enum class DistillTerm { decoupled, whole_matrix, none };

struct MetaObjectiveOptions {
  double temperature = 4.0;
  double gamma = 0.2;
  DistillTerm distill = DistillTerm::decoupled;
};

struct MetaObjective {
  double l_kl = 0.0;
  double l_rt = 0.0;
  double total = 0.0;
  EmbeddingGrad student_grad;  // gradient of `total` w.r.t. the student embeddings
};

// Full stage-2 objective on one episode's embeddings. Teacher embeddings
// enter only through the constant target distributions; with
// DistillTerm::none they are ignored and may be empty.
inline MetaObjective meta_objective(const Tensor& teacher_support, const Tensor& teacher_query,
                                    const Tensor& student_support, const Tensor& student_query,
                                    std::span<const int> support_labels, std::span<const int> query_labels, int classes,
                                    const MetaObjectiveOptions& opt) {
  const RelatednessMatrix re = relatedness(student_support, student_query, RelatednessSource::student);
  Tensor grad_r(re.values.shape());
  MetaObjective out;

  if (opt.distill != DistillTerm::none) {
    const RelatednessMatrix rg = relatedness(teacher_support, teacher_query, RelatednessSource::teacher);
    if (opt.distill == DistillTerm::decoupled) {
      const DecoupledRelatedness wg = decouple(rg, opt.temperature);
      const DecoupledRelatedness we = decouple(re, opt.temperature);
      out.l_kl = kl_distill_loss(rg, re, opt.temperature);
      grad_r = kl_distill_grad(wg, we);
    } else {
      out.l_kl = whole_matrix_distill_loss(rg, re, opt.temperature);
      grad_r = whole_matrix_distill_grad(rg, re, opt.temperature);
    }
  }

  const ClassScores sc = class_scores(re, support_labels, classes);
  out.l_rt = regularizer_loss(sc, query_labels);
  out.total = combined_meta_loss(out.l_kl, out.l_rt, opt.gamma);
  if (opt.gamma != 0.0) {
    const Tensor grt = regularizer_grad(sc, support_labels, query_labels);
    for (std::size_t i = 0; i < grad_r.size(); ++i) grad_r[i] += opt.gamma * grt[i];
  }
  out.student_grad = relatedness_backward(student_support, student_query, re, grad_r);
  return out;
}

}  // namespace grdd
