#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "grdd/data.hpp"
#include "grdd/encoders.hpp"
#include "grdd/episodes.hpp"
#include "grdd/errors.hpp"
#include "grdd/rdd.hpp"
#include "grdd/rng.hpp"

namespace grdd {

// Index of the largest value; ties go to the lowest index.
inline int argmax(std::span<const double> row) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < row.size(); ++j) {
    if (row[j] > row[best]) best = j;
  }
  return static_cast<int>(best);
}

// Predicted episode-local labels from already computed embeddings. Each
// query's prediction depends only on that query and the support set.
inline std::vector<int> classify_embeddings(const Tensor& support, const Tensor& query,
                                            std::span<const int> support_labels, int classes) {
  const RelatednessMatrix r = relatedness(support, query, RelatednessSource::student);
  const ClassScores s = class_scores(r, support_labels, classes);
  std::vector<int> out(query.dim(0));
  for (std::size_t q = 0; q < out.size(); ++q) out[q] = argmax(s.scores.row(q));
  return out;
}

inline std::vector<int> classify_queries(const Encoder& student, const Episode& episode) {
  const Tensor support = student.forward(episode.support_images, nn::Mode::eval);
  const Tensor query = student.forward(episode.query_images, nn::Mode::eval);
  return classify_embeddings(support, query, episode.support_labels, episode.way());
}

inline double episode_accuracy(std::span<const int> predicted, std::span<const int> truth) {
  if (predicted.size() != truth.size() || truth.empty()) throw ShapeError("prediction and label counts differ");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hits += predicted[i] == truth[i] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(truth.size());
}

struct EvalResult {
  std::size_t n_episodes = 0;
  std::vector<double> per_episode_accuracy;
  double mean_accuracy = 0.0;
  double ci95_halfwidth = 0.0;
  std::string config_fingerprint;
};

// Mean and 1.96 * sample std / sqrt(n); a single episode has zero width.
inline EvalResult summarize(std::vector<double> accuracies, std::string fingerprint = {}) {
  if (accuracies.empty()) throw ConfigError("cannot summarize zero episodes");
  EvalResult r;
  r.n_episodes = accuracies.size();
  const auto n = static_cast<double>(accuracies.size());
  double sum = 0.0;
  for (double a : accuracies) sum += a;
  r.mean_accuracy = sum / n;
  if (accuracies.size() > 1) {
    double ss = 0.0;
    for (double a : accuracies) ss += (a - r.mean_accuracy) * (a - r.mean_accuracy);
    r.ci95_halfwidth = 1.96 * std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
  }
  r.per_episode_accuracy = std::move(accuracies);
  r.config_fingerprint = std::move(fingerprint);
  return r;
}

inline nlohmann::json to_json(const EvalResult& r) {
  return {{"n_episodes", r.n_episodes},
          {"mean_accuracy", r.mean_accuracy},
          {"ci95_halfwidth", r.ci95_halfwidth},
          {"config_fingerprint", r.config_fingerprint},
          {"per_episode_accuracy", r.per_episode_accuracy}};
}

inline EvalResult eval_result_from_json(const nlohmann::json& j) {
  EvalResult r;
  r.n_episodes = j.at("n_episodes").get<std::size_t>();
  r.mean_accuracy = j.at("mean_accuracy").get<double>();
  r.ci95_halfwidth = j.at("ci95_halfwidth").get<double>();
  r.config_fingerprint = j.at("config_fingerprint").get<std::string>();
  r.per_episode_accuracy = j.at("per_episode_accuracy").get<std::vector<double>>();
  return r;
}

// "67.52 +- 0.81" style, in percent.
inline std::string format_accuracy(const EvalResult& r) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f +- %.2f", 100.0 * r.mean_accuracy, 100.0 * r.ci95_halfwidth);
  return buf;
}

struct EvalSpec {
  Split split = Split::test;
  EpisodeSpec episode{5, 1, 15};
  std::size_t n_episodes = 600;
  std::uint64_t seed = 0;
};

inline std::string eval_fingerprint(const EvalSpec& spec, std::uint64_t model_hash) {
  const std::string text = std::string(to_string(spec.split)) + "/" + std::to_string(spec.episode.way) + "w" +
                           std::to_string(spec.episode.shot) + "s" + std::to_string(spec.episode.queries_per_class) +
                           "q/" + std::to_string(spec.n_episodes) + "/" + std::to_string(spec.seed);
  char buf[80];
  std::snprintf(buf, sizeof buf, "%016llx-%016llx", static_cast<unsigned long long>(fnv1a64(text)),
                static_cast<unsigned long long>(model_hash));
  return buf;
}

using EpisodeClassifier = std::function<std::vector<int>(const Episode&)>;

inline EvalResult evaluate_with(const EpisodeClassifier& classify, const Dataset& dataset, const EvalSpec& spec,
                                std::string fingerprint = {}) {
  const EpisodeStream stream(dataset, spec.split, spec.episode, spec.n_episodes, spec.seed);
  std::vector<double> acc;
  acc.reserve(spec.n_episodes);
  for (const Episode& ep : stream) acc.push_back(episode_accuracy(classify(ep), ep.query_labels));
  return summarize(std::move(acc), std::move(fingerprint));
}

inline EvalResult evaluate(const Encoder& student, const Dataset& dataset, const EvalSpec& spec) {
  return evaluate_with([&](const Episode& ep) { return classify_queries(student, ep); }, dataset, spec,
                       eval_fingerprint(spec, student.parameters().hash()));
}

// Embeddings of up to n_samples images of `split` (in split order), as
// packed-binary records of shape 1 x d x 1 with the global labels appended.
struct ExportedEmbeddings {
  Tensor embeddings;  // [n, d]
  std::vector<int> labels;
};

inline ExportedEmbeddings compute_embeddings(const Encoder& student, const Dataset& dataset, Split split,
                                             std::size_t n_samples, std::size_t batch = 64) {
  std::vector<std::size_t> ids = dataset.indices_in(split);
  if (ids.empty()) throw DataError(std::string("split '") + to_string(split) + "' is empty");
  if (n_samples < ids.size()) ids.resize(n_samples);
  ExportedEmbeddings out{Tensor({ids.size(), student.embed_dim()}), {}};
  for (std::size_t begin = 0; begin < ids.size(); begin += batch) {
    const std::size_t end = std::min(begin + batch, ids.size());
    const Tensor e = student.forward(dataset.gather(std::span(ids).subspan(begin, end - begin)), nn::Mode::eval);
    std::copy(e.values().begin(), e.values().end(), out.embeddings.values().begin() + begin * e.dim(1));
  }
  for (std::size_t id : ids) out.labels.push_back(dataset.labels()[id]);
  return out;
}

inline void export_embeddings(const Encoder& student, const Dataset& dataset, Split split, std::size_t n_samples,
                              const std::filesystem::path& out_path) {
  const ExportedEmbeddings e = compute_embeddings(student, dataset, split, n_samples);
  PackedArrays p;
  p.count = e.embeddings.dim(0);
  p.height = 1;
  p.width = e.embeddings.dim(1);
  p.channels = 1;
  p.values.assign(e.embeddings.values().begin(), e.embeddings.values().end());
  p.labels.assign(e.labels.begin(), e.labels.end());
  write_packed(out_path, p);
}

inline ExportedEmbeddings read_embeddings(const std::filesystem::path& path) {
  const PackedArrays p = read_packed(path);
  if (p.height != 1 || p.channels != 1) throw DataError("'" + path.string() + "' is not an embeddings file");
  ExportedEmbeddings e{Tensor({p.count, p.width}), {}};
  for (std::size_t i = 0; i < p.values.size(); ++i) e.embeddings[i] = p.values[i];
  e.labels.assign(p.labels.begin(), p.labels.end());
  return e;
}

// Mean cosine between same-class pairs minus mean cosine between
// different-class pairs. Larger means tighter, better separated classes.
inline double class_separation(const Tensor& embeddings, std::span<const int> labels) {
  const RelatednessMatrix r = relatedness(embeddings, embeddings, RelatednessSource::student);
  double same = 0.0, diff = 0.0;
  std::size_t n_same = 0, n_diff = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    for (std::size_t j = i + 1; j < labels.size(); ++j) {
      if (labels[i] == labels[j]) {
        same += r.values.at(i, j);
        ++n_same;
      } else {
        diff += r.values.at(i, j);
        ++n_diff;
      }
    }
  }
  if (n_same == 0 || n_diff == 0) throw DataError("class separation needs both same- and cross-class pairs");
  return same / static_cast<double>(n_same) - diff / static_cast<double>(n_diff);
}

}  // namespace grdd
