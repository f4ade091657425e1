#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "grdd/data.hpp"
#include "grdd/errors.hpp"
#include "grdd/rng.hpp"
#include "grdd/tensor.hpp"

namespace grdd {

struct EpisodeSpec {
  int way = 5;
  int shot = 1;
  int queries_per_class = 15;

  std::size_t support_count() const { return static_cast<std::size_t>(way) * static_cast<std::size_t>(shot); }
  std::size_t query_count() const {
    return static_cast<std::size_t>(way) * static_cast<std::size_t>(queries_per_class);
  }
};

// One C-way K-shot task. Supports and queries are class-major: all samples of
// episode class 0 first, then class 1, and so on.
struct Episode {
  Tensor support_images;  // [C*K, H, W, ch]
  std::vector<int> support_labels;
  Tensor query_images;  // [C*q, H, W, ch]
  std::vector<int> query_labels;
  std::vector<int> category_map;  // episode-local label -> global category id
  std::vector<std::size_t> support_ids;
  std::vector<std::size_t> query_ids;

  int way() const { return static_cast<int>(category_map.size()); }
};

// Draws one episode from `split`. Episode classes are numbered in ascending
// order of their global category ids.
inline Episode sample_episode(const Dataset& dataset, Split split, const EpisodeSpec& spec, Rng& rng) {
  if (spec.way < 1 || spec.shot < 1 || spec.queries_per_class < 0) {
    throw ConfigError("episode needs way >= 1, shot >= 1, queries >= 0");
  }
  std::vector<int> pool = dataset.categories_in(split);
  if (pool.size() < static_cast<std::size_t>(spec.way)) {
    throw DataError(std::string("split '") + to_string(split) + "' has " + std::to_string(pool.size()) +
                    " categories, a " + std::to_string(spec.way) + "-way episode needs more");
  }
  // Partial Fisher-Yates: the first `way` slots become the chosen categories.
  for (std::size_t i = 0; i < static_cast<std::size_t>(spec.way); ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(pool.size() - i));
    std::swap(pool[i], pool[j]);
  }
  std::vector<int> chosen(pool.begin(), pool.begin() + spec.way);
  std::sort(chosen.begin(), chosen.end());

  const std::size_t per_class = static_cast<std::size_t>(spec.shot + spec.queries_per_class);
  Episode ep;
  ep.category_map = chosen;
  for (std::size_t local = 0; local < chosen.size(); ++local) {
    std::vector<std::size_t> members = dataset.indices_of(chosen[local]);
    if (members.size() < per_class) {
      throw DataError("category '" + dataset.category_names()[static_cast<std::size_t>(chosen[local])] + "' has " +
                      std::to_string(members.size()) + " images, an episode needs " + std::to_string(per_class));
    }
    for (std::size_t i = 0; i < per_class; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(rng.below(members.size() - i));
      std::swap(members[i], members[j]);
    }
    for (std::size_t i = 0; i < per_class; ++i) {
      if (i < static_cast<std::size_t>(spec.shot)) {
        ep.support_ids.push_back(members[i]);
        ep.support_labels.push_back(static_cast<int>(local));
      } else {
        ep.query_ids.push_back(members[i]);
        ep.query_labels.push_back(static_cast<int>(local));
      }
    }
  }
  ep.support_images = dataset.gather(ep.support_ids);
  ep.query_images = dataset.gather(ep.query_ids);
  return ep;
}

// Deterministic, random-access sequence of episodes. Episode i is drawn from
// its own substream keyed by (seed, i), so any subset can be generated
// independently and in any order with identical results.
class EpisodeStream {
 public:
  EpisodeStream(const Dataset& dataset, Split split, EpisodeSpec spec, std::size_t n_episodes, std::uint64_t seed)
      : dataset_(&dataset), split_(split), spec_(spec), n_(n_episodes), root_(seed) {
    if (n_episodes < 1) throw ConfigError("an episode stream needs at least one episode");
  }

  std::size_t size() const { return n_; }
  const EpisodeSpec& spec() const { return spec_; }

  Episode operator[](std::size_t i) const {
    Rng rng = root_.substream(i);
    return sample_episode(*dataset_, split_, spec_, rng);
  }

  class iterator {
   public:
    using value_type = Episode;
    using difference_type = std::ptrdiff_t;
    iterator() = default;
    iterator(const EpisodeStream* s, std::size_t i) : s_(s), i_(i) {}
    Episode operator*() const { return (*s_)[i_]; }
    iterator& operator++() {
      ++i_;
      return *this;
    }
    iterator operator++(int) {
      iterator t = *this;
      ++i_;
      return t;
    }
    friend bool operator==(const iterator& a, const iterator& b) { return a.i_ == b.i_; }

   private:
    const EpisodeStream* s_ = nullptr;
    std::size_t i_ = 0;
  };

  iterator begin() const { return {this, 0}; }
  iterator end() const { return {this, n_}; }

 private:
  const Dataset* dataset_;
  Split split_;
  EpisodeSpec spec_;
  std::size_t n_;
  Rng root_;
};

inline EpisodeStream episode_stream(const Dataset& dataset, Split split, EpisodeSpec spec, std::size_t n_episodes,
                                    std::uint64_t seed) {
  return EpisodeStream(dataset, split, spec, n_episodes, seed);
}

}  // namespace grdd
