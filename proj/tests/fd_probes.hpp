#pragma once

// Finite-difference probes for the two training objectives, shared by the
// unit tests and the acceptance binary.

#include <string>
#include <vector>

#include "grdd/global_stage.hpp"
#include "grdd/meta_stage.hpp"
#include "test_support.hpp"

namespace grdd::testing {

struct FdReport {
  std::size_t checked = 0;
  std::size_t skipped = 0;  // straddled a kink
  double max_rel = 0.0;
  std::string worst;
};

// Walks random trainable coordinates of `sets` until `wanted` kink-free ones
// have been compared against `analytic`.
template <class Loss, class Signature>
FdReport check_coordinates(std::vector<ParameterSet*> sets, const std::vector<const Gradients*>& analytic,
                           std::size_t wanted, std::uint64_t seed, Loss loss, Signature signature,
                           double eps = 1e-3) {
  struct Slot {
    std::size_t set;
    Coordinate c;
  };
  std::vector<Slot> all;
  for (std::size_t s = 0; s < sets.size(); ++s) {
    for (const Coordinate& c : pick_coordinates(*sets[s], 40 * wanted, seed + s)) all.push_back({s, c});
  }
  Rng(seed).shuffle(all);
  FdReport rep;
  for (const Slot& slot : all) {
    if (rep.checked == wanted) break;
    Parameter& p = (*sets[slot.set])[slot.c.param];
    const Difference d = checked_difference(&p.value[slot.c.index], loss, signature, eps);
    if (!d.smooth) {
      ++rep.skipped;
      continue;
    }
    ++rep.checked;
    const double a = (*analytic[slot.set])[slot.c.param][slot.c.index];
    const double rel = relative_error(a, d.numeric);
    if (rel >= rep.max_rel) {
      rep.max_rel = rel;
      rep.worst = p.name + "[" + std::to_string(slot.c.index) + "] analytic " + std::to_string(a) + " numeric " +
                  std::to_string(d.numeric);
    }
  }
  return rep;
}

// wc * L_c + wr * L_r through encoder and both heads, train-mode batch norm.
struct GlobalProbe {
  GlobalLearner g;
  Tensor images;
  std::vector<int> head_labels;
  std::vector<int> rotation_labels;
  double wc = 1.0;
  double wr = 1.0;

  double loss() const {
    const Tensor h = g.encoder.forward(images, nn::Mode::train);
    const Tensor p = g.category_head.forward(h);
    const Tensor r = g.rotation_head.forward(p);
    return wc * category_loss(p, head_labels) + wr * rotation_loss(r, rotation_labels);
  }

  struct Grads {
    Gradients encoder, category, rotation;
  };

  Grads grads() const {
    nn::Tape tape;
    const Tensor h = g.encoder.forward(images, nn::Mode::train, &tape);
    const Tensor p = g.category_head.forward(h);
    const Tensor r = g.rotation_head.forward(p);
    CrossEntropy lc = softmax_cross_entropy(p, head_labels);
    CrossEntropy lr = softmax_cross_entropy(r, rotation_labels);
    for (double& v : lc.grad.values()) v *= wc;
    for (double& v : lr.grad.values()) v *= wr;
    Grads out{zero_gradients(g.encoder.parameters()), zero_gradients(g.category_head.parameters()),
              zero_gradients(g.rotation_head.parameters())};
    Tensor dp = g.rotation_head.backward(p, lr.grad, out.rotation);
    for (std::size_t i = 0; i < dp.size(); ++i) dp[i] += lc.grad[i];
    g.encoder.backward(g.category_head.backward(h, dp, out.category), tape, out.encoder);
    return out;
  }

  std::uint64_t signature() const {
    nn::Tape tape;
    g.encoder.forward(images, nn::Mode::train, &tape);
    return kink_signature(tape);
  }

  FdReport check(std::size_t wanted, std::uint64_t seed) {
    const Grads a = grads();
    return check_coordinates({&g.encoder.parameters(), &g.category_head.parameters(), &g.rotation_head.parameters()},
                             {&a.encoder, &a.category, &a.rotation}, wanted, seed, [&] { return loss(); },
                             [&] { return signature(); });
  }
};

// Rotation-augmented batch of `n` synthetic training images for a learner.
inline GlobalProbe make_global_probe(const Dataset& ds, const EncoderSpec& spec, std::size_t n, std::uint64_t seed) {
  GlobalProbe probe{GlobalLearner::build(spec, ds.categories_in(Split::train)), {}, {}, {}};
  std::vector<std::size_t> pool = ds.indices_in(Split::train);
  Rng(seed).shuffle(pool);
  pool.resize(n);
  std::vector<int> labels;
  for (std::size_t id : pool) labels.push_back(ds.labels()[id]);
  const RotationBatch rb = augment_rotations(ds.gather(pool), labels);
  probe.images = rb.images;
  probe.head_labels = probe.g.head_labels(rb.category_labels);
  probe.rotation_labels = rb.rotation_labels;
  return probe;
}

// Stage-2 objective as a function of the student's parameters.
struct MetaProbe {
  Encoder teacher;
  Encoder student;
  Episode episode;
  MetaObjectiveOptions opt;
  nn::Mode mode = nn::Mode::train;

  double loss() const { return meta_loss_and_gradients(teacher, student, episode, opt, mode).objective.total; }

  std::uint64_t signature() const {
    nn::Tape tape;
    student.forward(concat_rows(episode.support_images, episode.query_images), mode, &tape);
    return kink_signature(tape);
  }

  FdReport check(std::size_t wanted, std::uint64_t seed) {
    const Gradients a = meta_loss_and_gradients(teacher, student, episode, opt, mode).grads;
    return check_coordinates({&student.parameters()}, {&a}, wanted, seed, [&] { return loss(); },
                             [&] { return signature(); });
  }
};

}  // namespace grdd::testing
