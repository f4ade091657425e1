#include <gtest/gtest.h>

#include <random>

#include "grdd/checkpoint.hpp"
#include "grdd/encoders.hpp"
#include "test_support.hpp"

using namespace grdd;
using grdd::testing::central_difference;
using grdd::testing::checked_difference;
using grdd::testing::kink_signature;
using grdd::testing::relative_error;
using grdd::testing::TempDir;
using grdd::testing::random_images;
using grdd::testing::random_like;
using grdd::testing::dot;
using grdd::testing::pick_coordinates;

namespace {

// Weighted-sum loss sum(w * encoder(x)) and its analytic gradient.
struct EncoderProbe {
  Encoder enc;
  Tensor images;
  Tensor weights;
  nn::Mode mode;

  double loss() const { return dot(enc.forward(images, mode), weights); }

  Gradients grads(Tensor* dimages = nullptr) const {
    nn::Tape tape;
    enc.forward(images, mode, &tape);
    Gradients g = zero_gradients(enc.parameters());
    Tensor dx = enc.backward(weights, tape, g);
    if (dimages) *dimages = std::move(dx);
    return g;
  }

  std::uint64_t signature() const {
    nn::Tape tape;
    enc.forward(images, mode, &tape);
    return kink_signature(tape);
  }
};

// Checks `wanted` random coordinates whose centered difference does not
// straddle a kink; coordinates that do are skipped and replaced.
void check_encoder_gradients(EncoderProbe probe, std::size_t wanted, double tol, std::uint64_t seed) {
  const Gradients g = probe.grads();
  std::size_t checked = 0;
  for (const auto& c : pick_coordinates(probe.enc.parameters(), 4 * wanted, seed)) {
    if (checked == wanted) break;
    double* x = &probe.enc.parameters()[c.param].value[c.index];
    const auto d = checked_difference(x, [&] { return probe.loss(); }, [&] { return probe.signature(); });
    if (!d.smooth) continue;
    ++checked;
    const double analytic = g[c.param][c.index];
    EXPECT_LT(relative_error(analytic, d.numeric), tol)
        << probe.enc.parameters()[c.param].name << "[" << c.index << "] analytic " << analytic << " numeric "
        << d.numeric;
  }
  EXPECT_EQ(checked, wanted);
}

template <class Layer>
void check_layer_gradients(const Layer& layer, ParameterSet params, Tensor x, nn::Mode mode, double tol,
                           std::uint64_t seed) {
  nn::Cache probe_cache;
  const Tensor y = layer.forward(params, x, mode, &probe_cache);
  const Tensor w = random_like(y.shape(), seed);
  auto loss = [&] { return dot(layer.forward(params, x, mode, nullptr), w); };

  nn::Cache cache;
  layer.forward(params, x, mode, &cache);
  Gradients g = zero_gradients(params);
  const Tensor dx = layer.backward(params, w, cache, g);

  auto signature = [&] {
    nn::Cache c;
    layer.forward(params, x, mode, &c);
    return kink_signature(c);
  };
  Rng rng(seed + 1);
  std::size_t checked = 0;
  for (int k = 0; k < 60 && checked < 12; ++k) {
    const std::size_t i = rng.below(x.size());
    const auto d = checked_difference(&x[i], loss, signature);
    if (!d.smooth) continue;
    ++checked;
    EXPECT_LT(relative_error(dx[i], d.numeric), tol) << "input[" << i << "]";
  }
  EXPECT_EQ(checked, 12u);
  checked = 0;
  for (const auto& c : pick_coordinates(params, 60, seed + 2)) {
    if (checked == 12 || params.size() == 0) break;
    const auto d = checked_difference(&params[c.param].value[c.index], loss, signature);
    if (!d.smooth) continue;
    ++checked;
    EXPECT_LT(relative_error(g[c.param][c.index], d.numeric), tol) << params[c.param].name << "[" << c.index << "]";
  }
  if (params.scalar_count() > 0) {
    EXPECT_EQ(checked, std::min<std::size_t>(12, params.scalar_count()));
  }
}

}  // namespace

TEST(BuildEncoder, SameSeedIsBitIdentical) {
  const EncoderSpec spec{Architecture::tiny, {16, 16, 1}, 5, Pooling::global_average};
  EXPECT_TRUE(Encoder::build(spec).parameters() == Encoder::build(spec).parameters());
  EncoderSpec other = spec;
  other.seed = 6;
  EXPECT_FALSE(Encoder::build(spec).parameters() == Encoder::build(other).parameters());
}

TEST(BuildEncoder, ParameterLayoutDependsOnlyOnArchitectureAndShape) {
  for (Architecture a : {Architecture::tiny, Architecture::convnet4, Architecture::resnet12}) {
    const Encoder e1 = build_encoder(a, {32, 32, 3}, 1);
    const Encoder e2 = build_encoder(a, {32, 32, 3}, 2);
    ASSERT_EQ(e1.parameters().size(), e2.parameters().size());
    for (std::size_t i = 0; i < e1.parameters().size(); ++i) {
      EXPECT_EQ(e1.parameters()[i].name, e2.parameters()[i].name);
      EXPECT_EQ(e1.parameters()[i].value.shape(), e2.parameters()[i].value.shape());
    }
  }
}

TEST(BuildEncoder, ConvNet4EmbeddingWidths) {
  // 84 -> 42 -> 21 -> 10 -> 5 after four 2x2 pools; 5 * 5 * 64 = 1600.
  EXPECT_EQ(embedding_dim(Architecture::convnet4, {84, 84, 3}, Pooling::flatten), 1600u);
  EXPECT_EQ(embedding_dim(Architecture::convnet4, {84, 84, 3}, Pooling::global_average), 64u);
  EXPECT_EQ(build_encoder(Architecture::convnet4, {84, 84, 3}, 0, Pooling::flatten).embed_dim(), 1600u);
}

TEST(BuildEncoder, ResNet12Widths) {
  const Encoder e = build_encoder(Architecture::resnet12, {16, 16, 3}, 0);
  EXPECT_EQ(e.embed_dim(), 640u);
  EXPECT_TRUE(e.parameters().find("encoder.stage3.conv_c.weight").has_value());
  EXPECT_EQ(e.parameters().find("encoder.stage1.shortcut.weight").has_value(), true);
}

TEST(BuildEncoder, ParameterNamesFollowModuleLayerParam) {
  const Encoder e = build_encoder(Architecture::tiny, {8, 8, 1}, 0);
  std::vector<std::string> names;
  for (const auto& p : e.parameters()) names.push_back(p.name);
  EXPECT_EQ(names, (std::vector<std::string>{
                       "encoder.block0.conv.weight", "encoder.block0.conv.bias", "encoder.block0.bn.gamma",
                       "encoder.block0.bn.beta", "encoder.block0.bn.running_mean", "encoder.block0.bn.running_var",
                       "encoder.block1.conv.weight", "encoder.block1.conv.bias", "encoder.block1.bn.gamma",
                       "encoder.block1.bn.beta", "encoder.block1.bn.running_mean", "encoder.block1.bn.running_var"}));
}

TEST(BuildEncoder, InputTooSmallForPyramid) {
  EXPECT_THROW(build_encoder(Architecture::convnet4, {8, 8, 1}, 0), ShapeError);
  EXPECT_THROW(build_encoder(Architecture::tiny, {3, 3, 1}, 0), ShapeError);
  EXPECT_NO_THROW(build_encoder(Architecture::tiny, {4, 4, 1}, 0));
}

TEST(BuildEncoder, HeInitIsBoundedByFanIn) {
  const Encoder e = build_encoder(Architecture::tiny, {8, 8, 3}, 0);
  const Tensor& w = e.parameters()[0].value;
  const double bound = std::sqrt(6.0 / (3.0 * 3.0 * 3.0));
  double mx = 0;
  for (double v : w.values()) mx = std::max(mx, std::abs(v));
  EXPECT_LE(mx, bound);
  EXPECT_GT(mx, 0.5 * bound);
}

TEST(EncoderForward, TinyBatchShape) {
  const Encoder e = build_encoder(Architecture::tiny, {16, 16, 1}, 0);
  for (nn::Mode m : {nn::Mode::train, nn::Mode::eval}) {
    const Tensor out = e.forward(random_images(7, {16, 16, 1}, 1), m);
    EXPECT_EQ(out.shape(), (std::vector<std::size_t>{7, e.embed_dim()}));
    EXPECT_TRUE(out.all_finite());
  }
}

TEST(EncoderForward, ZeroInputGivesZeroEmbedding) {
  const Encoder e = build_encoder(Architecture::tiny, {8, 8, 1}, 3);
  for (nn::Mode m : {nn::Mode::train, nn::Mode::eval}) {
    const Tensor out = e.forward(Tensor({2, 8, 8, 1}), m);
    for (double v : out.values()) EXPECT_EQ(v, 0.0);
  }
}

TEST(EncoderForward, RegressionPinnedEvalOutput) {
  // A constant image through fresh weights; pinned so silent changes to the
  // layer arithmetic or the initializer show up.
  const Encoder e = build_encoder(Architecture::tiny, {4, 4, 1}, 0);
  Tensor x({1, 4, 4, 1}, 0.5);
  const Tensor a = e.forward(x, nn::Mode::eval);
  EXPECT_TRUE(a == e.forward(x, nn::Mode::eval));
  double sum = 0;
  for (double v : a.values()) sum += v;
  EXPECT_NEAR(sum, 11.989777196564338, 1e-12);
  EXPECT_NEAR(a[0], 0.83383987873605014, 1e-12);
  EXPECT_NEAR(a[5], 0.14136650469532466, 1e-12);
}

TEST(EncoderForward, WrongShapeRejected) {
  const Encoder e = build_encoder(Architecture::tiny, {8, 8, 1}, 0);
  EXPECT_THROW(e.forward(Tensor({1, 8, 8, 3}), nn::Mode::eval), ShapeError);
  EXPECT_THROW(e.forward(Tensor({1, 6, 8, 1}), nn::Mode::eval), ShapeError);
}

TEST(EncoderForward, DuplicatedRowsGiveDuplicatedEmbeddings) {
  const Encoder e = build_encoder(Architecture::tiny, {8, 8, 1}, 0);
  const Tensor x = random_images(3, {8, 8, 1}, 2);
  const Tensor once = e.forward(x, nn::Mode::eval);
  const Tensor twice = e.forward(concat_rows(x, x), nn::Mode::eval);
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t k = 0; k < e.embed_dim(); ++k) {
      EXPECT_EQ(twice.at(r, k), once.at(r, k));
      EXPECT_EQ(twice.at(r + 3, k), once.at(r, k));
    }
  }
}

TEST(EncoderForward, PermutingRowsPermutesOutputs) {
  const Encoder e = build_encoder(Architecture::tiny, {8, 8, 2}, 4);
  const Tensor x = random_images(5, {8, 8, 2}, 3);
  const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
  Tensor px({5, 8, 8, 2});
  for (std::size_t r = 0; r < 5; ++r) std::copy(x.row(perm[r]).begin(), x.row(perm[r]).end(), px.row(r).begin());
  for (nn::Mode m : {nn::Mode::train, nn::Mode::eval}) {
    const Tensor out = e.forward(x, m);
    const Tensor pout = e.forward(px, m);
    for (std::size_t r = 0; r < 5; ++r) {
      for (std::size_t k = 0; k < e.embed_dim(); ++k) EXPECT_NEAR(pout.at(r, k), out.at(perm[r], k), 1e-12);
    }
  }
}

TEST(EncoderForward, ForwardDoesNotTouchParameters) {
  const Encoder e = build_encoder(Architecture::tiny, {8, 8, 1}, 0);
  const std::uint64_t before = e.parameters().hash();
  nn::Tape tape;
  e.forward(random_images(4, {8, 8, 1}, 1), nn::Mode::train, &tape);
  EXPECT_EQ(e.parameters().hash(), before);
}

TEST(EncoderGradients, TinyTrainModeMatchesFiniteDifferences) {
  EncoderProbe p{build_encoder(Architecture::tiny, {8, 8, 1}, 11), random_images(3, {8, 8, 1}, 12), {}, nn::Mode::train};
  p.weights = random_like({3, p.enc.embed_dim()}, 13);
  check_encoder_gradients(p, 30, 1e-4, 14);
}

TEST(EncoderGradients, TinyEvalModeMatchesFiniteDifferences) {
  EncoderProbe p{build_encoder(Architecture::tiny, {8, 8, 2}, 21), random_images(2, {8, 8, 2}, 22), {}, nn::Mode::eval};
  p.weights = random_like({2, p.enc.embed_dim()}, 23);
  check_encoder_gradients(p, 30, 1e-4, 24);
}

TEST(EncoderGradients, MeanEmbeddingGradient) {
  EncoderProbe p{build_encoder(Architecture::tiny, {8, 8, 1}, 31), random_images(4, {8, 8, 1}, 32), {}, nn::Mode::train};
  p.weights = Tensor({4, p.enc.embed_dim()}, 1.0 / static_cast<double>(4 * p.enc.embed_dim()));
  check_encoder_gradients(p, 20, 1e-4, 33);
}

TEST(EncoderGradients, FlattenPoolingMatchesFiniteDifferences) {
  EncoderProbe p{build_encoder(Architecture::tiny, {8, 8, 1}, 41, Pooling::flatten), random_images(2, {8, 8, 1}, 42),
                 {}, nn::Mode::train};
  p.weights = random_like({2, p.enc.embed_dim()}, 43);
  check_encoder_gradients(p, 20, 1e-4, 44);
}

TEST(EncoderGradients, InputGradientMatchesFiniteDifferences) {
  EncoderProbe p{build_encoder(Architecture::tiny, {8, 8, 1}, 51), random_images(2, {8, 8, 1}, 52), {}, nn::Mode::train};
  p.weights = random_like({2, p.enc.embed_dim()}, 53);
  Tensor dx;
  p.grads(&dx);
  Rng rng(54);
  std::size_t checked = 0;
  for (int k = 0; k < 100 && checked < 20; ++k) {
    const std::size_t i = rng.below(p.images.size());
    const auto d = checked_difference(&p.images[i], [&] { return p.loss(); }, [&] { return p.signature(); });
    if (!d.smooth) continue;
    ++checked;
    EXPECT_LT(relative_error(dx[i], d.numeric), 1e-4) << "pixel " << i;
  }
  EXPECT_EQ(checked, 20u);
}

TEST(LayerGradients, Conv2d) {
  ParameterSet ps;
  Rng rng(1);
  const auto conv = nn::Conv2d::create(ps, "c", 2, 3, 3, rng);
  check_layer_gradients(conv, ps, random_like({2, 5, 5, 2}, 2), nn::Mode::train, 1e-6, 3);
}

TEST(LayerGradients, BatchNormTrainAndEval) {
  ParameterSet ps;
  const auto bn = nn::BatchNorm2d::create(ps, "bn", 3);
  ps[0].value = random_like({3}, 4);
  ps[1].value = random_like({3}, 5);
  check_layer_gradients(bn, ps, random_like({2, 3, 3, 3}, 6), nn::Mode::train, 1e-6, 7);
  check_layer_gradients(bn, ps, random_like({2, 3, 3, 3}, 8), nn::Mode::eval, 1e-6, 9);
}

TEST(LayerGradients, LeakyActivationAndPools) {
  const ParameterSet none;
  check_layer_gradients(nn::Activation{0.1}, none, random_like({2, 4, 4, 3}, 10), nn::Mode::train, 1e-6, 11);
  check_layer_gradients(nn::MaxPool2d{}, none, random_like({2, 5, 5, 3}, 12), nn::Mode::train, 1e-6, 13);
  check_layer_gradients(nn::GlobalAvgPool{}, none, random_like({2, 3, 3, 4}, 14), nn::Mode::train, 1e-6, 15);
  check_layer_gradients(nn::Flatten{}, none, random_like({2, 3, 3, 4}, 16), nn::Mode::train, 1e-6, 17);
}

TEST(LayerGradients, ResidualStage) {
  ParameterSet ps;
  Rng rng(20);
  const auto stage = nn::ResidualStage::create(ps, "s", 2, 4, 0.1, rng);
  check_layer_gradients(stage, ps, random_like({2, 4, 4, 2}, 21), nn::Mode::train, 1e-4, 22);
}

TEST(BatchNorm, CommitMovesRunningStatsTowardBatchStats) {
  ParameterSet ps;
  const auto bn = nn::BatchNorm2d::create(ps, "bn", 1);
  Tensor x({1, 2, 2, 1}, {1.0, 2.0, 3.0, 4.0});
  nn::Cache cache;
  bn.forward(ps, x, nn::Mode::train, &cache);
  bn.commit(ps, cache, 0.1);
  EXPECT_NEAR(ps[2].value[0], 0.1 * 2.5, 1e-15);
  // Unbiased variance of {1,2,3,4} is 5/3.
  EXPECT_NEAR(ps[3].value[0], 0.9 * 1.0 + 0.1 * 5.0 / 3.0, 1e-15);
}

TEST(BatchNorm, EvalModeNeverCommits) {
  ParameterSet ps;
  const auto bn = nn::BatchNorm2d::create(ps, "bn", 1);
  nn::Cache cache;
  bn.forward(ps, Tensor({1, 2, 2, 1}, {1.0, 2.0, 3.0, 4.0}), nn::Mode::eval, &cache);
  const std::uint64_t before = ps.hash();
  bn.commit(ps, cache, 0.1);
  EXPECT_EQ(ps.hash(), before);
}

TEST(Encoder, CommitBatchStatsChangesOnlyRunningStatistics) {
  Encoder e = build_encoder(Architecture::tiny, {8, 8, 1}, 0);
  const ParameterSet before = e.parameters();
  nn::Tape tape;
  e.forward(random_images(4, {8, 8, 1}, 1), nn::Mode::train, &tape);
  e.commit_batch_stats(tape);
  for (std::size_t i = 0; i < before.size(); ++i) {
    if (before[i].trainable) {
      EXPECT_TRUE(before[i].value == e.parameters()[i].value) << before[i].name;
    } else {
      EXPECT_FALSE(before[i].value == e.parameters()[i].value) << before[i].name;
    }
  }
}

TEST(Head, ZeroWeightsGiveZeroLogits) {
  Head h = Head::build("h", 3, 2, 0);
  for (auto& p : h.parameters()) p.value.fill(0.0);
  const Tensor out = h.forward(random_like({4, 3}, 1));
  for (double v : out.values()) EXPECT_EQ(v, 0.0);
}

TEST(Head, IdentityWeightPassesFeaturesThrough) {
  Head h = Head::build("h", 2, 2, 0);
  h.parameters()[0].value = Tensor({2, 2}, {1.0, 0.0, 0.0, 1.0});
  const Tensor f = random_like({3, 2}, 2);
  EXPECT_TRUE(h.forward(f) == f);
}

TEST(Head, DimensionMismatch) {
  const Head h = Head::build("h", 3, 2, 0);
  EXPECT_THROW(h.forward(Tensor({1, 4})), ShapeError);
}

TEST(Head, GradientsMatchFiniteDifferences) {
  Head h = Head::build("h", 4, 3, 5);
  h.parameters()[1].value = random_like({3}, 6);
  Tensor f = random_like({5, 4}, 7);
  const Tensor w = random_like({5, 3}, 8);
  auto loss = [&] { return dot(h.forward(f), w); };
  Gradients g = zero_gradients(h.parameters());
  const Tensor df = h.backward(f, w, g);
  for (const auto& c : pick_coordinates(h.parameters(), 15, 9)) {
    const double numeric = central_difference(&h.parameters()[c.param].value[c.index], loss);
    EXPECT_LT(relative_error(g[c.param][c.index], numeric), 1e-4);
  }
  for (std::size_t i = 0; i < f.size(); ++i) {
    const double numeric = central_difference(&f[i], loss);
    EXPECT_LT(relative_error(df[i], numeric), 1e-4);
  }
}

TEST(Checkpoint, RoundTripRestoresEncoderExactly) {
  TempDir tmp("ckpt");
  const Encoder e = build_encoder(Architecture::tiny, {8, 8, 1}, 9);
  CheckpointHeader h{Architecture::tiny, {8, 8, 1}, 9, 2, Pooling::global_average, {{"ablation", "full"}}};
  save_checkpoint(tmp / "e.ckpt", h, {&e.parameters()});
  const Checkpoint ck = load_checkpoint(tmp / "e.ckpt");
  EXPECT_EQ(ck.header.stage, 2);
  EXPECT_EQ(ck.header.tags.at("ablation"), "full");
  EXPECT_TRUE(encoder_from_checkpoint(ck).parameters() == e.parameters());
}

TEST(Checkpoint, CorruptPayloadFailsChecksum) {
  TempDir tmp("ckpt_bad");
  const Encoder e = build_encoder(Architecture::tiny, {8, 8, 1}, 9);
  save_checkpoint(tmp / "e.ckpt", {Architecture::tiny, {8, 8, 1}, 9, 1, Pooling::global_average, {}},
                  {&e.parameters()});
  {
    std::fstream f(tmp / "e.ckpt", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(-20, std::ios::end);
    f.put('\x7f');
  }
  EXPECT_THROW(load_checkpoint(tmp / "e.ckpt"), CheckpointError);
}

TEST(Checkpoint, NotACheckpoint) {
  TempDir tmp("ckpt_junk");
  std::ofstream(tmp / "x.ckpt") << "hello world, definitely not a checkpoint";
  EXPECT_THROW(load_checkpoint(tmp / "x.ckpt"), CheckpointError);
  EXPECT_THROW(load_checkpoint(tmp / "missing.ckpt"), CheckpointError);
}

TEST(Checkpoint, ShapeMismatchIsNamed) {
  TempDir tmp("ckpt_shape");
  const Encoder small = build_encoder(Architecture::tiny, {8, 8, 1}, 0);
  save_checkpoint(tmp / "e.ckpt", {Architecture::tiny, {8, 8, 1}, 0, 1, Pooling::global_average, {}},
                  {&small.parameters()});
  Encoder other = build_encoder(Architecture::tiny, {8, 8, 3}, 0);
  try {
    restore_parameters(load_checkpoint(tmp / "e.ckpt"), other.parameters(), "encoder");
    FAIL() << "expected CheckpointError";
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("encoder.block0.conv.weight"), std::string::npos);
  }
}
