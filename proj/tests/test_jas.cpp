// Dynamic alignment towers: order awareness, zero-residual growth, fusion.

#include <gtest/gtest.h>

#include "dfer/gradcheck.hpp"
#include "dfer/jas.hpp"
#include "dfer/optim.hpp"

using namespace dfer;

namespace {

template <class Real>
Var<Real> random_seq(std::int64_t L, std::int64_t D, std::uint64_t seed, bool rg = false) {
  Tensor<Real> t(Shape{L, D});
  Rng rng(seed);
  t.fill_gaussian(rng, 0.0, 1.0);
  return Var<Real>::leaf(std::move(t), rg);
}

template <class Real>
Var<Real> swap_rows(const Var<Real>& seq, std::int64_t a, std::int64_t b) {
  Tensor<Real> t = seq.value();
  for (std::int64_t j = 0; j < t.shape[1]; ++j) std::swap(t.at(a, j), t.at(b, j));
  return Var<Real>::leaf(std::move(t), false);
}

}  // namespace

namespace {

// What a freshly built zero-residual tower computes, assembled from the same
// primitive ops: row-normalize, pool with the readout ramp, normalize the
// pooled vector. Blocks are exact identities and the output head starts at
// (identity, zero), so nothing else contributes.
Var<float> closed_form_readout(const Var<float>& seq) {
  const std::int64_t L = seq.shape()[0];
  const std::int64_t D = seq.shape()[1];
  auto unit = [&] {
    Tensor<float> g(Shape{D});
    for (float& v : g.data) v = 1.0f;
    return Var<float>::constant(std::move(g));
  };
  auto zero = [&] { return Var<float>::constant(Tensor<float>::zeros(Shape{D})); };
  Var<float> x = layer_norm(seq, unit(), zero());
  Tensor<float> w(Shape{1, L});
  double wabs = 0;
  for (std::int64_t t = 0; t < L; ++t) {
    const double wt = readout_weight(t, L);
    w.at(0, t) = static_cast<float>(wt);
    wabs += std::abs(wt);
  }
  Var<float> pooled = scale(matmul(Var<float>::constant(std::move(w)), x), 1.0 / wabs);
  return mean_axis(layer_norm(pooled, unit(), zero()), 0);
}

}  // namespace

TEST(Tower, FreshZeroResidualIsNormalizedTrendReadout) {
  // With positions disabled, a fresh zero-residual tower reduces exactly to
  // the closed form: identity blocks pass the normalized rows through, the
  // ramp pools them, the head only renormalizes.
  auto de = DynamicEncoder<float>::fresh(Modality::video, 8, 2, 2, TowerInit::zero_residual, 3);
  de.use_positions = false;
  auto seq = random_seq<float>(5, 8, 7);
  auto out = de.encode(seq, Modality::video);
  ASSERT_EQ(out.shape(), (Shape{8}));
  EXPECT_TRUE(bitwise_equal(out.value(), closed_form_readout(seq).value()));
}

TEST(Tower, PositionalScaffoldCancelsInReadout) {
  // The positional code is input-independent, so its (linear) readout is
  // subtracted back out before normalization. Through identity blocks the
  // cancellation is exact up to float summation order: enabling positions
  // must not move the readout beyond rounding noise.
  auto de = DynamicEncoder<float>::fresh(Modality::video, 8, 2, 2, TowerInit::zero_residual, 3);
  auto seq = random_seq<float>(5, 8, 7);
  auto with_pos = de.encode(seq, Modality::video);
  de.use_positions = false;
  auto without = de.encode(seq, Modality::video);
  ASSERT_EQ(with_pos.shape(), without.shape());
  for (std::int64_t d = 0; d < 8; ++d)
    EXPECT_NEAR(with_pos.value()[d], without.value()[d], 5e-5) << "dim " << d;
}

TEST(Tower, ReadoutRampAloneDetectsOrder) {
  // Order awareness does not depend on positions or trained weights: the
  // ramp weights rows by index, so swapping two rows moves the output even
  // through identity blocks with positions off.
  auto de = DynamicEncoder<float>::fresh(Modality::video, 8, 2, 1, TowerInit::zero_residual, 3);
  de.use_positions = false;
  auto seq = random_seq<float>(6, 8, 11);
  auto out1 = de.encode(seq, Modality::video);
  auto out2 = de.encode(swap_rows(seq, 0, 5), Modality::video);
  EXPECT_FALSE(bitwise_equal(out1.value(), out2.value()));
}

TEST(Tower, PositionsMakeOrderMatter) {
  auto de = DynamicEncoder<float>::fresh(Modality::video, 8, 2, 2, TowerInit::random, 3);
  auto seq = random_seq<float>(6, 8, 11);
  auto out1 = de.encode(seq, Modality::video);
  auto out2 = de.encode(swap_rows(seq, 1, 4), Modality::video);
  EXPECT_FALSE(bitwise_equal(out1.value(), out2.value()));
}

TEST(Tower, TagValidation) {
  auto de = DynamicEncoder<float>::fresh(Modality::text, 8, 2, 1, TowerInit::zero_residual, 3);
  auto seq = random_seq<float>(4, 8, 5);
  EXPECT_THROW(de.encode(seq, Modality::video), ConfigError);
  auto joint = DynamicEncoder<float>::fresh(Modality::joint, 8, 2, 2, TowerInit::zero_residual, 3);
  EXPECT_THROW(joint.encode(seq, Modality::joint), ConfigError);
  auto bad = random_seq<float>(4, 16, 5);
  EXPECT_THROW(de.encode(bad, Modality::text), ShapeError);
}

TEST(Tower, GrowthPreservesFunctionExactly) {
  auto de = DynamicEncoder<float>::fresh(Modality::video, 8, 2, 2, TowerInit::random, 17);
  auto seq = random_seq<float>(7, 8, 19);
  auto before = de.encode(seq, Modality::video);
  const std::size_t params_before = de.params.params.size();
  de.grow_layers(2, 23);
  EXPECT_EQ(de.depth(), 4);
  EXPECT_EQ(de.params.params.size(), params_before + 32);  // 16 tensors per block
  auto after = de.encode(seq, Modality::video);
  EXPECT_TRUE(bitwise_equal(before.value(), after.value()));
}

TEST(Tower, GrownLayersInheritTrainability) {
  auto de = DynamicEncoder<float>::fresh(Modality::video, 8, 2, 1, TowerInit::zero_residual, 3);
  de.params.set_trainable(true);
  de.grow_layers(1, 5);
  EXPECT_TRUE(de.params.find("layer1/wq")->requires_grad());
  // grown weights are live immediately: the upstream half of the new block
  // is random, so gradients can flow into it on the next step.
  EXPECT_FALSE(bitwise_equal(de.params.find("layer1/wq")->value(),
                             Tensor<float>::zeros(Shape{8, 8})));
  EXPECT_TRUE(bitwise_equal(de.params.find("layer1/wo")->value(),
                            Tensor<float>::zeros(Shape{8, 8})));
}

TEST(Fuse, JointTowerReproducesVideoTowerAtFusion) {
  auto text = DynamicEncoder<float>::fresh(Modality::text, 8, 2, 2, TowerInit::random, 29);
  auto video = DynamicEncoder<float>::fresh(Modality::video, 8, 2, 2, TowerInit::random, 31);
  auto joint = fuse(text, video, 4, 37);
  EXPECT_EQ(joint.depth(), 4);
  EXPECT_EQ(joint.params.name, "jas");
  auto seq = random_seq<float>(5, 8, 41);
  auto via_video = video.encode(seq, Modality::video);
  auto via_joint = joint.encode(seq, Modality::video);
  EXPECT_TRUE(bitwise_equal(via_video.value(), via_joint.value()));
  // zero modality embeddings: text tag initially computes the same map
  auto via_text_tag = joint.encode(seq, Modality::text);
  EXPECT_TRUE(bitwise_equal(via_joint.value(), via_text_tag.value()));
}

TEST(Fuse, ClonesAreIndependentOfSourceTower) {
  auto text = DynamicEncoder<float>::fresh(Modality::text, 8, 2, 2, TowerInit::random, 29);
  auto video = DynamicEncoder<float>::fresh(Modality::video, 8, 2, 2, TowerInit::random, 31);
  const std::string video_hash = group_sha256(video.params);
  auto joint = fuse(text, video, 4, 37);
  joint.params.set_trainable(true);
  auto seq = random_seq<float>(5, 8, 43);
  auto loss = sum(reshape(joint.encode(seq, Modality::video), Shape{1, 8}));
  GradMap<float> gm = grad(loss);
  sgd_momentum_step(joint.params, gm, 0.1, 0.0);
  EXPECT_EQ(group_sha256(video.params), video_hash);
  EXPECT_NE(group_sha256(joint.params), video_hash);
}

TEST(Fuse, ModalityEmbeddingsSeparateTagsOnceTrained) {
  auto text = DynamicEncoder<float>::fresh(Modality::text, 8, 2, 2, TowerInit::random, 29);
  auto video = DynamicEncoder<float>::fresh(Modality::video, 8, 2, 2, TowerInit::random, 31);
  auto joint = fuse(text, video, 4, 37);
  joint.mod_text.mutable_value()[0] = 0.5f;
  auto seq = random_seq<float>(5, 8, 47);
  EXPECT_FALSE(bitwise_equal(joint.encode(seq, Modality::text).value(),
                             joint.encode(seq, Modality::video).value()));
}

TEST(Fuse, RejectsWidthMismatch) {
  auto text = DynamicEncoder<float>::fresh(Modality::text, 8, 2, 2, TowerInit::random, 29);
  auto video = DynamicEncoder<float>::fresh(Modality::video, 16, 2, 2, TowerInit::random, 31);
  EXPECT_THROW(fuse(text, video, 4, 1), ConfigError);
}

TEST(Fuse, SeedDeterminesFreshTail) {
  auto text = DynamicEncoder<float>::fresh(Modality::text, 8, 2, 2, TowerInit::random, 29);
  auto video = DynamicEncoder<float>::fresh(Modality::video, 8, 2, 2, TowerInit::random, 31);
  auto j1 = fuse(text, video, 4, 37);
  auto j2 = fuse(text, video, 4, 37);
  auto j3 = fuse(text, video, 4, 38);
  EXPECT_EQ(group_sha256(j1.params), group_sha256(j2.params));
  EXPECT_NE(group_sha256(j1.params), group_sha256(j3.params));
}

TEST(Tower, GradientsMatchFiniteDifferences) {
  auto de = DynamicEncoder<double>::fresh(Modality::video, 8, 2, 1, TowerInit::random, 53);
  de.params.set_trainable(true);
  auto seq = random_seq<double>(4, 8, 59, true);
  std::vector<std::pair<std::string, Var<double>>> params = de.params.params;
  params.emplace_back("seq", seq);
  auto make_loss = [&] {
    auto f = de.encode(seq, Modality::video);
    return scale(sum(matmul(reshape(f, Shape{1, 8}), reshape(f, Shape{8, 1}))), 1.0 / 8.0);
  };
  FdOptions opt;
  opt.h = 1e-4;
  opt.samples_per_param = 3;
  FdReport rep = finite_diff_check<double>(make_loss, params, opt, Rng(61));
  EXPECT_GT(rep.coords_checked, 30);
  EXPECT_LT(rep.max_rel_err, 1e-4) << rep.worst_param << "[" << rep.worst_index << "]";
}
