#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "helpers.hpp"
#include "mdts/model.hpp"
#include "mdts/training.hpp"

using namespace mdts;
using mdts::testing::full;
using mdts::testing::make_domain;

namespace {

class ModelTest : public ::testing::Test {
 protected:
  void SetUp() override {
    model = mdts::testing::tiny_model<double>(96, 3);
    Rng rng(4);
    model.registry.register_domain(*make_domain("d", 3), rng);
    model.registry.register_domain(*make_domain("other", 2), rng);
    Rng data(5);
    sample = full(normal_matrix<double>(2, 96, 1.0, data));
  }

  SampleInput input(const PreparedSample& s, Eigen::Index padded = 0) {
    return SampleInput{&s, "d", {0, 2}, padded};
  }

  MaskPlan plan(std::uint64_t seed = 6, Eigen::Index rows = 2) {
    Rng rng(seed);
    return random_mask(rows, 4, 0.5, rng);
  }

  Model<double> model;
  PreparedSample sample;
};

Matrix<double> encoded(Model<double>& m, const SampleInput& in, const MaskPlan& p) {
  ad::Tape<double> t(false);
  auto g = m.reconstruct(t, in, p);
  return t.value(g.encoded);
}

}  // namespace

TEST_F(ModelTest, ForwardIsDeterministic) {
  const auto p = plan();
  EXPECT_EQ(model.forward_reconstruct(input(sample), p), model.forward_reconstruct(input(sample), p));
}

TEST_F(ModelTest, OutputShapeForAnyGrid) {
  for (Eigen::Index len : {24, 48, 96, 192}) {
    Rng rng(static_cast<std::uint64_t>(len));
    const PreparedSample s = full(normal_matrix<double>(2, len, 1.0, rng));
    const auto p = random_mask(2, len / 24, 0.3, rng);
    const auto out = model.forward_reconstruct(input(s), p);
    EXPECT_EQ(out.rows(), 2);
    EXPECT_EQ(out.cols(), len);
    EXPECT_TRUE(out.allFinite());
  }
}

TEST_F(ModelTest, BatchPaddingVariatesChangeNothing) {
  const auto p = plan();
  Rng rng(7);
  MaskPlan p3 = p;
  p3.visible.conservativeResize(3, 4);
  p3.visible.row(2).setConstant(true);  // visibility of padded rows is irrelevant
  const auto a = model.forward_reconstruct(input(sample), p);
  const auto b = model.forward_reconstruct(input(sample, 3), p3);
  ASSERT_EQ(b.rows(), 3);
  EXPECT_EQ(b.topRows(2), a);
  EXPECT_TRUE(b.row(2).isZero());
  EXPECT_EQ(encoded(model, input(sample), p), encoded(model, input(sample, 3), p3));
  const auto la = reconstruction_step(model, input(sample), p, 0.1, false).loss;
  const auto lb = reconstruction_step(model, input(sample, 3), p3, 0.1, false).loss;
  EXPECT_EQ(la.total, lb.total);
  EXPECT_EQ(la.mse, lb.mse);
  EXPECT_EQ(la.ncc, lb.ncc);
}

TEST_F(ModelTest, TemporalZeroPadChangesNothing) {
  // A 48-point series on its own grid versus zero-padded into a 96-point grid.
  Rng rng(8);
  const PreparedSample short_s = full(normal_matrix<double>(2, 48, 1.0, rng));
  PreparedSample padded = full(Matrix<double>::Zero(2, 96));
  padded.values.leftCols(48) = short_s.values;
  for (int t = 48; t < 96; ++t) padded.time_validity[static_cast<std::size_t>(t)] = false;
  MaskPlan ps = random_mask(2, 2, 0.5, rng);
  MaskPlan pp = prefix_mask(2, 4, 4);
  pp.visible.leftCols(2) = ps.visible;
  const auto a = model.forward_reconstruct(input(short_s), ps);
  const auto b = model.forward_reconstruct(input(padded), pp);
  EXPECT_EQ(b.leftCols(48), a);
  EXPECT_TRUE(b.rightCols(48).isZero());
  EXPECT_EQ(encoded(model, input(short_s), ps), encoded(model, input(padded), pp));
  const auto la = reconstruction_step(model, input(short_s), ps, 0.1, false).loss;
  const auto lb = reconstruction_step(model, input(padded), pp, 0.1, false).loss;
  EXPECT_EQ(la.total, lb.total);
}

TEST_F(ModelTest, MaskedValuesNeverReachTheOutput) {
  const auto p = plan();
  const auto before = model.forward_reconstruct(input(sample), p);
  PreparedSample perturbed = sample;
  Rng rng(9);
  for (Eigen::Index v = 0; v < 2; ++v)
    for (Eigen::Index t = 0; t < 4; ++t)
      if (!p.visible(v, t)) perturbed.values.row(v).segment(t * 24, 24) = normal_matrix<double>(1, 24, 5.0, rng);
  ASSERT_NE(perturbed.values, sample.values);
  EXPECT_EQ(model.forward_reconstruct(input(perturbed), p), before);
  // The loss target does change.
  EXPECT_NE(reconstruction_step(model, input(perturbed), p, 0.1, false).loss.total,
            reconstruction_step(model, input(sample), p, 0.1, false).loss.total);
}

TEST_F(ModelTest, ExtensionKeepsOldOutputsBitIdentical) {
  const auto p = plan();
  const auto before = model.forward_reconstruct(input(sample), p);
  Rng rng(10);
  model.registry.extend_domain("d", {"x0", "x1", "x2"}, rng);
  EXPECT_EQ(model.forward_reconstruct(input(sample), p), before);
}

TEST_F(ModelTest, TapeFreePipelineMatchesReconstruct) {
  const auto p = plan();
  const std::vector<int> subset{0, 2};
  const auto tokens = assemble(sample, "d", subset, model.registry, model.projector, model.tokeniser());
  const auto enc = model.encode(tokens, p);
  const auto hp = model.insert_mask_tokens(enc, tokens, "d", subset);
  const auto out = model.decode(hp, tokens.validity, tokens.variates);
  const auto ref = model.forward_reconstruct(input(sample), p);
  EXPECT_LT((out - ref).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((enc.h - encoded(model, input(sample), p)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST_F(ModelTest, ZeroResidualBranchesGiveIdentityEncoder) {
  for (auto& b : model.encoder) {
    b.proj.weight.value.setZero();
    b.proj.bias.value.setZero();
    b.fc2.weight.value.setZero();
    b.fc2.bias.value.setZero();
  }
  const auto p = plan();
  const std::vector<int> subset{0, 2};
  const auto tokens = assemble(sample, "d", subset, model.registry, model.projector, model.tokeniser());
  const auto enc = model.encode(tokens, p);
  for (std::size_t i = 0; i < enc.slots.size(); ++i) {
    EXPECT_TRUE(p.visible(enc.slots[i] / 4, enc.slots[i] % 4));
    EXPECT_EQ(enc.h.row(static_cast<Eigen::Index>(i)), tokens.tokens.row(enc.slots[i]));
  }
}

TEST_F(ModelTest, EncoderIsPermutationEquivariant) {
  Rng rng(11);
  const Matrix<double> x = normal_matrix<double>(6, 32, 1.0, rng);
  const std::vector<Eigen::Index> perm{3, 0, 5, 1, 4, 2};
  ad::Tape<double> t(false);
  const Matrix<double> h = t.value(model.run_encoder(t, t.constant(x)));
  const Matrix<double> hp = t.value(model.run_encoder(t, t.gather_rows(t.constant(x), perm)));
  for (std::size_t i = 0; i < perm.size(); ++i)
    EXPECT_LT((hp.row(static_cast<Eigen::Index>(i)) - h.row(perm[i])).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_TRUE(h.allFinite());
  EXPECT_LT(h.rowwise().norm().maxCoeff(), 1e3);
}

TEST_F(ModelTest, AllVisibleGridHasNoMaskToken) {
  const MaskPlan p = prefix_mask(2, 4, 4);
  const std::vector<int> subset{0, 2};
  const auto tokens = assemble(sample, "d", subset, model.registry, model.projector, model.tokeniser());
  const auto enc = model.encode(tokens, p);
  const auto hp = model.insert_mask_tokens(enc, tokens, "d", subset);
  ad::Tape<double> t(false);
  const Matrix<double> adapted = t.value(model.adapter(t, t.constant(enc.h)));
  std::vector<Eigen::Index> slots(8);
  std::iota(slots.begin(), slots.end(), 0);
  const Matrix<double> temporal = temporal_embeddings<double>(4, model.tokeniser());
  const Matrix<double> pos = t.value(model.decoder_positions(t, slots, 4, temporal, "d", subset));
  EXPECT_LT((hp - (adapted + pos)).cwiseAbs().maxCoeff(), 1e-12);
  // Gathering the visible slots back reproduces the adapted rows.
  for (std::size_t i = 0; i < enc.slots.size(); ++i)
    EXPECT_LT((hp.row(enc.slots[i]) - pos.row(enc.slots[i]) - adapted.row(static_cast<Eigen::Index>(i))).cwiseAbs().maxCoeff(), 1e-12);
}

TEST_F(ModelTest, AllButOneMaskedGridUsesMaskToken) {
  MaskPlan p = prefix_mask(2, 4, 1);
  p.visible.setConstant(false);
  p.visible(1, 2) = true;
  const std::vector<int> subset{0, 2};
  const auto tokens = assemble(sample, "d", subset, model.registry, model.projector, model.tokeniser());
  const auto enc = model.encode(tokens, p);
  ASSERT_EQ(enc.slots, (std::vector<Eigen::Index>{6}));
  const auto hp = model.insert_mask_tokens(enc, tokens, "d", subset);
  ad::Tape<double> t(false);
  std::vector<Eigen::Index> slots(8);
  std::iota(slots.begin(), slots.end(), 0);
  const Matrix<double> pos =
      t.value(model.decoder_positions(t, slots, 4, temporal_embeddings<double>(4, model.tokeniser()), "d", subset));
  int mask_rows = 0;
  for (Eigen::Index s = 0; s < 8; ++s)
    if ((hp.row(s) - pos.row(s) - model.mask_token.value).cwiseAbs().maxCoeff() < 1e-12) ++mask_rows;
  EXPECT_EQ(mask_rows, 7);
}

TEST_F(ModelTest, ZeroHeadGivesBiasBroadcast) {
  model.head.weight.value.setZero();
  Rng rng(12);
  model.head.bias.value = normal_matrix<double>(1, 24, 1.0, rng);
  const auto out = model.forward_reconstruct(input(sample), plan());
  for (Eigen::Index v = 0; v < 2; ++v)
    for (Eigen::Index t = 0; t < 4; ++t) EXPECT_EQ(out.row(v).segment(t * 24, 24), model.head.bias.value);
}

TEST_F(ModelTest, EveryUsedParameterGetsGradient) {
  const auto r = reconstruction_step(model, input(sample), plan(), 0.1, true);
  model.visit([&](const std::string& name, ad::Parameter<double>& p) {
    auto it = r.grads.find(&p);
    if (name == "registry/other") {
      EXPECT_EQ(it, r.grads.end());
      return;
    }
    ASSERT_NE(it, r.grads.end()) << name;
    EXPECT_GT(it->second.cwiseAbs().maxCoeff(), 0.0) << name;
  });
}

TEST_F(ModelTest, VariateEmbeddingGradientMatchesFiniteDifferences) {
  const auto p = plan();
  const auto r = reconstruction_step(model, input(sample), p, 0.1, true);
  auto& table = model.registry.at("d").table;
  const Matrix<double> g = r.grads.at(&table);
  const double h = 1e-3;
  for (Eigen::Index i = 0; i < table.value.size(); ++i) {
    double& x = table.value.data()[i];
    const double x0 = x;
    x = x0 + h;
    const double up = reconstruction_step(model, input(sample), p, 0.1, false).loss.total;
    x = x0 - h;
    const double down = reconstruction_step(model, input(sample), p, 0.1, false).loss.total;
    x = x0;
    const double fd = (up - down) / (2 * h);
    if (i / table.value.cols() == 1) {
      EXPECT_EQ(g.data()[i], 0.0);  // row 1 is not in the subset
      continue;
    }
    EXPECT_NEAR(g.data()[i], fd, 1e-3 * std::max(std::abs(fd), 1e-2));
  }
}

TEST_F(ModelTest, RejectsMismatchedInputs) {
  Rng rng(1);
  EXPECT_THROW(model.forward_reconstruct(input(sample), random_mask(2, 3, 0.5, rng)), std::invalid_argument);
  SampleInput bad{&sample, "d", {0}, 0};
  EXPECT_THROW(model.forward_reconstruct(bad, plan()), std::invalid_argument);
  SampleInput unknown{&sample, "nope", {0, 1}, 0};
  EXPECT_THROW(model.forward_reconstruct(unknown, plan()), std::out_of_range);
}

TEST(ParameterDepth, Groups) {
  EXPECT_EQ(parameter_depth("tok/proj/conv/weight", 4), 0);
  EXPECT_EQ(parameter_depth("registry/eeg", 4), 0);
  EXPECT_EQ(parameter_depth("encoder/0/qkv/weight", 4), 1);
  EXPECT_EQ(parameter_depth("encoder/3/fc2/bias", 4), 4);
  EXPECT_EQ(parameter_depth("encoder/11/fc2/bias", 12), 12);
  EXPECT_EQ(parameter_depth("decoder/mask_token", 4), 5);
  EXPECT_EQ(parameter_depth("head/linear/weight", 4), 5);
}

TEST(ModelConfig, Variants) {
  EXPECT_EQ(ModelConfig::base().encoder.dim, 192);
  EXPECT_EQ(ModelConfig::base().encoder.layers, 12);
  EXPECT_EQ(ModelConfig::large().encoder.dim, 384);
  EXPECT_EQ(ModelConfig::huge().encoder.layers, 24);
  EXPECT_EQ(ModelConfig::base().tokeniser().patches(), 42);
  EXPECT_THROW(ModelConfig::variant_named("giant"), std::invalid_argument);
}
