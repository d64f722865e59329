#include <gtest/gtest.h>

#include <cmath>

#include "helpers.hpp"
#include "mdts/tokeniser.hpp"

using namespace mdts;
using mdts::testing::full;
using mdts::testing::make_domain;

namespace {

TokeniserConfig small_config(int context = 72, int patch = 24, int dim = 8) { return {patch, dim, context}; }

}  // namespace

TEST(Patchify, DefaultGridHas42Patches) {
  Rng rng(1);
  const auto p = patchify(full(normal_matrix<double>(2, 1008, 1.0, rng)), 24);
  EXPECT_EQ(p.per_variate, 42);
  EXPECT_EQ(p.rows.rows(), 84);
  EXPECT_EQ(p.rows.cols(), 24);
}

TEST(Patchify, VariateMajorOrderAndExactInverse) {
  Rng rng(2);
  const Matrix<double> x = normal_matrix<double>(3, 12, 1.0, rng);
  const auto p = patchify(full(x), 4);
  for (Eigen::Index v = 0; v < 3; ++v)
    for (Eigen::Index t = 0; t < 3; ++t) EXPECT_EQ(p.rows.row(v * 3 + t), x.row(v).segment(t * 4, 4));
  Matrix<double> back(3, 12);
  for (Eigen::Index v = 0; v < 3; ++v)
    for (Eigen::Index t = 0; t < 3; ++t) back.row(v).segment(t * 4, 4) = p.rows.row(v * 3 + t);
  EXPECT_EQ(back, x);
}

TEST(Patchify, SinglePatchIsWholeSeries) {
  Rng rng(3);
  const Matrix<double> x = normal_matrix<double>(1, 24, 1.0, rng);
  const auto p = patchify(full(x), 24);
  ASSERT_EQ(p.rows.rows(), 1);
  EXPECT_EQ(p.rows, x);
}

TEST(Patchify, ValidityIsAnyRealPoint) {
  PreparedSample s = full(Matrix<double>::Zero(2, 12));
  for (int t = 5; t < 12; ++t) s.time_validity[static_cast<std::size_t>(t)] = false;
  const auto p = patchify(s, 4);
  // Patch 1 covers points 4..7 of which only 4 is real.
  EXPECT_EQ(p.valid, (std::vector<bool>{true, true, false, true, true, false}));
  EXPECT_EQ(token_validity(p, 3), (std::vector<bool>{true, true, false, true, true, false, false, false, false}));
}

TEST(Patchify, RejectsIncompatibleLength) {
  EXPECT_THROW(patchify(full(Matrix<double>::Zero(1, 10)), 4), std::invalid_argument);
}

TEST(Projector, EqualPatchesGiveEqualEmbeddings) {
  Rng rng(4);
  PatchProjector<double> proj(4, 8, rng);
  Matrix<double> rows(3, 4);
  rows.row(0) << 1, 2, 3, 4;
  rows.row(1) << -1, 0, 1, 0;
  rows.row(2) << 1, 2, 3, 4;
  const auto e = embed_patches(rows, proj);
  EXPECT_EQ(e.row(0), e.row(2));
  EXPECT_NE(e.row(0), e.row(1));
}

TEST(Projector, ZeroWeightsGiveFiniteOutput) {
  Rng rng(4);
  PatchProjector<double> proj(4, 8, rng);
  proj.conv.weight.value.setZero();
  proj.conv.bias.value.setZero();
  const auto e = embed_patches(Matrix<double>::Ones(2, 4), proj);
  EXPECT_TRUE(e.allFinite());
  EXPECT_TRUE(e.isZero());  // LN of the zero vector is zero, GELU(0) = 0
}

TEST(Projector, KernelGradientMatchesFiniteDifferences) {
  Rng rng(5);
  PatchProjector<double> proj(2, 6, rng);
  proj.norm.gamma.value = normal_matrix<double>(1, 6, 1.0, rng);
  const Matrix<double> patches = normal_matrix<double>(3, 2, 1.0, rng);  // 3 x 2-point toy
  const Matrix<double> w = normal_matrix<double>(3, 6, 1.0, rng);
  auto value = [&] { return (embed_patches(patches, proj).array() * w.array()).sum(); };
  ad::Tape<double> t(true);
  ad::Var y = proj(t, t.constant(patches));
  t.backward(t.scalar(y, (t.value(y).array() * w.array()).sum(), w));
  const Matrix<double> g = t.gradients().at(&proj.conv.weight);
  const double h = 1e-3;
  for (Eigen::Index i = 0; i < proj.conv.weight.value.size(); ++i) {
    double& k = proj.conv.weight.value.data()[i];
    const double k0 = k;
    k = k0 + h;
    const double up = value();
    k = k0 - h;
    const double down = value();
    k = k0;
    const double fd = (up - down) / (2 * h);
    EXPECT_NEAR(g.data()[i], fd, 1e-4 * std::max(1.0, std::abs(fd)));
  }
}

TEST(Temporal, RowZeroAlternatesZeroOne) {
  const auto m = sinusoidal_table<double>(3, 8);
  for (int i = 0; i < 8; ++i) EXPECT_EQ(m(0, i), i % 2 == 0 ? 0.0 : 1.0);
}

TEST(Temporal, MatchesClosedForm) {
  const auto m = sinusoidal_table<double>(5, 6);
  for (int t = 0; t < 5; ++t)
    for (int i = 0; i < 3; ++i) {
      const double w = std::pow(10000.0, -2.0 * i / 6.0);
      EXPECT_NEAR(m(t, 2 * i), std::sin(t * w), 1e-15);
      EXPECT_NEAR(m(t, 2 * i + 1), std::cos(t * w), 1e-15);
    }
}

TEST(Temporal, NativeLengthIsExactTable) {
  const auto cfg = small_config(96, 24, 8);
  EXPECT_EQ(temporal_embeddings<double>(4, cfg), sinusoidal_table<double>(4, 8));
  EXPECT_EQ(temporal_embeddings<double>(2, cfg), sinusoidal_table<double>(2, 8));
}

TEST(Temporal, DoubledLengthInterpolatesFourRowTable) {
  const auto cfg = small_config(96, 24, 8);  // T' = 4
  const auto base = sinusoidal_table<double>(4, 8);
  const auto out = temporal_embeddings<double>(8, cfg);
  ASSERT_EQ(out.rows(), 8);
  // Oracle: new row j sits at old position j * 4 / 8 = j / 2.
  for (int j = 0; j < 8; ++j) {
    const double pos = j / 2.0;
    const int lo = static_cast<int>(pos);
    Matrix<double> expect;
    if (lo >= 3) {
      expect = base.row(3);
    } else {
      const double f = pos - lo;
      expect = (1 - f) * base.row(lo) + f * base.row(lo + 1);
    }
    EXPECT_LT((out.row(j) - expect).cwiseAbs().maxCoeff(), 1e-15) << j;
  }
  for (int k = 0; k < 4; ++k) EXPECT_EQ(out.row(2 * k), base.row(k));
}

TEST(Registry, RegisterShapeSeedAndDuplicate) {
  auto d = make_domain("eeg", 19);
  DomainRegistry<double> a(8), b(8);
  Rng r1(3), r2(3);
  a.register_domain(*d, r1);
  b.register_domain(*d, r2);
  EXPECT_EQ(a.at("eeg").table.value.rows(), 19);
  EXPECT_EQ(a.at("eeg").table.value.cols(), 8);
  EXPECT_EQ(a.at("eeg").table.value, b.at("eeg").table.value);
  EXPECT_THROW(a.register_domain(*d, r1), std::invalid_argument);
  EXPECT_THROW(a.at("ecg"), std::out_of_range);
}

TEST(Registry, ExtendIsConservative) {
  auto d = make_domain("eeg", 19);
  DomainRegistry<double> reg(8);
  Rng rng(3);
  reg.register_domain(*d, rng);
  const Matrix<double> before = reg.at("eeg").table.value;
  std::vector<std::string> extra;
  for (int i = 19; i < 66; ++i) extra.push_back("eeg_ch" + std::to_string(i));
  reg.extend_domain("eeg", extra, rng);
  EXPECT_EQ(reg.at("eeg").table.value.rows(), 66);
  EXPECT_EQ(reg.at("eeg").table.value.topRows(19), before);
  const Matrix<double> after = reg.at("eeg").table.value;
  reg.extend_domain("eeg", {}, rng);
  EXPECT_EQ(reg.at("eeg").table.value, after);
  EXPECT_THROW(reg.extend_domain("eeg", {"eeg_ch3"}, rng), std::invalid_argument);
}

TEST(Registry, UnivariateCannotExtend) {
  auto d = make_domain("w", 3, false);
  DomainRegistry<double> reg(8);
  Rng rng(1);
  reg.register_domain(*d, rng);
  EXPECT_EQ(reg.at("w").table.value.rows(), 1);
  EXPECT_THROW(reg.extend_domain("w", {"x"}, rng), std::invalid_argument);
}

TEST(Registry, SubsetOfExtendedCatalogue) {
  auto d = make_domain("eeg", 66);
  DomainRegistry<double> reg(8);
  Rng rng(1);
  reg.register_domain(*d, rng);
  PatchProjector<double> proj(24, 8, rng);
  std::vector<int> subset;
  for (int v = 0; v < 15; ++v) subset.push_back(v);
  for (int v = 19; v < 66; ++v) subset.push_back(v);
  ASSERT_EQ(subset.size(), 62u);
  const auto seq = assemble(full(normal_matrix<double>(62, 48, 1.0, rng)), "eeg", subset, reg, proj, small_config(48));
  EXPECT_EQ(seq.variates, 62);
  EXPECT_EQ(seq.tokens.rows(), 124);
  EXPECT_THROW(reg.check_subset("eeg", std::vector<int>{0, 0}), std::invalid_argument);
  EXPECT_THROW(reg.check_subset("eeg", std::vector<int>{66}), std::out_of_range);
}

class AssembleTest : public ::testing::Test {
 protected:
  void SetUp() override {
    Rng rng(11);
    reg = DomainRegistry<double>(8);
    reg.register_domain(*make_domain("d", 3), rng);
    proj = PatchProjector<double>(24, 8, rng);
  }
  DomainRegistry<double> reg;
  PatchProjector<double> proj;
  TokeniserConfig cfg = small_config(72);
};

TEST_F(AssembleTest, TokensAreSumOfParts) {
  Rng rng(1);
  const Matrix<double> x = normal_matrix<double>(2, 72, 1.0, rng);
  const std::vector<int> subset{2, 0};
  const auto seq = assemble(full(x), "d", subset, reg, proj, cfg);
  ASSERT_EQ(seq.tokens.rows(), 6);
  const auto patches = patchify(full(x), 24);
  const auto ep = embed_patches(patches.rows, proj);
  const auto temporal = sinusoidal_table<double>(3, 8);
  // Order (0,0),(0,1),(0,2),(1,0),(1,1),(1,2).
  for (int v = 0; v < 2; ++v)
    for (int t = 0; t < 3; ++t) {
      const Matrix<double> expect = ep.row(v * 3 + t) + temporal.row(t) + reg.at("d").table.value.row(subset[v]);
      EXPECT_LT((seq.tokens.row(v * 3 + t) - expect).cwiseAbs().maxCoeff(), 1e-12);
    }
}

TEST_F(AssembleTest, IdenticalVariatesDifferByEmbeddingDifference) {
  Rng rng(2);
  Matrix<double> x(2, 72);
  x.row(0) = normal_matrix<double>(1, 72, 1.0, rng);
  x.row(1) = x.row(0);
  const auto seq = assemble(full(x), "d", std::vector<int>{0, 1}, reg, proj, cfg);
  const auto& tab = reg.at("d").table.value;
  for (int t = 0; t < 3; ++t)
    EXPECT_LT((seq.tokens.row(t) - seq.tokens.row(3 + t) - (tab.row(0) - tab.row(1))).cwiseAbs().maxCoeff(), 1e-12);
}

TEST_F(AssembleTest, ZeroPatchAndVariateEmbeddingsLeaveTemporalTable) {
  proj.conv.weight.value.setZero();
  proj.conv.bias.value.setZero();
  reg.at("d").table.value.setZero();
  Rng rng(3);
  const auto seq = assemble(full(normal_matrix<double>(3, 72, 1.0, rng)), "d", std::vector<int>{0, 1, 2}, reg, proj, cfg);
  const auto temporal = sinusoidal_table<double>(3, 8);
  for (int v = 0; v < 3; ++v)
    for (int t = 0; t < 3; ++t) EXPECT_EQ(seq.tokens.row(v * 3 + t), temporal.row(t));
}

TEST_F(AssembleTest, PermutingVariatesPermutesTokenRows) {
  Rng rng(4);
  const Matrix<double> x = normal_matrix<double>(3, 72, 1.0, rng);
  const auto a = assemble(full(x), "d", std::vector<int>{0, 1, 2}, reg, proj, cfg);
  Matrix<double> xp(3, 72);
  xp.row(0) = x.row(2);
  xp.row(1) = x.row(0);
  xp.row(2) = x.row(1);
  const auto b = assemble(full(xp), "d", std::vector<int>{2, 0, 1}, reg, proj, cfg);
  const int perm[3] = {2, 0, 1};
  for (int v = 0; v < 3; ++v) EXPECT_EQ(b.tokens.middleRows(v * 3, 3), a.tokens.middleRows(perm[v] * 3, 3));
}

TEST_F(AssembleTest, PaddingSlotsAreZeroAndInvalid) {
  Rng rng(5);
  PreparedSample s = full(normal_matrix<double>(2, 72, 1.0, rng));
  for (int t = 30; t < 72; ++t) {
    s.time_validity[static_cast<std::size_t>(t)] = false;
    s.values.col(t).setZero();
  }
  const auto seq = assemble(s, "d", std::vector<int>{0, 1}, reg, proj, cfg, 3);
  EXPECT_EQ(seq.validity, (std::vector<bool>{true, true, false, true, true, false, false, false, false}));
  for (std::size_t g = 0; g < seq.validity.size(); ++g)
    if (!seq.validity[g]) EXPECT_TRUE(seq.tokens.row(static_cast<Eigen::Index>(g)).isZero());
  const auto unpadded = assemble(s, "d", std::vector<int>{0, 1}, reg, proj, cfg);
  EXPECT_EQ(seq.tokens.topRows(6), unpadded.tokens);
}

TEST_F(AssembleTest, ExtensionKeepsOldTokensBitIdentical) {
  Rng rng(6);
  const Matrix<double> x = normal_matrix<double>(3, 72, 1.0, rng);
  const auto before = assemble(full(x), "d", std::vector<int>{0, 1, 2}, reg, proj, cfg);
  reg.extend_domain("d", {"new0", "new1"}, rng);
  const auto after = assemble(full(x), "d", std::vector<int>{0, 1, 2}, reg, proj, cfg);
  EXPECT_EQ(before.tokens, after.tokens);
}
