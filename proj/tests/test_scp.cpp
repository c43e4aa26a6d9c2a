#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "fixtures.hpp"
#include "oracles.hpp"
#include "shortlvlm/archive.hpp"
#include "shortlvlm/scp.hpp"

using namespace shortlvlm;

namespace {

PruningPlan plan_of(std::size_t n, std::vector<std::size_t> pruned) {
  return plan_from_pruned(n, std::move(pruned), 0.0, "test");
}

ModelConfig small(std::size_t layers = 4) {
  ModelConfig c;
  c.dim = 16;
  c.n_layers = layers;
  c.n_heads = 2;
  c.mlp_hidden = 16;
  c.seed = 5;
  return c;
}

FeatureMatrix feature(std::size_t layer, Matrix data) {
  FeatureMatrix f{layer, std::move(data), {}};
  for (std::size_t r = 0; r < f.data.rows(); ++r) f.rows.push_back({r, 0, Modality::kVisual});
  return f;
}

Matrix projector(const Matrix& v) { return matmul_nt(v, v); }

}  // namespace

TEST(PairLayers, TieGoesLower) {
  EXPECT_EQ(pair_layers(plan_of(6, {3})), (LayerPairing{{3, 2}}));
}

TEST(PairLayers, EachRetainedUsedOnce) {
  EXPECT_EQ(pair_layers(plan_of(6, {3, 4})), (LayerPairing{{3, 2}, {4, 5}}));
}

TEST(PairLayers, AdjacentBlockMatchesBruteForce) {
  const auto plan = plan_of(14, {8, 9, 10});
  const auto got = pair_layers(plan);
  EXPECT_EQ(got, oracle::brute_pairing(plan.pruned, plan.retained));
  EXPECT_EQ(got, (LayerPairing{{8, 7}, {9, 11}, {10, 12}}));
}

TEST(PairLayers, RandomPlansInjectiveTotalDeterministic) {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const std::size_t n = 2 + seed % 20;
    const auto plan = random_plan(n, {0, n}, 0.4, seed);
    const auto a = pair_layers(plan), b = pair_layers(plan);
    EXPECT_EQ(a, b);
    EXPECT_EQ(a, oracle::brute_pairing(plan.pruned, plan.retained));
    ASSERT_EQ(a.size(), plan.pruned.size());
    std::set<std::size_t> used;
    for (const auto& [p, r] : a) {
      EXPECT_TRUE(std::binary_search(plan.retained.begin(), plan.retained.end(), r));
      used.insert(r);
    }
    EXPECT_EQ(used.size(), a.size());
  }
}

TEST(DifferenceMatrix, SelfIsZeroAndRankOne) {
  Rng rng(1);
  const Matrix x = random_normal(rng, 6, 5, 1.0f);
  std::map<std::size_t, FeatureMatrix> f;
  f.emplace(2, feature(2, x));
  EXPECT_EQ(frobenius_norm(difference_matrix(f, 2, 2)), 0.0);

  const Matrix u = random_normal(rng, 6, 1, 1.0f), v = random_normal(rng, 1, 5, 1.0f);
  f.emplace(3, feature(3, add(x, matmul(u, v))));
  const Matrix h = difference_matrix(f, 3, 2);
  const auto svd = thin_svd(h);
  EXPECT_GT(svd.singular_values[0], 0.1f);
  EXPECT_LT(svd.singular_values[1], 1e-5f * svd.singular_values[0]);
}

TEST(DifferenceMatrix, MatchesNaiveLoop) {
  Rng rng(2);
  const Matrix a = random_normal(rng, 7, 4, 1.0f), b = random_normal(rng, 7, 4, 1.0f);
  std::map<std::size_t, FeatureMatrix> f;
  f.emplace(1, feature(1, a));
  f.emplace(4, feature(4, b));
  const Matrix h = difference_matrix(f, 4, 1);
  for (std::size_t i = 0; i < 7; ++i)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(h(i, j), b(i, j) - a(i, j));
}

TEST(DifferenceMatrix, AlignmentErrors) {
  std::map<std::size_t, FeatureMatrix> f;
  f.emplace(1, feature(1, Matrix(3, 2)));
  auto g = feature(2, Matrix(3, 2));
  g.rows[1].position = 9;
  f.emplace(2, g);
  EXPECT_THROW(difference_matrix(f, 1, 2), AlignmentError);
  EXPECT_THROW(difference_matrix(f, 1, 5), AlignmentError);
  f.emplace(3, feature(3, Matrix(4, 2)));
  EXPECT_THROW(difference_matrix(f, 1, 3), AlignmentError);
}

TEST(ExtractSubspace, RankOneAndFullRank) {
  Rng rng(3);
  const Matrix h1 = matmul(random_normal(rng, 9, 1, 1.0f), random_normal(rng, 1, 6, 1.0f));
  const auto b1 = extract_subspace(h1, 1);
  ASSERT_TRUE(b1);
  EXPECT_LT(b1->residual, 1e-5);
  const Matrix h = random_normal(rng, 9, 6, 1.0f);
  const auto full = extract_subspace(h, 6);
  ASSERT_TRUE(full);
  EXPECT_LT(full->residual, 1e-4);
  EXPECT_EQ(full->k(), 6u);
}

TEST(ExtractSubspace, ResidualMatchesSpectrumEnergy) {
  Rng rng(4);
  const Matrix h = random_normal(rng, 64, 32, 1.0f);
  const auto b = extract_subspace(h, 8);
  ASSERT_TRUE(b);
  const auto sv = oracle::gram_singular_values(h);
  long double top = 0, total = 0;
  for (std::size_t j = 0; j < sv.size(); ++j) {
    total += sv[j] * sv[j];
    if (j < 8) top += sv[j] * sv[j];
  }
  EXPECT_NEAR(b->residual * b->residual, static_cast<double>(1.0L - top / total), 1e-5);
}

TEST(ExtractSubspace, OrthonormalMonotoneAndSignInvariant) {
  Rng rng(5);
  const Matrix h = random_normal(rng, 20, 10, 1.0f);
  double prev = 2.0;
  for (std::size_t k = 1; k <= 10; ++k) {
    const auto b = extract_subspace(h, k);
    ASSERT_TRUE(b);
    const Matrix vtv = matmul_tn(b->v, b->v);
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < k; ++j) EXPECT_NEAR(vtv(i, j), i == j ? 1.0 : 0.0, 1e-5);
    EXPECT_LE(b->residual, prev + 1e-9);
    prev = b->residual;
  }
  Matrix neg = h;
  for (float& v : neg.values()) v = -v;
  const Matrix p1 = projector(extract_subspace(h, 4)->v), p2 = projector(extract_subspace(neg, 4)->v);
  for (std::size_t i = 0; i < p1.size(); ++i) EXPECT_NEAR(p1.values()[i], p2.values()[i], 1e-5);
}

TEST(ExtractSubspace, DegenerateAndBadRank) {
  EXPECT_FALSE(extract_subspace(Matrix(5, 4), 2).has_value());
  Rng rng(6);
  const Matrix h = random_normal(rng, 5, 4, 1.0f);
  EXPECT_THROW(extract_subspace(h, 0), ParameterError);
  EXPECT_THROW(extract_subspace(h, 5), ParameterError);
}

TEST(ProjectWeights, IdentityLimitAndHandComputation) {
  const Model m = init_model(small());
  const auto& layer = m.weights.layers[0];
  const auto same = project_weights(layer, Matrix(16, 3));
  EXPECT_EQ(same.wq, layer.wq);
  EXPECT_EQ(same.w_up, layer.w_up);

  LayerWeights eye = layer;
  eye.wq = Matrix::identity(16);
  Matrix e1(16, 1);
  e1(0, 0) = 1.0f;
  const auto p = project_weights(eye, e1);
  Matrix expect = Matrix::identity(16);
  expect(0, 0) = 2.0f;
  EXPECT_EQ(p.wq, expect);
  EXPECT_EQ(p.wo, layer.wo);
  EXPECT_EQ(p.w_down, layer.w_down);
  EXPECT_THROW(project_weights(layer, Matrix(8, 1)), ShapeError);
}

TEST(ProjectWeights, TwoPathIdentity) {
  Rng rng(7);
  const Model m = init_model(small());
  const Matrix h = random_normal(rng, 30, 16, 1.0f);
  const Matrix v = extract_subspace(h, 5)->v;
  const auto proj = project_weights(m.weights.layers[1], v);
  for (const auto& [wo, wp] : {std::pair{&m.weights.layers[1].wq, &proj.wq}, std::pair{&m.weights.layers[1].w_up, &proj.w_up}}) {
    const Matrix x = random_normal(rng, 4, 16, 1.0f);
    const Matrix lhs = matmul(x, *wp);
    const Matrix rhs = add(matmul(x, *wo), matmul(matmul(x, v), matmul_tn(v, *wo)));
    for (std::size_t i = 0; i < lhs.size(); ++i)
      EXPECT_NEAR(lhs.values()[i], rhs.values()[i], 1e-5 * std::max(1.0f, std::abs(rhs.values()[i])));
  }
}

TEST(ProjectWeights, OrthogonalInputsUnaffected) {
  Rng rng(8);
  const Model m = init_model(small());
  const Matrix v = extract_subspace(random_normal(rng, 30, 16, 1.0f), 4)->v;
  const auto proj = project_weights(m.weights.layers[2], v);
  Matrix x = random_normal(rng, 3, 16, 1.0f);
  x = subtract(x, matmul_nt(matmul(x, v), v));
  const Matrix a = matmul(x, m.weights.layers[2].wk), b = matmul(x, proj.wk);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a.values()[i], b.values()[i], 1e-5);
}

TEST(Assemble, EmptyPlanIsBitIdentical) {
  const Model m = init_model(small());
  const CalibrationCorpus corpus{SyntheticTask{}.generate(4, 1), 0, "c"};
  const auto pm = compensate(m, plan_of(4, {}), corpus);
  EXPECT_EQ(pm.model, m);
  for (const auto& s : corpus.samples) EXPECT_EQ(forward(m, s).logits, forward(pm.model, s).logits);
}

TEST(Assemble, PruneTwoOfTwelve) {
  const Model m = init_model(small(12));
  const CalibrationCorpus corpus{SyntheticTask{}.generate(6, 1), 0, "c"};
  ScpOptions opt;
  opt.k = 4;
  const auto pm = compensate(m, plan_of(12, {8, 10}), corpus, opt);
  EXPECT_EQ(pm.model.config.n_layers, 10u);
  EXPECT_EQ(pm.model.weights.layers.size(), 10u);
  EXPECT_LE(pm.projected_count(), 2u);
  EXPECT_EQ(pm.kept, (std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6, 7, 9, 11}));
  EXPECT_EQ(pm.model.weights.layers[pm.position_of(11)].w_down, m.weights.layers[11].w_down);
  EXPECT_NE(pm.model.weights.layers[pm.position_of(7)].wq, m.weights.layers[7].wq);
  EXPECT_EQ(pm.model.weights.layers[pm.position_of(3)], m.weights.layers[3]);
  EXPECT_THROW(pm.position_of(8), ParameterError);

  const auto naive = prune_naive(m, plan_of(12, {8, 10}));
  EXPECT_EQ(naive.projected_count(), 0u);
  EXPECT_EQ(naive.model.weights.layers[naive.position_of(7)], m.weights.layers[7]);
}

TEST(Assemble, MissingBasisAndWrongModel) {
  const Model m = init_model(small());
  auto plan = plan_of(4, {2});
  plan.pairing = pair_layers(plan);
  EXPECT_THROW(assemble(m, plan, {}), StateError);
  auto unpaired = plan_of(4, {2});
  EXPECT_THROW(assemble(m, unpaired, {{2, std::nullopt}}), StateError);
  EXPECT_THROW(assemble(init_model(small(6)), plan, {{2, std::nullopt}}), ParameterError);
}

TEST(Assemble, DegenerateGapLeavesLayerUntouched) {
  Model m = init_model(small());
  zero_layer_output(m, 2);
  const CalibrationCorpus corpus{SyntheticTask{}.generate(3, 1), 0, "c"};
  ScpOptions opt;
  opt.site = FeatureSite::kInput;
  auto plan = plan_of(4, {3});
  // pair 3→2: inputs of layers 2 and 3 coincide because layer 2 is a pass-through
  const auto pm = compensate(m, plan, corpus, opt);
  EXPECT_EQ(pm.pairs[0].lr, 2u);
  EXPECT_FALSE(pm.pairs[0].compensated);
  EXPECT_EQ(pm.model.weights.layers[2], m.weights.layers[2]);
}

TEST(Compensate, ThreadsTokenRestrictionAndArchive) {
  const Model m = init_model(small(8));
  const CalibrationCorpus corpus{SyntheticTask{}.generate(6, 2), 0, "c"};
  ScpOptions opt;
  opt.k = 3;
  const auto plan = plan_of(8, {5, 6});
  const auto a = compensate(m, plan, corpus, opt);
  opt.threads = 3;
  const auto b = compensate(m, plan, corpus, opt);
  EXPECT_EQ(a.model, b.model);
  opt.restrict_to_tis = true;
  const auto c = compensate(m, plan, corpus, opt);
  EXPECT_TRUE(c.token_restricted);
  EXPECT_NE(c.model, a.model);

  const auto bytes = model_to_archive(a.model, a.provenance()).serialize();
  const auto ar = TensorArchive::parse(bytes);
  EXPECT_EQ(model_from_archive(ar), a.model);
  EXPECT_EQ(ar.header["provenance"]["pruned"], nlohmann::json({5, 6}));
  EXPECT_EQ(ar.header["provenance"]["pairs"][0]["k"], 3);
  EXPECT_EQ(model_to_archive(model_from_archive(ar), ar.header["provenance"]).serialize(), bytes);
}

TEST(Compensate, LinearLayerFullRankReconstructsTarget) {
  const Model m = fixtures::linear_model(4, 8);
  const CalibrationCorpus corpus{SyntheticTask{}.generate(16, 3), 0, "c"};
  ScpOptions opt;
  opt.k = 8;
  const auto plan = plan_of(4, {2});
  const auto pm = compensate(m, plan, corpus, opt);
  ASSERT_EQ(pm.pairs[0].lr, 1u);
  for (const auto& s : corpus.samples) {
    const auto orig = forward(m, s), pruned = forward(pm.model, s);
    for (std::size_t t = 0; t < s.length(); ++t)
      for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(pruned.residual[2](t, i), orig.residual[3](t, i), 1e-3);
  }
}
