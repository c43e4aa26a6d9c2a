#include <gtest/gtest.h>

#include "shortlvlm/calibration.hpp"
#include "shortlvlm/token_importance.hpp"
#include "shortlvlm/train.hpp"

using namespace shortlvlm;

namespace {

/// Trace with one layer whose heads all carry `map`.
ForwardTrace scripted(const Matrix& map, std::size_t heads = 1) {
  ForwardTrace tr;
  tr.captured = true;
  tr.attention.push_back(std::vector<Matrix>(heads, map));
  return tr;
}

/// Causal map with uniform weights over allowed keys.
Matrix uniform_causal(std::size_t n) {
  Matrix a(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j) a(i, j) = 1.0f / static_cast<float>(i + 1);
  return a;
}

TokenScoreSheet sheet_of(std::vector<double> scores) {
  TokenScoreSheet s;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    TokenScore t;
    t.position = i;
    t.s_combined = scores[i];
    s.tokens.push_back(t);
  }
  return s;
}

}  // namespace

TEST(ScoreTokens, SingleVisualSingleText) {
  const Matrix a(2, 2, {1.0f, 0.0f, 0.3f, 0.7f});
  const TokenStream s{"x", {3}, {2}, std::nullopt};
  const auto sheet = score_tokens(scripted(a), s, 0);
  EXPECT_NEAR(sheet.tokens[0].s_cross, 0.3, 1e-7);
  EXPECT_NEAR(sheet.tokens[0].s_intra, 1.0, 1e-7);
  EXPECT_NEAR(sheet.tokens[0].s_combined, 0.65, 1e-7);
  EXPECT_EQ(sheet.tokens[1].s_cross, 0.0);
  EXPECT_NEAR(sheet.tokens[1].s_combined, 0.7, 1e-7);
  EXPECT_EQ(sheet.tokens[1].modality, Modality::kText);
}

TEST(ScoreTokens, UniformCausalPrefixByEnumeration) {
  // 4 visual tokens then 1 text token; row i spreads 1/(i+1) over keys 0..i.
  const Matrix a = uniform_causal(5);
  const TokenStream s{"x", {3, 4, 5, 6}, {2}, std::nullopt};
  const auto sheet = score_tokens(scripted(a), s, 0);
  // key 0 receives 1, 1/2, 1/3, 1/4 from visual queries 0..3
  const double intra[4] = {(1.0 + 1.0 / 2 + 1.0 / 3 + 1.0 / 4) / 4, (1.0 / 2 + 1.0 / 3 + 1.0 / 4) / 3,
                           (1.0 / 3 + 1.0 / 4) / 2, 1.0 / 4};
  for (int i = 0; i < 4; ++i) {
    EXPECT_NEAR(sheet.tokens[i].s_intra, intra[i], 1e-7);
    EXPECT_NEAR(sheet.tokens[i].s_cross, 0.2, 1e-7);
    EXPECT_NEAR(sheet.tokens[i].s_combined, 0.5 * (intra[i] + 0.2), 1e-7);
  }
  EXPECT_NEAR(sheet.tokens[4].s_intra, 0.2, 1e-7);
}

TEST(ScoreTokens, IdenticalHeadsMatchSingleHead) {
  const Matrix a = uniform_causal(4);
  const TokenStream s{"x", {3, 4}, {2, 5}, std::nullopt};
  const auto one = score_tokens(scripted(a, 1), s, 0), four = score_tokens(scripted(a, 4), s, 0);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(one.tokens[i].s_combined, four.tokens[i].s_combined, 1e-12);
}

TEST(ScoreTokens, StateErrors) {
  const TokenStream s{"x", {3}, {2}, std::nullopt};
  ForwardTrace empty;
  EXPECT_THROW(score_tokens(empty, s, 0), StateError);
  EXPECT_THROW(score_tokens(scripted(uniform_causal(2)), s, 1), StateError);
  EXPECT_THROW(score_tokens(scripted(uniform_causal(3)), s, 0), StateError);
}

TEST(ScoreTokens, ScoresAreProbabilitiesOnRealModel) {
  ModelConfig c;
  c.dim = 16;
  c.n_layers = 2;
  c.n_heads = 2;
  c.mlp_hidden = 16;
  const Model m = init_model(c);
  for (const auto& s : SyntheticTask{}.generate(5, 2)) {
    const auto tr = forward(m, s);
    for (std::size_t l = 0; l < 2; ++l)
      for (const auto& t : score_tokens(tr, s, l).tokens) {
        EXPECT_GE(t.s_intra, 0.0);
        EXPECT_LE(t.s_intra, 1.0 + 1e-9);
        EXPECT_GE(t.s_cross, 0.0);
        EXPECT_LE(t.s_cross, 1.0 + 1e-9);
      }
  }
}

TEST(ScoreTokens, InvariantUnderRelabelingThatKeepsAttention) {
  const Matrix a = uniform_causal(4);
  const TokenStream s1{"x", {3, 4}, {2, 5}, std::nullopt}, s2{"y", {7, 8}, {2, 9}, std::nullopt};
  const auto x = score_tokens(scripted(a), s1, 0), y = score_tokens(scripted(a), s2, 0);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(x.tokens[i].s_combined, y.tokens[i].s_combined);
}

TEST(TopP, CountsAndTies) {
  EXPECT_EQ(keep_count(0.2, 10), 2u);
  EXPECT_EQ(keep_count(0.34, 3), 2u);
  EXPECT_EQ(keep_count(0.01, 10), 1u);
  EXPECT_EQ(keep_count(1.0, 7), 7u);
  EXPECT_EQ(keep_count(0.1, 14), 2u);
  const auto m = select_top_p(sheet_of({0.9, 0.9, 0.1}), 0.34);
  EXPECT_EQ(m, (std::vector<unsigned char>{1, 1, 0}));
  const auto tie = select_top_p(sheet_of({0.5, 0.5, 0.5, 0.5}), 0.5);
  EXPECT_EQ(tie, (std::vector<unsigned char>{1, 1, 0, 0}));
  EXPECT_EQ(select_top_p(sheet_of({0.1, 0.2, 0.3}), 1.0), (std::vector<unsigned char>{1, 1, 1}));
}

TEST(TopP, RangeErrors) {
  EXPECT_THROW(select_top_p(sheet_of({0.1}), 0.0), ParameterError);
  EXPECT_THROW(select_top_p(sheet_of({0.1}), 1.5), ParameterError);
  EXPECT_THROW(select_top_p(sheet_of({0.1}), NAN), ParameterError);
}

TEST(TopP, MonotoneInP) {
  Rng rng(4);
  std::vector<double> scores;
  for (int i = 0; i < 17; ++i) scores.push_back(static_cast<double>(uniform_index(rng, 5)) / 5.0);
  const auto sheet = sheet_of(scores);
  auto prev = select_top_p(sheet, 0.01);
  for (double p = 0.05; p <= 1.0; p += 0.05) {
    const auto cur = select_top_p(sheet, p);
    for (std::size_t i = 0; i < cur.size(); ++i)
      if (prev[i]) {
        EXPECT_TRUE(cur[i]);
      }
    std::size_t kept = 0;
    double min_kept = 1e9, max_dropped = -1e9;
    for (std::size_t i = 0; i < cur.size(); ++i) {
      kept += cur[i];
      if (cur[i]) min_kept = std::min(min_kept, scores[i]); else max_dropped = std::max(max_dropped, scores[i]);
    }
    EXPECT_EQ(kept, keep_count(p, cur.size()));
    EXPECT_GE(min_kept, max_dropped);
    prev = cur;
  }
}

TEST(ScoreRecords, DumpFormat) {
  const TokenStream s{"x", {3}, {2}, std::nullopt};
  const auto sheet = score_and_select(scripted(Matrix(2, 2, {1, 0, 0.3f, 0.7f})), s, 0, 0.5);
  EXPECT_EQ(sheet.kept_count(), 1u);
  const std::string dump = score_records(sheet, 4);
  std::istringstream in(dump);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    for (const char* key : {"sample", "layer", "position", "modality", "s_intra", "s_cross", "kept"})
      EXPECT_TRUE(j.contains(key)) << key;
    EXPECT_EQ(j["sample"], 4);
    ++n;
  }
  EXPECT_EQ(n, 2u);
}
