#ifndef SHORTLVLM_TOKEN_IMPORTANCE_HPP
#define SHORTLVLM_TOKEN_IMPORTANCE_HPP

// Token importance scores from captured attention maps.
//
// Attention is averaged over heads first. Scores are column means of the
// resulting map (attention a token *receives*), restricted to causally
// allowed query/key pairs:
//   visual key v_i:  intra = mean_{visual queries j >= i} A[j][i]
//                    cross = mean_{text queries j}       A[j][i]
//                    combined = (intra + cross) / 2
//   text key q_i:    intra = mean_{text queries j >= i}  A[j][i]
//                    cross = 0 (no visual query can see a later text token)
//                    combined = intra

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "shortlvlm/error.hpp"
#include "shortlvlm/model.hpp"

namespace shortlvlm {

inline constexpr double kDefaultKeepRatio = 0.10;

struct TokenScore {
  std::size_t position = 0;
  Modality modality = Modality::kVisual;
  double s_intra = 0.0;
  double s_cross = 0.0;
  double s_combined = 0.0;
  bool kept = true;
};

struct TokenScoreSheet {
  std::size_t layer = 0;
  double p = 1.0;
  std::vector<TokenScore> tokens;

  std::vector<unsigned char> keep_mask() const {
    std::vector<unsigned char> m(tokens.size());
    for (std::size_t i = 0; i < tokens.size(); ++i) m[i] = tokens[i].kept ? 1 : 0;
    return m;
  }
  std::size_t kept_count() const {
    return static_cast<std::size_t>(std::count_if(tokens.begin(), tokens.end(),
                                                  [](const TokenScore& t) { return t.kept; }));
  }
};

/// Head-averaged attention of `layer` (tokens×tokens, double precision).
inline std::vector<std::vector<double>> head_mean_attention(const ForwardTrace& trace, std::size_t layer) {
  if (!trace.captured || layer >= trace.attention.size() || trace.attention[layer].empty())
    throw StateError("token_importance", "no captured attention for layer " + std::to_string(layer));
  const auto& heads = trace.attention[layer];
  const std::size_t n = heads.front().rows();
  std::vector<std::vector<double>> avg(n, std::vector<double>(n, 0.0));
  for (const auto& h : heads)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) avg[i][j] += static_cast<double>(h(i, j));
  const double inv = 1.0 / static_cast<double>(heads.size());
  for (auto& row : avg)
    for (double& v : row) v *= inv;
  return avg;
}

/// Number of tokens a keep ratio p retains out of n: max(1, ceil(p·n)).
inline std::size_t keep_count(double p, std::size_t n) {
  if (!(p > 0.0 && p <= 1.0)) throw ParameterError("token_importance", "p must be in (0, 1]");
  // Guard against p·n landing a rounding error above an integer.
  const double raw = p * static_cast<double>(n);
  const auto k = static_cast<std::size_t>(std::ceil(raw - 1e-9 * std::max(1.0, raw)));
  return std::clamp<std::size_t>(k, 1, n);
}

/// Keeps the ceil(p·n) highest combined scores; ties go to the lower position.
inline std::vector<unsigned char> select_top_p(const TokenScoreSheet& sheet, double p) {
  const std::size_t n = sheet.tokens.size();
  const std::size_t k = keep_count(p, n);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return sheet.tokens[a].s_combined > sheet.tokens[b].s_combined;
  });
  std::vector<unsigned char> mask(n, 0);
  for (std::size_t i = 0; i < k; ++i) mask[order[i]] = 1;
  return mask;
}

/// Scores every token of `stream` at `layer`; all tokens marked kept (p = 1).
inline TokenScoreSheet score_tokens(const ForwardTrace& trace, const TokenStream& stream, std::size_t layer) {
  const auto a = head_mean_attention(trace, layer);
  const std::size_t n = stream.length(), s = stream.visual_count();
  if (a.size() != n) throw StateError("token_importance", "trace does not match stream length");
  TokenScoreSheet sheet;
  sheet.layer = layer;
  sheet.tokens.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto& t = sheet.tokens[i];
    t.position = i;
    t.modality = stream.modality(i);
    const std::size_t intra_end = t.modality == Modality::kVisual ? s : n;
    double intra = 0.0;
    for (std::size_t j = i; j < intra_end; ++j) intra += a[j][i];
    t.s_intra = intra / static_cast<double>(intra_end - i);
    if (t.modality == Modality::kVisual) {
      double cross = 0.0;
      for (std::size_t j = s; j < n; ++j) cross += a[j][i];
      t.s_cross = cross / static_cast<double>(n - s);
      t.s_combined = 0.5 * (t.s_intra + t.s_cross);
    } else {
      t.s_cross = 0.0;
      t.s_combined = t.s_intra;
    }
  }
  return sheet;
}

/// score_tokens followed by top-p selection.
inline TokenScoreSheet score_and_select(const ForwardTrace& trace, const TokenStream& stream,
                                        std::size_t layer, double p) {
  auto sheet = score_tokens(trace, stream, layer);
  const auto mask = select_top_p(sheet, p);
  sheet.p = p;
  for (std::size_t i = 0; i < mask.size(); ++i) sheet.tokens[i].kept = mask[i] != 0;
  return sheet;
}

/// Line-delimited dump records, one per token.
inline std::string score_records(const TokenScoreSheet& sheet, std::size_t sample) {
  std::string out;
  for (const auto& t : sheet.tokens) {
    nlohmann::json j{{"sample", sample},
                     {"layer", sheet.layer},
                     {"position", t.position},
                     {"modality", t.modality == Modality::kVisual ? "visual" : "text"},
                     {"s_intra", t.s_intra},
                     {"s_cross", t.s_cross},
                     {"kept", t.kept}};
    out += j.dump();
    out += '\n';
  }
  return out;
}

}  // namespace shortlvlm

#endif  // SHORTLVLM_TOKEN_IMPORTANCE_HPP
