#ifndef SHORTLVLM_LAYER_LOCALIZER_HPP
#define SHORTLVLM_LAYER_LOCALIZER_HPP

// Layer redundancy: the cosine between a layer's input and output residual
// vectors, averaged over the tokens a policy keeps and then over samples.
// Higher score means the layer changes the stream less.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "shortlvlm/calibration.hpp"
#include "shortlvlm/error.hpp"
#include "shortlvlm/linalg.hpp"
#include "shortlvlm/model.hpp"
#include "shortlvlm/parallel.hpp"
#include "shortlvlm/random.hpp"
#include "shortlvlm/token_importance.hpp"

namespace shortlvlm {

enum class TokenPolicy { kAll, kVisual, kText, kTis };

struct PolicySpec {
  TokenPolicy kind = TokenPolicy::kAll;
  double p = kDefaultKeepRatio;  // only used by kTis

  std::string name() const {
    switch (kind) {
      case TokenPolicy::kAll: return "all";
      case TokenPolicy::kVisual: return "visual";
      case TokenPolicy::kText: return "text";
      case TokenPolicy::kTis: {
        std::ostringstream os;
        os << "tis(" << p << ")";
        return os.str();
      }
    }
    return "?";
  }

  static PolicySpec parse(const std::string& s, double p = kDefaultKeepRatio) {
    if (s == "all") return {TokenPolicy::kAll, p};
    if (s == "visual") return {TokenPolicy::kVisual, p};
    if (s == "text") return {TokenPolicy::kText, p};
    if (s == "tis") {
      keep_count(p, 1);  // validates p
      return {TokenPolicy::kTis, p};
    }
    throw ParameterError("layer_localizer", "unknown token policy '" + s + "'");
  }
};

/// Half-open layer range [begin, end).
struct LayerWindow {
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t size() const { return end - begin; }
  bool contains(std::size_t l) const { return l >= begin && l < end; }

  /// Deeper half of an L-layer model.
  static LayerWindow deep_half(std::size_t n_layers) { return {n_layers / 2, n_layers}; }

  void validate(std::size_t n_layers) const {
    if (begin >= end || end > n_layers)
      throw ParameterError("layer_localizer", "window [" + std::to_string(begin) + ", " +
                                                  std::to_string(end) + ") invalid for " +
                                                  std::to_string(n_layers) + " layers");
  }

  friend bool operator==(const LayerWindow&, const LayerWindow&) = default;
};

struct RedundancyReport {
  std::vector<std::size_t> layers;   // window layers, ascending
  std::vector<double> scores;        // parallel to layers
  std::vector<std::size_t> ranking;  // layers by descending score, ties deeper first
  PolicySpec policy;
  std::string corpus_id;
  LayerWindow window;
  std::size_t n_layers = 0;
  std::vector<std::string> warnings;

  double score_of(std::size_t layer) const {
    for (std::size_t i = 0; i < layers.size(); ++i)
      if (layers[i] == layer) return scores[i];
    throw ParameterError("layer_localizer", "layer " + std::to_string(layer) + " not in report");
  }

  std::size_t rank_of(std::size_t layer) const {
    for (std::size_t i = 0; i < ranking.size(); ++i)
      if (ranking[i] == layer) return i + 1;
    throw ParameterError("layer_localizer", "layer " + std::to_string(layer) + " not in report");
  }

  /// Tab-separated: index, score, rank, policy.
  std::string to_table() const {
    std::ostringstream os;
    os << "index\tscore\trank\tpolicy\n";
    os.precision(9);
    for (std::size_t i = 0; i < layers.size(); ++i)
      os << layers[i] << '\t' << scores[i] << '\t' << rank_of(layers[i]) << '\t' << policy.name() << '\n';
    return os.str();
  }
};

/// Tokens kept by `policy` for one sample at `layer`.
inline std::vector<unsigned char> policy_mask(const PolicySpec& policy, const ForwardTrace& trace,
                                              const TokenStream& stream, std::size_t layer) {
  const std::size_t n = stream.length();
  std::vector<unsigned char> m(n, 0);
  switch (policy.kind) {
    case TokenPolicy::kAll:
      std::fill(m.begin(), m.end(), 1);
      break;
    case TokenPolicy::kVisual:
      for (std::size_t i = 0; i < stream.visual_count(); ++i) m[i] = 1;
      break;
    case TokenPolicy::kText:
      for (std::size_t i = stream.visual_count(); i < n; ++i) m[i] = 1;
      break;
    case TokenPolicy::kTis:
      m = select_top_p(score_tokens(trace, stream, layer), policy.p);
      break;
  }
  return m;
}

inline std::vector<std::size_t> rank_layers(const std::vector<std::size_t>& layers,
                                            const std::vector<double>& scores) {
  std::vector<std::size_t> idx(layers.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return layers[a] > layers[b];
  });
  std::vector<std::size_t> out;
  for (const std::size_t i : idx) out.push_back(layers[i]);
  return out;
}

inline RedundancyReport score_layers_from_traces(const std::vector<ForwardTrace>& traces,
                                                 const CalibrationCorpus& corpus, const PolicySpec& policy,
                                                 const LayerWindow& window) {
  if (corpus.samples.empty()) throw IngestionError("layer_localizer", "empty corpus");
  const std::size_t n_layers = traces.front().n_layers();
  window.validate(n_layers);
  RedundancyReport rep;
  rep.policy = policy;
  rep.corpus_id = corpus.source;
  rep.window = window;
  rep.n_layers = n_layers;
  for (std::size_t l = window.begin; l < window.end; ++l) {
    double sample_sum = 0.0;
    std::size_t used = 0;
    for (std::size_t s = 0; s < corpus.size(); ++s) {
      const auto& tr = traces[s];
      const auto mask = policy_mask(policy, tr, corpus.samples[s], l);
      double token_sum = 0.0;
      std::size_t kept = 0;
      for (std::size_t t = 0; t < mask.size(); ++t) {
        if (!mask[t]) continue;
        token_sum += cosine<float>(tr.residual[l].row(t), tr.residual[l + 1].row(t));
        ++kept;
      }
      if (kept == 0) {
        rep.warnings.push_back("layer " + std::to_string(l) + ": sample " + std::to_string(s) +
                               " keeps no tokens, skipped");
        continue;
      }
      sample_sum += token_sum / static_cast<double>(kept);
      ++used;
    }
    if (used == 0)
      throw ParameterError("layer_localizer", "policy " + policy.name() + " keeps no tokens in any sample");
    rep.layers.push_back(l);
    rep.scores.push_back(sample_sum / static_cast<double>(used));
  }
  rep.ranking = rank_layers(rep.layers, rep.scores);
  return rep;
}

inline RedundancyReport score_layers(const Model& model, const CalibrationCorpus& corpus,
                                     const PolicySpec& policy, const LayerWindow& window,
                                     std::size_t threads = 1) {
  window.validate(model.config.n_layers);
  return score_layers_from_traces(capture_traces(model, corpus, threads), corpus, policy, window);
}

struct PruningPlan {
  std::size_t n_layers = 0;
  std::vector<std::size_t> pruned;    // ascending
  std::vector<std::size_t> retained;  // ascending
  double ratio = 0.0;
  std::string policy;
  std::vector<std::pair<std::size_t, std::size_t>> pairing;  // (pruned, retained), filled by scp

  bool empty() const { return pruned.empty(); }

  friend bool operator==(const PruningPlan&, const PruningPlan&) = default;
};

inline void to_json(nlohmann::json& j, const PruningPlan& p) {
  j = nlohmann::json{{"n_layers", p.n_layers}, {"pruned", p.pruned}, {"retained", p.retained},
                     {"ratio", p.ratio},       {"policy", p.policy}, {"pairing", p.pairing}};
}

inline void from_json(const nlohmann::json& j, PruningPlan& p) {
  j.at("n_layers").get_to(p.n_layers);
  j.at("pruned").get_to(p.pruned);
  j.at("retained").get_to(p.retained);
  j.at("ratio").get_to(p.ratio);
  j.at("policy").get_to(p.policy);
  if (j.contains("pairing")) j.at("pairing").get_to(p.pairing);
}

inline constexpr double kMaxPruneRatio = 0.5;

/// round(ratio·L), rejecting ratios past the collapse cap.
inline std::size_t prune_count(std::size_t n_layers, double ratio) {
  if (!(ratio >= 0.0) || ratio > kMaxPruneRatio)
    throw ParameterError("layer_localizer", "ratio must be in [0, 0.5]");
  return static_cast<std::size_t>(std::llround(ratio * static_cast<double>(n_layers)));
}

inline PruningPlan plan_from_pruned(std::size_t n_layers, std::vector<std::size_t> pruned, double ratio,
                                    std::string policy) {
  std::sort(pruned.begin(), pruned.end());
  PruningPlan plan{n_layers, std::move(pruned), {}, ratio, std::move(policy), {}};
  if (std::adjacent_find(plan.pruned.begin(), plan.pruned.end()) != plan.pruned.end())
    throw ParameterError("layer_localizer", "duplicate pruned layer");
  if (2 * plan.pruned.size() > n_layers)
    throw ParameterError("layer_localizer", "more than half the layers pruned");
  for (std::size_t l = 0; l < n_layers; ++l)
    if (!std::binary_search(plan.pruned.begin(), plan.pruned.end(), l)) plan.retained.push_back(l);
  if (!plan.pruned.empty() && plan.pruned.back() >= n_layers)
    throw ParameterError("layer_localizer", "pruned layer out of range");
  return plan;
}

/// Prunes the round(ratio·L) most redundant window layers.
inline PruningPlan make_plan(const RedundancyReport& report, double ratio) {
  const std::size_t count = prune_count(report.n_layers, ratio);
  if (count > report.ranking.size())
    throw ParameterError("layer_localizer", "cannot prune " + std::to_string(count) + " layers from a window of " +
                                                std::to_string(report.ranking.size()));
  std::vector<std::size_t> pruned(report.ranking.begin(), report.ranking.begin() + static_cast<long>(count));
  return plan_from_pruned(report.n_layers, std::move(pruned), ratio, report.policy.name());
}

/// Uniform sample without replacement from the window; deterministic per seed.
inline PruningPlan random_plan(std::size_t n_layers, const LayerWindow& window, double ratio,
                               std::uint64_t seed) {
  window.validate(n_layers);
  const std::size_t count = prune_count(n_layers, ratio);
  if (count > window.size())
    throw ParameterError("layer_localizer", "cannot prune " + std::to_string(count) + " layers from a window of " +
                                                std::to_string(window.size()));
  std::vector<std::size_t> pool(window.size());
  std::iota(pool.begin(), pool.end(), window.begin);
  Rng rng(seed);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = i + uniform_index(rng, pool.size() - i);
    std::swap(pool[i], pool[j]);
  }
  pool.resize(count);
  return plan_from_pruned(n_layers, std::move(pool), ratio, "random(seed=" + std::to_string(seed) + ")");
}

struct EnumerationResult {
  PruningPlan best;
  double best_metric = 0.0;
  std::vector<std::pair<std::vector<std::size_t>, double>> table;  // lexicographic order
};

inline std::uint64_t binomial(std::uint64_t n, std::uint64_t k) {
  if (k > n) return 0;
  std::uint64_t r = 1;
  for (std::uint64_t i = 1; i <= k; ++i) r = r * (n - k + i) / i;
  return r;
}

inline constexpr std::uint64_t kDefaultEnumerationBudget = 2000;

/// Evaluates every `count`-subset of the window; the best plan is the first
/// maximal one in lexicographic order.
inline EnumerationResult enumerate_oracle(std::size_t n_layers, const LayerWindow& window, std::size_t count,
                                          const std::function<double(const PruningPlan&)>& eval_fn,
                                          std::uint64_t budget = kDefaultEnumerationBudget,
                                          std::size_t threads = 1) {
  window.validate(n_layers);
  const std::uint64_t combos = binomial(window.size(), count);
  if (combos > budget)
    throw BudgetError("layer_localizer", std::to_string(combos) + " combinations exceed budget " +
                                             std::to_string(budget));
  if (combos == 0) throw ParameterError("layer_localizer", "count exceeds window size");

  std::vector<std::vector<std::size_t>> subsets;
  std::vector<std::size_t> cur(count);
  std::iota(cur.begin(), cur.end(), window.begin);
  while (true) {
    subsets.push_back(cur);
    std::size_t i = count;
    while (i > 0 && cur[i - 1] == window.end - count + (i - 1)) --i;
    if (i == 0) break;
    ++cur[i - 1];
    for (std::size_t j = i; j < count; ++j) cur[j] = cur[j - 1] + 1;
  }

  const double ratio = static_cast<double>(count) / static_cast<double>(n_layers);
  std::vector<PruningPlan> plans;
  for (const auto& s : subsets) plans.push_back(plan_from_pruned(n_layers, s, ratio, "enum"));
  std::vector<double> metrics(plans.size());
  parallel_for(plans.size(), threads, [&](std::size_t i) { metrics[i] = eval_fn(plans[i]); });

  EnumerationResult res;
  std::size_t best = 0;
  for (std::size_t i = 0; i < plans.size(); ++i) {
    res.table.emplace_back(subsets[i], metrics[i]);
    if (metrics[i] > metrics[best]) best = i;
  }
  res.best = plans[best];
  res.best_metric = metrics[best];
  return res;
}

}  // namespace shortlvlm

#endif  // SHORTLVLM_LAYER_LOCALIZER_HPP
