#ifndef SHORTLVLM_SCP_HPP
#define SHORTLVLM_SCP_HPP

// Subspace-compensated pruning.
//
// Each pruned layer ℓp is paired with a retained layer ℓr. From calibration
// features we form H = X^{ℓp} − X^{ℓr}, take the top-k right singular
// vectors V_k of H, and replace every input-side matrix W of layer ℓr by
// (I + V_k V_kᵀ)·W, so x·W' = x·W + (x·V_k)(V_kᵀ·W).

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "shortlvlm/calibration.hpp"
#include "shortlvlm/error.hpp"
#include "shortlvlm/layer_localizer.hpp"
#include "shortlvlm/linalg.hpp"
#include "shortlvlm/model.hpp"
#include "shortlvlm/parallel.hpp"
#include "shortlvlm/token_importance.hpp"

namespace shortlvlm {

using LayerPairing = std::vector<std::pair<std::size_t, std::size_t>>;  // (pruned, retained)

/// Pruned layers ascending; each takes the nearest still-free retained
/// layer, ties to the lower index.
inline LayerPairing pair_layers(const PruningPlan& plan) {
  if (plan.retained.size() < plan.pruned.size())
    throw ParameterError("scp", "fewer retained than pruned layers");
  std::vector<std::size_t> pruned = plan.pruned;
  std::sort(pruned.begin(), pruned.end());
  std::vector<std::size_t> free = plan.retained;
  std::sort(free.begin(), free.end());
  LayerPairing out;
  for (const std::size_t lp : pruned) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < free.size(); ++i) {
      const auto d = [lp](std::size_t l) { return lp > l ? lp - l : l - lp; };
      if (d(free[i]) < d(free[best])) best = i;
    }
    out.emplace_back(lp, free[best]);
    free.erase(free.begin() + static_cast<long>(best));
  }
  return out;
}

/// H = X^{lp} − X^{lr}, rows matched by provenance.
inline Matrix difference_matrix(const std::map<std::size_t, FeatureMatrix>& features, std::size_t lp,
                                std::size_t lr) {
  const auto ip = features.find(lp), ir = features.find(lr);
  if (ip == features.end() || ir == features.end())
    throw AlignmentError("scp", "features missing for layer " + std::to_string(ip == features.end() ? lp : lr));
  const FeatureMatrix& a = ip->second;
  const FeatureMatrix& b = ir->second;
  if (a.rows != b.rows || a.data.rows() != b.data.rows())
    throw AlignmentError("scp", "row provenance of layers " + std::to_string(lp) + " and " +
                                    std::to_string(lr) + " differs");
  if (a.data.cols() != b.data.cols()) throw ShapeError("scp", "feature widths differ");
  return subtract(a.data, b.data);
}

struct SubspaceBasis {
  std::size_t lp = 0;
  std::size_t lr = 0;
  Matrix v;  // D×k, orthonormal columns
  std::vector<float> singular_values;
  double residual = 0.0;  // ‖H − H·V·Vᵀ‖_F / ‖H‖_F

  std::size_t k() const { return v.cols(); }
};

inline constexpr double kDegenerateGap = 1e-8;

/// nullopt when ‖H‖_F < 1e-8: the gap is already closed.
inline std::optional<SubspaceBasis> extract_subspace(const Matrix& h, std::size_t k, std::size_t lp = 0,
                                                     std::size_t lr = 0) {
  const std::size_t cap = std::min(h.rows(), h.cols());
  if (k < 1 || k > cap)
    throw ParameterError("scp", "k=" + std::to_string(k) + " outside [1, " + std::to_string(cap) + "]");
  const double norm = frobenius_norm(h);
  if (norm < kDegenerateGap) return std::nullopt;
  const auto svd = thin_svd(h);
  SubspaceBasis b;
  b.lp = lp;
  b.lr = lr;
  b.v = top_k_right_singular(svd, k);
  b.singular_values = svd.singular_values;
  b.residual = projection_residual(h, b.v) / norm;
  return b;
}

/// W + V(VᵀW) for wq, wk, wv and w_up.
inline LayerWeights project_weights(const LayerWeights& layer, const Matrix& v) {
  auto project = [&](const Matrix& w) {
    if (w.rows() != v.rows())
      throw ShapeError("scp", "basis dimension " + std::to_string(v.rows()) + " does not match layer input " +
                                  std::to_string(w.rows()));
    return add(w, matmul(v, matmul_tn(v, w)));
  };
  LayerWeights out = layer;
  out.wq = project(layer.wq);
  out.wk = project(layer.wk);
  out.wv = project(layer.wv);
  out.w_up = project(layer.w_up);
  return out;
}

inline LayerWeights project_weights(const LayerWeights& layer, const SubspaceBasis& basis) {
  return project_weights(layer, basis.v);
}

struct PairRecord {
  std::size_t lp = 0;
  std::size_t lr = 0;
  bool compensated = false;
  std::size_t k = 0;
  double residual = 0.0;
  std::vector<float> singular_values;
};

struct PrunedModel {
  Model model;
  std::vector<std::size_t> kept;    // original indices, in order
  std::vector<std::size_t> pruned;  // original indices, ascending
  std::vector<PairRecord> pairs;
  std::string feature_site;
  bool token_restricted = false;

  /// Position of original layer `layer` inside the pruned model.
  std::size_t position_of(std::size_t layer) const {
    const auto it = std::find(kept.begin(), kept.end(), layer);
    if (it == kept.end()) throw ParameterError("scp", "layer " + std::to_string(layer) + " was pruned");
    return static_cast<std::size_t>(it - kept.begin());
  }

  std::size_t projected_count() const {
    return static_cast<std::size_t>(
        std::count_if(pairs.begin(), pairs.end(), [](const PairRecord& p) { return p.compensated; }));
  }

  nlohmann::json provenance() const {
    nlohmann::json pj = nlohmann::json::array();
    for (const auto& p : pairs) {
      pj.push_back({{"pruned", p.lp},
                    {"retained", p.lr},
                    {"compensated", p.compensated},
                    {"k", p.k},
                    {"residual", p.residual},
                    {"singular_values", p.singular_values}});
    }
    return {{"original_layers", kept.size() + pruned.size()},
            {"kept", kept},
            {"pruned", pruned},
            {"pairs", pj},
            {"feature_site", feature_site},
            {"token_restricted", token_restricted}};
  }
};

/// Drops the plan's layers and projects each paired retained layer with
/// its basis. `bases` must hold an entry per pair; nullopt marks a
/// degenerate gap that is left uncompensated.
inline PrunedModel assemble(const Model& model, const PruningPlan& plan,
                            const std::map<std::size_t, std::optional<SubspaceBasis>>& bases) {
  if (plan.n_layers != model.config.n_layers)
    throw ParameterError("scp", "plan is for " + std::to_string(plan.n_layers) + " layers, model has " +
                                    std::to_string(model.config.n_layers));
  if (!plan.pruned.empty() && plan.pairing.size() != plan.pruned.size())
    throw StateError("scp", "plan pairing incomplete");
  PrunedModel out;
  out.pruned = plan.pruned;
  std::map<std::size_t, const SubspaceBasis*> by_retained;
  for (const auto& [lp, lr] : plan.pairing) {
    const auto it = bases.find(lp);
    if (it == bases.end()) throw StateError("scp", "no basis for pruned layer " + std::to_string(lp));
    PairRecord rec{lp, lr, false, 0, 0.0, {}};
    if (it->second) {
      const SubspaceBasis& b = *it->second;
      if (b.lr != lr) throw StateError("scp", "basis for layer " + std::to_string(lp) + " targets wrong layer");
      rec.compensated = true;
      rec.k = b.k();
      rec.residual = b.residual;
      rec.singular_values = b.singular_values;
      by_retained[lr] = &b;
    }
    out.pairs.push_back(std::move(rec));
  }
  out.model.config = model.config;
  out.model.weights.tok_emb = model.weights.tok_emb;
  out.model.weights.pos_emb = model.weights.pos_emb;
  out.model.weights.final_norm = model.weights.final_norm;
  out.model.weights.head = model.weights.head;
  for (std::size_t l = 0; l < model.config.n_layers; ++l) {
    if (std::binary_search(plan.pruned.begin(), plan.pruned.end(), l)) continue;
    const auto it = by_retained.find(l);
    out.model.weights.layers.push_back(it == by_retained.end() ? model.weights.layers[l]
                                                               : project_weights(model.weights.layers[l], *it->second));
    out.kept.push_back(l);
  }
  out.model.config.n_layers = out.kept.size();
  return out;
}

/// Layer removal without compensation.
inline PrunedModel prune_naive(const Model& model, PruningPlan plan) {
  plan.pairing = pair_layers(plan);
  std::map<std::size_t, std::optional<SubspaceBasis>> none;
  for (const auto& pr : plan.pairing) none.emplace(pr.first, std::nullopt);
  auto out = assemble(model, plan, none);
  out.feature_site = "none";
  return out;
}

/// Which residual stream stands for a layer's features: the stream it
/// reads (x^(ℓ)) or the stream it writes (x^(ℓ+1)).
enum class FeatureSite { kInput, kOutput };

inline std::string to_string(FeatureSite s) { return s == FeatureSite::kInput ? "input" : "output"; }

inline FeatureSite feature_site_from_string(const std::string& s) {
  if (s == "input") return FeatureSite::kInput;
  if (s == "output") return FeatureSite::kOutput;
  throw ParameterError("scp", "unknown feature site '" + s + "'");
}

inline std::size_t site_index(FeatureSite s, std::size_t layer) {
  return s == FeatureSite::kInput ? layer : layer + 1;
}

inline constexpr std::size_t kDefaultRank = 64;

struct ScpOptions {
  std::size_t k = kDefaultRank;
  FeatureSite site = FeatureSite::kOutput;
  bool restrict_to_tis = false;  // build H only from TIS-kept tokens
  double tis_p = kDefaultKeepRatio;
  std::size_t threads = 1;
};

/// Per-pair bases from precomputed traces of the unpruned model.
inline std::map<std::size_t, std::optional<SubspaceBasis>> compute_bases(
    const std::vector<ForwardTrace>& traces, const CalibrationCorpus& corpus, const LayerPairing& pairing,
    const ScpOptions& opt) {
  std::vector<std::optional<SubspaceBasis>> slots(pairing.size());
  parallel_for(pairing.size(), opt.threads, [&](std::size_t i) {
    const auto [lp, lr] = pairing[i];
    TokenMasks masks;
    if (opt.restrict_to_tis) {
      for (std::size_t s = 0; s < corpus.size(); ++s)
        masks.push_back(select_top_p(score_tokens(traces[s], corpus.samples[s], lp), opt.tis_p));
    }
    const std::size_t a = site_index(opt.site, lp), b = site_index(opt.site, lr);
    const auto feats = features_from_traces(traces, corpus, {a, b}, opt.restrict_to_tis ? &masks : nullptr);
    const Matrix h = difference_matrix(feats, a, b);
    const std::size_t k = std::min({opt.k, h.rows(), h.cols()});
    slots[i] = extract_subspace(h, k, lp, lr);
  });
  std::map<std::size_t, std::optional<SubspaceBasis>> out;
  for (std::size_t i = 0; i < pairing.size(); ++i) out.emplace(pairing[i].first, std::move(slots[i]));
  return out;
}

/// Full pipeline: pair, extract, project, assemble.
inline PrunedModel compensate(const Model& model, PruningPlan plan, const CalibrationCorpus& corpus,
                              const ScpOptions& opt = {}, const std::vector<ForwardTrace>* traces = nullptr) {
  if (opt.k < 1) throw ParameterError("scp", "k must be >= 1");
  plan.pairing = pair_layers(plan);
  std::vector<ForwardTrace> own;
  if (traces == nullptr && !plan.pruned.empty()) {
    own = capture_traces(model, corpus, opt.threads);
    traces = &own;
  }
  const auto bases = plan.pruned.empty() ? std::map<std::size_t, std::optional<SubspaceBasis>>{}
                                         : compute_bases(*traces, corpus, plan.pairing, opt);
  auto out = assemble(model, plan, bases);
  out.feature_site = to_string(opt.site);
  out.token_restricted = opt.restrict_to_tis;
  return out;
}

}  // namespace shortlvlm

#endif  // SHORTLVLM_SCP_HPP
