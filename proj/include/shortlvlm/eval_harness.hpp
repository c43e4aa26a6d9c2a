#ifndef SHORTLVLM_EVAL_HARNESS_HPP
#define SHORTLVLM_EVAL_HARNESS_HPP

// Accuracy and throughput evaluation, random-pruning seed studies,
// inter-layer similarity heatmaps and feature-gap measurement.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "shortlvlm/calibration.hpp"
#include "shortlvlm/error.hpp"
#include "shortlvlm/layer_localizer.hpp"
#include "shortlvlm/linalg.hpp"
#include "shortlvlm/model.hpp"
#include "shortlvlm/parallel.hpp"
#include "shortlvlm/scp.hpp"

namespace shortlvlm {

inline std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

inline double median(std::vector<double> v) {
  if (v.empty()) throw ParameterError("eval_harness", "median of empty list");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// 100 · metric / baseline.
inline double relative_performance(double metric, double baseline) {
  if (!(baseline > 0.0)) throw ParameterError("eval_harness", "baseline metric must be > 0");
  return 100.0 * metric / baseline;
}

/// Multiply-add count ×2 of one forward pass over the corpus.
inline double estimate_flops(const ModelConfig& c, const CalibrationCorpus& corpus) {
  const double d = static_cast<double>(c.dim), m = static_cast<double>(c.mlp_hidden),
               v = static_cast<double>(c.vocab_size), layers = static_cast<double>(c.n_layers);
  double total = 0.0;
  for (const auto& s : corpus.samples) {
    const double n = static_cast<double>(s.length());
    const double per_layer = 2.0 * n * d * d * 4.0 + 2.0 * n * d * m * 2.0 + 2.0 * n * n * d * 2.0;
    total += layers * per_layer + 2.0 * n * d * v;
  }
  return total;
}

struct EvalOptions {
  std::size_t repeats = 3;        // timed passes, median reported
  std::size_t threads = 1;        // untimed accuracy pass
  std::size_t timed_threads = 1;  // timed passes
  bool timed = true;
  std::string model_id;
  std::string plan;
  std::uint64_t seed = 0;
};

struct ExperimentResult {
  std::string model_id;
  std::string plan;
  std::string metric = "accuracy";
  double value = 0.0;
  std::optional<double> relative;  // percent of the unpruned metric
  double samples_per_second = 0.0;
  double median_seconds = 0.0;
  std::vector<double> run_seconds;
  double flops = 0.0;
  std::size_t threads = 1;
  std::size_t samples = 0;
  std::uint64_t seed = 0;
  std::string timestamp;
};

inline void to_json(nlohmann::json& j, const ExperimentResult& r) {
  j = nlohmann::json{{"model_id", r.model_id},
                     {"plan", r.plan},
                     {"metric", r.metric},
                     {"value", r.value},
                     {"relative", r.relative ? nlohmann::json(*r.relative) : nlohmann::json(nullptr)},
                     {"samples_per_second", r.samples_per_second},
                     {"median_seconds", r.median_seconds},
                     {"run_seconds", r.run_seconds},
                     {"flops", r.flops},
                     {"threads", r.threads},
                     {"samples", r.samples},
                     {"seed", r.seed},
                     {"timestamp", r.timestamp}};
}

inline double accuracy(const Model& model, const CalibrationCorpus& corpus, std::size_t threads = 1) {
  if (!corpus.labeled()) throw ParameterError("eval_harness", "evaluation corpus must be labeled");
  std::vector<unsigned char> hit(corpus.size());
  parallel_for(corpus.size(), threads, [&](std::size_t i) {
    hit[i] = predict(model, corpus.samples[i]) == *corpus.samples[i].label ? 1 : 0;
  });
  std::size_t correct = 0;
  for (const auto h : hit) correct += h;
  return static_cast<double>(correct) / static_cast<double>(corpus.size());
}

/// Seconds for one un-captured forward over every sample.
inline double time_pass(const Model& model, const CalibrationCorpus& corpus, std::size_t threads) {
  std::vector<int> sink(corpus.size());
  const auto t0 = std::chrono::steady_clock::now();
  parallel_for(corpus.size(), threads, [&](std::size_t i) { sink[i] = predict(model, corpus.samples[i]); });
  const auto t1 = std::chrono::steady_clock::now();
  volatile int guard = sink.empty() ? 0 : sink.back();
  (void)guard;
  return std::chrono::duration<double>(t1 - t0).count();
}

inline ExperimentResult evaluate(const Model& model, const CalibrationCorpus& corpus, const EvalOptions& opt = {},
                                 std::optional<double> baseline = std::nullopt) {
  ExperimentResult r;
  r.value = accuracy(model, corpus, opt.threads);
  r.model_id = opt.model_id;
  r.plan = opt.plan;
  r.seed = opt.seed;
  r.samples = corpus.size();
  r.threads = opt.timed_threads;
  r.flops = estimate_flops(model.config, corpus);
  if (baseline) r.relative = relative_performance(r.value, *baseline);
  if (opt.timed) {
    if (opt.repeats < 3) throw ParameterError("eval_harness", "at least 3 timed repetitions required");
    for (std::size_t i = 0; i < opt.repeats; ++i) r.run_seconds.push_back(time_pass(model, corpus, opt.timed_threads));
    r.median_seconds = median(r.run_seconds);
    r.samples_per_second = r.median_seconds > 0.0 ? static_cast<double>(corpus.size()) / r.median_seconds : 0.0;
  }
  r.timestamp = utc_timestamp();
  return r;
}

inline std::string results_jsonl(const std::vector<ExperimentResult>& rs) {
  std::string out;
  for (const auto& r : rs) {
    out += nlohmann::json(r).dump();
    out += '\n';
  }
  return out;
}

inline std::string results_table(const std::vector<ExperimentResult>& rs) {
  std::ostringstream os;
  os << "model\tplan\tmetric\tvalue\trelative\tsamples_per_second\tflops\tthreads\n";
  os.precision(6);
  for (const auto& r : rs) {
    os << r.model_id << '\t' << r.plan << '\t' << r.metric << '\t' << r.value << '\t';
    if (r.relative) os << *r.relative; else os << '-';
    os << '\t' << r.samples_per_second << '\t' << r.flops << '\t' << r.threads << '\n';
  }
  return os.str();
}

struct SeedStudyRow {
  double ratio = 0.0;
  std::size_t pruned = 0;
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation
  std::vector<double> relative;
  std::vector<std::vector<std::size_t>> plans;
};

inline constexpr std::size_t kDefaultSeeds = 10;

/// Random plans from `window` with seeds base_seed..base_seed+n_seeds-1.
inline std::vector<SeedStudyRow> seed_study(const Model& model, const CalibrationCorpus& corpus,
                                            const LayerWindow& window, const std::vector<double>& ratios,
                                            std::size_t n_seeds = kDefaultSeeds, std::uint64_t base_seed = 0,
                                            std::size_t threads = 1) {
  if (n_seeds < 2) throw ParameterError("eval_harness", "seed study needs at least 2 seeds");
  const double base = accuracy(model, corpus, threads);
  std::vector<SeedStudyRow> rows;
  for (const double ratio : ratios) {
    SeedStudyRow row;
    row.ratio = ratio;
    for (std::size_t s = 0; s < n_seeds; ++s) {
      const auto plan = random_plan(model.config.n_layers, window, ratio, base_seed + s);
      row.pruned = plan.pruned.size();
      const double acc = plan.empty() ? base : accuracy(prune_naive(model, plan).model, corpus, threads);
      row.relative.push_back(relative_performance(acc, base));
      row.plans.push_back(plan.pruned);
    }
    double sum = 0.0;
    for (const double v : row.relative) sum += v;
    row.mean = sum / static_cast<double>(n_seeds);
    double ss = 0.0;
    for (const double v : row.relative) ss += (v - row.mean) * (v - row.mean);
    row.stddev = std::sqrt(ss / static_cast<double>(n_seeds - 1));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline std::string seed_study_table(const std::vector<SeedStudyRow>& rows) {
  std::ostringstream os;
  os << "ratio\tpruned\tmean\tstd\n";
  os.precision(6);
  for (const auto& r : rows) os << r.ratio << '\t' << r.pruned << '\t' << r.mean << '\t' << r.stddev << '\n';
  return os.str();
}

/// Whitespace-separated numeric grid, one row per line.
inline std::string numeric_grid(const std::vector<std::vector<double>>& g) {
  std::ostringstream os;
  os.precision(9);
  for (const auto& row : g) {
    for (std::size_t j = 0; j < row.size(); ++j) os << (j ? " " : "") << row[j];
    os << '\n';
  }
  return os.str();
}

struct SimilarityHeatmap {
  std::vector<std::vector<double>> values;  // L×L over layer outputs
  std::string corpus_id;
};

/// Entry (i, j): mean over all corpus tokens of cos(output of layer i,
/// output of layer j).
inline SimilarityHeatmap heatmap(const Model& model, const CalibrationCorpus& corpus, std::size_t threads = 1) {
  const auto traces = capture_traces(model, corpus, threads);
  const std::size_t n = model.config.n_layers;
  SimilarityHeatmap hm{std::vector<std::vector<double>>(n, std::vector<double>(n, 0.0)), corpus.source};
  std::size_t tokens = 0;
  for (const auto& tr : traces) tokens += tr.residual.front().rows();
  for (std::size_t i = 0; i < n; ++i) {
    hm.values[i][i] = 1.0;
    for (std::size_t j = i + 1; j < n; ++j) {
      double sum = 0.0;
      for (const auto& tr : traces)
        for (std::size_t t = 0; t < tr.residual[i + 1].rows(); ++t)
          sum += cosine<float>(tr.residual[i + 1].row(t), tr.residual[j + 1].row(t));
      hm.values[i][j] = hm.values[j][i] = sum / static_cast<double>(tokens);
    }
  }
  return hm;
}

struct GapPair {
  std::size_t lp = 0;
  std::size_t lr = 0;
  double before = 0.0;  // naive-pruned retained output vs original pruned-layer output
  double after = 0.0;   // compensated retained output vs the same target
  double delta() const { return after - before; }
};

struct GapPoint {
  std::size_t pair = 0;
  std::string set;  // "target", "naive" or "scp"
  double x = 0.0;
  double y = 0.0;
};

struct GapReport {
  std::vector<GapPair> pairs;
  double before = 0.0;
  double after = 0.0;
  std::vector<GapPoint> points;

  double delta() const { return after - before; }

  nlohmann::json to_json() const {
    nlohmann::json pj = nlohmann::json::array();
    for (const auto& p : pairs)
      pj.push_back({{"pruned", p.lp}, {"retained", p.lr}, {"before", p.before}, {"after", p.after},
                    {"delta", p.delta()}});
    return {{"pairs", pj}, {"before", before}, {"after", after}, {"delta", delta()}};
  }

  /// Rows "pair set x y".
  std::string points_grid() const {
    std::ostringstream os;
    os.precision(9);
    for (const auto& p : points) os << p.pair << ' ' << p.set << ' ' << p.x << ' ' << p.y << '\n';
    return os.str();
  }
};

namespace detail {

/// Projects rows of `stacked` onto its top-2 principal directions.
inline std::vector<std::pair<double, double>> principal_coords(const Matrix& stacked) {
  const std::size_t n = stacked.rows(), d = stacked.cols();
  std::vector<double> mean(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) mean[j] += stacked(i, j);
  for (double& m : mean) m /= static_cast<double>(n);
  Matrix centered(n, d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) centered(i, j) = static_cast<float>(stacked(i, j) - mean[j]);
  const Matrix gram = matmul_tn(centered, centered);
  std::vector<std::pair<double, double>> out(n, {0.0, 0.0});
  if (frobenius_norm(gram) == 0.0) return out;
  const auto svd = thin_svd(gram);
  const std::size_t dims = std::min<std::size_t>(2, svd.rank());
  for (std::size_t i = 0; i < n; ++i) {
    double c[2] = {0.0, 0.0};
    for (std::size_t k = 0; k < dims; ++k)
      for (std::size_t j = 0; j < d; ++j) c[k] += static_cast<double>(centered(i, j)) * svd.vt(k, j);
    out[i] = {c[0], c[1]};
  }
  return out;
}

inline double mean_row_cosine(const std::vector<const Matrix*>& a, const std::vector<const Matrix*>& b) {
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t s = 0; s < a.size(); ++s)
    for (std::size_t t = 0; t < a[s]->rows(); ++t) {
      sum += cosine<float>(a[s]->row(t), b[s]->row(t));
      ++n;
    }
  return sum / static_cast<double>(n);
}

}  // namespace detail

/// For each pair, the mean token cosine between the original model's output
/// of ℓp and the output of ℓr inside each pruned model.
inline GapReport gap_reduction(const Model& model, const PrunedModel& naive, const PrunedModel& scp,
                               const CalibrationCorpus& corpus, std::size_t threads = 1, bool with_points = true) {
  if (naive.pairs.size() != scp.pairs.size() || naive.kept != scp.kept)
    throw ParameterError("eval_harness", "pruned models come from different plans");
  for (std::size_t i = 0; i < naive.pairs.size(); ++i)
    if (naive.pairs[i].lp != scp.pairs[i].lp || naive.pairs[i].lr != scp.pairs[i].lr)
      throw ParameterError("eval_harness", "pairings of the pruned models differ");
  if (naive.kept.size() + naive.pruned.size() != model.config.n_layers)
    throw ParameterError("eval_harness", "pruned models do not derive from this model");

  const auto orig = capture_traces(model, corpus, threads);
  const auto tn = capture_traces(naive.model, corpus, threads);
  const auto ts = capture_traces(scp.model, corpus, threads);
  GapReport rep;
  for (std::size_t pi = 0; pi < naive.pairs.size(); ++pi) {
    const auto& pr = naive.pairs[pi];
    const std::size_t pos = naive.position_of(pr.lr);
    std::vector<const Matrix*> target, a, b;
    for (std::size_t s = 0; s < corpus.size(); ++s) {
      target.push_back(&orig[s].residual[pr.lp + 1]);
      a.push_back(&tn[s].residual[pos + 1]);
      b.push_back(&ts[s].residual[pos + 1]);
    }
    rep.pairs.push_back({pr.lp, pr.lr, detail::mean_row_cosine(target, a), detail::mean_row_cosine(target, b)});
    if (with_points) {
      std::size_t rows = 0;
      for (const auto* m : target) rows += m->rows();
      const std::size_t d = model.config.dim;
      Matrix stacked(3 * rows, d);
      std::size_t r = 0;
      for (const auto* set : {&target, &a, &b})
        for (const auto* m : *set)
          for (std::size_t t = 0; t < m->rows(); ++t, ++r)
            std::copy(m->row(t).begin(), m->row(t).end(), stacked.row(r).begin());
      const auto coords = detail::principal_coords(stacked);
      const char* names[3] = {"target", "naive", "scp"};
      for (std::size_t i = 0; i < coords.size(); ++i)
        rep.points.push_back({pi, names[i / rows], coords[i].first, coords[i].second});
    }
  }
  double sb = 0.0, sa = 0.0;
  for (const auto& p : rep.pairs) {
    sb += p.before;
    sa += p.after;
  }
  if (!rep.pairs.empty()) {
    rep.before = sb / static_cast<double>(rep.pairs.size());
    rep.after = sa / static_cast<double>(rep.pairs.size());
  }
  return rep;
}

}  // namespace shortlvlm

#endif  // SHORTLVLM_EVAL_HARNESS_HPP
