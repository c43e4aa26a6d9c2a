#ifndef SHORTLVLM_CALIBRATION_HPP
#define SHORTLVLM_CALIBRATION_HPP

// Calibration corpus ingestion and per-layer feature extraction.
//
// Corpus files hold one JSON record per line:
//   {"id": "...", "visual": [ints], "text": [ints], "label": int}
// ("label" may be omitted for unlabeled calibration data).

#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "shortlvlm/error.hpp"
#include "shortlvlm/model.hpp"
#include "shortlvlm/parallel.hpp"
#include "shortlvlm/random.hpp"

namespace shortlvlm {

struct CalibrationCorpus {
  std::vector<TokenStream> samples;
  std::uint64_t seed = 0;
  std::string source;

  std::size_t size() const { return samples.size(); }
  bool labeled() const {
    for (const auto& s : samples)
      if (!s.label) return false;
    return !samples.empty();
  }
};

inline nlohmann::json stream_to_json(const TokenStream& s) {
  nlohmann::json j{{"id", s.id}, {"visual", s.visual}, {"text", s.text}};
  if (s.label) j["label"] = *s.label;
  return j;
}

inline TokenStream parse_corpus_line(const std::string& line, std::size_t line_no) {
  auto fail = [&](const std::string& why) -> IngestionError {
    return IngestionError("calibration", "line " + std::to_string(line_no) + ": " + why);
  };
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw fail(std::string("not valid JSON (") + e.what() + ")");
  }
  if (!j.is_object()) throw fail("record is not an object");
  TokenStream s;
  try {
    s.id = j.at("id").get<std::string>();
    s.visual = j.at("visual").get<std::vector<int>>();
    s.text = j.at("text").get<std::vector<int>>();
    if (j.contains("label") && !j["label"].is_null()) s.label = j["label"].get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw fail(std::string("bad field (") + e.what() + ")");
  }
  if (s.visual.empty() || s.text.empty()) throw fail("visual and text must be non-empty");
  return s;
}

inline std::string corpus_to_jsonl(const std::vector<TokenStream>& samples) {
  std::string out;
  for (const auto& s : samples) {
    out += stream_to_json(s).dump();
    out += '\n';
  }
  return out;
}

inline void write_corpus(const std::string& path, const std::vector<TokenStream>& samples) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IngestionError("calibration", "cannot write '" + path + "'");
  out << corpus_to_jsonl(samples);
}

/// Parses every record, shuffles with `seed`, keeps the first `limit`.
inline CalibrationCorpus corpus_from_text(const std::string& text, std::size_t limit,
                                          std::uint64_t seed, std::string source = "<memory>") {
  if (limit == 0) throw IngestionError("calibration", "limit 0 yields an empty corpus");
  std::vector<TokenStream> all;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    all.push_back(parse_corpus_line(line, line_no));
  }
  if (all.empty()) throw IngestionError("calibration", "corpus '" + source + "' is empty");
  shuffle_in_place(all, seed);
  if (all.size() > limit) all.resize(limit);
  return {std::move(all), seed, std::move(source)};
}

inline CalibrationCorpus load_corpus(const std::string& path, std::size_t limit, std::uint64_t seed) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError("calibration", "cannot open corpus '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return corpus_from_text(buf.str(), limit, seed, path);
}

struct RowProvenance {
  std::size_t sample = 0;
  std::size_t position = 0;
  Modality modality = Modality::kVisual;

  friend bool operator==(const RowProvenance&, const RowProvenance&) = default;
};

/// Residual-stream rows x^(layer) of the kept tokens, stacked in corpus order.
struct FeatureMatrix {
  std::size_t layer = 0;
  Matrix data;  // N×D
  std::vector<RowProvenance> rows;

  std::size_t n() const { return data.rows(); }
};

/// Per-sample token keep flags (1 = keep). Must match sample lengths.
using TokenMasks = std::vector<std::vector<unsigned char>>;

inline std::vector<ForwardTrace> capture_traces(const Model& model, const CalibrationCorpus& corpus,
                                                std::size_t threads = 1) {
  if (corpus.samples.empty()) throw IngestionError("calibration", "empty corpus");
  std::vector<ForwardTrace> traces(corpus.size());
  parallel_for(corpus.size(), threads,
               [&](std::size_t i) { traces[i] = forward(model, corpus.samples[i], true); });
  return traces;
}

inline std::map<std::size_t, FeatureMatrix> features_from_traces(
    const std::vector<ForwardTrace>& traces, const CalibrationCorpus& corpus,
    const std::set<std::size_t>& layers, const TokenMasks* masks = nullptr) {
  if (traces.size() != corpus.size()) throw StateError("calibration", "trace/corpus size mismatch");
  if (masks != nullptr && masks->size() != corpus.size())
    throw ParameterError("calibration", "mask count does not match corpus size");
  const std::size_t max_layer = traces.empty() ? 0 : traces.front().residual.size() - 1;
  for (const std::size_t l : layers)
    if (l > max_layer)
      throw ParameterError("calibration", "layer " + std::to_string(l) + " outside [0, " +
                                              std::to_string(max_layer) + "]");

  std::vector<RowProvenance> prov;
  for (std::size_t s = 0; s < corpus.size(); ++s) {
    const auto& stream = corpus.samples[s];
    if (masks != nullptr && (*masks)[s].size() != stream.length())
      throw ParameterError("calibration", "mask for sample " + std::to_string(s) + " has wrong length");
    for (std::size_t p = 0; p < stream.length(); ++p)
      if (masks == nullptr || (*masks)[s][p]) prov.push_back({s, p, stream.modality(p)});
  }
  if (prov.empty()) throw ParameterError("calibration", "token masks keep no rows");

  std::map<std::size_t, FeatureMatrix> out;
  for (const std::size_t l : layers) {
    const std::size_t d = traces.front().residual[l].cols();
    FeatureMatrix fm{l, Matrix(prov.size(), d), prov};
    for (std::size_t r = 0; r < prov.size(); ++r) {
      const auto src = traces[prov[r].sample].residual[l].row(prov[r].position);
      std::copy(src.begin(), src.end(), fm.data.row(r).begin());
    }
    out.emplace(l, std::move(fm));
  }
  return out;
}

/// Layer indices address residual streams: 0 is the embedding output and
/// layer ℓ's input is x^(ℓ), so valid indices are [0, L].
inline std::map<std::size_t, FeatureMatrix> extract_features(const Model& model,
                                                             const CalibrationCorpus& corpus,
                                                             const std::set<std::size_t>& layers,
                                                             const TokenMasks* masks = nullptr,
                                                             std::size_t threads = 1) {
  for (const std::size_t l : layers)
    if (l > model.config.n_layers)
      throw ParameterError("calibration", "layer " + std::to_string(l) + " outside [0, " +
                                              std::to_string(model.config.n_layers) + "]");
  return features_from_traces(capture_traces(model, corpus, threads), corpus, layers, masks);
}

}  // namespace shortlvlm

#endif  // SHORTLVLM_CALIBRATION_HPP
