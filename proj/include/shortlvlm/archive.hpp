#ifndef SHORTLVLM_ARCHIVE_HPP
#define SHORTLVLM_ARCHIVE_HPP

// Tensor archive ("STARCH01").
//
//   bytes [0, 8)    magic "STARCH01"
//   bytes [8, 16)   header length H, uint64 little-endian
//   bytes [16, 16+H) UTF-8 JSON header, space padded so the payload starts
//                   on a 64-byte boundary
//   payload         float32 little-endian tensors; each record's offset is
//                   relative to the payload start and 64-byte aligned
//
// Header keys: "tensors" (records {name, shape, dtype, offset, length}),
// "digest" (fnv1a64 of the canonical header without this key), plus any
// caller keys such as "config" or "provenance". The JSON is written in
// canonical form (sorted keys, no whitespace) and must read back to the
// same bytes, so any edit to the header is detected.

#include <bit>
#include <cstdint>
#include <cstring>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "shortlvlm/error.hpp"
#include "shortlvlm/hash.hpp"
#include "shortlvlm/linalg.hpp"
#include "shortlvlm/model.hpp"

namespace shortlvlm {

inline constexpr std::string_view kArchiveMagic = "STARCH01";
inline constexpr std::size_t kArchiveAlign = 64;

class TensorArchive {
 public:
  /// Caller-owned header keys ("tensors" and "digest" are reserved).
  nlohmann::json header = nlohmann::json::object();

  void add(std::string name, Matrix tensor) {
    if (index_.count(name) != 0) throw ParameterError("archive", "duplicate tensor '" + name + "'");
    index_.emplace(name, tensors_.size());
    tensors_.emplace_back(std::move(name), std::move(tensor));
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const Matrix& get(const std::string& name) const {
    const auto it = index_.find(name);
    if (it == index_.end()) throw StateError("archive", "no tensor named '" + name + "'");
    return tensors_[it->second].second;
  }

  const std::vector<std::pair<std::string, Matrix>>& tensors() const { return tensors_; }

  std::string serialize() const {
    nlohmann::json h = header;
    if (!h.is_object()) throw ParameterError("archive", "header must be a JSON object");
    nlohmann::json records = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& [name, m] : tensors_) {
      const std::uint64_t length = m.size() * sizeof(float);
      records.push_back({{"name", name},
                         {"shape", {m.rows(), m.cols()}},
                         {"dtype", "f32"},
                         {"offset", offset},
                         {"length", length}});
      offset = align_up(offset + length);
    }
    h["tensors"] = std::move(records);
    h.erase("digest");
    h["digest"] = content_digest(h.dump());
    std::string text = h.dump();
    const std::size_t padded = align_up(16 + text.size()) - 16;
    text.resize(padded, ' ');

    std::string out;
    out.reserve(16 + text.size() + offset);
    out.append(kArchiveMagic);
    append_u64(out, text.size());
    out.append(text);
    const std::size_t payload_start = out.size();
    for (const auto& [name, m] : tensors_) {
      out.resize(payload_start + align_up(out.size() - payload_start), '\0');
      for (const float v : m.values()) append_f32(out, v);
    }
    return out;
  }

  static TensorArchive parse(std::string_view bytes) {
    if (bytes.size() < 16) throw FormatError("archive", "truncated preamble", bytes.size());
    if (bytes.substr(0, 8) != kArchiveMagic) throw FormatError("archive", "bad magic", 0);
    const std::uint64_t hlen = read_u64(bytes.data() + 8);
    if (hlen > bytes.size() - 16) throw FormatError("archive", "truncated header", bytes.size());
    if ((16 + hlen) % kArchiveAlign != 0)
      throw FormatError("archive", "header length breaks payload alignment", 8);
    const std::string_view text = bytes.substr(16, hlen);

    nlohmann::json h;
    try {
      h = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError("archive", std::string("header is not valid JSON: ") + e.what(), 16 + e.byte);
    }
    if (!h.is_object()) throw FormatError("archive", "header is not an object", 16);
    const std::string canonical = h.dump();
    if (text.substr(0, canonical.size()) != canonical ||
        text.find_first_not_of(' ', canonical.size()) != std::string_view::npos) {
      std::size_t at = 0;
      while (at < canonical.size() && at < text.size() && text[at] == canonical[at]) ++at;
      throw FormatError("archive", "header is not in canonical form", 16 + at);
    }
    if (!h.contains("digest") || !h["digest"].is_string())
      throw FormatError("archive", "header lacks digest", 16);
    const std::string digest = h["digest"];
    h.erase("digest");
    if (content_digest(h.dump()) != digest) throw FormatError("archive", "header digest mismatch", 16);

    const std::size_t payload_start = 16 + hlen;
    TensorArchive ar;
    if (!h.contains("tensors") || !h["tensors"].is_array())
      throw FormatError("archive", "header lacks tensor records", 16);
    std::uint64_t expected_offset = 0;
    for (const auto& rec : h["tensors"]) {
      std::string name;
      std::vector<std::size_t> shape;
      std::string dtype;
      std::uint64_t offset = 0, length = 0;
      try {
        rec.at("name").get_to(name);
        rec.at("shape").get_to(shape);
        rec.at("dtype").get_to(dtype);
        rec.at("offset").get_to(offset);
        rec.at("length").get_to(length);
      } catch (const nlohmann::json::exception& e) {
        throw FormatError("archive", std::string("malformed tensor record: ") + e.what(), 16);
      }
      if (dtype != "f32") throw FormatError("archive", "unsupported dtype '" + dtype + "'", 16);
      if (shape.size() != 2) throw FormatError("archive", "tensor '" + name + "' is not 2-D", 16);
      if (offset != expected_offset || offset % kArchiveAlign != 0)
        throw FormatError("archive", "tensor '" + name + "' misplaced", payload_start + offset);
      if (length != shape[0] * shape[1] * sizeof(float))
        throw FormatError("archive", "tensor '" + name + "' length/shape mismatch", payload_start + offset);
      if (payload_start + offset + length > bytes.size())
        throw FormatError("archive", "tensor '" + name + "' truncated", bytes.size());
      std::vector<float> data(shape[0] * shape[1]);
      const char* src = bytes.data() + payload_start + offset;
      for (std::size_t i = 0; i < data.size(); ++i) data[i] = read_f32(src + 4 * i);
      try {
        ar.add(name, Matrix(shape[0], shape[1], std::move(data)));
      } catch (const Error& e) {
        throw FormatError("archive", e.what(), payload_start + offset);
      }
      expected_offset = align_up(offset + length);
    }
    const std::uint64_t used = ar.tensors_.empty()
                                   ? 0
                                   : h["tensors"].back()["offset"].get<std::uint64_t>() +
                                         h["tensors"].back()["length"].get<std::uint64_t>();
    if (payload_start + used != bytes.size())
      throw FormatError("archive", "trailing bytes after payload", payload_start + used);
    h.erase("tensors");
    ar.header = std::move(h);
    return ar;
  }

  void save(const std::string& path) const { write_file(path, serialize()); }
  static TensorArchive load(const std::string& path) { return parse(read_file(path)); }

 private:
  static std::uint64_t align_up(std::uint64_t v) { return (v + kArchiveAlign - 1) / kArchiveAlign * kArchiveAlign; }

  static void append_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  static std::uint64_t read_u64(const char* p) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
    return v;
  }
  static void append_f32(std::string& out, float f) {
    const auto bits = std::bit_cast<std::uint32_t>(f);
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
  }
  static float read_f32(const char* p) {
    std::uint32_t bits = 0;
    for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[i])) << (8 * i);
    return std::bit_cast<float>(bits);
  }

  std::vector<std::pair<std::string, Matrix>> tensors_;
  std::map<std::string, std::size_t> index_;
};

inline TensorArchive model_to_archive(const Model& model, const nlohmann::json& provenance = nullptr) {
  TensorArchive ar;
  ar.header["config"] = model.config;
  if (!provenance.is_null()) ar.header["provenance"] = provenance;
  visit_tensors(model.weights, [&](const std::string& name, const Matrix& t) { ar.add(name, t); });
  return ar;
}

inline Model model_from_archive(const TensorArchive& ar) {
  if (!ar.header.contains("config")) throw FormatError("archive", "header lacks config", 16);
  Model m;
  try {
    m.config = ar.header.at("config").get<ModelConfig>();
    m.config.validate(1);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("archive", std::string("bad config: ") + e.what(), 16);
  } catch (const ParameterError& e) {
    throw FormatError("archive", e.what(), 16);
  }
  m.weights = zero_params<float>(m.config);
  std::size_t seen = 0;
  visit_tensors(m.weights, [&](const std::string& name, Matrix& t) {
    if (!ar.contains(name)) throw FormatError("archive", "missing tensor '" + name + "'", 16);
    const Matrix& src = ar.get(name);
    if (src.rows() != t.rows() || src.cols() != t.cols())
      throw FormatError("archive", "tensor '" + name + "' shape does not match config", 16);
    t = src;
    ++seen;
  });
  if (seen != ar.tensors().size()) throw FormatError("archive", "unexpected extra tensors", 16);
  return m;
}

inline void save_archive(const Model& model, const std::string& path,
                         const nlohmann::json& provenance = nullptr) {
  model_to_archive(model, provenance).save(path);
}

inline Model load_archive(const std::string& path) { return model_from_archive(TensorArchive::load(path)); }

}  // namespace shortlvlm

#endif  // SHORTLVLM_ARCHIVE_HPP
