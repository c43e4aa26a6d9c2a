#ifndef SHORTLVLM_TESTS_FIXTURES_HPP
#define SHORTLVLM_TESTS_FIXTURES_HPP

// Trained toy models shared by the slower suites. Training is deterministic,
// so a model is trained once and cached under SHORTLVLM_FIXTURE_DIR.

#include <filesystem>
#include <map>
#include <string>

#include "shortlvlm/archive.hpp"
#include "shortlvlm/calibration.hpp"
#include "shortlvlm/train.hpp"

#ifndef SHORTLVLM_FIXTURE_DIR
#define SHORTLVLM_FIXTURE_DIR "fixtures"
#endif

namespace fixtures {

inline constexpr std::size_t kTrainSteps = 1000;
inline constexpr double kTrainLr = 2e-3;

inline shortlvlm::SyntheticTask task() { return {}; }

inline shortlvlm::ModelConfig toy_config(std::uint64_t seed) {
  shortlvlm::ModelConfig c;
  c.seed = seed;
  return c;
}

inline const shortlvlm::Model& trained_model(std::uint64_t seed) {
  static std::map<std::uint64_t, shortlvlm::Model> cache;
  const auto it = cache.find(seed);
  if (it != cache.end()) return it->second;
  std::filesystem::create_directories(SHORTLVLM_FIXTURE_DIR);
  const std::string path = std::string(SHORTLVLM_FIXTURE_DIR) + "/toy_seed" + std::to_string(seed) + ".star";
  shortlvlm::Model m;
  if (std::filesystem::exists(path)) {
    m = shortlvlm::load_archive(path);
  } else {
    m = shortlvlm::train_toy(shortlvlm::init_model(toy_config(seed)), task(), kTrainSteps, kTrainLr);
    const std::string tmp = path + ".tmp";
    shortlvlm::save_archive(m, tmp, {{"steps", kTrainSteps}, {"lr", kTrainLr}});
    std::filesystem::rename(tmp, path);
  }
  return cache.emplace(seed, std::move(m)).first->second;
}

/// Identical affine layers x ↦ x(I + A) with A² = 0: no norm, identity
/// activation, zero attention output, A = W_up·W_down mapping the first half
/// of the coordinates into the second half.
inline shortlvlm::Model linear_model(std::size_t layers = 4, std::size_t dim = 8, std::uint64_t seed = 3) {
  shortlvlm::ModelConfig c;
  c.dim = dim;
  c.n_layers = layers;
  c.n_heads = 2;
  c.mlp_hidden = dim;
  c.seed = seed;
  c.activation = shortlvlm::Activation::kIdentity;
  c.use_norm = false;
  shortlvlm::Model m = shortlvlm::init_model(c);
  shortlvlm::Rng rng(seed + 100);
  m.weights.tok_emb = shortlvlm::random_normal(rng, c.vocab_size, dim, 1.0f);
  m.weights.pos_emb = shortlvlm::random_normal(rng, c.max_seq, dim, 1.0f);
  shortlvlm::Matrix up = shortlvlm::random_normal(rng, dim, dim, 0.5f);
  shortlvlm::Matrix down = shortlvlm::random_normal(rng, dim, dim, 0.5f);
  for (std::size_t i = dim / 2; i < dim; ++i)
    for (std::size_t j = 0; j < dim; ++j) up(i, j) = 0.0f;
  for (std::size_t i = 0; i < dim; ++i)
    for (std::size_t j = 0; j < dim / 2; ++j) down(i, j) = 0.0f;
  for (auto& l : m.weights.layers) {
    l.wo = shortlvlm::Matrix(dim, dim);
    l.w_up = up;
    l.w_down = down;
  }
  return m;
}

inline shortlvlm::CalibrationCorpus corpus(std::size_t n, std::uint64_t seed, const std::string& name) {
  return {task().generate(n, seed, name), seed, name};
}

inline shortlvlm::CalibrationCorpus calibration(std::uint64_t model_seed, std::size_t n = 256) {
  return corpus(n, 1000 + model_seed, "calib");
}

inline shortlvlm::CalibrationCorpus evaluation(std::uint64_t model_seed, std::size_t n = 1000) {
  return corpus(n, 5000 + model_seed, "eval");
}

}  // namespace fixtures

#endif  // SHORTLVLM_TESTS_FIXTURES_HPP
