#ifndef SHORTLVLM_MODEL_HPP
#define SHORTLVLM_MODEL_HPP

// Pre-norm residual decoder-only transformer over a visual-prefix /
// text-suffix token stream. Row-vector convention throughout: a layer maps
// its normalized input n (tokens×D) through n·W.

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "shortlvlm/error.hpp"
#include "shortlvlm/linalg.hpp"
#include "shortlvlm/random.hpp"

namespace shortlvlm {

enum class Activation { kGelu, kIdentity };

inline const char* to_string(Activation a) { return a == Activation::kGelu ? "gelu" : "identity"; }

inline Activation activation_from_string(std::string_view s) {
  if (s == "gelu") return Activation::kGelu;
  if (s == "identity") return Activation::kIdentity;
  throw ParameterError("model", "unknown activation '" + std::string(s) + "'");
}

struct ModelConfig {
  std::size_t vocab_size = 16;
  std::size_t dim = 64;
  std::size_t n_layers = 12;
  std::size_t n_heads = 4;
  std::size_t mlp_hidden = 128;
  std::size_t max_seq = 32;
  std::uint64_t seed = 0;
  // Test switches: identity activation and no normalization make a layer
  // an affine map of its input.
  Activation activation = Activation::kGelu;
  bool use_norm = true;

  std::size_t head_dim() const { return dim / n_heads; }

  /// min_layers is 2 for fresh models; pruned models may go down to 1.
  void validate(std::size_t min_layers = 2) const {
    auto need = [](bool ok, const std::string& what) {
      if (!ok) throw ParameterError("model", "invalid config: " + what);
    };
    need(vocab_size >= 1 && dim >= 1 && n_heads >= 1 && mlp_hidden >= 1 && max_seq >= 1,
         "all counts must be >= 1");
    need(dim % n_heads == 0, "dim must be divisible by n_heads");
    need(n_layers >= min_layers, "n_layers must be >= " + std::to_string(min_layers));
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"vocab_size", c.vocab_size}, {"dim", c.dim},
                     {"n_layers", c.n_layers},     {"n_heads", c.n_heads},
                     {"mlp_hidden", c.mlp_hidden}, {"max_seq", c.max_seq},
                     {"seed", c.seed},             {"activation", to_string(c.activation)},
                     {"use_norm", c.use_norm}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("vocab_size").get_to(c.vocab_size);
  j.at("dim").get_to(c.dim);
  j.at("n_layers").get_to(c.n_layers);
  j.at("n_heads").get_to(c.n_heads);
  j.at("mlp_hidden").get_to(c.mlp_hidden);
  j.at("max_seq").get_to(c.max_seq);
  j.at("seed").get_to(c.seed);
  c.activation = activation_from_string(j.at("activation").get<std::string>());
  j.at("use_norm").get_to(c.use_norm);
}

template <typename T>
struct LayerParams {
  BasicMatrix<T> attn_norm;  // 1×D gains
  BasicMatrix<T> wq, wk, wv, wo;  // D×D
  BasicMatrix<T> mlp_norm;   // 1×D gains
  BasicMatrix<T> w_up;       // D×mlp_hidden
  BasicMatrix<T> w_down;     // mlp_hidden×D

  friend bool operator==(const LayerParams&, const LayerParams&) = default;
};

template <typename T>
struct ModelParams {
  BasicMatrix<T> tok_emb;     // vocab×D
  BasicMatrix<T> pos_emb;     // max_seq×D
  std::vector<LayerParams<T>> layers;
  BasicMatrix<T> final_norm;  // 1×D
  BasicMatrix<T> head;        // D×vocab

  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

using LayerWeights = LayerParams<float>;

/// Visits every tensor with its archive name, in a fixed order.
template <typename Params, typename Fn>
void visit_layer_tensors(Params& layer, const std::string& prefix, Fn&& fn) {
  fn(prefix + "attn_norm", layer.attn_norm);
  fn(prefix + "wq", layer.wq);
  fn(prefix + "wk", layer.wk);
  fn(prefix + "wv", layer.wv);
  fn(prefix + "wo", layer.wo);
  fn(prefix + "mlp_norm", layer.mlp_norm);
  fn(prefix + "w_up", layer.w_up);
  fn(prefix + "w_down", layer.w_down);
}

template <typename Params, typename Fn>
void visit_tensors(Params& params, Fn&& fn) {
  fn(std::string("tok_emb"), params.tok_emb);
  fn(std::string("pos_emb"), params.pos_emb);
  for (std::size_t l = 0; l < params.layers.size(); ++l)
    visit_layer_tensors(params.layers[l], "layers." + std::to_string(l) + ".", fn);
  fn(std::string("final_norm"), params.final_norm);
  fn(std::string("head"), params.head);
}

template <typename U, typename T>
ModelParams<U> cast_params(const ModelParams<T>& p) {
  ModelParams<U> out;
  out.tok_emb = p.tok_emb.template cast<U>();
  out.pos_emb = p.pos_emb.template cast<U>();
  out.final_norm = p.final_norm.template cast<U>();
  out.head = p.head.template cast<U>();
  for (const auto& l : p.layers) {
    LayerParams<U> c;
    c.attn_norm = l.attn_norm.template cast<U>();
    c.wq = l.wq.template cast<U>();
    c.wk = l.wk.template cast<U>();
    c.wv = l.wv.template cast<U>();
    c.wo = l.wo.template cast<U>();
    c.mlp_norm = l.mlp_norm.template cast<U>();
    c.w_up = l.w_up.template cast<U>();
    c.w_down = l.w_down.template cast<U>();
    out.layers.push_back(std::move(c));
  }
  return out;
}

/// Zero-valued parameter set shaped like `config` (gradient / optimizer buffers).
template <typename T>
ModelParams<T> zero_params(const ModelConfig& c) {
  ModelParams<T> p;
  p.tok_emb = BasicMatrix<T>(c.vocab_size, c.dim);
  p.pos_emb = BasicMatrix<T>(c.max_seq, c.dim);
  p.final_norm = BasicMatrix<T>(1, c.dim);
  p.head = BasicMatrix<T>(c.dim, c.vocab_size);
  p.layers.resize(c.n_layers);
  for (auto& l : p.layers) {
    l.attn_norm = BasicMatrix<T>(1, c.dim);
    l.wq = BasicMatrix<T>(c.dim, c.dim);
    l.wk = BasicMatrix<T>(c.dim, c.dim);
    l.wv = BasicMatrix<T>(c.dim, c.dim);
    l.wo = BasicMatrix<T>(c.dim, c.dim);
    l.mlp_norm = BasicMatrix<T>(1, c.dim);
    l.w_up = BasicMatrix<T>(c.dim, c.mlp_hidden);
    l.w_down = BasicMatrix<T>(c.mlp_hidden, c.dim);
  }
  return p;
}

struct Model {
  ModelConfig config;
  ModelParams<float> weights;

  friend bool operator==(const Model&, const Model&) = default;
};

inline constexpr float kInitStd = 0.02f;

/// Normal(0, 0.02) weights, unit norm gains; bit-deterministic per seed.
inline Model init_model(const ModelConfig& config) {
  config.validate();
  Rng rng(config.seed);
  Model m{config, zero_params<float>(config)};
  auto fill = [&](const std::string& name, Matrix& t) {
    if (name.ends_with("norm")) {
      for (float& v : t.values()) v = 1.0f;
    } else {
      t = random_normal(rng, t.rows(), t.cols(), kInitStd);
    }
  };
  visit_tensors(m.weights, fill);
  return m;
}

enum class Modality : unsigned char { kVisual = 0, kText = 1 };

struct TokenStream {
  std::string id;
  std::vector<int> visual;
  std::vector<int> text;
  std::optional<int> label;

  std::size_t length() const { return visual.size() + text.size(); }
  std::size_t visual_count() const { return visual.size(); }
  std::size_t text_count() const { return text.size(); }

  Modality modality(std::size_t pos) const {
    return pos < visual.size() ? Modality::kVisual : Modality::kText;
  }

  std::vector<int> tokens() const {
    std::vector<int> t = visual;
    t.insert(t.end(), text.begin(), text.end());
    return t;
  }
};

inline void validate_stream(const ModelConfig& c, const TokenStream& s) {
  if (s.visual.empty() || s.text.empty())
    throw InputError("model", "stream '" + s.id + "' needs >= 1 visual and >= 1 text token");
  if (s.length() > c.max_seq)
    throw InputError("model", "stream '" + s.id + "' length " + std::to_string(s.length()) +
                                  " exceeds max_seq " + std::to_string(c.max_seq));
  for (const int t : s.tokens())
    if (t < 0 || static_cast<std::size_t>(t) >= c.vocab_size)
      throw InputError("model", "token id " + std::to_string(t) + " outside vocabulary");
}

namespace detail {

inline constexpr double kNormEps = 1e-5;
inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

inline double gelu(double u) {
  return 0.5 * u * (1.0 + std::tanh(kGeluC * (u + 0.044715 * u * u * u)));
}

inline double gelu_grad(double u) {
  const double th = std::tanh(kGeluC * (u + 0.044715 * u * u * u));
  return 0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * kGeluC * (1.0 + 3.0 * 0.044715 * u * u);
}

/// y_t = x_t · r_t ⊙ g with r_t = (mean(x_t²) + eps)^-1/2. inv receives r_t.
template <typename T>
BasicMatrix<T> rms_norm(const BasicMatrix<T>& x, const BasicMatrix<T>& gain, std::vector<T>& inv) {
  BasicMatrix<T> y(x.rows(), x.cols());
  inv.resize(x.rows());
  for (std::size_t t = 0; t < x.rows(); ++t) {
    double ss = 0.0;
    for (const T v : x.row(t)) ss += static_cast<double>(v) * static_cast<double>(v);
    const double r = 1.0 / std::sqrt(ss / static_cast<double>(x.cols()) + kNormEps);
    inv[t] = static_cast<T>(r);
    for (std::size_t i = 0; i < x.cols(); ++i)
      y(t, i) = static_cast<T>(static_cast<double>(x(t, i)) * r * static_cast<double>(gain(0, i)));
  }
  return y;
}

template <typename T>
BasicMatrix<T> head_slice(const BasicMatrix<T>& m, std::size_t h, std::size_t hd) {
  BasicMatrix<T> out(m.rows(), hd);
  for (std::size_t t = 0; t < m.rows(); ++t)
    for (std::size_t i = 0; i < hd; ++i) out(t, i) = m(t, h * hd + i);
  return out;
}

inline Mask causal_mask(std::size_t n) {
  Mask m(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j) m(i, j) = 1;
  return m;
}

}  // namespace detail

/// Every intermediate of one layer, kept for backprop and capture.
template <typename T>
struct LayerCache {
  BasicMatrix<T> x_in;
  BasicMatrix<T> n1;
  std::vector<T> inv1;
  BasicMatrix<T> q, k, v;
  std::vector<BasicMatrix<T>> probs;  // per head, tokens×tokens
  BasicMatrix<T> ctx;
  BasicMatrix<T> attn_out;
  BasicMatrix<T> x_mid;
  BasicMatrix<T> n2;
  std::vector<T> inv2;
  BasicMatrix<T> up_pre, up_act;
  BasicMatrix<T> mlp_out;
  BasicMatrix<T> x_out;
};

template <typename T>
struct ForwardCache {
  std::vector<int> ids;
  BasicMatrix<T> x0;
  std::vector<LayerCache<T>> layers;
  BasicMatrix<T> nf;
  std::vector<T> invf;
  BasicMatrix<T> logits;
};

/// Applies one transformer layer to residual stream x, filling `cache`.
/// Acc is the matmul accumulator (double everywhere except the trainer's
/// float fast path).
template <typename T, typename Acc = double>
void apply_layer(const ModelConfig& c, const LayerParams<T>& p, const BasicMatrix<T>& x,
                 LayerCache<T>& cache) {
  const std::size_t n = x.rows(), hd = c.head_dim();
  cache.x_in = x;
  cache.n1 = c.use_norm ? detail::rms_norm(x, p.attn_norm, cache.inv1) : x;
  cache.q = matmul_acc<Acc>(cache.n1, p.wq);
  cache.k = matmul_acc<Acc>(cache.n1, p.wk);
  cache.v = matmul_acc<Acc>(cache.n1, p.wv);
  const Mask mask = detail::causal_mask(n);
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  cache.probs.assign(c.n_heads, {});
  cache.ctx = BasicMatrix<T>(n, c.dim);
  for (std::size_t h = 0; h < c.n_heads; ++h) {
    const auto qh = detail::head_slice(cache.q, h, hd);
    const auto kh = detail::head_slice(cache.k, h, hd);
    const auto vh = detail::head_slice(cache.v, h, hd);
    auto scores = matmul_nt<Acc>(qh, kh);
    for (T& s : scores.values()) s = static_cast<T>(static_cast<double>(s) * scale);
    cache.probs[h] = row_softmax(scores, &mask);
    const auto ch = matmul_acc<Acc>(cache.probs[h], vh);
    for (std::size_t t = 0; t < n; ++t)
      for (std::size_t i = 0; i < hd; ++i) cache.ctx(t, h * hd + i) = ch(t, i);
  }
  cache.attn_out = matmul_acc<Acc>(cache.ctx, p.wo);
  cache.x_mid = add(x, cache.attn_out);
  cache.n2 = c.use_norm ? detail::rms_norm(cache.x_mid, p.mlp_norm, cache.inv2) : cache.x_mid;
  cache.up_pre = matmul_acc<Acc>(cache.n2, p.w_up);
  cache.up_act = cache.up_pre;
  if (c.activation == Activation::kGelu) {
    for (T& u : cache.up_act.values()) u = static_cast<T>(detail::gelu(static_cast<double>(u)));
  }
  cache.mlp_out = matmul_acc<Acc>(cache.up_act, p.w_down);
  cache.x_out = add(cache.x_mid, cache.mlp_out);
}

template <typename T, typename Acc = double>
ForwardCache<T> forward_cache(const ModelConfig& c, const ModelParams<T>& p, const TokenStream& s) {
  validate_stream(c, s);
  ForwardCache<T> fc;
  fc.ids = s.tokens();
  const std::size_t n = fc.ids.size();
  fc.x0 = BasicMatrix<T>(n, c.dim);
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t i = 0; i < c.dim; ++i)
      fc.x0(t, i) = p.tok_emb(static_cast<std::size_t>(fc.ids[t]), i) + p.pos_emb(t, i);
  fc.layers.resize(p.layers.size());
  const BasicMatrix<T>* x = &fc.x0;
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    apply_layer<T, Acc>(c, p.layers[l], *x, fc.layers[l]);
    x = &fc.layers[l].x_out;
  }
  fc.nf = c.use_norm ? detail::rms_norm(*x, p.final_norm, fc.invf) : *x;
  fc.logits = matmul_acc<Acc>(fc.nf, p.head);
  return fc;
}

struct ForwardTrace {
  std::vector<Matrix> residual;           // x^(0..L), each tokens×D
  std::vector<Matrix> attn_contribution;  // per layer, tokens×D
  std::vector<Matrix> mlp_contribution;   // per layer, tokens×D
  std::vector<std::vector<Matrix>> attention;  // [layer][head] tokens×tokens
  Matrix logits;                          // tokens×vocab
  bool captured = false;

  std::size_t n_layers() const { return attention.size(); }
};

inline ForwardTrace forward(const Model& model, const TokenStream& stream, bool capture = true) {
  auto fc = forward_cache(model.config, model.weights, stream);
  ForwardTrace tr;
  tr.logits = std::move(fc.logits);
  tr.captured = capture;
  if (!capture) return tr;
  tr.residual.push_back(std::move(fc.x0));
  for (auto& lc : fc.layers) {
    tr.attn_contribution.push_back(std::move(lc.attn_out));
    tr.mlp_contribution.push_back(std::move(lc.mlp_out));
    tr.attention.push_back(std::move(lc.probs));
    tr.residual.push_back(std::move(lc.x_out));
  }
  return tr;
}

/// Greedy next token at the final position.
inline int predict(const Model& model, const TokenStream& stream) {
  const auto tr = forward(model, stream, false);
  const auto last = tr.logits.row(tr.logits.rows() - 1);
  std::size_t best = 0;
  for (std::size_t i = 1; i < last.size(); ++i)
    if (last[i] > last[best]) best = i;
  return static_cast<int>(best);
}

/// Model with layer `index` (0-based) made a pure pass-through.
inline void zero_layer_output(Model& model, std::size_t index) {
  auto& l = model.weights.layers.at(index);
  for (float& v : l.wo.values()) v = 0.0f;
  for (float& v : l.w_down.values()) v = 0.0f;
}

}  // namespace shortlvlm

#endif  // SHORTLVLM_MODEL_HPP
