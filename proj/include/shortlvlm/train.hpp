#ifndef SHORTLVLM_TRAIN_HPP
#define SHORTLVLM_TRAIN_HPP

// Synthetic bimodal task plus an Adam trainer with hand-written backprop.
// The trainer only exists to give pruning experiments a non-degenerate model.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "shortlvlm/model.hpp"

namespace shortlvlm {

enum class TaskKind { kMajority, kMembership };

/// Query-dependent question over the visual prefix. Text is [marker, query];
/// the answer token (yes/no) is predicted at the final position.
///   majority:   more than half of the visual tokens equal the query
///   membership: the query occurs anywhere in the visual prefix
struct SyntheticTask {
  TaskKind kind = TaskKind::kMajority;
  std::size_t visual_len = 12;
  std::size_t n_symbols = 6;

  static constexpr int kNoToken = 0;
  static constexpr int kYesToken = 1;
  static constexpr int kMarkerToken = 2;
  static constexpr int kFirstSymbol = 3;

  std::size_t vocab_needed() const { return kFirstSymbol + n_symbols; }
  std::size_t seq_len() const { return visual_len + 2; }

  TokenStream sample(Rng& rng, const std::string& id = {}) const {
    const int q = kFirstSymbol + static_cast<int>(uniform_index(rng, n_symbols));
    const bool yes = uniform_index(rng, 2) == 1;
    std::size_t matches = 0;
    if (kind == TaskKind::kMajority) {
      const std::size_t half = visual_len / 2;  // yes needs matches > visual_len / 2
      matches = yes ? half + 1 + uniform_index(rng, visual_len - half) : uniform_index(rng, half + 1);
    } else {
      matches = yes ? 1 + uniform_index(rng, 2) : 0;
    }
    TokenStream s;
    s.id = id;
    s.visual.resize(visual_len);
    for (std::size_t i = 0; i < visual_len; ++i) {
      if (i < matches) {
        s.visual[i] = q;
      } else {
        int other = kFirstSymbol + static_cast<int>(uniform_index(rng, n_symbols - 1));
        if (other >= q) ++other;
        s.visual[i] = other;
      }
    }
    shuffle_in_place(s.visual, rng());
    s.text = {kMarkerToken, q};
    s.label = yes ? kYesToken : kNoToken;
    return s;
  }

  std::vector<TokenStream> generate(std::size_t n, std::uint64_t seed,
                                    const std::string& prefix = "s") const {
    Rng rng(seed);
    std::vector<TokenStream> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) out.push_back(sample(rng, prefix + std::to_string(i)));
    return out;
  }
};

namespace detail {

template <typename T>
void add_into(BasicMatrix<T>& dst, const BasicMatrix<T>& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst.values()[i] += src.values()[i];
}

// Backward of y = x·r·g. Accumulates into dgain, returns dx.
template <typename T>
BasicMatrix<T> rms_norm_backward(const BasicMatrix<T>& x, const std::vector<T>& inv,
                                 const BasicMatrix<T>& gain, const BasicMatrix<T>& dy,
                                 BasicMatrix<T>& dgain) {
  const std::size_t d = x.cols();
  BasicMatrix<T> dx(x.rows(), d);
  for (std::size_t t = 0; t < x.rows(); ++t) {
    const double r = static_cast<double>(inv[t]);
    double xz = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      const double z = static_cast<double>(dy(t, i)) * static_cast<double>(gain(0, i));
      xz += static_cast<double>(x(t, i)) * z;
      dgain(0, i) += static_cast<T>(static_cast<double>(dy(t, i)) * static_cast<double>(x(t, i)) * r);
    }
    const double coef = r * r * r * xz / static_cast<double>(d);
    for (std::size_t i = 0; i < d; ++i) {
      const double z = static_cast<double>(dy(t, i)) * static_cast<double>(gain(0, i));
      dx(t, i) = static_cast<T>(r * z - coef * static_cast<double>(x(t, i)));
    }
  }
  return dx;
}

}  // namespace detail

/// Backprop through the cached forward. dlogits is tokens×vocab; gradients
/// are accumulated into `grads`.
template <typename T, typename Acc = double>
void backward(const ModelConfig& c, const ModelParams<T>& p, const ForwardCache<T>& fc,
              const BasicMatrix<T>& dlogits, ModelParams<T>& grads) {
  const std::size_t n = fc.ids.size(), hd = c.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  detail::add_into(grads.head, matmul_tn<Acc>(fc.nf, dlogits));
  auto dnf = matmul_nt<Acc>(dlogits, p.head);
  const auto& x_last = fc.layers.empty() ? fc.x0 : fc.layers.back().x_out;
  BasicMatrix<T> dx = c.use_norm ? detail::rms_norm_backward(x_last, fc.invf, p.final_norm, dnf,
                                                             grads.final_norm)
                                 : dnf;

  for (std::size_t li = p.layers.size(); li-- > 0;) {
    const auto& lp = p.layers[li];
    const auto& lc = fc.layers[li];
    auto& lg = grads.layers[li];

    // MLP branch
    detail::add_into(lg.w_down, matmul_tn<Acc>(lc.up_act, dx));
    auto dact = matmul_nt<Acc>(dx, lp.w_down);
    if (c.activation == Activation::kGelu) {
      for (std::size_t i = 0; i < dact.size(); ++i)
        dact.values()[i] = static_cast<T>(static_cast<double>(dact.values()[i]) *
                                          detail::gelu_grad(static_cast<double>(lc.up_pre.values()[i])));
    }
    detail::add_into(lg.w_up, matmul_tn<Acc>(lc.n2, dact));
    auto dn2 = matmul_nt<Acc>(dact, lp.w_up);
    auto dmid = c.use_norm ? detail::rms_norm_backward(lc.x_mid, lc.inv2, lp.mlp_norm, dn2, lg.mlp_norm)
                           : dn2;
    detail::add_into(dmid, dx);

    // attention branch
    detail::add_into(lg.wo, matmul_tn<Acc>(lc.ctx, dmid));
    auto dctx = matmul_nt<Acc>(dmid, lp.wo);
    BasicMatrix<T> dq(n, c.dim), dk(n, c.dim), dv(n, c.dim);
    for (std::size_t h = 0; h < c.n_heads; ++h) {
      const auto& prob = lc.probs[h];
      const auto qh = detail::head_slice(lc.q, h, hd);
      const auto kh = detail::head_slice(lc.k, h, hd);
      const auto vh = detail::head_slice(lc.v, h, hd);
      const auto dch = detail::head_slice(dctx, h, hd);
      const auto dprob = matmul_nt<Acc>(dch, vh);
      const auto dvh = matmul_tn<Acc>(prob, dch);
      BasicMatrix<T> dscore(n, n);
      for (std::size_t i = 0; i < n; ++i) {
        double rowdot = 0.0;
        for (std::size_t j = 0; j <= i; ++j)
          rowdot += static_cast<double>(dprob(i, j)) * static_cast<double>(prob(i, j));
        for (std::size_t j = 0; j <= i; ++j)
          dscore(i, j) = static_cast<T>(static_cast<double>(prob(i, j)) *
                                        (static_cast<double>(dprob(i, j)) - rowdot) * scale);
      }
      const auto dqh = matmul_acc<Acc>(dscore, kh);
      const auto dkh = matmul_tn<Acc>(dscore, qh);
      for (std::size_t t = 0; t < n; ++t) {
        for (std::size_t i = 0; i < hd; ++i) {
          dq(t, h * hd + i) = dqh(t, i);
          dk(t, h * hd + i) = dkh(t, i);
          dv(t, h * hd + i) = dvh(t, i);
        }
      }
    }
    detail::add_into(lg.wq, matmul_tn<Acc>(lc.n1, dq));
    detail::add_into(lg.wk, matmul_tn<Acc>(lc.n1, dk));
    detail::add_into(lg.wv, matmul_tn<Acc>(lc.n1, dv));
    auto dn1 = matmul_nt<Acc>(dq, lp.wq);
    detail::add_into(dn1, matmul_nt<Acc>(dk, lp.wk));
    detail::add_into(dn1, matmul_nt<Acc>(dv, lp.wv));
    dx = c.use_norm ? detail::rms_norm_backward(lc.x_in, lc.inv1, lp.attn_norm, dn1, lg.attn_norm)
                    : dn1;
    detail::add_into(dx, dmid);
  }

  for (std::size_t t = 0; t < n; ++t) {
    const auto id = static_cast<std::size_t>(fc.ids[t]);
    for (std::size_t i = 0; i < c.dim; ++i) {
      grads.tok_emb(id, i) += dx(t, i);
      grads.pos_emb(t, i) += dx(t, i);
    }
  }
}

/// Cross-entropy of the final-position logits against `label`; writes
/// dL/dlogits (zero except the final row) when dlogits is non-null.
template <typename T>
double final_position_loss(const BasicMatrix<T>& logits, int label, BasicMatrix<T>* dlogits) {
  const std::size_t last = logits.rows() - 1, v = logits.cols();
  double mx = -INFINITY;
  for (std::size_t i = 0; i < v; ++i) mx = std::max(mx, static_cast<double>(logits(last, i)));
  double sum = 0.0;
  for (std::size_t i = 0; i < v; ++i) sum += std::exp(static_cast<double>(logits(last, i)) - mx);
  const double logz = mx + std::log(sum);
  if (dlogits != nullptr) {
    *dlogits = BasicMatrix<T>(logits.rows(), v);
    for (std::size_t i = 0; i < v; ++i) {
      const double pi = std::exp(static_cast<double>(logits(last, i)) - logz);
      (*dlogits)(last, i) = static_cast<T>(pi - (static_cast<int>(i) == label ? 1.0 : 0.0));
    }
  }
  return logz - static_cast<double>(logits(last, static_cast<std::size_t>(label)));
}

/// Loss and gradient of one labeled stream.
template <typename T, typename Acc = double>
double loss_and_grad(const ModelConfig& c, const ModelParams<T>& p, const TokenStream& s,
                     ModelParams<T>* grads) {
  if (!s.label) throw InputError("train", "stream '" + s.id + "' has no label");
  const auto fc = forward_cache<T, Acc>(c, p, s);
  BasicMatrix<T> dlogits;
  const double loss = final_position_loss(fc.logits, *s.label, grads ? &dlogits : nullptr);
  if (grads != nullptr) backward<T, Acc>(c, p, fc, dlogits, *grads);
  return loss;
}

inline double mean_loss(const Model& m, const std::vector<TokenStream>& data) {
  double total = 0.0;
  for (const auto& s : data) total += loss_and_grad<float>(m.config, m.weights, s, nullptr);
  return total / static_cast<double>(data.size());
}

struct TrainOptions {
  std::size_t batch_size = 16;
  std::size_t heldout_samples = 256;
  std::uint64_t data_seed = 1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip = 1.0;  // global L2 norm; <= 0 disables
  std::size_t warmup_steps = 50;
  double final_lr_fraction = 0.1;  // cosine decay from lr down to lr * this
  bool verbose = false;
};

struct TrainReport {
  double initial_heldout_loss = 0.0;
  double final_heldout_loss = 0.0;
  std::vector<double> batch_losses;
};

/// Adam on the synthetic task. Deterministic given (model, task, options).
inline Model train_toy(const Model& start, const SyntheticTask& task, std::size_t steps, double lr,
                       const TrainOptions& opt = {}, TrainReport* report = nullptr) {
  const ModelConfig& c = start.config;
  if (task.vocab_needed() > c.vocab_size || task.seq_len() > c.max_seq)
    throw ParameterError("train", "task does not fit model vocab/max_seq");
  if (opt.batch_size == 0) throw ParameterError("train", "batch_size must be >= 1");

  Model model = start;
  const auto heldout = task.generate(opt.heldout_samples, opt.data_seed ^ 0x9e3779b97f4a7c15ULL, "h");
  TrainReport rep;
  rep.initial_heldout_loss = mean_loss(model, heldout);

  auto m1 = zero_params<float>(c), m2 = zero_params<float>(c);
  Rng data_rng(opt.data_seed);
  for (std::size_t step = 0; step < steps; ++step) {
    auto grads = zero_params<float>(c);
    double batch_loss = 0.0;
    for (std::size_t b = 0; b < opt.batch_size; ++b) {
      const auto s = task.sample(data_rng);
      batch_loss += loss_and_grad<float, float>(c, model.weights, s, &grads);
    }
    batch_loss /= static_cast<double>(opt.batch_size);
    if (!std::isfinite(batch_loss))
      throw TrainingError("train", "loss diverged at step " + std::to_string(step));
    rep.batch_losses.push_back(batch_loss);

    double sq = 0.0;
    visit_tensors(grads, [&](const std::string&, Matrix& g) {
      for (float& v : g.values()) {
        v /= static_cast<float>(opt.batch_size);
        sq += static_cast<double>(v) * v;
      }
    });
    const double gnorm = std::sqrt(sq);
    const double clip = (opt.grad_clip > 0 && gnorm > opt.grad_clip) ? opt.grad_clip / gnorm : 1.0;

    const double t = static_cast<double>(step + 1);
    double step_lr = lr;
    if (step < opt.warmup_steps) {
      step_lr = lr * t / static_cast<double>(opt.warmup_steps);
    } else if (steps > opt.warmup_steps) {
      const double progress = static_cast<double>(step - opt.warmup_steps) /
                              static_cast<double>(steps - opt.warmup_steps);
      step_lr = lr * (opt.final_lr_fraction +
                      (1.0 - opt.final_lr_fraction) * 0.5 * (1.0 + std::cos(M_PI * progress)));
    }
    const double bc1 = 1.0 - std::pow(opt.beta1, t), bc2 = 1.0 - std::pow(opt.beta2, t);
    std::vector<std::span<float>> gs, ms, vs;
    visit_tensors(grads, [&](const std::string&, Matrix& g) { gs.push_back(g.values()); });
    visit_tensors(m1, [&](const std::string&, Matrix& g) { ms.push_back(g.values()); });
    visit_tensors(m2, [&](const std::string&, Matrix& g) { vs.push_back(g.values()); });
    std::size_t idx = 0;
    bool finite = true;
    visit_tensors(model.weights, [&](const std::string&, Matrix& w) {
      auto g = gs[idx], m = ms[idx], v = vs[idx];
      ++idx;
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double gi = static_cast<double>(g[i]) * clip;
        m[i] = static_cast<float>(opt.beta1 * m[i] + (1.0 - opt.beta1) * gi);
        v[i] = static_cast<float>(opt.beta2 * v[i] + (1.0 - opt.beta2) * gi * gi);
        const double upd = step_lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + opt.adam_eps);
        w.values()[i] = static_cast<float>(static_cast<double>(w.values()[i]) - upd);
        finite = finite && std::isfinite(w.values()[i]);
      }
    });
    if (!finite) throw TrainingError("train", "parameters became non-finite at step " + std::to_string(step));
  }
  rep.final_heldout_loss = mean_loss(model, heldout);
  if (!std::isfinite(rep.final_heldout_loss)) throw TrainingError("train", "held-out loss is not finite");
  if (report != nullptr) *report = std::move(rep);
  return model;
}

}  // namespace shortlvlm

#endif  // SHORTLVLM_TRAIN_HPP
