#pragma once

// LLaMA-style causal micro-transformer: pre-RMS-norm blocks, rotary
// positions, SwiGLU feed-forward, bias-free projections. The final-layer
// state of the appended </s> token is the sequence representation; the
// retriever L2-normalizes it, the reranker projects it to a scalar.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include <json.hpp>

#include "marrow/error.hpp"
#include "marrow/ops.hpp"
#include "marrow/tensor.hpp"
#include "marrow/text.hpp"

namespace marrow {

enum class HeadKind { none, scalar };

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t d_ff = 128;
  std::size_t max_seq_len = 256;
  double rope_theta = 10000.0;
  std::size_t lora_rank = 0;  // 0 disables adapters
  double lora_alpha = 8.0;
  HeadKind head = HeadKind::none;

  void validate() const {
    auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
    if (vocab_size <= kReservedTokens) fail("vocab_size must exceed the reserved tokens");
    if (d_model == 0 || n_layers == 0 || n_heads == 0 || d_ff == 0) fail("dimensions must be positive");
    if (d_model % n_heads != 0) fail("n_heads must divide d_model");
    if ((d_model / n_heads) % 2 != 0) fail("head dimension must be even for rotary embeddings");
    if (max_seq_len < 2) fail("max_seq_len must be at least 2");
    if (!(rope_theta > 0.0)) fail("rope_theta must be positive");
    if (lora_rank > 0 && !(lora_alpha > 0.0)) fail("lora_alpha must be positive");
  }

  nlohmann::json to_json() const {
    return {{"vocab_size", vocab_size}, {"d_model", d_model},       {"n_layers", n_layers},
            {"n_heads", n_heads},       {"d_ff", d_ff},             {"max_seq_len", max_seq_len},
            {"rope_theta", rope_theta}, {"lora_rank", lora_rank},   {"lora_alpha", lora_alpha},
            {"head", head == HeadKind::scalar ? "scalar" : "none"}};
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.d_model = j.at("d_model").get<std::size_t>();
    c.n_layers = j.at("n_layers").get<std::size_t>();
    c.n_heads = j.at("n_heads").get<std::size_t>();
    c.d_ff = j.at("d_ff").get<std::size_t>();
    c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
    c.rope_theta = j.at("rope_theta").get<double>();
    c.lora_rank = j.at("lora_rank").get<std::size_t>();
    c.lora_alpha = j.at("lora_alpha").get<double>();
    const auto head = j.at("head").get<std::string>();
    if (head != "scalar" && head != "none") throw DataError("unknown head kind '" + head + "'");
    c.head = head == "scalar" ? HeadKind::scalar : HeadKind::none;
    c.validate();
    return c;
  }

  bool operator==(const ModelConfig&) const = default;
};

inline constexpr double kNormEps = 1e-5;
inline constexpr double kInitStd = 0.02;

template <typename T>
struct LayerWeights {
  Tensor<T> attn_norm;  // [d]
  Tensor<T> wq, wk, wv, wo;  // [d×d], stored [out×in]
  Tensor<T> ffn_norm;  // [d]
  Tensor<T> w_gate, w_up;  // [d_ff×d]
  Tensor<T> w_down;  // [d×d_ff]
};

template <typename T>
struct ModelWeights {
  ModelConfig config;
  Tensor<T> tok_embeddings;  // [vocab×d]
  std::vector<LayerWeights<T>> layers;
  Tensor<T> final_norm;  // [d]
  Tensor<T> head;  // [1×d] when config.head == scalar
  Tensor<T> head_bias;  // [1]

  /// Visits every tensor with a stable dotted name, in serialization order.
  template <typename F>
  void for_each(F&& f) {
    visit(*this, f);
  }
  template <typename F>
  void for_each(F&& f) const {
    visit(*this, f);
  }

  template <typename U>
  ModelWeights<U> cast() const {
    ModelWeights<U> out;
    out.config = config;
    out.tok_embeddings = tok_embeddings.template cast<U>();
    for (const auto& l : layers) {
      out.layers.push_back({l.attn_norm.template cast<U>(), l.wq.template cast<U>(), l.wk.template cast<U>(),
                            l.wv.template cast<U>(), l.wo.template cast<U>(), l.ffn_norm.template cast<U>(),
                            l.w_gate.template cast<U>(), l.w_up.template cast<U>(), l.w_down.template cast<U>()});
    }
    out.final_norm = final_norm.template cast<U>();
    out.head = head.template cast<U>();
    out.head_bias = head_bias.template cast<U>();
    return out;
  }

  bool operator==(const ModelWeights& other) const {
    return config == other.config && names_and_values() == other.names_and_values();
  }

 private:
  std::vector<std::pair<std::string, Tensor<T>>> names_and_values() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    for_each([&](const std::string& name, const Tensor<T>& t) { out.emplace_back(name, t); });
    return out;
  }

  template <typename Self, typename F>
  static void visit(Self& self, F& f) {
    f(std::string("tok_embeddings"), self.tok_embeddings);
    for (std::size_t i = 0; i < self.layers.size(); ++i) {
      auto& l = self.layers[i];
      const std::string p = "layers." + std::to_string(i) + ".";
      f(p + "attn_norm", l.attn_norm);
      f(p + "wq", l.wq);
      f(p + "wk", l.wk);
      f(p + "wv", l.wv);
      f(p + "wo", l.wo);
      f(p + "ffn_norm", l.ffn_norm);
      f(p + "w_gate", l.w_gate);
      f(p + "w_up", l.w_up);
      f(p + "w_down", l.w_down);
    }
    f(std::string("final_norm"), self.final_norm);
    if (self.config.head == HeadKind::scalar) {
      f(std::string("head.weight"), self.head);
      f(std::string("head.bias"), self.head_bias);
    }
  }
};

/// Low-rank update W + scaling·B·A for one [out×in] matrix.
template <typename T>
struct LoraPair {
  Tensor<T> a;  // [r×in]
  Tensor<T> b;  // [out×r]
  bool operator==(const LoraPair&) const = default;
};

/// Adapters on W_q and W_v of every layer.
template <typename T>
struct LoraAdapters {
  std::size_t rank = 0;
  double alpha = 0.0;
  std::vector<LoraPair<T>> q;
  std::vector<LoraPair<T>> v;

  T scaling() const { return static_cast<T>(alpha / static_cast<double>(rank)); }
  bool operator==(const LoraAdapters&) const = default;

  template <typename F>
  void for_each(F&& f) {
    visit(*this, f);
  }
  template <typename F>
  void for_each(F&& f) const {
    visit(*this, f);
  }

  template <typename U>
  LoraAdapters<U> cast() const {
    LoraAdapters<U> out;
    out.rank = rank;
    out.alpha = alpha;
    for (const auto& p : q) out.q.push_back({p.a.template cast<U>(), p.b.template cast<U>()});
    for (const auto& p : v) out.v.push_back({p.a.template cast<U>(), p.b.template cast<U>()});
    return out;
  }

 private:
  template <typename Self, typename F>
  static void visit(Self& self, F& f) {
    for (std::size_t i = 0; i < self.q.size(); ++i) {
      const std::string p = "layers." + std::to_string(i) + ".";
      f(p + "wq.lora_a", self.q[i].a);
      f(p + "wq.lora_b", self.q[i].b);
      f(p + "wv.lora_a", self.v[i].a);
      f(p + "wv.lora_b", self.v[i].b);
    }
  }
};

namespace detail {

template <typename T>
Tensor<T> normal_tensor(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<T>(dist(rng));
  return t;
}

}  // namespace detail

/// Random initialization: matrices ~ N(0, 0.02²), norm gains 1, head bias 0.
inline ModelWeights<float> init_weights(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  const std::size_t d = config.d_model, f = config.d_ff;
  ModelWeights<float> w;
  w.config = config;
  w.tok_embeddings = detail::normal_tensor<float>({config.vocab_size, d}, kInitStd, rng);
  for (std::size_t i = 0; i < config.n_layers; ++i) {
    LayerWeights<float> l;
    l.attn_norm = Tensor<float>({d}, 1.0f);
    l.wq = detail::normal_tensor<float>({d, d}, kInitStd, rng);
    l.wk = detail::normal_tensor<float>({d, d}, kInitStd, rng);
    l.wv = detail::normal_tensor<float>({d, d}, kInitStd, rng);
    l.wo = detail::normal_tensor<float>({d, d}, kInitStd, rng);
    l.ffn_norm = Tensor<float>({d}, 1.0f);
    l.w_gate = detail::normal_tensor<float>({f, d}, kInitStd, rng);
    l.w_up = detail::normal_tensor<float>({f, d}, kInitStd, rng);
    l.w_down = detail::normal_tensor<float>({d, f}, kInitStd, rng);
    w.layers.push_back(std::move(l));
  }
  w.final_norm = Tensor<float>({d}, 1.0f);
  if (config.head == HeadKind::scalar) {
    w.head = detail::normal_tensor<float>({1, d}, kInitStd, rng);
    w.head_bias = Tensor<float>({1}, 0.0f);
  }
  return w;
}

/// A ~ N(0, 1/in), B = 0, so the adapted model starts identical to the base.
inline LoraAdapters<float> init_lora(const ModelConfig& config, std::uint64_t seed) {
  if (config.lora_rank == 0) throw ConfigError("init_lora: lora_rank is 0");
  std::mt19937_64 rng(seed ^ 0x10a4ull);
  const std::size_t d = config.d_model, r = config.lora_rank;
  const double a_std = 1.0 / std::sqrt(static_cast<double>(d));
  LoraAdapters<float> lora;
  lora.rank = r;
  lora.alpha = config.lora_alpha;
  for (std::size_t i = 0; i < config.n_layers; ++i) {
    lora.q.push_back({detail::normal_tensor<float>({r, d}, a_std, rng), Tensor<float>({d, r}, 0.0f)});
    lora.v.push_back({detail::normal_tensor<float>({r, d}, a_std, rng), Tensor<float>({d, r}, 0.0f)});
  }
  return lora;
}

/// Which tensors receive gradients when a model is bound to a tape.
enum class Trainable { none, all, adapters };

template <typename T>
void validate_adapters(const ModelWeights<T>& w, const LoraAdapters<T>& lora) {
  const std::size_t d = w.config.d_model;
  if (lora.rank == 0) throw ContractError("LoRA adapters with rank 0");
  if (lora.q.size() != w.layers.size() || lora.v.size() != w.layers.size()) {
    throw ContractError("LoRA adapters cover " + std::to_string(lora.q.size()) + " layers, model has " +
                        std::to_string(w.layers.size()));
  }
  auto check = [&](const LoraPair<T>& p) {
    if (p.a.shape() != Shape{lora.rank, d} || p.b.shape() != Shape{d, lora.rank}) {
      throw ContractError("LoRA rank mismatch: expected A [" + std::to_string(lora.rank) + "x" + std::to_string(d) +
                          "], B [" + std::to_string(d) + "x" + std::to_string(lora.rank) + "], got A " +
                          shape_str(p.a.shape()) + ", B " + shape_str(p.b.shape()));
    }
  };
  for (const auto& p : lora.q) check(p);
  for (const auto& p : lora.v) check(p);
}

/// Model tensors placed on a tape as leaves. `trainable` lists the vars that
/// require gradients, in the same order as trainable_tensors().
template <typename T>
struct BoundModel {
  struct Layer {
    Var<T> attn_norm, wq, wk, wv, wo, ffn_norm, w_gate, w_up, w_down;
    std::optional<Var<T>> qa, qb, va, vb;
  };
  const ModelConfig* config = nullptr;
  Tape<T>* tape = nullptr;
  Var<T> tok_embeddings;
  std::vector<Layer> layers;
  Var<T> final_norm;
  std::optional<Var<T>> head, head_bias;
  T lora_scaling = T(0);
  std::vector<Var<T>> trainable;
};

/// Tensors that receive gradients under `mode`, in a fixed order.
template <typename T>
std::vector<Tensor<T>*> trainable_tensors(ModelWeights<T>& w, std::type_identity_t<LoraAdapters<T>>* lora, Trainable mode) {
  std::vector<Tensor<T>*> out;
  if (mode == Trainable::all) w.for_each([&](const std::string&, Tensor<T>& t) { out.push_back(&t); });
  if (mode == Trainable::adapters) {
    if (!lora) throw ContractError("adapter training requested without adapters");
    // a task head is new, so it trains alongside the adapters
    if (w.config.head == HeadKind::scalar) {
      out.push_back(&w.head);
      out.push_back(&w.head_bias);
    }
    lora->for_each([&](const std::string&, Tensor<T>& t) { out.push_back(&t); });
  }
  return out;
}

template <typename T>
BoundModel<T> bind(Tape<T>& tape, const ModelWeights<T>& w, const std::type_identity_t<LoraAdapters<T>>* lora, Trainable mode) {
  if (mode == Trainable::adapters && !lora) throw ContractError("adapter training requested without adapters");
  if (lora) validate_adapters(w, *lora);
  const bool base_grad = mode == Trainable::all;
  const bool lora_grad = mode == Trainable::adapters;
  BoundModel<T> m;
  m.config = &w.config;
  m.tape = &tape;
  auto base = [&](const Tensor<T>& t) {
    auto v = tape.leaf(t, base_grad);
    if (base_grad) m.trainable.push_back(v);
    return v;
  };
  // Same order as ModelWeights::for_each.
  m.tok_embeddings = base(w.tok_embeddings);
  for (const auto& l : w.layers) {
    typename BoundModel<T>::Layer b;
    b.attn_norm = base(l.attn_norm);
    b.wq = base(l.wq);
    b.wk = base(l.wk);
    b.wv = base(l.wv);
    b.wo = base(l.wo);
    b.ffn_norm = base(l.ffn_norm);
    b.w_gate = base(l.w_gate);
    b.w_up = base(l.w_up);
    b.w_down = base(l.w_down);
    m.layers.push_back(b);
  }
  m.final_norm = base(w.final_norm);
  if (w.config.head == HeadKind::scalar) {
    auto head = [&](const Tensor<T>& t) {
      auto v = tape.leaf(t, base_grad || lora_grad);
      if (base_grad || lora_grad) m.trainable.push_back(v);
      return v;
    };
    m.head = head(w.head);
    m.head_bias = head(w.head_bias);
  }
  if (lora) {
    m.lora_scaling = lora->scaling();
    for (std::size_t i = 0; i < w.layers.size(); ++i) {
      auto adapter = [&](const Tensor<T>& t) {
        auto v = tape.leaf(t, lora_grad);
        if (lora_grad) m.trainable.push_back(v);
        return v;
      };
      m.layers[i].qa = adapter(lora->q[i].a);
      m.layers[i].qb = adapter(lora->q[i].b);
      m.layers[i].va = adapter(lora->v[i].a);
      m.layers[i].vb = adapter(lora->v[i].b);
    }
  }
  return m;
}

namespace detail {

// x·Wᵀ, plus scaling·(x·Aᵀ)·Bᵀ when an adapter is bound.
template <typename T>
Var<T> project(Var<T> x, Var<T> weight, const std::optional<Var<T>>& a, const std::optional<Var<T>>& b, T scaling) {
  Var<T> y = matmul_nt(x, weight);
  if (a && b) y = add(y, scale(matmul_nt(matmul_nt(x, *a), *b), scaling));
  return y;
}

}  // namespace detail

/// Final-layer hidden states [seq×d]; row i depends only on ids[0..i].
template <typename T>
Var<T> causal_forward(const BoundModel<T>& m, std::span<const TokenId> ids) {
  const ModelConfig& c = *m.config;
  if (ids.empty()) throw LengthError("causal_forward: empty sequence");
  if (ids.size() > c.max_seq_len) {
    throw LengthError("causal_forward: sequence of " + std::to_string(ids.size()) + " tokens exceeds max_seq_len " +
                      std::to_string(c.max_seq_len));
  }
  for (TokenId id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= c.vocab_size) {
      throw ContractError("causal_forward: token id " + std::to_string(id) + " outside vocabulary of " +
                          std::to_string(c.vocab_size));
    }
  }
  const T eps = static_cast<T>(kNormEps);
  Var<T> x = gather_rows(m.tok_embeddings, ids);
  for (const auto& l : m.layers) {
    Var<T> h = rms_norm(x, l.attn_norm, eps);
    Var<T> q = detail::project(h, l.wq, l.qa, l.qb, m.lora_scaling);
    Var<T> k = matmul_nt(h, l.wk);
    Var<T> v = detail::project(h, l.wv, l.va, l.vb, m.lora_scaling);
    q = rope(q, c.n_heads, c.rope_theta);
    k = rope(k, c.n_heads, c.rope_theta);
    x = add(x, matmul_nt(causal_attention(q, k, v, c.n_heads), l.wo));
    Var<T> h2 = rms_norm(x, l.ffn_norm, eps);
    Var<T> gated = mul(silu(matmul_nt(h2, l.w_gate)), matmul_nt(h2, l.w_up));
    x = add(x, matmul_nt(gated, l.w_down));
  }
  return rms_norm(x, m.final_norm, eps);
}

/// Appends </s> (after truncating to max_seq_len − 1) and returns the
/// L2-normalized final state of that token, as [1×d].
template <typename T>
Var<T> encode(const BoundModel<T>& m, const TokenSequence& tokens) {
  std::vector<TokenId> ids(tokens.ids.begin(),
                           tokens.ids.begin() + static_cast<std::ptrdiff_t>(
                                                    std::min(tokens.ids.size(), m.config->max_seq_len - 1)));
  ids.push_back(kEosId);
  Var<T> hidden = causal_forward(m, ids);
  return l2_normalize_rows(row(hidden, ids.size() - 1));
}

/// <head, h_last> + bias for an input that already ends in </s>.
template <typename T>
Var<T> score(const BoundModel<T>& m, const TokenSequence& tokens) {
  if (!m.head) throw ConfigError("score_head: model has no scalar head");
  if (tokens.ids.empty() || tokens.ids.back() != kEosId) {
    throw ContractError("score_head: input must end with </s>");
  }
  Var<T> hidden = causal_forward(m, tokens.ids);
  Var<T> last = row(hidden, tokens.ids.size() - 1);
  return reshape(add(matmul_nt(last, *m.head), *m.head_bias), Shape{});
}

using Embedding = std::vector<float>;

/// Inference wrappers on a private tape.
template <typename T>
Tensor<T> hidden_states(const ModelWeights<T>& w, const std::type_identity_t<LoraAdapters<T>>* lora, const TokenSequence& tokens) {
  Tape<T> tape;
  auto m = bind(tape, w, lora, Trainable::none);
  return causal_forward(m, tokens.ids).tensor();
}

inline Embedding encode_text(const ModelWeights<float>& w, const LoraAdapters<float>* lora,
                             const TokenSequence& tokens) {
  Tape<float> tape;
  auto m = bind(tape, w, lora, Trainable::none);
  auto e = encode(m, tokens).value();
  return Embedding(e.begin(), e.end());
}

inline float score_head(const ModelWeights<float>& w, const LoraAdapters<float>* lora, const TokenSequence& tokens) {
  Tape<float> tape;
  auto m = bind(tape, w, lora, Trainable::none);
  return score(m, tokens).value()[0];
}

/// W' = W + scaling·B·A for every adapted matrix.
template <typename T>
ModelWeights<T> merge_lora(const ModelWeights<T>& w, const LoraAdapters<T>& lora) {
  validate_adapters(w, lora);
  ModelWeights<T> out = w;
  const std::size_t d = w.config.d_model, r = lora.rank;
  const T s = lora.scaling();
  auto merge = [&](Tensor<T>& target, const LoraPair<T>& p) {
    std::vector<T> ba(d * d);
    detail::gemm_nn(p.b.data(), p.a.data(), ba.data(), d, r, d);
    for (std::size_t i = 0; i < d * d; ++i) target[i] += s * ba[i];
  };
  for (std::size_t i = 0; i < w.layers.size(); ++i) {
    merge(out.layers[i].wq, lora.q[i]);
    merge(out.layers[i].wv, lora.v[i]);
  }
  return out;
}

template <typename T>
std::size_t parameter_count(const ModelWeights<T>& w) {
  std::size_t n = 0;
  w.for_each([&](const std::string&, const Tensor<T>& t) { n += t.size(); });
  return n;
}

template <typename T>
std::size_t parameter_count(const LoraAdapters<T>& lora) {
  std::size_t n = 0;
  lora.for_each([&](const std::string&, const Tensor<T>& t) { n += t.size(); });
  return n;
}

}  // namespace marrow
