#pragma once

// Parameter registry and the layer set used by the encoder. Layers hold
// pointers into a ParamStore; a forward pass registers the parameters it
// touches as leaves on the current tape.

#include <memory>
#include <string>
#include <vector>

#include "dspast/autograd.hpp"
#include "dspast/common.hpp"

namespace dspast {

inline constexpr double kInitStd = 0.02;

template <typename T>
class ParamStore {
 public:
  // Creates a named parameter; init is applied by the caller.
  Parameter<T>* create(const std::string& name, Shape shape, bool shared, bool trainable = true) {
    if (find(name) != nullptr) throw ConfigError("duplicate parameter name: " + name);
    auto p = std::make_unique<Parameter<T>>();
    p->name = name;
    p->value = Tensor<T>(std::move(shape));
    p->shared = shared;
    p->trainable = trainable;
    items_.push_back(std::move(p));
    return items_.back().get();
  }

  Parameter<T>* find(const std::string& name) const {
    for (const auto& p : items_)
      if (p->name == name) return p.get();
    return nullptr;
  }

  const std::vector<std::unique_ptr<Parameter<T>>>& all() const { return items_; }

  std::vector<Parameter<T>*> trainable() const {
    std::vector<Parameter<T>*> out;
    for (const auto& p : items_)
      if (p->trainable) out.push_back(p.get());
    return out;
  }

  void zero_grad() {
    for (const auto& p : items_)
      if (p->trainable) p->zero_grad();
  }

 private:
  std::vector<std::unique_ptr<Parameter<T>>> items_;
};

// Deterministic initializers keyed by (seed, parameter name), so values do
// not depend on construction order.
template <typename T>
void init_trunc_normal(Parameter<T>* p, std::uint64_t seed, double stddev = kInitStd) {
  Prng rng(mix_seed(seed, p->name));
  for (auto& x : p->value.v) x = static_cast<T>(rng.trunc_normal(stddev));
}

template <typename T>
void init_const(Parameter<T>* p, double value) {
  for (auto& x : p->value.v) x = static_cast<T>(value);
}

template <typename T>
struct LinearLayer {
  Parameter<T>* w = nullptr;  // [out, in]
  Parameter<T>* b = nullptr;  // [out]

  static LinearLayer create(ParamStore<T>& store, const std::string& prefix, std::int64_t in,
                            std::int64_t out, bool shared, std::uint64_t seed) {
    LinearLayer l;
    l.w = store.create(prefix + "/w", {out, in}, shared);
    l.b = store.create(prefix + "/b", {out}, shared);
    init_trunc_normal(l.w, seed);
    init_const(l.b, 0.0);
    return l;
  }

  // x is [N, in].
  Var<T> forward(Tape<T>& tape, Var<T> x) const {
    return linear(x, tape.leaf(*w), tape.leaf(*b));
  }
};

template <typename T>
struct Conv2dLayer {
  Parameter<T>* w = nullptr;  // [out_c, in_c, kh, kw]
  Parameter<T>* b = nullptr;
  int stride = 1;
  int pad = 0;

  static Conv2dLayer create(ParamStore<T>& store, const std::string& prefix, std::int64_t in_c,
                            std::int64_t out_c, int kernel, int stride, int pad, bool shared,
                            std::uint64_t seed) {
    Conv2dLayer l;
    l.w = store.create(prefix + "/w", {out_c, in_c, kernel, kernel}, shared);
    l.b = store.create(prefix + "/b", {out_c}, shared);
    l.stride = stride;
    l.pad = pad;
    init_trunc_normal(l.w, seed);
    init_const(l.b, 0.0);
    return l;
  }

  Var<T> forward(Tape<T>& tape, Var<T> x) const {
    return conv2d(x, tape.leaf(*w), tape.leaf(*b), stride, pad);
  }
};

template <typename T>
struct BatchNormLayer {
  Parameter<T>* gamma = nullptr;
  Parameter<T>* beta = nullptr;
  Parameter<T>* running_mean = nullptr;  // buffers, not trainable
  Parameter<T>* running_var = nullptr;

  static BatchNormLayer create(ParamStore<T>& store, const std::string& prefix, std::int64_t channels,
                               bool shared) {
    BatchNormLayer l;
    l.gamma = store.create(prefix + "/gamma", {channels}, shared);
    l.beta = store.create(prefix + "/beta", {channels}, shared);
    l.running_mean = store.create(prefix + "/running_mean", {channels}, shared, /*trainable=*/false);
    l.running_var = store.create(prefix + "/running_var", {channels}, shared, /*trainable=*/false);
    init_const(l.gamma, 1.0);
    init_const(l.beta, 0.0);
    init_const(l.running_mean, 0.0);
    init_const(l.running_var, 1.0);
    return l;
  }

  Var<T> forward(Tape<T>& tape, Var<T> x, bool train) const {
    return batchnorm(x, tape.leaf(*gamma), tape.leaf(*beta), running_mean->value, running_var->value, train);
  }
};

template <typename T>
struct LayerNormLayer {
  Parameter<T>* gamma = nullptr;
  Parameter<T>* beta = nullptr;

  static LayerNormLayer create(ParamStore<T>& store, const std::string& prefix, std::int64_t dim, bool shared) {
    LayerNormLayer l;
    l.gamma = store.create(prefix + "/gamma", {dim}, shared);
    l.beta = store.create(prefix + "/beta", {dim}, shared);
    init_const(l.gamma, 1.0);
    init_const(l.beta, 0.0);
    return l;
  }

  Var<T> forward(Tape<T>& tape, Var<T> x) const {
    return layernorm(x, tape.leaf(*gamma), tape.leaf(*beta));
  }
};

// Pre-norm transformer encoder block with a 4x MLP.
template <typename T>
struct TransformerBlock {
  LayerNormLayer<T> ln1, ln2;
  LinearLayer<T> qkv, proj, mlp_in, mlp_out;
  int heads = 1;
  std::int64_t dim = 0;

  static TransformerBlock create(ParamStore<T>& store, const std::string& prefix, std::int64_t dim,
                                 int heads, bool shared, std::uint64_t seed) {
    TransformerBlock blk;
    blk.dim = dim;
    blk.heads = heads;
    blk.ln1 = LayerNormLayer<T>::create(store, prefix + "/ln1", dim, shared);
    blk.qkv = LinearLayer<T>::create(store, prefix + "/qkv", dim, 3 * dim, shared, seed);
    blk.proj = LinearLayer<T>::create(store, prefix + "/proj", dim, dim, shared, seed);
    blk.ln2 = LayerNormLayer<T>::create(store, prefix + "/ln2", dim, shared);
    blk.mlp_in = LinearLayer<T>::create(store, prefix + "/mlp_in", dim, 4 * dim, shared, seed);
    blk.mlp_out = LinearLayer<T>::create(store, prefix + "/mlp_out", 4 * dim, dim, shared, seed);
    return blk;
  }

  Var<T> forward(Tape<T>& tape, Var<T> x) const {
    const std::int64_t b = x.shape()[0], l = x.shape()[1];
    Var<T> h = ln1.forward(tape, x);
    Var<T> qkv_flat = qkv.forward(tape, reshape(h, {b * l, dim}));
    Var<T> q = reshape(slice_lastdim(qkv_flat, 0, dim), {b, l, dim});
    Var<T> k = reshape(slice_lastdim(qkv_flat, dim, dim), {b, l, dim});
    Var<T> v = reshape(slice_lastdim(qkv_flat, 2 * dim, dim), {b, l, dim});
    Var<T> att = multi_head_attention(q, k, v, heads);
    Var<T> att_proj = reshape(proj.forward(tape, reshape(att, {b * l, dim})), {b, l, dim});
    x = add(x, att_proj);

    Var<T> h2 = ln2.forward(tape, x);
    Var<T> m = mlp_in.forward(tape, reshape(h2, {b * l, dim}));
    m = gelu(m);
    m = mlp_out.forward(tape, m);
    return add(x, reshape(m, {b, l, dim}));
  }
};

}  // namespace dspast
