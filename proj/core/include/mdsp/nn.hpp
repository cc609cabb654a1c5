#pragma once

// Layer building blocks over the tensor engine: a named parameter store
// with group tags (for per-group learning rates and task masking) and the
// conv/bn/activation composites the network is assembled from.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mdsp/check.hpp"
#include "mdsp/rng.hpp"
#include "mdsp/tensor.hpp"

namespace mdsp {

// Parameter groups: backbone gets a reduced learning rate; the others are
// frozen whenever their task is masked. detect_shared covers the Conv Sets
// and route convs, which segmentation also depends on.
enum class ParamGroup { backbone, detect_shared, detect_pred, segment, pose };

inline const char* param_group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::backbone: return "backbone";
    case ParamGroup::detect_shared: return "detect_shared";
    case ParamGroup::detect_pred: return "detect_pred";
    case ParamGroup::segment: return "segment";
    case ParamGroup::pose: return "pose";
  }
  return "?";
}

template <typename T>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor<T> tensor;
    bool trainable = true;  // false for batchnorm running statistics
    ParamGroup group = ParamGroup::backbone;
  };

  Tensor<T> add(const std::string& name, Tensor<T> t, bool trainable, ParamGroup group) {
    for (const auto& e : entries_)
      MDSP_CHECK(e.name != name, "params: duplicate name '" << name << "'");
    t.set_requires_grad(trainable);
    entries_.push_back(Entry{name, t, trainable, group});
    return t;
  }

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }

  Entry* find(const std::string& name) {
    for (auto& e : entries_)
      if (e.name == name) return &e;
    return nullptr;
  }

  std::int64_t count_trainable() const {
    std::int64_t n = 0;
    for (const auto& e : entries_)
      if (e.trainable) n += e.tensor.numel();
    return n;
  }

  std::int64_t count_trainable(ParamGroup g) const {
    std::int64_t n = 0;
    for (const auto& e : entries_)
      if (e.trainable && e.group == g) n += e.tensor.numel();
    return n;
  }

  void zero_grads() {
    for (auto& e : entries_) e.tensor.zero_grad();
  }

 private:
  std::vector<Entry> entries_;
};

template <typename T>
Tensor<T> he_normal(const Shape& shape, std::int64_t fan_in, Rng& rng) {
  MDSP_CHECK(fan_in > 0, "he_normal: fan_in must be positive");
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  Tensor<T> t = Tensor<T>::zeros(shape);
  for (auto& v : t.values()) v = static_cast<T>(rng.normal(0.0, stddev));
  return t;
}

// Plain convolution, optionally biased, no normalization or activation.
template <typename T>
struct Conv2dLayer {
  Tensor<T> w;
  Tensor<T> b;  // undefined when bias-free
  int stride = 1;
  int pad = 0;

  Tensor<T> forward(const Tensor<T>& x) const { return conv2d(x, w, b, stride, pad); }
};

template <typename T>
Conv2dLayer<T> make_conv(ParamStore<T>& store, const std::string& name, int cin, int cout, int k,
                         int stride, int pad, bool bias, ParamGroup group, Rng& rng) {
  Conv2dLayer<T> l;
  l.stride = stride;
  l.pad = pad;
  l.w = store.add(name + ".w", he_normal<T>({cout, cin, k, k}, static_cast<std::int64_t>(cin) * k * k, rng),
                  true, group);
  if (bias) l.b = store.add(name + ".b", Tensor<T>::zeros({cout}), true, group);
  return l;
}

// Conv + batchnorm + activation, the standard backbone/detection unit.
template <typename T>
struct ConvBnAct {
  Conv2dLayer<T> conv;
  Tensor<T> gamma, beta, rmean, rvar;
  Act act = Act::relu;

  Tensor<T> forward(const Tensor<T>& x, bool training) {
    Tensor<T> y = conv.forward(x);
    y = batchnorm2d(y, gamma, beta, rmean, rvar, training);
    return activation(y, act);
  }
};

template <typename T>
ConvBnAct<T> make_conv_bn(ParamStore<T>& store, const std::string& name, int cin, int cout, int k,
                          int stride, int pad, ParamGroup group, Rng& rng, Act act = Act::relu) {
  ConvBnAct<T> l;
  l.conv = make_conv(store, name, cin, cout, k, stride, pad, /*bias=*/false, group, rng);
  l.gamma = store.add(name + ".bn.gamma", Tensor<T>::filled({cout}, T(1)), true, group);
  l.beta = store.add(name + ".bn.beta", Tensor<T>::zeros({cout}), true, group);
  l.rmean = store.add(name + ".bn.rmean", Tensor<T>::zeros({cout}), false, group);
  l.rvar = store.add(name + ".bn.rvar", Tensor<T>::filled({cout}, T(1)), false, group);
  l.act = act;
  return l;
}

// Conv + bias + activation (no batchnorm); used by the pose head.
template <typename T>
struct ConvAct {
  Conv2dLayer<T> conv;
  Act act = Act::elu;

  Tensor<T> forward(const Tensor<T>& x) const { return activation(conv.forward(x), act); }
};

template <typename T>
ConvAct<T> make_conv_act(ParamStore<T>& store, const std::string& name, int cin, int cout, int k,
                         int stride, int pad, ParamGroup group, Rng& rng, Act act = Act::elu) {
  ConvAct<T> l;
  l.conv = make_conv(store, name, cin, cout, k, stride, pad, /*bias=*/true, group, rng);
  l.act = act;
  return l;
}

}  // namespace mdsp
