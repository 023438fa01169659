#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "steerlab/tinylmm/config.hpp"

namespace steerlab::tinylmm {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowVector = Eigen::Matrix<T, 1, Eigen::Dynamic>;

// Linear maps act on row vectors: y = x * W.
template <typename T>
struct LayerWeights {
  RowVector<T> ln1_gain, ln1_bias;
  Matrix<T> wq, wk, wv, wo;  // d x d
  RowVector<T> ln2_gain, ln2_bias;
  Matrix<T> w_up;    // d x d_ff
  RowVector<T> b_up;
  Matrix<T> w_down;  // d_ff x d
  RowVector<T> b_down;
};

template <typename T>
struct BasicParams {
  ModelConfig config;
  Matrix<T> token_embedding;     // V x d
  Matrix<T> position_embedding;  // max_seq x d, indexed by text position
  std::vector<LayerWeights<T>> layers;
  RowVector<T> lnf_gain, lnf_bias;
  Matrix<T> unembedding;  // d x V

  // Allocates every tensor for `config` and fills it with zeros.
  static BasicParams zeros(const ModelConfig& config);

  // Visits tensors in the canonical (serialization) order. `fn` receives a
  // name and an Eigen dense object it may read or write.
  template <typename Fn>
  void for_each_tensor(Fn&& fn) {
    fn(std::string("token_embedding"), token_embedding);
    fn(std::string("position_embedding"), position_embedding);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      auto& w = layers[l];
      const std::string p = "layers." + std::to_string(l) + ".";
      fn(p + "ln1_gain", w.ln1_gain);
      fn(p + "ln1_bias", w.ln1_bias);
      fn(p + "wq", w.wq);
      fn(p + "wk", w.wk);
      fn(p + "wv", w.wv);
      fn(p + "wo", w.wo);
      fn(p + "ln2_gain", w.ln2_gain);
      fn(p + "ln2_bias", w.ln2_bias);
      fn(p + "w_up", w.w_up);
      fn(p + "b_up", w.b_up);
      fn(p + "w_down", w.w_down);
      fn(p + "b_down", w.b_down);
    }
    fn(std::string("lnf_gain"), lnf_gain);
    fn(std::string("lnf_bias"), lnf_bias);
    fn(std::string("unembedding"), unembedding);
  }

  template <typename Fn>
  void for_each_tensor(Fn&& fn) const {
    const_cast<BasicParams*>(this)->for_each_tensor(
        [&](const std::string& name, const auto& t) { fn(name, t); });
  }

  template <typename U>
  BasicParams<U> cast() const {
    BasicParams<U> out = BasicParams<U>::zeros(config);
    std::vector<const T*> src;
    for_each_tensor([&](const std::string&, const auto& t) { src.push_back(t.data()); });
    std::size_t i = 0;
    out.for_each_tensor([&](const std::string&, auto& t) {
      for (Eigen::Index k = 0; k < t.size(); ++k) t.data()[k] = static_cast<U>(src[i][k]);
      ++i;
    });
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each_tensor([&](const std::string&, const auto& t) { n += static_cast<std::size_t>(t.size()); });
    return n;
  }

  bool all_finite() const {
    bool ok = true;
    for_each_tensor([&](const std::string&, const auto& t) { ok = ok && t.allFinite(); });
    return ok;
  }

  // this += scale * other, tensor by tensor.
  void axpy(T scale, const BasicParams& other) {
    std::vector<const T*> src;
    other.for_each_tensor([&](const std::string&, const auto& t) { src.push_back(t.data()); });
    std::size_t i = 0;
    for_each_tensor([&](const std::string&, auto& t) {
      for (Eigen::Index k = 0; k < t.size(); ++k) t.data()[k] += scale * src[i][k];
      ++i;
    });
  }

  void set_zero() {
    for_each_tensor([](const std::string&, auto& t) { t.setZero(); });
  }

  T squared_norm() const {
    T s = T(0);
    for_each_tensor([&](const std::string&, const auto& t) { s += t.squaredNorm(); });
    return s;
  }
};

using ModelParams = BasicParams<float>;

// Scaled Gaussian init (std 0.02) drawn from CounterRng(config.seed, kInit)
// in canonical tensor order; layer-norm gains are 1, all biases 0.
ModelParams init_params(const ModelConfig& config);

// FNV-1a 64 over the little-endian float32 payload, as 16 hex digits.
std::string checksum(const ModelParams& params);

template <typename T>
BasicParams<T> BasicParams<T>::zeros(const ModelConfig& c) {
  BasicParams p;
  p.config = c;
  const int d = c.d_model;
  p.token_embedding = Matrix<T>::Zero(c.vocab_size, d);
  p.position_embedding = Matrix<T>::Zero(c.max_seq, d);
  p.layers.resize(static_cast<std::size_t>(c.n_layers));
  for (auto& w : p.layers) {
    w.ln1_gain = RowVector<T>::Zero(d);
    w.ln1_bias = RowVector<T>::Zero(d);
    w.wq = Matrix<T>::Zero(d, d);
    w.wk = Matrix<T>::Zero(d, d);
    w.wv = Matrix<T>::Zero(d, d);
    w.wo = Matrix<T>::Zero(d, d);
    w.ln2_gain = RowVector<T>::Zero(d);
    w.ln2_bias = RowVector<T>::Zero(d);
    w.w_up = Matrix<T>::Zero(d, c.d_ff);
    w.b_up = RowVector<T>::Zero(c.d_ff);
    w.w_down = Matrix<T>::Zero(c.d_ff, d);
    w.b_down = RowVector<T>::Zero(d);
  }
  p.lnf_gain = RowVector<T>::Zero(d);
  p.lnf_bias = RowVector<T>::Zero(d);
  p.unembedding = Matrix<T>::Zero(d, c.vocab_size);
  return p;
}

}  // namespace steerlab::tinylmm
