#include "ipf/nn/adamw.hpp"

#include <cmath>

namespace ipf::nn {

template <typename T>
AdamWState<T> AdamWState<T>::init(const ParamStore<T>& params, AdamWHyper hyper) {
  AdamWState s;
  s.hyper = hyper;
  for (std::size_t i = 0; i < params.size(); ++i) {
    s.first_moment.emplace_back(params.value(i).shape);
    s.second_moment.emplace_back(params.value(i).shape);
  }
  return s;
}

template <typename T>
void adamw_step(ParamStore<T>& params, const Gradients<T>& grads, AdamWState<T>& state) {
  if (grads.size() != params.size() || state.first_moment.size() != params.size()) {
    throw ShapeError("adamw_step: gradient/state count does not match parameters");
  }
  ++state.step;
  const auto& h = state.hyper;
  const double t = static_cast<double>(state.step);
  const T bc1 = static_cast<T>(1.0 - std::pow(h.beta1, t));
  const T bc2 = static_cast<T>(1.0 - std::pow(h.beta2, t));
  const T b1 = static_cast<T>(h.beta1);
  const T b2 = static_cast<T>(h.beta2);
  const T lr = static_cast<T>(h.lr);
  const T eps = static_cast<T>(h.eps);
  const T wd = static_cast<T>(h.weight_decay);

  for (std::size_t p = 0; p < params.size(); ++p) {
    if (!params.trainable(p)) continue;
    auto w = params.data(p);
    const auto& gp = grads[p].data;
    auto& m = state.first_moment[p].data;
    auto& v = state.second_moment[p].data;
    if (gp.size() != w.size() || m.size() != w.size()) {
      throw ShapeError("adamw_step: shape mismatch for " + params.name(p));
    }
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = b1 * m[i] + (T(1) - b1) * gp[i];
      v[i] = b2 * v[i] + (T(1) - b2) * gp[i] * gp[i];
      const T m_hat = m[i] / bc1;
      const T v_hat = v[i] / bc2;
      w[i] -= lr * (m_hat / (std::sqrt(v_hat) + eps) + wd * w[i]);
    }
  }
}

template struct AdamWState<float>;
template struct AdamWState<double>;
template void adamw_step(ParamStore<float>&, const Gradients<float>&, AdamWState<float>&);
template void adamw_step(ParamStore<double>&, const Gradients<double>&, AdamWState<double>&);

}  // namespace ipf::nn
