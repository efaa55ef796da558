#pragma once

#include <cstdint>

#include "ipf/nn/tensor.hpp"

namespace ipf::nn {

struct AdamWHyper {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

template <typename T>
struct AdamWState {
  AdamWHyper hyper;
  Gradients<T> first_moment;
  Gradients<T> second_moment;
  std::uint64_t step = 0;

  static AdamWState init(const ParamStore<T>& params, AdamWHyper hyper);
};

// One decoupled-weight-decay Adam update over every trainable entry:
//   w <- w - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * w)
template <typename T>
void adamw_step(ParamStore<T>& params, const Gradients<T>& grads, AdamWState<T>& state);

extern template struct AdamWState<float>;
extern template struct AdamWState<double>;
extern template void adamw_step(ParamStore<float>&, const Gradients<float>&, AdamWState<float>&);
extern template void adamw_step(ParamStore<double>&, const Gradients<double>&, AdamWState<double>&);

}  // namespace ipf::nn
