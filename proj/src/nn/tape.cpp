#include "ipf/nn/tape.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace ipf::nn {

template <typename T>
Var Tape<T>::push(Tensor<T> value, bool requires_grad, std::function<void()> backward) {
  if (backward_done_) throw UsageError("tape already differentiated");
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

template <typename T>
void Tape<T>::require_same_shape(Var a, Var b, const char* op) const {
  if (val(a).shape != val(b).shape) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(val(a).shape) + " vs " +
                     shape_str(val(b).shape));
  }
}

template <typename T>
void Tape<T>::require_rank(Var a, std::size_t rank, const char* op) const {
  if (val(a).rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(val(a).shape));
  }
}

template <typename T>
Var Tape<T>::constant(Tensor<T> value) {
  return push(std::move(value), false);
}

template <typename T>
Var Tape<T>::param(std::string_view name) {
  if (!params_) throw UsageError("tape has no parameter store");
  const std::size_t idx = params_->index(name);
  if (auto it = param_nodes_.find(idx); it != param_nodes_.end()) return it->second;
  const Var v = push(params_->value(idx), params_->trainable(idx));
  nodes_[v.id].param_index = static_cast<std::ptrdiff_t>(idx);
  param_nodes_.emplace(idx, v);
  return v;
}

template <typename T>
T Tape<T>::scalar(Var v) const {
  if (val(v).size() != 1) throw ShapeError("scalar(): node has " + shape_str(val(v).shape));
  return val(v).data[0];
}

template <typename T>
void Tape<T>::backward(Var loss) {
  if (val(loss).size() != 1) {
    throw ShapeError("backward: loss must be scalar, got " + shape_str(val(loss).shape));
  }
  if (backward_done_) throw UsageError("backward called twice on one tape");
  backward_done_ = true;
  for (auto& n : nodes_) {
    if (n.requires_grad) n.grad = Tensor<T>(n.value.shape);
  }
  if (!req(loss)) return;
  g(loss).data[0] = T{1};
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    auto& n = nodes_[i];
    if (n.requires_grad && n.backward) n.backward();
  }
}

template <typename T>
Gradients<T> Tape<T>::param_grads() const {
  Gradients<T> out;
  if (!params_) return out;
  out.reserve(params_->size());
  for (std::size_t i = 0; i < params_->size(); ++i) out.emplace_back(params_->value(i).shape);
  for (const auto& [idx, v] : param_nodes_) {
    if (backward_done_ && nodes_[v.id].requires_grad) out[idx] = nodes_[v.id].grad;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Var Tape<T>::add(Var a, Var b) {
  require_same_shape(a, b, "add");
  Tensor<T> out = val(a);
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += val(b).data[i];
  Var o{nodes_.size()};
  return push(std::move(out), req(a) || req(b), [this, a, b, o] {
    const auto& go = g(o).data;
    if (req(a)) for (std::size_t i = 0; i < go.size(); ++i) g(a).data[i] += go[i];
    if (req(b)) for (std::size_t i = 0; i < go.size(); ++i) g(b).data[i] += go[i];
  });
}

template <typename T>
Var Tape<T>::sub(Var a, Var b) {
  require_same_shape(a, b, "sub");
  Tensor<T> out = val(a);
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] -= val(b).data[i];
  Var o{nodes_.size()};
  return push(std::move(out), req(a) || req(b), [this, a, b, o] {
    const auto& go = g(o).data;
    if (req(a)) for (std::size_t i = 0; i < go.size(); ++i) g(a).data[i] += go[i];
    if (req(b)) for (std::size_t i = 0; i < go.size(); ++i) g(b).data[i] -= go[i];
  });
}

template <typename T>
Var Tape<T>::mul(Var a, Var b) {
  require_same_shape(a, b, "mul");
  Tensor<T> out = val(a);
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= val(b).data[i];
  Var o{nodes_.size()};
  return push(std::move(out), req(a) || req(b), [this, a, b, o] {
    const auto& go = g(o).data;
    if (req(a)) for (std::size_t i = 0; i < go.size(); ++i) g(a).data[i] += go[i] * val(b).data[i];
    if (req(b)) for (std::size_t i = 0; i < go.size(); ++i) g(b).data[i] += go[i] * val(a).data[i];
  });
}

template <typename T>
Var Tape<T>::scale(Var a, T s) {
  Tensor<T> out = val(a);
  for (auto& v : out.data) v *= s;
  Var o{nodes_.size()};
  return push(std::move(out), req(a), [this, a, o, s] {
    const auto& go = g(o).data;
    for (std::size_t i = 0; i < go.size(); ++i) g(a).data[i] += s * go[i];
  });
}

template <typename T>
Var Tape<T>::add_scalar(Var a, T s) {
  Tensor<T> out = val(a);
  for (auto& v : out.data) v += s;
  Var o{nodes_.size()};
  return push(std::move(out), req(a), [this, a, o] {
    const auto& go = g(o).data;
    for (std::size_t i = 0; i < go.size(); ++i) g(a).data[i] += go[i];
  });
}

template <typename T>
Var Tape<T>::abs(Var a) {
  Tensor<T> out = val(a);
  for (auto& v : out.data) v = std::abs(v);
  Var o{nodes_.size()};
  return push(std::move(out), req(a), [this, a, o] {
    const auto& go = g(o).data;
    const auto& x = val(a).data;
    for (std::size_t i = 0; i < go.size(); ++i) {
      const T sgn = x[i] > T{0} ? T{1} : (x[i] < T{0} ? T{-1} : T{0});
      g(a).data[i] += sgn * go[i];
    }
  });
}

template <typename T>
Var Tape<T>::gelu(Var a) {
  Tensor<T> out = val(a);
  const T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  for (auto& v : out.data) v = T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2));
  Var o{nodes_.size()};
  return push(std::move(out), req(a), [this, a, o, inv_sqrt2] {
    const auto& go = g(o).data;
    const auto& x = val(a).data;
    const T inv_sqrt_2pi = std::numbers::inv_sqrtpi_v<T> * inv_sqrt2;
    for (std::size_t i = 0; i < go.size(); ++i) {
      const T cdf = T(0.5) * (T(1) + std::erf(x[i] * inv_sqrt2));
      const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * x[i] * x[i]);
      g(a).data[i] += go[i] * (cdf + x[i] * pdf);
    }
  });
}

template <typename T>
Var Tape<T>::sigmoid(Var a) {
  Tensor<T> out = val(a);
  for (auto& v : out.data) v = T(1) / (T(1) + std::exp(-v));
  Var o{nodes_.size()};
  return push(std::move(out), req(a), [this, a, o] {
    const auto& go = g(o).data;
    const auto& y = val(o).data;
    for (std::size_t i = 0; i < go.size(); ++i) g(a).data[i] += go[i] * y[i] * (T(1) - y[i]);
  });
}

// ---------------------------------------------------------------------------
// 2D

template <typename T>
Var Tape<T>::matmul(Var a, Var b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t M = val(a).dim(0), K = val(a).dim(1), N = val(b).dim(1);
  if (val(b).dim(0) != K) {
    throw ShapeError("matmul: inner dimensions differ " + shape_str(val(a).shape) + " x " +
                     shape_str(val(b).shape));
  }
  Tensor<T> out({M, N});
  const T* A = val(a).data.data();
  const T* B = val(b).data.data();
  T* C = out.data.data();
  std::vector<double> crow(N);
  for (std::size_t i = 0; i < M; ++i) {
    std::fill(crow.begin(), crow.end(), 0.0);
    for (std::size_t k = 0; k < K; ++k) {
      const double av = A[i * K + k];
      const T* brow = B + k * N;
      for (std::size_t j = 0; j < N; ++j) crow[j] += av * brow[j];
    }
    for (std::size_t j = 0; j < N; ++j) C[i * N + j] = static_cast<T>(crow[j]);
  }
  Var o{nodes_.size()};
  return push(std::move(out), req(a) || req(b), [this, a, b, o, M, K, N] {
    const T* G = g(o).data.data();
    const T* A = val(a).data.data();
    const T* B = val(b).data.data();
    if (req(a)) {
      T* GA = g(a).data.data();  // G B^T
      for (std::size_t i = 0; i < M; ++i) {
        for (std::size_t k = 0; k < K; ++k) {
          const T* brow = B + k * N;
          const T* grow = G + i * N;
          double acc = 0.0;
          for (std::size_t j = 0; j < N; ++j) acc += static_cast<double>(grow[j]) * brow[j];
          GA[i * K + k] += static_cast<T>(acc);
        }
      }
    }
    if (req(b)) {
      T* GB = g(b).data.data();  // A^T G
      std::vector<double> acc(K * N, 0.0);
      for (std::size_t i = 0; i < M; ++i) {
        for (std::size_t k = 0; k < K; ++k) {
          const double av = A[i * K + k];
          const T* grow = G + i * N;
          double* arow = acc.data() + k * N;
          for (std::size_t j = 0; j < N; ++j) arow[j] += av * grow[j];
        }
      }
      for (std::size_t i = 0; i < K * N; ++i) GB[i] += static_cast<T>(acc[i]);
    }
  });
}

template <typename T>
Var Tape<T>::transpose(Var a) {
  require_rank(a, 2, "transpose");
  const std::size_t M = val(a).dim(0), N = val(a).dim(1);
  Tensor<T> out({N, M});
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t j = 0; j < N; ++j) out.data[j * M + i] = val(a).data[i * N + j];
  Var o{nodes_.size()};
  return push(std::move(out), req(a), [this, a, o, M, N] {
    for (std::size_t i = 0; i < M; ++i)
      for (std::size_t j = 0; j < N; ++j) g(a).data[i * N + j] += g(o).data[j * M + i];
  });
}

template <typename T>
Var Tape<T>::add_row_bias(Var x, Var bias) {
  require_rank(x, 2, "add_row_bias");
  const std::size_t M = val(x).dim(0), N = val(x).dim(1);
  if (val(bias).size() != N) {
    throw ShapeError("add_row_bias: bias " + shape_str(val(bias).shape) + " for " +
                     shape_str(val(x).shape));
  }
  Tensor<T> out = val(x);
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t j = 0; j < N; ++j) out.data[i * N + j] += val(bias).data[j];
  Var o{nodes_.size()};
  return push(std::move(out), req(x) || req(bias), [this, x, bias, o, M, N] {
    const auto& go = g(o).data;
    if (req(x)) for (std::size_t i = 0; i < go.size(); ++i) g(x).data[i] += go[i];
    if (req(bias)) {
      std::vector<double> acc(N, 0.0);
      for (std::size_t i = 0; i < M; ++i)
        for (std::size_t j = 0; j < N; ++j) acc[j] += go[i * N + j];
      for (std::size_t j = 0; j < N; ++j) g(bias).data[j] += static_cast<T>(acc[j]);
    }
  });
}

template <typename T>
Var Tape<T>::layer_norm(Var x, Var gamma, Var beta, T eps) {
  require_rank(x, 2, "layer_norm");
  const std::size_t M = val(x).dim(0), N = val(x).dim(1);
  if (val(gamma).size() != N || val(beta).size() != N) {
    throw ShapeError("layer_norm: affine parameters must have " + std::to_string(N) + " entries");
  }
  Tensor<T> out({M, N});
  std::vector<T> xhat(M * N);
  std::vector<T> inv_std(M);
  for (std::size_t i = 0; i < M; ++i) {
    const T* row = val(x).data.data() + i * N;
    double mu = 0.0;
    for (std::size_t j = 0; j < N; ++j) mu += row[j];
    mu /= static_cast<double>(N);
    double var = 0.0;
    for (std::size_t j = 0; j < N; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(N);
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_std[i] = static_cast<T>(inv);
    for (std::size_t j = 0; j < N; ++j) {
      xhat[i * N + j] = static_cast<T>((row[j] - mu) * inv);
      out.data[i * N + j] = xhat[i * N + j] * val(gamma).data[j] + val(beta).data[j];
    }
  }
  Var o{nodes_.size()};
  return push(std::move(out), req(x) || req(gamma) || req(beta),
              [this, x, gamma, beta, o, M, N, xhat = std::move(xhat),
               inv_std = std::move(inv_std)] {
                const auto& go = g(o).data;
                std::vector<double> dy(N);
                std::vector<double> dgamma(N, 0.0);
                std::vector<double> dbeta(N, 0.0);
                for (std::size_t i = 0; i < M; ++i) {
                  double mean_dy = 0.0;
                  double mean_dy_xhat = 0.0;
                  for (std::size_t j = 0; j < N; ++j) {
                    const std::size_t k = i * N + j;
                    dgamma[j] += static_cast<double>(go[k]) * xhat[k];
                    dbeta[j] += go[k];
                    dy[j] = static_cast<double>(go[k]) * val(gamma).data[j];
                    mean_dy += dy[j];
                    mean_dy_xhat += dy[j] * xhat[k];
                  }
                  if (!req(x)) continue;
                  mean_dy /= static_cast<double>(N);
                  mean_dy_xhat /= static_cast<double>(N);
                  for (std::size_t j = 0; j < N; ++j) {
                    const std::size_t k = i * N + j;
                    g(x).data[k] += static_cast<T>(inv_std[i] *
                                                   (dy[j] - mean_dy - xhat[k] * mean_dy_xhat));
                  }
                }
                for (std::size_t j = 0; j < N; ++j) {
                  if (req(gamma)) g(gamma).data[j] += static_cast<T>(dgamma[j]);
                  if (req(beta)) g(beta).data[j] += static_cast<T>(dbeta[j]);
                }
              });
}

template <typename T>
Var Tape<T>::softmax_rows(Var x) {
  require_rank(x, 2, "softmax_rows");
  const std::size_t M = val(x).dim(0), N = val(x).dim(1);
  Tensor<T> out({M, N});
  for (std::size_t i = 0; i < M; ++i) {
    const T* row = val(x).data.data() + i * N;
    T* orow = out.data.data() + i * N;
    const T mx = *std::max_element(row, row + N);
    double z = 0.0;
    for (std::size_t j = 0; j < N; ++j) {
      orow[j] = std::exp(row[j] - mx);
      z += orow[j];
    }
    for (std::size_t j = 0; j < N; ++j) orow[j] = static_cast<T>(orow[j] / z);
  }
  Var o{nodes_.size()};
  return push(std::move(out), req(x), [this, x, o, M, N] {
    for (std::size_t i = 0; i < M; ++i) {
      const T* y = val(o).data.data() + i * N;
      const T* go = g(o).data.data() + i * N;
      double dot = 0.0;
      for (std::size_t j = 0; j < N; ++j) dot += static_cast<double>(go[j]) * y[j];
      T* gx = g(x).data.data() + i * N;
      for (std::size_t j = 0; j < N; ++j) gx[j] += static_cast<T>(y[j] * (go[j] - dot));
    }
  });
}

template <typename T>
Var Tape<T>::sparsemax_rows(Var x) {
  require_rank(x, 2, "sparsemax_rows");
  const std::size_t M = val(x).dim(0), N = val(x).dim(1);
  Tensor<T> out({M, N});
  std::vector<T> sorted(N);
  for (std::size_t i = 0; i < M; ++i) {
    const T* z = val(x).data.data() + i * N;
    std::copy(z, z + N, sorted.begin());
    std::sort(sorted.begin(), sorted.end(), std::greater<T>());
    // Support size k(z) = max{k : 1 + k z_(k) > sum_{j<=k} z_(j)}.
    T cumsum{0};
    T support_sum{0};
    std::size_t k = 0;
    for (std::size_t j = 0; j < N; ++j) {
      cumsum += sorted[j];
      if (T(1) + static_cast<T>(j + 1) * sorted[j] > cumsum) {
        k = j + 1;
        support_sum = cumsum;
      }
    }
    const T tau = (support_sum - T(1)) / static_cast<T>(k);
    for (std::size_t j = 0; j < N; ++j) out.data[i * N + j] = std::max(z[j] - tau, T{0});
  }
  Var o{nodes_.size()};
  return push(std::move(out), req(x), [this, x, o, M, N] {
    for (std::size_t i = 0; i < M; ++i) {
      const T* p = val(o).data.data() + i * N;
      const T* go = g(o).data.data() + i * N;
      T sum{0};
      std::size_t support = 0;
      for (std::size_t j = 0; j < N; ++j) {
        if (p[j] > T{0}) {
          sum += go[j];
          ++support;
        }
      }
      const T mean = support ? sum / static_cast<T>(support) : T{0};
      T* gx = g(x).data.data() + i * N;
      for (std::size_t j = 0; j < N; ++j) {
        if (p[j] > T{0}) gx[j] += go[j] - mean;
      }
    }
  });
}

template <typename T>
Var Tape<T>::slice_cols(Var x, std::size_t begin, std::size_t end) {
  require_rank(x, 2, "slice_cols");
  const std::size_t M = val(x).dim(0), N = val(x).dim(1);
  if (begin >= end || end > N) throw ShapeError("slice_cols: invalid column range");
  const std::size_t W = end - begin;
  Tensor<T> out({M, W});
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t j = 0; j < W; ++j) out.data[i * W + j] = val(x).data[i * N + begin + j];
  Var o{nodes_.size()};
  return push(std::move(out), req(x), [this, x, o, M, N, W, begin] {
    for (std::size_t i = 0; i < M; ++i)
      for (std::size_t j = 0; j < W; ++j) g(x).data[i * N + begin + j] += g(o).data[i * W + j];
  });
}

template <typename T>
Var Tape<T>::concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t M = val(parts[0]).dim(0);
  std::size_t N = 0;
  bool any = false;
  for (Var p : parts) {
    require_rank(p, 2, "concat_cols");
    if (val(p).dim(0) != M) throw ShapeError("concat_cols: row counts differ");
    N += val(p).dim(1);
    any = any || req(p);
  }
  Tensor<T> out({M, N});
  std::size_t off = 0;
  for (Var p : parts) {
    const std::size_t W = val(p).dim(1);
    for (std::size_t i = 0; i < M; ++i)
      for (std::size_t j = 0; j < W; ++j) out.data[i * N + off + j] = val(p).data[i * W + j];
    off += W;
  }
  Var o{nodes_.size()};
  return push(std::move(out), any, [this, parts, o, M, N] {
    std::size_t off = 0;
    for (Var p : parts) {
      const std::size_t W = val(p).dim(1);
      if (req(p))
        for (std::size_t i = 0; i < M; ++i)
          for (std::size_t j = 0; j < W; ++j) g(p).data[i * W + j] += g(o).data[i * N + off + j];
      off += W;
    }
  });
}

template <typename T>
Var Tape<T>::mean_rows(Var x) {
  require_rank(x, 2, "mean_rows");
  const std::size_t M = val(x).dim(0), N = val(x).dim(1);
  Tensor<T> out({1, N});
  std::vector<double> acc(N, 0.0);
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t j = 0; j < N; ++j) acc[j] += val(x).data[i * N + j];
  for (std::size_t j = 0; j < N; ++j) out.data[j] = static_cast<T>(acc[j] / static_cast<double>(M));
  Var o{nodes_.size()};
  return push(std::move(out), req(x), [this, x, o, M, N] {
    const T inv = T(1) / static_cast<T>(M);
    for (std::size_t i = 0; i < M; ++i)
      for (std::size_t j = 0; j < N; ++j) g(x).data[i * N + j] += inv * g(o).data[j];
  });
}

// ---------------------------------------------------------------------------
// Feature maps

template <typename T>
Var Tape<T>::conv2d(Var x, Var w, Var b, std::size_t stride, std::size_t pad) {
  require_rank(x, 3, "conv2d");
  require_rank(w, 4, "conv2d");
  const std::size_t C = val(x).dim(0), H = val(x).dim(1), W = val(x).dim(2);
  const std::size_t O = val(w).dim(0), K = val(w).dim(2);
  if (val(w).dim(1) != C || val(w).dim(3) != K) {
    throw ShapeError("conv2d: kernel " + shape_str(val(w).shape) + " incompatible with input " +
                     shape_str(val(x).shape));
  }
  if (val(b).size() != O) throw ShapeError("conv2d: bias size must equal output channels");
  if (stride == 0 || H + 2 * pad < K || W + 2 * pad < K) throw ShapeError("conv2d: bad geometry");
  const std::size_t OH = (H + 2 * pad - K) / stride + 1;
  const std::size_t OW = (W + 2 * pad - K) / stride + 1;

  // Valid output range [lo, hi) for kernel tap kk along an axis of length L.
  auto valid = [=](std::size_t kk, std::size_t L, std::size_t OL) {
    std::size_t lo = 0;
    while (lo < OL && lo * stride + kk < pad) ++lo;
    std::size_t hi = OL;
    while (hi > lo && (hi - 1) * stride + kk - pad >= L) --hi;
    return std::pair{lo, hi};
  };

  Tensor<T> out({O, OH, OW});
  const T* X = val(x).data.data();
  const T* Wt = val(w).data.data();
  T* Y = out.data.data();
  std::vector<double> plane(OH * OW);
  for (std::size_t o = 0; o < O; ++o) {
    double* yo = plane.data();
    std::fill(yo, yo + OH * OW, static_cast<double>(val(b).data[o]));
    for (std::size_t c = 0; c < C; ++c) {
      const T* xc = X + c * H * W;
      for (std::size_t ky = 0; ky < K; ++ky) {
        const auto [y0, y1] = valid(ky, H, OH);
        for (std::size_t kx = 0; kx < K; ++kx) {
          const auto [x0, x1] = valid(kx, W, OW);
          const double wv = Wt[((o * C + c) * K + ky) * K + kx];
          for (std::size_t oy = y0; oy < y1; ++oy) {
            const T* xrow = xc + (oy * stride + ky - pad) * W + kx - pad;
            double* yrow = yo + oy * OW;
            for (std::size_t ox = x0; ox < x1; ++ox) yrow[ox] += wv * xrow[ox * stride];
          }
        }
      }
    }
    for (std::size_t i = 0; i < OH * OW; ++i) Y[o * OH * OW + i] = static_cast<T>(plane[i]);
  }
  Var o_var{nodes_.size()};
  return push(std::move(out), req(x) || req(w) || req(b),
              [this, x, w, b, o_var, C, H, W, O, K, OH, OW, stride, pad, valid] {
                const T* G = g(o_var).data.data();
                const T* X = val(x).data.data();
                const T* Wt = val(w).data.data();
                if (req(b)) {
                  for (std::size_t o = 0; o < O; ++o) {
                    double acc = 0.0;
                    for (std::size_t i = 0; i < OH * OW; ++i) acc += G[o * OH * OW + i];
                    g(b).data[o] += static_cast<T>(acc);
                  }
                }
                std::vector<double> gx_acc(req(x) ? C * H * W : 0, 0.0);
                double* GX = req(x) ? gx_acc.data() : nullptr;
                T* GW = req(w) ? g(w).data.data() : nullptr;
                for (std::size_t o = 0; o < O; ++o) {
                  const T* go = G + o * OH * OW;
                  for (std::size_t c = 0; c < C; ++c) {
                    const std::size_t xoff = c * H * W;
                    for (std::size_t ky = 0; ky < K; ++ky) {
                      const auto [y0, y1] = valid(ky, H, OH);
                      for (std::size_t kx = 0; kx < K; ++kx) {
                        const auto [x0, x1] = valid(kx, W, OW);
                        const std::size_t widx = ((o * C + c) * K + ky) * K + kx;
                        const double wv = Wt[widx];
                        double acc = 0.0;
                        for (std::size_t oy = y0; oy < y1; ++oy) {
                          const std::size_t base = xoff + (oy * stride + ky - pad) * W + kx - pad;
                          const T* grow = go + oy * OW;
                          if (GW) {
                            const T* xrow = X + base;
                            for (std::size_t ox = x0; ox < x1; ++ox) {
                              acc += static_cast<double>(grow[ox]) * xrow[ox * stride];
                            }
                          }
                          if (GX) {
                            double* gxrow = GX + base;
                            for (std::size_t ox = x0; ox < x1; ++ox) gxrow[ox * stride] += wv * grow[ox];
                          }
                        }
                        if (GW) GW[widx] += static_cast<T>(acc);
                      }
                    }
                  }
                }
                for (std::size_t i = 0; i < gx_acc.size(); ++i) g(x).data[i] += static_cast<T>(gx_acc[i]);
              });
}

template <typename T>
Var Tape<T>::global_avg_pool(Var x) {
  require_rank(x, 3, "global_avg_pool");
  const std::size_t C = val(x).dim(0), HW = val(x).dim(1) * val(x).dim(2);
  Tensor<T> out({1, C});
  for (std::size_t c = 0; c < C; ++c) {
    double acc = 0.0;
    for (std::size_t i = 0; i < HW; ++i) acc += val(x).data[c * HW + i];
    out.data[c] = static_cast<T>(acc / static_cast<double>(HW));
  }
  Var o{nodes_.size()};
  return push(std::move(out), req(x), [this, x, o, C, HW] {
    const T inv = T(1) / static_cast<T>(HW);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < HW; ++i) g(x).data[c * HW + i] += inv * g(o).data[c];
  });
}

template <typename T>
Var Tape<T>::map_to_tokens(Var x) {
  require_rank(x, 3, "map_to_tokens");
  const std::size_t C = val(x).dim(0), HW = val(x).dim(1) * val(x).dim(2);
  Tensor<T> out({HW, C});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < HW; ++i) out.data[i * C + c] = val(x).data[c * HW + i];
  Var o{nodes_.size()};
  return push(std::move(out), req(x), [this, x, o, C, HW] {
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < HW; ++i) g(x).data[c * HW + i] += g(o).data[i * C + c];
  });
}

template <typename T>
Var Tape<T>::reshape(Var x, Shape shape) {
  if (numel(shape) != val(x).size()) {
    throw ShapeError("reshape: " + shape_str(val(x).shape) + " -> " + shape_str(shape));
  }
  Tensor<T> out(std::move(shape), val(x).data);
  Var o{nodes_.size()};
  return push(std::move(out), req(x), [this, x, o] {
    for (std::size_t i = 0; i < g(o).size(); ++i) g(x).data[i] += g(o).data[i];
  });
}

template <typename T>
Var Tape<T>::sum(Var x) {
  double acc = 0.0;
  for (T v : val(x).data) acc += v;
  Var o{nodes_.size()};
  return push(Tensor<T>({1, 1}, static_cast<T>(acc)), req(x), [this, x, o] {
    const T go = g(o).data[0];
    for (auto& v : g(x).data) v += go;
  });
}

template <typename T>
Var Tape<T>::mean(Var x) {
  return scale(sum(x), T(1) / static_cast<T>(val(x).size()));
}

template class Tape<float>;
template class Tape<double>;

}  // namespace ipf::nn
