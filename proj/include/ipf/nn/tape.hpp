#pragma once

#include <cstddef>
#include <functional>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "ipf/nn/tensor.hpp"

namespace ipf::nn {

// Handle to a node recorded on a Tape.
struct Var {
  std::size_t id = 0;
};

// Reverse-mode tape. Each op evaluates eagerly and records a closure that
// propagates the output gradient to its inputs. A tape is single-use: build
// the graph, call backward() once, read gradients. Distinct tapes may share
// a ParamStore read-only across threads.
template <typename T>
class Tape {
 public:
  explicit Tape(const ParamStore<T>* params = nullptr) : params_(params) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor<T> value);
  // Trainable leaf bound to a ParamStore entry; repeated calls return the
  // same node.
  Var param(std::string_view name);

  const Tensor<T>& value(Var v) const { return nodes_[v.id].value; }
  const Tensor<T>& grad(Var v) const { return nodes_[v.id].grad; }
  T scalar(Var v) const;
  std::size_t node_count() const noexcept { return nodes_.size(); }

  // Seeds d(loss)/d(loss) = 1 and runs the recorded closures in reverse.
  // Throws ShapeError if `loss` is not a single element.
  void backward(Var loss);
  // Gradients for every ParamStore entry (zeros for entries not on the tape).
  Gradients<T> param_grads() const;

  // Elementwise, equal shapes.
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, T s);
  Var add_scalar(Var a, T s);
  Var abs(Var a);
  Var gelu(Var a);
  Var sigmoid(Var a);

  // 2D ops.
  Var matmul(Var a, Var b);          // [M,K] x [K,N]
  Var transpose(Var a);              // [M,N] -> [N,M]
  Var add_row_bias(Var x, Var bias); // [M,N] + [N]
  Var linear(Var x, Var w, Var b) { return add_row_bias(matmul(x, w), b); }
  Var layer_norm(Var x, Var gamma, Var beta, T eps = T(1e-5));  // per row
  Var softmax_rows(Var x);
  Var sparsemax_rows(Var x);
  Var slice_cols(Var x, std::size_t begin, std::size_t end);
  Var concat_cols(const std::vector<Var>& parts);
  Var mean_rows(Var x);  // [M,N] -> [1,N]

  // Feature maps [C,H,W].
  Var conv2d(Var x, Var w, Var b, std::size_t stride, std::size_t pad);  // w: [O,C,K,K]
  Var global_avg_pool(Var x);  // -> [1,C]
  Var map_to_tokens(Var x);    // -> [H*W, C]

  Var reshape(Var x, Shape shape);
  Var sum(Var x);   // -> [1,1]
  Var mean(Var x);  // -> [1,1]

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    std::function<void()> backward;
    bool requires_grad = false;
    std::ptrdiff_t param_index = -1;
  };

  Var push(Tensor<T> value, bool requires_grad, std::function<void()> backward = {});
  bool req(Var v) const { return nodes_[v.id].requires_grad; }
  Tensor<T>& g(Var v) { return nodes_[v.id].grad; }
  const Tensor<T>& val(Var v) const { return nodes_[v.id].value; }
  void require_same_shape(Var a, Var b, const char* op) const;
  void require_rank(Var a, std::size_t rank, const char* op) const;

  const ParamStore<T>* params_;
  std::vector<Node> nodes_;
  std::unordered_map<std::size_t, Var> param_nodes_;
  bool backward_done_ = false;
};

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace ipf::nn
