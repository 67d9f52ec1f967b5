#pragma once

// Minimal define-by-run reverse-mode differentiation over dense row-major
// tensors. Only the operations needed by the quality autoencoder, the
// predictor baseline and the weight CNN are provided.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace spectra_invar {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense tensor with a same-shaped gradient buffer.
template <typename T>
struct DiffTensor {
  Shape shape;
  std::vector<T> values;
  std::vector<T> grad;
  std::size_t node_id = 0;
  bool requires_grad = false;

  DiffTensor() = default;
  DiffTensor(Shape s, std::vector<T> v, bool needs_grad = false);

  static DiffTensor zeros(Shape s, bool needs_grad = false);

  std::size_t size() const { return values.size(); }
  void zero_grad();
};

/// Handle to a node inside one Graph.
struct Var {
  std::size_t id = 0;
};

/// One forward build plus exactly one backward pass.
///
/// Leaves bound with `input()` receive their gradient (accumulated into
/// `DiffTensor::grad`) when `backward()` runs. Every other node owns its
/// values and gradient.
template <typename T>
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var input(DiffTensor<T>& leaf);
  Var constant(Shape shape, std::vector<T> values);
  Var detach(Var x);

  // [N,C,H,W] x [K,C,kh,kw] + [K] -> [N,K,H',W'], cross-correlation.
  Var conv2d(Var x, Var kernel, Var bias, int stride, int pad);
  // [N,D] x [D,M] + [M] -> [N,M]
  Var linear(Var x, Var weight, Var bias);
  // Identity forward, gradient scaled by -lambda backward.
  Var grl(Var x, T lambda = T(1));

  Var relu(Var x);
  Var leaky_relu(Var x, T slope);
  Var sigmoid(Var x);
  Var tanh(Var x);
  Var softmax_rows(Var x);

  Var reshape(Var x, Shape shape);
  Var rows(Var x, std::span<const std::size_t> index);
  // [N,C,H,W] -> [N,C]
  Var spatial_mean(Var x);
  Var add(Var a, Var b);
  Var scale(Var x, T factor);

  Var sum(Var x);
  Var mean(Var x);
  Var mse(Var a, Var b);
  Var frobenius_sq(Var a, Var b);
  // Mean over rows of -log softmax(logits)[class].
  Var cross_entropy(Var logits, std::span<const int> classes);
  // sum_{i<j, bin_i == bin_j} ||z_i - z_j||^2 / (#such pairs); 0 if none.
  Var same_bin_pair_sq(Var z, std::span<const std::int64_t> bins);

  const Shape& shape(Var v) const;
  std::span<const T> value(Var v) const;
  std::span<const T> grad(Var v) const;
  T item(Var v) const;
  bool requires_grad(Var v) const;
  std::size_t size() const { return nodes_.size(); }

  /// Seeds d(root)/d(root) = 1 and propagates to every reachable leaf.
  void backward(Var root);

 private:
  struct Node {
    DiffTensor<T> t;
    std::vector<std::size_t> parents;
    std::function<void(Graph&)> backward;
    DiffTensor<T>* bound = nullptr;
  };

  Var push(Shape shape, std::vector<T> values, std::vector<std::size_t> parents);
  Node& node(Var v);
  const Node& node(Var v) const;
  bool wants(std::size_t id) const { return nodes_[id].t.requires_grad; }

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

extern template struct DiffTensor<float>;
extern template struct DiffTensor<double>;
extern template class Graph<float>;
extern template class Graph<double>;

}  // namespace spectra_invar
