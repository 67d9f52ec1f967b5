#include "spectra_invar/tensor.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <sstream>

#include "spectra_invar/error.hpp"

namespace spectra_invar {

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <typename T>
DiffTensor<T>::DiffTensor(Shape s, std::vector<T> v, bool needs_grad)
    : shape(std::move(s)), values(std::move(v)), requires_grad(needs_grad) {
  if (values.size() != numel(shape)) {
    throw ShapeError("tensor of shape " + shape_string(shape) + " given " +
                     std::to_string(values.size()) + " values");
  }
  grad.assign(values.size(), T(0));
}

template <typename T>
DiffTensor<T> DiffTensor<T>::zeros(Shape s, bool needs_grad) {
  const std::size_t n = numel(s);
  return DiffTensor(std::move(s), std::vector<T>(n, T(0)), needs_grad);
}

template <typename T>
void DiffTensor<T>::zero_grad() {
  std::fill(grad.begin(), grad.end(), T(0));
}

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

}  // namespace

template <typename T>
typename Graph<T>::Node& Graph<T>::node(Var v) {
  if (v.id >= nodes_.size()) throw GraphError("variable does not belong to this graph");
  return nodes_[v.id];
}

template <typename T>
const typename Graph<T>::Node& Graph<T>::node(Var v) const {
  if (v.id >= nodes_.size()) throw GraphError("variable does not belong to this graph");
  return nodes_[v.id];
}

template <typename T>
Var Graph<T>::push(Shape shape, std::vector<T> values, std::vector<std::size_t> parents) {
  bool needs = false;
  for (std::size_t p : parents) needs = needs || nodes_[p].t.requires_grad;
  Node n;
  n.t = DiffTensor<T>(std::move(shape), std::move(values), needs);
  n.t.node_id = nodes_.size();
  n.parents = std::move(parents);
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

template <typename T>
Var Graph<T>::input(DiffTensor<T>& leaf) {
  Var v = push(leaf.shape, leaf.values, {});
  nodes_[v.id].t.requires_grad = leaf.requires_grad;
  nodes_[v.id].bound = &leaf;
  leaf.node_id = v.id;
  return v;
}

template <typename T>
Var Graph<T>::constant(Shape shape, std::vector<T> values) {
  if (values.size() != numel(shape)) {
    throw ShapeError("constant of shape " + shape_string(shape) + " given " +
                     std::to_string(values.size()) + " values");
  }
  return push(std::move(shape), std::move(values), {});
}

template <typename T>
Var Graph<T>::detach(Var x) {
  const Node& n = node(x);
  return push(n.t.shape, n.t.values, {});
}

template <typename T>
Var Graph<T>::conv2d(Var x, Var kernel, Var bias, int stride, int pad) {
  const Shape xs = shape(x);
  const Shape ks = shape(kernel);
  const Shape bs = shape(bias);
  require(xs.size() == 4, "conv2d input must be [N,C,H,W], got " + shape_string(xs));
  require(ks.size() == 4, "conv2d kernel must be [K,C,kh,kw], got " + shape_string(ks));
  require(ks[1] == xs[1], "conv2d channel mismatch: input " + shape_string(xs) + " kernel " +
                              shape_string(ks));
  require(bs.size() == 1 && bs[0] == ks[0],
          "conv2d bias " + shape_string(bs) + " does not match kernel " + shape_string(ks));
  require(stride >= 1 && pad >= 0, "conv2d needs stride >= 1 and pad >= 0");
  const std::ptrdiff_t N = xs[0], C = xs[1], H = xs[2], W = xs[3];
  const std::ptrdiff_t K = ks[0], kh = ks[2], kw = ks[3];
  require(kh <= H + 2 * pad && kw <= W + 2 * pad,
          "conv2d kernel " + shape_string(ks) + " larger than padded input " + shape_string(xs));
  const std::ptrdiff_t Ho = (H + 2 * pad - kh) / stride + 1;
  const std::ptrdiff_t Wo = (W + 2 * pad - kw) / stride + 1;
  const std::ptrdiff_t P = Ho * Wo;
  const std::ptrdiff_t rowsC = C * kh * kw;
  const std::ptrdiff_t colsN = N * P;

  // im2col: [C*kh*kw, N*Ho*Wo]
  auto cols = std::make_shared<std::vector<T>>(static_cast<std::size_t>(rowsC * colsN), T(0));
  const std::vector<T>& xv = nodes_[x.id].t.values;
  for (std::ptrdiff_t n = 0; n < N; ++n) {
    for (std::ptrdiff_t c = 0; c < C; ++c) {
      const T* plane = xv.data() + (n * C + c) * H * W;
      for (std::ptrdiff_t i = 0; i < kh; ++i) {
        for (std::ptrdiff_t j = 0; j < kw; ++j) {
          T* dst = cols->data() + ((c * kh + i) * kw + j) * colsN + n * P;
          for (std::ptrdiff_t oh = 0; oh < Ho; ++oh) {
            const std::ptrdiff_t ih = oh * stride - pad + i;
            if (ih < 0 || ih >= H) continue;
            for (std::ptrdiff_t ow = 0; ow < Wo; ++ow) {
              const std::ptrdiff_t iw = ow * stride - pad + j;
              if (iw >= 0 && iw < W) dst[oh * Wo + ow] = plane[ih * W + iw];
            }
          }
        }
      }
    }
  }

  RowMat<T> y = CMapMat<T>(nodes_[kernel.id].t.values.data(), K, rowsC) *
                CMapMat<T>(cols->data(), rowsC, colsN);
  std::vector<T> out(static_cast<std::size_t>(N * K * P));
  const std::vector<T>& bv = nodes_[bias.id].t.values;
  for (std::ptrdiff_t n = 0; n < N; ++n) {
    for (std::ptrdiff_t k = 0; k < K; ++k) {
      T* dst = out.data() + (n * K + k) * P;
      const T* src = y.data() + k * colsN + n * P;
      for (std::ptrdiff_t p = 0; p < P; ++p) dst[p] = src[p] + bv[k];
    }
  }

  Var v = push({static_cast<std::size_t>(N), static_cast<std::size_t>(K),
                static_cast<std::size_t>(Ho), static_cast<std::size_t>(Wo)},
               std::move(out), {x.id, kernel.id, bias.id});
  const std::size_t self = v.id, xi = x.id, ki = kernel.id, bi = bias.id;
  nodes_[self].backward = [=](Graph& g) {
    const std::vector<T>& gout = g.nodes_[self].t.grad;
    RowMat<T> G(K, colsN);
    for (std::ptrdiff_t n = 0; n < N; ++n) {
      for (std::ptrdiff_t k = 0; k < K; ++k) {
        const T* src = gout.data() + (n * K + k) * P;
        std::copy(src, src + P, G.data() + k * colsN + n * P);
      }
    }
    if (g.wants(ki)) {
      MapMat<T>(g.nodes_[ki].t.grad.data(), K, rowsC).noalias() +=
          G * CMapMat<T>(cols->data(), rowsC, colsN).transpose();
    }
    if (g.wants(bi)) {
      std::vector<T>& gb = g.nodes_[bi].t.grad;
      for (std::ptrdiff_t k = 0; k < K; ++k) gb[k] += G.row(k).sum();
    }
    if (g.wants(xi)) {
      RowMat<T> dcols =
          CMapMat<T>(g.nodes_[ki].t.values.data(), K, rowsC).transpose() * G;
      std::vector<T>& gx = g.nodes_[xi].t.grad;
      for (std::ptrdiff_t n = 0; n < N; ++n) {
        for (std::ptrdiff_t c = 0; c < C; ++c) {
          T* plane = gx.data() + (n * C + c) * H * W;
          for (std::ptrdiff_t i = 0; i < kh; ++i) {
            for (std::ptrdiff_t j = 0; j < kw; ++j) {
              const T* src = dcols.data() + ((c * kh + i) * kw + j) * colsN + n * P;
              for (std::ptrdiff_t oh = 0; oh < Ho; ++oh) {
                const std::ptrdiff_t ih = oh * stride - pad + i;
                if (ih < 0 || ih >= H) continue;
                for (std::ptrdiff_t ow = 0; ow < Wo; ++ow) {
                  const std::ptrdiff_t iw = ow * stride - pad + j;
                  if (iw >= 0 && iw < W) plane[ih * W + iw] += src[oh * Wo + ow];
                }
              }
            }
          }
        }
      }
    }
  };
  return v;
}

template <typename T>
Var Graph<T>::linear(Var x, Var weight, Var bias) {
  const Shape xs = shape(x), ws = shape(weight), bs = shape(bias);
  require(xs.size() == 2 && ws.size() == 2 && xs[1] == ws[0],
          "linear shape mismatch: input " + shape_string(xs) + " weight " + shape_string(ws));
  require(bs.size() == 1 && bs[0] == ws[1],
          "linear bias " + shape_string(bs) + " does not match weight " + shape_string(ws));
  const std::ptrdiff_t N = xs[0], D = xs[1], M = ws[1];
  RowMat<T> y = CMapMat<T>(nodes_[x.id].t.values.data(), N, D) *
                CMapMat<T>(nodes_[weight.id].t.values.data(), D, M);
  const std::vector<T>& bv = nodes_[bias.id].t.values;
  for (std::ptrdiff_t n = 0; n < N; ++n)
    for (std::ptrdiff_t m = 0; m < M; ++m) y(n, m) += bv[m];
  Var v = push({xs[0], ws[1]}, std::vector<T>(y.data(), y.data() + y.size()),
               {x.id, weight.id, bias.id});
  const std::size_t self = v.id, xi = x.id, wi = weight.id, bi = bias.id;
  nodes_[self].backward = [=](Graph& g) {
    CMapMat<T> G(g.nodes_[self].t.grad.data(), N, M);
    if (g.wants(xi)) {
      MapMat<T>(g.nodes_[xi].t.grad.data(), N, D).noalias() +=
          G * CMapMat<T>(g.nodes_[wi].t.values.data(), D, M).transpose();
    }
    if (g.wants(wi)) {
      MapMat<T>(g.nodes_[wi].t.grad.data(), D, M).noalias() +=
          CMapMat<T>(g.nodes_[xi].t.values.data(), N, D).transpose() * G;
    }
    if (g.wants(bi)) {
      std::vector<T>& gb = g.nodes_[bi].t.grad;
      for (std::ptrdiff_t m = 0; m < M; ++m) gb[m] += G.col(m).sum();
    }
  };
  return v;
}

template <typename T>
Var Graph<T>::grl(Var x, T lambda) {
  if (!(lambda > T(0))) throw ConfigError("gradient reversal needs lambda > 0");
  Var v = push(shape(x), nodes_[x.id].t.values, {x.id});
  const std::size_t self = v.id, xi = x.id;
  nodes_[self].backward = [=](Graph& g) {
    if (!g.wants(xi)) return;
    const std::vector<T>& go = g.nodes_[self].t.grad;
    std::vector<T>& gx = g.nodes_[xi].t.grad;
    for (std::size_t i = 0; i < go.size(); ++i) gx[i] += -lambda * go[i];
  };
  return v;
}

template <typename T>
Var Graph<T>::relu(Var x) {
  return leaky_relu(x, T(0));
}

template <typename T>
Var Graph<T>::leaky_relu(Var x, T slope) {
  std::vector<T> out = nodes_[x.id].t.values;
  for (T& e : out) e = e > T(0) ? e : slope * e;
  Var v = push(shape(x), std::move(out), {x.id});
  const std::size_t self = v.id, xi = x.id;
  nodes_[self].backward = [=](Graph& g) {
    if (!g.wants(xi)) return;
    const std::vector<T>& xv = g.nodes_[xi].t.values;
    const std::vector<T>& go = g.nodes_[self].t.grad;
    std::vector<T>& gx = g.nodes_[xi].t.grad;
    // Subgradient at exactly 0 uses the negative-side slope (0 for relu).
    for (std::size_t i = 0; i < go.size(); ++i) gx[i] += xv[i] > T(0) ? go[i] : slope * go[i];
  };
  return v;
}

template <typename T>
Var Graph<T>::sigmoid(Var x) {
  std::vector<T> out = nodes_[x.id].t.values;
  for (T& e : out) e = T(1) / (T(1) + std::exp(-e));
  Var v = push(shape(x), std::move(out), {x.id});
  const std::size_t self = v.id, xi = x.id;
  nodes_[self].backward = [=](Graph& g) {
    if (!g.wants(xi)) return;
    const std::vector<T>& y = g.nodes_[self].t.values;
    const std::vector<T>& go = g.nodes_[self].t.grad;
    std::vector<T>& gx = g.nodes_[xi].t.grad;
    for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * y[i] * (T(1) - y[i]);
  };
  return v;
}

template <typename T>
Var Graph<T>::tanh(Var x) {
  std::vector<T> out = nodes_[x.id].t.values;
  for (T& e : out) e = std::tanh(e);
  Var v = push(shape(x), std::move(out), {x.id});
  const std::size_t self = v.id, xi = x.id;
  nodes_[self].backward = [=](Graph& g) {
    if (!g.wants(xi)) return;
    const std::vector<T>& y = g.nodes_[self].t.values;
    const std::vector<T>& go = g.nodes_[self].t.grad;
    std::vector<T>& gx = g.nodes_[xi].t.grad;
    for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * (T(1) - y[i] * y[i]);
  };
  return v;
}

template <typename T>
Var Graph<T>::softmax_rows(Var x) {
  const Shape xs = shape(x);
  require(xs.size() == 2, "softmax_rows expects [N,C], got " + shape_string(xs));
  const std::size_t N = xs[0], C = xs[1];
  std::vector<T> out = nodes_[x.id].t.values;
  for (std::size_t n = 0; n < N; ++n) {
    T* r = out.data() + n * C;
    const T mx = *std::max_element(r, r + C);
    T z = 0;
    for (std::size_t c = 0; c < C; ++c) z += (r[c] = std::exp(r[c] - mx));
    for (std::size_t c = 0; c < C; ++c) r[c] /= z;
  }
  Var v = push(xs, std::move(out), {x.id});
  const std::size_t self = v.id, xi = x.id;
  nodes_[self].backward = [=](Graph& g) {
    if (!g.wants(xi)) return;
    const std::vector<T>& y = g.nodes_[self].t.values;
    const std::vector<T>& go = g.nodes_[self].t.grad;
    std::vector<T>& gx = g.nodes_[xi].t.grad;
    for (std::size_t n = 0; n < N; ++n) {
      T dot = 0;
      for (std::size_t c = 0; c < C; ++c) dot += go[n * C + c] * y[n * C + c];
      for (std::size_t c = 0; c < C; ++c) gx[n * C + c] += y[n * C + c] * (go[n * C + c] - dot);
    }
  };
  return v;
}

template <typename T>
Var Graph<T>::reshape(Var x, Shape s) {
  require(numel(s) == node(x).t.size(),
          "cannot reshape " + shape_string(shape(x)) + " to " + shape_string(s));
  Var v = push(std::move(s), nodes_[x.id].t.values, {x.id});
  const std::size_t self = v.id, xi = x.id;
  nodes_[self].backward = [=](Graph& g) {
    if (!g.wants(xi)) return;
    const std::vector<T>& go = g.nodes_[self].t.grad;
    std::vector<T>& gx = g.nodes_[xi].t.grad;
    for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
  };
  return v;
}

template <typename T>
Var Graph<T>::rows(Var x, std::span<const std::size_t> index) {
  const Shape xs = shape(x);
  require(!xs.empty(), "rows() needs at least one dimension");
  const std::size_t stride = numel(xs) / std::max<std::size_t>(xs[0], 1);
  std::vector<std::size_t> idx(index.begin(), index.end());
  std::vector<T> out;
  out.reserve(idx.size() * stride);
  const std::vector<T>& xv = nodes_[x.id].t.values;
  for (std::size_t r : idx) {
    require(r < xs[0], "row index " + std::to_string(r) + " out of range for " + shape_string(xs));
    out.insert(out.end(), xv.begin() + r * stride, xv.begin() + (r + 1) * stride);
  }
  Shape os = xs;
  os[0] = idx.size();
  Var v = push(os, std::move(out), {x.id});
  const std::size_t self = v.id, xi = x.id;
  nodes_[self].backward = [=](Graph& g) {
    if (!g.wants(xi)) return;
    const std::vector<T>& go = g.nodes_[self].t.grad;
    std::vector<T>& gx = g.nodes_[xi].t.grad;
    for (std::size_t k = 0; k < idx.size(); ++k)
      for (std::size_t j = 0; j < stride; ++j) gx[idx[k] * stride + j] += go[k * stride + j];
  };
  return v;
}

template <typename T>
Var Graph<T>::spatial_mean(Var x) {
  const Shape xs = shape(x);
  require(xs.size() == 4, "spatial_mean expects [N,C,H,W], got " + shape_string(xs));
  const std::size_t NC = xs[0] * xs[1], P = xs[2] * xs[3];
  std::vector<T> out(NC);
  const std::vector<T>& xv = nodes_[x.id].t.values;
  for (std::size_t i = 0; i < NC; ++i) {
    double s = 0;
    for (std::size_t p = 0; p < P; ++p) s += xv[i * P + p];
    out[i] = static_cast<T>(s / static_cast<double>(P));
  }
  Var v = push({xs[0], xs[1]}, std::move(out), {x.id});
  const std::size_t self = v.id, xi = x.id;
  nodes_[self].backward = [=](Graph& g) {
    if (!g.wants(xi)) return;
    const std::vector<T>& go = g.nodes_[self].t.grad;
    std::vector<T>& gx = g.nodes_[xi].t.grad;
    const T inv = T(1) / static_cast<T>(P);
    for (std::size_t i = 0; i < NC; ++i)
      for (std::size_t p = 0; p < P; ++p) gx[i * P + p] += go[i] * inv;
  };
  return v;
}

template <typename T>
Var Graph<T>::add(Var a, Var b) {
  require(shape(a) == shape(b),
          "add shape mismatch: " + shape_string(shape(a)) + " vs " + shape_string(shape(b)));
  std::vector<T> out = nodes_[a.id].t.values;
  const std::vector<T>& bv = nodes_[b.id].t.values;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  Var v = push(shape(a), std::move(out), {a.id, b.id});
  const std::size_t self = v.id, ai = a.id, bi = b.id;
  nodes_[self].backward = [=](Graph& g) {
    const std::vector<T>& go = g.nodes_[self].t.grad;
    for (std::size_t p : {ai, bi}) {
      if (!g.wants(p)) continue;
      std::vector<T>& gp = g.nodes_[p].t.grad;
      for (std::size_t i = 0; i < go.size(); ++i) gp[i] += go[i];
    }
  };
  return v;
}

template <typename T>
Var Graph<T>::scale(Var x, T factor) {
  std::vector<T> out = nodes_[x.id].t.values;
  for (T& e : out) e *= factor;
  Var v = push(shape(x), std::move(out), {x.id});
  const std::size_t self = v.id, xi = x.id;
  nodes_[self].backward = [=](Graph& g) {
    if (!g.wants(xi)) return;
    const std::vector<T>& go = g.nodes_[self].t.grad;
    std::vector<T>& gx = g.nodes_[xi].t.grad;
    for (std::size_t i = 0; i < go.size(); ++i) gx[i] += factor * go[i];
  };
  return v;
}

template <typename T>
Var Graph<T>::sum(Var x) {
  double s = 0;
  for (T e : nodes_[x.id].t.values) s += e;
  Var v = push({1}, {static_cast<T>(s)}, {x.id});
  const std::size_t self = v.id, xi = x.id;
  nodes_[self].backward = [=](Graph& g) {
    if (!g.wants(xi)) return;
    const T go = g.nodes_[self].t.grad[0];
    for (T& e : g.nodes_[xi].t.grad) e += go;
  };
  return v;
}

template <typename T>
Var Graph<T>::mean(Var x) {
  const std::size_t n = node(x).t.size();
  require(n > 0, "mean of an empty tensor");
  double s = 0;
  for (T e : nodes_[x.id].t.values) s += e;
  Var v = push({1}, {static_cast<T>(s / static_cast<double>(n))}, {x.id});
  const std::size_t self = v.id, xi = x.id;
  nodes_[self].backward = [=](Graph& g) {
    if (!g.wants(xi)) return;
    const T go = g.nodes_[self].t.grad[0] / static_cast<T>(n);
    for (T& e : g.nodes_[xi].t.grad) e += go;
  };
  return v;
}

template <typename T>
Var Graph<T>::frobenius_sq(Var a, Var b) {
  require(shape(a) == shape(b), "frobenius_sq shape mismatch: " + shape_string(shape(a)) +
                                    " vs " + shape_string(shape(b)));
  const std::vector<T>& av = nodes_[a.id].t.values;
  const std::vector<T>& bv = nodes_[b.id].t.values;
  double s = 0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    const double d = static_cast<double>(av[i]) - static_cast<double>(bv[i]);
    s += d * d;
  }
  Var v = push({1}, {static_cast<T>(s)}, {a.id, b.id});
  const std::size_t self = v.id, ai = a.id, bi = b.id;
  nodes_[self].backward = [=](Graph& g) {
    const T go = g.nodes_[self].t.grad[0];
    const std::vector<T>& x = g.nodes_[ai].t.values;
    const std::vector<T>& y = g.nodes_[bi].t.values;
    if (g.wants(ai)) {
      std::vector<T>& ga = g.nodes_[ai].t.grad;
      for (std::size_t i = 0; i < x.size(); ++i) ga[i] += T(2) * go * (x[i] - y[i]);
    }
    if (g.wants(bi)) {
      std::vector<T>& gb = g.nodes_[bi].t.grad;
      for (std::size_t i = 0; i < x.size(); ++i) gb[i] -= T(2) * go * (x[i] - y[i]);
    }
  };
  return v;
}

template <typename T>
Var Graph<T>::mse(Var a, Var b) {
  const std::size_t n = node(a).t.size();
  require(n > 0, "mse of empty tensors");
  return scale(frobenius_sq(a, b), T(1) / static_cast<T>(n));
}

template <typename T>
Var Graph<T>::cross_entropy(Var logits, std::span<const int> classes) {
  const Shape ls = shape(logits);
  require(ls.size() == 2, "cross_entropy expects logits [N,C], got " + shape_string(ls));
  const std::size_t N = ls[0], C = ls[1];
  require(classes.size() == N, "cross_entropy: " + std::to_string(classes.size()) +
                                   " class labels for " + std::to_string(N) + " rows");
  require(N > 0, "cross_entropy over zero rows");
  for (int c : classes) {
    if (c < 0 || static_cast<std::size_t>(c) >= C) {
      throw ShapeError("cross_entropy class index " + std::to_string(c) +
                       " outside logit width " + std::to_string(C));
    }
  }
  const std::vector<T>& lv = nodes_[logits.id].t.values;
  auto probs = std::make_shared<std::vector<T>>(N * C);
  double loss = 0;
  for (std::size_t n = 0; n < N; ++n) {
    const T* r = lv.data() + n * C;
    const T mx = *std::max_element(r, r + C);
    double z = 0;
    for (std::size_t c = 0; c < C; ++c) z += std::exp(static_cast<double>(r[c] - mx));
    for (std::size_t c = 0; c < C; ++c)
      (*probs)[n * C + c] = static_cast<T>(std::exp(static_cast<double>(r[c] - mx)) / z);
    loss += std::log(z) - static_cast<double>(r[classes[n]] - mx);
  }
  std::vector<int> cls(classes.begin(), classes.end());
  Var v = push({1}, {static_cast<T>(loss / static_cast<double>(N))}, {logits.id});
  const std::size_t self = v.id, li = logits.id;
  nodes_[self].backward = [=](Graph& g) {
    if (!g.wants(li)) return;
    const T go = g.nodes_[self].t.grad[0] / static_cast<T>(N);
    std::vector<T>& gl = g.nodes_[li].t.grad;
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t c = 0; c < C; ++c) {
        const T onehot = static_cast<int>(c) == cls[n] ? T(1) : T(0);
        gl[n * C + c] += go * ((*probs)[n * C + c] - onehot);
      }
    }
  };
  return v;
}

template <typename T>
Var Graph<T>::same_bin_pair_sq(Var z, std::span<const std::int64_t> bins) {
  const Shape zs = shape(z);
  require(!zs.empty() && zs[0] == bins.size(),
          "same_bin_pair_sq: " + std::to_string(bins.size()) + " bins for " + shape_string(zs));
  const std::size_t N = zs[0];
  const std::size_t D = N ? numel(zs) / N : 0;
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = i + 1; j < N; ++j)
      if (bins[i] == bins[j]) pairs.emplace_back(i, j);
  const std::vector<T>& zv = nodes_[z.id].t.values;
  double s = 0;
  for (auto [i, j] : pairs) {
    for (std::size_t d = 0; d < D; ++d) {
      const double diff = static_cast<double>(zv[i * D + d]) - static_cast<double>(zv[j * D + d]);
      s += diff * diff;
    }
  }
  const double count = static_cast<double>(pairs.size());
  Var v = push({1}, {static_cast<T>(pairs.empty() ? 0.0 : s / count)}, {z.id});
  const std::size_t self = v.id, zi = z.id;
  nodes_[self].backward = [=](Graph& g) {
    if (!g.wants(zi) || pairs.empty()) return;
    const T go = g.nodes_[self].t.grad[0] * T(2) / static_cast<T>(count);
    const std::vector<T>& x = g.nodes_[zi].t.values;
    std::vector<T>& gz = g.nodes_[zi].t.grad;
    for (auto [i, j] : pairs) {
      for (std::size_t d = 0; d < D; ++d) {
        const T diff = go * (x[i * D + d] - x[j * D + d]);
        gz[i * D + d] += diff;
        gz[j * D + d] -= diff;
      }
    }
  };
  return v;
}

template <typename T>
const Shape& Graph<T>::shape(Var v) const {
  return node(v).t.shape;
}

template <typename T>
std::span<const T> Graph<T>::value(Var v) const {
  return node(v).t.values;
}

template <typename T>
std::span<const T> Graph<T>::grad(Var v) const {
  return node(v).t.grad;
}

template <typename T>
T Graph<T>::item(Var v) const {
  const Node& n = node(v);
  if (n.t.size() != 1) throw ShapeError("item() on tensor of shape " + shape_string(n.t.shape));
  return n.t.values[0];
}

template <typename T>
bool Graph<T>::requires_grad(Var v) const {
  return node(v).t.requires_grad;
}

template <typename T>
void Graph<T>::backward(Var root) {
  if (consumed_) throw GraphError("backward() already ran on this graph");
  Node& r = node(root);
  if (r.t.size() != 1) throw ShapeError("backward() needs a scalar root, got " +
                                        shape_string(r.t.shape));
  consumed_ = true;
  r.t.grad[0] = T(1);
  for (std::size_t i = root.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.backward && n.t.requires_grad) n.backward(*this);
  }
  for (Node& n : nodes_) {
    if (!n.bound || !n.t.requires_grad) continue;
    std::vector<T>& dst = n.bound->grad;
    if (dst.size() != n.t.grad.size()) dst.assign(n.t.grad.size(), T(0));
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += n.t.grad[i];
  }
}

template struct DiffTensor<float>;
template struct DiffTensor<double>;
template class Graph<float>;
template class Graph<double>;

}  // namespace spectra_invar
