#include "bsm/ops.hpp"

#include "record.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace bsm {

using detail::NodePtr;
using detail::record;

namespace {

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using MapRM = Eigen::Map<RowMatrix<Scalar>>;
template <typename Scalar>
using CMapRM = Eigen::Map<const RowMatrix<Scalar>>;

int normalize_axis(int axis, int ndim, const Shape& shape) {
  const int a = axis < 0 ? axis + ndim : axis;
  if (a < 0 || a >= ndim)
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                         shape_string(shape));
  return a;
}

// outer x axis x inner decomposition of a shape around `axis`.
struct AxisSplit {
  Index outer = 1, extent = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, int axis) {
  AxisSplit r;
  for (int i = 0; i < axis; ++i) r.outer *= s[i];
  r.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

// For each output element, the flat source index into a and b.
struct BroadcastIndex {
  Shape out;
  std::vector<Index> a, b;
};

BroadcastIndex broadcast_index(const Shape& sa, const Shape& sb) {
  BroadcastIndex r;
  r.out = broadcast_shapes(sa, sb);
  const std::size_t n = r.out.size();
  std::vector<Index> stride_a(n, 0), stride_b(n, 0);
  auto fill_strides = [n](const Shape& s, std::vector<Index>& strides) {
    Index stride = 1;
    for (std::size_t k = 0; k < s.size(); ++k) {
      const std::size_t src = s.size() - 1 - k;
      const std::size_t dst = n - 1 - k;
      strides[dst] = s[src] == 1 ? 0 : stride;
      stride *= s[src];
    }
  };
  fill_strides(sa, stride_a);
  fill_strides(sb, stride_b);
  const Index total = shape_numel(r.out);
  r.a.resize(total);
  r.b.resize(total);
  std::vector<Index> counter(n, 0);
  Index ia = 0, ib = 0;
  for (Index i = 0; i < total; ++i) {
    r.a[i] = ia;
    r.b[i] = ib;
    for (std::size_t d = n; d-- > 0;) {
      ++counter[d];
      ia += stride_a[d];
      ib += stride_b[d];
      if (counter[d] < r.out[d]) break;
      ia -= stride_a[d] * counter[d];
      ib -= stride_b[d] * counter[d];
      counter[d] = 0;
    }
  }
  return r;
}

enum class BinaryKind { add, sub, mul, div };

const char* binary_name(BinaryKind k) {
  switch (k) {
    case BinaryKind::add: return "add";
    case BinaryKind::sub: return "sub";
    case BinaryKind::mul: return "mul";
    case BinaryKind::div: return "div";
  }
  return "?";
}

template <typename Scalar>
Scalar apply_binary(BinaryKind k, Scalar x, Scalar y) {
  switch (k) {
    case BinaryKind::add: return x + y;
    case BinaryKind::sub: return x - y;
    case BinaryKind::mul: return x * y;
    case BinaryKind::div: return x / y;
  }
  return Scalar(0);
}

template <typename Scalar>
Tensor<Scalar> binary(BinaryKind kind, const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  const std::string name = binary_name(kind);
  NodePtr<Scalar> na = a.node(), nb = b.node();
  if (a.shape() == b.shape()) {
    const auto& x = a.values().array();
    const auto& y = b.values().array();
    Vector<Scalar> out;
    switch (kind) {
      case BinaryKind::add: out = (x + y).matrix(); break;
      case BinaryKind::sub: out = (x - y).matrix(); break;
      case BinaryKind::mul: out = (x * y).matrix(); break;
      case BinaryKind::div: out = (x / y).matrix(); break;
    }
    return record<Scalar>(name, a.shape(), std::move(out), {na, nb},
                          [kind, na, nb](const Vector<Scalar>& g) {
                            const auto& x = na->data.array();
                            const auto& y = nb->data.array();
                            switch (kind) {
                              case BinaryKind::add:
                                if (na->requires_grad) na->grad_buffer() += g;
                                if (nb->requires_grad) nb->grad_buffer() += g;
                                break;
                              case BinaryKind::sub:
                                if (na->requires_grad) na->grad_buffer() += g;
                                if (nb->requires_grad) nb->grad_buffer() -= g;
                                break;
                              case BinaryKind::mul:
                                if (na->requires_grad)
                                  na->grad_buffer().array() += g.array() * y;
                                if (nb->requires_grad)
                                  nb->grad_buffer().array() += g.array() * x;
                                break;
                              case BinaryKind::div:
                                if (na->requires_grad)
                                  na->grad_buffer().array() += g.array() / y;
                                if (nb->requires_grad)
                                  nb->grad_buffer().array() -= g.array() * x / (y * y);
                                break;
                            }
                          });
  }

  auto index = std::make_shared<BroadcastIndex>(broadcast_index(a.shape(), b.shape()));
  const Index total = static_cast<Index>(index->a.size());
  Vector<Scalar> out(total);
  const auto& x = a.values();
  const auto& y = b.values();
  for (Index i = 0; i < total; ++i) out[i] = apply_binary(kind, x[index->a[i]], y[index->b[i]]);
  return record<Scalar>(name, index->out, std::move(out), {na, nb},
                        [kind, na, nb, index](const Vector<Scalar>& g) {
                          const auto& x = na->data;
                          const auto& y = nb->data;
                          const Index total = g.size();
                          if (na->requires_grad) {
                            auto& ga = na->grad_buffer();
                            for (Index i = 0; i < total; ++i) {
                              const Scalar xv = x[index->a[i]], yv = y[index->b[i]];
                              switch (kind) {
                                case BinaryKind::add:
                                case BinaryKind::sub: ga[index->a[i]] += g[i]; break;
                                case BinaryKind::mul: ga[index->a[i]] += g[i] * yv; break;
                                case BinaryKind::div: ga[index->a[i]] += g[i] / yv; break;
                              }
                              (void)xv;
                            }
                          }
                          if (nb->requires_grad) {
                            auto& gb = nb->grad_buffer();
                            for (Index i = 0; i < total; ++i) {
                              const Scalar xv = x[index->a[i]], yv = y[index->b[i]];
                              switch (kind) {
                                case BinaryKind::add: gb[index->b[i]] += g[i]; break;
                                case BinaryKind::sub: gb[index->b[i]] -= g[i]; break;
                                case BinaryKind::mul: gb[index->b[i]] += g[i] * xv; break;
                                case BinaryKind::div: gb[index->b[i]] -= g[i] * xv / (yv * yv); break;
                              }
                            }
                          }
                        });
}

// Unary op where the derivative is a function of the input only.
template <typename Scalar, typename Forward, typename Derivative>
Tensor<Scalar> unary(const char* name, const Tensor<Scalar>& x, Forward f, Derivative df) {
  NodePtr<Scalar> nx = x.node();
  Vector<Scalar> out = x.values().unaryExpr(f);
  return record<Scalar>(name, x.shape(), std::move(out), {nx},
                        [nx, df](const Vector<Scalar>& g) {
                          nx->grad_buffer().array() += g.array() * nx->data.unaryExpr(df).array();
                        });
}

template <typename Scalar>
using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

// Elementwise op whose derivative was computed alongside the forward value.
template <typename Scalar>
Tensor<Scalar> with_slope(const char* name, const Tensor<Scalar>& x, Vector<Scalar> out,
                          Vector<Scalar> slope) {
  NodePtr<Scalar> nx = x.node();
  auto saved = std::make_shared<Vector<Scalar>>(std::move(slope));
  return record<Scalar>(name, x.shape(), std::move(out), {nx}, [nx, saved](const Vector<Scalar>& g) {
    nx->grad_buffer().array() += g.array() * saved->array();
  });
}

template <typename Scalar>
Scalar stable_sigmoid(Scalar v) {
  if (v >= 0) return Scalar(1) / (Scalar(1) + std::exp(-v));
  const Scalar e = std::exp(v);
  return e / (Scalar(1) + e);
}

}  // namespace

Shape broadcast_shapes(const Shape& a, const Shape& b) {
  const std::size_t n = std::max(a.size(), b.size());
  Shape out(n, 1);
  for (std::size_t k = 0; k < n; ++k) {
    const Index da = k < a.size() ? a[a.size() - 1 - k] : 1;
    const Index db = k < b.size() ? b[b.size() - 1 - k] : 1;
    if (da != db && da != 1 && db != 1)
      throw DimensionError("cannot broadcast shapes " + shape_string(a) + " and " +
                           shape_string(b));
    out[n - 1 - k] = da == 1 ? db : da;
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return binary(BinaryKind::add, a, b);
}
template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return binary(BinaryKind::sub, a, b);
}
template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return binary(BinaryKind::mul, a, b);
}
template <typename Scalar>
Tensor<Scalar> div(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return binary(BinaryKind::div, a, b);
}

template <typename Scalar>
Tensor<Scalar> add_scalar(const Tensor<Scalar>& x, Scalar s) {
  NodePtr<Scalar> nx = x.node();
  Vector<Scalar> out = (x.values().array() + s).matrix();
  return record<Scalar>("add_scalar", x.shape(), std::move(out), {nx},
                        [nx](const Vector<Scalar>& g) { nx->grad_buffer() += g; });
}

template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& x, Scalar s) {
  NodePtr<Scalar> nx = x.node();
  Vector<Scalar> out = x.values() * s;
  return record<Scalar>("scale", x.shape(), std::move(out), {nx},
                        [nx, s](const Vector<Scalar>& g) { nx->grad_buffer() += g * s; });
}

template <typename Scalar>
Tensor<Scalar> neg(const Tensor<Scalar>& x) {
  return scale(x, Scalar(-1));
}

template <typename Scalar>
Tensor<Scalar> exp(const Tensor<Scalar>& x) {
  return unary<Scalar>(
      "exp", x, [](Scalar v) { return std::exp(v); }, [](Scalar v) { return std::exp(v); });
}

template <typename Scalar>
Tensor<Scalar> log(const Tensor<Scalar>& x) {
  if ((x.values().array() <= Scalar(0)).any())
    throw DomainError("log of a non-positive value");
  return unary<Scalar>(
      "log", x, [](Scalar v) { return std::log(v); }, [](Scalar v) { return Scalar(1) / v; });
}

template <typename Scalar>
Tensor<Scalar> sigmoid(const Tensor<Scalar>& x) {
  return unary<Scalar>(
      "sigmoid", x, [](Scalar v) { return stable_sigmoid(v); },
      [](Scalar v) {
        const Scalar s = stable_sigmoid(v);
        return s * (Scalar(1) - s);
      });
}

template <typename Scalar>
Tensor<Scalar> silu(const Tensor<Scalar>& x) {
  return unary<Scalar>(
      "silu", x, [](Scalar v) { return v * stable_sigmoid(v); },
      [](Scalar v) {
        const Scalar s = stable_sigmoid(v);
        return s * (Scalar(1) + v * (Scalar(1) - s));
      });
}

template <typename Scalar>
Tensor<Scalar> softplus(const Tensor<Scalar>& x) {
  const auto v = x.values().array();
  const Array<Scalar> e = (-v.abs()).exp();
  Vector<Scalar> out = (v.max(Scalar(0)) + e.log1p()).matrix();
  Vector<Scalar> slope = ((v >= Scalar(0)).select(Array<Scalar>::Ones(v.size()), e) / (Scalar(1) + e)).matrix();
  return with_slope<Scalar>("softplus", x, std::move(out), std::move(slope));
}

template <typename Scalar>
Tensor<Scalar> gelu(const Tensor<Scalar>& x) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  const auto v = x.values().array();
  const Array<Scalar> cdf =
      Scalar(0.5) * (Scalar(1) + (v * Scalar(kInvSqrt2)).unaryExpr([](Scalar z) { return std::erf(z); }));
  const Array<Scalar> pdf = Scalar(kInvSqrt2Pi) * (Scalar(-0.5) * v.square()).exp();
  Vector<Scalar> out = (v * cdf).matrix();
  Vector<Scalar> slope = (cdf + v * pdf).matrix();
  return with_slope<Scalar>("gelu", x, std::move(out), std::move(slope));
}

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& x) {
  return unary<Scalar>(
      "relu", x, [](Scalar v) { return v > 0 ? v : Scalar(0); },
      [](Scalar v) { return v > 0 ? Scalar(1) : Scalar(0); });
}

template <typename Scalar>
Tensor<Scalar> abs(const Tensor<Scalar>& x) {
  return unary<Scalar>(
      "abs", x, [](Scalar v) { return std::abs(v); },
      [](Scalar v) { return v > 0 ? Scalar(1) : (v < 0 ? Scalar(-1) : Scalar(0)); });
}

template <typename Scalar>
Tensor<Scalar> square(const Tensor<Scalar>& x) {
  return unary<Scalar>(
      "square", x, [](Scalar v) { return v * v; }, [](Scalar v) { return Scalar(2) * v; });
}

template <typename Scalar>
Tensor<Scalar> sqrt(const Tensor<Scalar>& x) {
  if ((x.values().array() < Scalar(0)).any()) throw DomainError("sqrt of a negative value");
  return unary<Scalar>(
      "sqrt", x, [](Scalar v) { return std::sqrt(v); },
      [](Scalar v) { return Scalar(0.5) / std::sqrt(v); });
}

template <typename Scalar>
Tensor<Scalar> clamp(const Tensor<Scalar>& x, Scalar lo, Scalar hi) {
  return unary<Scalar>(
      "clamp", x, [lo, hi](Scalar v) { return std::clamp(v, lo, hi); },
      [lo, hi](Scalar v) { return (v >= lo && v <= hi) ? Scalar(1) : Scalar(0); });
}

template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& x) {
  NodePtr<Scalar> nx = x.node();
  Vector<Scalar> out = Vector<Scalar>::Constant(1, x.values().sum());
  return record<Scalar>("sum", Shape{}, std::move(out), {nx}, [nx](const Vector<Scalar>& g) {
    nx->grad_buffer().array() += g[0];
  });
}

template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& x, int axis, bool keepdim) {
  const int a = normalize_axis(axis, x.ndim(), x.shape());
  const AxisSplit s = split_at(x.shape(), a);
  Shape shape = x.shape();
  if (keepdim) shape[a] = 1; else shape.erase(shape.begin() + a);
  Vector<Scalar> out = Vector<Scalar>::Zero(s.outer * s.inner);
  const auto& v = x.values();
  for (Index o = 0; o < s.outer; ++o)
    for (Index k = 0; k < s.extent; ++k)
      out.segment(o * s.inner, s.inner) += v.segment((o * s.extent + k) * s.inner, s.inner);
  NodePtr<Scalar> nx = x.node();
  return record<Scalar>("sum_axis", std::move(shape), std::move(out), {nx},
                        [nx, s](const Vector<Scalar>& g) {
                          auto& gx = nx->grad_buffer();
                          for (Index o = 0; o < s.outer; ++o)
                            for (Index k = 0; k < s.extent; ++k)
                              gx.segment((o * s.extent + k) * s.inner, s.inner) +=
                                  g.segment(o * s.inner, s.inner);
                        });
}

template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& x) {
  if (x.numel() == 0) throw DimensionError("mean of an empty tensor");
  return scale(sum(x), Scalar(1) / static_cast<Scalar>(x.numel()));
}

template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& x, int axis, bool keepdim) {
  const Index n = x.dim(axis);
  if (n == 0) throw DimensionError("mean over an empty axis");
  return scale(sum(x, axis, keepdim), Scalar(1) / static_cast<Scalar>(n));
}

template <typename Scalar>
Tensor<Scalar> max(const Tensor<Scalar>& x, int axis, bool keepdim) {
  const int a = normalize_axis(axis, x.ndim(), x.shape());
  const AxisSplit s = split_at(x.shape(), a);
  if (s.extent == 0) throw DimensionError("max over an empty axis");
  Shape shape = x.shape();
  if (keepdim) shape[a] = 1; else shape.erase(shape.begin() + a);
  Vector<Scalar> out(s.outer * s.inner);
  auto argmax = std::make_shared<std::vector<Index>>(s.outer * s.inner);
  const auto& v = x.values();
  for (Index o = 0; o < s.outer; ++o)
    for (Index i = 0; i < s.inner; ++i) {
      Index best = o * s.extent * s.inner + i;
      for (Index k = 1; k < s.extent; ++k) {
        const Index idx = (o * s.extent + k) * s.inner + i;
        if (v[idx] > v[best]) best = idx;
      }
      out[o * s.inner + i] = v[best];
      (*argmax)[o * s.inner + i] = best;
    }
  NodePtr<Scalar> nx = x.node();
  return record<Scalar>("max_axis", std::move(shape), std::move(out), {nx},
                        [nx, argmax](const Vector<Scalar>& g) {
                          auto& gx = nx->grad_buffer();
                          for (Index i = 0; i < g.size(); ++i) gx[(*argmax)[i]] += g[i];
                        });
}

template <typename Scalar>
Tensor<Scalar> reshape(const Tensor<Scalar>& x, const Shape& shape) {
  if (shape_numel(shape) != x.numel())
    throw DimensionError("cannot reshape " + shape_string(x.shape()) + " to " +
                         shape_string(shape));
  NodePtr<Scalar> nx = x.node();
  return record<Scalar>("reshape", shape, x.values(), {nx},
                        [nx](const Vector<Scalar>& g) { nx->grad_buffer() += g; });
}

template <typename Scalar>
Tensor<Scalar> permute(const Tensor<Scalar>& x, const std::vector<int>& dims) {
  const int n = x.ndim();
  if (static_cast<int>(dims.size()) != n)
    throw DimensionError("permute rank mismatch for shape " + shape_string(x.shape()));
  std::vector<bool> seen(n, false);
  for (int d : dims) {
    if (d < 0 || d >= n || seen[d])
      throw DimensionError("invalid axis permutation for shape " + shape_string(x.shape()));
    seen[d] = true;
  }
  const Shape& in = x.shape();
  std::vector<Index> in_strides(n, 1);
  for (int d = n - 2; d >= 0; --d) in_strides[d] = in_strides[d + 1] * in[d + 1];
  Shape out_shape(n);
  std::vector<Index> src_strides(n);
  for (int d = 0; d < n; ++d) {
    out_shape[d] = in[dims[d]];
    src_strides[d] = in_strides[dims[d]];
  }
  const Index total = x.numel();
  auto source = std::make_shared<std::vector<Index>>(total);
  std::vector<Index> counter(n, 0);
  Index src = 0;
  for (Index i = 0; i < total; ++i) {
    (*source)[i] = src;
    for (int d = n - 1; d >= 0; --d) {
      ++counter[d];
      src += src_strides[d];
      if (counter[d] < out_shape[d]) break;
      src -= src_strides[d] * counter[d];
      counter[d] = 0;
    }
  }
  Vector<Scalar> out(total);
  const auto& v = x.values();
  for (Index i = 0; i < total; ++i) out[i] = v[(*source)[i]];
  NodePtr<Scalar> nx = x.node();
  return record<Scalar>("permute", std::move(out_shape), std::move(out), {nx},
                        [nx, source](const Vector<Scalar>& g) {
                          auto& gx = nx->grad_buffer();
                          for (Index i = 0; i < g.size(); ++i) gx[(*source)[i]] += g[i];
                        });
}

template <typename Scalar>
Tensor<Scalar> transpose(const Tensor<Scalar>& x, int dim0, int dim1) {
  const int n = x.ndim();
  const int a = normalize_axis(dim0, n, x.shape());
  const int b = normalize_axis(dim1, n, x.shape());
  std::vector<int> dims(n);
  std::iota(dims.begin(), dims.end(), 0);
  std::swap(dims[a], dims[b]);
  return permute(x, dims);
}

template <typename Scalar>
Tensor<Scalar> concat(const std::vector<Tensor<Scalar>>& parts, int axis) {
  if (parts.empty()) throw DimensionError("concat of an empty list");
  const Shape& first = parts.front().shape();
  const int a = normalize_axis(axis, static_cast<int>(first.size()), first);
  Shape out_shape = first;
  out_shape[a] = 0;
  std::vector<Index> extents;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != first.size())
      throw DimensionError("concat rank mismatch: " + shape_string(first) + " vs " +
                           shape_string(s));
    for (std::size_t d = 0; d < s.size(); ++d)
      if (static_cast<int>(d) != a && s[d] != first[d])
        throw DimensionError("concat shape mismatch: " + shape_string(first) + " vs " +
                             shape_string(s));
    extents.push_back(s[a]);
    out_shape[a] += s[a];
  }
  const AxisSplit outer_split = split_at(out_shape, a);
  Vector<Scalar> out(shape_numel(out_shape));
  std::vector<NodePtr<Scalar>> inputs;
  Index offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto& v = parts[p].values();
    const Index chunk = extents[p] * outer_split.inner;
    for (Index o = 0; o < outer_split.outer; ++o)
      out.segment(o * outer_split.extent * outer_split.inner + offset, chunk) =
          v.segment(o * chunk, chunk);
    offset += chunk;
    inputs.push_back(parts[p].node());
  }
  return record<Scalar>("concat", out_shape, std::move(out), inputs,
                        [inputs, extents, outer_split](const Vector<Scalar>& g) {
                          Index offset = 0;
                          for (std::size_t p = 0; p < inputs.size(); ++p) {
                            const Index chunk = extents[p] * outer_split.inner;
                            if (inputs[p]->requires_grad) {
                              auto& gp = inputs[p]->grad_buffer();
                              for (Index o = 0; o < outer_split.outer; ++o)
                                gp.segment(o * chunk, chunk) += g.segment(
                                    o * outer_split.extent * outer_split.inner + offset, chunk);
                            }
                            offset += chunk;
                          }
                        });
}

template <typename Scalar>
std::vector<Tensor<Scalar>> split(const Tensor<Scalar>& x, const std::vector<Index>& sizes,
                                  int axis) {
  const int a = normalize_axis(axis, x.ndim(), x.shape());
  const AxisSplit s = split_at(x.shape(), a);
  Index total = 0;
  for (Index n : sizes) {
    if (n < 0) throw DimensionError("negative split size");
    total += n;
  }
  if (total != s.extent)
    throw DimensionError("split sizes sum to " + std::to_string(total) + " but axis has " +
                         std::to_string(s.extent) + " in shape " + shape_string(x.shape()));
  std::vector<Tensor<Scalar>> outputs;
  NodePtr<Scalar> nx = x.node();
  Index offset = 0;
  for (Index n : sizes) {
    Shape shape = x.shape();
    shape[a] = n;
    const Index chunk = n * s.inner;
    Vector<Scalar> out(s.outer * chunk);
    for (Index o = 0; o < s.outer; ++o)
      out.segment(o * chunk, chunk) = x.values().segment(o * s.extent * s.inner + offset, chunk);
    outputs.push_back(record<Scalar>("split", std::move(shape), std::move(out), {nx},
                                     [nx, s, offset, chunk](const Vector<Scalar>& g) {
                                       auto& gx = nx->grad_buffer();
                                       for (Index o = 0; o < s.outer; ++o)
                                         gx.segment(o * s.extent * s.inner + offset, chunk) +=
                                             g.segment(o * chunk, chunk);
                                     }));
    offset += chunk;
  }
  return outputs;
}

template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  auto mismatch = [&] {
    return DimensionError("matmul shape mismatch: " + shape_string(sa) + " x " + shape_string(sb));
  };
  if (sa.size() < 2 || sa.size() > 3 || sb.size() < 2 || sb.size() > 3) throw mismatch();
  if (sa.size() == 2 && sb.size() == 3) throw mismatch();
  const Index batch = sa.size() == 3 ? sa[0] : 1;
  if (sb.size() == 3 && sb[0] != batch) throw mismatch();
  const Index m = sa[sa.size() - 2], k = sa.back();
  const Index kb = sb[sb.size() - 2], n = sb.back();
  if (k != kb) throw mismatch();
  const bool shared_rhs = sb.size() == 2;
  Shape out_shape = sa.size() == 3 ? Shape{batch, m, n} : Shape{m, n};
  Vector<Scalar> out(batch * m * n);
  for (Index i = 0; i < batch; ++i) {
    CMapRM<Scalar> A(a.values().data() + i * m * k, m, k);
    CMapRM<Scalar> B(b.values().data() + (shared_rhs ? 0 : i * k * n), k, n);
    MapRM<Scalar>(out.data() + i * m * n, m, n).noalias() = A * B;
  }
  NodePtr<Scalar> na = a.node(), nb = b.node();
  return record<Scalar>(
      "matmul", std::move(out_shape), std::move(out), {na, nb},
      [na, nb, batch, m, k, n, shared_rhs](const Vector<Scalar>& g) {
        for (Index i = 0; i < batch; ++i) {
          CMapRM<Scalar> G(g.data() + i * m * n, m, n);
          CMapRM<Scalar> A(na->data.data() + i * m * k, m, k);
          const Index boff = shared_rhs ? 0 : i * k * n;
          CMapRM<Scalar> B(nb->data.data() + boff, k, n);
          if (na->requires_grad)
            MapRM<Scalar>(na->grad_buffer().data() + i * m * k, m, k).noalias() += G * B.transpose();
          if (nb->requires_grad)
            MapRM<Scalar>(nb->grad_buffer().data() + boff, k, n).noalias() += A.transpose() * G;
        }
      });
}

template <typename Scalar>
Tensor<Scalar> linear(const Tensor<Scalar>& x, const Tensor<Scalar>& weight,
                      const Tensor<Scalar>& bias) {
  const Shape& sx = x.shape();
  const Shape& sw = weight.shape();
  if (sx.empty() || sw.size() != 2 || sx.back() != sw[0])
    throw DimensionError("linear shape mismatch: input " + shape_string(sx) + ", weight " +
                         shape_string(sw));
  const bool has_bias = bias.defined();
  if (has_bias && (bias.ndim() != 1 || bias.dim(0) != sw[1]))
    throw DimensionError("linear bias " + shape_string(bias.shape()) + " for weight " +
                         shape_string(sw));
  const Index in = sw[0], outc = sw[1];
  const Index rows = x.numel() / in;
  Shape out_shape = sx;
  out_shape.back() = outc;
  Vector<Scalar> out(rows * outc);
  MapRM<Scalar> Y(out.data(), rows, outc);
  Y.noalias() = CMapRM<Scalar>(x.values().data(), rows, in) *
                CMapRM<Scalar>(weight.values().data(), in, outc);
  if (has_bias) Y.rowwise() += bias.values().transpose();
  NodePtr<Scalar> nx = x.node(), nw = weight.node();
  NodePtr<Scalar> nb = has_bias ? bias.node() : nullptr;
  std::vector<NodePtr<Scalar>> inputs{nx, nw};
  if (nb) inputs.push_back(nb);
  return record<Scalar>("linear", std::move(out_shape), std::move(out), inputs,
                        [nx, nw, nb, rows, in, outc](const Vector<Scalar>& g) {
                          CMapRM<Scalar> G(g.data(), rows, outc);
                          if (nx->requires_grad)
                            MapRM<Scalar>(nx->grad_buffer().data(), rows, in).noalias() +=
                                G * CMapRM<Scalar>(nw->data.data(), in, outc).transpose();
                          if (nw->requires_grad)
                            MapRM<Scalar>(nw->grad_buffer().data(), in, outc).noalias() +=
                                CMapRM<Scalar>(nx->data.data(), rows, in).transpose() * G;
                          if (nb && nb->requires_grad)
                            nb->grad_buffer() += G.colwise().sum().transpose();
                        });
}

namespace {

struct ConvGeometry {
  Index batch, in_channels, height, width;
  Index out_channels, kh, kw, stride, pad;
  Index out_h, out_w;
  Index patch() const { return in_channels * kh * kw; }
  Index out_pixels() const { return out_h * out_w; }
};

template <typename Scalar>
void im2col(const Scalar* image, const ConvGeometry& g, Scalar* cols) {
  const Index pixels = g.out_pixels();
  for (Index c = 0; c < g.in_channels; ++c)
    for (Index ky = 0; ky < g.kh; ++ky)
      for (Index kx = 0; kx < g.kw; ++kx) {
        Scalar* row = cols + ((c * g.kh + ky) * g.kw + kx) * pixels;
        const Scalar* plane = image + c * g.height * g.width;
        for (Index oy = 0; oy < g.out_h; ++oy) {
          const Index iy = oy * g.stride - g.pad + ky;
          Scalar* dst = row + oy * g.out_w;
          if (iy < 0 || iy >= g.height) {
            std::fill(dst, dst + g.out_w, Scalar(0));
            continue;
          }
          const Scalar* src = plane + iy * g.width;
          for (Index ox = 0; ox < g.out_w; ++ox) {
            const Index ix = ox * g.stride - g.pad + kx;
            dst[ox] = (ix >= 0 && ix < g.width) ? src[ix] : Scalar(0);
          }
        }
      }
}

template <typename Scalar>
void col2im(const Scalar* cols, const ConvGeometry& g, Scalar* image) {
  const Index pixels = g.out_pixels();
  for (Index c = 0; c < g.in_channels; ++c)
    for (Index ky = 0; ky < g.kh; ++ky)
      for (Index kx = 0; kx < g.kw; ++kx) {
        const Scalar* row = cols + ((c * g.kh + ky) * g.kw + kx) * pixels;
        Scalar* plane = image + c * g.height * g.width;
        for (Index oy = 0; oy < g.out_h; ++oy) {
          const Index iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.height) continue;
          Scalar* dst = plane + iy * g.width;
          for (Index ox = 0; ox < g.out_w; ++ox) {
            const Index ix = ox * g.stride - g.pad + kx;
            if (ix >= 0 && ix < g.width) dst[ix] += row[oy * g.out_w + ox];
          }
        }
      }
}

}  // namespace

template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& x, const Tensor<Scalar>& weight,
                      const Tensor<Scalar>& bias, Index stride, Index pad) {
  const Shape& sx = x.shape();
  const Shape& sw = weight.shape();
  if (sx.size() != 4 || sw.size() != 4 || sx[1] != sw[1])
    throw DimensionError("conv2d shape mismatch: input " + shape_string(sx) + ", weight " +
                         shape_string(sw));
  if (stride < 1 || pad < 0) throw DimensionError("conv2d needs stride >= 1 and pad >= 0");
  ConvGeometry geo{sx[0], sx[1], sx[2], sx[3], sw[0], sw[2], sw[3], stride, pad, 0, 0};
  if (sx[2] + 2 * pad < sw[2] || sx[3] + 2 * pad < sw[3])
    throw DimensionError("conv2d kernel " + shape_string(sw) + " larger than padded input " +
                         shape_string(sx));
  geo.out_h = (sx[2] + 2 * pad - sw[2]) / stride + 1;
  geo.out_w = (sx[3] + 2 * pad - sw[3]) / stride + 1;
  const bool has_bias = bias.defined();
  if (has_bias && (bias.ndim() != 1 || bias.dim(0) != sw[0]))
    throw DimensionError("conv2d bias " + shape_string(bias.shape()) + " for weight " +
                         shape_string(sw));

  const Index K = geo.patch(), P = geo.out_pixels();
  const Index in_stride = geo.in_channels * geo.height * geo.width;
  Vector<Scalar> out(geo.batch * geo.out_channels * P);
  RowMatrix<Scalar> cols(K, P);
  CMapRM<Scalar> W(weight.values().data(), geo.out_channels, K);
  for (Index b = 0; b < geo.batch; ++b) {
    im2col(x.values().data() + b * in_stride, geo, cols.data());
    MapRM<Scalar> Y(out.data() + b * geo.out_channels * P, geo.out_channels, P);
    Y.noalias() = W * cols;
    if (has_bias) Y.colwise() += bias.values();
  }

  NodePtr<Scalar> nx = x.node(), nw = weight.node();
  NodePtr<Scalar> nb = has_bias ? bias.node() : nullptr;
  std::vector<NodePtr<Scalar>> inputs{nx, nw};
  if (nb) inputs.push_back(nb);
  Shape out_shape{geo.batch, geo.out_channels, geo.out_h, geo.out_w};
  return record<Scalar>(
      "conv2d", std::move(out_shape), std::move(out), inputs,
      [nx, nw, nb, geo, K, P, in_stride](const Vector<Scalar>& g) {
        RowMatrix<Scalar> cols(K, P);
        RowMatrix<Scalar> dcols;
        CMapRM<Scalar> W(nw->data.data(), geo.out_channels, K);
        for (Index b = 0; b < geo.batch; ++b) {
          CMapRM<Scalar> G(g.data() + b * geo.out_channels * P, geo.out_channels, P);
          if (nw->requires_grad) {
            im2col(nx->data.data() + b * in_stride, geo, cols.data());
            MapRM<Scalar>(nw->grad_buffer().data(), geo.out_channels, K).noalias() +=
                G * cols.transpose();
          }
          if (nb && nb->requires_grad) nb->grad_buffer() += G.rowwise().sum();
          if (nx->requires_grad) {
            dcols.noalias() = W.transpose() * G;
            col2im(dcols.data(), geo, nx->grad_buffer().data() + b * in_stride);
          }
        }
      });
}

namespace {

// Builds an index-gather op: out[i] = x[source[i]], gradient scattered back.
template <typename Scalar>
Tensor<Scalar> gather_op(const char* name, const Tensor<Scalar>& x, Shape out_shape,
                         std::shared_ptr<std::vector<Index>> source) {
  const Index total = static_cast<Index>(source->size());
  Vector<Scalar> out(total);
  const auto& v = x.values();
  for (Index i = 0; i < total; ++i) out[i] = v[(*source)[i]];
  NodePtr<Scalar> nx = x.node();
  return record<Scalar>(name, std::move(out_shape), std::move(out), {nx},
                        [nx, source](const Vector<Scalar>& g) {
                          auto& gx = nx->grad_buffer();
                          for (Index i = 0; i < g.size(); ++i) gx[(*source)[i]] += g[i];
                        });
}

Index reflect_index(Index i, Index n) {
  if (i < 0) return -i;
  if (i >= n) return 2 * (n - 1) - i;
  return i;
}

}  // namespace

template <typename Scalar>
Tensor<Scalar> pad_reflect(const Tensor<Scalar>& x, Index pad) {
  const Shape& s = x.shape();
  if (s.size() != 4) throw DimensionError("pad_reflect expects [B,C,H,W], got " + shape_string(s));
  if (pad < 0 || pad >= s[2] || pad >= s[3])
    throw DimensionError("reflect pad " + std::to_string(pad) + " too large for " + shape_string(s));
  const Index planes = s[0] * s[1], h = s[2], w = s[3];
  const Index oh = h + 2 * pad, ow = w + 2 * pad;
  auto source = std::make_shared<std::vector<Index>>(planes * oh * ow);
  Index i = 0;
  for (Index p = 0; p < planes; ++p)
    for (Index y = 0; y < oh; ++y) {
      const Index sy = reflect_index(y - pad, h);
      for (Index xx = 0; xx < ow; ++xx)
        (*source)[i++] = (p * h + sy) * w + reflect_index(xx - pad, w);
    }
  return gather_op("pad_reflect", x, Shape{s[0], s[1], oh, ow}, source);
}

template <typename Scalar>
Tensor<Scalar> upsample_nearest2x(const Tensor<Scalar>& x) {
  const Shape& s = x.shape();
  if (s.size() != 4)
    throw DimensionError("upsample_nearest2x expects [B,C,H,W], got " + shape_string(s));
  const Index planes = s[0] * s[1], h = s[2], w = s[3];
  auto source = std::make_shared<std::vector<Index>>(planes * 4 * h * w);
  Index i = 0;
  for (Index p = 0; p < planes; ++p)
    for (Index y = 0; y < 2 * h; ++y)
      for (Index xx = 0; xx < 2 * w; ++xx) (*source)[i++] = (p * h + y / 2) * w + xx / 2;
  return gather_op("upsample_nearest2x", x, Shape{s[0], s[1], 2 * h, 2 * w}, source);
}

template <typename Scalar>
Tensor<Scalar> to_tokens(const Tensor<Scalar>& x) {
  if (x.ndim() != 4) throw DimensionError("to_tokens expects [B,C,H,W], got " + shape_string(x.shape()));
  const Shape& s = x.shape();
  return reshape(permute(x, {0, 2, 3, 1}), Shape{s[0], s[2] * s[3], s[1]});
}

template <typename Scalar>
Tensor<Scalar> from_tokens(const Tensor<Scalar>& x, Index height, Index width) {
  const Shape& s = x.shape();
  if (s.size() != 3 || s[1] != height * width)
    throw DimensionError("from_tokens: " + shape_string(s) + " is not [B," +
                         std::to_string(height * width) + ",C]");
  return permute(reshape(x, Shape{s[0], height, width, s[2]}), {0, 3, 1, 2});
}

void validate_permutation(const Permutation& perm, Index length) {
  if (static_cast<Index>(perm.size()) != length)
    throw PermutationError("permutation has length " + std::to_string(perm.size()) +
                           ", expected " + std::to_string(length));
  std::vector<char> seen(length, 0);
  for (Index p : perm) {
    if (p < 0 || p >= length)
      throw PermutationError("permutation index " + std::to_string(p) + " out of range [0," +
                             std::to_string(length) + ")");
    if (seen[p]) throw PermutationError("duplicate permutation index " + std::to_string(p));
    seen[p] = 1;
  }
}

Permutation invert_permutation(const Permutation& perm) {
  validate_permutation(perm, static_cast<Index>(perm.size()));
  Permutation inverse(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) inverse[perm[i]] = static_cast<Index>(i);
  return inverse;
}

template <typename Scalar>
Tensor<Scalar> gather_tokens(const Tensor<Scalar>& x, const std::vector<Permutation>& perms) {
  const Shape& s = x.shape();
  if (s.size() != 3) throw DimensionError("token op expects [B,L,C], got " + shape_string(s));
  const Index batch = s[0], length = s[1], channels = s[2];
  if (perms.size() != 1 && static_cast<Index>(perms.size()) != batch)
    throw DimensionError("got " + std::to_string(perms.size()) + " permutations for batch " +
                         std::to_string(batch));
  for (const auto& p : perms) validate_permutation(p, length);
  // Whole token rows move, so copy C contiguous values per token.
  auto source = std::make_shared<std::vector<Index>>(batch * length);
  for (Index b = 0; b < batch; ++b) {
    const Permutation& perm = perms.size() == 1 ? perms[0] : perms[b];
    for (Index t = 0; t < length; ++t) (*source)[b * length + t] = b * length + perm[t];
  }
  Vector<Scalar> out(x.numel());
  const Scalar* v = x.values().data();
  for (Index r = 0; r < batch * length; ++r)
    std::copy_n(v + (*source)[r] * channels, channels, out.data() + r * channels);
  NodePtr<Scalar> nx = x.node();
  return record<Scalar>("gather_tokens", s, std::move(out), {nx},
                        [nx, source, channels](const Vector<Scalar>& g) {
                          Scalar* gx = nx->grad_buffer().data();
                          const Index rows = static_cast<Index>(source->size());
                          for (Index r = 0; r < rows; ++r) {
                            Scalar* dst = gx + (*source)[r] * channels;
                            const Scalar* src = g.data() + r * channels;
                            for (Index c = 0; c < channels; ++c) dst[c] += src[c];
                          }
                        });
}

template <typename Scalar>
Tensor<Scalar> gather_tokens(const Tensor<Scalar>& x, const Permutation& perm) {
  return gather_tokens(x, std::vector<Permutation>{perm});
}

template <typename Scalar>
Tensor<Scalar> scatter_tokens(const Tensor<Scalar>& x, const std::vector<Permutation>& inverses) {
  return gather_tokens(x, inverses);
}

template <typename Scalar>
Tensor<Scalar> scatter_tokens(const Tensor<Scalar>& x, const Permutation& inverse) {
  return gather_tokens(x, std::vector<Permutation>{inverse});
}

template <typename Scalar>
Tensor<Scalar> layer_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& gamma,
                          const Tensor<Scalar>& beta) {
  if (x.ndim() < 1) throw DimensionError("layer_norm on a scalar");
  const Index channels = x.shape().back();
  if (gamma.numel() != channels || beta.numel() != channels)
    throw DimensionError("layer_norm channel mismatch: input " + shape_string(x.shape()) +
                         ", gamma " + shape_string(gamma.shape()) + ", beta " +
                         shape_string(beta.shape()));
  const Index rows = x.numel() / channels;
  auto normalized = std::make_shared<Vector<Scalar>>(rows * channels);
  auto rstd = std::make_shared<Vector<Scalar>>(rows);
  const Scalar* xv = x.values().data();
  const Scalar* gv = gamma.values().data();
  const Scalar* bv = beta.values().data();
  Scalar* nv = normalized->data();
  Vector<Scalar> out(rows * channels);
  for (Index r = 0; r < rows; ++r) {
    const Scalar* xr = xv + r * channels;
    Scalar mu = 0;
    for (Index c = 0; c < channels; ++c) mu += xr[c];
    mu /= Scalar(channels);
    Scalar var = 0;
    for (Index c = 0; c < channels; ++c) var += (xr[c] - mu) * (xr[c] - mu);
    var /= Scalar(channels);
    const Scalar inv = Scalar(1) / std::sqrt(var + Scalar(kLayerNormEpsilon));
    (*rstd)[r] = inv;
    for (Index c = 0; c < channels; ++c) {
      const Scalar n = (xr[c] - mu) * inv;
      nv[r * channels + c] = n;
      out[r * channels + c] = n * gv[c] + bv[c];
    }
  }
  NodePtr<Scalar> nx = x.node(), ng = gamma.node(), nbeta = beta.node();
  return record<Scalar>(
      "layer_norm", x.shape(), std::move(out), {nx, ng, nbeta},
      [nx, ng, nbeta, normalized, rstd, rows, channels](const Vector<Scalar>& g) {
        const Scalar* xhat = normalized->data();
        const Scalar* gam = ng->data.data();
        Scalar* ggam = ng->requires_grad ? ng->grad_buffer().data() : nullptr;
        Scalar* gbeta = nbeta->requires_grad ? nbeta->grad_buffer().data() : nullptr;
        Scalar* gx = nx->requires_grad ? nx->grad_buffer().data() : nullptr;
        std::vector<Scalar> dxhat(channels);
        for (Index r = 0; r < rows; ++r) {
          const Scalar* gr = g.data() + r * channels;
          const Scalar* hr = xhat + r * channels;
          Scalar m1 = 0, m2 = 0;
          for (Index c = 0; c < channels; ++c) {
            if (ggam) ggam[c] += gr[c] * hr[c];
            if (gbeta) gbeta[c] += gr[c];
            dxhat[c] = gr[c] * gam[c];
            m1 += dxhat[c];
            m2 += dxhat[c] * hr[c];
          }
          if (!gx) continue;
          m1 /= Scalar(channels);
          m2 /= Scalar(channels);
          const Scalar inv = (*rstd)[r];
          Scalar* gxr = gx + r * channels;
          for (Index c = 0; c < channels; ++c) gxr[c] += inv * (dxhat[c] - m1 - hr[c] * m2);
        }
      });
}

#define BSM_INSTANTIATE_OPS(S)                                                              \
  template Tensor<S> add(const Tensor<S>&, const Tensor<S>&);                               \
  template Tensor<S> sub(const Tensor<S>&, const Tensor<S>&);                               \
  template Tensor<S> mul(const Tensor<S>&, const Tensor<S>&);                               \
  template Tensor<S> div(const Tensor<S>&, const Tensor<S>&);                               \
  template Tensor<S> add_scalar(const Tensor<S>&, S);                                       \
  template Tensor<S> scale(const Tensor<S>&, S);                                            \
  template Tensor<S> neg(const Tensor<S>&);                                                 \
  template Tensor<S> exp(const Tensor<S>&);                                                 \
  template Tensor<S> log(const Tensor<S>&);                                                 \
  template Tensor<S> sigmoid(const Tensor<S>&);                                             \
  template Tensor<S> silu(const Tensor<S>&);                                                \
  template Tensor<S> softplus(const Tensor<S>&);                                            \
  template Tensor<S> gelu(const Tensor<S>&);                                                \
  template Tensor<S> relu(const Tensor<S>&);                                                \
  template Tensor<S> abs(const Tensor<S>&);                                                 \
  template Tensor<S> square(const Tensor<S>&);                                              \
  template Tensor<S> sqrt(const Tensor<S>&);                                                \
  template Tensor<S> clamp(const Tensor<S>&, S, S);                                         \
  template Tensor<S> sum(const Tensor<S>&);                                                 \
  template Tensor<S> sum(const Tensor<S>&, int, bool);                                      \
  template Tensor<S> mean(const Tensor<S>&);                                                \
  template Tensor<S> mean(const Tensor<S>&, int, bool);                                     \
  template Tensor<S> max(const Tensor<S>&, int, bool);                                      \
  template Tensor<S> reshape(const Tensor<S>&, const Shape&);                               \
  template Tensor<S> permute(const Tensor<S>&, const std::vector<int>&);                    \
  template Tensor<S> transpose(const Tensor<S>&, int, int);                                 \
  template Tensor<S> concat(const std::vector<Tensor<S>>&, int);                            \
  template std::vector<Tensor<S>> split(const Tensor<S>&, const std::vector<Index>&, int);  \
  template Tensor<S> matmul(const Tensor<S>&, const Tensor<S>&);                            \
  template Tensor<S> linear(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&);          \
  template Tensor<S> conv2d(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, Index,    \
                            Index);                                                         \
  template Tensor<S> pad_reflect(const Tensor<S>&, Index);                                  \
  template Tensor<S> upsample_nearest2x(const Tensor<S>&);                                  \
  template Tensor<S> to_tokens(const Tensor<S>&);                                           \
  template Tensor<S> from_tokens(const Tensor<S>&, Index, Index);                           \
  template Tensor<S> gather_tokens(const Tensor<S>&, const Permutation&);                   \
  template Tensor<S> gather_tokens(const Tensor<S>&, const std::vector<Permutation>&);      \
  template Tensor<S> scatter_tokens(const Tensor<S>&, const Permutation&);                  \
  template Tensor<S> scatter_tokens(const Tensor<S>&, const std::vector<Permutation>&);     \
  template Tensor<S> layer_norm(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&);

BSM_INSTANTIATE_FOR_SCALARS(BSM_INSTANTIATE_OPS)

}  // namespace bsm
