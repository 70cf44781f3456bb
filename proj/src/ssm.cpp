#include "bsm/ssm.hpp"

#include "record.hpp"

#include <cmath>

namespace bsm {

using detail::NodePtr;
using detail::record;

template <typename Scalar>
SsmParams<Scalar> SsmParams<Scalar>::init(Index channels, Index state_dim, Rng& rng) {
  if (channels < 1 || state_dim < 1) throw ConfigError("SSM needs channels >= 1 and state_dim >= 1");
  SsmParams p;
  Vector<Scalar> log_a(channels * state_dim);
  for (Index c = 0; c < channels; ++c)
    for (Index n = 0; n < state_dim; ++n) log_a[c * state_dim + n] = std::log(static_cast<Scalar>(n + 1));
  p.log_a = Tensor<Scalar>(Shape{channels, state_dim}, std::move(log_a), true);

  const Scalar bound = Scalar(1) / std::sqrt(static_cast<Scalar>(channels));
  p.w_delta = uniform<Scalar>({channels, channels}, -bound, bound, rng, true);
  // Inverse softplus of step sizes drawn log-uniformly in [1e-3, 1e-1].
  std::uniform_real_distribution<double> u(std::log(1e-3), std::log(1e-1));
  Vector<Scalar> b_delta(channels);
  for (Index c = 0; c < channels; ++c) {
    const double dt = std::exp(u(rng));
    b_delta[c] = static_cast<Scalar>(dt + std::log(-std::expm1(-dt)));
  }
  p.b_delta = Tensor<Scalar>(Shape{channels}, std::move(b_delta), true);
  p.w_b = uniform<Scalar>({channels, state_dim}, -bound, bound, rng, true);
  p.w_c = uniform<Scalar>({channels, state_dim}, -bound, bound, rng, true);
  p.d = Tensor<Scalar>::full({channels}, Scalar(1), true);
  return p;
}


namespace {

// out[c, n] = exp(delta[c] * a[c, n]) for one time step.
template <typename Scalar>
void step_decay(const Scalar* delta, const Scalar* a, Index channels, Index states, Scalar* out) {
  for (Index ch = 0; ch < channels; ++ch)
    for (Index n = 0; n < states; ++n) out[ch * states + n] = delta[ch] * a[ch * states + n];
  Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>> m(out, channels * states);
  m = m.exp();
}

}  // namespace

template <typename Scalar>
Tensor<Scalar> selective_scan_kernel(const Tensor<Scalar>& x, const Tensor<Scalar>& delta,
                                     const Tensor<Scalar>& a, const Tensor<Scalar>& b,
                                     const Tensor<Scalar>& c, const Tensor<Scalar>& skip) {
  if (x.ndim() != 3) throw DimensionError("selective_scan expects [B,L,C], got " + shape_string(x.shape()));
  const Index nb = x.dim(0), len = x.dim(1), nc = x.dim(2);
  if (len == 0) throw InputError("selective_scan on an empty sequence (L = 0)");
  if (a.ndim() != 2 || a.dim(0) != nc)
    throw DimensionError("selective_scan: A " + shape_string(a.shape()) + " for input " +
                         shape_string(x.shape()));
  const Index ns = a.dim(1);
  if (delta.shape() != x.shape())
    throw DimensionError("selective_scan: delta " + shape_string(delta.shape()) + " vs input " +
                         shape_string(x.shape()));
  const Shape bc_shape{nb, len, ns};
  if (b.shape() != bc_shape || c.shape() != bc_shape)
    throw DimensionError("selective_scan: B " + shape_string(b.shape()) + ", C " +
                         shape_string(c.shape()) + ", expected " + shape_string(bc_shape));
  if (skip.shape() != Shape{nc})
    throw DimensionError("selective_scan: D " + shape_string(skip.shape()) + " for " + std::to_string(nc) +
                         " channels");

  // States are kept as [B, L, C, N] for the backward pass; the decays
  // exp(delta A) are recomputed there one step at a time.
  const Index block = nc * ns;
  const Index rows = nb * len;
  const Scalar* xv = x.values().data();
  const Scalar* dv = delta.values().data();
  const Scalar* av = a.values().data();
  const Scalar* bv = b.values().data();
  const Scalar* cv = c.values().data();
  const Scalar* sv = skip.values().data();
  auto states = std::make_shared<Vector<Scalar>>(rows * block);
  Scalar* hs = states->data();
  Vector<Scalar> decay(block);
  const Vector<Scalar> zero = Vector<Scalar>::Zero(block);
  Vector<Scalar> out(rows * nc);
  for (Index bi = 0; bi < nb; ++bi)
    for (Index t = 0; t < len; ++t) {
      const Index r = bi * len + t;
      step_decay(dv + r * nc, av, nc, ns, decay.data());
      const Scalar* __restrict prev = t > 0 ? hs + (r - 1) * block : zero.data();
      Scalar* __restrict h = hs + r * block;
      const Scalar* __restrict ad = decay.data();
      const Scalar* __restrict br = bv + r * ns;
      const Scalar* __restrict cr = cv + r * ns;
      for (Index ch = 0; ch < nc; ++ch) {
        const Scalar xt = xv[r * nc + ch];
        const Scalar dx = dv[r * nc + ch] * xt;
        Scalar y = sv[ch] * xt;
        for (Index n = 0; n < ns; ++n) {
          const Index k = ch * ns + n;
          h[k] = dx * br[n] + ad[k] * prev[k];
          y += cr[n] * h[k];
        }
        out[r * nc + ch] = y;
      }
    }

  NodePtr<Scalar> nx = x.node(), nd = delta.node(), na = a.node(), nbm = b.node(), ncm = c.node(),
                  nskip = skip.node();
  return record<Scalar>(
      "selective_scan", x.shape(), std::move(out), {nx, nd, na, nbm, ncm, nskip},
      [=](const Vector<Scalar>& grad) {
        const Scalar* gy = grad.data();
        const Scalar* xv = nx->data.data();
        const Scalar* dv = nd->data.data();
        const Scalar* av = na->data.data();
        const Scalar* bv = nbm->data.data();
        const Scalar* cv = ncm->data.data();
        const Scalar* sv = nskip->data.data();
        const Scalar* hs = states->data();

        Vector<Scalar> gx(rows * nc), gdelta(rows * nc), gb(rows * ns), gc(rows * ns);
        Vector<Scalar> ga = Vector<Scalar>::Zero(block), gskip = Vector<Scalar>::Zero(nc);
        // carry = exp(delta_{t+1} A) * dL/dh_{t+1}
        Vector<Scalar> carry(block), decay(block);
        const Vector<Scalar> zero = Vector<Scalar>::Zero(block);
        for (Index bi = 0; bi < nb; ++bi) {
          carry.setZero();
          for (Index t = len; t-- > 0;) {
            const Index r = bi * len + t;
            step_decay(dv + r * nc, av, nc, ns, decay.data());
            const Scalar* __restrict h = hs + r * block;
            const Scalar* __restrict prev = t > 0 ? hs + (r - 1) * block : zero.data();
            const Scalar* __restrict ad = decay.data();
            const Scalar* __restrict br = bv + r * ns;
            const Scalar* __restrict cr = cv + r * ns;
            const Scalar* __restrict gr = gy + r * nc;
            Scalar* __restrict car = carry.data();
            Scalar* __restrict gav = ga.data();
            Scalar* __restrict gbr = gb.data() + r * ns;
            Scalar* __restrict gcr = gc.data() + r * ns;
            for (Index n = 0; n < ns; ++n) gbr[n] = gcr[n] = Scalar(0);
            for (Index ch = 0; ch < nc; ++ch) {
              const Index o = r * nc + ch;
              const Scalar dt = dv[o], xt = xv[o], g = gr[ch], dx = dt * xt;
              Scalar gh_b = 0, z_a = 0;
              for (Index n = 0; n < ns; ++n) {
                const Index k = ch * ns + n;
                const Scalar v = g * cr[n] + car[k];
                gh_b += v * br[n];
                gcr[n] += g * h[k];
                gbr[n] += v * dx;
                const Scalar z = v * prev[k] * ad[k];
                z_a += z * av[k];
                gav[k] += z * dt;
                car[k] = v * ad[k];
              }
              gdelta[o] = z_a + gh_b * xt;
              gx[o] = g * sv[ch] + dt * gh_b;
              gskip[ch] += g * xt;
            }
          }
        }
        if (nx->requires_grad) nx->grad_buffer() += gx;
        if (nd->requires_grad) nd->grad_buffer() += gdelta;
        if (na->requires_grad) na->grad_buffer() += ga;
        if (nbm->requires_grad) nbm->grad_buffer() += gb;
        if (ncm->requires_grad) ncm->grad_buffer() += gc;
        if (nskip->requires_grad) nskip->grad_buffer() += gskip;
      });
}

template <typename Scalar>
Tensor<Scalar> selective_scan(const Tensor<Scalar>& x, const SsmParams<Scalar>& params,
                              ScanCounter* counter) {
  if (x.ndim() != 3) throw DimensionError("selective_scan expects [B,L,C], got " + shape_string(x.shape()));
  if (x.dim(1) == 0) throw InputError("selective_scan on an empty sequence (L = 0)");
  if (x.dim(2) != params.channels())
    throw DimensionError("selective_scan: input " + shape_string(x.shape()) + " for " +
                         std::to_string(params.channels()) + "-channel parameters");
  const Tensor<Scalar> a = neg(exp(params.log_a));
  const Tensor<Scalar> delta = softplus(linear(x, params.w_delta, params.b_delta));
  const Tensor<Scalar> b = linear(x, params.w_b);
  const Tensor<Scalar> c = linear(x, params.w_c);
  if (counter) ++counter->scans;
  return selective_scan_kernel(x, delta, a, b, c, params.d);
}

template <typename Scalar>
Tensor<Scalar> selective_scan_oracle(const Tensor<Scalar>& x, const SsmParams<Scalar>& params) {
  if (x.ndim() != 3) throw DimensionError("selective_scan expects [B,L,C], got " + shape_string(x.shape()));
  const Index nb = x.dim(0), len = x.dim(1), nc = x.dim(2), ns = params.state_dim();
  if (len == 0) throw InputError("selective_scan on an empty sequence (L = 0)");
  if (nc != params.channels())
    throw DimensionError("selective_scan: input " + shape_string(x.shape()) + " for " +
                         std::to_string(nc) + "-channel parameters");
  const auto& xv = x.values();
  const auto& log_a = params.log_a.values();
  const auto& wd = params.w_delta.values();
  const auto& bd = params.b_delta.values();
  const auto& wb = params.w_b.values();
  const auto& wc = params.w_c.values();
  const auto& dv = params.d.values();
  Vector<Scalar> out = Vector<Scalar>::Zero(nb * len * nc);
  std::vector<Scalar> h(nc * ns), bt(ns), ct(ns), dt(nc);
  for (Index bi = 0; bi < nb; ++bi) {
    std::fill(h.begin(), h.end(), Scalar(0));
    for (Index t = 0; t < len; ++t) {
      const Scalar* xt = xv.data() + (bi * len + t) * nc;
      for (Index j = 0; j < nc; ++j) {
        Scalar z = bd[j];
        for (Index i = 0; i < nc; ++i) z += xt[i] * wd[i * nc + j];
        dt[j] = z > Scalar(20) ? z : std::log1p(std::exp(z));
      }
      for (Index n = 0; n < ns; ++n) {
        Scalar sb = 0, sc = 0;
        for (Index i = 0; i < nc; ++i) {
          sb += xt[i] * wb[i * ns + n];
          sc += xt[i] * wc[i * ns + n];
        }
        bt[n] = sb;
        ct[n] = sc;
      }
      for (Index ch = 0; ch < nc; ++ch) {
        Scalar y = dv[ch] * xt[ch];
        for (Index n = 0; n < ns; ++n) {
          const Scalar a = -std::exp(log_a[ch * ns + n]);
          Scalar& state = h[ch * ns + n];
          state = std::exp(dt[ch] * a) * state + dt[ch] * bt[n] * xt[ch];
          y += ct[n] * state;
        }
        out[(bi * len + t) * nc + ch] = y;
      }
    }
  }
  return Tensor<Scalar>(x.shape(), std::move(out));
}

std::array<Permutation, 4> ss2d_orders(Index height, Index width) {
  const Index n = height * width;
  std::array<Permutation, 4> orders;
  for (auto& o : orders) o.resize(n);
  for (Index i = 0; i < n; ++i) {
    orders[0][i] = i;
    orders[1][i] = n - 1 - i;
    orders[2][i] = (i % height) * width + i / height;
  }
  for (Index i = 0; i < n; ++i) orders[3][i] = orders[2][n - 1 - i];
  return orders;
}

template <typename Scalar>
Tensor<Scalar> ss2d_tokens(const Tensor<Scalar>& tokens, Index height, Index width,
                           const std::array<SsmParams<Scalar>, 4>& params, ScanCounter* counter) {
  if (tokens.ndim() != 3 || tokens.dim(1) != height * width)
    throw DimensionError("ss2d: tokens " + shape_string(tokens.shape()) + " for a " +
                         std::to_string(height) + "x" + std::to_string(width) + " grid");
  const auto orders = ss2d_orders(height, width);
  Tensor<Scalar> total;
  for (std::size_t k = 0; k < 4; ++k) {
    const Tensor<Scalar> sorted = k == 0 ? tokens : gather_tokens(tokens, orders[k]);
    Tensor<Scalar> y = selective_scan(sorted, params[k], counter);
    if (k != 0) y = scatter_tokens(y, invert_permutation(orders[k]));
    total = total.defined() ? add(total, y) : y;
  }
  return total;
}

template <typename Scalar>
Tensor<Scalar> ss2d_vanilla(const Tensor<Scalar>& x, const std::array<SsmParams<Scalar>, 4>& params,
                            ScanCounter* counter) {
  if (x.ndim() != 4) throw DimensionError("ss2d expects [B,C,H,W], got " + shape_string(x.shape()));
  const Index h = x.dim(2), w = x.dim(3);
  return from_tokens(ss2d_tokens(to_tokens(x), h, w, params, counter), h, w);
}

#define BSM_INSTANTIATE_SSM(S)                                                                   \
  template struct SsmParams<S>;                                                                  \
  template Tensor<S> selective_scan_kernel(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, \
                                           const Tensor<S>&, const Tensor<S>&, const Tensor<S>&); \
  template Tensor<S> selective_scan(const Tensor<S>&, const SsmParams<S>&, ScanCounter*);        \
  template Tensor<S> selective_scan_oracle(const Tensor<S>&, const SsmParams<S>&);               \
  template Tensor<S> ss2d_tokens(const Tensor<S>&, Index, Index,                                 \
                                 const std::array<SsmParams<S>, 4>&, ScanCounter*);              \
  template Tensor<S> ss2d_vanilla(const Tensor<S>&, const std::array<SsmParams<S>, 4>&, ScanCounter*);

BSM_INSTANTIATE_FOR_SCALARS(BSM_INSTANTIATE_SSM)

}  // namespace bsm
