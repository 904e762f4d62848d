// Differentiable tensor operations registered on a Graph.
//
// Shapes are validated at build time; every op installs a backward closure
// that accumulates into its parents' gradient buffers. Inner loops are laid
// out so the compiler can vectorize the contiguous dimension (axpy/dot
// patterns); this is what makes single-core training viable.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#include "mcam/graph.hpp"
#include "mcam/rng.hpp"
#include "mcam/tensor.hpp"

namespace mcam {

// ---------------------------------------------------------------------------
// Dense kernels.
// ---------------------------------------------------------------------------

inline double dot_acc4(const double* a, const double* b, int64_t n) {
    double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
    int64_t i = 0;
    for (; i + 4 <= n; i += 4) {
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    double s = (s0 + s1) + (s2 + s3);
    for (; i < n; ++i) s += a[i] * b[i];
    return s;
}

// C += A[MxK] * B[KxN]
inline void gemm_nn_acc(const double* A, const double* B, double* C, int64_t M, int64_t K, int64_t N) {
    for (int64_t i = 0; i < M; ++i) {
        const double* a = A + i * K;
        double* c = C + i * N;
        for (int64_t l = 0; l < K; ++l) {
            const double w = a[l];
            const double* b = B + l * N;
            for (int64_t j = 0; j < N; ++j) c[j] += w * b[j];
        }
    }
}

// C += A[MxK] * B^T, B is [NxK]
inline void gemm_nt_acc(const double* A, const double* B, double* C, int64_t M, int64_t K, int64_t N) {
    for (int64_t i = 0; i < M; ++i) {
        const double* a = A + i * K;
        double* c = C + i * N;
        for (int64_t j = 0; j < N; ++j) c[j] += dot_acc4(a, B + j * K, K);
    }
}

// C += A^T * B, A is [KxM], B is [KxN]
inline void gemm_tn_acc(const double* A, const double* B, double* C, int64_t M, int64_t K, int64_t N) {
    for (int64_t l = 0; l < K; ++l) {
        const double* a = A + l * M;
        const double* b = B + l * N;
        for (int64_t i = 0; i < M; ++i) {
            const double w = a[i];
            double* c = C + i * N;
            for (int64_t j = 0; j < N; ++j) c[j] += w * b[j];
        }
    }
}

// ---------------------------------------------------------------------------
// Broadcasting helper (equal rank; each extent equal or 1).
// ---------------------------------------------------------------------------

struct BcastPlan {
    Shape out;
    std::vector<int64_t> stride_a, stride_b;  // in out-index space
    int64_t numel = 0;

    BcastPlan(const Shape& a, const Shape& b, const char* op) {
        if (a.size() != b.size())
            throw ShapeError(std::string(op) + ": rank mismatch " + shape_str(a) + " vs " + shape_str(b));
        const size_t r = a.size();
        out.resize(r);
        for (size_t i = 0; i < r; ++i) {
            if (a[i] == b[i] || a[i] == 1 || b[i] == 1) {
                out[i] = std::max(a[i], b[i]);
            } else {
                throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " vs " +
                                 shape_str(b));
            }
        }
        numel = shape_numel(out);
        stride_a = strides_for(a);
        stride_b = strides_for(b);
    }

    bool trivial(const Shape& a, const Shape& b) const { return a == b; }

private:
    std::vector<int64_t> strides_for(const Shape& s) const {
        std::vector<int64_t> st(s.size());
        int64_t acc = 1;
        for (size_t i = s.size(); i-- > 0;) {
            st[i] = (s[i] == 1 && out[i] != 1) ? 0 : acc;
            acc *= s[i];
        }
        return st;
    }
};

// Walks the broadcast output space, yielding (ia, ib) flat indices.
template <class F>
inline void bcast_for_each(const BcastPlan& p, F&& f) {
    const size_t r = p.out.size();
    std::vector<int64_t> idx(r, 0);
    int64_t ia = 0, ib = 0;
    for (int64_t lin = 0; lin < p.numel; ++lin) {
        f(lin, ia, ib);
        for (size_t d = r; d-- > 0;) {
            ++idx[d];
            ia += p.stride_a[d];
            ib += p.stride_b[d];
            if (idx[d] < p.out[d]) break;
            idx[d] = 0;
            ia -= p.stride_a[d] * p.out[d];
            ib -= p.stride_b[d] * p.out[d];
        }
    }
}

// ---------------------------------------------------------------------------
// Elementwise binary ops (same-shape fast path + broadcasting).
// ---------------------------------------------------------------------------

namespace detail {

enum class Bin { Add, Sub, Mul, Div };

inline Var binary_op(Graph& g, Var a, Var b, Bin kind, const char* name) {
    const Tensor& ta = g.value(a);
    const Tensor& tb = g.value(b);

    auto apply = [kind](double x, double y) {
        switch (kind) {
            case Bin::Add: return x + y;
            case Bin::Sub: return x - y;
            case Bin::Mul: return x * y;
            case Bin::Div: return x / y;
        }
        return 0.0;
    };

    if (ta.same_shape(tb)) {
        Tensor out(ta.shape);
        const int64_t n = ta.numel();
        const double* pa = ta.data();
        const double* pb = tb.data();
        double* po = out.data();
        switch (kind) {
            case Bin::Add: for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i]; break;
            case Bin::Sub: for (int64_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i]; break;
            case Bin::Mul: for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i]; break;
            case Bin::Div: for (int64_t i = 0; i < n; ++i) po[i] = pa[i] / pb[i]; break;
        }
        return g.node(std::move(out), {a.id, b.id}, name, [a, b, kind](Graph& gg, int self) {
            const double* go = gg.grad_data(self);
            const int64_t n = gg.value(self).numel();
            const Tensor& va = gg.value(a);
            const Tensor& vb = gg.value(b);
            if (gg.requires_grad(a)) {
                double* ga = gg.grad_buf(a.id);
                switch (kind) {
                    case Bin::Add:
                    case Bin::Sub: for (int64_t i = 0; i < n; ++i) ga[i] += go[i]; break;
                    case Bin::Mul: for (int64_t i = 0; i < n; ++i) ga[i] += go[i] * vb[i]; break;
                    case Bin::Div: for (int64_t i = 0; i < n; ++i) ga[i] += go[i] / vb[i]; break;
                }
            }
            if (gg.requires_grad(b)) {
                double* gb = gg.grad_buf(b.id);
                switch (kind) {
                    case Bin::Add: for (int64_t i = 0; i < n; ++i) gb[i] += go[i]; break;
                    case Bin::Sub: for (int64_t i = 0; i < n; ++i) gb[i] -= go[i]; break;
                    case Bin::Mul: for (int64_t i = 0; i < n; ++i) gb[i] += go[i] * va[i]; break;
                    case Bin::Div:
                        for (int64_t i = 0; i < n; ++i)
                            gb[i] -= go[i] * va[i] / (vb[i] * vb[i]);
                        break;
                }
            }
        });
    }

    BcastPlan plan(ta.shape, tb.shape, name);
    Tensor out(plan.out);
    {
        const double* pa = ta.data();
        const double* pb = tb.data();
        double* po = out.data();
        bcast_for_each(plan, [&](int64_t lin, int64_t ia, int64_t ib) { po[lin] = apply(pa[ia], pb[ib]); });
    }
    return g.node(std::move(out), {a.id, b.id}, name, [a, b, kind, plan](Graph& gg, int self) {
        const double* go = gg.grad_data(self);
        const Tensor& va = gg.value(a);
        const Tensor& vb = gg.value(b);
        double* ga = gg.requires_grad(a) ? gg.grad_buf(a.id) : nullptr;
        double* gb = gg.requires_grad(b) ? gg.grad_buf(b.id) : nullptr;
        bcast_for_each(plan, [&](int64_t lin, int64_t ia, int64_t ib) {
            const double gv = go[lin];
            switch (kind) {
                case Bin::Add:
                    if (ga) ga[ia] += gv;
                    if (gb) gb[ib] += gv;
                    break;
                case Bin::Sub:
                    if (ga) ga[ia] += gv;
                    if (gb) gb[ib] -= gv;
                    break;
                case Bin::Mul:
                    if (ga) ga[ia] += gv * vb[ib];
                    if (gb) gb[ib] += gv * va[ia];
                    break;
                case Bin::Div:
                    if (ga) ga[ia] += gv / vb[ib];
                    if (gb) gb[ib] -= gv * va[ia] / (vb[ib] * vb[ib]);
                    break;
            }
        });
    });
}

}  // namespace detail

inline Var add(Graph& g, Var a, Var b) { return detail::binary_op(g, a, b, detail::Bin::Add, "add"); }
inline Var sub(Graph& g, Var a, Var b) { return detail::binary_op(g, a, b, detail::Bin::Sub, "sub"); }
inline Var mul(Graph& g, Var a, Var b) { return detail::binary_op(g, a, b, detail::Bin::Mul, "mul"); }
inline Var div_(Graph& g, Var a, Var b) { return detail::binary_op(g, a, b, detail::Bin::Div, "div"); }

inline Var add_scalar(Graph& g, Var a, double c) {
    Tensor out = g.value(a);
    for (auto& v : out.values) v += c;
    return g.node(std::move(out), {a.id}, "add_scalar", [a](Graph& gg, int self) {
        if (!gg.requires_grad(a)) return;
        const double* go = gg.grad_data(self);
        double* ga = gg.grad_buf(a.id);
        const int64_t n = gg.value(self).numel();
        for (int64_t i = 0; i < n; ++i) ga[i] += go[i];
    });
}

inline Var scale(Graph& g, Var a, double c) {
    Tensor out = g.value(a);
    for (auto& v : out.values) v *= c;
    return g.node(std::move(out), {a.id}, "scale", [a, c](Graph& gg, int self) {
        if (!gg.requires_grad(a)) return;
        const double* go = gg.grad_data(self);
        double* ga = gg.grad_buf(a.id);
        const int64_t n = gg.value(self).numel();
        for (int64_t i = 0; i < n; ++i) ga[i] += c * go[i];
    });
}

// ---------------------------------------------------------------------------
// Elementwise unary ops.
// ---------------------------------------------------------------------------

namespace detail {

template <class FwdF, class BwdF>
inline Var unary_op(Graph& g, Var a, const char* name, FwdF fwd, BwdF bwd_from_xy) {
    const Tensor& ta = g.value(a);
    Tensor out(ta.shape);
    const int64_t n = ta.numel();
    for (int64_t i = 0; i < n; ++i) out[i] = fwd(ta[i]);
    return g.node(std::move(out), {a.id}, name, [a, bwd_from_xy](Graph& gg, int self) {
        if (!gg.requires_grad(a)) return;
        const double* go = gg.grad_data(self);
        const Tensor& x = gg.value(a);
        const Tensor& y = gg.value(self);
        double* ga = gg.grad_buf(a.id);
        const int64_t n = x.numel();
        for (int64_t i = 0; i < n; ++i) ga[i] += go[i] * bwd_from_xy(x[i], y[i]);
    });
}

}  // namespace detail

inline Var relu(Graph& g, Var a) {
    return detail::unary_op(
        g, a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
        [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });  // subgradient 0 at the kink
}

inline Var abs_(Graph& g, Var a) {
    return detail::unary_op(
        g, a, "abs", [](double x) { return std::abs(x); },
        [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

inline Var elu(Graph& g, Var a) {
    return detail::unary_op(
        g, a, "elu", [](double x) { return x > 0.0 ? x : std::expm1(x); },
        [](double x, double y) { return x > 0.0 ? 1.0 : y + 1.0; });
}

inline Var sigmoid(Graph& g, Var a) {
    return detail::unary_op(
        g, a, "sigmoid",
        [](double x) {
            if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
            const double e = std::exp(x);
            return e / (1.0 + e);
        },
        [](double, double y) { return y * (1.0 - y); });
}

inline Var tanh_(Graph& g, Var a) {
    return detail::unary_op(
        g, a, "tanh", [](double x) { return std::tanh(x); },
        [](double, double y) { return 1.0 - y * y; });
}

// Derivative clamped near zero so degenerate inputs do not poison gradients.
inline Var sqrt_(Graph& g, Var a) {
    return detail::unary_op(
        g, a, "sqrt", [](double x) { return std::sqrt(x); },
        [](double, double y) { return 0.5 / std::max(y, 1e-12); });
}

// ---------------------------------------------------------------------------
// Matrix products.
// ---------------------------------------------------------------------------

inline Var matmul(Graph& g, Var a, Var b) {
    const Tensor& ta = g.value(a);
    const Tensor& tb = g.value(b);
    if (ta.rank() != 2 || tb.rank() != 2 || ta.shape[1] != tb.shape[0])
        throw ShapeError("matmul: incompatible shapes " + shape_str(ta.shape) + " vs " +
                         shape_str(tb.shape));
    const int64_t m = ta.shape[0], k = ta.shape[1], n = tb.shape[1];
    Tensor out({m, n});
    gemm_nn_acc(ta.data(), tb.data(), out.data(), m, k, n);
    return g.node(std::move(out), {a.id, b.id}, "matmul", [a, b, m, k, n](Graph& gg, int self) {
        const double* go = gg.grad_data(self);
        if (gg.requires_grad(a))
            gemm_nt_acc(go, gg.value(b).data(), gg.grad_buf(a.id), m, n, k);  // dA = G * B^T
        if (gg.requires_grad(b))
            gemm_tn_acc(gg.value(a).data(), go, gg.grad_buf(b.id), k, m, n);  // dB = A^T * G
    });
}

inline Var bmm(Graph& g, Var a, Var b) {
    const Tensor& ta = g.value(a);
    const Tensor& tb = g.value(b);
    if (ta.rank() != 3 || tb.rank() != 3 || ta.shape[0] != tb.shape[0] || ta.shape[2] != tb.shape[1])
        throw ShapeError("bmm: incompatible shapes " + shape_str(ta.shape) + " vs " +
                         shape_str(tb.shape));
    const int64_t batch = ta.shape[0], m = ta.shape[1], k = ta.shape[2], n = tb.shape[2];
    Tensor out({batch, m, n});
    for (int64_t i = 0; i < batch; ++i)
        gemm_nn_acc(ta.data() + i * m * k, tb.data() + i * k * n, out.data() + i * m * n, m, k, n);
    return g.node(std::move(out), {a.id, b.id}, "bmm", [a, b, batch, m, k, n](Graph& gg, int self) {
        const double* go = gg.grad_data(self);
        const Tensor& va = gg.value(a);
        const Tensor& vb = gg.value(b);
        if (gg.requires_grad(a)) {
            double* ga = gg.grad_buf(a.id);
            for (int64_t i = 0; i < batch; ++i)
                gemm_nt_acc(go + i * m * n, vb.data() + i * k * n, ga + i * m * k, m, n, k);
        }
        if (gg.requires_grad(b)) {
            double* gb = gg.grad_buf(b.id);
            for (int64_t i = 0; i < batch; ++i)
                gemm_tn_acc(va.data() + i * m * k, go + i * m * n, gb + i * k * n, k, m, n);
        }
    });
}

// out[i] = W * x[i] for every batch element; W is [m,k], x is [B,k,n].
inline Var matmul_left_bcast(Graph& g, Var w, Var x) {
    const Tensor& tw = g.value(w);
    const Tensor& tx = g.value(x);
    if (tw.rank() != 2 || tx.rank() != 3 || tw.shape[1] != tx.shape[1])
        throw ShapeError("matmul_left_bcast: incompatible shapes " + shape_str(tw.shape) + " vs " +
                         shape_str(tx.shape));
    const int64_t batch = tx.shape[0], m = tw.shape[0], k = tw.shape[1], n = tx.shape[2];
    Tensor out({batch, m, n});
    for (int64_t i = 0; i < batch; ++i)
        gemm_nn_acc(tw.data(), tx.data() + i * k * n, out.data() + i * m * n, m, k, n);
    return g.node(std::move(out), {w.id, x.id}, "matmul_left_bcast",
                  [w, x, batch, m, k, n](Graph& gg, int self) {
                      const double* go = gg.grad_data(self);
                      const Tensor& vw = gg.value(w);
                      const Tensor& vx = gg.value(x);
                      if (gg.requires_grad(w)) {
                          double* gw = gg.grad_buf(w.id);
                          for (int64_t i = 0; i < batch; ++i)
                              gemm_nt_acc(go + i * m * n, vx.data() + i * k * n, gw, m, n, k);
                      }
                      if (gg.requires_grad(x)) {
                          double* gx = gg.grad_buf(x.id);
                          for (int64_t i = 0; i < batch; ++i)
                              gemm_tn_acc(vw.data(), go + i * m * n, gx + i * k * n, k, m, n);
                      }
                  });
}

// ---------------------------------------------------------------------------
// Shape ops.
// ---------------------------------------------------------------------------

inline Var reshape(Graph& g, Var a, Shape new_shape) {
    const Tensor& ta = g.value(a);
    if (shape_numel(new_shape) != ta.numel())
        throw ShapeError("reshape: cannot view " + shape_str(ta.shape) + " as " + shape_str(new_shape));
    Tensor out(std::move(new_shape), ta.values);
    return g.node(std::move(out), {a.id}, "reshape", [a](Graph& gg, int self) {
        if (!gg.requires_grad(a)) return;
        const double* go = gg.grad_data(self);
        double* ga = gg.grad_buf(a.id);
        const int64_t n = gg.value(self).numel();
        for (int64_t i = 0; i < n; ++i) ga[i] += go[i];
    });
}

inline Var transpose_last2(Graph& g, Var a) {
    const Tensor& ta = g.value(a);
    if (ta.rank() < 2) throw ShapeError("transpose_last2: rank must be >= 2");
    Shape s = ta.shape;
    const int64_t m = s[s.size() - 2], n = s[s.size() - 1];
    std::swap(s[s.size() - 2], s[s.size() - 1]);
    const int64_t outer = ta.numel() / (m * n);
    Tensor out(std::move(s));
    for (int64_t o = 0; o < outer; ++o) {
        const double* src = ta.data() + o * m * n;
        double* dst = out.data() + o * m * n;
        for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < n; ++j) dst[j * m + i] = src[i * n + j];
    }
    return g.node(std::move(out), {a.id}, "transpose_last2", [a, m, n, outer](Graph& gg, int self) {
        if (!gg.requires_grad(a)) return;
        const double* go = gg.grad_data(self);
        double* ga = gg.grad_buf(a.id);
        for (int64_t o = 0; o < outer; ++o) {
            const double* src = go + o * m * n;
            double* dst = ga + o * m * n;
            for (int64_t j = 0; j < n; ++j)
                for (int64_t i = 0; i < m; ++i) dst[i * n + j] += src[j * m + i];
        }
    });
}

// Rows [r0, r1) along dim 0.
inline Var slice_rows(Graph& g, Var a, int64_t r0, int64_t r1) {
    const Tensor& ta = g.value(a);
    if (ta.rank() < 1 || r0 < 0 || r1 > ta.shape[0] || r0 >= r1)
        throw ShapeError("slice_rows: invalid range [" + std::to_string(r0) + ", " + std::to_string(r1) +
                         ") for shape " + shape_str(ta.shape));
    Shape s = ta.shape;
    s[0] = r1 - r0;
    const int64_t row = ta.numel() / ta.shape[0];
    Tensor out(std::move(s));
    std::memcpy(out.data(), ta.data() + r0 * row, static_cast<size_t>((r1 - r0) * row) * sizeof(double));
    return g.node(std::move(out), {a.id}, "slice_rows", [a, r0, row](Graph& gg, int self) {
        if (!gg.requires_grad(a)) return;
        const double* go = gg.grad_data(self);
        double* ga = gg.grad_buf(a.id);
        const int64_t n = gg.value(self).numel();
        for (int64_t i = 0; i < n; ++i) ga[r0 * row + i] += go[i];
    });
}

// Concatenate along dim 1 of [B,C,H,W] tensors.
inline Var concat_channels(Graph& g, Var a, Var b) {
    const Tensor& ta = g.value(a);
    const Tensor& tb = g.value(b);
    if (ta.rank() != 4 || tb.rank() != 4 || ta.shape[0] != tb.shape[0] || ta.shape[2] != tb.shape[2] ||
        ta.shape[3] != tb.shape[3])
        throw ShapeError("concat_channels: incompatible shapes " + shape_str(ta.shape) + " vs " +
                         shape_str(tb.shape));
    const int64_t B = ta.shape[0], Ca = ta.shape[1], Cb = tb.shape[1], HW = ta.shape[2] * ta.shape[3];
    Tensor out({B, Ca + Cb, ta.shape[2], ta.shape[3]});
    for (int64_t i = 0; i < B; ++i) {
        std::memcpy(out.data() + i * (Ca + Cb) * HW, ta.data() + i * Ca * HW,
                    static_cast<size_t>(Ca * HW) * sizeof(double));
        std::memcpy(out.data() + (i * (Ca + Cb) + Ca) * HW, tb.data() + i * Cb * HW,
                    static_cast<size_t>(Cb * HW) * sizeof(double));
    }
    return g.node(std::move(out), {a.id, b.id}, "concat_channels",
                  [a, b, B, Ca, Cb, HW](Graph& gg, int self) {
                      const double* go = gg.grad_data(self);
                      if (gg.requires_grad(a)) {
                          double* ga = gg.grad_buf(a.id);
                          for (int64_t i = 0; i < B; ++i)
                              for (int64_t j = 0; j < Ca * HW; ++j)
                                  ga[i * Ca * HW + j] += go[i * (Ca + Cb) * HW + j];
                      }
                      if (gg.requires_grad(b)) {
                          double* gb = gg.grad_buf(b.id);
                          for (int64_t i = 0; i < B; ++i)
                              for (int64_t j = 0; j < Cb * HW; ++j)
                                  gb[i * Cb * HW + j] += go[(i * (Ca + Cb) + Ca) * HW + j];
                      }
                  });
}

// ---------------------------------------------------------------------------
// Reductions.
// ---------------------------------------------------------------------------

inline Var sum_all(Graph& g, Var a) {
    const Tensor& ta = g.value(a);
    double s = 0.0;
    for (double v : ta.values) s += v;
    return g.node(Tensor::scalar(s), {a.id}, "sum_all", [a](Graph& gg, int self) {
        if (!gg.requires_grad(a)) return;
        const double gv = gg.grad_data(self)[0];
        double* ga = gg.grad_buf(a.id);
        const int64_t n = gg.value(a).numel();
        for (int64_t i = 0; i < n; ++i) ga[i] += gv;
    });
}

inline Var mean_all(Graph& g, Var a) {
    const Tensor& ta = g.value(a);
    const int64_t n = ta.numel();
    double s = 0.0;
    for (double v : ta.values) s += v;
    return g.node(Tensor::scalar(s / static_cast<double>(n)), {a.id}, "mean_all",
                  [a, n](Graph& gg, int self) {
                      if (!gg.requires_grad(a)) return;
                      const double gv = gg.grad_data(self)[0] / static_cast<double>(n);
                      double* ga = gg.grad_buf(a.id);
                      for (int64_t i = 0; i < n; ++i) ga[i] += gv;
                  });
}

// Sum over the last dimension: [..., n] -> [...].
inline Var sum_lastdim(Graph& g, Var a) {
    const Tensor& ta = g.value(a);
    if (ta.rank() < 2) throw ShapeError("sum_lastdim: rank must be >= 2");
    const int64_t n = ta.shape.back();
    const int64_t outer = ta.numel() / n;
    Shape s(ta.shape.begin(), ta.shape.end() - 1);
    Tensor out(std::move(s));
    for (int64_t o = 0; o < outer; ++o) {
        double acc = 0.0;
        const double* src = ta.data() + o * n;
        for (int64_t i = 0; i < n; ++i) acc += src[i];
        out[o] = acc;
    }
    return g.node(std::move(out), {a.id}, "sum_lastdim", [a, n, outer](Graph& gg, int self) {
        if (!gg.requires_grad(a)) return;
        const double* go = gg.grad_data(self);
        double* ga = gg.grad_buf(a.id);
        for (int64_t o = 0; o < outer; ++o) {
            const double gv = go[o];
            double* dst = ga + o * n;
            for (int64_t i = 0; i < n; ++i) dst[i] += gv;
        }
    });
}

// Spatial mean [B,C,H,W] -> [B,C].
inline Var mean_hw(Graph& g, Var a) {
    const Tensor& ta = g.value(a);
    if (ta.rank() != 4) throw ShapeError("mean_hw: expected rank-4 input, got " + shape_str(ta.shape));
    const int64_t B = ta.shape[0], C = ta.shape[1], HW = ta.shape[2] * ta.shape[3];
    Tensor out({B, C});
    for (int64_t i = 0; i < B * C; ++i) {
        double acc = 0.0;
        const double* src = ta.data() + i * HW;
        for (int64_t j = 0; j < HW; ++j) acc += src[j];
        out[i] = acc / static_cast<double>(HW);
    }
    return g.node(std::move(out), {a.id}, "mean_hw", [a, B, C, HW](Graph& gg, int self) {
        if (!gg.requires_grad(a)) return;
        const double* go = gg.grad_data(self);
        double* ga = gg.grad_buf(a.id);
        for (int64_t i = 0; i < B * C; ++i) {
            const double gv = go[i] / static_cast<double>(HW);
            double* dst = ga + i * HW;
            for (int64_t j = 0; j < HW; ++j) dst[j] += gv;
        }
    });
}

// Spatial max [B,C,H,W] -> [B,C]; gradient routed to the first argmax.
inline Var max_hw(Graph& g, Var a) {
    const Tensor& ta = g.value(a);
    if (ta.rank() != 4) throw ShapeError("max_hw: expected rank-4 input, got " + shape_str(ta.shape));
    const int64_t B = ta.shape[0], C = ta.shape[1], HW = ta.shape[2] * ta.shape[3];
    Tensor out({B, C});
    std::vector<int64_t> arg(static_cast<size_t>(B * C));
    for (int64_t i = 0; i < B * C; ++i) {
        const double* src = ta.data() + i * HW;
        int64_t best = 0;
        for (int64_t j = 1; j < HW; ++j)
            if (src[j] > src[best]) best = j;
        out[i] = src[best];
        arg[static_cast<size_t>(i)] = best;
    }
    return g.node(std::move(out), {a.id}, "max_hw", [a, B, C, HW, arg](Graph& gg, int self) {
        if (!gg.requires_grad(a)) return;
        const double* go = gg.grad_data(self);
        double* ga = gg.grad_buf(a.id);
        for (int64_t i = 0; i < B * C; ++i) ga[i * HW + arg[static_cast<size_t>(i)]] += go[i];
    });
}

// Channel mean [B,C,H,W] -> [B,1,H,W].
inline Var mean_channels(Graph& g, Var a) {
    const Tensor& ta = g.value(a);
    if (ta.rank() != 4) throw ShapeError("mean_channels: expected rank-4 input");
    const int64_t B = ta.shape[0], C = ta.shape[1], HW = ta.shape[2] * ta.shape[3];
    Tensor out({B, 1, ta.shape[2], ta.shape[3]});
    for (int64_t b = 0; b < B; ++b) {
        double* dst = out.data() + b * HW;
        const double* src = ta.data() + b * C * HW;
        for (int64_t j = 0; j < HW; ++j) dst[j] = 0.0;
        for (int64_t c = 0; c < C; ++c)
            for (int64_t j = 0; j < HW; ++j) dst[j] += src[c * HW + j];
        for (int64_t j = 0; j < HW; ++j) dst[j] /= static_cast<double>(C);
    }
    return g.node(std::move(out), {a.id}, "mean_channels", [a, B, C, HW](Graph& gg, int self) {
        if (!gg.requires_grad(a)) return;
        const double* go = gg.grad_data(self);
        double* ga = gg.grad_buf(a.id);
        for (int64_t b = 0; b < B; ++b)
            for (int64_t c = 0; c < C; ++c)
                for (int64_t j = 0; j < HW; ++j)
                    ga[(b * C + c) * HW + j] += go[b * HW + j] / static_cast<double>(C);
    });
}

// Channel max [B,C,H,W] -> [B,1,H,W]; gradient routed to the first argmax.
inline Var max_channels(Graph& g, Var a) {
    const Tensor& ta = g.value(a);
    if (ta.rank() != 4) throw ShapeError("max_channels: expected rank-4 input");
    const int64_t B = ta.shape[0], C = ta.shape[1], HW = ta.shape[2] * ta.shape[3];
    Tensor out({B, 1, ta.shape[2], ta.shape[3]});
    std::vector<int64_t> arg(static_cast<size_t>(B * HW));
    for (int64_t b = 0; b < B; ++b) {
        const double* src = ta.data() + b * C * HW;
        for (int64_t j = 0; j < HW; ++j) {
            int64_t best = 0;
            for (int64_t c = 1; c < C; ++c)
                if (src[c * HW + j] > src[best * HW + j]) best = c;
            out[b * HW + j] = src[best * HW + j];
            arg[static_cast<size_t>(b * HW + j)] = best;
        }
    }
    return g.node(std::move(out), {a.id}, "max_channels", [a, B, C, HW, arg](Graph& gg, int self) {
        if (!gg.requires_grad(a)) return;
        const double* go = gg.grad_data(self);
        double* ga = gg.grad_buf(a.id);
        for (int64_t b = 0; b < B; ++b)
            for (int64_t j = 0; j < HW; ++j)
                ga[(b * C + arg[static_cast<size_t>(b * HW + j)]) * HW + j] += go[b * HW + j];
    });
}

// ---------------------------------------------------------------------------
// Softmax and losses.
// ---------------------------------------------------------------------------

inline Var softmax_lastdim(Graph& g, Var a) {
    const Tensor& ta = g.value(a);
    if (ta.rank() < 1 || ta.shape.back() < 1)
        throw ConfigError("softmax_lastdim: empty axis");
    const int64_t n = ta.shape.back();
    const int64_t outer = ta.numel() / n;
    Tensor out(ta.shape);
    for (int64_t o = 0; o < outer; ++o) {
        const double* src = ta.data() + o * n;
        double* dst = out.data() + o * n;
        double mx = src[0];
        for (int64_t i = 1; i < n; ++i) mx = std::max(mx, src[i]);
        double denom = 0.0;
        for (int64_t i = 0; i < n; ++i) {
            dst[i] = std::exp(src[i] - mx);
            denom += dst[i];
        }
        for (int64_t i = 0; i < n; ++i) dst[i] /= denom;
    }
    return g.node(std::move(out), {a.id}, "softmax_lastdim", [a, n, outer](Graph& gg, int self) {
        if (!gg.requires_grad(a)) return;
        const double* go = gg.grad_data(self);
        const Tensor& y = gg.value(self);
        double* ga = gg.grad_buf(a.id);
        for (int64_t o = 0; o < outer; ++o) {
            const double* yo = y.data() + o * n;
            const double* gv = go + o * n;
            double dot = 0.0;
            for (int64_t i = 0; i < n; ++i) dot += gv[i] * yo[i];
            double* dst = ga + o * n;
            for (int64_t i = 0; i < n; ++i) dst[i] += yo[i] * (gv[i] - dot);
        }
    });
}

// Mean softmax cross-entropy over a batch of logits [B,K] and integer labels.
inline Var softmax_cross_entropy_mean(Graph& g, Var logits, const std::vector<int>& labels) {
    const Tensor& tl = g.value(logits);
    if (tl.rank() != 2) throw ShapeError("cross_entropy: logits must be [batch, classes]");
    const int64_t B = tl.shape[0], K = tl.shape[1];
    if (static_cast<int64_t>(labels.size()) != B)
        throw ShapeError("cross_entropy: got " + std::to_string(labels.size()) + " labels for batch " +
                         std::to_string(B));
    for (int y : labels)
        if (y < 0 || y >= K) throw ValidationError("cross_entropy: label out of range");

    std::vector<double> probs(static_cast<size_t>(B * K));
    double loss = 0.0;
    for (int64_t b = 0; b < B; ++b) {
        const double* z = tl.data() + b * K;
        double* p = probs.data() + b * K;
        double mx = z[0];
        for (int64_t i = 1; i < K; ++i) mx = std::max(mx, z[i]);
        double denom = 0.0;
        for (int64_t i = 0; i < K; ++i) {
            p[i] = std::exp(z[i] - mx);
            denom += p[i];
        }
        for (int64_t i = 0; i < K; ++i) p[i] /= denom;
        loss -= std::log(std::max(p[labels[static_cast<size_t>(b)]], 1e-300));
    }
    loss /= static_cast<double>(B);
    return g.node(Tensor::scalar(loss), {logits.id}, "softmax_cross_entropy",
                  [logits, labels, probs, B, K](Graph& gg, int self) {
                      if (!gg.requires_grad(logits)) return;
                      const double gv = gg.grad_data(self)[0] / static_cast<double>(B);
                      double* gl = gg.grad_buf(logits.id);
                      for (int64_t b = 0; b < B; ++b) {
                          const double* p = probs.data() + b * K;
                          double* dst = gl + b * K;
                          for (int64_t i = 0; i < K; ++i) dst[i] += gv * p[i];
                          dst[labels[static_cast<size_t>(b)]] -= gv;
                      }
                  });
}

// ---------------------------------------------------------------------------
// Convolution / pooling.
// ---------------------------------------------------------------------------

enum class Padding { Valid, Same };

// Grouped 2-D cross-correlation. x:[B,Ci,H,W], w:[Co,Ci/groups,KH,KW].
// groups == Ci gives depthwise; 1x1 kernels give pointwise mixing.
inline Var conv2d(Graph& g, Var x, Var w, int64_t groups, Padding padding) {
    const Tensor& tx = g.value(x);
    const Tensor& tw = g.value(w);
    if (tx.rank() != 4 || tw.rank() != 4)
        throw ShapeError("conv2d: expected rank-4 input and kernel, got " + shape_str(tx.shape) +
                         " and " + shape_str(tw.shape));
    const int64_t B = tx.shape[0], Ci = tx.shape[1], H = tx.shape[2], W = tx.shape[3];
    const int64_t Co = tw.shape[0], Cig = tw.shape[1], KH = tw.shape[2], KW = tw.shape[3];
    if (groups < 1 || Ci % groups != 0 || Co % groups != 0)
        throw ConfigError("conv2d: channels (" + std::to_string(Ci) + " in, " + std::to_string(Co) +
                          " out) not divisible by groups=" + std::to_string(groups));
    if (Cig != Ci / groups)
        throw ShapeError("conv2d: kernel expects " + std::to_string(Cig) + " channels/group, input has " +
                         std::to_string(Ci / groups));
    int64_t ph = 0, pw = 0, OH = 0, OW = 0;
    if (padding == Padding::Same) {
        OH = H;
        OW = W;
        ph = (KH - 1) / 2;
        pw = (KW - 1) / 2;
    } else {
        OH = H - KH + 1;
        OW = W - KW + 1;
        if (OH < 1 || OW < 1)
            throw ShapeError("conv2d: kernel " + shape_str(tw.shape) + " larger than input " +
                             shape_str(tx.shape));
    }
    const int64_t cog = Co / groups;

    Tensor out({B, Co, OH, OW});
    for (int64_t b = 0; b < B; ++b) {
        for (int64_t co = 0; co < Co; ++co) {
            const int64_t grp = co / cog;
            for (int64_t cl = 0; cl < Cig; ++cl) {
                const int64_t ci = grp * Cig + cl;
                const double* xch = tx.data() + ((b * Ci + ci) * H) * W;
                double* och = out.data() + ((b * Co + co) * OH) * OW;
                const double* wk = tw.data() + ((co * Cig + cl) * KH) * KW;
                for (int64_t kh = 0; kh < KH; ++kh) {
                    const int64_t oh0 = std::max<int64_t>(0, ph - kh);
                    const int64_t oh1 = std::min<int64_t>(OH, H + ph - kh);
                    for (int64_t oh = oh0; oh < oh1; ++oh) {
                        const double* xrow = xch + (oh + kh - ph) * W;
                        double* orow = och + oh * OW;
                        for (int64_t kw = 0; kw < KW; ++kw) {
                            const double wv = wk[kh * KW + kw];
                            const int64_t ow0 = std::max<int64_t>(0, pw - kw);
                            const int64_t ow1 = std::min<int64_t>(OW, W + pw - kw);
                            const double* xs = xrow + kw - pw;
                            for (int64_t ow = ow0; ow < ow1; ++ow) orow[ow] += wv * xs[ow];
                        }
                    }
                }
            }
        }
    }

    auto backward = [x, w, groups, padding, B, Ci, H, W, Co, Cig, KH, KW, OH, OW, ph, pw,
                     cog](Graph& gg, int self) {
        const double* go = gg.grad_data(self);
        const Tensor& vx = gg.value(x);
        const Tensor& vw = gg.value(w);
        double* gx = gg.requires_grad(x) ? gg.grad_buf(x.id) : nullptr;
        double* gw = gg.requires_grad(w) ? gg.grad_buf(w.id) : nullptr;
        for (int64_t b = 0; b < B; ++b) {
            for (int64_t co = 0; co < Co; ++co) {
                const int64_t grp = co / cog;
                for (int64_t cl = 0; cl < Cig; ++cl) {
                    const int64_t ci = grp * Cig + cl;
                    const double* xch = vx.data() + ((b * Ci + ci) * H) * W;
                    double* gxch = gx ? gx + ((b * Ci + ci) * H) * W : nullptr;
                    const double* goch = go + ((b * Co + co) * OH) * OW;
                    const double* wk = vw.data() + ((co * Cig + cl) * KH) * KW;
                    double* gwk = gw ? gw + ((co * Cig + cl) * KH) * KW : nullptr;
                    for (int64_t kh = 0; kh < KH; ++kh) {
                        const int64_t oh0 = std::max<int64_t>(0, ph - kh);
                        const int64_t oh1 = std::min<int64_t>(OH, H + ph - kh);
                        for (int64_t oh = oh0; oh < oh1; ++oh) {
                            const double* xrow = xch + (oh + kh - ph) * W;
                            double* gxrow = gxch ? gxch + (oh + kh - ph) * W : nullptr;
                            const double* gorow = goch + oh * OW;
                            for (int64_t kw = 0; kw < KW; ++kw) {
                                const int64_t ow0 = std::max<int64_t>(0, pw - kw);
                                const int64_t ow1 = std::min<int64_t>(OW, W + pw - kw);
                                if (ow1 <= ow0) continue;
                                if (gxrow) {
                                    const double wv = wk[kh * KW + kw];
                                    double* gxs = gxrow + kw - pw;
                                    for (int64_t ow = ow0; ow < ow1; ++ow) gxs[ow] += wv * gorow[ow];
                                }
                                if (gwk) {
                                    gwk[kh * KW + kw] +=
                                        dot_acc4(gorow + ow0, xrow + kw - pw + ow0, ow1 - ow0);
                                }
                            }
                        }
                    }
                }
            }
        }
    };
    return g.node(std::move(out), {x.id, w.id}, "conv2d", std::move(backward));
}

// Non-overlapping average pooling (kernel == stride); extents must divide.
inline Var avgpool2d(Graph& g, Var x, int64_t kh, int64_t kw) {
    const Tensor& tx = g.value(x);
    if (tx.rank() != 4) throw ShapeError("avgpool2d: expected rank-4 input");
    const int64_t B = tx.shape[0], C = tx.shape[1], H = tx.shape[2], W = tx.shape[3];
    if (kh < 1 || kw < 1 || H % kh != 0 || W % kw != 0)
        throw ShapeError("avgpool2d: pool " + std::to_string(kh) + "x" + std::to_string(kw) +
                         " does not divide input " + shape_str(tx.shape));
    const int64_t OH = H / kh, OW = W / kw;
    const double inv = 1.0 / static_cast<double>(kh * kw);
    Tensor out({B, C, OH, OW});
    for (int64_t bc = 0; bc < B * C; ++bc) {
        const double* src = tx.data() + bc * H * W;
        double* dst = out.data() + bc * OH * OW;
        for (int64_t oh = 0; oh < OH; ++oh)
            for (int64_t ow = 0; ow < OW; ++ow) {
                double acc = 0.0;
                for (int64_t i = 0; i < kh; ++i) {
                    const double* row = src + (oh * kh + i) * W + ow * kw;
                    for (int64_t j = 0; j < kw; ++j) acc += row[j];
                }
                dst[oh * OW + ow] = acc * inv;
            }
    }
    return g.node(std::move(out), {x.id}, "avgpool2d",
                  [x, B, C, H, W, kh, kw, OH, OW, inv](Graph& gg, int self) {
                      if (!gg.requires_grad(x)) return;
                      const double* go = gg.grad_data(self);
                      double* gx = gg.grad_buf(x.id);
                      for (int64_t bc = 0; bc < B * C; ++bc) {
                          const double* gsrc = go + bc * OH * OW;
                          double* gdst = gx + bc * H * W;
                          for (int64_t oh = 0; oh < OH; ++oh)
                              for (int64_t ow = 0; ow < OW; ++ow) {
                                  const double gv = gsrc[oh * OW + ow] * inv;
                                  for (int64_t i = 0; i < kh; ++i) {
                                      double* row = gdst + (oh * kh + i) * W + ow * kw;
                                      for (int64_t j = 0; j < kw; ++j) row[j] += gv;
                                  }
                              }
                      }
                  });
}

// ---------------------------------------------------------------------------
// Batch normalization and dropout.
// ---------------------------------------------------------------------------

// Per-channel batchnorm over [B,C,H,W]. Train mode normalizes with batch
// statistics (biased variance) and updates the running buffers in place:
// running = momentum * running + (1 - momentum) * batch. Eval mode uses the
// running buffers as constants.
inline Var batchnorm2d(Graph& g, Var x, Var gamma, Var beta, Tensor& run_mean, Tensor& run_var,
                       bool train, double momentum = 0.9, double eps = 1e-5) {
    const Tensor& tx = g.value(x);
    if (tx.rank() != 4) throw ShapeError("batchnorm2d: expected rank-4 input");
    const int64_t B = tx.shape[0], C = tx.shape[1], HW = tx.shape[2] * tx.shape[3];
    const Tensor& tg = g.value(gamma);
    const Tensor& tb = g.value(beta);
    if (tg.numel() != C || tb.numel() != C || run_mean.numel() != C || run_var.numel() != C)
        throw ShapeError("batchnorm2d: parameter size does not match " + std::to_string(C) + " channels");

    std::vector<double> mean(static_cast<size_t>(C)), invstd(static_cast<size_t>(C));
    if (train) {
        const double n = static_cast<double>(B * HW);
        for (int64_t c = 0; c < C; ++c) {
            double s = 0.0, s2 = 0.0;
            for (int64_t b = 0; b < B; ++b) {
                const double* src = tx.data() + (b * C + c) * HW;
                for (int64_t j = 0; j < HW; ++j) {
                    s += src[j];
                    s2 += src[j] * src[j];
                }
            }
            const double m = s / n;
            const double var = std::max(0.0, s2 / n - m * m);
            mean[static_cast<size_t>(c)] = m;
            invstd[static_cast<size_t>(c)] = 1.0 / std::sqrt(var + eps);
            run_mean[c] = momentum * run_mean[c] + (1.0 - momentum) * m;
            run_var[c] = momentum * run_var[c] + (1.0 - momentum) * var;
        }
    } else {
        for (int64_t c = 0; c < C; ++c) {
            mean[static_cast<size_t>(c)] = run_mean[c];
            invstd[static_cast<size_t>(c)] = 1.0 / std::sqrt(run_var[c] + eps);
        }
    }

    Tensor out(tx.shape);
    for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c) {
            const double m = mean[static_cast<size_t>(c)];
            const double is = invstd[static_cast<size_t>(c)];
            const double gm = tg[c], bt = tb[c];
            const double* src = tx.data() + (b * C + c) * HW;
            double* dst = out.data() + (b * C + c) * HW;
            for (int64_t j = 0; j < HW; ++j) dst[j] = gm * (src[j] - m) * is + bt;
        }

    auto backward = [x, gamma, beta, mean, invstd, train, B, C, HW](Graph& gg, int self) {
        const double* go = gg.grad_data(self);
        const Tensor& vx = gg.value(x);
        const Tensor& vg = gg.value(gamma);
        const double n = static_cast<double>(B * HW);
        double* gx = gg.requires_grad(x) ? gg.grad_buf(x.id) : nullptr;
        double* ggm = gg.requires_grad(gamma) ? gg.grad_buf(gamma.id) : nullptr;
        double* gbt = gg.requires_grad(beta) ? gg.grad_buf(beta.id) : nullptr;
        for (int64_t c = 0; c < C; ++c) {
            const double m = mean[static_cast<size_t>(c)];
            const double is = invstd[static_cast<size_t>(c)];
            const double gm = vg[c];
            double sum_go = 0.0, sum_go_xhat = 0.0;
            for (int64_t b = 0; b < B; ++b) {
                const double* gsrc = go + (b * C + c) * HW;
                const double* src = vx.data() + (b * C + c) * HW;
                for (int64_t j = 0; j < HW; ++j) {
                    sum_go += gsrc[j];
                    sum_go_xhat += gsrc[j] * (src[j] - m) * is;
                }
            }
            if (ggm) ggm[c] += sum_go_xhat;
            if (gbt) gbt[c] += sum_go;
            if (gx) {
                if (train) {
                    // dx = gamma*is/n * (n*go - sum(go) - xhat * sum(go*xhat))
                    const double k = gm * is / n;
                    for (int64_t b = 0; b < B; ++b) {
                        const double* gsrc = go + (b * C + c) * HW;
                        const double* src = vx.data() + (b * C + c) * HW;
                        double* dst = gx + (b * C + c) * HW;
                        for (int64_t j = 0; j < HW; ++j) {
                            const double xhat = (src[j] - m) * is;
                            dst[j] += k * (n * gsrc[j] - sum_go - xhat * sum_go_xhat);
                        }
                    }
                } else {
                    const double k = gm * is;
                    for (int64_t b = 0; b < B; ++b) {
                        const double* gsrc = go + (b * C + c) * HW;
                        double* dst = gx + (b * C + c) * HW;
                        for (int64_t j = 0; j < HW; ++j) dst[j] += k * gsrc[j];
                    }
                }
            }
        }
    };
    return g.node(std::move(out), {x.id, gamma.id, beta.id}, "batchnorm2d", std::move(backward));
}

// Inverted dropout: train scales kept activations by 1/(1-rate) so that eval
// mode is the exact identity (and is returned as the same node).
inline Var dropout(Graph& g, Var x, double rate, bool train, RngStream& rng) {
    if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout: rate must lie in [0, 1)");
    if (!train || rate == 0.0) return x;
    const Tensor& tx = g.value(x);
    const int64_t n = tx.numel();
    const double keep = 1.0 - rate;
    std::vector<double> mask(static_cast<size_t>(n));
    Tensor out(tx.shape);
    for (int64_t i = 0; i < n; ++i) {
        const double m = rng.uniform() < rate ? 0.0 : 1.0 / keep;
        mask[static_cast<size_t>(i)] = m;
        out[i] = tx[i] * m;
    }
    return g.node(std::move(out), {x.id}, "dropout", [x, mask](Graph& gg, int self) {
        if (!gg.requires_grad(x)) return;
        const double* go = gg.grad_data(self);
        double* gx = gg.grad_buf(x.id);
        const int64_t n = gg.value(self).numel();
        for (int64_t i = 0; i < n; ++i) gx[i] += go[i] * mask[static_cast<size_t>(i)];
    });
}

// Dense layer helper: y = x*W + b with x:[B,in], W:[in,out], b:[1,out].
inline Var dense(Graph& g, Var x, Var w, Var b) { return add(g, matmul(g, x, w), b); }

}  // namespace mcam
