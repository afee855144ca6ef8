#pragma once

#include "cvit/tape.hpp"
#include "cvit/tensor.hpp"

#include <cmath>
#include <cstdint>
#include <memory>
#include <stdexcept>
#include <vector>

namespace cvit {

/// FL convolutions are fixed 3x3, stride 1, padding 1; output H,W match input.
struct ConvSpec {
    int64_t in_channels = 0;
    int64_t out_channels = 0;
    static constexpr int64_t kernel = 3;
    static constexpr int64_t stride = 1;
    static constexpr int64_t padding = 1;
};

enum class Mode { train, eval };

/// Batchnorm running statistics, updated in train mode by EMA.
template <typename Scalar>
struct BNState {
    Tensor<Scalar> running_mean;
    Tensor<Scalar> running_var;

    BNState() = default;
    explicit BNState(int64_t channels)
        : running_mean(Tensor<Scalar>::zeros({channels})),
          running_var(Tensor<Scalar>::ones({channels})) {}
};

namespace detail {

inline std::vector<int64_t> row_major_strides(const Shape& s) {
    std::vector<int64_t> st(s.size(), 1);
    for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
    return st;
}

template <typename Scalar>
void check_same_shape(const Tensor<Scalar>& a, const Tensor<Scalar>& b, const char* op) {
    if (a.shape() != b.shape())
        throw dim_error(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                        shape_str(b.shape()));
}

// Fills col [C*9 x H*W] from one image plane set x [C x H x W], zero padding 1.
template <typename Scalar>
void im2col_3x3(const Scalar* x, int64_t C, int64_t H, int64_t W, Scalar* col) {
    const int64_t hw = H * W;
    for (int64_t c = 0; c < C; ++c) {
        for (int64_t ki = 0; ki < 3; ++ki) {
            for (int64_t kj = 0; kj < 3; ++kj) {
                Scalar* row = col + ((c * 3 + ki) * 3 + kj) * hw;
                for (int64_t i = 0; i < H; ++i) {
                    const int64_t si = i + ki - 1;
                    if (si < 0 || si >= H) {
                        for (int64_t j = 0; j < W; ++j) row[i * W + j] = Scalar(0);
                        continue;
                    }
                    for (int64_t j = 0; j < W; ++j) {
                        const int64_t sj = j + kj - 1;
                        row[i * W + j] = (sj < 0 || sj >= W) ? Scalar(0) : x[c * hw + si * W + sj];
                    }
                }
            }
        }
    }
}

// Scatter-add of dcol [C*9 x H*W] back into dx [C x H x W].
template <typename Scalar>
void col2im_3x3(const Scalar* dcol, int64_t C, int64_t H, int64_t W, Scalar* dx) {
    const int64_t hw = H * W;
    for (int64_t c = 0; c < C; ++c) {
        for (int64_t ki = 0; ki < 3; ++ki) {
            for (int64_t kj = 0; kj < 3; ++kj) {
                const Scalar* row = dcol + ((c * 3 + ki) * 3 + kj) * hw;
                for (int64_t i = 0; i < H; ++i) {
                    const int64_t si = i + ki - 1;
                    if (si < 0 || si >= H) continue;
                    for (int64_t j = 0; j < W; ++j) {
                        const int64_t sj = j + kj - 1;
                        if (sj < 0 || sj >= W) continue;
                        dx[c * hw + si * W + sj] += row[i * W + j];
                    }
                }
            }
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and reduction ops
// ---------------------------------------------------------------------------

template <typename S>
Var add(Tape<S>& t, Var a, Var b) {
    detail::check_same_shape(t.value(a), t.value(b), "add");
    Tensor<S> out(t.value(a).shape());
    out.array() = t.value(a).array() + t.value(b).array();
    return t.record(std::move(out), {a, b}, [a, b](Tape<S>& tp, Var o) {
        tp.accumulate(a, tp.grad(o));
        tp.accumulate(b, tp.grad(o));
    });
}

/// x + b where b's shape is a trailing suffix of x's shape (bias / embedding
/// broadcast over leading dims).
template <typename S>
Var add_broadcast(Tape<S>& t, Var x, Var b) {
    const auto& xs = t.value(x).shape();
    const auto& bs = t.value(b).shape();
    if (bs.size() > xs.size() ||
        !std::equal(bs.begin(), bs.end(), xs.end() - static_cast<long>(bs.size())))
        throw dim_error("add_broadcast: " + shape_str(bs) + " is not a suffix of " +
                        shape_str(xs));
    const int64_t inner = shape_numel(bs);
    const int64_t reps = t.value(x).numel() / inner;
    Tensor<S> out(xs);
    for (int64_t r = 0; r < reps; ++r)
        out.array().segment(r * inner, inner) =
            t.value(x).array().segment(r * inner, inner) + t.value(b).array();
    return t.record(std::move(out), {x, b}, [x, b, reps, inner](Tape<S>& tp, Var o) {
        const auto& g = tp.grad(o);
        tp.accumulate(x, g);
        if (tp.requires_grad(b)) {
            auto& gb = tp.grad(b);
            for (int64_t r = 0; r < reps; ++r)
                gb.array() += g.array().segment(r * inner, inner);
        }
    });
}

template <typename S>
Var mul(Tape<S>& t, Var a, Var b) {
    detail::check_same_shape(t.value(a), t.value(b), "mul");
    Tensor<S> out(t.value(a).shape());
    out.array() = t.value(a).array() * t.value(b).array();
    return t.record(std::move(out), {a, b}, [a, b](Tape<S>& tp, Var o) {
        const auto& g = tp.grad(o).array();
        if (tp.requires_grad(a)) tp.grad(a).array() += g * tp.value(b).array();
        if (tp.requires_grad(b)) tp.grad(b).array() += g * tp.value(a).array();
    });
}

template <typename S>
Var scale(Tape<S>& t, Var x, S c) {
    Tensor<S> out(t.value(x).shape());
    out.array() = t.value(x).array() * c;
    return t.record(std::move(out), {x}, [x, c](Tape<S>& tp, Var o) {
        if (tp.requires_grad(x)) tp.grad(x).array() += tp.grad(o).array() * c;
    });
}

template <typename S>
Var sum(Tape<S>& t, Var x) {
    Tensor<S> out({1});
    out[0] = t.value(x).array().sum();
    return t.record(std::move(out), {x}, [x](Tape<S>& tp, Var o) {
        if (tp.requires_grad(x)) tp.grad(x).array() += tp.grad(o)[0];
    });
}

template <typename S>
Var mean(Tape<S>& t, Var x) {
    return scale(t, sum(t, x), S(1) / static_cast<S>(t.value(x).numel()));
}

template <typename S>
Var relu(Tape<S>& t, Var x) {
    Tensor<S> out(t.value(x).shape());
    out.array() = t.value(x).array().max(S(0));
    return t.record(std::move(out), {x}, [x](Tape<S>& tp, Var o) {
        if (!tp.requires_grad(x)) return;
        // subgradient at 0 is 0
        tp.grad(x).array() +=
            tp.grad(o).array() * (tp.value(x).array() > S(0)).template cast<S>();
    });
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <typename S>
Var reshape(Tape<S>& t, Var x, Shape shape) {
    Tensor<S> out = t.value(x).reshaped(std::move(shape));
    return t.record(std::move(out), {x}, [x](Tape<S>& tp, Var o) {
        if (tp.requires_grad(x)) tp.grad(x).array() += tp.grad(o).array();
    });
}

namespace detail {

template <typename S>
Tensor<S> permute_copy(const Tensor<S>& x, const std::vector<int>& axes) {
    const auto& xs = x.shape();
    Shape os(xs.size());
    for (size_t i = 0; i < axes.size(); ++i) os[i] = xs[axes[i]];
    Tensor<S> out(os);
    const auto xst = row_major_strides(xs);
    const auto ost = row_major_strides(os);
    const int64_t n = x.numel();
    const int rank = static_cast<int>(xs.size());
    for (int64_t idx = 0; idx < n; ++idx) {
        int64_t rem = idx, src = 0;
        for (int d = 0; d < rank; ++d) {
            const int64_t coord = rem / ost[d];
            rem %= ost[d];
            src += coord * xst[axes[d]];
        }
        out[idx] = x[src];
    }
    return out;
}

inline std::vector<int> inverse_axes(const std::vector<int>& axes) {
    std::vector<int> inv(axes.size());
    for (size_t i = 0; i < axes.size(); ++i) inv[axes[i]] = static_cast<int>(i);
    return inv;
}

}  // namespace detail

template <typename S>
Var permute(Tape<S>& t, Var x, std::vector<int> axes) {
    if (axes.size() != t.value(x).rank())
        throw dim_error("permute: axes rank mismatch for " + shape_str(t.value(x).shape()));
    Tensor<S> out = detail::permute_copy(t.value(x), axes);
    return t.record(std::move(out), {x}, [x, axes](Tape<S>& tp, Var o) {
        if (!tp.requires_grad(x)) return;
        tp.grad(x).array() +=
            detail::permute_copy(tp.grad(o), detail::inverse_axes(axes)).array();
    });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <typename S>
Var matmul(Tape<S>& t, Var a, Var b) {
    const auto& as = t.value(a).shape();
    const auto& bs = t.value(b).shape();
    if (as.size() != 2 || bs.size() != 2 || as[1] != bs[0])
        throw dim_error("matmul: incompatible shapes " + shape_str(as) + " x " + shape_str(bs));
    const int64_t m = as[0], k = as[1], n = bs[1];
    Tensor<S> out({m, n});
    out.as_matrix(m, n).noalias() = t.value(a).as_matrix(m, k) * t.value(b).as_matrix(k, n);
    return t.record(std::move(out), {a, b}, [a, b, m, k, n](Tape<S>& tp, Var o) {
        auto g = tp.grad(o).as_matrix(m, n);
        if (tp.requires_grad(a))
            tp.grad(a).as_matrix(m, k).noalias() += g * tp.value(b).as_matrix(k, n).transpose();
        if (tp.requires_grad(b))
            tp.grad(b).as_matrix(k, n).noalias() += tp.value(a).as_matrix(m, k).transpose() * g;
    });
}

/// Batched matmul: a [B x m x k] times b [B x k x n].
template <typename S>
Var bmm(Tape<S>& t, Var a, Var b) {
    const auto& as = t.value(a).shape();
    const auto& bs = t.value(b).shape();
    if (as.size() != 3 || bs.size() != 3 || as[0] != bs[0] || as[2] != bs[1])
        throw dim_error("bmm: incompatible shapes " + shape_str(as) + " x " + shape_str(bs));
    const int64_t B = as[0], m = as[1], k = as[2], n = bs[2];
    Tensor<S> out({B, m, n});
    for (int64_t i = 0; i < B; ++i) {
        typename Tensor<S>::ConstMatrixMap am(t.value(a).data() + i * m * k, m, k);
        typename Tensor<S>::ConstMatrixMap bm(t.value(b).data() + i * k * n, k, n);
        typename Tensor<S>::MatrixMap om(out.data() + i * m * n, m, n);
        om.noalias() = am * bm;
    }
    return t.record(std::move(out), {a, b}, [a, b, B, m, k, n](Tape<S>& tp, Var o) {
        for (int64_t i = 0; i < B; ++i) {
            typename Tensor<S>::ConstMatrixMap g(tp.grad(o).data() + i * m * n, m, n);
            typename Tensor<S>::ConstMatrixMap am(tp.value(a).data() + i * m * k, m, k);
            typename Tensor<S>::ConstMatrixMap bm(tp.value(b).data() + i * k * n, k, n);
            if (tp.requires_grad(a)) {
                typename Tensor<S>::MatrixMap ga(tp.grad(a).data() + i * m * k, m, k);
                ga.noalias() += g * bm.transpose();
            }
            if (tp.requires_grad(b)) {
                typename Tensor<S>::MatrixMap gb(tp.grad(b).data() + i * k * n, k, n);
                gb.noalias() += am.transpose() * g;
            }
        }
    });
}

/// Affine map over the last dimension: x [... x K], w [K x M], b [M].
template <typename S>
Var linear(Tape<S>& t, Var x, Var w, Var b) {
    const auto& xs = t.value(x).shape();
    const auto& ws = t.value(w).shape();
    if (ws.size() != 2 || xs.empty() || xs.back() != ws[0])
        throw dim_error("linear: trailing extent of " + shape_str(xs) + " must match " +
                        shape_str(ws));
    if (t.value(b).shape() != Shape{ws[1]})
        throw dim_error("linear: bias shape " + shape_str(t.value(b).shape()));
    const int64_t K = ws[0], M = ws[1];
    const int64_t R = t.value(x).numel() / K;
    Shape os(xs.begin(), xs.end() - 1);
    os.push_back(M);
    Tensor<S> out(os);
    out.as_matrix(R, M).noalias() = t.value(x).as_matrix(R, K) * t.value(w).as_matrix(K, M);
    out.as_matrix(R, M).rowwise() +=
        typename Tensor<S>::ConstMatrixMap(t.value(b).data(), 1, M).row(0);
    return t.record(std::move(out), {x, w, b}, [x, w, b, R, K, M](Tape<S>& tp, Var o) {
        auto g = tp.grad(o).as_matrix(R, M);
        if (tp.requires_grad(x))
            tp.grad(x).as_matrix(R, K).noalias() += g * tp.value(w).as_matrix(K, M).transpose();
        if (tp.requires_grad(w))
            tp.grad(w).as_matrix(K, M).noalias() += tp.value(x).as_matrix(R, K).transpose() * g;
        if (tp.requires_grad(b))
            tp.grad(b).as_matrix(1, M) += g.colwise().sum();
    });
}

// ---------------------------------------------------------------------------
// Normalization and softmax
// ---------------------------------------------------------------------------

/// Exp-normalize over the last dimension, max-subtracted for stability.
template <typename S>
Var softmax(Tape<S>& t, Var x) {
    const auto& xs = t.value(x).shape();
    const int64_t D = xs.back();
    const int64_t R = t.value(x).numel() / D;
    Tensor<S> out(xs);
    for (int64_t r = 0; r < R; ++r) {
        auto row = t.value(x).array().segment(r * D, D);
        auto orow = out.array().segment(r * D, D);
        orow = (row - row.maxCoeff()).exp();
        orow /= orow.sum();
    }
    return t.record(std::move(out), {x}, [x, R, D](Tape<S>& tp, Var o) {
        if (!tp.requires_grad(x)) return;
        for (int64_t r = 0; r < R; ++r) {
            auto y = tp.value(o).array().segment(r * D, D);
            auto g = tp.grad(o).array().segment(r * D, D);
            const S dot = (g * y).sum();
            tp.grad(x).array().segment(r * D, D) += y * (g - dot);
        }
    });
}

/// Normalize over the last dimension, then affine by gamma/beta [D].
template <typename S>
Var layernorm(Tape<S>& t, Var x, Var gamma, Var beta, S eps = S(1e-6)) {
    const auto& xs = t.value(x).shape();
    const int64_t D = xs.back();
    if (D < 2) throw dim_error("layernorm: last extent must be >= 2");
    if (t.value(gamma).shape() != Shape{D} || t.value(beta).shape() != Shape{D})
        throw dim_error("layernorm: gamma/beta must be length " + std::to_string(D));
    const int64_t R = t.value(x).numel() / D;
    Tensor<S> out(xs);
    auto xhat = std::make_shared<Tensor<S>>(xs);
    auto invstd = std::make_shared<Tensor<S>>(Shape{R});
    for (int64_t r = 0; r < R; ++r) {
        auto row = t.value(x).array().segment(r * D, D);
        const S mu = row.mean();
        const S var = (row - mu).square().mean();
        const S is = S(1) / std::sqrt(var + eps);
        (*invstd)[r] = is;
        xhat->array().segment(r * D, D) = (row - mu) * is;
        out.array().segment(r * D, D) =
            xhat->array().segment(r * D, D) * t.value(gamma).array() + t.value(beta).array();
    }
    return t.record(std::move(out), {x, gamma, beta},
                    [x, gamma, beta, xhat, invstd, R, D](Tape<S>& tp, Var o) {
        for (int64_t r = 0; r < R; ++r) {
            auto g = tp.grad(o).array().segment(r * D, D);
            auto xh = xhat->array().segment(r * D, D);
            if (tp.requires_grad(gamma)) tp.grad(gamma).array() += g * xh;
            if (tp.requires_grad(beta)) tp.grad(beta).array() += g;
            if (tp.requires_grad(x)) {
                Eigen::Array<S, Eigen::Dynamic, 1> dxh = g * tp.value(gamma).array();
                const S s1 = dxh.sum();
                const S s2 = (dxh * xh).sum();
                tp.grad(x).array().segment(r * D, D) +=
                    (*invstd)[r] / static_cast<S>(D) *
                    (static_cast<S>(D) * dxh - s1 - xh * s2);
            }
        }
    });
}

/// Per-channel batch normalization of x [N x C x H x W]. Train mode uses batch
/// statistics and updates `state` by EMA; eval mode normalizes by the running
/// statistics.
template <typename S>
Var batchnorm2d(Tape<S>& t, Var x, Var gamma, Var beta, BNState<S>& state, Mode mode,
                S eps = S(1e-5), S momentum = S(0.1)) {
    const auto& xs = t.value(x).shape();
    if (xs.size() != 4) throw dim_error("batchnorm2d: expected NCHW, got " + shape_str(xs));
    const int64_t N = xs[0], C = xs[1], H = xs[2], W = xs[3];
    if (t.value(gamma).shape() != Shape{C} || t.value(beta).shape() != Shape{C})
        throw dim_error("batchnorm2d: gamma/beta must be length " + std::to_string(C));
    const int64_t m = N * H * W;  // samples per channel
    if (mode == Mode::train && m < 2)
        throw dim_error("batchnorm2d: train mode needs >= 2 values per channel");
    const int64_t hw = H * W;

    Tensor<S> mean_t({C}), invstd_t({C});
    for (int64_t c = 0; c < C; ++c) {
        S mu, var;
        if (mode == Mode::train) {
            S acc = 0;
            for (int64_t n = 0; n < N; ++n)
                acc += t.value(x).array().segment((n * C + c) * hw, hw).sum();
            mu = acc / static_cast<S>(m);
            S vacc = 0;
            for (int64_t n = 0; n < N; ++n)
                vacc += (t.value(x).array().segment((n * C + c) * hw, hw) - mu).square().sum();
            var = vacc / static_cast<S>(m);
            // running var keeps the unbiased estimate
            const S uvar = m > 1 ? vacc / static_cast<S>(m - 1) : var;
            state.running_mean[c] = (S(1) - momentum) * state.running_mean[c] + momentum * mu;
            state.running_var[c] = (S(1) - momentum) * state.running_var[c] + momentum * uvar;
        } else {
            mu = state.running_mean[c];
            var = state.running_var[c];
        }
        mean_t[c] = mu;
        invstd_t[c] = S(1) / std::sqrt(var + eps);
    }

    Tensor<S> out(xs);
    auto xhat = std::make_shared<Tensor<S>>(xs);
    for (int64_t n = 0; n < N; ++n) {
        for (int64_t c = 0; c < C; ++c) {
            auto seg = t.value(x).array().segment((n * C + c) * hw, hw);
            auto xh = xhat->array().segment((n * C + c) * hw, hw);
            xh = (seg - mean_t[c]) * invstd_t[c];
            out.array().segment((n * C + c) * hw, hw) =
                xh * t.value(gamma)[c] + t.value(beta)[c];
        }
    }
    auto invstd = std::make_shared<Tensor<S>>(std::move(invstd_t));
    return t.record(std::move(out), {x, gamma, beta},
                    [x, gamma, beta, xhat, invstd, N, C, hw, m, mode](Tape<S>& tp, Var o) {
        for (int64_t c = 0; c < C; ++c) {
            S sg = 0, sgx = 0;
            for (int64_t n = 0; n < N; ++n) {
                auto g = tp.grad(o).array().segment((n * C + c) * hw, hw);
                auto xh = xhat->array().segment((n * C + c) * hw, hw);
                sg += g.sum();
                sgx += (g * xh).sum();
            }
            if (tp.requires_grad(gamma)) tp.grad(gamma)[c] += sgx;
            if (tp.requires_grad(beta)) tp.grad(beta)[c] += sg;
            if (!tp.requires_grad(x)) continue;
            const S gam = tp.value(gamma)[c];
            const S is = (*invstd)[c];
            for (int64_t n = 0; n < N; ++n) {
                auto g = tp.grad(o).array().segment((n * C + c) * hw, hw);
                auto xh = xhat->array().segment((n * C + c) * hw, hw);
                if (mode == Mode::train) {
                    tp.grad(x).array().segment((n * C + c) * hw, hw) +=
                        gam * is / static_cast<S>(m) *
                        (static_cast<S>(m) * g - sg - xh * sgx);
                } else {
                    tp.grad(x).array().segment((n * C + c) * hw, hw) += gam * is * g;
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Spatial ops
// ---------------------------------------------------------------------------

/// 2x2 max pooling with stride 2; H and W must be even. Backward routes the
/// gradient to the first (row-major) maximum of each window.
template <typename S>
Var maxpool2d(Tape<S>& t, Var x) {
    const auto& xs = t.value(x).shape();
    if (xs.size() != 4) throw dim_error("maxpool2d: expected NCHW, got " + shape_str(xs));
    const int64_t N = xs[0], C = xs[1], H = xs[2], W = xs[3];
    if (H % 2 != 0 || W % 2 != 0)
        throw dim_error("maxpool2d: extents must be even, got " + shape_str(xs));
    const int64_t Ho = H / 2, Wo = W / 2;
    Tensor<S> out({N, C, Ho, Wo});
    auto argmax = std::make_shared<std::vector<int64_t>>(out.numel());
    const S* xd = t.value(x).data();
    for (int64_t nc = 0; nc < N * C; ++nc) {
        const S* plane = xd + nc * H * W;
        for (int64_t i = 0; i < Ho; ++i) {
            for (int64_t j = 0; j < Wo; ++j) {
                int64_t best = (2 * i) * W + 2 * j;
                S bv = plane[best];
                for (int64_t di = 0; di < 2; ++di)
                    for (int64_t dj = 0; dj < 2; ++dj) {
                        const int64_t idx = (2 * i + di) * W + 2 * j + dj;
                        if (plane[idx] > bv) {
                            bv = plane[idx];
                            best = idx;
                        }
                    }
                const int64_t oidx = nc * Ho * Wo + i * Wo + j;
                out[oidx] = bv;
                (*argmax)[oidx] = nc * H * W + best;
            }
        }
    }
    return t.record(std::move(out), {x}, [x, argmax](Tape<S>& tp, Var o) {
        if (!tp.requires_grad(x)) return;
        auto& gx = tp.grad(x);
        const auto& g = tp.grad(o);
        for (int64_t i = 0; i < g.numel(); ++i) gx[(*argmax)[i]] += g[i];
    });
}

/// 3x3 cross-correlation with zero padding 1, stride 1; spatial extents are
/// preserved. x [N x C x H x W], w [O x C x 3 x 3], b [O].
template <typename S>
Var conv2d(Tape<S>& t, Var x, Var w, Var b, const ConvSpec& spec) {
    const auto& xs = t.value(x).shape();
    const auto& ws = t.value(w).shape();
    if (xs.size() != 4) throw dim_error("conv2d: expected NCHW input, got " + shape_str(xs));
    if (ws.size() != 4 || ws[2] != 3 || ws[3] != 3)
        throw dim_error("conv2d: expected Ox Cx 3x 3 weights, got " + shape_str(ws));
    if (xs[1] != ws[1] || xs[1] != spec.in_channels || ws[0] != spec.out_channels)
        throw dim_error("conv2d: channel mismatch, input " + shape_str(xs) + " weights " +
                        shape_str(ws));
    if (t.value(b).shape() != Shape{ws[0]})
        throw dim_error("conv2d: bias must be length " + std::to_string(ws[0]));
    const int64_t N = xs[0], C = xs[1], H = xs[2], W = xs[3], O = ws[0];
    const int64_t K = C * 9, hw = H * W;

    Tensor<S> out({N, O, H, W});
    Tensor<S> col({K, hw});
    auto wm = t.value(w).as_matrix(O, K);
    for (int64_t n = 0; n < N; ++n) {
        detail::im2col_3x3(t.value(x).data() + n * C * hw, C, H, W, col.data());
        typename Tensor<S>::MatrixMap om(out.data() + n * O * hw, O, hw);
        om.noalias() = wm * col.as_matrix(K, hw);
        om.colwise() += Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>>(t.value(b).data(), O);
    }
    return t.record(std::move(out), {x, w, b}, [x, w, b, N, C, H, W, O, K, hw](Tape<S>& tp, Var o) {
        Tensor<S> col({K, hw});
        auto wm = tp.value(w).as_matrix(O, K);
        for (int64_t n = 0; n < N; ++n) {
            typename Tensor<S>::ConstMatrixMap g(tp.grad(o).data() + n * O * hw, O, hw);
            if (tp.requires_grad(w) || tp.requires_grad(b)) {
                if (tp.requires_grad(b))
                    Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>>(tp.grad(b).data(), O) +=
                        g.rowwise().sum();
                if (tp.requires_grad(w)) {
                    detail::im2col_3x3(tp.value(x).data() + n * C * hw, C, H, W, col.data());
                    tp.grad(w).as_matrix(O, K).noalias() +=
                        g * col.as_matrix(K, hw).transpose();
                }
            }
            if (tp.requires_grad(x)) {
                Tensor<S> dcol({K, hw});
                dcol.as_matrix(K, hw).noalias() = wm.transpose() * g;
                detail::col2im_3x3(dcol.data(), C, H, W, tp.grad(x).data() + n * C * hw);
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Sequence ops
// ---------------------------------------------------------------------------

/// Prepends a learnable token [1 x D] to every sequence in x [N x S x D].
template <typename S>
Var prepend_token(Tape<S>& t, Var x, Var token) {
    const auto& xs = t.value(x).shape();
    if (xs.size() != 3) throw dim_error("prepend_token: expected NxSxD, got " + shape_str(xs));
    const int64_t N = xs[0], Sq = xs[1], D = xs[2];
    if (t.value(token).shape() != Shape{1, D})
        throw dim_error("prepend_token: token must be 1x" + std::to_string(D));
    Tensor<S> out({N, Sq + 1, D});
    for (int64_t n = 0; n < N; ++n) {
        out.array().segment(n * (Sq + 1) * D, D) = t.value(token).array();
        out.array().segment(n * (Sq + 1) * D + D, Sq * D) =
            t.value(x).array().segment(n * Sq * D, Sq * D);
    }
    return t.record(std::move(out), {x, token}, [x, token, N, Sq, D](Tape<S>& tp, Var o) {
        const auto& g = tp.grad(o);
        for (int64_t n = 0; n < N; ++n) {
            if (tp.requires_grad(token))
                tp.grad(token).array() += g.array().segment(n * (Sq + 1) * D, D);
            if (tp.requires_grad(x))
                tp.grad(x).array().segment(n * Sq * D, Sq * D) +=
                    g.array().segment(n * (Sq + 1) * D + D, Sq * D);
        }
    });
}

/// Extracts token `index` of every sequence: x [N x S x D] -> [N x D].
template <typename S>
Var select_token(Tape<S>& t, Var x, int64_t index) {
    const auto& xs = t.value(x).shape();
    if (xs.size() != 3) throw dim_error("select_token: expected NxSxD, got " + shape_str(xs));
    const int64_t N = xs[0], Sq = xs[1], D = xs[2];
    if (index < 0 || index >= Sq) throw dim_error("select_token: index out of range");
    Tensor<S> out({N, D});
    for (int64_t n = 0; n < N; ++n)
        out.array().segment(n * D, D) = t.value(x).array().segment((n * Sq + index) * D, D);
    return t.record(std::move(out), {x}, [x, N, Sq, D, index](Tape<S>& tp, Var o) {
        if (!tp.requires_grad(x)) return;
        for (int64_t n = 0; n < N; ++n)
            tp.grad(x).array().segment((n * Sq + index) * D, D) +=
                tp.grad(o).array().segment(n * D, D);
    });
}

// ---------------------------------------------------------------------------
// Multi-head self-attention
// ---------------------------------------------------------------------------

struct MSAParams {
    Var wq, bq, wk, bk, wv, bv, wo, bo;  // each w is DxD, each b is D
};

struct MSAOut {
    Var out;   // N x S x D
    Var attn;  // (N*heads) x S x S softmax weights
};

/// Per head: Q,K,V projections, scaled dot-product attention, concat, output
/// projection. Composed from tape primitives so backward comes with it.
template <typename S>
MSAOut multi_head_self_attention(Tape<S>& t, Var x, const MSAParams& p, int64_t heads) {
    const auto& xs = t.value(x).shape();
    if (xs.size() != 3) throw dim_error("msa: expected NxSxD, got " + shape_str(xs));
    const int64_t N = xs[0], Sq = xs[1], D = xs[2];
    if (heads < 1 || D % heads != 0)
        throw std::invalid_argument("msa: embed dim " + std::to_string(D) +
                                    " not divisible by " + std::to_string(heads) + " heads");
    const int64_t dh = D / heads;

    auto split_heads = [&](Var v) {
        // N x S x D -> (N*heads) x S x dh
        Var r = reshape(t, v, {N, Sq, heads, dh});
        Var pm = permute(t, r, {0, 2, 1, 3});
        return reshape(t, pm, {N * heads, Sq, dh});
    };

    Var q = split_heads(linear(t, x, p.wq, p.bq));
    Var k = split_heads(linear(t, x, p.wk, p.bk));
    Var v = split_heads(linear(t, x, p.wv, p.bv));

    Var kt = permute(t, k, {0, 2, 1});  // (N*heads) x dh x S
    Var logits = scale(t, bmm(t, q, kt), S(1) / std::sqrt(static_cast<S>(dh)));
    Var attn = softmax(t, logits);
    Var ctx = bmm(t, attn, v);  // (N*heads) x S x dh

    Var merged = reshape(t, ctx, {N, heads, Sq, dh});
    merged = permute(t, merged, {0, 2, 1, 3});
    merged = reshape(t, merged, {N, Sq, D});
    return {linear(t, merged, p.wo, p.bo), attn};
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// Mean binary cross-entropy from two-class logits [N x 2] via log-sum-exp.
/// labels[i] in {0, 1} indexes the true class (1 = fake).
template <typename S>
Var bce_with_logits(Tape<S>& t, Var logits, const std::vector<int>& labels) {
    const auto& ls = t.value(logits).shape();
    if (ls.size() != 2 || ls[1] != 2)
        throw dim_error("bce_with_logits: expected Nx2 logits, got " + shape_str(ls));
    const int64_t N = ls[0];
    if (N == 0 || static_cast<int64_t>(labels.size()) != N)
        throw std::invalid_argument("bce_with_logits: need one label per row, nonempty");
    Tensor<S> out({1});
    S acc = 0;
    for (int64_t i = 0; i < N; ++i) {
        const S l0 = t.value(logits)[2 * i], l1 = t.value(logits)[2 * i + 1];
        const S mx = std::max(l0, l1);
        const S lse = mx + std::log(std::exp(l0 - mx) + std::exp(l1 - mx));
        acc += lse - (labels[i] == 1 ? l1 : l0);
    }
    out[0] = acc / static_cast<S>(N);
    return t.record(std::move(out), {logits}, [logits, labels, N](Tape<S>& tp, Var o) {
        if (!tp.requires_grad(logits)) return;
        const S g = tp.grad(o)[0] / static_cast<S>(N);
        for (int64_t i = 0; i < N; ++i) {
            const S l0 = tp.value(logits)[2 * i], l1 = tp.value(logits)[2 * i + 1];
            const S mx = std::max(l0, l1);
            const S e0 = std::exp(l0 - mx), e1 = std::exp(l1 - mx);
            const S p1 = e1 / (e0 + e1);
            tp.grad(logits)[2 * i] += g * ((S(1) - p1) - (labels[i] == 1 ? S(0) : S(1)));
            tp.grad(logits)[2 * i + 1] += g * (p1 - (labels[i] == 1 ? S(1) : S(0)));
        }
    });
}

}  // namespace cvit
