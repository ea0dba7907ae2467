#include "cacheproc/ops.h"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "cacheproc/common.h"

namespace cacheproc::ops {

namespace {

template <class T>
using MatMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <class T>
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

template <class F>
void dispatch(DType dt, F&& f) {
    if (dt == DType::F32) {
        f(float{});
    } else {
        f(double{});
    }
}

template <class T>
std::span<const T> dat(const TensorImpl& x) {
    if constexpr (std::is_same_v<T, float>) {
        return {x.f32.data(), x.f32.size()};
    } else {
        return {x.f64.data(), x.f64.size()};
    }
}

template <class T>
std::span<T> mut(TensorImpl& x) {
    if constexpr (std::is_same_v<T, float>) {
        return {x.f32.data(), x.f32.size()};
    } else {
        return {x.f64.data(), x.f64.size()};
    }
}

// Grad buffers are pre-allocated by Tape::backward for every recorded
// requires_grad tensor, so spans here are never empty when used.
template <class T>
std::span<T> gr(TensorImpl& x) {
    if constexpr (std::is_same_v<T, float>) {
        return {x.grad_f32.data(), x.grad_f32.size()};
    } else {
        return {x.grad_f64.data(), x.grad_f64.size()};
    }
}

void check_finite(const char* op, const Tensor& t) {
    bool ok = true;
    dispatch(t.dtype(), [&](auto tag) {
        using T = decltype(tag);
        for (T v : dat<T>(*t.impl())) {
            if (!std::isfinite(v)) {
                ok = false;
                break;
            }
        }
    });
    if (!ok) {
        throw std::runtime_error(std::string("non-finite value produced by op '") + op + "'");
    }
}

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw std::runtime_error(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                 " vs " + shape_str(b.shape()));
    }
}

void check_same_dtype(const char* op, const Tensor& a, const Tensor& b) {
    if (a.dtype() != b.dtype()) {
        throw std::runtime_error(std::string(op) + ": dtype mismatch " + dtype_name(a.dtype()) +
                                 " vs " + dtype_name(b.dtype()));
    }
}

bool taping(std::initializer_list<const Tensor*> ins) {
    if (!Tape::active()) return false;
    for (const Tensor* t : ins) {
        if (t->requires_grad()) return true;
    }
    return false;
}

using ImplPtr = std::shared_ptr<TensorImpl>;

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape("add", a, b);
    check_same_dtype("add", a, b);
    Tensor out = Tensor::zeros_like(a);
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto av = dat<T>(*a.impl()), bv = dat<T>(*b.impl());
        auto ov = mut<T>(*out.impl());
        for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
    });
    check_finite("add", out);
    if (taping({&a, &b})) {
        out.set_requires_grad(true);
        ImplPtr ai = a.impl(), bi = b.impl(), oi = out.impl();
        Tape::active()->record("add", {ai, bi, oi}, [ai, bi, oi] {
            dispatch(oi->dtype, [&](auto tag) {
                using T = decltype(tag);
                auto og = gr<T>(*oi);
                if (ai->requires_grad) {
                    auto ag = gr<T>(*ai);
                    for (size_t i = 0; i < og.size(); ++i) ag[i] += og[i];
                }
                if (bi->requires_grad) {
                    auto bg = gr<T>(*bi);
                    for (size_t i = 0; i < og.size(); ++i) bg[i] += og[i];
                }
            });
        });
    }
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape("sub", a, b);
    check_same_dtype("sub", a, b);
    Tensor out = Tensor::zeros_like(a);
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto av = dat<T>(*a.impl()), bv = dat<T>(*b.impl());
        auto ov = mut<T>(*out.impl());
        for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
    });
    check_finite("sub", out);
    if (taping({&a, &b})) {
        out.set_requires_grad(true);
        ImplPtr ai = a.impl(), bi = b.impl(), oi = out.impl();
        Tape::active()->record("sub", {ai, bi, oi}, [ai, bi, oi] {
            dispatch(oi->dtype, [&](auto tag) {
                using T = decltype(tag);
                auto og = gr<T>(*oi);
                if (ai->requires_grad) {
                    auto ag = gr<T>(*ai);
                    for (size_t i = 0; i < og.size(); ++i) ag[i] += og[i];
                }
                if (bi->requires_grad) {
                    auto bg = gr<T>(*bi);
                    for (size_t i = 0; i < og.size(); ++i) bg[i] -= og[i];
                }
            });
        });
    }
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape("mul", a, b);
    check_same_dtype("mul", a, b);
    Tensor out = Tensor::zeros_like(a);
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto av = dat<T>(*a.impl()), bv = dat<T>(*b.impl());
        auto ov = mut<T>(*out.impl());
        for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
    });
    check_finite("mul", out);
    if (taping({&a, &b})) {
        out.set_requires_grad(true);
        ImplPtr ai = a.impl(), bi = b.impl(), oi = out.impl();
        Tape::active()->record("mul", {ai, bi, oi}, [ai, bi, oi] {
            dispatch(oi->dtype, [&](auto tag) {
                using T = decltype(tag);
                auto og = gr<T>(*oi);
                auto av = dat<T>(*ai), bv = dat<T>(*bi);
                if (ai->requires_grad) {
                    auto ag = gr<T>(*ai);
                    for (size_t i = 0; i < og.size(); ++i) ag[i] += og[i] * bv[i];
                }
                if (bi->requires_grad) {
                    auto bg = gr<T>(*bi);
                    for (size_t i = 0; i < og.size(); ++i) bg[i] += og[i] * av[i];
                }
            });
        });
    }
    return out;
}

Tensor scale(const Tensor& a, double c) {
    Tensor out = Tensor::zeros_like(a);
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto av = dat<T>(*a.impl());
        auto ov = mut<T>(*out.impl());
        const T cc = static_cast<T>(c);
        for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * cc;
    });
    check_finite("scale", out);
    if (taping({&a})) {
        out.set_requires_grad(true);
        ImplPtr ai = a.impl(), oi = out.impl();
        Tape::active()->record("scale", {ai, oi}, [ai, oi, c] {
            dispatch(oi->dtype, [&](auto tag) {
                using T = decltype(tag);
                auto og = gr<T>(*oi);
                auto ag = gr<T>(*ai);
                const T cc = static_cast<T>(c);
                for (size_t i = 0; i < og.size(); ++i) ag[i] += og[i] * cc;
            });
        });
    }
    return out;
}

Tensor scale_by(const Tensor& a, const Tensor& s) {
    check(s.numel() == 1, "scale_by: scale tensor must have one element, got " +
                              shape_str(s.shape()));
    check_same_dtype("scale_by", a, s);
    Tensor out = Tensor::zeros_like(a);
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto av = dat<T>(*a.impl());
        const T sv = dat<T>(*s.impl())[0];
        auto ov = mut<T>(*out.impl());
        for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * sv;
    });
    check_finite("scale_by", out);
    if (taping({&a, &s})) {
        out.set_requires_grad(true);
        ImplPtr ai = a.impl(), si = s.impl(), oi = out.impl();
        Tape::active()->record("scale_by", {ai, si, oi}, [ai, si, oi] {
            dispatch(oi->dtype, [&](auto tag) {
                using T = decltype(tag);
                auto og = gr<T>(*oi);
                auto av = dat<T>(*ai);
                const T sv = dat<T>(*si)[0];
                if (ai->requires_grad) {
                    auto ag = gr<T>(*ai);
                    for (size_t i = 0; i < og.size(); ++i) ag[i] += og[i] * sv;
                }
                if (si->requires_grad) {
                    T acc = 0;
                    for (size_t i = 0; i < og.size(); ++i) acc += og[i] * av[i];
                    gr<T>(*si)[0] += acc;
                }
            });
        });
    }
    return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    check(a.rank() == 2 && b.rank() == 2, "matmul: operands must be 2-d, got " +
                                              shape_str(a.shape()) + " and " +
                                              shape_str(b.shape()));
    check(a.dim(1) == b.dim(0), "matmul: shape mismatch " + shape_str(a.shape()) + " x " +
                                    shape_str(b.shape()));
    check_same_dtype("matmul", a, b);
    const size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out = Tensor::zeros({m, n}, a.dtype());
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        ConstMatMap<T> am(dat<T>(*a.impl()).data(), m, k);
        ConstMatMap<T> bm(dat<T>(*b.impl()).data(), k, n);
        MatMap<T> om(mut<T>(*out.impl()).data(), m, n);
        om.noalias() = am * bm;
    });
    check_finite("matmul", out);
    if (taping({&a, &b})) {
        out.set_requires_grad(true);
        ImplPtr ai = a.impl(), bi = b.impl(), oi = out.impl();
        Tape::active()->record("matmul", {ai, bi, oi}, [ai, bi, oi, m, k, n] {
            dispatch(oi->dtype, [&](auto tag) {
                using T = decltype(tag);
                ConstMatMap<T> og(gr<T>(*oi).data(), m, n);
                if (ai->requires_grad) {
                    ConstMatMap<T> bm(dat<T>(*bi).data(), k, n);
                    MatMap<T> ag(gr<T>(*ai).data(), m, k);
                    ag.noalias() += og * bm.transpose();
                }
                if (bi->requires_grad) {
                    ConstMatMap<T> am(dat<T>(*ai).data(), m, k);
                    MatMap<T> bg(gr<T>(*bi).data(), k, n);
                    bg.noalias() += am.transpose() * og;
                }
            });
        });
    }
    return out;
}

Tensor transpose(const Tensor& a) {
    check(a.rank() == 2, "transpose: operand must be 2-d, got " + shape_str(a.shape()));
    const size_t m = a.dim(0), n = a.dim(1);
    Tensor out = Tensor::zeros({n, m}, a.dtype());
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto av = dat<T>(*a.impl());
        auto ov = mut<T>(*out.impl());
        for (size_t i = 0; i < m; ++i)
            for (size_t j = 0; j < n; ++j) ov[j * m + i] = av[i * n + j];
    });
    if (taping({&a})) {
        out.set_requires_grad(true);
        ImplPtr ai = a.impl(), oi = out.impl();
        Tape::active()->record("transpose", {ai, oi}, [ai, oi, m, n] {
            dispatch(oi->dtype, [&](auto tag) {
                using T = decltype(tag);
                auto og = gr<T>(*oi);
                auto ag = gr<T>(*ai);
                for (size_t i = 0; i < m; ++i)
                    for (size_t j = 0; j < n; ++j) ag[i * n + j] += og[j * m + i];
            });
        });
    }
    return out;
}

Tensor row_softmax(const Tensor& a) {
    check(a.rank() == 2, "row_softmax: operand must be 2-d, got " + shape_str(a.shape()));
    const size_t m = a.dim(0), n = a.dim(1);
    Tensor out = Tensor::zeros_like(a);
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto av = dat<T>(*a.impl());
        auto ov = mut<T>(*out.impl());
        for (size_t r = 0; r < m; ++r) {
            const T* row = av.data() + r * n;
            T* orow = ov.data() + r * n;
            T mx = row[0];
            for (size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
            T denom = 0;
            for (size_t j = 0; j < n; ++j) {
                orow[j] = std::exp(row[j] - mx);
                denom += orow[j];
            }
            for (size_t j = 0; j < n; ++j) orow[j] /= denom;
        }
    });
    check_finite("row_softmax", out);
    if (taping({&a})) {
        out.set_requires_grad(true);
        ImplPtr ai = a.impl(), oi = out.impl();
        Tape::active()->record("row_softmax", {ai, oi}, [ai, oi, m, n] {
            dispatch(oi->dtype, [&](auto tag) {
                using T = decltype(tag);
                auto og = gr<T>(*oi);
                auto ov = dat<T>(*oi);
                auto ag = gr<T>(*ai);
                for (size_t r = 0; r < m; ++r) {
                    const T* y = ov.data() + r * n;
                    const T* dy = og.data() + r * n;
                    T dot = 0;
                    for (size_t j = 0; j < n; ++j) dot += dy[j] * y[j];
                    for (size_t j = 0; j < n; ++j) ag[r * n + j] += y[j] * (dy[j] - dot);
                }
            });
        });
    }
    return out;
}

Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps) {
    check(x.rank() == 2, "rms_norm: operand must be 2-d, got " + shape_str(x.shape()));
    check(gain.rank() == 1 && gain.dim(0) == x.dim(1),
          "rms_norm: gain shape " + shape_str(gain.shape()) + " does not match rows of " +
              shape_str(x.shape()));
    check_same_dtype("rms_norm", x, gain);
    const size_t m = x.dim(0), n = x.dim(1);
    Tensor out = Tensor::zeros_like(x);
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto xv = dat<T>(*x.impl());
        auto gv = dat<T>(*gain.impl());
        auto ov = mut<T>(*out.impl());
        for (size_t r = 0; r < m; ++r) {
            const T* row = xv.data() + r * n;
            T ss = 0;
            for (size_t j = 0; j < n; ++j) ss += row[j] * row[j];
            const T rinv = T(1) / std::sqrt(ss / static_cast<T>(n) + static_cast<T>(eps));
            for (size_t j = 0; j < n; ++j) ov[r * n + j] = row[j] * rinv * gv[j];
        }
    });
    check_finite("rms_norm", out);
    if (taping({&x, &gain})) {
        out.set_requires_grad(true);
        ImplPtr xi = x.impl(), gi = gain.impl(), oi = out.impl();
        Tape::active()->record("rms_norm", {xi, gi, oi}, [xi, gi, oi, m, n, eps] {
            dispatch(oi->dtype, [&](auto tag) {
                using T = decltype(tag);
                auto og = gr<T>(*oi);
                auto xv = dat<T>(*xi);
                auto gv = dat<T>(*gi);
                for (size_t r = 0; r < m; ++r) {
                    const T* row = xv.data() + r * n;
                    const T* dy = og.data() + r * n;
                    T ss = 0;
                    for (size_t j = 0; j < n; ++j) ss += row[j] * row[j];
                    const T rinv = T(1) / std::sqrt(ss / static_cast<T>(n) + static_cast<T>(eps));
                    if (xi->requires_grad) {
                        // dx_j = r*g_j*dy_j - (r^3 x_j / n) * sum_i dy_i g_i x_i
                        T dot = 0;
                        for (size_t j = 0; j < n; ++j) dot += dy[j] * gv[j] * row[j];
                        auto xg = gr<T>(*xi);
                        const T r3n = rinv * rinv * rinv / static_cast<T>(n);
                        for (size_t j = 0; j < n; ++j) {
                            xg[r * n + j] += rinv * gv[j] * dy[j] - r3n * row[j] * dot;
                        }
                    }
                    if (gi->requires_grad) {
                        auto gg = gr<T>(*gi);
                        for (size_t j = 0; j < n; ++j) gg[j] += dy[j] * row[j] * rinv;
                    }
                }
            });
        });
    }
    return out;
}

Tensor silu(const Tensor& x) {
    Tensor out = Tensor::zeros_like(x);
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto xv = dat<T>(*x.impl());
        auto ov = mut<T>(*out.impl());
        for (size_t i = 0; i < ov.size(); ++i) {
            const T s = T(1) / (T(1) + std::exp(-xv[i]));
            ov[i] = xv[i] * s;
        }
    });
    check_finite("silu", out);
    if (taping({&x})) {
        out.set_requires_grad(true);
        ImplPtr xi = x.impl(), oi = out.impl();
        Tape::active()->record("silu", {xi, oi}, [xi, oi] {
            dispatch(oi->dtype, [&](auto tag) {
                using T = decltype(tag);
                auto og = gr<T>(*oi);
                auto xv = dat<T>(*xi);
                auto xg = gr<T>(*xi);
                for (size_t i = 0; i < og.size(); ++i) {
                    const T s = T(1) / (T(1) + std::exp(-xv[i]));
                    xg[i] += og[i] * s * (T(1) + xv[i] * (T(1) - s));
                }
            });
        });
    }
    return out;
}

Tensor sigmoid(const Tensor& x) {
    Tensor out = Tensor::zeros_like(x);
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto xv = dat<T>(*x.impl());
        auto ov = mut<T>(*out.impl());
        for (size_t i = 0; i < ov.size(); ++i) ov[i] = T(1) / (T(1) + std::exp(-xv[i]));
    });
    check_finite("sigmoid", out);
    if (taping({&x})) {
        out.set_requires_grad(true);
        ImplPtr xi = x.impl(), oi = out.impl();
        Tape::active()->record("sigmoid", {xi, oi}, [xi, oi] {
            dispatch(oi->dtype, [&](auto tag) {
                using T = decltype(tag);
                auto og = gr<T>(*oi);
                auto ov = dat<T>(*oi);
                auto xg = gr<T>(*xi);
                for (size_t i = 0; i < og.size(); ++i) {
                    xg[i] += og[i] * ov[i] * (T(1) - ov[i]);
                }
            });
        });
    }
    return out;
}

Tensor concat_rows(const std::vector<Tensor>& xs) {
    check(!xs.empty(), "concat_rows: no inputs");
    const size_t n = xs[0].dim(1);
    size_t rows = 0;
    for (const Tensor& t : xs) {
        check(t.rank() == 2 && t.dim(1) == n, "concat_rows: column mismatch " +
                                                  shape_str(t.shape()) + " vs " +
                                                  shape_str(xs[0].shape()));
        check_same_dtype("concat_rows", xs[0], t);
        rows += t.dim(0);
    }
    Tensor out = Tensor::zeros({rows, n}, xs[0].dtype());
    dispatch(out.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto ov = mut<T>(*out.impl());
        size_t off = 0;
        for (const Tensor& t : xs) {
            auto tv = dat<T>(*t.impl());
            std::copy(tv.begin(), tv.end(), ov.begin() + off);
            off += tv.size();
        }
    });
    bool any_grad = false;
    for (const Tensor& t : xs) any_grad |= t.requires_grad();
    if (Tape::active() && any_grad) {
        out.set_requires_grad(true);
        std::vector<ImplPtr> impls;
        for (const Tensor& t : xs) impls.push_back(t.impl());
        ImplPtr oi = out.impl();
        std::vector<ImplPtr> involved = impls;
        involved.push_back(oi);
        Tape::active()->record("concat_rows", involved, [impls, oi] {
            dispatch(oi->dtype, [&](auto tag) {
                using T = decltype(tag);
                auto og = gr<T>(*oi);
                size_t off = 0;
                for (const ImplPtr& xi : impls) {
                    const size_t len = xi->numel();
                    if (xi->requires_grad) {
                        auto xg = gr<T>(*xi);
                        for (size_t i = 0; i < len; ++i) xg[i] += og[off + i];
                    }
                    off += len;
                }
            });
        });
    }
    return out;
}

Tensor concat_cols(const std::vector<Tensor>& xs) {
    check(!xs.empty(), "concat_cols: no inputs");
    const size_t m = xs[0].dim(0);
    size_t cols = 0;
    for (const Tensor& t : xs) {
        check(t.rank() == 2 && t.dim(0) == m, "concat_cols: row mismatch " +
                                                  shape_str(t.shape()) + " vs " +
                                                  shape_str(xs[0].shape()));
        check_same_dtype("concat_cols", xs[0], t);
        cols += t.dim(1);
    }
    Tensor out = Tensor::zeros({m, cols}, xs[0].dtype());
    dispatch(out.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto ov = mut<T>(*out.impl());
        size_t coff = 0;
        for (const Tensor& t : xs) {
            auto tv = dat<T>(*t.impl());
            const size_t tn = t.dim(1);
            for (size_t r = 0; r < m; ++r)
                for (size_t j = 0; j < tn; ++j) ov[r * cols + coff + j] = tv[r * tn + j];
            coff += tn;
        }
    });
    bool any_grad = false;
    for (const Tensor& t : xs) any_grad |= t.requires_grad();
    if (Tape::active() && any_grad) {
        out.set_requires_grad(true);
        std::vector<ImplPtr> impls;
        std::vector<size_t> widths;
        for (const Tensor& t : xs) {
            impls.push_back(t.impl());
            widths.push_back(t.dim(1));
        }
        ImplPtr oi = out.impl();
        std::vector<ImplPtr> involved = impls;
        involved.push_back(oi);
        Tape::active()->record("concat_cols", involved, [impls, widths, oi, m, cols] {
            dispatch(oi->dtype, [&](auto tag) {
                using T = decltype(tag);
                auto og = gr<T>(*oi);
                size_t coff = 0;
                for (size_t t = 0; t < impls.size(); ++t) {
                    const size_t tn = widths[t];
                    if (impls[t]->requires_grad) {
                        auto xg = gr<T>(*impls[t]);
                        for (size_t r = 0; r < m; ++r)
                            for (size_t j = 0; j < tn; ++j)
                                xg[r * tn + j] += og[r * cols + coff + j];
                    }
                    coff += tn;
                }
            });
        });
    }
    return out;
}

Tensor slice_rows(const Tensor& x, size_t r0, size_t r1) {
    check(x.rank() == 2, "slice_rows: operand must be 2-d, got " + shape_str(x.shape()));
    check(r0 < r1 && r1 <= x.dim(0), "slice_rows: range [" + std::to_string(r0) + "," +
                                         std::to_string(r1) + ") out of " +
                                         shape_str(x.shape()));
    const size_t n = x.dim(1), m = r1 - r0;
    Tensor out = Tensor::zeros({m, n}, x.dtype());
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto xv = dat<T>(*x.impl());
        auto ov = mut<T>(*out.impl());
        std::copy(xv.begin() + r0 * n, xv.begin() + r1 * n, ov.begin());
    });
    if (taping({&x})) {
        out.set_requires_grad(true);
        ImplPtr xi = x.impl(), oi = out.impl();
        Tape::active()->record("slice_rows", {xi, oi}, [xi, oi, r0, n, m] {
            dispatch(oi->dtype, [&](auto tag) {
                using T = decltype(tag);
                auto og = gr<T>(*oi);
                auto xg = gr<T>(*xi);
                for (size_t i = 0; i < m * n; ++i) xg[r0 * n + i] += og[i];
            });
        });
    }
    return out;
}

Tensor slice_cols(const Tensor& x, size_t c0, size_t c1) {
    check(x.rank() == 2, "slice_cols: operand must be 2-d, got " + shape_str(x.shape()));
    check(c0 < c1 && c1 <= x.dim(1), "slice_cols: range [" + std::to_string(c0) + "," +
                                         std::to_string(c1) + ") out of " +
                                         shape_str(x.shape()));
    const size_t m = x.dim(0), n = x.dim(1), w = c1 - c0;
    Tensor out = Tensor::zeros({m, w}, x.dtype());
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto xv = dat<T>(*x.impl());
        auto ov = mut<T>(*out.impl());
        for (size_t r = 0; r < m; ++r)
            for (size_t j = 0; j < w; ++j) ov[r * w + j] = xv[r * n + c0 + j];
    });
    if (taping({&x})) {
        out.set_requires_grad(true);
        ImplPtr xi = x.impl(), oi = out.impl();
        Tape::active()->record("slice_cols", {xi, oi}, [xi, oi, c0, m, n, w] {
            dispatch(oi->dtype, [&](auto tag) {
                using T = decltype(tag);
                auto og = gr<T>(*oi);
                auto xg = gr<T>(*xi);
                for (size_t r = 0; r < m; ++r)
                    for (size_t j = 0; j < w; ++j) xg[r * n + c0 + j] += og[r * w + j];
            });
        });
    }
    return out;
}

Tensor gather_rows(const Tensor& x, const std::vector<size_t>& idx) {
    check(x.rank() == 2, "gather_rows: operand must be 2-d, got " + shape_str(x.shape()));
    check(!idx.empty(), "gather_rows: empty index list");
    const size_t n = x.dim(1);
    for (size_t i : idx) {
        check(i < x.dim(0), "gather_rows: index " + std::to_string(i) + " out of " +
                                shape_str(x.shape()));
    }
    Tensor out = Tensor::zeros({idx.size(), n}, x.dtype());
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto xv = dat<T>(*x.impl());
        auto ov = mut<T>(*out.impl());
        for (size_t r = 0; r < idx.size(); ++r)
            std::copy(xv.begin() + idx[r] * n, xv.begin() + (idx[r] + 1) * n, ov.begin() + r * n);
    });
    if (taping({&x})) {
        out.set_requires_grad(true);
        ImplPtr xi = x.impl(), oi = out.impl();
        Tape::active()->record("gather_rows", {xi, oi}, [xi, oi, idx, n] {
            dispatch(oi->dtype, [&](auto tag) {
                using T = decltype(tag);
                auto og = gr<T>(*oi);
                auto xg = gr<T>(*xi);
                for (size_t r = 0; r < idx.size(); ++r)
                    for (size_t j = 0; j < n; ++j) xg[idx[r] * n + j] += og[r * n + j];
            });
        });
    }
    return out;
}

Tensor scatter_rows(const Tensor& x, const std::vector<size_t>& idx, const Tensor& rows) {
    check(x.rank() == 2 && rows.rank() == 2, "scatter_rows: operands must be 2-d");
    check(rows.dim(0) == idx.size() && rows.dim(1) == x.dim(1),
          "scatter_rows: rows " + shape_str(rows.shape()) + " misaligned with " +
              std::to_string(idx.size()) + " indices into " + shape_str(x.shape()));
    check_same_dtype("scatter_rows", x, rows);
    std::unordered_set<size_t> seen;
    for (size_t i : idx) {
        check(i < x.dim(0), "scatter_rows: index " + std::to_string(i) + " out of " +
                                shape_str(x.shape()));
        check(seen.insert(i).second, "scatter_rows: duplicate index " + std::to_string(i));
    }
    const size_t n = x.dim(1);
    Tensor out = x.clone();
    out.set_requires_grad(false);
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto rv = dat<T>(*rows.impl());
        auto ov = mut<T>(*out.impl());
        for (size_t r = 0; r < idx.size(); ++r)
            std::copy(rv.begin() + r * n, rv.begin() + (r + 1) * n, ov.begin() + idx[r] * n);
    });
    if (taping({&x, &rows})) {
        out.set_requires_grad(true);
        ImplPtr xi = x.impl(), ri = rows.impl(), oi = out.impl();
        Tape::active()->record("scatter_rows", {xi, ri, oi}, [xi, ri, oi, idx, n] {
            dispatch(oi->dtype, [&](auto tag) {
                using T = decltype(tag);
                auto og = gr<T>(*oi);
                if (ri->requires_grad) {
                    auto rg = gr<T>(*ri);
                    for (size_t r = 0; r < idx.size(); ++r)
                        for (size_t j = 0; j < n; ++j) rg[r * n + j] += og[idx[r] * n + j];
                }
                if (xi->requires_grad) {
                    std::unordered_set<size_t> replaced(idx.begin(), idx.end());
                    auto xg = gr<T>(*xi);
                    const size_t m = xi->numel() / n;
                    for (size_t r = 0; r < m; ++r) {
                        if (replaced.count(r)) continue;
                        for (size_t j = 0; j < n; ++j) xg[r * n + j] += og[r * n + j];
                    }
                }
            });
        });
    }
    return out;
}

Tensor reshape(const Tensor& x, std::vector<size_t> shape) {
    check(shape_numel(shape) == x.numel(), "reshape: " + shape_str(x.shape()) +
                                               " cannot view as " + shape_str(shape));
    Tensor out = Tensor::zeros(shape, x.dtype());
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto xv = dat<T>(*x.impl());
        auto ov = mut<T>(*out.impl());
        std::copy(xv.begin(), xv.end(), ov.begin());
    });
    if (taping({&x})) {
        out.set_requires_grad(true);
        ImplPtr xi = x.impl(), oi = out.impl();
        Tape::active()->record("reshape", {xi, oi}, [xi, oi] {
            dispatch(oi->dtype, [&](auto tag) {
                using T = decltype(tag);
                auto og = gr<T>(*oi);
                auto xg = gr<T>(*xi);
                for (size_t i = 0; i < og.size(); ++i) xg[i] += og[i];
            });
        });
    }
    return out;
}

Tensor embedding(const Tensor& table, const std::vector<int>& ids) {
    check(table.rank() == 2, "embedding: table must be 2-d, got " + shape_str(table.shape()));
    check(!ids.empty(), "embedding: empty id list");
    const size_t v = table.dim(0), d = table.dim(1);
    for (int id : ids) {
        check(id >= 0 && static_cast<size_t>(id) < v,
              "embedding: token id " + std::to_string(id) + " out of vocabulary of size " +
                  std::to_string(v));
    }
    Tensor out = Tensor::zeros({ids.size(), d}, table.dtype());
    dispatch(table.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto tv = dat<T>(*table.impl());
        auto ov = mut<T>(*out.impl());
        for (size_t r = 0; r < ids.size(); ++r)
            std::copy(tv.begin() + ids[r] * d, tv.begin() + (ids[r] + 1) * d, ov.begin() + r * d);
    });
    if (taping({&table})) {
        out.set_requires_grad(true);
        ImplPtr ti = table.impl(), oi = out.impl();
        Tape::active()->record("embedding", {ti, oi}, [ti, oi, ids, d] {
            dispatch(oi->dtype, [&](auto tag) {
                using T = decltype(tag);
                auto og = gr<T>(*oi);
                auto tg = gr<T>(*ti);
                for (size_t r = 0; r < ids.size(); ++r)
                    for (size_t j = 0; j < d; ++j)
                        tg[static_cast<size_t>(ids[r]) * d + j] += og[r * d + j];
            });
        });
    }
    return out;
}

namespace {
// Rotates (or inverse-rotates) per-head channel pairs in place.
template <class T>
void rope_apply(std::span<T> buf, size_t rows, size_t heads, size_t head_dim, size_t first_pos,
                double base, bool inverse) {
    const size_t width = heads * head_dim;
    for (size_t r = 0; r < rows; ++r) {
        const double pos = static_cast<double>(first_pos + r);
        for (size_t i = 0; i < head_dim / 2; ++i) {
            const double theta =
                pos * std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
            const T c = static_cast<T>(std::cos(theta));
            const T s = static_cast<T>(inverse ? -std::sin(theta) : std::sin(theta));
            for (size_t h = 0; h < heads; ++h) {
                T& a = buf[r * width + h * head_dim + 2 * i];
                T& b = buf[r * width + h * head_dim + 2 * i + 1];
                const T a0 = a, b0 = b;
                a = a0 * c - b0 * s;
                b = a0 * s + b0 * c;
            }
        }
    }
}
}  // namespace

Tensor rope(const Tensor& x, size_t first_pos, size_t heads, double base) {
    check(x.rank() == 2, "rope: operand must be 2-d, got " + shape_str(x.shape()));
    check(heads > 0 && x.dim(1) % heads == 0,
          "rope: width " + std::to_string(x.dim(1)) + " not divisible by " +
              std::to_string(heads) + " heads");
    const size_t head_dim = x.dim(1) / heads;
    check(head_dim % 2 == 0, "rope: head dim " + std::to_string(head_dim) + " must be even");
    const size_t rows = x.dim(0);
    Tensor out = x.clone();
    out.set_requires_grad(false);
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        rope_apply<T>(mut<T>(*out.impl()), rows, heads, head_dim, first_pos, base, false);
    });
    check_finite("rope", out);
    if (taping({&x})) {
        out.set_requires_grad(true);
        ImplPtr xi = x.impl(), oi = out.impl();
        Tape::active()->record("rope", {xi, oi}, [xi, oi, rows, heads, head_dim, first_pos, base] {
            dispatch(oi->dtype, [&](auto tag) {
                using T = decltype(tag);
                auto og = gr<T>(*oi);
                std::vector<T> tmp(og.begin(), og.end());
                rope_apply<T>(std::span<T>(tmp), rows, heads, head_dim, first_pos, base, true);
                auto xg = gr<T>(*xi);
                for (size_t i = 0; i < tmp.size(); ++i) xg[i] += tmp[i];
            });
        });
    }
    return out;
}

Tensor cross_entropy_with_logits(const Tensor& logits, const std::vector<int>& targets) {
    check(logits.rank() == 2, "cross_entropy: logits must be 2-d, got " +
                                  shape_str(logits.shape()));
    check(targets.size() == logits.dim(0),
          "cross_entropy: " + std::to_string(targets.size()) + " targets for " +
              shape_str(logits.shape()) + " logits");
    const size_t m = logits.dim(0), v = logits.dim(1);
    for (int t : targets) {
        check(t >= 0 && static_cast<size_t>(t) < v,
              "cross_entropy: target id " + std::to_string(t) + " out of vocabulary of size " +
                  std::to_string(v));
    }
    Tensor out = Tensor::zeros({m}, logits.dtype());
    dispatch(logits.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto lv = dat<T>(*logits.impl());
        auto ov = mut<T>(*out.impl());
        for (size_t r = 0; r < m; ++r) {
            const T* row = lv.data() + r * v;
            T mx = row[0];
            for (size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
            T denom = 0;
            for (size_t j = 0; j < v; ++j) denom += std::exp(row[j] - mx);
            ov[r] = mx + std::log(denom) - row[targets[r]];
        }
    });
    check_finite("cross_entropy", out);
    if (taping({&logits})) {
        out.set_requires_grad(true);
        ImplPtr li = logits.impl(), oi = out.impl();
        Tape::active()->record("cross_entropy", {li, oi}, [li, oi, targets, m, v] {
            dispatch(oi->dtype, [&](auto tag) {
                using T = decltype(tag);
                auto og = gr<T>(*oi);
                auto lv = dat<T>(*li);
                auto lg = gr<T>(*li);
                for (size_t r = 0; r < m; ++r) {
                    const T* row = lv.data() + r * v;
                    T mx = row[0];
                    for (size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
                    T denom = 0;
                    for (size_t j = 0; j < v; ++j) denom += std::exp(row[j] - mx);
                    for (size_t j = 0; j < v; ++j) {
                        const T soft = std::exp(row[j] - mx) / denom;
                        const T delta = (static_cast<size_t>(targets[r]) == j) ? T(1) : T(0);
                        lg[r * v + j] += og[r] * (soft - delta);
                    }
                }
            });
        });
    }
    return out;
}

Tensor sum(const Tensor& x) {
    Tensor out = Tensor::zeros({1}, x.dtype());
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto xv = dat<T>(*x.impl());
        T acc = 0;
        for (T v : xv) acc += v;
        mut<T>(*out.impl())[0] = acc;
    });
    check_finite("sum", out);
    if (taping({&x})) {
        out.set_requires_grad(true);
        ImplPtr xi = x.impl(), oi = out.impl();
        Tape::active()->record("sum", {xi, oi}, [xi, oi] {
            dispatch(oi->dtype, [&](auto tag) {
                using T = decltype(tag);
                const T g = gr<T>(*oi)[0];
                auto xg = gr<T>(*xi);
                for (size_t i = 0; i < xg.size(); ++i) xg[i] += g;
            });
        });
    }
    return out;
}

Tensor mean(const Tensor& x) {
    const double n = static_cast<double>(x.numel());
    Tensor s = sum(x);
    return scale(s, 1.0 / n);
}

Tensor detach(const Tensor& x) {
    Tensor out = x.clone();
    out.set_requires_grad(false);
    return out;
}

size_t argmax_row(const Tensor& t, size_t row) {
    check(t.rank() == 2 && row < t.dim(0), "argmax_row: bad row");
    const size_t n = t.dim(1);
    size_t best = 0;
    double best_v = t.at2(row, 0);
    for (size_t j = 1; j < n; ++j) {
        const double v = t.at2(row, j);
        if (v > best_v) {  // strict: ties keep the lowest index
            best_v = v;
            best = j;
        }
    }
    return best;
}

}  // namespace cacheproc::ops
