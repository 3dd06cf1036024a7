#include "orup/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace orup {

namespace {

using ImplPtr = std::shared_ptr<TensorImpl>;

Shape contiguous_strides(const Shape& shape) {
    Shape strides(shape.size(), 1);
    for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
    return strides;
}

// Walks every index of `extent` in row-major order, tracking the linear
// offsets into two operands with the given strides.
template <class F>
void strided_for_each(const Shape& extent, const Shape& sa, const Shape& sb, F&& f) {
    const std::size_t total = numel_of(extent);
    const std::size_t nd = extent.size();
    if (nd == 0) {
        f(std::size_t{0}, std::size_t{0}, std::size_t{0});
        return;
    }
    std::vector<std::size_t> idx(nd, 0);
    std::size_t ia = 0;
    std::size_t ib = 0;
    for (std::size_t o = 0; o < total; ++o) {
        f(o, ia, ib);
        std::size_t k = nd - 1;
        ++idx[k];
        ia += sa[k];
        ib += sb[k];
        while (idx[k] == extent[k] && k > 0) {
            ia -= sa[k] * extent[k];
            ib -= sb[k] * extent[k];
            idx[k] = 0;
            --k;
            ++idx[k];
            ia += sa[k];
            ib += sb[k];
        }
    }
}

// Strides of `shape` viewed against `target`, with 0 where shape has extent 1.
Shape broadcast_strides(const Shape& shape, const Shape& target) {
    Shape strides = contiguous_strides(shape);
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (shape[i] == 1 && target[i] != 1) strides[i] = 0;
    }
    return strides;
}

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
    if (a.size() != b.size()) {
        throw DimensionError(std::string(op) + ": rank mismatch " + shape_str(a) + " vs " + shape_str(b));
    }
    Shape out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i] == b[i] || b[i] == 1) {
            out[i] = a[i];
        } else if (a[i] == 1) {
            out[i] = b[i];
        } else {
            throw DimensionError(std::string(op) + ": incompatible shapes " + shape_str(a) + " vs " + shape_str(b));
        }
    }
    return out;
}

bool any_requires_grad(const std::vector<Tensor>& parents) {
    return std::any_of(parents.begin(), parents.end(), [](const Tensor& t) { return t.requires_grad(); });
}

// Builds the output tensor and records the node when a gradient is needed.
// `make_backward` receives the output impl and returns the closure.
template <class MakeBackward>
Tensor finish(const char* name, Shape shape, std::vector<double> data, const std::vector<Tensor>& parents,
              MakeBackward&& make_backward) {
    for (double v : data) {
        if (!std::isfinite(v)) throw NonFiniteError(std::string("non-finite value produced by ") + name);
    }
    Tensor out(std::move(shape), std::move(data));
    Tape* tape = active_tape();
    if (tape && any_requires_grad(parents)) {
        out.set_requires_grad(true);
        TapeNode node;
        node.output = out.impl();
        for (const Tensor& p : parents) node.parents.push_back(p.impl());
        node.backward = make_backward(out.impl().get());
        tape->record(std::move(node));
    }
    return out;
}

std::vector<double>* grad_of(const ImplPtr& p) { return p->requires_grad ? &p->grad_buffer() : nullptr; }

template <class Fwd, class Deriv>
Tensor unary(const char* name, const Tensor& a, Fwd fwd, Deriv deriv) {
    const auto in = a.data();
    std::vector<double> out(in.size());
    for (std::size_t i = 0; i < in.size(); ++i) out[i] = fwd(in[i]);
    ImplPtr pa = a.impl();
    return finish(name, a.shape(), std::move(out), {a}, [pa, deriv](TensorImpl* o) {
        return [pa, deriv, o]() {
            auto* ga = grad_of(pa);
            if (!ga) return;
            for (std::size_t i = 0; i < o->grad.size(); ++i) {
                (*ga)[i] += o->grad[i] * deriv(pa->data[i], o->data[i]);
            }
        };
    });
}

enum class BinOp { Add, Sub, Mul, Div };

Tensor binary(const char* name, BinOp op, const Tensor& a, const Tensor& b) {
    const Shape out_shape = broadcast_shape(a.shape(), b.shape(), name);
    const Shape sa = broadcast_strides(a.shape(), out_shape);
    const Shape sb = broadcast_strides(b.shape(), out_shape);
    std::vector<double> out(numel_of(out_shape));
    const double* da = a.data().data();
    const double* db = b.data().data();
    strided_for_each(out_shape, sa, sb, [&](std::size_t o, std::size_t ia, std::size_t ib) {
        switch (op) {
            case BinOp::Add: out[o] = da[ia] + db[ib]; break;
            case BinOp::Sub: out[o] = da[ia] - db[ib]; break;
            case BinOp::Mul: out[o] = da[ia] * db[ib]; break;
            case BinOp::Div: out[o] = da[ia] / db[ib]; break;
        }
    });
    ImplPtr pa = a.impl();
    ImplPtr pb = b.impl();
    return finish(name, out_shape, std::move(out), {a, b}, [=](TensorImpl* o) {
        return [=]() {
            auto* ga = grad_of(pa);
            auto* gb = grad_of(pb);
            const double* xa = pa->data.data();
            const double* xb = pb->data.data();
            strided_for_each(out_shape, sa, sb, [&](std::size_t k, std::size_t ia, std::size_t ib) {
                const double g = o->grad[k];
                switch (op) {
                    case BinOp::Add:
                        if (ga) (*ga)[ia] += g;
                        if (gb) (*gb)[ib] += g;
                        break;
                    case BinOp::Sub:
                        if (ga) (*ga)[ia] += g;
                        if (gb) (*gb)[ib] -= g;
                        break;
                    case BinOp::Mul:
                        if (ga) (*ga)[ia] += g * xb[ib];
                        if (gb) (*gb)[ib] += g * xa[ia];
                        break;
                    case BinOp::Div:
                        if (ga) (*ga)[ia] += g / xb[ib];
                        if (gb) (*gb)[ib] -= g * xa[ia] / (xb[ib] * xb[ib]);
                        break;
                }
            });
        };
    });
}

// C[m,n] += op(A) * op(B). `ta`: A stored [k,m]; `tb`: B stored [n,k].
void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, const double* A, const double* B,
          double* C) {
    if (!ta && !tb) {
        for (std::size_t i = 0; i < m; ++i) {
            double* c = C + i * n;
            for (std::size_t p = 0; p < k; ++p) {
                const double av = A[i * k + p];
                const double* b = B + p * n;
                for (std::size_t j = 0; j < n; ++j) c[j] += av * b[j];
            }
        }
    } else if (!ta && tb) {
        for (std::size_t i = 0; i < m; ++i) {
            const double* a = A + i * k;
            for (std::size_t j = 0; j < n; ++j) {
                const double* b = B + j * k;
                double acc = 0.0;
                for (std::size_t p = 0; p < k; ++p) acc += a[p] * b[p];
                C[i * n + j] += acc;
            }
        }
    } else if (ta && !tb) {
        for (std::size_t p = 0; p < k; ++p) {
            const double* b = B + p * n;
            for (std::size_t i = 0; i < m; ++i) {
                const double av = A[p * m + i];
                double* c = C + i * n;
                for (std::size_t j = 0; j < n; ++j) c[j] += av * b[j];
            }
        }
    } else {
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                double acc = 0.0;
                for (std::size_t p = 0; p < k; ++p) acc += A[p * m + i] * B[j * k + p];
                C[i * n + j] += acc;
            }
        }
    }
}

void check_dims(const Tensor& x, const DimSet& dims, const char* op) {
    for (std::size_t d : dims) {
        if (d >= x.ndim()) {
            throw DimensionError(std::string(op) + ": dim " + std::to_string(d) + " invalid for " +
                                 shape_str(x.shape()));
        }
    }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary("add", BinOp::Add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary("sub", BinOp::Sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary("mul", BinOp::Mul, a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return binary("div", BinOp::Div, a, b); }

Tensor add_scalar(const Tensor& a, double c) {
    return unary("add_scalar", a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& a, double c) {
    return unary("mul_scalar", a, [c](double x) { return x * c; }, [c](double, double) { return c; });
}

Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

Tensor exp(const Tensor& a) {
    return unary("exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
    return unary("log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor sqrt(const Tensor& a) {
    return unary("sqrt", a, [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}

Tensor tanh(const Tensor& a) {
    return unary("tanh", a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor sin(const Tensor& a) {
    return unary("sin", a, [](double x) { return std::sin(x); }, [](double x, double) { return std::cos(x); });
}

Tensor cos(const Tensor& a) {
    return unary("cos", a, [](double x) { return std::cos(x); }, [](double x, double) { return -std::sin(x); });
}

Tensor square(const Tensor& a) {
    return unary("square", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor relu(const Tensor& a) {
    return unary("relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
                 [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& a) {
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    return unary(
        "gelu", a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
        [inv_sqrt_2pi](double x, double) {
            return 0.5 * (1.0 + std::erf(x * inv_sqrt2)) + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
        });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    const Shape& as = a.shape();
    const Shape& bs = b.shape();
    std::size_t batch = 1;
    std::size_t m = 0, k = 0, n = 0;
    Shape out_shape;
    if (as.size() == 2 && bs.size() == 2) {
        m = as[0], k = as[1], n = bs[1];
        if (bs[0] != k) throw DimensionError("matmul: inner dims " + shape_str(as) + " x " + shape_str(bs));
        out_shape = {m, n};
    } else if (as.size() == 3 && bs.size() == 3) {
        batch = as[0], m = as[1], k = as[2], n = bs[2];
        if (bs[0] != batch || bs[1] != k) {
            throw DimensionError("matmul: batched dims " + shape_str(as) + " x " + shape_str(bs));
        }
        out_shape = {batch, m, n};
    } else {
        throw DimensionError("matmul expects rank 2 or 3 operands, got " + shape_str(as) + " x " + shape_str(bs));
    }
    std::vector<double> out(batch * m * n, 0.0);
    const double* da = a.data().data();
    const double* db = b.data().data();
    for (std::size_t q = 0; q < batch; ++q) {
        gemm(false, false, m, n, k, da + q * m * k, db + q * k * n, out.data() + q * m * n);
    }
    ImplPtr pa = a.impl();
    ImplPtr pb = b.impl();
    return finish("matmul", out_shape, std::move(out), {a, b}, [=](TensorImpl* o) {
        return [=]() {
            auto* ga = grad_of(pa);
            auto* gb = grad_of(pb);
            for (std::size_t q = 0; q < batch; ++q) {
                const double* g = o->grad.data() + q * m * n;
                if (ga) gemm(false, true, m, k, n, g, pb->data.data() + q * k * n, ga->data() + q * m * k);
                if (gb) gemm(true, false, k, n, m, pa->data.data() + q * m * k, g, gb->data() + q * k * n);
            }
        };
    });
}

Tensor reduce_sum(const Tensor& x, const DimSet& dims, bool keepdim) {
    check_dims(x, dims, "reduce_sum");
    if (dims.empty()) return x;
    const Shape in_shape = x.shape();
    Shape kept = in_shape;
    for (std::size_t d : dims) kept[d] = 1;
    const Shape s_in = contiguous_strides(in_shape);
    const Shape s_out = broadcast_strides(kept, in_shape);
    std::vector<double> out(numel_of(kept), 0.0);
    const double* dx = x.data().data();
    strided_for_each(in_shape, s_in, s_out, [&](std::size_t, std::size_t i, std::size_t o) { out[o] += dx[i]; });
    Shape out_shape;
    if (keepdim) {
        out_shape = kept;
    } else {
        for (std::size_t i = 0; i < in_shape.size(); ++i) {
            if (std::find(dims.begin(), dims.end(), i) == dims.end()) out_shape.push_back(in_shape[i]);
        }
        if (out_shape.empty()) out_shape = {1};
    }
    ImplPtr px = x.impl();
    return finish("reduce_sum", out_shape, std::move(out), {x}, [=](TensorImpl* o) {
        return [=]() {
            auto* gx = grad_of(px);
            if (!gx) return;
            strided_for_each(in_shape, s_in, s_out,
                             [&](std::size_t, std::size_t i, std::size_t k) { (*gx)[i] += o->grad[k]; });
        };
    });
}

Tensor reduce_mean(const Tensor& x, const DimSet& dims, bool keepdim) {
    check_dims(x, dims, "reduce_mean");
    std::size_t count = 1;
    for (std::size_t d : dims) count *= x.shape()[d];
    return mul_scalar(reduce_sum(x, dims, keepdim), 1.0 / static_cast<double>(count));
}

Tensor sum_all(const Tensor& x) {
    DimSet all(x.ndim());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    return reshape(reduce_sum(x, all, false), {1});
}

Tensor softmax_last(const Tensor& x) {
    const std::size_t d = x.shape().back();
    const std::size_t rows = x.numel() / d;
    const auto in = x.data();
    std::vector<double> out(in.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xi = in.data() + r * d;
        double* yi = out.data() + r * d;
        const double mx = *std::max_element(xi, xi + d);
        double z = 0.0;
        for (std::size_t j = 0; j < d; ++j) z += (yi[j] = std::exp(xi[j] - mx));
        for (std::size_t j = 0; j < d; ++j) yi[j] /= z;
    }
    ImplPtr px = x.impl();
    return finish("softmax", x.shape(), std::move(out), {x}, [=](TensorImpl* o) {
        return [=]() {
            auto* gx = grad_of(px);
            if (!gx) return;
            for (std::size_t r = 0; r < rows; ++r) {
                const double* y = o->data.data() + r * d;
                const double* g = o->grad.data() + r * d;
                double dot = 0.0;
                for (std::size_t j = 0; j < d; ++j) dot += g[j] * y[j];
                for (std::size_t j = 0; j < d; ++j) (*gx)[r * d + j] += y[j] * (g[j] - dot);
            }
        };
    });
}

Tensor log_softmax_last(const Tensor& x) {
    const std::size_t d = x.shape().back();
    const std::size_t rows = x.numel() / d;
    const auto in = x.data();
    std::vector<double> out(in.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xi = in.data() + r * d;
        const double mx = *std::max_element(xi, xi + d);
        double z = 0.0;
        for (std::size_t j = 0; j < d; ++j) z += std::exp(xi[j] - mx);
        const double lse = mx + std::log(z);
        for (std::size_t j = 0; j < d; ++j) out[r * d + j] = xi[j] - lse;
    }
    ImplPtr px = x.impl();
    return finish("log_softmax", x.shape(), std::move(out), {x}, [=](TensorImpl* o) {
        return [=]() {
            auto* gx = grad_of(px);
            if (!gx) return;
            for (std::size_t r = 0; r < rows; ++r) {
                const double* y = o->data.data() + r * d;
                const double* g = o->grad.data() + r * d;
                double gsum = 0.0;
                for (std::size_t j = 0; j < d; ++j) gsum += g[j];
                for (std::size_t j = 0; j < d; ++j) (*gx)[r * d + j] += g[j] - std::exp(y[j]) * gsum;
            }
        };
    });
}

Tensor layer_norm_last(const Tensor& x, double eps) {
    const std::size_t d = x.shape().back();
    const std::size_t rows = x.numel() / d;
    const auto in = x.data();
    std::vector<double> out(in.size());
    std::vector<double> inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xi = in.data() + r * d;
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += xi[j];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (xi[j] - mean) * (xi[j] - mean);
        var /= static_cast<double>(d);
        inv_std[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < d; ++j) out[r * d + j] = (xi[j] - mean) * inv_std[r];
    }
    ImplPtr px = x.impl();
    return finish("layer_norm", x.shape(), std::move(out), {x}, [=](TensorImpl* o) {
        return [=]() {
            auto* gx = grad_of(px);
            if (!gx) return;
            const double nd = static_cast<double>(d);
            for (std::size_t r = 0; r < rows; ++r) {
                const double* xh = o->data.data() + r * d;
                const double* g = o->grad.data() + r * d;
                double gm = 0.0, gxm = 0.0;
                for (std::size_t j = 0; j < d; ++j) {
                    gm += g[j];
                    gxm += g[j] * xh[j];
                }
                gm /= nd;
                gxm /= nd;
                for (std::size_t j = 0; j < d; ++j) (*gx)[r * d + j] += inv_std[r] * (g[j] - gm - xh[j] * gxm);
            }
        };
    });
}

Tensor batch_norm2d(const Tensor& x, Tensor& running_mean, Tensor& running_var, bool training, double momentum,
                    double eps) {
    if (x.ndim() != 4) throw DimensionError("batch_norm2d expects [B,C,H,W], got " + shape_str(x.shape()));
    const std::size_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    if (running_mean.numel() != C || running_var.numel() != C) {
        throw DimensionError("batch_norm2d: running statistics must have " + std::to_string(C) + " entries");
    }
    const auto in = x.data();
    std::vector<double> mean(C, 0.0), inv_std(C, 0.0);
    const std::size_t count = B * HW;
    if (training) {
        auto rm = running_mean.mutable_data();
        auto rv = running_var.mutable_data();
        for (std::size_t c = 0; c < C; ++c) {
            double m = 0.0;
            for (std::size_t b = 0; b < B; ++b) {
                const double* p = in.data() + (b * C + c) * HW;
                for (std::size_t i = 0; i < HW; ++i) m += p[i];
            }
            m /= static_cast<double>(count);
            double v = 0.0;
            for (std::size_t b = 0; b < B; ++b) {
                const double* p = in.data() + (b * C + c) * HW;
                for (std::size_t i = 0; i < HW; ++i) v += (p[i] - m) * (p[i] - m);
            }
            const double var = v / static_cast<double>(count);
            mean[c] = m;
            inv_std[c] = 1.0 / std::sqrt(var + eps);
            const double unbiased = count > 1 ? v / static_cast<double>(count - 1) : var;
            rm[c] = (1.0 - momentum) * rm[c] + momentum * m;
            rv[c] = (1.0 - momentum) * rv[c] + momentum * unbiased;
        }
    } else {
        for (std::size_t c = 0; c < C; ++c) {
            mean[c] = running_mean.data()[c];
            inv_std[c] = 1.0 / std::sqrt(running_var.data()[c] + eps);
        }
    }
    std::vector<double> out(in.size());
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t c = 0; c < C; ++c) {
            const std::size_t off = (b * C + c) * HW;
            for (std::size_t i = 0; i < HW; ++i) out[off + i] = (in[off + i] - mean[c]) * inv_std[c];
        }
    }
    ImplPtr px = x.impl();
    return finish("batch_norm2d", x.shape(), std::move(out), {x}, [=](TensorImpl* o) {
        return [=]() {
            auto* gx = grad_of(px);
            if (!gx) return;
            for (std::size_t c = 0; c < C; ++c) {
                if (!training) {
                    for (std::size_t b = 0; b < B; ++b) {
                        const std::size_t off = (b * C + c) * HW;
                        for (std::size_t i = 0; i < HW; ++i) (*gx)[off + i] += o->grad[off + i] * inv_std[c];
                    }
                    continue;
                }
                double gm = 0.0, gxm = 0.0;
                for (std::size_t b = 0; b < B; ++b) {
                    const std::size_t off = (b * C + c) * HW;
                    for (std::size_t i = 0; i < HW; ++i) {
                        gm += o->grad[off + i];
                        gxm += o->grad[off + i] * o->data[off + i];
                    }
                }
                gm /= static_cast<double>(count);
                gxm /= static_cast<double>(count);
                for (std::size_t b = 0; b < B; ++b) {
                    const std::size_t off = (b * C + c) * HW;
                    for (std::size_t i = 0; i < HW; ++i) {
                        (*gx)[off + i] += inv_std[c] * (o->grad[off + i] - gm - o->data[off + i] * gxm);
                    }
                }
            }
        };
    });
}

Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t padding) {
    if (x.ndim() != 4 || w.ndim() != 4) throw DimensionError("conv2d expects rank-4 input and weight");
    const std::size_t B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t Co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    if (w.dim(1) != Ci) throw DimensionError("conv2d: weight expects " + std::to_string(w.dim(1)) + " channels");
    if (stride == 0) throw ContractError("conv2d: stride must be positive");
    if (H + 2 * padding < kh || W + 2 * padding < kw) throw DimensionError("conv2d: kernel larger than input");
    const std::size_t Ho = (H + 2 * padding - kh) / stride + 1;
    const std::size_t Wo = (W + 2 * padding - kw) / stride + 1;
    const std::size_t K = Ci * kh * kw;
    const std::size_t P = Ho * Wo;

    // cols[b] is [K, P]
    auto cols = std::make_shared<std::vector<double>>(B * K * P, 0.0);
    const auto in = x.data();
    for (std::size_t b = 0; b < B; ++b) {
        double* cb = cols->data() + b * K * P;
        for (std::size_t c = 0; c < Ci; ++c) {
            for (std::size_t ky = 0; ky < kh; ++ky) {
                for (std::size_t kx = 0; kx < kw; ++kx) {
                    double* row = cb + ((c * kh + ky) * kw + kx) * P;
                    for (std::size_t oy = 0; oy < Ho; ++oy) {
                        const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                                  static_cast<std::ptrdiff_t>(padding);
                        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                        for (std::size_t ox = 0; ox < Wo; ++ox) {
                            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                                      static_cast<std::ptrdiff_t>(padding);
                            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                            row[oy * Wo + ox] = in[((b * Ci + c) * H + iy) * W + ix];
                        }
                    }
                }
            }
        }
    }
    std::vector<double> out(B * Co * P, 0.0);
    const double* dw = w.data().data();
    for (std::size_t b = 0; b < B; ++b) gemm(false, false, Co, P, K, dw, cols->data() + b * K * P, out.data() + b * Co * P);

    ImplPtr px = x.impl();
    ImplPtr pw = w.impl();
    return finish("conv2d", {B, Co, Ho, Wo}, std::move(out), {x, w}, [=](TensorImpl* o) {
        return [=]() {
            auto* gx = grad_of(px);
            auto* gw = grad_of(pw);
            std::vector<double> dcols(gx ? K * P : 0);
            for (std::size_t b = 0; b < B; ++b) {
                const double* g = o->grad.data() + b * Co * P;
                if (gw) gemm(false, true, Co, K, P, g, cols->data() + b * K * P, gw->data());
                if (!gx) continue;
                std::fill(dcols.begin(), dcols.end(), 0.0);
                gemm(true, false, K, P, Co, pw->data.data(), g, dcols.data());
                for (std::size_t c = 0; c < Ci; ++c) {
                    for (std::size_t ky = 0; ky < kh; ++ky) {
                        for (std::size_t kx = 0; kx < kw; ++kx) {
                            const double* row = dcols.data() + ((c * kh + ky) * kw + kx) * P;
                            for (std::size_t oy = 0; oy < Ho; ++oy) {
                                const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                                          static_cast<std::ptrdiff_t>(padding);
                                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                                for (std::size_t ox = 0; ox < Wo; ++ox) {
                                    const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                                              static_cast<std::ptrdiff_t>(padding);
                                    if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                                    (*gx)[((b * Ci + c) * H + iy) * W + ix] += row[oy * Wo + ox];
                                }
                            }
                        }
                    }
                }
            }
        };
    });
}

Tensor global_avg_pool(const Tensor& x) {
    if (x.ndim() != 4) throw DimensionError("global_avg_pool expects [B,C,H,W], got " + shape_str(x.shape()));
    return reduce_mean(x, {2, 3}, false);
}

Tensor reshape(const Tensor& x, Shape shape) {
    if (numel_of(shape) != x.numel()) {
        throw DimensionError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
    }
    ImplPtr px = x.impl();
    std::vector<double> data(x.data().begin(), x.data().end());
    return finish("reshape", std::move(shape), std::move(data), {x}, [=](TensorImpl* o) {
        return [=]() {
            auto* gx = grad_of(px);
            if (!gx) return;
            for (std::size_t i = 0; i < o->grad.size(); ++i) (*gx)[i] += o->grad[i];
        };
    });
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& perm) {
    const Shape& in_shape = x.shape();
    if (perm.size() != in_shape.size()) throw DimensionError("permute: wrong number of axes");
    std::vector<bool> seen(perm.size(), false);
    for (std::size_t p : perm) {
        if (p >= perm.size() || seen[p]) throw DimensionError("permute: invalid axis permutation");
        seen[p] = true;
    }
    const Shape in_strides = contiguous_strides(in_shape);
    Shape out_shape(perm.size()), gather(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) {
        out_shape[i] = in_shape[perm[i]];
        gather[i] = in_strides[perm[i]];
    }
    const Shape out_strides = contiguous_strides(out_shape);
    std::vector<double> out(x.numel());
    const double* dx = x.data().data();
    strided_for_each(out_shape, out_strides, gather, [&](std::size_t o, std::size_t, std::size_t i) { out[o] = dx[i]; });
    ImplPtr px = x.impl();
    return finish("permute", out_shape, std::move(out), {x}, [=](TensorImpl* o) {
        return [=]() {
            auto* gx = grad_of(px);
            if (!gx) return;
            strided_for_each(out_shape, out_strides, gather,
                             [&](std::size_t k, std::size_t, std::size_t i) { (*gx)[i] += o->grad[k]; });
        };
    });
}

Tensor transpose(const Tensor& x, std::size_t d0, std::size_t d1) {
    std::vector<std::size_t> perm(x.ndim());
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
    if (d0 >= perm.size() || d1 >= perm.size()) throw DimensionError("transpose: axis out of range");
    std::swap(perm[d0], perm[d1]);
    return permute(x, perm);
}

Tensor expand(const Tensor& x, const Shape& shape) {
    const Shape& in_shape = x.shape();
    if (in_shape.size() != shape.size()) throw DimensionError("expand: rank mismatch");
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (in_shape[i] != shape[i] && in_shape[i] != 1) {
            throw DimensionError("expand " + shape_str(in_shape) + " -> " + shape_str(shape));
        }
    }
    const Shape s_in = broadcast_strides(in_shape, shape);
    const Shape s_out = contiguous_strides(shape);
    std::vector<double> out(numel_of(shape));
    const double* dx = x.data().data();
    strided_for_each(shape, s_out, s_in, [&](std::size_t o, std::size_t, std::size_t i) { out[o] = dx[i]; });
    ImplPtr px = x.impl();
    return finish("expand", shape, std::move(out), {x}, [=](TensorImpl* o) {
        return [=]() {
            auto* gx = grad_of(px);
            if (!gx) return;
            strided_for_each(shape, s_out, s_in,
                             [&](std::size_t k, std::size_t, std::size_t i) { (*gx)[i] += o->grad[k]; });
        };
    });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t dim) {
    if (parts.empty()) throw ContractError("concat of no tensors");
    const Shape& first = parts.front().shape();
    if (dim >= first.size()) throw DimensionError("concat: dim out of range");
    Shape out_shape = first;
    out_shape[dim] = 0;
    for (const Tensor& p : parts) {
        const Shape& s = p.shape();
        if (s.size() != first.size()) throw DimensionError("concat: rank mismatch");
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (i != dim && s[i] != first[i]) throw DimensionError("concat: extent mismatch on dim " + std::to_string(i));
        }
        out_shape[dim] += s[dim];
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < dim; ++i) outer *= first[i];
    for (std::size_t i = dim + 1; i < first.size(); ++i) inner *= first[i];
    const std::size_t out_row = out_shape[dim] * inner;
    std::vector<double> out(numel_of(out_shape));
    std::vector<std::size_t> offsets;
    std::size_t offset = 0;
    for (const Tensor& p : parts) {
        const std::size_t row = p.shape()[dim] * inner;
        const double* src = p.data().data();
        for (std::size_t o = 0; o < outer; ++o) std::copy_n(src + o * row, row, out.data() + o * out_row + offset);
        offsets.push_back(offset);
        offset += row;
    }
    std::vector<ImplPtr> impls;
    for (const Tensor& p : parts) impls.push_back(p.impl());
    return finish("concat", out_shape, std::move(out), parts, [=](TensorImpl* o) {
        return [=]() {
            for (std::size_t q = 0; q < impls.size(); ++q) {
                auto* g = grad_of(impls[q]);
                if (!g) continue;
                const std::size_t row = impls[q]->shape[dim] * inner;
                for (std::size_t r = 0; r < outer; ++r) {
                    for (std::size_t i = 0; i < row; ++i) (*g)[r * row + i] += o->grad[r * out_row + offsets[q] + i];
                }
            }
        };
    });
}

Tensor slice(const Tensor& x, std::size_t dim, std::size_t start, std::size_t length) {
    const Shape& in_shape = x.shape();
    if (dim >= in_shape.size()) throw DimensionError("slice: dim out of range");
    if (length == 0 || start + length > in_shape[dim]) throw DimensionError("slice: range out of bounds");
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < dim; ++i) outer *= in_shape[i];
    for (std::size_t i = dim + 1; i < in_shape.size(); ++i) inner *= in_shape[i];
    Shape out_shape = in_shape;
    out_shape[dim] = length;
    const std::size_t in_row = in_shape[dim] * inner;
    const std::size_t out_row = length * inner;
    std::vector<double> out(outer * out_row);
    const double* src = x.data().data();
    for (std::size_t o = 0; o < outer; ++o) std::copy_n(src + o * in_row + start * inner, out_row, out.data() + o * out_row);
    ImplPtr px = x.impl();
    return finish("slice", out_shape, std::move(out), {x}, [=](TensorImpl* o) {
        return [=]() {
            auto* gx = grad_of(px);
            if (!gx) return;
            for (std::size_t r = 0; r < outer; ++r) {
                for (std::size_t i = 0; i < out_row; ++i) (*gx)[r * in_row + start * inner + i] += o->grad[r * out_row + i];
            }
        };
    });
}

Tensor cross_entropy(const Tensor& logits, const Tensor& target_probs) {
    if (logits.ndim() != 2 || logits.shape() != target_probs.shape()) {
        throw DimensionError("cross_entropy expects matching [N,K] logits and targets");
    }
    const double n = static_cast<double>(logits.dim(0));
    return mul_scalar(sum_all(mul(log_softmax_last(logits), target_probs)), -1.0 / n);
}

std::vector<std::size_t> argmax_last(const Tensor& x) {
    const std::size_t d = x.shape().back();
    const std::size_t rows = x.numel() / d;
    const auto v = x.data();
    std::vector<std::size_t> out(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* p = v.data() + r * d;
        // max_element returns the first maximum.
        out[r] = static_cast<std::size_t>(std::max_element(p, p + d) - p);
    }
    return out;
}

}  // namespace orup
