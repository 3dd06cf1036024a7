#include "orup/verify.hpp"

#include <algorithm>
#include <cmath>

#include "orup/ops.hpp"
#include "orup/residual.hpp"

namespace orup {

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
    if (a.rows != b.rows || a.cols != b.cols) throw DimensionError("max_abs_diff: matrix shapes differ");
    double m = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
    return m;
}

namespace {

double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

void check_input(const std::vector<double>& x, double eps) {
    if (x.empty() || x.size() > kMaxVerifyDim) {
        throw ContractError("verify: dimension must lie in [1, " + std::to_string(kMaxVerifyDim) + "]");
    }
    if (!(eps > 0.0)) throw ContractError("verify: eps must be positive");
    if (std::sqrt(dot(x, x)) < 10.0 * std::sqrt(eps)) {
        throw IllConditionedError("verify: ‖x‖ below 10·sqrt(eps), projection is ill-conditioned");
    }
}

}  // namespace

Matrix finite_diff_jacobian(const VectorFn& fn, const std::vector<double>& x, double h) {
    if (!(h > 0.0)) throw ContractError("finite_diff_jacobian: h must be positive");
    double scale = 1.0;
    for (double v : x) scale = std::max(scale, std::abs(v));
    const double step = h * scale;
    Matrix j;
    std::vector<double> xp = x;
    for (std::size_t c = 0; c < x.size(); ++c) {
        xp[c] = x[c] + step;
        const std::vector<double> hi = fn(xp);
        xp[c] = x[c] - step;
        const std::vector<double> lo = fn(xp);
        xp[c] = x[c];
        if (c == 0) j = Matrix(hi.size(), x.size());
        if (hi.size() != j.rows || lo.size() != j.rows) throw DimensionError("finite_diff_jacobian: output size changed");
        for (std::size_t r = 0; r < j.rows; ++r) {
            if (!std::isfinite(hi[r]) || !std::isfinite(lo[r])) throw NonFiniteError("finite_diff_jacobian: non-finite output");
            j(r, c) = (hi[r] - lo[r]) / (2.0 * step);
        }
    }
    return j;
}

VectorFn as_vector_fn(const ModuleFn& fn) {
    return [fn](const std::vector<double>& x) {
        NoGradScope no_grad;
        const Tensor y = fn(Tensor({x.size()}, x));
        return std::vector<double>(y.data().begin(), y.data().end());
    };
}

Matrix autodiff_jacobian(const ModuleFn& fn, const std::vector<double>& x) {
    const std::size_t d = x.size();
    std::size_t m = 0;
    {
        NoGradScope no_grad;
        m = fn(Tensor({d}, x)).numel();
    }
    Matrix j(m, d);
    for (std::size_t r = 0; r < m; ++r) {
        Tape tape;
        Tensor xt = Tensor::parameter({d}, x);
        Tensor out;
        {
            TapeScope scope(tape);
            const Tensor y = fn(xt);
            out = sum_all(slice(reshape(y, {m}), 0, r, 1));
        }
        if (!out.requires_grad()) continue;  // output independent of x
        tape.backward(out);
        if (!xt.has_grad()) continue;
        const auto g = xt.grad();
        for (std::size_t c = 0; c < d; ++c) j(r, c) = g[c];
    }
    return j;
}

ModuleFn perp_map(const ModuleFn& f, double eps) {
    return [f, eps](const Tensor& x) { return decompose(x, f(x), {0}, eps).f_perp; };
}

ModuleFn orthogonal_update_map(const ModuleFn& f, double eps) {
    const ModuleFn perp = perp_map(f, eps);
    return [perp](const Tensor& x) { return add(x, perp(x)); };
}

JacobianReport check_identity_path(const ModuleFn& f, const std::vector<double>& x, double eps, double tol, double h) {
    check_input(x, eps);
    const Matrix j_update = finite_diff_jacobian(as_vector_fn(orthogonal_update_map(f, eps)), x, h);
    const Matrix j_perp = autodiff_jacobian(perp_map(f, eps), x);
    JacobianReport rep;
    rep.analytic = Matrix::identity(x.size());
    rep.numeric = j_update;
    for (std::size_t i = 0; i < j_perp.data.size(); ++i) rep.numeric.data[i] -= j_perp.data[i];
    rep.max_abs_err = max_abs_diff(rep.analytic, rep.numeric);
    rep.tolerance = tol;
    rep.passed = rep.max_abs_err <= tol;
    return rep;
}

Matrix dsnxn_expansion(const std::vector<double>& x, const std::vector<double>& fx, const Matrix& jf, double eps) {
    const std::size_t d = x.size();
    const double b = dot(x, x) + eps;
    const double xf = dot(x, fx);
    const double s = xf / b;
    std::vector<double> jtx(d, 0.0);  // J_fᵀ x
    for (std::size_t c = 0; c < d; ++c) {
        for (std::size_t r = 0; r < d; ++r) jtx[c] += jf(r, c) * x[r];
    }
    Matrix e(d, d);
    for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t k = 0; k < d; ++k) {
            e(i, k) = (i == k ? s : 0.0) + x[i] * fx[k] / b + x[i] * jtx[k] / b - 2.0 * xf / (b * b) * x[i] * x[k];
        }
    }
    return e;
}

JacobianReport check_dsnxn_expansion(const ModuleFn& f, const std::vector<double>& x, double eps, double tol, double h) {
    check_input(x, eps);
    const VectorFn fv = as_vector_fn(f);
    const std::vector<double> fx = fv(x);
    const Matrix jf = finite_diff_jacobian(fv, x, h);
    const VectorFn snxn = [fv, eps](const std::vector<double>& v) {
        const std::vector<double> fv_v = fv(v);
        const double s = dot(v, fv_v) / (dot(v, v) + eps);
        std::vector<double> out(v.size());
        for (std::size_t i = 0; i < v.size(); ++i) out[i] = s * v[i];
        return out;
    };
    JacobianReport rep;
    rep.analytic = dsnxn_expansion(x, fx, jf, eps);
    rep.numeric = finite_diff_jacobian(snxn, x, h);
    rep.max_abs_err = max_abs_diff(rep.analytic, rep.numeric);
    rep.tolerance = tol;
    rep.passed = rep.max_abs_err <= tol;
    return rep;
}

double check_parallel_nonvanish(const ModuleFn& f, const std::vector<double>& x, double eps, double h) {
    check_input(x, eps);
    const VectorFn fv = as_vector_fn(f);
    const std::vector<double> fx = fv(x);
    const Matrix jf = finite_diff_jacobian(fv, x, h);
    const std::size_t d = x.size();
    double jxx = 0.0;  // ⟨J_f x, x⟩
    for (std::size_t r = 0; r < d; ++r) {
        for (std::size_t c = 0; c < d; ++c) jxx += x[r] * jf(r, c) * x[c];
    }
    const double b = dot(x, x) + eps;
    const double s = dot(x, fx) / b;
    return std::abs(jxx / b * s) * std::sqrt(dot(x, x));
}

ModuleFn random_two_layer_module(std::size_t d, std::size_t hidden, Rng& rng) {
    const Tensor w1({hidden, d}, normal_vector(rng, hidden * d, 0.0, 1.0 / std::sqrt(static_cast<double>(d))));
    const Tensor b1({hidden, 1}, normal_vector(rng, hidden, 0.0, 0.5));
    const Tensor w2({d, hidden}, normal_vector(rng, d * hidden, 0.0, 1.0 / std::sqrt(static_cast<double>(hidden))));
    const Tensor b2({d, 1}, normal_vector(rng, d, 0.0, 0.5));
    return [=](const Tensor& x) {
        const Tensor col = reshape(x, {d, 1});
        const Tensor h = tanh(add(matmul(w1, col), b1));
        return reshape(add(matmul(w2, h), b2), {d});
    };
}

ModuleFn linear_module(const Matrix& a) {
    if (a.rows == 0 || a.cols == 0) throw DimensionError("linear_module: empty matrix");
    const Tensor w({a.rows, a.cols}, a.data);
    const std::size_t n = a.cols, m = a.rows;
    return [w, n, m](const Tensor& x) { return reshape(matmul(w, reshape(x, {n, 1})), {m}); };
}

std::vector<VerifyLine> run_verify_suite(const VerifyOptions& o) {
    VerifyLine identity{"identity_path"}, expansion{"dsnxn_expansion"}, nonvanish{"parallel_nonvanish"},
        leak{"leakage_identity"};
    nonvanish.worst = INFINITY;
    for (std::size_t d : o.dims) {
        for (std::size_t s = 0; s < o.seeds; ++s) {
            Rng rng(derive_seed(o.base_seed, d * 100003 + s));
            const ModuleFn f = random_two_layer_module(d, d, rng);
            const std::vector<double> x = normal_vector(rng, d);

            const JacobianReport a = check_identity_path(f, x, o.eps, o.tol, o.h);
            ++identity.cases;
            identity.failures += a.passed ? 0 : 1;
            identity.worst = std::max(identity.worst, a.max_abs_err);

            const JacobianReport b = check_dsnxn_expansion(f, x, o.eps, o.tol, o.h);
            ++expansion.cases;
            expansion.failures += b.passed ? 0 : 1;
            expansion.worst = std::max(expansion.worst, b.max_abs_err);

            const double v = check_parallel_nonvanish(f, x, o.eps, o.h);
            ++nonvanish.cases;
            nonvanish.failures += v > 1e-10 ? 0 : 1;
            nonvanish.worst = std::min(nonvanish.worst, v);

            const Tensor xt({d}, x);
            const Tensor ft({d}, as_vector_fn(f)(x));
            const Decomposition dec = decompose(xt, ft, {0}, o.eps);
            const double direct = sum_all(mul(xt, dec.f_perp)).item();
            const double closed = leakage(xt, ft, {0}, o.eps).item();
            const double xf = sum_all(mul(xt, ft)).item();
            const double err = std::abs(direct - closed);
            ++leak.cases;
            leak.failures += err <= 1e-12 * (1.0 + std::abs(xf)) ? 0 : 1;
            leak.worst = std::max(leak.worst, err);
        }
    }
    return {identity, expansion, nonvanish, leak};
}

}  // namespace orup
