#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "orup/random.hpp"
#include "orup/tensor.hpp"

// Dense-Jacobian checks of the projection update's derivative structure.
namespace orup {

// A differentiable module x [d] -> f(x) [d] built from tensor ops.
using ModuleFn = std::function<Tensor(const Tensor&)>;
using VectorFn = std::function<std::vector<double>(const std::vector<double>&)>;

struct Matrix {
    std::size_t rows = 0, cols = 0;
    std::vector<double> data;  // row-major

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}
    static Matrix identity(std::size_t n);
    double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
};

double max_abs_diff(const Matrix& a, const Matrix& b);

struct JacobianReport {
    Matrix analytic;
    Matrix numeric;
    double max_abs_err = 0.0;
    double tolerance = 0.0;
    bool passed = false;
};

inline constexpr std::size_t kMaxVerifyDim = 16;

// Central differences, column j = (fn(x + h·e_j) − fn(x − h·e_j)) / 2h with
// h scaled by max(1, ‖x‖∞).
Matrix finite_diff_jacobian(const VectorFn& fn, const std::vector<double>& x, double h = 1e-5);
// Reverse-mode Jacobian, one backward pass per output.
Matrix autodiff_jacobian(const ModuleFn& fn, const std::vector<double>& x);

VectorFn as_vector_fn(const ModuleFn& fn);

// x ↦ f_perp(x) and x ↦ x + f_perp(x) for module f.
ModuleFn perp_map(const ModuleFn& f, double eps);
ModuleFn orthogonal_update_map(const ModuleFn& f, double eps);

// Numeric side: finite-difference Jacobian of the full update minus the
// reverse-mode Jacobian of f_perp; analytic side: I.
JacobianReport check_identity_path(const ModuleFn& f, const std::vector<double>& x, double eps, double tol,
                                   double h = 1e-5);

// Analytic side: sI + x fᵀ/b + x (J_fᵀx)ᵀ/b − (2⟨x,f⟩/b²) x xᵀ with J_f by
// finite differences; numeric side: finite-difference Jacobian of x ↦ s(x)·x.
JacobianReport check_dsnxn_expansion(const ModuleFn& f, const std::vector<double>& x, double eps, double tol,
                                     double h = 1e-5);
Matrix dsnxn_expansion(const std::vector<double>& x, const std::vector<double>& fx, const Matrix& jf, double eps);

// ‖(⟨J_f x, x⟩/b)·s·x‖
double check_parallel_nonvanish(const ModuleFn& f, const std::vector<double>& x, double eps, double h = 1e-5);

// W2·tanh(W1·x + b1) + b2 with Gaussian weights scaled by 1/sqrt(fan_in).
ModuleFn random_two_layer_module(std::size_t d, std::size_t hidden, Rng& rng);
// x ↦ A·x
ModuleFn linear_module(const Matrix& a);

struct VerifyOptions {
    std::vector<std::size_t> dims{2, 4, 8, 16};
    std::size_t seeds = 50;
    double eps = 1e-6;
    double tol = 1e-5;
    double h = 1e-5;
    std::uint64_t base_seed = 0;
};

struct VerifyLine {
    std::string name;
    std::size_t cases = 0;
    std::size_t failures = 0;
    double worst = 0.0;  // largest error, or smallest value for the non-vanishing check
    bool passed() const { return failures == 0; }
};

std::vector<VerifyLine> run_verify_suite(const VerifyOptions& options);

}  // namespace orup
