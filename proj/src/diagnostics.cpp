#include "orup/diagnostics.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace orup {

std::string to_string(Junction j) {
    switch (j) {
        case Junction::Attn: return "attn";
        case Junction::Mlp: return "mlp";
        case Junction::Conv: return "conv";
    }
    return "?";
}

Junction junction_from_string(const std::string& s) {
    if (s == "attn") return Junction::Attn;
    if (s == "mlp") return Junction::Mlp;
    if (s == "conv") return Junction::Conv;
    throw FormatError("unknown junction '" + s + "'");
}

bool BlockTrace::finite() const {
    for (double v : {x_norm_sq, f_norm_sq, f_par_norm_sq, f_perp_norm_sq, cos_xf, s_mean, perp_ratio, cross_bound}) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

bool BlockTrace::pythagoras_holds(double slack) const {
    return std::abs(f_norm_sq - f_par_norm_sq - f_perp_norm_sq) <= cross_bound + slack;
}

BlockTrace measure_junction(const Tensor& x, const Tensor& f, const DimSet& dims, double epsilon) {
    if (x.shape() != f.shape()) {
        throw DimensionError("measure_junction: x " + shape_str(x.shape()) + " vs f " + shape_str(f.shape()));
    }
    NoGradScope no_grad;
    const Tensor xx = reduce_sum(mul(x, x), dims, true);
    const Tensor ff = reduce_sum(mul(f, f), dims, true);
    const Tensor xf = reduce_sum(mul(x, f), dims, true);
    const Tensor s = div(xf, add_scalar(xx, epsilon));
    const Tensor f_perp = sub(f, mul(s, x));
    const Tensor pp = reduce_sum(mul(f_perp, f_perp), dims, true);
    const Tensor leak = reduce_sum(mul(x, f_perp), dims, true);

    const std::size_t groups = xx.numel();
    BlockTrace t;
    for (std::size_t g = 0; g < groups; ++g) {
        const double xn = xx[g];
        const double fn = ff[g];
        const double sg = s[g];
        t.x_norm_sq += xn;
        t.f_norm_sq += fn;
        t.f_par_norm_sq += sg * sg * xn;
        t.f_perp_norm_sq += pp[g];
        t.cos_xf += (xn > 0.0 && fn > 0.0) ? xf[g] / std::sqrt(xn * fn) : 0.0;
        t.s_mean += sg;
        t.perp_ratio += xn > 0.0 ? std::sqrt(pp[g] / xn) : 0.0;
        t.cross_bound += 2.0 * std::abs(leak[g]) * std::abs(sg);
    }
    const double inv = 1.0 / static_cast<double>(groups);
    for (double* v : {&t.x_norm_sq, &t.f_norm_sq, &t.f_par_norm_sq, &t.f_perp_norm_sq, &t.cos_xf, &t.s_mean,
                      &t.perp_ratio, &t.cross_bound}) {
        *v *= inv;
    }
    return t;
}

const std::vector<std::string>& trace_csv_columns() {
    static const std::vector<std::string> cols = {
        "step",      "epoch",          "block_index",    "junction", "x_norm_sq",  "f_norm_sq",
        "f_par_norm_sq", "f_perp_norm_sq", "cos_xf", "s_mean", "perp_ratio", "cross_bound"};
    return cols;
}

void write_trace_csv_header(std::ostream& os) {
    os << "# aggregation=mean over batch and reduction groups of per-group values\n";
    const auto& cols = trace_csv_columns();
    for (std::size_t i = 0; i < cols.size(); ++i) os << (i ? "," : "") << cols[i];
    os << '\n';
}

namespace {
std::string fmt_real(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}
}  // namespace

void write_trace_csv_row(std::ostream& os, const BlockTrace& t) {
    os << t.step << ',' << t.epoch << ',' << t.block_index << ',' << to_string(t.junction);
    for (double v : {t.x_norm_sq, t.f_norm_sq, t.f_par_norm_sq, t.f_perp_norm_sq, t.cos_xf, t.s_mean, t.perp_ratio,
                     t.cross_bound}) {
        os << ',' << fmt_real(v);
    }
    os << '\n';
}

std::vector<BlockTrace> read_trace_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open trace file " + path);
    std::string line;
    std::vector<BlockTrace> out;
    bool header_seen = false;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        if (!header_seen) {
            header_seen = true;
            continue;
        }
        std::vector<std::string> f;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) f.push_back(cell);
        if (f.size() != trace_csv_columns().size()) throw FormatError("trace row has wrong column count: " + line);
        BlockTrace t;
        t.step = std::stoull(f[0]);
        t.epoch = std::stoull(f[1]);
        t.block_index = std::stoull(f[2]);
        t.junction = junction_from_string(f[3]);
        double* fields[] = {&t.x_norm_sq, &t.f_norm_sq, &t.f_par_norm_sq, &t.f_perp_norm_sq,
                            &t.cos_xf,    &t.s_mean,    &t.perp_ratio,    &t.cross_bound};
        for (std::size_t i = 0; i < 8; ++i) *fields[i] = std::stod(f[4 + i]);
        out.push_back(t);
    }
    return out;
}

std::vector<BlockTrace> TraceRecorder::last(std::size_t n) const {
    const std::size_t start = traces_.size() > n ? traces_.size() - n : 0;
    return {traces_.begin() + static_cast<std::ptrdiff_t>(start), traces_.end()};
}

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Eigen::MatrixXd centered(const Tensor& features, const char* what) {
    if (features.ndim() != 2) throw DimensionError(std::string(what) + " expects [n,d] features");
    const auto n = static_cast<Eigen::Index>(features.dim(0));
    const auto d = static_cast<Eigen::Index>(features.dim(1));
    if (n < 2) throw ContractError(std::string(what) + " needs at least two samples");
    const Eigen::Map<const RowMatrix> raw(features.data().data(), n, d);
    Eigen::MatrixXd x = raw;
    x.rowwise() -= x.colwise().mean();
    return x;
}

}  // namespace

std::vector<double> covariance_spectrum(const Tensor& features) {
    const Eigen::MatrixXd x = centered(features, "covariance_spectrum");
    const Eigen::MatrixXd cov = (x.transpose() * x) / static_cast<double>(x.rows());
    const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov, Eigen::EigenvaluesOnly);
    const Eigen::VectorXd& ev = solver.eigenvalues();
    std::vector<double> lambdas(ev.data(), ev.data() + ev.size());
    std::sort(lambdas.begin(), lambdas.end(), std::greater<>());
    const double top = lambdas.empty() ? 0.0 : lambdas.front();
    if (!(top > 0.0)) throw DegenerateInputError("covariance has no positive eigenvalue (constant features)");
    for (double& l : lambdas) {
        if (l < 1e-12 * top) l = 0.0;
    }
    return lambdas;
}

double spectral_entropy(const Tensor& features) {
    const std::vector<double> lambdas = covariance_spectrum(features);
    double total = 0.0;
    for (double l : lambdas) total += l;
    double h = 0.0;
    for (double l : lambdas) {
        if (l <= 0.0) continue;
        const double p = l / total;
        h -= p * std::log(p);
    }
    return h;
}

double effective_rank(const Tensor& features) { return std::exp(spectral_entropy(features)); }

double cka_linear(const Tensor& x, const Tensor& y) {
    if (x.ndim() != 2 || y.ndim() != 2 || x.dim(0) != y.dim(0)) {
        throw DimensionError("cka_linear expects [n,d1] and [n,d2] with the same n");
    }
    const Eigen::MatrixXd cx = centered(x, "cka_linear");
    const Eigen::MatrixXd cy = centered(y, "cka_linear");
    const double cross = (cx.transpose() * cy).squaredNorm();
    const double nx = (cx.transpose() * cx).norm();
    const double ny = (cy.transpose() * cy).norm();
    if (!(nx > 0.0) || !(ny > 0.0)) throw DegenerateInputError("cka_linear: zero-norm representation");
    return cross / (nx * ny);
}

double feature_std(const Tensor& features) {
    if (features.ndim() != 2) throw DimensionError("feature_std expects [n,d] features");
    const std::size_t n = features.dim(0);
    const std::size_t d = features.dim(1);
    if (n < 2) throw ContractError("feature_std needs at least two samples");
    const auto v = features.data();
    double total = 0.0;
    for (std::size_t k = 0; k < d; ++k) {
        double mean = 0.0;
        for (std::size_t i = 0; i < n; ++i) mean += v[i * d + k];
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t i = 0; i < n; ++i) var += (v[i * d + k] - mean) * (v[i * d + k] - mean);
        total += std::sqrt(var / static_cast<double>(n));
    }
    return total / static_cast<double>(d);
}

MetricReport metric_report(const Tensor& features, const Tensor* reference) {
    MetricReport r;
    r.spectral_entropy = spectral_entropy(features);
    r.effective_rank = std::exp(r.spectral_entropy);
    r.feature_std = feature_std(features);
    if (reference) r.cka_linear = cka_linear(features, *reference);
    return r;
}

std::int64_t orthogonal_overhead(std::int64_t s, std::int64_t d) { return 6 * s * d + 2 * s; }

std::int64_t flops_estimate(std::int64_t s, std::int64_t d, FlopsJunction junction, FlopsConnection connection) {
    if (s < 1 || d < 1) throw ContractError("flops_estimate needs s, d >= 1");
    const std::int64_t base = junction == FlopsJunction::Attn ? 8 * s * d * d + 4 * s * s * d + s * d
                                                              : 16 * s * d * d + s * d;
    return connection == FlopsConnection::Orthogonal ? base + orthogonal_overhead(s, d) : base;
}

}  // namespace orup
