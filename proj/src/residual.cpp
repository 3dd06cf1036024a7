#include "orup/residual.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace orup {

std::string to_string(ConnectionKind k) {
    switch (k) {
        case ConnectionKind::Linear: return "linear";
        case ConnectionKind::OrthogonalFeature: return "orthogonal_feature";
        case ConnectionKind::OrthogonalGlobal: return "orthogonal_global";
        case ConnectionKind::StreamScaled: return "stream_scaled";
        case ConnectionKind::Unified: return "unified";
    }
    return "?";
}

ConnectionKind connection_kind_from_string(const std::string& s) {
    if (s == "linear") return ConnectionKind::Linear;
    if (s == "orthogonal_feature") return ConnectionKind::OrthogonalFeature;
    if (s == "orthogonal_global") return ConnectionKind::OrthogonalGlobal;
    if (s == "stream_scaled") return ConnectionKind::StreamScaled;
    if (s == "unified") return ConnectionKind::Unified;
    throw ConfigError("unknown connection kind '" + s + "'");
}

std::string to_string(UnifiedStart s) { return s == UnifiedStart::Linear ? "linear" : "orthogonal"; }

UnifiedStart unified_start_from_string(const std::string& s) {
    if (s == "linear") return UnifiedStart::Linear;
    if (s == "orthogonal") return UnifiedStart::Orthogonal;
    throw ConfigError("unknown unified start '" + s + "'");
}

void validate(const ConnectionSpec& spec) {
    if (!(spec.epsilon > 0.0)) throw ContractError("connection epsilon must be positive");
    if (!(spec.pi >= 0.0 && spec.pi <= 1.0)) throw ContractError("connection pi must lie in [0,1]");
}

namespace {

void check_decompose_args(const Tensor& x, const Tensor& f, const DimSet& dims, double epsilon) {
    if (x.shape() != f.shape()) {
        throw DimensionError("decompose: x " + shape_str(x.shape()) + " vs f " + shape_str(f.shape()));
    }
    if (dims.empty()) throw DimensionError("decompose: reduction dims must be non-empty");
    for (std::size_t d : dims) {
        if (d >= x.ndim()) throw DimensionError("decompose: dim " + std::to_string(d) + " out of range");
        if (d == 0 && x.ndim() > 1) throw DimensionError("decompose: cannot reduce over the batch dim");
    }
    if (!(epsilon > 0.0)) throw ContractError("decompose: epsilon must be positive");
}

// A [1] scalar reshaped to broadcast against rank `rank`.
Tensor as_broadcast_scalar(const Tensor& t, std::size_t rank) {
    if (t.numel() != 1) throw DimensionError("expected a single-element scalar tensor");
    return reshape(t, Shape(rank, 1));
}

}  // namespace

Decomposition decompose(const Tensor& x, const Tensor& f, const DimSet& dims, double epsilon) {
    check_decompose_args(x, f, dims, epsilon);
    const Tensor dot = reduce_sum(mul(x, f), dims, true);
    const Tensor norm_sq = reduce_sum(mul(x, x), dims, true);
    Decomposition out;
    out.s = div(dot, add_scalar(norm_sq, epsilon));
    out.f_par = mul(out.s, x);
    out.f_perp = sub(f, out.f_par);
    return out;
}

Tensor leakage(const Tensor& x, const Tensor& f, const DimSet& dims, double epsilon) {
    check_decompose_args(x, f, dims, epsilon);
    const Tensor dot = reduce_sum(mul(x, f), dims, true);
    const Tensor norm_sq = reduce_sum(mul(x, x), dims, true);
    return div(mul_scalar(dot, epsilon), add_scalar(norm_sq, epsilon));
}

JunctionParams initial_junction_params(const ConnectionSpec& spec) {
    JunctionParams p;
    if (spec.kind == ConnectionKind::StreamScaled) {
        p.alpha = Tensor::parameter({1}, {0.0});
    } else if (spec.kind == ConnectionKind::Unified) {
        const bool linear = spec.unified_start == UnifiedStart::Linear;
        p.rho = Tensor::parameter({1}, {linear ? std::numbers::sqrt2 : 1.0});
        p.theta = Tensor::parameter({1}, {linear ? std::numbers::pi / 4.0 : 0.0});
    }
    return p;
}

Tensor stream_scaled_update(const Tensor& x, const Tensor& f, const Tensor& alpha) {
    if (x.shape() != f.shape()) throw DimensionError("stream_scaled_update: x and f shapes differ");
    return add(add(x, mul(as_broadcast_scalar(alpha, x.ndim()), x)), f);
}

Tensor unified_update(const Tensor& x, const Tensor& f, const Tensor& rho, const Tensor& theta, const DimSet& dims,
                      double epsilon) {
    if (rho.numel() != 1 || rho.item() < 0.0) throw ContractError("unified_update: rho must be a scalar >= 0");
    const Decomposition dec = decompose(x, f, dims, epsilon);
    const Tensor par_share = as_broadcast_scalar(mul(rho, sin(theta)), x.ndim());
    const Tensor perp_share = as_broadcast_scalar(mul(rho, cos(theta)), x.ndim());
    return add(x, add(mul(par_share, dec.f_par), mul(perp_share, dec.f_perp)));
}

Tensor unified_update(const Tensor& x, const Tensor& f, double rho, double theta, const DimSet& dims, double epsilon) {
    return unified_update(x, f, Tensor::scalar(rho), Tensor::scalar(theta), dims, epsilon);
}

UpdateResult apply_update(const Tensor& x, const Tensor& f, const ConnectionSpec& spec, Rng& rng,
                          const JunctionParams* params) {
    validate(spec);
    if (x.shape() != f.shape()) {
        throw DimensionError("apply_update: x " + shape_str(x.shape()) + " vs f " + shape_str(f.shape()));
    }
    UpdateResult r;
    r.trace = measure_junction(x, f, spec.reduction_dims, spec.epsilon);
    switch (spec.kind) {
        case ConnectionKind::Linear:
            r.x_next = add(x, f);
            break;
        case ConnectionKind::OrthogonalFeature:
        case ConnectionKind::OrthogonalGlobal: {
            bool orthogonal = spec.pi >= 1.0;
            if (spec.pi > 0.0 && spec.pi < 1.0) orthogonal = uniform01(rng) < spec.pi;
            if (orthogonal) {
                r.x_next = add(x, decompose(x, f, spec.reduction_dims, spec.epsilon).f_perp);
                r.applied_orthogonal = true;
            } else {
                r.x_next = add(x, f);
            }
            break;
        }
        case ConnectionKind::StreamScaled:
            if (!params || !params->alpha.defined()) throw ContractError("stream-scaled junction has no alpha");
            r.x_next = stream_scaled_update(x, f, params->alpha);
            break;
        case ConnectionKind::Unified:
            if (!params || !params->rho.defined() || !params->theta.defined()) {
                throw ContractError("unified junction has no (rho, theta)");
            }
            r.x_next = unified_update(x, f, params->rho, params->theta, spec.reduction_dims, spec.epsilon);
            break;
    }
    return r;
}

}  // namespace orup
