#pragma once

#include <string>

#include "orup/diagnostics.hpp"
#include "orup/ops.hpp"
#include "orup/random.hpp"
#include "orup/tensor.hpp"

// Residual update laws x_{n+1} = x_n + update(x_n, f) and the projection
// identities behind them.
namespace orup {

enum class ConnectionKind { Linear, OrthogonalFeature, OrthogonalGlobal, StreamScaled, Unified };

// Canonical (rho, theta) starting points of the unified family.
enum class UnifiedStart { Linear, Orthogonal };

std::string to_string(ConnectionKind k);
ConnectionKind connection_kind_from_string(const std::string& s);
std::string to_string(UnifiedStart s);
UnifiedStart unified_start_from_string(const std::string& s);

struct ConnectionSpec {
    ConnectionKind kind = ConnectionKind::Linear;
    // Non-batch dims to reduce over. Filled in by the block that owns the junction.
    DimSet reduction_dims;
    double epsilon = 1e-6;
    // Probability of applying the orthogonal law; otherwise the linear one.
    double pi = 1.0;
    UnifiedStart unified_start = UnifiedStart::Linear;

    bool is_orthogonal() const {
        return kind == ConnectionKind::OrthogonalFeature || kind == ConnectionKind::OrthogonalGlobal;
    }
    bool operator==(const ConnectionSpec&) const = default;
};

// Throws ContractError on epsilon <= 0 or pi outside [0,1].
void validate(const ConnectionSpec& spec);

struct Decomposition {
    Tensor s;  // one coefficient per reduction group (keepdim shape)
    Tensor f_par;
    Tensor f_perp;
};

// s = Σ_D(x⊙f) / (Σ_D(x⊙x) + ε), f_par = s⊙x, f_perp = f − f_par.
// Gradients flow through s.
Decomposition decompose(const Tensor& x, const Tensor& f, const DimSet& dims, double epsilon);

// Closed form ⟨x,f⟩·ε/(‖x‖²+ε) per reduction group, equal to ⟨x, f_perp⟩.
Tensor leakage(const Tensor& x, const Tensor& f, const DimSet& dims, double epsilon);

// Learnable per-junction scalars, each shaped [1].
struct JunctionParams {
    Tensor alpha;  // stream scale, starts at 0
    Tensor rho;
    Tensor theta;
};

JunctionParams initial_junction_params(const ConnectionSpec& spec);

struct UpdateResult {
    Tensor x_next;
    BlockTrace trace;
    bool applied_orthogonal = false;
};

// Applies the update law of `spec`. For orthogonal kinds with 0 < pi < 1 one
// uniform draw from `rng` selects orthogonal (u < pi) or linear; pi in {0,1}
// consumes nothing. The trace is populated for every kind.
UpdateResult apply_update(const Tensor& x, const Tensor& f, const ConnectionSpec& spec, Rng& rng,
                          const JunctionParams* params = nullptr);

// (1 + alpha)·x + f
Tensor stream_scaled_update(const Tensor& x, const Tensor& f, const Tensor& alpha);

// x + rho·(sin(theta)·f_par + cos(theta)·f_perp)
Tensor unified_update(const Tensor& x, const Tensor& f, const Tensor& rho, const Tensor& theta, const DimSet& dims,
                      double epsilon);
Tensor unified_update(const Tensor& x, const Tensor& f, double rho, double theta, const DimSet& dims, double epsilon);

}  // namespace orup
