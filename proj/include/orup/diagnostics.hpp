#pragma once

#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "orup/ops.hpp"
#include "orup/tensor.hpp"

namespace orup {

enum class Junction { Attn, Mlp, Conv };

std::string to_string(Junction j);
Junction junction_from_string(const std::string& s);

// Per-junction snapshot of the stream/update geometry. Every norm is the
// arithmetic mean over batch and reduction groups of the per-group value.
struct BlockTrace {
    std::uint64_t step = 0;
    std::uint64_t epoch = 0;
    std::size_t block_index = 0;
    Junction junction = Junction::Attn;
    double x_norm_sq = 0.0;
    double f_norm_sq = 0.0;
    double f_par_norm_sq = 0.0;
    double f_perp_norm_sq = 0.0;
    double cos_xf = 0.0;
    double s_mean = 0.0;
    // mean ‖f_perp‖/‖x‖, the small-step ratio of the update.
    double perp_ratio = 0.0;
    // mean of 2·|⟨x,f_perp⟩|·‖f_par‖/‖x‖: bounds the Pythagoras residual.
    double cross_bound = 0.0;

    bool finite() const;
    // |f − f_par − f_perp| within cross_bound plus slack.
    bool pythagoras_holds(double slack = 1e-9) const;
};

// Measures the junction geometry of stream x and module output f grouped
// over `dims`. Does not record on the tape.
BlockTrace measure_junction(const Tensor& x, const Tensor& f, const DimSet& dims, double epsilon);

// Column order of traces.csv. The first ten are fixed; the ratio and bound follow.
const std::vector<std::string>& trace_csv_columns();
void write_trace_csv_header(std::ostream& os);
void write_trace_csv_row(std::ostream& os, const BlockTrace& t);
std::vector<BlockTrace> read_trace_csv(const std::string& path);

// Append-only recorder owned by the training thread.
class TraceRecorder {
public:
    void append(BlockTrace t) { traces_.push_back(t); }
    const std::vector<BlockTrace>& traces() const { return traces_; }
    std::vector<BlockTrace> last(std::size_t n) const;
    void clear() { traces_.clear(); }

private:
    std::vector<BlockTrace> traces_;
};

struct MetricReport {
    double effective_rank = 0.0;
    double spectral_entropy = 0.0;
    std::optional<double> cka_linear;
    double feature_std = 0.0;
};

// Eigenvalues (descending) of the population covariance of centered rows of
// features [n,d]; values below 1e-12·λ_max are reported as zero.
std::vector<double> covariance_spectrum(const Tensor& features);
double spectral_entropy(const Tensor& features);
double effective_rank(const Tensor& features);
double cka_linear(const Tensor& x, const Tensor& y);
double feature_std(const Tensor& features);
MetricReport metric_report(const Tensor& features, const Tensor* reference = nullptr);

enum class FlopsJunction { Attn, Mlp };
enum class FlopsConnection { Linear, Orthogonal };

// Approximate FLOPs for one transformer sub-block with sequence length s and
// model width d (4d MLP expansion).
std::int64_t flops_estimate(std::int64_t s, std::int64_t d, FlopsJunction junction, FlopsConnection connection);
std::int64_t orthogonal_overhead(std::int64_t s, std::int64_t d);

}  // namespace orup
