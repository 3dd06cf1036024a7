#pragma once

#include <string>
#include <vector>

#include "orup/config.hpp"

namespace orup {

enum class SweepKind { Epsilon, Pi, Pattern, Lr };

std::string to_string(SweepKind k);
SweepKind sweep_kind_from_string(const std::string& s);

std::vector<double> epsilon_grid();  // 1e-8 … 1e-3
std::vector<double> pi_grid();       // 0, 0.25, 0.5, 0.75, 1
std::vector<double> lr_grid();
// Block sets that use orthogonal junctions, restricted to the model's depth.
std::vector<std::vector<std::size_t>> pattern_grid(std::size_t n_blocks);

struct SweepPoint {
    std::string label;
    double value = 0.0;  // grid value; pattern sweeps use the point index
    ExperimentConfig config;
};

// One config per grid point, derived from `base`. Epsilon and pi sweeps make
// every junction orthogonal (feature-wise unless the base already uses global).
std::vector<SweepPoint> sweep_points(SweepKind kind, const ExperimentConfig& base);

// Leakage ⟨x, f_perp⟩ measured on a fixed probe pair with ⟨x,f⟩ > 0, next to the closed form.
struct LeakageProbe {
    double epsilon = 0.0;
    double measured = 0.0;
    double closed_form = 0.0;
};
LeakageProbe leakage_probe(double epsilon);

struct SweepRun {
    std::size_t point = 0;
    std::size_t repeat = 0;
    std::uint64_t seed_offset = 0;
    double final_train_loss = 0.0;
    double train_acc1 = 0.0;
    double val_acc1 = 0.0;
    double val_loss = 0.0;
};

struct SweepResult {
    std::vector<SweepPoint> points;
    std::vector<SweepRun> runs;
    std::string summary_path;
};

// Trains every point `repeats` times (seed offset = base_offset + point + 1000·repeat)
// under out_dir/<label>/rep<r>, running up to `threads` runs at once, and
// writes out_dir/summary.csv with mean and std over repeats.
SweepResult run_sweep(SweepKind kind, const ExperimentConfig& base, const std::string& out_dir, std::size_t repeats,
                      std::size_t threads, std::uint64_t base_offset = 0);

}  // namespace orup
