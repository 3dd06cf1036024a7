#include "orup/sweep.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <limits>
#include <thread>

#include "orup/residual.hpp"
#include "orup/training.hpp"

namespace orup {

std::string to_string(SweepKind k) {
    switch (k) {
        case SweepKind::Epsilon: return "epsilon";
        case SweepKind::Pi: return "pi";
        case SweepKind::Pattern: return "pattern";
        case SweepKind::Lr: return "lr";
    }
    return "?";
}

SweepKind sweep_kind_from_string(const std::string& s) {
    if (s == "epsilon") return SweepKind::Epsilon;
    if (s == "pi") return SweepKind::Pi;
    if (s == "pattern") return SweepKind::Pattern;
    if (s == "lr") return SweepKind::Lr;
    throw ConfigError("unknown sweep kind '" + s + "' (expected epsilon, pi, pattern or lr)");
}

std::vector<double> epsilon_grid() { return {1e-8, 1e-7, 1e-6, 1e-5, 1e-4, 1e-3}; }
std::vector<double> pi_grid() { return {0.0, 0.25, 0.5, 0.75, 1.0}; }
std::vector<double> lr_grid() { return {5e-4, 8e-4, 1e-3, 2e-3, 5e-3}; }

std::vector<std::vector<std::size_t>> pattern_grid(std::size_t n_blocks) {
    const std::vector<std::vector<std::size_t>> six{{},           {0, 1},       {2, 3},       {4, 5},
                                                    {0, 1, 2, 3}, {0, 1, 4, 5}, {2, 3, 4, 5}, {0, 1, 2, 3, 4, 5}};
    std::vector<std::vector<std::size_t>> out;
    for (const auto& p : six) {
        bool fits = true;
        for (std::size_t b : p) fits = fits && b < n_blocks;
        if (!fits) continue;
        if (std::find(out.begin(), out.end(), p) == out.end()) out.push_back(p);
    }
    std::vector<std::size_t> all;
    for (std::size_t b = 0; b < n_blocks; ++b) all.push_back(b);
    if (std::find(out.begin(), out.end(), all) == out.end()) out.push_back(all);
    return out;
}

namespace {

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

ConnectionSpec orthogonal_of(const ExperimentConfig& base) {
    for (const ConnectionSpec& s : base.model.connection_plan) {
        if (s.is_orthogonal()) {
            ConnectionSpec o = s;
            o.reduction_dims.clear();
            return o;
        }
    }
    ConnectionSpec o;
    o.kind = ConnectionKind::OrthogonalFeature;
    if (!base.model.connection_plan.empty()) o.epsilon = base.model.connection_plan.front().epsilon;
    return o;
}

}  // namespace

std::vector<SweepPoint> sweep_points(SweepKind kind, const ExperimentConfig& base) {
    std::vector<SweepPoint> points;
    const ConnectionSpec ortho = orthogonal_of(base);
    auto all_orthogonal = [&](double eps, double pi) {
        ConnectionSpec s = ortho;
        s.epsilon = eps;
        s.pi = pi;
        return std::vector<ConnectionSpec>(base.model.num_junctions(), s);
    };
    switch (kind) {
        case SweepKind::Epsilon:
            for (double e : epsilon_grid()) {
                SweepPoint p{"eps_" + fmt("%.0e", e), e, base};
                p.config.model.connection_plan = all_orthogonal(e, ortho.pi);
                points.push_back(p);
            }
            break;
        case SweepKind::Pi:
            for (double v : pi_grid()) {
                SweepPoint p{"pi_" + fmt("%.2f", v), v, base};
                p.config.model.connection_plan = all_orthogonal(ortho.epsilon, v);
                points.push_back(p);
            }
            break;
        case SweepKind::Pattern: {
            const auto grid = pattern_grid(base.model.num_blocks());
            for (std::size_t i = 0; i < grid.size(); ++i) {
                std::string label = "layers_";
                if (grid[i].empty()) label += "none";
                else if (grid[i].size() == base.model.num_blocks()) label += "all";
                else {
                    for (std::size_t k = 0; k < grid[i].size(); ++k) label += (k ? "-" : "") + std::to_string(grid[i][k]);
                }
                ConnectionSpec o = ortho;
                o.pi = 1.0;
                SweepPoint p{label, static_cast<double>(i), base};
                p.config.model.connection_plan = layer_pattern_plan(base.model, grid[i], o);
                points.push_back(p);
            }
            break;
        }
        case SweepKind::Lr:
            for (double v : lr_grid()) {
                SweepPoint p{"lr_" + fmt("%g", v), v, base};
                p.config.optimizer.lr = v;
                p.config.schedule.min_lr = std::min(p.config.schedule.min_lr, v);
                points.push_back(p);
            }
            break;
    }
    return points;
}

LeakageProbe leakage_probe(double epsilon) {
    // ‖x‖ = 1e-3 keeps the rounding of f_perp (about u·‖x‖·‖f‖) far below the
    // leakage itself even at ε = 1e-8.
    constexpr std::size_t d = 16;
    Rng rng(20240611);
    std::vector<double> x = normal_vector(rng, d);
    std::vector<double> g = normal_vector(rng, d);
    double xx = 0.0, xg = 0.0;
    for (std::size_t i = 0; i < d; ++i) xx += x[i] * x[i];
    const double scale = 1e-3 / std::sqrt(xx);
    for (double& v : x) v *= scale;
    xx = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        xx += x[i] * x[i];
        xg += x[i] * g[i];
    }
    std::vector<double> f(d);
    for (std::size_t i = 0; i < d; ++i) f[i] = 0.5 * x[i] + 1e-3 * (g[i] - xg / xx * x[i]);

    const Tensor xt({1, d}, x), ft({1, d}, f);
    const Decomposition dec = decompose(xt, ft, {1}, epsilon);
    LeakageProbe p;
    p.epsilon = epsilon;
    const auto fp = dec.f_perp.data();
    for (std::size_t i = 0; i < d; ++i) p.measured = std::fma(x[i], fp[i], p.measured);
    p.closed_form = leakage(xt, ft, {1}, epsilon).item();
    return p;
}

SweepResult run_sweep(SweepKind kind, const ExperimentConfig& base, const std::string& out_dir, std::size_t repeats,
                      std::size_t threads, std::uint64_t base_offset) {
    if (repeats == 0) throw ConfigError("sweep repeats must be positive");
    namespace fs = std::filesystem;
    SweepResult res;
    res.points = sweep_points(kind, base);
    const fs::path root = fs::absolute(resolve_output_dir(out_dir));
    fs::create_directories(root);

    std::vector<ExperimentConfig> jobs;
    for (std::size_t p = 0; p < res.points.size(); ++p) {
        for (std::size_t r = 0; r < repeats; ++r) {
            ExperimentConfig c = res.points[p].config;
            const std::uint64_t offset = base_offset + p + 1000 * r;
            apply_seed_offset(c, offset);
            c.output_dir = (root / res.points[p].label / ("rep" + std::to_string(r))).string();
            jobs.push_back(c);
            res.runs.push_back({p, r, offset});
        }
    }
    for (const auto& c : jobs) c.validate();

    std::vector<std::exception_ptr> errors(jobs.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < jobs.size(); i = next++) {
            try {
                const RunResult rr = train(jobs[i]);
                SweepRun& run = res.runs[i];
                run.final_train_loss = rr.final_train_loss;
                run.train_acc1 = run.val_acc1 = run.val_loss = std::numeric_limits<double>::quiet_NaN();
                for (const EpochRecord& m : rr.metrics) {
                    if (m.split == "train_eval") run.train_acc1 = m.acc1;
                    if (m.split == "val") {
                        run.val_acc1 = m.acc1;
                        run.val_loss = m.loss;
                    }
                }
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    const std::size_t n_threads = std::max<std::size_t>(1, std::min(threads, jobs.size()));
    if (n_threads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    for (const auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }

    {
        std::ofstream os(root / "runs.csv", std::ios::trunc);
        os << "label,value,repeat,seed_offset,final_train_loss,train_acc1,val_acc1,val_loss\n";
        char buf[512];
        for (const SweepRun& r : res.runs) {
            std::snprintf(buf, sizeof buf, "%s,%.17g,%zu,%llu,%.17g,%.17g,%.17g,%.17g\n",
                          res.points[r.point].label.c_str(), res.points[r.point].value, r.repeat,
                          static_cast<unsigned long long>(r.seed_offset), r.final_train_loss, r.train_acc1, r.val_acc1,
                          r.val_loss);
            os << buf;
        }
    }

    res.summary_path = (root / "summary.csv").string();
    std::ofstream os(res.summary_path, std::ios::trunc);
    os << "label,value,repeats,train_loss_mean,train_loss_std,train_acc1_mean,train_acc1_std,val_acc1_mean,val_acc1_std";
    if (kind == SweepKind::Epsilon) os << ",leakage_measured,leakage_closed_form";
    os << "\n";
    auto stats = [&](std::size_t p, double SweepRun::*field) {
        double sum = 0.0, sq = 0.0;
        for (const SweepRun& r : res.runs) {
            if (r.point == p) sum += r.*field;
        }
        const double mean = sum / static_cast<double>(repeats);
        for (const SweepRun& r : res.runs) {
            if (r.point == p) sq += (r.*field - mean) * (r.*field - mean);
        }
        const double sd = repeats > 1 ? std::sqrt(sq / static_cast<double>(repeats - 1)) : 0.0;
        return std::pair{mean, sd};
    };
    char buf[512];
    for (std::size_t p = 0; p < res.points.size(); ++p) {
        const auto [lm, ls] = stats(p, &SweepRun::final_train_loss);
        const auto [tm, ts] = stats(p, &SweepRun::train_acc1);
        const auto [vm, vs] = stats(p, &SweepRun::val_acc1);
        std::snprintf(buf, sizeof buf, "%s,%.17g,%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g", res.points[p].label.c_str(),
                      res.points[p].value, repeats, lm, ls, tm, ts, vm, vs);
        os << buf;
        if (kind == SweepKind::Epsilon) {
            const LeakageProbe lp = leakage_probe(res.points[p].value);
            std::snprintf(buf, sizeof buf, ",%.17g,%.17g", lp.measured, lp.closed_form);
            os << buf;
        }
        os << "\n";
    }
    return res;
}

}  // namespace orup
