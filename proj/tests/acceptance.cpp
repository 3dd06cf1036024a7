// Acceptance suite: one PASS/FAIL line per criterion; exit status 1 if any fail.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <numbers>
#include <sstream>
#include <string>

#include "oracles.hpp"
#include "orup/diagnostics.hpp"
#include "orup/residual.hpp"
#include "orup/sweep.hpp"
#include "orup/training.hpp"
#include "orup/verify.hpp"
#include "support.hpp"

using namespace orup;

namespace {

struct Outcome {
    bool ok = true;
    std::string detail;
};

// Accumulates a failure message for the first few broken checks.
class Check {
public:
    void expect(bool cond, const std::string& what) {
        if (cond) return;
        ok_ = false;
        if (++failures_ <= 3) msgs_ += (msgs_.empty() ? "" : "; ") + what;
    }
    Outcome done(const std::string& summary) const {
        std::string d = summary;
        if (!ok_) d += " | " + std::to_string(failures_) + " failed: " + msgs_;
        return {ok_, d};
    }

private:
    bool ok_ = true;
    std::size_t failures_ = 0;
    std::string msgs_;
};

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

const std::string kSmoke = std::string(ORUP_SOURCE_DIR) + "/configs/smoke.json";

ExperimentConfig smoke(ConnectionKind kind) {
    ExperimentConfig c = load_config(kSmoke);
    ConnectionSpec s = c.model.connection_plan.front();
    s.kind = kind;
    c.model.connection_plan.assign(c.model.num_junctions(), s);
    return c;
}

// Smaller variant of the smoke run for the bitwise comparisons.
ExperimentConfig short_run(ConnectionKind kind) {
    ExperimentConfig c = smoke(kind);
    c.data.n_train = 256;
    c.data.n_val = 64;
    c.epochs = 3;
    c.model.connection_plan[1].pi = 0.5;
    c.data.augment.hflip_p = 0.5;
    c.data.augment.pad = 1;
    return c;
}

std::string slurp(const std::string& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

bool same_records(const NamedTensors& a, const NamedTensors& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i].first != b[i].first || a[i].second.shape() != b[i].second.shape()) return false;
        const auto x = a[i].second.data(), y = b[i].second.data();
        if (!std::equal(x.begin(), x.end(), y.begin(), y.end())) return false;
    }
    return true;
}

Outcome leakage_identity() {
    Check c;
    Rng rng(101);
    const double eps = 1e-6;
    std::size_t pairs = 0;
    double worst = 0.0;
    for (std::size_t d : {2, 16, 384}) {
        for (bool global : {false, true}) {
            // feature-wise groups are rows of [1,d]; global groups flatten [1,2,d]
            const Shape shape = global ? Shape{1, 2, d} : Shape{1, d};
            const DimSet dims = global ? DimSet{1, 2} : DimSet{1};
            for (int k = 0; k < 1000; ++k) {
                const Tensor x = testing::random_tensor(rng, shape), f = testing::random_tensor(rng, shape);
                const Tensor fp = decompose(x, f, dims, eps).f_perp;
                double xfp = 0.0, xf = 0.0, xx = 0.0;
                for (std::size_t i = 0; i < x.numel(); ++i) {
                    xfp += x[i] * fp[i];
                    xf += x[i] * f[i];
                    xx += x[i] * x[i];
                }
                const double closed = eps * xf / (xx + eps);
                const double err = std::abs(xfp - closed) / (1.0 + std::abs(xf));
                worst = std::max(worst, err);
                c.expect(err <= 1e-12, "d=" + std::to_string(d) + (global ? " global" : " feature"));
                ++pairs;
            }
        }
    }
    return c.done(std::to_string(pairs) + " pairs, worst scaled error " + fmt("%.2e", worst));
}

Outcome identity_path() {
    Check c;
    double worst = 0.0;
    std::size_t cases = 0;
    for (std::size_t d : {2, 4, 8, 16}) {
        for (std::uint64_t s = 0; s < 50; ++s) {
            Rng rng(derive_seed(202, d * 1000 + s));
            const ModuleFn f = random_two_layer_module(d, d, rng);
            const JacobianReport r = check_identity_path(f, normal_vector(rng, d), 1e-6, 1e-5);
            worst = std::max(worst, r.max_abs_err);
            c.expect(r.passed, "d=" + std::to_string(d) + " seed " + std::to_string(s));
            ++cases;
        }
    }
    return c.done(std::to_string(cases) + " cases, max |J - I| " + fmt("%.2e", worst));
}

Outcome expansion() {
    Check c;
    double worst = 0.0;
    std::size_t cases = 0;
    for (std::size_t d : {2, 3, 4, 5, 6, 7, 8}) {
        for (std::uint64_t s = 0; s < 50; ++s) {
            Rng rng(derive_seed(303, d * 1000 + s));
            const ModuleFn f = random_two_layer_module(d, d, rng);
            const JacobianReport r = check_dsnxn_expansion(f, normal_vector(rng, d), 1e-6, 1e-5);
            worst = std::max(worst, r.max_abs_err);
            c.expect(r.passed, "d=" + std::to_string(d) + " seed " + std::to_string(s));
            ++cases;
        }
    }
    return c.done(std::to_string(cases) + " cases, max error " + fmt("%.2e", worst));
}

Outcome unified_degeneracies() {
    Check c;
    Rng rng(404);
    double worst = 0.0;
    for (int k = 0; k < 100; ++k) {
        const Tensor x = testing::random_tensor(rng, {3, 12}), f = testing::random_tensor(rng, {3, 12});
        const Tensor lin = unified_update(x, f, std::numbers::sqrt2, std::numbers::pi / 4, {1}, 1e-6);
        const Tensor orth = unified_update(x, f, 1.0, 0.0, {1}, 1e-6);
        const Tensor fp = decompose(x, f, {1}, 1e-6).f_perp;
        for (std::size_t i = 0; i < x.numel(); ++i) {
            const double e1 = std::abs(lin[i] - (x[i] + f[i])), e2 = std::abs(orth[i] - (x[i] + fp[i]));
            worst = std::max({worst, e1, e2});
            c.expect(e1 <= 1e-12 && e2 <= 1e-12, "input " + std::to_string(k));
        }
    }
    return c.done("100 inputs, worst elementwise " + fmt("%.2e", worst));
}

Outcome metric_oracles() {
    Check c;
    Rng rng(505);
    for (int k = 0; k < 10; ++k) {
        Tensor f = testing::gaussian_tensor(rng, {120, 8});
        for (std::size_t i = 0; i < 120; ++i)
            for (std::size_t j = 0; j < 8; ++j) f.mutable_data()[i * 8 + j] *= 0.5 + static_cast<double>(j);
        const double h = testing::oracle_entropy(f);
        c.expect(std::abs(spectral_entropy(f) - h) <= 1e-8, "spectral entropy");
        c.expect(std::abs(effective_rank(f) - std::exp(h)) <= 1e-8, "effective rank");
    }
    const Tensor x = testing::gaussian_tensor(rng, {200, 10});
    c.expect(std::abs(cka_linear(x, x) - 1.0) <= 1e-10, "CKA(X,X)");
    for (int k = 0; k < 5; ++k) {
        const Tensor q = testing::random_orthonormal(rng, 10);
        c.expect(std::abs(cka_linear(x, matmul(x, q)) - 1.0) <= 1e-8, "CKA rotation");
    }
    std::vector<double> rows;
    for (std::size_t k = 0; k < 10; ++k)
        for (double sign : {1.0, -1.0})
            for (std::size_t j = 0; j < 10; ++j) rows.push_back(j == k ? sign : 0.0);
    const double uniform = effective_rank(Tensor({20, 10}, rows));
    c.expect(std::abs(uniform - 10.0) <= 1e-8, "uniform spectrum");
    return c.done("uniform-spectrum effective rank " + fmt("%.12f", uniform));
}

Outcome flops() {
    Check c;
    Rng rng(606);
    for (int k = 0; k < 10; ++k) {
        const auto s = static_cast<std::int64_t>(1 + rng() % 1024), d = static_cast<std::int64_t>(1 + rng() % 4096);
        const std::int64_t attn = flops_estimate(s, d, FlopsJunction::Attn, FlopsConnection::Linear);
        const std::int64_t mlp = flops_estimate(s, d, FlopsJunction::Mlp, FlopsConnection::Linear);
        c.expect(orthogonal_overhead(s, d) == 6 * s * d + 2 * s, "overhead");
        c.expect(attn == 8 * s * d * d + 4 * s * s * d + s * d, "attention base");
        c.expect(mlp == 16 * s * d * d + s * d, "mlp base");
        c.expect(flops_estimate(s, d, FlopsJunction::Attn, FlopsConnection::Orthogonal) == attn + 6 * s * d + 2 * s,
                 "attention orthogonal");
        c.expect(flops_estimate(s, d, FlopsJunction::Mlp, FlopsConnection::Orthogonal) == mlp + 6 * s * d + 2 * s,
                 "mlp orthogonal");
    }
    return c.done("10 random (s,d)");
}

Outcome gammas() {
    ModelConfig vit;
    vit.d_model = 384;
    vit.n_layers = 6;
    ModelConfig r34;
    r34.family = ModelFamily::PreactResnet;
    r34.stage_channels = {64, 128, 256, 512};
    r34.blocks_per_stage = {3, 4, 6, 3};
    Check c;
    const double a = gamma(vit), b = gamma(r34);
    c.expect(a == 64.0, "vit-s");
    c.expect(b == 14.75, "resnetv2-34");
    return c.done("gamma " + fmt("%.2f", a) + " and " + fmt("%.2f", b));
}

Outcome smoke_training() {
    Check c;
    std::string summary;
    for (ConnectionKind kind : {ConnectionKind::Linear, ConnectionKind::OrthogonalFeature}) {
        ExperimentConfig cfg = smoke(kind);
        cfg.output_dir = "acceptance/smoke_" + to_string(kind);
        const auto t0 = std::chrono::steady_clock::now();
        const RunResult r = train(cfg);
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        const std::string k = to_string(kind);
        c.expect(secs <= 300.0, k + " runtime");

        std::vector<double> losses;
        double acc = 0.0;
        for (const EpochRecord& m : r.metrics) {
            c.expect(std::isfinite(m.loss) && std::isfinite(m.acc1), k + " metrics finite");
            if (m.split == "train") losses.push_back(m.loss);
            if (m.split == "train_eval" && m.epoch == cfg.epochs) acc = m.acc1;
        }
        c.expect(losses.size() == cfg.epochs, k + " epoch rows");
        for (std::size_t i = 1; i < losses.size(); ++i) c.expect(losses[i] < losses[i - 1], k + " loss decrease");
        c.expect(acc >= 0.9, k + " train acc " + fmt("%.3f", acc));

        const std::vector<BlockTrace> traces = read_trace_csv(r.traces_path);
        c.expect(traces.size() == cfg.epochs * 32 * cfg.model.num_junctions(), k + " trace rows");
        for (const BlockTrace& t : traces) {
            c.expect(t.finite(), k + " trace finite");
            c.expect(t.pythagoras_holds(), k + " pythagoras");
        }
        summary += (summary.empty() ? "" : ", ") + k + " acc " + fmt("%.3f", acc) + " in " + fmt("%.1fs", secs);
    }
    return c.done(summary);
}

Outcome switch_semantics() {
    Check c;
    const ExperimentConfig plain = short_run(ConnectionKind::Linear);
    ExperimentConfig sw = plain;
    sw.switch_schedule = SwitchSchedule{1, plain.model.connection_plan, false};
    Trainer a(plain), b(sw);
    a.run();
    b.run();
    c.expect(a.last_train_loss() == b.last_train_loss(), "final loss");
    c.expect(same_records(a.checkpoint_records(), b.checkpoint_records()), "checkpoint records");

    ExperimentConfig to_orth = plain;
    std::vector<ConnectionSpec> orth = plain.model.connection_plan;
    for (auto& s : orth) s.kind = ConnectionKind::OrthogonalFeature;
    Trainer t(to_orth);
    t.evaluate_initial();
    t.run_epoch();
    bool nonzero_before = false;
    for (const auto& [name, buf] : t.optimizer().buffers())
        for (double v : buf) nonzero_before = nonzero_before || v != 0.0;
    c.expect(nonzero_before, "moments populated before the switch");
    t.apply_switch({1, orth, true});
    std::size_t buffers = 0;
    for (const auto& [name, buf] : t.optimizer().buffers()) {
        ++buffers;
        for (double v : buf) c.expect(v == 0.0, "buffer " + name + " not zeroed");
    }
    c.expect(t.optimizer().step_count() == 0, "step count reset");
    return c.done("L->L bitwise, " + std::to_string(buffers) + " moment buffers zeroed on reset");
}

Outcome determinism() {
    Check c;
    for (ConnectionKind kind : {ConnectionKind::Linear, ConnectionKind::OrthogonalFeature}) {
        ExperimentConfig cfg = short_run(kind);
        cfg.output_dir = "acceptance/det_a_" + to_string(kind);
        const RunResult a = train(cfg);
        cfg.output_dir = "acceptance/det_b_" + to_string(kind);
        const RunResult b = train(cfg);
        c.expect(a.final_train_loss == b.final_train_loss, to_string(kind) + " final loss");
        const std::string ca = slurp(a.checkpoint_path), cb = slurp(b.checkpoint_path);
        c.expect(!ca.empty() && ca == cb, to_string(kind) + " checkpoint bytes");
    }
    return c.done("two runs per kind, bitwise-equal loss and checkpoint files");
}

Outcome epsilon_sweep() {
    Check c;
    const ExperimentConfig base = smoke(ConnectionKind::OrthogonalFeature);
    const auto points = sweep_points(SweepKind::Epsilon, base);
    c.expect(points.size() == 6, "grid size");
    double prev = -INFINITY, worst = 0.0;
    for (const SweepPoint& p : points) {
        const double eps = p.config.model.connection_plan.front().epsilon;
        const LeakageProbe lp = leakage_probe(eps);
        const double rel = std::abs(lp.measured - lp.closed_form) / std::abs(lp.closed_form);
        worst = std::max(worst, rel);
        c.expect(rel <= 1e-12, p.label + " relative " + fmt("%.2e", rel));
        c.expect(lp.measured > prev, p.label + " monotone");
        prev = lp.measured;
    }
    return c.done(std::to_string(points.size()) + " grid points, worst relative " + fmt("%.2e", worst));
}

}  // namespace

int main() {
    struct Criterion {
        std::string name;
        std::function<Outcome()> run;
        double budget_s;  // 0 = no time limit
    };
    const std::vector<Criterion> criteria{
        {"leakage identity", leakage_identity, 5},
        {"identity gradient path", identity_path, 60},
        {"s(x)x Jacobian expansion", expansion, 60},
        {"unified degeneracies", unified_degeneracies, 0},
        {"metric oracles", metric_oracles, 0},
        {"FLOPs formulas", flops, 0},
        {"gamma values", gammas, 0},
        {"smoke training", smoke_training, 0},
        {"switch semantics", switch_semantics, 0},
        {"determinism", determinism, 0},
        {"epsilon sweep leakage", epsilon_sweep, 0},
    };
    int failed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = criteria[i].run();
        } catch (const std::exception& e) {
            o = {false, std::string("threw: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (criteria[i].budget_s > 0 && secs > criteria[i].budget_s) {
            o.ok = false;
            o.detail += " | over the " + fmt("%.0fs", criteria[i].budget_s) + " budget";
        }
        std::printf("%s %2zu %-26s %6.1fs  %s\n", o.ok ? "PASS" : "FAIL", i + 1, criteria[i].name.c_str(), secs,
                    o.detail.c_str());
        std::fflush(stdout);
        failed += o.ok ? 0 : 1;
    }
    std::printf("%zu/%zu criteria passed\n", criteria.size() - failed, criteria.size());
    return failed == 0 ? 0 : 1;
}
