#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "orup/diagnostics.hpp"
#include "orup/sweep.hpp"
#include "orup/training.hpp"

using namespace orup;
using nlohmann::json;

namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / "orup_cli_test";
    fs::create_directories(dir);
    return dir / name;
}

json tiny_doc() {
    return json::parse(R"({
      "model": {"family": "transformer", "d_model": 16, "n_layers": 2, "n_heads": 2, "patch_size": 4,
                "image_size": 8, "n_classes": 4, "connection": {"kind": "orthogonal_feature"}},
      "optimizer": {"kind": "adamw", "lr": 0.003},
      "data": {"n_train": 32, "n_val": 16, "n_classes": 4},
      "seeds": {"init": 1, "data": 2, "pi": 3, "eval": 4},
      "epochs": 1, "batch_size": 16, "topk": 2
    })");
}

std::string write_config(const std::string& name, const json& doc) {
    const std::string p = scratch(name).string();
    std::ofstream(p) << doc.dump(2);
    return p;
}

struct Proc {
    int status = -1;
    std::string out;
};

Proc run(const std::string& args) {
    Proc p;
    const std::string cmd = std::string(ORUP_CLI) + " " + args + " 2>&1";
    FILE* pipe = popen(cmd.c_str(), "r");
    REQUIRE(pipe != nullptr);
    char buf[4096];
    while (std::size_t n = std::fread(buf, 1, sizeof buf, pipe)) p.out.append(buf, n);
    const int raw = pclose(pipe);
    p.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::size_t count_lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

}  // namespace

TEST_CASE("sweep grids") {
    const auto eps = epsilon_grid();
    REQUIRE(eps.size() == 6);
    for (std::size_t i = 0; i < 6; ++i) CHECK(eps[i] == std::pow(10.0, -8.0 + static_cast<double>(i)));
    CHECK(pi_grid() == std::vector<double>{0.0, 0.25, 0.5, 0.75, 1.0});
    CHECK(pattern_grid(6).size() == 8);
    const auto two = pattern_grid(2);
    // with two blocks "all" coincides with {0, 1}
    REQUIRE(two.size() == 2);
    CHECK(two[0].empty());
    CHECK(two[1] == std::vector<std::size_t>{0, 1});
    CHECK(pattern_grid(3).back() == std::vector<std::size_t>{0, 1, 2});
    CHECK_THROWS_AS(sweep_kind_from_string("gamma"), ConfigError);
    for (SweepKind k : {SweepKind::Epsilon, SweepKind::Pi, SweepKind::Pattern, SweepKind::Lr}) {
        CHECK(sweep_kind_from_string(to_string(k)) == k);
    }
}

TEST_CASE("sweep points") {
    ExperimentConfig base = parse_config(tiny_doc());
    base.model.connection_plan.assign(4, ConnectionSpec{});
    const auto e = sweep_points(SweepKind::Epsilon, base);
    REQUIRE(e.size() == 6);
    for (std::size_t i = 0; i < 6; ++i) {
        for (const auto& s : e[i].config.model.connection_plan) {
            CHECK(s.kind == ConnectionKind::OrthogonalFeature);
            CHECK(s.epsilon == epsilon_grid()[i]);
        }
    }
    const auto p = sweep_points(SweepKind::Pi, base);
    REQUIRE(p.size() == 5);
    CHECK(p[1].config.model.connection_plan[3].pi == 0.25);
    const auto l = sweep_points(SweepKind::Lr, base);
    CHECK(l.size() == lr_grid().size());
    CHECK(l[2].config.optimizer.lr == lr_grid()[2]);
    const auto pat = sweep_points(SweepKind::Pattern, base);
    REQUIRE(pat.size() == 2);
    CHECK(pat[0].config.model.connection_plan[0].kind == ConnectionKind::Linear);
    CHECK(pat[1].label == "layers_all");
    CHECK(pat[1].config.model.connection_plan[3].kind == ConnectionKind::OrthogonalFeature);
}

TEST_CASE("leakage probe tracks the closed form across the grid") {
    double prev = -INFINITY;
    for (double e : epsilon_grid()) {
        const LeakageProbe lp = leakage_probe(e);
        CHECK(lp.closed_form > 0.0);
        CHECK(std::abs(lp.measured - lp.closed_form) <= 1e-12 * std::abs(lp.closed_form));
        CHECK(lp.measured > prev);
        prev = lp.measured;
    }
}

TEST_CASE("run_sweep writes a summary and is thread-count independent") {
    const ExperimentConfig base = parse_config(tiny_doc());
    const SweepResult a = run_sweep(SweepKind::Epsilon, base, scratch("sweep_a").string(), 2, 1);
    const SweepResult b = run_sweep(SweepKind::Epsilon, base, scratch("sweep_b").string(), 2, 3);
    REQUIRE(a.runs.size() == 12);
    for (std::size_t i = 0; i < a.runs.size(); ++i) {
        CHECK(a.runs[i].seed_offset == b.runs[i].seed_offset);
        CHECK(a.runs[i].final_train_loss == b.runs[i].final_train_loss);
    }
    CHECK(a.runs[1].seed_offset == 1000);
    CHECK(a.runs[2].seed_offset == 1);
    const std::string summary = slurp(a.summary_path);
    CHECK(count_lines(summary) == 7);
    CHECK(summary.rfind("label,value,repeats,train_loss_mean,train_loss_std", 0) == 0);
    CHECK(summary.find("leakage_measured,leakage_closed_form") != std::string::npos);
    CHECK(summary.find("eps_1e-08,") != std::string::npos);
    CHECK(fs::exists(scratch("sweep_a") / "eps_1e-03" / "rep1" / "metrics.csv"));
    CHECK_THROWS_AS(run_sweep(SweepKind::Lr, base, scratch("sweep_c").string(), 0, 1), ConfigError);
}

TEST_CASE("cli train writes the four artifacts and the snapshot reproduces the run") {
    const std::string cfg = write_config("tiny.json", tiny_doc());
    const fs::path out1 = scratch("train1"), out2 = scratch("train2");
    const Proc p = run("train --config " + cfg + " --out " + out1.string());
    INFO(p.out);
    REQUIRE(p.status == 0);
    for (const char* f : {"metrics.csv", "traces.csv", "checkpoint.orup", "config.resolved.json"}) {
        CHECK(fs::exists(out1 / f));
    }
    const std::string metrics = slurp(out1 / "metrics.csv");
    CHECK(metrics.rfind("epoch,split,loss,acc1,acck,lr\n", 0) == 0);
    CHECK(count_lines(metrics) == 1 + 5);
    std::string traces = slurp(out1 / "traces.csv");
    // a leading comment documents the aggregation
    REQUIRE(traces.rfind("# ", 0) == 0);
    traces.erase(0, traces.find('\n') + 1);
    CHECK(traces.rfind("step,epoch,block_index,junction,x_norm_sq,f_norm_sq,f_par_norm_sq,f_perp_norm_sq,cos_xf,s_mean", 0) == 0);
    CHECK(count_lines(traces) == 1 + 2 * 4);

    const Proc again = run("train --config " + (out1 / "config.resolved.json").string() + " --out " + out2.string());
    REQUIRE(again.status == 0);
    CHECK(slurp(out1 / "checkpoint.orup") == slurp(out2 / "checkpoint.orup"));
    CHECK(slurp(out1 / "metrics.csv") == slurp(out2 / "metrics.csv"));
    CHECK(slurp(out1 / "traces.csv") == slurp(out2 / "traces.csv"));

    const Proc probe = run("probe --config " + cfg + " --checkpoint " + (out1 / "checkpoint.orup").string() +
                           " --reference " + (out2 / "checkpoint.orup").string() + " --split val");
    INFO(probe.out);
    REQUIRE(probe.status == 0);
    const json report = json::parse(probe.out);
    CHECK(report["samples"] == 16);
    CHECK(std::abs(report["cka_linear"].get<double>() - 1.0) <= 1e-10);
    CHECK(report["effective_rank"].get<double>() >= 1.0);
}

TEST_CASE("cli errors") {
    json doc = tiny_doc();
    doc["epochz"] = 1;
    doc["batch_size"] = 0;
    const Proc bad = run("train --config " + write_config("bad.json", doc));
    CHECK(bad.status != 0);
    CHECK(bad.out.find("epochz: unknown key") != std::string::npos);
    CHECK(bad.out.find("batch_size must be positive") != std::string::npos);
    CHECK(run("nonsense").status != 0);
    CHECK(run("sweep --kind gamma --config " + write_config("ok.json", tiny_doc())).status != 0);
}

TEST_CASE("cli verify and flops") {
    const Proc v = run("verify");
    INFO(v.out);
    CHECK(v.status == 0);
    CHECK(count_lines(v.out) == 4);
    CHECK(v.out.find("FAIL") == std::string::npos);
    // a tolerance nobody can meet must fail the exit code
    CHECK(run("verify --dims 4 --seeds 2 --tol 1e-30").status == 1);

    const Proc f = run("flops --seq 65 --dim 64");
    REQUIRE(f.status == 0);
    const std::int64_t overhead = 6 * 65 * 64 + 2 * 65;
    CHECK(f.out.find(std::to_string(flops_estimate(65, 64, FlopsJunction::Attn, FlopsConnection::Linear))) !=
          std::string::npos);
    CHECK(f.out.find(" " + std::to_string(overhead) + "\n") != std::string::npos);
    CHECK(f.out.find(" " + std::to_string(2 * overhead) + "\n") != std::string::npos);
}

TEST_CASE("sweep via the cli") {
    const Proc s = run("sweep --kind pattern --config " + write_config("tiny2.json", tiny_doc()) + " --out " +
                       scratch("cli_sweep").string() + " --threads 2");
    INFO(s.out);
    REQUIRE(s.status == 0);
    CHECK(count_lines(slurp(scratch("cli_sweep") / "summary.csv")) == 1 + 2);
}
