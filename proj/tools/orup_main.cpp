#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "orup/checkpoint.hpp"
#include "orup/config.hpp"
#include "orup/diagnostics.hpp"
#include "orup/sweep.hpp"
#include "orup/training.hpp"
#include "orup/verify.hpp"

using namespace orup;

namespace {

ExperimentConfig load(const std::string& path, const std::string& out, std::uint64_t seed_offset) {
    ExperimentConfig c = load_config(path);
    if (!out.empty()) c.output_dir = out;
    apply_seed_offset(c, seed_offset);
    return c;
}

int cmd_train(const std::string& config, const std::string& out, std::uint64_t offset) {
    const RunResult r = train(load(config, out, offset));
    std::printf("wrote %s\n      %s\n      %s\n      %s\n", r.metrics_path.c_str(), r.traces_path.c_str(),
                r.checkpoint_path.empty() ? "(checkpoint disabled)" : r.checkpoint_path.c_str(), r.config_path.c_str());
    for (const EpochRecord& m : r.metrics) {
        if (m.epoch == r.metrics.back().epoch) {
            std::printf("epoch %zu %-10s loss %.6f acc1 %.4f acck %.4f\n", m.epoch, m.split.c_str(), m.loss, m.acc1, m.acck);
        }
    }
    return 0;
}

int cmd_sweep(const std::string& kind, const std::string& config, const std::string& out, std::uint64_t offset,
              std::size_t repeats, std::size_t threads) {
    const ExperimentConfig base = load(config, "", 0);
    const std::string dir = out.empty() ? base.output_dir + "_sweep_" + kind : out;
    const SweepResult r = run_sweep(sweep_kind_from_string(kind), base, dir, repeats, threads, offset);
    std::printf("%zu grid points x %zu repeats, summary at %s\n", r.points.size(), repeats, r.summary_path.c_str());
    return 0;
}

int cmd_verify(const std::vector<std::size_t>& dims, std::size_t seeds, double eps, double tol) {
    VerifyOptions o;
    o.dims = dims;
    o.seeds = seeds;
    o.eps = eps;
    o.tol = tol;
    bool ok = true;
    for (const VerifyLine& l : run_verify_suite(o)) {
        std::printf("%-20s %s  cases=%zu failures=%zu %s=%.3e\n", l.name.c_str(), l.passed() ? "PASS" : "FAIL", l.cases,
                    l.failures, l.name == "parallel_nonvanish" ? "min_value" : "max_err", l.worst);
        ok = ok && l.passed();
    }
    return ok ? 0 : 1;
}

int cmd_flops(const std::string& config, std::size_t seq, std::size_t dim) {
    std::vector<ConnectionSpec> plan;
    std::size_t layers = 1;
    if (!config.empty()) {
        const ExperimentConfig c = load_config(config);
        if (c.model.family != ModelFamily::Transformer) {
            std::fprintf(stderr, "flops: the estimate covers transformer sub-blocks only\n");
            return 2;
        }
        seq = c.model.num_tokens();
        dim = c.model.d_model;
        layers = c.model.n_layers;
        plan = c.model.connection_plan;
    } else {
        plan = {ConnectionSpec{ConnectionKind::OrthogonalFeature}, ConnectionSpec{ConnectionKind::OrthogonalFeature}};
    }
    const auto s = static_cast<std::int64_t>(seq), d = static_cast<std::int64_t>(dim);
    std::printf("s=%zu d=%zu\n", seq, dim);
    std::printf("%-6s %-5s %-20s %16s %16s %12s\n", "block", "junc", "connection", "linear", "used", "overhead");
    std::int64_t total_linear = 0, total_used = 0;
    for (std::size_t b = 0; b < layers; ++b) {
        for (std::size_t k = 0; k < 2; ++k) {
            const ConnectionSpec& spec = plan[2 * b + k];
            const FlopsJunction j = k == 0 ? FlopsJunction::Attn : FlopsJunction::Mlp;
            const std::int64_t lin = flops_estimate(s, d, j, FlopsConnection::Linear);
            const std::int64_t used =
                spec.is_orthogonal() ? flops_estimate(s, d, j, FlopsConnection::Orthogonal) : lin;
            total_linear += lin;
            total_used += used;
            std::printf("%-6zu %-5s %-20s %16lld %16lld %12lld\n", b, k == 0 ? "attn" : "mlp", to_string(spec.kind).c_str(),
                        static_cast<long long>(lin), static_cast<long long>(used), static_cast<long long>(used - lin));
        }
    }
    std::printf("%-33s %16lld %16lld %12lld\n", "total", static_cast<long long>(total_linear),
                static_cast<long long>(total_used), static_cast<long long>(total_used - total_linear));
    return 0;
}

int cmd_probe(const std::string& config, const std::string& checkpoint, const std::string& ref_config,
              const std::string& ref_checkpoint, const std::string& split, std::size_t limit, const std::string& out) {
    const ExperimentConfig c = load_config(config);
    const Model model = restore_model(c, read_checkpoint(checkpoint));
    const DataSplits data = load_data(c.data, c.seeds.data);
    const Dataset* ds = &data.train;
    if (split == "val") {
        if (!data.val) throw ConfigError("probe: config has no validation split");
        ds = &*data.val;
    }
    const EvalResult ev = evaluate(model, *ds, c.topk, c.batch_size, c.seeds.eval);
    const Tensor feats = extract_features(model, *ds, c.batch_size, c.seeds.eval, limit);
    std::optional<Tensor> ref;
    if (!ref_checkpoint.empty()) {
        const ExperimentConfig rc = ref_config.empty() ? c : load_config(ref_config);
        const Model rm = restore_model(rc, read_checkpoint(ref_checkpoint));
        ref = extract_features(rm, *ds, rc.batch_size, rc.seeds.eval, limit);
    }
    const MetricReport m = metric_report(feats, ref ? &*ref : nullptr);
    nlohmann::json j{{"split", split},
                     {"samples", feats.dim(0)},
                     {"acc1", ev.acc1},
                     {"acck", ev.acck},
                     {"loss", ev.loss},
                     {"effective_rank", m.effective_rank},
                     {"spectral_entropy", m.spectral_entropy},
                     {"feature_std", m.feature_std}};
    if (m.cka_linear) j["cka_linear"] = *m.cka_linear;
    std::cout << j.dump(2) << "\n";
    if (!out.empty()) {
        std::filesystem::create_directories(out);
        std::ofstream(std::filesystem::path(out) / "probe.json") << j.dump(2) << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Orthogonal residual update experiments"};
    app.require_subcommand(1);

    std::string config, out, kind, checkpoint, reference, reference_config, split = "val";
    std::uint64_t seed_offset = 0;
    std::size_t threads = 1, repeats = 1, seeds = 50, seq = 197, dim = 768, limit = 1000;
    std::vector<std::size_t> dims{2, 4, 8, 16};
    double eps = 1e-6, tol = 1e-5;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--out", out, "Output directory (overrides output_dir)");
        sub->add_option("--seed-offset", seed_offset, "Added to every seed");
        sub->add_option("--threads", threads, "Concurrent runs (sweep only; each run is single-threaded)");
    };

    CLI::App* train_cmd = app.add_subcommand("train", "Train one experiment");
    train_cmd->add_option("--config", config, "Experiment config (JSON)")->required();
    add_common(train_cmd);

    CLI::App* sweep_cmd = app.add_subcommand("sweep", "Run a grid of experiments");
    sweep_cmd->add_option("--kind", kind, "epsilon | pi | pattern | lr")->required();
    sweep_cmd->add_option("--config", config, "Base experiment config")->required();
    sweep_cmd->add_option("--repeats", repeats, "Runs per grid point");
    add_common(sweep_cmd);

    CLI::App* verify_cmd = app.add_subcommand("verify", "Finite-difference checks of the update Jacobians");
    verify_cmd->add_option("--dims", dims, "Input dimensions")->delimiter(',');
    verify_cmd->add_option("--seeds", seeds, "Random cases per dimension");
    verify_cmd->add_option("--eps", eps, "Projection epsilon");
    verify_cmd->add_option("--tol", tol, "Max abs Jacobian error");
    add_common(verify_cmd);

    CLI::App* flops_cmd = app.add_subcommand("flops", "Per-junction FLOPs table");
    flops_cmd->add_option("--config", config, "Experiment config; otherwise --seq/--dim");
    flops_cmd->add_option("--seq", seq, "Sequence length");
    flops_cmd->add_option("--dim", dim, "Model width");
    add_common(flops_cmd);

    CLI::App* probe_cmd = app.add_subcommand("probe", "Representation metrics of a checkpoint");
    probe_cmd->add_option("--config", config, "Config the checkpoint was trained with")->required();
    probe_cmd->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
    probe_cmd->add_option("--reference", reference, "Second checkpoint for CKA");
    probe_cmd->add_option("--reference-config", reference_config, "Config of the reference checkpoint");
    probe_cmd->add_option("--split", split, "train | val")->check(CLI::IsMember({"train", "val"}));
    probe_cmd->add_option("--limit", limit, "Samples used for the metrics (0 = all)");
    add_common(probe_cmd);

    CLI11_PARSE(app, argc, argv);

    try {
        if (*train_cmd) return cmd_train(config, out, seed_offset);
        if (*sweep_cmd) return cmd_sweep(kind, config, out, seed_offset, repeats, threads);
        if (*verify_cmd) return cmd_verify(dims, seeds, eps, tol);
        if (*flops_cmd) return cmd_flops(config, seq, dim);
        if (*probe_cmd) return cmd_probe(config, checkpoint, reference_config, reference, split, limit, out);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "%s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
