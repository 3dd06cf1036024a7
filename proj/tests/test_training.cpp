#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "orup/training.hpp"
#include "support.hpp"

using namespace orup;
using testing::gaussian_tensor;
using testing::max_abs;

namespace {

ExperimentConfig tiny_config(ConnectionKind kind = ConnectionKind::Linear) {
    ExperimentConfig c;
    c.model.family = ModelFamily::Transformer;
    c.model.d_model = 16;
    c.model.n_layers = 1;
    c.model.n_heads = 2;
    c.model.patch_size = 4;
    c.model.image_size = 8;
    c.model.n_classes = 4;
    ConnectionSpec s;
    s.kind = kind;
    c.model.connection_plan.assign(2, s);
    c.data.n_train = 48;
    c.data.n_val = 16;
    c.data.n_classes = 4;
    c.optimizer.lr = 3e-3;
    c.optimizer.weight_decay = 1e-2;
    c.epochs = 2;
    c.batch_size = 16;
    c.topk = 2;
    c.seeds = {1, 2, 3, 4};
    return c;
}

std::vector<double> flat(const Model& m) {
    std::vector<double> out;
    for (const auto& e : m.parameters().entries()) out.insert(out.end(), e.tensor.data().begin(), e.tensor.data().end());
    return out;
}

double loss_at(const Tensor& logits, const std::vector<std::size_t>& labels, double ls, std::size_t K) {
    return cross_entropy(logits, smoothed_targets(labels, K, ls)).item();
}

}  // namespace

TEST_CASE("step_lr examples") {
    ScheduleSpec ms;
    ms.kind = ScheduleKind::MultiStep;
    ms.milestones = {80, 120};
    ms.decay_factor = 0.2;
    CHECK(step_lr(ms, 0.1, 200, 10, 79, 9) == 0.1);
    CHECK(std::abs(step_lr(ms, 0.1, 200, 10, 80, 0) - 0.02) < 1e-15);
    CHECK(std::abs(step_lr(ms, 0.1, 200, 10, 120, 0) - 0.004) < 1e-15);

    ScheduleSpec cw;
    cw.kind = ScheduleKind::CosineWarmup;
    cw.warmup_epochs = 2;
    cw.min_lr = 1e-5;
    const std::size_t E = 10, S = 7;
    CHECK(step_lr(cw, 0.5, E, S, 1, S - 1) == 0.5);
    CHECK(step_lr(cw, 0.5, E, S, 2, 0) == 0.5);
    CHECK(step_lr(cw, 0.5, E, S, 0, 0) == doctest::Approx(0.5 / 14));
    CHECK(std::abs(step_lr(cw, 0.5, E, S, E - 1, S - 1) - 1e-5) <= 1e-12);
    double prev = INFINITY;
    for (std::size_t e = 2; e < E; ++e) {
        for (std::size_t s = 0; s < S; ++s) {
            const double lr = step_lr(cw, 0.5, E, S, e, s);
            CHECK(lr <= prev);
            CHECK(lr >= cw.min_lr);
            prev = lr;
        }
    }
    ScheduleSpec constant;
    CHECK(step_lr(constant, 0.3, 3, 2, 2, 1) == 0.3);
    CHECK_THROWS_AS(step_lr(constant, 0.3, 3, 2, 3, 0), ContractError);
    CHECK_THROWS_AS(step_lr(constant, 0.3, 3, 2, 0, 2), ContractError);
}

TEST_CASE("weight decay applies to matrices only") {
    CHECK(decays("blocks.0.attn.q.weight"));
    CHECK(decays("head.weight"));
    CHECK(decays("blocks.3.conv1.weight"));
    CHECK_FALSE(decays("blocks.0.ln1.weight"));
    CHECK_FALSE(decays("blocks.0.bn2.weight"));
    CHECK_FALSE(decays("final_ln.weight"));
    CHECK_FALSE(decays("head.bias"));
    CHECK_FALSE(decays("cls_token"));
    CHECK_FALSE(decays("pos_embed"));
    CHECK_FALSE(decays("junction.0.alpha"));
}

TEST_CASE("AdamW decoupled decay contracts exactly under zero gradients") {
    ParameterStore ps;
    Tensor w = ps.add("layer.weight", Tensor::parameter({3}, {1.0, -2.0, 0.5}));
    OptimizerSpec spec;
    spec.lr = 0.01;
    spec.weight_decay = 0.3;
    Optimizer opt(spec);
    const double factor = 1.0 - spec.lr * spec.weight_decay;
    for (int step = 0; step < 20; ++step) {
        const std::vector<double> before(w.data().begin(), w.data().end());
        w.impl()->grad_buffer();
        REQUIRE(w.has_grad());
        opt.step(ps, spec.lr);
        for (std::size_t i = 0; i < 3; ++i) CHECK(w[i] == before[i] * factor);
    }
    CHECK(opt.step_count() == 20);
}

TEST_CASE("optimizer hand values") {
    SUBCASE("sgd momentum") {
        ParameterStore ps;
        Tensor w = ps.add("a.weight", Tensor::parameter({1}, {1.0}));
        Tensor b = ps.add("a.bias", Tensor::parameter({1}, {1.0}));
        OptimizerSpec spec;
        spec.kind = OptimizerKind::SgdMomentum;
        spec.momentum = 0.9;
        spec.weight_decay = 0.1;
        Optimizer opt(spec);
        for (Tensor* t : {&w, &b}) t->impl()->grad_buffer()[0] = 0.5;
        opt.step(ps, 0.1);
        CHECK(w[0] == doctest::Approx(1.0 - 0.1 * 0.6));
        CHECK(b[0] == doctest::Approx(1.0 - 0.1 * 0.5));
        const double w1 = w[0];
        opt.step(ps, 0.1);
        CHECK(w[0] == doctest::Approx(w1 - 0.1 * (0.9 * 0.6 + 0.5 + 0.1 * w1)));
        CHECK(opt.buffers().count("momentum/a.weight") == 1);
    }
    SUBCASE("adamw first step moves by lr") {
        ParameterStore ps;
        Tensor w = ps.add("a.bias", Tensor::parameter({2}, {0.0, 0.0}));
        w.impl()->grad_buffer() = {3.0, -0.2};
        Optimizer opt(OptimizerSpec{});
        opt.step(ps, 0.01);
        CHECK(w[0] == doctest::Approx(-0.01).epsilon(1e-6));
        CHECK(w[1] == doctest::Approx(0.01).epsilon(1e-6));
    }
    SUBCASE("frozen and gradient-free tensors are skipped") {
        ParameterStore ps;
        Tensor frozen = ps.add("bn.running_mean", Tensor({1}, {2.0}), false);
        Tensor idle = ps.add("x.weight", Tensor::parameter({1}, {2.0}));
        Optimizer opt(OptimizerSpec{});
        opt.step(ps, 0.1);
        CHECK(frozen[0] == 2.0);
        CHECK(idle[0] == 2.0);
    }
}

TEST_CASE("optimizer reset and state round trip") {
    ParameterStore ps;
    Tensor w = ps.add("a.weight", Tensor::parameter({2}, {1.0, 2.0}));
    Optimizer opt(OptimizerSpec{});
    for (int i = 0; i < 3; ++i) {
        w.impl()->grad_buffer() = {0.1 * i + 0.1, -0.3};
        opt.step(ps, 0.01);
    }
    Optimizer copy(OptimizerSpec{});
    copy.load_state(opt.state());
    CHECK(copy.step_count() == 3);
    CHECK(copy.buffers() == opt.buffers());
    opt.reset();
    CHECK(opt.step_count() == 0);
    CHECK_FALSE(opt.buffers().empty());
    for (const auto& [name, buf] : opt.buffers()) {
        for (double v : buf) CHECK(v == 0.0);
    }
}

TEST_CASE("label smoothing floor") {
    const std::size_t K = 5;
    const std::vector<std::size_t> labels{2};
    for (double ls : {0.0, 0.1, 0.3}) {
        const Tensor t = smoothed_targets(labels, K, ls);
        double sum = 0.0, entropy = 0.0;
        for (double v : t.data()) {
            sum += v;
            if (v > 0) entropy -= v * std::log(v);
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-15));
        auto logits_with_margin = [&](double m) {
            std::vector<double> z(K, 0.0);
            z[2] = m;
            return Tensor({1, K}, z);
        };
        // the cross-entropy never goes below H(target)
        for (double m : {0.0, 1.0, 3.0, 10.0, 30.0}) CHECK(loss_at(logits_with_margin(m), labels, ls, K) >= entropy - 1e-12);
        if (ls == 0.0) {
            // zero floor, approached as the margin grows
            CHECK(loss_at(logits_with_margin(40.0), labels, ls, K) < 1e-15);
        } else {
            // the floor is reached at the margin where softmax equals the target
            const double on = 1.0 - ls + ls / K, off = ls / K;
            const double best = std::log(on / off);
            CHECK(std::abs(loss_at(logits_with_margin(best), labels, ls, K) - entropy) <= 1e-12);
            CHECK(loss_at(logits_with_margin(best + 5), labels, ls, K) > entropy + 1e-3);
        }
    }
    CHECK_THROWS_AS(smoothed_targets({5}, 5, 0.1), ContractError);
}

TEST_CASE("gradient clipping bounds the global norm") {
    ParameterStore ps;
    Tensor a = ps.add("a.weight", Tensor::parameter({2}, {0, 0}));
    Tensor b = ps.add("b.bias", Tensor::parameter({1}, {0}));
    a.impl()->grad_buffer() = {3.0, 4.0};
    b.impl()->grad_buffer() = {12.0};
    CHECK(clip_grad_norm(ps, 2.0) == doctest::Approx(13.0));
    double sq = 0.0;
    for (Tensor* t : {&a, &b})
        for (double g : t->grad()) sq += g * g;
    CHECK(std::abs(std::sqrt(sq) - 2.0) <= 1e-9);
    CHECK(clip_grad_norm(ps, 5.0) == doctest::Approx(2.0));
    CHECK(std::abs(a.grad()[0] * 13.0 / 2.0 - 3.0) < 1e-12);
    CHECK_THROWS_AS(clip_grad_norm(ps, 0.0), ContractError);
}

TEST_CASE("score_logits examples") {
    const Tensor perfect({3, 3}, {5, 0, 0, 0, 5, 0, 0, 0, 5});
    CHECK(score_logits(perfect, {0, 1, 2}, 1).acc1 == 1.0);
    const Tensor uniform = Tensor::zeros({3, 3});
    const EvalResult u = score_logits(uniform, {0, 1, 2}, 3);
    CHECK(u.acck == 1.0);
    // ties rank the lowest index first, so only label 0 counts at top-1
    CHECK(u.acc1 == doctest::Approx(1.0 / 3.0));
    CHECK(u.loss == doctest::Approx(std::log(3.0)));
    // row 0: argmax 1 (label 1, hit); row 1: argmax 0 (label 2, second is 2 -> top-2 hit);
    // row 2: argmax 2 (label 0, ranked last -> miss)
    const Tensor crafted({3, 3}, {0.1, 0.9, 0.0, 0.8, 0.1, 0.5, 0.3, 0.2, 0.9});
    const EvalResult c = score_logits(crafted, {1, 2, 1}, 2);
    CHECK(c.acc1 == doctest::Approx(1.0 / 3.0));
    CHECK(c.acck == doctest::Approx(2.0 / 3.0));
    CHECK_THROWS_AS(score_logits(crafted, {1, 2}, 1), DimensionError);
    CHECK_THROWS_AS(score_logits(crafted, {1, 2, 3}, 1), ContractError);
}

TEST_CASE("evaluate rejects an empty dataset") {
    const ExperimentConfig c = tiny_config();
    const Model m(c.model, 0);
    Dataset empty;
    empty.n_classes = 4;
    CHECK_THROWS_AS(evaluate(m, empty, 1, 8, 0), ContractError);
}

TEST_CASE("zero epochs gives the initial evaluation only") {
    ExperimentConfig c = tiny_config();
    c.epochs = 0;
    Trainer t(c);
    t.run();
    REQUIRE(t.metrics().size() == 2);
    CHECK(t.metrics()[0].epoch == 0);
    CHECK(t.metrics()[0].split == "train_eval");
    CHECK(t.metrics()[1].split == "val");
    CHECK(t.traces().traces().empty());
    CHECK(t.global_step() == 0);
}

TEST_CASE("lr = 0 leaves parameters unchanged") {
    ExperimentConfig c = tiny_config();
    c.optimizer.lr = 0.0;
    c.epochs = 1;
    Trainer t(c);
    const std::vector<double> before = flat(t.model());
    t.run();
    CHECK(flat(t.model()) == before);
    CHECK(t.global_step() == 3);
}

TEST_CASE("training is deterministic") {
    for (ConnectionKind k : {ConnectionKind::Linear, ConnectionKind::OrthogonalFeature}) {
        ExperimentConfig c = tiny_config(k);
        c.model.connection_plan[1].pi = 0.5;
        c.data.augment.hflip_p = 0.5;
        c.data.augment.pad = 1;
        Trainer a(c), b(c);
        a.run();
        b.run();
        CHECK(a.last_train_loss() == b.last_train_loss());
        const NamedTensors ra = a.checkpoint_records(), rb = b.checkpoint_records();
        REQUIRE(ra.size() == rb.size());
        for (std::size_t i = 0; i < ra.size(); ++i) {
            CHECK(ra[i].first == rb[i].first);
            const auto da = ra[i].second.data(), db = rb[i].second.data();
            CHECK(std::equal(da.begin(), da.end(), db.begin(), db.end()));
        }
    }
}

TEST_CASE("independent randomness streams") {
    ExperimentConfig c = tiny_config(ConnectionKind::OrthogonalFeature);
    c.epochs = 1;
    Trainer base(c);
    base.run();
    // pi = 1 consumes no draws, so the pi seed is irrelevant
    ExperimentConfig other_pi = c;
    other_pi.seeds.pi = 99;
    Trainer t1(other_pi);
    t1.run();
    CHECK(t1.last_train_loss() == base.last_train_loss());
    // with fractional pi it matters
    ExperimentConfig frac = c;
    frac.model.connection_plan[0].pi = 0.5;
    ExperimentConfig frac_other = frac;
    frac_other.seeds.pi = 99;
    Trainer t2(frac), t3(frac_other);
    t2.run();
    t3.run();
    CHECK(t2.last_train_loss() != t3.last_train_loss());
    // the init seed changes weights but not the data
    ExperimentConfig other_init = c;
    other_init.seeds.init = 50;
    Trainer t4(other_init);
    CHECK(max_abs(t4.data().train.images, base.data().train.images) == 0.0);
    CHECK(flat(t4.model()) != flat(Trainer(c).model()));
}

TEST_CASE("metric rows and trace cadence") {
    ExperimentConfig c = tiny_config();
    c.trace_every = 2;
    Trainer t(c);
    t.run();
    // epoch 0: train_eval, val; each epoch: train, train_eval, val
    REQUIRE(t.metrics().size() == 8);
    CHECK(t.metrics()[2].split == "train");
    CHECK(t.metrics()[2].epoch == 1);
    CHECK(t.metrics()[7].epoch == 2);
    CHECK(t.global_step() == 6);
    const auto& tr = t.traces().traces();
    REQUIRE(tr.size() == 3 * 2);
    CHECK(tr[0].step == 0);
    CHECK(tr[2].step == 2);
    CHECK(tr[0].junction == Junction::Attn);
    CHECK(tr[1].junction == Junction::Mlp);
    CHECK(tr[5].epoch == 2);
    for (const BlockTrace& b : tr) {
        CHECK(b.finite());
        CHECK(b.pythagoras_holds());
    }
}

TEST_CASE("switch semantics") {
    ExperimentConfig c = tiny_config();
    c.epochs = 3;
    SUBCASE("linear to linear without reset matches the plain run") {
        ExperimentConfig sw = c;
        sw.switch_schedule = SwitchSchedule{1, c.model.connection_plan, false};
        Trainer a(c), b(sw);
        a.run();
        b.run();
        CHECK(a.last_train_loss() == b.last_train_loss());
        CHECK(flat(a.model()) == flat(b.model()));
    }
    SUBCASE("reset zeroes every moment buffer") {
        Trainer t(c);
        t.run_epoch();
        REQUIRE_FALSE(t.optimizer().buffers().empty());
        std::vector<ConnectionSpec> orth(2);
        for (auto& s : orth) s.kind = ConnectionKind::OrthogonalFeature;
        t.apply_switch({1, orth, true});
        for (const auto& [name, buf] : t.optimizer().buffers()) {
            for (double v : buf) CHECK(v == 0.0);
        }
        CHECK(t.optimizer().step_count() == 0);
        CHECK(t.model().connection_plan()[0].kind == ConnectionKind::OrthogonalFeature);
        t.run_epoch();
    }
    SUBCASE("no reset preserves the moments bitwise") {
        Trainer t(c);
        t.run_epoch();
        const auto before = t.optimizer().buffers();
        const auto steps = t.optimizer().step_count();
        std::vector<ConnectionSpec> orth(2);
        for (auto& s : orth) s.kind = ConnectionKind::OrthogonalFeature;
        t.apply_switch({1, orth, false});
        CHECK(t.optimizer().buffers() == before);
        CHECK(t.optimizer().step_count() == steps);
    }
    SUBCASE("plan length mismatch") {
        Trainer t(c);
        CHECK_THROWS_AS(t.apply_switch({1, std::vector<ConnectionSpec>(3), true}), ConfigError);
    }
    SUBCASE("scheduled switch restarts the schedule") {
        ExperimentConfig sw = c;
        sw.schedule.kind = ScheduleKind::CosineWarmup;
        sw.schedule.warmup_epochs = 1;
        std::vector<ConnectionSpec> orth(2);
        for (auto& s : orth) s.kind = ConnectionKind::OrthogonalFeature;
        sw.switch_schedule = SwitchSchedule{1, orth, true};
        Trainer t(sw);
        t.run_epoch();
        t.apply_switch(*sw.switch_schedule);
        t.run_epoch();
        // first epoch after the restart is a warmup epoch again, ending at the base lr
        CHECK(t.current_lr() == sw.optimizer.lr);
    }
}

TEST_CASE("divergence dumps the last traces") {
    ExperimentConfig c = tiny_config();
    c.epochs = 2;
    Trainer t(c);
    t.run_epoch();
    for (double& v : t.model().parameters().get("head.weight").impl()->data) v = std::nan("");
    try {
        t.run_epoch();
        FAIL("expected divergence");
    } catch (const TrainingDiverged& e) {
        CHECK_FALSE(e.last_traces.empty());
    }
}

TEST_CASE("checkpoint restore reproduces the model") {
    ExperimentConfig c = tiny_config(ConnectionKind::OrthogonalFeature);
    std::vector<ConnectionSpec> uni(2);
    for (auto& s : uni) s.kind = ConnectionKind::Unified;
    c.switch_schedule = SwitchSchedule{1, uni, true};
    const auto dir = std::filesystem::temp_directory_path() / "orup_training_test";
    c.output_dir = dir.string();
    const RunResult r = train(c);
    for (const std::string& p : {r.metrics_path, r.traces_path, r.checkpoint_path, r.config_path}) {
        CHECK(std::filesystem::exists(p));
    }
    const Model m = restore_model(c, read_checkpoint(r.checkpoint_path));
    CHECK(m.connection_plan()[0].kind == ConnectionKind::Unified);
    const DataSplits data = load_data(c.data, c.seeds.data);
    const EvalResult ev = evaluate(m, *data.val, c.topk, c.batch_size, c.seeds.eval);
    CHECK(ev.loss == r.metrics.back().loss);

    NamedTensors missing = read_checkpoint(r.checkpoint_path);
    missing.erase(missing.begin());
    CHECK_THROWS_AS(restore_model(c, missing), ConsistencyError);
}
