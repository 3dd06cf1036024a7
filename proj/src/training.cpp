#include "orup/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "orup/ops.hpp"

namespace orup {

double step_lr(const ScheduleSpec& schedule, double base_lr, std::size_t epochs, std::size_t steps_per_epoch,
               std::size_t epoch, std::size_t step) {
    if (steps_per_epoch == 0) throw ContractError("step_lr: zero steps per epoch");
    if (epoch >= epochs || step >= steps_per_epoch) throw ContractError("step_lr: position outside the schedule horizon");
    switch (schedule.kind) {
        case ScheduleKind::Constant:
            return base_lr;
        case ScheduleKind::MultiStep: {
            double lr = base_lr;
            for (std::size_t m : schedule.milestones) {
                if (m <= epoch) lr *= schedule.decay_factor;
            }
            return lr;
        }
        case ScheduleKind::CosineWarmup: {
            const std::size_t t = epoch * steps_per_epoch + step;
            const std::size_t total = epochs * steps_per_epoch;
            const std::size_t warm = schedule.warmup_epochs * steps_per_epoch;
            if (t + 1 == warm) return base_lr;
            if (t < warm) return base_lr * static_cast<double>(t + 1) / static_cast<double>(warm);
            const std::size_t span = total - warm - 1;
            const double p = span == 0 ? 1.0 : static_cast<double>(t - warm) / static_cast<double>(span);
            return schedule.min_lr + (base_lr - schedule.min_lr) * 0.5 * (1.0 + std::cos(std::numbers::pi * p));
        }
    }
    return base_lr;
}

bool decays(const std::string& name) {
    static const std::string suffix = ".weight";
    if (name.size() <= suffix.size() || name.compare(name.size() - suffix.size(), suffix.size(), suffix) != 0) {
        return false;
    }
    const std::string stem = name.substr(0, name.size() - suffix.size());
    const std::size_t dot = stem.rfind('.');
    const std::string seg = dot == std::string::npos ? stem : stem.substr(dot + 1);
    return !(seg.starts_with("ln") || seg.starts_with("bn") || seg.starts_with("final_"));
}

double clip_grad_norm(ParameterStore& params, double max_norm) {
    if (!(max_norm > 0.0)) throw ContractError("clip_grad_norm: max_norm must be positive");
    double sq = 0.0;
    for (const auto& e : params.entries()) {
        if (!e.trainable || !e.tensor.has_grad()) continue;
        for (double g : e.tensor.grad()) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (norm > max_norm) {
        const double scale = max_norm / norm;
        for (const auto& e : params.entries()) {
            if (!e.trainable || !e.tensor.has_grad()) continue;
            for (double& g : e.tensor.impl()->grad_buffer()) g *= scale;
        }
    }
    return norm;
}

void Optimizer::step(ParameterStore& params, double lr) {
    const double t = static_cast<double>(steps_ + 1);
    for (const auto& e : params.entries()) {
        if (!e.trainable || !e.tensor.has_grad()) continue;
        Tensor p = e.tensor;
        auto w = p.mutable_data();
        const auto g = p.grad();
        const double wd = decays(e.name) ? spec_.weight_decay : 0.0;
        if (spec_.kind == OptimizerKind::SgdMomentum) {
            if (spec_.momentum > 0.0) {
                auto& buf = buffers_["momentum/" + e.name];
                buf.resize(w.size(), 0.0);
                for (std::size_t i = 0; i < w.size(); ++i) {
                    buf[i] = spec_.momentum * buf[i] + (g[i] + wd * w[i]);
                    w[i] -= lr * buf[i];
                }
            } else {
                for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * (g[i] + wd * w[i]);
            }
        } else {
            auto& m = buffers_["m/" + e.name];
            auto& v = buffers_["v/" + e.name];
            m.resize(w.size(), 0.0);
            v.resize(w.size(), 0.0);
            const double c1 = 1.0 - std::pow(spec_.beta1, t);
            const double c2 = 1.0 - std::pow(spec_.beta2, t);
            const double shrink = 1.0 - lr * wd;
            for (std::size_t i = 0; i < w.size(); ++i) {
                w[i] *= shrink;
                m[i] = spec_.beta1 * m[i] + (1.0 - spec_.beta1) * g[i];
                v[i] = spec_.beta2 * v[i] + (1.0 - spec_.beta2) * g[i] * g[i];
                w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + spec_.adam_eps);
            }
        }
        for (double x : w) {
            if (!std::isfinite(x)) throw NonFiniteError("optimizer produced a non-finite value in " + e.name);
        }
    }
    ++steps_;
}

void Optimizer::reset() {
    for (auto& [_, buf] : buffers_) std::fill(buf.begin(), buf.end(), 0.0);
    steps_ = 0;
}

NamedTensors Optimizer::state() const {
    const std::string pre = kOptimizerPrefix;
    NamedTensors out;
    out.emplace_back(pre + "step", Tensor({1}, {static_cast<double>(steps_)}));
    for (const auto& [name, buf] : buffers_) out.emplace_back(pre + name, Tensor({buf.size()}, buf));
    return out;
}

void Optimizer::load_state(const NamedTensors& records) {
    const std::string pre = kOptimizerPrefix;
    buffers_.clear();
    steps_ = 0;
    for (const auto& [name, t] : records) {
        if (!name.starts_with(pre)) continue;
        const std::string key = name.substr(pre.size());
        if (key == "step") {
            steps_ = static_cast<std::uint64_t>(t.item());
        } else {
            buffers_[key] = std::vector<double>(t.data().begin(), t.data().end());
        }
    }
}

Tensor smoothed_targets(const std::vector<std::size_t>& labels, std::size_t n_classes, double label_smoothing) {
    const double off = label_smoothing / static_cast<double>(n_classes);
    std::vector<double> t(labels.size() * n_classes, off);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] >= n_classes) throw ContractError("label out of range");
        t[i * n_classes + labels[i]] += 1.0 - label_smoothing;
    }
    return Tensor({labels.size(), n_classes}, std::move(t));
}

EvalResult score_logits(const Tensor& logits, const std::vector<std::size_t>& labels, std::size_t k) {
    if (logits.ndim() != 2 || logits.dim(0) != labels.size()) throw DimensionError("score_logits: logits/labels mismatch");
    if (labels.empty()) throw ContractError("score_logits: empty batch");
    const std::size_t n = labels.size(), K = logits.dim(1);
    const auto z = logits.data();
    EvalResult r;
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t y = labels[i];
        if (y >= K) throw ContractError("label out of range");
        const double* row = z.data() + i * K;
        std::size_t ahead = 0;
        double mx = row[0];
        for (std::size_t c = 0; c < K; ++c) {
            if (row[c] > row[y] || (row[c] == row[y] && c < y)) ++ahead;
            mx = std::max(mx, row[c]);
        }
        double se = 0.0;
        for (std::size_t c = 0; c < K; ++c) se += std::exp(row[c] - mx);
        r.loss += mx + std::log(se) - row[y];
        if (ahead == 0) r.acc1 += 1.0;
        if (ahead < k) r.acck += 1.0;
    }
    r.acc1 /= static_cast<double>(n);
    r.acck /= static_cast<double>(n);
    r.loss /= static_cast<double>(n);
    return r;
}

namespace {

std::vector<std::size_t> iota_range(std::size_t begin, std::size_t end) {
    std::vector<std::size_t> idx;
    for (std::size_t i = begin; i < end; ++i) idx.push_back(i);
    return idx;
}

}  // namespace

EvalResult evaluate(const Model& model, const Dataset& data, std::size_t k, std::size_t batch_size,
                    std::uint64_t eval_seed) {
    if (data.size() == 0) throw ContractError("evaluate: empty dataset");
    if (batch_size == 0) throw ContractError("evaluate: zero batch size");
    NoGradScope no_grad;
    Rng rng(eval_seed);
    EvalResult total;
    for (std::size_t b = 0; b < data.size(); b += batch_size) {
        const auto idx = iota_range(b, std::min(data.size(), b + batch_size));
        std::vector<std::size_t> labels;
        for (std::size_t i : idx) labels.push_back(data.labels[i]);
        const ForwardResult fr = model.forward(gather_images(data.images, idx), rng, false);
        const EvalResult r = score_logits(fr.logits, labels, k);
        const double w = static_cast<double>(idx.size());
        total.acc1 += r.acc1 * w;
        total.acck += r.acck * w;
        total.loss += r.loss * w;
    }
    const double n = static_cast<double>(data.size());
    total.acc1 /= n;
    total.acck /= n;
    total.loss /= n;
    return total;
}

Tensor extract_features(const Model& model, const Dataset& data, std::size_t batch_size, std::uint64_t eval_seed,
                        std::size_t limit) {
    const std::size_t n = limit == 0 ? data.size() : std::min(limit, data.size());
    if (n == 0) throw ContractError("extract_features: empty dataset");
    NoGradScope no_grad;
    Rng rng(eval_seed);
    std::vector<double> rows;
    std::size_t width = 0;
    for (std::size_t b = 0; b < n; b += batch_size) {
        const auto idx = iota_range(b, std::min(n, b + batch_size));
        const ForwardResult fr = model.forward(gather_images(data.images, idx), rng, false);
        width = fr.features.dim(1);
        rows.insert(rows.end(), fr.features.data().begin(), fr.features.data().end());
    }
    return Tensor({n, width}, std::move(rows));
}

DataSplits load_data(const DataSpec& spec, std::uint64_t data_seed) {
    DataSplits out;
    if (spec.source == "synthetic") {
        SyntheticSpec s;
        s.n_classes = spec.n_classes;
        s.size = spec.size;
        s.channels = spec.channels;
        s.separation = spec.separation;
        s.prototype_seed = derive_seed(data_seed, 0);
        s.n = spec.n_train;
        s.seed = derive_seed(data_seed, 1);
        out.train = gen_synthetic(s);
        if (spec.n_val > 0) {
            s.n = spec.n_val;
            s.seed = derive_seed(data_seed, 2);
            out.val = gen_synthetic(s);
        }
    } else if (spec.source == "idx") {
        out.train = load_idx(spec.train_images, spec.train_labels);
        if (!spec.val_images.empty()) out.val = load_idx(spec.val_images, spec.val_labels);
        for (Dataset* d : {&out.train, out.val ? &*out.val : nullptr}) {
            if (!d) continue;
            for (std::size_t y : d->labels) {
                if (y >= spec.n_classes) throw ConsistencyError("idx label " + std::to_string(y) + " outside n_classes");
            }
            d->n_classes = spec.n_classes;
        }
    } else {
        throw ConfigError("unknown data source " + spec.source);
    }
    if (spec.normalize) {
        const auto mean = channel_means(out.train.images);
        const auto sd = channel_stddevs(out.train.images, mean);
        for (Dataset* d : {&out.train, out.val ? &*out.val : nullptr}) {
            if (!d) continue;
            d->images = normalize(d->images, mean, sd);
            d->mean = mean;
            d->stddev = sd;
        }
    }
    return out;
}

Trainer::Trainer(ExperimentConfig config) : Trainer(config, load_data(config.data, config.seeds.data)) {}

Trainer::Trainer(ExperimentConfig config, DataSplits data)
    : config_((config.validate(), std::move(config))),
      data_(std::move(data)),
      model_(config_.model, config_.seeds.init),
      optimizer_(config_.optimizer),
      data_rng_(derive_seed(config_.seeds.data, 3)),
      pi_rng_(config_.seeds.pi) {
    const ModelConfig& m = config_.model;
    for (const Dataset* d : {&data_.train, data_.val ? &*data_.val : nullptr}) {
        if (!d) continue;
        if (d->channels() != m.in_channels || d->height() != m.image_size || d->width() != m.image_size) {
            throw ConsistencyError("dataset images " + shape_str(d->images.shape()) + " do not match the model input");
        }
        if (d->n_classes != m.n_classes) throw ConsistencyError("dataset class count does not match the model");
    }
    lr_ = config_.optimizer.lr;
}

std::size_t Trainer::steps_per_epoch() const {
    return (data_.train.size() + config_.batch_size - 1) / config_.batch_size;
}

void Trainer::record_eval(std::size_t epoch, double lr) {
    const std::uint64_t seed = config_.seeds.eval;
    const EvalResult tr = evaluate(model_, data_.train, config_.topk, config_.batch_size, seed);
    metrics_.push_back({epoch, "train_eval", tr.loss, tr.acc1, tr.acck, lr});
    if (data_.val) {
        const EvalResult va = evaluate(model_, *data_.val, config_.topk, config_.batch_size, seed);
        metrics_.push_back({epoch, "val", va.loss, va.acc1, va.acck, lr});
    }
}

void Trainer::evaluate_initial() {
    if (initial_done_) return;
    initial_done_ = true;
    const double lr0 = config_.epochs > 0
                           ? step_lr(config_.schedule, config_.optimizer.lr, config_.epochs, steps_per_epoch(), 0, 0)
                           : config_.optimizer.lr;
    record_eval(0, lr0);
}

void Trainer::train_step(const std::vector<std::size_t>& batch, double lr, double& loss_sum, std::size_t& correct1,
                         std::size_t& correctk) {
    const AugmentOps& aug = config_.data.augment;
    Tensor images = gather_images(data_.train.images, batch);
    if (aug.hflip_p > 0.0 || aug.pad > 0 || aug.crop_h > 0 || aug.crop_w > 0) images = augment(images, aug, data_rng_);
    std::vector<std::size_t> labels;
    for (std::size_t i : batch) labels.push_back(data_.train.labels[i]);

    Tape tape;
    ForwardResult fr;
    Tensor loss;
    {
        TapeScope scope(tape);
        fr = model_.forward(images, pi_rng_, true);
        loss = cross_entropy(fr.logits, smoothed_targets(labels, config_.model.n_classes, config_.label_smoothing));
    }
    for (BlockTrace& t : fr.traces) {
        t.step = global_step_;
        t.epoch = epoch_ + 1;
    }
    last_step_traces_ = fr.traces;
    tape.backward(loss);

    ParameterStore& params = model_.parameters();
    for (const auto& e : params.entries()) {
        if (!e.tensor.has_grad()) continue;
        for (double g : e.tensor.grad()) {
            if (!std::isfinite(g)) throw NonFiniteError("non-finite gradient in " + e.name);
        }
    }
    if (config_.optimizer.grad_clip > 0.0) clip_grad_norm(params, config_.optimizer.grad_clip);
    optimizer_.step(params, lr);
    model_.project_constraints();
    params.zero_grad();

    if (global_step_ % config_.trace_every == 0) {
        for (const BlockTrace& t : fr.traces) recorder_.append(t);
    }
    ++global_step_;

    const EvalResult r = score_logits(fr.logits, labels, config_.topk);
    const double w = static_cast<double>(batch.size());
    loss_sum += loss.item() * w;
    correct1 += static_cast<std::size_t>(std::lround(r.acc1 * w));
    correctk += static_cast<std::size_t>(std::lround(r.acck * w));
}

void Trainer::run_epoch() {
    evaluate_initial();
    if (epoch_ >= config_.epochs) throw ContractError("run_epoch: training horizon exhausted");
    const std::size_t n = data_.train.size();
    const std::size_t steps = steps_per_epoch();
    const auto order = epoch_permutation(n, config_.seeds.data, epoch_);
    double loss_sum = 0.0;
    std::size_t c1 = 0, ck = 0;
    for (std::size_t s = 0; s < steps; ++s) {
        const std::size_t lo = s * config_.batch_size;
        const std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(lo),
                                             order.begin() + static_cast<std::ptrdiff_t>(std::min(n, lo + config_.batch_size)));
        lr_ = step_lr(config_.schedule, config_.optimizer.lr, config_.epochs - schedule_origin_, steps,
                      epoch_ - schedule_origin_, s);
        try {
            train_step(batch, lr_, loss_sum, c1, ck);
        } catch (const NonFiniteError& e) {
            std::vector<BlockTrace> dump = recorder_.last(64);
            dump.insert(dump.end(), last_step_traces_.begin(), last_step_traces_.end());
            throw TrainingDiverged("training diverged at epoch " + std::to_string(epoch_ + 1) + ", step " +
                                       std::to_string(global_step_) + ": " + e.what(),
                                   std::move(dump));
        }
    }
    ++epoch_;
    const double dn = static_cast<double>(n);
    last_train_loss_ = loss_sum / dn;
    metrics_.push_back({epoch_, "train", last_train_loss_, static_cast<double>(c1) / dn, static_cast<double>(ck) / dn, lr_});
    record_eval(epoch_, lr_);
}

void Trainer::apply_switch(const SwitchSchedule& schedule) {
    if (schedule.to_plan.size() != config_.model.num_junctions()) {
        throw ConfigError("switch plan has " + std::to_string(schedule.to_plan.size()) + " entries, model has " +
                          std::to_string(config_.model.num_junctions()) + " junctions");
    }
    model_.set_connection_plan(schedule.to_plan);
    if (schedule.reset_optimizer) {
        optimizer_.reset();
        schedule_origin_ = epoch_;
    }
}

void Trainer::run() {
    evaluate_initial();
    while (epoch_ < config_.epochs) {
        if (config_.switch_schedule && config_.switch_schedule->switch_epoch == epoch_) {
            apply_switch(*config_.switch_schedule);
        }
        run_epoch();
    }
}

NamedTensors Trainer::checkpoint_records() const {
    NamedTensors out;
    for (const auto& e : model_.parameters().entries()) out.emplace_back(e.name, e.tensor);
    for (auto& r : optimizer_.state()) out.push_back(std::move(r));
    return out;
}

Model restore_model(const ExperimentConfig& config, const NamedTensors& records) {
    Model model(config.model, config.seeds.init);
    if (config.switch_schedule) model.set_connection_plan(config.switch_schedule->to_plan);
    ParameterStore& params = model.parameters();
    std::size_t loaded = 0;
    for (const auto& [name, t] : records) {
        if (name.starts_with(kOptimizerPrefix)) continue;
        if (!params.contains(name)) throw ConsistencyError("checkpoint tensor " + name + " has no model counterpart");
        Tensor dst = params.get(name);
        if (dst.shape() != t.shape()) {
            throw ConsistencyError("checkpoint tensor " + name + " has shape " + shape_str(t.shape()) + ", model expects " +
                                   shape_str(dst.shape()));
        }
        std::copy(t.data().begin(), t.data().end(), dst.mutable_data().begin());
        ++loaded;
    }
    if (loaded != params.entries().size()) {
        throw ConsistencyError("checkpoint holds " + std::to_string(loaded) + " of " +
                               std::to_string(params.entries().size()) + " model tensors");
    }
    return model;
}

std::string resolve_output_dir(const std::string& output_dir) {
    const char* root = std::getenv("ORUP_OUTPUT_ROOT");
    const std::filesystem::path dir(output_dir);
    if (root && *root && dir.is_relative()) return (std::filesystem::path(root) / dir).string();
    return output_dir;
}

void write_metrics_csv(const std::string& path, const std::vector<EpochRecord>& rows) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw Error("cannot write " + path);
    os << "epoch,split,loss,acc1,acck,lr\n";
    char buf[256];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%zu,%s,%.17g,%.17g,%.17g,%.17g\n", r.epoch, r.split.c_str(), r.loss, r.acc1,
                      r.acck, r.lr);
        os << buf;
    }
}

namespace {
void write_traces(const std::string& path, const std::vector<BlockTrace>& traces) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw Error("cannot write " + path);
    write_trace_csv_header(os);
    for (const auto& t : traces) write_trace_csv_row(os, t);
}
}  // namespace

RunResult train(const ExperimentConfig& config) {
    config.validate();
    namespace fs = std::filesystem;
    RunResult res;
    res.output_dir = resolve_output_dir(config.output_dir);
    fs::create_directories(res.output_dir);
    const fs::path dir(res.output_dir);
    res.metrics_path = (dir / "metrics.csv").string();
    res.traces_path = (dir / "traces.csv").string();
    res.config_path = (dir / "config.resolved.json").string();
    {
        std::ofstream os(res.config_path, std::ios::trunc);
        os << to_json(config).dump(2) << "\n";
    }
    Trainer trainer(config);
    try {
        trainer.run();
    } catch (const TrainingDiverged& e) {
        write_traces((dir / "diverged_traces.csv").string(), e.last_traces);
        write_metrics_csv(res.metrics_path, trainer.metrics());
        throw;
    }
    write_metrics_csv(res.metrics_path, trainer.metrics());
    write_traces(res.traces_path, trainer.traces().traces());
    if (config.save_checkpoint) {
        res.checkpoint_path = (dir / "checkpoint.orup").string();
        write_checkpoint(res.checkpoint_path, trainer.checkpoint_records());
    }
    res.metrics = trainer.metrics();
    res.final_train_loss = trainer.last_train_loss();
    return res;
}

}  // namespace orup
