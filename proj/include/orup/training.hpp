#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "orup/checkpoint.hpp"
#include "orup/config.hpp"
#include "orup/data.hpp"
#include "orup/diagnostics.hpp"
#include "orup/model.hpp"

namespace orup {

// Learning rate at (epoch, step) of a horizon of `epochs` epochs with
// `steps_per_epoch` steps each. Cosine warmup ramps linearly to base_lr over
// the warmup epochs, then follows a half cosine that reaches min_lr on the
// last step. Multistep multiplies by decay_factor for every milestone <= epoch.
double step_lr(const ScheduleSpec& schedule, double base_lr, std::size_t epochs, std::size_t steps_per_epoch,
               std::size_t epoch, std::size_t step);

// Whether weight decay applies: matrix and conv weights only, never norms,
// biases, embeddings or junction scalars.
bool decays(const std::string& param_name);

// Scales gradients so their global L2 norm is at most max_norm. Returns the norm before clipping.
double clip_grad_norm(ParameterStore& params, double max_norm);

class Optimizer {
public:
    explicit Optimizer(OptimizerSpec spec) : spec_(spec) {}

    // One update of every trainable parameter that carries a gradient.
    void step(ParameterStore& params, double lr);
    // Zeroes every moment buffer and the step counter.
    void reset();

    const OptimizerSpec& spec() const { return spec_; }
    std::uint64_t step_count() const { return steps_; }
    // Moment buffers keyed "m/<param>", "v/<param>" (AdamW) or "momentum/<param>" (SGD).
    const std::map<std::string, std::vector<double>>& buffers() const { return buffers_; }

    NamedTensors state() const;
    void load_state(const NamedTensors& records);

private:
    OptimizerSpec spec_;
    std::uint64_t steps_ = 0;
    std::map<std::string, std::vector<double>> buffers_;
};

// (1 − ls)·onehot + ls/K
Tensor smoothed_targets(const std::vector<std::size_t>& labels, std::size_t n_classes, double label_smoothing);

struct EvalResult {
    double acc1 = 0.0;
    double acck = 0.0;
    double loss = 0.0;
};

// Top-1/top-k accuracy and mean cross-entropy of logits [n,K]. When scores
// tie, the lower class index ranks first.
EvalResult score_logits(const Tensor& logits, const std::vector<std::size_t>& labels, std::size_t k);

// Evaluation-mode pass over the dataset in batches; pi draws come from a
// fresh stream seeded with eval_seed.
EvalResult evaluate(const Model& model, const Dataset& data, std::size_t k, std::size_t batch_size,
                    std::uint64_t eval_seed);

// Pre-classifier features [n, width] of the first `limit` samples (all when 0).
Tensor extract_features(const Model& model, const Dataset& data, std::size_t batch_size, std::uint64_t eval_seed,
                        std::size_t limit = 0);

struct EpochRecord {
    std::size_t epoch = 0;
    std::string split;
    double loss = 0.0;
    double acc1 = 0.0;
    double acck = 0.0;
    double lr = 0.0;
};

struct TrainingDiverged : NonFiniteError {
    TrainingDiverged(const std::string& what, std::vector<BlockTrace> traces)
        : NonFiniteError(what), last_traces(std::move(traces)) {}
    std::vector<BlockTrace> last_traces;
};

// Train / validation splits built from a data spec. Normalization statistics
// come from the training split and are applied to both.
struct DataSplits {
    Dataset train;
    std::optional<Dataset> val;
};
DataSplits load_data(const DataSpec& spec, std::uint64_t data_seed);

class Trainer {
public:
    explicit Trainer(ExperimentConfig config);
    Trainer(ExperimentConfig config, DataSplits data);

    // Initial evaluation, then every remaining epoch (switching where scheduled).
    void run();
    // Epoch-0 evaluation rows.
    void evaluate_initial();
    // Trains one epoch and appends its metric rows.
    void run_epoch();
    // Replaces the connection plan; with reset_optimizer the moments are
    // zeroed and the LR schedule restarts over the remaining epochs.
    void apply_switch(const SwitchSchedule& schedule);

    const ExperimentConfig& config() const { return config_; }
    Model& model() { return model_; }
    const Model& model() const { return model_; }
    Optimizer& optimizer() { return optimizer_; }
    const TraceRecorder& traces() const { return recorder_; }
    const std::vector<EpochRecord>& metrics() const { return metrics_; }
    const DataSplits& data() const { return data_; }
    std::size_t epochs_done() const { return epoch_; }
    std::uint64_t global_step() const { return global_step_; }
    double current_lr() const { return lr_; }
    // Mean training loss of the last completed epoch.
    double last_train_loss() const { return last_train_loss_; }

    NamedTensors checkpoint_records() const;

private:
    std::size_t steps_per_epoch() const;
    void train_step(const std::vector<std::size_t>& batch, double lr, double& loss_sum, std::size_t& correct1,
                    std::size_t& correctk);
    void record_eval(std::size_t epoch, double lr);

    ExperimentConfig config_;
    DataSplits data_;
    Model model_;
    Optimizer optimizer_;
    TraceRecorder recorder_;
    std::vector<BlockTrace> last_step_traces_;
    std::vector<EpochRecord> metrics_;
    Rng data_rng_;
    Rng pi_rng_;
    std::size_t epoch_ = 0;
    std::size_t schedule_origin_ = 0;
    std::uint64_t global_step_ = 0;
    double lr_ = 0.0;
    double last_train_loss_ = 0.0;
    bool initial_done_ = false;
};

struct RunResult {
    std::string output_dir;
    std::string metrics_path;
    std::string traces_path;
    std::string checkpoint_path;
    std::string config_path;
    std::vector<EpochRecord> metrics;
    double final_train_loss = 0.0;
};

// config.output_dir, placed under $ORUP_OUTPUT_ROOT when that is set and the dir is relative.
std::string resolve_output_dir(const std::string& output_dir);

// Trains and writes metrics.csv, traces.csv, checkpoint.orup and
// config.resolved.json into the output directory. On divergence the last
// traces go to diverged_traces.csv before the error propagates.
RunResult train(const ExperimentConfig& config);

// Model in its final connection plan (after any scheduled switch) holding
// the tensors of a checkpoint. Optimizer records are ignored.
Model restore_model(const ExperimentConfig& config, const NamedTensors& records);

void write_metrics_csv(const std::string& path, const std::vector<EpochRecord>& rows);

}  // namespace orup
