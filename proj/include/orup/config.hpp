#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "orup/data.hpp"
#include "orup/model.hpp"

namespace orup {

enum class OptimizerKind { SgdMomentum, AdamW };
enum class ScheduleKind { CosineWarmup, MultiStep, Constant };

std::string to_string(OptimizerKind k);
std::string to_string(ScheduleKind k);

struct OptimizerSpec {
    OptimizerKind kind = OptimizerKind::AdamW;
    double lr = 1e-3;
    double weight_decay = 0.0;
    double momentum = 0.9;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    // Global gradient-norm bound; 0 disables clipping.
    double grad_clip = 0.0;
};

struct ScheduleSpec {
    ScheduleKind kind = ScheduleKind::Constant;
    std::size_t warmup_epochs = 0;
    std::vector<std::size_t> milestones;
    double decay_factor = 0.1;
    double min_lr = 0.0;
};

struct SwitchSchedule {
    // Number of completed epochs after which the plan is replaced.
    std::size_t switch_epoch = 0;
    std::vector<ConnectionSpec> to_plan;
    bool reset_optimizer = true;
};

struct DataSpec {
    std::string source = "synthetic";  // synthetic | idx
    std::size_t n_train = 1000;
    std::size_t n_val = 200;
    std::size_t n_classes = 10;
    std::size_t size = 8;
    std::size_t channels = 1;
    double separation = 3.0;
    std::string train_images, train_labels, val_images, val_labels;
    AugmentOps augment;
    bool normalize = true;
};

struct Seeds {
    std::uint64_t init = 0;
    std::uint64_t data = 0;
    std::uint64_t pi = 0;
    std::uint64_t eval = 0;
};

struct ExperimentConfig {
    ModelConfig model;
    OptimizerSpec optimizer;
    ScheduleSpec schedule;
    std::optional<SwitchSchedule> switch_schedule;
    DataSpec data;
    Seeds seeds;
    std::size_t epochs = 5;
    std::size_t batch_size = 32;
    double label_smoothing = 0.0;
    std::size_t topk = 5;
    std::size_t trace_every = 1;
    std::string output_dir = "runs/default";
    bool save_checkpoint = true;

    std::vector<std::string> violations() const;
    void validate() const;
};

// Parses a config document. Unknown keys, type errors and constraint
// violations are collected and reported together in one ConfigError.
ExperimentConfig parse_config(const nlohmann::json& doc);
ExperimentConfig load_config(const std::string& path);

// Fully explicit document (every junction listed) that parses back to `config`.
nlohmann::json to_json(const ExperimentConfig& config);
nlohmann::json to_json(const ConnectionSpec& spec);

// Every seed shifted by `offset`.
void apply_seed_offset(ExperimentConfig& config, std::uint64_t offset);

// Plan where junctions of the listed blocks use `orthogonal` and the rest are linear.
std::vector<ConnectionSpec> layer_pattern_plan(const ModelConfig& model, const std::vector<std::size_t>& blocks,
                                               const ConnectionSpec& orthogonal);

}  // namespace orup
