#include "orup/config.hpp"

#include <fstream>
#include <set>
#include <sstream>
#include <type_traits>

namespace orup {

using nlohmann::json;

std::string to_string(OptimizerKind k) { return k == OptimizerKind::AdamW ? "adamw" : "sgd-momentum"; }

std::string to_string(ScheduleKind k) {
    switch (k) {
        case ScheduleKind::CosineWarmup: return "cosine-warmup";
        case ScheduleKind::MultiStep: return "multistep";
        case ScheduleKind::Constant: return "constant";
    }
    return "?";
}

namespace {

static_assert(std::is_same_v<std::uint64_t, std::size_t>, "seed parsing assumes a 64-bit size_t");

// Walks one JSON object, recording every problem instead of stopping at the first.
bool non_negative_integer(const json& v) {
    return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
}

class Reader {
public:
    Reader(const json& obj, std::string path, std::vector<std::string>& errors)
        : obj_(obj), path_(std::move(path)), errors_(errors) {
        if (!obj_.is_object()) fail("", "expected an object");
    }

    bool ok() const { return obj_.is_object(); }
    bool has(const std::string& key) const { return ok() && obj_.contains(key); }

    const json* child(const std::string& key) {
        if (!has(key)) return nullptr;
        seen_.insert(key);
        return &obj_.at(key);
    }

    void get(const std::string& key, double& out) {
        const json* v = child(key);
        if (!v) return;
        if (!v->is_number()) return fail(key, "expected a number");
        out = v->get<double>();
    }
    void get(const std::string& key, std::size_t& out) {
        const json* v = child(key);
        if (!v) return;
        if (!non_negative_integer(*v)) return fail(key, "expected a non-negative integer");
        out = v->get<std::size_t>();
    }
    void get(const std::string& key, bool& out) {
        const json* v = child(key);
        if (!v) return;
        if (!v->is_boolean()) return fail(key, "expected true or false");
        out = v->get<bool>();
    }
    void get(const std::string& key, std::string& out) {
        const json* v = child(key);
        if (!v) return;
        if (!v->is_string()) return fail(key, "expected a string");
        out = v->get<std::string>();
    }
    void get(const std::string& key, std::vector<std::size_t>& out) {
        const json* v = child(key);
        if (!v) return;
        if (!v->is_array()) return fail(key, "expected an array of non-negative integers");
        std::vector<std::size_t> r;
        for (const json& e : *v) {
            if (!non_negative_integer(e)) return fail(key, "expected an array of non-negative integers");
            r.push_back(e.get<std::size_t>());
        }
        out = std::move(r);
    }

    // Parses an enum-like string through `conv`, turning its ConfigError into a violation.
    template <class T, class Conv>
    void get_enum(const std::string& key, T& out, Conv conv) {
        std::string s;
        const std::size_t before = errors_.size();
        get(key, s);
        if (errors_.size() != before || !has(key)) return;
        try {
            out = conv(s);
        } catch (const ConfigError& e) {
            fail(key, e.what());
        }
    }

    void fail(const std::string& key, const std::string& msg) {
        errors_.push_back(qualified(key) + ": " + msg);
    }

    std::string qualified(const std::string& key) const {
        if (key.empty()) return path_.empty() ? "<root>" : path_;
        return path_.empty() ? key : path_ + "." + key;
    }

    std::vector<std::string>& errors() { return errors_; }

    void finish() {
        if (!ok()) return;
        for (auto it = obj_.begin(); it != obj_.end(); ++it) {
            if (!seen_.count(it.key())) errors_.push_back(qualified(it.key()) + ": unknown key");
        }
    }

private:
    const json& obj_;
    std::string path_;
    std::vector<std::string>& errors_;
    std::set<std::string> seen_;
};

ConnectionSpec parse_connection(const json& j, const std::string& path, std::vector<std::string>& errors) {
    ConnectionSpec spec;
    if (j.is_string()) {
        try {
            spec.kind = connection_kind_from_string(j.get<std::string>());
        } catch (const ConfigError& e) {
            errors.push_back(path + ": " + e.what());
        }
        return spec;
    }
    Reader r(j, path, errors);
    if (!r.ok()) return spec;
    r.get_enum("kind", spec.kind, connection_kind_from_string);
    r.get("epsilon", spec.epsilon);
    r.get("pi", spec.pi);
    r.get_enum("unified_start", spec.unified_start, unified_start_from_string);
    r.finish();
    return spec;
}

std::vector<ConnectionSpec> parse_plan(const json& j, const std::string& path, std::vector<std::string>& errors) {
    std::vector<ConnectionSpec> plan;
    if (!j.is_array()) {
        errors.push_back(path + ": expected an array of connection specs");
        return plan;
    }
    for (std::size_t i = 0; i < j.size(); ++i) {
        plan.push_back(parse_connection(j[i], path + "[" + std::to_string(i) + "]", errors));
    }
    return plan;
}

ModelConfig parse_model(const json& j, std::vector<std::string>& errors) {
    ModelConfig m;
    Reader r(j, "model", errors);
    if (!r.ok()) return m;
    r.get_enum("family", m.family, model_family_from_string);
    r.get("d_model", m.d_model);
    r.get("n_layers", m.n_layers);
    r.get("n_heads", m.n_heads);
    r.get("patch_size", m.patch_size);
    r.get("mlp_ratio", m.mlp_ratio);
    r.get("stage_channels", m.stage_channels);
    r.get("blocks_per_stage", m.blocks_per_stage);
    r.get("in_channels", m.in_channels);
    r.get("image_size", m.image_size);
    r.get("n_classes", m.n_classes);
    r.get("final_layernorm", m.final_layernorm);
    r.get("ln_eps", m.ln_eps);
    r.get_enum("initializer", m.initializer, initializer_from_string);

    const json* plan = r.child("connection_plan");
    const json* conn = r.child("connection");
    std::vector<std::size_t> layers;
    const bool has_layers = r.has("orthogonal_layers");
    r.get("orthogonal_layers", layers);
    if (plan) {
        if (conn || has_layers) r.fail("connection_plan", "cannot be combined with connection or orthogonal_layers");
        m.connection_plan = parse_plan(*plan, "model.connection_plan", errors);
    } else {
        ConnectionSpec base;
        if (conn) base = parse_connection(*conn, "model.connection", errors);
        if (has_layers) {
            if (!base.is_orthogonal()) {
                r.fail("orthogonal_layers", "requires model.connection to be an orthogonal kind");
            } else {
                try {
                    m.connection_plan = layer_pattern_plan(m, layers, base);
                } catch (const ConfigError& e) {
                    r.fail("orthogonal_layers", e.what());
                }
            }
        } else {
            m.connection_plan.assign(m.num_junctions(), base);
        }
    }
    r.finish();
    return m;
}

OptimizerSpec parse_optimizer(const json& j, std::vector<std::string>& errors) {
    OptimizerSpec o;
    Reader r(j, "optimizer", errors);
    if (!r.ok()) return o;
    r.get_enum("kind", o.kind, [](const std::string& s) {
        if (s == "adamw") return OptimizerKind::AdamW;
        if (s == "sgd-momentum") return OptimizerKind::SgdMomentum;
        throw ConfigError("unknown optimizer '" + s + "'");
    });
    r.get("lr", o.lr);
    r.get("weight_decay", o.weight_decay);
    r.get("momentum", o.momentum);
    r.get("beta1", o.beta1);
    r.get("beta2", o.beta2);
    r.get("eps", o.adam_eps);
    r.get("grad_clip", o.grad_clip);
    r.finish();
    return o;
}

ScheduleSpec parse_schedule(const json& j, std::vector<std::string>& errors) {
    ScheduleSpec s;
    Reader r(j, "schedule", errors);
    if (!r.ok()) return s;
    r.get_enum("kind", s.kind, [](const std::string& k) {
        if (k == "cosine-warmup") return ScheduleKind::CosineWarmup;
        if (k == "multistep") return ScheduleKind::MultiStep;
        if (k == "constant") return ScheduleKind::Constant;
        throw ConfigError("unknown schedule '" + k + "'");
    });
    r.get("warmup_epochs", s.warmup_epochs);
    r.get("milestones", s.milestones);
    r.get("decay_factor", s.decay_factor);
    r.get("min_lr", s.min_lr);
    r.finish();
    return s;
}

SwitchSchedule parse_switch(const json& j, const ModelConfig& model, std::vector<std::string>& errors) {
    SwitchSchedule s;
    Reader r(j, "switch", errors);
    if (!r.ok()) return s;
    if (!r.has("switch_epoch")) r.fail("switch_epoch", "required");
    r.get("switch_epoch", s.switch_epoch);
    r.get("reset_optimizer", s.reset_optimizer);
    const json* plan = r.child("to_plan");
    const json* to = r.child("to");
    if (plan && to) r.fail("to_plan", "cannot be combined with to");
    if (plan) {
        s.to_plan = parse_plan(*plan, "switch.to_plan", errors);
    } else if (to) {
        s.to_plan.assign(model.num_junctions(), parse_connection(*to, "switch.to", errors));
    } else {
        r.fail("to_plan", "one of to_plan or to is required");
    }
    r.finish();
    return s;
}

DataSpec parse_data(const json& j, std::vector<std::string>& errors) {
    DataSpec d;
    Reader r(j, "data", errors);
    if (!r.ok()) return d;
    r.get("source", d.source);
    r.get("n_train", d.n_train);
    r.get("n_val", d.n_val);
    r.get("n_classes", d.n_classes);
    r.get("size", d.size);
    r.get("channels", d.channels);
    r.get("separation", d.separation);
    r.get("train_images", d.train_images);
    r.get("train_labels", d.train_labels);
    r.get("val_images", d.val_images);
    r.get("val_labels", d.val_labels);
    r.get("normalize", d.normalize);
    if (const json* aug = r.child("augment")) {
        Reader a(*aug, "data.augment", errors);
        if (a.ok()) {
            a.get("hflip_p", d.augment.hflip_p);
            a.get("pad", d.augment.pad);
            std::size_t crop = 0;
            a.get("crop", crop);
            d.augment.crop_h = d.augment.crop_w = crop;
            a.finish();
        }
    }
    r.finish();
    return d;
}

Seeds parse_seeds(const json& j, std::vector<std::string>& errors) {
    Seeds s;
    Reader r(j, "seeds", errors);
    if (!r.ok()) return s;
    r.get("init", s.init);
    r.get("data", s.data);
    r.get("pi", s.pi);
    r.get("eval", s.eval);
    r.finish();
    return s;
}

void report(const std::vector<std::string>& errors) {
    if (errors.empty()) return;
    std::ostringstream os;
    os << "invalid experiment config (" << errors.size() << (errors.size() == 1 ? " problem" : " problems") << "):";
    for (const auto& e : errors) os << "\n  - " << e;
    throw ConfigError(os.str());
}

}  // namespace

std::vector<ConnectionSpec> layer_pattern_plan(const ModelConfig& model, const std::vector<std::size_t>& blocks,
                                               const ConnectionSpec& orthogonal) {
    std::vector<ConnectionSpec> plan(model.num_junctions());
    const std::size_t per_block = model.family == ModelFamily::Transformer ? 2 : 1;
    for (std::size_t b : blocks) {
        if (b >= model.num_blocks()) {
            throw ConfigError("block index " + std::to_string(b) + " out of range for " +
                              std::to_string(model.num_blocks()) + " blocks");
        }
        for (std::size_t k = 0; k < per_block; ++k) plan[b * per_block + k] = orthogonal;
    }
    return plan;
}

std::vector<std::string> ExperimentConfig::violations() const {
    std::vector<std::string> v = model.violations();
    const OptimizerSpec& o = optimizer;
    if (!(o.lr >= 0.0)) v.push_back("optimizer.lr must be non-negative");
    if (!(o.weight_decay >= 0.0)) v.push_back("optimizer.weight_decay must be non-negative");
    if (!(o.momentum >= 0.0 && o.momentum < 1.0)) v.push_back("optimizer.momentum must lie in [0,1)");
    if (!(o.beta1 >= 0.0 && o.beta1 < 1.0)) v.push_back("optimizer.beta1 must lie in [0,1)");
    if (!(o.beta2 >= 0.0 && o.beta2 < 1.0)) v.push_back("optimizer.beta2 must lie in [0,1)");
    if (!(o.adam_eps > 0.0)) v.push_back("optimizer.eps must be positive");
    if (!(o.grad_clip >= 0.0)) v.push_back("optimizer.grad_clip must be non-negative");
    if (!(schedule.min_lr >= 0.0 && schedule.min_lr <= o.lr)) v.push_back("schedule.min_lr must lie in [0, lr]");
    if (!(schedule.decay_factor > 0.0)) v.push_back("schedule.decay_factor must be positive");
    for (std::size_t i = 1; i < schedule.milestones.size(); ++i) {
        if (schedule.milestones[i] <= schedule.milestones[i - 1]) {
            v.push_back("schedule.milestones must be strictly increasing");
            break;
        }
    }
    if (schedule.kind == ScheduleKind::CosineWarmup && epochs > 0 && schedule.warmup_epochs >= epochs) {
        v.push_back("schedule.warmup_epochs must be smaller than epochs");
    }
    if (switch_schedule) {
        if (switch_schedule->switch_epoch >= epochs) v.push_back("switch.switch_epoch must be smaller than epochs");
        if (switch_schedule->to_plan.size() != model.num_junctions()) {
            v.push_back("switch plan has " + std::to_string(switch_schedule->to_plan.size()) + " entries, model has " +
                        std::to_string(model.num_junctions()) + " junctions");
        }
        for (const ConnectionSpec& s : switch_schedule->to_plan) {
            if (!(s.epsilon > 0.0) || !(s.pi >= 0.0 && s.pi <= 1.0)) {
                v.push_back("switch plan entries need epsilon > 0 and pi in [0,1]");
                break;
            }
            if (model.family == ModelFamily::Transformer && s.kind == ConnectionKind::OrthogonalGlobal) {
                v.push_back("switch plan: orthogonal_global is only supported on conv blocks");
                break;
            }
        }
    }
    if (data.source == "synthetic") {
        if (data.n_train == 0) v.push_back("data.n_train must be positive");
        if (data.n_classes != model.n_classes) v.push_back("data.n_classes must equal model.n_classes");
        if (data.size != model.image_size) v.push_back("data.size must equal model.image_size");
        if (data.channels != model.in_channels) v.push_back("data.channels must equal model.in_channels");
    } else if (data.source == "idx") {
        if (data.train_images.empty() || data.train_labels.empty()) {
            v.push_back("data.train_images and data.train_labels are required for idx data");
        }
        if (data.val_images.empty() != data.val_labels.empty()) {
            v.push_back("data.val_images and data.val_labels must be given together");
        }
    } else {
        v.push_back("data.source must be synthetic or idx");
    }
    if (!(data.augment.hflip_p >= 0.0 && data.augment.hflip_p <= 1.0)) v.push_back("data.augment.hflip_p must lie in [0,1]");
    if (batch_size == 0) v.push_back("batch_size must be positive");
    if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) v.push_back("label_smoothing must lie in [0,1)");
    if (topk == 0 || topk > model.n_classes) v.push_back("topk must lie in [1, n_classes]");
    if (trace_every == 0) v.push_back("trace_every must be at least 1");
    if (output_dir.empty()) v.push_back("output_dir must not be empty");
    return v;
}

void ExperimentConfig::validate() const { report(violations()); }

ExperimentConfig parse_config(const json& doc) {
    std::vector<std::string> errors;
    ExperimentConfig c;
    Reader r(doc, "", errors);
    if (!r.ok()) report(errors);
    if (const json* m = r.child("model")) c.model = parse_model(*m, errors);
    else c.model.connection_plan.assign(c.model.num_junctions(), ConnectionSpec{});
    if (const json* o = r.child("optimizer")) c.optimizer = parse_optimizer(*o, errors);
    if (const json* s = r.child("schedule")) c.schedule = parse_schedule(*s, errors);
    if (const json* s = r.child("switch")) {
        if (!s->is_null()) c.switch_schedule = parse_switch(*s, c.model, errors);
    }
    if (const json* d = r.child("data")) c.data = parse_data(*d, errors);
    if (const json* s = r.child("seeds")) c.seeds = parse_seeds(*s, errors);
    r.get("epochs", c.epochs);
    r.get("batch_size", c.batch_size);
    r.get("label_smoothing", c.label_smoothing);
    r.get("topk", c.topk);
    r.get("trace_every", c.trace_every);
    r.get("output_dir", c.output_dir);
    r.get("save_checkpoint", c.save_checkpoint);
    r.finish();
    for (auto& v : c.violations()) errors.push_back(std::move(v));
    report(errors);
    return c;
}

ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path);
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError("config " + path + " is not valid JSON: " + e.what());
    }
    return parse_config(doc);
}

json to_json(const ConnectionSpec& spec) {
    json j{{"kind", to_string(spec.kind)}, {"epsilon", spec.epsilon}, {"pi", spec.pi}};
    if (spec.kind == ConnectionKind::Unified) j["unified_start"] = to_string(spec.unified_start);
    return j;
}

namespace {
json plan_json(const std::vector<ConnectionSpec>& plan) {
    json a = json::array();
    for (const auto& s : plan) a.push_back(to_json(s));
    return a;
}
}  // namespace

json to_json(const ExperimentConfig& c) {
    const ModelConfig& m = c.model;
    json model{{"family", to_string(m.family)},
               {"in_channels", m.in_channels},
               {"image_size", m.image_size},
               {"n_classes", m.n_classes},
               {"final_layernorm", m.final_layernorm},
               {"ln_eps", m.ln_eps},
               {"initializer", to_string(m.initializer)},
               {"connection_plan", plan_json(m.connection_plan)}};
    if (m.family == ModelFamily::Transformer) {
        model["d_model"] = m.d_model;
        model["n_layers"] = m.n_layers;
        model["n_heads"] = m.n_heads;
        model["patch_size"] = m.patch_size;
        model["mlp_ratio"] = m.mlp_ratio;
    } else {
        model["stage_channels"] = m.stage_channels;
        model["blocks_per_stage"] = m.blocks_per_stage;
    }
    const OptimizerSpec& o = c.optimizer;
    json optimizer{{"kind", to_string(o.kind)},   {"lr", o.lr},       {"weight_decay", o.weight_decay},
                   {"momentum", o.momentum},      {"beta1", o.beta1}, {"beta2", o.beta2},
                   {"eps", o.adam_eps},           {"grad_clip", o.grad_clip}};
    const ScheduleSpec& s = c.schedule;
    json schedule{{"kind", to_string(s.kind)},
                  {"warmup_epochs", s.warmup_epochs},
                  {"milestones", s.milestones},
                  {"decay_factor", s.decay_factor},
                  {"min_lr", s.min_lr}};
    const DataSpec& d = c.data;
    json data{{"source", d.source}, {"normalize", d.normalize}};
    if (d.source == "synthetic") {
        data["n_train"] = d.n_train;
        data["n_val"] = d.n_val;
        data["n_classes"] = d.n_classes;
        data["size"] = d.size;
        data["channels"] = d.channels;
        data["separation"] = d.separation;
    } else {
        data["train_images"] = d.train_images;
        data["train_labels"] = d.train_labels;
        if (!d.val_images.empty()) {
            data["val_images"] = d.val_images;
            data["val_labels"] = d.val_labels;
        }
    }
    if (d.augment.crop_h != d.augment.crop_w) throw ConfigError("non-square crops cannot be serialized");
    data["augment"] = {{"hflip_p", d.augment.hflip_p}, {"pad", d.augment.pad}, {"crop", d.augment.crop_h}};
    json doc{{"model", model},
             {"optimizer", optimizer},
             {"schedule", schedule},
             {"data", data},
             {"seeds", {{"init", c.seeds.init}, {"data", c.seeds.data}, {"pi", c.seeds.pi}, {"eval", c.seeds.eval}}},
             {"epochs", c.epochs},
             {"batch_size", c.batch_size},
             {"label_smoothing", c.label_smoothing},
             {"topk", c.topk},
             {"trace_every", c.trace_every},
             {"output_dir", c.output_dir},
             {"save_checkpoint", c.save_checkpoint}};
    if (c.switch_schedule) {
        doc["switch"] = {{"switch_epoch", c.switch_schedule->switch_epoch},
                         {"to_plan", plan_json(c.switch_schedule->to_plan)},
                         {"reset_optimizer", c.switch_schedule->reset_optimizer}};
    }
    return doc;
}

void apply_seed_offset(ExperimentConfig& config, std::uint64_t offset) {
    config.seeds.init += offset;
    config.seeds.data += offset;
    config.seeds.pi += offset;
    config.seeds.eval += offset;
}

}  // namespace orup
