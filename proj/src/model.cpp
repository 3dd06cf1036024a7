#include "orup/model.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "orup/data.hpp"
#include "orup/ops.hpp"

namespace orup {

std::string to_string(ModelFamily f) { return f == ModelFamily::Transformer ? "transformer" : "preact-resnet"; }

ModelFamily model_family_from_string(const std::string& s) {
    if (s == "transformer") return ModelFamily::Transformer;
    if (s == "preact-resnet") return ModelFamily::PreactResnet;
    throw ConfigError("unknown model family '" + s + "'");
}

std::string to_string(Initializer i) {
    switch (i) {
        case Initializer::Kaiming: return "kaiming";
        case Initializer::Xavier: return "xavier";
        case Initializer::Orthogonal: return "orthogonal-init";
    }
    return "?";
}

Initializer initializer_from_string(const std::string& s) {
    if (s == "kaiming") return Initializer::Kaiming;
    if (s == "xavier") return Initializer::Xavier;
    if (s == "orthogonal-init") return Initializer::Orthogonal;
    throw ConfigError("unknown initializer '" + s + "'");
}

std::size_t ModelConfig::num_blocks() const {
    if (family == ModelFamily::Transformer) return n_layers;
    std::size_t total = 0;
    for (std::size_t b : blocks_per_stage) total += b;
    return total;
}

std::size_t ModelConfig::num_junctions() const {
    return family == ModelFamily::Transformer ? 2 * n_layers : num_blocks();
}

std::size_t ModelConfig::num_tokens() const {
    if (patch_size == 0) return 0;
    const std::size_t g = image_size / patch_size;
    return g * g + 1;
}

std::vector<std::string> ModelConfig::violations() const {
    std::vector<std::string> v;
    if (in_channels == 0) v.push_back("model.in_channels must be positive");
    if (image_size == 0) v.push_back("model.image_size must be positive");
    if (n_classes < 2) v.push_back("model.n_classes must be at least 2");
    if (!(ln_eps > 0.0)) v.push_back("model.ln_eps must be positive");
    if (family == ModelFamily::Transformer) {
        if (d_model == 0) v.push_back("model.d_model must be positive");
        if (n_layers == 0) v.push_back("model.n_layers must be positive");
        if (n_heads == 0) v.push_back("model.n_heads must be positive");
        if (n_heads != 0 && d_model % n_heads != 0) v.push_back("model.d_model must be divisible by model.n_heads");
        if (mlp_ratio == 0) v.push_back("model.mlp_ratio must be positive");
        if (patch_size == 0) {
            v.push_back("model.patch_size must be positive");
        } else if (image_size % patch_size != 0) {
            v.push_back("model.image_size must be divisible by model.patch_size");
        }
    } else {
        if (stage_channels.empty()) v.push_back("model.stage_channels must not be empty");
        if (stage_channels.size() != blocks_per_stage.size()) {
            v.push_back("model.stage_channels and model.blocks_per_stage must have equal length");
        }
        for (std::size_t c : stage_channels) {
            if (c == 0) v.push_back("model.stage_channels entries must be positive");
        }
        for (std::size_t b : blocks_per_stage) {
            if (b == 0) v.push_back("model.blocks_per_stage entries must be positive");
        }
    }
    if (connection_plan.size() != num_junctions()) {
        v.push_back("connection plan has " + std::to_string(connection_plan.size()) + " entries, model has " +
                    std::to_string(num_junctions()) + " junctions");
    }
    for (std::size_t j = 0; j < connection_plan.size(); ++j) {
        const ConnectionSpec& s = connection_plan[j];
        const std::string where = "connection_plan[" + std::to_string(j) + "]";
        if (!(s.epsilon > 0.0)) v.push_back(where + ".epsilon must be positive");
        if (!(s.pi >= 0.0 && s.pi <= 1.0)) v.push_back(where + ".pi must lie in [0,1]");
        if (family == ModelFamily::Transformer && s.kind == ConnectionKind::OrthogonalGlobal) {
            v.push_back(where + ": orthogonal_global is only supported on conv blocks");
        }
    }
    return v;
}

void ModelConfig::validate() const {
    const auto v = violations();
    if (v.empty()) return;
    std::ostringstream os;
    os << "invalid model config:";
    for (const auto& msg : v) os << "\n  - " << msg;
    throw ConfigError(os.str());
}

double gamma(const ModelConfig& config) {
    if (config.family == ModelFamily::Transformer) {
        if (config.n_layers == 0) throw ContractError("gamma: zero layers");
        return static_cast<double>(config.d_model) / static_cast<double>(config.n_layers);
    }
    if (config.stage_channels.size() != config.blocks_per_stage.size()) {
        throw ContractError("gamma: stage plan length mismatch");
    }
    double weighted = 0.0;
    double total = 0.0;
    for (std::size_t k = 0; k < config.blocks_per_stage.size(); ++k) {
        weighted += static_cast<double>(config.blocks_per_stage[k] * config.stage_channels[k]);
        total += static_cast<double>(config.blocks_per_stage[k]);
    }
    if (total == 0.0) throw ContractError("gamma: zero layers");
    return weighted / (total * total);
}

std::vector<ConnectionSpec> resolve_plan(ModelFamily family, std::vector<ConnectionSpec> plan) {
    for (ConnectionSpec& s : plan) {
        validate(s);
        if (family == ModelFamily::Transformer) {
            if (s.kind == ConnectionKind::OrthogonalGlobal) {
                throw ContractError("orthogonal_global is only supported on conv blocks");
            }
            s.reduction_dims = {2};
        } else {
            s.reduction_dims = s.kind == ConnectionKind::OrthogonalGlobal ? DimSet{1, 2, 3} : DimSet{1};
        }
    }
    return plan;
}

Tensor ParameterStore::add(const std::string& name, Tensor t, bool trainable) {
    if (contains(name)) throw ContractError("duplicate parameter name " + name);
    t.set_requires_grad(trainable);
    index_[name] = entries_.size();
    entries_.push_back({name, t, trainable});
    return t;
}

Tensor ParameterStore::get(const std::string& name) const {
    const auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter " + name);
    return entries_[it->second].tensor;
}

void ParameterStore::zero_grad() {
    for (auto& e : entries_) e.tensor.zero_grad();
}

std::size_t ParameterStore::trainable_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) {
        if (e.trainable) n += e.tensor.numel();
    }
    return n;
}

namespace {

// Modified Gram-Schmidt with one re-orthogonalization pass over the rows of
// a [rows, cols] row-major matrix, rows <= cols.
void orthonormalize_rows(std::vector<double>& m, std::size_t rows, std::size_t cols) {
    for (std::size_t i = 0; i < rows; ++i) {
        double* vi = m.data() + i * cols;
        for (int pass = 0; pass < 2; ++pass) {
            for (std::size_t j = 0; j < i; ++j) {
                const double* vj = m.data() + j * cols;
                double dot = 0.0;
                for (std::size_t k = 0; k < cols; ++k) dot += vi[k] * vj[k];
                for (std::size_t k = 0; k < cols; ++k) vi[k] -= dot * vj[k];
            }
        }
        double norm = 0.0;
        for (std::size_t k = 0; k < cols; ++k) norm += vi[k] * vi[k];
        norm = std::sqrt(norm);
        if (norm < 1e-12) throw DegenerateInputError("orthogonal init drew a rank-deficient matrix");
        for (std::size_t k = 0; k < cols; ++k) vi[k] /= norm;
    }
}

}  // namespace

std::vector<double> init_weights(Initializer init, std::size_t fan_in, std::size_t fan_out, std::size_t count,
                                 Rng& rng, bool conv) {
    switch (init) {
        case Initializer::Kaiming:
            return normal_vector(rng, count, 0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
        case Initializer::Xavier: {
            const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
            return uniform_vector(rng, count, -a, a);
        }
        case Initializer::Orthogonal: {
            // Rows of the stored matrix: fan_in for dense [in,out], Co for conv [Co, Ci·k·k].
            const std::size_t rows = conv ? count / fan_in : fan_in;
            const std::size_t cols = count / rows;
            std::vector<double> m = normal_vector(rng, count);
            if (rows <= cols) {
                orthonormalize_rows(m, rows, cols);
                return m;
            }
            std::vector<double> t(count);
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t c = 0; c < cols; ++c) t[c * rows + r] = m[r * cols + c];
            }
            orthonormalize_rows(t, cols, rows);
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t c = 0; c < cols; ++c) m[r * cols + c] = t[c * rows + r];
            }
            return m;
        }
    }
    return {};
}

namespace {

Tensor affine_ln(const Tensor& x, const Tensor& g, const Tensor& b, double eps) {
    return add(mul(layer_norm_last(x, eps), g), b);
}

Tensor affine_bn(const Tensor& x, const Tensor& g, const Tensor& b, Tensor rm, Tensor rv, bool training) {
    return add(mul(batch_norm2d(x, rm, rv, training), g), b);
}

// [B,s,d] -> [B·H, s, d/H]
Tensor split_heads(const Tensor& t, std::size_t B, std::size_t s, std::size_t H, std::size_t dh) {
    return reshape(permute(reshape(t, {B, s, H, dh}), {0, 2, 1, 3}), {B * H, s, dh});
}

}  // namespace

Tensor attention_branch(const Tensor& x, const TransformerBlockParams& p) {
    if (x.ndim() != 3) throw DimensionError("attention_branch expects [B,s,d], got " + shape_str(x.shape()));
    const std::size_t B = x.dim(0), s = x.dim(1), d = x.dim(2), H = p.n_heads;
    if (H == 0 || d % H != 0) throw DimensionError("attention: d not divisible by heads");
    const std::size_t dh = d / H;
    const Tensor h = reshape(affine_ln(x, p.ln1_g, p.ln1_b, p.ln_eps), {B * s, d});
    const Tensor q = split_heads(add(matmul(h, p.wq), p.bq), B, s, H, dh);
    const Tensor k = split_heads(add(matmul(h, p.wk), p.bk), B, s, H, dh);
    const Tensor v = split_heads(add(matmul(h, p.wv), p.bv), B, s, H, dh);
    const Tensor scores = mul_scalar(matmul(q, transpose(k, 1, 2)), 1.0 / std::sqrt(static_cast<double>(dh)));
    const Tensor ctx = matmul(softmax_last(scores), v);
    const Tensor merged = reshape(permute(reshape(ctx, {B, H, s, dh}), {0, 2, 1, 3}), {B * s, d});
    return reshape(add(matmul(merged, p.wo), p.bo), {B, s, d});
}

Tensor mlp_branch(const Tensor& x, const TransformerBlockParams& p) {
    if (x.ndim() != 3) throw DimensionError("mlp_branch expects [B,s,d], got " + shape_str(x.shape()));
    const std::size_t B = x.dim(0), s = x.dim(1), d = x.dim(2);
    const Tensor h = reshape(affine_ln(x, p.ln2_g, p.ln2_b, p.ln_eps), {B * s, d});
    const Tensor hidden = gelu(add(matmul(h, p.w1), p.b1));
    return reshape(add(matmul(hidden, p.w2), p.b2), {B, s, d});
}

namespace {
ConnectionSpec with_dims(ConnectionSpec spec, DimSet dims) {
    if (spec.reduction_dims.empty()) spec.reduction_dims = std::move(dims);
    return spec;
}
}  // namespace

BlockOutput transformer_block_forward(const Tensor& x, const TransformerBlockParams& p, const ConnectionSpec& spec_attn,
                                      const ConnectionSpec& spec_mlp, Rng& rng, const JunctionParams* jp_attn,
                                      const JunctionParams* jp_mlp) {
    if (spec_attn.kind == ConnectionKind::OrthogonalGlobal || spec_mlp.kind == ConnectionKind::OrthogonalGlobal) {
        throw ContractError("orthogonal_global is only supported on conv blocks");
    }
    BlockOutput out;
    UpdateResult a = apply_update(x, attention_branch(x, p), with_dims(spec_attn, {2}), rng, jp_attn);
    a.trace.junction = Junction::Attn;
    UpdateResult m = apply_update(a.x_next, mlp_branch(a.x_next, p), with_dims(spec_mlp, {2}), rng, jp_mlp);
    m.trace.junction = Junction::Mlp;
    out.x_next = m.x_next;
    out.traces = {a.trace, m.trace};
    return out;
}

BlockOutput preact_block_forward(const Tensor& x, const PreactBlockParams& p, const ConnectionSpec& spec, Rng& rng,
                                 bool training, const JunctionParams* jp) {
    if (x.ndim() != 4) throw DimensionError("preact block expects [B,C,H,W], got " + shape_str(x.shape()));
    const Tensor h = relu(affine_bn(x, p.bn1_g, p.bn1_b, p.bn1_mean, p.bn1_var, training));
    const Tensor stream = p.shortcut.defined() ? conv2d(h, p.shortcut, p.stride, 0) : x;
    const Tensor a = relu(affine_bn(conv2d(h, p.conv1, p.stride, 1), p.bn2_g, p.bn2_b, p.bn2_mean, p.bn2_var, training));
    const Tensor f = conv2d(a, p.conv2, 1, 1);
    const DimSet dims = spec.kind == ConnectionKind::OrthogonalGlobal ? DimSet{1, 2, 3} : DimSet{1};
    UpdateResult r = apply_update(stream, f, with_dims(spec, dims), rng, jp);
    r.trace.junction = Junction::Conv;
    return {r.x_next, {r.trace}};
}

Model::Model(ModelConfig config, std::uint64_t init_seed) : config_(std::move(config)) {
    config_.validate();
    Rng rng(init_seed);
    if (config_.family == ModelFamily::Transformer) {
        build_transformer(rng);
    } else {
        build_resnet(rng);
    }
    const std::size_t width = config_.family == ModelFamily::Transformer ? config_.d_model : config_.stage_channels.back();
    if (config_.final_layernorm) {
        final_ln_g_ = params_.add("final_ln.weight", Tensor::ones({1, width}));
        final_ln_b_ = params_.add("final_ln.bias", Tensor::zeros({1, width}));
    }
    head_w_ = params_.add("head.weight",
                          Tensor({width, config_.n_classes},
                                 init_weights(config_.initializer, width, config_.n_classes, width * config_.n_classes,
                                              rng, false)));
    head_b_ = params_.add("head.bias", Tensor::zeros({1, config_.n_classes}));
    junctions_.resize(config_.num_junctions());
    set_connection_plan(config_.connection_plan);
}

void Model::build_transformer(Rng& rng) {
    const ModelConfig& c = config_;
    const std::size_t d = c.d_model, e = c.in_channels * c.patch_size * c.patch_size, hid = c.mlp_ratio * d;
    const Initializer init = c.initializer;
    auto dense = [&](const std::string& name, std::size_t in, std::size_t out) {
        return params_.add(name, Tensor({in, out}, init_weights(init, in, out, in * out, rng, false)));
    };
    patch_w_ = dense("patch_embed.weight", e, d);
    patch_b_ = params_.add("patch_embed.bias", Tensor::zeros({1, d}));
    cls_ = params_.add("cls_token", Tensor({1, 1, d}, normal_vector(rng, d, 0.0, 0.02)));
    const std::size_t s = c.num_tokens();
    pos_ = params_.add("pos_embed", Tensor({1, s, d}, normal_vector(rng, s * d, 0.0, 0.02)));
    for (std::size_t i = 0; i < c.n_layers; ++i) {
        const std::string pre = "blocks." + std::to_string(i) + ".";
        TransformerBlockParams p;
        p.n_heads = c.n_heads;
        p.ln_eps = c.ln_eps;
        p.ln1_g = params_.add(pre + "ln1.weight", Tensor::ones({1, 1, d}));
        p.ln1_b = params_.add(pre + "ln1.bias", Tensor::zeros({1, 1, d}));
        p.wq = dense(pre + "attn.q.weight", d, d);
        p.bq = params_.add(pre + "attn.q.bias", Tensor::zeros({1, d}));
        p.wk = dense(pre + "attn.k.weight", d, d);
        p.bk = params_.add(pre + "attn.k.bias", Tensor::zeros({1, d}));
        p.wv = dense(pre + "attn.v.weight", d, d);
        p.bv = params_.add(pre + "attn.v.bias", Tensor::zeros({1, d}));
        p.wo = dense(pre + "attn.out.weight", d, d);
        p.bo = params_.add(pre + "attn.out.bias", Tensor::zeros({1, d}));
        p.ln2_g = params_.add(pre + "ln2.weight", Tensor::ones({1, 1, d}));
        p.ln2_b = params_.add(pre + "ln2.bias", Tensor::zeros({1, 1, d}));
        p.w1 = dense(pre + "mlp.fc1.weight", d, hid);
        p.b1 = params_.add(pre + "mlp.fc1.bias", Tensor::zeros({1, hid}));
        p.w2 = dense(pre + "mlp.fc2.weight", hid, d);
        p.b2 = params_.add(pre + "mlp.fc2.bias", Tensor::zeros({1, d}));
        tblocks_.push_back(p);
    }
}

void Model::build_resnet(Rng& rng) {
    const ModelConfig& c = config_;
    const Initializer init = c.initializer;
    auto conv = [&](const std::string& name, std::size_t co, std::size_t ci, std::size_t k) {
        return params_.add(name, Tensor({co, ci, k, k}, init_weights(init, ci * k * k, co * k * k, co * ci * k * k, rng, true)));
    };
    auto bn = [&](const std::string& pre, std::size_t ch, Tensor& g, Tensor& b, Tensor& mean, Tensor& var) {
        g = params_.add(pre + ".weight", Tensor::ones({1, ch, 1, 1}));
        b = params_.add(pre + ".bias", Tensor::zeros({1, ch, 1, 1}));
        mean = params_.add(pre + ".running_mean", Tensor::zeros({ch}), false);
        var = params_.add(pre + ".running_var", Tensor::ones({ch}), false);
    };
    std::size_t in_ch = c.stage_channels.front();
    stem_ = conv("stem.weight", in_ch, c.in_channels, 3);
    std::size_t index = 0;
    for (std::size_t k = 0; k < c.stage_channels.size(); ++k) {
        const std::size_t out_ch = c.stage_channels[k];
        for (std::size_t b = 0; b < c.blocks_per_stage[k]; ++b, ++index) {
            const std::string pre = "blocks." + std::to_string(index) + ".";
            PreactBlockParams p;
            p.stride = (k > 0 && b == 0) ? 2 : 1;
            bn(pre + "bn1", in_ch, p.bn1_g, p.bn1_b, p.bn1_mean, p.bn1_var);
            p.conv1 = conv(pre + "conv1.weight", out_ch, in_ch, 3);
            bn(pre + "bn2", out_ch, p.bn2_g, p.bn2_b, p.bn2_mean, p.bn2_var);
            p.conv2 = conv(pre + "conv2.weight", out_ch, out_ch, 3);
            if (p.stride != 1 || in_ch != out_ch) p.shortcut = conv(pre + "shortcut.weight", out_ch, in_ch, 1);
            rblocks_.push_back(p);
            in_ch = out_ch;
        }
    }
    bn("final_bn", in_ch, final_bn_g_, final_bn_b_, final_bn_mean_, final_bn_var_);
}

void Model::set_connection_plan(std::vector<ConnectionSpec> plan) {
    if (plan.size() != config_.num_junctions()) {
        throw ConfigError("connection plan has " + std::to_string(plan.size()) + " entries, model has " +
                          std::to_string(config_.num_junctions()) + " junctions");
    }
    plan = resolve_plan(config_.family, std::move(plan));
    for (std::size_t j = 0; j < plan.size(); ++j) {
        const std::string pre = "junction." + std::to_string(j) + ".";
        JunctionParams& jp = junctions_[j];
        const JunctionParams init = initial_junction_params(plan[j]);
        if (plan[j].kind == ConnectionKind::StreamScaled && !jp.alpha.defined()) {
            jp.alpha = params_.add(pre + "alpha", init.alpha);
        }
        if (plan[j].kind == ConnectionKind::Unified && !jp.rho.defined()) {
            jp.rho = params_.add(pre + "rho", init.rho);
            jp.theta = params_.add(pre + "theta", init.theta);
        }
    }
    config_.connection_plan = std::move(plan);
}

void Model::project_constraints() {
    for (JunctionParams& jp : junctions_) {
        if (jp.rho.defined()) {
            auto r = jp.rho.mutable_data();
            r[0] = std::max(0.0, r[0]);
        }
        if (jp.theta.defined()) {
            auto t = jp.theta.mutable_data();
            t[0] = std::clamp(t[0], -std::numbers::pi / 2.0, std::numbers::pi / 2.0);
        }
    }
}

ForwardResult Model::forward(const Tensor& images, Rng& rng, bool training) const {
    const ModelConfig& c = config_;
    if (images.ndim() != 4 || images.dim(1) != c.in_channels || images.dim(2) != c.image_size ||
        images.dim(3) != c.image_size) {
        throw DimensionError("model expects [B," + std::to_string(c.in_channels) + "," + std::to_string(c.image_size) +
                             "," + std::to_string(c.image_size) + "], got " + shape_str(images.shape()));
    }
    const std::size_t B = images.dim(0);
    ForwardResult out;
    Tensor features;
    if (c.family == ModelFamily::Transformer) {
        const Tensor patches = patchify(images, c.patch_size);
        const std::size_t s = patches.dim(1), e = patches.dim(2), d = c.d_model;
        const Tensor tokens = reshape(add(matmul(reshape(patches, {B * s, e}), patch_w_), patch_b_), {B, s, d});
        Tensor x = add(concat({expand(cls_, {B, 1, d}), tokens}, 1), pos_);
        for (std::size_t i = 0; i < tblocks_.size(); ++i) {
            BlockOutput bo = transformer_block_forward(x, tblocks_[i], c.connection_plan[2 * i],
                                                       c.connection_plan[2 * i + 1], rng, &junctions_[2 * i],
                                                       &junctions_[2 * i + 1]);
            x = bo.x_next;
            for (BlockTrace& t : bo.traces) {
                t.block_index = i;
                out.traces.push_back(t);
            }
        }
        features = reshape(slice(x, 1, 0, 1), {B, d});
    } else {
        Tensor x = conv2d(images, stem_, 1, 1);
        for (std::size_t i = 0; i < rblocks_.size(); ++i) {
            BlockOutput bo = preact_block_forward(x, rblocks_[i], c.connection_plan[i], rng, training, &junctions_[i]);
            x = bo.x_next;
            bo.traces.front().block_index = i;
            out.traces.push_back(bo.traces.front());
        }
        x = relu(affine_bn(x, final_bn_g_, final_bn_b_, final_bn_mean_, final_bn_var_, training));
        features = global_avg_pool(x);
    }
    if (c.final_layernorm) features = affine_ln(features, final_ln_g_, final_ln_b_, c.ln_eps);
    out.features = features;
    out.logits = add(matmul(features, head_w_), head_b_);
    return out;
}

}  // namespace orup
