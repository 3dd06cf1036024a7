#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "orup/diagnostics.hpp"
#include "orup/random.hpp"
#include "orup/residual.hpp"
#include "orup/tensor.hpp"

namespace orup {

enum class ModelFamily { Transformer, PreactResnet };
enum class Initializer { Kaiming, Xavier, Orthogonal };

std::string to_string(ModelFamily f);
ModelFamily model_family_from_string(const std::string& s);
std::string to_string(Initializer i);
Initializer initializer_from_string(const std::string& s);

struct ModelConfig {
    ModelFamily family = ModelFamily::Transformer;

    // transformer
    std::size_t d_model = 64;
    std::size_t n_layers = 2;
    std::size_t n_heads = 4;
    std::size_t patch_size = 4;
    std::size_t mlp_ratio = 4;

    // pre-activation resnet: stage k has blocks_per_stage[k] blocks with
    // stage_channels[k] output channels; stages after the first downsample by 2.
    std::vector<std::size_t> stage_channels{8, 16, 32};
    std::vector<std::size_t> blocks_per_stage{2, 2, 2};

    std::size_t in_channels = 1;
    std::size_t image_size = 8;
    std::size_t n_classes = 10;
    bool final_layernorm = true;
    double ln_eps = 1e-6;
    Initializer initializer = Initializer::Kaiming;

    // One spec per residual junction: attention then MLP for every transformer
    // block, one per conv block.
    std::vector<ConnectionSpec> connection_plan;

    std::size_t num_blocks() const;
    std::size_t num_junctions() const;
    std::size_t num_tokens() const;  // patches + CLS
    // Every violated constraint, empty when valid.
    std::vector<std::string> violations() const;
    void validate() const;
};

// Width-to-depth ratio: d_model / n_layers for transformers,
// Σ_k B_k·C_k / (Σ_k B_k)² for resnets.
double gamma(const ModelConfig& config);

// Fills reduction dims of every spec for the family's tensor layout:
// transformer streams are [B,s,d] (feature dim 2), conv streams [B,C,H,W]
// (feature dim 1, global dims {1,2,3}). Rejects global on transformers.
std::vector<ConnectionSpec> resolve_plan(ModelFamily family, std::vector<ConnectionSpec> plan);

// Ordered named tensors. Handles share storage with the blocks that use them.
class ParameterStore {
public:
    Tensor add(const std::string& name, Tensor t, bool trainable = true);
    bool contains(const std::string& name) const { return index_.count(name) != 0; }
    Tensor get(const std::string& name) const;

    struct Entry {
        std::string name;
        Tensor tensor;
        bool trainable;
    };
    const std::vector<Entry>& entries() const { return entries_; }
    void zero_grad();
    std::size_t trainable_count() const;

private:
    std::vector<Entry> entries_;
    std::map<std::string, std::size_t> index_;
};

struct TransformerBlockParams {
    Tensor ln1_g, ln1_b;
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln2_g, ln2_b;
    Tensor w1, b1, w2, b2;
    std::size_t n_heads = 1;
    double ln_eps = 1e-6;
};

struct PreactBlockParams {
    Tensor bn1_g, bn1_b, bn1_mean, bn1_var;
    Tensor conv1;
    Tensor bn2_g, bn2_b, bn2_mean, bn2_var;
    Tensor conv2;
    Tensor shortcut;  // undefined for identity shortcuts
    std::size_t stride = 1;
};

struct BlockOutput {
    Tensor x_next;
    std::vector<BlockTrace> traces;
};

// Module branches f(σ(x)) of a pre-LN block, x [B,s,d].
Tensor attention_branch(const Tensor& x, const TransformerBlockParams& p);
Tensor mlp_branch(const Tensor& x, const TransformerBlockParams& p);

BlockOutput transformer_block_forward(const Tensor& x, const TransformerBlockParams& p, const ConnectionSpec& spec_attn,
                                      const ConnectionSpec& spec_mlp, Rng& rng,
                                      const JunctionParams* jp_attn = nullptr, const JunctionParams* jp_mlp = nullptr);

// x [B,C,H,W]. The stream of the junction is the (projected) shortcut.
BlockOutput preact_block_forward(const Tensor& x, const PreactBlockParams& p, const ConnectionSpec& spec, Rng& rng,
                                 bool training, const JunctionParams* jp = nullptr);

struct ForwardResult {
    Tensor logits;    // [B, n_classes]
    Tensor features;  // classifier input [B, width]
    std::vector<BlockTrace> traces;
};

class Model {
public:
    Model(ModelConfig config, std::uint64_t init_seed);

    // images [B,C,H,W]. `rng` drives the pi draws of stochastic junctions.
    ForwardResult forward(const Tensor& images, Rng& rng, bool training) const;

    const ModelConfig& config() const { return config_; }
    ParameterStore& parameters() { return params_; }
    const ParameterStore& parameters() const { return params_; }

    const std::vector<ConnectionSpec>& connection_plan() const { return config_.connection_plan; }
    // Replaces the plan, creating learnable junction scalars that the new plan needs.
    void set_connection_plan(std::vector<ConnectionSpec> plan);
    // Keeps rho >= 0 and theta in [-pi/2, pi/2].
    void project_constraints();

    const std::vector<TransformerBlockParams>& transformer_blocks() const { return tblocks_; }
    const std::vector<PreactBlockParams>& preact_blocks() const { return rblocks_; }
    const JunctionParams& junction_params(std::size_t j) const { return junctions_.at(j); }
    Tensor pos_embedding() const { return pos_; }

private:
    void build_transformer(Rng& rng);
    void build_resnet(Rng& rng);

    ModelConfig config_;
    ParameterStore params_;
    std::vector<TransformerBlockParams> tblocks_;
    std::vector<PreactBlockParams> rblocks_;
    std::vector<JunctionParams> junctions_;

    Tensor patch_w_, patch_b_, cls_, pos_;
    Tensor stem_;
    Tensor final_bn_g_, final_bn_b_, final_bn_mean_, final_bn_var_;
    Tensor final_ln_g_, final_ln_b_;
    Tensor head_w_, head_b_;
};

// Weight matrix [fan_in, fan_out] (or conv [Co,Ci,k,k] with `conv`) per initializer.
std::vector<double> init_weights(Initializer init, std::size_t fan_in, std::size_t fan_out, std::size_t count,
                                 Rng& rng, bool conv);

}  // namespace orup
