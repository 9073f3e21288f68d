#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fmlb/kernels.hpp"
#include "fmlb/tensor.hpp"

namespace fmlb {

struct ModelConfig {
    size_t n_layers = 2;
    size_t d_model = 64;
    size_t expansion = 2;  // d_inner = expansion * d_model
    size_t vocab_size = 256;
    bool tied_embedding = false;
    size_t d_conv = 4;
    size_t dt_rank = 4;    // width of the low-rank bottleneck producing delta
    size_t state_dim = 16;
    // Small enough that even the faint pre-stabilization activations (mean
    // square ~1e-6 at init) normalize to unit RMS within ~1e-8; zero rows
    // still map to exactly zero.
    double rmsnorm_eps = 1e-14;
    bool stabilization_norms = true;

    size_t d_inner() const { return expansion * d_model; }
    void validate() const;

    static ModelConfig desk();         // 2 layers, d_model 64, byte vocab
    static ModelConfig paper_scale();  // 64 layers, d_model 4096, vocab 65024
};

struct LayerParams {
    Tensor in_proj;       // [d_model, 2*d_inner]; first half -> conv branch, second -> gate
    Tensor conv_w;        // [d_inner, d_conv]
    Tensor conv_b;        // [d_inner]
    Tensor x_proj;        // [d_inner, dt_rank + 2N] -> (delta_raw, B, C)
    Tensor dt_proj;       // [dt_rank, d_inner]
    Tensor dt_bias;       // [d_inner]
    Tensor a_log;         // [d_inner, N]; A = -exp(a_log)
    Tensor d_skip;        // [d_inner]
    Tensor out_proj;      // [d_inner, d_model]
    Tensor norm_gain;     // [d_model] block pre-norm
    Tensor dt_norm_gain;  // [dt_rank] stabilization norm for delta_raw
    Tensor b_norm_gain;   // [N]
    Tensor c_norm_gain;   // [N]
};

struct Params {
    ModelConfig config;
    Tensor input_embedding;  // [vocab, d_model]
    Tensor output_head;      // [d_model, vocab]; empty when tied_embedding
    std::vector<LayerParams> layers;
    Tensor final_norm_gain;  // [d_model]
};

// Deterministic initialization. Projections ~ N(0, 0.02^2), out_proj scaled
// by 1/sqrt(2*n_layers), A spanning -1..-N per channel, softplus(dt_bias)
// log-uniform in [1e-3, 1e-1], norm gains 1, conv bias 0.
Params init_params(const ModelConfig& cfg, uint64_t seed);

// All arrays zero, shapes derived from the config. Used for gradients,
// optimizer moments and checkpoint loading.
Params zero_params(const ModelConfig& cfg);
Params zeros_like(const Params& p);

struct ParamRef {
    std::string name;
    Tensor* tensor;
    bool weight_decay;  // false for gains, biases, a_log, d_skip
};

// Deterministic enumeration of every parameter array.
std::vector<ParamRef> param_refs(Params& p);
size_t param_count(const Params& p);

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

struct BlockCache {
    Tensor conv;  // [d_inner, d_conv - 1]
    Tensor h;     // [d_inner, N]
};

// Recurrent state of one sequence across all layers.
struct ModelCache {
    std::vector<BlockCache> layers;
};

ModelCache make_cache(const ModelConfig& cfg);

// Intermediates saved by one block's forward for its backward.
struct BlockTrace {
    Tensor x_in;      // [T, d_model]
    Tensor u;         // [T, d_model] block-normed input
    Tensor a;         // [T, d_inner] conv branch pre-conv
    Tensor conv0;     // [d_inner, d_conv - 1] conv state at chunk start
    Tensor z;         // [T, d_inner] gate branch
    Tensor conv_out;  // [T, d_inner] pre-SiLU
    Tensor v;         // [T, d_inner] conv branch post-SiLU
    Tensor dt_raw;    // [T, dt_rank] x_proj slice, pre-stabilization
    Tensor b_raw;     // [T, N]
    Tensor c_raw;     // [T, N]
    Tensor dt_in;     // [T, dt_rank] after stabilization norm
    Tensor b_in;      // [T, N]
    Tensor c_in;      // [T, N]
    Tensor dt_pre;    // [T, d_inner] dt_proj output + dt_bias, pre-softplus
    Tensor delta;     // [T, d_inner]
    Tensor scan_hs;   // [T + 1, d_inner * N]
    Tensor s;         // [T, d_inner] scan output
    Tensor gate;      // [T, d_inner] silu(z)
};

struct ForwardTrace {
    std::vector<int> tokens;
    std::vector<BlockTrace> blocks;
    Tensor final_in;      // [T, d_model] input of the final norm
    Tensor final_normed;  // [T, d_model]
};

enum class LogitsMode { All, LastOnly, None };

struct ForwardOptions {
    ModelCache* cache = nullptr;             // incremental mode when set
    const std::vector<uint8_t>* real_mask = nullptr;  // per-position, true = real token
    LogitsMode logits = LogitsMode::All;
    ForwardTrace* trace = nullptr;           // training mode when set
};

// Pre-norm residual Mamba block over a whole chunk. When `mask` is given,
// conv-branch activations at padded positions are zeroed both before and
// after the convolution; with bias-free projections this also zeroes the
// B/C/x contributions, so the SSM state never integrates padding.
Tensor mamba_block_forward(const ModelConfig& cfg, const LayerParams& layer,
                           const Tensor& x_seq, BlockCache* cache,
                           const std::vector<uint8_t>* mask, BlockTrace* trace);

void mamba_block_backward(const ModelConfig& cfg, const LayerParams& layer,
                          const BlockTrace& trace, const Tensor& dy,
                          Tensor& dx, LayerParams& grads);

// Embed -> n_layers blocks -> final rmsnorm -> output head. No positional
// encoding; any T >= 1 is accepted. Returns [T, vocab], [1, vocab] or an
// empty tensor depending on opts.logits.
Tensor model_forward(const Params& params, const std::vector<int>& tokens,
                     const ForwardOptions& opts = {});

// dlogits must be [T, vocab] matching a LogitsMode::All forward.
void model_backward(const Params& params, const ForwardTrace& trace,
                    const Tensor& dlogits, Params& grads);

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

struct LossResult {
    double value = 0.0;
    kernels::CrossEntropyResult saved;
};

// Mean masked cross-entropy plus z_coeff * mean masked (log sum exp)^2.
LossResult loss_forward(const Tensor& logits, const std::vector<int>& targets,
                        const std::vector<uint8_t>& loss_mask, double z_coeff);

void loss_backward(const LossResult& loss, const std::vector<int>& targets,
                   const std::vector<uint8_t>& loss_mask, double z_coeff,
                   Tensor& dlogits, double dloss = 1.0);

}  // namespace fmlb
