#include "fmlb/model.hpp"

#include <cmath>
#include <cstring>

#include "fmlb/rng.hpp"

namespace fmlb {

void ModelConfig::validate() const {
    require(n_layers >= 1, "n_layers must be >= 1");
    require(d_model >= 1, "d_model must be >= 1");
    require(expansion >= 1, "expansion must be >= 1");
    require(vocab_size >= 2, "vocab_size must be >= 2");
    require(d_conv >= 2, "d_conv must be >= 2");
    require(dt_rank >= 1, "dt_rank must be >= 1");
    require(state_dim >= 1, "state_dim must be >= 1");
    require(rmsnorm_eps > 0.0, "rmsnorm_eps must be positive");
}

ModelConfig ModelConfig::desk() {
    ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.d_model = 64;
    cfg.expansion = 2;
    cfg.vocab_size = 256;
    cfg.tied_embedding = false;
    cfg.d_conv = 4;
    cfg.dt_rank = 4;
    cfg.state_dim = 16;
    return cfg;
}

ModelConfig ModelConfig::paper_scale() {
    ModelConfig cfg;
    cfg.n_layers = 64;
    cfg.d_model = 4096;
    cfg.expansion = 2;
    cfg.vocab_size = 65024;
    cfg.tied_embedding = false;
    cfg.d_conv = 4;
    cfg.dt_rank = 16;
    cfg.state_dim = 16;
    return cfg;
}

namespace {

void fill_normal(Tensor& t, Rng& rng, double stddev) {
    for (size_t i = 0; i < t.numel(); ++i) t[i] = stddev * rng.normal();
}

// softplus(x) = y  =>  x = log(exp(y) - 1)
double softplus_inverse(double y) { return std::log(std::expm1(y)); }

}  // namespace

Params init_params(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    const size_t di = cfg.d_inner();
    const size_t N = cfg.state_dim;
    const double proj_std = 0.02;
    const double out_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(cfg.n_layers));

    Params p;
    p.config = cfg;
    p.input_embedding = Tensor({cfg.vocab_size, cfg.d_model});
    fill_normal(p.input_embedding, rng, proj_std);
    if (!cfg.tied_embedding) {
        p.output_head = Tensor({cfg.d_model, cfg.vocab_size});
        fill_normal(p.output_head, rng, proj_std);
    }

    p.layers.resize(cfg.n_layers);
    for (auto& layer : p.layers) {
        layer.in_proj = Tensor({cfg.d_model, 2 * di});
        fill_normal(layer.in_proj, rng, proj_std);
        layer.conv_w = Tensor({di, cfg.d_conv});
        fill_normal(layer.conv_w, rng, proj_std);
        layer.conv_b = Tensor({di});
        layer.x_proj = Tensor({di, cfg.dt_rank + 2 * N});
        fill_normal(layer.x_proj, rng, proj_std);
        layer.dt_proj = Tensor({cfg.dt_rank, di});
        fill_normal(layer.dt_proj, rng, proj_std);

        // softplus(dt_bias) log-uniform in [1e-3, 1e-1]
        layer.dt_bias = Tensor({di});
        const double lo = std::log(1e-3), hi = std::log(1e-1);
        for (size_t c = 0; c < di; ++c) {
            double dt = std::exp(lo + (hi - lo) * rng.uniform());
            layer.dt_bias[c] = softplus_inverse(dt);
        }

        // A spans -1..-N per channel: a_log[c][n] = log(n+1)
        layer.a_log = Tensor({di, N});
        for (size_t c = 0; c < di; ++c)
            for (size_t n = 0; n < N; ++n)
                layer.a_log.at(c, n) = std::log(static_cast<double>(n + 1));

        layer.d_skip = Tensor({di}, std::vector<double>(di, 1.0));
        layer.out_proj = Tensor({di, cfg.d_model});
        fill_normal(layer.out_proj, rng, proj_std * out_scale);

        layer.norm_gain = Tensor({cfg.d_model}, std::vector<double>(cfg.d_model, 1.0));
        layer.dt_norm_gain = Tensor({cfg.dt_rank}, std::vector<double>(cfg.dt_rank, 1.0));
        layer.b_norm_gain = Tensor({N}, std::vector<double>(N, 1.0));
        layer.c_norm_gain = Tensor({N}, std::vector<double>(N, 1.0));
    }

    p.final_norm_gain = Tensor({cfg.d_model}, std::vector<double>(cfg.d_model, 1.0));
    return p;
}

Params zero_params(const ModelConfig& cfg) {
    cfg.validate();
    const size_t di = cfg.d_inner();
    const size_t N = cfg.state_dim;
    Params p;
    p.config = cfg;
    p.input_embedding = Tensor({cfg.vocab_size, cfg.d_model});
    if (!cfg.tied_embedding) p.output_head = Tensor({cfg.d_model, cfg.vocab_size});
    p.layers.resize(cfg.n_layers);
    for (auto& d : p.layers) {
        d.in_proj = Tensor({cfg.d_model, 2 * di});
        d.conv_w = Tensor({di, cfg.d_conv});
        d.conv_b = Tensor({di});
        d.x_proj = Tensor({di, cfg.dt_rank + 2 * N});
        d.dt_proj = Tensor({cfg.dt_rank, di});
        d.dt_bias = Tensor({di});
        d.a_log = Tensor({di, N});
        d.d_skip = Tensor({di});
        d.out_proj = Tensor({di, cfg.d_model});
        d.norm_gain = Tensor({cfg.d_model});
        d.dt_norm_gain = Tensor({cfg.dt_rank});
        d.b_norm_gain = Tensor({N});
        d.c_norm_gain = Tensor({N});
    }
    p.final_norm_gain = Tensor({cfg.d_model});
    return p;
}

Params zeros_like(const Params& src) { return zero_params(src.config); }

std::vector<ParamRef> param_refs(Params& p) {
    std::vector<ParamRef> refs;
    refs.push_back({"input_embedding", &p.input_embedding, true});
    if (!p.output_head.empty()) refs.push_back({"output_head", &p.output_head, true});
    for (size_t l = 0; l < p.layers.size(); ++l) {
        LayerParams& lp = p.layers[l];
        const std::string base = "layers." + std::to_string(l) + ".";
        refs.push_back({base + "in_proj", &lp.in_proj, true});
        refs.push_back({base + "conv_w", &lp.conv_w, true});
        refs.push_back({base + "conv_b", &lp.conv_b, false});
        refs.push_back({base + "x_proj", &lp.x_proj, true});
        refs.push_back({base + "dt_proj", &lp.dt_proj, true});
        refs.push_back({base + "dt_bias", &lp.dt_bias, false});
        refs.push_back({base + "a_log", &lp.a_log, false});
        refs.push_back({base + "d_skip", &lp.d_skip, false});
        refs.push_back({base + "out_proj", &lp.out_proj, true});
        refs.push_back({base + "norm_gain", &lp.norm_gain, false});
        refs.push_back({base + "dt_norm_gain", &lp.dt_norm_gain, false});
        refs.push_back({base + "b_norm_gain", &lp.b_norm_gain, false});
        refs.push_back({base + "c_norm_gain", &lp.c_norm_gain, false});
    }
    refs.push_back({"final_norm_gain", &p.final_norm_gain, false});
    return refs;
}

size_t param_count(const Params& p) {
    size_t n = 0;
    auto refs = param_refs(const_cast<Params&>(p));
    for (const auto& r : refs) n += r.tensor->numel();
    return n;
}

ModelCache make_cache(const ModelConfig& cfg) {
    ModelCache cache;
    cache.layers.resize(cfg.n_layers);
    for (auto& bc : cache.layers) {
        bc.conv = Tensor({cfg.d_inner(), cfg.d_conv - 1});
        bc.h = Tensor({cfg.d_inner(), cfg.state_dim});
    }
    return cache;
}

// ---------------------------------------------------------------------------
// Block forward
// ---------------------------------------------------------------------------

namespace {

void zero_masked_rows(Tensor& t, const std::vector<uint8_t>& mask) {
    const size_t cols = t.cols();
    for (size_t r = 0; r < t.rows(); ++r)
        if (!mask[r]) std::memset(t.row(r), 0, cols * sizeof(double));
}

}  // namespace

Tensor mamba_block_forward(const ModelConfig& cfg, const LayerParams& layer,
                           const Tensor& x_seq, BlockCache* cache,
                           const std::vector<uint8_t>* mask, BlockTrace* trace) {
    const size_t T = x_seq.rows();
    const size_t di = cfg.d_inner();
    const size_t R = cfg.dt_rank;
    const size_t N = cfg.state_dim;
    require(x_seq.cols() == cfg.d_model, "block input width mismatch");
    if (mask) require(mask->size() == T, "mask length mismatch");

    Tensor u = kernels::rmsnorm(x_seq, layer.norm_gain, cfg.rmsnorm_eps);
    Tensor az = kernels::matmul(u, layer.in_proj);

    Tensor a({T, di}), z({T, di});
    for (size_t t = 0; t < T; ++t) {
        const double* src = az.row(t);
        std::memcpy(a.row(t), src, di * sizeof(double));
        std::memcpy(z.row(t), src + di, di * sizeof(double));
    }
    // Zero conv inputs at padded positions so the receptive field never
    // mixes padding into real tokens.
    if (mask) zero_masked_rows(a, *mask);

    Tensor conv0 = cache ? cache->conv : Tensor({di, cfg.d_conv - 1});
    kernels::ConvResult conv = kernels::causal_conv1d(a, layer.conv_w, layer.conv_b, conv0);
    if (cache) cache->conv = conv.cache;
    // Zero conv outputs at padded positions: the conv bias would otherwise
    // leak a nonzero activation into the SSM at every pad.
    if (mask) zero_masked_rows(conv.y, *mask);

    Tensor v = kernels::silu(conv.y);

    Tensor xdbc = kernels::matmul(v, layer.x_proj);
    Tensor dt_raw({T, R}), b_raw({T, N}), c_raw({T, N});
    for (size_t t = 0; t < T; ++t) {
        const double* src = xdbc.row(t);
        std::memcpy(dt_raw.row(t), src, R * sizeof(double));
        std::memcpy(b_raw.row(t), src + R, N * sizeof(double));
        std::memcpy(c_raw.row(t), src + R + N, N * sizeof(double));
    }

    Tensor dt_in, b_in, c_in;
    if (cfg.stabilization_norms) {
        dt_in = kernels::rmsnorm(dt_raw, layer.dt_norm_gain, cfg.rmsnorm_eps);
        b_in = kernels::rmsnorm(b_raw, layer.b_norm_gain, cfg.rmsnorm_eps);
        c_in = kernels::rmsnorm(c_raw, layer.c_norm_gain, cfg.rmsnorm_eps);
    } else {
        dt_in = dt_raw;
        b_in = b_raw;
        c_in = c_raw;
    }

    Tensor dt_pre = kernels::matmul(dt_in, layer.dt_proj);
    for (size_t t = 0; t < T; ++t) {
        double* row = dt_pre.row(t);
        for (size_t c = 0; c < di; ++c) row[c] += layer.dt_bias[c];
    }
    Tensor delta = kernels::softplus(dt_pre);

    kernels::ScanParams sp;
    sp.A = Tensor({di, N});
    for (size_t i = 0; i < di * N; ++i) sp.A[i] = -std::exp(layer.a_log[i]);
    sp.D = layer.d_skip;

    Tensor h0 = cache ? cache->h : Tensor({di, N});
    kernels::ScanResult scan =
        kernels::selective_scan_seq(sp, h0, v, delta, b_in, c_in, trace != nullptr);
    if (cache) cache->h = scan.hT;

    Tensor gate = kernels::silu(z);
    Tensor gated({T, di});
    for (size_t i = 0; i < T * di; ++i) gated[i] = scan.ys[i] * gate[i];

    Tensor out = kernels::matmul(gated, layer.out_proj);
    Tensor y({T, cfg.d_model});
    for (size_t i = 0; i < T * cfg.d_model; ++i) y[i] = x_seq[i] + out[i];

    if (trace) {
        trace->x_in = x_seq;
        trace->u = std::move(u);
        trace->a = std::move(a);
        trace->conv0 = std::move(conv0);
        trace->z = std::move(z);
        trace->conv_out = std::move(conv.y);
        trace->v = std::move(v);
        trace->dt_raw = std::move(dt_raw);
        trace->b_raw = std::move(b_raw);
        trace->c_raw = std::move(c_raw);
        trace->dt_in = std::move(dt_in);
        trace->b_in = std::move(b_in);
        trace->c_in = std::move(c_in);
        trace->dt_pre = std::move(dt_pre);
        trace->delta = std::move(delta);
        trace->scan_hs = std::move(scan.hs);
        trace->s = std::move(scan.ys);
        trace->gate = std::move(gate);
    }
    return y;
}

// ---------------------------------------------------------------------------
// Block backward
// ---------------------------------------------------------------------------

void mamba_block_backward(const ModelConfig& cfg, const LayerParams& layer,
                          const BlockTrace& trace, const Tensor& dy,
                          Tensor& dx, LayerParams& grads) {
    const size_t T = trace.x_in.rows();
    const size_t di = cfg.d_inner();
    const size_t R = cfg.dt_rank;
    const size_t N = cfg.state_dim;
    require(dy.rows() == T && dy.cols() == cfg.d_model, "dy shape mismatch");

    // Residual passthrough.
    for (size_t i = 0; i < T * cfg.d_model; ++i) dx[i] += dy[i];

    Tensor gated({T, di});
    for (size_t i = 0; i < T * di; ++i) gated[i] = trace.s[i] * trace.gate[i];
    Tensor dgated({T, di});
    kernels::matmul_backward(gated, layer.out_proj, dy, dgated, grads.out_proj);

    Tensor ds({T, di}), dgate({T, di});
    for (size_t i = 0; i < T * di; ++i) {
        ds[i] = dgated[i] * trace.gate[i];
        dgate[i] = dgated[i] * trace.s[i];
    }
    Tensor dz({T, di});
    kernels::silu_backward(trace.z, dgate, dz);

    kernels::ScanParams sp;
    sp.A = Tensor({di, N});
    for (size_t i = 0; i < di * N; ++i) sp.A[i] = -std::exp(layer.a_log[i]);
    sp.D = layer.d_skip;

    Tensor dA({di, N}), dD({di}), dh0({di, N});
    Tensor dv({T, di}), ddelta({T, di}), db_in({T, N}), dc_in({T, N});
    kernels::selective_scan_seq_backward(sp, trace.scan_hs, trace.v, trace.delta,
                                         trace.b_in, trace.c_in, ds, nullptr, dA, dD,
                                         dh0, dv, ddelta, db_in, dc_in);
    // A = -exp(a_log), so dA/da_log = A.
    for (size_t i = 0; i < di * N; ++i) grads.a_log[i] += dA[i] * sp.A[i];
    for (size_t c = 0; c < di; ++c) grads.d_skip[c] += dD[c];

    Tensor ddt_pre({T, di});
    for (size_t i = 0; i < T * di; ++i)
        ddt_pre[i] = ddelta[i] * kernels::sigmoid(trace.dt_pre[i]);
    for (size_t t = 0; t < T; ++t) {
        const double* row = ddt_pre.row(t);
        for (size_t c = 0; c < di; ++c) grads.dt_bias[c] += row[c];
    }

    Tensor ddt_in({T, R});
    kernels::matmul_backward(trace.dt_in, layer.dt_proj, ddt_pre, ddt_in, grads.dt_proj);

    Tensor ddt_raw({T, R}), db_raw({T, N}), dc_raw({T, N});
    if (cfg.stabilization_norms) {
        kernels::rmsnorm_backward(trace.dt_raw, layer.dt_norm_gain, cfg.rmsnorm_eps,
                                  ddt_in, ddt_raw, grads.dt_norm_gain);
        kernels::rmsnorm_backward(trace.b_raw, layer.b_norm_gain, cfg.rmsnorm_eps,
                                  db_in, db_raw, grads.b_norm_gain);
        kernels::rmsnorm_backward(trace.c_raw, layer.c_norm_gain, cfg.rmsnorm_eps,
                                  dc_in, dc_raw, grads.c_norm_gain);
    } else {
        ddt_raw = ddt_in;
        db_raw = db_in;
        dc_raw = dc_in;
    }

    Tensor dxdbc({T, R + 2 * N});
    for (size_t t = 0; t < T; ++t) {
        double* dst = dxdbc.row(t);
        std::memcpy(dst, ddt_raw.row(t), R * sizeof(double));
        std::memcpy(dst + R, db_raw.row(t), N * sizeof(double));
        std::memcpy(dst + R + N, dc_raw.row(t), N * sizeof(double));
    }
    kernels::matmul_backward(trace.v, layer.x_proj, dxdbc, dv, grads.x_proj);

    Tensor dconv_out({T, di});
    kernels::silu_backward(trace.conv_out, dv, dconv_out);

    Tensor da({T, di});
    Tensor dconv0(trace.conv0.shape());
    kernels::causal_conv1d_backward(trace.a, layer.conv_w, trace.conv0, dconv_out,
                                    da, grads.conv_w, grads.conv_b, dconv0);

    Tensor daz({T, 2 * di});
    for (size_t t = 0; t < T; ++t) {
        double* dst = daz.row(t);
        std::memcpy(dst, da.row(t), di * sizeof(double));
        std::memcpy(dst + di, dz.row(t), di * sizeof(double));
    }
    Tensor du({T, cfg.d_model});
    kernels::matmul_backward(trace.u, layer.in_proj, daz, du, grads.in_proj);

    kernels::rmsnorm_backward(trace.x_in, layer.norm_gain, cfg.rmsnorm_eps, du, dx,
                              grads.norm_gain);
}

// ---------------------------------------------------------------------------
// Model forward / backward
// ---------------------------------------------------------------------------

namespace {

Tensor head_matrix(const Params& params) {
    if (!params.config.tied_embedding) return params.output_head;
    const size_t V = params.config.vocab_size;
    const size_t D = params.config.d_model;
    Tensor head({D, V});
    for (size_t v = 0; v < V; ++v)
        for (size_t d = 0; d < D; ++d) head.at(d, v) = params.input_embedding.at(v, d);
    return head;
}

}  // namespace

Tensor model_forward(const Params& params, const std::vector<int>& tokens,
                     const ForwardOptions& opts) {
    const ModelConfig& cfg = params.config;
    require(!tokens.empty(), "model_forward needs at least one token");
    if (opts.cache)
        require(opts.cache->layers.size() == cfg.n_layers, "cache layer count mismatch");
    if (opts.real_mask)
        require(opts.real_mask->size() == tokens.size(), "real_mask length mismatch");

    Tensor x = kernels::embedding(tokens, params.input_embedding);

    if (opts.trace) {
        opts.trace->tokens = tokens;
        opts.trace->blocks.resize(cfg.n_layers);
    }
    for (size_t l = 0; l < cfg.n_layers; ++l) {
        BlockCache* bc = opts.cache ? &opts.cache->layers[l] : nullptr;
        BlockTrace* bt = opts.trace ? &opts.trace->blocks[l] : nullptr;
        x = mamba_block_forward(cfg, params.layers[l], x, bc, opts.real_mask, bt);
    }

    Tensor normed = kernels::rmsnorm(x, params.final_norm_gain, cfg.rmsnorm_eps);
    if (opts.trace) {
        opts.trace->final_in = x;
        opts.trace->final_normed = normed;
    }

    if (opts.logits == LogitsMode::None) return Tensor();
    Tensor head = head_matrix(params);
    if (opts.logits == LogitsMode::LastOnly) {
        Tensor last({1, cfg.d_model}, std::vector<double>(
                        normed.row(normed.rows() - 1),
                        normed.row(normed.rows() - 1) + cfg.d_model));
        return kernels::matmul(last, head);
    }
    return kernels::matmul(normed, head);
}

void model_backward(const Params& params, const ForwardTrace& trace,
                    const Tensor& dlogits, Params& grads) {
    const ModelConfig& cfg = params.config;
    const size_t T = trace.tokens.size();
    require(dlogits.rows() == T && dlogits.cols() == cfg.vocab_size,
            "dlogits shape mismatch");

    Tensor head = head_matrix(params);
    Tensor dnormed({T, cfg.d_model});
    Tensor dhead({cfg.d_model, cfg.vocab_size});
    kernels::matmul_backward(trace.final_normed, head, dlogits, dnormed, dhead);
    if (cfg.tied_embedding) {
        for (size_t v = 0; v < cfg.vocab_size; ++v)
            for (size_t d = 0; d < cfg.d_model; ++d)
                grads.input_embedding.at(v, d) += dhead.at(d, v);
    } else {
        for (size_t i = 0; i < dhead.numel(); ++i) grads.output_head[i] += dhead[i];
    }

    Tensor dx({T, cfg.d_model});
    kernels::rmsnorm_backward(trace.final_in, params.final_norm_gain, cfg.rmsnorm_eps,
                              dnormed, dx, grads.final_norm_gain);

    for (size_t l = cfg.n_layers; l-- > 0;) {
        Tensor dxin({T, cfg.d_model});
        mamba_block_backward(cfg, params.layers[l], trace.blocks[l], dx, dxin,
                             grads.layers[l]);
        dx = std::move(dxin);
    }

    kernels::embedding_backward(trace.tokens, dx, grads.input_embedding);
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

LossResult loss_forward(const Tensor& logits, const std::vector<int>& targets,
                        const std::vector<uint8_t>& loss_mask, double z_coeff) {
    LossResult out;
    out.saved = kernels::cross_entropy(logits, targets, loss_mask, z_coeff);
    out.value = out.saved.loss;
    return out;
}

void loss_backward(const LossResult& loss, const std::vector<int>& targets,
                   const std::vector<uint8_t>& loss_mask, double z_coeff,
                   Tensor& dlogits, double dloss) {
    kernels::cross_entropy_backward(loss.saved, targets, loss_mask, z_coeff, dloss,
                                    dlogits);
}

}  // namespace fmlb
