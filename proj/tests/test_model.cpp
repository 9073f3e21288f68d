#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <vector>

#include "fmlb/model.hpp"
#include "fmlb/rng.hpp"
#include "fmlb/schedule.hpp"
#include "support/checks.hpp"

using namespace fmlb;
using testsup::max_abs_diff;
using testsup::random_tensor;
using testsup::random_tokens;
using testsup::tiny_config;

namespace {

bool bit_identical(const Tensor& a, const Tensor& b) {
    return a.same_shape(b) &&
           std::memcmp(a.data(), b.data(), a.numel() * sizeof(double)) == 0;
}

bool params_bit_identical(const Params& a, const Params& b) {
    Params& am = const_cast<Params&>(a);
    Params& bm = const_cast<Params&>(b);
    auto ra = param_refs(am), rb = param_refs(bm);
    if (ra.size() != rb.size()) return false;
    for (size_t i = 0; i < ra.size(); ++i)
        if (ra[i].name != rb[i].name || !bit_identical(*ra[i].tensor, *rb[i].tensor))
            return false;
    return true;
}

// Closed-form parameter count from the config shapes.
size_t expected_param_count(const ModelConfig& cfg) {
    const size_t d = cfg.d_model, di = cfg.d_inner(), K = cfg.d_conv,
                 R = cfg.dt_rank, N = cfg.state_dim, V = cfg.vocab_size;
    const size_t per_layer = d * 2 * di       // in_proj
                             + di * K + di    // conv weights + bias
                             + di * (R + 2 * N)  // x_proj
                             + R * di + di    // dt_proj + dt_bias
                             + di * N + di    // a_log + d_skip
                             + di * d         // out_proj
                             + d + R + N + N; // block norm + three stabilization gains
    size_t total = cfg.n_layers * per_layer + V * d + d;  // embedding + final gain
    if (!cfg.tied_embedding) total += d * V;              // untied output head
    return total;
}

double row_rms(const Tensor& t, size_t r) {
    double ms = 0.0;
    for (size_t i = 0; i < t.cols(); ++i) ms += t.at(r, i) * t.at(r, i);
    return std::sqrt(ms / static_cast<double>(t.cols()));
}

}  // namespace

// ---------------------------------------------------------------------------
// initialization
// ---------------------------------------------------------------------------

TEST_CASE("init_params: same seed is bit-identical, different seed is not") {
    ModelConfig cfg = ModelConfig::desk();
    Params a = init_params(cfg, 42);
    Params b = init_params(cfg, 42);
    Params c = init_params(cfg, 43);
    CHECK(params_bit_identical(a, b));
    CHECK(!bit_identical(a.input_embedding, c.input_embedding));
}

TEST_CASE("init_params: parameter count matches the closed-form shape arithmetic") {
    ModelConfig desk = ModelConfig::desk();
    Params p = init_params(desk, 0);
    CHECK(param_count(p) == expected_param_count(desk));
    CHECK(param_count(p) == 98312);  // frozen for the desk preset

    ModelConfig tiny = tiny_config();
    Params q = init_params(tiny, 0);
    CHECK(param_count(q) == expected_param_count(tiny));

    tiny.tied_embedding = true;
    Params r = init_params(tiny, 0);
    CHECK(param_count(r) == expected_param_count(tiny));
    CHECK(r.output_head.empty());
}

TEST_CASE("init_params: A ladder, dt_bias range, gains and conv bias") {
    ModelConfig cfg = ModelConfig::desk();
    Params p = init_params(cfg, 7);
    for (const auto& layer : p.layers) {
        for (size_t c = 0; c < cfg.d_inner(); ++c)
            for (size_t n = 0; n < cfg.state_dim; ++n) {
                const double A = -std::exp(layer.a_log.at(c, n));
                CHECK(A < 0.0);
                CHECK(A == doctest::Approx(-double(n + 1)).epsilon(1e-12));
            }
        for (size_t c = 0; c < cfg.d_inner(); ++c) {
            const double dt = std::log1p(std::exp(layer.dt_bias[c]));
            CHECK(dt >= 1e-3 * (1 - 1e-12));
            CHECK(dt <= 1e-1 * (1 + 1e-12));
        }
        for (size_t i = 0; i < layer.conv_b.numel(); ++i) CHECK(layer.conv_b[i] == 0.0);
        for (size_t i = 0; i < layer.norm_gain.numel(); ++i)
            CHECK(layer.norm_gain[i] == 1.0);
        for (size_t i = 0; i < layer.dt_norm_gain.numel(); ++i)
            CHECK(layer.dt_norm_gain[i] == 1.0);
    }
    for (size_t i = 0; i < p.final_norm_gain.numel(); ++i)
        CHECK(p.final_norm_gain[i] == 1.0);
}

TEST_CASE("init_params: rejects a zero-dimension config") {
    ModelConfig cfg = ModelConfig::desk();
    cfg.d_model = 0;
    CHECK_THROWS_AS((void)init_params(cfg, 0), std::invalid_argument);
    cfg = ModelConfig::desk();
    cfg.vocab_size = 0;
    CHECK_THROWS_AS((void)init_params(cfg, 0), std::invalid_argument);
}

TEST_CASE("param_refs: weight decay exemptions cover gains, biases, a_log, d_skip") {
    Params p = init_params(ModelConfig::desk(), 0);
    for (const auto& ref : param_refs(p)) {
        const bool exempt = ref.name.find("gain") != std::string::npos ||
                            ref.name.find("bias") != std::string::npos ||
                            ref.name.find("conv_b") != std::string::npos ||
                            ref.name.find("a_log") != std::string::npos ||
                            ref.name.find("d_skip") != std::string::npos;
        CHECK(ref.weight_decay == !exempt);
    }
}

// ---------------------------------------------------------------------------
// block
// ---------------------------------------------------------------------------

TEST_CASE("mamba_block_forward: zero out_proj makes the block an identity") {
    ModelConfig cfg = tiny_config();
    Params p = init_params(cfg, 3);
    p.layers[0].out_proj.fill(0.0);
    Rng rng(5);
    Tensor x = random_tensor(rng, {6, cfg.d_model});
    Tensor y = mamba_block_forward(cfg, p.layers[0], x, nullptr, nullptr, nullptr);
    CHECK(max_abs_diff(y, x) == 0.0);
}

TEST_CASE("mamba_block_forward: incremental T=1 calls match the full sequence") {
    ModelConfig cfg = tiny_config();
    Params p = init_params(cfg, 9);
    Rng rng(11);
    const size_t T = 10;
    Tensor x = random_tensor(rng, {T, cfg.d_model});

    Tensor full = mamba_block_forward(cfg, p.layers[0], x, nullptr, nullptr, nullptr);

    ModelCache cache = make_cache(cfg);
    for (size_t t = 0; t < T; ++t) {
        Tensor xt({1, cfg.d_model});
        std::memcpy(xt.data(), x.row(t), cfg.d_model * sizeof(double));
        Tensor yt = mamba_block_forward(cfg, p.layers[0], xt, &cache.layers[0],
                                        nullptr, nullptr);
        for (size_t c = 0; c < cfg.d_model; ++c)
            CHECK(yt.at(0, c) == doctest::Approx(full.at(t, c)).epsilon(1e-10));
    }
}

TEST_CASE("stabilization norms: toggling the flag changes model outputs") {
    ModelConfig on = tiny_config();
    ModelConfig off = tiny_config();
    off.stabilization_norms = false;
    Params p_on = init_params(on, 21);
    Params p_off = p_on;
    p_off.config = off;

    Rng rng(23);
    std::vector<int> tokens = random_tokens(rng, 8, on.vocab_size);
    Tensor a = model_forward(p_on, tokens);
    Tensor b = model_forward(p_off, tokens);
    CHECK(max_abs_diff(a, b) > 1e-6);
}

TEST_CASE("stabilization norms: normalized activations carry the gain magnitude") {
    ModelConfig cfg = ModelConfig::desk();
    Params p = init_params(cfg, 31);
    // Distinct constant gains so each normalized stream is identifiable.
    for (auto& layer : p.layers) {
        layer.dt_norm_gain.fill(1.7);
        layer.b_norm_gain.fill(0.6);
        layer.c_norm_gain.fill(2.5);
    }
    Rng rng(37);
    std::vector<int> tokens = random_tokens(rng, 24, cfg.vocab_size);
    ForwardTrace trace;
    ForwardOptions opts;
    opts.trace = &trace;
    (void)model_forward(p, tokens, opts);

    for (const auto& block : trace.blocks)
        for (size_t t = 0; t < tokens.size(); ++t) {
            CHECK(row_rms(block.dt_in, t) == doctest::Approx(1.7).epsilon(1e-6));
            CHECK(row_rms(block.b_in, t) == doctest::Approx(0.6).epsilon(1e-6));
            CHECK(row_rms(block.c_in, t) == doctest::Approx(2.5).epsilon(1e-6));
        }
}

// ---------------------------------------------------------------------------
// full model forward
// ---------------------------------------------------------------------------

TEST_CASE("model_forward: logits shape contract for T in {1, 7, 300}") {
    ModelConfig cfg = tiny_config();
    Params p = init_params(cfg, 1);
    Rng rng(2);
    for (size_t T : {size_t(1), size_t(7), size_t(300)}) {
        std::vector<int> tokens = random_tokens(rng, T, cfg.vocab_size);
        Tensor logits = model_forward(p, tokens);
        CHECK(logits.rows() == T);
        CHECK(logits.cols() == cfg.vocab_size);
    }
}

TEST_CASE("model_forward: deterministic and rejects out-of-range tokens") {
    ModelConfig cfg = tiny_config();
    Params p = init_params(cfg, 4);
    std::vector<int> tokens{1, 5, 3, 28};
    Tensor a = model_forward(p, tokens);
    Tensor b = model_forward(p, tokens);
    CHECK(bit_identical(a, b));
    CHECK_THROWS_AS((void)model_forward(p, std::vector<int>{1, 29}),
                    std::invalid_argument);
    CHECK_THROWS_AS((void)model_forward(p, std::vector<int>{-1}),
                    std::invalid_argument);
}

TEST_CASE("model_forward: T=1 steps with cache match the parallel call") {
    ModelConfig cfg = tiny_config();
    Params p = init_params(cfg, 8);
    Rng rng(13);
    const size_t T = 2;
    std::vector<int> tokens = random_tokens(rng, T, cfg.vocab_size);
    Tensor full = model_forward(p, tokens);

    ModelCache cache = make_cache(cfg);
    for (size_t t = 0; t < T; ++t) {
        ForwardOptions opts;
        opts.cache = &cache;
        Tensor logits = model_forward(p, {tokens[t]}, opts);
        for (size_t v = 0; v < cfg.vocab_size; ++v)
            CHECK(std::fabs(logits.at(0, v) - full.at(t, v)) < 1e-8);
    }
}

TEST_CASE("model_forward: incremental equals parallel over T=64") {
    ModelConfig cfg = tiny_config();
    Params p = init_params(cfg, 16);
    Rng rng(17);
    const size_t T = 64;
    std::vector<int> tokens = random_tokens(rng, T, cfg.vocab_size);
    Tensor full = model_forward(p, tokens);

    ModelCache cache = make_cache(cfg);
    double worst = 0.0;
    for (size_t t = 0; t < T; ++t) {
        ForwardOptions opts;
        opts.cache = &cache;
        Tensor logits = model_forward(p, {tokens[t]}, opts);
        for (size_t v = 0; v < cfg.vocab_size; ++v)
            worst = std::max(worst, std::fabs(logits.at(0, v) - full.at(t, v)));
    }
    CHECK(worst < 1e-8);
}

TEST_CASE("model_forward: causality is exact") {
    ModelConfig cfg = tiny_config();
    Params p = init_params(cfg, 19);
    Rng rng(23);
    const size_t T = 12, k = 7;
    std::vector<int> tokens = random_tokens(rng, T, cfg.vocab_size);
    Tensor base = model_forward(p, tokens);

    std::vector<int> perturbed = tokens;
    perturbed[k] = (perturbed[k] + 1) % static_cast<int>(cfg.vocab_size);
    Tensor changed = model_forward(p, perturbed);

    for (size_t t = 0; t < k; ++t)
        for (size_t v = 0; v < cfg.vocab_size; ++v)
            CHECK(base.at(t, v) == changed.at(t, v));
    double after = 0.0;
    for (size_t v = 0; v < cfg.vocab_size; ++v)
        after = std::max(after, std::fabs(base.at(k, v) - changed.at(k, v)));
    CHECK(after > 0.0);
}

TEST_CASE("model_forward: LastOnly and None logits modes") {
    ModelConfig cfg = tiny_config();
    Params p = init_params(cfg, 27);
    std::vector<int> tokens{1, 2, 3, 4, 5};
    Tensor full = model_forward(p, tokens);

    ForwardOptions last;
    last.logits = LogitsMode::LastOnly;
    Tensor tail = model_forward(p, tokens, last);
    CHECK(tail.rows() == 1);
    for (size_t v = 0; v < cfg.vocab_size; ++v)
        CHECK(tail.at(0, v) == doctest::Approx(full.at(4, v)).epsilon(1e-12));

    ForwardOptions none;
    none.logits = LogitsMode::None;
    Tensor empty = model_forward(p, tokens, none);
    CHECK(empty.empty());
}

// ---------------------------------------------------------------------------
// untied / tied embeddings
// ---------------------------------------------------------------------------

TEST_CASE("untied storage: mutating or stepping output_head leaves the embedding") {
    ModelConfig cfg = tiny_config();
    Params p = init_params(cfg, 33);
    Tensor embedding_before = p.input_embedding;

    Tensor g(p.output_head.shape(), std::vector<double>(p.output_head.numel(), 0.5));
    Tensor m(p.output_head.shape()), v(p.output_head.shape());
    OptimizerConfig ocfg;
    adamw_update(p.output_head.data(), g.data(), m.data(), v.data(),
                 p.output_head.numel(), 1, 1e-2, ocfg, true);
    CHECK(bit_identical(p.input_embedding, embedding_before));
    CHECK(!bit_identical(p.output_head, g));  // the step itself did something
}

TEST_CASE("tied embeddings: head logits come from the embedding transpose") {
    ModelConfig cfg = tiny_config();
    cfg.tied_embedding = true;
    Params p = init_params(cfg, 35);
    std::vector<int> tokens{3, 1, 4};

    ForwardTrace trace;
    ForwardOptions opts;
    opts.trace = &trace;
    Tensor logits = model_forward(p, tokens, opts);
    for (size_t t = 0; t < tokens.size(); ++t)
        for (size_t v = 0; v < cfg.vocab_size; ++v) {
            double want = 0.0;
            for (size_t dcol = 0; dcol < cfg.d_model; ++dcol)
                want += trace.final_normed.at(t, dcol) * p.input_embedding.at(v, dcol);
            CHECK(logits.at(t, v) == doctest::Approx(want).epsilon(1e-12));
        }
}

// ---------------------------------------------------------------------------
// loss
// ---------------------------------------------------------------------------

TEST_CASE("loss_forward: uniform logits give ln(vocab)") {
    Tensor logits({3, 256});
    std::vector<int> targets{0, 128, 255};
    std::vector<uint8_t> mask{1, 1, 1};
    LossResult r = loss_forward(logits, targets, mask, 0.0);
    CHECK(r.value == doctest::Approx(std::log(256.0)).epsilon(1e-12));
    CHECK(r.value == doctest::Approx(5.54518).epsilon(1e-5));
}

TEST_CASE("loss_forward: saturated correct logit and masking") {
    Tensor logits({2, 8});
    logits.at(0, 5) = 1e4;
    std::vector<int> targets{5, 2};
    {
        std::vector<uint8_t> mask{1, 0};
        LossResult r = loss_forward(logits, targets, mask, 0.0);
        CHECK(r.value < 1e-12);

        Tensor mutated = logits;
        for (size_t v = 0; v < 8; ++v) mutated.at(1, v) = 99.0;
        LossResult r2 = loss_forward(mutated, targets, mask, 0.0);
        CHECK(r2.value == r.value);
    }
    CHECK_THROWS_AS((void)loss_forward(logits, targets, {0, 0}, 0.0),
                    std::invalid_argument);
}

// ---------------------------------------------------------------------------
// gradients
// ---------------------------------------------------------------------------

TEST_CASE("end-to-end gradients: every parameter group passes finite differences") {
    ModelConfig cfg = tiny_config();
    Params params = init_params(cfg, 12345);
    Rng rng(99);
    const size_t T = 6;
    std::vector<int> tokens = random_tokens(rng, T, cfg.vocab_size);
    std::vector<int> targets = random_tokens(rng, T, cfg.vocab_size);
    std::vector<uint8_t> mask{1, 1, 0, 1, 1, 1};  // one masked position
    const double z = 1e-3;

    auto loss = [&] {
        Tensor logits = model_forward(params, tokens);
        return loss_forward(logits, targets, mask, z).value;
    };

    ForwardTrace trace;
    ForwardOptions opts;
    opts.trace = &trace;
    Tensor logits = model_forward(params, tokens, opts);
    LossResult lres = loss_forward(logits, targets, mask, z);
    Tensor dlogits({T, cfg.vocab_size});
    loss_backward(lres, targets, mask, z, dlogits);
    Params grads = zeros_like(params);
    model_backward(params, trace, dlogits, grads);

    auto prefs = param_refs(params);
    auto grefs = param_refs(grads);
    for (size_t i = 0; i < prefs.size(); ++i) {
        const double err = testsup::gradcheck(*prefs[i].tensor, *grefs[i].tensor, loss);
        INFO("parameter group: ", prefs[i].name);
        CHECK(err < 1e-4);
    }
}

TEST_CASE("end-to-end gradients: tied embedding folds the head gradient") {
    ModelConfig cfg = tiny_config();
    cfg.tied_embedding = true;
    cfg.n_layers = 1;
    Params params = init_params(cfg, 54321);
    Rng rng(101);
    const size_t T = 4;
    std::vector<int> tokens = random_tokens(rng, T, cfg.vocab_size);
    std::vector<int> targets = random_tokens(rng, T, cfg.vocab_size);
    std::vector<uint8_t> mask(T, 1);

    auto loss = [&] {
        Tensor logits = model_forward(params, tokens);
        return loss_forward(logits, targets, mask, 0.0).value;
    };

    ForwardTrace trace;
    ForwardOptions opts;
    opts.trace = &trace;
    Tensor logits = model_forward(params, tokens, opts);
    LossResult lres = loss_forward(logits, targets, mask, 0.0);
    Tensor dlogits({T, cfg.vocab_size});
    loss_backward(lres, targets, mask, 0.0, dlogits);
    Params grads = zeros_like(params);
    model_backward(params, trace, dlogits, grads);

    CHECK(testsup::gradcheck(params.input_embedding, grads.input_embedding, loss) <
          1e-4);
}
