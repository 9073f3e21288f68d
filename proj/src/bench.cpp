#include "fmlb/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "fmlb/inference.hpp"
#include "fmlb/kernels.hpp"
#include "fmlb/rng.hpp"

namespace fmlb {

using nlohmann::json;

void AttentionBaselineConfig::validate() const {
    require(d_model >= 1 && n_layers >= 1 && n_heads >= 1 && head_dim >= 1,
            "attention config fields must be >= 1");
    require(vocab_size >= 2, "vocab_size must be >= 2");
    require(d_model == n_heads * head_dim, "d_model must equal n_heads * head_dim");
    require(rmsnorm_eps > 0.0, "rmsnorm_eps must be positive");
}

AttentionParams init_attention(const AttentionBaselineConfig& cfg, uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    const double std_ = 0.02;
    const double out_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(cfg.n_layers));
    auto normal = [&](Tensor& t, double s) {
        for (size_t i = 0; i < t.numel(); ++i) t[i] = s * rng.normal();
    };

    AttentionParams p;
    p.config = cfg;
    p.embedding = Tensor({cfg.vocab_size, cfg.d_model});
    normal(p.embedding, std_);
    p.layers.resize(cfg.n_layers);
    for (auto& layer : p.layers) {
        layer.attn_gain = Tensor({cfg.d_model}, std::vector<double>(cfg.d_model, 1.0));
        layer.wq = Tensor({cfg.d_model, cfg.d_model});
        layer.wk = Tensor({cfg.d_model, cfg.d_model});
        layer.wv = Tensor({cfg.d_model, cfg.d_model});
        layer.wo = Tensor({cfg.d_model, cfg.d_model});
        normal(layer.wq, std_);
        normal(layer.wk, std_);
        normal(layer.wv, std_);
        normal(layer.wo, std_ * out_scale);
        layer.mlp_gain = Tensor({cfg.d_model}, std::vector<double>(cfg.d_model, 1.0));
        layer.w1 = Tensor({cfg.d_model, 4 * cfg.d_model});
        layer.w2 = Tensor({4 * cfg.d_model, cfg.d_model});
        normal(layer.w1, std_);
        normal(layer.w2, std_ * out_scale);
    }
    p.final_gain = Tensor({cfg.d_model}, std::vector<double>(cfg.d_model, 1.0));
    p.head = Tensor({cfg.d_model, cfg.vocab_size});
    normal(p.head, std_);
    return p;
}

KvCache KvCache::fresh(const AttentionBaselineConfig& cfg) {
    KvCache c;
    c.d_model = cfg.d_model;
    c.k.resize(cfg.n_layers);
    c.v.resize(cfg.n_layers);
    return c;
}

size_t KvCache::kv_bytes() const {
    size_t n = 0;
    for (const auto& layer : k) n += layer.size() * sizeof(double);
    for (const auto& layer : v) n += layer.size() * sizeof(double);
    return n;
}

size_t KvCache::kv_bytes_for(const AttentionBaselineConfig& cfg, size_t tokens) {
    return 2 * cfg.n_layers * tokens * cfg.n_heads * cfg.head_dim * sizeof(double);
}

namespace {

// Attention over cached keys/values for query rows [T_q, d_model] whose
// absolute positions start at q_start. Causal: row i attends cache entries
// 0..q_start+i.
Tensor attend(const AttentionBaselineConfig& cfg, const std::vector<double>& keys,
              const std::vector<double>& values, const Tensor& q, size_t q_start) {
    const size_t d = cfg.d_model;
    const size_t hd = cfg.head_dim;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    Tensor ctx({q.rows(), d});

    std::vector<double> scores;
    for (size_t i = 0; i < q.rows(); ++i) {
        const size_t n_keys = q_start + i + 1;
        const double* qrow = q.row(i);
        double* crow = ctx.row(i);
        scores.resize(n_keys);
        for (size_t h = 0; h < cfg.n_heads; ++h) {
            const size_t off = h * hd;
            double mx = -1e300;
            for (size_t j = 0; j < n_keys; ++j) {
                const double* krow = keys.data() + j * d + off;
                double dot = 0.0;
                for (size_t e = 0; e < hd; ++e) dot += qrow[off + e] * krow[e];
                scores[j] = dot * scale;
                mx = std::max(mx, scores[j]);
            }
            double denom = 0.0;
            for (size_t j = 0; j < n_keys; ++j) {
                scores[j] = std::exp(scores[j] - mx);
                denom += scores[j];
            }
            for (size_t j = 0; j < n_keys; ++j) {
                const double w = scores[j] / denom;
                const double* vrow = values.data() + j * d + off;
                for (size_t e = 0; e < hd; ++e) crow[off + e] += w * vrow[e];
            }
        }
    }
    return ctx;
}

Tensor attention_block_stack(const AttentionParams& params,
                             const std::vector<int>& tokens, KvCache& cache) {
    const AttentionBaselineConfig& cfg = params.config;
    for (int id : tokens)
        require(id >= 0 && static_cast<size_t>(id) < cfg.vocab_size,
                "token out of vocabulary");
    require(cache.k.size() == cfg.n_layers, "cache layer count mismatch");

    const size_t T = tokens.size();
    const size_t q_start = cache.tokens;
    Tensor x = kernels::embedding(tokens, params.embedding);

    for (size_t l = 0; l < cfg.n_layers; ++l) {
        const AttentionLayer& layer = params.layers[l];
        Tensor u = kernels::rmsnorm(x, layer.attn_gain, cfg.rmsnorm_eps);
        Tensor q = kernels::matmul(u, layer.wq);
        Tensor k = kernels::matmul(u, layer.wk);
        Tensor v = kernels::matmul(u, layer.wv);
        cache.k[l].insert(cache.k[l].end(), k.data(), k.data() + k.numel());
        cache.v[l].insert(cache.v[l].end(), v.data(), v.data() + v.numel());

        Tensor ctx = attend(cfg, cache.k[l], cache.v[l], q, q_start);
        Tensor o = kernels::matmul(ctx, layer.wo);
        for (size_t i = 0; i < T * cfg.d_model; ++i) x[i] += o[i];

        Tensor u2 = kernels::rmsnorm(x, layer.mlp_gain, cfg.rmsnorm_eps);
        Tensor mid = kernels::silu(kernels::matmul(u2, layer.w1));
        Tensor m = kernels::matmul(mid, layer.w2);
        for (size_t i = 0; i < T * cfg.d_model; ++i) x[i] += m[i];
    }
    cache.tokens += T;

    Tensor normed = kernels::rmsnorm(x, params.final_gain, cfg.rmsnorm_eps);
    return kernels::matmul(normed, params.head);
}

}  // namespace

Tensor attention_forward(const AttentionParams& params, const std::vector<int>& tokens,
                         KvCache* cache) {
    require(!tokens.empty(), "attention_forward needs at least one token");
    if (cache) return attention_block_stack(params, tokens, *cache);
    KvCache scratch = KvCache::fresh(params.config);
    return attention_block_stack(params, tokens, scratch);
}

Tensor attention_decode_step(const AttentionParams& params, KvCache& cache, int token) {
    return attention_block_stack(params, {token}, cache);
}

// ---------------------------------------------------------------------------
// Harness
// ---------------------------------------------------------------------------

void BenchConfig::validate() const {
    require(model == "mamba" || model == "attention",
            "unknown model tag: " + model);
    require(record_every >= 1, "record_every must be >= 1");
    require(n_tokens >= record_every, "n_tokens must be >= record_every");
    require(repetitions >= 1, "repetitions must be >= 1");
}

namespace {

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

int argmax_last_row(const Tensor& logits) {
    const double* p = logits.row(logits.rows() - 1);
    size_t best = 0;
    for (size_t i = 1; i < logits.cols(); ++i)
        if (p[i] > p[best]) best = i;
    return static_cast<int>(best);
}

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
    return std::chrono::duration<double>(Clock::now() - start).count();
}

// One full generation pass; fills per-window timings and, on the first pass,
// the record skeleton (positions, state bytes, transient peaks).
template <typename PrefillFn, typename StepFn, typename BytesFn>
void bench_pass(const BenchConfig& cfg, PrefillFn prefill, StepFn step,
                BytesFn state_bytes, bool first_pass,
                std::vector<BenchRecord>& records,
                std::vector<std::vector<double>>& window_times) {
    size_t rec_idx = 0;
    auto push_or_time = [&](const std::string& phase, uint64_t position,
                            double sec_per_token, uint64_t bytes, uint64_t peak) {
        if (first_pass) {
            records.push_back({cfg.model, phase, position, 0.0, bytes, peak});
            window_times.emplace_back();
        }
        window_times[rec_idx++].push_back(sec_per_token);
    };

    Clock::time_point t0 = Clock::now();
    uint64_t peak = 0;
    int next_token;
    {
        TransientMeter meter;
        next_token = prefill();
        peak = meter.peak_bytes();
    }
    push_or_time("prefill", 1, seconds_since(t0), state_bytes(), peak);

    uint64_t generated = 0;
    while (generated < cfg.n_tokens) {
        const uint64_t window = std::min<uint64_t>(cfg.record_every,
                                                   cfg.n_tokens - generated);
        if (window < cfg.record_every) break;  // tail smaller than a window
        t0 = Clock::now();
        TransientMeter meter;
        for (uint64_t i = 0; i < window; ++i) next_token = step(next_token);
        const double elapsed = seconds_since(t0);
        generated += window;
        push_or_time("decode", 1 + generated, elapsed / static_cast<double>(window),
                     state_bytes(), meter.peak_bytes());
    }
}

}  // namespace

std::vector<BenchRecord> run_generation_bench(const BenchConfig& cfg) {
    cfg.validate();
    std::vector<BenchRecord> records;
    std::vector<std::vector<double>> window_times;

    if (cfg.model == "mamba") {
        Params params = init_params(ModelConfig::desk(), cfg.seed);
        for (uint64_t rep = 0; rep < cfg.repetitions; ++rep) {
            DecodeState state = DecodeState::fresh(params.config, 1);
            auto prefill = [&] {
                PaddedBatch pb = PaddedBatch::build({{cfg.prompt_token}}, 0);
                PrefillResult pf = prefill_parallel(params, pb);
                state = std::move(pf.state);
                return argmax_last_row(pf.last_logits);
            };
            auto step = [&](int token) {
                Tensor logits = decode_step(params, state, {token});
                return argmax_last_row(logits);
            };
            auto bytes = [&] { return static_cast<uint64_t>(state.state_bytes()); };
            bench_pass(cfg, prefill, step, bytes, rep == 0, records, window_times);
        }
    } else {
        AttentionBaselineConfig acfg;
        AttentionParams params = init_attention(acfg, cfg.seed);
        KvCache cache = KvCache::fresh(acfg);
        for (uint64_t rep = 0; rep < cfg.repetitions; ++rep) {
            cache = KvCache::fresh(acfg);
            auto prefill = [&] {
                Tensor logits = attention_forward(params, {cfg.prompt_token}, &cache);
                return argmax_last_row(logits);
            };
            auto step = [&](int token) {
                Tensor logits = attention_decode_step(params, cache, token);
                return argmax_last_row(logits);
            };
            auto bytes = [&] { return static_cast<uint64_t>(cache.kv_bytes()); };
            bench_pass(cfg, prefill, step, bytes, rep == 0, records, window_times);
        }
    }

    for (size_t i = 0; i < records.size(); ++i)
        records[i].sec_per_token = median(window_times[i]);
    return records;
}

MemoryFit fit_memory_slope(const std::vector<BenchRecord>& records) {
    require(records.size() >= 3, "need at least 3 records to fit");
    const size_t n = records.size();
    double sx = 0.0, sy = 0.0;
    for (const auto& r : records) {
        sx += static_cast<double>(r.position);
        sy += static_cast<double>(r.state_bytes);
    }
    const double mx = sx / static_cast<double>(n);
    const double my = sy / static_cast<double>(n);
    double sxx = 0.0, sxy = 0.0, syy = 0.0;
    for (const auto& r : records) {
        const double dx = static_cast<double>(r.position) - mx;
        const double dy = static_cast<double>(r.state_bytes) - my;
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    require(sxx > 0.0, "degenerate fit: all positions equal");

    MemoryFit fit;
    if (syy == 0.0) {
        // Constant series: zero slope, perfect fit by convention.
        fit.slope = 0.0;
        fit.intercept = my;
        fit.r_squared = 1.0;
        return fit;
    }
    fit.slope = sxy / sxx;
    fit.intercept = my - fit.slope * mx;
    double ss_res = 0.0;
    for (const auto& r : records) {
        const double pred =
            fit.intercept + fit.slope * static_cast<double>(r.position);
        const double resid = static_cast<double>(r.state_bytes) - pred;
        ss_res += resid * resid;
    }
    fit.r_squared = 1.0 - ss_res / syy;
    return fit;
}

void emit_report(const std::vector<BenchRecord>& records, const std::string& path,
                 const std::string& format) {
    require(format == "csv" || format == "json", "unknown report format: " + format);
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open report for writing: " + path);

    if (format == "csv") {
        f << "model,phase,position,sec_per_token,state_bytes,peak_transient_bytes\n";
        char buf[64];
        for (const auto& r : records) {
            std::snprintf(buf, sizeof(buf), "%.17g", r.sec_per_token);
            f << r.model << ',' << r.phase << ',' << r.position << ',' << buf << ','
              << r.state_bytes << ',' << r.peak_transient_bytes << "\n";
        }
    } else {
        json arr = json::array();
        for (const auto& r : records)
            arr.push_back(json{{"model", r.model},
                               {"phase", r.phase},
                               {"position", r.position},
                               {"sec_per_token", r.sec_per_token},
                               {"state_bytes", r.state_bytes},
                               {"peak_transient_bytes", r.peak_transient_bytes}});
        f << arr.dump(2) << "\n";
    }
    if (!f) throw std::runtime_error("write failure on report: " + path);
}

std::vector<BenchRecord> parse_report_json(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open report: " + path);
    json arr;
    f >> arr;
    std::vector<BenchRecord> records;
    for (const auto& j : arr) {
        BenchRecord r;
        r.model = j.at("model").get<std::string>();
        r.phase = j.at("phase").get<std::string>();
        r.position = j.at("position").get<uint64_t>();
        r.sec_per_token = j.at("sec_per_token").get<double>();
        r.state_bytes = j.at("state_bytes").get<uint64_t>();
        r.peak_transient_bytes = j.at("peak_transient_bytes").get<uint64_t>();
        records.push_back(std::move(r));
    }
    return records;
}

}  // namespace fmlb
