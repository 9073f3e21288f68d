#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fmlb/model.hpp"

namespace fmlb {

struct BenchRecord {
    std::string model;  // "mamba" | "attention"
    std::string phase;  // "prefill" | "decode"
    uint64_t position = 0;
    double sec_per_token = 0.0;
    uint64_t state_bytes = 0;
    uint64_t peak_transient_bytes = 0;
};

// ---------------------------------------------------------------------------
// Attention baseline: minimal pre-norm decoder with a growing KV cache,
// existing purely to exhibit the linear memory/time contrast. No positional
// encoding (matching the recurrent model; sequences are short and the
// contrast is about cache growth, not modeling quality).
// ---------------------------------------------------------------------------

struct AttentionBaselineConfig {
    size_t d_model = 64;
    size_t n_layers = 2;
    size_t n_heads = 4;
    size_t head_dim = 16;
    size_t vocab_size = 256;
    double rmsnorm_eps = 1e-12;
    void validate() const;  // d_model == n_heads * head_dim
};

struct AttentionLayer {
    Tensor attn_gain;  // [d_model]
    Tensor wq, wk, wv, wo;  // [d_model, d_model]
    Tensor mlp_gain;   // [d_model]
    Tensor w1;         // [d_model, 4*d_model]
    Tensor w2;         // [4*d_model, d_model]
};

struct AttentionParams {
    AttentionBaselineConfig config;
    Tensor embedding;  // [vocab, d_model]
    std::vector<AttentionLayer> layers;
    Tensor final_gain;  // [d_model]
    Tensor head;        // [d_model, vocab]
};

AttentionParams init_attention(const AttentionBaselineConfig& cfg, uint64_t seed);

// Per-layer key/value rows appended once per consumed token. Raw storage so
// byte accounting is exact and independent of tensor bookkeeping.
struct KvCache {
    size_t d_model = 0;
    size_t tokens = 0;
    std::vector<std::vector<double>> k;  // [n_layers][tokens * d_model]
    std::vector<std::vector<double>> v;

    static KvCache fresh(const AttentionBaselineConfig& cfg);
    size_t kv_bytes() const;
    static size_t kv_bytes_for(const AttentionBaselineConfig& cfg, size_t tokens);
};

// Full-sequence causal forward; appends all tokens to the cache when given.
Tensor attention_forward(const AttentionParams& params, const std::vector<int>& tokens,
                         KvCache* cache);

// One token against the cached history; returns [1, vocab].
Tensor attention_decode_step(const AttentionParams& params, KvCache& cache, int token);

// ---------------------------------------------------------------------------
// Harness
// ---------------------------------------------------------------------------

struct BenchConfig {
    std::string model = "mamba";  // "mamba" | "attention"
    uint64_t n_tokens = 10000;
    uint64_t record_every = 1000;
    uint64_t repetitions = 3;
    uint64_t seed = 0;
    int prompt_token = 0;
    void validate() const;
};

// Prompt of length 1, greedy decode for n_tokens. One prefill record, then a
// record per window of record_every tokens: wall time per token (median over
// repetitions), exact state bytes, and peak transient allocation in the
// window. Record positions count from the start of the sequence.
std::vector<BenchRecord> run_generation_bench(const BenchConfig& cfg);

struct MemoryFit {
    double slope = 0.0;  // bytes per token
    double intercept = 0.0;
    double r_squared = 0.0;
};

// Ordinary least squares of state_bytes against position. A zero-variance
// series reports slope 0 and R² = 1 by convention.
MemoryFit fit_memory_slope(const std::vector<BenchRecord>& records);

void emit_report(const std::vector<BenchRecord>& records, const std::string& path,
                 const std::string& format);  // "csv" | "json"
std::vector<BenchRecord> parse_report_json(const std::string& path);

}  // namespace fmlb
