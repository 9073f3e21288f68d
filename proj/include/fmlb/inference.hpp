#pragma once

#include <cstdint>
#include <vector>

#include "fmlb/model.hpp"

namespace fmlb {

// Prompts of mixed length aligned to the right; pads occupy a contiguous
// prefix of each row.
struct PaddedBatch {
    size_t batch = 0;
    size_t t_max = 0;
    std::vector<std::vector<int>> tokens;    // [batch][t_max]
    std::vector<std::vector<uint8_t>> mask;  // [batch][t_max], true = real

    static PaddedBatch build(const std::vector<std::vector<int>>& prompts, int pad_id);
    void validate() const;
    size_t real_count(size_t row) const;
};

// Per-sequence recurrent state. Byte size depends on config and batch width
// only, never on how many tokens have been consumed or generated.
struct DecodeState {
    ModelConfig config;
    size_t batch = 0;
    std::vector<ModelCache> rows;
    std::vector<uint8_t> alive;
    std::vector<uint64_t> position;  // tokens consumed per row

    static DecodeState fresh(const ModelConfig& cfg, size_t batch);
    size_t state_bytes() const;
    static size_t state_bytes_for(const ModelConfig& cfg, size_t batch);
};

struct PrefillResult {
    DecodeState state;
    Tensor last_logits;  // [batch, vocab]; zero rows for dead sequences
};

// Whole-prompt forward per row. Transient memory scales with the padded
// prompt length.
PrefillResult prefill_parallel(const Params& params, const PaddedBatch& prompts);

// Chunked forward; final state and logits match prefill_parallel, peak
// transient memory is bounded by chunk_size instead of prompt length.
PrefillResult prefill_sequential(const Params& params, const PaddedBatch& prompts,
                                 size_t chunk_size);

// One incremental forward per live row. Dead rows are skipped and keep a
// zero logits row. State byte size is unchanged by construction.
Tensor decode_step(const Params& params, DecodeState& state,
                   const std::vector<int>& tokens);

struct SamplingConfig {
    bool greedy = true;
    double temperature = 1.0;  // used when greedy == false; must be > 0
    uint64_t seed = 0;
};

struct GenerateOptions {
    size_t max_new_tokens = 16;
    SamplingConfig sampling;
    std::vector<int> stop_ids;
    bool sequential_prefill = false;
    size_t chunk_size = 64;
    int pad_id = 0;
};

// Left-pads the prompts, prefills, then decodes row-by-row until each row
// hits a stop id or the budget. Output excludes padding and prompt; a stop
// id, when hit, is the final element of its row.
std::vector<std::vector<int>> generate(const Params& params,
                                       const std::vector<std::vector<int>>& prompts,
                                       const GenerateOptions& opts);

}  // namespace fmlb
