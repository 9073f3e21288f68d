#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "fmlb/model.hpp"
#include "fmlb/schedule.hpp"

namespace fmlb {

// ---------------------------------------------------------------------------
// Tokenization (byte-level: token id == byte value)
// ---------------------------------------------------------------------------

std::vector<int> tokenize_bytes(const std::string& text);
std::string detokenize(const std::vector<int>& ids, size_t vocab_size = 256);

// ---------------------------------------------------------------------------
// Packing
// ---------------------------------------------------------------------------

struct PackedWindows {
    size_t seq_len = 0;
    std::vector<std::vector<int>> inputs;   // [n][seq_len]
    std::vector<std::vector<int>> targets;  // [n][seq_len]
    size_t size() const { return inputs.size(); }
};

// Joins documents with a trailing separator each, slices the stream into
// contiguous seq_len windows (targets shifted by one), drops the tail.
// Loss masks are all-true; packing uses no padding.
PackedWindows pack_tokens(const std::vector<std::vector<int>>& documents,
                          size_t seq_len, int separator_id);

// ---------------------------------------------------------------------------
// Curriculum stages
// ---------------------------------------------------------------------------

struct Stage {
    uint64_t token_budget = 0;
    size_t seq_len = 0;
    // Shard name -> sampling weight; empty = uniform over all shards.
    std::vector<std::pair<std::string, double>> mixture;
    bool decay = false;  // only the final stage may be flagged
};

struct StageConfig {
    std::vector<Stage> stages;
    // Budgets must sum to schedule t_total; sequence lengths nondecreasing
    // across non-decay stages; a decay flag is allowed only on the final
    // stage and must start exactly at t_stable_end.
    void validate(const ScheduleConfig& schedule) const;
};

// ---------------------------------------------------------------------------
// Training state and checkpoints
// ---------------------------------------------------------------------------

struct TrainerConfig {
    double z_coeff = 0.0;
    int separator_id = 0;
    uint64_t checkpoint_every_steps = 0;  // 0 = stage boundaries only
    uint64_t seed = 0;
    OptimizerConfig optim;
    void validate() const;
};

struct TrainState {
    Params params;
    Params m;  // first moments, same structure as params
    Params v;  // second moments
    uint64_t step = 0;    // completed optimizer steps
    uint64_t tokens = 0;  // consumed tokens == schedule time
    uint64_t stage = 0;   // current stage index
    uint64_t cursor = 0;  // windows consumed within the current stage
    std::string rng_state;
};

struct Checkpoint {
    ScheduleConfig schedule;
    StageConfig stages;
    TrainerConfig trainer;
    TrainState state;
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// ---------------------------------------------------------------------------
// Corpus
// ---------------------------------------------------------------------------

struct CorpusShard {
    std::string name;
    std::vector<std::vector<int>> documents;  // blank-line separated
};

// A path to a UTF-8 text file loads one shard; a directory loads every
// regular file inside as a shard named by its filename.
std::vector<CorpusShard> load_corpus(const std::string& path);

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainResult {
    TrainState state;
    std::string checkpoint_path;  // final checkpoint
    std::string metrics_path;
    double initial_loss = 0.0;
    double final_loss = 0.0;
    uint64_t steps_run = 0;
};

TrainResult train(const ModelConfig& model_cfg, const StageConfig& stage_cfg,
                  const ScheduleConfig& schedule_cfg, const TrainerConfig& trainer_cfg,
                  const std::string& corpus_path, const std::string& out_dir);

TrainResult resume(const std::string& checkpoint_path, const std::string& corpus_path,
                   const std::string& out_dir);

}  // namespace fmlb
