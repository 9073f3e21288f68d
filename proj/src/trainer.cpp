#include "fmlb/trainer.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "fmlb/config_io.hpp"
#include "fmlb/rng.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

namespace fmlb {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Tokenization
// ---------------------------------------------------------------------------

std::vector<int> tokenize_bytes(const std::string& text) {
    std::vector<int> ids;
    ids.reserve(text.size());
    for (unsigned char c : text) ids.push_back(static_cast<int>(c));
    return ids;
}

std::string detokenize(const std::vector<int>& ids, size_t vocab_size) {
    std::string text;
    text.reserve(ids.size());
    for (int id : ids) {
        require(id >= 0 && static_cast<size_t>(id) < vocab_size,
                "token id out of vocabulary in detokenize");
        if (id < 256) text.push_back(static_cast<char>(id));
        // ids >= 256 are specials with no byte representation; dropped
    }
    return text;
}

// ---------------------------------------------------------------------------
// Packing
// ---------------------------------------------------------------------------

PackedWindows pack_tokens(const std::vector<std::vector<int>>& documents,
                          size_t seq_len, int separator_id) {
    require(seq_len >= 2, "seq_len must be >= 2");
    require(!documents.empty(), "no documents to pack");

    std::vector<int> stream;
    size_t total = 0;
    for (const auto& d : documents) total += d.size() + 1;
    stream.reserve(total);
    for (const auto& d : documents) {
        stream.insert(stream.end(), d.begin(), d.end());
        stream.push_back(separator_id);
    }

    PackedWindows out;
    out.seq_len = seq_len;
    for (size_t start = 0; start + seq_len + 1 <= stream.size(); start += seq_len) {
        out.inputs.emplace_back(stream.begin() + start, stream.begin() + start + seq_len);
        out.targets.emplace_back(stream.begin() + start + 1,
                                 stream.begin() + start + seq_len + 1);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Stage validation
// ---------------------------------------------------------------------------

void StageConfig::validate(const ScheduleConfig& schedule) const {
    require(!stages.empty(), "at least one stage required");
    uint64_t total = 0;
    size_t prev_len = 0;
    for (size_t i = 0; i < stages.size(); ++i) {
        const Stage& st = stages[i];
        require(st.token_budget >= 1, "stage token_budget must be >= 1");
        require(st.seq_len >= 2, "stage seq_len must be >= 2");
        if (st.decay)
            require(i + 1 == stages.size(), "only the final stage may be flagged decay");
        if (!st.decay) {
            require(st.seq_len >= prev_len,
                    "sequence lengths must be nondecreasing across non-decay stages");
            prev_len = st.seq_len;
        }
        for (const auto& [name, w] : st.mixture) {
            require(!name.empty(), "mixture shard name must be nonempty");
            require(w > 0.0, "mixture weight must be positive");
        }
        if (st.decay)
            require(total == schedule.t_stable_end,
                    "decay stage must start exactly at t_stable_end");
        total += st.token_budget;
    }
    require(total == schedule.t_total, "stage budgets must sum to t_total");
}

void TrainerConfig::validate() const {
    require(z_coeff >= 0.0, "z_coeff must be >= 0");
    require(separator_id >= 0, "separator_id must be >= 0");
    optim.validate();
}

// ---------------------------------------------------------------------------
// Corpus
// ---------------------------------------------------------------------------

namespace {

std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open corpus file: " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

// Blank-line separated documents; empty documents are dropped.
std::vector<std::vector<int>> split_documents(const std::string& text) {
    std::vector<std::vector<int>> docs;
    size_t pos = 0;
    while (pos < text.size()) {
        size_t brk = text.find("\n\n", pos);
        if (brk == std::string::npos) brk = text.size();
        if (brk > pos) docs.push_back(tokenize_bytes(text.substr(pos, brk - pos)));
        pos = brk + 2;
    }
    return docs;
}

}  // namespace

std::vector<CorpusShard> load_corpus(const std::string& path) {
    std::vector<CorpusShard> shards;
    if (fs::is_directory(path)) {
        std::vector<fs::path> files;
        for (const auto& entry : fs::directory_iterator(path))
            if (entry.is_regular_file()) files.push_back(entry.path());
        std::sort(files.begin(), files.end());
        for (const auto& f : files) {
            CorpusShard sh;
            sh.name = f.filename().string();
            sh.documents = split_documents(read_file(f.string()));
            if (!sh.documents.empty()) shards.push_back(std::move(sh));
        }
    } else {
        CorpusShard sh;
        sh.name = fs::path(path).filename().string();
        sh.documents = split_documents(read_file(path));
        if (!sh.documents.empty()) shards.push_back(std::move(sh));
    }
    require(!shards.empty(), "corpus is empty: " + path);
    return shards;
}

// ---------------------------------------------------------------------------
// Checkpoint format
//
//   "FMLB1\n"
//   <decimal manifest byte length>"\n"
//   <JSON manifest>
//   <raw little-endian f64 arrays, order and offsets per manifest>
//   <8-byte FNV-1a-64 hash of the array section>
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[] = "FMLB1\n";
constexpr size_t kMagicLen = 6;
constexpr int kVersion = 1;

uint64_t fnv1a64(const uint8_t* data, size_t n, uint64_t h = 14695981039346656037ULL) {
    for (size_t i = 0; i < n; ++i) {
        h ^= data[i];
        h *= 1099511628211ULL;
    }
    return h;
}

struct NamedTensors {
    std::vector<std::string> names;
    std::vector<Tensor*> tensors;
};

NamedTensors collect_arrays(TrainState& st) {
    NamedTensors out;
    auto add = [&](const std::string& prefix, Params& p) {
        for (auto& ref : param_refs(p)) {
            out.names.push_back(prefix + ref.name);
            out.tensors.push_back(ref.tensor);
        }
    };
    add("params.", st.params);
    add("m.", st.m);
    add("v.", st.v);
    return out;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    TrainState& st = const_cast<TrainState&>(ckpt.state);
    NamedTensors arrays = collect_arrays(st);

    json arr_list = json::array();
    uint64_t offset = 0;
    for (size_t i = 0; i < arrays.names.size(); ++i) {
        const Tensor& t = *arrays.tensors[i];
        json shape = json::array();
        for (size_t d : t.shape()) shape.push_back(d);
        arr_list.push_back(json{{"name", arrays.names[i]},
                                {"shape", shape},
                                {"dtype", "f64"},
                                {"offset", offset}});
        offset += t.numel() * sizeof(double);
    }

    json manifest{{"version", kVersion},
                  {"model", model_config_to_json(st.params.config)},
                  {"schedule", schedule_config_to_json(ckpt.schedule)},
                  {"stages", stage_config_to_json(ckpt.stages)},
                  {"trainer", trainer_config_to_json(ckpt.trainer)},
                  {"counters",
                   json{{"step", st.step},
                        {"tokens", st.tokens},
                        {"stage", st.stage},
                        {"cursor", st.cursor}}},
                  {"rng", st.rng_state},
                  {"arrays", arr_list}};
    const std::string mstr = manifest.dump();

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open checkpoint for writing: " + path);
    f.write(kMagic, kMagicLen);
    const std::string lenline = std::to_string(mstr.size()) + "\n";
    f.write(lenline.data(), static_cast<std::streamsize>(lenline.size()));
    f.write(mstr.data(), static_cast<std::streamsize>(mstr.size()));

    uint64_t hash = 14695981039346656037ULL;
    for (Tensor* t : arrays.tensors) {
        const auto* bytes = reinterpret_cast<const uint8_t*>(t->data());
        const size_t n = t->numel() * sizeof(double);
        f.write(reinterpret_cast<const char*>(bytes), static_cast<std::streamsize>(n));
        hash = fnv1a64(bytes, n, hash);
    }
    f.write(reinterpret_cast<const char*>(&hash), sizeof(hash));
    if (!f) throw std::runtime_error("write failure on checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open checkpoint: " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    const std::string buf = ss.str();

    if (buf.size() < kMagicLen || std::memcmp(buf.data(), kMagic, kMagicLen) != 0)
        throw std::runtime_error("corrupt checkpoint (bad magic): " + path);
    size_t pos = kMagicLen;
    size_t eol = buf.find('\n', pos);
    if (eol == std::string::npos)
        throw std::runtime_error("corrupt checkpoint (missing manifest length): " + path);
    uint64_t mlen = 0;
    for (size_t i = pos; i < eol; ++i) {
        if (buf[i] < '0' || buf[i] > '9')
            throw std::runtime_error("corrupt checkpoint (bad manifest length): " + path);
        mlen = mlen * 10 + static_cast<uint64_t>(buf[i] - '0');
    }
    pos = eol + 1;
    if (pos + mlen > buf.size())
        throw std::runtime_error("truncated checkpoint (manifest): " + path);

    json manifest;
    try {
        manifest = json::parse(buf.substr(pos, mlen));
    } catch (const json::exception& e) {
        throw std::runtime_error("corrupt checkpoint (manifest parse): " +
                                 std::string(e.what()));
    }
    pos += mlen;

    int version = 0;
    try {
        version = manifest.at("version").get<int>();
    } catch (const json::exception& e) {
        throw std::runtime_error("corrupt checkpoint (manifest): " +
                                 std::string(e.what()));
    }
    if (version != kVersion)
        throw std::runtime_error("unsupported checkpoint version " +
                                 std::to_string(version) + " (expected " +
                                 std::to_string(kVersion) + ")");

    Checkpoint ckpt;
    TrainState& st = ckpt.state;
    try {
        const std::string where = "checkpoint manifest";
        ModelConfig model = model_config_from_json(manifest.at("model"), where + ".model");
        ckpt.schedule =
            schedule_config_from_json(manifest.at("schedule"), where + ".schedule");
        ckpt.stages = stage_config_from_json(manifest.at("stages"), where + ".stages");
        ckpt.trainer =
            trainer_config_from_json(manifest.at("trainer"), where + ".trainer");
        st.params = zero_params(model);
        st.m = zero_params(model);
        st.v = zero_params(model);
        const json& counters = manifest.at("counters");
        st.step = counters.at("step").get<uint64_t>();
        st.tokens = counters.at("tokens").get<uint64_t>();
        st.stage = counters.at("stage").get<uint64_t>();
        st.cursor = counters.at("cursor").get<uint64_t>();
        st.rng_state = manifest.at("rng").get<std::string>();
    } catch (const std::invalid_argument& e) {
        throw std::runtime_error("corrupt checkpoint (manifest): " +
                                 std::string(e.what()));
    } catch (const json::exception& e) {
        throw std::runtime_error("corrupt checkpoint (manifest): " +
                                 std::string(e.what()));
    }

    NamedTensors arrays = collect_arrays(st);
    const json& arr_list = manifest.at("arrays");
    if (arr_list.size() != arrays.names.size())
        throw std::runtime_error("corrupt checkpoint (array count mismatch)");

    uint64_t total_bytes = 0;
    for (size_t i = 0; i < arrays.names.size(); ++i) {
        const json& aj = arr_list.at(i);
        if (aj.at("name").get<std::string>() != arrays.names[i])
            throw std::runtime_error("corrupt checkpoint (unexpected array \"" +
                                     aj.at("name").get<std::string>() + "\")");
        if (aj.at("dtype").get<std::string>() != "f64")
            throw std::runtime_error("unsupported checkpoint dtype");
        const auto shape = aj.at("shape").get<std::vector<size_t>>();
        if (shape != arrays.tensors[i]->shape())
            throw std::runtime_error("corrupt checkpoint (shape mismatch for " +
                                     arrays.names[i] + ")");
        if (aj.at("offset").get<uint64_t>() != total_bytes)
            throw std::runtime_error("corrupt checkpoint (bad offset for " +
                                     arrays.names[i] + ")");
        total_bytes += arrays.tensors[i]->numel() * sizeof(double);
    }

    if (buf.size() != pos + total_bytes + sizeof(uint64_t))
        throw std::runtime_error("truncated checkpoint (array section): " + path);

    const auto* arr_bytes = reinterpret_cast<const uint8_t*>(buf.data() + pos);
    const uint64_t hash = fnv1a64(arr_bytes, total_bytes);
    uint64_t stored = 0;
    std::memcpy(&stored, buf.data() + pos + total_bytes, sizeof(stored));
    if (hash != stored)
        throw std::runtime_error("corrupt checkpoint (hash mismatch): " + path);

    size_t off = 0;
    for (Tensor* t : arrays.tensors) {
        std::memcpy(t->data(), arr_bytes + off, t->numel() * sizeof(double));
        off += t->numel() * sizeof(double);
    }
    return ckpt;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

namespace {

void zero_grads(Params& g) {
    for (auto& ref : param_refs(g)) ref.tensor->fill(0.0);
}

// Fisher-Yates with our own engine mapping, so shuffles are identical across
// standard library implementations.
template <typename T>
void shuffle_vec(std::vector<T>& v, Rng& rng) {
    for (size_t i = v.size(); i > 1; --i) {
        size_t j = static_cast<size_t>(rng.integer(i));
        std::swap(v[i - 1], v[j]);
    }
}

// Deterministic document stream for one stage: shards picked by mixture
// weight, per-shard order reshuffled each pass, documents appended until the
// stream covers `token_need` tokens (separator included per document).
PackedWindows build_stage_windows(const std::vector<CorpusShard>& shards,
                                  const Stage& stage, int separator_id,
                                  uint64_t seed, uint64_t stage_index,
                                  uint64_t token_need) {
    Rng rng(seed + 0x9E3779B97F4A7C15ULL * (stage_index + 1));

    std::vector<size_t> shard_ids;
    std::vector<double> weights;
    if (stage.mixture.empty()) {
        for (size_t s = 0; s < shards.size(); ++s) {
            shard_ids.push_back(s);
            weights.push_back(1.0);
        }
    } else {
        for (const auto& [name, w] : stage.mixture) {
            size_t found = shards.size();
            for (size_t s = 0; s < shards.size(); ++s)
                if (shards[s].name == name) { found = s; break; }
            require(found < shards.size(), "unknown corpus shard in mixture: " + name);
            shard_ids.push_back(found);
            weights.push_back(w);
        }
    }
    double wsum = 0.0;
    for (double w : weights) wsum += w;

    std::vector<std::vector<size_t>> order(shard_ids.size());
    std::vector<size_t> cursor(shard_ids.size(), 0);
    for (size_t k = 0; k < shard_ids.size(); ++k) {
        order[k].resize(shards[shard_ids[k]].documents.size());
        for (size_t i = 0; i < order[k].size(); ++i) order[k][i] = i;
        shuffle_vec(order[k], rng);
    }

    std::vector<std::vector<int>> picked;
    uint64_t tokens = 0;
    while (tokens < token_need) {
        size_t k = 0;
        if (shard_ids.size() > 1) {
            double u = rng.uniform() * wsum;
            double acc = 0.0;
            for (; k + 1 < shard_ids.size(); ++k) {
                acc += weights[k];
                if (u < acc) break;
            }
        }
        auto& ord = order[k];
        auto& cur = cursor[k];
        if (cur == ord.size()) {
            shuffle_vec(ord, rng);
            cur = 0;
        }
        const auto& doc = shards[shard_ids[k]].documents[ord[cur++]];
        picked.push_back(doc);
        tokens += doc.size() + 1;
    }
    return pack_tokens(picked, stage.seq_len, separator_id);
}

std::string serialize_engine(uint64_t seed) {
    std::ostringstream ss;
    ss << std::mt19937_64(seed);
    return ss.str();
}

struct MetricsWriter {
    std::ofstream file;
    explicit MetricsWriter(const std::string& path) : file(path, std::ios::trunc) {
        if (!file) throw std::runtime_error("cannot open metrics log: " + path);
    }
    void write(uint64_t t, uint64_t stage, double lr, uint64_t batch, double loss,
               double noise_temp) {
        nlohmann::ordered_json line{{"t", t},       {"stage", stage},
                                    {"lr", lr},     {"batch", batch},
                                    {"loss", loss}, {"noise_temp", noise_temp}};
        file << line.dump() << "\n";
    }
};

TrainResult run_training(Checkpoint ckpt, const std::string& corpus_path,
                         const std::string& out_dir) {
    const ScheduleConfig& schedule = ckpt.schedule;
    const StageConfig& stages = ckpt.stages;
    const TrainerConfig& trainer = ckpt.trainer;
    TrainState& st = ckpt.state;
    const ModelConfig& model_cfg = st.params.config;

    schedule.validate();
    stages.validate(schedule);
    trainer.validate();
    model_cfg.validate();
    require(trainer.separator_id >= 0 &&
                static_cast<size_t>(trainer.separator_id) < model_cfg.vocab_size,
            "separator_id out of vocabulary");

    auto shards = load_corpus(corpus_path);
    fs::create_directories(out_dir);

    TrainResult result;
    result.metrics_path = out_dir + "/metrics.jsonl";
    MetricsWriter metrics(result.metrics_path);

    Params grads = zeros_like(st.params);
    auto prefs = param_refs(st.params);
    auto grefs = param_refs(grads);
    auto mrefs = param_refs(st.m);
    auto vrefs = param_refs(st.v);

    bool have_first_loss = false;
    uint64_t stage_start = 0;
    for (uint64_t s = 0; s < stages.stages.size(); ++s) {
        const Stage& stage = stages.stages[s];
        const uint64_t stage_end = stage_start + stage.token_budget;
        if (s < st.stage || st.tokens >= stage_end) {
            stage_start = stage_end;
            continue;
        }

        const uint64_t slack =
            (schedule.b_max + 1) * stage.seq_len + stage.seq_len + 1;
        PackedWindows windows =
            build_stage_windows(shards, stage, trainer.separator_id, trainer.seed, s,
                                stage.token_budget + slack);

        const std::vector<uint8_t> loss_mask(stage.seq_len, 1);
        while (st.tokens < stage_end) {
            const uint64_t batch = batch_size_at(st.tokens, schedule);
            const double lr = lr_at(st.tokens, schedule);
            require(st.cursor + batch <= windows.size(),
                    "internal: stage window stream exhausted");

            zero_grads(grads);
            double batch_loss = 0.0;
            for (uint64_t b = 0; b < batch; ++b) {
                const auto& inputs = windows.inputs[st.cursor + b];
                const auto& targets = windows.targets[st.cursor + b];
                ForwardTrace trace;
                ForwardOptions opts;
                opts.trace = &trace;
                Tensor logits = model_forward(st.params, inputs, opts);
                LossResult lres =
                    loss_forward(logits, targets, loss_mask, trainer.z_coeff);
                batch_loss += lres.value / static_cast<double>(batch);
                Tensor dlogits({logits.rows(), logits.cols()});
                loss_backward(lres, targets, loss_mask, trainer.z_coeff, dlogits,
                              1.0 / static_cast<double>(batch));
                model_backward(st.params, trace, dlogits, grads);
            }
            if (!std::isfinite(batch_loss))
                throw std::runtime_error(
                    "loss is not finite at step " + std::to_string(st.step + 1) +
                    " (t=" + std::to_string(st.tokens) + "); aborting");

            const uint64_t step_index = st.step + 1;
            for (size_t i = 0; i < prefs.size(); ++i)
                adamw_update(prefs[i].tensor->data(), grefs[i].tensor->data(),
                             mrefs[i].tensor->data(), vrefs[i].tensor->data(),
                             prefs[i].tensor->numel(), step_index, lr, trainer.optim,
                             prefs[i].weight_decay);

            const double noise = noise_temperature(lr, batch);
            metrics.write(st.tokens, s, lr, batch, batch_loss, noise);
            if (!have_first_loss) {
                result.initial_loss = batch_loss;
                have_first_loss = true;
            }
            result.final_loss = batch_loss;
            result.steps_run += 1;

            st.step = step_index;
            st.tokens += batch * stage.seq_len;
            st.cursor += batch;

            if (trainer.checkpoint_every_steps > 0 &&
                st.step % trainer.checkpoint_every_steps == 0 &&
                st.tokens < stage_end) {
                save_checkpoint(ckpt, out_dir + "/checkpoint_step" +
                                          std::to_string(st.step) + ".fmlb");
            }
        }

        st.stage = s + 1;
        st.cursor = 0;
        stage_start = stage_end;
        if (s + 1 < stages.stages.size())
            save_checkpoint(ckpt, out_dir + "/checkpoint_stage" + std::to_string(s) +
                                      ".fmlb");
    }

    result.checkpoint_path = out_dir + "/checkpoint_final.fmlb";
    save_checkpoint(ckpt, result.checkpoint_path);
    result.state = std::move(ckpt.state);
    return result;
}

}  // namespace

TrainResult train(const ModelConfig& model_cfg, const StageConfig& stage_cfg,
                  const ScheduleConfig& schedule_cfg, const TrainerConfig& trainer_cfg,
                  const std::string& corpus_path, const std::string& out_dir) {
    Checkpoint ckpt;
    ckpt.schedule = schedule_cfg;
    ckpt.stages = stage_cfg;
    ckpt.trainer = trainer_cfg;
    ckpt.state.params = init_params(model_cfg, trainer_cfg.seed);
    ckpt.state.m = zero_params(model_cfg);
    ckpt.state.v = zero_params(model_cfg);
    ckpt.state.rng_state = serialize_engine(trainer_cfg.seed);
    return run_training(std::move(ckpt), corpus_path, out_dir);
}

TrainResult resume(const std::string& checkpoint_path, const std::string& corpus_path,
                   const std::string& out_dir) {
    Checkpoint ckpt = load_checkpoint(checkpoint_path);
    return run_training(std::move(ckpt), corpus_path, out_dir);
}

}  // namespace fmlb
