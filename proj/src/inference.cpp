#include "fmlb/inference.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "fmlb/rng.hpp"

namespace fmlb {

PaddedBatch PaddedBatch::build(const std::vector<std::vector<int>>& prompts,
                               int pad_id) {
    require(!prompts.empty(), "empty prompt list");
    PaddedBatch pb;
    pb.batch = prompts.size();
    pb.t_max = 0;
    for (const auto& p : prompts) pb.t_max = std::max(pb.t_max, p.size());
    require(pb.t_max >= 1, "all prompts are empty");

    pb.tokens.assign(pb.batch, std::vector<int>(pb.t_max, pad_id));
    pb.mask.assign(pb.batch, std::vector<uint8_t>(pb.t_max, 0));
    for (size_t r = 0; r < pb.batch; ++r) {
        const auto& p = prompts[r];
        const size_t off = pb.t_max - p.size();
        for (size_t i = 0; i < p.size(); ++i) {
            pb.tokens[r][off + i] = p[i];
            pb.mask[r][off + i] = 1;
        }
    }
    pb.validate();
    return pb;
}

void PaddedBatch::validate() const {
    require(batch >= 1 && t_max >= 1, "empty batch");
    require(tokens.size() == batch && mask.size() == batch, "batch size mismatch");
    for (size_t r = 0; r < batch; ++r) {
        require(tokens[r].size() == t_max && mask[r].size() == t_max,
                "row width mismatch");
        // Real tokens must form a contiguous suffix.
        bool seen_real = false;
        for (size_t t = 0; t < t_max; ++t) {
            if (mask[r][t]) seen_real = true;
            else require(!seen_real, "padding after a real token (not left padding)");
        }
    }
}

size_t PaddedBatch::real_count(size_t row) const {
    size_t n = 0;
    for (uint8_t m : mask[row]) n += m;
    return n;
}

DecodeState DecodeState::fresh(const ModelConfig& cfg, size_t batch) {
    require(batch >= 1, "batch must be >= 1");
    DecodeState st;
    st.config = cfg;
    st.batch = batch;
    st.rows.reserve(batch);
    for (size_t r = 0; r < batch; ++r) st.rows.push_back(make_cache(cfg));
    st.alive.assign(batch, 1);
    st.position.assign(batch, 0);
    return st;
}

size_t DecodeState::state_bytes() const {
    size_t n = 0;
    for (const auto& row : rows)
        for (const auto& layer : row.layers)
            n += (layer.conv.numel() + layer.h.numel()) * sizeof(double);
    return n;
}

size_t DecodeState::state_bytes_for(const ModelConfig& cfg, size_t batch) {
    const size_t per_layer = cfg.d_inner() * (cfg.d_conv - 1) + cfg.d_inner() * cfg.state_dim;
    return batch * cfg.n_layers * per_layer * sizeof(double);
}

namespace {

PrefillResult prefill_impl(const Params& params, const PaddedBatch& prompts,
                           size_t chunk_size) {
    prompts.validate();
    const ModelConfig& cfg = params.config;
    PrefillResult out;
    out.state = DecodeState::fresh(cfg, prompts.batch);
    out.last_logits = Tensor({prompts.batch, cfg.vocab_size});

    for (size_t r = 0; r < prompts.batch; ++r) {
        if (prompts.real_count(r) == 0) {
            out.state.alive[r] = 0;  // nothing to consume; state stays zero
            continue;
        }
        const std::vector<int>& row_tokens = prompts.tokens[r];
        const std::vector<uint8_t>& row_mask = prompts.mask[r];

        for (size_t pos = 0; pos < prompts.t_max; pos += chunk_size) {
            const size_t len = std::min(chunk_size, prompts.t_max - pos);
            std::vector<int> chunk(row_tokens.begin() + pos,
                                   row_tokens.begin() + pos + len);
            std::vector<uint8_t> chunk_mask(row_mask.begin() + pos,
                                            row_mask.begin() + pos + len);
            const bool last = pos + len == prompts.t_max;

            ForwardOptions opts;
            opts.cache = &out.state.rows[r];
            opts.real_mask = &chunk_mask;
            opts.logits = last ? LogitsMode::LastOnly : LogitsMode::None;
            Tensor logits = model_forward(params, chunk, opts);
            if (last)
                std::memcpy(out.last_logits.row(r), logits.row(0),
                            cfg.vocab_size * sizeof(double));
        }
        out.state.position[r] = prompts.real_count(r);
    }
    return out;
}

}  // namespace

PrefillResult prefill_parallel(const Params& params, const PaddedBatch& prompts) {
    return prefill_impl(params, prompts, prompts.t_max);
}

PrefillResult prefill_sequential(const Params& params, const PaddedBatch& prompts,
                                 size_t chunk_size) {
    require(chunk_size >= 1, "chunk_size must be >= 1");
    return prefill_impl(params, prompts, chunk_size);
}

Tensor decode_step(const Params& params, DecodeState& state,
                   const std::vector<int>& tokens) {
    require(tokens.size() == state.batch, "token batch width mismatch with state");
    const ModelConfig& cfg = state.config;
    Tensor logits({state.batch, cfg.vocab_size});
    for (size_t r = 0; r < state.batch; ++r) {
        if (!state.alive[r]) continue;
        ForwardOptions opts;
        opts.cache = &state.rows[r];
        opts.logits = LogitsMode::LastOnly;
        Tensor row_logits = model_forward(params, {tokens[r]}, opts);
        std::memcpy(logits.row(r), row_logits.row(0), cfg.vocab_size * sizeof(double));
        state.position[r] += 1;
    }
    return logits;
}

namespace {

int argmax_row(const Tensor& logits, size_t row) {
    const double* p = logits.row(row);
    size_t best = 0;
    for (size_t v = 1; v < logits.cols(); ++v)
        if (p[v] > p[best]) best = v;
    return static_cast<int>(best);
}

int sample_row(const Tensor& logits, size_t row, double temperature, Rng& rng) {
    const double* p = logits.row(row);
    const size_t V = logits.cols();
    double mx = p[0];
    for (size_t v = 1; v < V; ++v) mx = std::max(mx, p[v]);
    std::vector<double> probs(V);
    double sum = 0.0;
    for (size_t v = 0; v < V; ++v) {
        probs[v] = std::exp((p[v] - mx) / temperature);
        sum += probs[v];
    }
    double u = rng.uniform() * sum;
    double acc = 0.0;
    for (size_t v = 0; v < V; ++v) {
        acc += probs[v];
        if (u < acc) return static_cast<int>(v);
    }
    return static_cast<int>(V - 1);
}

}  // namespace

std::vector<std::vector<int>> generate(const Params& params,
                                       const std::vector<std::vector<int>>& prompts,
                                       const GenerateOptions& opts) {
    require(opts.max_new_tokens >= 1, "max_new_tokens must be >= 1");
    if (!opts.sampling.greedy)
        require(opts.sampling.temperature > 0.0, "temperature must be positive");
    const ModelConfig& cfg = params.config;
    for (const auto& p : prompts)
        for (int id : p)
            require(id >= 0 && static_cast<size_t>(id) < cfg.vocab_size,
                    "prompt token out of vocabulary");

    PaddedBatch pb = PaddedBatch::build(prompts, opts.pad_id);
    PrefillResult pf = opts.sequential_prefill
                           ? prefill_sequential(params, pb, opts.chunk_size)
                           : prefill_parallel(params, pb);
    DecodeState& state = pf.state;

    Rng rng(opts.sampling.seed);
    auto pick = [&](const Tensor& logits, size_t row) {
        return opts.sampling.greedy
                   ? argmax_row(logits, row)
                   : sample_row(logits, row, opts.sampling.temperature, rng);
    };
    auto is_stop = [&](int id) {
        return std::find(opts.stop_ids.begin(), opts.stop_ids.end(), id) !=
               opts.stop_ids.end();
    };

    std::vector<std::vector<int>> out(pb.batch);
    std::vector<int> cur(pb.batch, opts.pad_id);
    Tensor logits = pf.last_logits;

    for (size_t step = 0; step < opts.max_new_tokens; ++step) {
        bool any_alive = false;
        for (size_t r = 0; r < pb.batch; ++r) {
            if (!state.alive[r]) continue;
            int id = pick(logits, r);
            out[r].push_back(id);
            cur[r] = id;
            if (is_stop(id)) state.alive[r] = 0;
            else any_alive = true;
        }
        if (!any_alive || step + 1 == opts.max_new_tokens) break;
        logits = decode_step(params, state, cur);
    }
    return out;
}

}  // namespace fmlb
