#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "fmlb/bench.hpp"
#include "fmlb/inference.hpp"
#include "fmlb/model.hpp"
#include "support/checks.hpp"

using namespace fmlb;
using testsup::TempDir;
using testsup::contains;
using testsup::slurp;
using testsup::thrown_message;

namespace {

BenchRecord rec(const std::string& phase, uint64_t position, uint64_t bytes) {
    BenchRecord r;
    r.model = "attention";
    r.phase = phase;
    r.position = position;
    r.state_bytes = bytes;
    return r;
}

}  // namespace

TEST_CASE("kv cache bytes follow the closed form exactly") {
    AttentionBaselineConfig cfg;
    AttentionParams params = init_attention(cfg, 3);

    KvCache cache = KvCache::fresh(cfg);
    CHECK(cache.kv_bytes() == 0);
    CHECK(KvCache::kv_bytes_for(cfg, 0) == 0);

    // Per token: one key row and one value row of d_model doubles per layer.
    const size_t per_token = 2 * cfg.n_layers * cfg.d_model * sizeof(double);
    CHECK(KvCache::kv_bytes_for(cfg, 1) == per_token);
    CHECK(KvCache::kv_bytes_for(cfg, 34) == 2 * KvCache::kv_bytes_for(cfg, 17));

    std::vector<int> prompt = {5, 7, 3, 9, 1, 250, 0};
    attention_forward(params, prompt, &cache);
    CHECK(cache.tokens == prompt.size());
    CHECK(cache.kv_bytes() == KvCache::kv_bytes_for(cfg, prompt.size()));

    for (int t = 0; t < 10; ++t) attention_decode_step(params, cache, t);
    CHECK(cache.kv_bytes() == KvCache::kv_bytes_for(cfg, prompt.size() + 10));
}

TEST_CASE("attention decode against the cache matches the parallel forward") {
    AttentionBaselineConfig cfg;
    AttentionParams params = init_attention(cfg, 11);
    std::vector<int> tokens = {5, 7, 3, 9, 1, 250, 42, 42, 0, 128};

    Tensor parallel = attention_forward(params, tokens, nullptr);
    REQUIRE(parallel.rows() == tokens.size());

    KvCache cache = KvCache::fresh(cfg);
    double worst = 0.0;
    for (size_t i = 0; i < tokens.size(); ++i) {
        Tensor logits = attention_decode_step(params, cache, tokens[i]);
        REQUIRE(logits.rows() == 1);
        for (size_t j = 0; j < logits.cols(); ++j)
            worst = std::max(worst, std::fabs(logits[j] - parallel.at(i, j)));
    }
    CHECK(worst <= 1e-8);

    CHECK_THROWS_AS(attention_forward(params, {}, nullptr), std::invalid_argument);
}

TEST_CASE("memory fit handles constant and exactly linear series") {
    std::vector<BenchRecord> constant = {rec("decode", 1, 777), rec("decode", 2, 777),
                                         rec("decode", 3, 777)};
    MemoryFit flat = fit_memory_slope(constant);
    CHECK(flat.slope == 0.0);
    CHECK(flat.intercept == 777.0);
    CHECK(flat.r_squared == 1.0);

    std::vector<BenchRecord> linear;
    for (uint64_t x : {1, 65, 129, 513, 1001})
        linear.push_back(rec("decode", x, 100 + 64 * x));
    MemoryFit fit = fit_memory_slope(linear);
    CHECK(fit.slope == doctest::Approx(64.0).epsilon(1e-9));
    CHECK(fit.intercept == doctest::Approx(100.0).epsilon(1e-6));
    CHECK(fit.r_squared >= 1.0 - 1e-12);
}

TEST_CASE("memory fit rejects degenerate inputs") {
    std::vector<BenchRecord> two = {rec("decode", 1, 10), rec("decode", 2, 20)};
    CHECK(contains(thrown_message([&] { fit_memory_slope(two); }),
                   "at least 3 records"));

    std::vector<BenchRecord> same = {rec("decode", 5, 10), rec("decode", 5, 20),
                                     rec("decode", 5, 30)};
    CHECK(contains(thrown_message([&] { fit_memory_slope(same); }),
                   "degenerate fit"));
}

TEST_CASE("csv report is byte-exact") {
    TempDir dir("benchcsv");
    const std::string path = (dir.path / "report.csv").string();

    emit_report({}, path, "csv");
    CHECK(slurp(path) ==
          "model,phase,position,sec_per_token,state_bytes,peak_transient_bytes\n");

    BenchRecord r;
    r.model = "mamba";
    r.phase = "decode";
    r.position = 11;
    r.sec_per_token = 0.5;
    r.state_bytes = 100;
    r.peak_transient_bytes = 200;
    emit_report({r}, path, "csv");
    CHECK(slurp(path) ==
          "model,phase,position,sec_per_token,state_bytes,peak_transient_bytes\n"
          "mamba,decode,11,0.5,100,200\n");

    CHECK_THROWS_AS(emit_report({}, path, "yaml"), std::invalid_argument);
}

TEST_CASE("json report round-trips records exactly") {
    TempDir dir("benchjson");
    const std::string path = (dir.path / "report.json").string();

    std::vector<BenchRecord> records;
    BenchRecord a;
    a.model = "mamba";
    a.phase = "prefill";
    a.position = 1;
    a.sec_per_token = 1.25e-7;
    a.state_bytes = 4096;
    a.peak_transient_bytes = 65536;
    BenchRecord b;
    b.model = "attention";
    b.phase = "decode";
    b.position = 2001;
    b.sec_per_token = 0.0030517578125;
    b.state_bytes = 2048000;
    b.peak_transient_bytes = 9999;
    records = {a, b};

    emit_report(records, path, "json");
    auto back = parse_report_json(path);
    REQUIRE(back.size() == 2);
    for (size_t i = 0; i < 2; ++i) {
        CHECK(back[i].model == records[i].model);
        CHECK(back[i].phase == records[i].phase);
        CHECK(back[i].position == records[i].position);
        CHECK(back[i].sec_per_token == records[i].sec_per_token);
        CHECK(back[i].state_bytes == records[i].state_bytes);
        CHECK(back[i].peak_transient_bytes == records[i].peak_transient_bytes);
    }
}

TEST_CASE("bench config validation") {
    BenchConfig cfg;
    cfg.model = "transformer";
    CHECK(contains(thrown_message([&] { cfg.validate(); }), "unknown model tag"));

    cfg = BenchConfig{};
    cfg.record_every = 0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);

    cfg = BenchConfig{};
    cfg.n_tokens = 10;
    cfg.record_every = 100;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);

    cfg = BenchConfig{};
    cfg.repetitions = 0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("recurrent generation bench reports constant state bytes") {
    BenchConfig cfg;
    cfg.model = "mamba";
    cfg.n_tokens = 96;
    cfg.record_every = 32;
    cfg.repetitions = 2;
    cfg.seed = 4;

    auto records = run_generation_bench(cfg);
    REQUIRE(records.size() == 4);
    CHECK(records[0].phase == "prefill");
    CHECK(records[0].position == 1);
    for (size_t i = 1; i < records.size(); ++i) {
        CHECK(records[i].phase == "decode");
        CHECK(records[i].position == 1 + 32 * i);
        CHECK(records[i].position > records[i - 1].position);
    }

    const uint64_t expect = DecodeState::state_bytes_for(ModelConfig::desk(), 1);
    for (const auto& r : records) {
        CHECK(r.model == "mamba");
        CHECK(r.state_bytes == expect);
        CHECK(r.sec_per_token > 0.0);
        CHECK(std::isfinite(r.sec_per_token));
    }
    CHECK(records[1].peak_transient_bytes > 0);

    MemoryFit fit = fit_memory_slope(records);
    CHECK(fit.slope == 0.0);
    CHECK(fit.r_squared == 1.0);
}

TEST_CASE("attention generation bench reports linear cache growth") {
    BenchConfig cfg;
    cfg.model = "attention";
    cfg.n_tokens = 96;
    cfg.record_every = 32;
    cfg.repetitions = 1;
    cfg.seed = 4;

    auto records = run_generation_bench(cfg);
    REQUIRE(records.size() == 4);

    AttentionBaselineConfig acfg;
    for (const auto& r : records) {
        CHECK(r.model == "attention");
        CHECK(r.state_bytes == KvCache::kv_bytes_for(acfg, r.position));
    }

    MemoryFit fit = fit_memory_slope(records);
    const double per_token = static_cast<double>(KvCache::kv_bytes_for(acfg, 1));
    CHECK(fit.slope == doctest::Approx(per_token).epsilon(1e-9));
    CHECK(std::fabs(fit.intercept) <= 1e-6 * per_token * 100);
    CHECK(fit.r_squared >= 1.0 - 1e-12);
}

TEST_CASE("a tail shorter than the record window is dropped") {
    BenchConfig cfg;
    cfg.model = "mamba";
    cfg.n_tokens = 100;
    cfg.record_every = 32;
    cfg.repetitions = 1;
    cfg.seed = 9;

    auto records = run_generation_bench(cfg);
    REQUIRE(records.size() == 4);  // prefill + three full windows; 4-token tail dropped
    CHECK(records.back().position == 97);
}
