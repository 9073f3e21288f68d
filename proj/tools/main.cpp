#include <cstdio>
#include <exception>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fmlb/bench.hpp"
#include "fmlb/config_io.hpp"
#include "fmlb/inference.hpp"
#include "fmlb/trainer.hpp"

namespace {

struct TrainArgs {
    std::string config, corpus, out, resume_from;
    uint64_t seed = 0;
    bool seed_given = false;
};

struct GenerateArgs {
    std::string checkpoint, prompts, prefill = "parallel";
    uint64_t max_new = 16;
    double temperature = 0.0;
    bool temperature_given = false;
    uint64_t chunk = 64;
    uint64_t seed = 0;
    std::vector<int> stop_ids;
};

struct BenchArgs {
    std::string model = "mamba", out, format = "csv";
    uint64_t tokens = 10000;
    uint64_t record_every = 1000;
    uint64_t reps = 3;
    uint64_t seed = 0;
};

struct ScheduleArgs {
    std::string config, out;
    uint64_t points = 100;
};

int run_train(const TrainArgs& args) {
    if (!args.resume_from.empty()) {
        fmlb::TrainResult res = fmlb::resume(args.resume_from, args.corpus, args.out);
        std::cerr << "resumed: " << res.steps_run << " steps, final loss "
                  << res.final_loss << ", checkpoint " << res.checkpoint_path << "\n";
        return 0;
    }
    if (args.config.empty())
        throw std::invalid_argument("train requires --config (or --resume)");
    fmlb::RunConfig rc = fmlb::load_run_config(args.config);
    if (!rc.has_model || !rc.has_schedule || !rc.has_stages || !rc.has_trainer)
        throw std::invalid_argument(
            "train config needs model, schedule, stages and trainer sections");
    if (args.seed_given) rc.trainer.seed = args.seed;
    fmlb::TrainResult res = fmlb::train(rc.model, rc.stages, rc.schedule, rc.trainer,
                                        args.corpus, args.out);
    std::cerr << "trained: " << res.steps_run << " steps, loss " << res.initial_loss
              << " -> " << res.final_loss << ", checkpoint " << res.checkpoint_path
              << "\n";
    return 0;
}

int run_generate(const GenerateArgs& args) {
    fmlb::Checkpoint ckpt = fmlb::load_checkpoint(args.checkpoint);

    std::ifstream pf(args.prompts);
    if (!pf)
        throw std::invalid_argument("cannot open prompts file: " + args.prompts);
    std::vector<std::vector<int>> prompts;
    std::string line;
    while (std::getline(pf, line)) prompts.push_back(fmlb::tokenize_bytes(line));

    fmlb::GenerateOptions gopts;
    gopts.max_new_tokens = args.max_new;
    gopts.sampling.greedy = !args.temperature_given;
    gopts.sampling.temperature = args.temperature;
    gopts.sampling.seed = args.seed;
    gopts.stop_ids = args.stop_ids;
    gopts.sequential_prefill = args.prefill == "sequential";
    gopts.chunk_size = args.chunk;

    auto outputs = fmlb::generate(ckpt.state.params, prompts, gopts);
    const size_t vocab = ckpt.state.params.config.vocab_size;
    for (const auto& ids : outputs) std::cout << fmlb::detokenize(ids, vocab) << "\n";
    return 0;
}

int run_bench(const BenchArgs& args) {
    fmlb::BenchConfig bc;
    bc.model = args.model;
    bc.n_tokens = args.tokens;
    bc.record_every = args.record_every;
    bc.repetitions = args.reps;
    bc.seed = args.seed;
    auto records = fmlb::run_generation_bench(bc);
    fmlb::emit_report(records, args.out, args.format);
    std::cerr << "bench: " << records.size() << " records -> " << args.out << "\n";
    return 0;
}

int run_schedule(const ScheduleArgs& args) {
    fmlb::RunConfig rc = fmlb::load_run_config(args.config);
    if (!rc.has_schedule)
        throw std::invalid_argument("schedule config needs a schedule section");
    if (args.points < 1) throw std::invalid_argument("--points must be >= 1");
    const fmlb::ScheduleConfig& cfg = rc.schedule;

    std::ofstream f(args.out, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open output file: " + args.out);
    f << "t,lr,batch,noise_temp\n";
    char num[64];
    for (uint64_t k = 0; k <= args.points; ++k) {
        const uint64_t t =
            k == args.points
                ? cfg.t_total
                : static_cast<uint64_t>(static_cast<double>(cfg.t_total) *
                                        static_cast<double>(k) /
                                        static_cast<double>(args.points));
        fmlb::ScheduleState st = fmlb::schedule_at(t, cfg);
        f << st.t << ',';
        std::snprintf(num, sizeof(num), "%.17g", st.lr);
        f << num << ',' << st.batch << ',';
        std::snprintf(num, sizeof(num), "%.17g", st.noise_temp);
        f << num << "\n";
    }
    if (!f) throw std::runtime_error("write failure on " + args.out);
    std::cerr << "schedule trace: " << (args.points + 1) << " rows -> " << args.out
              << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Selective state space language model: training, generation, "
                 "benchmarking and schedule inspection"};
    app.require_subcommand(1);

    TrainArgs targs;
    CLI::App* train_cmd = app.add_subcommand("train", "Train a model on a text corpus");
    train_cmd->add_option("--config", targs.config, "Run config JSON file");
    train_cmd->add_option("--corpus", targs.corpus, "Corpus text file or directory")
        ->required();
    train_cmd->add_option("--out", targs.out, "Output directory")->required();
    train_cmd->add_option("--seed", targs.seed, "Override trainer seed")
        ->each([&](const std::string&) { targs.seed_given = true; });
    train_cmd->add_option("--resume", targs.resume_from,
                          "Resume from a checkpoint instead of starting fresh");

    GenerateArgs gargs;
    CLI::App* gen_cmd =
        app.add_subcommand("generate", "Generate continuations for prompts");
    gen_cmd->add_option("--checkpoint", gargs.checkpoint, "Checkpoint file")->required();
    gen_cmd->add_option("--prompts", gargs.prompts, "UTF-8 file, one prompt per line")
        ->required();
    gen_cmd->add_option("--max-new", gargs.max_new, "Max new tokens per prompt")
        ->required();
    gen_cmd->add_option("--temperature", gargs.temperature,
                        "Sampling temperature (omit for greedy)")
        ->each([&](const std::string&) { gargs.temperature_given = true; });
    gen_cmd->add_option("--prefill", gargs.prefill, "Prefill mode")
        ->check(CLI::IsMember({"parallel", "sequential"}));
    gen_cmd->add_option("--chunk", gargs.chunk, "Chunk size for sequential prefill");
    gen_cmd->add_option("--seed", gargs.seed, "Sampling seed");
    gen_cmd->add_option("--stop-id", gargs.stop_ids, "Stop token id (repeatable)");

    BenchArgs bargs;
    CLI::App* bench_cmd = app.add_subcommand("bench", "Generation benchmark report");
    bench_cmd->add_option("--model", bargs.model, "Model tag")
        ->check(CLI::IsMember({"mamba", "attention"}))
        ->required();
    bench_cmd->add_option("--tokens", bargs.tokens, "Tokens to generate")->required();
    bench_cmd->add_option("--record-every", bargs.record_every,
                          "Tokens per measurement window")
        ->required();
    bench_cmd->add_option("--out", bargs.out, "Report output file")->required();
    bench_cmd->add_option("--format", bargs.format, "Report format")
        ->check(CLI::IsMember({"csv", "json"}));
    bench_cmd->add_option("--reps", bargs.reps, "Timing repetitions");
    bench_cmd->add_option("--seed", bargs.seed, "Model init seed");

    ScheduleArgs sargs;
    CLI::App* sched_cmd =
        app.add_subcommand("schedule", "Emit a learning-rate schedule trace");
    sched_cmd->add_option("--config", sargs.config, "Run config JSON file")->required();
    sched_cmd->add_option("--out", sargs.out, "Trace CSV output file")->required();
    sched_cmd->add_option("--points", sargs.points, "Samples across [0, t_total]");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);  // exits 0 with help text
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        if (train_cmd->parsed()) return run_train(targs);
        if (gen_cmd->parsed()) return run_generate(gargs);
        if (bench_cmd->parsed()) return run_bench(bargs);
        if (sched_cmd->parsed()) return run_schedule(sargs);
        std::cerr << "no subcommand given\n";
        return 1;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
