#include "fmlb/config_io.hpp"

#include <fstream>
#include <initializer_list>
#include <stdexcept>

namespace fmlb {

using nlohmann::json;

namespace {

void check_keys(const json& j, const std::string& path,
                std::initializer_list<const char*> allowed) {
    if (!j.is_object())
        throw std::invalid_argument("expected a JSON object at " + path);
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool known = false;
        for (const char* k : allowed)
            if (it.key() == k) { known = true; break; }
        if (!known)
            throw std::invalid_argument("unknown key \"" + it.key() + "\" in " + path);
    }
}

template <typename T>
void read_field(const json& j, const char* key, const std::string& path, T& out) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw std::invalid_argument("bad value for \"" + std::string(key) + "\" in " +
                                 path + ": " + e.what());
    }
}

}  // namespace

ModelConfig model_config_from_json(const json& j, const std::string& path) {
    check_keys(j, path,
               {"preset", "n_layers", "d_model", "expansion", "vocab_size",
                "tied_embedding", "d_conv", "dt_rank", "state_dim", "rmsnorm_eps",
                "stabilization_norms"});
    ModelConfig cfg;
    if (j.contains("preset")) {
        const std::string name = j.at("preset").get<std::string>();
        if (name == "desk") cfg = ModelConfig::desk();
        else if (name == "paper_scale") cfg = ModelConfig::paper_scale();
        else throw std::invalid_argument("unknown model preset \"" + name + "\" in " + path);
    }
    read_field(j, "n_layers", path, cfg.n_layers);
    read_field(j, "d_model", path, cfg.d_model);
    read_field(j, "expansion", path, cfg.expansion);
    read_field(j, "vocab_size", path, cfg.vocab_size);
    read_field(j, "tied_embedding", path, cfg.tied_embedding);
    read_field(j, "d_conv", path, cfg.d_conv);
    read_field(j, "dt_rank", path, cfg.dt_rank);
    read_field(j, "state_dim", path, cfg.state_dim);
    read_field(j, "rmsnorm_eps", path, cfg.rmsnorm_eps);
    read_field(j, "stabilization_norms", path, cfg.stabilization_norms);
    cfg.validate();
    return cfg;
}

json model_config_to_json(const ModelConfig& cfg) {
    return json{{"n_layers", cfg.n_layers},
                {"d_model", cfg.d_model},
                {"expansion", cfg.expansion},
                {"vocab_size", cfg.vocab_size},
                {"tied_embedding", cfg.tied_embedding},
                {"d_conv", cfg.d_conv},
                {"dt_rank", cfg.dt_rank},
                {"state_dim", cfg.state_dim},
                {"rmsnorm_eps", cfg.rmsnorm_eps},
                {"stabilization_norms", cfg.stabilization_norms}};
}

ScheduleConfig schedule_config_from_json(const json& j, const std::string& path) {
    check_keys(j, path,
               {"preset", "eta_max", "eta_min_ratio", "t_warmup", "t_stable_end",
                "t_total", "b_min", "b_max", "t_rampup", "batch_granularity",
                "batch_scaling"});
    ScheduleConfig cfg;
    if (j.contains("preset")) {
        const std::string name = j.at("preset").get<std::string>();
        if (name == "paper_scale") cfg = ScheduleConfig::paper_scale();
        else throw std::invalid_argument("unknown schedule preset \"" + name + "\" in " + path);
    }
    read_field(j, "eta_max", path, cfg.eta_max);
    read_field(j, "eta_min_ratio", path, cfg.eta_min_ratio);
    read_field(j, "t_warmup", path, cfg.t_warmup);
    read_field(j, "t_stable_end", path, cfg.t_stable_end);
    read_field(j, "t_total", path, cfg.t_total);
    read_field(j, "b_min", path, cfg.b_min);
    read_field(j, "b_max", path, cfg.b_max);
    read_field(j, "t_rampup", path, cfg.t_rampup);
    read_field(j, "batch_granularity", path, cfg.batch_granularity);
    read_field(j, "batch_scaling", path, cfg.batch_scaling);
    cfg.validate();
    return cfg;
}

json schedule_config_to_json(const ScheduleConfig& cfg) {
    return json{{"eta_max", cfg.eta_max},
                {"eta_min_ratio", cfg.eta_min_ratio},
                {"t_warmup", cfg.t_warmup},
                {"t_stable_end", cfg.t_stable_end},
                {"t_total", cfg.t_total},
                {"b_min", cfg.b_min},
                {"b_max", cfg.b_max},
                {"t_rampup", cfg.t_rampup},
                {"batch_granularity", cfg.batch_granularity},
                {"batch_scaling", cfg.batch_scaling}};
}

StageConfig stage_config_from_json(const json& j, const std::string& path) {
    if (!j.is_array())
        throw std::invalid_argument("expected a JSON array at " + path);
    StageConfig cfg;
    for (size_t i = 0; i < j.size(); ++i) {
        const std::string spath = path + "[" + std::to_string(i) + "]";
        const json& sj = j.at(i);
        check_keys(sj, spath, {"token_budget", "seq_len", "mixture", "decay"});
        Stage st;
        read_field(sj, "token_budget", spath, st.token_budget);
        read_field(sj, "seq_len", spath, st.seq_len);
        read_field(sj, "decay", spath, st.decay);
        if (sj.contains("mixture")) {
            const json& mj = sj.at("mixture");
            if (!mj.is_object())
                throw std::invalid_argument("expected object for \"mixture\" in " + spath);
            for (auto it = mj.begin(); it != mj.end(); ++it)
                st.mixture.emplace_back(it.key(), it.value().get<double>());
        }
        cfg.stages.push_back(std::move(st));
    }
    return cfg;
}

json stage_config_to_json(const StageConfig& cfg) {
    json arr = json::array();
    for (const Stage& st : cfg.stages) {
        json sj{{"token_budget", st.token_budget},
                {"seq_len", st.seq_len},
                {"decay", st.decay}};
        if (!st.mixture.empty()) {
            json mj = json::object();
            for (const auto& [name, w] : st.mixture) mj[name] = w;
            sj["mixture"] = mj;
        }
        arr.push_back(std::move(sj));
    }
    return arr;
}

TrainerConfig trainer_config_from_json(const json& j, const std::string& path) {
    check_keys(j, path,
               {"z_coeff", "separator_id", "checkpoint_every_steps", "seed", "beta1",
                "beta2", "eps", "weight_decay"});
    TrainerConfig cfg;
    read_field(j, "z_coeff", path, cfg.z_coeff);
    read_field(j, "separator_id", path, cfg.separator_id);
    read_field(j, "checkpoint_every_steps", path, cfg.checkpoint_every_steps);
    read_field(j, "seed", path, cfg.seed);
    read_field(j, "beta1", path, cfg.optim.beta1);
    read_field(j, "beta2", path, cfg.optim.beta2);
    read_field(j, "eps", path, cfg.optim.eps);
    read_field(j, "weight_decay", path, cfg.optim.weight_decay);
    cfg.validate();
    return cfg;
}

json trainer_config_to_json(const TrainerConfig& cfg) {
    return json{{"z_coeff", cfg.z_coeff},
                {"separator_id", cfg.separator_id},
                {"checkpoint_every_steps", cfg.checkpoint_every_steps},
                {"seed", cfg.seed},
                {"beta1", cfg.optim.beta1},
                {"beta2", cfg.optim.beta2},
                {"eps", cfg.optim.eps},
                {"weight_decay", cfg.optim.weight_decay}};
}

RunConfig parse_run_config(const json& j) {
    // "inference" and "bench" are reserved section names; those runs are
    // configured by CLI flags, but a config carrying the sections stays valid.
    check_keys(j, "$", {"model", "schedule", "stages", "trainer", "inference", "bench"});
    for (const char* reserved : {"inference", "bench"})
        if (j.contains(reserved) && !j.at(reserved).is_object())
            throw std::invalid_argument(std::string("expected a JSON object at $.") +
                                        reserved);
    RunConfig rc;
    if (j.contains("model")) {
        rc.model = model_config_from_json(j.at("model"), "$.model");
        rc.has_model = true;
    }
    if (j.contains("schedule")) {
        rc.schedule = schedule_config_from_json(j.at("schedule"), "$.schedule");
        rc.has_schedule = true;
    }
    if (j.contains("stages")) {
        rc.stages = stage_config_from_json(j.at("stages"), "$.stages");
        rc.has_stages = true;
    }
    if (j.contains("trainer")) {
        rc.trainer = trainer_config_from_json(j.at("trainer"), "$.trainer");
        rc.has_trainer = true;
    }
    return rc;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::invalid_argument("cannot open config file: " + path);
    json j;
    try {
        f >> j;
    } catch (const json::exception& e) {
        throw std::invalid_argument("malformed JSON in " + path + ": " + e.what());
    }
    return parse_run_config(j);
}

}  // namespace fmlb
