#pragma once

#include <string>

#include <json.hpp>

#include "fmlb/model.hpp"
#include "fmlb/schedule.hpp"
#include "fmlb/trainer.hpp"

namespace fmlb {

// Strict parsers: unknown keys are rejected with an error naming the key and
// its JSON path. Omitted keys keep their defaults; a "preset" key loads a
// named preset before field overrides are applied.
ModelConfig model_config_from_json(const nlohmann::json& j, const std::string& path);
ScheduleConfig schedule_config_from_json(const nlohmann::json& j,
                                         const std::string& path);
StageConfig stage_config_from_json(const nlohmann::json& j, const std::string& path);
TrainerConfig trainer_config_from_json(const nlohmann::json& j,
                                       const std::string& path);

nlohmann::json model_config_to_json(const ModelConfig& cfg);
nlohmann::json schedule_config_to_json(const ScheduleConfig& cfg);
nlohmann::json stage_config_to_json(const StageConfig& cfg);
nlohmann::json trainer_config_to_json(const TrainerConfig& cfg);

// Top-level run configuration: sections model, schedule, stages, trainer.
// Sections are optional in the file; each subcommand checks for the ones it
// needs.
struct RunConfig {
    ModelConfig model;
    ScheduleConfig schedule;
    StageConfig stages;
    TrainerConfig trainer;
    bool has_model = false;
    bool has_schedule = false;
    bool has_stages = false;
    bool has_trainer = false;
};

RunConfig parse_run_config(const nlohmann::json& j);
RunConfig load_run_config(const std::string& path);

}  // namespace fmlb
