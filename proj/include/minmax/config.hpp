#pragma once
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "minmax/training.hpp"

namespace mm {

struct EvalConfig {
    std::vector<std::size_t> lengths;
    std::size_t samples = 100;
    std::uint64_t seed = 1;
};

// Sections: model, task, train, eval. Every key is checked; unknown ones throw ConfigError.
struct RunConfig {
    TrainConfig train;
    EvalConfig eval;
};

RunConfig parse_config(const nlohmann::json& j);
RunConfig load_config(const std::string& path);
nlohmann::json config_to_json(const RunConfig& c);

}  // namespace mm
