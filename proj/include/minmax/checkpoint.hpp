#pragma once
#include <json.hpp>
#include <map>
#include <string>

#include "minmax/network.hpp"

namespace mm {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointExtra {
    std::map<std::string, MatrixXd> arrays;
    nlohmann::json meta = nlohmann::json::object();
};

// Layout: 8-byte magic, u32 version, u64 header length, JSON header, then
// every array as little-endian doubles in header order.
void save_checkpoint(const std::string& path, const CascadeWeights& w, const CheckpointExtra& extra = {});
CascadeWeights load_checkpoint(const std::string& path, CheckpointExtra* extra = nullptr);

nlohmann::json dims_to_json(const Dims& d);
Dims dims_from_json(const nlohmann::json& j);

}  // namespace mm
