#pragma once

#include <cstdint>
#include <string>
#include <utility>

#include <nlohmann/json.hpp>

#include "otfuse/model.hpp"

namespace otfuse::model {

// Layout: "OTFZ" | u32 version | u64 header length | JSON header | payload.
// Integers and floats are little-endian. Tensor offsets in the header are
// byte offsets into the payload.
inline constexpr char kCheckpointMagic[4] = {'O', 'T', 'F', 'Z'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

nlohmann::json arch_to_json(const ArchConfig &arch);
ArchConfig arch_from_json(const nlohmann::json &j);

std::string encode_checkpoint(const TransformerParams &params,
                              const ArchConfig &arch);
std::pair<TransformerParams, ArchConfig>
decode_checkpoint(const std::string &bytes);

void save_checkpoint(const TransformerParams &params, const ArchConfig &arch,
                     const std::string &path);
std::pair<TransformerParams, ArchConfig>
load_checkpoint(const std::string &path);

} // namespace otfuse::model
