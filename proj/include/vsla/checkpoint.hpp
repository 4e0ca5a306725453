#pragma once

#include "vsla/params.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>

namespace vsla {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Everything needed to resume or evaluate a run. Randomness is a pure function
/// of (seed, epoch, batch, slot), so the run position in `meta` is the RNG state.
struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  ParamStore params;
  std::map<std::string, Matrix> optimizer;  // Adam moments

  bool operator==(const Checkpoint& o) const;
};

/// Layout: "VSLACKPT" | u32 version | u64 header length | JSON header |
/// float64 payload | u64 FNV-1a of everything before it. Little-endian.
std::string serialize_checkpoint(const Checkpoint& ckpt);

/// Throws CheckpointError on bad magic, version mismatch, truncation or a
/// checksum mismatch; nothing is returned unless the whole file verifies.
Checkpoint parse_checkpoint(std::string_view bytes);

/// Writes to a temporary sibling and renames it into place.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Short hex digest identifying the parameter values of a checkpoint.
std::string checkpoint_id(const Checkpoint& ckpt);

}  // namespace vsla
