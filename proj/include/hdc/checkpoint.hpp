#pragma once
// "HDCK" checkpoint: little-endian, CRC32 per record.
//
//   "HDCK" | u32 version | u64 config bytes | config text | u32 config crc
//   u32 tensor count, then per tensor:
//   u32 name bytes | name | u32 rank | i64 dims[rank] | f32 data[numel] | u32 crc(name..data)

#include <stdexcept>
#include <string>

#include "hdc/config.hpp"
#include "hdc/params.hpp"

namespace hdc {

inline constexpr uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  std::string config_text;  // verbatim
  ParamStore<float> params;

  KeyValues config() const { return KeyValues::parse(config_text); }
};

/// Writes to a sibling temporary file and renames it into place.
void save_checkpoint(const std::string& path, const ParamStore<float>& params, const std::string& config_text);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace hdc
