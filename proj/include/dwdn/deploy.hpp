#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dwdn/model.hpp"

namespace dwdn {

struct CostRow {
  std::size_t w = 1;
  std::size_t d = 1;
  std::size_t params = 0;
  double macs_per_second = 0.0;
  std::optional<double> snr_db;
};

/// Size and complexity of every (w, d) subnetwork, ordered by d then w.
struct CostTable {
  std::size_t max_width = 0;
  std::size_t max_depth = 0;
  std::vector<CostRow> rows;

  const CostRow& at(std::size_t w, std::size_t d) const;
  CostRow& at(std::size_t w, std::size_t d);
  /// Row count is W·D and costs never decrease along either axis.
  void validate() const;
};

/// Cost table over all subnetworks, evaluated on a `frames`-frame segment
/// (default: one second of audio) and normalized per second.
CostTable enumerate_costs(const ModelConfig& config, std::optional<std::size_t> frames = std::nullopt);

/// Raised when no subnetwork fits the budget; reports the cheapest row.
class BudgetError : public Error {
 public:
  BudgetError(const std::string& what, std::size_t min_params, double min_macs)
      : Error(what), min_params(min_params), min_macs(min_macs) {}
  std::size_t min_params;
  double min_macs;
};

enum class Preference { kDepth, kWidth };

/// Among rows within every given budget (inclusive), picks the deepest and
/// then the widest (or the widest then deepest for kWidth).
SubnetConfig select_config(const CostTable& table, std::optional<double> max_macs, std::optional<double> max_params,
                           Preference prefer = Preference::kDepth);

/// Standalone parameter set for subnetwork (w, d): band modules, the first d
/// depth units with their first w experts, and TAC weights unchanged.
FullModelParams extract_subnet(const FullModelParams& full, SubnetConfig sub);

void write_cost_csv(const std::filesystem::path& path, const CostTable& table);

// Checkpoint file layout (little-endian):
//   "DWDN"  u32 version
//   u32 config length, config text (key = value lines)
//   u32 array count, then per array:
//     u32 name length, name, u8 dtype (1 = float32), u32 rank, u32 dims[rank],
//     u64 payload offset, u64 byte length
//   u64 payload length, payload
//   u32 CRC-32 of every preceding byte
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public Error {
 public:
  using Error::Error;
};
class ChecksumError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class VersionError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class CheckpointShapeError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

/// Serializes to bytes; 64-bit weights are narrowed to float32.
std::string encode_checkpoint(const FullModelParams& params);
FullModelParams decode_checkpoint(const std::string& bytes);

void save_checkpoint(const FullModelParams& params, const std::filesystem::path& path);
FullModelParams load_checkpoint(const std::filesystem::path& path);

}  // namespace dwdn
