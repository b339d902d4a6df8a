#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "dwdn/model.hpp"
#include "dwdn/training.hpp"

namespace dwdn {

/// Bad config text, unknown key or unparsable value.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Ordered dotted-key / value pairs ("section.key").
using KeyValues = std::vector<std::pair<std::string, std::string>>;

/// Parses `[section]` headers and `key = value` lines; `#` starts a comment.
/// Keys inside a section become "section.key".
KeyValues parse_key_values(const std::string& text);
/// Inverse of parse_key_values, grouping keys by section.
std::string format_key_values(const KeyValues& kv);

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  double crop_seconds = 2.0;
  double min_snr_db = -5.0;
  double max_snr_db = 5.0;
  std::string data_dir;  // empty: synthetic data
  std::size_t eval_batches = 4;

  static RunConfig desk();
  static RunConfig paper();
};

/// Applies `kv` on top of `base`. Unknown keys throw ConfigError naming the key.
RunConfig apply_key_values(RunConfig base, const KeyValues& kv);
void apply_key_values(ModelConfig& model, const KeyValues& kv);
KeyValues to_key_values(const RunConfig& cfg);
/// The model/stft/audio subset that fully determines the architecture.
KeyValues model_key_values(const ModelConfig& cfg);
ModelConfig model_from_key_values(const KeyValues& kv);

RunConfig load_run_config(const std::filesystem::path& path);
/// "key=value" override.
std::pair<std::string, std::string> parse_override(const std::string& text);

std::string format_number(double v);

}  // namespace dwdn
