#include "dwdn/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace dwdn {
namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::size_t to_size(const std::string& key, const std::string& v) {
  std::size_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError("config: " + key + " expects an integer, got '" + v + "'");
  return out;
}

double to_double(const std::string& key, const std::string& v) {
  double out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError("config: " + key + " expects a number, got '" + v + "'");
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config: " + key + " expects true/false, got '" + v + "'");
}

GateMode to_gate(const std::string& key, const std::string& v) {
  if (v == "tac") return GateMode::kTac;
  if (v == "independent") return GateMode::kIndependent;
  throw ConfigError("config: " + key + " expects tac/independent, got '" + v + "'");
}

using Setter = std::function<void(RunConfig&, const std::string& key, const std::string& value)>;

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"model.n", [](RunConfig& c, auto& k, auto& v) { c.model.n = to_size(k, v); }},
      {"model.h", [](RunConfig& c, auto& k, auto& v) { c.model.h = to_size(k, v); }},
      {"model.w", [](RunConfig& c, auto& k, auto& v) { c.model.max_width = to_size(k, v); }},
      {"model.d", [](RunConfig& c, auto& k, auto& v) { c.model.max_depth = to_size(k, v); }},
      {"model.r", [](RunConfig& c, auto& k, auto& v) { c.model.r = to_size(k, v); }},
      {"model.h_tac", [](RunConfig& c, auto& k, auto& v) { c.model.h_tac = to_size(k, v); }},
      {"model.bands", [](RunConfig& c, auto& k, auto& v) { c.model.bands = to_size(k, v); }},
      {"model.dual_path", [](RunConfig& c, auto& k, auto& v) { c.model.dual_path = to_bool(k, v); }},
      {"model.bidirectional", [](RunConfig& c, auto& k, auto& v) { c.model.bidirectional = to_bool(k, v); }},
      {"model.gate", [](RunConfig& c, auto& k, auto& v) { c.model.gate = to_gate(k, v); }},
      {"stft.window", [](RunConfig& c, auto& k, auto& v) { c.model.stft.window = to_size(k, v); }},
      {"stft.hop", [](RunConfig& c, auto& k, auto& v) { c.model.stft.hop = to_size(k, v); }},
      {"audio.sample_rate", [](RunConfig& c, auto& k, auto& v) { c.model.sample_rate = static_cast<int>(to_size(k, v)); }},
      {"train.lr", [](RunConfig& c, auto& k, auto& v) { c.train.lr = to_double(k, v); }},
      {"train.lr_decay", [](RunConfig& c, auto& k, auto& v) { c.train.lr_decay = to_double(k, v); }},
      {"train.decay_every", [](RunConfig& c, auto& k, auto& v) { c.train.decay_every = to_size(k, v); }},
      {"train.grad_clip", [](RunConfig& c, auto& k, auto& v) { c.train.grad_clip = to_double(k, v); }},
      {"train.patience", [](RunConfig& c, auto& k, auto& v) { c.train.patience = to_size(k, v); }},
      {"train.max_epochs", [](RunConfig& c, auto& k, auto& v) { c.train.max_epochs = to_size(k, v); }},
      {"train.batch_size", [](RunConfig& c, auto& k, auto& v) { c.train.batch_size = to_size(k, v); }},
      {"train.steps_per_epoch", [](RunConfig& c, auto& k, auto& v) { c.train.steps_per_epoch = to_size(k, v); }},
      {"train.val_batches", [](RunConfig& c, auto& k, auto& v) { c.train.val_batches = to_size(k, v); }},
      {"train.seed", [](RunConfig& c, auto& k, auto& v) { c.train.seed = to_size(k, v); }},
      {"train.sample_subnets", [](RunConfig& c, auto& k, auto& v) { c.train.sample_subnets = to_bool(k, v); }},
      {"data.crop_seconds", [](RunConfig& c, auto& k, auto& v) { c.crop_seconds = to_double(k, v); }},
      {"data.min_snr_db", [](RunConfig& c, auto& k, auto& v) { c.min_snr_db = to_double(k, v); }},
      {"data.max_snr_db", [](RunConfig& c, auto& k, auto& v) { c.max_snr_db = to_double(k, v); }},
      {"data.dir", [](RunConfig& c, auto&, auto& v) { c.data_dir = v; }},
      {"eval.batches", [](RunConfig& c, auto& k, auto& v) { c.eval_batches = to_size(k, v); }},
  };
  return table;
}

}  // namespace

std::string format_number(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, p);
}

KeyValues parse_key_values(const std::string& text) {
  KeyValues out;
  std::istringstream in(text);
  std::string line, section;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("config: malformed section header on line " + std::to_string(line_no));
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config: expected key = value on line " + std::to_string(line_no));
    std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError("config: empty key on line " + std::to_string(line_no));
    if (!section.empty()) key = section + "." + key;
    out.emplace_back(key, trim(line.substr(eq + 1)));
  }
  return out;
}

std::string format_key_values(const KeyValues& kv) {
  std::ostringstream os;
  std::string current;
  bool first = true;
  for (const auto& [key, value] : kv) {
    const auto dot = key.find('.');
    const std::string section = dot == std::string::npos ? "" : key.substr(0, dot);
    const std::string name = dot == std::string::npos ? key : key.substr(dot + 1);
    if (first || section != current) {
      if (!first) os << '\n';
      if (!section.empty()) os << '[' << section << "]\n";
      current = section;
      first = false;
    }
    os << name << " = " << value << '\n';
  }
  return os.str();
}

RunConfig RunConfig::desk() { return RunConfig{}; }

RunConfig RunConfig::paper() {
  RunConfig c;
  c.model = ModelConfig::paper();
  c.crop_seconds = 3.0;
  return c;
}

RunConfig apply_key_values(RunConfig base, const KeyValues& kv) {
  const auto& table = setters();
  for (const auto& [key, value] : kv) {
    auto it = table.find(key);
    if (it == table.end()) throw ConfigError("config: unknown key '" + key + "'");
    it->second(base, key, value);
  }
  return base;
}

void apply_key_values(ModelConfig& model, const KeyValues& kv) {
  RunConfig rc;
  rc.model = model;
  for (const auto& [key, value] : kv) {
    if (key.rfind("model.", 0) != 0 && key.rfind("stft.", 0) != 0 && key.rfind("audio.", 0) != 0) {
      throw ConfigError("config: '" + key + "' is not an architecture key");
    }
  }
  model = apply_key_values(rc, kv).model;
}

KeyValues model_key_values(const ModelConfig& m) {
  return {
      {"model.n", std::to_string(m.n)},
      {"model.h", std::to_string(m.h)},
      {"model.w", std::to_string(m.max_width)},
      {"model.d", std::to_string(m.max_depth)},
      {"model.r", std::to_string(m.r)},
      {"model.h_tac", std::to_string(m.h_tac)},
      {"model.bands", std::to_string(m.bands)},
      {"model.dual_path", m.dual_path ? "true" : "false"},
      {"model.bidirectional", m.bidirectional ? "true" : "false"},
      {"model.gate", m.gate == GateMode::kTac ? "tac" : "independent"},
      {"stft.window", std::to_string(m.stft.window)},
      {"stft.hop", std::to_string(m.stft.hop)},
      {"audio.sample_rate", std::to_string(m.sample_rate)},
  };
}

ModelConfig model_from_key_values(const KeyValues& kv) {
  ModelConfig m;
  apply_key_values(m, kv);
  return m;
}

KeyValues to_key_values(const RunConfig& c) {
  KeyValues kv = model_key_values(c.model);
  const auto& t = c.train;
  KeyValues rest = {
      {"train.lr", format_number(t.lr)},
      {"train.lr_decay", format_number(t.lr_decay)},
      {"train.decay_every", std::to_string(t.decay_every)},
      {"train.grad_clip", format_number(t.grad_clip)},
      {"train.patience", std::to_string(t.patience)},
      {"train.max_epochs", std::to_string(t.max_epochs)},
      {"train.batch_size", std::to_string(t.batch_size)},
      {"train.steps_per_epoch", std::to_string(t.steps_per_epoch)},
      {"train.val_batches", std::to_string(t.val_batches)},
      {"train.seed", std::to_string(t.seed)},
      {"train.sample_subnets", t.sample_subnets ? "true" : "false"},
      {"data.crop_seconds", format_number(c.crop_seconds)},
      {"data.min_snr_db", format_number(c.min_snr_db)},
      {"data.max_snr_db", format_number(c.max_snr_db)},
      {"data.dir", c.data_dir},
      {"eval.batches", std::to_string(c.eval_batches)},
  };
  kv.insert(kv.end(), rest.begin(), rest.end());
  return kv;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return apply_key_values(RunConfig::desk(), parse_key_values(ss.str()));
}

std::pair<std::string, std::string> parse_override(const std::string& text) {
  const auto eq = text.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("config: override '" + text + "' is not key=value");
  return {trim(text.substr(0, eq)), trim(text.substr(eq + 1))};
}

}  // namespace dwdn
