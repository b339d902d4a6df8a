#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "dwdn/config.hpp"
#include "dwdn/deploy.hpp"
#include "dwdn/gradcheck.hpp"
#include "dwdn/ops.hpp"
#include "dwdn/training.hpp"

namespace fs = std::filesystem;
using namespace dwdn;

namespace {

constexpr int kOk = 0;
constexpr int kFailure = 1;
constexpr int kUsage = 2;

// Bad arguments detected after parsing (exit 2).
class UsageError : public Error {
 public:
  using Error::Error;
};

struct CommonOptions {
  std::string config;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string out;
};

RunConfig resolve_config(const CommonOptions& o) {
  RunConfig cfg = o.config.empty() ? RunConfig::desk() : load_run_config(o.config);
  KeyValues kv;
  for (const auto& s : o.overrides) kv.push_back(parse_override(s));
  cfg = apply_key_values(cfg, kv);
  if (o.seed) cfg.train.seed = *o.seed;
  try {
    cfg.model.validate();
    cfg.train.validate();
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
  if (!(cfg.crop_seconds > 0)) throw UsageError("config: data.crop_seconds must be positive");
  return cfg;
}

fs::path out_dir(const CommonOptions& o) {
  if (o.out.empty()) throw UsageError("--out is required");
  fs::create_directories(o.out);
  return o.out;
}

void check_range(const ModelConfig& m, std::size_t w, std::size_t d) {
  if (w < 1 || w > m.max_width || d < 1 || d > m.max_depth) {
    throw UsageError("invalid subnetwork (w=" + std::to_string(w) + ", d=" + std::to_string(d) +
                     "): valid ranges are w in [1, " + std::to_string(m.max_width) + "], d in [1, " +
                     std::to_string(m.max_depth) + "]");
  }
}

std::optional<double> parse_budget(const std::string& text, const char* flag) {
  if (text.empty()) return std::nullopt;
  try {
    std::size_t used = 0;
    const double v = std::stod(text, &used);
    if (used != text.size() || std::isnan(v) || v < 0) throw std::invalid_argument(text);
    return v;
  } catch (const std::exception&) {
    throw UsageError(std::string(flag) + ": expected a non-negative number or 'inf', got '" + text + "'");
  }
}

SynthSpec synth_spec(const RunConfig& cfg, std::size_t items) {
  return {cfg.crop_seconds, cfg.model.sample_rate, items, cfg.min_snr_db, cfg.max_snr_db};
}

std::unique_ptr<DataSource> make_source(const RunConfig& cfg) {
  if (!cfg.data_dir.empty()) return std::make_unique<WavFolderSource>(cfg.data_dir, cfg.crop_seconds);
  return std::make_unique<SynthSource>(synth_spec(cfg, 1));
}

// Evaluation items: whole tracks from a folder, or seeded synthetic crops.
struct EvalItem {
  std::string name;
  Waveform mixture;
  Waveform target;
};

std::vector<EvalItem> eval_items(const RunConfig& cfg, std::uint64_t seed, std::size_t count) {
  std::vector<EvalItem> items;
  if (!cfg.data_dir.empty()) {
    std::vector<fs::path> dirs;
    for (const auto& e : fs::directory_iterator(cfg.data_dir))
      if (e.is_directory() && fs::exists(e.path() / "mixture.wav") && fs::exists(e.path() / "target.wav"))
        dirs.push_back(e.path());
    std::sort(dirs.begin(), dirs.end());
    if (dirs.empty()) throw Error("no <track>/mixture.wav + target.wav pairs under " + cfg.data_dir);
    for (const auto& d : dirs) items.push_back({d.filename().string(), read_wav(d / "mixture.wav"), read_wav(d / "target.wav")});
    return items;
  }
  Rng rng(seed);
  for (std::size_t i = 0; i < count; ++i) {
    auto pair = synth_batch(rng, synth_spec(cfg, 1));
    items.push_back({"synth" + std::to_string(i), std::move(pair.mixture), std::move(pair.target)});
  }
  return items;
}

double mean_snr(const FullModelParams& p, const std::vector<EvalItem>& items, std::size_t w, std::size_t d) {
  double total = 0.0;
  for (const auto& it : items) total += snr_db(it.target, separate(p, it.mixture, w, d));
  return total / static_cast<double>(items.size());
}

void print_costs(const CostRow& r) {
  std::cout << "w=" << r.w << " d=" << r.d << " params=" << r.params << " macs_per_s=" << format_number(r.macs_per_second)
            << "\n";
}

// ---------------------------------------------------------------------------

int cmd_train(const CommonOptions& o) {
  const RunConfig cfg = resolve_config(o);
  const fs::path dir = out_dir(o);
  {
    std::ofstream snap(dir / "config.cfg");
    snap << format_key_values(to_key_values(cfg));
  }
  auto source = make_source(cfg);
  std::ofstream metrics(dir / "metrics.csv");
  metrics << "epoch,train_loss,val_loss,lr,sampled\n";
  auto params = FullModelParams::init(cfg.model, cfg.train.seed);
  std::cout << "training " << params.parameter_count() << " params, seed " << cfg.train.seed << "\n";
  const auto result = train(std::move(params), *source, cfg.train, [&](const EpochRecord& r) {
    metrics << r.epoch << ',' << format_number(r.train_loss) << ',' << format_number(r.val_loss) << ','
            << format_number(r.lr) << ',' << histogram_str(r.sampled) << '\n';
    metrics.flush();
    std::cout << "epoch " << r.epoch << " train " << r.train_loss << " val " << r.val_loss << " lr " << r.lr << "\n";
  });
  save_checkpoint(result.best, dir / "best.dwdn");
  std::cout << "best epoch " << result.best_epoch << (result.early_stopped ? " (early stop)" : "") << ", wrote "
            << (dir / "best.dwdn").string() << "\n";
  return kOk;
}

struct EvalOptions {
  std::string checkpoint;
  std::optional<std::size_t> w, d;
  std::size_t items = 8;
  bool oracle = false;
};

int cmd_eval(const CommonOptions& o, const EvalOptions& e) {
  RunConfig cfg = resolve_config(o);
  if (e.items == 0) throw UsageError("--items must be at least 1");
  std::optional<FullModelParams> params;
  std::size_t w = 0, d = 0;
  if (!e.oracle) {
    if (e.checkpoint.empty()) throw UsageError("--checkpoint is required unless --oracle is given");
    params = load_checkpoint(e.checkpoint);
    cfg.model = params->config;
    w = e.w.value_or(params->config.max_width);
    d = e.d.value_or(params->config.max_depth);
    check_range(params->config, w, d);
  }
  const auto items = eval_items(cfg, o.seed.value_or(0), e.items);

  std::optional<std::ofstream> csv;
  if (!o.out.empty()) {
    csv.emplace(out_dir(o) / "eval.csv");
    *csv << "item,snr_db\n";
  }
  std::cout << std::setprecision(10);
  double total = 0.0;
  for (const auto& it : items) {
    const Waveform est = e.oracle ? it.target : separate(*params, it.mixture, w, d);
    const double snr = snr_db(it.target, est);
    total += snr;
    std::cout << it.name << " snr_db " << snr << "\n";
    if (csv) *csv << it.name << ',' << format_number(snr) << '\n';
  }
  const double mean = total / static_cast<double>(items.size());
  std::cout << "mean snr_db " << mean << (e.oracle ? " (oracle)" : "") << "\n";
  if (csv) *csv << "mean," << format_number(mean) << '\n';
  return kOk;
}

int cmd_enumerate(const CommonOptions& o, const std::string& checkpoint, std::size_t items) {
  RunConfig cfg = resolve_config(o);
  std::optional<FullModelParams> params;
  if (!checkpoint.empty()) {
    params = load_checkpoint(checkpoint);
    cfg.model = params->config;
  }
  auto table = enumerate_costs(cfg.model);
  if (params) {
    const auto test = eval_items(cfg, o.seed.value_or(0), items);
    for (auto& r : table.rows) r.snr_db = mean_snr(*params, test, r.w, r.d);
  }
  const fs::path path = out_dir(o) / "costs.csv";
  write_cost_csv(path, table);
  std::cout << "wrote " << table.rows.size() << " rows to " << path.string() << "\n";
  return kOk;
}

int cmd_select(const CommonOptions& o, const std::string& checkpoint, const std::string& max_macs,
               const std::string& max_params, const std::string& prefer) {
  ModelConfig model = checkpoint.empty() ? resolve_config(o).model : load_checkpoint(checkpoint).config;
  const auto macs = parse_budget(max_macs, "--max-macs");
  const auto params = parse_budget(max_params, "--max-params");
  if (!macs && !params) throw UsageError("give --max-macs and/or --max-params");
  const auto table = enumerate_costs(model);
  const auto pick = select_config(table, macs, params, prefer == "width" ? Preference::kWidth : Preference::kDepth);
  print_costs(table.at(pick.w, pick.d));
  return kOk;
}

int cmd_extract(const CommonOptions& o, const std::string& checkpoint, std::size_t w, std::size_t d) {
  const auto full = load_checkpoint(checkpoint);
  check_range(full.config, w, d);
  const auto sub = extract_subnet(full, {w, d});
  const fs::path path = out_dir(o) / ("subnet_w" + std::to_string(w) + "_d" + std::to_string(d) + ".dwdn");
  save_checkpoint(sub, path);
  std::cout << "wrote " << path.string() << " (" << sub.parameter_count() << " params)\n";
  return kOk;
}

struct GradcheckOptions {
  std::optional<std::size_t> w, d;
  std::size_t coords = 64;
  std::size_t samples = 256;
  double eps = 5e-3;
  double tol = 1e-4;
};

int cmd_gradcheck(const CommonOptions& o, const GradcheckOptions& g) {
  const RunConfig cfg = resolve_config(o);
  const std::size_t w = g.w.value_or(cfg.model.max_width);
  const std::size_t d = g.d.value_or(cfg.model.max_depth);
  check_range(cfg.model, w, d);
  const auto params = FullModelParams::init(cfg.model, cfg.train.seed);
  // Smooth probe: fixed random projection of the masked spectrogram.
  Rng rng(cfg.train.seed + 1);
  std::normal_distribution<double> normal(0.0, 1.0);
  Waveform mix{cfg.model.sample_rate, {std::vector<Scalar>(g.samples)}};
  Waveform probe{cfg.model.sample_rate, {std::vector<Scalar>(g.samples)}};
  for (auto& v : mix.channels[0]) v = static_cast<Scalar>(0.3 * normal(rng));
  for (auto& v : probe.channels[0]) v = static_cast<Scalar>(normal(rng));
  const auto x = stft(mix, cfg.model.stft);
  const auto t = SpectrogramTensor::from(stft(probe, cfg.model.stft));
  const auto report = grad_check_params(
      [&] {
        const auto y = model_forward(x, params, w, d);
        return ops::add(ops::sum(ops::mul(y.re, t.re)), ops::sum(ops::mul(y.im, t.im)));
      },
      params.parameters(), g.eps, g.coords, cfg.train.seed);
  const auto named = params.named_parameters();
  std::cout << "max_rel_error " << report.max_rel_error << " over " << report.coordinates << " coordinates\n"
            << "worst " << named[report.worst_tensor].name << "[" << report.worst_index << "] autodiff "
            << report.worst_autodiff << " numeric " << report.worst_numeric << "\n";
  const bool ok = report.max_rel_error < g.tol;
  std::cout << (ok ? "PASS" : "FAIL") << " (tolerance " << g.tol << ")\n";
  return ok ? kOk : kFailure;
}

void add_common(CLI::App* app, CommonOptions& o, bool with_out) {
  app->add_option("--config", o.config, "Run config file (key = value, [section] headers)")->check(CLI::ExistingFile);
  app->add_option("--set", o.overrides, "Override a config key, e.g. --set train.lr=0.002")->allow_extra_args(false);
  app->add_option("--seed", o.seed, "Seed (training, model init and synthetic data)");
  if (with_out) app->add_option("--out", o.out, "Output directory");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dynamic-width/depth separation network: train, evaluate, and deploy subnetworks"};
  app.require_subcommand(1);

  CommonOptions common;
  EvalOptions eval;
  GradcheckOptions grad;
  std::string checkpoint, max_macs, max_params, prefer = "depth";
  std::size_t w = 0, d = 0, items = 8;

  auto* train_cmd = app.add_subcommand("train", "Train the full dynamic network");
  add_common(train_cmd, common, true);
  train_cmd->get_option("--out")->required();

  auto* eval_cmd = app.add_subcommand("eval", "SNR of subnetwork (w, d) per item and on average");
  add_common(eval_cmd, common, true);
  eval_cmd->add_option("--checkpoint", eval.checkpoint, "Checkpoint file");
  eval_cmd->add_option("--w", eval.w, "Width (default: checkpoint maximum)");
  eval_cmd->add_option("--d", eval.d, "Depth (default: checkpoint maximum)");
  eval_cmd->add_option("--items", eval.items, "Synthetic items to evaluate")->capture_default_str();
  eval_cmd->add_flag("--oracle", eval.oracle, "Score the target as its own estimate");

  auto* enum_cmd = app.add_subcommand("enumerate", "Write the cost table of every subnetwork to costs.csv");
  add_common(enum_cmd, common, true);
  enum_cmd->get_option("--out")->required();
  enum_cmd->add_option("--checkpoint", checkpoint, "Also fill the snr_db column from this checkpoint");
  enum_cmd->add_option("--items", items, "Synthetic items per SNR evaluation")->capture_default_str();

  auto* select_cmd = app.add_subcommand("select", "Pick the subnetwork for a compute budget");
  add_common(select_cmd, common, false);
  select_cmd->add_option("--checkpoint", checkpoint, "Take the architecture from this checkpoint");
  select_cmd->add_option("--max-macs", max_macs, "MACs per second of audio ('inf' allowed)");
  select_cmd->add_option("--max-params", max_params, "Parameter count ('inf' allowed)");
  select_cmd->add_option("--prefer", prefer, "Tie-break axis")->check(CLI::IsMember({"depth", "width"}))->capture_default_str();

  auto* extract_cmd = app.add_subcommand("extract", "Save subnetwork (w, d) as a stand-alone checkpoint");
  add_common(extract_cmd, common, true);
  extract_cmd->get_option("--out")->required();
  extract_cmd->add_option("--checkpoint", checkpoint, "Full-network checkpoint")->required();
  extract_cmd->add_option("--w", w, "Width")->required();
  extract_cmd->add_option("--d", d, "Depth")->required();

  auto* grad_cmd = app.add_subcommand("gradcheck", "Compare autodiff against finite differences on a fresh model");
  add_common(grad_cmd, common, false);
  grad_cmd->add_option("--w", grad.w, "Width (default: maximum)");
  grad_cmd->add_option("--d", grad.d, "Depth (default: maximum)");
  grad_cmd->add_option("--coords", grad.coords, "Coordinates probed per parameter array, 0 for all")->capture_default_str();
  grad_cmd->add_option("--samples", grad.samples, "Input length in samples")->capture_default_str();
  grad_cmd->add_option("--eps", grad.eps, "Finite-difference step")->capture_default_str();
  grad_cmd->add_option("--tol", grad.tol, "Maximum relative error")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (*train_cmd) return cmd_train(common);
    if (*eval_cmd) return cmd_eval(common, eval);
    if (*enum_cmd) return cmd_enumerate(common, checkpoint, items);
    if (*select_cmd) return cmd_select(common, checkpoint, max_macs, max_params, prefer);
    if (*extract_cmd) return cmd_extract(common, checkpoint, w, d);
    if (*grad_cmd) return cmd_gradcheck(common, grad);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kUsage;
}
