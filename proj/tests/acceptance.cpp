// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any FAIL.
// Criteria 6-8 share one set of training runs.

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>
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

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int failures = 0;

void report(int id, bool pass, const std::string& detail) {
  if (!pass) ++failures;
  std::cout << "criterion " << std::setw(2) << id << ": " << (pass ? "PASS" : "FAIL") << "  " << detail << std::endl;
}

std::string fmt(double v, int precision = 3) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

std::string fixed(double v, int digits = 2) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

// ---------------------------------------------------------------------------
// 1. Gradient correctness of the full desk model.

void gradient_check() {
  const auto t0 = Clock::now();
  const auto cfg = ModelConfig::desk();
  const auto params = FullModelParams::init(cfg, 0);
  Rng rng(1);
  std::normal_distribution<double> normal(0.0, 1.0);
  Waveform mix{cfg.sample_rate, {std::vector<Scalar>(256)}};
  Waveform probe{cfg.sample_rate, {std::vector<Scalar>(256)}};
  for (auto& v : mix.channels[0]) v = 0.3 * normal(rng);
  for (auto& v : probe.channels[0]) v = normal(rng);
  const auto x = stft(mix, cfg.stft);
  const auto t = SpectrogramTensor::from(stft(probe, cfg.stft));
  const auto r = grad_check_params(
      [&] {
        const auto y = model_forward(x, params, cfg.max_width, cfg.max_depth);
        return ops::add(ops::sum(ops::mul(y.re, t.re)), ops::sum(ops::mul(y.im, t.im)));
      },
      params.parameters(), 5e-3, 64, 0);
  const double secs = seconds_since(t0);
  report(1, r.max_rel_error < 1e-4 && secs < 120,
         "gradient check, full desk model (w=4, d=4), 64-bit: max rel error " + fmt(r.max_rel_error) + " over " +
             std::to_string(r.coordinates) + " coordinates (all " + std::to_string(params.parameters().size()) +
             " arrays), " + fixed(secs, 1) + " s");
}

// ---------------------------------------------------------------------------
// 2. STFT round trip.

void stft_round_trip() {
  const auto t0 = Clock::now();
  const StftConfig cfg{256, 64};
  Rng rng(2);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> len(300, 16000);
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    Waveform w{8000, {std::vector<Scalar>(len(rng))}};
    for (auto& v : w.channels[0]) v = normal(rng);
    const auto y = istft(stft(w, cfg), cfg, w.length(), w.sample_rate);
    double num = 0.0, den = 0.0;
    for (std::size_t k = 0; k < w.length(); ++k) {
      num += (y.channels[0][k] - w.channels[0][k]) * (y.channels[0][k] - w.channels[0][k]);
      den += w.channels[0][k] * w.channels[0][k];
    }
    worst = std::max(worst, std::sqrt(num / den));
  }
  const double secs = seconds_since(t0);
  report(2, worst < 1e-6 && secs < 5,
         "STFT round trip, 100 signals, window 256 hop 64: max rel error " + fmt(worst) + ", " + fixed(secs, 2) + " s");
}

// ---------------------------------------------------------------------------
// 3. Softmax / TAC invariants.

void tac_invariants() {
  const auto t0 = Clock::now();
  const std::size_t h = 8, h_tac = 16;
  double worst_sum = 0.0, worst_single = 0.0, worst_perm = 0.0;
  std::size_t raw_same = 0, renorm_same = 0, renorm_trials = 0;
  double min_renorm_gap = 1e300;
  for (std::size_t w = 1; w <= 4; ++w) {
    for (int trial = 0; trial < 1000; ++trial) {
      Rng rng(1000 * w + trial);
      TacParams tac = TacParams::init(h, h_tac, rng);
      // Trained-like: non-zero output bias.
      std::uniform_real_distribution<double> u(-1.0, 1.0);
      tac.fc3.bias.mutable_data()[0] = u(rng);
      std::vector<std::vector<Scalar>> g(w + 1, std::vector<Scalar>(h));
      for (auto& v : g)
        for (auto& x : v) x = 2.0 * u(rng);

      const std::vector<std::vector<Scalar>> first(g.begin(), g.begin() + static_cast<long>(w));
      const auto q = tac_reweight(first, tac).q;
      const double total = std::accumulate(q.begin(), q.end(), 0.0);
      worst_sum = std::max(worst_sum, std::abs(total - 1.0));
      if (w == 1) worst_single = std::max(worst_single, std::abs(q[0] - 1.0));

      std::vector<std::size_t> perm(w);
      std::iota(perm.begin(), perm.end(), std::size_t{0});
      std::shuffle(perm.begin(), perm.end(), rng);
      std::vector<std::vector<Scalar>> permuted;
      for (auto p : perm) permuted.push_back(first[p]);
      const auto qp = tac_reweight(permuted, tac).q;
      for (std::size_t i = 0; i < w; ++i) worst_perm = std::max(worst_perm, std::abs(qp[i] - q[perm[i]]));

      // Width w versus the first w entries of the width-(w+1) reweighting.
      const auto wider = tac_reweight(g, tac).q;
      double raw_gap = 0.0, renorm_gap = 0.0;
      const double kept = std::accumulate(wider.begin(), wider.begin() + static_cast<long>(w), 0.0);
      for (std::size_t i = 0; i < w; ++i) {
        raw_gap = std::max(raw_gap, std::abs(q[i] - wider[i]));
        renorm_gap = std::max(renorm_gap, std::abs(q[i] - wider[i] / kept));
      }
      raw_same += raw_gap <= 1e-12;
      if (w >= 2) {
        ++renorm_trials;
        renorm_same += renorm_gap <= 1e-12;
        min_renorm_gap = std::min(min_renorm_gap, renorm_gap);
      }
    }
  }
  const double secs = seconds_since(t0);
  const bool pass = worst_sum <= 1e-6 && worst_single == 0.0 && worst_perm <= 1e-9 && raw_same == 0 &&
                    renorm_same == 0 && secs < 60;
  report(3, pass,
         "TAC invariants, 1000 forwards at each w in 1..4: max |sum Q - 1| " + fmt(worst_sum) + ", w=1 max |Q - 1| " +
             fmt(worst_single) + ", permutation max diff " + fmt(worst_perm) + ", truncation equal in " +
             std::to_string(raw_same) + "/4000 raw and " + std::to_string(renorm_same) + "/" +
             std::to_string(renorm_trials) + " renormalized (min gap " + fmt(min_renorm_gap) + "), " +
             fixed(secs, 1) + " s");
}

// ---------------------------------------------------------------------------
// 4. Extraction equivalence.

void extraction_equivalence() {
  const auto t0 = Clock::now();
  const auto full = FullModelParams::init(ModelConfig::desk(), 4);
  Rng rng(4);
  SynthSpec spec;
  spec.seconds = 1.0;
  spec.items = 2;
  const auto x = stft(synth_batch(rng, spec).mixture, full.config.stft);
  double worst = 0.0;
  std::size_t configs = 0;
  for (std::size_t d = 1; d <= 4; ++d)
    for (std::size_t w = 1; w <= 4; ++w) {
      const auto sub = extract_subnet(full, {w, d});
      const auto a = model_forward(x, full, w, d);
      const auto b = model_forward(x, sub, w, d);
      for (std::size_t i = 0; i < a.re.numel(); ++i) {
        worst = std::max(worst, std::abs(a.re.data()[i] - b.re.data()[i]));
        worst = std::max(worst, std::abs(a.im.data()[i] - b.im.data()[i]));
      }
      ++configs;
    }
  const double secs = seconds_since(t0);
  report(4, worst == 0.0 && configs == 16 && secs < 120,
         "extraction equivalence at all " + std::to_string(configs) + " desk configs: max abs diff " + fmt(worst) +
             ", " + fixed(secs, 2) + " s");
}

// ---------------------------------------------------------------------------
// 5. Cost model.

void cost_model() {
  const auto t0 = Clock::now();
  const auto paper = enumerate_costs(ModelConfig::paper());
  const auto desk = enumerate_costs(ModelConfig::desk());
  auto monotone = [](const CostTable& t) {
    for (const auto& r : t.rows) {
      if (r.w > 1) {
        const auto& p = t.at(r.w - 1, r.d);
        if (!(r.params > p.params && r.macs_per_second > p.macs_per_second)) return false;
      }
      if (r.d > 1) {
        const auto& p = t.at(r.w, r.d - 1);
        if (!(r.params > p.params && r.macs_per_second > p.macs_per_second)) return false;
      }
    }
    return true;
  };
  // Brute force: count the stored arrays of the extracted subnetwork.
  const auto full = FullModelParams::init(ModelConfig::desk(), 5);
  std::size_t mismatched = 0;
  for (const auto& r : desk.rows) {
    std::size_t stored = 0;
    for (const auto& nt : extract_subnet(full, {r.w, r.d}).named_parameters()) stored += nt.tensor.numel();
    mismatched += stored != r.params;
  }
  const double secs = seconds_since(t0);
  const bool pass = paper.rows.size() == 192 && monotone(paper) && monotone(desk) && mismatched == 0 && secs < 60;
  report(5, pass,
         "cost model: paper preset " + std::to_string(paper.rows.size()) + " rows, monotone paper " +
             (monotone(paper) ? "yes" : "no") + " desk " + (monotone(desk) ? "yes" : "no") + ", desk param mismatches " +
             std::to_string(mismatched) + "/16, " + fixed(secs, 2) + " s");
}

// ---------------------------------------------------------------------------
// 6-8. Training trends.

struct TrendSetup {
  std::size_t steps_per_epoch = 500;
  std::size_t epochs = 4;
  std::size_t batch = 4;
  double crop_seconds = 0.5;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::size_t test_batches = 16;
};

TrainConfig train_config(const TrendSetup& s, std::uint64_t seed, bool sample) {
  TrainConfig tc;
  tc.steps_per_epoch = s.steps_per_epoch;
  tc.max_epochs = s.epochs;
  tc.batch_size = s.batch;
  tc.val_batches = 4;
  tc.seed = seed;
  tc.sample_subnets = sample;
  return tc;
}

FullModelParams train_model(const TrendSetup& s, ModelConfig cfg, std::uint64_t seed, bool sample) {
  SynthSource src({s.crop_seconds, cfg.sample_rate, 1});
  return train(FullModelParams::init(cfg, seed + 100), src, train_config(s, seed, sample)).best;
}

void training_trends() {
  const TrendSetup s;
  const auto desk = ModelConfig::desk();
  const std::size_t W = desk.max_width, D = desk.max_depth;
  SynthSource src({s.crop_seconds, desk.sample_rate, 1});
  Rng test_rng(999);
  std::vector<Batch> test;
  for (std::size_t i = 0; i < s.test_batches; ++i) test.push_back(src.next(test_rng, s.batch));

  const std::vector<SubnetConfig> standalone{{1, 1}, {1, D}, {W, D}};
  const std::vector<SubnetConfig> corners{{1, 1}, {W, 1}, {1, D}, {W, D}};
  std::map<std::pair<std::size_t, std::size_t>, double> dyn, alone, ind;
  double budget_secs = 0.0;
  double ablation_secs = 0.0;
  const double n = static_cast<double>(s.seeds.size());

  for (auto seed : s.seeds) {
    auto t0 = Clock::now();
    const auto model = train_model(s, desk, seed, true);
    for (std::size_t d = 1; d <= D; ++d)
      for (std::size_t w = 1; w <= W; ++w) dyn[{w, d}] += evaluate_snr(model, test, w, d) / n;
    for (const auto& c : standalone) {
      ModelConfig cfg = desk;
      cfg.max_width = c.w;
      cfg.max_depth = c.d;
      const auto m = train_model(s, cfg, seed, false);
      alone[{c.w, c.d}] += evaluate_snr(m, test, c.w, c.d) / n;
    }
    budget_secs += seconds_since(t0);

    t0 = Clock::now();
    ModelConfig no_tac = desk;
    no_tac.gate = GateMode::kIndependent;
    const auto ablated = train_model(s, no_tac, seed, true);
    for (const auto& c : corners) ind[{c.w, c.d}] += evaluate_snr(ablated, test, c.w, c.d) / n;
    ablation_secs += seconds_since(t0);
    std::cout << "  seed " << seed << " trained (" << fixed(budget_secs + ablation_secs, 0) << " s so far)" << std::endl;
  }

  std::cout << "  dynamic model mean SNR (dB), rows d=1..4, columns w=1..4:\n";
  for (std::size_t d = 1; d <= D; ++d) {
    std::cout << "   ";
    for (std::size_t w = 1; w <= W; ++w) std::cout << ' ' << fixed(dyn[{w, d}]);
    std::cout << '\n';
  }

  // 6: extracted subnetworks versus stand-alone models.
  bool ok6 = budget_secs <= 1800;
  std::string detail6 = "dynamic vs stand-alone (" + std::to_string(s.seeds.size()) + " seeds, " +
                        std::to_string(s.steps_per_epoch * s.epochs) + " steps each):";
  for (const auto& c : standalone) {
    const double gap = dyn[{c.w, c.d}] - alone[{c.w, c.d}];
    ok6 = ok6 && gap >= -0.5;
    detail6 += " (" + std::to_string(c.w) + "," + std::to_string(c.d) + ") " + fixed(dyn[{c.w, c.d}]) + " vs " +
               fixed(alone[{c.w, c.d}]) + " [" + (gap >= 0 ? "+" : "") + fixed(gap) + "]";
  }
  report(6, ok6, detail6 + ", " + fixed(budget_secs / 60.0, 1) + " min");

  // 7: TAC versus independent gates over the corners.
  double tac_mean = 0.0, ind_mean = 0.0;
  for (const auto& c : corners) {
    tac_mean += dyn[{c.w, c.d}] / 4.0;
    ind_mean += ind[{c.w, c.d}] / 4.0;
  }
  report(7, tac_mean - ind_mean >= 0.0,
         "TAC vs independent gates, corner mean: " + fixed(tac_mean) + " vs " + fixed(ind_mean) + " dB [" +
             (tac_mean >= ind_mean ? "+" : "") + fixed(tac_mean - ind_mean) + "], ablation " +
             fixed(ablation_secs / 60.0, 1) + " min");

  // 8: deeper versus wider at matched MACs.
  const auto costs = enumerate_costs(desk);
  std::size_t pairs = 0, deeper_wins = 0;
  std::string listing;
  for (const auto& a : costs.rows)
    for (const auto& b : costs.rows) {
      if (!(a.d > b.d && a.w < b.w)) continue;
      const double hi = std::max(a.macs_per_second, b.macs_per_second);
      if (std::abs(a.macs_per_second - b.macs_per_second) > 0.1 * hi) continue;
      ++pairs;
      const bool win = dyn[{a.w, a.d}] > dyn[{b.w, b.d}];
      deeper_wins += win;
      listing += " (" + std::to_string(a.w) + "," + std::to_string(a.d) + ")" + (win ? ">" : "<") + "(" +
                 std::to_string(b.w) + "," + std::to_string(b.d) + ")";
    }
  const double share = pairs ? static_cast<double>(deeper_wins) / static_cast<double>(pairs) : 0.0;
  report(8, pairs > 0 && share >= 0.6,
         "deeper beats wider within 10% MACs in " + std::to_string(deeper_wins) + "/" + std::to_string(pairs) +
             " pairs (" + fixed(100.0 * share, 0) + "%):" + listing);
}

// ---------------------------------------------------------------------------
// 9. Determinism of two CLI training runs.

int run(const std::string& cmd) {
  const int status = std::system((cmd + " > /dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void determinism() {
  const auto t0 = Clock::now();
  const auto dir = fs::temp_directory_path() / "dwdn_acceptance";
  fs::remove_all(dir);
  const std::string args = " --seed 11 --set train.max_epochs=3 --set train.steps_per_epoch=20"
                           " --set data.crop_seconds=0.5 --set train.val_batches=2";
  const int a = run("'" DWDN_CLI_PATH "' train" + args + " --out '" + (dir / "a").string() + "'");
  const int b = run("'" DWDN_CLI_PATH "' train" + args + " --out '" + (dir / "b").string() + "'");
  const auto ca = slurp(dir / "a" / "best.dwdn");
  const auto cb = slurp(dir / "b" / "best.dwdn");
  const bool same = a == 0 && b == 0 && !ca.empty() && ca == cb;
  report(9, same && slurp(dir / "a" / "metrics.csv") == slurp(dir / "b" / "metrics.csv"),
         "two `train` runs with seed 11: checkpoints " + std::string(same ? "byte-identical" : "differ") + " (" +
             std::to_string(ca.size()) + " bytes), " + fixed(seconds_since(t0), 1) + " s");
  fs::remove_all(dir);
}

// ---------------------------------------------------------------------------
// 10. Checkpoint integrity.

void checkpoint_integrity() {
  const auto t0 = Clock::now();
  const auto params = FullModelParams::init(ModelConfig::desk(), 10);
  const auto bytes = encode_checkpoint(params);
  const bool round_trip = encode_checkpoint(decode_checkpoint(bytes)) == bytes;

  const auto path = fs::temp_directory_path() / "dwdn_acceptance_ckpt.dwdn";
  save_checkpoint(params, path);
  const bool file_trip = slurp(path) == bytes && encode_checkpoint(load_checkpoint(path)) == bytes;
  fs::remove(path);

  // Every header/directory byte, then a spread of payload bytes and the CRC.
  std::vector<std::size_t> positions;
  const std::size_t header = std::min<std::size_t>(bytes.size(), 8192);
  for (std::size_t i = 0; i < header; ++i) positions.push_back(i);
  Rng rng(10);
  std::uniform_int_distribution<std::size_t> pick(header, bytes.size() - 1);
  for (int i = 0; i < 2000; ++i) positions.push_back(pick(rng));
  std::size_t undetected = 0;
  for (auto i : positions) {
    std::string bad = bytes;
    bad[i] = static_cast<char>(bad[i] ^ (1 + static_cast<int>(i % 255)));
    try {
      decode_checkpoint(bad);
      ++undetected;
    } catch (const CheckpointError&) {
    }
  }
  const double secs = seconds_since(t0);
  report(10, round_trip && file_trip && undetected == 0 && secs < 5,
         std::string("checkpoint round trip ") + (round_trip && file_trip ? "byte-identical" : "differs") + ", " +
             std::to_string(undetected) + "/" + std::to_string(positions.size()) +
             " single-byte corruptions undetected (" + std::to_string(bytes.size()) + "-byte file), " +
             fixed(secs, 2) + " s");
}

}  // namespace

int main(int argc, char** argv) {
  // Optional list of criterion numbers to run; default all.
  std::vector<int> only;
  for (int i = 1; i < argc; ++i) only.push_back(std::atoi(argv[i]));
  auto want = [&](std::initializer_list<int> ids) {
    if (only.empty()) return true;
    for (int id : ids)
      if (std::find(only.begin(), only.end(), id) != only.end()) return true;
    return false;
  };
  const std::vector<std::pair<std::initializer_list<int>, std::function<void()>>> steps = {
      {{1}, gradient_check},       {{2}, stft_round_trip}, {{3}, tac_invariants},
      {{4}, extraction_equivalence}, {{5}, cost_model},    {{9}, determinism},
      {{10}, checkpoint_integrity}, {{6, 7, 8}, training_trends},
  };
  for (const auto& [ids, fn] : steps) {
    if (!want(ids)) continue;
    try {
      fn();
    } catch (const std::exception& e) {
      for (int id : ids) report(id, false, std::string("threw: ") + e.what());
    }
  }
  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
