#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <zlib.h>

#include "dwdn/config.hpp"
#include "dwdn/deploy.hpp"
#include "test_util.hpp"

using namespace dwdn;

namespace {

Spectrogram random_spec(const ModelConfig& cfg, std::size_t items, std::size_t samples, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Waveform w{cfg.sample_rate, {}};
  for (std::size_t c = 0; c < items; ++c) w.channels.push_back(dwdn::testing::random_vector(samples, rng, 0.3));
  return stft(w, cfg.stft);
}

double spec_diff(const SpectrogramTensor& a, const SpectrogramTensor& b) {
  return std::max(dwdn::testing::max_abs_diff(a.re.data(), b.re.data()),
                  dwdn::testing::max_abs_diff(a.im.data(), b.im.data()));
}

std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "dwdn_test_deploy";
  std::filesystem::create_directories(dir);
  return dir / name;
}

// Deepest-first scan written independently of select_config.
SubnetConfig scan_select(const CostTable& t, std::optional<double> macs, std::optional<double> params, Preference p) {
  const std::size_t outer = p == Preference::kDepth ? t.max_depth : t.max_width;
  const std::size_t inner = p == Preference::kDepth ? t.max_width : t.max_depth;
  for (std::size_t a = outer; a >= 1; --a)
    for (std::size_t b = inner; b >= 1; --b) {
      const std::size_t w = p == Preference::kDepth ? b : a;
      const std::size_t d = p == Preference::kDepth ? a : b;
      const auto& r = t.at(w, d);
      if ((!macs || r.macs_per_second <= *macs) && (!params || static_cast<double>(r.params) <= *params)) return {w, d};
    }
  return {0, 0};
}

}  // namespace

TEST_CASE("enumerate covers every subnetwork") {
  const auto paper = enumerate_costs(ModelConfig::paper());
  CHECK(paper.rows.size() == 192);
  const auto desk = enumerate_costs(ModelConfig::desk());
  CHECK(desk.rows.size() == 16);
  std::set<std::pair<std::size_t, std::size_t>> seen;
  for (const auto& r : desk.rows) {
    seen.insert({r.w, r.d});
    const auto c = model_costs(ModelConfig::desk(), r.w, r.d, 125);
    CHECK(r.params == c.params);
    CHECK(r.macs_per_second == c.macs_per_second);
  }
  CHECK(seen.size() == 16);
  CHECK(desk.rows.front().w == 1);
  CHECK(desk.rows.front().d == 1);
  CHECK(desk.rows.back().w == 4);
  CHECK(desk.rows.back().d == 4);
  CHECK_NOTHROW(desk.validate());
}

TEST_CASE("select examples") {
  const auto t = enumerate_costs(ModelConfig::desk());
  CHECK(select_config(t, 1e300, std::nullopt) == SubnetConfig{4, 4});
  CHECK(select_config(t, std::nullopt, 1e300) == SubnetConfig{4, 4});
  const auto& cheapest = t.at(1, 1);
  CHECK(select_config(t, cheapest.macs_per_second, static_cast<double>(cheapest.params)) == SubnetConfig{1, 1});
  CHECK_THROWS_AS(select_config(t, cheapest.macs_per_second * 0.999, std::nullopt), BudgetError);
  try {
    select_config(t, std::nullopt, 1.0);
    FAIL("expected BudgetError");
  } catch (const BudgetError& e) {
    CHECK(e.min_params == cheapest.params);
    CHECK(e.min_macs == cheapest.macs_per_second);
  }
  CHECK_THROWS_AS(select_config(t, std::nullopt, std::nullopt), Error);
  // Width preference: the full-width shallow net beats the deep narrow one.
  const double budget = t.at(4, 1).macs_per_second;
  CHECK(select_config(t, budget, std::nullopt, Preference::kWidth).w == 4);
}

TEST_CASE("select agrees with a brute-force scan over 1000 random budgets") {
  std::mt19937_64 rng(99);
  for (const auto& cfg : {ModelConfig::desk(), ModelConfig::paper()}) {
    const auto t = enumerate_costs(cfg);
    const double max_macs = t.rows.back().macs_per_second * 1.1;
    const double max_params = static_cast<double>(t.rows.back().params) * 1.1;
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 1000; ++trial) {
      std::optional<double> macs, params;
      const int mode = trial % 3;
      if (mode != 1) macs = u(rng) * max_macs;
      if (mode != 0) params = u(rng) * max_params;
      const Preference pref = trial % 2 ? Preference::kWidth : Preference::kDepth;
      const auto expected = scan_select(t, macs, params, pref);
      if (expected.w == 0) {
        CHECK_THROWS_AS(select_config(t, macs, params, pref), BudgetError);
      } else {
        CHECK(select_config(t, macs, params, pref) == expected);
      }
    }
  }
}

TEST_CASE("select ignores row order") {
  const auto t = enumerate_costs(ModelConfig::desk());
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    auto shuffled = t;
    std::shuffle(shuffled.rows.begin(), shuffled.rows.end(), rng);
    const double budget = std::uniform_real_distribution<double>(t.rows.front().macs_per_second,
                                                                 t.rows.back().macs_per_second)(rng);
    for (auto pref : {Preference::kDepth, Preference::kWidth})
      CHECK(select_config(shuffled, budget, std::nullopt, pref) == select_config(t, budget, std::nullopt, pref));
  }
}

TEST_CASE("extracting the full configuration reproduces the checkpoint bytes") {
  const auto full = FullModelParams::init(ModelConfig::desk(), 1);
  CHECK(encode_checkpoint(extract_subnet(full, {4, 4})) == encode_checkpoint(full));
}

TEST_CASE("extracted parameter counts match the cost model") {
  for (const auto& cfg : {ModelConfig::desk(), ModelConfig::paper()}) {
    const auto full = FullModelParams::init(cfg, 2);
    const auto t = enumerate_costs(cfg);
    for (const auto& [w, d] : {std::pair<std::size_t, std::size_t>{1, 1}, {2, 3}, {cfg.max_width, cfg.max_depth}}) {
      CHECK(extract_subnet(full, {w, d}).parameter_count() == t.at(w, d).params);
    }
  }
}

TEST_CASE("extracted subnetworks compute exactly what the full network computes") {
  const auto full = FullModelParams::init(ModelConfig::desk(), 3);
  for (std::size_t d = 1; d <= 4; ++d)
    for (std::size_t w = 1; w <= 4; ++w) {
      const auto sub = extract_subnet(full, {w, d});
      CHECK(sub.config.max_width == w);
      CHECK(sub.config.max_depth == d);
      for (std::uint64_t seed = 0; seed < (w == 2 && d == 3 ? 50u : 3u); ++seed) {
        const auto x = random_spec(full.config, 1, 400 + 16 * seed, 100 + seed);
        CHECK(spec_diff(model_forward(x, full, w, d), model_forward(x, sub, w, d)) == 0.0);
      }
    }
  CHECK_THROWS_AS(extract_subnet(full, {5, 1}), Error);
  CHECK_THROWS_AS(extract_subnet(full, {1, 0}), Error);
}

TEST_CASE("extraction is idempotent and nested") {
  const auto full = FullModelParams::init(ModelConfig::desk(), 4);
  const auto once = extract_subnet(full, {2, 3});
  CHECK(encode_checkpoint(extract_subnet(once, {2, 3})) == encode_checkpoint(once));

  auto as_map = [](const FullModelParams& p) {
    std::map<std::string, std::vector<Scalar>> m;
    for (const auto& nt : p.named_parameters()) m[nt.name].assign(nt.tensor.data().begin(), nt.tensor.data().end());
    return m;
  };
  const auto small = as_map(extract_subnet(full, {1, 2}));
  const auto large = as_map(extract_subnet(full, {3, 3}));
  for (const auto& [name, values] : small) {
    INFO(name);
    REQUIRE(large.count(name) == 1);
    CHECK(large.at(name) == values);
  }
  CHECK(small.size() < large.size());
}

TEST_CASE("checkpoint round trip is byte-identical") {
  const auto p = FullModelParams::init(ModelConfig::desk(), 5);
  const auto bytes = encode_checkpoint(p);
  const auto back = decode_checkpoint(bytes);
  CHECK(encode_checkpoint(back) == bytes);
  CHECK(back.config == p.config);
  // Stored weights are float32.
  const auto a = p.named_parameters();
  const auto b = back.named_parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].name == b[i].name);
    for (std::size_t j = 0; j < a[i].tensor.numel(); ++j)
      CHECK(b[i].tensor.data()[j] == static_cast<Scalar>(static_cast<float>(a[i].tensor.data()[j])));
  }

  const auto path = scratch("roundtrip.dwdn");
  save_checkpoint(p, path);
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  CHECK(ss.str() == bytes);
  CHECK(encode_checkpoint(load_checkpoint(path)) == bytes);
}

TEST_CASE("every single-byte corruption is detected") {
  ModelConfig cfg = ModelConfig::desk();
  cfg.n = 4;
  cfg.h = 2;
  cfg.r = 3;
  cfg.h_tac = 2;
  cfg.max_width = 2;
  cfg.max_depth = 1;
  const auto bytes = encode_checkpoint(FullModelParams::init(cfg, 6));
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    auto bad = bytes;
    bad[i] = static_cast<char>(bad[i] ^ 0x5a);
    CHECK_THROWS_AS(decode_checkpoint(bad), CheckpointError);
    if (i >= 4) CHECK_THROWS_AS(decode_checkpoint(bad), ChecksumError);
  }
  CHECK_THROWS_AS(decode_checkpoint(bytes.substr(0, bytes.size() - 1)), CheckpointError);
  CHECK_THROWS_AS(decode_checkpoint(""), CheckpointError);
  CHECK_THROWS_AS(load_checkpoint(scratch("missing.dwdn")), CheckpointError);
}

namespace {

// Rewrites a field and recomputes the trailing CRC so only the field is wrong.
std::string resealed(std::string bytes, std::size_t offset, const std::string& field) {
  bytes.replace(offset, field.size(), field);
  const std::size_t body = bytes.size() - 4;
  auto crc = static_cast<std::uint32_t>(::crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(body)));
  for (int i = 0; i < 4; ++i) bytes[body + i] = static_cast<char>((crc >> (8 * i)) & 0xff);
  return bytes;
}

}  // namespace

TEST_CASE("version and shape mismatches are reported") {
  const auto p = FullModelParams::init(ModelConfig::desk(), 7);
  const auto bytes = encode_checkpoint(p);
  CHECK_THROWS_AS(decode_checkpoint(resealed(bytes, 4, std::string("\x02\x00\x00\x00", 4))), VersionError);

  // Claim a wider architecture than the stored arrays hold.
  const std::uint32_t config_len = static_cast<unsigned char>(bytes[8]) | static_cast<unsigned char>(bytes[9]) << 8;
  const std::string config = bytes.substr(12, config_len);
  const auto pos = config.find("n = 16");
  REQUIRE(pos != std::string::npos);
  try {
    decode_checkpoint(resealed(bytes, 12 + pos, "n = 17"));
    FAIL("expected CheckpointShapeError");
  } catch (const CheckpointShapeError& e) {
    CHECK(std::string(e.what()).find("shape") != std::string::npos);
  }
}

TEST_CASE("a saved extracted subnetwork keeps forward equivalence") {
  const auto full = load_checkpoint([] {
    const auto path = scratch("full.dwdn");
    save_checkpoint(FullModelParams::init(ModelConfig::desk(), 8), path);
    return path;
  }());
  const auto path = scratch("sub.dwdn");
  save_checkpoint(extract_subnet(full, {3, 2}), path);
  const auto sub = load_checkpoint(path);
  CHECK(sub.config.max_width == 3);
  CHECK(sub.config.max_depth == 2);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto x = random_spec(full.config, 2, 500, 200 + seed);
    CHECK(spec_diff(model_forward(x, full, 3, 2), model_forward(x, sub, 3, 2)) == 0.0);
  }
}

TEST_CASE("cost CSV layout") {
  auto t = enumerate_costs(ModelConfig::desk());
  t.at(2, 2).snr_db = 7.5;
  const auto path = scratch("costs.csv");
  write_cost_csv(path, t);
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  CHECK(line == "w,d,params,macs_per_s,snr_db");
  std::size_t rows = 0;
  bool saw_snr = false;
  while (std::getline(in, line)) {
    ++rows;
    if (line.rfind("2,2,", 0) == 0) saw_snr = line.substr(line.rfind(',') + 1) == "7.5";
    else CHECK(line.back() == ',');
  }
  CHECK(rows == 16);
  CHECK(saw_snr);
}
