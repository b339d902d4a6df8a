#include "dwdn/deploy.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "dwdn/config.hpp"

namespace dwdn {

const CostRow& CostTable::at(std::size_t w, std::size_t d) const {
  for (const auto& r : rows)
    if (r.w == w && r.d == d) return r;
  throw Error("cost table: no row for (w=" + std::to_string(w) + ", d=" + std::to_string(d) + ")");
}

CostRow& CostTable::at(std::size_t w, std::size_t d) {
  return const_cast<CostRow&>(static_cast<const CostTable&>(*this).at(w, d));
}

void CostTable::validate() const {
  if (rows.size() != max_width * max_depth) {
    throw Error("cost table: expected " + std::to_string(max_width * max_depth) + " rows, got " + std::to_string(rows.size()));
  }
  for (std::size_t d = 1; d <= max_depth; ++d) {
    for (std::size_t w = 1; w <= max_width; ++w) {
      const auto& r = at(w, d);
      for (const CostRow* prev : {w > 1 ? &at(w - 1, d) : nullptr, d > 1 ? &at(w, d - 1) : nullptr}) {
        if (prev && (r.params < prev->params || r.macs_per_second < prev->macs_per_second)) {
          throw Error("cost table: costs decrease at (w=" + std::to_string(w) + ", d=" + std::to_string(d) + ")");
        }
      }
    }
  }
}

CostTable enumerate_costs(const ModelConfig& config, std::optional<std::size_t> frames) {
  config.validate();
  const std::size_t t = frames.value_or(static_cast<std::size_t>(std::ceil(config.frames_per_second())));
  CostTable table;
  table.max_width = config.max_width;
  table.max_depth = config.max_depth;
  for (std::size_t d = 1; d <= config.max_depth; ++d) {
    for (std::size_t w = 1; w <= config.max_width; ++w) {
      const auto c = model_costs(config, w, d, t);
      table.rows.push_back({w, d, c.params, c.macs_per_second, std::nullopt});
    }
  }
  table.validate();
  return table;
}

SubnetConfig select_config(const CostTable& table, std::optional<double> max_macs, std::optional<double> max_params,
                           Preference prefer) {
  if (!max_macs && !max_params) throw Error("select_config: give at least one of max MACs or max params");
  if (table.rows.empty()) throw Error("select_config: empty cost table");
  const CostRow* best = nullptr;
  auto key = [prefer](const CostRow& r) {
    return prefer == Preference::kDepth ? std::pair{r.d, r.w} : std::pair{r.w, r.d};
  };
  std::size_t min_params = table.rows.front().params;
  double min_macs = table.rows.front().macs_per_second;
  for (const auto& r : table.rows) {
    min_params = std::min(min_params, r.params);
    min_macs = std::min(min_macs, r.macs_per_second);
    const bool fits = (!max_macs || r.macs_per_second <= *max_macs) &&
                      (!max_params || static_cast<double>(r.params) <= *max_params);
    if (fits && (!best || key(r) > key(*best))) best = &r;
  }
  if (!best) {
    std::ostringstream os;
    os << "budget too small: cheapest subnetwork needs " << min_params << " params and " << min_macs << " MACs/s";
    throw BudgetError(os.str(), min_params, min_macs);
  }
  return {best->w, best->d};
}

FullModelParams extract_subnet(const FullModelParams& full, SubnetConfig sub) {
  check_subnet(full.config, sub.w, sub.d);
  FullModelParams p;
  p.config = full.config;
  p.config.max_width = sub.w;
  p.config.max_depth = sub.d;
  for (const auto& l : full.band_in) p.band_in.push_back(l.clone());
  for (std::size_t i = 0; i < sub.d; ++i) {
    const auto& u = full.units[i];
    DepthUnit c{u.sequence.slice_width(sub.w), {}};
    for (const auto& b : u.band) c.band.push_back(b.slice_width(sub.w));
    p.units.push_back(std::move(c));
  }
  for (const auto& l : full.mask_out) p.mask_out.push_back(l.clone());
  return p;
}

void write_cost_csv(const std::filesystem::path& path, const CostTable& table) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << "w,d,params,macs_per_s,snr_db\n";
  for (const auto& r : table.rows) {
    out << r.w << ',' << r.d << ',' << r.params << ',' << format_number(r.macs_per_second) << ',';
    if (r.snr_db) out << format_number(*r.snr_db);
    out << '\n';
  }
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[4] = {'D', 'W', 'D', 'N'};
constexpr std::uint8_t kDtypeF32 = 1;

void put_u8(std::string& out, std::uint8_t v) { out.push_back(static_cast<char>(v)); }
void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t crc32_of(const char* data, std::size_t len) {
  return static_cast<std::uint32_t>(::crc32(0L, reinterpret_cast<const Bytef*>(data), static_cast<uInt>(len)));
}

class Reader {
 public:
  Reader(const std::string& bytes, std::size_t end) : bytes_(bytes), end_(end) {}
  std::uint64_t uint(int width) {
    need(width);
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) v |= std::uint64_t(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += width;
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > end_) throw CheckpointError("checkpoint: truncated header");
  }
  const std::string& bytes_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

struct ArrayEntry {
  Shape shape;
  std::uint64_t offset;
  std::uint64_t length;
};

}  // namespace

std::string encode_checkpoint(const FullModelParams& params) {
  params.validate();
  const std::string config = format_key_values(model_key_values(params.config));
  const auto named = params.named_parameters();

  std::string payload;
  std::string directory;
  put_u32(directory, static_cast<std::uint32_t>(named.size()));
  for (const auto& [name, tensor] : named) {
    put_u32(directory, static_cast<std::uint32_t>(name.size()));
    directory += name;
    put_u8(directory, kDtypeF32);
    put_u32(directory, static_cast<std::uint32_t>(tensor.ndim()));
    for (auto d : tensor.shape()) put_u32(directory, static_cast<std::uint32_t>(d));
    put_u64(directory, payload.size());
    put_u64(directory, tensor.numel() * sizeof(float));
    for (auto v : tensor.data()) {
      const float f = static_cast<float>(v);
      std::uint32_t u;
      std::memcpy(&u, &f, 4);
      put_u32(payload, u);
    }
  }

  std::string out(kMagic, 4);
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(config.size()));
  out += config;
  out += directory;
  put_u64(out, payload.size());
  out += payload;
  put_u32(out, crc32_of(out.data(), out.size()));
  return out;
}

FullModelParams decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw CheckpointError("checkpoint: bad magic, not a DWDN file");
  }
  const std::size_t body = bytes.size() - 4;
  Reader crc_reader(bytes, bytes.size());
  crc_reader.str(body);
  const auto stored = static_cast<std::uint32_t>(crc_reader.uint(4));
  if (stored != crc32_of(bytes.data(), body)) throw ChecksumError("checkpoint: CRC-32 mismatch, file is corrupt");

  Reader in(bytes, body);
  in.str(4);
  const auto version = static_cast<std::uint32_t>(in.uint(4));
  if (version != kCheckpointVersion) {
    throw VersionError("checkpoint: unsupported format version " + std::to_string(version) + " (expected " +
                       std::to_string(kCheckpointVersion) + ")");
  }
  const std::string config_text = in.str(in.uint(4));
  ModelConfig config;
  try {
    config = model_from_key_values(parse_key_values(config_text));
    config.validate();
  } catch (const Error& e) {
    throw CheckpointError(std::string("checkpoint: invalid architecture block: ") + e.what());
  }

  std::map<std::string, ArrayEntry> arrays;
  const auto count = in.uint(4);
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = in.str(in.uint(4));
    const auto dtype = in.uint(1);
    if (dtype != kDtypeF32) throw CheckpointError("checkpoint: array '" + name + "' has unknown dtype");
    ArrayEntry e;
    const auto rank = in.uint(4);
    for (std::uint64_t r = 0; r < rank; ++r) e.shape.push_back(in.uint(4));
    e.offset = in.uint(8);
    e.length = in.uint(8);
    if (e.length != shape_numel(e.shape) * sizeof(float)) {
      throw CheckpointShapeError("checkpoint: array '" + name + "' byte length does not match its shape");
    }
    arrays.emplace(std::move(name), std::move(e));
  }
  const auto payload_len = in.uint(8);
  const std::size_t payload_start = in.pos();
  if (payload_start + payload_len != body) throw CheckpointError("checkpoint: payload length mismatch");

  // Skeleton from the embedded architecture, then overwrite every array.
  FullModelParams params = FullModelParams::init(config, 0);
  const auto named = params.named_parameters();
  if (named.size() != arrays.size()) {
    throw CheckpointShapeError("checkpoint: holds " + std::to_string(arrays.size()) + " arrays, architecture needs " +
                               std::to_string(named.size()));
  }
  for (const auto& [name, tensor] : named) {
    auto it = arrays.find(name);
    if (it == arrays.end()) throw CheckpointShapeError("checkpoint: missing array '" + name + "'");
    const auto& e = it->second;
    if (e.shape != tensor.shape()) {
      throw CheckpointShapeError("checkpoint: array '" + name + "' has shape " + shape_str(e.shape) +
                                 ", architecture expects " + shape_str(tensor.shape()));
    }
    if (e.offset + e.length > payload_len) throw CheckpointError("checkpoint: array '" + name + "' exceeds payload");
    Tensor t = tensor;
    auto data = t.mutable_data();
    const char* src = bytes.data() + payload_start + e.offset;
    for (std::size_t j = 0; j < data.size(); ++j) {
      float f;
      std::memcpy(&f, src + 4 * j, 4);
      data[j] = static_cast<Scalar>(f);
    }
  }
  return params;
}

void save_checkpoint(const FullModelParams& params, const std::filesystem::path& path) {
  const std::string bytes = encode_checkpoint(params);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("checkpoint: cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("checkpoint: write failed for " + path.string());
}

FullModelParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("checkpoint: cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str());
}

}  // namespace dwdn
