#include "pixproto/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "pixproto/config_io.hpp"

namespace pixproto {

static_assert(std::endian::native == std::endian::little, "checkpoint format assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'P', 'X', 'P', 'R', 'O', 'T', 'O', '\0'};

class Writer {
 public:
  template <class T>
  void pod(const T& v) {
    static_assert(std::is_trivially_copyable_v<T>);
    buf_.append(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  void bytes(const void* p, std::size_t n) { buf_.append(static_cast<const char*>(p), n); }
  void doubles(std::span<const double> xs) {
    pod<std::uint64_t>(xs.size());
    bytes(xs.data(), xs.size() * sizeof(double));
  }
  void string(const std::string& s) {
    pod<std::uint64_t>(s.size());
    bytes(s.data(), s.size());
  }
  std::string& str() { return buf_; }

 private:
  std::string buf_;
};

class Cursor {
 public:
  Cursor(const char* p, std::size_t n) : p_(p), end_(p + n) {}

  template <class T>
  T pod() {
    T v;
    need(sizeof(T));
    std::memcpy(&v, p_, sizeof(T));
    p_ += sizeof(T);
    return v;
  }
  void doubles_into(std::span<double> out, const char* what) {
    const auto n = pod<std::uint64_t>();
    if (n != out.size()) throw CheckpointError(std::string("checkpoint: size mismatch in ") + what);
    need(n * sizeof(double));
    std::memcpy(out.data(), p_, n * sizeof(double));
    p_ += n * sizeof(double);
  }
  std::vector<double> doubles(std::size_t expected, const char* what) {
    std::vector<double> v(expected);
    doubles_into(v, what);
    return v;
  }
  std::string string() {
    const auto n = pod<std::uint64_t>();
    need(n);
    std::string s(p_, n);
    p_ += n;
    return s;
  }
  void bytes_into(std::uint8_t* out, std::size_t n) {
    need(n);
    std::memcpy(out, p_, n);
    p_ += n;
  }
  bool done() const { return p_ == end_; }

 private:
  void need(std::size_t n) const {
    if (static_cast<std::size_t>(end_ - p_) < n) throw CheckpointError("checkpoint: truncated payload");
  }
  const char* p_;
  const char* end_;
};

void write_params(Writer& w, const EncoderParams& params) {
  const auto ts = params.tensors();
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(ts.size()));
  for (auto t : ts) w.doubles(t);
}

void read_params(Cursor& c, EncoderParams& params, const char* what) {
  auto ts = params.tensors();
  if (c.pod<std::uint32_t>() != ts.size()) throw CheckpointError(std::string("checkpoint: tensor count mismatch in ") + what);
  for (auto t : ts) c.doubles_into(t, what);
}

void write_bank(Writer& w, const PrototypeBank& bank) {
  w.pod<std::int32_t>(bank.classes());
  w.pod<std::int32_t>(bank.dim());
  w.pod<double>(bank.momentum());
  for (int c = 0; c < bank.classes(); ++c) {
    w.pod<std::uint8_t>(bank.initialized(c) ? 1 : 0);
    w.doubles(bank.raw(c));
  }
}

void read_bank(Cursor& c, PrototypeBank& bank) {
  const auto classes = c.pod<std::int32_t>();
  const auto dim = c.pod<std::int32_t>();
  const auto momentum = c.pod<double>();
  if (classes != bank.classes() || dim != bank.dim() || momentum != bank.momentum()) {
    throw CheckpointError("checkpoint: prototype bank shape disagrees with the stored config");
  }
  for (int k = 0; k < classes; ++k) {
    const auto init = c.pod<std::uint8_t>();
    if (init > 1) throw CheckpointError("checkpoint: bad bank flag");
    const auto mu = c.doubles(static_cast<std::size_t>(dim), "prototype bank");
    bank.restore(k, mu, init == 1);
  }
}

}  // namespace

std::string serialize_checkpoint(const TrainConfig& cfg, const TrainState& state) {
  Writer payload;
  payload.string(dump_config(cfg));
  payload.pod<std::int64_t>(state.iteration);
  write_params(payload, state.params);
  write_params(payload, state.sgd.velocity);
  write_bank(payload, state.bank_source);
  write_bank(payload, state.bank_target);
  payload.pod<std::uint64_t>(state.static_store.size());
  for (const auto& m : state.static_store) {
    payload.pod<std::int32_t>(m.height);
    payload.pod<std::int32_t>(m.width);
    payload.pod<std::int32_t>(m.classes);
    payload.bytes(m.data.data(), m.data.size());
  }

  Writer out;
  out.bytes(kMagic, sizeof(kMagic));
  out.pod<std::uint32_t>(kCheckpointVersion);
  out.pod<std::uint64_t>(payload.str().size());
  out.bytes(payload.str().data(), payload.str().size());
  out.pod<std::uint64_t>(fnv1a64(payload.str().data(), payload.str().size()));
  return std::move(out.str());
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
  Cursor head(bytes.data(), bytes.size());
  char magic[8];
  for (char& ch : magic) ch = head.pod<char>();
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw CheckpointError("checkpoint: bad magic");
  const auto version = head.pod<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw CheckpointError("checkpoint: unsupported version " + std::to_string(version));
  }
  const auto size = head.pod<std::uint64_t>();
  const std::size_t header = sizeof(kMagic) + sizeof(std::uint32_t) + sizeof(std::uint64_t);
  if (bytes.size() != header + size + sizeof(std::uint64_t)) throw CheckpointError("checkpoint: truncated or padded file");
  const char* payload = bytes.data() + header;
  std::uint64_t stored;
  std::memcpy(&stored, payload + size, sizeof(stored));
  if (fnv1a64(payload, size) != stored) throw CheckpointError("checkpoint: checksum mismatch");

  Cursor c(payload, size);
  TrainConfig cfg;
  try {
    cfg = parse_config(c.string());
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("checkpoint: stored config invalid: ") + e.what());
  }
  const int classes = cfg.encoder.classes;
  const int dim = cfg.encoder.feature_dim();
  TrainState state{EncoderParams::zeros(cfg.encoder),
                   SgdState(cfg.encoder),
                   PrototypeBank(classes, dim, cfg.ema_momentum),
                   PrototypeBank(classes, dim, cfg.ema_momentum),
                   {},
                   0};
  state.iteration = c.pod<std::int64_t>();
  read_params(c, state.params, "parameters");
  read_params(c, state.sgd.velocity, "momentum buffers");
  read_bank(c, state.bank_source);
  read_bank(c, state.bank_target);
  const auto n_maps = c.pod<std::uint64_t>();
  if (n_maps != static_cast<std::uint64_t>(cfg.n_target)) throw CheckpointError("checkpoint: static label store size mismatch");
  for (std::uint64_t i = 0; i < n_maps; ++i) {
    const auto h = c.pod<std::int32_t>();
    const auto w = c.pod<std::int32_t>();
    const auto k = c.pod<std::int32_t>();
    if (h != cfg.scene.height || w != cfg.scene.width || k != classes) {
      throw CheckpointError("checkpoint: static label map shape mismatch");
    }
    LabelMap m(h, w, k);
    c.bytes_into(m.data.data(), m.data.size());
    try {
      m.validate();
    } catch (const ContractViolation& e) {
      throw CheckpointError(std::string("checkpoint: bad static labels: ") + e.what());
    }
    state.static_store.push_back(std::move(m));
  }
  if (!c.done()) throw CheckpointError("checkpoint: trailing payload bytes");
  return Checkpoint{std::move(cfg), std::move(state)};
}

void save_checkpoint(const std::filesystem::path& path, const TrainConfig& cfg, const TrainState& state) {
  const std::string bytes = serialize_checkpoint(cfg, state);
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw CheckpointError("checkpoint: cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("checkpoint: write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("checkpoint: cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize_checkpoint(ss.str());
}

}  // namespace pixproto
