// "SPKC" checkpoint container, little-endian:
//
//   magic "SPKC", u16 version
//   u32 config pair count, then (u32 len, key bytes, u32 len, value bytes) each
//   u64 rounds done, u32 clients, u64 parameter dim
//   per client: dim f64 weights, dim f64 velocity, f64 mu, u64 epoch, u64 cursor
//   u64 metric rows, then one record per completed round
//   u64 FNV-1a of everything above

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "spark/errors.hpp"
#include "spark/simulator.hpp"

namespace spark::sim {

namespace {

constexpr char kMagic[4] = {'S', 'P', 'K', 'C'};
constexpr std::uint16_t kCheckpointVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

std::uint64_t fnv1a(const std::uint8_t* p, std::size_t n) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

class Out {
 public:
  template <typename T>
  void put(T v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    buf.insert(buf.end(), p, p + sizeof(T));
  }
  void str(const std::string& s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    buf.insert(buf.end(), s.begin(), s.end());
  }
  void vec(const Vector& v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(v.data());
    buf.insert(buf.end(), p, p + v.size() * sizeof(double));
  }
  std::vector<std::uint8_t> buf;
};

class In {
 public:
  explicit In(std::span<const std::uint8_t> b) : buf_(b) {}
  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, buf_.data() + at_, sizeof(T));
    at_ += sizeof(T);
    return v;
  }
  std::string str() {
    const auto n = get<std::uint32_t>();
    need(n);
    std::string s(reinterpret_cast<const char*>(buf_.data() + at_), n);
    at_ += n;
    return s;
  }
  Vector vec(std::size_t n) {
    need(n * sizeof(double));
    Vector v(static_cast<Eigen::Index>(n));
    std::memcpy(v.data(), buf_.data() + at_, n * sizeof(double));
    at_ += n * sizeof(double);
    return v;
  }
  std::size_t offset() const noexcept { return at_; }

 private:
  void need(std::size_t n) const {
    if (buf_.size() - at_ < n) throw CheckpointError("checkpoint is truncated at byte " + std::to_string(at_));
  }
  std::span<const std::uint8_t> buf_;
  std::size_t at_ = 0;
};

void put_metrics(Out& o, const RoundMetrics& m) {
  o.put<std::uint64_t>(m.round);
  o.put(m.agg_accuracy);
  o.put(m.agg_loss);
  o.put(m.client_accuracy);
  o.put(m.train_loss);
  o.put<std::uint64_t>(m.bytes_sent);
  o.put<std::uint64_t>(m.messages);
  o.put(m.mean_t_star);
  o.put<std::uint64_t>(m.truncated);
  o.put<std::uint64_t>(m.components);
  o.put(m.wall_seconds);
  o.put<std::uint8_t>(m.grad_norm_sq ? 1 : 0);
  o.put(m.grad_norm_sq.value_or(0.0));
  o.put<std::uint8_t>(m.step_norm ? 1 : 0);
  o.put(m.step_norm.value_or(0.0));
  o.put<std::uint64_t>(m.client_bytes.size());
  for (const auto b : m.client_bytes) o.put<std::uint64_t>(b);
}

RoundMetrics get_metrics(In& in) {
  RoundMetrics m;
  m.round = in.get<std::uint64_t>();
  m.agg_accuracy = in.get<double>();
  m.agg_loss = in.get<double>();
  m.client_accuracy = in.get<double>();
  m.train_loss = in.get<double>();
  m.bytes_sent = in.get<std::uint64_t>();
  m.messages = in.get<std::uint64_t>();
  m.mean_t_star = in.get<double>();
  m.truncated = in.get<std::uint64_t>();
  m.components = in.get<std::uint64_t>();
  m.wall_seconds = in.get<double>();
  const bool has_grad = in.get<std::uint8_t>() != 0;
  const double grad = in.get<double>();
  if (has_grad) m.grad_norm_sq = grad;
  const bool has_step = in.get<std::uint8_t>() != 0;
  const double step = in.get<double>();
  if (has_step) m.step_norm = step;
  const auto n = in.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < n; ++i) m.client_bytes.push_back(in.get<std::uint64_t>());
  return m;
}

struct Parsed {
  RunConfig cfg;
  std::uint64_t rounds_done = 0;
  std::vector<ClientState> clients;
  std::vector<RoundMetrics> history;
};

Parsed parse(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (bytes.size() < 6 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw CheckpointError(path.string() + " is not a checkpoint (bad magic)");
  }
  In in(bytes);
  in.get<std::uint32_t>();
  const auto version = in.get<std::uint16_t>();
  if (version != kCheckpointVersion) {
    throw CheckpointError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  }
  if (bytes.size() < 14) throw CheckpointError("checkpoint is truncated");
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + bytes.size() - 8, 8);
  if (fnv1a(bytes.data(), bytes.size() - 8) != stored) throw CheckpointError("checkpoint checksum mismatch");

  Parsed p;
  const auto pairs = in.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < pairs; ++i) {
    const auto key = in.str();
    const auto value = in.str();
    try {
      set_key(p.cfg, key, value);
    } catch (const ConfigError& e) {
      throw CheckpointError(std::string("checkpoint config: ") + e.what());
    }
  }
  p.rounds_done = in.get<std::uint64_t>();
  const auto clients = in.get<std::uint32_t>();
  const auto dim = in.get<std::uint64_t>();
  if (clients != p.cfg.clients || dim != p.cfg.arch.parameter_count()) {
    throw CheckpointError("checkpoint state does not match its own config");
  }
  for (std::uint32_t i = 0; i < clients; ++i) {
    ClientState c;
    c.weights = model::WeightVector(p.cfg.arch, in.vec(dim));
    c.momentum.velocity = in.vec(dim);
    c.momentum.mu = in.get<double>();
    c.epoch = in.get<std::uint64_t>();
    c.cursor = in.get<std::uint64_t>();
    p.clients.push_back(std::move(c));
  }
  const auto rows = in.get<std::uint64_t>();
  if (rows != p.rounds_done) throw CheckpointError("checkpoint metric rows disagree with the round counter");
  for (std::uint64_t i = 0; i < rows; ++i) p.history.push_back(get_metrics(in));
  if (in.offset() + 8 != bytes.size()) throw CheckpointError("checkpoint has trailing bytes");
  return p;
}

}  // namespace

void Simulator::save_checkpoint(const std::filesystem::path& path) const {
  Out o;
  o.buf.insert(o.buf.end(), kMagic, kMagic + 4);
  o.put(kCheckpointVersion);
  const auto pairs = to_pairs(cfg_);
  o.put<std::uint32_t>(static_cast<std::uint32_t>(pairs.size()));
  for (const auto& [k, v] : pairs) {
    o.str(k);
    o.str(v);
  }
  o.put<std::uint64_t>(rounds_done());
  o.put<std::uint32_t>(static_cast<std::uint32_t>(clients_.size()));
  o.put<std::uint64_t>(cfg_.arch.parameter_count());
  for (const auto& c : clients_) {
    o.vec(c.weights.values());
    o.vec(c.momentum.velocity);
    o.put(c.momentum.mu);
    o.put<std::uint64_t>(c.epoch);
    o.put<std::uint64_t>(c.cursor);
  }
  o.put<std::uint64_t>(history_.size());
  for (const auto& m : history_) put_metrics(o, m);
  o.put(fnv1a(o.buf.data(), o.buf.size()));

  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError("cannot write checkpoint " + tmp);
    os.write(reinterpret_cast<const char*>(o.buf.data()), static_cast<std::streamsize>(o.buf.size()));
    if (!os) throw CheckpointError("short write to " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Simulator Simulator::restore(const std::filesystem::path& path) {
  auto p = parse(path);
  Simulator sim(p.cfg);
  sim.clients_ = std::move(p.clients);
  sim.history_ = std::move(p.history);
  return sim;
}

Simulator Simulator::restore(const std::filesystem::path& path, Workload workload) {
  auto p = parse(path);
  Simulator sim(p.cfg, std::move(workload));
  sim.clients_ = std::move(p.clients);
  sim.history_ = std::move(p.history);
  return sim;
}

}  // namespace spark::sim
