#ifndef MDTS_CHECKPOINT_HPP
#define MDTS_CHECKPOINT_HPP

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <openssl/sha.h>

#include "json.hpp"
#include "mdts/finetune.hpp"
#include "mdts/training.hpp"

namespace mdts {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr char kCheckpointMagic[8] = {'M', 'D', 'T', 'S', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

using Digest = std::array<unsigned char, SHA256_DIGEST_LENGTH>;

inline Digest sha256(const void* data, std::size_t n) {
  Digest d{};
  SHA256(static_cast<const unsigned char*>(data), n, d.data());
  return d;
}

inline std::string hex(const Digest& d) {
  static const char* digits = "0123456789abcdef";
  std::string s;
  for (unsigned char c : d) {
    s += digits[c >> 4];
    s += digits[c & 15];
  }
  return s;
}

inline nlohmann::json to_json(const StackConfig& s) {
  return {{"layers", s.layers}, {"dim", s.dim}, {"mlp", s.mlp}, {"heads", s.heads}, {"head_dim", s.head_dim}};
}

inline StackConfig stack_from_json(const nlohmann::json& j) {
  return {j.at("layers").get<int>(), j.at("dim").get<int>(), j.at("mlp").get<int>(), j.at("heads").get<int>(),
          j.at("head_dim").get<int>()};
}

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"variant", c.variant},
          {"patch_size", c.patch_size},
          {"context_length", c.context_length},
          {"encoder", to_json(c.encoder)},
          {"decoder", to_json(c.decoder)}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.variant = j.at("variant").get<std::string>();
  c.patch_size = j.at("patch_size").get<int>();
  c.context_length = j.at("context_length").get<int>();
  c.encoder = stack_from_json(j.at("encoder"));
  c.decoder = stack_from_json(j.at("decoder"));
  return c;
}

template <typename S>
struct Checkpoint {
  Model<S> model;
  std::optional<TaskHead<S>> head;
  AdamW<S> optimizer;
  nlohmann::json config = nlohmann::json::object();  // resolved run configuration
  TrainState state;
  std::uint64_t seed = 0;
};

namespace detail {

class Writer {
 public:
  std::string buf;

  void bytes(const void* p, std::size_t n) { buf.append(static_cast<const char*>(p), n); }
  template <typename T>
  void pod(T v) {
    static_assert(std::is_integral_v<T>);
    for (std::size_t i = 0; i < sizeof(T); ++i) buf += static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff);
  }
  void str(const std::string& s) {
    pod<std::uint64_t>(s.size());
    bytes(s.data(), s.size());
  }
  template <typename S>
  void floats(const Matrix<S>& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      const float f = static_cast<float>(m.data()[i]);
      pod<std::uint32_t>(std::bit_cast<std::uint32_t>(f));
    }
  }
  template <typename S>
  void blob(const std::string& name, const Matrix<S>& m) {
    str(name);
    pod<std::uint64_t>(static_cast<std::uint64_t>(m.rows()));
    pod<std::uint64_t>(static_cast<std::uint64_t>(m.cols()));
    floats(m);
  }
};

class Reader {
 public:
  Reader(const std::string& b, std::size_t end) : buf_(b), end_(end) {}

  void need(std::size_t n) const {
    if (pos_ + n > end_) throw CheckpointError("checkpoint truncated");
  }
  void bytes(void* p, std::size_t n) {
    need(n);
    std::memcpy(p, buf_.data() + pos_, n);
    pos_ += n;
  }
  template <typename T>
  T pod() {
    need(sizeof(T));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
    pos_ += sizeof(T);
    return static_cast<T>(v);
  }
  std::string str() {
    const auto n = pod<std::uint64_t>();
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  template <typename S>
  Matrix<S> blob(std::string& name) {
    name = str();
    const auto r = pod<std::uint64_t>(), c = pod<std::uint64_t>();
    if (r > (1u << 30) || c > (1u << 30)) throw CheckpointError("checkpoint blob '" + name + "' has an absurd shape");
    return floats<S>(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
  }
  template <typename S>
  Matrix<S> floats(Eigen::Index r, Eigen::Index c) {
    need(static_cast<std::size_t>(r * c) * 4);
    Matrix<S> m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(std::bit_cast<float>(pod<std::uint32_t>()));
    return m;
  }
  std::size_t pos() const { return pos_; }

 private:
  const std::string& buf_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

inline nlohmann::json state_to_json(const TrainState& s) {
  nlohmann::json hist = nlohmann::json::array();
  for (const auto& r : s.history)
    hist.push_back({{"epoch", r.epoch}, {"split", r.split}, {"mse", r.mse}, {"ncc", r.ncc}, {"total", r.total}, {"lr", r.lr}});
  return {{"step", s.step},           {"epoch_mse", s.epoch_mse},     {"epoch_ncc", s.epoch_ncc},
          {"epoch_total", s.epoch_total}, {"epoch_batches", s.epoch_batches}, {"history", hist},
          {"step_losses", s.step_losses}};
}

inline TrainState state_from_json(const nlohmann::json& j) {
  TrainState s;
  s.step = j.at("step").get<long>();
  s.epoch_mse = j.at("epoch_mse").get<double>();
  s.epoch_ncc = j.at("epoch_ncc").get<double>();
  s.epoch_total = j.at("epoch_total").get<double>();
  s.epoch_batches = j.at("epoch_batches").get<long>();
  for (const auto& r : j.at("history"))
    s.history.push_back({r.at("epoch").get<int>(), r.at("split").get<std::string>(), r.at("mse").get<double>(),
                         r.at("ncc").get<double>(), r.at("total").get<double>(), r.at("lr").get<double>()});
  s.step_losses = j.at("step_losses").get<std::vector<double>>();
  return s;
}

}  // namespace detail

/// Serialised checkpoint bytes. Parameters, moments and all floating state
/// that is not a parameter travel as f32 little-endian blobs or exact JSON.
template <typename S>
std::string serialize_checkpoint(Checkpoint<S>& ck) {
  nlohmann::json meta;
  meta["model"] = to_json(ck.model.config);
  meta["config"] = ck.config;
  meta["seed"] = ck.seed;
  meta["state"] = detail::state_to_json(ck.state);
  nlohmann::json reg = nlohmann::json::array();
  for (const auto& [name, e] : ck.model.registry.entries())
    reg.push_back({{"name", name}, {"catalogue", e.catalogue}, {"multivariate", e.multivariate}, {"frequency", e.frequency}});
  meta["registry"] = reg;
  if (ck.head) meta["head"] = {{"kind", task_name(ck.head->kind)}, {"outputs", ck.head->outputs}, {"horizon", ck.head->horizon}};
  meta["adam"] = {{"beta1", ck.optimizer.beta1}, {"beta2", ck.optimizer.beta2}, {"eps", ck.optimizer.eps}, {"counts", ck.optimizer.counts}};

  const std::string config_text = ck.config.dump();
  const Digest cfg_digest = sha256(config_text.data(), config_text.size());

  detail::Writer w;
  w.bytes(kCheckpointMagic, sizeof kCheckpointMagic);
  w.pod<std::uint32_t>(kCheckpointVersion);
  w.bytes(cfg_digest.data(), cfg_digest.size());
  w.str(meta.dump());

  std::vector<std::pair<std::string, ad::Parameter<S>*>> params;
  ck.model.visit([&](const std::string& n, ad::Parameter<S>& p) { params.emplace_back(n, &p); });
  if (ck.head) ck.head->visit([&](const std::string& n, ad::Parameter<S>& p) { params.emplace_back(n, &p); });
  w.pod<std::uint64_t>(params.size());
  for (const auto& [n, p] : params) w.blob(n, p->value);

  w.pod<std::uint64_t>(ck.optimizer.moments.size());
  for (const auto& [n, m] : ck.optimizer.moments) {
    w.blob(n, m.m);
    w.floats(m.v);
  }
  const Digest content = sha256(w.buf.data(), w.buf.size());
  w.bytes(content.data(), content.size());
  return std::move(w.buf);
}

template <typename S>
Checkpoint<S> deserialize_checkpoint(const std::string& buf) {
  constexpr std::size_t header = sizeof kCheckpointMagic + 4 + SHA256_DIGEST_LENGTH;
  if (buf.size() < sizeof kCheckpointMagic || std::memcmp(buf.data(), kCheckpointMagic, sizeof kCheckpointMagic) != 0)
    throw CheckpointError("not a checkpoint file (bad magic)");
  if (buf.size() < header + SHA256_DIGEST_LENGTH) throw CheckpointError("checkpoint truncated (digest mismatch)");
  {
    detail::Reader r(buf, buf.size());
    char magic[8];
    r.bytes(magic, 8);
    const auto version = r.pod<std::uint32_t>();
    if (version != kCheckpointVersion)
      throw CheckpointError("checkpoint format version " + std::to_string(version) + " is not supported (expected " +
                            std::to_string(kCheckpointVersion) + ")");
  }
  const std::size_t body = buf.size() - SHA256_DIGEST_LENGTH;
  const Digest actual = sha256(buf.data(), body);
  if (std::memcmp(actual.data(), buf.data() + body, SHA256_DIGEST_LENGTH) != 0)
    throw CheckpointError("checkpoint content digest mismatch (file corrupted or truncated)");

  detail::Reader r(buf, body);
  char magic[8];
  r.bytes(magic, 8);
  r.pod<std::uint32_t>();
  Digest cfg_digest{};
  r.bytes(cfg_digest.data(), cfg_digest.size());
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(r.str());
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint metadata unreadable: ") + e.what());
  }

  Checkpoint<S> ck;
  ck.config = meta.at("config");
  const std::string config_text = ck.config.dump();
  if (sha256(config_text.data(), config_text.size()) != cfg_digest) throw CheckpointError("checkpoint config digest mismatch");
  ck.seed = meta.at("seed").get<std::uint64_t>();
  ck.state = detail::state_from_json(meta.at("state"));
  Rng dummy(0);
  ck.model = Model<S>(model_config_from_json(meta.at("model")), dummy);
  for (const auto& e : meta.at("registry")) {
    typename DomainRegistry<S>::Entry entry;
    entry.catalogue = e.at("catalogue").get<std::vector<std::string>>();
    entry.multivariate = e.at("multivariate").get<bool>();
    entry.frequency = e.at("frequency").get<double>();
    entry.table = {Matrix<S>::Zero(static_cast<Eigen::Index>(entry.catalogue.size()), ck.model.config.encoder.dim), false};
    ck.model.registry.restore(e.at("name").get<std::string>(), std::move(entry));
  }
  if (meta.contains("head")) {
    const auto& h = meta["head"];
    ck.head.emplace(parse_task(h.at("kind").get<std::string>()), ck.model.config.encoder.dim, h.at("outputs").get<int>(),
                    h.at("horizon").get<int>(), dummy);
  }
  const auto& adam = meta.at("adam");
  ck.optimizer.beta1 = adam.at("beta1").get<double>();
  ck.optimizer.beta2 = adam.at("beta2").get<double>();
  ck.optimizer.eps = adam.at("eps").get<double>();
  ck.optimizer.counts = adam.at("counts").get<std::map<std::string, long>>();

  std::map<std::string, ad::Parameter<S>*> params;
  ck.model.visit([&](const std::string& n, ad::Parameter<S>& p) { params[n] = &p; });
  if (ck.head) ck.head->visit([&](const std::string& n, ad::Parameter<S>& p) { params[n] = &p; });
  const auto n_params = r.pod<std::uint64_t>();
  if (n_params != params.size())
    throw CheckpointError("checkpoint holds " + std::to_string(n_params) + " parameters, model expects " + std::to_string(params.size()));
  for (std::uint64_t i = 0; i < n_params; ++i) {
    std::string name;
    Matrix<S> value = r.blob<S>(name);
    auto it = params.find(name);
    if (it == params.end()) throw CheckpointError("checkpoint parameter '" + name + "' unknown to the model");
    if (value.rows() != it->second->value.rows() || value.cols() != it->second->value.cols())
      throw CheckpointError("checkpoint parameter '" + name + "' has the wrong shape");
    it->second->value = std::move(value);
  }
  const auto n_moments = r.pod<std::uint64_t>();
  for (std::uint64_t i = 0; i < n_moments; ++i) {
    std::string name;
    AdamMoments<S> m;
    m.m = r.blob<S>(name);
    m.v = r.floats<S>(m.m.rows(), m.m.cols());
    ck.optimizer.moments.emplace(name, std::move(m));
  }
  if (r.pos() != body) throw CheckpointError("checkpoint has trailing bytes");
  return ck;
}

template <typename S>
void save_checkpoint(Checkpoint<S>& ck, const std::string& path) {
  const std::string bytes = serialize_checkpoint(ck);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw CheckpointError("cannot write checkpoint '" + path + "'");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw CheckpointError("failed writing checkpoint '" + path + "'");
}

template <typename S>
Checkpoint<S> load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open checkpoint '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint<S>(bytes);
}

}  // namespace mdts

#endif  // MDTS_CHECKPOINT_HPP
