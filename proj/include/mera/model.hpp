#pragma once

// Small decoder-only transformer (pre-LayerNorm, learned absolute positions,
// untied output projection) and its checkpoint container.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "mera/autodiff.hpp"
#include "mera/error.hpp"
#include "mera/rng.hpp"
#include "mera/vocabulary.hpp"

namespace mera {

using ad::Matrix;

struct ModelConfig {
  int vocab_size = 0;
  int d_model = 128;
  int n_layers = 2;
  int n_heads = 4;
  int d_ff = 512;
  int max_seq_len = 512;
  double dropout = 0.0;
  std::uint64_t init_seed = 1;

  void validate() const {
    if (vocab_size <= 0 || d_model <= 0 || n_layers <= 0 || n_heads <= 0 || d_ff <= 0 || max_seq_len <= 0) {
      throw ValidationError("model: sizes must be positive");
    }
    if (d_model % n_heads != 0) throw ValidationError("model: d_model must be divisible by n_heads");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ValidationError("model: dropout must be in [0,1)");
  }
  bool operator==(const ModelConfig&) const = default;
};

/// Named tensors in a fixed order; addresses are stable after construction.
class ParameterStore {
 public:
  ParameterStore() = default;
  explicit ParameterStore(std::vector<ad::Tensor> tensors) : tensors_(std::move(tensors)) {
    for (std::size_t i = 0; i < tensors_.size(); ++i) index_[tensors_[i].name] = i;
  }

  std::vector<ad::Tensor>& tensors() { return tensors_; }
  const std::vector<ad::Tensor>& tensors() const { return tensors_; }

  ad::Tensor& at(const std::string& name) { return tensors_.at(lookup(name)); }
  const ad::Tensor& at(const std::string& name) const { return tensors_.at(lookup(name)); }
  bool contains(const std::string& name) const { return index_.contains(name); }

  void zero_grad() {
    for (auto& t : tensors_) t.zero_grad();
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += static_cast<std::size_t>(t.value.size());
    return n;
  }

  bool all_finite() const {
    for (const auto& t : tensors_) {
      if (!t.value.allFinite()) return false;
    }
    return true;
  }

  bool same_values(const ParameterStore& other) const {
    if (tensors_.size() != other.tensors_.size()) return false;
    for (std::size_t i = 0; i < tensors_.size(); ++i) {
      if (tensors_[i].name != other.tensors_[i].name || tensors_[i].value.rows() != other.tensors_[i].value.rows() ||
          tensors_[i].value.cols() != other.tensors_[i].value.cols() || tensors_[i].value != other.tensors_[i].value) {
        return false;
      }
    }
    return true;
  }

 private:
  std::size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ValidationError("no parameter named " + name);
    return it->second;
  }

  std::vector<ad::Tensor> tensors_;
  std::map<std::string, std::size_t> index_;
};

/// Per-call forward options. Dropout draws come from `rng` in training mode.
struct ForwardMode {
  bool training = false;
  Rng* rng = nullptr;
};

class Transformer {
 public:
  Transformer() = default;

  explicit Transformer(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    init_parameters();
  }

  Transformer(const ModelConfig& cfg, ParameterStore params) : cfg_(cfg), params_(std::move(params)) {
    cfg_.validate();
    Transformer reference(cfg_);
    if (params_.tensors().size() != reference.params_.tensors().size()) {
      throw ValidationError("checkpoint tensors do not match the model configuration");
    }
    for (std::size_t i = 0; i < params_.tensors().size(); ++i) {
      const auto& got = params_.tensors()[i];
      const auto& want = reference.params_.tensors()[i];
      if (got.name != want.name || got.value.rows() != want.value.rows() || got.value.cols() != want.value.cols()) {
        throw ValidationError("checkpoint tensor " + got.name + " has the wrong name or shape");
      }
    }
  }

  const ModelConfig& config() const { return cfg_; }
  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }

  /// Logits (len x vocab) recorded on `tape`; gradients reach this model's
  /// parameter buffers when the tape records.
  ad::Var forward(ad::Tape& tape, std::span<const int> ids, ForwardMode mode = {}) {
    return forward_impl<ad::Tensor&>(tape, ids, mode, params_);
  }

  /// Eval-mode forward without gradient recording. Safe for concurrent callers.
  Matrix logits(std::span<const int> ids) const {
    ad::Tape tape(false);
    const ad::Var out = forward_impl<const ad::Tensor&>(tape, ids, ForwardMode{}, params_);
    return tape.value(out);
  }

  /// Logits for the token following `ids`.
  std::vector<double> next_logits(std::span<const int> ids) const {
    const Matrix all = logits(ids);
    const auto row = all.row(all.rows() - 1);
    return std::vector<double>(row.data(), row.data() + row.size());
  }

 private:
  template <class TensorRef, class Store>
  ad::Var forward_impl(ad::Tape& tape, std::span<const int> ids, ForwardMode mode, Store& store) const {
    const int len = static_cast<int>(ids.size());
    if (len == 0) throw ValidationError("forward on an empty sequence");
    if (len > cfg_.max_seq_len) {
      throw ValidationError("sequence length " + std::to_string(len) + " exceeds max_seq_len " +
                            std::to_string(cfg_.max_seq_len));
    }
    for (int id : ids) {
      if (id < 0 || id >= cfg_.vocab_size) throw ValidationError("token id out of range: " + std::to_string(id));
    }
    const bool drop = mode.training && cfg_.dropout > 0.0;
    if (drop && mode.rng == nullptr) throw ValidationError("training-mode dropout needs an rng");
    auto p = [&](const char* name) -> TensorRef { return store.at(name); };
    auto pl = [&](int layer, const char* name) -> TensorRef {
      return store.at("layer" + std::to_string(layer) + "." + name);
    };
    auto param = [&](TensorRef t) { return tape.param(t); };

    std::vector<int> positions(static_cast<std::size_t>(len));
    for (int i = 0; i < len; ++i) positions[static_cast<std::size_t>(i)] = i;
    ad::Var h = tape.add(tape.embedding(p("tok_emb"), ids), tape.embedding(p("pos_emb"), positions));
    if (drop) h = tape.dropout(h, cfg_.dropout, *mode.rng);

    const int dh = cfg_.d_model / cfg_.n_heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    for (int l = 0; l < cfg_.n_layers; ++l) {
      const ad::Var a = tape.layer_norm(h, param(pl(l, "ln1.g")), param(pl(l, "ln1.b")));
      const ad::Var q = tape.matmul(a, param(pl(l, "attn.wq")));
      const ad::Var k = tape.matmul(a, param(pl(l, "attn.wk")));
      const ad::Var v = tape.matmul(a, param(pl(l, "attn.wv")));
      std::vector<ad::Var> heads;
      for (int hd = 0; hd < cfg_.n_heads; ++hd) {
        const ad::Var qh = tape.slice_cols(q, hd * dh, dh);
        const ad::Var kh = tape.slice_cols(k, hd * dh, dh);
        const ad::Var vh = tape.slice_cols(v, hd * dh, dh);
        const ad::Var att = tape.causal_softmax(tape.scale(tape.matmul_nt(qh, kh), inv_sqrt));
        heads.push_back(tape.matmul(att, vh));
      }
      ad::Var o = tape.add_row(tape.matmul(tape.concat_cols(heads), param(pl(l, "attn.wo"))), param(pl(l, "attn.bo")));
      if (drop) o = tape.dropout(o, cfg_.dropout, *mode.rng);
      h = tape.add(h, o);

      const ad::Var m = tape.layer_norm(h, param(pl(l, "ln2.g")), param(pl(l, "ln2.b")));
      const ad::Var up = tape.gelu(tape.add_row(tape.matmul(m, param(pl(l, "mlp.w1"))), param(pl(l, "mlp.b1"))));
      ad::Var down = tape.add_row(tape.matmul(up, param(pl(l, "mlp.w2"))), param(pl(l, "mlp.b2")));
      if (drop) down = tape.dropout(down, cfg_.dropout, *mode.rng);
      h = tape.add(h, down);
    }
    const ad::Var hf = tape.layer_norm(h, param(p("ln_f.g")), param(p("ln_f.b")));
    return tape.add_row(tape.matmul(hf, param(p("head.w"))), param(p("head.b")));
  }

  void init_parameters() {
    const int d = cfg_.d_model;
    std::vector<ad::Tensor> ts;
    auto add = [&](std::string name, int rows, int cols) { ts.emplace_back(std::move(name), rows, cols); };
    add("tok_emb", cfg_.vocab_size, d);
    add("pos_emb", cfg_.max_seq_len, d);
    for (int l = 0; l < cfg_.n_layers; ++l) {
      const std::string pre = "layer" + std::to_string(l) + ".";
      add(pre + "ln1.g", 1, d);
      add(pre + "ln1.b", 1, d);
      add(pre + "attn.wq", d, d);
      add(pre + "attn.wk", d, d);
      add(pre + "attn.wv", d, d);
      add(pre + "attn.wo", d, d);
      add(pre + "attn.bo", 1, d);
      add(pre + "ln2.g", 1, d);
      add(pre + "ln2.b", 1, d);
      add(pre + "mlp.w1", d, cfg_.d_ff);
      add(pre + "mlp.b1", 1, cfg_.d_ff);
      add(pre + "mlp.w2", cfg_.d_ff, d);
      add(pre + "mlp.b2", 1, d);
    }
    add("ln_f.g", 1, d);
    add("ln_f.b", 1, d);
    add("head.w", d, cfg_.vocab_size);
    add("head.b", 1, cfg_.vocab_size);

    Rng rng(derive_seed(cfg_.init_seed, 0x1A17));
    const double residual_std = 0.02 / std::sqrt(2.0 * cfg_.n_layers);
    for (auto& t : ts) {
      const auto& n = t.name;
      const auto ends_with = [&](std::string_view suffix) {
        return n.size() >= suffix.size() && n.compare(n.size() - suffix.size(), suffix.size(), suffix) == 0;
      };
      if (ends_with(".g")) {
        t.value.setOnes();
      } else if (ends_with(".b") || ends_with(".bo") || ends_with(".b1") || ends_with(".b2")) {
        t.value.setZero();
      } else {
        const double std = (ends_with("attn.wo") || ends_with("mlp.w2")) ? residual_std : 0.02;
        for (Eigen::Index i = 0; i < t.value.size(); ++i) t.value.data()[i] = std * standard_normal(rng);
      }
    }
    params_ = ParameterStore(std::move(ts));
  }

  ModelConfig cfg_;
  ParameterStore params_;
};

// ---------------------------------------------------------------------------
// Checkpoint container
//
//   magic "MERACKPT", u32 version, then tagged sections
//   (4-byte tag, u64 payload length, payload):
//     CONF  key=value lines (ModelConfig)
//     META  key=value lines (free-form run metadata, e.g. stage)
//     VOCB  token surfaces, one per line, in id order
//     TENS  u32 count, then per tensor: u32 name length, name, u32 rank (2),
//           u64 rows, u64 cols, rows*cols little-endian IEEE-754 doubles (row-major)

struct ModelCheckpoint {
  static constexpr std::uint32_t kFormatVersion = 1;

  ModelConfig config;
  Vocabulary vocab;
  ParameterStore params;
  std::map<std::string, std::string> meta;

  Transformer model() const { return Transformer(config, params); }
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline void put_f64(std::string& out, double d) {
  std::uint64_t bits;
  std::memcpy(&bits, &d, sizeof bits);
  put_u64(out, bits);
}

class Reader {
 public:
  explicit Reader(std::string_view data) : data_(data) {}
  std::string_view take(std::size_t n) {
    if (pos_ + n > data_.size()) throw IoError("checkpoint truncated");
    auto s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint64_t uint(int bytes) {
    const auto s = take(static_cast<std::size_t>(bytes));
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(s[static_cast<std::size_t>(i)])) << (8 * i);
    return v;
  }
  double f64() {
    const std::uint64_t bits = uint(8);
    double d;
    std::memcpy(&d, &bits, sizeof d);
    return d;
  }
  bool done() const { return pos_ == data_.size(); }

 private:
  std::string_view data_;
  std::size_t pos_ = 0;
};

inline std::string format_kv(const std::map<std::string, std::string>& kv) {
  std::string out;
  for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
  return out;
}

inline std::map<std::string, std::string> parse_kv(std::string_view text) {
  std::map<std::string, std::string> kv;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ValidationError("checkpoint: malformed key/value line");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

inline std::map<std::string, std::string> config_to_kv(const ModelConfig& c) {
  std::ostringstream dropout;
  dropout.precision(17);
  dropout << c.dropout;
  return {{"vocab_size", std::to_string(c.vocab_size)}, {"d_model", std::to_string(c.d_model)},
          {"n_layers", std::to_string(c.n_layers)},     {"n_heads", std::to_string(c.n_heads)},
          {"d_ff", std::to_string(c.d_ff)},             {"max_seq_len", std::to_string(c.max_seq_len)},
          {"dropout", dropout.str()},                   {"init_seed", std::to_string(c.init_seed)}};
}

inline ModelConfig config_from_kv(const std::map<std::string, std::string>& kv) {
  auto get = [&](const char* k) -> const std::string& {
    auto it = kv.find(k);
    if (it == kv.end()) throw ValidationError(std::string("checkpoint config missing ") + k);
    return it->second;
  };
  ModelConfig c;
  try {
    c.vocab_size = std::stoi(get("vocab_size"));
    c.d_model = std::stoi(get("d_model"));
    c.n_layers = std::stoi(get("n_layers"));
    c.n_heads = std::stoi(get("n_heads"));
    c.d_ff = std::stoi(get("d_ff"));
    c.max_seq_len = std::stoi(get("max_seq_len"));
    c.dropout = std::stod(get("dropout"));
    c.init_seed = std::stoull(get("init_seed"));
  } catch (const std::logic_error&) {
    throw ValidationError("checkpoint config has a non-numeric value");
  }
  c.validate();
  return c;
}

}  // namespace detail

inline std::string serialize_checkpoint(const ModelCheckpoint& ck) {
  std::string out = "MERACKPT";
  detail::put_u32(out, ModelCheckpoint::kFormatVersion);
  auto section = [&](const char* tag, const std::string& payload) {
    out.append(tag, 4);
    detail::put_u64(out, payload.size());
    out += payload;
  };
  section("CONF", detail::format_kv(detail::config_to_kv(ck.config)));
  section("META", detail::format_kv(ck.meta));
  std::string vocab;
  for (const auto& s : ck.vocab.surfaces()) vocab += s + "\n";
  section("VOCB", vocab);
  std::string tens;
  detail::put_u32(tens, static_cast<std::uint32_t>(ck.params.tensors().size()));
  for (const auto& t : ck.params.tensors()) {
    detail::put_u32(tens, static_cast<std::uint32_t>(t.name.size()));
    tens += t.name;
    detail::put_u32(tens, 2);
    detail::put_u64(tens, static_cast<std::uint64_t>(t.value.rows()));
    detail::put_u64(tens, static_cast<std::uint64_t>(t.value.cols()));
    for (Eigen::Index i = 0; i < t.value.size(); ++i) detail::put_f64(tens, t.value.data()[i]);
  }
  section("TENS", tens);
  return out;
}

inline ModelCheckpoint deserialize_checkpoint(std::string_view data) {
  detail::Reader r(data);
  if (r.take(8) != "MERACKPT") throw ValidationError("not a checkpoint file (bad magic)");
  const auto version = r.uint(4);
  if (version != ModelCheckpoint::kFormatVersion) {
    throw ValidationError("unsupported checkpoint version " + std::to_string(version));
  }
  ModelCheckpoint ck;
  bool have_conf = false, have_vocab = false, have_tens = false;
  while (!r.done()) {
    const std::string tag(r.take(4));
    const auto len = r.uint(8);
    const auto payload = r.take(static_cast<std::size_t>(len));
    if (tag == "CONF") {
      ck.config = detail::config_from_kv(detail::parse_kv(payload));
      have_conf = true;
    } else if (tag == "META") {
      ck.meta = detail::parse_kv(payload);
    } else if (tag == "VOCB") {
      std::vector<std::string> surfaces;
      std::istringstream in{std::string(payload)};
      std::string line;
      while (std::getline(in, line)) surfaces.push_back(line);
      ck.vocab = Vocabulary::from_surfaces(std::move(surfaces));
      have_vocab = true;
    } else if (tag == "TENS") {
      detail::Reader t(payload);
      const auto count = t.uint(4);
      std::vector<ad::Tensor> tensors;
      for (std::uint64_t i = 0; i < count; ++i) {
        const std::string name(t.take(static_cast<std::size_t>(t.uint(4))));
        if (t.uint(4) != 2) throw ValidationError("checkpoint tensor " + name + " is not rank 2");
        const auto rows = static_cast<Eigen::Index>(t.uint(8));
        const auto cols = static_cast<Eigen::Index>(t.uint(8));
        ad::Tensor tensor(name, rows, cols);
        for (Eigen::Index k = 0; k < tensor.value.size(); ++k) tensor.value.data()[k] = t.f64();
        tensors.push_back(std::move(tensor));
      }
      if (!t.done()) throw ValidationError("checkpoint tensor block has trailing bytes");
      ck.params = ParameterStore(std::move(tensors));
      have_tens = true;
    }
    // Unknown sections are skipped for forward compatibility.
  }
  if (!have_conf || !have_vocab || !have_tens) throw ValidationError("checkpoint is missing a required section");
  if (ck.vocab.size() != ck.config.vocab_size) throw ValidationError("checkpoint vocabulary size mismatch");
  Transformer check(ck.config, ck.params);  // validates names and shapes
  return ck;
}

inline void save_checkpoint(const ModelCheckpoint& ck, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path);
  const auto bytes = serialize_checkpoint(ck);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path);
}

inline ModelCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return deserialize_checkpoint(buf.str());
}

}  // namespace mera
