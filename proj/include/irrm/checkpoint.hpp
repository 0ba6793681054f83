#pragma once

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "irrm/model.hpp"
#include "irrm/optim.hpp"

namespace irrm {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char kMagic[4] = {'I', 'R', 'R', 'M'};
inline constexpr std::uint32_t kFormatVersion = 1;

/// Ordered key=value header.
using Header = std::vector<std::pair<std::string, std::string>>;

struct TensorRecord {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<float> data;
};

/// Contents of a checkpoint-format file: magic, version, a length-prefixed
/// plain-text header, a tensor table and a trailing CRC-32.
struct Container {
  Header header;
  std::vector<TensorRecord> tensors;

  std::optional<std::string> get(const std::string& key) const {
    for (const auto& [k, v] : header) {
      if (k == key) return v;
    }
    return std::nullopt;
  }
  std::string require(const std::string& key) const {
    auto v = get(key);
    if (!v) throw DataError("checkpoint header lacks key '" + key + "'");
    return *v;
  }
  const TensorRecord* find(const std::string& name) const {
    for (const auto& t : tensors) {
      if (t.name == name) return &t;
    }
    return nullptr;
  }
};

inline std::uint32_t crc32_of(const std::uint8_t* data, std::size_t size) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks for very large buffers
  while (size > 0) {
    const uInt chunk = static_cast<uInt>(std::min<std::size_t>(size, 1u << 30));
    crc = ::crc32(crc, data, chunk);
    data += chunk;
    size -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
 public:
  Reader(const std::uint8_t* data, std::size_t size) : data_(data), size_(size) {}
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(data_ + pos_), n);
    pos_ += n;
    return s;
  }
  void floats(float* dst, std::size_t n) {
    need(n * 4);
    std::memcpy(dst, data_ + pos_, n * 4);
    pos_ += n * 4;
  }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (size_ - pos_ < n) throw DataError("checkpoint truncated at byte " + std::to_string(pos_));
  }
  const std::uint8_t* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> encode(const Container& c) {
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  detail::put_u32(out, kFormatVersion);
  std::string text;
  for (const auto& [k, v] : c.header) {
    if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos) {
      throw DataError("header entry '" + k + "' contains a reserved character");
    }
    text += k + "=" + v + "\n";
  }
  detail::put_u32(out, static_cast<std::uint32_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  for (const auto& t : c.tensors) {
    std::size_t count = 1;
    for (auto d : t.dims) count *= d;
    if (count != t.data.size()) throw ShapeError("tensor '" + t.name + "' dims do not match its data");
    detail::put_u32(out, static_cast<std::uint32_t>(t.name.size()));
    out.insert(out.end(), t.name.begin(), t.name.end());
    detail::put_u32(out, static_cast<std::uint32_t>(t.dims.size()));
    for (auto d : t.dims) detail::put_u32(out, d);
    const auto* raw = reinterpret_cast<const std::uint8_t*>(t.data.data());
    out.insert(out.end(), raw, raw + t.data.size() * 4);
  }
  detail::put_u32(out, crc32_of(out.data(), out.size()));
  return out;
}

inline Container decode(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw DataError("not an IRRM checkpoint (bad magic)");
  }
  const std::size_t body = bytes.size() - 4;
  detail::Reader crc_reader(bytes.data() + body, 4);
  if (crc_reader.u32() != crc32_of(bytes.data(), body)) throw DataError("checkpoint CRC mismatch");

  detail::Reader r(bytes.data(), body);
  r.bytes(4);
  const std::uint32_t version = r.u32();
  if (version != kFormatVersion) throw DataError("unsupported checkpoint version " + std::to_string(version));
  Container c;
  std::istringstream text(r.bytes(r.u32()));
  for (std::string line; std::getline(text, line);) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw DataError("malformed checkpoint header line '" + line + "'");
    c.header.emplace_back(line.substr(0, eq), line.substr(eq + 1));
  }
  while (r.pos() < body) {
    TensorRecord t;
    t.name = r.bytes(r.u32());
    const std::uint32_t rank = r.u32();
    if (rank > 8) throw DataError("tensor '" + t.name + "' has implausible rank " + std::to_string(rank));
    std::size_t count = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      t.dims.push_back(r.u32());
      count *= t.dims.back();
    }
    if (count > (body - r.pos()) / 4) throw DataError("tensor '" + t.name + "' overruns the file");
    t.data.resize(count);
    r.floats(t.data.data(), count);
    c.tensors.push_back(std::move(t));
  }
  return c;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Writes to a sibling temporary and renames it over `path` on success.
inline void write_file_atomic(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
      out.close();
      std::filesystem::remove(tmp);
      throw DataError("short write to " + tmp.string());
    }
  }
  std::filesystem::rename(tmp, path);
}

inline void write_container(const std::filesystem::path& path, const Container& c) {
  write_file_atomic(path, encode(c));
}

inline Container read_container(const std::filesystem::path& path) {
  try {
    return decode(read_file_bytes(path));
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

/// Lossless text form of a double.
inline std::string format_real(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// Tensor record with trailing unit dimensions trimmed (biases become rank 1).
template <class T>
TensorRecord to_record(const std::string& name, const Tensor<T>& t) {
  const Shape& s = t.shape();
  std::vector<std::uint32_t> dims{static_cast<std::uint32_t>(s.n), static_cast<std::uint32_t>(s.c),
                                  static_cast<std::uint32_t>(s.h), static_cast<std::uint32_t>(s.w)};
  while (dims.size() > 1 && dims.back() == 1) dims.pop_back();
  std::vector<float> data(t.numel());
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<float>(t.data()[i]);
  return {name, std::move(dims), std::move(data)};
}

template <class T>
Tensor<T> from_record(const TensorRecord& r) {
  if (r.dims.empty() || r.dims.size() > 4) {
    throw DataError("tensor '" + r.name + "' has rank " + std::to_string(r.dims.size()) + ", expected 1..4");
  }
  std::size_t d[4] = {1, 1, 1, 1};
  for (std::size_t i = 0; i < r.dims.size(); ++i) d[i] = r.dims[i];
  std::vector<T> v(r.data.begin(), r.data.end());
  return Tensor<T>(Shape{d[0], d[1], d[2], d[3]}, std::move(v));
}

inline Header model_header(const ModelConfig& cfg) {
  return {{"scale", std::to_string(cfg.scale)},
          {"num_rdm", std::to_string(cfg.num_rdm())},
          {"irbs_per_rdm", std::to_string(cfg.irbs_per_rdm)},
          {"coupling_mode", to_string(cfg.coupling)},
          {"eb_kind", to_string(cfg.eb_kind)},
          {"hidden", std::to_string(cfg.hidden)},
          {"clamp_alpha", format_real(cfg.clamp_alpha)},
          {"long_skip", cfg.long_skip ? "1" : "0"},
          {"channels", std::to_string(cfg.channels)},
          {"slope", format_real(cfg.slope)}};
}

inline std::size_t parse_size(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const unsigned long long x = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return static_cast<std::size_t>(x);
  } catch (const std::exception&) {
    throw DataError("value for '" + key + "' is not a non-negative integer: '" + v + "'");
  }
}

inline double parse_real(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double x = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw DataError("value for '" + key + "' is not a number: '" + v + "'");
  }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "on" || v == "yes") return true;
  if (v == "0" || v == "false" || v == "off" || v == "no") return false;
  throw DataError("value for '" + key + "' is not a boolean: '" + v + "'");
}

inline ModelConfig model_config_from(const Container& c) {
  ModelConfig cfg;
  cfg.scale = static_cast<int>(parse_size("scale", c.require("scale")));
  cfg.irbs_per_rdm = parse_size("irbs_per_rdm", c.require("irbs_per_rdm"));
  cfg.coupling = parse_coupling_mode(c.require("coupling_mode"));
  cfg.eb_kind = parse_eb_kind(c.require("eb_kind"));
  cfg.hidden = parse_size("hidden", c.require("hidden"));
  cfg.clamp_alpha = parse_real("clamp_alpha", c.require("clamp_alpha"));
  cfg.long_skip = parse_bool("long_skip", c.require("long_skip"));
  cfg.channels = parse_size("channels", c.get("channels").value_or("3"));
  cfg.slope = parse_real("slope", c.get("slope").value_or("0.2"));
  if (parse_size("num_rdm", c.require("num_rdm")) != cfg.num_rdm()) {
    throw DataError("checkpoint num_rdm is inconsistent with its scale");
  }
  return cfg;
}

/// A model plus optional optimizer state and free-form metadata.
struct Checkpoint {
  IrrmModel<float> model;
  std::optional<AdamState<float>> optimizer;
  Header extra;  // header keys beyond the model configuration
};

inline Container to_container(const Checkpoint& ck) {
  Container c;
  c.header = model_header(ck.model.config());
  c.header.insert(c.header.end(), ck.extra.begin(), ck.extra.end());
  const auto params = ck.model.parameters();
  for (const auto& p : params) c.tensors.push_back(to_record(p.name, p.tensor));
  if (ck.optimizer) {
    const auto& st = *ck.optimizer;
    c.header.emplace_back("adam_step", std::to_string(st.step));
    for (std::size_t i = 0; i < st.m.size() && i < params.size(); ++i) {
      const Shape s = params[i].tensor.shape();
      c.tensors.push_back(to_record("adam.m." + params[i].name, Tensor<float>(s, st.m[i])));
      c.tensors.push_back(to_record("adam.v." + params[i].name, Tensor<float>(s, st.v[i])));
    }
  }
  return c;
}

inline Checkpoint from_container(const Container& c) {
  static const std::vector<std::string> model_keys{"scale",  "num_rdm",     "irbs_per_rdm", "coupling_mode",
                                                   "eb_kind", "hidden",     "clamp_alpha",  "long_skip",
                                                   "channels", "slope",     "adam_step"};
  Checkpoint ck{IrrmModel<float>(model_config_from(c)), std::nullopt, {}};
  for (const auto& kv : c.header) {
    if (std::find(model_keys.begin(), model_keys.end(), kv.first) == model_keys.end()) ck.extra.push_back(kv);
  }
  const auto params = ck.model.parameters();
  for (const auto& p : params) {
    const TensorRecord* r = c.find(p.name);
    if (!r) throw DataError("checkpoint lacks tensor '" + p.name + "'");
    ck.model.set_parameter(p.name, from_record<float>(*r));
  }
  if (auto step = c.get("adam_step")) {
    AdamState<float> st;
    st.step = parse_size("adam_step", *step);
    if (st.step > 0) {
      for (const auto& p : params) {
        const TensorRecord* m = c.find("adam.m." + p.name);
        const TensorRecord* v = c.find("adam.v." + p.name);
        if (!m || !v) throw DataError("checkpoint lacks optimizer moments for '" + p.name + "'");
        if (m->data.size() != p.tensor.numel() || v->data.size() != p.tensor.numel()) {
          throw DataError("optimizer moments for '" + p.name + "' have the wrong size");
        }
        st.m.push_back(m->data);
        st.v.push_back(v->data);
      }
    }
    ck.optimizer = std::move(st);
  }
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  write_container(path, to_container(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  try {
    return from_container(read_container(path));
  } catch (const DataError& e) {
    throw DataError(std::string(e.what()).find(path.string()) == 0 ? e.what()
                                                                   : path.string() + ": " + e.what());
  } catch (const ShapeError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

/// Latent pyramid file in the checkpoint container. Levels are stored as
/// "z1", "z2", ...; an optional full-precision LR image is stored as "y".
inline Container latents_container(const LatentPyramid<float>& z, const Tensor<float>* y) {
  Container c;
  c.header = {{"kind", "latents"}, {"levels", std::to_string(z.levels.size())}};
  for (std::size_t k = 0; k < z.levels.size(); ++k) {
    Tensor<float> t = z.levels[k];
    TensorRecord r = to_record("z" + std::to_string(k + 1), t);
    const Shape& s = t.shape();
    r.dims = {static_cast<std::uint32_t>(s.n), static_cast<std::uint32_t>(s.c), static_cast<std::uint32_t>(s.h),
              static_cast<std::uint32_t>(s.w)};
    c.tensors.push_back(std::move(r));
  }
  if (y) {
    TensorRecord r = to_record("y", *y);
    const Shape& s = y->shape();
    r.dims = {static_cast<std::uint32_t>(s.n), static_cast<std::uint32_t>(s.c), static_cast<std::uint32_t>(s.h),
              static_cast<std::uint32_t>(s.w)};
    c.tensors.push_back(std::move(r));
  }
  return c;
}

struct LatentFile {
  LatentPyramid<float> z;
  std::optional<Tensor<float>> y;
};

inline LatentFile latents_from(const Container& c) {
  if (c.get("kind").value_or("") != "latents") throw DataError("file does not hold latents");
  LatentFile f;
  const std::size_t levels = parse_size("levels", c.require("levels"));
  for (std::size_t k = 1; k <= levels; ++k) {
    const TensorRecord* r = c.find("z" + std::to_string(k));
    if (!r) throw DataError("latent file lacks level z" + std::to_string(k));
    f.z.levels.push_back(from_record<float>(*r));
  }
  if (const TensorRecord* r = c.find("y")) f.y = from_record<float>(*r);
  return f;
}

}  // namespace irrm
