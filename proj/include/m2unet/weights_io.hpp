#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <json.hpp>

#include "m2unet/architecture.hpp"

namespace m2unet {

inline constexpr std::uint32_t kFormatVersion = 1;

/// One named tensor as stored on disk. `dims` keeps the logical rank; `value`
/// holds the data with dims left-aligned into NCHW (missing trailing dims = 1).
struct NamedTensor {
  std::string name;
  std::vector<std::uint32_t> dims;
  Tensor<float> value;
};

namespace io_detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_f32(std::string& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

inline void pad4(std::string& out) {
  while (out.size() % 4) out.push_back('\0');
}

/// Bounds-checked little-endian reader over an in-memory file.
class Reader {
 public:
  Reader(const std::string& bytes, std::string what) : b_(bytes), what_(std::move(what)) {}

  void need(std::size_t n) const {
    if (pos_ + n > b_.size()) throw LoadError(what_ + ": truncated at byte " + std::to_string(pos_));
  }
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(b_[pos_++]);
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(b_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string str(std::size_t n) {
    need(n);
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void skip(std::size_t n) {
    need(n);
    pos_ += n;
  }
  void align4() { skip((4 - pos_ % 4) % 4); }
  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == b_.size(); }

 private:
  const std::string& b_;
  std::string what_;
  std::size_t pos_ = 0;
};

inline std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw UsageError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw UsageError("write failed: " + path.string());
}

inline Shape dims_to_shape(const std::vector<std::uint32_t>& d) {
  if (d.size() > 4) throw LoadError("tensor rank " + std::to_string(d.size()) + " exceeds 4");
  std::size_t v[4] = {1, 1, 1, 1};
  for (std::size_t i = 0; i < d.size(); ++i) v[i] = d[i];
  return {v[0], v[1], v[2], v[3]};
}

inline std::vector<std::uint32_t> shape_to_dims(const Shape& s, std::uint8_t rank) {
  const std::size_t v[4] = {s.n, s.c, s.h, s.w};
  std::vector<std::uint32_t> d;
  for (std::size_t i = 0; i < rank && i < 4; ++i) d.push_back(static_cast<std::uint32_t>(v[i]));
  return d;
}

}  // namespace io_detail

// ---------------------------------------------------------------------------
// M2UF: golden fixture container
//   "M2UF" u32 version u32 count
//   per tensor: u32 name_len, name, u8 rank, u32 dims[rank], f32 data
// ---------------------------------------------------------------------------

inline std::vector<NamedTensor> read_fixture(const std::filesystem::path& path) {
  const std::string bytes = io_detail::slurp(path);
  io_detail::Reader r(bytes, path.string());
  if (r.str(4) != "M2UF") throw LoadError(path.string() + ": bad magic");
  if (const auto v = r.u32(); v != kFormatVersion) throw LoadError(path.string() + ": unsupported version");
  const std::uint32_t count = r.u32();
  std::vector<NamedTensor> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = r.str(r.u32());
    const std::uint8_t rank = r.u8();
    for (std::uint8_t d = 0; d < rank; ++d) t.dims.push_back(r.u32());
    const Shape s = io_detail::dims_to_shape(t.dims);
    std::vector<float> data(s.numel());
    for (auto& f : data) f = r.f32();
    t.value = Tensor<float>(s, std::move(data));
    out.push_back(std::move(t));
  }
  if (!r.done()) throw LoadError(path.string() + ": trailing bytes");
  return out;
}

inline void write_fixture(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
  std::string b = "M2UF";
  io_detail::put_u32(b, kFormatVersion);
  io_detail::put_u32(b, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    io_detail::put_u32(b, static_cast<std::uint32_t>(t.name.size()));
    b += t.name;
    b.push_back(static_cast<char>(t.dims.size()));
    for (auto d : t.dims) io_detail::put_u32(b, d);
    for (float f : t.value.vec()) io_detail::put_f32(b, f);
  }
  io_detail::write_file(path, b);
}

inline const NamedTensor& find_tensor(const std::vector<NamedTensor>& ts, const std::string& name) {
  for (const auto& t : ts) {
    if (t.name == name) return t;
  }
  throw LoadError("tensor not found: " + name);
}

// ---------------------------------------------------------------------------
// M2UW: weight / checkpoint file
//   "M2UW" u32 version u32 count
//   per tensor: u32 name_len, name, pad to 4, u8 rank, 3 pad bytes,
//               u32 dims[rank], f32 data
//   u32 metadata_len, metadata JSON
// All offsets are 4-aligned; all integers little-endian.
// ---------------------------------------------------------------------------

struct WeightFile {
  std::vector<NamedTensor> tensors;
  nlohmann::json metadata;
};

template <typename T>
nlohmann::json graph_metadata(const ModelGraph<T>& g) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : g.layers) {
    layers.push_back({{"kind", layer_kind_name(l.kind)}, {"t", l.t}, {"c", l.c}, {"n", l.n}, {"s", l.s}});
  }
  return {{"architecture_hash", architecture_hash(g)},
          {"t_decoder", g.t_decoder},
          {"bn_eps", static_cast<double>(g.bn_eps)},
          {"bn_momentum", static_cast<double>(g.bn_momentum)},
          {"in_channels", g.in_channels},
          {"height", g.height},
          {"width", g.width},
          {"layers", layers}};
}

inline std::string encode_weights(const WeightFile& wf) {
  std::string b = "M2UW";
  io_detail::put_u32(b, kFormatVersion);
  io_detail::put_u32(b, static_cast<std::uint32_t>(wf.tensors.size()));
  for (const auto& t : wf.tensors) {
    io_detail::put_u32(b, static_cast<std::uint32_t>(t.name.size()));
    b += t.name;
    io_detail::pad4(b);
    b.push_back(static_cast<char>(t.dims.size()));
    io_detail::pad4(b);
    for (auto d : t.dims) io_detail::put_u32(b, d);
    for (float f : t.value.vec()) io_detail::put_f32(b, f);
  }
  const std::string meta = wf.metadata.dump();
  io_detail::put_u32(b, static_cast<std::uint32_t>(meta.size()));
  b += meta;
  return b;
}

inline WeightFile decode_weights(const std::string& bytes, const std::string& what = "weights") {
  io_detail::Reader r(bytes, what);
  if (r.str(4) != "M2UW") throw LoadError(what + ": bad magic");
  if (r.u32() != kFormatVersion) throw LoadError(what + ": unsupported version");
  const std::uint32_t count = r.u32();
  WeightFile wf;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = r.str(r.u32());
    r.align4();
    const std::uint8_t rank = r.u8();
    r.align4();
    for (std::uint8_t d = 0; d < rank; ++d) t.dims.push_back(r.u32());
    const Shape s = io_detail::dims_to_shape(t.dims);
    r.need(s.numel() * 4);
    std::vector<float> data(s.numel());
    for (auto& f : data) f = r.f32();
    t.value = Tensor<float>(s, std::move(data));
    wf.tensors.push_back(std::move(t));
  }
  const std::uint32_t meta_len = r.u32();
  const std::string meta = r.str(meta_len);
  if (!r.done()) throw LoadError(what + ": trailing bytes after metadata");
  try {
    wf.metadata = nlohmann::json::parse(meta);
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(what + ": malformed metadata: " + e.what());
  }
  return wf;
}

template <typename T>
WeightFile to_weight_file(const ModelGraph<T>& g, const nlohmann::json& extra = {}) {
  WeightFile wf;
  for (const auto& e : g.params.entries()) {
    wf.tensors.push_back({e.name, io_detail::shape_to_dims(e.value.shape(), e.rank), e.value.template cast<float>()});
  }
  wf.metadata = graph_metadata(g);
  if (extra.is_object()) {
    for (auto it = extra.begin(); it != extra.end(); ++it) wf.metadata[it.key()] = it.value();
  }
  return wf;
}

template <typename T>
void save_weights(const ModelGraph<T>& g, const std::filesystem::path& path, const nlohmann::json& extra = {}) {
  io_detail::write_file(path, encode_weights(to_weight_file(g, extra)));
}

inline WeightFile load_weights(const std::filesystem::path& path) {
  return decode_weights(io_detail::slurp(path), path.string());
}

/// Validates every tensor against the graph, then installs them all. Nothing is
/// modified if any check fails.
template <typename T>
void install_weights(ModelGraph<T>& g, const WeightFile& wf) {
  const std::string expect = architecture_hash(g);
  const std::string got = wf.metadata.value("architecture_hash", std::string{});
  if (got != expect) throw LoadError("architecture hash mismatch: file " + got + ", graph " + expect);
  std::vector<std::string> bad;
  for (const auto& e : g.params.entries()) {
    const NamedTensor* t = nullptr;
    for (const auto& c : wf.tensors) {
      if (c.name == e.name) t = &c;
    }
    if (!t || t->value.shape() != e.value.shape()) bad.push_back(e.name);
  }
  if (!bad.empty() || wf.tensors.size() != g.params.size()) {
    std::string msg = "weight file does not match graph";
    for (const auto& b : bad) msg += "\n  " + b;
    throw LoadError(msg);
  }
  for (const auto& t : wf.tensors) g.params[t.name] = t.value.template cast<T>();
}

/// Rebuilds a graph from a weight file's metadata and installs its tensors.
inline ModelGraph<float> load_model(const std::filesystem::path& path) {
  const WeightFile wf = load_weights(path);
  const auto& m = wf.metadata;
  if (!m.contains("layers")) throw LoadError(path.string() + ": metadata lacks layer table");
  std::vector<LayerSpec> layers;
  for (const auto& l : m["layers"]) {
    LayerSpec s;
    const std::string kind = l.at("kind");
    bool found = false;
    for (auto k : {LayerKind::conv, LayerKind::dwisesep, LayerKind::bottleneck, LayerKind::resbottleneck,
                   LayerKind::upconcat, LayerKind::sigmoid}) {
      if (kind == layer_kind_name(k)) {
        s.kind = k;
        found = true;
      }
    }
    if (!found) throw LoadError(path.string() + ": unknown layer kind " + kind);
    s.t = l.at("t");
    s.c = l.at("c");
    s.n = l.at("n");
    s.s = l.at("s");
    layers.push_back(s);
  }
  auto g = build_graph<float>(layers, m.at("height"), m.at("width"), m.at("in_channels"), m.at("t_decoder"));
  g.bn_eps = m.at("bn_eps");
  g.bn_momentum = m.at("bn_momentum");
  install_weights(g, wf);
  return g;
}

}  // namespace m2unet
