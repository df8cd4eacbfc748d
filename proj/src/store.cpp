#include "fqbert/store.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>
#include <zlib.h>

namespace fqbert {

namespace {

using json = nlohmann::json;

constexpr char kMagic[4] = {'F', 'Q', 'B', 'T'};
constexpr char kCkptMagic[4] = {'F', 'Q', 'C', 'K'};
constexpr uint16_t kCkptVersion = 1;
constexpr std::size_t kHeaderBytes = 40;
constexpr uint32_t kConfigBytes = 44;

class Writer {
 public:
  std::vector<uint8_t> buf;

  void u8(uint8_t v) { buf.push_back(v); }
  void u16(uint16_t v) { put(v, 2); }
  void u32(uint32_t v) { put(v, 4); }
  void u64(uint64_t v) { put(v, 8); }
  void i32(int32_t v) { u32(static_cast<uint32_t>(v)); }
  void f32(float v) { u32(std::bit_cast<uint32_t>(v)); }
  void raw(std::span<const uint8_t> b) { buf.insert(buf.end(), b.begin(), b.end()); }
  void str(const std::string& s) { buf.insert(buf.end(), s.begin(), s.end()); }
  void pad_to(std::size_t align) {
    while (buf.size() % align != 0) buf.push_back(0);
  }
  void patch_u32(std::size_t at, uint32_t v) {
    for (int i = 0; i < 4; ++i) buf[at + i] = static_cast<uint8_t>(v >> (8 * i));
  }
  void patch_u64(std::size_t at, uint64_t v) {
    for (int i = 0; i < 8; ++i) buf[at + i] = static_cast<uint8_t>(v >> (8 * i));
  }

 private:
  void put(uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf.push_back(static_cast<uint8_t>(v >> (8 * i)));
  }
};

class Reader {
 public:
  explicit Reader(std::span<const uint8_t> b, const char* what) : b_(b), what_(what) {}

  uint8_t u8() { return take(1)[0]; }
  uint16_t u16() { return static_cast<uint16_t>(get(2)); }
  uint32_t u32() { return static_cast<uint32_t>(get(4)); }
  uint64_t u64() { return get(8); }
  int32_t i32() { return static_cast<int32_t>(u32()); }
  float f32() { return std::bit_cast<float>(u32()); }
  std::span<const uint8_t> take(std::size_t n) {
    if (n > b_.size() - pos_) throw FormatError(std::string(what_) + ": truncated data");
    auto s = b_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::string str(std::size_t n) {
    auto s = take(n);
    return std::string(s.begin(), s.end());
  }
  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return b_.size() - pos_; }

 private:
  uint64_t get(int n) {
    auto s = take(static_cast<std::size_t>(n));
    uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= uint64_t{s[static_cast<std::size_t>(i)]} << (8 * i);
    return v;
  }

  std::span<const uint8_t> b_;
  const char* what_;
  std::size_t pos_ = 0;
};

std::vector<uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::vector<uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

std::string dims_str(const std::vector<uint32_t>& d) {
  std::string s = "[";
  for (std::size_t i = 0; i < d.size(); ++i) s += (i ? ", " : "") + std::to_string(d[i]);
  return s + "]";
}

// ---- model <-> tensors -----------------------------------------------------

const char* const kLinearNames[6] = {"Wq", "Wk", "Wv", "Wo", "W1", "W2"};

std::array<const QuantLinear*, 6> linears(const QuantLayer& l) {
  return {&l.q, &l.k, &l.v, &l.o, &l.ffn1, &l.ffn2};
}
std::array<QuantLinear*, 6> linears(QuantLayer& l) { return {&l.q, &l.k, &l.v, &l.o, &l.ffn1, &l.ffn2}; }

std::string layer_prefix(int l) { return "layer" + std::to_string(l) + "."; }

TensorEntry scale_entry(const std::string& name, Scale8 s) {
  return {name, DType::kScale8, {1}, {s.mantissa, static_cast<uint8_t>(s.exp2)}};
}

TensorEntry requant_entry(const std::string& name, RequantMul rm) {
  Writer w;
  w.i32(rm.multiplier);
  w.i32(rm.shift);
  return {name, DType::kRequant, {1}, std::move(w.buf)};
}

TensorEntry i32_entry(const std::string& name, std::span<const int32_t> v) {
  Writer w;
  for (int32_t x : v) w.i32(x);
  return {name, DType::kI32, {static_cast<uint32_t>(v.size())}, std::move(w.buf)};
}

TensorEntry f32_entry(const std::string& name, std::span<const float> v, std::vector<uint32_t> dims) {
  Writer w;
  for (float x : v) w.f32(x);
  return {name, DType::kF32, std::move(dims), std::move(w.buf)};
}

TensorEntry weight_entry(const std::string& name, const QTensor& t) {
  TensorEntry e;
  e.name = name;
  e.dims = {static_cast<uint32_t>(t.shape[0]), static_cast<uint32_t>(t.shape[1])};
  switch (storage_bits(t.bits)) {
    case 2:
      e.dtype = DType::kI2Packed;
      e.bytes = pack_i2(t.data);
      break;
    case 4:
      e.dtype = DType::kI4Packed;
      e.bytes = pack_i4(t.data);
      break;
    default:
      e.dtype = DType::kI8;
      for (int32_t v : t.data) e.bytes.push_back(static_cast<uint8_t>(v));
  }
  return e;
}

Scale8 read_scale(const TensorEntry& e) {
  if (e.dtype != DType::kScale8 || e.bytes.size() != 2) throw FormatError(e.name + ": expected one scale8 value");
  Scale8 s{e.bytes[0], static_cast<int8_t>(e.bytes[1])};
  if (s.mantissa < 128) throw FormatError(e.name + ": scale mantissa is not normalized");
  return s;
}

RequantMul read_requant(const TensorEntry& e) {
  if (e.dtype != DType::kRequant || e.bytes.size() != 8) throw FormatError(e.name + ": expected one requant value");
  Reader r(e.bytes, e.name.c_str());
  RequantMul rm;
  rm.multiplier = r.i32();
  rm.shift = r.i32();
  return rm;
}

std::vector<int32_t> read_i32(const TensorEntry& e, std::size_t n) {
  if (e.dtype != DType::kI32 || e.elements() != n) throw FormatError(e.name + ": expected " + std::to_string(n) + " i32 values");
  Reader r(e.bytes, e.name.c_str());
  std::vector<int32_t> v(n);
  for (auto& x : v) x = r.i32();
  return v;
}

void expect_dims(const TensorEntry& e, const std::vector<uint32_t>& dims) {
  if (e.dims != dims) {
    throw FormatError("shape mismatch for " + e.name + ": expected " + dims_str(dims) + ", found " + dims_str(e.dims));
  }
}

std::vector<float> read_f32(const TensorEntry& e, const std::vector<uint32_t>& dims) {
  if (e.dtype != DType::kF32) throw FormatError(e.name + ": expected f32 tensor");
  expect_dims(e, dims);
  Reader r(e.bytes, e.name.c_str());
  std::vector<float> v(e.elements());
  for (auto& x : v) x = r.f32();
  return v;
}

QTensor read_weight(const TensorEntry& e, uint32_t rows, uint32_t cols, int bits, double scale) {
  expect_dims(e, {rows, cols});
  QTensor t;
  t.bits = bits;
  t.shape = {rows, cols};
  t.scale = scale;
  const std::size_t n = std::size_t{rows} * cols;
  const int sb = storage_bits(bits);
  if (sb == 2 && e.dtype == DType::kI2Packed) {
    t.data = unpack_i2(e.bytes, n);
  } else if (sb == 4 && e.dtype == DType::kI4Packed) {
    t.data = unpack_i4(e.bytes, n);
  } else if (sb == 8 && e.dtype == DType::kI8) {
    for (uint8_t b : e.bytes) t.data.push_back(static_cast<int8_t>(b));
  } else {
    throw FormatError(e.name + ": storage type " + dtype_name(e.dtype) + " does not match " + std::to_string(bits) +
                      "-bit weights");
  }
  if (!t.in_range()) throw FormatError(e.name + ": weight code outside " + std::to_string(bits) + "-bit range");
  return t;
}

json config_json(const ModelConfig& mc) {
  return {{"num_layers", mc.num_layers}, {"hidden", mc.hidden},         {"heads", mc.heads},
          {"head_dim", mc.head_dim},     {"ffn_dim", mc.ffn_dim},       {"seq_len", mc.seq_len},
          {"w_bits", mc.w_bits},         {"a_bits", mc.a_bits},         {"vocab_size", mc.vocab_size},
          {"max_position", mc.max_position}, {"type_vocab", mc.type_vocab}, {"num_labels", mc.num_labels}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig mc;
  mc.num_layers = j.at("num_layers");
  mc.hidden = j.at("hidden");
  mc.heads = j.at("heads");
  mc.head_dim = j.at("head_dim");
  mc.ffn_dim = j.at("ffn_dim");
  mc.seq_len = j.at("seq_len");
  mc.w_bits = j.at("w_bits");
  mc.a_bits = j.at("a_bits");
  mc.vocab_size = j.at("vocab_size");
  mc.max_position = j.at("max_position");
  mc.type_vocab = j.at("type_vocab");
  mc.num_labels = j.at("num_labels");
  return mc;
}

}  // namespace

// ---- dtypes ------------------------------------------------------------------

const char* dtype_name(DType d) {
  switch (d) {
    case DType::kI4Packed: return "i4-packed";
    case DType::kI8: return "i8";
    case DType::kU8: return "u8";
    case DType::kI32: return "i32";
    case DType::kScale8: return "scale8";
    case DType::kLnParam8: return "lnparam8";
    case DType::kF32: return "f32";
    case DType::kRequant: return "requant";
    case DType::kI2Packed: return "i2-packed";
  }
  return "?";
}

std::size_t dtype_byte_length(DType d, std::size_t n) {
  switch (d) {
    case DType::kI4Packed: return (n + 1) / 2;
    case DType::kI2Packed: return (n + 3) / 4;
    case DType::kI8:
    case DType::kU8:
    case DType::kLnParam8: return n;
    case DType::kScale8: return 2 * n;
    case DType::kI32:
    case DType::kF32: return 4 * n;
    case DType::kRequant: return 8 * n;
  }
  throw FormatError("unknown dtype");
}

std::size_t TensorEntry::elements() const {
  std::size_t n = 1;
  for (uint32_t d : dims) n *= d;
  return n;
}

const TensorEntry* FqbtContainer::find(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

const TensorEntry& FqbtContainer::at(const std::string& name) const {
  const TensorEntry* t = find(name);
  if (!t) throw FormatError("container is missing tensor " + name);
  return *t;
}

// ---- packing -------------------------------------------------------------------

std::vector<uint8_t> pack_i4(std::span<const int32_t> v) {
  std::vector<uint8_t> out((v.size() + 1) / 2, 0);
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (v[i] < -8 || v[i] > 7) throw ArgumentError("pack_i4: value outside signed 4-bit range");
    out[i / 2] |= static_cast<uint8_t>((v[i] & 0xF) << (4 * (i % 2)));
  }
  return out;
}

std::vector<int32_t> unpack_i4(std::span<const uint8_t> bytes, std::size_t count) {
  if (bytes.size() < (count + 1) / 2) throw FormatError("unpack_i4: not enough bytes");
  std::vector<int32_t> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    const int32_t nib = (bytes[i / 2] >> (4 * (i % 2))) & 0xF;
    out[i] = nib >= 8 ? nib - 16 : nib;
  }
  return out;
}

std::vector<uint8_t> pack_i2(std::span<const int32_t> v) {
  std::vector<uint8_t> out((v.size() + 3) / 4, 0);
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (v[i] < -2 || v[i] > 1) throw ArgumentError("pack_i2: value outside signed 2-bit range");
    out[i / 4] |= static_cast<uint8_t>((v[i] & 0x3) << (2 * (i % 4)));
  }
  return out;
}

std::vector<int32_t> unpack_i2(std::span<const uint8_t> bytes, std::size_t count) {
  if (bytes.size() < (count + 3) / 4) throw FormatError("unpack_i2: not enough bytes");
  std::vector<int32_t> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    const int32_t c = (bytes[i / 4] >> (2 * (i % 4))) & 0x3;
    out[i] = c >= 2 ? c - 4 : c;
  }
  return out;
}

uint32_t crc32_ieee(std::span<const uint8_t> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  std::size_t off = 0;
  while (off < bytes.size()) {
    const std::size_t n = std::min<std::size_t>(bytes.size() - off, 1u << 30);
    crc = ::crc32(crc, bytes.data() + off, static_cast<uInt>(n));
    off += n;
  }
  return static_cast<uint32_t>(crc);
}

// ---- container bytes -------------------------------------------------------------

std::vector<uint8_t> serialize(const FqbtContainer& c) {
  Writer w;
  w.raw(std::span(reinterpret_cast<const uint8_t*>(kMagic), 4));
  w.u16(kFqbtVersion);
  w.u16(0);
  w.u32(kConfigBytes);
  w.u32(static_cast<uint32_t>(c.tensors.size()));
  const std::size_t payload_off_at = w.buf.size();
  w.u64(0);
  w.u64(0);
  const std::size_t crc_at = w.buf.size();
  w.u32(0);
  w.u32(0);

  const ModelConfig& mc = c.config;
  for (int v : {mc.num_layers, mc.hidden, mc.heads, mc.head_dim, mc.ffn_dim, mc.seq_len}) w.u32(static_cast<uint32_t>(v));
  w.u8(static_cast<uint8_t>(mc.w_bits));
  w.u8(static_cast<uint8_t>(mc.a_bits));
  w.u16(0);
  for (int v : {mc.vocab_size, mc.max_position, mc.type_vocab, mc.num_labels}) w.u32(static_cast<uint32_t>(v));

  // Offsets relative to the payload start, each 64-aligned.
  std::vector<uint64_t> offsets;
  uint64_t off = 0;
  for (const auto& t : c.tensors) {
    if (t.bytes.size() != dtype_byte_length(t.dtype, t.elements())) {
      throw ArgumentError("serialize: " + t.name + " byte length does not match dtype and shape");
    }
    off = (off + kFqbtAlign - 1) / kFqbtAlign * kFqbtAlign;
    offsets.push_back(off);
    off += t.bytes.size();
  }
  for (std::size_t i = 0; i < c.tensors.size(); ++i) {
    const auto& t = c.tensors[i];
    w.u16(static_cast<uint16_t>(t.name.size()));
    w.str(t.name);
    w.u8(static_cast<uint8_t>(t.dtype));
    w.u8(static_cast<uint8_t>(t.dims.size()));
    for (uint32_t d : t.dims) w.u32(d);
    w.u64(offsets[i]);
    w.u64(t.bytes.size());
  }
  w.pad_to(kFqbtAlign);
  const std::size_t payload_off = w.buf.size();
  for (std::size_t i = 0; i < c.tensors.size(); ++i) {
    w.buf.resize(payload_off + offsets[i], 0);
    w.raw(c.tensors[i].bytes);
  }
  const std::size_t payload_len = w.buf.size() - payload_off;
  w.patch_u64(payload_off_at, payload_off);
  w.patch_u64(payload_off_at + 8, payload_len);
  w.patch_u32(crc_at, crc32_ieee(std::span(w.buf).subspan(payload_off)));
  return std::move(w.buf);
}

FqbtContainer parse_container(std::span<const uint8_t> bytes) {
  if (bytes.size() < kHeaderBytes) throw FormatError("FQBT: truncated header");
  Reader r(bytes, "FQBT");
  if (std::memcmp(r.take(4).data(), kMagic, 4) != 0) throw FormatError("FQBT: bad magic");
  const uint16_t version = r.u16();
  if (version != kFqbtVersion) {
    throw FormatError("FQBT: unsupported version " + std::to_string(version) + " (reader supports " +
                      std::to_string(kFqbtVersion) + ")");
  }
  if (r.u16() != 0) throw FormatError("FQBT: unknown flags set");
  const uint32_t cfg_len = r.u32();
  const uint32_t count = r.u32();
  const uint64_t payload_off = r.u64();
  const uint64_t payload_len = r.u64();
  const uint32_t crc = r.u32();
  r.u32();
  if (cfg_len != kConfigBytes) throw FormatError("FQBT: unexpected config block length");

  FqbtContainer c;
  ModelConfig& mc = c.config;
  for (int* v : {&mc.num_layers, &mc.hidden, &mc.heads, &mc.head_dim, &mc.ffn_dim, &mc.seq_len}) {
    *v = static_cast<int>(r.u32());
  }
  mc.w_bits = r.u8();
  mc.a_bits = r.u8();
  r.u16();
  for (int* v : {&mc.vocab_size, &mc.max_position, &mc.type_vocab, &mc.num_labels}) *v = static_cast<int>(r.u32());

  if (payload_off % kFqbtAlign != 0) throw FormatError("FQBT: misaligned payload offset");
  if (payload_off > bytes.size() || payload_len > bytes.size() - payload_off) {
    throw FormatError("FQBT: truncated payload");
  }
  if (payload_off + payload_len != bytes.size()) throw FormatError("FQBT: trailing bytes after payload");
  const auto payload = bytes.subspan(payload_off, payload_len);
  if (crc32_ieee(payload) != crc) throw FormatError("FQBT: checksum mismatch (CRC32 over payload)");

  std::vector<std::pair<uint64_t, uint64_t>> spans;
  for (uint32_t i = 0; i < count; ++i) {
    TensorEntry t;
    t.name = r.str(r.u16());
    const uint8_t dt = r.u8();
    if (dt > static_cast<uint8_t>(DType::kI2Packed)) throw FormatError("FQBT: unknown dtype for " + t.name);
    t.dtype = static_cast<DType>(dt);
    const uint8_t ndim = r.u8();
    for (uint8_t d = 0; d < ndim; ++d) t.dims.push_back(r.u32());
    const uint64_t off = r.u64();
    const uint64_t len = r.u64();
    if (off % kFqbtAlign != 0) throw FormatError("FQBT: misaligned offset for " + t.name);
    if (off > payload_len || len > payload_len - off) throw FormatError("FQBT: truncated payload for " + t.name);
    if (len != dtype_byte_length(t.dtype, t.elements())) {
      throw FormatError("FQBT: length of " + t.name + " does not match its dtype and shape");
    }
    t.bytes.assign(payload.begin() + static_cast<std::ptrdiff_t>(off),
                   payload.begin() + static_cast<std::ptrdiff_t>(off + len));
    c.tensors.push_back(std::move(t));
  }
  if (r.pos() > payload_off) throw FormatError("FQBT: tensor table overlaps payload");
  return c;
}

void save(const FqbtContainer& c, const std::filesystem::path& path) { write_file(path, serialize(c)); }

FqbtContainer load(const std::filesystem::path& path) { return parse_container(read_file_bytes(path)); }

// ---- model mapping -----------------------------------------------------------------

FqbtContainer container_from_model(const QuantModel& qm) {
  FqbtContainer c;
  c.config = qm.config;
  const ModelConfig& mc = qm.config;
  const auto H = static_cast<uint32_t>(mc.hidden);
  c.tensors.push_back(scale_entry(kInputSite + ".scale", qm.input_scale));
  for (int l = 0; l < mc.num_layers; ++l) {
    const QuantLayer& ql = qm.layers[static_cast<std::size_t>(l)];
    const std::string p = layer_prefix(l);
    const auto lins = linears(ql);
    for (std::size_t i = 0; i < 6; ++i) {
      const std::string n = p + kLinearNames[i];
      c.tensors.push_back(weight_entry(n, lins[i]->weight));
      c.tensors.push_back(scale_entry(n + ".scale", lins[i]->weight_scale));
      c.tensors.push_back(i32_entry(n + ".bias", lins[i]->bias.data));
      c.tensors.push_back(requant_entry(n + ".requant", lins[i]->requant));
    }
    c.tensors.push_back(requant_entry(p + "scores.requant", ql.scores_requant));
    c.tensors.push_back(requant_entry(p + "ctx.requant", ql.ctx_requant));
    for (Site s : kAllSites) c.tensors.push_back(scale_entry(site_name(l, s) + ".scale", ql.scale(s)));
    for (const auto& [name, ln] : {std::pair{"ln1", &ql.ln1}, std::pair{"ln2", &ql.ln2}}) {
      TensorEntry e{p + name, DType::kLnParam8, {2, H}, {}};
      for (int32_t g : ln->gamma) e.bytes.push_back(static_cast<uint8_t>(g));
      for (int32_t b : ln->beta) e.bytes.push_back(static_cast<uint8_t>(b));
      c.tensors.push_back(std::move(e));
    }
    TensorEntry lut{p + "softmax.lut", DType::kU8, {256}, {}};
    lut.bytes.assign(ql.softmax_lut.entries.begin(), ql.softmax_lut.entries.end());
    c.tensors.push_back(std::move(lut));
    TensorEntry gl{p + "gelu.lut", DType::kI8, {256}, {}};
    for (int32_t v : ql.gelu_lut) gl.bytes.push_back(static_cast<uint8_t>(v));
    c.tensors.push_back(std::move(gl));
  }
  const HostWeights& h = qm.host;
  auto dims2 = [](const Matrix& m) { return std::vector<uint32_t>{static_cast<uint32_t>(m.rows), static_cast<uint32_t>(m.cols)}; };
  c.tensors.push_back(f32_entry("embed.word", h.word.data, dims2(h.word)));
  c.tensors.push_back(f32_entry("embed.position", h.position.data, dims2(h.position)));
  c.tensors.push_back(f32_entry("embed.segment", h.segment.data, dims2(h.segment)));
  c.tensors.push_back(f32_entry("embed.ln.gamma", h.ln_gamma, {H}));
  c.tensors.push_back(f32_entry("embed.ln.beta", h.ln_beta, {H}));
  c.tensors.push_back(f32_entry("pooler.W", h.pooler.w.data, dims2(h.pooler.w)));
  c.tensors.push_back(f32_entry("pooler.b", h.pooler.b, {static_cast<uint32_t>(h.pooler.b.size())}));
  c.tensors.push_back(f32_entry("cls.W", h.classifier.w.data, dims2(h.classifier.w)));
  c.tensors.push_back(f32_entry("cls.b", h.classifier.b, {static_cast<uint32_t>(h.classifier.b.size())}));
  return c;
}

QuantModel model_from_container(const FqbtContainer& c) {
  QuantModel qm;
  qm.config = c.config;
  const ModelConfig& mc = qm.config;
  try {
    mc.validate();
  } catch (const ArgumentError& e) {
    throw FormatError(std::string("FQBT: invalid model config: ") + e.what());
  }
  const auto H = static_cast<uint32_t>(mc.hidden);
  const auto F = static_cast<uint32_t>(mc.ffn_dim);
  qm.input_scale = read_scale(c.at(kInputSite + ".scale"));
  Scale8 in8 = qm.input_scale;
  for (int l = 0; l < mc.num_layers; ++l) {
    QuantLayer ql;
    const std::string p = layer_prefix(l);
    for (Site s : kAllSites) ql.site_scale[static_cast<std::size_t>(s)] = read_scale(c.at(site_name(l, s) + ".scale"));
    const std::array<std::pair<uint32_t, uint32_t>, 6> shapes = {
        std::pair{H, H}, std::pair{H, H}, std::pair{H, H}, std::pair{H, H}, std::pair{F, H}, std::pair{H, F}};
    const std::array<Scale8, 6> in_scales = {in8, in8, in8, ql.scale(Site::kCtx), ql.scale(Site::kLn1),
                                             ql.scale(Site::kGelu)};
    auto lins = linears(ql);
    for (std::size_t i = 0; i < 6; ++i) {
      const std::string n = p + kLinearNames[i];
      QuantLinear& L = *lins[i];
      L.weight_scale = read_scale(c.at(n + ".scale"));
      L.weight = read_weight(c.at(n), shapes[i].first, shapes[i].second, mc.w_bits, L.weight_scale.value());
      L.bias.bits = 32;
      L.bias.data = read_i32(c.at(n + ".bias"), shapes[i].first);
      L.bias.shape = {shapes[i].first};
      L.bias.scale = in_scales[i].value() * L.weight_scale.value();
      L.requant = read_requant(c.at(n + ".requant"));
    }
    ql.scores_requant = read_requant(c.at(p + "scores.requant"));
    ql.ctx_requant = read_requant(c.at(p + "ctx.requant"));
    for (auto [name, ln] : {std::pair{"ln1", &ql.ln1}, std::pair{"ln2", &ql.ln2}}) {
      const TensorEntry& e = c.at(p + name);
      if (e.dtype != DType::kLnParam8) throw FormatError(e.name + ": expected lnparam8");
      expect_dims(e, {2, H});
      for (uint32_t i = 0; i < H; ++i) {
        ln->gamma.push_back(static_cast<int8_t>(e.bytes[i]));
        ln->beta.push_back(static_cast<int8_t>(e.bytes[H + i]));
      }
    }
    const TensorEntry& lut = c.at(p + "softmax.lut");
    if (lut.dtype != DType::kU8) throw FormatError(lut.name + ": expected u8");
    expect_dims(lut, {256});
    std::copy(lut.bytes.begin(), lut.bytes.end(), ql.softmax_lut.entries.begin());
    ql.softmax_lut.input_step = 1.0 / ql.scale(Site::kScores).value();
    const TensorEntry& gl = c.at(p + "gelu.lut");
    if (gl.dtype != DType::kI8) throw FormatError(gl.name + ": expected i8");
    expect_dims(gl, {256});
    for (std::size_t i = 0; i < 256; ++i) ql.gelu_lut[i] = static_cast<int8_t>(gl.bytes[i]);
    in8 = ql.scale(Site::kLn2);
    qm.layers.push_back(std::move(ql));
  }
  HostWeights& h = qm.host;
  auto mat = [&](const std::string& name, uint32_t rows, uint32_t cols) {
    Matrix m(rows, cols);
    m.data = read_f32(c.at(name), {rows, cols});
    return m;
  };
  const auto labels = static_cast<uint32_t>(mc.num_labels);
  h.word = mat("embed.word", static_cast<uint32_t>(mc.vocab_size), H);
  h.position = mat("embed.position", static_cast<uint32_t>(mc.max_position), H);
  h.segment = mat("embed.segment", static_cast<uint32_t>(mc.type_vocab), H);
  h.ln_gamma = read_f32(c.at("embed.ln.gamma"), {H});
  h.ln_beta = read_f32(c.at("embed.ln.beta"), {H});
  h.pooler.w = mat("pooler.W", H, H);
  h.pooler.b = read_f32(c.at("pooler.b"), {H});
  h.classifier.w = mat("cls.W", labels, H);
  h.classifier.b = read_f32(c.at("cls.b"), {labels});
  return qm;
}

FqbtContainer quantize_model(const FloatModel& fm, const SiteSpecs& specs) {
  return container_from_model(build_quant_model(fm, specs));
}

std::string CompressionReport::to_text() const {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(6);
  os << "encoder_quant_bytes=" << encoder_quant_bytes << "\n"
     << "encoder_float_bytes=" << encoder_float_bytes << "\n"
     << "host_float_bytes=" << host_float_bytes << "\n"
     << "encoder_ratio=" << encoder_ratio << "\n"
     << "with_host_ratio=" << with_host_ratio << "\n";
  return os.str();
}

CompressionReport compression_report(const FqbtContainer& c) {
  CompressionReport r;
  const ModelConfig& mc = c.config;
  for (const auto& t : c.tensors) {
    const bool encoder = t.name.starts_with("layer") || t.name.starts_with("encoder.");
    if (encoder) {
      r.encoder_quant_bytes += static_cast<int64_t>(t.bytes.size());
    } else {
      r.host_float_bytes += static_cast<int64_t>(t.bytes.size());
    }
  }
  const int64_t h = mc.hidden, f = mc.ffn_dim;
  const int64_t params_per_layer = 4 * (h * h + h) + (f * h + f) + (h * f + h) + 4 * h;
  r.encoder_float_bytes = 4 * params_per_layer * mc.num_layers;
  r.encoder_ratio = static_cast<double>(r.encoder_float_bytes) / static_cast<double>(r.encoder_quant_bytes);
  r.with_host_ratio = static_cast<double>(r.encoder_float_bytes + r.host_float_bytes) /
                      static_cast<double>(r.encoder_quant_bytes + r.host_float_bytes);
  return r;
}

// ---- float checkpoint ---------------------------------------------------------------

std::vector<std::pair<std::string, std::vector<uint32_t>>> checkpoint_schema(const ModelConfig& mc) {
  const auto H = static_cast<uint32_t>(mc.hidden);
  const auto F = static_cast<uint32_t>(mc.ffn_dim);
  std::vector<std::pair<std::string, std::vector<uint32_t>>> s = {
      {"embed.word", {static_cast<uint32_t>(mc.vocab_size), H}},
      {"embed.position", {static_cast<uint32_t>(mc.max_position), H}},
      {"embed.segment", {static_cast<uint32_t>(mc.type_vocab), H}},
      {"embed.ln.gamma", {H}},
      {"embed.ln.beta", {H}},
  };
  for (int l = 0; l < mc.num_layers; ++l) {
    const std::string p = layer_prefix(l);
    for (const char* n : {"q", "k", "v", "o"}) {
      s.push_back({p + "W" + n, {H, H}});
      s.push_back({p + "b" + n, {H}});
    }
    s.push_back({p + "W1", {F, H}});
    s.push_back({p + "b1", {F}});
    s.push_back({p + "W2", {H, F}});
    s.push_back({p + "b2", {H}});
    for (const char* n : {"ln1.gamma", "ln1.beta", "ln2.gamma", "ln2.beta"}) s.push_back({p + n, {H}});
  }
  const auto labels = static_cast<uint32_t>(mc.num_labels);
  s.push_back({"pooler.W", {H, H}});
  s.push_back({"pooler.b", {H}});
  s.push_back({"cls.W", {labels, H}});
  s.push_back({"cls.b", {labels}});
  return s;
}

namespace {

// Pointers into a FloatModel in checkpoint_schema order.
template <class FM>
auto schema_slots(FM& fm) {
  using Vec = std::conditional_t<std::is_const_v<FM>, const std::vector<float>, std::vector<float>>;
  std::vector<Vec*> v = {&fm.host.word.data, &fm.host.position.data, &fm.host.segment.data, &fm.host.ln_gamma,
                         &fm.host.ln_beta};
  for (auto& l : fm.layers) {
    for (auto* lin : {&l.q, &l.k, &l.v, &l.o, &l.ffn1, &l.ffn2}) {
      v.push_back(&lin->w.data);
      v.push_back(&lin->b);
    }
    for (auto* p : {&l.ln1_gamma, &l.ln1_beta, &l.ln2_gamma, &l.ln2_beta}) v.push_back(p);
  }
  v.push_back(&fm.host.pooler.w.data);
  v.push_back(&fm.host.pooler.b);
  v.push_back(&fm.host.classifier.w.data);
  v.push_back(&fm.host.classifier.b);
  return v;
}

void set_matrix_shapes(FloatModel& fm) {
  const ModelConfig& mc = fm.config;
  const auto H = static_cast<std::size_t>(mc.hidden);
  const auto F = static_cast<std::size_t>(mc.ffn_dim);
  auto shape = [](Matrix& m, std::size_t r, std::size_t c) {
    m.rows = r;
    m.cols = c;
  };
  shape(fm.host.word, static_cast<std::size_t>(mc.vocab_size), H);
  shape(fm.host.position, static_cast<std::size_t>(mc.max_position), H);
  shape(fm.host.segment, static_cast<std::size_t>(mc.type_vocab), H);
  shape(fm.host.pooler.w, H, H);
  shape(fm.host.classifier.w, static_cast<std::size_t>(mc.num_labels), H);
  fm.layers.resize(static_cast<std::size_t>(mc.num_layers));
  for (FloatLayer& l : fm.layers) {
    for (FloatLinear* lin : {&l.q, &l.k, &l.v, &l.o}) shape(lin->w, H, H);
    shape(l.ffn1.w, F, H);
    shape(l.ffn2.w, H, F);
  }
}

}  // namespace

void save_float_checkpoint(const FloatModel& fm, const std::filesystem::path& path) {
  const auto schema = checkpoint_schema(fm.config);
  const auto slots = schema_slots(fm);
  json manifest;
  manifest["config"] = config_json(fm.config);
  manifest["tensors"] = json::array();
  for (const auto& [name, dims] : schema) manifest["tensors"].push_back({{"name", name}, {"shape", dims}});
  const std::string m = manifest.dump();

  Writer w;
  w.raw(std::span(reinterpret_cast<const uint8_t*>(kCkptMagic), 4));
  w.u16(kCkptVersion);
  w.u32(static_cast<uint32_t>(m.size()));
  w.str(m);
  for (std::size_t i = 0; i < schema.size(); ++i) {
    const auto& [name, dims] = schema[i];
    std::size_t n = 1;
    for (uint32_t d : dims) n *= d;
    if (slots[i]->size() != n) throw ArgumentError("save_float_checkpoint: " + name + " has wrong element count");
    w.u32(static_cast<uint32_t>(name.size()));
    w.str(name);
    w.u32(static_cast<uint32_t>(dims.size()));
    for (uint32_t d : dims) w.u32(d);
    for (float v : *slots[i]) w.f32(v);
  }
  write_file(path, w.buf);
}

namespace {

struct RawCheckpoint {
  ModelConfig config;
  std::map<std::string, std::pair<std::vector<uint32_t>, std::vector<float>>> tensors;
};

RawCheckpoint read_raw_checkpoint(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  Reader r(bytes, "checkpoint");
  if (bytes.size() < 10 || std::memcmp(r.take(4).data(), kCkptMagic, 4) != 0) {
    throw FormatError("checkpoint: bad magic in " + path.string());
  }
  const uint16_t version = r.u16();
  if (version != kCkptVersion) throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  RawCheckpoint raw;
  try {
    const json manifest = json::parse(r.str(r.u32()));
    raw.config = config_from_json(manifest.at("config"));
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint: bad manifest: ") + e.what());
  }
  while (r.remaining() > 0) {
    const std::string name = r.str(r.u32());
    std::vector<uint32_t> dims(r.u32());
    std::size_t n = 1;
    for (auto& d : dims) n *= (d = r.u32());
    if (n > r.remaining() / 4) throw FormatError("checkpoint: truncated data for " + name);
    std::vector<float> v(n);
    for (auto& x : v) x = r.f32();
    raw.tensors[name] = {std::move(dims), std::move(v)};
  }
  return raw;
}

}  // namespace

FloatModel import_float_checkpoint(const std::filesystem::path& path, const ModelConfig& mc) {
  mc.validate();
  RawCheckpoint raw = read_raw_checkpoint(path);
  FloatModel fm;
  fm.config = mc;
  set_matrix_shapes(fm);
  const auto schema = checkpoint_schema(mc);
  const auto slots = schema_slots(fm);
  for (std::size_t i = 0; i < schema.size(); ++i) {
    const auto& [name, dims] = schema[i];
    auto it = raw.tensors.find(name);
    if (it == raw.tensors.end()) throw FormatError("checkpoint: missing tensor " + name);
    if (it->second.first != dims) {
      throw FormatError("checkpoint: shape mismatch for " + name + ": expected " + dims_str(dims) + ", found " +
                        dims_str(it->second.first));
    }
    *slots[i] = std::move(it->second.second);
  }
  return fm;
}

FloatModel import_float_checkpoint(const std::filesystem::path& path) {
  ModelConfig mc = read_raw_checkpoint(path).config;
  return import_float_checkpoint(path, mc);
}

// ---- calibration -------------------------------------------------------------------

CalibStream parse_calib_text(const std::string& text, const ModelConfig& mc) {
  CalibStream out;
  std::istringstream lines(text);
  std::string line;
  int lineno = 0;
  while (std::getline(lines, line)) {
    ++lineno;
    std::istringstream toks(line);
    std::vector<int32_t> seq;
    std::string tok;
    while (toks >> tok) {
      std::size_t used = 0;
      long long id = 0;
      try {
        id = std::stoll(tok, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != tok.size()) throw FormatError("calibration line " + std::to_string(lineno) + ": bad token '" + tok + "'");
      if (id < 0 || id >= mc.vocab_size) {
        throw FormatError("calibration line " + std::to_string(lineno) + ": token id " + tok + " outside vocabulary");
      }
      seq.push_back(static_cast<int32_t>(id));
    }
    if (seq.empty()) continue;
    if (seq.size() > static_cast<std::size_t>(mc.seq_len)) {
      throw FormatError("calibration line " + std::to_string(lineno) + ": sequence longer than seq_len");
    }
    out.push_back(std::move(seq));
  }
  return out;
}

CalibStream read_calib_file(const std::filesystem::path& path, const ModelConfig& mc) {
  return parse_calib_text(read_file_text(path), mc);
}

SiteSpecs calibrate(const FloatModel& fm, const CalibStream& stream, const QuantSpec& defaults) {
  if (stream.empty()) throw NotCalibratedError("not calibrated: calibration stream is empty");
  SiteSpecs specs;
  for (const auto& name : all_site_names(fm.config)) {
    QuantSpec s = defaults;
    s.bits = fm.config.a_bits;
    s.ema_state.reset();
    specs[name] = s;
  }
  for (const auto& seq : stream) {
    std::map<std::string, double> batch_max;
    float_oracle_forward(seq, fm, [&](const std::string& site, std::span<const double> v) {
      double m = 0.0;
      for (double x : v) m = std::max(m, std::abs(x));
      batch_max[site] = m;
    });
    for (auto& [name, spec] : specs) {
      spec.ema_state = ema_update(spec.ema_state, batch_max.at(name), spec.ema_decay);
    }
  }
  for (auto& [name, spec] : specs) {
    if (!(*spec.ema_state > 0.0)) throw NotCalibratedError("not calibrated: site " + name + " saw only zeros");
    spec.max_clip = *spec.ema_state;
  }
  return specs;
}

std::string specs_to_json(const SiteSpecs& specs) {
  json j = json::object();
  for (const auto& [name, s] : specs) {
    const double scale = symmetric_rail(s.bits) / s.max_clip;
    const Scale8 s8 = quantize_scale8(scale);
    j[name] = {{"bits", s.bits},
               {"ema_decay", s.ema_decay},
               {"ema", s.ema_state ? json(*s.ema_state) : json(nullptr)},
               {"max_clip", s.max_clip},
               {"scale", scale},
               {"scale8_mantissa", s8.mantissa},
               {"scale8_exp2", s8.exp2}};
  }
  json doc = {{"format", "fqbert-specs"}, {"version", 1}, {"sites", j}};
  return doc.dump(2) + "\n";
}

SiteSpecs specs_from_json(const std::string& text) {
  SiteSpecs specs;
  try {
    const json doc = json::parse(text);
    if (doc.at("format") != "fqbert-specs") throw FormatError("specs: not a spec file");
    for (const auto& [name, j] : doc.at("sites").items()) {
      QuantSpec s;
      s.bits = j.at("bits");
      s.ema_decay = j.at("ema_decay");
      if (!j.at("ema").is_null()) s.ema_state = j.at("ema").get<double>();
      s.max_clip = j.at("max_clip");
      s.validate();
      specs[name] = s;
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("specs: ") + e.what());
  }
  return specs;
}

std::string read_file_text(const std::filesystem::path& path) {
  const auto b = read_file_bytes(path);
  return std::string(b.begin(), b.end());
}

void write_file(const std::filesystem::path& path, std::span<const uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  write_file(path, std::span(reinterpret_cast<const uint8_t*>(text.data()), text.size()));
}

}  // namespace fqbert
