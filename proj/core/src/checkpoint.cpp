#include "aegis/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

namespace aegis::io {
namespace {

class Writer {
 public:
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u16(std::uint16_t v) { le(v, 2); }
  void u32(std::uint32_t v) { le(v, 4); }
  void u64(std::uint64_t v) { le(v, 8); }
  void f64(double v) { le(std::bit_cast<std::uint64_t>(v), 8); }
  void bytes(std::span<const std::uint8_t> b) { out_.insert(out_.end(), b.begin(), b.end()); }
  std::vector<std::uint8_t>& data() { return out_; }

 private:
  void le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  Reader(std::span<const std::uint8_t> b, std::uint64_t base) : b_(b), base_(base) {}
  std::uint8_t u8() { return static_cast<std::uint8_t>(le(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(le(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
  std::uint64_t u64() { return le(8); }
  double f64() { return std::bit_cast<double>(le(8)); }
  std::span<const std::uint8_t> bytes(std::uint64_t n) {
    need(n);
    auto s = b_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t count(std::uint64_t limit, const char* what) {
    const std::uint64_t v = u64();
    if (v > limit) fail(std::string("implausible ") + what);
    return static_cast<std::size_t>(v);
  }
  bool done() const { return pos_ == b_.size(); }
  std::uint64_t offset() const { return base_ + pos_; }
  [[noreturn]] void fail(const std::string& what) const { throw CheckpointError(what, offset()); }

 private:
  void need(std::uint64_t n) const {
    if (n > b_.size() - pos_) fail("truncated data");
  }
  std::uint64_t le(int n) {
    need(static_cast<std::uint64_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(b_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  std::span<const std::uint8_t> b_;
  std::uint64_t base_;
  std::size_t pos_ = 0;
};

std::uint32_t crc(std::span<const std::uint8_t> b) {
  uLong c = crc32(0L, Z_NULL, 0);
  return static_cast<std::uint32_t>(crc32(c, b.data(), static_cast<uInt>(b.size())));
}

void write_network(Writer& w, const nn::Network& net) {
  w.u32(static_cast<std::uint32_t>(net.input_shape().size()));
  for (std::size_t d : net.input_shape()) w.u64(d);
  w.u32(static_cast<std::uint32_t>(net.size()));
  for (const auto& l : net.layers()) {
    const auto& s = l.spec;
    w.u8(static_cast<std::uint8_t>(s.kind));
    for (std::size_t v : {s.in_channels, s.out_channels, s.kernel, s.stride, s.padding,
                          s.in_features, s.out_features})
      w.u64(v);
  }
  w.u32(static_cast<std::uint32_t>(net.exit_points().size()));
  for (std::size_t e : net.exit_points()) w.u64(e);
}

constexpr std::uint64_t kMaxDim = 1u << 20;

nn::Network read_network(Reader& r) {
  const std::uint32_t rank = r.u32();
  if (rank == 0 || rank > 4) r.fail("bad input rank");
  nn::Shape in;
  for (std::uint32_t i = 0; i < rank; ++i) in.push_back(r.count(kMaxDim, "dimension"));
  const std::uint32_t n = r.u32();
  if (n == 0 || n > 4096) r.fail("bad layer count");
  std::vector<nn::LayerSpec> specs;
  for (std::uint32_t i = 0; i < n; ++i) {
    nn::LayerSpec s;
    const std::uint8_t kind = r.u8();
    if (kind > static_cast<std::uint8_t>(nn::LayerKind::flatten)) r.fail("unknown layer kind");
    s.kind = static_cast<nn::LayerKind>(kind);
    for (std::size_t* f : {&s.in_channels, &s.out_channels, &s.kernel, &s.stride, &s.padding,
                           &s.in_features, &s.out_features})
      *f = r.count(kMaxDim, "layer field");
    specs.push_back(s);
  }
  const std::uint32_t ne = r.u32();
  if (ne > n) r.fail("bad exit point count");
  std::vector<std::size_t> exits;
  for (std::uint32_t i = 0; i < ne; ++i) exits.push_back(r.count(n, "exit point"));
  try {
    return nn::Network(std::move(in), std::move(specs), std::move(exits));
  } catch (const std::invalid_argument& e) {
    r.fail(std::string("invalid layer table (") + e.what() + ")");
  }
}

void write_params(Writer& w, const MultiExitModel& m, std::size_t first, std::size_t last) {
  w.u32(static_cast<std::uint32_t>(last - first));
  for (std::size_t id = first; id < last; ++id) {
    const auto& q = m.codes(id);
    w.f64(q.scale);
    w.u8(static_cast<std::uint8_t>(q.bits));
    w.u64(q.codes.size());
    for (std::int8_t c : q.codes) w.u8(static_cast<std::uint8_t>(c));
    const auto& bias = m.param_layer(id).bias;
    w.u64(bias.size());
    for (double b : bias.values()) w.f64(b);
  }
}

/// Reads parameters into `net`; returns the code tables in layer order.
std::vector<quant::QuantizedTensor> read_params(Reader& r, nn::Network& net) {
  const auto layers = net.param_layers();
  if (r.u32() != layers.size()) r.fail("parameter layer count mismatch");
  std::vector<quant::QuantizedTensor> out;
  for (std::size_t li : layers) {
    auto& layer = net.layer(li);
    quant::QuantizedTensor q;
    q.scale = r.f64();
    if (!(q.scale > 0.0) || !std::isfinite(q.scale)) r.fail("bad scale");
    q.bits = r.u8();
    if (q.bits < 2 || q.bits > 8) r.fail("bad bit width");
    q.shape = layer.weight.shape();
    const std::size_t n = r.count(kMaxDim * 64, "code count");
    if (n != layer.weight.size()) r.fail("code count mismatch");
    const auto raw = r.bytes(n);
    q.codes.resize(n);
    std::memcpy(q.codes.data(), raw.data(), n);
    const std::size_t nb = r.count(kMaxDim, "bias count");
    if (nb != layer.bias.size()) r.fail("bias count mismatch");
    for (std::size_t i = 0; i < nb; ++i) layer.bias[i] = r.f64();
    out.push_back(std::move(q));
  }
  return out;
}

void write_section(Writer& out, SectionType type, std::vector<std::uint8_t>& payload) {
  Writer head;
  head.u32(static_cast<std::uint32_t>(type));
  head.u64(payload.size());
  auto& h = head.data();
  h.insert(h.end(), payload.begin(), payload.end());
  out.bytes(h);
  out.u32(crc(h));
}

struct Section {
  SectionType type;
  std::span<const std::uint8_t> payload;
  std::uint64_t offset;  // of the payload
};

std::vector<Section> read_sections(std::span<const std::uint8_t> bytes) {
  Reader r(bytes, 0);
  const auto magic = r.bytes(4);
  if (std::memcmp(magic.data(), kMagic, 4) != 0) throw CheckpointError("bad magic", 0);
  const std::uint16_t version = r.u16();
  if (version != kCheckpointVersion)
    throw CheckpointError("unsupported version " + std::to_string(version), 4);
  const std::uint32_t count = r.u32();
  std::vector<Section> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint64_t start = r.offset();
    const std::uint32_t type = r.u32();
    const std::uint64_t len = r.u64();
    const std::uint64_t payload_at = r.offset();
    const auto payload = r.bytes(len);
    const std::uint32_t stored = r.u32();
    if (crc(bytes.subspan(start, 12 + len)) != stored) throw CheckpointError("CRC mismatch", start);
    if (type < 1 || type > 3) throw CheckpointError("unknown section type", start);
    out.push_back({static_cast<SectionType>(type), payload, payload_at});
  }
  if (!r.done()) r.fail("trailing bytes");
  return out;
}

}  // namespace

std::vector<std::uint8_t> serialize_model(const MultiExitModel& model) {
  Writer out;
  out.bytes(std::span(reinterpret_cast<const std::uint8_t*>(kMagic), 4));
  out.u16(kCheckpointVersion);
  out.u32(static_cast<std::uint32_t>(2 + model.ics().size()));
  Writer net;
  write_network(net, model.backbone());
  write_section(out, SectionType::network, net.data());
  Writer params;
  write_params(params, model, 0, model.backbone_param_layers());
  write_section(out, SectionType::params, params.data());
  std::size_t id = model.backbone_param_layers();
  for (std::size_t i = 0; i < model.ics().size(); ++i) {
    const auto& ic = model.ic(i);
    Writer w;
    w.u64(ic.position);
    write_network(w, ic.head);
    const std::size_t n = ic.head.param_layers().size();
    write_params(w, model, id, id + n);
    id += n;
    write_section(out, SectionType::ic, w.data());
  }
  return std::move(out.data());
}

MultiExitModel deserialize_model(std::span<const std::uint8_t> bytes) {
  const auto sections = read_sections(bytes);
  if (sections.size() < 2 || sections[0].type != SectionType::network ||
      sections[1].type != SectionType::params)
    throw CheckpointError("missing backbone sections", 10);
  Reader nr(sections[0].payload, sections[0].offset);
  nn::Network backbone = read_network(nr);
  if (!nr.done()) nr.fail("trailing section bytes");
  Reader pr(sections[1].payload, sections[1].offset);
  auto codes = read_params(pr, backbone);
  if (!pr.done()) pr.fail("trailing section bytes");
  std::vector<InternalClassifier> ics;
  for (std::size_t s = 2; s < sections.size(); ++s) {
    if (sections[s].type != SectionType::ic)
      throw CheckpointError("unexpected section", sections[s].offset);
    Reader r(sections[s].payload, sections[s].offset);
    InternalClassifier ic;
    ic.position = r.count(backbone.size(), "IC position");
    ic.head = read_network(r);
    auto hc = read_params(r, ic.head);
    if (!r.done()) r.fail("trailing section bytes");
    codes.insert(codes.end(), std::make_move_iterator(hc.begin()), std::make_move_iterator(hc.end()));
    ics.push_back(std::move(ic));
  }
  try {
    return MultiExitModel::assemble(std::move(backbone), std::move(codes), std::move(ics));
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("inconsistent model (") + e.what() + ")", 0);
  }
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

void save_checkpoint(const MultiExitModel& model, const std::filesystem::path& path) {
  write_file(path, serialize_model(model));
}

MultiExitModel load_checkpoint(const std::filesystem::path& path) {
  return deserialize_model(read_file(path));
}

std::vector<std::uint8_t> backbone_section_bytes(const MultiExitModel& model) {
  const auto all = serialize_model(model);
  const auto sections = read_sections(all);
  // network and params sections end where the first IC section begins
  const auto& params = sections[1];
  const std::size_t end = static_cast<std::size_t>(params.offset + params.payload.size() + 4);
  return {all.begin() + 10, all.begin() + static_cast<std::ptrdiff_t>(end)};
}

std::size_t checkpoint_hamming(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b) {
  const MultiExitModel ma = deserialize_model(a);
  const MultiExitModel mb = deserialize_model(b);
  if (ma.param_layer_count() != mb.param_layer_count())
    throw std::invalid_argument("checkpoint_hamming: architectures differ");
  std::size_t n = 0;
  for (std::size_t id = 0; id < ma.param_layer_count(); ++id) {
    const auto& ca = ma.codes(id).codes;
    const auto& cb = mb.codes(id).codes;
    if (ca.size() != cb.size()) throw std::invalid_argument("checkpoint_hamming: architectures differ");
    for (std::size_t i = 0; i < ca.size(); ++i)
      n += static_cast<std::size_t>(std::popcount(static_cast<unsigned>(
          static_cast<std::uint8_t>(ca[i]) ^ static_cast<std::uint8_t>(cb[i]))));
  }
  return n;
}

}  // namespace aegis::io
