#include "pqd/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include <zlib.h>

namespace pqd {

namespace {

constexpr char kMagic[4] = {'P', 'Q', 'D', 'K'};
constexpr std::uint16_t kVersion = 1;

enum SectionKind : std::uint32_t {
  kTopology = 1,
  kMasks = 2,
  kPayloads = 3,
  kQParams = 4,
  kHistory = 5,
  kMetrics = 6,
  kCrc = 7,
};

class Writer {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) { raw(&v, 2); }
  void u32(std::uint32_t v) { raw(&v, 4); }
  void u64(std::uint64_t v) { raw(&v, 8); }
  void i32(std::int32_t v) { raw(&v, 4); }
  void i64(std::int64_t v) { raw(&v, 8); }
  void f32(float v) { raw(&v, 4); }
  void f64(double v) { raw(&v, 8); }
  void bytes(const void* p, std::size_t n) { raw(p, n); }

  std::vector<std::uint8_t> take() { return std::move(buf_); }
  const std::vector<std::uint8_t>& data() const { return buf_; }

 private:
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  std::vector<std::uint8_t> buf_;
};

class Reader {
 public:
  Reader(const std::uint8_t* p, std::size_t n) : p_(p), n_(n) {}

  std::uint8_t u8() { return take<std::uint8_t>(); }
  std::uint16_t u16() { return take<std::uint16_t>(); }
  std::uint32_t u32() { return take<std::uint32_t>(); }
  std::uint64_t u64() { return take<std::uint64_t>(); }
  std::int32_t i32() { return take<std::int32_t>(); }
  std::int64_t i64() { return take<std::int64_t>(); }
  float f32() { return take<float>(); }
  double f64() { return take<double>(); }
  void bytes(void* dst, std::size_t n) {
    need(n);
    std::memcpy(dst, p_ + at_, n);
    at_ += n;
  }
  std::size_t remaining() const { return n_ - at_; }

 private:
  template <typename T>
  T take() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, p_ + at_, sizeof(T));
    at_ += sizeof(T);
    return v;
  }
  void need(std::size_t n) const {
    if (at_ + n > n_)
      throw CheckpointError(CheckpointError::Kind::Truncated,
                            "checkpoint truncated: need " + std::to_string(n) + " bytes at offset " +
                                std::to_string(at_) + ", have " + std::to_string(n_ - at_));
  }
  const std::uint8_t* p_;
  std::size_t n_;
  std::size_t at_ = 0;
};

void write_shape(Writer& w, const std::vector<int>& shape) {
  w.u8(static_cast<std::uint8_t>(shape.size()));
  for (int e : shape) w.i32(e);
}

std::vector<int> read_shape(Reader& r) {
  const int nd = r.u8();
  std::vector<int> shape(static_cast<std::size_t>(nd));
  for (int i = 0; i < nd; ++i) shape[static_cast<std::size_t>(i)] = r.i32();
  return shape;
}

void write_obs(Writer& w, const ObserverState& o) {
  w.u8(o.mode);
  w.f32(o.decay);
  w.f32(o.min);
  w.f32(o.max);
  w.u8(o.seen ? 1 : 0);
}

ObserverState read_obs(Reader& r) {
  ObserverState o;
  o.mode = r.u8();
  o.decay = r.f32();
  o.min = r.f32();
  o.max = r.f32();
  o.seen = r.u8() != 0;
  return o;
}

void write_qp(Writer& w, const QuantParams& qp) {
  w.f32(qp.scale);
  w.i32(qp.zero_point);
}

QuantParams read_qp(Reader& r) {
  QuantParams qp;
  qp.scale = r.f32();
  qp.zero_point = r.i32();
  return qp;
}

std::uint32_t crc_of(const std::uint8_t* p, std::size_t n) {
  return static_cast<std::uint32_t>(crc32(crc32(0L, Z_NULL, 0), p, static_cast<uInt>(n)));
}

}  // namespace

std::int64_t Checkpoint::ft_epochs() const {
  std::int64_t total = 0;
  for (const StageEvent& e : history) total += e.epochs;
  return total;
}

std::vector<std::uint8_t> serialize(const Checkpoint& ckpt) {
  std::vector<std::pair<std::uint32_t, std::vector<std::uint8_t>>> sections;

  {
    Writer w;
    w.u8(static_cast<std::uint8_t>(ckpt.desc.arch));
    w.i32(ckpt.desc.in_c);
    w.i32(ckpt.desc.in_h);
    w.i32(ckpt.desc.in_w);
    w.i32(ckpt.desc.num_classes);
    w.i32(ckpt.desc.hidden);
    w.u8(ckpt.quant_active ? 1 : 0);
    w.u8(ckpt.on_grid ? 1 : 0);
    w.u32(static_cast<std::uint32_t>(ckpt.payloads.size()));
    sections.emplace_back(kTopology, w.take());
  }
  {
    Writer w;
    w.u8(ckpt.mask ? 1 : 0);
    if (ckpt.mask) {
      w.f32(ckpt.mask->rho);
      w.f32(ckpt.mask->gamma);
      w.u32(static_cast<std::uint32_t>(ckpt.mask->per_param.size()));
      for (const BitMask& m : ckpt.mask->per_param) {
        w.i64(m.size());
        w.bytes(m.words().data(), m.words().size() * 8);
      }
    }
    sections.emplace_back(kMasks, w.take());
  }
  {
    Writer w;
    for (const ParamPayload& p : ckpt.payloads) {
      w.u8(static_cast<std::uint8_t>(p.kind));
      write_shape(w, p.shape);
      switch (p.kind) {
        case PayloadKind::DenseF32:
        case PayloadKind::MaskedF32:
          w.u64(p.fvalues.size());
          w.bytes(p.fvalues.data(), p.fvalues.size() * 4);
          break;
        case PayloadKind::QuantU8:
        case PayloadKind::MaskedQuantU8:
          write_qp(w, p.qp);
          w.u64(p.codes.size());
          w.bytes(p.codes.data(), p.codes.size());
          break;
        case PayloadKind::BiasI32:
          w.f64(p.bias_scale);
          w.u64(p.ivalues.size());
          w.bytes(p.ivalues.data(), p.ivalues.size() * 4);
          break;
      }
    }
    sections.emplace_back(kPayloads, w.take());
  }
  {
    Writer w;
    w.u8(ckpt.quant_active ? 1 : 0);
    if (ckpt.quant_active) {
      write_obs(w, ckpt.input_site.obs);
      write_qp(w, ckpt.input_site.qp);
      w.u32(static_cast<std::uint32_t>(ckpt.act_sites.size()));
      for (const SiteQuant& s : ckpt.act_sites) {
        write_obs(w, s.obs);
        write_qp(w, s.qp);
      }
    }
    sections.emplace_back(kQParams, w.take());
  }
  {
    Writer w;
    w.u32(static_cast<std::uint32_t>(ckpt.history.size()));
    for (const StageEvent& e : ckpt.history) {
      w.u8(static_cast<std::uint8_t>(e.kind));
      w.i32(e.epochs);
      w.f32(e.rho);
      w.f32(e.alpha);
      w.f32(e.temperature);
    }
    sections.emplace_back(kHistory, w.take());
  }
  {
    Writer w;
    w.u8(ckpt.metrics.has_accuracy ? 1 : 0);
    w.f64(ckpt.metrics.accuracy_pct);
    w.i64(ckpt.metrics.nonzeros);
    sections.emplace_back(kMetrics, w.take());
  }
  sections.emplace_back(kCrc, std::vector<std::uint8_t>(4, 0));

  // Header + section table, then patch offsets and the trailing checksum.
  Writer out;
  out.bytes(kMagic, 4);
  out.u16(kVersion);
  out.u16(0);
  out.u32(static_cast<std::uint32_t>(sections.size()));
  const std::size_t table_at = out.data().size();
  for (const auto& [kind, payload] : sections) {
    out.u32(kind);
    out.u32(0);
    out.u64(0);  // offset, patched below
    out.u64(payload.size());
  }
  std::vector<std::uint8_t> bytes = out.take();
  std::vector<std::uint64_t> offsets;
  for (const auto& [kind, payload] : sections) {
    offsets.push_back(bytes.size());
    bytes.insert(bytes.end(), payload.begin(), payload.end());
  }
  for (std::size_t i = 0; i < sections.size(); ++i) {
    const std::uint64_t off = offsets[i];
    std::memcpy(bytes.data() + table_at + i * 24 + 8, &off, 8);
  }
  const std::uint32_t crc = crc_of(bytes.data(), offsets.back());
  std::memcpy(bytes.data() + offsets.back(), &crc, 4);
  return bytes;
}

Checkpoint deserialize(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw CheckpointError(CheckpointError::Kind::BadMagic, "not a model checkpoint (bad magic)");
  Reader head(bytes.data() + 4, bytes.size() - 4);
  const std::uint16_t version = head.u16();
  if (version != kVersion)
    throw CheckpointError(CheckpointError::Kind::VersionMismatch,
                          "checkpoint version " + std::to_string(version) + ", expected " +
                              std::to_string(kVersion));
  head.u16();
  const std::uint32_t nsec = head.u32();
  struct Sec {
    std::uint32_t kind;
    std::uint64_t offset, length;
  };
  std::vector<Sec> secs;
  for (std::uint32_t i = 0; i < nsec; ++i) {
    Sec s;
    s.kind = head.u32();
    head.u32();
    s.offset = head.u64();
    s.length = head.u64();
    if (s.offset + s.length > bytes.size())
      throw CheckpointError(CheckpointError::Kind::Truncated,
                            "checkpoint truncated: section " + std::to_string(s.kind) +
                                " ends past the file");
    secs.push_back(s);
  }
  auto find = [&](std::uint32_t kind) -> const Sec* {
    for (const Sec& s : secs)
      if (s.kind == kind) return &s;
    return nullptr;
  };
  const Sec* crc_sec = find(kCrc);
  if (!crc_sec || crc_sec->length != 4)
    throw CheckpointError(CheckpointError::Kind::Malformed, "missing checksum section");
  std::uint32_t stored_crc;
  std::memcpy(&stored_crc, bytes.data() + crc_sec->offset, 4);
  const std::uint32_t actual = crc_of(bytes.data(), crc_sec->offset);
  if (stored_crc != actual)
    throw CheckpointError(CheckpointError::Kind::ChecksumMismatch,
                          "checkpoint checksum mismatch (file damaged)");

  auto reader_for = [&](std::uint32_t kind) {
    const Sec* s = find(kind);
    if (!s)
      throw CheckpointError(CheckpointError::Kind::Malformed,
                            "missing section " + std::to_string(kind));
    return Reader(bytes.data() + s->offset, s->length);
  };

  Checkpoint ckpt;
  std::uint32_t param_count = 0;
  {
    Reader r = reader_for(kTopology);
    ckpt.desc.arch = static_cast<Arch>(r.u8());
    ckpt.desc.in_c = r.i32();
    ckpt.desc.in_h = r.i32();
    ckpt.desc.in_w = r.i32();
    ckpt.desc.num_classes = r.i32();
    ckpt.desc.hidden = r.i32();
    ckpt.quant_active = r.u8() != 0;
    ckpt.on_grid = r.u8() != 0;
    param_count = r.u32();
  }
  {
    Reader r = reader_for(kMasks);
    if (r.u8()) {
      PruneMask mask;
      mask.rho = r.f32();
      mask.gamma = r.f32();
      const std::uint32_t n = r.u32();
      mask.per_param.resize(n);
      for (std::uint32_t i = 0; i < n; ++i) {
        const std::int64_t bits = r.i64();
        BitMask m(bits);
        r.bytes(m.words().data(), m.words().size() * 8);
        mask.per_param[i] = std::move(m);
      }
      ckpt.mask = std::move(mask);
    }
  }
  {
    Reader r = reader_for(kPayloads);
    for (std::uint32_t i = 0; i < param_count; ++i) {
      ParamPayload p;
      p.kind = static_cast<PayloadKind>(r.u8());
      p.shape = read_shape(r);
      switch (p.kind) {
        case PayloadKind::DenseF32:
        case PayloadKind::MaskedF32: {
          p.fvalues.resize(r.u64());
          r.bytes(p.fvalues.data(), p.fvalues.size() * 4);
          break;
        }
        case PayloadKind::QuantU8:
        case PayloadKind::MaskedQuantU8: {
          p.qp = read_qp(r);
          p.codes.resize(r.u64());
          r.bytes(p.codes.data(), p.codes.size());
          break;
        }
        case PayloadKind::BiasI32: {
          p.bias_scale = r.f64();
          p.ivalues.resize(r.u64());
          r.bytes(p.ivalues.data(), p.ivalues.size() * 4);
          break;
        }
        default:
          throw CheckpointError(CheckpointError::Kind::Malformed, "unknown payload kind");
      }
      ckpt.payloads.push_back(std::move(p));
    }
  }
  {
    Reader r = reader_for(kQParams);
    if (r.u8()) {
      ckpt.input_site.obs = read_obs(r);
      ckpt.input_site.qp = read_qp(r);
      const std::uint32_t n = r.u32();
      ckpt.act_sites.resize(n);
      for (std::uint32_t i = 0; i < n; ++i) {
        ckpt.act_sites[i].obs = read_obs(r);
        ckpt.act_sites[i].qp = read_qp(r);
      }
    }
  }
  {
    Reader r = reader_for(kHistory);
    const std::uint32_t n = r.u32();
    for (std::uint32_t i = 0; i < n; ++i) {
      StageEvent e;
      e.kind = static_cast<StageKind>(r.u8());
      e.epochs = r.i32();
      e.rho = r.f32();
      e.alpha = r.f32();
      e.temperature = r.f32();
      ckpt.history.push_back(e);
    }
  }
  {
    Reader r = reader_for(kMetrics);
    ckpt.metrics.has_accuracy = r.u8() != 0;
    ckpt.metrics.accuracy_pct = r.f64();
    ckpt.metrics.nonzeros = r.i64();
  }
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const std::vector<std::uint8_t> bytes = serialize(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

namespace {

ObserverState pack_obs(const Observer& o) {
  ObserverState s;
  s.mode = o.mode == Observer::Mode::Ema ? 1 : 0;
  s.decay = o.decay;
  s.min = o.min;
  s.max = o.max;
  s.seen = o.seen;
  return s;
}

Observer unpack_obs(const ObserverState& s) {
  Observer o;
  o.mode = s.mode == 1 ? Observer::Mode::Ema : Observer::Mode::MinMax;
  o.decay = s.decay;
  o.min = s.min;
  o.max = s.max;
  o.seen = s.seen;
  return o;
}

}  // namespace

Checkpoint snapshot(const Model& model, MetricsSnapshot metrics) {
  Checkpoint ckpt;
  ckpt.desc = model.desc;
  ckpt.quant_active = model.quant_active();
  ckpt.on_grid = model.on_grid();
  ckpt.mask = model.mask();
  ckpt.history = model.history;
  ckpt.metrics = metrics;

  std::size_t int8_idx = 0;
  std::vector<const Int8Layer*> int8_of_param(model.params.size(), nullptr);
  std::vector<bool> is_bias(model.params.size(), false);
  if (ckpt.on_grid) {
    for (const Layer& L : model.layers) {
      if (L.kind != LayerKind::Conv && L.kind != LayerKind::Linear) continue;
      const Int8Layer* il = &model.int8_layers[int8_idx++];
      int8_of_param[static_cast<std::size_t>(L.weight)] = il;
      int8_of_param[static_cast<std::size_t>(L.bias)] = il;
      is_bias[static_cast<std::size_t>(L.bias)] = true;
    }
  }

  for (std::size_t pi = 0; pi < model.params.size(); ++pi) {
    const Parameter& p = model.params[pi];
    ParamPayload pay;
    pay.shape = p.value.shape();
    const BitMask* mask =
        ckpt.mask && !ckpt.mask->per_param[pi].empty() ? &ckpt.mask->per_param[pi] : nullptr;
    if (ckpt.on_grid && int8_of_param[pi]) {
      const Int8Layer& il = *int8_of_param[pi];
      if (is_bias[pi]) {
        pay.kind = PayloadKind::BiasI32;
        pay.ivalues = il.bias;
        pay.bias_scale = static_cast<double>(il.in_qp.scale) * il.weights.qp.scale;
      } else if (mask) {
        pay.kind = PayloadKind::MaskedQuantU8;
        pay.qp = il.weights.qp;
        pay.codes.reserve(static_cast<std::size_t>(mask->popcount()));
        for (std::int64_t i = 0; i < mask->size(); ++i)
          if (mask->get(i)) pay.codes.push_back(il.weights.data[static_cast<std::size_t>(i)]);
      } else {
        pay.kind = PayloadKind::QuantU8;
        pay.qp = il.weights.qp;
        pay.codes = il.weights.data;
      }
    } else if (mask) {
      pay.kind = PayloadKind::MaskedF32;
      pay.fvalues.reserve(static_cast<std::size_t>(mask->popcount()));
      for (std::int64_t i = 0; i < mask->size(); ++i)
        if (mask->get(i)) pay.fvalues.push_back(p.value[i]);
    } else {
      pay.kind = PayloadKind::DenseF32;
      pay.fvalues = p.value.vec();
    }
    ckpt.payloads.push_back(std::move(pay));
  }

  if (ckpt.quant_active) {
    ckpt.input_site.obs = pack_obs(model.input_obs);
    ckpt.input_site.qp = model.input_qp();
    for (const Layer& L : model.layers) {
      if (L.kind != LayerKind::Conv && L.kind != LayerKind::Linear) continue;
      SiteQuant s;
      s.obs = pack_obs(L.q.act_obs);
      s.qp = L.q.act_fq.qp;
      ckpt.act_sites.push_back(s);
    }
  }
  return ckpt;
}

Model restore(const Checkpoint& ckpt) {
  Model model = Model::build(ckpt.desc, 0);
  if (ckpt.payloads.size() != model.params.size())
    throw CheckpointError(CheckpointError::Kind::Malformed,
                          "payload count does not match the architecture");
  for (std::size_t pi = 0; pi < model.params.size(); ++pi) {
    const ParamPayload& pay = ckpt.payloads[pi];
    Parameter& p = model.params[pi];
    if (pay.shape != p.value.shape())
      throw CheckpointError(CheckpointError::Kind::Malformed,
                            "payload shape mismatch for " + p.name);
    const BitMask* mask = ckpt.mask && !ckpt.mask->per_param[pi].empty()
                              ? &ckpt.mask->per_param[pi]
                              : nullptr;
    switch (pay.kind) {
      case PayloadKind::DenseF32:
        if (static_cast<std::int64_t>(pay.fvalues.size()) != p.value.size())
          throw CheckpointError(CheckpointError::Kind::Malformed, "bad payload length");
        p.value = Tensor(pay.shape, pay.fvalues);
        break;
      case PayloadKind::MaskedF32: {
        if (!mask) throw CheckpointError(CheckpointError::Kind::Malformed, "masked payload without mask");
        p.value.fill(0.0f);
        std::size_t at = 0;
        for (std::int64_t i = 0; i < mask->size(); ++i)
          if (mask->get(i)) p.value[i] = pay.fvalues.at(at++);
        break;
      }
      case PayloadKind::QuantU8: {
        QuantTensor qt{pay.shape, pay.codes, pay.qp};
        p.value = dequantize_tensor(qt);
        break;
      }
      case PayloadKind::MaskedQuantU8: {
        if (!mask) throw CheckpointError(CheckpointError::Kind::Malformed, "masked payload without mask");
        QuantTensor qt;
        qt.shape = pay.shape;
        qt.qp = pay.qp;
        qt.data.assign(static_cast<std::size_t>(p.value.size()),
                       static_cast<std::uint8_t>(pay.qp.zero_point));
        std::size_t at = 0;
        for (std::int64_t i = 0; i < mask->size(); ++i)
          if (mask->get(i)) qt.data[static_cast<std::size_t>(i)] = pay.codes.at(at++);
        p.value = dequantize_tensor(qt);
        break;
      }
      case PayloadKind::BiasI32: {
        for (std::int64_t i = 0; i < p.value.size(); ++i)
          p.value[i] = static_cast<float>(pay.bias_scale *
                                          pay.ivalues[static_cast<std::size_t>(i)]);
        break;
      }
    }
  }
  if (ckpt.mask) model.attach_mask(*ckpt.mask);
  model.history = ckpt.history;

  if (ckpt.quant_active) {
    model.enable_quantization();
    model.input_obs = unpack_obs(ckpt.input_site.obs);
    std::size_t site = 0;
    for (Layer& L : model.layers) {
      if (L.kind != LayerKind::Conv && L.kind != LayerKind::Linear) continue;
      if (site >= ckpt.act_sites.size())
        throw CheckpointError(CheckpointError::Kind::Malformed, "missing activation site");
      L.q.act_obs = unpack_obs(ckpt.act_sites[site].obs);
      L.q.act_fq = FakeQuantNode{ckpt.act_sites[site].qp, true};
      ++site;
    }
    if (ckpt.on_grid) {
      // Rebuild the integer payload from the stored codes and grids.
      std::vector<Int8Layer> int8_layers;
      QuantParams cur = ckpt.input_site.qp;
      site = 0;
      for (Layer& L : model.layers) {
        if (L.kind != LayerKind::Conv && L.kind != LayerKind::Linear) continue;
        const ParamPayload& wp = ckpt.payloads[static_cast<std::size_t>(L.weight)];
        const ParamPayload& bp = ckpt.payloads[static_cast<std::size_t>(L.bias)];
        Int8Layer il;
        il.in_qp = cur;
        il.out_qp = ckpt.act_sites[site].qp;
        il.weights.shape = wp.shape;
        il.weights.qp = wp.qp;
        if (wp.kind == PayloadKind::QuantU8) {
          il.weights.data = wp.codes;
        } else if (wp.kind == PayloadKind::MaskedQuantU8) {
          const BitMask& m = ckpt.mask->per_param[static_cast<std::size_t>(L.weight)];
          il.weights.data.assign(static_cast<std::size_t>(m.size()),
                                 static_cast<std::uint8_t>(wp.qp.zero_point));
          std::size_t at = 0;
          for (std::int64_t i = 0; i < m.size(); ++i)
            if (m.get(i)) il.weights.data[static_cast<std::size_t>(i)] = wp.codes.at(at++);
        } else {
          throw CheckpointError(CheckpointError::Kind::Malformed,
                                "on-grid checkpoint with float weight payload");
        }
        if (bp.kind != PayloadKind::BiasI32)
          throw CheckpointError(CheckpointError::Kind::Malformed,
                                "on-grid checkpoint with float bias payload");
        il.bias = bp.ivalues;
        L.q.weight_fq = FakeQuantNode{wp.qp, true};
        cur = il.out_qp;
        int8_layers.push_back(std::move(il));
        ++site;
      }
      model.int8_layers = std::move(int8_layers);
      model.set_on_grid_restored(ckpt.input_site.qp);
    }
  }
  return model;
}

std::int64_t count_nonzero(const Checkpoint& ckpt) {
  std::int64_t n = 0;
  for (const ParamPayload& p : ckpt.payloads) {
    switch (p.kind) {
      case PayloadKind::DenseF32:
      case PayloadKind::MaskedF32:
        for (float v : p.fvalues)
          if (v != 0.0f) ++n;
        break;
      case PayloadKind::QuantU8:
      case PayloadKind::MaskedQuantU8:
        for (std::uint8_t c : p.codes)
          if (static_cast<int>(c) != p.qp.zero_point) ++n;
        break;
      case PayloadKind::BiasI32:
        for (std::int32_t v : p.ivalues)
          if (v != 0) ++n;
        break;
    }
  }
  return n;
}

}  // namespace pqd
