#include "eegtta/checkpoint.hpp"

#include <fstream>
#include <iterator>
#include <type_traits>

#include "eegtta/binary_io.hpp"

namespace eegtta {

std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open '" + path + "' for reading");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::string& path, std::span<const std::uint8_t> data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
  if (!out) throw CheckpointError("write failed for '" + path + "'");
}

namespace {

template <std::floating_point T>
void put_vec(ByteWriter& w, const std::vector<T>& v) {
  for (T x : v) w.f32(static_cast<float>(x));
}

template <std::floating_point T>
std::vector<T> get_vec(ByteReader& r, std::size_t n) {
  r.need(n * 4);
  std::vector<T> v(n);
  for (auto& x : v) x = static_cast<T>(r.f32());
  return v;
}

template <std::floating_point T>
void put_conv(ByteWriter& w, const ConvParams<T>& p) {
  for (std::size_t v : {p.in_ch, p.out_ch, p.kh, p.kw, p.groups, p.pad_top, p.pad_bottom,
                        p.pad_left, p.pad_right})
    w.u32(static_cast<std::uint32_t>(v));
  w.u8(p.bias.empty() ? 0 : 1);
  put_vec(w, p.weight);
  put_vec(w, p.bias);
}

template <std::floating_point T>
ConvParams<T> get_conv(ByteReader& r) {
  ConvParams<T> p;
  p.in_ch = r.u32();
  p.out_ch = r.u32();
  p.kh = r.u32();
  p.kw = r.u32();
  p.groups = r.u32();
  p.pad_top = r.u32();
  p.pad_bottom = r.u32();
  p.pad_left = r.u32();
  p.pad_right = r.u32();
  const bool has_bias = r.u8() != 0;
  if (p.groups == 0 || p.in_ch % p.groups != 0) throw CheckpointError("checkpoint: bad conv groups");
  p.weight = get_vec<T>(r, p.out_ch * p.in_per_group() * p.kh * p.kw);
  if (has_bias) p.bias = get_vec<T>(r, p.out_ch);
  return p;
}

}  // namespace

template <std::floating_point T>
std::vector<std::uint8_t> encode_checkpoint(const Network<T>& net) {
  ByteWriter w;
  w.bytes("SAWT");
  w.u16(kCheckpointVersion);
  const Shape4 in = net.input_shape();
  w.u32(static_cast<std::uint32_t>(in.c));
  w.u32(static_cast<std::uint32_t>(in.h));
  w.u32(static_cast<std::uint32_t>(in.w));
  w.u32(static_cast<std::uint32_t>(net.layer_count()));
  for (const auto& layer : net.layers()) {
    w.u8(static_cast<std::uint8_t>(kind_of<T>(layer)));
    std::visit(
        [&](const auto& l) {
          using L = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<L, Conv2d<T>>) {
            put_conv(w, l.conv);
          } else if constexpr (std::is_same_v<L, SeparableConv2d<T>>) {
            put_conv(w, l.depthwise);
            put_conv(w, l.pointwise);
          } else if constexpr (std::is_same_v<L, BatchNorm<T>>) {
            w.u32(static_cast<std::uint32_t>(l.bn.channels()));
            w.u8(static_cast<std::uint8_t>(l.bn.mode));
            w.f32(static_cast<float>(l.bn.momentum));
            w.f32(static_cast<float>(l.bn.eps));
            put_vec(w, l.bn.gamma);
            put_vec(w, l.bn.beta);
            put_vec(w, l.bn.running_mean);
            put_vec(w, l.bn.running_var);
          } else if constexpr (std::is_same_v<L, Elu<T>>) {
            w.f32(static_cast<float>(l.alpha));
          } else if constexpr (std::is_same_v<L, AvgPool>) {
            w.u32(static_cast<std::uint32_t>(l.ph));
            w.u32(static_cast<std::uint32_t>(l.pw));
          } else if constexpr (std::is_same_v<L, Dropout>) {
            w.f32(static_cast<float>(l.rate));
          } else if constexpr (std::is_same_v<L, Linear<T>>) {
            w.u32(static_cast<std::uint32_t>(l.in));
            w.u32(static_cast<std::uint32_t>(l.out));
            put_vec(w, l.weight);
            put_vec(w, l.bias);
          }
        },
        layer);
  }
  return w.take();
}

template <std::floating_point T>
Network<T> decode_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  try {
    if (r.remaining() < 4 || r.bytes(4) != "SAWT") throw CheckpointError("checkpoint: bad magic");
    const std::uint16_t version = r.u16();
    if (version != kCheckpointVersion)
      throw CheckpointError("checkpoint: unsupported version " + std::to_string(version));
    Shape4 in{1, r.u32(), r.u32(), r.u32()};
    const std::uint32_t count = r.u32();
    std::vector<Layer<T>> layers;
    layers.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
      const auto kind = static_cast<LayerKind>(r.u8());
      switch (kind) {
        case LayerKind::Conv2d:
        case LayerKind::DepthwiseConv2d:
          layers.emplace_back(Conv2d<T>{kind, get_conv<T>(r)});
          break;
        case LayerKind::SeparableConv2d: {
          auto dw = get_conv<T>(r);
          auto pw = get_conv<T>(r);
          layers.emplace_back(SeparableConv2d<T>{std::move(dw), std::move(pw)});
          break;
        }
        case LayerKind::BatchNorm: {
          const std::uint32_t c = r.u32();
          const std::uint8_t mode = r.u8();
          if (mode > 2) throw CheckpointError("checkpoint: bad BN mode tag");
          BnState<T> b;
          b.mode = static_cast<BnMode>(mode);
          b.momentum = static_cast<T>(r.f32());
          b.eps = static_cast<T>(r.f32());
          b.gamma = get_vec<T>(r, c);
          b.beta = get_vec<T>(r, c);
          b.running_mean = get_vec<T>(r, c);
          b.running_var = get_vec<T>(r, c);
          layers.emplace_back(BatchNorm<T>{std::move(b)});
          break;
        }
        case LayerKind::Elu:
          layers.emplace_back(Elu<T>{static_cast<T>(r.f32())});
          break;
        case LayerKind::AvgPool: {
          const std::uint32_t ph = r.u32();
          const std::uint32_t pw = r.u32();
          layers.emplace_back(AvgPool{ph, pw});
          break;
        }
        case LayerKind::Dropout:
          layers.emplace_back(Dropout{static_cast<double>(r.f32())});
          break;
        case LayerKind::Flatten:
          layers.emplace_back(Flatten{});
          break;
        case LayerKind::Linear: {
          Linear<T> l;
          l.in = r.u32();
          l.out = r.u32();
          l.weight = get_vec<T>(r, l.in * l.out);
          l.bias = get_vec<T>(r, l.out);
          layers.emplace_back(std::move(l));
          break;
        }
        default:
          throw CheckpointError("checkpoint: unknown layer kind tag " +
                                std::to_string(static_cast<int>(kind)));
      }
    }
    if (r.remaining() != 0) throw CheckpointError("checkpoint: trailing bytes");
    return Network<T>(in, std::move(layers));
  } catch (const TruncatedInput& e) {
    throw CheckpointError(std::string("checkpoint: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("checkpoint: inconsistent network: ") + e.what());
  }
}

template <std::floating_point T>
void save_checkpoint(const std::string& path, const Network<T>& net) {
  write_file_bytes(path, encode_checkpoint(net));
}

template <std::floating_point T>
Network<T> load_checkpoint(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  try {
    return decode_checkpoint<T>(bytes);
  } catch (const CheckpointError& e) {
    throw CheckpointError(path + ": " + e.what());
  }
}

template std::vector<std::uint8_t> encode_checkpoint<float>(const Network<float>&);
template std::vector<std::uint8_t> encode_checkpoint<double>(const Network<double>&);
template Network<float> decode_checkpoint<float>(std::span<const std::uint8_t>);
template Network<double> decode_checkpoint<double>(std::span<const std::uint8_t>);
template void save_checkpoint<float>(const std::string&, const Network<float>&);
template void save_checkpoint<double>(const std::string&, const Network<double>&);
template Network<float> load_checkpoint<float>(const std::string&);
template Network<double> load_checkpoint<double>(const std::string&);

}  // namespace eegtta
