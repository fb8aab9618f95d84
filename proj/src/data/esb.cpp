#include "eegtta/data/esb.hpp"

#include <cmath>

#include "eegtta/binary_io.hpp"

namespace eegtta {

const char* to_string(EsbErrc c) {
  switch (c) {
    case EsbErrc::BadMagic: return "bad magic";
    case EsbErrc::VersionMismatch: return "version mismatch";
    case EsbErrc::TruncatedPayload: return "truncated payload";
    case EsbErrc::DimMismatch: return "dimension mismatch";
    case EsbErrc::NonFinite: return "non-finite value";
    case EsbErrc::BadLabel: return "bad label";
    case EsbErrc::Io: return "i/o error";
  }
  return "unknown";
}

namespace {

constexpr std::size_t kHeaderBytes = 4 + 2 + 4 + 2 + 4 + 4;
constexpr std::size_t kRecordMetaBytes = 2 + 2 + 4 + 4 + 4 + 1;

bool valid_label(std::int8_t v) { return v >= -1 && v <= 1; }

void check_finite(const SegmentRecord& r, std::size_t index) {
  if (!std::isfinite(r.local_rt) || !std::isfinite(r.global_rt))
    throw EsbError(EsbErrc::NonFinite, "reaction time of record " + std::to_string(index));
  for (float v : r.payload)
    if (!std::isfinite(v)) throw EsbError(EsbErrc::NonFinite, "payload of record " + std::to_string(index));
}

}  // namespace

std::vector<std::uint8_t> encode_esb(const Dataset& d) {
  const std::size_t n = std::size_t{d.channels} * d.samples;
  ByteWriter w;
  w.bytes("ESB1");
  w.u16(kEsbVersion);
  w.u32(static_cast<std::uint32_t>(d.records.size()));
  w.u16(d.channels);
  w.u32(d.samples);
  w.u32(d.sample_rate);
  for (std::size_t i = 0; i < d.records.size(); ++i) {
    const auto& r = d.records[i];
    if (r.payload.size() != n)
      throw EsbError(EsbErrc::DimMismatch, "record " + std::to_string(i) + " has " +
                                               std::to_string(r.payload.size()) + " values, header says " +
                                               std::to_string(n));
    check_finite(r, i);
    w.u16(r.subject);
    w.u16(r.session);
    w.u32(r.trial);
    w.f32(r.local_rt);
    w.f32(r.global_rt);
    w.i8(static_cast<std::int8_t>(r.label));
    w.f32s(r.payload);
  }
  return w.take();
}

Dataset decode_esb(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4) throw EsbError(EsbErrc::TruncatedPayload, "file shorter than its magic");
  ByteReader r(bytes);
  const std::string magic = r.bytes(4);
  if (magic != "ESB1") throw EsbError(EsbErrc::BadMagic, "expected 'ESB1'");
  if (bytes.size() < kHeaderBytes) throw EsbError(EsbErrc::TruncatedPayload, "header cut short");
  const std::uint16_t version = r.u16();
  if (version != kEsbVersion)
    throw EsbError(EsbErrc::VersionMismatch, "file version " + std::to_string(version) +
                                                 ", reader supports " + std::to_string(kEsbVersion));
  Dataset d;
  const std::uint32_t count = r.u32();
  d.channels = r.u16();
  d.samples = r.u32();
  d.sample_rate = r.u32();
  if (d.channels == 0 || d.samples == 0)
    throw EsbError(EsbErrc::DimMismatch, "zero channels or samples in header");
  const std::size_t n = std::size_t{d.channels} * d.samples;
  const std::size_t per_record = kRecordMetaBytes + 4 * n;
  if (r.remaining() / per_record < count || r.remaining() < per_record * count)
    throw EsbError(EsbErrc::TruncatedPayload, "header announces " + std::to_string(count) +
                                                  " records, file holds " +
                                                  std::to_string(r.remaining() / per_record));
  if (r.remaining() != per_record * count)
    throw EsbError(EsbErrc::DimMismatch, std::to_string(r.remaining() - per_record * count) +
                                             " trailing bytes after the last record");
  d.records.resize(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    auto& rec = d.records[i];
    rec.subject = r.u16();
    rec.session = r.u16();
    rec.trial = r.u32();
    rec.local_rt = r.f32();
    rec.global_rt = r.f32();
    const std::int8_t lab = r.i8();
    if (!valid_label(lab))
      throw EsbError(EsbErrc::BadLabel, "record " + std::to_string(i) + " label " + std::to_string(lab));
    rec.label = static_cast<Label>(lab);
    rec.payload.resize(n);
    for (auto& v : rec.payload) v = r.f32();
    check_finite(rec, i);
  }
  return d;
}

void write_esb(const std::string& path, const Dataset& d) {
  const auto bytes = encode_esb(d);
  try {
    write_file_bytes(path, bytes);
  } catch (const std::runtime_error& e) {
    throw EsbError(EsbErrc::Io, e.what());
  }
}

Dataset read_esb(const std::string& path) {
  std::vector<std::uint8_t> bytes;
  try {
    bytes = read_file_bytes(path);
  } catch (const std::runtime_error& e) {
    throw EsbError(EsbErrc::Io, e.what());
  }
  try {
    return decode_esb(bytes);
  } catch (const EsbError& e) {
    throw EsbError(e.code(), path + ": " + e.detail());
  }
}

}  // namespace eegtta
