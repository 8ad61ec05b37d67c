#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "dfer/encoder_config.hpp"
#include "dfer/errors.hpp"
#include "dfer/sha256.hpp"
#include "dfer/tensor.hpp"

// Single binary container for encoder weights and training checkpoints.
//
//   magic "DFRT" | u32 version | u32 kind | encoder geometry (7 x u32)
//   u64 record count
//   per record: u32 name length, name bytes, u32 rank, u64 extents, f32 data
//   checkpoints add: u32 stage, u32 epochs_done, u64 seed,
//                    u64 echo length + bytes, u64 loss count + f64 losses
//   trailer: 32-byte SHA-256 of everything above it
//
// All integers and floats are little-endian. Values are stored as f32: the
// float instantiation is the product; the double instantiation exists for
// gradient verification and is never serialized.

namespace dfer {

inline constexpr char kFileMagic[4] = {'D', 'F', 'R', 'T'};
inline constexpr std::uint32_t kFileVersion = 1;

enum class FileKind : std::uint32_t { text_encoder = 1, image_encoder = 2, checkpoint = 3 };

struct TensorRecord {
  std::string name;
  Tensor<float> tensor;
};

struct CheckpointExtra {
  std::uint32_t stage = 0;
  std::uint32_t epochs_done = 0;
  std::uint64_t seed = 0;
  std::string config_echo;
  std::vector<double> loss_history;
};

struct TensorFile {
  FileKind kind = FileKind::checkpoint;
  EncoderConfig config;
  std::vector<TensorRecord> records;
  std::optional<CheckpointExtra> extra;

  const TensorRecord* find(const std::string& name) const {
    for (const auto& r : records)
      if (r.name == name) return &r;
    return nullptr;
  }
};

namespace detail {

inline void put_u32(std::string& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& b, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_f32(std::string& b, float v) {
  std::uint32_t u;
  std::memcpy(&u, &v, 4);
  put_u32(b, u);
}
inline void put_f64(std::string& b, double v) {
  std::uint64_t u;
  std::memcpy(&u, &v, 8);
  put_u64(b, u);
}

struct Cursor {
  const std::string& buf;
  std::size_t pos = 0;

  void need(std::size_t n) const {
    if (pos + n > buf.size())
      throw FormatError(FormatError::Kind::truncated, "container truncated at byte " +
                                                          std::to_string(pos));
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += 8;
    return v;
  }
  float f32() {
    std::uint32_t u = this->u32();
    float v;
    std::memcpy(&v, &u, 4);
    return v;
  }
  double f64() {
    std::uint64_t u = this->u64();
    double v;
    std::memcpy(&v, &u, 8);
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

}  // namespace detail

inline void write_tensor_file(const std::string& path, const TensorFile& tf) {
  tf.config.validate();
  std::string b;
  b.append(kFileMagic, 4);
  detail::put_u32(b, kFileVersion);
  detail::put_u32(b, static_cast<std::uint32_t>(tf.kind));
  for (std::int64_t v : {tf.config.embd, tf.config.layers, tf.config.heads, tf.config.tkn_max,
                         tf.config.image_size, tf.config.image_patch, tf.config.channels})
    detail::put_u32(b, static_cast<std::uint32_t>(v));
  detail::put_u64(b, tf.records.size());
  for (const auto& r : tf.records) {
    if (r.name.empty() || r.name.size() > 4096)
      throw FormatError(FormatError::Kind::bad_record, "record name empty or oversized");
    detail::put_u32(b, static_cast<std::uint32_t>(r.name.size()));
    b.append(r.name);
    detail::put_u32(b, static_cast<std::uint32_t>(r.tensor.rank()));
    for (std::int64_t e : r.tensor.shape) detail::put_u64(b, static_cast<std::uint64_t>(e));
    for (float v : r.tensor.data) detail::put_f32(b, v);
  }
  if (tf.kind == FileKind::checkpoint) {
    const CheckpointExtra& x = tf.extra ? *tf.extra : CheckpointExtra{};
    detail::put_u32(b, x.stage);
    detail::put_u32(b, x.epochs_done);
    detail::put_u64(b, x.seed);
    detail::put_u64(b, x.config_echo.size());
    b.append(x.config_echo);
    detail::put_u64(b, x.loss_history.size());
    for (double v : x.loss_history) detail::put_f64(b, v);
  }
  auto digest = sha256_bytes(b.data(), b.size());
  b.append(reinterpret_cast<const char*>(digest.data()), digest.size());

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path);
  out.write(b.data(), static_cast<std::streamsize>(b.size()));
  out.flush();
  if (!out) throw IoError("write failed: " + path);
}

inline TensorFile read_tensor_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path);
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed: " + path);

  if (buf.size() < 4 || std::memcmp(buf.data(), kFileMagic, 4) != 0)
    throw FormatError(FormatError::Kind::bad_magic, path + ": not a tensor container");

  // Parse with bounds checks first so a short file reports as truncation,
  // then verify the trailer hash over the parsed span.
  detail::Cursor c{buf, 4};
  const std::uint32_t version = c.u32();
  if (version != kFileVersion)
    throw FormatError(FormatError::Kind::bad_version,
                      path + ": unsupported version " + std::to_string(version));
  const std::uint32_t kind_raw = c.u32();
  if (kind_raw < 1 || kind_raw > 3)
    throw FormatError(FormatError::Kind::bad_kind,
                      path + ": unknown file kind " + std::to_string(kind_raw));

  TensorFile tf;
  tf.kind = static_cast<FileKind>(kind_raw);
  tf.config.embd = c.u32();
  tf.config.layers = c.u32();
  tf.config.heads = c.u32();
  tf.config.tkn_max = c.u32();
  tf.config.image_size = c.u32();
  tf.config.image_patch = c.u32();
  tf.config.channels = c.u32();

  const std::uint64_t n_records = c.u64();
  for (std::uint64_t r = 0; r < n_records; ++r) {
    TensorRecord rec;
    const std::uint32_t name_len = c.u32();
    if (name_len == 0 || name_len > 4096)
      throw FormatError(FormatError::Kind::bad_record, path + ": bad record name length");
    rec.name = c.bytes(name_len);
    const std::uint32_t rank = c.u32();
    if (rank > 8) throw FormatError(FormatError::Kind::bad_record, path + ": rank > 8");
    Shape s;
    std::uint64_t numel = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      std::uint64_t e = c.u64();
      if (e > (1ull << 32)) throw FormatError(FormatError::Kind::bad_record, path + ": absurd extent");
      numel *= e;
      if (numel * 4 > buf.size())
        throw FormatError(FormatError::Kind::truncated, path + ": record larger than file");
      s.push_back(static_cast<std::int64_t>(e));
    }
    rec.tensor = Tensor<float>(std::move(s));
    for (std::int64_t i = 0; i < rec.tensor.numel(); ++i) rec.tensor[i] = c.f32();
    tf.records.push_back(std::move(rec));
  }

  if (tf.kind == FileKind::checkpoint) {
    CheckpointExtra x;
    x.stage = c.u32();
    x.epochs_done = c.u32();
    x.seed = c.u64();
    const std::uint64_t echo_len = c.u64();
    if (echo_len > buf.size())
      throw FormatError(FormatError::Kind::truncated, path + ": oversized config echo");
    x.config_echo = c.bytes(echo_len);
    const std::uint64_t n_loss = c.u64();
    if (n_loss * 8 > buf.size())
      throw FormatError(FormatError::Kind::truncated, path + ": oversized loss history");
    for (std::uint64_t i = 0; i < n_loss; ++i) x.loss_history.push_back(c.f64());
    tf.extra = std::move(x);
  }

  if (buf.size() < c.pos + 32)
    throw FormatError(FormatError::Kind::truncated, path + ": trailer missing");
  if (buf.size() != c.pos + 32)
    throw FormatError(FormatError::Kind::bad_record,
                      path + ": " + std::to_string(buf.size() - c.pos - 32) + " trailing bytes");
  auto digest = sha256_bytes(buf.data(), c.pos);
  if (std::memcmp(digest.data(), buf.data() + c.pos, 32) != 0)
    throw FormatError(FormatError::Kind::integrity, path + ": checksum mismatch");
  return tf;
}

}  // namespace dfer
