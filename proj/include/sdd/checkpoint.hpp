#pragma once

// Flat binary checkpoints.
//
//   "SDDM" | version u32 | K | c | h | w | block count |
//   in_channels | input_size | (out, kernel, stride, padding) per block |
//   parameter count | per parameter: ndim, dims..., float32 values
//
// All integers are little-endian u32, all values little-endian IEEE float32.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "sdd/errors.hpp"
#include "sdd/io.hpp"
#include "sdd/models.hpp"

namespace sdd {

inline constexpr char kCheckpointMagic[4] = {'S', 'D', 'D', 'M'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class ByteReader {
 public:
  explicit ByteReader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

  std::uint32_t u32(const char* what) {
    if (pos_ + 4 > bytes_.size()) throw DataError(std::string("checkpoint truncated while reading ") + what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }

  float f32(const char* what) { return std::bit_cast<float>(u32(what)); }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

template <class T>
std::vector<std::uint8_t> encode_checkpoint(const ConvNet<T>& net) {
  const auto& spec = net.spec();
  std::vector<std::uint8_t> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
  auto u32 = [&](std::size_t v) { detail::put_u32(out, static_cast<std::uint32_t>(v)); };
  u32(kCheckpointVersion);
  u32(spec.num_classes);
  u32(spec.feature_channels());
  u32(spec.feature_size());
  u32(spec.feature_size());
  u32(spec.blocks.size());
  u32(spec.in_channels);
  u32(spec.input_size);
  for (const auto& b : spec.blocks) {
    u32(b.out_channels);
    u32(b.kernel);
    u32(b.stride);
    u32(b.padding);
  }
  const auto params = net.parameters();
  u32(params.size());
  for (const auto& p : params) {
    u32(p.ndim());
    for (auto d : p.shape()) u32(d);
    for (auto v : p.data()) detail::put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  return out;
}

template <class T>
ConvNet<T> decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
    throw DataError("checkpoint: bad magic (expected \"SDDM\")");
  }
  const std::vector<std::uint8_t> body(bytes.begin() + 4, bytes.end());
  detail::ByteReader r(body);
  const auto version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw DataError("checkpoint: unsupported version " + std::to_string(version));
  }
  ConvNetSpec spec;
  spec.num_classes = r.u32("K");
  const auto c = r.u32("c");
  const auto h = r.u32("h");
  const auto w = r.u32("w");
  const auto nblocks = r.u32("block count");
  spec.in_channels = r.u32("in_channels");
  spec.input_size = r.u32("input_size");
  for (std::uint32_t i = 0; i < nblocks; ++i) {
    ConvBlockSpec b;
    b.out_channels = r.u32("block");
    b.kernel = r.u32("block");
    b.stride = r.u32("block");
    b.padding = r.u32("block");
    spec.blocks.push_back(b);
  }
  try {
    spec.validate();
  } catch (const ConfigError& e) {
    throw DataError(std::string("checkpoint: invalid network spec: ") + e.what());
  }
  if (spec.feature_channels() != c || spec.feature_size() != h || h != w) {
    throw DataError("checkpoint: header dims disagree with block list");
  }
  auto net = ConvNet<T>::init(spec, 0);
  const auto expected = net.parameters();
  const auto count = r.u32("parameter count");
  if (count != expected.size()) throw DataError("checkpoint: parameter count mismatch");
  std::vector<Tensor<T>> params;
  for (std::uint32_t i = 0; i < count; ++i) {
    Shape shape(r.u32("ndim"));
    for (auto& d : shape) d = r.u32("dims");
    if (shape != expected[i].shape()) {
      throw DataError("checkpoint: parameter " + std::to_string(i) + " has shape " + to_string(shape) +
                      ", expected " + to_string(expected[i].shape()));
    }
    std::vector<T> values(numel(shape));
    for (auto& v : values) v = static_cast<T>(r.f32("values"));
    params.emplace_back(shape, std::move(values), true);
  }
  if (!r.done()) throw DataError("checkpoint: trailing bytes");
  net.load_parameters(params);
  return net;
}

template <class T>
void save_checkpoint(const ConvNet<T>& net, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(net);
  write_file_atomic(path, std::string(bytes.begin(), bytes.end()));
}

template <class T>
ConvNet<T> load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint<T>(read_file_bytes(path));
}

}  // namespace sdd
