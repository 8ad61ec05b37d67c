#pragma once

#include <cstdint>
#include <string>

#include "dfer/errors.hpp"

namespace dfer {

// Longest label context, in tokens. Contexts are always padded to this
// length before text encoding so the encoder sees a fixed geometry.
inline constexpr std::int64_t kTknMax = 74;

// Geometry of the frozen feature extractors. Serialized verbatim into every
// container file header; loaders reject mismatches instead of reshaping.
struct EncoderConfig {
  std::int64_t embd = 32;
  std::int64_t layers = 2;
  std::int64_t heads = 4;
  std::int64_t tkn_max = kTknMax;
  std::int64_t image_size = 32;
  std::int64_t image_patch = 8;
  std::int64_t channels = 1;

  void validate() const {
    if (embd <= 0 || embd % 2 != 0)
      throw ConfigError("encoder: embd must be positive and even, got " + std::to_string(embd));
    if (layers <= 0) throw ConfigError("encoder: layers must be positive");
    if (heads <= 0 || embd % heads != 0)
      throw ConfigError("encoder: embd " + std::to_string(embd) + " not divisible by heads " +
                        std::to_string(heads));
    if (tkn_max <= 0) throw ConfigError("encoder: tkn_max must be positive");
    if (image_size <= 0 || image_patch <= 0 || image_size % image_patch != 0)
      throw ConfigError("encoder: image_size " + std::to_string(image_size) +
                        " not divisible by patch " + std::to_string(image_patch));
    if (channels <= 0) throw ConfigError("encoder: channels must be positive");
  }

  std::int64_t patches() const { return (image_size / image_patch) * (image_size / image_patch); }

  bool operator==(const EncoderConfig&) const = default;
};

}  // namespace dfer
