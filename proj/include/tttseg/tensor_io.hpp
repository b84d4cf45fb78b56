#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tttseg/tensor.hpp"

namespace tttseg {

// TSR1 container: magic "TSR1", u8 dtype (0 = f64, 1 = u8), u8 rank,
// rank x little-endian u64 extents, then the raw little-endian payload.
// Used for datasets, checkpoints and predictions.

enum class Dtype : std::uint8_t { F64 = 0, U8 = 1 };

struct LoadedTensor {
  Tensor tensor;  // u8 payloads are widened to f64 values 0..255
  Dtype dtype = Dtype::F64;
};

std::vector<std::uint8_t> encode_tsr(const Tensor& t, Dtype dtype);
LoadedTensor decode_tsr(const std::vector<std::uint8_t>& bytes);

void save_tsr(const Tensor& t, Dtype dtype, const std::string& path);
LoadedTensor load_tsr(const std::string& path);

std::vector<std::uint8_t> read_file_bytes(const std::string& path);
void write_file_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes);

}  // namespace tttseg
