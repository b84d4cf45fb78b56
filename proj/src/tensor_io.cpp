#include "tttseg/tensor_io.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

namespace tttseg {

namespace {

void put_u64_le(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
}

std::uint64_t get_u64_le(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

[[noreturn]] void truncated(std::size_t offset) {
  throw IoError("truncated TSR1 data at byte offset " + std::to_string(offset));
}

}  // namespace

std::vector<std::uint8_t> encode_tsr(const Tensor& t, Dtype dtype) {
  std::vector<std::uint8_t> out;
  out.reserve(6 + 8 * t.rank() + t.size() * (dtype == Dtype::F64 ? 8 : 1));
  out.insert(out.end(), {'T', 'S', 'R', '1'});
  out.push_back(static_cast<std::uint8_t>(dtype));
  if (t.rank() > 255) throw ValueError("TSR1 rank limit is 255");
  out.push_back(static_cast<std::uint8_t>(t.rank()));
  for (std::size_t e : t.shape()) put_u64_le(out, e);
  if (dtype == Dtype::F64) {
    for (std::size_t i = 0; i < t.size(); ++i) {
      std::uint64_t bits;
      double v = t[i];
      std::memcpy(&bits, &v, 8);
      put_u64_le(out, bits);
    }
  } else {
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double v = t[i];
      if (v < 0.0 || v > 255.0 || v != std::floor(v)) {
        throw ValueError("u8 payload requires integer values in [0, 255], got " + std::to_string(v));
      }
      out.push_back(static_cast<std::uint8_t>(v));
    }
  }
  return out;
}

LoadedTensor decode_tsr(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "TSR1", 4) != 0) {
    throw IoError("bad TSR1 magic at byte offset 0");
  }
  if (bytes.size() < 6) truncated(bytes.size());
  const std::uint8_t dtype_code = bytes[4];
  if (dtype_code > 1) throw IoError("unknown TSR1 dtype code " + std::to_string(dtype_code) + " at byte offset 4");
  const Dtype dtype = static_cast<Dtype>(dtype_code);
  const std::size_t rank = bytes[5];
  std::size_t off = 6;
  Shape shape(rank);
  for (std::size_t d = 0; d < rank; ++d) {
    if (off + 8 > bytes.size()) truncated(off);
    shape[d] = static_cast<std::size_t>(get_u64_le(bytes.data() + off));
    off += 8;
  }
  const std::size_t count = shape_numel(shape);
  const std::size_t elem = dtype == Dtype::F64 ? 8 : 1;
  if (off + count * elem > bytes.size()) truncated(bytes.size());
  if (off + count * elem < bytes.size()) {
    throw IoError("trailing bytes after TSR1 payload at byte offset " + std::to_string(off + count * elem));
  }
  std::vector<double> data(count);
  if (dtype == Dtype::F64) {
    for (std::size_t i = 0; i < count; ++i) {
      const std::uint64_t bits = get_u64_le(bytes.data() + off + 8 * i);
      double v;
      std::memcpy(&v, &bits, 8);
      data[i] = v;
    }
  } else {
    for (std::size_t i = 0; i < count; ++i) data[i] = static_cast<double>(bytes[off + i]);
  }
  return LoadedTensor{Tensor(std::move(shape), std::move(data)), dtype};
}

std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return bytes;
}

void write_file_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path);
}

void save_tsr(const Tensor& t, Dtype dtype, const std::string& path) {
  write_file_bytes(path, encode_tsr(t, dtype));
}

LoadedTensor load_tsr(const std::string& path) {
  try {
    return decode_tsr(read_file_bytes(path));
  } catch (const IoError& e) {
    throw IoError(path + ": " + e.what());
  }
}

}  // namespace tttseg
