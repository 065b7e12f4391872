#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>

#include "lynx/tensor.hpp"

namespace lynx {

// Binary tensor container used repo-wide ("lynx" files):
//
//   magic   "LYNX"            4 bytes
//   version u16 little-endian (currently 1)
//   dtype   u8                0 = f32 dense, 1 = packed N:M
//   rank    u8
//   dims    u64 little-endian, one per axis
//   payload
//
// Dense payloads are raw little-endian f32, row-major. Round-trips are
// bit-exact.
inline constexpr std::uint16_t kTensorFormatVersion = 1;
inline constexpr std::uint8_t kDtypeF32 = 0;
inline constexpr std::uint8_t kDtypePackedNM = 1;

void write_dense(const std::string& path, const DenseMatrix& m);
DenseMatrix read_dense(const std::string& path);

void write_dense(std::ostream& out, const DenseMatrix& m);
DenseMatrix read_dense(std::istream& in);

// Peeks at the header's dtype code; throws format_error on a foreign file.
std::uint8_t probe_dtype(const std::string& path);

namespace io_detail {

void write_header(std::ostream& out, std::uint8_t dtype,
                  std::span<const std::uint64_t> dims);

struct Header {
  std::uint16_t version;
  std::uint8_t dtype;
  std::vector<std::uint64_t> dims;
};

Header read_header(std::istream& in);

void write_f32_array(std::ostream& out, std::span<const float> values);
void read_f32_array(std::istream& in, std::span<float> values);
void write_bytes(std::ostream& out, std::span<const std::uint8_t> bytes);
void read_bytes(std::istream& in, std::span<std::uint8_t> bytes);
void expect_eof(std::istream& in);

}  // namespace io_detail

}  // namespace lynx
