#include "lynx/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace lynx {

static_assert(std::endian::native == std::endian::little,
              "lynx file I/O assumes a little-endian host");

namespace io_detail {

namespace {

constexpr char kMagic[4] = {'L', 'Y', 'N', 'X'};

template <typename T>
void write_le(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_le(std::istream& in) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) throw format_error("lynx file: truncated header");
  return value;
}

}  // namespace

void write_header(std::ostream& out, std::uint8_t dtype,
                  std::span<const std::uint64_t> dims) {
  out.write(kMagic, 4);
  write_le<std::uint16_t>(out, kTensorFormatVersion);
  write_le<std::uint8_t>(out, dtype);
  write_le<std::uint8_t>(out, static_cast<std::uint8_t>(dims.size()));
  for (std::uint64_t d : dims) write_le<std::uint64_t>(out, d);
}

Header read_header(std::istream& in) {
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) {
    throw format_error("lynx file: bad magic bytes");
  }
  Header h;
  h.version = read_le<std::uint16_t>(in);
  if (h.version == 0 || h.version > kTensorFormatVersion) {
    throw format_error("lynx file: unsupported format version " +
                       std::to_string(h.version));
  }
  h.dtype = read_le<std::uint8_t>(in);
  const auto rank = read_le<std::uint8_t>(in);
  h.dims.resize(rank);
  for (auto& d : h.dims) d = read_le<std::uint64_t>(in);
  return h;
}

void write_f32_array(std::ostream& out, std::span<const float> values) {
  out.write(reinterpret_cast<const char*>(values.data()),
            static_cast<std::streamsize>(values.size() * sizeof(float)));
}

void read_f32_array(std::istream& in, std::span<float> values) {
  in.read(reinterpret_cast<char*>(values.data()),
          static_cast<std::streamsize>(values.size() * sizeof(float)));
  if (!in) throw format_error("lynx file: truncated payload");
}

void write_bytes(std::ostream& out, std::span<const std::uint8_t> bytes) {
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
}

void read_bytes(std::istream& in, std::span<std::uint8_t> bytes) {
  in.read(reinterpret_cast<char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  if (!in) throw format_error("lynx file: truncated payload");
}

void expect_eof(std::istream& in) {
  if (in.peek() != std::char_traits<char>::eof()) {
    throw format_error("lynx file: trailing bytes after payload");
  }
}

}  // namespace io_detail

void write_dense(std::ostream& out, const DenseMatrix& m) {
  const std::uint64_t dims[2] = {static_cast<std::uint64_t>(m.rows()),
                                 static_cast<std::uint64_t>(m.cols())};
  io_detail::write_header(out, kDtypeF32, dims);
  io_detail::write_f32_array(out, m.data());
}

DenseMatrix read_dense(std::istream& in) {
  const auto h = io_detail::read_header(in);
  if (h.dtype != kDtypeF32) {
    throw format_error("lynx file: expected dense f32 (dtype 0), got dtype " +
                       std::to_string(h.dtype));
  }
  if (h.dims.size() != 2) {
    throw format_error("lynx file: dense tensors are rank 2, got rank " +
                       std::to_string(h.dims.size()));
  }
  const auto rows = static_cast<index_t>(h.dims[0]);
  const auto cols = static_cast<index_t>(h.dims[1]);
  DenseMatrix m(rows, cols);
  io_detail::read_f32_array(in, m.data());
  io_detail::expect_eof(in);
  return m;
}

namespace {

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("cannot open for writing: " + path);
  return out;
}

std::ifstream open_in(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open for reading: " + path);
  return in;
}

}  // namespace

void write_dense(const std::string& path, const DenseMatrix& m) {
  auto out = open_out(path);
  write_dense(out, m);
  if (!out) throw io_error("write failed: " + path);
}

DenseMatrix read_dense(const std::string& path) {
  auto in = open_in(path);
  return read_dense(in);
}

std::uint8_t probe_dtype(const std::string& path) {
  auto in = open_in(path);
  return io_detail::read_header(in).dtype;
}

}  // namespace lynx
