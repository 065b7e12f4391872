#include "lynx/nm_format.hpp"

#include <cmath>
#include <fstream>

#include "lynx/tensor_io.hpp"

namespace lynx {

NMPattern parse_pattern(const std::string& text) {
  const auto colon = text.find(':');
  if (colon == std::string::npos || colon == 0 || colon + 1 >= text.size()) {
    throw config_error("pattern must be written N:M (e.g. 2:4), got '" + text +
                       "'");
  }
  int n = 0, m = 0;
  try {
    size_t used = 0;
    n = std::stoi(text.substr(0, colon), &used);
    if (used != colon) throw std::invalid_argument(text);
    m = std::stoi(text.substr(colon + 1), &used);
    if (used != text.size() - colon - 1) throw std::invalid_argument(text);
  } catch (const std::exception&) {
    throw config_error("pattern must be written N:M (e.g. 2:4), got '" + text +
                       "'");
  }
  return NMPattern(n, m);
}

namespace {

inline void meta_write_bits(std::vector<std::uint8_t>& meta, index_t bit_pos,
                            int value, int bits) {
  for (int b = 0; b < bits; ++b) {
    if ((value >> b) & 1) {
      meta[(bit_pos + b) >> 3] |=
          static_cast<std::uint8_t>(1u << ((bit_pos + b) & 7));
    }
  }
}

inline int meta_read_bits(const std::vector<std::uint8_t>& meta,
                          index_t bit_pos, int bits) {
  int value = 0;
  for (int b = 0; b < bits; ++b) {
    value |= ((meta[(bit_pos + b) >> 3] >> ((bit_pos + b) & 7)) & 1) << b;
  }
  return value;
}

void check_divisible(const DenseMatrix& m, const NMPattern& pattern,
                     const char* op) {
  if (m.cols() % pattern.m != 0) {
    throw dimension_error(std::string(op) + ": width of " + m.shape_string() +
                          " is not divisible by group size m=" +
                          std::to_string(pattern.m));
  }
}

}  // namespace

int PackedNM::index_at(index_t row, index_t group, int slot) const {
  const int bits = pattern.index_bits();
  const index_t bit_pos = row * meta_row_stride() * 8 +
                          (group * pattern.n + slot) * bits;
  return meta_read_bits(meta, bit_pos, bits);
}

PackedNM pack(const DenseMatrix& masked, const NMPattern& pattern) {
  pattern.validate();
  check_divisible(masked, pattern, "pack");

  PackedNM p;
  p.rows = masked.rows();
  p.cols = masked.cols();
  p.pattern = pattern;
  p.values.resize(static_cast<size_t>(p.rows * p.values_per_row()));
  p.meta.assign(static_cast<size_t>(p.rows * p.meta_row_stride()), 0);

  const int n = pattern.n, m = pattern.m;
  const int bits = pattern.index_bits();
  const index_t groups = p.groups_per_row();

  for (index_t i = 0; i < p.rows; ++i) {
    const float* row = masked.row_ptr(i);
    index_t bit_pos = i * p.meta_row_stride() * 8;
    float* out = p.values.data() + i * p.values_per_row();
    for (index_t g = 0; g < groups; ++g) {
      const float* grp = row + g * m;
      int kept[8];
      int count = 0;
      for (int j = 0; j < m; ++j) {
        if (grp[j] != 0.0f) kept[count++] = j;
      }
      if (count > n) {
        throw pattern_violation_error(
            "pack: row " + std::to_string(i) + " group " + std::to_string(g) +
                " has " + std::to_string(count) + " nonzeros, pattern " +
                pattern.str() + " allows " + std::to_string(n),
            i, g, count);
      }
      // Pad with the lowest-index zero positions, keeping the stored
      // index list strictly ascending.
      if (count < n) {
        int padded[8];
        int pc = 0, ki = 0;
        int needed = n - count;
        for (int j = 0; j < m && pc < n; ++j) {
          const bool is_kept = ki < count && kept[ki] == j;
          if (is_kept) {
            padded[pc++] = j;
            ++ki;
          } else if (needed > 0) {
            padded[pc++] = j;
            --needed;
          }
        }
        for (int s = 0; s < n; ++s) kept[s] = padded[s];
      }
      for (int s = 0; s < n; ++s) {
        out[g * n + s] = grp[kept[s]];
        meta_write_bits(p.meta, bit_pos, kept[s], bits);
        bit_pos += bits;
      }
    }
  }
  return p;
}

DenseMatrix unpack(const PackedNM& p) {
  p.pattern.validate();
  DenseMatrix out(p.rows, p.cols);
  const int n = p.pattern.n, m = p.pattern.m;
  const index_t groups = p.groups_per_row();
  for (index_t i = 0; i < p.rows; ++i) {
    float* row = out.row_ptr(i);
    const float* vals = p.values.data() + i * p.values_per_row();
    for (index_t g = 0; g < groups; ++g) {
      int prev = -1;
      for (int s = 0; s < n; ++s) {
        const int idx = p.index_at(i, g, s);
        if (idx >= m) {
          throw format_error("unpack: index out of range at row " +
                             std::to_string(i) + " group " + std::to_string(g));
        }
        if (idx <= prev) {
          throw format_error("unpack: non-ascending indices at row " +
                             std::to_string(i) + " group " + std::to_string(g));
        }
        prev = idx;
        row[g * m + idx] = vals[g * n + s];
      }
    }
  }
  return out;
}

std::vector<Violation> validate(const PackedNM& p) {
  std::vector<Violation> out;
  try {
    p.pattern.validate();
  } catch (const config_error&) {
    out.push_back({-1, -1, "invalid pattern " + p.pattern.str()});
    return out;
  }
  if (p.rows < 1 || p.cols < 1 || p.cols % p.pattern.m != 0) {
    out.push_back({-1, -1, "shape " + std::to_string(p.rows) + "x" +
                               std::to_string(p.cols) +
                               " incompatible with pattern " + p.pattern.str()});
    return out;
  }
  if (static_cast<index_t>(p.values.size()) != p.rows * p.values_per_row()) {
    out.push_back({-1, -1, "values length " + std::to_string(p.values.size()) +
                               ", expected " +
                               std::to_string(p.rows * p.values_per_row())});
  }
  if (static_cast<index_t>(p.meta.size()) != p.rows * p.meta_row_stride()) {
    out.push_back({-1, -1, "meta length " + std::to_string(p.meta.size()) +
                               ", expected " +
                               std::to_string(p.rows * p.meta_row_stride())});
  }
  if (!out.empty()) return out;  // index decode needs consistent lengths

  const index_t groups = p.groups_per_row();
  for (index_t i = 0; i < p.rows; ++i) {
    for (index_t g = 0; g < groups; ++g) {
      int prev = -1;
      for (int s = 0; s < p.pattern.n; ++s) {
        const int idx = p.index_at(i, g, s);
        if (idx >= p.pattern.m) {
          out.push_back({i, g, "index out of range"});
          break;
        }
        if (idx <= prev) {
          out.push_back({i, g, "non-ascending indices"});
          break;
        }
        prev = idx;
      }
    }
  }
  return out;
}

void write_packed(const std::string& path, const PackedNM& p) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("cannot open for writing: " + path);
  const std::uint64_t dims[2] = {static_cast<std::uint64_t>(p.rows),
                                 static_cast<std::uint64_t>(p.cols)};
  io_detail::write_header(out, kDtypePackedNM, dims);
  const std::uint8_t nm[2] = {static_cast<std::uint8_t>(p.pattern.n),
                              static_cast<std::uint8_t>(p.pattern.m)};
  io_detail::write_bytes(out, nm);
  io_detail::write_f32_array(out, p.values);
  io_detail::write_bytes(out, p.meta);
  if (!out) throw io_error("write failed: " + path);
}

PackedNM read_packed(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open for reading: " + path);
  const auto h = io_detail::read_header(in);
  if (h.dtype != kDtypePackedNM) {
    throw format_error("lynx file: expected packed (dtype 1), got dtype " +
                       std::to_string(h.dtype));
  }
  if (h.dims.size() != 2) {
    throw format_error("lynx file: packed tensors are rank 2, got rank " +
                       std::to_string(h.dims.size()));
  }
  std::uint8_t nm[2];
  io_detail::read_bytes(in, nm);
  PackedNM p;
  p.rows = static_cast<index_t>(h.dims[0]);
  p.cols = static_cast<index_t>(h.dims[1]);
  try {
    p.pattern = NMPattern(nm[0], nm[1]);
  } catch (const config_error& e) {
    throw format_error(std::string("lynx file: ") + e.what());
  }
  if (p.rows < 1 || p.cols < 1 || p.cols % p.pattern.m != 0) {
    throw format_error("lynx file: packed shape incompatible with pattern");
  }
  p.values.resize(static_cast<size_t>(p.rows * p.values_per_row()));
  io_detail::read_f32_array(in, p.values);
  p.meta.resize(static_cast<size_t>(p.rows * p.meta_row_stride()));
  io_detail::read_bytes(in, p.meta);
  io_detail::expect_eof(in);
  return p;
}

}  // namespace lynx
