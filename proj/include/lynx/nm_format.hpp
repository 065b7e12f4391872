#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lynx/tensor.hpp"

namespace lynx {

// N kept entries per group of M along the contraction dimension.
// 2:4 is the hardware-supported default; 1:2 and 4:8 are the other
// supported generalizations (m <= 8 keeps indices within 3 bits).
struct NMPattern {
  int n = 2;
  int m = 4;

  NMPattern() = default;
  NMPattern(int n, int m) : n(n), m(m) { validate(); }

  void validate() const {
    if (n < 1 || n >= m || m > 8) {
      throw config_error("NMPattern: need 1 <= n < m <= 8, got " + str());
    }
  }

  int index_bits() const {
    int bits = 0;
    while ((1 << bits) < m) ++bits;
    return bits;
  }

  std::string str() const { return std::to_string(n) + ":" + std::to_string(m); }

  bool operator==(const NMPattern&) const = default;
};

NMPattern parse_pattern(const std::string& text);

// Compressed N:M matrix: kept values plus bit-packed per-group indices.
//
// Metadata layout: each kept index occupies ceil(log2 m) bits; indices
// of a group are packed least-significant-bit first, groups low-to-high
// within a byte, and every row starts on a fresh byte.
struct PackedNM {
  index_t rows = 0;
  index_t cols = 0;  // dense logical width, multiple of pattern.m
  NMPattern pattern;
  std::vector<float> values;        // rows x groups_per_row x n, row-major
  std::vector<std::uint8_t> meta;   // rows x meta_row_stride bytes

  index_t groups_per_row() const { return cols / pattern.m; }
  index_t values_per_row() const { return groups_per_row() * pattern.n; }
  index_t meta_row_stride() const {
    return (values_per_row() * pattern.index_bits() + 7) / 8;
  }

  // Decodes the kept index of (row, group, slot) straight from meta.
  int index_at(index_t row, index_t group, int slot) const;
};

struct Violation {
  index_t row = -1;    // -1 for whole-matrix violations
  index_t group = -1;
  std::string rule;
};

// Compresses a matrix that already satisfies the pattern (at most n
// nonzeros per group). Groups with fewer than n nonzeros are padded
// with the lowest-index zero positions so the values array stays
// shape-derivable. Throws pattern_violation_error when a group holds
// more than n nonzeros.
PackedNM pack(const DenseMatrix& masked, const NMPattern& pattern);

// Scatters kept values back to a dense matrix. Throws format_error on
// corrupted metadata (non-ascending or out-of-range indices).
DenseMatrix unpack(const PackedNM& p);

// Invariant check as data: returns every violated rule instead of
// throwing. Empty result means the PackedNM is well-formed.
std::vector<Violation> validate(const PackedNM& p);

// File serialization: shared lynx header (dtype 1), then pattern (n, m
// as u8), the values payload and the metadata payload.
void write_packed(const std::string& path, const PackedNM& p);
PackedNM read_packed(const std::string& path);

}  // namespace lynx
