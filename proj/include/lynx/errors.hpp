#pragma once

#include <stdexcept>
#include <string>

namespace lynx {

// Base class for all library errors. The CLI maps subclasses onto its
// exit-code contract: data/format problems -> 2, numeric/training -> 3.
class error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape or dimension mismatch; the message names both offending shapes.
class dimension_error : public error {
 public:
  using error::error;
};

// Invalid configuration value (bad pattern, degenerate distribution, ...).
class config_error : public error {
 public:
  using error::error;
};

// Malformed serialized data or corrupted packed metadata.
class format_error : public error {
 public:
  using error::error;
};

// A dense group holds more nonzeros than the N:M pattern allows.
class pattern_violation_error : public format_error {
 public:
  pattern_violation_error(const std::string& what, std::int64_t row,
                          std::int64_t group, std::int64_t count)
      : format_error(what), row(row), group(group), count(count) {}

  std::int64_t row;
  std::int64_t group;
  std::int64_t count;
};

// Non-finite values or numerically impossible requests.
class numeric_error : public error {
 public:
  using error::error;
};

// Optimization diverged; carries the step at which it happened.
class training_error : public numeric_error {
 public:
  training_error(const std::string& what, std::int64_t step)
      : numeric_error(what), step(step) {}

  std::int64_t step;
};

// File I/O failure (missing file, short read, unwritable path).
class io_error : public error {
 public:
  using error::error;
};

}  // namespace lynx
