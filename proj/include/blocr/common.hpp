#pragma once

#include <stdexcept>
#include <string>

namespace blocr {

// Dense M x M / M x (M-J) materializations are allowed only up to this
// dimension unless the caller overrides it; the large-scale paths touch
// J-dimensional summaries exclusively.
inline constexpr int kOracleThreshold = 200;

inline constexpr const char* kVersion = "0.1.0";

// Bad inputs: shapes, ranges, file formats, configuration.
class validation_error : public std::runtime_error {
public:
  explicit validation_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Numerical breakdown: non-finite values, indefinite matrices, corrupted state.
class numeric_error : public std::runtime_error {
public:
  explicit numeric_error(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace blocr
