#pragma once

#include <stdexcept>
#include <string>

namespace reconfair {

/// Malformed or inconsistent input data (files, tables, images).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid run configuration or command-line usage.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace reconfair
