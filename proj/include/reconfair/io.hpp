#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "reconfair/grid.hpp"

namespace reconfair::io {

/// Raw little-endian float32 row-major payload with a JSON sidecar
/// `{ "width": W, "height": H, "dtype": "f32", "range": [0,1] }`.
/// `<stem>.f32` holds the pixels, `<stem>.json` the sidecar.
void write_image(const std::filesystem::path& stem, const Image& img);
Image read_image(const std::filesystem::path& stem);

/// Image ids (file stems) of every `<id>.f32` with a sidecar in `dir`, sorted.
std::vector<std::string> list_images(const std::filesystem::path& dir);

/// Splits one CSV line; supports double-quoted fields with `""` escapes.
std::vector<std::string> split_csv_line(const std::string& line);

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  /// 1-based line numbers in the source file, parallel to `rows`.
  std::vector<std::size_t> line_numbers;

  /// Column index or -1.
  int column(const std::string& name) const;
};

/// Reads a CSV file; blank lines are skipped; each row must match the header width.
CsvTable read_csv(const std::filesystem::path& path);

/// Quotes a field when it contains a comma, quote or newline.
std::string csv_escape(const std::string& field);

std::string read_text(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace reconfair::io
