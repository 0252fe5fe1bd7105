#include "reconfair/io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "reconfair/errors.hpp"

namespace reconfair::io {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "image container assumes a little-endian host");

namespace {

fs::path with_ext(const fs::path& stem, const char* ext) {
  return fs::path(stem.string() + ext);
}

}  // namespace

void write_image(const fs::path& stem, const Image& img) {
  if (stem.has_parent_path()) fs::create_directories(stem.parent_path());
  std::vector<float> buf(img.size());
  for (std::size_t i = 0; i < img.size(); ++i) buf[i] = static_cast<float>(img[i]);
  std::ofstream out(with_ext(stem, ".f32"), std::ios::binary);
  if (!out) throw DataError("cannot write " + with_ext(stem, ".f32").string());
  out.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
  json side = {{"width", img.cols()}, {"height", img.rows()}, {"dtype", "f32"},
               {"range", {0, 1}}};
  write_text(with_ext(stem, ".json"), side.dump() + "\n");
}

Image read_image(const fs::path& stem) {
  const auto side_path = with_ext(stem, ".json");
  json side;
  try {
    side = json::parse(read_text(side_path));
  } catch (const json::exception& e) {
    throw DataError(side_path.string() + ": invalid sidecar: " + e.what());
  }
  if (!side.contains("width") || !side.contains("height") || side.value("dtype", "") != "f32") {
    throw DataError(side_path.string() + ": sidecar must give width, height and dtype f32");
  }
  const auto w = side["width"].get<std::size_t>();
  const auto h = side["height"].get<std::size_t>();
  const auto data_path = with_ext(stem, ".f32");
  std::ifstream in(data_path, std::ios::binary);
  if (!in) throw DataError("cannot open " + data_path.string());
  std::vector<float> buf(w * h);
  in.read(reinterpret_cast<char*>(buf.data()),
          static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (static_cast<std::size_t>(in.gcount()) != buf.size() * sizeof(float) ||
      in.peek() != std::char_traits<char>::eof()) {
    throw DataError(data_path.string() + ": payload size does not match " + std::to_string(w) +
                    "x" + std::to_string(h));
  }
  Image img(h, w);
  for (std::size_t i = 0; i < buf.size(); ++i) {
    if (!std::isfinite(buf[i])) throw DataError(data_path.string() + ": non-finite pixel");
    img[i] = buf[i];
  }
  return img;
}

std::vector<std::string> list_images(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError("not a directory: " + dir.string());
  std::vector<std::string> ids;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.path().extension() != ".f32") continue;
    auto stem = entry.path();
    stem.replace_extension();
    if (fs::exists(with_ext(stem, ".json"))) ids.push_back(stem.filename().string());
  }
  std::sort(ids.begin(), ids.end());
  return ids;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  fields.push_back(std::move(cur));
  return fields;
}

int CsvTable::column(const std::string& name) const {
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == name) return static_cast<int>(i);
  }
  return -1;
}

CsvTable read_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  CsvTable table;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line_no == 1 && line.rfind("\xEF\xBB\xBF", 0) == 0) line.erase(0, 3);
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto fields = split_csv_line(line);
    if (table.header.empty()) {
      table.header = std::move(fields);
      continue;
    }
    if (fields.size() != table.header.size()) {
      throw DataError(path.string() + ": row " + std::to_string(line_no) + " has " +
                      std::to_string(fields.size()) + " fields, expected " +
                      std::to_string(table.header.size()));
    }
    table.rows.push_back(std::move(fields));
    table.line_numbers.push_back(line_no);
  }
  if (table.header.empty()) throw DataError(path.string() + ": empty CSV");
  return table;
}

std::string csv_escape(const std::string& field) {
  if (field.find_first_of(",\"\n") == std::string::npos) return field;
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

}  // namespace reconfair::io
