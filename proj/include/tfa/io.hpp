#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

#include "tfa/errors.hpp"
#include "tfa/models.hpp"
#include "tfa/tensor.hpp"

namespace tfa::io {

// Shortest text that parses back to the same double; locale independent.
// Negative zero prints as "0".
inline std::string format_double(double v) {
  if (v == 0.0) v = 0.0;
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return {buf, r.ptr};
}

inline double parse_double(const std::string& s) {
  double v = 0.0;
  const auto* end = s.data() + s.size();
  const auto r = std::from_chars(s.data(), end, v);
  if (r.ec != std::errc() || r.ptr != end) throw FormatError("not a number: '" + s + "'");
  return v;
}

inline std::uint64_t parse_uint(const std::string& s) {
  std::uint64_t v = 0;
  const auto* end = s.data() + s.size();
  const auto r = std::from_chars(s.data(), end, v);
  if (r.ec != std::errc() || r.ptr != end) throw FormatError("not a non-negative integer: '" + s + "'");
  return v;
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(cur);
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed for " + path.string());
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------
// CSV: header row, comma separated, '\n' line ends

class CsvTable {
 public:
  explicit CsvTable(std::vector<std::string> header) : header_(std::move(header)) {}

  class Row {
   public:
    explicit Row(CsvTable& t) : table_(t) {}
    Row& operator<<(const std::string& s) {
      cells_.push_back(s);
      return *this;
    }
    Row& operator<<(const char* s) { return *this << std::string(s); }
    Row& operator<<(double v) { return *this << format_double(v); }
    Row& operator<<(std::size_t v) { return *this << std::to_string(v); }
    Row& operator<<(int v) { return *this << std::to_string(v); }
    ~Row() noexcept(false) { table_.add(std::move(cells_)); }

   private:
    CsvTable& table_;
    std::vector<std::string> cells_;
  };

  Row row() { return Row(*this); }

  void add(std::vector<std::string> cells) {
    if (cells.size() != header_.size()) {
      throw ShapeError("CSV row has " + std::to_string(cells.size()) + " cells, header has " +
                       std::to_string(header_.size()));
    }
    rows_.push_back(std::move(cells));
  }

  std::size_t size() const { return rows_.size(); }

  std::string str() const {
    std::string out;
    auto line = [&](const std::vector<std::string>& cells) {
      for (std::size_t i = 0; i < cells.size(); ++i) {
        if (i) out += ',';
        out += cells[i];
      }
      out += '\n';
    };
    line(header_);
    for (const auto& r : rows_) line(r);
    return out;
  }

 private:
  std::vector<std::string> header_;
  std::vector<std::vector<std::string>> rows_;
};

// Flattened signed values of a map: one row per element with its coordinates.
inline std::string map_csv(const Tensor& map) {
  CsvTable t(map.rank() == 3 ? std::vector<std::string>{"channel", "row", "col", "value"}
                             : std::vector<std::string>{"row", "col", "value"});
  if (map.rank() == 3) {
    const std::size_t c = map.dim(0), h = map.dim(1), w = map.dim(2);
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) t.row() << ch << i << j << map[(ch * h + i) * w + j];
  } else if (map.rank() == 2) {
    const std::size_t h = map.dim(0), w = map.dim(1);
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) t.row() << i << j << map[i * w + j];
  } else {
    throw ShapeError("map_csv expects [H,W] or [C,H,W], got " + shape_str(map.shape()));
  }
  return t.str();
}

// ---------------------------------------------------------------------------
// PGM (P5, maxval 255) from an [H, W] grid, min-max normalized

struct Pgm {
  std::string bytes;
  double low = 0.0;   // value mapped to 0
  double high = 0.0;  // value mapped to 255
};

inline Pgm encode_pgm(const Tensor& grid) {
  if (grid.rank() != 2) throw ShapeError("PGM needs an [H,W] grid, got " + shape_str(grid.shape()));
  require_finite(grid, "encode_pgm");
  const auto [lo_it, hi_it] = std::minmax_element(grid.data().begin(), grid.data().end());
  Pgm out{"P5\n" + std::to_string(grid.dim(1)) + " " + std::to_string(grid.dim(0)) + "\n255\n", *lo_it, *hi_it};
  const double range = out.high - out.low;
  for (double v : grid.data()) {
    const double t = range > 0 ? (v - out.low) / range : 0.0;
    out.bytes.push_back(static_cast<char>(static_cast<std::uint8_t>(std::lround(t * 255.0))));
  }
  return out;
}

struct DecodedPgm {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;
};

inline DecodedPgm decode_pgm(const std::string& bytes) {
  std::istringstream in(bytes);
  std::string magic;
  DecodedPgm out;
  int maxval = 0;
  in >> magic >> out.width >> out.height >> maxval;
  if (magic != "P5" || maxval != 255 || !in) throw FormatError("not an 8-bit P5 PGM");
  in.get();
  const std::size_t n = out.width * out.height;
  const auto offset = static_cast<std::size_t>(in.tellg());
  if (bytes.size() != offset + n) throw FormatError("PGM payload size mismatch");
  out.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(offset), bytes.end());
  return out;
}

// Writes <stem>.pgm and <stem>.bounds.txt (the values mapped to 0 and 255).
inline void write_pgm(const std::filesystem::path& pgm_path, const Tensor& grid) {
  const Pgm p = encode_pgm(grid);
  write_file(pgm_path, p.bytes);
  auto sidecar = pgm_path;
  sidecar.replace_extension(".bounds.txt");
  write_file(sidecar, "min=" + format_double(p.low) + "\nmax=" + format_double(p.high) + "\n");
}

// ---------------------------------------------------------------------------
// key=value text: '#' starts a comment line, blank lines ignored

using KeyValues = std::map<std::string, std::string>;

inline KeyValues parse_key_values(const std::string& text) {
  KeyValues out;
  std::istringstream in(text);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto first = line.find_first_not_of(" \t");
    if (first == std::string::npos || line[first] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("line " + std::to_string(n) + ": expected key=value");
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t");
      const auto e = s.find_last_not_of(" \t");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw FormatError("line " + std::to_string(n) + ": empty key");
    out[key] = trim(line.substr(eq + 1));
  }
  return out;
}

inline std::string format_key_values(const KeyValues& kv) {
  std::string out;
  for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Model file: key=value header, a "params" line, then one value per line

inline std::string join_shape(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out;
}

inline Shape parse_shape(const std::string& text) {
  Shape s;
  for (const auto& part : split(text, ',')) s.push_back(static_cast<std::size_t>(parse_uint(part)));
  if (s.empty()) throw FormatError("empty shape");
  return s;
}

inline std::string format_model(const Model& model, const ParamVector& params) {
  std::string out = "arch=" + model.arch.to_string() + "\ninput=" + join_shape(model.arch.input_shape()) +
                    "\nclasses=" + std::to_string(model.arch.num_classes()) + "\nloss=" + to_string(model.loss) +
                    "\nparams=" + std::to_string(params.size()) + "\n";
  for (double v : params.flat.data()) out += format_double(v) + "\n";
  return out;
}

struct LoadedModel {
  Model model;
  ParamVector params;
};

inline LoadedModel parse_model(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  KeyValues header;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("model file: malformed header line '" + line + "'");
    header[line.substr(0, eq)] = line.substr(eq + 1);
    if (line.compare(0, eq, "params") == 0) break;
  }
  for (const char* key : {"arch", "input", "classes", "loss", "params"}) {
    if (!header.count(key)) throw FormatError(std::string("model file: missing '") + key + "'");
  }
  const Shape input = parse_shape(header["input"]);
  const auto classes = static_cast<std::size_t>(parse_uint(header["classes"]));
  Model model{ArchitectureSpec::parse(header["arch"], input, classes), parse_loss_kind(header["loss"])};
  const auto count = static_cast<std::size_t>(parse_uint(header["params"]));
  if (count != param_count(model.arch)) throw FormatError("model file: parameter count does not match arch");
  Tensor flat(Shape{count});
  for (std::size_t i = 0; i < count; ++i) {
    if (!std::getline(in, line)) throw FormatError("model file: truncated parameter list");
    flat[i] = parse_double(line);
  }
  return {model, make_params(model.arch, std::move(flat))};
}

}  // namespace tfa::io
