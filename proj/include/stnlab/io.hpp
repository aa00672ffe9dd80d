#pragma once

#include <array>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "stnlab/errors.hpp"

namespace stnlab {

inline constexpr std::string_view kVersionString = "stnlab 0.1.0";

// ---------------------------------------------------------------------------
// Locale-independent number formatting ('.' decimal separator, shortest
// round-trip for doubles)

inline std::string format_double(double v) {
  std::array<char, 64> buf{};
  auto [p, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), p);
}

inline std::string format_fixed(double v, int digits) {
  std::array<char, 64> buf{};
  auto [p, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v,
                               std::chars_format::fixed, digits);
  return std::string(buf.data(), p);
}

inline double parse_double(std::string_view s, const std::string& context) {
  double v = 0.0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size())
    throw ParseError(context + ": not a number: \"" + std::string(s) + "\"");
  return v;
}

inline std::int64_t parse_int(std::string_view s, const std::string& context) {
  std::int64_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size())
    throw ParseError(context + ": not an integer: \"" + std::string(s) + "\"");
  return v;
}

// ---------------------------------------------------------------------------
// CSV, written and read under one strict dialect: fixed header, constant
// column count, no quoting, '\n' line endings.

class CsvWriter {
 public:
  explicit CsvWriter(const std::filesystem::path& path) : os_(path, std::ios::binary) {
    if (!os_) throw IoError("cannot write " + path.string());
    path_ = path;
  }

  void header(const std::vector<std::string>& cols) {
    columns_ = cols.size();
    line(cols);
  }

  void row(const std::vector<std::string>& cells) {
    if (cells.size() != columns_)
      throw InvalidInputError("csv row with " + std::to_string(cells.size()) +
                              " cells under a " + std::to_string(columns_) + "-column header");
    line(cells);
  }

  void close() {
    os_.flush();
    if (!os_) throw IoError("short write on " + path_.string());
    os_.close();
  }

 private:
  void line(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (cells[i].find_first_of(",\n\r") != std::string::npos)
        throw InvalidInputError("csv cell with separator character: \"" + cells[i] + "\"");
      if (i) os_ << ',';
      os_ << cells[i];
    }
    os_ << '\n';
  }

  std::ofstream os_;
  std::filesystem::path path_;
  std::size_t columns_ = 0;
};

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    throw ParseError("csv: no column named " + name);
  }
};

inline CsvTable read_csv_strict(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  std::string content((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (content.empty()) throw ParseError(path.string() + ": empty csv");
  if (content.find('\r') != std::string::npos)
    throw ParseError(path.string() + ": carriage return; csv dialect is '\\n' only");
  if (content.back() != '\n') throw ParseError(path.string() + ": missing final newline");

  CsvTable table;
  std::size_t line_no = 0, pos = 0;
  while (pos < content.size()) {
    const std::size_t end = content.find('\n', pos);
    std::string_view line(content.data() + pos, end - pos);
    ++line_no;
    std::vector<std::string> cells;
    std::size_t start = 0;
    while (true) {
      const std::size_t comma = line.find(',', start);
      if (comma == std::string_view::npos) {
        cells.emplace_back(line.substr(start));
        break;
      }
      cells.emplace_back(line.substr(start, comma - start));
      start = comma + 1;
    }
    if (line_no == 1) {
      table.header = std::move(cells);
    } else {
      if (cells.size() != table.header.size())
        throw ParseError(path.string() + ":" + std::to_string(line_no) + ": expected " +
                         std::to_string(table.header.size()) + " columns, got " +
                         std::to_string(cells.size()));
      table.rows.push_back(std::move(cells));
    }
    pos = end + 1;
  }
  return table;
}

// ---------------------------------------------------------------------------
// Plain-text key=value config ('#' comments, line-numbered errors)

struct ConfigFile {
  struct Entry {
    std::string value;
    int line = 0;
  };
  std::map<std::string, Entry> entries;
  std::string source;

  bool has(const std::string& key) const { return entries.count(key) != 0; }

  const std::string& get(const std::string& key) const {
    auto it = entries.find(key);
    if (it == entries.end())
      throw ParseError(source + ": missing required key \"" + key + "\"");
    return it->second.value;
  }

  std::string where(const std::string& key) const {
    auto it = entries.find(key);
    return source + ":" + std::to_string(it == entries.end() ? 0 : it->second.line);
  }
};

inline ConfigFile read_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config " + path.string());
  ConfigFile cfg;
  cfg.source = path.string();
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const auto strip = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    const std::string stripped = strip(line);
    if (stripped.empty()) continue;
    const std::size_t eq = stripped.find('=');
    if (eq == std::string::npos)
      throw ParseError(cfg.source + ":" + std::to_string(line_no) + ": expected key=value, got \"" +
                       stripped + "\"");
    const std::string key = strip(stripped.substr(0, eq));
    const std::string value = strip(stripped.substr(eq + 1));
    if (key.empty())
      throw ParseError(cfg.source + ":" + std::to_string(line_no) + ": empty key");
    if (cfg.entries.count(key))
      throw ParseError(cfg.source + ":" + std::to_string(line_no) + ": duplicate key \"" + key +
                       "\"");
    cfg.entries[key] = {value, line_no};
  }
  return cfg;
}

// ---------------------------------------------------------------------------
// SHA-256 for manifest content hashes

namespace detail {

struct Sha256 {
  std::uint32_t h[8] = {0x6a09e667, 0xbb67ae85, 0x3c6ef372, 0xa54ff53a,
                        0x510e527f, 0x9b05688c, 0x1f83d9ab, 0x5be0cd19};
  unsigned char block[64];
  std::size_t block_len = 0;
  std::uint64_t total = 0;

  static std::uint32_t rotr(std::uint32_t x, int n) { return (x >> n) | (x << (32 - n)); }

  void compress(const unsigned char* p) {
    static constexpr std::uint32_t k[64] = {
        0x428a2f98, 0x71374491, 0xb5c0fbcf, 0xe9b5dba5, 0x3956c25b, 0x59f111f1, 0x923f82a4,
        0xab1c5ed5, 0xd807aa98, 0x12835b01, 0x243185be, 0x550c7dc3, 0x72be5d74, 0x80deb1fe,
        0x9bdc06a7, 0xc19bf174, 0xe49b69c1, 0xefbe4786, 0x0fc19dc6, 0x240ca1cc, 0x2de92c6f,
        0x4a7484aa, 0x5cb0a9dc, 0x76f988da, 0x983e5152, 0xa831c66d, 0xb00327c8, 0xbf597fc7,
        0xc6e00bf3, 0xd5a79147, 0x06ca6351, 0x14292967, 0x27b70a85, 0x2e1b2138, 0x4d2c6dfc,
        0x53380d13, 0x650a7354, 0x766a0abb, 0x81c2c92e, 0x92722c85, 0xa2bfe8a1, 0xa81a664b,
        0xc24b8b70, 0xc76c51a3, 0xd192e819, 0xd6990624, 0xf40e3585, 0x106aa070, 0x19a4c116,
        0x1e376c08, 0x2748774c, 0x34b0bcb5, 0x391c0cb3, 0x4ed8aa4a, 0x5b9cca4f, 0x682e6ff3,
        0x748f82ee, 0x78a5636f, 0x84c87814, 0x8cc70208, 0x90befffa, 0xa4506ceb, 0xbef9a3f7,
        0xc67178f2};
    std::uint32_t w[64];
    for (int i = 0; i < 16; ++i)
      w[i] = (std::uint32_t(p[4 * i]) << 24) | (std::uint32_t(p[4 * i + 1]) << 16) |
             (std::uint32_t(p[4 * i + 2]) << 8) | std::uint32_t(p[4 * i + 3]);
    for (int i = 16; i < 64; ++i) {
      const std::uint32_t s0 = rotr(w[i - 15], 7) ^ rotr(w[i - 15], 18) ^ (w[i - 15] >> 3);
      const std::uint32_t s1 = rotr(w[i - 2], 17) ^ rotr(w[i - 2], 19) ^ (w[i - 2] >> 10);
      w[i] = w[i - 16] + s0 + w[i - 7] + s1;
    }
    std::uint32_t a = h[0], b = h[1], c = h[2], d = h[3], e = h[4], f = h[5], g = h[6],
                  hh = h[7];
    for (int i = 0; i < 64; ++i) {
      const std::uint32_t s1 = rotr(e, 6) ^ rotr(e, 11) ^ rotr(e, 25);
      const std::uint32_t ch = (e & f) ^ (~e & g);
      const std::uint32_t t1 = hh + s1 + ch + k[i] + w[i];
      const std::uint32_t s0 = rotr(a, 2) ^ rotr(a, 13) ^ rotr(a, 22);
      const std::uint32_t maj = (a & b) ^ (a & c) ^ (b & c);
      const std::uint32_t t2 = s0 + maj;
      hh = g;
      g = f;
      f = e;
      e = d + t1;
      d = c;
      c = b;
      b = a;
      a = t1 + t2;
    }
    h[0] += a;
    h[1] += b;
    h[2] += c;
    h[3] += d;
    h[4] += e;
    h[5] += f;
    h[6] += g;
    h[7] += hh;
  }

  void update(const unsigned char* data, std::size_t len) {
    total += len;
    while (len > 0) {
      const std::size_t take = std::min(len, 64 - block_len);
      std::copy_n(data, take, block + block_len);
      block_len += take;
      data += take;
      len -= take;
      if (block_len == 64) {
        compress(block);
        block_len = 0;
      }
    }
  }

  std::string hex_digest() {
    const std::uint64_t bits = total * 8;
    unsigned char pad = 0x80;
    update(&pad, 1);
    unsigned char zero = 0;
    while (block_len != 56) update(&zero, 1);
    unsigned char len_be[8];
    for (int i = 0; i < 8; ++i) len_be[i] = static_cast<unsigned char>(bits >> (56 - 8 * i));
    update(len_be, 8);
    static constexpr char hexd[] = "0123456789abcdef";
    std::string out;
    out.reserve(64);
    for (std::uint32_t v : h)
      for (int i = 28; i >= 0; i -= 4) out.push_back(hexd[(v >> i) & 0xf]);
    return out;
  }
};

}  // namespace detail

inline std::string sha256_hex(std::string_view data) {
  detail::Sha256 s;
  s.update(reinterpret_cast<const unsigned char*>(data.data()), data.size());
  return s.hex_digest();
}

inline std::string file_sha256(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string() + " for hashing");
  detail::Sha256 s;
  std::vector<unsigned char> buf(1 << 16);
  while (is) {
    is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    s.update(buf.data(), static_cast<std::size_t>(is.gcount()));
  }
  return s.hex_digest();
}

// ---------------------------------------------------------------------------
// Run manifest: key=value text, outputs listed with content hashes

inline void write_manifest(const std::filesystem::path& path,
                           const std::vector<std::pair<std::string, std::string>>& entries) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write manifest " + path.string());
  for (const auto& [k, v] : entries) os << k << "=" << v << "\n";
  if (!os) throw IoError("short write on manifest " + path.string());
}

// ---------------------------------------------------------------------------
// Binary PGM (P5)

inline void write_pgm(const std::filesystem::path& path, std::size_t width, std::size_t height,
                      const std::vector<unsigned char>& bytes) {
  if (bytes.size() != width * height)
    throw InvalidInputError("write_pgm: " + std::to_string(bytes.size()) + " bytes for " +
                            std::to_string(width) + "x" + std::to_string(height));
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os << "P5\n" << width << " " << height << "\n255\n";
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("short write on " + path.string());
}

}  // namespace stnlab
