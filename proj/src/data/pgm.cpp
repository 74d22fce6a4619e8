#include <cctype>
#include <fstream>
#include <iterator>

#include "mmc/data.hpp"
#include "mmc/errors.hpp"

namespace mmc {

namespace {

struct Header {
  std::string magic;
  int cols = 0, rows = 0, maxval = 0;
};

// Reads the next whitespace-delimited token, skipping '#' comments.
std::string token(std::istream& in) {
  std::string t;
  int ch;
  while ((ch = in.get()) != EOF) {
    if (ch == '#') {
      while ((ch = in.get()) != EOF && ch != '\n') {
      }
      continue;
    }
    if (std::isspace(ch)) {
      if (!t.empty()) break;
      continue;
    }
    t.push_back(static_cast<char>(ch));
  }
  return t;
}

Header read_header(std::istream& in, const std::filesystem::path& path) {
  Header h;
  h.magic = token(in);
  try {
    h.cols = std::stoi(token(in));
    h.rows = std::stoi(token(in));
    h.maxval = std::stoi(token(in));
  } catch (const std::exception&) {
    throw DataError(path.string() + ": malformed PNM header");
  }
  if (h.cols < 1 || h.rows < 1) throw DataError(path.string() + ": bad PNM dimensions");
  return h;
}

std::vector<unsigned char> read_payload(std::istream& in, std::size_t bytes, const std::filesystem::path& path) {
  std::vector<unsigned char> buf(bytes);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(bytes));
  if (static_cast<std::size_t>(in.gcount()) != bytes) throw DataError(path.string() + ": truncated pixel data");
  if (in.peek() != EOF) throw DataError(path.string() + ": trailing bytes after pixel data");
  return buf;
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("missing or unreadable file " + path.string());
  return in;
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  return out;
}

}  // namespace

void write_pgm8(const std::filesystem::path& path, const Grid<std::uint8_t>& g) {
  auto out = open_out(path);
  out << "P5\n" << g.cols << ' ' << g.rows << "\n255\n";
  out.write(reinterpret_cast<const char*>(g.data.data()), static_cast<std::streamsize>(g.size()));
  if (!out) throw DataError("failed writing " + path.string());
}

Grid<std::uint8_t> read_pgm8(const std::filesystem::path& path) {
  auto in = open_in(path);
  const Header h = read_header(in, path);
  if (h.magic != "P5" || h.maxval != 255) throw DataError(path.string() + ": expected 8-bit binary PGM (P5, 255)");
  Grid<std::uint8_t> g(h.rows, h.cols);
  const auto buf = read_payload(in, g.size(), path);
  std::copy(buf.begin(), buf.end(), g.data.begin());
  return g;
}

void write_pgm16(const std::filesystem::path& path, const Grid<std::uint16_t>& g) {
  auto out = open_out(path);
  out << "P5\n" << g.cols << ' ' << g.rows << "\n65535\n";
  std::vector<unsigned char> buf(g.size() * 2);
  for (std::size_t i = 0; i < g.size(); ++i) {
    buf[2 * i] = static_cast<unsigned char>(g.data[i] >> 8);
    buf[2 * i + 1] = static_cast<unsigned char>(g.data[i] & 0xff);
  }
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!out) throw DataError("failed writing " + path.string());
}

Grid<std::uint16_t> read_pgm16(const std::filesystem::path& path) {
  auto in = open_in(path);
  const Header h = read_header(in, path);
  if (h.magic != "P5" || h.maxval != 65535) {
    throw DataError(path.string() + ": expected 16-bit binary PGM (P5, 65535)");
  }
  Grid<std::uint16_t> g(h.rows, h.cols);
  const auto buf = read_payload(in, g.size() * 2, path);
  for (std::size_t i = 0; i < g.size(); ++i) g.data[i] = static_cast<std::uint16_t>((buf[2 * i] << 8) | buf[2 * i + 1]);
  return g;
}

void write_ppm(const std::filesystem::path& path, const std::vector<Grid<std::uint8_t>>& rgb) {
  if (rgb.size() != 3 || !rgb[0].same_shape(rgb[1]) || !rgb[0].same_shape(rgb[2])) {
    throw std::invalid_argument("write_ppm needs three equal-sized planes");
  }
  auto out = open_out(path);
  out << "P6\n" << rgb[0].cols << ' ' << rgb[0].rows << "\n255\n";
  std::vector<unsigned char> buf(rgb[0].size() * 3);
  for (std::size_t i = 0; i < rgb[0].size(); ++i)
    for (int ch = 0; ch < 3; ++ch) buf[3 * i + ch] = rgb[ch].data[i];
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!out) throw DataError("failed writing " + path.string());
}

// Used by the dataset loader for 3-channel images.
std::vector<Grid<std::uint8_t>> read_ppm(const std::filesystem::path& path) {
  auto in = open_in(path);
  const Header h = read_header(in, path);
  if (h.magic != "P6" || h.maxval != 255) throw DataError(path.string() + ": expected 8-bit binary PPM (P6, 255)");
  std::vector<Grid<std::uint8_t>> planes(3, Grid<std::uint8_t>(h.rows, h.cols));
  const auto buf = read_payload(in, planes[0].size() * 3, path);
  for (std::size_t i = 0; i < planes[0].size(); ++i)
    for (int ch = 0; ch < 3; ++ch) planes[ch].data[i] = buf[3 * i + ch];
  return planes;
}

}  // namespace mmc
