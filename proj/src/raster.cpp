#include "ipf/raster.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>

#include "ipf/error.hpp"

namespace ipf {

HuImage to_hu(const RawSlice& raw) {
  HuImage out(raw.rows, raw.cols);
  for (std::size_t i = 0; i < raw.size(); ++i) {
    out.data[i] = static_cast<float>(static_cast<int>(raw.data[i]) - kHuOffset);
  }
  return out;
}

RawSlice from_hu(const HuImage& hu) {
  RawSlice out(hu.rows, hu.cols);
  for (std::size_t i = 0; i < hu.size(); ++i) {
    const double v = std::round(static_cast<double>(hu.data[i]) + kHuOffset);
    out.data[i] = static_cast<std::uint16_t>(std::clamp(v, 0.0, 65535.0));
  }
  return out;
}

namespace {

struct PgmHeader {
  std::size_t width = 0;
  std::size_t height = 0;
  unsigned maxval = 0;
};

// Reads one whitespace-delimited header token, skipping `#` comments.
std::string next_token(std::istream& in) {
  std::string tok;
  int c = in.get();
  while (c != EOF) {
    if (c == '#') {
      while (c != EOF && c != '\n') c = in.get();
    } else if (std::isspace(c)) {
      if (!tok.empty()) break;
    } else {
      tok.push_back(static_cast<char>(c));
    }
    c = in.get();
  }
  return tok;
}

PgmHeader read_header(std::istream& in, const std::filesystem::path& path) {
  if (next_token(in) != "P5") throw DataError("not a binary PGM (P5): " + path.string());
  PgmHeader h;
  try {
    h.width = std::stoul(next_token(in));
    h.height = std::stoul(next_token(in));
    h.maxval = static_cast<unsigned>(std::stoul(next_token(in)));
  } catch (const std::exception&) {
    throw DataError("malformed PGM header: " + path.string());
  }
  if (h.width == 0 || h.height == 0 || h.maxval == 0 || h.maxval > 65535) {
    throw DataError("invalid PGM dimensions or maxval: " + path.string());
  }
  return h;
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open file: " + path.string());
  return in;
}

void write_header(std::ostream& out, std::size_t w, std::size_t h, unsigned maxval,
                  const std::string& comment) {
  out << "P5\n";
  if (!comment.empty()) {
    std::istringstream lines(comment);
    std::string line;
    while (std::getline(lines, line)) out << "# " << line << '\n';
  }
  out << w << ' ' << h << '\n' << maxval << '\n';
}

}  // namespace

RawSlice read_pgm16(const std::filesystem::path& path) {
  auto in = open_in(path);
  const PgmHeader h = read_header(in, path);
  RawSlice img(h.height, h.width);
  if (h.maxval < 256) {
    std::vector<unsigned char> buf(img.size());
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!in) throw DataError("truncated PGM data: " + path.string());
    std::copy(buf.begin(), buf.end(), img.data.begin());
  } else {
    std::vector<unsigned char> buf(img.size() * 2);
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!in) throw DataError("truncated PGM data: " + path.string());
    for (std::size_t i = 0; i < img.size(); ++i) {
      img.data[i] = static_cast<std::uint16_t>((buf[2 * i] << 8) | buf[2 * i + 1]);
    }
  }
  return img;
}

void write_pgm16(const std::filesystem::path& path, const RawSlice& img,
                 const std::string& comment) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write file: " + path.string());
  write_header(out, img.cols, img.rows, 65535, comment);
  std::vector<unsigned char> buf(img.size() * 2);
  for (std::size_t i = 0; i < img.size(); ++i) {
    buf[2 * i] = static_cast<unsigned char>(img.data[i] >> 8);
    buf[2 * i + 1] = static_cast<unsigned char>(img.data[i] & 0xFF);
  }
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

Grid<std::uint8_t> read_pgm8(const std::filesystem::path& path) {
  auto in = open_in(path);
  const PgmHeader h = read_header(in, path);
  if (h.maxval > 255) throw DataError("expected 8-bit PGM: " + path.string());
  Grid<std::uint8_t> img(h.height, h.width);
  in.read(reinterpret_cast<char*>(img.data.data()), static_cast<std::streamsize>(img.size()));
  if (!in) throw DataError("truncated PGM data: " + path.string());
  return img;
}

void write_pgm8(const std::filesystem::path& path, const Grid<std::uint8_t>& img,
                const std::string& comment) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write file: " + path.string());
  write_header(out, img.cols, img.rows, 255, comment);
  out.write(reinterpret_cast<const char*>(img.data.data()), static_cast<std::streamsize>(img.size()));
}

}  // namespace ipf
