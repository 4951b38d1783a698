#include "seqscript/pgm.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

namespace seqscript {

namespace {

// Accepts [H,W] or [H,W,1].
void check_image(const Tensor& image) {
  const bool ok = image.rank() == 2 || (image.rank() == 3 && image.shape[2] == 1);
  if (!ok) throw ShapeError("pgm: image must be [H,W] or [H,W,1], got " + shape_str(image.shape));
}

struct ByteReader {
  const std::vector<std::uint8_t>& bytes;
  std::size_t pos = 0;

  int peek() const { return pos < bytes.size() ? bytes[pos] : -1; }
  int get() { return pos < bytes.size() ? bytes[pos++] : -1; }

  // One whitespace-delimited header token; '#' starts a comment to EOL.
  std::string token() {
    std::string t;
    for (;;) {
      int c = peek();
      if (c == '#') {
        while (c != -1 && c != '\n') c = get();
        continue;
      }
      if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
        get();
        continue;
      }
      break;
    }
    for (;;) {
      int c = peek();
      if (c == -1 || c == ' ' || c == '\t' || c == '\r' || c == '\n' || c == '#') break;
      t.push_back(static_cast<char>(get()));
    }
    if (t.empty()) throw FormatError("pgm: truncated header");
    return t;
  }
};

int parse_dim(const std::string& tok) {
  if (tok.empty() || tok.size() > 6) throw FormatError("pgm: bad dimension token '" + tok + "'");
  long v = 0;
  for (char c : tok) {
    if (c < '0' || c > '9') throw FormatError("pgm: bad dimension token '" + tok + "'");
    v = v * 10 + (c - '0');
  }
  if (v < 1 || v > 65535) throw FormatError("pgm: dimension " + tok + " out of range");
  return static_cast<int>(v);
}

}  // namespace

std::vector<std::uint8_t> write_pgm(const Tensor& image) {
  check_image(image);
  const int H = image.shape[0], W = image.shape[1];
  char header[64];
  const int n = std::snprintf(header, sizeof(header), "P5\n%d %d\n255\n", W, H);
  std::vector<std::uint8_t> out(header, header + n);
  out.reserve(out.size() + image.size());
  for (double v : image.data) {
    const double q = std::lround(255.0 * std::min(1.0, std::max(0.0, v)));
    out.push_back(static_cast<std::uint8_t>(q));
  }
  return out;
}

Tensor read_pgm(const std::vector<std::uint8_t>& bytes) {
  ByteReader r{bytes};
  const std::string magic = r.token();
  if (magic != "P5") throw FormatError("pgm: expected magic P5, got '" + magic + "'");
  const int W = parse_dim(r.token());
  const int H = parse_dim(r.token());
  const int maxval = parse_dim(r.token());
  if (maxval != 255) throw FormatError("pgm: only maxval 255 supported, got " + std::to_string(maxval));
  // exactly one whitespace byte separates the header from the payload
  const int sep = r.get();
  if (sep != ' ' && sep != '\t' && sep != '\r' && sep != '\n')
    throw FormatError("pgm: missing header/payload separator");
  const std::size_t need = static_cast<std::size_t>(W) * H;
  if (bytes.size() - r.pos < need)
    throw FormatError("pgm: truncated payload, need " + std::to_string(need) + " bytes, have " +
                      std::to_string(bytes.size() - r.pos));
  Tensor img({H, W, 1}, 0.0);
  for (std::size_t i = 0; i < need; ++i) img.data[i] = bytes[r.pos + i] / 255.0;
  return img;
}

void write_pgm_file(const Tensor& image, const std::string& path) {
  const std::vector<std::uint8_t> bytes = write_pgm(image);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed: " + path);
}

Tensor read_pgm_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open: " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
  return read_pgm(bytes);
}

}  // namespace seqscript
