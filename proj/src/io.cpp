#include "sfm/io.hpp"

#include <png.h>

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>

namespace sfm::io {

namespace {

std::string read_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// All writers go through here: write a sibling tmp file, then rename over the
// destination so readers never observe a partial file.
void atomic_write_bytes(const std::string& path, const std::string& bytes) {
  std::filesystem::path dst(path);
  std::filesystem::path tmp = dst;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + tmp.string());
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    f.flush();
    if (!f) throw std::runtime_error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, dst);
}

std::string ext_of(const std::string& path) {
  std::string e = std::filesystem::path(path).extension().string();
  if (!e.empty() && e[0] == '.') e.erase(0, 1);
  std::transform(e.begin(), e.end(), e.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return e;
}

template <class T>
void put_le(std::string& out, T v) {
  char b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
  out.append(b, sizeof(T));
}

template <class T>
T get_scalar(const std::string& s, size_t pos, bool file_little_endian) {
  char b[sizeof(T)];
  std::memcpy(b, s.data() + pos, sizeof(T));
  bool host_le = std::endian::native == std::endian::little;
  if (host_le != file_little_endian) std::reverse(b, b + sizeof(T));
  T v;
  std::memcpy(&v, b, sizeof(T));
  return v;
}

unsigned char to_byte(double v) {
  return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

// --------------------------------------------------------------------------
// Header scanning for the Netpbm-style text headers (PPM, PFM): whitespace
// and '#' comments between tokens, position tracked for error offsets.

struct Scan {
  const std::string& s;
  const std::string& path;
  size_t pos = 0;

  bool eof() const { return pos >= s.size(); }
  int peek() const { return eof() ? -1 : static_cast<unsigned char>(s[pos]); }

  void skip_space_and_comments() {
    for (;;) {
      while (!eof() && std::isspace(peek())) ++pos;
      if (!eof() && peek() == '#') {
        while (!eof() && peek() != '\n') ++pos;
        continue;
      }
      return;
    }
  }

  long parse_uint(const char* what) {
    skip_space_and_comments();
    if (!std::isdigit(peek())) throw ParseError(path, std::string("expected ") + what, pos);
    long v = 0;
    while (std::isdigit(peek())) {
      v = v * 10 + (s[pos] - '0');
      ++pos;
      if (v > (1L << 30)) throw ParseError(path, std::string(what) + " out of range", pos);
    }
    return v;
  }

  double parse_real(const char* what) {
    skip_space_and_comments();
    const char* begin = s.c_str() + pos;
    char* end = nullptr;
    double v = std::strtod(begin, &end);
    if (end == begin) throw ParseError(path, std::string("expected ") + what, pos);
    pos += static_cast<size_t>(end - begin);
    return v;
  }

  // Exactly one whitespace byte separates the header from binary data.
  void expect_data_separator() {
    if (eof() || !std::isspace(peek()))
      throw ParseError(path, "expected whitespace before binary data", pos);
    ++pos;
  }
};

// --------------------------------------------------------------------------
// PNG via libpng, encoded to / decoded from memory. The longjmp error path
// only touches heap state reached through pointers fixed before setjmp.

struct MemReader {
  const unsigned char* data = nullptr;
  size_t size = 0;
  size_t pos = 0;
};

extern "C" void png_mem_read(png_structp png, png_bytep out, png_size_t n) {
  auto* r = static_cast<MemReader*>(png_get_io_ptr(png));
  if (r->pos + n > r->size) png_error(png, "unexpected end of data");
  std::memcpy(out, r->data + r->pos, n);
  r->pos += n;
}

struct MemWriter {
  std::string out;
};

extern "C" void png_mem_write(png_structp png, png_bytep data, png_size_t n) {
  auto* w = static_cast<MemWriter*>(png_get_io_ptr(png));
  w->out.append(reinterpret_cast<const char*>(data), n);
}

extern "C" void png_mem_flush(png_structp) {}

struct PngPixels {
  int w = 0, h = 0, channels = 0;
  size_t stride = 0;
  std::vector<unsigned char> bytes;      // h * stride
  std::vector<png_bytep> row_pointers;   // into bytes
};

// want16: require the file to be 16-bit grayscale and keep raw (big-endian)
// sample bytes. Otherwise normalize everything to 8-bit gray or RGB.
std::unique_ptr<PngPixels> decode_png(const std::string& path, const std::string& bytes,
                                      bool want16) {
  if (bytes.size() < 8 ||
      png_sig_cmp(reinterpret_cast<const unsigned char*>(bytes.data()), 0, 8) != 0)
    throw ParseError(path, "bad png signature", 0);

  auto reader = std::make_unique<MemReader>();
  reader->data = reinterpret_cast<const unsigned char*>(bytes.data());
  reader->size = bytes.size();

  auto px = std::make_unique<PngPixels>();

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw std::runtime_error("png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw std::runtime_error("png_create_info_struct failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    size_t off = reader->pos;
    png_destroy_read_struct(&png, &info, nullptr);
    throw ParseError(path, "invalid png data", off);
  }

  png_set_read_fn(png, reader.get(), png_mem_read);
  png_read_info(png, info);

  png_uint_32 w = png_get_image_width(png, info);
  png_uint_32 h = png_get_image_height(png, info);
  int depth = png_get_bit_depth(png, info);
  int color = png_get_color_type(png, info);

  if (want16) {
    if (depth != 16 || color != PNG_COLOR_TYPE_GRAY) {
      size_t off = reader->pos;
      png_destroy_read_struct(&png, &info, nullptr);
      throw ParseError(path, "expected 16-bit grayscale png", off);
    }
  } else {
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (depth == 16) png_set_strip_16(png);
    if (color & PNG_COLOR_MASK_ALPHA || png_get_valid(png, info, PNG_INFO_tRNS))
      png_set_strip_alpha(png);
  }
  png_set_interlace_handling(png);
  png_read_update_info(png, info);

  px->w = static_cast<int>(w);
  px->h = static_cast<int>(h);
  px->channels = png_get_channels(png, info);
  px->stride = png_get_rowbytes(png, info);
  px->bytes.resize(px->stride * h);
  px->row_pointers.resize(h);
  for (png_uint_32 y = 0; y < h; ++y) px->row_pointers[y] = px->bytes.data() + y * px->stride;

  png_read_image(png, px->row_pointers.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return px;
}

std::string encode_png(int w, int h, int channels, int bit_depth,
                       const std::vector<unsigned char>& rows, size_t stride) {
  auto sink = std::make_unique<MemWriter>();
  auto row_pointers = std::make_unique<std::vector<png_bytep>>(h);
  for (int y = 0; y < h; ++y)
    (*row_pointers)[y] = const_cast<png_bytep>(rows.data() + static_cast<size_t>(y) * stride);

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw std::runtime_error("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw std::runtime_error("png_create_info_struct failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("png encode failed");
  }

  png_set_write_fn(png, sink.get(), png_mem_write, png_mem_flush);
  int color = channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB;
  png_set_IHDR(png, info, w, h, bit_depth, color, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, row_pointers->data());
  png_write_end(png, info);
  png_destroy_write_struct(&png, &info);
  return std::move(sink->out);
}

Image read_png8(const std::string& path, const std::string& bytes) {
  auto px = decode_png(path, bytes, false);
  if (px->channels != 1 && px->channels != 3)
    throw ParseError(path, "unsupported png channel count", 0);
  Image img(px->h, px->w, px->channels);
  for (int y = 0; y < px->h; ++y)
    for (int x = 0; x < px->w; ++x)
      for (int c = 0; c < px->channels; ++c)
        img.ch[c].at(y, x) =
            px->bytes[y * px->stride + static_cast<size_t>(x) * px->channels + c] / 255.0;
  return img;
}

std::string encode_png8(const Image& img) {
  int h = img.height(), w = img.width(), c = img.channels();
  require(c == 1 || c == 3, "png images must have 1 or 3 channels");
  size_t stride = static_cast<size_t>(w) * c;
  std::vector<unsigned char> rows(stride * h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int k = 0; k < c; ++k)
        rows[y * stride + static_cast<size_t>(x) * c + k] = to_byte(img.ch[k].at(y, x));
  return encode_png(w, h, c, 8, rows, stride);
}

Image read_ppm(const std::string& path, const std::string& bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6')
    throw ParseError(path, "expected ppm magic P6", 0);
  Scan sc{bytes, path, 2};
  long w = sc.parse_uint("width");
  long h = sc.parse_uint("height");
  long maxval = sc.parse_uint("maxval");
  if (w <= 0 || h <= 0) throw ParseError(path, "invalid dimensions", sc.pos);
  if (maxval != 255) throw ParseError(path, "only maxval 255 supported", sc.pos);
  sc.expect_data_separator();
  size_t need = static_cast<size_t>(w) * h * 3;
  if (bytes.size() - sc.pos < need) throw ParseError(path, "truncated pixel data", bytes.size());
  Image img(static_cast<int>(h), static_cast<int>(w), 3);
  const unsigned char* d = reinterpret_cast<const unsigned char*>(bytes.data()) + sc.pos;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) img.ch[c].at(y, x) = d[(y * w + x) * 3 + c] / 255.0;
  return img;
}

std::string encode_ppm(const Image& img) {
  int h = img.height(), w = img.width(), c = img.channels();
  require(c == 1 || c == 3, "ppm images must have 1 or 3 channels");
  std::string out = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  out.reserve(out.size() + static_cast<size_t>(w) * h * 3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int k = 0; k < 3; ++k)
        out.push_back(static_cast<char>(to_byte(img.ch[c == 1 ? 0 : k].at(y, x))));
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------

Image read_image(const std::string& path) {
  std::string bytes = read_bytes(path);
  std::string ext = ext_of(path);
  if (ext == "png") return read_png8(path, bytes);
  if (ext == "ppm") return read_ppm(path, bytes);
  throw std::invalid_argument("unsupported image extension: " + path);
}

void write_image(const std::string& path, const Image& img) {
  require(img.channels() > 0 && img.height() > 0 && img.width() > 0, "empty image");
  std::string ext = ext_of(path);
  if (ext == "png")
    atomic_write_bytes(path, encode_png8(img));
  else if (ext == "ppm")
    atomic_write_bytes(path, encode_ppm(img));
  else
    throw std::invalid_argument("unsupported image extension: " + path);
}

Grid read_pfm(const std::string& path) {
  std::string bytes = read_bytes(path);
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != 'f')
    throw ParseError(path, "expected pfm magic Pf", 0);
  Scan sc{bytes, path, 2};
  long w = sc.parse_uint("width");
  long h = sc.parse_uint("height");
  double scale = sc.parse_real("scale");
  if (w <= 0 || h <= 0) throw ParseError(path, "invalid dimensions", sc.pos);
  if (scale == 0.0) throw ParseError(path, "scale must be nonzero", sc.pos);
  sc.expect_data_separator();
  size_t need = static_cast<size_t>(w) * h * 4;
  if (bytes.size() - sc.pos < need) throw ParseError(path, "truncated float data", bytes.size());
  bool file_le = scale < 0.0;
  Grid g(static_cast<int>(h), static_cast<int>(w));
  // File rows run bottom-up: first stored row is the bottom image row.
  for (long fy = 0; fy < h; ++fy) {
    long y = h - 1 - fy;
    for (long x = 0; x < w; ++x)
      g.at(static_cast<int>(y), static_cast<int>(x)) =
          get_scalar<float>(bytes, sc.pos + (fy * w + x) * 4, file_le);
  }
  return g;
}

void write_pfm(const std::string& path, const Grid& g) {
  require(g.h > 0 && g.w > 0, "empty grid");
  std::string out = "Pf\n" + std::to_string(g.w) + " " + std::to_string(g.h) + "\n-1.0\n";
  out.reserve(out.size() + g.size() * 4);
  for (int y = g.h - 1; y >= 0; --y)
    for (int x = 0; x < g.w; ++x) put_le(out, static_cast<float>(g.at(y, x)));
  atomic_write_bytes(path, out);
}

Grid read_depth_png16(const std::string& path, double scale) {
  require(scale > 0.0, "depth scale must be positive");
  std::string bytes = read_bytes(path);
  auto px = decode_png(path, bytes, true);
  Grid g(px->h, px->w);
  for (int y = 0; y < px->h; ++y)
    for (int x = 0; x < px->w; ++x) {
      const unsigned char* b = &px->bytes[y * px->stride + static_cast<size_t>(x) * 2];
      unsigned value = (static_cast<unsigned>(b[0]) << 8) | b[1];  // png is big-endian
      g.at(y, x) = value * scale;
    }
  return g;
}

void write_depth_png16(const std::string& path, const Grid& g, double scale) {
  require(g.h > 0 && g.w > 0, "empty grid");
  require(scale > 0.0, "depth scale must be positive");
  size_t stride = static_cast<size_t>(g.w) * 2;
  std::vector<unsigned char> rows(stride * g.h);
  for (int y = 0; y < g.h; ++y)
    for (int x = 0; x < g.w; ++x) {
      long value = std::lround(g.at(y, x) / scale);
      value = std::clamp(value, 0L, 65535L);
      rows[y * stride + static_cast<size_t>(x) * 2] = static_cast<unsigned char>(value >> 8);
      rows[y * stride + static_cast<size_t>(x) * 2 + 1] = static_cast<unsigned char>(value & 0xff);
    }
  atomic_write_bytes(path, encode_png(g.w, g.h, 1, 16, rows, stride));
}

Grid read_depth(const std::string& path, double png_scale, Mask* dmask) {
  std::string ext = ext_of(path);
  Grid g;
  if (ext == "pfm")
    g = read_pfm(path);
  else if (ext == "png")
    g = read_depth_png16(path, png_scale);
  else
    throw std::invalid_argument("unsupported depth extension: " + path);
  if (dmask) {
    *dmask = Mask(g.h, g.w, 0);
    for (size_t i = 0; i < g.size(); ++i) dmask->v[i] = g.v[i] != 0.0 ? 1 : 0;
  }
  return g;
}

void write_flo(const std::string& path, const Grid& u, const Grid& v) {
  require(u.same_shape(v), "flow components must share shape");
  require(u.h > 0 && u.w > 0, "empty flow");
  std::string out = "PIEH";
  put_le(out, static_cast<int32_t>(u.w));
  put_le(out, static_cast<int32_t>(u.h));
  for (int y = 0; y < u.h; ++y)
    for (int x = 0; x < u.w; ++x) {
      put_le(out, static_cast<float>(u.at(y, x)));
      put_le(out, static_cast<float>(v.at(y, x)));
    }
  atomic_write_bytes(path, out);
}

std::pair<Grid, Grid> read_flo(const std::string& path) {
  std::string bytes = read_bytes(path);
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "PIEH", 4) != 0)
    throw ParseError(path, "expected flo magic PIEH", 0);
  if (bytes.size() < 12) throw ParseError(path, "truncated header", bytes.size());
  int32_t w = get_scalar<int32_t>(bytes, 4, true);
  int32_t h = get_scalar<int32_t>(bytes, 8, true);
  if (w <= 0 || h <= 0 || static_cast<long>(w) * h > (1L << 28))
    throw ParseError(path, "invalid dimensions", 4);
  size_t need = 12 + static_cast<size_t>(w) * h * 8;
  if (bytes.size() < need) throw ParseError(path, "truncated flow data", bytes.size());
  Grid u(h, w), v(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      size_t off = 12 + (static_cast<size_t>(y) * w + x) * 8;
      u.at(y, x) = get_scalar<float>(bytes, off, true);
      v.at(y, x) = get_scalar<float>(bytes, off + 4, true);
    }
  return {std::move(u), std::move(v)};
}

Image flow_to_color(const Grid& u, const Grid& v) {
  require(u.same_shape(v), "flow components must share shape");
  require(u.h > 0 && u.w > 0, "empty flow");
  std::vector<double> mags(u.size());
  for (size_t i = 0; i < u.size(); ++i) mags[i] = std::hypot(u.v[i], v.v[i]);
  std::vector<double> sorted = mags;
  std::sort(sorted.begin(), sorted.end());
  size_t idx = static_cast<size_t>(std::llround(0.99 * (sorted.size() - 1)));
  double norm = sorted[idx];
  if (norm <= 0.0) norm = 1.0;  // all-zero flow renders white

  Image img(u.h, u.w, 3);
  for (int y = 0; y < u.h; ++y)
    for (int x = 0; x < u.w; ++x) {
      double mag = mags[static_cast<size_t>(y) * u.w + x];
      double sat = std::min(mag / norm, 1.0);
      double deg = std::atan2(v.at(y, x), u.at(y, x)) * (180.0 / 3.14159265358979323846);
      if (deg < 0.0) deg += 360.0;
      // HSV with value 1: zero magnitude desaturates to white.
      double h6 = deg / 60.0;
      double c = sat;
      double xx = c * (1.0 - std::fabs(std::fmod(h6, 2.0) - 1.0));
      double m = 1.0 - c;
      double r = 0, g = 0, b = 0;
      if (h6 < 1)
        r = c, g = xx;
      else if (h6 < 2)
        r = xx, g = c;
      else if (h6 < 3)
        g = c, b = xx;
      else if (h6 < 4)
        g = xx, b = c;
      else if (h6 < 5)
        r = xx, b = c;
      else
        r = c, b = xx;
      img.ch[0].at(y, x) = r + m;
      img.ch[1].at(y, x) = g + m;
      img.ch[2].at(y, x) = b + m;
    }
  return img;
}

std::string read_text(const std::string& path) { return read_bytes(path); }

void write_text(const std::string& path, const std::string& content) {
  atomic_write_bytes(path, content);
}

void write_trace_csv(const std::string& path, const std::vector<double>& trace) {
  std::ostringstream ss;
  ss << "iter,loss\n";
  ss.precision(17);
  for (size_t i = 0; i < trace.size(); ++i) ss << i << "," << trace[i] << "\n";
  atomic_write_bytes(path, ss.str());
}

}  // namespace sfm::io
