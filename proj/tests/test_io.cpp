#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>

#include "sfm/io.hpp"

using namespace sfm;

namespace {

namespace fs = std::filesystem;

// Fresh scratch directory per test case.
struct TmpDir {
  fs::path dir;
  TmpDir(const char* tag) : dir(fs::temp_directory_path() / (std::string("sfm_io_") + tag)) {
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  ~TmpDir() { fs::remove_all(dir); }
  std::string operator/(const char* name) const { return (dir / name).string(); }
};

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(f.good());
  return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

void spit(const std::string& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

// Image whose samples are exactly representable at 8 bits (k / 255).
Image quantized_image(int h, int w, int c, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> d(0, 255);
  Image img(h, w, c);
  for (int k = 0; k < c; ++k)
    for (double& v : img.ch[k].v) v = d(rng) / 255.0;
  return img;
}

Grid random_grid(int h, int w, uint64_t seed, double lo, double hi) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(lo, hi);
  Grid g(h, w);
  for (double& v : g.v) v = d(rng);
  return g;
}

}  // namespace

TEST_CASE("png round trip is exact at 8 bits, gray and rgb") {
  TmpDir t("png8");
  for (int c : {1, 3}) {
    Image img = quantized_image(13, 17, c, 100 + c);
    std::string path = t / (c == 1 ? "gray.png" : "rgb.png");
    io::write_image(path, img);
    Image back = io::read_image(path);
    REQUIRE(back.channels() == c);
    REQUIRE(back.height() == 13);
    REQUIRE(back.width() == 17);
    for (int k = 0; k < c; ++k)
      for (size_t i = 0; i < img.ch[k].size(); ++i) CHECK(back.ch[k].v[i] == img.ch[k].v[i]);
  }
}

TEST_CASE("png writer quantizes by rounding and clamps out-of-range values") {
  TmpDir t("pngq");
  Image img(1, 4, 1);
  img.ch[0].at(0, 0) = -0.25;         // clamps to 0
  img.ch[0].at(0, 1) = 1.75;          // clamps to 255
  img.ch[0].at(0, 2) = 128.4 / 255.0; // rounds to 128
  img.ch[0].at(0, 3) = 128.6 / 255.0; // rounds to 129
  io::write_image(t / "q.png", img);
  Image back = io::read_image(t / "q.png");
  CHECK(back.ch[0].at(0, 0) == 0.0);
  CHECK(back.ch[0].at(0, 1) == 1.0);
  CHECK(back.ch[0].at(0, 2) == 128.0 / 255.0);
  CHECK(back.ch[0].at(0, 3) == 129.0 / 255.0);
}

TEST_CASE("ppm round trip is exact at 8 bits") {
  TmpDir t("ppm");
  Image img = quantized_image(9, 11, 3, 7);
  io::write_image(t / "img.ppm", img);
  Image back = io::read_image(t / "img.ppm");
  REQUIRE(back.channels() == 3);
  for (int k = 0; k < 3; ++k)
    for (size_t i = 0; i < img.ch[k].size(); ++i) CHECK(back.ch[k].v[i] == img.ch[k].v[i]);
}

TEST_CASE("ppm header accepts comments and flexible whitespace") {
  TmpDir t("ppmc");
  std::string body(2 * 1 * 3, '\0');
  body[0] = char(255);
  body[5] = char(17);
  spit(t / "c.ppm", "P6 # comment\n# another\n 2\t1\n# before maxval\n255\n" + body);
  Image img = io::read_image(t / "c.ppm");
  REQUIRE(img.height() == 1);
  REQUIRE(img.width() == 2);
  CHECK(img.ch[0].at(0, 0) == 1.0);
  CHECK(img.ch[2].at(0, 1) == 17.0 / 255.0);
}

TEST_CASE("ppm parse errors carry byte offsets") {
  TmpDir t("ppme");
  spit(t / "bad.ppm", "P5\n2 2\n255\n");
  CHECK_THROWS_AS(io::read_image(t / "bad.ppm"), io::ParseError);
  try {
    io::read_image(t / "bad.ppm");
  } catch (const io::ParseError& e) {
    CHECK(e.offset == 0);
  }

  std::string truncated = "P6\n2 2\n255\n";
  truncated += std::string(5, '\x40');  // needs 12 bytes of pixels
  spit(t / "short.ppm", truncated);
  try {
    io::read_image(t / "short.ppm");
    FAIL("expected ParseError");
  } catch (const io::ParseError& e) {
    CHECK(e.offset == truncated.size());
  }

  spit(t / "maxval.ppm", "P6\n2 2\n65535\n" + std::string(24, '\0'));
  CHECK_THROWS_AS(io::read_image(t / "maxval.ppm"), io::ParseError);
}

TEST_CASE("pfm round trips float32 exactly, little-endian bottom-up") {
  TmpDir t("pfm");
  Grid g = random_grid(6, 5, 42, 0.01, 99.0);
  io::write_pfm(t / "d.pfm", g);

  std::string bytes = slurp(t / "d.pfm");
  std::string header = "Pf\n5 6\n-1.0\n";
  REQUIRE(bytes.size() == header.size() + 6 * 5 * 4);
  CHECK(bytes.substr(0, header.size()) == header);

  // First stored sample is the bottom-left image pixel.
  float first;
  std::memcpy(&first, bytes.data() + header.size(), 4);
  CHECK(first == static_cast<float>(g.at(5, 0)));

  Grid back = io::read_pfm(t / "d.pfm");
  REQUIRE(back.h == 6);
  REQUIRE(back.w == 5);
  for (size_t i = 0; i < g.size(); ++i)
    CHECK(back.v[i] == static_cast<double>(static_cast<float>(g.v[i])));
}

TEST_CASE("pfm reader honours big-endian scale sign") {
  TmpDir t("pfmbe");
  float value = 3.5f;
  char le[4];
  std::memcpy(le, &value, 4);
  std::string data = "Pf\n1 1\n1.0\n";
  data += std::string{le[3], le[2], le[1], le[0]};  // big-endian sample
  spit(t / "be.pfm", data);
  Grid g = io::read_pfm(t / "be.pfm");
  CHECK(g.at(0, 0) == 3.5);
}

TEST_CASE("pfm parse errors carry byte offsets") {
  TmpDir t("pfme");
  spit(t / "color.pfm", "PF\n1 1\n-1.0\n" + std::string(12, '\0'));
  try {
    io::read_pfm(t / "color.pfm");
    FAIL("expected ParseError");
  } catch (const io::ParseError& e) {
    CHECK(e.offset == 0);
  }

  std::string truncated = "Pf\n2 2\n-1.0\n";
  truncated += std::string(7, '\0');  // needs 16 bytes
  spit(t / "short.pfm", truncated);
  try {
    io::read_pfm(t / "short.pfm");
    FAIL("expected ParseError");
  } catch (const io::ParseError& e) {
    CHECK(e.offset == truncated.size());
  }
}

TEST_CASE("16-bit depth png stores value*scale with rounding") {
  TmpDir t("png16");
  Grid g(2, 2);
  g.at(0, 0) = 5.0;       // 5000 at scale 1/1000
  g.at(0, 1) = 0.0;       // missing
  g.at(1, 0) = 1.2345;    // rounds to 1234 or 1235
  g.at(1, 1) = 100.0;     // clamps? no: 100000 > 65535 clamps to 65.535
  double scale = 1.0 / 1000.0;
  io::write_depth_png16(t / "d.png", g, scale);
  Grid back = io::read_depth_png16(t / "d.png", scale);
  CHECK(back.at(0, 0) == 5.0);  // 5000 * (1/1000) rounds to exactly 5.0
  CHECK(back.at(0, 1) == 0.0);
  CHECK(back.at(1, 0) == doctest::Approx(1.2345).epsilon(1e-3));
  CHECK(back.at(1, 1) == doctest::Approx(65.535));
}

TEST_CASE("read_depth dispatches by extension and masks zero pixels") {
  TmpDir t("depth");
  Grid g(2, 3, 2.0);
  g.at(1, 2) = 0.0;
  io::write_pfm(t / "d.pfm", g);
  io::write_depth_png16(t / "d.png", g, 0.001);

  for (const char* name : {"d.pfm", "d.png"}) {
    Mask dmask;
    Grid back = io::read_depth(t / name, 0.001, &dmask);
    CHECK(back.at(0, 0) == 2.0);
    CHECK(back.at(1, 2) == 0.0);
    CHECK(dmask.count() == 5);
    CHECK(dmask.at(1, 2) == 0);
  }
}

TEST_CASE("reading 8-bit png as 16-bit depth is a parse error") {
  TmpDir t("png16e");
  io::write_image(t / "g.png", quantized_image(3, 3, 1, 5));
  CHECK_THROWS_AS(io::read_depth_png16(t / "g.png", 0.001), io::ParseError);
}

TEST_CASE("corrupt png signature reports offset zero") {
  TmpDir t("pngbad");
  spit(t / "bad.png", "not a png at all");
  try {
    io::read_image(t / "bad.png");
    FAIL("expected ParseError");
  } catch (const io::ParseError& e) {
    CHECK(e.offset == 0);
  }
}

TEST_CASE("flo files are magic + dims + interleaved float32") {
  TmpDir t("flo");
  Grid u(2, 2), v(2, 2);
  u.at(0, 0) = 1.5;
  u.at(1, 1) = -2.25;
  v.at(0, 1) = 0.5;
  io::write_flo(t / "f.flo", u, v);

  std::string bytes = slurp(t / "f.flo");
  REQUIRE(bytes.size() == 44);  // 4 magic + 8 dims + 2*2*2*4 samples
  CHECK(bytes.substr(0, 4) == "PIEH");
  int32_t w, h;
  std::memcpy(&w, bytes.data() + 4, 4);
  std::memcpy(&h, bytes.data() + 8, 4);
  CHECK(w == 2);
  CHECK(h == 2);
  float u00, v00;
  std::memcpy(&u00, bytes.data() + 12, 4);
  std::memcpy(&v00, bytes.data() + 16, 4);
  CHECK(u00 == 1.5f);
  CHECK(v00 == 0.0f);

  auto [ru, rv] = io::read_flo(t / "f.flo");
  for (size_t i = 0; i < u.size(); ++i) {
    CHECK(ru.v[i] == u.v[i]);  // exact: all samples are float-representable
    CHECK(rv.v[i] == v.v[i]);
  }
}

TEST_CASE("flo parse errors carry byte offsets") {
  TmpDir t("floe");
  spit(t / "magic.flo", "PIEJ\x02\x00\x00\x00\x02\x00\x00\x00");
  try {
    io::read_flo(t / "magic.flo");
    FAIL("expected ParseError");
  } catch (const io::ParseError& e) {
    CHECK(e.offset == 0);
  }

  Grid u(2, 2), v(2, 2);
  io::write_flo(t / "ok.flo", u, v);
  std::string bytes = slurp(t / "ok.flo");
  spit(t / "short.flo", bytes.substr(0, 30));
  try {
    io::read_flo(t / "short.flo");
    FAIL("expected ParseError");
  } catch (const io::ParseError& e) {
    CHECK(e.offset == 30);
  }
}

TEST_CASE("flow colorization maps direction to hue and zero flow to white") {
  Grid u(1, 2), v(1, 2);
  u.at(0, 0) = 1.0;
  u.at(0, 1) = -1.0;
  Image img = io::flow_to_color(u, v);
  // Unit magnitudes saturate fully; opposite directions land 180 deg apart.
  CHECK(img.ch[0].at(0, 0) == 1.0);
  CHECK(img.ch[1].at(0, 0) == 0.0);
  CHECK(img.ch[2].at(0, 0) == 0.0);
  CHECK(img.ch[0].at(0, 1) == 0.0);
  CHECK(img.ch[1].at(0, 1) == 1.0);
  CHECK(img.ch[2].at(0, 1) == 1.0);

  Grid z(3, 3), zv(3, 3);
  Image white = io::flow_to_color(z, zv);
  for (int c = 0; c < 3; ++c)
    for (double s : white.ch[c].v) CHECK(s == 1.0);
}

TEST_CASE("flow colorization is invariant to global scale") {
  Grid u = random_grid(8, 8, 3, -2.0, 2.0);
  Grid v = random_grid(8, 8, 4, -2.0, 2.0);
  Image base = io::flow_to_color(u, v);
  for (int c = 0; c < 3; ++c)
    for (double s : base.ch[c].v) {
      CHECK(s >= 0.0);
      CHECK(s <= 1.0);
    }

  Grid u2 = u, v2 = v, u3 = u, v3 = v;
  for (double& x : u2.v) x *= 2.0;
  for (double& x : v2.v) x *= 2.0;
  for (double& x : u3.v) x *= 3.0;
  for (double& x : v3.v) x *= 3.0;
  Image doubled = io::flow_to_color(u2, v2);
  Image tripled = io::flow_to_color(u3, v3);
  for (int c = 0; c < 3; ++c)
    for (size_t i = 0; i < base.ch[c].size(); ++i) {
      CHECK(doubled.ch[c].v[i] == base.ch[c].v[i]);  // power of two: bitwise
      CHECK(tripled.ch[c].v[i] == doctest::Approx(base.ch[c].v[i]).epsilon(1e-9));
    }
}

TEST_CASE("text and csv writers are atomic: no tmp file survives") {
  TmpDir t("txt");
  io::write_text(t / "r.txt", "hello\nworld\n");
  CHECK(io::read_text(t / "r.txt") == "hello\nworld\n");
  io::write_trace_csv(t / "trace.csv", {1.0, 0.5, 0.25});
  std::string csv = io::read_text(t / "trace.csv");
  CHECK(csv.substr(0, 10) == "iter,loss\n");
  CHECK(csv.find("2,0.25\n") != std::string::npos);
  int files = 0;
  for (auto& e : std::filesystem::directory_iterator(t.dir)) {
    CHECK(e.path().extension() != ".tmp");
    ++files;
  }
  CHECK(files == 2);
}
