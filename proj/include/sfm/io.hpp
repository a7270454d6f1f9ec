#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "sfm/array.hpp"

namespace sfm::io {

// Malformed input; offset is the byte position where parsing failed.
struct ParseError : std::runtime_error {
  size_t offset;

  ParseError(const std::string& path, const std::string& what, size_t off)
      : std::runtime_error(path + ": " + what + " (byte " + std::to_string(off) + ")"),
        offset(off) {}
};

// ---------------------------------------------------------------------------
// Images: 8-bit PNG (gray or RGB) and binary PPM "P6", values in [0, 1].
// Format chosen by file extension. All writers are atomic (write + rename).

Image read_image(const std::string& path);
void write_image(const std::string& path, const Image& img);

// ---------------------------------------------------------------------------
// Depth: PFM ("Pf", scale -1.0 = little-endian, bottom-up rows) round-trips
// float32 exactly; 16-bit gray PNG stores round(d / scale) so that
// d = value * scale. Zero values mean missing depth; *dmask marks presence.

Grid read_pfm(const std::string& path);
void write_pfm(const std::string& path, const Grid& g);

Grid read_depth_png16(const std::string& path, double scale);
void write_depth_png16(const std::string& path, const Grid& g, double scale);

// By extension: .pfm or .png (with png_scale). Fills *dmask = (value != 0).
Grid read_depth(const std::string& path, double png_scale, Mask* dmask = nullptr);

// ---------------------------------------------------------------------------
// Optical flow interchange: magic "PIEH", int32 w, h, row-major interleaved
// float32 (u, v).

void write_flo(const std::string& path, const Grid& u, const Grid& v);
std::pair<Grid, Grid> read_flo(const std::string& path);

// Direction-to-hue, magnitude-to-saturation wheel; magnitude normalized by
// the 99th percentile so globally scaled flows render identically. Zero flow
// is white.
Image flow_to_color(const Grid& u, const Grid& v);

// ---------------------------------------------------------------------------
// Text helpers (atomic).

std::string read_text(const std::string& path);
void write_text(const std::string& path, const std::string& content);
void write_trace_csv(const std::string& path, const std::vector<double>& trace);

}  // namespace sfm::io
