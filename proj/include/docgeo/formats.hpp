#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "docgeo/geometry.hpp"
#include "docgeo/textline.hpp"

namespace docgeo {

/// Per-pixel surface coordinates (X,Y,Z) in [0,1], 3 channels.
using CoordMap3D = Grid<float>;

namespace formats {

// ".dgwf": "DGWF", u32 version=1, u32 height, u32 width, then (dx,dy)
// float32 pairs, row-major, little-endian.
std::vector<char> encode_warp_field(const WarpField& f);
WarpField decode_warp_field(const std::vector<char>& bytes);
void write_warp_field(const std::filesystem::path& path, const WarpField& f);
WarpField read_warp_field(const std::filesystem::path& path);

// ".dg3d": "DG3D", u32 version=1, u32 height, u32 width, then (X,Y,Z)
// float32 triples, row-major, little-endian.
std::vector<char> encode_coord_map(const CoordMap3D& c);
CoordMap3D decode_coord_map(const std::vector<char>& bytes);
void write_coord_map(const std::filesystem::path& path, const CoordMap3D& c);
CoordMap3D read_coord_map(const std::filesystem::path& path);

// lines.jsonl: one {"points": [[x,y],...], "thickness": t, "length": l} object
// per line. "length" (flat-page extent) is optional; when absent it is the
// horizontal extent of the points.
std::string serialize_lines(const TextlineSet& lines);
TextlineSet parse_lines(const std::string& text);
void write_lines(const std::filesystem::path& path, const TextlineSet& lines);
TextlineSet read_lines(const std::filesystem::path& path);

// 8-bit PNG. Gray images load with 1 channel, colour images with 3 (RGB).
void write_png(const std::filesystem::path& path, const Image& img);
Image read_png(const std::filesystem::path& path);
void write_mask_png(const std::filesystem::path& path, const Mask& mask);
Mask read_mask_png(const std::filesystem::path& path);

std::vector<char> read_file(const std::filesystem::path& path);
std::string read_text(const std::filesystem::path& path);
/// Writes via a temporary sibling and rename.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);
void write_file_atomic(const std::filesystem::path& path, const std::vector<char>& contents);

}  // namespace formats
}  // namespace docgeo
