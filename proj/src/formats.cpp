#include "docgeo/formats.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

namespace docgeo {

double horizontal_extent(const std::vector<Point>& points) {
  if (points.empty()) return 0.0;
  auto [lo, hi] = std::minmax_element(points.begin(), points.end(),
                                      [](const Point& a, const Point& b) { return a.x < b.x; });
  return hi->x - lo->x;
}

namespace formats {
namespace {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <class T>
void put_le(std::vector<char>& out, T value) {
  static_assert(sizeof(T) == 4);
  std::uint32_t bits;
  std::memcpy(&bits, &value, 4);
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xFF));
}

template <class T>
T get_le(const std::vector<char>& in, std::size_t& pos) {
  static_assert(sizeof(T) == 4);
  require(pos + 4 <= in.size(), ErrorCode::Format, "unexpected end of data");
  std::uint32_t bits = 0;
  for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[pos + b])) << (8 * b);
  pos += 4;
  T value;
  std::memcpy(&value, &bits, 4);
  return value;
}

constexpr std::uint32_t kVersion = 1;

void put_header(std::vector<char>& out, const char* magic, int h, int w) {
  out.insert(out.end(), magic, magic + 4);
  put_le<std::uint32_t>(out, kVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(h));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(w));
}

void get_header(const std::vector<char>& in, const char* magic, std::size_t& pos, int& h, int& w,
                std::size_t values_per_pixel) {
  require(in.size() >= 16 && std::memcmp(in.data(), magic, 4) == 0, ErrorCode::Format,
          std::string("bad magic, expected ") + magic);
  pos = 4;
  const auto version = get_le<std::uint32_t>(in, pos);
  require(version == kVersion, ErrorCode::Format, "unsupported version " + std::to_string(version));
  const auto uh = get_le<std::uint32_t>(in, pos);
  const auto uw = get_le<std::uint32_t>(in, pos);
  require(uh >= 1 && uw >= 1 && uh < (1u << 16) && uw < (1u << 16), ErrorCode::Format,
          "implausible dimensions");
  h = static_cast<int>(uh);
  w = static_cast<int>(uw);
  const std::size_t expected = 16 + static_cast<std::size_t>(h) * w * values_per_pixel * 4;
  require(in.size() == expected, ErrorCode::Format, "payload size does not match header");
}

}  // namespace

std::vector<char> encode_warp_field(const WarpField& f) {
  validate(f);
  std::vector<char> out;
  out.reserve(16 + f.dx.size() * 8);
  put_header(out, "DGWF", f.height, f.width);
  for (std::size_t k = 0; k < f.dx.size(); ++k) {
    put_le(out, f.dx[k]);
    put_le(out, f.dy[k]);
  }
  return out;
}

WarpField decode_warp_field(const std::vector<char>& bytes) {
  std::size_t pos = 0;
  int h = 0, w = 0;
  get_header(bytes, "DGWF", pos, h, w, 2);
  WarpField f = identity_flow(h, w);
  for (std::size_t k = 0; k < f.dx.size(); ++k) {
    f.dx[k] = get_le<float>(bytes, pos);
    f.dy[k] = get_le<float>(bytes, pos);
  }
  validate(f);
  return f;
}

void write_warp_field(const std::filesystem::path& path, const WarpField& f) {
  write_file_atomic(path, encode_warp_field(f));
}

WarpField read_warp_field(const std::filesystem::path& path) { return decode_warp_field(read_file(path)); }

std::vector<char> encode_coord_map(const CoordMap3D& c) {
  require(c.channels == 3 && c.height >= 1 && c.width >= 1, ErrorCode::ShapeMismatch,
          "coordinate map must be H×W×3");
  std::vector<char> out;
  out.reserve(16 + c.data.size() * 4);
  put_header(out, "DG3D", c.height, c.width);
  for (float v : c.data) put_le(out, v);
  return out;
}

CoordMap3D decode_coord_map(const std::vector<char>& bytes) {
  std::size_t pos = 0;
  int h = 0, w = 0;
  get_header(bytes, "DG3D", pos, h, w, 3);
  CoordMap3D c(h, w, 3);
  for (float& v : c.data) v = get_le<float>(bytes, pos);
  return c;
}

void write_coord_map(const std::filesystem::path& path, const CoordMap3D& c) {
  write_file_atomic(path, encode_coord_map(c));
}

CoordMap3D read_coord_map(const std::filesystem::path& path) { return decode_coord_map(read_file(path)); }

std::string serialize_lines(const TextlineSet& lines) {
  std::string out;
  for (const Textline& line : lines) {
    nlohmann::json pts = nlohmann::json::array();
    for (const Point& p : line.points) pts.push_back({p.x, p.y});
    nlohmann::json obj;
    obj["points"] = std::move(pts);
    obj["thickness"] = line.thickness;
    obj["length"] = line.length;
    out += obj.dump();
    out += '\n';
  }
  return out;
}

TextlineSet parse_lines(const std::string& text) {
  TextlineSet lines;
  std::istringstream in(text);
  std::string row;
  int lineno = 0;
  while (std::getline(in, row)) {
    ++lineno;
    if (row.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(row);
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::Format, "lines.jsonl line " + std::to_string(lineno) + ": " + e.what());
    }
    require(obj.is_object() && obj.contains("points") && obj["points"].is_array(), ErrorCode::Format,
            "lines.jsonl line " + std::to_string(lineno) + ": missing points");
    Textline line;
    for (const auto& p : obj["points"]) {
      require(p.is_array() && p.size() == 2, ErrorCode::Format, "point must be [x, y]");
      line.points.push_back({p[0].get<double>(), p[1].get<double>()});
    }
    require(line.points.size() >= 2, ErrorCode::Format, "a textline needs at least 2 points");
    line.thickness = obj.value("thickness", 1.0);
    line.length = obj.contains("length") ? obj["length"].get<double>() : horizontal_extent(line.points);
    lines.push_back(std::move(line));
  }
  return lines;
}

void write_lines(const std::filesystem::path& path, const TextlineSet& lines) {
  write_file_atomic(path, serialize_lines(lines));
}

TextlineSet read_lines(const std::filesystem::path& path) { return parse_lines(read_text(path)); }

void write_png(const std::filesystem::path& path, const Image& img) {
  require(img.channels == 1 || img.channels == 3, ErrorCode::ShapeMismatch,
          "write_png: 1 or 3 channels");
  cv::Mat mat(img.height, img.width, img.channels == 1 ? CV_8UC1 : CV_8UC3);
  for (int y = 0; y < img.height; ++y) {
    auto* row = mat.ptr<unsigned char>(y);
    for (int x = 0; x < img.width; ++x) {
      for (int c = 0; c < img.channels; ++c) {
        // OpenCV stores BGR.
        const int src_c = img.channels == 3 ? 2 - c : 0;
        const double v = std::clamp(img.at(y, x, src_c), 0.0, 1.0);
        row[x * img.channels + c] = static_cast<unsigned char>(std::lround(v * 255.0));
      }
    }
  }
  std::vector<unsigned char> buf;
  require(cv::imencode(".png", mat, buf), ErrorCode::Io, "png encoding failed: " + path.string());
  write_file_atomic(path, std::vector<char>(buf.begin(), buf.end()));
}

Image read_png(const std::filesystem::path& path) {
  cv::Mat mat = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  require(!mat.empty(), ErrorCode::Io, "cannot read image: " + path.string());
  if (mat.channels() != 1) mat = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (mat.depth() != CV_8U) mat.convertTo(mat, CV_8U, 1.0 / 257.0);
  const int ch = mat.channels() == 1 ? 1 : 3;
  Image img(mat.rows, mat.cols, ch);
  for (int y = 0; y < mat.rows; ++y) {
    const auto* row = mat.ptr<unsigned char>(y);
    for (int x = 0; x < mat.cols; ++x) {
      for (int c = 0; c < ch; ++c) {
        const int src_c = ch == 3 ? 2 - c : 0;
        img.at(y, x, c) = row[x * ch + src_c] / 255.0;
      }
    }
  }
  return img;
}

void write_mask_png(const std::filesystem::path& path, const Mask& mask) {
  Image img(mask.height, mask.width, 1);
  for (std::size_t k = 0; k < mask.data.size(); ++k) img.data[k] = mask.data[k] ? 1.0 : 0.0;
  write_png(path, img);
}

Mask read_mask_png(const std::filesystem::path& path) {
  const Image img = to_gray(read_png(path));
  Mask mask(img.height, img.width, 1);
  for (std::size_t k = 0; k < img.data.size(); ++k) mask.data[k] = img.data[k] >= 0.5 ? 1 : 0;
  return mask;
}

std::vector<char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorCode::Io, "cannot open " + path.string());
  return std::vector<char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

std::string read_text(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  return std::string(bytes.begin(), bytes.end());
}

void write_file_atomic(const std::filesystem::path& path, const std::vector<char>& contents) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(out), ErrorCode::Io, "cannot write " + tmp.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    require(static_cast<bool>(out), ErrorCode::Io, "write failed: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  require(!ec, ErrorCode::Io, "cannot rename into " + path.string() + ": " + ec.message());
}

void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
  write_file_atomic(path, std::vector<char>(contents.begin(), contents.end()));
}

}  // namespace formats
}  // namespace docgeo
