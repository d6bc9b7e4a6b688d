#pragma once

// Native raster files. A text header of "key value" lines terminated by "end"
// is followed by a little-endian planar payload (channel-major):
//
//   CORDSEG-MCS 1
//   dtype f32            (u8 for label maps)
//   rows 96
//   cols 96
//   channels 8
//   spacing_mm 0.25 0.25
//   subject 3
//   scan 1
//   slice 2
//   payload_bytes 294912
//   checksum 9f0c5e21d2b4a7c3   (FNV-1a 64 of the payload)
//   end

#include <png.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <istream>
#include <map>
#include <memory>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "cordseg/error.hpp"
#include "cordseg/image.hpp"

namespace cordseg {

inline constexpr const char* kRasterMagic = "CORDSEG-MCS";
inline constexpr int kRasterVersion = 1;

inline std::uint64_t fnv1a64(const std::uint8_t* data, std::size_t n) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= data[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

namespace detail {

template <class T>
struct RasterDtype;
template <>
struct RasterDtype<float> {
  static constexpr const char* name = "f32";
};
template <>
struct RasterDtype<std::uint8_t> {
  static constexpr const char* name = "u8";
};

template <class T>
void append_le(std::vector<std::uint8_t>& out, T value) {
  std::uint8_t bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  out.insert(out.end(), bytes, bytes + sizeof(T));
}

template <class T>
T read_le(const std::uint8_t* bytes) {
  std::uint8_t tmp[sizeof(T)];
  std::memcpy(tmp, bytes, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(tmp, tmp + sizeof(T));
  T value;
  std::memcpy(&value, tmp, sizeof(T));
  return value;
}

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

template <class T>
void write_raster(std::ostream& out, const Image<T>& image) {
  image.validate();
  std::vector<std::uint8_t> payload;
  payload.reserve(image.values.size() * sizeof(T));
  for (std::size_t ch = 0; ch < image.channels; ++ch)
    for (std::size_t i = 0; i < image.pixels(); ++i) detail::append_le(payload, image.values[i * image.channels + ch]);

  char checksum[17];
  std::snprintf(checksum, sizeof checksum, "%016llx",
                static_cast<unsigned long long>(fnv1a64(payload.data(), payload.size())));
  out << kRasterMagic << ' ' << kRasterVersion << '\n'
      << "dtype " << detail::RasterDtype<T>::name << '\n'
      << "rows " << image.rows << '\n'
      << "cols " << image.cols << '\n'
      << "channels " << image.channels << '\n'
      << "spacing_mm " << detail::format_double(image.spacing.row) << ' ' << detail::format_double(image.spacing.col)
      << '\n'
      << "subject " << image.id.subject << '\n'
      << "scan " << image.id.scan << '\n'
      << "slice " << image.id.slice << '\n'
      << "payload_bytes " << payload.size() << '\n'
      << "checksum " << checksum << '\n'
      << "end\n";
  out.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
  require(static_cast<bool>(out), ErrorCode::io, "failed writing raster payload");
}

template <class T>
Image<T> read_raster(std::istream& in) {
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), ErrorCode::format, "empty raster file");
  {
    std::istringstream first(line);
    std::string magic;
    int version = 0;
    first >> magic >> version;
    require(magic == kRasterMagic, ErrorCode::format, "not a raster file (bad magic '" + magic + "')");
    require(version == kRasterVersion, ErrorCode::format, "unsupported raster version " + std::to_string(version));
  }
  std::map<std::string, std::string> fields;
  bool terminated = false;
  while (std::getline(in, line)) {
    if (line == "end") {
      terminated = true;
      break;
    }
    const auto space = line.find(' ');
    require(space != std::string::npos && space > 0, ErrorCode::format, "malformed header line '" + line + "'");
    fields[line.substr(0, space)] = line.substr(space + 1);
  }
  require(terminated, ErrorCode::format, "header has no 'end' line");
  auto field = [&fields](const std::string& key) {
    auto it = fields.find(key);
    require(it != fields.end(), ErrorCode::format, "header is missing '" + key + "'");
    return it->second;
  };
  auto number = [&field](const std::string& key) {
    const std::string text = field(key);
    std::size_t used = 0;
    long long v = 0;
    try {
      v = std::stoll(text, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    require(used == text.size() && v >= 0, ErrorCode::format, "header field '" + key + "' is not a count: " + text);
    return static_cast<std::size_t>(v);
  };

  require(field("dtype") == detail::RasterDtype<T>::name, ErrorCode::format,
          "raster dtype " + field("dtype") + ", expected " + detail::RasterDtype<T>::name);
  Image<T> image(number("rows"), number("cols"), number("channels"));
  {
    std::istringstream sp(field("spacing_mm"));
    require(static_cast<bool>(sp >> image.spacing.row >> image.spacing.col), ErrorCode::format, "malformed spacing_mm");
  }
  image.id.subject = static_cast<int>(number("subject"));
  image.id.scan = static_cast<int>(number("scan"));
  image.id.slice = static_cast<int>(number("slice"));

  const std::size_t expected = image.values.size() * sizeof(T);
  require(number("payload_bytes") == expected, ErrorCode::format,
          "payload_bytes " + field("payload_bytes") + " disagrees with extent (" + std::to_string(expected) + ")");
  std::vector<std::uint8_t> payload(expected);
  in.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(expected));
  const auto got = static_cast<std::size_t>(in.gcount());
  require(got == expected, ErrorCode::format,
          "truncated payload: expected " + std::to_string(expected) + " bytes, got " + std::to_string(got));

  char checksum[17];
  std::snprintf(checksum, sizeof checksum, "%016llx",
                static_cast<unsigned long long>(fnv1a64(payload.data(), payload.size())));
  require(field("checksum") == checksum, ErrorCode::integrity,
          "checksum mismatch: header " + field("checksum") + ", payload " + checksum);

  std::size_t offset = 0;
  for (std::size_t ch = 0; ch < image.channels; ++ch)
    for (std::size_t i = 0; i < image.pixels(); ++i, offset += sizeof(T))
      image.values[i * image.channels + ch] = detail::read_le<T>(payload.data() + offset);
  image.validate();
  return image;
}

template <class T>
void save_raster(const std::filesystem::path& path, const Image<T>& image) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorCode::io, "cannot open " + path.string() + " for writing");
  write_raster(out, image);
}

template <class T>
Image<T> load_raster(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorCode::io, "cannot open " + path.string());
  try {
    return read_raster<T>(in);
  } catch (const Error& e) {
    throw Error(e.code(), path.string() + ": " + std::string(e.what()));
  }
}

inline void save_slice(const std::filesystem::path& path, const MultiChannelSlice& s) { save_raster(path, s); }
inline MultiChannelSlice load_slice(const std::filesystem::path& path) { return load_raster<float>(path); }
inline void save_labels(const std::filesystem::path& path, const LabelMap& l) { save_raster(path, l); }
inline LabelMap load_labels(const std::filesystem::path& path) { return load_raster<std::uint8_t>(path); }

// ---- PNG -----------------------------------------------------------------------

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};

inline void write_png(const std::filesystem::path& path, std::size_t rows, std::size_t cols, int color_type,
                      std::size_t bytes_per_pixel, const std::vector<std::uint8_t>& pixels) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::unique_ptr<std::FILE, FileCloser> file(std::fopen(path.c_str(), "wb"));
  require(file != nullptr, ErrorCode::io, "cannot open " + path.string() + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error(ErrorCode::io, "PNG encoding failed for " + path.string());
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(cols), static_cast<png_uint_32>(rows), 8, color_type,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t r = 0; r < rows; ++r)
    png_write_row(png, const_cast<png_bytep>(pixels.data() + r * cols * bytes_per_pixel));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace detail

inline void write_png_gray(const std::filesystem::path& path, const Image<std::uint8_t>& image) {
  require(image.channels == 1, ErrorCode::invalid_argument, "grayscale PNG needs one channel");
  detail::write_png(path, image.rows, image.cols, PNG_COLOR_TYPE_GRAY, 1, image.values);
}

inline void write_png_rgb(const std::filesystem::path& path, const Image<std::uint8_t>& image) {
  require(image.channels == 3, ErrorCode::invalid_argument, "RGB PNG needs three channels");
  detail::write_png(path, image.rows, image.cols, PNG_COLOR_TYPE_RGB, 3, image.values);
}

/// Decodes any 8-bit PNG to a single gray channel.
inline Image<std::uint8_t> read_png_gray(const std::filesystem::path& path) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  require(png_image_begin_read_from_file(&img, path.c_str()) != 0, ErrorCode::format,
          "cannot decode PNG " + path.string());
  img.format = PNG_FORMAT_GRAY;
  Image<std::uint8_t> out(img.height, img.width, 1);
  if (png_image_finish_read(&img, nullptr, out.values.data(), 0, nullptr) == 0) {
    png_image_free(&img);
    throw Error(ErrorCode::format, "cannot decode PNG " + path.string());
  }
  return out;
}

/// Linear min-max scaling of one channel to 8 bits.
template <class T>
Image<std::uint8_t> to_display(const Image<T>& image, std::size_t ch = 0) {
  const Image<T> single = channel(image, ch);
  double lo = 0.0, hi = 0.0;
  if (!single.values.empty()) {
    lo = hi = static_cast<double>(single.values[0]);
    for (T v : single.values) {
      lo = std::min(lo, static_cast<double>(v));
      hi = std::max(hi, static_cast<double>(v));
    }
  }
  Image<std::uint8_t> out = single.template like<std::uint8_t>(1);
  const double scale = hi > lo ? 255.0 / (hi - lo) : 0.0;
  for (std::size_t i = 0; i < out.values.size(); ++i)
    out.values[i] = static_cast<std::uint8_t>(std::lround((static_cast<double>(single.values[i]) - lo) * scale));
  return out;
}

}  // namespace cordseg
