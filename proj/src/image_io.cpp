#include "hdc/image_io.hpp"

#include <cctype>
#include <fstream>
#include <iterator>
#include <stdexcept>

namespace hdc {
namespace {

class HeaderReader {
 public:
  HeaderReader(const std::string& bytes, const std::string& path) : s_(bytes), path_(path) {}

  std::string token() {
    skip();
    const size_t b = pos_;
    while (pos_ < s_.size() && !std::isspace(static_cast<unsigned char>(s_[pos_]))) ++pos_;
    if (b == pos_) throw std::runtime_error(path_ + ": truncated PNM header");
    return s_.substr(b, pos_ - b);
  }

  int64_t number() {
    const std::string t = token();
    for (char c : t)
      if (!std::isdigit(static_cast<unsigned char>(c)))
        throw std::runtime_error(path_ + ": bad PNM header field '" + t + "'");
    return std::stoll(t);
  }

  /// Exactly one whitespace byte separates the header from the raster.
  size_t raster_offset() const { return pos_ + 1; }

 private:
  void skip() {
    while (pos_ < s_.size()) {
      if (s_[pos_] == '#') {
        while (pos_ < s_.size() && s_[pos_] != '\n') ++pos_;
      } else if (std::isspace(static_cast<unsigned char>(s_[pos_]))) {
        ++pos_;
      } else {
        break;
      }
    }
  }

  const std::string& s_;
  const std::string& path_;
  size_t pos_ = 0;
};

}  // namespace

Image read_pnm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  HeaderReader hr(bytes, path);
  const std::string magic = hr.token();
  Image img;
  if (magic == "P5")
    img.channels = 1;
  else if (magic == "P6")
    img.channels = 3;
  else
    throw std::runtime_error(path + ": unsupported image type '" + magic + "' (expected P5 or P6)");
  img.width = hr.number();
  img.height = hr.number();
  const int64_t maxval = hr.number();
  if (img.width < 1 || img.height < 1) throw std::runtime_error(path + ": empty image");
  if (maxval < 1 || maxval > 65535) throw std::runtime_error(path + ": maxval out of range");
  img.maxval = static_cast<int>(maxval);
  const size_t bps = maxval > 255 ? 2 : 1;
  const size_t count = static_cast<size_t>(img.width * img.height * img.channels);
  const size_t off = hr.raster_offset();
  if (off > bytes.size() || bytes.size() - off < count * bps)
    throw std::runtime_error(path + ": truncated raster");
  img.data.resize(count);
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + off);
  for (size_t i = 0; i < count; ++i)
    img.data[i] = bps == 2 ? static_cast<uint16_t>(p[2 * i] << 8 | p[2 * i + 1]) : p[i];
  return img;
}

void write_pnm(const std::string& path, const Image& img) {
  if (img.channels != 1 && img.channels != 3)
    throw std::invalid_argument(path + ": only 1- or 3-channel images can be written");
  if (static_cast<int64_t>(img.data.size()) != img.width * img.height * img.channels)
    throw std::invalid_argument(path + ": pixel buffer does not match image size");
  if (img.maxval < 1 || img.maxval > 65535) throw std::invalid_argument(path + ": maxval out of range");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << (img.channels == 1 ? "P5 " : "P6 ") << img.width << ' ' << img.height << ' ' << img.maxval << '\n';
  std::string raster;
  const bool wide = img.maxval > 255;
  raster.reserve(img.data.size() * (wide ? 2 : 1));
  for (uint16_t v : img.data) {
    if (v > img.maxval) throw std::invalid_argument(path + ": sample exceeds maxval");
    if (wide) raster.push_back(static_cast<char>(v >> 8));
    raster.push_back(static_cast<char>(v & 0xff));
  }
  f.write(raster.data(), static_cast<std::streamsize>(raster.size()));
  if (!f) throw std::runtime_error("write failed for " + path);
}

}  // namespace hdc
