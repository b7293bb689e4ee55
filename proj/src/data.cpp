#include "hdc/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

#include "hdc/image_io.hpp"

namespace hdc {
namespace {

namespace fs = std::filesystem;

struct Primitive {
  enum class Kind { Box, Sphere, Cylinder } kind;
  double cx, cy, rx, ry, height;
  bool transparent;
  std::array<double, 3> color;
};

std::array<double, 3> hue_color(double hue) {
  const double s = 0.7, v = 0.9;
  const double h = std::fmod(hue, 1.0) * 6.0;
  const double c = v * s, x = c * (1 - std::abs(std::fmod(h, 2.0) - 1)), m = v - c;
  std::array<double, 3> rgb{};
  switch (static_cast<int>(h)) {
    case 0: rgb = {c, x, 0}; break;
    case 1: rgb = {x, c, 0}; break;
    case 2: rgb = {0, c, x}; break;
    case 3: rgb = {0, x, c}; break;
    case 4: rgb = {x, 0, c}; break;
    default: rgb = {c, 0, x}; break;
  }
  for (auto& ch : rgb) ch += m;
  return rgb;
}

/// Bilinearly interpolated random lattice with smoothstep weights.
class ValueNoise {
 public:
  ValueNoise(std::mt19937_64& rng, int64_t width, int64_t height, double cell)
      : cell_(cell), gw_(static_cast<int64_t>(width / cell) + 2), gh_(static_cast<int64_t>(height / cell) + 2) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    grid_.resize(static_cast<size_t>(gw_ * gh_));
    for (auto& g : grid_) g = u(rng);
  }

  double operator()(double x, double y) const {
    const double gx = x / cell_, gy = y / cell_;
    const auto ix = static_cast<int64_t>(gx), iy = static_cast<int64_t>(gy);
    auto smooth = [](double t) { return t * t * (3 - 2 * t); };
    const double fx = smooth(gx - static_cast<double>(ix)), fy = smooth(gy - static_cast<double>(iy));
    auto at = [this](int64_t i, int64_t j) { return grid_[static_cast<size_t>(j * gw_ + i)]; };
    const double top = at(ix, iy) * (1 - fx) + at(ix + 1, iy) * fx;
    const double bot = at(ix, iy + 1) * (1 - fx) + at(ix + 1, iy + 1) * fx;
    return top * (1 - fy) + bot * fy;
  }

 private:
  double cell_;
  int64_t gw_, gh_;
  std::vector<double> grid_;
};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

bool parse_positive(const std::string& text, double& out) {
  try {
    size_t used = 0;
    const double v = std::stod(text, &used);
    if (used != text.size() || !(v > 0) || !std::isfinite(v)) return false;
    out = v;
    return true;
  } catch (const std::exception&) {
    return false;
  }
}

Image gray8(int64_t w, int64_t h, const std::vector<uint8_t>& mask) {
  Image img{w, h, 1, 255, std::vector<uint16_t>(mask.size())};
  for (size_t i = 0; i < mask.size(); ++i) img.data[i] = mask[i] ? 255 : 0;
  return img;
}

}  // namespace

std::vector<uint8_t> DepthSample::eval_mask() const {
  std::vector<uint8_t> m(valid_mask.size());
  bool any = false;
  for (size_t i = 0; i < m.size(); ++i) {
    m[i] = valid_mask[i] && transparent_mask[i];
    any = any || m[i];
  }
  return any ? m : valid_mask;
}

void DepthSample::check() const {
  const auto n = static_cast<size_t>(pixels());
  auto expect = [&](size_t got, size_t want, const char* what) {
    if (got != want)
      throw std::invalid_argument("sample " + id + ": " + what + " has " + std::to_string(got) +
                                  " values, expected " + std::to_string(want));
  };
  if (width < 1 || height < 1) throw std::invalid_argument("sample " + id + ": empty image");
  expect(rgb.size(), 3 * n, "rgb");
  expect(raw_depth.size(), n, "raw depth");
  expect(gt_depth.size(), n, "gt depth");
  expect(valid_mask.size(), n, "valid mask");
  expect(transparent_mask.size(), n, "transparent mask");
}

HoleMode parse_hole_mode(const std::string& name) {
  if (name == "zero") return HoleMode::Zero;
  if (name == "passthrough") return HoleMode::PassThrough;
  if (name == "mixed") return HoleMode::Mixed;
  throw std::invalid_argument("hole mode must be zero, passthrough or mixed, got '" + name + "'");
}

DepthSample gen_synthetic(const SceneSpec& spec) {
  if (spec.width < 8 || spec.height < 8 || spec.width % 4 != 0 || spec.height % 4 != 0)
    throw std::invalid_argument("synthetic scene size " + std::to_string(spec.width) + "x" +
                                std::to_string(spec.height) + " must be multiples of 4, at least 8");
  if (spec.num_primitives < 0) throw std::invalid_argument("synthetic scene: negative primitive count");
  if (spec.num_primitives == 0 && spec.hole_ratio > 0)
    throw std::invalid_argument("synthetic scene: hole ratio " + std::to_string(spec.hole_ratio) +
                                " needs at least one primitive");
  if (!(spec.hole_ratio >= 0 && spec.hole_ratio <= 1))
    throw std::invalid_argument("synthetic scene: hole ratio must lie in [0,1]");
  if (!(spec.noise_sigma >= 0)) throw std::invalid_argument("synthetic scene: noise sigma must be >= 0");

  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto range = [&](double lo, double hi) { return lo + (hi - lo) * u(rng); };
  const int64_t W = spec.width, H = spec.height, N = W * H;
  const double scale = static_cast<double>(std::min(W, H));

  const double d0 = range(0.9, 1.1), tilt_x = range(-0.05, 0.05), tilt_y = range(-0.15, -0.05);
  auto plane = [&](double x, double y) {
    return d0 + tilt_x * (x / static_cast<double>(W) - 0.5) + tilt_y * (y / static_cast<double>(H) - 0.5);
  };

  std::vector<Primitive> prims;
  const double hue0 = u(rng);
  for (int p = 0; p < spec.num_primitives; ++p) {
    Primitive pr{};
    pr.kind = static_cast<Primitive::Kind>(static_cast<int>(u(rng) * 3) % 3);
    pr.cx = range(0.15, 0.85) * static_cast<double>(W);
    pr.cy = range(0.15, 0.85) * static_cast<double>(H);
    pr.rx = range(0.08, 0.2) * scale;
    pr.ry = pr.kind == Primitive::Kind::Sphere ? pr.rx : range(0.08, 0.2) * scale;
    pr.height = range(0.03, 0.15);
    const bool coin = u(rng) < 0.5;
    pr.transparent = p == 0 || coin;
    pr.color = hue_color(hue0 + 0.618034 * p);
    prims.push_back(pr);
  }

  DepthSample s;
  s.id = "synth_" + std::to_string(spec.seed);
  s.width = W;
  s.height = H;
  s.gt_depth.resize(static_cast<size_t>(N));
  std::vector<int> owner(static_cast<size_t>(N), -1);
  for (int64_t y = 0; y < H; ++y)
    for (int64_t x = 0; x < W; ++x) {
      const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
      double best = plane(px, py);
      int who = -1;
      for (size_t p = 0; p < prims.size(); ++p) {
        const auto& pr = prims[p];
        const double dx = (px - pr.cx) / pr.rx, dy = (py - pr.cy) / pr.ry;
        const double base = plane(pr.cx, pr.cy);
        double d = INFINITY;
        switch (pr.kind) {
          case Primitive::Kind::Box:
            if (std::abs(dx) <= 1 && std::abs(dy) <= 1) d = base - pr.height;
            break;
          case Primitive::Kind::Sphere:
            if (dx * dx + dy * dy < 1) d = base - pr.height * std::sqrt(1 - dx * dx - dy * dy);
            break;
          case Primitive::Kind::Cylinder:
            if (std::abs(dx) <= 1 && std::abs(dy) < 1) d = base - pr.height * std::sqrt(1 - dy * dy);
            break;
        }
        if (d < best) {
          best = d;
          who = static_cast<int>(p);
        }
      }
      s.gt_depth[static_cast<size_t>(y * W + x)] = static_cast<float>(best);
      owner[static_cast<size_t>(y * W + x)] = who;
    }

  s.valid_mask.assign(static_cast<size_t>(N), 0);
  s.transparent_mask.assign(static_cast<size_t>(N), 0);
  std::vector<int64_t> transparent_pixels;
  for (int64_t i = 0; i < N; ++i) {
    const auto k = static_cast<size_t>(i);
    s.valid_mask[k] = s.gt_depth[k] > 0;
    if (owner[k] >= 0 && prims[static_cast<size_t>(owner[k])].transparent) {
      s.transparent_mask[k] = 1;
      transparent_pixels.push_back(i);
    }
  }

  // Carve exactly round(ratio * area) holes where a smooth field is lowest.
  ValueNoise hole_field(rng, W, H, std::max(4.0, scale / 8));
  std::vector<double> field(static_cast<size_t>(N));
  for (int64_t i = 0; i < N; ++i)
    field[static_cast<size_t>(i)] = hole_field(static_cast<double>(i % W) + 0.5, static_cast<double>(i / W) + 0.5);
  std::sort(transparent_pixels.begin(), transparent_pixels.end(), [&](int64_t a, int64_t b) {
    const double fa = field[static_cast<size_t>(a)], fb = field[static_cast<size_t>(b)];
    return fa != fb ? fa < fb : a < b;
  });
  const auto holes = static_cast<size_t>(std::llround(spec.hole_ratio * static_cast<double>(transparent_pixels.size())));
  std::vector<uint8_t> is_hole(static_cast<size_t>(N), 0);
  for (size_t h = 0; h < holes; ++h) is_hole[static_cast<size_t>(transparent_pixels[h])] = 1;

  std::normal_distribution<double> gauss(0.0, 1.0);
  s.raw_depth.resize(static_cast<size_t>(N));
  for (int64_t i = 0; i < N; ++i) {
    const auto k = static_cast<size_t>(i);
    const double noise = std::clamp(gauss(rng), -3.0, 3.0) * spec.noise_sigma;
    if (!is_hole[k]) {
      s.raw_depth[k] = static_cast<float>(s.gt_depth[k] + noise);
      continue;
    }
    bool zero = spec.hole_mode == HoleMode::Zero;
    if (spec.hole_mode == HoleMode::Mixed) zero = owner[k] % 2 == 0;
    s.raw_depth[k] = zero ? 0.0f
                          : static_cast<float>(plane(static_cast<double>(i % W) + 0.5,
                                                     static_cast<double>(i / W) + 0.5) + noise);
  }

  // Lambertian shading from the ground-truth surface.
  ValueNoise grain(rng, W, H, std::max(2.0, scale / 16));
  const double pixel_m = 0.6 / static_cast<double>(W);
  const double lx = 0.3, ly = -0.4, lz = 0.866;
  const double hx = lx / 2, hy = ly / 2, hz = (lz + 1) / 2, hn = std::sqrt(hx * hx + hy * hy + hz * hz);
  s.rgb.resize(static_cast<size_t>(3 * N));
  auto depth_at = [&](int64_t x, int64_t y) {
    x = std::clamp<int64_t>(x, 0, W - 1);
    y = std::clamp<int64_t>(y, 0, H - 1);
    return static_cast<double>(s.gt_depth[static_cast<size_t>(y * W + x)]);
  };
  for (int64_t y = 0; y < H; ++y)
    for (int64_t x = 0; x < W; ++x) {
      const auto k = static_cast<size_t>(y * W + x);
      const double gx = (depth_at(x + 1, y) - depth_at(x - 1, y)) / (2 * pixel_m);
      const double gy = (depth_at(x, y + 1) - depth_at(x, y - 1)) / (2 * pixel_m);
      const double nn = std::sqrt(gx * gx + gy * gy + 1);
      const double nx = -gx / nn, ny = -gy / nn, nz = 1 / nn;
      const double lambert = std::max(0.0, nx * lx + ny * ly + nz * lz);
      const double g = 0.9 + 0.2 * grain(static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5);
      const std::array<double, 3> table{0.55 * g, 0.42 * g, 0.30 * g};
      std::array<double, 3> albedo = table;
      double spec_term = 0;
      if (owner[k] >= 0) {
        const auto& pr = prims[static_cast<size_t>(owner[k])];
        if (pr.transparent) {
          for (int c = 0; c < 3; ++c) albedo[static_cast<size_t>(c)] = 0.7 * table[static_cast<size_t>(c)] + 0.3 * pr.color[static_cast<size_t>(c)];
          spec_term = 0.6 * std::pow(std::max(0.0, (nx * hx + ny * hy + nz * hz) / hn), 20.0);
        } else {
          albedo = pr.color;
        }
      }
      for (int c = 0; c < 3; ++c)
        s.rgb[static_cast<size_t>(c) * static_cast<size_t>(N) + k] = static_cast<float>(
            std::clamp(albedo[static_cast<size_t>(c)] * (0.25 + 0.75 * lambert) + spec_term, 0.0, 1.0));
    }
  return s;
}

std::vector<DepthSample> gen_synthetic_set(const SceneSpec& base, int count) {
  std::vector<DepthSample> out;
  out.reserve(static_cast<size_t>(std::max(count, 0)));
  for (int i = 0; i < count; ++i) {
    SceneSpec s = base;
    s.seed = base.seed * 1000003ULL + static_cast<uint64_t>(i);
    out.push_back(gen_synthetic(s));
    out.back().id = "s" + std::to_string(base.seed) + "_" + std::to_string(i);
  }
  return out;
}

void write_depth_pgm(const std::string& path, int64_t width, int64_t height, const std::vector<float>& depth,
                     double depth_scale) {
  if (static_cast<int64_t>(depth.size()) != width * height)
    throw std::invalid_argument(path + ": depth buffer does not match " + std::to_string(width) + "x" +
                                std::to_string(height));
  Image img{width, height, 1, 65535, std::vector<uint16_t>(depth.size())};
  for (size_t i = 0; i < depth.size(); ++i) {
    const double units = std::round(static_cast<double>(depth[i]) / depth_scale);
    img.data[i] = static_cast<uint16_t>(std::clamp(units, 0.0, 65535.0));
  }
  write_pnm(path, img);
}

std::vector<float> read_depth_pgm(const std::string& path, double depth_scale, int64_t* width, int64_t* height) {
  const Image img = read_pnm(path);
  if (img.channels != 1) throw std::runtime_error(path + ": depth must be a gray (P5) image");
  std::vector<float> d(img.data.size());
  for (size_t i = 0; i < d.size(); ++i) d[i] = static_cast<float>(img.data[i] * depth_scale);
  if (width) *width = img.width;
  if (height) *height = img.height;
  return d;
}

void write_rgb_ppm(const std::string& path, int64_t width, int64_t height, const std::vector<float>& rgb) {
  const auto n = static_cast<size_t>(width * height);
  if (rgb.size() != 3 * n) throw std::invalid_argument(path + ": rgb buffer does not match image size");
  Image img{width, height, 3, 255, std::vector<uint16_t>(3 * n)};
  for (size_t i = 0; i < n; ++i)
    for (size_t c = 0; c < 3; ++c)
      img.data[3 * i + c] = static_cast<uint16_t>(std::lround(std::clamp(rgb[c * n + i], 0.0f, 1.0f) * 255.0f));
  write_pnm(path, img);
}

std::vector<float> read_rgb_ppm(const std::string& path, int64_t* width, int64_t* height) {
  const Image img = read_pnm(path);
  if (img.channels != 3) throw std::runtime_error(path + ": rgb must be a color (P6) image");
  const auto n = static_cast<size_t>(img.width * img.height);
  std::vector<float> rgb(3 * n);
  const auto maxval = static_cast<float>(img.maxval);
  for (size_t i = 0; i < n; ++i)
    for (size_t c = 0; c < 3; ++c) rgb[c * n + i] = static_cast<float>(img.data[3 * i + c]) / maxval;
  if (width) *width = img.width;
  if (height) *height = img.height;
  return rgb;
}

void write_dataset(const std::string& root, const std::string& split, const std::vector<DepthSample>& samples,
                   double depth_scale) {
  if (!(depth_scale > 0)) throw std::invalid_argument("depth scale must be positive");
  fs::create_directories(fs::path(root) / split);
  std::ostringstream manifest;
  manifest.precision(17);
  manifest << "# id rgb raw gt valid transp\n";
  manifest << "depth_scale: " << depth_scale << "\n";
  std::set<std::string> seen;
  for (const auto& s : samples) {
    s.check();
    if (!seen.insert(s.id).second) throw std::invalid_argument("duplicate sample id " + s.id);
    const std::string stem = split + "/" + s.id;
    const fs::path base(root);
    write_rgb_ppm((base / (stem + "_rgb.ppm")).string(), s.width, s.height, s.rgb);
    write_depth_pgm((base / (stem + "_raw.pgm")).string(), s.width, s.height, s.raw_depth, depth_scale);
    write_depth_pgm((base / (stem + "_gt.pgm")).string(), s.width, s.height, s.gt_depth, depth_scale);
    write_pnm((base / (stem + "_valid.pgm")).string(), gray8(s.width, s.height, s.valid_mask));
    write_pnm((base / (stem + "_transp.pgm")).string(), gray8(s.width, s.height, s.transparent_mask));
    manifest << s.id << ' ' << stem << "_rgb.ppm " << stem << "_raw.pgm " << stem << "_gt.pgm " << stem
             << "_valid.pgm " << stem << "_transp.pgm\n";
  }
  std::ofstream f(fs::path(root) / (split + ".manifest"));
  if (!f) throw std::runtime_error("cannot write manifest under " + root);
  f << manifest.str();
}

DatasetLoad load_dataset(const std::string& root, const std::string& split) {
  const fs::path mpath = fs::path(root) / (split + ".manifest");
  std::ifstream f(mpath);
  if (!f) throw std::runtime_error("cannot open manifest " + mpath.string());
  struct Entry {
    std::vector<std::string> fields;
    int line;
  };
  std::vector<Entry> entries;
  std::string global_scale;
  bool have_scale_line = false;
  std::set<std::string> ids;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.rfind("depth_scale:", 0) == 0) {
      if (have_scale_line)
        throw std::runtime_error(mpath.string() + ":" + std::to_string(lineno) + ": repeated depth_scale line");
      have_scale_line = true;
      global_scale = trim(line.substr(12));
      continue;
    }
    std::istringstream ss(line);
    std::vector<std::string> fields;
    for (std::string t; ss >> t;) fields.push_back(t);
    if (fields.size() != 6 && fields.size() != 7)
      throw std::runtime_error(mpath.string() + ":" + std::to_string(lineno) + ": expected 'id rgb raw gt valid transp [scale]', got " +
                               std::to_string(fields.size()) + " fields");
    if (!ids.insert(fields[0]).second)
      throw std::runtime_error(mpath.string() + ":" + std::to_string(lineno) + ": duplicate id " + fields[0]);
    entries.push_back({fields, lineno});
  }

  DatasetLoad out;
  for (const auto& e : entries) {
    const std::string& id = e.fields[0];
    try {
      const std::string scale_text = e.fields.size() == 7 ? e.fields[6] : global_scale;
      double scale = 0;
      if (!parse_positive(scale_text, scale))
        throw std::runtime_error("unreadable depth scale '" + scale_text + "'");
      auto path = [&](size_t i) { return (fs::path(root) / e.fields[i]).string(); };
      DepthSample s;
      s.id = id;
      int64_t w = 0, h = 0;
      s.rgb = read_rgb_ppm(path(1), &s.width, &s.height);
      auto same_size = [&](const std::string& what) {
        if (w != s.width || h != s.height)
          throw std::runtime_error(what + " is " + std::to_string(w) + "x" + std::to_string(h) + " but rgb is " +
                                   std::to_string(s.width) + "x" + std::to_string(s.height));
      };
      s.raw_depth = read_depth_pgm(path(2), scale, &w, &h);
      same_size("raw depth");
      s.gt_depth = read_depth_pgm(path(3), scale, &w, &h);
      same_size("gt depth");
      for (size_t m = 4; m <= 5; ++m) {
        const Image img = read_pnm(path(m));
        w = img.width;
        h = img.height;
        same_size(m == 4 ? "valid mask" : "transparent mask");
        if (img.channels != 1) throw std::runtime_error(e.fields[m] + ": mask must be a gray image");
        auto& dst = m == 4 ? s.valid_mask : s.transparent_mask;
        dst.resize(img.data.size());
        for (size_t i = 0; i < dst.size(); ++i) dst[i] = img.data[i] != 0;
      }
      for (size_t i = 0; i < s.valid_mask.size(); ++i) s.valid_mask[i] = s.valid_mask[i] && s.gt_depth[i] > 0;
      out.samples.push_back(std::move(s));
    } catch (const std::exception& ex) {
      out.rejected.push_back("sample " + id + " (" + mpath.filename().string() + ":" + std::to_string(e.line) +
                             "): " + ex.what());
    }
  }
  return out;
}

void write_error_map(const std::string& path, int64_t width, int64_t height, const std::vector<float>& pred,
                     const std::vector<float>& gt, const std::vector<uint8_t>& mask) {
  const auto n = static_cast<size_t>(width * height);
  if (pred.size() != n || gt.size() != n || mask.size() != n)
    throw std::invalid_argument(path + ": error map inputs do not match " + std::to_string(width) + "x" +
                                std::to_string(height));
  std::vector<double> err(n, 0.0), masked;
  for (size_t i = 0; i < n; ++i)
    if (mask[i]) {
      err[i] = std::abs(static_cast<double>(pred[i]) - static_cast<double>(gt[i]));
      masked.push_back(err[i]);
    }
  double top = 0;
  if (!masked.empty()) {
    std::sort(masked.begin(), masked.end());
    const auto rank = static_cast<size_t>(std::ceil(0.99 * static_cast<double>(masked.size())));
    top = masked[std::max<size_t>(rank, 1) - 1];
    if (top <= 0) top = masked.back();
  }
  Image img{width, height, 1, 255, std::vector<uint16_t>(n, 0)};
  if (top > 0)
    for (size_t i = 0; i < n; ++i)
      if (mask[i]) img.data[i] = static_cast<uint16_t>(std::min(255.0, std::round(255.0 * err[i] / top)));
  write_pnm(path, img);
}

Batch make_batch(const std::vector<DepthSample>& samples, const std::vector<size_t>& indices) {
  if (indices.empty()) throw std::invalid_argument("make_batch: empty batch");
  const auto& first = samples.at(indices[0]);
  const int64_t W = first.width, H = first.height, N = static_cast<int64_t>(indices.size()), P = W * H;
  Batch b{Tensor<float>({N, 3, H, W}), Tensor<float>({N, 1, H, W}), Tensor<float>({N, 1, H, W}),
          Tensor<float>({N, 1, H, W}), Tensor<float>({N, 1, H, W})};
  for (int64_t j = 0; j < N; ++j) {
    const auto& s = samples.at(indices[static_cast<size_t>(j)]);
    s.check();
    if (s.width != W || s.height != H)
      throw std::invalid_argument("make_batch: sample " + s.id + " is " + std::to_string(s.width) + "x" +
                                  std::to_string(s.height) + ", batch is " + std::to_string(W) + "x" +
                                  std::to_string(H));
    std::copy(s.rgb.begin(), s.rgb.end(), b.rgb.ptr() + j * 3 * P);
    std::copy(s.raw_depth.begin(), s.raw_depth.end(), b.raw_depth.ptr() + j * P);
    std::copy(s.gt_depth.begin(), s.gt_depth.end(), b.gt_depth.ptr() + j * P);
    const auto em = s.eval_mask();
    for (int64_t i = 0; i < P; ++i) {
      b.train_mask.ptr()[j * P + i] = s.valid_mask[static_cast<size_t>(i)];
      b.eval_mask.ptr()[j * P + i] = em[static_cast<size_t>(i)];
    }
  }
  return b;
}

}  // namespace hdc
