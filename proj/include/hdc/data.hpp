#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hdc/tensor.hpp"

namespace hdc {

/// One RGB-D record. Planes are row-major; rgb is [3,H,W] in [0,1], depths
/// are meters with 0 meaning no reading.
struct DepthSample {
  std::string id;
  int64_t width = 0, height = 0;
  std::vector<float> rgb;
  std::vector<float> raw_depth;
  std::vector<float> gt_depth;
  std::vector<uint8_t> valid_mask;        // gt_depth > 0
  std::vector<uint8_t> transparent_mask;

  int64_t pixels() const { return width * height; }
  /// Transparent and valid pixels if any exist, otherwise all valid pixels.
  std::vector<uint8_t> eval_mask() const;
  /// Throws std::invalid_argument naming the sample if any plane is mis-sized.
  void check() const;
};

enum class HoleMode { Zero, PassThrough, Mixed };

HoleMode parse_hole_mode(const std::string& name);

struct SceneSpec {
  uint64_t seed = 0;
  int64_t width = 64, height = 48;
  int num_primitives = 4;
  double hole_ratio = 1.0;     // fraction of transparent pixels that lose their reading
  double noise_sigma = 0.002;  // meters, clamped to +-3 sigma
  HoleMode hole_mode = HoleMode::Zero;
};

/// Tilted tabletop near 1 m with boxes, spheres and lying cylinders. At least
/// one primitive (the first) is transparent; the others are transparent with
/// probability one half. Holes follow a smooth random field thresholded so
/// that exactly round(hole_ratio * transparent area) pixels are carved.
DepthSample gen_synthetic(const SceneSpec& spec);

/// `count` scenes sharing `base` except for per-index seeds.
std::vector<DepthSample> gen_synthetic_set(const SceneSpec& base, int count);

struct DatasetLoad {
  std::vector<DepthSample> samples;
  std::vector<std::string> rejected;  // one diagnostic per skipped sample
};

/// Reads `<root>/<split>.manifest`. The manifest holds a `depth_scale: <m>`
/// line and one `id rgb raw gt valid transp [scale]` line per sample, paths
/// relative to root. Structural manifest errors throw; per-sample problems
/// reject only that sample.
DatasetLoad load_dataset(const std::string& root, const std::string& split);

/// Writes samples as PPM/PGM files plus the manifest.
void write_dataset(const std::string& root, const std::string& split,
                   const std::vector<DepthSample>& samples, double depth_scale = 1e-4);

/// 8-bit PGM of |pred - gt| over the mask, scaled to [0, p99]; off-mask black.
void write_error_map(const std::string& path, int64_t width, int64_t height, const std::vector<float>& pred,
                     const std::vector<float>& gt, const std::vector<uint8_t>& mask);

/// Depth as a 16-bit PGM with the given meters-per-unit scale.
void write_depth_pgm(const std::string& path, int64_t width, int64_t height, const std::vector<float>& depth,
                     double depth_scale);
std::vector<float> read_depth_pgm(const std::string& path, double depth_scale, int64_t* width = nullptr,
                                  int64_t* height = nullptr);
void write_rgb_ppm(const std::string& path, int64_t width, int64_t height, const std::vector<float>& rgb);
std::vector<float> read_rgb_ppm(const std::string& path, int64_t* width = nullptr, int64_t* height = nullptr);

/// Stacked network inputs/targets, every tensor [N,C,H,W].
struct Batch {
  Tensor<float> rgb, raw_depth, gt_depth;
  Tensor<float> train_mask;  // valid pixels
  Tensor<float> eval_mask;
};

Batch make_batch(const std::vector<DepthSample>& samples, const std::vector<size_t>& indices);

}  // namespace hdc
