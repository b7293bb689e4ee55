#include <doctest.h>

#include <unistd.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>

#include "hdc/checkpoint.hpp"
#include "hdc/config.hpp"
#include "hdc/data.hpp"
#include "hdc/image_io.hpp"

using namespace hdc;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    static int counter = 0;
    path = fs::temp_directory_path() / ("hdc_data_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& name) const { return (path / name).string(); }
};

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

void spit(const std::string& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary);
  f << bytes;
}

DepthSample tiny_sample(const std::string& id, int64_t w = 4, int64_t h = 4) {
  DepthSample s;
  s.id = id;
  s.width = w;
  s.height = h;
  const auto n = static_cast<size_t>(w * h);
  s.rgb.assign(3 * n, 0.25f);
  s.raw_depth.assign(n, 1.0f);
  s.gt_depth.assign(n, 1.0f);
  s.valid_mask.assign(n, 1);
  s.transparent_mask.assign(n, 0);
  s.raw_depth[0] = 0.0f;
  s.transparent_mask[0] = 1;
  return s;
}

}  // namespace

TEST_SUITE("pnm") {
  TEST_CASE("16-bit gray round trip with big-endian samples") {
    TempDir dir;
    Image img{3, 2, 1, 65535, {0, 1, 256, 1000, 65535, 42}};
    write_pnm(dir / "a.pgm", img);
    const std::string bytes = slurp(dir / "a.pgm");
    CHECK(bytes.rfind("P5 3 2 65535\n", 0) == 0);
    CHECK(static_cast<unsigned char>(bytes[13 + 4]) == 1);  // 256 high byte first
    const Image back = read_pnm(dir / "a.pgm");
    CHECK(back.width == 3);
    CHECK(back.maxval == 65535);
    CHECK(back.data == img.data);
  }

  TEST_CASE("comments and multi-line headers") {
    TempDir dir;
    spit(dir / "c.ppm", std::string("P6\n# made by hand\n2 1\n# range\n255\n") + std::string("\x01\x02\x03\x04\x05\x06", 6));
    const Image img = read_pnm(dir / "c.ppm");
    CHECK(img.channels == 3);
    CHECK(img.data == std::vector<uint16_t>{1, 2, 3, 4, 5, 6});
  }

  TEST_CASE("truncated payload and bad magic are reported") {
    TempDir dir;
    spit(dir / "t.pgm", "P5 4 4 255\n" + std::string(10, 'x'));
    CHECK_THROWS_WITH(read_pnm(dir / "t.pgm"), doctest::Contains("truncated"));
    spit(dir / "m.pgm", "P2 1 1 255\n1");
    CHECK_THROWS(read_pnm(dir / "m.pgm"));
    CHECK_THROWS(read_pnm(dir / "missing.pgm"));
  }

  TEST_CASE("depth scale arithmetic") {
    TempDir dir;
    write_pnm(dir / "d.pgm", Image{1, 1, 1, 65535, {1000}});
    CHECK(read_depth_pgm(dir / "d.pgm", 0.001)[0] == doctest::Approx(1.0f));
  }
}

TEST_SUITE("error map") {
  TEST_CASE("perfect prediction is black") {
    TempDir dir;
    const std::vector<float> d{1, 2, 3, 4};
    write_error_map(dir / "e.pgm", 2, 2, d, d, {1, 1, 1, 1});
    const Image img = read_pnm(dir / "e.pgm");
    for (auto v : img.data) CHECK(v == 0);
  }

  TEST_CASE("header and the largest error maps to 255") {
    TempDir dir;
    const std::vector<float> pred{1.0f, 1.1f, 1.5f, 9.0f}, gt{1.0f, 1.0f, 1.0f, 1.0f};
    write_error_map(dir / "e.pgm", 2, 2, pred, gt, {1, 1, 1, 0});
    CHECK(slurp(dir / "e.pgm").rfind("P5 2 2 255\n", 0) == 0);
    const Image img = read_pnm(dir / "e.pgm");
    CHECK(img.data[2] == 255);
    CHECK(img.data[3] == 0);  // off-mask
    CHECK(img.data[1] < img.data[2]);
  }
}

TEST_SUITE("manifest") {
  TEST_CASE("samples load in manifest order") {
    TempDir dir;
    std::vector<DepthSample> in{tiny_sample("c"), tiny_sample("a"), tiny_sample("b")};
    write_dataset(dir.path.string(), "train", in);
    const auto got = load_dataset(dir.path.string(), "train");
    REQUIRE(got.samples.size() == 3);
    CHECK(got.rejected.empty());
    CHECK(got.samples[0].id == "c");
    CHECK(got.samples[1].id == "a");
    CHECK(got.samples[2].id == "b");
  }

  TEST_CASE("round trip stays within half a quantization step") {
    TempDir dir;
    SceneSpec spec;
    spec.seed = 3;
    const auto s = gen_synthetic(spec);
    const double scale = 1e-4;
    write_dataset(dir.path.string(), "val", {s}, scale);
    const auto got = load_dataset(dir.path.string(), "val");
    REQUIRE(got.samples.size() == 1);
    const auto& r = got.samples[0];
    CHECK(r.width == s.width);
    CHECK(r.transparent_mask == s.transparent_mask);
    CHECK(r.valid_mask == s.valid_mask);
    for (size_t i = 0; i < s.gt_depth.size(); ++i) {
      CHECK(std::abs(r.gt_depth[i] - s.gt_depth[i]) <= scale / 2 + 1e-7);
      CHECK(std::abs(r.raw_depth[i] - s.raw_depth[i]) <= scale / 2 + 1e-7);
    }
    for (size_t i = 0; i < s.rgb.size(); ++i) CHECK(std::abs(r.rgb[i] - s.rgb[i]) <= 0.5 / 255 + 1e-6);
  }

  TEST_CASE("broken samples are rejected by id, the rest load") {
    TempDir dir;
    write_dataset(dir.path.string(), "train", {tiny_sample("good"), tiny_sample("bad"), tiny_sample("small")});
    fs::remove(dir / "train/bad_gt.pgm");
    write_pnm(dir / "train/small_raw.pgm", Image{2, 2, 1, 65535, {1, 2, 3, 4}});
    const auto got = load_dataset(dir.path.string(), "train");
    REQUIRE(got.samples.size() == 1);
    CHECK(got.samples[0].id == "good");
    REQUIRE(got.rejected.size() == 2);
    CHECK(got.rejected[0].find("bad") != std::string::npos);
    CHECK(got.rejected[1].find("small") != std::string::npos);
  }

  TEST_CASE("per-sample scale column overrides the global scale") {
    TempDir dir;
    write_dataset(dir.path.string(), "train", {tiny_sample("x")}, 1e-3);
    std::string m = slurp(dir / "train.manifest");
    m.insert(m.find("x_transp.pgm") + 12, " 2e-3");
    spit(dir / "train.manifest", m);
    const auto got = load_dataset(dir.path.string(), "train");
    REQUIRE(got.samples.size() == 1);
    CHECK(got.samples[0].gt_depth[5] == doctest::Approx(2.0f));
  }

  TEST_CASE("structural errors throw") {
    TempDir dir;
    spit(dir / "a.manifest", "depth_scale: 0.001\nonly three fields\n");
    CHECK_THROWS(load_dataset(dir.path.string(), "a"));
    spit(dir / "b.manifest", "depth_scale: 0.001\ndepth_scale: 0.002\n");
    CHECK_THROWS(load_dataset(dir.path.string(), "b"));
    spit(dir / "c.manifest", "x r a g v t\nx r a g v t\n");
    CHECK_THROWS(load_dataset(dir.path.string(), "c"));
    CHECK_THROWS(load_dataset(dir.path.string(), "missing"));
  }

  TEST_CASE("batches stack samples") {
    const auto b = make_batch({tiny_sample("a"), tiny_sample("b")}, {1, 0});
    CHECK(b.rgb.shape() == Shape{2, 3, 4, 4});
    CHECK(b.raw_depth.shape() == Shape{2, 1, 4, 4});
    CHECK(b.train_mask.ptr()[0] == 1.0f);
    CHECK_THROWS(make_batch({tiny_sample("a"), tiny_sample("b", 8, 4)}, {0, 1}));
  }
}

TEST_SUITE("synthetic scenes") {
  TEST_CASE("full hole ratio empties the transparent area") {
    for (uint64_t seed = 0; seed < 10; ++seed) {
      SceneSpec spec;
      spec.seed = seed;
      const auto s = gen_synthetic(spec);
      int64_t transparent = 0;
      for (int64_t i = 0; i < s.pixels(); ++i)
        if (s.transparent_mask[static_cast<size_t>(i)]) {
          ++transparent;
          CHECK(s.raw_depth[static_cast<size_t>(i)] == 0.0f);
        }
      CHECK(transparent > 0);
      s.check();
    }
  }

  TEST_CASE("same seed, same scene") {
    SceneSpec spec;
    spec.seed = 42;
    spec.hole_ratio = 0.6;
    const auto a = gen_synthetic(spec), b = gen_synthetic(spec);
    CHECK(a.rgb == b.rgb);
    CHECK(a.raw_depth == b.raw_depth);
    CHECK(a.gt_depth == b.gt_depth);
    CHECK(a.transparent_mask == b.transparent_mask);
    spec.seed = 43;
    CHECK(gen_synthetic(spec).gt_depth != a.gt_depth);
  }

  TEST_CASE("hole fraction tracks the configured ratio over 100 seeds") {
    for (double ratio : {0.3, 0.7}) {
      double holes = 0, area = 0;
      for (uint64_t seed = 0; seed < 100; ++seed) {
        SceneSpec spec;
        spec.seed = 1000 + seed;
        spec.hole_ratio = ratio;
        const auto s = gen_synthetic(spec);
        for (size_t i = 0; i < s.raw_depth.size(); ++i) {
          if (!s.transparent_mask[i]) continue;
          area += 1;
          holes += s.raw_depth[i] == 0.0f;
        }
      }
      CHECK(std::abs(holes / area - ratio) <= 0.02);
    }
  }

  TEST_CASE("depth plausibility and noise bound") {
    SceneSpec spec;
    spec.seed = 5;
    spec.hole_ratio = 0.0;
    spec.noise_sigma = 0.004;
    const auto s = gen_synthetic(spec);
    for (size_t i = 0; i < s.gt_depth.size(); ++i) {
      CHECK(s.gt_depth[i] > 0.5f);
      CHECK(s.gt_depth[i] < 1.5f);
      CHECK(std::abs(s.raw_depth[i] - s.gt_depth[i]) <= 3 * 0.004 + 1e-6);
    }
    for (float c : s.rgb) {
      CHECK(c >= 0.0f);
      CHECK(c <= 1.0f);
    }
  }

  TEST_CASE("invalid specifications are rejected") {
    SceneSpec spec;
    spec.width = 30;
    CHECK_THROWS(gen_synthetic(spec));
    spec = {};
    spec.hole_ratio = 1.5;
    CHECK_THROWS(gen_synthetic(spec));
    spec = {};
    spec.noise_sigma = -1;
    CHECK_THROWS(gen_synthetic(spec));
    CHECK_THROWS(parse_hole_mode("sometimes"));
  }

  TEST_CASE("set seeds differ per index") {
    SceneSpec spec;
    const auto set = gen_synthetic_set(spec, 3);
    REQUIRE(set.size() == 3);
    CHECK(set[0].id != set[1].id);
    CHECK(set[0].gt_depth != set[1].gt_depth);
  }
}

TEST_SUITE("checkpoint") {
  ParamStore<float> sample_store() {
    ParamStore<float> s;
    std::mt19937_64 rng(1);
    s.add("encoder.w", Tensor<float>::randn({3, 4}, rng));
    s.add("decoder.b", Tensor<float>::randn({5}, rng));
    s.add("scalar", Tensor<float>({1}, 0.125f));
    return s;
  }

  TEST_CASE("save and load are bit-exact and keep the config verbatim") {
    TempDir dir;
    const auto s = sample_store();
    const std::string cfg = "channels=8\n# keep me\nmystery_key=value with spaces\n";
    save_checkpoint(dir / "m.hdck", s, cfg);
    const Checkpoint ck = load_checkpoint(dir / "m.hdck");
    CHECK(ck.config_text == cfg);
    CHECK(ck.config().get_string("mystery_key", "") == "value with spaces");
    REQUIRE(ck.params.size() == s.size());
    for (const auto& [name, t] : s) {
      const auto& u = ck.params.at(name);
      CHECK(u.shape() == t.shape());
      CHECK(std::memcmp(u.ptr(), t.ptr(), sizeof(float) * static_cast<size_t>(t.numel())) == 0);
    }
    CHECK_FALSE(fs::exists(dir / "m.hdck.tmp"));
  }

  TEST_CASE("a flipped payload byte names the tensor") {
    TempDir dir;
    const auto s = sample_store();
    const std::string cfg = "channels=8\n";
    save_checkpoint(dir / "m.hdck", s, cfg);
    std::string bytes = slurp(dir / "m.hdck");
    const size_t header = 4 + 4 + 8 + cfg.size() + 4 + 4;
    const size_t first_data = header + 4 + std::string("encoder.w").size() + 4 + 2 * 8;
    bytes[first_data + 5] ^= 0x10;
    spit(dir / "bad.hdck", bytes);
    CHECK_THROWS_WITH_AS(load_checkpoint(dir / "bad.hdck"), doctest::Contains("checksum mismatch in tensor 'encoder.w'"),
                         CheckpointError);
  }

  TEST_CASE("every single-byte corruption is detected") {
    TempDir dir;
    save_checkpoint(dir / "m.hdck", sample_store(), "a=1\n");
    const std::string good = slurp(dir / "m.hdck");
    for (size_t i = 0; i < good.size(); ++i) {
      std::string bad = good;
      bad[i] = static_cast<char>(bad[i] ^ 0x01);
      spit(dir / "bad.hdck", bad);
      CHECK_THROWS_AS(load_checkpoint(dir / "bad.hdck"), CheckpointError);
    }
  }

  TEST_CASE("truncation, trailing bytes and wrong magic") {
    TempDir dir;
    save_checkpoint(dir / "m.hdck", sample_store(), "a=1\n");
    const std::string good = slurp(dir / "m.hdck");
    spit(dir / "t.hdck", good.substr(0, good.size() - 3));
    CHECK_THROWS_WITH(load_checkpoint(dir / "t.hdck"), doctest::Contains("truncated"));
    spit(dir / "x.hdck", good + "z");
    CHECK_THROWS_WITH(load_checkpoint(dir / "x.hdck"), doctest::Contains("trailing"));
    spit(dir / "g.hdck", "GGUF" + good.substr(4));
    CHECK_THROWS_WITH(load_checkpoint(dir / "g.hdck"), doctest::Contains("magic"));
  }
}

TEST_SUITE("key values") {
  TEST_CASE("parse, override and print") {
    auto kv = KeyValues::parse("# comment\nchannels = 8\nname=desk  # trailing\n\nuse_smfm=off\n");
    CHECK(kv.get_int("channels", 0) == 8);
    CHECK(kv.get_string("name", "") == "desk");
    CHECK_FALSE(kv.get_bool("use_smfm", true));
    CHECK(kv.get_double("missing", 2.5) == 2.5);
    KeyValues over;
    over.set("channels", "16");
    kv.merge(over);
    CHECK(kv.get_int("channels", 0) == 16);
    CHECK(KeyValues::parse(kv.str()) == kv);
  }

  TEST_CASE("malformed lines and values throw") {
    CHECK_THROWS_WITH(KeyValues::parse("a=1\nnot a pair\n"), doctest::Contains("2"));
    const auto kv = KeyValues::parse("n=abc\nb=maybe\n");
    CHECK_THROWS(kv.get_int("n", 0));
    CHECK_THROWS(kv.get_double("n", 0));
    CHECK_THROWS(kv.get_bool("b", false));
  }
}
