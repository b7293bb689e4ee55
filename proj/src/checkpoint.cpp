#include "hdc/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>

namespace hdc {
namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

class Writer {
 public:
  template <typename V>
  void put(V v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    buf_.append(p, sizeof v);
  }
  void bytes(const void* p, size_t n) { buf_.append(static_cast<const char*>(p), n); }
  size_t mark() const { return buf_.size(); }
  uint32_t crc_since(size_t from) const {
    return static_cast<uint32_t>(crc32(crc32(0L, Z_NULL, 0), reinterpret_cast<const Bytef*>(buf_.data() + from),
                                       static_cast<uInt>(buf_.size() - from)));
  }
  const std::string& str() const { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  Reader(const std::string& buf, const std::string& path) : buf_(buf), path_(path) {}
  template <typename V>
  V get(const char* what) {
    V v;
    need(sizeof v, what);
    std::memcpy(&v, buf_.data() + pos_, sizeof v);
    pos_ += sizeof v;
    return v;
  }
  std::string str(size_t n, const char* what) {
    need(n, what);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void read(void* dst, size_t n, const char* what) {
    need(n, what);
    std::memcpy(dst, buf_.data() + pos_, n);
    pos_ += n;
  }
  size_t mark() const { return pos_; }
  uint32_t crc_since(size_t from) const {
    return static_cast<uint32_t>(crc32(crc32(0L, Z_NULL, 0), reinterpret_cast<const Bytef*>(buf_.data() + from),
                                       static_cast<uInt>(pos_ - from)));
  }
  bool done() const { return pos_ == buf_.size(); }

 private:
  void need(size_t n, const char* what) {
    if (buf_.size() - pos_ < n)
      throw CheckpointError(path_ + ": truncated checkpoint while reading " + what);
  }
  const std::string& buf_;
  const std::string& path_;
  size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const std::string& path, const ParamStore<float>& params, const std::string& config_text) {
  Writer w;
  w.bytes("HDCK", 4);
  w.put<uint32_t>(kCheckpointVersion);
  w.put<uint64_t>(config_text.size());
  const size_t cfg_at = w.mark();
  w.bytes(config_text.data(), config_text.size());
  w.put<uint32_t>(w.crc_since(cfg_at));
  w.put<uint32_t>(static_cast<uint32_t>(params.size()));
  for (const auto& [name, t] : params) {
    const size_t at = w.mark();
    w.put<uint32_t>(static_cast<uint32_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.put<uint32_t>(static_cast<uint32_t>(t.rank()));
    for (int64_t d : t.shape()) w.put<int64_t>(d);
    w.bytes(t.ptr(), static_cast<size_t>(t.numel()) * sizeof(float));
    w.put<uint32_t>(w.crc_since(at));
  }
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw CheckpointError("cannot write checkpoint " + tmp);
    f.write(w.str().data(), static_cast<std::streamsize>(w.str().size()));
    if (!f) throw CheckpointError("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open checkpoint " + path);
  const std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  Reader r(buf, path);
  if (r.str(4, "magic") != "HDCK") throw CheckpointError(path + ": unknown magic, not an HDCK checkpoint");
  const auto version = r.get<uint32_t>("version");
  if (version != kCheckpointVersion)
    throw CheckpointError(path + ": checkpoint format version " + std::to_string(version) +
                          " is not supported (expected " + std::to_string(kCheckpointVersion) + ")");
  Checkpoint ck;
  const auto cfg_len = r.get<uint64_t>("config length");
  const size_t cfg_at = r.mark();
  ck.config_text = r.str(static_cast<size_t>(cfg_len), "config");
  const uint32_t cfg_crc = r.crc_since(cfg_at);
  if (r.get<uint32_t>("config checksum") != cfg_crc) throw CheckpointError(path + ": checksum mismatch in config block");
  const auto count = r.get<uint32_t>("tensor count");
  for (uint32_t i = 0; i < count; ++i) {
    const size_t at = r.mark();
    const auto name_len = r.get<uint32_t>("tensor name length");
    const std::string name = r.str(name_len, "tensor name");
    const auto rank = r.get<uint32_t>("tensor rank");
    if (rank > 8) throw CheckpointError(path + ": tensor '" + name + "' has implausible rank " + std::to_string(rank));
    Shape shape(rank);
    for (auto& d : shape) {
      d = r.get<int64_t>("tensor dims");
      if (d < 0 || d > (int64_t{1} << 32))
        throw CheckpointError(path + ": tensor '" + name + "' has invalid dimension " + std::to_string(d));
    }
    Tensor<float> t(shape);
    r.read(t.ptr(), static_cast<size_t>(t.numel()) * sizeof(float), "tensor data");
    const uint32_t crc = r.crc_since(at);
    if (r.get<uint32_t>("tensor checksum") != crc)
      throw CheckpointError(path + ": checksum mismatch in tensor '" + name + "'");
    if (ck.params.contains(name)) throw CheckpointError(path + ": duplicate tensor '" + name + "'");
    ck.params.add(name, t);
  }
  if (!r.done()) throw CheckpointError(path + ": trailing bytes after last tensor");
  return ck;
}

}  // namespace hdc
