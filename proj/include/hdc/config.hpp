#pragma once
// Ordered key=value text configuration. Lines are `key = value`; '#' starts a
// comment. Unknown keys are kept so round trips preserve them verbatim.

#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace hdc {

class KeyValues {
 public:
  static KeyValues parse(const std::string& text);
  static KeyValues load(const std::string& path);
  std::string str() const;

  bool contains(const std::string& key) const { return find(key) != nullptr; }
  std::optional<std::string> get(const std::string& key) const;
  /// Replaces an existing key in place or appends a new one.
  void set(const std::string& key, const std::string& value);
  /// Applies every entry of `other` on top of this one.
  void merge(const KeyValues& other);

  std::string get_string(const std::string& key, const std::string& fallback) const;
  int64_t get_int(const std::string& key, int64_t fallback) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;

  const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }
  bool operator==(const KeyValues& other) const { return entries_ == other.entries_; }

 private:
  const std::string* find(const std::string& key) const;
  std::vector<std::pair<std::string, std::string>> entries_;
};

}  // namespace hdc
