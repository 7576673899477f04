#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>

namespace zap {

/// Tagged multiply-accumulate tally. Counts only ever grow; give each
/// concurrent worker its own counter and merge() afterwards.
class MacCounter {
 public:
  void add(std::string_view tag, std::uint64_t macs) {
    auto it = counts_.find(tag);
    if (it == counts_.end()) it = counts_.emplace(std::string(tag), 0).first;
    it->second += macs;
  }

  std::uint64_t get(std::string_view tag) const {
    auto it = counts_.find(tag);
    return it == counts_.end() ? 0 : it->second;
  }

  /// Sum over every tag beginning with `prefix`.
  std::uint64_t sum_prefix(std::string_view prefix) const {
    std::uint64_t s = 0;
    for (const auto& [tag, n] : counts_) {
      if (std::string_view(tag).starts_with(prefix)) s += n;
    }
    return s;
  }

  std::uint64_t total() const { return sum_prefix(""); }

  void merge(const MacCounter& other) {
    for (const auto& [tag, n] : other.counts_) add(tag, n);
  }

  const std::map<std::string, std::uint64_t, std::less<>>& tags() const noexcept { return counts_; }

 private:
  std::map<std::string, std::uint64_t, std::less<>> counts_;
};

}  // namespace zap
