#include "zap/io.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace zap {
namespace {

class Writer {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}

  void need(std::size_t n, const char* what) const {
    if (b_.size() - pos_ < n) {
      throw FormatError(std::string("truncated input while reading ") + what + ": need " + std::to_string(n) +
                            " bytes, " + std::to_string(b_.size() - pos_) + " left",
                        pos_);
    }
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32(const char* what) { return std::bit_cast<float>(u32(what)); }
  std::span<const std::uint8_t> bytes(std::size_t n, const char* what) {
    need(n, what);
    auto s = b_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  void magic(const char (&m)[5]) {
    need(4, "magic");
    if (std::memcmp(b_.data() + pos_, m, 4) != 0) {
      throw FormatError(std::string("bad magic, expected '") + m + "'", pos_);
    }
    pos_ += 4;
  }
  std::size_t pos() const noexcept { return pos_; }
  bool done() const noexcept { return pos_ == b_.size(); }

 private:
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path + "' for reading");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed writing '" + path + "'");
}

void WeightContainer::add(std::string name, Tensor tensor) {
  if (find(name)) throw std::invalid_argument("duplicate weight entry '" + name + "'");
  entries_.push_back({std::move(name), std::move(tensor)});
}

void WeightContainer::set(std::string name, Tensor tensor) {
  for (auto& e : entries_) {
    if (e.name == name) {
      e.tensor = std::move(tensor);
      return;
    }
  }
  entries_.push_back({std::move(name), std::move(tensor)});
}

const Tensor* WeightContainer::find(std::string_view name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return &e.tensor;
  }
  return nullptr;
}

std::vector<std::uint8_t> WeightContainer::serialize() const {
  Writer w;
  w.bytes("ZAPW", 4);
  w.u32(kWeightFormatVersion);
  w.u32(static_cast<std::uint32_t>(entries_.size()));
  for (const auto& e : entries_) {
    w.u32(static_cast<std::uint32_t>(e.name.size()));
    w.bytes(e.name.data(), e.name.size());
    w.u32(0);
    w.u32(static_cast<std::uint32_t>(e.tensor.rank()));
    for (auto d : e.tensor.shape()) w.u32(static_cast<std::uint32_t>(d));
    for (float v : e.tensor.data()) w.f32(v);
  }
  return w.take();
}

WeightContainer WeightContainer::deserialize(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  r.magic("ZAPW");
  const std::size_t version_at = r.pos();
  const auto version = r.u32("version");
  if (version != kWeightFormatVersion) {
    throw FormatError("unsupported weight format version " + std::to_string(version), version_at);
  }
  const auto count = r.u32("entry count");
  WeightContainer c;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t entry_at = r.pos();
    const auto len = r.u32("name length");
    auto name_bytes = r.bytes(len, "entry name");
    std::string name(name_bytes.begin(), name_bytes.end());
    const std::size_t dtype_at = r.pos();
    if (const auto dtype = r.u32("dtype"); dtype != 0) {
      throw FormatError("entry '" + name + "' has unsupported dtype " + std::to_string(dtype), dtype_at);
    }
    const std::size_t rank_at = r.pos();
    const auto rank = r.u32("rank");
    if (rank < 1 || rank > 4) throw FormatError("entry '" + name + "' has invalid rank " + std::to_string(rank), rank_at);
    Shape shape(rank);
    std::size_t total = 1;
    for (auto& d : shape) {
      const std::size_t ext_at = r.pos();
      d = r.u32("extent");
      if (d == 0) throw FormatError("entry '" + name + "' has a zero extent", ext_at);
      total *= d;
    }
    r.need(total * 4, "tensor payload");
    std::vector<float> data(total);
    for (auto& v : data) v = r.f32("tensor payload");
    if (c.find(name)) throw FormatError("duplicate entry name '" + name + "'", entry_at);
    c.entries_.push_back({std::move(name), Tensor(std::move(shape), std::move(data))});
  }
  if (!r.done()) throw FormatError("trailing bytes after last entry", r.pos());
  return c;
}

void WeightContainer::save(const std::string& path) const { write_file(path, serialize()); }

WeightContainer WeightContainer::load(const std::string& path) { return deserialize(read_file(path)); }

void TinyImageSet::validate() const {
  if (labels.empty()) throw std::invalid_argument("image set is empty");
  if (channels == 0 || height == 0 || width == 0) throw std::invalid_argument("image extents must be positive");
  if (images.size() != labels.size() * sample_size()) {
    throw std::invalid_argument("image set holds " + std::to_string(images.size()) + " pixels for " +
                                std::to_string(labels.size()) + " samples of " + std::to_string(sample_size()));
  }
  for (auto l : labels) {
    if (l >= classes) throw std::invalid_argument("label " + std::to_string(l) + " >= class count " + std::to_string(classes));
  }
}

Tensor TinyImageSet::batch(std::size_t first, std::size_t count) const {
  if (count == 0 || first + count > size()) throw std::out_of_range("image batch out of range");
  Tensor t({count, channels, height, width});
  const std::uint8_t* src = images.data() + first * sample_size();
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(src[i]) / 127.5f - 1.0f;
  return t;
}

Tensor TinyImageSet::gather(std::span<const std::size_t> indices) const {
  if (indices.empty()) throw std::out_of_range("empty image gather");
  Tensor t({indices.size(), channels, height, width});
  const std::size_t s = sample_size();
  for (std::size_t k = 0; k < indices.size(); ++k) {
    if (indices[k] >= size()) throw std::out_of_range("image index out of range");
    const std::uint8_t* src = images.data() + indices[k] * s;
    for (std::size_t i = 0; i < s; ++i) t[k * s + i] = static_cast<float>(src[i]) / 127.5f - 1.0f;
  }
  return t;
}

TinyImageSet TinyImageSet::slice(std::size_t first, std::size_t count) const {
  if (count == 0 || first + count > size()) throw std::out_of_range("image slice out of range");
  TinyImageSet s{channels, height, width, classes, {}, {}};
  s.images.assign(images.begin() + static_cast<std::ptrdiff_t>(first * sample_size()),
                  images.begin() + static_cast<std::ptrdiff_t>((first + count) * sample_size()));
  s.labels.assign(labels.begin() + static_cast<std::ptrdiff_t>(first),
                  labels.begin() + static_cast<std::ptrdiff_t>(first + count));
  return s;
}

std::vector<std::uint8_t> TinyImageSet::serialize() const {
  validate();
  Writer w;
  w.bytes("ZTIS", 4);
  w.u32(kImageSetFormatVersion);
  for (auto v : {size(), channels, height, width, classes}) w.u32(static_cast<std::uint32_t>(v));
  w.bytes(images.data(), images.size());
  w.bytes(labels.data(), labels.size());
  return w.take();
}

TinyImageSet TinyImageSet::deserialize(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  r.magic("ZTIS");
  const std::size_t version_at = r.pos();
  if (const auto v = r.u32("version"); v != kImageSetFormatVersion) {
    throw FormatError("unsupported image set version " + std::to_string(v), version_at);
  }
  const std::size_t header_at = r.pos();
  TinyImageSet s;
  const std::size_t n = r.u32("sample count");
  s.channels = r.u32("channels");
  s.height = r.u32("height");
  s.width = r.u32("width");
  s.classes = r.u32("classes");
  if (n == 0 || s.channels == 0 || s.height == 0 || s.width == 0 || s.classes == 0) {
    throw FormatError("image set header has a zero extent", header_at);
  }
  auto img = r.bytes(n * s.sample_size(), "pixels");
  s.images.assign(img.begin(), img.end());
  const std::size_t labels_at = r.pos();
  auto lab = r.bytes(n, "labels");
  s.labels.assign(lab.begin(), lab.end());
  if (!r.done()) throw FormatError("trailing bytes after labels", r.pos());
  for (std::size_t i = 0; i < n; ++i) {
    if (s.labels[i] >= s.classes) throw FormatError("label out of range", labels_at + i);
  }
  return s;
}

void TinyImageSet::save(const std::string& path) const { write_file(path, serialize()); }

TinyImageSet TinyImageSet::load(const std::string& path) { return deserialize(read_file(path)); }

}  // namespace zap
