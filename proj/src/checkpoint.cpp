#include <bit>
#include <cstring>
#include <fstream>

#include "cellgraph/autodiff.hpp"
#include "cellgraph/error.hpp"

namespace cellgraph {

namespace {

constexpr char kMagic[8] = {'C', 'G', 'C', 'K', 'P', 'T', '\0', '\0'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, &v, sizeof(T));
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(bytes[i], bytes[sizeof(T) - 1 - i]);
    std::memcpy(&v, bytes, sizeof(T));
  }
  return v;
}

class Writer {
 public:
  explicit Writer(const std::string& path) : out_(path, std::ios::binary | std::ios::trunc) {
    if (!out_) fail(ErrorKind::Io, "cannot open checkpoint for writing: " + path);
  }
  template <typename T>
  void put(T v) {
    v = to_little(v);
    out_.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  void put_bytes(const void* p, std::size_t n) { out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }
  void put_matrix_values(const DenseMatrix& m) {
    for (double v : m.values()) put(std::bit_cast<std::uint64_t>(v));
  }
  void finish(const std::string& path) {
    out_.flush();
    if (!out_) fail(ErrorKind::Io, "failed writing checkpoint: " + path);
  }

 private:
  std::ofstream out_;
};

class Reader {
 public:
  explicit Reader(const std::string& path) : in_(path, std::ios::binary), path_(path) {
    if (!in_) fail(ErrorKind::Io, "cannot open checkpoint: " + path);
  }
  template <typename T>
  T get() {
    T v{};
    in_.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in_) fail(ErrorKind::Io, "truncated checkpoint: " + path_);
    return to_little(v);
  }
  void get_bytes(void* p, std::size_t n) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (!in_) fail(ErrorKind::Io, "truncated checkpoint: " + path_);
  }
  void get_matrix_values(DenseMatrix& m) {
    for (double& v : m.values()) v = std::bit_cast<double>(get<std::uint64_t>());
  }
  bool at_end() { return in_.peek() == std::char_traits<char>::eof(); }

 private:
  std::ifstream in_;
  std::string path_;
};

}  // namespace

void save_checkpoint(const std::string& path, const ParamStore& store) {
  Writer w(path);
  w.put_bytes(kMagic, sizeof(kMagic));
  w.put<std::uint32_t>(kVersion);
  w.put<std::uint64_t>(store.step);
  w.put<std::uint64_t>(store.size());
  for (const auto& name : store.names()) {
    const auto& e = store.at(name);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
    w.put_bytes(name.data(), name.size());
    w.put<std::uint64_t>(e.value.rows());
    w.put<std::uint64_t>(e.value.cols());
    w.put_matrix_values(e.value);
    w.put_matrix_values(e.adam_m);
    w.put_matrix_values(e.adam_v);
  }
  w.finish(path);
}

ParamStore load_checkpoint(const std::string& path) {
  Reader r(path);
  char magic[sizeof(kMagic)];
  r.get_bytes(magic, sizeof(magic));
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) fail(ErrorKind::Io, "not a checkpoint file: " + path);
  const auto version = r.get<std::uint32_t>();
  if (version != kVersion)
    fail(ErrorKind::Io, "unsupported checkpoint version " + std::to_string(version) + " in " + path);
  ParamStore store;
  store.step = r.get<std::uint64_t>();
  const auto count = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto len = r.get<std::uint32_t>();
    std::string name(len, '\0');
    r.get_bytes(name.data(), len);
    const auto rows = r.get<std::uint64_t>();
    const auto cols = r.get<std::uint64_t>();
    DenseMatrix value(rows, cols);
    r.get_matrix_values(value);
    auto& e = store.add(name, std::move(value));
    r.get_matrix_values(e.adam_m);
    r.get_matrix_values(e.adam_v);
  }
  if (!r.at_end()) fail(ErrorKind::Io, "trailing bytes in checkpoint: " + path);
  return store;
}

}  // namespace cellgraph
