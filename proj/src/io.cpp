#include "ccl/io.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>

namespace fs = std::filesystem;

namespace ccl::io {

// On-disk numeric payloads are little-endian; that is the only byte order
// this code base targets.
static_assert(std::endian::native == std::endian::little,
              "blob format assumes a little-endian host");

bool file_exists(const std::string& path) { return fs::exists(path); }

std::vector<uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path + "' for reading");
  std::vector<uint8_t> out((std::istreambuf_iterator<char>(in)),
                           std::istreambuf_iterator<char>());
  return out;
}

std::string read_text(const std::string& path) {
  auto bytes = read_file(path);
  return std::string(bytes.begin(), bytes.end());
}

void atomic_write(const std::string& path, const void* data, size_t size) {
  std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open '" + tmp + "' for writing");
    out.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
    if (!out) throw std::runtime_error("short write to '" + tmp + "'");
  }
  fs::rename(tmp, path);
}

void atomic_write(const std::string& path, const std::string& text) {
  atomic_write(path, text.data(), text.size());
}

void atomic_write(const std::string& path, const std::vector<uint8_t>& bytes) {
  atomic_write(path, bytes.data(), bytes.size());
}

namespace {
constexpr uint32_t kTensorMagic = 0x544c4343;  // "CCLT"
constexpr uint32_t kMaskMagic = 0x4d4c4343;    // "CCLM"

template <typename T>
void append(std::vector<uint8_t>& buf, T v) {
  size_t off = buf.size();
  buf.resize(off + sizeof(T));
  std::memcpy(buf.data() + off, &v, sizeof(T));
}

template <typename T>
T consume(const std::vector<uint8_t>& buf, size_t& off) {
  if (off + sizeof(T) > buf.size()) throw std::runtime_error("blob truncated");
  T v;
  std::memcpy(&v, buf.data() + off, sizeof(T));
  off += sizeof(T);
  return v;
}
}  // namespace

std::vector<uint8_t> encode_tensor_blob(const std::vector<int>& shape,
                                        const std::vector<double>& data) {
  size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw std::runtime_error("blob shape must be positive");
    n *= static_cast<size_t>(d);
  }
  if (n != data.size())
    throw std::runtime_error("blob shape does not match payload size");
  std::vector<uint8_t> buf;
  buf.reserve(8 + shape.size() * 4 + data.size() * 8);
  append(buf, kTensorMagic);
  append(buf, static_cast<uint32_t>(shape.size()));
  for (int d : shape) append(buf, static_cast<uint32_t>(d));
  size_t off = buf.size();
  buf.resize(off + data.size() * sizeof(double));
  std::memcpy(buf.data() + off, data.data(), data.size() * sizeof(double));
  return buf;
}

void decode_tensor_blob(const std::vector<uint8_t>& blob, std::vector<int>& shape,
                        std::vector<double>& data) {
  size_t off = 0;
  if (consume<uint32_t>(blob, off) != kTensorMagic)
    throw std::runtime_error("not a tensor blob (bad magic)");
  uint32_t ndim = consume<uint32_t>(blob, off);
  if (ndim > 8) throw std::runtime_error("tensor blob rank too large");
  shape.clear();
  size_t n = 1;
  for (uint32_t i = 0; i < ndim; ++i) {
    uint32_t d = consume<uint32_t>(blob, off);
    shape.push_back(static_cast<int>(d));
    n *= d;
  }
  if (off + n * sizeof(double) != blob.size())
    throw std::runtime_error("tensor blob payload size mismatch");
  data.resize(n);
  std::memcpy(data.data(), blob.data() + off, n * sizeof(double));
}

std::vector<uint8_t> encode_mask_blob(int h, int w, const std::vector<uint8_t>& data) {
  if (h <= 0 || w <= 0 || data.size() != static_cast<size_t>(h) * w)
    throw std::runtime_error("mask blob shape does not match payload");
  std::vector<uint8_t> buf;
  append(buf, kMaskMagic);
  append(buf, static_cast<uint32_t>(h));
  append(buf, static_cast<uint32_t>(w));
  buf.insert(buf.end(), data.begin(), data.end());
  return buf;
}

void decode_mask_blob(const std::vector<uint8_t>& blob, int& h, int& w,
                      std::vector<uint8_t>& data) {
  size_t off = 0;
  if (consume<uint32_t>(blob, off) != kMaskMagic)
    throw std::runtime_error("not a mask blob (bad magic)");
  h = static_cast<int>(consume<uint32_t>(blob, off));
  w = static_cast<int>(consume<uint32_t>(blob, off));
  if (off + static_cast<size_t>(h) * w != blob.size())
    throw std::runtime_error("mask blob payload size mismatch");
  data.assign(blob.begin() + off, blob.end());
}

}  // namespace ccl::io
