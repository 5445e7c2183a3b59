#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace ccl::io {

// Hash/config mismatches between stored artifacts and their manifests.
struct IntegrityError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

bool file_exists(const std::string& path);
std::vector<uint8_t> read_file(const std::string& path);
std::string read_text(const std::string& path);

// Writes to <path>.tmp then renames, so readers never observe a partial file.
void atomic_write(const std::string& path, const void* data, size_t size);
void atomic_write(const std::string& path, const std::string& text);
void atomic_write(const std::string& path, const std::vector<uint8_t>& bytes);

// Float64 tensor blob: u32 magic 'CCLT' | u32 ndim | u32 dims[] | f64 data[]
// (little-endian throughout).
std::vector<uint8_t> encode_tensor_blob(const std::vector<int>& shape,
                                        const std::vector<double>& data);
void decode_tensor_blob(const std::vector<uint8_t>& blob, std::vector<int>& shape,
                        std::vector<double>& data);

// Byte mask blob: u32 magic 'CCLM' | u32 h | u32 w | u8 data[]
std::vector<uint8_t> encode_mask_blob(int h, int w, const std::vector<uint8_t>& data);
void decode_mask_blob(const std::vector<uint8_t>& blob, int& h, int& w,
                      std::vector<uint8_t>& data);

}  // namespace ccl::io
