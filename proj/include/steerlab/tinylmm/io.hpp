#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "steerlab/tinylmm/model.hpp"

namespace steerlab::tinylmm {

// Model file: one JSON header line
//   {"format":"steerlab-model","version":1,"endianness":"little",
//    "config":{...},"tensors":[{"name":..,"shape":[r,c]},...],
//    "payload_bytes":N,"checksum":"<fnv1a64 hex>"}
// followed by '\n' and N bytes of little-endian float32 data, tensors in
// canonical order, each row-major.
inline constexpr int kModelFormatVersion = 1;

void save_params(const ModelParams& params, const std::filesystem::path& path);
ModelParams load_params(const std::filesystem::path& path);

// Image-vector file: same layout, header format "steerlab-images" with
// "k", "d" and the ordered "ids"; payload is ids.size() blocks of K x d floats.
using ImageTable = std::map<std::string, ImageTokens<float>>;

void save_images(const ImageTable& images, const std::filesystem::path& path);
ImageTable load_images(const std::filesystem::path& path);

std::string fnv1a64_hex(const void* data, std::size_t n);
std::string file_checksum(const std::filesystem::path& path);

}  // namespace steerlab::tinylmm
