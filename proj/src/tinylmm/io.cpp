#include "steerlab/tinylmm/io.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <vector>

#include <nlohmann/json.hpp>

#include "steerlab/error.hpp"

namespace steerlab::tinylmm {

namespace {

static_assert(std::endian::native == std::endian::little,
              "payload I/O assumes a little-endian host");

using json = nlohmann::json;

void write_file(const std::filesystem::path& path, const json& header,
                const std::vector<float>& payload) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ArgumentError("cannot open " + path.string() + " for writing");
  const std::string h = header.dump();
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  out.put('\n');
  out.write(reinterpret_cast<const char*>(payload.data()),
            static_cast<std::streamsize>(payload.size() * sizeof(float)));
  if (!out) throw ArgumentError("write failed for " + path.string());
}

struct RawFile {
  json header;
  std::vector<float> payload;
};

RawFile read_file(const std::filesystem::path& path, const std::string& expected_format) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArgumentError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path.string() + ": missing header");
  RawFile f;
  try {
    f.header = json::parse(line);
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": malformed header: " + e.what());
  }
  if (f.header.value("format", "") != expected_format) {
    throw FormatError(path.string() + ": expected format " + expected_format);
  }
  const int version = f.header.value("version", -1);
  if (version != kModelFormatVersion) {
    throw VersionError(path.string() + ": unsupported format version " + std::to_string(version));
  }
  if (f.header.value("endianness", "") != "little") {
    throw FormatError(path.string() + ": unsupported endianness tag");
  }
  const std::uint64_t bytes = f.header.value("payload_bytes", std::uint64_t{0});
  if (bytes % sizeof(float) != 0) throw FormatError(path.string() + ": bad payload size");
  std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (raw.size() < bytes) {
    throw FormatError(path.string() + ": truncated payload (" + std::to_string(raw.size()) +
                      " of " + std::to_string(bytes) + " bytes)");
  }
  if (raw.size() > bytes) throw FormatError(path.string() + ": trailing bytes after payload");
  if (fnv1a64_hex(raw.data(), raw.size()) != f.header.value("checksum", "")) {
    throw ChecksumError(path.string() + ": payload checksum mismatch");
  }
  f.payload.resize(bytes / sizeof(float));
  std::memcpy(f.payload.data(), raw.data(), bytes);
  return f;
}

}  // namespace

std::string fnv1a64_hex(const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string file_checksum(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArgumentError("cannot open " + path.string());
  std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return fnv1a64_hex(raw.data(), raw.size());
}

void save_params(const ModelParams& params, const std::filesystem::path& path) {
  std::vector<float> payload;
  payload.reserve(params.parameter_count());
  json tensors = json::array();
  params.for_each_tensor([&](const std::string& name, const auto& t) {
    tensors.push_back({{"name", name}, {"shape", {t.rows(), t.cols()}}});
    payload.insert(payload.end(), t.data(), t.data() + t.size());
  });
  json header = {{"format", "steerlab-model"},
                 {"version", kModelFormatVersion},
                 {"endianness", "little"},
                 {"config", to_json(params.config)},
                 {"tensors", tensors},
                 {"payload_bytes", payload.size() * sizeof(float)},
                 {"checksum", fnv1a64_hex(payload.data(), payload.size() * sizeof(float))}};
  write_file(path, header, payload);
}

ModelParams load_params(const std::filesystem::path& path) {
  RawFile f = read_file(path, "steerlab-model");
  const ModelConfig config = config_from_json(f.header.at("config"));
  config.validate();
  ModelParams p = ModelParams::zeros(config);
  if (p.parameter_count() != f.payload.size()) {
    throw FormatError(path.string() + ": payload size does not match config");
  }
  std::size_t offset = 0;
  p.for_each_tensor([&](const std::string&, auto& t) {
    std::memcpy(t.data(), f.payload.data() + offset, static_cast<std::size_t>(t.size()) * sizeof(float));
    offset += static_cast<std::size_t>(t.size());
  });
  if (!p.all_finite()) throw NumericError(path.string() + ": non-finite parameters");
  return p;
}

void save_images(const ImageTable& images, const std::filesystem::path& path) {
  if (images.empty()) throw ArgumentError("no images to save");
  const auto k = images.begin()->second.rows();
  const auto d = images.begin()->second.cols();
  std::vector<float> payload;
  json ids = json::array();
  for (const auto& [id, m] : images) {
    if (m.rows() != k || m.cols() != d) throw ArgumentError("image " + id + " has inconsistent shape");
    ids.push_back(id);
    payload.insert(payload.end(), m.data(), m.data() + m.size());
  }
  json header = {{"format", "steerlab-images"},
                 {"version", kModelFormatVersion},
                 {"endianness", "little"},
                 {"k", k},
                 {"d", d},
                 {"ids", ids},
                 {"payload_bytes", payload.size() * sizeof(float)},
                 {"checksum", fnv1a64_hex(payload.data(), payload.size() * sizeof(float))}};
  write_file(path, header, payload);
}

ImageTable load_images(const std::filesystem::path& path) {
  RawFile f = read_file(path, "steerlab-images");
  const auto k = f.header.at("k").get<Eigen::Index>();
  const auto d = f.header.at("d").get<Eigen::Index>();
  const auto ids = f.header.at("ids").get<std::vector<std::string>>();
  if (ids.size() * static_cast<std::size_t>(k * d) != f.payload.size()) {
    throw FormatError(path.string() + ": payload size does not match ids x k x d");
  }
  ImageTable out;
  std::size_t offset = 0;
  for (const auto& id : ids) {
    ImageTokens<float> m(k, d);
    std::memcpy(m.data(), f.payload.data() + offset, static_cast<std::size_t>(k * d) * sizeof(float));
    offset += static_cast<std::size_t>(k * d);
    out.emplace(id, std::move(m));
  }
  return out;
}

}  // namespace steerlab::tinylmm
