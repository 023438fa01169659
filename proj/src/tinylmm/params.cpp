#include "steerlab/tinylmm/params.hpp"

#include <bit>
#include <cstring>
#include <cstdio>

#include "steerlab/rng.hpp"

namespace steerlab::tinylmm {

namespace {

constexpr double kInitStd = 0.02;

bool is_gain(const std::string& name) {
  return name.size() >= 5 && name.compare(name.size() - 5, 5, "_gain") == 0;
}

bool is_bias(const std::string& name) {
  return (name.size() >= 5 && name.compare(name.size() - 5, 5, "_bias") == 0) ||
         name.ends_with(".b_up") || name.ends_with(".b_down");
}

}  // namespace

ModelParams init_params(const ModelConfig& config) {
  config.validate();
  ModelParams p = ModelParams::zeros(config);
  CounterRng rng(config.seed, Stream::kInit);
  p.for_each_tensor([&](const std::string& name, auto& t) {
    if (is_gain(name)) {
      t.setOnes();
    } else if (!is_bias(name)) {
      for (Eigen::Index i = 0; i < t.size(); ++i) {
        t.data()[i] = static_cast<float>(kInitStd * rng.normal());
      }
    }
  });
  return p;
}

std::string checksum(const ModelParams& params) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  params.for_each_tensor([&](const std::string&, const auto& t) {
    for (Eigen::Index i = 0; i < t.size(); ++i) {
      std::uint32_t bits = std::bit_cast<std::uint32_t>(t.data()[i]);
      for (int b = 0; b < 4; ++b) {
        h ^= (bits >> (8 * b)) & 0xffu;
        h *= 0x100000001b3ull;
      }
    }
  });
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace steerlab::tinylmm
