#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "incseg/core_data.hpp"
#include "incseg/tiling.hpp"

namespace testing {

/// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::mt19937_64 rng(std::random_device{}());
    path_ = std::filesystem::temp_directory_path() / ("incseg_" + tag + "_" + std::to_string(rng()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  [[nodiscard]] const std::filesystem::path& path() const { return path_; }
  [[nodiscard]] std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

inline incseg::RasterImage random_image(std::size_t h, std::size_t w, std::size_t c, std::mt19937_64& rng) {
  incseg::RasterImage img(h, w, c);
  std::uniform_int_distribution<int> d(0, 255);
  for (auto& p : img.pixels) p = static_cast<float>(d(rng));
  return img;
}

inline incseg::MaskStack random_masks(std::size_t k, std::size_t h, std::size_t w, double p, std::mt19937_64& rng) {
  incseg::MaskStack m(k, h, w);
  std::bernoulli_distribution d(p);
  for (auto& v : m.values) v = d(rng) ? 1.0f : 0.0f;
  return m;
}

/// Patch with random content, tagged with the given origin.
inline incseg::Patch random_patch(std::size_t size, std::size_t planes, std::mt19937_64& rng,
                                  const std::string& country = "c0", const std::string& city = "k0") {
  incseg::Patch p;
  p.image = random_image(size, size, 3, rng);
  p.masks = random_masks(planes, size, size, 0.3, rng);
  p.window = {0, 0, size, size};
  p.stage_id = 1;
  p.country = country;
  p.city = city;
  return p;
}

}  // namespace testing
