#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "semfl/nn/tensor.hpp"

namespace semfl::data {

enum class DatasetKind { kCifar10, kCifar100, kTinyImageNet, kSynthetic };

std::string to_string(DatasetKind kind);
DatasetKind dataset_kind_from_string(const std::string& name);
int num_classes_of(DatasetKind kind);

/// 8-bit images stored sample-major, channel-major inside a sample (CHW).
struct Dataset {
  std::string name;
  int channels = 3;
  int height = 32;
  int width = 32;
  std::vector<std::uint8_t> pixels;
  std::vector<int> labels;
  std::vector<std::string> class_names;

  std::size_t size() const { return labels.size(); }
  int num_classes() const { return static_cast<int>(class_names.size()); }
  std::size_t sample_bytes() const {
    return static_cast<std::size_t>(channels) * static_cast<std::size_t>(height) * static_cast<std::size_t>(width);
  }
  const std::uint8_t* sample(std::size_t i) const { return pixels.data() + i * sample_bytes(); }

  /// Checks pixel buffer length, label range and class-name uniqueness.
  void validate() const;
};

/// Model input: (v / 255 - 0.5) / 0.25 per pixel, NCHW.
nn::Tensor to_tensor(const Dataset& ds, std::span<const std::int64_t> indices);

/// Pixels scaled to [0, 1], NCHW. Used by feature providers.
nn::Tensor to_unit_tensor(const Dataset& ds, std::span<const std::int64_t> indices);

/// Seeded class-stratified subset of n samples (n / C per class, remainder to
/// the lowest classes). Sample order in the result is ascending source index.
Dataset stratified_subset(const Dataset& ds, std::size_t n, std::uint64_t seed);

/// Rows of `ds` selected by index, in the given order.
Dataset select(const Dataset& ds, std::span<const std::int64_t> indices);

struct SyntheticImageSpec {
  std::size_t num_samples = 1000;
  int num_classes = 10;
  int size = 32;
  double noise = 0.12;  // pixel noise standard deviation on the [0,1] scale
  double jitter = 1.0;  // scales per-sample deviation from the class look
  std::uint64_t seed = 0;
};

/// Class-conditional procedural images: each class owns an oriented grating
/// frequency, an orientation and a colour; samples jitter phase, orientation,
/// contrast and position of a blob, plus pixel noise. Labels are balanced and
/// shuffled. The class look is fixed by `class_seed` so train and test sets
/// drawn with different sample seeds share classes.
Dataset make_synthetic_images(const SyntheticImageSpec& spec, std::uint64_t class_seed);

}  // namespace semfl::data
