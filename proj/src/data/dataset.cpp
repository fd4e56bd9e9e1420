#include "semfl/data/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>

#include "semfl/common/error.hpp"
#include "semfl/common/rng.hpp"

namespace semfl::data {

std::string to_string(DatasetKind kind) {
  switch (kind) {
    case DatasetKind::kCifar10: return "cifar10";
    case DatasetKind::kCifar100: return "cifar100";
    case DatasetKind::kTinyImageNet: return "tinyimagenet";
    case DatasetKind::kSynthetic: return "synthetic";
  }
  return "?";
}

DatasetKind dataset_kind_from_string(const std::string& name) {
  if (name == "cifar10") return DatasetKind::kCifar10;
  if (name == "cifar100") return DatasetKind::kCifar100;
  if (name == "tinyimagenet") return DatasetKind::kTinyImageNet;
  if (name == "synthetic") return DatasetKind::kSynthetic;
  throw ConfigError("unknown dataset '" + name + "' (expected cifar10, cifar100, tinyimagenet, synthetic)");
}

int num_classes_of(DatasetKind kind) {
  switch (kind) {
    case DatasetKind::kCifar10: return 10;
    case DatasetKind::kCifar100: return 100;
    case DatasetKind::kTinyImageNet: return 200;
    case DatasetKind::kSynthetic: return 10;
  }
  return 0;
}

void Dataset::validate() const {
  if (pixels.size() != size() * sample_bytes()) {
    throw FormatError("dataset " + name + ": pixel buffer holds " + std::to_string(pixels.size()) +
                      " bytes, expected " + std::to_string(size() * sample_bytes()));
  }
  for (int y : labels) {
    if (y < 0 || y >= num_classes()) throw FormatError("dataset " + name + ": label out of range");
  }
  std::set<std::string> seen(class_names.begin(), class_names.end());
  if (seen.size() != class_names.size()) throw FormatError("dataset " + name + ": duplicate class names");
}

namespace {

template <typename F>
nn::Tensor convert(const Dataset& ds, std::span<const std::int64_t> indices, F&& f) {
  nn::Tensor t({static_cast<int>(indices.size()), ds.channels, ds.height, ds.width});
  const std::size_t row = ds.sample_bytes();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    auto idx = indices[i];
    if (idx < 0 || static_cast<std::size_t>(idx) >= ds.size()) {
      throw InvalidInputError("sample index " + std::to_string(idx) + " out of range");
    }
    const std::uint8_t* src = ds.sample(static_cast<std::size_t>(idx));
    double* dst = t.data.data() + i * row;
    for (std::size_t j = 0; j < row; ++j) dst[j] = f(src[j]);
  }
  return t;
}

}  // namespace

nn::Tensor to_tensor(const Dataset& ds, std::span<const std::int64_t> indices) {
  return convert(ds, indices, [](std::uint8_t v) { return (v / 255.0 - 0.5) / 0.25; });
}

nn::Tensor to_unit_tensor(const Dataset& ds, std::span<const std::int64_t> indices) {
  return convert(ds, indices, [](std::uint8_t v) { return v / 255.0; });
}

Dataset select(const Dataset& ds, std::span<const std::int64_t> indices) {
  Dataset out;
  out.name = ds.name;
  out.channels = ds.channels;
  out.height = ds.height;
  out.width = ds.width;
  out.class_names = ds.class_names;
  out.labels.reserve(indices.size());
  out.pixels.reserve(indices.size() * ds.sample_bytes());
  for (auto idx : indices) {
    if (idx < 0 || static_cast<std::size_t>(idx) >= ds.size()) {
      throw InvalidInputError("sample index " + std::to_string(idx) + " out of range");
    }
    auto i = static_cast<std::size_t>(idx);
    out.labels.push_back(ds.labels[i]);
    out.pixels.insert(out.pixels.end(), ds.sample(i), ds.sample(i) + ds.sample_bytes());
  }
  return out;
}

Dataset stratified_subset(const Dataset& ds, std::size_t n, std::uint64_t seed) {
  if (n >= ds.size()) return ds;
  const int C = ds.num_classes();
  std::vector<std::vector<std::int64_t>> by_class(static_cast<std::size_t>(C));
  for (std::size_t i = 0; i < ds.size(); ++i) by_class[static_cast<std::size_t>(ds.labels[i])].push_back(static_cast<std::int64_t>(i));

  Rng rng(derive_seed(seed, {hash_string("subset")}));
  std::vector<std::int64_t> chosen;
  std::size_t base = n / static_cast<std::size_t>(C), extra = n % static_cast<std::size_t>(C);
  std::size_t shortfall = 0;
  for (int c = 0; c < C; ++c) {
    auto& pool = by_class[static_cast<std::size_t>(c)];
    shuffle_in_place(pool, rng);
    std::size_t want = base + (static_cast<std::size_t>(c) < extra ? 1 : 0);
    std::size_t take = std::min(want, pool.size());
    shortfall += want - take;
    chosen.insert(chosen.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(take));
    pool.erase(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(take));
  }
  // Classes too small for their share: fill from the leftovers, lowest class first.
  for (int c = 0; c < C && shortfall > 0; ++c) {
    auto& pool = by_class[static_cast<std::size_t>(c)];
    std::size_t take = std::min(shortfall, pool.size());
    chosen.insert(chosen.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(take));
    shortfall -= take;
  }
  std::sort(chosen.begin(), chosen.end());
  return select(ds, chosen);
}

Dataset make_synthetic_images(const SyntheticImageSpec& spec, std::uint64_t class_seed) {
  if (spec.num_classes < 1) throw InvalidInputError("synthetic dataset needs at least one class");
  if (spec.size < 4) throw InvalidInputError("synthetic image size must be >= 4");
  if (!(spec.noise >= 0.0)) throw InvalidInputError("synthetic noise must be >= 0");
  if (!(spec.jitter >= 0.0)) throw InvalidInputError("synthetic jitter must be >= 0");
  const int C = spec.num_classes, S = spec.size;
  constexpr double kPi = std::numbers::pi;

  struct ClassLook {
    double theta, freq;
    double colour[3];
    double blob_colour[3];
  };
  std::vector<ClassLook> looks(static_cast<std::size_t>(C));
  {
    Rng rng(derive_seed(class_seed, {hash_string("synthetic-classes")}));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int c = 0; c < C; ++c) {
      auto& l = looks[static_cast<std::size_t>(c)];
      l.theta = kPi * (static_cast<double>(c) + 0.5 * u(rng)) / C;
      l.freq = 1.5 + 3.0 * u(rng);
      for (double& v : l.colour) v = u(rng) * 2.0 - 1.0;
      for (double& v : l.blob_colour) v = u(rng) * 2.0 - 1.0;
    }
  }

  Dataset ds;
  ds.name = "synthetic";
  ds.channels = 3;
  ds.height = S;
  ds.width = S;
  for (int c = 0; c < C; ++c) ds.class_names.push_back("class" + std::to_string(c));
  ds.labels.resize(spec.num_samples);
  for (std::size_t i = 0; i < spec.num_samples; ++i) ds.labels[i] = static_cast<int>(i % static_cast<std::size_t>(C));
  Rng order_rng(derive_seed(spec.seed, {hash_string("synthetic-order")}));
  shuffle_in_place(ds.labels, order_rng);

  ds.pixels.resize(spec.num_samples * ds.sample_bytes());
  for (std::size_t i = 0; i < spec.num_samples; ++i) {
    const auto& l = looks[static_cast<std::size_t>(ds.labels[i])];
    Rng rng(derive_seed(spec.seed, {hash_string("synthetic-sample"), i}));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::normal_distribution<double> g(0.0, 1.0);
    const double j = spec.jitter;
    const double theta = l.theta + 0.25 * j * g(rng);
    const double freq = l.freq * (1.0 + 0.15 * j * g(rng));
    double colour[3], blob_colour[3];
    for (int ch = 0; ch < 3; ++ch) {
      colour[ch] = l.colour[ch] + 0.3 * j * g(rng);
      blob_colour[ch] = l.blob_colour[ch] + 0.3 * j * g(rng);
    }
    // Faint grating borrowed from a random class.
    const auto& other = looks[static_cast<std::size_t>(rng() % static_cast<std::uint64_t>(C))];
    const double other_amp = 0.5 * j * u(rng);
    const double other_phase = 2.0 * kPi * u(rng);
    const double co = std::cos(other.theta), so = std::sin(other.theta);
    const double phase = 2.0 * kPi * u(rng);
    const double contrast = 0.15 + 0.2 * u(rng);
    const double bx = S * (0.2 + 0.6 * u(rng)), by = S * (0.2 + 0.6 * u(rng));
    const double radius = S * (0.1 + 0.1 * u(rng));
    const double brightness = 0.1 * g(rng);
    const double ct = std::cos(theta), st = std::sin(theta);
    std::uint8_t* dst = ds.pixels.data() + i * ds.sample_bytes();
    for (int y = 0; y < S; ++y) {
      for (int x = 0; x < S; ++x) {
        double wave = std::sin(2.0 * kPi * freq * (x * ct + y * st) / S + phase);
        double distractor = other_amp * std::sin(2.0 * kPi * other.freq * (x * co + y * so) / S + other_phase);
        double dx = x - bx, dy = y - by;
        double blob = std::exp(-(dx * dx + dy * dy) / (2.0 * radius * radius));
        for (int ch = 0; ch < 3; ++ch) {
          double v = 0.5 + brightness + contrast * (wave * colour[ch] + distractor * other.colour[ch]) +
                     0.25 * blob * blob_colour[ch] +
                     spec.noise * g(rng);
          v = std::clamp(v, 0.0, 1.0);
          dst[(static_cast<std::size_t>(ch) * static_cast<std::size_t>(S) + static_cast<std::size_t>(y)) *
                  static_cast<std::size_t>(S) +
              static_cast<std::size_t>(x)] = static_cast<std::uint8_t>(std::lround(v * 255.0));
        }
      }
    }
  }
  return ds;
}

}  // namespace semfl::data
