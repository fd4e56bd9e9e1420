#include "semfl/features/provider.hpp"

#include <cmath>
#include <set>

#include "semfl/common/error.hpp"
#include "semfl/common/hash.hpp"
#include "semfl/common/rng.hpp"
#include "semfl/features/projection.hpp"

namespace semfl::features {

void FeatureExtractionConfig::validate() const {
  if (feature_dim < 1) throw ConfigError("feature_dim must be positive");
  if (timestep < 1 || timestep >= 1000) throw ConfigError("timestep must be in [1, 1000)");
  if (layer_ids.empty()) throw ConfigError("at least one U-Net layer id is required");
  if (std::set<std::string>(layer_ids.begin(), layer_ids.end()).size() != layer_ids.size()) {
    throw ConfigError("duplicate U-Net layer ids");
  }
  if (!(gamma > 0.0) || !std::isfinite(gamma)) throw ConfigError("gamma must be a positive finite number");
  if (prompt_template.find("{name}") == std::string::npos) {
    throw ConfigError("prompt_template must contain {name}");
  }
}

nlohmann::json FeatureExtractionConfig::to_json() const {
  return {{"timestep", timestep}, {"feature_dim", feature_dim}, {"layer_ids", layer_ids},
          {"gamma", gamma},       {"prompt_template", prompt_template}, {"seed", seed}};
}

std::string FeatureExtractionConfig::hash() const { return sha256_hex(to_json().dump()); }

FeatureExtractionConfig extraction_from_json(const nlohmann::json& doc) {
  FeatureExtractionConfig c;
  c.timestep = doc.at("timestep").get<int>();
  c.feature_dim = doc.at("feature_dim").get<int>();
  c.layer_ids = doc.at("layer_ids").get<std::vector<std::string>>();
  c.gamma = doc.at("gamma").get<double>();
  c.prompt_template = doc.at("prompt_template").get<std::string>();
  c.seed = doc.at("seed").get<std::uint64_t>();
  return c;
}

std::string format_prompt(const std::string& prompt_template, const std::string& name) {
  std::string out = prompt_template;
  const std::string key = "{name}";
  for (auto pos = out.find(key); pos != std::string::npos; pos = out.find(key, pos + name.size())) {
    out.replace(pos, key.size(), name);
  }
  return out;
}

std::string to_string(ProviderKind kind) { return kind == ProviderKind::kDiffusion ? "diffusion" : "synthetic"; }

ProviderKind provider_kind_from_string(const std::string& name) {
  if (name == "diffusion") return ProviderKind::kDiffusion;
  if (name == "synthetic") return ProviderKind::kSynthetic;
  throw ConfigError("unknown provider '" + name + "' (expected diffusion or synthetic)");
}

Matrix global_average_pool(const nn::Tensor& maps) {
  if (maps.shape.size() != 4) throw InvalidInputError("pooling expects [N, C, h, w], got " + maps.shape_string());
  const int N = maps.dim(0), C = maps.dim(1);
  const std::size_t P = static_cast<std::size_t>(maps.dim(2)) * static_cast<std::size_t>(maps.dim(3));
  Matrix out(N, C);
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const double* p = maps.data.data() + (static_cast<std::size_t>(n) * static_cast<std::size_t>(C) + static_cast<std::size_t>(c)) * P;
      double s = 0.0;
      for (std::size_t i = 0; i < P; ++i) s += p[i];
      out(n, c) = s / static_cast<double>(P);
    }
  return out;
}

Matrix FeatureProvider::raw_visual(const nn::Tensor& images, std::span<const std::int64_t> sample_ids,
                                   std::span<const int> /*labels*/, const FeatureExtractionConfig& cfg) {
  if (static_cast<std::size_t>(images.batch()) != sample_ids.size()) {
    throw InvalidInputError("sample id count does not match the image batch");
  }
  for (double v : images.data) {
    if (!std::isfinite(v)) throw InvalidInputError("non-finite pixel value");
  }
  nn::Tensor latent = encode_latent(images, cfg.gamma);
  // One noise draw per image, seeded by its sample id.
  nn::Tensor noisy(latent.shape);
  const std::size_t row = latent.row_size();
  std::vector<int> one_shape = latent.shape;
  one_shape[0] = 1;
  for (std::size_t i = 0; i < sample_ids.size(); ++i) {
    nn::Tensor one(one_shape);
    std::copy_n(latent.data.begin() + static_cast<std::ptrdiff_t>(i * row), row, one.data.begin());
    auto seed = derive_seed(cfg.seed, {hash_string("noise"), static_cast<std::uint64_t>(sample_ids[i])});
    auto out = add_noise(one, cfg.timestep, schedule(), nullptr, seed);
    std::copy(out.data.begin(), out.data.end(), noisy.data.begin() + static_cast<std::ptrdiff_t>(i * row));
  }
  auto maps = unet_features(noisy, cfg.timestep, cfg.layer_ids);
  std::vector<Matrix> pooled;
  Eigen::Index width = 0;
  for (const auto& m : maps) {
    pooled.push_back(global_average_pool(m));
    width += pooled.back().cols();
  }
  Matrix out(static_cast<Eigen::Index>(sample_ids.size()), width);
  Eigen::Index col = 0;
  for (const auto& p : pooled) {
    out.middleCols(col, p.cols()) = p;
    col += p.cols();
  }
  return out;
}

int FeatureProvider::raw_visual_dim(const FeatureExtractionConfig& cfg) const {
  int total = 0;
  for (const auto& id : cfg.layer_ids) total += layer_width(id);
  return total;
}

// ---------------------------------------------------------------- synthetic

namespace {

constexpr int kSyntheticLatentChannels = 4;
constexpr int kLatentDownsample = 8;

Vector random_unit(std::uint64_t seed, int n) {
  Rng rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  Vector v(n);
  for (int i = 0; i < n; ++i) v(i) = g(rng);
  return v / v.norm();
}

}  // namespace

SyntheticProvider::SyntheticProvider(int num_classes, std::uint64_t seed, int raw_dim)
    : num_classes_(num_classes), raw_dim_(raw_dim), seed_(seed), schedule_(NoiseSchedule::scaled_linear()) {
  if (num_classes < 1) throw InvalidInputError("synthetic provider needs at least one class");
  if (raw_dim < num_classes) throw InvalidInputError("synthetic raw dimension must be >= number of classes");
  mu_ = orthonormal_rows(num_classes, raw_dim, derive_seed(seed, {hash_string("class-directions")}));
}

nlohmann::json SyntheticProvider::describe() const {
  return {{"id", id()}, {"raw_dim", raw_dim_}, {"num_classes", num_classes_}, {"seed", seed_},
          {"visual_noise", 0.3}, {"text_noise", 0.1}};
}

int SyntheticProvider::layer_width(const std::string& layer_id) const {
  if (layer_id == "down" || layer_id == "mid" || layer_id == "up") return kSyntheticLatentChannels;
  throw ConfigError("synthetic provider has no layer '" + layer_id + "' (known: down, mid, up)");
}

nn::Tensor SyntheticProvider::encode_latent(const nn::Tensor& images, double gamma) {
  if (images.shape.size() != 4 || images.dim(1) != 3) {
    throw InvalidInputError("encode_latent expects [N, 3, H, W], got " + images.shape_string());
  }
  const int N = images.dim(0), H = images.dim(2), W = images.dim(3);
  if (H % kLatentDownsample != 0 || W % kLatentDownsample != 0) {
    throw InvalidInputError("image sides must be multiples of 8");
  }
  for (double v : images.data) {
    if (!std::isfinite(v)) throw InvalidInputError("non-finite pixel value");
  }
  const int h = H / kLatentDownsample, w = W / kLatentDownsample;
  nn::Tensor out({N, kSyntheticLatentChannels, h, w});
  const double inv = 1.0 / (kLatentDownsample * kLatentDownsample);
  auto px = [&](int n, int c, int y, int x) {
    return images.data[((static_cast<std::size_t>(n) * 3 + static_cast<std::size_t>(c)) * static_cast<std::size_t>(H) +
                        static_cast<std::size_t>(y)) *
                           static_cast<std::size_t>(W) +
                       static_cast<std::size_t>(x)];
  };
  for (int n = 0; n < N; ++n)
    for (int oy = 0; oy < h; ++oy)
      for (int ox = 0; ox < w; ++ox) {
        double acc[3] = {0, 0, 0};
        for (int y = oy * kLatentDownsample; y < (oy + 1) * kLatentDownsample; ++y)
          for (int x = ox * kLatentDownsample; x < (ox + 1) * kLatentDownsample; ++x)
            for (int c = 0; c < 3; ++c) acc[c] += px(n, c, y, x);
        double vals[4] = {acc[0] * inv, acc[1] * inv, acc[2] * inv,
                          (0.299 * acc[0] + 0.587 * acc[1] + 0.114 * acc[2]) * inv};
        for (int c = 0; c < kSyntheticLatentChannels; ++c) {
          out.data[((static_cast<std::size_t>(n) * kSyntheticLatentChannels + static_cast<std::size_t>(c)) *
                        static_cast<std::size_t>(h) +
                    static_cast<std::size_t>(oy)) *
                       static_cast<std::size_t>(w) +
                   static_cast<std::size_t>(ox)] = gamma * vals[c];
        }
      }
  return out;
}

std::vector<nn::Tensor> SyntheticProvider::unet_features(const nn::Tensor& noisy_latent, int /*timestep*/,
                                                         const std::vector<std::string>& layer_ids) {
  std::vector<nn::Tensor> out;
  for (const auto& id : layer_ids) {
    layer_width(id);
    out.push_back(noisy_latent);
  }
  return out;
}

Matrix SyntheticProvider::raw_visual(const nn::Tensor& /*images*/, std::span<const std::int64_t> sample_ids,
                                     std::span<const int> labels, const FeatureExtractionConfig& /*cfg*/) {
  if (labels.size() != sample_ids.size()) throw InvalidInputError("label count does not match sample ids");
  Matrix out(static_cast<Eigen::Index>(sample_ids.size()), raw_dim_);
  for (std::size_t i = 0; i < sample_ids.size(); ++i) {
    int y = labels[i];
    if (y < 0 || y >= num_classes_) throw InvalidInputError("label " + std::to_string(y) + " out of range");
    Vector u = random_unit(derive_seed(seed_, {hash_string("visual"), static_cast<std::uint64_t>(sample_ids[i])}), raw_dim_);
    Vector v = mu_.row(y).transpose() + 0.3 * u;
    out.row(static_cast<Eigen::Index>(i)) = (v / v.norm()).transpose();
  }
  return out;
}

int SyntheticProvider::raw_visual_dim(const FeatureExtractionConfig& cfg) const {
  for (const auto& id : cfg.layer_ids) layer_width(id);
  return raw_dim_;
}

Vector SyntheticProvider::text_embed(const std::string& prompt, int class_index) {
  if (class_index < 0 || class_index >= num_classes_) {
    return random_unit(derive_seed(seed_, {hash_string("prompt"), hash_string(prompt)}), raw_dim_);
  }
  Vector v = mu_.row(class_index).transpose() +
             0.1 * random_unit(derive_seed(seed_, {hash_string("text"), static_cast<std::uint64_t>(class_index)}), raw_dim_);
  return v / v.norm();
}

std::unique_ptr<FeatureProvider> make_provider(ProviderKind kind, int num_classes, std::uint64_t seed,
                                               const std::filesystem::path& weights) {
  if (kind == ProviderKind::kSynthetic) return std::make_unique<SyntheticProvider>(num_classes, seed);
  DiffusionOptions opts;
  opts.seed = seed;
  opts.weights = weights;
  return make_diffusion_provider(opts);
}

}  // namespace semfl::features
