#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "semfl/common/types.hpp"
#include "semfl/features/schedule.hpp"
#include "semfl/nn/tensor.hpp"

namespace semfl::features {

struct FeatureExtractionConfig {
  int timestep = 150;
  int feature_dim = 512;
  std::vector<std::string> layer_ids{"down", "mid", "up"};
  double gamma = 0.18215;
  std::string prompt_template = "a photo of a {name}";
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  /// SHA-256 of the canonical JSON form.
  std::string hash() const;
};

FeatureExtractionConfig extraction_from_json(const nlohmann::json& doc);

/// Substitutes every "{name}" in the template.
std::string format_prompt(const std::string& prompt_template, const std::string& name);

enum class ProviderKind { kDiffusion, kSynthetic };

std::string to_string(ProviderKind kind);
ProviderKind provider_kind_from_string(const std::string& name);

/// Source of visual and textual anchors. Implementations are deterministic
/// for a fixed seed.
class FeatureProvider {
 public:
  virtual ~FeatureProvider() = default;

  virtual ProviderKind kind() const = 0;
  virtual std::string id() const = 0;
  virtual const NoiseSchedule& schedule() const = 0;
  /// Provenance details recorded in the store manifest.
  virtual nlohmann::json describe() const = 0;

  /// Channel width of a hooked layer; ConfigError for unknown ids.
  virtual int layer_width(const std::string& layer_id) const = 0;
  /// images: [N, 3, H, W] in [0, 1]. Returns gamma * encoder output.
  virtual nn::Tensor encode_latent(const nn::Tensor& images, double gamma) = 0;
  /// Hooked activation maps, one [N, C_l, h, w] tensor per requested layer.
  virtual std::vector<nn::Tensor> unet_features(const nn::Tensor& noisy_latent, int timestep,
                                                const std::vector<std::string>& layer_ids) = 0;
  /// Pre-projection visual features, N x raw_visual_dim(cfg).
  virtual Matrix raw_visual(const nn::Tensor& images, std::span<const std::int64_t> sample_ids,
                            std::span<const int> labels, const FeatureExtractionConfig& cfg);
  virtual int raw_visual_dim(const FeatureExtractionConfig& cfg) const;

  /// Pooled text embedding of a prompt. `class_index` identifies the class
  /// the prompt was built for; providers with a real text encoder ignore it.
  virtual Vector text_embed(const std::string& prompt, int class_index) = 0;
  virtual int text_dim() const = 0;
};

/// Spatial mean of each channel: [N, C, h, w] -> N x C.
Matrix global_average_pool(const nn::Tensor& maps);

/// Label-driven stand-in for the diffusion model. Class directions mu_y are
/// seeded orthonormal vectors in `raw_dim` dims; sample i with label y gets
/// normalize(mu_y + 0.3 u_i) and class y's text gets normalize(mu_y + 0.1 v_y)
/// with u_i, v_y seeded random unit directions.
class SyntheticProvider final : public FeatureProvider {
 public:
  SyntheticProvider(int num_classes, std::uint64_t seed, int raw_dim = 1024);

  ProviderKind kind() const override { return ProviderKind::kSynthetic; }
  std::string id() const override { return "synthetic-v1"; }
  const NoiseSchedule& schedule() const override { return schedule_; }
  nlohmann::json describe() const override;
  int layer_width(const std::string& layer_id) const override;
  /// 8x8 average pooling to four channels (R, G, B, luma), times gamma.
  nn::Tensor encode_latent(const nn::Tensor& images, double gamma) override;
  /// Identity network: every hook sees the noisy latent.
  std::vector<nn::Tensor> unet_features(const nn::Tensor& noisy_latent, int timestep,
                                        const std::vector<std::string>& layer_ids) override;
  Matrix raw_visual(const nn::Tensor& images, std::span<const std::int64_t> sample_ids, std::span<const int> labels,
                    const FeatureExtractionConfig& cfg) override;
  int raw_visual_dim(const FeatureExtractionConfig& cfg) const override;
  Vector text_embed(const std::string& prompt, int class_index) override;
  int text_dim() const override { return raw_dim_; }

  const Matrix& class_directions() const { return mu_; }

 private:
  int num_classes_, raw_dim_;
  std::uint64_t seed_;
  Matrix mu_;  // C x raw_dim, orthonormal rows
  NoiseSchedule schedule_;
};

struct DiffusionOptions {
  std::uint64_t seed = 0;
  /// Optional float32 little-endian parameter file; empty keeps the seeded
  /// random initialisation.
  std::filesystem::path weights;
};

/// Compact latent-diffusion stack (VAE encoder, conditioned U-Net, one-layer
/// text transformer) evaluated in inference mode. See README for the layout.
std::unique_ptr<FeatureProvider> make_diffusion_provider(const DiffusionOptions& options);

std::unique_ptr<FeatureProvider> make_provider(ProviderKind kind, int num_classes, std::uint64_t seed,
                                               const std::filesystem::path& weights = {});

}  // namespace semfl::features
