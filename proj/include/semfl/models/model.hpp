#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "semfl/models/model_output.hpp"
#include "semfl/nn/layers.hpp"

namespace semfl::models {

enum class Architecture { kResNet10, kMobileNetV2, kTinyCnn, kLinear };

std::string to_string(Architecture a);
Architecture architecture_from_string(const std::string& name);

struct BackboneSpec {
  Architecture architecture = Architecture::kTinyCnn;
  int num_classes = 10;
  int feature_dim = 512;
  std::uint64_t seed = 0;
  // Expected per-sample input shape (C, H, W).
  int input_channels = 3;
  int input_height = 32;
  int input_width = 32;

  void validate() const;
};

nlohmann::json to_json(const BackboneSpec& spec);
BackboneSpec backbone_from_json(const nlohmann::json& doc);

/// Backbone -> {affine feature head -> L2 normalise, affine classifier}.
///
/// The flat parameter vector concatenates backbone, feature head and
/// classifier parameters in construction order, including normalisation
/// running statistics.
class ClientModel {
 public:
  explicit ClientModel(const BackboneSpec& spec);
  ClientModel(const ClientModel&) = delete;
  ClientModel& operator=(const ClientModel&) = delete;
  ClientModel(ClientModel&&) = default;
  ClientModel& operator=(ClientModel&&) = default;

  const BackboneSpec& spec() const { return spec_; }
  int backbone_width() const { return backbone_width_; }

  /// images: [B, C, H, W] matching the spec's input shape.
  ModelOutput forward(const nn::Tensor& images, nn::Mode mode);
  /// Backpropagates loss gradients w.r.t. logits and normalised features
  /// through the most recent forward(). Accumulates into parameter grads.
  void backward(const Matrix& grad_logits, const Matrix& grad_features);

  std::size_t num_parameters() const { return num_params_; }
  std::vector<double> flatten() const;
  void unflatten(std::span<const double> params);
  std::vector<double> flatten_grad() const;
  void zero_grad();

  /// Parameters in flat-vector order. Buffers have trainable == false.
  const std::vector<nn::Parameter*>& parameters() { return params_; }

  /// Requires backbone_width == feature_dim; sets the feature head to the
  /// identity map with zero bias.
  void set_identity_feature_head();

 private:
  BackboneSpec spec_;
  std::unique_ptr<nn::Sequential> backbone_;
  std::unique_ptr<nn::Linear> feature_head_;
  std::unique_ptr<nn::Linear> classifier_;
  std::vector<nn::Parameter*> params_;
  std::size_t num_params_ = 0;
  int backbone_width_ = 0;

  // forward cache for the normalisation backward
  Matrix normalised_;
  Vector norms_;
};

ClientModel build_model(const BackboneSpec& spec);

/// Checkpoint = <stem>.params (little-endian float64) + <stem>.json (spec).
void save_checkpoint(const std::filesystem::path& stem, const BackboneSpec& spec, std::span<const double> params);
struct Checkpoint {
  BackboneSpec spec;
  std::vector<double> params;
};
Checkpoint load_checkpoint(const std::filesystem::path& stem);

}  // namespace semfl::models
