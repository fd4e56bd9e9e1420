#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "semfl/common/types.hpp"
#include "semfl/data/dataset.hpp"
#include "semfl/features/projection.hpp"
#include "semfl/features/provider.hpp"

namespace semfl::features {

struct VisualFeatureSet {
  MatrixF features;  // N x d
  std::vector<std::int64_t> sample_ids;

  std::size_t size() const { return sample_ids.size(); }
};

struct TextFeatureSet {
  MatrixF class_features;  // C x d
  std::vector<std::string> class_names;
};

/// Visual and text anchors plus everything needed to reproduce them.
struct FeatureStore {
  VisualFeatureSet visual;
  TextFeatureSet text;
  Projection projection;       // visual PCA, d x D
  Projection text_projection;  // seeded orthonormal, d x text_dim
  nlohmann::json manifest;

  int dim() const { return static_cast<int>(visual.features.cols()); }
  /// Row of a sample id, or -1.
  std::int64_t row_of(std::int64_t sample_id) const;
  void index();

 private:
  std::unordered_map<std::int64_t, std::int64_t> rows_;
};

/// Raw provider features for dataset rows `indices`, in batches.
Matrix raw_visual_features(const data::Dataset& ds, std::span<const std::int64_t> indices,
                           const FeatureExtractionConfig& cfg, FeatureProvider& provider);

/// raw -> projection -> float rows, in input order.
VisualFeatureSet extract_visual_features(const data::Dataset& ds, std::span<const std::int64_t> indices,
                                         const FeatureExtractionConfig& cfg, FeatureProvider& provider,
                                         const Projection& projection);

/// Formats each class name with the template, embeds it and maps it to d
/// dims with `text_projection`, then L2-normalises. Duplicate names are an
/// InvalidInputError.
TextFeatureSet encode_class_prompts(const std::vector<std::string>& class_names, const FeatureExtractionConfig& cfg,
                                    FeatureProvider& provider, const Projection& text_projection);

struct ExtractionRequest {
  std::string dataset_name;
  std::uint64_t dataset_seed = 0;
};

/// Full offline phase: fit the PCA on the whole corpus, project every
/// sample, embed the class prompts and fill in the manifest.
FeatureStore build_feature_store(const data::Dataset& ds, const FeatureExtractionConfig& cfg,
                                 FeatureProvider& provider, const ExtractionRequest& request);

/// Directory layout: manifest.json, visual.f32, text.f32, sample_ids.i64,
/// projection.f64, text_projection.f64.
void save_store(const FeatureStore& store, const std::filesystem::path& dir);

/// Verifies file sizes (FormatError) and hashes (IntegrityError). When
/// `expected_config_hash` is given, a different extraction config in the
/// manifest is an IntegrityError.
FeatureStore load_store(const std::filesystem::path& dir,
                        const std::optional<std::string>& expected_config_hash = std::nullopt);

/// Rows for `sample_ids` in the given order; unknown ids are InvalidInputError.
VisualFeatureSet slice_store(const FeatureStore& store, std::span<const std::int64_t> sample_ids);

}  // namespace semfl::features
