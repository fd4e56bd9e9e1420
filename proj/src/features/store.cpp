#include "semfl/features/store.hpp"

#include <chrono>
#include <ctime>
#include <set>

#include "semfl/common/binary_io.hpp"
#include "semfl/common/error.hpp"
#include "semfl/common/hash.hpp"
#include "semfl/common/rng.hpp"

namespace fs = std::filesystem;

namespace semfl::features {
namespace {

constexpr std::size_t kExtractBatch = 256;
constexpr int kStoreVersion = 1;

const char* const kFiles[] = {"visual.f32", "text.f32", "sample_ids.i64", "projection.f64", "text_projection.f64"};

std::string utc_now() {
  auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::vector<double> pack_projection(const Projection& p) {
  std::vector<double> v(p.components.data(), p.components.data() + p.components.size());
  v.insert(v.end(), p.mean.data(), p.mean.data() + p.mean.size());
  return v;
}

Projection unpack_projection(const std::vector<double>& v, int d, int D) {
  Projection p;
  p.components = Eigen::Map<const Matrix>(v.data(), d, D);
  p.mean = Eigen::Map<const Vector>(v.data() + static_cast<std::ptrdiff_t>(d) * D, D);
  return p;
}

}  // namespace

std::int64_t FeatureStore::row_of(std::int64_t sample_id) const {
  auto it = rows_.find(sample_id);
  return it == rows_.end() ? -1 : it->second;
}

void FeatureStore::index() {
  rows_.clear();
  for (std::size_t i = 0; i < visual.sample_ids.size(); ++i) {
    if (!rows_.emplace(visual.sample_ids[i], static_cast<std::int64_t>(i)).second) {
      throw IntegrityError("sample id " + std::to_string(visual.sample_ids[i]) + " appears twice in the store");
    }
  }
}

Matrix raw_visual_features(const data::Dataset& ds, std::span<const std::int64_t> indices,
                           const FeatureExtractionConfig& cfg, FeatureProvider& provider) {
  cfg.validate();
  if (cfg.timestep >= provider.schedule().num_timesteps) {
    throw ConfigError("timestep " + std::to_string(cfg.timestep) + " exceeds the provider schedule");
  }
  const int D = provider.raw_visual_dim(cfg);
  Matrix raw(static_cast<Eigen::Index>(indices.size()), D);
  const bool synthetic = provider.kind() == ProviderKind::kSynthetic;
  for (std::size_t start = 0; start < indices.size(); start += kExtractBatch) {
    std::size_t n = std::min(kExtractBatch, indices.size() - start);
    auto ids = indices.subspan(start, n);
    std::vector<int> labels(n);
    for (std::size_t i = 0; i < n; ++i) labels[i] = ds.labels.at(static_cast<std::size_t>(ids[i]));
    // The synthetic provider is label driven; skip converting pixels for it.
    nn::Tensor images = synthetic ? nn::Tensor({static_cast<int>(n), ds.channels, 1, 1}) : data::to_unit_tensor(ds, ids);
    raw.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(n)) =
        provider.raw_visual(images, ids, labels, cfg);
  }
  if (!raw.allFinite()) throw ProviderError("provider produced non-finite features");
  return raw;
}

VisualFeatureSet extract_visual_features(const data::Dataset& ds, std::span<const std::int64_t> indices,
                                         const FeatureExtractionConfig& cfg, FeatureProvider& provider,
                                         const Projection& projection) {
  if (projection.components.size() == 0) throw StateError("projection has not been fitted");
  if (projection.dim() != cfg.feature_dim) throw ConfigError("projection dimension differs from feature_dim");
  Matrix raw = raw_visual_features(ds, indices, cfg, provider);
  VisualFeatureSet out;
  out.features = projection.apply(raw).cast<float>();
  out.sample_ids.assign(indices.begin(), indices.end());
  return out;
}

TextFeatureSet encode_class_prompts(const std::vector<std::string>& class_names, const FeatureExtractionConfig& cfg,
                                    FeatureProvider& provider, const Projection& text_projection) {
  if (class_names.empty()) throw InvalidInputError("no class names");
  if (std::set<std::string>(class_names.begin(), class_names.end()).size() != class_names.size()) {
    throw InvalidInputError("class names must be pairwise distinct");
  }
  if (text_projection.input_dim() != provider.text_dim()) {
    throw ConfigError("text projection input dimension differs from the provider's text width");
  }
  TextFeatureSet out;
  out.class_names = class_names;
  out.class_features.resize(static_cast<Eigen::Index>(class_names.size()), text_projection.dim());
  for (std::size_t c = 0; c < class_names.size(); ++c) {
    Vector e = provider.text_embed(format_prompt(cfg.prompt_template, class_names[c]), static_cast<int>(c));
    Vector z = text_projection.components * (e - text_projection.mean);
    double norm = z.norm();
    if (!(norm > 0.0)) throw ProviderError("degenerate text embedding for class " + class_names[c]);
    out.class_features.row(static_cast<Eigen::Index>(c)) = (z / norm).transpose().cast<float>();
  }
  return out;
}

FeatureStore build_feature_store(const data::Dataset& ds, const FeatureExtractionConfig& cfg,
                                 FeatureProvider& provider, const ExtractionRequest& request) {
  cfg.validate();
  std::vector<std::int64_t> ids(ds.size());
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<std::int64_t>(i);

  FeatureStore store;
  Matrix raw = raw_visual_features(ds, ids, cfg, provider);
  store.projection = fit_projection(raw, cfg.feature_dim);
  store.visual.features = store.projection.apply(raw).cast<float>();
  store.visual.sample_ids = ids;
  store.text_projection =
      orthonormal_projection(provider.text_dim(), cfg.feature_dim, derive_seed(cfg.seed, {hash_string("text-projection")}));
  store.text = encode_class_prompts(ds.class_names, cfg, provider, store.text_projection);
  store.index();

  store.manifest = {{"version", kStoreVersion},
                    {"provider", provider.id()},
                    {"provider_details", provider.describe()},
                    {"config", cfg.to_json()},
                    {"config_hash", cfg.hash()},
                    {"d", cfg.feature_dim},
                    {"t", cfg.timestep},
                    {"layer_ids", cfg.layer_ids},
                    {"raw_dim", raw.cols()},
                    {"text_dim", provider.text_dim()},
                    {"num_samples", ids.size()},
                    {"num_classes", ds.class_names.size()},
                    {"class_names", ds.class_names},
                    {"projection_hash", store.projection.hash()},
                    {"text_projection_hash", store.text_projection.hash()},
                    {"schedule_hash", provider.schedule().hash()},
                    {"dataset", {{"name", request.dataset_name}, {"size", ds.size()}, {"seed", request.dataset_seed}}},
                    {"created", utc_now()}};
  return store;
}

void save_store(const FeatureStore& store, const fs::path& dir) {
  if (store.visual.features.cols() != store.text.class_features.cols()) {
    throw InvalidInputError("visual and text anchors have different dimensions");
  }
  fs::create_directories(dir);
  const auto& v = store.visual.features;
  const auto& t = store.text.class_features;
  io::write_array<float>(dir / "visual.f32", std::span<const float>(v.data(), static_cast<std::size_t>(v.size())));
  io::write_array<float>(dir / "text.f32", std::span<const float>(t.data(), static_cast<std::size_t>(t.size())));
  io::write_array<std::int64_t>(dir / "sample_ids.i64", store.visual.sample_ids);
  io::write_array<double>(dir / "projection.f64", pack_projection(store.projection));
  io::write_array<double>(dir / "text_projection.f64", pack_projection(store.text_projection));

  nlohmann::json manifest = store.manifest;
  manifest["d"] = v.cols();
  manifest["num_samples"] = store.visual.size();
  manifest["num_classes"] = store.text.class_names.size();
  manifest["class_names"] = store.text.class_names;
  manifest["raw_dim"] = store.projection.input_dim();
  manifest["text_dim"] = store.text_projection.input_dim();
  nlohmann::json files = nlohmann::json::object();
  for (const char* f : kFiles) files[f] = sha256_file(dir / f);
  manifest["files"] = files;
  io::write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

FeatureStore load_store(const fs::path& dir, const std::optional<std::string>& expected_config_hash) {
  if (!fs::exists(dir / "manifest.json")) {
    throw ProviderError("no feature store at " + dir.string() + "; create one with `semfl extract-features`");
  }
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(io::read_text(dir / "manifest.json"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("unreadable store manifest: " + std::string(e.what()));
  }
  FeatureStore store;
  try {
    const auto N = manifest.at("num_samples").get<std::size_t>();
    const auto C = manifest.at("num_classes").get<std::size_t>();
    const int d = manifest.at("d").get<int>();
    const int D = manifest.at("raw_dim").get<int>();
    const int Dt = manifest.at("text_dim").get<int>();
    const auto ud = static_cast<std::size_t>(d);

    // Sizes first (truncation is a format problem), then content hashes.
    auto visual = io::read_array<float>(dir / "visual.f32", N * ud);
    auto text = io::read_array<float>(dir / "text.f32", C * ud);
    auto ids = io::read_array<std::int64_t>(dir / "sample_ids.i64", N);
    auto proj = io::read_array<double>(dir / "projection.f64", ud * static_cast<std::size_t>(D) + static_cast<std::size_t>(D));
    auto tproj =
        io::read_array<double>(dir / "text_projection.f64", ud * static_cast<std::size_t>(Dt) + static_cast<std::size_t>(Dt));
    for (const char* f : kFiles) {
      auto want = manifest.at("files").at(f).get<std::string>();
      if (sha256_file(dir / f) != want) throw IntegrityError(std::string(f) + " does not match its manifest hash");
    }
    if (expected_config_hash && manifest.at("config_hash").get<std::string>() != *expected_config_hash) {
      throw IntegrityError("feature store at " + dir.string() + " was extracted with a different configuration");
    }

    store.visual.features = Eigen::Map<const MatrixF>(visual.data(), static_cast<Eigen::Index>(N), d);
    store.visual.sample_ids = std::move(ids);
    store.text.class_features = Eigen::Map<const MatrixF>(text.data(), static_cast<Eigen::Index>(C), d);
    store.text.class_names = manifest.at("class_names").get<std::vector<std::string>>();
    store.projection = unpack_projection(proj, d, D);
    store.text_projection = unpack_projection(tproj, d, Dt);
    if (store.projection.hash() != manifest.at("projection_hash").get<std::string>() ||
        store.text_projection.hash() != manifest.at("text_projection_hash").get<std::string>()) {
      throw IntegrityError("projection hash mismatch");
    }
    if (store.text.class_names.size() != C) throw FormatError("class name count differs from num_classes");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("store manifest is missing fields: " + std::string(e.what()));
  }
  if (!store.visual.features.allFinite() || !store.text.class_features.allFinite()) {
    throw IntegrityError("store contains non-finite values");
  }
  store.manifest = std::move(manifest);
  store.index();
  return store;
}

VisualFeatureSet slice_store(const FeatureStore& store, std::span<const std::int64_t> sample_ids) {
  VisualFeatureSet out;
  out.features.resize(static_cast<Eigen::Index>(sample_ids.size()), store.visual.features.cols());
  out.sample_ids.assign(sample_ids.begin(), sample_ids.end());
  for (std::size_t i = 0; i < sample_ids.size(); ++i) {
    auto row = store.row_of(sample_ids[i]);
    if (row < 0) throw InvalidInputError("sample id " + std::to_string(sample_ids[i]) + " is not in the store");
    out.features.row(static_cast<Eigen::Index>(i)) = store.visual.features.row(row);
  }
  return out;
}

}  // namespace semfl::features
