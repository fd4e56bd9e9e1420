#include "semfl/models/model.hpp"

#include <cmath>

#include "semfl/common/binary_io.hpp"
#include "semfl/common/error.hpp"
#include "semfl/common/rng.hpp"

namespace semfl::models {
namespace {

constexpr int kTinyConv1 = 16;
constexpr int kTinyConv2 = 32;
constexpr double kNormFloor = 1e-12;

struct MobileNetStage {
  int expand, channels, repeats, stride;
};

// Standard MobileNetV2 table; the second stage keeps stride 1 for small inputs.
constexpr MobileNetStage kMobileNetStages[] = {
    {1, 16, 1, 1}, {6, 24, 2, 1}, {6, 32, 3, 2}, {6, 64, 4, 2}, {6, 96, 3, 1}, {6, 160, 3, 2}, {6, 320, 1, 1},
};

// The input image never needs a gradient, so the first conv skips it.
std::unique_ptr<nn::Conv2d> first_conv(std::unique_ptr<nn::Conv2d> conv) {
  conv->set_input_grad(false);
  return conv;
}

int build_backbone(const BackboneSpec& spec, nn::Sequential& net) {
  using namespace nn;
  const int cin = spec.input_channels;
  switch (spec.architecture) {
    case Architecture::kLinear:
      net.add(std::make_unique<Flatten>());
      return spec.input_channels * spec.input_height * spec.input_width;

    case Architecture::kTinyCnn: {
      if (spec.input_height % 4 != 0 || spec.input_width % 4 != 0) {
        throw ConfigError("tinycnn needs input height and width divisible by 4");
      }
      net.add(first_conv(std::make_unique<Conv2d>("conv1", cin, kTinyConv1, 3, 1, 1)))
          .add(std::make_unique<ReLU>())
          .add(std::make_unique<MaxPool2d>(2))
          .add(std::make_unique<Conv2d>("conv2", kTinyConv1, kTinyConv2, 3, 1, 1))
          .add(std::make_unique<ReLU>())
          .add(std::make_unique<MaxPool2d>(2))
          .add(std::make_unique<Flatten>());
      return kTinyConv2 * (spec.input_height / 4) * (spec.input_width / 4);
    }

    case Architecture::kResNet10: {
      net.add(first_conv(std::make_unique<Conv2d>("stem", cin, 64, 3, 1, 1, 1, false)))
          .add(std::make_unique<BatchNorm2d>("stem_bn", 64))
          .add(std::make_unique<ReLU>())
          .add(std::make_unique<BasicBlock>("layer1", 64, 64, 1))
          .add(std::make_unique<BasicBlock>("layer2", 64, 128, 2))
          .add(std::make_unique<BasicBlock>("layer3", 128, 256, 2))
          .add(std::make_unique<BasicBlock>("layer4", 256, 512, 2))
          .add(std::make_unique<GlobalAvgPool>());
      return 512;
    }

    case Architecture::kMobileNetV2: {
      int stem_stride = spec.input_height > 32 ? 2 : 1;
      net.add(first_conv(std::make_unique<Conv2d>("stem", cin, 32, 3, stem_stride, 1, 1, false)))
          .add(std::make_unique<BatchNorm2d>("stem_bn", 32))
          .add(std::make_unique<ReLU>(6.0));
      int in = 32, block = 0;
      for (const auto& stage : kMobileNetStages) {
        for (int r = 0; r < stage.repeats; ++r, ++block) {
          net.add(std::make_unique<InvertedResidual>("block" + std::to_string(block), in, stage.channels,
                                                     r == 0 ? stage.stride : 1, stage.expand));
          in = stage.channels;
        }
      }
      net.add(std::make_unique<Conv2d>("head", in, 1280, 1, 1, 0, 1, false))
          .add(std::make_unique<BatchNorm2d>("head_bn", 1280))
          .add(std::make_unique<ReLU>(6.0))
          .add(std::make_unique<GlobalAvgPool>());
      return 1280;
    }
  }
  throw ConfigError("unknown architecture");
}

}  // namespace

std::string to_string(Architecture a) {
  switch (a) {
    case Architecture::kResNet10:
      return "resnet10";
    case Architecture::kMobileNetV2:
      return "mobilenetv2";
    case Architecture::kTinyCnn:
      return "tinycnn";
    case Architecture::kLinear:
      return "linear";
  }
  return "unknown";
}

Architecture architecture_from_string(const std::string& name) {
  if (name == "resnet10") return Architecture::kResNet10;
  if (name == "mobilenetv2") return Architecture::kMobileNetV2;
  if (name == "tinycnn") return Architecture::kTinyCnn;
  if (name == "linear") return Architecture::kLinear;
  throw ConfigError("unknown architecture '" + name + "'");
}

void BackboneSpec::validate() const {
  if (num_classes < 1) throw ConfigError("num_classes must be positive");
  if (feature_dim < 1) throw ConfigError("feature_dim must be positive");
  if (input_channels < 1 || input_height < 1 || input_width < 1) throw ConfigError("input shape must be positive");
}

nlohmann::json to_json(const BackboneSpec& spec) {
  return nlohmann::json{{"architecture", to_string(spec.architecture)},
                        {"num_classes", spec.num_classes},
                        {"feature_dim", spec.feature_dim},
                        {"seed", spec.seed},
                        {"input_channels", spec.input_channels},
                        {"input_height", spec.input_height},
                        {"input_width", spec.input_width}};
}

BackboneSpec backbone_from_json(const nlohmann::json& doc) {
  BackboneSpec spec;
  try {
    spec.architecture = architecture_from_string(doc.at("architecture").get<std::string>());
    spec.num_classes = doc.at("num_classes").get<int>();
    spec.feature_dim = doc.at("feature_dim").get<int>();
    spec.seed = doc.at("seed").get<std::uint64_t>();
    spec.input_channels = doc.value("input_channels", 3);
    spec.input_height = doc.value("input_height", 32);
    spec.input_width = doc.value("input_width", 32);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed backbone spec: ") + e.what());
  }
  spec.validate();
  return spec;
}

ClientModel::ClientModel(const BackboneSpec& spec) : spec_(spec), backbone_(std::make_unique<nn::Sequential>()) {
  spec_.validate();
  backbone_width_ = build_backbone(spec_, *backbone_);
  feature_head_ = std::make_unique<nn::Linear>("feature_head", backbone_width_, spec_.feature_dim);
  classifier_ = std::make_unique<nn::Linear>("classifier", backbone_width_, spec_.num_classes);

  backbone_->collect_parameters(params_);
  feature_head_->collect_parameters(params_);
  classifier_->collect_parameters(params_);
  for (auto* p : params_) num_params_ += p->value.size();

  Rng rng(derive_seed(spec_.seed, {hash_string("model-init")}));
  backbone_->init(rng);
  feature_head_->init(rng);
  classifier_->init(rng);
}

ModelOutput ClientModel::forward(const nn::Tensor& images, nn::Mode mode) {
  if (images.shape.size() != 4 || images.dim(0) < 1 || images.dim(1) != spec_.input_channels ||
      images.dim(2) != spec_.input_height || images.dim(3) != spec_.input_width) {
    throw InvalidInputError("model expects [B," + std::to_string(spec_.input_channels) + "," +
                            std::to_string(spec_.input_height) + "," + std::to_string(spec_.input_width) +
                            "] with B >= 1, got " + images.shape_string());
  }
  nn::Tensor h = backbone_->forward(images, mode);
  nn::Tensor raw = feature_head_->forward(h, mode);
  nn::Tensor logits = classifier_->forward(h, mode);

  const int B = images.dim(0);
  ModelOutput out;
  out.logits = Eigen::Map<const Matrix>(logits.data.data(), B, spec_.num_classes);
  Matrix feats = Eigen::Map<const Matrix>(raw.data.data(), B, spec_.feature_dim);
  norms_ = feats.rowwise().norm().cwiseMax(kNormFloor);
  feats.array().colwise() /= norms_.array();
  normalised_ = feats;
  out.features = std::move(feats);
  return out;
}

void ClientModel::backward(const Matrix& grad_logits, const Matrix& grad_features) {
  const auto B = normalised_.rows();
  if (grad_logits.rows() != B || grad_features.rows() != B) {
    throw StateError("backward called with gradients that do not match the last forward batch");
  }
  // d(h/|h|)/dh applied to g: (g - f (f . g)) / |h|
  Vector dots = (normalised_.array() * grad_features.array()).rowwise().sum();
  Matrix g_raw = grad_features - (normalised_.array().colwise() * dots.array()).matrix();
  g_raw.array().colwise() /= norms_.array();

  nn::Tensor g_feat({static_cast<int>(B), spec_.feature_dim});
  Eigen::Map<Matrix>(g_feat.data.data(), B, spec_.feature_dim) = g_raw;
  nn::Tensor g_cls({static_cast<int>(B), spec_.num_classes});
  Eigen::Map<Matrix>(g_cls.data.data(), B, spec_.num_classes) = grad_logits;

  nn::Tensor dh = feature_head_->backward(g_feat);
  nn::Tensor dh_cls = classifier_->backward(g_cls);
  for (std::size_t i = 0; i < dh.size(); ++i) dh.data[i] += dh_cls.data[i];
  backbone_->backward(dh);
}

std::vector<double> ClientModel::flatten() const {
  std::vector<double> out;
  out.reserve(num_params_);
  for (const auto* p : params_) out.insert(out.end(), p->value.begin(), p->value.end());
  return out;
}

void ClientModel::unflatten(std::span<const double> params) {
  if (params.size() != num_params_) {
    throw InvalidInputError("parameter vector has " + std::to_string(params.size()) + " entries, model needs " +
                            std::to_string(num_params_));
  }
  std::size_t offset = 0;
  for (auto* p : params_) {
    std::copy_n(params.begin() + static_cast<std::ptrdiff_t>(offset), p->value.size(), p->value.begin());
    offset += p->value.size();
  }
}

std::vector<double> ClientModel::flatten_grad() const {
  std::vector<double> out;
  out.reserve(num_params_);
  for (const auto* p : params_) {
    if (p->trainable) {
      out.insert(out.end(), p->grad.begin(), p->grad.end());
    } else {
      out.insert(out.end(), p->value.size(), 0.0);
    }
  }
  return out;
}

void ClientModel::zero_grad() {
  for (auto* p : params_) std::fill(p->grad.begin(), p->grad.end(), 0.0);
}

void ClientModel::set_identity_feature_head() {
  if (backbone_width_ != spec_.feature_dim) {
    throw ConfigError("identity feature head needs backbone width == feature_dim");
  }
  auto& w = feature_head_->weight().value;
  std::fill(w.begin(), w.end(), 0.0);
  for (int i = 0; i < spec_.feature_dim; ++i) w[static_cast<std::size_t>(i * spec_.feature_dim + i)] = 1.0;
  auto& b = feature_head_->bias().value;
  std::fill(b.begin(), b.end(), 0.0);
}

ClientModel build_model(const BackboneSpec& spec) { return ClientModel(spec); }

void save_checkpoint(const std::filesystem::path& stem, const BackboneSpec& spec, std::span<const double> params) {
  auto params_path = stem;
  params_path += ".params";
  auto spec_path = stem;
  spec_path += ".json";
  io::write_array<double>(params_path, params);
  auto doc = to_json(spec);
  doc["num_parameters"] = params.size();
  io::write_text(spec_path, doc.dump(2) + "\n");
}

Checkpoint load_checkpoint(const std::filesystem::path& stem) {
  auto params_path = stem;
  params_path += ".params";
  auto spec_path = stem;
  spec_path += ".json";
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(io::read_text(spec_path));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(spec_path.string() + ": " + e.what());
  }
  Checkpoint ck;
  ck.spec = backbone_from_json(doc);
  auto expected = doc.at("num_parameters").get<std::size_t>();
  ck.params = io::read_array<double>(params_path, expected);
  return ck;
}

}  // namespace semfl::models
