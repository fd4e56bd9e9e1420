#pragma once

#include <memory>
#include <string>
#include <vector>

#include "semfl/common/rng.hpp"
#include "semfl/nn/tensor.hpp"

namespace semfl::nn {

enum class Mode { kTrain, kEval };

/// A trainable weight or a non-trainable buffer (normalisation running
/// statistics). Buffers have an empty grad and are still part of the flat
/// parameter vector.
struct Parameter {
  std::string name;
  std::vector<double> value;
  std::vector<double> grad;
  bool trainable = true;
};

/// Layer with hand-written backward. forward() caches what backward() needs,
/// so a module instance is not reentrant.
class Module {
 public:
  virtual ~Module() = default;
  virtual Tensor forward(const Tensor& x, Mode mode) = 0;
  /// Accumulates parameter gradients and returns dLoss/dInput.
  virtual Tensor backward(const Tensor& grad_out) = 0;
  virtual void collect_parameters(std::vector<Parameter*>& /*out*/) {}
  /// Seeded initialisation of all owned weights.
  virtual void init(Rng& /*rng*/) {}
};

using ModulePtr = std::unique_ptr<Module>;

class Conv2d final : public Module {
 public:
  Conv2d(std::string name, int in_channels, int out_channels, int kernel, int stride = 1, int padding = 0,
         int groups = 1, bool bias = true);
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;
  void collect_parameters(std::vector<Parameter*>& out) override;
  void init(Rng& rng) override;

  Parameter& weight() { return weight_; }
  /// The first layer of a network does not need dLoss/dInput; backward()
  /// then returns an empty tensor.
  void set_input_grad(bool enabled) { input_grad_ = enabled; }

 private:
  int in_, out_, k_, stride_, pad_, groups_;
  bool has_bias_;
  bool input_grad_ = true;
  Parameter weight_, bias_;
  std::vector<int> in_shape_;
  std::vector<double> cols_;
  int out_h_ = 0, out_w_ = 0;
};

class BatchNorm2d final : public Module {
 public:
  BatchNorm2d(std::string name, int channels, double momentum = 0.1, double eps = 1e-5);
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;
  void collect_parameters(std::vector<Parameter*>& out) override;
  void init(Rng& rng) override;

 private:
  int channels_;
  double momentum_, eps_;
  Parameter gamma_, beta_, running_mean_, running_var_;
  std::vector<double> xhat_, inv_std_;
  std::vector<int> shape_;
  Mode last_mode_ = Mode::kEval;
};

class Linear final : public Module {
 public:
  Linear(std::string name, int in_features, int out_features, bool bias = true);
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;
  void collect_parameters(std::vector<Parameter*>& out) override;
  void init(Rng& rng) override;

  int in_features() const { return in_; }
  int out_features() const { return out_; }
  Parameter& weight() { return weight_; }
  Parameter& bias() { return bias_; }

 private:
  int in_, out_;
  bool has_bias_;
  Parameter weight_, bias_;
  Tensor input_;
};

class ReLU final : public Module {
 public:
  explicit ReLU(double cap = 0.0) : cap_(cap) {}  // cap > 0 gives ReLU6-style clipping
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;

 private:
  double cap_;
  std::vector<char> pass_;
  std::vector<int> shape_;
};

class MaxPool2d final : public Module {
 public:
  explicit MaxPool2d(int kernel = 2) : k_(kernel) {}
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;

 private:
  int k_;
  std::vector<int> in_shape_;
  std::vector<std::size_t> argmax_;
};

class GlobalAvgPool final : public Module {
 public:
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;

 private:
  std::vector<int> in_shape_;
};

class Flatten final : public Module {
 public:
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;

 private:
  std::vector<int> in_shape_;
};

class Sequential final : public Module {
 public:
  Sequential() = default;
  Sequential& add(ModulePtr m) {
    layers_.push_back(std::move(m));
    return *this;
  }
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;
  void collect_parameters(std::vector<Parameter*>& out) override;
  void init(Rng& rng) override;
  bool empty() const { return layers_.empty(); }

 private:
  std::vector<ModulePtr> layers_;
};

/// Two 3x3 conv-BN stages plus a projection shortcut when shape changes.
class BasicBlock final : public Module {
 public:
  BasicBlock(const std::string& name, int in_channels, int out_channels, int stride);
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;
  void collect_parameters(std::vector<Parameter*>& out) override;
  void init(Rng& rng) override;

 private:
  Sequential main_;
  Sequential shortcut_;  // empty means identity
  ReLU out_relu_;
};

/// MobileNetV2 inverted residual: expand 1x1 -> depthwise 3x3 -> project 1x1.
class InvertedResidual final : public Module {
 public:
  InvertedResidual(const std::string& name, int in_channels, int out_channels, int stride, int expand_ratio);
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;
  void collect_parameters(std::vector<Parameter*>& out) override;
  void init(Rng& rng) override;

 private:
  Sequential body_;
  bool residual_;
};

}  // namespace semfl::nn
