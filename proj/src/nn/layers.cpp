#include "semfl/nn/layers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/Dense>

#include "semfl/common/error.hpp"

namespace semfl::nn {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

void require_rank(const Tensor& x, std::size_t rank, const char* layer) {
  if (x.shape.size() != rank) {
    throw InvalidInputError(std::string(layer) + " expects a rank-" + std::to_string(rank) + " input, got " +
                            x.shape_string());
  }
}

Parameter make_param(std::string name, std::size_t n, bool trainable = true) {
  Parameter p;
  p.name = std::move(name);
  p.value.assign(n, 0.0);
  if (trainable) p.grad.assign(n, 0.0);
  p.trainable = trainable;
  return p;
}

void uniform_fill(std::vector<double>& v, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& x : v) x = dist(rng);
}

}  // namespace

// ---------------------------------------------------------------- Conv2d

Conv2d::Conv2d(std::string name, int in_channels, int out_channels, int kernel, int stride, int padding, int groups,
               bool bias)
    : in_(in_channels),
      out_(out_channels),
      k_(kernel),
      stride_(stride),
      pad_(padding),
      groups_(groups),
      has_bias_(bias) {
  if (groups < 1 || in_channels % groups != 0 || out_channels % groups != 0) {
    throw ConfigError("conv " + name + ": channels must be divisible by groups");
  }
  weight_ = make_param(name + ".weight",
                       static_cast<std::size_t>(out_) * static_cast<std::size_t>(in_ / groups_ * k_ * k_));
  if (has_bias_) bias_ = make_param(name + ".bias", static_cast<std::size_t>(out_));
}

void Conv2d::init(Rng& rng) {
  // He-uniform on fan-in; biases start at zero.
  double fan_in = static_cast<double>(in_ / groups_ * k_ * k_);
  uniform_fill(weight_.value, std::sqrt(6.0 / fan_in), rng);
  if (has_bias_) std::fill(bias_.value.begin(), bias_.value.end(), 0.0);
}

void Conv2d::collect_parameters(std::vector<Parameter*>& out) {
  out.push_back(&weight_);
  if (has_bias_) out.push_back(&bias_);
}

namespace {

// Output columns [lo, hi) whose input column ox*stride - pad + kx is in range.
std::pair<int, int> valid_columns(int out_w, int in_w, int stride, int pad, int kx) {
  int lo = pad - kx > 0 ? (pad - kx + stride - 1) / stride : 0;
  int top = in_w - 1 + pad - kx;
  int hi = top < 0 ? 0 : std::min(out_w, top / stride + 1);
  return {lo, std::max(lo, hi)};
}

}  // namespace

// im2col layout: per (sample, group) a K x P row-major block; row
// (ci, ky, kx) holds one shifted input plane, so W (Cout_g x K) times the
// block lands directly in NCHW order. Per-sample blocks stay cache-resident.
Tensor Conv2d::forward(const Tensor& x, Mode /*mode*/) {
  require_rank(x, 4, "Conv2d");
  if (x.dim(1) != in_) {
    throw InvalidInputError("Conv2d expects " + std::to_string(in_) + " channels, got " + x.shape_string());
  }
  const int N = x.dim(0), H = x.dim(2), W = x.dim(3);
  out_h_ = (H + 2 * pad_ - k_) / stride_ + 1;
  out_w_ = (W + 2 * pad_ - k_) / stride_ + 1;
  if (out_h_ <= 0 || out_w_ <= 0) throw InvalidInputError("Conv2d input too small: " + x.shape_string());
  in_shape_ = x.shape;

  const int cin_g = in_ / groups_, cout_g = out_ / groups_;
  const std::size_t K = static_cast<std::size_t>(cin_g * k_ * k_);
  const std::size_t P = static_cast<std::size_t>(out_h_ * out_w_);
  const std::size_t HW = static_cast<std::size_t>(H * W);
  cols_.resize(static_cast<std::size_t>(N) * static_cast<std::size_t>(groups_) * K * P);

  Tensor y({N, out_, out_h_, out_w_});
  for (int n = 0; n < N; ++n) {
    for (int g = 0; g < groups_; ++g) {
      double* block = cols_.data() + (static_cast<std::size_t>(n) * groups_ + static_cast<std::size_t>(g)) * K * P;
      double* row = block;
      for (int ci = 0; ci < cin_g; ++ci) {
        const double* plane = x.data.data() + (static_cast<std::size_t>(n) * in_ + static_cast<std::size_t>(g * cin_g + ci)) * HW;
        for (int ky = 0; ky < k_; ++ky) {
          for (int kx = 0; kx < k_; ++kx, row += P) {
            auto [lo, hi] = valid_columns(out_w_, W, stride_, pad_, kx);
            for (int oy = 0; oy < out_h_; ++oy) {
              double* dst = row + oy * out_w_;
              const int iy = oy * stride_ - pad_ + ky;
              if (iy < 0 || iy >= H) {
                std::fill_n(dst, out_w_, 0.0);
                continue;
              }
              const double* src = plane + iy * W - pad_ + kx;
              std::fill_n(dst, lo, 0.0);
              if (stride_ == 1) {
                std::copy(src + lo, src + hi, dst + lo);
              } else {
                for (int ox = lo; ox < hi; ++ox) dst[ox] = src[ox * stride_];
              }
              std::fill(dst + hi, dst + out_w_, 0.0);
            }
          }
        }
      }
      ConstMap col_mat(block, static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(P));
      ConstMap w(weight_.value.data() + static_cast<std::size_t>(g * cout_g) * K, cout_g, static_cast<Eigen::Index>(K));
      MutMap out(y.data.data() + (static_cast<std::size_t>(n) * out_ + static_cast<std::size_t>(g * cout_g)) * P, cout_g,
                 static_cast<Eigen::Index>(P));
      out.noalias() = w * col_mat;
      if (has_bias_) {
        for (int co = 0; co < cout_g; ++co) out.row(co).array() += bias_.value[static_cast<std::size_t>(g * cout_g + co)];
      }
    }
  }
  return y;
}

Tensor Conv2d::backward(const Tensor& grad_out) {
  const int N = in_shape_[0], H = in_shape_[2], W = in_shape_[3];
  const int cin_g = in_ / groups_, cout_g = out_ / groups_;
  const std::size_t K = static_cast<std::size_t>(cin_g * k_ * k_);
  const std::size_t P = static_cast<std::size_t>(out_h_ * out_w_);
  const std::size_t HW = static_cast<std::size_t>(H * W);
  Tensor dx;
  if (input_grad_) dx = Tensor(in_shape_);
  RowMat dcols(static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(P));

  for (int n = 0; n < N; ++n) {
    for (int g = 0; g < groups_; ++g) {
      const double* block = cols_.data() + (static_cast<std::size_t>(n) * groups_ + static_cast<std::size_t>(g)) * K * P;
      ConstMap col_mat(block, static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(P));
      ConstMap dy(grad_out.data.data() + (static_cast<std::size_t>(n) * out_ + static_cast<std::size_t>(g * cout_g)) * P,
                  cout_g, static_cast<Eigen::Index>(P));
      MutMap dw(weight_.grad.data() + static_cast<std::size_t>(g * cout_g) * K, cout_g, static_cast<Eigen::Index>(K));
      dw.noalias() += dy * col_mat.transpose();
      if (has_bias_) {
        // Plain loop: Eigen's vectorised sum over a Map peels by address, which
        // would make the rounding depend on where the buffer was allocated.
        for (int co = 0; co < cout_g; ++co) {
          const double* r = dy.row(co).data();
          double s = 0.0;
          for (std::size_t p = 0; p < P; ++p) s += r[p];
          bias_.grad[static_cast<std::size_t>(g * cout_g + co)] += s;
        }
      }
      if (!input_grad_) continue;

      ConstMap w(weight_.value.data() + static_cast<std::size_t>(g * cout_g) * K, cout_g, static_cast<Eigen::Index>(K));
      dcols.noalias() = w.transpose() * dy;
      const double* row = dcols.data();
      for (int ci = 0; ci < cin_g; ++ci) {
        double* plane = dx.data.data() + (static_cast<std::size_t>(n) * in_ + static_cast<std::size_t>(g * cin_g + ci)) * HW;
        for (int ky = 0; ky < k_; ++ky) {
          for (int kx = 0; kx < k_; ++kx, row += P) {
            auto [lo, hi] = valid_columns(out_w_, W, stride_, pad_, kx);
            for (int oy = 0; oy < out_h_; ++oy) {
              const int iy = oy * stride_ - pad_ + ky;
              if (iy < 0 || iy >= H) continue;
              const double* src = row + oy * out_w_;
              double* dst = plane + iy * W - pad_ + kx;
              for (int ox = lo; ox < hi; ++ox) dst[ox * stride_] += src[ox];
            }
          }
        }
      }
    }
  }
  return dx;
}

// ---------------------------------------------------------------- BatchNorm2d

BatchNorm2d::BatchNorm2d(std::string name, int channels, double momentum, double eps)
    : channels_(channels), momentum_(momentum), eps_(eps) {
  auto c = static_cast<std::size_t>(channels);
  gamma_ = make_param(name + ".weight", c);
  beta_ = make_param(name + ".bias", c);
  running_mean_ = make_param(name + ".running_mean", c, false);
  running_var_ = make_param(name + ".running_var", c, false);
}

void BatchNorm2d::init(Rng& /*rng*/) {
  std::fill(gamma_.value.begin(), gamma_.value.end(), 1.0);
  std::fill(beta_.value.begin(), beta_.value.end(), 0.0);
  std::fill(running_mean_.value.begin(), running_mean_.value.end(), 0.0);
  std::fill(running_var_.value.begin(), running_var_.value.end(), 1.0);
}

void BatchNorm2d::collect_parameters(std::vector<Parameter*>& out) {
  out.push_back(&gamma_);
  out.push_back(&beta_);
  out.push_back(&running_mean_);
  out.push_back(&running_var_);
}

Tensor BatchNorm2d::forward(const Tensor& x, Mode mode) {
  require_rank(x, 4, "BatchNorm2d");
  if (x.dim(1) != channels_) throw InvalidInputError("BatchNorm2d channel mismatch: " + x.shape_string());
  const int N = x.dim(0), C = channels_;
  const std::size_t S = static_cast<std::size_t>(x.dim(2) * x.dim(3));
  const double M = static_cast<double>(static_cast<std::size_t>(N) * S);
  shape_ = x.shape;
  last_mode_ = mode;
  Tensor y(x.shape);
  xhat_.assign(x.size(), 0.0);
  inv_std_.assign(static_cast<std::size_t>(C), 0.0);

  for (int c = 0; c < C; ++c) {
    double mean, var;
    auto cs = static_cast<std::size_t>(c);
    if (mode == Mode::kTrain) {
      double sum = 0.0;
      for (int n = 0; n < N; ++n) {
        const double* p = x.data.data() + (static_cast<std::size_t>(n) * C + cs) * S;
        for (std::size_t s = 0; s < S; ++s) sum += p[s];
      }
      mean = sum / M;
      double sq = 0.0;
      for (int n = 0; n < N; ++n) {
        const double* p = x.data.data() + (static_cast<std::size_t>(n) * C + cs) * S;
        for (std::size_t s = 0; s < S; ++s) sq += (p[s] - mean) * (p[s] - mean);
      }
      var = sq / M;
      double unbiased = M > 1.0 ? sq / (M - 1.0) : var;
      running_mean_.value[cs] = (1.0 - momentum_) * running_mean_.value[cs] + momentum_ * mean;
      running_var_.value[cs] = (1.0 - momentum_) * running_var_.value[cs] + momentum_ * unbiased;
    } else {
      mean = running_mean_.value[cs];
      var = running_var_.value[cs];
    }
    double inv = 1.0 / std::sqrt(var + eps_);
    inv_std_[cs] = inv;
    for (int n = 0; n < N; ++n) {
      std::size_t base = (static_cast<std::size_t>(n) * C + cs) * S;
      for (std::size_t s = 0; s < S; ++s) {
        double h = (x.data[base + s] - mean) * inv;
        xhat_[base + s] = h;
        y.data[base + s] = gamma_.value[cs] * h + beta_.value[cs];
      }
    }
  }
  return y;
}

Tensor BatchNorm2d::backward(const Tensor& grad_out) {
  const int N = shape_[0], C = channels_;
  const std::size_t S = static_cast<std::size_t>(shape_[2] * shape_[3]);
  const double M = static_cast<double>(static_cast<std::size_t>(N) * S);
  Tensor dx(shape_);
  for (int c = 0; c < C; ++c) {
    auto cs = static_cast<std::size_t>(c);
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (int n = 0; n < N; ++n) {
      std::size_t base = (static_cast<std::size_t>(n) * C + cs) * S;
      for (std::size_t s = 0; s < S; ++s) {
        sum_dy += grad_out.data[base + s];
        sum_dy_xhat += grad_out.data[base + s] * xhat_[base + s];
      }
    }
    gamma_.grad[cs] += sum_dy_xhat;
    beta_.grad[cs] += sum_dy;
    double g = gamma_.value[cs], inv = inv_std_[cs];
    for (int n = 0; n < N; ++n) {
      std::size_t base = (static_cast<std::size_t>(n) * C + cs) * S;
      for (std::size_t s = 0; s < S; ++s) {
        if (last_mode_ == Mode::kTrain) {
          dx.data[base + s] =
              g * inv / M * (M * grad_out.data[base + s] - sum_dy - xhat_[base + s] * sum_dy_xhat);
        } else {
          dx.data[base + s] = g * inv * grad_out.data[base + s];
        }
      }
    }
  }
  return dx;
}

// ---------------------------------------------------------------- Linear

Linear::Linear(std::string name, int in_features, int out_features, bool bias)
    : in_(in_features), out_(out_features), has_bias_(bias) {
  weight_ = make_param(name + ".weight", static_cast<std::size_t>(in_) * static_cast<std::size_t>(out_));
  if (has_bias_) bias_ = make_param(name + ".bias", static_cast<std::size_t>(out_));
}

void Linear::init(Rng& rng) {
  double bound = 1.0 / std::sqrt(static_cast<double>(in_));
  uniform_fill(weight_.value, bound, rng);
  if (has_bias_) uniform_fill(bias_.value, bound, rng);
}

void Linear::collect_parameters(std::vector<Parameter*>& out) {
  out.push_back(&weight_);
  if (has_bias_) out.push_back(&bias_);
}

Tensor Linear::forward(const Tensor& x, Mode /*mode*/) {
  if (x.shape.size() != 2 || x.dim(1) != in_) {
    throw InvalidInputError("Linear expects [N," + std::to_string(in_) + "], got " + x.shape_string());
  }
  input_ = x;
  const int N = x.dim(0);
  Tensor y({N, out_});
  ConstMap xin(x.data.data(), N, in_);
  ConstMap w(weight_.value.data(), out_, in_);
  MutMap out(y.data.data(), N, out_);
  out.noalias() = xin * w.transpose();
  if (has_bias_) {
    Eigen::Map<const Eigen::RowVectorXd> b(bias_.value.data(), out_);
    out.rowwise() += b;
  }
  return y;
}

Tensor Linear::backward(const Tensor& grad_out) {
  const int N = input_.dim(0);
  ConstMap dy(grad_out.data.data(), N, out_);
  ConstMap xin(input_.data.data(), N, in_);
  MutMap dw(weight_.grad.data(), out_, in_);
  dw.noalias() += dy.transpose() * xin;
  if (has_bias_) {
    Eigen::Map<Eigen::RowVectorXd> db(bias_.grad.data(), out_);
    for (int i = 0; i < N; ++i) db += dy.row(i);
  }
  Tensor dx({N, in_});
  ConstMap w(weight_.value.data(), out_, in_);
  MutMap dxm(dx.data.data(), N, in_);
  dxm.noalias() = dy * w;
  return dx;
}

// ---------------------------------------------------------------- ReLU

Tensor ReLU::forward(const Tensor& x, Mode /*mode*/) {
  shape_ = x.shape;
  Tensor y(x.shape);
  pass_.resize(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    double v = x.data[i];
    bool pass = v > 0.0 && (cap_ <= 0.0 || v < cap_);
    pass_[i] = pass;
    y.data[i] = v > 0.0 ? (cap_ > 0.0 ? std::min(v, cap_) : v) : 0.0;
  }
  return y;
}

Tensor ReLU::backward(const Tensor& grad_out) {
  Tensor dx(shape_);
  for (std::size_t i = 0; i < dx.size(); ++i) dx.data[i] = pass_[i] ? grad_out.data[i] : 0.0;
  return dx;
}

// ---------------------------------------------------------------- MaxPool2d

Tensor MaxPool2d::forward(const Tensor& x, Mode /*mode*/) {
  require_rank(x, 4, "MaxPool2d");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Ho = H / k_, Wo = W / k_;
  if (Ho == 0 || Wo == 0) throw InvalidInputError("MaxPool2d input too small: " + x.shape_string());
  in_shape_ = x.shape;
  Tensor y({N, C, Ho, Wo});
  argmax_.resize(y.size());
  std::size_t o = 0;
  for (int nc = 0; nc < N * C; ++nc) {
    const std::size_t base = static_cast<std::size_t>(nc) * static_cast<std::size_t>(H * W);
    for (int oy = 0; oy < Ho; ++oy)
      for (int ox = 0; ox < Wo; ++ox, ++o) {
        std::size_t best = base + static_cast<std::size_t>(oy * k_ * W + ox * k_);
        for (int dy = 0; dy < k_; ++dy)
          for (int dx = 0; dx < k_; ++dx) {
            std::size_t idx = base + static_cast<std::size_t>((oy * k_ + dy) * W + ox * k_ + dx);
            if (x.data[idx] > x.data[best]) best = idx;
          }
        argmax_[o] = best;
        y.data[o] = x.data[best];
      }
  }
  return y;
}

Tensor MaxPool2d::backward(const Tensor& grad_out) {
  Tensor dx(in_shape_);
  for (std::size_t o = 0; o < argmax_.size(); ++o) dx.data[argmax_[o]] += grad_out.data[o];
  return dx;
}

// ---------------------------------------------------------------- GlobalAvgPool

Tensor GlobalAvgPool::forward(const Tensor& x, Mode /*mode*/) {
  require_rank(x, 4, "GlobalAvgPool");
  in_shape_ = x.shape;
  const int N = x.dim(0), C = x.dim(1);
  const std::size_t S = static_cast<std::size_t>(x.dim(2) * x.dim(3));
  Tensor y({N, C});
  for (std::size_t i = 0; i < y.size(); ++i) {
    double sum = 0.0;
    for (std::size_t s = 0; s < S; ++s) sum += x.data[i * S + s];
    y.data[i] = sum / static_cast<double>(S);
  }
  return y;
}

Tensor GlobalAvgPool::backward(const Tensor& grad_out) {
  Tensor dx(in_shape_);
  const std::size_t S = static_cast<std::size_t>(in_shape_[2] * in_shape_[3]);
  for (std::size_t i = 0; i < grad_out.size(); ++i) {
    double g = grad_out.data[i] / static_cast<double>(S);
    for (std::size_t s = 0; s < S; ++s) dx.data[i * S + s] = g;
  }
  return dx;
}

// ---------------------------------------------------------------- Flatten

Tensor Flatten::forward(const Tensor& x, Mode /*mode*/) {
  in_shape_ = x.shape;
  Tensor y;
  y.shape = {x.batch(), static_cast<int>(x.row_size())};
  y.data = x.data;
  return y;
}

Tensor Flatten::backward(const Tensor& grad_out) {
  Tensor dx;
  dx.shape = in_shape_;
  dx.data = grad_out.data;
  return dx;
}

// ---------------------------------------------------------------- Sequential

Tensor Sequential::forward(const Tensor& x, Mode mode) {
  Tensor h = x;
  for (auto& layer : layers_) h = layer->forward(h, mode);
  return h;
}

Tensor Sequential::backward(const Tensor& grad_out) {
  Tensor g = grad_out;
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = (*it)->backward(g);
  return g;
}

void Sequential::collect_parameters(std::vector<Parameter*>& out) {
  for (auto& layer : layers_) layer->collect_parameters(out);
}

void Sequential::init(Rng& rng) {
  for (auto& layer : layers_) layer->init(rng);
}

// ---------------------------------------------------------------- BasicBlock

BasicBlock::BasicBlock(const std::string& name, int in_channels, int out_channels, int stride) {
  main_.add(std::make_unique<Conv2d>(name + ".conv1", in_channels, out_channels, 3, stride, 1, 1, false))
      .add(std::make_unique<BatchNorm2d>(name + ".bn1", out_channels))
      .add(std::make_unique<ReLU>())
      .add(std::make_unique<Conv2d>(name + ".conv2", out_channels, out_channels, 3, 1, 1, 1, false))
      .add(std::make_unique<BatchNorm2d>(name + ".bn2", out_channels));
  if (stride != 1 || in_channels != out_channels) {
    shortcut_.add(std::make_unique<Conv2d>(name + ".shortcut", in_channels, out_channels, 1, stride, 0, 1, false))
        .add(std::make_unique<BatchNorm2d>(name + ".shortcut_bn", out_channels));
  }
}

Tensor BasicBlock::forward(const Tensor& x, Mode mode) {
  Tensor main = main_.forward(x, mode);
  Tensor skip = shortcut_.empty() ? x : shortcut_.forward(x, mode);
  for (std::size_t i = 0; i < main.size(); ++i) main.data[i] += skip.data[i];
  return out_relu_.forward(main, mode);
}

Tensor BasicBlock::backward(const Tensor& grad_out) {
  Tensor g = out_relu_.backward(grad_out);
  Tensor dx = main_.backward(g);
  Tensor dskip = shortcut_.empty() ? g : shortcut_.backward(g);
  for (std::size_t i = 0; i < dx.size(); ++i) dx.data[i] += dskip.data[i];
  return dx;
}

void BasicBlock::collect_parameters(std::vector<Parameter*>& out) {
  main_.collect_parameters(out);
  shortcut_.collect_parameters(out);
}

void BasicBlock::init(Rng& rng) {
  main_.init(rng);
  shortcut_.init(rng);
}

// ---------------------------------------------------------------- InvertedResidual

InvertedResidual::InvertedResidual(const std::string& name, int in_channels, int out_channels, int stride,
                                   int expand_ratio)
    : residual_(stride == 1 && in_channels == out_channels) {
  int hidden = in_channels * expand_ratio;
  if (expand_ratio != 1) {
    body_.add(std::make_unique<Conv2d>(name + ".expand", in_channels, hidden, 1, 1, 0, 1, false))
        .add(std::make_unique<BatchNorm2d>(name + ".expand_bn", hidden))
        .add(std::make_unique<ReLU>(6.0));
  }
  body_.add(std::make_unique<Conv2d>(name + ".depthwise", hidden, hidden, 3, stride, 1, hidden, false))
      .add(std::make_unique<BatchNorm2d>(name + ".depthwise_bn", hidden))
      .add(std::make_unique<ReLU>(6.0))
      .add(std::make_unique<Conv2d>(name + ".project", hidden, out_channels, 1, 1, 0, 1, false))
      .add(std::make_unique<BatchNorm2d>(name + ".project_bn", out_channels));
}

Tensor InvertedResidual::forward(const Tensor& x, Mode mode) {
  Tensor y = body_.forward(x, mode);
  if (residual_)
    for (std::size_t i = 0; i < y.size(); ++i) y.data[i] += x.data[i];
  return y;
}

Tensor InvertedResidual::backward(const Tensor& grad_out) {
  Tensor dx = body_.backward(grad_out);
  if (residual_)
    for (std::size_t i = 0; i < dx.size(); ++i) dx.data[i] += grad_out.data[i];
  return dx;
}

void InvertedResidual::collect_parameters(std::vector<Parameter*>& out) { body_.collect_parameters(out); }

void InvertedResidual::init(Rng& rng) { body_.init(rng); }

}  // namespace semfl::nn
