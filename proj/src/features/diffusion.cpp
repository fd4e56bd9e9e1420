// Compact latent-diffusion feature provider.
//
// VAE encoder: 3 -> 32 -> 64 (s2) -> 64 (s2) -> 64 (s2) -> 1x1 to 8 moments,
// the first 4 are the latent mean (8x spatial downsampling).
// U-Net: conv_in 4 -> 64; "down" = ResBlock 64 -> 128 then stride-2 conv;
// "mid" = ResBlock 128 -> 256 plus cross-attention to the prompt context;
// "up" = nearest 2x upsample, concat with the pre-downsample skip, ResBlock
// 384 -> 128. Every ResBlock receives a sinusoidal timestep embedding.
// Text encoder: hashed word tokens, one pre-LN transformer layer (width 768,
// 12 heads, MLP 1536, causal mask), final LayerNorm, end-of-sequence pooling.

#include <cctype>
#include <cmath>
#include <limits>
#include <numbers>

#include "semfl/common/binary_io.hpp"
#include "semfl/common/error.hpp"
#include "semfl/common/hash.hpp"
#include "semfl/common/rng.hpp"
#include "semfl/features/provider.hpp"
#include "semfl/nn/layers.hpp"

namespace semfl::features {
namespace {

using nn::Conv2d;
using nn::Mode;
using nn::Tensor;

constexpr int kLatentChannels = 4;
constexpr int kTimeDim = 64;
constexpr int kTimeHidden = 128;
constexpr int kTextWidth = 768;
constexpr int kTextHeads = 12;
constexpr int kTextMlp = 1536;
constexpr int kVocab = 49408;
constexpr int kBos = 49406;
constexpr int kEos = 49407;
constexpr int kMaxTokens = 77;
constexpr int kAttnDim = 64;

Tensor relu(Tensor t) {
  for (auto& v : t.data) v = v > 0.0 ? v : 0.0;
  return t;
}

Tensor add(Tensor a, const Tensor& b) {
  for (std::size_t i = 0; i < a.size(); ++i) a.data[i] += b.data[i];
  return a;
}

Tensor upsample2(const Tensor& x) {
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor y({N, C, 2 * H, 2 * W});
  for (int nc = 0; nc < N * C; ++nc)
    for (int yy = 0; yy < 2 * H; ++yy)
      for (int xx = 0; xx < 2 * W; ++xx)
        y.data[(static_cast<std::size_t>(nc) * 2 * H + yy) * 2 * W + xx] =
            x.data[(static_cast<std::size_t>(nc) * H + yy / 2) * W + xx / 2];
  return y;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  const int N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1);
  const std::size_t P = static_cast<std::size_t>(a.dim(2)) * static_cast<std::size_t>(a.dim(3));
  Tensor y({N, Ca + Cb, a.dim(2), a.dim(3)});
  for (int n = 0; n < N; ++n) {
    std::copy_n(a.data.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(n * Ca) * P), Ca * P,
                y.data.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(n * (Ca + Cb)) * P));
    std::copy_n(b.data.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(n * Cb) * P), Cb * P,
                y.data.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(n * (Ca + Cb) + Ca) * P));
  }
  return y;
}

Matrix layer_norm(const Matrix& x) {
  Matrix y = x;
  for (Eigen::Index i = 0; i < y.rows(); ++i) {
    double m = y.row(i).mean();
    y.row(i).array() -= m;
    double var = y.row(i).squaredNorm() / static_cast<double>(y.cols());
    y.row(i) /= std::sqrt(var + 1e-5);
  }
  return y;
}

void softmax_rows(Matrix& s) {
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    double m = s.row(i).maxCoeff();
    s.row(i) = (s.row(i).array() - m).exp().matrix();
    s.row(i) /= s.row(i).sum();
  }
}

Matrix seeded_gaussian(Eigen::Index rows, Eigen::Index cols, double scale, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> g(0.0, scale);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
  return m;
}

// Dense layer held as an nn::Linear so its weights join the parameter list.
Matrix dense(nn::Linear& layer, const Matrix& x) {
  Tensor t({static_cast<int>(x.rows()), static_cast<int>(x.cols())});
  Eigen::Map<Matrix>(t.data.data(), x.rows(), x.cols()) = x;
  Tensor y = layer.forward(t, Mode::kEval);
  return Eigen::Map<Matrix>(y.data.data(), x.rows(), layer.out_features());
}

class ResBlock {
 public:
  ResBlock(const std::string& name, int in, int out)
      : conv1_(name + ".conv1", in, out, 3, 1, 1),
        conv2_(name + ".conv2", out, out, 3, 1, 1),
        time_(name + ".time", kTimeHidden, out),
        skip_(in != out ? std::make_unique<Conv2d>(name + ".skip", in, out, 1) : nullptr) {}

  void collect(std::vector<nn::Parameter*>& out) {
    conv1_.collect_parameters(out);
    conv2_.collect_parameters(out);
    time_.collect_parameters(out);
    if (skip_) skip_->collect_parameters(out);
  }
  void init(Rng& rng) {
    conv1_.init(rng);
    conv2_.init(rng);
    time_.init(rng);
    if (skip_) skip_->init(rng);
  }

  Tensor forward(const Tensor& x, const Matrix& temb) {
    Tensor h = relu(conv1_.forward(x, Mode::kEval));
    Matrix shift = dense(time_, temb);  // N x out
    const int N = h.dim(0), C = h.dim(1);
    const std::size_t P = static_cast<std::size_t>(h.dim(2)) * static_cast<std::size_t>(h.dim(3));
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        double* p = h.data.data() + (static_cast<std::size_t>(n) * C + c) * P;
        for (std::size_t i = 0; i < P; ++i) p[i] += shift(n, c);
      }
    h = conv2_.forward(relu(std::move(h)), Mode::kEval);
    Tensor s = skip_ ? skip_->forward(x, Mode::kEval) : x;
    h = add(std::move(h), s);
    for (auto& v : h.data) v *= std::numbers::sqrt2 / 2.0;
    return h;
  }

 private:
  Conv2d conv1_, conv2_;
  nn::Linear time_;
  std::unique_ptr<Conv2d> skip_;
};

class DiffusionProvider final : public FeatureProvider {
 public:
  explicit DiffusionProvider(const DiffusionOptions& opts)
      : seed_(opts.seed),
        schedule_(NoiseSchedule::scaled_linear()),
        vae1_("vae.conv1", 3, 32, 3, 1, 1),
        vae2_("vae.conv2", 32, 64, 3, 2, 1),
        vae3_("vae.conv3", 64, 64, 3, 2, 1),
        vae4_("vae.conv4", 64, 64, 3, 2, 1),
        vae_out_("vae.moments", 64, 2 * kLatentChannels, 1),
        time1_("unet.time1", kTimeDim, kTimeHidden),
        time2_("unet.time2", kTimeHidden, kTimeHidden),
        conv_in_("unet.conv_in", kLatentChannels, 64, 3, 1, 1),
        down_block_("unet.down", 64, 128),
        downsample_("unet.downsample", 128, 128, 3, 2, 1),
        mid_block_("unet.mid", 128, 256),
        attn_q_("unet.attn.q", 256, kAttnDim, false),
        attn_k_("unet.attn.k", kTextWidth, kAttnDim, false),
        attn_v_("unet.attn.v", kTextWidth, kAttnDim, false),
        attn_out_("unet.attn.out", kAttnDim, 256),
        up_block_("unet.up", 256 + 128, 128) {
    Rng rng(derive_seed(seed_, {hash_string("diffusion-weights")}));
    for_each_module([&](auto& m) { m.init(rng); });
    if (!opts.weights.empty()) {
      auto params = parameters();
      std::size_t total = 0;
      for (auto* p : params) total += p->value.size();
      auto values = io::read_array<float>(opts.weights, total);
      std::size_t off = 0;
      for (auto* p : params)
        for (auto& v : p->value) v = values[off++];
      weights_desc_ = "file sha256:" + sha256_file(opts.weights);
    }
    build_text_encoder();
    empty_context_ = encode_tokens(tokenize(""));
  }

  ProviderKind kind() const override { return ProviderKind::kDiffusion; }
  std::string id() const override { return "diffusion-compact-v1"; }
  const NoiseSchedule& schedule() const override { return schedule_; }

  nlohmann::json describe() const override {
    return {{"id", id()},
            {"weights", weights_desc_},
            {"seed", seed_},
            {"latent_channels", kLatentChannels},
            {"downsample", 8},
            {"resize", "none"},
            {"text_width", kTextWidth},
            {"conditioning", "empty prompt"},
            {"layers", {{"down", 128}, {"mid", 256}, {"up", 128}}}};
  }

  int layer_width(const std::string& layer_id) const override {
    if (layer_id == "down") return 128;
    if (layer_id == "mid") return 256;
    if (layer_id == "up") return 128;
    throw ConfigError("diffusion provider has no layer '" + layer_id + "' (known: down, mid, up)");
  }

  Tensor encode_latent(const Tensor& images, double gamma) override {
    if (images.shape.size() != 4 || images.dim(1) != 3) {
      throw InvalidInputError("encode_latent expects [N, 3, H, W], got " + images.shape_string());
    }
    if (images.dim(2) % 8 != 0 || images.dim(3) % 8 != 0) {
      throw InvalidInputError("image sides must be multiples of 8, got " + images.shape_string());
    }
    Tensor x(images.shape);
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (!std::isfinite(images.data[i])) throw InvalidInputError("non-finite pixel value");
      x.data[i] = 2.0 * images.data[i] - 1.0;
    }
    Tensor h = relu(vae1_.forward(x, Mode::kEval));
    h = relu(vae2_.forward(h, Mode::kEval));
    h = relu(vae3_.forward(h, Mode::kEval));
    h = relu(vae4_.forward(h, Mode::kEval));
    Tensor moments = vae_out_.forward(h, Mode::kEval);
    const int N = moments.dim(0), hh = moments.dim(2), ww = moments.dim(3);
    const std::size_t P = static_cast<std::size_t>(hh) * static_cast<std::size_t>(ww);
    Tensor latent({N, kLatentChannels, hh, ww});
    for (int n = 0; n < N; ++n)
      for (std::size_t i = 0; i < kLatentChannels * P; ++i)
        latent.data[static_cast<std::size_t>(n) * kLatentChannels * P + i] =
            gamma * moments.data[static_cast<std::size_t>(n) * 2 * kLatentChannels * P + i];
    return latent;
  }

  std::vector<Tensor> unet_features(const Tensor& noisy_latent, int timestep,
                                    const std::vector<std::string>& layer_ids) override {
    for (const auto& id : layer_ids) layer_width(id);
    if (noisy_latent.shape.size() != 4 || noisy_latent.dim(1) != kLatentChannels) {
      throw InvalidInputError("U-Net expects [N, 4, h, w], got " + noisy_latent.shape_string());
    }
    if (noisy_latent.dim(2) % 2 != 0 || noisy_latent.dim(3) % 2 != 0) {
      throw InvalidInputError("latent sides must be even");
    }
    const int N = noisy_latent.dim(0);
    Matrix temb = time_embedding(timestep, N);

    Tensor h0 = conv_in_.forward(noisy_latent, Mode::kEval);
    Tensor skip = down_block_.forward(h0, temb);
    Tensor down = downsample_.forward(skip, Mode::kEval);
    Tensor mid = mid_block_.forward(down, temb);
    mid = add(std::move(mid), cross_attention(mid));
    Tensor up = up_block_.forward(concat_channels(upsample2(mid), skip), temb);

    std::vector<Tensor> out;
    for (const auto& id : layer_ids) out.push_back(id == "down" ? down : id == "mid" ? mid : up);
    return out;
  }

  Vector text_embed(const std::string& prompt, int /*class_index*/) override {
    Matrix hidden = encode_tokens(tokenize(prompt));
    return hidden.row(hidden.rows() - 1).transpose();
  }
  int text_dim() const override { return kTextWidth; }

 private:
  template <typename F>
  void for_each_module(F&& f) {
    f(vae1_);
    f(vae2_);
    f(vae3_);
    f(vae4_);
    f(vae_out_);
    f(time1_);
    f(time2_);
    f(conv_in_);
    f(down_block_);
    f(downsample_);
    f(mid_block_);
    f(attn_q_);
    f(attn_k_);
    f(attn_v_);
    f(attn_out_);
    f(up_block_);
  }

  std::vector<nn::Parameter*> parameters() {
    std::vector<nn::Parameter*> out;
    auto collect = [&](auto& m) {
      if constexpr (requires { m.collect(out); }) {
        m.collect(out);
      } else {
        m.collect_parameters(out);
      }
    };
    for_each_module(collect);
    return out;
  }

  Matrix time_embedding(int t, int n) {
    Matrix e(1, kTimeDim);
    const int half = kTimeDim / 2;
    for (int i = 0; i < half; ++i) {
      double freq = std::exp(-std::log(10000.0) * i / half);
      e(0, i) = std::sin(t * freq);
      e(0, half + i) = std::cos(t * freq);
    }
    Matrix h = dense(time1_, e);
    h = h.cwiseMax(0.0);
    h = dense(time2_, h);
    return h.replicate(n, 1);
  }

  // Spatial positions attend over the prompt context tokens.
  Tensor cross_attention(const Tensor& x) {
    const int N = x.dim(0), C = x.dim(1);
    const int P = x.dim(2) * x.dim(3);
    Matrix keys = dense(attn_k_, empty_context_);
    Matrix values = dense(attn_v_, empty_context_);
    Tensor out(x.shape);
    for (int n = 0; n < N; ++n) {
      Matrix tokens(P, C);
      for (int c = 0; c < C; ++c)
        for (int p = 0; p < P; ++p) tokens(p, c) = x.data[(static_cast<std::size_t>(n) * C + c) * P + p];
      Matrix scores = dense(attn_q_, tokens) * keys.transpose() / std::sqrt(static_cast<double>(kAttnDim));
      softmax_rows(scores);
      Matrix o = dense(attn_out_, scores * values);
      for (int c = 0; c < C; ++c)
        for (int p = 0; p < P; ++p) out.data[(static_cast<std::size_t>(n) * C + c) * P + p] = o(p, c);
    }
    return out;
  }

  // ---- text encoder

  static std::vector<int> tokenize(const std::string& prompt) {
    std::vector<int> ids{kBos};
    std::string word;
    auto flush = [&] {
      if (!word.empty() && ids.size() < kMaxTokens - 1) {
        ids.push_back(static_cast<int>(hash_string(word) % static_cast<std::uint64_t>(kBos - 1)) + 1);
      }
      word.clear();
    };
    for (unsigned char c : prompt) {
      if (std::isalnum(c)) {
        word.push_back(static_cast<char>(std::tolower(c)));
      } else {
        flush();
      }
    }
    flush();
    ids.push_back(kEos);
    return ids;
  }

  void build_text_encoder() {
    const double s = 1.0 / std::sqrt(static_cast<double>(kTextWidth));
    wq_ = seeded_gaussian(kTextWidth, kTextWidth, s, derive_seed(seed_, {hash_string("text.wq")}));
    wk_ = seeded_gaussian(kTextWidth, kTextWidth, s, derive_seed(seed_, {hash_string("text.wk")}));
    wv_ = seeded_gaussian(kTextWidth, kTextWidth, s, derive_seed(seed_, {hash_string("text.wv")}));
    wo_ = seeded_gaussian(kTextWidth, kTextWidth, s, derive_seed(seed_, {hash_string("text.wo")}));
    w1_ = seeded_gaussian(kTextWidth, kTextMlp, s, derive_seed(seed_, {hash_string("text.w1")}));
    w2_ = seeded_gaussian(kTextMlp, kTextWidth, 1.0 / std::sqrt(static_cast<double>(kTextMlp)),
                          derive_seed(seed_, {hash_string("text.w2")}));
  }

  Matrix embed_tokens(const std::vector<int>& ids) const {
    Matrix x(static_cast<Eigen::Index>(ids.size()), kTextWidth);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      auto tok = static_cast<std::uint64_t>(ids[i] % kVocab);
      x.row(static_cast<Eigen::Index>(i)) =
          seeded_gaussian(1, kTextWidth, 0.02, derive_seed(seed_, {hash_string("text.token"), tok})) +
          seeded_gaussian(1, kTextWidth, 0.01, derive_seed(seed_, {hash_string("text.position"), i}));
    }
    return x;
  }

  Matrix encode_tokens(const std::vector<int>& ids) const {
    Matrix x = embed_tokens(ids);
    const Eigen::Index L = x.rows();
    const int head = kTextWidth / kTextHeads;
    Matrix h = layer_norm(x);
    Matrix q = h * wq_, k = h * wk_, v = h * wv_;
    Matrix attn(L, kTextWidth);
    for (int hd = 0; hd < kTextHeads; ++hd) {
      Matrix s = q.middleCols(hd * head, head) * k.middleCols(hd * head, head).transpose() /
                 std::sqrt(static_cast<double>(head));
      for (Eigen::Index i = 0; i < L; ++i)
        for (Eigen::Index j = i + 1; j < L; ++j) s(i, j) = -std::numeric_limits<double>::infinity();
      softmax_rows(s);
      attn.middleCols(hd * head, head) = s * v.middleCols(hd * head, head);
    }
    x += attn * wo_;
    Matrix m = layer_norm(x) * w1_;
    m = m.unaryExpr([](double z) { return 0.5 * z * (1.0 + std::erf(z / std::numbers::sqrt2)); });
    x += m * w2_;
    return layer_norm(x);
  }

  std::uint64_t seed_;
  NoiseSchedule schedule_;
  std::string weights_desc_ = "seeded-random";
  Conv2d vae1_, vae2_, vae3_, vae4_, vae_out_;
  nn::Linear time1_, time2_;
  Conv2d conv_in_;
  ResBlock down_block_;
  Conv2d downsample_;
  ResBlock mid_block_;
  nn::Linear attn_q_, attn_k_, attn_v_, attn_out_;
  ResBlock up_block_;
  Matrix wq_, wk_, wv_, wo_, w1_, w2_;
  Matrix empty_context_;
};

}  // namespace

std::unique_ptr<FeatureProvider> make_diffusion_provider(const DiffusionOptions& options) {
  return std::make_unique<DiffusionProvider>(options);
}

}  // namespace semfl::features
