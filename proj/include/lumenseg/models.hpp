#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "nn.hpp"

namespace lumenseg {

enum class Architecture { unet_bn, res_unet, fcn8 };

inline std::string to_string(Architecture a) {
  switch (a) {
    case Architecture::unet_bn: return "unet_bn";
    case Architecture::res_unet: return "res_unet";
    case Architecture::fcn8: return "fcn8";
  }
  return "?";
}

inline Architecture architecture_from_string(const std::string& s) {
  if (s == "unet_bn" || s == "unet") return Architecture::unet_bn;
  if (s == "res_unet") return Architecture::res_unet;
  if (s == "fcn8") return Architecture::fcn8;
  throw SpecError("unknown architecture '" + s + "'");
}

// Two 3x3 convolutions, each followed by batch normalisation and a rectifier.
struct ConvBlockSpec {
  int in_channels = 1;
  int filters = 64;
  int kernel = 3;
  bool batch_norm = true;
};

enum class IdentityMap { pass_through, projection };

// y = h(x) + F(x), block output f(y) = relu(y). F is the conv block without its last
// rectifier; h is the identity or a 1x1 conv + batch-norm projection when widths differ.
struct ResidualBlockSpec {
  ConvBlockSpec inner;
  IdentityMap identity_map = IdentityMap::pass_through;

  static ResidualBlockSpec for_widths(int in_channels, int filters) {
    ResidualBlockSpec s;
    s.inner.in_channels = in_channels;
    s.inner.filters = filters;
    s.identity_map = in_channels == filters ? IdentityMap::pass_through : IdentityMap::projection;
    return s;
  }
};

struct NetworkSpec {
  Architecture kind = Architecture::res_unet;
  int depth = 4;
  int base_filters = 64;
  int in_channels = 1;
  int out_channels = 1;
  int input_size = 256;

  // Number of 2x downsamplings between input and the coarsest feature map.
  int downsamplings() const { return kind == Architecture::fcn8 ? 3 : depth; }

  int filters_at(int level) const { return base_filters << level; }

  void validate() const {
    if (depth < 1 || depth > 8) throw SpecError("depth must be in [1, 8]");
    if (base_filters < 1) throw SpecError("base_filters must be positive");
    if (in_channels != 1 && in_channels != 3) throw SpecError("in_channels must be 1 or 3");
    if (out_channels != 1) throw SpecError("out_channels must be 1 (binary mask head)");
    const int stride = 1 << downsamplings();
    if (input_size <= 0 || input_size % stride != 0) {
      throw SpecError("input_size " + std::to_string(input_size) + " is not divisible by " +
                      std::to_string(stride));
    }
  }

  bool operator==(const NetworkSpec&) const = default;
};

// Records the shape of named intermediate activations during a forward pass.
struct ForwardTrace {
  std::vector<std::pair<std::string, nn::Shape>> entries;
  void add(std::string name, const nn::Var& v) { entries.emplace_back(std::move(name), v->value.shape()); }
};

namespace layers {

// Deterministic uniform draw in [-limit, limit).
inline float uniform(std::mt19937_64& rng, float limit) {
  const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  return static_cast<float>((2.0 * u - 1.0) * limit);
}

struct Conv {
  nn::Parameter weight;
  nn::Parameter bias;

  Conv() = default;
  Conv(const std::string& name, int cin, int cout, int k, std::mt19937_64& rng)
      : weight(name + ".weight", {cout, cin, k, k}), bias(name + ".bias", {1, 1, 1, cout}) {
    const float limit = std::sqrt(6.0f / static_cast<float>(cin * k * k));
    for (auto& w : weight.value.values()) w = uniform(rng, limit);
  }

  nn::Var operator()(nn::Tape& tape, const nn::Var& x) { return nn::conv2d(tape, x, weight, bias); }
  void collect(std::vector<nn::Parameter*>& out) { out.push_back(&weight), out.push_back(&bias); }
  void collect_buffers(std::vector<nn::Tensor*>&) {}
};

struct UpConv {
  nn::Parameter weight;
  nn::Parameter bias;

  UpConv() = default;
  UpConv(const std::string& name, int cin, int cout, std::mt19937_64& rng)
      : weight(name + ".weight", {cin, cout, 2, 2}), bias(name + ".bias", {1, 1, 1, cout}) {
    const float limit = std::sqrt(6.0f / static_cast<float>(cin));
    for (auto& w : weight.value.values()) w = uniform(rng, limit);
  }

  nn::Var operator()(nn::Tape& tape, const nn::Var& x) {
    return nn::conv_transpose2x2(tape, x, weight, bias);
  }
  void collect(std::vector<nn::Parameter*>& out) { out.push_back(&weight), out.push_back(&bias); }
  void collect_buffers(std::vector<nn::Tensor*>&) {}
};

struct BatchNorm {
  nn::BatchNormState state;

  BatchNorm() = default;
  BatchNorm(const std::string& name, int channels) {
    state.gamma = nn::Parameter(name + ".gamma", {1, 1, 1, channels});
    state.beta = nn::Parameter(name + ".beta", {1, 1, 1, channels});
    state.gamma.value.fill(1.0f);
    state.running_mean = nn::Tensor({1, 1, 1, channels});
    state.running_var = nn::Tensor({1, 1, 1, channels}, 1.0f);
  }

  nn::Var operator()(nn::Tape& tape, const nn::Var& x) { return nn::batch_norm(tape, x, state); }
  void collect(std::vector<nn::Parameter*>& out) {
    out.push_back(&state.gamma), out.push_back(&state.beta);
  }
  void collect_buffers(std::vector<nn::Tensor*>& out) {
    out.push_back(&state.running_mean), out.push_back(&state.running_var);
  }
  void zero() {
    state.gamma.value.fill(0.0f);
    state.beta.value.fill(0.0f);
  }
};

class ConvBlock {
 public:
  ConvBlock() = default;
  ConvBlock(const std::string& name, const ConvBlockSpec& spec, std::mt19937_64& rng)
      : spec_(spec),
        conv1_(name + ".conv1", spec.in_channels, spec.filters, spec.kernel, rng),
        bn1_(name + ".bn1", spec.filters),
        conv2_(name + ".conv2", spec.filters, spec.filters, spec.kernel, rng),
        bn2_(name + ".bn2", spec.filters) {}

  nn::Var operator()(nn::Tape& tape, const nn::Var& x) {
    auto h = nn::relu(tape, bn1_(tape, conv1_(tape, x)));
    return nn::relu(tape, bn2_(tape, conv2_(tape, h)));
  }

  const ConvBlockSpec& spec() const { return spec_; }
  int out_channels() const { return spec_.filters; }

  void collect(std::vector<nn::Parameter*>& out) {
    conv1_.collect(out), bn1_.collect(out), conv2_.collect(out), bn2_.collect(out);
  }
  void collect_buffers(std::vector<nn::Tensor*>& out) {
    bn1_.collect_buffers(out), bn2_.collect_buffers(out);
  }

 private:
  ConvBlockSpec spec_;
  Conv conv1_;
  BatchNorm bn1_;
  Conv conv2_;
  BatchNorm bn2_;
};

class ResidualBlock {
 public:
  ResidualBlock() = default;
  ResidualBlock(const std::string& name, const ResidualBlockSpec& spec, std::mt19937_64& rng)
      : spec_(spec),
        conv1_(name + ".conv1", spec.inner.in_channels, spec.inner.filters, spec.inner.kernel, rng),
        bn1_(name + ".bn1", spec.inner.filters),
        conv2_(name + ".conv2", spec.inner.filters, spec.inner.filters, spec.inner.kernel, rng),
        bn2_(name + ".bn2", spec.inner.filters) {
    if (spec.identity_map == IdentityMap::projection) {
      proj_ = Conv(name + ".proj", spec.inner.in_channels, spec.inner.filters, 1, rng);
      proj_bn_ = BatchNorm(name + ".proj_bn", spec.inner.filters);
    } else if (spec.inner.in_channels != spec.inner.filters) {
      throw SpecError(name + ": pass-through identity needs equal input and output widths");
    }
  }

  // F(x)
  nn::Var residual(nn::Tape& tape, const nn::Var& x) {
    auto h = nn::relu(tape, bn1_(tape, conv1_(tape, x)));
    return bn2_(tape, conv2_(tape, h));
  }

  // h(x)
  nn::Var identity(nn::Tape& tape, const nn::Var& x) {
    if (spec_.identity_map == IdentityMap::pass_through) return x;
    return proj_bn_(tape, proj_(tape, x));
  }

  // x_{i+1} = f(h(x) + F(x))
  nn::Var operator()(nn::Tape& tape, const nn::Var& x) {
    return nn::relu(tape, nn::add(tape, identity(tape, x), residual(tape, x)));
  }

  // Zeroes every parameter of F so that the block reduces to f(h(x)).
  void zero_residual_branch() {
    for (auto* c : {&conv1_, &conv2_}) {
      c->weight.value.fill(0.0f);
      c->bias.value.fill(0.0f);
    }
    bn1_.zero();
    bn2_.zero();
  }

  const ResidualBlockSpec& spec() const { return spec_; }
  int out_channels() const { return spec_.inner.filters; }

  void collect(std::vector<nn::Parameter*>& out) {
    conv1_.collect(out), bn1_.collect(out), conv2_.collect(out), bn2_.collect(out);
    if (spec_.identity_map == IdentityMap::projection) proj_.collect(out), proj_bn_.collect(out);
  }
  void collect_buffers(std::vector<nn::Tensor*>& out) {
    bn1_.collect_buffers(out), bn2_.collect_buffers(out);
    if (spec_.identity_map == IdentityMap::projection) proj_bn_.collect_buffers(out);
  }

 private:
  ResidualBlockSpec spec_;
  Conv conv1_;
  BatchNorm bn1_;
  Conv conv2_;
  BatchNorm bn2_;
  Conv proj_;
  BatchNorm proj_bn_;
};

}  // namespace layers

namespace detail {

class Body {
 public:
  virtual ~Body() = default;
  virtual nn::Var forward(nn::Tape& tape, const nn::Var& x, ForwardTrace* trace) = 0;
  virtual void collect(std::vector<nn::Parameter*>& out) = 0;
  virtual void collect_buffers(std::vector<nn::Tensor*>& out) = 0;
  virtual std::vector<int> encoder_widths() const = 0;
  virtual std::vector<layers::ResidualBlock*> residual_blocks() { return {}; }
};

template <typename Block>
Block make_block(const std::string& name, int cin, int cout, std::mt19937_64& rng) {
  if constexpr (std::is_same_v<Block, layers::ResidualBlock>) {
    return Block(name, ResidualBlockSpec::for_widths(cin, cout), rng);
  } else {
    return Block(name, ConvBlockSpec{cin, cout, 3, true}, rng);
  }
}

// Symmetric encoder/decoder; decoder level d concatenates the 2x-upsampled coarser
// features with the encoder output of level d.
template <typename Block>
class UNet final : public Body {
 public:
  UNet(const NetworkSpec& spec, std::mt19937_64& rng) : spec_(spec) {
    int cin = spec.in_channels;
    for (int d = 0; d < spec.depth; ++d) {
      encoder_.push_back(make_block<Block>("enc" + std::to_string(d), cin, spec.filters_at(d), rng));
      cin = spec.filters_at(d);
    }
    bottleneck_ = make_block<Block>("bottleneck", cin, spec.filters_at(spec.depth), rng);
    up_.resize(spec.depth);
    decoder_.resize(spec.depth);
    for (int d = spec.depth - 1; d >= 0; --d) {
      const int w = spec.filters_at(d);
      up_[d] = layers::UpConv("up" + std::to_string(d), spec.filters_at(d + 1), w, rng);
      decoder_[d] = make_block<Block>("dec" + std::to_string(d), 2 * w, w, rng);
    }
    head_ = layers::Conv("head", spec.filters_at(0), spec.out_channels, 1, rng);
  }

  nn::Var forward(nn::Tape& tape, const nn::Var& x, ForwardTrace* trace) override {
    std::vector<nn::Var> skips;
    nn::Var h = x;
    for (int d = 0; d < spec_.depth; ++d) {
      h = encoder_[d](tape, h);
      if (trace) trace->add("enc" + std::to_string(d), h);
      skips.push_back(h);
      h = nn::max_pool2x2(tape, h);
    }
    h = bottleneck_(tape, h);
    if (trace) trace->add("bottleneck", h);
    for (int d = spec_.depth - 1; d >= 0; --d) {
      h = nn::concat(tape, up_[d](tape, h), skips[d]);
      h = decoder_[d](tape, h);
      if (trace) trace->add("dec" + std::to_string(d), h);
    }
    return nn::sigmoid(tape, head_(tape, h));
  }

  void collect(std::vector<nn::Parameter*>& out) override {
    for (auto& b : encoder_) b.collect(out);
    bottleneck_.collect(out);
    for (int d = spec_.depth - 1; d >= 0; --d) up_[d].collect(out), decoder_[d].collect(out);
    head_.collect(out);
  }
  void collect_buffers(std::vector<nn::Tensor*>& out) override {
    for (auto& b : encoder_) b.collect_buffers(out);
    bottleneck_.collect_buffers(out);
    for (int d = spec_.depth - 1; d >= 0; --d) decoder_[d].collect_buffers(out);
  }

  std::vector<int> encoder_widths() const override {
    std::vector<int> w;
    for (const auto& b : encoder_) w.push_back(b.out_channels());
    return w;
  }

  std::vector<layers::ResidualBlock*> residual_blocks() override {
    std::vector<layers::ResidualBlock*> out;
    if constexpr (std::is_same_v<Block, layers::ResidualBlock>) {
      for (auto& b : encoder_) out.push_back(&b);
      out.push_back(&bottleneck_);
      for (auto& b : decoder_) out.push_back(&b);
    }
    return out;
  }

 private:
  NetworkSpec spec_;
  std::vector<Block> encoder_;
  Block bottleneck_;
  std::vector<layers::UpConv> up_;
  std::vector<Block> decoder_;
  layers::Conv head_;
};

// VGG-style encoder with three pooling stages (strides 2, 4, 8) and a convolutionalised
// fully-connected pair at stride 8. One-channel score maps taken at strides 8, 4 and 2
// are fused coarse-to-fine through learned 2x upsamplings, giving 8x total upsampling.
class Fcn8 final : public Body {
 public:
  Fcn8(const NetworkSpec& spec, std::mt19937_64& rng) : spec_(spec) {
    static constexpr int convs_per_stage[3] = {2, 2, 3};
    int cin = spec.in_channels;
    for (int s = 0; s < 3; ++s) {
      const int w = spec.filters_at(s);
      for (int i = 0; i < convs_per_stage[s]; ++i) {
        stages_[s].emplace_back("stage" + std::to_string(s) + ".conv" + std::to_string(i), cin, w, 3,
                                rng);
        cin = w;
      }
    }
    const int wide = spec.filters_at(3);
    fc6_ = layers::Conv("fc6", cin, wide, 3, rng);
    fc7_ = layers::Conv("fc7", wide, wide, 1, rng);
    score_fc_ = layers::Conv("score_fc", wide, 1, 1, rng);
    score_pool2_ = layers::Conv("score_pool2", spec.filters_at(1), 1, 1, rng);
    score_pool1_ = layers::Conv("score_pool1", spec.filters_at(0), 1, 1, rng);
    up_[0] = layers::UpConv("up_fc", 1, 1, rng);
    up_[1] = layers::UpConv("up_fuse64", 1, 1, rng);
    up_[2] = layers::UpConv("up_fuse128", 1, 1, rng);
  }

  nn::Var forward(nn::Tape& tape, const nn::Var& x, ForwardTrace* trace) override {
    nn::Var h = x;
    nn::Var pooled[3];
    for (int s = 0; s < 3; ++s) {
      for (auto& c : stages_[s]) h = nn::relu(tape, c(tape, h));
      h = pooled[s] = nn::max_pool2x2(tape, h);
      if (trace) trace->add("pool" + std::to_string(s + 1), h);
    }
    h = nn::relu(tape, fc6_(tape, h));
    h = nn::relu(tape, fc7_(tape, h));
    nn::Var score = score_fc_(tape, h);
    if (trace) trace->add("fuse", score);
    score = nn::add(tape, up_[0](tape, score), score_pool2_(tape, pooled[1]));
    if (trace) trace->add("fuse", score);
    score = nn::add(tape, up_[1](tape, score), score_pool1_(tape, pooled[0]));
    if (trace) trace->add("fuse", score);
    score = up_[2](tape, score);
    return nn::sigmoid(tape, score);
  }

  void collect(std::vector<nn::Parameter*>& out) override {
    for (auto& stage : stages_) {
      for (auto& c : stage) c.collect(out);
    }
    fc6_.collect(out), fc7_.collect(out);
    score_fc_.collect(out), score_pool2_.collect(out), score_pool1_.collect(out);
    for (auto& u : up_) u.collect(out);
  }
  void collect_buffers(std::vector<nn::Tensor*>&) override {}

  std::vector<int> encoder_widths() const override {
    return {spec_.filters_at(0), spec_.filters_at(1), spec_.filters_at(2), spec_.filters_at(3)};
  }

 private:
  NetworkSpec spec_;
  std::vector<layers::Conv> stages_[3];
  layers::Conv fc6_, fc7_;
  layers::Conv score_fc_, score_pool2_, score_pool1_;
  layers::UpConv up_[3];
};

}  // namespace detail

// A realised, trainable model. Move-only; use clone() for an independent copy.
class Network {
 public:
  Network(const NetworkSpec& spec, std::uint64_t seed) : spec_(spec), seed_(seed) {
    spec.validate();
    std::mt19937_64 rng(seed);
    switch (spec.kind) {
      case Architecture::unet_bn:
        body_ = std::make_unique<detail::UNet<layers::ConvBlock>>(spec, rng);
        break;
      case Architecture::res_unet:
        body_ = std::make_unique<detail::UNet<layers::ResidualBlock>>(spec, rng);
        break;
      case Architecture::fcn8:
        body_ = std::make_unique<detail::Fcn8>(spec, rng);
        break;
    }
  }

  Network(Network&&) noexcept = default;
  Network& operator=(Network&&) noexcept = default;

  const NetworkSpec& spec() const noexcept { return spec_; }
  std::uint64_t seed() const noexcept { return seed_; }

  // (N, C, S, S) -> (N, 1, S, S) probabilities.
  nn::Var forward(nn::Tape& tape, const nn::Tensor& batch, ForwardTrace* trace = nullptr) {
    const auto& s = batch.shape();
    if (s.c != spec_.in_channels) {
      throw ShapeError("network expects " + std::to_string(spec_.in_channels) +
                       " input channels, got " + std::to_string(s.c));
    }
    const int stride = 1 << spec_.downsamplings();
    if (s.h % stride != 0 || s.w % stride != 0) {
      throw ShapeError("input extent " + s.str() + " not divisible by " + std::to_string(stride));
    }
    return body_->forward(tape, tape.constant(batch), trace);
  }

  nn::Tensor predict(const nn::Tensor& batch) {
    nn::Tape tape = nn::Tape::inference();
    return forward(tape, batch)->value;
  }

  std::vector<nn::Parameter*> parameters() const {
    std::vector<nn::Parameter*> out;
    body_->collect(out);
    return out;
  }

  // Trainable arrays followed by batch-norm running statistics.
  std::vector<nn::Tensor*> state() const {
    std::vector<nn::Tensor*> out;
    for (auto* p : parameters()) out.push_back(&p->value);
    body_->collect_buffers(out);
    return out;
  }

  std::vector<std::string> state_names() const {
    std::vector<std::string> names;
    for (auto* p : parameters()) names.push_back(p->name);
    std::vector<nn::Tensor*> buffers;
    body_->collect_buffers(buffers);
    for (std::size_t i = 0; i < buffers.size(); ++i) {
      names.push_back((i % 2 == 0 ? "running_mean." : "running_var.") + std::to_string(i / 2));
    }
    return names;
  }

  std::vector<nn::Tensor> snapshot() const {
    std::vector<nn::Tensor> out;
    for (auto* t : state()) out.push_back(*t);
    return out;
  }

  void restore(const std::vector<nn::Tensor>& snapshot) {
    auto dst = state();
    if (dst.size() != snapshot.size()) throw ShapeError("snapshot does not match network layout");
    for (std::size_t i = 0; i < dst.size(); ++i) {
      require_shape(snapshot[i], dst[i]->shape(), "restore");
      *dst[i] = snapshot[i];
    }
  }

  Network clone() const {
    Network copy(spec_, seed_);
    copy.restore(snapshot());
    return copy;
  }

  void zero_grad() {
    for (auto* p : parameters()) p->zero_grad();
  }

  std::vector<int> encoder_widths() const { return body_->encoder_widths(); }
  std::vector<layers::ResidualBlock*> residual_blocks() { return body_->residual_blocks(); }

 private:
  NetworkSpec spec_;
  std::uint64_t seed_ = 0;
  std::unique_ptr<detail::Body> body_;
};

inline Network build_unet(const NetworkSpec& spec, std::uint64_t seed = 0) {
  if (spec.kind != Architecture::unet_bn) throw SpecError("build_unet requires kind unet_bn");
  return Network(spec, seed);
}

inline Network build_res_unet(const NetworkSpec& spec, std::uint64_t seed = 0) {
  if (spec.kind != Architecture::res_unet) throw SpecError("build_res_unet requires kind res_unet");
  return Network(spec, seed);
}

inline Network build_fcn8(const NetworkSpec& spec, std::uint64_t seed = 0) {
  if (spec.kind != Architecture::fcn8) throw SpecError("build_fcn8 requires kind fcn8");
  return Network(spec, seed);
}

inline Network build_network(const NetworkSpec& spec, std::uint64_t seed = 0) {
  return Network(spec, seed);
}

inline std::size_t count_parameters(const Network& net) {
  std::size_t n = 0;
  for (const auto* p : net.parameters()) n += p->size();
  return n;
}

}  // namespace lumenseg
