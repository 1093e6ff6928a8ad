#pragma once

#include "fruitform/common.hpp"
#include "fruitform/rng.hpp"
#include "fruitform/tensor.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

namespace fruitform {

template <typename S>
using MatX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <typename S>
using VecX = Eigen::Matrix<S, Eigen::Dynamic, 1>;

template <typename S>
struct ParamRef {
    std::string name;
    MatX<S>* value;
};

struct CacheBase {
    virtual ~CacheBase() = default;
};
using CachePtr = std::unique_ptr<CacheBase>;

// ---------------------------------------------------------------------------
// stages operating on (C,H,W) tensors
// ---------------------------------------------------------------------------

template <typename S>
class ConvStage {
public:
    virtual ~ConvStage() = default;

    /// Inference when `cache` is null; training pass otherwise.
    virtual Tensor3<S> forward(const Tensor3<S>& x, CachePtr* cache) const = 0;

    /// Backpropagates dy, accumulating parameter gradients into `gslots`
    /// (one matrix per parameter, in collect_params order).
    virtual Tensor3<S> backward(const Tensor3<S>& dy, const CacheBase& cache,
                                MatX<S>* gslots) const = 0;

    virtual void collect_params(std::vector<ParamRef<S>>& out, const std::string& prefix) = 0;
    virtual int param_slots() const = 0;
    virtual int out_channels(int in_channels) const = 0;
};

namespace detail {

inline int conv_out_extent(int in, int k, int stride, int pad) {
    return (in + 2 * pad - k) / stride + 1;
}

template <typename S>
MatX<S> im2col(const Tensor3<S>& x, int k, int stride, int pad, int oh, int ow) {
    const int ickk = x.channels * k * k;
    MatX<S> p = MatX<S>::Zero(oh * ow, ickk);
    for (int c = 0; c < x.channels; ++c)
        for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
                const int q = (c * k + ky) * k + kx;
                for (int oy = 0; oy < oh; ++oy) {
                    const int sy = oy * stride - pad + ky;
                    if (sy < 0 || sy >= x.height) continue;
                    for (int ox = 0; ox < ow; ++ox) {
                        const int sx = ox * stride - pad + kx;
                        if (sx < 0 || sx >= x.width) continue;
                        p(oy * ow + ox, q) = x.data(sy * x.width + sx, c);
                    }
                }
            }
    return p;
}

template <typename S>
void col2im_add(const MatX<S>& dp, Tensor3<S>& dx, int k, int stride, int pad, int oh, int ow) {
    for (int c = 0; c < dx.channels; ++c)
        for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
                const int q = (c * k + ky) * k + kx;
                for (int oy = 0; oy < oh; ++oy) {
                    const int sy = oy * stride - pad + ky;
                    if (sy < 0 || sy >= dx.height) continue;
                    for (int ox = 0; ox < ow; ++ox) {
                        const int sx = ox * stride - pad + kx;
                        if (sx < 0 || sx >= dx.width) continue;
                        dx.data(sy * dx.width + sx, c) += dp(oy * ow + ox, q);
                    }
                }
            }
}

} // namespace detail

template <typename S>
class Conv2d final : public ConvStage<S> {
public:
    Conv2d(std::string name, int in_ch, int out_ch, int k, int stride, int pad)
        : name_(std::move(name)), in_ch_(in_ch), out_ch_(out_ch), k_(k), stride_(stride), pad_(pad),
          weight_(MatX<S>::Zero(in_ch * k * k, out_ch)), bias_(MatX<S>::Zero(out_ch, 1)) {}

    struct Cache : CacheBase {
        MatX<S> patches;
        int in_h, in_w, oh, ow;
    };

    Tensor3<S> forward(const Tensor3<S>& x, CachePtr* cache) const override {
        if (x.channels != in_ch_)
            throw ValidationError(name_ + ": expected " + std::to_string(in_ch_) +
                                  " input channels, got " + std::to_string(x.channels));
        const int oh = detail::conv_out_extent(x.height, k_, stride_, pad_);
        const int ow = detail::conv_out_extent(x.width, k_, stride_, pad_);
        MatX<S> p = detail::im2col(x, k_, stride_, pad_, oh, ow);
        Tensor3<S> y;
        y.channels = out_ch_;
        y.height = oh;
        y.width = ow;
        y.data.noalias() = p * weight_;
        y.data.rowwise() += bias_.col(0).transpose();
        if (cache) {
            auto c = std::make_unique<Cache>();
            c->patches = std::move(p);
            c->in_h = x.height;
            c->in_w = x.width;
            c->oh = oh;
            c->ow = ow;
            *cache = std::move(c);
        }
        return y;
    }

    Tensor3<S> backward(const Tensor3<S>& dy, const CacheBase& cache, MatX<S>* gslots) const override {
        const auto& c = static_cast<const Cache&>(cache);
        gslots[0].noalias() += c.patches.transpose() * dy.data;
        gslots[1].col(0).noalias() += dy.data.colwise().sum().transpose();
        MatX<S> dp = dy.data * weight_.transpose();
        Tensor3<S> dx(in_ch_, c.in_h, c.in_w);
        detail::col2im_add(dp, dx, k_, stride_, pad_, c.oh, c.ow);
        return dx;
    }

    void collect_params(std::vector<ParamRef<S>>& out, const std::string& prefix) override {
        out.push_back({prefix + name_ + ".weight", &weight_});
        out.push_back({prefix + name_ + ".bias", &bias_});
    }
    int param_slots() const override { return 2; }
    int out_channels(int) const override { return out_ch_; }

    MatX<S>& weight() { return weight_; }
    MatX<S>& bias() { return bias_; }

private:
    std::string name_;
    int in_ch_, out_ch_, k_, stride_, pad_;
    MatX<S> weight_; // (in_ch*k*k, out_ch), row index (c*k+ky)*k+kx
    MatX<S> bias_;   // (out_ch, 1)
};

template <typename S>
class DepthwiseConv2d final : public ConvStage<S> {
public:
    DepthwiseConv2d(std::string name, int channels, int k, int stride, int pad)
        : name_(std::move(name)), ch_(channels), k_(k), stride_(stride), pad_(pad),
          weight_(MatX<S>::Zero(k * k, channels)), bias_(MatX<S>::Zero(channels, 1)) {}

    struct Cache : CacheBase {
        Tensor3<S> input;
        int oh, ow;
    };

    Tensor3<S> forward(const Tensor3<S>& x, CachePtr* cache) const override {
        if (x.channels != ch_)
            throw ValidationError(name_ + ": expected " + std::to_string(ch_) +
                                  " input channels, got " + std::to_string(x.channels));
        const int oh = detail::conv_out_extent(x.height, k_, stride_, pad_);
        const int ow = detail::conv_out_extent(x.width, k_, stride_, pad_);
        Tensor3<S> y(ch_, oh, ow);
        for (int c = 0; c < ch_; ++c)
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox) {
                    S acc = bias_(c, 0);
                    for (int ky = 0; ky < k_; ++ky) {
                        const int sy = oy * stride_ - pad_ + ky;
                        if (sy < 0 || sy >= x.height) continue;
                        for (int kx = 0; kx < k_; ++kx) {
                            const int sx = ox * stride_ - pad_ + kx;
                            if (sx < 0 || sx >= x.width) continue;
                            acc += weight_(ky * k_ + kx, c) * x.data(sy * x.width + sx, c);
                        }
                    }
                    y.data(oy * ow + ox, c) = acc;
                }
        if (cache) {
            auto cc = std::make_unique<Cache>();
            cc->input = x;
            cc->oh = oh;
            cc->ow = ow;
            *cache = std::move(cc);
        }
        return y;
    }

    Tensor3<S> backward(const Tensor3<S>& dy, const CacheBase& cache, MatX<S>* gslots) const override {
        const auto& c = static_cast<const Cache&>(cache);
        const auto& x = c.input;
        Tensor3<S> dx(ch_, x.height, x.width);
        for (int ch = 0; ch < ch_; ++ch) {
            gslots[1](ch, 0) += dy.data.col(ch).sum();
            for (int oy = 0; oy < c.oh; ++oy)
                for (int ox = 0; ox < c.ow; ++ox) {
                    const S g = dy.data(oy * c.ow + ox, ch);
                    for (int ky = 0; ky < k_; ++ky) {
                        const int sy = oy * stride_ - pad_ + ky;
                        if (sy < 0 || sy >= x.height) continue;
                        for (int kx = 0; kx < k_; ++kx) {
                            const int sx = ox * stride_ - pad_ + kx;
                            if (sx < 0 || sx >= x.width) continue;
                            gslots[0](ky * k_ + kx, ch) += g * x.data(sy * x.width + sx, ch);
                            dx.data(sy * x.width + sx, ch) += g * weight_(ky * k_ + kx, ch);
                        }
                    }
                }
        }
        return dx;
    }

    void collect_params(std::vector<ParamRef<S>>& out, const std::string& prefix) override {
        out.push_back({prefix + name_ + ".weight", &weight_});
        out.push_back({prefix + name_ + ".bias", &bias_});
    }
    int param_slots() const override { return 2; }
    int out_channels(int in) const override { return in; }

private:
    std::string name_;
    int ch_, k_, stride_, pad_;
    MatX<S> weight_; // (k*k, channels)
    MatX<S> bias_;
};

template <typename S>
class MaxPool2x2 final : public ConvStage<S> {
public:
    struct Cache : CacheBase {
        Eigen::MatrixXi argmax; // input position per (out pos, channel)
        int in_h, in_w;
    };

    Tensor3<S> forward(const Tensor3<S>& x, CachePtr* cache) const override {
        const int oh = x.height / 2;
        const int ow = x.width / 2;
        if (oh == 0 || ow == 0) throw ValidationError("maxpool: input too small");
        Tensor3<S> y(x.channels, oh, ow);
        Eigen::MatrixXi idx;
        if (cache) idx.resize(oh * ow, x.channels);
        for (int c = 0; c < x.channels; ++c)
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox) {
                    int best_pos = (2 * oy) * x.width + 2 * ox;
                    S best = x.data(best_pos, c);
                    for (int ky = 0; ky < 2; ++ky)
                        for (int kx = 0; kx < 2; ++kx) {
                            const int pos = (2 * oy + ky) * x.width + (2 * ox + kx);
                            if (x.data(pos, c) > best) {
                                best = x.data(pos, c);
                                best_pos = pos;
                            }
                        }
                    y.data(oy * ow + ox, c) = best;
                    if (cache) idx(oy * ow + ox, c) = best_pos;
                }
        if (cache) {
            auto cc = std::make_unique<Cache>();
            cc->argmax = std::move(idx);
            cc->in_h = x.height;
            cc->in_w = x.width;
            *cache = std::move(cc);
        }
        return y;
    }

    Tensor3<S> backward(const Tensor3<S>& dy, const CacheBase& cache, MatX<S>*) const override {
        const auto& c = static_cast<const Cache&>(cache);
        Tensor3<S> dx(dy.channels, c.in_h, c.in_w);
        for (int ch = 0; ch < dy.channels; ++ch)
            for (int pos = 0; pos < dy.height * dy.width; ++pos)
                dx.data(c.argmax(pos, ch), ch) += dy.data(pos, ch);
        return dx;
    }

    void collect_params(std::vector<ParamRef<S>>&, const std::string&) override {}
    int param_slots() const override { return 0; }
    int out_channels(int in) const override { return in; }
};

template <typename S>
class ReluStage final : public ConvStage<S> {
public:
    explicit ReluStage(S clip = S(0)) : clip_(clip) {} // clip > 0: clipped variant

    struct Cache : CacheBase {
        Tensor3<S> output;
    };

    Tensor3<S> forward(const Tensor3<S>& x, CachePtr* cache) const override {
        Tensor3<S> y = x;
        if (clip_ > S(0))
            y.data = y.data.array().max(S(0)).min(clip_).matrix();
        else
            y.data = y.data.array().max(S(0)).matrix();
        if (cache) {
            auto cc = std::make_unique<Cache>();
            cc->output = y;
            *cache = std::move(cc);
        }
        return y;
    }

    Tensor3<S> backward(const Tensor3<S>& dy, const CacheBase& cache, MatX<S>*) const override {
        const auto& y = static_cast<const Cache&>(cache).output;
        Tensor3<S> dx = dy;
        if (clip_ > S(0))
            dx.data.array() *= ((y.data.array() > S(0)) && (y.data.array() < clip_)).template cast<S>();
        else
            dx.data.array() *= (y.data.array() > S(0)).template cast<S>();
        return dx;
    }

    void collect_params(std::vector<ParamRef<S>>&, const std::string&) override {}
    int param_slots() const override { return 0; }
    int out_channels(int in) const override { return in; }

private:
    S clip_;
};

/// expand (1x1) -> depthwise 3x3 -> project (1x1), with an identity skip when
/// the block keeps shape.
template <typename S>
class InvertedResidual final : public ConvStage<S> {
public:
    InvertedResidual(const std::string& name, int in_ch, int out_ch, int stride, int expand)
        : skip_(stride == 1 && in_ch == out_ch) {
        const int mid = in_ch * expand;
        if (expand != 1) {
            inner_.push_back(std::make_unique<Conv2d<S>>(name + ".expand", in_ch, mid, 1, 1, 0));
            inner_.push_back(std::make_unique<ReluStage<S>>(S(6)));
        }
        inner_.push_back(std::make_unique<DepthwiseConv2d<S>>(name + ".dw", mid, 3, stride, 1));
        inner_.push_back(std::make_unique<ReluStage<S>>(S(6)));
        inner_.push_back(std::make_unique<Conv2d<S>>(name + ".project", mid, out_ch, 1, 1, 0));
        out_ch_ = out_ch;
    }

    struct Cache : CacheBase {
        std::vector<CachePtr> inner;
    };

    Tensor3<S> forward(const Tensor3<S>& x, CachePtr* cache) const override {
        auto cc = cache ? std::make_unique<Cache>() : nullptr;
        Tensor3<S> y = x;
        for (const auto& stage : inner_) {
            CachePtr c;
            y = stage->forward(y, cache ? &c : nullptr);
            if (cache) cc->inner.push_back(std::move(c));
        }
        if (skip_) y.data += x.data;
        if (cache) *cache = std::move(cc);
        return y;
    }

    Tensor3<S> backward(const Tensor3<S>& dy, const CacheBase& cache, MatX<S>* gslots) const override {
        const auto& cc = static_cast<const Cache&>(cache);
        std::vector<int> offsets(inner_.size());
        int total = 0;
        for (std::size_t i = 0; i < inner_.size(); ++i) {
            offsets[i] = total;
            total += inner_[i]->param_slots();
        }
        Tensor3<S> g = dy;
        for (std::size_t i = inner_.size(); i-- > 0;)
            g = inner_[i]->backward(g, *cc.inner[i], gslots + offsets[i]);
        if (skip_) g.data += dy.data;
        return g;
    }

    void collect_params(std::vector<ParamRef<S>>& out, const std::string& prefix) override {
        for (auto& stage : inner_) stage->collect_params(out, prefix);
    }
    int param_slots() const override {
        int total = 0;
        for (const auto& stage : inner_) total += stage->param_slots();
        return total;
    }
    int out_channels(int) const override { return out_ch_; }

private:
    std::vector<std::unique_ptr<ConvStage<S>>> inner_;
    bool skip_;
    int out_ch_;
};

// ---------------------------------------------------------------------------
// stages operating on feature vectors
// ---------------------------------------------------------------------------

template <typename S>
class VecStage {
public:
    virtual ~VecStage() = default;
    virtual VecX<S> forward(const VecX<S>& x, CachePtr* cache) const = 0;
    virtual VecX<S> backward(const VecX<S>& dy, const CacheBase& cache, MatX<S>* gslots) const = 0;
    virtual void collect_params(std::vector<ParamRef<S>>& out, const std::string& prefix) = 0;
    virtual int param_slots() const = 0;
};

template <typename S>
class Dense final : public VecStage<S> {
public:
    Dense(std::string name, int in, int out)
        : name_(std::move(name)), weight_(MatX<S>::Zero(out, in)), bias_(MatX<S>::Zero(out, 1)) {}

    struct Cache : CacheBase {
        VecX<S> input;
    };

    VecX<S> forward(const VecX<S>& x, CachePtr* cache) const override {
        if (x.size() != weight_.cols())
            throw ValidationError(name_ + ": expected input of size " +
                                  std::to_string(weight_.cols()) + ", got " +
                                  std::to_string(x.size()));
        VecX<S> y = weight_ * x + bias_.col(0);
        if (cache) {
            auto cc = std::make_unique<Cache>();
            cc->input = x;
            *cache = std::move(cc);
        }
        return y;
    }

    VecX<S> backward(const VecX<S>& dy, const CacheBase& cache, MatX<S>* gslots) const override {
        const auto& x = static_cast<const Cache&>(cache).input;
        gslots[0].noalias() += dy * x.transpose();
        gslots[1].col(0) += dy;
        return weight_.transpose() * dy;
    }

    void collect_params(std::vector<ParamRef<S>>& out, const std::string& prefix) override {
        out.push_back({prefix + name_ + ".weight", &weight_});
        out.push_back({prefix + name_ + ".bias", &bias_});
    }
    int param_slots() const override { return 2; }

    MatX<S>& weight() { return weight_; }
    MatX<S>& bias() { return bias_; }

private:
    std::string name_;
    MatX<S> weight_; // (out, in)
    MatX<S> bias_;   // (out, 1)
};

template <typename S>
class ReluVec final : public VecStage<S> {
public:
    struct Cache : CacheBase {
        VecX<S> output;
    };

    VecX<S> forward(const VecX<S>& x, CachePtr* cache) const override {
        VecX<S> y = x.array().max(S(0)).matrix();
        if (cache) {
            auto cc = std::make_unique<Cache>();
            cc->output = y;
            *cache = std::move(cc);
        }
        return y;
    }

    VecX<S> backward(const VecX<S>& dy, const CacheBase& cache, MatX<S>*) const override {
        const auto& y = static_cast<const Cache&>(cache).output;
        return (dy.array() * (y.array() > S(0)).template cast<S>()).matrix();
    }

    void collect_params(std::vector<ParamRef<S>>&, const std::string&) override {}
    int param_slots() const override { return 0; }
};

// ---------------------------------------------------------------------------
// backbone: conv stages + global average pool
// ---------------------------------------------------------------------------

enum class BackboneKind { Tiny, CidisLike, MobileNetV2Like, Vgg16Like };

std::string to_string(BackboneKind k);
BackboneKind backbone_kind_from_string(const std::string& name);
int default_feature_dim(BackboneKind k);

struct BackboneSpec {
    BackboneKind kind = BackboneKind::Tiny;
    int input_side = 224;
    int input_channels = 3;
    int feature_dim = 0; // 0 = kind default; overrides the final stage width
    enum class Init { Random, File } init = Init::Random;
    std::uint64_t seed = 0;
    std::string weights_file; // when init == File

    int effective_feature_dim() const { return feature_dim > 0 ? feature_dim : default_feature_dim(kind); }
};

template <typename S>
class Backbone {
public:
    std::vector<std::unique_ptr<ConvStage<S>>> stages;
    int input_channels = 3;
    int input_side = 0;
    int feature_dim = 0;

    struct Caches {
        std::vector<CachePtr> per_stage;
        int final_h = 0;
        int final_w = 0;
    };

    VecX<S> features(const Tensor3<S>& x, Caches* caches) const {
        if (x.channels != input_channels || x.height != input_side || x.width != input_side)
            throw ValidationError("backbone: input tensor is " + std::to_string(x.channels) + "x" +
                                  std::to_string(x.height) + "x" + std::to_string(x.width) +
                                  ", expected " + std::to_string(input_channels) + "x" +
                                  std::to_string(input_side) + "x" + std::to_string(input_side));
        Tensor3<S> t = x;
        for (const auto& stage : stages) {
            CachePtr c;
            t = stage->forward(t, caches ? &c : nullptr);
            if (caches) caches->per_stage.push_back(std::move(c));
        }
        if (caches) {
            caches->final_h = t.height;
            caches->final_w = t.width;
        }
        return t.data.colwise().mean();
    }

    void backward(const VecX<S>& dfeat, const Caches& caches, MatX<S>* gslots) const {
        const int npos = caches.final_h * caches.final_w;
        Tensor3<S> g;
        g.channels = static_cast<int>(dfeat.size());
        g.height = caches.final_h;
        g.width = caches.final_w;
        // global average pool spreads the feature gradient evenly
        g.data = (dfeat / S(npos)).transpose().replicate(npos, 1);

        std::vector<int> offsets(stages.size());
        int total = 0;
        for (std::size_t i = 0; i < stages.size(); ++i) {
            offsets[i] = total;
            total += stages[i]->param_slots();
        }
        for (std::size_t i = stages.size(); i-- > 0;)
            g = stages[i]->backward(g, *caches.per_stage[i], gslots + offsets[i]);
    }

    void collect_params(std::vector<ParamRef<S>>& out, const std::string& prefix) {
        for (auto& stage : stages) stage->collect_params(out, prefix);
    }
    int param_slots() const {
        int total = 0;
        for (const auto& stage : stages) total += stage->param_slots();
        return total;
    }
};

// ---------------------------------------------------------------------------
// classifier models
// ---------------------------------------------------------------------------

struct SingleInputSpec {
    BackboneSpec backbone;
};

struct MultiInputSpec {
    BackboneSpec rgb_branch;                   // 3-channel
    BackboneSpec silhouette_branch;            // 1-channel unless replicated
    std::vector<int> mlp_hidden = {256};
    bool replicate_silhouette_channels = false; // feed the mask as 3 identical channels
};

template <typename S>
struct Mlp {
    std::vector<std::unique_ptr<VecStage<S>>> stages;

    VecX<S> forward(const VecX<S>& x, std::vector<CachePtr>* caches) const {
        VecX<S> y = x;
        for (const auto& stage : stages) {
            CachePtr c;
            y = stage->forward(y, caches ? &c : nullptr);
            if (caches) caches->push_back(std::move(c));
        }
        return y;
    }

    VecX<S> backward(const VecX<S>& dy, const std::vector<CachePtr>& caches, MatX<S>* gslots) const {
        std::vector<int> offsets(stages.size());
        int total = 0;
        for (std::size_t i = 0; i < stages.size(); ++i) {
            offsets[i] = total;
            total += stages[i]->param_slots();
        }
        VecX<S> g = dy;
        for (std::size_t i = stages.size(); i-- > 0;)
            g = stages[i]->backward(g, *caches[i], gslots + offsets[i]);
        return g;
    }

    void collect_params(std::vector<ParamRef<S>>& out, const std::string& prefix) {
        for (auto& stage : stages) stage->collect_params(out, prefix);
    }
    int param_slots() const {
        int total = 0;
        for (const auto& stage : stages) total += stage->param_slots();
        return total;
    }
};

template <typename S>
struct SingleInputModel {
    SingleInputSpec spec;
    Backbone<S> backbone;
    Mlp<S> head; // single Dense feature_dim -> 4

    std::vector<ParamRef<S>> params() {
        std::vector<ParamRef<S>> out;
        backbone.collect_params(out, "backbone.");
        head.collect_params(out, "head.");
        return out;
    }

    VecX<S> logits(const Tensor3<S>& x) const { return head.forward(backbone.features(x, nullptr), nullptr); }
};

template <typename S>
struct MultiInputModel {
    MultiInputSpec spec;
    Backbone<S> rgb;
    Backbone<S> sil;
    Mlp<S> head; // MLP on the concatenated features

    std::vector<ParamRef<S>> params() {
        std::vector<ParamRef<S>> out;
        rgb.collect_params(out, "rgb.");
        sil.collect_params(out, "sil.");
        head.collect_params(out, "head.");
        return out;
    }

    int fused_dim() const { return rgb.feature_dim + sil.feature_dim; }

    Tensor3<S> adapt_silhouette(const Tensor3<S>& m) const {
        if (!spec.replicate_silhouette_channels || m.channels != 1) return m;
        Tensor3<S> r(3, m.height, m.width);
        for (int c = 0; c < 3; ++c) r.data.col(c) = m.data.col(0);
        return r;
    }

    VecX<S> logits(const Tensor3<S>& x_rgb, const Tensor3<S>& x_sil) const {
        VecX<S> f(fused_dim());
        f << rgb.features(x_rgb, nullptr), sil.features(adapt_silhouette(x_sil), nullptr);
        return head.forward(f, nullptr);
    }
};

// ---------------------------------------------------------------------------
// builders
// ---------------------------------------------------------------------------

template <typename S>
Backbone<S> build_backbone(const BackboneSpec& spec);

template <typename S>
SingleInputModel<S> make_single_model(const SingleInputSpec& spec);

template <typename S>
MultiInputModel<S> make_multi_model(const MultiInputSpec& spec);

extern template Backbone<float> build_backbone<float>(const BackboneSpec&);
extern template Backbone<double> build_backbone<double>(const BackboneSpec&);
extern template SingleInputModel<float> make_single_model<float>(const SingleInputSpec&);
extern template SingleInputModel<double> make_single_model<double>(const SingleInputSpec&);
extern template MultiInputModel<float> make_multi_model<float>(const MultiInputSpec&);
extern template MultiInputModel<double> make_multi_model<double>(const MultiInputSpec&);

template <typename Model>
std::int64_t param_count(Model& model) {
    std::int64_t n = 0;
    for (const auto& p : model.params()) n += p.value->size();
    return n;
}

template <typename Model>
std::uint64_t hash_params(Model& model) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& p : model.params()) {
        const auto* bytes = reinterpret_cast<const unsigned char*>(p.value->data());
        const std::size_t n = static_cast<std::size_t>(p.value->size()) * sizeof(*p.value->data());
        for (std::size_t i = 0; i < n; ++i) {
            h ^= bytes[i];
            h *= 0x100000001b3ULL;
        }
    }
    return h;
}

// ---------------------------------------------------------------------------
// batched forward, loss, prediction
// ---------------------------------------------------------------------------

template <typename S>
struct Batch {
    std::vector<std::string> ids;
    std::vector<Tensor3<S>> x;

    std::size_t size() const { return x.size(); }
};

template <typename S>
VecX<S> softmax(const VecX<S>& logits) {
    VecX<S> z = (logits.array() - logits.maxCoeff()).exp().matrix();
    return z / z.sum();
}

/// Numerically stable cross-entropy of one sample; optionally yields
/// d(loss)/d(logits) = softmax - onehot.
template <typename S>
S cross_entropy(const VecX<S>& logits, int label, VecX<S>* dlogits) {
    const S m = logits.maxCoeff();
    const VecX<S> shifted = logits.array() - m;
    const S lse = std::log(shifted.array().exp().sum());
    if (dlogits) {
        *dlogits = (shifted.array() - lse).exp().matrix();
        (*dlogits)(label) -= S(1);
    }
    return lse - shifted(label);
}

/// Argmax with ties broken toward the lowest class code.
template <typename Derived>
int argmax_lowest(const Eigen::MatrixBase<Derived>& row) {
    int best = 0;
    for (int i = 1; i < row.size(); ++i)
        if (row(i) > row(best)) best = i;
    return best;
}

template <typename S>
MatX<S> forward_single(const SingleInputModel<S>& model, const Batch<S>& batch) {
    MatX<S> probs(static_cast<Eigen::Index>(batch.size()), 4);
    for (std::size_t i = 0; i < batch.size(); ++i)
        probs.row(static_cast<Eigen::Index>(i)) = softmax<S>(model.logits(batch.x[i])).transpose();
    return probs;
}

template <typename S>
MatX<S> forward_multi(const MultiInputModel<S>& model, const Batch<S>& rgb, const Batch<S>& sil) {
    if (rgb.size() != sil.size())
        throw ValidationError("forward_multi: batch sizes differ (" + std::to_string(rgb.size()) +
                              " vs " + std::to_string(sil.size()) + ")");
    for (std::size_t i = 0; i < rgb.ids.size() && i < sil.ids.size(); ++i)
        if (rgb.ids[i] != sil.ids[i])
            throw ValidationError("forward_multi: batches misaligned at index " + std::to_string(i) +
                                  ": " + rgb.ids[i] + " vs " + sil.ids[i]);
    MatX<S> probs(static_cast<Eigen::Index>(rgb.size()), 4);
    for (std::size_t i = 0; i < rgb.size(); ++i)
        probs.row(static_cast<Eigen::Index>(i)) = softmax<S>(model.logits(rgb.x[i], sil.x[i])).transpose();
    return probs;
}

// ---------------------------------------------------------------------------
// gradients
// ---------------------------------------------------------------------------

template <typename S>
struct GradBuffer {
    std::vector<MatX<S>> slots;

    template <typename Model>
    static GradBuffer zeros_like(Model& model) {
        GradBuffer g;
        for (const auto& p : model.params())
            g.slots.push_back(MatX<S>::Zero(p.value->rows(), p.value->cols()));
        return g;
    }

    void set_zero() {
        for (auto& s : slots) s.setZero();
    }
    void scale(S f) {
        for (auto& s : slots) s *= f;
    }
};

/// Mean cross-entropy over the batch plus mean parameter gradients.
template <typename S>
S compute_gradients(SingleInputModel<S>& model, const Batch<S>& batch,
                    const std::vector<int>& labels, GradBuffer<S>& grads) {
    if (batch.size() != labels.size()) throw ValidationError("labels do not match batch size");
    if (batch.size() == 0) throw ValidationError("empty batch");
    const int nb = static_cast<int>(model.backbone.param_slots());
    S total = S(0);
    for (std::size_t i = 0; i < batch.size(); ++i) {
        typename Backbone<S>::Caches bc;
        std::vector<CachePtr> hc;
        const VecX<S> feat = model.backbone.features(batch.x[i], &bc);
        const VecX<S> logits = model.head.forward(feat, &hc);
        VecX<S> dlogits;
        total += cross_entropy(logits, labels[i], &dlogits);
        const VecX<S> dfeat = model.head.backward(dlogits, hc, grads.slots.data() + nb);
        model.backbone.backward(dfeat, bc, grads.slots.data());
    }
    grads.scale(S(1) / S(batch.size()));
    return total / S(batch.size());
}

template <typename S>
S compute_gradients(MultiInputModel<S>& model, const Batch<S>& rgb, const Batch<S>& sil,
                    const std::vector<int>& labels, GradBuffer<S>& grads) {
    if (rgb.size() != sil.size() || rgb.size() != labels.size())
        throw ValidationError("multi-input batch/labels size mismatch");
    if (rgb.size() == 0) throw ValidationError("empty batch");
    const int n_rgb = model.rgb.param_slots();
    const int n_sil = model.sil.param_slots();
    S total = S(0);
    for (std::size_t i = 0; i < rgb.size(); ++i) {
        typename Backbone<S>::Caches rc, sc;
        std::vector<CachePtr> hc;
        const VecX<S> f_rgb = model.rgb.features(rgb.x[i], &rc);
        const VecX<S> f_sil = model.sil.features(model.adapt_silhouette(sil.x[i]), &sc);
        VecX<S> fused(model.fused_dim());
        fused << f_rgb, f_sil;
        const VecX<S> logits = model.head.forward(fused, &hc);
        VecX<S> dlogits;
        total += cross_entropy(logits, labels[i], &dlogits);
        const VecX<S> dfused = model.head.backward(dlogits, hc, grads.slots.data() + n_rgb + n_sil);
        model.rgb.backward(dfused.head(model.rgb.feature_dim), rc, grads.slots.data());
        model.sil.backward(dfused.tail(model.sil.feature_dim), sc, grads.slots.data() + n_rgb);
    }
    grads.scale(S(1) / S(rgb.size()));
    return total / S(rgb.size());
}

struct GradCheckResult {
    double max_rel_error = 0.0;
    int coordinates_checked = 0;
};

/// Central finite differences (step 1e-4) against the analytic gradient on
/// `k` sampled coordinates per parameter matrix. Run this on double models;
/// float loses too many digits to the difference quotient.
template <typename Model, typename LossFn>
GradCheckResult finite_difference_check(Model& model, const std::vector<MatX<double>>& analytic,
                                        LossFn loss, int k, std::uint64_t seed) {
    constexpr double h = 1e-4;
    Rng rng(seed);
    GradCheckResult result;
    auto params = model.params();
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto& value = *params[pi].value;
        for (int draw = 0; draw < k; ++draw) {
            const auto flat = static_cast<Eigen::Index>(
                rng.uniform_int(0, static_cast<std::int64_t>(value.size()) - 1));
            const double saved = value(flat);
            value(flat) = saved + h;
            const double lp = loss();
            value(flat) = saved - h;
            const double lm = loss();
            value(flat) = saved;
            const double numeric = (lp - lm) / (2.0 * h);
            const double a = analytic[pi](flat);
            const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
            result.max_rel_error = std::max(result.max_rel_error, rel);
            ++result.coordinates_checked;
        }
    }
    return result;
}

GradCheckResult gradient_check(SingleInputModel<double>& model, const Batch<double>& batch,
                               const std::vector<int>& labels, int k_per_layer, std::uint64_t seed);

GradCheckResult gradient_check(MultiInputModel<double>& model, const Batch<double>& rgb,
                               const Batch<double>& sil, const std::vector<int>& labels,
                               int k_per_layer, std::uint64_t seed);

// ---------------------------------------------------------------------------
// weights files
// ---------------------------------------------------------------------------

struct WeightsFile {
    std::string arch;   // "single" | "multi"
    std::string regime; // "single" | "pretrain-finetune" | "multi"
    std::string meta_json;
    std::vector<std::string> order;
    std::map<std::string, std::pair<std::vector<std::int64_t>, std::vector<float>>> tensors;
};

void write_weights_file(const std::filesystem::path& path, const WeightsFile& w);
WeightsFile read_weights_file(const std::filesystem::path& path);

std::string single_spec_to_json(const SingleInputSpec& spec);
std::string multi_spec_to_json(const MultiInputSpec& spec);
SingleInputSpec single_spec_from_json(const std::string& json_text);
MultiInputSpec multi_spec_from_json(const std::string& json_text);

template <typename Model>
WeightsFile snapshot_weights(Model& model, const std::string& arch, const std::string& meta_json) {
    WeightsFile w;
    w.arch = arch;
    w.meta_json = meta_json;
    for (const auto& p : model.params()) {
        w.order.push_back(p.name);
        std::vector<float> flat(static_cast<std::size_t>(p.value->size()));
        for (Eigen::Index i = 0; i < p.value->size(); ++i)
            flat[static_cast<std::size_t>(i)] = static_cast<float>((*p.value)(i));
        w.tensors[p.name] = {{p.value->rows(), p.value->cols()}, std::move(flat)};
    }
    return w;
}

/// Validates every tensor's shape before assigning any of them; reports the
/// first mismatching layer in model parameter order.
template <typename Model>
void apply_weights(Model& model, const WeightsFile& w) {
    auto params = model.params();
    for (const auto& p : params) {
        auto it = w.tensors.find(p.name);
        if (it == w.tensors.end())
            throw ValidationError("weights file is missing layer " + p.name);
        const auto& dims = it->second.first;
        if (dims.size() != 2 || dims[0] != p.value->rows() || dims[1] != p.value->cols())
            throw ValidationError("shape mismatch at layer " + p.name + ": file has [" +
                                  std::to_string(dims.empty() ? 0 : dims[0]) + "," +
                                  std::to_string(dims.size() < 2 ? 0 : dims[1]) + "], model needs [" +
                                  std::to_string(p.value->rows()) + "," +
                                  std::to_string(p.value->cols()) + "]");
    }
    if (w.tensors.size() != params.size())
        for (const auto& [name, t] : w.tensors) {
            (void)t;
            bool known = false;
            for (const auto& p : params) known |= (p.name == name);
            if (!known) throw ValidationError("weights file has unknown layer " + name);
        }
    for (const auto& p : params) {
        const auto& flat = w.tensors.at(p.name).second;
        for (Eigen::Index i = 0; i < p.value->size(); ++i)
            (*p.value)(i) = static_cast<typename std::decay_t<decltype(*p.value)>::Scalar>(
                flat[static_cast<std::size_t>(i)]);
    }
}

} // namespace fruitform
