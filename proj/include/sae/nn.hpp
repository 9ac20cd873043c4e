#ifndef SAE_NN_HPP
#define SAE_NN_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "sae/error.hpp"
#include "sae/rng.hpp"

namespace sae::nn {

// Dense (C, D, H, W) tensor, W fastest. Templated on the scalar so the same
// kernels serve fast float training and double-precision gradient checks.
template <class T>
struct Tensor {
  int c = 0, d = 0, h = 0, w = 0;
  std::vector<T> v;

  Tensor() = default;
  Tensor(int c_, int d_, int h_, int w_)
      : c(c_), d(d_), h(h_), w(w_), v(std::size_t(c_) * d_ * h_ * w_, T(0)) {}

  std::size_t size() const { return v.size(); }
  std::int64_t spatial() const { return std::int64_t(d) * h * w; }
  bool same_shape(const Tensor& o) const {
    return c == o.c && d == o.d && h == o.h && w == o.w;
  }

  T& at(int ci, int z, int y, int x) {
    return v[((std::size_t(ci) * d + z) * h + y) * w + x];
  }
  T at(int ci, int z, int y, int x) const {
    return v[((std::size_t(ci) * d + z) * h + y) * w + x];
  }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out(c, d, h, w);
    for (std::size_t i = 0; i < v.size(); ++i) out.v[i] = U(v[i]);
    return out;
  }
};

template <class T>
inline Tensor<T> pad_spatial(const Tensor<T>& x, int r) {
  Tensor<T> out(x.c, x.d + 2 * r, x.h + 2 * r, x.w + 2 * r);
  for (int ci = 0; ci < x.c; ++ci)
    for (int z = 0; z < x.d; ++z)
      for (int y = 0; y < x.h; ++y) {
        const T* src = &x.v[((std::size_t(ci) * x.d + z) * x.h + y) * x.w];
        T* dst = &out.v[((std::size_t(ci) * out.d + z + r) * out.h + y + r) * out.w + r];
        std::copy(src, src + x.w, dst);
      }
  return out;
}

template <class T>
inline Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  Tensor<T> out(a.c + b.c, a.d, a.h, a.w);
  std::copy(a.v.begin(), a.v.end(), out.v.begin());
  std::copy(b.v.begin(), b.v.end(), out.v.begin() + std::ptrdiff_t(a.v.size()));
  return out;
}

template <class T>
inline std::pair<Tensor<T>, Tensor<T>> split_channels(const Tensor<T>& g, int c1) {
  Tensor<T> a(c1, g.d, g.h, g.w), b(g.c - c1, g.d, g.h, g.w);
  std::copy(g.v.begin(), g.v.begin() + std::ptrdiff_t(a.v.size()), a.v.begin());
  std::copy(g.v.begin() + std::ptrdiff_t(a.v.size()), g.v.end(), b.v.begin());
  return {std::move(a), std::move(b)};
}

// Numerically stable per-voxel softmax over the channel axis.
template <class T>
inline Tensor<T> softmax_channels(const Tensor<T>& z) {
  Tensor<T> y(z.c, z.d, z.h, z.w);
  const std::int64_t n = z.spatial();
  for (std::int64_t j = 0; j < n; ++j) {
    T mx = z.v[j];
    for (int l = 1; l < z.c; ++l) mx = std::max(mx, z.v[std::size_t(l) * n + j]);
    T sum = T(0);
    for (int l = 0; l < z.c; ++l) {
      const T e = std::exp(z.v[std::size_t(l) * n + j] - mx);
      y.v[std::size_t(l) * n + j] = e;
      sum += e;
    }
    const T inv = T(1) / sum;
    for (int l = 0; l < z.c; ++l) y.v[std::size_t(l) * n + j] *= inv;
  }
  return y;
}

// dL/dz for y = softmax(z): dz_l = y_l * (dy_l - sum_m dy_m y_m).
template <class T>
inline Tensor<T> softmax_backward_channels(const Tensor<T>& y, const Tensor<T>& dy) {
  Tensor<T> dz(y.c, y.d, y.h, y.w);
  const std::int64_t n = y.spatial();
  for (std::int64_t j = 0; j < n; ++j) {
    T dot = T(0);
    for (int l = 0; l < y.c; ++l)
      dot += dy.v[std::size_t(l) * n + j] * y.v[std::size_t(l) * n + j];
    for (int l = 0; l < y.c; ++l)
      dz.v[std::size_t(l) * n + j] =
          y.v[std::size_t(l) * n + j] * (dy.v[std::size_t(l) * n + j] - dot);
  }
  return dz;
}

template <class T>
struct ParamView {
  std::vector<T>* w = nullptr;
  std::vector<T>* g = nullptr;
};

// "Same" 3-D convolution with odd kernel size and zero padding.
//
// Parallel work is partitioned so each output element is written by exactly
// one thread; results do not depend on the thread count.
inline constexpr int kMaxKernelVolume = 125;  // supports kernels up to 5^3

template <class T>
class Conv3d {
 public:
  Conv3d() = default;
  Conv3d(int cin, int cout, int k) : cin_(cin), cout_(cout), k_(k), r_(k / 2) {
    require(k % 2 == 1, ErrorCode::ArgumentError, "conv kernel must be odd");
    weight_.assign(std::size_t(cout) * cin * k * k * k, T(0));
    bias_.assign(std::size_t(cout), T(0));
    grad_weight_.assign(weight_.size(), T(0));
    grad_bias_.assign(bias_.size(), T(0));
  }

  void init_he(Rng& rng) {
    const double std = std::sqrt(2.0 / (double(cin_) * k_ * k_ * k_));
    for (auto& w : weight_) w = T(rng.normal() * std);
    std::fill(bias_.begin(), bias_.end(), T(0));
  }

  void set_bias(const std::vector<T>& b) {
    require(b.size() == bias_.size(), ErrorCode::ArgumentError,
            "bias size mismatch");
    bias_ = b;
  }

  Tensor<T> forward(const Tensor<T>& x) {
    require(x.c == cin_, ErrorCode::ArgumentError, "conv input channel mismatch");
    xp_ = pad_spatial(x, r_);
    Tensor<T> y(cout_, x.d, x.h, x.w);
    const int D = x.d, H = x.h, W = x.w;
    const int PH = H + 2 * r_, PW = W + 2 * r_;
#pragma omp parallel for collapse(2) schedule(static)
    for (int co = 0; co < cout_; ++co)
      for (int z = 0; z < D; ++z) {
        T* yz = &y.v[(std::size_t(co) * D + z) * H * W];
        std::fill(yz, yz + std::size_t(H) * W, bias_[co]);
        for (int ci = 0; ci < cin_; ++ci)
          for (int kz = 0; kz < k_; ++kz)
            for (int ky = 0; ky < k_; ++ky)
              for (int kx = 0; kx < k_; ++kx) {
                const T wv = wgt(co, ci, kz, ky, kx);
                const T* xq =
                    &xp_.v[((std::size_t(ci) * xp_.d + z + kz) * PH + ky) * PW + kx];
                for (int yy = 0; yy < H; ++yy) {
                  const T* xr = xq + std::size_t(yy) * PW;
                  T* yr = yz + std::size_t(yy) * W;
                  for (int xx = 0; xx < W; ++xx) yr[xx] += wv * xr[xx];
                }
              }
      }
    return y;
  }

  // Accumulates parameter gradients and returns dL/dx.
  Tensor<T> backward(const Tensor<T>& gy) {
    const int D = gy.d, H = gy.h, W = gy.w;
    const int PH = H + 2 * r_, PW = W + 2 * r_;

#pragma omp parallel for schedule(static)
    for (int co = 0; co < cout_; ++co) {
      T s = T(0);
      const T* g = &gy.v[std::size_t(co) * D * H * W];
      for (std::int64_t i = 0; i < std::int64_t(D) * H * W; ++i) s += g[i];
      grad_bias_[co] += s;
    }

    // One sweep over the activations per channel pair; all k^3 taps
    // accumulate in registers.
#pragma omp parallel for collapse(2) schedule(static)
    for (int co = 0; co < cout_; ++co)
      for (int ci = 0; ci < cin_; ++ci) {
        T acc[kMaxKernelVolume] = {};
        for (int z = 0; z < D; ++z)
          for (int yy = 0; yy < H; ++yy) {
            const T* gr = &gy.v[((std::size_t(co) * D + z) * H + yy) * W];
            for (int kz = 0; kz < k_; ++kz)
              for (int ky = 0; ky < k_; ++ky) {
                const T* xr =
                    &xp_.v[((std::size_t(ci) * xp_.d + z + kz) * PH + yy + ky) * PW];
                T* a = acc + (kz * k_ + ky) * k_;
                if (k_ == 3) {
                  T s0 = T(0), s1 = T(0), s2 = T(0);
                  for (int xx = 0; xx < W; ++xx) {
                    const T g = gr[xx];
                    s0 += g * xr[xx];
                    s1 += g * xr[xx + 1];
                    s2 += g * xr[xx + 2];
                  }
                  a[0] += s0;
                  a[1] += s1;
                  a[2] += s2;
                } else {
                  for (int kx = 0; kx < k_; ++kx) {
                    T s = T(0);
                    for (int xx = 0; xx < W; ++xx) s += gr[xx] * xr[xx + kx];
                    a[kx] += s;
                  }
                }
              }
          }
        for (int t = 0; t < k_ * k_ * k_; ++t)
          grad_weight_[widx(co, ci, 0, 0, 0) + std::size_t(t)] += acc[t];
      }

    // dL/dx is the full correlation of gy with the flipped kernel.
    const Tensor<T> gyp = pad_spatial(gy, r_);
    Tensor<T> gx(cin_, D, H, W);
#pragma omp parallel for collapse(2) schedule(static)
    for (int ci = 0; ci < cin_; ++ci)
      for (int z = 0; z < D; ++z) {
        T* xz = &gx.v[(std::size_t(ci) * D + z) * H * W];
        for (int co = 0; co < cout_; ++co)
          for (int kz = 0; kz < k_; ++kz)
            for (int ky = 0; ky < k_; ++ky)
              for (int kx = 0; kx < k_; ++kx) {
                const T wv = wgt(co, ci, k_ - 1 - kz, k_ - 1 - ky, k_ - 1 - kx);
                const T* gq =
                    &gyp.v[((std::size_t(co) * gyp.d + z + kz) * PH + ky) * PW + kx];
                for (int yy = 0; yy < H; ++yy) {
                  const T* gr = gq + std::size_t(yy) * PW;
                  T* xr = xz + std::size_t(yy) * W;
                  for (int xx = 0; xx < W; ++xx) xr[xx] += wv * gr[xx];
                }
              }
      }
    return gx;
  }

  void zero_grad() {
    std::fill(grad_weight_.begin(), grad_weight_.end(), T(0));
    std::fill(grad_bias_.begin(), grad_bias_.end(), T(0));
  }

  void collect_params(std::vector<ParamView<T>>& out) {
    out.push_back({&weight_, &grad_weight_});
    out.push_back({&bias_, &grad_bias_});
  }

  int in_channels() const { return cin_; }
  int out_channels() const { return cout_; }

 private:
  std::size_t widx(int co, int ci, int kz, int ky, int kx) const {
    return (((std::size_t(co) * cin_ + ci) * k_ + kz) * k_ + ky) * k_ + kx;
  }
  T wgt(int co, int ci, int kz, int ky, int kx) const {
    return weight_[widx(co, ci, kz, ky, kx)];
  }

  int cin_ = 0, cout_ = 0, k_ = 3, r_ = 1;
  std::vector<T> weight_, bias_, grad_weight_, grad_bias_;
  Tensor<T> xp_;
};

template <class T>
class ReLU {
 public:
  Tensor<T> forward(const Tensor<T>& x) {
    y_ = x;
    for (auto& v : y_.v) v = std::max(v, T(0));
    return y_;
  }
  Tensor<T> backward(const Tensor<T>& gy) {
    Tensor<T> gx = gy;
    for (std::size_t i = 0; i < gx.v.size(); ++i)
      if (!(y_.v[i] > T(0))) gx.v[i] = T(0);
    return gx;
  }

 private:
  Tensor<T> y_;
};

template <class T>
class Sigmoid {
 public:
  Tensor<T> forward(const Tensor<T>& x) {
    y_ = x;
    for (auto& v : y_.v) v = T(1) / (T(1) + std::exp(-v));
    return y_;
  }
  Tensor<T> backward(const Tensor<T>& gy) {
    Tensor<T> gx = gy;
    for (std::size_t i = 0; i < gx.v.size(); ++i)
      gx.v[i] *= y_.v[i] * (T(1) - y_.v[i]);
    return gx;
  }

 private:
  Tensor<T> y_;
};

// 2x max pooling; input spatial sides must be even. First maximum wins on
// ties so the backward scatter is deterministic.
template <class T>
class MaxPool3d {
 public:
  Tensor<T> forward(const Tensor<T>& x) {
    require(x.d % 2 == 0 && x.h % 2 == 0 && x.w % 2 == 0, ErrorCode::ArgumentError,
            "maxpool input sides must be even");
    in_shape_ = {x.c, x.d, x.h, x.w};
    Tensor<T> y(x.c, x.d / 2, x.h / 2, x.w / 2);
    argmax_.resize(y.size());
#pragma omp parallel for collapse(2) schedule(static)
    for (int ci = 0; ci < y.c; ++ci)
      for (int z = 0; z < y.d; ++z)
        for (int yy = 0; yy < y.h; ++yy)
          for (int xx = 0; xx < y.w; ++xx) {
            T best = x.at(ci, 2 * z, 2 * yy, 2 * xx);
            std::int64_t best_i =
                ((std::int64_t(ci) * x.d + 2 * z) * x.h + 2 * yy) * x.w + 2 * xx;
            for (int a = 0; a < 2; ++a)
              for (int b = 0; b < 2; ++b)
                for (int e = 0; e < 2; ++e) {
                  const std::int64_t i =
                      ((std::int64_t(ci) * x.d + 2 * z + a) * x.h + 2 * yy + b) * x.w +
                      2 * xx + e;
                  if (x.v[std::size_t(i)] > best) {
                    best = x.v[std::size_t(i)];
                    best_i = i;
                  }
                }
            const std::size_t o =
                ((std::size_t(ci) * y.d + z) * y.h + yy) * y.w + xx;
            y.v[o] = best;
            argmax_[o] = best_i;
          }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& gy) {
    Tensor<T> gx(in_shape_[0], in_shape_[1], in_shape_[2], in_shape_[3]);
#pragma omp parallel for schedule(static)
    for (std::int64_t o = 0; o < std::int64_t(gy.size()); ++o)
      gx.v[std::size_t(argmax_[std::size_t(o)])] = gy.v[std::size_t(o)];
    return gx;
  }

 private:
  std::array<int, 4> in_shape_{};
  std::vector<std::int64_t> argmax_;
};

// 2x nearest-neighbor upsampling.
template <class T>
class Upsample3d {
 public:
  Tensor<T> forward(const Tensor<T>& x) {
    in_shape_ = {x.c, x.d, x.h, x.w};
    Tensor<T> y(x.c, 2 * x.d, 2 * x.h, 2 * x.w);
#pragma omp parallel for collapse(2) schedule(static)
    for (int ci = 0; ci < y.c; ++ci)
      for (int z = 0; z < y.d; ++z)
        for (int yy = 0; yy < y.h; ++yy)
          for (int xx = 0; xx < y.w; ++xx)
            y.at(ci, z, yy, xx) = x.at(ci, z / 2, yy / 2, xx / 2);
    return y;
  }

  Tensor<T> backward(const Tensor<T>& gy) {
    Tensor<T> gx(in_shape_[0], in_shape_[1], in_shape_[2], in_shape_[3]);
#pragma omp parallel for collapse(2) schedule(static)
    for (int ci = 0; ci < gx.c; ++ci)
      for (int z = 0; z < gx.d; ++z)
        for (int yy = 0; yy < gx.h; ++yy)
          for (int xx = 0; xx < gx.w; ++xx) {
            T s = T(0);
            for (int a = 0; a < 2; ++a)
              for (int b = 0; b < 2; ++b)
                for (int e = 0; e < 2; ++e)
                  s += gy.at(ci, 2 * z + a, 2 * yy + b, 2 * xx + e);
            gx.at(ci, z, yy, xx) = s;
          }
    return gx;
  }

 private:
  std::array<int, 4> in_shape_{};
};

// Two (conv 3x3x3 + ReLU) stages.
template <class T>
struct ConvBlock {
  Conv3d<T> conv1, conv2;
  ReLU<T> relu1, relu2;

  ConvBlock() = default;
  ConvBlock(int cin, int cout)
      : conv1(cin, cout, 3), conv2(cout, cout, 3) {}

  void init(Rng& rng) {
    conv1.init_he(rng);
    conv2.init_he(rng);
  }
  Tensor<T> forward(const Tensor<T>& x) {
    return relu2.forward(conv2.forward(relu1.forward(conv1.forward(x))));
  }
  Tensor<T> backward(const Tensor<T>& gy) {
    return conv1.backward(relu1.backward(conv2.backward(relu2.backward(gy))));
  }
  void collect_params(std::vector<ParamView<T>>& out) {
    conv1.collect_params(out);
    conv2.collect_params(out);
  }
};

// 3-D U-Net: `depth` 2x down/up stages, channels doubling per stage, skip
// connections by concatenation, linear 3x3x3 head producing the label logits.
template <class T>
class UNet3D {
 public:
  UNet3D() = default;
  UNet3D(int in_channels, int num_labels, int base_channels, int depth, Rng& rng)
      : depth_(depth), num_labels_(num_labels) {
    require(depth >= 1, ErrorCode::ConfigError, "U-Net depth must be >= 1");
    require(base_channels >= 1, ErrorCode::ConfigError,
            "U-Net base_channels must be >= 1");
    for (int i = 0; i <= depth; ++i) {
      const int cin = i == 0 ? in_channels : base_channels << (i - 1);
      enc_.emplace_back(cin, base_channels << i);
    }
    pools_.resize(depth);
    ups_.resize(depth);
    for (int i = 0; i < depth; ++i) {
      const int from_below = base_channels << (i + 1);
      const int skip = base_channels << i;
      dec_.emplace_back(from_below + skip, skip);
    }
    head_ = Conv3d<T>(base_channels, num_labels, 3);
    for (auto& b : enc_) b.init(rng);
    for (auto& b : dec_) b.init(rng);
    head_.init_he(rng);
  }

  int depth() const { return depth_; }
  int num_labels() const { return num_labels_; }

  Tensor<T> forward(const Tensor<T>& x) {
    for (int s = 0; s < 3; ++s) {
      const int side = s == 0 ? x.d : (s == 1 ? x.h : x.w);
      require(side % (1 << depth_) == 0, ErrorCode::ConfigError,
              "input sides must be divisible by 2^depth");
    }
    skips_.assign(std::size_t(depth_), Tensor<T>{});
    Tensor<T> a = x;
    for (int i = 0; i < depth_; ++i) {
      a = enc_[i].forward(a);
      skips_[i] = a;
      a = pools_[i].forward(a);
    }
    a = enc_[depth_].forward(a);
    for (int i = depth_ - 1; i >= 0; --i) {
      a = ups_[i].forward(a);
      a = concat_channels(a, skips_[i]);
      a = dec_[i].forward(a);
    }
    return head_.forward(a);
  }

  Tensor<T> backward(const Tensor<T>& dlogits) {
    Tensor<T> g = head_.backward(dlogits);
    std::vector<Tensor<T>> skip_grads(static_cast<std::size_t>(depth_));
    for (int i = 0; i < depth_; ++i) {
      g = dec_[i].backward(g);
      auto [ga, gskip] = split_channels(g, g.c - skips_[i].c);
      skip_grads[i] = std::move(gskip);
      g = ups_[i].backward(ga);
    }
    g = enc_[depth_].backward(g);
    for (int i = depth_ - 1; i >= 0; --i) {
      g = pools_[i].backward(g);
      for (std::size_t t = 0; t < g.v.size(); ++t) g.v[t] += skip_grads[i].v[t];
      g = enc_[i].backward(g);
    }
    return g;
  }

  std::vector<ParamView<T>> params() {
    std::vector<ParamView<T>> out;
    for (auto& b : enc_) b.collect_params(out);
    for (auto& b : dec_) b.collect_params(out);
    head_.collect_params(out);
    return out;
  }

  void zero_grad() {
    for (auto p : params()) std::fill(p.g->begin(), p.g->end(), T(0));
  }

  // Biases the logit head so the initial posterior matches a target class
  // distribution instead of the uniform one.
  void set_head_bias(const std::vector<T>& bias) {
    require(int(bias.size()) == num_labels_, ErrorCode::ArgumentError,
            "head bias size must equal num_labels");
    head_.set_bias(bias);
  }

 private:
  int depth_ = 0;
  int num_labels_ = 0;
  std::vector<ConvBlock<T>> enc_, dec_;
  std::vector<MaxPool3d<T>> pools_;
  std::vector<Upsample3d<T>> ups_;
  Conv3d<T> head_;
  std::vector<Tensor<T>> skips_;
};

// Plain convolutional reconstruction network with a sigmoid output head.
template <class T>
class DecoderCNN {
 public:
  DecoderCNN() = default;
  DecoderCNN(int in_channels, int hidden_channels, int num_layers, Rng& rng) {
    require(num_layers >= 1, ErrorCode::ConfigError,
            "decoder num_layers must be >= 1");
    for (int i = 0; i < num_layers; ++i) {
      const int cin = i == 0 ? in_channels : hidden_channels;
      const int cout = i + 1 == num_layers ? 1 : hidden_channels;
      convs_.emplace_back(cin, cout, 3);
    }
    relus_.resize(convs_.size() - 1);
    for (auto& c : convs_) c.init_he(rng);
  }

  Tensor<T> forward(const Tensor<T>& s) {
    Tensor<T> a = s;
    for (std::size_t i = 0; i < convs_.size(); ++i) {
      a = convs_[i].forward(a);
      if (i + 1 < convs_.size()) a = relus_[i].forward(a);
    }
    return out_.forward(a);
  }

  Tensor<T> backward(const Tensor<T>& gy) {
    Tensor<T> g = out_.backward(gy);
    for (int i = int(convs_.size()) - 1; i >= 0; --i) {
      if (i + 1 < int(convs_.size())) g = relus_[i].backward(g);
      g = convs_[i].backward(g);
    }
    return g;
  }

  std::vector<ParamView<T>> params() {
    std::vector<ParamView<T>> out;
    for (auto& c : convs_) c.collect_params(out);
    return out;
  }

  void zero_grad() {
    for (auto p : params()) std::fill(p.g->begin(), p.g->end(), T(0));
  }

 private:
  std::vector<Conv3d<T>> convs_;
  std::vector<ReLU<T>> relus_;
  Sigmoid<T> out_;
};

// Adam with double-precision moment estimates.
template <class T>
class Adam {
 public:
  Adam() = default;
  Adam(std::vector<ParamView<T>> params, double lr, double beta1 = 0.9,
       double beta2 = 0.999, double eps = 1e-8)
      : params_(std::move(params)), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
    for (const auto& p : params_) {
      m_.emplace_back(p.w->size(), 0.0);
      v_.emplace_back(p.w->size(), 0.0);
    }
  }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(b1_, double(t_));
    const double bc2 = 1.0 - std::pow(b2_, double(t_));
    for (std::size_t pi = 0; pi < params_.size(); ++pi) {
      auto& w = *params_[pi].w;
      auto& g = *params_[pi].g;
      auto& m = m_[pi];
      auto& v = v_[pi];
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = double(g[i]);
        m[i] = b1_ * m[i] + (1.0 - b1_) * gi;
        v[i] = b2_ * v[i] + (1.0 - b2_) * gi * gi;
        w[i] -= T(lr_ * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps_));
      }
    }
  }

  void zero_grad() {
    for (auto p : params_) std::fill(p.g->begin(), p.g->end(), T(0));
  }

  long steps_taken() const { return t_; }

 private:
  std::vector<ParamView<T>> params_;
  std::vector<std::vector<double>> m_, v_;
  double lr_ = 1e-4, b1_ = 0.9, b2_ = 0.999, eps_ = 1e-8;
  long t_ = 0;
};

}  // namespace sae::nn

#endif  // SAE_NN_HPP
