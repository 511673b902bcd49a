#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "fednas/errors.hpp"
#include "fednas/tensor.hpp"

namespace fednas {

enum class Mode { train, eval };

// Batch of image samples. Inputs are (N, C, H, W); labels are class indices.
struct Batch {
  Tensor inputs;
  std::vector<int> labels;
};

// Named view of one trainable parameter and its gradient buffer.
struct ParamRef {
  std::string path;
  Tensor* value = nullptr;
  Tensor* grad = nullptr;
};

inline constexpr double kBatchNormEps = 1e-5;

// Layers cache what their backward pass needs during forward, so the usage
// contract is forward-then-backward on the same input.
class Layer {
 public:
  virtual ~Layer() = default;
  virtual Tensor forward(const Tensor& x, Mode mode) = 0;
  virtual Tensor backward(const Tensor& gy) = 0;
  virtual void collect_params(std::vector<ParamRef>& out) { (void)out; }
};

// 2D convolution, zero padding, no bias. groups == 1 is a dense convolution;
// groups == in_channels is a depthwise convolution (weight (C, 1, k, k)).
class Conv2d final : public Layer {
 public:
  Conv2d(std::string path, Tensor weight, int stride, int pad, int groups)
      : path_(std::move(path)),
        w_(std::move(weight)),
        gw_(Tensor::zeros(w_.shape)),
        stride_(stride),
        pad_(pad),
        groups_(groups) {}

  Tensor forward(const Tensor& x, Mode) override {
    const int n_batch = x.dim(0), c_in = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int c_out = w_.dim(0), c_in_g = w_.dim(1), k = w_.dim(2);
    if (c_in != groups_ * c_in_g) {
      throw StructuralError("conv input channels mismatch at " + path_);
    }
    const int h_out = (h + 2 * pad_ - k) / stride_ + 1;
    const int w_out = (w + 2 * pad_ - k) / stride_ + 1;
    const int out_per_group = c_out / groups_;

    x_ = x;
    Tensor y({n_batch, c_out, h_out, w_out});
    for (int n = 0; n < n_batch; ++n) {
      for (int co = 0; co < c_out; ++co) {
        const int g = co / out_per_group;
        const double* wf = &w_.data[static_cast<std::size_t>(co) * c_in_g * k * k];
        double* yp = &y.data[(static_cast<std::size_t>(n) * c_out + co) * h_out * w_out];
        for (int cig = 0; cig < c_in_g; ++cig) {
          const int ci = g * c_in_g + cig;
          const double* xp = &x.data[(static_cast<std::size_t>(n) * c_in + ci) * h * w];
          const double* wk = &wf[cig * k * k];
          for (int ho = 0; ho < h_out; ++ho) {
            const int hi0 = ho * stride_ - pad_;
            for (int wo = 0; wo < w_out; ++wo) {
              const int wi0 = wo * stride_ - pad_;
              double acc = 0.0;
              for (int kh = 0; kh < k; ++kh) {
                const int hi = hi0 + kh;
                if (hi < 0 || hi >= h) continue;
                for (int kw = 0; kw < k; ++kw) {
                  const int wi = wi0 + kw;
                  if (wi < 0 || wi >= w) continue;
                  acc += xp[hi * w + wi] * wk[kh * k + kw];
                }
              }
              yp[ho * w_out + wo] += acc;
            }
          }
        }
      }
    }
    return y;
  }

  Tensor backward(const Tensor& gy) override {
    const int n_batch = x_.dim(0), c_in = x_.dim(1), h = x_.dim(2), w = x_.dim(3);
    const int c_out = w_.dim(0), c_in_g = w_.dim(1), k = w_.dim(2);
    const int h_out = gy.dim(2), w_out = gy.dim(3);
    const int out_per_group = c_out / groups_;

    Tensor gx(x_.shape);
    for (int n = 0; n < n_batch; ++n) {
      for (int co = 0; co < c_out; ++co) {
        const int g = co / out_per_group;
        const double* wf = &w_.data[static_cast<std::size_t>(co) * c_in_g * k * k];
        double* gwf = &gw_.data[static_cast<std::size_t>(co) * c_in_g * k * k];
        const double* gyp =
            &gy.data[(static_cast<std::size_t>(n) * c_out + co) * h_out * w_out];
        for (int cig = 0; cig < c_in_g; ++cig) {
          const int ci = g * c_in_g + cig;
          const double* xp = &x_.data[(static_cast<std::size_t>(n) * c_in + ci) * h * w];
          double* gxp = &gx.data[(static_cast<std::size_t>(n) * c_in + ci) * h * w];
          const double* wk = &wf[cig * k * k];
          double* gwk = &gwf[cig * k * k];
          for (int ho = 0; ho < h_out; ++ho) {
            const int hi0 = ho * stride_ - pad_;
            for (int wo = 0; wo < w_out; ++wo) {
              const int wi0 = wo * stride_ - pad_;
              const double gv = gyp[ho * w_out + wo];
              if (gv == 0.0) continue;
              for (int kh = 0; kh < k; ++kh) {
                const int hi = hi0 + kh;
                if (hi < 0 || hi >= h) continue;
                for (int kw = 0; kw < k; ++kw) {
                  const int wi = wi0 + kw;
                  if (wi < 0 || wi >= w) continue;
                  gxp[hi * w + wi] += wk[kh * k + kw] * gv;
                  gwk[kh * k + kw] += xp[hi * w + wi] * gv;
                }
              }
            }
          }
        }
      }
    }
    return gx;
  }

  void collect_params(std::vector<ParamRef>& out) override {
    out.push_back({path_, &w_, &gw_});
  }

 private:
  std::string path_;
  Tensor w_, gw_;
  int stride_, pad_, groups_;
  Tensor x_;
};

// Per-channel standardization over (N, H, W) with current-batch statistics.
// There are no learned scale/shift parameters and no running averages, so
// train and eval behave identically.
class BatchNorm final : public Layer {
 public:
  Tensor forward(const Tensor& x, Mode) override {
    const int n_batch = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    const double count = static_cast<double>(n_batch) * static_cast<double>(plane);

    xhat_ = Tensor(x.shape);
    inv_std_.assign(static_cast<std::size_t>(c), 0.0);
    for (int ch = 0; ch < c; ++ch) {
      double sum = 0.0, sq = 0.0;
      for (int n = 0; n < n_batch; ++n) {
        const double* xp = &x.data[(static_cast<std::size_t>(n) * c + ch) * plane];
        for (std::size_t i = 0; i < plane; ++i) {
          sum += xp[i];
          sq += xp[i] * xp[i];
        }
      }
      const double mean = sum / count;
      const double var = sq / count - mean * mean;
      const double is = 1.0 / std::sqrt(var + kBatchNormEps);
      inv_std_[static_cast<std::size_t>(ch)] = is;
      for (int n = 0; n < n_batch; ++n) {
        const double* xp = &x.data[(static_cast<std::size_t>(n) * c + ch) * plane];
        double* op = &xhat_.data[(static_cast<std::size_t>(n) * c + ch) * plane];
        for (std::size_t i = 0; i < plane; ++i) op[i] = (xp[i] - mean) * is;
      }
    }
    return xhat_;
  }

  Tensor backward(const Tensor& gy) override {
    const int n_batch = gy.dim(0), c = gy.dim(1), h = gy.dim(2), w = gy.dim(3);
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    const double count = static_cast<double>(n_batch) * static_cast<double>(plane);

    Tensor gx(gy.shape);
    for (int ch = 0; ch < c; ++ch) {
      double m_g = 0.0, m_gx = 0.0;
      for (int n = 0; n < n_batch; ++n) {
        const std::size_t off = (static_cast<std::size_t>(n) * c + ch) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          m_g += gy.data[off + i];
          m_gx += gy.data[off + i] * xhat_.data[off + i];
        }
      }
      m_g /= count;
      m_gx /= count;
      const double is = inv_std_[static_cast<std::size_t>(ch)];
      for (int n = 0; n < n_batch; ++n) {
        const std::size_t off = (static_cast<std::size_t>(n) * c + ch) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          gx.data[off + i] =
              is * (gy.data[off + i] - m_g - xhat_.data[off + i] * m_gx);
        }
      }
    }
    return gx;
  }

 private:
  Tensor xhat_;
  std::vector<double> inv_std_;
};

class ReLU final : public Layer {
 public:
  Tensor forward(const Tensor& x, Mode) override {
    y_ = x;
    for (double& v : y_.data) v = v > 0.0 ? v : 0.0;
    return y_;
  }

  Tensor backward(const Tensor& gy) override {
    Tensor gx = gy;
    for (std::size_t i = 0; i < gx.data.size(); ++i) {
      if (y_.data[i] <= 0.0) gx.data[i] = 0.0;
    }
    return gx;
  }

 private:
  Tensor y_;
};

// (N, C, H, W) -> (N, C) spatial mean.
class GlobalAvgPool final : public Layer {
 public:
  Tensor forward(const Tensor& x, Mode) override {
    const int n_batch = x.dim(0), c = x.dim(1);
    h_ = x.dim(2);
    w_ = x.dim(3);
    const std::size_t plane = static_cast<std::size_t>(h_) * w_;
    Tensor y({n_batch, c});
    for (int n = 0; n < n_batch; ++n) {
      for (int ch = 0; ch < c; ++ch) {
        const double* xp = &x.data[(static_cast<std::size_t>(n) * c + ch) * plane];
        double sum = 0.0;
        for (std::size_t i = 0; i < plane; ++i) sum += xp[i];
        y.data[static_cast<std::size_t>(n) * c + ch] = sum / static_cast<double>(plane);
      }
    }
    return y;
  }

  Tensor backward(const Tensor& gy) override {
    const int n_batch = gy.dim(0), c = gy.dim(1);
    const std::size_t plane = static_cast<std::size_t>(h_) * w_;
    Tensor gx({n_batch, c, h_, w_});
    for (int n = 0; n < n_batch; ++n) {
      for (int ch = 0; ch < c; ++ch) {
        const double g =
            gy.data[static_cast<std::size_t>(n) * c + ch] / static_cast<double>(plane);
        double* gp = &gx.data[(static_cast<std::size_t>(n) * c + ch) * plane];
        for (std::size_t i = 0; i < plane; ++i) gp[i] = g;
      }
    }
    return gx;
  }

 private:
  int h_ = 0, w_ = 0;
};

// Fully connected layer with bias: (N, in) -> (N, out).
class Linear final : public Layer {
 public:
  Linear(std::string w_path, std::string b_path, Tensor weight, Tensor bias)
      : w_path_(std::move(w_path)),
        b_path_(std::move(b_path)),
        w_(std::move(weight)),
        b_(std::move(bias)),
        gw_(Tensor::zeros(w_.shape)),
        gb_(Tensor::zeros(b_.shape)) {}

  Tensor forward(const Tensor& x, Mode) override {
    const int n_batch = x.dim(0), in = x.dim(1);
    const int out = w_.dim(0);
    if (in != w_.dim(1)) throw StructuralError("linear input size mismatch");
    x_ = x;
    Tensor y({n_batch, out});
    for (int n = 0; n < n_batch; ++n) {
      const double* xp = &x.data[static_cast<std::size_t>(n) * in];
      for (int o = 0; o < out; ++o) {
        const double* wp = &w_.data[static_cast<std::size_t>(o) * in];
        double acc = b_.data[static_cast<std::size_t>(o)];
        for (int i = 0; i < in; ++i) acc += xp[i] * wp[i];
        y.data[static_cast<std::size_t>(n) * out + o] = acc;
      }
    }
    return y;
  }

  Tensor backward(const Tensor& gy) override {
    const int n_batch = x_.dim(0), in = x_.dim(1);
    const int out = w_.dim(0);
    Tensor gx({n_batch, in});
    for (int n = 0; n < n_batch; ++n) {
      const double* xp = &x_.data[static_cast<std::size_t>(n) * in];
      double* gxp = &gx.data[static_cast<std::size_t>(n) * in];
      for (int o = 0; o < out; ++o) {
        const double g = gy.data[static_cast<std::size_t>(n) * out + o];
        const double* wp = &w_.data[static_cast<std::size_t>(o) * in];
        double* gwp = &gw_.data[static_cast<std::size_t>(o) * in];
        gb_.data[static_cast<std::size_t>(o)] += g;
        for (int i = 0; i < in; ++i) {
          gxp[i] += wp[i] * g;
          gwp[i] += xp[i] * g;
        }
      }
    }
    return gx;
  }

  void collect_params(std::vector<ParamRef>& out) override {
    out.push_back({w_path_, &w_, &gw_});
    out.push_back({b_path_, &b_, &gb_});
  }

 private:
  std::string w_path_, b_path_;
  Tensor w_, b_, gw_, gb_;
  Tensor x_;
};

class Sequential final : public Layer {
 public:
  void add(std::unique_ptr<Layer> layer) { layers_.push_back(std::move(layer)); }
  bool empty() const { return layers_.empty(); }

  Tensor forward(const Tensor& x, Mode mode) override {
    Tensor cur = x;
    for (auto& layer : layers_) cur = layer->forward(cur, mode);
    return cur;
  }

  Tensor backward(const Tensor& gy) override {
    Tensor cur = gy;
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) {
      cur = (*it)->backward(cur);
    }
    return cur;
  }

  void collect_params(std::vector<ParamRef>& out) override {
    for (auto& layer : layers_) layer->collect_params(out);
  }

 private:
  std::vector<std::unique_ptr<Layer>> layers_;
};

// y = body(x) + x, optionally followed by ReLU. Requires body to preserve
// the input shape.
class ResidualAdd final : public Layer {
 public:
  ResidualAdd(std::unique_ptr<Layer> body, bool final_relu)
      : body_(std::move(body)), final_relu_(final_relu) {}

  Tensor forward(const Tensor& x, Mode mode) override {
    Tensor y = body_->forward(x, mode);
    if (!y.same_shape(x)) {
      throw StructuralError("residual body must preserve shape");
    }
    y += x;
    if (final_relu_) {
      for (double& v : y.data) v = v > 0.0 ? v : 0.0;
    }
    y_ = y;
    return y;
  }

  Tensor backward(const Tensor& gy) override {
    Tensor g = gy;
    if (final_relu_) {
      for (std::size_t i = 0; i < g.data.size(); ++i) {
        if (y_.data[i] <= 0.0) g.data[i] = 0.0;
      }
    }
    Tensor gx = body_->backward(g);
    gx += g;
    return gx;
  }

  void collect_params(std::vector<ParamRef>& out) override {
    body_->collect_params(out);
  }

 private:
  std::unique_ptr<Layer> body_;
  bool final_relu_;
  Tensor y_;
};

// Runs two branches on the same input and concatenates their outputs along
// the channel dimension.
class ConcatPair final : public Layer {
 public:
  ConcatPair(std::unique_ptr<Layer> left, std::unique_ptr<Layer> right)
      : left_(std::move(left)), right_(std::move(right)) {}

  Tensor forward(const Tensor& x, Mode mode) override {
    Tensor yl = left_->forward(x, mode);
    Tensor yr = right_->forward(x, mode);
    if (yl.dim(0) != yr.dim(0) || yl.dim(2) != yr.dim(2) || yl.dim(3) != yr.dim(3)) {
      throw StructuralError("concat branches disagree on output shape");
    }
    c_left_ = yl.dim(1);
    c_right_ = yr.dim(1);
    const int n_batch = yl.dim(0), h = yl.dim(2), w = yl.dim(3);
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    Tensor y({n_batch, c_left_ + c_right_, h, w});
    for (int n = 0; n < n_batch; ++n) {
      for (int c = 0; c < c_left_; ++c) {
        std::copy_n(&yl.data[(static_cast<std::size_t>(n) * c_left_ + c) * plane], plane,
                    &y.data[(static_cast<std::size_t>(n) * (c_left_ + c_right_) + c) * plane]);
      }
      for (int c = 0; c < c_right_; ++c) {
        std::copy_n(&yr.data[(static_cast<std::size_t>(n) * c_right_ + c) * plane], plane,
                    &y.data[(static_cast<std::size_t>(n) * (c_left_ + c_right_) + c_left_ + c) *
                            plane]);
      }
    }
    return y;
  }

  Tensor backward(const Tensor& gy) override {
    const int n_batch = gy.dim(0), h = gy.dim(2), w = gy.dim(3);
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    const int c_total = c_left_ + c_right_;
    Tensor gl({n_batch, c_left_, h, w});
    Tensor gr({n_batch, c_right_, h, w});
    for (int n = 0; n < n_batch; ++n) {
      for (int c = 0; c < c_left_; ++c) {
        std::copy_n(&gy.data[(static_cast<std::size_t>(n) * c_total + c) * plane], plane,
                    &gl.data[(static_cast<std::size_t>(n) * c_left_ + c) * plane]);
      }
      for (int c = 0; c < c_right_; ++c) {
        std::copy_n(&gy.data[(static_cast<std::size_t>(n) * c_total + c_left_ + c) * plane],
                    plane, &gr.data[(static_cast<std::size_t>(n) * c_right_ + c) * plane]);
      }
    }
    Tensor gx = left_->backward(gl);
    gx += right_->backward(gr);
    return gx;
  }

  void collect_params(std::vector<ParamRef>& out) override {
    left_->collect_params(out);
    right_->collect_params(out);
  }

 private:
  std::unique_ptr<Layer> left_, right_;
  int c_left_ = 0, c_right_ = 0;
};

// Mean softmax cross-entropy. Returns the loss and d(loss)/d(logits).
inline std::pair<double, Tensor> softmax_cross_entropy(
    const Tensor& logits, const std::vector<int>& labels) {
  const int n_batch = logits.dim(0), classes = logits.dim(1);
  if (static_cast<std::size_t>(n_batch) != labels.size()) {
    throw StructuralError("label count does not match batch size");
  }
  Tensor dlogits({n_batch, classes});
  double loss = 0.0;
  for (int n = 0; n < n_batch; ++n) {
    if (labels[static_cast<std::size_t>(n)] < 0 ||
        labels[static_cast<std::size_t>(n)] >= classes) {
      throw DataError("label out of range: " +
                      std::to_string(labels[static_cast<std::size_t>(n)]));
    }
    const double* zp = &logits.data[static_cast<std::size_t>(n) * classes];
    double zmax = zp[0];
    for (int c = 1; c < classes; ++c) zmax = std::max(zmax, zp[c]);
    double zsum = 0.0;
    for (int c = 0; c < classes; ++c) zsum += std::exp(zp[c] - zmax);
    const double log_zsum = std::log(zsum);
    const int y = labels[static_cast<std::size_t>(n)];
    loss += -(zp[y] - zmax - log_zsum);
    double* dp = &dlogits.data[static_cast<std::size_t>(n) * classes];
    for (int c = 0; c < classes; ++c) {
      const double p = std::exp(zp[c] - zmax) / zsum;
      dp[c] = (p - (c == y ? 1.0 : 0.0)) / static_cast<double>(n_batch);
    }
  }
  loss /= static_cast<double>(n_batch);
  return {loss, std::move(dlogits)};
}

}  // namespace fednas
