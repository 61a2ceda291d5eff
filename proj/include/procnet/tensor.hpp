#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <utility>
#include <vector>

#include "procnet/common.hpp"

namespace procnet {

// Dense float32 tensor, row-major. Image data uses NCHW order. Reductions
// and convolution inner loops accumulate in double; storage stays float.
struct Tensor {
  std::vector<int> shape;
  std::vector<float> data;
  int node = -1;  // slot in a GradientGraph, -1 = untracked

  Tensor() = default;
  explicit Tensor(std::vector<int> s, float fill = 0.0f) : shape(std::move(s)) {
    for (int e : shape) require(e >= 0, "tensor: negative extent");
    data.assign(static_cast<size_t>(numel(shape)), fill);
  }
  Tensor(std::vector<int> s, std::vector<float> v) : shape(std::move(s)), data(std::move(v)) {
    require(numel(shape) == static_cast<int64_t>(data.size()), "tensor: shape/data size mismatch");
  }

  static int64_t numel(const std::vector<int>& s) {
    int64_t n = 1;
    for (int e : s) n *= e;
    return n;
  }

  int rank() const { return static_cast<int>(shape.size()); }
  int64_t size() const { return static_cast<int64_t>(data.size()); }
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }

  float& at(int n, int c, int y, int x) {
    return data[((static_cast<size_t>(n) * dim(1) + c) * dim(2) + y) * dim(3) + x];
  }
  float at(int n, int c, int y, int x) const {
    return data[((static_cast<size_t>(n) * dim(1) + c) * dim(2) + y) * dim(3) + x];
  }

  // Value of a scalar (size-1) tensor.
  float scalar() const {
    require(size() == 1, "tensor: scalar() on non-scalar");
    return data[0];
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  void fill_uniform(std::mt19937& rng, float lo, float hi) {
    std::uniform_real_distribution<float> d(lo, hi);
    for (auto& v : data) v = d(rng);
  }
};

// Reverse-mode gradient tape. Ops append a closure at recording time;
// backward() replays the tape once in reverse order. Gradient slots are
// zero-initialised, so nodes unused by the loss keep zero gradients.
class GradientGraph {
 public:
  GradientGraph() = default;
  GradientGraph(const GradientGraph&) = delete;
  GradientGraph& operator=(const GradientGraph&) = delete;

  // Registers a leaf; returns a copy whose node id points at a grad slot.
  Tensor track(const Tensor& t) {
    Tensor out = t;
    out.node = add_slot(t.size());
    return out;
  }

  int add_slot(int64_t n) {
    slots_.emplace_back(static_cast<size_t>(n), 0.0f);
    return static_cast<int>(slots_.size() - 1);
  }

  std::vector<float>& grad(int node) { return slots_[static_cast<size_t>(node)]; }
  const std::vector<float>& grad(int node) const { return slots_[static_cast<size_t>(node)]; }

  const std::vector<float>& grad_of(const Tensor& t) const {
    require(t.node >= 0, "grad_of: tensor is not tracked");
    return slots_[static_cast<size_t>(t.node)];
  }

  void record(std::function<void(GradientGraph&)> back) { tape_.push_back(std::move(back)); }

  size_t num_ops() const { return tape_.size(); }

  void backward(const Tensor& loss) {
    require(loss.size() == 1, "backward: loss must be scalar");
    require(loss.node >= 0, "backward: loss is not tracked");
    if (ran_) throw std::logic_error("backward: tape already consumed");
    ran_ = true;
    grad(loss.node)[0] = 1.0f;
    for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) (*it)(*this);
  }

 private:
  std::vector<std::vector<float>> slots_;
  std::vector<std::function<void(GradientGraph&)>> tape_;
  bool ran_ = false;
};

namespace detail {

inline bool tracked(const Tensor& t) { return t.node >= 0; }

inline void add_into(std::vector<float>& dst, const std::vector<double>& src) {
  for (size_t i = 0; i < dst.size(); ++i) dst[i] += static_cast<float>(src[i]);
}

}  // namespace detail

// Same-padded stride-1 convolution, odd square kernel. input [N,Ci,H,W],
// kernel [Co,Ci,k,k], bias [Co] -> [N,Co,H,W].
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, GradientGraph* g = nullptr) {
  require(x.rank() == 4, "conv2d: input must be rank 4");
  require(w.rank() == 4, "conv2d: kernel must be rank 4");
  const int N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Co = w.dim(0), k = w.dim(2);
  require(w.dim(1) == Ci, "conv2d: kernel input-channel mismatch");
  require(w.dim(3) == k, "conv2d: kernel must be square");
  require(k % 2 == 1, "conv2d: kernel size must be odd");
  require(b.rank() == 1 && b.dim(0) == Co, "conv2d: bias must have one entry per output channel");

  const int p = k / 2;
  Tensor out({N, Co, H, W});
  std::vector<double> acc(static_cast<size_t>(H) * W);
  for (int n = 0; n < N; ++n) {
    for (int co = 0; co < Co; ++co) {
      std::fill(acc.begin(), acc.end(), static_cast<double>(b.data[static_cast<size_t>(co)]));
      for (int ci = 0; ci < Ci; ++ci) {
        const float* in = &x.data[(static_cast<size_t>(n) * Ci + ci) * H * W];
        for (int ky = 0; ky < k; ++ky) {
          const int oy = ky - p;
          const int y0 = std::max(0, -oy), y1 = std::min(H, H - oy);
          for (int kx = 0; kx < k; ++kx) {
            const int ox = kx - p;
            const int x0 = std::max(0, -ox), x1 = std::min(W, W - ox);
            const double wv = w.data[((static_cast<size_t>(co) * Ci + ci) * k + ky) * k + kx];
            if (wv == 0.0) continue;
            for (int y = y0; y < y1; ++y) {
              const float* row = in + static_cast<size_t>(y + oy) * W + ox;
              double* arow = acc.data() + static_cast<size_t>(y) * W;
              for (int xx = x0; xx < x1; ++xx) arow[xx] += wv * row[xx];
            }
          }
        }
      }
      float* orow = &out.data[(static_cast<size_t>(n) * Co + co) * H * W];
      for (size_t i = 0; i < acc.size(); ++i) orow[i] = static_cast<float>(acc[i]);
    }
  }

  if (g && (detail::tracked(x) || detail::tracked(w) || detail::tracked(b))) {
    out.node = g->add_slot(out.size());
    const int xn = x.node, wn = w.node, bn = b.node, on = out.node;
    Tensor xv = x, wv = w;
    g->record([=](GradientGraph& gg) {
      const std::vector<float>& go = gg.grad(on);
      if (bn >= 0) {
        std::vector<float>& db = gg.grad(bn);
        for (int co = 0; co < Co; ++co) {
          double s = 0.0;
          for (int n = 0; n < N; ++n) {
            const float* gp = &go[(static_cast<size_t>(n) * Co + co) * H * W];
            for (int i = 0; i < H * W; ++i) s += gp[i];
          }
          db[static_cast<size_t>(co)] += static_cast<float>(s);
        }
      }
      if (wn >= 0) {
        std::vector<float>& dw = gg.grad(wn);
        for (int co = 0; co < Co; ++co) {
          for (int ci = 0; ci < Ci; ++ci) {
            for (int ky = 0; ky < k; ++ky) {
              const int oy = ky - p;
              const int y0 = std::max(0, -oy), y1 = std::min(H, H - oy);
              for (int kx = 0; kx < k; ++kx) {
                const int ox = kx - p;
                const int x0 = std::max(0, -ox), x1 = std::min(W, W - ox);
                double s = 0.0;
                for (int n = 0; n < N; ++n) {
                  const float* gp = &go[(static_cast<size_t>(n) * Co + co) * H * W];
                  const float* in = &xv.data[(static_cast<size_t>(n) * Ci + ci) * H * W];
                  for (int y = y0; y < y1; ++y) {
                    const float* grow = gp + static_cast<size_t>(y) * W;
                    const float* irow = in + static_cast<size_t>(y + oy) * W + ox;
                    for (int xx = x0; xx < x1; ++xx) s += static_cast<double>(grow[xx]) * irow[xx];
                  }
                }
                dw[((static_cast<size_t>(co) * Ci + ci) * k + ky) * k + kx] += static_cast<float>(s);
              }
            }
          }
        }
      }
      if (xn >= 0) {
        std::vector<float>& dx = gg.grad(xn);
        std::vector<double> plane(static_cast<size_t>(H) * W);
        for (int n = 0; n < N; ++n) {
          for (int ci = 0; ci < Ci; ++ci) {
            std::fill(plane.begin(), plane.end(), 0.0);
            for (int co = 0; co < Co; ++co) {
              const float* gp = &go[(static_cast<size_t>(n) * Co + co) * H * W];
              for (int ky = 0; ky < k; ++ky) {
                const int oy = ky - p;
                const int y0 = std::max(0, -oy), y1 = std::min(H, H - oy);
                for (int kx = 0; kx < k; ++kx) {
                  const int ox = kx - p;
                  const int x0 = std::max(0, -ox), x1 = std::min(W, W - ox);
                  const double kv = wv.data[((static_cast<size_t>(co) * Ci + ci) * k + ky) * k + kx];
                  if (kv == 0.0) continue;
                  for (int y = y0; y < y1; ++y) {
                    double* prow = plane.data() + static_cast<size_t>(y + oy) * W + ox;
                    const float* grow = gp + static_cast<size_t>(y) * W;
                    for (int xx = x0; xx < x1; ++xx) prow[xx] += kv * grow[xx];
                  }
                }
              }
            }
            float* drow = &dx[(static_cast<size_t>(n) * Ci + ci) * H * W];
            for (size_t i = 0; i < plane.size(); ++i) drow[i] += static_cast<float>(plane[i]);
          }
        }
      }
    });
  }
  return out;
}

// 2x2 max pooling, stride 2. Backward routes the gradient to the argmax
// element; ties resolve to the first element in scan order.
inline Tensor maxpool2(const Tensor& x, GradientGraph* g = nullptr) {
  require(x.rank() == 4, "maxpool2: input must be rank 4");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  require(H % 2 == 0 && W % 2 == 0, "maxpool2: height and width must be even");
  const int Ho = H / 2, Wo = W / 2;
  Tensor out({N, C, Ho, Wo});
  std::vector<int64_t> argmax(static_cast<size_t>(out.size()));
  size_t oi = 0;
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      const size_t base = (static_cast<size_t>(n) * C + c) * H * W;
      for (int y = 0; y < Ho; ++y) {
        for (int xx = 0; xx < Wo; ++xx) {
          float best = -std::numeric_limits<float>::infinity();
          int64_t bi = -1;
          for (int dy = 0; dy < 2; ++dy) {
            for (int dx = 0; dx < 2; ++dx) {
              const int64_t idx = static_cast<int64_t>(base) + static_cast<int64_t>(2 * y + dy) * W + (2 * xx + dx);
              const float v = x.data[static_cast<size_t>(idx)];
              if (v > best) {
                best = v;
                bi = idx;
              }
            }
          }
          out.data[oi] = best;
          argmax[oi] = bi;
          ++oi;
        }
      }
    }
  }
  if (g && detail::tracked(x)) {
    out.node = g->add_slot(out.size());
    const int xn = x.node, on = out.node;
    g->record([xn, on, argmax](GradientGraph& gg) {
      const std::vector<float>& go = gg.grad(on);
      std::vector<float>& dx = gg.grad(xn);
      for (size_t i = 0; i < argmax.size(); ++i) dx[static_cast<size_t>(argmax[i])] += go[i];
    });
  }
  return out;
}

// Nearest-neighbour 2x upsampling. Backward sums each 2x2 block.
inline Tensor upsample2(const Tensor& x, GradientGraph* g = nullptr) {
  require(x.rank() == 4, "upsample2: input must be rank 4");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor out({N, C, 2 * H, 2 * W});
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      const float* in = &x.data[(static_cast<size_t>(n) * C + c) * H * W];
      float* op = &out.data[(static_cast<size_t>(n) * C + c) * 4 * H * W];
      for (int y = 0; y < H; ++y) {
        for (int xx = 0; xx < W; ++xx) {
          const float v = in[static_cast<size_t>(y) * W + xx];
          const size_t o = static_cast<size_t>(2 * y) * 2 * W + 2 * xx;
          op[o] = v;
          op[o + 1] = v;
          op[o + 2 * W] = v;
          op[o + 2 * W + 1] = v;
        }
      }
    }
  }
  if (g && detail::tracked(x)) {
    out.node = g->add_slot(out.size());
    const int xn = x.node, on = out.node;
    g->record([=](GradientGraph& gg) {
      const std::vector<float>& go = gg.grad(on);
      std::vector<float>& dx = gg.grad(xn);
      for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
          const float* gp = &go[(static_cast<size_t>(n) * C + c) * 4 * H * W];
          float* dp = &dx[(static_cast<size_t>(n) * C + c) * H * W];
          for (int y = 0; y < H; ++y) {
            for (int xx = 0; xx < W; ++xx) {
              const size_t o = static_cast<size_t>(2 * y) * 2 * W + 2 * xx;
              dp[static_cast<size_t>(y) * W + xx] +=
                  gp[o] + gp[o + 1] + gp[o + 2 * W] + gp[o + 2 * W + 1];
            }
          }
        }
      }
    });
  }
  return out;
}

// Concatenates along the channel dimension: [N,Ca,H,W] + [N,Cb,H,W].
inline Tensor concat_channels(const Tensor& a, const Tensor& b, GradientGraph* g = nullptr) {
  require(a.rank() == 4 && b.rank() == 4, "concat_channels: inputs must be rank 4");
  require(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3),
          "concat_channels: batch/spatial mismatch");
  const int N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), H = a.dim(2), W = a.dim(3);
  Tensor out({N, Ca + Cb, H, W});
  const size_t plane = static_cast<size_t>(H) * W;
  for (int n = 0; n < N; ++n) {
    std::copy_n(&a.data[static_cast<size_t>(n) * Ca * plane], Ca * plane,
                &out.data[static_cast<size_t>(n) * (Ca + Cb) * plane]);
    if (Cb > 0)
      std::copy_n(&b.data[static_cast<size_t>(n) * Cb * plane], Cb * plane,
                  &out.data[(static_cast<size_t>(n) * (Ca + Cb) + Ca) * plane]);
  }
  if (g && (detail::tracked(a) || detail::tracked(b))) {
    out.node = g->add_slot(out.size());
    const int an = a.node, bn = b.node, on = out.node;
    g->record([=](GradientGraph& gg) {
      const std::vector<float>& go = gg.grad(on);
      for (int n = 0; n < N; ++n) {
        if (an >= 0) {
          float* da = &gg.grad(an)[static_cast<size_t>(n) * Ca * plane];
          const float* gp = &go[static_cast<size_t>(n) * (Ca + Cb) * plane];
          for (size_t i = 0; i < Ca * plane; ++i) da[i] += gp[i];
        }
        if (bn >= 0 && Cb > 0) {
          float* db = &gg.grad(bn)[static_cast<size_t>(n) * Cb * plane];
          const float* gp = &go[(static_cast<size_t>(n) * (Ca + Cb) + Ca) * plane];
          for (size_t i = 0; i < Cb * plane; ++i) db[i] += gp[i];
        }
      }
    });
  }
  return out;
}

enum class PointwiseOp { Relu, Sigmoid, Tanh, Add, Sub, Mul, Scale };

namespace detail {

inline float stable_sigmoid(float x) {
  if (x >= 0.0f) {
    const float e = std::exp(-x);
    return 1.0f / (1.0f + e);
  }
  const float e = std::exp(x);
  return e / (1.0f + e);
}

inline Tensor unary_pointwise(PointwiseOp op, const Tensor& x, GradientGraph* g) {
  Tensor out = x;
  out.node = -1;
  switch (op) {
    case PointwiseOp::Relu:
      for (auto& v : out.data) v = v > 0.0f ? v : 0.0f;
      break;
    case PointwiseOp::Sigmoid:
      for (auto& v : out.data) v = stable_sigmoid(v);
      break;
    case PointwiseOp::Tanh:
      for (auto& v : out.data) v = std::tanh(v);
      break;
    default:
      throw std::invalid_argument("pointwise: not a unary op");
  }
  if (g && tracked(x)) {
    out.node = g->add_slot(out.size());
    const int xn = x.node, on = out.node;
    if (op == PointwiseOp::Relu) {
      Tensor xv = x;
      g->record([xn, on, xv](GradientGraph& gg) {
        const std::vector<float>& go = gg.grad(on);
        std::vector<float>& dx = gg.grad(xn);
        for (size_t i = 0; i < go.size(); ++i)
          if (xv.data[i] > 0.0f) dx[i] += go[i];  // relu'(0) = 0
      });
    } else {
      Tensor yv = out;  // derivative expressed through the output value
      const bool sig = op == PointwiseOp::Sigmoid;
      g->record([xn, on, yv, sig](GradientGraph& gg) {
        const std::vector<float>& go = gg.grad(on);
        std::vector<float>& dx = gg.grad(xn);
        for (size_t i = 0; i < go.size(); ++i) {
          const float y = yv.data[i];
          dx[i] += go[i] * (sig ? y * (1.0f - y) : 1.0f - y * y);
        }
      });
    }
  }
  return out;
}

inline Tensor binary_pointwise(PointwiseOp op, const Tensor& a, const Tensor& b, GradientGraph* g) {
  require(a.same_shape(b), "pointwise: operand shape mismatch");
  Tensor out(a.shape);
  switch (op) {
    case PointwiseOp::Add:
      for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = a.data[i] + b.data[i];
      break;
    case PointwiseOp::Sub:
      for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = a.data[i] - b.data[i];
      break;
    case PointwiseOp::Mul:
      for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = a.data[i] * b.data[i];
      break;
    default:
      throw std::invalid_argument("pointwise: not a binary op");
  }
  if (g && (tracked(a) || tracked(b))) {
    out.node = g->add_slot(out.size());
    const int an = a.node, bn = b.node, on = out.node;
    if (op == PointwiseOp::Mul) {
      Tensor av = a, bv = b;
      g->record([an, bn, on, av, bv](GradientGraph& gg) {
        const std::vector<float>& go = gg.grad(on);
        if (an >= 0) {
          std::vector<float>& da = gg.grad(an);
          for (size_t i = 0; i < go.size(); ++i) da[i] += go[i] * bv.data[i];
        }
        if (bn >= 0) {
          std::vector<float>& db = gg.grad(bn);
          for (size_t i = 0; i < go.size(); ++i) db[i] += go[i] * av.data[i];
        }
      });
    } else {
      const float bsign = op == PointwiseOp::Sub ? -1.0f : 1.0f;
      g->record([an, bn, on, bsign](GradientGraph& gg) {
        const std::vector<float>& go = gg.grad(on);
        if (an >= 0) {
          std::vector<float>& da = gg.grad(an);
          for (size_t i = 0; i < go.size(); ++i) da[i] += go[i];
        }
        if (bn >= 0) {
          std::vector<float>& db = gg.grad(bn);
          for (size_t i = 0; i < go.size(); ++i) db[i] += bsign * go[i];
        }
      });
    }
  }
  return out;
}

}  // namespace detail

inline Tensor relu(const Tensor& x, GradientGraph* g = nullptr) {
  return detail::unary_pointwise(PointwiseOp::Relu, x, g);
}
inline Tensor sigmoid(const Tensor& x, GradientGraph* g = nullptr) {
  return detail::unary_pointwise(PointwiseOp::Sigmoid, x, g);
}
inline Tensor tanh_op(const Tensor& x, GradientGraph* g = nullptr) {
  return detail::unary_pointwise(PointwiseOp::Tanh, x, g);
}
inline Tensor add(const Tensor& a, const Tensor& b, GradientGraph* g = nullptr) {
  return detail::binary_pointwise(PointwiseOp::Add, a, b, g);
}
inline Tensor sub(const Tensor& a, const Tensor& b, GradientGraph* g = nullptr) {
  return detail::binary_pointwise(PointwiseOp::Sub, a, b, g);
}
inline Tensor mul(const Tensor& a, const Tensor& b, GradientGraph* g = nullptr) {
  return detail::binary_pointwise(PointwiseOp::Mul, a, b, g);
}

// Multiplication by a scalar constant; the constant is not differentiated.
inline Tensor scale(const Tensor& x, float s, GradientGraph* g = nullptr) {
  Tensor out = x;
  out.node = -1;
  for (auto& v : out.data) v *= s;
  if (g && detail::tracked(x)) {
    out.node = g->add_slot(out.size());
    const int xn = x.node, on = out.node;
    g->record([xn, on, s](GradientGraph& gg) {
      const std::vector<float>& go = gg.grad(on);
      std::vector<float>& dx = gg.grad(xn);
      for (size_t i = 0; i < go.size(); ++i) dx[i] += s * go[i];
    });
  }
  return out;
}

// Per-channel broadcast multiply: out[n,c,y,x] = x[n,c,y,x] * s[c].
inline Tensor channel_scale(const Tensor& x, const Tensor& s, GradientGraph* g = nullptr) {
  require(x.rank() == 4, "channel_scale: input must be rank 4");
  require(s.rank() == 1 && s.dim(0) == x.dim(1), "channel_scale: one factor per channel required");
  const int N = x.dim(0), C = x.dim(1);
  const size_t plane = static_cast<size_t>(x.dim(2)) * x.dim(3);
  Tensor out(x.shape);
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const float f = s.data[static_cast<size_t>(c)];
      const size_t base = (static_cast<size_t>(n) * C + c) * plane;
      for (size_t i = 0; i < plane; ++i) out.data[base + i] = x.data[base + i] * f;
    }
  if (g && (detail::tracked(x) || detail::tracked(s))) {
    out.node = g->add_slot(out.size());
    const int xn = x.node, sn = s.node, on = out.node;
    Tensor xv = x, sv = s;
    g->record([=](GradientGraph& gg) {
      const std::vector<float>& go = gg.grad(on);
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
          const size_t base = (static_cast<size_t>(n) * C + c) * plane;
          if (xn >= 0) {
            std::vector<float>& dx = gg.grad(xn);
            const float f = sv.data[static_cast<size_t>(c)];
            for (size_t i = 0; i < plane; ++i) dx[base + i] += go[base + i] * f;
          }
          if (sn >= 0) {
            double acc = 0.0;
            for (size_t i = 0; i < plane; ++i)
              acc += static_cast<double>(go[base + i]) * xv.data[base + i];
            gg.grad(sn)[static_cast<size_t>(c)] += static_cast<float>(acc);
          }
        }
    });
  }
  return out;
}

// Per-channel broadcast add: out[n,c,y,x] = x[n,c,y,x] + b[c].
inline Tensor channel_bias(const Tensor& x, const Tensor& b, GradientGraph* g = nullptr) {
  require(x.rank() == 4, "channel_bias: input must be rank 4");
  require(b.rank() == 1 && b.dim(0) == x.dim(1), "channel_bias: one entry per channel required");
  const int N = x.dim(0), C = x.dim(1);
  const size_t plane = static_cast<size_t>(x.dim(2)) * x.dim(3);
  Tensor out(x.shape);
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const float f = b.data[static_cast<size_t>(c)];
      const size_t base = (static_cast<size_t>(n) * C + c) * plane;
      for (size_t i = 0; i < plane; ++i) out.data[base + i] = x.data[base + i] + f;
    }
  if (g && (detail::tracked(x) || detail::tracked(b))) {
    out.node = g->add_slot(out.size());
    const int xn = x.node, bn = b.node, on = out.node;
    g->record([=](GradientGraph& gg) {
      const std::vector<float>& go = gg.grad(on);
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
          const size_t base = (static_cast<size_t>(n) * C + c) * plane;
          if (xn >= 0) {
            std::vector<float>& dx = gg.grad(xn);
            for (size_t i = 0; i < plane; ++i) dx[base + i] += go[base + i];
          }
          if (bn >= 0) {
            double acc = 0.0;
            for (size_t i = 0; i < plane; ++i) acc += go[base + i];
            gg.grad(bn)[static_cast<size_t>(c)] += static_cast<float>(acc);
          }
        }
    });
  }
  return out;
}

// Arithmetic mean over all elements -> scalar tensor of shape {1}.
inline Tensor reduce_mean(const Tensor& x, GradientGraph* g = nullptr) {
  require(x.size() > 0, "reduce_mean: empty tensor");
  double s = 0.0;
  for (float v : x.data) s += v;
  Tensor out({1});
  out.data[0] = static_cast<float>(s / static_cast<double>(x.size()));
  if (g && detail::tracked(x)) {
    out.node = g->add_slot(1);
    const int xn = x.node, on = out.node;
    const float inv = 1.0f / static_cast<float>(x.size());
    g->record([xn, on, inv](GradientGraph& gg) {
      const float go = gg.grad(on)[0];
      std::vector<float>& dx = gg.grad(xn);
      const float v = go * inv;
      for (auto& d : dx) d += v;
    });
  }
  return out;
}

// Per-pixel softmax over the channel dimension of [N,C,H,W].
inline Tensor softmax_channels(const Tensor& x, GradientGraph* g = nullptr) {
  require(x.rank() == 4, "softmax_channels: input must be rank 4");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  require(C > 0, "softmax_channels: need at least one channel");
  Tensor out(x.shape);
  const size_t plane = static_cast<size_t>(H) * W;
  for (int n = 0; n < N; ++n) {
    const size_t nb = static_cast<size_t>(n) * C * plane;
    for (size_t p = 0; p < plane; ++p) {
      float mx = -std::numeric_limits<float>::infinity();
      for (int c = 0; c < C; ++c) mx = std::max(mx, x.data[nb + c * plane + p]);
      double z = 0.0;
      for (int c = 0; c < C; ++c) z += std::exp(static_cast<double>(x.data[nb + c * plane + p] - mx));
      for (int c = 0; c < C; ++c)
        out.data[nb + c * plane + p] =
            static_cast<float>(std::exp(static_cast<double>(x.data[nb + c * plane + p] - mx)) / z);
    }
  }
  if (g && detail::tracked(x)) {
    out.node = g->add_slot(out.size());
    const int xn = x.node, on = out.node;
    Tensor pv = out;
    g->record([=](GradientGraph& gg) {
      const std::vector<float>& go = gg.grad(on);
      std::vector<float>& dx = gg.grad(xn);
      for (int n = 0; n < N; ++n) {
        const size_t nb = static_cast<size_t>(n) * C * plane;
        for (size_t p = 0; p < plane; ++p) {
          double dot = 0.0;
          for (int c = 0; c < C; ++c)
            dot += static_cast<double>(pv.data[nb + c * plane + p]) * go[nb + c * plane + p];
          for (int c = 0; c < C; ++c) {
            const size_t i = nb + c * plane + p;
            dx[i] += pv.data[i] * static_cast<float>(go[i] - dot);
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking

// A checkable problem: deterministic leaf construction plus a loss function
// that may run with or without a recording graph.
struct GradCheckCase {
  std::function<std::vector<Tensor>(std::mt19937&)> make_inputs;
  std::function<Tensor(std::vector<Tensor>&, GradientGraph*)> loss;
};

// Max over all leaf coordinates of |analytic - central difference| /
// max(1, |central difference|). The finite-difference side never touches
// the tape, so it stays an independent derivative route.
inline double grad_check(const GradCheckCase& c, uint32_t seed, double step = 1e-3) {
  std::mt19937 rng(seed);
  std::vector<Tensor> leaves = c.make_inputs(rng);

  GradientGraph g;
  std::vector<Tensor> tracked;
  tracked.reserve(leaves.size());
  for (const Tensor& t : leaves) tracked.push_back(g.track(t));
  Tensor loss = c.loss(tracked, &g);
  require(loss.size() == 1, "grad_check: loss must be scalar");
  if (!std::isfinite(loss.scalar())) throw numeric_error("grad_check: non-finite loss");
  g.backward(loss);

  auto eval = [&](std::vector<Tensor>& pts) -> double {
    Tensor l = c.loss(pts, nullptr);
    const double v = l.scalar();
    if (!std::isfinite(v)) throw numeric_error("grad_check: non-finite loss during probing");
    return v;
  };

  double worst = 0.0;
  for (size_t li = 0; li < leaves.size(); ++li) {
    const std::vector<float>& an = g.grad_of(tracked[li]);
    for (size_t i = 0; i < leaves[li].data.size(); ++i) {
      const float saved = leaves[li].data[i];
      leaves[li].data[i] = static_cast<float>(saved + step);
      const double up = eval(leaves);
      leaves[li].data[i] = static_cast<float>(saved - step);
      const double dn = eval(leaves);
      leaves[li].data[i] = saved;
      const double fd = (up - dn) / (2.0 * step);
      const double err = std::abs(static_cast<double>(an[i]) - fd) / std::max(1.0, std::abs(fd));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace procnet
