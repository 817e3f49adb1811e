#pragma once

#include <algorithm>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <utility>
#include <vector>

#include <cblas.h>

#include "lowlight/common.hpp"

extern "C" void openblas_set_num_threads(int);

namespace lowlight {

class Tensor;

namespace detail {

struct TapeNode {
  // Same element count as the node's value; accumulates d(loss)/d(value).
  std::shared_ptr<std::vector<double>> grad;
  // Null for leaves. Receives this node's accumulated gradient and adds the
  // resulting contributions into the parents' buffers.
  std::function<void(const std::vector<double>&)> back;
};

struct TapeImpl {
  std::vector<TapeNode> nodes;
  bool consumed = false;
};

inline void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha,
                 const double* a, int lda, const double* b, int ldb, double beta,
                 double* c, int ldc) {
  if (m == 0 || n == 0) return;
  static const bool blas_init = [] {
    openblas_set_num_threads(1);  // results must not depend on worker count
    return true;
  }();
  (void)blas_init;
  if (k == 0) {
    if (beta == 0.0)
      for (int i = 0; i < m; ++i) std::fill(c + static_cast<std::size_t>(i) * ldc, c + static_cast<std::size_t>(i) * ldc + n, 0.0);
    return;
  }
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b,
              ldb, beta, c, ldc);
}

// col is [C*kh*kw, OH*OW]; out-of-range taps become zero.
inline void im2col(const double* im, int C, int H, int W, int kh, int kw,
                   int stride, int pad, int OH, int OW, double* col) {
  for (int ci = 0; ci < C; ++ci) {
    for (int r = 0; r < kh; ++r) {
      for (int c = 0; c < kw; ++c) {
        double* dst = col + (static_cast<std::size_t>((ci * kh + r) * kw + c)) * OH * OW;
        for (int oh = 0; oh < OH; ++oh) {
          const int ih = oh * stride - pad + r;
          double* drow = dst + static_cast<std::size_t>(oh) * OW;
          if (ih < 0 || ih >= H) {
            std::fill(drow, drow + OW, 0.0);
            continue;
          }
          const double* irow = im + (static_cast<std::size_t>(ci) * H + ih) * W;
          for (int ow = 0; ow < OW; ++ow) {
            const int iw = ow * stride - pad + c;
            drow[ow] = (iw >= 0 && iw < W) ? irow[iw] : 0.0;
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-adds col back into the image.
inline void col2im_add(const double* col, int C, int H, int W, int kh, int kw,
                       int stride, int pad, int OH, int OW, double* im) {
  for (int ci = 0; ci < C; ++ci) {
    for (int r = 0; r < kh; ++r) {
      for (int c = 0; c < kw; ++c) {
        const double* src = col + (static_cast<std::size_t>((ci * kh + r) * kw + c)) * OH * OW;
        for (int oh = 0; oh < OH; ++oh) {
          const int ih = oh * stride - pad + r;
          if (ih < 0 || ih >= H) continue;
          const double* srow = src + static_cast<std::size_t>(oh) * OW;
          double* irow = im + (static_cast<std::size_t>(ci) * H + ih) * W;
          for (int ow = 0; ow < OW; ++ow) {
            const int iw = ow * stride - pad + c;
            if (iw >= 0 && iw < W) irow[iw] += srow[ow];
          }
        }
      }
    }
  }
}

inline std::string shape_str(const std::vector<int>& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

}  // namespace detail

// Dense N-d array of 64-bit floats, row-major. Copies are shallow (handles to
// shared storage). A tensor is a constant unless it was produced by an op whose
// inputs participate in a live GradientTape, or was watch()ed on one.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<double>>(count(shape_), 0.0)) {}

  Tensor(std::vector<int> shape, std::vector<double> values) : shape_(std::move(shape)) {
    check_shape(count(shape_) == values.size(),
                "tensor value count does not match shape " + detail::shape_str(shape_));
    data_ = std::make_shared<std::vector<double>>(std::move(values));
  }

  static Tensor full(std::vector<int> shape, double v) {
    Tensor t(std::move(shape));
    std::fill(t.mutable_data().begin(), t.mutable_data().end(), v);
    return t;
  }
  static Tensor scalar(double v) { return Tensor({1}, {v}); }
  static Tensor randn(std::vector<int> shape, Rng& rng, double sigma = 1.0) {
    Tensor t(std::move(shape));
    for (auto& v : t.mutable_data()) v = rng.normal(0.0, sigma);
    return t;
  }

  bool defined() const { return static_cast<bool>(data_); }
  const std::vector<int>& shape() const { return shape_; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  std::size_t numel() const { return data_ ? data_->size() : 0; }

  const std::vector<double>& data() const& { return *data_; }
  const std::vector<double>& data() const&& = delete;  // would dangle
  // Direct element access; for construction and export. Mutating a tensor that
  // is already recorded on a live tape invalidates that tape's gradients.
  std::vector<double>& mutable_data() & { return *data_; }

  double value() const {
    check_shape(numel() == 1, "value() requires a single-element tensor");
    return (*data_)[0];
  }
  double at(int b, int c, int h, int w) const {
    return (*data_)[idx(b, c, h, w)];
  }
  std::size_t idx(int b, int c, int h, int w) const {
    return ((static_cast<std::size_t>(b) * static_cast<std::size_t>(dim(1)) + static_cast<std::size_t>(c)) *
                static_cast<std::size_t>(dim(2)) +
            static_cast<std::size_t>(h)) *
               static_cast<std::size_t>(dim(3)) +
           static_cast<std::size_t>(w);
  }

  /// True while this tensor participates in a live (unconsumed) tape.
  bool on_tape() const { return static_cast<bool>(live_tape()); }
  bool has_grad() const { return static_cast<bool>(grad_); }
  const std::vector<double>& grad() const {
    check_state(static_cast<bool>(grad_), "tensor has no gradient buffer");
    return *grad_;
  }

  // -- internal surface used by op implementations and the tape --
  std::shared_ptr<detail::TapeImpl> live_tape() const {
    auto impl = tape_.lock();
    if (impl && !impl->consumed && node_ >= 0) return impl;
    return nullptr;
  }
  std::shared_ptr<std::vector<double>> grad_handle() const { return grad_; }
  void bind(std::weak_ptr<detail::TapeImpl> tape, int node,
            std::shared_ptr<std::vector<double>> grad) {
    tape_ = std::move(tape);
    node_ = node;
    grad_ = std::move(grad);
  }

  static std::size_t count(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) {
      check_shape(d >= 0, "negative tensor extent");
      n *= static_cast<std::size_t>(d);
    }
    return n;
  }

 private:
  std::vector<int> shape_;
  std::shared_ptr<std::vector<double>> data_;
  std::shared_ptr<std::vector<double>> grad_;
  std::weak_ptr<detail::TapeImpl> tape_;
  int node_ = -1;
};

namespace detail {

inline std::shared_ptr<TapeImpl> joint_tape(std::initializer_list<const Tensor*> inputs) {
  std::shared_ptr<TapeImpl> found;
  for (const Tensor* t : inputs) {
    auto tp = t->live_tape();
    if (!tp) continue;
    if (found && tp != found)
      throw StateError("operands are recorded on different gradient tapes");
    found = tp;
  }
  return found;
}

inline void record(const std::shared_ptr<TapeImpl>& tape, Tensor& out,
                   std::function<void(const std::vector<double>&)> back) {
  if (!tape) return;
  TapeNode node;
  node.grad = std::make_shared<std::vector<double>>(out.numel(), 0.0);
  node.back = std::move(back);
  tape->nodes.push_back(std::move(node));
  out.bind(tape, static_cast<int>(tape->nodes.size()) - 1, tape->nodes.back().grad);
}

}  // namespace detail

// Records the operations of one forward pass. Nodes are appended in execution
// order, which is a topological order; backward() walks them strictly in
// reverse and accumulates gradients additively, so a tensor feeding several
// consumers receives the sum of all path contributions. One forward/backward
// pass is confined to a single thread.
class Tape {
 public:
  Tape() : impl_(std::make_shared<detail::TapeImpl>()) {}

  /// Registers a leaf (parameter) tensor. Its gradient buffer is zeroed now and
  /// filled by backward().
  void watch(Tensor& t) {
    check_state(!impl_->consumed, "cannot watch tensors on a consumed tape");
    auto live = t.live_tape();
    if (live == impl_) return;  // already watched here
    check_state(!live, "tensor already participates in another live tape");
    detail::TapeNode node;
    node.grad = std::make_shared<std::vector<double>>(t.numel(), 0.0);
    impl_->nodes.push_back(node);
    t.bind(impl_, static_cast<int>(impl_->nodes.size()) - 1, impl_->nodes.back().grad);
  }

  std::size_t node_count() const { return impl_->nodes.size(); }
  bool consumed() const { return impl_->consumed; }

  std::shared_ptr<detail::TapeImpl> impl() const { return impl_; }

 private:
  std::shared_ptr<detail::TapeImpl> impl_;
};

/// Reverse-mode sweep from a scalar loss. Populates grad() on every tape
/// participant and consumes the tape.
inline void backward(const Tensor& loss) {
  check_arg(loss.numel() == 1, "backward requires a scalar loss tensor");
  auto impl = loss.live_tape();
  check_state(static_cast<bool>(impl), "backward requires a loss recorded on a live tape");
  impl->consumed = true;
  auto& nodes = impl->nodes;
  // Seed d(loss)/d(loss) = 1 and walk in reverse topological order.
  const Tensor seed_probe = loss;
  (*seed_probe.grad_handle())[0] = 1.0;
  for (std::size_t i = nodes.size(); i-- > 0;) {
    auto& n = nodes[i];
    if (!n.back) continue;
    const auto& g = *n.grad;
    bool any = false;
    for (double v : g)
      if (v != 0.0) {
        any = true;
        break;
      }
    if (any) n.back(g);
  }
}

// ---- op helpers -------------------------------------------------------------

namespace detail {

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  check_shape(a.shape() == b.shape(), std::string(op) + ": shape mismatch " +
                                          shape_str(a.shape()) + " vs " +
                                          shape_str(b.shape()));
}

inline void check_4d(const Tensor& t, const char* op) {
  check_shape(t.ndim() == 4, std::string(op) + ": expected a 4-d tensor, got " +
                                 shape_str(t.shape()));
}

template <typename Fwd, typename Bwd>
Tensor elementwise_unary(const Tensor& x, Fwd fwd, Bwd dfdx) {
  Tensor out(x.shape());
  const auto& xd = x.data();
  auto& od = out.mutable_data();
  for (std::size_t i = 0; i < xd.size(); ++i) od[i] = fwd(xd[i]);
  auto tape = joint_tape({&x});
  if (tape) {
    auto gx = x.grad_handle();
    const Tensor xc = x;
    record(tape, out, [gx, xc, dfdx](const std::vector<double>& og) {
      if (!gx) return;
      const auto& xd = xc.data();
      auto& g = *gx;
      for (std::size_t i = 0; i < og.size(); ++i) g[i] += og[i] * dfdx(xd[i]);
    });
  }
  return out;
}

}  // namespace detail

// ---- elementwise and reduction ops -------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "add");
  Tensor out(a.shape());
  const auto& ad = a.data();
  const auto& bd = b.data();
  auto& od = out.mutable_data();
  for (std::size_t i = 0; i < ad.size(); ++i) od[i] = ad[i] + bd[i];
  auto tape = detail::joint_tape({&a, &b});
  if (tape) {
    auto ga = a.grad_handle(), gb = b.grad_handle();
    detail::record(tape, out, [ga, gb](const std::vector<double>& og) {
      if (ga)
        for (std::size_t i = 0; i < og.size(); ++i) (*ga)[i] += og[i];
      if (gb)
        for (std::size_t i = 0; i < og.size(); ++i) (*gb)[i] += og[i];
    });
  }
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "sub");
  Tensor out(a.shape());
  const auto& ad = a.data();
  const auto& bd = b.data();
  auto& od = out.mutable_data();
  for (std::size_t i = 0; i < ad.size(); ++i) od[i] = ad[i] - bd[i];
  auto tape = detail::joint_tape({&a, &b});
  if (tape) {
    auto ga = a.grad_handle(), gb = b.grad_handle();
    detail::record(tape, out, [ga, gb](const std::vector<double>& og) {
      if (ga)
        for (std::size_t i = 0; i < og.size(); ++i) (*ga)[i] += og[i];
      if (gb)
        for (std::size_t i = 0; i < og.size(); ++i) (*gb)[i] -= og[i];
    });
  }
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "mul");
  Tensor out(a.shape());
  const auto& ad = a.data();
  const auto& bd = b.data();
  auto& od = out.mutable_data();
  for (std::size_t i = 0; i < ad.size(); ++i) od[i] = ad[i] * bd[i];
  auto tape = detail::joint_tape({&a, &b});
  if (tape) {
    auto ga = a.grad_handle(), gb = b.grad_handle();
    const Tensor ac = a, bc = b;
    detail::record(tape, out, [ga, gb, ac, bc](const std::vector<double>& og) {
      if (ga) {
        const auto& bd = bc.data();
        for (std::size_t i = 0; i < og.size(); ++i) (*ga)[i] += og[i] * bd[i];
      }
      if (gb) {
        const auto& ad = ac.data();
        for (std::size_t i = 0; i < og.size(); ++i) (*gb)[i] += og[i] * ad[i];
      }
    });
  }
  return out;
}

inline Tensor divide(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "divide");
  Tensor out(a.shape());
  const auto& ad = a.data();
  const auto& bd = b.data();
  auto& od = out.mutable_data();
  for (std::size_t i = 0; i < ad.size(); ++i) od[i] = ad[i] / bd[i];
  auto tape = detail::joint_tape({&a, &b});
  if (tape) {
    auto ga = a.grad_handle(), gb = b.grad_handle();
    const Tensor ac = a, bc = b;
    detail::record(tape, out, [ga, gb, ac, bc](const std::vector<double>& og) {
      const auto& ad = ac.data();
      const auto& bd = bc.data();
      if (ga)
        for (std::size_t i = 0; i < og.size(); ++i) (*ga)[i] += og[i] / bd[i];
      if (gb)
        for (std::size_t i = 0; i < og.size(); ++i)
          (*gb)[i] -= og[i] * ad[i] / (bd[i] * bd[i]);
    });
  }
  return out;
}

inline Tensor add_scalar(const Tensor& x, double c) {
  return detail::elementwise_unary(
      x, [c](double v) { return v + c; }, [](double) { return 1.0; });
}

inline Tensor mul_scalar(const Tensor& x, double c) {
  return detail::elementwise_unary(
      x, [c](double v) { return v * c; }, [c](double) { return c; });
}

/// Elementwise absolute value; subgradient 0 at exactly zero.
inline Tensor abs(const Tensor& x) {
  return detail::elementwise_unary(
      x, [](double v) { return std::fabs(v); },
      [](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

/// max(0,x) + 0.2*min(0,x). Subgradient at exactly 0 is fixed to 1.
inline Tensor leaky_relu(const Tensor& x) {
  return detail::elementwise_unary(
      x, [](double v) { return v >= 0.0 ? v : 0.2 * v; },
      [](double v) { return v >= 0.0 ? 1.0 : 0.2; });
}

inline Tensor relu(const Tensor& x) {
  return detail::elementwise_unary(
      x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  Tensor out = Tensor::scalar(s);
  auto tape = detail::joint_tape({&x});
  if (tape) {
    auto gx = x.grad_handle();
    const std::size_t n = x.numel();
    detail::record(tape, out, [gx, n](const std::vector<double>& og) {
      if (!gx) return;
      for (std::size_t i = 0; i < n; ++i) (*gx)[i] += og[0];
    });
  }
  return out;
}

inline Tensor mean(const Tensor& x) {
  check_arg(x.numel() > 0, "mean of an empty tensor");
  double s = 0.0;
  for (double v : x.data()) s += v;
  const double inv = 1.0 / static_cast<double>(x.numel());
  Tensor out = Tensor::scalar(s * inv);
  auto tape = detail::joint_tape({&x});
  if (tape) {
    auto gx = x.grad_handle();
    const std::size_t n = x.numel();
    detail::record(tape, out, [gx, n, inv](const std::vector<double>& og) {
      if (!gx) return;
      for (std::size_t i = 0; i < n; ++i) (*gx)[i] += og[0] * inv;
    });
  }
  return out;
}

inline Tensor reshape(const Tensor& x, std::vector<int> new_shape) {
  check_shape(Tensor::count(new_shape) == x.numel(),
              "reshape: element count mismatch for " + detail::shape_str(new_shape));
  Tensor out(std::move(new_shape), x.data());
  auto tape = detail::joint_tape({&x});
  if (tape) {
    auto gx = x.grad_handle();
    detail::record(tape, out, [gx](const std::vector<double>& og) {
      if (!gx) return;
      for (std::size_t i = 0; i < og.size(); ++i) (*gx)[i] += og[i];
    });
  }
  return out;
}

// ---- layer primitives ---------------------------------------------------------

/// Cross-correlation (deep-learning convention, no kernel flip).
/// input [B,Cin,H,W], kernel [Cout,Cin,kh,kw] with odd kh,kw, bias [Cout].
inline Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
                     int stride, int padding) {
  detail::check_4d(input, "conv2d");
  detail::check_4d(kernel, "conv2d kernel");
  check_arg(stride > 0, "conv2d: stride must be positive");
  check_arg(padding >= 0, "conv2d: padding must be non-negative");
  const int B = input.dim(0), Cin = input.dim(1), H = input.dim(2), W = input.dim(3);
  const int Cout = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  check_arg(kh % 2 == 1 && kw % 2 == 1, "conv2d: kernel extents must be odd");
  check_shape(kernel.dim(1) == Cin,
              "conv2d: input has " + std::to_string(Cin) + " channels but kernel expects " +
                  std::to_string(kernel.dim(1)));
  check_shape(bias.ndim() == 1 && bias.dim(0) == Cout,
              "conv2d: bias must have shape [Cout]");
  check_shape(H + 2 * padding >= kh && W + 2 * padding >= kw,
              "conv2d: input smaller than kernel");
  const int OH = (H + 2 * padding - kh) / stride + 1;
  const int OW = (W + 2 * padding - kw) / stride + 1;
  const int CK = Cin * kh * kw;

  Tensor out({B, Cout, OH, OW});
  {
    std::vector<double> col(static_cast<std::size_t>(CK) * OH * OW);
    const double* kd = kernel.data().data();
    auto& od = out.mutable_data();
    const auto& bd = bias.data();
    for (int b = 0; b < B; ++b) {
      const double* im = input.data().data() + static_cast<std::size_t>(b) * Cin * H * W;
      detail::im2col(im, Cin, H, W, kh, kw, stride, padding, OH, OW, col.data());
      double* ob = od.data() + static_cast<std::size_t>(b) * Cout * OH * OW;
      detail::gemm(false, false, Cout, OH * OW, CK, 1.0, kd, CK, col.data(), OH * OW,
                   0.0, ob, OH * OW);
      for (int co = 0; co < Cout; ++co) {
        double* row = ob + static_cast<std::size_t>(co) * OH * OW;
        const double v = bd[static_cast<std::size_t>(co)];
        if (v != 0.0)
          for (int i = 0; i < OH * OW; ++i) row[i] += v;
      }
    }
  }

  auto tape = detail::joint_tape({&input, &kernel, &bias});
  if (tape) {
    auto gin = input.grad_handle(), gk = kernel.grad_handle(), gb = bias.grad_handle();
    const Tensor in_c = input, k_c = kernel;
    detail::record(tape, out, [=](const std::vector<double>& og) {
      std::vector<double> col;
      std::vector<double> dcol;
      if (gin || gk) col.resize(static_cast<std::size_t>(CK) * OH * OW);
      if (gin) dcol.resize(static_cast<std::size_t>(CK) * OH * OW);
      const double* kd = k_c.data().data();
      for (int b = 0; b < B; ++b) {
        const double* ogb = og.data() + static_cast<std::size_t>(b) * Cout * OH * OW;
        if (gin || gk) {
          const double* im = in_c.data().data() + static_cast<std::size_t>(b) * Cin * H * W;
          detail::im2col(im, Cin, H, W, kh, kw, stride, padding, OH, OW, col.data());
        }
        if (gk)
          detail::gemm(false, true, Cout, CK, OH * OW, 1.0, ogb, OH * OW, col.data(),
                       OH * OW, 1.0, gk->data(), CK);
        if (gin) {
          detail::gemm(true, false, CK, OH * OW, Cout, 1.0, kd, CK, ogb, OH * OW, 0.0,
                       dcol.data(), OH * OW);
          detail::col2im_add(dcol.data(), Cin, H, W, kh, kw, stride, padding, OH, OW,
                             gin->data() + static_cast<std::size_t>(b) * Cin * H * W);
        }
        if (gb)
          for (int co = 0; co < Cout; ++co) {
            const double* row = ogb + static_cast<std::size_t>(co) * OH * OW;
            double s = 0.0;
            for (int i = 0; i < OH * OW; ++i) s += row[i];
            (*gb)[static_cast<std::size_t>(co)] += s;
          }
      }
    });
  }
  return out;
}

/// Adjoint of a strided convolution. input [B,Cin,H,W], kernel [Cin,Cout,kh,kw];
/// output extents are (H-1)*stride+kh by (W-1)*stride+kw.
inline Tensor transpose_conv2d(const Tensor& input, const Tensor& kernel, int stride) {
  detail::check_4d(input, "transpose_conv2d");
  detail::check_4d(kernel, "transpose_conv2d kernel");
  check_arg(stride > 0, "transpose_conv2d: stride must be positive");
  const int B = input.dim(0), Cin = input.dim(1), H = input.dim(2), W = input.dim(3);
  const int Cout = kernel.dim(1), kh = kernel.dim(2), kw = kernel.dim(3);
  check_shape(kernel.dim(0) == Cin,
              "transpose_conv2d: input has " + std::to_string(Cin) +
                  " channels but kernel expects " + std::to_string(kernel.dim(0)));
  const int OH = (H - 1) * stride + kh;
  const int OW = (W - 1) * stride + kw;
  const int CK = Cout * kh * kw;

  Tensor out({B, Cout, OH, OW});
  {
    std::vector<double> col(static_cast<std::size_t>(CK) * H * W);
    const double* kd = kernel.data().data();  // viewed as [Cin, CK]
    auto& od = out.mutable_data();
    for (int b = 0; b < B; ++b) {
      const double* im = input.data().data() + static_cast<std::size_t>(b) * Cin * H * W;
      detail::gemm(true, false, CK, H * W, Cin, 1.0, kd, CK, im, H * W, 0.0, col.data(),
                   H * W);
      double* ob = od.data() + static_cast<std::size_t>(b) * Cout * OH * OW;
      detail::col2im_add(col.data(), Cout, OH, OW, kh, kw, stride, 0, H, W, ob);
    }
  }

  auto tape = detail::joint_tape({&input, &kernel});
  if (tape) {
    auto gin = input.grad_handle(), gk = kernel.grad_handle();
    const Tensor in_c = input, k_c = kernel;
    detail::record(tape, out, [=](const std::vector<double>& og) {
      std::vector<double> gather(static_cast<std::size_t>(CK) * H * W);
      const double* kd = k_c.data().data();
      for (int b = 0; b < B; ++b) {
        const double* ogb = og.data() + static_cast<std::size_t>(b) * Cout * OH * OW;
        detail::im2col(ogb, Cout, OH, OW, kh, kw, stride, 0, H, W, gather.data());
        if (gin)
          detail::gemm(false, false, Cin, H * W, CK, 1.0, kd, CK, gather.data(), H * W,
                       1.0, gin->data() + static_cast<std::size_t>(b) * Cin * H * W, H * W);
        if (gk) {
          const double* im = in_c.data().data() + static_cast<std::size_t>(b) * Cin * H * W;
          detail::gemm(false, true, Cin, CK, H * W, 1.0, im, H * W, gather.data(), H * W,
                       1.0, gk->data(), CK);
        }
      }
    });
  }
  return out;
}

/// 2x2 max pooling, stride 2. Requires even extents; the gradient routes to the
/// first (row-major) maximal element of each window.
inline Tensor maxpool2(const Tensor& input) {
  detail::check_4d(input, "maxpool2");
  const int B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  check_shape(H % 2 == 0 && W % 2 == 0,
              "maxpool2: spatial extents must be even, got " +
                  detail::shape_str(input.shape()));
  const int OH = H / 2, OW = W / 2;
  Tensor out({B, C, OH, OW});
  std::vector<std::size_t> argmax(out.numel());
  {
    const auto& id = input.data();
    auto& od = out.mutable_data();
    std::size_t o = 0;
    for (int bc = 0; bc < B * C; ++bc) {
      const double* plane = id.data() + static_cast<std::size_t>(bc) * H * W;
      for (int oh = 0; oh < OH; ++oh) {
        for (int ow = 0; ow < OW; ++ow, ++o) {
          const std::size_t base = static_cast<std::size_t>(bc) * H * W;
          std::size_t best = base + static_cast<std::size_t>(2 * oh) * W + 2 * ow;
          double bv = id[best];
          const std::size_t cand[3] = {best + 1, best + static_cast<std::size_t>(W),
                                       best + static_cast<std::size_t>(W) + 1};
          for (std::size_t k : cand)
            if (id[k] > bv) {
              bv = id[k];
              best = k;
            }
          od[o] = bv;
          argmax[o] = best;
        }
      }
      (void)plane;
    }
  }
  auto tape = detail::joint_tape({&input});
  if (tape) {
    auto gin = input.grad_handle();
    detail::record(tape, out, [gin, argmax](const std::vector<double>& og) {
      if (!gin) return;
      for (std::size_t i = 0; i < og.size(); ++i) (*gin)[argmax[i]] += og[i];
    });
  }
  return out;
}

/// 2x2 mean pooling, stride 2, floor semantics: a trailing odd row/column is
/// dropped and receives zero gradient.
inline Tensor avgpool2(const Tensor& input) {
  detail::check_4d(input, "avgpool2");
  const int B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  check_shape(H >= 2 && W >= 2, "avgpool2: extents must be at least 2");
  const int OH = H / 2, OW = W / 2;
  Tensor out({B, C, OH, OW});
  {
    const auto& id = input.data();
    auto& od = out.mutable_data();
    std::size_t o = 0;
    for (int bc = 0; bc < B * C; ++bc) {
      const double* plane = id.data() + static_cast<std::size_t>(bc) * H * W;
      for (int oh = 0; oh < OH; ++oh)
        for (int ow = 0; ow < OW; ++ow, ++o) {
          const double* p = plane + static_cast<std::size_t>(2 * oh) * W + 2 * ow;
          od[o] = 0.25 * (p[0] + p[1] + p[W] + p[W + 1]);
        }
    }
  }
  auto tape = detail::joint_tape({&input});
  if (tape) {
    auto gin = input.grad_handle();
    detail::record(tape, out, [gin, B, C, H, W, OH, OW](const std::vector<double>& og) {
      if (!gin) return;
      std::size_t o = 0;
      for (int bc = 0; bc < B * C; ++bc) {
        double* plane = gin->data() + static_cast<std::size_t>(bc) * H * W;
        for (int oh = 0; oh < OH; ++oh)
          for (int ow = 0; ow < OW; ++ow, ++o) {
            double* p = plane + static_cast<std::size_t>(2 * oh) * W + 2 * ow;
            const double g = 0.25 * og[o];
            p[0] += g;
            p[1] += g;
            p[W] += g;
            p[W + 1] += g;
          }
      }
    });
  }
  return out;
}

/// Channel concatenation: channels of `a` first, then `b`.
inline Tensor concat_channels(const Tensor& a, const Tensor& b) {
  detail::check_4d(a, "concat_channels");
  detail::check_4d(b, "concat_channels");
  check_shape(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3),
              "concat_channels: batch/spatial mismatch " + detail::shape_str(a.shape()) +
                  " vs " + detail::shape_str(b.shape()));
  const int B = a.dim(0), C1 = a.dim(1), C2 = b.dim(1), H = a.dim(2), W = a.dim(3);
  Tensor out({B, C1 + C2, H, W});
  {
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    auto& od = out.mutable_data();
    for (int bi = 0; bi < B; ++bi) {
      std::copy_n(a.data().data() + static_cast<std::size_t>(bi) * C1 * plane, C1 * plane,
                  od.data() + static_cast<std::size_t>(bi) * (C1 + C2) * plane);
      std::copy_n(b.data().data() + static_cast<std::size_t>(bi) * C2 * plane, C2 * plane,
                  od.data() + (static_cast<std::size_t>(bi) * (C1 + C2) + C1) * plane);
    }
  }
  auto tape = detail::joint_tape({&a, &b});
  if (tape) {
    auto ga = a.grad_handle(), gb = b.grad_handle();
    detail::record(tape, out, [ga, gb, B, C1, C2, H, W](const std::vector<double>& og) {
      const std::size_t plane = static_cast<std::size_t>(H) * W;
      for (int bi = 0; bi < B; ++bi) {
        const double* src = og.data() + static_cast<std::size_t>(bi) * (C1 + C2) * plane;
        if (ga) {
          double* dst = ga->data() + static_cast<std::size_t>(bi) * C1 * plane;
          for (std::size_t i = 0; i < C1 * plane; ++i) dst[i] += src[i];
        }
        if (gb) {
          double* dst = gb->data() + static_cast<std::size_t>(bi) * C2 * plane;
          for (std::size_t i = 0; i < C2 * plane; ++i) dst[i] += src[C1 * plane + i];
        }
      }
    });
  }
  return out;
}

namespace detail {

// shuffle: out[b, c, h*r+i, w*r+j] = in[b, c*r*r + i*r + j, h, w]
inline void shuffle_map(const double* in, double* out, int B, int C, int H, int W, int r,
                        bool inverse, bool accumulate) {
  const int OC = C, OH = H * r, OW = W * r;
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < OC; ++c)
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < r; ++j)
          for (int h = 0; h < H; ++h)
            for (int w = 0; w < W; ++w) {
              const std::size_t src_i =
                  ((static_cast<std::size_t>(b) * (C * r * r) + (c * r * r + i * r + j)) *
                       static_cast<std::size_t>(H) +
                   h) *
                      static_cast<std::size_t>(W) +
                  w;
              const std::size_t dst_i =
                  ((static_cast<std::size_t>(b) * OC + c) * static_cast<std::size_t>(OH) +
                   (h * r + i)) *
                      static_cast<std::size_t>(OW) +
                  (w * r + j);
              const std::size_t from = inverse ? dst_i : src_i;
              const std::size_t to = inverse ? src_i : dst_i;
              if (accumulate)
                out[to] += in[from];
              else
                out[to] = in[from];
            }
}

}  // namespace detail

/// Rearranges each group of r^2 channels into an r-by-r spatial block.
inline Tensor pixel_shuffle(const Tensor& input, int r) {
  detail::check_4d(input, "pixel_shuffle");
  check_arg(r >= 1, "pixel_shuffle: factor must be >= 1");
  const int B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  check_shape(C % (r * r) == 0, "pixel_shuffle: " + std::to_string(C) +
                                    " channels not divisible by r^2 = " +
                                    std::to_string(r * r));
  const int OC = C / (r * r);
  Tensor out({B, OC, H * r, W * r});
  detail::shuffle_map(input.data().data(), out.mutable_data().data(), B, OC, H, W, r,
                      false, false);
  auto tape = detail::joint_tape({&input});
  if (tape) {
    auto gin = input.grad_handle();
    detail::record(tape, out, [gin, B, OC, H, W, r](const std::vector<double>& og) {
      if (!gin) return;
      detail::shuffle_map(og.data(), gin->data(), B, OC, H, W, r, true, true);
    });
  }
  return out;
}

/// Exact inverse of pixel_shuffle.
inline Tensor pixel_unshuffle(const Tensor& input, int r) {
  detail::check_4d(input, "pixel_unshuffle");
  check_arg(r >= 1, "pixel_unshuffle: factor must be >= 1");
  const int B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  check_shape(H % r == 0 && W % r == 0,
              "pixel_unshuffle: spatial extents not divisible by r");
  const int IH = H / r, IW = W / r;
  Tensor out({B, C * r * r, IH, IW});
  detail::shuffle_map(input.data().data(), out.mutable_data().data(), B, C, IH, IW, r,
                      true, false);
  auto tape = detail::joint_tape({&input});
  if (tape) {
    auto gin = input.grad_handle();
    detail::record(tape, out, [gin, B, C, IH, IW, r](const std::vector<double>& og) {
      if (!gin) return;
      detail::shuffle_map(og.data(), gin->data(), B, C, IH, IW, r, false, true);
    });
  }
  return out;
}

/// Adds bias[c] to every element of channel c. The only broadcast in the library.
inline Tensor bias_add(const Tensor& x, const Tensor& bias) {
  detail::check_4d(x, "bias_add");
  check_shape(bias.ndim() == 1 && bias.dim(0) == x.dim(1),
              "bias_add: bias must have shape [channels]");
  const int B = x.dim(0), C = x.dim(1);
  const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  Tensor out(x.shape());
  {
    const auto& xd = x.data();
    const auto& bd = bias.data();
    auto& od = out.mutable_data();
    std::size_t i = 0;
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c) {
        const double v = bd[static_cast<std::size_t>(c)];
        for (std::size_t p = 0; p < plane; ++p, ++i) od[i] = xd[i] + v;
      }
  }
  auto tape = detail::joint_tape({&x, &bias});
  if (tape) {
    auto gx = x.grad_handle(), gb = bias.grad_handle();
    detail::record(tape, out, [gx, gb, B, C, plane](const std::vector<double>& og) {
      if (gx)
        for (std::size_t i = 0; i < og.size(); ++i) (*gx)[i] += og[i];
      if (gb) {
        std::size_t i = 0;
        for (int b = 0; b < B; ++b)
          for (int c = 0; c < C; ++c) {
            double s = 0.0;
            for (std::size_t p = 0; p < plane; ++p, ++i) s += og[i];
            (*gb)[static_cast<std::size_t>(c)] += s;
          }
      }
    });
  }
  return out;
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return divide(a, b); }
inline Tensor operator*(const Tensor& a, double c) { return mul_scalar(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return mul_scalar(a, c); }

/// Clamps every element into [0,1]. Export-time utility; refuses tensors on a
/// live tape so clamping can never silently cut a gradient path.
inline Tensor clamped01(const Tensor& x) {
  check_state(!x.on_tape(), "clamped01 is not differentiable; detach from the tape first");
  Tensor out(x.shape());
  const auto& xd = x.data();
  auto& od = out.mutable_data();
  for (std::size_t i = 0; i < xd.size(); ++i) od[i] = clamp01(xd[i]);
  return out;
}

/// Plain-value copy without tape participation.
inline Tensor detached(const Tensor& x) { return Tensor(x.shape(), x.data()); }

}  // namespace lowlight
