#include "cbias/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace cbias::ops {
namespace {

using detail::Node;

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) +
                     ", got " + shape_string(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                     " vs " + shape_string(b.shape()));
  }
}

struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_string(a.shape()) +
                     " and " + shape_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  auto A = a.data();
  auto B = b.data();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      if (av == 0.0) continue;
      const double* brow = &B[p * n];
      double* orow = &out[i * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return make_result({m, n}, std::move(out), "matmul", {a, b}, [m, k, n](Node& self) {
    auto& na = *self.inputs[0];
    auto& nb = *self.inputs[1];
    const auto& g = self.grad;
    if (na.requires_grad) {
      // dA = G * B^T
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * nb.value[p * n + j];
          na.grad[i * k + p] += acc;
        }
      }
    }
    if (nb.requires_grad) {
      // dB = A^T * G
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const double av = na.value[i * k + p];
          if (av == 0.0) continue;
          for (std::size_t j = 0; j < n; ++j) nb.grad[p * n + j] += av * g[i * n + j];
        }
      }
    }
  });
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  auto A = a.data();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = A[i * n + j];
  return make_result({n, m}, std::move(out), "transpose", {a}, [m, n](Node& self) {
    auto& na = *self.inputs[0];
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) na.grad[i * n + j] += self.grad[j * m + i];
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.data().begin(), a.data().end());
  auto B = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += B[i];
  return make_result(a.shape(), std::move(out), "add", {a, b}, [](Node& self) {
    for (auto& in : self.inputs) {
      if (!in->requires_grad) continue;
      for (std::size_t i = 0; i < self.grad.size(); ++i) in->grad[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.data().begin(), a.data().end());
  auto B = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= B[i];
  return make_result(a.shape(), std::move(out), "sub", {a, b}, [](Node& self) {
    auto& na = *self.inputs[0];
    auto& nb = *self.inputs[1];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (na.requires_grad) na.grad[i] += self.grad[i];
      if (nb.requires_grad) nb.grad[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  auto A = a.data();
  auto B = b.data();
  std::vector<double> out(A.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] * B[i];
  return make_result(a.shape(), std::move(out), "mul", {a, b}, [](Node& self) {
    auto& na = *self.inputs[0];
    auto& nb = *self.inputs[1];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (na.requires_grad) na.grad[i] += self.grad[i] * nb.value[i];
      if (nb.requires_grad) nb.grad[i] += self.grad[i] * na.value[i];
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= factor;
  return make_result(a.shape(), std::move(out), "scale", {a}, [factor](Node& self) {
    auto& na = *self.inputs[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) na.grad[i] += factor * self.grad[i];
  });
}

Tensor relu(const Tensor& a) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v = v > 0.0 ? v : 0.0;
  return make_result(a.shape(), std::move(out), "relu", {a}, [](Node& self) {
    auto& na = *self.inputs[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (na.value[i] > 0.0) na.grad[i] += self.grad[i];
    }
  });
}

Tensor add_row_bias(const Tensor& a, const Tensor& bias) {
  require_rank(a, 2, "add_row_bias");
  const std::size_t m = a.dim(0), n = a.dim(1);
  if (bias.numel() != n) {
    throw ShapeError("add_row_bias: bias " + shape_string(bias.shape()) +
                     " does not match " + shape_string(a.shape()));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  auto B = bias.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += B[j];
  return make_result(a.shape(), std::move(out), "add_row_bias", {a, bias},
                     [m, n](Node& self) {
                       auto& na = *self.inputs[0];
                       auto& nb = *self.inputs[1];
                       for (std::size_t i = 0; i < m; ++i) {
                         for (std::size_t j = 0; j < n; ++j) {
                           const double g = self.grad[i * n + j];
                           if (na.requires_grad) na.grad[i * n + j] += g;
                           if (nb.requires_grad) nb.grad[j] += g;
                         }
                       }
                     });
}

Tensor sum(const Tensor& a) {
  auto A = a.data();
  const double total = std::accumulate(A.begin(), A.end(), 0.0);
  return make_result({1}, {total}, "sum", {a}, [](Node& self) {
    auto& na = *self.inputs[0];
    for (auto& g : na.grad) g += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + shape_string(a.shape()) + " as " +
                     shape_string(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  return make_result(std::move(shape), std::move(out), "reshape", {a}, [](Node& self) {
    auto& na = *self.inputs[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) na.grad[i] += self.grad[i];
  });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw ShapeError("softmax: axis " + std::to_string(axis) + " out of range for " +
                     shape_string(x.shape()));
  }
  const auto s = split_at(x.shape(), axis);
  auto X = x.data();
  std::vector<double> out(X.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.len * s.inner + in;
      double mx = X[base];
      for (std::size_t i = 1; i < s.len; ++i) mx = std::max(mx, X[base + i * s.inner]);
      double z = 0.0;
      for (std::size_t i = 0; i < s.len; ++i) {
        const double e = std::exp(X[base + i * s.inner] - mx);
        out[base + i * s.inner] = e;
        z += e;
      }
      for (std::size_t i = 0; i < s.len; ++i) out[base + i * s.inner] /= z;
    }
  }
  return make_result(x.shape(), std::move(out), "softmax", {x}, [s](Node& self) {
    auto& nx = *self.inputs[0];
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = o * s.len * s.inner + in;
        double dot = 0.0;
        for (std::size_t i = 0; i < s.len; ++i) {
          const std::size_t k = base + i * s.inner;
          dot += self.grad[k] * self.value[k];
        }
        for (std::size_t i = 0; i < s.len; ++i) {
          const std::size_t k = base + i * s.inner;
          nx.grad[k] += self.value[k] * (self.grad[k] - dot);
        }
      }
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  if (x.rank() == 0) throw ShapeError("layer_norm: scalar input");
  const std::size_t d = x.shape().back();
  if (eps < 0.0) throw std::invalid_argument("layer_norm: eps must be >= 0");
  if (d == 1 && eps == 0.0) {
    throw std::domain_error("layer_norm: d == 1 with eps == 0 divides by zero variance");
  }
  if (gain.numel() != d || bias.numel() != d) {
    throw ShapeError("layer_norm: gain/bias must have " + std::to_string(d) +
                     " elements, got " + shape_string(gain.shape()) + " and " +
                     shape_string(bias.shape()));
  }
  const std::size_t rows = x.numel() / d;
  auto X = x.data();
  auto G = gain.data();
  auto B = bias.data();
  std::vector<double> out(X.size());
  std::vector<double> xhat(X.size());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = &X[r * d];
    double mu = 0.0;
    for (std::size_t i = 0; i < d; ++i) mu += row[i];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t i = 0; i < d; ++i) var += (row[i] - mu) * (row[i] - mu);
    var /= static_cast<double>(d);
    if (var + eps <= 0.0) {
      throw std::domain_error("layer_norm: zero variance row with eps == 0");
    }
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < d; ++i) {
      xhat[r * d + i] = (row[i] - mu) * inv_std[r];
      out[r * d + i] = xhat[r * d + i] * G[i] + B[i];
    }
  }
  return make_result(
      x.shape(), std::move(out), "layer_norm", {x, gain, bias},
      [d, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
        auto& nx = *self.inputs[0];
        auto& ng = *self.inputs[1];
        auto& nb = *self.inputs[2];
        std::vector<double> gx(d);
        for (std::size_t r = 0; r < rows; ++r) {
          double mean_g = 0.0, mean_gx = 0.0;
          for (std::size_t i = 0; i < d; ++i) {
            const double g = self.grad[r * d + i];
            if (ng.requires_grad) ng.grad[i] += g * xhat[r * d + i];
            if (nb.requires_grad) nb.grad[i] += g;
            gx[i] = g * ng.value[i];
            mean_g += gx[i];
            mean_gx += gx[i] * xhat[r * d + i];
          }
          if (!nx.requires_grad) continue;
          mean_g /= static_cast<double>(d);
          mean_gx /= static_cast<double>(d);
          for (std::size_t i = 0; i < d; ++i) {
            nx.grad[r * d + i] +=
                inv_std[r] * (gx[i] - mean_g - xhat[r * d + i] * mean_gx);
          }
        }
      });
}

Tensor conv2d(const Tensor& x, const Tensor& kernels, const Tensor& bias,
              std::size_t stride, std::size_t padding) {
  require_rank(x, 3, "conv2d input");
  require_rank(kernels, 4, "conv2d kernels");
  const std::size_t cin = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t cout = kernels.dim(0), kh = kernels.dim(2), kw = kernels.dim(3);
  if (kernels.dim(1) != cin) {
    throw ShapeError("conv2d: kernels " + shape_string(kernels.shape()) +
                     " do not match input " + shape_string(x.shape()));
  }
  if (kh % 2 == 0 || kw % 2 == 0) {
    throw ShapeError("conv2d: kernel sizes must be odd, got " +
                     shape_string(kernels.shape()));
  }
  if (stride == 0) throw std::invalid_argument("conv2d: stride must be positive");
  if (h + 2 * padding < kh || w + 2 * padding < kw ||
      (h + 2 * padding - kh) % stride != 0 || (w + 2 * padding - kw) % stride != 0) {
    throw ShapeError("conv2d: non-integral output size for input " +
                     shape_string(x.shape()) + ", kernel " +
                     shape_string(kernels.shape()) + ", stride " +
                     std::to_string(stride) + ", padding " + std::to_string(padding));
  }
  const bool has_bias = bias.defined();
  if (has_bias && bias.numel() != cout) {
    throw ShapeError("conv2d: bias " + shape_string(bias.shape()) + " for " +
                     std::to_string(cout) + " output channels");
  }
  const std::size_t oh = (h + 2 * padding - kh) / stride + 1;
  const std::size_t ow = (w + 2 * padding - kw) / stride + 1;
  auto X = x.data();
  auto K = kernels.data();
  std::vector<double> out(cout * oh * ow, 0.0);

  // Visits every (output, kernel tap, input) triple that lies inside the
  // unpadded input.
  auto for_each_tap = [=](auto&& fn) {
    for (std::size_t co = 0; co < cout; ++co)
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox)
          for (std::size_t ci = 0; ci < cin; ++ci)
            for (std::size_t ky = 0; ky < kh; ++ky) {
              const auto iy = static_cast<long>(oy * stride + ky) - static_cast<long>(padding);
              if (iy < 0 || iy >= static_cast<long>(h)) continue;
              for (std::size_t kx = 0; kx < kw; ++kx) {
                const auto ix =
                    static_cast<long>(ox * stride + kx) - static_cast<long>(padding);
                if (ix < 0 || ix >= static_cast<long>(w)) continue;
                fn((co * oh + oy) * ow + ox,
                   ((co * cin + ci) * kh + ky) * kw + kx,
                   (ci * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix));
              }
            }
  };

  for_each_tap([&](std::size_t o, std::size_t k, std::size_t i) { out[o] += K[k] * X[i]; });
  if (has_bias) {
    auto Bv = bias.data();
    for (std::size_t co = 0; co < cout; ++co)
      for (std::size_t p = 0; p < oh * ow; ++p) out[co * oh * ow + p] += Bv[co];
  }
  std::vector<Tensor> inputs{x, kernels};
  if (has_bias) inputs.push_back(bias);
  return make_result({cout, oh, ow}, std::move(out), "conv2d", std::move(inputs),
                     [for_each_tap, has_bias, cout, oh, ow](Node& self) {
                       auto& nx = *self.inputs[0];
                       auto& nk = *self.inputs[1];
                       for_each_tap([&](std::size_t o, std::size_t k, std::size_t i) {
                         const double g = self.grad[o];
                         if (nx.requires_grad) nx.grad[i] += g * nk.value[k];
                         if (nk.requires_grad) nk.grad[k] += g * nx.value[i];
                       });
                       if (has_bias && self.inputs[2]->requires_grad) {
                         auto& nb = *self.inputs[2];
                         for (std::size_t co = 0; co < cout; ++co)
                           for (std::size_t p = 0; p < oh * ow; ++p)
                             nb.grad[co] += self.grad[co * oh * ow + p];
                       }
                     });
}

Tensor pool2d(const Tensor& x, PoolMode mode, std::size_t kernel, std::size_t stride) {
  require_rank(x, 3, "pool2d");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (mode == PoolMode::global_avg) {
    kernel = 0;
  } else {
    if (kernel == 0) throw std::invalid_argument("pool2d: kernel must be positive");
    if (stride == 0) stride = kernel;
    if (kernel > h || kernel > w) {
      throw ShapeError("pool2d: kernel " + std::to_string(kernel) + " larger than input " +
                       shape_string(x.shape()));
    }
    if ((h - kernel) % stride != 0 || (w - kernel) % stride != 0) {
      throw ShapeError("pool2d: kernel " + std::to_string(kernel) + " stride " +
                       std::to_string(stride) + " does not tile input " +
                       shape_string(x.shape()));
    }
  }
  const std::size_t kh = kernel ? kernel : h;
  const std::size_t kw = kernel ? kernel : w;
  const std::size_t sh = kernel ? stride : h;
  const std::size_t sw = kernel ? stride : w;
  const std::size_t oh = (h - kh) / sh + 1;
  const std::size_t ow = (w - kw) / sw + 1;
  const double inv = 1.0 / static_cast<double>(kh * kw);
  auto X = x.data();
  std::vector<double> out(c * oh * ow, 0.0);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        double acc = 0.0;
        for (std::size_t ky = 0; ky < kh; ++ky)
          for (std::size_t kx = 0; kx < kw; ++kx)
            acc += X[(ch * h + oy * sh + ky) * w + ox * sw + kx];
        out[(ch * oh + oy) * ow + ox] = acc * inv;
      }
  return make_result({c, oh, ow}, std::move(out), "pool2d", {x},
                     [=](Node& self) {
                       auto& nx = *self.inputs[0];
                       for (std::size_t ch = 0; ch < c; ++ch)
                         for (std::size_t oy = 0; oy < oh; ++oy)
                           for (std::size_t ox = 0; ox < ow; ++ox) {
                             const double g = self.grad[(ch * oh + oy) * ow + ox] * inv;
                             for (std::size_t ky = 0; ky < kh; ++ky)
                               for (std::size_t kx = 0; kx < kw; ++kx)
                                 nx.grad[(ch * h + oy * sh + ky) * w + ox * sw + kx] += g;
                           }
                     });
}

Tensor broadcast_channels(const Tensor& f, std::size_t height, std::size_t width) {
  if (f.rank() != 3 || f.dim(1) != 1 || f.dim(2) != 1) {
    throw ShapeError("broadcast_channels: expected [C x 1 x 1], got " +
                     shape_string(f.shape()));
  }
  const std::size_t c = f.dim(0), plane = height * width;
  auto F = f.data();
  std::vector<double> out(c * plane);
  for (std::size_t ch = 0; ch < c; ++ch)
    std::fill_n(out.begin() + static_cast<std::ptrdiff_t>(ch * plane), plane, F[ch]);
  return make_result({c, height, width}, std::move(out), "broadcast_channels", {f},
                     [c, plane](Node& self) {
                       auto& nf = *self.inputs[0];
                       for (std::size_t ch = 0; ch < c; ++ch) {
                         double acc = 0.0;
                         for (std::size_t p = 0; p < plane; ++p)
                           acc += self.grad[ch * plane + p];
                         nf.grad[ch] += acc;
                       }
                     });
}

Tensor concat(std::span<const Tensor> tensors, std::size_t axis) {
  if (tensors.empty()) throw ShapeError("concat: no tensors");
  const Shape& first = tensors[0].shape();
  if (axis >= first.size()) {
    throw ShapeError("concat: axis " + std::to_string(axis) + " out of range for " +
                     shape_string(first));
  }
  Shape out_shape = first;
  out_shape[axis] = 0;
  std::vector<std::size_t> lens;
  for (const auto& t : tensors) {
    const Shape& s = t.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == first[i];
    if (!ok) {
      throw ShapeError("concat: shape mismatch " + shape_string(first) + " vs " +
                       shape_string(s) + " along axis " + std::to_string(axis));
    }
    lens.push_back(s[axis]);
    out_shape[axis] += s[axis];
  }
  const auto split = split_at(out_shape, axis);
  std::vector<double> out(shape_numel(out_shape));
  std::size_t offset = 0;
  for (std::size_t t = 0; t < tensors.size(); ++t) {
    auto D = tensors[t].data();
    const std::size_t block = lens[t] * split.inner;
    for (std::size_t o = 0; o < split.outer; ++o) {
      std::copy_n(D.begin() + static_cast<std::ptrdiff_t>(o * block), block,
                  out.begin() + static_cast<std::ptrdiff_t>(o * split.len * split.inner + offset));
    }
    offset += block;
  }
  std::vector<Tensor> inputs(tensors.begin(), tensors.end());
  return make_result(out_shape, std::move(out), "concat", std::move(inputs),
                     [split, lens](Node& self) {
                       std::size_t off = 0;
                       for (std::size_t t = 0; t < lens.size(); ++t) {
                         auto& in = *self.inputs[t];
                         const std::size_t block = lens[t] * split.inner;
                         if (in.requires_grad) {
                           for (std::size_t o = 0; o < split.outer; ++o)
                             for (std::size_t i = 0; i < block; ++i)
                               in.grad[o * block + i] +=
                                   self.grad[o * split.len * split.inner + off + i];
                         }
                         off += block;
                       }
                     });
}

Tensor concat(std::initializer_list<Tensor> tensors, std::size_t axis) {
  return concat(std::span<const Tensor>(tensors.begin(), tensors.size()), axis);
}

Tensor gather_rows(const Tensor& table, std::span<const int> indices) {
  require_rank(table, 2, "gather_rows");
  if (indices.empty()) throw ShapeError("gather_rows: no indices");
  const std::size_t v = table.dim(0), d = table.dim(1);
  for (int idx : indices) {
    if (idx < 0 || static_cast<std::size_t>(idx) >= v) {
      throw std::out_of_range("index " + std::to_string(idx) + " out of range for " +
                              std::to_string(v) + " rows");
    }
  }
  auto T = table.data();
  std::vector<int> idx(indices.begin(), indices.end());
  std::vector<double> out(idx.size() * d);
  for (std::size_t r = 0; r < idx.size(); ++r)
    std::copy_n(T.begin() + static_cast<std::ptrdiff_t>(idx[r] * d), d,
                out.begin() + static_cast<std::ptrdiff_t>(r * d));
  Shape shape{idx.size(), d};
  return make_result(std::move(shape), std::move(out), "gather_rows", {table},
                     [idx = std::move(idx), d](Node& self) {
                       auto& nt = *self.inputs[0];
                       for (std::size_t r = 0; r < idx.size(); ++r)
                         for (std::size_t j = 0; j < d; ++j)
                           nt.grad[static_cast<std::size_t>(idx[r]) * d + j] +=
                               self.grad[r * d + j];
                     });
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  require_rank(a, 2, "slice_rows");
  if (begin >= end || end > a.dim(0)) {
    throw ShapeError("slice_rows: bad range [" + std::to_string(begin) + ", " +
                     std::to_string(end) + ") for " + shape_string(a.shape()));
  }
  const std::size_t d = a.dim(1);
  auto A = a.data();
  std::vector<double> out(A.begin() + static_cast<std::ptrdiff_t>(begin * d),
                          A.begin() + static_cast<std::ptrdiff_t>(end * d));
  return make_result({end - begin, d}, std::move(out), "slice_rows", {a},
                     [begin, d](Node& self) {
                       auto& na = *self.inputs[0];
                       for (std::size_t i = 0; i < self.grad.size(); ++i)
                         na.grad[begin * d + i] += self.grad[i];
                     });
}

namespace {

// Cosine over `rows` consecutive length-n segments.
Tensor segment_cosine(const Tensor& a, const Tensor& b, std::size_t rows, std::size_t n,
                      Shape out_shape, const char* op) {
  auto A = a.data();
  auto B = b.data();
  std::vector<double> out(rows), dots(rows), na(rows), nb(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double dot = 0.0, sa = 0.0, sb = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      dot += A[r * n + i] * B[r * n + i];
      sa += A[r * n + i] * A[r * n + i];
      sb += B[r * n + i] * B[r * n + i];
    }
    dots[r] = dot;
    na[r] = std::sqrt(sa);
    nb[r] = std::sqrt(sb);
    out[r] = dot / ((na[r] + kCosineEps) * (nb[r] + kCosineEps));
  }
  return make_result(std::move(out_shape), std::move(out), op, {a, b},
                     [rows, n, dots, na, nb](Node& self) {
                       auto& ta = *self.inputs[0];
                       auto& tb = *self.inputs[1];
                       for (std::size_t r = 0; r < rows; ++r) {
                         const double g = self.grad[r];
                         const double da = na[r] + kCosineEps;
                         const double db = nb[r] + kCosineEps;
                         const double c = dots[r] / (da * db);
                         // d/da [dot / (da*db)] = b/(da*db) - c * a / (|a| * da)
                         const double ka = na[r] > 0.0 ? c / (na[r] * da) : 0.0;
                         const double kb = nb[r] > 0.0 ? c / (nb[r] * db) : 0.0;
                         for (std::size_t i = 0; i < n; ++i) {
                           const double av = ta.value[r * n + i];
                           const double bv = tb.value[r * n + i];
                           if (ta.requires_grad)
                             ta.grad[r * n + i] += g * (bv / (da * db) - ka * av);
                           if (tb.requires_grad)
                             tb.grad[r * n + i] += g * (av / (da * db) - kb * bv);
                         }
                       }
                     });
}

}  // namespace

Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
  if (a.numel() != b.numel()) {
    throw ShapeError("cosine_similarity: " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
  return segment_cosine(a, b, 1, a.numel(), {1}, "cosine_similarity");
}

Tensor row_cosine(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "row_cosine");
  require_same_shape(a, b, "row_cosine");
  return segment_cosine(a, b, a.dim(0), a.dim(1), {a.dim(0)}, "row_cosine");
}

namespace {

Tensor rows_cross_entropy(const Tensor& logits, std::vector<int> targets, std::size_t n,
                          const char* op) {
  const std::size_t rows = targets.size();
  auto L = logits.data();
  std::vector<double> probs(rows * n);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= n) {
      throw std::out_of_range("cross_entropy: target " + std::to_string(targets[r]) +
                              " out of range for " + std::to_string(n) + " classes");
    }
    const double* row = &L[r * n];
    const double mx = *std::max_element(row, row + n);
    double z = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      probs[r * n + i] = std::exp(row[i] - mx);
      z += probs[r * n + i];
    }
    for (std::size_t i = 0; i < n; ++i) probs[r * n + i] /= z;
    total += -(row[targets[r]] - mx - std::log(z));
  }
  const double inv = 1.0 / static_cast<double>(rows);
  return make_result({1}, {total * inv}, op, {logits},
                     [probs = std::move(probs), targets = std::move(targets), n, rows,
                      inv](Node& self) {
                       auto& nl = *self.inputs[0];
                       const double g = self.grad[0] * inv;
                       for (std::size_t r = 0; r < rows; ++r)
                         for (std::size_t i = 0; i < n; ++i)
                           nl.grad[r * n + i] +=
                               g * (probs[r * n + i] -
                                    (static_cast<int>(i) == targets[r] ? 1.0 : 0.0));
                     });
}

}  // namespace

Tensor cross_entropy(const Tensor& logits, std::size_t target) {
  return rows_cross_entropy(logits, {static_cast<int>(target)}, logits.numel(),
                            "cross_entropy");
}

Tensor mean_cross_entropy(const Tensor& logits, std::span<const int> targets) {
  require_rank(logits, 2, "mean_cross_entropy");
  if (targets.size() != logits.dim(0)) {
    throw ShapeError("mean_cross_entropy: " + std::to_string(targets.size()) +
                     " targets for logits " + shape_string(logits.shape()));
  }
  return rows_cross_entropy(logits, {targets.begin(), targets.end()}, logits.dim(1),
                            "mean_cross_entropy");
}

}  // namespace cbias::ops
