// Copyright 2026 The CUPE Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "cupe/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <string>

namespace cupe::nn {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

// For each flat index of `big`, the flat index into `small` under
// right-aligned broadcasting.
std::vector<std::size_t> broadcast_index(const Shape& big, const Shape& small) {
  if (small.size() > big.size()) {
    throw ShapeError("cannot broadcast " + shape_str(small) + " to " + shape_str(big));
  }
  const std::size_t offset = big.size() - small.size();
  for (std::size_t i = 0; i < small.size(); ++i) {
    if (small[i] != 1 && small[i] != big[offset + i]) {
      throw ShapeError("cannot broadcast " + shape_str(small) + " to " + shape_str(big) +
                       ": dimension " + std::to_string(i) + " is " + std::to_string(small[i]));
    }
  }
  const std::size_t n = shape_numel(big);
  std::vector<std::size_t> idx(n);
  std::vector<std::size_t> counter(big.size(), 0);
  std::vector<std::size_t> small_stride(small.size(), 0);
  {
    std::size_t s = 1;
    for (std::size_t i = small.size(); i-- > 0;) {
      small_stride[i] = small[i] == 1 ? 0 : s;
      s *= small[i];
    }
  }
  for (std::size_t flat = 0; flat < n; ++flat) {
    std::size_t j = 0;
    for (std::size_t i = 0; i < small.size(); ++i) j += counter[offset + i] * small_stride[i];
    idx[flat] = j;
    for (std::size_t a = big.size(); a-- > 0;) {
      if (++counter[a] < big[a]) break;
      counter[a] = 0;
    }
  }
  return idx;
}

bool same_shape(const Shape& a, const Shape& b) { return a == b; }

void axpy(std::span<double> dst, std::span<const double> src, double alpha = 1.0) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += alpha * src[i];
}

double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

}  // namespace

Var add(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out = av;
  if (same_shape(av.shape(), bv.shape())) {
    axpy(out.values(), bv.values());
    return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
      if (auto* ga = t.grad_for(a)) axpy(ga->values(), g.values());
      if (auto* gb = t.grad_for(b)) axpy(gb->values(), g.values());
    });
  }
  auto idx = broadcast_index(av.shape(), bv.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += bv[idx[i]];
  return a.tape().record(std::move(out), {a, b},
                         [a, b, idx = std::move(idx)](Tape& t, const Tensor& g) {
                           if (auto* ga = t.grad_for(a)) axpy(ga->values(), g.values());
                           if (auto* gb = t.grad_for(b)) {
                             for (std::size_t i = 0; i < g.numel(); ++i) (*gb)[idx[i]] += g[i];
                           }
                         });
}

Var scale(Var a, double s) {
  Tensor out = a.value();
  for (auto& v : out.values()) v *= s;
  return a.tape().record(std::move(out), {a}, [a, s](Tape& t, const Tensor& g) {
    if (auto* ga = t.grad_for(a)) axpy(ga->values(), g.values(), s);
  });
}

Var sub(Var a, Var b) { return add(a, scale(b, -1.0)); }

Var mul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out = av;
  std::vector<std::size_t> idx;
  if (same_shape(av.shape(), bv.shape())) {
    idx.resize(av.numel());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  } else {
    idx = broadcast_index(av.shape(), bv.shape());
  }
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= bv[idx[i]];
  return a.tape().record(std::move(out), {a, b},
                         [a, b, idx = std::move(idx)](Tape& t, const Tensor& g) {
                           const Tensor& av = t.value(a);
                           const Tensor& bv = t.value(b);
                           if (auto* ga = t.grad_for(a)) {
                             for (std::size_t i = 0; i < g.numel(); ++i) (*ga)[i] += g[i] * bv[idx[i]];
                           }
                           if (auto* gb = t.grad_for(b)) {
                             for (std::size_t i = 0; i < g.numel(); ++i) (*gb)[idx[i]] += g[i] * av[i];
                           }
                         });
}

Var gelu(Var x) {
  Tensor out = x.value();
  for (auto& v : out.values()) v = 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
  return x.tape().record(std::move(out), {x}, [x](Tape& t, const Tensor& g) {
    auto* gx = t.grad_for(x);
    if (!gx) return;
    const Tensor& xv = t.value(x);
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    for (std::size_t i = 0; i < g.numel(); ++i) {
      const double v = xv[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
      (*gx)[i] += g[i] * (cdf + v * pdf);
    }
  });
}

Var sigmoid(Var x) {
  Tensor out = x.value();
  for (auto& v : out.values()) v = 1.0 / (1.0 + std::exp(-v));
  return x.tape().record(std::move(out), {x}, [x](Tape& t, const Tensor& g) {
    auto* gx = t.grad_for(x);
    if (!gx) return;
    const Tensor& xv = t.value(x);
    for (std::size_t i = 0; i < g.numel(); ++i) {
      const double s = 1.0 / (1.0 + std::exp(-xv[i]));
      (*gx)[i] += g[i] * s * (1.0 - s);
    }
  });
}

Var exp(Var x) {
  Tensor out = x.value();
  for (auto& v : out.values()) v = std::exp(v);
  const std::size_t self = x.tape().size();
  return x.tape().record(std::move(out), {x}, [x, self](Tape& t, const Tensor& g) {
    auto* gx = t.grad_for(x);
    if (!gx) return;
    const Tensor& y = t.value(self);
    for (std::size_t i = 0; i < g.numel(); ++i) (*gx)[i] += g[i] * y[i];
  });
}

Var log(Var x, double floor) {
  Tensor out = x.value();
  for (auto& v : out.values()) v = std::log(std::max(v, floor));
  return x.tape().record(std::move(out), {x}, [x, floor](Tape& t, const Tensor& g) {
    auto* gx = t.grad_for(x);
    if (!gx) return;
    const Tensor& xv = t.value(x);
    for (std::size_t i = 0; i < g.numel(); ++i) {
      if (xv[i] > floor) (*gx)[i] += g[i] / xv[i];
    }
  });
}

Var dropout(Var x, double rate, std::uint32_t layer) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw std::invalid_argument("dropout rate must lie in [0, 1), got " + std::to_string(rate));
  }
  Tape& tape = x.tape();
  if (!tape.training() || rate == 0.0) return x;
  std::mt19937_64 rng(tape.dropout_seed(layer));
  const double keep_scale = 1.0 / (1.0 - rate);
  Tensor mask(x.shape());
  for (auto& m : mask.values()) m = uniform01(rng) < rate ? 0.0 : keep_scale;
  Tensor out = x.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= mask[i];
  return tape.record(std::move(out), {x}, [x, mask = std::move(mask)](Tape& t, const Tensor& g) {
    if (auto* gx = t.grad_for(x)) {
      for (std::size_t i = 0; i < g.numel(); ++i) (*gx)[i] += g[i] * mask[i];
    }
  });
}

Var softmax(Var x) {
  const Tensor& xv = x.value();
  if (xv.rank() == 0) throw ShapeError("softmax needs at least one axis");
  const std::size_t n = xv.shape().back();
  const std::size_t rows = n ? xv.numel() / n : 0;
  Tensor out = xv;
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = out.data() + r * n;
    const double mx = *std::max_element(row, row + n);
    double z = 0.0;
    for (std::size_t c = 0; c < n; ++c) z += (row[c] = std::exp(row[c] - mx));
    for (std::size_t c = 0; c < n; ++c) row[c] /= z;
  }
  const std::size_t next = x.tape().size();
  return x.tape().record(std::move(out), {x}, [x, n, rows, next](Tape& t, const Tensor& g) {
    auto* gx = t.grad_for(x);
    if (!gx) return;
    const Tensor& yv = t.value(next);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* yr = yv.data() + r * n;
      const double* gr = g.data() + r * n;
      double dot = 0.0;
      for (std::size_t c = 0; c < n; ++c) dot += gr[c] * yr[c];
      double* out = gx->data() + r * n;
      for (std::size_t c = 0; c < n; ++c) out[c] += yr[c] * (gr[c] - dot);
    }
  });
}

Var log_softmax(Var x) {
  const Tensor& xv = x.value();
  if (xv.rank() == 0) throw ShapeError("log_softmax needs at least one axis");
  const std::size_t n = xv.shape().back();
  const std::size_t rows = n ? xv.numel() / n : 0;
  Tensor out = xv;
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = out.data() + r * n;
    const double mx = *std::max_element(row, row + n);
    double z = 0.0;
    for (std::size_t c = 0; c < n; ++c) z += std::exp(row[c] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t c = 0; c < n; ++c) row[c] -= lse;
  }
  const std::size_t next = x.tape().size();
  return x.tape().record(std::move(out), {x}, [x, n, rows, next](Tape& t, const Tensor& g) {
    auto* gx = t.grad_for(x);
    if (!gx) return;
    const Tensor& yv = t.value(next);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* yr = yv.data() + r * n;
      const double* gr = g.data() + r * n;
      double gs = 0.0;
      for (std::size_t c = 0; c < n; ++c) gs += gr[c];
      double* out = gx->data() + r * n;
      for (std::size_t c = 0; c < n; ++c) out[c] += gr[c] - std::exp(yr[c]) * gs;
    }
  });
}

Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().values()) s += v;
  return x.tape().record(Tensor::scalar(s), {x}, [x](Tape& t, const Tensor& g) {
    if (auto* gx = t.grad_for(x)) {
      for (auto& v : gx->values()) v += g[0];
    }
  });
}

Var mean(Var x) {
  const double n = static_cast<double>(std::max<std::size_t>(x.value().numel(), 1));
  return scale(sum(x), 1.0 / n);
}

Var mean_axis(Var x, std::size_t axis, bool keepdim) {
  const Shape& s = x.shape();
  if (axis >= s.size()) throw ShapeError("mean_axis: axis " + std::to_string(axis) + " out of range");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  Shape os = s;
  if (keepdim) {
    os[axis] = 1;
  } else {
    os.erase(os.begin() + static_cast<std::ptrdiff_t>(axis));
  }
  Tensor out(os);
  const Tensor& xv = x.value();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t l = 0; l < len; ++l)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += xv[(o * len + l) * inner + i];
  const double inv = len ? 1.0 / static_cast<double>(len) : 0.0;
  for (auto& v : out.values()) v *= inv;
  return x.tape().record(std::move(out), {x}, [x, outer, inner, len, inv](Tape& t, const Tensor& g) {
    auto* gx = t.grad_for(x);
    if (!gx) return;
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t l = 0; l < len; ++l)
        for (std::size_t i = 0; i < inner; ++i) (*gx)[(o * len + l) * inner + i] += g[o * inner + i] * inv;
  });
}

Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return x.tape().record(std::move(out), {x}, [x](Tape& t, const Tensor& g) {
    if (auto* gx = t.grad_for(x)) axpy(gx->values(), g.values());
  });
}

Var permute(Var x, const std::vector<std::size_t>& perm) {
  const Shape& s = x.shape();
  if (perm.size() != s.size()) throw ShapeError("permute: rank mismatch");
  Shape os(s.size());
  std::vector<std::size_t> in_stride(s.size());
  {
    std::size_t st = 1;
    for (std::size_t i = s.size(); i-- > 0;) {
      in_stride[i] = st;
      st *= s[i];
    }
  }
  std::vector<std::size_t> seen(s.size(), 0);
  for (std::size_t i = 0; i < perm.size(); ++i) {
    if (perm[i] >= s.size() || seen[perm[i]]++) throw ShapeError("permute: invalid permutation");
    os[i] = s[perm[i]];
  }
  // src[k] = flat input index of output element k.
  const std::size_t n = x.value().numel();
  std::vector<std::size_t> src(n);
  std::vector<std::size_t> counter(os.size(), 0);
  for (std::size_t k = 0; k < n; ++k) {
    std::size_t j = 0;
    for (std::size_t a = 0; a < os.size(); ++a) j += counter[a] * in_stride[perm[a]];
    src[k] = j;
    for (std::size_t a = os.size(); a-- > 0;) {
      if (++counter[a] < os[a]) break;
      counter[a] = 0;
    }
  }
  Tensor out(os);
  const Tensor& xv = x.value();
  for (std::size_t k = 0; k < n; ++k) out[k] = xv[src[k]];
  return x.tape().record(std::move(out), {x}, [x, src = std::move(src)](Tape& t, const Tensor& g) {
    if (auto* gx = t.grad_for(x)) {
      for (std::size_t k = 0; k < g.numel(); ++k) (*gx)[src[k]] += g[k];
    }
  });
}

Var concat(const std::vector<Var>& xs, std::size_t axis) {
  if (xs.empty()) throw ShapeError("concat of zero tensors");
  Shape os = xs.front().shape();
  if (axis >= os.size()) throw ShapeError("concat: axis out of range");
  std::size_t total = 0;
  for (const auto& v : xs) {
    const Shape& s = v.shape();
    if (s.size() != os.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis && s[i] != os[i]) {
        throw ShapeError("concat: dimension " + std::to_string(i) + " differs (" +
                         std::to_string(s[i]) + " vs " + std::to_string(os[i]) + ")");
      }
    }
    total += s[axis];
  }
  os[axis] = total;
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= os[i];
  for (std::size_t i = axis + 1; i < os.size(); ++i) inner *= os[i];
  Tensor out(os);
  std::vector<std::size_t> starts;
  std::size_t at = 0;
  for (const auto& v : xs) {
    starts.push_back(at);
    const std::size_t len = v.shape()[axis];
    const Tensor& xv = v.value();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(xv.data() + o * len * inner, len * inner, out.data() + (o * total + at) * inner);
    }
    at += len;
  }
  return xs.front().tape().record(
      std::move(out), xs, [xs, starts, axis, outer, inner, total](Tape& t, const Tensor& g) {
        for (std::size_t k = 0; k < xs.size(); ++k) {
          auto* gx = t.grad_for(xs[k]);
          if (!gx) continue;
          const std::size_t len = t.value(xs[k]).shape()[axis];
          for (std::size_t o = 0; o < outer; ++o) {
            const double* src = g.data() + (o * total + starts[k]) * inner;
            double* dst = gx->data() + o * len * inner;
            for (std::size_t i = 0; i < len * inner; ++i) dst[i] += src[i];
          }
        }
      });
}

Var gather_rows(Var x, const std::vector<std::size_t>& rows) {
  const Shape& s = x.shape();
  if (s.empty()) throw ShapeError("gather_rows on a scalar");
  const std::size_t d = s.back();
  const std::size_t nrows = d ? x.value().numel() / d : 0;
  Tensor out(Shape{rows.size(), d});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= nrows) throw ShapeError("gather_rows: row " + std::to_string(rows[i]) + " out of range");
    std::copy_n(x.value().data() + rows[i] * d, d, out.data() + i * d);
  }
  return x.tape().record(std::move(out), {x}, [x, rows, d](Tape& t, const Tensor& g) {
    if (auto* gx = t.grad_for(x)) {
      for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t c = 0; c < d; ++c) (*gx)[rows[i] * d + c] += g[i * d + c];
    }
  });
}

Var replace_rows(Var x, const std::vector<bool>& mask, Var fill) {
  const Shape& s = x.shape();
  const std::size_t d = s.back();
  const std::size_t nrows = x.value().numel() / d;
  if (mask.size() != nrows) throw ShapeError("replace_rows: mask length differs from row count");
  if (fill.value().numel() != d) throw ShapeError("replace_rows: fill width differs from row width");
  Tensor out = x.value();
  for (std::size_t r = 0; r < nrows; ++r) {
    if (mask[r]) std::copy_n(fill.value().data(), d, out.data() + r * d);
  }
  return x.tape().record(std::move(out), {x, fill}, [x, fill, mask, d, nrows](Tape& t, const Tensor& g) {
    auto* gx = t.grad_for(x);
    auto* gf = t.grad_for(fill);
    for (std::size_t r = 0; r < nrows; ++r) {
      for (std::size_t c = 0; c < d; ++c) {
        if (mask[r]) {
          if (gf) (*gf)[c] += g[r * d + c];
        } else if (gx) {
          (*gx)[r * d + c] += g[r * d + c];
        }
      }
    }
  });
}

Var matmul(Var x, Var w) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (ws.size() != 2) throw ShapeError("matmul: weight must be 2-d, got " + shape_str(ws));
  if (xs.empty() || xs.back() != ws[0]) {
    throw ShapeError("matmul: input last dimension " + (xs.empty() ? std::string("-") : std::to_string(xs.back())) +
                     " does not match weight rows " + std::to_string(ws[0]));
  }
  const std::size_t k = ws[0], n = ws[1];
  const std::size_t m = x.value().numel() / k;
  Shape os = xs;
  os.back() = n;
  Tensor out(os);
  ConstMapMat X(x.value().data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k));
  ConstMapMat W(w.value().data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n));
  MapMat Y(out.data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
  Y.noalias() = X * W;
  return x.tape().record(std::move(out), {x, w}, [x, w, m, k, n](Tape& t, const Tensor& g) {
    ConstMapMat G(g.data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
    if (auto* gx = t.grad_for(x)) {
      ConstMapMat W(t.value(w).data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n));
      MapMat GX(gx->data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k));
      GX.noalias() += G * W.transpose();
    }
    if (auto* gw = t.grad_for(w)) {
      ConstMapMat X(t.value(x).data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k));
      MapMat GW(gw->data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n));
      GW.noalias() += X.transpose() * G;
    }
  });
}

Var bmm(Var a, Var b, bool transpose_b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() != 3 || bs.size() != 3 || as[0] != bs[0]) {
    throw ShapeError("bmm: expected [G,M,K] and [G,K,N], got " + shape_str(as) + " and " + shape_str(bs));
  }
  const std::size_t G = as[0], M = as[1], K = as[2];
  const std::size_t N = transpose_b ? bs[1] : bs[2];
  const std::size_t bk = transpose_b ? bs[2] : bs[1];
  if (bk != K) throw ShapeError("bmm: inner dimension " + std::to_string(K) + " vs " + std::to_string(bk));
  Tensor out(Shape{G, M, N});
  const auto eM = static_cast<Eigen::Index>(M), eK = static_cast<Eigen::Index>(K),
             eN = static_cast<Eigen::Index>(N);
  for (std::size_t gi = 0; gi < G; ++gi) {
    ConstMapMat A(a.value().data() + gi * M * K, eM, eK);
    MapMat Y(out.data() + gi * M * N, eM, eN);
    if (transpose_b) {
      ConstMapMat B(b.value().data() + gi * N * K, eN, eK);
      Y.noalias() = A * B.transpose();
    } else {
      ConstMapMat B(b.value().data() + gi * K * N, eK, eN);
      Y.noalias() = A * B;
    }
  }
  return a.tape().record(std::move(out), {a, b}, [a, b, G, eM, eK, eN, transpose_b](Tape& t, const Tensor& g) {
    auto* ga = t.grad_for(a);
    auto* gb = t.grad_for(b);
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    const std::size_t M = static_cast<std::size_t>(eM), K = static_cast<std::size_t>(eK),
                      N = static_cast<std::size_t>(eN);
    for (std::size_t gi = 0; gi < G; ++gi) {
      ConstMapMat Gm(g.data() + gi * M * N, eM, eN);
      ConstMapMat A(av.data() + gi * M * K, eM, eK);
      if (transpose_b) {
        ConstMapMat B(bv.data() + gi * N * K, eN, eK);
        if (ga) MapMat(ga->data() + gi * M * K, eM, eK).noalias() += Gm * B;
        if (gb) MapMat(gb->data() + gi * N * K, eN, eK).noalias() += Gm.transpose() * A;
      } else {
        ConstMapMat B(bv.data() + gi * K * N, eK, eN);
        if (ga) MapMat(ga->data() + gi * M * K, eM, eK).noalias() += Gm * B.transpose();
        if (gb) MapMat(gb->data() + gi * K * N, eK, eN).noalias() += A.transpose() * Gm;
      }
    }
  });
}

Var linear(Var x, Var w, Var b) { return add(matmul(x, w), b); }

std::size_t conv_out_length(std::size_t length, std::size_t kernel, const ConvSpec& spec) {
  if (spec.stride == 0) throw ShapeError("conv1d: stride must be positive");
  if (length + 2 * spec.padding < kernel) {
    throw ShapeError("conv1d: length " + std::to_string(length) + " + 2*padding " +
                     std::to_string(2 * spec.padding) + " is shorter than kernel " + std::to_string(kernel));
  }
  return (length + 2 * spec.padding - kernel) / spec.stride + 1;
}

namespace {

// cols[(c*K + k), l] = x[c, l*stride + k - pad] (zero outside).
void im2col(const double* x, std::size_t cin, std::size_t len, std::size_t kernel, std::size_t lout,
            const ConvSpec& spec, double* cols) {
  for (std::size_t c = 0; c < cin; ++c) {
    for (std::size_t k = 0; k < kernel; ++k) {
      double* row = cols + (c * kernel + k) * lout;
      for (std::size_t l = 0; l < lout; ++l) {
        const std::ptrdiff_t pos = static_cast<std::ptrdiff_t>(l * spec.stride + k) -
                                   static_cast<std::ptrdiff_t>(spec.padding);
        row[l] = (pos >= 0 && pos < static_cast<std::ptrdiff_t>(len)) ? x[c * len + static_cast<std::size_t>(pos)] : 0.0;
      }
    }
  }
}

void col2im(const double* cols, std::size_t cin, std::size_t len, std::size_t kernel, std::size_t lout,
            const ConvSpec& spec, double* x) {
  for (std::size_t c = 0; c < cin; ++c) {
    for (std::size_t k = 0; k < kernel; ++k) {
      const double* row = cols + (c * kernel + k) * lout;
      for (std::size_t l = 0; l < lout; ++l) {
        const std::ptrdiff_t pos = static_cast<std::ptrdiff_t>(l * spec.stride + k) -
                                   static_cast<std::ptrdiff_t>(spec.padding);
        if (pos >= 0 && pos < static_cast<std::ptrdiff_t>(len)) x[c * len + static_cast<std::size_t>(pos)] += row[l];
      }
    }
  }
}

}  // namespace

Var conv1d(Var x, Var w, Var b, const ConvSpec& spec) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (xs.size() != 3) throw ShapeError("conv1d: input must be [B, C_in, L], got " + shape_str(xs));
  if (ws.size() != 3) throw ShapeError("conv1d: weight must be [C_out, C_in/groups, K], got " + shape_str(ws));
  const std::size_t B = xs[0], cin = xs[1], len = xs[2];
  const std::size_t cout = ws[0], kernel = ws[2];
  const std::size_t groups = spec.groups;
  if (groups == 0 || cin % groups != 0) {
    throw ShapeError("conv1d: in_channels " + std::to_string(cin) + " not divisible by groups " + std::to_string(groups));
  }
  if (cout % groups != 0) {
    throw ShapeError("conv1d: out_channels " + std::to_string(cout) + " not divisible by groups " + std::to_string(groups));
  }
  const std::size_t cin_g = cin / groups, cout_g = cout / groups;
  if (ws[1] != cin_g) {
    throw ShapeError("conv1d: weight dimension 1 is " + std::to_string(ws[1]) + ", expected in_channels/groups = " +
                     std::to_string(cin_g));
  }
  if (b.value().numel() != cout) throw ShapeError("conv1d: bias length differs from out_channels");
  const std::size_t lout = conv_out_length(len, kernel, spec);

  Tensor out(Shape{B, cout, lout});
  std::vector<double> cols(cin_g * kernel * lout);
  const auto eRows = static_cast<Eigen::Index>(cin_g * kernel);
  const auto eL = static_cast<Eigen::Index>(lout);
  const auto eCo = static_cast<Eigen::Index>(cout_g);
  for (std::size_t bi = 0; bi < B; ++bi) {
    for (std::size_t gi = 0; gi < groups; ++gi) {
      im2col(x.value().data() + (bi * cin + gi * cin_g) * len, cin_g, len, kernel, lout, spec, cols.data());
      ConstMapMat Wg(w.value().data() + gi * cout_g * cin_g * kernel, eCo, eRows);
      ConstMapMat Cm(cols.data(), eRows, eL);
      MapMat Y(out.data() + (bi * cout + gi * cout_g) * lout, eCo, eL);
      Y.noalias() = Wg * Cm;
    }
    for (std::size_t c = 0; c < cout; ++c) {
      double* row = out.data() + (bi * cout + c) * lout;
      const double bias = b.value()[c];
      for (std::size_t l = 0; l < lout; ++l) row[l] += bias;
    }
  }
  return x.tape().record(
      std::move(out), {x, w, b},
      [x, w, b, spec, B, cin, len, cout, kernel, groups, cin_g, cout_g, lout](Tape& t, const Tensor& g) {
        auto* gx = t.grad_for(x);
        auto* gw = t.grad_for(w);
        auto* gb = t.grad_for(b);
        const auto eRows = static_cast<Eigen::Index>(cin_g * kernel);
        const auto eL = static_cast<Eigen::Index>(lout);
        const auto eCo = static_cast<Eigen::Index>(cout_g);
        std::vector<double> cols(cin_g * kernel * lout);
        for (std::size_t bi = 0; bi < B; ++bi) {
          for (std::size_t gi = 0; gi < groups; ++gi) {
            ConstMapMat Gy(g.data() + (bi * cout + gi * cout_g) * lout, eCo, eL);
            if (gw) {
              im2col(t.value(x).data() + (bi * cin + gi * cin_g) * len, cin_g, len, kernel, lout, spec, cols.data());
              MapMat GW(gw->data() + gi * cout_g * cin_g * kernel, eCo, eRows);
              GW.noalias() += Gy * ConstMapMat(cols.data(), eRows, eL).transpose();
            }
            if (gx) {
              ConstMapMat Wg(t.value(w).data() + gi * cout_g * cin_g * kernel, eCo, eRows);
              MapMat Cm(cols.data(), eRows, eL);
              Cm.noalias() = Wg.transpose() * Gy;
              col2im(cols.data(), cin_g, len, kernel, lout, spec, gx->data() + (bi * cin + gi * cin_g) * len);
            }
          }
          if (gb) {
            for (std::size_t c = 0; c < cout; ++c) {
              const double* row = g.data() + (bi * cout + c) * lout;
              double s = 0.0;
              for (std::size_t l = 0; l < lout; ++l) s += row[l];
              (*gb)[c] += s;
            }
          }
        }
      });
}

Var batch_norm(Var x, Var gamma, Var beta, BatchNormStats& stats) {
  const Shape& s = x.shape();
  if (s.size() != 2 && s.size() != 3) throw ShapeError("batch_norm: expected [B, C] or [B, C, L], got " + shape_str(s));
  const std::size_t B = s[0], C = s[1], L = s.size() == 3 ? s[2] : 1;
  if (gamma.value().numel() != C || beta.value().numel() != C) {
    throw ShapeError("batch_norm: channel dimension " + std::to_string(C) + " does not match gamma/beta length " +
                     std::to_string(gamma.value().numel()));
  }
  if (stats.running_mean.numel() != C || stats.running_var.numel() != C) {
    throw ShapeError("batch_norm: running statistics have the wrong length");
  }
  const std::size_t m = B * L;
  const bool training = x.tape().training();
  if (training && m <= 1) {
    throw std::invalid_argument("batch_norm: training mode needs more than one value per channel (batch size 1)");
  }
  const Tensor& xv = x.value();
  std::vector<double> mu(C), invstd(C);
  if (training) {
    for (std::size_t c = 0; c < C; ++c) {
      double acc = 0.0;
      for (std::size_t bi = 0; bi < B; ++bi)
        for (std::size_t l = 0; l < L; ++l) acc += xv[(bi * C + c) * L + l];
      mu[c] = acc / static_cast<double>(m);
      double var = 0.0;
      for (std::size_t bi = 0; bi < B; ++bi)
        for (std::size_t l = 0; l < L; ++l) {
          const double d = xv[(bi * C + c) * L + l] - mu[c];
          var += d * d;
        }
      var /= static_cast<double>(m);
      invstd[c] = 1.0 / std::sqrt(var + stats.eps);
      const double unbiased = var * static_cast<double>(m) / static_cast<double>(m - 1);
      stats.running_mean[c] = (1.0 - stats.momentum) * stats.running_mean[c] + stats.momentum * mu[c];
      stats.running_var[c] = (1.0 - stats.momentum) * stats.running_var[c] + stats.momentum * unbiased;
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mu[c] = stats.running_mean[c];
      invstd[c] = 1.0 / std::sqrt(stats.running_var[c] + stats.eps);
    }
  }
  Tensor xhat(s);
  Tensor out(s);
  for (std::size_t bi = 0; bi < B; ++bi)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t l = 0; l < L; ++l) {
        const std::size_t i = (bi * C + c) * L + l;
        xhat[i] = (xv[i] - mu[c]) * invstd[c];
        out[i] = xhat[i] * gamma.value()[c] + beta.value()[c];
      }
  return x.tape().record(
      std::move(out), {x, gamma, beta},
      [x, gamma, beta, B, C, L, m, training, invstd = std::move(invstd), xhat = std::move(xhat)](Tape& t,
                                                                                                 const Tensor& g) {
        auto* gx = t.grad_for(x);
        auto* gg = t.grad_for(gamma);
        auto* gbeta = t.grad_for(beta);
        const Tensor& gam = t.value(gamma);
        for (std::size_t c = 0; c < C; ++c) {
          double sum_g = 0.0, sum_gx = 0.0;
          for (std::size_t bi = 0; bi < B; ++bi)
            for (std::size_t l = 0; l < L; ++l) {
              const std::size_t i = (bi * C + c) * L + l;
              sum_g += g[i];
              sum_gx += g[i] * xhat[i];
            }
          if (gg) (*gg)[c] += sum_gx;
          if (gbeta) (*gbeta)[c] += sum_g;
          if (!gx) continue;
          const double k = gam[c] * invstd[c];
          for (std::size_t bi = 0; bi < B; ++bi)
            for (std::size_t l = 0; l < L; ++l) {
              const std::size_t i = (bi * C + c) * L + l;
              if (training) {
                (*gx)[i] += k * (g[i] - sum_g / static_cast<double>(m) - xhat[i] * sum_gx / static_cast<double>(m));
              } else {
                (*gx)[i] += k * g[i];
              }
            }
        }
      });
}

Var l2_normalize(Var x, double eps) {
  const Shape& s = x.shape();
  if (s.empty()) throw ShapeError("l2_normalize on a scalar");
  const std::size_t d = s.back();
  const std::size_t rows = x.value().numel() / d;
  Tensor out(s);
  std::vector<double> norm(rows);
  const Tensor& xv = x.value();
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (std::size_t c = 0; c < d; ++c) ss += xv[r * d + c] * xv[r * d + c];
    norm[r] = std::max(std::sqrt(ss), eps);
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] = xv[r * d + c] / norm[r];
  }
  const std::size_t self = x.tape().size();
  return x.tape().record(std::move(out), {x}, [x, self, rows, d, eps, norm = std::move(norm)](Tape& t, const Tensor& g) {
    auto* gx = t.grad_for(x);
    if (!gx) return;
    const Tensor& y = t.value(self);
    for (std::size_t r = 0; r < rows; ++r) {
      if (norm[r] <= eps) {
        for (std::size_t c = 0; c < d; ++c) (*gx)[r * d + c] += g[r * d + c] / eps;
        continue;
      }
      double dot = 0.0;
      for (std::size_t c = 0; c < d; ++c) dot += g[r * d + c] * y[r * d + c];
      for (std::size_t c = 0; c < d; ++c) (*gx)[r * d + c] += (g[r * d + c] - dot * y[r * d + c]) / norm[r];
    }
  });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  const Shape& s = x.shape();
  if (s.empty()) throw ShapeError("layer_norm on a scalar");
  const std::size_t d = s.back();
  if (gamma.value().numel() != d || beta.value().numel() != d) {
    throw ShapeError("layer_norm: feature dimension " + std::to_string(d) + " does not match gamma/beta");
  }
  const std::size_t rows = x.value().numel() / d;
  Tensor xhat(s), out(s);
  std::vector<double> invstd(rows);
  const Tensor& xv = x.value();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * d;
    double mu = 0.0;
    for (std::size_t c = 0; c < d; ++c) mu += xr[c];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) var += (xr[c] - mu) * (xr[c] - mu);
    var /= static_cast<double>(d);
    invstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < d; ++c) {
      xhat[r * d + c] = (xr[c] - mu) * invstd[r];
      out[r * d + c] = xhat[r * d + c] * gamma.value()[c] + beta.value()[c];
    }
  }
  return x.tape().record(std::move(out), {x, gamma, beta},
                         [x, gamma, beta, rows, d, invstd = std::move(invstd), xhat = std::move(xhat)](
                             Tape& t, const Tensor& g) {
                           auto* gx = t.grad_for(x);
                           auto* gg = t.grad_for(gamma);
                           auto* gb = t.grad_for(beta);
                           const Tensor& gam = t.value(gamma);
                           std::vector<double> dxhat(d);
                           for (std::size_t r = 0; r < rows; ++r) {
                             double s1 = 0.0, s2 = 0.0;
                             for (std::size_t c = 0; c < d; ++c) {
                               const std::size_t i = r * d + c;
                               if (gg) (*gg)[c] += g[i] * xhat[i];
                               if (gb) (*gb)[c] += g[i];
                               dxhat[c] = g[i] * gam[c];
                               s1 += dxhat[c];
                               s2 += dxhat[c] * xhat[i];
                             }
                             if (!gx) continue;
                             const double inv_d = 1.0 / static_cast<double>(d);
                             for (std::size_t c = 0; c < d; ++c) {
                               const std::size_t i = r * d + c;
                               (*gx)[i] += invstd[r] * (dxhat[c] - s1 * inv_d - xhat[i] * s2 * inv_d);
                             }
                           }
                         });
}

}  // namespace cupe::nn
