#include "spx/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

#include "spx/error.hpp"

namespace spx {
namespace ops {

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

Tensor make_output(std::vector<int> shape, bool requires_grad) {
  Tensor out(std::move(shape));
  out.requires_grad = requires_grad;
  if (requires_grad) out.ensure_grad();
  return out;
}

void expect(bool cond, const char* msg) {
  if (!cond) throw DimensionError(msg);
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  expect(a.rank() == 2 && b.rank() == 2, "matmul: inputs must be rank 2");
  const int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  expect(k == k2, "matmul: inner dimensions disagree");

  const bool rg = track_grad(a, b);
  Tensor out = make_output({m, n}, rg);
  const float* pa = a.ptr();
  const float* pb = b.ptr();
  float* po = out.data->data();
  std::vector<double> acc(static_cast<std::size_t>(n));
  for (int i = 0; i < m; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    const float* arow = pa + static_cast<std::size_t>(i) * k;
    for (int kk = 0; kk < k; ++kk) {
      const double av = arow[kk];
      const float* brow = pb + static_cast<std::size_t>(kk) * n;
      for (int j = 0; j < n; ++j) acc[j] += av * brow[j];
    }
    float* orow = po + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) orow[j] = static_cast<float>(acc[j]);
  }
  check_finite(out, "matmul");

  if (rg) {
    Tensor ac = a, bc = b, oc = out;
    active_tape()->record([ac, bc, oc, m, k, n]() mutable {
      const float* g = oc.grad->data();
      if (ac.requires_grad) {
        float* da = ac.grad->data();
        const float* pb2 = bc.ptr();
        for (int i = 0; i < m; ++i) {
          for (int kk = 0; kk < k; ++kk) {
            double acc2 = 0.0;
            const float* grow = g + static_cast<std::size_t>(i) * n;
            const float* brow = pb2 + static_cast<std::size_t>(kk) * n;
            for (int j = 0; j < n; ++j) acc2 += static_cast<double>(grow[j]) * brow[j];
            da[static_cast<std::size_t>(i) * k + kk] += static_cast<float>(acc2);
          }
        }
      }
      if (bc.requires_grad) {
        float* db = bc.grad->data();
        const float* pa2 = ac.ptr();
        for (int kk = 0; kk < k; ++kk) {
          for (int j = 0; j < n; ++j) {
            double acc2 = 0.0;
            for (int i = 0; i < m; ++i) {
              acc2 += static_cast<double>(pa2[static_cast<std::size_t>(i) * k + kk]) *
                      g[static_cast<std::size_t>(i) * n + j];
            }
            db[static_cast<std::size_t>(kk) * n + j] += static_cast<float>(acc2);
          }
        }
      }
    });
  }
  return out;
}

Tensor transpose2d(const Tensor& x) {
  expect(x.rank() == 2, "transpose2d: input must be rank 2");
  const int m = x.dim(0), n = x.dim(1);
  const bool rg = track_grad(x);
  Tensor out = make_output({n, m}, rg);
  const float* px = x.ptr();
  float* po = out.data->data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      po[static_cast<std::size_t>(j) * m + i] = px[static_cast<std::size_t>(i) * n + j];
  check_finite(out, "transpose2d");
  if (rg) {
    Tensor xc = x, oc = out;
    active_tape()->record([xc, oc, m, n]() mutable {
      const float* g = oc.grad->data();
      float* dx = xc.grad->data();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
          dx[static_cast<std::size_t>(i) * n + j] += g[static_cast<std::size_t>(j) * m + i];
    });
  }
  return out;
}

Tensor reshape(const Tensor& x, std::vector<int> shape) {
  expect(shape_numel(shape) == x.numel(), "reshape: element count mismatch");
  const bool rg = track_grad(x);
  Tensor out;
  out.shape = std::move(shape);
  out.data = x.data;  // storage is immutable, sharing is safe
  out.requires_grad = rg;
  if (rg) {
    out.ensure_grad();
    Tensor xc = x, oc = out;
    active_tape()->record([xc, oc]() mutable {
      const float* g = oc.grad->data();
      float* dx = xc.grad->data();
      const std::size_t n = xc.numel();
      for (std::size_t i = 0; i < n; ++i) dx[i] += g[i];
    });
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  expect(a.shape == b.shape, "add: shape mismatch");
  const bool rg = track_grad(a, b);
  Tensor out = make_output(a.shape, rg);
  const std::size_t n = a.numel();
  const float* pa = a.ptr();
  const float* pb = b.ptr();
  float* po = out.data->data();
  for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
  check_finite(out, "add");
  if (rg) {
    Tensor ac = a, bc = b, oc = out;
    active_tape()->record([ac, bc, oc, n]() mutable {
      const float* g = oc.grad->data();
      if (ac.requires_grad) {
        float* da = ac.grad->data();
        for (std::size_t i = 0; i < n; ++i) da[i] += g[i];
      }
      if (bc.requires_grad) {
        float* db = bc.grad->data();
        for (std::size_t i = 0; i < n; ++i) db[i] += g[i];
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  expect(a.shape == b.shape, "mul: shape mismatch");
  const bool rg = track_grad(a, b);
  Tensor out = make_output(a.shape, rg);
  const std::size_t n = a.numel();
  const float* pa = a.ptr();
  const float* pb = b.ptr();
  float* po = out.data->data();
  for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
  check_finite(out, "mul");
  if (rg) {
    Tensor ac = a, bc = b, oc = out;
    active_tape()->record([ac, bc, oc, n]() mutable {
      const float* g = oc.grad->data();
      if (ac.requires_grad) {
        float* da = ac.grad->data();
        const float* pb2 = bc.ptr();
        for (std::size_t i = 0; i < n; ++i) da[i] += g[i] * pb2[i];
      }
      if (bc.requires_grad) {
        float* db = bc.grad->data();
        const float* pa2 = ac.ptr();
        for (std::size_t i = 0; i < n; ++i) db[i] += g[i] * pa2[i];
      }
    });
  }
  return out;
}

Tensor smul(const Tensor& x, float s) {
  const bool rg = track_grad(x);
  Tensor out = make_output(x.shape, rg);
  const std::size_t n = x.numel();
  const float* px = x.ptr();
  float* po = out.data->data();
  for (std::size_t i = 0; i < n; ++i) po[i] = px[i] * s;
  check_finite(out, "smul");
  if (rg) {
    Tensor xc = x, oc = out;
    active_tape()->record([xc, oc, s, n]() mutable {
      const float* g = oc.grad->data();
      float* dx = xc.grad->data();
      for (std::size_t i = 0; i < n; ++i) dx[i] += g[i] * s;
    });
  }
  return out;
}

Tensor add_bias_rows(const Tensor& x, const Tensor& bias) {
  expect(x.rank() == 2 && bias.rank() == 1, "add_bias_rows: want [n,c] and [c]");
  const int n = x.dim(0), c = x.dim(1);
  expect(bias.dim(0) == c, "add_bias_rows: bias length mismatch");
  const bool rg = track_grad(x, bias);
  Tensor out = make_output(x.shape, rg);
  const float* px = x.ptr();
  const float* pbias = bias.ptr();
  float* po = out.data->data();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < c; ++j)
      po[static_cast<std::size_t>(i) * c + j] = px[static_cast<std::size_t>(i) * c + j] + pbias[j];
  check_finite(out, "add_bias_rows");
  if (rg) {
    Tensor xc = x, bc = bias, oc = out;
    active_tape()->record([xc, bc, oc, n, c]() mutable {
      const float* g = oc.grad->data();
      if (xc.requires_grad) {
        float* dx = xc.grad->data();
        const std::size_t total = static_cast<std::size_t>(n) * c;
        for (std::size_t i = 0; i < total; ++i) dx[i] += g[i];
      }
      if (bc.requires_grad) {
        float* db = bc.grad->data();
        for (int j = 0; j < c; ++j) {
          double acc = 0.0;
          for (int i = 0; i < n; ++i) acc += g[static_cast<std::size_t>(i) * c + j];
          db[j] += static_cast<float>(acc);
        }
      }
    });
  }
  return out;
}

Tensor scale_channels(const Tensor& x, const Tensor& gamma) {
  expect(x.rank() == 2 && gamma.rank() == 1, "scale_channels: want [n,c] and [c]");
  const int n = x.dim(0), c = x.dim(1);
  expect(gamma.dim(0) == c, "scale_channels: gamma length mismatch");
  const bool rg = track_grad(x, gamma);
  Tensor out = make_output(x.shape, rg);
  const float* px = x.ptr();
  const float* pg = gamma.ptr();
  float* po = out.data->data();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < c; ++j)
      po[static_cast<std::size_t>(i) * c + j] = px[static_cast<std::size_t>(i) * c + j] * pg[j];
  check_finite(out, "scale_channels");
  if (rg) {
    Tensor xc = x, gc = gamma, oc = out;
    active_tape()->record([xc, gc, oc, n, c]() mutable {
      const float* g = oc.grad->data();
      if (xc.requires_grad) {
        float* dx = xc.grad->data();
        const float* pg2 = gc.ptr();
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < c; ++j)
            dx[static_cast<std::size_t>(i) * c + j] += g[static_cast<std::size_t>(i) * c + j] * pg2[j];
      }
      if (gc.requires_grad) {
        float* dg = gc.grad->data();
        const float* px2 = xc.ptr();
        for (int j = 0; j < c; ++j) {
          double acc = 0.0;
          for (int i = 0; i < n; ++i)
            acc += static_cast<double>(g[static_cast<std::size_t>(i) * c + j]) *
                   px2[static_cast<std::size_t>(i) * c + j];
          dg[j] += static_cast<float>(acc);
        }
      }
    });
  }
  return out;
}

Tensor slice_cols(const Tensor& x, int start, int len) {
  expect(x.rank() == 2, "slice_cols: input must be rank 2");
  const int n = x.dim(0), c = x.dim(1);
  expect(start >= 0 && len > 0 && start + len <= c, "slice_cols: slice out of range");
  const bool rg = track_grad(x);
  Tensor out = make_output({n, len}, rg);
  const float* px = x.ptr();
  float* po = out.data->data();
  for (int i = 0; i < n; ++i)
    std::memcpy(po + static_cast<std::size_t>(i) * len,
                px + static_cast<std::size_t>(i) * c + start,
                static_cast<std::size_t>(len) * sizeof(float));
  check_finite(out, "slice_cols");
  if (rg) {
    Tensor xc = x, oc = out;
    active_tape()->record([xc, oc, n, c, start, len]() mutable {
      const float* g = oc.grad->data();
      float* dx = xc.grad->data();
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < len; ++j)
          dx[static_cast<std::size_t>(i) * c + start + j] += g[static_cast<std::size_t>(i) * len + j];
    });
  }
  return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  expect(!parts.empty(), "concat_cols: no parts");
  const int n = parts[0].dim(0);
  int c = 0;
  bool rg = false;
  for (const Tensor& p : parts) {
    expect(p.rank() == 2 && p.dim(0) == n, "concat_cols: row count mismatch");
    c += p.dim(1);
    rg = rg || track_grad(p);
  }
  Tensor out = make_output({n, c}, rg);
  float* po = out.data->data();
  int col = 0;
  for (const Tensor& p : parts) {
    const int pc = p.dim(1);
    const float* pp = p.ptr();
    for (int i = 0; i < n; ++i)
      std::memcpy(po + static_cast<std::size_t>(i) * c + col,
                  pp + static_cast<std::size_t>(i) * pc,
                  static_cast<std::size_t>(pc) * sizeof(float));
    col += pc;
  }
  check_finite(out, "concat_cols");
  if (rg) {
    std::vector<Tensor> pc(parts);
    Tensor oc = out;
    active_tape()->record([pc, oc, n, c]() mutable {
      const float* g = oc.grad->data();
      int col2 = 0;
      for (Tensor& p : pc) {
        const int w = p.dim(1);
        if (p.requires_grad) {
          float* dp = p.grad->data();
          for (int i = 0; i < n; ++i)
            for (int j = 0; j < w; ++j)
              dp[static_cast<std::size_t>(i) * w + j] += g[static_cast<std::size_t>(i) * c + col2 + j];
        }
        col2 += w;
      }
    });
  }
  return out;
}

Tensor mean_axis0(const Tensor& x) {
  expect(x.rank() >= 1 && x.dim(0) > 0, "mean_axis0: empty leading axis");
  const int k = x.dim(0);
  std::vector<int> tail(x.shape.begin() + 1, x.shape.end());
  if (tail.empty()) tail.push_back(1);
  const std::size_t m = shape_numel(tail);
  const bool rg = track_grad(x);
  Tensor out = make_output(tail, rg);
  const float* px = x.ptr();
  float* po = out.data->data();
  for (std::size_t j = 0; j < m; ++j) {
    double acc = 0.0;
    for (int i = 0; i < k; ++i) acc += px[static_cast<std::size_t>(i) * m + j];
    po[j] = static_cast<float>(acc / k);
  }
  check_finite(out, "mean_axis0");
  if (rg) {
    Tensor xc = x, oc = out;
    active_tape()->record([xc, oc, k, m]() mutable {
      const float* g = oc.grad->data();
      float* dx = xc.grad->data();
      const float inv = 1.0f / static_cast<float>(k);
      for (int i = 0; i < k; ++i)
        for (std::size_t j = 0; j < m; ++j) dx[static_cast<std::size_t>(i) * m + j] += g[j] * inv;
    });
  }
  return out;
}

Tensor mean_rows(const Tensor& x) {
  expect(x.rank() == 2, "mean_rows: input must be rank 2");
  return mean_axis0(x);
}

Tensor sum_all(const Tensor& x) {
  const bool rg = track_grad(x);
  Tensor out = make_output({1}, rg);
  const std::size_t n = x.numel();
  const float* px = x.ptr();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += px[i];
  (*out.data)[0] = static_cast<float>(acc);
  check_finite(out, "sum_all");
  if (rg) {
    Tensor xc = x, oc = out;
    active_tape()->record([xc, oc, n]() mutable {
      const float g = (*oc.grad)[0];
      float* dx = xc.grad->data();
      for (std::size_t i = 0; i < n; ++i) dx[i] += g;
    });
  }
  return out;
}

Tensor gelu(const Tensor& x) {
  const bool rg = track_grad(x);
  Tensor out = make_output(x.shape, rg);
  const std::size_t n = x.numel();
  const float* px = x.ptr();
  float* po = out.data->data();
  for (std::size_t i = 0; i < n; ++i) {
    const double v = px[i];
    po[i] = static_cast<float>(0.5 * v * (1.0 + std::erf(v * kInvSqrt2)));
  }
  check_finite(out, "gelu");
  if (rg) {
    Tensor xc = x, oc = out;
    active_tape()->record([xc, oc, n]() mutable {
      const float* g = oc.grad->data();
      float* dx = xc.grad->data();
      const float* px2 = xc.ptr();
      for (std::size_t i = 0; i < n; ++i) {
        const double v = px2[i];
        const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
        dx[i] += static_cast<float>(g[i] * (cdf + v * pdf));
      }
    });
  }
  return out;
}

Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
  expect(x.rank() == 2, "layernorm: input must be [n,c]");
  const int n = x.dim(0), c = x.dim(1);
  expect(gamma.rank() == 1 && gamma.dim(0) == c, "layernorm: gamma length mismatch");
  expect(beta.rank() == 1 && beta.dim(0) == c, "layernorm: beta length mismatch");
  constexpr double kEps = 1e-6;
  const bool rg = track_grad(x, gamma, beta);
  Tensor out = make_output(x.shape, rg);
  const float* px = x.ptr();
  const float* pg = gamma.ptr();
  const float* pbt = beta.ptr();
  float* po = out.data->data();
  for (int i = 0; i < n; ++i) {
    const float* row = px + static_cast<std::size_t>(i) * c;
    double mean = 0.0;
    for (int j = 0; j < c; ++j) mean += row[j];
    mean /= c;
    double var = 0.0;
    for (int j = 0; j < c; ++j) {
      const double d = row[j] - mean;
      var += d * d;
    }
    var /= c;
    const double inv_sigma = 1.0 / std::sqrt(var + kEps);
    float* orow = po + static_cast<std::size_t>(i) * c;
    for (int j = 0; j < c; ++j)
      orow[j] = static_cast<float>((row[j] - mean) * inv_sigma * pg[j] + pbt[j]);
  }
  check_finite(out, "layernorm");
  if (rg) {
    Tensor xc = x, gc = gamma, bc = beta, oc = out;
    active_tape()->record([xc, gc, bc, oc, n, c]() mutable {
      const float* g = oc.grad->data();
      const float* px2 = xc.ptr();
      const float* pg2 = gc.ptr();
      std::vector<double> xhat(static_cast<std::size_t>(c));
      for (int i = 0; i < n; ++i) {
        const float* row = px2 + static_cast<std::size_t>(i) * c;
        const float* grow = g + static_cast<std::size_t>(i) * c;
        double mean = 0.0;
        for (int j = 0; j < c; ++j) mean += row[j];
        mean /= c;
        double var = 0.0;
        for (int j = 0; j < c; ++j) {
          const double d = row[j] - mean;
          var += d * d;
        }
        var /= c;
        const double inv_sigma = 1.0 / std::sqrt(var + kEps);
        for (int j = 0; j < c; ++j) xhat[j] = (row[j] - mean) * inv_sigma;
        if (xc.requires_grad) {
          double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
          for (int j = 0; j < c; ++j) {
            const double dxh = static_cast<double>(grow[j]) * pg2[j];
            sum_dxhat += dxh;
            sum_dxhat_xhat += dxh * xhat[j];
          }
          float* dx = xc.grad->data() + static_cast<std::size_t>(i) * c;
          for (int j = 0; j < c; ++j) {
            const double dxh = static_cast<double>(grow[j]) * pg2[j];
            dx[j] += static_cast<float>(
                inv_sigma * (dxh - sum_dxhat / c - xhat[j] * sum_dxhat_xhat / c));
          }
        }
        if (gc.requires_grad) {
          float* dg = gc.grad->data();
          for (int j = 0; j < c; ++j) dg[j] += static_cast<float>(grow[j] * xhat[j]);
        }
        if (bc.requires_grad) {
          float* db = bc.grad->data();
          for (int j = 0; j < c; ++j) db[j] += grow[j];
        }
      }
    });
  }
  return out;
}

namespace {

Tensor softmax_impl(const Tensor& logits, const Tensor& mask, bool has_mask) {
  expect(logits.rank() == 2, "masked_softmax: logits must be [n,k]");
  if (has_mask) expect(mask.shape == logits.shape, "masked_softmax: mask shape mismatch");
  const int n = logits.dim(0), k = logits.dim(1);
  const bool rg = track_grad(logits);
  Tensor out = make_output(logits.shape, rg);
  const float* px = logits.ptr();
  const float* pm = has_mask ? mask.ptr() : nullptr;
  float* po = out.data->data();
  for (int i = 0; i < n; ++i) {
    const float* row = px + static_cast<std::size_t>(i) * k;
    const float* mrow = has_mask ? pm + static_cast<std::size_t>(i) * k : nullptr;
    float m = -std::numeric_limits<float>::infinity();
    int kept = 0;
    for (int j = 0; j < k; ++j) {
      if (mrow && mrow[j] == 0.0f) continue;
      ++kept;
      m = std::max(m, row[j]);
    }
    if (kept == 0) throw NumericError("masked_softmax: fully masked row");
    double denom = 0.0;
    float* orow = po + static_cast<std::size_t>(i) * k;
    for (int j = 0; j < k; ++j) {
      if (mrow && mrow[j] == 0.0f) {
        orow[j] = 0.0f;
      } else {
        orow[j] = static_cast<float>(std::exp(static_cast<double>(row[j]) - m));
        denom += orow[j];
      }
    }
    const double inv = 1.0 / denom;
    for (int j = 0; j < k; ++j)
      if (!mrow || mrow[j] != 0.0f) orow[j] = static_cast<float>(orow[j] * inv);
  }
  check_finite(out, "masked_softmax");
  if (rg) {
    Tensor xc = logits, oc = out;
    Tensor mc = has_mask ? mask : Tensor();
    active_tape()->record([xc, oc, mc, has_mask, n, k]() mutable {
      const float* g = oc.grad->data();
      const float* py = oc.ptr();
      const float* pm2 = has_mask ? mc.ptr() : nullptr;
      float* dx = xc.grad->data();
      for (int i = 0; i < n; ++i) {
        const float* yrow = py + static_cast<std::size_t>(i) * k;
        const float* grow = g + static_cast<std::size_t>(i) * k;
        const float* mrow = has_mask ? pm2 + static_cast<std::size_t>(i) * k : nullptr;
        double s = 0.0;
        for (int j = 0; j < k; ++j) {
          if (mrow && mrow[j] == 0.0f) continue;
          s += static_cast<double>(grow[j]) * yrow[j];
        }
        float* dxrow = dx + static_cast<std::size_t>(i) * k;
        for (int j = 0; j < k; ++j) {
          if (mrow && mrow[j] == 0.0f) continue;
          dxrow[j] += static_cast<float>(yrow[j] * (grow[j] - s));
        }
      }
    });
  }
  return out;
}

}  // namespace

Tensor masked_softmax(const Tensor& logits, const Tensor& mask) {
  return softmax_impl(logits, mask, true);
}

Tensor softmax_rows(const Tensor& logits) { return softmax_impl(logits, Tensor(), false); }

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                     float label_smoothing) {
  expect(logits.rank() == 2, "cross_entropy: logits must be [b,k]");
  const int b = logits.dim(0), k = logits.dim(1);
  expect(static_cast<int>(targets.size()) == b, "cross_entropy: target count mismatch");
  for (int t : targets) expect(t >= 0 && t < k, "cross_entropy: target out of range");
  const double alpha = label_smoothing;
  const bool rg = track_grad(logits);
  Tensor out = make_output({1}, rg);
  const float* px = logits.ptr();
  double total = 0.0;
  for (int i = 0; i < b; ++i) {
    const float* row = px + static_cast<std::size_t>(i) * k;
    double m = row[0];
    for (int j = 1; j < k; ++j) m = std::max(m, static_cast<double>(row[j]));
    double lse = 0.0;
    for (int j = 0; j < k; ++j) lse += std::exp(row[j] - m);
    lse = m + std::log(lse);
    double loss = -(1.0 - alpha) * (row[targets[i]] - lse);
    if (alpha > 0.0) {
      double sum_logp = 0.0;
      for (int j = 0; j < k; ++j) sum_logp += row[j] - lse;
      loss -= alpha / k * sum_logp;
    }
    total += loss;
  }
  (*out.data)[0] = static_cast<float>(total / b);
  check_finite(out, "cross_entropy");
  if (rg) {
    Tensor xc = logits, oc = out;
    std::vector<int> tc = targets;
    active_tape()->record([xc, oc, tc, b, k, alpha]() mutable {
      const float g = (*oc.grad)[0];
      const float* px2 = xc.ptr();
      float* dx = xc.grad->data();
      for (int i = 0; i < b; ++i) {
        const float* row = px2 + static_cast<std::size_t>(i) * k;
        double m = row[0];
        for (int j = 1; j < k; ++j) m = std::max(m, static_cast<double>(row[j]));
        double denom = 0.0;
        for (int j = 0; j < k; ++j) denom += std::exp(row[j] - m);
        float* dxrow = dx + static_cast<std::size_t>(i) * k;
        for (int j = 0; j < k; ++j) {
          const double p = std::exp(row[j] - m) / denom;
          const double q = (j == tc[i] ? 1.0 - alpha : 0.0) + alpha / k;
          dxrow[j] += static_cast<float>(g * (p - q) / b);
        }
      }
    });
  }
  return out;
}

Tensor depthwise_conv3x3(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  expect(x.rank() == 3, "depthwise_conv3x3: input must be [c,h,w]");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  expect(weight.rank() == 3 && weight.dim(0) == c && weight.dim(1) == 3 && weight.dim(2) == 3,
         "depthwise_conv3x3: weight must be [c,3,3]");
  expect(bias.rank() == 1 && bias.dim(0) == c, "depthwise_conv3x3: bias must be [c]");
  const bool rg = track_grad(x, weight, bias);
  Tensor out = make_output({c, h, w}, rg);
  const float* px = x.ptr();
  const float* pw = weight.ptr();
  const float* pb = bias.ptr();
  float* po = out.data->data();
  for (int ch = 0; ch < c; ++ch) {
    const float* plane = px + static_cast<std::size_t>(ch) * h * w;
    const float* ker = pw + static_cast<std::size_t>(ch) * 9;
    float* oplane = po + static_cast<std::size_t>(ch) * h * w;
    for (int y = 0; y < h; ++y) {
      for (int xx = 0; xx < w; ++xx) {
        double acc = pb[ch];
        for (int dy = 0; dy < 3; ++dy) {
          const int sy = y + dy - 1;
          if (sy < 0 || sy >= h) continue;
          for (int dx = 0; dx < 3; ++dx) {
            const int sx = xx + dx - 1;
            if (sx < 0 || sx >= w) continue;
            acc += static_cast<double>(ker[dy * 3 + dx]) * plane[sy * w + sx];
          }
        }
        oplane[y * w + xx] = static_cast<float>(acc);
      }
    }
  }
  check_finite(out, "depthwise_conv3x3");
  if (rg) {
    Tensor xc = x, wc = weight, bc = bias, oc = out;
    active_tape()->record([xc, wc, bc, oc, c, h, w]() mutable {
      const float* g = oc.grad->data();
      const float* px2 = xc.ptr();
      const float* pw2 = wc.ptr();
      for (int ch = 0; ch < c; ++ch) {
        const float* gplane = g + static_cast<std::size_t>(ch) * h * w;
        if (xc.requires_grad) {
          float* dx = xc.grad->data() + static_cast<std::size_t>(ch) * h * w;
          const float* ker = pw2 + static_cast<std::size_t>(ch) * 9;
          for (int y = 0; y < h; ++y) {
            for (int xx = 0; xx < w; ++xx) {
              const float gv = gplane[y * w + xx];
              for (int dy = 0; dy < 3; ++dy) {
                const int sy = y + dy - 1;
                if (sy < 0 || sy >= h) continue;
                for (int dx = 0; dx < 3; ++dx) {
                  const int sx = xx + dx - 1;
                  if (sx < 0 || sx >= w) continue;
                  dx[0] += 0.0f;  // placate unused warnings pattern; real update below
                  xc.grad->data()[(static_cast<std::size_t>(ch) * h + sy) * w + sx] +=
                      gv * ker[dy * 3 + dx];
                }
              }
            }
          }
        }
        if (wc.requires_grad) {
          float* dw = wc.grad->data() + static_cast<std::size_t>(ch) * 9;
          const float* plane = px2 + static_cast<std::size_t>(ch) * h * w;
          for (int dy = 0; dy < 3; ++dy) {
            for (int dx = 0; dx < 3; ++dx) {
              double acc = 0.0;
              for (int y = 0; y < h; ++y) {
                const int sy = y + dy - 1;
                if (sy < 0 || sy >= h) continue;
                for (int xx = 0; xx < w; ++xx) {
                  const int sx = xx + dx - 1;
                  if (sx < 0 || sx >= w) continue;
                  acc += static_cast<double>(gplane[y * w + xx]) * plane[sy * w + sx];
                }
              }
              dw[dy * 3 + dx] += static_cast<float>(acc);
            }
          }
        }
        if (bc.requires_grad) {
          double acc = 0.0;
          for (int i = 0; i < h * w; ++i) acc += gplane[i];
          bc.grad->data()[ch] += static_cast<float>(acc);
        }
      }
    });
  }
  return out;
}

Tensor conv3x3(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride) {
  expect(x.rank() == 3, "conv3x3: input must be [cin,h,w]");
  expect(stride >= 1, "conv3x3: stride must be >= 1");
  const int cin = x.dim(0), h = x.dim(1), w = x.dim(2);
  expect(weight.rank() == 4 && weight.dim(1) == cin && weight.dim(2) == 3 && weight.dim(3) == 3,
         "conv3x3: weight must be [cout,cin,3,3]");
  const int cout = weight.dim(0);
  expect(bias.rank() == 1 && bias.dim(0) == cout, "conv3x3: bias must be [cout]");
  const int oh = (h + 2 - 3) / stride + 1;
  const int ow = (w + 2 - 3) / stride + 1;
  const bool rg = track_grad(x, weight, bias);
  Tensor out = make_output({cout, oh, ow}, rg);
  const float* px = x.ptr();
  const float* pw = weight.ptr();
  const float* pb = bias.ptr();
  float* po = out.data->data();
  for (int co = 0; co < cout; ++co) {
    float* oplane = po + static_cast<std::size_t>(co) * oh * ow;
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        double acc = pb[co];
        for (int ci = 0; ci < cin; ++ci) {
          const float* plane = px + static_cast<std::size_t>(ci) * h * w;
          const float* ker = pw + (static_cast<std::size_t>(co) * cin + ci) * 9;
          for (int dy = 0; dy < 3; ++dy) {
            const int sy = oy * stride + dy - 1;
            if (sy < 0 || sy >= h) continue;
            for (int dx = 0; dx < 3; ++dx) {
              const int sx = ox * stride + dx - 1;
              if (sx < 0 || sx >= w) continue;
              acc += static_cast<double>(ker[dy * 3 + dx]) * plane[sy * w + sx];
            }
          }
        }
        oplane[oy * ow + ox] = static_cast<float>(acc);
      }
    }
  }
  check_finite(out, "conv3x3");
  if (rg) {
    Tensor xc = x, wc = weight, bc = bias, oc = out;
    active_tape()->record([xc, wc, bc, oc, cin, cout, h, w, oh, ow, stride]() mutable {
      const float* g = oc.grad->data();
      const float* px2 = xc.ptr();
      const float* pw2 = wc.ptr();
      for (int co = 0; co < cout; ++co) {
        const float* gplane = g + static_cast<std::size_t>(co) * oh * ow;
        for (int oy = 0; oy < oh; ++oy) {
          for (int ox = 0; ox < ow; ++ox) {
            const float gv = gplane[oy * ow + ox];
            if (gv == 0.0f) continue;
            for (int ci = 0; ci < cin; ++ci) {
              const float* ker = pw2 + (static_cast<std::size_t>(co) * cin + ci) * 9;
              for (int dy = 0; dy < 3; ++dy) {
                const int sy = oy * stride + dy - 1;
                if (sy < 0 || sy >= h) continue;
                for (int dx = 0; dx < 3; ++dx) {
                  const int sx = ox * stride + dx - 1;
                  if (sx < 0 || sx >= w) continue;
                  if (xc.requires_grad)
                    xc.grad->data()[(static_cast<std::size_t>(ci) * h + sy) * w + sx] +=
                        gv * ker[dy * 3 + dx];
                  if (wc.requires_grad)
                    wc.grad->data()[(static_cast<std::size_t>(co) * cin + ci) * 9 + dy * 3 + dx] +=
                        gv * px2[(static_cast<std::size_t>(ci) * h + sy) * w + sx];
                }
              }
            }
          }
        }
        if (bc.requires_grad) {
          double acc = 0.0;
          for (int i = 0; i < oh * ow; ++i) acc += gplane[i];
          bc.grad->data()[co] += static_cast<float>(acc);
        }
      }
    });
  }
  return out;
}

Tensor avgpool(const Tensor& x, int k) {
  expect(x.rank() == 3, "avgpool: input must be [c,h,w]");
  expect(k >= 1, "avgpool: k must be >= 1");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  expect(h % k == 0 && w % k == 0, "avgpool: extents must be divisible by k");
  const int oh = h / k, ow = w / k;
  const bool rg = track_grad(x);
  Tensor out = make_output({c, oh, ow}, rg);
  const float* px = x.ptr();
  float* po = out.data->data();
  const double inv = 1.0 / (static_cast<double>(k) * k);
  for (int ch = 0; ch < c; ++ch) {
    const float* plane = px + static_cast<std::size_t>(ch) * h * w;
    float* oplane = po + static_cast<std::size_t>(ch) * oh * ow;
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        double acc = 0.0;
        for (int dy = 0; dy < k; ++dy)
          for (int dx = 0; dx < k; ++dx) acc += plane[(oy * k + dy) * w + ox * k + dx];
        oplane[oy * ow + ox] = static_cast<float>(acc * inv);
      }
    }
  }
  check_finite(out, "avgpool");
  if (rg) {
    Tensor xc = x, oc = out;
    active_tape()->record([xc, oc, c, h, w, oh, ow, k]() mutable {
      const float* g = oc.grad->data();
      float* dx = xc.grad->data();
      const float inv = 1.0f / static_cast<float>(k * k);
      for (int ch = 0; ch < c; ++ch)
        for (int oy = 0; oy < oh; ++oy)
          for (int ox = 0; ox < ow; ++ox) {
            const float gv = g[(static_cast<std::size_t>(ch) * oh + oy) * ow + ox] * inv;
            for (int dy = 0; dy < k; ++dy)
              for (int dx2 = 0; dx2 < k; ++dx2)
                dx[(static_cast<std::size_t>(ch) * h + oy * k + dy) * w + ox * k + dx2] += gv;
          }
    });
  }
  return out;
}

Tensor cell_mean_pool(const Tensor& x, int r) {
  expect(x.rank() == 3, "cell_mean_pool: input must be [c,h,w]");
  expect(r >= 1, "cell_mean_pool: r must be >= 1");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int oh = (h + r - 1) / r, ow = (w + r - 1) / r;
  const bool rg = track_grad(x);
  Tensor out = make_output({c, oh, ow}, rg);
  const float* px = x.ptr();
  float* po = out.data->data();
  for (int ch = 0; ch < c; ++ch) {
    const float* plane = px + static_cast<std::size_t>(ch) * h * w;
    float* oplane = po + static_cast<std::size_t>(ch) * oh * ow;
    for (int oy = 0; oy < oh; ++oy) {
      const int y0 = oy * r, y1 = std::min(h, y0 + r);
      for (int ox = 0; ox < ow; ++ox) {
        const int x0 = ox * r, x1 = std::min(w, x0 + r);
        double acc = 0.0;
        for (int y = y0; y < y1; ++y)
          for (int xx = x0; xx < x1; ++xx) acc += plane[y * w + xx];
        oplane[oy * ow + ox] = static_cast<float>(acc / ((y1 - y0) * (x1 - x0)));
      }
    }
  }
  check_finite(out, "cell_mean_pool");
  if (rg) {
    Tensor xc = x, oc = out;
    active_tape()->record([xc, oc, c, h, w, oh, ow, r]() mutable {
      const float* g = oc.grad->data();
      float* dx = xc.grad->data();
      for (int ch = 0; ch < c; ++ch)
        for (int oy = 0; oy < oh; ++oy) {
          const int y0 = oy * r, y1 = std::min(h, y0 + r);
          for (int ox = 0; ox < ow; ++ox) {
            const int x0 = ox * r, x1 = std::min(w, x0 + r);
            const float gv = g[(static_cast<std::size_t>(ch) * oh + oy) * ow + ox] /
                             static_cast<float>((y1 - y0) * (x1 - x0));
            for (int y = y0; y < y1; ++y)
              for (int xx = x0; xx < x1; ++xx)
                dx[(static_cast<std::size_t>(ch) * h + y) * w + xx] += gv;
          }
        }
    });
  }
  return out;
}

Tensor unfold_patches(const Tensor& x, int k) {
  expect(x.rank() == 3, "unfold_patches: input must be [c,h,w]");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  expect(k >= 1 && h % k == 0 && w % k == 0, "unfold_patches: extents must be divisible by k");
  const int ph = h / k, pw = w / k;
  const int np = ph * pw, cols = c * k * k;
  const bool rg = track_grad(x);
  Tensor out = make_output({np, cols}, rg);
  const float* px = x.ptr();
  float* po = out.data->data();
  for (int py = 0; py < ph; ++py)
    for (int pxi = 0; pxi < pw; ++pxi) {
      float* row = po + static_cast<std::size_t>(py * pw + pxi) * cols;
      int col = 0;
      for (int ch = 0; ch < c; ++ch)
        for (int dy = 0; dy < k; ++dy)
          for (int dx = 0; dx < k; ++dx)
            row[col++] = px[(static_cast<std::size_t>(ch) * h + py * k + dy) * w + pxi * k + dx];
    }
  check_finite(out, "unfold_patches");
  if (rg) {
    Tensor xc = x, oc = out;
    active_tape()->record([xc, oc, c, h, w, k, ph, pw, cols]() mutable {
      const float* g = oc.grad->data();
      float* dx = xc.grad->data();
      for (int py = 0; py < ph; ++py)
        for (int pxi = 0; pxi < pw; ++pxi) {
          const float* grow = g + static_cast<std::size_t>(py * pw + pxi) * cols;
          int col = 0;
          for (int ch = 0; ch < c; ++ch)
            for (int dy = 0; dy < k; ++dy)
              for (int dx2 = 0; dx2 < k; ++dx2)
                dx[(static_cast<std::size_t>(ch) * h + py * k + dy) * w + pxi * k + dx2] +=
                    grow[col++];
        }
    });
  }
  return out;
}

namespace {

void expect_heads(const Tensor& t, int heads, const char* op) {
  if (t.rank() != 2 || heads < 1 || t.dim(1) % heads != 0) {
    throw DimensionError(std::string(op) + ": channels not divisible by heads");
  }
}

}  // namespace

Tensor pair_dot(const Tensor& a, PairSide a_side, const Tensor& b, const GeometryPtr& geom,
                int heads, float scale) {
  expect_heads(a, heads, "pair_dot");
  expect_heads(b, heads, "pair_dot");
  expect(a.dim(1) == b.dim(1), "pair_dot: channel mismatch");
  const int c = a.dim(1);
  const int dh = c / heads;
  const PairList& pl = geom->pairs;
  const int e_count = pl.count();
  const std::int32_t* ia = (a_side == PairSide::pixel) ? pl.pixel.data() : pl.superpixel.data();
  const std::int32_t* ib = (a_side == PairSide::pixel) ? pl.superpixel.data() : pl.pixel.data();
  const bool rg = track_grad(a, b);
  Tensor out = make_output({e_count, heads}, rg);
  const float* pa = a.ptr();
  const float* pb = b.ptr();
  float* po = out.data->data();
  for (int e = 0; e < e_count; ++e) {
    const float* arow = pa + static_cast<std::size_t>(ia[e]) * c;
    const float* brow = pb + static_cast<std::size_t>(ib[e]) * c;
    for (int hh = 0; hh < heads; ++hh) {
      double acc = 0.0;
      const int base = hh * dh;
      for (int d = 0; d < dh; ++d) acc += static_cast<double>(arow[base + d]) * brow[base + d];
      po[static_cast<std::size_t>(e) * heads + hh] = static_cast<float>(acc * scale);
    }
  }
  check_finite(out, "pair_dot");
  if (rg) {
    Tensor ac = a, bc = b, oc = out;
    GeometryPtr gm = geom;
    active_tape()->record([ac, bc, oc, gm, a_side, heads, dh, c, scale, e_count]() mutable {
      const PairList& pl2 = gm->pairs;
      const std::int32_t* ia2 =
          (a_side == PairSide::pixel) ? pl2.pixel.data() : pl2.superpixel.data();
      const std::int32_t* ib2 =
          (a_side == PairSide::pixel) ? pl2.superpixel.data() : pl2.pixel.data();
      const float* g = oc.grad->data();
      const float* pa2 = ac.ptr();
      const float* pb2 = bc.ptr();
      for (int e = 0; e < e_count; ++e) {
        for (int hh = 0; hh < heads; ++hh) {
          const float gv = g[static_cast<std::size_t>(e) * heads + hh] * scale;
          if (gv == 0.0f) continue;
          const int base = hh * dh;
          if (ac.requires_grad) {
            float* da = ac.grad->data() + static_cast<std::size_t>(ia2[e]) * c + base;
            const float* brow = pb2 + static_cast<std::size_t>(ib2[e]) * c + base;
            for (int d = 0; d < dh; ++d) da[d] += gv * brow[d];
          }
          if (bc.requires_grad) {
            float* db = bc.grad->data() + static_cast<std::size_t>(ib2[e]) * c + base;
            const float* arow = pa2 + static_cast<std::size_t>(ia2[e]) * c + base;
            for (int d = 0; d < dh; ++d) db[d] += gv * arow[d];
          }
        }
      }
    });
  }
  return out;
}

Tensor segment_softmax(const Tensor& x, const GeometryPtr& geom, PairGroup group) {
  expect(x.rank() == 2, "segment_softmax: input must be [E,heads]");
  const PairList& pl = geom->pairs;
  expect(x.dim(0) == pl.count(), "segment_softmax: pair count mismatch");
  const int heads = x.dim(1);
  const bool by_pixel = group == PairGroup::by_pixel;
  const std::vector<std::int32_t>& offsets = by_pixel ? pl.pixel_offsets : pl.sp_offsets;
  const std::int32_t* order = by_pixel ? nullptr : pl.sp_order.data();
  const int n_groups = static_cast<int>(offsets.size()) - 1;
  const bool rg = track_grad(x);
  Tensor out = make_output(x.shape, rg);
  const float* px = x.ptr();
  float* po = out.data->data();
  for (int gIdx = 0; gIdx < n_groups; ++gIdx) {
    const int lo = offsets[gIdx], hi = offsets[gIdx + 1];
    if (lo == hi) throw NumericError("segment_softmax: empty group");
    for (int hh = 0; hh < heads; ++hh) {
      float m = -std::numeric_limits<float>::infinity();
      for (int kk = lo; kk < hi; ++kk) {
        const int e = order ? order[kk] : kk;
        m = std::max(m, px[static_cast<std::size_t>(e) * heads + hh]);
      }
      double denom = 0.0;
      for (int kk = lo; kk < hi; ++kk) {
        const int e = order ? order[kk] : kk;
        const float v =
            static_cast<float>(std::exp(static_cast<double>(px[static_cast<std::size_t>(e) * heads + hh]) - m));
        po[static_cast<std::size_t>(e) * heads + hh] = v;
        denom += v;
      }
      const double inv = 1.0 / denom;
      for (int kk = lo; kk < hi; ++kk) {
        const int e = order ? order[kk] : kk;
        po[static_cast<std::size_t>(e) * heads + hh] =
            static_cast<float>(po[static_cast<std::size_t>(e) * heads + hh] * inv);
      }
    }
  }
  check_finite(out, "segment_softmax");
  if (rg) {
    Tensor xc = x, oc = out;
    GeometryPtr gm = geom;
    active_tape()->record([xc, oc, gm, group, heads]() mutable {
      const PairList& pl2 = gm->pairs;
      const bool by_pixel2 = group == PairGroup::by_pixel;
      const std::vector<std::int32_t>& offsets2 = by_pixel2 ? pl2.pixel_offsets : pl2.sp_offsets;
      const std::int32_t* order2 = by_pixel2 ? nullptr : pl2.sp_order.data();
      const int n_groups2 = static_cast<int>(offsets2.size()) - 1;
      const float* g = oc.grad->data();
      const float* py = oc.ptr();
      float* dx = xc.grad->data();
      for (int gIdx = 0; gIdx < n_groups2; ++gIdx) {
        const int lo = offsets2[gIdx], hi = offsets2[gIdx + 1];
        for (int hh = 0; hh < heads; ++hh) {
          double s = 0.0;
          for (int kk = lo; kk < hi; ++kk) {
            const int e = order2 ? order2[kk] : kk;
            s += static_cast<double>(g[static_cast<std::size_t>(e) * heads + hh]) *
                 py[static_cast<std::size_t>(e) * heads + hh];
          }
          for (int kk = lo; kk < hi; ++kk) {
            const int e = order2 ? order2[kk] : kk;
            const std::size_t at = static_cast<std::size_t>(e) * heads + hh;
            dx[at] += static_cast<float>(py[at] * (g[at] - s));
          }
        }
      }
    });
  }
  return out;
}

Tensor pair_mix(const Tensor& p, const Tensor& v, PairSide v_side, const GeometryPtr& geom) {
  expect(p.rank() == 2 && v.rank() == 2, "pair_mix: want [E,heads] and [n,c]");
  const PairList& pl = geom->pairs;
  expect(p.dim(0) == pl.count(), "pair_mix: pair count mismatch");
  const int heads = p.dim(1);
  expect_heads(v, heads, "pair_mix");
  const int c = v.dim(1);
  const int dh = c / heads;
  const bool to_pixel = v_side == PairSide::superpixel;
  const int n_out = to_pixel ? geom->grid.n_pixels() : geom->grid.n_superpixels();
  const std::int32_t* src = to_pixel ? pl.superpixel.data() : pl.pixel.data();
  // Sweep pairs grouped by the output side so each output row accumulates in
  // f64 over ascending pair ids.
  const std::vector<std::int32_t>& offsets = to_pixel ? pl.pixel_offsets : pl.sp_offsets;
  const std::int32_t* order = to_pixel ? nullptr : pl.sp_order.data();
  const bool rg = track_grad(p, v);
  Tensor out = make_output({n_out, c}, rg);
  const float* pp = p.ptr();
  const float* pv = v.ptr();
  float* po = out.data->data();
  std::vector<double> acc(static_cast<std::size_t>(c));
  for (int o = 0; o < n_out; ++o) {
    std::fill(acc.begin(), acc.end(), 0.0);
    const int lo = offsets[o], hi = offsets[o + 1];
    for (int kk = lo; kk < hi; ++kk) {
      const int e = order ? order[kk] : kk;
      const float* vrow = pv + static_cast<std::size_t>(src[e]) * c;
      for (int hh = 0; hh < heads; ++hh) {
        const double weight = pp[static_cast<std::size_t>(e) * heads + hh];
        const int base = hh * dh;
        for (int d = 0; d < dh; ++d) acc[base + d] += weight * vrow[base + d];
      }
    }
    float* orow = po + static_cast<std::size_t>(o) * c;
    for (int j = 0; j < c; ++j) orow[j] = static_cast<float>(acc[j]);
  }
  check_finite(out, "pair_mix");
  if (rg) {
    Tensor pc = p, vc = v, oc = out;
    GeometryPtr gm = geom;
    active_tape()->record([pc, vc, oc, gm, v_side, heads, dh, c]() mutable {
      const PairList& pl2 = gm->pairs;
      const bool to_pixel2 = v_side == PairSide::superpixel;
      const std::int32_t* src2 = to_pixel2 ? pl2.superpixel.data() : pl2.pixel.data();
      const std::int32_t* dst2 = to_pixel2 ? pl2.pixel.data() : pl2.superpixel.data();
      const int e_count = pl2.count();
      const float* g = oc.grad->data();
      const float* pp2 = pc.ptr();
      const float* pv2 = vc.ptr();
      for (int e = 0; e < e_count; ++e) {
        const float* grow = g + static_cast<std::size_t>(dst2[e]) * c;
        const float* vrow = pv2 + static_cast<std::size_t>(src2[e]) * c;
        for (int hh = 0; hh < heads; ++hh) {
          const int base = hh * dh;
          if (pc.requires_grad) {
            double acc2 = 0.0;
            for (int d = 0; d < dh; ++d)
              acc2 += static_cast<double>(grow[base + d]) * vrow[base + d];
            pc.grad->data()[static_cast<std::size_t>(e) * heads + hh] += static_cast<float>(acc2);
          }
          if (vc.requires_grad) {
            const float weight = pp2[static_cast<std::size_t>(e) * heads + hh];
            float* dv = vc.grad->data() + static_cast<std::size_t>(src2[e]) * c + base;
            for (int d = 0; d < dh; ++d) dv[d] += weight * grow[base + d];
          }
        }
      }
    });
  }
  return out;
}

Tensor pairs_to_padded(const Tensor& p, const GeometryPtr& geom) {
  expect(p.rank() == 2, "pairs_to_padded: input must be [E,heads]");
  const PairList& pl = geom->pairs;
  expect(p.dim(0) == pl.count(), "pairs_to_padded: pair count mismatch");
  const int heads = p.dim(1);
  const int n = geom->grid.n_pixels();
  const int e_count = pl.count();
  const bool rg = track_grad(p);
  Tensor out = make_output({heads, n, NeighborMap::kSlots}, rg);
  const float* pp = p.ptr();
  float* po = out.data->data();
  for (int e = 0; e < e_count; ++e) {
    const std::size_t base = static_cast<std::size_t>(pl.pixel[e]) * NeighborMap::kSlots + pl.slot[e];
    for (int hh = 0; hh < heads; ++hh)
      po[static_cast<std::size_t>(hh) * n * NeighborMap::kSlots + base] =
          pp[static_cast<std::size_t>(e) * heads + hh];
  }
  check_finite(out, "pairs_to_padded");
  if (rg) {
    Tensor pc = p, oc = out;
    GeometryPtr gm = geom;
    active_tape()->record([pc, oc, gm, heads, n, e_count]() mutable {
      const PairList& pl2 = gm->pairs;
      const float* g = oc.grad->data();
      float* dp = pc.grad->data();
      for (int e = 0; e < e_count; ++e) {
        const std::size_t base =
            static_cast<std::size_t>(pl2.pixel[e]) * NeighborMap::kSlots + pl2.slot[e];
        for (int hh = 0; hh < heads; ++hh)
          dp[static_cast<std::size_t>(e) * heads + hh] +=
              g[static_cast<std::size_t>(hh) * n * NeighborMap::kSlots + base];
      }
    });
  }
  return out;
}

Tensor padded_mix(const Tensor& a_padded, const Tensor& s, const GeometryPtr& geom) {
  expect(a_padded.rank() == 3 && a_padded.dim(2) == NeighborMap::kSlots,
         "padded_mix: association must be [heads,n,9]");
  const int heads = a_padded.dim(0);
  const int n = geom->grid.n_pixels();
  expect(a_padded.dim(1) == n, "padded_mix: pixel count mismatch");
  expect_heads(s, heads, "padded_mix");
  const int c = s.dim(1);
  const int dh = c / heads;
  expect(s.dim(0) == geom->grid.n_superpixels(), "padded_mix: superpixel count mismatch");
  const NeighborMap& nm = geom->neighbors;
  const bool rg = track_grad(a_padded, s);
  Tensor out = make_output({n, c}, rg);
  const float* pa = a_padded.ptr();
  const float* ps = s.ptr();
  float* po = out.data->data();
  std::vector<double> acc(static_cast<std::size_t>(c));
  for (int i = 0; i < n; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (int slot = 0; slot < NeighborMap::kSlots; ++slot) {
      const std::int32_t sp = nm.index[static_cast<std::size_t>(i) * NeighborMap::kSlots + slot];
      if (sp < 0) continue;
      const float* srow = ps + static_cast<std::size_t>(sp) * c;
      for (int hh = 0; hh < heads; ++hh) {
        const double weight =
            pa[(static_cast<std::size_t>(hh) * n + i) * NeighborMap::kSlots + slot];
        const int base = hh * dh;
        for (int d = 0; d < dh; ++d) acc[base + d] += weight * srow[base + d];
      }
    }
    float* orow = po + static_cast<std::size_t>(i) * c;
    for (int j = 0; j < c; ++j) orow[j] = static_cast<float>(acc[j]);
  }
  check_finite(out, "padded_mix");
  if (rg) {
    Tensor ac = a_padded, sc = s, oc = out;
    GeometryPtr gm = geom;
    active_tape()->record([ac, sc, oc, gm, heads, n, dh, c]() mutable {
      const NeighborMap& nm2 = gm->neighbors;
      const float* g = oc.grad->data();
      const float* pa2 = ac.ptr();
      const float* ps2 = sc.ptr();
      for (int i = 0; i < n; ++i) {
        const float* grow = g + static_cast<std::size_t>(i) * c;
        for (int slot = 0; slot < NeighborMap::kSlots; ++slot) {
          const std::int32_t sp =
              nm2.index[static_cast<std::size_t>(i) * NeighborMap::kSlots + slot];
          if (sp < 0) continue;
          const float* srow = ps2 + static_cast<std::size_t>(sp) * c;
          for (int hh = 0; hh < heads; ++hh) {
            const int base = hh * dh;
            const std::size_t a_at =
                (static_cast<std::size_t>(hh) * n + i) * NeighborMap::kSlots + slot;
            if (ac.requires_grad) {
              double acc2 = 0.0;
              for (int d = 0; d < dh; ++d)
                acc2 += static_cast<double>(grow[base + d]) * srow[base + d];
              ac.grad->data()[a_at] += static_cast<float>(acc2);
            }
            if (sc.requires_grad) {
              const float weight = pa2[a_at];
              float* ds = sc.grad->data() + static_cast<std::size_t>(sp) * c + base;
              for (int d = 0; d < dh; ++d) ds[d] += weight * grow[base + d];
            }
          }
        }
      }
    });
  }
  return out;
}

}  // namespace ops
}  // namespace spx
