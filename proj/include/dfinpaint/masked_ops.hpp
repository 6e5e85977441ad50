// Copyright 2026 The dfinpaint Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "dfinpaint/tensor.hpp"

namespace dfi {

/// Binary spatial mask, 1 = defective. One mask governs every channel.
struct Mask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> values;

  Mask() = default;
  Mask(std::size_t h, std::size_t w, std::uint8_t fill = 0) : height(h), width(w), values(h * w, fill) {}
  Mask(std::size_t h, std::size_t w, std::vector<std::uint8_t> v)
      : height(h), width(w), values(std::move(v)) {
    if (values.size() != h * w) throw DimensionError("Mask: value count mismatch");
    for (std::uint8_t x : values) {
      if (x > 1) throw ParameterError("Mask: values must be 0 or 1");
    }
  }

  std::size_t size() const { return values.size(); }
  std::uint8_t at(std::size_t r, std::size_t c) const { return values[r * width + c]; }
  std::uint8_t& at(std::size_t r, std::size_t c) { return values[r * width + c]; }

  std::size_t defective_count() const {
    return static_cast<std::size_t>(std::count(values.begin(), values.end(), std::uint8_t{1}));
  }
  bool any() const { return defective_count() != 0; }
  double ratio() const { return static_cast<double>(defective_count()) / static_cast<double>(size()); }

  bool operator==(const Mask&) const = default;
};

/// Masks m_0..m_T, one per downsampling level.
struct MaskPyramid {
  std::vector<Mask> levels;

  const Mask& top() const { return levels.back(); }
};

namespace detail {

inline void require_mask_matches(std::string_view op, const Tensor& x, const Mask& m) {
  if (x.rank() != 4 || x.shape[2] != m.height || x.shape[3] != m.width) {
    throw DimensionError(std::string(op) + ": mask " + std::to_string(m.height) + "x" +
                         std::to_string(m.width) + " does not match tensor " + to_string(x.shape));
  }
}

template <typename Reduce>
Mask pool_mask(const Mask& m, std::size_t stride, Reduce reduce, std::uint8_t init) {
  if (stride == 0) throw ParameterError("mask pooling: stride must be positive");
  if (m.height % stride != 0 || m.width % stride != 0) {
    throw ParameterError("mask pooling: " + std::to_string(m.height) + "x" + std::to_string(m.width) +
                         " not divisible by stride " + std::to_string(stride));
  }
  Mask out(m.height / stride, m.width / stride);
  for (std::size_t r = 0; r < out.height; ++r)
    for (std::size_t c = 0; c < out.width; ++c) {
      std::uint8_t acc = init;
      for (std::size_t dr = 0; dr < stride; ++dr)
        for (std::size_t dc = 0; dc < stride; ++dc) acc = reduce(acc, m.at(r * stride + dr, c * stride + dc));
      out.at(r, c) = acc;
    }
  return out;
}

}  // namespace detail

/// Non-overlapping max pool with kernel = stride: a cell is defective iff any
/// cell in its footprint is defective.
inline Mask mask_downsample(const Mask& m, std::size_t stride) {
  return detail::pool_mask(m, stride, [](std::uint8_t a, std::uint8_t b) { return std::max(a, b); },
                           std::uint8_t{0});
}

/// Cells whose whole footprint is defective, i.e. cells a defect-free
/// convolution with kernel = stride writes from bias alone.
inline Mask mask_fully_defective(const Mask& m, std::size_t stride) {
  return detail::pool_mask(m, stride, [](std::uint8_t a, std::uint8_t b) { return std::min(a, b); },
                           std::uint8_t{1});
}

inline Mask nearest_upsample(const Mask& m, std::size_t factor) {
  if (factor == 0) throw ParameterError("nearest_upsample: factor must be positive");
  Mask out(m.height * factor, m.width * factor);
  for (std::size_t r = 0; r < out.height; ++r)
    for (std::size_t c = 0; c < out.width; ++c) out.at(r, c) = m.at(r / factor, c / factor);
  return out;
}

/// Replicates every spatial cell of an NCHW tensor factor x factor times.
inline Var nearest_upsample(Var x, std::size_t factor) {
  detail::require_rank("nearest_upsample", x.value(), 4);
  if (factor == 0) throw ParameterError("nearest_upsample: factor must be positive");
  const std::size_t planes = x.shape()[0] * x.shape()[1];
  const std::size_t h = x.shape()[2], w = x.shape()[3];
  const std::size_t oh = h * factor, ow = w * factor;
  Tensor out(Shape{x.shape()[0], x.shape()[1], oh, ow});
  const auto& xv = x.value().data;
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t r = 0; r < oh; ++r)
      for (std::size_t c = 0; c < ow; ++c)
        out.data[(p * oh + r) * ow + c] = xv[(p * h + r / factor) * w + c / factor];
  return x.tape->record("nearest_upsample", std::move(out), {x},
                        [x, planes, h, w, oh, ow, factor](Tape& t, const std::vector<double>& g) {
                          if (!t.requires_grad(x)) return;
                          auto& gx = t.grad_buffer(x);
                          for (std::size_t p = 0; p < planes; ++p)
                            for (std::size_t r = 0; r < oh; ++r)
                              for (std::size_t c = 0; c < ow; ++c)
                                gx[(p * h + r / factor) * w + c / factor] += g[(p * oh + r) * ow + c];
                        });
}

/// Normalization with statistics re-estimated from non-defective elements.
///
/// Each (batch item, channel group) is normalized over its channels and all
/// spatial positions. With N elements in the group and N_v of them valid, the
/// forward pass follows the zero-fill algebra:
///   mu  = (N / N_v) * E[x with defective entries set to 0]
///   x'  = x with defective entries set to mu
///   var = ((N - 1) / (N_v - 1)) * SampleVar[x']
///   out = (x - mu) / (sqrt(var) + eps) on valid entries, 0 on defective ones
/// which equals normalizing the valid subset by its own sample statistics.
/// Defective input values are never read. An all-zero mask gives plain group
/// normalization.
inline Var df_norm(Var x, const Mask& mask, std::size_t groups = 1, double eps = 1e-5) {
  detail::require_mask_matches("df_norm", x.value(), mask);
  const std::size_t n = x.shape()[0], c = x.shape()[1], hw = mask.size();
  if (groups == 0 || c % groups != 0) throw DimensionError("df_norm: channels not divisible by groups");
  const std::size_t cg = c / groups;
  const std::size_t valid_cells = hw - mask.defective_count();
  const std::size_t total = cg * hw;
  const std::size_t valid = cg * valid_cells;
  if (valid < 2) {
    throw DegenerateInputError("df_norm: " + std::to_string(valid) +
                               " non-defective elements per group, need at least 2");
  }
  const auto& xv = x.value().data;
  Tensor out(x.shape());
  std::vector<double> mu(n * groups), sigma(n * groups);
  const double N = static_cast<double>(total), Nv = static_cast<double>(valid);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t gidx = 0; gidx < groups; ++gidx) {
      const std::size_t base = (b * c + gidx * cg) * hw;
      double zero_filled = 0.0;
      for (std::size_t ch = 0; ch < cg; ++ch)
        for (std::size_t p = 0; p < hw; ++p)
          if (!mask.values[p]) zero_filled += xv[base + ch * hw + p];
      const double m = (N / Nv) * (zero_filled / N);
      double filled_mean = 0.0;
      for (std::size_t ch = 0; ch < cg; ++ch)
        for (std::size_t p = 0; p < hw; ++p) filled_mean += mask.values[p] ? m : xv[base + ch * hw + p];
      filled_mean /= N;
      double ss = 0.0;
      for (std::size_t ch = 0; ch < cg; ++ch)
        for (std::size_t p = 0; p < hw; ++p) {
          const double d = (mask.values[p] ? m : xv[base + ch * hw + p]) - filled_mean;
          ss += d * d;
        }
      const double sample_var = ss / (N - 1.0);
      const double var = ((N - 1.0) / (Nv - 1.0)) * sample_var;
      const double s = std::sqrt(var);
      mu[b * groups + gidx] = m;
      sigma[b * groups + gidx] = s;
      for (std::size_t ch = 0; ch < cg; ++ch)
        for (std::size_t p = 0; p < hw; ++p) {
          const std::size_t idx = base + ch * hw + p;
          out.data[idx] = mask.values[p] ? 0.0 : (xv[idx] - m) / (s + eps);
        }
    }
  std::vector<std::uint8_t> mv = mask.values;
  return x.tape->record(
      "df_norm", std::move(out), {x},
      [x, mv, mu, sigma, n, c, hw, cg, groups, valid, eps](Tape& t, const std::vector<double>& g) {
        if (!t.requires_grad(x)) return;
        const auto& xv = t.value(x).data;
        auto& gx = t.grad_buffer(x);
        const double nv = static_cast<double>(valid);
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t gidx = 0; gidx < groups; ++gidx) {
            const std::size_t base = (b * c + gidx * cg) * hw;
            const double m = mu[b * groups + gidx], s = sigma[b * groups + gidx];
            const double denom = s + eps;
            double sum_g = 0.0, sum_gx = 0.0;
            for (std::size_t ch = 0; ch < cg; ++ch)
              for (std::size_t p = 0; p < hw; ++p) {
                if (mv[p]) continue;
                const std::size_t idx = base + ch * hw + p;
                sum_g += g[idx];
                sum_gx += g[idx] * (xv[idx] - m);
              }
            // d sigma / d x_i = (x_i - mu) / ((N_v - 1) sigma); zero when sigma == 0.
            const double sigma_coeff = s > 0.0 ? sum_gx / (denom * denom * (nv - 1.0) * s) : 0.0;
            for (std::size_t ch = 0; ch < cg; ++ch)
              for (std::size_t p = 0; p < hw; ++p) {
                if (mv[p]) continue;
                const std::size_t idx = base + ch * hw + p;
                gx[idx] += (g[idx] - sum_g / nv) / denom - sigma_coeff * (xv[idx] - m);
              }
          }
      });
}

/// Partial convolution: each output sums only taps that land on in-bounds,
/// non-defective pixels, rescaled by (in-bounds taps / valid taps). Windows
/// without a valid tap output the bias. Padding counts as neither. An
/// all-zero mask reproduces conv2d bit for bit.
inline Var df_conv2d(Var x, const Mask& mask, Var weight, Var bias, std::size_t stride, std::size_t pad) {
  const ConvGeometry g = conv_geometry("df_conv2d", x.shape(), weight.shape(), stride, pad);
  detail::require_mask_matches("df_conv2d", x.value(), mask);
  if (bias.size() != g.o) throw DimensionError("df_conv2d: bias length mismatch");
  const auto& mv = mask.values;

  std::vector<double> rescale(g.oh * g.ow, 0.0);
  for (std::size_t oh = 0; oh < g.oh; ++oh)
    for (std::size_t ow = 0; ow < g.ow; ++ow) {
      std::size_t in_bounds = 0, valid = 0;
      for (std::size_t kh = 0; kh < g.k; ++kh)
        for (std::size_t kw = 0; kw < g.k; ++kw) {
          const std::size_t r = oh * stride + kh, col = ow * stride + kw;
          if (r < pad || col < pad || r - pad >= g.h || col - pad >= g.w) continue;
          ++in_bounds;
          if (!mv[(r - pad) * g.w + (col - pad)]) ++valid;
        }
      rescale[oh * g.ow + ow] =
          valid == 0 ? 0.0 : static_cast<double>(in_bounds) / static_cast<double>(valid);
    }

  Tensor out(Shape{g.n, g.o, g.oh, g.ow});
  const double* X = x.value().data.data();
  const double* Wt = weight.value().data.data();
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t o = 0; o < g.o; ++o) {
      double* plane = out.data.data() + (n * g.o + o) * g.oh * g.ow;
      for (std::size_t c = 0; c < g.c; ++c) {
        const double* in = X + (n * g.c + c) * g.h * g.w;
        for (std::size_t kh = 0; kh < g.k; ++kh) {
          const auto [oh_lo, oh_hi] = detail::valid_range(g.oh, g.h, kh, stride, pad);
          for (std::size_t kw = 0; kw < g.k; ++kw) {
            const double wv = Wt[((o * g.c + c) * g.k + kh) * g.k + kw];
            const auto [ow_lo, ow_hi] = detail::valid_range(g.ow, g.w, kw, stride, pad);
            for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
              const std::size_t row = (oh * stride + kh - pad) * g.w;
              double* orow = plane + oh * g.ow;
              for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) {
                const std::size_t idx = row + ow * stride + kw - pad;
                if (!mv[idx]) orow[ow] += wv * in[idx];
              }
            }
          }
        }
      }
      const double b = bias.value().data[o];
      for (std::size_t i = 0; i < g.oh * g.ow; ++i) {
        if (rescale[i] != 1.0) plane[i] *= rescale[i];
        plane[i] += b;
      }
    }
  std::vector<std::uint8_t> mcopy = mv;
  return x.tape->record(
      "df_conv2d", std::move(out), {x, weight, bias},
      [x, weight, bias, g, mcopy, rescale](Tape& t, const std::vector<double>& gout) {
        const double* X = t.value(x).data.data();
        const double* Wt = t.value(weight).data.data();
        double* GX = t.requires_grad(x) ? t.grad_buffer(x).data() : nullptr;
        double* GW = t.requires_grad(weight) ? t.grad_buffer(weight).data() : nullptr;
        std::vector<double> scaled(g.oh * g.ow);
        for (std::size_t n = 0; n < g.n; ++n)
          for (std::size_t o = 0; o < g.o; ++o) {
            const double* gplane = gout.data() + (n * g.o + o) * g.oh * g.ow;
            if (t.requires_grad(bias)) {
              double s = 0.0;
              for (std::size_t i = 0; i < g.oh * g.ow; ++i) s += gplane[i];
              t.grad_buffer(bias)[o] += s;
            }
            for (std::size_t i = 0; i < g.oh * g.ow; ++i) scaled[i] = gplane[i] * rescale[i];
            for (std::size_t c = 0; c < g.c; ++c) {
              const std::size_t base = (n * g.c + c) * g.h * g.w;
              for (std::size_t kh = 0; kh < g.k; ++kh) {
                const auto [oh_lo, oh_hi] = detail::valid_range(g.oh, g.h, kh, g.stride, g.pad);
                for (std::size_t kw = 0; kw < g.k; ++kw) {
                  const std::size_t widx = ((o * g.c + c) * g.k + kh) * g.k + kw;
                  const auto [ow_lo, ow_hi] = detail::valid_range(g.ow, g.w, kw, g.stride, g.pad);
                  double gw = 0.0;
                  for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
                    const std::size_t row = (oh * g.stride + kh - g.pad) * g.w;
                    for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) {
                      const std::size_t pix = row + ow * g.stride + kw - g.pad;
                      if (mcopy[pix]) continue;
                      const double go = scaled[oh * g.ow + ow];
                      if (GX) GX[base + pix] += Wt[widx] * go;
                      gw += go * X[base + pix];
                    }
                  }
                  if (GW) GW[widx] += gw;
                }
              }
            }
          }
      });
}

/// Projection-free self-attention over x[L, D] in which defective positions
/// are never attended to. `mask` is flattened in raster order.
inline Var df_attention(Var x, const Mask& mask, std::size_t heads = 1) {
  if (x.value().rank() != 2 || x.shape()[0] != mask.size()) {
    throw DimensionError("df_attention: mask length " + std::to_string(mask.size()) +
                         " does not match sequence shape " + to_string(x.shape()));
  }
  return masked_attention(x, x, x, mask.values, heads, false);
}

/// Exact per-cell selection: out = keep where mask == 0, replace where mask == 1.
/// Mask broadcasts over channels of an NCHW tensor.
inline Var select_by_mask(Var keep, Var replace, const Mask& mask) {
  detail::require_same_shape("select_by_mask", keep.value(), replace.value());
  detail::require_mask_matches("select_by_mask", keep.value(), mask);
  const std::size_t planes = keep.shape()[0] * keep.shape()[1], hw = mask.size();
  Tensor out(keep.shape());
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < hw; ++i) {
      const std::size_t idx = p * hw + i;
      out.data[idx] = mask.values[i] ? replace.value().data[idx] : keep.value().data[idx];
    }
  std::vector<std::uint8_t> mv = mask.values;
  return keep.tape->record("select_by_mask", std::move(out), {keep, replace},
                           [keep, replace, mv, planes, hw](Tape& t, const std::vector<double>& g) {
                             for (std::size_t p = 0; p < planes; ++p)
                               for (std::size_t i = 0; i < hw; ++i) {
                                 const std::size_t idx = p * hw + i;
                                 detail::accumulate(t, mv[i] ? replace : keep, idx, g[idx]);
                               }
                           });
}

inline constexpr double kExactCopy = std::numeric_limits<double>::infinity();

/// Symmetrical-connection mixing of a decoder state with the encoder state of
/// the same resolution:
///   non-defective: (decoded + tau * encoded) / (tau + 1)
///   defective:     decoded
/// tau == kExactCopy copies `encoded` verbatim on non-defective cells.
inline Var symmetric_mix(Var decoded, Var encoded, const Mask& mask, double tau) {
  detail::require_same_shape("symmetric_mix", decoded.value(), encoded.value());
  detail::require_mask_matches("symmetric_mix", decoded.value(), mask);
  if (!(tau >= 0.0)) throw ParameterError("symmetric_mix: tau must be non-negative");
  const bool copy = std::isinf(tau);
  const double wd = copy ? 0.0 : 1.0 / (tau + 1.0);
  const double we = copy ? 1.0 : tau / (tau + 1.0);
  const std::size_t planes = decoded.shape()[0] * decoded.shape()[1], hw = mask.size();
  Tensor out(decoded.shape());
  const auto& dv = decoded.value().data;
  const auto& ev = encoded.value().data;
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < hw; ++i) {
      const std::size_t idx = p * hw + i;
      if (mask.values[i]) {
        out.data[idx] = dv[idx];
      } else if (copy) {
        out.data[idx] = ev[idx];
      } else {
        out.data[idx] = (dv[idx] + tau * ev[idx]) / (tau + 1.0);
      }
    }
  std::vector<std::uint8_t> mv = mask.values;
  return decoded.tape->record(
      "symmetric_mix", std::move(out), {decoded, encoded},
      [decoded, encoded, mv, planes, hw, wd, we](Tape& t, const std::vector<double>& g) {
        for (std::size_t p = 0; p < planes; ++p)
          for (std::size_t i = 0; i < hw; ++i) {
            const std::size_t idx = p * hw + i;
            if (mv[i]) {
              detail::accumulate(t, decoded, idx, g[idx]);
            } else {
              if (wd != 0.0) detail::accumulate(t, decoded, idx, g[idx] * wd);
              detail::accumulate(t, encoded, idx, g[idx] * we);
            }
          }
      });
}

}  // namespace dfi
