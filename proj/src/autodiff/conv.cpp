#include <algorithm>
#include <cstring>

#include "mmc/autodiff.hpp"
#include "mmc/errors.hpp"

namespace mmc {

namespace {

struct ConvGeometry {
  int n, cin, h, w;
  int cout, kh, kw;
  int pad;
  int ho, wo;
};

ConvGeometry geometry(const Shape& input, const Shape& kernel, int padding) {
  if (input.size() != 4) throw ShapeError("conv2d: input must be [N,Cin,H,W], got " + shape_str(input));
  if (kernel.size() != 4) throw ShapeError("conv2d: kernel must be [Cout,Cin,kh,kw], got " + shape_str(kernel));
  if (kernel[2] % 2 == 0 || kernel[3] % 2 == 0) {
    throw ShapeError("conv2d: kernel dims must be odd, got " + shape_str(kernel));
  }
  if (padding < 0) throw ShapeError("conv2d: negative padding");
  if (input[1] != kernel[1]) {
    throw ShapeError("conv2d: input channels " + std::to_string(input[1]) + " vs kernel " +
                     std::to_string(kernel[1]));
  }
  ConvGeometry g{input[0], input[1], input[2], input[3], kernel[0], kernel[2], kernel[3], padding, 0, 0};
  g.ho = g.h + 2 * padding - g.kh + 1;
  g.wo = g.w + 2 * padding - g.kw + 1;
  if (g.ho < 1 || g.wo < 1) throw ShapeError("conv2d: output would be empty");
  return g;
}

// Copies [planes, h, w] into planes with a zero border of `border` on each side.
Buffer pad_planes(const double* src, int planes, int h, int w, int border) {
  const int hp = h + 2 * border, wp = w + 2 * border;
  Buffer out(static_cast<std::size_t>(planes) * hp * wp);
  for (int p = 0; p < planes; ++p) {
    double* dst = out.data() + static_cast<std::size_t>(p) * hp * wp;
    std::fill_n(dst, static_cast<std::size_t>(border) * wp, 0.0);
    for (int i = 0; i < h; ++i) {
      double* row = dst + static_cast<std::size_t>(i + border) * wp;
      std::fill_n(row, border, 0.0);
      std::copy_n(src + (static_cast<std::size_t>(p) * h + i) * w, w, row + border);
      std::fill_n(row + border + w, border, 0.0);
    }
    std::fill_n(dst + static_cast<std::size_t>(h + border) * wp, static_cast<std::size_t>(border) * wp, 0.0);
  }
  return out;
}

using Vec8 = double __attribute__((vector_size(64)));

inline Vec8 load8(const double* p) {
  Vec8 v;
  std::memcpy(&v, p, sizeof v);
  return v;
}

inline void store8(double* p, Vec8 v) { std::memcpy(p, &v, sizeof v); }

// Forward conv over a pre-padded input, summing bias first and then (c, a, b)
// in order for every output element. Taps in the zero border add +-0, which
// leaves each partial sum unchanged, so results equal the
// skip-out-of-range formulation exactly.
//
// OB output channels times JC vectors of 8 columns are accumulated in
// registers; the kernel size is a template parameter so the tap loops unroll.
template <int KH, int KW, int OB, int JC>
void forward_block(const ConvGeometry& g, const double* padded, const double* k, const double* b, double* y, int n,
                   int i, int o0, int j0) {
  constexpr int taps = KH * KW;
  const int wp = g.w + 2 * g.pad;
  const std::size_t in_plane = static_cast<std::size_t>(g.h + 2 * g.pad) * wp;
  Vec8 acc[OB][JC];
  for (int ob = 0; ob < OB; ++ob) {
    const double bias = b ? b[o0 + ob] : 0.0;
    for (int jc = 0; jc < JC; ++jc) acc[ob][jc] = Vec8{} + bias;
  }
  for (int c = 0; c < g.cin; ++c) {
    const double* xp = padded + (static_cast<std::size_t>(n) * g.cin + c) * in_plane;
    const double* kp[OB];
    for (int ob = 0; ob < OB; ++ob) kp[ob] = k + (static_cast<std::size_t>(o0 + ob) * g.cin + c) * taps;
    for (int a = 0; a < KH; ++a) {
      const double* row = xp + static_cast<std::size_t>(i + a) * wp + j0;
      for (int bb = 0; bb < KW; ++bb) {
        Vec8 xv[JC];
        for (int jc = 0; jc < JC; ++jc) xv[jc] = load8(row + bb + 8 * jc);
        for (int ob = 0; ob < OB; ++ob) {
          const double kv = kp[ob][a * KW + bb];
          for (int jc = 0; jc < JC; ++jc) acc[ob][jc] += kv * xv[jc];
        }
      }
    }
  }
  for (int ob = 0; ob < OB; ++ob) {
    double* yr = y + ((static_cast<std::size_t>(n) * g.cout + o0 + ob) * g.ho + i) * g.wo + j0;
    for (int jc = 0; jc < JC; ++jc) store8(yr + 8 * jc, acc[ob][jc]);
  }
}

// Same sum for a single output element.
void forward_point(const ConvGeometry& g, const double* padded, const double* k, const double* b, double* y, int n,
                   int i, int o, int j) {
  const int wp = g.w + 2 * g.pad;
  const std::size_t in_plane = static_cast<std::size_t>(g.h + 2 * g.pad) * wp;
  double acc = b ? b[o] : 0.0;
  for (int c = 0; c < g.cin; ++c) {
    const double* xp = padded + (static_cast<std::size_t>(n) * g.cin + c) * in_plane;
    const double* kp = k + (static_cast<std::size_t>(o) * g.cin + c) * g.kh * g.kw;
    for (int a = 0; a < g.kh; ++a) {
      for (int bb = 0; bb < g.kw; ++bb) acc += kp[a * g.kw + bb] * xp[static_cast<std::size_t>(i + a) * wp + j + bb];
    }
  }
  y[((static_cast<std::size_t>(n) * g.cout + o) * g.ho + i) * g.wo + j] = acc;
}

// Returns whether every output is finite; each image is scanned right after
// it is written, while it is still cached.
template <int KH, int KW>
bool forward_rows(const ConvGeometry& g, const double* padded, const double* k, const double* b, double* y) {
  const std::size_t image = static_cast<std::size_t>(g.cout) * g.ho * g.wo;
  bool finite = true;
  for (int n = 0; n < g.n; ++n) {
    for (int i = 0; i < g.ho; ++i) {
      int o = 0;
      for (; o + 4 <= g.cout; o += 4) {
        int j = 0;
        for (; j + 16 <= g.wo; j += 16) forward_block<KH, KW, 4, 2>(g, padded, k, b, y, n, i, o, j);
        for (; j + 8 <= g.wo; j += 8) forward_block<KH, KW, 4, 1>(g, padded, k, b, y, n, i, o, j);
        for (; j < g.wo; ++j)
          for (int ob = 0; ob < 4; ++ob) forward_point(g, padded, k, b, y, n, i, o + ob, j);
      }
      for (; o < g.cout; ++o) {
        int j = 0;
        for (; j + 32 <= g.wo; j += 32) forward_block<KH, KW, 1, 4>(g, padded, k, b, y, n, i, o, j);
        for (; j + 8 <= g.wo; j += 8) forward_block<KH, KW, 1, 1>(g, padded, k, b, y, n, i, o, j);
        for (; j < g.wo; ++j) forward_point(g, padded, k, b, y, n, i, o, j);
      }
    }
    finite = finite && all_finite({y + n * image, image});
  }
  return finite;
}

bool forward_padded(const ConvGeometry& g, const double* padded, const double* k, const double* b, double* y) {
  if (g.kh == 1 && g.kw == 1) return forward_rows<1, 1>(g, padded, k, b, y);
  if (g.kh == 3 && g.kw == 3) return forward_rows<3, 3>(g, padded, k, b, y);
  if (g.kh == 5 && g.kw == 5) return forward_rows<5, 5>(g, padded, k, b, y);
  for (int n = 0; n < g.n; ++n)
    for (int o = 0; o < g.cout; ++o)
      for (int i = 0; i < g.ho; ++i)
        for (int j = 0; j < g.wo; ++j) forward_point(g, padded, k, b, y, n, i, o, j);
  return all_finite({y, static_cast<std::size_t>(g.n) * g.cout * g.ho * g.wo});
}

bool forward_kernel(const ConvGeometry& g, const double* x, const double* k, const double* b, double* y) {
  if (g.pad == 0) return forward_padded(g, x, k, b, y);
  const Buffer padded = pad_planes(x, g.n * g.cin, g.h, g.w, g.pad);
  return forward_padded(g, padded.data(), k, b, y);
}

// The input gradient is a forward conv of the gradient, padded by k - 1 - pad,
// with the kernel flipped in both spatial axes and its channel axes swapped.
bool input_grad_kernel(const ConvGeometry& g, const double* gy, const double* k, double* dx) {
  const int border = g.kh - 1 - g.pad;
  if (g.kh == g.kw && border >= 0) {
    ConvGeometry t{g.n, g.cout, g.ho, g.wo, g.cin, g.kh, g.kw, border, g.h, g.w};
    const Buffer padded = border > 0 ? pad_planes(gy, g.n * g.cout, g.ho, g.wo, border) : Buffer{};
    std::vector<double> flipped(static_cast<std::size_t>(g.cout) * g.cin * g.kh * g.kw);
    for (int o = 0; o < g.cout; ++o)
      for (int c = 0; c < g.cin; ++c)
        for (int a = 0; a < g.kh; ++a)
          for (int bb = 0; bb < g.kw; ++bb) {
            flipped[((static_cast<std::size_t>(c) * g.cout + o) * g.kh + (g.kh - 1 - a)) * g.kw + (g.kw - 1 - bb)] =
                k[((static_cast<std::size_t>(o) * g.cin + c) * g.kh + a) * g.kw + bb];
          }
    return forward_padded(t, border > 0 ? padded.data() : gy, flipped.data(), nullptr, dx);
  }
  const std::size_t in_plane = static_cast<std::size_t>(g.h) * g.w;
  std::fill(dx, dx + static_cast<std::size_t>(g.n) * g.cin * in_plane, 0.0);
  for (int n = 0; n < g.n; ++n)
    for (int o = 0; o < g.cout; ++o)
      for (int i = 0; i < g.ho; ++i)
        for (int j = 0; j < g.wo; ++j) {
          const double gv = gy[((static_cast<std::size_t>(n) * g.cout + o) * g.ho + i) * g.wo + j];
          for (int c = 0; c < g.cin; ++c)
            for (int a = 0; a < g.kh; ++a)
              for (int bb = 0; bb < g.kw; ++bb) {
                const int yy = i + a - g.pad, xx = j + bb - g.pad;
                if (yy < 0 || yy >= g.h || xx < 0 || xx >= g.w) continue;
                dx[(static_cast<std::size_t>(n) * g.cin + c) * in_plane + static_cast<std::size_t>(yy) * g.w + xx] +=
                    gv * k[((static_cast<std::size_t>(o) * g.cin + c) * g.kh + a) * g.kw + bb];
              }
        }
  return all_finite({dx, static_cast<std::size_t>(g.n) * g.cin * in_plane});
}

// One (o, c) pair: dK[a][b] = sum over n, i, j of G[n,o,i,j] * Xpad[n,c,i+a,j+b],
// with the tap count fixed at compile time so the accumulators stay in registers.
template <int KH, int KW>
void kernel_grad_pair(const ConvGeometry& g, const double* padded, const double* gy, int o, int c, double* dk) {
  constexpr int taps = KH * KW;
  const int wp = g.w + 2 * g.pad;
  const std::size_t in_plane = static_cast<std::size_t>(g.h + 2 * g.pad) * wp;
  const std::size_t out_plane = static_cast<std::size_t>(g.ho) * g.wo;
  const int wo = g.wo;
  const int wv = wo - wo % 8;
  Vec8 acc[taps];
  double tail[taps];
  for (int t = 0; t < taps; ++t) {
    acc[t] = Vec8{};
    tail[t] = 0.0;
  }
  for (int n = 0; n < g.n; ++n) {
    const double* gp = gy + (static_cast<std::size_t>(n) * g.cout + o) * out_plane;
    const double* xp = padded + (static_cast<std::size_t>(n) * g.cin + c) * in_plane;
    for (int i = 0; i < g.ho; ++i) {
      const double* gr = gp + static_cast<std::size_t>(i) * wo;
      for (int j = 0; j < wv; j += 8) {
        const Vec8 gv = load8(gr + j);
        for (int a = 0; a < KH; ++a) {
          const double* row = xp + static_cast<std::size_t>(i + a) * wp + j;
          for (int bb = 0; bb < KW; ++bb) acc[a * KW + bb] += gv * load8(row + bb);
        }
      }
      for (int j = wv; j < wo; ++j) {
        for (int a = 0; a < KH; ++a) {
          const double* row = xp + static_cast<std::size_t>(i + a) * wp;
          for (int bb = 0; bb < KW; ++bb) tail[a * KW + bb] += gr[j] * row[j + bb];
        }
      }
    }
  }
  for (int t = 0; t < taps; ++t) {
    double total = tail[t];
    for (int l = 0; l < 8; ++l) total += acc[t][l];
    dk[(static_cast<std::size_t>(o) * g.cin + c) * taps + t] = total;
  }
}

void kernel_grad_generic(const ConvGeometry& g, const double* padded, const double* gy, int o, int c, double* dk) {
  const int wp = g.w + 2 * g.pad;
  const std::size_t in_plane = static_cast<std::size_t>(g.h + 2 * g.pad) * wp;
  const std::size_t out_plane = static_cast<std::size_t>(g.ho) * g.wo;
  for (int a = 0; a < g.kh; ++a) {
    for (int bb = 0; bb < g.kw; ++bb) {
      double total = 0.0;
      for (int n = 0; n < g.n; ++n) {
        const double* gp = gy + (static_cast<std::size_t>(n) * g.cout + o) * out_plane;
        const double* xp = padded + (static_cast<std::size_t>(n) * g.cin + c) * in_plane;
        for (int i = 0; i < g.ho; ++i) {
          const double* gr = gp + static_cast<std::size_t>(i) * g.wo;
          const double* row = xp + static_cast<std::size_t>(i + a) * wp + bb;
          for (int j = 0; j < g.wo; ++j) total += gr[j] * row[j];
        }
      }
      dk[((static_cast<std::size_t>(o) * g.cin + c) * g.kh + a) * g.kw + bb] = total;
    }
  }
}

void kernel_grad_kernel(const ConvGeometry& g, const double* x, const double* gy, double* dk) {
  const Buffer buffer = g.pad > 0 ? pad_planes(x, g.n * g.cin, g.h, g.w, g.pad) : Buffer{};
  const double* padded = g.pad > 0 ? buffer.data() : x;
  auto pair = &kernel_grad_generic;
  if (g.kh == 1 && g.kw == 1) pair = &kernel_grad_pair<1, 1>;
  if (g.kh == 3 && g.kw == 3) pair = &kernel_grad_pair<3, 3>;
  if (g.kh == 5 && g.kw == 5) pair = &kernel_grad_pair<5, 5>;
  for (int o = 0; o < g.cout; ++o) {
    for (int c = 0; c < g.cin; ++c) pair(g, padded, gy, o, c, dk);
  }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, int padding) {
  const ConvGeometry g = geometry(input.shape(), kernel.shape(), padding);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != g.cout)) {
    throw ShapeError("conv2d: bias must be [" + std::to_string(g.cout) + "], got " + shape_str(bias.shape()));
  }
  Buffer out(static_cast<std::size_t>(g.n) * g.cout * g.ho * g.wo);
  if (!forward_kernel(g, input.data().data(), kernel.data().data(), bias.defined() ? bias.data().data() : nullptr,
                      out.data())) {
    throw NumericalError("non-finite output from conv2d");
  }
  std::vector<Tensor> inputs{input, kernel};
  if (bias.defined()) inputs.push_back(bias);
  return make_result({g.n, g.cout, g.ho, g.wo}, std::move(out), "conv2d", std::move(inputs),
                     [input, kernel, padding](const Tensor& gy, const std::vector<bool>& needs) {
                       std::vector<Tensor> r(needs.size());
                       if (needs[0]) r[0] = detail::conv2d_input_grad(gy, kernel, padding, input.shape());
                       if (needs[1]) r[1] = detail::conv2d_kernel_grad(input, gy, padding, kernel.shape());
                       if (needs.size() > 2 && needs[2]) r[2] = detail::channel_sum(gy);
                       return r;
                     },
                     true);
}

namespace detail {

// The three conv routines are partial derivatives of one trilinear form
// T(x, k, g) = <g, conv2d(x, k)>, so each one's backward is built from the
// other two.
Tensor conv2d_input_grad(const Tensor& grad_out, const Tensor& kernel, int padding, const Shape& input_shape) {
  const ConvGeometry g = geometry(input_shape, kernel.shape(), padding);
  if (grad_out.shape() != Shape{g.n, g.cout, g.ho, g.wo}) {
    throw ShapeError("conv2d_input_grad: grad shape " + shape_str(grad_out.shape()));
  }
  Buffer out(numel(input_shape));
  if (!input_grad_kernel(g, grad_out.data().data(), kernel.data().data(), out.data())) {
    throw NumericalError("non-finite output from conv2d_input_grad");
  }
  return make_result(input_shape, std::move(out), "conv2d_input_grad", {grad_out, kernel},
                     [grad_out, kernel, padding](const Tensor& h, const std::vector<bool>& needs) {
                       std::vector<Tensor> r(2);
                       if (needs[0]) r[0] = conv2d(h, kernel, Tensor{}, padding);
                       if (needs[1]) r[1] = conv2d_kernel_grad(h, grad_out, padding, kernel.shape());
                       return r;
                     },
                     true);
}

Tensor conv2d_kernel_grad(const Tensor& input, const Tensor& grad_out, int padding, const Shape& kernel_shape) {
  const ConvGeometry g = geometry(input.shape(), kernel_shape, padding);
  if (grad_out.shape() != Shape{g.n, g.cout, g.ho, g.wo}) {
    throw ShapeError("conv2d_kernel_grad: grad shape " + shape_str(grad_out.shape()));
  }
  Buffer out(numel(kernel_shape));
  kernel_grad_kernel(g, input.data().data(), grad_out.data().data(), out.data());
  return make_result(kernel_shape, std::move(out), "conv2d_kernel_grad", {input, grad_out},
                     [input, grad_out, padding](const Tensor& h, const std::vector<bool>& needs) {
                       std::vector<Tensor> r(2);
                       if (needs[0]) r[0] = conv2d_input_grad(grad_out, h, padding, input.shape());
                       if (needs[1]) r[1] = conv2d(input, h, Tensor{}, padding);
                       return r;
                     });
}

}  // namespace detail

}  // namespace mmc
