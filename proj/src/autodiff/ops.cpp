#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>

#include "mmc/autodiff.hpp"
#include "mmc/errors.hpp"

namespace mmc {

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

void require_rank4(const Tensor& x, const char* op) {
  if (x.rank() != 4) throw ShapeError(std::string(op) + ": expected [N,C,H,W], got " + shape_str(x.shape()));
}

constexpr std::uint64_t kExponent = 0x7ff0000000000000ULL;

inline std::uint64_t non_finite(double v) {
  return static_cast<std::uint64_t>((std::bit_cast<std::uint64_t>(v) & kExponent) == kExponent);
}

Tensor checked_result(Shape shape, Buffer&& data, std::string_view op, std::vector<Tensor> inputs,
                      BackwardFn backward) {
  return make_result(std::move(shape), std::move(data), op, std::move(inputs), std::move(backward), true);
}

// Elementwise kernels check finiteness while the value is still in a
// register; their results go to make_result as already checked.
template <typename F>
Buffer map_values(const Tensor& x, F f, const char* op) {
  auto in = x.data();
  Buffer out(in.size());
  std::uint64_t bad = 0;
  for (std::size_t i = 0; i < in.size(); ++i) {
    out[i] = f(in[i]);
    bad |= non_finite(out[i]);
  }
  if (bad) throw NumericalError(std::string("non-finite output from ") + op);
  return out;
}

template <typename F>
Buffer zip_values(const Tensor& a, const Tensor& b, F f, const char* op) {
  auto x = a.data();
  auto y = b.data();
  Buffer out(x.size());
  std::uint64_t bad = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = f(x[i], y[i]);
    bad |= non_finite(out[i]);
  }
  if (bad) throw NumericalError(std::string("non-finite output from ") + op);
  return out;
}

double sigmoid_value(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

Tensor pool_scatter(const Tensor& g, std::shared_ptr<const std::vector<std::size_t>> idx,
                    const Shape& in_shape);

// Reads x at the recorded argmax positions; adjoint of pool_scatter.
Tensor pool_gather(const Tensor& x, std::shared_ptr<const std::vector<std::size_t>> idx,
                   const Shape& out_shape) {
  auto in = x.data();
  Buffer out(idx->size());
  for (std::size_t i = 0; i < idx->size(); ++i) out[i] = in[(*idx)[i]];
  const Shape in_shape = x.shape();
  return make_result(out_shape, std::move(out), "pool_gather", {x},
                     [idx, in_shape](const Tensor& g, const std::vector<bool>&) {
                       return std::vector<Tensor>{pool_scatter(g, idx, in_shape)};
                     });
}

Tensor pool_scatter(const Tensor& g, std::shared_ptr<const std::vector<std::size_t>> idx,
                    const Shape& in_shape) {
  auto src = g.data();
  Buffer out(numel(in_shape), 0.0);
  for (std::size_t i = 0; i < idx->size(); ++i) out[(*idx)[i]] += src[i];
  const Shape out_shape = g.shape();
  return make_result(in_shape, std::move(out), "pool_scatter", {g},
                     [idx, out_shape](const Tensor& h, const std::vector<bool>&) {
                       return std::vector<Tensor>{pool_gather(h, idx, out_shape)};
                     });
}

Tensor bce_terms(const Tensor& z, const Tensor& t) {
  auto out = zip_values(z, t, [](double zv, double tv) {
    return std::max(zv, 0.0) - tv * zv + std::log1p(std::exp(-std::abs(zv)));
  }, "bce_terms");
  return checked_result(z.shape(), std::move(out), "bce_terms", {z, t},
                     [z, t](const Tensor& g, const std::vector<bool>& needs) {
                       std::vector<Tensor> r(2);
                       if (needs[0]) r[0] = mul(g, sub(sigmoid(z), t));
                       if (needs[1]) r[1] = scale(mul(g, z), -1.0);
                       return r;
                     });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  return checked_result(a.shape(), zip_values(a, b, std::plus<>{}, "add"), "add", {a, b},
                     [](const Tensor& g, const std::vector<bool>&) { return std::vector<Tensor>{g, g}; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  return checked_result(a.shape(), zip_values(a, b, std::minus<>{}, "sub"), "sub", {a, b},
                     [](const Tensor& g, const std::vector<bool>& needs) {
                       std::vector<Tensor> r(2);
                       if (needs[0]) r[0] = g;
                       if (needs[1]) r[1] = scale(g, -1.0);
                       return r;
                     });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  return checked_result(a.shape(), zip_values(a, b, std::multiplies<>{}, "mul"), "mul", {a, b},
                     [a, b](const Tensor& g, const std::vector<bool>& needs) {
                       std::vector<Tensor> r(2);
                       if (needs[0]) r[0] = mul(g, b);
                       if (needs[1]) r[1] = mul(g, a);
                       return r;
                     });
}

Tensor scale(const Tensor& x, double factor) {
  return checked_result(x.shape(), map_values(x, [factor](double v) { return v * factor; }, "scale"), "scale", {x},
                     [factor](const Tensor& g, const std::vector<bool>&) {
                       return std::vector<Tensor>{scale(g, factor)};
                     });
}

Tensor add_scalar(const Tensor& x, double offset) {
  return checked_result(x.shape(), map_values(x, [offset](double v) { return v + offset; }, "add_scalar"), "add_scalar",
                     {x}, [](const Tensor& g, const std::vector<bool>&) { return std::vector<Tensor>{g}; });
}

Tensor relu(const Tensor& x) {
  return checked_result(x.shape(), map_values(x, [](double v) { return v > 0.0 ? v : 0.0; }, "relu"), "relu", {x},
                     [x](const Tensor& g, const std::vector<bool>&) {
                       return std::vector<Tensor>{detail::relu_mask(g, x)};
                     });
}

Tensor sigmoid(const Tensor& x) {
  return checked_result(x.shape(), map_values(x, sigmoid_value, "sigmoid"), "sigmoid", {x},
                     [x](const Tensor& g, const std::vector<bool>&) {
                       // Recomputed from the input so the node never holds its own output.
                       const Tensor s = sigmoid(x);
                       const Tensor ds = mul(s, add_scalar(scale(s, -1.0), 1.0));
                       return std::vector<Tensor>{mul(g, ds)};
                     });
}

Tensor activation(const Tensor& x, Activation kind) {
  return kind == Activation::relu ? relu(x) : sigmoid(x);
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  const Shape shape = x.shape();
  return make_result({}, {acc}, "sum", {x}, [shape](const Tensor& g, const std::vector<bool>&) {
    return std::vector<Tensor>{expand_scalar(g, shape)};
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

Tensor expand_scalar(const Tensor& s, const Shape& shape) {
  if (s.size() != 1) throw ShapeError("expand_scalar: source must have one element");
  return make_result(shape, Buffer(numel(shape), s.data()[0]), "expand_scalar", {s},
                     [](const Tensor& g, const std::vector<bool>&) { return std::vector<Tensor>{sum(g)}; });
}

Tensor maxpool2(const Tensor& x) {
  require_rank4(x, "maxpool2");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % 2 != 0 || w % 2 != 0) {
    throw ShapeError("maxpool2: spatial dims must be even, got " + shape_str(x.shape()));
  }
  const int ho = h / 2, wo = w / 2;
  auto in = x.data();
  auto idx = std::make_shared<std::vector<std::size_t>>(static_cast<std::size_t>(n) * c * ho * wo);
  Buffer out(idx->size());
  std::size_t o = 0;
  for (int p = 0; p < n * c; ++p) {
    const std::size_t base = static_cast<std::size_t>(p) * h * w;
    for (int i = 0; i < ho; ++i) {
      for (int j = 0; j < wo; ++j, ++o) {
        // Row-major window order; strict > keeps the first maximum on ties.
        std::size_t best = base + static_cast<std::size_t>(2 * i) * w + 2 * j;
        const std::size_t cand[3] = {best + 1, best + w, best + w + 1};
        for (std::size_t q : cand) {
          if (in[q] > in[best]) best = q;
        }
        (*idx)[o] = best;
        out[o] = in[best];
      }
    }
  }
  const Shape in_shape = x.shape();
  std::shared_ptr<const std::vector<std::size_t>> shared = idx;
  return make_result({n, c, ho, wo}, std::move(out), "maxpool2", {x},
                     [shared, in_shape](const Tensor& g, const std::vector<bool>&) {
                       return std::vector<Tensor>{pool_scatter(g, shared, in_shape)};
                     });
}

Tensor upsample_nearest2(const Tensor& x) {
  require_rank4(x, "upsample_nearest2");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  auto in = x.data();
  Buffer out(static_cast<std::size_t>(n) * c * h * w * 4);
  const int w2 = 2 * w;
  for (int p = 0; p < n * c; ++p) {
    const double* src = in.data() + static_cast<std::size_t>(p) * h * w;
    double* dst = out.data() + static_cast<std::size_t>(p) * h * w * 4;
    for (int i = 0; i < h; ++i) {
      double* row = dst + static_cast<std::size_t>(2 * i) * w2;
      for (int j = 0; j < w; ++j) row[2 * j] = row[2 * j + 1] = src[i * w + j];
      std::copy(row, row + w2, row + w2);
    }
  }
  return make_result({n, c, 2 * h, 2 * w}, std::move(out), "upsample_nearest2", {x},
                     [](const Tensor& g, const std::vector<bool>&) {
                       return std::vector<Tensor>{detail::sumpool2(g)};
                     });
}

Tensor spatial_resample(const Tensor& x, Resample kind) {
  return kind == Resample::maxpool2 ? maxpool2(x) : upsample_nearest2(x);
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  require_rank4(a, "concat_channels");
  require_rank4(b, "concat_channels");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
    throw ShapeError("concat_channels: batch/spatial mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  const int n = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  const std::size_t plane = static_cast<std::size_t>(a.dim(2)) * a.dim(3);
  Buffer out(static_cast<std::size_t>(n) * (ca + cb) * plane);
  auto x = a.data();
  auto y = b.data();
  for (int s = 0; s < n; ++s) {
    auto dst = out.begin() + static_cast<std::ptrdiff_t>(s * (ca + cb) * plane);
    dst = std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(s * ca * plane), ca * plane, dst);
    std::copy_n(y.begin() + static_cast<std::ptrdiff_t>(s * cb * plane), cb * plane, dst);
  }
  return make_result({n, ca + cb, a.dim(2), a.dim(3)}, std::move(out), "concat_channels", {a, b},
                     [ca, cb](const Tensor& g, const std::vector<bool>& needs) {
                       std::vector<Tensor> r(2);
                       if (needs[0]) r[0] = slice_channels(g, 0, ca);
                       if (needs[1]) r[1] = slice_channels(g, ca, cb);
                       return r;
                     });
}

Tensor slice_channels(const Tensor& x, int start, int count) {
  require_rank4(x, "slice_channels");
  const int n = x.dim(0), c = x.dim(1);
  if (start < 0 || count <= 0 || start + count > c) throw ShapeError("slice_channels: range out of bounds");
  const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  Buffer out(static_cast<std::size_t>(n) * count * plane);
  auto in = x.data();
  for (int s = 0; s < n; ++s) {
    std::copy_n(in.begin() + static_cast<std::ptrdiff_t>((s * c + start) * plane), count * plane,
                out.begin() + static_cast<std::ptrdiff_t>(s * count * plane));
  }
  return make_result({n, count, x.dim(2), x.dim(3)}, std::move(out), "slice_channels", {x},
                     [start, c](const Tensor& g, const std::vector<bool>&) {
                       return std::vector<Tensor>{detail::embed_channels(g, start, c)};
                     });
}

Tensor bce_with_logits(const Tensor& logits, const Tensor& targets) {
  require_same_shape(logits, targets, "bce_with_logits");
  for (double t : targets.data()) {
    if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("bce_with_logits: target outside [0,1]");
  }
  return mean(bce_terms(logits, targets));
}

namespace detail {

Tensor channel_sum(const Tensor& x) {
  require_rank4(x, "channel_sum");
  const int n = x.dim(0), c = x.dim(1);
  const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  auto in = x.data();
  Buffer out(c, 0.0);
  for (int s = 0; s < n; ++s) {
    for (int ch = 0; ch < c; ++ch) {
      const double* p = in.data() + (static_cast<std::size_t>(s) * c + ch) * plane;
      double acc = 0.0;
      for (std::size_t i = 0; i < plane; ++i) acc += p[i];
      out[ch] += acc;
    }
  }
  const Shape shape = x.shape();
  return make_result({c}, std::move(out), "channel_sum", {x}, [shape](const Tensor& g, const std::vector<bool>&) {
    return std::vector<Tensor>{expand_channels(g, shape)};
  });
}

Tensor expand_channels(const Tensor& v, const Shape& shape) {
  if (shape.size() != 4 || v.rank() != 1 || v.dim(0) != shape[1]) {
    throw ShapeError("expand_channels: vector " + shape_str(v.shape()) + " vs " + shape_str(shape));
  }
  const std::size_t plane = static_cast<std::size_t>(shape[2]) * shape[3];
  Buffer out(numel(shape));
  auto src = v.data();
  for (int s = 0; s < shape[0]; ++s) {
    for (int ch = 0; ch < shape[1]; ++ch) {
      std::fill_n(out.begin() + static_cast<std::ptrdiff_t>((s * shape[1] + ch) * plane), plane, src[ch]);
    }
  }
  return make_result(shape, std::move(out), "expand_channels", {v},
                     [](const Tensor& g, const std::vector<bool>&) { return std::vector<Tensor>{channel_sum(g)}; });
}

Tensor sumpool2(const Tensor& x) {
  require_rank4(x, "sumpool2");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % 2 != 0 || w % 2 != 0) throw ShapeError("sumpool2: spatial dims must be even");
  const int ho = h / 2, wo = w / 2;
  auto in = x.data();
  Buffer out(static_cast<std::size_t>(n) * c * ho * wo);
  for (int p = 0; p < n * c; ++p) {
    const double* src = in.data() + static_cast<std::size_t>(p) * h * w;
    double* dst = out.data() + static_cast<std::size_t>(p) * ho * wo;
    for (int i = 0; i < ho; ++i) {
      for (int j = 0; j < wo; ++j) {
        const double* q = src + static_cast<std::size_t>(2 * i) * w + 2 * j;
        dst[i * wo + j] = q[0] + q[1] + q[w] + q[w + 1];
      }
    }
  }
  return make_result({n, c, ho, wo}, std::move(out), "sumpool2", {x},
                     [](const Tensor& g, const std::vector<bool>&) {
                       return std::vector<Tensor>{upsample_nearest2(g)};
                     });
}

Tensor embed_channels(const Tensor& x, int start, int total) {
  require_rank4(x, "embed_channels");
  const int n = x.dim(0), c = x.dim(1);
  if (start < 0 || start + c > total) throw ShapeError("embed_channels: range out of bounds");
  const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  Buffer out(static_cast<std::size_t>(n) * total * plane, 0.0);
  auto in = x.data();
  for (int s = 0; s < n; ++s) {
    std::copy_n(in.begin() + static_cast<std::ptrdiff_t>(s * c * plane), c * plane,
                out.begin() + static_cast<std::ptrdiff_t>((s * total + start) * plane));
  }
  return make_result({n, total, x.dim(2), x.dim(3)}, std::move(out), "embed_channels", {x},
                     [start, c](const Tensor& g, const std::vector<bool>&) {
                       return std::vector<Tensor>{slice_channels(g, start, c)};
                     });
}

Tensor relu_mask(const Tensor& grad, const Tensor& ref) {
  require_same_shape(grad, ref, "relu_mask");
  const Tensor constant = ref.detach();
  auto out = zip_values(grad, constant, [](double g, double r) { return r > 0.0 ? g : 0.0; }, "relu_mask");
  return checked_result(grad.shape(), std::move(out), "relu_mask", {grad},
                     [constant](const Tensor& g, const std::vector<bool>&) {
                       return std::vector<Tensor>{relu_mask(g, constant)};
                     });
}

}  // namespace detail

}  // namespace mmc
