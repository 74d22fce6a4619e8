#include <cmath>

#include "mmc/errors.hpp"
#include "mmc/nets.hpp"
#include "mmc/rng.hpp"

namespace mmc {

namespace {

constexpr double kPassThroughGain = 8.0;

std::vector<int> hidden_kernels(CNetVariant v) {
  switch (v) {
    case CNetVariant::k3k1: return {3};
    case CNetVariant::k3k3k1: return {3, 3};
    case CNetVariant::k3k5k1: return {3, 5};
  }
  throw std::invalid_argument("unknown C-Net variant");
}

}  // namespace

std::string_view variant_name(CNetVariant variant) {
  switch (variant) {
    case CNetVariant::k3k1: return "k3k1";
    case CNetVariant::k3k3k1: return "k3k3k1";
    case CNetVariant::k3k5k1: return "k3k5k1";
  }
  return "?";
}

CNetVariant parse_variant(std::string_view name) {
  for (auto v : {CNetVariant::k3k1, CNetVariant::k3k3k1, CNetVariant::k3k5k1}) {
    if (variant_name(v) == name) return v;
  }
  throw std::invalid_argument("unknown C-Net variant: " + std::string(name));
}

MetaParams init_cnet(CNetVariant variant, int hidden, std::uint64_t seed) {
  if (hidden < 1) throw std::invalid_argument("C-Net hidden width must be >= 1");
  const auto kernels = hidden_kernels(variant);
  MetaParams out{variant, hidden, {}};
  Rng rng(substream(seed, 0xc4e7));

  for (std::size_t layer = 0; layer < kernels.size(); ++layer) {
    const int k = kernels[layer];
    const int cin = layer == 0 ? 2 : hidden;
    const double sigma = std::sqrt(2.0 / (cin * k * k));
    std::vector<double> w(static_cast<std::size_t>(hidden) * cin * k * k);
    std::vector<double> b(hidden, 0.0);
    for (auto& v : w) v = rng.normal(0.0, sigma);
    auto tap = [&](int o, int c, int a, int bb) -> double& {
      return w[((static_cast<std::size_t>(o) * cin + c) * k + a) * k + bb];
    };
    const int carried = std::min(hidden, 2);
    for (int o = 0; o < carried; ++o) {
      for (int c = 0; c < cin; ++c)
        for (int a = 0; a < k; ++a)
          for (int bb = 0; bb < k; ++bb) tap(o, c, a, bb) = 0.0;
      const int center = k / 2;
      if (layer == 0) {
        // Input channel 1 is the noisy mask.
        tap(o, 1, center, center) = o == 0 ? 2.0 : -2.0;
        b[o] = o == 0 ? -1.0 : 1.0;
      } else {
        tap(o, o, center, center) = 1.0;
      }
    }
    const std::string name = "conv" + std::to_string(layer + 1);
    out.params.add(name + ".w", Tensor::from_data({hidden, cin, k, k}, std::move(w)));
    out.params.add(name + ".b", Tensor::from_data({hidden}, std::move(b)));
  }

  std::vector<double> w(hidden, 0.0);
  double bias = 0.0;
  if (hidden >= 2) {
    w[0] = kPassThroughGain;
    w[1] = -kPassThroughGain;
  } else {
    w[0] = 2.0 * kPassThroughGain;
    bias = -kPassThroughGain;
  }
  out.params.add("out.w", Tensor::from_data({1, hidden, 1, 1}, std::move(w)));
  out.params.add("out.b", Tensor::from_data({1}, {bias}));
  return out;
}

Tensor cnet_forward(CNetVariant variant, const ParamSet& p, const Tensor& logits, const Tensor& noisy_mask) {
  if (logits.rank() != 4 || logits.dim(1) != 1 || logits.shape() != noisy_mask.shape()) {
    throw ShapeError("cnet_forward: logits " + shape_str(logits.shape()) + " and mask " +
                     shape_str(noisy_mask.shape()) + " must both be [N,1,H,W]");
  }
  Tensor x = concat_channels(logits, noisy_mask);
  const auto kernels = hidden_kernels(variant);
  for (std::size_t layer = 0; layer < kernels.size(); ++layer) {
    const std::string name = "conv" + std::to_string(layer + 1);
    x = relu(conv2d(x, p.at(name + ".w"), p.at(name + ".b"), kernels[layer] / 2));
  }
  return sigmoid(conv2d(x, p.at("out.w"), p.at("out.b"), 0));
}

Tensor cnet_forward(const MetaParams& theta, const Tensor& logits, const Tensor& noisy_mask) {
  return cnet_forward(theta.variant, theta.params, logits, noisy_mask);
}

}  // namespace mmc
