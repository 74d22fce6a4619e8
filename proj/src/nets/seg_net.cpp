#include <cmath>

#include "mmc/errors.hpp"
#include "mmc/nets.hpp"
#include "mmc/rng.hpp"

namespace mmc {

namespace {

struct ConvSpec {
  std::string name;
  int cin, cout, k;
};

std::vector<ConvSpec> seg_layout(const SegConfig& c) {
  const int b = c.base_channels;
  std::vector<ConvSpec> layers;
  for (int l = 0; l < c.levels; ++l) layers.push_back({"enc" + std::to_string(l), l == 0 ? c.in_channels : b, b, 3});
  layers.push_back({"mid", b, b, 3});
  for (int l = c.levels - 1; l >= 0; --l) layers.push_back({"dec" + std::to_string(l), 2 * b, b, 3});
  layers.push_back({"head", b, 1, 1});
  return layers;
}

void validate(const SegConfig& c) {
  if (c.levels < 1 || c.base_channels < 1 || c.in_channels < 1) {
    throw std::invalid_argument("segmentation net needs levels, base_channels, in_channels >= 1");
  }
}

}  // namespace

std::size_t seg_param_count(const SegConfig& c) {
  validate(c);
  const std::size_t b = c.base_channels, e = c.levels, cin = c.in_channels;
  const std::size_t enc = (cin * 9 * b + b) + (e - 1) * (9 * b * b + b);
  const std::size_t mid = 9 * b * b + b;
  const std::size_t dec = e * (18 * b * b + b);
  const std::size_t head = b + 1;
  return enc + mid + dec + head;
}

SegParams init_seg(const SegConfig& config, std::uint64_t seed) {
  validate(config);
  SegParams out{config, {}};
  Rng rng(substream(seed, 0x5e6));
  for (const auto& layer : seg_layout(config)) {
    const double sigma = std::sqrt(2.0 / (layer.cin * layer.k * layer.k));
    std::vector<double> w(static_cast<std::size_t>(layer.cout) * layer.cin * layer.k * layer.k);
    for (auto& v : w) v = rng.normal(0.0, sigma);
    out.params.add(layer.name + ".w", Tensor::from_data({layer.cout, layer.cin, layer.k, layer.k}, std::move(w)));
    out.params.add(layer.name + ".b", Tensor::zeros({layer.cout}));
  }
  return out;
}

SegParams zero_like(const SegParams& w) {
  SegParams out{w.config, {}};
  for (const auto& e : w.params) out.params.add(e.name, Tensor::zeros(e.value.shape()));
  return out;
}

SegForwardOutput seg_forward(const SegConfig& config, const ParamSet& p, const Tensor& image) {
  if (image.rank() != 4 || image.dim(1) != config.in_channels) {
    throw ShapeError("seg_forward: expected [N," + std::to_string(config.in_channels) + ",H,W], got " +
                     shape_str(image.shape()));
  }
  const int step = 1 << config.levels;
  if (image.dim(2) % step != 0 || image.dim(3) % step != 0) {
    throw ShapeError("seg_forward: spatial dims must be divisible by " + std::to_string(step) + ", got " +
                     shape_str(image.shape()));
  }
  auto conv = [&p](const Tensor& x, const std::string& name, int pad) {
    return conv2d(x, p.at(name + ".w"), p.at(name + ".b"), pad);
  };
  std::vector<Tensor> skips;
  Tensor x = image;
  for (int l = 0; l < config.levels; ++l) {
    x = relu(conv(x, "enc" + std::to_string(l), 1));
    skips.push_back(x);
    x = maxpool2(x);
  }
  x = relu(conv(x, "mid", 1));
  for (int l = config.levels - 1; l >= 0; --l) {
    x = concat_channels(upsample_nearest2(x), skips[l]);
    x = relu(conv(x, "dec" + std::to_string(l), 1));
  }
  return {conv(x, "head", 0)};
}

SegParams seg_from_tensors(const ParamSet& params) {
  SegConfig c;
  c.levels = 0;
  while (params.contains("enc" + std::to_string(c.levels) + ".w")) ++c.levels;
  if (c.levels == 0) throw DataError("checkpoint has no segmentation layers (enc0.w missing)");
  const Tensor& first = params.at("enc0.w");
  if (first.rank() != 4) throw DataError("checkpoint: enc0.w must be rank 4");
  c.base_channels = first.dim(0);
  c.in_channels = first.dim(1);
  const SegParams expected = zero_like(init_seg(c, 0));
  if (!expected.params.same_layout(params)) {
    throw DataError("checkpoint layout does not match a segmentation net with levels=" + std::to_string(c.levels) +
                    " base_channels=" + std::to_string(c.base_channels) + " in_channels=" +
                    std::to_string(c.in_channels));
  }
  return {c, params};
}

}  // namespace mmc
