#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "mmc/autodiff.hpp"

namespace mmc {

// Encoder-decoder segmentation net. Every level carries `base_channels`
// channels; each encoder level is conv3x3+relu then 2x2 max-pool, the
// bottleneck is one conv3x3+relu, each decoder level is nearest 2x upsample,
// concat with the matching encoder activation, conv3x3+relu, and a 1x1 head
// emits one logit channel.
struct SegConfig {
  int levels = 3;
  int base_channels = 8;
  int in_channels = 1;
};

struct SegParams {
  SegConfig config;
  ParamSet params;
};

struct SegForwardOutput {
  // Also the feature map handed to the correction net.
  Tensor logits;
};

std::size_t seg_param_count(const SegConfig& config);
SegParams init_seg(const SegConfig& config, std::uint64_t seed);
SegParams zero_like(const SegParams& params);
SegForwardOutput seg_forward(const SegConfig& config, const ParamSet& params, const Tensor& image);
// Recovers the config from loaded tensors; DataError unless the layout is
// exactly the one init_seg would produce.
SegParams seg_from_tensors(const ParamSet& params);
inline SegForwardOutput seg_forward(const SegParams& w, const Tensor& image) {
  return seg_forward(w.config, w.params, image);
}

enum class CNetVariant { k3k1, k3k3k1, k3k5k1 };

std::string_view variant_name(CNetVariant variant);
CNetVariant parse_variant(std::string_view name);

// Correction net: (logits, noisy mask) -> corrected soft mask.
struct MetaParams {
  CNetVariant variant = CNetVariant::k3k1;
  int hidden = 8;
  ParamSet params;
};

// Hidden channel 0 carries relu(2m - 1) and channel 1 carries relu(1 - 2m)
// of the noisy mask m; the 1x1 output weighs them +8 and -8, so the initial
// output is sigmoid(+-8) on a binary mask. All other output weights start at
// zero. With hidden == 1 only the first channel exists and the output bias
// recentres it.
MetaParams init_cnet(CNetVariant variant, int hidden, std::uint64_t seed);
Tensor cnet_forward(const MetaParams& theta, const Tensor& logits, const Tensor& noisy_mask);
Tensor cnet_forward(CNetVariant variant, const ParamSet& params, const Tensor& logits, const Tensor& noisy_mask);

// Flat checkpoint: text header of (name, shape) records followed by raw
// little-endian doubles in header order.
void save_checkpoint(const std::filesystem::path& path, const TensorMap& tensors);
TensorMap load_checkpoint(const std::filesystem::path& path);

}  // namespace mmc
