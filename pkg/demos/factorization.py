"""The two-stage guided convolution equals one spatially-variant convolution with induced kernels.

Channel-wise kernels (one KxK filter per pixel and input channel) followed by a
per-image MxN channel mix give the same output as a naive convolution whose
full kernel is their product, at a fraction of the memory.
"""
import numpy as np

from guidedconv.guided import channelwise_variant_conv, crosschannel_conv, induce_full_kernels, naive_guided_conv
from guidedconv.tensor import Tensor, precision

rng = np.random.default_rng(0)
b, M, N, K, H, W = 2, 4, 6, 3, 12, 20

depth_feat = rng.normal(size=(b, M, H, W))
channelwise = rng.normal(size=(b, M, K * K, H, W))
crosschannel = rng.normal(size=(b, M, N))

with precision("float64"):
    two_stage = crosschannel_conv(channelwise_variant_conv(Tensor(depth_feat), channelwise), crosschannel).data

full = induce_full_kernels(channelwise, crosschannel)
naive = naive_guided_conv(depth_feat, full)

print("output shape       ", two_stage.shape)
print("max |difference|   ", np.abs(two_stage - naive).max())
print("kernel elements     factorized", channelwise.size + crosschannel.size, " naive", full.weights.size)
