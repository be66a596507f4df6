"""Guided convolution for image-guided depth completion, on a small numpy autodiff engine."""

__version__ = "0.1.0"

from .tensor import Tensor, backward, no_grad, precision  # noqa: E402
from .guided import (  # noqa: E402
    ChannelwiseKernels, CrossChannelKernels, FullVariantKernels, GuidedConv,
    channelwise_variant_conv, crosschannel_conv, generate_channelwise_kernels,
    generate_crosschannel_kernels, guided_module_forward, naive_guided_conv,
)
from .network import FusionScheme, NetConfig, build  # noqa: E402
from .metrics import MetricReport, evaluate  # noqa: E402
from .cost import analyze, measure  # noqa: E402
