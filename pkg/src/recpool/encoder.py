"""Frame-rate-preserving TDNN encoder (F x T features -> D x T frame embeddings)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class TDNNLayer:
    in_dim: int
    out_dim: int
    kernel: int
    dilation: int
    W: Tensor   # (out_dim, kernel * in_dim), column block j multiplies tap j
    b: Tensor   # (out_dim,)
    activation: str = "relu"

    @property
    def context(self) -> int:
        """Frames of context on each side."""
        return self.dilation * (self.kernel - 1) // 2


@dataclass
class EncoderParams:
    layers: list[TDNNLayer]

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def receptive_field(self) -> int:
        return sum(l.context for l in self.layers)

    def named_tensors(self, prefix="enc") -> dict[str, Tensor]:
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"{prefix}.{i}.W"] = layer.W
            out[f"{prefix}.{i}.b"] = layer.b
        return out


def init_encoder(in_dim: int, hidden: int = 64, out_dim: int = 64,
                 kernels=(5, 3, 3, 1, 1), dilations=(1, 2, 3, 1, 1),
                 seed: int = 0, final_activation: str = "linear") -> EncoderParams:
    """He-uniform initialised TDNN stack; hidden layers use ReLU."""
    if len(kernels) != len(dilations):
        raise ValueError("kernels and dilations must have the same length")
    if any(k % 2 == 0 for k in kernels):
        raise ValueError(f"kernel widths must be odd for same-length padding: {kernels}")
    rng = np.random.default_rng(seed)
    layers = []
    dims = [in_dim] + [hidden] * (len(kernels) - 1) + [out_dim]
    for i, (k, d) in enumerate(zip(kernels, dilations)):
        fan_in = k * dims[i]
        bound = np.sqrt(6.0 / fan_in)
        W = Tensor(rng.uniform(-bound, bound, (dims[i + 1], fan_in)), requires_grad=True)
        b = Tensor(np.zeros(dims[i + 1]), requires_grad=True)
        act = final_activation if i == len(kernels) - 1 else "relu"
        layers.append(TDNNLayer(dims[i], dims[i + 1], k, d, W, b, act))
    return EncoderParams(layers)


def identity_encoder(dim: int) -> EncoderParams:
    W = Tensor(np.eye(dim), requires_grad=True)
    b = Tensor(np.zeros(dim), requires_grad=True)
    return EncoderParams([TDNNLayer(dim, dim, 1, 1, W, b, "linear")])


def tdnn_layer(x: Tensor, layer: TDNNLayer) -> Tensor:
    """Dilated 1-D convolution over the last (time) axis with zero padding."""
    T = x.shape[-1]
    ctx = layer.context
    xp = ad.pad_last(x, ctx, ctx) if ctx else x
    if layer.kernel == 1:
        taps = xp
    else:
        taps = ad.concat([xp[..., j * layer.dilation: j * layer.dilation + T]
                          for j in range(layer.kernel)], axis=-2)
    y = ad.matmul(layer.W, taps) + ad.reshape(layer.b, (layer.out_dim, 1))
    return ad.relu(y) if layer.activation == "relu" else y


def encode(features, params: EncoderParams) -> Tensor:
    """Map (..., F, T) features to (..., D, T) frame-wise embeddings."""
    x = ad.as_tensor(features)
    if x.ndim < 2 or x.shape[-2] != params.in_dim:
        raise ad.ShapeError(
            f"encode: expected (..., {params.in_dim}, T) features, got shape {x.shape}")
    if x.shape[-1] < 1:
        raise ad.ShapeError("encode: need at least one frame")
    for layer in params.layers:
        x = tdnn_layer(x, layer)
    return x
