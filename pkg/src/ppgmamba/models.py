"""DPNet denoiser and HRP heart-rate predictor.

Both models take z-scored segments shaped ``(B, 1, L)`` (or ``(1, L)``).

DPNet:  conv x3 -> BMamba x n -> conv x2 -> f(x);  d = a*x + (1-a)*f(x)
HRP:    conv x3 -> BMamba x n -> mean over time -> MLP -> BPM
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .ssm import BMambaParams, bmamba, init_bmamba


def _check_kernels(kernels, what):
    for k in kernels:
        if k < 1 or k % 2 == 0:
            raise ValueError(f"{what} kernel sizes must be odd and positive, got {tuple(kernels)}")


@dataclass(frozen=True)
class DPNetConfig:
    D: int = 64
    n_blocks: int = 5
    state_dim: int = 16
    in_kernels: tuple = (7, 5, 3)
    out_kernels: tuple = (3, 3)
    alpha_init: float = 0.0
    expand: int = 2
    conv_kernel: int = 4

    def __post_init__(self):
        object.__setattr__(self, "in_kernels", tuple(self.in_kernels))
        object.__setattr__(self, "out_kernels", tuple(self.out_kernels))
        if self.D < 1 or self.n_blocks < 1 or self.state_dim < 1 or self.expand < 1:
            raise ValueError("D, n_blocks, state_dim and expand must be >= 1")
        if len(self.in_kernels) != 3 or len(self.out_kernels) != 2:
            raise ValueError("DPNet uses three input and two output convolutions")
        _check_kernels(self.in_kernels, "input")
        _check_kernels(self.out_kernels, "output")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["in_kernels"] = list(self.in_kernels)
        d["out_kernels"] = list(self.out_kernels)
        return d


@dataclass(frozen=True)
class HRPConfig:
    D: int = 64
    n_blocks: int = 5
    state_dim: int = 16
    in_kernels: tuple = (7, 5, 3)
    hidden: int = 32
    expand: int = 2
    conv_kernel: int = 4
    bpm_init: float = 75.0

    def __post_init__(self):
        object.__setattr__(self, "in_kernels", tuple(self.in_kernels))
        if self.D < 1 or self.n_blocks < 1 or self.state_dim < 1 or self.hidden < 1:
            raise ValueError("D, n_blocks, state_dim and hidden must be >= 1")
        if len(self.in_kernels) != 3:
            raise ValueError("HRP uses three input convolutions")
        _check_kernels(self.in_kernels, "input")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["in_kernels"] = list(self.in_kernels)
        return d


def config_digest(config) -> bytes:
    """SHA-256 over the canonical JSON of a model config."""
    payload = {"kind": type(config).__name__, **config.to_dict()}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).digest()


@dataclass
class ConvLayer:
    w: Tensor  # (C_out, C_in, K)
    b: Tensor  # (C_out,)


@dataclass
class DPNetParams:
    config: DPNetConfig
    conv_in: list[ConvLayer]
    blocks: list[BMambaParams]
    conv_out: list[ConvLayer]
    alpha_raw: Tensor  # scalar, alpha = sigmoid(alpha_raw)

    @property
    def alpha(self) -> float:
        return float(1.0 / (1.0 + np.exp(-self.alpha_raw.data)))

    def tensors(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, c in enumerate(self.conv_in):
            out[f"conv_in.{i}.w"], out[f"conv_in.{i}.b"] = c.w, c.b
        for i, blk in enumerate(self.blocks):
            out.update({f"blocks.{i}.{k}": v for k, v in blk.tensors().items()})
        for i, c in enumerate(self.conv_out):
            out[f"conv_out.{i}.w"], out[f"conv_out.{i}.b"] = c.w, c.b
        out["alpha_raw"] = self.alpha_raw
        return out


@dataclass
class HRPParams:
    config: HRPConfig
    conv_in: list[ConvLayer]
    blocks: list[BMambaParams]
    w1: Tensor  # (D, hidden)
    b1: Tensor
    w2: Tensor  # (hidden, 1)
    b2: Tensor  # (1,)

    def tensors(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, c in enumerate(self.conv_in):
            out[f"conv_in.{i}.w"], out[f"conv_in.{i}.b"] = c.w, c.b
        for i, blk in enumerate(self.blocks):
            out.update({f"blocks.{i}.{k}": v for k, v in blk.tensors().items()})
        out.update({"head.w1": self.w1, "head.b1": self.b1, "head.w2": self.w2, "head.b2": self.b2})
        return out


def _conv_layer(rng, c_out, c_in, k, dtype) -> ConvLayer:
    bound = 1.0 / np.sqrt(c_in * k)
    return ConvLayer(
        w=Tensor(rng.uniform(-bound, bound, (c_out, c_in, k)).astype(dtype), requires_grad=True),
        b=Tensor(rng.uniform(-bound, bound, (c_out,)).astype(dtype), requires_grad=True),
    )


def _conv_stack(rng, channels, kernels, dtype):
    return [_conv_layer(rng, co, ci, k, dtype) for (ci, co), k in zip(zip(channels, channels[1:]), kernels)]


def init_params(config, seed: int = 0, dtype=np.float64):
    """Deterministic initialisation from ``seed`` for either model config."""
    if not isinstance(config, (DPNetConfig, HRPConfig)):
        raise TypeError(f"unknown config type {type(config).__name__}")
    rng = np.random.default_rng(seed)
    D = config.D
    conv_in = _conv_stack(rng, [1, D, D, D], config.in_kernels, dtype)
    blocks = [init_bmamba(rng, D, config.state_dim, config.expand, config.conv_kernel, dtype)
              for _ in range(config.n_blocks)]
    if isinstance(config, DPNetConfig):
        mid = max(D // 2, 1)
        conv_out = _conv_stack(rng, [D, mid, 1], config.out_kernels, dtype)
        return DPNetParams(config, conv_in, blocks, conv_out,
                           Tensor(np.asarray(config.alpha_init, dtype=dtype), requires_grad=True))
    if isinstance(config, HRPConfig):
        H = config.hidden
        b1 = 1.0 / np.sqrt(D)
        b2 = 1.0 / np.sqrt(H)
        return HRPParams(
            config, conv_in, blocks,
            w1=Tensor(rng.uniform(-b1, b1, (D, H)).astype(dtype), requires_grad=True),
            b1=Tensor(rng.uniform(-b1, b1, (H,)).astype(dtype), requires_grad=True),
            w2=Tensor(rng.uniform(-b2, b2, (H, 1)).astype(dtype), requires_grad=True),
            b2=Tensor(np.full(1, config.bpm_init, dtype=dtype), requires_grad=True),
        )


def _as_batch(x) -> tuple[Tensor, bool]:
    x = ad._as_tensor(x)
    if x.ndim == 1:
        return ad.reshape(x, (1, 1, x.shape[0])), True
    if x.ndim == 2:
        return ad.reshape(x, (1,) + x.shape), True
    return x, False


def _features(x: Tensor, conv_in, blocks) -> Tensor:
    L = x.shape[-1]
    kmax = max(c.w.shape[2] for c in conv_in)
    if L < kmax:
        raise ValueError(f"input length {L} is shorter than the largest kernel ({kmax})")
    h = x
    for c in conv_in:
        h = ad.silu(ad.conv1d(h, c.w, c.b, padding="same"))
    for blk in blocks:
        h = bmamba(h, blk.fwd, blk.bwd)
    return h


def dpnet_forward(noisy, params: DPNetParams) -> Tensor:
    """Denoise z-scored input of shape (B, 1, L) or (1, L); output has the same shape."""
    x, squeeze = _as_batch(noisy)
    if x.shape[1] != 1:
        raise ValueError(f"DPNet expects a single input channel, got shape {tuple(x.shape)}")
    h = _features(x, params.conv_in, params.blocks)
    kmax = max(c.w.shape[2] for c in params.conv_out)
    if x.shape[-1] < kmax:
        raise ValueError(f"input length {x.shape[-1]} is shorter than the largest kernel ({kmax})")
    c0, c1 = params.conv_out
    h = ad.silu(ad.conv1d(h, c0.w, c0.b, padding="same"))
    f = ad.conv1d(h, c1.w, c1.b, padding="same")
    alpha = ad.sigmoid(params.alpha_raw)
    out = ad.add(ad.mul(alpha, x), ad.mul(ad.sub(1.0, alpha), f))
    if squeeze:
        out = ad.reshape(out, ad._as_tensor(noisy).shape)
    return out


def hrp_forward(segment, params: HRPParams) -> Tensor:
    """BPM prediction: shape (B,) for batched input, a scalar otherwise."""
    x, squeeze = _as_batch(segment)
    if x.shape[1] != 1:
        raise ValueError(f"HRP expects a single input channel, got shape {tuple(x.shape)}")
    h = _features(x, params.conv_in, params.blocks)
    pooled = ad.avg_pool(h)  # (B, D)
    z = ad.silu(ad.add(ad.matmul(pooled, params.w1), params.b1))
    out = ad.add(ad.matmul(z, params.w2), params.b2)  # (B, 1)
    out = ad.reshape(out, (out.shape[0],))
    return ad.reshape(out, ()) if squeeze else out
