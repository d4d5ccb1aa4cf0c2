"""Bidirectional selective state-space encoder over time patches of a CFP map.

Parameters live in a flat ``dict[str, Tensor]`` keyed by dotted names, e.g.
``layers.0.fwd.conv.kernel``; every function here is a pure function of that
dict and its inputs. Sequences are laid out (batch, time, width).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cfp import N_BINS
from .errors import ConfigError, ValidationError

BRANCHES = ("fwd", "bwd")


@dataclass
class EncoderConfig:
    d_model: int = 128
    expand: int = 2
    d_state: int = 16
    conv_width: int = 4
    num_layers: int = 4
    patch_width: int = 1
    max_frames: int = 1024
    dt_rank: int | None = None
    dt_min: float = 1e-3
    dt_max: float = 1e-1
    n_channels: int = 3
    n_bins: int = N_BINS

    def __post_init__(self):
        for name in ("d_model", "expand", "d_state", "conv_width", "patch_width", "max_frames"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"encoder.{name} must be positive, got {getattr(self, name)}")
        if self.num_layers < 0:
            raise ConfigError("encoder.num_layers must be nonnegative")
        if self.patch_width != 1:
            raise ConfigError("patch_width > 1 needs de-patching in the decoder, which is not supported")

    @property
    def d_inner(self) -> int:
        return self.expand * self.d_model

    @property
    def rank(self) -> int:
        return self.dt_rank or max(1, math.ceil(self.d_model / 16))

    @property
    def patch_size(self) -> int:
        return self.n_channels * self.n_bins * self.patch_width

    def to_dict(self) -> dict:
        return asdict(self)


def _uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_encoder(cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float32,
                 ) -> dict[str, Tensor]:
    d, di, n, r, w = cfg.d_model, cfg.d_inner, cfg.d_state, cfg.rank, cfg.conv_width
    p: dict[str, np.ndarray] = {
        "embed.weight": _uniform(rng, (cfg.patch_size, d), cfg.patch_size, dtype),
        "embed.bias": np.zeros(d, dtype),
        "embed.pos": (0.02 * rng.standard_normal((cfg.max_frames, d))).astype(dtype),
    }
    for layer in range(cfg.num_layers):
        pre = f"layers.{layer}"
        p[f"{pre}.norm.gain"] = np.ones(d, dtype)
        p[f"{pre}.norm.bias"] = np.zeros(d, dtype)
        p[f"{pre}.in_proj.weight"] = _uniform(rng, (d, 2 * di), d, dtype)
        p[f"{pre}.in_proj.bias"] = np.zeros(2 * di, dtype)
        for br in BRANCHES:
            q = f"{pre}.{br}"
            p[f"{q}.conv.kernel"] = _uniform(rng, (di, w), w, dtype)
            p[f"{q}.conv.bias"] = np.zeros(di, dtype)
            p[f"{q}.x_dt.weight"] = _uniform(rng, (di, r), di, dtype)
            p[f"{q}.x_B.weight"] = _uniform(rng, (di, n), di, dtype)
            p[f"{q}.x_C.weight"] = _uniform(rng, (di, n), di, dtype)
            p[f"{q}.dt.weight"] = _uniform(rng, (r, di), r, dtype)
            dt0 = np.exp(rng.uniform(math.log(cfg.dt_min), math.log(cfg.dt_max), size=di))
            p[f"{q}.dt.bias"] = (dt0 + np.log(-np.expm1(-dt0))).astype(dtype)  # softplus^-1
            p[f"{q}.A_log"] = np.log(np.tile(np.arange(1, n + 1, dtype=np.float64), (di, 1))).astype(dtype)
            p[f"{q}.D"] = np.ones(di, dtype)
        p[f"{pre}.out_proj.weight"] = _uniform(rng, (di, d), di, dtype)
        p[f"{pre}.out_proj.bias"] = np.zeros(d, dtype)
    p["final_norm.gain"] = np.ones(d, dtype)
    p["final_norm.bias"] = np.zeros(d, dtype)
    return {k: Tensor(v, requires_grad=True) for k, v in p.items()}


# ---------------------------------------------------------------- tokenization


def patchify(cfp: np.ndarray, patch_width: int = 1) -> np.ndarray:
    """(C, F, T) or (B, C, F, T) -> (B, ceil(T / w), C * F * w).

    Patch ``t`` is the row-major flattening of the (C, F, w) slab starting at
    frame ``t * w``; a trailing partial patch is zero-padded.
    """
    x = np.asarray(cfp)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4:
        raise ValidationError(f"expected (C, F, T) or (B, C, F, T), got shape {x.shape}")
    b, c, f, t = x.shape
    n_patches = -(-t // patch_width)
    pad = n_patches * patch_width - t
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (0, 0), (0, pad)))
    x = x.reshape(b, c, f, n_patches, patch_width).transpose(0, 3, 1, 2, 4)
    return np.ascontiguousarray(x.reshape(b, n_patches, c * f * patch_width))


def unpatchify(patches: np.ndarray, n_channels: int, n_bins: int, n_frames: int) -> np.ndarray:
    b, n_patches, size = patches.shape
    width = size // (n_channels * n_bins)
    x = patches.reshape(b, n_patches, n_channels, n_bins, width).transpose(0, 2, 3, 1, 4)
    return x.reshape(b, n_channels, n_bins, n_patches * width)[..., :n_frames]


def embed(patches, params: dict[str, Tensor], cfg: EncoderConfig) -> Tensor:
    patches = ad.as_tensor(patches)
    n_patches = patches.shape[-2]
    if n_patches > cfg.max_frames:
        raise ConfigError(
            f"{n_patches} patches exceed max_frames={cfg.max_frames}; use chunked inference")
    tokens = ad.linear(patches, params["embed.weight"], params["embed.bias"])
    return tokens + params["embed.pos"][:n_patches]


# ----------------------------------------------------------------------- blocks


def _branch(x: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    """Conv -> SiLU -> selective scan for one direction; x is (B, T, d_inner)."""
    xc = ad.swapaxes(x, 1, 2)
    xc = ad.silu(ad.conv1d(xc, params[f"{prefix}.conv.kernel"], params[f"{prefix}.conv.bias"]))
    xt = ad.swapaxes(xc, 1, 2)
    dt_low = ad.linear(xt, params[f"{prefix}.x_dt.weight"])
    delta = ad.softplus(ad.linear(dt_low, params[f"{prefix}.dt.weight"], params[f"{prefix}.dt.bias"]))
    b_t = ad.linear(xt, params[f"{prefix}.x_B.weight"])
    c_t = ad.linear(xt, params[f"{prefix}.x_C.weight"])
    a = -ad.exp(params[f"{prefix}.A_log"])
    y = ad.selective_scan(xc, ad.swapaxes(delta, 1, 2), a, b_t, c_t, params[f"{prefix}.D"])
    return ad.swapaxes(y, 1, 2)


def mamba_block(tokens: Tensor, params: dict[str, Tensor], layer: int, cfg: EncoderConfig,
                ) -> Tensor:
    """One bidirectional layer: (B, T, d_model) -> (B, T, d_model)."""
    pre = f"layers.{layer}"
    normed = ad.layer_norm(tokens, params[f"{pre}.norm.gain"], params[f"{pre}.norm.bias"])
    xz = ad.linear(normed, params[f"{pre}.in_proj.weight"], params[f"{pre}.in_proj.bias"])
    di = cfg.d_inner
    x = xz[..., :di]
    gate = ad.silu(xz[..., di:])
    y_fwd = _branch(x, params, f"{pre}.fwd")
    y_bwd = ad.flip(_branch(ad.flip(x, 1), params, f"{pre}.bwd"), 1)
    mixed = y_fwd * gate + y_bwd * gate
    return ad.linear(mixed, params[f"{pre}.out_proj.weight"], params[f"{pre}.out_proj.bias"]) + tokens


def encode(cfp, params: dict[str, Tensor], cfg: EncoderConfig) -> Tensor:
    """CFP batch (B, C, F, T) -> final-normalized tokens (B, T_p, d_model)."""
    tokens = embed(patchify(cfp, cfg.patch_width).astype(params["embed.weight"].dtype, copy=False),
                   params, cfg)
    for layer in range(cfg.num_layers):
        tokens = mamba_block(tokens, params, layer, cfg)
    if cfg.num_layers == 0:
        return tokens
    return ad.layer_norm(tokens, params["final_norm.gain"], params["final_norm.bias"])


def swap_branches(params: dict[str, Tensor]) -> dict[str, Tensor]:
    """Exchange forward- and backward-direction parameters of every layer."""
    out = {}
    for name, value in params.items():
        if ".fwd." in name:
            name = name.replace(".fwd.", ".bwd.")
        elif ".bwd." in name:
            name = name.replace(".bwd.", ".fwd.")
        out[name] = value
    return out
