"""Mu-law companded k-bit quantization with straight-through gradients.

The companding curve f(s) = sgn(s) * ln(1 + mu*|s|) / ln(1 + mu) maps
[-1, 1] onto itself; a mid-rise uniform grid of 2^k level centers lives in
the companded domain.  Dequantization expands the level center back through
the exact inverse.  The training path quantizes in the forward pass and
passes gradients through unchanged (constant 1, no clipping).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DEFAULT_MU = 255.0


@dataclass(frozen=True)
class QuantizerConfig:
    """k-bit mid-rise grid in the companded domain."""

    bits: int = 8
    mu: float = DEFAULT_MU
    centers: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not 2 <= self.bits <= 16:
            raise ValueError(f"bits must be in [2, 16], got {self.bits}")
        if self.mu <= 0:
            raise ValueError(f"mu must be positive, got {self.mu}")
        k = 2 ** self.bits
        centers = -1.0 + (2.0 * np.arange(k) + 1.0) / k
        object.__setattr__(self, "centers", centers)

    @property
    def levels(self) -> int:
        return 2 ** self.bits

    @property
    def step(self) -> float:
        return 2.0 / self.levels


@dataclass
class QuantizedLatent:
    """Symbol indices in [0, 2^k) for one latent vector (or a batch)."""

    symbols: np.ndarray
    bits: int

    def __post_init__(self):
        self.symbols = np.asarray(self.symbols)
        if self.symbols.size and self.symbols.max(initial=0) >= 2 ** self.bits:
            raise ValueError("symbol index out of range for bit depth")


def _check_unit_range(x: np.ndarray, name: str) -> None:
    if x.size and np.max(np.abs(x)) > 1.0:
        raise ValueError(f"{name}: values must lie in [-1, 1], got max |x| = "
                         f"{np.max(np.abs(x)):.6g}")


def mu_compress(s, mu: float = DEFAULT_MU) -> np.ndarray:
    """Companding curve: odd, strictly monotone, fixes 0 and +-1."""
    s = np.asarray(s, dtype=np.float64)
    _check_unit_range(s, "mu_compress")
    return np.sign(s) * np.log1p(mu * np.abs(s)) / np.log1p(mu)


def mu_expand(y, mu: float = DEFAULT_MU) -> np.ndarray:
    """Exact inverse of mu_compress: sgn(y) * ((1+mu)^|y| - 1) / mu."""
    y = np.asarray(y, dtype=np.float64)
    _check_unit_range(y, "mu_expand")
    return np.sign(y) * np.expm1(np.abs(y) * np.log1p(mu)) / mu


def mu_compress_t(s: Tensor, mu: float = DEFAULT_MU) -> Tensor:
    """Differentiable companding; d/ds = mu / ((1 + mu|s|) ln(1 + mu))."""
    sd = s.data
    out = mu_compress(sd, mu).astype(sd.dtype)
    scale = mu / np.log1p(mu)

    def grad_fn(g):
        return (g * (scale / (1.0 + mu * np.abs(sd))).astype(sd.dtype),)

    return ad.make_op((s,), out, grad_fn, "mu_compress")


def companded_indices(y: np.ndarray, config: QuantizerConfig) -> np.ndarray:
    """Nearest level center in the companded domain; ties go to the lower index."""
    k = config.levels
    u = (np.asarray(y, dtype=np.float64) + 1.0) * (k / 2.0)
    idx = np.ceil(u).astype(np.int64) - 1
    return np.clip(idx, 0, k - 1)


def quantize(s, config: QuantizerConfig) -> QuantizedLatent:
    """Map values in [-1, 1] to nearest-center symbol indices."""
    s = np.asarray(s, dtype=np.float64)
    _check_unit_range(s, "quantize")
    return QuantizedLatent(companded_indices(mu_compress(s, config.mu), config),
                           config.bits)


def dequantize(q: QuantizedLatent, config: QuantizerConfig) -> np.ndarray:
    """Expand level centers back to the original domain."""
    symbols = np.asarray(q.symbols)
    if symbols.size and (symbols.min(initial=0) < 0
                         or symbols.max(initial=0) >= config.levels):
        raise ValueError(f"dequantize: symbol index out of range for k={config.bits}")
    return mu_expand(config.centers[symbols], config.mu)


def quantization_round_trip(s, config: QuantizerConfig) -> np.ndarray:
    return dequantize(quantize(s, config), config)


def ste_quantize(s: Tensor, config: QuantizerConfig) -> Tensor:
    """Hard quantization forward, identity gradient backward."""
    out = quantization_round_trip(s.data, config).astype(s.data.dtype)
    return ad.make_op((s,), out, lambda g: (g,), "ste_quantize")
