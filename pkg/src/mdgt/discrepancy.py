"""Differentiable two-sample discrepancy metrics.

`mmd2` is a multi-kernel Gaussian-RBF maximum mean discrepancy:
k(x, y) = exp(-|x - y|^2 / (2 sigma^2)), summed over one kernel per
configured bandwidth multiplier. The base bandwidth sigma^2 comes from
the median heuristic by default and is treated as a constant of the
batch (no gradient through it). `coral` aligns second-order statistics:
|C_x - C_y|_F^2 / (4 d^2) with 1/(n-1) sample covariances.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ShapeError, Tensor, exp, matmul, pairwise_sqdist, square

DEFAULT_MULTIPLIERS = (0.25, 0.5, 1.0, 2.0, 4.0)

KINDS = ("mmd", "coral")
ESTIMATORS = ("biased", "unbiased")
BANDWIDTH_MODES = ("median", "fixed")


@dataclass(frozen=True)
class DiscrepancyConfig:
    kind: str = "mmd"
    estimator: str = "unbiased"
    bandwidth_multipliers: tuple[float, ...] = field(default=DEFAULT_MULTIPLIERS)
    bandwidth_mode: str = "median"
    fixed_bandwidth: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"estimator must be one of {ESTIMATORS}, got {self.estimator!r}")
        if self.bandwidth_mode not in BANDWIDTH_MODES:
            raise ValueError(f"bandwidth_mode must be one of {BANDWIDTH_MODES}")
        mults = tuple(float(m) for m in self.bandwidth_multipliers)
        if not mults or any(m <= 0 for m in mults):
            raise ValueError("bandwidth_multipliers must be non-empty and strictly positive")
        object.__setattr__(self, "bandwidth_multipliers", mults)
        if self.bandwidth_mode == "fixed":
            if self.fixed_bandwidth is None or self.fixed_bandwidth <= 0:
                raise ValueError("fixed bandwidth_mode requires a positive fixed_bandwidth")

    def to_json(self) -> dict:
        out = {"kind": self.kind, "estimator": self.estimator,
               "bandwidth_multipliers": list(self.bandwidth_multipliers),
               "bandwidth_mode": self.bandwidth_mode}
        if self.fixed_bandwidth is not None:
            out["fixed_bandwidth"] = self.fixed_bandwidth
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "DiscrepancyConfig":
        return cls(kind=obj.get("kind", "mmd"),
                   estimator=obj.get("estimator", "unbiased"),
                   bandwidth_multipliers=tuple(obj.get("bandwidth_multipliers",
                                                       DEFAULT_MULTIPLIERS)),
                   bandwidth_mode=obj.get("bandwidth_mode", "median"),
                   fixed_bandwidth=obj.get("fixed_bandwidth"))


def median_heuristic(x, y) -> float:
    """Median of squared pairwise distances over the pooled rows.

    Self-pairs are excluded. Raises if every remaining distance is zero
    (degenerate batch: all points identical).
    """
    xa = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    ya = y.data if isinstance(y, Tensor) else np.asarray(y, dtype=np.float64)
    pooled = np.concatenate([xa.reshape(len(xa), -1), ya.reshape(len(ya), -1)], axis=0)
    n = len(pooled)
    if n < 2:
        raise ValueError("median heuristic needs at least 2 pooled points")
    sq = ((pooled[:, None, :] - pooled[None, :, :]) ** 2).sum(axis=2)
    iu = np.triu_indices(n, k=1)
    dists = sq[iu]
    med = float(np.median(dists))
    if med <= 0.0:
        raise ValueError("median heuristic degenerate: all pooled points identical")
    return med


def _bandwidths(x: Tensor, y: Tensor, cfg: DiscrepancyConfig) -> list[float]:
    if cfg.bandwidth_mode == "fixed":
        base = float(cfg.fixed_bandwidth)
    else:
        base = median_heuristic(x, y)
    return [m * base for m in cfg.bandwidth_multipliers]


def mmd2(x: Tensor, y: Tensor, cfg: DiscrepancyConfig | None = None) -> Tensor:
    """Squared MMD between (n,d) and (m,d) batches; gradients flow into both."""
    cfg = cfg or DiscrepancyConfig()
    if x.ndim != 2 or y.ndim != 2:
        raise ShapeError(f"mmd2 expects 2-D batches, got {x.shape}, {y.shape}")
    if x.shape[1] != y.shape[1]:
        raise ShapeError(f"mmd2: feature dims differ, {x.shape[1]} vs {y.shape[1]}")
    n, m = x.shape[0], y.shape[0]
    if n < 1 or m < 1:
        raise ShapeError("mmd2 needs at least one sample per batch")
    if cfg.estimator == "unbiased" and (n < 2 or m < 2):
        raise ShapeError("unbiased mmd2 needs at least 2 samples per batch")

    dxx = pairwise_sqdist(x, x)
    dyy = pairwise_sqdist(y, y)
    dxy = pairwise_sqdist(x, y)

    total: Tensor | None = None
    for sigma_sq in _bandwidths(x, y, cfg):
        c = -0.5 / sigma_sq
        kxx, kyy, kxy = exp(dxx * c), exp(dyy * c), exp(dxy * c)
        if cfg.estimator == "biased":
            term = kxx.mean() + kyy.mean() - 2.0 * kxy.mean()
        else:
            # U-statistic: drop the k(z,z)=1 diagonal terms
            term = ((kxx.sum() - float(n)) / (n * (n - 1))
                    + (kyy.sum() - float(m)) / (m * (m - 1))
                    - 2.0 * kxy.mean())
        total = term if total is None else total + term
    return total


def _covariance(x: Tensor) -> Tensor:
    n = x.shape[0]
    centered = x - x.mean(axis=0)
    return matmul(centered.T, centered) / (n - 1)


def coral(x: Tensor, y: Tensor) -> Tensor:
    """Squared Frobenius distance of sample covariances, scaled by 1/(4 d^2)."""
    if x.ndim != 2 or y.ndim != 2:
        raise ShapeError(f"coral expects 2-D batches, got {x.shape}, {y.shape}")
    if x.shape[1] != y.shape[1]:
        raise ShapeError(f"coral: feature dims differ, {x.shape[1]} vs {y.shape[1]}")
    if x.shape[0] < 2 or y.shape[0] < 2:
        raise ShapeError("coral needs at least 2 samples per batch")
    d = x.shape[1]
    diff = _covariance(x) - _covariance(y)
    return square(diff).sum() / (4.0 * d * d)


def discrepancy(x: Tensor, y: Tensor, cfg: DiscrepancyConfig) -> Tensor:
    """Dispatch on cfg.kind; the metric shared by both training protocols."""
    if cfg.kind == "coral":
        return coral(x, y)
    return mmd2(x, y, cfg)


def pixel_mmd(images_a: np.ndarray, images_b: np.ndarray) -> float:
    """Biased raw-pixel MMD between two image sets, unit fixed bandwidth.

    Images are flattened and scaled by 1/sqrt(D) so squared distances are
    per-pixel averages and a bandwidth of 1 is meaningful at any resolution.
    """
    a = np.asarray(images_a, dtype=np.float64).reshape(len(images_a), -1)
    b = np.asarray(images_b, dtype=np.float64).reshape(len(images_b), -1)
    scale = 1.0 / np.sqrt(a.shape[1])
    cfg = DiscrepancyConfig(kind="mmd", estimator="biased",
                            bandwidth_multipliers=(1.0,),
                            bandwidth_mode="fixed", fixed_bandwidth=1.0)
    return mmd2(Tensor(a * scale), Tensor(b * scale), cfg).item()
