"""Complexity-adaptive data slimming: downsampling, stochastic dropping, loss weights.

All three rules are affine maps of the complexity score p in [0, 1]:
    scale  = scale_lo + (scale_hi - scale_lo) * p      (default 0.5 + 0.5 p)
    drop q = drop_hi  - (drop_hi  - drop_lo)  * p      (default 1 - p)
    weight = weight_lo + (weight_hi - weight_lo) * p   (default p)
Higher p always means higher resolution, lower drop probability, higher weight.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

MIN_DIM = 8  # keep the strided encoder valid after downsampling

# Golden-ratio conjugate; Kronecker step for the stratified keep/drop stream.
_WEYL_STEP = (np.sqrt(5.0) - 1.0) / 2.0


class PolicyError(ValueError):
    pass


class DegenerateBatchError(ValueError):
    pass


@dataclass
class SlimPolicy:
    scale_range: tuple = (0.5, 1.0)
    drop_range: tuple = (0.0, 1.0)
    weight_range: tuple = (0.0, 1.0)
    cad: bool = True
    casd: bool = True
    cal: bool = True

    def __post_init__(self):
        lo, hi = self.scale_range
        if not (0.0 < lo <= hi <= 1.0):
            raise PolicyError(f"bad scale_range {self.scale_range}")
        lo, hi = self.drop_range
        if not (0.0 <= lo <= hi <= 1.0):
            raise PolicyError(f"bad drop_range {self.drop_range}")
        lo, hi = self.weight_range
        if not (0.0 <= lo <= hi):
            raise PolicyError(f"bad weight_range {self.weight_range}")

    @classmethod
    def from_config(cls, path) -> "SlimPolicy":
        with open(path) as fh:
            cfg = json.load(fh)
        return cls.from_dict(cfg)

    @classmethod
    def from_dict(cls, cfg: dict) -> "SlimPolicy":
        return cls(
            scale_range=(cfg.get("scale_lo", 0.5), cfg.get("scale_hi", 1.0)),
            drop_range=(cfg.get("drop_lo", 0.0), cfg.get("drop_hi", 1.0)),
            weight_range=(cfg.get("weight_lo", 0.0), cfg.get("weight_hi", 1.0)),
            cad=cfg.get("cad", True), casd=cfg.get("casd", True),
            cal=cfg.get("cal", True))

    def to_dict(self) -> dict:
        return {"scale_lo": self.scale_range[0], "scale_hi": self.scale_range[1],
                "drop_lo": self.drop_range[0], "drop_hi": self.drop_range[1],
                "weight_lo": self.weight_range[0], "weight_hi": self.weight_range[1],
                "cad": self.cad, "casd": self.casd, "cal": self.cal}


@dataclass
class SlimDecision:
    image_id: str
    scale: float
    keep: bool
    weight: float
    target_dims: tuple  # (h, w)


def _check_p(p: float) -> float:
    if not (0.0 <= p <= 1.0):
        raise PolicyError(f"p must lie in [0, 1], got {p}")
    return float(p)


def downsample_scale(p: float, policy: SlimPolicy) -> float:
    p = _check_p(p)
    lo, hi = policy.scale_range
    return lo + (hi - lo) * p


def drop_probability(p: float, policy: SlimPolicy) -> float:
    p = _check_p(p)
    lo, hi = policy.drop_range
    return hi - (hi - lo) * p


def loss_weight(p: float, policy: SlimPolicy) -> float:
    p = _check_p(p)
    lo, hi = policy.weight_range
    return lo + (hi - lo) * p


def keep_draw(seed: int, image_index: int, epoch: int) -> float:
    """Stratified uniform draw for the keep/drop decision.

    Per image the draws over epochs follow a seeded Kronecker (golden-ratio)
    sequence, so each image's empirical keep rate over E epochs tracks its keep
    probability to within the sequence discrepancy, O(log E / E), rather than
    the much larger Bernoulli noise.  Keyed by (seed, image index, epoch), never
    by arrival order, so concurrent batch assembly cannot change the decisions.
    """
    rng = np.random.Generator(np.random.Philox(key=seed, counter=image_index))
    offset = rng.random()
    return float((offset + epoch * _WEYL_STEP) % 1.0)


def decide(image_id: str, p: float, policy: SlimPolicy, u: float,
           dims: tuple) -> SlimDecision:
    """Combine the three rules into one per-sample decision.

    `u` is a uniform [0,1) draw for the keep decision (see keep_draw); `dims`
    is the source (h, w).
    """
    scale = downsample_scale(p, policy) if policy.cad else 1.0
    if policy.casd:
        q = drop_probability(p, policy)
        keep = bool(u >= q)
    else:
        keep = True
    weight = loss_weight(p, policy) if policy.cal else 1.0
    h, w = dims
    # quantize to MIN_DIM multiples: the strided net needs such dims anyway,
    # and snapping here avoids padding resized inputs with dead border pixels
    # (which would pollute batch statistics) while keeping the number of
    # distinct batch shapes small
    th = max(MIN_DIM, int(np.floor(scale * h / MIN_DIM + 0.5)) * MIN_DIM)
    tw = max(MIN_DIM, int(np.floor(scale * w / MIN_DIM + 0.5)) * MIN_DIM)
    return SlimDecision(image_id=image_id, scale=scale, keep=keep,
                        weight=weight, target_dims=(th, tw))


def _interp_weights(n_out: int, n_in: int):
    """1-D bilinear weights, half-pixel-center convention, edge clamped."""
    if n_out < 1:
        raise PolicyError(f"target dimension must be >= 1, got {n_out}")
    centers = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    lo = np.floor(centers).astype(int)
    frac = centers - lo
    hi = np.clip(lo + 1, 0, n_in - 1)
    lo = np.clip(lo, 0, n_in - 1)
    return lo, hi, frac


def resize_image(img: np.ndarray, target_dims: tuple) -> np.ndarray:
    """Bilinear resize with pixel centers at (i + 0.5)/N; identity at same dims."""
    img = np.asarray(img, dtype=np.float64)
    th, tw = target_dims
    h, w = img.shape[:2]
    if (th, tw) == (h, w):
        return img.copy()
    rlo, rhi, rfrac = _interp_weights(th, h)
    clo, chi, cfrac = _interp_weights(tw, w)
    top = img[rlo]
    bot = img[rhi]
    if img.ndim == 3:
        rows = top * (1 - rfrac)[:, None, None] + bot * rfrac[:, None, None]
        out = (rows[:, clo] * (1 - cfrac)[None, :, None]
               + rows[:, chi] * cfrac[None, :, None])
    else:
        rows = top * (1 - rfrac)[:, None] + bot * rfrac[:, None]
        out = rows[:, clo] * (1 - cfrac)[None, :] + rows[:, chi] * cfrac[None, :]
    return out


def resize_labels(labels: np.ndarray, target_dims: tuple) -> np.ndarray:
    """Nearest-neighbor resize for categorical label maps; identity at same dims."""
    labels = np.asarray(labels)
    th, tw = target_dims
    h, w = labels.shape
    if (th, tw) == (h, w):
        return labels.copy()
    if th < 1 or tw < 1:
        raise PolicyError(f"target dims must be >= 1, got {target_dims}")
    rows = np.clip(np.round((np.arange(th) + 0.5) * h / th - 0.5), 0, h - 1).astype(int)
    cols = np.clip(np.round((np.arange(tw) + 0.5) * w / tw - 0.5), 0, w - 1).astype(int)
    return labels[np.ix_(rows, cols)]


def weighted_loss(weights, losses) -> float:
    """Weighted-mean loss: sum(w_i * l_i) / sum(w_i)."""
    w = np.asarray(weights, dtype=np.float64)
    l = np.asarray(losses, dtype=np.float64)
    if w.shape != l.shape or w.size < 1:
        raise PolicyError(f"mismatched weights/losses: {w.shape} vs {l.shape}")
    if np.any(w < 0.0):
        raise PolicyError("weights must be non-negative")
    total = w.sum()
    if total <= 0.0:
        raise DegenerateBatchError("all loss weights are zero; skip this step")
    return float((w * l).sum() / total)
