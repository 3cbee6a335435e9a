"""Maxwell-Boltzmann fit of corpus complexity values and the CDF transform to p."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .complexity import SpatialComplexity

_SQRT_2_OVER_PI = np.sqrt(2.0 / np.pi)


class FitError(ValueError):
    pass


class DomainError(ValueError):
    pass


def erf(x):
    """Error function via its Maclaurin series.

    erf(x) = 2/sqrt(pi) * sum_{n>=0} (-1)^n x^(2n+1) / (n! (2n+1)).
    The series is summed to machine convergence for |x| < 4; beyond that
    erfc(|x|) < 1.6e-8, so +/-1 is returned.  Worst-case error (cancellation
    plus the cutoff) stays below 2e-8, well inside the 1e-7 budget.
    """
    x = np.asarray(x, dtype=np.float64)
    scalar = x.ndim == 0
    x = np.atleast_1d(x)
    out = np.sign(x).astype(np.float64)
    small = np.abs(x) < 4.0
    xs = x[small]
    term = xs.copy()
    total = term.copy()
    for n in range(1, 60):
        term = term * (-(xs * xs)) / n
        total = total + term / (2 * n + 1)
    out[small] = (2.0 / np.sqrt(np.pi)) * total
    np.clip(out, -1.0, 1.0, out=out)
    return float(out[0]) if scalar else out


def maxwell_pdf(x, a: float):
    x = np.asarray(x, dtype=np.float64)
    return _SQRT_2_OVER_PI * x ** 2 * np.exp(-x ** 2 / (2.0 * a ** 2)) / a ** 3


def maxwell_cdf(x, a: float):
    """F(x; a) = erf(x / (sqrt(2) a)) - sqrt(2/pi) (x/a) exp(-x^2 / (2 a^2))."""
    if a <= 0.0:
        raise DomainError(f"scale parameter must be positive, got {a}")
    x_arr = np.asarray(x, dtype=np.float64)
    if np.any(x_arr < 0.0):
        raise DomainError("maxwell_cdf requires x >= 0")
    z = x_arr / a
    val = erf(z / np.sqrt(2.0)) - _SQRT_2_OVER_PI * z * np.exp(-z * z / 2.0)
    val = np.clip(val, 0.0, 1.0)
    return float(val) if np.ndim(x) == 0 else val


@dataclass
class MaxwellFit:
    scale_a: float
    n_samples: int
    ks_stat: float

    def cdf(self, x):
        return maxwell_cdf(x, self.scale_a)


def fit_maxwell(samples) -> MaxwellFit:
    """Closed-form MLE of the Maxwell scale: a = sqrt(sum x_i^2 / (3n))."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 1 or x.size < 2:
        raise FitError(f"need at least 2 samples, got {x.size}")
    if np.any(x <= 0.0):
        raise FitError("all samples must be strictly positive")
    a = float(np.sqrt(np.sum(x * x) / (3.0 * x.size)))
    ks = _ks_distance(x, a)
    return MaxwellFit(scale_a=a, n_samples=int(x.size), ks_stat=ks)


def _ks_distance(samples: np.ndarray, a: float) -> float:
    """Sup distance between the empirical CDF of `samples` and Maxwell(a)."""
    x = np.sort(samples)
    n = x.size
    f = maxwell_cdf(x, a)
    upper = np.arange(1, n + 1) / n - f
    lower = f - np.arange(0, n) / n
    return float(max(upper.max(), lower.max()))


def complexity_to_p(sc: SpatialComplexity | float, fit: MaxwellFit) -> float:
    if fit is None:
        raise FitError("complexity index has no fitted distribution")
    sc_mean = sc.sc_mean if isinstance(sc, SpatialComplexity) else float(sc)
    return float(maxwell_cdf(sc_mean, fit.scale_a))


@dataclass
class IndexEntry:
    image_id: str
    sc_mean: float
    p: float
    split: str = "train"
    path: str = ""


@dataclass
class ComplexityIndex:
    """Per-image complexity scores plus the training-split Maxwell fit."""
    fit: MaxwellFit
    entries: list[IndexEntry] = field(default_factory=list)

    def p_of(self, image_id: str) -> float:
        return self._by_id[image_id].p

    def __post_init__(self):
        self._by_id = {e.image_id: e for e in self.entries}
        if len(self._by_id) != len(self.entries):
            raise FitError("duplicate image ids in complexity index")


def build_index(corpus, paths=None) -> ComplexityIndex:
    """Fit on the training split only; assign p to every split with that fit.

    `corpus` iterates over (image_id, sc_mean, split) triples; sc_mean may also
    be a SpatialComplexity.  `paths` optionally maps image_id -> file path for
    the persisted manifest.
    """
    rows = []
    for image_id, sc, split in corpus:
        sc_mean = sc.sc_mean if isinstance(sc, SpatialComplexity) else float(sc)
        rows.append((str(image_id), sc_mean, split))
    train_sc = [sc for _, sc, split in rows if split == "train"]
    if not train_sc:
        raise FitError("empty training split")
    fit = fit_maxwell(train_sc)
    paths = paths or {}
    entries = [
        IndexEntry(image_id=i, sc_mean=sc, p=complexity_to_p(sc, fit),
                   split=split, path=paths.get(i, ""))
        for i, sc, split in rows
    ]
    return ComplexityIndex(fit=fit, entries=entries)


def _fmt(x: float) -> float:
    # round-trip-stable serialization: 17 significant digits
    return float(f"{x:.17g}")


def save_index(index: ComplexityIndex, path) -> None:
    """JSON-lines manifest: one header record, then one record per image."""
    with open(path, "w") as fh:
        header = {"scale_a": _fmt(index.fit.scale_a),
                  "n_samples": index.fit.n_samples,
                  "ks_stat": _fmt(index.fit.ks_stat)}
        fh.write(json.dumps(header) + "\n")
        for e in index.entries:
            fh.write(json.dumps({"id": e.image_id, "path": e.path,
                                 "split": e.split,
                                 "sc_mean": _fmt(e.sc_mean),
                                 "p": _fmt(e.p)}) + "\n")


def load_index(path) -> ComplexityIndex:
    with open(path) as fh:
        lines = [json.loads(line) for line in fh if line.strip()]
    if not lines:
        raise FitError(f"empty index file: {path}")
    header, records = lines[0], lines[1:]
    fit = MaxwellFit(scale_a=header["scale_a"], n_samples=header["n_samples"],
                     ks_stat=header["ks_stat"])
    entries = [IndexEntry(image_id=r["id"], sc_mean=r["sc_mean"], p=r["p"],
                          split=r.get("split", "train"), path=r.get("path", ""))
               for r in records]
    return ComplexityIndex(fit=fit, entries=entries)
