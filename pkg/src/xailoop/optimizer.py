"""Gaussian-process Bayesian optimization with Expected Improvement.

The search space mixes linear, log10 and integral dimensions; internally
everything lives on the unit cube. The surrogate is a zero-mean GP with a
Matern-5/2 kernel and fixed hyperparameters, fit by Cholesky with jitter
escalation; candidates come from a seeded scrambled Sobol set plus local
perturbations of the incumbent, so suggestions are reproducible bit-for-bit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.stats import norm, qmc

from .errors import BadParameter, NumericalFailure, OutOfBounds

HyperparamPoint = dict[str, float | int]


@dataclass(frozen=True)
class Dimension:
    name: str
    lower: float
    upper: float
    scale: str = "linear"  # "linear" | "log10"
    integral: bool = False

    def __post_init__(self):
        if self.lower >= self.upper:
            raise BadParameter(f"{self.name}: lower must be < upper")
        if self.scale not in ("linear", "log10"):
            raise BadParameter(f"{self.name}: unknown scale {self.scale!r}")
        if self.scale == "log10" and self.lower <= 0:
            raise BadParameter(f"{self.name}: log10 scale requires lower > 0")

    def _to_scale(self, v: float) -> float:
        return math.log10(v) if self.scale == "log10" else v

    def _from_scale(self, s: float) -> float:
        return 10.0**s if self.scale == "log10" else s


@dataclass(frozen=True)
class HyperparamSpace:
    dimensions: tuple[Dimension, ...]

    def __post_init__(self):
        object.__setattr__(self, "dimensions", tuple(self.dimensions))

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(d.name for d in self.dimensions)

    def __len__(self) -> int:
        return len(self.dimensions)

    def to_json_dict(self) -> dict:
        return {
            "dimensions": [
                {
                    "name": d.name,
                    "lower": d.lower,
                    "upper": d.upper,
                    "scale": d.scale,
                    "integral": d.integral,
                }
                for d in self.dimensions
            ]
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "HyperparamSpace":
        return cls(
            tuple(
                Dimension(
                    name=d["name"],
                    lower=float(d["lower"]),
                    upper=float(d["upper"]),
                    scale=d.get("scale", "linear"),
                    integral=bool(d.get("integral", False)),
                )
                for d in doc["dimensions"]
            )
        )


def default_space() -> HyperparamSpace:
    """Canonical search ranges for the three tuned hyperparameters."""
    return HyperparamSpace(
        (
            Dimension("dropout", 0.05, 0.5, "linear", False),
            Dimension("learningRate", 1e-5, 0.1, "log10", False),
            Dimension("batchSize", 1, 32, "linear", True),
        )
    )


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def normalize(space: HyperparamSpace, point: HyperparamPoint) -> np.ndarray:
    out = np.empty(len(space))
    for i, d in enumerate(space.dimensions):
        v = float(point[d.name])
        if v < d.lower - 1e-12 or v > d.upper + 1e-12:
            raise OutOfBounds(f"{d.name}={v} outside [{d.lower}, {d.upper}]")
        lo, hi = d._to_scale(d.lower), d._to_scale(d.upper)
        out[i] = (d._to_scale(v) - lo) / (hi - lo)
    return np.clip(out, 0.0, 1.0)


def denormalize(space: HyperparamSpace, vec: np.ndarray) -> HyperparamPoint:
    point: HyperparamPoint = {}
    for i, d in enumerate(space.dimensions):
        u = float(np.clip(vec[i], 0.0, 1.0))
        lo, hi = d._to_scale(d.lower), d._to_scale(d.upper)
        v = d._from_scale(lo + u * (hi - lo))
        if d.integral:
            iv = _round_half_up(v)
            iv = max(math.ceil(d.lower - 1e-9), min(math.floor(d.upper + 1e-9), iv))
            point[d.name] = int(iv)
        else:
            point[d.name] = min(max(v, d.lower), d.upper)
    return point


@dataclass
class GPState:
    """Immutable posterior state of the fitted surrogate."""

    x: np.ndarray  # (n, d) normalized inputs
    y: np.ndarray  # (n,) raw targets
    y_mean: float
    length_scales: np.ndarray  # (d,)
    signal_variance: float
    noise_variance: float
    chol: np.ndarray
    alpha: np.ndarray  # K^-1 (y - mean)

    @property
    def best(self) -> float:
        return float(self.y.max())


def _matern52(x1: np.ndarray, x2: np.ndarray, length_scales: np.ndarray) -> np.ndarray:
    diff = (x1[:, None, :] - x2[None, :, :]) / length_scales
    r = np.sqrt((diff**2).sum(axis=-1))
    sr = math.sqrt(5.0) * r
    return (1.0 + sr + sr**2 / 3.0) * np.exp(-sr)


def gp_fit(
    x: np.ndarray,
    y: np.ndarray,
    length_scales: float | Sequence[float] = 0.3,
    signal_variance: float = 1.0,
    noise_variance: float = 1e-4,
) -> GPState:
    """Fit the zero-mean GP (targets centered internally)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).ravel()
    if len(x) < 1 or len(x) != len(y):
        raise BadParameter("need >= 1 observation with matching x and y counts")
    d = x.shape[1]
    ls = np.full(d, float(length_scales)) if np.isscalar(length_scales) else np.asarray(
        length_scales, dtype=np.float64
    )
    y_mean = float(y.mean())
    k = signal_variance * _matern52(x, x, ls)
    base_noise = noise_variance
    jitter = 0.0
    while True:
        try:
            chol = cho_factor(k + (base_noise + jitter) * np.eye(len(x)), lower=True)
            break
        except np.linalg.LinAlgError:
            jitter = 1e-10 if jitter == 0.0 else jitter * 10.0
            if jitter > 1e-4:
                raise NumericalFailure("Cholesky failed after jitter escalation") from None
    alpha = cho_solve(chol, y - y_mean)
    return GPState(
        x=x,
        y=y,
        y_mean=y_mean,
        length_scales=ls,
        signal_variance=signal_variance,
        noise_variance=base_noise + jitter,
        chol=chol[0],
        alpha=alpha,
    )


def gp_posterior(state: GPState, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and variance at query points (n, d) or (d,)."""
    xq = np.atleast_2d(np.asarray(x, dtype=np.float64))
    ks = state.signal_variance * _matern52(xq, state.x, state.length_scales)  # (q, n)
    mean = state.y_mean + ks @ state.alpha
    solved = cho_solve((state.chol, True), ks.T)  # (n, q)
    var = state.signal_variance - np.einsum("qn,nq->q", ks, solved)
    var = np.maximum(var, 1e-12)
    if np.ndim(x) == 1:
        return float(mean[0]), float(var[0])
    return mean, var


def expected_improvement(
    mean: np.ndarray | float,
    variance: np.ndarray | float,
    best_so_far: float,
    xi: float = 0.0,
) -> np.ndarray | float:
    """Closed-form EI for maximization; exact max(0, gap) when sigma = 0."""
    mean_a = np.asarray(mean, dtype=np.float64)
    var_a = np.asarray(variance, dtype=np.float64)
    sigma = np.sqrt(np.maximum(var_a, 0.0))
    gap = mean_a - best_so_far - xi
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(sigma > 0, gap / np.where(sigma > 0, sigma, 1.0), 0.0)
        ei = np.where(
            sigma > 0,
            gap * norm.cdf(z) + sigma * norm.pdf(z),
            np.maximum(gap, 0.0),
        )
    ei = np.maximum(ei, 0.0)
    if np.isscalar(mean) and np.isscalar(variance):
        return float(ei)
    return ei


def sobol_points(d: int, n: int, seed: int) -> np.ndarray:
    """n scrambled low-discrepancy points in the unit cube."""
    sampler = qmc.Sobol(d, scramble=True, seed=seed)
    pow2 = 1 << max(0, math.ceil(math.log2(max(n, 1))))
    return sampler.random_base2(int(math.log2(pow2)))[:n]


def _snap_unit(space: HyperparamSpace, u: np.ndarray) -> np.ndarray:
    """Map unit-cube rows onto their evaluable grid (integral rounding)."""
    out = np.clip(u, 0.0, 1.0).copy()
    for i, d in enumerate(space.dimensions):
        if not d.integral:
            continue
        lo, hi = d._to_scale(d.lower), d._to_scale(d.upper)
        v = np.array([d._from_scale(s) for s in lo + out[:, i] * (hi - lo)])
        iv = np.clip(
            np.floor(v + 0.5), math.ceil(d.lower - 1e-9), math.floor(d.upper + 1e-9)
        )
        out[:, i] = (np.array([d._to_scale(x) for x in iv]) - lo) / (hi - lo)
    return out


def suggest_next(
    state: GPState | None,
    space: HyperparamSpace,
    rng: np.random.Generator | int,
    candidates: int = 4096,
    xi: float = 0.01,
    local_perturbations: int = 64,
) -> HyperparamPoint:
    """Argmax-EI over a seeded candidate scan (ties -> lowest index)."""
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    d = len(space)
    if state is None or len(state.y) == 0:
        return denormalize(space, rng.uniform(0.0, 1.0, size=d))
    cand = sobol_points(d, candidates, seed=int(rng.integers(2**31)))
    incumbent = state.x[int(np.argmax(state.y))]
    local = np.clip(
        incumbent[None, :] + rng.normal(0.0, 0.05, size=(local_perturbations, d)),
        0.0,
        1.0,
    )
    cand = np.vstack([cand, local])
    # snap to evaluable points so EI is scored where the trial will run
    snapped = _snap_unit(space, cand)
    mean, var = gp_posterior(state, snapped)
    ei = expected_improvement(mean, var, state.best, xi)
    return denormalize(space, snapped[int(np.argmax(ei))])


def shrink_space(
    space: HyperparamSpace, incumbent: HyperparamPoint, factor: float
) -> HyperparamSpace:
    """Recenter each dimension on the incumbent at factor x old width.

    Bounds are clipped to the old ones (no re-centering after the clip);
    integral dimensions keep integer bounds and at least unit width.
    Factor 1 means "do not shrink" and leaves the space untouched.
    """
    if not 0.0 < factor <= 1.0:
        raise BadParameter(f"shrink factor must be in (0, 1], got {factor}")
    if factor == 1.0:
        for d in space.dimensions:
            v = float(incumbent[d.name])
            if v < d.lower - 1e-9 or v > d.upper + 1e-9:
                raise OutOfBounds(f"incumbent {d.name}={v} outside the space")
        return space
    dims = []
    for d in space.dimensions:
        v = float(incumbent[d.name])
        if v < d.lower - 1e-9 or v > d.upper + 1e-9:
            raise OutOfBounds(f"incumbent {d.name}={v} outside the space")
        lo_s, hi_s = d._to_scale(d.lower), d._to_scale(d.upper)
        half = factor * (hi_s - lo_s) / 2.0
        c = d._to_scale(v)
        new_lo = d._from_scale(max(lo_s, c - half))
        new_hi = d._from_scale(min(hi_s, c + half))
        if d.integral:
            ilo = max(math.ceil(d.lower - 1e-9), _round_half_up(new_lo))
            ihi = min(math.floor(d.upper + 1e-9), _round_half_up(new_hi))
            iv = _round_half_up(v)
            ilo, ihi = min(ilo, iv), max(ihi, iv)
            if ihi - ilo < 1:
                if ihi < d.upper - 1e-9:
                    ihi += 1
                else:
                    ilo -= 1
            dims.append(replace(d, lower=float(ilo), upper=float(ihi)))
        else:
            dims.append(replace(d, lower=new_lo, upper=new_hi))
    return HyperparamSpace(tuple(dims))


@dataclass
class TrialRecord:
    """One evaluated hyperparameter point with its training outcome."""

    index: int
    iteration: int
    point: HyperparamPoint
    accuracy: float
    f1: float
    loss: float | None
    model_ref: str | None = None
    mean_grade: float | None = None
    diverged: bool = False

    @property
    def objective(self) -> float:
        return 0.0 if self.diverged else self.accuracy

    def to_json_dict(self) -> dict:
        return {
            "index": self.index,
            "iteration": self.iteration,
            "point": dict(self.point),
            "accuracy": self.accuracy,
            "f1": self.f1,
            "loss": self.loss,
            "modelRef": self.model_ref,
            "meanGrade": self.mean_grade,
            "diverged": self.diverged,
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "TrialRecord":
        return cls(
            index=int(doc["index"]),
            iteration=int(doc["iteration"]),
            point=dict(doc["point"]),
            accuracy=float(doc["accuracy"]),
            f1=float(doc["f1"]),
            loss=None if doc.get("loss") is None else float(doc["loss"]),
            model_ref=doc.get("modelRef"),
            mean_grade=doc.get("meanGrade"),
            diverged=bool(doc.get("diverged", False)),
        )


def _sort_key(trial: TrialRecord) -> tuple:
    loss = trial.loss if trial.loss is not None else math.inf
    return (-trial.accuracy, loss, trial.index)


def select_top_by_accuracy(trials: Sequence[TrialRecord], n: int) -> list[TrialRecord]:
    """Best n by accuracy; ties by lower loss, then earlier trial index."""
    if n < 1:
        raise BadParameter(f"n must be >= 1, got {n}")
    return sorted(trials, key=_sort_key)[:n]


class BoLoop:
    """Ask/tell driver: seeded quasi-random warmup, then EI suggestions."""

    def __init__(
        self,
        space: HyperparamSpace,
        seed: int,
        initial_design: int = 5,
        xi: float = 0.01,
        candidates: int = 4096,
    ):
        self.space = space
        self.seed = int(seed)
        self.xi = xi
        self.candidates = candidates
        self._init_points = sobol_points(len(space), initial_design, seed=self.seed)
        self._x: list[np.ndarray] = []
        self._y: list[float] = []

    def ask(self) -> HyperparamPoint:
        t = len(self._x)
        if t < len(self._init_points):
            return denormalize(self.space, self._init_points[t])
        state = gp_fit(np.array(self._x), np.array(self._y))
        rng = np.random.default_rng((self.seed, t))
        return suggest_next(
            state, self.space, rng, candidates=self.candidates, xi=self.xi
        )

    def tell(self, point: HyperparamPoint, objective: float) -> None:
        self._x.append(normalize(self.space, point))
        self._y.append(float(objective))

    @property
    def best_point(self) -> HyperparamPoint | None:
        if not self._y:
            return None
        return denormalize(self.space, self._x[int(np.argmax(self._y))])
