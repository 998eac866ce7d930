"""Decision rules: construction, affineness and Lipschitz analysis, composition.

A rule maps stochastic vectors to an acceptance probability. Every rule
evaluates batches: ``accept`` takes an array of shape ``(..., k)`` and
returns shape ``(...)``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Any, Callable, Sequence

import numpy as np

from .core import (
    LossFunction,
    Predictor,
    RandomStream,
    ValidationError,
    loss_min_accept,
    project_rows,
)
from .metrics import ActionFunction


class DecisionRule:
    """Base class. Subclasses set ``kind`` and ``k`` and implement ``_accept``."""

    kind: str = "custom"
    k: int

    def accept(self, y: np.ndarray | Sequence[float]) -> np.ndarray:
        arr = np.asarray(y, dtype=float)
        if arr.shape[-1] != self.k:
            raise ValidationError(f"rule expects {self.k} types, got vectors of length {arr.shape[-1]}")
        return np.asarray(self._accept(arr), dtype=float)

    def __call__(self, y: np.ndarray | Sequence[float]) -> float | np.ndarray:
        out = self.accept(y)
        return float(out) if out.ndim == 0 else out

    def _accept(self, y: np.ndarray) -> np.ndarray:  # pragma: no cover - abstract
        raise NotImplementedError

    def to_dict(self) -> dict[str, Any]:
        return table_rule(self, 10).to_dict()


class ITARule(DecisionRule):
    """Instantiate-then-act: draw ``t ~ y`` and accept with probability ``g[t]``."""

    kind = "ita"

    def __init__(self, g: Sequence[float]) -> None:
        g = np.asarray(g, dtype=float).reshape(-1)
        if g.size < 2 or not np.all(np.isfinite(g)) or np.any(g < 0) or np.any(g > 1):
            raise ValidationError("ITA acceptance probabilities must lie in [0, 1]")
        g.setflags(write=False)
        self.g = g
        self.k = int(g.size)

    def _accept(self, y: np.ndarray) -> np.ndarray:
        return y @ self.g

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "g": [float(v) for v in self.g]}

    def __repr__(self) -> str:
        return f"ITARule(g={self.g.tolist()})"


class ThresholdRule(ITARule):
    """Accepts the ``cutoff`` best ranks (type indices ``0..cutoff-1``)."""

    kind = "threshold"

    def __init__(self, cutoff: int, k: int) -> None:
        if not 0 <= cutoff <= k:
            raise ValidationError("rank cutoff must lie in [0, k]")
        super().__init__((np.arange(k) < cutoff).astype(float))
        self.cutoff = int(cutoff)

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "cutoff": self.cutoff, "k": self.k}

    def __repr__(self) -> str:
        return f"ThresholdRule(cutoff={self.cutoff}, k={self.k})"


class LossMinRule(DecisionRule):
    """Accept iff accepting has strictly lower expected loss; ties reject."""

    kind = "loss-min"

    def __init__(self, loss: LossFunction) -> None:
        self.loss = loss
        self.k = loss.k

    def _accept(self, y: np.ndarray) -> np.ndarray:
        return loss_min_accept(self.loss, y)

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "loss": self.loss.table.tolist()}


class CoordinateThresholdRule(DecisionRule):
    """Deterministic rule accepting iff ``y[t] >= level``."""

    kind = "coordinate-threshold"

    def __init__(self, t: int, level: float, k: int) -> None:
        if not 0 <= t < k:
            raise ValidationError("type index out of range")
        self.t, self.level, self.k = int(t), float(level), int(k)

    def _accept(self, y: np.ndarray) -> np.ndarray:
        return (y[..., self.t] >= self.level).astype(float)

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "type": self.t, "level": self.level, "k": self.k}


class CustomRule(DecisionRule):
    """Wraps a vectorized callable. Serializes as a grid table."""

    kind = "custom"

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray], k: int, name: str = "custom") -> None:
        self.fn, self.k, self.name = fn, int(k), name

    def _accept(self, y: np.ndarray) -> np.ndarray:
        out = np.asarray(self.fn(y), dtype=float)
        if np.any(out < -1e-12) or np.any(out > 1 + 1e-12):
            raise ValidationError(f"rule {self.name!r} returned a probability outside [0, 1]")
        return np.clip(out, 0.0, 1.0)

    def __repr__(self) -> str:
        return f"CustomRule({self.name!r}, k={self.k})"


class TableRule(DecisionRule):
    """A rule known only on the step-``1/m`` simplex lattice.

    Off-lattice inputs use the value of a nearby lattice point (largest
    remainder rounding); nothing is interpolated.
    """

    kind = "table"

    def __init__(self, k: int, m: int, values: dict[tuple[int, ...], float]) -> None:
        self.k, self.m = int(k), int(m)
        self.values = dict(values)
        if len(self.values) != math.comb(self.m + self.k - 1, self.k - 1):
            raise ValidationError("table must list every lattice point exactly once")

    def _accept(self, y: np.ndarray) -> np.ndarray:
        flat = y.reshape(-1, self.k)
        out = np.array([self.values[_round_to_lattice(row, self.m)] for row in flat])
        return out.reshape(y.shape[:-1])

    def to_dict(self) -> dict[str, Any]:
        pts = sorted(self.values)
        return {
            "kind": self.kind,
            "k": self.k,
            "m": self.m,
            "points": [list(p) for p in pts],
            "values": [self.values[p] for p in pts],
            "note": "values are exact only on lattice points; other inputs use a nearby lattice point",
        }


def _round_to_lattice(y: np.ndarray, m: int) -> tuple[int, ...]:
    scaled = np.asarray(y, dtype=float) * m
    base = np.floor(scaled + 1e-9).astype(int)
    short = m - int(base.sum())
    if short > 0:
        order = np.argsort(-(scaled - base), kind="stable")
        base[order[:short]] += 1
    return tuple(int(v) for v in base)


def table_rule(rule: DecisionRule, m: int) -> TableRule:
    pts = simplex_lattice(rule.k, m)
    vals = rule.accept(pts)
    return TableRule(rule.k, m, {tuple(int(round(v * m)) for v in p): float(a) for p, a in zip(pts, vals)})


def rule_from_dict(doc: dict[str, Any]) -> DecisionRule:
    kind = doc.get("kind")
    if kind == "ita":
        return ITARule(doc["g"])
    if kind == "threshold":
        return ThresholdRule(int(doc["cutoff"]), int(doc["k"]))
    if kind == "loss-min":
        return LossMinRule(LossFunction(np.asarray(doc["loss"], dtype=float)))
    if kind == "coordinate-threshold":
        return CoordinateThresholdRule(int(doc["type"]), float(doc["level"]), int(doc["k"]))
    if kind == "table":
        vals = {tuple(int(v) for v in p): float(a) for p, a in zip(doc["points"], doc["values"])}
        return TableRule(int(doc["k"]), int(doc["m"]), vals)
    raise ValidationError(f"unknown rule kind {kind!r}")


# ---------------------------------------------------------------------------
# Constructors
# ---------------------------------------------------------------------------


def ita_rule(g: Sequence[float]) -> ITARule:
    return ITARule(g)


def loss_min_rule(loss: LossFunction) -> LossMinRule:
    return LossMinRule(loss)


def mac_rule(loss: LossFunction) -> ITARule:
    """The ITA rule that copies the loss-minimizing rule on unit vectors."""
    return ITARule(loss_min_accept(loss, np.eye(loss.k)))


def affine_projection(rule: DecisionRule) -> ITARule:
    return ITARule(rule.accept(np.eye(rule.k)))


def hard_threshold_rule(t: int = 0, level: float = 0.95, k: int = 2) -> CoordinateThresholdRule:
    return CoordinateThresholdRule(t, level, k)


def compose(rule: DecisionRule, pred: Predictor) -> ActionFunction:
    return ActionFunction(rule.accept(pred.probs))


def random_instantiation(pred: Predictor, rng: RandomStream) -> Predictor:
    """Replaces every prediction by a unit vector drawn from it.

    Element ``x`` uses the ``x``-th uniform of the ``"instantiate"``
    substream, so each draw depends only on the seed and the element.
    """
    u = rng.substream("instantiate").random(pred.size)
    cdf = np.cumsum(pred.probs, axis=1)
    cdf[:, -1] = 1.0
    t = (cdf <= u[:, None]).sum(axis=1)
    # A zero-probability type can only be hit through cdf rounding.
    zero = pred.probs[np.arange(pred.size), t] == 0.0
    for x in np.flatnonzero(zero):
        t[x] = int(np.flatnonzero(pred.probs[x] > 0)[-1])
    return Predictor(np.eye(pred.k)[t])


# ---------------------------------------------------------------------------
# Affineness and Lipschitz analysis
# ---------------------------------------------------------------------------


def simplex_lattice(k: int, m: int) -> np.ndarray:
    """All points of the simplex with coordinates in ``{0, 1/m, ..., 1}``."""
    pts = []
    for bars in itertools.combinations(range(m + k - 1), k - 1):
        prev, parts = -1, []
        for b in bars:
            parts.append(b - prev - 1)
            prev = b
        parts.append(m + k - 1 - prev - 1)
        pts.append(parts)
    return np.asarray(pts, dtype=float) / m


def mixing_weights(m: int) -> np.ndarray:
    return np.unique(np.concatenate([np.arange(1, m) / m, [0.5]]))


def violation(rule: DecisionRule, y: Sequence[float], y2: Sequence[float], gamma: float) -> float:
    """``|f(gamma y + (1-gamma) y2) - gamma f(y) - (1-gamma) f(y2)|``."""
    y, y2 = np.asarray(y, dtype=float), np.asarray(y2, dtype=float)
    mix = gamma * y + (1 - gamma) * y2
    f = rule.accept(np.stack([y, y2, mix]))
    return float(abs(f[2] - gamma * f[0] - (1 - gamma) * f[1]))


@dataclass(frozen=True)
class AffinenessCertificate:
    """A lower bound on the distance of a rule from the affine rules."""

    epsilon: float
    y: tuple[float, ...]
    y2: tuple[float, ...]
    gamma: float
    resolution: int

    def replay(self, rule: DecisionRule) -> float:
        return violation(rule, self.y, self.y2, self.gamma)

    def to_dict(self) -> dict[str, Any]:
        return {
            "epsilon": self.epsilon,
            "witness": {"y": list(self.y), "y2": list(self.y2), "gamma": self.gamma},
            "resolution": self.resolution,
        }


LATTICE_MAX_K = 4


def _probe_points(k: int, m: int, seed: int) -> tuple[np.ndarray, np.ndarray | None]:
    """Lattice points (small k) or random pairs (large k), plus unit vectors."""
    eye = np.eye(k)
    if k <= LATTICE_MAX_K:
        return np.unique(np.vstack([eye, simplex_lattice(k, m)]), axis=0), None
    rng = RandomStream(seed, f"affineness/k{k}/m{m}").generator
    n = 10 * m * m
    a = rng.dirichlet(np.ones(k), size=n)
    b = rng.dirichlet(np.ones(k), size=n)
    return eye, np.stack([a, b], axis=1)


def affineness_distance(rule: DecisionRule, m: int = 10, seed: int = 0) -> AffinenessCertificate:
    """Largest affineness violation found on the probe grid, with its witness.

    For ``k <= 4`` every pair of step-``1/m`` lattice points is probed; for
    larger ``k`` ``10 m^2`` seeded random pairs are probed. All unit-vector
    pairs are always included. Mixing weights are ``j/m`` and ``1/2``.
    """
    if m < 2:
        raise ValidationError("resolution must be at least 2")
    k = rule.k
    points, pairs = _probe_points(k, m, seed)
    gammas = mixing_weights(m)
    best = (-1.0, None, None, None)

    def scan(a: np.ndarray, b: np.ndarray) -> None:
        nonlocal best
        fa, fb = rule.accept(a), rule.accept(b)
        for gamma in gammas:
            mix = gamma * a + (1 - gamma) * b
            v = np.abs(rule.accept(mix) - gamma * fa - (1 - gamma) * fb)
            i = int(np.argmax(v))
            if v[i] > best[0] + 1e-15:
                best = (float(v[i]), a[i], b[i], float(gamma))

    # Unit-vector pairs first, so that ties keep the simplest witness.
    ii, jj = np.meshgrid(np.arange(k), np.arange(k), indexing="ij")
    eye = np.eye(k)
    scan(eye[ii.ravel()], eye[jj.ravel()])
    if pairs is None:
        p = len(points)
        ii, jj = np.meshgrid(np.arange(p), np.arange(p), indexing="ij")
        ii, jj = ii.ravel(), jj.ravel()
        for start in range(0, ii.size, 200_000):
            sl = slice(start, start + 200_000)
            scan(points[ii[sl]], points[jj[sl]])
    else:
        scan(pairs[:, 0], pairs[:, 1])
    eps, y, y2, gamma = best
    return AffinenessCertificate(max(eps, 0.0), tuple(map(float, y)), tuple(map(float, y2)), gamma, m)


def _max_ratio(rule: DecisionRule, points: np.ndarray) -> float:
    f = rule.accept(points)
    best = 0.0
    for start in range(0, len(points), 256):
        blk = points[start : start + 256]
        dist = np.abs(blk[:, None, :] - points[None, :, :]).max(axis=2)
        diff = np.abs(f[start : start + 256, None] - f[None, :])
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(dist > 0, diff / np.where(dist > 0, dist, 1.0), 0.0)
        best = max(best, float(ratio.max()))
    return best


def _near_pairs_ratio(rule: DecisionRule, k: int, m: int, seed: int) -> float:
    rng = RandomStream(seed, f"lipschitz/k{k}/m{m}").generator
    n = 10 * m * m
    a = rng.dirichlet(np.ones(k), size=n)
    step = np.zeros_like(a)
    i = rng.integers(0, k, size=n)
    j = (i + rng.integers(1, k, size=n)) % k
    step[np.arange(n), i] += 1.0 / m
    step[np.arange(n), j] -= 1.0 / m
    b = project_rows(a + step)
    pts = np.vstack([np.eye(k), a, b])
    f = rule.accept(pts)
    e = len(np.eye(k))
    fa, fb = f[e : e + n], f[e + n :]
    dist = np.abs(a - b).max(axis=1)
    ratio = np.where(dist > 0, np.abs(fa - fb) / np.where(dist > 0, dist, 1.0), 0.0)
    return max(float(ratio.max()), _max_ratio(rule, np.eye(k)))


def lipschitz_estimate(rule: DecisionRule, m: int = 10, seed: int = 0) -> float:
    """Largest ratio ``|f(y) - f(y')| / ||y - y'||_inf`` over probe pairs.

    The probe is repeated at resolution ``2m``. If halving the probe spacing
    raises the estimate by more than half, the rule is treated as having a
    jump and ``math.inf`` is returned (no finite certificate).
    """
    if m < 2:
        raise ValidationError("resolution must be at least 2")
    k = rule.k
    if k <= LATTICE_MAX_K:
        coarse = _max_ratio(rule, simplex_lattice(k, m))
        fine = _max_ratio(rule, simplex_lattice(k, 2 * m))
    else:
        coarse = _near_pairs_ratio(rule, k, m, seed)
        fine = _near_pairs_ratio(rule, k, 2 * m, seed)
    if fine > 1.5 * coarse + 1e-9:
        return math.inf
    return max(coarse, fine)
