"""Audit-and-update learners, omniprediction and the scalar relaxations.

The learners repeatedly audit the current predictor, take the worst violated
constraint and patch the predictor on that constraint's members. Elements
that share group memberships, nature and starting prediction receive
identical updates, so the loops run on these equivalence classes ("atoms")
and expand the result at the end. Success is always re-audited exactly on
the full population.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Any, Sequence

import numpy as np

from .core import (
    Discretization,
    GroupCollection,
    LossFunction,
    Nature,
    Population,
    Predictor,
    RandomStream,
    TypeSpace,
    ValidationError,
    loss_min_accept,
    project_rows,
    sample_types,
)
from .metrics import (
    TIE_BREAK_TOL,
    ActionFunction,
    Constraint,
    _sort_key,
    cell_gaps,
    class_from_groups,
    loss_gap,
    ma_error,
    ma_gaps,
    mc_cw_error,
    mc_full_error,
    realized_cells,
)
from .rules import compose, loss_min_rule

MODES = ("ma-cw", "ma-threshold", "mc-cw", "mc-full", "scalar-mc")


@dataclass(frozen=True)
class LearnerConfig:
    """Learner parameters.

    ``eta`` defaults to ``alpha / 2`` and ``max_iter`` to
    ``ceil(64 log(k + 1) / alpha^2)``. ``step`` is ``"fixed"`` (add
    ``eta``) or ``"residual"`` (move the patched set by its average
    residual); scalar mode defaults to ``"residual"``. ``sample_size``
    switches coordinate-wise multi-accuracy audits to Monte-Carlo estimates;
    the final exact audit still decides success.
    """

    alpha: float
    lam: float | None = None
    eta: float | None = None
    max_iter: int | None = None
    mode: str = "ma-cw"
    seed: int = 0
    step: str | None = None
    sample_size: int | None = None

    def __post_init__(self) -> None:
        if not 0 < self.alpha < 1:
            raise ValidationError("alpha must lie in (0, 1)")
        if self.mode not in MODES:
            raise ValidationError(f"unknown learner mode {self.mode!r}")
        if self.eta is not None and not self.eta > 0:
            raise ValidationError("eta must be positive")
        if self.max_iter is not None and self.max_iter < 1:
            raise ValidationError("max_iter must be at least 1")
        if self.mode in ("mc-cw", "mc-full", "scalar-mc") and self.lam is None:
            raise ValidationError(f"mode {self.mode!r} needs a discretization step lam")
        if self.lam is not None:
            Discretization(self.lam)
        if self.step not in (None, "fixed", "residual"):
            raise ValidationError("step must be 'fixed' or 'residual'")
        if self.sample_size is not None and self.mode != "ma-cw":
            raise ValidationError("sampling audits are only available in ma-cw mode")

    @property
    def step_size(self) -> float:
        return self.eta if self.eta is not None else self.alpha / 2

    @property
    def step_rule(self) -> str:
        if self.step is not None:
            return self.step
        return "residual" if self.mode == "scalar-mc" else "fixed"

    def budget(self, k: int) -> int:
        if self.max_iter is not None:
            return self.max_iter
        return math.ceil(64 * math.log(k + 1) / self.alpha**2)

    @property
    def discretization(self) -> Discretization:
        if self.lam is None:
            raise ValidationError("no discretization configured")
        return Discretization(self.lam)

    def to_dict(self) -> dict[str, Any]:
        return {
            "alpha": self.alpha,
            "lam": self.lam,
            "eta": self.eta,
            "max_iter": self.max_iter,
            "mode": self.mode,
            "seed": self.seed,
            "step": self.step,
            "sample_size": self.sample_size,
        }


@dataclass(frozen=True)
class TraceRecord:
    iteration: int
    constraint: Constraint
    gap: float
    members: int
    mass: float
    step: float

    def to_dict(self) -> dict[str, Any]:
        c = self.constraint
        return {
            "iteration": self.iteration,
            "group": c.group,
            "index": c.index,
            "center": list(c.center) if isinstance(c.center, tuple) else c.center,
            "gap": self.gap,
            "members": self.members,
            "mass": self.mass,
            "step": self.step,
        }


@dataclass
class LearnTrace:
    mode: str
    alpha: float
    records: list[TraceRecord] = field(default_factory=list)
    final_gap: float = math.nan
    success: bool = False
    scan_seconds: float = 0.0

    @property
    def iterations(self) -> int:
        return len(self.records)

    def to_dict(self) -> dict[str, Any]:
        """Deterministic summary (timing is left out on purpose)."""
        return {
            "mode": self.mode,
            "alpha": self.alpha,
            "iterations": self.iterations,
            "final_gap": self.final_gap,
            "success": self.success,
        }


class BudgetExhausted(RuntimeError):
    """The iteration cap was hit before the audit passed."""

    def __init__(self, predictor: Predictor, trace: LearnTrace) -> None:
        super().__init__(
            f"{trace.mode} learner used its budget of {trace.iterations} iterations; final gap {trace.final_gap:.6g}"
        )
        self.predictor = predictor
        self.trace = trace


@dataclass(frozen=True)
class Violation:
    constraint: Constraint
    gap: float


# ---------------------------------------------------------------------------
# Atom compression
# ---------------------------------------------------------------------------


@dataclass
class _Atoms:
    weights: np.ndarray
    nature: np.ndarray
    masks: np.ndarray
    extra: np.ndarray
    start: np.ndarray
    counts: np.ndarray
    inverse: np.ndarray

    @classmethod
    def build(
        cls, w: np.ndarray, nat: np.ndarray, masks: np.ndarray, start: np.ndarray, extra: np.ndarray | None = None
    ) -> "_Atoms":
        n = w.size
        extra = np.zeros((n, 0)) if extra is None else extra
        sig = np.hstack([masks.T.astype(float), nat, start, extra])
        _, first, inv = np.unique(sig, axis=0, return_index=True, return_inverse=True)
        inv = inv.reshape(-1)
        return cls(
            weights=np.bincount(inv, weights=w, minlength=first.size),
            nature=nat[first],
            masks=masks[:, first],
            extra=extra[first],
            start=start[first].copy(),
            counts=np.bincount(inv, minlength=first.size),
            inverse=inv,
        )

    def expand(self, pred: np.ndarray) -> np.ndarray:
        return pred[self.inverse]


# ---------------------------------------------------------------------------
# Violation search
# ---------------------------------------------------------------------------


def _pick(candidates: list[tuple[Constraint, float, Any]]) -> tuple[Constraint, float, Any]:
    return min(candidates, key=lambda c: _sort_key(c[0]))


def _top(values: np.ndarray) -> tuple[float, np.ndarray]:
    absv = np.abs(values)
    top = float(absv.max()) if absv.size else 0.0
    return top, np.argwhere(absv >= top - TIE_BREAK_TOL)


def _search(
    mode: str,
    w: np.ndarray,
    nat: np.ndarray,
    pred: np.ndarray,
    masks: np.ndarray,
    ids: Sequence[str],
    alpha: float,
    d: Discretization | None,
) -> tuple[Constraint, float, np.ndarray, Any] | None:
    """Worst violated constraint: (constraint, signed gap, member mask, update target)."""
    k = nat.shape[1]
    if len(ids) == 0:
        return None
    if mode in ("ma-cw", "ma-threshold"):
        threshold = mode == "ma-threshold"
        gaps = ma_gaps(w, nat, pred, masks, threshold)
        top, where = _top(gaps)
        if top <= alpha:
            return None
        off = 1 if threshold else 0
        cands = [(Constraint(ids[g], int(j) + off), float(gaps[g, j]), g) for g, j in where]
        c, gap, g = _pick(cands)
        return c, gap, masks[g], c.index
    assert d is not None
    centers = d.centers
    if mode in ("mc-cw", "scalar-mc"):
        bins = d.index(pred)
        types = [0] if mode == "scalar-mc" else list(range(k))
        per_type = []
        for t in types:
            counts, gaps = cell_gaps(w, nat, pred, masks, bins[:, t], d.count, [t])
            per_type.append(np.where(counts > 0, gaps[0], 0.0))
        stacked = np.stack(per_type)
        top, where = _top(stacked)
        if top <= alpha:
            return None
        cands = [
            (Constraint(ids[g], types[i], float(centers[j])), float(stacked[i, g, j]), (g, j)) for i, g, j in where
        ]
        c, gap, (g, j) = _pick(cands)
        return c, gap, masks[g] & (bins[:, c.index] == j), c.index
    if mode == "mc-full":
        uniq, inv = realized_cells(pred, d)
        counts, gaps = cell_gaps(w, nat, pred, masks, inv, len(uniq), range(k))
        gaps = np.where(counts[None] > 0, gaps, 0.0)
        top, where = _top(gaps)
        if top <= alpha:
            return None
        cands = []
        for t, g, cidx in where:
            center = tuple(float(v) for v in (uniq[cidx] + 0.5) / d.count)
            cands.append((Constraint(ids[g], int(t), center), float(gaps[t, g, cidx]), (g, cidx)))
        c, gap, (g, cidx) = _pick(cands)
        return c, gap, masks[g] & (inv == cidx), c.index
    raise ValidationError(f"unknown mode {mode!r}")


def _apply(mode: str, pred: np.ndarray, members: np.ndarray, target: int, sign: float, eta: float) -> None:
    rows = pred[members]
    k = pred.shape[1]
    if mode == "ma-threshold":
        tail, head = k - target, target
        rows[:, target:] += sign * eta / tail
        rows[:, :target] -= sign * eta / head
    else:
        rows[:, target] += sign * eta
    pred[members] = project_rows(rows)


def _apply_scalar(pred: np.ndarray, members: np.ndarray, delta: float) -> None:
    p = np.clip(pred[members, 0] + delta, 0.0, 1.0)
    pred[members, 0] = p
    pred[members, 1] = 1.0 - p


def _final_gap(
    mode: str, pop: Population, nature: Nature, pred: Predictor, C: GroupCollection, d: Discretization | None, types: TypeSpace | None
) -> float:
    if mode == "ma-cw":
        return ma_error(pop, nature, pred, C, "cw").max_gap
    if mode == "ma-threshold":
        return ma_error(pop, nature, pred, C, "threshold", types).max_gap
    if mode == "mc-cw":
        return mc_cw_error(pop, nature, pred, C, d).max_gap
    if mode == "mc-full":
        return mc_full_error(pop, nature, pred, C, d).max_gap
    rep = mc_cw_error(pop, nature, pred, C, d)
    first = np.array([c.index == 0 for c in rep.constraints], dtype=bool)
    return float(np.abs(rep.gaps[first]).max()) if first.any() else 0.0


def _sampled_search(
    atoms: _Atoms, pred: np.ndarray, ids: Sequence[str], alpha: float, n: int, rng: RandomStream
) -> tuple[Constraint, float, np.ndarray, Any] | None:
    p = atoms.weights / atoms.weights.sum()
    xs = rng.substream("x").generator.choice(p.size, size=n, p=p)
    k = pred.shape[1]
    ind = np.eye(k)[sample_types(atoms.nature[xs], rng.substream("nature"))] - np.eye(k)[
        sample_types(pred[xs], rng.substream("pred"))
    ]
    gaps = atoms.masks[:, xs].astype(float) @ ind / n
    top, where = _top(gaps)
    if top <= alpha:
        return None
    cands = [(Constraint(ids[g], int(t)), float(gaps[g, t]), g) for g, t in where]
    c, gap, g = _pick(cands)
    return c, gap, atoms.masks[g], c.index


def _run(
    pop: Population,
    nature: Nature,
    C: GroupCollection,
    cfg: LearnerConfig,
    initial: Predictor | None,
    types: TypeSpace | None = None,
) -> tuple[Predictor, LearnTrace]:
    if nature.size != pop.size or C.size != pop.size:
        raise ValidationError("population, nature and groups disagree on the domain size")
    k = nature.k
    start = (initial.probs if initial is not None else np.full((pop.size, k), 1.0 / k)).astype(float)
    if start.shape != nature.probs.shape:
        raise ValidationError("initial predictor has the wrong shape")
    if cfg.mode == "ma-threshold" and (types is None or not types.ordered):
        raise ValidationError("threshold multi-accuracy needs ordered types")
    if cfg.mode == "scalar-mc" and k != 2:
        raise ValidationError("scalar mode works on the two-coordinate encoding")
    d = Discretization(cfg.lam) if cfg.lam is not None else None
    atoms = _Atoms.build(pop.weights, nature.probs, C.masks, start)
    pred = atoms.start.copy()
    trace = LearnTrace(cfg.mode, cfg.alpha)
    budget = cfg.budget(k)
    eta = cfg.step_size
    rng = RandomStream(cfg.seed, f"learn/{cfg.mode}")
    converged = False
    for it in range(budget + 1):
        t0 = time.perf_counter()
        if cfg.sample_size is not None:
            found = _sampled_search(atoms, pred, C.ids, cfg.alpha, cfg.sample_size, rng.substream(it))
        else:
            found = _search(cfg.mode, atoms.weights, atoms.nature, pred, atoms.masks, C.ids, cfg.alpha, d)
        trace.scan_seconds += time.perf_counter() - t0
        if found is None:
            converged = True
            break
        if it == budget:
            break
        constraint, gap, members, target = found
        mass = float(atoms.weights[members].sum())
        sign = 1.0 if gap > 0 else -1.0
        if cfg.step_rule == "residual":
            step = gap / mass
            if cfg.mode == "scalar-mc":
                _apply_scalar(pred, members, step)
            else:
                _apply(cfg.mode, pred, members, target, 1.0, step)
        else:
            step = sign * eta
            if cfg.mode == "scalar-mc":
                _apply_scalar(pred, members, step)
            else:
                _apply(cfg.mode, pred, members, target, sign, eta)
        trace.records.append(TraceRecord(it, constraint, gap, int(atoms.counts[members].sum()), mass, float(step)))
    result = Predictor(project_rows(atoms.expand(pred)) if cfg.mode != "scalar-mc" else atoms.expand(pred))
    trace.final_gap = _final_gap(cfg.mode, pop, nature, result, C, d, types)
    if converged and cfg.sample_size is None and trace.final_gap > cfg.alpha + 1e-12:
        raise AssertionError(f"learner converged but the exact re-audit reports {trace.final_gap!r} > alpha")
    trace.success = trace.final_gap <= cfg.alpha + 1e-12
    if not converged:
        raise BudgetExhausted(result, trace)
    return result, trace


# ---------------------------------------------------------------------------
# Public learners
# ---------------------------------------------------------------------------


def audit(
    pop: Population,
    nature: Nature,
    pred: Predictor,
    C: GroupCollection,
    cfg: LearnerConfig,
    types: TypeSpace | None = None,
) -> Violation | None:
    """The worst constraint with ``|gap| > alpha`` under ``cfg.mode``, if any."""
    if cfg.mode == "ma-threshold" and (types is None or not types.ordered):
        raise ValidationError("threshold multi-accuracy needs ordered types")
    d = Discretization(cfg.lam) if cfg.lam is not None else None
    found = _search(cfg.mode, pop.weights, nature.probs, pred.probs, C.masks, C.ids, cfg.alpha, d)
    return None if found is None else Violation(found[0], found[1])


def learn_multiaccurate(
    pop: Population,
    nature: Nature,
    C: GroupCollection,
    cfg: LearnerConfig,
    types: TypeSpace | None = None,
    initial: Predictor | None = None,
) -> tuple[Predictor, LearnTrace]:
    if cfg.mode not in ("ma-cw", "ma-threshold"):
        raise ValidationError("learn_multiaccurate needs mode ma-cw or ma-threshold")
    return _run(pop, nature, C, cfg, initial, types)


def learn_multicalibrated(
    pop: Population,
    nature: Nature,
    C: GroupCollection,
    cfg: LearnerConfig,
    initial: Predictor | None = None,
) -> tuple[Predictor, LearnTrace]:
    if cfg.mode not in ("mc-cw", "mc-full"):
        raise ValidationError("learn_multicalibrated needs mode mc-cw or mc-full")
    return _run(pop, nature, C, cfg, initial)


def _as_pair(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=float).reshape(-1)
    return np.column_stack([p, 1.0 - p])


def learn_scalar_calibrated(
    pop: Population,
    target: np.ndarray,
    C: GroupCollection,
    cfg: LearnerConfig,
    initial: np.ndarray | None = None,
) -> tuple[np.ndarray, LearnTrace]:
    """One-dimensional multi-calibration of a predictor for ``target``.

    Targets and predictions are encoded as ``(p, 1 - p)``; only the first
    coordinate's level sets are audited.
    """
    target = np.asarray(target, dtype=float)
    if np.any(target < 0) or np.any(target > 1):
        raise ValidationError("scalar targets must lie in [0, 1]")
    cfg = replace(cfg, mode="scalar-mc")
    start = None if initial is None else Predictor(_as_pair(initial))
    start = start if start is not None else Predictor(np.full((pop.size, 2), 0.5))
    pred, trace = _run(pop, Nature(_as_pair(target)), C, cfg, start)
    return pred.probs[:, 0].copy(), trace


def expectation_target(nature: Nature, types: TypeSpace) -> np.ndarray:
    """Expected numeric type value per element."""
    if types.values is None:
        raise ValidationError("expectation targets need numeric type values")
    return np.clip(nature.probs @ np.asarray(types.values), 0.0, 1.0)


def loss_weighted_target(nature: Nature, loss: LossFunction) -> np.ndarray:
    """``(1 - sum_t (l(t,1) - l(t,0)) nature_t) / 2``; above 1/2 exactly when accepting wins."""
    return np.clip((1.0 - nature.probs @ loss.gap) / 2.0, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Omniprediction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CanonicalPartition:
    cells: np.ndarray
    cell_of: np.ndarray
    mass: np.ndarray
    canonical: np.ndarray

    def predictor(self) -> Predictor:
        return Predictor(self.canonical[self.cell_of])


def canonical_partition(pop: Population, nature: Nature, pred: Predictor, d: Discretization) -> CanonicalPartition:
    """Cells of equal discretized prediction and the nature average on each."""
    uniq, inv = realized_cells(pred.probs, d)
    mass = np.bincount(inv, weights=pop.weights, minlength=len(uniq))
    sums = np.zeros((len(uniq), nature.k))
    np.add.at(sums, inv, pop.weights[:, None] * nature.probs)
    canon = np.empty_like(sums)
    for c in range(len(uniq)):
        if mass[c] > 0:
            canon[c] = sums[c] / mass[c]
        else:
            canon[c] = nature.probs[inv == c].mean(axis=0)
    canon = project_rows(canon)
    return CanonicalPartition((uniq + 0.5) / d.count, inv, mass, canon)


@dataclass(frozen=True)
class OmniResult:
    action: ActionFunction
    alpha: float
    lam: float
    k: int
    bound: float


def omnipredict(
    pop: Population, nature: Nature, pred: Predictor, loss: LossFunction, C: GroupCollection, d: Discretization
) -> OmniResult:
    """Post-processes ``pred`` with the loss-minimizing rule.

    The reported bound ``3k(alpha + lam)`` uses ``alpha``, the measured full
    multi-calibration error of ``pred`` over ``C``.
    """
    alpha = mc_full_error(pop, nature, pred, C, d).max_gap
    action = compose(loss_min_rule(loss), pred)
    return OmniResult(action, alpha, d.lam, pred.k, 3 * pred.k * (alpha + d.lam))


@dataclass(frozen=True)
class LinearLoss:
    """A loss on numeric types that is affine in the type value.

    ``at_zero[a]`` and ``at_one[a]`` are the losses of action ``a`` at
    type values 0 and 1.
    """

    at_zero: tuple[float, float]
    at_one: tuple[float, float]

    def __post_init__(self) -> None:
        vals = (*self.at_zero, *self.at_one)
        if any(v < 0 or v > 1 for v in vals):
            raise ValidationError("linear loss endpoints must lie in [0, 1]")

    def table(self, types: TypeSpace) -> LossFunction:
        if types.values is None:
            raise ValidationError("linear losses need numeric type values")
        v = np.asarray(types.values)[:, None]
        z, o = np.asarray(self.at_zero), np.asarray(self.at_one)
        return LossFunction(z[None, :] + v * (o - z)[None, :])

    def decide(self, q: np.ndarray) -> np.ndarray:
        z, o = np.asarray(self.at_zero), np.asarray(self.at_one)
        diff = (z[1] - z[0]) + np.asarray(q) * ((o[1] - o[0]) - (z[1] - z[0]))
        return (diff < -1e-12).astype(float)


@dataclass(frozen=True)
class PipelineResult:
    action: ActionFunction
    scalar: np.ndarray
    alpha: float
    bound: float
    gap: float
    trace: LearnTrace


def _scalar_full_alpha(pop: Population, target: np.ndarray, scalar: np.ndarray, C: GroupCollection, d: Discretization) -> float:
    return mc_full_error(pop, Nature(_as_pair(target)), Predictor(_as_pair(scalar)), C, d).max_gap


def expectation_pipeline(
    pop: Population,
    nature: Nature,
    types: TypeSpace,
    loss: LinearLoss,
    C: GroupCollection,
    cfg: LearnerConfig,
) -> PipelineResult:
    """Calibrates the expected type value, then decides with the linear loss.

    The gap is measured against indicators of ``C`` and their complements,
    so calibration runs over ``C`` closed under complement; the bound is
    ``6(alpha + lam)``.
    """
    d = cfg.discretization
    closed = C.with_complements()
    q_star = expectation_target(nature, types)
    q, trace = learn_scalar_calibrated(pop, q_star, closed, cfg)
    alpha = _scalar_full_alpha(pop, q_star, q, closed, d)
    action = ActionFunction(loss.decide(q))
    gap = loss_gap(pop, nature, action, loss.table(types), class_from_groups(C))
    return PipelineResult(action, q, alpha, 6 * (alpha + d.lam), gap, trace)


def loss_weighted_pipeline(
    pop: Population,
    nature: Nature,
    loss: LossFunction,
    C: GroupCollection,
    cfg: LearnerConfig,
) -> PipelineResult:
    """Calibrates the loss-weighted target and accepts where it exceeds 1/2.

    Calibration runs over ``C`` closed under complement, so that every
    benchmark action's accept and reject sets are audited. Bound
    ``2 alpha`` with ``alpha`` the measured calibration error.
    """
    d = cfg.discretization
    closed = C.with_complements()
    p_star = loss_weighted_target(nature, loss)
    p, trace = learn_scalar_calibrated(pop, p_star, closed, cfg)
    alpha = _scalar_full_alpha(pop, p_star, p, closed, d)
    action = ActionFunction((p > 0.5).astype(float))
    gap = loss_gap(pop, nature, action, loss, class_from_groups(C))
    return PipelineResult(action, p, alpha, 2 * alpha, gap, trace)


# ---------------------------------------------------------------------------
# Loss-family outcome indistinguishability
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OIRecord:
    iteration: int
    loss_index: int
    action_index: int
    gap: float


def _distinguisher(table: np.ndarray, gap: np.ndarray, pred: np.ndarray, h: np.ndarray) -> np.ndarray:
    """``D[x, t] = l(t, rho*(pred(x))) - E l(t, h(x))``."""
    a = (pred @ gap < -1e-12).astype(float)
    return (a - h)[:, None] * (table[:, 1] - table[:, 0])[None, :]


def learn_oi_loss_family(
    pop: Population,
    nature: Nature,
    H: Sequence[ActionFunction],
    L: Sequence[LossFunction],
    epsilon: float,
    cfg: LearnerConfig,
    initial: Predictor | None = None,
) -> tuple[Predictor, LearnTrace]:
    """Makes ``pred`` indistinguishable from nature for every loss-action test.

    For each ``(l, h)`` the test statistic is the excess loss of the
    loss-minimizing decision over ``h``. Whenever nature's expectation of it
    exceeds the predictor's by more than ``epsilon / 2``, the predictor moves
    along that statistic. On exit every loss in ``L`` has ``loss_gap`` at
    most ``epsilon`` against ``H``.
    """
    if not H or not L:
        raise ValidationError("need at least one action function and one loss")
    if not 0 < epsilon < 1:
        raise ValidationError("epsilon must lie in (0, 1)")
    k = nature.k
    start = initial.probs if initial is not None else np.full((pop.size, k), 1.0 / k)
    hs = np.stack([h.acceptance for h in H], axis=1)
    atoms = _Atoms.build(pop.weights, nature.probs, np.zeros((0, pop.size), dtype=bool), start, hs)
    pred = atoms.start.copy()
    eta = cfg.eta if cfg.eta is not None else epsilon / (2 * k)
    budget = cfg.max_iter if cfg.max_iter is not None else math.ceil(16 * k / epsilon**2)
    trace = LearnTrace("oi-loss-family", epsilon)
    w = atoms.weights
    converged = False
    for it in range(budget + 1):
        t0 = time.perf_counter()
        best = None
        for li, loss in enumerate(L):
            for hi in range(len(H)):
                D = _distinguisher(loss.table, loss.gap, pred, atoms.extra[:, hi])
                g = float(np.sum(w[:, None] * (atoms.nature - pred) * D))
                if g > epsilon / 2 and (best is None or g > best[0] + TIE_BREAK_TOL):
                    best = (g, li, hi, D)
        trace.scan_seconds += time.perf_counter() - t0
        if best is None:
            converged = True
            break
        if it == budget:
            break
        g, li, hi, D = best
        pred = project_rows(pred + eta * D)
        trace.records.append(
            TraceRecord(it, Constraint(f"loss{li}", hi), g, int(atoms.counts.sum()), float(w.sum()), eta)
        )
    result = Predictor(project_rows(atoms.expand(pred)))
    trace.final_gap = max(
        loss_gap(pop, nature, compose(loss_min_rule(loss), result), loss, H) for loss in L
    )
    trace.success = converged and trace.final_gap <= epsilon + 1e-12
    if not converged:
        raise BudgetExhausted(result, trace)
    return result, trace
