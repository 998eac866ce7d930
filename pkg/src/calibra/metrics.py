"""Exact auditors for accuracy, calibration, decision and loss notions.

All quantities are computed by enumeration over the population. Gaps are
signed as ``reference - candidate`` (nature minus predictor, or the
loss-minimizing action minus the audited action) and the headline number is
the largest absolute gap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, NamedTuple, Protocol, Sequence

import numpy as np

from .core import (
    Discretization,
    GroupCollection,
    LossFunction,
    Nature,
    Population,
    Predictor,
    SIMPLEX_TOL,
    RandomStream,
    TypeSpace,
    ValidationError,
    loss_min_accept,
    sample_types,
)

TIE_BREAK_TOL = 1e-12


class Rule(Protocol):
    def accept(self, y: np.ndarray) -> np.ndarray: ...


class Constraint(NamedTuple):
    """One audited constraint.

    ``index`` is a type (coordinate-wise and calibration audits), a threshold
    ``tau`` in ``1..k-1`` (threshold audits), or None (decision audits).
    ``center`` is the grid center (coordinate-wise calibration) or the grid
    vector of the cell (full calibration).
    """

    group: str
    index: int | None = None
    center: float | tuple[float, ...] | None = None


@dataclass(frozen=True)
class AuditReport:
    kind: str
    constraints: tuple[Constraint, ...]
    gaps: np.ndarray
    group_mass: dict[str, float]
    max_gap: float = field(init=False)
    witness: Constraint | None = field(init=False)
    witness_gap: float = field(init=False)

    def __post_init__(self) -> None:
        gaps = np.asarray(self.gaps, dtype=float).reshape(-1)
        if gaps.size != len(self.constraints):
            raise ValidationError("one gap per constraint required")
        gaps = gaps.copy()
        gaps.setflags(write=False)
        object.__setattr__(self, "gaps", gaps)
        if gaps.size == 0:
            object.__setattr__(self, "max_gap", 0.0)
            object.__setattr__(self, "witness", None)
            object.__setattr__(self, "witness_gap", 0.0)
            return
        absg = np.abs(gaps)
        top = float(absg.max())
        tied = np.flatnonzero(absg >= top - TIE_BREAK_TOL)
        best = min(tied, key=lambda i: _sort_key(self.constraints[i]))
        object.__setattr__(self, "max_gap", top)
        object.__setattr__(self, "witness", self.constraints[best])
        object.__setattr__(self, "witness_gap", float(gaps[best]))

    def __len__(self) -> int:
        return len(self.constraints)

    def gap_of(self, c: Constraint) -> float:
        return float(self.gaps[self.constraints.index(c)])

    def rows(self) -> list[dict[str, Any]]:
        out = []
        for c, g in zip(self.constraints, self.gaps):
            center = c.center
            if isinstance(center, tuple):
                center = " ".join(repr(float(v)) for v in center)
            out.append(
                {
                    "group": c.group,
                    "index": c.index,
                    "center": center,
                    "gap": float(g),
                    "group_mass": self.group_mass[c.group],
                }
            )
        return out


def _sort_key(c: Constraint) -> tuple:
    center = c.center
    if center is None:
        center = ()
    elif not isinstance(center, tuple):
        center = (center,)
    return (c.group, -1 if c.index is None else c.index, center)


# ---------------------------------------------------------------------------
# Array-level kernels (shared with the learners)
# ---------------------------------------------------------------------------


def _member_pairs(masks: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return np.nonzero(masks)


def ma_gaps(w: np.ndarray, nat: np.ndarray, pred: np.ndarray, masks: np.ndarray, threshold: bool = False) -> np.ndarray:
    """Signed joint-mass gaps, shape ``(groups, k)`` or ``(groups, k-1)``."""
    diff = w[:, None] * (nat - pred)
    gaps = masks.astype(float) @ diff
    if threshold:
        # Column tau-1 holds the tail event "type index >= tau".
        gaps = np.cumsum(gaps[:, ::-1], axis=1)[:, ::-1][:, 1:]
    return gaps


def cell_gaps(
    w: np.ndarray, nat: np.ndarray, pred: np.ndarray, masks: np.ndarray, cells: np.ndarray, n_cells: int, types: Sequence[int]
) -> tuple[np.ndarray, np.ndarray]:
    """Gaps on the intersections of groups with cells.

    ``cells`` assigns every element to one of ``n_cells`` cells. Returns
    ``(counts, gaps)`` where ``counts[g, c]`` is the number of members of
    group ``g`` in cell ``c`` and ``gaps[i, g, c]`` the joint-mass gap of
    type ``types[i]`` on that intersection.
    """
    rows, cols = _member_pairs(masks)
    key = rows * n_cells + cells[cols]
    size = masks.shape[0] * n_cells
    counts = np.bincount(key, minlength=size).reshape(masks.shape[0], n_cells)
    gaps = np.empty((len(types), masks.shape[0], n_cells))
    for i, t in enumerate(types):
        diff = w[cols] * (nat[cols, t] - pred[cols, t])
        gaps[i] = np.bincount(key, weights=diff, minlength=size).reshape(masks.shape[0], n_cells)
    return counts, gaps


def realized_cells(pred: np.ndarray, d: Discretization) -> tuple[np.ndarray, np.ndarray]:
    """Distinct discretized prediction vectors and each element's cell index."""
    bins = d.index(pred)
    uniq, inv = np.unique(bins, axis=0, return_inverse=True)
    return uniq, inv.reshape(-1)


def _mass(w: np.ndarray, masks: np.ndarray) -> np.ndarray:
    return masks.astype(float) @ w


def _group_mass(pop: Population, C: GroupCollection) -> dict[str, float]:
    return dict(zip(C.ids, (float(m) for m in _mass(pop.weights, C.masks))))


def _check_shapes(pop: Population, *objs: Any) -> None:
    for o in objs:
        size = getattr(o, "size", None)
        if size is not None and size != pop.size:
            raise ValidationError("population and inputs disagree on the domain size")


def _require_positive_mass(mass: dict[str, float]) -> None:
    for gid, m in mass.items():
        if m <= 0:
            raise ValidationError(f"group {gid!r} has zero mass; the conditional expectation is undefined")


# ---------------------------------------------------------------------------
# Public metrics
# ---------------------------------------------------------------------------


def joint_mass(pop: Population, R: Nature | Predictor, S: np.ndarray | Sequence[int], t: int) -> float:
    """``sum over x in S of weight(x) * R(x)[t]``.

    ``S`` is either a boolean mask over the domain or a list of members.
    """
    S = np.asarray(S)
    idx = np.flatnonzero(S) if S.dtype == bool else S.astype(np.int64)
    return float(np.dot(pop.weights[idx], R.probs[idx, t]))


def ma_error(
    pop: Population,
    nature: Nature,
    pred: Predictor,
    C: GroupCollection,
    mode: str = "cw",
    types: TypeSpace | None = None,
) -> AuditReport:
    """Multi-accuracy audit in coordinate-wise (``"cw"``) or ``"threshold"`` form.

    Threshold mode needs an ordered :class:`TypeSpace`; threshold ``tau``
    compares the masses of the tail event "rank index >= tau".
    """
    _check_shapes(pop, nature, pred, C)
    if mode not in ("cw", "threshold"):
        raise ValidationError(f"unknown multi-accuracy mode {mode!r}")
    threshold = mode == "threshold"
    if threshold and (types is None or not types.ordered):
        raise ValidationError("threshold multi-accuracy needs ordered types")
    gaps = ma_gaps(pop.weights, nature.probs, pred.probs, C.masks, threshold)
    offset = 1 if threshold else 0
    constraints = tuple(
        Constraint(gid, j + offset) for gid in C.ids for j in range(gaps.shape[1])
    )
    return AuditReport(f"ma-{mode}", constraints, gaps.reshape(-1), _group_mass(pop, C))


def mc_cw_error(pop: Population, nature: Nature, pred: Predictor, C: GroupCollection, d: Discretization) -> AuditReport:
    """Coordinate-wise multi-calibration audit over nonempty level sets."""
    _check_shapes(pop, nature, pred, C)
    k = pred.k
    bins = d.index(pred.probs)
    centers = d.centers
    constraints: list[Constraint] = []
    values: list[float] = []
    for t in range(k):
        counts, gaps = cell_gaps(pop.weights, nature.probs, pred.probs, C.masks, bins[:, t], d.count, [t])
        for g, c in zip(*np.nonzero(counts)):
            constraints.append(Constraint(C.ids[g], t, float(centers[c])))
            values.append(gaps[0, g, c])
    order = sorted(range(len(constraints)), key=lambda i: (C.ids.index(constraints[i].group), constraints[i].index, constraints[i].center))
    return AuditReport(
        "mc-cw",
        tuple(constraints[i] for i in order),
        np.asarray([values[i] for i in order]),
        _group_mass(pop, C),
    )


def mc_full_error(pop: Population, nature: Nature, pred: Predictor, C: GroupCollection, d: Discretization) -> AuditReport:
    """Full multi-calibration audit over realized discretized vectors only."""
    _check_shapes(pop, nature, pred, C)
    k = pred.k
    uniq, inv = realized_cells(pred.probs, d)
    cell_centers = [tuple(float(v) for v in (row + 0.5) / d.count) for row in uniq]
    counts, gaps = cell_gaps(pop.weights, nature.probs, pred.probs, C.masks, inv, len(uniq), range(k))
    constraints: list[Constraint] = []
    values: list[float] = []
    for g, c in zip(*np.nonzero(counts)):
        for t in range(k):
            constraints.append(Constraint(C.ids[g], t, cell_centers[c]))
            values.append(gaps[t, g, c])
    return AuditReport("mc-full", tuple(constraints), np.asarray(values), _group_mass(pop, C))


def mad_error(pop: Population, nature: Nature, pred: Predictor, rule: Rule, C: GroupCollection) -> AuditReport:
    """Per-group gap between acceptance rates of ``rule`` on nature and on ``pred``."""
    _check_shapes(pop, nature, pred, C)
    mass = _group_mass(pop, C)
    _require_positive_mass(mass)
    a_nat = np.asarray(rule.accept(nature.probs), dtype=float)
    a_pred = np.asarray(rule.accept(pred.probs), dtype=float)
    num = C.masks.astype(float) @ (pop.weights * (a_nat - a_pred))
    gaps = num / np.array([mass[g] for g in C.ids]) if len(C) else num
    return AuditReport("mad", tuple(Constraint(g) for g in C.ids), gaps, mass)


@dataclass(frozen=True)
class ActionFunction:
    """A randomized accept/reject map, stored as its acceptance probability."""

    acceptance: np.ndarray

    def __post_init__(self) -> None:
        a = np.asarray(self.acceptance, dtype=float).reshape(-1)
        if not np.all(np.isfinite(a)) or np.any(a < 0) or np.any(a > 1):
            raise ValidationError("acceptance probabilities must lie in [0, 1]")
        a = a.copy()
        a.setflags(write=False)
        object.__setattr__(self, "acceptance", a)

    @property
    def size(self) -> int:
        return int(self.acceptance.size)

    def __call__(self, x: int) -> float:
        return float(self.acceptance[x])

    @classmethod
    def constant(cls, size: int, c: float) -> "ActionFunction":
        return cls(np.full(size, float(c)))

    @classmethod
    def indicator(cls, mask: np.ndarray) -> "ActionFunction":
        return cls(np.asarray(mask, dtype=bool).astype(float))


def optimal_action(nature: Nature, loss: LossFunction) -> ActionFunction:
    """The loss-minimizing action function applied to nature."""
    return ActionFunction(loss_min_accept(loss, nature.probs))


def exp_loss(pop: Population, nature: Nature, h: ActionFunction, loss: LossFunction) -> float:
    _check_shapes(pop, nature, h)
    per_x = nature.probs @ loss.table[:, 0] + h.acceptance * (nature.probs @ loss.gap)
    return float(np.dot(pop.weights, per_x))


def mac_error(pop: Population, nature: Nature, h: ActionFunction, loss: LossFunction, C: GroupCollection) -> AuditReport:
    """Per-group gap between acceptance rates of the optimal action and ``h``."""
    _check_shapes(pop, nature, h, C)
    if loss.find_certificate() is None:
        raise ValidationError("classification accuracy is only defined for nontrivial losses")
    mass = _group_mass(pop, C)
    _require_positive_mass(mass)
    star = optimal_action(nature, loss).acceptance
    num = C.masks.astype(float) @ (pop.weights * (star - h.acceptance))
    gaps = num / np.array([mass[g] for g in C.ids]) if len(C) else num
    return AuditReport("mac", tuple(Constraint(g) for g in C.ids), gaps, mass)


def loss_gap(pop: Population, nature: Nature, h: ActionFunction, loss: LossFunction, H: Sequence[ActionFunction]) -> float:
    """Excess loss of ``h`` over the best member of ``H`` (negative if ``h`` wins)."""
    if len(H) == 0:
        raise ValidationError("benchmark class H is empty")
    best = min(exp_loss(pop, nature, g, loss) for g in H)
    return exp_loss(pop, nature, h, loss) - best


def class_from_groups(C: GroupCollection) -> list[ActionFunction]:
    """Indicators of every group and of its complement."""
    out = []
    for m in C.masks:
        out.append(ActionFunction.indicator(m))
        out.append(ActionFunction.indicator(~m))
    return out


# ---------------------------------------------------------------------------
# Sampling estimator (never used to certify)
# ---------------------------------------------------------------------------


def hoeffding_sample_size(eps: float, delta: float, n_constraints: int) -> int:
    """Samples so that ``n_constraints`` means of [-1, 1] variables are all
    within ``eps`` of their expectation with probability ``1 - delta``."""
    if not (eps > 0 and 0 < delta < 1 and n_constraints >= 1):
        raise ValidationError("need eps > 0, 0 < delta < 1 and at least one constraint")
    return math.ceil(2.0 * math.log(2.0 * n_constraints / delta) / eps**2)


def sampled_ma_error(
    pop: Population, nature: Nature, pred: Predictor, C: GroupCollection, n_samples: int, rng: RandomStream
) -> AuditReport:
    """Monte-Carlo estimate of the coordinate-wise multi-accuracy gaps.

    Draws ``x`` from the population weights, then a true type from nature
    and a predicted type from ``pred``.
    """
    _check_shapes(pop, nature, pred, C)
    xs = rng.substream("x").generator.choice(pop.size, size=n_samples, p=pop.weights)
    t_nat = sample_types(nature.probs[xs], rng.substream("nature"))
    t_pred = sample_types(pred.probs[xs], rng.substream("pred"))
    k = pred.k
    ind = np.eye(k)[t_nat] - np.eye(k)[t_pred]
    gaps = C.masks[:, xs].astype(float) @ ind / n_samples
    constraints = tuple(Constraint(gid, t) for gid in C.ids for t in range(k))
    return AuditReport("ma-cw-sampled", constraints, gaps.reshape(-1), _group_mass(pop, C))


# ---------------------------------------------------------------------------
# Conversion tightness witnesses
# ---------------------------------------------------------------------------


def _single_point(k: int, shift: np.ndarray) -> tuple[Population, TypeSpace, Nature, Predictor, GroupCollection]:
    nat = np.full((1, k), 1.0 / k)
    pred = nat - shift[None, :]
    if np.any(pred < -SIMPLEX_TOL) or np.any(pred > 1 + SIMPLEX_TOL):
        raise ValidationError("alpha too large for a uniform nature with this k")
    return Population.uniform(1), TypeSpace(k, ordered=True), Nature(nat), Predictor(pred), GroupCollection.full_domain(1)


def threshold_to_cw_witness(k: int, alpha: float) -> tuple[Population, TypeSpace, Nature, Predictor, GroupCollection]:
    """One-element instance whose threshold gaps are at most ``alpha`` and
    whose coordinate-wise gap is ``2 alpha``.

    The signed gaps on the three lowest-ranked types are ``+alpha``,
    ``-2 alpha`` and ``+alpha``.
    """
    if k < 3:
        raise ValidationError("the witness needs at least three types")
    shift = np.zeros(k)
    shift[k - 1], shift[k - 2], shift[k - 3] = alpha, -2 * alpha, alpha
    return _single_point(k, shift)


def cw_to_threshold_witness(k: int, alpha: float) -> tuple[Population, TypeSpace, Nature, Predictor, GroupCollection]:
    """One-element instance with coordinate-wise gap ``alpha`` and threshold
    gap ``(k/2) alpha`` at ``tau = k/2``.

    Types below ``k/2`` get gap ``-alpha`` and the rest ``+alpha``.
    """
    if k < 2 or k % 2:
        raise ValidationError("the witness needs an even number of types")
    shift = np.where(np.arange(k) < k // 2, -alpha, alpha)
    return _single_point(k, shift)
