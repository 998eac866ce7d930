"""Keyed pseudorandom subsets and the two conflict experiments.

A subset is drawn by thresholding a keyed hash of the element index. Any
learner or audit family that never sees the key ("key-oblivious") sees the
subset as noise, which is what the experiments exercise: calibrated
predictors built from key-oblivious groups cannot track the subset, so
decision accuracy or loss minimization fails on it. Every experiment also
runs a key-aware control.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence, TypeVar

import numpy as np

from .core import (
    Discretization,
    GroupCollection,
    KeyedHash,
    LossFunction,
    Nature,
    Population,
    Predictor,
    RandomStream,
    StochasticVector,
    ValidationError,
)
from .learn import LearnerConfig, learn_multiaccurate, learn_multicalibrated
from .metrics import (
    ActionFunction,
    exp_loss,
    loss_gap,
    ma_error,
    mac_error,
    mad_error,
    mc_cw_error,
    optimal_action,
    realized_cells,
)
from .rules import (
    AffinenessCertificate,
    DecisionRule,
    ITARule,
    affineness_distance,
    compose,
    hard_threshold_rule,
    lipschitz_estimate,
    loss_min_rule,
    mac_rule,
    violation,
)

T = TypeVar("T")
R = TypeVar("R")


class HypothesisError(ValidationError):
    """The experiment's preconditions do not hold for the supplied inputs."""


def thread_count() -> int:
    raw = os.environ.get("CALIBRA_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValidationError(f"CALIBRA_THREADS must be an integer, got {raw!r}") from None


def map_trials(fn: Callable[[T], R], items: Sequence[T]) -> list[R]:
    """Runs independent trials, at most ``CALIBRA_THREADS`` at a time, in input order."""
    workers = min(thread_count(), max(1, len(items)))
    if workers == 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# Subsets and probes
# ---------------------------------------------------------------------------


def binomial_tolerance(gamma: float, size: int) -> float:
    """Four standard deviations of a Bernoulli(gamma) frequency over ``size`` draws."""
    return 4.0 * math.sqrt(gamma * (1.0 - gamma) / size)


@dataclass(frozen=True)
class PseudorandomSubset:
    key: bytes = field(repr=False)
    gamma: float
    membership: np.ndarray = field(repr=False)
    realized: float

    @property
    def size(self) -> int:
        return int(self.membership.size)

    def contains(self, x: int) -> bool:
        return KeyedHash(self.key).value(x) < self.gamma


def pr_subset(key: bytes | KeyedHash, gamma: float, pop: Population) -> PseudorandomSubset:
    """Members are the elements whose keyed hash falls below ``gamma``."""
    if not 0 < gamma < 1:
        raise ValidationError("gamma must lie strictly between 0 and 1")
    if not pop.is_uniform:
        raise ValidationError("pseudorandom subsets are defined over uniform populations")
    prf = key if isinstance(key, KeyedHash) else KeyedHash(bytes(key))
    member = prf.values(pop.size) < gamma
    member.setflags(write=False)
    count = int(member.sum())
    if count == 0 or count == pop.size:
        raise ValidationError("realized subset is empty or full; choose another key")
    realized = count / pop.size
    if abs(realized - gamma) > binomial_tolerance(gamma, pop.size):
        raise ValidationError(
            f"realized fraction {realized:.6f} is more than four standard deviations from {gamma}; choose another key"
        )
    return PseudorandomSubset(prf.key, float(gamma), member, realized)


def key_oblivious_groups(
    size: int, n_groups: int, fractions: Sequence[float] = (0.5,), salt: object = "public"
) -> GroupCollection:
    """The full domain plus ``n_groups`` public hash groups.

    Group ``h{i}`` thresholds a publicly keyed hash at
    ``fractions[i % len(fractions)]``; no secret key is involved.
    """
    masks = {"X": np.ones(size, dtype=bool)}
    for i in range(n_groups):
        frac = fractions[i % len(fractions)]
        masks[f"h{i}"] = KeyedHash.derive("public-group", salt, i).values(size) < frac
    return GroupCollection.from_masks(masks)


@dataclass(frozen=True)
class ProbeResult:
    max_advantage: float
    witness: str | None
    advantages: dict[str, float]
    skipped_level_sets: int = 0


def indistinguishability_probe(
    subset: PseudorandomSubset,
    probes: GroupCollection,
    pred: Predictor | None = None,
    d: Discretization | None = None,
    min_fraction: float = 0.01,
) -> ProbeResult:
    """Largest ``|Pr[x in subset | x in P] - realized fraction|`` over probes ``P``.

    Groups smaller than ``min_fraction`` of the domain are rejected. When a
    predictor is given, its coordinate level sets are probed as well; level
    sets below the size floor are skipped and counted.
    """
    if probes.size != subset.size:
        raise ValidationError("probe family and subset live on different domains")
    n = subset.size
    sets: dict[str, np.ndarray] = {}
    for gid, m in zip(probes.ids, probes.masks):
        if m.sum() < min_fraction * n:
            raise ValidationError(f"probe {gid!r} covers less than {min_fraction:.0%} of the domain")
        sets[gid] = m
    skipped = 0
    if pred is not None:
        if d is None:
            raise ValidationError("level-set probes need a discretization")
        bins = d.index(pred.probs)
        for t in range(pred.k):
            for j in np.unique(bins[:, t]):
                m = bins[:, t] == j
                if m.sum() < min_fraction * n:
                    skipped += 1
                    continue
                sets[f"level[t={t},c={(j + 0.5) / d.count:g}]"] = m
    adv = {gid: abs(float(subset.membership[m].mean()) - subset.realized) for gid, m in sets.items()}
    if not adv:
        return ProbeResult(0.0, None, {}, skipped)
    top = max(adv.values())
    witness = min(g for g, v in adv.items() if v == top)
    return ProbeResult(top, witness, adv, skipped)


def nature_two_block(subset: PseudorandomSubset, y: Sequence[float], y2: Sequence[float]) -> Nature:
    """Members of ``subset`` get ``y``, everyone else ``y2``."""
    a = np.asarray(StochasticVector(tuple(y)))
    b = np.asarray(StochasticVector(tuple(y2)))
    if a.size != b.size:
        raise ValidationError("block vectors must have the same length")
    return Nature(np.where(subset.membership[:, None], a[None, :], b[None, :]))


def nature_loss_conflict(
    loss: LossFunction, pop: Population, key: bytes | KeyedHash, gamma: float = 0.75
) -> tuple[Nature, PseudorandomSubset]:
    """Three quarters of the domain get the certificate's strong type.

    The rest get the opposite witness, so the loss-minimizing action agrees
    with the minority block.
    """
    cert = loss.certificate
    if cert is None:
        raise ValidationError("loss has no nontriviality certificate")
    weak = cert.accept_type if cert.strong_type == cert.reject_type else cert.reject_type
    subset = pr_subset(key, gamma, pop)
    k = loss.k
    return nature_two_block(subset, np.eye(k)[cert.strong_type], np.eye(k)[weak]), subset


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

VERDICTS = ("PASS", "FAIL", "NOT-APPLICABLE", "VACUOUS")


@dataclass(frozen=True)
class ConflictReport:
    """One trial of a conflict experiment.

    ``comparison`` says how ``decision_error`` (or ``loss_gap``) is compared
    with ``bound - tolerance``: ``"ge"`` for lower bounds, ``"le"`` for
    upper bounds. ``calibration_limit`` is the largest calibration error
    the trial accepts.
    """

    experiment: str
    trial: int
    seed: int
    key: str
    calibration_error: float
    calibration_limit: float
    decision_error: float
    loss_gap: float | None
    bound: float
    tolerance: float
    comparison: str
    measured: str
    verdict: str
    config: dict[str, Any] = field(default_factory=dict)
    extras: dict[str, Any] = field(default_factory=dict)

    @staticmethod
    def decide(
        measured_value: float | None,
        calibration_error: float,
        calibration_limit: float,
        bound: float,
        tolerance: float,
        comparison: str,
        applicable: bool = True,
        vacuous: bool = False,
    ) -> str:
        if not applicable:
            return "NOT-APPLICABLE"
        if vacuous:
            return "VACUOUS"
        if measured_value is None:
            return "VACUOUS"
        if calibration_error > calibration_limit + 1e-12:
            return "FAIL"
        if comparison == "ge":
            ok = measured_value >= bound - tolerance
        else:
            ok = measured_value <= bound + tolerance
        return "PASS" if ok else "FAIL"

    def recompute_verdict(self) -> str:
        value = self.loss_gap if self.measured == "loss_gap" else self.decision_error
        return self.decide(
            value,
            self.calibration_error,
            self.calibration_limit,
            self.bound,
            self.tolerance,
            self.comparison,
            applicable=self.verdict != "NOT-APPLICABLE",
            vacuous=self.verdict == "VACUOUS",
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "experiment": self.experiment,
            "trial": self.trial,
            "seed": self.seed,
            "key": self.key,
            "calibration_error": self.calibration_error,
            "calibration_limit": self.calibration_limit,
            "decision_error": self.decision_error,
            "loss_gap": self.loss_gap,
            "bound": self.bound,
            "tolerance": self.tolerance,
            "comparison": self.comparison,
            "measured": self.measured,
            "verdict": self.verdict,
            "config": self.config,
            "extras": self.extras,
        }

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "ConflictReport":
        return cls(**doc)

    CSV_COLUMNS = (
        "experiment",
        "trial",
        "seed",
        "key",
        "calibration_error",
        "calibration_limit",
        "decision_error",
        "loss_gap",
        "bound",
        "tolerance",
        "comparison",
        "measured",
        "verdict",
    )

    def csv_row(self) -> dict[str, Any]:
        return {c: getattr(self, c) for c in self.CSV_COLUMNS}


def _trial_key(label: str, seed: int, trial: int, keys: Sequence[str] | None) -> KeyedHash:
    if keys:
        return KeyedHash(bytes.fromhex(keys[trial]))
    return KeyedHash.derive(label, seed, trial)


# ---------------------------------------------------------------------------
# Decision conflict
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DecisionConflictConfig:
    """Knobs of the calibration-versus-decision experiment.

    ``witness`` pins the violating pair ``(y, y2, gamma)``; by default the
    grid search picks the largest violation. ``lipschitz`` overrides the
    grid estimate of the rule's Lipschitz constant. ``fallback_tolerance`` replaces ``2 M lam`` when the rule has
    no finite Lipschitz certificate; the perturbation of the mixing weight
    then uses ``M = 1``.
    """

    size: int = 2**16
    lam: float = 1 / 8
    alpha: float = 0.01
    n_keys: int = 20
    seed: int = 0
    n_groups: int = 8
    group_fractions: tuple[float, ...] = (0.5, 0.25)
    kappa_eff: float = 64.0
    resolution: int = 10
    lipschitz: float | None = None
    fallback_tolerance: float = 0.05
    control_slack: float = 0.02
    key_aware_control: bool = True
    keys: tuple[str, ...] | None = None
    witness: tuple[tuple[float, ...], tuple[float, ...], float] | None = None

    def __post_init__(self) -> None:
        if self.keys is not None and len(self.keys) < self.n_keys:
            raise ValidationError("fewer explicit keys than trials")
        if self.size < 2 or self.n_keys < 1:
            raise ValidationError("need at least two elements and one key")

    def to_dict(self) -> dict[str, Any]:
        return {
            "size": self.size,
            "lam": self.lam,
            "alpha": self.alpha,
            "n_keys": self.n_keys,
            "seed": self.seed,
            "n_groups": self.n_groups,
            "group_fractions": list(self.group_fractions),
            "kappa_eff": self.kappa_eff,
            "resolution": self.resolution,
            "lipschitz": self.lipschitz,
            "fallback_tolerance": self.fallback_tolerance,
            "control_slack": self.control_slack,
            "key_aware_control": self.key_aware_control,
            "witness": None if self.witness is None else [list(self.witness[0]), list(self.witness[1]), self.witness[2]],
        }


def _largest_cell_check(
    pred: Predictor, subset: PseudorandomSubset, y: np.ndarray, y2: np.ndarray, d: Discretization, alpha: float
) -> dict[str, Any]:
    uniq, inv = realized_cells(pred.probs, d)
    sizes = np.bincount(inv, minlength=len(uniq))
    c = int(np.argmax(sizes))
    cell = inv == c
    g = float(subset.membership[cell].mean())
    avg = pred.probs[cell].mean(axis=0)
    dist = float(np.abs(avg - (g * y + (1 - g) * y2)).max())
    k = pred.k
    limit = 3 * k * alpha / d.lam**2 + d.lam
    return {"cell_fraction": float(cell.mean()), "cell_gamma": g, "distance": dist, "limit": limit, "holds": dist <= limit}


def run_decision_conflict_experiment(rule: DecisionRule, cfg: DecisionConflictConfig) -> list[ConflictReport]:
    """Calibrated-but-key-oblivious predictors versus a far-from-affine rule.

    Returns one report per key followed, when enabled, by one key-aware
    control report per key.
    """
    cert = affineness_distance(rule, cfg.resolution)
    if cfg.witness is not None:
        y, y2, g = cfg.witness
        cert = AffinenessCertificate(violation(rule, y, y2, g), tuple(map(float, y)), tuple(map(float, y2)), float(g), 0)
    if cert.epsilon <= 1e-9:
        raise HypothesisError("rule is affine on the probe grid; the experiment needs a far-from-affine rule")
    eps = cert.epsilon
    M = cfg.lipschitz if cfg.lipschitz is not None else lipschitz_estimate(rule, cfg.resolution)
    finite = math.isfinite(M)
    if finite and cfg.lam > 3 * eps / M + 1e-12:
        raise HypothesisError(f"lam={cfg.lam} exceeds 3 eps / M = {3 * eps / M:.6g}")
    k = rule.k
    d = Discretization(cfg.lam)
    pop = Population.uniform(cfg.size)
    groups = key_oblivious_groups(cfg.size, cfg.n_groups, cfg.group_fractions, salt=("decision", cfg.seed))
    learner = LearnerConfig(alpha=cfg.alpha, lam=cfg.lam, mode="mc-cw", seed=cfg.seed)
    y, y2 = np.asarray(cert.y), np.asarray(cert.y2)
    width = (M if finite else 1.0) / (eps * cfg.kappa_eff)
    tolerance = 4 * k / math.sqrt(cfg.size) + 2 * M * cfg.lam if finite else cfg.fallback_tolerance
    regime = {
        "lipschitz": M if finite else None,
        "kappa_ok": (cfg.kappa_eff >= 30 * M**2 / eps**2) if finite else None,
        "alpha_ok": (cfg.alpha <= cfg.lam**2 * eps / (60 * M * k)) if finite else None,
        "lam_ok": (cfg.lam <= eps / (3 * M)) if finite else None,
    }
    full = GroupCollection.full_domain(cfg.size)
    config = {**cfg.to_dict(), "rule": rule.to_dict(), "certificate": cert.to_dict()}

    def trial(i: int) -> list[ConflictReport]:
        key = _trial_key("decision-conflict", cfg.seed, i, cfg.keys)
        nu = (2 * RandomStream(cfg.seed, f"decision-conflict/nu/{i}").random() - 1) * width
        gamma = min(max(cert.gamma + nu, 1e-6), 1 - 1e-6)
        subset = pr_subset(key, gamma, pop)
        nature = nature_two_block(subset, y, y2)
        pred, trace = learn_multicalibrated(pop, nature, groups, learner)
        mc = mc_cw_error(pop, nature, pred, groups, d).max_gap
        mad = mad_error(pop, nature, pred, rule, full).max_gap
        verdict = ConflictReport.decide(mad, mc, cfg.alpha, eps / 2, tolerance, "ge")
        extras = {
            "gamma": gamma,
            "realized_fraction": subset.realized,
            "iterations": trace.iterations,
            "regime": regime,
            "largest_cell": _largest_cell_check(pred, subset, y, y2, d, cfg.alpha),
            "mean_prediction": [float(v) for v in pred.probs.mean(axis=0)],
        }
        out = [
            ConflictReport(
                "decision-conflict", i, cfg.seed, key.key.hex(), mc, cfg.alpha, mad, None, eps / 2, tolerance, "ge",
                "decision_error", verdict, config, extras,
            )
        ]
        if cfg.key_aware_control:
            aware = groups.union(GroupCollection.from_masks({"X1": np.asarray(subset.membership)}))
            pred_a, trace_a = learn_multicalibrated(pop, nature, aware, learner)
            mc_a = mc_cw_error(pop, nature, pred_a, aware, d).max_gap
            mad_a = mad_error(pop, nature, pred_a, rule, full).max_gap
            bound_a = k * cfg.alpha
            verdict_a = ConflictReport.decide(mad_a, mc_a, cfg.alpha, bound_a, cfg.control_slack, "le")
            out.append(
                ConflictReport(
                    "decision-conflict/key-aware", i, cfg.seed, key.key.hex(), mc_a, cfg.alpha, mad_a, None, bound_a,
                    cfg.control_slack, "le", "decision_error", verdict_a, config, {"iterations": trace_a.iterations},
                )
            )
        return out

    results = map_trials(trial, list(range(cfg.n_keys)))
    main = [r[0] for r in results]
    controls = [r[1] for r in results if len(r) > 1]
    return main + controls


# ---------------------------------------------------------------------------
# Loss conflict
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LossConflictConfig:
    size: int = 2**16
    eps_ac: float = 0.0125
    n_keys: int = 20
    seed: int = 0
    gamma: float = 0.75
    n_groups: int = 8
    group_fractions: tuple[float, ...] = (0.25, 0.5)
    learn_alpha: float = 0.01
    lam: float = 1 / 8
    tolerance: float = 0.01
    n_random_rules: int = 4
    keys: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        if self.keys is not None and len(self.keys) < self.n_keys:
            raise ValidationError("fewer explicit keys than trials")
        if not 0 <= self.eps_ac <= 1:
            raise ValidationError("eps_ac must lie in [0, 1]")

    def to_dict(self) -> dict[str, Any]:
        return {
            "size": self.size,
            "eps_ac": self.eps_ac,
            "n_keys": self.n_keys,
            "seed": self.seed,
            "gamma": self.gamma,
            "n_groups": self.n_groups,
            "group_fractions": list(self.group_fractions),
            "learn_alpha": self.learn_alpha,
            "lam": self.lam,
            "tolerance": self.tolerance,
            "n_random_rules": self.n_random_rules,
        }


def loss_conflict_bound(alpha: float, eps_ac: float) -> float:
    return alpha / 8 - eps_ac * (2 - 3 * alpha / 4)


def key_oblivious_battery(
    loss: LossFunction, pop: Population, nature: Nature, groups: GroupCollection, cfg: LossConflictConfig
) -> dict[str, ActionFunction]:
    """Action functions built without the subset key.

    Constants, group indicators and their complements, and a rule battery
    applied to predictors learned from the key-oblivious groups.
    """
    n = pop.size
    battery: dict[str, ActionFunction] = {}
    for c in (0.0, 0.25, 0.5, 0.75, 1.0):
        battery[f"const[{c:g}]"] = ActionFunction.constant(n, c)
    for gid, m in zip(groups.ids, groups.masks):
        battery[f"ind[{gid}]"] = ActionFunction.indicator(m)
        battery[f"ind[{gid}^c]"] = ActionFunction.indicator(~m)
    k = loss.k
    rules: dict[str, DecisionRule] = {
        "loss-min": loss_min_rule(loss),
        "mac": mac_rule(loss),
        "coord-threshold": hard_threshold_rule(loss.certificate.accept_type, 0.5, k),
    }
    gen = RandomStream(cfg.seed, "loss-conflict/rules").generator
    for j in range(cfg.n_random_rules):
        rules[f"ita{j}"] = ITARule(gen.random(k))
    ma_cfg = LearnerConfig(alpha=cfg.learn_alpha, mode="ma-cw", seed=cfg.seed)
    mc_cfg = LearnerConfig(alpha=cfg.learn_alpha, lam=cfg.lam, mode="mc-cw", seed=cfg.seed)
    predictors = {
        "ma": learn_multiaccurate(pop, nature, groups, ma_cfg)[0],
        "mc": learn_multicalibrated(pop, nature, groups, mc_cfg)[0],
    }
    for pname, pred in predictors.items():
        for rname, rule in rules.items():
            battery[f"{rname}({pname})"] = compose(rule, pred)
    return battery


def run_loss_conflict_experiment(loss: LossFunction, cfg: LossConflictConfig) -> list[ConflictReport]:
    """Classification-accurate, key-oblivious action functions versus loss minimization."""
    if loss.certificate is None:
        raise ValidationError("loss has no nontriviality certificate")
    alpha = loss.certificate.alpha
    pop = Population.uniform(cfg.size)
    groups = key_oblivious_groups(cfg.size, cfg.n_groups, cfg.group_fractions, salt=("loss", cfg.seed))
    full = GroupCollection.full_domain(cfg.size)
    H = [ActionFunction.constant(cfg.size, 0.0), ActionFunction.constant(cfg.size, 1.0)]
    bound = loss_conflict_bound(alpha, cfg.eps_ac)
    vacuous = bound - cfg.tolerance <= 0
    config = {**cfg.to_dict(), "loss": loss.table.tolist(), "certificate_alpha": alpha}

    def trial(i: int) -> ConflictReport:
        key = _trial_key("loss-conflict", cfg.seed, i, cfg.keys)
        nature, subset = nature_loss_conflict(loss, pop, key, cfg.gamma)
        battery = key_oblivious_battery(loss, pop, nature, groups, cfg)
        calib = ma_error(
            pop, nature, learn_multiaccurate(pop, nature, groups, LearnerConfig(cfg.learn_alpha, mode="ma-cw"))[0], groups
        ).max_gap
        audited: dict[str, dict[str, float]] = {}
        for name, h in battery.items():
            mac = mac_error(pop, nature, h, loss, full).max_gap
            if mac <= cfg.eps_ac:
                audited[name] = {"mac_error": mac, "loss_gap": loss_gap(pop, nature, h, loss, H)}
        star = optimal_action(nature, loss)
        losses = [exp_loss(pop, nature, h, loss) for h in H]
        min_gap = min((a["loss_gap"] for a in audited.values()), default=None)
        max_mac = max((a["mac_error"] for a in audited.values()), default=0.0)
        verdict = ConflictReport.decide(min_gap, 0.0, 0.0, bound, cfg.tolerance, "ge", vacuous=vacuous)
        extras = {
            "realized_fraction": subset.realized,
            "battery_size": len(battery),
            "audited": audited,
            "constant_losses": {"reject": losses[0], "accept": losses[1]},
            "optimal_acceptance": float(np.dot(pop.weights, star.acceptance)),
            "baseline": {
                "mac_error": mac_error(pop, nature, star, loss, full).max_gap,
                "loss_gap": loss_gap(pop, nature, star, loss, H),
            },
            "learned_calibration_error": calib,
        }
        return ConflictReport(
            "loss-conflict", i, cfg.seed, key.key.hex(), 0.0, 0.0, max_mac, min_gap, bound, cfg.tolerance, "ge",
            "loss_gap", verdict, config, extras,
        )

    return map_trials(trial, list(range(cfg.n_keys)))


# ---------------------------------------------------------------------------
# Fraction preservation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FractionConfig:
    size: int = 2**16
    gamma: float = 0.5
    n_keys: int = 20
    n_probes: int = 64
    probe_fraction: float = 0.25
    limit: float = 0.03
    seed: int = 0
    keys: tuple[str, ...] | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "size": self.size,
            "gamma": self.gamma,
            "n_keys": self.n_keys,
            "n_probes": self.n_probes,
            "probe_fraction": self.probe_fraction,
            "limit": self.limit,
            "seed": self.seed,
        }


def run_fraction_preservation(cfg: FractionConfig) -> list[ConflictReport]:
    pop = Population.uniform(cfg.size)
    masks = {
        f"p{j}": KeyedHash.derive("probe", cfg.seed, j).values(cfg.size) < cfg.probe_fraction for j in range(cfg.n_probes)
    }
    probes = GroupCollection.from_masks(masks)

    def trial(i: int) -> ConflictReport:
        key = _trial_key("fraction", cfg.seed, i, cfg.keys)
        subset = pr_subset(key, cfg.gamma, pop)
        res = indistinguishability_probe(subset, probes)
        verdict = ConflictReport.decide(res.max_advantage, 0.0, 0.0, cfg.limit, 0.0, "le")
        return ConflictReport(
            "fraction-preservation", i, cfg.seed, key.key.hex(), 0.0, 0.0, res.max_advantage, None, cfg.limit, 0.0,
            "le", "decision_error", verdict, cfg.to_dict(), {"witness": res.witness, "realized_fraction": subset.realized},
        )

    return map_trials(trial, list(range(cfg.n_keys)))
