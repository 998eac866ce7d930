"""Config-driven command line entry point.

Usage::

    calibra [COMMAND] --config PATH [--seed N] [--out DIR] [--format json,csv,plotdata,png]

Exit status is 0 on success, 2 when a verdict fails or a learner runs out of
budget, and 1 on any error (in which case nothing is written).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import jsonschema
import numpy as np

from . import plotting
from .core import Discretization, GroupCollection, LossFunction, Nature, Predictor, RandomStream, TypeSpace, ValidationError
from .fixtures import pop4, random_instance
from .hardness import (
    DecisionConflictConfig,
    FractionConfig,
    HypothesisError,
    LossConflictConfig,
    run_decision_conflict_experiment,
    run_fraction_preservation,
    run_loss_conflict_experiment,
)
from .learn import (
    BudgetExhausted,
    LearnerConfig,
    LearnTrace,
    learn_multiaccurate,
    learn_multicalibrated,
    loss_weighted_pipeline,
    omnipredict,
)
from .metrics import (
    ActionFunction,
    class_from_groups,
    exp_loss,
    loss_gap,
    ma_error,
    mac_error,
    mad_error,
    mc_cw_error,
    mc_full_error,
)
from .reports import (
    AUDIT_CSV_COLUMNS,
    ArtifactSet,
    Instance,
    audit_to_dict,
    canonical_json,
    canonical_line,
    emit_report,
    instance_from_dict,
    predictor_csv,
)
from .rules import (
    affine_projection,
    affineness_distance,
    compose,
    lipschitz_estimate,
    loss_min_rule,
    mac_rule,
    rule_from_dict,
    violation,
)

log = logging.getLogger("calibra")

COMMANDS = ("generate", "audit", "learn", "rules", "omnipredict", "hardness")
FORMATS = ("json", "csv", "plotdata", "png")
DEFAULT_FORMATS = ("json", "csv", "plotdata", "png")

_LEARNER = {
    "type": "object",
    "properties": {
        "alpha": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "lam": {"type": ["number", "null"]},
        "eta": {"type": ["number", "null"]},
        "max_iter": {"type": ["integer", "null"], "minimum": 1},
        "mode": {"enum": ["ma-cw", "ma-threshold", "mc-cw", "mc-full", "scalar-mc"]},
        "step": {"enum": ["fixed", "residual", None]},
    },
    "required": ["alpha"],
    "additionalProperties": False,
}
_TABLE = {"type": "array", "items": {"type": "array", "items": {"type": ["number", "string"]}, "minItems": 2, "maxItems": 2}}

CONFIG_SCHEMA: dict[str, Any] = {
    "type": "object",
    "properties": {
        "schema_version": {"const": 1},
        "command": {"enum": list(COMMANDS)},
        "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
        "formats": {"type": "array", "items": {"enum": list(FORMATS)}},
        "input": {"type": "string"},
        "instance": {"type": "object"},
        "metrics": {"type": "array", "items": {"enum": ["ma-cw", "ma-threshold", "mc-cw", "mc-full", "mad", "mac", "loss"]}},
        "lam": {"type": "number"},
        "lams": {"type": "array", "items": {"type": "number"}},
        "rule": {"type": "object"},
        "rules": {"type": "array", "items": {"type": "object"}},
        "resolution": {"type": "integer", "minimum": 2},
        "loss": _TABLE,
        "learner": _LEARNER,
        "alphas": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1}},
        "experiment": {"enum": ["decision-conflict", "loss-conflict", "fraction-preservation"]},
        "size": {"type": "integer", "minimum": 2},
        "gamma": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "lambda": {"type": "number"},
        "alpha": {"type": "number"},
        "epsilon_AC": {"type": "number", "minimum": 0, "maximum": 1},
        "n_keys": {"type": "integer", "minimum": 1},
        "key_policy": {
            "oneOf": [
                {"const": "derived"},
                {"type": "object", "properties": {"keys": {"type": "array", "items": {"type": "string", "pattern": "^[0-9a-fA-F]{32}$"}}}, "required": ["keys"]},
            ]
        },
        "witness": {"type": "array", "minItems": 3, "maxItems": 3},
        "options": {"type": "object"},
    },
    "required": ["schema_version", "command"],
    "additionalProperties": False,
    "allOf": [
        {"if": {"properties": {"command": {"const": "audit"}}}, "then": {"required": ["input", "metrics"]}},
        {"if": {"properties": {"command": {"const": "learn"}}}, "then": {"required": ["input", "learner"]}},
        {"if": {"properties": {"command": {"const": "rules"}}}, "then": {"required": ["rules"]}},
        {"if": {"properties": {"command": {"const": "omnipredict"}}}, "then": {"required": ["input"]}},
        {"if": {"properties": {"command": {"const": "hardness"}}}, "then": {"required": ["experiment"]}},
        {"if": {"properties": {"command": {"const": "generate"}}}, "then": {"required": ["instance"]}},
    ],
}


@dataclass
class RunConfig:
    command: str
    doc: dict[str, Any]
    base_dir: Path
    seeds: list[int]
    formats: tuple[str, ...]
    out_dir: Path

    def path(self, key: str) -> Path:
        p = Path(self.doc[key])
        p = p if p.is_absolute() else self.base_dir / p
        if not p.exists():
            raise ValidationError(f"input file {p} does not exist")
        return p

    def instance(self) -> Instance:
        with open(self.path("input")) as fh:
            return instance_from_dict(json.load(fh))


@dataclass
class Outcome:
    artifacts: ArtifactSet = field(default_factory=ArtifactSet)
    failed: bool = False
    messages: list[str] = field(default_factory=list)


def load_config(path: Path, seed: int | None, out: Path, formats: Sequence[str] | None, command: str | None) -> RunConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read config {path}: {exc}") from exc
    try:
        jsonschema.validate(doc, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ValidationError(f"config does not match the schema: {exc.message}") from exc
    if command is not None and command != doc["command"]:
        raise ValidationError(f"command {command!r} does not match the config's {doc['command']!r}")
    seeds = [seed] if seed is not None else list(doc.get("seeds", [0]))
    fmts = tuple(formats) if formats else tuple(doc.get("formats", DEFAULT_FORMATS))
    bad = [f for f in fmts if f not in FORMATS]
    if bad:
        raise ValidationError(f"unknown report formats {bad}")
    return RunConfig(doc["command"], doc, path.parent, seeds, fmts, out)


def _png(out: Outcome, cfg: RunConfig, name: str, data_fn) -> None:
    if "png" in cfg.formats:
        out.artifacts.add_bytes(name, data_fn())


def _loss(cfg: RunConfig, inst: Instance | None = None) -> LossFunction:
    if "loss" in cfg.doc:
        return LossFunction(np.asarray(cfg.doc["loss"], dtype=float)).certified()
    if inst is not None and inst.loss is not None:
        return inst.loss.certified()
    raise ValidationError("this command needs a loss table")


def _learner(doc: dict[str, Any], seed: int) -> LearnerConfig:
    return LearnerConfig(
        alpha=float(doc["alpha"]),
        lam=doc.get("lam"),
        eta=doc.get("eta"),
        max_iter=doc.get("max_iter"),
        mode=doc.get("mode", "ma-cw"),
        seed=seed,
        step=doc.get("step"),
    )


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_generate(cfg: RunConfig) -> Outcome:
    out = Outcome()
    spec = cfg.doc["instance"]
    for seed in cfg.seeds:
        if spec.get("fixture") == "pop4":
            inst = pop4()
        elif "random" in spec:
            r = spec["random"]
            inst = random_instance(
                RandomStream(seed, "generate"),
                size=int(r.get("size", 64)),
                k=int(r.get("k", 2)),
                n_groups=int(r.get("n_groups", 4)),
                deterministic=bool(r.get("deterministic", False)),
                ordered=bool(r.get("ordered", False)),
                uniform=bool(r.get("uniform", False)),
            )
        else:
            raise ValidationError("instance must name a fixture ('pop4') or give 'random' parameters")
        stem = "instance" if len(cfg.seeds) == 1 else f"instance-{seed}"
        out.artifacts.add_text(f"{stem}.json", canonical_json(inst.to_dict()))
        if "csv" in cfg.formats and inst.predictor is not None:
            out.artifacts.add_text(f"{stem}.predictor.csv", predictor_csv(inst.predictor))
    return out


def _audit_reports(cfg: RunConfig, inst: Instance) -> dict[str, Any]:
    if inst.predictor is None:
        raise ValidationError("audit input needs a predictor")
    lam = cfg.doc.get("lam")
    reports: dict[str, Any] = {}
    rule = rule_from_dict(cfg.doc["rule"]) if "rule" in cfg.doc else None
    for metric in cfg.doc["metrics"]:
        if metric == "ma-cw":
            reports[metric] = ma_error(inst.pop, inst.nature, inst.predictor, inst.groups, "cw")
        elif metric == "ma-threshold":
            reports[metric] = ma_error(inst.pop, inst.nature, inst.predictor, inst.groups, "threshold", inst.types)
        elif metric in ("mc-cw", "mc-full"):
            if lam is None:
                raise ValidationError(f"metric {metric} needs 'lam'")
            fn = mc_cw_error if metric == "mc-cw" else mc_full_error
            reports[metric] = fn(inst.pop, inst.nature, inst.predictor, inst.groups, Discretization(lam))
        elif metric == "mad":
            if rule is None:
                raise ValidationError("metric mad needs a 'rule'")
            reports[metric] = mad_error(inst.pop, inst.nature, inst.predictor, rule, inst.groups)
        elif metric in ("mac", "loss"):
            loss = _loss(cfg, inst)
            h = compose(rule if rule is not None else loss_min_rule(loss), inst.predictor)
            if metric == "mac":
                reports[metric] = mac_error(inst.pop, inst.nature, h, loss, inst.groups)
            else:
                H = class_from_groups(inst.groups)
                reports[metric] = {
                    "exp_loss": exp_loss(inst.pop, inst.nature, h, loss),
                    "loss_gap": loss_gap(inst.pop, inst.nature, h, loss, H),
                    "benchmark": "indicators of the groups and their complements",
                }
    return reports


def cmd_audit(cfg: RunConfig) -> Outcome:
    out = Outcome()
    inst = cfg.instance()
    reports = _audit_reports(cfg, inst)
    doc = {
        "command": "audit",
        "metrics": {m: (audit_to_dict(r) if not isinstance(r, dict) else r) for m, r in reports.items()},
    }
    series: dict[str, list[tuple[float, float]]] = {}
    for m, r in reports.items():
        if isinstance(r, dict):
            continue
        emit_report(None, [f for f in cfg.formats if f == "csv"], f"audit_{m}", r.rows(), AUDIT_CSV_COLUMNS, artifacts=out.artifacts)
        series[m] = [(float(i), abs(float(g))) for i, g in enumerate(r.gaps)]
    emit_report(doc, cfg.formats, "audit", plot_series=series, artifacts=out.artifacts)
    heads = {m: r.max_gap for m, r in reports.items() if not isinstance(r, dict)}
    _png(out, cfg, "audit.png", lambda: plotting.bar_figure(list(heads), list(heads.values()), "max |gap|", "audit headline gaps"))
    return out


def _run_learner(inst: Instance, lc: LearnerConfig) -> tuple[Predictor, LearnTrace, bool]:
    try:
        if lc.mode in ("ma-cw", "ma-threshold"):
            pred, trace = learn_multiaccurate(inst.pop, inst.nature, inst.groups, lc, inst.types)
        elif lc.mode in ("mc-cw", "mc-full"):
            pred, trace = learn_multicalibrated(inst.pop, inst.nature, inst.groups, lc)
        else:
            raise ValidationError("use the omnipredict command for scalar calibration")
        return pred, trace, True
    except BudgetExhausted as exc:
        return exc.predictor, exc.trace, False


def cmd_learn(cfg: RunConfig) -> Outcome:
    out = Outcome()
    inst = cfg.instance()
    runs = []
    for seed in cfg.seeds:
        lc = _learner(cfg.doc["learner"], seed)
        pred, trace, ok = _run_learner(inst, lc)
        runs.append((seed, lc, pred, trace, ok))
        if not ok:
            out.failed = True
            out.messages.append(f"seed {seed}: learner budget exhausted")
    seed, lc, pred, trace, ok = runs[0]
    learned = Instance(inst.pop, inst.types, inst.nature, inst.groups, pred, inst.loss)
    out.artifacts.add_text("predictor.json", canonical_json(learned.to_dict()))
    if "csv" in cfg.formats:
        out.artifacts.add_text("predictor.csv", predictor_csv(pred))
    out.artifacts.add_text("trace.jsonl", "".join(canonical_line(r.to_dict()) + "\n" for r in trace.records))
    sweep = []
    for a in cfg.doc.get("alphas", []):
        slc = LearnerConfig(alpha=a, lam=lc.lam, eta=None, max_iter=lc.max_iter, mode=lc.mode, seed=lc.seed, step=lc.step)
        _, st, sok = _run_learner(inst, slc)
        sweep.append({"alpha": a, "final_gap": st.final_gap, "iterations": st.iterations, "success": sok})
    doc = {
        "command": "learn",
        "runs": [
            {"seed": s, "config": c.to_dict(), "trace": t.to_dict(), "budget": c.budget(inst.nature.k), "success": k}
            for s, c, _, t, k in runs
        ],
        "sweep": sweep,
    }
    series = {"trace": [(float(r.iteration), abs(r.gap)) for r in trace.records]}
    if sweep:
        series["final_gap_vs_alpha"] = [(s["alpha"], s["final_gap"]) for s in sweep]
        series["alpha"] = [(s["alpha"], s["alpha"]) for s in sweep]
    emit_report(
        doc,
        cfg.formats,
        "learn",
        [{"seed": s, "mode": c.mode, "alpha": c.alpha, "iterations": t.iterations, "final_gap": t.final_gap, "success": k} for s, c, _, t, k in runs],
        ("seed", "mode", "alpha", "iterations", "final_gap", "success"),
        series,
        out.artifacts,
    )
    _png(out, cfg, "learn_trace.png", lambda: plotting.line_figure({"audited |gap|": series["trace"]}, "iteration", "|gap|", f"{lc.mode} trace", {"alpha": lc.alpha}))
    if sweep:
        _png(
            out,
            cfg,
            "learn_gap_vs_alpha.png",
            lambda: plotting.line_figure(
                {"final gap": series["final_gap_vs_alpha"], "alpha": series["alpha"]}, "alpha", "final audit gap", "gap vs alpha", logx=True
            ),
        )
    out.artifacts.add_text("timing.json", json.dumps({"scan_seconds": [t.scan_seconds for _, _, _, t, _ in runs]}) + "\n")
    return out


def cmd_rules(cfg: RunConfig) -> Outcome:
    out = Outcome()
    m = int(cfg.doc.get("resolution", 10))
    rules = [(f"rule{i}", rule_from_dict(r)) for i, r in enumerate(cfg.doc["rules"])]
    if "loss" in cfg.doc:
        loss = _loss(cfg)
        rules += [("loss-min", loss_min_rule(loss)), ("mac", mac_rule(loss))]
    rows, series, entries = [], {}, []
    for name, rule in rules:
        cert = affineness_distance(rule, m, seed=cfg.seeds[0])
        lip = lipschitz_estimate(rule, m, seed=cfg.seeds[0])
        proj = affine_projection(rule)
        entries.append(
            {
                "name": name,
                "rule": rule.to_dict(),
                "certificate": cert.to_dict(),
                "lipschitz": lip if math.isfinite(lip) else None,
                "lipschitz_certificate": "finite" if math.isfinite(lip) else "no finite certificate",
                "affine_projection": proj.to_dict(),
            }
        )
        rows.append({"name": name, "kind": rule.kind, "epsilon": cert.epsilon, "gamma": cert.gamma, "lipschitz": lip if math.isfinite(lip) else None})
        gs = np.linspace(0, 1, 41)
        series[name] = [(float(g), violation(rule, cert.y, cert.y2, float(g))) for g in gs]
    emit_report({"command": "rules", "resolution": m, "rules": entries}, cfg.formats, "rules", rows, ("name", "kind", "epsilon", "gamma", "lipschitz"), series, out.artifacts)
    _png(out, cfg, "rules.png", lambda: plotting.line_figure(series, "mixing weight", "affineness violation on witness segment", "rule affineness"))
    return out


def cmd_omnipredict(cfg: RunConfig) -> Outcome:
    out = Outcome()
    inst = cfg.instance()
    loss = _loss(cfg, inst)
    lams = cfg.doc.get("lams") or [cfg.doc.get("lam", 0.25)]
    H = class_from_groups(inst.groups)
    entries, series = [], {"loss_gap": [], "bound": []}
    for lam in lams:
        d = Discretization(lam)
        if "learner" in cfg.doc:
            lc = _learner({**cfg.doc["learner"], "lam": lam, "mode": "mc-full"}, cfg.seeds[0])
            pred, trace, ok = _run_learner(inst, lc)
            if not ok:
                out.failed = True
                out.messages.append(f"lam={lam}: learner budget exhausted")
        elif inst.predictor is not None:
            pred = inst.predictor
        else:
            raise ValidationError("omnipredict needs a predictor in the input or a 'learner' block")
        res = omnipredict(inst.pop, inst.nature, pred, loss, inst.groups, d)
        gap = loss_gap(inst.pop, inst.nature, res.action, loss, H)
        entry = {"lam": lam, "alpha": res.alpha, "bound": res.bound, "loss_gap": gap, "within_bound": gap <= res.bound + 1e-12}
        if "learner" in cfg.doc:
            lc = LearnerConfig(alpha=float(cfg.doc["learner"]["alpha"]), lam=lam, mode="scalar-mc", seed=cfg.seeds[0])
            try:
                pw = loss_weighted_pipeline(inst.pop, inst.nature, loss, inst.groups, lc)
                entry["loss_weighted"] = {"alpha": pw.alpha, "bound": pw.bound, "loss_gap": pw.gap, "within_bound": pw.gap <= pw.bound + 1e-12}
            except BudgetExhausted:
                out.failed = True
                out.messages.append(f"lam={lam}: scalar learner budget exhausted")
        if not entry["within_bound"]:
            out.failed = True
        entries.append(entry)
        series["loss_gap"].append((lam, gap))
        series["bound"].append((lam, res.bound))
    emit_report({"command": "omnipredict", "results": entries}, cfg.formats, "omnipredict", entries, ("lam", "alpha", "bound", "loss_gap", "within_bound"), series, out.artifacts)
    _png(out, cfg, "omnipredict.png", lambda: plotting.line_figure(series, "lambda", "loss gap", "loss gap vs bound"))
    return out


def _keys(doc: dict[str, Any]) -> tuple[str, ...] | None:
    kp = doc.get("key_policy", "derived")
    return None if kp == "derived" else tuple(kp["keys"])


def cmd_hardness(cfg: RunConfig) -> Outcome:
    out = Outcome()
    doc = cfg.doc
    exp = doc["experiment"]
    opts = dict(doc.get("options", {}))
    reports = []
    for seed in cfg.seeds:
        if exp == "decision-conflict":
            rule = rule_from_dict(doc.get("rule", {"kind": "coordinate-threshold", "type": 0, "level": 0.95, "k": 2}))
            w = doc.get("witness", [[1.0, 0.0], [0.0, 1.0], 0.5])
            dc = DecisionConflictConfig(
                size=int(doc.get("size", 2**16)),
                lam=float(doc.get("lambda", 1 / 8)),
                alpha=float(doc.get("alpha", 0.01)),
                n_keys=int(doc.get("n_keys", 20)),
                seed=seed,
                keys=_keys(doc),
                witness=(tuple(w[0]), tuple(w[1]), float(w[2])) if w is not None else None,
                **opts,
            )
            reports += run_decision_conflict_experiment(rule, dc)
        elif exp == "loss-conflict":
            loss = _loss(cfg) if "loss" in doc else LossFunction.zero_one()
            lc = LossConflictConfig(
                size=int(doc.get("size", 2**16)),
                eps_ac=float(doc.get("epsilon_AC", 0.0125)),
                n_keys=int(doc.get("n_keys", 20)),
                seed=seed,
                gamma=float(doc.get("gamma", 0.75)),
                keys=_keys(doc),
                **opts,
            )
            reports += run_loss_conflict_experiment(loss, lc)
        else:
            fc = FractionConfig(
                size=int(doc.get("size", 2**16)),
                gamma=float(doc.get("gamma", 0.5)),
                n_keys=int(doc.get("n_keys", 20)),
                seed=seed,
                keys=_keys(doc),
                **opts,
            )
            reports += run_fraction_preservation(fc)
    counts: dict[str, int] = {}
    for r in reports:
        counts[r.verdict] = counts.get(r.verdict, 0) + 1
    if counts.get("FAIL"):
        out.failed = True
        out.messages.append(f"{counts['FAIL']} trial(s) failed")
    summary = {"command": "hardness", "experiment": exp, "verdicts": counts, "reports": [r.to_dict() for r in reports]}
    main = [r for r in reports if not r.experiment.endswith("/key-aware")]
    series = {
        "measured": [(float(i), float(r.loss_gap if r.measured == "loss_gap" else r.decision_error)) for i, r in enumerate(main) if (r.loss_gap if r.measured == "loss_gap" else r.decision_error) is not None],
        "threshold": [(float(i), r.bound - r.tolerance if r.comparison == "ge" else r.bound + r.tolerance) for i, r in enumerate(main)],
    }
    controls = [r for r in reports if r.experiment.endswith("/key-aware")]
    if controls:
        series["key-aware"] = [(float(i), r.decision_error) for i, r in enumerate(controls)]
    emit_report(summary, cfg.formats, "hardness", [r.csv_row() for r in reports], reports[0].CSV_COLUMNS if reports else (), series, out.artifacts)
    _png(out, cfg, "hardness.png", lambda: plotting.line_figure(series, "trial", "measured", exp))
    return out


HANDLERS = {
    "generate": cmd_generate,
    "audit": cmd_audit,
    "learn": cmd_learn,
    "rules": cmd_rules,
    "omnipredict": cmd_omnipredict,
    "hardness": cmd_hardness,
}


def run(config: Path, seed: int | None = None, out: Path | None = None, formats: Sequence[str] | None = None, command: str | None = None) -> int:
    """Executes a config file; returns the process exit status."""
    try:
        cfg = load_config(Path(config), seed, Path(out) if out is not None else Path("calibra-out"), formats, command)
        outcome = HANDLERS[cfg.command](cfg)
        outcome.artifacts.write(cfg.out_dir)
    except (ValidationError, HypothesisError, KeyError, TypeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for msg in outcome.messages:
        print(msg, file=sys.stderr)
    return 2 if outcome.failed else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="calibra", description="Multi-group calibration audits, learners and conflict experiments.")
    p.add_argument("command", nargs="?", choices=COMMANDS, help="optional; must match the config's command")
    p.add_argument("--config", required=True, type=Path, help="JSON run configuration")
    p.add_argument("--seed", type=int, default=None, help="override the config's seed list with one seed")
    p.add_argument("--out", type=Path, default=Path("calibra-out"), help="output directory")
    p.add_argument("--format", default=None, help="comma-separated subset of json,csv,plotdata,png")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    formats = [f.strip() for f in args.format.split(",") if f.strip()] if args.format else None
    return run(args.config, args.seed, args.out, formats, args.command)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
