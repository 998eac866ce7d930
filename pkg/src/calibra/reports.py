"""Serialization: instance documents, canonical JSON, CSV and plot data."""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .core import GroupCollection, LossFunction, Nature, Population, Predictor, TypeSpace, ValidationError
from .metrics import AuditReport

INSTANCE_SCHEMA = "calibra.instance"
INSTANCE_VERSION = 1
SIG_DIGITS = 12


# ---------------------------------------------------------------------------
# Canonical encoding
# ---------------------------------------------------------------------------


def canonical_float(x: float) -> float | str:
    """Rounds to 12 significant digits; non-finite values become strings."""
    if not math.isfinite(x):
        return "nan" if math.isnan(x) else ("inf" if x > 0 else "-inf")
    r = float(f"{x:.{SIG_DIGITS}g}")
    return 0.0 if r == 0 else r


def canonicalize(obj: Any) -> Any:
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return canonical_float(float(obj))
    if isinstance(obj, np.ndarray):
        return canonicalize(obj.tolist())
    if isinstance(obj, Mapping):
        return {str(k): canonicalize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [canonicalize(v) for v in obj]
    if obj is None or isinstance(obj, str):
        return obj
    if hasattr(obj, "to_dict"):
        return canonicalize(obj.to_dict())
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def canonical_json(obj: Any) -> str:
    return json.dumps(canonicalize(obj), sort_keys=True, indent=2, ensure_ascii=True, allow_nan=False) + "\n"


def canonical_line(obj: Any) -> str:
    """Compact single-line form, used for JSON-lines traces."""
    return json.dumps(canonicalize(obj), sort_keys=True, separators=(",", ":"), ensure_ascii=True, allow_nan=False)


def _csv_cell(v: Any) -> str:
    if v is None:
        return ""
    c = canonicalize(v)
    if isinstance(c, float):
        return repr(c)
    if isinstance(c, (list, dict)):
        return json.dumps(c, sort_keys=True)
    return str(c)


def csv_text(rows: Iterable[Mapping[str, Any]], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_csv_cell(row.get(c)) for c in columns])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Audit reports
# ---------------------------------------------------------------------------

AUDIT_CSV_COLUMNS = ("group", "index", "center", "gap", "group_mass")


def audit_to_dict(rep: AuditReport) -> dict[str, Any]:
    w = rep.witness
    return {
        "kind": rep.kind,
        "max_gap": rep.max_gap,
        "witness": None
        if w is None
        else {"group": w.group, "index": w.index, "center": list(w.center) if isinstance(w.center, tuple) else w.center, "gap": rep.witness_gap},
        "group_mass": rep.group_mass,
        "constraints": rep.rows(),
    }


def audit_csv(rep: AuditReport) -> str:
    return csv_text(rep.rows(), AUDIT_CSV_COLUMNS)


# ---------------------------------------------------------------------------
# Instance documents
# ---------------------------------------------------------------------------


def _dec(x: float) -> str:
    return repr(float(x))


def _dec_rows(a: np.ndarray) -> list[list[str]]:
    return [[_dec(v) for v in row] for row in np.asarray(a, dtype=float)]


def _parse_rows(rows: Any, what: str) -> np.ndarray:
    try:
        return np.array([[float(v) for v in row] for row in rows], dtype=float)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"{what}: expected rows of decimal strings") from exc


def instance_to_dict(
    pop: Population,
    types: TypeSpace,
    nature: Nature,
    groups: GroupCollection,
    predictor: Predictor | None = None,
    loss: LossFunction | None = None,
) -> dict[str, Any]:
    doc: dict[str, Any] = {
        "schema": INSTANCE_SCHEMA,
        "version": INSTANCE_VERSION,
        "population": {"size": pop.size, "weights": [_dec(w) for w in pop.weights]},
        "types": {"k": types.k, "ordered": types.ordered, "values": None if types.values is None else [_dec(v) for v in types.values]},
        "nature": _dec_rows(nature.probs),
        "groups": [{"id": gid, "members": np.flatnonzero(m).tolist()} for gid, m in zip(groups.ids, groups.masks)],
    }
    if predictor is not None:
        doc["predictor"] = _dec_rows(predictor.probs)
    if loss is not None:
        doc["loss"] = _dec_rows(loss.table)
    return doc


class Instance:
    """A parsed instance document."""

    def __init__(
        self,
        pop: Population,
        types: TypeSpace,
        nature: Nature,
        groups: GroupCollection,
        predictor: Predictor | None = None,
        loss: LossFunction | None = None,
    ) -> None:
        self.pop, self.types, self.nature, self.groups = pop, types, nature, groups
        self.predictor, self.loss = predictor, loss

    def to_dict(self) -> dict[str, Any]:
        return instance_to_dict(self.pop, self.types, self.nature, self.groups, self.predictor, self.loss)


def instance_from_dict(doc: Mapping[str, Any]) -> Instance:
    if doc.get("schema") != INSTANCE_SCHEMA or doc.get("version") != INSTANCE_VERSION:
        raise ValidationError("not a version-1 instance document")
    p = doc["population"]
    weights = np.array([float(w) for w in p["weights"]])
    if len(weights) != int(p["size"]):
        raise ValidationError("population size and weight count disagree")
    pop = Population(weights)
    t = doc["types"]
    types = TypeSpace(int(t["k"]), bool(t.get("ordered", False)), None if t.get("values") is None else tuple(float(v) for v in t["values"]))
    nature = Nature(_parse_rows(doc["nature"], "nature"))
    if nature.k != types.k or nature.size != pop.size:
        raise ValidationError("nature shape does not match the population and types")
    groups = GroupCollection.from_members(pop.size, {g["id"]: g["members"] for g in doc["groups"]})
    pred = Predictor(_parse_rows(doc["predictor"], "predictor")) if doc.get("predictor") is not None else None
    if pred is not None and pred.probs.shape != nature.probs.shape:
        raise ValidationError("predictor shape does not match nature")
    loss = LossFunction(_parse_rows(doc["loss"], "loss")) if doc.get("loss") is not None else None
    return Instance(pop, types, nature, groups, pred, loss)


def predictor_csv(pred: Predictor) -> str:
    cols = ["element"] + [f"p{t}" for t in range(pred.k)]
    rows = ({"element": x, **{f"p{t}": pred.probs[x, t] for t in range(pred.k)}} for x in range(pred.size))
    return csv_text(rows, cols)


# ---------------------------------------------------------------------------
# Writers
# ---------------------------------------------------------------------------

PLOT_COLUMNS = ("series", "x", "y")


def plotdata_text(series: Mapping[str, Sequence[tuple[float, float]]]) -> str:
    rows = ({"series": name, "x": x, "y": y} for name in sorted(series) for x, y in series[name])
    return csv_text(rows, PLOT_COLUMNS)


class ArtifactSet:
    """Files staged in memory and written together, so failures leave nothing behind."""

    def __init__(self) -> None:
        self.files: dict[str, bytes] = {}

    def add_text(self, name: str, text: str) -> None:
        self.files[name] = text.encode("utf-8")

    def add_bytes(self, name: str, data: bytes) -> None:
        self.files[name] = data

    def write(self, out_dir: Path) -> list[Path]:
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
            paths = []
            for name in sorted(self.files):
                path = out_dir / name
                path.write_bytes(self.files[name])
                paths.append(path)
            return paths
        except OSError as exc:
            raise ValidationError(f"cannot write artifacts to {out_dir}: {exc}") from exc


def emit_report(
    report: Any,
    formats: Sequence[str],
    stem: str,
    csv_rows: Sequence[Mapping[str, Any]] | None = None,
    csv_columns: Sequence[str] | None = None,
    plot_series: Mapping[str, Sequence[tuple[float, float]]] | None = None,
    artifacts: ArtifactSet | None = None,
) -> ArtifactSet:
    """Stages ``<stem>.json``, ``<stem>.csv`` and ``<stem>.plot.csv`` as requested."""
    arts = artifacts if artifacts is not None else ArtifactSet()
    if "json" in formats:
        arts.add_text(f"{stem}.json", canonical_json(report))
    if "csv" in formats and csv_rows is not None and csv_columns is not None:
        arts.add_text(f"{stem}.csv", csv_text(csv_rows, csv_columns))
    if "plotdata" in formats and plot_series is not None:
        arts.add_text(f"{stem}.plot.csv", plotdata_text(plot_series))
    return arts
