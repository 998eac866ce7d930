"""Domain types, simplex arithmetic, discretization and deterministic randomness.

Every object here is immutable after construction. Array-valued fields are
stored as read-only numpy arrays so they can be shared between threads.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

SIMPLEX_TOL = 1e-9
_BOUNDARY_SNAP = 1e-9


class ValidationError(ValueError):
    """Raised when an input violates a domain invariant."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


def _check_rows_on_simplex(probs: np.ndarray, what: str) -> None:
    if probs.ndim != 2 or probs.shape[1] < 2:
        raise ValidationError(f"{what}: expected an (n, k) array with k >= 2, got shape {probs.shape}")
    if not np.all(np.isfinite(probs)):
        raise ValidationError(f"{what}: non-finite probabilities")
    if np.any(probs < -SIMPLEX_TOL) or np.any(probs > 1 + SIMPLEX_TOL):
        raise ValidationError(f"{what}: probabilities outside [0, 1]")
    bad = np.abs(probs.sum(axis=1) - 1.0) > SIMPLEX_TOL
    if np.any(bad):
        row = int(np.flatnonzero(bad)[0])
        raise ValidationError(f"{what}: row {row} sums to {probs[row].sum()!r}, not 1")


# ---------------------------------------------------------------------------
# Basic containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Population:
    """A finite domain ``0..size-1`` with a probability weight per element."""

    weights: np.ndarray

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 1 or w.size < 1:
            raise ValidationError("population needs at least one element")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise ValidationError("population weights must be finite and nonnegative")
        if abs(w.sum() - 1.0) > SIMPLEX_TOL:
            raise ValidationError(f"population weights sum to {w.sum()!r}, not 1")
        object.__setattr__(self, "weights", _frozen(w))

    @classmethod
    def uniform(cls, size: int) -> "Population":
        if size < 1:
            raise ValidationError("size must be positive")
        return cls(np.full(size, 1.0 / size))

    @property
    def size(self) -> int:
        return int(self.weights.size)

    @property
    def is_uniform(self) -> bool:
        return bool(np.allclose(self.weights, 1.0 / self.size, rtol=0, atol=1e-15))

    def bits(self, x: int) -> str:
        """Binary feature string of element ``x``."""
        width = max(1, math.ceil(math.log2(self.size))) if self.size > 1 else 1
        return format(x, f"0{width}b")


@dataclass(frozen=True)
class TypeSpace:
    """The label space ``T`` with ``k`` types.

    ``ordered`` marks rank semantics: index 0 is the best rank. ``values``
    attaches a number in [0, 1] to each type when types are probabilities.
    """

    k: int
    ordered: bool = False
    values: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if self.k < 2:
            raise ValidationError("need at least two types")
        if self.values is not None:
            vals = tuple(float(v) for v in self.values)
            if len(vals) != self.k:
                raise ValidationError("one numeric value per type required")
            if any(v < 0 or v > 1 for v in vals):
                raise ValidationError("numeric type values must lie in [0, 1]")
            if any(b <= a for a, b in zip(vals, vals[1:])):
                raise ValidationError("numeric type values must be strictly increasing")
            object.__setattr__(self, "values", vals)

    @classmethod
    def grid(cls, lam: float) -> "TypeSpace":
        """Types are the centers of a lambda grid, ordered by value."""
        d = Discretization(lam)
        return cls(k=d.count, ordered=True, values=tuple(float(c) for c in d.centers))


@dataclass(frozen=True)
class StochasticVector:
    """A point in the k-simplex."""

    entries: tuple[float, ...]

    def __post_init__(self) -> None:
        arr = np.asarray(self.entries, dtype=float).reshape(1, -1)
        _check_rows_on_simplex(arr, "stochastic vector")
        object.__setattr__(self, "entries", tuple(float(e) for e in arr[0]))

    @property
    def k(self) -> int:
        return len(self.entries)

    def __getitem__(self, t: int) -> float:
        return self.entries[t]

    def __iter__(self) -> Iterator[float]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __array__(self, dtype=None, copy=None) -> np.ndarray:
        return np.asarray(self.entries, dtype=dtype or float)


def unit_vector(t: int, k: int) -> StochasticVector:
    if k < 1 or not 0 <= t < k:
        raise ValidationError(f"type index {t} out of range for k={k}")
    e = [0.0] * k
    e[t] = 1.0
    return StochasticVector(tuple(e))


@dataclass(frozen=True)
class _Assignment:
    probs: np.ndarray

    def __post_init__(self) -> None:
        p = np.asarray(self.probs, dtype=float)
        _check_rows_on_simplex(p, type(self).__name__)
        object.__setattr__(self, "probs", _frozen(np.clip(p, 0.0, 1.0)))

    @property
    def size(self) -> int:
        return int(self.probs.shape[0])

    @property
    def k(self) -> int:
        return int(self.probs.shape[1])

    def __call__(self, x: int) -> StochasticVector:
        return StochasticVector(tuple(self.probs[x]))

    @property
    def is_deterministic(self) -> bool:
        return bool(np.all(np.any(self.probs == 1.0, axis=1)))


@dataclass(frozen=True)
class Nature(_Assignment):
    """Ground truth: element -> distribution over types."""

    @property
    def deterministic(self) -> bool:
        return self.is_deterministic

    @classmethod
    def from_labels(cls, labels: Sequence[int], k: int) -> "Nature":
        return cls(np.eye(k)[np.asarray(labels, dtype=int)])

    def as_predictor(self) -> "Predictor":
        return Predictor(self.probs)


@dataclass(frozen=True)
class Predictor(_Assignment):
    """A probabilistic predictor: element -> distribution over types."""

    @classmethod
    def uniform(cls, size: int, k: int) -> "Predictor":
        return cls(np.full((size, k), 1.0 / k))

    @classmethod
    def constant(cls, size: int, y: Sequence[float]) -> "Predictor":
        row = np.asarray(StochasticVector(tuple(y)))
        return cls(np.tile(row, (size, 1)))

    def as_nature(self) -> Nature:
        return Nature(self.probs)


@dataclass(frozen=True)
class GroupCollection:
    """An ordered family of subsets of the domain, each with a unique id.

    Members are stored as a boolean matrix of shape ``(len(ids), size)``.
    """

    size: int
    ids: tuple[str, ...]
    masks: np.ndarray

    def __post_init__(self) -> None:
        ids = tuple(str(i) for i in self.ids)
        if len(set(ids)) != len(ids):
            raise ValidationError("group ids must be unique")
        m = np.asarray(self.masks, dtype=bool).reshape(len(ids), self.size)
        m = m.copy()
        m.setflags(write=False)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "masks", m)

    @classmethod
    def from_members(cls, size: int, groups: Mapping[str, Iterable[int]]) -> "GroupCollection":
        ids = list(groups)
        masks = np.zeros((len(ids), size), dtype=bool)
        for row, gid in enumerate(ids):
            members = np.fromiter((int(x) for x in groups[gid]), dtype=np.int64)
            if members.size and (members.min() < 0 or members.max() >= size):
                raise ValidationError(f"group {gid!r} has members outside the population")
            masks[row, members] = True
        return cls(size, tuple(ids), masks)

    @classmethod
    def from_masks(cls, masks: Mapping[str, np.ndarray]) -> "GroupCollection":
        ids = list(masks)
        if not ids:
            raise ValidationError("use GroupCollection.empty(size) for an empty family")
        arr = np.stack([np.asarray(masks[i], dtype=bool) for i in ids])
        return cls(arr.shape[1], tuple(ids), arr)

    @classmethod
    def empty(cls, size: int) -> "GroupCollection":
        return cls(size, (), np.zeros((0, size), dtype=bool))

    @classmethod
    def full_domain(cls, size: int, gid: str = "X") -> "GroupCollection":
        return cls(size, (gid,), np.ones((1, size), dtype=bool))

    def __len__(self) -> int:
        return len(self.ids)

    def mask(self, gid: str) -> np.ndarray:
        return self.masks[self.ids.index(gid)]

    def members(self, gid: str) -> np.ndarray:
        return np.flatnonzero(self.mask(gid))

    def union(self, other: "GroupCollection") -> "GroupCollection":
        if other.size != self.size:
            raise ValidationError("group collections over different domains")
        return GroupCollection(self.size, self.ids + other.ids, np.vstack([self.masks, other.masks]))

    def with_complements(self) -> "GroupCollection":
        """Adds the complement of every group (id suffixed with ``^c``)."""
        ids = self.ids + tuple(f"{i}^c" for i in self.ids)
        return GroupCollection(self.size, ids, np.vstack([self.masks, ~self.masks]))

    def permuted(self, perm: np.ndarray) -> "GroupCollection":
        """Relabels elements: new element ``i`` is old element ``perm[i]``."""
        return GroupCollection(self.size, self.ids, self.masks[:, perm])


# ---------------------------------------------------------------------------
# Discretization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Discretization:
    """The lambda grid ``{lam/2, 3 lam/2, ..., 1 - lam/2}`` with half-open cells.

    Cell ``j`` is ``[j lam, (j+1) lam)``; the last cell is closed at 1.
    Values within 1e-9 of a cell boundary are snapped onto it before binning,
    so that floating-point noise cannot move a boundary value into the cell
    below.
    """

    lam: float

    def __post_init__(self) -> None:
        lam = float(self.lam)
        if not 0 < lam < 1:
            raise ValidationError("lambda must lie in (0, 1)")
        count = 1.0 / lam
        if abs(count - round(count)) > 1e-9:
            raise ValidationError("1/lambda must be an integer")
        object.__setattr__(self, "lam", 1.0 / round(count))

    @property
    def count(self) -> int:
        return int(round(1.0 / self.lam))

    @property
    def centers(self) -> np.ndarray:
        return (np.arange(self.count) + 0.5) / self.count

    def index(self, v: np.ndarray | float) -> np.ndarray:
        """Cell index of every value in ``v`` (same shape, int)."""
        scaled = np.asarray(v, dtype=float) * self.count
        nearest = np.rint(scaled)
        scaled = np.where(np.abs(scaled - nearest) <= _BOUNDARY_SNAP, nearest, scaled)
        return np.clip(np.floor(scaled), 0, self.count - 1).astype(np.int64)

    def center(self, v: np.ndarray | float) -> np.ndarray:
        return (self.index(v) + 0.5) / self.count

    def interval(self, j: int) -> tuple[float, float, bool]:
        """``(lo, hi, closed_right)`` of cell ``j``."""
        if not 0 <= j < self.count:
            raise ValidationError("cell index out of range")
        return j / self.count, (j + 1) / self.count, j == self.count - 1

    def contains(self, j: int, v: float) -> bool:
        return int(self.index(v)) == j


def discretize(y: Sequence[float] | np.ndarray, d: Discretization) -> np.ndarray:
    """Maps every coordinate of ``y`` to the center of its cell."""
    return d.center(np.asarray(y, dtype=float))


# ---------------------------------------------------------------------------
# Simplex projection
# ---------------------------------------------------------------------------


def project_rows(v: np.ndarray) -> np.ndarray:
    """Euclidean projection of every row of ``v`` onto the probability simplex.

    Sort-based algorithm: find the largest ``rho`` such that the ``rho``
    largest entries stay positive after a common shift ``theta``.
    """
    v = np.asarray(v, dtype=float)
    if not np.all(np.isfinite(v)):
        raise ValidationError("cannot project non-finite vectors")
    squeeze = v.ndim == 1
    v2 = np.atleast_2d(v)
    k = v2.shape[1]
    u = -np.sort(-v2, axis=1)
    css = np.cumsum(u, axis=1) - 1.0
    ind = np.arange(1, k + 1)
    cond = u - css / ind > 0
    rho = k - np.argmax(cond[:, ::-1], axis=1)
    theta = css[np.arange(v2.shape[0]), rho - 1] / rho
    w = np.maximum(v2 - theta[:, None], 0.0)
    # Renormalize the rounding residue (order 1e-16) so rows sum to 1.
    w /= w.sum(axis=1, keepdims=True)
    return w[0] if squeeze else w


def simplex_project(v: Sequence[float]) -> StochasticVector:
    return StochasticVector(tuple(project_rows(np.asarray(v, dtype=float))))


# ---------------------------------------------------------------------------
# Loss functions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NontrivialityCertificate:
    """Witnesses that a loss makes the accept/reject decision matter.

    ``reject_type`` has ``l(t,1) - l(t,0) >= 0`` (rejecting is at least as
    good), ``accept_type`` has a strictly negative gap. ``strong_type`` is
    whichever of the two has the larger absolute gap, and that gap is at
    least ``alpha``.
    """

    alpha: float
    strong_type: int
    reject_type: int
    accept_type: int


@dataclass(frozen=True)
class LossFunction:
    """A ``k x 2`` table ``table[t, a]`` of losses in [0, 1]."""

    table: np.ndarray
    certificate: NontrivialityCertificate | None = None

    def __post_init__(self) -> None:
        tab = np.asarray(self.table, dtype=float)
        if tab.ndim != 2 or tab.shape[1] != 2 or tab.shape[0] < 2:
            raise ValidationError("loss table must have shape (k, 2) with k >= 2")
        if not np.all(np.isfinite(tab)) or np.any(tab < 0) or np.any(tab > 1):
            raise ValidationError("loss entries must lie in [0, 1]")
        object.__setattr__(self, "table", _frozen(tab))
        if self.certificate is not None:
            self._check_certificate(self.certificate)

    @property
    def k(self) -> int:
        return int(self.table.shape[0])

    @property
    def gap(self) -> np.ndarray:
        """``l(t, 1) - l(t, 0)`` per type; negative means accepting is better."""
        return self.table[:, 1] - self.table[:, 0]

    def _check_certificate(self, c: NontrivialityCertificate) -> None:
        g = self.gap
        k = self.k
        if not all(0 <= t < k for t in (c.strong_type, c.reject_type, c.accept_type)):
            raise ValidationError("certificate type index out of range")
        if not c.alpha > 0:
            raise ValidationError("certificate alpha must be positive")
        if c.strong_type not in (c.reject_type, c.accept_type):
            raise ValidationError("strong type must be the reject or the accept witness")
        if g[c.reject_type] < 0 or g[c.accept_type] >= 0:
            raise ValidationError("certificate witnesses have the wrong gap signs")
        other = c.accept_type if c.strong_type == c.reject_type else c.reject_type
        if abs(g[c.strong_type]) < c.alpha - 1e-12 or abs(g[other]) > abs(g[c.strong_type]) + 1e-12:
            raise ValidationError("certificate inequalities do not hold on the table")

    def find_certificate(self) -> NontrivialityCertificate | None:
        """The certificate with the largest alpha, or None for trivial losses."""
        g = self.gap
        if not (np.any(g < 0) and np.any(g >= 0)):
            return None
        accept = int(np.argmin(g))
        reject = int(np.argmax(g))
        strong = reject if g[reject] >= -g[accept] else accept
        return NontrivialityCertificate(float(abs(g[strong])), strong, reject, accept)

    def certified(self) -> "LossFunction":
        cert = self.find_certificate()
        if cert is None:
            raise ValidationError("loss is trivial: no type prefers accepting or none prefers rejecting")
        return LossFunction(self.table, cert)

    @classmethod
    def zero_one(cls, k: int = 2) -> "LossFunction":
        """Type 0 should be rejected, every other type accepted."""
        tab = np.zeros((k, 2))
        tab[0] = (0.0, 1.0)
        tab[1:] = (1.0, 0.0)
        return cls(tab).certified()


TIE_TOL = 1e-12


def loss_min_accept(loss: LossFunction, y: np.ndarray) -> np.ndarray:
    """Loss-minimizing decision for each row of ``y`` (1 = accept).

    Accepts iff the expected loss of accepting is lower. Differences within
    ``TIE_TOL`` of zero count as ties, and ties reject.
    """
    s = np.asarray(y, dtype=float) @ loss.gap
    return (s < -TIE_TOL).astype(float)


# ---------------------------------------------------------------------------
# Randomness
# ---------------------------------------------------------------------------


def _digest_words(*parts: object, words: int = 4) -> list[int]:
    h = hashlib.blake2b(digest_size=8 * words)
    for p in parts:
        h.update(repr(p).encode())
        h.update(b"\x00")
    raw = h.digest()
    return [int.from_bytes(raw[8 * i : 8 * i + 8], "little") for i in range(words)]


class RandomStream:
    """Counter-based random stream keyed by ``(seed, stream_id)``.

    Backed by numpy's Philox generator. The Philox key is derived from a hash
    of the seed and the stream id, so substreams do not depend on the order
    in which they are created.
    """

    def __init__(self, seed: int, stream_id: str = "root") -> None:
        if not 0 <= int(seed) < 2**64:
            raise ValidationError("seed must be a 64-bit unsigned value")
        self.seed = int(seed)
        self.stream_id = str(stream_id)
        key = _digest_words(self.seed, self.stream_id, words=2)
        self.generator = np.random.Generator(np.random.Philox(key=np.array(key, dtype=np.uint64)))

    def substream(self, label: str | int) -> "RandomStream":
        return RandomStream(self.seed, f"{self.stream_id}/{label}")

    def random(self, size=None):
        return self.generator.random(size)

    def __repr__(self) -> str:
        return f"RandomStream(seed={self.seed}, stream_id={self.stream_id!r})"


def sample_type(y: Sequence[float] | StochasticVector, rng: RandomStream) -> int:
    """Draws ``t`` with probability ``y[t]``."""
    probs = np.asarray(y, dtype=float)
    u = rng.random()
    idx = int(np.searchsorted(np.cumsum(probs), u, side="right"))
    # Guard against the cumulative sum ending a hair below 1.
    idx = min(idx, probs.size - 1)
    while probs[idx] == 0.0:
        idx -= 1
    return idx


def sample_types(probs: np.ndarray, rng: RandomStream) -> np.ndarray:
    """Row-wise version of :func:`sample_type`; one uniform draw per row."""
    probs = np.asarray(probs, dtype=float)
    u = rng.random(probs.shape[0])
    cdf = np.cumsum(probs, axis=1)
    idx = (cdf <= u[:, None]).sum(axis=1)
    idx = np.minimum(idx, probs.shape[1] - 1)
    # Never land on a zero-probability type because of cdf rounding.
    for row in np.flatnonzero(probs[np.arange(probs.shape[0]), idx] == 0.0):
        nz = np.flatnonzero(probs[row] > 0)
        idx[row] = nz[nz <= idx[row]].max() if np.any(nz <= idx[row]) else nz.min()
    return idx


# ---------------------------------------------------------------------------
# Keyed hashing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KeyedHash:
    """A keyed pseudorandom function from element indices to [0, 1).

    Instantiated with keyed BLAKE2b over the 8-byte little-endian index; the
    top 53 bits of the 8-byte digest are read as a dyadic fraction.
    """

    key: bytes = field(repr=False)

    def __post_init__(self) -> None:
        if len(self.key) != 16:
            raise ValidationError("keys are 128-bit (16 bytes)")

    @classmethod
    def derive(cls, *parts: object) -> "KeyedHash":
        """Key derived deterministically from arbitrary labels."""
        h = hashlib.blake2b(digest_size=16, person=b"calibra-keygen")
        for p in parts:
            h.update(repr(p).encode())
            h.update(b"\x00")
        return cls(h.digest())

    def value(self, x: int) -> float:
        d = hashlib.blake2b(int(x).to_bytes(8, "little"), key=self.key, digest_size=8).digest()
        return (int.from_bytes(d, "little") >> 11) / 2.0**53

    def values(self, n: int) -> np.ndarray:
        key = self.key
        out = np.empty(n, dtype=np.uint64)
        blake = hashlib.blake2b
        for x in range(n):
            out[x] = int.from_bytes(blake(x.to_bytes(8, "little"), key=key, digest_size=8).digest(), "little")
        # Keep the top 53 bits so the float conversion is exact and < 1.
        return (out >> np.uint64(11)).astype(float) / 2.0**53
