"""Named fixtures and a seeded random-instance generator."""

from __future__ import annotations

import numpy as np

from .core import GroupCollection, LossFunction, Nature, Population, Predictor, RandomStream, TypeSpace
from .reports import Instance


def pop4() -> Instance:
    """Uniform four-element domain; elements 0, 1 have type 0 and 2, 3 type 1.

    The predictor is (1/2, 1/2) everywhere and the loss wants type 0
    rejected and type 1 accepted.
    """
    pop = Population.uniform(4)
    nature = Nature.from_labels([0, 0, 1, 1], 2)
    groups = GroupCollection.from_members(4, {"X": range(4), "{0,1}": [0, 1], "{2,3}": [2, 3]})
    return Instance(pop, TypeSpace(2, ordered=True), nature, groups, Predictor.uniform(4, 2), LossFunction.zero_one())


def random_instance(
    rng: RandomStream,
    size: int,
    k: int,
    n_groups: int,
    deterministic: bool = False,
    ordered: bool = False,
    uniform: bool = False,
    grid: float | None = None,
) -> Instance:
    """A random population, nature, predictor, groups and loss.

    The first group is the full domain ``"X"``; the others include each
    element at a rate that depends on its most likely type.

    With ``grid`` the predictor's entries are multiples of ``grid``, which
    makes discretization boundaries show up often.
    """
    gen = rng.generator
    if uniform:
        pop = Population.uniform(size)
    else:
        w = gen.random(size) + 0.05
        pop = Population(w / w.sum())
    if deterministic:
        nature = Nature.from_labels(gen.integers(0, k, size=size), k)
    else:
        nature = Nature(gen.dirichlet(np.ones(k) * 0.7, size=size))
    if grid is not None:
        m = int(round(1 / grid))
        counts = gen.multinomial(m, np.ones(k) / k, size=size)
        pred = Predictor(counts / m)
    else:
        pred = Predictor(gen.dirichlet(np.ones(k), size=size))
    masks = {"X": np.ones(size, dtype=bool)}
    top = np.argmax(nature.probs, axis=1)
    for g in range(max(0, n_groups - 1)):
        # Inclusion rate depends on the most likely type, so groups carry signal.
        rate = gen.uniform(0.05, 0.95, size=k)
        m = gen.random(size) < rate[top]
        if not m.any():
            m[gen.integers(0, size)] = True
        masks[f"g{g}"] = m
    groups = GroupCollection.from_masks(masks)
    loss = LossFunction(gen.random((k, 2)))
    return Instance(pop, TypeSpace(k, ordered=ordered), nature, groups, pred, loss)


def random_nontrivial_loss(rng: RandomStream, k: int) -> LossFunction:
    """A random loss with at least one accept-preferring and one reject-preferring type."""
    gen = rng.generator
    while True:
        table = gen.random((k, 2))
        loss = LossFunction(table)
        cert = loss.find_certificate()
        if cert is not None and cert.alpha > 0.05:
            return LossFunction(table, cert)
