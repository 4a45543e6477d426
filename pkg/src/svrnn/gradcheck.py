"""Finite-difference certification of the gradient engine.

`battery` checks every primitive on small randomized graphs and then an
end-to-end tiny model (two steps, three features, two classes, hidden width
four) covering the full loss, including its hierarchical and multi-entity
variants.  Because higher modules compose only these primitives, a green
battery certifies gradients everywhere.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import model as M
from . import objectives as O
from .autodiff import Graph, grad_check
from .data import EntitySeq, SequenceBatch
from .rng import NoiseSource, keyed_generator


def _rand(seed, *shape, lo=-1.0, hi=1.0):
    return keyed_generator(seed, "gradcheck", *shape).uniform(lo, hi, size=shape)


def primitive_checks(seed: int = 0, epsilon: float = 1e-5):
    """Yield (name, max relative error) for every primitive operation."""
    s = seed
    checks = {
        "matmul": (
            {"A": _rand(s, 3, 4), "B": _rand(s + 1, 4, 2)},
            lambda P, I: {"out": ad.reduce_sum(P["A"] @ P["B"])},
        ),
        "add": (
            {"X": _rand(s + 2, 5, 3), "b": _rand(s + 3, 3)},
            lambda P, I: {"out": ad.reduce_sum(P["X"] + P["b"])},
        ),
        "mul": (
            {"X": _rand(s + 4, 4, 4), "Y": _rand(s + 5, 4, 4)},
            lambda P, I: {"out": ad.reduce_sum(ad.mul(P["X"], P["Y"]))},
        ),
        "concat": (
            {"X": _rand(s + 6, 3, 2), "Y": _rand(s + 7, 3, 5)},
            lambda P, I: {"out": ad.reduce_sum(ad.tanh(ad.concat([P["X"], P["Y"]], axis=1)))},
        ),
        "slice": (
            {"X": _rand(s + 8, 3, 6)},
            lambda P, I: {
                "out": ad.reduce_sum(
                    ad.mul(ad.narrow(P["X"], 1, 4, axis=1), ad.narrow(P["X"], 1, 4, axis=1))
                )
            },
        ),
        "tanh": (
            {"X": _rand(s + 9, 4, 3)},
            lambda P, I: {"out": ad.reduce_sum(ad.tanh(P["X"]))},
        ),
        "sigmoid": (
            {"X": _rand(s + 10, 4, 3)},
            lambda P, I: {"out": ad.reduce_sum(ad.sigmoid(P["X"]))},
        ),
        "exp": (
            {"X": _rand(s + 11, 4, 3)},
            lambda P, I: {"out": ad.reduce_sum(ad.exp(P["X"]))},
        ),
        "log": (
            {"X": _rand(s + 12, 4, 3, lo=0.5, hi=2.0)},
            lambda P, I: {"out": ad.reduce_sum(ad.log(P["X"]))},
        ),
        "softmax": (
            {"X": _rand(s + 13, 4, 5)},
            lambda P, I: {"out": ad.reduce_sum(ad.mul(ad.softmax(P["X"]), ad.constant(_rand(s + 14, 4, 5))))},
        ),
        "sum": (
            {"X": _rand(s + 15, 4, 3)},
            lambda P, I: {"out": ad.reduce_sum(ad.tanh(ad.reduce_sum(P["X"], axis=1, keepdims=True)))},
        ),
        "mean": (
            {"X": _rand(s + 16, 4, 3)},
            lambda P, I: {"out": ad.reduce_mean(ad.mul(P["X"], P["X"]))},
        ),
        "dropout": (
            {"X": _rand(s + 17, 4, 3)},
            lambda P, I: {"out": ad.reduce_sum(ad.dropout_mask(P["X"], _mask(s, (4, 3))))},
        ),
    }
    for name, (params, build) in checks.items():
        yield name, grad_check(Graph(params, build), "out", epsilon=epsilon)


def _mask(seed, shape, rate=0.3):
    keep = keyed_generator(seed, "gradcheck-mask").random(shape) >= rate
    return keep.astype(np.float64) / (1.0 - rate)


def tiny_spec(variant: str = "flat") -> M.ModelSpec:
    kw = dict(dim_y=2, dim_z=2, hidden_width=4, dropout_rate=0.1, temperature=0.1)
    if variant == "flat":
        return M.ModelSpec(variant="flat", dim_x=(3,), **kw)
    if variant == "hierarchical":
        return M.ModelSpec(variant="hierarchical", dim_x=(3,), dim_c=2, **kw)
    if variant == "multi-entity":
        return M.ModelSpec(variant="multi-entity", dim_x=(3, 2), n_objects=1, **kw)
    raise ValueError(variant)


def tiny_batches(spec: M.ModelSpec, seed: int = 0, T: int = 2, n: int = 2):
    """Small mixed-observability dataset matching the spec's entity layout."""
    out = []
    for i in range(n):
        rng = keyed_generator(seed, "tiny-data", i)
        ents = []
        y = rng.integers(0, spec.dim_y, size=T)
        y[rng.random(T) < 0.5] = -1
        c = None
        if spec.hierarchical:
            c = rng.integers(0, spec.dim_c, size=T)
            c[rng.random(T) < 0.5] = -1
        for e in range(spec.n_entities):
            role = "human" if e == 0 else "object"
            ents.append(
                EntitySeq(
                    role=role,
                    group=spec.parameter_sharing[e],
                    frames=rng.normal(size=(T, spec.dim_x[e])),
                    y=y.copy(),
                    c=None if c is None else c.copy(),
                )
            )
        out.append(SequenceBatch(rec_id=f"tiny-{i}", entities=ents).validate())
    return out


def end_to_end_check(variant: str = "flat", seed: int = 0, epsilon: float = 1e-5) -> float:
    """Gradient error of the full two-step sequence loss for a tiny model."""
    spec = tiny_spec(variant)
    params, _ = M.init_model(spec, seed)
    batches = tiny_batches(spec, seed)
    noise = NoiseSource(seed + 17)
    graph = Graph(
        {k: p.data for k, p in params.items()},
        lambda P, I: {"loss": O.sequence_loss(spec, P, batches, noise, "train", key=(0,))[0]},
    )
    return grad_check(graph, "loss", epsilon=epsilon)


def battery(seed: int = 0, epsilon: float = 1e-5, variants=("flat",)):
    """All checks as a list of (name, error).

    The default covers every primitive plus the flat end-to-end model; pass
    more variants for the (slower) hierarchical and multi-entity closures.
    """
    results = list(primitive_checks(seed, epsilon))
    for variant in variants:
        results.append((f"end-to-end/{variant}", end_to_end_check(variant, seed, epsilon)))
    return results
