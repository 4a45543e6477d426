"""The semi-supervised sequence objective.

Per step and entity the loss decomposes into a reconstruction term, latent
and label KL terms, the supervised cross-entropy terms that train both the
label posterior and the history-dependent label prior, and the constant
uniform-prior cost of each observed label.  Observed and unobserved rows of a
batch are handled together through 0/1 masks, so a mini-batch may freely mix
labeled and unlabeled frames.  The convention throughout is minimization:
reported values are the negated bound plus the weighted supervised terms, so
lower is better.
"""

from __future__ import annotations

import io
import itertools
from dataclasses import dataclass

import numpy as np

from . import model as M
from .autodiff import Tensor, constant, mul, reduce_mean
from .distributions import (
    categorical_kl,
    gaussian_kl,
    gaussian_log_pdf,
    label_cross_entropy,
    one_hot,
)


@dataclass
class StepLoss:
    """Batch-mean loss terms for one (step, entity); inapplicable terms are
    exactly zero."""

    recon: Tensor
    kl_z: Tensor
    kl_y: Tensor
    kl_c: Tensor
    sup_y: Tensor
    sup_c: Tensor
    label_const: Tensor

    def bound_part(self) -> Tensor:
        return self.recon + self.kl_z + self.kl_y + self.kl_c + self.label_const

    def sup_part(self) -> Tensor:
        return self.sup_y + self.sup_c


@dataclass
class ObservationCase:
    y_observed: bool
    c_observed: bool = False


@dataclass
class TraceRow:
    t: int
    entity: int
    case: str
    recon: float
    kl_z: float
    kl_y: float
    kl_c: float
    sup_y: float
    sup_c: float
    label_const: float


def _case_string(hierarchical: bool, y_obs: np.ndarray, c_obs) -> str:
    def tag(mask):
        if mask is None or np.all(mask == 0.0):
            return "U"
        if np.all(mask == 1.0):
            return "L"
        return "M"

    if not hierarchical:
        t = tag(y_obs)
        return {"L": "L", "U": "U", "M": "mixed"}[t]
    ty, tc = tag(y_obs), tag(c_obs)
    if "M" in (ty, tc):
        return "mixed"
    return f"{ty}y{tc}c"


def step_loss(
    spec: M.ModelSpec,
    beliefs: M.StepBeliefs,
    samples: M.StepSamples,
    target_x,
    y_idx,
    c_idx=None,
    case: ObservationCase | None = None,
) -> StepLoss:
    """Loss terms for one entity at one step.

    y_idx / c_idx are (B,) int arrays with -1 for unobserved rows; they must
    agree with the masks recorded in `samples` (and with `case`, if given).
    """
    B = samples.y_input.data.shape[0]
    y_idx = np.full(B, -1, dtype=np.int64) if y_idx is None else np.asarray(y_idx, dtype=np.int64)
    y_obs = (y_idx >= 0).astype(np.float64)
    if not np.array_equal(y_obs.reshape(B, 1), samples.y_observed):
        raise ValueError("labels disagree with the step's observation masks")
    if case is not None:
        if case.y_observed != bool(np.all(y_obs == 1.0)) or (case.c_observed and not spec.hierarchical):
            raise ValueError("observation case inconsistent with labels")

    zero = constant(np.zeros(()))
    recon = reduce_mean(-gaussian_log_pdf(target_x, beliefs.decoded))
    kl_z = reduce_mean(gaussian_kl(beliefs.latent_posterior, beliefs.latent_prior))

    kl_rows = categorical_kl(beliefs.label_posterior, beliefs.label_prior)
    kl_y = reduce_mean(mul(kl_rows, constant(1.0 - y_obs)))

    y_hot = one_hot(y_idx, spec.dim_y)
    sup_y = reduce_mean(
        label_cross_entropy(y_hot, beliefs.label_posterior)
        + label_cross_entropy(y_hot, beliefs.label_prior)
    )
    label_const_rows = y_obs * np.log(spec.dim_y)

    kl_c = sup_c = zero
    if spec.hierarchical:
        c_idx = np.full(B, -1, dtype=np.int64) if c_idx is None else np.asarray(c_idx, dtype=np.int64)
        c_obs = (c_idx >= 0).astype(np.float64)
        kc_rows = categorical_kl(beliefs.parent_posterior, beliefs.parent_prior)
        kl_c = reduce_mean(mul(kc_rows, constant(1.0 - c_obs)))
        c_hot = one_hot(c_idx, spec.dim_c)
        sup_c = reduce_mean(
            label_cross_entropy(c_hot, beliefs.parent_posterior)
            + label_cross_entropy(c_hot, beliefs.parent_prior)
        )
        label_const_rows = label_const_rows + c_obs * np.log(spec.dim_c)
    elif c_idx is not None and np.any(np.asarray(c_idx) >= 0):
        raise ValueError("parent labels supplied to a non-hierarchical model")

    return StepLoss(
        recon=recon,
        kl_z=kl_z,
        kl_y=kl_y,
        kl_c=kl_c,
        sup_y=sup_y,
        sup_c=sup_c,
        label_const=constant(float(np.mean(label_const_rows))),
    )


def _stack_group(batches, spec):
    """Stack equal-length recordings into per-entity (B, T, d) arrays plus
    (B, T) label index arrays."""
    B = len(batches)
    T = batches[0].length
    xs, ys, cs = [], [], []
    for e in range(spec.n_entities):
        xs.append(np.stack([b.entities[e].frames for b in batches]))
        ys.append(np.stack([b.entities[e].y_indices(T) for b in batches]))
        cs.append(np.stack([b.entities[e].c_indices(T) for b in batches]))
    return B, T, xs, ys, cs


def sequence_loss(
    spec: M.ModelSpec,
    params: dict,
    batches,
    noise,
    mode: str = "train",
    *,
    key=(),
    n_z_samples: int = 1,
):
    """Total minimization loss over a mini-batch of recordings.

    Losses are summed over time and entities, weighted by alpha on the
    supervised terms, and averaged over recordings.  Returns (scalar tensor,
    per-step trace).  Recordings of different lengths are grouped and the
    group losses combined by recording count.
    """
    from .data import validate_against_spec

    if n_z_samples > 1:
        parts = [
            sequence_loss(spec, params, batches, noise, mode, key=key + ("zs", s))[0]
            for s in range(n_z_samples)
        ]
        total = parts[0]
        for p in parts[1:]:
            total = total + p
        return (1.0 / n_z_samples) * total, []

    batches = list(batches)
    for b in batches:
        validate_against_spec(b, spec)
    if not batches or all(b.length == 0 for b in batches):
        return constant(np.zeros(())), []

    groups = {}
    for b in batches:
        groups.setdefault(b.length, []).append(b)

    alpha = spec.resolved_alpha
    total = None
    trace = []
    n_total = len(batches)
    for T, group in sorted(groups.items()):
        if T == 0:
            continue
        B, T, xs, ys, cs = _stack_group(group, spec)
        group_noise = noise.with_rows([b.rec_id for b in group]) if noise is not None else None
        state = M.init_state(spec, B)
        x_prev = [np.zeros((B, spec.dim_x[e])) for e in range(spec.n_entities)]
        group_total = None
        for t in range(T):
            x_t = [xs[e][:, t] for e in range(spec.n_entities)]
            labels = [(ys[e][:, t], cs[e][:, t]) for e in range(spec.n_entities)]
            beliefs, samples, state = M.cell_step(
                spec, params, x_t, labels, state, group_noise, mode, x_prev=x_prev, t=t, key=key
            )
            for e in range(spec.n_entities):
                target = xs[e][:, t] - x_prev[e] if spec.residual_mode else x_t[e]
                sl = step_loss(spec, beliefs[e], samples[e], target, ys[e][:, t], cs[e][:, t])
                contrib = sl.bound_part() + alpha * sl.sup_part()
                group_total = contrib if group_total is None else group_total + contrib
                y_obs = (ys[e][:, t] >= 0).astype(np.float64)
                c_obs = (cs[e][:, t] >= 0).astype(np.float64) if spec.hierarchical else None
                trace.append(
                    TraceRow(
                        t=t,
                        entity=e,
                        case=_case_string(spec.hierarchical, y_obs, c_obs),
                        recon=sl.recon.item(),
                        kl_z=sl.kl_z.item(),
                        kl_y=sl.kl_y.item(),
                        kl_c=sl.kl_c.item(),
                        sup_y=sl.sup_y.item(),
                        sup_c=sl.sup_c.item(),
                        label_const=sl.label_const.item(),
                    )
                )
            x_prev = x_t
        weighted = (B / n_total) * group_total
        total = weighted if total is None else total + weighted
    if total is None:
        return constant(np.zeros(())), trace
    return total, trace


def unlabeled_loss_exact(spec: M.ModelSpec, params: dict, batches, noise, *, key=(), max_paths: int = 65536) -> float:
    """Unlabeled-sequence loss with the label expectations marginalized by
    exact enumeration over one-hot label paths.

    The Gaussian noise stream is consumed exactly as in `sequence_loss` (one
    draw per step and entity), so at vanishing temperature the Monte-Carlo
    average of single-relaxed-sample losses over Gumbel draws converges to
    this value.  No Gumbel noise is consumed.  Only single-entity models are
    supported; the enumeration guard rejects more than `max_paths` paths or
    more than 16 classes.
    """
    from .data import validate_against_spec

    if spec.n_entities != 1:
        raise ValueError("exact enumeration supports single-entity models only")
    if spec.dim_y > 16 or (spec.hierarchical and spec.dim_c > 16):
        raise ValueError("enumeration guard: more than 16 classes")
    batches = list(batches)
    for b in batches:
        validate_against_spec(b, spec)
        if any(np.any(ent.y_indices(b.length) >= 0) for ent in b.entities):
            raise ValueError("exact unlabeled loss requires fully unobserved labels")
    groups = {}
    for b in batches:
        groups.setdefault(b.length, []).append(b)

    combos_per_step = spec.dim_y * (spec.dim_c if spec.hierarchical else 1)
    detached = M.detached_params(params)
    result = 0.0
    n_total = len(batches)
    for T, group in sorted(groups.items()):
        if combos_per_step**T > max_paths:
            raise ValueError(f"enumeration guard: {combos_per_step}**{T} label paths exceed {max_paths}")
        B, T, xs, _, _ = _stack_group(group, spec)
        group_noise = noise.with_rows([b.rec_id for b in group]) if noise is not None else None
        step_choices = list(
            itertools.product(range(spec.dim_y), range(spec.dim_c) if spec.hierarchical else [0])
        )
        group_value = np.zeros(B)
        for path in itertools.product(step_choices, repeat=T):
            state = M.init_state(spec, B)
            x_prev = [np.zeros((B, spec.dim_x[0]))]
            weight = np.ones(B)
            path_loss = np.zeros(B)
            for t, (y_k, c_k) in enumerate(path):
                forced = [(np.full(B, y_k, dtype=np.int64),
                           np.full(B, c_k, dtype=np.int64) if spec.hierarchical else None)]
                beliefs, _, state = M.cell_step(
                    spec, detached, [xs[0][:, t]], forced, state, group_noise, "eval",
                    x_prev=x_prev, t=t, key=key,
                )
                be = beliefs[0]
                q_y = be.label_posterior.probs().data
                weight = weight * q_y[:, y_k]
                target = xs[0][:, t] - x_prev[0] if spec.residual_mode else xs[0][:, t]
                rows = (
                    -gaussian_log_pdf(target, be.decoded).data
                    + gaussian_kl(be.latent_posterior, be.latent_prior).data
                    + categorical_kl(be.label_posterior, be.label_prior).data
                )
                if spec.hierarchical:
                    q_c = be.parent_posterior.probs().data
                    weight = weight * q_c[:, c_k]
                    rows = rows + categorical_kl(be.parent_posterior, be.parent_prior).data
                path_loss = path_loss + rows
                x_prev = [xs[0][:, t]]
            group_value = group_value + weight * path_loss
        result += group_value.sum() / n_total
    return float(result)


def trace_csv(trace) -> str:
    out = io.StringIO()
    out.write("t,entity,case,recon,kl_z,kl_y,kl_c,sup_y,sup_c,label_const\n")
    for r in trace:
        out.write(
            f"{r.t},{r.entity},{r.case},{r.recon!r},{r.kl_z!r},{r.kl_y!r},"
            f"{r.kl_c!r},{r.sup_y!r},{r.sup_c!r},{r.label_const!r}\n"
        )
    return out.getvalue()
