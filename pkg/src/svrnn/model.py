"""The semi-supervised variational recurrent cell and its variants.

A model is a flat dict of named parameter tensors plus a `ModelSpec`.  Every
network layer is stored as one weight matrix per named input block (plus one
bias), and each parameter is initialized from its own name-keyed stream.  Two
consequences we rely on heavily:

* a multi-entity model with zero additional entities has exactly the same
  parameter names, shapes and initial values as the flat model, and
* a hierarchical model whose parent label has a single class omits the
  (constant, information-free) parent input block and therefore reduces
  exactly to the flat model as well.

Entity 0 is the hub: its networks condition on the sum of all other entities'
observations and hidden states, while every other entity conditions on the
hub.  Parameters are shared between entities through named groups.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, constant, mul, narrow, sigmoid, tanh
from .distributions import (
    CategoricalParams,
    GaussianParams,
    gumbel_softmax_sample,
    one_hot,
    reparam_sample,
)
from .rng import NoiseSource, keyed_generator

VARIANTS = ("flat", "hierarchical", "multi-entity", "multi-entity-hierarchical")

# Observation log-sigma is smoothly saturated to +-3.5 (log-variance +-7) so
# the likelihood can never degenerate numerically.
OBS_LOG_SIGMA_BOUND = 3.5


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    variant: str
    dim_x: tuple
    dim_y: int
    dim_z: int
    hidden_width: int
    dim_c: int | None = None
    recurrent_layers: int = 1
    n_objects: int = 0
    temperature: float = 0.1
    alpha: float | None = None
    dropout_rate: float = 0.1
    residual_mode: bool = False
    parameter_sharing: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "dim_x", tuple(int(d) for d in self.dim_x))
        if not self.parameter_sharing:
            groups = ["human"] + ["object"] * (len(self.dim_x) - 1)
            object.__setattr__(self, "parameter_sharing", tuple(groups))
        else:
            object.__setattr__(self, "parameter_sharing", tuple(self.parameter_sharing))
        problems = self.problems()
        if problems:
            raise SpecError("invalid model spec: " + "; ".join(problems))

    def problems(self) -> list:
        out = []
        if self.variant not in VARIANTS:
            out.append(f"unknown variant '{self.variant}'")
        if len(self.dim_x) != self.n_entities:
            out.append(f"dim_x has {len(self.dim_x)} entries for {self.n_entities} entities")
        if any(d < 1 for d in self.dim_x):
            out.append("dim_x entries must be >= 1")
        if self.dim_y < 1:
            out.append("dim_y must be >= 1")
        if self.dim_z < 1 or self.hidden_width < 1 or self.recurrent_layers < 1:
            out.append("dim_z, hidden_width and recurrent_layers must be >= 1")
        if self.hierarchical:
            if self.dim_c is None or self.dim_c < 1:
                out.append("hierarchical variants require dim_c >= 1")
        elif self.dim_c is not None:
            out.append("flat variants must not set dim_c")
        if self.multi_entity:
            if self.n_objects < 0:
                out.append("n_objects must be >= 0")
        elif self.n_objects != 0:
            out.append("single-entity variants must have n_objects == 0")
        if self.temperature <= 0:
            out.append("temperature must be > 0")
        if self.alpha is not None and self.alpha <= 0:
            out.append("alpha must be > 0")
        if not 0.0 <= self.dropout_rate < 1.0:
            out.append("dropout_rate must be in [0, 1)")
        if len(self.parameter_sharing) != self.n_entities:
            out.append("parameter_sharing must name a group per entity")
        if self.n_objects > 0:
            if len(set(self.dim_x[1:])) > 1:
                out.append("all non-hub entities must share dim_x")
            if self.parameter_sharing[0] in self.parameter_sharing[1:]:
                out.append("the hub entity cannot share a parameter group with others")
        for g in self.groups():
            dims = {self.dim_x[e] for e in range(self.n_entities) if self.parameter_sharing[e] == g}
            if len(dims) > 1:
                out.append(f"entities in group '{g}' disagree on dim_x")
        return out

    @property
    def n_entities(self) -> int:
        return 1 + self.n_objects

    @property
    def hierarchical(self) -> bool:
        return self.variant in ("hierarchical", "multi-entity-hierarchical")

    @property
    def multi_entity(self) -> bool:
        return self.variant in ("multi-entity", "multi-entity-hierarchical")

    @property
    def resolved_alpha(self) -> float:
        # Default: the total feature dimension across entities.
        return float(self.alpha) if self.alpha is not None else float(sum(self.dim_x))

    @property
    def decoder_width(self) -> int:
        return 2 * self.hidden_width

    def parent_input_dim(self) -> int:
        # A one-class parent is a constant and carries no information, so it
        # is not fed to the conditioned networks at all.
        if self.hierarchical and self.dim_c is not None and self.dim_c > 1:
            return self.dim_c
        return 0

    def group_of(self, entity: int) -> str:
        return self.parameter_sharing[entity]

    def groups(self) -> list:
        seen = []
        for g in self.parameter_sharing:
            if g not in seen:
                seen.append(g)
        return seen

    def entity_dims(self, entity: int):
        """(own dim_x, conditioning dim_x, conditioning hidden width)."""
        if self.n_objects == 0:
            return self.dim_x[entity], 0, 0
        if entity == 0:
            return self.dim_x[0], self.dim_x[1], self.hidden_width
        return self.dim_x[entity], self.dim_x[0], self.hidden_width

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "dim_x": list(self.dim_x),
            "dim_y": self.dim_y,
            "dim_z": self.dim_z,
            "hidden_width": self.hidden_width,
            "dim_c": self.dim_c,
            "recurrent_layers": self.recurrent_layers,
            "n_objects": self.n_objects,
            "temperature": self.temperature,
            "alpha": self.alpha,
            "dropout_rate": self.dropout_rate,
            "residual_mode": self.residual_mode,
            "parameter_sharing": list(self.parameter_sharing),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        d["dim_x"] = tuple(d["dim_x"])
        d["parameter_sharing"] = tuple(d.get("parameter_sharing") or ())
        return cls(**d)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


def cad120_spec(dim_x, dim_y, n_objects=0, dim_c=None, **kw) -> ModelSpec:
    """Narrow preset: 256-wide networks, one recurrent layer."""
    variant = "multi-entity" if n_objects else "flat"
    if dim_c is not None:
        variant = "multi-entity-hierarchical" if n_objects else "hierarchical"
    return ModelSpec(
        variant=variant, dim_x=tuple(dim_x), dim_y=dim_y, dim_z=256,
        hidden_width=256, dim_c=dim_c, recurrent_layers=1, n_objects=n_objects, **kw,
    )


def kinect_spec(dim_x, dim_y, n_objects=0, dim_c=None, **kw) -> ModelSpec:
    """Wide preset: 516-wide networks, three recurrent layers."""
    variant = "multi-entity" if n_objects else "flat"
    if dim_c is not None:
        variant = "multi-entity-hierarchical" if n_objects else "hierarchical"
    return ModelSpec(
        variant=variant, dim_x=tuple(dim_x), dim_y=dim_y, dim_z=516,
        hidden_width=516, dim_c=dim_c, recurrent_layers=3, n_objects=n_objects, **kw,
    )


# ---------------------------------------------------------------------------
# parameter layout


def _layer_defs(spec: ModelSpec) -> dict:
    """Map param name -> (shape, init kind).  Kinds: weight / bias / lstm_bias."""
    H = spec.hidden_width
    D = spec.decoder_width
    C = spec.parent_input_dim()
    defs = {}

    def fc(prefix, blocks, out, bias_kind="bias"):
        for name, width in blocks:
            if width > 0:
                defs[f"{prefix}/W_{name}"] = ((width, out), "weight")
        defs[f"{prefix}/b"] = ((out,), bias_kind)

    for g in spec.groups():
        entity = spec.parameter_sharing.index(g)
        dx, dxo, ho = spec.entity_dims(entity)
        fc(f"{g}/lift", [("x", dx), ("xo", dxo)], H)
        cond_h = [("h", H), ("ho", ho)]
        fc(f"{g}/prior_y/h0", cond_h + [("c", C)], H)
        fc(f"{g}/prior_y/out", [("h", H)], spec.dim_y)
        fc(f"{g}/post_y/h0", [("x", H)] + cond_h + [("c", C)], H)
        fc(f"{g}/post_y/out", [("h", H)], spec.dim_y)
        if spec.hierarchical:
            fc(f"{g}/prior_c/h0", cond_h, H)
            fc(f"{g}/prior_c/out", [("h", H)], spec.dim_c)
            fc(f"{g}/post_c/h0", [("x", H)] + cond_h, H)
            fc(f"{g}/post_c/out", [("h", H)], spec.dim_c)
        fc(f"{g}/prior_z/h0", [("y", spec.dim_y), ("c", C)] + cond_h, H)
        fc(f"{g}/prior_z/h1", [("h", H)], H)
        fc(f"{g}/prior_z/mu", [("h", H)], spec.dim_z)
        fc(f"{g}/prior_z/ls", [("h", H)], spec.dim_z)
        fc(f"{g}/post_z/h0", [("x", H), ("y", spec.dim_y), ("c", C)] + cond_h, H)
        fc(f"{g}/post_z/h1", [("h", H)], H)
        fc(f"{g}/post_z/mu", [("h", H)], spec.dim_z)
        fc(f"{g}/post_z/ls", [("h", H)], spec.dim_z)
        fc(f"{g}/dec/h0", [("x", H), ("y", spec.dim_y), ("c", C), ("z", spec.dim_z)], D)
        fc(f"{g}/dec/h1", [("h", D)], D)
        fc(f"{g}/dec/mu", [("h", D)], dx)
        fc(f"{g}/dec/ls", [("h", D)], dx)
        rnn_in = [("x", H), ("y", spec.dim_y), ("c", C), ("z", spec.dim_z), ("ho", ho)]
        for layer in range(spec.recurrent_layers):
            blocks = rnn_in if layer == 0 else [("below", H)]
            fc(f"{g}/rnn/l{layer}", blocks + [("rec", H)], 4 * H, bias_kind="lstm_bias")
    return defs


def init_model(spec: ModelSpec, seed: int):
    """Create the named parameter set and an all-zero batch-1 recurrent state.

    Each array comes from its own (seed, name)-keyed stream: the same seed
    always reproduces the same values, and adding networks in one variant
    never perturbs parameters shared with another.
    """
    params = {}
    for name, (shape, kind) in _layer_defs(spec).items():
        if kind == "weight":
            fan_in, fan_out = shape
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            data = keyed_generator(seed, "init", name).uniform(-bound, bound, size=shape)
        elif kind == "lstm_bias":
            data = np.zeros(shape)
            h = shape[0] // 4
            data[h : 2 * h] = 1.0  # forget gate starts open
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data)
    return params, init_state(spec, 1)


@dataclass
class RecurrentState:
    """Per-entity, per-layer (hidden, cell) pairs."""

    layers: list  # layers[entity][layer] = (h, c) Tensors of shape (B, H)

    @property
    def batch_size(self) -> int:
        return self.layers[0][0][0].data.shape[0]

    def top_h(self, entity: int) -> Tensor:
        return self.layers[entity][-1][0]

    def to_arrays(self):
        return [[(h.data.copy(), c.data.copy()) for h, c in ent] for ent in self.layers]

    @classmethod
    def from_arrays(cls, arrays) -> "RecurrentState":
        return cls([[(constant(h), constant(c)) for h, c in ent] for ent in arrays])


def init_state(spec: ModelSpec, batch_size: int) -> RecurrentState:
    zeros = lambda: constant(np.zeros((batch_size, spec.hidden_width)))
    return RecurrentState(
        [[(zeros(), zeros()) for _ in range(spec.recurrent_layers)] for _ in range(spec.n_entities)]
    )


# ---------------------------------------------------------------------------
# network application


def _fc(params: dict, prefix: str, blocks) -> Tensor:
    """Sum of per-block matmuls plus bias; width-0 blocks are simply absent."""
    out = None
    for name, x in blocks:
        key = f"{prefix}/W_{name}"
        if key not in params:
            continue
        term = x @ params[key]
        out = term if out is None else out + term
    if out is None:
        raise ad.ShapeError(f"layer '{prefix}' received no inputs")
    return out + params[f"{prefix}/b"]


def _drop(spec, x: Tensor, noise, mode: str, key) -> Tensor:
    if mode != "train" or spec.dropout_rate <= 0.0 or noise is None:
        return x
    mask = noise.dropout_mask(x.data.shape, spec.dropout_rate, *key)
    return ad.dropout_mask(x, mask)


def _label_net(spec, params, g, net, blocks, noise, mode, key) -> CategoricalParams:
    h = tanh(_fc(params, f"{g}/{net}/h0", blocks))
    h = _drop(spec, h, noise, mode, key + (g, net, "h0"))
    return CategoricalParams(_fc(params, f"{g}/{net}/out", [("h", h)]))


def _gaussian_net(spec, params, g, net, blocks, noise, mode, key, bound_ls=False) -> GaussianParams:
    h = tanh(_fc(params, f"{g}/{net}/h0", blocks))
    h = _drop(spec, h, noise, mode, key + (g, net, "h0"))
    h = tanh(_fc(params, f"{g}/{net}/h1", [("h", h)]))
    h = _drop(spec, h, noise, mode, key + (g, net, "h1"))
    mu = _fc(params, f"{g}/{net}/mu", [("h", h)])
    ls = _fc(params, f"{g}/{net}/ls", [("h", h)])
    if bound_ls:
        ls = OBS_LOG_SIGMA_BOUND * tanh((1.0 / OBS_LOG_SIGMA_BOUND) * ls)
    return GaussianParams(mu, ls)


def lift_input(spec, params, entity: int, x_self: Tensor, x_other, noise, mode, key) -> Tensor:
    g = spec.group_of(entity)
    blocks = [("x", x_self)]
    if x_other is not None:
        blocks.append(("xo", x_other))
    h = tanh(_fc(params, f"{g}/lift", blocks))
    return _drop(spec, h, noise, mode, key + (g, "lift"))


def label_prior(spec, params, entity: int, h_blocks, c_input=None, noise=None, mode="eval", key=()) -> CategoricalParams:
    g = spec.group_of(entity)
    blocks = list(h_blocks)
    if c_input is not None:
        blocks.append(("c", c_input))
    return _label_net(spec, params, g, "prior_y", blocks, noise, mode, key)


def label_posterior(spec, params, entity: int, x_lifted, h_blocks, c_input=None, noise=None, mode="eval", key=()) -> CategoricalParams:
    g = spec.group_of(entity)
    blocks = [("x", x_lifted)] + list(h_blocks)
    if c_input is not None:
        blocks.append(("c", c_input))
    return _label_net(spec, params, g, "post_y", blocks, noise, mode, key)


def latent_prior(spec, params, entity, y_input, h_blocks, c_input=None, noise=None, mode="eval", key=()) -> GaussianParams:
    g = spec.group_of(entity)
    blocks = [("y", y_input)]
    if c_input is not None:
        blocks.append(("c", c_input))
    return _gaussian_net(spec, params, g, "prior_z", blocks + list(h_blocks), noise, mode, key)


def latent_posterior(spec, params, entity, x_lifted, y_input, h_blocks, c_input=None, noise=None, mode="eval", key=()) -> GaussianParams:
    g = spec.group_of(entity)
    blocks = [("x", x_lifted), ("y", y_input)]
    if c_input is not None:
        blocks.append(("c", c_input))
    return _gaussian_net(spec, params, g, "post_z", blocks + list(h_blocks), noise, mode, key)


def decode(spec, params, entity, x_prev_lifted, y_input, z, c_input=None, noise=None, mode="eval", key=()) -> GaussianParams:
    """Distribution over the step's observation target (the frame itself, or
    the frame delta in residual mode)."""
    g = spec.group_of(entity)
    blocks = [("x", x_prev_lifted), ("y", y_input)]
    if c_input is not None:
        blocks.append(("c", c_input))
    blocks.append(("z", z))
    return _gaussian_net(spec, params, g, "dec", blocks, noise, mode, key, bound_ls=True)


def recurrence(spec, params, entity, x_lifted, y_input, z, h_other, state_layers, c_input=None):
    """One gated update of the entity's recurrent stack; returns new layers."""
    g = spec.group_of(entity)
    H = spec.hidden_width
    blocks = [("x", x_lifted), ("y", y_input)]
    if c_input is not None:
        blocks.append(("c", c_input))
    blocks.append(("z", z))
    if h_other is not None:
        blocks.append(("ho", h_other))
    new_layers = []
    for layer, (h_old, c_old) in enumerate(state_layers):
        zg = _fc(params, f"{g}/rnn/l{layer}", blocks + [("rec", h_old)])
        i = sigmoid(narrow(zg, 0, H))
        f = sigmoid(narrow(zg, H, 2 * H))
        cand = tanh(narrow(zg, 2 * H, 3 * H))
        o = sigmoid(narrow(zg, 3 * H, 4 * H))
        c_new = mul(f, c_old) + mul(i, cand)
        h_new = mul(o, tanh(c_new))
        new_layers.append((h_new, c_new))
        blocks = [("below", h_new)]
    return new_layers


def entity_aggregate(spec: ModelSpec, xs, state: RecurrentState):
    """Per-entity conditioning inputs from the other entities.

    The hub (entity 0) sees the sum over all additional entities; every
    additional entity sees the hub.  Returns (x_other, h_other) per entity,
    both None when there is nothing to condition on.
    """
    n = spec.n_entities
    if len(xs) != n:
        raise ad.ShapeError(f"expected {n} entity observations, got {len(xs)}")
    if spec.n_objects == 0:
        return [(None, None)]
    out = []
    for e in range(n):
        if e == 0:
            x_o = xs[1]
            h_o = state.top_h(1)
            for o in range(2, n):
                x_o = x_o + xs[o]
                h_o = h_o + state.top_h(o)
        else:
            x_o = xs[0]
            h_o = state.top_h(0)
        out.append((x_o, h_o))
    return out


# ---------------------------------------------------------------------------
# one full step


@dataclass
class StepBeliefs:
    label_prior: CategoricalParams
    label_posterior: CategoricalParams
    latent_prior: GaussianParams
    latent_posterior: GaussianParams
    decoded: GaussianParams
    parent_prior: CategoricalParams | None = None
    parent_posterior: CategoricalParams | None = None


@dataclass
class StepSamples:
    y_input: Tensor           # (B, dim_y) one-hot / relaxed / posterior mean
    z: Tensor                 # (B, dim_z)
    y_observed: np.ndarray    # (B, 1) 0/1 mask
    c_input: Tensor | None = None
    c_observed: np.ndarray | None = None


def _mix_label(cat: CategoricalParams, idx, n_class, temperature, noise, key):
    """Resolve a label input: observed rows use the exact one-hot, unobserved
    rows use a relaxed sample (or the posterior mean when running
    deterministically).  Returns (input tensor, observed mask (B,1))."""
    B = cat.logits.data.shape[0]
    if idx is None:
        idx = np.full(B, -1, dtype=np.int64)
    idx = np.asarray(idx, dtype=np.int64)
    obs = (idx >= 0).astype(np.float64).reshape(B, 1)
    hard = one_hot(idx, n_class)
    if np.all(obs == 1.0):
        return constant(hard), obs
    if noise is None:
        soft = cat.probs()
    else:
        u = noise.uniform_open((B, n_class), *key)
        soft = gumbel_softmax_sample(cat.logits, temperature, u).vector
    mixed = constant(hard) + mul(constant(1.0 - obs), soft)
    return mixed, obs


def cell_step(
    spec: ModelSpec,
    params: dict,
    x_t,
    labels,
    h_prev: RecurrentState,
    noise: NoiseSource | None,
    mode: str = "train",
    *,
    x_prev=None,
    t: int = 0,
    key=(),
):
    """Advance every entity by one frame.

    x_t / x_prev: per-entity (B, dim_x) arrays or tensors (x_prev defaults to
    zeros for the first frame).  labels: per-entity (y_idx, c_idx) int arrays
    with -1 marking unobserved rows, or None when fully unobserved.  Sampling
    happens whenever `noise` is given; mode=="train" additionally applies
    dropout.  Returns (per-entity StepBeliefs, per-entity StepSamples, new
    state).
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode '{mode}'")
    try:
        return _cell_step(spec, params, x_t, labels, h_prev, noise, mode, x_prev, t, key)
    except ad.AutodiffError as e:
        raise type(e)(f"at t={t}: {e}") from e


def _cell_step(spec, params, x_t, labels, h_prev, noise, mode, x_prev, t, key):
    xs = [x if isinstance(x, Tensor) else constant(x) for x in x_t]
    B = xs[0].data.shape[0]
    if x_prev is None:
        x_prev = [constant(np.zeros_like(x.data)) for x in xs]
    else:
        x_prev = [x if isinstance(x, Tensor) else constant(x) for x in x_prev]
    agg_now = entity_aggregate(spec, xs, h_prev)
    agg_prev = entity_aggregate(spec, x_prev, h_prev)

    beliefs, samples, new_layers = [], [], []
    for e in range(spec.n_entities):
        x_other, h_other = agg_now[e]
        ekey = key + (t, e)
        h_blocks = [("h", h_prev.top_h(e))]
        if h_other is not None:
            h_blocks.append(("ho", h_other))
        xl = lift_input(spec, params, e, xs[e], x_other, noise, mode, ekey)
        xl_prev = lift_input(spec, params, e, x_prev[e], agg_prev[e][0], noise, mode, ekey + ("prev",))

        y_idx = c_idx = None
        if labels is not None and labels[e] is not None:
            y_idx, c_idx = labels[e]

        c_params_prior = c_params_post = None
        c_input = None
        c_obs = None
        if spec.hierarchical:
            c_params_prior = _label_net(spec, params, spec.group_of(e), "prior_c", h_blocks, noise, mode, ekey)
            c_params_post = _label_net(
                spec, params, spec.group_of(e), "post_c", [("x", xl)] + h_blocks, noise, mode, ekey
            )
            c_full, c_obs = _mix_label(
                c_params_post, c_idx, spec.dim_c, spec.temperature, noise, ekey + ("c",)
            )
            if spec.parent_input_dim() > 0:
                c_input = c_full

        y_prior = label_prior(spec, params, e, h_blocks, c_input, noise, mode, ekey)
        y_post = label_posterior(spec, params, e, xl, h_blocks, c_input, noise, mode, ekey)
        y_input, y_obs = _mix_label(y_post, y_idx, spec.dim_y, spec.temperature, noise, ekey + ("y",))

        z_prior = latent_prior(spec, params, e, y_input, h_blocks, c_input, noise, mode, ekey)
        z_post = latent_posterior(spec, params, e, xl, y_input, h_blocks, c_input, noise, mode, ekey)
        if noise is None:
            z = z_post.mu
        else:
            z = reparam_sample(z_post, noise.gaussian((B, spec.dim_z), *ekey, "z"))

        decoded = decode(spec, params, e, xl_prev, y_input, z, c_input, noise, mode, ekey)
        layers = recurrence(spec, params, e, xl, y_input, z, h_other, h_prev.layers[e], c_input)

        beliefs.append(
            StepBeliefs(
                label_prior=y_prior,
                label_posterior=y_post,
                latent_prior=z_prior,
                latent_posterior=z_post,
                decoded=decoded,
                parent_prior=c_params_prior,
                parent_posterior=c_params_post,
            )
        )
        samples.append(
            StepSamples(
                y_input=y_input,
                z=z,
                y_observed=y_obs,
                c_input=c_input,
                c_observed=c_obs,
            )
        )
        new_layers.append(layers)
    return beliefs, samples, RecurrentState(new_layers)


def detached_params(params: dict) -> dict:
    """Constant snapshot of the parameters; evaluation passes that never need
    gradients should run on this to skip tape construction."""
    return {k: t.detach() for k, t in params.items()}


def spec_hash(spec: ModelSpec) -> str:
    import hashlib

    return hashlib.sha256(spec.canonical_json().encode("utf-8")).hexdigest()
