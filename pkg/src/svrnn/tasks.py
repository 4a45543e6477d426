"""Task procedures over a trained model: per-frame detection, sequence
classification, early prediction, anticipation, and trajectory forecasting,
plus the evaluation metrics.

All procedures are read-only over a parameter snapshot.  Recognition-style
passes are fully deterministic (labels unobserved, latents at their means,
dropout off); forecasting samples explicitly through a seeded noise source.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np

from . import model as M
from .autodiff import constant
from .data import SequenceBatch, EntitySeq, validate_against_spec
from .distributions import gumbel_softmax_sample, reparam_sample
from .rng import NoiseSource

DEFAULT_TAIL_FRAMES = 3      # classification averages the last three steps
DEFAULT_FORECAST_SAMPLES = 20
PREDICT_FRACTIONS = (0.25, 0.5, 0.75, 1.0)


@dataclass
class LabelTimeline:
    entity: int
    predictions: np.ndarray   # (T,) int
    beliefs: np.ndarray       # (T, n_class), rows on the simplex


@dataclass
class TrajectoryForecast:
    horizon: int
    mean_trajectory: list                 # per entity (horizon, dim_x)
    samples: list | None = None           # per sample: list per entity (horizon, dim_x)
    label_samples: list | None = None     # per sample: list per entity (horizon,) int


def recognition_pass(spec: M.ModelSpec, params: dict, batch: SequenceBatch, upto: int | None = None):
    """Deterministic filtering pass with labels unobserved.

    Returns (posterior beliefs, prior beliefs, final state): belief arrays are
    per-entity (T, n_class).  Frame t's outputs depend only on frames <= t.
    """
    validate_against_spec(batch, spec)
    T = batch.length if upto is None else min(upto, batch.length)
    dp = M.detached_params(params)
    state = M.init_state(spec, 1)
    post = [np.zeros((T, spec.dim_y)) for _ in range(spec.n_entities)]
    prior = [np.zeros((T, spec.dim_y)) for _ in range(spec.n_entities)]
    x_prev = None
    for t in range(T):
        x_t = [ent.frames[t : t + 1] for ent in batch.entities]
        beliefs, _, state = M.cell_step(
            spec, dp, x_t, None, state, None, "eval", x_prev=x_prev, t=t
        )
        for e in range(spec.n_entities):
            post[e][t] = beliefs[e].label_posterior.probs().data[0]
            prior[e][t] = beliefs[e].label_prior.probs().data[0]
        x_prev = x_t
    return post, prior, state


def detect(spec: M.ModelSpec, params: dict, batch: SequenceBatch):
    """Per-frame online classification from the label posterior."""
    if batch.length == 0:
        raise ValueError("cannot detect on an empty stream")
    post, _, _ = recognition_pass(spec, params, batch)
    return [
        LabelTimeline(entity=e, predictions=p.argmax(axis=1), beliefs=p)
        for e, p in enumerate(post)
    ]


def classify_sequence(spec: M.ModelSpec, params: dict, batch: SequenceBatch,
                      tail_frames: int = DEFAULT_TAIL_FRAMES):
    """Average the posterior beliefs over the final `tail_frames` frames and
    take the argmax.  Returns (class index, averaged belief) per entity."""
    if tail_frames < 1:
        raise ValueError("tail_frames must be >= 1")
    if batch.length < tail_frames:
        raise ValueError(f"sequence of {batch.length} frames is shorter than tail_frames={tail_frames}")
    post, _, _ = recognition_pass(spec, params, batch)
    out = []
    for p in post:
        belief = p[-tail_frames:].mean(axis=0)
        out.append((int(belief.argmax()), belief))
    return out


def anticipate(spec: M.ModelSpec, params: dict, state: M.RecurrentState):
    """argmax of the history-dependent label prior for the next step.

    Deterministic: in hierarchical mode the parent enters at its prior mean.
    Returns (class index, belief) per entity."""
    dp = M.detached_params(params)
    out = []
    for e in range(spec.n_entities):
        h_blocks = [("h", state.top_h(e))]
        if spec.n_objects > 0:
            if e == 0:
                h_o = state.top_h(1)
                for o in range(2, spec.n_entities):
                    h_o = h_o + state.top_h(o)
            else:
                h_o = state.top_h(0)
            h_blocks.append(("ho", h_o))
        c_input = None
        if spec.parent_input_dim() > 0:
            c_prior = M._label_net(spec, dp, spec.group_of(e), "prior_c", h_blocks, None, "eval", ())
            c_input = c_prior.probs()
        prior = M.label_prior(spec, dp, e, h_blocks, c_input)
        belief = prior.probs().data[0]
        out.append((int(belief.argmax()), belief))
    return out


def anticipate_after(spec, params, batch: SequenceBatch, upto: int):
    """Run recognition over frames [0, upto) and anticipate the next label."""
    _, _, state = recognition_pass(spec, params, batch, upto=upto)
    return anticipate(spec, params, state)


def predict_partial(spec: M.ModelSpec, params: dict, batch: SequenceBatch,
                    segment: tuple, fraction: float, with_history: bool = True):
    """Early classification of a segment after observing a fraction of it.

    Consumes ceil(fraction * segment length) frames (plus the preceding
    context when `with_history`) and returns the final frame's argmax per
    entity."""
    if not any(math.isclose(fraction, f) for f in PREDICT_FRACTIONS):
        raise ValueError(f"fraction must be one of {PREDICT_FRACTIONS}")
    start, end = segment
    if not 0 <= start < end <= batch.length:
        raise ValueError(f"segment {segment} outside stream of {batch.length} frames")
    n = math.ceil(fraction * (end - start))
    if with_history:
        post, _, _ = recognition_pass(spec, params, batch, upto=start + n)
    else:
        sub = SequenceBatch(
            rec_id=batch.rec_id,
            entities=[
                EntitySeq(ent.role, ent.group, ent.frames[start : start + n])
                for ent in batch.entities
            ],
        ).validate()
        post, _, _ = recognition_pass(spec, params, sub)
    return [int(p[-1].argmax()) for p in post]


def detect_segments(timeline: LabelTimeline, intervals):
    """Majority vote of the timeline inside each ground-truth interval.

    Intervals are (start, end, label) with end exclusive; they must be
    non-empty, non-overlapping and inside the timeline.  Ties count as a
    miss.  Returns one dict per interval."""
    T = len(timeline.predictions)
    spans = sorted(intervals)
    prev_end = 0
    results = []
    for start, end, label in spans:
        if end <= start:
            raise ValueError(f"empty interval ({start}, {end})")
        if start < prev_end or end > T:
            raise ValueError(f"interval ({start}, {end}) overlaps or exceeds the timeline")
        prev_end = end
        window = timeline.predictions[start:end]
        counts = np.bincount(window, minlength=int(timeline.beliefs.shape[1]))
        top = counts.max()
        winners = np.flatnonzero(counts == top)
        majority = int(winners[0]) if len(winners) == 1 else None
        results.append(
            {
                "start": int(start),
                "end": int(end),
                "truth": int(label),
                "majority": majority,
                "hit": majority == int(label),
            }
        )
    return results


# ---------------------------------------------------------------------------
# forecasting


def forecast(
    spec: M.ModelSpec,
    params: dict,
    batch: SequenceBatch,
    prefix_len: int,
    horizon: int,
    n_samples: int = DEFAULT_FORECAST_SAMPLES,
    seed: int = 0,
    clamp_entities=(),
    use_prior: bool = False,
    keep_samples: bool = False,
) -> TrajectoryForecast:
    """Roll the model out `horizon` frames past a prefix.

    Each rollout feeds its own sampled frames back as the next recognition
    input; the prediction is the per-frame mean over rollouts.  Entities in
    `clamp_entities` are pinned to their recorded frames (which must extend
    through prefix_len + horizon).  `use_prior` switches the label/latent
    sampling from the recognition networks to the history-dependent priors,
    which is the chain used for multi-step anticipation.
    """
    if horizon < 1 or n_samples < 1:
        raise ValueError("horizon and n_samples must be >= 1")
    if not 1 <= prefix_len <= batch.length:
        raise ValueError(f"prefix must cover 1..{batch.length} frames, got {prefix_len}")
    for e in clamp_entities:
        if batch.entities[e].frames.shape[0] < prefix_len + horizon:
            raise ValueError(f"entity {e} has no recorded frames to clamp against")
    validate_against_spec(batch, spec)

    dp = M.detached_params(params)
    _, _, state0 = recognition_pass(spec, params, batch, upto=prefix_len)
    x_last0 = [ent.frames[prefix_len - 1 : prefix_len].copy() for ent in batch.entities]
    arrays0 = state0.to_arrays()
    noise = NoiseSource(seed)

    totals = [np.zeros((horizon, spec.dim_x[e])) for e in range(spec.n_entities)]
    all_samples = [] if keep_samples else None
    all_labels = [] if keep_samples else None
    for s in range(n_samples):
        state = M.RecurrentState.from_arrays(arrays0)
        x_last = [x.copy() for x in x_last0]
        traj = [np.zeros((horizon, spec.dim_x[e])) for e in range(spec.n_entities)]
        labs = [np.zeros(horizon, dtype=np.int64) for _ in range(spec.n_entities)]
        for h in range(horizon):
            x_last, state = _rollout_step(
                spec, dp, batch, state, x_last, noise, (s, h), prefix_len + h,
                clamp_entities, use_prior, labs, traj, h,
            )
        for e in range(spec.n_entities):
            totals[e] += traj[e]
        if keep_samples:
            all_samples.append(traj)
            all_labels.append(labs)
    mean = [tot / n_samples for tot in totals]
    return TrajectoryForecast(
        horizon=horizon, mean_trajectory=mean, samples=all_samples, label_samples=all_labels
    )


def _rollout_step(spec, dp, batch, state, x_last, noise, key, frame_idx,
                  clamp_entities, use_prior, labs, traj, h):
    """One generated frame for every entity: sample (y, z) from the previous
    frame, decode the new frame, then advance each recurrence on the new
    frame with the same (y, z) pair."""
    xs = [constant(x) for x in x_last]
    agg = M.entity_aggregate(spec, xs, state)
    new_x, kept = [], []
    for e in range(spec.n_entities):
        x_other, h_other = agg[e]
        ekey = key + (e,)
        h_blocks = [("h", state.top_h(e))]
        if h_other is not None:
            h_blocks.append(("ho", h_other))
        xl_prev = M.lift_input(spec, dp, e, xs[e], x_other, None, "eval", ())

        c_input = None
        if spec.hierarchical:
            net = "prior_c" if use_prior else "post_c"
            blocks = h_blocks if use_prior else [("x", xl_prev)] + h_blocks
            c_params = M._label_net(spec, dp, spec.group_of(e), net, blocks, None, "eval", ())
            c_vec = gumbel_softmax_sample(
                c_params.logits, spec.temperature,
                noise.uniform_open((1, spec.dim_c), *ekey, "c"),
            ).vector
            if spec.parent_input_dim() > 0:
                c_input = c_vec

        if use_prior:
            y_params = M.label_prior(spec, dp, e, h_blocks, c_input)
        else:
            y_params = M.label_posterior(spec, dp, e, xl_prev, h_blocks, c_input)
        y_vec = gumbel_softmax_sample(
            y_params.logits, spec.temperature, noise.uniform_open((1, spec.dim_y), *ekey, "y")
        ).vector
        labs[e][h] = int(y_vec.data[0].argmax())

        if use_prior:
            z_params = M.latent_prior(spec, dp, e, y_vec, h_blocks, c_input)
        else:
            z_params = M.latent_posterior(spec, dp, e, xl_prev, y_vec, h_blocks, c_input)
        z = reparam_sample(z_params, noise.gaussian((1, spec.dim_z), *ekey, "z"))

        decoded = M.decode(spec, dp, e, xl_prev, y_vec, z, c_input)
        target = reparam_sample(decoded, noise.gaussian((1, spec.dim_x[e]), *ekey, "x")).data
        x_new = x_last[e] + target if spec.residual_mode else target
        if e in clamp_entities:
            x_new = batch.entities[e].frames[frame_idx : frame_idx + 1].copy()
        traj[e][h] = x_new[0]
        new_x.append(x_new)
        kept.append((y_vec, z, c_input))

    # recurrence consumes the frames just produced, with the same samples
    xs_new = [constant(x) for x in new_x]
    agg_new = M.entity_aggregate(spec, xs_new, state)
    new_layers = []
    for e in range(spec.n_entities):
        x_other, h_other = agg_new[e]
        xl = M.lift_input(spec, dp, e, xs_new[e], x_other, None, "eval", ())
        y_vec, z, c_input = kept[e]
        new_layers.append(
            M.recurrence(spec, dp, e, xl, y_vec, z, h_other, state.layers[e], c_input)
        )
    return new_x, M.RecurrentState(new_layers)


def forecast_to_batch(fc: TrajectoryForecast, rec_id: str, template: SequenceBatch) -> SequenceBatch:
    """Wrap a forecast's mean trajectory in the on-disk sequence format."""
    ents = [
        EntitySeq(role=template.entities[e].role, group=template.entities[e].group,
                  frames=fc.mean_trajectory[e])
        for e in range(len(fc.mean_trajectory))
    ]
    return SequenceBatch(rec_id=rec_id, entities=ents).validate()


# ---------------------------------------------------------------------------
# metrics


def accuracy(predictions, truths) -> float:
    """Fraction of frames whose prediction matches an observed ground truth;
    frames with unlabeled truth (< 0) are skipped."""
    p = np.asarray(predictions)
    t = np.asarray(truths)
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {t.shape}")
    mask = t >= 0
    if not mask.any():
        return 0.0
    return float((p[mask] == t[mask]).mean())


def f1_macro(predictions, truths, n_class: int) -> float:
    """F1 averaged over classes, excluding classes absent from both the
    predictions and the (observed) truth."""
    p = np.asarray(predictions)
    t = np.asarray(truths)
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {t.shape}")
    mask = t >= 0
    p, t = p[mask], t[mask]
    scores = []
    for k in range(n_class):
        tp = int(((p == k) & (t == k)).sum())
        fp = int(((p == k) & (t != k)).sum())
        fn = int(((p != k) & (t == k)).sum())
        if tp + fp + fn == 0:
            continue
        scores.append(2 * tp / (2 * tp + fp + fn))
    return float(np.mean(scores)) if scores else 0.0


def accumulated_sq_error(pred_trajs, truth_trajs, upto_frame: int) -> float:
    """Sum of squared deviations over all entities and dimensions for frames
    0 .. upto_frame-1."""
    if len(pred_trajs) != len(truth_trajs):
        raise ValueError("entity count mismatch")
    total = 0.0
    for p, t in zip(pred_trajs, truth_trajs):
        p = np.asarray(p)
        t = np.asarray(t)
        if upto_frame > min(p.shape[0], t.shape[0]):
            raise ValueError("upto_frame exceeds trajectory length")
        d = p[:upto_frame] - t[:upto_frame]
        total += float((d * d).sum())
    return total


def metrics_csv(metrics: dict) -> str:
    out = io.StringIO()
    out.write("metric,value\n")
    for k in sorted(metrics):
        out.write(f"{k},{metrics[k]!r}\n")
    return out.getvalue()


def metrics_text(metrics: dict) -> str:
    if not metrics:
        return "(no metrics)\n"
    width = max(len(k) for k in metrics)
    return "".join(f"{k.ljust(width)}  {metrics[k]}\n" for k in sorted(metrics))
