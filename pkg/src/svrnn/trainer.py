"""Stochastic-gradient training with element-wise gradient clipping.

Runs are deterministic for a fixed seed: shuffling is keyed by (seed, epoch),
every noise draw by (seed, global step, timestep, entity, role), and the
optimizer state lives in the checkpoint, so a resumed run reproduces an
uninterrupted one step for step.
"""

from __future__ import annotations

import io
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from . import objectives as O
from .autodiff import NumericError, Tensor, backprop, clip_gradients, DEFAULT_CLIP_THRESHOLD
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .rng import NoiseSource

DEFAULT_LEARNING_RATE = 1e-3
# preset used for motion generation and synthesis runs
MOTION_LEARNING_RATE = 5e-4
DEFAULT_EVAL_REPEATS = 20


class DivergenceError(RuntimeError):
    def __init__(self, message, step: int, trace_row=None):
        super().__init__(message)
        self.step = step
        self.trace_row = trace_row


@dataclass
class TrainConfig:
    learning_rate: float = DEFAULT_LEARNING_RATE
    clip_threshold: float = DEFAULT_CLIP_THRESHOLD
    batch_size: int = 8
    epochs: int = 1
    seed: int = 0
    optimizer: str = "adam"      # "adam" or "sgd"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    eval_every: int = 0          # epochs between eval snapshots, 0 = off
    mask_policy: str = ""        # informational: which label masking produced the dataset

    def __post_init__(self):
        if self.learning_rate <= 0 or self.clip_threshold <= 0 or self.batch_size < 1:
            raise ValueError("learning_rate, clip_threshold and batch_size must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer '{self.optimizer}'")


def motion_config(**kw) -> TrainConfig:
    kw.setdefault("learning_rate", MOTION_LEARNING_RATE)
    return TrainConfig(**kw)


@dataclass
class TrainLogRow:
    step: int
    epoch: int
    loss: float
    recon: float
    kl_z: float
    kl_y: float
    kl_c: float
    sup_y: float
    sup_c: float
    label_const: float
    wall: float


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)
    evals: list = field(default_factory=list)   # (epoch, metrics dict)

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write("step,epoch,loss,recon,kl_z,kl_y,kl_c,sup_y,sup_c,label_const,wall\n")
        for r in self.rows:
            out.write(
                f"{r.step},{r.epoch},{r.loss!r},{r.recon!r},{r.kl_z!r},{r.kl_y!r},"
                f"{r.kl_c!r},{r.sup_y!r},{r.sup_c!r},{r.label_const!r},{r.wall!r}\n"
            )
        return out.getvalue()

    def loss_columns(self):
        """Everything except the wall-clock stamp, for determinism checks."""
        return [
            (r.step, r.epoch, r.loss, r.recon, r.kl_z, r.kl_y, r.kl_c, r.sup_y, r.sup_c, r.label_const)
            for r in self.rows
        ]


def _adam_update(cfg: TrainConfig, params, grads, m, v, step):
    step += 1
    b1c = 1.0 - cfg.beta1**step
    b2c = 1.0 - cfg.beta2**step
    for name, p in params.items():
        g = grads[name]
        m[name] = cfg.beta1 * m[name] + (1.0 - cfg.beta1) * g
        v[name] = cfg.beta2 * v[name] + (1.0 - cfg.beta2) * g * g
        p.data -= cfg.learning_rate * (m[name] / b1c) / (np.sqrt(v[name] / b2c) + cfg.eps)
    return step


def train(
    spec: M.ModelSpec,
    config: TrainConfig,
    dataset,
    *,
    resume: Checkpoint | None = None,
    eval_dataset=None,
    eval_tasks=None,
    checkpoint_dir=None,
):
    """Optimize the sequence objective over the dataset; returns the final
    (Checkpoint, TrainLog).  With `checkpoint_dir` set, a checkpoint is also
    written at every eval point.  Raises DivergenceError when the loss leaves
    the finite domain, pointing at the offending step."""
    dataset = list(dataset)
    if not dataset:
        raise ValueError("empty dataset")
    for b in dataset:
        from .data import validate_against_spec

        validate_against_spec(b, spec)

    if resume is not None:
        params = {k: Tensor(v.copy()) for k, v in resume.params.items()}
        m = {k: v.copy() for k, v in resume.opt_m.items()}
        v_ = {k: v.copy() for k, v in resume.opt_v.items()}
        opt_step = resume.opt_step
        start_epoch = resume.epoch
        global_step = resume.global_step
    else:
        params, _ = M.init_model(spec, config.seed)
        m = {k: np.zeros_like(p.data) for k, p in params.items()}
        v_ = {k: np.zeros_like(p.data) for k, p in params.items()}
        opt_step = 0
        start_epoch = 0
        global_step = 0

    noise = NoiseSource(config.seed)
    log = TrainLog()
    t0 = time.time()
    for epoch in range(start_epoch, config.epochs):
        order = noise.permutation(len(dataset), "shuffle", epoch)
        for lo in range(0, len(dataset), config.batch_size):
            minibatch = [dataset[i] for i in order[lo : lo + config.batch_size]]
            for p in params.values():
                p.grad = None
            try:
                loss, trace = O.sequence_loss(
                    spec, params, minibatch, noise, "train", key=(global_step,)
                )
            except NumericError as e:
                raise DivergenceError(f"non-finite values at step {global_step}: {e}", global_step) from e
            loss_val = loss.item()
            row = _log_row(global_step, epoch, loss_val, trace, time.time() - t0)
            if not np.isfinite(loss_val):
                raise DivergenceError(
                    f"loss diverged at step {global_step}: {loss_val}", global_step, row
                )
            backprop(loss)
            grads = {
                k: (p.grad if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()
            }
            grads = clip_gradients(grads, config.clip_threshold)
            if config.optimizer == "adam":
                opt_step = _adam_update(config, params, grads, m, v_, opt_step)
            else:
                for name, p in params.items():
                    p.data -= config.learning_rate * grads[name]
            log.rows.append(row)
            global_step += 1
        if config.eval_every and (epoch + 1) % config.eval_every == 0:
            snap = _make_checkpoint(spec, config, params, m, v_, opt_step, epoch + 1, global_step)
            if checkpoint_dir is not None:
                save_checkpoint(os.path.join(checkpoint_dir, f"checkpoint_epoch{epoch + 1:05d}.ckpt"), snap)
            if eval_dataset:
                log.evals.append((epoch + 1, evaluate(snap, eval_dataset, eval_tasks or [])))
    ckpt = _make_checkpoint(spec, config, params, m, v_, opt_step, config.epochs, global_step)
    return ckpt, log


def _log_row(step, epoch, loss_val, trace, wall) -> TrainLogRow:
    agg = {f: 0.0 for f in ("recon", "kl_z", "kl_y", "kl_c", "sup_y", "sup_c", "label_const")}
    for r in trace:
        for f in agg:
            agg[f] += getattr(r, f)
    return TrainLogRow(step=step, epoch=epoch, loss=loss_val, wall=wall, **agg)


def _make_checkpoint(spec, config, params, m, v_, opt_step, epoch, global_step) -> Checkpoint:
    return Checkpoint(
        spec=spec,
        params={k: p.data.copy() for k, p in params.items()},
        opt_m={k: a.copy() for k, a in m.items()},
        opt_v={k: a.copy() for k, a in v_.items()},
        opt_step=opt_step,
        epoch=epoch,
        global_step=global_step,
        optimizer={
            "kind": config.optimizer,
            "beta1": config.beta1,
            "beta2": config.beta2,
            "eps": config.eps,
        },
    )


# ---------------------------------------------------------------------------
# evaluation


def evaluate(
    ckpt: Checkpoint,
    dataset,
    tasks,
    *,
    repeats: int = DEFAULT_EVAL_REPEATS,
    seed: int = 0,
    forecast_prefix: int = 6,
    forecast_horizon: int = 10,
    forecast_samples: int | None = None,
) -> dict:
    """Run the requested task metrics over a dataset.

    Deterministic tasks (detect, classify, anticipate) are computed once;
    forecasting is averaged over `repeats` seeded evaluations, each of which
    is itself a `forecast_samples`-rollout mean prediction.
    """
    from . import tasks as T
    from .data import validate_against_spec

    spec = ckpt.spec
    params = {k: Tensor(v.copy()) for k, v in ckpt.params.items()}
    dataset = list(dataset)
    for b in dataset:
        validate_against_spec(b, spec)
    report: dict = {}
    if not tasks:
        return report

    if any(t in ("detect", "classify", "anticipate") for t in tasks):
        preds, truths, ant_preds, ant_truths = [], [], [], []
        cls_hits = cls_total = 0
        for b in dataset:
            post, prior, _ = T.recognition_pass(spec, params, b)
            for e, ent in enumerate(b.entities):
                y = ent.y_indices(b.length)
                if "detect" in tasks:
                    preds.append(post[e].argmax(axis=1))
                    truths.append(y)
                if "anticipate" in tasks and b.length > 1:
                    ant_preds.append(prior[e][1:].argmax(axis=1))
                    ant_truths.append(y[1:])
            if "classify" in tasks:
                observed = b.entities[0].y_indices(b.length)
                observed = observed[observed >= 0]
                if observed.size:
                    truth = int(np.bincount(observed).argmax())
                    tail = min(T.DEFAULT_TAIL_FRAMES, b.length)
                    got = T.classify_sequence(spec, params, b, tail_frames=tail)[0][0]
                    cls_hits += int(got == truth)
                    cls_total += 1
        if "detect" in tasks:
            p = np.concatenate(preds)
            t = np.concatenate(truths)
            report["detect_accuracy"] = T.accuracy(p, t)
            report["detect_f1"] = T.f1_macro(p, t, spec.dim_y)
        if "anticipate" in tasks:
            report["anticipate_accuracy"] = T.accuracy(np.concatenate(ant_preds), np.concatenate(ant_truths))
        if "classify" in tasks and cls_total:
            report["classify_accuracy"] = cls_hits / cls_total

    if "forecast" in tasks:
        n_samples = T.DEFAULT_FORECAST_SAMPLES if forecast_samples is None else forecast_samples
        ases, frozen = [], []
        for b in dataset:
            if b.length < forecast_prefix + forecast_horizon:
                continue
            per_rep = []
            for rep in range(repeats):
                fc = T.forecast(
                    spec, params, b, forecast_prefix, forecast_horizon,
                    n_samples=n_samples, seed=seed * 100003 + rep,
                )
                truth = [
                    ent.frames[forecast_prefix : forecast_prefix + forecast_horizon]
                    for ent in b.entities
                ]
                per_rep.append(T.accumulated_sq_error(fc.mean_trajectory, truth, forecast_horizon))
            ases.append(float(np.mean(per_rep)))
            truth = [
                ent.frames[forecast_prefix : forecast_prefix + forecast_horizon]
                for ent in b.entities
            ]
            hold = [
                np.repeat(ent.frames[forecast_prefix - 1 : forecast_prefix], forecast_horizon, axis=0)
                for ent in b.entities
            ]
            frozen.append(T.accumulated_sq_error(hold, truth, forecast_horizon))
        if ases:
            report["forecast_ase"] = float(np.mean(ases))
            report["forecast_frozen_ase"] = float(np.mean(frozen))
            report["forecast_repeats"] = repeats
    return report


__all__ = [
    "TrainConfig",
    "TrainLog",
    "TrainLogRow",
    "train",
    "evaluate",
    "motion_config",
    "Checkpoint",
    "CheckpointError",
    "save_checkpoint",
    "load_checkpoint",
    "DivergenceError",
    "DEFAULT_LEARNING_RATE",
    "MOTION_LEARNING_RATE",
    "DEFAULT_EVAL_REPEATS",
]
