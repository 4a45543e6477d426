"""Sequence datasets: on-disk format, preprocessing, label masking, and a
switching-linear-dynamics generator with an exact forward-filter oracle.

On-disk format (one JSON object per line, UTF-8):

    {"id": str,
     "entities": [{"role": str, "group": str,
                   "frames": [[float, ...], ...],      # T x dim_x
                   "y": [int|null, ...],               # per-frame label
                   "c": [int|null, ...] | null,        # per-frame parent label
                   "initial": [float, ...] | null},    # pre-residual first frame
                  ...]}

null labels mean unobserved.  Floats are written with Python's shortest
round-trip repr, so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from .rng import keyed_generator


class DataError(ValueError):
    pass


UNOBSERVED = -1


def _labels_to_array(raw, T: int, what: str, rec: str) -> np.ndarray:
    if raw is None:
        return np.full(T, UNOBSERVED, dtype=np.int64)
    if len(raw) != T:
        raise DataError(f"recording '{rec}': {what} has {len(raw)} entries for {T} frames")
    out = np.full(T, UNOBSERVED, dtype=np.int64)
    for i, v in enumerate(raw):
        if v is not None:
            out[i] = int(v)
    return out


@dataclass
class EntitySeq:
    role: str
    group: str
    frames: np.ndarray                 # (T, dim_x) float64
    y: np.ndarray | None = None        # (T,) int64, -1 unobserved
    c: np.ndarray | None = None
    initial: np.ndarray | None = None  # first frame prior to residual conversion

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2:
            raise DataError(f"frames must be 2-d, got shape {self.frames.shape}")
        if self.y is not None:
            self.y = np.asarray(self.y, dtype=np.int64)
        if self.c is not None:
            self.c = np.asarray(self.c, dtype=np.int64)
        if self.initial is not None:
            self.initial = np.asarray(self.initial, dtype=np.float64)

    def y_indices(self, T: int) -> np.ndarray:
        return self.y if self.y is not None else np.full(T, UNOBSERVED, dtype=np.int64)

    def c_indices(self, T: int) -> np.ndarray:
        return self.c if self.c is not None else np.full(T, UNOBSERVED, dtype=np.int64)


@dataclass
class SequenceBatch:
    rec_id: str
    entities: list

    @property
    def length(self) -> int:
        return self.entities[0].frames.shape[0]

    def validate(self) -> "SequenceBatch":
        if not self.entities:
            raise DataError(f"recording '{self.rec_id}': no entities")
        T = self.length
        for ent in self.entities:
            if ent.frames.shape[0] != T:
                raise DataError(
                    f"recording '{self.rec_id}': entity '{ent.role}' has {ent.frames.shape[0]} frames, expected {T}"
                )
            if not np.all(np.isfinite(ent.frames)):
                raise DataError(f"recording '{self.rec_id}': non-finite frame values")
            for name, lab in (("y", ent.y), ("c", ent.c)):
                if lab is not None and lab.shape != (T,):
                    raise DataError(f"recording '{self.rec_id}': {name} labels misaligned")
        if len(self.entities) > 1:
            # labels must be observed / unobserved at the same frames everywhere
            ref = self.entities[0].y_indices(T) >= 0
            for ent in self.entities[1:]:
                if not np.array_equal(ent.y_indices(T) >= 0, ref):
                    raise DataError(
                        f"recording '{self.rec_id}': label observedness differs across entities"
                    )
        return self


def validate_against_spec(batch: SequenceBatch, spec) -> None:
    batch.validate()
    if len(batch.entities) != spec.n_entities:
        raise DataError(
            f"recording '{batch.rec_id}': {len(batch.entities)} entities, model expects {spec.n_entities}"
        )
    T = batch.length
    for e, ent in enumerate(batch.entities):
        if ent.frames.shape[1] != spec.dim_x[e]:
            raise DataError(
                f"recording '{batch.rec_id}': entity {e} has dim {ent.frames.shape[1]}, model expects {spec.dim_x[e]}"
            )
        y = ent.y_indices(T)
        if np.any(y >= spec.dim_y):
            raise DataError(f"recording '{batch.rec_id}': label index out of range")
        c = ent.c_indices(T)
        if np.any(c >= 0) and not spec.hierarchical:
            raise DataError(f"recording '{batch.rec_id}': parent labels on a flat model")
        if spec.hierarchical and np.any(c >= spec.dim_c):
            raise DataError(f"recording '{batch.rec_id}': parent label index out of range")


# ---------------------------------------------------------------------------
# serialization


def _labels_to_json(lab: np.ndarray | None):
    if lab is None:
        return None
    return [None if v < 0 else int(v) for v in lab]


def save_sequences(path, batches) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for b in batches:
            record = {
                "id": b.rec_id,
                "entities": [
                    {
                        "role": ent.role,
                        "group": ent.group,
                        "frames": [[float(v) for v in row] for row in ent.frames],
                        "y": _labels_to_json(ent.y),
                        "c": _labels_to_json(ent.c),
                        "initial": None if ent.initial is None else [float(v) for v in ent.initial],
                    }
                    for ent in b.entities
                ],
            }
            fh.write(json.dumps(record, separators=(",", ":")) + "\n")


def load_sequences(path):
    batches = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{lineno}: parse error: {e}") from None
            rec_id = str(record.get("id", f"line{lineno}"))
            entities = []
            for ent in record.get("entities", []):
                frames = np.asarray(ent["frames"], dtype=np.float64)
                T = frames.shape[0]
                entities.append(
                    EntitySeq(
                        role=ent.get("role", "human"),
                        group=ent.get("group", ent.get("role", "human")),
                        frames=frames,
                        y=_labels_to_array(ent.get("y"), T, "y", rec_id) if ent.get("y") is not None else None,
                        c=_labels_to_array(ent.get("c"), T, "c", rec_id) if ent.get("c") is not None else None,
                        initial=None if ent.get("initial") is None else np.asarray(ent["initial"], dtype=np.float64),
                    )
                )
            batches.append(SequenceBatch(rec_id=rec_id, entities=entities).validate())
    return batches


# ---------------------------------------------------------------------------
# preprocessing


def preprocess(batch: SequenceBatch, *, center_root=None, smooth_window: int = 1,
               residuals: bool = False, coords_per_joint: int = 3) -> SequenceBatch:
    """Root-centering, temporal smoothing and residual conversion, in that
    order.  Pure: returns a new batch."""
    if smooth_window < 1 or smooth_window % 2 == 0:
        raise DataError("smooth_window must be odd and >= 1")
    out_entities = []
    for ent in batch.entities:
        frames = ent.frames.copy()
        if center_root is not None:
            d = frames.shape[1]
            if d % coords_per_joint != 0:
                raise DataError(f"feature dim {d} not divisible by {coords_per_joint}")
            n_joints = d // coords_per_joint
            if not 0 <= center_root < n_joints:
                raise DataError(f"root joint {center_root} out of range for {n_joints} joints")
            shaped = frames.reshape(frames.shape[0], n_joints, coords_per_joint)
            shaped = shaped - shaped[:, center_root : center_root + 1, :]
            frames = shaped.reshape(frames.shape[0], d)
        if smooth_window > 1:
            half = smooth_window // 2
            sm = np.empty_like(frames)
            T = frames.shape[0]
            for t in range(T):
                lo, hi = max(0, t - half), min(T, t + half + 1)
                sm[t] = frames[lo:hi].mean(axis=0)
            frames = sm
        initial = ent.initial
        if residuals:
            initial = frames[0].copy()
            shifted = np.zeros_like(frames)
            shifted[1:] = frames[1:] - frames[:-1]
            frames = shifted
        out_entities.append(replace(ent, frames=frames, initial=initial))
    return SequenceBatch(rec_id=batch.rec_id, entities=out_entities).validate()


def reconstruct_from_residuals(ent: EntitySeq) -> np.ndarray:
    """Cumulative-sum inverse of residual conversion (requires `initial`)."""
    if ent.initial is None:
        raise DataError("entity has no stored initial frame")
    return ent.initial + np.cumsum(ent.frames, axis=0)


# ---------------------------------------------------------------------------
# label masking

MASK_MODES = ("per_frame", "tail_only", "interval")

# Masking presets for the standard dataset protocols.
PROTOCOL_MASKS = {
    "cad120": ("per_frame", 0.25, None),
    "utk": ("per_frame", 0.10, None),
    "sbu_classify": ("tail_only", None, 7),
    "sbu_motion": ("tail_only", None, 3),
}


def mask_labels(dataset, fraction, seed: int, mode: str = "per_frame", *, k: int | None = None,
                which: str = "y"):
    """Deterministically mark labels unobserved.

    per_frame: each observed frame is masked with probability `fraction`
    (jointly across entities, preserving multi-entity alignment).
    tail_only: only each recording's final `k` labels stay observed.
    interval: whole same-label runs are masked until at least `fraction` of
    the observed frames are hidden.
    """
    if mode not in MASK_MODES:
        raise DataError(f"unknown mask mode '{mode}'")
    if mode == "tail_only":
        if k is None or k < 0:
            raise DataError("tail_only requires k >= 0")
    elif not 0.0 <= fraction <= 1.0:
        raise DataError("fraction must lie in [0, 1]")
    if which not in ("y", "c"):
        raise DataError("which must be 'y' or 'c'")

    out = []
    for b in dataset:
        T = b.length
        get = lambda ent: ent.y_indices(T) if which == "y" else ent.c_indices(T)
        observed = get(b.entities[0]) >= 0
        if mode == "per_frame":
            u = keyed_generator(seed, "mask", b.rec_id).random(T)
            hide = observed & (u < fraction)
        elif mode == "tail_only":
            hide = observed.copy()
            if k > 0:
                hide[-k:] = False
        else:
            hide = _interval_mask(get(b.entities[0]), observed, fraction, seed, b.rec_id)
        ents = []
        for ent in b.entities:
            lab = get(ent).copy()
            lab[hide] = UNOBSERVED
            ents.append(replace(ent, **{which: lab}))
        out.append(SequenceBatch(rec_id=b.rec_id, entities=ents).validate())
    return out


def _interval_mask(labels, observed, fraction, seed, rec_id):
    runs = []
    t = 0
    T = len(labels)
    while t < T:
        if not observed[t]:
            t += 1
            continue
        start = t
        while t < T and observed[t] and labels[t] == labels[start]:
            t += 1
        runs.append((start, t))
    order = keyed_generator(seed, "mask-interval", rec_id).permutation(len(runs))
    target = fraction * observed.sum()
    hide = np.zeros(T, dtype=bool)
    hidden = 0
    for idx in order:
        if hidden >= target:
            break
        lo, hi = runs[idx]
        hide[lo:hi] = True
        hidden += hi - lo
    return hide


# ---------------------------------------------------------------------------
# synthetic switching dynamics


@dataclass
class SynthSpec:
    """Markov-switching linear dynamics: x_t = A_k x_{t-1} + b_k + noise."""

    n_modes: int
    dim_x: int
    transition: np.ndarray         # (K, K), rows on the simplex
    dynamics_a: np.ndarray         # (K, dim_x, dim_x)
    dynamics_b: np.ndarray         # (K, dim_x)
    noise_scale: float
    length_range: tuple = (60, 60)
    unobserved_fraction: float = 0.0
    n_entities: int = 1
    parent_map: tuple | None = None  # optional mode -> parent class

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=np.float64)
        self.dynamics_a = np.asarray(self.dynamics_a, dtype=np.float64)
        self.dynamics_b = np.asarray(self.dynamics_b, dtype=np.float64)
        K, d = self.n_modes, self.dim_x
        if self.transition.shape != (K, K) or not np.allclose(self.transition.sum(axis=1), 1.0):
            raise DataError("transition must be (K, K) with rows summing to 1")
        if self.dynamics_a.shape != (K, d, d) or self.dynamics_b.shape != (K, d):
            raise DataError("dynamics shapes must be (K, d, d) and (K, d)")
        if self.noise_scale < 0:
            raise DataError("noise scale must be >= 0")

    def stationary(self) -> np.ndarray:
        """Stationary distribution of the mode chain (power iteration)."""
        pi = np.full(self.n_modes, 1.0 / self.n_modes)
        for _ in range(10000):
            nxt = pi @ self.transition
            if np.abs(nxt - pi).max() < 1e-14:
                return nxt
            pi = nxt
        return pi


@dataclass
class OracleRecord:
    spec: SynthSpec
    modes: dict  # rec_id -> (T,) int array of true modes


def synth_generate(spec: SynthSpec, n_sequences: int, seed: int):
    """Draw sequences from the switching chain; returns (dataset, oracle record)."""
    batches = []
    modes_by_id = {}
    lo, hi = spec.length_range
    for i in range(n_sequences):
        rng = keyed_generator(seed, "synth", i)
        T = int(rng.integers(lo, hi + 1))
        modes = np.empty(T, dtype=np.int64)
        modes[0] = rng.integers(spec.n_modes)
        for t in range(1, T):
            modes[t] = rng.choice(spec.n_modes, p=spec.transition[modes[t - 1]])
        rec_id = f"synth-{seed}-{i:04d}"
        entities = []
        for e in range(spec.n_entities):
            x = np.zeros((T, spec.dim_x))
            prev = np.zeros(spec.dim_x)
            for t in range(T):
                k = modes[t]
                x[t] = spec.dynamics_a[k] @ prev + spec.dynamics_b[k] + spec.noise_scale * rng.standard_normal(spec.dim_x)
                prev = x[t]
            c = None
            if spec.parent_map is not None:
                c = np.asarray([spec.parent_map[m] for m in modes], dtype=np.int64)
            role = "human" if e == 0 else "object"
            entities.append(EntitySeq(role=role, group=role, frames=x, y=modes.copy(), c=c))
        batches.append(SequenceBatch(rec_id=rec_id, entities=entities).validate())
        modes_by_id[rec_id] = modes
    if spec.unobserved_fraction > 0:
        batches = mask_labels(batches, spec.unobserved_fraction, seed, "per_frame")
    return batches, OracleRecord(spec=spec, modes=modes_by_id)


def oracle_filter(spec: SynthSpec, batch: SequenceBatch) -> np.ndarray:
    """Exact per-frame posterior over modes given the known generator.

    Standard forward recursion in log space; emissions multiply across
    entities.  Rows sum to one.
    """
    T = batch.length
    K = spec.n_modes
    log_alpha = np.zeros((T, K))
    log_trans = np.log(spec.transition + 1e-300)
    prev = [np.zeros(spec.dim_x) for _ in batch.entities]
    log_prior = np.full(K, -np.log(K))
    var = spec.noise_scale**2
    for t in range(T):
        log_em = np.zeros(K)
        for k in range(K):
            for e, ent in enumerate(batch.entities):
                mean = spec.dynamics_a[k] @ prev[e] + spec.dynamics_b[k]
                diff = ent.frames[t] - mean
                log_em[k] += -0.5 * (diff @ diff) / var - 0.5 * spec.dim_x * np.log(2 * np.pi * var)
        if t == 0:
            la = log_prior + log_em
        else:
            prior_t = _log_matvec(log_trans, log_alpha[t - 1])
            la = prior_t + log_em
        log_alpha[t] = la - _logsumexp(la)
        prev = [ent.frames[t] for ent in batch.entities]
    return np.exp(log_alpha)


def _logsumexp(v: np.ndarray) -> float:
    m = v.max()
    return m + np.log(np.exp(v - m).sum())


def _log_matvec(log_trans: np.ndarray, log_alpha_prev: np.ndarray) -> np.ndarray:
    # log sum_j alpha_j T[j, k]
    combined = log_alpha_prev[:, None] + log_trans
    m = combined.max(axis=0)
    return m + np.log(np.exp(combined - m).sum(axis=0))


def filter_accuracy(spec: SynthSpec, batches, oracle: OracleRecord) -> float:
    """argmax-posterior accuracy of the exact filter against the true modes."""
    hits = total = 0
    for b in batches:
        post = oracle_filter(spec, b)
        truth = oracle.modes[b.rec_id]
        hits += int((post.argmax(axis=1) == truth).sum())
        total += len(truth)
    return hits / total


# ---------------------------------------------------------------------------
# manifests and role tags


def save_fold_manifest(path, folds: dict) -> None:
    """Plain-text fold membership: one 'fold<TAB>recording_id' line per entry."""
    with open(path, "w", encoding="utf-8") as fh:
        for fold in sorted(folds):
            for rec in folds[fold]:
                fh.write(f"{fold}\t{rec}\n")


def load_fold_manifest(path) -> dict:
    folds = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataError(f"{path}:{lineno}: expected 'fold<TAB>recording'")
            folds.setdefault(parts[0], []).append(parts[1])
    return folds


def load_role_tags(path) -> list:
    """Parse 'recording;action;subject;level' role-tag lines (0 = active,
    1 = passive), grouped under '# fold N' headers."""
    entries = []
    fold = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                fold = line.lstrip("#").strip()
                continue
            parts = line.split(";")
            if len(parts) != 4:
                raise DataError(f"{path}:{lineno}: expected 4 ';'-separated fields")
            entries.append(
                {
                    "fold": fold,
                    "recording": parts[0],
                    "action": parts[1],
                    "subject": parts[2],
                    "role": "active" if parts[3] == "0" else "passive",
                }
            )
    return entries
