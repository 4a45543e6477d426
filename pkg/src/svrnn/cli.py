"""Command-line entry point.

Subcommands: synth-data, train, eval, detect, forecast, gradcheck.  Every
run writes its fully resolved configuration (key=value lines) next to its
outputs, so any artifact can be reproduced from the config and the inputs
alone.  All randomness flows through --seed.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import data as D
from . import gradcheck as G
from . import model as M
from . import tasks as T
from . import trainer as TR
from .autodiff import AutodiffError


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _write_config(out_dir: str, command: str, values: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    lines = [f"command={command}"]
    for k in sorted(values):
        v = values[k]
        if isinstance(v, (list, tuple)):
            v = ",".join(str(x) for x in v)
        lines.append(f"{k}={v}")
    with open(os.path.join(out_dir, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _load_config_file(path: str) -> dict:
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value")
            k, _, v = line.partition("=")
            values[k.strip()] = v.strip()
    return values


def _apply_config_defaults(args, parser_defaults: dict):
    """Config-file values fill in anything the command line left at default."""
    if not getattr(args, "config", None):
        return
    file_values = _load_config_file(args.config)
    for k, v in file_values.items():
        attr = k.replace("-", "_")
        if not hasattr(args, attr) or attr in ("config", "command"):
            continue
        if getattr(args, attr) != parser_defaults.get(attr):
            continue  # explicit flag wins over the config file
        current = parser_defaults.get(attr)
        if isinstance(current, bool):
            setattr(args, attr, v.lower() in ("1", "true", "yes"))
        elif isinstance(current, int):
            setattr(args, attr, int(v))
        elif isinstance(current, float):
            setattr(args, attr, float(v))
        else:
            setattr(args, attr, v)


def _spec_from_args(args, dataset) -> M.ModelSpec:
    n_entities = len(dataset[0].entities)
    dim_x = tuple(ent.frames.shape[1] for ent in dataset[0].entities)
    n_objects = n_entities - 1
    if args.variant == "auto":
        if args.dim_c is not None:
            variant = "multi-entity-hierarchical" if n_objects else "hierarchical"
        else:
            variant = "multi-entity" if n_objects else "flat"
    else:
        variant = args.variant
    max_y = max(int(ent.y_indices(b.length).max(initial=-1)) for b in dataset for ent in b.entities)
    dim_y = args.dim_y if args.dim_y else max_y + 1
    if dim_y < 1:
        raise UsageError("dataset has no labels; pass --dim-y explicitly")
    return M.ModelSpec(
        variant=variant,
        dim_x=dim_x,
        dim_y=dim_y,
        dim_z=args.dim_z,
        hidden_width=args.hidden,
        dim_c=args.dim_c,
        recurrent_layers=args.layers,
        n_objects=n_objects,
        temperature=args.temperature,
        alpha=args.alpha,
        dropout_rate=args.dropout,
        residual_mode=args.residual,
    )


def _cmd_synth_data(args) -> int:
    rng = np.random.default_rng(args.seed)
    K, d = args.modes, args.dim_x
    angles = np.linspace(0.15, 0.75, K)
    A = np.zeros((K, d, d))
    for k in range(K):
        for j in range(0, d - 1, 2):
            c, s = np.cos(angles[k]), np.sin(angles[k])
            A[k, j : j + 2, j : j + 2] = 0.92 * np.array([[c, -s], [s, c]])
        if d % 2:
            A[k, d - 1, d - 1] = 0.9
    targets = rng.normal(size=(K, d))
    targets *= 2.0 / np.linalg.norm(targets, axis=1, keepdims=True)
    b = np.stack([(np.eye(d) - A[k]) @ targets[k] for k in range(K)])
    trans = np.full((K, K), (1.0 - args.stay) / (K - 1)) if K > 1 else np.ones((1, 1))
    if K > 1:
        np.fill_diagonal(trans, args.stay)
    sspec = D.SynthSpec(
        n_modes=K, dim_x=d, transition=trans, dynamics_a=A, dynamics_b=b,
        noise_scale=args.noise, length_range=(args.length_min, args.length_max),
        unobserved_fraction=args.mask_fraction, n_entities=args.entities,
    )
    dataset, oracle = D.synth_generate(sspec, args.n, args.seed)
    D.save_sequences(args.out, dataset)
    meta = {
        "n_modes": K, "dim_x": d, "transition": trans.tolist(),
        "dynamics_a": A.tolist(), "dynamics_b": b.tolist(),
        "noise_scale": args.noise, "length_range": [args.length_min, args.length_max],
        "unobserved_fraction": args.mask_fraction, "n_entities": args.entities,
        "true_modes": {k: v.tolist() for k, v in oracle.modes.items()},
    }
    with open(args.out + ".meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, sort_keys=True)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    _write_config(out_dir, "synth-data", vars(args))
    print(f"wrote {len(dataset)} sequences to {args.out}")
    return 0


def _cmd_train(args) -> int:
    dataset = D.load_sequences(args.data)
    spec = _spec_from_args(args, dataset)
    if args.mask_fraction > 0 or args.mask_mode != "per_frame":
        dataset = D.mask_labels(
            dataset, args.mask_fraction, args.seed, args.mask_mode, k=args.mask_tail
        )
    config = TR.TrainConfig(
        learning_rate=args.lr, clip_threshold=args.clip, batch_size=args.batch_size,
        epochs=args.epochs, seed=args.seed, optimizer=args.optimizer,
        eval_every=args.eval_every,
        mask_policy=f"{args.mask_mode}:{args.mask_fraction}:{args.mask_tail}",
    )
    os.makedirs(args.out, exist_ok=True)
    ckpt, log = TR.train(
        spec, config, dataset,
        checkpoint_dir=args.out if args.eval_every else None,
    )
    TR.save_checkpoint(os.path.join(args.out, "checkpoint.ckpt"), ckpt)
    with open(os.path.join(args.out, "train_log.csv"), "w", encoding="utf-8") as fh:
        fh.write(log.to_csv())
    resolved = dict(vars(args))
    resolved.update(spec.to_dict())
    _write_config(args.out, "train", resolved)
    print(f"final loss {log.rows[-1].loss:.4f} after {len(log.rows)} steps -> {args.out}")
    return 0


def _cmd_eval(args) -> int:
    ckpt = TR.load_checkpoint(args.checkpoint)
    dataset = D.load_sequences(args.data)
    tasks = [t.strip() for t in args.tasks.split(",") if t.strip()]
    report = TR.evaluate(
        ckpt, dataset, tasks, repeats=args.repeats, seed=args.seed,
        forecast_prefix=args.forecast_prefix, forecast_horizon=args.forecast_horizon,
        forecast_samples=args.forecast_samples,
    )
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "metrics.csv"), "w", encoding="utf-8") as fh:
        fh.write(T.metrics_csv(report))
    with open(os.path.join(args.out, "metrics.txt"), "w", encoding="utf-8") as fh:
        fh.write(T.metrics_text(report))
    _write_config(args.out, "eval", vars(args))
    sys.stdout.write(T.metrics_text(report))
    return 0


def _cmd_detect(args) -> int:
    ckpt = TR.load_checkpoint(args.checkpoint)
    dataset = D.load_sequences(args.data)
    os.makedirs(args.out, exist_ok=True)
    from .autodiff import Tensor

    params = {k: Tensor(v.copy()) for k, v in ckpt.params.items()}
    path = os.path.join(args.out, "timelines.csv")
    with open(path, "w", encoding="utf-8") as fh:
        header = ",".join(f"belief_{k}" for k in range(ckpt.spec.dim_y))
        fh.write(f"recording,entity,t,prediction,{header}\n")
        for b in dataset:
            for tl in T.detect(ckpt.spec, params, b):
                for t in range(len(tl.predictions)):
                    beliefs = ",".join(repr(float(v)) for v in tl.beliefs[t])
                    fh.write(f"{b.rec_id},{tl.entity},{t},{tl.predictions[t]},{beliefs}\n")
    _write_config(args.out, "detect", vars(args))
    print(f"wrote {path}")
    return 0


def _cmd_forecast(args) -> int:
    ckpt = TR.load_checkpoint(args.checkpoint)
    dataset = D.load_sequences(args.data)
    from .autodiff import Tensor

    params = {k: Tensor(v.copy()) for k, v in ckpt.params.items()}
    clamp = tuple(args.clamp_entity or ())
    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, "forecast.jsonl")
    forecasts = []
    for b in dataset:
        fc = T.forecast(
            ckpt.spec, params, b, args.prefix, args.horizon,
            n_samples=args.samples, seed=args.seed, clamp_entities=clamp,
            use_prior=args.use_prior,
        )
        forecasts.append(T.forecast_to_batch(fc, f"{b.rec_id}/forecast", b))
    D.save_sequences(out_path, forecasts)
    _write_config(args.out, "forecast", vars(args))
    print(f"wrote {out_path}")
    return 0


def _cmd_gradcheck(args) -> int:
    variants = ("flat", "hierarchical", "multi-entity") if args.all_variants else ("flat",)
    results = G.battery(seed=args.seed, epsilon=args.epsilon, variants=variants)
    worst = 0.0
    for name, err in results:
        print(f"{name:24s} {err:.3e}")
        worst = max(worst, err)
    print(f"{'max':24s} {worst:.3e}  (threshold {args.threshold:.1e})")
    return 0 if worst < args.threshold else 2


def build_parser() -> _Parser:
    p = _Parser(prog="svrnn", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    sd = sub.add_parser("synth-data", help="generate a switching-dynamics dataset")
    sd.add_argument("--out", required=True)
    sd.add_argument("--n", type=int, default=20)
    sd.add_argument("--seed", type=int, default=0)
    sd.add_argument("--modes", type=int, default=3)
    sd.add_argument("--dim-x", type=int, default=6)
    sd.add_argument("--length-min", type=int, default=60)
    sd.add_argument("--length-max", type=int, default=60)
    sd.add_argument("--noise", type=float, default=0.1)
    sd.add_argument("--stay", type=float, default=0.85)
    sd.add_argument("--mask-fraction", type=float, default=0.0)
    sd.add_argument("--entities", type=int, default=1)

    tr = sub.add_parser("train", help="train a model on a sequence dataset")
    tr.add_argument("--data", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--config", default=None, help="key=value file; flags take precedence")
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--epochs", type=int, default=10)
    tr.add_argument("--batch-size", type=int, default=8)
    tr.add_argument("--lr", type=float, default=TR.DEFAULT_LEARNING_RATE)
    tr.add_argument("--clip", type=float, default=5.0)
    tr.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    tr.add_argument("--variant", default="auto",
                    choices=("auto",) + M.VARIANTS)
    tr.add_argument("--dim-y", type=int, default=0, help="label classes (default: inferred)")
    tr.add_argument("--dim-c", type=int, default=None)
    tr.add_argument("--dim-z", type=int, default=16)
    tr.add_argument("--hidden", type=int, default=32)
    tr.add_argument("--layers", type=int, default=1)
    tr.add_argument("--temperature", type=float, default=0.1)
    tr.add_argument("--dropout", type=float, default=0.1)
    tr.add_argument("--alpha", type=float, default=None)
    tr.add_argument("--residual", action="store_true")
    tr.add_argument("--mask-fraction", type=float, default=0.0)
    tr.add_argument("--mask-mode", choices=D.MASK_MODES, default="per_frame")
    tr.add_argument("--mask-tail", type=int, default=None)
    tr.add_argument("--eval-every", type=int, default=0,
                    help="epochs between intermediate checkpoints (0 = final only)")

    ev = sub.add_parser("eval", help="run task metrics from a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--out", required=True)
    ev.add_argument("--tasks", default="detect")
    ev.add_argument("--repeats", type=int, default=TR.DEFAULT_EVAL_REPEATS)
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--forecast-prefix", type=int, default=6)
    ev.add_argument("--forecast-horizon", type=int, default=10)
    ev.add_argument("--forecast-samples", type=int, default=None,
                    help="rollouts averaged per forecast (default: 20)")

    de = sub.add_parser("detect", help="per-frame label timeline for a stream")
    de.add_argument("--checkpoint", required=True)
    de.add_argument("--data", required=True)
    de.add_argument("--out", required=True)

    fc = sub.add_parser("forecast", help="roll out future frames past a prefix")
    fc.add_argument("--checkpoint", required=True)
    fc.add_argument("--data", required=True)
    fc.add_argument("--out", required=True)
    fc.add_argument("--prefix", type=int, default=6)
    fc.add_argument("--horizon", type=int, default=10)
    fc.add_argument("--samples", type=int, default=T.DEFAULT_FORECAST_SAMPLES)
    fc.add_argument("--seed", type=int, default=0)
    fc.add_argument("--clamp-entity", type=int, action="append")
    fc.add_argument("--use-prior", action="store_true")

    gc = sub.add_parser("gradcheck", help="finite-difference gradient certification")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--epsilon", type=float, default=1e-5)
    gc.add_argument("--threshold", type=float, default=1e-4)
    gc.add_argument("--all-variants", action="store_true",
                    help="also check the hierarchical and multi-entity closures")

    p.command_parsers = {"synth-data": sd, "train": tr, "eval": ev,
                         "detect": de, "forecast": fc, "gradcheck": gc}
    return p


_COMMANDS = {
    "synth-data": _cmd_synth_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "detect": _cmd_detect,
    "forecast": _cmd_forecast,
    "gradcheck": _cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "config", None):
            defaults = {a.dest: a.default for a in parser.command_parsers[args.command]._actions}
            _apply_config_defaults(args, defaults)
        return _COMMANDS[args.command](args)
    except UsageError as e:
        sys.stderr.write(f"usage error: {e}\n")
        return 1
    except (D.DataError, TR.CheckpointError, TR.DivergenceError, AutodiffError,
            M.SpecError, ValueError, OSError) as e:
        sys.stderr.write(f"error: {type(e).__name__}: {e}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
