"""Command-line workflow: synth, train, evaluate, compare.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numerical abort.
Errors are reported on stderr as a single ``error: <code>: <detail>`` line.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from . import data as D
from .model import (TrainConfig, config_dict, load_checkpoint, model_from_config, predict_mll,
                    save_checkpoint, train)
from .numerics import NonFinite, NotPositiveDefinite, SeededRng, Singular, as_tensor

SEED_ENV = "CNFDGP_SEED"
PREDICT_STREAM = 0xE7

log = logging.getLogger("cnfdgp")


class ConfigError(ValueError):
    code = "config_error"


# ---------------------------------------------------------------- config

_INT_KEYS = {"layers", "inducing", "iters", "seed", "flow_steps", "batch", "mc_samples",
             "predict_samples"}
_FLOAT_KEYS = {"lr", "fraction", "jitter"}
_BOOL_KEYS = {"activation"}


def read_config_file(path) -> dict:
    """Flat ``key = value`` file; ``#`` starts a comment, dashes equal underscores."""
    out = {}
    try:
        fh = open(path)
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e.strerror}") from None
    with fh:
        for n, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{n}: expected 'key = value'")
            k, v = (s.strip() for s in line.split("=", 1))
            out[k.replace("-", "_")] = v
    return out


def _coerce(key, value):
    if value is None or not isinstance(value, str):
        return value
    try:
        if key in _INT_KEYS:
            return int(value)
        if key in _FLOAT_KEYS:
            return float(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r}") from None
    if key in _BOOL_KEYS:
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    return value


def resolve(args, keys) -> dict:
    """Merge flags over config file over environment over defaults."""
    file_vals = read_config_file(args.config) if getattr(args, "config", None) else {}
    unknown = set(file_vals) - set(keys)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    vals = {}
    for k, default in keys.items():
        v = getattr(args, k, None)
        if v is None:
            v = file_vals.get(k)
        if v is None and k == "seed" and os.environ.get(SEED_ENV):
            v = os.environ[SEED_ENV]
        vals[k] = _coerce(k, v) if v is not None else default
    return vals


def parse_dims(layers: int, dims) -> list[int]:
    """Hidden widths for an L-layer model; the output layer always has width 1."""
    if layers < 1:
        raise ConfigError("layers: must be >= 1")
    hidden = [int(d) for d in str(dims).split(",") if d.strip()] if dims is not None else []
    if layers == 1:
        return [1]
    if len(hidden) == 1:
        hidden = hidden * (layers - 1)
    if len(hidden) != layers - 1:
        raise ConfigError(f"dims: need 1 or {layers - 1} hidden widths, got {len(hidden)}")
    if any(d < 1 for d in hidden):
        raise ConfigError("dims: widths must be positive")
    return hidden + [1]


TRAIN_KEYS = {
    "data": None, "target": None, "layers": None, "dims": None, "inducing": None, "iters": None,
    "seed": None, "posterior": "cnf", "flow_steps": 1, "activation": False, "lr": 0.005,
    "batch": 10_000, "mc_samples": 1, "predict_samples": 100, "fraction": 0.9, "jitter": 1e-6,
    "out": None,
}


def build_train_config(vals: dict, depth: int | None = None) -> TrainConfig:
    required = ["data", "layers", "dims", "inducing", "iters", "seed", "out"]
    if depth is not None:
        required.remove("layers")
    if (depth or vals.get("layers")) == 1:
        required.remove("dims")  # a single layer has no hidden widths
    missing = [k for k in required if vals.get(k) is None]
    if missing:
        raise ConfigError(f"missing required settings: {', '.join(missing)}")
    if vals["posterior"] not in ("cnf", "meanfield"):
        raise ConfigError(f"posterior: expected cnf or meanfield, got {vals['posterior']!r}")
    if not 0 < vals["fraction"] < 1:
        raise ConfigError("fraction: must lie strictly between 0 and 1")
    cfg = TrainConfig(
        iterations=vals["iters"], learning_rate=vals["lr"], minibatch_size=vals["batch"],
        mc_samples=vals["mc_samples"], seed=vals["seed"], flow_steps=vals["flow_steps"],
        activation=vals["activation"], num_inducing=vals["inducing"],
        dims=parse_dims(depth or vals["layers"], vals["dims"]), posterior=vals["posterior"],
        predict_samples=vals["predict_samples"], jitter=vals["jitter"],
    )
    try:
        return cfg.validate()
    except ValueError as e:
        raise ConfigError(str(e)) from None


# ---------------------------------------------------------------- commands

@dataclass
class RunReport:
    config: dict
    final_elbo: float
    smoothed_elbo: float
    test_mll: float
    train_seconds: float
    seed: int
    trace: object = field(repr=False, default=None)

    def rows(self):
        yield "seed", self.seed
        yield "final_elbo", repr(self.final_elbo)
        yield "smoothed_elbo", repr(self.smoothed_elbo)
        yield "test_mll", repr(self.test_mll)
        yield "train_seconds", f"{self.train_seconds:.3f}"
        for k, v in self.config.items():
            yield f"config.{k}", ";".join(map(str, v)) if isinstance(v, list) else v


def _check_finite(**values):
    for k, v in values.items():
        if not np.isfinite(v):
            raise NonFinite(f"{k} is not finite")


def fit(train_set: D.Dataset, test_set: D.Dataset, cfg: TrainConfig):
    """Train on a standardized split and score the held-out part."""
    X, y = train_set.standardized()
    if cfg.num_inducing > len(X):
        raise ConfigError(f"inducing: {cfg.num_inducing} exceeds the {len(X)} training rows")
    model = model_from_config(X, cfg)
    t0 = time.perf_counter()
    trace = train(model, X, y, cfg)
    seconds = time.perf_counter() - t0
    Xt, yt = test_set.standardized()
    mll, per_point = predict_mll(model, Xt, yt, cfg.predict_samples,
                                 SeededRng(cfg.seed).child(PREDICT_STREAM), train_set.stats.y_std)
    report = RunReport(config_dict(cfg), trace.elbo[-1], float(trace.smoothed(50)[-1]), mll,
                       seconds, cfg.seed, trace)
    _check_finite(final_elbo=report.final_elbo, test_mll=mll)
    return model, report, per_point


def _write_trace(path, trace):
    lines = ["iter,elbo,seconds"]
    lines += [f"{i},{e!r},{s:.6f}" for i, e, s in zip(trace.iteration, trace.elbo, trace.seconds)]
    D.atomic_write(path, "\n".join(lines) + "\n")


def _write_per_point(path, per_point):
    D.atomic_write(path, "index,mll\n" + "".join(f"{i},{float(v)!r}\n" for i, v in enumerate(per_point)))


def cmd_train(args) -> RunReport:
    vals = resolve(args, TRAIN_KEYS)
    cfg = build_train_config(vals)
    dataset = D.ingest_csv(vals["data"], vals["target"])
    train_set, test_set = D.split(dataset, vals["fraction"], cfg.seed)
    model, report, per_point = fit(train_set, test_set, cfg)
    out = vals["out"]
    os.makedirs(out, exist_ok=True)
    meta = {"config": config_dict(cfg), "stats": train_set.stats.to_dict(),
            "features": train_set.feature_names, "target": train_set.target_name,
            "predict_stream": PREDICT_STREAM}
    save_checkpoint(model, os.path.join(out, "checkpoint.json"), meta)
    train_set.to_csv(os.path.join(out, "train.csv"))
    test_set.to_csv(os.path.join(out, "test.csv"))
    _write_trace(os.path.join(out, "trace.csv"), report.trace)
    _write_per_point(os.path.join(out, "test_mll.csv"), per_point)
    D.atomic_write(os.path.join(out, "report.csv"),
                   "key,value\n" + "".join(f"{k},{v}\n" for k, v in report.rows()))
    summary = (f"posterior={cfg.posterior} layers={len(cfg.dims)} dims={cfg.dims} M={cfg.num_inducing} "
               f"iters={cfg.iterations} seed={cfg.seed}\n"
               f"final ELBO {report.final_elbo:.4f} (smoothed {report.smoothed_elbo:.4f})\n"
               f"test MLL {report.test_mll:.6f} on {len(test_set)} held-out rows\n"
               f"training time {report.train_seconds:.1f}s\n")
    D.atomic_write(os.path.join(out, "summary.txt"), summary)
    print(summary, end="")
    return report


def evaluate_checkpoint(checkpoint, data_path, samples=None, seed=None):
    try:
        model, meta = load_checkpoint(checkpoint)
    except (ValueError, KeyError) as e:
        raise D.SchemaMismatch(f"{checkpoint}: unreadable checkpoint ({e})") from None
    features, target = meta["features"], meta["target"]
    ds = D.ingest_csv(data_path, target, drop_constant=False)
    if ds.feature_names != features:
        raise D.SchemaMismatch(f"checkpoint expects features {features}, file has {ds.feature_names}")
    stats = D.Standardizer.from_dict(meta["stats"])
    X, y = stats.transform(ds.X, ds.y)
    cfg = meta["config"]
    S = samples if samples is not None else cfg["predict_samples"]
    seed = cfg["seed"] if seed is None else seed
    return predict_mll(model, as_tensor(X), as_tensor(y), S,
                       SeededRng(seed).child(meta.get("predict_stream", PREDICT_STREAM)), stats.y_std)


def cmd_evaluate(args):
    mll, per_point = evaluate_checkpoint(args.checkpoint, args.data, args.samples, args.seed)
    _check_finite(test_mll=mll)
    if args.out:
        _write_per_point(args.out, per_point)
    print(f"test MLL {mll!r} over {len(per_point)} rows")
    return mll, per_point


COMPARE_KEYS = dict(TRAIN_KEYS, depths="2", layers=None)


def cmd_compare(args):
    vals = resolve(args, COMPARE_KEYS)
    try:
        depths = [int(d) for d in str(vals["depths"]).split(",") if d.strip()]
    except ValueError:
        raise ConfigError(f"depths: cannot parse {vals['depths']!r}") from None
    if not depths or min(depths) < 1:
        raise ConfigError("depths: need positive depths")
    dataset = D.ingest_csv(vals["data"], vals["target"])
    train_set, test_set = D.split(dataset, vals["fraction"], int(vals["seed"] or 0))
    rows = []
    for depth in depths:
        for posterior in ("cnf", "meanfield"):
            cfg = build_train_config(dict(vals, posterior=posterior), depth=depth)
            _, report, _ = fit(train_set, test_set, cfg)
            rows.append((depth, posterior, report.smoothed_elbo, report.test_mll))
            print(f"depth {depth} {posterior:9s} ELBO {report.smoothed_elbo:12.4f}  MLL {report.test_mll:9.5f}")
    text = "depth,posterior,elbo,mll\n" + "".join(f"{d},{p},{e!r},{m!r}\n" for d, p, e, m in rows)
    os.makedirs(vals["out"], exist_ok=True)
    D.atomic_write(os.path.join(vals["out"], "comparison.csv"), text)
    return rows


def cmd_synth(args):
    ds = D.make_synthetic(args.kind, args.n, args.noise, args.seed)
    ds.to_csv(args.out)
    print(f"wrote {len(ds)} rows to {args.out}")


# ---------------------------------------------------------------- entry point

def _add_train_flags(p, compare=False):
    p.add_argument("--config", help="flat key = value file; flags override it")
    p.add_argument("--data")
    p.add_argument("--target", help="target column name (default: last column)")
    if compare:
        p.add_argument("--depths", help="comma-separated depths, e.g. 2,3,4,5")
    else:
        p.add_argument("--layers", type=int)
    p.add_argument("--dims", help="hidden width, or comma-separated widths per hidden layer")
    p.add_argument("--inducing", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--seed", type=int)
    if not compare:
        p.add_argument("--posterior", choices=["cnf", "meanfield"])
    p.add_argument("--flow-steps", dest="flow_steps", type=int)
    p.add_argument("--activation", action="store_const", const=True)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--mc-samples", dest="mc_samples", type=int)
    p.add_argument("--predict-samples", dest="predict_samples", type=int)
    p.add_argument("--fraction", type=float, help="training fraction of the split (default 0.9)")
    p.add_argument("--jitter", type=float)
    p.add_argument("--out", help="output directory")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def make_parser():
    parser = _Parser(prog="cnfdgp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    _add_train_flags(sub.add_parser("train", help="train a model and write a checkpoint"))
    p = sub.add_parser("evaluate", help="test MLL of a checkpoint on a CSV file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--samples", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="per-point MLL output file")
    _add_train_flags(sub.add_parser("compare", help="flow vs mean-field over several depths"), compare=True)
    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--kind", choices=["step", "sine"], default="step")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    return parser


COMMANDS = {"train": cmd_train, "evaluate": cmd_evaluate, "compare": cmd_compare, "synth": cmd_synth}


def run(argv=None) -> int:
    try:
        args = make_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        COMMANDS[args.command](args)
    except ConfigError as e:
        return _fail(2, "config_error", str(e))
    except D.DataError as e:
        return _fail(3, e.code, str(e))
    except FileNotFoundError as e:
        return _fail(3, "file_not_found", f"{e.filename}: {e.strerror}")
    except NonFinite as e:
        return _fail(4, "non_finite", str(e))
    except (NotPositiveDefinite, Singular) as e:
        return _fail(4, "numerical_error", str(e))
    return 0


def _fail(status, code, detail):
    print(f"error: {code}: {' '.join(str(detail).split())}", file=sys.stderr)
    return status


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
