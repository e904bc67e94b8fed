"""Command-line entry point: ``weathercnn {synth,train,tune,eval,export}``."""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys

import numpy as np
import yaml

from .data import apply_stats, build_synthetic_dataset, export_ppm, normalize, read_dataset, split, write_dataset
from .errors import ConfigError, ValidationError, WeatherCNNError
from .events import EventKind
from .hyperopt import TrialStore, default_cnn_space, load_space, run_optimization
from .network import (SgdParams, build, describe, evaluate, load_config, load_model_file,
                      preset_config, save_model_file, train)
from .numerics import Rng

log = logging.getLogger("weathercnn")

SGD_FIELDS = {"learning_rate", "weight_decay", "momentum", "batch_size", "epochs", "seed"}


def positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be at least 1, got {v}")
    return v


def seed_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer seed, got {text!r}") from None
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be in [0, 2**64)")
    return v


def fractions(text):
    try:
        parts = tuple(float(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected three comma-separated numbers, got {text!r}") from None
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected three fractions, got {len(parts)}")
    return parts


def event_kind(text):
    try:
        return EventKind.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


# -- shared pipeline pieces ----------------------------------------------------

def _read_run_config(path):
    """Network config plus the optional ``training:`` mapping of a YAML run file."""
    config = load_config(path)
    with open(path, encoding="utf-8") as fh:
        raw = yaml.safe_load(fh)
    training = raw.get("training", {}) or {}
    if not isinstance(training, dict):
        raise ConfigError(f"{path}: 'training' must be a mapping")
    unknown = set(training) - SGD_FIELDS
    if unknown:
        raise ConfigError(f"{path}: unknown training keys {sorted(unknown)}")
    return config, training


def _network_config(args, dataset):
    training = {}
    if args.config:
        config, training = _read_run_config(args.config)
    else:
        config = preset_config(args.event or dataset.kind)
    if tuple(config.input_dims) != dataset.dims:
        raise ValidationError(
            f"dataset dims {'x'.join(map(str, dataset.dims))} do not match network input "
            f"{'x'.join(map(str, config.input_dims))} ({config.preset})")
    return config, training


def prepare_splits(dataset, fracs, seed):
    """Stratified split, then z-score val/test with stats fitted on train only."""
    train_set, val_set, test_set = split(dataset, fracs, Rng(seed))
    train_set = normalize(train_set)
    return train_set, apply_stats(val_set, train_set.stats), apply_stats(test_set, train_set.stats)


def _annotate(net, dataset, stats):
    net.metadata = {
        "event": dataset.kind.code,
        "channels": list(dataset.channel_names),
        "input_stats": np.asarray(stats).tolist(),
    }


def _model_inputs(net, dataset):
    """Bring ``dataset`` into the normalisation the model was trained under."""
    channels = net.metadata.get("channels")
    if channels is not None and tuple(channels) != dataset.channel_names:
        raise ValidationError(f"model expects channels {channels}, dataset has {list(dataset.channel_names)}")
    if tuple(net.config.input_dims) != dataset.dims:
        raise ValidationError(
            f"model input {'x'.join(map(str, net.config.input_dims))} does not match dataset dims "
            f"{'x'.join(map(str, dataset.dims))}")
    stats = net.metadata.get("input_stats")
    if stats is None:
        return dataset
    stats = np.asarray(stats, dtype=np.float64)
    if np.array_equal(dataset.stats, stats):
        return dataset
    identity = np.tile([0.0, 1.0], (dataset.dims[0], 1))
    if not np.array_equal(dataset.stats, identity):
        raise ValidationError("dataset is normalised with different stats than the model was trained on")
    return apply_stats(dataset, stats)


class TrainingObjective:
    """Tuning objective: train for a fixed number of epochs, return the final
    validation loss. Picklable so worker processes can run it."""

    def __init__(self, data_path, config_path=None, event=None, epochs=15, fracs=(0.8, 0.1, 0.1),
                 split_seed=0):
        self.data_path = os.fspath(data_path)
        self.config_path = config_path
        self.event = event
        self.epochs = epochs
        self.fracs = fracs
        self.split_seed = split_seed
        self._cache = None

    def _data(self):
        if self._cache is None:
            dataset = read_dataset(self.data_path)
            ns = argparse.Namespace(config=self.config_path, event=self.event)
            config, _ = _network_config(ns, dataset)
            train_set, val_set, _ = prepare_splits(dataset, self.fracs, self.split_seed)
            self._cache = (config, train_set, val_set)
        return self._cache

    def __getstate__(self):
        state = dict(self.__dict__)
        state["_cache"] = None
        return state

    def __call__(self, values, seed):
        config, train_set, val_set = self._data()
        params = SgdParams(learning_rate=float(values["learning_rate"]),
                           weight_decay=float(values["weight_decay"]),
                           momentum=float(values["momentum"]),
                           batch_size=int(values["batch_size"]),
                           epochs=self.epochs, seed=seed % 2**64)
        net = build(config, Rng(seed))
        history = train(net, train_set, val_set, params)
        return history.final.val_loss


# -- commands ------------------------------------------------------------------

def cmd_synth(args):
    ds = build_synthetic_dataset(args.event, args.pos, args.neg, Rng(args.seed), workers=args.workers)
    write_dataset(ds, args.out)
    print(f"wrote {len(ds)} records ({ds.n_positive} positive), dims "
          f"{'x'.join(map(str, ds.dims))}, to {args.out}")
    return 0


def cmd_train(args):
    dataset = read_dataset(args.data)
    config, training = _network_config(args, dataset)
    fields = dict(training)
    for flag, key in (("lr", "learning_rate"), ("wd", "weight_decay"), ("momentum", "momentum"),
                      ("batch", "batch_size"), ("epochs", "epochs"), ("seed", "seed")):
        value = getattr(args, flag)
        if value is not None:
            fields[key] = value
    params = SgdParams(**fields)
    train_set, val_set, test_set = prepare_splits(dataset, args.split, params.seed)
    net = build(config, Rng(params.seed).child(1))
    print(describe(net))

    def report(rec):
        print(f"epoch {rec.epoch:3d}  train_loss {rec.train_loss:.4f}  train_acc {rec.train_acc:.4f}"
              f"  val_acc {rec.val_acc:.4f}", flush=True)

    history = train(net, train_set, val_set, params, callback=report if args.verbose else None)
    _annotate(net, dataset, train_set.stats)
    save_model_file(net, args.out)
    log_path = args.log or os.path.splitext(args.out)[0] + ".csv"
    with open(log_path, "w", encoding="utf-8", newline="") as fh:
        fh.write(history.to_csv())
    final = history.final
    test = evaluate(net, test_set)
    print(f"final train_acc {final.train_acc:.4f}  val_acc {final.val_acc:.4f}  test_acc {test.accuracy:.4f}")
    print(f"model written to {args.out}, log to {log_path}")
    return 0


def cmd_tune(args):
    space = load_space(args.space) if args.space else default_cnn_space()
    objective = TrainingObjective(args.data, args.config, args.event, args.epochs, args.split, args.seed)
    # validate the data/config pairing before any trial is recorded
    objective._data()
    store = TrialStore(args.store)
    best = [math.inf]
    names = space.names
    header = f"{'trial':>5}  " + "  ".join(f"{n:>14}" for n in names) + f"  {'loss':>10}  {'best':>10}"
    print(header)

    def show(trial):
        loss = trial.loss if trial.loss is not None else math.inf
        best[0] = min(best[0], loss)
        vals = "  ".join(f"{trial.values[n]:>14.6g}" for n in names)
        print(f"{trial.id:>5}  {vals}  {loss:>10.5g}  {best[0]:>10.5g}", flush=True)

    done_before = [t for t in store.load() if t.consumed]
    for t in sorted(done_before, key=lambda t: (t.finished or 0.0, t.id)):
        show(t)
    result = run_optimization(space, objective, args.trials, args.parallel, store, Rng(args.seed),
                              executor=args.executor, callback=show)
    print("best trial:", result.id, {k: result.values[k] for k in names}, f"loss={result.loss:.6g}")
    return 0


def cmd_eval(args):
    net = load_model_file(args.model)
    dataset = read_dataset(args.data)
    report = evaluate(net, _model_inputs(net, dataset))
    print(f"records: {len(dataset)}  accuracy: {report.accuracy:.4f}")
    print(report.format_table(dataset.kind.title))
    return 0


def cmd_export(args):
    dataset = read_dataset(args.data)
    export_ppm(dataset, args.index, args.channel, args.out)
    print(f"wrote record {args.index} channel {args.channel} to {args.out}")
    return 0


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="weathercnn", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic labelled dataset")
    p.add_argument("--event", type=event_kind, required=True, help="tc, ar or wf")
    p.add_argument("--pos", type=positive_int, required=True, help="number of positive records")
    p.add_argument("--neg", type=positive_int, required=True, help="number of negative records")
    p.add_argument("--seed", type=seed_int, default=0)
    p.add_argument("--workers", type=positive_int, default=1, help="generator processes")
    p.add_argument("--out", required=True, help="output CPDS file")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a network on a dataset")
    p.add_argument("--data", required=True, help="CPDS dataset")
    arch = p.add_mutually_exclusive_group()
    arch.add_argument("--event", type=event_kind, help="use this event's preset architecture")
    arch.add_argument("--config", help="YAML network config (optional 'training' section)")
    p.add_argument("--epochs", type=positive_int)
    p.add_argument("--lr", type=float, help="learning rate")
    p.add_argument("--wd", type=float, help="weight decay")
    p.add_argument("--momentum", type=float)
    p.add_argument("--batch", type=positive_int, help="minibatch size")
    p.add_argument("--split", type=fractions, default=(0.8, 0.1, 0.1), help="train,val,test fractions")
    p.add_argument("--seed", type=seed_int)
    p.add_argument("--out", required=True, help="output model file")
    p.add_argument("--log", help="CSV training log (default: model path with .csv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("tune", help="Bayesian search over training hyperparameters")
    p.add_argument("--data", required=True)
    arch = p.add_mutually_exclusive_group()
    arch.add_argument("--event", type=event_kind)
    arch.add_argument("--config")
    p.add_argument("--trials", type=positive_int, required=True, help="total trial budget")
    p.add_argument("--parallel", type=positive_int, default=1)
    p.add_argument("--executor", choices=("process", "thread"), default="process")
    p.add_argument("--space", help="YAML search space (default: lr, wd, momentum, batch)")
    p.add_argument("--store", required=True, help="trial store (JSON lines, resumable)")
    p.add_argument("--epochs", type=positive_int, default=15, help="epochs per trial")
    p.add_argument("--split", type=fractions, default=(0.8, 0.1, 0.1))
    p.add_argument("--seed", type=seed_int, default=0)
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("eval", help="accuracy and confusion matrix of a saved model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export", help="write one channel of one record as a PPM image")
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, required=True)
    p.add_argument("--channel", required=True, help="channel name or position")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    for attr in ("data", "model"):
        path = getattr(args, attr, None)
        if path is not None and not os.path.isfile(path):
            parser.print_usage(sys.stderr)
            print(f"weathercnn: error: --{attr} {path!r} does not exist", file=sys.stderr)
            return 2
    try:
        return args.func(args)
    except (WeatherCNNError, ValueError, OSError) as exc:
        print(f"weathercnn: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
