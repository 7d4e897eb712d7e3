"""Command-line entry point.

    fedatoms fed-run CONFIG [--section.key VALUE ...]
    fedatoms variance-check | bound-calc | comm-cost | loss-grid | partition-stats

Exit codes: 0 success, 2 config error, 3 runtime/numeric error, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import BoundInputs, GaussianSpec, comm_cost, convergence_bound, fast_slow_bound
from .analysis import parameter_groups, variance_reduction_check
from .analysis.landscape import grid_csv, loss_grid
from .checkpoint import save_checkpoint
from .config import ExperimentConfig, from_dict, parse_config, parse_value
from .data_partition import (
    Dataset, load_csv, make_mixture_images, make_synthetic_2d, partition_dirichlet, partition_iid,
    partition_shards, partition_stats, split_clients,
)
from .errors import ConfigError, FedAtomsError, RunAborted
from .fl_core import ConvSpec, FederationSettings, ModelSpec, RoundMetrics, run_federation
from .fl_core.federation import personalized_accuracy

log = logging.getLogger("fedatoms")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_IO = 0, 2, 3, 4


# ---- building an experiment from a config ---------------------------------

def build_datasets(cfg: ExperimentConfig):
    """(train, test) datasets; test may be None for csv without a test file."""
    d = cfg.dataset
    prm = d.params
    if d.kind == "mixture":
        args = (prm["num_classes"], prm["channels"], prm["side"])
        train = make_mixture_images(*args, prm["n"], prm["separation"], seed=d.seed, template_seed=d.seed)
        test = make_mixture_images(*args, prm["test_n"], prm["separation"], seed=d.seed + 1, template_seed=d.seed)
        return train, test
    if d.kind == "synthetic2d":
        return (make_synthetic_2d(prm["n_per_class"], seed=d.seed),
                make_synthetic_2d(prm["test_n_per_class"], seed=d.seed + 1))
    train = load_csv(prm["path"], prm["label_column"])
    test = load_csv(prm["test_path"], prm["label_column"]) if prm["test_path"] else None
    return train, test


def build_partition(cfg: ExperimentConfig, ds: Dataset) -> list:
    p = cfg.partition
    if p.mode == "shards":
        return partition_shards(ds, p.clients, p.shards_per_client, p.seed)
    if p.mode == "dirichlet":
        return partition_dirichlet(ds, p.clients, p.concentration, p.seed)
    return partition_iid(ds, p.clients, p.seed)


def build_spec(cfg: ExperimentConfig, input_shape, num_classes: int) -> ModelSpec:
    m = cfg.model
    conv = tuple(ConvSpec(*layer) for layer in m.conv)
    outputs = 1 if m.loss == "mse" and num_classes == 2 else num_classes
    return ModelSpec(tuple(input_shape), outputs, conv, decomposed=m.decomposed,
                     head_bias=m.head_bias, loss=m.loss)


def build_settings(cfg: ExperimentConfig) -> FederationSettings:
    f = cfg.federation
    return FederationSettings(
        rounds=f.rounds, fraction=f.fraction, epochs=f.epochs, batch_size=f.batch_size, lr=f.lr,
        momentum=f.momentum, mu_prox=f.mu_prox, strategy=f.strategy,
        beta=f.beta if f.beta is not None else 1.0, personal_head=bool(f.personal_head),
        personal_epochs=f.personal_epochs, lr_schedule=f.lr_schedule,
        variance_repeats=f.variance_repeats, workers=f.workers, check_identity=f.check_identity,
        record_time=cfg.output.record_time)


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


# ---- subcommands -----------------------------------------------------------

def _load_config(args) -> ExperimentConfig:
    overrides = _parse_overrides(args.overrides)
    return parse_config(args.config, overrides)


def _parse_overrides(tokens) -> list:
    out = []
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--") or "." not in tok and tok != "--master_seed":
            raise ConfigError(f"unexpected argument {tok!r}", "<flags>")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise ConfigError(f"{tok} needs a value", "<flags>")
            value = tokens[i + 1]
            i += 2
        out.append((key, parse_value(value)))
    return out


def cmd_fed_run(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out) if args.out else cfg.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.json").write_text(cfg.to_json())
    chash = cfg.hash()

    train, test = build_datasets(cfg)
    parts = build_partition(cfg, train)
    client_tests = None
    if cfg.partition.client_test_fraction > 0:
        parts, test_parts = split_clients(parts, cfg.partition.client_test_fraction, cfg.partition.seed)
        client_tests = [train.subset(idx) for idx in test_parts]
    spec = build_spec(cfg, train.samples.shape[1:], train.num_classes)
    settings = build_settings(cfg)
    every = cfg.output.checkpoint_every

    metrics_path = out / "metrics.csv"
    with open(metrics_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RoundMetrics.FIELDS)
        fh.flush()

        def on_round(record, model):
            writer.writerow([_fmt(v) for v in record.row()])
            fh.flush()
            log.info("round %d loss %.4f acc %.4f", record.round, record.train_loss, record.test_acc)
            if cfg.output.checkpoints and every and record.round % every == 0:
                save_checkpoint(out / "checkpoints" / f"round_{record.round:04d}.json", model, chash)

        summary = {"config_hash": chash, "version": __version__}
        try:
            result = run_federation(spec, [train.subset(idx) for idx in parts], settings, cfg.master_seed,
                                    test=(test.samples, test.labels) if test is not None else None,
                                    on_round=on_round)
        except RunAborted as exc:
            summary.update(status="aborted", error=str(exc), rounds_completed=len(exc.metrics))
            _write_json(out / "summary.json", summary)
            raise

    if cfg.output.checkpoints:
        save_checkpoint(out / "checkpoints" / "final.json", result.model, chash)
    last = result.metrics[-1] if result.metrics else None
    summary.update(
        status="ok", rounds_completed=len(result.metrics),
        final={f: getattr(last, f) for f in RoundMetrics.FIELDS} if last else None,
        uploaded_total=result.ledger.total_uploaded,
        uploaded_by_group=_group_totals(result.ledger.upload),
        parameters=parameter_groups(spec),
    )
    if client_tests is not None and settings.strategy.value == "personalized":
        personal, shared = personalized_accuracy(result, client_tests)
        summary["personalized"] = {"mean_personal_acc": float(personal.mean()),
                                   "mean_global_acc": float(shared.mean()),
                                   "per_client_personal": personal.tolist(),
                                   "per_client_global": shared.tolist()}
    _write_json(out / "summary.json", summary)
    print(out)
    return EXIT_OK


def _group_totals(rounds) -> dict:
    totals: dict = {}
    for r in rounds:
        for k, v in r.items():
            totals[k] = totals.get(k, 0) + v
    return totals


def _clean(obj):
    """JSON-safe copy: NaN/inf become null, numpy scalars become Python numbers."""
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.generic):
        obj = obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_clean(obj), indent=2, sort_keys=True, allow_nan=False) + "\n")


def cmd_partition_stats(args) -> int:
    cfg = _load_config(args)
    train, _ = build_datasets(cfg)
    parts = build_partition(cfg, train)
    print(json.dumps(partition_stats(train, parts), indent=2))
    return EXIT_OK


def cmd_variance_check(args) -> int:
    rng = np.random.default_rng(args.seed)
    if args.weights:
        weights = np.array([float(w) for w in args.weights.split(",")])
        weights = weights / weights.sum()
    elif args.random_weights:
        weights = rng.dirichlet(np.ones(args.clients))
    else:
        weights = np.full(args.clients, 1.0 / args.clients)
    shape = tuple(int(s) for s in args.shape.split("x"))
    spec = GaussianSpec(shape, args.mean, args.std)
    report = variance_reduction_check(weights, spec, args.trials, rng)
    print(json.dumps(_clean(report.to_dict()), indent=2))
    return EXIT_OK if report.reduction_holds else EXIT_RUNTIME


def cmd_bound_calc(args) -> int:
    bi = BoundInputs(L=args.L, mu=args.mu, G=args.G, Gamma=args.Gamma, E=args.E, M=args.M, m=args.m,
                     dist0=args.dist0)
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(["variant", "beta", "coefficient", "B", "D_term", "gamma", "T", "bound", "eps", "T_min"])
    for decomposed in (False, True):
        if decomposed and bi.M < 2:
            continue
        b = fast_slow_bound(bi, args.beta, decomposed) if args.beta != 1.0 else convergence_bound(bi, decomposed)
        writer.writerow(["decomposed" if decomposed else "plain", _fmt(b.beta), _fmt(b.coefficient),
                         _fmt(b.B), _fmt(b.D_term), _fmt(b.gamma), args.T, _fmt(b.bound(args.T)),
                         _fmt(args.eps), b.t_min(args.eps)])
    return EXIT_OK


def cmd_comm_cost(args) -> int:
    if args.config:
        cfg = _load_config(args)
    else:
        cfg = from_dict({"dataset": {"kind": "mixture"}, "partition": {"clients": 10},
                         "federation": {"rounds": args.rounds}})
    train_shape, classes = _input_shape(cfg)
    spec = build_spec(cfg, train_shape, classes)
    ledger, rate = comm_cost(spec, "fast_slow", args.beta, args.rounds, args.clients_per_round)
    print(json.dumps({
        "beta": args.beta, "reduction_rate": rate, "parameters": parameter_groups(spec),
        "uploaded_per_round": ledger.uploaded_per_round(), "uploaded_total": ledger.total_uploaded,
        "downloaded_total": ledger.total_downloaded,
    }, indent=2))
    return EXIT_OK


def _input_shape(cfg: ExperimentConfig):
    prm = cfg.dataset.params
    if cfg.dataset.kind == "mixture":
        return (prm["channels"], prm["side"], prm["side"]), prm["num_classes"]
    if cfg.dataset.kind == "synthetic2d":
        return (2,), 2
    train, _ = build_datasets(cfg)
    return train.samples.shape[1:], train.num_classes


def cmd_loss_grid(args) -> int:
    ds = make_synthetic_2d(args.n_per_class, args.seed)
    w1, w2, losses = loss_grid(ds, (tuple(args.w1_range), tuple(args.w2_range)), args.resolution)
    text = grid_csv(w1, w2, losses)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---- argument parsing ------------------------------------------------------

def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedatoms", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fed-run", help="run a federation from a config file")
    p.add_argument("config")
    p.add_argument("--out", help="output directory (overrides output.dir)")
    p.set_defaults(func=cmd_fed_run, accepts_overrides=True)

    p = sub.add_parser("partition-stats", help="per-client sample and class counts")
    p.add_argument("config")
    p.set_defaults(func=cmd_partition_stats, accepts_overrides=True)

    p = sub.add_parser("variance-check", help="Monte-Carlo check of the latent-client variance gap")
    p.add_argument("--clients", type=int, default=10)
    p.add_argument("--weights", help="comma-separated client weights (normalized)")
    p.add_argument("--random-weights", action="store_true", help="Dirichlet(1) weights")
    p.add_argument("--trials", type=int, default=10_000)
    p.add_argument("--shape", default="3x3")
    p.add_argument("--mean", type=float, default=0.0)
    p.add_argument("--std", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_variance_check)

    p = sub.add_parser("bound-calc", help="convergence-bound constants, plain and decomposed")
    for name, kind, default in [("L", float, 4.0), ("mu", float, 1.0), ("G", float, 1.0), ("Gamma", float, 1.0),
                                ("E", int, 5), ("M", int, 100), ("m", int, 10), ("dist0", float, 1.0),
                                ("T", int, 100), ("eps", float, 0.1), ("beta", float, 1.0)]:
        p.add_argument(f"--{name}", type=kind, default=default)
    p.set_defaults(func=cmd_bound_calc)

    p = sub.add_parser("comm-cost", help="fast/slow transmission counts and reduction rate")
    p.add_argument("config", nargs="?")
    p.add_argument("--beta", type=float, default=0.2)
    p.add_argument("--rounds", type=int, default=10)
    p.add_argument("--clients-per-round", type=int, default=1)
    p.set_defaults(func=cmd_comm_cost, accepts_overrides=True)

    p = sub.add_parser("loss-grid", help="MSE grid of the 2-parameter linear model (CSV)")
    p.add_argument("--n-per-class", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--w1-range", type=float, nargs=2, default=(-1.0, 1.0))
    p.add_argument("--w2-range", type=float, nargs=2, default=(-1.0, 1.0))
    p.add_argument("--resolution", type=int, default=50)
    p.add_argument("--out")
    p.set_defaults(func=cmd_loss_grid)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if extra and not getattr(args, "accepts_overrides", False):
        parser.error(f"unrecognized arguments: {' '.join(extra)}")
    args.overrides = extra
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        where = getattr(exc, "filename", None)
        print(f"I/O error: {where + ': ' if where else ''}{exc.strerror or exc}", file=sys.stderr)
        return EXIT_IO
    except (FedAtomsError, ValueError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
