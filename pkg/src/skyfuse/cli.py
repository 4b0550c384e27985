"""Command-line entry point: ``skyfuse <command> [options]``.

Commands: make-catalog, cluster, generate, train, eval, bench.

Any option may also come from a ``--config`` file of ``key=value`` lines
(keys are option names with ``-`` or ``_``); explicit flags win. Network
shape keys such as ``embed_dim`` or ``fusion`` are accepted there too.

Exit codes: 0 success, 1 usage error, 2 data or contract error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import bench as B
from . import catalog as C
from . import scene as S
from . import sphere as SP
from . import train_eval as T
from .net import model as M
from .net.checkpoint import CheckpointError, load_checkpoint, save_checkpoint

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2
THREADS_ENV = "SKYFUSE_THREADS"
SEED_LOG = "seeds.txt"

log = logging.getLogger("skyfuse")


class UsageError(Exception):
    pass


class ContractError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _truthy(text: str) -> bool:
    return str(text).strip().lower() in ("1", "true", "yes", "on")


def read_config(path) -> dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for n, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise UsageError(f"{path}:{n}: expected key=value")
            out[key.strip().replace("-", "_")] = value.strip()
    return out


NET_KEYS = {f.name for f in fields(M.NetworkConfig)} - {
    "k", "heat_px", "n_stars", "use_photometric", "use_heatmap", "use_coords"
}
CAMERA_KEYS = {f.name for f in fields(S.CameraModel)}
RENDER_KEYS = {f.name for f in fields(S.RenderConfig)}


# -- parser ------------------------------------------------------------------


def build_parser() -> _Parser:
    p = _Parser(prog="skyfuse", description="Sky-region classification from star fields.")
    p.add_argument("--config", help="key=value file supplying option defaults")
    p.add_argument(
        "--threads",
        type=int,
        default=None,
        help=f"worker/BLAS thread cap (default: ${THREADS_ENV} or 1)",
    )
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("make-catalog", help="write a synthetic star catalog CSV")
    c.add_argument("--stars", type=int, default=6000)
    c.add_argument("--seed", type=int, default=1000)
    c.add_argument("--out", required=True)

    c = sub.add_parser("cluster", help="partition the sphere with spherical K-means")
    c.add_argument("--k", type=int, required=True)
    c.add_argument("--seed", type=int, required=True)
    src = c.add_mutually_exclusive_group()
    src.add_argument("--uniform", type=int, metavar="N", help="cluster N uniform boresights")
    src.add_argument("--from-dataset", metavar="DIR", help="cluster a dataset's boresights")
    c.add_argument("--tol", type=float, default=1e-6)
    c.add_argument("--max-iter", type=int, default=100)
    c.add_argument("--out", required=True)

    c = sub.add_parser("generate", help="render a labeled dataset")
    c.add_argument("--catalog", required=True)
    c.add_argument("--model", required=True, help="cluster model file")
    c.add_argument("--count", type=int, required=True)
    c.add_argument("--split", choices=("train", "val"), required=True)
    c.add_argument("--seed", type=int, required=True)
    c.add_argument("--out", required=True)
    c.add_argument(
        "--allow-seed-reuse",
        action="store_true",
        help="permit a seed already used for another split with the same cluster model",
    )
    for f in fields(S.CameraModel):
        c.add_argument("--" + f.name.replace("_", "-"), type=type(f.default), default=f.default)
    for f in fields(S.RenderConfig):
        c.add_argument("--" + f.name.replace("_", "-"), type=type(f.default), default=f.default)

    c = sub.add_parser("train", help="train the classifier")
    c.add_argument("--train", required=True, metavar="DIR")
    c.add_argument("--val", required=True, metavar="DIR")
    c.add_argument("--out", required=True, help="checkpoint path")
    c.add_argument("--history", help="history CSV (default: <out>.history.csv)")
    defaults = T.TrainConfig()
    c.add_argument("--epochs", type=int, default=defaults.epochs)
    c.add_argument("--batch-size", type=int, default=defaults.batch_size)
    c.add_argument("--lr", type=float, default=defaults.learning_rate)
    c.add_argument("--optimizer", choices=T.OPTIMIZERS, default=defaults.optimizer)
    c.add_argument("--momentum", type=float, default=defaults.momentum)
    c.add_argument("--lam", type=float, default=defaults.lam, help="weight decay on sum of squares")
    c.add_argument("--seed", type=int, default=defaults.seed)
    c.add_argument("--fusion", choices=("layernorm", "relu"), default=None)
    c.add_argument("--disable-photometric", action="store_true")
    c.add_argument("--disable-heatmap", action="store_true")
    c.add_argument("--disable-coords", action="store_true")

    c = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--data", required=True, metavar="DIR")
    c.add_argument("--model", required=True, help="cluster model file (for adjacency errors)")
    c.add_argument("--report", help="report file (default: print only)")
    c.add_argument("--confusion", help="confusion matrix file")

    c = sub.add_parser("bench", help="single-sample inference latency")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--iters", type=int, default=200)
    c.add_argument("--warmup", type=int, default=20)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--report", help="report file")
    return p


def _subparsers(parser: argparse.ArgumentParser) -> dict[str, argparse.ArgumentParser]:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return dict(action.choices)
    return {}


def parse_args(argv) -> tuple[argparse.Namespace, dict[str, str]]:
    """Parse flags with ``--config`` values folded in as defaults.

    A config key applies to every command that has an option of that name,
    and satisfies that option's required-ness. Returns the namespace and the
    network-shape overrides found in the config.
    """
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    parser = build_parser()
    net: dict[str, str] = {}
    if known.config:
        conf = read_config(known.config)
        subs = _subparsers(parser)
        for key, value in conf.items():
            used = False
            if key == "threads":
                parser.set_defaults(threads=int(value))
                used = True
            for sp in subs.values():
                for action in sp._actions:
                    if action.dest != key or not action.option_strings:
                        continue
                    if isinstance(action, argparse._StoreTrueAction):
                        action.default = _truthy(value)
                    else:
                        # argparse applies the option's type to string defaults
                        action.default = value
                    action.required = False
                    used = True
            if key in NET_KEYS:
                net[key] = value
                used = True
            if not used:
                raise UsageError(f"{known.config}: unknown key {key!r}")
    return parser.parse_args(argv), net


def _threads(args) -> int:
    if args.threads is not None:
        n = args.threads
    else:
        try:
            n = int(os.environ.get(THREADS_ENV, "1"))
        except ValueError:
            raise UsageError(f"${THREADS_ENV} must be an integer") from None
    if n < 1:
        raise UsageError("--threads must be >= 1")
    return n


# -- commands ------------------------------------------------------------------


def cmd_make_catalog(args, net) -> int:
    if args.stars < 1:
        raise UsageError("--stars must be >= 1")
    cat = C.synthetic_catalog(args.stars, np.random.default_rng(args.seed))
    C.write_catalog(cat, args.out)
    print(f"stars={len(cat)}")
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_cluster(args, net) -> int:
    if args.k < 2:
        raise UsageError("--k must be >= 2")
    if args.uniform is None and args.from_dataset is None:
        raise UsageError("one of --uniform N or --from-dataset DIR is required")
    if args.uniform is not None:
        if args.uniform < args.k:
            raise UsageError("--uniform N must be >= k")
        vectors = SP.uniform_sphere(args.uniform, np.random.default_rng([args.seed, 1]))
    else:
        vectors = S.read_dataset(args.from_dataset).boresights()
    model = SP.spherical_kmeans(
        vectors, args.k, np.random.default_rng(args.seed), max_iter=args.max_iter, tol=args.tol
    )
    model.save(args.out)
    print(f"k={model.k}")
    print(f"iterations={model.iterations_run}")
    print(f"inertia={model.inertia!r}")
    print(f"converged={model.converged}")
    print(f"wrote {args.out}")
    return EXIT_OK


def _check_seed_reuse(model_path: Path, seed: int, split: str, out: Path, allow: bool) -> None:
    """Refuse to give two splits of the same label space the same master seed."""
    ledger = model_path.parent / SEED_LOG
    key = str(model_path.resolve())
    if ledger.exists():
        for line in ledger.read_text(encoding="utf-8").splitlines():
            parts = line.split("\t")
            if len(parts) != 4 or parts[0] != key or int(parts[1]) != seed:
                continue
            if parts[2] != split and not allow:
                raise ContractError(
                    f"seed {seed} already generated the {parts[2]} split at {parts[3]}; "
                    "use a different --seed or pass --allow-seed-reuse"
                )
    with open(ledger, "a", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{key}\t{seed}\t{split}\t{out.resolve()}\n")


def cmd_generate(args, net) -> int:
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    try:
        camera = S.CameraModel(**{k: getattr(args, k) for k in CAMERA_KEYS})
        render = S.RenderConfig(**{k: getattr(args, k) for k in RENDER_KEYS})
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    catalog = C.filter_by_magnitude(C.read_catalog(args.catalog), camera.mag_limit)
    model = SP.ClusterModel.load(args.model)
    out = Path(args.out)
    _check_seed_reuse(Path(args.model), args.seed, args.split, out, args.allow_seed_reuse)
    ds = S.generate_dataset(
        catalog, model, args.count, camera, render, args.seed, args.split, workers=_threads(args)
    )
    S.write_dataset(ds, out)
    counts = np.bincount(ds.labels, minlength=ds.k)
    print(f"count={len(ds)}")
    print("class_counts=" + ",".join(str(int(c)) for c in counts))
    print(f"wrote {out}")
    return EXIT_OK


def cmd_train(args, net) -> int:
    if args.disable_photometric and args.disable_heatmap and args.disable_coords:
        raise UsageError("at least one branch must stay enabled")
    overrides = {}
    if net:
        overrides = M.NetworkConfig.from_strings(net).to_dict()
        overrides = {k: overrides[k] for k in net}
    if args.fusion:
        overrides["fusion"] = args.fusion
    try:
        config = T.TrainConfig(
            epochs=args.epochs,
            batch_size=args.batch_size,
            learning_rate=args.lr,
            optimizer=args.optimizer,
            momentum=args.momentum,
            lam=args.lam,
            seed=args.seed,
            use_photometric=not args.disable_photometric,
            use_heatmap=not args.disable_heatmap,
            use_coords=not args.disable_coords,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    train_ds = S.read_dataset(args.train)
    val_ds = S.read_dataset(args.val)
    cfg = config.apply_ablation(T.network_config_for(train_ds, **overrides))
    T.check_compatible(cfg, val_ds)
    with threadpool_limits(limits=_threads(args)):
        result = T.train(train_ds, val_ds, config, cfg)
    save_checkpoint(
        args.out,
        result.params,
        result.cfg,
        {"best_epoch": result.best_epoch, "train_seed": args.seed, "lam": repr(args.lam)},
    )
    history = args.history or args.out + ".history.csv"
    Path(history).write_text(T.history_text(result.history), encoding="utf-8")
    best = result.history[result.best_epoch - 1]
    print(f"best_epoch={result.best_epoch}")
    print(f"val_top1={best.val_top1!r}")
    print(f"wrote {args.out}")
    print(f"wrote {history}")
    return EXIT_OK


def cmd_eval(args, net) -> int:
    params, cfg, _ = load_checkpoint(args.checkpoint)
    ds = S.read_dataset(args.data)
    model = SP.ClusterModel.load(args.model)
    if model.k != cfg.k:
        raise M.ConfigError(f"cluster model k={model.k} but checkpoint k={cfg.k}")
    T.check_compatible(cfg, ds)
    with threadpool_limits(limits=_threads(args)):
        report = T.evaluate(params, cfg, ds, (1, 3, 5), model)
    text = "\n".join(report.lines()) + "\n"
    sys.stdout.write(text)
    if args.report:
        Path(args.report).write_text(text + "confusion=\n" + report.confusion_text(), encoding="utf-8")
    if args.confusion:
        Path(args.confusion).write_text(report.confusion_text(), encoding="utf-8")
    return EXIT_OK


def cmd_bench(args, net) -> int:
    if args.iters < 1 or args.warmup < 0:
        raise UsageError("--iters must be >= 1 and --warmup >= 0")
    params, cfg, _ = load_checkpoint(args.checkpoint)
    report = B.run_bench(params, cfg, args.iters, args.warmup, args.seed, threads=1)
    text = "\n".join(report.lines()) + "\n"
    sys.stdout.write(text)
    if args.report:
        Path(args.report).write_text(text, encoding="utf-8")
    return EXIT_OK


COMMANDS = {
    "make-catalog": cmd_make_catalog,
    "cluster": cmd_cluster,
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "bench": cmd_bench,
}

DATA_ERRORS = (
    C.CatalogError,
    SP.InfeasibleClusteringError,
    M.ConfigError,
    CheckpointError,
    T.TrainingDiverged,
    ContractError,
    OSError,
    ValueError,
    KeyError,
)


def main(argv=None) -> int:
    try:
        args, net = parse_args(sys.argv[1:] if argv is None else argv)
    except (UsageError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args, net)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
