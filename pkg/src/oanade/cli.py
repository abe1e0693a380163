"""Command-line entry point: ``oanade <command> ...``.

Errors are reported on stderr as one line ``error[<category>]: <message>``
with exit status 1 (usage/config), 2 (data) or 3 (numeric failure).
"""

from __future__ import annotations

import argparse
import itertools
import logging
import math
import os
import sys

import numpy as np

from . import data as datamod
from .data import BINARY, REAL, DataError
from .inference import (
    EnsembleSpec,
    avg_test_loglik,
    ensemble_logdensity,
    impute,
    logdensity,
    sample,
    sample_ensemble,
)
from .model import MOG, MaskContext, ModelConfig, init_parameters, masked_loss_and_gradient
from .numerics import Rng, finite_diff_gradient, sample_permutation
from .serialization import (
    RUN_KEYS,
    ConfigError,
    ModelFileError,
    load_model,
    load_run_config,
    save_model,
)
from .training import TrainConfig, TrainingDiverged, fit

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3
GRADCHECK_TOL = 1e-5


class CliError(Exception):
    def __init__(self, category, message, code):
        super().__init__(message)
        self.category, self.code = category, code


def _fmt_row(values):
    return "\t".join(v if isinstance(v, str) else repr(float(v)) if isinstance(v, float) else str(v)
                     for v in values)


def _load_data(path, kind, delimiter=None):
    try:
        return datamod.load_matrix(path, delimiter or None, kind)
    except OSError as e:
        raise CliError("data", f"cannot read {path}: {e.strerror}", EXIT_DATA) from None


def _model_config(cfg, D):
    return ModelConfig(
        D=D,
        hidden_sizes=cfg["hidden_sizes"],
        activation=cfg["activation"],
        head=MOG if cfg["head"] == MOG else "binary",
        components=cfg["components"],
        use_input_masks=cfg["input_masks"],
    )


def _train_config(cfg):
    return TrainConfig(
        iterations=cfg["iterations"],
        updates_per_iteration=cfg["updates_per_iteration"],
        minibatch_size=cfg["minibatch_size"],
        initial_lr=cfg["initial_lr"],
        momentum=cfg["momentum"],
        weight_decay=cfg["weight_decay"],
        pretrain_iterations=cfg["pretrain_iterations"],
        seed=cfg["seed"],
        early_stop=cfg["early_stop"],
    )


def _grid(specs):
    """Expand ['initial_lr=0.02,0.005', ...] into a list of override dicts."""
    axes = []
    for spec in specs or []:
        key, _, vals = spec.partition("=")
        if key not in RUN_KEYS:
            raise ConfigError(f"unknown grid key {key!r}")
        axes.append([(key, RUN_KEYS[key][0](v)) for v in vals.split(",")])
    return [dict(combo) for combo in itertools.product(*axes)] if axes else [{}]


def _prepare_training_data(cfg):
    kind = cfg["data_kind"]
    train_ds = _load_data(cfg["train_path"], kind, cfg["delimiter"])
    if cfg["valid_path"]:
        valid_ds = _load_data(cfg["valid_path"], kind, cfg["delimiter"])
    else:
        frac = cfg["valid_fraction"]
        train_ds, valid_ds = datamod.split(train_ds, (1 - frac, frac), Rng(cfg["seed"]).substream("split"))
    stats = None
    if cfg["standardize"]:
        train_ds, stats = datamod.standardize(train_ds)
        valid_ds = datamod.apply_stats(valid_ds, stats)
    if valid_ds.D != train_ds.D:
        raise CliError("data", "training and validation data have different widths", EXIT_DATA)
    return train_ds, valid_ds, stats


def cmd_train(args):
    base = load_run_config(args.config)
    best = None
    for overrides in _grid(args.grid):
        cfg = {**base, **overrides}
        train_ds, valid_ds, stats = _prepare_training_data(cfg)
        mcfg = _model_config(cfg, train_ds.D)
        tc = _train_config(cfg)
        result = fit(mcfg, train_ds.values, valid_ds.values, tc, pretrain=cfg["pretrain"])
        rows = result.history.rows
        score = min(r[2] for r in rows)
        if overrides:
            print(_fmt_row(["#grid", *(f"{k}={v}" for k, v in overrides.items()), "best_valid", score]))
        if best is None or score < best[0]:
            best = (score, cfg, result, stats)
    score, cfg, result, stats = best
    meta = {
        "seed": cfg["seed"],
        "data_kind": cfg["data_kind"],
        "train_path": os.path.basename(cfg["train_path"]),
        "train": {k: cfg[k] for k in ("iterations", "updates_per_iteration", "minibatch_size",
                                       "initial_lr", "momentum", "weight_decay", "pretrain",
                                       "pretrain_iterations", "early_stop")},
        "best_iteration": result.history.best_iteration,
        "best_valid": score,
        "pretrain_levels": result.history.pretrain_levels,
    }
    if cfg["image_shape"]:
        meta["image_shape"] = list(cfg["image_shape"])
    if stats is not None:
        meta["stats"] = {"mean": [float(v) for v in stats[0]], "std": [float(v) for v in stats[1]]}
    save_model(args.output, result.params, meta)
    history_path = args.history or args.output + ".history.tsv"
    datamod.atomic_write(history_path, result.history.to_tsv())
    print(_fmt_row(["#model", "best_iteration", "best_valid_J_OA"]))
    print(_fmt_row([args.output, result.history.best_iteration, score]))
    return 0


def _load(path):
    try:
        return load_model(path)
    except OSError as e:
        raise CliError("data", f"cannot read {path}: {e.strerror}", EXIT_DATA) from None


def _eval_data(path, params, meta):
    kind = meta.get("data_kind", BINARY if params.config.head == "binary" else REAL)
    ds = _load_data(path, kind)
    if ds.D != params.config.D:
        raise CliError("data", f"dataset has {ds.D} columns but the model expects {params.config.D}", EXIT_DATA)
    if "stats" in meta:
        ds = datamod.apply_stats(ds, (np.array(meta["stats"]["mean"]), np.array(meta["stats"]["std"])))
    return ds


def cmd_eval(args):
    params, meta = _load(args.model)
    ds = _eval_data(args.data, params, meta)
    rep = avg_test_loglik(params, ds.values, args.orderings, Rng(args.seed).substream("orderings"), args.seed)
    cols = ["#orderings", "seed", "mean_loglik", "sd_orderings", "stderr_examples"]
    row = [rep.n_orderings, args.seed, rep.mean, rep.sd, rep.stderr]
    if args.ensemble:
        cols.append("ensemble_loglik")
        row.append(rep.ensemble)
    print(_fmt_row(cols))
    print(_fmt_row(row))
    if args.ensemble:
        sizes = [2 ** i for i in range(int(math.log2(args.orderings)) + 1)]
        if sizes[-1] != args.orderings:
            sizes.append(args.orderings)
        print(_fmt_row(["#ensemble_size", "ensemble_loglik"]))
        for k, v in rep.ensemble_curve(sizes):
            print(_fmt_row([k, v]))
    return 0


def _image_tile(row, shape):
    row = np.asarray(row, dtype=np.float64)
    if row.size == shape[0] * shape[1]:
        return row.reshape(shape)
    if row.size == shape[0] * shape[1] - 1:
        return datamod.restore_patch(row, shape[0])
    raise CliError("usage", f"cannot show {row.size} values as a {shape} image", EXIT_USAGE)


def cmd_sample(args):
    params, meta = _load(args.model)
    D = params.config.D
    rng = Rng(args.seed).substream("sample")
    oseed = args.seed if args.ordering_seed is None else args.ordering_seed
    orng = Rng(oseed).substream("orderings")
    if args.ensemble > 1:
        spec = EnsembleSpec.random(D, args.ensemble, orng, oseed)
        X, _ = sample_ensemble(params, spec, rng, args.n)
        lp = ensemble_logdensity(params, X, spec) if args.n else np.zeros(0)
    else:
        order = sample_permutation(orng, D)
        X = sample(params, order, rng, args.n)
        lp = logdensity(params, X, order) if args.n else np.zeros(0)
    if args.sort_by_likelihood and args.n:
        idx = np.argsort(-lp, kind="stable")
        X, lp = X[idx], lp[idx]
    header = "logdensity\t" + "\t".join(f"x{i}" for i in range(D))
    body = np.column_stack([lp, X]) if args.n else np.zeros((0, D + 1))
    datamod.save_matrix(args.output, body, header=header, delimiter="\t")
    if args.pgm:
        shape = meta.get("image_shape")
        if not shape:
            raise CliError("usage", "model has no image_shape; cannot write a contact sheet", EXIT_USAGE)
        if "stats" in meta:
            X = X * np.array(meta["stats"]["std"]) + np.array(meta["stats"]["mean"])
        binary = params.config.head == "binary"
        tiles = [_image_tile(r, shape) * 255.0 if binary else datamod.to_grey_levels(_image_tile(r, shape))
                 for r in X]
        datamod.write_pgm(args.pgm, datamod.contact_sheet(tiles, cols=10))
    return 0


def cmd_impute(args):
    params, meta = _load(args.model)
    D = params.config.D
    try:
        with open(args.data) as f:
            M = datamod.parse_matrix(f.read(), missing="?")
    except OSError as e:
        raise CliError("data", f"cannot read {args.data}: {e.strerror}", EXIT_DATA) from None
    if M is None:
        M = np.zeros((0, D))
    if M.shape[1] != D:
        raise CliError("data", f"rows have {M.shape[1]} columns but the model expects {D}", EXIT_DATA)
    if "stats" in meta:
        M = (M - np.array(meta["stats"]["mean"])) / np.array(meta["stats"]["std"])
    rng = Rng(args.seed).substream("impute")
    lines = ["#row\tmarginal_logdensity\tcompletions (missing dims in ascending order, one block per sample)"]
    for r, row in enumerate(M):
        observed = np.flatnonzero(~np.isnan(row))
        missing = np.flatnonzero(np.isnan(row))
        x = np.where(np.isnan(row), 0.0, row)
        res = impute(params, x, observed, rng.substream("row", r), args.n if len(missing) else 0)
        vals = res.samples[:, missing]
        if "stats" in meta:
            vals = vals * np.array(meta["stats"]["std"])[missing] + np.array(meta["stats"]["mean"])[missing]
        lines.append(_fmt_row([r, res.marginal_logdensity, *(datamod._fmt(v) for v in vals.ravel())]))
    datamod.atomic_write(args.output, "\n".join(lines) + "\n")
    return 0


def gradient_check(mcfg: ModelConfig, rng, draws=10, corrupt=None):
    """Max relative error (per tensor, norm-wise) of backprop vs central differences.

    Returns a list of (draw, d, tensor, rel_err).
    """
    rows = []
    for k in range(draws):
        params = init_parameters(mcfg, rng)
        params = params.with_flat(params.flat() + 0.1 * rng.normal(params.size))
        if mcfg.head == MOG:
            x = rng.normal(mcfg.D)
        else:
            x = (rng.uniform(mcfg.D) < 0.5).astype(np.float64)
        n_obs = int(rng.integers(0, mcfg.D))
        ctx = MaskContext.from_observed(rng.permutation(mcfg.D)[:n_obs], mcfg.D)
        _, grad = masked_loss_and_gradient(params, x, ctx)
        if corrupt:
            grad.tensors[corrupt] = grad.tensors[corrupt] + 1e-3
        num = params.with_flat(finite_diff_gradient(
            lambda th: masked_loss_and_gradient(params.with_flat(th), x, ctx)[0], params.flat(), 1e-5))
        for name in params:
            a, n = grad[name], num[name]
            scale = max(np.linalg.norm(a), np.linalg.norm(n))
            err = 0.0 if scale == 0 else float(np.linalg.norm(a - n) / scale)
            rows.append((k, ctx.d, name, err))
    return rows


def cmd_gradcheck(args):
    cfg = load_run_config(args.config, require_data=False)
    D = cfg["D"]
    if not D:
        D = _load_data(cfg["train_path"], cfg["data_kind"], cfg["delimiter"]).D
    base = _model_config(cfg, D)
    rng = Rng(args.seed).substream("gradcheck")
    print("#head\tdraw\td\ttensor\trel_err")
    worst = (0.0, None, None)
    heads = [("binary", 1), (MOG, max(cfg["components"], 1))]
    for head, K in heads:
        mcfg = ModelConfig(D, base.hidden_sizes, base.activation, head, K, base.use_input_masks)
        corrupt = args.corrupt_tensor if args.corrupt_tensor in mcfg.tensor_shapes() else None
        for draw, d, name, err in gradient_check(mcfg, rng.substream(head), args.draws, corrupt):
            print(_fmt_row([head, draw, d, name, err]))
            if err > worst[0]:
                worst = (err, head, name)
    print(_fmt_row(["#max_rel_err", worst[0], f"{worst[1]}:{worst[2]}"]))
    if worst[0] > GRADCHECK_TOL:
        raise CliError("numeric", f"gradient check failed: relative error {worst[0]:.3g} in tensor "
                       f"{worst[2]} ({worst[1]} head)", EXIT_NUMERIC)
    return 0


def cmd_export_rf(args):
    params, meta = _load(args.model)
    cfg = params.config
    shape = meta.get("image_shape")
    if not shape:
        raise CliError("usage", "model is not image-shaped (no image_shape metadata)", EXIT_USAGE)
    W = params["W1"]
    halves = [("data", W[:, :cfg.D])]
    if cfg.use_input_masks:
        halves.append(("mask", W[:, cfg.D:]))
    k = min(args.top_k, W.shape[0])
    top = np.argsort(-np.linalg.norm(W[:, :cfg.D], axis=1), kind="stable")[:k]
    written = []
    for label, M in halves:
        tiles = []
        for rank, unit in enumerate(top):
            row = M[unit]
            if row.size == shape[0] * shape[1] - 1:
                row = np.append(row, 0.0)
            tile = datamod.to_grey_levels(row.reshape(shape))
            tiles.append(tile)
            path = f"{args.prefix}_{label}_{rank:03d}.pgm"
            datamod.write_pgm(path, tile)
            written.append(path)
        sheet = f"{args.prefix}_{label}_sheet.pgm"
        datamod.write_pgm(sheet, datamod.contact_sheet(tiles, cols=10))
        written.append(sheet)
    print("#file")
    for p in written:
        print(p)
    return 0


def cmd_prep_data(args):
    raw = args.raw or datamod.default_raw_dir()
    os.makedirs(args.out, exist_ok=True)
    rng = Rng(args.seed).substream("prep", 0)
    outputs = {}
    if args.dataset == "adult":
        tr, va, te = datamod.build_adult(raw, rng)
        outputs = {"adult_train.txt": tr, "adult_valid.txt": va, "adult_test.txt": te}
    elif args.dataset == "redwine":
        ds = datamod.load_red_wine(raw)
        tr, te = datamod.kfold(ds, 10, args.fold, rng)
        outputs = {f"redwine_fold{args.fold}_train.txt": tr, f"redwine_fold{args.fold}_test.txt": te}
    elif args.dataset == "digits":
        tr, va = datamod.build_digits(raw, rng)
        outputs = {"digits_train.txt": tr, "digits_valid.txt": va}
    elif args.dataset == "patches":
        names = sorted(f for f in os.listdir(raw) if f.lower().endswith(".pgm"))
        if not names:
            raise CliError("data", f"no .pgm images in {raw}", EXIT_DATA)
        images = [datamod.read_pgm(os.path.join(raw, f)) for f in names]
        ds = datamod.prepare_patches(images, 8, args.n_patches, rng)
        outputs = {"patches.txt": ds}
    print("#file\trows\tcolumns")
    for name, ds in outputs.items():
        path = os.path.join(args.out, name)
        datamod.save_matrix(path, ds.values, header=ds.note)
        print(_fmt_row([path, ds.N, ds.D]))
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="oanade", description="Order-agnostic deep NADE density estimation")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="train a model from a run configuration")
    s.add_argument("config")
    s.add_argument("-o", "--output", required=True, help="model file to write")
    s.add_argument("--history", help="history TSV (default: <output>.history.tsv)")
    s.add_argument("--grid", action="append", metavar="KEY=V1,V2",
                   help="grid over a config key; best validation score wins (repeatable)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="average test log-likelihood over random orderings")
    s.add_argument("model")
    s.add_argument("data")
    s.add_argument("--orderings", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--ensemble", action="store_true", help="also report ensemble log-likelihoods")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("sample", help="ancestral samples")
    s.add_argument("model")
    s.add_argument("-n", type=int, default=50)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--ordering-seed", type=int)
    s.add_argument("--ensemble", type=int, default=1, metavar="K",
                   help="sample from an ensemble of K orderings (one picked per sample)")
    s.add_argument("--sort-by-likelihood", action="store_true")
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--pgm", help="also write a contact sheet of image-shaped samples")
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("impute", help="marginal densities and completions of rows with '?' entries")
    s.add_argument("model")
    s.add_argument("data")
    s.add_argument("-n", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_impute)

    s = sub.add_parser("gradcheck", help="compare backprop with finite differences")
    s.add_argument("config")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--draws", type=int, default=10)
    s.add_argument("--corrupt-tensor", help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("export-rf", help="first-layer receptive fields as PGM images")
    s.add_argument("model")
    s.add_argument("--top-k", type=int, default=50)
    s.add_argument("--prefix", required=True)
    s.set_defaults(func=cmd_export_rf)

    s = sub.add_parser("prep-data", help="build benchmark data matrices from raw files")
    s.add_argument("dataset", choices=["adult", "redwine", "digits", "patches"])
    s.add_argument("--raw", help="directory of raw files (default: bundled data/raw)")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--fold", type=int, default=0, help="red wine fold (0-9)")
    s.add_argument("--n-patches", type=int, default=10000)
    s.set_defaults(func=cmd_prep_data)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except CliError as e:
        err = (e.category, str(e), e.code)
    except ConfigError as e:
        err = ("config", str(e), EXIT_USAGE)
    except (ModelFileError, DataError) as e:
        err = ("data", str(e), EXIT_DATA)
    except (TrainingDiverged, FloatingPointError) as e:
        err = ("numeric", str(e), EXIT_NUMERIC)
    except ValueError as e:
        err = ("config", str(e), EXIT_USAGE)
    print(f"error[{err[0]}]: {err[1]}", file=sys.stderr)
    return err[2]


if __name__ == "__main__":
    sys.exit(main())
