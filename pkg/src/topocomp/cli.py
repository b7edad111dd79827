"""Command-line interface: ``topocomp {synth,ingest,train,compress,decompress,eval}``.

Every subcommand accepts ``--config FILE`` (a JSON object whose keys are the
long flag names with dashes replaced by underscores); flags given on the
command line override the file. A seed is mandatory everywhere. Outputs are
written atomically and contain no timestamps, so reruns are byte-identical.

Exit codes: 0 ok, 1 training diverged, 2 input error, 3 config or
compatibility error, 4 binary format error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .compression import CompressedArtifact, decompress, model_digest
from .errors import (
    CompatibilityError,
    ContractError,
    DatasetTooSmallError,
    DimensionError,
    FormatError,
    ParameterError,
    ParseError,
    TrainingDiverged,
    ValidationError,
)
from .harness import TrainConfig, compare_external, evaluate, predict, train, write_reconstructions
from .ingestion import (
    SPLITS,
    _atomic_write,
    load_csv_series,
    load_dataset,
    parse_topology_and_demands,
    route_demands,
    save_dataset,
    window_and_split,
    write_csv_series,
    write_sndlib,
)
from .models import TopoCompressor

log = logging.getLogger("topocomp")

EXIT_OK, EXIT_DIVERGED, EXIT_INPUT, EXIT_CONFIG, EXIT_FORMAT = 0, 1, 2, 3, 4

# built-in defaults, applied after the config file
DEFAULTS = {
    "synth": {"name": "abilene", "intervals": None, "missing": 0.08, "window": 10},
    "ingest": {"sndlib": None, "demands": [], "csv": None, "undirected": False, "window": 10,
               "interval_seconds": None},
    "train": {"model": "setmp", "rc": "2/3", "p": None, "dvc": None, "dwc": None, "T": 1,
              "hidden": 20, "k_edges": 2, "final_dim": None, "mlp_hidden": [1024, 512],
              "epochs": 200, "batch_size": 25, "lr": 0.003, "eps": 1e-3},
    "compress": {"split": "test", "index": 0, "all": False},
    "decompress": {"space": "raw"},
    "eval": {"splits": "train,val,test", "external": None, "external_space": "raw",
             "split": "test", "write_recon": None, "recon_space": "raw", "out": None},
}
REQUIRED = {
    "synth": ("seed", "out"),
    "ingest": ("seed", "out"),
    "train": ("seed", "data", "out"),
    "compress": ("seed", "model", "data", "out"),
    "decompress": ("seed", "model", "artifact", "out"),
    "eval": ("seed", "model", "data"),
}


class InputError(Exception):
    """A referenced input file is missing or a required option is absent."""


def _write_text(path, text: str) -> None:
    _atomic_write(path, text.encode("utf-8"))


def _need_file(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise InputError(f"no such file or directory: {path}")
    return path


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(opt) -> int:
    """Write a synthetic topology (SNDlib XML) and its link-load CSV."""
    from .synthetic import synthetic_link_series

    topology, series = synthetic_link_series(
        opt.name, opt.seed, opt.intervals, missing_fraction=opt.missing, d=opt.window
    )
    out = Path(opt.out)
    write_sndlib(out / f"{opt.name}.xml", topology)
    write_csv_series(out / f"{opt.name}.csv", series)
    print(f"wrote {out / (opt.name + '.xml')} ({len(topology.nodes)} nodes, {topology.n_links} links)")
    print(f"wrote {out / (opt.name + '.csv')} ({series.n_intervals} intervals, "
          f"{series.interval_seconds:g} s each)")
    return EXIT_OK


def cmd_ingest(opt) -> int:
    topology = None
    if opt.sndlib:
        paths = [_need_file(p) for p in [opt.sndlib, *opt.demands]]
        topology, demands = parse_topology_and_demands(paths, undirected=opt.undirected)
    if opt.csv:
        series = load_csv_series(_need_file(opt.csv), opt.interval_seconds)
        if topology is not None and series.n_links != topology.n_links:
            raise ValidationError(
                f"{opt.csv}: {series.n_links} link columns, topology {opt.sndlib} has {topology.n_links} links"
            )
    elif topology is not None:
        if len(demands.matrices) == 0:
            raise ValidationError(f"{opt.sndlib}: no <demands> blocks and no --csv link series given")
        series = route_demands(topology, demands)
        series.interval_seconds = opt.interval_seconds
    else:
        raise InputError("ingest needs --sndlib and/or --csv")
    dataset = window_and_split(series, opt.window, opt.seed, topology)
    manifest = save_dataset(dataset, opt.out)
    sizes = dataset.split_sizes()
    print(f"{len(dataset.windows)} subsignals of {dataset.n_links} links x {dataset.d} "
          f"(train {sizes['train']}, val {sizes['val']}, test {sizes['test']}) -> {manifest}")
    return EXIT_OK


def _train_config(opt) -> TrainConfig:
    return TrainConfig(
        model=opt.model, rc=Fraction(str(opt.rc)), p=opt.p, d_hidden=opt.hidden, d_vc=opt.dvc,
        d_wc=opt.dwc, rounds=opt.T, k_edges=opt.k_edges, final_dim=opt.final_dim,
        mlp_hidden=tuple(opt.mlp_hidden), epochs=opt.epochs, batch_size=opt.batch_size,
        lr=opt.lr, eps=opt.eps, seed=opt.seed,
    )


def _ratio_summary(model) -> str:
    r = model.ratio()
    if isinstance(model, TopoCompressor):
        stored = model.n * model.d_vc + model.k * model.d_wc
        detail = f"({model.n}*{model.d_vc} + {model.k}*{model.d_wc}) / ({model.n}*{model.d})"
        return f"achieved r_c = {r} = {stored}/{model.n * model.d} {detail}"
    return f"achieved r_c = {r}"


def cmd_train(opt) -> int:
    config = _train_config(opt)
    dataset = load_dataset(_need_file(opt.data))

    def progress(rec):
        log.info("epoch %d  train %.4e  val %.4e", rec["epoch"], rec["train_mse"], rec["val_mse"])

    result = train(config, dataset, progress=progress)
    out = Path(opt.out)
    ckpt = Checkpoint(
        result.model.kind,
        result.model.hyper,
        result.params,
        {
            "config": config.to_dict(),
            "best_epoch": result.best_epoch,
            "normalization": {"min": dataset.norm_min, "max": dataset.norm_max},
        },
    )
    save_checkpoint(out / "model.ckpt", ckpt)
    _write_text(out / "history.jsonl", "".join(json.dumps(r, sort_keys=True) + "\n" for r in result.history))
    best = result.history[result.best_epoch - 1]
    print(f"model {config.model}: {result.params.count()} parameters, {config.epochs} epochs")
    print(_ratio_summary(result.model))
    print(f"best epoch {result.best_epoch}: train MSE {best['train_mse']:.4e}, val MSE {best['val_mse']:.4e}")
    print(f"checkpoint -> {out / 'model.ckpt'}")
    return EXIT_OK


def _topo_model(ckpt):
    model = ckpt.model()
    if not isinstance(model, TopoCompressor):
        raise CompatibilityError(f"compress needs a setmp or combmp checkpoint, got {ckpt.kind}")
    return model


def _norm(ckpt) -> tuple[float, float]:
    n = ckpt.extra.get("normalization", {"min": 0.0, "max": 1.0})
    return float(n["min"]), float(n["max"])


def cmd_compress(opt) -> int:
    ckpt = load_checkpoint(_need_file(opt.model))
    model = _topo_model(ckpt)
    dataset = load_dataset(_need_file(opt.data))
    lo, hi = _norm(ckpt)
    if (lo, hi) != (dataset.norm_min, dataset.norm_max):
        log.warning("dataset normalization differs from the checkpoint's; using the checkpoint's")
    idx = dataset.indices(opt.split)
    if len(idx) == 0:
        raise ValidationError(f"split {opt.split!r} is empty")
    chosen = range(len(idx)) if opt.all else [opt.index]
    if not opt.all and not 0 <= opt.index < len(idx):
        raise ValidationError(f"--index {opt.index} out of range for {len(idx)} {opt.split} subsignals")
    scale = hi - lo if hi > lo else 1.0
    digest = model_digest(ckpt.params)
    out = Path(opt.out)
    with threadpool_limits(limits=1):
        for i in chosen:
            x = (dataset.windows[idx[i]] - lo) / scale
            res = model.forward(ckpt.params, x)
            art = CompressedArtifact(
                res.node_codes.data, res.hedge_codes.data, res.structure.node_hedge,
                model.d, model.p, digest, lo, hi,
            )
            target = out / f"{int(idx[i]):06d}.tgsc" if opt.all else out
            _atomic_write(target, art.to_bytes())
    print(f"{len(chosen)} artifact(s), {art.stored_floats} floats each, r_c = {art.ratio} -> {out}")
    return EXIT_OK


def cmd_decompress(opt) -> int:
    ckpt = load_checkpoint(_need_file(opt.model))
    model = _topo_model(ckpt)
    art = CompressedArtifact.from_bytes(_need_file(opt.artifact).read_bytes())
    if art.model_id != model_digest(ckpt.params):
        raise CompatibilityError(f"{opt.artifact} was produced by a different model")
    with threadpool_limits(limits=1):
        recon = decompress(art, ckpt.params, model.specs["decoder"]).astype(np.float64)
    if opt.space == "raw":
        scale = art.norm_max - art.norm_min if art.norm_max > art.norm_min else 1.0
        recon = recon * scale + art.norm_min
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for row in recon:
        w.writerow(repr(float(v)) for v in row)
    _write_text(opt.out, buf.getvalue())
    print(f"{recon.shape[0]} x {recon.shape[1]} reconstruction -> {opt.out}")
    return EXIT_OK


def cmd_eval(opt) -> int:
    ckpt = load_checkpoint(_need_file(opt.model))
    model = ckpt.model()
    dataset = load_dataset(_need_file(opt.data))
    splits = [s.strip() for s in opt.splits.split(",") if s.strip()]
    bad = [s for s in splits if s not in SPLITS]
    if bad:
        raise ParameterError(f"unknown split(s) {bad}; choose from {SPLITS}")
    report = evaluate(model, ckpt.params, dataset, splits, seed=opt.seed)
    print(_ratio_summary(model))
    print(report.table())
    text = report.to_jsonl()
    if opt.write_recon:
        with threadpool_limits(limits=1):
            recon = predict(model, ckpt.params, dataset.subsignals(opt.split))
        buf = io.StringIO()
        write_reconstructions(buf, recon, dataset, opt.split, opt.recon_space)
        _write_text(opt.write_recon, buf.getvalue())
    if opt.external:
        ext = compare_external(_need_file(opt.external), dataset, opt.split, opt.external_space,
                               name="external", seed=opt.seed)
        print(ext.table())
        text += ext.to_jsonl()
    if opt.out:
        _write_text(opt.out, text)
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "train": cmd_train,
    "compress": cmd_compress,
    "decompress": cmd_decompress,
    "eval": cmd_eval,
}


# ---------------------------------------------------------------------------
# argument handling


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="topocomp", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    s = argparse.SUPPRESS

    def common(p):
        p.add_argument("--config", help="JSON file with option values; flags override it")
        p.add_argument("--seed", type=int, default=s, help="mandatory random seed")

    p = sub.add_parser("synth", help="generate a synthetic topology and link-load CSV")
    common(p)
    p.add_argument("--name", choices=["abilene", "geant"], default=s)
    p.add_argument("--intervals", type=int, default=s, help="number of measurement intervals")
    p.add_argument("--missing", type=float, default=s, help="fraction of windows with gaps")
    p.add_argument("--window", type=int, default=s)
    p.add_argument("--out", default=s, help="output directory")

    p = sub.add_parser("ingest", help="window, clean, split and normalize a traffic series")
    common(p)
    p.add_argument("--sndlib", default=s, help="SNDlib XML with the network structure")
    p.add_argument("--demands", nargs="*", default=s, help="further SNDlib files with <demands> blocks")
    p.add_argument("--csv", default=s, help="link-load CSV (header = link names, rows = intervals)")
    p.add_argument("--undirected", action="store_const", const=True, default=s)
    p.add_argument("--window", type=int, default=s, help="subsignal length d")
    p.add_argument("--interval-seconds", type=float, default=s)
    p.add_argument("--out", default=s, help="dataset directory")

    p = sub.add_parser("train", help="train a compressor and write a checkpoint")
    common(p)
    p.add_argument("--data", default=s, help="dataset directory or manifest")
    p.add_argument("--model", choices=["setmp", "combmp", "mpnn", "mlp_ae"], default=s)
    p.add_argument("--rc", default=s, help="target compression factor, e.g. 1/3")
    p.add_argument("--p", type=int, default=s, help="maximum hyperedge size")
    p.add_argument("--dvc", type=int, default=s, help="node code width")
    p.add_argument("--dwc", type=int, default=s, help="hyperedge code width")
    p.add_argument("--T", type=int, default=s, help="CombMP message-passing rounds")
    p.add_argument("--hidden", type=int, default=s, help="hidden width d'")
    p.add_argument("--k-edges", type=int, default=s, help="CombMP edges per node")
    p.add_argument("--final-dim", type=int, default=s, help="MPNN code width")
    p.add_argument("--mlp-hidden", type=int, nargs="+", default=s, help="MLP-AE hidden widths")
    p.add_argument("--epochs", type=int, default=s)
    p.add_argument("--batch-size", type=int, default=s)
    p.add_argument("--lr", type=float, default=s)
    p.add_argument("--eps", type=float, default=s)
    p.add_argument("--out", default=s, help="run directory")

    p = sub.add_parser("compress", help="write binary artifacts for subsignals of a split")
    common(p)
    p.add_argument("--model", default=s, help="checkpoint file")
    p.add_argument("--data", default=s, help="dataset directory or manifest")
    p.add_argument("--split", choices=SPLITS, default=s)
    p.add_argument("--index", type=int, default=s, help="position within the split")
    p.add_argument("--all", action="store_const", const=True, default=s,
                   help="compress the whole split; --out is then a directory")
    p.add_argument("--out", default=s)

    p = sub.add_parser("decompress", help="reconstruct a subsignal from an artifact as CSV")
    common(p)
    p.add_argument("--model", default=s, help="checkpoint file")
    p.add_argument("--artifact", default=s)
    p.add_argument("--space", choices=["raw", "normalized"], default=s)
    p.add_argument("--out", default=s, help="CSV path (N rows, d columns)")

    p = sub.add_parser("eval", help="MSE/MAE per split, optionally scoring external reconstructions")
    common(p)
    p.add_argument("--model", default=s, help="checkpoint file")
    p.add_argument("--data", default=s, help="dataset directory or manifest")
    p.add_argument("--splits", default=s, help="comma-separated splits to score")
    p.add_argument("--split", choices=SPLITS, default=s, help="split for --external / --write-recon")
    p.add_argument("--external", default=s, help="reconstruction CSV from another tool")
    p.add_argument("--external-space", choices=["raw", "normalized"], default=s)
    p.add_argument("--write-recon", default=s, help="write this model's reconstructions as CSV")
    p.add_argument("--recon-space", choices=["raw", "normalized"], default=s)
    p.add_argument("--out", default=s, help="JSONL report path")
    return parser


def resolve_options(command: str, given: dict) -> argparse.Namespace:
    """Merge built-in defaults < config file < command-line flags."""
    merged = dict(DEFAULTS[command])
    merged["seed"] = None
    for key in REQUIRED[command]:
        merged.setdefault(key, None)
    config_path = given.pop("config", None)
    if config_path:
        path = _need_file(config_path)
        try:
            config = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: {exc}") from exc
        if not isinstance(config, dict):
            raise ParseError(f"{path}: config must be a JSON object")
        unknown = sorted(set(config) - set(merged))
        if unknown:
            raise ParameterError(f"{path}: unknown option(s) for {command}: {', '.join(unknown)}")
        merged.update(config)
    merged.update(given)
    missing = [k for k in REQUIRED[command] if merged.get(k) is None]
    if missing:
        raise InputError(f"{command}: missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))
    return argparse.Namespace(**merged)


def main(argv=None) -> int:
    parser = build_parser()
    args = vars(parser.parse_args(argv))
    command = args.pop("command")
    logging.basicConfig(level=logging.INFO if args.pop("verbose") else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        opt = resolve_options(command, args)
        return COMMANDS[command](opt)
    except (InputError, ParseError, ValidationError, DatasetTooSmallError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ParameterError, CompatibilityError, ContractError, DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
