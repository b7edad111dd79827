"""Training, model selection and reconstruction-error evaluation."""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .autodiff import Adam, ParamStore, backward, mse
from .baselines import LineGraphMPNN, MlpAutoencoder, build_line_graph
from .errors import CompatibilityError, ParameterError, ParseError, TrainingDiverged, ValidationError
from .ingestion import SPLITS, TrafficDataset
from .models import MODEL_KINDS, Model, TopoCompressor

log = logging.getLogger(__name__)

# (p, d_vc, d_wc) for the topological models and the MPNN code width, per target ratio
TOPO_PRESETS = {Fraction(1, 3): (8, 2, 10), Fraction(2, 3): (6, 5, 10)}
MPNN_PRESETS = {Fraction(1, 3): 4, Fraction(2, 3): 7}


@dataclass
class TrainConfig:
    model: str = "setmp"
    rc: Fraction = Fraction(2, 3)
    p: int | None = None
    d_hidden: int = 20
    d_vc: int | None = None
    d_wc: int | None = None
    rounds: int = 1
    k_edges: int = 2
    final_dim: int | None = None
    mlp_hidden: tuple[int, ...] = (1024, 512)
    epochs: int = 200
    batch_size: int = 25
    lr: float = 0.003
    eps: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        self.rc = Fraction(self.rc)
        self.mlp_hidden = tuple(self.mlp_hidden)
        if self.model not in MODEL_KINDS:
            raise ParameterError(f"unknown model {self.model!r}; choose from {', '.join(MODEL_KINDS)}")
        if self.epochs < 1:
            raise ParameterError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ParameterError("batch size must be >= 1")
        if not 0 < self.rc <= 1:
            raise ParameterError(f"r_c must lie in (0, 1], got {self.rc}")
        if self.model in ("setmp", "combmp"):
            preset = TOPO_PRESETS.get(self.rc)
            if preset is None and None in (self.p, self.d_vc, self.d_wc):
                raise ParameterError(f"no preset for r_c={self.rc}; give p, d_vc and d_wc")
            if preset:
                self.p = self.p if self.p is not None else preset[0]
                self.d_vc = self.d_vc if self.d_vc is not None else preset[1]
                self.d_wc = self.d_wc if self.d_wc is not None else preset[2]
        if self.model == "mpnn" and self.final_dim is None:
            if self.rc not in MPNN_PRESETS:
                raise ParameterError(f"no MPNN preset for r_c={self.rc}; give final_dim")
            self.final_dim = MPNN_PRESETS[self.rc]

    def to_dict(self) -> dict:
        out = asdict(self)
        out["rc"] = str(self.rc)
        out["mlp_hidden"] = list(self.mlp_hidden)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        return cls(**known)


def make_model(config: TrainConfig, dataset: TrafficDataset) -> Model:
    n, d = dataset.n_links, dataset.d
    if config.model in ("setmp", "combmp"):
        return TopoCompressor(
            config.model, n, d, config.p, config.d_vc, config.d_wc,
            d_hidden=config.d_hidden, rounds=config.rounds, k_edges=config.k_edges,
        )
    if config.model == "mlp_ae":
        return MlpAutoencoder(n, d, config.rc, config.mlp_hidden)
    if dataset.topology is None:
        raise CompatibilityError("the MPNN baseline needs a dataset ingested with its topology")
    return LineGraphMPNN(n, d, build_line_graph(dataset.topology), config.final_dim, config.d_hidden)


@dataclass
class TrainResult:
    model: Model
    params: ParamStore
    history: list[dict]
    best_epoch: int
    config: TrainConfig


def _batches(x, batch_size):
    for start in range(0, len(x), batch_size):
        yield x[start : start + batch_size]


def predict(model: Model, params: ParamStore, signals: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Reconstructions (M, N, d) of normalized subsignals, as float64."""
    out = np.empty(signals.shape, dtype=np.float64)
    for start in range(0, len(signals), batch_size):
        chunk = signals[start : start + batch_size]
        rec = model.forward(params, chunk).recon.data
        out[start : start + len(chunk)] = rec.reshape(chunk.shape)
    return out


def mean_squared(model, params, signals, batch_size=256) -> float:
    rec = predict(model, params, signals, batch_size)
    return float(np.mean((rec - signals) ** 2))


def train(config: TrainConfig, dataset: TrafficDataset, model: Model | None = None, progress=None) -> TrainResult:
    """Mini-batch Adam training; returns the parameters of the best validation epoch.

    Everything random draws from one ``numpy.random.Generator`` seeded with
    ``config.seed``, and BLAS is pinned to one thread, so identical inputs give
    bitwise-identical parameters and history.
    """
    model = model or make_model(config, dataset)
    train_x = dataset.subsignals("train")
    val_x = dataset.subsignals("val")
    if len(train_x) == 0 or len(val_x) == 0:
        raise ValidationError("training needs non-empty train and val splits")
    rng = np.random.default_rng(config.seed)
    with threadpool_limits(limits=1):
        params = model.init_params(rng)
        opt = Adam(lr=config.lr, eps=config.eps)
        best = params.copy()
        best_val, best_epoch = np.inf, 0
        history: list[dict] = []
        for epoch in range(1, config.epochs + 1):
            order = rng.permutation(len(train_x))
            losses, weights = [], []
            for batch in _batches(train_x[order], config.batch_size):
                loss = mse(model.forward(params, batch).recon, batch.reshape(-1, dataset.d))
                value = float(loss.data)
                if not np.isfinite(value):
                    raise TrainingDiverged(
                        f"non-finite training loss in epoch {epoch}; last finite epoch {epoch - 1}",
                        history=history, params=best, last_finite_epoch=epoch - 1,
                    )
                opt.step(params, backward(loss))
                losses.append(value)
                weights.append(len(batch))
            val = mean_squared(model, params, val_x)
            record = {
                "epoch": epoch,
                "train_mse": float(np.average(losses, weights=weights)),
                "val_mse": val,
            }
            history.append(record)
            if progress:
                progress(record)
            log.debug("epoch %d train %.3e val %.3e", epoch, record["train_mse"], val)
            if not np.isfinite(val):
                raise TrainingDiverged(
                    f"non-finite validation loss in epoch {epoch}; last finite epoch {epoch - 1}",
                    history=history, params=best, last_finite_epoch=epoch - 1,
                )
            if val < best_val:
                best_val, best_epoch, best = val, epoch, params.copy()
    return TrainResult(model, best, history, best_epoch, config)


@dataclass
class SplitErrors:
    mse: float
    mae: float
    per_subsignal_mse: list[float] = field(default_factory=list)
    per_subsignal_mae: list[float] = field(default_factory=list)


@dataclass
class EvalReport:
    model: str
    ratio: Fraction
    splits: dict[str, SplitErrors]
    seed: int
    wall_clock: float = 0.0

    def records(self) -> list[dict]:
        """One JSON-able record per split; wall-clock time is not included."""
        return [
            {
                "split": name,
                "model": self.model,
                "ratio": str(self.ratio),
                "seed": self.seed,
                "mse": err.mse,
                "mae": err.mae,
                "per_subsignal_mse": err.per_subsignal_mse,
                "per_subsignal_mae": err.per_subsignal_mae,
            }
            for name, err in self.splits.items()
        ]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records())

    def table(self) -> str:
        lines = [f"model {self.model}  r_c = {self.ratio}  seed {self.seed}", "split      MSE          MAE"]
        for name, err in self.splits.items():
            lines.append(f"{name:<8} {err.mse:.4e}  {err.mae:.4e}")
        return "\n".join(lines)


def split_errors(recon: np.ndarray, target: np.ndarray) -> SplitErrors:
    if recon.shape != target.shape:
        raise ValidationError(f"reconstructions have shape {recon.shape}, expected {target.shape}")
    diff = np.asarray(recon, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    axes = tuple(range(1, diff.ndim))
    per_mse = np.mean(diff**2, axis=axes)
    per_mae = np.mean(np.abs(diff), axis=axes)
    return SplitErrors(
        mse=float(np.mean(diff**2)),
        mae=float(np.mean(np.abs(diff))),
        per_subsignal_mse=per_mse.tolist(),
        per_subsignal_mae=per_mae.tolist(),
    )


def evaluate(model: Model, params: ParamStore, dataset: TrafficDataset, splits=SPLITS, seed: int = 0) -> EvalReport:
    """MSE and MAE in normalized space for each requested split."""
    if (model.n, model.d) != (dataset.n_links, dataset.d):
        raise CompatibilityError(
            f"model expects {model.n} links x d={model.d}, dataset has {dataset.n_links} x d={dataset.d}"
        )
    start = time.perf_counter()
    out = {}
    with threadpool_limits(limits=1):
        for split in splits:
            target = dataset.subsignals(split)
            out[split] = split_errors(predict(model, params, target), target)
    return EvalReport(model.kind, model.ratio(), out, seed, time.perf_counter() - start)


# ---------------------------------------------------------------------------
# external reconstructions


def write_reconstructions(path_or_buf, recon: np.ndarray, dataset: TrafficDataset, split: str, space: str = "raw") -> None:
    """CSV with columns ``subsignal,link,v0..v{d-1}``, rows in split order."""
    idx = dataset.indices(split)
    if recon.shape != (len(idx), dataset.n_links, dataset.d):
        raise ValidationError(f"reconstructions have shape {recon.shape}")
    values = dataset.denormalize(recon) if space == "raw" else np.asarray(recon, dtype=np.float64)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["subsignal", "link"] + [f"v{t}" for t in range(dataset.d)])
    for i, window in enumerate(idx):
        for link in range(dataset.n_links):
            w.writerow([int(window), link] + [repr(float(v)) for v in values[i, link]])
    if isinstance(path_or_buf, (str, Path)):
        Path(path_or_buf).write_text(buf.getvalue(), encoding="utf-8")
    else:
        path_or_buf.write(buf.getvalue())


def read_reconstructions(path, dataset: TrafficDataset, split: str, space: str = "raw") -> np.ndarray:
    """Parse an external reconstruction CSV back into normalized (M, N, d)."""
    idx = dataset.indices(split)
    n, d = dataset.n_links, dataset.d
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise ParseError(f"{path}: {exc.strerror or exc}") from exc
    body = rows[1:] if rows and rows[0] and rows[0][0].strip() == "subsignal" else rows
    if len(body) != len(idx) * n:
        raise ValidationError(f"{path}: {len(body)} rows, split {split!r} needs {len(idx) * n}")
    out = np.empty((len(idx), n, d))
    for r, row in enumerate(body):
        if len(row) != d + 2:
            raise ValidationError(f"{path}: row {r + 1} has {len(row)} cells, expected {d + 2}")
        i, link = divmod(r, n)
        if int(row[0]) != idx[i] or int(row[1]) != link:
            raise ValidationError(f"{path}: row {r + 1} is ({row[0]}, {row[1]}), expected ({idx[i]}, {link})")
        out[i, link] = [float(v) for v in row[2:]]
    return dataset.normalize(out) if space == "raw" else out


def compare_external(recon, dataset: TrafficDataset, split: str = "test", space: str = "raw",
                     name: str = "external", ratio: Fraction | None = None, seed: int = 0) -> EvalReport:
    """Score reconstructions produced outside this package (e.g. by zfp)."""
    if not isinstance(recon, np.ndarray):
        recon = read_reconstructions(recon, dataset, split, space)
    elif space == "raw":
        recon = dataset.normalize(recon)
    start = time.perf_counter()
    errors = split_errors(recon, dataset.subsignals(split))
    return EvalReport(name, ratio if ratio is not None else Fraction(1), {split: errors}, seed,
                      time.perf_counter() - start)
