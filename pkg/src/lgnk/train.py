"""Loss, optimizer, schedules and the training loop.

AdamW with decoupled weight decay (generator parameters are exempt from
decay: they are read out as physics and decaying them would bias the damping
and coupling profiles), cosine learning-rate annealing, global-norm gradient
clipping, per-sample tapes accumulated in fixed order so runs are
bit-reproducible, and checkpoints at the best test error and at the end.

Three training modes: from scratch, transfer with the coupling matrix frozen
("freeze_s" masks every update to generator.P), and transfer of all
parameters.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from lgnk import gradtape
from lgnk.datagen import Dataset
from lgnk.generator import spectrum
from lgnk.model import (
    Model,
    ModelConfig,
    ModelParams,
    forward,
    init_model,
    save_checkpoint,
    training_loss_node,
)

__all__ = [
    "DegenerateTarget",
    "TrainingDiverged",
    "TrainConfig",
    "TrainLog",
    "AdamW",
    "relative_l2",
    "cosine_lr",
    "clip_gradients",
    "train_loop",
    "transfer_finetune",
    "sweep_channels",
]

LOG_COLUMNS = ("epoch", "train_loss", "test_l2", "lr", "wall_ms", "max_re_lambda")

TRAIN_MODES = ("scratch", "freeze_s", "transfer_all")


class DegenerateTarget(ValueError):
    """Relative error against a zero-norm target is undefined."""


class TrainingDiverged(RuntimeError):
    """Non-finite loss; carries epoch and step of the failure."""

    def __init__(self, epoch: int, step: int, loss: float):
        self.epoch = epoch
        self.step = step
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, step {step}")


def relative_l2(pred: np.ndarray, truth: np.ndarray) -> float:
    """||pred - truth||_F / ||truth||_F over the whole volume."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    tn = float(np.linalg.norm(truth))
    if tn == 0.0:
        raise DegenerateTarget("target volume has zero norm")
    return float(np.linalg.norm(pred - truth) / tn)


def cosine_lr(epoch: int, epochs: int, lr0: float, lr_min: float = 0.0) -> float:
    """lr(e) = lr_min + (lr0 - lr_min)(1 + cos(pi e / E)) / 2; exact endpoints."""
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * epoch / epochs))


@dataclass
class TrainConfig:
    epochs: int = 500
    batch_size: int = 10
    lr0: float = 1e-3
    lr_min: float = 0.0
    weight_decay: float = 1e-4
    clip_norm: float = 1.0
    mode: str = "scratch"
    init_checkpoint: str | None = None
    seed: int = 0
    N_train: int | None = None
    N_test: int | None = None

    def __post_init__(self):
        if self.mode not in TRAIN_MODES:
            raise ValueError(f"unknown training mode {self.mode!r}; expected one of {TRAIN_MODES}")
        if self.mode in ("freeze_s", "transfer_all") and not self.init_checkpoint:
            raise ValueError(f"mode {self.mode!r} requires init_checkpoint")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


@dataclass
class TrainLog:
    """One row per epoch; wall_ms is the only non-deterministic column."""

    rows: list[dict] = field(default_factory=list)
    csv_path: Path | None = None

    def append(self, **row) -> None:
        assert set(row) == set(LOG_COLUMNS)
        self.rows.append(row)
        if self.csv_path is not None:
            with open(self.csv_path, "a") as fh:
                fh.write(self._format_row(row) + "\n")
                fh.flush()

    def start_csv(self, path) -> None:
        self.csv_path = Path(path)
        self.csv_path.write_text(",".join(LOG_COLUMNS) + "\n")

    @staticmethod
    def _format_row(row) -> str:
        return ",".join(repr(row[c]) if isinstance(row[c], float) else str(row[c]) for c in LOG_COLUMNS)

    @classmethod
    def read_csv(cls, path) -> "TrainLog":
        lines = Path(path).read_text().strip().split("\n")
        header = tuple(lines[0].split(","))
        if header != LOG_COLUMNS:
            raise ValueError(f"unexpected train log header {header}")
        log = cls()
        for line in lines[1:]:
            vals = line.split(",")
            log.rows.append(
                {"epoch": int(vals[0]), **{c: float(v) for c, v in zip(LOG_COLUMNS[1:], vals[1:])}}
            )
        return log

    def column(self, name: str) -> list:
        return [row[name] for row in self.rows]

    def best_epoch(self) -> int:
        tests = self.column("test_l2")
        return int(np.argmin(tests))

    def best_test_l2(self) -> float:
        return float(min(self.column("test_l2")))

    def first_epoch_reaching(self, target: float) -> int | None:
        for row in self.rows:
            if row["test_l2"] <= target:
                return row["epoch"]
        return None


class AdamW:
    """Decoupled-weight-decay Adam over a path-keyed parameter dict.

    Complex tensors are updated through their float64 views, i.e. exactly as
    pairs of real parameters. Paths in ``freeze`` receive neither gradient
    updates nor decay; paths matching ``decay_exclude`` skip only the decay.
    """

    def __init__(self, params: ModelParams, weight_decay: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 freeze: frozenset[str] = frozenset(),
                 decay_exclude: tuple[str, ...] = ("generator.",)):
        self.params = params
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.freeze = frozenset(freeze)
        self.decay_exclude = decay_exclude
        self.t = 0
        self.m = {k: np.zeros_like(self._view(v)) for k, v in params.tensors.items()}
        self.v = {k: np.zeros_like(self._view(v)) for k, v in params.tensors.items()}

    @staticmethod
    def _view(arr: np.ndarray) -> np.ndarray:
        return arr.view(np.float64) if np.iscomplexobj(arr) else arr

    def state_names(self) -> list[str]:
        return [f"adamw.{kind}.{k}" for kind in ("m", "v") for k in self.params.tensors]

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for path, p in self.params.tensors.items():
            if path in self.freeze:
                continue
            g = self._view(np.ascontiguousarray(grads[path]))
            pv = self._view(p)
            if self.weight_decay and not path.startswith(self.decay_exclude):
                pv -= lr * self.weight_decay * pv
            m = self.m[path]
            v = self.v[path]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            pv -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def clip_gradients(grads: dict[str, np.ndarray], clip_norm: float) -> float:
    """Scale all gradients so the global norm is at most clip_norm; returns
    the pre-clip norm. Complex entries count as their two real components."""
    total_sq = 0.0
    for g in grads.values():
        total_sq += float(np.vdot(g, g).real)
    total = math.sqrt(total_sq)
    if total > clip_norm:
        scale = clip_norm / total
        for k in grads:
            grads[k] = grads[k] * scale
    return total


def _windows(dataset: Dataset, config: ModelConfig):
    T = dataset.trajectories.shape[1]
    need = config.T_in + config.T_out
    if T < need:
        raise ValueError(f"trajectories have {T} snapshots; need T_in + T_out = {need}")
    n = dataset.trajectories.shape[-1]
    if n != config.n:
        raise ValueError(f"dataset grid {n} != config n {config.n}")


def _sample(dataset: Dataset, idx: int, config: ModelConfig):
    traj = dataset.trajectories[idx]
    frames = traj[: config.T_in]
    target = traj[config.T_in: config.T_in + config.T_out]
    return frames, target


def evaluate(params: ModelParams, config: ModelConfig, dataset: Dataset, indices) -> float:
    """Mean per-sample relative L2 over the prediction volume."""
    times = [float(k) for k in range(1, config.T_out + 1)]
    errs = []
    for idx in indices:
        frames, target = _sample(dataset, idx, config)
        errs.append(relative_l2(forward(frames, params, config, times), target))
    return float(np.mean(errs))


def _max_re_lambda(params: ModelParams, config: ModelConfig) -> float:
    pts = spectrum(params.generator_params(), config.grid())
    return max(p.lam.real for p in pts)


def train_loop(model_config: ModelConfig, train_config: TrainConfig, dataset: Dataset,
               out_dir=None, init_params: ModelParams | None = None,
               freeze: frozenset[str] = frozenset()) -> tuple[ModelParams, TrainLog]:
    """Full training run; returns final parameters and the per-epoch log.

    Sample order is a seeded shuffle, per-sample gradients accumulate in a
    fixed order, and checkpoints land in ``out_dir`` ("best.lgnk" at the
    lowest test error, "last.lgnk" at the end) when a directory is given.
    """
    _windows(dataset, model_config)
    train_idx = dataset.train_indices
    test_idx = dataset.test_indices
    if train_config.N_train is not None:
        train_idx = train_idx[: train_config.N_train]
    if train_config.N_test is not None:
        test_idx = test_idx[: train_config.N_test]
    if len(train_idx) < train_config.batch_size:
        raise ValueError(
            f"train split ({len(train_idx)}) smaller than batch size ({train_config.batch_size})"
        )
    if not test_idx:
        raise ValueError("empty test split")

    params = init_params.copy() if init_params is not None else init_model(model_config)
    opt = AdamW(params, weight_decay=train_config.weight_decay, freeze=freeze)
    rng = np.random.default_rng(train_config.seed)
    times = [float(k) for k in range(1, model_config.T_out + 1)]

    log = TrainLog()
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log.start_csv(out_dir / "train_log.csv")

    best = math.inf
    for epoch in range(train_config.epochs):
        tic = time.perf_counter()
        lr = cosine_lr(epoch, train_config.epochs, train_config.lr0, train_config.lr_min)
        order = rng.permutation(len(train_idx))
        losses = []
        for start in range(0, len(order), train_config.batch_size):
            batch = order[start: start + train_config.batch_size]
            acc: dict[str, np.ndarray] = {}
            for j in batch:
                frames, target = _sample(dataset, train_idx[j], model_config)
                loss_node, _ = training_loss_node(frames, target, params, model_config, times)
                loss = float(loss_node.value)
                if not math.isfinite(loss):
                    raise TrainingDiverged(epoch, start, loss)
                losses.append(loss)
                for k, g in gradtape.backward(loss_node).items():
                    acc[k] = acc[k] + g if k in acc else g
            grads = {k: acc[k] / len(batch) for k in params.tensors}
            clip_gradients(grads, train_config.clip_norm)
            opt.step(grads, lr)

        test_l2 = evaluate(params, model_config, dataset, test_idx)
        wall_ms = (time.perf_counter() - tic) * 1e3
        log.append(
            epoch=epoch,
            train_loss=float(np.mean(losses)),
            test_l2=test_l2,
            lr=lr,
            wall_ms=wall_ms,
            max_re_lambda=_max_re_lambda(params, model_config),
        )
        if test_l2 < best:
            best = test_l2
            if out_dir is not None:
                save_checkpoint(out_dir / "best.lgnk", model_config, params, epoch=epoch,
                                optimizer_state_names=opt.state_names())
    if out_dir is not None:
        save_checkpoint(out_dir / "last.lgnk", model_config, params,
                        epoch=train_config.epochs - 1,
                        optimizer_state_names=opt.state_names())
    return params, log


def _check_compatible(a: ModelConfig, b: ModelConfig) -> None:
    differing = [
        name for name in ("n", "T_in", "T_out", "r", "M", "w", "hidden", "variant")
        if getattr(a, name) != getattr(b, name)
    ]
    if differing:
        detail = ", ".join(f"{name}: {getattr(a, name)} != {getattr(b, name)}" for name in differing)
        raise ValueError(f"pretrained model incompatible with requested config ({detail})")


def transfer_finetune(pretrained: Model, mode: str, dataset: Dataset,
                      train_config: TrainConfig, model_config: ModelConfig | None = None,
                      out_dir=None) -> tuple[ModelParams, TrainLog]:
    """Fine-tune a pretrained model on a new dataset.

    ``freeze_s`` pins generator.P bit-for-bit (no gradient step, no decay);
    ``transfer_all`` updates every parameter. Both start from the checkpoint.
    """
    if mode not in ("freeze_s", "transfer_all"):
        raise ValueError(f"transfer mode must be freeze_s or transfer_all, got {mode!r}")
    if model_config is not None:
        _check_compatible(pretrained.config, model_config)
    freeze = frozenset({"generator.P"}) if mode == "freeze_s" else frozenset()
    return train_loop(pretrained.config, train_config, dataset, out_dir=out_dir,
                      init_params=pretrained.params, freeze=freeze)


def sweep_channels(r_list, model_config: ModelConfig, train_config: TrainConfig,
                   dataset: Dataset, out_dir=None) -> list[dict]:
    """Train one model per latent width r; all other hyperparameters fixed.

    Each summary row carries the best test error and the dominant-branch
    dissipation-fit R^2 of the final model.
    """
    from lgnk.physics import fit_dissipation

    rows = []
    out_dir = Path(out_dir) if out_dir is not None else None
    for r in r_list:
        cfg = replace(model_config, r=int(r))
        run_dir = out_dir / f"r{r}" if out_dir is not None else None
        params, log = train_loop(cfg, train_config, dataset, out_dir=run_dir)
        fit = fit_dissipation(Model(config=cfg, params=params))
        rows.append(
            {
                "r": int(r),
                "best_test_l2": log.best_test_l2(),
                "final_test_l2": log.column("test_l2")[-1],
                "dissipation_r2": fit.dominant.r_squared,
            }
        )
    return rows
