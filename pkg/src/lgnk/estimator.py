"""Scikit-learn style front door for the generator operator.

``KoopmanGeneratorRegressor`` wraps config, initialization and the training
loop behind the estimator protocol (``fit``/``predict``/``get_params``), so
the model slots into pipelines, grid searches and cross-validation tooling.
X is a stack of trajectories with shape (N, T, n, n); the estimator derives
input windows and prediction targets itself.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from lgnk.datagen import Dataset
from lgnk.model import Model, ModelConfig, forward
from lgnk.train import TrainConfig, relative_l2, train_loop

__all__ = [
    "KoopmanGeneratorRegressor",
    "validate_trajectories",
    "validate_frames",
]


def validate_trajectories(X, min_T: int = 1) -> np.ndarray:
    """Require (N, T, n, n) float data on a power-of-two square grid."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 4:
        raise ValueError(f"trajectories must have shape (N, T, n, n), got {X.shape}")
    N, T, h, w = X.shape
    if h != w:
        raise ValueError(f"fields must be square, got {h}x{w}")
    if h < 4 or h & (h - 1):
        raise ValueError(f"grid size must be a power of two >= 4, got {h}")
    if T < min_T:
        raise ValueError(f"trajectories have {T} snapshots; need at least {min_T}")
    if not np.all(np.isfinite(X)):
        raise ValueError("trajectories contain non-finite values")
    return X


def validate_frames(X, T_in: int, n: int) -> np.ndarray:
    """Require (N, T_in, n, n) input windows matching a fitted model."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[1] != T_in or X.shape[2] != n or X.shape[3] != n:
        raise ValueError(f"expected input windows of shape (N, {T_in}, {n}, {n}), got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("input windows contain non-finite values")
    return X


class KoopmanGeneratorRegressor(BaseEstimator):
    """Trajectory forecaster with a structurally stable linear latent core.

    Parameters mirror the model/training configs one-to-one. ``fit`` takes
    trajectories shaped (N, T, n, n) with T >= T_in + T_out, holds out
    ``val_fraction`` of them for checkpoint selection, and stores the final
    model in ``model_``. ``predict`` maps input windows (N, T_in, n, n) to
    predicted volumes (N, T_out, n, n) at times 1..T_out.
    """

    def __init__(self, r=32, M=12, w=32, hidden=128, T_in=10, T_out=10, variant="sd",
                 epochs=500, batch_size=10, lr=1e-3, weight_decay=1e-4, clip_norm=1.0,
                 val_fraction=0.2, seed=0):
        self.r = r
        self.M = M
        self.w = w
        self.hidden = hidden
        self.T_in = T_in
        self.T_out = T_out
        self.variant = variant
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.val_fraction = val_fraction
        self.seed = seed

    def _configs(self, n: int) -> tuple[ModelConfig, TrainConfig]:
        mc = ModelConfig(n=n, T_in=self.T_in, T_out=self.T_out, r=self.r, M=self.M,
                         w=self.w, hidden=self.hidden, variant=self.variant, seed=self.seed)
        tc = TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr0=self.lr,
                         weight_decay=self.weight_decay, clip_norm=self.clip_norm,
                         seed=self.seed)
        return mc, tc

    def fit(self, X, y=None):
        X = validate_trajectories(X, min_T=self.T_in + self.T_out)
        n_val = max(1, int(round(self.val_fraction * X.shape[0])))
        n_train = X.shape[0] - n_val
        if n_train < self.batch_size:
            raise ValueError(
                f"{X.shape[0]} trajectories leave {n_train} for training at "
                f"val_fraction={self.val_fraction}, below batch_size={self.batch_size}"
            )
        mc, tc = self._configs(X.shape[-1])
        split = {"train": list(range(n_train)), "test": list(range(n_train, X.shape[0]))}
        ds = Dataset(trajectories=X, manifest={"pde": "user", "split": split, "count": X.shape[0]})
        params, log = train_loop(mc, tc, ds)
        self.model_ = Model(config=mc, params=params)
        self.train_log_ = log
        return self

    def _check_fitted(self) -> Model:
        if not hasattr(self, "model_"):
            raise NotFittedError("call fit before predict/score")
        return self.model_

    def predict(self, X) -> np.ndarray:
        model = self._check_fitted()
        cfg = model.config
        X = validate_frames(X, cfg.T_in, cfg.n)
        times = [float(k) for k in range(1, cfg.T_out + 1)]
        return np.stack([forward(x, model.params, cfg, times) for x in X])

    def score(self, X, y=None) -> float:
        """Negative mean relative L2 over windows derived from trajectories
        (higher is better, 0 is perfect)."""
        model = self._check_fitted()
        cfg = model.config
        X = validate_trajectories(X, min_T=cfg.T_in + cfg.T_out)
        errs = []
        for traj in X:
            pred = self.predict(traj[None, : cfg.T_in])[0]
            errs.append(relative_l2(pred, traj[cfg.T_in: cfg.T_in + cfg.T_out]))
        return -float(np.mean(errs))
