"""MLP prediction heads trained on frozen embeddings."""

from __future__ import annotations

import copy
import itertools
from dataclasses import dataclass

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y
from torch import nn

from ..eval.metrics import auroc, mae
from .autodiff import backward
from .optim import AdamState, adam_step

HIDDEN_GRID = (32, 64, 128, 256)
AGE_PRESET = (256, 128)
SEX_PRESET = (256, 256)
TASKS = ("age-regression", "sex-classification")


@dataclass(frozen=True)
class HeadConfig:
    hidden: tuple[int, int] = AGE_PRESET
    lr: float = 1e-4
    lr_decay: float = 0.5
    plateau_epochs: int = 5
    patience: int | None = 10
    max_epochs: int = 300
    batch_size: int = 64
    grid: bool = False
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(self.hidden))
        if len(self.hidden) != 2 or any(h not in HIDDEN_GRID for h in self.hidden):
            raise ValueError(f"hidden sizes {self.hidden} must be two values from {HIDDEN_GRID}")

    @classmethod
    def preset(cls, task: str, **kw) -> "HeadConfig":
        if task not in TASKS:
            raise ValueError(f"unknown task {task!r}")
        return cls(hidden=AGE_PRESET if task == "age-regression" else SEX_PRESET, **kw)


class _MLP(nn.Module):
    def __init__(self, n_in: int, hidden: tuple[int, int], seed: int):
        super().__init__()
        gen = torch.Generator().manual_seed(int(seed))
        dims = (n_in,) + tuple(hidden) + (1,)
        self.layers = nn.ModuleList(nn.Linear(dims[i], dims[i + 1]) for i in range(len(dims) - 1))
        with torch.no_grad():
            for layer in self.layers:
                bound = 1.0 / np.sqrt(layer.in_features)
                layer.weight.copy_(torch.rand(layer.weight.shape, generator=gen) * 2 * bound - bound)
                layer.bias.copy_(torch.rand(layer.bias.shape, generator=gen) * 2 * bound - bound)

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = torch.relu(x)
        return x.squeeze(-1)


class _MLPHead(BaseEstimator):
    _task = ""

    def __init__(self, hidden=AGE_PRESET, lr=1e-4, lr_decay=0.5, plateau_epochs=5, patience=10,
                 max_epochs=300, batch_size=64, seed=0):
        self.hidden = hidden
        self.lr = lr
        self.lr_decay = lr_decay
        self.plateau_epochs = plateau_epochs
        self.patience = patience
        self.max_epochs = max_epochs
        self.batch_size = batch_size
        self.seed = seed

    # subclasses map raw targets to training targets and score validation output
    def _encode_target(self, y):
        raise NotImplementedError

    def _loss(self, out, target):
        raise NotImplementedError

    def _val_score(self, out, y) -> float:
        """Higher is better."""
        raise NotImplementedError

    def fit(self, X, y, eval_set=None):
        """Train with minibatch Adam.

        With ``eval_set=(X_val, y_val)`` the weights with the best validation
        score are kept; the learning rate is decayed after ``plateau_epochs``
        stagnant epochs and training stops after ``patience`` of them.
        """
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        if X.shape[0] == 0:
            raise ValueError("empty training split")
        self._check_targets(y)
        self.x_mean_ = X.mean(axis=0)
        self.x_scale_ = X.std(axis=0)
        self.x_scale_[self.x_scale_ < 1e-12] = 1.0
        target = torch.from_numpy(self._encode_target(y).astype(np.float32))
        xt = torch.from_numpy(self._scale(X))
        if eval_set is not None:
            Xv, yv = check_X_y(*eval_set, dtype=np.float64, y_numeric=True)
            xv = torch.from_numpy(self._scale(Xv))

        self.net_ = _MLP(X.shape[1], tuple(self.hidden), self.seed)
        params = dict(self.net_.named_parameters())
        state = AdamState()
        rng = np.random.default_rng(self.seed)
        lr = self.lr
        best, best_state, stale, since_decay = -np.inf, None, 0, 0
        self.history_ = []
        for epoch in range(self.max_epochs):
            order = rng.permutation(len(xt))
            for s in range(0, len(order), self.batch_size):
                idx = torch.from_numpy(order[s : s + self.batch_size])
                loss = self._loss(self.net_(xt[idx]), target[idx])
                adam_step(state, params, backward(loss, params), lr)
            if eval_set is None:
                continue
            with torch.no_grad():
                score = self._val_score(self.net_(xv).numpy(), yv)
            self.history_.append(score)
            if score > best:
                best, best_state, stale, since_decay = score, copy.deepcopy(self.net_.state_dict()), 0, 0
            else:
                stale += 1
                since_decay += 1
                if since_decay >= self.plateau_epochs:
                    lr *= self.lr_decay
                    since_decay = 0
                if self.patience is not None and stale >= self.patience:
                    break
        if best_state is not None:
            self.net_.load_state_dict(best_state)
            self.best_score_ = best
        self.n_epochs_ = epoch + 1
        return self

    def _check_targets(self, y):
        pass

    def _scale(self, X) -> np.ndarray:
        return ((X - self.x_mean_) / self.x_scale_).astype(np.float32)

    def _raw_output(self, X) -> np.ndarray:
        check_is_fitted(self, "net_")
        X = check_array(X, dtype=np.float64)
        with torch.no_grad():
            return self.net_(torch.from_numpy(self._scale(X))).numpy().astype(np.float64)


class MLPAgeRegressor(RegressorMixin, _MLPHead):
    """Two-hidden-layer MLP for age (years) trained with mean squared error.

    Targets are standardised internally and mapped back on ``predict``.
    """

    def _encode_target(self, y):
        self.y_mean_ = float(np.mean(y))
        self.y_scale_ = float(np.std(y)) or 1.0
        return (y - self.y_mean_) / self.y_scale_

    def _loss(self, out, target):
        return torch.mean((out - target) ** 2)

    def _val_score(self, out, y):
        return -mae(out * self.y_scale_ + self.y_mean_, y)

    def predict(self, X) -> np.ndarray:
        return self._raw_output(X) * self.y_scale_ + self.y_mean_


class MLPSexClassifier(ClassifierMixin, _MLPHead):
    """Two-hidden-layer MLP for binary sex (1 = male) with a logistic loss."""

    def __init__(self, hidden=SEX_PRESET, lr=1e-4, lr_decay=0.5, plateau_epochs=5, patience=10,
                 max_epochs=300, batch_size=64, seed=0):
        super().__init__(hidden, lr, lr_decay, plateau_epochs, patience, max_epochs, batch_size, seed)

    def _check_targets(self, y):
        classes = np.unique(y)
        if classes.size < 2:
            raise ValueError("sex classification needs both classes in the training labels")
        if not set(classes.tolist()) <= {0, 1}:
            raise ValueError(f"labels must be 0/1, got {classes}")
        self.classes_ = np.array([0, 1])

    def _encode_target(self, y):
        return np.asarray(y, dtype=np.float64)

    def _loss(self, out, target):
        return nn.functional.binary_cross_entropy_with_logits(out, target)

    def _val_score(self, out, y):
        return auroc(out, y)

    def decision_function(self, X) -> np.ndarray:
        return self._raw_output(X)

    def predict_proba(self, X) -> np.ndarray:
        p = 1.0 / (1.0 + np.exp(-self.decision_function(X)))
        return np.column_stack([1 - p, p])

    def predict(self, X) -> np.ndarray:
        return (self.decision_function(X) > 0).astype(int)


def make_head(task: str, cfg: HeadConfig, hidden=None):
    cls = {"age-regression": MLPAgeRegressor, "sex-classification": MLPSexClassifier}.get(task)
    if cls is None:
        raise ValueError(f"unknown task {task!r}")
    return cls(
        hidden=tuple(hidden or cfg.hidden), lr=cfg.lr, lr_decay=cfg.lr_decay, plateau_epochs=cfg.plateau_epochs,
        patience=cfg.patience, max_epochs=cfg.max_epochs, batch_size=cfg.batch_size, seed=cfg.seed,
    )


def train_head(features, labels, task: str, cfg: HeadConfig, splits):
    """Fit a head on ``splits[0]`` rows, early-stopping on ``splits[1]`` rows.

    ``splits`` holds row-index arrays ``(train, val[, ...])`` into
    ``features``. In grid mode every pair from the hidden-size grid is tried
    and the best validation metric wins. Returns ``(head, val_metric)``
    where the metric is MAE in years or AUROC.
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    tr, va = np.asarray(splits[0]), np.asarray(splits[1])
    if tr.size == 0 or va.size == 0:
        raise ValueError("empty train or validation split")
    if set(tr.tolist()) & set(va.tolist()):
        raise ValueError("train and validation splits overlap")
    candidates = list(itertools.product(HIDDEN_GRID, HIDDEN_GRID)) if cfg.grid else [cfg.hidden]
    best_head, best_score = None, -np.inf
    for hidden in candidates:
        head = make_head(task, cfg, hidden).fit(X[tr], y[tr], eval_set=(X[va], y[va]))
        if head.best_score_ > best_score:
            best_head, best_score = head, head.best_score_
    metric = -best_score if task == "age-regression" else best_score
    return best_head, metric
