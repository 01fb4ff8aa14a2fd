"""Cohort identifiability probe and a 2-D principal-component projection."""

from __future__ import annotations

import warnings

import numpy as np
from sklearn.exceptions import ConvergenceWarning
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import StratifiedKFold
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from .metrics import auroc

MIN_PER_COHORT = 30


def cohort_probe(X, cohort_ids, seed: int = 0, n_splits: int = 5, C: float = 1.0) -> float:
    """Macro one-vs-rest AUROC of a cross-validated logistic probe for cohort.

    AUROC is computed inside each stratified fold and averaged over folds,
    then over cohorts. 0.5 means the embeddings carry no linearly decodable
    cohort information; 1.0 means cohorts are perfectly separable.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(cohort_ids).ravel()
    cohorts, counts = np.unique(y, return_counts=True)
    if cohorts.size < 2:
        raise ValueError("cohort probe needs at least two cohorts")
    small = cohorts[counts < MIN_PER_COHORT]
    if small.size:
        raise ValueError(f"cohorts {small.tolist()} have fewer than {MIN_PER_COHORT} samples")

    folds = StratifiedKFold(n_splits=n_splits, shuffle=True, random_state=seed)
    per_cohort = {int(c): [] for c in cohorts}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        for tr, te in folds.split(X, y):
            for c in cohorts:
                target = (y == c).astype(int)
                model = make_pipeline(StandardScaler(), LogisticRegression(C=C, max_iter=2000))
                model.fit(X[tr], target[tr])
                scores = model.decision_function(X[te])
                per_cohort[int(c)].append(auroc(scores, target[te]))
    return float(np.mean([np.mean(v) for v in per_cohort.values()]))


def pca2d(X) -> tuple[np.ndarray, np.ndarray]:
    """Top-two principal-component scores and their explained-variance fractions.

    Each component is signed so its largest-magnitude loading is positive.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 3:
        raise ValueError("pca2d needs at least three samples")
    Xc = X - X.mean(axis=0)
    cov = Xc.T @ Xc / (X.shape[0] - 1)
    total = np.trace(cov)
    if not total > 1e-300:
        raise ValueError("zero total variance")
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:2]
    vals, vecs = vals[order], vecs[:, order]
    for j in range(vecs.shape[1]):
        if vecs[np.argmax(np.abs(vecs[:, j])), j] < 0:
            vecs[:, j] = -vecs[:, j]
    coords = Xc @ vecs
    if coords.shape[1] < 2:
        coords = np.column_stack([coords, np.zeros(len(coords))])
        vals = np.append(vals, 0.0)
    return coords, np.clip(vals, 0, None) / total
