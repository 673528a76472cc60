"""
Ensemble statistics.

An ensemble is a plain ``(M, N)`` float array, one member per row. All
members carry the implicit weight 1/M.
"""
from __future__ import annotations

import csv

import numpy as np


def as_ensemble(E) -> np.ndarray:
    E = np.asarray(E, dtype=float)
    if E.ndim == 1:
        E = E[:, None]
    if E.ndim != 2:
        raise ValueError("ensemble must be a (M, N) array")
    if E.shape[0] < 1:
        raise ValueError("ensemble is empty")
    return E


def ensemble_mean(E) -> np.ndarray:
    return as_ensemble(E).mean(axis=0)


def anomalies(E) -> np.ndarray:
    E = as_ensemble(E)
    return E - E.mean(axis=0)


def ensemble_covariance(E) -> np.ndarray:
    """Unbiased covariance (1/(M-1) normalisation), exactly symmetric."""
    E = as_ensemble(E)
    M = E.shape[0]
    if M < 2:
        raise ValueError("covariance needs at least two members")
    A = E - E.mean(axis=0)
    P = A.T @ A / (M - 1)
    return 0.5 * (P + P.T)


def inflate(E, rho: float) -> np.ndarray:
    """Multiplicative inflation of the anomalies about the ensemble mean."""
    if rho < 1:
        raise ValueError(f"inflation factor must be >= 1, got {rho}")
    E = as_ensemble(E)
    if rho == 1:
        return E.copy()
    mu = E.mean(axis=0)
    return mu + rho * (E - mu)


def rmse(series_a, series_b) -> float:
    """Root of the mean squared difference over time and components."""
    a = np.asarray(series_a, dtype=float)
    b = np.asarray(series_b, dtype=float)
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"series lengths differ: {a.shape[0]} vs {b.shape[0]}")
    if a.shape != b.shape:
        raise ValueError(f"series shapes differ: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def write_snapshot_csv(E, path) -> None:
    E = as_ensemble(E)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["member_id"] + [f"x{j + 1}" for j in range(E.shape[1])])
        for i, x in enumerate(E):
            w.writerow([i] + [repr(float(v)) for v in x])
