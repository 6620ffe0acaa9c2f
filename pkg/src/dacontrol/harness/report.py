"""Regret accounting, growth-shape fits, and deterministic file writers."""
from __future__ import annotations

import json
from typing import Dict, Iterable, List

import numpy as np


def fit_regret_shapes(ts: np.ndarray, regret: np.ndarray) -> dict:
    """Least-squares fits of a + b log^2 t (two parameters) and c sqrt(t) (one).

    Returns coefficients and residual sums of squares for both families; the
    log-squared family winning by RSS is the logarithmic-growth signature.
    """
    ts = np.asarray(ts, dtype=float)
    regret = np.asarray(regret, dtype=float)
    log_sq = np.log(ts) ** 2
    design = np.stack([np.ones_like(ts), log_sq], axis=1)
    coef, *_ = np.linalg.lstsq(design, regret, rcond=None)
    rss_log = float(np.sum((regret - design @ coef) ** 2))
    root = np.sqrt(ts)
    c = float(root @ regret / (root @ root))
    rss_sqrt = float(np.sum((regret - c * root) ** 2))
    return {
        "log2": {"a": float(coef[0]), "b": float(coef[1]), "rss": rss_log},
        "sqrt": {"c": c, "rss": rss_sqrt},
    }


def power_of_two_checkpoints(lo: int, hi: int) -> List[int]:
    out = []
    t = 1
    while t <= hi:
        if t >= lo:
            out.append(t)
        t *= 2
    return out


def comment_block(text: str) -> List[str]:
    return ["# " + line for line in text.rstrip("\n").split("\n")]


def write_csv(path, header_comments: Iterable[str], col_names: List[str], columns: List[np.ndarray]) -> None:
    """Deterministic CSV: repr floats, LF newlines, comment header."""
    rows = len(columns[0])
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in header_comments:
            fh.write(line + "\n")
        fh.write(",".join(col_names) + "\n")
        for i in range(rows):
            fh.write(",".join(_cell(col[i]) for col in columns) + "\n")


def _cell(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_json(path, payload: Dict) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")


def write_tsv(path, header_comments: Iterable[str], col_names: List[str], columns: List[np.ndarray]) -> None:
    rows = len(columns[0])
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in header_comments:
            fh.write(line + "\n")
        fh.write("\t".join(col_names) + "\n")
        for i in range(rows):
            fh.write("\t".join(_cell(col[i]) for col in columns) + "\n")


def build_regret_entry(
    learner_mean: np.ndarray,
    comparator_mean: np.ndarray,
    fit_lo: int,
) -> dict:
    """Cumulative regret series against one comparator plus its shape fits."""
    regret = np.cumsum(learner_mean - comparator_mean)
    T = regret.shape[0]
    lo = max(1, min(fit_lo, max(2, T // 2), T))
    ts = np.arange(lo, T + 1)
    fits = fit_regret_shapes(ts, regret[lo - 1 :])
    checkpoints = power_of_two_checkpoints(lo, T)
    return {
        "cumulative_regret": [float(v) for v in regret],
        "fit_window": [int(lo), int(T)],
        "fits": fits,
        "regret_over_sqrt_t": {
            str(t): float(regret[t - 1] / np.sqrt(t)) for t in checkpoints
        },
    }
