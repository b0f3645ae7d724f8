"""ACC / AUC, video-level aggregation and grouped bootstrap intervals."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import SingleClassData, TooFewSamples


def as_labels(labels) -> np.ndarray:
    """Map labels to ints, fake=1 and real=0; accepts strings, bools or ints."""
    out = []
    for y in labels:
        if isinstance(y, str):
            if y not in ("real", "fake"):
                raise ValueError(f"bad label {y!r}")
            out.append(int(y == "fake"))
        else:
            out.append(int(y))
    return np.asarray(out, dtype=np.int64)


def compute_auc(scores, labels) -> float:
    """Probability that a random fake outscores a random real, ties counting one half."""
    s = np.asarray(scores, dtype=np.float64)
    y = as_labels(labels)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClassData("AUC needs both real and fake entries")
    ranks = rankdata(s)
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def compute_acc(scores, labels, threshold: float = 0.5) -> float:
    s = np.asarray(scores, dtype=np.float64)
    y = as_labels(labels)
    if len(s) == 0:
        raise ValueError("no entries")
    return float(np.mean((s >= threshold) == (y == 1)))


def aggregate_video(segment_scores: Sequence[float], method: str = "mean") -> float:
    s = np.asarray(segment_scores, dtype=np.float64)
    if s.size == 0:
        raise ValueError("need at least one segment score")
    if method == "mean":
        return float(s.mean())
    if method == "max":
        return float(s.max())
    if method == "median":
        return float(np.median(s))
    raise ValueError(f"unknown aggregation {method!r}")


def bootstrap_ci(
    scores,
    labels,
    metric: Callable = compute_auc,
    groups=None,
    n_boot: int = 2000,
    level: float = 0.95,
    seed: int = 0,
    min_per_class: int = 10,
    return_samples: bool = False,
):
    """Percentile interval of ``metric`` over resamples of whole groups (videos).

    Groups are resampled with replacement within each label so every replicate keeps
    the original class balance. Without ``groups`` every entry is its own group.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = as_labels(labels)
    g = np.arange(len(s)) if groups is None else np.asarray(groups)
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")

    by_class = {0: [], 1: []}
    uniq, inverse = np.unique(g, return_inverse=True)
    members = [np.flatnonzero(inverse == k) for k in range(len(uniq))]
    for idx in members:
        cls = set(y[idx].tolist())
        if len(cls) != 1:
            raise ValueError("every group must carry a single label")
        by_class[cls.pop()].append(idx)
    for c, lst in by_class.items():
        if len(lst) < min_per_class:
            raise TooFewSamples(f"{len(lst)} {'fake' if c else 'real'} groups, need {min_per_class}")

    rng = np.random.default_rng(seed)
    samples = np.empty(n_boot)
    for b in range(n_boot):
        parts = []
        for c in (0, 1):
            lst = by_class[c]
            for k in rng.integers(0, len(lst), size=len(lst)):
                parts.append(lst[k])
        idx = np.concatenate(parts)
        samples[b] = metric(s[idx], y[idx])
    alpha = (1 - level) / 2
    low, high = np.quantile(samples, [alpha, 1 - alpha])
    if return_samples:
        return float(low), float(high), samples
    return float(low), float(high)
