"""Balanced accuracy and stratified partitioning.

Throughout the package the positive class is *fail* (encoded as 1).
"""

from __future__ import annotations

from collections import defaultdict
from typing import Hashable, Sequence

import numpy as np

from .errors import DataError


def confusion_counts(predictions, labels) -> dict[str, int]:
    pred = np.asarray(predictions).astype(bool)
    true = np.asarray(labels).astype(bool)
    if pred.shape != true.shape:
        raise DataError(f"predictions {pred.shape} and labels {true.shape} differ in shape")
    return {
        "tp": int(np.sum(pred & true)),
        "fn": int(np.sum(~pred & true)),
        "tn": int(np.sum(~pred & ~true)),
        "fp": int(np.sum(pred & ~true)),
    }


def balanced_accuracy(predictions, labels) -> float:
    """Mean of the true-positive and true-negative rates (fail = positive)."""
    c = confusion_counts(predictions, labels)
    pos, neg = c["tp"] + c["fn"], c["tn"] + c["fp"]
    if pos == 0 or neg == 0:
        raise DataError("BAC undefined: labels contain a single class")
    return (c["tp"] / pos + c["tn"] / neg) / 2.0


def accuracy(predictions, labels) -> float:
    c = confusion_counts(predictions, labels)
    total = sum(c.values())
    return (c["tp"] + c["tn"]) / total if total else 0.0


def _groups(items: Sequence, keys: Sequence[Hashable], seed: int):
    if len(items) != len(keys):
        raise DataError("items and stratification keys differ in length")
    groups = defaultdict(list)
    for item, key in zip(items, keys):
        groups[key].append(item)
    rng = np.random.default_rng(seed)
    out = []
    for key in sorted(groups, key=repr):
        members = sorted(groups[key], key=repr)
        perm = rng.permutation(len(members))
        out.append((key, [members[i] for i in perm]))
    return out, rng


def stratified_split(items: Sequence, keys: Sequence[Hashable], fractions: Sequence[float],
                     seed: int = 0) -> list[list]:
    """Partition ``items`` so every stratum is split in proportion to ``fractions``.

    Each stratum gets ``floor(f * n)`` members per partition; leftover members go
    to the partitions with the largest fractional remainders, ties broken by a
    seeded permutation. Output partitions are sorted.
    """
    fractions = np.asarray(fractions, dtype=np.float64)
    if np.any(fractions < 0) or abs(fractions.sum() - 1.0) > 1e-9:
        raise DataError(f"fractions must be non-negative and sum to 1, got {fractions.tolist()}")
    n_parts = int(np.count_nonzero(fractions))
    groups, rng = _groups(items, keys, seed)
    parts: list[list] = [[] for _ in fractions]
    for key, members in groups:
        n = len(members)
        if n < n_parts:
            raise DataError(f"stratum {key!r} has {n} members, fewer than {n_parts} partitions")
        exact = fractions * n
        counts = np.floor(exact + 1e-9).astype(int)
        leftover = n - counts.sum()
        tiebreak = rng.permutation(len(fractions))
        order = sorted(range(len(fractions)),
                       key=lambda i: (-(exact[i] - counts[i]), tiebreak[i]))
        for i in order[:leftover]:
            counts[i] += 1
        start = 0
        for i, k in enumerate(counts):
            parts[i].extend(members[start:start + k])
            start += k
    return [sorted(p, key=repr) for p in parts]


def stratified_kfold(items: Sequence, keys: Sequence[Hashable], k: int, seed: int = 0) -> list[list]:
    """k disjoint folds covering ``items``; per-stratum counts differ by at most one."""
    if k < 2:
        raise DataError("k-fold needs k >= 2")
    groups, rng = _groups(items, keys, seed)
    folds: list[list] = [[] for _ in range(k)]
    offset = 0
    for key, members in groups:
        if len(members) < k:
            raise DataError(f"stratum {key!r} has {len(members)} members, fewer than {k} folds")
        # rotate the starting fold so remainders spread across folds
        for j, m in enumerate(members):
            folds[(offset + j) % k].append(m)
        offset = (offset + len(members)) % k
    return [sorted(f, key=repr) for f in folds]
