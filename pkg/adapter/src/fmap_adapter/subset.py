"""Approximate N-shot subset selection.

Satellite scenes carry many co-occurring instances, so exact-N subsets
rarely exist. Selection is greedy over whole images: repeatedly add the
image that most reduces the squared deviation of per-class instance counts
from N, stopping when no image improves it. Deterministic per seed (the seed
shuffles the candidate order used for tie-breaking); an image is never
selected twice.
"""

from __future__ import annotations

import numpy as np

from .datasets import ImageRecord


def select_n_shot(records: list[ImageRecord], class_names: list[str],
                  n: int, seed: int) -> tuple[list[ImageRecord], dict[str, int]]:
    """Greedy image subset with per-class counts near n.

    Returns the selected records (in selection order) and the final counts.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    wanted = set(class_names)
    rng = np.random.default_rng(seed)
    candidates = [records[i] for i in rng.permutation(len(records))]
    candidate_counts = []
    for rec in candidates:
        counts = {c: k for c, k in rec.class_counts().items() if c in wanted}
        candidate_counts.append(counts)

    counts = {c: 0 for c in class_names}
    selected: list[ImageRecord] = []
    used = [False] * len(candidates)

    while True:
        best_delta = 0
        best_idx = -1
        for i, rec_counts in enumerate(candidate_counts):
            if used[i] or not rec_counts:
                continue
            delta = 0
            for c, k in rec_counts.items():
                old = counts[c] - n
                new = old + k
                delta += new * new - old * old
            if delta < best_delta:
                best_delta = delta
                best_idx = i
        if best_idx < 0:
            break
        used[best_idx] = True
        selected.append(candidates[best_idx])
        for c, k in candidate_counts[best_idx].items():
            counts[c] += k

    return selected, counts
