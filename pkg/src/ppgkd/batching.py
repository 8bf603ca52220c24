"""Deterministic minibatch index generation."""

from __future__ import annotations

import logging
from typing import Iterator

import numpy as np

from .errors import ConfigError, InsufficientDataError

log = logging.getLogger(__name__)


def shuffled_batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Shuffle ``range(n)`` and yield consecutive batches.

    A trailing batch of one element is dropped (contrastive and relation
    terms are degenerate on a single pair).
    """
    if batch_size < 2:
        raise ConfigError("batch_size must be >= 2")
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        if len(idx) < 2:
            log.warning("skipping a minibatch of size %d", len(idx))
            continue
        yield idx


def pk_batches(labels: np.ndarray, p: int, k: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """One epoch of P-subjects x K-segments batches.

    Every subject's segments are shuffled and dealt out in groups of ``k``;
    each batch draws ``p`` distinct subjects among those with a group left,
    so each batch holds in-batch positives and negatives. Leftover segments
    that do not fill a group of ``k`` are skipped for the epoch.
    """
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise InsufficientDataError("P x K batching needs at least two subjects")
    p = min(p, len(classes))
    groups: dict[int, list[np.ndarray]] = {}
    for c in classes:
        idx = rng.permutation(np.flatnonzero(labels == c))
        groups[int(c)] = [idx[i : i + k] for i in range(0, len(idx) - k + 1, k)]
    while True:
        avail = [c for c in groups if groups[c]]
        if len(avail) < 2:
            return
        chosen = rng.choice(avail, size=min(p, len(avail)), replace=False)
        yield np.concatenate([groups[int(c)].pop() for c in chosen])
