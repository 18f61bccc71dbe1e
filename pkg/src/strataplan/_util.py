"""Shared numeric helpers: reproducible RNG streams, rounding, integer apportionment."""

from __future__ import annotations

import hashlib
import math

import numpy as np

_MASK64 = 0xFFFFFFFFFFFFFFFF


def derive_stream(seed: int, *path) -> np.random.Generator:
    """Counter-based generator keyed by ``seed`` and a stable path.

    The same (seed, path) pair always yields the same stream regardless of
    call order or parallel schedule, so independent stages and workers can
    derive their own streams without coordination.
    """
    text = "/".join(str(p) for p in path)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    words = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]
    ss = np.random.SeedSequence([int(seed) & _MASK64, *words])
    return np.random.Generator(np.random.Philox(ss))


def round_half_even(x):
    """Round to nearest integer, ties to even. Returns int for scalars."""
    if np.isscalar(x):
        return int(np.rint(x))
    return np.rint(np.asarray(x)).astype(np.int64)


def ceil_tol(x, rel: float = 1e-9):
    """Ceiling that forgives values a hair above an integer (solver roundoff)."""
    arr = np.asarray(x, dtype=float)
    out = np.ceil(arr - rel * np.maximum(1.0, np.abs(arr))).astype(np.int64)
    return int(out) if np.isscalar(x) else out


def apportion(weights: np.ndarray, total: int, minimum: int = 0) -> np.ndarray:
    """Split ``total`` into integers proportional to ``weights``.

    Largest-remainder rounding; every cell receives at least ``minimum`` and
    the result sums to ``total`` exactly.
    """
    weights = np.asarray(weights, dtype=float)
    if np.any(weights < 0) or weights.sum() <= 0:
        raise ValueError("apportion weights must be nonnegative with positive sum")
    n = len(weights)
    if total < minimum * n:
        raise ValueError(f"total {total} cannot cover minimum {minimum} x {n} cells")
    spare = total - minimum * n
    shares = weights / weights.sum() * spare
    base = np.floor(shares).astype(np.int64)
    short = spare - int(base.sum())
    order = np.argsort(-(shares - base), kind="stable")
    base[order[:short]] += 1
    return base + minimum


def nested_sums(values: np.ndarray, group_of: np.ndarray, n_groups: int):
    """Exact bottom-up totals: per-group fsum and the fsum of group totals.

    Using fsum at each level makes ``sum(groups) == grand`` an identity of the
    registry rather than a float coincidence.
    """
    values = np.asarray(values, dtype=float)
    group_totals = np.array(
        [math.fsum(values[group_of == g]) for g in range(n_groups)]
    )
    return group_totals, math.fsum(group_totals)
