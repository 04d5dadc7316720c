from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor

import numpy as np


def stream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for the task identified by ``key``."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key)))


def run_indexed(fn, args: list, workers: int = 1) -> list:
    """``[fn(a) for a in args]``, optionally across processes; order preserved."""
    if workers is None or workers <= 0:
        workers = os.cpu_count() or 1
    if workers == 1 or len(args) < 2:
        return [fn(a) for a in args]
    chunk = max(1, len(args) // (4 * workers))
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, args, chunksize=chunk))
