from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from functools import lru_cache
from typing import Any, Callable, Dict, List, Mapping, TypeVar

import numpy as np

from ..config import settings
from .problems import PROBLEM_FACTORIES, ProblemInstance, build_problem

T = TypeVar("T")

# trials are split into blocks of this size, each with its own child seed
TRIAL_BLOCK = 100


@lru_cache(maxsize=64)
def _cached_problem(problem_id: str, params_key: str) -> ProblemInstance:
    return build_problem(problem_id, json.loads(params_key))


def get_problem(problem_id: str, params: Mapping[str, Any] | None = None) -> ProblemInstance:
    return _cached_problem(problem_id, json.dumps(dict(params or {}), sort_keys=True))


@lru_cache
def get_catalog() -> Dict[str, ProblemInstance]:
    return {pid: get_problem(pid) for pid in PROBLEM_FACTORIES}


def make_rng(seed: int, *path: int) -> np.random.Generator:
    """Generator for a fixed position in the seed tree of ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(path)))


def run_blocks(
    task: Callable[[np.random.Generator, int], T],
    seed: int,
    trials: int,
    jobs: int | None = None,
    stream: int = 0,
) -> List[T]:
    """Выполняет ``task(rng, n)`` по фиксированным блокам проб; результаты идут в порядке блоков."""
    blocks = max(1, math.ceil(trials / TRIAL_BLOCK))
    sizes = [min(TRIAL_BLOCK, trials - i * TRIAL_BLOCK) for i in range(blocks)]
    rngs = [make_rng(seed, stream, i) for i in range(blocks)]
    workers = jobs or settings.jobs
    if workers > 1 and blocks > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(task, rngs, sizes))
    return [task(rng, n) for rng, n in zip(rngs, sizes)]
