#!/usr/bin/env python3
"""
Monte Carlo plumbing shared by every estimator: error types, per-replica
seed streams, estimate records and the ordered replica fan-out.
"""

import math
import time
import logging
from dataclasses import dataclass, field
from functools import partial
from multiprocessing import Pool
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

import settings

logger = logging.getLogger(__name__)


class KpzLabError(Exception):
    """Base class for all laboratory errors"""


class ConfigError(KpzLabError):
    """Invalid configuration (grid, steps, replicas, horizons)"""


class DomainError(KpzLabError):
    """Mathematical domain violation (t <= 0, supercritical beta, eps outside (0,1))"""


class QueryError(KpzLabError):
    """Occupation query outside the sampled path"""


class NumericalFailure(KpzLabError):
    """Non-positive field values where a logarithm or negative power is needed"""


class MergeError(KpzLabError):
    """Manifests that cannot be merged into one comparison table"""


class ExperimentError(KpzLabError):
    """A module error annotated with the failing parameter point"""

    def __init__(self, message: str, point: Optional[Dict] = None):
        super().__init__(message)
        self.point = point or {}


# Purposes keep independent substreams apart inside one replica
PURPOSE_PATH = 0
PURPOSE_NOISE = 1
PURPOSE_FK_PATHS = 2
PURPOSE_ENDPOINT = 3


@dataclass(frozen=True)
class SeedStream:
    """
    Counter-based random substream identified by (base_seed, replica_index)

    The same pair always yields the same numbers; distinct pairs are
    statistically independent Philox keys.
    """
    base_seed: int
    replica_index: int

    def __post_init__(self):
        if self.base_seed < 0 or self.replica_index < 0:
            raise ConfigError(f"Seed stream needs nonnegative integers, got "
                              f"({self.base_seed}, {self.replica_index})")

    def generator(self, purpose: int = PURPOSE_PATH) -> np.random.Generator:
        seq = np.random.SeedSequence([int(self.base_seed), int(self.replica_index), int(purpose)])
        return np.random.Generator(np.random.Philox(seq))


def streams_for(base_seed: int, indices: Sequence[int]) -> List[SeedStream]:
    return [SeedStream(int(base_seed), int(i)) for i in indices]


@dataclass
class EstimateReport:
    """
    Result of one Monte Carlo estimate

    stderr is the sample standard deviation divided by sqrt(replicas) unless
    the producing estimator documents another rule (jackknife).
    """
    value: float
    stderr: float
    replicas: int
    parameters: Dict = field(default_factory=dict)
    wall_time: float = 0.0
    diagnostics: Dict = field(default_factory=dict)

    def to_row(self, quantity: str) -> Dict:
        """Flatten into one long-format CSV row (wall time excluded)"""
        row = {key: value for key, value in self.parameters.items()
               if isinstance(value, (int, float, str, bool)) or value is None}
        row.update({
            'quantity': quantity,
            'estimate': self.value,
            'stderr': self.stderr,
            'replicas': self.replicas,
        })
        return row

    def to_dict(self) -> Dict:
        return {
            'value': self.value,
            'stderr': self.stderr,
            'replicas': self.replicas,
            'parameters': self.parameters,
            'wall_time': self.wall_time,
            'diagnostics': self.diagnostics,
        }


def report_from_samples(samples: np.ndarray, parameters: Dict, started: float,
                        diagnostics: Optional[Dict] = None) -> EstimateReport:
    """Sample mean and standard error, reduced in fixed replica order"""
    samples = np.asarray(samples, dtype=float)
    n = samples.size
    mean = math.fsum(samples) / n
    if n > 1:
        stderr = float(np.std(samples, ddof=1)) / math.sqrt(n)
    else:
        stderr = 0.0
    return EstimateReport(
        value=mean,
        stderr=stderr,
        replicas=n,
        parameters=dict(parameters),
        wall_time=time.perf_counter() - started,
        diagnostics=dict(diagnostics or {}),
    )


def jackknife_variance(samples: np.ndarray) -> tuple:
    """
    Sample variance and its leave-one-out jackknife standard error

    Returns:
    - (variance, stderr)
    """
    x = np.asarray(samples, dtype=float)
    n = x.size
    if n < 2:
        raise ConfigError("Variance needs at least 2 replicas")
    variance = float(np.var(x, ddof=1))
    if n < 3:
        return variance, float('nan')
    total = x.sum()
    total_sq = (x * x).sum()
    loo_mean = (total - x) / (n - 1)
    loo_var = ((total_sq - x * x) - (n - 1) * loo_mean ** 2) / (n - 2)
    stderr = math.sqrt((n - 1) / n * float(np.sum((loo_var - loo_var.mean()) ** 2)))
    return variance, stderr


def combined_stderr(*reports: EstimateReport) -> float:
    return math.sqrt(sum(r.stderr ** 2 for r in reports))


def _chunks(n: int, pieces: int) -> List[range]:
    pieces = max(1, min(pieces, n))
    bounds = np.linspace(0, n, pieces + 1).astype(int)
    return [range(bounds[i], bounds[i + 1]) for i in range(pieces) if bounds[i] < bounds[i + 1]]


def _call_chunk(worker: Callable, indices: range):
    return worker(list(indices))


def run_replicas(worker: Callable[[List[int]], np.ndarray], replicas: int,
                 workers: Optional[int] = None) -> np.ndarray:
    """
    Evaluate worker over all replica indices and concatenate in index order

    Parameters:
    - worker: Picklable callable mapping a list of replica indices to an array
      whose first axis follows that list
    - replicas: Number of replicas
    - workers: Process count; defaults to KPZLAB_WORKERS

    Returns:
    - Concatenated array, identical for every worker count
    """
    if replicas < 1:
        raise ConfigError(f"Need at least one replica, got {replicas}")
    workers = settings.WORKERS if workers is None else max(1, int(workers))
    if workers == 1:
        return np.asarray(worker(list(range(replicas))))

    chunks = _chunks(replicas, workers * 4)
    logger.debug(f"Fanning {replicas} replicas over {workers} processes in {len(chunks)} chunks")
    with Pool(processes=workers) as pool:
        parts = pool.map(partial(_call_chunk, worker), chunks)
    return np.concatenate([np.asarray(p) for p in parts], axis=0)
