"""Probability mass over tracked candidates and its exponential-weight update."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

NORMALIZATION_TOL = 1e-9


class DistributionError(ValueError):
    pass


@dataclass(frozen=True)
class SearchConfig:
    lam: float = 2.0
    pool_size: int = 8
    exploration_fraction: float = 0.25
    newcomer_mass: float = 0.4
    survivors: int | None = None

    def __post_init__(self):
        if not self.lam >= 0:
            raise DistributionError("lambda must be >= 0")
        if self.pool_size < 1:
            raise DistributionError("pool_size must be >= 1")
        if not 0.0 <= self.exploration_fraction <= 1.0:
            raise DistributionError("exploration_fraction must lie in [0, 1]")
        if not 0.0 < self.newcomer_mass < 1.0:
            raise DistributionError("newcomer_mass must lie in (0, 1)")
        if self.survivors is not None and not 1 <= self.survivors <= self.pool_size:
            raise DistributionError("survivors must lie in [1, pool_size]")

    @property
    def survivor_count(self) -> int:
        """Candidates carried into the next pool; the rest of the pool is fresh proposals."""
        if self.survivors is not None:
            return self.survivors
        return max(1, self.pool_size // 2)


@dataclass(frozen=True)
class CandidateDistribution:
    entries: Mapping[str, float] = field(default_factory=dict)
    iteration: int = 0

    def __post_init__(self):
        if not self.entries:
            raise DistributionError("distribution must have at least one entry")
        if any(not m >= 0 for m in self.entries.values()):
            raise DistributionError("masses must be non-negative")
        total = math.fsum(self.entries.values())
        if abs(total - 1.0) > NORMALIZATION_TOL:
            raise DistributionError(f"masses sum to {total!r}, not 1")

    @classmethod
    def point(cls, cid: str, iteration: int = 0) -> "CandidateDistribution":
        return cls({cid: 1.0}, iteration)

    @classmethod
    def uniform(cls, ids: Sequence[str], iteration: int = 0) -> "CandidateDistribution":
        return cls({i: 1.0 / len(ids) for i in ids}, iteration)

    def __getitem__(self, cid: str) -> float:
        return self.entries[cid]

    def __contains__(self, cid: str) -> bool:
        return cid in self.entries

    def __len__(self):
        return len(self.entries)

    def ranked(self) -> list[str]:
        """Ids by descending mass, ties by ascending id."""
        return sorted(self.entries, key=lambda c: (-self.entries[c], c))


def _normalize_log(ids: list[str], logw: np.ndarray) -> dict[str, float]:
    finite = np.isfinite(logw)
    if not finite.any():
        raise DistributionError("posterior underflowed to zero everywhere")
    top = logw[finite].max()
    w = np.exp(logw - top)  # -inf -> 0
    # fsum is correctly rounded, so the result does not depend on entry order
    # (a resumed run reloads entries sorted by id)
    z = math.fsum(w.tolist())
    return {c: float(x) / z for c, x in zip(ids, w.tolist())}


def gibbs_update(
    dist: CandidateDistribution,
    deltas: Mapping[str, float],
    lam: float,
    stale: Mapping[str, float] | None = None,
) -> CandidateDistribution:
    """Reweight masses by ``exp(-lam * delta)`` and renormalize globally.

    ``deltas`` holds fresh values for the evaluated pool. Candidates outside
    the pool are weighted by their entry in ``stale`` (their last known
    delta) or by 1.0 if they were never evaluated. ``lam == 0`` returns the
    input unchanged.
    """
    if lam < 0:
        raise DistributionError("lambda must be >= 0")
    unknown = set(deltas) - set(dist.entries)
    if unknown:
        raise DistributionError(f"deltas for untracked candidates: {sorted(unknown)[:3]}")
    if lam == 0:
        return CandidateDistribution(dict(dist.entries), dist.iteration + 1)
    stale = stale or {}
    ids = sorted(dist.entries)
    d = np.array([deltas[c] if c in deltas else stale.get(c, 1.0) for c in ids], dtype=float)
    with np.errstate(divide="ignore"):
        logm = np.log(np.array([dist.entries[c] for c in ids], dtype=float))
    return CandidateDistribution(_normalize_log(ids, logm - lam * d), dist.iteration + 1)


def admit_candidates(
    dist: CandidateDistribution, new_ids: Sequence[str], cfg: SearchConfig
) -> CandidateDistribution:
    """Give ``new_ids`` an equal share of ``cfg.newcomer_mass``; scale the rest down."""
    new_ids = list(dict.fromkeys(new_ids))
    if not new_ids:
        return dist
    clash = set(new_ids) & set(dist.entries)
    if clash:
        raise DistributionError(f"already tracked: {sorted(clash)[:3]}")
    keep = 1.0 - cfg.newcomer_mass
    share = cfg.newcomer_mass / len(new_ids)
    entries = {c: m * keep for c, m in dist.entries.items()}
    entries.update({c: share for c in new_ids})
    return CandidateDistribution(entries, dist.iteration)


def select_pool(
    dist: CandidateDistribution,
    cfg: SearchConfig,
    rng_seed,
    incumbent: str | None = None,
    size: int | None = None,
) -> list[str]:
    """Pick the evaluation pool: top candidates by mass plus a uniform sample.

    ``size`` overrides ``cfg.pool_size`` (the orchestrator asks for the
    survivor count). The incumbent, if given, always makes the cut.
    """
    size = cfg.pool_size if size is None else size
    if size < 1:
        raise DistributionError("pool size must be >= 1")
    ranked = dist.ranked()
    size = min(size, len(ranked))
    n_explore = int(math.floor(cfg.exploration_fraction * size + 1e-12))
    n_top = size - n_explore
    top = ranked[:n_top]
    rest = ranked[n_top:]
    explore: list[str] = []
    if n_explore:
        rng = np.random.default_rng(rng_seed)
        picks = rng.choice(len(rest), size=n_explore, replace=False)
        explore = [rest[i] for i in picks]
    pool = top + explore
    if incumbent is not None and incumbent not in pool:
        if incumbent not in dist:
            raise DistributionError("incumbent is not tracked")
        if top:
            top[-1] = incumbent
        else:
            explore[-1] = incumbent
        pool = top + explore
    return pool
