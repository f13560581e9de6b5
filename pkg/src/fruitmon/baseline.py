"""Center-distance baseline for temporal re-identification."""
from __future__ import annotations

import numpy as np

from .cloud import FruitInstance, TemporalAssociation
from .errors import ConfigError
from .metrics import MatchConfusion, f1_scores, matching_confusion


def nn_match(
    instances_t: list[FruitInstance],
    instances_prev: list[FruitInstance],
    epsilon: float,
) -> TemporalAssociation:
    """Greedy nearest-center matching: commit the globally closest pair while
    its distance is at most ``epsilon``, retiring both fruits; everything
    left over is declared new."""
    if epsilon < 0:
        raise ConfigError("epsilon must be >= 0")
    n_t, n_prev = len(instances_t), len(instances_prev)
    pairs: dict[int, int | None] = {i: None for i in range(n_t)}
    if n_t and n_prev:
        ct = np.array([i.center for i in instances_t]).reshape(-1, 3)
        cp = np.array([i.center for i in instances_prev]).reshape(-1, 3)
        dist = np.linalg.norm(ct[:, None, :] - cp[None, :, :], axis=2)
        work = dist.copy()
        for _ in range(min(n_t, n_prev)):
            i, j = np.unravel_index(int(np.argmin(work)), work.shape)
            if not np.isfinite(work[i, j]) or work[i, j] > epsilon:
                break
            pairs[int(i)] = int(j)
            work[i, :] = np.inf
            work[:, j] = np.inf
    return TemporalAssociation(pairs)


def sweep_epsilon(
    samples: list[tuple[list[FruitInstance], list[FruitInstance], TemporalAssociation]],
    grid: list[float],
) -> tuple[float, list[dict]]:
    """Evaluate the baseline over a distance-threshold grid and return the
    threshold with the best aggregate mF1 (ties go to the smaller value).
    Each sample is (instances at t, previous instances, GT association)."""
    if not grid:
        raise ConfigError("empty epsilon grid")
    curve = []
    best_eps, best_mf1 = None, -1.0
    for eps in sorted(float(e) for e in grid):
        total = MatchConfusion()
        for inst_t, inst_prev, gt in samples:
            total = total + matching_confusion(nn_match(inst_t, inst_prev, eps), gt)
        f1 = f1_scores(total)
        curve.append({"epsilon": eps, "mf1": f1.mf1,
                      "f1_positive": f1.f1_positive, "f1_negative": f1.f1_negative})
        if f1.mf1 > best_mf1:
            best_eps, best_mf1 = eps, f1.mf1
    return float(best_eps), curve
