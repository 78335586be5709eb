"""Pure numpy herding loop, used when the compiled kernel is unavailable."""
from __future__ import annotations

import numpy as np

# squared distances within this relative gap of the minimum count as ties
TIE_REL = 1e-9
TIE_ABS = 1e-18


def herding_order(features: np.ndarray, mu: np.ndarray, budget: int) -> np.ndarray:
    n, d = features.shape
    m = min(budget, n)
    order = np.empty(m, dtype=np.int64)
    running = np.zeros(d)
    taken = np.zeros(n, dtype=bool)
    for j in range(m):
        diff = mu - (running + features) / (j + 1)
        dist = np.einsum("ij,ij->i", diff, diff)
        dist[taken] = np.inf
        low = dist.min()
        best = int(np.flatnonzero(dist <= low + TIE_REL * low + TIE_ABS)[0])
        taken[best] = True
        order[j] = best
        running += features[best]
    return order
