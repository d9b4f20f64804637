"""Small builders shared by the test modules."""

import numpy as np

from revmatch.core import AffinityMatrix, PartialSolution


def random_K(rng, n1, n2, nonneg=False, sense="max"):
    n = n1 * n2
    a = rng.uniform(0.0, 1.0, size=(n, n)) if nonneg else rng.normal(size=(n, n))
    return AffinityMatrix(n1, n2, (a + a.T) / 2.0, sense)


def random_solution(rng, n1, n2, size=None):
    m = min(n1, n2)
    k = int(rng.integers(0, m + 1)) if size is None else size
    rows = rng.choice(n1, size=k, replace=False)
    cols = rng.choice(n2, size=k, replace=False)
    return PartialSolution.from_pairs(n1, n2, zip(rows.tolist(), cols.tolist()))


def naive_adjacency_product(E, n1, n2):
    n = n1 * n2
    out = np.zeros_like(E)
    for p in range(n):
        i, a = divmod(p, n2)
        for q in range(n):
            j, b = divmod(q, n2)
            if i != j and a != b:
                out[..., p, :] += E[..., q, :]
    return out


# one line per acceptance criterion, printed by the terminal summary hook in conftest
ACCEPTANCE_LINES: list[str] = []


def report(criterion: str, ok: bool, detail: str) -> bool:
    ACCEPTANCE_LINES.append(f"{criterion:<40} {'PASS' if ok else 'FAIL'}  {detail}")
    return ok
