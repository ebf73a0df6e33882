"""Shared mixture-fit machinery: k-means++ seeding, Lloyd refinement, restarts.

Initialization is greedy k-means++ (several candidates per step, keep the one
with the lowest potential) followed by Lloyd iterations; EM then starts from
the resulting hard-assignment moments. Restarts run EM to a loose tolerance
and only the winner is polished to the requested tolerance, so the winning
chain is a single EM run with a monotone likelihood trace.
"""

from __future__ import annotations

import numpy as np

from . import _kernels

# exploration phase: per-point tolerance and iteration cap before the winner
# gets polished to the caller's tolerance
LOOSE_TOL = 1e-3
LOOSE_CAP = 60
_LLOYD_CAP = 15


def derive_seed(*parts: int) -> int:
    """Stable child seed from a tuple of integers."""
    ss = np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts])
    return int(ss.generate_state(1, np.uint64)[0] & 0x7FFFFFFFFFFFFFFF)


def kmeanspp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Greedy k-means++ seeding: squared-distance sampling with a few
    candidates per step, keeping the candidate of lowest total potential."""
    n = points.shape[0]
    n_candidates = 2 + int(np.log(k)) if k > 1 else 1
    centers = np.empty((k, points.shape[1]))
    idx = int(rng.integers(n))
    centers[0] = points[idx]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = float(d2.sum())
        if total <= 1e-300:
            cand = rng.integers(n, size=n_candidates)
        else:
            cand = rng.choice(n, size=n_candidates, p=d2 / total)
        best_pot = np.inf
        best_d2 = d2
        best_i = int(cand[0])
        for ci in cand:
            nd2 = np.minimum(d2, ((points - points[int(ci)]) ** 2).sum(axis=1))
            pot = float(nd2.sum())
            if pot < best_pot:
                best_pot, best_i, best_d2 = pot, int(ci), nd2
        centers[j] = points[best_i]
        d2 = best_d2
    return centers


def lloyd(points: np.ndarray, centers: np.ndarray, max_iter: int = _LLOYD_CAP):
    """Plain k-means iterations; returns (centers, assignment)."""
    k = centers.shape[0]
    prev = None
    assign = None
    for _ in range(max_iter):
        d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assign = d2.argmin(axis=1)
        if prev is not None and np.array_equal(assign, prev):
            break
        prev = assign
        far = int(d2.min(axis=1).argmax())
        for j in range(k):
            sel = points[assign == j]
            if len(sel):
                centers[j] = sel.mean(axis=0)
            else:
                centers[j] = points[far]
    return centers, assign


def init_diag(points, k, rng, sigma_floor):
    """Seed + Lloyd + hard-assignment moments for the diagonal 2D mixture."""
    n_candidates = 2 + int(np.log(k)) if k > 1 else 1
    u_first = float(rng.random())
    uniforms = rng.random((k, n_candidates))
    return _kernels.init_diag_2d(
        np.ascontiguousarray(points), k, u_first, uniforms, _LLOYD_CAP, sigma_floor
    )


def init_full(points, m, rng, cov_floor):
    """Seed + Lloyd + hard-assignment moments for the full 3D mixture."""
    n_candidates = 2 + int(np.log(m)) if m > 1 else 1
    u_first = float(rng.random())
    uniforms = rng.random((m, n_candidates))
    return _kernels.init_full_3d(
        np.ascontiguousarray(points), m, u_first, uniforms, _LLOYD_CAP, cov_floor
    )


def fit_diag(points, k, seed, n_restarts, max_iter, tol, sigma_floor):
    """Best-of-restarts (by likelihood) EM with diagonal covariances.

    Returns (mu, sigma, phi, trace); trace holds the winning chain's
    per-iteration log-likelihoods.
    """
    n = points.shape[0]
    tol_total = tol * n
    loose_tol = max(tol_total, LOOSE_TOL * n)
    loose_cap = min(max_iter, LOOSE_CAP)
    rng = np.random.default_rng(seed)

    best = None
    for _ in range(n_restarts):
        mu, sg, phi = init_diag(points, k, rng, sigma_floor)
        trace = np.empty(max_iter)
        done = _kernels.em_diag(points, mu, sg, phi, loose_cap, loose_tol, sigma_floor, trace)
        ll = trace[done - 1]
        if best is None or ll > best[0]:
            best = (ll, mu, sg, phi, trace[:done].copy())

    _, mu, sg, phi, trace0 = best
    remaining = max_iter - len(trace0)
    if remaining > 0:
        trace1 = np.empty(remaining)
        done = _kernels.em_diag(points, mu, sg, phi, remaining, tol_total, sigma_floor, trace1)
        return mu, sg, phi, np.concatenate([trace0, trace1[:done]])
    return mu, sg, phi, trace0


def fit_full(points, m, seed, n_restarts, max_iter, tol, cov_floor):
    """Best-of-restarts (by likelihood) EM with full 3x3 covariances.

    Returns (mu, cov, phi, trace).
    """
    n = points.shape[0]
    tol_total = tol * n
    loose_tol = max(tol_total, LOOSE_TOL * n)
    loose_cap = min(max_iter, 30)
    rng = np.random.default_rng(seed)

    best = None
    for _ in range(n_restarts):
        mu, cov, phi = init_full(points, m, rng, cov_floor)
        trace = np.empty(max_iter)
        done = _kernels.em_full(points, mu, cov, phi, loose_cap, loose_tol, cov_floor, trace)
        ll = trace[done - 1]
        if best is None or ll > best[0]:
            best = (ll, mu, cov, phi, trace[:done].copy())

    _, mu, cov, phi, trace0 = best
    remaining = max_iter - len(trace0)
    if remaining > 0:
        trace1 = np.empty(remaining)
        done = _kernels.em_full(points, mu, cov, phi, remaining, tol_total, cov_floor, trace1)
        return mu, cov, phi, np.concatenate([trace0, trace1[:done]])
    return mu, cov, phi, trace0
