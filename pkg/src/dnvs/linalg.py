"""Small dense linear algebra routines used by registration and analysis.

All of these are authored directly (cyclic Jacobi for symmetric 3x3 eigen,
SVD built on it, power iteration with deflation for top principal
components) so their behaviour is easy to pin down in tests.
"""

from __future__ import annotations

import numpy as np

__all__ = ["sym_eigen_3x3", "svd_3x3", "pca_top_k"]


def sym_eigen_3x3(A: np.ndarray, tol: float = 1e-14, max_sweeps: int = 50):
    """Eigen-decomposition of a symmetric 3x3 matrix by cyclic Jacobi.

    Returns (eigvals, eigvecs) with eigenvalues sorted descending and
    eigvecs[:, i] the unit eigenvector for eigvals[i].
    """
    A = np.asarray(A, dtype=np.float64)
    if A.shape != (3, 3):
        raise ValueError(f"expected 3x3 matrix, got {A.shape}")
    if not np.allclose(A, A.T, atol=1e-10 * max(1.0, np.abs(A).max())):
        raise ValueError("matrix is not symmetric")
    D = A.copy()
    V = np.eye(3)
    for _ in range(max_sweeps):
        off = np.sqrt(D[0, 1] ** 2 + D[0, 2] ** 2 + D[1, 2] ** 2)
        if off < tol * max(1.0, np.abs(np.diag(D)).max()):
            break
        for p, q in ((0, 1), (0, 2), (1, 2)):
            if D[p, q] == 0.0:
                continue
            # classic Jacobi rotation annihilating D[p, q]
            theta = (D[q, q] - D[p, p]) / (2.0 * D[p, q])
            t = np.sign(theta) / (np.abs(theta) + np.sqrt(theta * theta + 1.0))
            if theta == 0.0:
                t = 1.0
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            J = np.eye(3)
            J[p, p] = c
            J[q, q] = c
            J[p, q] = s
            J[q, p] = -s
            D = J.T @ D @ J
            V = V @ J
    vals = np.diag(D).copy()
    order = np.argsort(vals)[::-1]
    return vals[order], V[:, order]


def svd_3x3(M: np.ndarray):
    """SVD of a 3x3 matrix via eigen-decomposition of M^T M.

    Returns (U, S, Vt) with M = U @ diag(S) @ Vt, singular values
    descending and non-negative. Columns of U for near-zero singular
    values are completed by cross products so U stays orthogonal.
    """
    M = np.asarray(M, dtype=np.float64)
    if M.shape != (3, 3):
        raise ValueError(f"expected 3x3 matrix, got {M.shape}")
    _, V = sym_eigen_3x3(M.T @ M)
    # norms of M v_i recover singular values without the accuracy loss of
    # sqrt(eig(M^T M)) for the small ones
    W = M @ V
    S = np.linalg.norm(W, axis=0)
    scale = max(S[0], 1.0)
    U = np.zeros((3, 3))
    filled = [i for i in range(3) if S[i] > 1e-12 * scale]
    for i in filled:
        U[:, i] = W[:, i] / S[i]
    # columns for (near-)zero singular values: any orthonormal completion
    missing = [i for i in range(3) if i not in filled]
    if len(missing) == 3:
        U = np.eye(3)
    elif len(missing) == 2:
        base = U[:, filled[0]]
        helper = np.array([1.0, 0.0, 0.0])
        if abs(base @ helper) > 0.9:
            helper = np.array([0.0, 1.0, 0.0])
        u1 = np.cross(base, helper)
        U[:, missing[0]] = u1 / np.linalg.norm(u1)
        u2 = np.cross(base, U[:, missing[0]])
        U[:, missing[1]] = u2 / np.linalg.norm(u2)
    elif len(missing) == 1:
        u = np.cross(U[:, filled[0]], U[:, filled[1]])
        U[:, missing[0]] = u / np.linalg.norm(u)
    return U, S, V.T


def pca_top_k(X: np.ndarray, k: int, iters: int = 100, tol: float = 1e-10,
              seed: int = 0):
    """Top-k principal directions of row-sample matrix X by power iteration.

    Centers X, then repeatedly applies the covariance (via X^T X products,
    never forming it when thin) with deflation after each recovered
    component. Iteration stops at `iters` rounds or when the Rayleigh
    quotient changes by less than `tol`.

    Returns (components, eigvals, projected): components is (k, d) with unit
    rows, eigvals the associated covariance eigenvalues, projected the
    (n, k) coordinates of the centered rows.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"expected 2-D data, got shape {X.shape}")
    n, d = X.shape
    if not 1 <= k <= d:
        raise ValueError(f"k={k} out of range for dimension {d}")
    Xc = X - X.mean(axis=0, keepdims=True)
    rng = np.random.default_rng(seed)
    comps = np.zeros((k, d))
    vals = np.zeros(k)
    denom = max(n - 1, 1)
    for c in range(k):
        # start orthogonal to recovered directions so a zero-variance
        # remainder yields a component with exactly zero projection
        while True:
            v = rng.standard_normal(d)
            for j in range(c):
                v -= (comps[j] @ v) * comps[j]
            norm = np.linalg.norm(v)
            if norm > 1e-12:
                break
        v /= norm
        lam_prev = np.inf
        for _ in range(iters):
            w = Xc.T @ (Xc @ v) / denom
            for j in range(c):  # deflate previously found directions
                w -= (comps[j] @ w) * comps[j]
            norm = np.linalg.norm(w)
            if norm < 1e-30:
                break
            v = w / norm
            lam = v @ (Xc.T @ (Xc @ v)) / denom
            if abs(lam - lam_prev) < tol:
                break
            lam_prev = lam
        comps[c] = v
        vals[c] = v @ (Xc.T @ (Xc @ v)) / denom
    return comps, vals, Xc @ comps.T
