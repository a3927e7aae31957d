"""Dense factorization kernels.

Full SVD via cyclic-Jacobi eigendecomposition of the Gram matrix, spectral
norms via power iteration, Tucker-2 fitting for conv kernels (HOSVD init +
alternating updates), CP fitting for matrices (alternating least squares),
and a spectral-gap regularizer. Everything is float64, deterministic, and
sized for matrices up to a few hundred per dimension.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "SvdFactors",
    "Tucker2Factors",
    "CpFactors",
    "svd_full",
    "spectral_norm",
    "tucker2_fit",
    "cp_fit",
    "spectral_gap_penalty",
]


def _as_matrix(w, name="w"):
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {w.shape}")
    if w.shape[0] == 0 or w.shape[1] == 0:
        raise ValueError(f"{name} must be non-empty, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise ValueError(f"{name} contains non-finite entries")
    return w


def _as_tensor4(w, name="w"):
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 4:
        raise ValueError(f"{name} must be 4-D (c_out, c_in, h, w), got shape {w.shape}")
    if min(w.shape) == 0:
        raise ValueError(f"{name} must be non-empty, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise ValueError(f"{name} contains non-finite entries")
    return w


@dataclass
class SvdFactors:
    """Full-rank SVD of a weight matrix: w = u @ diag(sigma) @ v.T.

    u is (m, r), sigma is (r,) non-negative descending, v is (n, r),
    with r = min(m, n). Columns of u and v are orthonormal.
    """

    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray

    @property
    def rank_cap(self):
        return self.sigma.shape[0]


@dataclass
class Tucker2Factors:
    """Channel-mode Tucker decomposition of a conv kernel.

    kernel ~= einsum('rshw,or,is->oihw', core, u_out, u_in)
    u_out is (c_out, r_out), u_in is (c_in, r_in), both orthonormal columns;
    core is (r_out, r_in, h, w).
    """

    u_out: np.ndarray
    core: np.ndarray
    u_in: np.ndarray


@dataclass
class CpFactors:
    """Rank-r CP form of a matrix: w ~= a1 @ diag(weights) @ a2.T.

    Factor columns are unit-norm; weights are non-negative and sorted
    descending (stable tie-break on column index).
    """

    weights: np.ndarray
    a1: np.ndarray
    a2: np.ndarray


def _jacobi_eigh(s, tol=1e-14, max_sweeps=40):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns (eigvals, eigvecs) with eigvals sorted descending and eigvecs'
    columns the matching eigenvectors. Sweeps run until the off-diagonal
    Frobenius mass falls below tol relative to the total, or max_sweeps.
    """
    s = np.array(s, dtype=np.float64, copy=True)
    n = s.shape[0]
    v = np.eye(n)
    if n == 1:
        return s.ravel().copy(), v
    fro = np.linalg.norm(s)
    if fro == 0.0:
        return np.zeros(n), v
    for _ in range(max_sweeps):
        off = np.sqrt(max(0.0, np.sum(s * s) - np.sum(np.diag(s) ** 2)))
        if off <= tol * fro:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                spq = s[p, q]
                if abs(spq) <= 1e-300:
                    continue
                # symmetric Schur 2x2: choose the smaller-angle root
                tau = (s[q, q] - s[p, p]) / (2.0 * spq)
                if tau >= 0.0:
                    t = 1.0 / (tau + np.hypot(1.0, tau))
                else:
                    t = -1.0 / (-tau + np.hypot(1.0, tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                sn = t * c
                rp = s[p, :].copy()
                rq = s[q, :].copy()
                s[p, :] = c * rp - sn * rq
                s[q, :] = sn * rp + c * rq
                cp = s[:, p].copy()
                cq = s[:, q].copy()
                s[:, p] = c * cp - sn * cq
                s[:, q] = sn * cp + c * cq
                # re-symmetrize the pivot entries against roundoff
                s[p, q] = 0.0
                s[q, p] = 0.0
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - sn * vq
                v[:, q] = sn * vp + c * vq
    evals = np.diag(s).copy()
    order = np.argsort(-evals, kind="stable")
    return evals[order], v[:, order]


def svd_full(w):
    """Full SVD of a matrix via Jacobi eigendecomposition of its Gram matrix.

    Parameters
    ----------
    w : (m, n) array
        Finite, non-empty weight matrix.

    Returns
    -------
    SvdFactors
        Orthonormal u (m, r) and v (n, r), sigma (r,) descending,
        r = min(m, n), with w ~= u @ diag(sigma) @ v.T to close to
        machine precision.
    """
    w = _as_matrix(w)
    m, n = w.shape
    if m < n:
        f = svd_full(w.T)
        return SvdFactors(u=f.v, sigma=f.sigma, v=f.u)
    gram = w.T @ w
    gram = 0.5 * (gram + gram.T)
    evals, v = _jacobi_eigh(gram)
    r = n
    u = np.zeros((m, r))
    sigma = np.zeros(r)
    scale = np.sqrt(max(evals[0], 0.0))
    cutoff = max(m, n) * np.finfo(np.float64).eps * max(scale, 1.0)
    # modified Gram-Schmidt on the columns of w @ v: the residual column
    # norms are the singular values computed without Gram squaring, so rank
    # deficiency is detected at the eps level rather than sqrt(eps)
    b = w @ v
    for i in range(r):
        col = b[:, i].copy()
        for j in range(i):
            col -= (u[:, j] @ col) * u[:, j]
        si = np.linalg.norm(col)
        if si > cutoff:
            sigma[i] = si
            u[:, i] = col / si
    # deterministic orthonormal completion for the null-space columns
    basis_at = 0
    for i in range(r):
        if sigma[i] > 0.0:
            continue
        while basis_at < m:
            cand = np.zeros(m)
            cand[basis_at] = 1.0
            basis_at += 1
            for j in range(r):
                if j == i:
                    continue
                cand -= (u[:, j] @ cand) * u[:, j]
            nrm = np.linalg.norm(cand)
            if nrm > 1e-6:
                u[:, i] = cand / nrm
                break
        else:
            raise RuntimeError("failed to complete an orthonormal basis")
    order = np.argsort(-sigma, kind="stable")
    return SvdFactors(u=u[:, order], sigma=sigma[order], v=v[:, order])


def spectral_norm(w, seed=0, tol=1e-9, max_iters=100):
    """Largest singular value of a matrix by two-sided power iteration.

    Deterministic for a fixed seed. Stops on relative change <= tol between
    iterates or after max_iters. Returns 0.0 for the zero matrix.
    """
    w = _as_matrix(w)
    rng = np.random.Generator(np.random.PCG64(seed))
    v = rng.standard_normal(w.shape[1])
    nv = np.linalg.norm(v)
    if nv == 0.0:  # pragma: no cover - measure-zero under PCG64
        v = np.ones(w.shape[1])
        nv = np.linalg.norm(v)
    v /= nv
    est = 0.0
    for _ in range(max_iters):
        u = w @ v
        nu = np.linalg.norm(u)
        if nu == 0.0:
            return 0.0
        vt = w.T @ (u / nu)
        nvt = np.linalg.norm(vt)
        if nvt == 0.0:
            return 0.0
        v = vt / nvt
        prev, est = est, nvt
        if abs(est - prev) <= tol * max(est, 1e-300):
            break
    return float(est)


def _top_left_singulars(mat, r):
    """Leading r left singular vectors of mat, via the Gram-Jacobi SVD."""
    f = svd_full(mat)
    u = f.u[:, :r]
    if u.shape[1] < r:  # pragma: no cover - rank_cap >= r is checked upstream
        raise ValueError("requested more singular vectors than available")
    return u


def tucker2_fit(w4, r_out, r_in, sweeps=3):
    """Fit a channel-mode Tucker decomposition to a conv kernel.

    HOSVD initialization (leading singular vectors of the two channel-mode
    unfoldings) followed by `sweeps` rounds of alternating updates, each of
    which cannot increase the Frobenius fitting error. The spatial modes
    (h, w) are kept intact.

    Parameters
    ----------
    w4 : (c_out, c_in, h, w) array
    r_out, r_in : int
        Channel ranks, 1 <= r_out <= c_out and 1 <= r_in <= c_in.
    sweeps : int
        Alternating refinement rounds after initialization.
    """
    w4 = _as_tensor4(w4)
    c_out, c_in, _, _ = w4.shape
    if not (1 <= r_out <= c_out and 1 <= r_in <= c_in):
        raise ValueError(
            f"ranks ({r_out}, {r_in}) out of range for kernel {w4.shape}"
        )
    if sweeps < 0:
        raise ValueError("sweeps must be >= 0")
    unfold_out = w4.reshape(c_out, -1)
    unfold_in = np.transpose(w4, (1, 0, 2, 3)).reshape(c_in, -1)
    u_out = _top_left_singulars(unfold_out, r_out)
    u_in = _top_left_singulars(unfold_in, r_in)
    for _ in range(sweeps):
        contracted = np.einsum("oihw,is->oshw", w4, u_in)
        u_out = _top_left_singulars(contracted.reshape(c_out, -1), r_out)
        contracted = np.einsum("oihw,or->rihw", w4, u_out)
        u_in = _top_left_singulars(
            np.transpose(contracted, (1, 0, 2, 3)).reshape(c_in, -1), r_in
        )
    core = np.einsum("oihw,or,is->rshw", w4, u_out, u_in)
    return Tucker2Factors(u_out=u_out, core=core, u_in=u_in)


def tucker2_recompose(f):
    """Materialize the kernel represented by Tucker2Factors."""
    return np.einsum("rshw,or,is->oihw", f.core, f.u_out, f.u_in)


def cp_fit(w, r, sweeps=5):
    """Rank-r CP fit of a matrix by alternating least squares.

    Initialized from the leading r singular triplets, then refined; the
    Frobenius error is non-increasing over sweeps. Returned factor columns
    are unit-norm with the magnitudes absorbed into `weights`, sorted
    descending with a stable tie-break on column index.
    """
    w = _as_matrix(w)
    d1, d2 = w.shape
    if not (1 <= r <= min(d1, d2)):
        raise ValueError(f"rank {r} out of range for matrix {w.shape}")
    if sweeps < 0:
        raise ValueError("sweeps must be >= 0")
    f = svd_full(w)
    a = f.u[:, :r] * f.sigma[:r]
    b = f.v[:, :r]
    for _ in range(sweeps):
        # fixed b: minimize ||w - a b^T||_F over a
        a = np.linalg.lstsq(b, w.T, rcond=None)[0].T
        b = np.linalg.lstsq(a, w, rcond=None)[0].T
    na = np.linalg.norm(a, axis=0)
    nb = np.linalg.norm(b, axis=0)
    weights = na * nb
    a1 = np.array(a)
    a2 = np.array(b)
    for j in range(r):
        if na[j] > 0:
            a1[:, j] /= na[j]
        else:
            a1[:, j] = 0.0
            a1[min(j, d1 - 1), j] = 1.0
        if nb[j] > 0:
            a2[:, j] /= nb[j]
        else:
            a2[:, j] = 0.0
            a2[min(j, d2 - 1), j] = 1.0
    order = np.argsort(-weights, kind="stable")
    return CpFactors(weights=weights[order], a1=a1[:, order], a2=a2[:, order])


def cp_recompose(f):
    """Materialize the matrix represented by CpFactors."""
    return (f.a1 * f.weights) @ f.a2.T


def spectral_gap_penalty(sigma, delta):
    """Sum of hinge excesses of consecutive spectral gaps over delta.

    sum_i max(0, sigma[i] - sigma[i+1] - delta) for sigma sorted
    non-increasing. delta must be >= 0.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.ndim != 1 or sigma.shape[0] == 0:
        raise ValueError("sigma must be a non-empty vector")
    if not np.all(np.isfinite(sigma)):
        raise ValueError("sigma contains non-finite entries")
    if np.any(np.diff(sigma) > 0):
        raise ValueError("sigma must be sorted non-increasing")
    if not np.isfinite(delta) or delta < 0:
        raise ValueError("delta must be >= 0")
    if sigma.shape[0] == 1:
        return 0.0
    gaps = sigma[:-1] - sigma[1:] - delta
    return float(np.sum(np.maximum(gaps, 0.0)))
