"""Dense linear algebra, integration and random-number kernel.

Everything here is a pure function of its inputs. Matrices are plain
``numpy.ndarray`` objects; the helpers :func:`symmetrize` and
:func:`as_real_matrix` enforce the symmetric / finite invariants at module
boundaries.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "NonConvergenceError",
    "NonFiniteError",
    "SingularSystemError",
    "symmetrize",
    "as_real_matrix",
    "sym_eig",
    "default_tol",
    "is_neg_def",
    "ridge_lls",
    "rk4_step",
    "rng_for",
    "seeded_gaussian",
]


class NonConvergenceError(RuntimeError):
    """An iterative routine hit its iteration cap."""

    def __init__(self, message, iterations):
        super().__init__(f"{message} (after {iterations} iterations)")
        self.iterations = iterations


class NonFiniteError(FloatingPointError):
    """A NaN or Inf showed up where finite values are required."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class SingularSystemError(np.linalg.LinAlgError):
    pass


def symmetrize(S):
    S = np.asarray(S, dtype=float)
    return 0.5 * (S + S.T)


def as_real_matrix(a, name="matrix"):
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if not np.all(np.isfinite(a)):
        bad = tuple(int(i) for i in np.argwhere(~np.isfinite(a))[0])
        raise NonFiniteError(f"{name} has a non-finite entry at {bad}", bad)
    return a


def _round_robin(n):
    """Pairings for one parallel Jacobi sweep (n even)."""
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        rounds.append((np.array(players[: n // 2]), np.array(players[n // 2:][::-1])))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def sym_eig(S, max_sweeps=60, rtol=None):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    The sweep uses the round-robin ordering, so each round applies ``n/2``
    disjoint plane rotations as one orthogonal similarity.

    Parameters
    ----------
    S : array_like, shape (n, n)
        Symmetric input. It is symmetrized before rotating.
    max_sweeps : int
        Sweep cap; exceeding it raises :class:`NonConvergenceError`.
    rtol : float, optional
        Stop once the off-diagonal Frobenius norm falls below
        ``rtol * ||S||_F``. Defaults to ``4 n eps``, the rounding floor of
        one rotation round.

    Returns
    -------
    eigenvalues : ndarray, shape (n,)
        Ascending.
    basis : ndarray, shape (n, n)
        Orthonormal columns; ``basis @ diag(eigenvalues) @ basis.T == S``.
    """
    A = symmetrize(as_real_matrix(S, "S"))
    n = A.shape[0]
    if A.shape != (n, n):
        raise ValueError(f"sym_eig needs a square matrix, got {A.shape}")
    if n == 1:
        return A[0].copy(), np.eye(1)

    # pad to even size with an isolated zero so round-robin pairs everything
    m = n + (n % 2)
    if m != n:
        A = np.pad(A, ((0, 1), (0, 1)))
    V = np.eye(m)
    scale = np.linalg.norm(A)
    if scale == 0.0:
        return np.zeros(n), np.eye(n)
    if rtol is None:
        rtol = 4.0 * m * np.finfo(float).eps
    rounds = _round_robin(m)
    idx = np.arange(m)

    sweeps = 0
    while True:
        off = np.linalg.norm(A - np.diag(np.diag(A)))
        if off <= rtol * scale:
            break
        if sweeps >= max_sweeps:
            raise NonConvergenceError("Jacobi eigensolver did not converge", sweeps)
        for p, q in rounds:
            apq = A[p, q]
            app = A[p, p]
            aqq = A[q, q]
            active = np.abs(apq) > 1e-300
            safe = np.where(active, apq, 1.0)
            tau = (aqq - app) / (2.0 * safe)
            t = np.sign(tau) / (np.abs(tau) + np.hypot(1.0, tau))
            t = np.where(tau == 0.0, 1.0, t)
            c = np.where(active, 1.0 / np.sqrt(1.0 + t * t), 1.0)
            s = np.where(active, t * c, 0.0)
            J = np.zeros((m, m))
            J[idx, idx] = 1.0
            J[p, p] = c
            J[q, q] = c
            J[p, q] = s
            J[q, p] = -s
            A = J.T @ A @ J
            A = 0.5 * (A + A.T)
            V = V @ J
        sweeps += 1

    w = np.diag(A).copy()
    if m != n:
        # the zero padding row is never rotated, so column n stays e_n
        w, V = w[:n], V[:n, :n]
    order = np.argsort(w, kind="stable")
    return w[order], V[:, order]


def default_tol(S):
    """Scale-aware strictness: ``1e-9 * max(1, ||S||_2)``."""
    return 1e-9 * max(1.0, float(np.max(np.abs(sym_eig(S)[0]))))


def is_neg_def(S, tol=None):
    """True iff the largest eigenvalue of ``S`` is below ``-tol``."""
    w = sym_eig(S)[0]
    if tol is None:
        tol = 1e-9 * max(1.0, float(np.max(np.abs(w))))
    return bool(w[-1] < -tol)


def ridge_lls(A, B, rho=0.0):
    """Ridge least squares ``argmin ||A X - B||_F^2 + rho ||X||_F^2``.

    Solved as an augmented least-squares problem (SVD based) instead of the
    normal equations, which would square the condition number of ``A``.
    """
    A = as_real_matrix(A, "A")
    B = np.asarray(B, dtype=float)
    vec = B.ndim == 1
    B = as_real_matrix(B.reshape(-1, 1) if vec else B, "B")
    if A.shape[0] != B.shape[0]:
        raise ValueError(f"row mismatch: A has {A.shape[0]}, B has {B.shape[0]}")
    if rho < 0:
        raise ValueError("rho must be >= 0")
    p = A.shape[1]
    if rho == 0.0:
        if np.linalg.matrix_rank(A) < p:
            raise SingularSystemError(
                "A^T A is singular; use a positive ridge parameter rho > 0")
        X = np.linalg.lstsq(A, B, rcond=None)[0]
    else:
        Aa = np.vstack([A, np.sqrt(rho) * np.eye(p)])
        Ba = np.vstack([B, np.zeros((p, B.shape[1]))])
        X = np.linalg.lstsq(Aa, Ba, rcond=None)[0]
    return X[:, 0] if vec else X


def rk4_step(f, x, t, h):
    """One classical Runge-Kutta step of ``dx/dt = f(t, x)``.

    Raises :class:`NonFiniteError` naming the first non-finite component
    of any stage derivative.
    """
    if not h > 0:
        raise ValueError("step h must be positive")
    x = np.asarray(x, dtype=float)

    def stage(tt, xx):
        d = np.asarray(f(tt, xx), dtype=float)
        if not np.all(np.isfinite(d)):
            i = int(np.flatnonzero(~np.isfinite(d.ravel()))[0])
            raise NonFiniteError(f"non-finite derivative in component {i} at t={tt:g}", i)
        return d

    k1 = stage(t, x)
    k2 = stage(t + 0.5 * h, x + 0.5 * h * k1)
    k3 = stage(t + 0.5 * h, x + 0.5 * h * k2)
    k4 = stage(t + h, x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rng_for(seed, *keys):
    """Counter-based generator for the stream ``(seed, *keys)``.

    Streams with distinct key tuples are independent, and the same tuple
    always reproduces the same stream regardless of call order.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


def seeded_gaussian(seed, shape, scale, keys=()):
    """Zero-mean Gaussian samples with diagonal covariance ``diag(scale)``.

    ``scale`` holds variances, one per entry of the last axis of ``shape``.
    """
    var = np.atleast_1d(np.asarray(scale, dtype=float))
    if np.any(var <= 0):
        raise ValueError("covariance diagonal must be positive")
    shape = tuple(np.atleast_1d(shape).astype(int))
    if shape[-1] != var.size:
        raise ValueError(f"last axis {shape[-1]} does not match covariance size {var.size}")
    return rng_for(seed, *keys).standard_normal(shape) * np.sqrt(var)
