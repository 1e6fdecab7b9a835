"""Observable dictionaries and EDMD identification of lifted linear models.

The lifted model is ``z' = A z + B u + E w`` with ``z = g(x)``. The first
``n`` observables of every dictionary are the state coordinates, so a state
is recovered from a lifted vector by truncation.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.cluster.vq import kmeans2

from .numkit import SingularSystemError, ridge_lls

__all__ = [
    "Dictionary",
    "SnapshotDataset",
    "KoopmanModel",
    "InsufficientDataError",
    "monomial_exponents",
    "lift",
    "edmd_fit",
    "stls_select",
    "model_residual",
    "state_residual",
    "build_default_dictionary",
]


class InsufficientDataError(ValueError):
    def __init__(self, have, need):
        super().__init__(f"EDMD needs at least {need} snapshot pairs, got {have}")
        self.have = have
        self.need = need


def monomial_exponents(n, degree, min_degree=1):
    """All exponent tuples of total degree in ``[min_degree, degree]``.

    Ordered by degree, then lexicographically (descending) within a degree, so
    the degree-1 block is the identity in coordinate order and lower-degree
    lists are prefixes of higher-degree ones.
    """
    out = []
    for d in range(min_degree, degree + 1):
        block = []
        for combo in itertools.combinations_with_replacement(range(n), d):
            e = [0] * n
            for i in combo:
                e[i] += 1
            block.append(tuple(e))
        out.extend(sorted(set(block), reverse=True))
    return out


@dataclass(frozen=True)
class Dictionary:
    """Ordered observables: identity coordinates, extra monomials, then RBFs."""

    state_dim: int
    monomials: tuple = ()
    rbf_centers: tuple = ()
    rbf_widths: tuple = ()

    def __post_init__(self):
        n = self.state_dim
        mons = [tuple(int(p) for p in e) for e in self.monomials]
        ident = [tuple(int(i == j) for j in range(n)) for i in range(n)]
        # identity prefix is implicit; strip it from the extras if supplied
        extra = [e for e in mons if e not in ident]
        if any(len(e) != n for e in extra):
            raise ValueError("monomial exponent length must equal the state dimension")
        if any(sum(e) == 0 for e in extra):
            raise ValueError("constant observables are not allowed")
        if len(set(extra)) != len(extra):
            raise ValueError("duplicate monomials")
        centers = tuple(tuple(float(c) for c in cen) for cen in self.rbf_centers)
        widths = tuple(float(w) for w in self.rbf_widths)
        if len(centers) != len(widths):
            raise ValueError("one width per RBF center")
        if any(w <= 0 for w in widths):
            raise ValueError("RBF widths must be positive")
        if len(set(centers)) != len(centers):
            raise ValueError("duplicate RBF centers")
        object.__setattr__(self, "monomials", tuple(extra))
        object.__setattr__(self, "rbf_centers", centers)
        object.__setattr__(self, "rbf_widths", widths)

    @property
    def size(self):
        return self.state_dim + len(self.monomials) + len(self.rbf_centers)

    @property
    def exponents(self):
        n = self.state_dim
        ident = [tuple(int(i == j) for j in range(n)) for i in range(n)]
        return ident + list(self.monomials)

    @classmethod
    def polynomial(cls, n, degree):
        return cls(n, tuple(monomial_exponents(n, degree)))

    def with_rbfs(self, centers, width):
        centers = np.atleast_2d(centers)
        return Dictionary(self.state_dim, self.monomials, tuple(map(tuple, centers)),
                          (float(width),) * len(centers))

    def is_subset_of(self, other):
        return (self.state_dim == other.state_dim
                and set(self.monomials) <= set(other.monomials)
                and set(self.rbf_centers) <= set(other.rbf_centers))

    def describe(self):
        return {"state_dim": self.state_dim,
                "monomials": [list(e) for e in self.monomials],
                "rbf_centers": [list(c) for c in self.rbf_centers],
                "rbf_widths": list(self.rbf_widths)}

    @classmethod
    def from_description(cls, d):
        return cls(d["state_dim"], tuple(map(tuple, d["monomials"])),
                   tuple(map(tuple, d["rbf_centers"])), tuple(d["rbf_widths"]))


def lift(dictionary, x):
    """Evaluate the dictionary at ``x`` (shape ``(..., n)``) -> ``(..., N)``."""
    x = np.asarray(x, dtype=float)
    n = dictionary.state_dim
    if x.shape[-1] != n:
        raise ValueError(f"state has dimension {x.shape[-1]}, dictionary expects {n}")
    cols = [x]
    if dictionary.monomials:
        E = np.array(dictionary.monomials, dtype=int)
        powers = np.ones(x.shape[:-1] + (len(E),))
        for j in range(n):
            ej = E[:, j]
            if np.any(ej):
                powers = powers * x[..., j:j + 1] ** ej
        cols.append(powers)
    if dictionary.rbf_centers:
        C = np.array(dictionary.rbf_centers)
        s = np.array(dictionary.rbf_widths)
        d2 = np.sum((x[..., None, :] - C) ** 2, axis=-1)
        cols.append(np.exp(-d2 / (2.0 * s * s)))
    return np.concatenate(cols, axis=-1)


@dataclass
class SnapshotDataset:
    """Snapshot pairs ``(x_k, u_k, w_k) -> x_{k+1}`` sampled at ``dt``."""

    X: np.ndarray
    U: np.ndarray
    W: np.ndarray
    Y: np.ndarray
    dt: float

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.Y = np.atleast_2d(np.asarray(self.Y, dtype=float))
        K = len(self.X)
        self.U = np.asarray(self.U, dtype=float).reshape(K, -1)
        self.W = np.asarray(self.W, dtype=float).reshape(K, -1)
        if self.Y.shape != self.X.shape:
            raise ValueError("X and Y must have matching shapes")
        for name in ("X", "U", "W", "Y"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"snapshot array {name} has non-finite entries")

    def __len__(self):
        return len(self.X)

    @property
    def n(self):
        return self.X.shape[1]

    @property
    def m(self):
        return self.U.shape[1]

    @property
    def k(self):
        return self.W.shape[1]

    @classmethod
    def from_trajectories(cls, trajs, transform=None):
        """Pairs from consecutive samples of each trajectory.

        ``transform(x_k, x_{k+1}, traj_index)`` may re-anchor each pair (for
        example to a translated frame) and must return both states.
        """
        Xs, Us, Ws, Ys = [], [], [], []
        dt = None
        for i, tr in enumerate(trajs):
            if tr.failed:
                continue
            X, Y = tr.x[:-1], tr.x[1:]
            if transform is not None:
                X, Y = transform(X, Y, i)
            Xs.append(X)
            Ys.append(Y)
            Us.append(tr.u[:-1])
            Ws.append(tr.w[:-1])
            dt = float(tr.t[1] - tr.t[0])
        return cls(np.vstack(Xs), np.vstack(Us), np.vstack(Ws), np.vstack(Ys), dt)

    def subset(self, idx):
        return SnapshotDataset(self.X[idx], self.U[idx], self.W[idx], self.Y[idx], self.dt)

    def split(self, frac, seed=0):
        rng = np.random.default_rng(seed)
        perm = rng.permutation(len(self))
        cut = int(round(frac * len(self)))
        return self.subset(np.sort(perm[:cut])), self.subset(np.sort(perm[cut:]))


@dataclass
class KoopmanModel:
    dictionary: Dictionary
    A: np.ndarray
    B: np.ndarray
    E: np.ndarray
    residual_eps: float
    ridge_rho: float
    dt: float = 0.02
    meta: dict = field(default_factory=dict)

    @property
    def n(self):
        return self.dictionary.state_dim

    @property
    def N(self):
        return self.dictionary.size

    def lift(self, x):
        return lift(self.dictionary, x)

    def step(self, z, u, w=None):
        z = np.asarray(z, dtype=float)
        out = z @ self.A.T + np.asarray(u, dtype=float) @ self.B.T
        if w is not None:
            out = out + np.asarray(w, dtype=float) @ self.E.T
        return out

    def project(self, z):
        return np.asarray(z)[..., :self.n]

    def spectral_radius(self):
        return float(np.max(np.abs(np.linalg.eigvals(self.A))))

    def to_json(self):
        return json.dumps({
            "kind": "koopman",
            "dictionary": self.dictionary.describe(),
            "A": self.A.tolist(), "B": self.B.tolist(), "E": self.E.tolist(),
            "residual_eps": self.residual_eps, "ridge_rho": self.ridge_rho,
            "dt": self.dt, "meta": self.meta,
        }, indent=1)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        N = d["dictionary"]["state_dim"] + len(d["dictionary"]["monomials"]) \
            + len(d["dictionary"]["rbf_centers"])
        shaped = [np.array(d[k], dtype=float).reshape(N, -1) for k in "ABE"]
        return cls(Dictionary.from_description(d["dictionary"]), *shaped,
                   d["residual_eps"], d["ridge_rho"], d["dt"], d.get("meta", {}))


def _regressors(dictionary, data):
    Z = lift(dictionary, data.X)
    return Z, np.hstack([Z, data.U, data.W]), lift(dictionary, data.Y)


def edmd_fit(data, dictionary, rho=0.0):
    """Ridge EDMD: regress ``g(x_{k+1})`` on ``[g(x_k), u_k, w_k]``."""
    N, m, k = dictionary.size, data.m, data.k
    need = N + m + k
    if len(data) < need:
        raise InsufficientDataError(len(data), need)
    _, Phi, Zp = _regressors(dictionary, data)
    try:
        X = ridge_lls(Phi, Zp, rho)
    except SingularSystemError as exc:
        raise SingularSystemError(
            f"EDMD regressors are rank deficient ({exc}); use rho > 0") from None
    G = X.T
    model = KoopmanModel(dictionary, G[:, :N], G[:, N:N + m], G[:, N + m:], 0.0, float(rho),
                         data.dt)
    model.residual_eps = model_residual(model, data)
    return model


def model_residual(model, data):
    """RMS norm of the one-step lifted prediction error over ``data``."""
    Z = model.lift(data.X)
    err = model.lift(data.Y) - (Z @ model.A.T + data.U @ model.B.T + data.W @ model.E.T)
    return float(np.sqrt(np.mean(np.sum(err * err, axis=1))))


def state_residual(model, data):
    """RMS one-step error on the original state coordinates only.

    Unlike :func:`model_residual` the target does not depend on the
    dictionary, so nested dictionaries are directly comparable.
    """
    Z = model.lift(data.X)
    Zn = Z @ model.A[:model.n].T + data.U @ model.B[:model.n].T + data.W @ model.E[:model.n].T
    E = Zn - data.Y
    return float(np.sqrt(np.mean(np.sum(E * E, axis=1))))


def model_residual_max(model, data):
    Z = model.lift(data.X)
    err = model.lift(data.Y) - (Z @ model.A.T + data.U @ model.B.T + data.W @ model.E.T)
    return float(np.sqrt(np.max(np.sum(err * err, axis=1))))


def stls_select(candidates, data, threshold, iterations=10):
    """Sequentially thresholded least squares over candidate monomials.

    The state derivative is estimated by the forward difference of each
    snapshot pair and regressed, at the pair midpoint, on the candidate
    monomials plus linear control and disturbance terms (which are never
    thresholded). Returns ``(survivors, coefficients)`` where ``survivors``
    always starts with the identity monomials and ``coefficients`` maps each
    surviving candidate to its row of fitted derivative coefficients.
    """
    n = data.n
    cands = [tuple(int(p) for p in e) for e in candidates]
    if not cands:
        raise ValueError("candidate list is empty")
    dX = (data.Y - data.X) / data.dt
    mid = 0.5 * (data.X + data.Y)
    cols = []
    for e in cands:
        cols.append(np.prod(mid ** np.array(e), axis=1))
    Theta = np.column_stack(cols)
    extra = np.hstack([data.U, data.W])
    p = len(cands)
    scale = np.linalg.norm(Theta, axis=0)
    scale[scale == 0] = 1.0
    escale = np.linalg.norm(extra, axis=0) if extra.size else np.zeros(0)
    escale[escale == 0] = 1.0

    def fit(active):
        # solve on unit-norm columns, report coefficients in original units
        L = np.hstack([Theta[:, active] / scale[active], extra / escale])
        try:
            C = ridge_lls(L, dX, 0.0)
        except SingularSystemError:
            C = ridge_lls(L, dX, 1e-10)
        full = np.zeros((p, n))
        full[active] = C[:active.sum()] / scale[active][:, None]
        return full

    active = np.ones(p, dtype=bool)
    coef = fit(active)
    for _ in range(iterations):
        keep = np.abs(coef) >= threshold
        new_active = keep.any(axis=1)
        if not new_active.any():
            raise ValueError(
                f"STLS eliminated every candidate at threshold {threshold:g}; lower the threshold")
        coef = fit(new_active)
        coef[~keep & new_active[:, None]] = 0.0
        if np.array_equal(new_active, active):
            break
        active = new_active
    active = np.abs(coef).max(axis=1) > 0
    if not active.any():
        raise ValueError(
            f"STLS eliminated every candidate at threshold {threshold:g}; lower the threshold")
    ident = [tuple(int(i == j) for j in range(n)) for i in range(n)]
    survivors = ident + [e for e, a in zip(cands, active) if a and e not in ident]
    coeffs = {e: coef[i] for i, e in enumerate(cands) if active[i]}
    return survivors, coeffs


def kmeans_centers(X, count, seed):
    X = np.asarray(X, dtype=float)
    rng = np.random.default_rng(seed)
    sample = X[rng.choice(len(X), size=min(len(X), 20000), replace=False)]
    centers, _ = kmeans2(sample, count, minit="++", seed=rng, iter=30)
    return centers


def median_pairwise_distance(C):
    C = np.atleast_2d(C)
    if len(C) < 2:
        return 1.0
    d = np.sqrt(np.sum((C[:, None, :] - C[None, :, :]) ** 2, axis=-1))
    return float(np.median(d[np.triu_indices(len(C), 1)]))


def build_default_dictionary(data, degree=3, threshold=0.05, n_rbf=8, seed=0):
    """STLS-selected monomials up to ``degree`` plus k-means RBFs.

    The RBF width is the median pairwise distance between the centers.
    """
    cands = monomial_exponents(data.n, degree)
    survivors, _ = stls_select(cands, data, threshold)
    d = Dictionary(data.n, tuple(survivors))
    if n_rbf:
        C = kmeans_centers(data.X, n_rbf, seed)
        d = d.with_rbfs(C, median_pairwise_distance(C))
    return d
