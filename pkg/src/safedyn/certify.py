"""Stability certificates for lifted linear and structured neural models.

Two matrix inequalities are handled here. The discrete bounded-real form

    Psi = [[A'PA - P + I, A'PE], [E'PA, E'PE - g^2 I]] < 0

bounds the gain from the disturbance ``w`` to the lifted state ``z`` by
``g``. The sector form ``Omega(A, P, lam, kappa) < 0`` is assembled exactly
as the latent-model certificate prescribes, including its ``+P`` term.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_continuous_lyapunov
from scipy.stats import qmc

from .numkit import NonConvergenceError, default_tol, is_neg_def, sym_eig, symmetrize

__all__ = [
    "Infeasible",
    "CertificationFailure",
    "IssCertificate",
    "CsodeCertificate",
    "SectorReport",
    "assemble_psi",
    "check_iss",
    "optimal_gain",
    "assemble_omega",
    "check_omega",
    "synthesize_csode_cert",
    "nn_gain",
    "sector_form",
    "verify_sector",
    "dissipation_tolerance",
    "empirical_iss_rate",
    "recertify_loop",
]


class Infeasible(Exception):
    def __init__(self, reason, best_margin=None, **info):
        msg = reason if best_margin is None else f"{reason} (best margin {best_margin:.3e})"
        super().__init__(msg)
        self.reason = reason
        self.best_margin = best_margin
        self.info = info


class CertificationFailure(Exception):
    def __init__(self, ladder, diagnosis):
        steps = ", ".join(f"{r:.3g}" for r, _ in ladder)
        super().__init__(f"no certified model up to rho={ladder[-1][0]:.3g} "
                         f"(tried {steps}); last: {diagnosis}")
        self.ladder = ladder
        self.diagnosis = diagnosis


def _sq(a, name):
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if a.shape[0] != a.shape[1]:
        raise ValueError(f"{name} must be square, got {a.shape}")
    return a


@dataclass
class IssCertificate:
    P: np.ndarray
    gamma: float
    margin: float
    tol: float
    meta: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps({"kind": "iss", "P": self.P.tolist(), "gamma": self.gamma,
                           "margin": self.margin, "tol": self.tol, "meta": self.meta}, indent=1)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(np.array(d["P"], dtype=float), d["gamma"], d["margin"], d["tol"],
                   d.get("meta", {}))


@dataclass
class CsodeCertificate:
    P: np.ndarray
    lam: float
    kappa: float
    gamma_nn: float
    margin: float
    delta_b: float = 0.0
    meta: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps({"kind": "csode", "P": self.P.tolist(), "lambda": self.lam,
                           "kappa": self.kappa, "gamma_nn": self.gamma_nn,
                           "margin": self.margin, "delta_b": self.delta_b,
                           "meta": self.meta}, indent=1)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(np.array(d["P"], dtype=float), d["lambda"], d["kappa"], d["gamma_nn"],
                   d["margin"], d.get("delta_b", 0.0), d.get("meta", {}))


@dataclass
class SectorReport:
    kappa: float
    samples_checked: int
    min_margin: float
    violations: int


def assemble_psi(A, E, P, gamma):
    A = _sq(A, "A")
    P = _sq(P, "P")
    E = np.asarray(E, dtype=float).reshape(A.shape[0], -1)
    N, k = E.shape
    if P.shape != (N, N):
        raise ValueError(f"P has shape {P.shape}, expected {(N, N)}")
    PA, PE = P @ A, P @ E
    top = np.hstack([A.T @ PA - P + np.eye(N), A.T @ PE])
    bot = np.hstack([E.T @ PA, E.T @ PE - gamma ** 2 * np.eye(k)])
    return symmetrize(np.vstack([top, bot]))


def check_iss(A, E, P, gamma, tol=None):
    """Return ``(feasible, margin)`` with margin ``= -max eig(Psi)``."""
    S = assemble_psi(A, E, P, gamma)
    margin = -float(sym_eig(S)[0][-1])
    return is_neg_def(S, tol), margin


def _spectral_radius(A):
    return float(np.max(np.abs(np.linalg.eigvals(A)))) if A.size else 0.0


def _riccati_probe(A, E, gamma, shift=0.0, max_iter=80, rtol=1e-13):
    """Minimal solution of the bounded-real Riccati equation at ``gamma``.

    Solves ``P = A'PA + (1+shift) I + A'PE (g^2 I - E'PE)^{-1} E'PA`` with the
    doubling recursion, whose iterate ``H_j`` equals the fixed-point iterate
    ``P_{2^j}`` started from zero. Returns ``None`` when the iteration leaves
    the region where ``g^2 I - E'PE`` is positive definite or diverges.
    """
    N = A.shape[0]
    k = E.shape[1]
    I = np.eye(N)
    Ak = A.copy()
    G = -(E @ E.T) / gamma ** 2
    H = (1.0 + shift) * I
    g2 = gamma ** 2 * np.eye(k)
    for it in range(max_iter):
        S = g2 - E.T @ H @ E
        if not np.all(np.isfinite(S)) or np.linalg.eigvalsh(symmetrize(S))[0] <= 0:
            return None
        W = I + G @ H
        try:
            Winv_A = np.linalg.solve(W, Ak)
            Winv_G = np.linalg.solve(W, G)
        except np.linalg.LinAlgError:
            return None
        A_next = Ak @ Winv_A
        G_next = G + Ak @ Winv_G @ Ak.T
        H_next = H + Ak.T @ H @ Winv_A
        H_next = symmetrize(H_next)
        if not np.all(np.isfinite(H_next)):
            return None
        step = np.linalg.norm(H_next - H)
        Ak, G, H = A_next, symmetrize(G_next), H_next
        if step <= rtol * np.linalg.norm(H):
            S = g2 - E.T @ H @ E
            if np.linalg.eigvalsh(symmetrize(S))[0] <= 0:
                return None
            return H
    return None


def optimal_gain(A, E, tol_bisect=1e-6, max_expand=60):
    """Smallest ``gamma`` (to relative ``tol_bisect``) making ``Psi < 0`` feasible.

    Returns an :class:`IssCertificate` whose ``P`` passes :func:`check_iss`
    at ``gamma = (1 + 10 tol_bisect) gamma*``; the certificate's ``gamma``
    field holds that slightly inflated value and ``meta['gamma_star']`` the
    bisection result.
    """
    A = _sq(A, "A")
    E = np.asarray(E, dtype=float).reshape(A.shape[0], -1)
    rho = _spectral_radius(A)
    if not rho < 1.0:
        raise Infeasible("unstable A_K", spectral_radius=rho)
    floor = tol_bisect
    enorm = float(np.linalg.norm(E, 2)) if E.size else 0.0
    hi = max(10.0 * enorm / (1.0 - rho), floor)
    probes = 0
    expansions = 0
    while _riccati_probe(A, E, hi) is None:
        probes += 1
        expansions += 1
        if expansions > max_expand:
            raise Infeasible("no feasible gain found while expanding the bracket", upper=hi)
        hi *= 4.0
    lo = 0.0
    bracket0 = hi
    while hi - lo > tol_bisect * hi and hi > floor:
        mid = 0.5 * (lo + hi)
        probes += 1
        if _riccati_probe(A, E, mid) is not None:
            hi = mid
        else:
            lo = mid
    gstar = hi
    # near-unit spectral radius makes P ill conditioned; if no strictly
    # feasible P resolves at the nominal inflation, inflate further
    for inflation in (10.0, 1e2, 1e3, 1e4):
        gcert = (1.0 + inflation * tol_bisect) * gstar
        for shift in (1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8):
            P = _riccati_probe(A, E, gcert, shift=shift)
            if P is None:
                continue
            # a vanishing disturbance channel leaves the -g^2 I block below the
            # eigenvalue tolerance; lift g just enough to resolve it
            g = max(gcert, float(np.sqrt(1e-8 * max(1.0, np.linalg.norm(P, 2)))))
            ok, margin = check_iss(A, E, P, g)
            if ok:
                return IssCertificate(P, float(g), margin, default_tol(assemble_psi(A, E, P, g)),
                                      {"gamma_star": float(gstar), "tol_bisect": tol_bisect,
                                       "bracket": [0.0, float(bracket0)], "probes": probes,
                                       "riccati_shift": shift, "inflation": inflation,
                                       "spectral_radius": rho})
    raise Infeasible("bisection converged but no strictly feasible storage matrix found",
                     gamma_star=gstar)


def assemble_omega(A, P, lam, kappa):
    A = _sq(A, "A_theta")
    P = _sq(P, "P")
    r = A.shape[0]
    if P.shape != (r, r):
        raise ValueError(f"P has shape {P.shape}, expected {(r, r)}")
    if not (lam > 0 and kappa > 0):
        raise ValueError("lambda and kappa must be positive")
    I = np.eye(r)
    PA = P @ A
    top = np.hstack([PA + PA.T + lam * kappa * I + P, -lam * I + P @ A.T])
    bot = np.hstack([-lam * I + A @ P, -2.0 * lam / kappa * I])
    return symmetrize(np.vstack([top, bot]))


def check_omega(A, P, lam, kappa, tol=None):
    S = assemble_omega(A, P, lam, kappa)
    return is_neg_def(S, tol), -float(sym_eig(S)[0][-1])


def nn_gain(P):
    w = sym_eig(_sq(P, "P"))[0]
    if w[0] <= 0:
        raise ValueError("P must be positive definite")
    return float(np.sqrt(w[-1] / w[0]))


def synthesize_csode_cert(A, kappa, q_grid=None, lam_grid=None, delta_b=0.0):
    """Grid search for ``(P, lambda)`` with ``Omega < 0``.

    ``P`` ranges over solutions of ``P A + A'P = -q I``; among feasible pairs
    the one with the largest margin relative to ``||Omega||`` is returned.
    """
    A = _sq(A, "A_theta")
    q_grid = np.logspace(-2, 2, 9) if q_grid is None else np.asarray(q_grid, dtype=float)
    lam_grid = np.logspace(-3, 2, 26) if lam_grid is None else np.asarray(lam_grid, dtype=float)
    best = None
    best_bad = -np.inf
    for q in q_grid:
        P = symmetrize(solve_continuous_lyapunov(A.T, -q * np.eye(A.shape[0])))
        if not np.all(np.isfinite(P)) or sym_eig(P)[0][0] <= 0:
            continue
        for lam in lam_grid:
            S = assemble_omega(A, P, lam, kappa)
            w = sym_eig(S)[0]
            rel = -w[-1] / max(1.0, np.max(np.abs(w)))
            if is_neg_def(S):
                if best is None or rel > best[0]:
                    best = (rel, P, float(lam), -float(w[-1]))
            else:
                best_bad = max(best_bad, -float(w[-1]))
    if best is None:
        reason = "no Lyapunov candidate is positive definite" if best_bad == -np.inf \
            else "grid exhausted without a feasible pair"
        raise Infeasible(reason, best_margin=None if best_bad == -np.inf else best_bad)
    _, P, lam, margin = best
    return CsodeCertificate(P, lam, float(kappa), nn_gain(P), margin, float(delta_b),
                            {"q_grid": [float(q) for q in q_grid],
                             "lambda_grid": [float(x) for x in lam_grid]})


def sector_form(phi, z, kappa):
    """Row-wise ``phi' (z - phi / kappa)``."""
    return np.sum(phi * (z - phi / kappa), axis=-1)


def verify_sector(phi_fn, kappa, z_box, xi_box=None, count=100_000, seed=0):
    """Check the sector inequality on a scrambled Sobol sample of the box.

    ``phi_fn(z, xi)`` evaluates the nonlinearity on row batches. Boxes are
    ``(low, high)`` pairs of arrays.
    """
    zl, zh = (np.atleast_1d(np.asarray(b, dtype=float)) for b in z_box)
    r = zl.size
    if xi_box is not None:
        xl, xh = (np.atleast_1d(np.asarray(b, dtype=float)) for b in xi_box)
    else:
        xl = xh = np.zeros(0)
    d = r + xl.size
    sampler = qmc.Sobol(d, scramble=True, seed=seed)
    # a prefix of the base-2 sequence keeps its low discrepancy well enough
    U = sampler.random_base2(int(np.ceil(np.log2(max(count, 2)))))[:count]
    pts = qmc.scale(U, np.concatenate([zl, xl]), np.concatenate([zh, xh])) \
        if np.any(np.concatenate([zh - zl, xh - xl]) > 0) else np.zeros((count, d))
    z, xi = pts[:, :r], pts[:, r:]
    form = sector_form(np.asarray(phi_fn(z, xi)), z, kappa)
    min_margin = float(np.min(form))
    return SectorReport(float(kappa), count, min_margin, int(np.sum(form < -1e-9)))


def dissipation_tolerance(P, gamma, margin, eps_max):
    """Slack that absorbs a bounded one-step model residual in the ISS test.

    With ``e' = A e + E w + r`` and ``||r|| <= eps_max``, Young's inequality
    on the cross term of ``V(e')`` with weight ``eta`` gives ``V(e') - V(e) <=
    -(1 + margin - eta lmax) ||e||^2 + (g^2 (1 + eta) - margin) ||w||^2
    + (1 + 1/eta) lmax eps_max^2``. Taking ``eta = margin / max(lmax, g^2)``
    keeps both leading coefficients within the certified ones.
    """
    lmax = float(sym_eig(P)[0][-1])
    eta = max(margin, 1e-12) / max(lmax, gamma ** 2)
    return (1.0 + 1.0 / eta) * lmax * eps_max ** 2


def empirical_iss_rate(e, w, P, gamma, tol=0.0):
    """Fraction of steps satisfying the dissipation inequality.

    ``e`` has one more row than ``w`` (``e_k`` for ``k = 0..K``) or the same
    number, in which case the last disturbance is unused.
    """
    e = np.atleast_2d(np.asarray(e, dtype=float))
    w = np.asarray(w, dtype=float).reshape(len(w), -1)
    K = len(e) - 1
    if K < 1:
        return 1.0
    w = w[:K]
    V = np.einsum("ki,ij,kj->k", e, P, e)
    lhs = V[1:] - V[:-1]
    rhs = -np.sum(e[:-1] ** 2, axis=1) + gamma ** 2 * np.sum(w ** 2, axis=1) + tol
    return float(np.mean(lhs <= rhs))


def recertify_loop(data, dictionary, gamma_max, rho0, rho_max, tol_bisect=1e-6, fit=None):
    """Refit with doubled ridge until the model certifies with ``gamma* <= gamma_max``.

    Returns ``(model, certificate, ladder)`` where ``ladder`` lists
    ``(rho, diagnosis)`` for each attempt.
    """
    from .koopman import edmd_fit

    if not rho0 > 0:
        raise ValueError("rho0 must be positive")
    fit = edmd_fit if fit is None else fit
    ladder = []
    rho = float(rho0)
    while rho <= rho_max:
        model = fit(data, dictionary, rho)
        try:
            cert = optimal_gain(model.A, model.E, tol_bisect)
        except (Infeasible, NonConvergenceError) as exc:
            ladder.append((rho, str(exc)))
        else:
            if cert.gamma <= gamma_max:
                ladder.append((rho, "certified"))
                cert.meta["ladder"] = [[r, d] for r, d in ladder]
                model.meta["certified_rho"] = rho
                return model, cert, ladder
            ladder.append((rho, f"gamma {cert.gamma:.4g} exceeds {gamma_max:.4g}"))
        rho *= 2.0
    if not ladder:
        ladder.append((rho, "rho0 already exceeds rho_max"))
    raise CertificationFailure(ladder, ladder[-1][1])
