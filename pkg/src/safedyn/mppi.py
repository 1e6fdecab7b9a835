"""Sampling-based predictive control over arbitrary forward models.

A predictor exposes ``encode(x, xi)``, ``step(s, u, xi, h)`` and
``decode(s)`` on row batches; the controller never looks inside it, so the
same code drives lifted linear models, latent ODEs and the true plant.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .numkit import rng_for

__all__ = [
    "MppiConfig",
    "KoopmanPredictor",
    "LatentPredictor",
    "PlantPredictor",
    "rollout_costs",
    "rollout_cost",
    "mppi_update",
    "mppi_weights",
    "rollout_variance",
    "variance_bound",
    "MppiController",
]

SENTINEL = 1e30


@dataclass
class MppiConfig:
    M: int = 256
    T: float = 1.0
    dt_ctrl: float = 0.1
    sigma_u: tuple = (1.0,)
    lam_T: float = 1.0
    Q: np.ndarray = None
    R: np.ndarray = None
    Qf: np.ndarray = None
    u_low: tuple = None
    u_high: tuple = None

    def __post_init__(self):
        if self.M < 2:
            raise ValueError("M must be at least 2")
        if not self.T > 0 or not self.dt_ctrl > 0:
            raise ValueError("T and dt_ctrl must be positive")
        if not self.lam_T > 0:
            raise ValueError("temperature must be positive")
        self.sigma_u = np.atleast_1d(np.asarray(self.sigma_u, dtype=float))
        m = self.sigma_u.size
        if np.any(self.sigma_u <= 0):
            raise ValueError("sigma_u must be positive")
        self.R = np.zeros((m, m)) if self.R is None else np.atleast_2d(self.R).astype(float)
        for name in ("Q", "R", "Qf"):
            S = getattr(self, name)
            if S is not None:
                S = np.atleast_2d(np.asarray(S, dtype=float))
                if np.linalg.eigvalsh(0.5 * (S + S.T))[0] < -1e-12:
                    raise ValueError(f"{name} must be positive semidefinite")
                setattr(self, name, S)

    @property
    def horizon(self):
        return int(round(self.T / self.dt_ctrl))

    @property
    def m(self):
        return self.sigma_u.size

    def clamp(self, U):
        if self.u_low is None:
            return U
        return np.clip(U, self.u_low, self.u_high)


class KoopmanPredictor:
    """Lifted linear model advanced at its native step, disturbance set to zero."""

    def __init__(self, model):
        self.model = model
        self.AT = model.A.T.copy()
        self.BT = model.B.T.copy()

    def encode(self, x, xi):
        return self.model.lift(x)

    def step(self, s, u, xi, h):
        sub = max(1, int(round(h / self.model.dt)))
        uB = u @ self.BT
        for _ in range(sub):
            s = s @ self.AT + uB
        return s

    def decode(self, s):
        return s[..., :self.model.n]


class LatentPredictor:
    """Latent ODE advanced by one RK4 step per control interval."""

    def __init__(self, nmodel):
        self.nm = nmodel

    def encode(self, x, xi):
        return self.nm.encode(x)

    def step(self, s, u, xi, h):
        return self.nm.rk4(s, u, self.nm.norm_xi(xi), h)

    def decode(self, s):
        return self.nm.decode(s)


class PlantPredictor:
    """The simulator itself, with the disturbance channel set to zero."""

    def __init__(self, plant, substeps=5):
        self.plant = plant
        self.substeps = substeps

    def encode(self, x, xi):
        return np.array(x, dtype=float)

    def step(self, s, u, xi, h):
        w = np.zeros(s.shape[:-1] + (self.plant.n_w,))
        xi = np.broadcast_to(xi, s.shape[:-1] + np.shape(xi)[-1:])
        hh = h / self.substeps
        for _ in range(self.substeps):
            f = lambda x: self.plant.deriv(x, u, xi, w)
            k1 = f(s)
            k2 = f(s + 0.5 * hh * k1)
            k3 = f(s + 0.5 * hh * k2)
            k4 = f(s + hh * k3)
            s = s + hh / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        return s

    def decode(self, s):
        return s


def rollout_costs(predictor, x0, xi, U, ref, cfg):
    """Trapezoid-rule costs of ``M`` control sequences.

    Parameters
    ----------
    U : (M, H, m) applied controls, held over each ``dt_ctrl`` interval.
    ref : (H+1, n) reference states at the knot times.

    Returns
    -------
    J : (M,) costs, ``SENTINEL`` where the rollout left the finite range.
    finite : (M,) bool mask.
    X : (M, H+1, n) decoded states.
    """
    M, H, _ = U.shape
    h = cfg.dt_ctrl
    s = predictor.encode(np.broadcast_to(x0, (M, len(x0))), xi)
    xs = [predictor.decode(s)]
    with np.errstate(all="ignore"):
        for k in range(H):
            s = predictor.step(s, U[:, k], xi, h)
            xs.append(predictor.decode(s))
        X = np.stack(xs, 1)
        D = X - ref
        stage = np.einsum("mki,ij,mkj->mk", D, cfg.Q, D)
        Uk = np.concatenate([U, U[:, -1:]], 1)
        stage = stage + np.einsum("mki,ij,mkj->mk", Uk, cfg.R, Uk)
        J = h * (0.5 * stage[:, 0] + stage[:, 1:-1].sum(1) + 0.5 * stage[:, -1])
        if cfg.Qf is not None:
            J = J + np.einsum("mi,ij,mj->m", D[:, -1], cfg.Qf, D[:, -1])
    finite = np.isfinite(J) & np.all(np.isfinite(X.reshape(M, -1)), axis=1)
    J = np.where(finite, J, SENTINEL)
    return J, finite, X


def rollout_cost(predictor, u_nom, du, x0, ref, xi, cfg):
    """Cost of a single perturbed plan ``u_nom + du`` (shape ``(H, m)``)."""
    U = cfg.clamp(np.asarray(u_nom) + np.asarray(du))[None]
    J, finite, _ = rollout_costs(predictor, np.asarray(x0, dtype=float), xi, U, ref, cfg)
    return float(J[0]), bool(finite[0])


def mppi_weights(J, lam_T, finite=None):
    """Softmax weights ``exp(-(J - min J)/lam_T)`` normalised over finite rollouts."""
    J = np.asarray(J, dtype=float)
    finite = np.isfinite(J) & (J < SENTINEL) if finite is None else finite
    w = np.zeros_like(J)
    if not finite.any():
        return w
    Jf = J[finite]
    e = np.exp(-(Jf - Jf.min()) / lam_T)
    w[finite] = e / e.sum()
    return w


def mppi_update(u_nom, J, dU, lam_T, finite=None):
    """Return ``(u_star, weights, ok)``; ``ok`` is False when no rollout is finite."""
    w = mppi_weights(J, lam_T, finite)
    if not w.any():
        return np.array(u_nom, dtype=float), w, False
    return np.asarray(u_nom) + np.tensordot(w, dU, axes=(0, 0)), w, True


def rollout_variance(J, finite=None):
    """Unbiased sample variance of the finite costs."""
    J = np.asarray(J, dtype=float)
    finite = np.isfinite(J) & (J < SENTINEL) if finite is None else finite
    Jf = J[finite]
    if Jf.size < 2:
        raise ValueError("rollout variance needs at least two finite costs")
    return float(np.var(Jf, ddof=1))


def variance_bound(c1, alpha, gamma_nn, e0_norm, w_bar, T, Q_norm, M):
    """``T^2 ||Q||^2 / M (c1^2 ||e0||^2 + gamma^2 w_bar^2)^2``.

    ``alpha`` enters only the exponential transient, which the bound
    dominates by its ``t = 0`` value; it is accepted for interface symmetry.
    """
    if min(c1, alpha, gamma_nn, e0_norm, w_bar, T, Q_norm) < 0 or M < 1:
        raise ValueError("arguments must be non-negative and M >= 1")
    return T ** 2 * Q_norm ** 2 / M * (c1 ** 2 * e0_norm ** 2 + gamma_nn ** 2 * w_bar ** 2) ** 2


@dataclass
class MppiController:
    """Receding-horizon MPPI with warm start and per-step telemetry.

    ``frame(x)`` returns an offset subtracted from the measured state and the
    reference before rolling out (for translation-invariant coordinates).
    ``bound_fn(e0_norm)`` evaluates the rollout-variance bound, if any.
    """

    predictor: object
    cfg: MppiConfig
    seed: int = 0
    frame: object = None
    bound_fn: object = None
    u_nom: np.ndarray = None
    k: int = 0
    telemetry: list = field(default_factory=list)
    _pred_next: np.ndarray = None

    def __post_init__(self):
        if self.u_nom is None:
            self.u_nom = np.zeros((self.cfg.horizon, self.cfg.m))

    def reset(self):
        self.u_nom = np.zeros((self.cfg.horizon, self.cfg.m))
        self.k = 0
        self.telemetry = []
        self._pred_next = None

    def control_step(self, x, xi, ref, t=0.0):
        """Plan from measured ``x`` and return the first control of the update."""
        t0 = time.perf_counter()
        cfg = self.cfg
        x = np.asarray(x, dtype=float)
        off = np.zeros_like(x) if self.frame is None else self.frame(x)
        xl, refl = x - off, np.asarray(ref, dtype=float) - off
        xi = np.asarray(xi, dtype=float)
        # model error at the start of this horizon, for the variance bound
        s_now = self.predictor.encode(xl[None], xi)[0]
        e0 = 0.0
        if self._pred_next is not None:
            s_pred = self.predictor.encode((self._pred_next - off)[None], xi)[0]
            e0 = float(np.linalg.norm(s_now - s_pred))
        H, m = self.u_nom.shape
        rng = rng_for(self.seed, self.k)
        eps = rng.standard_normal((cfg.M, H, m)) * np.sqrt(cfg.sigma_u)
        U = cfg.clamp(self.u_nom + eps)
        dU = U - self.u_nom
        J, finite, _ = rollout_costs(self.predictor, xl, xi, U, refl, cfg)
        u_star, w, ok = mppi_update(self.u_nom, J, dU, cfg.lam_T, finite)
        u_star = cfg.clamp(u_star)
        u_apply = u_star[0].copy()
        with np.errstate(all="ignore"):
            s_next = self.predictor.step(s_now[None], u_apply[None], xi, cfg.dt_ctrl)
            self._pred_next = self.predictor.decode(s_next)[0] + off
        # warm start: shift by one interval and pad with zeros
        self.u_nom = np.vstack([u_star[1:], np.zeros((1, m))])
        nf = int(finite.sum())
        var = rollout_variance(J, finite) if nf >= 2 else float("nan")
        wf = w[w > 0]
        rec = {"t": float(t), "sigma_J2": var,
               "bound": float(self.bound_fn(e0)) if self.bound_fn is not None else None,
               "e0": e0, "weight_entropy": float(-np.sum(wf * np.log(wf))),
               "excluded_rollouts": int(cfg.M - nf), "held_plan": not ok,
               "step_ms": 1e3 * (time.perf_counter() - t0)}
        self.telemetry.append(rec)
        self.k += 1
        return u_apply, rec
