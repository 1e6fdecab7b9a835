"""Structured latent ODE models, their penalty losses and training.

Training runs in torch (float64, reverse mode through unrolled RK4). Each
trained model is exported to :class:`NumpyLatentModel`, a dependency-free
forward evaluator used for batched control rollouts.

Model layout
------------
``x -> z``      encoder: affine normalization, linear map initialised to
                ``[I; 0]`` plus a tanh MLP whose last layer starts at zero
``z -> x``      decoder: mirror image, so the pair is the identity at init
``dz/dt``       nominal field (CSODE, ICODE or unstructured) plus an optional
                residual ICODE field
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

__all__ = [
    "Mlp",
    "Autoencoder",
    "CsodeField",
    "IcodeField",
    "VanillaField",
    "LatentModel",
    "BundleAtlas",
    "TrainConfig",
    "WindowDataset",
    "bundle_distance",
    "bundle_loss",
    "sector_penalty",
    "recon_loss",
    "prediction_loss",
    "total_loss",
    "train",
    "residual_fit",
    "gradient_check",
    "NumpyLatentModel",
    "save_checkpoint",
    "load_checkpoint",
]

DTYPE = torch.float64


def _t(a):
    return torch.as_tensor(np.asarray(a, dtype=float), dtype=DTYPE)


class Mlp(nn.Module):
    """tanh MLP with a linear output layer."""

    def __init__(self, widths, zero_last=False, gen=None):
        super().__init__()
        self.widths = [int(w) for w in widths]
        layers = []
        for i, (a, b) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            lin = nn.Linear(a, b, dtype=DTYPE)
            bound = 1.0 / math.sqrt(a)
            with torch.no_grad():
                lin.weight.uniform_(-bound, bound, generator=gen)
                lin.bias.uniform_(-bound, bound, generator=gen)
                if zero_last and i == len(self.widths) - 2:
                    lin.weight.zero_()
                    lin.bias.zero_()
            layers.append(lin)
        self.layers = nn.ModuleList(layers)

    def forward(self, x):
        for lin in self.layers[:-1]:
            x = torch.tanh(lin(x))
        return self.layers[-1](x)

    def export(self):
        return [(l.weight.detach().numpy().copy(), l.bias.detach().numpy().copy())
                for l in self.layers]


def mlp_numpy(layers, x):
    for W, b in layers[:-1]:
        x = np.tanh(x @ W.T + b)
    W, b = layers[-1]
    return x @ W.T + b


class Autoencoder(nn.Module):
    def __init__(self, n, r, hidden, x_center, x_scale, gen=None, trainable=True):
        super().__init__()
        if r < n:
            raise ValueError("latent dimension must be at least the state dimension")
        self.n, self.r = n, r
        self.register_buffer("x_center", _t(x_center))
        self.register_buffer("x_scale", _t(x_scale))
        self.trainable = trainable
        if trainable:
            self.We = nn.Parameter(torch.eye(r, n, dtype=DTYPE))
            self.Wd = nn.Parameter(torch.eye(n, r, dtype=DTYPE))
            self.enc = Mlp([n, hidden, r], zero_last=True, gen=gen)
            self.dec = Mlp([r, hidden, n], zero_last=True, gen=gen)

    def encode(self, x):
        xn = (x - self.x_center) / self.x_scale
        if not self.trainable:
            return xn
        return xn @ self.We.T + self.enc(xn)

    def decode(self, z):
        if not self.trainable:
            return self.x_center + self.x_scale * z
        return self.x_center + self.x_scale * (z @ self.Wd.T + self.dec(z))


class CsodeField(nn.Module):
    """``A z + Phi(z, xi) + B u`` with ``Phi`` centred in the sector ``[0, kappa]``.

    ``Phi(z, xi) = kappa/2 z + h(z, xi) - h(0, xi)`` so that ``Phi(0, xi) = 0``
    and an untrained network sits in the middle of the sector. With
    ``stable=True`` the linear part is ``-(a_min I + L L') + (S - S')``, which
    is Hurwitz by construction.

    ``A`` and ``Phi`` (the certificate operands) are expressed in model time,
    ``time_unit`` seconds per unit; ``forward`` returns the derivative per
    second. Trainable parameters are kept at physical scale.
    """

    def __init__(self, r, m, n_xi, kappa, hidden, stable=True, a_min=1.0, use_xi=True,
                 time_unit=1.0, gen=None):
        super().__init__()
        if not time_unit > 0:
            raise ValueError("time_unit must be positive")
        self.r, self.m, self.kappa = r, m, float(kappa)
        self.n_xi = n_xi if use_xi else 0
        self.stable, self.a_min = stable, float(a_min)
        self.time_unit = float(time_unit)
        if stable:
            self.L = nn.Parameter(0.1 * torch.randn(r, r, dtype=DTYPE, generator=gen))
            self.S = nn.Parameter(0.1 * torch.randn(r, r, dtype=DTYPE, generator=gen))
        else:
            self.Araw = nn.Parameter(-0.1 * torch.eye(r, dtype=DTYPE)
                                     + 0.05 * torch.randn(r, r, dtype=DTYPE, generator=gen))
        self.B = nn.Parameter(0.1 * torch.randn(r, m, dtype=DTYPE, generator=gen))
        self.h = Mlp([r + self.n_xi, hidden, r], zero_last=True, gen=gen)
        # multiplier of the sector certificate, trained only through its penalty
        self.log_lam = nn.Parameter(torch.zeros((), dtype=DTYPE))
        self.register_buffer("sector_scale", torch.ones((), dtype=DTYPE))

    def A_phys(self):
        if self.stable:
            I = torch.eye(self.r, dtype=DTYPE)
            return -(self.a_min / self.time_unit * I + self.L @ self.L.T) + (self.S - self.S.T)
        return self.Araw

    def A(self):
        return self.time_unit * self.A_phys()

    def learned(self, z, xi):
        """``h(z, xi) - h(0, xi)`` times the sector scale, per second."""
        xi = xi[..., :self.n_xi]
        zero = torch.zeros_like(z)
        return self.sector_scale * (self.h(torch.cat([z, xi], -1))
                                    - self.h(torch.cat([zero, xi], -1)))

    def phi(self, z, xi):
        return 0.5 * self.kappa * z + self.time_unit * self.learned(z, xi)

    def forward(self, z, u, xi):
        return (z @ self.A_phys().T + (0.5 * self.kappa / self.time_unit) * z
                + self.learned(z, xi) + u @ self.B.T)


class IcodeField(nn.Module):
    """``A0 z + sum_j xi_j N_j z + B0 u + g(z, xi)``."""

    def __init__(self, r, m, n_xi, hidden, use_xi=True, init_scale=0.1, gen=None):
        super().__init__()
        self.r, self.m = r, m
        self.n_xi = n_xi if use_xi else 0
        self.A0 = nn.Parameter(init_scale * torch.randn(r, r, dtype=DTYPE, generator=gen))
        self.N = nn.Parameter(init_scale * torch.randn(self.n_xi, r, r, dtype=DTYPE,
                                                       generator=gen))
        self.B0 = nn.Parameter(init_scale * torch.randn(r, m, dtype=DTYPE, generator=gen))
        self.g = Mlp([r + self.n_xi, hidden, r], zero_last=True, gen=gen)

    def zero_(self):
        with torch.no_grad():
            for p in self.parameters():
                p.zero_()
        return self

    def forward(self, z, u, xi):
        xi = xi[..., :self.n_xi]
        out = z @ self.A0.T + u @ self.B0.T + self.g(torch.cat([z, xi], -1))
        if self.n_xi:
            out = out + torch.einsum("...j,jab,...b->...a", xi, self.N, z)
        return out


class VanillaField(nn.Module):
    """Unstructured ``MLP(z, u)`` vector field (``MLP(z, u, xi)`` with ``use_xi``)."""

    def __init__(self, r, m, n_xi, hidden, use_xi=False, gen=None):
        super().__init__()
        self.r, self.m = r, m
        self.n_xi = n_xi if use_xi else 0
        self.f = Mlp([r + m + self.n_xi, hidden, hidden, r], gen=gen)
        with torch.no_grad():
            self.f.layers[-1].weight.mul_(0.1)
            self.f.layers[-1].bias.zero_()

    def forward(self, z, u, xi):
        return self.f(torch.cat([z, u, xi[..., :self.n_xi]], -1))


@dataclass
class BundleAtlas:
    """Axis-aligned box fibres with affine dependence on the environment."""

    lower0: np.ndarray
    lower1: np.ndarray
    upper0: np.ndarray
    upper1: np.ndarray
    delta_b: float = 0.0

    def bounds(self, xi):
        xi = np.asarray(xi, dtype=float)
        lo = self.lower0 + xi @ self.lower1.T if self.lower1.size else \
            np.broadcast_to(self.lower0, xi.shape[:-1] + self.lower0.shape)
        hi = self.upper0 + xi @ self.upper1.T if self.upper1.size else \
            np.broadcast_to(self.upper0, xi.shape[:-1] + self.upper0.shape)
        return lo, hi

    def torch_bounds(self, xi):
        lo0, hi0 = _t(self.lower0), _t(self.upper0)
        if self.lower1.size:
            return lo0 + xi @ _t(self.lower1).T, hi0 + xi @ _t(self.upper1).T
        return lo0.expand(xi.shape[:-1] + lo0.shape), hi0.expand(xi.shape[:-1] + hi0.shape)

    @classmethod
    def calibrate(cls, Z, XI, bins=4, lo_pct=1.0, hi_pct=99.0):
        """Fit affine percentile envelopes of encoded states over environment bins."""
        Z = np.asarray(Z, dtype=float)
        XI = np.asarray(XI, dtype=float).reshape(len(Z), -1)
        r, q = Z.shape[1], XI.shape[1]
        if q == 0:
            lo, hi = np.percentile(Z, lo_pct, axis=0), np.percentile(Z, hi_pct, axis=0)
            return cls(lo, np.zeros((r, 0)), hi, np.zeros((r, 0)))
        # bin along each environment coordinate jointly via quantiles of the first one
        edges = np.quantile(XI[:, 0], np.linspace(0, 1, bins + 1))
        idx = np.clip(np.searchsorted(edges, XI[:, 0], side="right") - 1, 0, bins - 1)
        rows, los, his = [], [], []
        for b in range(bins):
            sel = idx == b
            if sel.sum() < 10:
                continue
            rows.append(np.concatenate([[1.0], XI[sel].mean(axis=0)]))
            los.append(np.percentile(Z[sel], lo_pct, axis=0))
            his.append(np.percentile(Z[sel], hi_pct, axis=0))
        R = np.array(rows)
        cl = np.linalg.lstsq(R, np.array(los), rcond=None)[0]
        ch = np.linalg.lstsq(R, np.array(his), rcond=None)[0]
        # keep lower < upper over the observed environment range
        atlas = cls(cl[0], cl[1:].T, ch[0], ch[1:].T)
        lo, hi = atlas.bounds(XI)
        gap = np.min(hi - lo, axis=0)
        if np.any(gap <= 0):
            pad = np.maximum(1e-3 - gap, 0.0)
            atlas.lower0 = atlas.lower0 - pad
            atlas.upper0 = atlas.upper0 + pad
        return atlas

    def describe(self):
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v)
                for k, v in asdict(self).items()}

    @classmethod
    def from_description(cls, d):
        r = len(d["lower0"])
        return cls(np.array(d["lower0"]), np.array(d["lower1"]).reshape(r, -1),
                   np.array(d["upper0"]), np.array(d["upper1"]).reshape(r, -1),
                   d.get("delta_b", 0.0))


def bundle_distance(atlas, z, xi):
    """Euclidean distance from ``z`` to the fibre box at ``xi`` (torch or numpy)."""
    if isinstance(z, torch.Tensor):
        lo, hi = atlas.torch_bounds(xi)
        gap = torch.relu(lo - z) + torch.relu(z - hi)
        return torch.sqrt(torch.sum(gap * gap, -1))
    lo, hi = atlas.bounds(xi)
    gap = np.maximum(lo - z, 0.0) + np.maximum(z - hi, 0.0)
    return np.sqrt(np.sum(gap * gap, -1))


def bundle_loss(atlas, z, xi):
    """Sum of squared fibre distances over a batch."""
    lo, hi = atlas.torch_bounds(xi)
    gap = torch.relu(lo - z) + torch.relu(z - hi)
    return torch.sum(gap * gap)


def lyapunov_torch(A, q=1.0):
    """Solve ``P A + A' P = -q I`` by a Kronecker linear solve."""
    r = A.shape[0]
    I = torch.eye(r, dtype=A.dtype)
    At = A.T.contiguous()
    K = torch.kron(I, At) + torch.kron(At, I)
    P = torch.linalg.solve(K, -q * I.reshape(-1)).reshape(r, r)
    return 0.5 * (P + P.T)


def omega_penalty(A, lam, kappa, margin=0.02):
    """Squared hinge on the normalised top eigenvalue of the sector certificate.

    ``P`` is the Lyapunov solution with ``q = 1``, the same family the
    post-training synthesis searches over.
    """
    r = A.shape[0]
    P = lyapunov_torch(A)
    I = torch.eye(r, dtype=A.dtype)
    PA = P @ A
    top = torch.cat([PA + PA.T + lam * kappa * I + P, -lam * I + P @ A.T], 1)
    bot = torch.cat([-lam * I + A @ P, -2.0 * lam / kappa * I], 1)
    Om = torch.cat([top, bot], 0)
    w = torch.linalg.eigvalsh(0.5 * (Om + Om.T))
    scale = torch.clamp(torch.max(torch.abs(w)), min=1.0)
    return torch.relu(w[-1] / scale + margin) ** 2


def sector_penalty(phi, z, kappa, margin=0.0):
    """Mean squared hinge on violations of ``phi'(z - phi/kappa) >= 0``.

    ``margin`` in ``[0, 1)`` shrinks the admissible ball
    ``||phi - kappa z/2|| <= (1 - margin) kappa ||z|| / 2``; at zero the
    hinge argument is exactly the sector form.
    """
    c = 0.5 * kappa * z
    rad2 = ((1.0 - margin) * 0.5 * kappa) ** 2 * torch.sum(z * z, -1)
    form = (rad2 - torch.sum((phi - c) ** 2, -1)) / kappa
    return torch.mean(torch.relu(-form) ** 2)


class LatentModel(nn.Module):
    """Autoencoder plus nominal field plus optional residual field."""

    def __init__(self, ae, nominal, residual=None, xi_center=None, xi_scale=None,
                 u_scale=None, kind="csode", atlas=None):
        super().__init__()
        self.ae, self.nominal, self.residual = ae, nominal, residual
        m, q = nominal.m, (len(xi_center) if xi_center is not None else 0)
        self.register_buffer("xi_center", _t(np.zeros(q) if xi_center is None else xi_center))
        self.register_buffer("xi_scale", _t(np.ones(q) if xi_scale is None else xi_scale))
        self.register_buffer("u_scale", _t(np.ones(m) if u_scale is None else u_scale))
        self.kind = kind
        self.atlas = atlas

    @property
    def r(self):
        return self.ae.r

    def norm_xi(self, xi):
        return (xi - self.xi_center) / self.xi_scale

    def deriv(self, z, u, xi_n):
        un = u / self.u_scale
        out = self.nominal(z, un, xi_n)
        if self.residual is not None:
            out = out + self.residual(z, un, xi_n)
        return out

    def rk4(self, z, u, xi_n, h):
        k1 = self.deriv(z, u, xi_n)
        k2 = self.deriv(z + 0.5 * h * k1, u, xi_n)
        k3 = self.deriv(z + 0.5 * h * k2, u, xi_n)
        k4 = self.deriv(z + h * k3, u, xi_n)
        return z + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)

    def unroll(self, x0, U, XI, h):
        """Latent trajectory ``(B, H+1, r)`` from ``x0`` under held inputs."""
        z = self.ae.encode(x0)
        zs = [z]
        XIn = self.norm_xi(XI)
        for k in range(U.shape[1]):
            z = self.rk4(z, U[:, k], XIn[:, k], h)
            zs.append(z)
        return torch.stack(zs, 1)

    def param_count(self):
        return sum(p.numel() for p in self.parameters() if p.requires_grad)


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 256
    lr: float = 1e-3
    lr_final: float = 1e-5
    w_sector: float = 1.0
    w_bundle: float = 0.1
    w_recon: float = 1.0
    w_cert: float = 10.0
    sector_margin: float = 0.1
    collocation: int = 128
    step: float = 0.1
    horizon: int = 5
    seed: int = 0
    grad_check: bool = True
    max_steps: int = 0

    def __post_init__(self):
        for k in ("w_sector", "w_bundle", "w_recon", "w_cert"):
            if getattr(self, k) < 0:
                raise ValueError(f"{k} must be >= 0")
        if self.horizon < 1 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("horizon, batch_size and epochs must be positive")


@dataclass
class WindowDataset:
    """Length-``H`` windows sampled every ``step`` seconds.

    ``X`` is ``(B, H+1, n)``; ``U`` and ``XI`` are ``(B, H, .)`` and hold the
    input applied over each step.
    """

    X: np.ndarray
    U: np.ndarray
    XI: np.ndarray
    step: float

    def __len__(self):
        return len(self.X)

    @classmethod
    def from_trajectories(cls, trajs, horizon, step, stride=None, transform=None, seed=0):
        """Cut windows from trajectories sampled finer than ``step``.

        ``transform(X, rng)`` may re-anchor each window (for example shift a
        translation-invariant coordinate).
        """
        rng = np.random.default_rng(seed)
        Xs, Us, XIs = [], [], []
        for tr in trajs:
            if tr.failed:
                continue
            dt = float(tr.t[1] - tr.t[0])
            sub = int(round(step / dt))
            span = horizon * sub
            stride_ = sub if stride is None else int(stride)
            for s in range(0, len(tr.t) - span, stride_):
                idx = s + sub * np.arange(horizon + 1)
                Xs.append(tr.x[idx])
                Us.append(tr.u[idx[:-1]])
                XIs.append(tr.xi[idx[:-1]])
        X = np.array(Xs)
        if transform is not None:
            X = transform(X, rng)
        return cls(X, np.array(Us), np.array(XIs), float(step))

    def split(self, frac, seed=0):
        perm = np.random.default_rng(seed).permutation(len(self))
        cut = int(round(frac * len(self)))
        a, b = np.sort(perm[:cut]), np.sort(perm[cut:])
        return (WindowDataset(self.X[a], self.U[a], self.XI[a], self.step),
                WindowDataset(self.X[b], self.U[b], self.XI[b], self.step))


def recon_loss(model, x):
    err = (model.ae.decode(model.ae.encode(x)) - x) / model.ae.x_scale
    return torch.mean(torch.sum(err * err, -1))


def prediction_loss(model, X, U, XI, h, Z=None):
    if Z is None:
        Z = model.unroll(X[:, 0], U, XI, h)
    err = (model.ae.decode(Z[:, 1:]) - X[:, 1:]) / model.ae.x_scale
    return torch.mean(torch.sum(err * err, -1))


def _latent_box(model, X):
    with torch.no_grad():
        Z = model.ae.encode(X.reshape(-1, X.shape[-1]))
    return Z.min(0).values, Z.max(0).values


def total_loss(model, cfg, X, U, XI, colloc=None, parts=False):
    """Prediction loss plus weighted sector, bundle and reconstruction terms."""
    h = cfg.step
    Z = model.unroll(X[:, 0], U, XI, h)
    L_pred = prediction_loss(model, X, U, XI, h, Z)
    terms = {"pred": L_pred}
    total = L_pred
    nom = model.nominal
    if cfg.w_sector > 0 and isinstance(nom, CsodeField):
        zs = Z[:, :-1].reshape(-1, model.r)
        xs = model.norm_xi(XI).reshape(zs.shape[0], XI.shape[-1])
        if colloc is not None:
            zs = torch.cat([zs, colloc[0]], 0)
            xs = torch.cat([xs, colloc[1]], 0)
        L_s = sector_penalty(nom.phi(zs, xs), zs, nom.kappa, cfg.sector_margin)
        terms["sector"] = L_s
        total = total + cfg.w_sector * L_s
    if cfg.w_cert > 0 and isinstance(nom, CsodeField) and nom.stable:
        L_c = omega_penalty(nom.A(), torch.exp(nom.log_lam), nom.kappa)
        terms["cert"] = L_c
        total = total + cfg.w_cert * L_c
    if cfg.w_bundle > 0 and model.atlas is not None:
        xs = model.norm_xi(XI)
        L_b = bundle_loss(model.atlas, Z[:, 1:], xs) / (Z.shape[0] * (Z.shape[1] - 1))
        terms["bundle"] = L_b
        total = total + cfg.w_bundle * L_b
    if cfg.w_recon > 0 and model.ae.trainable:
        L_r = recon_loss(model, X.reshape(-1, X.shape[-1]))
        terms["recon"] = L_r
        total = total + cfg.w_recon * L_r
    return (total, terms) if parts else total


def _flat(model):
    return torch.nn.utils.parameters_to_vector(
        [p for p in model.parameters() if p.requires_grad])


def _set_flat(model, v):
    torch.nn.utils.vector_to_parameters(v, [p for p in model.parameters() if p.requires_grad])


def gradient_check(model, loss_fn, eps=1e-5, max_params=200, seed=0):
    """Compare reverse-mode gradients against central differences.

    Returns the max relative error ``|g - g_fd| / max(|g_fd|, |g|, floor)``
    over at most ``max_params`` coordinates, with ``floor`` a small fraction of
    the gradient's largest magnitude so that vanishing components do not
    dominate.
    """
    theta0 = _flat(model).detach().clone()
    model.zero_grad()
    loss = loss_fn()
    loss.backward()
    g = torch.nn.utils.parameters_to_vector(
        [p.grad if p.grad is not None else torch.zeros_like(p)
         for p in model.parameters() if p.requires_grad]).detach().clone()
    P = theta0.numel()
    idx = np.arange(P)
    if P > max_params:
        idx = np.sort(np.random.default_rng(seed).choice(P, max_params, replace=False))
    fd = torch.zeros(len(idx), dtype=DTYPE)
    with torch.no_grad():
        for j, i in enumerate(idx):
            th = theta0.clone()
            th[i] += eps
            _set_flat(model, th)
            lp = loss_fn()
            th[i] -= 2 * eps
            _set_flat(model, th)
            lm = loss_fn()
            fd[j] = (lp - lm) / (2 * eps)
        _set_flat(model, theta0)
    gi = g[idx]
    floor = 1e-3 * float(torch.max(torch.abs(fd)).clamp_min(1e-12))
    rel = torch.abs(gi - fd) / torch.clamp(torch.maximum(torch.abs(fd), torch.abs(gi)), min=floor)
    return float(rel.max())


class DivergentTrainingError(FloatingPointError):
    pass


class GradientCheckError(AssertionError):
    pass


def train(model, data, cfg, val=None, log=None):
    """Minimise :func:`total_loss` with Adam and cosine learning-rate decay.

    The best validation (or training) checkpoint is restored at the end, so
    the returned trace of best-so-far losses is non-increasing.
    """
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    X, U, XI = _t(data.X), _t(data.U), _t(data.XI)
    if cfg.grad_check:
        small = slice(0, min(8, len(X)))
        loss_fn = lambda: total_loss(model, cfg, X[small], U[small], XI[small])
        err = gradient_check(model, loss_fn, max_params=40, seed=cfg.seed)
        if not err <= 1e-4:
            raise GradientCheckError(f"startup gradient check failed: rel err {err:.2e}")
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.lr)
    B = len(X)
    per_epoch = max(1, B // cfg.batch_size)
    total_steps = cfg.epochs * per_epoch
    if cfg.max_steps:
        total_steps = min(total_steps, cfg.max_steps)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, total_steps, eta_min=cfg.lr_final)
    zlo, zhi = _latent_box(model, X)
    q = XI.shape[-1]
    trace, best, best_state = [], math.inf, None
    Xv, Uv, XIv = (_t(val.X), _t(val.U), _t(val.XI)) if val is not None else (X, U, XI)
    step = 0
    for epoch in range(cfg.epochs):
        if step >= total_steps:
            break
        perm = torch.randperm(B, generator=gen)
        if model.atlas is not None and cfg.w_bundle > 0:
            with torch.no_grad():
                Zall = model.ae.encode(X.reshape(-1, X.shape[-1])).numpy()
            # the last state of a window reuses the last held environment
            XIfull = model.norm_xi(XI).numpy()
            XIpad = np.concatenate([XIfull, XIfull[:, -1:]], 1).reshape(len(Zall), q)
            model.atlas = BundleAtlas.calibrate(Zall, XIpad)
            zlo, zhi = _latent_box(model, X)
        model.train()
        for b in range(per_epoch):
            if step >= total_steps:
                break
            sel = perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            colloc = None
            if cfg.collocation and isinstance(model.nominal, CsodeField) and cfg.w_sector > 0:
                span = zhi - zlo
                zc = zlo - 0.1 * span + 1.2 * span * torch.rand(
                    cfg.collocation, model.r, dtype=DTYPE, generator=gen)
                xc = 2.0 * torch.rand(cfg.collocation, q, dtype=DTYPE, generator=gen) - 1.0
                colloc = (zc, xc)
            loss = total_loss(model, cfg, X[sel], U[sel], XI[sel], colloc)
            if not torch.isfinite(loss):
                norm = float(torch.linalg.vector_norm(_flat(model).detach()))
                raise DivergentTrainingError(
                    f"loss became non-finite in epoch {epoch} (parameter norm {norm:.3g})")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            step += 1
        with torch.no_grad():
            vl = float(total_loss(model, cfg, Xv, Uv, XIv))
        if vl < best:
            best = vl
            best_state = {k: v.clone() for k, v in model.state_dict().items()}
            best_atlas = model.atlas
        trace.append(best)
        if log is not None:
            log(epoch, vl)
    if best_state is not None:
        model.load_state_dict(best_state)
        model.atlas = best_atlas
    if model.atlas is not None:
        with torch.no_grad():
            Z = model.unroll(X[:, 0], U, XI, cfg.step)
            L = bundle_loss(model.atlas, Z[:, 1:], model.norm_xi(XI))
        model.atlas.delta_b = float(torch.sqrt(L / (Z.shape[0] * (Z.shape[1] - 1))))
    return model, trace


def residual_fit(model, trajs, hidden=32, use_xi=True, epochs=30, lr=3e-3, batch=512,
                 seed=0, transform=None, windows=None, refine_epochs=0, refine_lr=1e-3):
    """Attach and fit a residual ICODE field to one-step derivative errors.

    Targets are central-difference latent derivatives of the encoded
    trajectories minus the nominal field; the nominal model stays frozen.
    With ``windows`` (a :class:`WindowDataset`) and ``refine_epochs > 0`` the
    residual is then refined on the unrolled prediction loss over those
    windows, still with everything else frozen.
    """
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    Zs, Us, XIs, Ds = [], [], [], []
    with torch.no_grad():
        for tr in trajs:
            if tr.failed:
                continue
            dt = float(tr.t[1] - tr.t[0])
            x = tr.x if transform is None else transform(tr.x[None], np.random.default_rng(0))[0]
            z = model.ae.encode(_t(x))
            dz = (z[2:] - z[:-2]) / (2 * dt)
            Zs.append(z[1:-1])
            Ds.append(dz)
            Us.append(_t(tr.u[1:-1]))
            XIs.append(model.norm_xi(_t(tr.xi[1:-1])))
    Z, D, U, XI = (torch.cat(a) for a in (Zs, Ds, Us, XIs))
    with torch.no_grad():
        target = D - model.nominal(Z, U / model.u_scale, XI)
    for p in model.parameters():
        p.requires_grad_(False)
    res = IcodeField(model.r, model.nominal.m, XI.shape[-1], hidden, use_xi=use_xi,
                     init_scale=0.0, gen=gen)
    opt = torch.optim.Adam(res.parameters(), lr=lr)
    n = len(Z)
    steps = epochs * max(1, n // batch)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, steps, eta_min=lr * 1e-2)
    for _ in range(epochs):
        perm = torch.randperm(n, generator=gen)
        for b in range(max(1, n // batch)):
            sel = perm[b * batch:(b + 1) * batch]
            pred = res(Z[sel], U[sel] / model.u_scale, XI[sel])
            loss = torch.mean(torch.sum((pred - target[sel]) ** 2, -1))
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
    model.residual = res
    with torch.no_grad():
        final = float(torch.mean(torch.sum((res(Z, U / model.u_scale, XI) - target) ** 2, -1)))
        base = float(torch.mean(torch.sum(target ** 2, -1)))
    info = {"residual_mse": final, "nominal_mse": base}
    if windows is not None and refine_epochs > 0:
        info["refine_trace"] = _refine_residual(model, windows, refine_epochs, refine_lr, batch,
                                                gen)
    for p in model.parameters():
        p.requires_grad_(True)
    return model, info


def _refine_residual(model, data, epochs, lr, batch, gen):
    X, U, XI = _t(data.X), _t(data.U), _t(data.XI)
    params = list(model.residual.parameters())
    for p in params:
        p.requires_grad_(True)
    opt = torch.optim.Adam(params, lr=lr)
    per_epoch = max(1, len(X) // batch)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, epochs * per_epoch, eta_min=lr * 1e-2)
    trace = []
    for _ in range(epochs):
        perm = torch.randperm(len(X), generator=gen)
        total = 0.0
        for b in range(per_epoch):
            sel = perm[b * batch:(b + 1) * batch]
            loss = prediction_loss(model, X[sel], U[sel], XI[sel], data.step)
            if not torch.isfinite(loss):
                raise DivergentTrainingError("residual refinement loss became non-finite")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            total += loss.item()
        trace.append(total / per_epoch)
    return trace


class NumpyLatentModel:
    """Frozen numpy copy of a :class:`LatentModel` for batched rollouts."""

    def __init__(self, model):
        ae = model.ae
        self.n, self.r = ae.n, ae.r
        self.x_center = ae.x_center.numpy().copy()
        self.x_scale = ae.x_scale.numpy().copy()
        self.xi_center = model.xi_center.numpy().copy()
        self.xi_scale = model.xi_scale.numpy().copy()
        self.u_scale = model.u_scale.numpy().copy()
        self.ae_trainable = ae.trainable
        if ae.trainable:
            self.We = ae.We.detach().numpy().copy()
            self.Wd = ae.Wd.detach().numpy().copy()
            self.enc = ae.enc.export()
            self.dec = ae.dec.export()
        self.fields = [self._export_field(model.nominal)]
        if model.residual is not None:
            self.fields.append(self._export_field(model.residual))
        self.atlas = model.atlas

    @staticmethod
    def _export_field(f):
        if isinstance(f, CsodeField):
            return ("csode", f.A().detach().numpy().copy(), f.B.detach().numpy().copy(),
                    f.h.export(), f.kappa, f.n_xi, float(f.sector_scale), f.time_unit)
        if isinstance(f, IcodeField):
            return ("icode", f.A0.detach().numpy().copy(), f.B0.detach().numpy().copy(),
                    f.g.export(), f.N.detach().numpy().copy(), f.n_xi)
        return ("vanilla", f.f.export(), f.n_xi)

    def encode(self, x):
        xn = (np.asarray(x, dtype=float) - self.x_center) / self.x_scale
        if not self.ae_trainable:
            return xn
        return xn @ self.We.T + mlp_numpy(self.enc, xn)

    def decode(self, z):
        if not self.ae_trainable:
            return self.x_center + self.x_scale * z
        return self.x_center + self.x_scale * (z @ self.Wd.T + mlp_numpy(self.dec, z))

    def norm_xi(self, xi):
        return (np.asarray(xi, dtype=float) - self.xi_center) / self.xi_scale

    def phi(self, z, xi_n):
        kind, A, B, h, kappa, q, scale, tu = self.fields[0]
        xi_n = np.broadcast_to(xi_n[..., :q], z.shape[:-1] + (q,))
        return 0.5 * kappa * z + tu * scale * (
            mlp_numpy(h, np.concatenate([z, xi_n], -1))
            - mlp_numpy(h, np.concatenate([np.zeros_like(z), xi_n], -1)))

    def deriv(self, z, u, xi_n):
        un = u / self.u_scale
        out = 0.0
        for f in self.fields:
            if f[0] == "csode":
                A, B, tu = f[1], f[2], f[7]
                out = out + (z @ A.T + self.phi(z, xi_n)) / tu + un @ B.T
            elif f[0] == "icode":
                _, A0, B0, g, N, q = f
                xq = np.broadcast_to(xi_n[..., :q], z.shape[:-1] + (q,))
                val = z @ A0.T + un @ B0.T + mlp_numpy(g, np.concatenate([z, xq], -1))
                if q:
                    val = val + np.einsum("...j,jab,...b->...a", xq, N, z)
                out = out + val
            else:
                q = f[2]
                xq = np.broadcast_to(xi_n[..., :q], z.shape[:-1] + (q,))
                out = out + mlp_numpy(f[1], np.concatenate([z, un, xq], -1))
        return out

    def rk4(self, z, u, xi_n, h):
        k1 = self.deriv(z, u, xi_n)
        k2 = self.deriv(z + 0.5 * h * k1, u, xi_n)
        k3 = self.deriv(z + 0.5 * h * k2, u, xi_n)
        k4 = self.deriv(z + h * k3, u, xi_n)
        return z + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def repair_sector(model, z_box, xi_box=None, count=200_000, safety=0.9, seed=0):
    """Shrink the learned part of ``Phi`` until the sector holds on a dense sample.

    Writing ``Phi = kappa/2 z + s d(z, xi)``, the sector form equals
    ``((kappa/2)^2 ||z||^2 - s^2 ||d||^2) / kappa``, so the largest admissible
    ``s`` is ``min (kappa/2) ||z|| / ||d||`` over the sample. The stored scale
    is ``safety`` times that value (never above the current one).
    """
    nom = model.nominal
    rng = np.random.default_rng(seed)
    zl, zh = (np.asarray(b, dtype=float) for b in z_box)
    Zs = zl + (zh - zl) * rng.random((count, zl.size))
    # small-radius shell: the ratio is governed by the Jacobian near the origin
    Zs[: count // 10] *= 1e-3
    q = nom.n_xi
    if q:
        xl, xh = (np.asarray(b, dtype=float)[:q] for b in xi_box)
        XIs = xl + (xh - xl) * rng.random((count, q))
    else:
        XIs = np.zeros((count, 0))
    with torch.no_grad():
        z, xi = _t(Zs), _t(XIs)
        d = nom.time_unit * (nom.h(torch.cat([z, xi], -1))
                             - nom.h(torch.cat([torch.zeros_like(z), xi], -1)))
        dn = torch.linalg.vector_norm(d, dim=-1)
        zn = torch.linalg.vector_norm(z, dim=-1)
        ratio = torch.where(dn > 0, 0.5 * nom.kappa * zn / dn.clamp_min(1e-300),
                            torch.full_like(dn, math.inf))
        s_max = float(ratio.min())
        new = min(float(nom.sector_scale), safety * s_max)
        nom.sector_scale.fill_(new)
    return new


def _model_spec(model):
    nom, res = model.nominal, model.residual
    spec = {"kind": model.kind, "n": model.ae.n, "r": model.ae.r,
            "ae_trainable": model.ae.trainable,
            "ae_hidden": model.ae.enc.widths[1] if model.ae.trainable else 0,
            "m": nom.m, "n_xi": int(model.xi_center.numel())}
    if isinstance(nom, CsodeField):
        spec["nominal"] = {"type": "csode", "kappa": nom.kappa, "hidden": nom.h.widths[1],
                           "stable": nom.stable, "a_min": nom.a_min, "use_xi": nom.n_xi > 0,
                           "time_unit": nom.time_unit}
    elif isinstance(nom, IcodeField):
        spec["nominal"] = {"type": "icode", "hidden": nom.g.widths[1], "use_xi": nom.n_xi > 0}
    else:
        spec["nominal"] = {"type": "vanilla", "hidden": nom.f.widths[1], "use_xi": nom.n_xi > 0}
    if res is not None:
        spec["residual"] = {"hidden": res.g.widths[1], "use_xi": res.n_xi > 0}
    return spec


def build_model(spec, x_center, x_scale, xi_center, xi_scale, u_scale, seed=0):
    """Construct an untrained :class:`LatentModel` from a spec dictionary."""
    gen = torch.Generator().manual_seed(seed)
    n, r, m, q = spec["n"], spec["r"], spec["m"], spec["n_xi"]
    ae = Autoencoder(n, r, spec.get("ae_hidden", 16) or 16, x_center, x_scale, gen=gen,
                     trainable=spec.get("ae_trainable", True))
    ns = spec["nominal"]
    if ns["type"] == "csode":
        nom = CsodeField(r, m, q, ns["kappa"], ns["hidden"], stable=ns.get("stable", True),
                         a_min=ns.get("a_min", 1.0), use_xi=ns.get("use_xi", True),
                         time_unit=ns.get("time_unit", 1.0), gen=gen)
    elif ns["type"] == "icode":
        nom = IcodeField(r, m, q, ns["hidden"], use_xi=ns.get("use_xi", True), gen=gen)
    else:
        nom = VanillaField(r, m, q, ns["hidden"], use_xi=ns.get("use_xi", False), gen=gen)
    res = None
    if "residual" in spec:
        rs = spec["residual"]
        res = IcodeField(r, m, q, rs["hidden"], use_xi=rs["use_xi"], init_scale=0.0, gen=gen)
    return LatentModel(ae, nom, res, xi_center, xi_scale, u_scale, kind=spec["kind"])


def save_checkpoint(model, path, meta=None):
    """Write ``manifest.json`` and a little-endian float64 ``params.bin``."""
    os.makedirs(path, exist_ok=True)
    state = model.state_dict()
    layout, blobs = [], []
    for k, v in state.items():
        layout.append({"name": k, "shape": list(v.shape)})
        blobs.append(v.detach().numpy().astype("<f8").ravel())
    manifest = {"spec": _model_spec(model), "layout": layout,
                "atlas": model.atlas.describe() if model.atlas is not None else None,
                "meta": meta or {}}
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    with open(os.path.join(path, "params.bin"), "wb") as fh:
        fh.write(np.concatenate(blobs).tobytes() if blobs else b"")


def load_checkpoint(path):
    with open(os.path.join(path, "manifest.json")) as fh:
        manifest = json.load(fh)
    flat = np.frombuffer(open(os.path.join(path, "params.bin"), "rb").read(), dtype="<f8")
    spec = manifest["spec"]
    n, m, q = spec["n"], spec["m"], spec["n_xi"]
    model = build_model(spec, np.zeros(n), np.ones(n), np.zeros(q), np.ones(q), np.ones(m))
    state, off = {}, 0
    for item in manifest["layout"]:
        size = int(np.prod(item["shape"])) if item["shape"] else 1
        state[item["name"]] = torch.as_tensor(flat[off:off + size].reshape(item["shape"]).copy(),
                                              dtype=DTYPE)
        off += size
    model.load_state_dict(state)
    if manifest["atlas"] is not None:
        model.atlas = BundleAtlas.from_description(manifest["atlas"])
    return model, manifest["meta"]
