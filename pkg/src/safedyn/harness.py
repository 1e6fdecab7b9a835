"""Experiment orchestration: methods, benchmarks, episodes and metrics.

Every method is built once per ``(benchmark, method, seed, profile)`` and
cached on disk. Episodes are paired across methods: episode ``i`` uses the
same scenario seed for every method.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field, replace
from enum import Enum

import numpy as np
import torch

from . import certify as cert
from . import koopman as kp
from . import neural as nn_
from .mppi import (KoopmanPredictor, LatentPredictor, MppiConfig, MppiController,
                   variance_bound)
from .numkit import rng_for, sym_eig
from .plants import (LaneChange, Scenario, double_lane_change, exploration_controller,
                     make_plant, path_lateral_error, random_training_scenario,
                     simulate_episode, training_trajectories, zero_order_hold, Trajectory)

__all__ = [
    "MethodId",
    "Profile",
    "MetricsReport",
    "ExperimentConfig",
    "BenchmarkSetup",
    "benchmark_setup",
    "build_method",
    "run_episode",
    "run_method",
    "disturbance_sweep",
    "dictionary_sweep",
    "ablation",
    "variance_ratios",
]


class MethodId(str, Enum):
    VanillaNode = "vanilla-node"
    KoopmanUncert = "koopman-uncert"
    KoopmanIss = "koopman-iss"
    CsodeIcodeMppi = "csode-icode-mppi"
    AblateNoBundle = "ablate-no-bundle"
    AblateNoIcode = "ablate-no-icode"
    AblateNoIss = "ablate-no-iss"

    @property
    def certified(self):
        return self in (MethodId.KoopmanIss, MethodId.CsodeIcodeMppi, MethodId.AblateNoBundle,
                        MethodId.AblateNoIcode)

    @property
    def is_ablation(self):
        return self.value.startswith("ablate")

    @property
    def is_koopman(self):
        return self in (MethodId.KoopmanUncert, MethodId.KoopmanIss)


TABLE_METHODS = (MethodId.VanillaNode, MethodId.KoopmanUncert, MethodId.KoopmanIss,
                 MethodId.CsodeIcodeMppi)
ABLATION_METHODS = (MethodId.CsodeIcodeMppi, MethodId.AblateNoBundle, MethodId.AblateNoIcode,
                    MethodId.AblateNoIss)


@dataclass(frozen=True)
class Profile:
    """Desk-scale knobs shared by every method."""

    train_trajectories: int = 200
    train_duration: float = 10.0
    epochs: int = 30
    batch_size: int = 256
    lr: float = 3e-3
    refine_epochs: int = 10
    latent_extra: int = 2
    hidden: int = 32
    ae_hidden: int = 16
    time_unit: float = 10.0
    kappa: float = 0.25
    w_sector: float = 100.0
    w_bundle: float = 0.1
    w_recon: float = 10.0
    w_cert: float = 10.0
    stls_threshold: float = 0.05
    koopman_degree: int = 3
    n_rbf: int = 8
    koopman_rho_uncert: float = 1e-8
    koopman_rho0: float = 1e-6
    koopman_rho_max: float = 1e6
    koopman_gamma_max: float = 1e6
    tol_bisect: float = 1e-6
    M: int = 256
    T: float = 1.0
    dt_ctrl: float = 0.1
    lam_T: float = 0.1

    def key(self):
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:12]


@dataclass
class MetricsReport:
    benchmark: str
    method: str
    episodes: int
    tracking_rmse: float
    tracking_rmse_std: float
    steering_rate: float
    steering_rate_std: float
    lmi_feasibility_rate: float
    lmi_feasibility_rate_strict: float
    cost_variance: float
    bound_satisfaction: float
    failed_episodes: int
    cost_variance_ratio: float = 1.0
    step_time_ms: float = float("nan")

    def deterministic_dict(self):
        d = asdict(self)
        d.pop("step_time_ms")
        return d


@dataclass
class ExperimentConfig:
    benchmark: str = "b1"
    method: str = MethodId.CsodeIcodeMppi.value
    episodes: int = 50
    seed: int = 0
    a_w: float = 0.5
    out: str | None = None
    cache: str | None = None
    profile: Profile = field(default_factory=Profile)

    def __post_init__(self):
        if self.benchmark not in ("b1", "b2"):
            raise ValueError(f"unknown benchmark {self.benchmark!r}")
        MethodId(self.method)
        if self.episodes < 1:
            raise ValueError("episodes must be >= 1")


# ---------------------------------------------------------------------------
# Benchmarks
# ---------------------------------------------------------------------------

B1_PATH = LaneChange()
B1_DURATION = 12.0
B1_FRICTION_DROP = ((0.0, 0.9), (5.0, 0.3))
B2_DURATION = 10.0
WIND_LIMIT = 6.0


def b2_reference(t):
    """Smooth position/velocity reference for the oscillator."""
    t = np.asarray(t, dtype=float)
    return np.stack([np.sin(0.6 * t), 0.6 * np.cos(0.6 * t)], -1)


@dataclass
class BenchmarkSetup:
    name: str
    plant: object
    mppi: MppiConfig
    frame: object
    reference: object
    tracking_error: object
    smoothness: object

    def horizon_reference(self, t, x):
        return self.reference(t, x)


def _b1_frame(x):
    return np.array([x[0], x[1], 0.0, 0.0])


def _b1_reference(cfg):
    H = cfg.horizon
    offs = cfg.dt_ctrl * np.arange(H + 1)

    def ref(t, x):
        # progress-indexed: the window starts at the vehicle's position on the path
        tau = x[0] / B1_PATH.speed
        return double_lane_change(tau + offs, B1_PATH, duration=B1_DURATION + 5.0)
    return ref


def _b2_reference(cfg):
    offs = cfg.dt_ctrl * np.arange(cfg.horizon + 1)
    return lambda t, x: b2_reference(t + offs)


def benchmark_setup(benchmark, profile=Profile()):
    plant = make_plant(benchmark)
    if benchmark == "b1":
        cfg = MppiConfig(M=profile.M, T=profile.T, dt_ctrl=profile.dt_ctrl,
                         sigma_u=(0.03 ** 2, 1.0), lam_T=profile.lam_T,
                         Q=np.diag([0.5, 300.0, 50.0, 1.0]), R=np.diag([10.0, 0.05]),
                         Qf=np.diag([1.0, 600.0, 100.0, 2.0]),
                         u_low=plant.u_low, u_high=plant.u_high)
        return BenchmarkSetup(
            "b1", plant, cfg, _b1_frame, _b1_reference(cfg),
            lambda tr: path_lateral_error(tr.x, B1_PATH),
            lambda tr: float(np.mean(np.abs(np.diff(tr.u[:-1, 0]))) / (tr.t[1] - tr.t[0]))
            if len(tr.t) > 2 else 0.0)
    cfg = MppiConfig(M=profile.M, T=profile.T, dt_ctrl=profile.dt_ctrl, sigma_u=(2.0 ** 2,),
                     lam_T=profile.lam_T, Q=np.diag([100.0, 1.0]), R=np.diag([0.1]),
                     Qf=np.diag([100.0, 1.0]), u_low=plant.u_low, u_high=plant.u_high)
    return BenchmarkSetup(
        "b2", plant, cfg, None, _b2_reference(cfg),
        lambda tr: tr.x[:, 0] - b2_reference(tr.t)[:, 0],
        lambda tr: float(np.mean(tr.u[:-1, 0] ** 2)))


def evaluation_scenario(benchmark, seed, a_w=0.5, **over):
    """Paired evaluation episode ``seed`` for a benchmark."""
    rng = rng_for(seed, 5)
    if benchmark == "b1":
        kw = dict(duration=B1_DURATION, dt=0.02, friction_schedule=B1_FRICTION_DROP,
                  wind_mean=float(rng.uniform(-2.0, 2.0)), wind_gust=float(rng.uniform(0.0, 1.0)),
                  seed=seed, x0=(0.0, float(rng.uniform(-0.1, 0.1)), 0.0, B1_PATH.speed))
    else:
        kw = dict(duration=B2_DURATION, dt=0.02, a_w=a_w, seed=seed,
                  x0=(float(rng.uniform(-0.5, 0.5)), float(rng.uniform(-0.5, 0.5))))
    kw.update(over)
    return Scenario(**kw)


def disturbance_bound(benchmark, scenario):
    if benchmark == "b1":
        return min(WIND_LIMIT, abs(scenario.wind_mean) + abs(scenario.wind_gust))
    return scenario.a_w


# ---------------------------------------------------------------------------
# Training data
# ---------------------------------------------------------------------------

_DATA_CACHE = {}


def training_data(benchmark, profile, seed):
    key = (benchmark, profile.train_trajectories, profile.train_duration, seed)
    if key not in _DATA_CACHE:
        _DATA_CACHE[key] = training_trajectories(benchmark, profile.train_trajectories, seed,
                                                 profile.train_duration)
    return _DATA_CACHE[key]


def _reanchor_windows(X, rng):
    """Move each window to a local frame at a random point of a rollout.

    Position coordinates are translation invariant; windows start at
    ``px ~ U(0, 6)`` (half the planning horizon's travel) and
    ``py ~ U(-0.5, 0.5)``.
    """
    X = X.copy()
    B = len(X)
    X[..., 0] -= X[:, :1, 0] - rng.uniform(0.0, 6.0, (B, 1))
    X[..., 1] -= X[:, :1, 1] - rng.uniform(-0.5, 0.5, (B, 1))
    return X


def _reanchor_pairs(seed):
    def tf(X, Y, i):
        rng = rng_for(seed, 41, i)
        off = np.column_stack([X[:, 0] - rng.uniform(0.0, 12.0, len(X)),
                               X[:, 1] - rng.uniform(-1.0, 1.0, len(X))])
        X, Y = X.copy(), Y.copy()
        X[:, :2] -= off
        Y[:, :2] -= off
        return X, Y
    return tf


def snapshot_data(benchmark, profile, seed):
    trajs = training_data(benchmark, profile, seed)
    tf = _reanchor_pairs(seed) if benchmark == "b1" else None
    return kp.SnapshotDataset.from_trajectories(trajs, transform=tf)


def window_data(benchmark, profile, seed):
    trajs = training_data(benchmark, profile, seed)
    tf = _reanchor_windows if benchmark == "b1" else None
    return nn_.WindowDataset.from_trajectories(trajs, 5, profile.dt_ctrl, transform=tf,
                                               seed=seed)


# ---------------------------------------------------------------------------
# Method construction
# ---------------------------------------------------------------------------


@dataclass
class MethodArtifact:
    method: MethodId
    benchmark: str
    predictor: object
    koopman: kp.KoopmanModel | None = None
    iss_cert: cert.IssCertificate | None = None
    latent: nn_.NumpyLatentModel | None = None
    csode_cert: cert.CsodeCertificate | None = None
    info: dict = field(default_factory=dict)

    @property
    def certified(self):
        return self.iss_cert is not None or self.csode_cert is not None


def _neural_spec(benchmark, method, profile):
    plant = make_plant(benchmark)
    n, m, q = plant.n, plant.m, plant.n_xi
    if method == MethodId.VanillaNode:
        return {"kind": method.value, "n": n, "r": n, "m": m, "n_xi": q,
                "ae_trainable": False, "ae_hidden": 0,
                "nominal": {"type": "vanilla", "hidden": profile.hidden, "use_xi": False}}
    use_xi = method != MethodId.AblateNoIcode
    stable = method != MethodId.AblateNoIss
    return {"kind": method.value, "n": n, "r": n + profile.latent_extra, "m": m, "n_xi": q,
            "ae_trainable": True, "ae_hidden": profile.ae_hidden,
            "nominal": {"type": "csode", "kappa": profile.kappa, "hidden": profile.hidden,
                        "stable": stable, "a_min": 1.0, "use_xi": use_xi,
                        "time_unit": profile.time_unit}}


def _train_config(method, profile, seed, base=None):
    """Training settings for ``method``; the variant's loss masks apply on top of ``base``."""
    if base is None:
        cfg = nn_.TrainConfig(epochs=profile.epochs, batch_size=profile.batch_size, lr=profile.lr,
                              w_sector=profile.w_sector, w_bundle=profile.w_bundle,
                              w_recon=profile.w_recon, w_cert=profile.w_cert,
                              step=profile.dt_ctrl, seed=seed)
    else:
        cfg = replace(base, step=profile.dt_ctrl, seed=seed)
    if method == MethodId.VanillaNode:
        cfg = replace(cfg, w_sector=0.0, w_bundle=0.0, w_recon=0.0, w_cert=0.0)
    elif method == MethodId.AblateNoBundle:
        cfg = replace(cfg, w_bundle=0.0)
    elif method == MethodId.AblateNoIss:
        cfg = replace(cfg, w_sector=0.0, w_cert=0.0)
    return cfg


def _normalizers(benchmark, data):
    X = data.X.reshape(-1, data.X.shape[-1])
    plant = make_plant(benchmark)
    xc, xs = X.mean(0), X.std(0)
    xs = np.where(xs > 1e-9, xs, 1.0)
    if plant.n_xi:
        XI = data.XI.reshape(-1, plant.n_xi)
        lo, hi = XI.min(0), XI.max(0)
        xic, xis = 0.5 * (lo + hi), np.where(hi > lo, 0.5 * (hi - lo), 1.0)
    else:
        xic, xis = np.zeros(0), np.ones(0)
    return xc, xs, xic, xis, np.asarray(plant.u_high, dtype=float)


def initial_atlas(model, data):
    with torch.no_grad():
        Z = model.ae.encode(nn_._t(data.X[:, :-1].reshape(-1, data.X.shape[-1]))).numpy()
        XI = model.norm_xi(nn_._t(data.XI)).numpy().reshape(len(Z), -1)
    return nn_.BundleAtlas.calibrate(Z, XI)


def latent_box(model, data):
    with torch.no_grad():
        Z = model.ae.encode(nn_._t(data.X.reshape(-1, data.X.shape[-1]))).numpy()
    return Z.min(0), Z.max(0)


def train_neural(benchmark, method, profile, seed, log=None, train_config=None):
    """Train a latent model for ``method``; returns ``(model, info)``.

    ``train_config`` (a :class:`neural.TrainConfig`) replaces the settings
    derived from ``profile``.
    """
    method = MethodId(method)
    torch.manual_seed(seed)
    data = window_data(benchmark, profile, seed)
    tr, val = data.split(0.9, seed)
    xc, xs, xic, xis, us = _normalizers(benchmark, data)
    spec = _neural_spec(benchmark, method, profile)
    model = nn_.build_model(spec, xc, xs, xic, xis, us, seed=seed)
    cfg = _train_config(method, profile, seed, train_config)
    if cfg.w_bundle > 0:
        model.atlas = initial_atlas(model, tr)
    model, trace = nn_.train(model, tr, cfg, val, log=log)
    info = {"trace": trace, "params": model.param_count()}
    nom = model.nominal
    if isinstance(nom, nn_.CsodeField) and cfg.w_sector > 0:
        zl, zh = latent_box(model, data)
        info["sector_scale"] = nn_.repair_sector(model, (zl, zh), (-np.ones(1), np.ones(1)),
                                                 seed=seed)
    if method != MethodId.VanillaNode:
        model, rinfo = nn_.residual_fit(model, residual_segments(benchmark, profile, seed),
                                        hidden=profile.hidden,
                                        use_xi=method != MethodId.AblateNoIcode, seed=seed,
                                        windows=tr, refine_epochs=profile.refine_epochs,
                                        batch=profile.batch_size)
        info.update(rinfo)
    with torch.no_grad():
        info["val_pred"] = float(nn_.prediction_loss(model, nn_._t(val.X), nn_._t(val.U),
                                                     nn_._t(val.XI), cfg.step))
    return model, info


def residual_segments(benchmark, profile, seed, length=1.5):
    """Training trajectories cut into ``length``-second pieces.

    On b1 each piece is moved into the same local frame as the training
    windows, so the residual sees the state region the planner uses.
    """
    trajs = training_data(benchmark, profile, seed)
    if benchmark != "b1":
        return trajs
    rng = rng_for(seed, 43)
    out = []
    for tr in trajs:
        if tr.failed:
            continue
        L = int(round(length / (tr.t[1] - tr.t[0])))
        for s in range(0, len(tr.t) - L, L):
            sl = slice(s, s + L + 1)
            x = tr.x[sl].copy()
            x[:, 0] += rng.uniform(0.0, 6.0) - x[0, 0]
            x[:, 1] += rng.uniform(-0.5, 0.5) - x[0, 1]
            out.append(Trajectory(tr.t[sl], x, tr.u[sl], tr.w[sl], tr.xi[sl]))
    return out


def certify_neural(model, data, profile):
    nom = model.nominal
    if not (isinstance(nom, nn_.CsodeField) and nom.stable):
        return None, None
    A = nom.A().detach().numpy()
    try:
        c = cert.synthesize_csode_cert(A, nom.kappa, delta_b=(model.atlas.delta_b
                                                              if model.atlas else 0.0))
    except cert.Infeasible as exc:
        return None, str(exc)
    nm = nn_.NumpyLatentModel(model)
    zl, zh = latent_box(model, data)
    q = nom.n_xi
    rep = cert.verify_sector(lambda z, xi: nm.phi(z, xi), nom.kappa, (zl, zh),
                             (-np.ones(q), np.ones(q)) if q else None, 100_000, seed=1)
    c.meta["sector"] = asdict(rep)
    return c, None


def _cache_dir(cache, benchmark, method, seed, profile):
    root = cache or os.environ.get("SAFEDYN_CACHE", os.path.join(os.getcwd(), ".safedyn_cache"))
    return os.path.join(root, f"{benchmark}-{method.value}-s{seed}-{profile.key()}")


def build_method(benchmark, method, seed=0, profile=Profile(), cache=None, log=None):
    """Identify/train (or load from cache) the model behind ``method``."""
    method = MethodId(method)
    if benchmark == "b2" and method.is_ablation:
        raise ValueError("ablation variants are defined on benchmark b1 only")
    d = _cache_dir(cache, benchmark, method, seed, profile)
    if method.is_koopman:
        path = os.path.join(d, "model.json")
        if os.path.exists(path):
            model = kp.KoopmanModel.from_json(open(path).read())
            c = None
            if os.path.exists(os.path.join(d, "cert.json")):
                c = cert.IssCertificate.from_json(open(os.path.join(d, "cert.json")).read())
        else:
            model, c = identify_koopman(benchmark, method, profile, seed)
            os.makedirs(d, exist_ok=True)
            with open(path, "w") as fh:
                fh.write(model.to_json())
            if c is not None:
                with open(os.path.join(d, "cert.json"), "w") as fh:
                    fh.write(c.to_json())
        return MethodArtifact(method, benchmark, KoopmanPredictor(model), koopman=model,
                              iss_cert=c, info=dict(model.meta))
    if os.path.exists(os.path.join(d, "manifest.json")):
        model, meta = nn_.load_checkpoint(d)
        c = cert.CsodeCertificate.from_json(json.dumps(meta["cert"])) if meta.get("cert") else None
        info = meta.get("info", {})
    else:
        t0 = time.perf_counter()
        model, info = train_neural(benchmark, method, profile, seed, log=log)
        wd = window_data(benchmark, profile, seed)
        info["latent_eps_max"] = latent_eps_max(model, wd)
        c, why = certify_neural(model, wd, profile)
        if why:
            info["cert_failure"] = why
        nn_.save_checkpoint(model, d, {"info": info,
                                       "cert": json.loads(c.to_json()) if c else None})
        # wall time stays out of the manifest so that checkpoints are byte-reproducible
        with open(os.path.join(d, "timing.txt"), "w") as fh:
            fh.write(f"build_s {time.perf_counter() - t0:.3f}\n")
    nm = nn_.NumpyLatentModel(model)
    return MethodArtifact(method, benchmark, LatentPredictor(nm), latent=nm,
                          csode_cert=c, info=info)


def default_dictionary(data, profile, seed):
    return kp.build_default_dictionary(data, profile.koopman_degree, profile.stls_threshold,
                                       profile.n_rbf, seed)


def identify_koopman(benchmark, method, profile, seed):
    data = snapshot_data(benchmark, profile, seed)
    d = default_dictionary(data, profile, seed)
    if method == MethodId.KoopmanUncert:
        model = kp.edmd_fit(data, d, profile.koopman_rho_uncert)
        model.meta["max_residual"] = kp.model_residual_max(model, data)
        return model, None
    model, c, ladder = cert.recertify_loop(data, d, profile.koopman_gamma_max,
                                           profile.koopman_rho0, profile.koopman_rho_max,
                                           profile.tol_bisect)
    model.meta["max_residual"] = kp.model_residual_max(model, data)
    model.meta["ladder"] = [[r, s] for r, s in ladder]
    return model, c


# ---------------------------------------------------------------------------
# Episodes
# ---------------------------------------------------------------------------


def _bound_fn(art, setup, w_bar):
    c = art.csode_cert
    if c is None:
        return None
    lmax = float(sym_eig(c.P)[0][-1])
    alpha = c.margin / (2.0 * lmax)
    Qn = float(np.linalg.norm(setup.mppi.Q, 2))
    return lambda e0: variance_bound(c.gamma_nn, alpha, c.gamma_nn, e0, w_bar, setup.mppi.T,
                                     Qn, setup.mppi.M)


def iss_errors(art, traj, setup, window=1.0):
    """Model-vs-plant error sequences over windows of ``window`` seconds.

    Each window starts at a plant sample, re-anchors the local frame there,
    and predicts open loop with the logged inputs and zero disturbance.
    Returns a list of ``(e, w)`` pairs, one per window.
    """
    dt = float(traj.t[1] - traj.t[0])
    out = []
    if art.koopman is not None:
        stride = int(round(window / dt))
        model = art.koopman
        for s in range(0, len(traj.t) - stride, stride):
            sl = slice(s, s + stride + 1)
            x = traj.x[sl]
            off = setup.frame(x[0]) if setup.frame else np.zeros(x.shape[1])
            z = model.lift(x - off)
            zh = np.empty_like(z)
            zh[0] = z[0]
            for k in range(stride):
                zh[k + 1] = model.A @ zh[k] + model.B @ traj.u[s + k]
            out.append((z - zh, traj.w[sl]))
        return out
    nm = art.latent
    h = setup.mppi.dt_ctrl
    sub = int(round(h / dt))
    stride = int(round(window / h))
    idx_all = np.arange(0, len(traj.t), sub)
    for a in range(0, len(idx_all) - stride, stride):
        idx = idx_all[a:a + stride + 1]
        x = traj.x[idx]
        off = setup.frame(x[0]) if setup.frame else np.zeros(x.shape[1])
        z = nm.encode(x - off)
        zh = np.empty_like(z)
        zh[0] = z[0]
        for k in range(stride):
            zh[k + 1] = nm.rk4(zh[k][None], traj.u[idx[k]][None],
                               nm.norm_xi(traj.xi[idx[k]])[None], h)[0]
        out.append((z - zh, traj.w[idx]))
    return out


def iss_certificate_pair(art):
    """``(P, gamma, margin, eps_max)`` of a certified artifact, else None."""
    if art.iss_cert is not None:
        c = art.iss_cert
        return c.P, c.gamma, c.margin, float(art.koopman.meta.get("max_residual", 0.0))
    if art.csode_cert is not None:
        c = art.csode_cert
        return c.P, c.gamma_nn, c.margin, float(art.info.get("latent_eps_max", 0.0))
    return None


def episode_iss_rate(art, traj, setup, strict=False):
    """Step-weighted dissipation-inequality rate over the episode's windows.

    The slack is the Young bound for a one-step model residual no larger
    than the largest one seen on the training data; ``strict`` uses zero.
    """
    pair = iss_certificate_pair(art)
    if pair is None:
        return float("nan")
    P, g, margin, eps = pair
    tol = 0.0 if strict else cert.dissipation_tolerance(P, g, margin, eps)
    rates, counts = [], []
    for e, w in iss_errors(art, traj, setup):
        counts.append(len(e) - 1)
        rates.append(cert.empirical_iss_rate(e, w, P, g, tol) if np.all(np.isfinite(e)) else 0.0)
    if not counts:
        return float("nan")
    return float(np.average(rates, weights=counts))


def latent_eps_max(model, data):
    """Largest one-step latent prediction residual over the training windows."""
    with torch.no_grad():
        X, U, XI = nn_._t(data.X), nn_._t(data.U), nn_._t(data.XI)
        z0 = model.ae.encode(X[:, 0])
        z1 = model.rk4(z0, U[:, 0], model.norm_xi(XI[:, 0]), data.step)
        r = torch.linalg.vector_norm(model.ae.encode(X[:, 1]) - z1, dim=-1)
    return float(r.max())


@dataclass
class EpisodeResult:
    index: int
    seed: int
    rmse: float
    peak: float
    smoothness: float
    iss_rate: float
    iss_rate_strict: float
    cost_variance: float
    bound_satisfaction: float
    failed: str | None
    step_ms: float
    traj: object = None
    telemetry: list = None


def run_episode(art, setup, scenario, seed, index=0, keep=False):
    """Closed-loop MPPI episode with ``art``'s predictor."""
    w_bar = disturbance_bound(setup.name, scenario)
    ctl = MppiController(art.predictor, setup.mppi, seed=seed, frame=setup.frame,
                         bound_fn=_bound_fn(art, setup, w_bar))

    def ctrl(k, t, x, xi):
        u, _ = ctl.control_step(x, xi, setup.reference(t, x), t)
        return u
    sub = int(round(setup.mppi.dt_ctrl / scenario.dt))
    traj = simulate_episode(setup.plant, zero_order_hold(ctrl, sub), scenario)
    err = setup.tracking_error(traj)
    tel = ctl.telemetry
    var = np.array([r["sigma_J2"] for r in tel])
    bounds = [r["bound"] for r in tel]
    if bounds and bounds[0] is not None:
        b = np.array(bounds, dtype=float)
        ok = np.isfinite(var)
        sat = float(np.mean(var[ok] <= b[ok])) if ok.any() else 0.0
    else:
        sat = float("nan")
    ms = [r["step_ms"] for r in tel[1:]] or [float("nan")]
    return EpisodeResult(index, seed, float(np.sqrt(np.mean(err ** 2))), float(np.max(np.abs(err))),
                         setup.smoothness(traj), episode_iss_rate(art, traj, setup),
                         episode_iss_rate(art, traj, setup, strict=True),
                         float(np.nanmean(var)) if np.isfinite(var).any() else float("nan"),
                         sat, traj.failed, float(np.median(ms)),
                         traj if keep else None, tel if keep else None)


def episode_seeds(seed, episodes):
    return [int(rng_for(seed, 100, i).integers(2 ** 31)) for i in range(episodes)]


EPISODE_FIELDS = ("index", "seed", "rmse", "peak", "smoothness", "iss_rate", "iss_rate_strict",
                  "cost_variance",
                  "bound_satisfaction", "failed")


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_episode_csv(path, results):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\r\n")
        wr.writerow(EPISODE_FIELDS)
        for r in results:
            wr.writerow([_fmt(getattr(r, f)) for f in EPISODE_FIELDS])


def read_episode_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for row in rows:
        out.append({k: (float(v) if k not in ("failed",) and v != "" else (v or None))
                    for k, v in row.items()})
    return out


def aggregate(benchmark, method, results):
    rm = np.array([r.rmse for r in results])
    sm = np.array([r.smoothness for r in results])
    iss = np.array([r.iss_rate for r in results])
    iss0 = np.array([r.iss_rate_strict for r in results])
    var = np.array([r.cost_variance for r in results])
    sat = np.array([r.bound_satisfaction for r in results])
    nanmean = lambda a: float(np.mean(a[np.isfinite(a)])) if np.isfinite(a).any() else float("nan")
    return MetricsReport(
        benchmark, method, len(results), float(np.mean(rm)), float(np.std(rm)),
        float(np.mean(sm)), float(np.std(sm)), nanmean(iss), nanmean(iss0), nanmean(var),
        nanmean(sat),
        int(sum(r.failed is not None for r in results)),
        step_time_ms=float(np.median([r.step_ms for r in results])))


def _episode_job(job):
    benchmark, profile, art, scenario, seed, index, keep = job
    return run_episode(art, benchmark_setup(benchmark, profile), scenario, seed, index, keep)


def run_episodes(art, benchmark, profile, scenarios, seeds, workers=1, keep=False):
    """Run paired episodes, fanned out over ``workers`` processes, ordered by index."""
    jobs = [(benchmark, profile, art, sc, s, i, keep)
            for i, (sc, s) in enumerate(zip(scenarios, seeds))]
    if workers <= 1 or len(jobs) < 2:
        return [_episode_job(j) for j in jobs]
    import multiprocessing as mp
    with mp.get_context("fork").Pool(workers) as pool:
        out = pool.map(_episode_job, jobs, chunksize=1)
    return sorted(out, key=lambda r: r.index)


def run_method(benchmark, method, episodes=50, seed=0, profile=Profile(), out=None, cache=None,
               a_w=0.5, keep=False, workers=1):
    """Evaluate ``method`` on ``episodes`` paired episodes.

    Returns ``(report, results)``. With ``out`` set, writes
    ``<benchmark>_<method>_episodes.csv`` and re-reads it to cross-check the
    aggregates.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    method = MethodId(method)
    art = build_method(benchmark, method, seed, profile, cache)
    seeds = episode_seeds(seed, episodes)
    scenarios = [evaluation_scenario(benchmark, s, a_w=a_w) for s in seeds]
    results = run_episodes(art, benchmark, profile, scenarios, seeds, workers, keep)
    rep = aggregate(benchmark, method.value, results)
    if out is not None:
        os.makedirs(out, exist_ok=True)
        path = os.path.join(out, f"{benchmark}_{method.value}_episodes.csv")
        write_episode_csv(path, results)
        rows = read_episode_csv(path)
        again = float(np.mean([r["rmse"] for r in rows]))
        if again != rep.tracking_rmse:
            raise RuntimeError("per-episode CSV does not reproduce the aggregate RMSE")
    return rep, results


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------


def open_loop_rmse(art, trajs, setup):
    """Position RMSE of open-loop predictions with logged inputs, zero disturbance."""
    errs = []
    for tr in trajs:
        if art.koopman is not None:
            m = art.koopman
            z = m.lift(tr.x[0])
            qs = [z[0]]
            for k in range(len(tr.t) - 1):
                z = m.A @ z + m.B @ tr.u[k]
                qs.append(z[0])
            q = np.array(qs)
            errs.append(q - tr.x[:, 0])
        else:
            nm = art.latent
            h = setup.mppi.dt_ctrl
            sub = int(round(h / (tr.t[1] - tr.t[0])))
            idx = np.arange(0, len(tr.t), sub)
            z = nm.encode(tr.x[0][None])
            qs = [nm.decode(z)[0, 0]]
            for k in idx[:-1]:
                z = nm.rk4(z, tr.u[k][None], nm.norm_xi(tr.xi[k])[None], h)
                qs.append(nm.decode(z)[0, 0])
            errs.append(np.array(qs) - tr.x[idx, 0])
    e = np.concatenate(errs)
    return float(np.sqrt(np.mean(e ** 2))) if np.all(np.isfinite(e)) else float("inf")


def sweep_trajectories(a_w, count, seed, duration=10.0):
    """Held-out Duffing trajectories at forcing amplitude ``a_w``."""
    plant = make_plant("b2")
    out = []
    for i in range(count):
        s = int(rng_for(seed, 200, i).integers(2 ** 31))
        base = random_training_scenario("b2", s, duration)
        sc = replace(base, a_w=float(a_w))
        out.append(simulate_episode(plant, exploration_controller("b2", s, sc, plant), sc))
    return out


def linear_fit_r2(x, y):
    x, y = np.asarray(x, float), np.asarray(y, float)
    A = np.column_stack([x, np.ones_like(x)])
    coef = np.linalg.lstsq(A, y, rcond=None)[0]
    res = y - A @ coef
    ss = np.sum((y - y.mean()) ** 2)
    return float(1.0 - np.sum(res ** 2) / ss) if ss > 0 else 1.0, coef


def disturbance_sweep(methods=(MethodId.KoopmanIss,), grid=(0.0, 0.2, 0.4, 0.6, 0.8, 1.0),
                      count=100, seed=0, profile=Profile(), cache=None):
    """Open-loop position RMSE vs forcing amplitude on benchmark b2.

    Returns ``{"a_w": grid, "rmse": {method: [...]}, "r2": ..., "slope": ...}``
    where the line fit is to the certified-Koopman column (or the first
    method when that one is absent).
    """
    grid = [float(a) for a in grid]
    if len(grid) < 4 or any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError("a_w grid must be ascending with at least 4 points")
    setup = benchmark_setup("b2", profile)
    arts = {MethodId(m).value: build_method("b2", m, seed, profile, cache) for m in methods}
    table = {k: [] for k in arts}
    for a in grid:
        trajs = sweep_trajectories(a, count, seed)
        for k, art in arts.items():
            table[k].append(open_loop_rmse(art, trajs, setup))
    key = MethodId.KoopmanIss.value if MethodId.KoopmanIss.value in table else next(iter(table))
    r2, coef = linear_fit_r2(grid, table[key])
    return {"a_w": grid, "rmse": table, "fit_method": key, "r2": r2, "slope": float(coef[0]),
            "intercept": float(coef[1])}


def dictionary_sweep(data, degrees=(1, 2, 3, 4), profile=Profile()):
    """Residual and certified gain for nested polynomial dictionaries.

    ``eps_state`` is the one-step residual on the state coordinates (a
    target common to all dictionaries) of a fit at the shared ridge
    ``koopman_rho0``, so nesting makes it non-increasing up to round-off.
    ``gamma_star`` comes from each dictionary's own ridge ladder, and
    ``eps_state_certified`` / ``eps_lifted`` describe that certified fit. An
    infeasible certificate is recorded as ``inf``.
    """
    degrees = list(degrees)
    if any(b <= a for a, b in zip(degrees, degrees[1:])):
        raise ValueError("degrees must be ascending")
    rows = []
    for deg in degrees:
        d = kp.Dictionary.polynomial(data.n, deg)
        row = {"degree": deg, "size": d.size}
        try:
            model, c, ladder = cert.recertify_loop(data, d, profile.koopman_gamma_max,
                                                   profile.koopman_rho0, profile.koopman_rho_max,
                                                   profile.tol_bisect)
            row.update(rho=ladder[-1][0], gamma_star=c.meta["gamma_star"], gamma=c.gamma,
                       diagnosis="certified")
        except cert.CertificationFailure as exc:
            model = kp.edmd_fit(data, d, profile.koopman_rho_max)
            row.update(rho=float("nan"), gamma_star=float("inf"), gamma=float("inf"),
                       diagnosis=exc.diagnosis)
        row["eps_lifted"] = kp.model_residual(model, data)
        row["eps_state_certified"] = kp.state_residual(model, data)
        row["eps_state"] = kp.state_residual(kp.edmd_fit(data, d, profile.koopman_rho0), data)
        rows.append(row)
    tol = 2 * profile.tol_bisect
    eps_mono = all(b["eps_state"] <= a["eps_state"] * (1 + 1e-9) + 1e-12
                   for a, b in zip(rows, rows[1:]))
    gam_mono = all(b["gamma_star"] <= a["gamma_star"] * (1 + tol) + tol
                   for a, b in zip(rows, rows[1:]))
    return {"rows": rows, "eps_monotone": eps_mono, "gamma_monotone": gam_mono}


def ablation(episodes=30, seed=0, profile=Profile(), out=None, cache=None, workers=1):
    """Run the full pipeline and its three ablations on b1 with paired episodes."""
    reports = {}
    for m in ABLATION_METHODS:
        rep, _ = run_method("b1", m, episodes, seed, profile, out, cache, workers=workers)
        reports[m.value] = rep
    return variance_ratios(reports)


def variance_ratios(reports, base=MethodId.CsodeIcodeMppi.value):
    """Set each report's ``cost_variance_ratio`` relative to ``reports[base]``."""
    ref = reports[base].cost_variance
    for rep in reports.values():
        rep.cost_variance_ratio = rep.cost_variance / ref if ref > 0 else float("nan")
    return reports
