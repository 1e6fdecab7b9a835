import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from scipy.linalg import expm

from safedyn import neural as nn_
from safedyn.numkit import rk4_step
from safedyn.plants import DUFFING_DAMPING, Trajectory

T = nn_._t


def _ae(n, trainable=False, r=None, hidden=4, seed=0):
    return nn_.Autoencoder(n, r or n, hidden, np.zeros(n), np.ones(n),
                           gen=torch.Generator().manual_seed(seed), trainable=trainable)


def _zero_module(mod):
    with torch.no_grad():
        for p in mod.parameters():
            p.zero_()
    return mod


# --- CSODE field -----------------------------------------------------------------


def test_csode_zero_learned_parts_cancel_to_rest():
    f = nn_.CsodeField(2, 1, 0, 1.0, 4, stable=False)
    _zero_module(f)
    with torch.no_grad():
        f.Araw.copy_(-0.5 * torch.eye(2, dtype=nn_.DTYPE))
    z = T([[0.3, -1.2]])
    # A = -kappa/2 I cancels the sector centre, B = 0 and h = 0
    assert torch.equal(f(z, T([[0.7]]), T(np.zeros((1, 0)))), torch.zeros(1, 2, dtype=nn_.DTYPE))


def test_csode_linear_mode():
    f = nn_.CsodeField(2, 1, 0, 1.0, 4, stable=False)
    _zero_module(f.h)
    z = T([[0.3, -1.2]])
    out = f(z, T([[0.0]]), T(np.zeros((1, 0))))
    want = z @ (f.Araw + 0.5 * torch.eye(2, dtype=nn_.DTYPE)).T
    assert torch.allclose(out, want, atol=1e-15)


def test_csode_hand_set_forward_pass():
    f = nn_.CsodeField(2, 1, 0, 0.5, 1, stable=False)
    with torch.no_grad():
        f.Araw.copy_(T([[-1.0, 2.0], [0.0, -3.0]]))
        f.B.copy_(T([[1.0], [-1.0]]))
        f.h.layers[0].weight.copy_(T([[1.0, 1.0]]))
        f.h.layers[0].bias.copy_(T([0.5]))
        f.h.layers[1].weight.copy_(T([[2.0], [-1.0]]))
        f.h.layers[1].bias.copy_(T([0.1, 0.2]))
    z1, z2, u = 0.4, -0.1, 0.3
    # scalar hand evaluation of A z + kappa/2 z + (h(z) - h(0)) + B u
    dh = np.tanh(z1 + z2 + 0.5) - np.tanh(0.5)
    want = [-z1 + 2 * z2 + 0.25 * z1 + 2 * dh + u,
            -3 * z2 + 0.25 * z2 - dh - u]
    got = f(T([[z1, z2]]), T([[u]]), T(np.zeros((1, 0)))).detach().numpy()[0]
    assert np.allclose(got, want, atol=1e-15)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), tau=st.sampled_from([1.0, 10.0]))
def test_csode_forward_is_three_term_sum(seed, tau):
    gen = torch.Generator().manual_seed(seed)
    f = nn_.CsodeField(3, 2, 1, 0.25, 6, time_unit=tau, gen=gen)
    with torch.no_grad():
        for p in f.h.parameters():
            p.normal_(generator=gen)
    z = torch.randn(5, 3, dtype=nn_.DTYPE, generator=gen)
    u = torch.randn(5, 2, dtype=nn_.DTYPE, generator=gen)
    xi = torch.randn(5, 1, dtype=nn_.DTYPE, generator=gen)
    # certificate operands live in model time; forward is per second
    want = (z @ f.A().T + f.phi(z, xi)) / tau + u @ f.B.T
    assert torch.allclose(f(z, u, xi), want, atol=1e-12)


def test_csode_stable_parametrisation_is_hurwitz():
    gen = torch.Generator().manual_seed(3)
    f = nn_.CsodeField(4, 1, 0, 0.25, 4, gen=gen)
    with torch.no_grad():
        f.L.normal_(generator=gen)
        f.S.normal_(generator=gen)
    assert np.max(np.linalg.eigvals(f.A().detach().numpy()).real) <= -f.a_min + 1e-12


def test_csode_phi_vanishes_at_origin():
    gen = torch.Generator().manual_seed(1)
    f = nn_.CsodeField(2, 1, 1, 0.25, 4, gen=gen)
    with torch.no_grad():
        for p in f.h.parameters():
            p.normal_(generator=gen)
    xi = torch.randn(7, 1, dtype=nn_.DTYPE, generator=gen)
    assert torch.equal(f.phi(torch.zeros(7, 2, dtype=nn_.DTYPE), xi),
                       torch.zeros(7, 2, dtype=nn_.DTYPE))


def test_csode_rejects_nonpositive_time_unit():
    with pytest.raises(ValueError):
        nn_.CsodeField(2, 1, 0, 0.25, 4, time_unit=0.0)


# --- ICODE field -----------------------------------------------------------------


def _icode(r=2, m=1, q=2, seed=0, zero_g=True):
    f = nn_.IcodeField(r, m, q, 4, init_scale=1.0, gen=torch.Generator().manual_seed(seed))
    if zero_g:
        _zero_module(f.g)
    return f


def test_icode_zero_environment_reduction():
    f = _icode()
    z, u = T([[0.5, -2.0]]), T([[1.5]])
    got = f(z, u, torch.zeros(1, 2, dtype=nn_.DTYPE))
    assert torch.allclose(got, z @ f.A0.T + u @ f.B0.T, atol=1e-15)


def test_icode_scalar_damping_modulation():
    f = nn_.IcodeField(1, 1, 1, 2)
    _zero_module(f)
    with torch.no_grad():
        f.A0.fill_(-1.0)
        f.N.fill_(-2.0)
    z = T([[0.8]])
    # effective pole A0 + xi N = -2
    assert f(z, T([[0.0]]), T([[0.5]])).item() == pytest.approx(-2.0 * 0.8, abs=1e-15)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_icode_linear_in_environment(seed):
    f = _icode(seed=seed)
    gen = torch.Generator().manual_seed(seed)
    z = torch.randn(4, 2, dtype=nn_.DTYPE, generator=gen)
    u = torch.randn(4, 1, dtype=nn_.DTYPE, generator=gen)
    x1 = torch.randn(4, 2, dtype=nn_.DTYPE, generator=gen)
    x2 = torch.randn(4, 2, dtype=nn_.DTYPE, generator=gen)
    with torch.no_grad():
        d0 = f(z, u, torch.zeros_like(x1))
        lhs = f(z, u, x1 + x2) - d0
        rhs = (f(z, u, x1) - d0) + (f(z, u, x2) - d0)
    assert torch.allclose(lhs, rhs, atol=1e-12)


def test_icode_zero_reset():
    f = _icode(zero_g=False).zero_()
    out = f(T([[1.0, 2.0]]), T([[3.0]]), T([[0.5, 0.5]]))
    assert torch.equal(out, torch.zeros(1, 2, dtype=nn_.DTYPE))


def test_vanilla_ignores_environment_unless_enabled():
    f = nn_.VanillaField(2, 1, 1, 8, gen=torch.Generator().manual_seed(0))
    z, u = T([[0.1, 0.2]]), T([[0.3]])
    assert torch.equal(f(z, u, T([[0.0]])), f(z, u, T([[5.0]])))
    g = nn_.VanillaField(2, 1, 1, 8, use_xi=True, gen=torch.Generator().manual_seed(0))
    assert not torch.equal(g(z, u, T([[0.0]])), g(z, u, T([[5.0]])))


# --- bundle ----------------------------------------------------------------------


def _unit_fiber():
    return nn_.BundleAtlas(np.array([-1.0]), np.zeros((1, 0)), np.array([1.0]), np.zeros((1, 0)))


def test_bundle_inside_is_zero():
    assert nn_.bundle_distance(_unit_fiber(), np.array([0.3]), np.zeros(0)) == 0.0


def test_bundle_one_dimensional_box():
    a = _unit_fiber()
    assert nn_.bundle_distance(a, np.array([3.0]), np.zeros(0)) == pytest.approx(2.0)
    assert nn_.bundle_loss(a, T([[3.0]]), T(np.zeros((1, 0)))).item() == pytest.approx(4.0)


def test_bundle_torch_and_numpy_agree():
    a = nn_.BundleAtlas(np.array([-1.0, 0.0]), np.array([[0.5], [0.0]]),
                        np.array([1.0, 2.0]), np.array([[0.5], [1.0]]))
    rng = np.random.default_rng(0)
    z, xi = 3 * rng.standard_normal((50, 2)), rng.uniform(-1, 1, (50, 1))
    d_np = nn_.bundle_distance(a, z, xi)
    d_t = nn_.bundle_distance(a, T(z), T(xi)).numpy()
    assert np.allclose(d_np, d_t, atol=1e-14)
    assert nn_.bundle_loss(a, T(z), T(xi)).item() == pytest.approx(np.sum(d_np ** 2))


def test_bundle_gradient_matches_finite_differences():
    a = nn_.BundleAtlas(np.array([-1.0, 0.0]), np.array([[0.5], [0.0]]),
                        np.array([1.0, 2.0]), np.array([[0.5], [1.0]]))
    rng = np.random.default_rng(2)
    z0, xi = 3 * rng.standard_normal((20, 2)), T(rng.uniform(-1, 1, (20, 1)))
    lo, hi = a.bounds(xi.numpy())
    keep = np.all((np.abs(z0 - lo) > 1e-3) & (np.abs(z0 - hi) > 1e-3), axis=1)
    z = T(z0[keep]).requires_grad_(True)
    nn_.bundle_loss(a, z, xi[keep]).backward()
    g = z.grad.numpy()
    eps = 1e-6
    fd = np.zeros_like(g)
    with torch.no_grad():
        for i in range(g.shape[0]):
            for j in range(g.shape[1]):
                zp, zm = z.detach().clone(), z.detach().clone()
                zp[i, j] += eps
                zm[i, j] -= eps
                fd[i, j] = (nn_.bundle_loss(a, zp, xi[keep]) - nn_.bundle_loss(a, zm, xi[keep])
                            ).item() / (2 * eps)
    assert np.max(np.abs(g - fd)) <= 1e-6 * max(1.0, np.max(np.abs(g)))


def test_bundle_calibration_keeps_fibres_nonempty():
    rng = np.random.default_rng(0)
    XI = rng.uniform(-1, 1, (400, 1))
    Z = np.column_stack([XI[:, 0] + 0.1 * rng.standard_normal(400), np.zeros(400)])
    a = nn_.BundleAtlas.calibrate(Z, XI)
    lo, hi = a.bounds(XI)
    assert np.all(hi > lo)
    back = nn_.BundleAtlas.from_description(a.describe())
    assert np.array_equal(back.bounds(XI)[0], lo)


# --- autoencoder -----------------------------------------------------------------


def test_identity_autoencoder_reconstructs_exactly():
    x = T(np.random.default_rng(0).standard_normal((100, 3)))
    for trainable in (False, True):
        m = nn_.LatentModel(_ae(3, trainable), nn_.IcodeField(3, 1, 0, 4))
        assert nn_.recon_loss(m, x).item() <= 1e-12


def test_autoencoder_rejects_compressing_latent():
    with pytest.raises(ValueError):
        nn_.Autoencoder(3, 2, 4, np.zeros(3), np.ones(3))


# --- penalties -------------------------------------------------------------------


Z_BATCH = T(np.random.default_rng(0).uniform(-3, 3, (256, 2)))


def test_sector_penalty_examples():
    assert nn_.sector_penalty(torch.zeros_like(Z_BATCH), Z_BATCH, 1.0).item() == 0.0
    assert nn_.sector_penalty(torch.tanh(Z_BATCH), Z_BATCH, 1.0).item() == 0.0
    assert nn_.sector_penalty(2 * Z_BATCH, Z_BATCH, 1.0).item() > 0.0


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), kappa=st.floats(0.1, 5.0))
def test_sector_penalty_is_hinge_on_sector_form(seed, kappa):
    rng = np.random.default_rng(seed)
    z, phi = rng.standard_normal((64, 3)), 2 * kappa * rng.standard_normal((64, 3))
    form = np.sum(phi * (z - phi / kappa), axis=1)
    want = np.mean(np.maximum(-form, 0.0) ** 2)
    got = nn_.sector_penalty(T(phi), T(z), kappa).item()
    assert got == pytest.approx(want, rel=1e-9, abs=1e-12)


def test_omega_penalty_zero_for_strongly_stable():
    A = -10 * torch.eye(3, dtype=nn_.DTYPE)
    assert nn_.omega_penalty(A, torch.tensor(1.0, dtype=nn_.DTYPE), 0.25).item() == 0.0


def test_lyapunov_torch_solves_equation():
    A = T([[-1.0, 2.0], [-0.5, -0.3]])
    P = nn_.lyapunov_torch(A)
    assert torch.allclose(P @ A + A.T @ P, -torch.eye(2, dtype=nn_.DTYPE), atol=1e-12)


# --- gradients ---------------------------------------------------------------------


def _small_model(kind, seed=0):
    gen = torch.Generator().manual_seed(seed)
    ae = nn_.Autoencoder(2, 2, 4, np.zeros(2), np.ones(2), gen=gen)
    if kind == "csode":
        nom = nn_.CsodeField(2, 1, 1, 0.25, 4, time_unit=10.0, gen=gen)
        with torch.no_grad():
            nom.h.layers[-1].weight.normal_(0, 0.3, generator=gen)
    elif kind == "icode":
        nom = nn_.IcodeField(2, 1, 1, 4, gen=gen)
        with torch.no_grad():
            nom.g.layers[-1].weight.normal_(0, 0.3, generator=gen)
    else:
        nom = nn_.VanillaField(2, 1, 1, 4, use_xi=True, gen=gen)
    with torch.no_grad():
        for mlp in (ae.enc, ae.dec):
            mlp.layers[-1].weight.normal_(0, 0.1, generator=gen)
    atlas = nn_.BundleAtlas(np.array([-0.5, -0.5]), np.array([[0.2], [0.0]]),
                            np.array([0.5, 0.5]), np.array([[0.2], [0.1]]))
    return nn_.LatentModel(ae, nom, None, np.zeros(1), np.ones(1), np.ones(1), kind=kind,
                           atlas=atlas)


def _windows(B=16, H=5, seed=0):
    rng = np.random.default_rng(seed)
    return T(rng.standard_normal((B, H + 1, 2))), T(rng.standard_normal((B, H, 1))), \
        T(rng.uniform(-1, 1, (B, H, 1)))


@pytest.mark.parametrize("kind", ["csode", "icode", "vanilla"])
def test_total_loss_gradient_matches_finite_differences(kind):
    model = _small_model(kind)
    assert model.param_count() <= 200
    cfg = nn_.TrainConfig(horizon=5, step=0.1)
    X, U, XI = _windows()
    colloc = (T(np.random.default_rng(1).uniform(-2, 2, (16, 2))),
              T(np.random.default_rng(2).uniform(-1, 1, (16, 1))))
    _, parts = nn_.total_loss(model, cfg, X, U, XI, colloc, parts=True)
    expect = {"pred", "recon", "bundle"} | ({"sector", "cert"} if kind == "csode" else set())
    assert set(parts) == expect
    err = nn_.gradient_check(model, lambda: nn_.total_loss(model, cfg, X, U, XI, colloc),
                             eps=1e-5, max_params=200)
    assert err <= 1e-4


def test_gradient_check_flags_wrong_gradient():
    model = _small_model("icode")
    X, U, XI = _windows()

    class Detached(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return x

        @staticmethod
        def backward(ctx, g):
            return 2 * g

    loss = lambda: Detached.apply(nn_.prediction_loss(model, X, U, XI, 0.1))
    assert nn_.gradient_check(model, loss) > 0.1


# --- training ----------------------------------------------------------------------


def _linear_windows(A, B, h=0.1, H=5, count=512, seed=0):
    rng = np.random.default_rng(seed)
    X0, U = rng.standard_normal((count, 2)), rng.standard_normal((count, H, 1))
    Md = expm(np.block([[A, B], [np.zeros((1, 3))]]) * h)
    X = [X0]
    for k in range(H):
        X.append(X[-1] @ Md[:2, :2].T + U[:, k] @ Md[:2, 2:].T)
    return nn_.WindowDataset(np.stack(X, 1), U, np.zeros((count, H, 0)), h)


def test_train_recovers_linear_system():
    A = np.array([[-0.5, 1.0], [-1.0, -0.3]])
    B = np.array([[0.0], [1.0]])
    data = _linear_windows(A, B)
    f = nn_.IcodeField(2, 1, 0, 4, gen=torch.Generator().manual_seed(0))
    for p in f.g.parameters():
        p.requires_grad_(False)
    model = nn_.LatentModel(_ae(2), f, None, np.zeros(0), np.ones(0), np.ones(1), kind="icode")
    cfg = nn_.TrainConfig(epochs=150, batch_size=128, lr=3e-2, lr_final=1e-4, step=0.1)
    model, trace = nn_.train(model, data, cfg)
    assert np.max(np.abs(f.A0.detach().numpy() - A)) <= 1e-3
    assert np.max(np.abs(f.B0.detach().numpy() - B)) <= 1e-3
    assert all(b <= a for a, b in zip(trace, trace[1:]))


def _duffing_windows(seed=0):
    A = np.array([[0.0, 1.0], [-1.0, -DUFFING_DAMPING]])
    return _linear_windows(A, np.array([[0.0], [1.0]]), count=1024, seed=seed)


def _csode_model(seed=0):
    gen = torch.Generator().manual_seed(seed)
    ae = nn_.Autoencoder(2, 3, 8, np.zeros(2), np.ones(2), gen=gen)
    nom = nn_.CsodeField(3, 1, 0, 0.25, 8, time_unit=10.0, gen=gen)
    return nn_.LatentModel(ae, nom, None, np.zeros(0), np.ones(0), np.ones(1), kind="csode")


def test_train_first_epochs_strictly_decrease():
    raw = []
    cfg = nn_.TrainConfig(epochs=10)
    nn_.train(_csode_model(), _duffing_windows(), cfg, log=lambda e, v: raw.append(v))
    assert len(raw) == 10
    assert all(b < a for a, b in zip(raw, raw[1:]))


def test_train_is_bit_reproducible():
    cfg = nn_.TrainConfig(epochs=3)
    a, ta = nn_.train(_csode_model(), _duffing_windows(), cfg)
    b, tb = nn_.train(_csode_model(), _duffing_windows(), cfg)
    assert ta == tb
    for k, v in a.state_dict().items():
        assert torch.equal(v, b.state_dict()[k])


def test_train_aborts_on_divergence():
    model = _csode_model()
    data = _duffing_windows()
    data.X[0, 0, 0] = np.nan
    with pytest.raises(nn_.DivergentTrainingError, match="epoch 0"):
        nn_.train(model, data, nn_.TrainConfig(epochs=1, grad_check=False, batch_size=2048))


def test_window_dataset_from_trajectories():
    t = np.arange(0, 1.0001, 0.02)
    x = np.column_stack([t, 2 * t])
    tr = Trajectory(t, x, t[:, None], np.zeros((len(t), 1)), np.zeros((len(t), 0)))
    d = nn_.WindowDataset.from_trajectories([tr], horizon=2, step=0.1)
    assert d.X.shape[1:] == (3, 2) and d.U.shape[1:] == (2, 1)
    assert np.allclose(np.diff(d.X[:, :, 0], axis=1), 0.1)
    assert np.allclose(d.U[:, 0, 0], d.X[:, 0, 0])


# --- autoencoder training ----------------------------------------------------------


def _duffing_trajs(count, seed, cubic=True, dt=0.02, duration=6.0):
    rng = np.random.default_rng(seed)
    K = int(round(duration / dt))
    out = []
    for _ in range(count):
        x = rng.uniform(-1.5, 1.5, 2)
        hold = rng.uniform(-1, 1, K // 10 + 1)
        xs, us = [x], []
        for k in range(K):
            u = np.array([hold[k // 10]])
            f = lambda _t, s, u=u: np.array(
                [s[1], -DUFFING_DAMPING * s[1] - (s[0] ** 3 if cubic else 0.0) + u[0]])
            x = rk4_step(f, x, k * dt, dt)
            xs.append(x)
            us.append(u)
        us.append(us[-1])
        t = dt * np.arange(K + 1)
        out.append(Trajectory(t, np.array(xs), np.array(us), np.zeros((K + 1, 1)),
                              np.zeros((K + 1, 0))))
    return out


def test_trained_duffing_autoencoder_reconstructs_held_out():
    trajs = _duffing_trajs(12, 0)
    data = nn_.WindowDataset.from_trajectories(trajs[:8], 5, 0.1)
    X = np.concatenate([t.x for t in trajs])
    gen = torch.Generator().manual_seed(0)
    ae = nn_.Autoencoder(2, 4, 16, X.mean(0), X.std(0), gen=gen)
    nom = nn_.IcodeField(4, 1, 0, 16, gen=gen)
    model = nn_.LatentModel(ae, nom, None, np.zeros(0), np.ones(0), np.ones(1), kind="icode")
    nn_.train(model, data, nn_.TrainConfig(epochs=20, lr=3e-3, w_recon=10.0))
    held = T(np.concatenate([t.x for t in trajs[8:]]))
    with torch.no_grad():
        err = ae.decode(ae.encode(held)) - held
    rmse = float(torch.sqrt(torch.mean(torch.sum(err ** 2, -1))))
    rms = float(torch.sqrt(torch.mean(torch.sum(held ** 2, -1))))
    assert rmse <= 0.05 * rms
    # sampled Lipschitz constant of decode(encode(.)) bounds 1e-6 perturbations
    rng = np.random.default_rng(1)
    probe = T(rng.uniform(-1.5, 1.5, (200, 2)))
    roundtrip = lambda x: ae.decode(ae.encode(x))
    J = torch.func.vmap(torch.func.jacrev(roundtrip))(probe)
    lip = 1.1 * float(torch.linalg.matrix_norm(J.detach(), ord=2).max())
    d = rng.standard_normal((200, 2))
    d = T(1e-6 * d / np.linalg.norm(d, axis=1, keepdims=True))
    with torch.no_grad():
        moved = torch.linalg.vector_norm(roundtrip(probe + d) - roundtrip(probe), dim=-1)
    print(f"sampled Lipschitz estimate {lip:.4g}")
    assert float(moved.max()) <= lip * 1e-6


# --- residual compensation ---------------------------------------------------------


class DuffingNominal(torch.nn.Module):
    """Known Duffing field on the normalised identity lifting."""

    def __init__(self, cubic=True):
        super().__init__()
        self.m, self.cubic = 1, cubic
        self.anchor = torch.nn.Parameter(torch.zeros((), dtype=nn_.DTYPE))

    def forward(self, z, u, xi):
        acc = -DUFFING_DAMPING * z[..., 1] + u[..., 0] + self.anchor
        if self.cubic:
            acc = acc - z[..., 0] ** 3
        return torch.stack([z[..., 1], acc], -1)


def _nominal_model(cubic):
    return nn_.LatentModel(_ae(2), DuffingNominal(cubic), None, np.zeros(0), np.ones(0),
                           np.ones(1), kind="icode")


@pytest.fixture(scope="module")
def duffing_trajs():
    return _duffing_trajs(10, 3)


def _derivative_rms(model, trajs, residual=True):
    Z = T(np.concatenate([t.x for t in trajs]))
    U = T(np.concatenate([t.u for t in trajs]))
    XI = torch.zeros(len(Z), 0, dtype=nn_.DTYPE)
    with torch.no_grad():
        nom = model.nominal(Z, U, XI)
        res = model.residual(Z, U, XI) if residual else torch.zeros_like(nom)
    rms = lambda v: float(torch.sqrt(torch.mean(torch.sum(v ** 2, -1))))
    return rms(res), rms(nom)


def _one_step_error(model, trajs):
    errs = []
    with torch.no_grad():
        for tr in trajs:
            x, u = T(tr.x), T(tr.u)
            xi = torch.zeros(len(x) - 1, 0, dtype=nn_.DTYPE)
            pred = model.rk4(x[:-1], u[:-1], xi, 0.02)
            errs.append((pred - x[1:]).numpy())
    e = np.concatenate(errs)
    return float(np.sqrt(np.mean(np.sum(e ** 2, 1))))


def test_residual_of_exact_nominal_stays_small(duffing_trajs):
    model, info = nn_.residual_fit(_nominal_model(True), duffing_trajs, hidden=16, epochs=20)
    res_rms, nom_rms = _derivative_rms(model, duffing_trajs)
    assert res_rms <= 0.1 * nom_rms


def test_residual_compensates_missing_cubic(duffing_trajs):
    model = _nominal_model(False)
    before = _one_step_error(model, duffing_trajs)
    model, info = nn_.residual_fit(model, duffing_trajs, hidden=16, epochs=30)
    after = _one_step_error(model, duffing_trajs)
    assert after <= 0.5 * before
    assert info["residual_mse"] < info["nominal_mse"]
    assert all(p.requires_grad for p in model.parameters())


def test_zero_residual_leaves_nominal_unchanged():
    gen = torch.Generator().manual_seed(0)
    model = _small_model("csode")
    model.residual = nn_.IcodeField(2, 1, 1, 4, init_scale=0.0, gen=gen)
    z, u, xi = T([[0.3, -0.2]]), T([[0.5]]), T([[0.1]])
    assert torch.equal(model.deriv(z, u, xi), model.nominal(z, u, xi))


# --- numpy mirror and checkpoints --------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    model = _small_model("csode")
    nn_.save_checkpoint(model, tmp_path / "m", {"note": "x"})
    back, meta = nn_.load_checkpoint(tmp_path / "m")
    assert meta == {"note": "x"}
    for k, v in model.state_dict().items():
        assert torch.equal(v, back.state_dict()[k])
    X, U, XI = _windows(B=4)
    with torch.no_grad():
        assert torch.equal(model.unroll(X[:, 0], U, XI, 0.1), back.unroll(X[:, 0], U, XI, 0.1))


def test_repair_sector_restores_membership():
    from safedyn.certify import verify_sector
    model = _small_model("csode")
    nom = model.nominal
    with torch.no_grad():
        nom.h.layers[-1].weight.mul_(100.0)
    box = (-2 * np.ones(2), 2 * np.ones(2))
    xbox = (-np.ones(1), np.ones(1))
    nn_.repair_sector(model, box, xbox, count=20_000)

    def phi(z, xi):
        with torch.no_grad():
            return nom.phi(T(z), T(xi)).numpy()

    rep = verify_sector(phi, nom.kappa, box, xbox, count=4096, seed=5)
    assert rep.violations == 0
