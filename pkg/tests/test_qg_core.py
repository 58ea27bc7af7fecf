import numpy as np
import pytest

from qgkoopman import formats
from qgkoopman.qg_core import (
    BlowUpError,
    QGParams,
    QGState,
    compute_velocity,
    enstrophy_layers,
    forward_pv,
    generate_dataset,
    get_grid,
    invert_pv,
    ssd_filter,
    step,
    tendency,
    total_energy,
    truncate_spectral,
)
from qgkoopman.qg_core import _jacobian_hat


def random_q(params, seed, amp=1e-5, kmax_frac=0.5):
    rng = np.random.default_rng(seed)
    g = get_grid(params)
    qh = np.fft.rfft2(rng.standard_normal((2, params.ny, params.nx)))
    qh *= np.sqrt(g.k2) < kmax_frac * g.k_nyq
    qh[..., 0, 0] = 0
    q = np.fft.irfft2(qh, s=(params.ny, params.nx))
    return amp * q / np.abs(q).max()


def rossby_params(nx=16):
    return QGParams(nx=nx, ny=nx, kd2=0.0, U1=0.0, U2=0.0, r_ek=0.0, ssd_strength=0.0)


# --- parameters -------------------------------------------------------------

def test_default_params_match_reference_values():
    p = QGParams()
    assert p.beta == 1.5e-11
    assert p.r_ek == 5.787e-7
    assert (p.U1, p.U2) == (0.025, 0.0)
    assert p.dt == 3600.0


def test_coupling_coefficients():
    p = QGParams(kd2=3e-9, delta=0.3)
    assert p.F1 == 3e-9 / 1.3
    assert p.F2 == 0.3 * p.F1
    with pytest.raises(ValueError):
        QGParams(kd2=3e-9, delta=0.3, F1=1e-9)


@pytest.mark.parametrize("kw", [{"nx": 48}, {"ny": 100}, {"dt": 0.0}, {"r_ek": -1e-7}])
def test_invalid_params_rejected(kw):
    with pytest.raises(ValueError):
        QGParams(**kw)


# --- PV inversion -----------------------------------------------------------

def test_invert_zero():
    p = QGParams(nx=16, ny=16)
    qh = np.zeros((2, 16, 9), dtype=complex)
    assert np.all(invert_pv(qh, p) == 0)


def test_invert_decoupled_poisson():
    p = QGParams(nx=16, ny=16, kd2=0.0)
    g = get_grid(p)
    qh = np.zeros((2, 16, 9), dtype=complex)
    qh[0, 3, 2] = 2.0 - 1.0j
    ph = invert_pv(qh, p)
    assert ph[0, 3, 2] == pytest.approx(-(2.0 - 1.0j) / g.k2[3, 2], rel=1e-15)
    assert np.count_nonzero(ph) == 1


@pytest.mark.parametrize("n", [8, 32, 128])
@pytest.mark.parametrize("seed", [0, 1])
def test_pv_inversion_round_trip(n, seed):
    p = QGParams(nx=n, ny=n)
    rng = np.random.default_rng(seed)
    psi = rng.standard_normal((2, n, n))
    ph = np.fft.rfft2(psi)
    ph[..., 0, 0] = 0
    back = invert_pv(forward_pv(ph, p), p)
    assert np.linalg.norm(back - ph) / np.linalg.norm(ph) < 1e-12


def test_inversion_solves_block_system():
    p = QGParams(nx=16, ny=16)
    g = get_grid(p)
    rng = np.random.default_rng(3)
    qh = rng.standard_normal((2, 16, 9)) + 1j * rng.standard_normal((2, 16, 9))
    qh[..., 0, 0] = 0
    ph = invert_pv(qh, p)
    iy, ix = 5, 4
    k2 = g.k2[iy, ix]
    A = np.array([[-k2 - p.F1, p.F1], [p.F2, -k2 - p.F2]])
    np.testing.assert_allclose(A @ ph[:, iy, ix], qh[:, iy, ix], rtol=1e-12)
    assert np.all(ph[:, 0, 0] == 0)


def test_state_spectral_mirror():
    p = QGParams(nx=32, ny=32)
    s = QGState.from_q(random_q(p, 0), p)
    np.testing.assert_allclose(np.fft.rfft2(s.q), s.q_hat, rtol=0, atol=1e-12 * np.abs(s.q_hat).max())
    assert np.all(s.q_hat[:, 0, 0] == 0)
    np.testing.assert_allclose(s.psi_hat, invert_pv(s.q_hat, p))


# --- velocity ---------------------------------------------------------------

def test_velocity_of_constant_is_zero():
    p = QGParams(nx=16, ny=16)
    ph = np.fft.rfft2(np.full((2, 16, 16), 7.0))
    vel = compute_velocity(ph, p)
    assert np.abs(vel.u).max() < 1e-12 and np.abs(vel.v).max() < 1e-12


def test_velocity_of_sine():
    p = QGParams(nx=32, ny=32)
    y = np.arange(32) * p.L / 32
    psi = np.broadcast_to(np.sin(2 * np.pi * y / p.L)[:, None], (2, 32, 32))
    vel = compute_velocity(np.fft.rfft2(psi), p)
    expect = -(2 * np.pi / p.L) * np.cos(2 * np.pi * y / p.L)[:, None]
    assert np.abs(vel.u - expect).max() < 1e-10 * (2 * np.pi / p.L) + 1e-22
    assert np.abs(vel.v).max() < 1e-20


def _smooth_field(n, L):
    x = np.arange(n) * L / n
    X, Y = np.meshgrid(x, x)
    k = 2 * np.pi / L
    return (np.sin(k * X + 2 * k * Y + 0.3) + 0.5 * np.cos(3 * k * X - k * Y)
            + 0.25 * np.sin(2 * k * Y + 1.1))


def _fd4_dy(f, h):
    return (-np.roll(f, -2, 0) + 8 * np.roll(f, -1, 0) - 8 * np.roll(f, 1, 0) + np.roll(f, 2, 0)) / (12 * h)


def test_spectral_velocity_matches_fourth_order_differences():
    errs = []
    for n in (32, 64):
        p = QGParams(nx=n, ny=n)
        psi = np.stack([_smooth_field(n, p.L)] * 2)
        u = compute_velocity(np.fft.rfft2(psi), p).u
        u_fd = -_fd4_dy(psi[0], p.L / n)
        errs.append(np.abs(u[0] - u_fd).max())
    # fourth order: halving h divides the error by ~16
    assert 12 < errs[0] / errs[1] < 20


def test_velocity_is_nondivergent():
    p = QGParams(nx=32, ny=32)
    s = QGState.from_q(random_q(p, 1), p)
    vel = compute_velocity(s.psi_hat, p)
    g = get_grid(p)
    div = np.fft.irfft2(1j * g.kx_deriv * np.fft.rfft2(vel.u) + 1j * g.ky_deriv * np.fft.rfft2(vel.v),
                        s=(32, 32))
    scale = np.abs(g.kx).max() * np.abs(vel.u).max()
    assert np.abs(div).max() < 1e-10 * scale


# --- tendency ---------------------------------------------------------------

def test_tendency_of_rest_state_is_zero():
    p = QGParams(nx=16, ny=16, U1=0.0, U2=0.0)
    s = QGState.from_q(np.zeros((2, 16, 16)), p)
    assert np.all(tendency(s, p) == 0)


def test_rossby_wave_tendency():
    p = rossby_params()
    g = get_grid(p)
    qh = np.zeros((2, 16, 9), dtype=complex)
    qh[0, 2, 1] = 1e-6
    s = QGState.from_q_hat(qh, p)
    dq = tendency(s, p)
    k2 = g.k2[2, 1]
    kx = g.kx[0, 1]
    expect = 1j * kx * p.beta * 1e-6 / k2
    assert dq[0, 2, 1] == pytest.approx(expect, rel=1e-12)
    # frequency omega = -beta kx / |k|^2 gives q ~ exp(-i omega t)
    omega = -p.beta * kx / k2
    assert dq[0, 2, 1] / qh[0, 2, 1] == pytest.approx(-1j * omega, rel=1e-12)


def test_jacobian_of_field_with_itself_vanishes():
    p = QGParams(nx=32, ny=32)
    qh = np.fft.rfft2(random_q(p, 2))
    jh = _jacobian_hat(qh, qh, p)
    assert np.abs(jh).max() < 1e-12 * np.abs(qh).max() * get_grid(p).k_nyq


def test_dealiased_jacobian_has_no_energy_above_cutoff():
    p = QGParams(nx=32, ny=32)
    g = get_grid(p)
    s = QGState.from_q_hat(np.fft.rfft2(random_q(p, 4, kmax_frac=2 / 3)) * g.dealias, p)
    dq = tendency(s, p)
    assert np.all(dq[:, ~g.dealias] == 0)


def test_dealiased_jacobian_matches_padded_product():
    # oracle: evaluate the product on a 2x grid where nothing aliases
    n = 32
    p = QGParams(nx=n, ny=n)
    g = get_grid(p)
    qh = np.fft.rfft2(random_q(p, 5, kmax_frac=1.0)) * g.dealias
    ph = invert_pv(qh, p)
    jh = _jacobian_hat(ph, qh, p)

    big = QGParams(nx=2 * n, ny=2 * n)
    gb = get_grid(big)

    def pad(xh):
        out = np.zeros((2, 2 * n, n + 1), dtype=complex)
        h = n // 2
        out[:, :h, :h + 1] = xh[:, :h, :h + 1]
        out[:, -h + 1:, :h + 1] = xh[:, -h + 1:, :h + 1]
        return out * 4

    pb, qb = pad(ph), pad(qh)
    u = np.fft.irfft2(-1j * gb.ky * pb, s=(2 * n, 2 * n))
    v = np.fft.irfft2(1j * gb.kx * pb, s=(2 * n, 2 * n))
    q = np.fft.irfft2(qb, s=(2 * n, 2 * n))
    jb = (1j * gb.kx * np.fft.rfft2(u * q) + 1j * gb.ky * np.fft.rfft2(v * q)) / 4
    h = n // 2
    ref = np.zeros_like(jh)
    ref[:, :h, :h + 1] = jb[:, :h, :h + 1]
    ref[:, -h + 1:, :h + 1] = jb[:, -h + 1:, :h + 1]
    ref *= g.dealias
    assert np.abs(jh - ref).max() < 1e-10 * np.abs(ref).max()


# --- small-scale filter -----------------------------------------------------

def test_ssd_identity_below_cutoff():
    p = QGParams(nx=32, ny=32)
    g = get_grid(p)
    qh = np.ones((2, 32, 17), dtype=complex)
    out = ssd_filter(qh, p)
    low = np.sqrt(g.k2) / g.k_nyq <= p.ssd_cutoff_frac
    assert np.all(out[:, low] == 1)


def test_ssd_attenuation_at_nyquist():
    p = QGParams(nx=32, ny=32)
    qh = np.ones((2, 32, 17), dtype=complex)
    out = ssd_filter(qh, p)
    # kx at Nyquist, ky = 0
    assert out[0, 0, 16].real == pytest.approx(np.exp(-23.6 * 0.35**4), rel=1e-14)


def test_ssd_twice_squares_attenuation():
    p = QGParams(nx=32, ny=32)
    qh = np.ones((2, 32, 17), dtype=complex)
    once = ssd_filter(qh, p)
    np.testing.assert_allclose(ssd_filter(once, p), once**2, rtol=1e-14)


# --- time stepping ----------------------------------------------------------

def test_step_of_rest_state():
    p = QGParams(nx=16, ny=16, U1=0.0)
    s = QGState.from_q(np.zeros((2, 16, 16)), p, t=7.0)
    s2 = step(s, p, [])
    assert np.all(s2.q == 0) and s2.t == 7.0 + p.dt


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_step_blow_up_names_step():
    p = QGParams(nx=16, ny=16)
    s = QGState.from_q(random_q(p, 0), p, t=4 * p.dt)
    s.q_hat[0, 1, 1] = np.inf
    with pytest.raises(BlowUpError) as exc:
        step(s, p, [])
    assert exc.value.step_index == 5


def _rossby_phase_error(dt, n_steps):
    p = rossby_params().replace(dt=dt)
    g = get_grid(p)
    qh = np.zeros((2, 16, 9), dtype=complex)
    qh[0, 1, 1] = 1e-6
    s = QGState.from_q_hat(qh, p)
    hist = []
    for _ in range(n_steps):
        s = step(s, p, hist)
    omega = -p.beta * g.kx[0, 1] / g.k2[1, 1]
    exact = 1e-6 * np.exp(-1j * omega * s.t)
    return abs(np.angle(s.q_hat[0, 1, 1] / exact)), omega


def test_rossby_wave_phase_100_steps():
    err, omega = _rossby_phase_error(3600.0, 100)
    # third-order scheme: global phase error bounded by C (omega dt)^3 per step
    assert err < 100 * abs(omega * 3600.0) ** 3


def test_ab3_phase_convergence_order():
    _, omega = _rossby_phase_error(3600.0, 1)
    period = 2 * np.pi / abs(omega)
    errs = []
    # coarser steps show a transient fourth-order AB3 phase term
    for n in (400, 800, 1600):
        errs.append(_rossby_phase_error(period / n, n)[0])
    r1, r2 = errs[0] / errs[1], errs[1] / errs[2]
    assert 7.0 < r1 < 9.5 and 7.0 < r2 < 9.5


@pytest.mark.parametrize("beta", [0.0, 1.5e-11])
def test_inviscid_conservation(beta):
    p = QGParams(nx=32, ny=32, r_ek=0.0, ssd_strength=0.0, U1=0.0, U2=0.0, beta=beta)
    s = QGState.from_q(random_q(p, 7, amp=2e-5, kmax_frac=0.6), p)
    s = QGState.from_q_hat(s.q_hat * get_grid(p).dealias, p)
    e0 = total_energy(s, p)
    z0 = enstrophy_layers(s.q)
    hist = []
    for _ in range(100):
        s = step(s, p, hist)
    assert abs(total_energy(s, p) / e0 - 1) < 1e-3
    np.testing.assert_array_less(np.abs(enstrophy_layers(s.q) / z0 - 1), 1e-3)


# --- dataset ----------------------------------------------------------------

def test_truncation_matches_coarse_sampling():
    L = 1e6
    fine = _smooth_field(64, L)
    coarse = _smooth_field(16, L)
    np.testing.assert_allclose(truncate_spectral(fine, 16), coarse, atol=1e-12)


def test_generate_small_dataset(tmp_path):
    p = QGParams(nx=32, ny=32)
    path = tmp_path / "d.qgk"
    snaps, stats = generate_dataset(p, 0, 50 * 5 * 3600 / 86400, 5, 32, seed=3, path=path)
    snaps = snaps[:10]
    ds = formats.read_dataset(path)
    assert ds.snapshots.shape == (50, 4, 32, 32)
    assert ds.dt_snapshot == 18000.0
    np.testing.assert_array_equal(ds.stats.mean, stats.mean)


def test_generate_header_shape(tmp_path):
    p = QGParams(nx=32, ny=32)
    path = tmp_path / "d.qgk"
    generate_dataset(p, 0, 10 * 5 * 3600 / 86400, 5, 32, seed=0, path=path)
    raw = path.read_bytes()
    assert raw[:4] == b"QGK1"
    assert np.frombuffer(raw, "<u4", 5, 4).tolist() == [1, 10, 4, 32, 32]


def test_generated_statistics(tmp_path):
    p = QGParams(nx=32, ny=32)
    path = tmp_path / "d.qgk"
    snaps, _ = generate_dataset(p, 0, 10 * 5 * 3600 / 86400, 5, 16, seed=1, path=path)
    # float64 snapshots, before the f32 payload quantization
    np.testing.assert_array_less(np.abs(snaps.mean(axis=(0, 2, 3))), 1e-10)
    np.testing.assert_array_less(np.abs(snaps.std(axis=(0, 2, 3)) - 1), 1e-10)
    # recomputed from the written f32 payload, at single precision
    ds = formats.read_dataset(path)
    np.testing.assert_array_less(np.abs(ds.snapshots.mean(axis=(0, 2, 3))), 1e-6)
    np.testing.assert_array_less(np.abs(ds.snapshots.std(axis=(0, 2, 3)) - 1), 1e-6)


def test_generate_is_reproducible(tmp_path):
    p = QGParams(nx=16, ny=16)
    a, b = tmp_path / "a.qgk", tmp_path / "b.qgk"
    for path in (a, b):
        generate_dataset(p, 1, 2, 5, 16, seed=11, path=path)
    assert a.read_bytes() == b.read_bytes()


def test_generate_rejects_bad_requests(tmp_path):
    p = QGParams(nx=16, ny=16)
    with pytest.raises(ValueError):
        generate_dataset(p, 0, 0.1, 5, 16, path=tmp_path / "x.qgk")
    assert not (tmp_path / "x.qgk").exists()
    with pytest.raises(ValueError):
        generate_dataset(p, 0, 2, 5, 32)
    with pytest.raises(ValueError):
        generate_dataset(p, 0, 2, 0, 16)
