import dataclasses

import numpy as np
import pytest

from interdomain.config import make_rng
from interdomain.ssm import (
    DELTA_LOG10_RANGE,
    LAM_MIN,
    DiagonalSSM,
    ScanResult,
    backward_checkpointed,
    discretize,
    make_ssm,
    random_ssm,
    run_scan,
    s4d_inv_init,
    scan_chunkwise,
    scan_fft,
    scan_prefix,
    scan_sequential,
    scan_with_checkpoints,
    ssm_with,
)

from helpers import central_diff, central_diff_complex, naive_unroll, rel_err

BACKENDS = ("sequential", "fft", "chunkwise", "parallel_prefix")


def small_ssm(m=4, w=2, seed=0):
    return random_ssm(m, w, make_rng(seed))


# --- initialization ---

def test_inverse_law_init_anchors():
    delta, a = s4d_inv_init(64, make_rng(0))
    assert np.all(a.real == -0.5)
    assert abs(a[0].imag - (64.0 / np.pi) * 63.0) < 1e-12
    assert abs(a[31].imag - 64.0 / (63.0 * np.pi)) < 1e-12
    assert abs(a[32].imag - (64.0 / np.pi) * (64.0 / 65.0 - 1.0)) < 1e-12


def test_inverse_law_imag_parts_strictly_decreasing():
    _, a = s4d_inv_init(16, make_rng(1))
    assert np.all(np.diff(a.imag) < 0)


def test_step_sizes_log_uniform_in_band():
    delta, _ = s4d_inv_init(4096, make_rng(2))
    lo, hi = DELTA_LOG10_RANGE
    assert np.all(delta >= 10.0**lo) and np.all(delta <= 10.0**hi)
    logs = np.log10(delta)
    # both halves of the log-band populated about equally
    frac = np.mean(logs < (lo + hi) / 2)
    assert 0.45 < frac < 0.55


def test_discretize_anchors():
    lam = discretize(np.array([1.0]), np.array([-1.0 + 0j]))
    assert abs(lam[0] - np.exp(-1.0)) < 1e-15
    lam = discretize(np.array([1.0]), np.array([-0.5 + 1j * np.pi]))
    assert abs(lam[0] - (-np.exp(-0.5))) < 1e-12


def test_poles_inside_unit_circle():
    ssm = small_ssm(m=16)
    assert np.all(np.abs(ssm.lam) < 1.0)
    assert np.allclose(ssm.lam, np.exp(ssm.delta * ssm.a))


def test_make_ssm_rejects_bad_parameters():
    ok = small_ssm()
    with pytest.raises(ValueError, match="shapes"):
        make_ssm(ok.delta, ok.a[:2], ok.b, ok.c_out, 2)
    with pytest.raises(ValueError, match="positive"):
        make_ssm(-ok.delta, ok.a, ok.b, ok.c_out, 2)
    with pytest.raises(ValueError, match="stable"):
        make_ssm(ok.delta, -ok.a, ok.b, ok.c_out, 2)
    with pytest.raises(ValueError, match="width"):
        make_ssm(ok.delta, ok.a, ok.b, ok.c_out, 0)


def test_ssm_with_refreshes_poles():
    ssm = small_ssm()
    slower = ssm_with(ssm, delta=ssm.delta / 10)
    assert rel_err(slower.lam, np.exp(ssm.delta / 10 * ssm.a)) < 1e-15
    assert not np.allclose(slower.lam, ssm.lam)


# --- forward scans ---

def test_sequential_zero_input_stays_at_zero():
    ssm = small_ssm()
    res = scan_sequential(ssm, np.zeros((6, 2)))
    assert np.all(res.states == 0.0) and np.all(res.outputs == 0.0)


def test_sequential_single_step_formula():
    ssm = small_ssm()
    rng = make_rng(3)
    z = rng.standard_normal((1, 2))
    x0 = rng.standard_normal((4, 2)) + 1j * rng.standard_normal((4, 2))
    res = scan_sequential(ssm, z, x0=x0)
    want = ssm.lam[:, None] * x0 + ssm.b[:, None] * z[0][None, :]
    assert rel_err(res.states[0], want) < 1e-15
    assert rel_err(res.outputs[0], (ssm.c_out @ want).real) < 1e-14


def test_sequential_matches_scalar_unroll():
    ssm = small_ssm(m=3, w=2, seed=4)
    rng = make_rng(5)
    z = rng.standard_normal((9, 2))
    x0 = rng.standard_normal((3, 2)) + 1j * rng.standard_normal((3, 2))
    res = scan_sequential(ssm, z, x0=x0)
    states, outs = naive_unroll(ssm, z, x0=x0)
    assert rel_err(res.states, states) < 1e-12
    assert rel_err(res.outputs, outs) < 1e-12


def test_zero_input_decay_from_initial_state():
    ssm = small_ssm()
    x0 = np.ones((4, 2), dtype=complex)
    res = scan_sequential(ssm, np.zeros((10, 2)), x0=x0)
    mags = np.abs(res.states[:, :, 0])
    assert np.all(np.diff(mags, axis=0) < 0)
    want = ssm.lam[:, None] ** np.arange(1, 11)[None, :]
    assert rel_err(res.states[:, :, 0].T, want) < 1e-12


def test_fft_impulse_response_is_pole_powers():
    ssm = small_ssm(m=3, w=1, seed=6)
    z = np.zeros((8, 1))
    z[0, 0] = 1.0
    res = scan_fft(ssm, z)
    want = ssm.lam[None, :] ** np.arange(1, 9)[:, None] / ssm.lam[None, :] * ssm.b[None, :]
    assert rel_err(res.states[:, :, 0], want) < 1e-10


def test_fft_zero_input():
    ssm = small_ssm()
    res = scan_fft(ssm, np.zeros((5, 2)))
    assert np.max(np.abs(res.states)) < 1e-14


def test_chunkwise_degenerate_chunk_sizes():
    ssm = small_ssm(seed=7)
    z = make_rng(8).standard_normal((10, 2))
    base = scan_sequential(ssm, z)
    for chunk in (1, 10, 100):
        res = scan_chunkwise(ssm, z, chunk)
        assert rel_err(res.states, base.states) < 1e-12


def test_chunkwise_rejects_bad_chunk():
    ssm = small_ssm()
    with pytest.raises(ValueError):
        scan_chunkwise(ssm, np.zeros((4, 2)), 0)


def test_prefix_combine_identity_and_associativity():
    # the scan composes affine maps x -> a*x + b; identity is (1, 0) and
    # composition must associate for the tree reduction to be valid
    rng = make_rng(9)
    trip = [(rng.standard_normal() + 1j * rng.standard_normal(),
             rng.standard_normal() + 1j * rng.standard_normal()) for _ in range(3)]

    def comb(p, q):
        return (q[0] * p[0], q[0] * p[1] + q[1])

    e = (1.0 + 0j, 0.0 + 0j)
    for p in trip:
        assert comb(p, e) == p and comb(e, p) == p
    lhs = comb(comb(trip[0], trip[1]), trip[2])
    rhs = comb(trip[0], comb(trip[1], trip[2]))
    assert abs(lhs[0] - rhs[0]) < 1e-12 and abs(lhs[1] - rhs[1]) < 1e-12


@pytest.mark.parametrize("backend", BACKENDS[1:])
def test_backends_agree_with_sequential(backend):
    for n, m, w, seed in [(1, 2, 1, 10), (7, 4, 2, 11), (64, 8, 3, 12), (100, 4, 2, 13)]:
        ssm = small_ssm(m=m, w=w, seed=seed)
        rng = make_rng(seed + 100)
        z = rng.standard_normal((n, w))
        x0 = rng.standard_normal((m, w)) + 1j * rng.standard_normal((m, w))
        base = run_scan(ssm, z, "sequential", x0=x0)
        got = run_scan(ssm, z, backend, chunk=5, x0=x0)
        assert rel_err(got.states, base.states) < 1e-8
        assert rel_err(got.outputs, base.outputs) < 1e-8


@pytest.mark.parametrize("backend", BACKENDS)
def test_split_scan_equals_one_shot(backend):
    ssm = small_ssm(seed=14)
    rng = make_rng(15)
    z = rng.standard_normal((12, 2))
    full = run_scan(ssm, z, backend, chunk=4)
    head = run_scan(ssm, z[:5], backend, chunk=4)
    tail = run_scan(ssm, z[5:], backend, chunk=4, x0=head.final_state)
    assert rel_err(np.concatenate([head.states, tail.states]), full.states) < 1e-10


def test_unknown_backend_rejected():
    with pytest.raises(ValueError, match="backend"):
        run_scan(small_ssm(), np.zeros((2, 2)), "magic")


def test_scan_validates_input_shape():
    ssm = small_ssm()
    with pytest.raises(ValueError, match="z must be"):
        scan_sequential(ssm, np.zeros((4, 3)))
    with pytest.raises(ValueError, match="x0 must be"):
        scan_sequential(ssm, np.zeros((4, 2)), x0=np.zeros((3, 2)))


def test_outputs_are_real_part_of_readout():
    ssm = small_ssm(seed=16)
    z = make_rng(17).standard_normal((6, 2))
    res = scan_sequential(ssm, z)
    want = np.stack([(ssm.c_out @ res.states[t]).real for t in range(6)])
    assert rel_err(res.outputs, want) < 1e-14


# --- checkpointing ---

def test_checkpoints_are_bitwise_forward_states():
    ssm = small_ssm(seed=18)
    z = make_rng(19).standard_normal((23, 2))
    full = scan_sequential(ssm, z)
    ckpt = scan_with_checkpoints(ssm, z, interval=5)
    assert not ckpt.dense
    assert list(ckpt.positions) == [4, 9, 14, 19, 22]
    for i, p in enumerate(ckpt.positions):
        assert np.array_equal(ckpt.states[i], full.states[p])


def test_checkpoint_interval_one_keeps_everything():
    ssm = small_ssm(seed=20)
    z = make_rng(21).standard_normal((7, 2))
    ckpt = scan_with_checkpoints(ssm, z, interval=1)
    assert list(ckpt.positions) == list(range(7))


def test_checkpoint_dense_fallback_on_tiny_poles():
    # |lam| = exp(delta * Re a); push it under the inversion floor
    ssm = small_ssm()
    fast = ssm_with(ssm, a=ssm.a.imag * 1j - 100.0, delta=np.full(4, 0.1))
    assert np.min(np.abs(fast.lam)) < LAM_MIN
    z = make_rng(22).standard_normal((9, 2))
    ckpt = scan_with_checkpoints(fast, z, interval=4)
    assert ckpt.dense
    assert list(ckpt.positions) == list(range(9))


def test_checkpoint_interval_validated():
    with pytest.raises(ValueError, match="interval"):
        scan_with_checkpoints(small_ssm(), np.zeros((4, 2)), 0)


# --- backward pass ---

def test_backward_zero_upstream_zero_grads():
    ssm = small_ssm(seed=23)
    z = make_rng(24).standard_normal((8, 2))
    g = backward_checkpointed(ssm, z, np.zeros((8, 4, 2)), interval=3)
    for field in (g.z, g.delta, g.a_log_neg_re, g.a_im, g.b, g.c_out):
        assert np.all(field == 0.0)


def test_backward_interval_free():
    ssm = small_ssm(m=5, w=2, seed=25)
    rng = make_rng(26)
    z = rng.standard_normal((33, 2))
    up = rng.standard_normal((33, 5, 2))
    dense = backward_checkpointed(ssm, z, up, interval=1)
    seg = backward_checkpointed(ssm, z, up, interval=16)
    assert rel_err(seg.z, dense.z) < 1e-9
    assert rel_err(seg.delta, dense.delta) < 1e-9
    assert rel_err(seg.b, dense.b) < 1e-9
    assert rel_err(seg.c_out, dense.c_out) < 1e-9


def test_backward_shape_mismatch_rejected():
    ssm = small_ssm()
    with pytest.raises(ValueError, match="upstream"):
        backward_checkpointed(ssm, np.zeros((4, 2)), np.zeros((4, 3, 2)), 2)


def finite_difference_case(ssm, n, seed, interval):
    rng = make_rng(seed)
    w = ssm.input_width
    z = rng.standard_normal((n, w))
    up = rng.standard_normal((n, ssm.state_dim, w))

    box = {"ssm": ssm}

    def loss():
        return float(np.sum(up * scan_sequential(box["ssm"], z).outputs))

    got = backward_checkpointed(ssm, z, up, interval=interval)

    assert rel_err(got.z, central_diff(loss, z)) < 1e-6

    p = np.log(-ssm.a.real)
    q = ssm.a.imag.copy()

    def set_a():
        box["ssm"] = ssm_with(ssm, a=-np.exp(p) + 1j * q)

    set_a()
    fd_p = central_diff(lambda: (set_a(), loss())[1], p)
    fd_q = central_diff(lambda: (set_a(), loss())[1], q)
    assert rel_err(got.a_log_neg_re, fd_p) < 1e-5
    assert rel_err(got.a_im, fd_q) < 1e-5
    box["ssm"] = ssm

    delta = ssm.delta.copy()

    def set_delta():
        box["ssm"] = ssm_with(ssm, delta=delta)

    fd_delta = central_diff(lambda: (set_delta(), loss())[1], delta, h=1e-7)
    assert rel_err(got.delta, fd_delta) < 1e-5
    box["ssm"] = ssm

    fd_b = central_diff_complex(
        loss, lambda: box["ssm"].b, lambda v: box.update(ssm=ssm_with(ssm, b=v))
    )
    assert rel_err(got.b, fd_b) < 1e-6
    box["ssm"] = ssm

    fd_c = central_diff_complex(
        loss, lambda: box["ssm"].c_out, lambda v: box.update(ssm=ssm_with(ssm, c_out=v))
    )
    assert rel_err(got.c_out, fd_c) < 1e-6


def test_backward_matches_finite_differences():
    finite_difference_case(small_ssm(m=4, w=2, seed=27), n=8, seed=28, interval=3)


def test_backward_matches_finite_differences_dense_fallback():
    base = small_ssm(m=3, w=2, seed=29)
    fast = ssm_with(base, a=base.a.imag * 1j - 100.0, delta=np.full(3, 0.1))
    assert np.min(np.abs(fast.lam)) < LAM_MIN
    finite_difference_case(fast, n=6, seed=30, interval=2)
