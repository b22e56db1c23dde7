"""Diagonal complex SSM: initialization, four forward scans, and a
segment-checkpointed backward.

The recurrence, per input channel c:

    x_t[:, c] = lam * x_{t-1}[:, c] + b * z_t[c]        lam = exp(delta * a)
    y_t       = Re(c_out @ x_t)                          c_out is (M, M)

``b`` is one complex M-vector applied to every input channel; the channels
share the dynamics and differ only through their inputs.  All four scans
compute the same map and are interchangeable; ``scan_sequential`` is the
definitional one.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# below this pole magnitude the inverse recurrence in the backward pass is
# too ill-conditioned to trust, so those runs store their states densely
LAM_MIN = 1e-3

DELTA_LOG10_RANGE = (-3.0, -1.0)


@dataclass(frozen=True)
class DiagonalSSM:
    """Immutable parameter bundle; ``lam`` is derived, use ``make_ssm`` /
    ``ssm_with`` so it can never go stale."""

    delta: np.ndarray        # (M,) positive step sizes
    a: np.ndarray            # (M,) complex, Re < 0
    b: np.ndarray            # (M,) complex input map, shared across channels
    c_out: np.ndarray        # (M, M) complex readout
    input_width: int
    lam: np.ndarray          # (M,) complex, exp(delta * a)

    @property
    def state_dim(self) -> int:
        return self.delta.shape[0]


def discretize(delta: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Elementwise pole map lam = exp(delta * a)."""
    return np.exp(np.asarray(delta, dtype=float) * np.asarray(a, dtype=complex))


def make_ssm(delta, a, b, c_out, input_width: int) -> DiagonalSSM:
    delta = np.asarray(delta, dtype=float)
    a = np.asarray(a, dtype=complex)
    b = np.asarray(b, dtype=complex)
    c_out = np.asarray(c_out, dtype=complex)
    m = delta.shape[0]
    if a.shape != (m,) or b.shape != (m,) or c_out.shape != (m, m):
        raise ValueError(
            f"inconsistent shapes: delta {delta.shape}, a {a.shape}, "
            f"b {b.shape}, c_out {c_out.shape}"
        )
    if np.any(delta <= 0):
        raise ValueError("step sizes must be positive")
    if np.any(a.real >= 0):
        raise ValueError("state matrix must be strictly stable (Re a < 0)")
    if input_width < 1:
        raise ValueError("input width must be positive")
    return DiagonalSSM(delta=delta, a=a, b=b, c_out=c_out,
                       input_width=input_width, lam=discretize(delta, a))


def ssm_with(ssm: DiagonalSSM, delta=None, a=None, b=None, c_out=None) -> DiagonalSSM:
    """Rebuild with some fields replaced; recomputes the poles."""
    return make_ssm(
        ssm.delta if delta is None else delta,
        ssm.a if a is None else a,
        ssm.b if b is None else b,
        ssm.c_out if c_out is None else c_out,
        ssm.input_width,
    )


def s4d_inv_init(m: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Inverse-law initialization: returns (delta, a).

    Re a_n = -1/2 for every mode; Im a_n = (M/pi) * (M/(2n+1) - 1) spreads
    the mode frequencies like the reciprocals of the odd integers.  Step
    sizes are log-uniform in [1e-3, 1e-1].
    """
    n = np.arange(m)
    a = -0.5 + 1j * (m / np.pi) * (m / (2.0 * n + 1.0) - 1.0)
    lo, hi = DELTA_LOG10_RANGE
    delta = 10.0 ** rng.uniform(lo, hi, size=m)
    return delta, a


def random_ssm(m: int, input_width: int, rng: np.random.Generator) -> DiagonalSSM:
    """An SSM with the standard init plus a random complex readout."""
    delta, a = s4d_inv_init(m, rng)
    b = np.ones(m, dtype=complex)
    c_out = (rng.standard_normal((m, m)) + 1j * rng.standard_normal((m, m))) / np.sqrt(m)
    return make_ssm(delta, a, b, c_out, input_width)


@dataclass(frozen=True)
class ScanResult:
    states: np.ndarray   # (N, M, W) complex
    outputs: np.ndarray  # (N, M, W) float, Re(c_out @ state) per position

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]


def _check_scan_input(ssm: DiagonalSSM, z: np.ndarray, x0) -> tuple[np.ndarray, np.ndarray]:
    z = np.asarray(z, dtype=float)
    if z.ndim != 2 or z.shape[1] != ssm.input_width:
        raise ValueError(f"z must be (N, {ssm.input_width}), got {z.shape}")
    m, w = ssm.state_dim, ssm.input_width
    if x0 is None:
        x0 = np.zeros((m, w), dtype=complex)
    else:
        x0 = np.asarray(x0, dtype=complex)
        if x0.shape != (m, w):
            raise ValueError(f"x0 must be ({m}, {w}), got {x0.shape}")
    return z, x0


def _read_out(ssm: DiagonalSSM, states: np.ndarray) -> np.ndarray:
    return np.einsum("im,nmw->niw", ssm.c_out, states).real


def scan_sequential(ssm: DiagonalSSM, z: np.ndarray, x0=None) -> ScanResult:
    """The defining stepwise recurrence."""
    z, x0 = _check_scan_input(ssm, z, x0)
    n = z.shape[0]
    states = np.empty((n, ssm.state_dim, ssm.input_width), dtype=complex)
    drive = ssm.b[None, :, None] * z[:, None, :]  # (N, M, W)
    lam = ssm.lam[:, None]
    state = x0
    for t in range(n):
        state = lam * state + drive[t]
        states[t] = state
    return ScanResult(states=states, outputs=_read_out(ssm, states))


def scan_fft(ssm: DiagonalSSM, z: np.ndarray, x0=None) -> ScanResult:
    """Convolution form: x_t = sum_{s<=t} lam^(t-s) b z_s, via one padded FFT.

    The kernel lam^tau is materialized with a cumulative product (O(N M)).
    FFT length is the next power of two at or above 2N, which makes the
    circular convolution linear on the first N samples.
    """
    z, x0 = _check_scan_input(ssm, z, x0)
    n = z.shape[0]
    lam = ssm.lam
    powers = np.empty((n, ssm.state_dim), dtype=complex)  # powers[t] = lam^t
    powers[0] = 1.0
    if n > 1:
        np.cumprod(np.broadcast_to(lam, (n - 1, ssm.state_dim)), axis=0, out=powers[1:])
    n_fft = 1 << (2 * n - 1).bit_length()
    kernel_hat = np.fft.fft(powers, n=n_fft, axis=0)          # (F, M)
    z_hat = np.fft.fft(z, n=n_fft, axis=0)                    # (F, W)
    conv = np.fft.ifft(kernel_hat[:, :, None] * z_hat[:, None, :], axis=0)[:n]
    states = ssm.b[None, :, None] * conv
    if np.any(x0):
        # homogeneous part: lam^(t+1) x0
        states += (powers * lam)[:, :, None] * x0[None, :, :]
    return ScanResult(states=states, outputs=_read_out(ssm, states))


def scan_chunkwise(ssm: DiagonalSSM, z: np.ndarray, chunk: int, x0=None) -> ScanResult:
    """Chunked scan: parallel intra-chunk pass, serial carry propagation
    across the N/chunk boundaries, then a correction pass.

    chunk == N degenerates to a single chunk, chunk == 1 to the sequential
    recurrence.  A ragged final chunk is zero-padded; the padding never
    reaches the reported states.
    """
    if chunk < 1:
        raise ValueError("chunk must be positive")
    z, x0 = _check_scan_input(ssm, z, x0)
    n = z.shape[0]
    m, w = ssm.state_dim, ssm.input_width
    n_chunks = -(-n // chunk)
    padded = n_chunks * chunk
    drive = np.zeros((padded, m, w), dtype=complex)
    drive[:n] = ssm.b[None, :, None] * z[:, None, :]
    drive = drive.reshape(n_chunks, chunk, m, w)

    # local scans from zero state, advanced in lockstep across chunks
    local = np.empty_like(drive)
    lam = ssm.lam[:, None]
    acc = drive[:, 0].copy()
    local[:, 0] = acc
    for p in range(1, chunk):
        acc = lam * acc + drive[:, p]
        local[:, p] = acc

    # serial carry: carry[j] is the true state entering chunk j
    lam_chunk = ssm.lam ** chunk
    carries = np.empty((n_chunks, m, w), dtype=complex)
    carry = x0
    for j in range(n_chunks):
        carries[j] = carry
        carry = lam_chunk[:, None] * carry + local[j, -1]

    # correction: true state = local state + lam^(p+1) * carry
    lam_pow = np.cumprod(np.broadcast_to(ssm.lam, (chunk, m)), axis=0)  # lam^(p+1)
    states = local + lam_pow[None, :, :, None] * carries[:, None, :, :]
    states = states.reshape(padded, m, w)[:n]
    return ScanResult(states=states, outputs=_read_out(ssm, states))


def scan_prefix(ssm: DiagonalSSM, z: np.ndarray, x0=None) -> ScanResult:
    """Inclusive associative scan over (a, b) pairs with
    (a1, b1) o (a2, b2) = (a1 a2, a2 b1 + b2); identity (1, 0).

    Doubling sweep: log2(N) vectorized passes.
    """
    z, x0 = _check_scan_input(ssm, z, x0)
    n = z.shape[0]
    m, w = ssm.state_dim, ssm.input_width
    a = np.broadcast_to(ssm.lam[None, :, None], (n, m, 1)).copy()
    b = ssm.b[None, :, None] * z[:, None, :]
    if np.any(x0):
        b = b.copy()
        b[0] += ssm.lam[:, None] * x0
    shift = 1
    while shift < n:
        # order matters: b reads the pre-update a of the right block
        b[shift:] = a[shift:] * b[:-shift] + b[shift:]
        a[shift:] = a[:-shift] * a[shift:]
        shift *= 2
    return ScanResult(states=b, outputs=_read_out(ssm, b))


def run_scan(ssm: DiagonalSSM, z: np.ndarray, backend: str,
             chunk: int = 16, x0=None) -> ScanResult:
    if backend == "sequential":
        return scan_sequential(ssm, z, x0)
    if backend == "fft":
        return scan_fft(ssm, z, x0)
    if backend == "chunkwise":
        return scan_chunkwise(ssm, z, chunk, x0)
    if backend == "parallel_prefix":
        return scan_prefix(ssm, z, x0)
    raise ValueError(f"unknown backend {backend!r}")


@dataclass(frozen=True)
class ScanCheckpoints:
    """States retained by the forward pass for the checkpointed backward.

    ``positions[i]`` is the time index of ``states[i]``; the stored arrays
    are bitwise slices of the forward recurrence.  ``dense`` marks the
    fallback where every state was kept because some pole magnitude sits
    below LAM_MIN and the inverse recurrence would amplify noise.
    """

    interval: int
    positions: np.ndarray
    states: np.ndarray
    dense: bool


def scan_with_checkpoints(
    ssm: DiagonalSSM, z: np.ndarray, interval: int
) -> ScanCheckpoints:
    """Run the sequential recurrence keeping states every ``interval`` steps
    (plus the final state).  Memory is O(N/interval * M * W) unless the
    dense fallback triggers."""
    if interval < 1:
        raise ValueError("checkpoint interval must be positive")
    z, x0 = _check_scan_input(ssm, z, None)
    n = z.shape[0]
    dense = bool(np.min(np.abs(ssm.lam)) < LAM_MIN)
    drive = ssm.b[None, :, None] * z[:, None, :]
    lam = ssm.lam[:, None]
    positions = [t for t in range(n) if (t + 1) % interval == 0 or t == n - 1]
    keep = np.full(n, dense)
    keep[positions] = True
    stored = []
    state = x0
    for t in range(n):
        state = lam * state + drive[t]
        if keep[t]:
            stored.append(state.copy())
    pos = np.flatnonzero(keep)
    return ScanCheckpoints(
        interval=interval,
        positions=pos,
        states=np.array(stored),
        dense=dense,
    )


@dataclass(frozen=True)
class SsmGrads:
    """Gradients of a real loss; complex entries follow the convention
    grad = d/d(Re) + i d/d(Im), so FD on the real and imaginary parts
    matches the real and imaginary parts of the gradient."""

    z: np.ndarray              # (N, W) real
    delta: np.ndarray          # (M,) real
    a_log_neg_re: np.ndarray   # (M,) real, w.r.t. log(-Re a)
    a_im: np.ndarray           # (M,) real, w.r.t. Im a
    b: np.ndarray              # (M,) complex
    c_out: np.ndarray          # (M, M) complex


def backward_checkpointed(
    ssm: DiagonalSSM, z: np.ndarray, upstream: np.ndarray, interval: int
) -> SsmGrads:
    """Reverse-mode gradients of loss = sum(upstream * outputs) from x_0 = 0.

    The forward stores one state per ``interval`` steps; during the backward
    sweep earlier states inside a segment are recovered by inverting the
    update, x_{t-1} = (x_t - b z_t) / lam, and each checkpoint load resets
    the recovery error.  interval == 1 stores everything and never inverts.
    """
    z = np.asarray(z, dtype=float)
    upstream = np.asarray(upstream, dtype=float)
    n, m, w = z.shape[0], ssm.state_dim, ssm.input_width
    if upstream.shape != (n, m, w):
        raise ValueError(f"upstream must be (N, M, W) = ({n}, {m}, {w}), got {upstream.shape}")

    ckpt = scan_with_checkpoints(ssm, z, interval)
    stored = {int(p): ckpt.states[i] for i, p in enumerate(ckpt.positions)}

    lam = ssm.lam[:, None]
    drive = ssm.b[None, :, None] * z[:, None, :]

    # holomorphic adjoints; the loss is Re of a holomorphic function of the
    # complex quantities, so real gradients drop out via conjugation at the end
    s_adj = np.zeros((m, w), dtype=complex)
    df_dlam = np.zeros(m, dtype=complex)
    df_db = np.zeros(m, dtype=complex)
    df_dc = np.zeros((m, m), dtype=complex)
    grad_z = np.zeros_like(z)

    state = stored[n - 1]
    for t in range(n - 1, -1, -1):
        g_t = upstream[t]
        df_dc += g_t @ np.conj(state).T  # conj folded in: grad_c accumulates directly
        s_adj = ssm.c_out.T @ g_t + lam * s_adj
        grad_z[t] = (s_adj * ssm.b[:, None]).sum(axis=0).real
        df_db += (s_adj * z[t][None, :]).sum(axis=1)
        if t > 0:
            prev = stored.get(t - 1)
            if prev is None:
                prev = (state - drive[t]) / lam
            df_dlam += (s_adj * prev).sum(axis=1)
            state = prev

    p = df_dlam * ssm.delta * ssm.lam  # holomorphic dF/da
    return SsmGrads(
        z=grad_z,
        delta=(df_dlam * ssm.a * ssm.lam).real,
        a_log_neg_re=p.real * ssm.a.real,
        a_im=-p.imag,
        b=np.conj(df_db),
        c_out=df_dc,
    )
