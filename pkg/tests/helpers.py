"""Shared test utilities: tiny configs, independent oracles, and
finite-difference machinery.

The oracles here are deliberately written against the defining formulas
(explicit loops, no vectorization tricks) so they share no code with the
production paths they check.
"""
import dataclasses

import numpy as np

from interdomain.config import ModelConfig, validate
from interdomain.features import NormBias


def rel_err(got: np.ndarray, want: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(want))), 1e-300)
    return float(np.max(np.abs(np.asarray(got) - np.asarray(want)))) / scale


def tiny_config(**overrides) -> ModelConfig:
    base = ModelConfig(
        heads=2, model_dim=8, head_dim=4, feature_dim=4, state_dim=4,
        context_len=128, chunk_size=3, prefill_chunk=8,
        backend="sequential", variant="full_interdomain",
        rope_enabled=True, output_gate_enabled=False,
        n_kv=2, readout="denominator_free", seed=0,
    )
    return validate(dataclasses.replace(base, **overrides))


def randomize_norms(params, rng):
    """Move the norm parameters off their (1, 0) init so gradient tests
    exercise the gain/bias paths."""
    params.k_norms = [
        NormBias(gain=1 + 0.3 * rng.standard_normal(nb.gain.shape),
                 bias=0.2 * rng.standard_normal(nb.bias.shape))
        for nb in params.k_norms
    ]
    params.v_norms = [
        NormBias(gain=1 + 0.3 * rng.standard_normal(nb.gain.shape),
                 bias=0.2 * rng.standard_normal(nb.bias.shape))
        for nb in params.v_norms
    ]
    return params


def naive_unroll(ssm, z, x0=None):
    """Scalar-by-scalar unroll of x_t = lam*x + b*z_t, y_t = Re(C x_t)."""
    z = np.asarray(z, dtype=float)
    m, w = ssm.state_dim, ssm.input_width
    state = np.zeros((m, w), dtype=complex) if x0 is None else np.array(x0, dtype=complex)
    states, outs = [], []
    for t in range(z.shape[0]):
        nxt = np.empty((m, w), dtype=complex)
        for i in range(m):
            for j in range(w):
                nxt[i, j] = ssm.lam[i] * state[i, j] + ssm.b[i] * z[t, j]
        state = nxt
        states.append(state.copy())
        out = np.empty((m, w))
        for i in range(m):
            for j in range(w):
                acc = 0j
                for s in range(m):
                    acc += ssm.c_out[i, s] * state[s, j]
                out[i, j] = acc.real
        outs.append(out)
    return np.array(states), np.array(outs)


def central_diff(loss, arr, h=1e-5):
    """Central differences of a scalar function w.r.t. a real array,
    perturbing in place (loss must read through the same reference)."""
    fd = np.zeros(arr.size)
    for i in range(arr.size):
        arr.flat[i] += h
        up = loss()
        arr.flat[i] -= 2 * h
        down = loss()
        arr.flat[i] += h
        fd[i] = (up - down) / (2 * h)
    return fd.reshape(arr.shape)


def central_diff_complex(loss, get, put, h=1e-5):
    """Central differences w.r.t. a complex array accessed via get()/put(a),
    in the dL/dRe + i dL/dIm convention."""
    base = get().copy()
    fd = np.zeros(base.shape, dtype=complex)
    for i in range(base.size):
        for mul in (1.0, 1j):
            bumped = base.copy()
            bumped.flat[i] += h * mul
            put(bumped)
            up = loss()
            bumped = base.copy()
            bumped.flat[i] -= h * mul
            put(bumped)
            down = loss()
            fd.flat[i] += (up - down) / (2 * h) * mul
    put(base)
    return fd
