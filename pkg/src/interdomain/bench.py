"""Operation-counting decode and prefill simulator.

Contrasts the fixed-state mixer against a growing-KV softmax baseline
without touching a clock: the unit is one fused multiply-add (a complex
multiply-add counts 4, complex-by-real counts 2, an elementwise special
function counts 1), memory is live double-precision values.  The decode
loop for the fixed-state paths really runs, step by step, with analytic
per-call counts attached; the softmax path is counting only, its per-step
KV traffic growing as prefix + step index.

Three paths:

* ``softmax_kv``           growing cache, per-step work affine in prefix.
* ``interdomain``          fixed state, prompt consumed in one block.
* ``interdomain_chunked``  same decode, prompt consumed in fixed chunks so
                           peak memory is bounded by the chunk, not the
                           prompt.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .config import GENERIC_INPUT_VARIANTS, QUERY_VARIANTS, ModelConfig, make_rng, validate
from .features import CONV_TAPS
from .layer import decode_step, forward, init_decode_state, init_layer_params, prefill

PATHS = ("interdomain", "interdomain_chunked", "softmax_kv")

CSV_HEADER = ("path", "B", "L", "steps", "per_step_ops", "peak_memory_units")


@dataclass
class OpCounter:
    """Monotone counters for one simulation run; reset only between runs."""

    multiply_adds: int = 0
    state_reads: int = 0
    state_writes: int = 0
    peak_live_values: int = 0

    def work(self, n: int) -> None:
        if n < 0:
            raise ValueError("op counts only go up")
        self.multiply_adds += n

    def touch_state(self, reads: int = 0, writes: int = 0) -> None:
        if reads < 0 or writes < 0:
            raise ValueError("op counts only go up")
        self.state_reads += reads
        self.state_writes += writes

    def live(self, n: int) -> None:
        self.peak_live_values = max(self.peak_live_values, n)

    def reset(self) -> None:
        self.multiply_adds = 0
        self.state_reads = 0
        self.state_writes = 0
        self.peak_live_values = 0


@dataclass(frozen=True)
class BenchRow:
    """One (path, batch, prefix) cell of the decode grid."""

    path: str
    b: int
    l: int
    steps: int
    per_step_ops: int
    peak_memory_units: int


def state_units(config: ModelConfig) -> int:
    """Real scalars carried between decode steps: complex SSM states (2 per
    entry), convolution tails, and the position counter."""
    dh, r, m = config.head_dim, config.feature_dim, config.state_dim
    kv_width = config.n_kv * dh
    total = 2 * config.n_kv * m * (r + dh)
    total += (CONV_TAPS - 1) * kv_width
    if config.variant in QUERY_VARIANTS:
        total += (CONV_TAPS - 1) * config.model_dim
    if config.variant in GENERIC_INPUT_VARIANTS:
        total += (CONV_TAPS - 1) * kv_width
    return total + 1


def _feature_ops(kind: str, dh: int, r: int) -> int:
    """Multiply-adds to featurize one width-dh vector."""
    if kind == "identity":
        return 0
    if kind == "rff":
        return dh * (r // 2) + 2 * r   # frequency matvec, then cos/sin + scale
    return 4 * dh                      # silu (2/elem) + square-sum + divide


def decode_step_ops(config: ModelConfig, feature_kind: str = "silu_l2") -> dict[str, int]:
    """Analytic cost of one decode step at batch 1.

    Everything is a pure function of the config, which is the claim under
    test: no term involves how many tokens came before.  The dominant term
    is the full complex readout matrix, 4*M^2*(R+dh) per KV group.
    """
    validate(config)
    d, dh, r, m = config.model_dim, config.head_dim, config.feature_dim, config.state_dim
    n_kv, heads = config.n_kv, config.heads
    kv_width = n_kv * dh
    w = r + dh
    has_q = config.variant in QUERY_VARIANTS
    generic = config.variant in GENERIC_INPUT_VARIANTS

    work = 2 * d * kv_width + d * d               # k/v (or a/b) projections + output
    work += 4 * kv_width                          # conv over the k/a stream
    if has_q:
        work += d * d + 4 * d                     # query projection + conv
    if generic:
        work += 4 * kv_width                      # conv over the b stream
    if config.rope_enabled:
        work += 2 * kv_width + (2 * d if has_q else 0)
    if not generic:
        work += n_kv * _feature_ops(feature_kind, dh, r)            # key features
    if has_q:
        work += heads * _feature_ops(feature_kind, dh, r)           # query features
    work += n_kv * 3 * (r + dh)                   # input norms + bias
    work += n_kv * (6 * m * w + 4 * m * m * w)    # state update + complex readout
    if has_q:
        work += heads * m * w                     # query-conditioned contraction
    else:
        work += heads * dh * m * w                # learned linear contraction
    if config.output_gate_enabled:
        work += d * d + 2 * d

    carried = state_units(config)
    transient = 2 * d + 2 * kv_width + config.n_kv * m * w
    return {
        "multiply_adds": work,
        "state_reads": carried,
        "state_writes": carried,
        "live_values": carried + transient,
    }


def activation_units_per_token(config: ModelConfig) -> int:
    """Live doubles one prefill token pins in a scan-based forward: the
    stored complex scan states dominate, plus the projected streams."""
    dh, r, m = config.head_dim, config.feature_dim, config.state_dim
    return 2 * config.n_kv * m * (r + dh) + 2 * config.model_dim + 2 * config.n_kv * dh


def simulate_decode(config: ModelConfig, b: int, l: int, steps: int) -> list[BenchRow]:
    """One decode session per path: prefix of ``l`` tokens, then ``steps``
    generated tokens, batch ``b``.

    The fixed-state rows drive the real per-token recurrence (state seeded
    at position ``l``; op counts per call are analytic, so the prefix
    length cannot leak into them).  The softmax row books 4d^2 projection
    work plus 2d*(l+i) cache traffic at step i.  ``per_step_ops`` is total
    decode work divided by steps, floor; steps=0 books nothing.
    """
    validate(config)
    if b < 1 or l < 0 or steps < 0:
        raise ValueError("need b >= 1, l >= 0, steps >= 0")
    d = config.model_dim
    act = activation_units_per_token(config)
    carried = state_units(config)
    chunk = min(config.prefill_chunk, l) if l else 0

    ops = decode_step_ops(config)
    counter = OpCounter()
    if steps:
        params = init_layer_params(config, make_rng(config.seed))
        state = init_decode_state(config)
        state.position = l
        tokens = make_rng(config.seed + 1).standard_normal((steps, d))
        for t in range(steps):
            _, state = decode_step(params, state, tokens[t], config)
            counter.work(b * ops["multiply_adds"])
            counter.touch_state(reads=b * ops["state_reads"], writes=b * ops["state_writes"])
            counter.live(b * ops["live_values"])
    inter_per_step = counter.multiply_adds // steps if steps else 0

    soft = OpCounter()
    for i in range(steps):
        soft.work(b * (4 * d * d + 2 * d * (l + i)))
        soft.touch_state(reads=b * 2 * d * (l + i), writes=b * 2 * d)
        soft.live(b * (2 * d * (l + i + 1) + 4 * d))
    soft_per_step = soft.multiply_adds // steps if steps else 0

    rows = [
        BenchRow("interdomain", b, l, steps, inter_per_step,
                 b * (l * act + carried)),
        BenchRow("interdomain_chunked", b, l, steps, inter_per_step,
                 b * (chunk * act + carried)),
        BenchRow("softmax_kv", b, l, steps, soft_per_step,
                 b * (2 * d * (l + steps) + 4 * d)),
    ]
    return rows


@dataclass(frozen=True)
class PrefillReport:
    """Peak-memory model for consuming a prompt, chunked vs one block."""

    activation_units: int
    chunked_activation_units: int
    state_units: int
    peak_units: int
    chunked_peak_units: int


def simulate_prefill(config: ModelConfig, b: int, l: int, c: int) -> PrefillReport:
    """Counter arithmetic only: the one-block path pins b*l tokens of
    activations, the chunked path b*c plus the carried state."""
    validate(config)
    if not (1 <= c <= l):
        raise ValueError("need 1 <= c <= l")
    if b < 1:
        raise ValueError("need b >= 1")
    act = activation_units_per_token(config)
    carried = b * state_units(config)
    full = b * l * act
    chunked = b * c * act
    return PrefillReport(
        activation_units=full,
        chunked_activation_units=chunked,
        state_units=carried,
        peak_units=full + carried,
        chunked_peak_units=chunked + carried,
    )


def verify_prefill_equivalence(config: ModelConfig, n: int, chunk: int, seed: int = 0) -> float:
    """Run the real layer both ways and return the worst deviation across
    outputs, final SSM states, and a decode continuation."""
    rng = make_rng(seed)
    params = init_layer_params(config, rng, contraction_scale=0.5)
    x = rng.standard_normal((n, config.model_dim))
    y_full = forward(params, x, config)
    y_one, st_one = prefill(params, x, config)
    y_chunk, st_chunk = prefill(params, x, config, chunk=chunk)
    worst = max(
        float(np.max(np.abs(y_one - y_full))),
        float(np.max(np.abs(y_chunk - y_full))),
    )
    for a, b_ in zip(st_one.ssm_states, st_chunk.ssm_states):
        worst = max(worst, float(np.max(np.abs(a - b_))))
    nxt = rng.standard_normal(config.model_dim)
    y_a, _ = decode_step(params, st_one, nxt, config)
    y_b, _ = decode_step(params, st_chunk, nxt, config)
    return max(worst, float(np.max(np.abs(y_a - y_b))))


def run_decode_grid(
    config: ModelConfig,
    batches: tuple[int, ...],
    prefix_lens: tuple[int, ...],
    steps: int,
) -> list[BenchRow]:
    """Every (path, batch, prefix) cell, merged deterministically."""
    rows = []
    for b in batches:
        for l in prefix_lens:
            rows.extend(simulate_decode(config, b, l, steps))
    rows.sort(key=lambda r: (r.path, r.b, r.l))
    return rows


def emit_csv(rows: list[BenchRow], dest: str) -> None:
    with open(dest, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for r in rows:
            writer.writerow([r.path, r.b, r.l, r.steps, r.per_step_ops, r.peak_memory_units])


def parse_csv(src: str) -> list[BenchRow]:
    with open(src, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != CSV_HEADER:
            raise ValueError(f"unexpected header {header!r}")
        return [
            BenchRow(row[0], int(row[1]), int(row[2]), int(row[3]), int(row[4]), int(row[5]))
            for row in reader
        ]
