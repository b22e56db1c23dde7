"""Closed-form accounting: recurrent-state degrees of freedom, backbone
parameter counts at the four published scales, and an asymptotic work/memory
model with every constant pinned at 1.

Nothing here runs the model; the point is that the numbers are exact
integers a test can compare against, and that the state budget of the
fixed-state mixer is visibly independent of sequence length.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

from .config import BACKENDS, ModelConfig, validate

VOCAB = 32000

MIXERS = ("softmax", "interdomain", "s4d_only")


@dataclass(frozen=True)
class BackboneSpec:
    """Width/depth of one decoder-only scale.

    ``dims_inferred`` marks scales whose width and depth were reverse
    engineered by matching the published softmax total; the flagged configs
    do reproduce it exactly.
    """

    name: str
    model_dim: int
    layers: int
    heads: int
    vocab: int = VOCAB
    dims_inferred: bool = False


BACKBONES = (
    BackboneSpec("125m", model_dim=768, layers=12, heads=12),
    BackboneSpec("350m", model_dim=1024, layers=24, heads=16, dims_inferred=True),
    BackboneSpec("760m", model_dim=1536, layers=24, heads=24, dims_inferred=True),
    BackboneSpec("1.3b", model_dim=2048, layers=24, heads=32),
)


def backbone(name: str) -> BackboneSpec:
    for spec in BACKBONES:
        if spec.name == name:
            return spec
    raise KeyError(f"unknown backbone {name!r}; have {[s.name for s in BACKBONES]}")


def swiglu_hidden(model_dim: int) -> int:
    """(2/3)*4d rounded up to a multiple of 128."""
    return math.ceil(8 * model_dim / (3 * 128)) * 128


def scale_config(spec: BackboneSpec, variant: str = "full_interdomain") -> ModelConfig:
    """The mixer config used at a published scale: per-head KV, 64-wide
    heads/features/state, training context 4096."""
    return validate(ModelConfig(
        heads=spec.heads,
        model_dim=spec.model_dim,
        head_dim=64,
        feature_dim=64,
        state_dim=64,
        context_len=4096,
        chunk_size=64,
        prefill_chunk=2048,
        backend="chunkwise",
        variant=variant,
        rope_enabled=True,
        output_gate_enabled=False,
        n_kv=spec.heads,
        readout="denominator_free",
        seed=0,
    ))


def mixer_params_per_layer(config: ModelConfig) -> int:
    """Trainable real scalars in one mixer layer; complex entries count
    twice.  Mirrors the parameter container exactly, term by term."""
    validate(config)
    d, dh, r, m = config.model_dim, config.head_dim, config.feature_dim, config.state_dim
    n_kv, heads = config.n_kv, config.heads
    kv_width = n_kv * dh
    has_q = config.variant in ("full_interdomain", "single_input_qproj")
    generic = config.variant in ("single_input_qproj", "s4d_only")

    total = 2 * d * kv_width + d * d          # w_k, w_v, w_o
    total += 4 * kv_width                     # conv_k
    if has_q:
        total += d * d + 4 * d                # w_q, conv_q
    if generic:
        total += 4 * kv_width                 # conv on the second stream
    if config.output_gate_enabled:
        total += d * d
    total += n_kv * (2 * r + 2 * dh)          # input norms, gain + bias each
    total += n_kv * (5 * m + 2 * m * m)       # delta, Re/Im(A), complex B, complex C
    if not has_q:
        total += heads * dh * m * (r + dh)    # learned contraction
    return total


def softmax_mixer_params(model_dim: int) -> int:
    """Four dense square projections, the usual attention block."""
    return 4 * model_dim * model_dim


def count_params(spec: BackboneSpec, mixer: str = "softmax") -> int:
    """Exact trainable-parameter count for a decoder stack: untied token and
    output embeddings, per-layer mixer + SwiGLU + two norm gains, final norm.
    """
    if mixer not in MIXERS:
        raise KeyError(f"mixer must be one of {MIXERS}, got {mixer!r}")
    d, layers = spec.model_dim, spec.layers
    if mixer == "softmax":
        mix = softmax_mixer_params(d)
    else:
        variant = "full_interdomain" if mixer == "interdomain" else "s4d_only"
        mix = mixer_params_per_layer(scale_config(spec, variant))
    hidden = swiglu_hidden(d)
    per_layer = mix + 3 * d * hidden + 2 * d
    return 2 * spec.vocab * d + layers * per_layer + d


def overhead_fraction(spec: BackboneSpec, mixer: str = "interdomain") -> float:
    base = count_params(spec, "softmax")
    return (count_params(spec, mixer) - base) / base


@dataclass(frozen=True)
class StateBudget:
    """Recurrent state carried between tokens, in real scalars.

    ``kv_cache_per_token`` is the growing-cache comparison point: the real
    scalars a softmax layer appends per generated token.  Multiply by the
    prefix length for the total; the fixed-state side has no such factor.
    """

    cells: int
    per_cell_dof: int
    total_dof: int
    kv_cache_per_token: int

    def __post_init__(self):
        if self.total_dof != self.cells * self.per_cell_dof:
            raise ValueError("total_dof must equal cells * per_cell_dof")


def state_dof(config: ModelConfig) -> StateBudget:
    """Per-layer recurrent-state budget.  Complex state entries count as two
    real degrees of freedom; grouped KV divides the cell count, not the cell.
    """
    validate(config)
    per_cell = 2 * (config.feature_dim + config.head_dim) * config.state_dim
    return StateBudget(
        cells=config.n_kv,
        per_cell_dof=per_cell,
        total_dof=config.n_kv * per_cell,
        kv_cache_per_token=2 * config.heads * config.head_dim,
    )


@dataclass(frozen=True)
class CostReport:
    """Unit-coefficient instantiation of the per-head complexity table.

    Each field maps a named term to its value at the given shapes.  The
    numbers are asymptotic shapes with constants pinned at 1, so only
    ratios and scalings are meaningful, never absolutes.
    """

    total_work: dict[str, float]
    state_memory: dict[str, float]
    backward_memory: dict[str, float]
    decode_work: dict[str, float]


def cost_model(config: ModelConfig, n: int, n_q: int, backend: str | None = None) -> CostReport:
    """Evaluate the complexity terms per head at prefix length ``n`` and
    ``n_q`` attending queries.

    ``backend`` picks the fixed-state row: the FFT form multiplies the
    state-update work by log2(n) and must keep every state for the
    backward; the scan forms checkpoint every ``chunk_size`` steps.
    Softmax terms are reported alongside for the same shapes.
    """
    validate(config)
    if n < 0 or n_q < 0:
        raise ValueError("token counts must be nonnegative")
    backend = config.backend if backend is None else backend
    if backend not in BACKENDS:
        raise ValueError(f"backend must be one of {BACKENDS}, got {backend!r}")
    dh, r, m = config.head_dim, config.feature_dim, config.state_dim
    width = r + dh

    if backend == "fft":
        update_work = n * m * width * math.log2(max(n, 2))
        stored_states = n * m * width
    else:
        update_work = n * m * width
        stored_states = math.ceil(n / config.chunk_size) * m * width
    return CostReport(
        total_work={
            "softmax_attention": n_q * n * dh,
            "state_update": update_work,
            "query_readout": n_q * r * dh,
        },
        state_memory={
            "softmax_kv_cache": n * dh,
            "interdomain_state": m * width,
        },
        backward_memory={
            "softmax_attention_matrix": n_q * n,
            "stored_states": stored_states,
            "query_features": n_q * r,
        },
        decode_work={
            "softmax_step": n * dh,
            "interdomain_step_full": m * m * width,
            "interdomain_step_diagonal": m * width,
        },
    )


def budget_table(config: ModelConfig) -> dict[str, int]:
    """Flat dict view of state_dof plus the published-scale param counts,
    for the CLI's budget report."""
    budget = state_dof(config)
    out = {
        "cells": budget.cells,
        "per_cell_dof": budget.per_cell_dof,
        "total_dof": budget.total_dof,
        "kv_cache_per_token": budget.kv_cache_per_token,
    }
    for spec in BACKBONES:
        out[f"params_softmax_{spec.name}"] = count_params(spec, "softmax")
        out[f"params_interdomain_{spec.name}"] = count_params(spec, "interdomain")
    return out
