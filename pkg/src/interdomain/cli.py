"""Command-line entry point: verification suites, budgets, and the decode
simulator behind one binary.

Every subcommand loads a config (or the built-in tiny default), runs its
suite, prints a human table, and writes the same report as JSON under
``--out`` (default ``reports/``).  Exit status is 0 iff every case passed.
Reports are deterministic for a given config and seed: same bytes, run to
run, so CI can diff them.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import accounting, bench
from .basis import (
    causal_project,
    make_indicator_basis,
    make_legendre_basis,
    make_legendre_family,
    project,
    readout_free,
    readout_nw,
)
from .config import BACKENDS, VARIANTS, ModelConfig, load_config, make_rng, validate
from .features import make_identity
from .layer import backward, decode_step, forward, init_layer_params, prefill
from .oracle import AttentionInputs, feature_attention
from .ssm import random_ssm, run_scan


@dataclass(frozen=True)
class CaseResult:
    name: str
    error: float
    tolerance: float
    passed: bool


@dataclass(frozen=True)
class SuiteReport:
    suite: str
    seed: int
    cases: tuple[CaseResult, ...]

    def __post_init__(self):
        if not self.cases:
            raise ValueError("a suite must run at least one case")

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.cases)

    def to_dict(self) -> dict:
        return {
            "suite": self.suite,
            "seed": self.seed,
            "passed": self.passed,
            "cases": [dataclasses.asdict(c) for c in self.cases],
        }


def _case(name: str, error: float, tolerance: float) -> CaseResult:
    return CaseResult(name=name, error=float(error), tolerance=float(tolerance),
                      passed=bool(error <= tolerance))


def _exact(name: str, got, want) -> CaseResult:
    return _case(name, abs(float(got) - float(want)), 0.0)


def _rel(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(b))), 1e-300)
    return float(np.max(np.abs(a - b))) / scale


def _tiny(config: ModelConfig, variant: str) -> ModelConfig:
    base = dataclasses.replace(
        config, heads=2, model_dim=8, head_dim=4, feature_dim=4, state_dim=4,
        context_len=128, chunk_size=3, prefill_chunk=8, n_kv=2, variant=variant,
    )
    return validate(base)


# --- suites ---

def equiv_suite(config: ModelConfig, seed: int) -> SuiteReport:
    """Backend agreement on raw scans, plus prefill/decode round trips
    against the one-shot forward for every variant."""
    rng = make_rng(seed)
    cases = []
    for n, m in ((1, 1), (2, 4), (16, 4), (257, 8)):
        ssm = random_ssm(m, 3, rng)
        z = rng.standard_normal((n, 3))
        ref = run_scan(ssm, z, "sequential")
        for backend in BACKENDS[1:]:
            got = run_scan(ssm, z, backend, chunk=min(16, n))
            cases.append(_case(f"scan_{backend}_n{n}_m{m}",
                               _rel(got.outputs, ref.outputs), 1e-8))
    for variant in VARIANTS:
        cfg = _tiny(config, variant)
        params = init_layer_params(cfg, rng, contraction_scale=0.5)
        x = rng.standard_normal((24, cfg.model_dim))
        y_ref = forward(params, x, cfg)
        y_pre, state = prefill(params, x[:16], cfg, chunk=8)
        outs = [y_pre]
        for t in range(16, 24):
            y_t, state = decode_step(params, state, x[t], cfg)
            outs.append(y_t[None])
        cases.append(_case(f"prefill_decode_{variant}",
                           float(np.max(np.abs(np.concatenate(outs) - y_ref))), 1e-10))
    return SuiteReport("equiv", seed, tuple(cases))


def gradcheck_suite(config: ModelConfig, seed: int) -> SuiteReport:
    """Central finite differences against the analytic backward on the tiny
    shapes, one case per variant; checks the input gradient, the output
    projection, and one complex SSM drive vector."""
    h = 1e-5
    cases = []
    for variant in VARIANTS:
        cfg = _tiny(config, variant)
        rng = make_rng(seed)
        params = init_layer_params(cfg, rng, contraction_scale=0.6)
        x = rng.standard_normal((6, cfg.model_dim))
        g = rng.standard_normal((6, cfg.model_dim))

        def loss():
            return float(np.sum(forward(params, x, cfg) * g))

        grads, grad_x = backward(params, x, g, cfg)
        worst = 0.0

        fd = np.zeros_like(x)
        for i in range(x.size):
            x.flat[i] += h; up = loss()
            x.flat[i] -= 2 * h; down = loss()
            x.flat[i] += h
            fd.flat[i] = (up - down) / (2 * h)
        worst = max(worst, _rel(grad_x, fd))

        w_o = params.w_o
        fd = np.zeros_like(w_o)
        for i in range(w_o.size):
            w_o.flat[i] += h; up = loss()
            w_o.flat[i] -= 2 * h; down = loss()
            w_o.flat[i] += h
            fd.flat[i] = (up - down) / (2 * h)
        worst = max(worst, _rel(grads["w_o"], fd))

        ssm = params.ssms[0]
        fd_b = np.zeros_like(ssm.b)
        for i in range(ssm.b.size):
            for mul in (1.0, 1j):
                b2 = ssm.b.copy(); b2.flat[i] += h * mul
                params.ssms[0] = dataclasses.replace(ssm, b=b2); up = loss()
                b2 = ssm.b.copy(); b2.flat[i] -= h * mul
                params.ssms[0] = dataclasses.replace(ssm, b=b2); down = loss()
                fd_b.flat[i] += (up - down) / (2 * h) * mul
            params.ssms[0] = ssm
        an = grads["kv0.ssm.b"]
        worst = max(worst, _rel(an.real, fd_b.real), _rel(an.imag, fd_b.imag))
        cases.append(_case(f"gradcheck_{variant}", worst, 1e-4))
    return SuiteReport("gradcheck", seed, tuple(cases))


def budget_suite(config: ModelConfig, seed: int) -> SuiteReport:
    """State-budget identities for the loaded config plus the published
    parameter-count anchors at all four scales."""
    budget = accounting.state_dof(config)
    cases = [
        _exact("total_is_cells_times_per_cell",
               budget.total_dof, budget.cells * budget.per_cell_dof),
    ]
    big = accounting.scale_config(accounting.backbone("1.3b"))
    anchor = accounting.state_dof(big)
    cases.append(_exact("per_cell_dof_at_1p3b", anchor.per_cell_dof, 16384))
    cases.append(_exact("total_dof_at_1p3b", anchor.total_dof, 524288))
    cases.append(_exact("kv_cache_per_token_at_1p3b", anchor.kv_cache_per_token, 4096))
    s4d = accounting.state_dof(accounting.scale_config(accounting.backbone("1.3b"), "s4d_only"))
    cases.append(_exact("iso_state_s4d_equals_interdomain", s4d.total_dof, anchor.total_dof))

    published = {"125m": 134_105_856, "350m": 373_867_520,
                 "760m": 777_856_512, "1.3b": 1_345_423_360}
    for spec in accounting.BACKBONES:
        cases.append(_exact(f"softmax_params_{spec.name}",
                            accounting.count_params(spec, "softmax"), published[spec.name]))
        frac = accounting.overhead_fraction(spec)
        in_band = 0.003 <= frac <= 0.012
        cases.append(CaseResult(f"interdomain_overhead_band_{spec.name}",
                                error=float(frac), tolerance=0.012, passed=in_band))
    return SuiteReport("budget", seed, tuple(cases))


def bench_suite(config: ModelConfig, seed: int, out_dir: Path,
                batches: tuple[int, ...], prefix_lens: tuple[int, ...],
                steps: int, chunk: int | None) -> SuiteReport:
    """Decode-grid structure checks; also writes the grid CSV."""
    if chunk is not None:
        config = validate(dataclasses.replace(config, prefill_chunk=chunk))
    rows = bench.run_decode_grid(config, batches, prefix_lens, steps)
    bench.emit_csv(rows, str(out_dir / "bench.csv"))

    cases = []
    for b in batches:
        inter = [r.per_step_ops for r in rows if r.path == "interdomain" and r.b == b]
        soft = [r.per_step_ops for r in rows if r.path == "softmax_kv" and r.b == b]
        cases.append(_case(f"interdomain_flat_b{b}", max(inter) - min(inter), 0.0))
        slack = min(y - x for x, y in zip(soft, soft[1:])) if len(soft) > 1 else 1
        cases.append(CaseResult(f"softmax_increasing_b{b}", error=float(max(0, -slack)),
                                tolerance=0.0, passed=slack > 0))
        chunked = [r.peak_memory_units for r in rows if r.path == "interdomain_chunked" and r.b == b]
        full = [r.peak_memory_units for r in rows if r.path == "interdomain" and r.b == b]
        worst = max(c - f for c, f in zip(chunked, full))
        cases.append(_case(f"chunked_peak_bounded_b{b}", max(0, worst), 0.0))
    n = min(48, config.context_len)
    err = bench.verify_prefill_equivalence(config, n=n, chunk=max(1, n // 6), seed=seed)
    cases.append(_case("prefill_equivalence", err, 1e-10))
    return SuiteReport("bench", seed, tuple(cases))


def basis_suite(config: ModelConfig, seed: int) -> SuiteReport:
    """Complete-basis equality demo: with as many basis functions as tokens,
    projecting and reading out reproduces exact feature attention."""
    rng = make_rng(seed)
    fmap = make_identity()
    cases = []
    for n in (16, 32):
        d, d_v = 6, 5
        q = rng.uniform(0.05, 1.0, size=(n, d))
        k = rng.uniform(0.05, 1.0, size=(n, d))
        v = rng.standard_normal((n, d_v))
        inputs = AttentionInputs(q=q, k=k, v=v, causal=False)
        want = feature_attention(inputs, fmap)
        want_free = (q @ k.T) @ v
        for basis, label in ((make_indicator_basis(n), "indicator"),
                             (make_legendre_basis(n, n), "legendre")):
            state = project(k, v, basis)
            cases.append(_case(f"{label}_nw_n{n}", _rel(readout_nw(q, state), want), 1e-10))
            cases.append(_case(f"{label}_free_n{n}",
                               _rel(readout_free(q, state), want_free), 1e-10))
        causal_want = feature_attention(AttentionInputs(q=q, k=k, v=v, causal=True), fmap)
        states = causal_project(k, v, make_legendre_family(n, n))
        got = np.stack([readout_nw(q[i:i + 1], states[i])[0] for i in range(n)])
        cases.append(_case(f"legendre_causal_n{n}", _rel(got, causal_want), 1e-10))
    return SuiteReport("basis", seed, tuple(cases))


# --- wiring ---

def _print_report(report: SuiteReport) -> None:
    print(f"suite: {report.suite}   seed: {report.seed}")
    width = max(len(c.name) for c in report.cases)
    for c in report.cases:
        status = "pass" if c.passed else "FAIL"
        print(f"  {c.name:<{width}}  error {c.error:>12.4e}  tol {c.tolerance:>10.3e}  {status}")
    done = sum(c.passed for c in report.cases)
    print(f"  {done}/{len(report.cases)} cases passed")


def _write_json(report: SuiteReport, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{report.suite}.json"
    with open(path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _print_budget_table(config: ModelConfig) -> None:
    table = accounting.budget_table(config)
    width = max(len(k) for k in table)
    for key, value in table.items():
        print(f"  {key:<{width}}  {value:>15,}")


def _int_list(text: str) -> tuple[int, ...]:
    try:
        values = tuple(int(part) for part in text.split(",") if part)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"not a comma-separated int list: {text!r}") from exc
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="FILE", default=None,
                        help="JSON model config (default: built-in tiny config)")
    common.add_argument("--seed", type=int, default=None,
                        help="override the config seed for suite data")
    common.add_argument("--out", metavar="DIR", default="reports",
                        help="directory for JSON/CSV reports (default: reports)")

    parser = argparse.ArgumentParser(
        prog="interdomain",
        description="Verification suites and budget/bench reports for the "
                    "fixed-state interdomain token mixer.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("equiv", parents=[common],
                   help="scan-backend agreement and prefill/decode round trips")
    sub.add_parser("gradcheck", parents=[common],
                   help="finite-difference checks of the analytic backward")
    sub.add_parser("budget", parents=[common],
                   help="state DoF and parameter-count anchors")
    p_bench = sub.add_parser("bench", parents=[common],
                             help="op-counting decode/prefill simulator")
    p_bench.add_argument("--batch", type=_int_list, default=(1,),
                         help="comma-separated batch sizes (default 1)")
    p_bench.add_argument("--prefix-lens", type=_int_list,
                         default=(512, 1024, 2048, 4096, 8192, 16384),
                         help="comma-separated prefix lengths")
    p_bench.add_argument("--steps", type=int, default=64,
                         help="decode steps per cell (default 64)")
    p_bench.add_argument("--chunk", type=int, default=None,
                         help="prefill chunk override for the chunked path")
    sub.add_parser("basis", parents=[common],
                   help="complete-basis equality demo")
    return parser


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    config = load_config(args.config, seed_override=args.seed) if args.config \
        else validate(ModelConfig() if args.seed is None
                      else dataclasses.replace(ModelConfig(), seed=args.seed))
    seed = config.seed
    out_dir = Path(args.out)

    if args.command == "equiv":
        report = equiv_suite(config, seed)
    elif args.command == "gradcheck":
        report = gradcheck_suite(config, seed)
    elif args.command == "budget":
        report = budget_suite(config, seed)
    elif args.command == "bench":
        out_dir.mkdir(parents=True, exist_ok=True)
        report = bench_suite(config, seed, out_dir, args.batch,
                             args.prefix_lens, args.steps, args.chunk)
    else:
        report = basis_suite(config, seed)

    if args.command == "budget":
        _print_budget_table(config)
    _print_report(report)
    _write_json(report, out_dir)
    return 0 if report.passed else 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
