"""Exact basis projections: the uncompressed form of the fixed-state readout.

A sequence of key features and values is projected onto M basis functions
sampled on the token grid.  With a complete orthonormal basis (M == N) the
normalized readout reproduces feature attention exactly; truncating the
basis is what the learned state-space path approximates online.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .oracle import ZeroDenominatorError

ORTHO_TOL = 1e-10

BASIS_KINDS = ("indicator", "discrete_legendre", "custom")


@dataclass(frozen=True)
class DiscreteBasis:
    """M basis functions tabulated on an N-point grid, orthonormal rows."""

    phi: np.ndarray  # (M, N)
    kind: str = "custom"

    @property
    def m(self) -> int:
        return self.phi.shape[0]

    @property
    def n(self) -> int:
        return self.phi.shape[1]


def _check_orthonormal(phi: np.ndarray) -> None:
    gram = phi @ phi.T
    err = np.max(np.abs(gram - np.eye(phi.shape[0])))
    if err > ORTHO_TOL:
        raise ValueError(f"basis rows are not orthonormal (max Gram error {err:.3e})")


def make_indicator_basis(n: int) -> DiscreteBasis:
    """One indicator per grid point; complete by construction (M == N)."""
    if n < 1:
        raise ValueError("grid size must be positive")
    return DiscreteBasis(phi=np.eye(n), kind="indicator")


def make_legendre_basis(m: int, n: int) -> DiscreteBasis:
    """First M discrete orthonormal polynomials on the uniform grid.

    Built by orthonormalizing the monomial ladder with the three-term
    recurrence (numerically equivalent to Gram-Schmidt on monomials but
    stable at high degree), then re-orthonormalized once.  Requires M <= N.
    """
    if not 1 <= m <= n:
        raise ValueError(f"need 1 <= M <= N, got M={m}, N={n}")
    # an affine grid map changes nothing about the span; [-1, 1] conditions
    # the recurrence better than the raw token indices
    s = np.linspace(-1.0, 1.0, n) if n > 1 else np.zeros(1)
    rows = np.zeros((m, n))
    rows[0] = 1.0 / np.sqrt(n)
    prev = np.zeros(n)
    for k in range(1, m):
        w = s * rows[k - 1]
        w -= (w @ rows[k - 1]) * rows[k - 1]
        if k >= 2:
            w -= (w @ prev) * prev
        nw = np.linalg.norm(w)
        if nw == 0.0:
            raise ValueError(f"monomial ladder degenerated at degree {k}")
        prev = rows[k - 1]
        rows[k] = w / nw
    # one modified Gram-Schmidt sweep to scrub accumulated drift
    for k in range(m):
        for j in range(k):
            rows[k] -= (rows[k] @ rows[j]) * rows[j]
        rows[k] /= np.linalg.norm(rows[k])
    basis = DiscreteBasis(phi=rows, kind="discrete_legendre")
    _check_orthonormal(basis.phi)
    return basis


def make_custom_basis(phi: np.ndarray) -> DiscreteBasis:
    phi = np.asarray(phi, dtype=float)
    if phi.ndim != 2 or phi.shape[0] > phi.shape[1]:
        raise ValueError(f"phi must be (M, N) with M <= N, got {phi.shape}")
    _check_orthonormal(phi)
    return DiscreteBasis(phi=phi, kind="custom")


@dataclass(frozen=True)
class InterdomainState:
    """Basis-space summary of a key/value sequence.

    u:     (M, R)   projected key features
    gamma: (M, d)   projected values
    eta:   (M,)     projected all-ones sequence (the normalizer's numerator)
    """

    u: np.ndarray
    gamma: np.ndarray
    eta: np.ndarray


def project(keys_feat: np.ndarray, values: np.ndarray, basis: DiscreteBasis) -> InterdomainState:
    """Project key features (N, R) and values (N, d) onto the basis."""
    keys_feat = np.asarray(keys_feat, dtype=float)
    values = np.asarray(values, dtype=float)
    if keys_feat.shape[0] != basis.n or values.shape[0] != basis.n:
        raise ValueError(
            f"sequence length must match the basis grid ({basis.n}), got "
            f"keys {keys_feat.shape[0]} / values {values.shape[0]}"
        )
    phi = basis.phi
    return InterdomainState(
        u=phi @ keys_feat,
        gamma=phi @ values,
        eta=phi @ np.ones(basis.n),
    )


def readout_nw(q_feat: np.ndarray, state: InterdomainState) -> np.ndarray:
    """Normalized readout: (F U^T Gamma) / (F U^T eta) rowwise.

    Raises ``ZeroDenominatorError`` with the offending query row if any
    denominator is exactly zero.
    """
    q_feat = np.atleast_2d(np.asarray(q_feat, dtype=float))
    weights = q_feat @ state.u.T  # (N_q, M)
    den = weights @ state.eta
    bad = np.flatnonzero(den == 0.0)
    if bad.size:
        raise ZeroDenominatorError(int(bad[0]))
    return (weights @ state.gamma) / den[:, None]


def readout_free(q_feat: np.ndarray, state: InterdomainState) -> np.ndarray:
    """Denominator-free readout F U^T Gamma; the form the learned layer uses."""
    q_feat = np.atleast_2d(np.asarray(q_feat, dtype=float))
    return (q_feat @ state.u.T) @ state.gamma


def causal_project(
    keys_feat: np.ndarray,
    values: np.ndarray,
    basis_family: Sequence[DiscreteBasis],
) -> list[InterdomainState]:
    """Per-prefix projection: entry i summarizes keys/values [0..i].

    ``basis_family[i]`` must be a basis on an (i+1)-point grid.  The result
    at position i depends only on the prefix, which is the causality
    statement the online path inherits.
    """
    keys_feat = np.asarray(keys_feat, dtype=float)
    values = np.asarray(values, dtype=float)
    n = keys_feat.shape[0]
    if len(basis_family) != n:
        raise ValueError(f"need one basis per prefix, got {len(basis_family)} for N={n}")
    states = []
    for i, basis in enumerate(basis_family):
        if basis.n != i + 1:
            raise ValueError(f"basis_family[{i}] covers {basis.n} points, expected {i + 1}")
        states.append(project(keys_feat[: i + 1], values[: i + 1], basis))
    return states


def make_legendre_family(m: int, n: int) -> list[DiscreteBasis]:
    """Per-prefix Legendre bases, truncated to the prefix length when shorter."""
    return [make_legendre_basis(min(m, i + 1), i + 1) for i in range(n)]
