"""Velocity-space collision operators and their structural checks.

Three operator families act on profiles g(v) over a velocity space:

* ``BgkOperator``           relaxation to the equilibrium profile,
* ``ScatteringOperator``    jump kernel k(v_i, v_j) between velocity nodes,
* ``FokkerPlanckOperator``  drift-diffusion built in factored form -A*A.

All are mass preserving (weighted column sums vanish), kill the equilibrium,
and are symmetric in L2(M^-1) whenever detailed balance holds.  The operators
here do not depend on position; spatially varying collisions enter only
through the scalar degeneracy weight applied by the evolution module.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg as la

from .errors import CapacityError

__all__ = [
    "BgkOperator",
    "ScatteringOperator",
    "FokkerPlanckOperator",
    "SpectralGapReport",
    "CheegerReport",
    "dissipation_v",
    "spectral_gap",
    "cheeger_constant",
    "detailed_balance_check",
    "gamma2_check",
    "random_reversible_kernel",
    "kernel_to_csv",
    "kernel_from_csv",
]

CHEEGER_BRUTE_FORCE_CAP = 20


class BgkOperator:
    """Relaxation collision: L g = rate * (<g> M - g)."""

    def __init__(self, velocities, rate: float = 1.0):
        self.vel = velocities
        self.rate = float(rate)
        self.is_reversible = True

    def apply(self, g: np.ndarray) -> np.ndarray:
        mass = g @ self.vel.weights
        return self.rate * (mass * self.vel.maxwellian - g)

    def matrix(self) -> np.ndarray:
        m = self.vel.maxwellian
        w = self.vel.weights
        return self.rate * (np.outer(m, w) - np.eye(self.vel.n))


class ScatteringOperator:
    """Jump collisions (L g)_i = sum_j w_j [k_ij g_j - k_ji g_i].

    ``kernel[i, j]`` is the rate of jumps into node i from node j.  The
    diagonal is ignored (it cancels identically).
    """

    def __init__(self, velocities, kernel: np.ndarray):
        kernel = np.asarray(kernel, dtype=float)
        n = velocities.n
        if kernel.shape != (n, n):
            raise ValueError("kernel must be square on the velocity grid")
        if np.any(kernel < 0):
            raise ValueError("kernel rates must be nonnegative")
        self.vel = velocities
        self.kernel = kernel.copy()
        np.fill_diagonal(self.kernel, 0.0)
        self.is_reversible = detailed_balance_check(self)[0]

    def apply(self, g: np.ndarray) -> np.ndarray:
        w = self.vel.weights
        gain = self.kernel @ (w * g)
        loss = g * (w @ self.kernel)
        return gain - loss

    def matrix(self) -> np.ndarray:
        w = self.vel.weights
        L = self.kernel * w[None, :]
        L[np.diag_indices_from(L)] -= w @ self.kernel
        return L

    def scaled(self, c: float) -> "ScatteringOperator":
        return ScatteringOperator(self.vel, c * self.kernel)


class FokkerPlanckOperator:
    """Drift-diffusion collisions on a truncated velocity line.

    Built in factored form: with h = f/M and S the staggered forward
    difference, L f = -(1/dv) S^T W S h where W holds Gaussian face weights
    and zero flux is imposed at the truncation edges.  This makes the
    discrete dissipation identity <f, Lf>_{M^-1} = -|A f|_W^2 exact and rules
    out spurious positive modes.
    """

    def __init__(self, velocities, rate: float = 1.0):
        v = velocities.nodes
        if v.ndim != 1:
            raise ValueError("Fokker-Planck needs a 1D velocity line")
        self.vel = velocities
        self.rate = float(rate)
        self.is_reversible = True
        dv = v[1] - v[0]
        self.dv = dv
        faces = 0.5 * (v[:-1] + v[1:])
        raw_nodes = np.exp(-0.5 * v ** 2)
        z = (velocities.weights * raw_nodes).sum()
        self.face_weight = np.exp(-0.5 * faces ** 2) / z
        self.node_m = velocities.maxwellian

    def apply(self, f: np.ndarray) -> np.ndarray:
        h = f / self.node_m
        flux = self.face_weight * np.diff(h) / self.dv        # M_* dh/dv at faces
        out = np.zeros(self.vel.n)
        out[:-1] += flux
        out[1:] -= flux
        return self.rate * out / self.dv

    def factor_apply(self, f: np.ndarray) -> np.ndarray:
        """A f = forward difference of f/M at the faces."""
        return np.diff(f / self.node_m) / self.dv

    def factor_norm_sq(self, f: np.ndarray) -> float:
        af = self.factor_apply(f)
        return self.rate * float(af @ (self.face_weight * self.dv * af))

    def matrix(self) -> np.ndarray:
        n = self.vel.n
        S = (np.eye(n, k=1)[:-1] - np.eye(n)[:-1]) / self.dv
        L = -S.T @ (np.diag(self.face_weight * self.dv) @ S) / self.dv
        return self.rate * (L @ np.diag(1.0 / self.node_m))


def _minv_weights(op) -> np.ndarray:
    return op.vel.weights / op.vel.maxwellian


def dissipation_v(op, g: np.ndarray) -> float:
    """-<g, Lg> in L2(M^-1); for Fokker-Planck via the exact factored form."""
    if isinstance(op, FokkerPlanckOperator):
        return op.factor_norm_sq(g)
    lg = op.apply(g)
    return -float((g * lg) @ _minv_weights(op))


@dataclass
class SpectralGapReport:
    lambda1: float
    witness: np.ndarray
    weight_label: str = "1"


@dataclass
class CheegerReport:
    phi: float
    witness: np.ndarray        # boolean mask of the optimal subset
    subsets_scanned: int = 0


def spectral_gap(op, coercivity_weight: Optional[np.ndarray] = None,
                 weight_label: str = "1") -> SpectralGapReport:
    """Smallest eigenvalue of the symmetrized collision form on mass-zero profiles.

    Solves  min  dissipation_v(g) / |g - <g>M|^2_{w/M}  over g with zero
    velocity integral; ``coercivity_weight`` is the w(v) array (default 1).
    """
    vel = op.vel
    n = vel.n
    w_quad = vel.weights
    m = vel.maxwellian
    wv = np.ones(n) if coercivity_weight is None else np.asarray(coercivity_weight, dtype=float)
    if np.any(wv <= 0):
        raise ValueError("coercivity weight must be positive")

    # y-coordinates in which L2(M^-1) is the plain Euclidean metric
    scale = np.sqrt(w_quad / m)
    L = op.matrix()
    K = (L * scale[:, None]) / scale[None, :]
    A = -0.5 * (K + K.T)
    B = np.diag(wv)
    constraint = np.sqrt(w_quad * m)        # mass functional in y-coordinates

    Q = la.null_space(constraint[None, :] / np.linalg.norm(constraint))
    try:
        vals, vecs = la.eigh(Q.T @ A @ Q, Q.T @ B @ Q)
    except la.LinAlgError as exc:
        raise RuntimeError(f"spectral gap eigensolve failed to converge: {exc}") from exc
    y = Q @ vecs[:, 0]
    witness = y / scale
    lam = float(vals[0])
    return SpectralGapReport(lambda1=lam, witness=witness, weight_label=weight_label)


def cheeger_constant(op: ScatteringOperator) -> CheegerReport:
    """Brute-force conductance over all proper subsets of the velocity nodes.

    The cut integrates sqrt(q_ij M_i M_j) over ordered pairs (i in A,
    j in A^c), with q_ij = k_ij M_j; volumes are equilibrium masses.  Both A
    and its complement are enumerated, so the one-sided cut is no loss.
    Capped at |V| <= 20 nodes.
    """
    if not isinstance(op, ScatteringOperator):
        raise TypeError("Cheeger constant is defined for scattering kernels")
    n = op.vel.n
    if n > CHEEGER_BRUTE_FORCE_CAP:
        raise CapacityError(
            f"Cheeger brute force enumerates 2^{n} subsets; cap is 2^{CHEEGER_BRUTE_FORCE_CAP}. "
            "Use spectral_gap for larger spaces.")
    m = op.vel.maxwellian * op.vel.weights      # node masses, sum 1 for DiscreteSet
    q = op.kernel * (op.vel.weights * op.vel.maxwellian)[None, :]
    W = np.sqrt(q * np.outer(m, m))

    n_subsets = 1 << n
    codes = np.arange(n_subsets, dtype=np.uint32)
    S = ((codes[:, None] >> np.arange(n, dtype=np.uint32)[None, :]) & 1).astype(float)
    proper = (S.sum(axis=1) > 0) & (S.sum(axis=1) < n)
    S = S[proper]
    vol = S @ m
    cut = np.einsum("si,ij,sj->s", S, W, 1.0 - S)
    ratio = cut / np.minimum(vol, 1.0 - vol)
    best = int(np.argmin(ratio))
    return CheegerReport(phi=float(ratio[best]), witness=S[best].astype(bool),
                         subsets_scanned=len(S))


def detailed_balance_check(op) -> tuple:
    """(passes, max violation) for k_ij M_j = k_ji M_i."""
    if isinstance(op, ScatteringOperator) or hasattr(op, "kernel"):
        k = op.kernel
        m = op.vel.maxwellian
        q = k * m[None, :]
        viol = float(np.max(np.abs(q - q.T)))
        return viol <= 1e-12, viol
    # BGK and Fokker-Planck are reversible by construction
    return True, 0.0


def gamma2_check(op, f: np.ndarray):
    """Pointwise curvature sign: min over v of [M L(f^2/M) - 2 f L f].

    Nonnegative (up to roundoff) for reversible kernels and for the factored
    Fokker-Planck operator; may fail for non-reversible kernels, in which
    case the result is flagged not-applicable rather than an error.
    """
    f = np.asarray(f, dtype=float)
    if np.any(f <= 0):
        raise ValueError("gamma2_check needs a strictly positive profile")
    m = op.vel.maxwellian
    g2 = op.apply(f * f / m) * m - 2.0 * f * op.apply(f)
    applicable = getattr(op, "is_reversible", True)
    return float(g2.min()), bool(applicable)


def random_reversible_kernel(m: int, seed: int, keep_prob: float = 0.7) -> ScatteringOperator:
    """Deterministic random scattering kernel with detailed balance.

    Draws symmetric nonnegative conductances q, keeps a ring so the jump
    graph stays irreducible, draws a random positive equilibrium M, and sets
    k_ij = q_ij / M_j.
    """
    if m < 2:
        raise ValueError("need at least two velocity nodes")
    rng = np.random.default_rng(seed)
    weights = rng.uniform(0.2, 1.0, size=m)
    weights = weights / weights.sum()

    upper = np.triu(rng.uniform(0.1, 1.0, size=(m, m)), k=1)
    mask = np.triu(rng.random((m, m)) < keep_prob, k=1)
    q = upper * mask
    q = q + q.T
    ring = np.arange(m)
    q[ring, np.roll(ring, -1)] += 0.05
    q[np.roll(ring, -1), ring] += 0.05

    # velocity nodes themselves are plumbing; a symmetric set keeps the
    # evenness invariant satisfied
    half = np.arange(1, m // 2 + 1, dtype=float)
    if m % 2 == 0:
        nodes = np.concatenate([-half[::-1], half])
    else:
        nodes = np.concatenate([-half[::-1], [0.0], half])
    from .phase import DiscreteSet
    vel = DiscreteSet(nodes, weights=weights)
    kernel = q / vel.maxwellian[None, :]
    return ScatteringOperator(vel, kernel)


def kernel_to_csv(op: ScatteringOperator, path) -> None:
    """Write the equilibrium weights (first row) and kernel matrix as CSV."""
    rows = np.vstack([op.vel.maxwellian[None, :], op.kernel])
    np.savetxt(path, rows, delimiter=",")


def kernel_from_csv(path) -> ScatteringOperator:
    data = np.loadtxt(path, delimiter=",")
    m = data[0]
    kernel = data[1:]
    from .phase import DiscreteSet
    n = len(m)
    half = np.arange(1, n // 2 + 1, dtype=float)
    if n % 2 == 0:
        nodes = np.concatenate([-half[::-1], half])
    else:
        nodes = np.concatenate([-half[::-1], [0.0], half])
    vel = DiscreteSet(nodes, weights=m)
    return ScatteringOperator(vel, kernel)
