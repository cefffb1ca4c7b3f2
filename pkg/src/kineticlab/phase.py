"""Domains, velocity spaces, potentials, degeneracy weights, equilibria and grids.

Everything downstream (collision operators, transport, decay runs, geometric
control checks) consumes the objects defined here.  Conventions:

* position grids are uniform, cell-centered, with midpoint quadrature;
* velocity grids carry their own quadrature weights and a discrete equilibrium
  profile M normalized so that sum(w * M) == 1 exactly;
* the reference measure for norms is dmu = f_inf^{-1} dx dv, so the
  equilibrium itself has unit norm and unit mass;
* boundary traces live on the outgoing set (outward normal dot v > 0) with
  measure dnu = (n.v) f_inf^{-1} dS dv.

All objects are immutable after construction and safe to share between
workers.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp

__all__ = [
    "Torus1D",
    "Interval1D",
    "Torus2D",
    "Disc2D",
    "DiscreteSet",
    "CircleVelocities",
    "TruncatedLine",
    "ZeroPotential",
    "HarmonicPotential",
    "TabulatedPotential",
    "ConstantWeight",
    "IndicatorWeight",
    "PowerLawWeight",
    "TabulatedWeight",
    "PhaseGrid",
    "Field",
    "build_equilibrium",
    "weighted_norm",
    "project_local_equilibrium",
    "poincare_constant",
    "regularity_check",
    "connected_components",
]

GAUSS_NORM_1D = 1.0 / math.sqrt(2.0 * math.pi)


# ---------------------------------------------------------------------------
# spatial domains
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Torus1D:
    """Periodic interval [0, length)."""

    length: float = 1.0
    dim: int = 1
    has_boundary: bool = False

    def __post_init__(self):
        if self.length <= 0:
            raise ValueError("torus length must be positive")


@dataclass(frozen=True)
class Interval1D:
    """Open interval (a, b) with two boundary points."""

    a: float
    b: float
    dim: int = 1
    has_boundary: bool = True

    def __post_init__(self):
        if not self.b > self.a:
            raise ValueError("interval requires b > a")

    @property
    def length(self) -> float:
        return self.b - self.a


@dataclass(frozen=True)
class Torus2D:
    """Periodic rectangle [0, Lx) x [0, Ly)."""

    lengths: tuple = (1.0, 1.0)
    dim: int = 2
    has_boundary: bool = False

    def __post_init__(self):
        if len(self.lengths) != 2 or min(self.lengths) <= 0:
            raise ValueError("Torus2D needs two positive side lengths")


@dataclass(frozen=True)
class Disc2D:
    """Disc of given radius centered at the origin.

    Supports trajectory tracing and boundary sampling only; grid-based PDE
    evolution on the disc is out of scope and PhaseGrid refuses it.
    """

    radius: float = 1.0
    dim: int = 2
    has_boundary: bool = True

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("disc radius must be positive")

    def contains(self, x: np.ndarray) -> np.ndarray:
        return np.einsum("...i,...i->...", x, x) <= self.radius ** 2

    def outward_normal(self, x: np.ndarray) -> np.ndarray:
        r = np.linalg.norm(x, axis=-1, keepdims=True)
        return x / np.where(r == 0.0, 1.0, r)


# ---------------------------------------------------------------------------
# velocity spaces
# ---------------------------------------------------------------------------

class DiscreteSet:
    """Finite velocity set with equilibrium weights.

    Parameters
    ----------
    points : array_like, shape (m,) or (m, d)
        Velocity nodes.  The set must be even: for every node v the point -v
        is also a node.
    weights : array_like, optional
        Equilibrium masses M_i, normalized to sum 1.  Uniform by default.
    """

    def __init__(self, points, weights=None):
        pts = np.atleast_1d(np.asarray(points, dtype=float))
        if pts.ndim == 1:
            self.dim = 1
        else:
            self.dim = pts.shape[1]
        self.nodes = pts
        self.n = len(pts)
        if weights is None:
            m = np.full(self.n, 1.0 / self.n)
        else:
            m = np.asarray(weights, dtype=float)
            if m.shape != (self.n,) or np.any(m <= 0):
                raise ValueError("need one positive weight per node")
            m = m / m.sum()
        self.weights = np.ones(self.n)          # quadrature weight per node
        self.maxwellian = m / (self.weights @ m)
        self.reflect_index = self._build_reflection()
        self._check_span()

    def _build_reflection(self):
        idx = np.empty(self.n, dtype=int)
        flat = self.nodes.reshape(self.n, -1)
        for i, v in enumerate(flat):
            d = np.linalg.norm(flat + v, axis=1)
            j = int(np.argmin(d))
            if d[j] > 1e-12 * (1.0 + np.linalg.norm(v)):
                raise ValueError("velocity set is not even: missing -v for some node")
            idx[i] = j
        return idx

    def _check_span(self):
        flat = self.nodes.reshape(self.n, -1)
        if np.linalg.matrix_rank(flat) < flat.shape[1]:
            raise ValueError("velocity set does not span R^d")

    def speeds(self):
        flat = self.nodes.reshape(self.n, -1)
        return np.linalg.norm(flat, axis=1)


class CircleVelocities:
    """Unit-speed directions at N uniform angles on the circle.

    The angle grid starts at 0, so the horizontal direction is always a node.
    N must be even so the set is closed under v -> -v.
    """

    def __init__(self, n_theta: int):
        if n_theta < 4 or n_theta % 2:
            raise ValueError("need an even number of angles, at least 4")
        self.n = n_theta
        self.dim = 2
        self.angles = 2.0 * np.pi * np.arange(n_theta) / n_theta
        self.nodes = np.column_stack([np.cos(self.angles), np.sin(self.angles)])
        self.weights = np.full(n_theta, 2.0 * np.pi / n_theta)
        m = np.full(n_theta, 1.0 / (2.0 * np.pi))
        self.maxwellian = m / (self.weights @ m)
        self.reflect_index = np.roll(np.arange(n_theta), -(n_theta // 2))

    def speeds(self):
        return np.ones(self.n)


class TruncatedLine:
    """Uniform velocity grid on [-v_max, v_max] with a Gaussian equilibrium.

    Cell-centered nodes (no node at v = 0, which keeps the outgoing/incoming
    split at a wall unambiguous).  The Gaussian weight is renormalized
    discretely so that sum(w * M) == 1 to machine precision; the continuum
    tail mass beyond v_max is recorded in ``truncation_error``.
    """

    def __init__(self, v_max: float = 6.0, n_v: int = 128):
        if v_max <= 0 or n_v < 4 or n_v % 2:
            raise ValueError("need v_max > 0 and an even node count >= 4")
        self.v_max = float(v_max)
        self.n = int(n_v)
        self.dim = 1
        self.dv = 2.0 * v_max / n_v
        self.nodes = -v_max + (np.arange(n_v) + 0.5) * self.dv
        self.weights = np.full(n_v, self.dv)
        raw = GAUSS_NORM_1D * np.exp(-0.5 * self.nodes ** 2)
        self.maxwellian = raw / (self.weights @ raw)
        self.reflect_index = np.arange(n_v)[::-1].copy()
        self.truncation_error = math.erfc(v_max / math.sqrt(2.0))

    def speeds(self):
        return np.abs(self.nodes)


# ---------------------------------------------------------------------------
# potentials
# ---------------------------------------------------------------------------

class ZeroPotential:
    """phi = 0 (uniform spatial equilibrium)."""

    def value(self, x):
        return np.zeros(np.shape(x)[:1] if np.ndim(x) > 1 else np.shape(x))

    def grad(self, x):
        return np.zeros_like(np.asarray(x, dtype=float))

    def hess_norm(self, x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[0] if x.ndim > 1 else x.shape)


class HarmonicPotential:
    """phi(x) = omega^2 |x|^2 / 2."""

    def __init__(self, omega: float = 1.0):
        if omega <= 0:
            raise ValueError("frequency must be positive")
        self.omega = float(omega)

    def value(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim > 1:
            return 0.5 * self.omega ** 2 * np.sum(x * x, axis=-1)
        return 0.5 * self.omega ** 2 * x * x

    def grad(self, x):
        return self.omega ** 2 * np.asarray(x, dtype=float)

    def hess_norm(self, x):
        x = np.asarray(x, dtype=float)
        shape = x.shape[:-1] if x.ndim > 1 else x.shape
        return np.full(shape, self.omega ** 2)


class TabulatedPotential:
    """Potential given by samples of phi, phi', phi'' on a 1D grid.

    Evaluation between samples is linear interpolation.  The derivative
    tables are taken as given (they come from the same source as phi), which
    keeps the regularity report faithful to the input data.
    """

    def __init__(self, x, phi, dphi, d2phi):
        x = np.asarray(x, dtype=float)
        order = np.argsort(x)
        self.x_table = x[order]
        self.phi_table = np.asarray(phi, dtype=float)[order]
        self.dphi_table = np.asarray(dphi, dtype=float)[order]
        self.d2phi_table = np.asarray(d2phi, dtype=float)[order]
        if not (len(self.x_table) == len(self.phi_table) == len(self.dphi_table) == len(self.d2phi_table)):
            raise ValueError("tables must share one length")
        if len(self.x_table) < 2:
            raise ValueError("need at least two samples")

    @classmethod
    def from_csv(cls, path):
        data = np.genfromtxt(path, delimiter=",", names=True)
        names = data.dtype.names
        if names is None or len(names) < 4:
            raise ValueError("potential CSV needs four columns: x, phi, dphi, d2phi")
        cols = [data[n] for n in names[:4]]
        return cls(*cols)

    def value(self, x):
        return np.interp(x, self.x_table, self.phi_table)

    def grad(self, x):
        return np.interp(x, self.x_table, self.dphi_table)

    def hess_norm(self, x):
        return np.abs(np.interp(x, self.x_table, self.d2phi_table))


# ---------------------------------------------------------------------------
# degeneracy weights sigma(x)
# ---------------------------------------------------------------------------

class ConstantWeight:
    def __init__(self, value: float = 1.0):
        if value < 0:
            raise ValueError("sigma must be nonnegative")
        self.value = float(value)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        shape = x.shape[:-1] if x.ndim > 1 else x.shape
        return np.full(shape, self.value)


class IndicatorWeight:
    """sigma = value inside a region, 0 outside.

    The region is a vectorized predicate on positions.  Unbounded weights are
    rejected: this artifact only supports bounded tabulated sigma.
    """

    def __init__(self, inside: Callable[[np.ndarray], np.ndarray], value: float = 1.0):
        if not (0 <= value < math.inf):
            raise ValueError("sigma must be bounded and nonnegative")
        self.inside = inside
        self.value = float(value)

    def __call__(self, x):
        return np.where(self.inside(np.asarray(x, dtype=float)), self.value, 0.0)


class PowerLawWeight:
    """sigma_p(x) = min(1, |x|^{2p}), vanishing to order 2p at the origin."""

    def __init__(self, p: int = 1):
        if p < 1:
            raise ValueError("exponent p must be a positive integer")
        self.p = int(p)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim > 1:
            r2 = np.sum(x * x, axis=-1)
        else:
            r2 = x * x
        return np.minimum(1.0, r2 ** self.p)


class TabulatedWeight:
    """sigma sampled on a 1D grid, linearly interpolated, clamped at 0."""

    def __init__(self, x, sigma):
        self.x_table = np.asarray(x, dtype=float)
        self.sigma_table = np.asarray(sigma, dtype=float)
        if np.any(self.sigma_table < 0) or not np.all(np.isfinite(self.sigma_table)):
            raise ValueError("sigma samples must be finite and nonnegative")

    def __call__(self, x):
        return np.maximum(0.0, np.interp(x, self.x_table, self.sigma_table))


def connected_components(mask: np.ndarray, connectivity: int = 4) -> int:
    """Count connected components of a boolean cell mask (1D or 2D).

    2D connectivity is 4- or 8-neighborhood; 1D ignores the argument.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 1:
        runs = np.flatnonzero(np.diff(np.concatenate([[0], mask.view(np.int8), [0]])) == 1)
        return len(runs)
    if connectivity not in (4, 8):
        raise ValueError("connectivity must be 4 or 8")
    labels = np.full(mask.shape, -1, dtype=int)
    if connectivity == 4:
        offsets = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    else:
        offsets = [(di, dj) for di in (-1, 0, 1) for dj in (-1, 0, 1) if (di, dj) != (0, 0)]
    count = 0
    for seed in zip(*np.nonzero(mask)):
        if labels[seed] >= 0:
            continue
        stack = [seed]
        labels[seed] = count
        while stack:
            i, j = stack.pop()
            for di, dj in offsets:
                a, b = i + di, j + dj
                if 0 <= a < mask.shape[0] and 0 <= b < mask.shape[1]:
                    if mask[a, b] and labels[a, b] < 0:
                        labels[a, b] = count
                        stack.append((a, b))
        count += 1
    return count


# ---------------------------------------------------------------------------
# phase-space grid
# ---------------------------------------------------------------------------

class PhaseGrid:
    """Tensor grid over a spatial domain and a velocity space.

    Fields are arrays of shape ``space_shape + (n_v,)``.  The grid exposes
    quadrature in the plain dx dv measure, the reference measure
    dmu = f_inf^{-1} dx dv, and (for domains with boundary) the outgoing
    trace measure dnu.
    """

    def __init__(self, domain, velocities, potential=None, n_x=64):
        if isinstance(domain, Disc2D):
            raise ValueError("Disc2D is trajectory-only; no PDE grid is defined on it")
        self.domain = domain
        self.vel = velocities
        self.potential = potential if potential is not None else ZeroPotential()

        if isinstance(domain, Torus1D):
            nx = int(n_x)
            self.space_shape = (nx,)
            self.hx = domain.length / nx
            self.x = (np.arange(nx) + 0.5) * self.hx
            self.cell_volume = self.hx
            self._phi = np.asarray(self.potential.value(self.x), dtype=float)
        elif isinstance(domain, Interval1D):
            nx = int(n_x)
            self.space_shape = (nx,)
            self.hx = domain.length / nx
            self.x = domain.a + (np.arange(nx) + 0.5) * self.hx
            self.cell_volume = self.hx
            self._phi = np.asarray(self.potential.value(self.x), dtype=float)
        elif isinstance(domain, Torus2D):
            if np.isscalar(n_x):
                n_x = (int(n_x), int(n_x))
            nx, ny = n_x
            self.space_shape = (nx, ny)
            self.hx = domain.lengths[0] / nx
            self.hy = domain.lengths[1] / ny
            xs = (np.arange(nx) + 0.5) * self.hx
            ys = (np.arange(ny) + 0.5) * self.hy
            self.x = np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1)
            self.cell_volume = self.hx * self.hy
            self._phi = np.asarray(self.potential.value(self.x.reshape(-1, 2)), dtype=float).reshape(nx, ny)
        else:
            raise TypeError(f"unsupported domain {type(domain).__name__}")

        # discrete normalization of exp(-phi): sum_x w_x exp(-phi) = 1
        raw = np.exp(-self._phi)
        self.z_space = float(raw.sum() * self.cell_volume)
        if not np.isfinite(self.z_space) or self.z_space <= 0:
            raise ValueError("potential is not normalizable on this grid")
        self.rho_inf = raw / self.z_space                     # spatial marginal of f_inf
        self.f_inf = self.rho_inf[..., None] * self.vel.maxwellian
        self.n_space = int(np.prod(self.space_shape))
        self.n_total = self.n_space * self.vel.n
        self._wv = self.vel.weights
        self._maxw = self.vel.maxwellian

        if isinstance(domain, Interval1D):
            self._build_trace_sets()

    # -- traces ------------------------------------------------------------

    def _build_trace_sets(self):
        v = self.vel.nodes
        if v.ndim != 1:
            raise ValueError("interval domains need 1D velocities")
        # left wall: outward normal -1; right wall: +1
        self.outgoing = {"left": np.flatnonzero(v < 0), "right": np.flatnonzero(v > 0)}
        self.incoming = {"left": np.flatnonzero(v > 0), "right": np.flatnonzero(v < 0)}
        self.wall_normal = {"left": -1.0, "right": 1.0}

    def trace_weights(self, wall: str) -> np.ndarray:
        """dnu quadrature weights on the outgoing set of one wall."""
        out = self.outgoing[wall]
        v = self.vel.nodes[out]
        n = self.wall_normal[wall]
        x_wall = self.domain.a if wall == "left" else self.domain.b
        rho = math.exp(-float(self.potential.value(np.array([x_wall]))[0])) / self.z_space
        f_inf_wall = rho * self._maxw[out]
        return (n * v) * self._wv[out] / f_inf_wall

    # -- quadrature --------------------------------------------------------

    def mass(self, f: np.ndarray) -> float:
        return float((f @ self._wv).sum() * self.cell_volume)

    def norm_mu(self, f: np.ndarray) -> float:
        return math.sqrt(max(self.inner_mu(f, f), 0.0))

    def inner_mu(self, f: np.ndarray, g: np.ndarray) -> float:
        integrand = f * g / self.f_inf
        return float((integrand @ self._wv).sum() * self.cell_volume)

    def norm_plain(self, f: np.ndarray) -> float:
        integrand = f * f
        return math.sqrt(float((integrand @ self._wv).sum() * self.cell_volume))

    def norm_weighted(self, f: np.ndarray, w: np.ndarray) -> float:
        """L2 norm against an arbitrary nonnegative weight array (dx dv base)."""
        integrand = f * f * w
        return math.sqrt(float((integrand @ self._wv).sum() * self.cell_volume))

    def velocity_average(self, f: np.ndarray) -> np.ndarray:
        """<f>(x) = integral of f over velocities."""
        return f @ self._wv

    def sigma_values(self, sigma) -> np.ndarray:
        if isinstance(self.domain, Torus2D):
            vals = sigma(self.x.reshape(-1, 2)).reshape(self.space_shape)
        else:
            vals = sigma(self.x)
        vals = np.asarray(vals, dtype=float)
        if np.any(vals < 0) or not np.all(np.isfinite(vals)):
            raise ValueError("sigma must be finite and nonnegative on the grid")
        return vals

    def flatten(self, f: np.ndarray) -> np.ndarray:
        return np.ascontiguousarray(f).reshape(self.n_total)

    def unflatten(self, u: np.ndarray) -> np.ndarray:
        return u.reshape(self.space_shape + (self.vel.n,))

    def quadrature_selfcheck(self) -> dict:
        """Consistency numbers for the grid's quadrature rules."""
        eq_mass = self.mass(self.f_inf)
        eq_norm = self.inner_mu(self.f_inf, self.f_inf)
        return {
            "equilibrium_mass": eq_mass,
            "equilibrium_mu_normsq": eq_norm,
            "velocity_weight_sum": float(self._wv @ self._maxw),
        }


@dataclass
class Field:
    """Values on a PhaseGrid; construction validates shape and finiteness."""

    grid: PhaseGrid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        expected = self.grid.space_shape + (self.grid.vel.n,)
        if self.values.shape != expected:
            raise ValueError(f"field shape {self.values.shape} does not match grid {expected}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field contains non-finite entries")

    def same_grid(self, other: "Field") -> None:
        if other.grid is not self.grid:
            raise ValueError("fields live on different grids")


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def build_equilibrium(grid: PhaseGrid) -> Field:
    """Global equilibrium f_inf = exp(-phi) M / Z with unit discrete mass."""
    return Field(grid, grid.f_inf.copy())


def weighted_norm(f: Field, weight="dmu", w_array: Optional[np.ndarray] = None) -> float:
    """Norm of a field under dmu (default), plain dx dv, or a custom weight."""
    g = f.grid
    if weight == "dmu":
        return g.norm_mu(f.values)
    if weight == "dxdv":
        return g.norm_plain(f.values)
    if weight == "custom":
        if w_array is None:
            raise ValueError("custom weight requires w_array")
        return g.norm_weighted(f.values, w_array)
    raise ValueError(f"unknown weight {weight!r}")


def project_local_equilibrium(f: Field) -> Field:
    """Projection onto local equilibria: (Pf)(x,v) = <f>(x) M(v).

    Orthogonal in dmu, which the test suite checks against random fields.
    """
    g = f.grid
    rho = g.velocity_average(f.values)
    return Field(g, rho[..., None] * g.vel.maxwellian)


def _neumann_stiffness_periodic_1d(wexp: np.ndarray, h: float) -> sp.csr_matrix:
    n = len(wexp)
    face = 0.5 * (wexp + np.roll(wexp, -1))   # face between cell i and i+1
    rows, cols, vals = [], [], []
    for i in range(n):
        j = (i + 1) % n
        rows += [i, j, i, j]
        cols += [i, j, j, i]
        vals += [face[i], face[i], -face[i], -face[i]]
    A = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    return A / h


def _stiffness_2d(mask: np.ndarray, wexp: np.ndarray, hx: float, hy: float,
                  periodic: bool) -> tuple:
    """Weighted Neumann stiffness on the masked cells; returns (A, index_map)."""
    nx, ny = mask.shape
    idx = -np.ones(mask.shape, dtype=int)
    cells = np.argwhere(mask)
    for k, (i, j) in enumerate(cells):
        idx[i, j] = k
    rows, cols, vals = [], [], []

    def add_face(a, b, w):
        rows.extend([a, b, a, b])
        cols.extend([a, b, b, a])
        vals.extend([w, w, -w, -w])

    for i, j in cells:
        a = idx[i, j]
        for (di, dj, h) in ((1, 0, hx), (0, 1, hy)):
            ii, jj = i + di, j + dj
            if periodic:
                ii %= nx
                jj %= ny
            elif ii >= nx or jj >= ny:
                continue
            if not mask[ii % nx, jj % ny]:
                continue
            b = idx[ii % nx, jj % ny]
            w = 0.5 * (wexp[i, j] + wexp[ii % nx, jj % ny]) / h ** 2
            add_face(a, b, w * hx * hy)
    A = sp.csr_matrix((vals, (rows, cols)), shape=(len(cells), len(cells)))
    return A, cells


def poincare_constant(domain, potential, region=None, n_x=256,
                      bracket_weight=True) -> float:
    """Smallest nonzero eigenvalue of the weighted spatial Rayleigh quotient.

    Works in the substituted variable u = rho * exp(phi):

        min  integral |grad u|^2 exp(-phi)  /  integral u^2 W exp(-phi)

    over u with zero exp(-phi)-mean on the region, where the denominator
    weight is W = 1 + |grad phi|^2 by default (``bracket_weight=True``) or
    W = 1.

    region : boolean cell mask (or None for the whole domain).
    """
    pot = potential if potential is not None else ZeroPotential()
    if isinstance(domain, (Torus1D, Interval1D)):
        nx = int(n_x)
        h = domain.length / nx
        x0 = 0.0 if isinstance(domain, Torus1D) else domain.a
        x = x0 + (np.arange(nx) + 0.5) * h
        phi = np.asarray(pot.value(x), dtype=float)
        gradsq = np.asarray(pot.grad(x), dtype=float) ** 2
        wexp = np.exp(-phi)
        mask = np.ones(nx, dtype=bool) if region is None else np.asarray(region, dtype=bool)
        if mask.sum() <= 1:
            raise ValueError("region is degenerate (at most one cell)")
        ncomp = connected_components(mask)
        if region is None and isinstance(domain, Torus1D):
            A = _neumann_stiffness_periodic_1d(wexp, h)
            keep = np.arange(nx)
        else:
            keep = np.flatnonzero(mask)
            sub = wexp[keep]
            # faces only between adjacent kept cells
            n = len(keep)
            adj = np.diff(keep) == 1
            face = 0.5 * (sub[:-1] + sub[1:]) * adj / h
            main = np.zeros(n)
            main[:-1] += face
            main[1:] += face
            A = sp.diags([main, -face, -face], [0, -1, 1], format="csr")
        W = (1.0 + gradsq[keep]) if bracket_weight else np.ones(len(keep))
        B = sp.diags(wexp[keep] * W * h)
        mvec = wexp[keep] * h
    elif isinstance(domain, Torus2D):
        if np.isscalar(n_x):
            n_x = (int(n_x), int(n_x))
        nx, ny = n_x
        hx, hy = domain.lengths[0] / nx, domain.lengths[1] / ny
        xs = (np.arange(nx) + 0.5) * hx
        ys = (np.arange(ny) + 0.5) * hy
        X = np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1).reshape(-1, 2)
        phi = np.asarray(pot.value(X), dtype=float).reshape(nx, ny)
        grad = np.asarray(pot.grad(X), dtype=float).reshape(nx, ny, 2)
        gradsq = np.sum(grad * grad, axis=-1)
        wexp = np.exp(-phi)
        mask = np.ones((nx, ny), dtype=bool) if region is None else np.asarray(region, dtype=bool)
        if mask.sum() <= 1:
            raise ValueError("region is degenerate (at most one cell)")
        ncomp = connected_components(mask, connectivity=4)
        A, cells = _stiffness_2d(mask, wexp, hx, hy, periodic=True)
        keep = tuple(cells.T)
        W = (1.0 + gradsq[keep]) if bracket_weight else np.ones(len(cells))
        B = sp.diags(wexp[keep] * W * hx * hy)
        mvec = wexp[keep] * hx * hy
    else:
        raise TypeError("poincare_constant supports Torus1D, Interval1D, Torus2D")

    if ncomp > 1:
        warnings.warn("region is disconnected on the grid; the reported eigenvalue "
                      "will be numerically zero", RuntimeWarning)

    n = A.shape[0]
    if n > 4600:
        raise ValueError(f"poincare_constant: {n} cells exceeds the dense-eigensolve cap; "
                         "use a coarser grid")
    # The quotient is invariant under u -> u + const and the mean in the
    # denominator is taken against exp(-phi) dx, so the minimization runs over
    # the complement of the constant mode with respect to mvec.  Project onto
    # that complement explicitly and solve the reduced dense pencil.
    m = mvec / np.linalg.norm(mvec)
    Q = la.null_space(m[None, :])
    Ad = Q.T @ (A @ Q)
    Bd = Q.T @ (B @ Q)
    lam = la.eigh(Ad, Bd, eigvals_only=True)
    return float(lam[0])


@dataclass
class RegularityReport:
    sup_ratio: float
    threshold: float
    passed: bool
    boundary_lipschitz: bool
    epsilon: float
    argmax_x: float


def regularity_check(domain, potential, region=None, epsilon: float = 0.1,
                     threshold: float = 4.0, n_x: int = 512) -> RegularityReport:
    """Evaluate sup |phi''| / (1 + |phi'|) on the region and compare to a cap.

    All supported domain shapes (boxes, tori, the disc) have Lipschitz
    boundaries by construction, so the chart feasibility flag only reports
    that fact.  The threshold defaults to 4, the weight-variation factor the
    covering construction tolerates.
    """
    pot = potential if potential is not None else ZeroPotential()
    if isinstance(domain, Disc2D):
        # disc supports only radial/tabulated data through 1D profiles
        x = np.linspace(0.0, domain.radius, n_x)
    elif isinstance(domain, (Torus1D, Interval1D)):
        x0 = 0.0 if isinstance(domain, Torus1D) else domain.a
        x = x0 + (np.arange(n_x) + 0.5) * (domain.length / n_x)
    elif isinstance(domain, Torus2D):
        xs = (np.arange(n_x) + 0.5) * (domain.lengths[0] / n_x)
        ys = (np.arange(n_x) + 0.5) * (domain.lengths[1] / n_x)
        x = np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1).reshape(-1, 2)
    else:
        raise TypeError("unsupported domain")
    if isinstance(pot, TabulatedPotential):
        x = pot.x_table
    if region is not None:
        x = x[np.asarray(region, dtype=bool)]
    hess = np.asarray(pot.hess_norm(x), dtype=float)
    grad = np.asarray(pot.grad(x), dtype=float)
    if grad.ndim > hess.ndim:
        grad = np.linalg.norm(grad, axis=-1)
    ratio = hess / (1.0 + np.abs(grad))
    k = int(np.argmax(ratio))
    xk = x[k]
    return RegularityReport(
        sup_ratio=float(ratio[k]),
        threshold=float(threshold),
        passed=bool(ratio[k] <= threshold),
        boundary_lipschitz=True,
        epsilon=float(epsilon),
        argmax_x=float(np.atleast_1d(xk)[0]),
    )
