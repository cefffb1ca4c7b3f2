"""Occupation-time control checkers and the normalized trajectory weight.

Measures how much time trajectories of the kinetic flow spend inside the
scattering region.  Two checkers are provided: a deterministic one that
follows the collisionless characteristics on a periodic box, and a
Monte-Carlo one that runs the full jump process (wall randomness plus
interior scattering) and averages the occupation time over particles.
On top of the deterministic checker sits the construction of the
normalized weight

    psi(t, x, v) = chi(x) w(v) / D(t, x, v),
    D(t, x, v)   = (1/T) integral_0^T chi w (Phi_{s-t}(x, v)) ds,

whose time average along any forward trajectory equals one.  The
denominator D is constant along trajectories, which the construction
and the normalization check exploit (the identity itself is covered by
a dedicated unit test).

Smooth position weights built here are C^1; configurations that rely on
Lipschitz bounds propagating along the flow assume that property of the
free transport, it is not verified numerically.
"""

import dataclasses
import math
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import qmc

from .errors import NumericalCheckError
from .phase import CircleVelocities, Disc2D, Interval1D, Torus1D, Torus2D
from .transport import McState, make_rng, monte_carlo_run

# 99% two-sided normal quantile for Monte-Carlo confidence half-widths
_Z99 = 2.5758293035489004


# ---------------------------------------------------------------------------
# position weights


class BandWeight:
    """C^1 bump supported on one periodic coordinate band.

    Equals 1 where the periodic distance of x[axis] to ``center`` is at
    most ``half_width - margin``, ramps to 0 with a cubic smoothstep on
    the outer collar, and vanishes identically outside the closed band.
    The support is exactly the band, so the weight is admissible for a
    control region equal to that band.
    """

    def __init__(self, axis: int = 0, center: float = 0.5,
                 half_width: float = 1.0 / 6.0, margin: float = 1.0 / 24.0,
                 length: float = 1.0):
        if axis < 0:
            raise ValueError("axis must be a nonnegative coordinate index")
        if not 0 < margin < half_width:
            raise ValueError("need 0 < margin < half_width")
        if not 0 < half_width <= length / 2.0:
            raise ValueError("band must fit inside one period")
        self.axis = int(axis)
        self.center = float(center)
        self.half_width = float(half_width)
        self.margin = float(margin)
        self.length = float(length)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        coord = x[..., self.axis] if x.ndim > 1 else x
        r = np.mod(coord - self.center, self.length)
        d = np.minimum(r, self.length - r)
        u = np.clip((self.half_width - d) / self.margin, 0.0, 1.0)
        return u * u * (3.0 - 2.0 * u)


class CrossWeight:
    """C^1 weight on the union of two band supports.

    Blends as a + b - a*b, which keeps the support equal to the union
    and stays C^1 where a pointwise max would put kinks along the seam
    where the two ramps cross.
    """

    def __init__(self, band_a: Callable, band_b: Callable):
        self.band_a = band_a
        self.band_b = band_b

    def __call__(self, x):
        a = self.band_a(x)
        b = self.band_b(x)
        return a + b - a * b


class BallIndicator:
    """Indicator of a closed centered ball, scaled by ``value``.

    Not C^1.  The ``is_indicator`` flag lets occupation integrators
    switch to exact chord-crossing lengths instead of pointwise
    quadrature.
    """

    is_indicator = True

    def __init__(self, radius: float = 0.5, value: float = 1.0,
                 center: Sequence[float] = (0.0, 0.0)):
        if radius <= 0:
            raise ValueError("ball radius must be positive")
        if value < 0:
            raise ValueError("indicator value must be nonnegative")
        self.radius = float(radius)
        self.value = float(value)
        self.center = np.asarray(center, dtype=float)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1 and len(self.center) == 1:
            x = x[:, None]
        d2 = np.sum((x - self.center) ** 2, axis=-1)
        return np.where(d2 <= self.radius * self.radius, self.value, 0.0)


# ---------------------------------------------------------------------------
# free flow on a periodic box


class TorusFlow:
    """Free transport on a periodic box: x advances linearly, v persists."""

    def __init__(self, domain):
        if isinstance(domain, Torus1D):
            self.lengths = np.array([domain.length])
        elif isinstance(domain, Torus2D):
            self.lengths = np.asarray(domain.lengths, dtype=float)
        else:
            raise ValueError("free periodic flow needs a torus domain")
        self.domain = domain

    def advance(self, x, v, t):
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        t = np.asarray(t, dtype=float)
        if t.ndim:
            t = t[..., None]
        return np.mod(x + t * v, self.lengths)


# ---------------------------------------------------------------------------
# configuration


@dataclasses.dataclass(frozen=True)
class CollisionLaw:
    """Interior scattering description for the full-process checker."""

    sigma: Callable
    sigma_max: float
    rate: float = 1.0
    jump: str = "maxwellian"

    def __post_init__(self):
        if self.sigma_max <= 0:
            raise ValueError("sigma_max must be positive")
        if self.rate <= 0:
            raise ValueError("scattering rate must be positive")


def _sample_box(domain, n: int, seed: int) -> np.ndarray:
    """Low-discrepancy positions covering the domain, for spot validation."""
    if isinstance(domain, Torus1D):
        pts = qmc.Halton(1, scramble=True, seed=seed).random(n)
        return pts * domain.length
    if isinstance(domain, Interval1D):
        pts = qmc.Halton(1, scramble=True, seed=seed).random(n)
        return domain.a + pts * (domain.b - domain.a)
    if isinstance(domain, Torus2D):
        pts = qmc.Halton(2, scramble=True, seed=seed).random(n)
        return pts * np.asarray(domain.lengths)
    if isinstance(domain, Disc2D):
        pts = (2.0 * qmc.Halton(2, scramble=True, seed=seed).random(2 * n) - 1.0)
        pts = pts * domain.radius
        inside = np.sum(pts * pts, axis=1) <= domain.radius ** 2
        return pts[inside]
    raise ValueError("unsupported domain for control configuration")


@dataclasses.dataclass
class ControlConfig:
    """Inputs of an occupation-time check.

    chi is the position weight (support inside the control region), w an
    optional velocity weight, T the horizon.  The sampling plan is a
    tensor grid of cell-centered positions times the velocity node set,
    plus ``refine`` low-discrepancy samples near the reported argmin;
    ``initial_points`` overrides the plan with explicit (x0, v0) pairs.
    """

    domain: object
    velocities: object
    chi: Callable
    w: Optional[Callable] = None
    T: float = 4.0
    potential: object = None
    grid_shape: Tuple[int, ...] = (64, 64)
    refine: int = 256
    dt: Optional[float] = None
    particles: int = 10000
    threshold: float = 1.0
    denominator_floor: Optional[float] = None
    support_region: Optional[Callable] = None
    initial_points: Optional[Tuple[np.ndarray, np.ndarray]] = None
    seed: int = 0

    def __post_init__(self):
        if self.T <= 0:
            raise ValueError("horizon T must be positive")
        if self.particles < 1:
            raise ValueError("particle count must be at least one")
        if self.refine < 0:
            raise ValueError("refinement count must be nonnegative")
        if self.threshold < 0:
            raise ValueError("pass threshold must be nonnegative")
        if self.initial_points is not None:
            x0 = np.atleast_2d(np.asarray(self.initial_points[0], dtype=float))
            v0 = np.atleast_2d(np.asarray(self.initial_points[1], dtype=float))
            if x0.shape != v0.shape or x0.shape[1] != self.domain.dim:
                raise ValueError("initial_points must be matching (n, dim) arrays")
            self.initial_points = (x0, v0)
        pts = _sample_box(self.domain, 1024, self.seed)
        vals = np.asarray(self.chi(pts), dtype=float)
        if np.any(vals < -1e-12):
            raise ValueError("position weight must be nonnegative")
        if self.support_region is not None:
            bad = (vals > 0) & ~np.asarray(self.support_region(pts), dtype=bool)
            if np.any(bad):
                where = pts[np.argmax(bad)]
                raise ValueError(
                    "position weight leaks outside the control region, "
                    "for example at %s" % np.array2string(np.atleast_1d(where)))

    def quad_steps(self) -> int:
        dt = self.dt if self.dt is not None else self.T / 1024.0
        return max(1, int(round(self.T / dt)))

    def floor_value(self) -> float:
        if self.denominator_floor is not None:
            return self.denominator_floor
        return self.threshold / self.T


# ---------------------------------------------------------------------------
# quadrature kernels

_TIME_CHUNK = 256


def _chi_w(config: ControlConfig, pos: np.ndarray) -> np.ndarray:
    return np.asarray(config.chi(pos), dtype=float)


def _w_values(config: ControlConfig, v: np.ndarray) -> np.ndarray:
    if config.w is None:
        return np.ones(len(np.atleast_2d(v)))
    return np.asarray(config.w(v), dtype=float)


def _trajectory_mean(config: ControlConfig, x0: np.ndarray, v0: np.ndarray,
                     n_steps: int) -> np.ndarray:
    """Trapezoid mean of chi along x0 + t v0 over [0, T].

    Returned as a mean (weights summing exactly to n_steps, then divided
    by n_steps) so a constant weight integrates to exactly T * mean with
    no accumulation of step roundoff.  Positions are evaluated without
    wrapping; the band weights reduce modulo the period themselves.
    """
    x0 = np.atleast_2d(x0)
    v0 = np.broadcast_to(np.atleast_2d(v0), x0.shape)
    total = np.zeros(len(x0))
    step = config.T / n_steps
    for j0 in range(0, n_steps + 1, _TIME_CHUNK):
        j1 = min(j0 + _TIME_CHUNK, n_steps + 1)
        t = np.arange(j0, j1) * step
        pos = x0[:, None, :] + t[None, :, None] * v0[:, None, :]
        vals = _chi_w(config, pos)
        wts = np.ones(j1 - j0)
        if j0 == 0:
            wts[0] = 0.5
        if j1 == n_steps + 1:
            wts[-1] = 0.5
        total += vals @ wts
    return total / n_steps


def _occupation(config: ControlConfig, x0: np.ndarray, v0: np.ndarray,
                n_steps: Optional[int] = None) -> np.ndarray:
    """Occupation integral of chi * w over [0, T] for straight flight."""
    steps = n_steps if n_steps is not None else config.quad_steps()
    mean = _trajectory_mean(config, x0, v0, steps)
    return config.T * mean * _w_values(config, v0)


def _velocity_nodes(config: ControlConfig) -> np.ndarray:
    nodes = np.asarray(config.velocities.nodes, dtype=float)
    if nodes.ndim == 1:
        nodes = nodes[:, None]
    return nodes


def _tensor_positions(config: ControlConfig) -> Tuple[np.ndarray, Tuple[np.ndarray, ...]]:
    if isinstance(config.domain, Torus1D):
        lengths = (config.domain.length,)
    elif isinstance(config.domain, Torus2D):
        lengths = tuple(config.domain.lengths)
    else:
        raise ValueError("tensor sampling is defined on periodic boxes only; "
                         "pass initial_points explicitly for other domains")
    shape = config.grid_shape
    if len(shape) != len(lengths):
        raise ValueError("grid_shape must have one entry per space dimension")
    axes = tuple((np.arange(n) + 0.5) * L / n for n, L in zip(shape, lengths))
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.column_stack([m.ravel() for m in mesh])
    return pts, axes


# ---------------------------------------------------------------------------
# report


@dataclasses.dataclass
class GccReport:
    """Result of an occupation-time check over sampled initial data."""

    mode: str
    c_min: float
    c_mean: float
    argmin_x: np.ndarray
    argmin_v: np.ndarray
    sample_count: int
    half_width: float
    threshold: float
    passed: bool
    x0: np.ndarray
    v0: np.ndarray
    integrals: np.ndarray
    stderr: np.ndarray
    flagged: np.ndarray
    tensor_min: Optional[float] = None
    heatmap: Optional[np.ndarray] = None
    heatmap_axes: Optional[Tuple[np.ndarray, ...]] = None

    def __post_init__(self):
        self.c_min = max(0.0, float(self.c_min))
        if self.c_min > self.c_mean + 1e-9:
            raise ValueError("minimum above mean, report assembly is broken")

    def to_csv(self, path) -> None:
        """Per-sample table with a summary header, one row per (x0, v0)."""
        dim = self.x0.shape[1]
        cols = (["x0_%d" % (i + 1) for i in range(dim)]
                + ["v0_%d" % (i + 1) for i in range(dim)]
                + ["integral", "stderr"])
        with open(path, "w") as fh:
            fh.write("# mode,%s\n" % self.mode)
            fh.write("# c_min,%.17g\n" % self.c_min)
            fh.write("# c_mean,%.17g\n" % self.c_mean)
            fh.write("# argmin_x,%s\n" % ";".join("%.17g" % a for a in self.argmin_x))
            fh.write("# argmin_v,%s\n" % ";".join("%.17g" % a for a in self.argmin_v))
            fh.write("# samples,%d\n" % self.sample_count)
            fh.write("# half_width,%.17g\n" % self.half_width)
            fh.write("# threshold,%.17g\n" % self.threshold)
            fh.write("# passed,%d\n" % int(self.passed))
            fh.write("# flagged,%d\n" % len(self.flagged))
            fh.write(",".join(cols) + "\n")
            for i in range(len(self.integrals)):
                row = list(self.x0[i]) + list(self.v0[i]) + [self.integrals[i],
                                                            self.stderr[i]]
                fh.write(",".join("%.17g" % r for r in row) + "\n")

    def heatmap_csv(self, path) -> None:
        """Per-position worst occupation over sampled velocities."""
        if self.heatmap is None:
            raise ValueError("this report carries no position heatmap")
        ax = self.heatmap_axes
        with open(path, "w") as fh:
            if self.heatmap.ndim == 1:
                fh.write("x1,c\n")
                for i, a in enumerate(ax[0]):
                    fh.write("%.17g,%.17g\n" % (a, self.heatmap[i]))
            else:
                fh.write("x1,x2,c\n")
                for i, a in enumerate(ax[0]):
                    for j, b in enumerate(ax[1]):
                        fh.write("%.17g,%.17g,%.17g\n" % (a, b, self.heatmap[i, j]))


def _finite_stats(integrals: np.ndarray):
    finite = np.isfinite(integrals)
    if not np.any(finite):
        raise NumericalCheckError("every occupation sample failed to evaluate")
    vals = integrals[finite]
    imin = np.flatnonzero(finite)[np.argmin(vals)]
    return float(vals.min()), float(vals.mean()), int(imin), np.flatnonzero(~finite)


# ---------------------------------------------------------------------------
# deterministic checker


def gcc_deterministic(config: ControlConfig) -> GccReport:
    """Check the occupation-time condition along straight characteristics.

    Supports free flow on periodic boxes (no potential).  Every sampled
    initial condition gets the trapezoid quadrature of chi(X_t) w(V_t)
    over [0, T]; the report carries min and mean plus the argmin so the
    sampling can be refined adversarially.  Samples evaluating to a
    non-finite value are flagged and kept in the table, never dropped.
    """
    if config.potential is not None:
        raise ValueError("deterministic checker handles free flow only; "
                         "use the Monte-Carlo checker for forced dynamics")
    if config.initial_points is not None:
        x0, v0 = config.initial_points
        integrals = _occupation(config, x0, v0)
        c_min, c_mean, imin, flagged = _finite_stats(integrals)
        return GccReport(
            mode="deterministic", c_min=c_min, c_mean=c_mean,
            argmin_x=x0[imin], argmin_v=v0[imin], sample_count=len(integrals),
            half_width=0.0, threshold=config.threshold,
            passed=(c_min >= config.threshold and len(flagged) == 0),
            x0=x0, v0=v0, integrals=integrals,
            stderr=np.zeros(len(integrals)), flagged=flagged)

    pts, axes = _tensor_positions(config)
    nodes = _velocity_nodes(config)
    n_space = len(pts)
    blocks = []
    for node in nodes:
        blocks.append(_occupation(config, pts, node))
    integrals = np.concatenate(blocks)
    x0 = np.tile(pts, (len(nodes), 1))
    v0 = np.repeat(nodes, n_space, axis=0)

    per_v = integrals.reshape(len(nodes), *config.grid_shape)
    with np.errstate(invalid="ignore"):
        heatmap = np.nanmin(np.where(np.isfinite(per_v), per_v, np.nan), axis=0)

    c_min, c_mean, imin, flagged = _finite_stats(integrals)
    tensor_min = c_min
    argmin_x, argmin_v = x0[imin].copy(), v0[imin].copy()

    if config.refine > 0:
        rx, rv = _refinement_samples(config, axes, argmin_x, argmin_v)
        extra = _occupation(config, rx, rv)
        x0 = np.vstack([x0, rx])
        v0 = np.vstack([v0, rv])
        integrals = np.concatenate([integrals, extra])
        c_min, c_mean, imin, flagged = _finite_stats(integrals)
        argmin_x, argmin_v = x0[imin].copy(), v0[imin].copy()

    return GccReport(
        mode="deterministic", c_min=c_min, c_mean=c_mean,
        argmin_x=argmin_x, argmin_v=argmin_v, sample_count=len(integrals),
        half_width=0.0, threshold=config.threshold,
        passed=(c_min >= config.threshold and len(flagged) == 0),
        x0=x0, v0=v0, integrals=integrals, stderr=np.zeros(len(integrals)),
        flagged=flagged, tensor_min=tensor_min, heatmap=heatmap,
        heatmap_axes=axes)


def _refinement_samples(config: ControlConfig, axes, argmin_x, argmin_v):
    """Low-discrepancy samples in a one-cell neighborhood of the argmin.

    Positions move within plus/minus one grid spacing per axis (wrapped);
    for the circle velocity set the angle moves within one angular slot,
    discrete velocity sets stay on the argmin node.
    """
    dim = len(axes)
    if isinstance(config.domain, Torus1D):
        lengths = np.array([config.domain.length])
    else:
        lengths = np.asarray(config.domain.lengths, dtype=float)
    spacings = lengths / np.array([len(a) for a in axes])
    circle = isinstance(config.velocities, CircleVelocities)
    d = dim + (1 if circle else 0)
    u = qmc.Halton(d, scramble=True, seed=config.seed + 1).random(config.refine)
    rx = np.mod(argmin_x + (2.0 * u[:, :dim] - 1.0) * spacings, lengths)
    if circle:
        dtheta = 2.0 * np.pi / config.velocities.n
        theta = np.arctan2(argmin_v[1], argmin_v[0]) \
            + (2.0 * u[:, dim] - 1.0) * dtheta
        rv = np.column_stack([np.cos(theta), np.sin(theta)])
    else:
        rv = np.tile(argmin_v, (config.refine, 1))
    return rx, rv


# ---------------------------------------------------------------------------
# full-process Monte-Carlo checker


def _segment_occupation(config: ControlConfig, xs, vs, ts) -> np.ndarray:
    """Occupation of chi along straight segments x(s) = xs + s vs, s in [0, ts].

    Indicator weights on the disc get the exact chord-crossing length;
    smooth weights get a midpoint composite sized by the configured
    quadrature step.  Segments never cross the disc wall (wall events end
    them) and periodic weights reduce wrapped positions themselves.
    """
    chi = config.chi
    if getattr(chi, "is_indicator", False) and isinstance(config.domain, Disc2D):
        rel = xs - chi.center
        a = np.sum(vs * vs, axis=1)
        b = np.sum(rel * vs, axis=1)
        c = np.sum(rel * rel, axis=1) - chi.radius ** 2
        disc = b * b - a * c
        with np.errstate(divide="ignore", invalid="ignore"):
            root = np.sqrt(np.clip(disc, 0.0, None))
            s_lo = (-b - root) / a
            s_hi = (-b + root) / a
        overlap = np.clip(np.minimum(s_hi, ts) - np.maximum(s_lo, 0.0), 0.0, None)
        overlap = np.where((disc > 0) & (a > 0), overlap, 0.0)
        return chi.value * overlap

    dtq = config.T / config.quad_steps()
    t_max = float(np.max(ts)) if len(ts) else 0.0
    n_q = int(min(4096, max(4, math.ceil(t_max / dtq))))
    out = np.zeros(len(ts))
    chunk = max(1, (1 << 20) // n_q)
    s_rel = (np.arange(n_q) + 0.5) / n_q
    for i0 in range(0, len(ts), chunk):
        i1 = min(i0 + chunk, len(ts))
        s = s_rel[None, :] * ts[i0:i1, None]
        pos = xs[i0:i1, None, :] + s[:, :, None] * vs[i0:i1, None, :]
        out[i0:i1] = np.mean(_chi_w(config, pos), axis=1) * ts[i0:i1]
    return out


def gcc_full_monte_carlo(config: ControlConfig, boundary=0.0,
                         collision: Optional[CollisionLaw] = None) -> GccReport:
    """Estimate the occupation-time condition under the full jump process.

    For each initial condition, ``config.particles`` copies run the
    event-driven process (wall accommodation ``boundary``, interior
    scattering from ``collision``) and the occupation of chi is summed
    exactly over the recorded free-flight segments.  The report's
    half-width is the 99% normal-approximation interval at the argmin
    and the pass decision uses the lower confidence bound.
    """
    if config.particles < 1:
        raise ValueError("Monte-Carlo checker needs at least one particle")
    if config.initial_points is not None:
        x_init, v_init = config.initial_points
    else:
        pts, _ = _tensor_positions(config)
        nodes = _velocity_nodes(config)
        x_init = np.tile(pts, (len(nodes), 1))
        v_init = np.repeat(nodes, len(pts), axis=0)

    n = config.particles
    dt_chunk = config.T / 16.0
    kwargs = dict(domain=config.domain, alpha=boundary)
    if collision is not None:
        kwargs.update(sigma=collision.sigma, sigma_max=collision.sigma_max,
                      scatter_rate=collision.rate, jump=collision.jump)

    means = np.zeros(len(x_init))
    errs = np.zeros(len(x_init))
    for i in range(len(x_init)):
        rng = make_rng(config.seed, stream=i + 1)
        state = McState(x=np.tile(x_init[i], (n, 1)),
                        v=np.tile(v_init[i], (n, 1)),
                        t=0.0, since_scatter=np.zeros(n))
        record = {"segments": []}
        final = monte_carlo_run(state, config.T, dt_chunk, rng,
                                record=record, **kwargs)
        if not np.all(np.isfinite(final.x)):
            raise NumericalCheckError(
                "divergent trajectory in Monte-Carlo occupation run")
        occ = np.zeros(n)
        for idx, xs, vs, ts in record["segments"]:
            np.add.at(occ, idx, _segment_occupation(config, xs, vs, ts))
        means[i] = occ.mean()
        errs[i] = occ.std(ddof=1) / math.sqrt(n) if n > 1 else 0.0

    c_min, c_mean, imin, flagged = _finite_stats(means)
    half = _Z99 * errs[imin]
    return GccReport(
        mode="full", c_min=c_min, c_mean=c_mean,
        argmin_x=x_init[imin].copy(), argmin_v=v_init[imin].copy(),
        sample_count=len(means), half_width=half, threshold=config.threshold,
        passed=(c_min - half >= config.threshold and len(flagged) == 0),
        x0=x_init, v0=v_init, integrals=means, stderr=errs, flagged=flagged)


# ---------------------------------------------------------------------------
# normalized trajectory weight


@dataclasses.dataclass
class PsiWeight:
    """Sampled normalized weight with its denominator field.

    ``slices[k]`` holds psi(times[k], x, v) on the tensor grid indexed
    (velocity node, space...); ``denominator`` is the time-averaged
    occupation field at t = 0 (it is conserved along trajectories, so
    later slices are its pullbacks).  ``value`` evaluates psi anywhere by
    running the denominator quadrature from the backward-shifted point.
    """

    config: ControlConfig
    flow: TorusFlow
    times: np.ndarray
    slices: np.ndarray
    denominator: np.ndarray
    floor: float
    grid_axes: Tuple[np.ndarray, ...]
    vnodes: np.ndarray
    quad_steps: int

    @property
    def max_value(self) -> float:
        return float(np.max(self.slices))

    @property
    def min_denominator(self) -> float:
        return float(np.min(self.denominator))

    def value(self, t, x, v) -> np.ndarray:
        """psi(t, x, v) for batched points, by direct quadrature."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        v = np.atleast_2d(np.asarray(v, dtype=float))
        start = self.flow.advance(x, v, -np.asarray(t, dtype=float))
        mean = _trajectory_mean(self.config, start, v, self.quad_steps)
        den = mean * _w_values(self.config, v)
        num = _chi_w(self.config, x) * _w_values(self.config, v)
        out = np.zeros(len(num))
        pos = num > 0
        out[pos] = num[pos] / den[pos]
        return out

    def to_npz(self, path) -> None:
        np.savez(path, times=self.times, slices=self.slices,
                 denominator=self.denominator, floor=self.floor,
                 vnodes=self.vnodes,
                 **{"axis_%d" % i: a for i, a in enumerate(self.grid_axes)})


def build_psi(config: ControlConfig, flow: Optional[TorusFlow] = None,
              n_slices: int = 9) -> PsiWeight:
    """Construct the normalized weight chi w / D on a slice-time grid.

    D(t, z) is evaluated as the forward occupation average started from
    the backward-shifted point, on every slice time and grid node.  If it
    falls below the configured floor anywhere the construction is refused
    with a witness point, since the weight would be unbounded there.
    """
    if flow is None:
        flow = TorusFlow(config.domain)
    if config.potential is not None:
        raise ValueError("weight construction handles free periodic flow only")
    pts, axes = _tensor_positions(config)
    nodes = _velocity_nodes(config)
    steps = config.quad_steps()
    floor = config.floor_value()
    times = np.linspace(0.0, config.T, n_slices)

    space_shape = config.grid_shape
    slices = np.zeros((n_slices, len(nodes)) + space_shape)
    den0 = np.zeros((len(nodes),) + space_shape)
    for k, tk in enumerate(times):
        for m, node in enumerate(nodes):
            start = flow.advance(pts, node, -tk) if tk else pts
            mean = _trajectory_mean(config, start, node, steps)
            den = mean * _w_values(config, node[None, :])[0]
            if np.min(den) < floor:
                j = int(np.argmin(den))
                raise NumericalCheckError(
                    "occupation average %.6g below floor %.6g at "
                    "t=%.6g, x=%s, v=%s; the normalized weight is refused"
                    % (den[j], floor, tk,
                       np.array2string(pts[j]), np.array2string(node)))
            num = _chi_w(config, pts) * _w_values(config, node[None, :])[0]
            psi = np.where(num > 0, num / np.where(den > 0, den, 1.0), 0.0)
            slices[k, m] = psi.reshape(space_shape)
            if k == 0:
                den0[m] = den.reshape(space_shape)
    return PsiWeight(config=config, flow=flow, times=times, slices=slices,
                     denominator=den0, floor=floor, grid_axes=axes,
                     vnodes=nodes, quad_steps=steps)


def psi_normalization_check(psi: PsiWeight, flow: Optional[TorusFlow] = None,
                            samples=200, dt: Optional[float] = None,
                            seed: int = 0, fine_steps: int = 16384) -> float:
    """Max deviation of the trajectory time-average of psi from one.

    For each sampled (x, v) the outer integral (1/T) int psi(t, Phi_t z) dt
    uses the left endpoint rule with step ``dt`` so the error scales
    linearly in the step and a refinement study is meaningful.  Along the
    trajectory the denominator is the conserved occupation average of the
    start point, evaluated once per sample with a fine trapezoid rule
    (``fine_steps``); the conservation identity behind this shortcut has
    its own unit test.
    """
    if flow is None:
        flow = psi.flow
    config = psi.config
    T = config.T
    n_t = max(1, int(round(T / (dt if dt is not None else T / 2048.0))))

    if isinstance(samples, int):
        dim = config.domain.dim
        u = qmc.Halton(dim + 1, scramble=True, seed=seed).random(samples)
        if isinstance(config.domain, Torus1D):
            lengths = np.array([config.domain.length])
        else:
            lengths = np.asarray(config.domain.lengths, dtype=float)
        x0 = u[:, :dim] * lengths
        if isinstance(config.velocities, CircleVelocities):
            theta = 2.0 * np.pi * u[:, dim]
            v0 = np.column_stack([np.cos(theta), np.sin(theta)])
        else:
            nodes = _velocity_nodes(config)
            v0 = nodes[(u[:, dim] * len(nodes)).astype(int) % len(nodes)]
    else:
        x0 = np.atleast_2d(np.asarray(samples[0], dtype=float))
        v0 = np.atleast_2d(np.asarray(samples[1], dtype=float))

    base = T * _trajectory_mean(config, x0, v0, fine_steps) \
        * _w_values(config, v0)
    low = base < psi.floor * T
    if np.any(low):
        j = int(np.argmax(low))
        raise NumericalCheckError(
            "sampled trajectory at x=%s, v=%s has occupation %.6g below "
            "the certified floor" % (np.array2string(x0[j]),
                                     np.array2string(v0[j]), base[j]))

    w_vals = _w_values(config, v0)
    sums = np.zeros(len(x0))
    step = T / n_t
    for j0 in range(0, n_t, _TIME_CHUNK):
        j1 = min(j0 + _TIME_CHUNK, n_t)
        t = np.arange(j0, j1) * step
        pos = x0[:, None, :] + t[None, :, None] * v0[:, None, :]
        sums += np.sum(_chi_w(config, pos), axis=1)
    averages = (sums / n_t) * w_vals * T / base
    return float(np.max(np.abs(averages - 1.0)))


# ---------------------------------------------------------------------------
# preset geometries


def cross_on_torus_config(n_space: int = 64, n_angles: int = 64, T: float = 4.0,
                          half_width: float = 1.0 / 6.0,
                          margin: float = 1.0 / 24.0, refine: int = 256,
                          particles: int = 10000, seed: int = 0) -> ControlConfig:
    """Unit torus, unit-speed directions, weight on a cross of two bands.

    The control region is the union of the vertical and horizontal bands
    of the middle third (centers 1/2, half-width 1/6); every straight
    line on the torus crosses it, so the occupation check passes.
    """
    domain = Torus2D((1.0, 1.0))
    band_v = BandWeight(axis=0, center=0.5, half_width=half_width, margin=margin)
    band_h = BandWeight(axis=1, center=0.5, half_width=half_width, margin=margin)

    def region(x):
        r1 = np.mod(x[..., 0] - 0.5, 1.0)
        r2 = np.mod(x[..., 1] - 0.5, 1.0)
        d1 = np.minimum(r1, 1.0 - r1)
        d2 = np.minimum(r2, 1.0 - r2)
        return (d1 <= half_width + 1e-12) | (d2 <= half_width + 1e-12)

    return ControlConfig(domain=domain, velocities=CircleVelocities(n_angles),
                         chi=CrossWeight(band_v, band_h), T=T,
                         grid_shape=(n_space, n_space), refine=refine,
                         particles=particles, support_region=region, seed=seed)


def strip_on_torus_config(n_space: int = 64, n_angles: int = 64, T: float = 4.0,
                          half_width: float = 1.0 / 6.0,
                          margin: float = 1.0 / 24.0, refine: int = 256,
                          particles: int = 10000, seed: int = 0) -> ControlConfig:
    """Unit torus with the horizontal middle-third band only.

    Horizontal lines outside the band never meet the region, so the
    occupation check fails with an exactly zero witness.
    """
    domain = Torus2D((1.0, 1.0))
    band_h = BandWeight(axis=1, center=0.5, half_width=half_width, margin=margin)

    def region(x):
        r2 = np.mod(x[..., 1] - 0.5, 1.0)
        d2 = np.minimum(r2, 1.0 - r2)
        return d2 <= half_width + 1e-12

    return ControlConfig(domain=domain, velocities=CircleVelocities(n_angles),
                         chi=band_h, T=T, grid_shape=(n_space, n_space),
                         refine=refine, particles=particles,
                         support_region=region, seed=seed)


def disc_ball_config(particles: int = 10000, T: float = 20.0,
                     radius: float = 1.0, ball_radius: float = 0.5,
                     threshold: float = 1e-3, seed: int = 0) -> ControlConfig:
    """Unit disc with an inner-ball region and one off-ball chord start.

    The initial condition sits on a chord at distance 0.75 from the
    center moving tangentially, so under specular walls the conserved
    angular momentum keeps it off the ball forever, while diffusive
    walls randomize it into the ball.  The default pass level sits just
    above zero, so only a strictly positive estimate counts.
    """
    domain = Disc2D(radius)
    chi = BallIndicator(ball_radius)

    def region(x):
        return np.sum(x * x, axis=-1) <= ball_radius ** 2 + 1e-12

    x0 = np.array([[0.75, 0.0]])
    v0 = np.array([[0.0, 1.0]])
    return ControlConfig(domain=domain, velocities=None, chi=chi, T=T,
                         particles=particles, threshold=threshold,
                         support_region=region, initial_points=(x0, v0),
                         seed=seed)


def disc_ball_collision(ball_radius: float = 0.5, rate: float = 1.0) -> CollisionLaw:
    """Scattering active exactly on the inner ball, unit rate inside."""
    return CollisionLaw(sigma=BallIndicator(ball_radius), sigma_max=1.0,
                        rate=rate, jump="maxwellian")
