# src/state_models.py
"""
State grids, one-step transition kernels and the discretizers of the
reference processes (piecewise deterministic jump process, reflected diffusion).

Coarser dyadic levels are always obtained by squaring the finest kernel, so every
level of a ladder describes the same process on nested time grids. A kernel keeps
the finest one-step law it was squared from (``base_rows``) together with the number
of finest substeps it spans; running rewards are integrated on that finest grid.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import expm
from scipy.spatial.distance import cdist
from scipy.stats import norm

from src.errors import ModelError

logger = logging.getLogger(__name__)

# Accepted row-sum deviation of user rows before renormalization
ROW_SUM_TOL = 1e-9
# Validation tolerance for stored kernels (tilted kernels are only accurate to ~1e-10)
KERNEL_TOL = 1e-9
METRIC_TOL = 1e-12

_EXHAUSTIVE_TRIANGLE_LIMIT = 128
_TRIANGLE_SAMPLES = 200_000
_QUADRATURE_NODES = 4001
_QUADRATURE_HALF_WIDTH = 10.0
# a boundary state folds half its mass by itself
MAX_FOLDED_MASS = 0.5 + 1e-6

FlowMap = Callable[[np.ndarray, float], np.ndarray]
ShiftMap = Callable[[np.ndarray], np.ndarray]


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=float, copy=True)
    arr.setflags(write=False)
    return arr


def _check_triangle(metric: np.ndarray) -> None:
    n = metric.shape[0]
    tol = METRIC_TOL * max(1.0, float(metric.max()))
    if n <= _EXHAUSTIVE_TRIANGLE_LIMIT:
        # excess[x, z, y] = d(x,y) - d(x,z) - d(z,y)
        excess = metric[:, None, :] - metric[:, :, None] - metric[None, :, :]
        worst = np.unravel_index(int(np.argmax(excess)), excess.shape)
        if excess[worst] > tol:
            x, z, y = (int(i) for i in worst)
            raise ModelError(f"metric violates the triangle inequality at (x={x}, z={z}, y={y})")
        return
    rng = np.random.default_rng(0)
    x, y, z = rng.integers(0, n, size=(3, _TRIANGLE_SAMPLES))
    excess = metric[x, y] - metric[x, z] - metric[z, y]
    k = int(np.argmax(excess))
    if excess[k] > tol:
        raise ModelError(
            f"metric violates the triangle inequality at (x={x[k]}, z={z[k]}, y={y[k]})"
        )


@dataclass(frozen=True, eq=False)
class StateGrid:
    """Finite state space with coordinates, metric, impulse set U and reference state."""

    points: np.ndarray
    metric: np.ndarray
    impulse_indices: Tuple[int, ...]
    reference_index: int = 0

    def __post_init__(self) -> None:
        points = np.array(self.points, dtype=float)
        if points.ndim == 1:
            points = points[:, None]
        if points.ndim != 2 or points.shape[0] == 0:
            raise ModelError(f"grid points must be a non-empty (n, d) array, got shape {points.shape}")
        n = points.shape[0]

        metric = np.array(self.metric, dtype=float)
        if metric.shape != (n, n):
            raise ModelError(f"metric must have shape ({n}, {n}), got {metric.shape}")
        if not np.all(np.isfinite(metric)) or np.any(metric < 0):
            raise ModelError("metric entries must be finite and nonnegative")
        if np.max(np.abs(metric - metric.T)) > METRIC_TOL:
            raise ModelError("metric is not symmetric")
        if np.any(np.diag(metric) != 0):
            raise ModelError("metric must vanish on the diagonal")
        _check_triangle(metric)

        impulse = tuple(sorted({int(i) for i in self.impulse_indices}))
        if not impulse:
            raise ModelError("impulse set U must be nonempty")
        if impulse[0] < 0 or impulse[-1] >= n:
            raise ModelError(f"impulse indices {impulse} out of range for {n} states")
        ref = int(self.reference_index)
        if not 0 <= ref < n:
            raise ModelError(f"reference index {ref} out of range for {n} states")

        object.__setattr__(self, "points", _readonly(points))
        object.__setattr__(self, "metric", _readonly(metric))
        object.__setattr__(self, "impulse_indices", impulse)
        object.__setattr__(self, "reference_index", ref)

    @classmethod
    def from_points(
        cls,
        points: Sequence,
        impulse_indices: Optional[Sequence[int]] = None,
        reference_index: int = 0,
    ) -> "StateGrid":
        """Euclidean metric on the given coordinates; U defaults to every state."""
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        metric = cdist(pts, pts)
        if impulse_indices is None:
            impulse_indices = range(pts.shape[0])
        return cls(pts, metric, tuple(impulse_indices), reference_index)

    @classmethod
    def uniform(
        cls,
        lower: float,
        upper: float,
        size: int,
        impulse_indices: Optional[Sequence[int]] = None,
        reference_index: Optional[int] = None,
    ) -> "StateGrid":
        """Equally spaced one-dimensional grid; x̄ defaults to the midpoint state."""
        if size < 2 or not upper > lower:
            raise ModelError(f"uniform grid needs size >= 2 and upper > lower, got {size}, [{lower}, {upper}]")
        if reference_index is None:
            reference_index = size // 2
        return cls.from_points(np.linspace(lower, upper, size), impulse_indices, reference_index)

    @classmethod
    def abstract(
        cls,
        n_states: int,
        impulse_indices: Optional[Sequence[int]] = None,
        reference_index: int = 0,
        spacing: float = 1.0,
    ) -> "StateGrid":
        """States placed on a line at the given spacing (metric |i - j| * spacing)."""
        return cls.from_points(spacing * np.arange(n_states, dtype=float), impulse_indices, reference_index)

    @property
    def size(self) -> int:
        return int(self.points.shape[0])

    @property
    def coordinates(self) -> np.ndarray:
        """One-dimensional coordinates; only defined for 1-D grids."""
        if self.points.shape[1] != 1:
            raise ModelError("grid is not one-dimensional")
        return self.points[:, 0]

    @property
    def impulse_mask(self) -> np.ndarray:
        mask = np.zeros(self.size, dtype=bool)
        mask[list(self.impulse_indices)] = True
        return mask


@dataclass(frozen=True, eq=False)
class StepKernel:
    """Row-stochastic one-step law at step ``delta``.

    ``base_rows`` is the finest one-step law of the ladder this kernel belongs to and
    ``substeps`` the number of finest steps one step of this kernel spans, so that
    ``rows == base_rows ** substeps`` (matrix power).
    """

    rows: np.ndarray
    delta: float
    level: Optional[int] = None
    base_rows: Optional[np.ndarray] = None
    substeps: int = 1
    diagnostics: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        rows = np.array(self.rows, dtype=float)
        if rows.ndim != 2 or rows.shape[0] != rows.shape[1] or rows.shape[0] == 0:
            raise ModelError(f"kernel rows must form a square matrix, got shape {rows.shape}")
        if not np.all(np.isfinite(rows)) or np.any(rows < 0):
            raise ModelError("kernel rows must be finite and nonnegative")
        deviation = np.max(np.abs(rows.sum(axis=1) - 1.0))
        if deviation > KERNEL_TOL:
            raise ModelError(f"kernel rows do not sum to 1 (max deviation {deviation:.3e})")
        if not self.delta > 0:
            raise ModelError(f"time step must be positive, got {self.delta}")
        if int(self.substeps) < 1:
            raise ModelError(f"substeps must be >= 1, got {self.substeps}")
        if self.level is not None:
            level = int(self.level)
            if level < 0 or abs(self.delta - 2.0 ** (-level)) > 1e-12 * self.delta:
                raise ModelError(f"dyadic level {level} inconsistent with delta={self.delta}")
            object.__setattr__(self, "level", level)

        base = rows if self.base_rows is None else np.array(self.base_rows, dtype=float)
        if base.shape != rows.shape:
            raise ModelError("base_rows must have the same shape as rows")

        object.__setattr__(self, "rows", _readonly(rows))
        object.__setattr__(self, "base_rows", _readonly(base))
        object.__setattr__(self, "delta", float(self.delta))
        object.__setattr__(self, "substeps", int(self.substeps))
        object.__setattr__(self, "diagnostics", dict(self.diagnostics))

    @property
    def n_states(self) -> int:
        return int(self.rows.shape[0])

    @property
    def base_delta(self) -> float:
        return self.delta / self.substeps

    @property
    def is_dyadic(self) -> bool:
        return self.level is not None


@dataclass(frozen=True, eq=False)
class MinorizationReport:
    a: float
    nu: np.ndarray
    nu_on_U: float
    u_charged: bool
    row_bounds: Tuple[float, float]


def _normalized_rows(rows: np.ndarray, n_states: int) -> np.ndarray:
    arr = np.asarray(rows, dtype=float)
    if arr.shape != (n_states, n_states):
        raise ModelError(f"rows must have shape ({n_states}, {n_states}), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ModelError("rows contain non-finite entries")
    if np.any(arr < 0):
        x, y = np.argwhere(arr < 0)[0]
        raise ModelError(f"negative transition probability at ({x}, {y})")
    sums = arr.sum(axis=1)
    if np.any(sums == 0):
        raise ModelError(f"degenerate all-zero row at state {int(np.argmin(sums))}")
    bad = np.abs(sums - 1.0) > ROW_SUM_TOL
    if np.any(bad):
        x = int(np.argmax(bad))
        raise ModelError(f"row {x} sums to {sums[x]:.12g}, outside 1 +/- {ROW_SUM_TOL:g}")
    return arr / sums[:, None]


def build_finite_chain(
    rows,
    grid: StateGrid,
    delta: float,
    level: Optional[int] = None,
    diagnostics: Optional[Dict[str, float]] = None,
) -> StepKernel:
    """Validate user rows against the grid and renormalize them.

    Raises:
        ModelError: dimension mismatch, negative entry, zero row or a row sum off by
            more than ROW_SUM_TOL.
    """
    normalized = _normalized_rows(rows, grid.size)
    return StepKernel(normalized, float(delta), level, diagnostics=diagnostics or {})


def build_from_generator(generator, grid: StateGrid, level: int) -> StepKernel:
    """Finest kernel exp(G * 2^-level) of a continuous-time chain with rate matrix G."""
    G = np.asarray(generator, dtype=float)
    n = grid.size
    if G.shape != (n, n):
        raise ModelError(f"generator must have shape ({n}, {n}), got {G.shape}")
    off_diagonal = G - np.diag(np.diag(G))
    if np.any(off_diagonal < 0):
        raise ModelError("generator has a negative off-diagonal rate")
    scale = max(1.0, float(np.max(np.abs(G))))
    if np.max(np.abs(G.sum(axis=1))) > 1e-9 * scale:
        raise ModelError("generator rows must sum to zero")
    delta = 2.0 ** (-int(level))
    P = np.clip(expm(G * delta), 0.0, None)
    return build_finite_chain(P / P.sum(axis=1, keepdims=True), grid, delta, level)


def square_kernel(k: StepKernel) -> StepKernel:
    """Two-step composition: delta doubles and the dyadic level drops by one."""
    rows = k.rows @ k.rows
    rows = rows / rows.sum(axis=1, keepdims=True)
    if k.level is None:
        level = None
    elif k.level == 0:
        logger.warning("Squaring a level-0 kernel; result is flagged non-dyadic")
        level = None
    else:
        level = k.level - 1
    return StepKernel(rows, 2.0 * k.delta, level, base_rows=k.base_rows, substeps=2 * k.substeps)


def dyadic_ladder(finest: StepKernel, m_min: int = 0) -> Dict[int, StepKernel]:
    """Kernels for levels m_min..finest.level obtained by repeated squaring."""
    if finest.level is None:
        raise ModelError("the finest kernel of a ladder must carry a dyadic level")
    if not 0 <= m_min <= finest.level:
        raise ModelError(f"m_min={m_min} outside [0, {finest.level}]")
    ladder = {finest.level: finest}
    current = finest
    for m in range(finest.level - 1, m_min - 1, -1):
        current = square_kernel(current)
        ladder[m] = current
    return ladder


def cell_edges(coords: np.ndarray) -> np.ndarray:
    """Snapping cells of a sorted 1-D grid: midpoints inside, half-spacing outside."""
    coords = np.asarray(coords, dtype=float)
    if coords.size < 2 or np.any(np.diff(coords) <= 0):
        raise ModelError("discretizers need a strictly increasing grid with at least 2 points")
    mids = 0.5 * (coords[:-1] + coords[1:])
    lower = coords[0] - 0.5 * (coords[1] - coords[0])
    upper = coords[-1] + 0.5 * (coords[-1] - coords[-2])
    return np.concatenate(([lower], mids, [upper]))


def snap_to_grid(values, coords: np.ndarray) -> np.ndarray:
    """Nearest grid index; ties go to the smaller index, off-hull values clamp."""
    coords = np.asarray(coords, dtype=float)
    mids = 0.5 * (coords[:-1] + coords[1:])
    return np.searchsorted(mids, np.asarray(values, dtype=float), side="left")


def discretize_pdp(
    flow: FlowMap,
    jump_rate: float,
    shift_map: ShiftMap,
    noise_std: float,
    grid: StateGrid,
    delta: float,
    level: Optional[int] = None,
    post_jump_flow: bool = True,
) -> StepKernel:
    """One-step kernel of a piecewise deterministic process with Poisson jumps.

    Between jumps the state follows ``flow(x, t)``; at rate ``jump_rate`` it jumps to
    ``shift_map(x-) + noise_std * N(0, 1)``. Both callables must accept numpy arrays.
    One jump per step at most, placed at the midpoint delta/2. With ``post_jump_flow``
    the post-jump Gaussian is carried by the flow for the remaining half step; the flow
    must then be order-preserving in x, which holds for any 1-D autonomous flow.
    """
    if not jump_rate > 0:
        raise ModelError(f"jump rate must be positive, got {jump_rate}")
    if not noise_std > 0:
        raise ModelError(f"jump noise standard deviation must be positive, got {noise_std}")
    coords = grid.coordinates
    edges = cell_edges(coords)
    n = grid.size
    p_stay = float(np.exp(-jump_rate * delta))
    half = 0.5 * delta

    rows = np.zeros((n, n))
    hull_exits = 0
    for i, x in enumerate(coords):
        end = float(np.asarray(flow(np.array([x]), delta), dtype=float)[0])
        if end < edges[0] or end > edges[-1]:
            hull_exits += 1
        rows[i, int(snap_to_grid(end, coords))] += p_stay

        pre_jump = np.asarray(flow(np.array([x]), half), dtype=float)
        center = float(np.asarray(shift_map(pre_jump), dtype=float)[0])
        nodes = np.linspace(
            center - _QUADRATURE_HALF_WIDTH * noise_std,
            center + _QUADRATURE_HALF_WIDTH * noise_std,
            _QUADRATURE_NODES,
        )
        image = np.asarray(flow(nodes, half), dtype=float) if post_jump_flow else nodes
        if np.any(np.diff(image) <= 0):
            raise ModelError("flow map is not order-preserving on the jump support")
        # pre-images of the cell edges under the post-jump flow
        pre_edges = np.interp(edges, image, nodes)
        masses = np.diff(norm.cdf(pre_edges, loc=center, scale=noise_std))
        inside = masses.sum()
        if inside <= 0:
            raise ModelError(f"jump law from state {i} puts no mass on the grid")
        rows[i] += (1.0 - p_stay) * masses / inside

    if hull_exits:
        logger.warning(
            "Deterministic flow left the grid hull from %d state(s); mass assigned to the boundary",
            hull_exits,
        )
    return build_finite_chain(rows, grid, delta, level, diagnostics={"hull_exits": float(hull_exits)})


def discretize_reflected_diffusion(
    diffusion: Callable[[float], float],
    domain: Tuple[float, float],
    grid: StateGrid,
    delta: float,
    level: Optional[int] = None,
    ellipticity_floor: float = 1e-12,
) -> StepKernel:
    """Gaussian increment with variance A(x)*delta, folded once at each boundary.

    Raises:
        ModelError: when more than half of a row's mass had to be folded back.
    """
    lower, upper = float(domain[0]), float(domain[1])
    if not upper > lower:
        raise ModelError(f"domain must satisfy l < u, got [{lower}, {upper}]")
    if not ellipticity_floor > 0:
        raise ModelError("ellipticity floor must be positive")
    coords = grid.coordinates
    if coords[0] < lower or coords[-1] > upper:
        raise ModelError("grid points must lie inside the domain")
    edges = cell_edges(coords)
    edges[0], edges[-1] = lower, upper
    n = grid.size

    rows = np.zeros((n, n))
    worst_fold = 0.0
    for i, x in enumerate(coords):
        scale = float(np.sqrt(max(float(diffusion(x)), ellipticity_floor) * delta))
        direct = np.diff(norm.cdf((edges - x) / scale))
        lower_image = norm.cdf((2 * lower - edges[:-1] - x) / scale) - norm.cdf(
            (2 * lower - edges[1:] - x) / scale
        )
        upper_image = norm.cdf((2 * upper - edges[:-1] - x) / scale) - norm.cdf(
            (2 * upper - edges[1:] - x) / scale
        )
        folded = float(norm.cdf((lower - x) / scale) + norm.sf((upper - x) / scale))
        if folded > MAX_FOLDED_MASS:
            raise ModelError(
                f"step delta={delta} folds {folded:.1%} of the mass from state {i}; grid/step mismatch"
            )
        worst_fold = max(worst_fold, folded)
        row = direct + lower_image + upper_image
        rows[i] = row / row.sum()

    return build_finite_chain(rows, grid, delta, level, diagnostics={"max_folded_mass": worst_fold})


def minorization_constant(k: StepKernel) -> float:
    """a = sum over y of min over x of P(x, y)."""
    return min(float(k.rows.min(axis=0).sum()), 1.0)


def check_minorization(k: StepKernel, grid: StateGrid) -> MinorizationReport:
    """Column-min minorization P(x, .) >= a * nu(.) with nu_on_U and density bounds."""
    if grid.size != k.n_states:
        raise ModelError("grid and kernel sizes differ")
    column_min = k.rows.min(axis=0)
    a = float(column_min.sum())
    if a > 0:
        nu = column_min / a
    else:
        nu = np.full(k.n_states, 1.0 / k.n_states)
    nu_on_U = float(nu[list(grid.impulse_indices)].sum())
    support = nu > 0
    ratios = k.rows[:, support] / nu[support]
    row_bounds = (float(ratios.min()), float(ratios.max()))
    if a == 0:
        logger.info("Kernel has no global minorization (a = 0)")
    if a > 0 and nu_on_U == 0:
        logger.warning("Minorizing measure puts no mass on the impulse set U")
    return MinorizationReport(
        a=min(a, 1.0),
        nu=_readonly(nu),
        nu_on_U=nu_on_U,
        u_charged=bool(a > 0 and nu_on_U > 0),
        row_bounds=row_bounds,
    )


def cumulative_rows(rows: np.ndarray) -> np.ndarray:
    cum = np.cumsum(rows, axis=1)
    cum[:, -1] = 1.0
    return cum


def sample_step(
    k: StepKernel, state_index: int, rng: np.random.Generator, cumulative: Optional[np.ndarray] = None
) -> int:
    """Draw the next state index from row ``state_index`` by inverse transform.

    ``cumulative`` replaces the rows of ``k`` (e.g. ``cumulative_rows(k.base_rows)``).
    """
    if not 0 <= int(state_index) < k.n_states:
        raise ModelError(f"state index {state_index} out of range for {k.n_states} states")
    cum = cumulative_rows(k.rows)[int(state_index)] if cumulative is None else cumulative[int(state_index)]
    return int(np.searchsorted(cum, rng.random(), side="right"))


def sample_steps(
    k: StepKernel, states: np.ndarray, rng: np.random.Generator, rows: Optional[np.ndarray] = None
) -> np.ndarray:
    """Vectorized sample_step for many current states (same inverse-transform rule)."""
    states = np.asarray(states, dtype=np.int64)
    if states.size and (states.min() < 0 or states.max() >= k.n_states):
        raise ModelError("state index out of range")
    cum = cumulative_rows(k.rows if rows is None else rows)
    return draw_indices(cum, states, rng.random(states.shape[0]))


def draw_indices(cumulative: np.ndarray, states: np.ndarray, uniforms: np.ndarray) -> np.ndarray:
    """Inverse-transform draw per row: number of cumulative entries <= u."""
    return (uniforms[:, None] >= cumulative[states]).sum(axis=1)


__all__ = [
    "StateGrid",
    "StepKernel",
    "MinorizationReport",
    "build_finite_chain",
    "build_from_generator",
    "square_kernel",
    "dyadic_ladder",
    "cell_edges",
    "snap_to_grid",
    "discretize_pdp",
    "discretize_reflected_diffusion",
    "minorization_constant",
    "check_minorization",
    "cumulative_rows",
    "sample_step",
    "sample_steps",
    "draw_indices",
]
