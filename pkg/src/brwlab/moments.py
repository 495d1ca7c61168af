"""Truncated-lattice moment hierarchy: generators, solvers, and bound checks.

The factorial moments m_l(t, x, y0) of the subpopulation count at y0 obey a
lower-triangular hierarchy

    dm_1/dt = H m_1,
    dm_l/dt = H m_l + 2 beta(x) sum_{i=1}^{l-1} binom(l-1, i) m_i m_{l-i},

with H = L_a + V(x), V = beta - mu, m_1(0) = delta_{y0}, m_l(0) = 0 for
l >= 2.  The hierarchy is integrated on a finite box with classic RK4; the
quadratic source couples only downwards, so all orders march together.

The probability generating function phi_z(t, x, y0) solves the KPP equation
and provides an independent oracle: its z-derivatives at z = 1 reproduce the
factorial moments.  It is integrated in the deviation variable u = phi - 1,
which satisfies du/dt = H u + beta u^2 and vanishes far from y0, making the
absorbing box truncation accurate.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse

from .errors import RangeViolation, SourceOutsideBox, TruncationWarning, UnstableStep
from .kernels import JumpKernel
from .spectral import PerturbationField

_NEG_TOL = 1e-9
_BOUNDARY_LEAK_TOL = 1e-4


@dataclass(frozen=True)
class LatticeBox:
    """Finite cube {|x_j| <= R} of Z^d with lexicographic site indexing."""

    dimension: int
    radius: int
    boundary: str = "absorbing"

    def __post_init__(self):
        if self.radius < 1:
            raise ValueError("radius must be >= 1")
        if self.boundary not in ("absorbing", "periodic"):
            raise ValueError("boundary must be 'absorbing' or 'periodic'")

    @property
    def side(self) -> int:
        return 2 * self.radius + 1

    @property
    def n_sites(self) -> int:
        return self.side ** self.dimension

    def index(self, x) -> int:
        idx = 0
        for c in x:
            if abs(c) > self.radius:
                raise SourceOutsideBox(f"site {tuple(x)} outside box of radius {self.radius}")
            idx = idx * self.side + (int(c) + self.radius)
        return idx

    def coordinates(self) -> np.ndarray:
        coords = np.indices((self.side,) * self.dimension)
        return coords.reshape(self.dimension, -1).T - self.radius

    @property
    def origin_index(self) -> int:
        return self.index((0,) * self.dimension)

    def boundary_mask(self) -> np.ndarray:
        coords = self.coordinates()
        return np.max(np.abs(coords), axis=1) == self.radius


def potential_vector(box: LatticeBox, field: PerturbationField) -> np.ndarray:
    """V(x) = sum_i sigma_i delta_{x_i}(x) on the box sites."""
    v = np.zeros(box.n_sites)
    for site, strength in field.sources:
        v[box.index(site)] += strength
    return v


def branching_rate_vector(box: LatticeBox, field: PerturbationField) -> np.ndarray:
    """beta(x) = mu + sum_i sigma_i delta_{x_i}(x) on the box sites."""
    return field.mu + potential_vector(box, field)


def build_generator(kernel: JumpKernel, box: LatticeBox,
                    field: PerturbationField | None = None) -> scipy.sparse.csr_matrix:
    """Sparse H = L_a + V on the box.

    Off-diagonals are the jump rates a(z) routed per boundary mode; the
    diagonal is -1 + V(x) (total jump rate 1).  The -1 is assembled as minus
    the realized off-diagonal row sum minus the boundary leak, so periodic
    row sums vanish exactly and absorbing row sums equal minus the leak
    exactly, both at machine precision.
    """
    if kernel.dimension != box.dimension:
        raise ValueError("kernel and box dimensions differ")
    d = box.dimension
    n = box.side
    size = box.n_sites
    coords = box.coordinates()
    strides = np.array([n ** (d - 1 - j) for j in range(d)], dtype=np.int64)
    rows, cols, vals = [], [], []
    leak = np.zeros(size)
    for z, a in zip(kernel.vectors, kernel.rates):
        tgt = coords + z
        if box.boundary == "periodic":
            wrapped = np.mod(tgt + box.radius, n) - box.radius
            src_idx = np.arange(size)
            tgt_idx = (wrapped + box.radius) @ strides
        else:
            inside = np.all(np.abs(tgt) <= box.radius, axis=1)
            src_idx = np.nonzero(inside)[0]
            tgt_idx = (tgt[inside] + box.radius) @ strides
            leak[~inside] += a
        rows.append(src_idx)
        cols.append(tgt_idx)
        vals.append(np.full(src_idx.size, a))
    off = scipy.sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(size, size)).tocsr()
    diag = -np.asarray(off.sum(axis=1)).ravel() - leak
    if field is not None:
        diag = diag + potential_vector(box, field)
    return (off + scipy.sparse.diags(diag)).tocsr()


@dataclass(frozen=True)
class MomentTable:
    """m_l(t_j, x, y0) for l = 1..orders on a box, plus solve diagnostics."""

    box: LatticeBox
    y0: tuple[int, ...] | None      # None for the all-ones (field) initial data
    orders: int
    times: np.ndarray               # checkpoint times, strictly increasing
    values: np.ndarray              # [orders, n_times, n_sites], clamped >= 0
    error_estimates: tuple[float, ...] | None = None   # per order, step halving
    boundary_leak: float = 0.0      # max boundary/peak ratio seen at final time

    def order(self, l: int) -> np.ndarray:
        if not 1 <= l <= self.orders:
            raise ValueError(f"order {l} outside 1..{self.orders}")
        return self.values[l - 1]

    def series_at(self, l: int, site) -> np.ndarray:
        return self.order(l)[:, self.box.index(site)]


def _default_dt(field: PerturbationField, top_order: int, running_max: float) -> float:
    sig = field.sigma_total
    return 0.1 / (1.0 + sig + 2.0 * top_order * (field.mu + sig) * running_max)


def _rk4_stack(h: scipy.sparse.csr_matrix, beta: np.ndarray | None, binom: np.ndarray,
               state: np.ndarray, t0: float, t1: float, dt_target: float,
               neg_tol: float) -> np.ndarray:
    """March the hierarchy stack from t0 to t1 with fixed RK4 steps."""
    orders = state.shape[0]

    def rhs(m):
        out = (h @ m.T).T
        for l in range(2, orders + 1):
            src = np.zeros_like(m[0])
            for i in range(1, l):
                src += binom[l - 1, i] * m[i - 1] * m[l - 1 - i]
            out[l - 1] += 2.0 * beta * src
        return out

    span = t1 - t0
    steps = max(1, int(math.ceil(span / dt_target - 1e-12)))
    dt = span / steps
    m = state
    for _ in range(steps):
        k1 = rhs(m)
        k2 = rhs(m + 0.5 * dt * k1)
        k3 = rhs(m + 0.5 * dt * k2)
        k4 = rhs(m + dt * k3)
        m = m + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        low = float(m.min())
        if low < -neg_tol * max(1.0, float(np.abs(m).max())):
            raise UnstableStep(
                f"negative value {low:.3e} during step of size {dt:.3e}")
    return m


def _solve_hierarchy(h, box, field, orders, initial, checkpoints, dt, neg_tol):
    beta = branching_rate_vector(box, field) if orders > 1 else None
    binom = np.zeros((orders, orders))
    for a in range(orders):
        for b in range(a + 1):
            binom[a, b] = math.comb(a, b)
    times = np.asarray(checkpoints, dtype=float)
    if times.ndim != 1 or np.any(np.diff(times) <= 0) or times[0] <= 0:
        raise ValueError("checkpoints must be strictly increasing and positive")
    state = np.zeros((orders, box.n_sites))
    state[0] = initial
    out = np.zeros((orders, len(times), box.n_sites))
    t_prev = 0.0
    for j, t in enumerate(times):
        if dt is None:
            running = float(state[:-1].max()) if orders > 1 else 0.0
            dt_target = _default_dt(field, orders, max(running, 0.0))
        else:
            dt_target = dt
        state = _rk4_stack(h, beta, binom, state, t_prev, t, dt_target, neg_tol)
        out[:, j, :] = np.maximum(state, 0.0)
        t_prev = t
    return times, out


def _leak_ratio(box: LatticeBox, final_first: np.ndarray) -> float:
    peak = float(final_first.max())
    if peak <= 0:
        return 0.0
    return float(final_first[box.boundary_mask()].max()) / peak


def solve_first_moment(h: scipy.sparse.csr_matrix, box: LatticeBox,
                       initial: str | np.ndarray, t_end: float,
                       dt: float | None = None, checkpoints=None,
                       field: PerturbationField | None = None,
                       y0=None, neg_tol: float = _NEG_TOL) -> MomentTable:
    """Time-march dm/dt = H m.

    ``initial`` is "ones" (one particle per site, the field mean), "delta"
    (subpopulation mean, requires ``y0``), or an explicit vector.  With
    V = 0 on a periodic box the all-ones data is an exact fixed point:
    conservation of the critical mean.
    """
    field = field or PerturbationField(mu=0.0)
    if checkpoints is None:
        checkpoints = [t_end]
    if isinstance(initial, str):
        if initial == "ones":
            vec = np.ones(box.n_sites)
        elif initial == "delta":
            if y0 is None:
                y0 = (0,) * box.dimension
            vec = np.zeros(box.n_sites)
            vec[box.index(y0)] = 1.0
        else:
            raise ValueError("initial must be 'ones', 'delta', or a vector")
    else:
        vec = np.asarray(initial, dtype=float)
        if vec.shape != (box.n_sites,):
            raise ValueError("initial vector has wrong length")
    times, values = _solve_hierarchy(h, box, field, 1, vec, checkpoints, dt, neg_tol)
    leak = _leak_ratio(box, values[0, -1])
    if box.boundary == "absorbing" and leak > _BOUNDARY_LEAK_TOL:
        warnings.warn(
            f"boundary/peak ratio {leak:.2e} at t = {times[-1]}; box radius "
            f"{box.radius} may be too small", TruncationWarning, stacklevel=2)
    return MomentTable(box=box, y0=tuple(y0) if y0 is not None else None, orders=1,
                       times=times, values=values, boundary_leak=leak)


def solve_factorial_moments(h: scipy.sparse.csr_matrix, box: LatticeBox,
                            field: PerturbationField, orders: int, y0,
                            t_end: float, dt: float | None = None,
                            checkpoints=None, error_estimate: bool = True,
                            neg_tol: float = _NEG_TOL) -> MomentTable:
    """Solve the hierarchy up to ``orders`` with zero data above first order.

    All orders march jointly (the source of order l reads the current lower
    orders, which is the Duhamel coupling realized step by step).  When
    ``error_estimate`` is set, the solve is repeated at half the step and
    the relative per-order deviation at the final time is recorded.
    """
    if orders < 2:
        raise ValueError("orders must be >= 2; use solve_first_moment otherwise")
    y0 = tuple(int(c) for c in y0)
    for site, _ in field.sources:
        box.index(site)  # raises SourceOutsideBox
    if checkpoints is None:
        checkpoints = [t_end]
    vec = np.zeros(box.n_sites)
    vec[box.index(y0)] = 1.0
    times, values = _solve_hierarchy(h, box, field, orders, vec, checkpoints, dt, neg_tol)
    estimates = None
    if error_estimate:
        half_dt = dt / 2.0 if dt is not None else None
        if half_dt is None:
            # halve the automatic step by doubling the stiffness guess
            _, coarse = times, values
            _, fine = _solve_hierarchy(h, box, field, orders, vec, checkpoints,
                                       _default_dt(field, orders, 0.0) / 2.0, neg_tol)
        else:
            fine = _solve_hierarchy(h, box, field, orders, vec, checkpoints,
                                    half_dt, neg_tol)[1]
        estimates = []
        for l in range(orders):
            scale = max(float(np.abs(fine[l, -1]).max()), 1e-300)
            estimates.append(float(np.abs(values[l, -1] - fine[l, -1]).max()) / scale)
        estimates = tuple(estimates)
    leak = _leak_ratio(box, values[0, -1])
    if box.boundary == "absorbing" and leak > _BOUNDARY_LEAK_TOL:
        warnings.warn(
            f"boundary/peak ratio {leak:.2e} at t = {times[-1]}; box radius "
            f"{box.radius} may be too small", TruncationWarning, stacklevel=2)
    return MomentTable(box=box, y0=y0, orders=orders, times=times, values=values,
                       error_estimates=estimates, boundary_leak=leak)


# ---------------------------------------------------------------------------
# Combinatorial bound sequence
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BoundSequence:
    """Integer sequence from the moment-bound induction.

    D_1 = 1 and D_l = sum_{i=1}^{l-1} binom(l-1, i) D_i D_{l-i}; the values
    are the odd double factorials 1, 1, 3, 15, 105, ... and satisfy
    D_l <= 4^l l!.
    """

    values: tuple[int, ...]

    def bound_margins(self) -> tuple[int, ...]:
        """4^l l! - D_l per order; all nonnegative when the bound holds."""
        return tuple(4 ** l * math.factorial(l) - d
                     for l, d in enumerate(self.values, start=1))


def bound_sequence(max_order: int) -> BoundSequence:
    """Exact integers D_1..D_max via the recursion, in arbitrary precision."""
    if max_order < 1:
        raise ValueError("max_order must be >= 1")
    d = [0] * (max_order + 1)
    d[1] = 1
    for l in range(2, max_order + 1):
        d[l] = sum(math.comb(l - 1, i) * d[i] * d[l - i] for i in range(1, l))
    return BoundSequence(tuple(d[1:]))


# ---------------------------------------------------------------------------
# Bound and majorization reports
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BoundCheckReport:
    """Per-order maxima of m_l / (A^{l-1} B^l l! p) over the checked grid."""

    max_ratios: tuple[float, ...]
    argmax: tuple[tuple[float, int], ...]   # (time, site index) per order
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(r <= 1.0 + self.tolerance for r in self.max_ratios)


def moment_bound_check(table: MomentTable, a_const: float, b_const: float,
                       p_values: np.ndarray, tol: float = 1e-3,
                       p_floor: float = 1e-12) -> BoundCheckReport:
    """Check m_l <= A^{l-1} B^l l! p on the table's (t, x) grid.

    ``p_values`` must hold the unperturbed heat kernel p(t_j, x, y0) with
    the same time/site layout as the table.  Sites where p < ``p_floor``
    are skipped (both sides vanish there and the ratio is pure noise).
    """
    if p_values.shape != table.values.shape[1:]:
        raise ValueError("p_values must have shape (n_times, n_sites)")
    mask = p_values >= p_floor
    if not mask.any():
        raise ValueError("p_floor excludes every grid point")
    ratios, argmax = [], []
    for l in range(1, table.orders + 1):
        denom = a_const ** (l - 1) * b_const ** l * math.factorial(l)
        r = np.where(mask, table.order(l) / np.maximum(p_values, p_floor) / denom, 0.0)
        j, s = np.unravel_index(int(np.argmax(r)), r.shape)
        ratios.append(float(r[j, s]))
        argmax.append((float(table.times[j]), int(s)))
    return BoundCheckReport(tuple(ratios), tuple(argmax), tol)


@dataclass(frozen=True)
class MajorizationReport:
    """Whether m_1(t, x, 0) peaks at x = 0 for every checkpoint."""

    ok: bool
    worst_margin: float          # max over t of (max_x m_1 - m_1(0)) / peak
    worst_time: float


def majorization_check(table: MomentTable, tol: float = 1e-12) -> MajorizationReport:
    if table.y0 is None or any(c != 0 for c in table.y0):
        raise ValueError("majorization check requires delta data at the origin")
    origin = table.box.origin_index
    m1 = table.order(1)
    worst, worst_t = -math.inf, float(table.times[0])
    for j, t in enumerate(table.times):
        peak = float(m1[j].max())
        margin = (peak - float(m1[j, origin])) / max(peak, 1e-300)
        if margin > worst:
            worst, worst_t = margin, float(t)
    return MajorizationReport(ok=worst <= tol, worst_margin=worst, worst_time=worst_t)


# ---------------------------------------------------------------------------
# KPP generating function
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GeneratingFunctionResult:
    box: LatticeBox
    y0: tuple[int, ...]
    z: float
    times: np.ndarray
    phi: np.ndarray              # [n_times, n_sites], within [0, 1]


def kpp_generating_function(kernel: JumpKernel, box: LatticeBox,
                            field: PerturbationField, z: float, y0,
                            t_end: float, dt: float | None = None,
                            checkpoints=None,
                            range_tol: float = 1e-9) -> GeneratingFunctionResult:
    """Probability generating function phi_z(t, x, y0) of the count at y0.

    Integrates the deviation u = phi - 1, du/dt = H u + beta u^2 with
    u(0) = (z - 1) delta_{y0}; far from y0 the deviation vanishes, so the
    absorbing truncation of u is the faithful finite-box reduction.  phi = 1
    is an exact fixed point.  Raises ``RangeViolation`` if phi leaves
    [-range_tol, 1 + range_tol].
    """
    if not 0.0 <= z <= 1.0:
        raise ValueError("z must lie in [0, 1]")
    y0 = tuple(int(c) for c in y0)
    if box.boundary != "absorbing":
        raise ValueError("generating function solves use an absorbing box")
    if checkpoints is None:
        checkpoints = [t_end]
    times = np.asarray(checkpoints, dtype=float)
    if times.ndim != 1 or np.any(np.diff(times) <= 0) or times[0] <= 0:
        raise ValueError("checkpoints must be strictly increasing and positive")
    h = build_generator(kernel, box, field)
    beta = branching_rate_vector(box, field)
    if dt is None:
        sig = field.sigma_total
        dt = 0.1 / (1.0 + sig + 2.0 * (field.mu + sig))
    u = np.zeros(box.n_sites)
    u[box.index(y0)] = z - 1.0
    out = np.zeros((len(times), box.n_sites))
    t_prev = 0.0
    for j, t in enumerate(times):
        span = t - t_prev
        steps = max(1, int(math.ceil(span / dt - 1e-12)))
        step = span / steps
        for _ in range(steps):
            k1 = h @ u + beta * u * u
            v = u + 0.5 * step * k1
            k2 = h @ v + beta * v * v
            v = u + 0.5 * step * k2
            k3 = h @ v + beta * v * v
            v = u + step * k3
            k4 = h @ v + beta * v * v
            u = u + (step / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            if float(u.max()) > range_tol or float(u.min()) < -1.0 - range_tol:
                raise RangeViolation(
                    f"phi left [0, 1] by more than {range_tol} at t <= {t}")
        out[j] = 1.0 + u
        t_prev = t
    return GeneratingFunctionResult(box=box, y0=y0, z=float(z), times=times, phi=out)


def kpp_moment_estimates(kernel: JumpKernel, box: LatticeBox,
                         field: PerturbationField, y0, t_end: float,
                         dt: float | None = None, checkpoints=None,
                         h_step: float = 1e-3):
    """First two factorial moments from one-sided z-differences of phi at z = 1.

    Uses the stencil nodes {1, 1-h, 1-2h, 1-3h} (the generating function is
    only defined up to z = 1):

        m_1 ~ (11 phi_0 - 18 phi_1 + 9 phi_2 - 2 phi_3) / (6 h)
        m_2 ~ (2 phi_0 - 5 phi_1 + 4 phi_2 - phi_3) / h^2

    with phi_j = phi at z = 1 - j h.  phi_0 = 1 identically.  Returns
    (times, m1, m2) with the same [n_times, n_sites] layout as MomentTable.
    """
    sols = [kpp_generating_function(kernel, box, field, 1.0 - j * h_step, y0,
                                    t_end, dt=dt, checkpoints=checkpoints)
            for j in (1, 2, 3)]
    phi1, phi2, phi3 = (s.phi for s in sols)
    ones = np.ones_like(phi1)
    m1 = (11.0 * ones - 18.0 * phi1 + 9.0 * phi2 - 2.0 * phi3) / (6.0 * h_step)
    m2 = (2.0 * ones - 5.0 * phi1 + 4.0 * phi2 - phi3) / (h_step * h_step)
    return sols[0].times, m1, m2
