"""Criticality thresholds, steady-state constants, and eigenvalue computations.

For a transient walk perturbed by point sources of total strength s the mean
field has three regimes split by the threshold s* = 1 / G_0(0, 0):

  * s < s*: the first moment saturates at A = 1 / (1 - s G_0(0, 0));
  * s = s*: boundary regime, the saturation constant diverges;
  * s > s*: exponential growth at the rate lam > 0 solving 1/s = I(lam).

Also provides the principal Dirichlet eigenvalue of the walk generator plus a
constant potential on a cube, which exhibits the -c/L^2 + delta0 scaling that
makes constant-height perturbations on large cubes supercritical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse

from .errors import DivergentGreen, NoConvergence, NoRoot, SupercriticalInput
from .kernels import JumpKernel, TorusGrid, is_transient, resolvent_integral

_THRESHOLD_REL_TOL = 1e-12


@dataclass(frozen=True)
class PerturbationField:
    """Baseline per-particle rate plus positive point sources.

    ``mu`` is the common splitting/death baseline (the critical contact
    rate); ``sources`` lists (site, strength) pairs with distinct sites and
    strictly positive strengths.
    """

    mu: float
    sources: tuple[tuple[tuple[int, ...], float], ...] = ()

    def __post_init__(self):
        if self.mu < 0:
            raise ValueError("baseline rate mu must be >= 0")
        seen = set()
        dim = None
        for site, strength in self.sources:
            site = tuple(site)
            if dim is None:
                dim = len(site)
            elif len(site) != dim:
                raise ValueError("source sites must share one dimension")
            if site in seen:
                raise ValueError(f"duplicate source site {site}")
            seen.add(site)
            if not strength > 0:
                raise ValueError(f"source strength {strength} must be > 0")

    @property
    def sigma_total(self) -> float:
        return float(math.fsum(s for _, s in self.sources))

    @property
    def source_sites(self) -> tuple[tuple[int, ...], ...]:
        return tuple(tuple(site) for site, _ in self.sources)

    @classmethod
    def single(cls, mu: float, sigma: float, dimension: int) -> "PerturbationField":
        return cls(mu, (((0,) * dimension, sigma),))


@dataclass(frozen=True)
class SpectralReport:
    """Regime classification of one source configuration."""

    sigma_total: float
    sigma_star: float               # 0.0 for recurrent walks
    regime: str                     # subcritical | critical | supercritical
    steady_constant: float | None   # A (or C for several sources); subcritical only
    bound_constant: float | None    # B = 2 (mu + sigma_total) G_0(0,0); transient only
    growth_rate: float | None       # lam > 0; supercritical only

    def __post_init__(self):
        if (self.growth_rate is not None) != (self.regime == "supercritical"):
            raise ValueError("growth_rate present iff supercritical")
        if (self.steady_constant is not None) != (self.regime == "subcritical"):
            raise ValueError("steady_constant present iff subcritical")


def critical_threshold(kernel: JumpKernel, grid: TorusGrid | None = None) -> float:
    """s* = 1 / G_0(0, 0) for transient walks; 0.0 for recurrent ones.

    A recurrent walk has G_0(0, 0) = +inf, so every positive strength is
    supercritical for the mean.
    """
    if not is_transient(kernel):
        return 0.0
    return 1.0 / resolvent_integral(kernel, grid, 0.0)


def steady_mean_constant(kernel: JumpKernel, grid: TorusGrid | None,
                         field: PerturbationField) -> float:
    """Saturation value of the mean at a source site.

    Single source: A = 1 / (1 - sigma G_0(0,0)).  Several sources combine
    through the total strength, giving C = 1 / (1 - sigma_total G_0(0,0)).
    """
    if not is_transient(kernel):
        raise SupercriticalInput(
            "recurrent walk: any positive perturbation is supercritical")
    g0 = resolvent_integral(kernel, grid, 0.0)
    sig = field.sigma_total
    if sig * g0 >= 1.0 - _THRESHOLD_REL_TOL:
        raise SupercriticalInput(
            f"sigma_total = {sig} is not below the threshold {1.0 / g0}")
    return 1.0 / (1.0 - sig * g0)


def bound_constant_B(kernel: JumpKernel, grid: TorusGrid | None,
                     field: PerturbationField) -> float:
    """B = 2 (mu + sigma_total) G_0(0, 0), the moment-bound base constant."""
    if not is_transient(kernel):
        raise DivergentGreen("B requires a transient walk (finite G_0(0,0))")
    g0 = resolvent_integral(kernel, grid, 0.0)
    return 2.0 * (field.mu + field.sigma_total) * g0


def growth_eigenvalue(kernel: JumpKernel, grid: TorusGrid | None, sigma: float,
                      residual_tol: float = 1e-10, max_doublings: int = 64) -> float:
    """Positive root lam of sigma * I(lam) = 1, by bisection.

    I is strictly decreasing with I(lam) <= 1/lam, so lam = sigma brackets
    the root from above.  Raises ``NoRoot`` for transient walks at or below
    the threshold (``boundary=True`` exactly at it, where lam degenerates
    to 0).
    """
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    grid = grid or TorusGrid.default(kernel.dimension)
    if is_transient(kernel):
        star = critical_threshold(kernel, grid)
        if sigma <= star * (1.0 + _THRESHOLD_REL_TOL):
            at_boundary = abs(sigma - star) <= star * _THRESHOLD_REL_TOL
            raise NoRoot(
                f"sigma = {sigma} is {'at' if at_boundary else 'below'} "
                f"the threshold {star}; no positive eigenvalue",
                boundary=at_boundary)

    def residual(lam):
        return sigma * resolvent_integral(kernel, grid, lam) - 1.0

    hi = sigma
    doublings = 0
    while residual(hi) > 0:
        hi *= 2.0
        doublings += 1
        if doublings > max_doublings:
            raise NoRoot(f"no sign change up to lam = {hi}")
    lo = 0.0
    # lo = 0 is a valid lower bracket: I(0+) > 1/sigma in every accepted case
    lam = 0.5 * hi
    for _ in range(200):
        lam = 0.5 * (lo + hi)
        r = residual(lam)
        if abs(r) <= residual_tol:
            return lam
        if r > 0:
            lo = lam
        else:
            hi = lam
    r = residual(lam)
    if abs(r) <= residual_tol:
        return lam
    raise NoRoot(f"bisection stalled at lam = {lam} with residual {r:.3e}")


def spectral_report(kernel: JumpKernel, grid: TorusGrid | None,
                    field: PerturbationField) -> SpectralReport:
    """Classify the regime and collect the constants for one configuration."""
    grid = grid or TorusGrid.default(kernel.dimension)
    sig = field.sigma_total
    star = critical_threshold(kernel, grid)
    transient = is_transient(kernel)
    b_const = bound_constant_B(kernel, grid, field) if transient else None
    if transient and abs(sig - star) <= star * 1e-9:
        return SpectralReport(sig, star, "critical", None, b_const, None)
    if transient and sig < star:
        return SpectralReport(
            sig, star, "subcritical",
            steady_mean_constant(kernel, grid, field), b_const, None)
    lam = growth_eigenvalue(kernel, grid, sig)
    return SpectralReport(sig, star, "supercritical", None, b_const, lam)


# ---------------------------------------------------------------------------
# Cube principal eigenvalue
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BoxEigenvalue:
    lambda0: float
    eigenvector: np.ndarray         # normalized, strictly positive (Perron)
    rayleigh_trial: float           # Rayleigh quotient of the cosine trial function
    iterations: int
    residual: float


def cosine_trial_function(L: int, dimension: int) -> np.ndarray:
    """Product-of-cosines trial vector on the cube {|x|_inf <= L}."""
    r = math.pi / (2.0 * L)
    axis = np.cos(r * np.arange(-L, L + 1))
    v = axis
    for _ in range(dimension - 1):
        v = np.multiply.outer(v, axis)
    return v.reshape(-1)


def _cube_dirichlet_operator(kernel: JumpKernel, L: int) -> scipy.sparse.csr_matrix:
    """Walk generator restricted to the cube with absorbing boundary."""
    d = kernel.dimension
    n = 2 * L + 1
    size = n ** d
    coords = np.indices((n,) * d).reshape(d, -1).T - L
    strides = np.array([n ** (d - 1 - j) for j in range(d)], dtype=np.int64)
    rows, cols, vals = [], [], []
    for z, a in zip(kernel.vectors, kernel.rates):
        tgt = coords + z
        inside = np.all(np.abs(tgt) <= L, axis=1)
        src_idx = np.nonzero(inside)[0]
        tgt_idx = (tgt[inside] + L) @ strides
        rows.append(src_idx)
        cols.append(tgt_idx)
        vals.append(np.full(src_idx.size, a))
    mat = scipy.sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(size, size)).tocsr()
    mat = mat + scipy.sparse.diags(np.full(size, -1.0)).tocsr()
    return mat


def box_principal_eigenvalue(kernel: JumpKernel, L: int, delta0: float,
                             center: tuple[int, ...] | None = None,
                             rtol: float = 1e-12, max_iter: int = 100_000) -> BoxEigenvalue:
    """Principal eigenvalue of the walk generator + delta0 on a cube, Dirichlet.

    Power iteration on the shifted operator 2 I + H (entrywise nonnegative,
    irreducible, so Perron-Frobenius applies) started from the cosine trial
    function.  Converges when successive Rayleigh quotients differ by less
    than ``rtol``; raises ``NoConvergence`` past ``max_iter``.

    The eigenvalue scales like delta0 - c / L^2, so it turns positive for
    large enough cubes whatever the potential height.  ``center`` only
    relabels sites and is accepted for interface completeness.
    """
    if L < 2:
        raise ValueError("cube half-width L must be >= 2")
    if delta0 <= 0:
        raise ValueError("potential height delta0 must be > 0")
    h = _cube_dirichlet_operator(kernel, L)
    shift = 2.0 + delta0
    v = cosine_trial_function(L, kernel.dimension)
    v = v / np.linalg.norm(v)
    hv = h @ v + delta0 * v
    rayleigh_trial = float(v @ hv)
    rho_prev = math.inf
    iterations = 0
    for iterations in range(1, max_iter + 1):
        w = hv + shift * v
        nw = np.linalg.norm(w)
        v = w / nw
        hv = h @ v + delta0 * v
        rho = float(v @ (hv + shift * v))
        if abs(rho - rho_prev) < rtol:
            lam0 = rho - shift
            resid = float(np.linalg.norm(hv - lam0 * v))
            if not np.all(v > 0):
                raise NoConvergence(
                    "principal eigenvector lost strict positivity", residual=resid)
            return BoxEigenvalue(lam0, v, rayleigh_trial, iterations, resid)
        rho_prev = rho
    resid = float(np.linalg.norm(hv - (rho_prev - shift) * v))
    raise NoConvergence(
        f"power iteration did not converge in {max_iter} iterations", residual=resid)
