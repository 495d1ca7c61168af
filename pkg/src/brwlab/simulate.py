"""Monte Carlo simulation of the branching particle field.

Each particle independently jumps (rate 1, displacement drawn from the jump
kernel), splits in two (rate beta(x) = mu + perturbation), or dies (rate mu).
Replicas are reproducible: replica r of master seed s evolves under its own
counter-derived random stream, so ensembles are order-independent and
bit-stable.

Besides direct field runs, two estimator routes exploit the independence of
single-ancestor subpopulations: the Feynman-Kac functional E exp(sum sigma_i
ell_i(t)) from exact walk paths, and the empty-site probability of the
one-particle-per-site field assembled as a product over ancestor positions.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import _engine
from .errors import HeavyTailWarning, LowConfidenceWarning, PopulationExplosion
from .kernels import JumpKernel
from .spectral import PerturbationField

_STATUS_NAMES = {0: "ok", 1: "particle-cap", 2: "event-cap"}


def _kernel_tables(kernel: JumpKernel):
    zvec = kernel.vectors
    rates = kernel.rates
    zcum = np.cumsum(rates)
    zcum[-1] = 1.0 + 1e-15  # guard the top bin against rounding
    return zvec, zcum


def _field_tables(field: PerturbationField, dimension: int, bits: int):
    if not field.sources:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.float64)
    packed = _engine.pack_sites(
        np.array(field.source_sites, dtype=np.int64), dimension, bits)
    sig = np.array([s for _, s in field.sources], dtype=np.float64)
    return packed, sig


def _check_kill_width(kernel: JumpKernel, bits: int, kill_k: int):
    zmax = int(np.abs(kernel.vectors).max())
    if kill_k + zmax >= (1 << (bits - 1)):
        raise ValueError(
            f"kill half-width {kill_k} too large for {bits}-bit packing")


def default_kill_width(init_extent: int, t_end: float, margin: float = 10.0) -> int:
    """Initial extent plus the diffusive spread allowance 6 sqrt(t)."""
    return int(init_extent + math.ceil(6.0 * math.sqrt(max(t_end, 0.0))) + margin)


@dataclass(frozen=True)
class ParticleField:
    """Sparse snapshot of the particle field at one instant."""

    dimension: int
    time: float
    counts: dict                    # site tuple -> count >= 1
    seed: int
    replica: int

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def count_at(self, site) -> int:
        return self.counts.get(tuple(site), 0)

    def site_rates(self, field: PerturbationField) -> dict:
        """Per-site aggregate event rate n(x) (1 + beta(x) + mu)."""
        src = dict(zip(field.source_sites, (s for _, s in field.sources)))
        return {site: n * (1.0 + field.mu + src.get(site, 0.0) + field.mu)
                for site, n in self.counts.items()}

    def total_event_rate(self, field: PerturbationField) -> float:
        """sum_x n(x) (1 + beta(x) + mu): walk + split + death clocks."""
        return sum(self.site_rates(field).values())


@dataclass(frozen=True)
class RunDiagnostics:
    events_real: float
    events_total: float
    rate_integral: float            # int of the aggregate event rate dt
    final_time: float
    status: str                     # ok | particle-cap | event-cap


@dataclass(frozen=True)
class FieldTrajectory:
    snapshots: tuple[ParticleField, ...]
    diagnostics: RunDiagnostics
    init_extent: int = 0        # half-width of the one-per-site window, 0 for single


def _init_positions(kernel, init, init_site, window, bits):
    d = kernel.dimension
    if init == "single":
        site = init_site if init_site is not None else (0,) * d
        return _engine.pack_sites(np.array([site], dtype=np.int64), d, bits), max(
            abs(int(c)) for c in site) if any(site) else 0
    if init == "window":
        if window is None or window < 0:
            raise ValueError("window half-width required for one-per-site init")
        side = 2 * int(window) + 1
        coords = np.indices((side,) * d).reshape(d, -1).T - int(window)
        return _engine.pack_sites(coords, d, bits), int(window)
    raise ValueError("init must be 'single' or 'window'")


def run_field(kernel: JumpKernel, field: PerturbationField, init: str,
              t_end: float, seed: int, checkpoints=None, init_site=None,
              window: int | None = None, probes=None, obs_window: int | None = None,
              kill_width: int | None = None, max_particles: int = 1 << 21,
              max_events: float = 1e7, replica: int = 0,
              snapshot_cap: int = 200_000,
              raise_on_cap: bool = False) -> FieldTrajectory:
    """Simulate one replica and return sparse snapshots at the checkpoints.

    Event times are exact exponentials of the aggregate rate; event sites
    and types follow the per-particle rates (jump 1, split beta(x), death
    mu).  Supercritical runs hitting ``max_particles`` or ``max_events``
    stop early and report a truncated trajectory (``raise_on_cap`` turns
    that into ``PopulationExplosion``).
    """
    d = kernel.dimension
    bits = _engine.packing_bits(d)
    if checkpoints is None:
        checkpoints = [t_end]
    t_cks = np.asarray(checkpoints, dtype=float)
    if t_cks.ndim != 1 or np.any(np.diff(t_cks) <= 0) or t_cks[0] <= 0:
        raise ValueError("checkpoints must be strictly increasing and positive")
    init_packed, extent = _init_positions(kernel, init, init_site, window, bits)
    if kill_width is None:
        kill_width = default_kill_width(extent, float(t_cks[-1]))
    _check_kill_width(kernel, bits, kill_width)
    zvec, zcum = _kernel_tables(kernel)
    src_packed, src_sigma = _field_tables(field, d, bits)
    probes = probes if probes is not None else [(0,) * d]
    probes_packed = _engine.pack_sites(np.array(probes, dtype=np.int64), d, bits)
    obs_half = int(obs_window) if obs_window is not None else int(kill_width)

    n_ck = t_cks.size
    max_particles = max(int(max_particles), 4 * init_packed.size + 1024)
    probe_counts = np.zeros((n_ck, len(probes)), dtype=np.int64)
    occupied = np.zeros(n_ck, dtype=np.int64)
    islands = np.zeros((n_ck, _engine.ISLAND_BINS), dtype=np.int64)
    pops = np.zeros(n_ck, dtype=np.int64)
    snap_positions = np.zeros((n_ck, min(snapshot_cap, max_particles)), dtype=np.int64)
    snap_npos = np.zeros(n_ck, dtype=np.int64)
    diag = np.zeros(5, dtype=np.float64)

    _engine._field_replica(np.uint64(seed), np.uint64(replica), init_packed, t_cks,
                           float(field.mu), src_packed, src_sigma, zvec, zcum,
                           d, bits, np.int64(kill_width), probes_packed,
                           np.int64(obs_half), max_particles, float(max_events),
                           probe_counts, occupied, islands, pops,
                           snap_positions, snap_npos, diag)

    status = _STATUS_NAMES[int(diag[4])]
    if status != "ok" and raise_on_cap:
        raise PopulationExplosion(f"replica stopped early: {status}")
    snapshots = []
    for j, t in enumerate(t_cks):
        n = int(snap_npos[j])
        coords = _engine.unpack_sites(snap_positions[j, :n], d, bits)
        counts: dict = {}
        for row in coords:
            key = tuple(int(c) for c in row)
            counts[key] = counts.get(key, 0) + 1
        snapshots.append(ParticleField(d, float(t), counts, int(seed), int(replica)))
    diagnostics = RunDiagnostics(float(diag[0]), float(diag[1]), float(diag[2]),
                                 float(diag[3]), status)
    return FieldTrajectory(tuple(snapshots), diagnostics,
                           init_extent=extent if init == "window" else 0)


# ---------------------------------------------------------------------------
# Replica ensembles
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SimStats:
    """Across-replica statistics of the field at the checkpoints."""

    dimension: int
    times: np.ndarray                   # [T]
    probe_sites: tuple[tuple[int, ...], ...]
    replicas: int
    probe_counts: np.ndarray            # [R, T, P] particle counts
    occupied: np.ndarray                # [R, T] occupied sites in the window
    island_hist: np.ndarray             # [T, ISLAND_BINS] aggregated (d=1 runs)
    populations: np.ndarray             # [R, T]
    window_sites: int
    statuses: np.ndarray                # [R] 0 ok / 1 particle cap / 2 event cap
    master_seed: int

    @property
    def truncated_replicas(self) -> int:
        return int(np.count_nonzero(self.statuses))

    def mean_count(self, t_index: int, probe_index: int = 0):
        x = self.probe_counts[:, t_index, probe_index]
        m = float(x.mean())
        se = float(x.std(ddof=1) / math.sqrt(len(x))) if len(x) > 1 else math.nan
        return m, se

    def extinction_probability(self, t_index: int, probe_index: int = 0) -> float:
        x = self.probe_counts[:, t_index, probe_index]
        return float(np.mean(x == 0))

    def occupied_fraction(self, t_index: int):
        f = self.occupied[:, t_index] / self.window_sites
        return float(f.mean()), float(f.std(ddof=1) / math.sqrt(len(f))) if len(f) > 1 else math.nan

    def histogram(self, t_index: int, probe_index: int = 0) -> dict:
        vals, cnts = np.unique(self.probe_counts[:, t_index, probe_index],
                               return_counts=True)
        return {int(v): int(c) for v, c in zip(vals, cnts)}


def run_ensemble(kernel: JumpKernel, field: PerturbationField, init: str,
                 checkpoints, replicas: int, seed: int, init_site=None,
                 window: int | None = None, probes=None,
                 obs_window: int | None = None, kill_width: int | None = None,
                 max_particles: int = 1 << 21, max_events: float = 1e7) -> SimStats:
    """Independent replicas aggregated in replica order (thread-count invariant)."""
    d = kernel.dimension
    bits = _engine.packing_bits(d)
    t_cks = np.asarray(checkpoints, dtype=float)
    if t_cks.ndim != 1 or np.any(np.diff(t_cks) <= 0) or t_cks[0] <= 0:
        raise ValueError("checkpoints must be strictly increasing and positive")
    if replicas < 1:
        raise ValueError("replicas must be >= 1")
    init_packed, extent = _init_positions(kernel, init, init_site, window, bits)
    if kill_width is None:
        kill_width = default_kill_width(extent, float(t_cks[-1]))
    _check_kill_width(kernel, bits, kill_width)
    zvec, zcum = _kernel_tables(kernel)
    src_packed, src_sigma = _field_tables(field, d, bits)
    probes = probes if probes is not None else [(0,) * d]
    probes_packed = _engine.pack_sites(np.array(probes, dtype=np.int64), d, bits)
    if obs_window is None:
        obs_window = extent if init == "window" else kill_width
    win_sites = (2 * int(obs_window) + 1) ** d

    n_ck = t_cks.size
    max_particles = max(int(max_particles), 4 * init_packed.size + 1024)
    probe_counts = np.zeros((replicas, n_ck, len(probes)), dtype=np.int64)
    occupied = np.zeros((replicas, n_ck), dtype=np.int64)
    islands = np.zeros((replicas, n_ck, _engine.ISLAND_BINS), dtype=np.int64)
    pops = np.zeros((replicas, n_ck), dtype=np.int64)
    diags = np.zeros((replicas, 5), dtype=np.float64)

    _engine._field_ensemble(np.uint64(seed), replicas, init_packed, t_cks,
                            float(field.mu), src_packed, src_sigma, zvec, zcum,
                            d, bits, np.int64(kill_width), probes_packed,
                            np.int64(obs_window), max_particles, float(max_events),
                            probe_counts, occupied, islands, pops, diags)

    return SimStats(
        dimension=d,
        times=t_cks,
        probe_sites=tuple(tuple(int(c) for c in p) for p in probes),
        replicas=replicas,
        probe_counts=probe_counts,
        occupied=occupied,
        island_hist=islands.sum(axis=0),
        populations=pops,
        window_sites=win_sites,
        statuses=diags[:, 4].astype(np.int64),
        master_seed=int(seed),
    )


@dataclass(frozen=True)
class MomentEstimate:
    order: int
    estimate: np.ndarray        # [T, P]
    stderr: np.ndarray          # [T, P]
    nonzero_samples: np.ndarray  # [T, P] replicas contributing > 0
    low_confidence: np.ndarray  # [T, P] bool


def estimate_moments(stats: SimStats, max_order: int,
                     min_nonzero: int = 100) -> tuple[MomentEstimate, ...]:
    """Unbiased falling-factorial estimators n(n-1)...(n-l+1) across replicas.

    Orders with fewer than ``min_nonzero`` nonzero contributions get a
    low-confidence flag (and one aggregate warning).
    """
    if stats.replicas < 2:
        raise ValueError("need at least 2 replicas for standard errors")
    out = []
    flagged = False
    counts = stats.probe_counts.astype(np.float64)
    prod = np.ones_like(counts)
    for l in range(1, max_order + 1):
        prod = prod * np.maximum(counts - (l - 1), 0.0) if l > 1 else counts.copy()
        est = prod.mean(axis=0)
        se = prod.std(axis=0, ddof=1) / math.sqrt(stats.replicas)
        nz = (prod > 0).sum(axis=0)
        low = nz < min_nonzero
        flagged = flagged or bool(low.any())
        out.append(MomentEstimate(l, est, se, nz, low))
    if flagged:
        warnings.warn("some factorial-moment estimates rest on fewer than "
                      f"{min_nonzero} nonzero samples", LowConfidenceWarning,
                      stacklevel=2)
    return tuple(out)


@dataclass(frozen=True)
class OccupancyReport:
    times: np.ndarray
    occupied_fraction: np.ndarray      # [T]
    island_count: np.ndarray           # [T] (d = 1 runs of occupied sites)
    island_size_hist: np.ndarray       # [T, ISLAND_BINS] log2-binned sizes
    window_sites: int


def occupancy_stats(trajectory: FieldTrajectory, window: int) -> OccupancyReport:
    """Occupied-site fraction and island diagnostics of one trajectory.

    For one-per-site starts the observation window must sit inside the
    initial window with margin at least 6 sqrt(t_end), so edge losses
    cannot reach it.
    """
    snaps = trajectory.snapshots
    d = snaps[0].dimension
    t_end = snaps[-1].time
    if trajectory.init_extent:
        margin = 6.0 * math.sqrt(t_end)
        if window + margin > trajectory.init_extent:
            raise ValueError(
                f"window {window} leaves less than the 6 sqrt(t_end) = "
                f"{margin:.0f} margin inside the initial window "
                f"{trajectory.init_extent}")
    win_sites = (2 * window + 1) ** d
    times = np.array([s.time for s in snaps])
    frac = np.zeros(len(snaps))
    n_islands = np.zeros(len(snaps), dtype=np.int64)
    hist = np.zeros((len(snaps), _engine.ISLAND_BINS), dtype=np.int64)
    for j, snap in enumerate(snaps):
        occ = sorted(site for site in snap.counts
                     if all(abs(c) <= window for c in site))
        frac[j] = len(occ) / win_sites
        if d == 1 and occ:
            run = 1
            runs = []
            for a, b in zip(occ, occ[1:]):
                if b[0] == a[0] + 1:
                    run += 1
                else:
                    runs.append(run)
                    run = 1
            runs.append(run)
            n_islands[j] = len(runs)
            for r in runs:
                hist[j, min(_engine.ISLAND_BINS - 1, int(math.log2(r)))] += 1
        elif occ:
            n_islands[j] = _count_components(occ)
    return OccupancyReport(times, frac, n_islands, hist, win_sites)


def _count_components(sites) -> int:
    """Connected components of the occupied set under nearest-neighbor adjacency."""
    todo = set(sites)
    comps = 0
    while todo:
        comps += 1
        stack = [todo.pop()]
        while stack:
            site = stack.pop()
            for j in range(len(site)):
                for dlt in (-1, 1):
                    nb = site[:j] + (site[j] + dlt,) + site[j + 1:]
                    if nb in todo:
                        todo.remove(nb)
                        stack.append(nb)
    return comps


# ---------------------------------------------------------------------------
# Feynman-Kac local-time functional
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LocalTimeSample:
    """One walk path's accumulated time at the first source site."""

    path_seed: int
    replica: int
    t: float
    ell: float          # 0 <= ell <= t


@dataclass(frozen=True)
class LocalTimeEstimate:
    estimate: float
    stderr: float
    ci95: tuple[float, float]
    replicas: int
    heavy_tail: bool
    exponents: np.ndarray       # per-path sum_i sigma_i ell_i(t)
    ell_first: np.ndarray       # per-path time at the first source site
    t: float = 0.0
    seed: int = 0

    def sample(self, replica: int) -> LocalTimeSample:
        return LocalTimeSample(self.seed, replica, self.t,
                               float(self.ell_first[replica]))


def local_time_mc(kernel: JumpKernel, field: PerturbationField, t: float,
                  replicas: int, seed: int,
                  heavy_tail_rel_ci: float = 0.5) -> LocalTimeEstimate:
    """Monte Carlo E_0[exp(sum_i sigma_i ell_i(t))] from exact walk paths.

    Sojourn times are the walk's own exponential holding times, so the
    accumulated source local times carry no discretization error.  Warns
    when the relative 95% half-width exceeds ``heavy_tail_rel_ci`` (the
    functional is heavy-tailed near the critical strength).
    """
    if t < 0:
        raise ValueError("t must be >= 0")
    d = kernel.dimension
    bits = _engine.packing_bits(d)
    zvec, zcum = _kernel_tables(kernel)
    src_packed, src_sigma = _field_tables(field, d, bits)
    expo = np.zeros(replicas, dtype=np.float64)
    ell0 = np.zeros(replicas, dtype=np.float64)
    _engine._local_time_ensemble(np.uint64(seed), replicas, float(t),
                                 src_packed, src_sigma, zvec, zcum, d, bits,
                                 expo, ell0)
    samples = np.exp(expo)
    est = float(samples.mean())
    se = float(samples.std(ddof=1) / math.sqrt(replicas)) if replicas > 1 else math.nan
    half = 1.959963984540054 * se
    heavy = bool(se == se and est > 0 and half / est > heavy_tail_rel_ci)
    if heavy:
        warnings.warn(f"relative 95% half-width {half / est:.2f} exceeds "
                      f"{heavy_tail_rel_ci}", HeavyTailWarning, stacklevel=2)
    return LocalTimeEstimate(est, se, (est - half, est + half), replicas, heavy,
                             expo, ell0, t=float(t), seed=int(seed))


# ---------------------------------------------------------------------------
# Distribution snapshots
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DistributionSnapshot:
    time: float
    histogram: dict                 # count value -> replica frequency
    replicas: int
    tv_to_double: float | None     # total variation between t and 2t, if present


def distribution_snapshot(stats: SimStats, y0, t: float) -> DistributionSnapshot:
    """Histogram of n(t, y0) across replicas, with a t vs 2t stabilization gap."""
    y0 = tuple(int(c) for c in y0)
    if y0 not in stats.probe_sites:
        raise ValueError(f"{y0} is not a probe site of this ensemble")
    p = stats.probe_sites.index(y0)
    times = list(stats.times)
    if t not in times:
        raise ValueError(f"t = {t} is not a checkpoint")
    j = times.index(t)
    hist = stats.histogram(j, p)
    tv = None
    if 2 * t in times:
        j2 = times.index(2 * t)
        h2 = stats.histogram(j2, p)
        keys = set(hist) | set(h2)
        tv = 0.5 * sum(abs(hist.get(k, 0) - h2.get(k, 0)) for k in keys) / stats.replicas
    if stats.replicas < 500:
        warnings.warn("fewer than 500 replicas behind a distributional claim",
                      LowConfidenceWarning, stacklevel=2)
    return DistributionSnapshot(float(t), hist, stats.replicas, tv)


# ---------------------------------------------------------------------------
# Empty-site probability via subpopulation independence
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EmptyProbabilityEstimate:
    times: np.ndarray
    p_empty: np.ndarray             # [T] product-form estimate at the probe
    log_p_stderr: np.ndarray        # [T] approximate stderr of log p
    mean_population: np.ndarray     # [T] single-ancestor mean (should stay ~1)
    replicas: int


def empty_probability_superposition(kernel: JumpKernel, mu: float, checkpoints,
                                    replicas: int, seed: int,
                                    trunc_radius: int | None = None,
                                    max_events: float = 1e6) -> EmptyProbabilityEstimate:
    """P(n(t, 0) = 0) for the critical one-per-site field on all of Z^d.

    The field is the superposition of independent single-ancestor
    subpopulations, one per lattice site, so the probability that the origin
    is empty factorizes over ancestors:

        P(n(t, 0) = 0) = prod_x P(eta(t, x) = 0),

    with eta the field of one ancestor started at the origin (translation
    plus reflection symmetry moves every ancestor there).  The marginals
    P(eta(t, x) = 0) are estimated from ``replicas`` single-ancestor runs;
    ancestors beyond ``trunc_radius`` contribute less than the walk's
    displacement tail and are dropped.
    """
    d = kernel.dimension
    bits = _engine.packing_bits(d)
    t_cks = np.asarray(checkpoints, dtype=float)
    if t_cks.ndim != 1 or np.any(np.diff(t_cks) <= 0) or t_cks[0] <= 0:
        raise ValueError("checkpoints must be strictly increasing and positive")
    t_end = float(t_cks[-1])
    if trunc_radius is None:
        # per-axis displacement std is sqrt(m2 t / d); 6 of them is ample
        m2 = kernel.total_second_moment()
        trunc_radius = int(math.ceil(6.0 * math.sqrt(m2 * t_end / d))) + 2
    kill_k = trunc_radius + int(math.ceil(3.0 * math.sqrt(t_end))) + 5
    _check_kill_width(kernel, bits, kill_k)
    zvec, zcum = _kernel_tables(kernel)
    side = 2 * trunc_radius + 1
    n_ck = t_cks.size
    occ = np.zeros((n_ck, side ** d), dtype=np.int64)
    probe0 = np.zeros((replicas, n_ck), dtype=np.int64)
    pops = np.zeros((replicas, n_ck), dtype=np.int64)
    max_particles = 1 << 16
    _engine._subpopulation_occupancy(np.uint64(seed), replicas, t_cks, float(mu),
                                     zvec, zcum, d, bits, np.int64(kill_k),
                                     np.int64(trunc_radius), max_particles,
                                     float(max_events), occ, probe0, pops)
    q = 1.0 - occ / replicas
    p_empty = np.zeros(n_ck)
    log_se = np.zeros(n_ck)
    for j in range(n_ck):
        qs = q[j]
        if np.any(qs <= 0.0):
            p_empty[j] = 0.0
            log_se[j] = math.inf
            continue
        logp = float(np.sum(np.log(qs)))
        p_empty[j] = math.exp(logp)
        var = float(np.sum((1.0 - qs) / (qs * replicas)))
        log_se[j] = math.sqrt(var)
    return EmptyProbabilityEstimate(t_cks, p_empty, log_se,
                                    pops.mean(axis=0), replicas)


# ---------------------------------------------------------------------------
# Pure-walk endpoint sampler
# ---------------------------------------------------------------------------

def walk_endpoints(kernel: JumpKernel, t: float, replicas: int, seed: int):
    """Final positions and jump counts of rate-1 walks from the origin.

    The endpoint law is p(t, 0, .) and the jump counts are Poisson(t);
    both serve as law-exactness checks of the event scheduler.
    """
    d = kernel.dimension
    bits = _engine.packing_bits(d)
    zvec, zcum = _kernel_tables(kernel)
    packed = np.zeros(replicas, dtype=np.int64)
    jumps = np.zeros(replicas, dtype=np.int64)
    _engine._walk_endpoints(np.uint64(seed), replicas, float(t), zvec, zcum,
                            d, bits, packed, jumps)
    return _engine.unpack_sites(packed, d, bits), jumps
