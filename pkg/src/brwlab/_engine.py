"""JIT-compiled event loops for the particle-field simulator.

Scheduling uses uniformization: events fire at the per-particle rate cap
r_max = 1 + mu + beta_max, a uniformly chosen particle is examined, and the
event type is drawn as jump / death / split / no-op with probabilities
1/r_max, mu/r_max, beta(x)/r_max, remainder.  This reproduces the exact law
of the continuous-time dynamics while keeping O(1) work per event with a
flat particle array (swap-remove deletions).

Randomness is a hand-rolled xoshiro256++ stream seeded per replica through
splitmix64, so trajectories are bit-reproducible for a given (master seed,
replica index) pair independently of thread count.

Site coordinates are packed into one int64, ``bits`` bits per axis with an
offset of 2^(bits-1); particles crossing the kill half-width are removed.
"""

import numpy as np
from numba import njit, prange

U64 = np.uint64
_SPLITMIX_GAMMA = U64(0x9E3779B97F4A7C15)
_MIX1 = U64(0xBF58476D1CE4E5B9)
_MIX2 = U64(0x94D049BB133111EB)
_REPLICA_SALT = U64(0xD2B74407B1CE6E93)
_INV_2_53 = 1.1102230246251565e-16  # 2^-53

ISLAND_BINS = 20

STATUS_OK = 0
STATUS_PARTICLE_CAP = 1
STATUS_EVENT_CAP = 2


@njit(cache=True, inline="always")
def _splitmix(x):
    x = x + _SPLITMIX_GAMMA
    z = x
    z = (z ^ (z >> U64(30))) * _MIX1
    z = (z ^ (z >> U64(27))) * _MIX2
    return x, z ^ (z >> U64(31))


@njit(cache=True)
def _rng_seed(master, replica):
    state = np.empty(4, dtype=np.uint64)
    x = U64(master) ^ (U64(replica) * _REPLICA_SALT)
    for i in range(4):
        x, z = _splitmix(x)
        state[i] = z
    if state[0] == U64(0) and state[1] == U64(0) and state[2] == U64(0) and state[3] == U64(0):
        state[0] = _SPLITMIX_GAMMA
    return state


@njit(cache=True, inline="always")
def _next_u64(state):
    s0 = state[0]
    s1 = state[1]
    s2 = state[2]
    s3 = state[3]
    tmp = s0 + s3
    result = ((tmp << U64(23)) | (tmp >> U64(41))) + s0
    t = s1 << U64(17)
    s2 = s2 ^ s0
    s3 = s3 ^ s1
    s1 = s1 ^ s2
    s0 = s0 ^ s3
    s2 = s2 ^ t
    s3 = (s3 << U64(45)) | (s3 >> U64(19))
    state[0] = s0
    state[1] = s1
    state[2] = s2
    state[3] = s3
    return result


@njit(cache=True, inline="always")
def _u01(state):
    return float(_next_u64(state) >> U64(11)) * _INV_2_53


@njit(cache=True, inline="always")
def _exponential(state):
    return -np.log(1.0 - _u01(state))


@njit(cache=True, inline="always")
def _pack_origin(d, bits):
    p = np.int64(0)
    off = np.int64(1) << np.int64(bits - 1)
    for j in range(d):
        p |= off << np.int64(bits * j)
    return p


@njit(cache=True, inline="always")
def _sigma_at(p, src_packed, src_sigma):
    for i in range(src_packed.size):
        if src_packed[i] == p:
            return src_sigma[i]
    return 0.0


@njit(cache=True, inline="always")
def _apply_jump(p, z_row, d, bits, kill_k):
    """Displace packed position by z; returns (new_packed, alive)."""
    off = np.int64(1) << np.int64(bits - 1)
    mask = (np.int64(1) << np.int64(bits)) - np.int64(1)
    out = np.int64(0)
    for j in range(d):
        cur = ((p >> np.int64(bits * j)) & mask) - off
        new = cur + z_row[j]
        if new > kill_k or new < -kill_k:
            return p, False
        out |= (new + off) << np.int64(bits * j)
    return out, True


@njit(cache=True, inline="always")
def _in_window(p, d, bits, half_width):
    off = np.int64(1) << np.int64(bits - 1)
    mask = (np.int64(1) << np.int64(bits)) - np.int64(1)
    for j in range(d):
        c = ((p >> np.int64(bits * j)) & mask) - off
        if c > half_width or c < -half_width:
            return False
    return True


@njit(cache=True)
def _draw_jump(state, zcum):
    u = _u01(state)
    for i in range(zcum.size):
        if u < zcum[i]:
            return i
    return zcum.size - 1


@njit(cache=True)
def _snapshot_stats(pos, pop, d, bits, probes, obs_half, scratch,
                    probe_out, islands_out):
    """Probe counts, occupied-site count in the window, island histogram (d=1)."""
    for q in range(probes.size):
        cnt = 0
        for i in range(pop):
            if pos[i] == probes[q]:
                cnt += 1
        probe_out[q] = cnt
    m = 0
    for i in range(pop):
        if _in_window(pos[i], d, bits, obs_half):
            scratch[m] = pos[i]
            m += 1
    for b in range(ISLAND_BINS):
        islands_out[b] = 0
    if m == 0:
        return 0
    sub = np.sort(scratch[:m])
    occupied = 1
    run = 1
    for i in range(1, m):
        if sub[i] == sub[i - 1]:
            continue
        occupied += 1
        if d == 1 and sub[i] == sub[i - 1] + 1:
            run += 1
        else:
            if d == 1:
                b = min(ISLAND_BINS - 1, int(np.log2(run)))
                islands_out[b] += 1
            run = 1
    if d == 1:
        b = min(ISLAND_BINS - 1, int(np.log2(run)))
        islands_out[b] += 1
    return occupied


@njit(cache=True)
def _field_replica(master, replica, init_packed, t_cks, mu, src_packed, src_sigma,
                   zvec, zcum, d, bits, kill_k, probes, obs_half,
                   max_particles, max_events,
                   probe_counts, occupied, islands, pops,
                   snap_positions, snap_npos, diag):
    """One replica of the branching field.

    ``diag`` receives [events_real, events_total, rate_integral, final_time,
    status].  When ``snap_positions`` is non-empty its rows get the packed
    particle positions at each checkpoint (truncated at the row length).
    """
    state = _rng_seed(master, replica)
    n0 = init_packed.size
    pos = np.empty(max_particles, dtype=np.int64)
    for i in range(n0):
        pos[i] = init_packed[i]
    pop = n0
    scratch = np.empty(max_particles, dtype=np.int64)

    beta_max = 0.0
    for i in range(src_sigma.size):
        if src_sigma[i] > beta_max:
            beta_max = src_sigma[i]
    r_max = 1.0 + 2.0 * mu + beta_max

    # source occupation counts for the exact aggregate rate
    src_n = np.zeros(src_packed.size, dtype=np.int64)
    for i in range(pop):
        for s in range(src_packed.size):
            if pos[i] == src_packed[s]:
                src_n[s] += 1

    t = 0.0
    ck = 0
    nck = t_cks.size
    events_real = 0.0
    events_total = 0.0
    rate_integral = 0.0
    status = STATUS_OK
    want_snaps = snap_positions.shape[1] > 0

    while ck < nck:
        if pop == 0 or status != STATUS_OK:
            for q in range(probes.size):
                probe_counts[ck, q] = 0
            occupied[ck] = 0
            for b in range(ISLAND_BINS):
                islands[ck, b] = 0
            pops[ck] = pop if status != STATUS_OK else 0
            snap_npos[ck] = 0
            ck += 1
            continue
        total_max = pop * r_max
        dt = _exponential(state) / total_max
        if t + dt >= t_cks[ck]:
            # no event before the checkpoint; snapshot and rely on memorylessness
            t = t_cks[ck]
            occupied[ck] = _snapshot_stats(pos, pop, d, bits, probes, obs_half,
                                           scratch, probe_counts[ck], islands[ck])
            pops[ck] = pop
            if want_snaps:
                nkeep = min(pop, snap_positions.shape[1])
                for i in range(nkeep):
                    snap_positions[ck, i] = pos[i]
                snap_npos[ck] = nkeep
            ck += 1
            continue
        rate_real = pop * (1.0 + 2.0 * mu)
        for s in range(src_packed.size):
            rate_real += src_sigma[s] * src_n[s]
        rate_integral += dt * rate_real
        t += dt
        events_total += 1.0
        if events_total >= max_events:
            status = STATUS_EVENT_CAP

        i = int(_u01(state) * pop)
        if i >= pop:
            i = pop - 1
        p = pos[i]
        sig_here = _sigma_at(p, src_packed, src_sigma)
        beta_here = mu + sig_here
        u = _u01(state) * r_max
        if u < 1.0:
            zi = _draw_jump(state, zcum)
            newp, alive = _apply_jump(p, zvec[zi], d, bits, kill_k)
            if alive:
                pos[i] = newp
                if sig_here > 0.0:
                    for s in range(src_packed.size):
                        if src_packed[s] == p:
                            src_n[s] -= 1
                sig_new = _sigma_at(newp, src_packed, src_sigma)
                if sig_new > 0.0:
                    for s in range(src_packed.size):
                        if src_packed[s] == newp:
                            src_n[s] += 1
            else:
                pos[i] = pos[pop - 1]
                pop -= 1
                if sig_here > 0.0:
                    for s in range(src_packed.size):
                        if src_packed[s] == p:
                            src_n[s] -= 1
            events_real += 1.0
        elif u < 1.0 + mu:
            pos[i] = pos[pop - 1]
            pop -= 1
            if sig_here > 0.0:
                for s in range(src_packed.size):
                    if src_packed[s] == p:
                        src_n[s] -= 1
            events_real += 1.0
        elif u < 1.0 + mu + beta_here:
            if pop >= max_particles:
                status = STATUS_PARTICLE_CAP
            else:
                pos[pop] = p
                pop += 1
                if sig_here > 0.0:
                    for s in range(src_packed.size):
                        if src_packed[s] == p:
                            src_n[s] += 1
                events_real += 1.0
        # else: thinning no-op

    diag[0] = events_real
    diag[1] = events_total
    diag[2] = rate_integral
    diag[3] = t
    diag[4] = float(status)


@njit(cache=True, parallel=True)
def _field_ensemble(master, replicas, init_packed, t_cks, mu, src_packed, src_sigma,
                    zvec, zcum, d, bits, kill_k, probes, obs_half,
                    max_particles, max_events,
                    probe_counts, occupied, islands, pops, diags):
    empty_snap = np.empty((t_cks.size, 0), dtype=np.int64)
    for r in prange(replicas):
        snap_npos = np.zeros(t_cks.size, dtype=np.int64)
        _field_replica(master, r, init_packed, t_cks, mu, src_packed, src_sigma,
                       zvec, zcum, d, bits, kill_k, probes, obs_half,
                       max_particles, max_events,
                       probe_counts[r], occupied[r], islands[r], pops[r],
                       empty_snap, snap_npos, diags[r])


@njit(cache=True)
def _subpopulation_occupancy(master, replicas, t_cks, mu, zvec, zcum, d, bits,
                             kill_k, trunc_r, max_particles, max_events,
                             occ_counts, probe0, pops):
    """Single-ancestor replicas; accumulates per-site occupancy indicators.

    ``occ_counts[ck, idx]`` counts replicas with at least one particle at the
    site of dense index ``idx`` inside the cube |x|_inf <= trunc_r.  Serial
    over replicas because the accumulator is shared.
    """
    nck = t_cks.size
    side = 2 * trunc_r + 1
    origin = _pack_origin(d, bits)
    src_packed = np.empty(0, dtype=np.int64)
    src_sigma = np.empty(0, dtype=np.float64)
    probes = np.empty(1, dtype=np.int64)
    probes[0] = origin
    snap_cap = max_particles
    snap_positions = np.empty((nck, snap_cap), dtype=np.int64)
    snap_npos = np.zeros(nck, dtype=np.int64)
    probe_counts = np.zeros((nck, 1), dtype=np.int64)
    occupied = np.zeros(nck, dtype=np.int64)
    islands = np.zeros((nck, ISLAND_BINS), dtype=np.int64)
    pop_row = np.zeros(nck, dtype=np.int64)
    diag = np.zeros(5, dtype=np.float64)
    init = np.empty(1, dtype=np.int64)
    init[0] = origin
    off = np.int64(1) << np.int64(bits - 1)
    mask = (np.int64(1) << np.int64(bits)) - np.int64(1)

    for r in range(replicas):
        _field_replica(master, r, init, t_cks, mu, src_packed, src_sigma,
                       zvec, zcum, d, bits, kill_k, probes, trunc_r,
                       max_particles, max_events,
                       probe_counts, occupied, islands, pop_row,
                       snap_positions, snap_npos, diag)
        for ck in range(nck):
            probe0[r, ck] = probe_counts[ck, 0]
            pops[r, ck] = pop_row[ck]
            n = snap_npos[ck]
            if n == 0:
                continue
            sub = np.sort(snap_positions[ck, :n])
            for i in range(n):
                if i > 0 and sub[i] == sub[i - 1]:
                    continue
                p = sub[i]
                idx = 0
                inside = True
                for j in range(d):
                    c = ((p >> np.int64(bits * j)) & mask) - off
                    if c > trunc_r or c < -trunc_r:
                        inside = False
                        break
                    idx = idx * side + (c + trunc_r)
                if inside:
                    occ_counts[ck, idx] += 1


@njit(cache=True, parallel=True)
def _local_time_ensemble(master, replicas, t_end, src_packed, src_sigma,
                         zvec, zcum, d, bits, exponents, ell_first):
    """Rate-1 walk paths from the origin; accumulates sum_i sigma_i * ell_i(t).

    Sojourn segments are exact exponential holding times truncated at t_end,
    so the Feynman-Kac exponent carries no discretization error.
    ``ell_first`` records the time spent at the first source site.
    """
    for r in prange(replicas):
        state = _rng_seed(master, r)
        p = _pack_origin(d, bits)
        t = 0.0
        expo = 0.0
        ell0 = 0.0
        while True:
            hold = _exponential(state)
            seg = hold
            if t + hold >= t_end:
                seg = t_end - t
            sig = _sigma_at(p, src_packed, src_sigma)
            if sig > 0.0:
                expo += sig * seg
            if src_packed.size > 0 and p == src_packed[0]:
                ell0 += seg
            t += hold
            if t >= t_end:
                break
            zi = _draw_jump(state, zcum)
            newp, alive = _apply_jump(p, zvec[zi], d, bits, np.int64(1) << np.int64(bits - 2))
            if alive:
                p = newp
        exponents[r] = expo
        ell_first[r] = ell0


@njit(cache=True, parallel=True)
def _walk_endpoints(master, replicas, t_end, zvec, zcum, d, bits,
                    positions, jump_counts):
    """Pure rate-1 walks from the origin: final packed position and jump count."""
    for r in prange(replicas):
        state = _rng_seed(master, r)
        p = _pack_origin(d, bits)
        t = 0.0
        jumps = 0
        while True:
            t += _exponential(state)
            if t >= t_end:
                break
            zi = _draw_jump(state, zcum)
            newp, alive = _apply_jump(p, zvec[zi], d, bits, np.int64(1) << np.int64(bits - 2))
            if alive:
                p = newp
            jumps += 1
        positions[r] = p
        jump_counts[r] = jumps


def packing_bits(dimension: int) -> int:
    return min(32, 62 // dimension)


def pack_sites(coords: np.ndarray, dimension: int, bits: int) -> np.ndarray:
    """Pack integer coordinate rows into int64 keys (axis j at bit offset bits*j)."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, dimension)
    off = np.int64(1) << np.int64(bits - 1)
    out = np.zeros(coords.shape[0], dtype=np.int64)
    for j in range(dimension):
        out |= (coords[:, j] + off) << np.int64(bits * j)
    return out


def unpack_sites(packed: np.ndarray, dimension: int, bits: int) -> np.ndarray:
    packed = np.asarray(packed, dtype=np.int64)
    off = np.int64(1) << np.int64(bits - 1)
    mask = (np.int64(1) << np.int64(bits)) - np.int64(1)
    out = np.empty((packed.size, dimension), dtype=np.int64)
    for j in range(dimension):
        out[:, j] = ((packed >> np.int64(bits * j)) & mask) - off
    return out
