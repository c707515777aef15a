"""Pure-Python event loop for the two-level Moran chain.

This is the fallback for the compiled ``_kernel`` extension and must stay
operation-for-operation identical to it: same uniform draws in the same
order, same floating-point expressions, same summation order.  Both consume
uniforms from ``rng.random(BUFFER)`` blocks, so a given generator state gives
bit-identical paths on either implementation.

Table rows (per observable, per lattice site ``k``):

=====  ==================================================================
F      f(k/n)
G      (k/n)(1-k/n) [ D_xx f / n - s D^- f ]           individual drift
XF     (k/n) f(k/n)
Q      (k/n)(1-k/n) [ (D^+ f)^2 + (1+s)(D^- f)^2 ] / n  individual QV
F2     f(k/n)^2
RF     (1 + r k/n) f(k/n)
RF2    (1 + r k/n) f(k/n)^2
=====  ==================================================================
"""

import math

import numpy as np

BUFFER = 1024
REBUILD = 65536
N_ROWS = 7
F, G, XF, Q, F2, RF, RF2 = range(N_ROWS)

IMPLEMENTATION = "python"


def run_chain(counts, n, s, r, w, time_factor, horizon, tables, sample_times, rng,
              record_events=False, t0=0.0):
    counts = [int(c) for c in counts]
    m = len(counts)
    tab = np.asarray(tables, dtype=float).tolist()
    nobs = len(tab)
    samples = [float(t) for t in sample_times]
    nsamp = len(samples)

    occ = [0] * (n + 1)
    members = [[0] * m for _ in range(n + 1)]
    pos = [0] * m
    K = 0
    S1 = 0
    for g in range(m):
        k = counts[g]
        members[k][occ[k]] = g
        pos[g] = occ[k]
        occ[k] += 1
        K += k
        S1 += k * (n - k)

    def rebuild():
        sums = []
        for o in range(nobs):
            row_sums = []
            for row in range(N_ROWS):
                acc = 0.0
                trow = tab[o][row]
                for k in range(n + 1):
                    acc += occ[k] * trow[k]
                row_sums.append(acc)
            sums.append(row_sums)
        return sums

    sums = rebuild()

    values = [[0.0] * nsamp for _ in range(nobs)]
    drift_out = [[0.0] * nsamp for _ in range(nobs)]
    qv_out = [[0.0] * nsamp for _ in range(nobs)]
    var_out = [[0.0] * nsamp for _ in range(nobs)]
    drift_int = [0.0] * nobs
    qv_int = [0.0] * nobs
    var_int = [0.0] * nobs
    a_rate = [0.0] * nobs
    c_rate = [0.0] * nobs
    v_rate = [0.0] * nobs

    ev_t, ev_kind, ev_a, ev_b = [], [], [], []

    buf = rng.random(BUFFER).tolist()
    bi = 0

    def rates():
        xbar = K / (m * n)
        A = 1.0 + r * xbar
        for o in range(nobs):
            so = sums[o]
            mF = so[F] / m
            mF2 = so[F2] / m
            a_rate[o] = so[G] / m + w * r * (so[XF] / m - mF * xbar)
            c_rate[o] = (so[Q] / m + w * (A * mF2 - 2.0 * mF * (so[RF] / m) + so[RF2] / m)) / m
            v_rate[o] = mF2 - mF * mF

    def record(idx, tau, t):
        dt = tau - t
        for o in range(nobs):
            values[o][idx] = sums[o][F] / m
            drift_out[o][idx] = drift_int[o] + time_factor * a_rate[o] * dt
            qv_out[o][idx] = qv_int[o] + time_factor * c_rate[o] * dt
            var_out[o][idx] = var_int[o] + v_rate[o] * dt

    def move(g, a, b):
        nonlocal K, S1
        for o in range(nobs):
            to = tab[o]
            so = sums[o]
            for row in range(N_ROWS):
                so[row] += to[row][b] - to[row][a]
        K += b - a
        S1 += b * (n - b) - a * (n - a)
        p = pos[g]
        last = members[a][occ[a] - 1]
        members[a][p] = last
        pos[last] = p
        occ[a] -= 1
        members[b][occ[b]] = g
        pos[g] = occ[b]
        occ[b] += 1
        counts[g] = b

    t = float(t0)
    si = 0
    n_events = 0
    absorbed = False
    rates()
    while True:
        if S1 == 0 and occ[counts[0]] == m:
            absorbed = True
            break
        r_ind = (2.0 + s) * S1 / n
        r_grp = w * (m + r * K / n)
        total = time_factor * (r_ind + r_grp)
        if bi == BUFFER:
            buf = rng.random(BUFFER).tolist()
            bi = 0
        u = buf[bi]
        bi += 1
        t_next = t + (-math.log1p(-u)) / total
        while si < nsamp and samples[si] < t_next:
            record(si, samples[si], t)
            si += 1
        if t_next > horizon:
            break
        dt = t_next - t
        for o in range(nobs):
            drift_int[o] += time_factor * a_rate[o] * dt
            qv_int[o] += time_factor * c_rate[o] * dt
            var_int[o] += v_rate[o] * dt
        t = t_next

        if bi == BUFFER:
            buf = rng.random(BUFFER).tolist()
            bi = 0
        u = buf[bi]
        bi += 1
        if u * (r_ind + r_grp) < r_ind:
            if bi == BUFFER:
                buf = rng.random(BUFFER).tolist()
                bi = 0
            target = buf[bi] * S1
            bi += 1
            acc = 0
            site = -1
            for k in range(1, n):
                if occ[k] > 0:
                    site = k
                    acc += occ[k] * k * (n - k)
                    if acc > target:
                        break
            if bi == BUFFER:
                buf = rng.random(BUFFER).tolist()
                bi = 0
            j = int(buf[bi] * occ[site])
            bi += 1
            if j >= occ[site]:
                j = occ[site] - 1
            g = members[site][j]
            if bi == BUFFER:
                buf = rng.random(BUFFER).tolist()
                bi = 0
            up = buf[bi] * (2.0 + s) < 1.0
            bi += 1
            if up:
                move(g, site, site + 1)
                kind = 0
            else:
                move(g, site, site - 1)
                kind = 1
            if record_events:
                ev_t.append(t), ev_kind.append(kind), ev_a.append(g), ev_b.append(-1)
        else:
            if bi == BUFFER:
                buf = rng.random(BUFFER).tolist()
                bi = 0
            victim = int(buf[bi] * m)
            bi += 1
            if victim >= m:
                victim = m - 1
            if bi == BUFFER:
                buf = rng.random(BUFFER).tolist()
                bi = 0
            x2 = buf[bi] * (m + r * K / n)
            bi += 1
            if x2 < m:
                parent = int(x2)
                if parent >= m:
                    parent = m - 1
            else:
                target = (x2 - m) * n / r
                acc = 0
                site = -1
                for k in range(1, n + 1):
                    if occ[k] > 0:
                        site = k
                        acc += occ[k] * k
                        if acc > target:
                            break
                if bi == BUFFER:
                    buf = rng.random(BUFFER).tolist()
                    bi = 0
                j = int(buf[bi] * occ[site])
                bi += 1
                if j >= occ[site]:
                    j = occ[site] - 1
                parent = members[site][j]
            if counts[victim] != counts[parent]:
                move(victim, counts[victim], counts[parent])
            if record_events:
                ev_t.append(t), ev_kind.append(2), ev_a.append(victim), ev_b.append(parent)
        n_events += 1
        if n_events % REBUILD == 0:
            sums = rebuild()
        rates()

    end = horizon
    while si < nsamp:
        record(si, samples[si], t)
        si += 1
    dt = end - t
    for o in range(nobs):
        drift_int[o] += time_factor * a_rate[o] * dt
        qv_int[o] += time_factor * c_rate[o] * dt
        var_int[o] += v_rate[o] * dt

    out = {
        "values": np.array(values, dtype=float).reshape(nobs, nsamp),
        "drift": np.array(drift_out, dtype=float).reshape(nobs, nsamp),
        "qv": np.array(qv_out, dtype=float).reshape(nobs, nsamp),
        "var": np.array(var_out, dtype=float).reshape(nobs, nsamp),
        "counts": np.array(counts, dtype=np.int64),
        "time": float(end),
        "n_events": n_events,
        "absorbed": absorbed,
    }
    if record_events:
        out["events"] = (np.array(ev_t, dtype=float), np.array(ev_kind, dtype=np.int8),
                         np.array(ev_a, dtype=np.int64), np.array(ev_b, dtype=np.int64))
    return out
