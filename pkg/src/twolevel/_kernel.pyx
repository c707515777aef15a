# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled event loop for the two-level Moran chain.

Mirrors ``_kernel_py.run_chain`` expression by expression; see that module
for the table layout.  Build with ``-ffp-contract=off`` so that no multiply-add
is fused and results stay bit-identical to the fallback.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport log1p

cnp.import_array()

cdef enum:
    BUFFER = 1024
    REBUILD = 65536
    N_ROWS = 7

cdef enum:
    F, G, XF, Q, F2, RF, RF2

IMPLEMENTATION = "cython"


cdef class _Uniforms:
    cdef object rng
    cdef double[::1] buf
    cdef Py_ssize_t i

    def __cinit__(self, rng):
        self.rng = rng
        self.buf = rng.random(BUFFER)
        self.i = 0

    cdef inline double next(self):
        if self.i == BUFFER:
            self.buf = self.rng.random(BUFFER)
            self.i = 0
        self.i += 1
        return self.buf[self.i - 1]


cdef class _State:
    cdef Py_ssize_t m, n, nobs
    cdef long long K, S1
    cdef long long[::1] counts, occ, pos
    cdef long long[:, ::1] members
    cdef double[:, :, ::1] tab
    cdef double[:, ::1] sums

    cdef void rebuild(self):
        cdef Py_ssize_t o, row, k
        cdef double acc
        for o in range(self.nobs):
            for row in range(N_ROWS):
                acc = 0.0
                for k in range(self.n + 1):
                    acc += <double>self.occ[k] * self.tab[o, row, k]
                self.sums[o, row] = acc

    cdef void move(self, Py_ssize_t g, Py_ssize_t a, Py_ssize_t b):
        cdef Py_ssize_t o, row, p, last
        cdef long long n = self.n
        for o in range(self.nobs):
            for row in range(N_ROWS):
                self.sums[o, row] += self.tab[o, row, b] - self.tab[o, row, a]
        self.K += b - a
        self.S1 += b * (n - b) - a * (n - a)
        p = self.pos[g]
        last = self.members[a, self.occ[a] - 1]
        self.members[a, p] = last
        self.pos[last] = p
        self.occ[a] -= 1
        self.members[b, self.occ[b]] = g
        self.pos[g] = self.occ[b]
        self.occ[b] += 1
        self.counts[g] = b


def run_chain(counts, Py_ssize_t n, double s, double r, double w, double time_factor,
              double horizon, tables, sample_times, rng, bint record_events=False,
              double t0=0.0):
    cdef _State st = _State()
    cdef _Uniforms uni = _Uniforms(rng)
    cdef long long[::1] cnt = np.array(counts, dtype=np.int64)
    cdef Py_ssize_t m = cnt.shape[0]
    cdef double[:, :, ::1] tab = np.ascontiguousarray(tables, dtype=np.float64)
    cdef Py_ssize_t nobs = tab.shape[0]
    cdef double[::1] samples = np.ascontiguousarray(sample_times, dtype=np.float64)
    cdef Py_ssize_t nsamp = samples.shape[0]
    cdef Py_ssize_t g, k, o, si, j, site, victim, parent, kind
    cdef long long acc
    cdef double target, x2, u, t, t_next, dt, r_ind, r_grp, total
    cdef double xbar, A, mF, mF2, tau
    cdef long long n_events = 0
    cdef bint absorbed = False

    st.m = m
    st.n = n
    st.nobs = nobs
    st.counts = cnt
    st.occ = np.zeros(n + 1, dtype=np.int64)
    st.pos = np.zeros(m, dtype=np.int64)
    st.members = np.zeros((n + 1, m), dtype=np.int64)
    st.tab = tab
    st.sums = np.zeros((nobs, N_ROWS), dtype=np.float64)
    st.K = 0
    st.S1 = 0
    for g in range(m):
        k = cnt[g]
        st.members[k, st.occ[k]] = g
        st.pos[g] = st.occ[k]
        st.occ[k] += 1
        st.K += k
        st.S1 += k * (n - k)
    st.rebuild()

    values_a = np.zeros((nobs, nsamp))
    drift_a = np.zeros((nobs, nsamp))
    qv_a = np.zeros((nobs, nsamp))
    var_a = np.zeros((nobs, nsamp))
    cdef double[:, ::1] values = values_a
    cdef double[:, ::1] drift_out = drift_a
    cdef double[:, ::1] qv_out = qv_a
    cdef double[:, ::1] var_out = var_a
    cdef double[::1] drift_int = np.zeros(nobs)
    cdef double[::1] qv_int = np.zeros(nobs)
    cdef double[::1] var_int = np.zeros(nobs)
    cdef double[::1] a_rate = np.zeros(nobs)
    cdef double[::1] c_rate = np.zeros(nobs)
    cdef double[::1] v_rate = np.zeros(nobs)
    cdef double[:, ::1] sums = st.sums

    ev_t, ev_kind, ev_a, ev_b = [], [], [], []

    t = t0
    si = 0

    # rates() inlined at both call sites below
    xbar = <double>st.K / <double>(m * n)
    A = 1.0 + r * xbar
    for o in range(nobs):
        mF = sums[o, F] / <double>m
        mF2 = sums[o, F2] / <double>m
        a_rate[o] = sums[o, G] / <double>m + w * r * (sums[o, XF] / <double>m - mF * xbar)
        c_rate[o] = (sums[o, Q] / <double>m + w * (A * mF2 - 2.0 * mF * (sums[o, RF] / <double>m) + sums[o, RF2] / <double>m)) / <double>m
        v_rate[o] = mF2 - mF * mF

    while True:
        if st.S1 == 0 and st.occ[cnt[0]] == m:
            absorbed = True
            break
        r_ind = (2.0 + s) * <double>st.S1 / <double>n
        r_grp = w * (<double>m + r * <double>st.K / <double>n)
        total = time_factor * (r_ind + r_grp)
        u = uni.next()
        t_next = t + (-log1p(-u)) / total
        while si < nsamp and samples[si] < t_next:
            tau = samples[si] - t
            for o in range(nobs):
                values[o, si] = sums[o, F] / <double>m
                drift_out[o, si] = drift_int[o] + time_factor * a_rate[o] * tau
                qv_out[o, si] = qv_int[o] + time_factor * c_rate[o] * tau
                var_out[o, si] = var_int[o] + v_rate[o] * tau
            si += 1
        if t_next > horizon:
            break
        dt = t_next - t
        for o in range(nobs):
            drift_int[o] += time_factor * a_rate[o] * dt
            qv_int[o] += time_factor * c_rate[o] * dt
            var_int[o] += v_rate[o] * dt
        t = t_next

        u = uni.next()
        if u * (r_ind + r_grp) < r_ind:
            target = uni.next() * <double>st.S1
            acc = 0
            site = -1
            for k in range(1, n):
                if st.occ[k] > 0:
                    site = k
                    acc += st.occ[k] * k * (n - k)
                    if <double>acc > target:
                        break
            j = <Py_ssize_t>(uni.next() * <double>st.occ[site])
            if j >= st.occ[site]:
                j = st.occ[site] - 1
            g = st.members[site, j]
            if uni.next() * (2.0 + s) < 1.0:
                st.move(g, site, site + 1)
                kind = 0
            else:
                st.move(g, site, site - 1)
                kind = 1
            if record_events:
                ev_t.append(t); ev_kind.append(kind); ev_a.append(g); ev_b.append(-1)
        else:
            victim = <Py_ssize_t>(uni.next() * <double>m)
            if victim >= m:
                victim = m - 1
            x2 = uni.next() * (<double>m + r * <double>st.K / <double>n)
            if x2 < <double>m:
                parent = <Py_ssize_t>x2
                if parent >= m:
                    parent = m - 1
            else:
                target = (x2 - <double>m) * <double>n / r
                acc = 0
                site = -1
                for k in range(1, n + 1):
                    if st.occ[k] > 0:
                        site = k
                        acc += st.occ[k] * k
                        if <double>acc > target:
                            break
                j = <Py_ssize_t>(uni.next() * <double>st.occ[site])
                if j >= st.occ[site]:
                    j = st.occ[site] - 1
                parent = st.members[site, j]
            if cnt[victim] != cnt[parent]:
                st.move(victim, cnt[victim], cnt[parent])
            if record_events:
                ev_t.append(t); ev_kind.append(2); ev_a.append(victim); ev_b.append(parent)
        n_events += 1
        if n_events % REBUILD == 0:
            st.rebuild()

        xbar = <double>st.K / <double>(m * n)
        A = 1.0 + r * xbar
        for o in range(nobs):
            mF = sums[o, F] / <double>m
            mF2 = sums[o, F2] / <double>m
            a_rate[o] = sums[o, G] / <double>m + w * r * (sums[o, XF] / <double>m - mF * xbar)
            c_rate[o] = (sums[o, Q] / <double>m + w * (A * mF2 - 2.0 * mF * (sums[o, RF] / <double>m) + sums[o, RF2] / <double>m)) / <double>m
            v_rate[o] = mF2 - mF * mF

    while si < nsamp:
        tau = samples[si] - t
        for o in range(nobs):
            values[o, si] = sums[o, F] / <double>m
            drift_out[o, si] = drift_int[o] + time_factor * a_rate[o] * tau
            qv_out[o, si] = qv_int[o] + time_factor * c_rate[o] * tau
            var_out[o, si] = var_int[o] + v_rate[o] * tau
        si += 1
    dt = horizon - t
    for o in range(nobs):
        drift_int[o] += time_factor * a_rate[o] * dt
        qv_int[o] += time_factor * c_rate[o] * dt
        var_int[o] += v_rate[o] * dt

    out = {
        "values": values_a,
        "drift": drift_a,
        "qv": qv_a,
        "var": var_a,
        "counts": np.asarray(cnt).copy(),
        "time": float(horizon),
        "n_events": int(n_events),
        "absorbed": bool(absorbed),
    }
    if record_events:
        out["events"] = (np.array(ev_t, dtype=float), np.array(ev_kind, dtype=np.int8),
                         np.array(ev_a, dtype=np.int64), np.array(ev_b, dtype=np.int64))
    return out
