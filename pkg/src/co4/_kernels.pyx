# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops.  Each function matches its twin in ``_fallback.py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport cos, sin, tanh, fabs, INFINITY

cnp.import_array()

cdef double GRAVITY = 9.8
cdef double MASSCART = 1.0
cdef double MASSPOLE = 0.1
cdef double LENGTH = 0.5
cdef double FORCE_MAG = 10.0
cdef double X_LIMIT = 2.4
cdef double THETA_LIMIT = 12 * 2 * 3.141592653589793 / 360


cdef inline bint _better(double sa, Py_ssize_t ia, double sb, Py_ssize_t ib) nogil:
    # rank order: higher score first, lower index breaks ties
    return sa > sb or (sa == sb and ia < ib)


cdef void _sift_down(double* hs, Py_ssize_t* hi, Py_ssize_t size, Py_ssize_t pos) nogil:
    # min-heap on rank order: root is the worst of the kept elements
    cdef Py_ssize_t child, worst
    cdef double ts
    cdef Py_ssize_t ti
    while True:
        child = 2 * pos + 1
        if child >= size:
            break
        worst = child
        if child + 1 < size and _better(hs[child], hi[child], hs[child + 1], hi[child + 1]):
            worst = child + 1
        if _better(hs[pos], hi[pos], hs[worst], hi[worst]):
            ts = hs[pos]; hs[pos] = hs[worst]; hs[worst] = ts
            ti = hi[pos]; hi[pos] = hi[worst]; hi[worst] = ti
            pos = worst
        else:
            break


def topk_rows(double[:, ::1] scores, Py_ssize_t k):
    cdef Py_ssize_t b = scores.shape[0], n = scores.shape[1]
    out = np.empty((b, k), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] o = out
    cdef double[::1] hs = np.empty(k)
    cdef Py_ssize_t[::1] hi = np.empty(k, dtype=np.intp)
    cdef Py_ssize_t r, j, size, pos, end
    cdef double ts
    cdef Py_ssize_t ti
    with nogil:
        for r in range(b):
            size = 0
            for j in range(n):
                if size < k:
                    hs[size] = scores[r, j]
                    hi[size] = j
                    size += 1
                    if size == k:
                        pos = k // 2
                        while pos > 0:
                            pos -= 1
                            _sift_down(&hs[0], &hi[0], k, pos)
                elif _better(scores[r, j], j, hs[0], hi[0]):
                    hs[0] = scores[r, j]
                    hi[0] = j
                    _sift_down(&hs[0], &hi[0], k, 0)
            # heap-sort the kept elements into rank order, best first
            end = k
            while end > 1:
                end -= 1
                ts = hs[0]; hs[0] = hs[end]; hs[end] = ts
                ti = hi[0]; hi[0] = hi[end]; hi[end] = ti
                _sift_down(&hs[0], &hi[0], end, 0)
            for j in range(k):
                o[r, j] = hi[j]
    return out


def modulate_projection(double[::1] ql, double[::1] kl, double[::1] vl,
                        double[::1] qx, double[::1] kx, double cap):
    cdef Py_ssize_t n = ql.shape[0], i
    qm_a = np.empty(n); km_a = np.empty(n); vm_a = np.empty(n)
    cdef double[::1] qm = qm_a, km = km_a, vm = vm_a
    cdef double v, raw
    with nogil:
        for i in range(n):
            qm[i] = ql[i] + ql[i] * kx[i]
            km[i] = kl[i] + kl[i] * qx[i]
            v = vl[i]
            raw = v * v + 2.0 * v + qm[i] * km[i] * (1.0 + fabs(v))
            if raw < 0.0:
                raw = 0.0
            elif raw > cap:
                raw = cap
            vm[i] = raw
    return qm_a, km_a, vm_a


def modulate_normal(double[::1] ql, double[::1] kl, double[::1] vl,
                    double[::1] qx, double[::1] kx, double[::1] vx, double[::1] mu):
    """Latents and ``mu`` may be shorter than the token arrays; they repeat."""
    cdef Py_ssize_t n = qx.shape[0], i, li, mi
    cdef Py_ssize_t lp = ql.shape[0], mp = mu.shape[0]
    qm_a = np.empty(n); km_a = np.empty(n); vm_a = np.empty(n)
    cdef double[::1] qm = qm_a, km = km_a, vm = vm_a
    cdef double m, qxm, kxm, x
    with nogil:
        for i in range(n):
            li = i % lp
            mi = i % mp
            m = mu[mi]
            qxm = qx[i] + m
            kxm = kx[i] + m
            qm[i] = qxm + ql[li] * kxm
            km[i] = kxm + kl[li] * qxm
            x = vx[i]
            vm[i] = x * x + 2.0 * x + (qm[i] + m) * (km[i] + m) * (1.0 + fabs(vl[li]))
    return qm_a, km_a, vm_a


def lif_simulate(double[:, ::1] i_s, double[:, ::1] i_c, double[:, ::1] i_u,
                 Py_ssize_t bin_steps, Py_ssize_t n_steps, double dt,
                 double tau_s, double c_s, double e_l, double b, double v_th0,
                 double th_inc, double th_tau, double v_reset, double tau_w,
                 double current_scale, double leak_sign):
    cdef Py_ssize_t n = i_s.shape[0], i, step, col
    v_a = np.full(n, e_l); w_a = np.zeros(n); th_a = np.full(n, v_th0)
    vmin_a = np.full(n, e_l); over_a = np.full(n, -np.inf)
    drive_a = np.zeros(n)
    cdef double[::1] v = v_a, w = w_a, th = th_a, vmin = vmin_a, over = over_a, drive = drive_a
    cdef double s, c, u, a
    spikes_n = []
    spikes_t = []
    for step in range(n_steps):
        if step % bin_steps == 0:
            col = step // bin_steps
            for i in range(n):
                s = i_s[i, col]; c = i_c[i, col]; u = i_u[i, col]
                a = fabs(s)
                drive[i] = current_scale * (s + c * (0.1 + a) + c * u * (2.0 + a)) / c_s
        for i in range(n):
            v[i] = v[i] + dt * (leak_sign * (v[i] - e_l) / tau_s + drive[i] - w[i] / c_s)
            w[i] = w[i] - dt * w[i] / tau_w
            th[i] = th[i] - dt * (th[i] - v_th0) / th_tau
            if v[i] < vmin[i]:
                vmin[i] = v[i]
            if v[i] - th[i] > over[i]:
                over[i] = v[i] - th[i]
            if v[i] >= th[i]:
                spikes_n.append(i)
                spikes_t.append((step + 1) * dt)
                v[i] = v_reset
                th[i] += th_inc
                w[i] += b
    return (np.asarray(spikes_n, dtype=np.int64), np.asarray(spikes_t, dtype=np.float64),
            vmin_a, over_a, v_a, w_a, th_a)


cdef inline void _cp_step(double* st, double action, double dt) nogil:
    cdef double x = st[0], xd = st[1], th = st[2], thd = st[3]
    cdef double total = MASSCART + MASSPOLE
    cdef double pml = MASSPOLE * LENGTH
    cdef double c = cos(th), s = sin(th)
    cdef double tmp = (FORCE_MAG * action + pml * thd * thd * s) / total
    cdef double tha = (GRAVITY * s - c * tmp) / (LENGTH * (4.0 / 3.0 - MASSPOLE * c * c / total))
    cdef double xa = tmp - pml * tha * c / total
    st[0] = x + dt * xd
    st[1] = xd + dt * xa
    st[2] = th + dt * thd
    st[3] = thd + dt * tha


def cartpole_step(double[:, ::1] state, double[::1] action, double dt):
    out = np.array(state, dtype=np.float64, copy=True)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i
    for i in range(o.shape[0]):
        _cp_step(&o[i, 0], action[i], dt)
    return out


cdef inline void _observe(double* st, double[:, :, ::1] noise, Py_ssize_t e, Py_ssize_t t,
                          Py_ssize_t n_noise, double* raw) nogil:
    cdef Py_ssize_t h = n_noise // 2, j
    for j in range(h):
        raw[j] = noise[e, t, j]
    raw[h] = st[0]
    raw[h + 1] = st[1]
    raw[h + 2] = cos(st[2])
    raw[h + 3] = sin(st[2])
    raw[h + 4] = st[3]
    for j in range(h, n_noise):
        raw[5 + j] = noise[e, t, j]


cdef double _co4_out(double[::1] th, Py_ssize_t hd, Py_ssize_t dd, Py_ssize_t md,
                     double* obs, double* prev, double act, double dt, Py_ssize_t ns,
                     double* kbuf, double* vbuf, double* mbuf, double* hbuf) nogil:
    cdef Py_ssize_t wk1 = 0, bk1 = 3 * hd, wk2 = bk1 + hd, wv1 = wk2 + hd * dd
    cdef Py_ssize_t bv1 = wv1 + hd, wv2 = bv1 + hd, qo = wv2 + hd * dd
    cdef Py_ssize_t wo = qo + md * dd, bo = wo + md * dd
    cdef Py_ssize_t i, j, d, hh
    cdef double acc, r, c, z, out
    for j in range(md * dd):
        mbuf[j] = 0.0
    for i in range(ns):
        for hh in range(hd):
            hbuf[hh] = tanh(obs[i] * th[wk1 + hh] + (obs[i] - prev[i]) / dt * th[wk1 + hd + hh]
                            + act * th[wk1 + 2 * hd + hh] + th[bk1 + hh])
        for d in range(dd):
            acc = 0.0
            for hh in range(hd):
                acc = acc + hbuf[hh] * th[wk2 + hh * dd + d]
            kbuf[d] = acc
        for hh in range(hd):
            hbuf[hh] = tanh(obs[i] * th[wv1 + hh] + th[bv1 + hh])
        for d in range(dd):
            acc = 0.0
            for hh in range(hd):
                acc = acc + hbuf[hh] * th[wv2 + hh * dd + d]
            vbuf[d] = acc
        for j in range(md):
            for d in range(dd):
                r = kbuf[d]
                c = th[qo + j * dd + d] * vbuf[d]
                z = r * r + 2.0 * r + c * (1.0 + fabs(r))
                if z < 0.0:
                    z = 0.0
                elif z > 6.0:
                    z = 6.0
                mbuf[j * dd + d] += z
    out = 0.0
    for j in range(md * dd):
        out = out + (mbuf[j] / ns) * th[wo + j]
    return out + th[bo]


cdef double _mlp_out(double[::1] th, Py_ssize_t hd, double* obs, Py_ssize_t ns, double* hbuf) nogil:
    cdef Py_ssize_t i, hh
    cdef double acc, out = 0.0
    for hh in range(hd):
        acc = 0.0
        for i in range(ns):
            acc = acc + obs[i] * th[i * hd + hh]
        hbuf[hh] = tanh(acc + th[ns * hd + hh])
    for hh in range(hd):
        out = out + hbuf[hh] * th[ns * hd + hd + hh]
    return out + th[ns * hd + 2 * hd]


def rollout_population(str kind, double[:, ::1] theta, tuple dims, double[:, ::1] init_states,
                       double[:, :, ::1] noise, cnp.int64_t[::1] perm, Py_ssize_t max_steps, double dt):
    cdef Py_ssize_t p_n = theta.shape[0], n_ep = init_states.shape[0]
    cdef Py_ssize_t n_noise = noise.shape[2]
    cdef Py_ssize_t ns = 5 + n_noise
    cdef bint is_co4 = kind == "co4"
    cdef Py_ssize_t hd, dd = 0, md = 0
    if is_co4:
        hd, dd, md = dims
    else:
        (hd,) = dims
    returns_a = np.zeros((p_n, n_ep))
    cdef double[:, ::1] returns = returns_a
    cdef double[::1] st = np.empty(4)
    cdef double[::1] raw = np.empty(ns), obs = np.empty(ns), prev = np.empty(ns)
    cdef double[::1] kbuf = np.empty(max(dd, 1)), vbuf = np.empty(max(dd, 1))
    cdef double[::1] mbuf = np.empty(max(md * dd, 1)), hbuf = np.empty(max(hd, 1))
    cdef Py_ssize_t p, e, t, i
    cdef double act, out
    cdef double[::1] th
    for p in range(p_n):
        th = theta[p]
        for e in range(n_ep):
            for i in range(4):
                st[i] = init_states[e, i]
            act = 0.0
            for t in range(max_steps):
                _observe(&st[0], noise, e, t, n_noise, &raw[0])
                for i in range(ns):
                    obs[i] = raw[perm[i]]
                if t == 0:
                    for i in range(ns):
                        prev[i] = obs[i]
                if is_co4:
                    out = _co4_out(th, hd, dd, md, &obs[0], &prev[0], act, dt, ns,
                                   &kbuf[0], &vbuf[0], &mbuf[0], &hbuf[0])
                else:
                    out = _mlp_out(th, hd, &obs[0], ns, &hbuf[0])
                act = 1.0 if out > 0.0 else -1.0
                for i in range(ns):
                    prev[i] = obs[i]
                _cp_step(&st[0], act, dt)
                returns[p, e] += 1.0
                if fabs(st[2]) > THETA_LIMIT or fabs(st[0]) > X_LIMIT:
                    break
    return returns_a
