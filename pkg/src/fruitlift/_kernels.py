"""Numba kernels for batched ray marching over dense voxel grids.

Grids are passed flat as (n_vertices, C) arrays with vertex index
``(i * ny + j) * nz + k``.  Raw values are trilinearly interpolated and then
activated: softplus for density, sigmoid for color, identity for the semantic
logit and L2 normalisation for instance embeddings.
"""
import numpy as np
from numba import njit

WANT_COLOR = 1
WANT_SEM = 2
WANT_INST = 4


@njit(cache=True, inline="always")
def _softplus(x):
    if x > 20.0:
        return x + np.log1p(np.exp(-x))
    return np.log1p(np.exp(x))


@njit(cache=True, inline="always")
def _sigmoid(x):
    if x >= 0:
        return 1.0 / (1.0 + np.exp(-x))
    e = np.exp(x)
    return e / (1.0 + e)


@njit(cache=True)
def _corners(px, py, pz, bmin, inv_step, res, idx, wts):
    """Fill 8 corner indices/weights; returns False when the point is outside the grid."""
    nx, ny, nz = res[0], res[1], res[2]
    u = (px - bmin[0]) * inv_step[0]
    v = (py - bmin[1]) * inv_step[1]
    w = (pz - bmin[2]) * inv_step[2]
    if u < 0.0 or v < 0.0 or w < 0.0 or u > nx - 1 or v > ny - 1 or w > nz - 1:
        return False
    i0 = min(int(u), nx - 2)
    j0 = min(int(v), ny - 2)
    k0 = min(int(w), nz - 2)
    fu = u - i0
    fv = v - j0
    fw = w - k0
    c = 0
    for di in range(2):
        wu = fu if di else 1.0 - fu
        for dj in range(2):
            wv = fv if dj else 1.0 - fv
            for dk in range(2):
                ww = fw if dk else 1.0 - fw
                idx[c] = ((i0 + di) * ny + (j0 + dj)) * nz + (k0 + dk)
                wts[c] = wu * wv * ww
                c += 1
    return True


@njit(cache=True)
def _sample_ts(tn, tf, K, jitter, r, ts, deltas):
    step = (tf - tn) / K
    for k in range(K):
        u = jitter[r, k] if jitter.shape[0] > 0 else 0.5
        ts[k] = tn + (k + u) * step
    for k in range(K - 1):
        deltas[k] = ts[k + 1] - ts[k]
    deltas[K - 1] = tf - ts[K - 1]


@njit(cache=True, fastmath={"reassoc", "contract", "arcp"})
def march_forward(origins, dirs, tnear, tfar, jitter, K,
                  dens, col, sem, inst, bmin, inv_step, res, bg, want, t_stop,
                  out_c, out_s, out_i, out_acc, out_res, out_w, out_t, out_delta, record):
    n_rays = origins.shape[0]
    D = inst.shape[1]
    idx = np.empty(8, np.int64)
    wts = np.empty(8)
    ts = np.empty(K)
    deltas = np.empty(K)
    raw_e = np.empty(D)
    for r in range(n_rays):
        _sample_ts(tnear[r], tfar[r], K, jitter, r, ts, deltas)
        if record:
            for k in range(K):
                out_t[r, k] = ts[k]
                out_delta[r, k] = deltas[k]
                out_w[r, k] = 0.0
        T = 1.0
        acc = 0.0
        c0 = 0.0
        c1 = 0.0
        c2 = 0.0
        s_acc = 0.0
        for d in range(D):
            out_i[r, d] = 0.0
        for k in range(K):
            px = origins[r, 0] + ts[k] * dirs[r, 0]
            py = origins[r, 1] + ts[k] * dirs[r, 1]
            pz = origins[r, 2] + ts[k] * dirs[r, 2]
            inside = _corners(px, py, pz, bmin, inv_step, res, idx, wts)
            raw_d = 0.0
            if inside:
                for c in range(8):
                    raw_d += wts[c] * dens[idx[c], 0]
            tau = _softplus(raw_d) * deltas[k]
            alpha = -np.expm1(-tau)
            w = T * alpha
            if record:
                out_w[r, k] = w
            acc += w
            if want & WANT_COLOR:
                r0 = 0.0
                r1 = 0.0
                r2 = 0.0
                if inside:
                    for c in range(8):
                        r0 += wts[c] * col[idx[c], 0]
                        r1 += wts[c] * col[idx[c], 1]
                        r2 += wts[c] * col[idx[c], 2]
                c0 += w * _sigmoid(r0)
                c1 += w * _sigmoid(r1)
                c2 += w * _sigmoid(r2)
            if want & WANT_SEM:
                rs = 0.0
                if inside:
                    for c in range(8):
                        rs += wts[c] * sem[idx[c], 0]
                s_acc += w * rs
            if want & WANT_INST and inside:
                for d in range(D):
                    raw_e[d] = 0.0
                for c in range(8):
                    wc = wts[c]
                    row = idx[c]
                    for d in range(D):
                        raw_e[d] += wc * inst[row, d]
                nrm = 0.0
                for d in range(D):
                    nrm += raw_e[d] * raw_e[d]
                nrm = np.sqrt(nrm)
                if nrm > 0.0:
                    for d in range(D):
                        out_i[r, d] += w * raw_e[d] / nrm
            T *= np.exp(-tau)
            if T < t_stop:
                break
        out_c[r, 0] = c0 + T * bg[0]
        out_c[r, 1] = c1 + T * bg[1]
        out_c[r, 2] = c2 + T * bg[2]
        out_s[r] = s_acc
        out_acc[r] = acc
        out_res[r] = T


@njit(cache=True, inline="always")
def _touch(v, touched, touched_list, n_touched):
    if touched[v] == 0:
        touched[v] = 1
        touched_list[n_touched[0]] = v
        n_touched[0] += 1


@njit(cache=True, fastmath={"reassoc", "contract", "arcp"})
def march_backward(origins, dirs, tnear, tfar, jitter, K,
                   dens, col, sem, inst, bmin, inv_step, res, bg, t_stop,
                   g_c, g_s, g_i, train, block,
                   grad_d, grad_c, grad_s, grad_i, touched, touched_list, n_touched,
                   fused, tgt_c, tgt_s, coef_c, coef_s, out_c, out_s):
    """Accumulate parameter gradients of sum_r <g, render(r)> into the grad buffers.

    ``train`` bits: 1 density, 2 color, 4 semantic, 8 instance.  With ``block``
    the density grid only receives the color term, so semantic and instance
    gradients stop at their own grids.

    With ``fused`` the upstream gradients are not read but computed per ray
    from the recomputed forward pass: ``g_c = coef_c * (C - tgt_c)`` and
    ``g_s = coef_s * (sigmoid(S) - tgt_s)``.  They are written into ``g_c`` and
    ``g_s`` and the rendered values into ``out_c`` and ``out_s``.
    """
    n_rays = origins.shape[0]
    D = inst.shape[1]
    tr_d = (train & 1) != 0
    full = tr_d and not block
    want_c = (train & 3) != 0
    want_s = (train & 4) != 0 or full
    want_i = (train & 8) != 0 or full
    idx = np.empty((K, 8), np.int64)
    wts = np.empty((K, 8))
    inside = np.zeros(K, np.bool_)
    ts = np.empty(K)
    deltas = np.empty(K)
    w_k = np.empty(K)
    raw_d = np.empty(K)
    cols = np.empty((K, 3))
    sems = np.empty(K)
    raw_e = np.empty((K, D))
    nrm_e = np.empty(K)
    ge = np.empty(D)
    suf_e = np.empty(D)
    for r in range(n_rays):
        _sample_ts(tnear[r], tfar[r], K, jitter, r, ts, deltas)
        T = 1.0
        n_proc = 0
        for k in range(K):
            px = origins[r, 0] + ts[k] * dirs[r, 0]
            py = origins[r, 1] + ts[k] * dirs[r, 1]
            pz = origins[r, 2] + ts[k] * dirs[r, 2]
            ins = _corners(px, py, pz, bmin, inv_step, res, idx[k], wts[k])
            inside[k] = ins
            rd = 0.0
            if ins:
                for c in range(8):
                    rd += wts[k, c] * dens[idx[k, c], 0]
            raw_d[k] = rd
            tau = _softplus(rd) * deltas[k]
            w_k[k] = T * (-np.expm1(-tau))
            if want_c:
                for ch in range(3):
                    rc = 0.0
                    if ins:
                        for c in range(8):
                            rc += wts[k, c] * col[idx[k, c], ch]
                    cols[k, ch] = _sigmoid(rc)
            if want_s:
                rs = 0.0
                if ins:
                    for c in range(8):
                        rs += wts[k, c] * sem[idx[k, c], 0]
                sems[k] = rs
            if want_i:
                nn = 0.0
                for d in range(D):
                    re = 0.0
                    if ins:
                        for c in range(8):
                            re += wts[k, c] * inst[idx[k, c], d]
                    raw_e[k, d] = re
                    nn += re * re
                nrm_e[k] = np.sqrt(nn)
            T *= np.exp(-tau)
            n_proc = k + 1
            if T < t_stop:
                break
        s0 = T * bg[0]
        s1 = T * bg[1]
        s2 = T * bg[2]
        if fused:
            f0 = s0
            f1 = s1
            f2 = s2
            fs = 0.0
            for k in range(n_proc):
                if want_c:
                    f0 += w_k[k] * cols[k, 0]
                    f1 += w_k[k] * cols[k, 1]
                    f2 += w_k[k] * cols[k, 2]
                if want_s:
                    fs += w_k[k] * sems[k]
            out_c[r, 0] = f0
            out_c[r, 1] = f1
            out_c[r, 2] = f2
            out_s[r] = fs
            g_c[r, 0] = coef_c * (f0 - tgt_c[r, 0])
            g_c[r, 1] = coef_c * (f1 - tgt_c[r, 1])
            g_c[r, 2] = coef_c * (f2 - tgt_c[r, 2])
            g_s[r] = coef_s * (_sigmoid(fs) - tgt_s[r])
        suf_s = 0.0
        for d in range(D):
            suf_e[d] = 0.0
        T_next = T
        for k in range(n_proc - 1, -1, -1):
            w = w_k[k]
            # d w_k / d tau_k = T_{k+1};  d w_j / d tau_k = -w_j for j > k
            dtau = 0.0
            if want_c:
                c0 = cols[k, 0]
                c1 = cols[k, 1]
                c2 = cols[k, 2]
                dtau = (g_c[r, 0] * (T_next * c0 - s0) + g_c[r, 1] * (T_next * c1 - s1)
                        + g_c[r, 2] * (T_next * c2 - s2))
                if train & 2 and inside[k]:
                    a0 = w * g_c[r, 0] * c0 * (1.0 - c0)
                    a1 = w * g_c[r, 1] * c1 * (1.0 - c1)
                    a2 = w * g_c[r, 2] * c2 * (1.0 - c2)
                    for c in range(8):
                        v = idx[k, c]
                        wc = wts[k, c]
                        grad_c[v, 0] += wc * a0
                        grad_c[v, 1] += wc * a1
                        grad_c[v, 2] += wc * a2
                        _touch(v, touched, touched_list, n_touched)
                s0 += w * c0
                s1 += w * c1
                s2 += w * c2
            if want_s:
                if full:
                    dtau += g_s[r] * (T_next * sems[k] - suf_s)
                suf_s += w * sems[k]
                if train & 4 and inside[k]:
                    gs = w * g_s[r]
                    for c in range(8):
                        v = idx[k, c]
                        grad_s[v, 0] += wts[k, c] * gs
                        _touch(v, touched, touched_list, n_touched)
            if want_i:
                inv = 1.0 / nrm_e[k] if nrm_e[k] > 0.0 else 0.0
                if full:
                    for d in range(D):
                        dtau += g_i[r, d] * (T_next * raw_e[k, d] * inv - suf_e[d])
                for d in range(D):
                    suf_e[d] += w * raw_e[k, d] * inv
                if train & 8 and inside[k] and nrm_e[k] > 0.0:
                    dot = 0.0
                    for d in range(D):
                        ge[d] = w * g_i[r, d]
                        dot += ge[d] * raw_e[k, d] * inv
                    for d in range(D):
                        ge[d] = (ge[d] - raw_e[k, d] * inv * dot) * inv
                    for c in range(8):
                        v = idx[k, c]
                        wc = wts[k, c]
                        for d in range(D):
                            grad_i[v, d] += wc * ge[d]
                        _touch(v, touched, touched_list, n_touched)
            if tr_d and inside[k]:
                gd = dtau * deltas[k] * _sigmoid(raw_d[k])
                if gd != 0.0:
                    for c in range(8):
                        v = idx[k, c]
                        grad_d[v, 0] += wts[k, c] * gd
                        _touch(v, touched, touched_list, n_touched)
            T_next += w


@njit(cache=True)
def sparse_sq_norm(grad, touched_list, n):
    s = 0.0
    C = grad.shape[1]
    for a in range(n):
        v = touched_list[a]
        for ch in range(C):
            s += grad[v, ch] * grad[v, ch]
    return s


@njit(cache=True)
def sparse_step(params, grad, touched_list, n, lr):
    """params -= lr * grad on touched vertices, then zero those grad rows."""
    C = grad.shape[1]
    for a in range(n):
        v = touched_list[a]
        for ch in range(C):
            params[v, ch] -= lr * grad[v, ch]
            grad[v, ch] = 0.0


@njit(cache=True)
def clear_touched(touched, touched_list, n):
    for a in range(n):
        touched[touched_list[a]] = 0
