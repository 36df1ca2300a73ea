# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled twin of ``_kernels_py``.

Same operation order, same epsilons, same tie-breaking; compiled with
``-ffp-contract=off`` so no fused multiply-add creeps in and results stay
bit-identical to the NumPy fallback.
"""
import numpy as np

cimport numpy as cnp
from libc.math cimport atan2, ceil, fabs, floor, sqrt

cnp.import_array()

cdef double ZNEAR = 1e-6
cdef double DET_EPS = 1e-12
cdef double BARY_EPS = 1e-9
cdef double TWO_PI = 6.283185307179586476925286766559


cdef inline Py_ssize_t _upper_bound(const double* a, Py_ssize_t n, double v) nogil:
    # np.searchsorted(a, v, side='right')
    cdef Py_ssize_t lo = 0, hi = n, mid
    while lo < hi:
        mid = (lo + hi) >> 1
        if a[mid] <= v:
            lo = mid + 1
        else:
            hi = mid
    return lo


cdef inline Py_ssize_t _lower_bound_i64(const cnp.int64_t* a, Py_ssize_t n,
                                        cnp.int64_t v) nogil:
    cdef Py_ssize_t lo = 0, hi = n, mid
    while lo < hi:
        mid = (lo + hi) >> 1
        if a[mid] < v:
            lo = mid + 1
        else:
            hi = mid
    return lo


cdef inline Py_ssize_t _upper_bound_i64(const cnp.int64_t* a, Py_ssize_t n,
                                        cnp.int64_t v) nogil:
    cdef Py_ssize_t lo = 0, hi = n, mid
    while lo < hi:
        mid = (lo + hi) >> 1
        if a[mid] <= v:
            lo = mid + 1
        else:
            hi = mid
    return lo


def render_depth(verts, tris, double fx, double fy, double cx, double cy,
                 int width, int height, bint want_normals=False):
    """Ray-cast a camera-frame triangle mesh to a z-depth image.

    Matches ``_kernels_py.render_depth`` bit for bit; see there for the
    semantics (first-writer-wins ties, per-face camera-facing normals).
    """
    cdef cnp.ndarray[cnp.float32_t, ndim=2] depth = np.zeros(
        (height, width), dtype=np.float32)
    cdef cnp.ndarray[cnp.float32_t, ndim=3] nrm_img = None
    if want_normals:
        nrm_img = np.zeros((height, width, 3), dtype=np.float32)
    if len(tris) == 0 or len(verts) == 0:
        return depth, (nrm_img if want_normals else None)

    cdef cnp.ndarray[cnp.float64_t, ndim=2] V = np.ascontiguousarray(
        verts, dtype=np.float64)
    cdef cnp.ndarray[cnp.int32_t, ndim=2] T = np.ascontiguousarray(
        tris, dtype=np.int32)

    cdef Py_ssize_t m, M = T.shape[0]
    cdef int u, v, u_lo, u_hi, v_lo, v_hi
    cdef double ax, ay, az, bx, by, bz, cx3, cy3, cz3
    cdef double ua, va, ub, vb, uc, vc, mn, mx
    cdef double e1x, e1y, e1z, e2x, e2y, e2z, sx, sy, sz
    cdef double qx, qy, qz, nx, ny, nz, nn, gx, gy, gz
    cdef double dxv, dyv, px, py, pz, det, inv, ubv, vbv, t
    cdef float t32, n0, n1, n2, cur

    for m in range(M):
        ax = V[T[m, 0], 0]; ay = V[T[m, 0], 1]; az = V[T[m, 0], 2]
        bx = V[T[m, 1], 0]; by = V[T[m, 1], 1]; bz = V[T[m, 1], 2]
        cx3 = V[T[m, 2], 0]; cy3 = V[T[m, 2], 1]; cz3 = V[T[m, 2], 2]
        if az <= ZNEAR or bz <= ZNEAR or cz3 <= ZNEAR:
            continue

        ua = fx * ax / az + cx
        va = fy * ay / az + cy
        ub = fx * bx / bz + cx
        vb = fy * by / bz + cy
        uc = fx * cx3 / cz3 + cx
        vc = fy * cy3 / cz3 + cy
        mn = ua
        if ub < mn: mn = ub
        if uc < mn: mn = uc
        mx = ua
        if ub > mx: mx = ub
        if uc > mx: mx = uc
        u_lo = <int>ceil(mn - 1e-9)
        if u_lo < 0: u_lo = 0
        u_hi = <int>floor(mx + 1e-9)
        if u_hi > width - 1: u_hi = width - 1
        mn = va
        if vb < mn: mn = vb
        if vc < mn: mn = vc
        mx = va
        if vb > mx: mx = vb
        if vc > mx: mx = vc
        v_lo = <int>ceil(mn - 1e-9)
        if v_lo < 0: v_lo = 0
        v_hi = <int>floor(mx + 1e-9)
        if v_hi > height - 1: v_hi = height - 1
        if u_lo > u_hi or v_lo > v_hi:
            continue

        e1x = bx - ax; e1y = by - ay; e1z = bz - az
        e2x = cx3 - ax; e2y = cy3 - ay; e2z = cz3 - az
        sx = -ax; sy = -ay; sz = -az

        if want_normals:
            nx = e1y * e2z - e1z * e2y
            ny = e1z * e2x - e1x * e2z
            nz = e1x * e2y - e1y * e2x
            nn = sqrt(nx * nx + ny * ny + nz * nz)
            if nn < 1e-18:
                continue
            nx /= nn
            ny /= nn
            nz /= nn
            gx = (ax + bx + cx3) / 3.0
            gy = (ay + by + cy3) / 3.0
            gz = (az + bz + cz3) / 3.0
            if nx * gx + ny * gy + nz * gz > 0.0:
                nx = -nx; ny = -ny; nz = -nz
            n0 = <float>nx; n1 = <float>ny; n2 = <float>nz

        qx = sy * e1z - sz * e1y
        qy = sz * e1x - sx * e1z
        qz = sx * e1y - sy * e1x

        for v in range(v_lo, v_hi + 1):
            dyv = (v - cy) / fy
            for u in range(u_lo, u_hi + 1):
                dxv = (u - cx) / fx
                px = dyv * e2z - e2y
                py = e2x - dxv * e2z
                pz = dxv * e2y - dyv * e2x
                det = e1x * px + e1y * py + e1z * pz
                if fabs(det) < DET_EPS:
                    continue
                inv = 1.0 / det
                ubv = (sx * px + sy * py + sz * pz) * inv
                if ubv < -BARY_EPS or ubv > 1.0 + BARY_EPS:
                    continue
                vbv = (dxv * qx + dyv * qy + qz) * inv
                if vbv < -BARY_EPS or ubv + vbv > 1.0 + BARY_EPS:
                    continue
                t = (e2x * qx + e2y * qy + e2z * qz) * inv
                if t <= ZNEAR:
                    continue
                t32 = <float>t
                cur = depth[v, u]
                if cur == 0.0 or t32 < cur:
                    depth[v, u] = t32
                    if want_normals:
                        nrm_img[v, u, 0] = n0
                        nrm_img[v, u, 1] = n1
                        nrm_img[v, u, 2] = n2
    return depth, (nrm_img if want_normals else None)


def ppf_vote(points, normals, ref_idx, ref_rot, keys_sorted, entry_model_i,
             entry_phi, neg_cos_bounds, double dist_step, double max_dist,
             double alpha_step, int n_alpha, int n_model_points,
             int n_peaks=4):
    """Pair-feature voting; see ``_kernels_py.ppf_vote`` for the contract."""
    cdef cnp.ndarray[cnp.float64_t, ndim=2] P = np.ascontiguousarray(
        points, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] N = np.ascontiguousarray(
        normals, dtype=np.float64)
    cdef cnp.ndarray[cnp.int32_t, ndim=1] R = np.ascontiguousarray(
        ref_idx, dtype=np.int32)
    cdef cnp.ndarray[cnp.float64_t, ndim=3] RR = np.ascontiguousarray(
        ref_rot, dtype=np.float64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] K = np.ascontiguousarray(
        keys_sorted, dtype=np.int64)
    cdef cnp.ndarray[cnp.int32_t, ndim=1] EM = np.ascontiguousarray(
        entry_model_i, dtype=np.int32)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] EP = np.ascontiguousarray(
        entry_phi, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] CB = np.ascontiguousarray(
        neg_cos_bounds, dtype=np.float64)

    cdef Py_ssize_t n_refs = R.shape[0]
    cdef Py_ssize_t n_pts = P.shape[0]
    cdef Py_ssize_t nb = CB.shape[0]
    cdef Py_ssize_t n_keys = K.shape[0]
    cdef cnp.ndarray[cnp.int64_t, ndim=3] out = np.zeros(
        (n_refs, n_peaks, 3), dtype=np.int64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] acc = np.zeros(
        n_model_points * n_alpha, dtype=np.int64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] bestv = np.zeros(n_peaks,
                                                           dtype=np.int64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] besti = np.zeros(n_peaks,
                                                           dtype=np.int64)
    cdef cnp.int64_t* accp = <cnp.int64_t*>acc.data
    cdef cnp.int64_t* bvp = <cnp.int64_t*>bestv.data
    cdef cnp.int64_t* bip = <cnp.int64_t*>besti.data
    cdef const double* cbp = <const double*>CB.data
    cdef const cnp.int64_t* kp = <const cnp.int64_t*>K.data

    cdef Py_ssize_t r, i, j, e, lo, hi, flat, pos, n_acc
    cdef Py_ssize_t nb2 = nb // 2
    cdef double prx, pry, prz, nrx, nry, nrz
    cdef double dx, dy, dz, d2, dist, invd, c1, c2, c3
    cdef double pay, paz, phi_s, delta, a_real, frac
    cdef double max_d2 = max_dist * max_dist
    cdef double inv_alpha = 1.0 / alpha_step
    cdef cnp.int64_t key, db, b1, b2, b3, ab, ab2, bv
    cdef bint touched

    for r in range(n_refs):
        for pos in range(n_peaks):
            out[r, pos, 0] = -1
            out[r, pos, 1] = -1
        i = R[r]
        prx = P[i, 0]; pry = P[i, 1]; prz = P[i, 2]
        nrx = N[i, 0]; nry = N[i, 1]; nrz = N[i, 2]
        n_acc = n_model_points * n_alpha
        for j in range(n_acc):
            accp[j] = 0
        touched = False

        for j in range(n_pts):
            dx = P[j, 0] - prx
            dy = P[j, 1] - pry
            dz = P[j, 2] - prz
            d2 = dx * dx + dy * dy + dz * dz
            if d2 > max_d2 or d2 < 1e-18:
                continue
            dist = sqrt(d2)
            invd = 1.0 / dist
            c1 = (dx * nrx + dy * nry + dz * nrz) * invd
            c2 = (dx * N[j, 0] + dy * N[j, 1] + dz * N[j, 2]) * invd
            c3 = nrx * N[j, 0] + nry * N[j, 1] + nrz * N[j, 2]
            b1 = _upper_bound(cbp, nb, -c1)
            if b1 > nb - 1: b1 = nb - 1
            b2 = _upper_bound(cbp, nb, -c2)
            if b2 > nb - 1: b2 = nb - 1
            b3 = _upper_bound(cbp, nb, -c3)
            if b3 > nb - 1: b3 = nb - 1
            # skip flip-invariant pure in-plane pairs (mirrors the fallback)
            if (b3 == 0 and b1 >= nb2 - 1 and b1 <= nb2
                    and b2 >= nb2 - 1 and b2 <= nb2):
                continue
            db = <cnp.int64_t>(dist / dist_step)

            # single exact lookup: the key table is pre-spread at build time
            # (zspose.build_model files each model pair under its neighbour
            # bins), which absorbs scene-vs-model sampling jitter
            key = ((db * nb + b1) * nb + b2) * nb + b3
            lo = _lower_bound_i64(kp, n_keys, key)
            if lo == n_keys or kp[lo] != key:
                continue
            hi = _upper_bound_i64(kp, n_keys, key)

            pay = RR[r, 1, 0] * dx + RR[r, 1, 1] * dy + RR[r, 1, 2] * dz
            paz = RR[r, 2, 0] * dx + RR[r, 2, 1] * dy + RR[r, 2, 2] * dz
            phi_s = atan2(paz, pay)

            for e in range(lo, hi):
                delta = phi_s - EP[e]
                if delta < 0.0:
                    delta = delta + TWO_PI
                if delta >= TWO_PI:
                    delta = delta - TWO_PI
                a_real = delta * inv_alpha
                ab = <cnp.int64_t>a_real
                if ab > n_alpha - 1: ab = n_alpha - 1
                frac = a_real - ab
                if frac >= 0.5:
                    ab2 = ab + 1
                else:
                    ab2 = ab - 1
                if ab2 == n_alpha: ab2 = 0
                if ab2 < 0: ab2 = n_alpha - 1
                accp[EM[e] * n_alpha + ab] += 1
                accp[EM[e] * n_alpha + ab2] += 1
                touched = True

        if not touched:
            continue
        # Top-n_peaks cells by votes, ties resolved toward the lower flat
        # index: strict comparisons keep earlier cells ahead of later equals,
        # matching the fallback's stable argsort.
        for pos in range(n_peaks):
            bvp[pos] = 0
            bip[pos] = -1
        for j in range(n_acc):
            bv = accp[j]
            if bv <= bvp[n_peaks - 1]:
                continue
            pos = n_peaks - 1
            while pos > 0 and bvp[pos - 1] < bv:
                bvp[pos] = bvp[pos - 1]
                bip[pos] = bip[pos - 1]
                pos = pos - 1
            bvp[pos] = bv
            bip[pos] = j
        for pos in range(n_peaks):
            if bip[pos] < 0:
                break
            out[r, pos, 0] = bip[pos] // n_alpha
            out[r, pos, 1] = bip[pos] % n_alpha
            out[r, pos, 2] = bvp[pos]
    return out
