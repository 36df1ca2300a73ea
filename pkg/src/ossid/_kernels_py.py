"""Pure-NumPy fallback for the two hot kernels.

The compiled extension (``ossid._kernels``) implements exactly the same
arithmetic in the same order, so results are bit-identical between the two
paths.  Keep any change here in lockstep with ``_kernels.pyx``: same operation
order, same epsilons, same tie-breaking.  Both paths work in float64 and only
round depth/normal outputs to float32 at the buffer write.
"""
import numpy as np

# Shared numeric guards.  ZNEAR rejects geometry at or behind the camera
# plane, DET_EPS rejects rays parallel to a triangle, BARY_EPS gives the
# barycentric inside test a hair of slack so shared edges don't drop pixels.
ZNEAR = 1e-6
DET_EPS = 1e-12
BARY_EPS = 1e-9


def render_depth(verts, tris, fx, fy, cx, cy, width, height, want_normals=False):
    """Ray-cast a triangle mesh in camera frame to a z-depth image.

    Every pixel ray is (.(u-cx)/fx, (v-cy)/fy, 1).; depth is the ray
    parameter t, i.e. the camera-space z of the hit point.  Pixels with no
    hit stay 0.  Triangles with any vertex at z <= ZNEAR are skipped whole.
    Ties in depth go to the lower triangle index (first writer wins).

    Returns (depth float32 (H,W), normals float32 (H,W,3) or None).  Normals
    are per-face, unit length, flipped to point toward the camera.
    """
    depth = np.zeros((height, width), dtype=np.float32)
    normals = np.zeros((height, width, 3), dtype=np.float32) if want_normals else None
    if len(tris) == 0 or len(verts) == 0:
        return depth, normals

    verts = np.ascontiguousarray(verts, dtype=np.float64)
    tris = np.ascontiguousarray(tris, dtype=np.int32)

    for m in range(len(tris)):
        a = verts[tris[m, 0]]
        b = verts[tris[m, 1]]
        c = verts[tris[m, 2]]
        if a[2] <= ZNEAR or b[2] <= ZNEAR or c[2] <= ZNEAR:
            continue

        # Screen bounding box of the projected triangle, clipped to the image.
        ua = fx * a[0] / a[2] + cx
        va = fy * a[1] / a[2] + cy
        ub = fx * b[0] / b[2] + cx
        vb = fy * b[1] / b[2] + cy
        uc = fx * c[0] / c[2] + cx
        vc = fy * c[1] / c[2] + cy
        u_lo = max(0, int(np.ceil(min(ua, ub, uc) - 1e-9)))
        u_hi = min(width - 1, int(np.floor(max(ua, ub, uc) + 1e-9)))
        v_lo = max(0, int(np.ceil(min(va, vb, vc) - 1e-9)))
        v_hi = min(height - 1, int(np.floor(max(va, vb, vc) + 1e-9)))
        if u_lo > u_hi or v_lo > v_hi:
            continue

        e1 = b - a
        e2 = c - a

        if want_normals:
            nx = e1[1] * e2[2] - e1[2] * e2[1]
            ny = e1[2] * e2[0] - e1[0] * e2[2]
            nz = e1[0] * e2[1] - e1[1] * e2[0]
            nn = np.sqrt(nx * nx + ny * ny + nz * nz)
            if nn < 1e-18:
                continue
            nx /= nn
            ny /= nn
            nz /= nn
            gx = (a[0] + b[0] + c[0]) / 3.0
            gy = (a[1] + b[1] + c[1]) / 3.0
            gz = (a[2] + b[2] + c[2]) / 3.0
            if nx * gx + ny * gy + nz * gz > 0.0:
                nx = -nx
                ny = -ny
                nz = -nz
            n32 = np.array([nx, ny, nz], dtype=np.float32)

        # Moeller-Trumbore against rays d = (dx, dy, 1) from the origin,
        # vectorised over the bbox pixel block.
        dx = (np.arange(u_lo, u_hi + 1, dtype=np.float64) - cx) / fx
        dy = (np.arange(v_lo, v_hi + 1, dtype=np.float64) - cy) / fy
        dx = dx[None, :]
        dy = dy[:, None]

        px = dy * e2[2] - e2[1]
        py = e2[0] - dx * e2[2]
        pz = dx * e2[1] - dy * e2[0]
        det = e1[0] * px + e1[1] * py + e1[2] * pz
        hit = np.abs(det) >= DET_EPS
        det = np.where(hit, det, 1.0)
        inv = 1.0 / det
        # s = origin - a
        ub_ = (-a[0] * px + -a[1] * py + -a[2] * pz) * inv
        hit &= (ub_ >= -BARY_EPS) & (ub_ <= 1.0 + BARY_EPS)
        qx = -a[1] * e1[2] - -a[2] * e1[1]
        qy = -a[2] * e1[0] - -a[0] * e1[2]
        qz = -a[0] * e1[1] - -a[1] * e1[0]
        vb_ = (dx * qx + dy * qy + qz) * inv
        hit &= (vb_ >= -BARY_EPS) & (ub_ + vb_ <= 1.0 + BARY_EPS)
        t = (e2[0] * qx + e2[1] * qy + e2[2] * qz) * inv
        hit &= t > ZNEAR
        if not hit.any():
            continue

        t32 = t.astype(np.float32)
        blk = depth[v_lo:v_hi + 1, u_lo:u_hi + 1]
        upd = hit & ((blk == 0.0) | (t32 < blk))
        blk[upd] = t32[upd]
        if want_normals:
            normals[v_lo:v_hi + 1, u_lo:u_hi + 1][upd] = n32
    return depth, normals


def ppf_vote(points, normals, ref_idx, ref_rot, keys_sorted, entry_model_i,
             entry_phi, neg_cos_bounds, dist_step, max_dist, alpha_step,
             n_alpha, n_model_points, n_peaks=4):
    """Pair-feature voting: top accumulator peaks per reference point.

    For each scene reference point r, every neighbour within max_dist forms a
    pair; the quantised pair feature is hashed and looked up in the sorted
    model key table, and each matching model entry casts one vote into an
    (n_model_points x n_alpha) accumulator at alpha = phi_scene - phi_model.
    Output is (n_refs, n_peaks, 3) int64 rows [model point, alpha bin, votes]:
    the n_peaks highest accumulator cells per reference, ordered by votes
    descending with ties broken by flat cell index ascending.  Unused rows
    stay (-1, -1, 0).

    The key table is pre-spread at build time (each model pair filed under
    its neighbouring bins, see zspose.build_model), so one exact search per
    scene pair is enough to absorb quantization jitter.  Each entry's alpha
    vote is cast into the hit bin and its nearest neighbour for the same
    reason.  Without the spreading most true correspondences miss the table
    entirely and near-symmetric false poses win the vote.

    neg_cos_bounds holds -cos of the angle-bin upper edges so that binning is
    a single searchsorted instead of an acos per pair.
    """
    n_refs = len(ref_idx)
    out = np.zeros((n_refs, n_peaks, 3), dtype=np.int64)
    out[:, :, 0] = -1
    out[:, :, 1] = -1
    nb = len(neg_cos_bounds)
    max_d2 = max_dist * max_dist
    two_pi = 2.0 * np.pi
    inv_alpha = 1.0 / alpha_step

    for r in range(n_refs):
        i = int(ref_idx[r])
        pr = points[i]
        nr = normals[i]
        d = points - pr
        d2 = d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2]
        sel = np.nonzero((d2 <= max_d2) & (d2 >= 1e-18))[0]
        if sel.size == 0:
            continue
        dv = d[sel]
        ns = normals[sel]
        dist = np.sqrt(d2[sel])
        invd = 1.0 / dist

        c1 = (dv[:, 0] * nr[0] + dv[:, 1] * nr[1] + dv[:, 2] * nr[2]) * invd
        c2 = (dv[:, 0] * ns[:, 0] + dv[:, 1] * ns[:, 1] + dv[:, 2] * ns[:, 2]) * invd
        c3 = nr[0] * ns[:, 0] + nr[1] * ns[:, 1] + nr[2] * ns[:, 2]
        b1 = np.minimum(np.searchsorted(neg_cos_bounds, -c1, side="right"), nb - 1)
        b2 = np.minimum(np.searchsorted(neg_cos_bounds, -c2, side="right"), nb - 1)
        b3 = np.minimum(np.searchsorted(neg_cos_bounds, -c3, side="right"), nb - 1)
        # pure in-plane pairs are flip-invariant and carry no pose constraint;
        # the model hash drops them too (see zspose.build_model)
        nb2 = nb // 2
        planar = ((b3 == 0) & (b1 >= nb2 - 1) & (b1 <= nb2)
                  & (b2 >= nb2 - 1) & (b2 <= nb2))
        keep = np.nonzero(~planar)[0]
        if keep.size == 0:
            continue
        db = (dist[keep] / dist_step).astype(np.int64)
        keys = ((db * nb + b1[keep]) * nb + b2[keep]) * nb + b3[keep]
        lo = np.searchsorted(keys_sorted, keys, side="left")
        hi = np.searchsorted(keys_sorted, keys, side="right")
        cnt = hi - lo
        slot = np.nonzero(cnt > 0)[0]
        if slot.size == 0:
            continue

        # Scene-side alpha angle: rotate d into the aligned frame of the
        # reference (normal on +x), take atan2 of the (z, y) components.
        ri = ref_rot[r]
        dvk = dv[keep]
        pay = ri[1, 0] * dvk[:, 0] + ri[1, 1] * dvk[:, 1] + ri[1, 2] * dvk[:, 2]
        paz = ri[2, 0] * dvk[:, 0] + ri[2, 1] * dvk[:, 1] + ri[2, 2] * dvk[:, 2]
        phi_s = np.arctan2(paz, pay)
        phi_slot = phi_s[slot]

        # Expand the (lo, hi) runs into flat entry indices.
        runs = cnt[slot]
        cum = np.cumsum(runs)
        total = int(cum[-1])
        eidx = np.repeat(lo[slot], runs) + (np.arange(total, dtype=np.int64)
                                            - np.repeat(cum - runs, runs))
        delta = np.repeat(phi_slot, runs) - entry_phi[eidx]
        delta = np.where(delta < 0.0, delta + two_pi, delta)
        delta = np.where(delta >= two_pi, delta - two_pi, delta)
        a_real = delta * inv_alpha
        ab = np.minimum(a_real.astype(np.int64), n_alpha - 1)
        frac = a_real - ab
        ab2 = np.where(frac >= 0.5, ab + 1, ab - 1)
        ab2 = np.where(ab2 == n_alpha, 0, ab2)
        ab2 = np.where(ab2 < 0, n_alpha - 1, ab2)

        cells = entry_model_i[eidx].astype(np.int64) * n_alpha
        acc = (np.bincount(cells + ab, minlength=n_model_points * n_alpha)
               + np.bincount(cells + ab2, minlength=n_model_points * n_alpha))
        nz = np.nonzero(acc)[0]
        if nz.size == 0:
            continue
        top = nz[np.argsort(-acc[nz], kind="stable")][:n_peaks]
        for k, flat in enumerate(top):
            out[r, k, 0] = flat // n_alpha
            out[r, k, 1] = flat % n_alpha
            out[r, k, 2] = acc[flat]
    return out
