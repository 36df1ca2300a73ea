"""Zero-shot 6D pose estimation from depth: pair-feature voting + ICP +
depth-consistency scoring, with an optional pixel crop restricting the search.

The pipeline is classic Drost-style voting: oriented model point pairs are
hashed by a quantized 4-tuple feature (distance + three angles); scene pairs
look up matching model pairs and vote in a (model point, alpha) accumulator
per reference point; peaks become pose hypotheses, ICP polishes the best few,
and a rendered depth-consistency score ranks them.  The scorer doubles as the
pseudo-label gate: calibrate_gate picks the smallest score threshold whose
accepted poses are accurate on a ground-truthed calibration stream.

Everything here is deterministic: reference points come from a fixed pixel
lattice, clustering and tie-breaks are ordered, and the only RNG (model
surface sampling) runs on a fixed internal seed.
"""
import time
from dataclasses import dataclass, field, replace as dc_replace

import numpy as np
from scipy.spatial import cKDTree

from . import kernels
from .errors import (CalibrationFailure, DegeneratePair, NoScenePoints,
                     TooFewPoints)
from .geometry import (PointCloud, RigidPose, backproject, foreground_mask,
                       render_depth, transform)

_MODEL_SAMPLING_SEED = 1405  # fixed: identical mesh + params => identical model

# scene subsampling lattices, in absolute pixel coordinates so that the
# points used inside any crop are exactly a subset of the full-image points
_REF_LATTICE = 5      # reference pixels: (u + 2v) % 5 == 0
_PARTNER_LATTICE = 2  # pairing partners: (u + v) % 2 == 0

# accumulator peaks kept per reference point; near-symmetric views often put
# the true pose second locally, and clustering across references recovers it
_VOTE_PEAKS = 4


def ppf_feature(p1, n1, p2, n2):
    """Point-pair feature (|d|, angle(n1,d), angle(n2,d), angle(n1,n2)).

    d runs from p1 to p2; all three angles lie in [0, pi].  Raises
    DegeneratePair for coincident points.
    """
    p1 = np.asarray(p1, dtype=np.float64)
    p2 = np.asarray(p2, dtype=np.float64)
    n1 = np.asarray(n1, dtype=np.float64)
    n2 = np.asarray(n2, dtype=np.float64)
    d = p2 - p1
    dist = np.linalg.norm(d)
    if dist < 1e-9:
        raise DegeneratePair(f"points coincide (|d| = {dist:g})")
    dn = d / dist
    clip = lambda x: min(1.0, max(-1.0, float(x)))
    return (float(dist),
            float(np.arccos(clip(np.dot(n1, dn)))),
            float(np.arccos(clip(np.dot(n2, dn)))),
            float(np.arccos(clip(np.dot(n1, n2)))))


def _align_to_x(normals):
    """Rotations taking each unit vector onto +x, (K, 3, 3), Rodrigues form."""
    n = np.atleast_2d(np.asarray(normals, dtype=np.float64))
    K = len(n)
    s2 = n[:, 1] ** 2 + n[:, 2] ** 2
    s = np.sqrt(s2)
    out = np.zeros((K, 3, 3))
    deg = s < 1e-12
    # axis a = (0, nz, -ny)/s rotates n onto +x by angle acos(nx)
    with np.errstate(invalid="ignore", divide="ignore"):
        ay = np.where(deg, 0.0, n[:, 2] / np.where(deg, 1.0, s))
        az = np.where(deg, 0.0, -n[:, 1] / np.where(deg, 1.0, s))
    c = n[:, 0]
    one_c = 1.0 - c
    out[:, 0, 0] = c
    out[:, 0, 1] = -az * s
    out[:, 0, 2] = ay * s
    out[:, 1, 0] = az * s
    out[:, 1, 1] = c + one_c * ay * ay
    out[:, 1, 2] = one_c * ay * az
    out[:, 2, 0] = -ay * s
    out[:, 2, 1] = one_c * ay * az
    out[:, 2, 2] = c + one_c * az * az
    ident = np.eye(3)
    flip = np.diag([-1.0, -1.0, 1.0])  # 180 deg about z for n = -x
    for i in np.nonzero(deg)[0]:
        out[i] = ident if n[i, 0] > 0 else flip
    return out


def _quantize_angles(cosines, neg_cos_bounds):
    """Angle bin from a cosine without acos: searchsorted over -cos edges."""
    nb = len(neg_cos_bounds)
    return np.minimum(np.searchsorted(neg_cos_bounds, -cosines, side="right"),
                      nb - 1)


@dataclass
class PpfModel:
    """Immutable voting model for one mesh; built once, shared by all frames."""
    mesh_id: str
    mesh: object                 # TriMesh (kept for rendering-based scoring)
    dist_step: float
    angle_step: float            # feature and alpha quantum, 2*pi/angle_bins
    n_angle_bins: int            # alpha bins over [0, 2*pi)
    points: np.ndarray           # (P, 3) sampled surface points
    normals: np.ndarray          # (P, 3)
    diameter: float
    keys_sorted: np.ndarray      # (K,) int64 pair features incl. neighbour bins
    entry_model_i: np.ndarray    # (K,) int32 reference model point per entry
    entry_phi: np.ndarray        # (K,) float64 alpha_model per entry
    neg_cos_bounds: np.ndarray   # (angle_bins//2,) feature-angle bin edges
    align_rot: np.ndarray        # (P, 3, 3) rotations taking each normal to +x
    align_off: np.ndarray        # (P, 3) translation part of each T_model->aligned


def _sample_surface(mesh, step, rng):
    """Poisson-disk surface samples (min spacing 2*step) with smooth normals."""
    v, t = mesh.vertices, mesh.triangles.astype(np.int64)
    e1 = v[t[:, 1]] - v[t[:, 0]]
    e2 = v[t[:, 2]] - v[t[:, 0]]
    area = 0.5 * np.linalg.norm(np.cross(e1, e2), axis=1)
    total = area.sum()
    n_cand = int(min(20000, max(2000, 8.0 * total / step ** 2)))
    tri = rng.choice(len(t), size=n_cand, p=area / total)
    r1 = np.sqrt(rng.random(n_cand))
    r2 = rng.random(n_cand)
    w0 = 1.0 - r1
    w1 = r1 * (1.0 - r2)
    w2 = r1 * r2
    pts = (w0[:, None] * v[t[tri, 0]] + w1[:, None] * v[t[tri, 1]]
           + w2[:, None] * v[t[tri, 2]])
    nrm = (w0[:, None] * mesh.normals[t[tri, 0]]
           + w1[:, None] * mesh.normals[t[tri, 1]]
           + w2[:, None] * mesh.normals[t[tri, 2]])
    ln = np.linalg.norm(nrm, axis=1)
    keep = ln > 1e-9
    pts, nrm = pts[keep], nrm[keep] / ln[keep, None]

    min_d2 = (2.0 * step) ** 2
    chosen = np.zeros((0, 3))
    idx = []
    for i in range(len(pts)):
        if len(chosen) == 0 or ((chosen - pts[i]) ** 2).sum(1).min() >= min_d2:
            chosen = np.vstack([chosen, pts[i]])
            idx.append(i)
    return pts[idx], nrm[idx]


def build_model(mesh, sampling_step, angle_bins=30):
    """Sample the surface and hash every ordered point pair.

    dist_step equals the sampling step; one angular quantum 2*pi/angle_bins
    serves both the three feature angles (folded to [0, pi]) and alpha.
    Each pair is additionally filed under the neighbouring feature bins so
    that scene-side lookups absorb quantization jitter with a single search
    (details at the insertion site below).
    """
    if sampling_step <= 0:
        raise ValueError("sampling step must be positive")
    rng = np.random.default_rng(_MODEL_SAMPLING_SEED)
    pts, nrm = _sample_surface(mesh, sampling_step, rng)
    if len(pts) < 10:
        raise TooFewPoints(f"{len(pts)} surface samples at step "
                           f"{sampling_step:g}; need at least 10")
    diam = mesh.diameter()
    angle_step = 2.0 * np.pi / angle_bins
    nb = angle_bins // 2
    neg_cos_bounds = -np.cos((np.arange(1, nb + 1)) * angle_step)

    P = len(pts)
    align = _align_to_x(nrm)
    align_off = -np.einsum("pij,pj->pi", align, pts)

    # all ordered pairs (i, j), i != j
    ii, jj = np.meshgrid(np.arange(P), np.arange(P), indexing="ij")
    ii, jj = ii.ravel(), jj.ravel()
    keep = ii != jj
    ii, jj = ii[keep], jj[keep]
    d = pts[jj] - pts[ii]
    dist = np.linalg.norm(d, axis=1)
    invd = 1.0 / dist
    c1 = np.einsum("ij,ij->i", d, nrm[ii]) * invd
    c2 = np.einsum("ij,ij->i", d, nrm[jj]) * invd
    c3 = np.einsum("ij,ij->i", nrm[ii], nrm[jj])
    b1 = _quantize_angles(c1, neg_cos_bounds)
    b2 = _quantize_angles(c2, neg_cos_bounds)
    b3 = _quantize_angles(c3, neg_cos_bounds)
    # drop pure in-plane pairs (parallel normals, both ~perpendicular to d):
    # they are invariant to flipping the plane and only swamp the vote; the
    # same filter runs on the scene side in the voting kernels
    nb2 = nb // 2
    planar = ((b3 == 0) & (b1 >= nb2 - 1) & (b1 <= nb2)
              & (b2 >= nb2 - 1) & (b2 <= nb2))
    ii, jj = ii[~planar], jj[~planar]
    b1, b2, b3 = b1[~planar], b2[~planar], b3[~planar]
    dist, d = dist[~planar], d[~planar]
    db = (dist / sampling_step).astype(np.int64)

    # alpha_model: angle of the pair direction in the aligned frame of i
    rot_i = align[ii]
    py = np.einsum("ij,ij->i", rot_i[:, 1, :], d)
    pz = np.einsum("ij,ij->i", rot_i[:, 2, :], d)
    phi = np.arctan2(pz, py)

    # Scene samples sit between model samples, so a scene pair's quantized
    # feature often lands one bin off the matching model pair's.  File each
    # pair under its own key and under every in-range +-1 neighbour of
    # (db, b1, b2); a scene lookup is then a single exact search that still
    # tolerates one bin of jitter per coordinate.  The normal-angle bin b3
    # is stable under resampling and stays exact.  Out-of-range neighbours
    # are skipped because the packed key would alias another bin combination.
    dd = np.array([-1, 0, 1], dtype=np.int64)
    o0, o1, o2 = (o.ravel() for o in np.meshgrid(dd, dd, dd, indexing="ij"))
    qdb = db[:, None] + o0[None, :]
    qb1 = b1[:, None] + o1[None, :]
    qb2 = b2[:, None] + o2[None, :]
    ok = ((qdb >= 0) & (qb1 >= 0) & (qb1 <= nb - 1)
          & (qb2 >= 0) & (qb2 <= nb - 1))
    keys = (((qdb * nb + qb1) * nb + qb2) * nb + b3[:, None])[ok]
    src = np.broadcast_to(np.arange(len(ii))[:, None], ok.shape)[ok]

    order = np.argsort(keys, kind="stable")
    return PpfModel(
        mesh_id="", mesh=mesh, dist_step=float(sampling_step),
        angle_step=float(angle_step), n_angle_bins=int(angle_bins),
        points=pts, normals=nrm, diameter=float(diam),
        keys_sorted=keys[order],
        entry_model_i=ii[src][order].astype(np.int32),
        entry_phi=phi[src][order],
        neg_cos_bounds=neg_cos_bounds,
        align_rot=align, align_off=align_off)


@dataclass
class PoseHypothesis:
    pose: RigidPose
    score: float = 0.0
    votes: int = 0


def scene_cloud(frame):
    """Oriented cloud of the frame (normal-valid pixels only)."""
    cloud = backproject(frame.depth, frame.intrinsics, frame.normals)
    keep = np.einsum("ij,ij->i", cloud.normals, cloud.normals) > 0.5
    return PointCloud(cloud.points[keep], cloud.normals[keep],
                      cloud.pixels[keep])


def _crop_mask(pixels, crop):
    u, v = pixels[:, 0], pixels[:, 1]
    x, y, w, h = crop
    return (u >= x) & (u < x + w) & (v >= y) & (v < y + h)


def generate_hypotheses(model, cloud, crop, intr, max_hypotheses=200):
    """Voting + pose clustering; hypotheses sorted by votes, unscored.

    crop is an (x, y, w, h) pixel box or None for the whole image.  Reference
    points live on a fixed absolute-pixel lattice, so a sub-crop's reference
    set is a subset of the full-image one.
    """
    if len(cloud) == 0:
        raise NoScenePoints("scene cloud is empty")
    if crop is None:
        crop = (0, 0, intr.width, intr.height)
    in_crop = _crop_mask(cloud.pixels, crop)
    if not in_crop.any():
        raise NoScenePoints(f"no valid depth inside crop {tuple(crop)}")

    u, v = cloud.pixels[:, 0], cloud.pixels[:, 1]
    is_ref = (u + 2 * v) % _REF_LATTICE == 0
    partners = in_crop & (((u + v) % _PARTNER_LATTICE == 0) | is_ref)
    refs = in_crop & is_ref
    ref_idx_local = np.nonzero(refs[partners])[0].astype(np.int32)
    pts = cloud.points[partners]
    nrms = cloud.normals[partners]
    if len(ref_idx_local) == 0 or len(pts) < 2:
        return []

    ref_rot = _align_to_x(nrms[ref_idx_local])
    votes = kernels.ppf_vote(
        pts, nrms, ref_idx_local, ref_rot,
        model.keys_sorted, model.entry_model_i, model.entry_phi,
        model.neg_cos_bounds, model.dist_step, model.diameter,
        model.angle_step, model.n_angle_bins, len(model.points),
        n_peaks=_VOTE_PEAKS)

    # one raw pose per extracted accumulator peak, reference-major order
    n_refs = len(ref_idx_local)
    flat = votes.reshape(-1, 3)
    keep = flat[:, 2] >= 1
    if not keep.any():
        return []
    mi = flat[keep, 0]
    ab = flat[keep, 1]
    nv_raw = flat[keep, 2].astype(np.float64)
    row_ref = np.repeat(np.arange(n_refs), votes.shape[1])[keep]
    m = len(mi)

    alpha = (ab + 0.5) * model.angle_step
    ca, sa = np.cos(alpha), np.sin(alpha)
    rx = np.zeros((m, 3, 3))
    rx[:, 0, 0] = 1.0
    rx[:, 1, 1] = ca
    rx[:, 1, 2] = -sa
    rx[:, 2, 1] = sa
    rx[:, 2, 2] = ca
    r_sg_t = ref_rot[row_ref].transpose(0, 2, 1)
    R_raw = np.einsum("mij,mjk->mik", r_sg_t,
                      np.einsum("mij,mjk->mik", rx, model.align_rot[mi]))
    t_raw = (np.einsum("mij,mj->mi", r_sg_t,
                       np.einsum("mij,mj->mi", rx, model.align_off[mi]))
             + pts[ref_idx_local[row_ref]])

    # cluster greedily by descending votes, merging within 0.1*diam / 15 deg
    # of the cluster anchor; the emitted pose is the vote-weighted average of
    # the members, which beats the anchor's quantization error considerably
    order = np.lexsort((np.arange(m), -nv_raw))
    t_thr2 = (0.1 * model.diameter) ** 2
    cos_thr = np.cos(np.deg2rad(15.0))
    anchor_t = np.empty((m, 3))
    anchor_R = np.empty((m, 3, 3))
    cl_votes = np.empty(m)
    sum_t = np.empty((m, 3))
    sum_q = np.empty((m, 4))
    n_cl = 0
    for k in order:
        nv = nv_raw[k]
        tk = t_raw[k]
        Rk = R_raw[k]
        q = _quat_from_matrix(Rk)
        j = -1
        if n_cl:
            d = anchor_t[:n_cl] - tk
            tr = (anchor_R[:n_cl] * Rk).sum(axis=(1, 2))
            ok = ((d * d).sum(axis=1) <= t_thr2) & ((tr - 1.0) * 0.5 >= cos_thr)
            if ok.any():
                j = int(np.argmax(ok))
        if j >= 0:
            cl_votes[j] += nv
            sum_t[j] += nv * tk
            sum_q[j] += nv * (q if np.dot(q, sum_q[j]) >= 0 else -q)
        else:
            anchor_t[n_cl] = tk
            anchor_R[n_cl] = Rk
            cl_votes[n_cl] = nv
            sum_t[n_cl] = nv * tk
            sum_q[n_cl] = nv * q
            n_cl += 1
    order2 = np.lexsort((np.arange(n_cl), -cl_votes[:n_cl]))
    out = []
    for k in order2[:max_hypotheses]:
        qn = np.linalg.norm(sum_q[k])
        if qn < 1e-12:
            pose = RigidPose(anchor_R[k], anchor_t[k])
        else:
            pose = RigidPose(_quat_to_matrix(sum_q[k] / qn),
                             sum_t[k] / cl_votes[k])
        out.append(PoseHypothesis(pose, 0.0, int(cl_votes[k])))
    return out


def _quat_from_matrix(R):
    """Unit quaternion (x, y, z, w) from a rotation matrix (Shepperd)."""
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2.0
        return np.array([(R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s,
                         (R[1, 0] - R[0, 1]) / s, 0.25 * s])
    i = int(np.argmax([R[0, 0], R[1, 1], R[2, 2]]))
    j, k = (i + 1) % 3, (i + 2) % 3
    s = np.sqrt(R[i, i] - R[j, j] - R[k, k] + 1.0) * 2.0
    q = np.empty(4)
    q[i] = 0.25 * s
    q[j] = (R[j, i] + R[i, j]) / s
    q[k] = (R[k, i] + R[i, k]) / s
    q[3] = (R[k, j] - R[j, k]) / s
    return q


def _quat_to_matrix(q):
    x, y, z, w = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def refine_icp(hyp, model, cloud, max_iterations=30, tree=None):
    """Point-to-point ICP against the scene cloud.

    Correspondences beyond 0.1*diameter or with normals more than 45 degrees
    apart are rejected; the normal gate keeps model points on faces the view
    cannot see from latching onto the visible surface and dragging the pose
    (the usual partial-overlap bias).  A step is kept only if it lowers the
    mean inlier residual, so the residual sequence is non-increasing.
    Returns the input unchanged when nothing matches.
    """
    if len(cloud) == 0:
        return hyp
    if tree is None:
        tree = cKDTree(cloud.points)
    reject = 0.1 * model.diameter
    cos_gate = np.cos(np.deg2rad(45.0))

    def inliers(pose):
        x = transform(pose, model.points)
        dist, idx = tree.query(x)
        nd = np.einsum("ij,ij->i", model.normals @ pose.rotation.T,
                       cloud.normals[idx])
        ok = (dist <= reject) & (nd >= cos_gate)
        return ok, dist, idx

    pose = hyp.pose
    best_res = None
    for _ in range(max_iterations):
        inl, dist, idx = inliers(pose)
        if inl.sum() < 6:
            break
        res = float(dist[inl].mean())
        if best_res is None:
            best_res = res
        p = model.points[inl]
        q = cloud.points[idx[inl]]
        pc = p.mean(axis=0)
        qc = q.mean(axis=0)
        H = (p - pc).T @ (q - qc)
        U, _, Vt = np.linalg.svd(H)
        R = Vt.T @ U.T
        if np.linalg.det(R) < 0:
            Vt = Vt.copy()
            Vt[-1] = -Vt[-1]
            R = Vt.T @ U.T
        cand = RigidPose(R, qc - R @ pc)
        i2, d2, _ = inliers(cand)
        new_res = float(d2[i2].mean()) if i2.sum() >= 6 else np.inf
        if new_res >= best_res:
            break
        improved = (best_res - new_res) / max(best_res, 1e-12)
        pose = cand
        best_res = new_res
        if improved < 1e-6:
            break
    return dc_replace(hyp, pose=pose)


def score_hypothesis(hyp, model, frame):
    """Depth-consistency score in [0, 100] from a rendered comparison.

    Over rendered-valid pixels: inliers agree with the observation within
    1 cm and 30 deg of normal; violations render in front of the observed
    surface by more than 2 cm.  Score = 100 * max(0, inliers - violations)
    / rendered pixels; an empty render scores 0.
    """
    depth_r, nrm_r = render_depth(model.mesh, hyp.pose, frame.intrinsics,
                                  want_normals=True)
    rv = depth_r > 0
    n_rv = int(rv.sum())
    if n_rv == 0:
        return dc_replace(hyp, score=0.0)
    obs = frame.depth
    diff = depth_r.astype(np.float64) - obs.astype(np.float64)
    ndot = np.einsum("ijk,ijk->ij", nrm_r.astype(np.float64), frame.normals)
    # the normal test only applies where the observation has a normal at all
    # (silhouette/border pixels of the observed surface carry none)
    has_obs_n = np.einsum("ijk,ijk->ij", frame.normals, frame.normals) > 0.5
    inlier = rv & (np.abs(diff) < 0.01) & (
        ~has_obs_n | (ndot > np.cos(np.deg2rad(30.0))))
    violation = rv & (obs > 0) & (diff < -0.02)
    score = 100.0 * max(0, int(inlier.sum()) - int(violation.sum())) / n_rv
    return dc_replace(hyp, score=float(score))


def estimate(frame, model, crop=None, max_hypotheses=200, refine_top=50):
    """Full pipeline: vote, refine the top hypotheses, score, pick the best.

    Returns (best hypothesis or None, stage timing dict).  Stage entries are
    {"ms": wall milliseconds, "count": work items}; the counts (not the
    times) are what the speedup claims are measured on.
    """
    timings = {}
    t0 = time.perf_counter()
    cloud = scene_cloud(frame)
    # Voting sees only foreground points: a flat model face pressed into the
    # support plane matches its depth and normals everywhere, and those
    # parasitic fits outscore the real object.  ICP and scoring still use
    # the full cloud and frame.
    vote_cloud = cloud
    fg = foreground_mask(frame)
    keep = fg[cloud.pixels[:, 1], cloud.pixels[:, 0]]
    if keep.any():
        vote_cloud = PointCloud(cloud.points[keep], cloud.normals[keep],
                                cloud.pixels[keep])
    timings["feature_extraction"] = {"ms": 0.0, "count": len(cloud)}
    t1 = time.perf_counter()
    timings["feature_extraction"]["ms"] = (t1 - t0) * 1e3

    hyps = generate_hypotheses(model, vote_cloud, crop, frame.intrinsics,
                               max_hypotheses)
    n_refs = reference_count(vote_cloud, crop, frame.intrinsics)
    t2 = time.perf_counter()
    timings["hypothesis_generation"] = {"ms": (t2 - t1) * 1e3,
                                        "count": n_refs}

    tree = cKDTree(cloud.points) if len(cloud) else None
    refined = [refine_icp(h, model, cloud, tree=tree)
               for h in hyps[:refine_top]]
    t3 = time.perf_counter()
    timings["refinement"] = {"ms": (t3 - t2) * 1e3, "count": len(refined)}

    scored = [score_hypothesis(h, model, frame) for h in refined]
    t4 = time.perf_counter()
    timings["scoring"] = {"ms": (t4 - t3) * 1e3, "count": len(scored)}

    if not scored:
        return None, timings
    best = min(range(len(scored)),
               key=lambda k: (-scored[k].score, -scored[k].votes, k))
    return scored[best], timings


def reference_count(cloud, crop, intr):
    """Reference-lattice population inside the crop (speedup bookkeeping)."""
    if len(cloud) == 0:
        return 0
    if crop is None:
        crop = (0, 0, intr.width, intr.height)
    u, v = cloud.pixels[:, 0], cloud.pixels[:, 1]
    sel = _crop_mask(cloud.pixels, crop) & ((u + 2 * v) % _REF_LATTICE == 0)
    return int(sel.sum())


@dataclass
class GateCalibration:
    threshold: float         # theta_p: pseudo-labels require score > threshold
    error_bound: float       # meters; mean ADD the accepted set must beat
    n_frames: int


def calibrate_gate(frames, gt_poses, model, error_bound=None,
                   min_accepts=5):
    """Pick the smallest score threshold whose accepted poses are accurate.

    Runs the full-image estimator on every calibration frame, then scans
    candidate thresholds (the observed scores, ascending): the first one
    where hypotheses scoring >= it have mean ADD <= error_bound, with at
    least min_accepts qualifying, wins.  error_bound defaults to
    0.1 * model diameter.
    """
    if len(frames) < 50:
        raise CalibrationFailure(f"need >= 50 calibration frames, "
                                 f"got {len(frames)}")
    if error_bound is None:
        error_bound = 0.1 * model.diameter
    verts = model.mesh.vertices
    pairs = []
    for frame, gt in zip(frames, gt_poses):
        try:
            hyp, _ = estimate(frame, model)
        except NoScenePoints:
            continue
        if hyp is None:
            continue
        err = float(np.linalg.norm(transform(hyp.pose, verts)
                                   - transform(gt, verts), axis=1).mean())
        pairs.append((hyp.score, err))
    if not pairs:
        raise CalibrationFailure("no scorable calibration frames")
    scores = np.array([p[0] for p in pairs])
    errs = np.array([p[1] for p in pairs])
    for cand in np.unique(scores):
        sel = scores >= cand
        if sel.sum() >= min_accepts and errs[sel].mean() <= error_bound:
            return GateCalibration(float(cand), float(error_bound),
                                   len(frames))
    raise CalibrationFailure(
        f"no threshold reaches mean ADD <= {error_bound:g} m with "
        f">= {min_accepts} accepts")
