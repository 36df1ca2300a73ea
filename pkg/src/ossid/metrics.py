"""Detection and pose-error metrics.

Box IoU and mean average precision for the detector; VSD, MSSD, MSPD, their
average-recall aggregation, and plain ADD for the pose estimator and the
score-gate calibration.  The threshold grids follow the usual depth-benchmark
convention: surface/visibility thresholds sweep 5% to 50% of the object
diameter, projection thresholds sweep 5r to 50r pixels with r = width / 640.

Everything here is a pure function of its arguments; nothing caches or
mutates shared state.
"""
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import BehindCamera, NoGroundTruth
from .geometry import project, render_depth, transform

VSD_VIS_TOLERANCE = 0.015   # meters; rendered pixel counts as visible if
                            # rendered <= observed + this
_N_THRESH = 10              # thresholds per grid (5% .. 50% in steps of 5%)


def _relative_grid(scale):
    """The 10-step threshold ladder 0.05*scale .. 0.5*scale."""
    return np.linspace(0.05, 0.5, _N_THRESH) * scale


# ---------------------------------------------------------------------------
# symmetries


@dataclass
class SymmetrySet:
    """Rigid object-frame transforms under which the shape is invariant.

    The identity is always a member.  Use from_poses() to get load-time
    validation against the mesh; the bare constructor trusts its input.
    """
    poses: list = field(default_factory=list)   # RigidPose, identity first

    def __post_init__(self):
        if not self.poses or not _is_identity(self.poses[0]):
            from .geometry import RigidPose
            self.poses = [RigidPose(np.eye(3), np.zeros(3))] + list(self.poses)

    def __len__(self):
        return len(self.poses)

    def __iter__(self):
        return iter(self.poses)

    @classmethod
    def identity_only(cls):
        return cls([])

    @classmethod
    def from_poses(cls, mesh, poses, tol_factor=1e-3):
        """Validated construction: every transform must map the mesh onto
        itself within tol_factor * diameter symmetric Hausdorff distance."""
        tol = tol_factor * mesh.diameter()
        verts = mesh.vertices
        tree = cKDTree(verts)
        for pose in poses:
            moved = transform(pose, verts)
            d_fwd = tree.query(moved)[0].max()
            d_bwd = cKDTree(moved).query(verts)[0].max()
            h = max(float(d_fwd), float(d_bwd))
            if h > tol:
                raise ValueError(
                    f"declared symmetry moves the mesh by {h:g} m "
                    f"(tolerance {tol:g})")
        return cls(list(poses))


def _is_identity(pose):
    return (np.allclose(pose.rotation, np.eye(3), atol=1e-12)
            and np.allclose(pose.translation, 0.0, atol=1e-12))


# ---------------------------------------------------------------------------
# detection metrics


def iou(a, b):
    """Intersection over union of two (x, y, w, h) boxes."""
    ax, ay, aw, ah = (float(v) for v in a)
    bx, by, bw, bh = (float(v) for v in b)
    if aw <= 0 or ah <= 0 or bw <= 0 or bh <= 0:
        raise ValueError("boxes must have positive width and height")
    ix = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    iy = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = ix * iy
    return inter / (aw * ah + bw * bh - inter)


def detection_map(detections, gts, iou_threshold=0.5, min_visib=0.1):
    """Average precision of per-frame detections at one IoU threshold.

    detections: per frame, a list of (box, confidence).  gts: per frame, a
    list of (box, visible_fraction).  Ground truth below min_visib
    visibility is ignored: it cannot be matched for credit, and detections
    overlapping it are dropped rather than counted as false positives.

    Detections are ranked globally by confidence (ties: frame order, then
    insertion order) and greedily matched to the best still-unmatched GT of
    their frame; AP is the area under the all-point-interpolated
    precision/recall curve.  With a single object class this is the mAP.
    """
    if len(detections) != len(gts):
        raise ValueError("detections and gts must cover the same frames")
    active = []     # (frame, box) eligible for matching
    ignored = []
    for fi, gt_list in enumerate(gts):
        for box, vis in gt_list:
            (active if vis >= min_visib else ignored).append((fi, box))
    n_gt = len(active)
    if n_gt == 0:
        raise NoGroundTruth("no ground-truth instance is visible enough "
                            f"(min_visib={min_visib})")

    flat = []
    for fi, dets in enumerate(detections):
        for order, (box, conf) in enumerate(dets):
            flat.append((-float(conf), fi, order, box))
    flat.sort(key=lambda r: (r[0], r[1], r[2]))

    matched = [False] * n_gt
    tp, fp = [], []
    for _, fi, _, box in flat:
        best_j, best_iou = -1, iou_threshold
        for j, (gfi, gbox) in enumerate(active):
            if gfi != fi or matched[j]:
                continue
            v = iou(box, gbox)
            if v >= best_iou:
                best_iou, best_j = v, j
        if best_j >= 0:
            matched[best_j] = True
            tp.append(1.0)
            fp.append(0.0)
            continue
        # overlap with an ignored GT removes the detection from scoring
        if any(gfi == fi and iou(box, gbox) >= iou_threshold
               for gfi, gbox in ignored):
            continue
        tp.append(0.0)
        fp.append(1.0)

    if not tp:
        return 0.0
    tp = np.cumsum(tp)
    fp = np.cumsum(fp)
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1e-12)

    # all-point interpolation: running max of precision from the right,
    # integrated over the recall steps
    prec_env = np.maximum.accumulate(precision[::-1])[::-1]
    r_prev = 0.0
    ap = 0.0
    for r, p in zip(recall, prec_env):
        if r > r_prev:
            ap += (r - r_prev) * p
            r_prev = r
    return float(ap)


# ---------------------------------------------------------------------------
# pose-error metrics


def add(est, gt, mesh):
    """Mean vertex distance between the two posed meshes (meters)."""
    return float(np.linalg.norm(transform(est, mesh.vertices)
                                - transform(gt, mesh.vertices), axis=1).mean())


def mssd(est, gt, mesh, syms=None):
    """Symmetry-aware maximum surface distance (meters).

    min over declared symmetries S of max over vertices |est x - gt S x|.
    """
    if syms is None:
        syms = SymmetrySet.identity_only()
    pe = transform(est, mesh.vertices)
    best = np.inf
    for s in syms:
        pg = transform(gt, transform(s, mesh.vertices))
        best = min(best, float(np.linalg.norm(pe - pg, axis=1).max()))
    return best


def mspd(est, gt, mesh, syms, intr):
    """Symmetry-aware maximum projection distance (pixels)."""
    if syms is None:
        syms = SymmetrySet.identity_only()
    pe = transform(est, mesh.vertices)
    if np.any(pe[:, 2] <= 0):
        raise BehindCamera("estimated pose puts vertices behind the camera")
    ue = project(pe, intr)
    best = np.inf
    for s in syms:
        pg = transform(gt, transform(s, mesh.vertices))
        if np.any(pg[:, 2] <= 0):
            raise BehindCamera("ground-truth pose puts vertices behind "
                               "the camera")
        ug = project(pg, intr)
        best = min(best, float(np.linalg.norm(ue - ug, axis=1).max()))
    return best


def vsd(est, gt, mesh, scene_depth, intr, taus):
    """Visible-surface discrepancy, one value per tolerance in taus.

    Both poses are rendered once; a rendered pixel is visible when its depth
    is at most the observed scene depth plus VSD_VIS_TOLERANCE (so pixels
    occluded in the actual image do not count against either pose).  The
    error at tolerance tau is the fraction of union-of-visibility pixels
    that are covered by only one render, or by both with depth difference
    over tau.  An empty union scores 1.0 everywhere.
    """
    taus = np.atleast_1d(np.asarray(taus, dtype=np.float64))
    de = render_depth(mesh, est, intr)
    dg = render_depth(mesh, gt, intr)
    obs = np.asarray(scene_depth, dtype=np.float64)
    vis_e = (de > 0) & (de <= obs + VSD_VIS_TOLERANCE)
    vis_g = (dg > 0) & (dg <= obs + VSD_VIS_TOLERANCE)
    union = vis_e | vis_g
    n_union = int(union.sum())
    if n_union == 0:
        return np.ones_like(taus)
    both = vis_e & vis_g
    n_single = n_union - int(both.sum())
    diff = np.abs(de[both] - dg[both])
    out = np.empty_like(taus)
    for k, tau in enumerate(taus):
        out[k] = (n_single + int((diff > tau).sum())) / n_union
    return out


def vsd_tau_grid(diameter):
    """The 10 depth tolerances used by the recall aggregation."""
    return _relative_grid(diameter)


@dataclass
class PoseErrorReport:
    """Per-frame pose errors; vsd holds one value per vsd_tau_grid entry."""
    vsd: np.ndarray
    mssd: float
    mspd: float
    add: float


def ar_score(reports, diameter, width):
    """Average recall over the three pose metrics' threshold grids.

    VSD: mean over (tau, error threshold 0.05..0.5) of the fraction of
    frames with vsd[tau] < threshold.  MSSD: thresholds 5%..50% of the
    diameter.  MSPD: 5r..50r pixels, r = width/640.  AR is the plain mean
    of the three recalls.
    """
    if not reports:
        raise ValueError("need at least one report")
    vsd_mat = np.stack([r.vsd for r in reports])          # (F, n_tau)
    if vsd_mat.shape[1] != _N_THRESH:
        raise ValueError(f"vsd vectors must have {_N_THRESH} entries")
    thr = np.linspace(0.05, 0.5, _N_THRESH)
    rec_vsd = (vsd_mat[:, :, None] < thr[None, None, :]).mean()

    ms = np.array([r.mssd for r in reports])
    rec_mssd = (ms[:, None] < _relative_grid(diameter)[None, :]).mean()

    mp = np.array([r.mspd for r in reports])
    # pixel ladder 5r .. 50r with r = width/640, i.e. the relative grid of
    # 100r (0.05 * 100r = 5r)
    rec_mspd = (mp[:, None] < _relative_grid(100.0 * width / 640.0)[None, :]).mean()

    return float((rec_vsd + rec_mssd + rec_mspd) / 3.0)
