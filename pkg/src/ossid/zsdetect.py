"""Template-correlation instance detector with an online-trainable head.

The detector compares depth windows against a bank of rendered templates of
the target object.  Per template it measures three fixed statistics
(depth cross-correlation, normal agreement, valid-pixel overlap); a linear
head over the concatenated statistics, squashed through a logistic, gives
the window confidence.  Only the head is trained: features never change, so
online finetuning is a tiny logistic regression driven by AMSGrad steps on
pseudo-labeled boxes.

Feature layout: per template t the entries are [ncc_t, ndot_t, overlap_t],
concatenated in template order, so the feature dimension is 3 * N.
"""
import struct
from dataclasses import dataclass, field, replace as dc_replace

import numpy as np
from scipy.special import expit

from .errors import MalformedFile, ShapeMismatch
from .geometry import (CameraIntrinsics, RigidPose, estimate_normals,
                       foreground_mask, render_depth, transform)
from .metrics import iou

PATCH = 80               # template resolution (PATCH x PATCH)
FILL = 0.8               # fraction of the patch the rendered object spans;
                         # PATCH*FILL is an integer so a window of that side
                         # resamples onto the patch without aliasing
STRIDE = 8               # sliding-window step in pixels
SCALES = (0.7, 1.0, 1.4)
NMS_IOU = 0.5
TOP_K = 20               # detections returned per frame
MIN_SIDE = 12            # smallest allowed window side in pixels

HEAD_MAGIC = b"OSHD"
HEAD_VERSION = 1

_NEG_SEED = 0xF17E       # mixed with the frame index for negative sampling


# ---------------------------------------------------------------------------
# domain types


@dataclass
class TemplateSet:
    """Rendered views of one object from Fibonacci-lattice directions."""
    object_id: str
    depth: np.ndarray            # (N, PATCH, PATCH) float32, 0 = background
    normals: np.ndarray          # (N, PATCH, PATCH, 3) float32
    poses: list                  # RigidPose per template (object -> camera)
    apparent_radius: np.ndarray  # (N,) meters, half-extent seen from the view
    intrinsics: list             # CameraIntrinsics per template render

    def __post_init__(self):
        if len(self.depth) < 1:
            raise ValueError("need at least one template")
        if not (len(self.depth) == len(self.normals) == len(self.poses)
                == len(self.apparent_radius) == len(self.intrinsics)):
            raise ValueError("template arrays disagree in length")

    def __len__(self):
        return len(self.depth)

    @property
    def feature_dim(self):
        return 3 * len(self.depth)


@dataclass
class DetectorHead:
    """Linear scoring head: confidence = logistic(w . f + b)."""
    w: np.ndarray
    b: float

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        if not (np.isfinite(self.w).all() and np.isfinite(self.b)):
            raise ValueError("head parameters must be finite")


@dataclass
class Detection:
    box: tuple                   # (x, y, w, h) pixels, inside the image
    confidence: float            # in [0, 1]
    object_id: str = ""
    mask: np.ndarray = None      # optional coarse silhouette, box-shaped


@dataclass
class FinetuneExample:
    """One pseudo-labeled (or oracle-labeled) frame for head training."""
    frame: object                # FrameObservation
    box: tuple                   # pseudo-GT (x, y, w, h)
    mask: np.ndarray = None
    source: str = "pseudo-label"   # or "oracle-GT"
    _rows: tuple = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        x, y, w, h = (int(v) for v in self.box)
        if w < 4 or h < 4:
            raise ValueError(f"degenerate pseudo-GT box {self.box}")
        self.box = (x, y, w, h)
        if self.source not in ("pseudo-label", "oracle-GT"):
            raise ValueError(f"unknown example source {self.source!r}")


@dataclass
class OptimizerState:
    """AMSGrad per-parameter state; no bias correction anywhere."""
    m: np.ndarray
    v: np.ndarray
    vhat: np.ndarray
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-6

    @classmethod
    def fresh(cls, dim, **hyper):
        z = np.zeros(dim, dtype=np.float64)
        return cls(z.copy(), z.copy(), z.copy(), 0, **hyper)


# ---------------------------------------------------------------------------
# template rendering


def render_templates(mesh, n, seed, object_id=""):
    """Render n views from directions spread by a Fibonacci sphere lattice.

    The whole lattice is rotated by a seeded random rotation (and each view
    gets a seeded roll), so different seeds give different template sets
    while the same seed reproduces them exactly.  Each render centers the
    object and scales it so its larger projected extent fills FILL of the
    patch; the realized half-extent in meters is kept as apparent_radius so
    detection can predict the object's pixel size from scene depth.
    """
    if n < 1:
        raise ValueError("need at least one template")
    rng = np.random.default_rng(seed)
    base = _random_rotation(rng)
    rolls = rng.uniform(0.0, 2.0 * np.pi, n)

    verts = mesh.vertices
    ctr = verts.mean(axis=0)
    r_max = float(np.linalg.norm(verts - ctr, axis=1).max())
    dist = 3.0 * r_max

    golden = np.pi * (3.0 - np.sqrt(5.0))
    depths, normals, poses, radii, intrs = [], [], [], [], []
    for i in range(n):
        z = 1.0 - 2.0 * (i + 0.5) / n
        rho = np.sqrt(max(0.0, 1.0 - z * z))
        ang = golden * i
        v = base @ np.array([rho * np.cos(ang), rho * np.sin(ang), z])

        pose = _look_pose(ctr, v, dist, rolls[i])
        pc = transform(pose, verts)
        u1 = pc[:, 0] / pc[:, 2]
        v1 = pc[:, 1] / pc[:, 2]
        half_u = (u1.max() - u1.min()) / 2.0
        half_v = (v1.max() - v1.min()) / 2.0
        ratio = max(half_u, half_v)
        f = FILL * (PATCH / 2.0) / ratio
        cx = (PATCH - 1) / 2.0 - f * (u1.max() + u1.min()) / 2.0
        cy = (PATCH - 1) / 2.0 - f * (v1.max() + v1.min()) / 2.0
        intr = CameraIntrinsics(f, f, cx, cy, PATCH, PATCH)

        d = render_depth(mesh, pose, intr)
        depths.append(d)
        normals.append(estimate_normals(d, intr))
        poses.append(pose)
        radii.append(ratio * dist)
        intrs.append(intr)

    return TemplateSet(object_id, np.stack(depths), np.stack(normals),
                       poses, np.array(radii), intrs)


def _random_rotation(rng):
    u1, u2, u3 = rng.random(3)
    q = np.array([np.sqrt(1 - u1) * np.sin(2 * np.pi * u2),
                  np.sqrt(1 - u1) * np.cos(2 * np.pi * u2),
                  np.sqrt(u1) * np.sin(2 * np.pi * u3),
                  np.sqrt(u1) * np.cos(2 * np.pi * u3)])
    x, y, z, w = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)]])


def _look_pose(center, direction, dist, roll):
    """Object-to-camera pose: camera at center + dist*direction, looking at
    the center, rolled about the view axis."""
    fwd = -direction / np.linalg.norm(direction)
    seed_axis = np.array([0.0, 0.0, 1.0])
    if abs(fwd @ seed_axis) > 0.99:
        seed_axis = np.array([1.0, 0.0, 0.0])
    right = np.cross(fwd, seed_axis)
    right /= np.linalg.norm(right)
    cr, sr = np.cos(roll), np.sin(roll)
    up0 = np.cross(fwd, right)
    right, up = cr * right + sr * up0, -sr * right + cr * up0
    rot = np.stack([right, up, fwd])
    cam_pos = center + dist * direction
    return RigidPose(rot, -(rot @ cam_pos))


# ---------------------------------------------------------------------------
# features


def _resample_idx(box, width, height):
    """Nearest-neighbor source indices mapping a window onto the patch.

    Windows are tight object boxes, but templates render the object centered
    with its larger extent at FILL of the patch.  Sampling therefore covers
    the square region of side max(w, h)/FILL about the window center, which
    frames the window content exactly like a template render (aspect kept,
    border pixels replicate where the region overruns the image).
    """
    x, y, w, h = box
    if not (0 <= x and 0 <= y and x + w <= width and y + h <= height
            and w > 0 and h > 0):
        raise ValueError(f"window {box} outside a {width}x{height} image")
    half = max(w, h) / (2.0 * FILL)
    cx = x + w / 2.0
    cy = y + h / 2.0
    u = cx - half + (np.arange(PATCH) + 0.5) * (2.0 * half) / PATCH
    v = cy - half + (np.arange(PATCH) + 0.5) * (2.0 * half) / PATCH
    xs = np.clip(np.floor(u).astype(np.int64), 0, width - 1)
    ys = np.clip(np.floor(v).astype(np.int64), 0, height - 1)
    return ys, xs


_DEPTH_STEP = 0.025      # adjacent-pixel depth jump treated as an occlusion
                         # boundary when splitting foreground components


def _deviation_map(depth, valid, clip):
    """Canonical depth encoding for correlation: valid pixels carry their
    deviation from the mean valid depth (clipped to +-clip), background
    carries +clip, i.e. "far".  The encoding keeps silhouette shape and
    surface relief in one scale-free map and is invariant to a constant
    depth offset."""
    n_valid = valid.sum()
    mean = (depth * valid).sum() / n_valid if n_valid else 0.0
    return np.where(valid, np.clip(depth - mean, -clip, clip), clip)


def _standardize(row):
    row = row - row.mean()
    s = np.sqrt((row * row).mean())
    return row / s if s > 1e-12 else np.zeros_like(row)


def _template_rows(templates):
    """Standardized full-patch deviation maps of every template.

    The clip constant is shared with the window encoding (median apparent
    radius) so a window showing exactly a template's content maps to
    exactly the template's row.
    """
    clip = float(np.median(templates.apparent_radius))
    rows = np.empty((len(templates), PATCH * PATCH))
    for t in range(len(templates)):
        d = templates.depth[t].astype(np.float64)
        m = _deviation_map(d, d > 0, clip)
        rows[t] = _standardize(m.ravel())
    return rows


def extract_features(frame, window, templates):
    """Correlation statistics of one window against every template.

    Returns (features, empty): a (3N,) float64 vector laid out
    [ncc_0, ndot_0, overlap_0, ncc_1, ...] and a flag that is True when the
    window holds no valid depth (in which case the features are all zero).
    Window validity means foreground: pixels in front of the frame's
    support plane (see geometry.foreground_mask).  ncc is the mean/scale-normalized
    cross-correlation of the full-patch depth deviation maps (everything
    that is not foreground encoded as "far", see _deviation_map), so it
    responds to silhouette shape as well as surface relief; ndot is the
    mean dot product of surface normals over jointly valid pixels and
    overlap the jointly-valid fraction of the template's silhouette.  All
    entries lie in [-1, 1].
    """
    intr = frame.intrinsics
    ys, xs = _resample_idx(window, intr.width, intr.height)
    idx = np.ix_(ys, xs)
    win_d = frame.depth[idx].astype(np.float64)
    win_n = frame.normals[idx].astype(np.float64)
    win_fg = foreground_mask(frame)[idx]

    feats = np.zeros(templates.feature_dim)
    if not (win_d > 0).any():
        return feats, True

    clip = float(np.median(templates.apparent_radius))
    win_row = _standardize(_deviation_map(win_d, win_fg, clip).ravel())
    tmp_rows = _template_rows(templates)
    for t in range(len(templates)):
        tmp_n = templates.normals[t].astype(np.float64)
        tmp_valid = templates.depth[t] > 0
        ncc = float(win_row @ tmp_rows[t]) / win_row.size
        feats[3 * t] = min(1.0, max(-1.0, ncc))
        joint = win_fg & tmp_valid
        cnt = int(joint.sum())
        if cnt == 0:
            continue
        # normals are zero where undefined (image border, lone pixels); only
        # pixels with a normal on both sides enter the mean
        defined = joint & (np.abs(win_n).sum(-1) > 0) & (np.abs(tmp_n).sum(-1) > 0)
        nd_cnt = int(defined.sum())
        if nd_cnt:
            ndot = float((win_n[defined] * tmp_n[defined]).sum() / nd_cnt)
            feats[3 * t + 1] = min(1.0, max(-1.0, ndot))
        feats[3 * t + 2] = cnt / int(tmp_valid.sum())
    return feats, False


def _batch_features(frame, boxes, templates):
    """extract_features over many same-sized windows, as matrix products.

    Returns (X, empty) with X (n, 3N) and empty (n,) bool.  Summations run
    in a different order than the single-window path, so values agree to
    float64 rounding rather than bit-for-bit.
    """
    intr = frame.intrinsics
    n = len(boxes)
    nt = len(templates)
    X = np.zeros((n, 3 * nt))
    if n == 0:
        return X, np.zeros(0, dtype=bool)

    clip = float(np.median(templates.apparent_radius))
    fg_mask = foreground_mask(frame)
    raw_valid = np.empty(n, dtype=np.int64)
    W = np.empty((n, PATCH * PATCH))
    V = np.empty((n, PATCH * PATCH))
    NW = np.empty((n, PATCH * PATCH, 3))
    for k, box in enumerate(boxes):
        idx = np.ix_(*_resample_idx(box, intr.width, intr.height))
        d = frame.depth[idx].ravel()
        fg = fg_mask[idx].ravel()
        raw_valid[k] = (d > 0).sum()
        V[k] = fg
        W[k] = _standardize(_deviation_map(d, fg, clip))
        NW[k] = frame.normals[idx].reshape(-1, 3)
    empty = raw_valid == 0

    T = templates.depth.reshape(nt, -1).astype(np.float64)
    U = (T > 0).astype(np.float64)
    NT = templates.normals.reshape(nt, -1, 3).astype(np.float64)

    ncc = (W @ _template_rows(templates).T) / (PATCH * PATCH)
    cnt = V @ U.T                               # jointly valid pixels
    Vn = V * (np.abs(NW).sum(-1) > 0)           # pixels with a defined normal
    Un = U * (np.abs(NT).sum(-1) > 0)
    nd_cnt = Vn @ Un.T
    with np.errstate(invalid="ignore", divide="ignore"):
        sdot = sum((NW[:, :, c] * V) @ (NT[:, :, c] * U).T for c in range(3))
        ndot = np.where(nd_cnt > 0, sdot / np.maximum(nd_cnt, 1.0), 0.0)
        ov = cnt / U.sum(axis=1)[None, :]

    X[:, 0::3] = np.clip(ncc, -1.0, 1.0)
    X[:, 1::3] = np.clip(ndot, -1.0, 1.0)
    X[:, 2::3] = np.where(cnt > 0, ov, 0.0)
    X[empty] = 0.0
    return X, empty


# ---------------------------------------------------------------------------
# detection


def _silhouette_aspects(templates):
    """Representative width/height ratios of the template silhouettes.

    The object's projected box is rarely square, and a square window caps
    the reachable IoU well below the 0.5 matching threshold, so the grid
    slides boxes at the quartile aspects of the rendered silhouettes
    (deduplicated when closer than 10%).
    """
    ratios = []
    for d in templates.depth:
        ys, xs = np.nonzero(d > 0)
        ratios.append((xs.max() - xs.min() + 1.0) / (ys.max() - ys.min() + 1.0))
    reps = np.quantile(ratios, [0.25, 0.75])
    out = [reps[0]]
    if reps[1] / reps[0] > 1.1:
        out.append(reps[1])
    return out


def _window_grid(frame, templates, stride, scales):
    """Sliding boxes per scale and representative aspect, sized so a box at
    the median scene depth matches the median template apparent radius."""
    intr = frame.intrinsics
    valid = frame.depth[frame.depth > 0]
    if valid.size == 0:
        return []
    z_med = float(np.median(valid))
    r_med = float(np.median(templates.apparent_radius))
    side0 = 2.0 * r_med * intr.fx / z_med

    boxes = []
    seen = set()
    for s in scales:
        for a in _silhouette_aspects(templates):
            bw = int(round(side0 * s * np.sqrt(a)))
            bh = int(round(side0 * s / np.sqrt(a)))
            bw = max(MIN_SIDE, min(bw, intr.width))
            bh = max(MIN_SIDE, min(bh, intr.height))
            if (bw, bh) in seen:
                continue
            seen.add((bw, bh))
            xs = list(range(0, intr.width - bw + 1, stride))
            if xs[-1] != intr.width - bw:
                xs.append(intr.width - bw)
            ys = list(range(0, intr.height - bh + 1, stride))
            if ys[-1] != intr.height - bh:
                ys.append(intr.height - bh)
            boxes.extend((x, y, bw, bh) for y in ys for x in xs)
    return boxes


def _foreground_blobs(frame):
    """Connected components of the foreground mask with their boxes.

    Plain 4-connectivity fuses an occluder with whatever it overlaps, so
    before labelling we cut the mask at depth discontinuities: where two
    adjacent foreground pixels differ by more than _DEPTH_STEP the nearer
    one is suppressed.  The one-pixel seam sits on the occluder side, so
    the farther object keeps its full extent.

    Returns (labels, boxes) where labels is the (H, W) component map (0 is
    background) and boxes[k] the tight pixel box of component k+1.  Cached
    on the frame.
    """
    cached = getattr(frame, "_fg_blobs", None)
    if cached is not None:
        return cached
    from scipy import ndimage
    fg = foreground_mask(frame).copy()
    d = frame.depth
    for axis in (0, 1):
        lo = (slice(None, -1), slice(None)) if axis == 0 else (slice(None), slice(None, -1))
        hi = (slice(1, None), slice(None)) if axis == 0 else (slice(None), slice(1, None))
        dz = d[hi] - d[lo]
        step = (np.abs(dz) > _DEPTH_STEP) & fg[lo] & fg[hi]
        # dz > 0 means the low-index pixel is nearer; suppress that side.
        fg[lo] &= ~(step & (dz > 0))
        fg[hi] &= ~(step & (dz < 0))
    labels, n = ndimage.label(fg)
    boxes = []
    for sl in ndimage.find_objects(labels):
        ysl, xsl = sl
        boxes.append((xsl.start, ysl.start,
                      xsl.stop - xsl.start, ysl.stop - ysl.start))
    frame._fg_blobs = (labels, boxes)
    return labels, boxes


def _snap_to_blob(box, labels, blob_boxes):
    """Tight box of the dominant foreground component under a window, or
    None when the window covers no foreground at all."""
    x, y, w, h = box
    sub = labels[y:y + h, x:x + w]
    counts = np.bincount(sub.ravel(), minlength=len(blob_boxes) + 1)
    counts[0] = 0
    if counts.sum() == 0:
        return None
    return blob_boxes[int(counts.argmax()) - 1]


def _candidate_boxes(frame, templates, stride, scales):
    """Sliding windows refined to the foreground support they cover.

    Every grid window snaps to the tight box of the dominant foreground
    component under it and the snapped list is deduplicated in scan order,
    so a frame yields a handful of candidates, one per blob the grid
    touches.  Tight boxes matter: the window statistics only separate
    object identities when the window frames an object the way a template
    render does, and a loose grid window does not.  When nothing snaps
    (no foreground anywhere) the raw windows stand as candidates.  Cached
    on the frame per (templates, stride, scales).
    """
    key = (id(templates), stride, tuple(scales))
    cached = getattr(frame, "_cand_boxes", None)
    if cached is not None and cached[0] == key:
        return cached[1]
    grid = _window_grid(frame, templates, stride, scales)
    labels, blob_boxes = _foreground_blobs(frame)
    out, seen = [], set()
    for b in grid:
        sb = _snap_to_blob(b, labels, blob_boxes)
        if sb is not None and sb not in seen:
            seen.add(sb)
            out.append(sb)
    if not out:
        for b in grid:
            if b not in seen:
                seen.add(b)
                out.append(b)
    frame._cand_boxes = (key, out)
    return out


def detect(frame, templates, head, stride=STRIDE, scales=SCALES,
           want_masks=False):
    """Score candidate windows, suppress overlaps, keep the top 20.

    Candidates are the sliding-window grid snapped to foreground blobs
    (see _candidate_boxes); confidence is the logistic of the head applied
    to each reported window's features.  Windows without any valid depth
    are skipped.  Ordering is fully deterministic: confidence descending,
    earlier scan position on ties.
    """
    if len(head.w) != templates.feature_dim:
        raise ShapeMismatch(f"head dim {len(head.w)} vs feature dim "
                            f"{templates.feature_dim}")
    boxes = _candidate_boxes(frame, templates, stride, scales)
    if not boxes:
        return []
    X, empty = _batch_features(frame, boxes, templates)
    keep = ~empty
    boxes = [b for b, k in zip(boxes, keep) if k]
    X = X[keep]
    if not boxes:
        return []
    conf = expit(X @ head.w + head.b)

    order = np.lexsort((np.arange(len(boxes)), -conf))
    picked = []
    for i in order:
        if any(iou(boxes[i], boxes[j]) > NMS_IOU for j in picked):
            continue
        picked.append(i)
        if len(picked) == TOP_K:
            break

    dets = []
    for i in picked:
        mask = None
        if want_masks:
            stats = X[i, 0::3] + X[i, 1::3]
            mask = silhouette_mask(templates, int(np.argmax(stats)), boxes[i])
        dets.append(Detection(tuple(boxes[i]), float(conf[i]),
                              templates.object_id, mask))
    return dets


def silhouette_mask(templates, k, box):
    """Template k's valid-pixel silhouette resized to the box (nearest)."""
    x, y, w, h = box
    sil = templates.depth[k] > 0
    ys = np.minimum(((np.arange(h) + 0.5) * PATCH / h).astype(np.int64),
                    PATCH - 1)
    xs = np.minimum(((np.arange(w) + 0.5) * PATCH / w).astype(np.int64),
                    PATCH - 1)
    return sil[np.ix_(ys, xs)]


def zero_head(templates):
    """All-zero head: every window scores exactly 0.5."""
    return DetectorHead(np.zeros(templates.feature_dim), 0.0)


def prior_head(templates, scale=0.002, setpoint=0.35):
    """Hand-set head usable before any finetuning.

    The logit is scale * (S - setpoint) where S mixes the per-template
    statistics as mean ncc + 0.3 * mean overlap (normal agreement is left
    out: flat distractor and table patches match the flat faces of
    rendered templates on normals and drag the ranking the wrong way).

    The scale is deliberately tiny.  Ranking, which is what drives both
    crops and mAP, ignores the scale entirely, but AMSGrad moves every
    parameter by at most ~lr per step, so after a few hundred finetuning
    steps the learned part of the head is a few 1e-3 in magnitude.  A
    prior of comparable size starts the run with usable crops yet lets
    the finetuned direction take over; a large prior would freeze the
    detector at its hand-set behavior forever.
    """
    n = len(templates)
    wts = np.array([1.0, 0.0, 0.3])
    w = np.tile(wts / (wts.sum() * n), n) * scale
    return DetectorHead(w, -scale * setpoint)


# ---------------------------------------------------------------------------
# optimization


def amsgrad_step(state, params, grads):
    """One AMSGrad update; returns (state, params), inputs untouched.

    g = grad + wd*param; m and v are the usual exponential moments, vhat the
    elementwise running max of v, and the step is lr * m / (sqrt(vhat)+eps)
    with no bias correction.
    """
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ShapeMismatch(f"params {params.shape}, grads {grads.shape}, "
                            f"state {state.m.shape}")
    g = grads + state.weight_decay * params
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    vhat = np.maximum(state.vhat, v)
    new_params = params - state.lr * m / (np.sqrt(vhat) + state.eps)
    new_state = dc_replace(state, m=m, v=v, vhat=vhat, step=state.step + 1)
    return new_state, new_params


def bce_loss_and_grad(params, X, y, sample_weight=None):
    """Weighted binary cross-entropy of logistic(X w + b) and its gradient.

    params is the flat head vector [w..., b].  Uses the log1p-exp form, so
    large logits of either sign stay finite.
    """
    w, b = params[:-1], params[-1]
    z = X @ w + b
    if sample_weight is None:
        sample_weight = np.ones(len(y))
    total = sample_weight.sum()
    loss = float((sample_weight * (np.logaddexp(0.0, z) - y * z)).sum() / total)
    dz = sample_weight * (expit(z) - y) / total
    grad = np.concatenate([X.T @ dz, [dz.sum()]])
    return loss, grad


def _example_rows(ex, templates, stride, scales, n_neg_per_pos):
    """Training rows for one example: positive and negative window features.

    Windows are the same snapped candidates that detect() scores, so the
    head trains on exactly the distribution it ranks.  Positives are
    candidates with IoU >= 0.5 against the pseudo-GT box; negatives are
    sampled (seeded by the frame index, so identical across epochs and
    duplicate examples) from candidates with IoU < 0.1, three per positive
    by default.  Cached on the example since features are frozen.
    """
    key = (id(templates), stride, tuple(scales), n_neg_per_pos)
    if ex._rows is not None and ex._rows[0] == key:
        return ex._rows[1], ex._rows[2]

    boxes = _candidate_boxes(ex.frame, templates, stride, scales)
    ious = np.array([iou(b, ex.box) for b in boxes]) if boxes else np.zeros(0)
    pos_idx = np.nonzero(ious >= 0.5)[0]
    neg_pool = np.nonzero(ious < 0.1)[0]
    rng = np.random.default_rng((_NEG_SEED, ex.frame.index))
    n_neg = min(len(neg_pool), n_neg_per_pos * len(pos_idx))
    neg_idx = rng.choice(neg_pool, size=n_neg, replace=False) if n_neg else []

    sel = list(pos_idx) + list(neg_idx)
    if not sel:
        X = np.zeros((0, templates.feature_dim))
        y = np.zeros(0)
    else:
        X, _ = _batch_features(ex.frame, [boxes[i] for i in sel], templates)
        y = np.concatenate([np.ones(len(pos_idx)), np.zeros(len(neg_idx))])
    ex._rows = (key, X, y)
    return X, y


def finetune(head, state, templates, batch, negatives_per_positive=3,
             seed=0, weights=None, stride=STRIDE, scales=SCALES):
    """One epoch of head training on pseudo-labeled examples.

    The batch is shuffled (seeded) and walked in mini-batches of 8 examples;
    each example contributes its positive/negative window rows, weighted by
    the optional per-example weight, and every mini-batch takes one AMSGrad
    step on the mean binary cross-entropy.  Positive rows carry an extra
    weight of negatives_per_positive so the two classes pull with equal
    mass; without this the oversampled negatives dominate the early
    gradient and the head learns to rank everything down.  Returns the
    updated (head, state); inputs are not mutated.
    """
    if not batch:
        raise ValueError("finetune batch must be nonempty")
    if weights is None:
        weights = np.ones(len(batch))
    params = np.concatenate([head.w, [head.b]])
    order = np.random.default_rng(seed).permutation(len(batch))
    for start in range(0, len(order), 8):
        chunk = order[start:start + 8]
        xs, ys, ws = [], [], []
        for i in chunk:
            X, y = _example_rows(batch[i], templates, stride, scales,
                                 negatives_per_positive)
            xs.append(X)
            ys.append(y)
            row_w = np.where(y > 0.5, float(negatives_per_positive), 1.0)
            ws.append(row_w * float(weights[i]))
        X = np.vstack(xs)
        if len(X) == 0:
            continue
        y = np.concatenate(ys)
        w_rows = np.concatenate(ws)
        _, grad = bce_loss_and_grad(params, X, y, w_rows)
        state, params = amsgrad_step(state, params, grad)
    return DetectorHead(params[:-1], float(params[-1])), state


# ---------------------------------------------------------------------------
# checkpoint blob


def head_to_bytes(head, state):
    """Versioned little-endian blob of head + optimizer state."""
    dim = len(head.w)
    doubles = np.concatenate([
        head.w, [head.b], state.m, state.v, state.vhat,
        [float(state.step), state.lr, state.beta1, state.beta2, state.eps,
         state.weight_decay]]).astype("<f8")
    return struct.pack("<4sII", HEAD_MAGIC, HEAD_VERSION, dim) + doubles.tobytes()


def head_from_bytes(blob):
    if len(blob) < 12:
        raise MalformedFile("checkpoint too short for its header")
    magic, version, dim = struct.unpack_from("<4sII", blob, 0)
    if magic != HEAD_MAGIC:
        raise MalformedFile(f"bad magic {magic!r}")
    if version != HEAD_VERSION:
        raise MalformedFile(f"unsupported checkpoint version {version}")
    n_doubles = dim + 1 + 3 * (dim + 1) + 6
    expect = 12 + 8 * n_doubles
    if len(blob) != expect:
        raise MalformedFile(f"checkpoint is {len(blob)} bytes, "
                            f"expected {expect} for dimension {dim}")
    d = np.frombuffer(blob, dtype="<f8", offset=12)
    w = d[:dim].copy()
    b = float(d[dim])
    o = dim + 1
    m = d[o:o + dim + 1].copy()
    v = d[o + dim + 1:o + 2 * (dim + 1)].copy()
    vhat = d[o + 2 * (dim + 1):o + 3 * (dim + 1)].copy()
    tail = d[o + 3 * (dim + 1):]
    state = OptimizerState(m, v, vhat, int(tail[0]), float(tail[1]),
                           float(tail[2]), float(tail[3]), float(tail[4]),
                           float(tail[5]))
    return DetectorHead(w, b), state


def save_head(path, head, state):
    with open(path, "wb") as fh:
        fh.write(head_to_bytes(head, state))


def load_head(path):
    with open(path, "rb") as fh:
        return head_from_bytes(fh.read())
