"""Rigid transforms, triangle meshes, pinhole camera, depth rendering, normals.

Conventions used throughout the package:
  * camera frame: x right, y down, z forward (into the scene); depth = z
  * poses map object-frame points into camera frame: p_cam = R @ p_obj + t
  * depth maps are float32 (H, W) in meters with 0 marking invalid pixels
"""
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import MalformedFile, PointBehindCamera


def orthonormalize(R):
    """Nearest rotation matrix (polar decomposition via SVD, det forced +1)."""
    U, _, Vt = np.linalg.svd(R)
    out = U @ Vt
    if np.linalg.det(out) < 0:
        U = U.copy()
        U[:, -1] = -U[:, -1]
        out = U @ Vt
    return out


@dataclass
class RigidPose:
    """Rotation (3,3) + translation (3,), both float64."""
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T):
        T = np.asarray(T, dtype=np.float64)
        return cls(T[:3, :3], T[:3, 3])

    def as_matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def validate(self, tol=1e-9):
        R = self.rotation
        if not np.all(np.isfinite(R)) or not np.all(np.isfinite(self.translation)):
            raise ValueError("pose contains non-finite values")
        if np.abs(R @ R.T - np.eye(3)).max() > tol:
            raise ValueError("rotation is not orthonormal within %g" % tol)
        if abs(np.linalg.det(R) - 1.0) > 10 * tol:
            raise ValueError("rotation determinant is not +1")
        return self


def compose(a, b):
    """Pose product a∘b: apply b first, then a.

    Re-orthonormalizes the rotation if the product drifted off the manifold
    by more than 1e-9 (long chains of compositions accumulate error).
    """
    R = a.rotation @ b.rotation
    t = a.rotation @ b.translation + a.translation
    if np.abs(R @ R.T - np.eye(3)).max() > 1e-9:
        R = orthonormalize(R)
    return RigidPose(R, t)


def invert(pose):
    Rt = pose.rotation.T
    return RigidPose(Rt, -(Rt @ pose.translation))


def transform(pose, points):
    """Apply a pose to an (N, 3) point array (also accepts a single 3-vector)."""
    pts = np.asarray(points, dtype=np.float64)
    return pts @ pose.rotation.T + pose.translation


def rotate(pose, vectors):
    """Rotation-only transform, for direction vectors and normals."""
    return np.asarray(vectors, dtype=np.float64) @ pose.rotation.T


@dataclass
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    def to_dict(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d):
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], d["width"], d["height"])


@dataclass
class TriMesh:
    """Triangle mesh with per-vertex unit normals.

    vertices (N, 3) float64 meters, triangles (M, 3) int32 vertex indices,
    normals (N, 3) float64.
    """
    vertices: np.ndarray
    triangles: np.ndarray
    normals: np.ndarray
    _diameter: float = field(default=0.0, repr=False, compare=False)

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int32)
        self.normals = np.ascontiguousarray(self.normals, dtype=np.float64)

    def validate(self):
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise ValueError("vertices must be (N, 3)")
        if len(self.triangles) and (self.triangles.min() < 0
                                    or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")
        nn = np.linalg.norm(self.normals, axis=1)
        if np.abs(nn - 1.0).max() > 1e-6:
            raise ValueError("vertex normals must be unit length")
        if self.diameter() <= 0:
            raise ValueError("mesh diameter must be positive")
        return self

    def diameter(self):
        """Max pairwise vertex distance (cached after first call)."""
        if self._diameter == 0.0 and len(self.vertices):
            self._diameter = float(_max_pairwise_distance(self.vertices))
        return self._diameter


def _max_pairwise_distance(pts):
    # Chunked O(N^2); mesh sizes here stay in the low thousands.
    best = 0.0
    for i in range(0, len(pts), 512):
        blk = pts[i:i + 512]
        d2 = ((blk[:, None, :] - pts[None, :, :]) ** 2).sum(-1)
        best = max(best, float(d2.max()))
    return np.sqrt(best)


def vertex_normals_from_faces(vertices, triangles):
    """Area-weighted per-vertex normals, oriented outward from the centroid."""
    v = np.asarray(vertices, dtype=np.float64)
    t = np.asarray(triangles, dtype=np.int64)
    fn = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
    # orient faces away from the centroid before accumulating
    ctr = v.mean(axis=0)
    fc = (v[t[:, 0]] + v[t[:, 1]] + v[t[:, 2]]) / 3.0
    flip = np.einsum("ij,ij->i", fn, fc - ctr) < 0
    fn[flip] = -fn[flip]
    out = np.zeros_like(v)
    for k in range(3):
        np.add.at(out, t[:, k], fn)
    nn = np.linalg.norm(out, axis=1)
    nn[nn < 1e-12] = 1.0
    out /= nn[:, None]
    # vertices that ended up with a zero sum get a radial fallback
    bad = np.linalg.norm(out, axis=1) < 0.5
    if bad.any():
        rad = v[bad] - ctr
        rn = np.linalg.norm(rad, axis=1)
        rn[rn < 1e-12] = 1.0
        out[bad] = rad / rn[:, None]
    return out


def transform_mesh(mesh, pose):
    """Posed copy of a mesh (rotates normals too)."""
    m = TriMesh(transform(pose, mesh.vertices), mesh.triangles,
                rotate(pose, mesh.normals))
    m._diameter = mesh._diameter
    return m


def project(points, intr):
    """Pinhole projection of camera-frame points to (N, 2) pixel coordinates.

    Raises PointBehindCamera if any point has z <= 0.
    """
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    z = pts[:, 2]
    if np.any(z <= 0):
        raise PointBehindCamera("z must be positive for projection")
    uv = np.empty((len(pts), 2))
    uv[:, 0] = intr.fx * pts[:, 0] / z + intr.cx
    uv[:, 1] = intr.fy * pts[:, 1] / z + intr.cy
    return uv[0] if single else uv


def render_depth(mesh, pose, intr, want_normals=False):
    """Depth image of a posed mesh; optional per-face camera-facing normals.

    Returns a float32 (H, W) depth map (0 where nothing is hit), or a
    (depth, normals) pair with normals float32 (H, W, 3) when requested.
    """
    verts = transform(pose, mesh.vertices)
    depth, nrm = kernels.render_depth(verts, mesh.triangles,
                                      intr.fx, intr.fy, intr.cx, intr.cy,
                                      intr.width, intr.height, want_normals)
    return (depth, nrm) if want_normals else depth


def backproject_grid(depth, intr):
    """Per-pixel camera-frame points, (H, W, 3) float64; zeros where invalid."""
    d = np.asarray(depth, dtype=np.float64)
    h, w = d.shape
    u = np.arange(w, dtype=np.float64)
    v = np.arange(h, dtype=np.float64)
    out = np.zeros((h, w, 3))
    out[:, :, 0] = (u[None, :] - intr.cx) * d / intr.fx
    out[:, :, 1] = (v[:, None] - intr.cy) * d / intr.fy
    out[:, :, 2] = d
    return out


def estimate_normals(depth, intr):
    """Unit normals from central differences of back-projected depth.

    Border pixels and pixels whose 4-neighborhood is not fully valid come
    back as zero vectors.  Valid normals satisfy n · p < 0 (facing the
    camera).
    """
    d = np.asarray(depth)
    p = backproject_grid(d, intr)
    valid = d > 0
    h, w = d.shape
    out = np.zeros((h, w, 3))
    if h < 3 or w < 3:
        return out
    ok = (valid[1:-1, 1:-1] & valid[1:-1, :-2] & valid[1:-1, 2:]
          & valid[:-2, 1:-1] & valid[2:, 1:-1])
    du = p[1:-1, 2:] - p[1:-1, :-2]
    dv = p[2:, 1:-1] - p[:-2, 1:-1]
    n = np.cross(du, dv)
    nn = np.linalg.norm(n, axis=2)
    ok &= nn > 1e-12
    nn = np.where(nn > 1e-12, nn, 1.0)
    n /= nn[:, :, None]
    # flip so normals face the camera
    dots = np.einsum("ijk,ijk->ij", n, p[1:-1, 1:-1])
    n[dots > 0] = -n[dots > 0]
    n[~ok] = 0.0
    out[1:-1, 1:-1] = n
    return out


@dataclass
class PointCloud:
    """Oriented points from a depth map: one entry per valid pixel.

    normals are zero for pixels where no neighborhood normal was available;
    pixels holds (u, v) int32 image coordinates of each point.
    """
    points: np.ndarray
    normals: np.ndarray
    pixels: np.ndarray

    def __len__(self):
        return len(self.points)


def backproject(depth, intr, normal_grid=None):
    """Oriented point cloud of every valid depth pixel.

    Computes normals with estimate_normals unless a precomputed grid is
    passed in.
    """
    d = np.asarray(depth)
    if normal_grid is None:
        normal_grid = estimate_normals(d, intr)
    vs, us = np.nonzero(d > 0)
    grid = backproject_grid(d, intr)
    pix = np.stack([us, vs], axis=1).astype(np.int32)
    return PointCloud(grid[vs, us], normal_grid[vs, us], pix)


# ---------------------------------------------------------------------------
# support-plane suppression

PLANE_MARGIN = 0.008     # meters in front of the support plane to count as
                         # foreground (2x the generator noise sigma)


def _ransac_plane(pts, rng, iters=60, tol=0.006):
    best, best_n = None, 0
    for _ in range(iters):
        i = rng.choice(len(pts), 3, replace=False)
        a, b, c = pts[i]
        nrm = np.cross(b - a, c - a)
        norm = np.linalg.norm(nrm)
        if norm < 1e-12:
            continue
        nrm = nrm / norm
        if nrm[2] > 0:                     # orient toward the camera
            nrm = -nrm
        d0 = -nrm @ a
        n_in = int((np.abs(pts @ nrm + d0) < tol).sum())
        if n_in > best_n:
            best, best_n = (nrm, d0), n_in
    if best is None:
        return None
    # one least-squares refit on the consensus set
    nrm, d0 = best
    inl = pts[np.abs(pts @ nrm + d0) < tol]
    ctr = inl.mean(axis=0)
    _, _, vt = np.linalg.svd(inl - ctr, full_matrices=False)
    nrm = vt[2]
    if nrm[2] > 0:
        nrm = -nrm
    return nrm, float(-nrm @ ctr)


def foreground_mask(frame):
    """Valid pixels in front of the dominant support plane, if one exists.

    Tabletop frames are mostly table, and the table both drowns correlation
    statistics and soaks up pose votes (a flat model face pressed into the
    table explains its depth and normals perfectly).  A RANSAC plane fit
    (seeded by the frame index, so deterministic) strips the support
    surface; the plane is only accepted when it looks like one: >= 30% of
    points on it, almost nothing behind it, and at least 5% of points left
    in front.  Otherwise (object-only renders, close-ups) all valid pixels
    count as foreground.  The mask is cached on the frame.
    """
    cached = getattr(frame, "_fg_mask", None)
    if cached is not None:
        return cached
    valid = frame.depth > 0
    fg = valid
    pts = backproject_grid(frame.depth, frame.intrinsics)[valid]
    if len(pts) >= 100:
        plane = _ransac_plane(pts, np.random.default_rng(frame.index))
        if plane is not None:
            nrm, d0 = plane
            dist = pts @ nrm + d0          # positive on the camera side
            n = len(pts)
            on_plane = np.abs(dist) < 0.006
            behind = dist < -PLANE_MARGIN
            front = dist > PLANE_MARGIN
            if (on_plane.sum() >= 0.30 * n and behind.sum() <= 0.03 * n
                    and front.sum() >= 0.05 * n):
                fg = np.zeros_like(valid)
                fg[valid] = front
    frame._fg_mask = fg
    return fg


# ---------------------------------------------------------------------------
# ASCII PLY with per-vertex normals

def save_ply(path, mesh):
    n = len(mesh.vertices)
    m = len(mesh.triangles)
    lines = [
        "ply", "format ascii 1.0",
        f"element vertex {n}",
        "property double x", "property double y", "property double z",
        "property double nx", "property double ny", "property double nz",
        f"element face {m}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    for v, nv in zip(mesh.vertices, mesh.normals):
        lines.append("%.17g %.17g %.17g %.17g %.17g %.17g"
                     % (v[0], v[1], v[2], nv[0], nv[1], nv[2]))
    for t in mesh.triangles:
        lines.append("3 %d %d %d" % (t[0], t[1], t[2]))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def load_ply(path):
    """Parse the ASCII PLY subset written by save_ply."""
    with open(path) as f:
        lines = [ln.strip() for ln in f]
    if not lines or lines[0] != "ply":
        raise MalformedFile(f"{path}: missing ply magic")
    n_vert = n_face = None
    idx = 0
    for idx, ln in enumerate(lines):
        if ln.startswith("element vertex"):
            n_vert = int(ln.split()[-1])
        elif ln.startswith("element face"):
            n_face = int(ln.split()[-1])
        elif ln == "end_header":
            break
    else:
        raise MalformedFile(f"{path}: no end_header")
    if n_vert is None or n_face is None:
        raise MalformedFile(f"{path}: missing element counts")
    body = lines[idx + 1:]
    if len(body) < n_vert + n_face:
        raise MalformedFile(f"{path}: truncated body")
    try:
        vdata = np.array([[float(x) for x in body[i].split()]
                          for i in range(n_vert)])
        faces = []
        for i in range(n_vert, n_vert + n_face):
            parts = [int(x) for x in body[i].split()]
            if parts[0] != 3 or len(parts) != 4:
                raise MalformedFile(f"{path}: non-triangular face at line {i}")
            faces.append(parts[1:])
    except (ValueError, IndexError) as e:
        raise MalformedFile(f"{path}: {e}") from None
    if vdata.size and vdata.shape[1] != 6:
        raise MalformedFile(f"{path}: expected x y z nx ny nz per vertex")
    verts = vdata[:, :3] if vdata.size else np.zeros((0, 3))
    norms = vdata[:, 3:] if vdata.size else np.zeros((0, 3))
    tris = np.array(faces, dtype=np.int32).reshape(-1, 3)
    return TriMesh(verts, tris, norms)
