"""Synthetic cluttered-tabletop RGB-D streams with exact ground truth.

A static scene (table plane + resting objects) is laid out once per sequence
from the seed, then a camera orbits it; occlusion is controlled by lowering
the orbit (grazing views let distractors block the target) and by pulling the
distractor ring closer.  Ground truth comes from the clean render; sensor
noise is applied afterwards.  All randomness flows from SceneSpec.seed, so a
given spec reproduces the dataset byte for byte.

On-disk layout (everything little-endian):
    manifest.json                 spec, mesh ids, symmetries, frame list
    meshes/<id>.ply               ASCII PLY, vertices + normals + faces
    frames/NNNNNN.depth.bin       16-byte header (magic "OSSD", u32 width,
                                  u32 height, u32 reserved) + H*W float32
    frames/NNNNNN.gt.json         intrinsics + per-instance pose/box/mask
Masks are run-length encoded over the flattened row-major image, alternating
zero-run/one-run counts, starting with a zero run.
"""
import json
import struct
from dataclasses import dataclass, field, replace as dc_replace
from pathlib import Path

import numpy as np

from . import meshlib
from .errors import MalformedFile, PlacementFailure
from .geometry import (CameraIntrinsics, RigidPose, TriMesh, compose,
                       estimate_normals, load_ply, render_depth, save_ply,
                       transform)

DEPTH_MAGIC = b"OSSD"
FORMAT_VERSION = 1

_DEF_POOL = ("box", "slab", "cylinder", "cone", "sphere", "prism6", "torus")


@dataclass
class SceneSpec:
    """Everything needed to regenerate a stream bit-for-bit."""
    target_id: str = "wedge"
    distractor_pool: tuple = _DEF_POOL
    n_distractors: int = 5
    n_targets: int = 1
    n_frames: int = 60
    seed: int = 0
    occlusion: float = 0.3
    noise_std: float = 0.004      # meters at z=1 m; scales with z^2
    dropout: float = 0.02
    width: int = 160
    height: int = 120
    focal: float = 130.0
    orbit_radius: float = 0.55

    def validate(self):
        if self.n_frames < 1:
            raise ValueError("frame count must be >= 1")
        if not 0.0 <= self.occlusion <= 1.0:
            raise ValueError("occlusion must be in [0, 1]")
        if not 0.0 <= self.dropout <= 1.0:
            raise ValueError("dropout must be in [0, 1]")
        if self.n_targets < 1:
            raise ValueError("need at least one target instance")
        if self.noise_std < 0:
            raise ValueError("noise std must be >= 0")
        return self

    def intrinsics(self):
        return CameraIntrinsics(self.focal, self.focal,
                                (self.width - 1) / 2.0, (self.height - 1) / 2.0,
                                self.width, self.height)

    def orbit_height(self):
        # lower camera = more grazing = more occlusion by the distractor ring
        return max(0.45 - 0.70 * self.occlusion, 0.07)

    def to_dict(self):
        d = self.__dict__.copy()
        d["distractor_pool"] = list(self.distractor_pool)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["distractor_pool"] = tuple(d.get("distractor_pool", _DEF_POOL))
        return cls(**d)


class FrameObservation:
    """One RGB-D-without-the-RGB frame: noisy depth + derived normals."""

    def __init__(self, index, depth, intrinsics):
        self.index = index
        self.depth = depth
        self.intrinsics = intrinsics
        self._normals = None

    @property
    def normals(self):
        if self._normals is None:
            self._normals = estimate_normals(self.depth, self.intrinsics)
        return self._normals


@dataclass
class InstanceGT:
    mesh_id: str
    pose: RigidPose          # camera frame
    box: np.ndarray          # x, y, w, h (pixels)
    mask: np.ndarray         # bool (H, W) visibility in the composite scene
    visible_fraction: float
    is_target: bool


@dataclass
class _Placed:
    mesh_id: str
    pose_world: RigidPose
    footprint: float         # max horizontal vertex radius, for separation
    is_target: bool


def _random_rotation(rng):
    """Uniform random rotation (Shoemake quaternion construction)."""
    u1, u2, u3 = rng.random(3)
    q = np.array([np.sqrt(1 - u1) * np.sin(2 * np.pi * u2),
                  np.sqrt(1 - u1) * np.cos(2 * np.pi * u2),
                  np.sqrt(u1) * np.sin(2 * np.pi * u3),
                  np.sqrt(u1) * np.cos(2 * np.pi * u3)])
    x, y, z, w = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def _rest_pose(mesh, R, x, y):
    """World pose with the rotated mesh set down on the z=0 table plane."""
    rv = mesh.vertices @ R.T
    t = np.array([x, y, -rv[:, 2].min()])
    footprint = float(np.hypot(rv[:, 0], rv[:, 1]).max())
    return RigidPose(R, t), footprint


def _layout_scene(spec, meshes, rng):
    """Rejection-sample non-interpenetrating resting poses; target(s) first."""
    placed = []

    angles_used = []

    def try_place(mesh_id, is_target, budget=400):
        mesh = meshes[mesh_id]
        min_gap = 0.8 * 2 * np.pi / max(spec.n_distractors + 1, 1)
        for attempt in range(budget):
            R = _random_rotation(rng)
            if is_target and not placed:
                x, y = rng.uniform(-0.04, 0.04, 2)
                ang = None
            else:
                # ring around the first target; tighter when occlusion is
                # high, and azimuthally spread so the ring walls the target
                ang = rng.uniform(0, 2 * np.pi)
                if angles_used and attempt < budget // 2:
                    gap = min(abs((ang - a + np.pi) % (2 * np.pi) - np.pi)
                              for a in angles_used)
                    if gap < min_gap:
                        continue
                d_lo = 0.24 - 0.18 * spec.occlusion
                d_hi = 0.34 - 0.24 * spec.occlusion
                d = rng.uniform(d_lo, d_hi)
                cx0, cy0 = placed[0].pose_world.translation[:2]
                x = np.clip(cx0 + d * np.cos(ang), -0.32, 0.32)
                y = np.clip(cy0 + d * np.sin(ang), -0.32, 0.32)
            pose, footprint = _rest_pose(mesh, R, x, y)
            ok = True
            for p in placed:
                sep = np.hypot(*(pose.translation[:2]
                                 - p.pose_world.translation[:2]))
                if sep < footprint + p.footprint:
                    ok = False
                    break
            if ok:
                placed.append(_Placed(mesh_id, pose, footprint, is_target))
                if ang is not None:
                    angles_used.append(ang)
                return
        raise PlacementFailure(
            f"could not place {mesh_id!r} after {budget} attempts")

    for _ in range(spec.n_targets):
        try_place(spec.target_id, True)
    for _ in range(spec.n_distractors):
        mid = spec.distractor_pool[rng.integers(len(spec.distractor_pool))]
        try_place(mid, False)
    return placed


def _table_mesh(half=0.40, cells=10):
    """Table plane tessellated into a cell grid.

    The renderer drops any triangle with a vertex behind the camera, so a
    single huge quad would vanish whenever the orbiting camera stands over
    one of its corners; with small cells only the off-screen cell drops.
    """
    xs = np.linspace(-half, half, cells + 1)
    vv, uu = np.meshgrid(xs, xs, indexing="ij")
    v = np.stack([uu.ravel(), vv.ravel(), np.zeros(uu.size)], axis=1)
    tris = []
    for i in range(cells):
        for j in range(cells):
            a = i * (cells + 1) + j
            b = a + 1
            c = a + cells + 1
            d = c + 1
            tris += [[a, b, d], [a, d, c]]
    n = np.tile([0.0, 0.0, 1.0], (len(v), 1))
    return TriMesh(v, np.array(tris, dtype=np.int32), n)


def _camera_pose(spec, frame_idx, look_at, rng):
    """World-to-camera pose for one orbit step (x right, y down, z forward)."""
    ang = 2 * np.pi * frame_idx / spec.n_frames + rng.normal(0, 0.02)
    rad = spec.orbit_radius + rng.normal(0, 0.015)
    h = spec.orbit_height() + rng.normal(0, 0.01)
    eye = np.array([rad * np.cos(ang), rad * np.sin(ang), max(h, 0.06)])
    tgt = look_at + rng.normal(0, 0.01, 3)
    fwd = tgt - eye
    fwd /= np.linalg.norm(fwd)
    up = np.array([0.0, 0.0, 1.0])
    right = np.cross(fwd, up)
    nr = np.linalg.norm(right)
    if nr < 1e-9:
        right = np.array([1.0, 0.0, 0.0])
    else:
        right /= nr
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    return RigidPose(R, -(R @ eye))


def _mask_and_box(inst_depth, scene_depth):
    mask = (inst_depth > 0) & (inst_depth == scene_depth)
    area = int((inst_depth > 0).sum())
    vis = int(mask.sum())
    if vis == 0:
        return mask, np.zeros(4, dtype=np.int64), 0.0
    vs, us = np.nonzero(mask)
    box = np.array([us.min(), vs.min(), us.max() - us.min() + 1,
                    vs.max() - vs.min() + 1], dtype=np.int64)
    return mask, box, vis / area


def generate(spec, meshes=None):
    """Build the stream: returns (frames, gt) with gt[i] a list of InstanceGT.

    meshes maps mesh id -> TriMesh; defaults to the built-in library.
    """
    spec.validate()
    if meshes is None:
        ids = {spec.target_id, *spec.distractor_pool}
        meshes = meshlib.build_library(sorted(ids))
    ss = np.random.SeedSequence(spec.seed)
    children = ss.spawn(spec.n_frames + 2)
    layout_rng = np.random.default_rng(children[0])
    cam_rng = np.random.default_rng(children[1])

    placed = _layout_scene(spec, meshes, layout_rng)
    table = _table_mesh()
    intr = spec.intrinsics()
    look_at = placed[0].pose_world.translation + np.array([0, 0, 0.04])

    frames, gts = [], []
    for t in range(spec.n_frames):
        cam = _camera_pose(spec, t, look_at, cam_rng)
        # composite clean render: table + every instance
        scene = render_depth(table, cam, intr)
        inst_depths = []
        cam_poses = []
        for p in placed:
            pc = compose(cam, p.pose_world)
            cam_poses.append(pc)
            d = render_depth(meshes[p.mesh_id], pc, intr)
            inst_depths.append(d)
            np.minimum(scene, d, out=scene, where=d > 0)
            scene[(scene == 0) & (d > 0)] = d[(scene == 0) & (d > 0)]

        gt_list = []
        for p, pc, d in zip(placed, cam_poses, inst_depths):
            mask, box, vis = _mask_and_box(d, scene)
            gt_list.append(InstanceGT(p.mesh_id, pc, box, mask, vis,
                                      p.is_target))

        noise_rng = np.random.default_rng(children[t + 2])
        noisy = scene.astype(np.float64)
        valid = noisy > 0
        noisy[valid] += (noise_rng.standard_normal(int(valid.sum()))
                         * spec.noise_std * noisy[valid] ** 2)
        drop = noise_rng.random(scene.shape) < spec.dropout
        noisy[drop | (noisy <= 1e-4)] = 0.0
        noisy[~valid] = 0.0
        frames.append(FrameObservation(t, noisy.astype(np.float32), intr))
        gts.append(gt_list)
    return frames, gts


# ---------------------------------------------------------------------------
# mask run-length coding (flattened row-major, alternating 0-run/1-run)

def mask_to_rle(mask):
    flat = np.asarray(mask, dtype=np.uint8).ravel()
    if flat.size == 0:
        return []
    change = np.nonzero(np.diff(flat))[0] + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat[0] == 1:
        runs = [0] + runs
    return [int(r) for r in runs]


def rle_to_mask(runs, height, width):
    flat = np.zeros(height * width, dtype=bool)
    pos = 0
    for i, r in enumerate(runs):
        if i % 2 == 1:
            flat[pos:pos + r] = True
        pos += r
    if pos != flat.size:
        raise MalformedFile(f"mask runs sum to {pos}, expected {flat.size}")
    return flat.reshape(height, width)


# ---------------------------------------------------------------------------
# dataset serialization

def _dump_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, sort_keys=True, separators=(",", ":"))
        f.write("\n")


def _depth_path(root, i):
    return Path(root) / "frames" / f"{i:06d}.depth.bin"


def _gt_path(root, i):
    return Path(root) / "frames" / f"{i:06d}.gt.json"


def write_depth_bin(path, depth):
    h, w = depth.shape
    with open(path, "wb") as f:
        f.write(DEPTH_MAGIC)
        f.write(struct.pack("<III", w, h, 0))
        f.write(np.ascontiguousarray(depth, dtype="<f4").tobytes())


def read_depth_bin(path):
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != DEPTH_MAGIC:
        raise MalformedFile(f"{path}: bad depth header at byte offset 0")
    w, h, _ = struct.unpack("<III", raw[4:16])
    need = 16 + 4 * w * h
    if len(raw) < need:
        raise MalformedFile(
            f"{path}: truncated at byte offset {len(raw)} (need {need})")
    d = np.frombuffer(raw[16:need], dtype="<f4").reshape(h, w)
    return np.ascontiguousarray(d)


def write_dataset(path, spec, frames, gts, meshes=None):
    """Persist a generated stream; layout documented in the module docstring."""
    root = Path(path)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    (root / "meshes").mkdir(parents=True, exist_ok=True)
    if meshes is None:
        ids = {spec.target_id, *spec.distractor_pool}
        meshes = meshlib.build_library(sorted(ids))
    for mid in sorted(meshes):
        save_ply(root / "meshes" / f"{mid}.ply", meshes[mid])
    manifest = {
        "format": "ossid-dataset",
        "version": FORMAT_VERSION,
        "spec": spec.to_dict(),
        "mesh_ids": sorted(meshes),
        "symmetries": {mid: [np.asarray(S).ravel().tolist()
                             for S in meshlib.mesh_symmetries(mid)]
                       for mid in sorted(meshes)},
        "intrinsics": spec.intrinsics().to_dict(),
        "frames": [f"frames/{i:06d}" for i in range(len(frames))],
    }
    _dump_json(root / "manifest.json", manifest)
    for i, (frame, gt_list) in enumerate(zip(frames, gts)):
        write_depth_bin(_depth_path(root, i), frame.depth)
        obj = {
            "frame": i,
            "intrinsics": frame.intrinsics.to_dict(),
            "instances": [{
                "mesh_id": g.mesh_id,
                "pose": g.pose.as_matrix().ravel().tolist(),
                "box": [int(x) for x in g.box],
                "mask_rle": mask_to_rle(g.mask),
                "visible_fraction": g.visible_fraction,
                "is_target": g.is_target,
            } for g in gt_list],
        }
        _dump_json(_gt_path(root, i), obj)


class Dataset:
    """Lazy reader for the on-disk stream format."""

    def __init__(self, root):
        self.root = Path(root)
        mpath = self.root / "manifest.json"
        if not mpath.exists():
            raise MalformedFile(f"{mpath}: missing manifest")
        try:
            man = json.loads(mpath.read_text())
        except json.JSONDecodeError as e:
            raise MalformedFile(f"{mpath}: {e}") from None
        if man.get("format") != "ossid-dataset":
            raise MalformedFile(f"{mpath}: not an ossid dataset manifest")
        if man.get("version") != FORMAT_VERSION:
            raise MalformedFile(f"{mpath}: unsupported version "
                                f"{man.get('version')}")
        self.manifest = man
        self.spec = SceneSpec.from_dict(man["spec"])
        self.intrinsics = CameraIntrinsics.from_dict(man["intrinsics"])
        self.symmetries = {mid: [np.array(s, dtype=np.float64).reshape(3, 3)
                                 for s in syms]
                           for mid, syms in man["symmetries"].items()}
        for stem in man["frames"]:
            for suffix in (".depth.bin", ".gt.json"):
                p = self.root / (stem + suffix)
                if not p.exists():
                    raise MalformedFile(f"manifest references missing {p}")
        self._meshes = None

    def __len__(self):
        return len(self.manifest["frames"])

    @property
    def meshes(self):
        if self._meshes is None:
            self._meshes = {mid: load_ply(self.root / "meshes" / f"{mid}.ply")
                            for mid in self.manifest["mesh_ids"]}
        return self._meshes

    def frame(self, i):
        depth = read_depth_bin(_depth_path(self.root, i))
        if depth.shape != (self.intrinsics.height, self.intrinsics.width):
            raise MalformedFile(f"frame {i}: depth shape {depth.shape} does "
                                f"not match intrinsics")
        return FrameObservation(i, depth, self.intrinsics)

    def gt(self, i):
        try:
            obj = json.loads(_gt_path(self.root, i).read_text())
        except json.JSONDecodeError as e:
            raise MalformedFile(f"frame {i} gt: {e}") from None
        h, w = self.intrinsics.height, self.intrinsics.width
        out = []
        for g in obj["instances"]:
            T = np.array(g["pose"], dtype=np.float64).reshape(4, 4)
            out.append(InstanceGT(g["mesh_id"], RigidPose.from_matrix(T),
                                  np.array(g["box"], dtype=np.int64),
                                  rle_to_mask(g["mask_rle"], h, w),
                                  g["visible_fraction"], g["is_target"]))
        return out

    def target_gt(self, i):
        """GT entries for target instances only."""
        return [g for g in self.gt(i) if g.is_target]
