"""Procedural desk-scale object meshes with analytic normals and symmetries.

Eight shapes with diameters between roughly 9 and 16 cm.  Declared symmetries
are restricted to signed-permutation rotation matrices (entries 0/±1): those
compose exactly in floating point, which keeps symmetry-aware metrics exactly
invariant under gt -> gt·S.  Shapes with finer symmetry (hex prism, 16-gon
cylinder) therefore declare only the signed-permutation subgroup.
"""
import numpy as np

from .geometry import TriMesh

MESH_IDS = ["box", "slab", "cylinder", "cone", "sphere", "prism6", "wedge",
            "torus"]


def _mesh(verts, tris, norms):
    return TriMesh(np.asarray(verts, dtype=np.float64),
                   np.asarray(tris, dtype=np.int32),
                   np.asarray(norms, dtype=np.float64))


def _make_box(sx, sy, sz):
    hx, hy, hz = sx / 2, sy / 2, sz / 2
    verts, norms, tris = [], [], []
    # (axis, sign): four corners per face, duplicated for sharp normals
    for axis in range(3):
        for sign in (-1.0, 1.0):
            n = [0.0, 0.0, 0.0]
            n[axis] = sign
            a, b = (axis + 1) % 3, (axis + 2) % 3
            half = [hx, hy, hz]
            base = len(verts)
            for da, db in ((-1, -1), (1, -1), (1, 1), (-1, 1)):
                v = [0.0, 0.0, 0.0]
                v[axis] = sign * half[axis]
                v[a] = da * half[a]
                v[b] = db * half[b]
                verts.append(v)
                norms.append(n)
            if sign > 0:
                tris += [[base, base + 1, base + 2], [base, base + 2, base + 3]]
            else:
                tris += [[base, base + 2, base + 1], [base, base + 3, base + 2]]
    return _mesh(verts, tris, norms)


def _make_prism(n_seg, radius, height):
    """Regular prism along z with flat caps (cylinder for n_seg=16)."""
    hz = height / 2
    ang = 2 * np.pi * np.arange(n_seg) / n_seg
    cs, sn = np.cos(ang), np.sin(ang)
    verts, norms, tris = [], [], []
    # side wall, radial normals
    for z in (-hz, hz):
        for c, s in zip(cs, sn):
            verts.append([radius * c, radius * s, z])
            norms.append([c, s, 0.0])
    for k in range(n_seg):
        k2 = (k + 1) % n_seg
        tris += [[k, k2, n_seg + k2], [k, n_seg + k2, n_seg + k]]
    # caps
    for sign, z in ((-1.0, -hz), (1.0, hz)):
        base = len(verts)
        verts.append([0.0, 0.0, z])
        norms.append([0.0, 0.0, sign])
        for c, s in zip(cs, sn):
            verts.append([radius * c, radius * s, z])
            norms.append([0.0, 0.0, sign])
        for k in range(n_seg):
            k2 = (k + 1) % n_seg
            if sign > 0:
                tris.append([base, base + 1 + k, base + 1 + k2])
            else:
                tris.append([base, base + 1 + k2, base + 1 + k])
    return _mesh(verts, tris, norms)


def _make_cone(n_seg, radius, height):
    hz = height / 2
    ang = 2 * np.pi * np.arange(n_seg) / n_seg
    cs, sn = np.cos(ang), np.sin(ang)
    slant = np.hypot(radius, height)
    nr, nz = height / slant, radius / slant
    verts, norms, tris = [], [], []
    for c, s in zip(cs, sn):
        verts.append([radius * c, radius * s, -hz])
        norms.append([nr * c, nr * s, nz])
    apex = len(verts)
    verts.append([0.0, 0.0, hz])
    norms.append([0.0, 0.0, 1.0])
    for k in range(n_seg):
        tris.append([k, (k + 1) % n_seg, apex])
    base = len(verts)
    verts.append([0.0, 0.0, -hz])
    norms.append([0.0, 0.0, -1.0])
    for c, s in zip(cs, sn):
        verts.append([radius * c, radius * s, -hz])
        norms.append([0.0, 0.0, -1.0])
    for k in range(n_seg):
        tris.append([base, base + 1 + (k + 1) % n_seg, base + 1 + k])
    return _mesh(verts, tris, norms)


def _make_sphere(radius, n_ring=9, n_seg=16):
    verts = [[0.0, 0.0, -radius]]
    norms = [[0.0, 0.0, -1.0]]
    lats = -np.pi / 2 + np.pi * (np.arange(n_ring) + 1) / (n_ring + 1)
    ang = 2 * np.pi * np.arange(n_seg) / n_seg
    for lat in lats:
        cl, sl = np.cos(lat), np.sin(lat)
        for c, s in zip(np.cos(ang), np.sin(ang)):
            n = [cl * c, cl * s, sl]
            norms.append(n)
            verts.append([radius * n[0], radius * n[1], radius * n[2]])
    top = len(verts)
    verts.append([0.0, 0.0, radius])
    norms.append([0.0, 0.0, 1.0])
    tris = []
    for k in range(n_seg):
        tris.append([0, 1 + (k + 1) % n_seg, 1 + k])
    for r in range(n_ring - 1):
        a = 1 + r * n_seg
        b = a + n_seg
        for k in range(n_seg):
            k2 = (k + 1) % n_seg
            tris += [[a + k, a + k2, b + k2], [a + k, b + k2, b + k]]
    a = 1 + (n_ring - 1) * n_seg
    for k in range(n_seg):
        tris.append([a + k, a + (k + 1) % n_seg, top])
    return _mesh(verts, tris, norms)


def _make_wedge(tri2d, length):
    """Scalene-triangle prism; no nontrivial symmetry (asymmetric target).

    The cross-section must be scalene with all three side lengths well
    separated (tens of millimetres).  A right or near-isosceles triangle has
    a 180-degree flip that swaps two similar sides while mapping the caps
    onto each other; at sensor sampling density that flip is indistinguishable
    from the identity to local surface features, which defeats the shape's
    role as the asymmetric target.
    """
    hz = length / 2
    tri2d = np.asarray(tri2d, dtype=np.float64).copy()
    tri2d -= tri2d.mean(axis=0)
    verts, norms, tris = [], [], []
    for sign, z in ((-1.0, -hz), (1.0, hz)):
        base = len(verts)
        for x, y in tri2d:
            verts.append([x, y, z])
            norms.append([0.0, 0.0, sign])
        if sign > 0:
            tris.append([base, base + 1, base + 2])
        else:
            tris.append([base, base + 2, base + 1])
    # three side quads with outward in-plane normals
    edges = [(0, 1), (1, 2), (2, 0)]
    for i, j in edges:
        p, q = tri2d[i], tri2d[j]
        e = q - p
        n = np.array([e[1], -e[0]]) / np.linalg.norm(e)
        base = len(verts)
        for x, y in (p, q):
            for z in (-hz, hz):
                verts.append([x, y, z])
                norms.append([n[0], n[1], 0.0])
        tris += [[base, base + 2, base + 3], [base, base + 3, base + 1]]
    return _mesh(verts, tris, norms)


def _make_torus(major, minor, n_major=16, n_minor=8):
    u = 2 * np.pi * np.arange(n_major) / n_major
    v = 2 * np.pi * np.arange(n_minor) / n_minor
    verts, norms = [], []
    for cu, su in zip(np.cos(u), np.sin(u)):
        for cv, sv in zip(np.cos(v), np.sin(v)):
            verts.append([(major + minor * cv) * cu,
                          (major + minor * cv) * su,
                          minor * sv])
            norms.append([cv * cu, cv * su, sv])
    tris = []
    for i in range(n_major):
        i2 = (i + 1) % n_major
        for j in range(n_minor):
            j2 = (j + 1) % n_minor
            a = i * n_minor + j
            b = i * n_minor + j2
            c = i2 * n_minor + j
            d = i2 * n_minor + j2
            tris += [[a, c, d], [a, d, b]]
    return _mesh(verts, tris, norms)


_BUILDERS = {
    "box": lambda: _make_box(0.10, 0.07, 0.05),
    "slab": lambda: _make_box(0.12, 0.09, 0.02),
    "cylinder": lambda: _make_prism(16, 0.04, 0.10),
    "cone": lambda: _make_cone(16, 0.05, 0.11),
    "sphere": lambda: _make_sphere(0.055),
    "prism6": lambda: _make_prism(6, 0.045, 0.09),
    "wedge": lambda: _make_wedge([[0.0, 0.0], [0.115, 0.0], [-0.02, 0.06]],
                                 0.075),
    "torus": lambda: _make_torus(0.045, 0.018),
}


def make_mesh(mesh_id):
    try:
        return _BUILDERS[mesh_id]().validate()
    except KeyError:
        raise KeyError(f"unknown mesh id {mesh_id!r}; have {MESH_IDS}") from None


def build_library(ids=None):
    return {mid: make_mesh(mid) for mid in (ids or MESH_IDS)}


# ---------------------------------------------------------------------------
# declared symmetries (signed-permutation rotations only; see module docstring)

_RZ90 = np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1]], dtype=np.float64)
_RZ180 = np.array([[-1, 0, 0], [0, -1, 0], [0, 0, 1]], dtype=np.float64)
_RX180 = np.array([[1, 0, 0], [0, -1, 0], [0, 0, -1]], dtype=np.float64)
_RY180 = np.array([[-1, 0, 0], [0, 1, 0], [0, 0, -1]], dtype=np.float64)


def _close_group(generators):
    """All products of the generators (small groups only; exact 0/±1 entries)."""
    group = [np.eye(3)]
    frontier = list(group)
    while frontier:
        nxt = []
        for g in frontier:
            for s in generators:
                cand = g @ s
                if not any(np.array_equal(cand, h) for h in group):
                    group.append(cand)
                    nxt.append(cand)
        frontier = nxt
    return group


_SYMMETRY_GENERATORS = {
    "box": [_RZ180, _RX180],
    "slab": [_RZ180, _RX180],
    "cylinder": [_RZ90, _RX180],
    "cone": [_RZ90],
    "sphere": [_RZ90, _RX180],
    "prism6": [_RZ180, _RX180],
    "wedge": [],
    "torus": [_RZ90, _RX180],
}


def mesh_symmetries(mesh_id):
    """Symmetry rotations for a library mesh, identity always first."""
    gens = _SYMMETRY_GENERATORS.get(mesh_id, [])
    return _close_group(gens)
