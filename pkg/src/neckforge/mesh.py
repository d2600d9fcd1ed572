"""Triangle meshes of two-dimensional complexes (m = 2): construction, labels and OBJ/PLY I/O."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import Delaunay

from .errors import ScaleUnresolved, UnsupportedDimension

# a neck is representable in ambient coordinates if its hole spans this many ulps of its centre
MIN_RELATIVE_HOLE = 1e-9


@dataclass
class Mesh:
    vertices: np.ndarray  # (V, 3) float64
    faces: np.ndarray  # (F, 3) int64
    labels: np.ndarray  # (F,) index into label_names
    label_names: list = field(default_factory=list)
    comments: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def label_index(self, name: str) -> int:
        if name not in self.label_names:
            self.label_names.append(name)
        return self.label_names.index(name)

    def faces_of(self, prefix: str):
        ids = [i for i, n in enumerate(self.label_names) if n == prefix or n.startswith(prefix + "-")]
        return self.faces[np.isin(self.labels, ids)]

    def components(self, prefix: str):
        """Label names starting with ``prefix`` that own at least one face."""
        used = set(np.unique(self.labels).tolist())
        return sorted(n for i, n in enumerate(self.label_names) if n.startswith(prefix) and i in used)

    def edges(self):
        """Undirected edges with their face counts."""
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        e = np.sort(e, axis=1)
        return np.unique(e, axis=0, return_counts=True)

    def euler_characteristic(self) -> int:
        used = np.unique(self.faces)
        e, _ = self.edges()
        return int(len(used) - len(e) + len(self.faces))

    def boundary_loops(self) -> int:
        """Number of closed loops formed by edges with exactly one incident face."""
        e, c = self.edges()
        b = e[c == 1]
        if len(b) == 0:
            return 0
        parent = {int(v): int(v) for v in np.unique(b)}

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        for a, c2 in b:
            ra, rb = find(int(a)), find(int(c2))
            if ra != rb:
                parent[ra] = rb
        return len({find(v) for v in parent})

    def nonmanifold_edges(self) -> int:
        _, c = self.edges()
        return int(np.sum(c > 2))

    def append(self, verts, faces, label: str, offset_faces: bool = True):
        """Append vertices and faces (faces index the new vertices unless offset_faces=False)."""
        base = len(self.vertices)
        self.vertices = np.concatenate([self.vertices, np.asarray(verts, dtype=float).reshape(-1, 3)])
        f = np.asarray(faces, dtype=np.int64) + (base if offset_faces else 0)
        self.faces = np.concatenate([self.faces, f.reshape(-1, 3)])
        self.labels = np.concatenate([self.labels, np.full(len(f), self.label_index(label), dtype=np.int64)])
        return base


def empty_mesh() -> Mesh:
    return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), np.zeros(0, dtype=np.int64), [])


# ------------------------------------------------------------------ structured pieces


def _ring_faces(n_rings: int, n_ang: int, start: int = 0):
    """CCW triangles between consecutive rings of a polar grid (index = start + i*n_ang + j)."""
    i, j = np.meshgrid(np.arange(n_rings - 1), np.arange(n_ang), indexing="ij")
    a = start + i * n_ang + j
    b = start + (i + 1) * n_ang + j
    c = start + (i + 1) * n_ang + (j + 1) % n_ang
    d = start + i * n_ang + (j + 1) % n_ang
    return np.concatenate([np.stack([a, b, c], -1).reshape(-1, 3), np.stack([a, c, d], -1).reshape(-1, 3)])


def polar_points(radii, n_ang: int, center=(0.0, 0.0), phase: float = 0.0):
    ang = phase + 2 * np.pi * np.arange(n_ang) / n_ang
    r = np.asarray(radii, dtype=float)
    x = center[0] + r[:, None] * np.cos(ang)[None, :]
    y = center[1] + r[:, None] * np.sin(ang)[None, :]
    return np.stack([x, y], axis=-1).reshape(-1, 2)


def graded_unit(n: int, first: float = 1e-3):
    """n points on [0, 1]: 0, then geometric from ``first`` to 1."""
    return np.concatenate([[0.0], np.geomspace(first, 1.0, n - 1)])


def patch_mesh(f, a: float, b: float, n_r: int, n_ang: int, both_sheets: bool = True, graded: bool = False,
               lower_sign: int = 1) -> Mesh:
    """Graph of f over a <= |x| <= b (polar grid), optionally with the reflected sheet.

    The lower sheet keeps the upper sheet's index order for ``lower_sign`` = +1 (pushforward
    orientation) and reverses it for -1.
    """
    s = graded_unit(n_r) if graded else np.linspace(0.0, 1.0, n_r)
    radii = a + (b - a) * s
    xy = polar_points(radii, n_ang)
    z = np.asarray(f.value(xy), dtype=float)
    faces = _ring_faces(n_r, n_ang)
    mesh = empty_mesh()
    mesh.append(np.column_stack([xy, z]), faces, "sheet-upper")
    if both_sheets:
        lf = faces if lower_sign > 0 else faces[:, ::-1]
        mesh.append(np.column_stack([xy, -z]), lf, "sheet-lower")
    return mesh


# ------------------------------------------------------------------ complexes


def sector_mesh(f, a: float, b: float, h: float, band=(8.2, 10.8), ratio: int = 3, half_angle: float = 0.55,
                h_ang: float | None = None, both_sheets: bool = True) -> Mesh:
    """Graph of f over the sector a <= |x| <= b, |arg x| <= half_angle.

    Radial spacing is h inside ``band`` and ratio*h outside; the gluing cutoffs have very
    large high derivatives, so the band needs the fine spacing.  Angular spacing is h_ang
    (default h/2) in radians.
    """
    lo, hi = band
    rs = np.unique(np.concatenate([np.arange(a, lo, ratio * h), np.arange(lo, hi, h),
                                   np.arange(hi, b, ratio * h), [b]]))
    h_ang = h / 2 if h_ang is None else h_ang
    n_a = int(round(2 * half_angle / h_ang)) + 1
    ang = np.linspace(-half_angle, half_angle, n_a)
    R, A = np.meshgrid(rs, ang, indexing="ij")
    xy = np.stack([R * np.cos(A), R * np.sin(A)], -1).reshape(-1, 2)
    i, j = np.meshgrid(np.arange(len(rs) - 1), np.arange(n_a - 1), indexing="ij")
    p00, p10, p11, p01 = i * n_a + j, (i + 1) * n_a + j, (i + 1) * n_a + j + 1, i * n_a + j + 1
    faces = np.concatenate([np.stack([p00, p10, p11], -1).reshape(-1, 3), np.stack([p00, p11, p01], -1).reshape(-1, 3)])
    z = np.asarray(f.value(xy), dtype=float)
    mesh = empty_mesh()
    mesh.append(np.column_stack([xy, z]), faces, "sheet-upper")
    if both_sheets:
        mesh.append(np.column_stack([xy, -z]), faces, "sheet-lower")
    mesh.meta["h"] = h
    return mesh


def _require_m2(m):
    if m != 2:
        raise UnsupportedDimension("meshes are built for m = 2 surfaces only")


def neck_radii(hole: float, outer: float, n: int, first: float = 1e-3):
    """Rings from the hole outwards, graded relative to the hole radius (the neck's own scale)."""
    if hole <= 0:
        return np.linspace(0.0, outer, n)
    return hole + hole * np.concatenate([[0.0], np.geomspace(first, (outer - hole) / hole, n - 1)])


def local_patch_mesh(graph, hole: float, k: int, disk: bool, theorem_mode: str = "T1", n_r: int = 40,
                     n_ang: int = 64, n_disk: int = 8) -> Mesh:
    """Both sheets of ``graph`` over hole <= |x| <= 12 joined along the waist ring, plus the disk.

    ``meta["rings"]`` records vertex ids of the waist ring, the next two rings of each
    sheet and the first disk ring, for the angle check.
    """
    sign = 1 if theorem_mode == "T1" else -1
    xy = polar_points(neck_radii(hole, 12.0, n_r), n_ang)
    z = np.asarray(graph.value(xy), dtype=float)
    z[:n_ang] = 0.0  # the waist / disk circle lies in the plane
    mesh = _two_sheets(xy, z, n_r, n_ang, sign, k, neck_upto=GLUE_BAND)
    j = np.arange(n_ang)
    low0 = n_r * n_ang - n_ang  # lower sheet ring i >= 1 starts at low0 + i*n_ang
    rings = {"waist": j, "upper": [j + n_ang, j + 2 * n_ang], "lower": [low0 + n_ang + j, low0 + 2 * n_ang + j]}
    if disk:
        first_inner = len(mesh.vertices)
        _add_disk(mesh, hole, (0.0, 0.0), 0, n_ang, n_disk, k)
        rings["disk"] = [first_inner + j, first_inner + n_ang + j]
    mesh.meta["rings"] = rings
    mesh.meta["hole"] = hole
    return mesh


def stage_mesh(stage, theorem_mode: str = "T1", n_r: int = 40, n_ang: int = 64, n_disk: int = 8) -> Mesh:
    """The neck patch of one stage in its local coordinates eta_k (x, t) = ((y_h - r0 e1)/r, y_3/r)."""
    glued = stage.step.glued
    _require_m2(glued.m)
    mesh = local_patch_mesh(glued, float(glued.inner_radius), stage.k, stage.disk_radius is not None,
                            theorem_mode, n_r, n_ang, n_disk)
    mesh.comments.append(f"frame neck-{stage.k} r0 {float(stage.r0)!r} r {float(stage.r)!r}")
    return mesh


GLUE_BAND = 9.0 + 2.0 / 3.0  # v = catenoid inside this radius


def _two_sheets(xy, z, n_r, n_ang, sign, k, neck_upto):
    """Upper and lower sheets sharing their first ring; triangles inside ``neck_upto`` labelled neck-k."""
    mesh = empty_mesh()
    faces = _ring_faces(n_r, n_ang)
    centroid_r = np.linalg.norm(xy[faces].mean(axis=1), axis=-1)
    neck = centroid_r < neck_upto if neck_upto else np.zeros(len(faces), bool)
    up = np.column_stack([xy, z])
    base = mesh.append(up, np.zeros((0, 3)), "sheet-upper")
    mesh.faces = np.concatenate([mesh.faces, faces[~neck] + base, faces[neck] + base])
    mesh.labels = np.concatenate([mesh.labels, np.full((~neck).sum(), mesh.label_index("sheet-upper")),
                                  np.full(neck.sum(), mesh.label_index(f"neck-{k}"))])
    # lower sheet: new vertices except the shared first ring
    low = np.column_stack([xy[n_ang:], -z[n_ang:]])
    lbase = len(mesh.vertices)
    mesh.vertices = np.concatenate([mesh.vertices, low])
    remap = np.concatenate([np.arange(n_ang), lbase + np.arange(len(low))])
    lf = remap[faces]
    if sign < 0:
        lf = lf[:, ::-1]
    mesh.faces = np.concatenate([mesh.faces, lf[~neck], lf[neck]])
    mesh.labels = np.concatenate([mesh.labels, np.full((~neck).sum(), mesh.label_index("sheet-lower")),
                                  np.full(neck.sum(), mesh.label_index(f"neck-{k}"))])
    return mesh


def _add_disk(mesh: Mesh, radius, center, ring_start: int, n_ang: int, n_disk: int, k: int):
    """Flat disk at t = 0 bounded by the ring whose vertices start at ``ring_start``."""
    inner = radius * np.linspace(0.0, 1.0, n_disk + 1)[1:-1][::-1]  # outer to inner, excluding rim
    pts = polar_points(inner, n_ang, center)
    verts = np.column_stack([pts, np.zeros(len(pts))])
    cbase = len(mesh.vertices)
    mesh.vertices = np.concatenate([mesh.vertices, verts, [[center[0], center[1], 0.0]]])
    # rings ordered rim (existing), inner rings..., centre
    ring_ids = [ring_start + np.arange(n_ang)] + [cbase + i * n_ang + np.arange(n_ang) for i in range(len(inner))]
    centre = cbase + len(pts)
    faces = []
    for a, b in zip(ring_ids[:-1], ring_ids[1:]):  # a outer, b inner
        a2, b2 = np.roll(a, -1), np.roll(b, -1)
        faces += [np.stack([b, a, a2], -1), np.stack([b, a2, b2], -1)]
    last = ring_ids[-1]
    faces.append(np.stack([np.full(n_ang, centre), last, np.roll(last, -1)], -1))
    f = np.concatenate(faces)
    mesh.faces = np.concatenate([mesh.faces, f])
    mesh.labels = np.concatenate([mesh.labels, np.full(len(f), mesh.label_index(f"disk-{k}"))])


def _inside_polygon(p, center, R, n, phase=0.0):
    """Point inside the regular n-gon inscribed in the circle (center, R)."""
    d = p - np.asarray(center)
    ang = np.mod(np.arctan2(d[:, 1], d[:, 0]) - phase, 2 * np.pi)
    sector = np.floor(ang / (2 * np.pi / n))
    mid = phase + (sector + 0.5) * 2 * np.pi / n
    proj = d[:, 0] * np.cos(mid) + d[:, 1] * np.sin(mid)
    return proj < R * math.cos(math.pi / n)


def complex_mesh(cx, n_r: int = 24, n_ang: int = 48, n_base: int = 40, n_disk: int = 6) -> Mesh:
    """Ambient-coordinate mesh of a SurfaceComplex: both sheets, neck patches and disks.

    Raises ScaleUnresolved when a neck hole is below double resolution at its centre; the
    per-stage meshes in local coordinates (``stage_mesh``) are then the representation.
    """
    _require_m2(cx.m)
    R = cx.config.ambient_radius
    sign = cx.signs["sheet-lower"]
    act = cx.active
    for s in act:
        if s.hole_radius < MIN_RELATIVE_HOLE * s.r0:
            raise ScaleUnresolved(f"neck {s.k}: hole radius {s.hole_radius:.3g} is below double resolution at "
                                  f"r0 = {s.r0:.3g}; use per-stage meshes")
    # base points away from the patches
    r_min = min([s.r0 / 4 for s in act], default=R / 64)
    radii = np.geomspace(r_min, R, n_base)
    pts = [np.zeros((1, 2))]
    for i, rr in enumerate(radii):
        pts.append(polar_points([rr], n_ang, phase=(i % 2) * np.pi / n_ang))
    base_xy = np.concatenate(pts)
    keep = np.ones(len(base_xy), bool)
    for s in act:
        keep &= np.hypot(base_xy[:, 0] - s.r0, base_xy[:, 1]) > 18 * s.r
    base_xy = base_xy[keep]

    # neck patches in local coordinates, mapped to ambient coordinates
    patches = []
    for s in act:
        glued = s.step.glued
        hole = float(glued.inner_radius)
        xl = polar_points(neck_radii(hole, 12.0, n_r), n_ang)
        zl = np.asarray(glued.value(xl), dtype=float)
        zl[:n_ang] = 0.0
        patches.append((s, xl, zl))

    # Delaunay for the region between patches: base points plus each patch's outer ring
    rings = [np.column_stack([s.r0 + s.r * xl[-n_ang:, 0], s.r * xl[-n_ang:, 1]]) for s, xl, _ in patches]
    all_xy = np.concatenate([base_xy, *rings]) if rings else base_xy
    tri = Delaunay(all_xy)
    F = tri.simplices
    cen = all_xy[F].mean(axis=1)
    ok = np.hypot(cen[:, 0], cen[:, 1]) < R
    for s, _, _ in patches:
        ok &= ~_inside_polygon(cen, (s.r0, 0.0), 12 * s.r, n_ang)
    F = F[ok]
    e1 = all_xy[F[:, 1]] - all_xy[F[:, 0]]
    e2 = all_xy[F[:, 2]] - all_xy[F[:, 0]]
    flip = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0] < 0
    F[flip] = F[flip][:, ::-1]

    z_base = np.asarray(cx.base.value(base_xy), dtype=float)
    z_rings = [s.r * zl[-n_ang:] for s, _, zl in patches]
    z_all = np.concatenate([z_base, *z_rings]) if z_rings else z_base

    mesh = empty_mesh()
    nV = len(all_xy)
    mesh.vertices = np.concatenate([np.column_stack([all_xy, z_all]), np.column_stack([all_xy, -z_all])])
    mesh.faces = np.concatenate([F, (F + nV) if sign > 0 else (F + nV)[:, ::-1]]).astype(np.int64)
    mesh.labels = np.concatenate([np.full(len(F), mesh.label_index("sheet-upper")),
                                  np.full(len(F), mesh.label_index("sheet-lower"))])
    ring_start = len(base_xy)
    for i, (s, xl, zl) in enumerate(patches):
        local = _two_sheets(xl, zl, n_r, n_ang, sign, s.k, neck_upto=GLUE_BAND)
        v = local.vertices.copy()
        v[:, 0] = s.r0 + s.r * v[:, 0]
        v[:, 1:] *= s.r
        # identify the patch's outer rings with the Delaunay ring vertices
        n_up = n_r * n_ang
        up_outer = np.arange(n_up - n_ang, n_up)
        low_outer = len(v) - n_ang + np.arange(n_ang)
        target_up = ring_start + i * n_ang + np.arange(n_ang)
        base = len(mesh.vertices)
        remap = base + np.arange(len(v))
        remap[up_outer] = target_up
        remap[low_outer] = target_up + nV
        mesh.vertices = np.concatenate([mesh.vertices, v])
        mesh.faces = np.concatenate([mesh.faces, remap[local.faces]])
        mesh.labels = np.concatenate([mesh.labels, [mesh.label_index(local.label_names[j]) for j in local.labels]])
        if s.disk_radius is not None:
            _add_disk(mesh, s.disk_radius, (s.r0, 0.0), base, n_ang, n_disk, s.k)
    return _compact(mesh)


def _compact(mesh: Mesh) -> Mesh:
    """Drop unreferenced vertices."""
    used = np.unique(mesh.faces)
    remap = -np.ones(len(mesh.vertices), dtype=np.int64)
    remap[used] = np.arange(len(used))
    mesh.vertices = mesh.vertices[used]
    mesh.faces = remap[mesh.faces]
    mesh.labels = np.asarray(mesh.labels, dtype=np.int64)
    return mesh


# ------------------------------------------------------------------ I/O


def write_obj(mesh: Mesh, path):
    with open(path, "w", encoding="ascii") as fh:
        for c in mesh.comments:
            fh.write(f"# {c}\n")
        for v in mesh.vertices:
            fh.write(f"v {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}\n")
        for i, name in enumerate(mesh.label_names):
            sel = mesh.faces[mesh.labels == i] + 1
            if len(sel):
                fh.write(f"g {name}\n")
                for a, b, c in sel:
                    fh.write(f"f {a} {b} {c}\n")


def read_obj(path) -> Mesh:
    verts, faces, labels, names = [], [], [], []
    cur = 0
    with open(path, encoding="ascii") as fh:
        for line in fh:
            parts = line.split()
            if not parts or parts[0] == "#":
                continue
            if parts[0] == "v":
                verts.append([float(t) for t in parts[1:4]])
            elif parts[0] == "g":
                names.append(parts[1])
                cur = len(names) - 1
            elif parts[0] == "f":
                faces.append([int(t.split("/")[0]) - 1 for t in parts[1:4]])
                labels.append(cur)
    return Mesh(np.array(verts, dtype=float).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3),
                np.array(labels, dtype=np.int64), names)


_FACE_DTYPE = np.dtype([("n", "u1"), ("v", "<i4", (3,)), ("label", "<i4")])


def write_ply(mesh: Mesh, path):
    """Binary little-endian PLY with double coordinates and an integer face label."""
    header = ["ply", "format binary_little_endian 1.0"]
    header += [f"comment {c}" for c in mesh.comments]
    header += [f"comment label {i} {n}" for i, n in enumerate(mesh.label_names)]
    header += [f"element vertex {len(mesh.vertices)}", "property double x", "property double y", "property double z",
               f"element face {len(mesh.faces)}", "property list uchar int vertex_indices", "property int label",
               "end_header"]
    faces = np.empty(len(mesh.faces), dtype=_FACE_DTYPE)
    faces["n"] = 3
    faces["v"] = mesh.faces
    faces["label"] = mesh.labels
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(np.ascontiguousarray(mesh.vertices, dtype="<f8").tobytes())
        fh.write(faces.tobytes())


def read_ply(path) -> Mesh:
    with open(path, "rb") as fh:
        data = fh.read()
    end = data.index(b"end_header\n") + len(b"end_header\n")
    lines = data[:end].decode("ascii").splitlines()
    if lines[1] != "format binary_little_endian 1.0":
        raise ValueError("only binary little-endian PLY files written by this module are supported")
    nv = nf = 0
    names, comments = {}, []
    for ln in lines:
        p = ln.split()
        if p[:2] == ["element", "vertex"]:
            nv = int(p[2])
        elif p[:2] == ["element", "face"]:
            nf = int(p[2])
        elif p[:2] == ["comment", "label"]:
            names[int(p[2])] = p[3]
        elif p[0] == "comment":
            comments.append(ln[len("comment "):])
    verts = np.frombuffer(data, dtype="<f8", count=3 * nv, offset=end).reshape(nv, 3).copy()
    faces = np.frombuffer(data, dtype=_FACE_DTYPE, count=nf, offset=end + 24 * nv)
    if nf and not np.all(faces["n"] == 3):
        raise ValueError("non-triangular face")
    return Mesh(verts, faces["v"].astype(np.int64), faces["label"].astype(np.int64),
                [names[i] for i in sorted(names)], comments)


def export_mesh(mesh: Mesh, path, fmt: str = "ply"):
    fmt = fmt.lower()
    if fmt == "ply":
        write_ply(mesh, path)
    elif fmt == "obj":
        write_obj(mesh, path)
    else:
        raise ValueError(f"unknown mesh format {fmt!r}")
