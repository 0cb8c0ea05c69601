"""Triangle meshes for object injection: procedural shapes, OFF I/O, surface sampling."""
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import ParseError


@dataclass(frozen=True, eq=False)
class Mesh:
    vertices: np.ndarray  # (n, 3) float64
    faces: np.ndarray  # (m, 3) int64

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("face references a missing vertex")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def extents(self) -> np.ndarray:
        return self.vertices.max(axis=0) - self.vertices.min(axis=0)

    def triangle_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.faces[:, k]] for k in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def merge(*meshes: Mesh) -> Mesh:
    verts, faces, off = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        faces.append(m.faces + off)
        off += len(m.vertices)
    return Mesh(np.concatenate(verts), np.concatenate(faces))


def box_mesh(size=(1.0, 1.0, 1.0), center=(0.0, 0.0, 0.0)) -> Mesh:
    sx, sy, sz = (0.5 * s for s in size)
    v = np.array([[x, y, z] for x in (-sx, sx) for y in (-sy, sy) for z in (-sz, sz)]) + np.asarray(center, float)
    # vertex index = 4*ix + 2*iy + iz
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    faces = [(a, b, c) for a, b, c, d in quads] + [(a, c, d) for a, b, c, d in quads]
    return Mesh(v, faces)


def cylinder_mesh(radius=0.5, height=1.0, segments=24) -> Mesh:
    ang = np.linspace(0.0, 2 * math.pi, segments, endpoint=False)
    ring = np.c_[radius * np.cos(ang), radius * np.sin(ang)]
    bottom = np.c_[ring, np.full(segments, -0.5 * height)]
    top = np.c_[ring, np.full(segments, 0.5 * height)]
    v = np.vstack([bottom, top, [[0, 0, -0.5 * height], [0, 0, 0.5 * height]]])
    cb, ct = 2 * segments, 2 * segments + 1
    faces = []
    for i in range(segments):
        j = (i + 1) % segments
        faces += [(i, j, segments + j), (i, segments + j, segments + i), (cb, j, i), (ct, segments + i, segments + j)]
    return Mesh(v, faces)


def cone_mesh(radius=0.5, height=1.0, segments=24) -> Mesh:
    ang = np.linspace(0.0, 2 * math.pi, segments, endpoint=False)
    base = np.c_[radius * np.cos(ang), radius * np.sin(ang), np.full(segments, -0.5 * height)]
    v = np.vstack([base, [[0, 0, 0.5 * height], [0, 0, -0.5 * height]]])
    apex, cb = segments, segments + 1
    faces = []
    for i in range(segments):
        j = (i + 1) % segments
        faces += [(i, j, apex), (cb, j, i)]
    return Mesh(v, faces)


def l_shape_mesh() -> Mesh:
    return merge(box_mesh((1.0, 0.3, 0.4), (0.0, -0.35, -0.3)), box_mesh((0.3, 1.0, 0.4), (-0.35, 0.0, -0.3)), box_mesh((0.3, 0.3, 1.0), (-0.35, -0.35, 0.0)))


def table_mesh() -> Mesh:
    parts = [box_mesh((1.0, 0.6, 0.06), (0.0, 0.0, 0.47))]
    for sx in (-0.45, 0.45):
        for sy in (-0.25, 0.25):
            parts.append(box_mesh((0.06, 0.06, 0.94), (sx, sy, -0.03)))
    return merge(*parts)


def default_mesh_bank():
    return {
        "box": box_mesh(),
        "cylinder": cylinder_mesh(),
        "cone": cone_mesh(),
        "l_shape": l_shape_mesh(),
        "table": table_mesh(),
    }


def normalize_unit(mesh: Mesh) -> Mesh:
    """Centre the bounding box on the origin and scale its largest side to 1."""
    lo = mesh.vertices.min(axis=0)
    hi = mesh.vertices.max(axis=0)
    scale = float((hi - lo).max())
    if scale <= 0:
        raise ValueError("degenerate mesh")
    return Mesh((mesh.vertices - 0.5 * (lo + hi)) / scale, mesh.faces)


def sample_surface(mesh: Mesh, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` points uniformly distributed over the mesh surface (area-weighted)."""
    areas = mesh.triangle_areas()
    total = areas.sum()
    if total <= 0:
        raise ValueError("mesh has zero surface area")
    tri = rng.choice(len(areas), size=n, p=areas / total)
    u = rng.random(n)
    v = rng.random(n)
    flip = u + v > 1.0
    u[flip] = 1.0 - u[flip]
    v[flip] = 1.0 - v[flip]
    a, b, c = (mesh.vertices[mesh.faces[tri, k]] for k in range(3))
    return a + u[:, None] * (b - a) + v[:, None] * (c - a)


def read_off(path) -> Mesh:
    """ASCII OFF reader (ModelNet flavour, including the fused 'OFFn m k' header)."""
    path = Path(path)
    tokens = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if line:
            tokens.append((lineno, line))
    if not tokens or not tokens[0][1].startswith("OFF"):
        raise ParseError("missing OFF header", line=1, path=path)
    head = tokens[0][1][3:].split()
    rest = tokens[1:]
    if not head:
        if not rest:
            raise ParseError("missing counts line", path=path)
        head = rest[0][1].split()
        rest = rest[1:]
    try:
        nv, nf = int(head[0]), int(head[1])
    except (IndexError, ValueError):
        raise ParseError("bad counts line", line=tokens[0][0], path=path) from None
    if len(rest) < nv + nf:
        raise ParseError(f"expected {nv} vertices and {nf} faces", path=path)
    verts = []
    for lineno, line in rest[:nv]:
        parts = line.split()
        try:
            verts.append([float(p) for p in parts[:3]])
        except ValueError:
            raise ParseError("bad vertex", line=lineno, path=path) from None
    faces = []
    for lineno, line in rest[nv:nv + nf]:
        try:
            parts = [int(p) for p in line.split()]
        except ValueError:
            raise ParseError("bad face", line=lineno, path=path) from None
        k = parts[0]
        idx = parts[1:1 + k]
        if len(idx) != k or k < 3:
            raise ParseError("bad face", line=lineno, path=path)
        faces += [(idx[0], idx[i], idx[i + 1]) for i in range(1, k - 1)]
    return Mesh(np.array(verts), np.array(faces))


def write_off(mesh: Mesh, path) -> Path:
    path = Path(path)
    lines = ["OFF", f"{len(mesh.vertices)} {len(mesh.faces)} 0"]
    lines += [" ".join(repr(float(c)) for c in v) for v in mesh.vertices]
    lines += ["3 " + " ".join(str(int(i)) for i in f) for f in mesh.faces]
    path.write_text("\n".join(lines) + "\n")
    return path


def load_mesh_dir(directory):
    """All ``*.off`` files in a directory, keyed by file stem."""
    return {p.stem: read_off(p) for p in sorted(Path(directory).glob("*.off"))}
