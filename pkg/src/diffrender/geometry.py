"""Triangle-mesh containers, primitives, file I/O and the camera transform.

Coordinate conventions used throughout the package:

* object space is right-handed, y up; the camera always looks at the origin
  from a spherical position (azimuth, elevation, distance), up = +y
* screen space is in pixels: x grows right, y grows down, and the center of
  pixel (row r, column c) sits at (c + 0.5, r + 0.5)
* per-vertex depth is camera-space distance along the view axis; vertices in
  front of the camera have positive depth
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

_ICOSPHERE_MAX_LEVEL = 6
_MIN_DEPTH = 1e-9

NTEX_MAGIC = b"NTEX"


class ObjParseError(ValueError):
    """Malformed OBJ input; carries the offending line number."""

    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")
        self.line_no = line_no


@dataclass
class Mesh:
    """Triangle mesh: vertices (N,3), faces (F,3) int, optional per-face
    texture cubes (F, s, s, s, 3) with channels in [0, 1].

    Texture cube axes are indexed [x, y, z]: the first barycentric weight
    maps to axis 0, the second to axis 1, the third to axis 2.
    """

    vertices: np.ndarray
    faces: np.ndarray
    textures: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.textures is not None:
            self.textures = np.asarray(self.textures, dtype=np.float64)
        self.validate()

    def validate(self):
        n_v = len(self.vertices)
        if self.faces.size:
            if self.faces.min() < 0 or self.faces.max() >= n_v:
                raise ValueError(
                    f"face index out of range [0, {n_v}): "
                    f"min {self.faces.min()}, max {self.faces.max()}"
                )
            degenerate = (
                (self.faces[:, 0] == self.faces[:, 1])
                | (self.faces[:, 1] == self.faces[:, 2])
                | (self.faces[:, 0] == self.faces[:, 2])
            )
            if degenerate.any():
                raise ValueError(
                    f"face {int(np.argmax(degenerate))} repeats a vertex index"
                )
        if self.textures is not None:
            if self.textures.ndim != 5 or self.textures.shape[4] != 3:
                raise ValueError("textures must have shape (n_faces, s, s, s, 3)")
            if self.textures.shape[0] != len(self.faces):
                raise ValueError(
                    f"{self.textures.shape[0]} texture cubes for "
                    f"{len(self.faces)} faces"
                )
            s = self.textures.shape[1]
            if not (self.textures.shape[2] == self.textures.shape[3] == s) or s < 2:
                raise ValueError("texture cubes must be cubic with side >= 2")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def copy(self) -> "Mesh":
        return Mesh(
            self.vertices.copy(),
            self.faces.copy(),
            None if self.textures is None else self.textures.copy(),
        )


@dataclass(frozen=True)
class Viewpoint:
    """Camera placement on a sphere around the origin. Angles in degrees."""

    azimuth: float
    elevation: float
    distance: float
    field_of_view: float = 30.0

    def __post_init__(self):
        if not self.distance > 0:
            raise ValueError(f"distance must be positive, got {self.distance}")
        if not 0 < self.field_of_view < 180:
            raise ValueError(
                f"field_of_view must be in (0, 180), got {self.field_of_view}"
            )

    def eye(self) -> np.ndarray:
        az = math.radians(self.azimuth)
        el = math.radians(self.elevation)
        return self.distance * np.array(
            [math.cos(el) * math.sin(az), math.sin(el), math.cos(el) * math.cos(az)]
        )

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Orthonormal (right, up, forward) of the look-at frame."""
        eye = self.eye()
        fwd = -eye / np.linalg.norm(eye)
        world_up = np.array([0.0, 1.0, 0.0])
        right = np.cross(fwd, world_up)
        norm = np.linalg.norm(right)
        if norm < 1e-12:
            # looking straight up/down the y axis; fall back to a fixed up
            right = np.cross(fwd, np.array([0.0, 0.0, 1.0]))
            norm = np.linalg.norm(right)
        right = right / norm
        up = np.cross(right, fwd)
        return right, up, fwd


@dataclass
class ScreenVertices:
    """Vertices after the object-to-screen transform.

    positions are pixel coordinates (N,2); depths (N,) are camera-space
    distances along the view axis; valid flags vertices strictly in front
    of the camera (faces touching an invalid vertex are culled downstream).
    """

    positions: np.ndarray
    depths: np.ndarray
    valid: np.ndarray

    def __len__(self):
        return len(self.positions)


@dataclass
class EdgeAdjacency:
    """Interior edges of a mesh: vertex pairs plus the two incident faces
    (lower face index first)."""

    vertex_pairs: np.ndarray  # (E, 2) int
    face_pairs: np.ndarray  # (E, 2) int

    def __len__(self):
        return len(self.vertex_pairs)


# ---------------------------------------------------------------------------
# primitives


def generate_icosphere(subdivision_level: int) -> Mesh:
    """Unit icosphere: subdivided icosahedron with vertices renormalized to
    the unit sphere and consistent outward (counter-clockwise) winding.

    Vertex counts follow 10 * 4**level + 2 (12, 42, 162, 642, ...).
    """
    if subdivision_level < 0:
        raise ValueError("subdivision_level must be non-negative")
    if subdivision_level > _ICOSPHERE_MAX_LEVEL:
        raise ValueError(
            f"subdivision_level {subdivision_level} exceeds the guard of "
            f"{_ICOSPHERE_MAX_LEVEL} (memory)"
        )

    t = (1.0 + math.sqrt(5.0)) / 2.0
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    verts = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]

    midpoints: dict[tuple[int, int], int] = {}

    def midpoint(i: int, j: int) -> int:
        key = (i, j) if i < j else (j, i)
        cached = midpoints.get(key)
        if cached is not None:
            return cached
        m = verts[i] + verts[j]
        verts.append(m / np.linalg.norm(m))
        midpoints[key] = len(verts) - 1
        return midpoints[key]

    for _ in range(subdivision_level):
        next_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            next_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = next_faces

    return Mesh(np.array(verts), np.array(faces, dtype=np.int64))


def face_normals(vertices: np.ndarray, faces: np.ndarray, normalize=True) -> np.ndarray:
    """Per-face normals from object-space vertices (right-hand rule over the
    winding order). Degenerate faces yield zero vectors when normalizing."""
    v0 = vertices[faces[:, 0]]
    n = np.cross(vertices[faces[:, 1]] - v0, vertices[faces[:, 2]] - v0)
    if normalize:
        lengths = np.linalg.norm(n, axis=1, keepdims=True)
        n = np.divide(n, lengths, out=np.zeros_like(n), where=lengths > 0)
    return n


# ---------------------------------------------------------------------------
# OBJ and texture-cube I/O


def load_obj(path) -> Mesh:
    """Read a Wavefront OBJ. Only `v` and `f` records are honored; `vt`/`vn`
    and other records are ignored. Polygons are fan-triangulated."""
    vertices: list[tuple[float, float, float]] = []
    faces: list[tuple[int, int, int]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            tag = parts[0]
            if tag == "v":
                if len(parts) < 4:
                    raise ObjParseError(path, line_no, "vertex needs 3 coordinates")
                try:
                    vertices.append(tuple(float(p) for p in parts[1:4]))
                except ValueError as exc:
                    raise ObjParseError(path, line_no, f"bad coordinate: {exc}")
            elif tag == "f":
                if len(parts) < 4:
                    raise ObjParseError(path, line_no, "face needs >= 3 vertices")
                idx = []
                for p in parts[1:]:
                    token = p.split("/", 1)[0]
                    try:
                        i = int(token)
                    except ValueError:
                        raise ObjParseError(path, line_no, f"bad face index {token!r}")
                    if i == 0:
                        raise ObjParseError(
                            path, line_no, "face index 0 (OBJ indices are 1-based)"
                        )
                    if i < 0:
                        i = len(vertices) + i  # relative reference
                    else:
                        i = i - 1
                    if i < 0 or i >= len(vertices):
                        raise ObjParseError(path, line_no, f"face index {p} out of range")
                    idx.append(i)
                for k in range(1, len(idx) - 1):
                    faces.append((idx[0], idx[k], idx[k + 1]))
            # everything else is ignored
    return Mesh(np.array(vertices, dtype=np.float64).reshape(-1, 3),
                np.array(faces, dtype=np.int64).reshape(-1, 3))


def save_obj(mesh: Mesh, path) -> None:
    """Write `v`/`f` records with 6-decimal coordinates (lossless to 1e-6)."""
    with open(path, "w", encoding="utf-8") as fh:
        for x, y, z in mesh.vertices:
            fh.write(f"v {x:.6f} {y:.6f} {z:.6f}\n")
        for a, b, c in mesh.faces:
            fh.write(f"f {a + 1} {b + 1} {c + 1}\n")


def save_textures(textures: np.ndarray, path) -> None:
    """Write texture cubes: magic "NTEX", u32 face count, u32 side length,
    then face-major, z-major, y-major, x-major RGB float32, little-endian."""
    textures = np.asarray(textures, dtype=np.float64)
    n_faces, s = textures.shape[0], textures.shape[1]
    # in-memory layout is [face, x, y, z, rgb]; the file stores z outermost
    ordered = textures.transpose(0, 3, 2, 1, 4).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(NTEX_MAGIC)
        fh.write(struct.pack("<II", n_faces, s))
        fh.write(ordered.tobytes())


def load_textures(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != NTEX_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected {NTEX_MAGIC!r}")
        n_faces, s = struct.unpack("<II", fh.read(8))
        data = np.frombuffer(fh.read(), dtype="<f4")
    expected = n_faces * s * s * s * 3
    if data.size != expected:
        raise ValueError(f"{path}: expected {expected} texels, found {data.size}")
    cube = data.reshape(n_faces, s, s, s, 3).astype(np.float64)
    return cube.transpose(0, 3, 2, 1, 4)


# ---------------------------------------------------------------------------
# object -> screen transform and its adjoint


def transform_to_screen(mesh: Mesh, viewpoint: Viewpoint, image_size: int) -> ScreenVertices:
    """Look-at view transform, perspective projection, and viewport mapping
    to [0, image_size] pixel coordinates.

    The origin projects to the image center. Vertices at or behind the
    camera plane are flagged invalid rather than raising.
    """
    right, up, fwd = viewpoint.basis()
    rel = mesh.vertices - viewpoint.eye()
    x_cam = rel @ right
    y_cam = rel @ up
    depth = rel @ fwd

    valid = depth > _MIN_DEPTH
    safe_depth = np.where(valid, depth, 1.0)
    half = image_size / 2.0
    tan_half = math.tan(math.radians(viewpoint.field_of_view) / 2.0)

    px = half * (1.0 + x_cam / (safe_depth * tan_half))
    py = half * (1.0 - y_cam / (safe_depth * tan_half))
    positions = np.stack([px, py], axis=1)
    positions[~valid] = 0.0
    return ScreenVertices(positions=positions, depths=depth, valid=valid)


def transform_backward(
    mesh: Mesh,
    viewpoint: Viewpoint,
    image_size: int,
    grad_positions: np.ndarray,
    grad_depths: np.ndarray | None = None,
) -> np.ndarray:
    """Jacobian-transpose of transform_to_screen: maps gradients with respect
    to screen positions (and optionally depths) back to object-space vertex
    gradients. Invalid (culled) vertices contribute zero."""
    grad_positions = np.asarray(grad_positions, dtype=np.float64)
    if grad_positions.shape != (mesh.n_vertices, 2):
        raise ValueError(
            f"grad_positions shape {grad_positions.shape} does not match "
            f"({mesh.n_vertices}, 2)"
        )
    if grad_depths is not None:
        grad_depths = np.asarray(grad_depths, dtype=np.float64)
        if grad_depths.shape != (mesh.n_vertices,):
            raise ValueError(
                f"grad_depths shape {grad_depths.shape} does not match "
                f"({mesh.n_vertices},)"
            )

    right, up, fwd = viewpoint.basis()
    rel = mesh.vertices - viewpoint.eye()
    x_cam = rel @ right
    y_cam = rel @ up
    depth = rel @ fwd
    valid = depth > _MIN_DEPTH
    safe_depth = np.where(valid, depth, 1.0)

    half = image_size / 2.0
    tan_half = math.tan(math.radians(viewpoint.field_of_view) / 2.0)
    scale = half / tan_half

    gx = grad_positions[:, 0] * valid
    gy = grad_positions[:, 1] * valid

    d_xcam = gx * scale / safe_depth
    d_ycam = -gy * scale / safe_depth
    d_depth = (-gx * x_cam + gy * y_cam) * scale / safe_depth**2
    if grad_depths is not None:
        d_depth = d_depth + grad_depths * valid

    return (
        d_xcam[:, None] * right[None, :]
        + d_ycam[:, None] * up[None, :]
        + d_depth[:, None] * fwd[None, :]
    )


# ---------------------------------------------------------------------------
# edge adjacency and dihedral angles


def edge_adjacency(mesh: Mesh) -> EdgeAdjacency:
    """Interior edges (shared by exactly two faces), ordered by vertex pair.

    Boundary edges are excluded; an edge with more than two incident faces
    raises naming the edge.
    """
    incident: dict[tuple[int, int], list[int]] = {}
    for f_idx, (a, b, c) in enumerate(mesh.faces):
        for u, v in ((a, b), (b, c), (c, a)):
            key = (int(u), int(v)) if u < v else (int(v), int(u))
            lst = incident.setdefault(key, [])
            lst.append(f_idx)
            if len(lst) > 2:
                raise ValueError(
                    f"edge {key} is shared by more than two faces: {lst}"
                )
    pairs = []
    face_pairs = []
    for key in sorted(incident):
        fs = incident[key]
        if len(fs) == 2:
            pairs.append(key)
            face_pairs.append(sorted(fs))
    return EdgeAdjacency(
        vertex_pairs=np.array(pairs, dtype=np.int64).reshape(-1, 2),
        face_pairs=np.array(face_pairs, dtype=np.int64).reshape(-1, 2),
    )


def dihedral_cosines(mesh: Mesh, adjacency: EdgeAdjacency) -> tuple[np.ndarray, np.ndarray]:
    """Cosine of the dihedral angle at each interior edge.

    Convention: theta is the interior angle between the two face planes, so
    coplanar faces forming a flat surface give theta = 180 degrees and
    cos(theta) = -1. With consistent outward winding this is -dot(n1, n2).

    Returns (cosines, valid); edges touching a degenerate (zero-area) face
    are flagged invalid and their cosine set to 0 (callers exclude them).
    """
    normals = face_normals(mesh.vertices, mesh.faces, normalize=False)
    lengths = np.linalg.norm(normals, axis=1)
    n1 = normals[adjacency.face_pairs[:, 0]]
    n2 = normals[adjacency.face_pairs[:, 1]]
    l1 = lengths[adjacency.face_pairs[:, 0]]
    l2 = lengths[adjacency.face_pairs[:, 1]]
    valid = (l1 > 1e-300) & (l2 > 1e-300)
    denom = np.where(valid, l1 * l2, 1.0)
    cosines = np.where(valid, -np.sum(n1 * n2, axis=1) / denom, 0.0)
    return cosines, valid
