"""Loss terms and evaluation metrics for render-based mesh optimization.

Every loss returns a LossValue carrying the scalar and the gradient with
respect to its direct input, so callers can chain them through the
renderer's backward pass. All gradients here are exact; the only surrogate
gradient in the package lives in raster_backward.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy import ndimage

from .geometry import EdgeAdjacency, Mesh

NVOX_MAGIC = b"NVOX"


@dataclass
class LossValue:
    value: float
    gradient: np.ndarray


def silhouette_loss(predicted: np.ndarray, target: np.ndarray) -> LossValue:
    """Negative intersection over union of a fractional predicted mask
    against a binary target. Gradient is with respect to the prediction."""
    predicted = np.asarray(predicted, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if predicted.shape != target.shape:
        raise ValueError(f"mask shapes differ: {predicted.shape} vs {target.shape}")
    if not target.any():
        raise ValueError("IoU against an all-zero target mask is undefined")
    inter = float(np.sum(predicted * target))
    union = float(np.sum(predicted + target - predicted * target))
    # d(-inter/union)/ds = -(t * union - inter * (1 - t)) / union^2
    grad = -(target * union - inter * (1.0 - target)) / union**2
    return LossValue(value=-inter / union, gradient=grad)


def smoothness_loss(mesh: Mesh, adjacency: EdgeAdjacency) -> LossValue:
    """Sum of (cos(theta) + 1)^2 over interior edges, zero for flat
    dihedral angles. Gradient is with respect to vertex positions; edges
    touching degenerate faces are excluded."""
    verts = mesh.vertices
    faces = mesh.faces
    grad = np.zeros_like(verts)
    if len(adjacency) == 0:
        return LossValue(0.0, grad)

    f1 = faces[adjacency.face_pairs[:, 0]]
    f2 = faces[adjacency.face_pairs[:, 1]]
    a1, b1, c1 = verts[f1[:, 0]], verts[f1[:, 1]], verts[f1[:, 2]]
    a2, b2, c2 = verts[f2[:, 0]], verts[f2[:, 1]], verts[f2[:, 2]]
    m1 = np.cross(b1 - a1, c1 - a1)
    m2 = np.cross(b2 - a2, c2 - a2)
    l1 = np.linalg.norm(m1, axis=1)
    l2 = np.linalg.norm(m2, axis=1)
    valid = (l1 > 1e-300) & (l2 > 1e-300)
    l1s = np.where(valid, l1, 1.0)
    l2s = np.where(valid, l2, 1.0)
    n1 = m1 / l1s[:, None]
    n2 = m2 / l2s[:, None]
    cos = np.where(valid, -np.sum(n1 * n2, axis=1), 0.0)
    terms = np.where(valid, (cos + 1.0) ** 2, 0.0)

    coef = np.where(valid, 2.0 * (cos + 1.0), 0.0)
    # d cos / d m1 = -(n2 + cos n1) / |m1|, and symmetrically for m2
    gm1 = coef[:, None] * -(n2 + cos[:, None] * n1) / l1s[:, None]
    gm2 = coef[:, None] * -(n1 + cos[:, None] * n2) / l2s[:, None]

    # un-cross: with m = (b - a) x (c - a), the adjoint pulls each vertex
    # gradient through one cross product with the opposite edge
    for f, ga, gb, gc in (
        (f1, np.cross(b1 - c1, gm1), np.cross(c1 - a1, gm1), np.cross(a1 - b1, gm1)),
        (f2, np.cross(b2 - c2, gm2), np.cross(c2 - a2, gm2), np.cross(a2 - b2, gm2)),
    ):
        np.add.at(grad, f[:, 0], ga)
        np.add.at(grad, f[:, 1], gb)
        np.add.at(grad, f[:, 2], gc)
    return LossValue(value=float(terms.sum()), gradient=grad)


def content_loss(vertices: np.ndarray, reference: np.ndarray) -> LossValue:
    """Sum of squared vertex displacements against a reference mesh with
    the same topology."""
    vertices = np.asarray(vertices, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if vertices.shape != reference.shape:
        raise ValueError(
            f"vertex counts differ: {vertices.shape} vs {reference.shape}"
        )
    diff = vertices - reference
    return LossValue(value=float(np.sum(diff * diff)), gradient=2.0 * diff)


def gram(feature: np.ndarray) -> np.ndarray:
    """Channel inner-product matrix of a (C, H, W) feature map, normalized
    by C * H * W so the scale is independent of image size."""
    feature = np.asarray(feature, dtype=np.float64)
    if feature.ndim != 3 or feature.size == 0:
        raise ValueError("feature map must be a nonempty (C, H, W) array")
    c = feature.shape[0]
    flat = feature.reshape(c, -1)
    return (flat @ flat.T) / feature.size


def style_loss(image: np.ndarray, style_image: np.ndarray, extractor) -> LossValue:
    """Sum over extractor layers of squared Frobenius distances between
    Gram matrices. Gradient is with respect to the first image."""
    feats = extractor.forward(image)
    style_feats = extractor.forward(style_image)
    value = 0.0
    grad_feats = []
    for f, fs in zip(feats, style_feats):
        g = gram(f)
        gs = gram(fs)
        diff = g - gs
        value += float(np.sum(diff * diff))
        c = f.shape[0]
        flat = f.reshape(c, -1)
        grad_flat = 4.0 * (diff @ flat) / f.size
        grad_feats.append(grad_flat.reshape(f.shape))
    return LossValue(value=value, gradient=extractor.adjoint(image, grad_feats))


def total_variation(image: np.ndarray) -> LossValue:
    """Sum over horizontally and vertically adjacent pixel pairs of the
    squared color difference."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape[0] < 2 or image.shape[1] < 2:
        raise ValueError("total variation needs at least a 2x2 image")
    dh = image[:, 1:] - image[:, :-1]
    dv = image[1:, :] - image[:-1, :]
    grad = np.zeros_like(image)
    grad[:, 1:] += 2.0 * dh
    grad[:, :-1] -= 2.0 * dh
    grad[1:, :] += 2.0 * dv
    grad[:-1, :] -= 2.0 * dv
    return LossValue(value=float(np.sum(dh * dh) + np.sum(dv * dv)), gradient=grad)


def deepdream_loss(image: np.ndarray, extractor) -> LossValue:
    """Negative squared feature norm; descending on it drives feature
    activations up."""
    feats = extractor.forward(image)
    value = -sum(float(np.sum(f * f)) for f in feats)
    grad_feats = [-2.0 * f for f in feats]
    return LossValue(value=value, gradient=extractor.adjoint(image, grad_feats))


# ---------------------------------------------------------------------------
# feature extractors

_EDGE_KERNELS = np.array(
    [
        [[-1, -1, -1], [0, 0, 0], [1, 1, 1]],  # horizontal edge
        [[-1, 0, 1], [-1, 0, 1], [-1, 0, 1]],  # vertical edge
        [[-2, -1, 0], [-1, 0, 1], [0, 1, 2]],  # diagonal
        [[0, -1, -2], [1, 0, -1], [2, 1, 0]],  # anti-diagonal
    ],
    dtype=np.float64,
)


class ToyFeatureExtractor:
    """Fixed multi-scale edge-filter bank with a squared-response
    nonlinearity. One layer per scale; each layer applies every kernel to
    every color channel (4 kernels x 3 channels = 12 feature channels).

    Deterministic and cheap; exists so the style and dream objectives have
    a differentiable feature path without any learned weights.
    """

    name = "toy"

    def __init__(self, scales: int = 2):
        if scales < 1:
            raise ValueError("need at least one scale")
        self.scales = scales

    def forward(self, image: np.ndarray) -> list[np.ndarray]:
        image = self._as_rgb(image)
        feats = []
        for s in range(self.scales):
            scaled = self._downscale(image, s)
            maps = [
                ndimage.correlate(scaled[:, :, ch], k, mode="constant") ** 2
                for k in _EDGE_KERNELS
                for ch in range(3)
            ]
            feats.append(np.stack(maps, axis=0))
        return feats

    def adjoint(self, image: np.ndarray, grad_feats: list[np.ndarray]) -> np.ndarray:
        image = self._as_rgb(image)
        was_2d = np.asarray(image).ndim == 2
        grad = np.zeros_like(image)
        for s, gf in enumerate(grad_feats):
            scaled = self._downscale(image, s)
            g_scaled = np.zeros_like(scaled)
            i = 0
            for k in _EDGE_KERNELS:
                for ch in range(3):
                    resp = ndimage.correlate(scaled[:, :, ch], k, mode="constant")
                    g_scaled[:, :, ch] += ndimage.convolve(
                        2.0 * resp * gf[i], k, mode="constant"
                    )
                    i += 1
            grad += self._upscale_gradient(g_scaled, s, image.shape)
        if was_2d:
            return grad.sum(axis=2)
        return grad

    @staticmethod
    def _as_rgb(image: np.ndarray) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        if image.ndim == 2:
            return np.repeat(image[:, :, None], 3, axis=2)
        return image

    @staticmethod
    def _downscale(image: np.ndarray, scale: int) -> np.ndarray:
        for _ in range(scale):
            h, w = image.shape[:2]
            image = image[: h - h % 2, : w - w % 2]
            image = image.reshape(h // 2, 2, w // 2, 2, 3).mean(axis=(1, 3))
        return image

    @staticmethod
    def _upscale_gradient(grad: np.ndarray, scale: int, shape) -> np.ndarray:
        for _ in range(scale):
            grad = np.repeat(np.repeat(grad, 2, axis=0), 2, axis=1) / 4.0
        out = np.zeros(shape)
        out[: grad.shape[0], : grad.shape[1]] = grad
        return out


EXTRACTORS = {"toy": ToyFeatureExtractor}


def get_extractor(name: str):
    try:
        return EXTRACTORS[name]()
    except KeyError:
        raise KeyError(
            f"unknown extractor {name!r}; available: {sorted(EXTRACTORS)}"
        ) from None


# ---------------------------------------------------------------------------
# voxel metrics


def voxelize(mesh: Mesh, resolution: int, bounds=None) -> np.ndarray:
    """Binary occupancy grid: cells overlapping the surface (triangle-box
    test) plus the enclosed interior (flood fill from the grid boundary;
    whatever the outside flood cannot reach is occupied).

    bounds is an (lo, hi) pair of 3-vectors mapping the mesh into the grid;
    it defaults to the mesh's own bounding box. Meshes compared with
    voxel_iou must share bounds.
    """
    if resolution < 4:
        raise ValueError("resolution must be >= 4")
    if mesh.n_faces == 0:
        raise ValueError("cannot voxelize an empty mesh")
    if bounds is None:
        lo = mesh.vertices.min(axis=0)
        hi = mesh.vertices.max(axis=0)
    else:
        lo = np.asarray(bounds[0], dtype=np.float64)
        hi = np.asarray(bounds[1], dtype=np.float64)
    extent = np.where(hi - lo > 1e-12, hi - lo, 1.0)
    unit_verts = (mesh.vertices - lo) / extent  # normalized into the unit cube

    surface = np.zeros((resolution, resolution, resolution), dtype=bool)
    h = 1.0 / resolution
    tri = unit_verts[mesh.faces]  # (F, 3, 3)
    # tie-break for faces lying exactly on cell boundaries: nudge each
    # triangle inward (against its outward normal) so it claims only the
    # cell on its interior side
    normals = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    lengths = np.linalg.norm(normals, axis=1, keepdims=True)
    normals = np.divide(normals, lengths, out=np.zeros_like(normals),
                        where=lengths > 0)
    tri = tri - 1e-9 * normals[:, None, :]
    t_lo = np.clip(np.floor(tri.min(axis=1) / h).astype(np.int64), 0, resolution - 1)
    t_hi = np.clip(np.floor(tri.max(axis=1) / h).astype(np.int64), 0, resolution - 1)
    for f in range(mesh.n_faces):
        cells = _candidate_cells(t_lo[f], t_hi[f], h)
        if cells is None:
            continue
        centers, half = cells
        hit = _tri_box_overlap(tri[f], centers, half)
        if hit.any():
            idx = np.round((centers[hit] - half) / h).astype(np.int64)
            surface[idx[:, 0], idx[:, 1], idx[:, 2]] = True

    return ndimage.binary_fill_holes(surface)


def _candidate_cells(lo_idx, hi_idx, h):
    ranges = [np.arange(lo_idx[d], hi_idx[d] + 1) for d in range(3)]
    if any(len(r) == 0 for r in ranges):
        return None
    gx, gy, gz = np.meshgrid(*ranges, indexing="ij")
    idx = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    centers = (idx + 0.5) * h
    return centers, h / 2.0


def _tri_box_overlap(tri: np.ndarray, centers: np.ndarray, half: float) -> np.ndarray:
    """Separating-axis triangle/cube overlap test, vectorized over boxes."""
    v = tri[None, :, :] - centers[:, None, :]  # (M, 3, 3) box-local vertices

    # box face normals: the triangle's AABB must meet the box on every axis
    ok = (v.max(axis=1) >= -half - 1e-12).all(axis=1)
    ok &= (v.min(axis=1) <= half + 1e-12).all(axis=1)

    edges = np.stack([tri[1] - tri[0], tri[2] - tri[1], tri[0] - tri[2]])

    # triangle plane
    normal = np.cross(edges[0], edges[1])
    d = np.einsum("mj,j->m", v[:, 0, :], normal)
    r = half * np.sum(np.abs(normal))
    ok &= np.abs(d) <= r + 1e-12

    # 9 edge cross-product axes
    axes_unit = np.eye(3)
    for e in edges:
        for u in axes_unit:
            axis = np.cross(u, e)
            if np.allclose(axis, 0.0):
                continue
            p = np.einsum("mvj,j->mv", v, axis)
            r = half * np.sum(np.abs(axis))
            ok &= ~((p.min(axis=1) > r + 1e-12) | (p.max(axis=1) < -r - 1e-12))
    return ok


def voxel_iou(grid_a: np.ndarray, grid_b: np.ndarray) -> float:
    grid_a = np.asarray(grid_a, dtype=bool)
    grid_b = np.asarray(grid_b, dtype=bool)
    if grid_a.shape != grid_b.shape:
        raise ValueError(f"grid shapes differ: {grid_a.shape} vs {grid_b.shape}")
    union = np.logical_or(grid_a, grid_b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(grid_a, grid_b).sum() / union)


def mesh_iou(mesh_a: Mesh, mesh_b: Mesh, resolution: int = 32) -> float:
    """Voxel IoU of two meshes in a shared frame (their joint bounding box)."""
    lo = np.minimum(mesh_a.vertices.min(axis=0), mesh_b.vertices.min(axis=0))
    hi = np.maximum(mesh_a.vertices.max(axis=0), mesh_b.vertices.max(axis=0))
    bounds = (lo, hi)
    return voxel_iou(
        voxelize(mesh_a, resolution, bounds), voxelize(mesh_b, resolution, bounds)
    )


# ---------------------------------------------------------------------------
# mask and occupancy containers


def save_mask(mask: np.ndarray, path) -> None:
    data = np.where(np.asarray(mask) >= 0.5, 255, 0).astype(np.uint8)
    Image.fromarray(data, mode="L").save(path)


def load_mask(path) -> np.ndarray:
    """Grayscale PNG to a binary mask: values >= 128 count as covered."""
    raw = np.asarray(Image.open(path).convert("L"))
    return (raw >= 128).astype(np.float64)


def save_voxels(grid: np.ndarray, path) -> None:
    """Occupancy container: magic "NVOX", u32 resolution, then the grid
    flattened in C order and bit-packed little-endian."""
    grid = np.asarray(grid, dtype=bool)
    res = grid.shape[0]
    if grid.shape != (res, res, res):
        raise ValueError("occupancy grid must be cubic")
    packed = np.packbits(grid.reshape(-1).astype(np.uint8), bitorder="little")
    with open(path, "wb") as fh:
        fh.write(NVOX_MAGIC)
        fh.write(struct.pack("<I", res))
        fh.write(packed.tobytes())


def load_voxels(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != NVOX_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected {NVOX_MAGIC!r}")
        (res,) = struct.unpack("<I", fh.read(4))
        packed = np.frombuffer(fh.read(), dtype=np.uint8)
    bits = np.unpackbits(packed, bitorder="little")[: res**3]
    return bits.reshape(res, res, res).astype(bool)
