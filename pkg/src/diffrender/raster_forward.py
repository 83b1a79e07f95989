"""Z-buffered rasterization of screen-space triangles.

Besides the image itself the rasterizer records, per pixel, the winning
face id, its interpolated camera-space depth and barycentric weights, and
the same data for the second-nearest covering face. The second layer is
what the backward pass reveals when a face sweeps off a pixel.

Conventions (shared with the backward pass and the pixel oracle in the
tests):

* a pixel center exactly on an edge counts as inside (weights >= 0)
* among faces covering a pixel the smallest interpolated depth wins;
  exact depth ties go to the lower face index
* depth is interpolated with screen-space barycentric weights, without
  perspective correction
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .geometry import Mesh, ScreenVertices, Viewpoint, face_normals, transform_to_screen

MODES = ("silhouette", "textured", "textured_lit")


@dataclass(frozen=True)
class RenderOptions:
    """Raster settings. image_size is the supersampled internal size; the
    final image is image_size // downsample_factor squared."""

    image_size: int = 64
    downsample_factor: int = 1
    mode: str = "silhouette"
    background_color: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.image_size <= 0:
            raise ValueError("image_size must be positive")
        if self.downsample_factor < 1:
            raise ValueError("downsample_factor must be >= 1")
        if self.image_size % self.downsample_factor != 0:
            raise ValueError(
                f"image_size {self.image_size} not divisible by "
                f"downsample_factor {self.downsample_factor}"
            )
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")

    @property
    def output_size(self) -> int:
        return self.image_size // self.downsample_factor


@dataclass(frozen=True)
class Lighting:
    """Ambient plus one directional light, applied per face without shading
    interpolation: color * (ambient + dot(direction, face_normal) * directional)."""

    ambient_intensity: float = 1.0
    directional_intensity: float = 0.0
    direction: tuple[float, float, float] = (0.0, 1.0, 0.0)

    def __post_init__(self):
        if self.ambient_intensity < 0 or self.directional_intensity < 0:
            raise ValueError("light intensities must be non-negative")
        norm = float(np.linalg.norm(self.direction))
        if abs(norm - 1.0) > 1e-9:
            raise ValueError(f"light direction must be a unit vector, |d| = {norm}")

    @property
    def direction_array(self) -> np.ndarray:
        return np.asarray(self.direction, dtype=np.float64)


@dataclass
class RenderBuffers:
    """Forward raster outputs at the supersampled size.

    image: (H, W) in silhouette mode, else (H, W, 3).
    depth: (H, W), +inf where uncovered. face_id: (H, W), -1 = background.
    bary: (H, W, 3) weights of the covering face.
    The *2 fields describe the second-nearest covering face per pixel.
    """

    image: np.ndarray
    depth: np.ndarray
    face_id: np.ndarray
    bary: np.ndarray
    face_id2: np.ndarray
    depth2: np.ndarray
    bary2: np.ndarray
    mode: str
    shade: np.ndarray | None = None  # per-face lighting factor (textured_lit)


@dataclass(frozen=True)
class ForwardInputs:
    """Everything rasterize consumed, bundled for the backward pass."""

    screen_verts: ScreenVertices
    faces: np.ndarray
    options: RenderOptions
    textures: np.ndarray | None = None
    lighting: Lighting | None = None
    face_normals: np.ndarray | None = None


def barycentric(point, triangle) -> tuple[float, float, float]:
    """Barycentric weights of a 2-D point in a triangle given as three
    2-vectors. Raises on zero-area triangles."""
    (x1, y1), (x2, y2), (x3, y3) = triangle
    px, py = point
    denom = (y2 - y3) * (x1 - x3) + (x3 - x2) * (y1 - y3)
    if denom == 0:
        raise ValueError("degenerate triangle has no barycentric coordinates")
    w1 = ((y2 - y3) * (px - x3) + (x3 - x2) * (py - y3)) / denom
    w2 = ((y3 - y1) * (px - x3) + (x1 - x3) * (py - y3)) / denom
    return w1, w2, 1.0 - w1 - w2


def sample_texture(cube: np.ndarray, weights) -> np.ndarray:
    """Trilinear sample of one texture cube at barycentric weights: weight k
    maps to grid coordinate w_k * (side - 1) along axis k."""
    cube = np.asarray(cube, dtype=np.float64)
    out = _sample_textures(cube[None], np.zeros(1, dtype=np.int64),
                           np.asarray(weights, dtype=np.float64)[None])
    return out[0]


def _sample_textures(textures: np.ndarray, face_idx: np.ndarray,
                     weights: np.ndarray) -> np.ndarray:
    """Vectorized trilinear sampling; weights clamped to [0, 1]."""
    corners, corner_w = _trilinear_corners(textures.shape[1], weights)
    out = np.zeros((len(face_idx), 3))
    for c in range(8):
        i = corners[c]
        out += corner_w[c][:, None] * textures[face_idx, i[:, 0], i[:, 1], i[:, 2]]
    return out


def _trilinear_corners(side: int, weights: np.ndarray):
    """The 8 corner indices and their trilinear weights for each row of
    barycentric weights. Shared by sampling and the texture backward."""
    g = np.clip(weights, 0.0, 1.0) * (side - 1)
    base = np.minimum(np.floor(g).astype(np.int64), side - 2)
    frac = g - base
    corners = []
    corner_w = []
    for c in range(8):
        bits = np.array([(c >> 0) & 1, (c >> 1) & 1, (c >> 2) & 1])
        idx = base + bits[None, :]
        w = np.prod(np.where(bits[None, :] == 1, frac, 1.0 - frac), axis=1)
        corners.append(idx)
        corner_w.append(w)
    return corners, corner_w


def apply_lighting(color, face_normal, lighting: Lighting) -> np.ndarray:
    """color * (ambient + dot(light_dir, normal) * directional), clamped to
    [0, 1] after scaling."""
    color = np.asarray(color, dtype=np.float64)
    factor = lighting.ambient_intensity + (
        float(np.dot(lighting.direction_array, face_normal))
        * lighting.directional_intensity
    )
    return np.clip(factor * color, 0.0, 1.0)


def shade_factors(normals: np.ndarray, lighting: Lighting) -> np.ndarray:
    return lighting.ambient_intensity + (
        normals @ lighting.direction_array
    ) * lighting.directional_intensity


def downsample(image: np.ndarray, factor: int) -> np.ndarray:
    """Box filter: each output pixel is the mean of its factor x factor block."""
    if factor == 1:
        return image.copy()
    h, w = image.shape[:2]
    if h % factor or w % factor:
        raise ValueError(f"image size {h}x{w} not divisible by factor {factor}")
    shape = (h // factor, factor, w // factor, factor) + image.shape[2:]
    return image.reshape(shape).mean(axis=(1, 3))


def upsample_gradient(grad: np.ndarray, factor: int) -> np.ndarray:
    """Adjoint of downsample: spreads each gradient uniformly over its block."""
    if factor == 1:
        return grad.copy()
    g = np.repeat(np.repeat(grad, factor, axis=0), factor, axis=1)
    return g / float(factor * factor)


def rasterize(
    screen_verts: ScreenVertices,
    faces: np.ndarray,
    options: RenderOptions,
    textures: np.ndarray | None = None,
    lighting: Lighting | None = None,
    normals: np.ndarray | None = None,
) -> RenderBuffers:
    """Rasterize triangles at the supersampled size.

    Faces touching an invalid (culled) vertex or with zero screen area are
    skipped. In silhouette mode the image is a {0, 1} coverage mask and
    textures/lighting are ignored.
    """
    size = options.image_size
    if options.mode == "silhouette":
        image = np.zeros((size, size))
    else:
        if textures is None:
            raise ValueError(f"mode {options.mode!r} requires textures")
        image = np.broadcast_to(
            np.asarray(options.background_color, dtype=np.float64), (size, size, 3)
        ).copy()
    shade = None
    if options.mode == "textured_lit":
        if lighting is None or normals is None:
            raise ValueError("textured_lit mode requires lighting and face normals")
        shade = shade_factors(normals, lighting)

    depth_buf = np.full((size, size), np.inf)
    face_buf = np.full((size, size), -1, dtype=np.int64)
    bary_buf = np.zeros((size, size, 3))
    depth2_buf = np.full((size, size), np.inf)
    face2_buf = np.full((size, size), -1, dtype=np.int64)
    bary2_buf = np.zeros((size, size, 3))

    buffers = RenderBuffers(
        image=image, depth=depth_buf, face_id=face_buf, bary=bary_buf,
        face_id2=face2_buf, depth2=depth2_buf, bary2=bary2_buf,
        mode=options.mode, shade=shade,
    )
    if len(faces) == 0:
        return buffers

    cand = _coverage_candidates(screen_verts, faces, size)
    if cand is None:
        return buffers
    face_idx, rows, cols, weights, depths = cand

    # z-buffer resolution: sort by (pixel, depth, face index) and keep the
    # first and second entries per pixel
    pix = rows * size + cols
    order = np.lexsort((face_idx, depths, pix))
    pix = pix[order]
    face_idx = face_idx[order]
    rows, cols = rows[order], cols[order]
    weights, depths = weights[order], depths[order]

    first = np.ones(len(pix), dtype=bool)
    first[1:] = pix[1:] != pix[:-1]
    second = np.zeros(len(pix), dtype=bool)
    second[1:] = ~first[1:] & first[:-1]

    r1, c1 = rows[first], cols[first]
    face_buf[r1, c1] = face_idx[first]
    depth_buf[r1, c1] = depths[first]
    bary_buf[r1, c1] = weights[first]
    r2, c2 = rows[second], cols[second]
    face2_buf[r2, c2] = face_idx[second]
    depth2_buf[r2, c2] = depths[second]
    bary2_buf[r2, c2] = weights[second]

    if options.mode == "silhouette":
        image[r1, c1] = 1.0
    else:
        colors = _sample_textures(textures, face_idx[first], weights[first])
        if options.mode == "textured_lit":
            colors = np.clip(colors * shade[face_idx[first], None], 0.0, 1.0)
        image[r1, c1] = colors
    return buffers


def _coverage_candidates(screen_verts: ScreenVertices, faces: np.ndarray, size: int):
    """Flat arrays (face index, row, col, weights, depth) of every
    (face, pixel-center-inside) incidence, via per-face bounding boxes."""
    pos = screen_verts.positions
    z = screen_verts.depths

    ok = screen_verts.valid[faces].all(axis=1)
    v0, v1, v2 = pos[faces[:, 0]], pos[faces[:, 1]], pos[faces[:, 2]]
    area = _cross2(v1 - v0, v2 - v0)
    ok &= area != 0.0

    xs = np.stack([v0[:, 0], v1[:, 0], v2[:, 0]], axis=1)
    ys = np.stack([v0[:, 1], v1[:, 1], v2[:, 1]], axis=1)
    # columns c with center c + 0.5 inside [min_x, max_x], clipped to image
    c_lo = np.maximum(np.ceil(xs.min(axis=1) - 0.5).astype(np.int64), 0)
    c_hi = np.minimum(np.floor(xs.max(axis=1) - 0.5).astype(np.int64), size - 1)
    r_lo = np.maximum(np.ceil(ys.min(axis=1) - 0.5).astype(np.int64), 0)
    r_hi = np.minimum(np.floor(ys.max(axis=1) - 0.5).astype(np.int64), size - 1)
    ok &= (c_hi >= c_lo) & (r_hi >= r_lo)
    if not ok.any():
        return None

    f_ids = np.nonzero(ok)[0]
    widths = c_hi[f_ids] - c_lo[f_ids] + 1
    heights = r_hi[f_ids] - r_lo[f_ids] + 1
    counts = widths * heights
    total = int(counts.sum())

    face_idx = np.repeat(f_ids, counts)
    offs = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    w_rep = np.repeat(widths, counts)
    cols = np.repeat(c_lo[f_ids], counts) + offs % w_rep
    rows = np.repeat(r_lo[f_ids], counts) + offs // w_rep

    px = cols + 0.5
    py = rows + 0.5
    a0 = pos[faces[face_idx, 0]]
    a1 = pos[faces[face_idx, 1]]
    a2 = pos[faces[face_idx, 2]]
    n0 = (a2[:, 0] - a1[:, 0]) * (py - a1[:, 1]) - (a2[:, 1] - a1[:, 1]) * (px - a1[:, 0])
    n1 = (a0[:, 0] - a2[:, 0]) * (py - a2[:, 1]) - (a0[:, 1] - a2[:, 1]) * (px - a2[:, 0])
    n2 = (a1[:, 0] - a0[:, 0]) * (py - a0[:, 1]) - (a1[:, 1] - a0[:, 1]) * (px - a0[:, 0])
    denom = area[face_idx]
    sign = np.sign(denom)
    inside = (n0 * sign >= 0.0) & (n1 * sign >= 0.0) & (n2 * sign >= 0.0)
    if not inside.any():
        return None

    face_idx = face_idx[inside]
    rows, cols = rows[inside], cols[inside]
    weights = np.stack([n0[inside], n1[inside], n2[inside]], axis=1) / denom[inside, None]
    zf = z[faces[face_idx]]
    depths = np.sum(weights * zf, axis=1)
    return face_idx, rows, cols, weights, depths


def _cross2(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def render(
    mesh: Mesh,
    viewpoint: Viewpoint,
    options: RenderOptions,
    lighting: Lighting | None = None,
) -> np.ndarray:
    """transform -> rasterize -> (light) -> downsample, returning the final
    image. Silhouette mode ignores textures and lighting."""
    image, _, _ = render_with_buffers(mesh, viewpoint, options, lighting)
    return image


def render_with_buffers(
    mesh: Mesh,
    viewpoint: Viewpoint,
    options: RenderOptions,
    lighting: Lighting | None = None,
) -> tuple[np.ndarray, RenderBuffers, ForwardInputs]:
    """render() that also exposes the raster buffers and bundled inputs, so
    a backward pass can consume the exact same forward state."""
    screen = transform_to_screen(mesh, viewpoint, options.image_size)
    if options.mode == "silhouette":
        textures = normals = light = None
    else:
        textures = mesh.textures
        if textures is None:
            raise ValueError(f"mode {options.mode!r} requires a textured mesh")
        light = lighting if options.mode == "textured_lit" else None
        normals = (
            face_normals(mesh.vertices, mesh.faces)
            if options.mode == "textured_lit"
            else None
        )
        if options.mode == "textured_lit" and light is None:
            raise ValueError("textured_lit mode requires lighting")
    buffers = rasterize(screen, mesh.faces, options, textures, light, normals)
    inputs = ForwardInputs(
        screen_verts=screen, faces=mesh.faces, options=options,
        textures=textures, lighting=light, face_normals=normals,
    )
    return downsample(buffers.image, options.downsample_factor), buffers, inputs


def save_image(image: np.ndarray, path) -> None:
    """8-bit PNG, channel values round(255 * value); grayscale for 2-D input."""
    data = np.round(255.0 * np.clip(image, 0.0, 1.0)).astype(np.uint8)
    Image.fromarray(data, mode="L" if data.ndim == 2 else "RGB").save(path)


def load_image(path) -> np.ndarray:
    """PNG back to float [0, 1]; 2-D for grayscale files, (H, W, 3) for RGB."""
    img = Image.open(path)
    if img.mode == "L":
        return np.asarray(img, dtype=np.float64) / 255.0
    return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
