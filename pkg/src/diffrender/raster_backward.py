"""Backward pass of the rasterizer.

Vertex gradients use a surrogate in place of the (almost everywhere zero)
true derivative: for a pixel and a moving vertex coordinate, the set of
coordinate values for which the face covers the pixel center is an
interval; its endpoints are the collision positions where a face edge
sweeps across the pixel center. The surrogate derivative is the color
change over the distance to the nearest collision, and it flows only when
its sign can reduce the loss (the gate: upstream * color_change < 0,
applied per channel). Texture and lighting gradients are exact chain
rules; the raster assignment itself is held fixed.

Occlusion: a collision contributes nothing when, at the collision depth,
the pixel is already covered by a nearer face that does not contain the
moving vertex.

All quantities are computed analytically from edge-line intersections;
the step-and-scan procedure exists only in the test suite as an oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Mesh, ScreenVertices, Viewpoint, face_normals, transform_backward
from .raster_forward import (
    ForwardInputs,
    Lighting,
    RenderBuffers,
    RenderOptions,
    _cross2,
    _sample_textures,
    _trilinear_corners,
    render_with_buffers,
    shade_factors,
    upsample_gradient,
)

_MIN_SWEEP = 1e-9  # collisions closer than this to the current position are dropped
_OCC_EPS = 1e-9


@dataclass
class GradientSet:
    """Gradients of one rendered image with respect to the raster inputs."""

    d_screen_vertices: np.ndarray  # (N, 2)
    d_texels: np.ndarray | None = None  # (F, s, s, s, 3)
    d_ambient: float = 0.0
    d_directional: float = 0.0
    d_light_direction: np.ndarray = field(default_factory=lambda: np.zeros(3))


@dataclass
class CrossPoint:
    """One collision of a face edge with a pixel center as a single vertex
    coordinate moves. Colors have one channel in silhouette mode, three
    otherwise."""

    collision_position: float  # coordinate value at collision
    collision_color: np.ndarray  # face color at the collision configuration
    distance: float  # collision_position - current position (signed)
    color_change: np.ndarray  # pixel color after collision minus current
    direction: str  # left/right for the x axis, up/down for y


# ---------------------------------------------------------------------------
# sweep geometry (shared by the scalar reference op and the bulk pass)
#
# Canonical frame: the moving coordinate is "x", the scanline through the
# pixel is a row. The y axis is handled by transposing every input. With
# the moving vertex first, the barycentric numerators against pixel p are
#   n_mov = cross(b - a, p - a)                 (constant in t)
#   n_a(t) = (t - bx) (py - by) - (my - by) (px - bx)     slope py - by
#   n_b(t) = (ax - t) (py - my) - (ay - my) (px - t)      slope ay - py
# and the pixel is covered exactly when all three share the sign of n_mov.


def _sweep_interval(t0, my, ax, ay, bx, by, px, py):
    """Coverage interval [lo, hi] of the moving coordinate, per row.

    Returns (lo, hi, bind_lo, bind_hi, feasible, sig, na0, nb0, sa, sb,
    n_mov). bind_* identifies the binding constraint (0 = the weight of
    vertex a vanishes, crossing edge (mov, b); 1 = weight of b vanishes,
    crossing edge (mov, a)); -1 where unbounded. feasible is False when no
    position of the vertex covers the pixel (including sig == 0 rows,
    where the pixel sits on the fixed edge's line)."""
    n_mov = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
    na0 = (t0 - bx) * (py - by) - (my - by) * (px - bx)
    sa = py - by
    nb0 = (ax - t0) * (py - my) - (ay - my) * (px - t0)
    sb = ay - py

    sig = np.sign(n_mov)
    feasible = sig != 0
    lo = np.full(np.shape(t0), -np.inf)
    hi = np.full(np.shape(t0), np.inf)
    bind_lo = np.full(np.shape(t0), -1, dtype=np.int8)
    bind_hi = np.full(np.shape(t0), -1, dtype=np.int8)

    for n0, s, tag in ((na0, sa, 0), (nb0, sb, 1)):
        safe_s = np.where(s != 0.0, s, 1.0)
        root = t0 - n0 / safe_s
        eff = sig * s
        upd = (eff > 0) & (root > lo)
        lo = np.where(upd, root, lo)
        bind_lo = np.where(upd, np.int8(tag), bind_lo)
        upd = (eff < 0) & (root < hi)
        hi = np.where(upd, root, hi)
        bind_hi = np.where(upd, np.int8(tag), bind_hi)
        feasible &= ~((s == 0.0) & (sig * n0 < 0))
    feasible &= lo <= hi
    return lo, hi, bind_lo, bind_hi, feasible, sig, na0, nb0, sa, sb, n_mov


def _collision_bary(t0, t1, n_mov, na0, nb0, sa, sb):
    """Barycentric weights (order: moving vertex, a, b) at collision t1."""
    na1 = na0 + sa * (t1 - t0)
    nb1 = nb0 + sb * (t1 - t0)
    denom = n_mov + na1 + nb1
    safe = np.where(np.abs(denom) > 0.0, denom, 1.0)
    ok = denom != 0.0
    return np.stack([n_mov, na1, nb1], axis=-1) / safe[..., None], ok


def _across_column(t0, my, ox, oy, px, py, moving_right):
    """Index along the motion axis of the first pixel center on the
    exterior side of the crossing edge, at its current scanline crossing.
    Returns (col, ok); ok False where the edge runs along the scanline."""
    denom = oy - my
    ok = np.abs(denom) > 0.0
    lam = np.where(ok, (py - my) / np.where(ok, denom, 1.0), 0.0)
    x_now = t0 + (ox - t0) * lam
    col_right = np.ceil(x_now - 0.5) - 1  # nearest center strictly left
    col_left = np.floor(x_now - 0.5) + 1  # nearest center strictly right
    return np.where(moving_right, col_right, col_left).astype(np.int64), ok


# ---------------------------------------------------------------------------
# reference (per-pixel) cross point computation


def find_cross_points(
    pixel_center,
    vertex_index: int,
    face,
    screen_verts: ScreenVertices,
    axis: int,
    image: np.ndarray,
    options: RenderOptions,
    texture: np.ndarray | None = None,
    shade: float = 1.0,
) -> list[CrossPoint]:
    """Collisions of the face's edges with one pixel center as the given
    vertex coordinate moves along an axis (0 = x, 1 = y).

    Single-face semantics: the color a departure reveals is read from the
    current image just across the crossing edge (background outside the
    image). Returns an empty list when the face never covers the pixel or
    the face is degenerate for this sweep.
    """
    face = np.asarray(face, dtype=np.int64)
    if vertex_index not in face:
        raise ValueError(f"vertex {vertex_index} is not part of face {face.tolist()}")
    k = int(np.nonzero(face == vertex_index)[0][0])
    ids = [face[k], face[(k + 1) % 3], face[(k + 2) % 3]]
    pos = screen_verts.positions[ids].astype(np.float64).copy()
    zs = screen_verts.depths[ids].astype(np.float64)
    px, py = float(pixel_center[0]), float(pixel_center[1])
    if axis == 1:
        pos = pos[:, ::-1]
        px, py = py, px
    (mx, my), (ax_, ay_), (bx_, by_) = pos

    lo, hi, bind_lo, bind_hi, feasible, sig, na0, nb0, sa, sb, n_mov = _sweep_interval(
        np.float64(mx), my, ax_, ay_, bx_, by_, px, py
    )
    if not bool(feasible):
        return []

    size = options.image_size
    row = int(round((py if axis == 0 else px) - 0.5))
    col = int(round((px if axis == 0 else py) - 0.5))
    if image.ndim == 2:
        current = np.atleast_1d(np.float64(image[row, col]))
        background = np.zeros(1)
    else:
        current = np.asarray(image[row, col], dtype=np.float64)
        background = np.asarray(options.background_color, dtype=np.float64)

    def face_color(weights_canonical) -> np.ndarray:
        if options.mode == "silhouette":
            return np.ones(1)
        w = np.empty(3)
        w[k], w[(k + 1) % 3], w[(k + 2) % 3] = weights_canonical
        color = _sample_textures(texture[None], np.zeros(1, dtype=np.int64), w[None])[0]
        if options.mode == "textured_lit":
            color = np.clip(color * shade, 0.0, 1.0)
        return color

    def direction_name(moving_right: bool) -> str:
        if axis == 0:
            return "right" if moving_right else "left"
        return "down" if moving_right else "up"

    points: list[CrossPoint] = []
    inside = bool(lo <= mx <= hi)

    def emit(t1, moving_right: bool, revealed: np.ndarray | None):
        if not np.isfinite(t1) or abs(t1 - mx) < _MIN_SWEEP:
            return
        bary, ok = _collision_bary(mx, np.float64(t1), n_mov, na0, nb0, sa, sb)
        if not bool(ok):
            return
        color = face_color(bary)
        after = color if revealed is None else revealed
        points.append(
            CrossPoint(
                collision_position=float(t1),
                collision_color=color,
                distance=float(t1 - mx),
                color_change=after - current,
                direction=direction_name(moving_right),
            )
        )

    if inside:
        for t1, moving_right, bind in ((hi, True, bind_hi), (lo, False, bind_lo)):
            if not np.isfinite(t1):
                continue
            ox, oy = (bx_, by_) if bind == 0 else (ax_, ay_)
            cols, ok = _across_column(
                np.float64(mx), my, ox, oy, px, py, np.bool_(moving_right)
            )
            revealed = background
            if bool(ok) and 0 <= int(cols) < size:
                rc = (row, int(cols)) if axis == 0 else (int(cols), col)
                revealed = np.atleast_1d(np.asarray(image[rc], dtype=np.float64))
            emit(t1, moving_right, revealed)
    else:
        if mx < lo:
            emit(lo, True, None)
        elif mx > hi:
            emit(hi, False, None)
    return points


# ---------------------------------------------------------------------------
# bulk vertex backward


def backward_vertices(
    buffers: RenderBuffers,
    inputs: ForwardInputs,
    grad_image: np.ndarray,
    debug_csv=None,
) -> np.ndarray:
    """Accumulate the gated surrogate gradient onto screen vertices.

    grad_image must match the pre-downsample image shape. Returns (N, 2)
    gradients of the loss with respect to screen x and y per vertex.
    """
    opts = inputs.options
    grad_image = np.asarray(grad_image, dtype=np.float64)
    if buffers.mode != opts.mode:
        raise ValueError(f"buffers mode {buffers.mode!r} != options mode {opts.mode!r}")
    if grad_image.shape != buffers.image.shape:
        raise ValueError(
            f"grad_image shape {grad_image.shape} does not match rendered "
            f"image shape {buffers.image.shape}"
        )

    n_verts = len(inputs.screen_verts)
    out = np.zeros((n_verts, 2))
    if not np.any(grad_image):
        return out

    image = buffers.image
    grad = grad_image
    if image.ndim == 2:  # unify on a trailing channel axis
        image = image[..., None]
        grad = grad[..., None]
        background = np.zeros(1)
    else:
        background = np.asarray(opts.background_color, dtype=np.float64)

    records: list[np.ndarray] | None = [] if debug_csv is not None else None
    for axis in (0, 1):
        if axis == 0:
            view = _AxisView(
                positions=inputs.screen_verts.positions,
                image=image, grad=grad,
                face_id=buffers.face_id, depth=buffers.depth, bary=buffers.bary,
                face_id2=buffers.face_id2, depth2=buffers.depth2,
            )
        else:
            view = _AxisView(
                positions=inputs.screen_verts.positions[:, ::-1],
                image=image.transpose(1, 0, 2), grad=grad.transpose(1, 0, 2),
                face_id=buffers.face_id.T, depth=buffers.depth.T,
                bary=buffers.bary.transpose(1, 0, 2),
                face_id2=buffers.face_id2.T, depth2=buffers.depth2.T,
            )
        acc = np.zeros(n_verts)
        _inside_pass(view, inputs, buffers, background, acc, axis, records)
        _outside_pass(view, inputs, buffers, background, acc, axis, records)
        out[:, axis] = acc

    if debug_csv is not None:
        header = "row,col,vertex,axis,delta_x,delta_i,gate"
        data = np.vstack(records) if records else np.empty((0, 7))
        np.savetxt(debug_csv, data, fmt="%.10g", delimiter=",",
                   header=header, comments="")
    return out


@dataclass
class _AxisView:
    """Buffers with the motion axis canonicalized to screen x (the y pass
    sees everything transposed)."""

    positions: np.ndarray
    image: np.ndarray
    grad: np.ndarray
    face_id: np.ndarray
    depth: np.ndarray
    bary: np.ndarray
    face_id2: np.ndarray
    depth2: np.ndarray


def _face_vertex_frames(view: _AxisView, inputs: ForwardInputs, face_idx, k):
    """Canonical per-row geometry for moving vertex k of each listed face."""
    faces = inputs.faces
    mov = faces[face_idx, k]
    a = faces[face_idx, (k + 1) % 3]
    b = faces[face_idx, (k + 2) % 3]
    pos = view.positions
    z = inputs.screen_verts.depths
    return {
        "mov": mov,
        "t0": pos[mov, 0], "my": pos[mov, 1],
        "ax": pos[a, 0], "ay": pos[a, 1],
        "bx": pos[b, 0], "by": pos[b, 1],
        "z": np.stack([z[mov], z[a], z[b]], axis=1),
    }


def _gated_contribution(grad_px, delta_i, delta_x):
    """Sum over channels of upstream * delta_i / delta_x where the gate
    upstream * delta_i < 0 is open."""
    gate = grad_px * delta_i < 0.0
    return np.sum(np.where(gate, grad_px * delta_i, 0.0), axis=1) / delta_x, gate


def _vertex_in_faces(faces: np.ndarray, face_ids: np.ndarray, vertex_ids: np.ndarray):
    """Whether vertex_ids[i] belongs to faces[face_ids[i]]; False for id -1."""
    ok = face_ids >= 0
    safe = np.where(ok, face_ids, 0)
    return ok & np.any(faces[safe] == vertex_ids[:, None], axis=1)


def _collision_colors(inputs: ForwardInputs, buffers: RenderBuffers,
                      face_idx, k, bary_canonical):
    """Face color at a collision configuration, in forward color space."""
    opts = inputs.options
    m = len(face_idx)
    if opts.mode == "silhouette":
        return np.ones((m, 1))
    w = np.empty((m, 3))
    idx = np.arange(m)
    w[idx, k] = bary_canonical[:, 0]
    w[idx, (k + 1) % 3] = bary_canonical[:, 1]
    w[idx, (k + 2) % 3] = bary_canonical[:, 2]
    colors = _sample_textures(inputs.textures, face_idx, w)
    if opts.mode == "textured_lit":
        colors = np.clip(colors * buffers.shade[face_idx, None], 0.0, 1.0)
    return colors


def _inside_pass(view, inputs, buffers, background, acc, axis, records):
    """Departure gradients: pixels drawn with a face, for each of its
    vertices and both sweep directions."""
    rows, cols = np.nonzero(view.face_id >= 0)
    if len(rows) == 0:
        return
    keep = np.any(view.grad[rows, cols] != 0.0, axis=1)
    if inputs.options.mode == "silhouette":
        # departures can only darken; the gate needs a positive upstream
        keep &= view.grad[rows, cols, 0] > 0.0
    rows, cols = rows[keep], cols[keep]
    if len(rows) == 0:
        return
    face_idx = view.face_id[rows, cols]
    size = view.image.shape[1]

    for k in (0, 1, 2):
        fr = _face_vertex_frames(view, inputs, face_idx, k)
        px = cols + 0.5
        py = rows + 0.5
        lo, hi, bind_lo, bind_hi, feasible, sig, na0, nb0, sa, sb, n_mov = (
            _sweep_interval(fr["t0"], fr["my"], fr["ax"], fr["ay"],
                            fr["bx"], fr["by"], px, py)
        )
        for t1, moving_right, bind in ((hi, True, bind_hi), (lo, False, bind_lo)):
            ok = feasible & np.isfinite(t1) & (np.abs(t1 - fr["t0"]) >= _MIN_SWEEP)
            if not ok.any():
                continue
            sel = np.nonzero(ok)[0]
            bary, bary_ok = _collision_bary(
                fr["t0"][sel], t1[sel], n_mov[sel], na0[sel], nb0[sel],
                sa[sel], sb[sel]
            )
            sel = sel[bary_ok]
            bary = bary[bary_ok]
            if len(sel) == 0:
                continue

            d_cross = np.sum(bary * fr["z"][sel], axis=1)
            # occlusion: drop when the second layer sits in front of the
            # collision and does not move with this vertex
            occ = (
                (view.depth2[rows[sel], cols[sel]] < d_cross - _OCC_EPS)
                & ~_vertex_in_faces(inputs.faces, view.face_id2[rows[sel], cols[sel]],
                                    fr["mov"][sel])
            )
            sel = sel[~occ]
            bary = bary[~occ]
            if len(sel) == 0:
                continue

            b_sel = bind[sel]
            ox = np.where(b_sel == 0, fr["bx"][sel], fr["ax"][sel])
            oy = np.where(b_sel == 0, fr["by"][sel], fr["ay"][sel])
            out_col, col_ok = _across_column(
                fr["t0"][sel], fr["my"][sel], ox, oy,
                cols[sel] + 0.5, rows[sel] + 0.5,
                np.full(len(sel), moving_right, dtype=bool),
            )
            in_image = col_ok & (out_col >= 0) & (out_col < size)
            revealed = np.broadcast_to(background, (len(sel), view.image.shape[2])).copy()
            src = np.nonzero(in_image)[0]
            revealed[src] = view.image[rows[sel][src], out_col[src]]

            current = view.image[rows[sel], cols[sel]]
            delta_i = revealed - current
            delta_x = t1[sel] - fr["t0"][sel]
            grad_px = view.grad[rows[sel], cols[sel]]
            contrib, gate = _gated_contribution(grad_px, delta_i, delta_x)
            np.add.at(acc, fr["mov"][sel], contrib)
            if records is not None:
                _record(records, rows[sel], cols[sel], fr["mov"][sel], axis,
                        delta_x, delta_i, gate)


def _outside_pass(view, inputs, buffers, background, acc, axis, records):
    """Arrival gradients: for each face, the pixels inside its scanline band
    where the upstream gradient is live."""
    opts = inputs.options
    if opts.mode == "silhouette":
        # an arriving face can only brighten an uncovered pixel
        active = (view.grad[:, :, 0] < 0.0) & (view.face_id < 0)
    else:
        active = np.any(view.grad != 0.0, axis=2)
    if not active.any():
        return
    size = view.image.shape[1]
    act_rows, act_cols = np.nonzero(active)
    row_counts = np.bincount(act_rows, minlength=size)
    row_ptr = np.concatenate([[0], np.cumsum(row_counts)])

    faces = inputs.faces
    pos = view.positions
    valid = inputs.screen_verts.valid[faces].all(axis=1)
    v0, v1, v2 = pos[faces[:, 0]], pos[faces[:, 1]], pos[faces[:, 2]]
    valid &= _cross2(v1 - v0, v2 - v0) != 0.0
    ys = np.stack([v0[:, 1], v1[:, 1], v2[:, 1]], axis=1)
    r_lo = np.maximum(np.ceil(ys.min(axis=1) - 0.5).astype(np.int64), 0)
    r_hi = np.minimum(np.floor(ys.max(axis=1) - 0.5).astype(np.int64), size - 1)
    valid &= r_hi >= r_lo
    if not valid.any():
        return

    f_ids = np.nonzero(valid)[0]
    starts = row_ptr[r_lo[f_ids]]
    lens = row_ptr[r_hi[f_ids] + 1] - starts
    nonzero = lens > 0
    f_ids, starts, lens = f_ids[nonzero], starts[nonzero], lens[nonzero]
    total = int(lens.sum())
    if total == 0:
        return
    gather = np.repeat(starts, lens) + (
        np.arange(total) - np.repeat(np.cumsum(lens) - lens, lens)
    )
    face_idx = np.repeat(f_ids, lens)
    rows = act_rows[gather]
    cols = act_cols[gather]

    current = view.image[rows, cols]
    grad_px = view.grad[rows, cols]
    occluder = view.face_id[rows, cols]
    occ_depth = view.depth[rows, cols]

    for k in (0, 1, 2):
        fr = _face_vertex_frames(view, inputs, face_idx, k)
        px = cols + 0.5
        py = rows + 0.5
        lo, hi, bind_lo, bind_hi, feasible, sig, na0, nb0, sa, sb, n_mov = (
            _sweep_interval(fr["t0"], fr["my"], fr["ax"], fr["ay"],
                            fr["bx"], fr["by"], px, py)
        )
        before = fr["t0"] < lo
        beyond = fr["t0"] > hi
        t1 = np.where(before, lo, hi)
        ok = feasible & (before | beyond) & np.isfinite(t1)
        ok &= np.abs(t1 - fr["t0"]) >= _MIN_SWEEP
        if not ok.any():
            continue
        sel = np.nonzero(ok)[0]
        bary, bary_ok = _collision_bary(
            fr["t0"][sel], t1[sel], n_mov[sel], na0[sel], nb0[sel],
            sa[sel], sb[sel]
        )
        sel = sel[bary_ok]
        bary = bary[bary_ok]
        if len(sel) == 0:
            continue

        d_cross = np.sum(bary * fr["z"][sel], axis=1)
        occ = (
            (occ_depth[sel] < d_cross - _OCC_EPS)
            & (occluder[sel] != face_idx[sel])
            & ~_vertex_in_faces(inputs.faces, occluder[sel], fr["mov"][sel])
        )
        sel = sel[~occ]
        bary = bary[~occ]
        if len(sel) == 0:
            continue

        colors = _collision_colors(inputs, buffers, face_idx[sel], k, bary)
        delta_i = colors - current[sel]
        delta_x = t1[sel] - fr["t0"][sel]
        contrib, gate = _gated_contribution(grad_px[sel], delta_i, delta_x)
        np.add.at(acc, fr["mov"][sel], contrib)
        if records is not None:
            _record(records, rows[sel], cols[sel], fr["mov"][sel], axis,
                    delta_x, delta_i, gate)


def _record(records, rows, cols, verts, axis, delta_x, delta_i, gate):
    if axis == 1:
        rows, cols = cols, rows
    for c in range(delta_i.shape[1]):
        records.append(np.column_stack([
            rows, cols, verts, np.full(len(rows), axis),
            delta_x, delta_i[:, c], gate[:, c].astype(np.float64),
        ]))


# ---------------------------------------------------------------------------
# exact backward paths


def backward_texture(
    buffers: RenderBuffers, inputs: ForwardInputs, grad_image: np.ndarray
) -> np.ndarray:
    """Distribute pixel gradients onto the eight texels each covered pixel
    sampled, times the lighting factor when lit. Exact chain rule with the
    raster assignment held fixed."""
    if inputs.options.mode == "silhouette" or inputs.textures is None:
        raise ValueError("texture gradients need a textured forward pass")
    grad_image = np.asarray(grad_image, dtype=np.float64)
    if grad_image.shape != buffers.image.shape:
        raise ValueError("grad_image shape does not match the rendered image")

    d_texels = np.zeros_like(inputs.textures)
    rows, cols = np.nonzero(buffers.face_id >= 0)
    if len(rows) == 0:
        return d_texels
    face_idx = buffers.face_id[rows, cols]
    grad_px = grad_image[rows, cols]

    if inputs.options.mode == "textured_lit":
        shade = buffers.shade[face_idx]
        lit = buffers.image[rows, cols]
        live = (lit > 0.0) & (lit < 1.0)  # clamped channels pass no gradient
        grad_px = grad_px * live * shade[:, None]

    side = inputs.textures.shape[1]
    corners, corner_w = _trilinear_corners(side, buffers.bary[rows, cols])
    flat = d_texels.reshape(-1, 3)
    for c in range(8):
        i = corners[c]
        lin = ((face_idx * side + i[:, 0]) * side + i[:, 1]) * side + i[:, 2]
        np.add.at(flat, lin, corner_w[c][:, None] * grad_px)
    return d_texels


def backward_lighting(
    buffers: RenderBuffers, inputs: ForwardInputs, grad_image: np.ndarray
) -> tuple[float, float, np.ndarray]:
    """Exact gradients of the lighting model parameters, summed over covered
    pixels: the per-pixel lit color is (ambient + dot(dir, n) * directional)
    times the sampled color, so each parameter's derivative reads off."""
    if buffers.mode != "textured_lit" or inputs.lighting is None:
        raise ValueError("lighting gradients need a lit forward pass")
    grad_image = np.asarray(grad_image, dtype=np.float64)
    if grad_image.shape != buffers.image.shape:
        raise ValueError("grad_image shape does not match the rendered image")

    rows, cols = np.nonzero(buffers.face_id >= 0)
    if len(rows) == 0:
        return 0.0, 0.0, np.zeros(3)
    face_idx = buffers.face_id[rows, cols]
    base = _sample_textures(inputs.textures, face_idx, buffers.bary[rows, cols])
    lit = buffers.image[rows, cols]
    live = (lit > 0.0) & (lit < 1.0)

    # gradient of the per-face shade factor, summed over channels
    d_shade = np.sum(grad_image[rows, cols] * base * live, axis=1)
    ndotn = inputs.face_normals @ inputs.lighting.direction_array
    d_ambient = float(d_shade.sum())
    d_directional = float(np.sum(d_shade * ndotn[face_idx]))
    d_direction = (
        inputs.lighting.directional_intensity
        * (d_shade[:, None] * inputs.face_normals[face_idx]).sum(axis=0)
    )
    return d_ambient, d_directional, d_direction


def backward_render(
    mesh: Mesh,
    viewpoint: Viewpoint,
    options: RenderOptions,
    grad_final_image: np.ndarray,
    lighting: Lighting | None = None,
) -> tuple[GradientSet, np.ndarray]:
    """Full chain: downsample adjoint, raster backward passes, then the
    transform adjoint. Recomputes the forward pass, so it must be called
    with the same arguments as the matching render()."""
    _, buffers, inputs = render_with_buffers(mesh, viewpoint, options, lighting)
    grad_final_image = np.asarray(grad_final_image, dtype=np.float64)
    expected = downstream_shape = (options.output_size, options.output_size)
    if grad_final_image.shape[:2] != expected:
        raise ValueError(
            f"grad_final_image shape {grad_final_image.shape} does not match "
            f"output size {downstream_shape}"
        )
    grad_super = upsample_gradient(grad_final_image, options.downsample_factor)

    grads = GradientSet(d_screen_vertices=backward_vertices(buffers, inputs, grad_super))
    if options.mode in ("textured", "textured_lit"):
        grads.d_texels = backward_texture(buffers, inputs, grad_super)
    if options.mode == "textured_lit":
        grads.d_ambient, grads.d_directional, grads.d_light_direction = (
            backward_lighting(buffers, inputs, grad_super)
        )
    d_object = transform_backward(
        mesh, viewpoint, options.image_size, grads.d_screen_vertices
    )
    return grads, d_object
