import numpy as np
import pytest

from diffrender import (
    AdamState,
    Lighting,
    Mesh,
    RenderOptions,
    Viewpoint,
    adam_step,
    backward_lighting,
    backward_render,
    backward_texture,
    backward_vertices,
    find_cross_points,
    generate_icosphere,
    rasterize,
    render,
    render_with_buffers,
    silhouette_loss,
)
from diffrender.geometry import ScreenVertices
from diffrender.raster_forward import ForwardInputs

from oracles import (
    assemble_surrogate_gradient,
    finite_difference,
    relative_close,
    scan_cross_points,
)

SIL16 = RenderOptions(image_size=16, mode="silhouette")


def make_screen(positions, depths=None):
    positions = np.asarray(positions, dtype=np.float64)
    if depths is None:
        depths = np.ones(len(positions))
    return ScreenVertices(positions, np.asarray(depths, dtype=np.float64),
                          np.ones(len(positions), dtype=bool))


def single_triangle(tri, depths=None, options=SIL16):
    screen = make_screen(tri, depths)
    faces = np.array([[0, 1, 2]])
    buffers = rasterize(screen, faces, options)
    return screen, faces, buffers, ForwardInputs(screen, faces, options)


def raw_lighting(ambient, directional, direction):
    """Lighting without the unit-direction check, for finite differencing
    raw components."""
    light = object.__new__(Lighting)
    object.__setattr__(light, "ambient_intensity", float(ambient))
    object.__setattr__(light, "directional_intensity", float(directional))
    object.__setattr__(light, "direction", tuple(float(d) for d in direction))
    return light


def random_probe_triangle(rng, min_area=4.0):
    while True:
        tri = rng.uniform(-2.0, 18.0, size=(3, 2))
        d1, d2 = tri[1] - tri[0], tri[2] - tri[0]
        if abs(d1[0] * d2[1] - d1[1] * d2[0]) >= min_area:
            return tri


class TestFindCrossPoints:
    def test_arrival_from_background(self):
        # hypotenuse sweeps right past a background pixel: one cross point,
        # color change background 0 -> face 1
        tri = np.array([(2.0, 2.0), (10.0, 2.0), (2.0, 10.0)])
        screen, faces, buffers, _ = single_triangle(tri)
        points = find_cross_points((12.5, 4.5), 1, faces[0], screen, 0,
                                   buffers.image, SIL16)
        assert len(points) == 1
        assert points[0].direction == "right"
        assert points[0].color_change == pytest.approx([1.0])
        assert points[0].distance > 0

    def test_pixel_outside_sweep_range(self):
        tri = np.array([(2.0, 2.0), (10.0, 2.0), (2.0, 10.0)])
        screen, faces, buffers, _ = single_triangle(tri)
        # a row the face's fixed y-extent never reaches
        points = find_cross_points((5.5, 14.5), 1, faces[0], screen, 0,
                                   buffers.image, SIL16)
        assert points == []

    def test_collision_position_matches_scan(self):
        tri = np.array([(2.0, 2.0), (10.0, 2.0), (2.0, 10.0)])
        screen, faces, buffers, _ = single_triangle(tri)
        points = find_cross_points((12.5, 4.5), 1, faces[0], screen, 0,
                                   buffers.image, SIL16)
        _, scan = scan_cross_points(tri, 1, 0, (12.5, 4.5))
        assert "+" in scan
        assert abs(points[0].collision_position - scan["+"][0]) < 2e-3

    def test_departure_has_two_sides(self):
        tri = np.array([(2.0, 2.0), (13.0, 3.0), (4.0, 13.0)])
        screen, faces, buffers, _ = single_triangle(tri)
        inside_pixel = (3.5, 2.5)  # near the apex: both sweeps uncover it
        assert buffers.face_id[2, 3] == 0
        points = find_cross_points(inside_pixel, 0, faces[0], screen, 0,
                                   buffers.image, SIL16)
        directions = {p.direction for p in points}
        assert directions == {"left", "right"}
        for p in points:
            assert p.color_change == pytest.approx([-1.0])
            assert p.collision_color == pytest.approx([1.0])

    def test_vertex_not_in_face_rejected(self):
        tri = np.array([(2.0, 2.0), (10.0, 2.0), (2.0, 10.0)])
        screen, faces, buffers, _ = single_triangle(tri)
        with pytest.raises(ValueError, match="not part of"):
            find_cross_points((4.5, 4.5), 7, faces[0], screen, 0,
                              buffers.image, SIL16)

    @pytest.mark.parametrize("seed", range(4))
    def test_matches_scan_oracle(self, seed):
        # the scan covers a finite span; collisions near its edge fall in a
        # dead band where quantization could flip existence, so both sides
        # use the same window and the band is skipped
        window, band = 35.0, 34.5
        rng = np.random.default_rng(100 + seed)
        checked = 0
        while checked < 20:
            tri = random_probe_triangle(rng)
            screen, faces, buffers, _ = single_triangle(tri)
            r, c = int(rng.integers(0, 16)), int(rng.integers(0, 16))
            k, axis = int(rng.integers(0, 3)), int(rng.integers(0, 2))
            points = find_cross_points((c + 0.5, r + 0.5), k, faces[0], screen,
                                       axis, buffers.image, SIL16)
            _, scan = scan_cross_points(tri, k, axis, (c + 0.5, r + 0.5))
            impl_all = {"+" if p.distance > 0 else "-": p for p in points}
            for d in "+-":
                dists = [abs(impl_all[d].distance)] if d in impl_all else []
                dists += [abs(scan[d][1])] if d in scan else []
                if dists and min(dists) > band:
                    continue  # dead band / beyond the window
                in_impl = d in impl_all and abs(impl_all[d].distance) < window
                in_scan = d in scan and abs(scan[d][1]) < window
                assert in_impl == in_scan
                if in_impl:
                    x1, dx, di = scan[d]
                    assert abs(impl_all[d].collision_position - x1) < 2e-3
                    assert impl_all[d].color_change == pytest.approx([di])
                    checked += 1


class TestBackwardVertices:
    def test_zero_upstream(self):
        tri = np.array([(2.0, 2.0), (13.0, 3.0), (4.0, 13.0)])
        _, faces, buffers, inputs = single_triangle(tri)
        grads = backward_vertices(buffers, inputs, np.zeros((16, 16)))
        assert not grads.any()

    def test_sign_chase_background_pixel(self):
        # pixel right of the face wants to be brighter (upstream < 0):
        # moving the swept vertex right can brighten it, the gate passes,
        # and descent pushes the vertex right (negative gradient)
        tri = np.array([(2.0, 2.0), (10.0, 2.0), (2.0, 10.0)])
        _, faces, buffers, inputs = single_triangle(tri)
        grad_image = np.zeros((16, 16))
        grad_image[4, 12] = -1.0
        grads = backward_vertices(buffers, inputs, grad_image)
        assert grads[1, 0] < 0.0

    def test_gate_closes_for_positive_upstream(self):
        tri = np.array([(2.0, 2.0), (10.0, 2.0), (2.0, 10.0)])
        _, faces, buffers, inputs = single_triangle(tri)
        grad_image = np.zeros((16, 16))
        grad_image[4, 12] = 1.0  # wants darker; arrival can only brighten
        grads = backward_vertices(buffers, inputs, grad_image)
        assert not grads.any()

    def test_gate_property_all_pixels(self):
        # silhouette gates: covered pixels with negative upstream and
        # uncovered pixels with positive upstream contribute nothing
        tri = np.array([(2.0, 2.0), (13.0, 3.0), (4.0, 13.0)])
        _, faces, buffers, inputs = single_triangle(tri)
        closed = np.where(buffers.image > 0.5, -1.0, 1.0)
        assert not backward_vertices(buffers, inputs, closed).any()
        opened = -closed
        assert backward_vertices(buffers, inputs, opened).any()

    def test_bulk_equals_reference_assembly_silhouette(self):
        rng = np.random.default_rng(5)
        for _ in range(5):
            tri = random_probe_triangle(rng)
            screen, faces, buffers, inputs = single_triangle(tri)
            grad_image = rng.normal(size=(16, 16))
            bulk = backward_vertices(buffers, inputs, grad_image)
            ref = np.zeros_like(bulk)
            for r in range(16):
                for c in range(16):
                    up = grad_image[r, c]
                    if up == 0.0:
                        continue
                    for k in range(3):
                        for axis in range(2):
                            pts = find_cross_points(
                                (c + 0.5, r + 0.5), k, faces[0], screen, axis,
                                buffers.image, SIL16)
                            ref[k, axis] += assemble_surrogate_gradient(
                                up,
                                [(p.collision_position, p.distance,
                                  float(p.color_change[0])) for p in pts],
                            )
            assert np.allclose(bulk, ref, atol=1e-9)

    def test_bulk_equals_reference_assembly_textured(self):
        rng = np.random.default_rng(6)
        opts = RenderOptions(image_size=16, mode="textured",
                             background_color=(0.2, 0.1, 0.6))
        tri = np.array([(2.0, 2.0), (13.0, 3.0), (4.0, 13.0)])
        screen = make_screen(tri)
        faces = np.array([[0, 1, 2]])
        textures = rng.random((1, 3, 3, 3, 3))
        buffers = rasterize(screen, faces, opts, textures)
        inputs = ForwardInputs(screen, faces, opts, textures=textures)
        grad_image = rng.normal(size=(16, 16, 3))
        bulk = backward_vertices(buffers, inputs, grad_image)
        ref = np.zeros_like(bulk)
        for r in range(16):
            for c in range(16):
                for k in range(3):
                    for axis in range(2):
                        pts = find_cross_points(
                            (c + 0.5, r + 0.5), k, faces[0], screen, axis,
                            buffers.image, opts, texture=textures[0])
                        for p in pts:
                            gate = grad_image[r, c] * p.color_change < 0.0
                            ref[k, axis] += np.sum(
                                np.where(gate,
                                         grad_image[r, c] * p.color_change, 0.0)
                            ) / p.distance
        assert np.allclose(bulk, ref, atol=1e-9)

    @pytest.mark.parametrize("seed", range(3))
    def test_assembled_gradient_matches_scan(self, seed):
        rng = np.random.default_rng(200 + seed)
        checked = 0
        while checked < 15:
            tri = random_probe_triangle(rng)
            screen, faces, buffers, inputs = single_triangle(tri)
            r, c = int(rng.integers(0, 16)), int(rng.integers(0, 16))
            k, axis = int(rng.integers(0, 3)), int(rng.integers(0, 2))
            _, scan = scan_cross_points(tri, k, axis, (c + 0.5, r + 0.5))
            pts = [v for v in scan.values() if abs(v[1]) >= 0.2]
            if not pts or len(pts) != len(scan):
                continue
            up = float(rng.choice([-1.0, 1.0]) * rng.uniform(0.5, 2.0))
            grad_image = np.zeros((16, 16))
            grad_image[r, c] = up
            impl = backward_vertices(buffers, inputs, grad_image)[k, axis]
            ref = assemble_surrogate_gradient(up, pts)
            # the scan quantizes each collision position by its step
            slack = sum(1.2e-3 * abs(di) / dx**2 for _, dx, di in pts) * abs(up)
            assert abs(impl - ref) <= 1e-2 * abs(ref) + slack
            checked += 1

    def test_occluded_cross_point_contributes_nothing(self):
        # the near triangle covers the probe pixel; the far triangle's
        # sweep would cross it behind the near surface
        near = np.array([(4.0, 4.0), (14.0, 4.0), (4.0, 14.0)])
        far = np.array([(18.0, 2.0), (26.0, 2.0), (18.0, 15.0)])
        screen = make_screen(np.vstack([near, far]), [1, 1, 1, 5, 5, 5])
        faces = np.array([[0, 1, 2], [3, 4, 5]])
        buffers = rasterize(screen, faces, SIL16)
        inputs = ForwardInputs(screen, faces, SIL16)
        assert buffers.face_id[8, 8] == 0
        grad_image = np.zeros((16, 16))
        grad_image[8, 8] = -1.0
        grads = backward_vertices(buffers, inputs, grad_image)
        assert not grads[3:].any()

    def test_unoccluded_far_triangle_still_pulled(self):
        near = np.array([(4.0, 4.0), (14.0, 4.0), (4.0, 14.0)])
        far = np.array([(18.0, 2.0), (26.0, 2.0), (18.0, 15.0)])
        screen = make_screen(np.vstack([near, far]), [1, 1, 1, 5, 5, 5])
        faces = np.array([[0, 1, 2], [3, 4, 5]])
        buffers = rasterize(screen, faces, SIL16)
        inputs = ForwardInputs(screen, faces, SIL16)
        assert buffers.face_id[2, 15] == -1  # uncovered background pixel
        grad_image = np.zeros((16, 16))
        grad_image[2, 15] = -1.0
        grads = backward_vertices(buffers, inputs, grad_image)
        assert grads[3:].any()

    def test_axis_symmetry_exact(self):
        rng = np.random.default_rng(3)
        pos = rng.uniform(0, 16, size=(9, 2))
        depths = rng.uniform(1, 5, size=9)
        faces = np.arange(9).reshape(3, 3)
        screen_a = make_screen(pos, depths)
        screen_b = make_screen(pos[:, ::-1], depths)
        buf_a = rasterize(screen_a, faces, SIL16)
        buf_b = rasterize(screen_b, faces, SIL16)
        grad_image = rng.normal(size=(16, 16))
        g_a = backward_vertices(buf_a, ForwardInputs(screen_a, faces, SIL16),
                                grad_image)
        g_b = backward_vertices(buf_b, ForwardInputs(screen_b, faces, SIL16),
                                grad_image.T)
        assert np.array_equal(g_a, g_b[:, ::-1])

    def test_linearity_matching_signs(self):
        rng = np.random.default_rng(4)
        pos = rng.uniform(0, 16, size=(9, 2))
        faces = np.arange(9).reshape(3, 3)
        screen = make_screen(pos, rng.uniform(1, 5, size=9))
        buffers = rasterize(screen, faces, SIL16)
        inputs = ForwardInputs(screen, faces, SIL16)
        g1 = np.abs(rng.normal(size=(16, 16)))
        g2 = np.abs(rng.normal(size=(16, 16)))
        combined = backward_vertices(buffers, inputs, 2.0 * g1 + 0.5 * g2)
        split = (2.0 * backward_vertices(buffers, inputs, g1)
                 + 0.5 * backward_vertices(buffers, inputs, g2))
        assert np.allclose(combined, split, atol=1e-12)

    def test_shape_mismatch_rejected(self):
        tri = np.array([(2.0, 2.0), (13.0, 3.0), (4.0, 13.0)])
        _, faces, buffers, inputs = single_triangle(tri)
        with pytest.raises(ValueError, match="shape"):
            backward_vertices(buffers, inputs, np.zeros((8, 8)))

    def test_debug_csv_dump(self, tmp_path):
        tri = np.array([(2.0, 2.0), (13.0, 3.0), (4.0, 13.0)])
        _, faces, buffers, inputs = single_triangle(tri)
        grad_image = np.where(buffers.image > 0.5, 1.0, -1.0)
        path = tmp_path / "contrib.csv"
        backward_vertices(buffers, inputs, grad_image, debug_csv=path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "row,col,vertex,axis,delta_x,delta_i,gate"
        assert len(lines) > 1
        data = np.loadtxt(lines[1:], delimiter=",").reshape(-1, 7)
        assert set(np.unique(data[:, 6])) <= {0.0, 1.0}
        assert np.abs(data[:, 4]).min() > 0.0  # no zero-distance records


class TestBackwardTexture:
    def _textured_scene(self, rng, size=24):
        opts = RenderOptions(image_size=size, mode="textured",
                             background_color=(0.1, 0.2, 0.3))
        mesh = generate_icosphere(1)
        mesh.textures = rng.random((mesh.n_faces, 3, 3, 3, 3)) * 0.8 + 0.1
        vp = Viewpoint(30, 20, 2.732, 60)
        img, buffers, inputs = render_with_buffers(mesh, vp, opts)
        return mesh, vp, opts, img, buffers, inputs

    def test_zero_gradient(self):
        rng = np.random.default_rng(1)
        mesh, vp, opts, img, buffers, inputs = self._textured_scene(rng)
        d = backward_texture(buffers, inputs, np.zeros_like(img))
        assert not d.any()

    def test_grid_aligned_weights_hit_single_texel(self):
        opts = RenderOptions(image_size=4, mode="textured")
        # degenerate-free triangle whose first vertex sits on pixel (1, 1)
        screen = make_screen([(1.5, 1.5), (9.0, 2.0), (2.0, 9.0)])
        faces = np.array([[0, 1, 2]])
        textures = np.zeros((1, 2, 2, 2, 3))
        buffers = rasterize(screen, faces, opts, textures)
        inputs = ForwardInputs(screen, faces, opts, textures=textures)
        assert buffers.face_id[1, 1] == 0
        assert buffers.bary[1, 1] == pytest.approx((1.0, 0.0, 0.0))
        grad = np.zeros((4, 4, 3))
        grad[1, 1] = (1.0, 2.0, 3.0)
        d = backward_texture(buffers, inputs, grad)
        assert d[0, 1, 0, 0] == pytest.approx((1.0, 2.0, 3.0))
        d[0, 1, 0, 0] = 0.0
        assert not d.any()

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        mesh, vp, opts, img, buffers, inputs = self._textured_scene(rng)
        grad_image = rng.normal(size=img.shape)
        analytic = backward_texture(buffers, inputs, grad_image)
        flat = analytic.reshape(-1)
        probes = np.argsort(-np.abs(flat))[:40:2]  # 20 live texel channels
        for i in probes:
            def objective(x):
                texels = mesh.textures.copy().reshape(-1)
                texels[i] = x
                probed = Mesh(mesh.vertices, mesh.faces,
                              texels.reshape(mesh.textures.shape))
                return float(np.sum(render(probed, vp, opts) * grad_image))

            x0 = mesh.textures.reshape(-1)[i]
            numeric = (objective(x0 + 1e-5) - objective(x0 - 1e-5)) / 2e-5
            assert abs(numeric - flat[i]) <= 1e-3 * max(abs(numeric), 1e-6) + 1e-9

    def test_silhouette_buffers_rejected(self):
        tri = np.array([(2.0, 2.0), (13.0, 3.0), (4.0, 13.0)])
        _, faces, buffers, inputs = single_triangle(tri)
        with pytest.raises(ValueError, match="textured"):
            backward_texture(buffers, inputs, np.zeros((16, 16)))


class TestBackwardLighting:
    def _lit_scene(self, rng, size=24):
        opts = RenderOptions(image_size=size, mode="textured_lit")
        mesh = generate_icosphere(1)
        mesh.textures = rng.random((mesh.n_faces, 3, 3, 3, 3)) * 0.6 + 0.2
        direction = np.array([0.2, 0.8, 0.4])
        light = Lighting(0.45, 0.35, tuple(direction / np.linalg.norm(direction)))
        vp = Viewpoint(30, 20, 2.732, 60)
        img, buffers, inputs = render_with_buffers(mesh, vp, opts, light)
        return mesh, vp, opts, light, img, buffers, inputs

    def test_zero_gradient(self):
        rng = np.random.default_rng(2)
        *_, img, buffers, inputs = self._lit_scene(rng)
        d_a, d_d, d_dir = backward_lighting(buffers, inputs, np.zeros_like(img))
        assert d_a == 0.0 and d_d == 0.0 and not d_dir.any()

    def test_single_pixel_read_off(self):
        # one covered pixel with unit color and normal aligned with the
        # light: d_ambient and d_directional are both 3 under unit upstream
        opts = RenderOptions(image_size=4, mode="textured_lit")
        screen = make_screen([(1.5, 1.5), (2.4, 1.5), (1.5, 2.4)])
        faces = np.array([[0, 1, 2]])
        textures = np.ones((1, 2, 2, 2, 3))
        light = Lighting(0.3, 0.2, (0.0, 0.0, 1.0))
        normals = np.array([[0.0, 0.0, 1.0]])
        buffers = rasterize(screen, faces, opts, textures, light, normals)
        inputs = ForwardInputs(screen, faces, opts, textures, light, normals)
        assert (buffers.face_id >= 0).sum() == 1
        grad = np.ones((4, 4, 3))
        d_a, d_d, d_dir = backward_lighting(buffers, inputs, grad)
        assert d_a == pytest.approx(3.0)
        assert d_d == pytest.approx(3.0)
        assert d_dir == pytest.approx([0.0, 0.0, 0.2 * 3.0])

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(13)
        mesh, vp, opts, light, img, buffers, inputs = self._lit_scene(rng)
        grad_image = rng.normal(size=img.shape)
        d_a, d_d, d_dir = backward_lighting(buffers, inputs, grad_image)
        analytic = np.array([d_a, d_d, *d_dir])

        def objective(params):
            probed = raw_lighting(params[0], params[1], params[2:])
            return float(np.sum(render(mesh, vp, opts, probed) * grad_image))

        p0 = np.array([light.ambient_intensity, light.directional_intensity,
                       *light.direction])
        numeric = finite_difference(objective, p0, step=1e-4)
        assert relative_close(analytic, numeric, rel=1e-3, floor=1e-6)

    def test_unlit_buffers_rejected(self):
        rng = np.random.default_rng(1)
        opts = RenderOptions(image_size=16, mode="textured")
        mesh = generate_icosphere(0)
        mesh.textures = rng.random((mesh.n_faces, 2, 2, 2, 3))
        img, buffers, inputs = render_with_buffers(mesh, Viewpoint(0, 0, 2.732, 60),
                                                   opts)
        with pytest.raises(ValueError, match="lit"):
            backward_lighting(buffers, inputs, np.zeros_like(img))


class TestBackwardRender:
    def test_zero_upstream_zero_everywhere(self):
        mesh = generate_icosphere(1)
        opts = RenderOptions(image_size=32, mode="silhouette")
        grads, d_obj = backward_render(mesh, Viewpoint(0, 0, 2.732, 60), opts,
                                       np.zeros((32, 32)))
        assert not grads.d_screen_vertices.any()
        assert not d_obj.any()

    def test_shifted_target_pulls_mesh_sideways(self):
        mesh = generate_icosphere(2)
        opts = RenderOptions(image_size=32, mode="silhouette")
        vp = Viewpoint(0, 0, 2.732, 60)
        rendered = render(mesh, vp, opts)
        target = np.zeros_like(rendered)
        target[:, 4:] = rendered[:, :-4]  # shift the target right
        loss = silhouette_loss(rendered, target)
        _, d_obj = backward_render(mesh, vp, opts, loss.gradient)
        assert d_obj[:, 0].mean() < 0.0  # descent moves the object right

        def iou(a, b):
            return np.sum((a > 0.5) & (b > 0.5)) / np.sum((a > 0.5) | (b > 0.5))

        stepped = Mesh(mesh.vertices - 0.02 * d_obj / np.abs(d_obj).max(),
                       mesh.faces)
        assert iou(render(stepped, vp, opts), target) > iou(rendered, target)

    def test_texture_only_descent_decreases_loss(self):
        rng = np.random.default_rng(0)
        quad = Mesh(
            np.array([[-1, -1, 0], [1, -1, 0], [1, 1, 0], [-1, 1, 0.0]]),
            np.array([[0, 1, 2], [0, 2, 3]]),
            np.full((2, 2, 2, 2, 3), 0.5),
        )
        opts = RenderOptions(image_size=32, mode="textured")
        vp = Viewpoint(0, 0, 4.0, 60)
        target = rng.random((32, 32, 3))
        state = AdamState.for_parameters(quad.textures, alpha=5e-2, name="texels")
        params = quad.textures.copy()
        losses = []
        for _ in range(50):
            quad.textures = params
            image = render(quad, vp, opts)
            diff = image - target
            losses.append(float(np.sum(diff * diff)))
            grads, _ = backward_render(quad, vp, opts, 2.0 * diff)
            params, state = adam_step(state, params, grads.d_texels)
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_downsampled_gradient_path(self):
        mesh = generate_icosphere(1)
        opts = RenderOptions(image_size=32, downsample_factor=2, mode="silhouette")
        grads, d_obj = backward_render(mesh, Viewpoint(0, 10, 2.732, 60), opts,
                                       np.ones((16, 16)))
        assert np.isfinite(d_obj).all()

    def test_grad_shape_checked(self):
        mesh = generate_icosphere(0)
        opts = RenderOptions(image_size=32, mode="silhouette")
        with pytest.raises(ValueError, match="shape"):
            backward_render(mesh, Viewpoint(0, 0, 2.732, 60), opts,
                            np.zeros((8, 8)))
