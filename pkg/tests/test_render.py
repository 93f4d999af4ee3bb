import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from facegaze.errors import ExtractionError, InvalidArgumentError, PreconditionError, ValidationError
from facegaze.fitting import FitConfig, FitResult, fit
from facegaze.model import Shape, synthesize
from facegaze.pointcloud import CameraIntrinsics, depth_to_points
from facegaze.render import (
    Image,
    RenderConfig,
    box_cell_means,
    cell_means,
    crop_box,
    downsample_to_feature,
    extract_eye_patch,
    eye_box,
    eye_feature,
    normalize_pose,
    project,
    rasterize,
    read_pgm,
    render_mesh,
    sample_texture,
    subdivide,
    write_pgm,
)
from facegaze.synth import (
    Scenario,
    generate_eye_appearance,
    generate_gaze_track,
    generate_scan,
    head_rotation,
    render_sensed_image,
    subject_coefficients,
)

INTR = CameraIntrinsics(200.0, 200.0, 100.0, 100.0, 200, 200)


def fake_fit(R, t, coeffs, converged=True):
    from facegaze.fitting import Energies
    return FitResult(np.asarray(coeffs, float), np.asarray(R, float), np.asarray(t, float), converged,
                     1, Energies(0, 0, 0, 0), np.zeros(0))


class TestProject:
    def test_optical_axis(self):
        intr = CameraIntrinsics(500.0, 500.0, 320.0, 240.0, 640, 480)
        uvz, ok = project([[0.0, 0.0, 1.0]], intr)
        np.testing.assert_array_equal(uvz[0], [320, 240, 1])
        assert ok[0]

    @given(st.floats(-0.5, 0.5), st.floats(-0.5, 0.5), st.floats(0.2, 3.0), st.floats(0.1, 10.0))
    def test_projective_scaling(self, x, y, z, s):
        a, _ = project([[x, y, z]], INTR)
        b, _ = project([[s * x, s * y, s * z]], INTR)
        np.testing.assert_allclose(a[0, :2], b[0, :2], rtol=1e-12, atol=1e-9)

    def test_behind_camera_flagged(self):
        _, ok = project([[0.0, 0.0, -1.0]], INTR)
        assert not ok[0]

    def test_round_trip_with_back_projection(self, rng):
        intr = CameraIntrinsics(300.0, 310.0, 15.5, 11.5, 32, 24)
        pts = depth_to_points(rng.uniform(0.4, 2.0, (24, 32)), intr).points
        uvz, _ = project(pts, intr)
        back = depth_to_points(_depth_from(uvz, intr), intr).points
        np.testing.assert_allclose(back, pts, atol=1e-9)


def _depth_from(uvz, intr):
    depth = np.full((intr.height, intr.width), np.nan)
    depth[np.rint(uvz[:, 1]).astype(int), np.rint(uvz[:, 0]).astype(int)] = uvz[:, 2]
    return depth


class TestSampleTexture:
    def _shape(self, pts):
        return Shape(np.asarray(pts, float), np.array([[0, 1, 2]]))

    def test_constant_image(self, rng):
        pts = np.column_stack([rng.uniform(-0.2, 0.2, (30, 2)), rng.uniform(0.5, 1, 30)])
        vals = sample_texture(Shape(pts, np.array([[0, 1, 2]])), Image(np.full((200, 200), 0.3)), INTR)
        np.testing.assert_allclose(vals, 0.3, atol=1e-15)

    def test_pixel_center(self, rng):
        img = rng.random((200, 200))
        # (x, y, z) = ((col - cx) z / f, (row - cy) z / f, z) hits pixel (row, col)
        pts = [[(37 - 100) * 0.8 / 200, (52 - 100) * 0.8 / 200, 0.8], [0, 0, 1.0], [0.01, 0, 1.0]]
        vals = sample_texture(self._shape(pts), Image(img), INTR)
        assert vals[0] == pytest.approx(img[52, 37], abs=1e-12)
        assert vals[1] == pytest.approx(img[100, 100], abs=1e-12)

    def test_linear_ramp(self, rng):
        cols = np.arange(200) / 199.0
        img = Image(np.tile(cols, (200, 1)))
        pts = np.column_stack([rng.uniform(-0.4, 0.4, (50, 2)), np.full(50, 1.0)])
        vals = sample_texture(Shape(pts, np.array([[0, 1, 2]])), img, INTR)
        u = 200 * pts[:, 0] + 100
        np.testing.assert_allclose(vals, u / 199.0, atol=1e-6)

    def test_outside_is_nan(self):
        vals = sample_texture(self._shape([[5.0, 0, 1], [0, 0, -1], [0, 0, 1]]),
                              Image(np.ones((200, 200))), INTR)
        assert np.isnan(vals[0]) and np.isnan(vals[1]) and vals[2] == 1.0

    def test_occlusion_test_hides_back_vertices(self):
        # a big near triangle in front of a far vertex
        near = [[-0.2, -0.2, 0.5], [0.2, -0.2, 0.5], [0.0, 0.2, 0.5]]
        pts = np.array(near + [[0.0, 0.0, 1.0], [0.01, 0.0, 1.0], [0.0, 0.01, 1.0]])
        shape = Shape(pts, np.array([[0, 1, 2], [3, 4, 5]]))
        img = Image(np.full((200, 200), 0.5))
        plain = sample_texture(shape, img, INTR)
        hidden = sample_texture(shape, img, INTR, occlusion_test=True)
        assert np.all(np.isfinite(plain))
        assert np.all(np.isnan(hidden[3:])) and np.all(np.isfinite(hidden[:3]))


class TestRenderMesh:
    def test_single_triangle(self):
        pts = np.array([[-0.1, -0.1, 1.0], [0.1, -0.1, 1.0], [-0.1, 0.1, 1.0]])
        img = render_mesh(pts, [[0, 1, 2]], [0.4, 0.4, 0.4], INTR, background=0.1)
        # covered pixel centers: u, v in [80, 120] with (u - 80) + (v - 80) <= 40
        v, u = np.mgrid[0:200, 0:200]
        inside = (u >= 80) & (v >= 80) & (u - 80 + v - 80 <= 40)
        np.testing.assert_array_equal(img.mask, inside)
        np.testing.assert_allclose(img.data[inside], 0.4)
        np.testing.assert_allclose(img.data[~inside], 0.1)

    def test_nearer_triangle_wins(self):
        far = [[-0.3, -0.3, 0.7], [0.3, -0.3, 0.7], [0.0, 0.3, 0.7]]
        near = [[-0.2, -0.2, 0.5], [0.2, -0.2, 0.5], [0.0, 0.2, 0.5]]
        for order in ((0, 1), (1, 0)):
            tris = [[0, 1, 2], [3, 4, 5]] if order == (0, 1) else [[3, 4, 5], [0, 1, 2]]
            img = render_mesh(np.array(far + near), tris, [0.2] * 3 + [0.9] * 3, INTR)
            assert img.data[100, 100] == pytest.approx(0.9)

    def test_square_area(self):
        intr = CameraIntrinsics(200.0, 200.0, 99.5, 99.5, 200, 200)
        s = 0.2
        pts = np.array([[-s, -s, 1.0], [s, -s, 1.0], [s, s, 1.0], [-s, s, 1.0]])
        img = render_mesh(pts, [[0, 1, 2], [0, 2, 3]], [1.0] * 4, intr)
        expected = (2 * s * 200) ** 2
        assert abs(img.mask.sum() - expected) / expected < 0.02

    def test_perspective_correct_barycentrics(self):
        # plane tilted in depth: interpolated depth must match the true ray-plane intersection
        pts = np.array([[-0.3, -0.3, 0.6], [0.3, -0.3, 1.2], [0.0, 0.4, 0.9]])
        fr = rasterize(pts, [[0, 1, 2]], INTR)
        n = np.cross(pts[1] - pts[0], pts[2] - pts[0])
        rows, cols = np.nonzero(fr.triangle >= 0)
        rays = np.column_stack([(cols - 100) / 200, (rows - 100) / 200, np.ones(len(rows))])
        z = (n @ pts[0]) / (rays @ n)
        np.testing.assert_allclose(fr.depth[rows, cols], z, rtol=1e-10)


class TestSubdivide:
    def test_counts_and_shared_midpoints(self, small_model):
        V, T = small_model.mean_vertices, small_model.triangles
        edges = {tuple(sorted(e)) for t in T for e in ((t[0], t[1]), (t[1], t[2]), (t[2], t[0]))}
        v1, t1 = subdivide(V, T, 1)
        assert len(v1) == len(V) + len(edges)
        assert len(t1) == 4 * len(T)
        np.testing.assert_array_equal(v1[:len(V)], V)
        assert len(np.unique(np.round(v1, 12), axis=0)) == len(v1)

    def test_level_zero_is_identity(self, small_model):
        v, t = subdivide(small_model.mean_vertices, small_model.triangles, 0)
        np.testing.assert_array_equal(v, small_model.mean_vertices)
        np.testing.assert_array_equal(t, small_model.triangles)

    def test_children_tile_parent(self):
        tri = np.array([[0.0, 0.0, 1.0], [0.3, 0.0, 1.2], [0.0, 0.2, 0.9]])
        v, t = subdivide(tri, [[0, 1, 2]], 2)
        area = lambda p: 0.5 * np.linalg.norm(np.cross(p[1] - p[0], p[2] - p[0]))
        assert sum(area(v[k]) for k in t) == pytest.approx(area(tri), rel=1e-12)
        # every new vertex lies in the parent's plane
        n = np.cross(tri[1] - tri[0], tri[2] - tri[0])
        np.testing.assert_allclose((v - tri[0]) @ n, 0.0, atol=1e-15)

    def test_linear_intensity_renders_identically(self):
        pts = np.array([[-0.3, -0.3, 0.6], [0.3, -0.3, 1.2], [0.0, 0.4, 0.9], [0.3, 0.3, 1.0]])
        tris = np.array([[0, 1, 2], [1, 3, 2]])
        ramp = lambda p: 0.2 + 0.5 * (p[:, 0] + 0.3) + 0.3 * (p[:, 2] - 0.6)
        coarse = render_mesh(pts, tris, ramp(pts), INTR)
        v, t = subdivide(pts, tris, 2)
        fine = render_mesh(v, t, ramp(v), INTR)
        both = coarse.mask & fine.mask
        assert (coarse.mask != fine.mask).sum() <= 0.01 * coarse.mask.sum()
        np.testing.assert_allclose(fine.data[both], coarse.data[both], atol=1e-12)

    def test_negative_levels(self):
        with pytest.raises(InvalidArgumentError):
            subdivide(np.zeros((3, 3)), [[0, 1, 2]], -1)


class TestNormalizePose:
    def test_identity_pose_unchanged(self, small_model, rng):
        c = rng.normal(size=small_model.k) * 0.01
        canon = normalize_pose(fake_fit(np.eye(3), [0, 0, 0.6], c), small_model)
        posed = synthesize(small_model, c).transformed(np.eye(3), [0, 0, 0.6])
        np.testing.assert_array_equal(canon.vertices, posed.vertices)

    def test_yaw_removed(self, small_model, rng):
        c = rng.normal(size=small_model.k) * 0.01
        canon = normalize_pose(fake_fit(head_rotation(np.radians(30), 0), [0.1, 0, 0.7], c), small_model)
        expected = synthesize(small_model, c).vertices + [0, 0, 0.6]
        np.testing.assert_allclose(canon.vertices, expected, atol=1e-12)

    def test_requires_convergence(self, small_model):
        with pytest.raises(PreconditionError):
            normalize_pose(fake_fit(np.eye(3), [0, 0, 0.6], np.zeros(small_model.k), False), small_model)

    def test_rerender_matches_ground_truth(self, face_model):
        c = subject_coefficients(face_model, 2)
        R, t = head_rotation(np.radians(15), np.radians(-8)), np.array([0.01, -0.01, 0.62])
        patches = {e: generate_eye_appearance(np.array([0.1, 0.05, -1.0])) for e in ("left_eye", "right_eye")}
        cam = CameraIntrinsics.vga()
        sensed = render_sensed_image(face_model, c, R, t, patches, cam)
        res = fit(face_model, generate_scan(face_model, Scenario(c, R, t, seed=3)), (R, t, None))
        rc = RenderConfig()
        shape = synthesize(face_model, res.coeffs).transformed(res.R, res.t)
        colors = sample_texture(shape, sensed, cam, occlusion_test=True)
        ours = render_mesh(normalize_pose(res, face_model), face_model.triangles, colors, rc.intrinsics)
        truth = render_sensed_image(face_model, c, np.eye(3), [0, 0, rc.z0], patches, rc.intrinsics)
        both = ours.mask & truth.mask
        assert both.sum() > 0.9 * truth.mask.sum()
        assert np.mean(np.abs(ours.data[both] - truth.data[both])) < 0.05


class TestEyePatch:
    def _shape_with_eye_box(self):
        intr = CameraIntrinsics(100.0, 100.0, 100.0, 100.0, 300, 300)
        # eye vertices projecting to (100, 100)-(140, 120) at depth 1
        uv = np.array([[100, 100], [140, 100], [140, 120], [100, 120], [120, 110]], float)
        pts = np.column_stack([(uv - 100) / 100, np.ones(len(uv))])
        return Shape(pts, np.array([[0, 1, 2]])), intr

    def test_box_with_margin(self):
        shape, intr = self._shape_with_eye_box()
        np.testing.assert_allclose(eye_box(shape, np.arange(5), intr, 0.25), (90, 95, 150, 125))

    def test_margin_zero(self):
        shape, intr = self._shape_with_eye_box()
        np.testing.assert_allclose(eye_box(shape, np.arange(5), intr, 0.0), (100, 100, 140, 120))
        patch = extract_eye_patch(Image(np.zeros((300, 300))), shape, np.arange(5), intr, 0.0)
        assert (patch.height, patch.width) == (20, 40)

    def test_region_outside_image(self):
        shape, intr = self._shape_with_eye_box()
        with pytest.raises(ExtractionError):
            crop_box(Image(np.zeros((110, 110))), eye_box(shape, np.arange(5), intr))

    def test_patch_contains_pupil(self, face_model):
        rc = RenderConfig()
        c = subject_coefficients(face_model, 1)
        canon = synthesize(face_model, c).transformed(np.eye(3), [0, 0, rc.z0])
        track = generate_gaze_track("raster", 60, 6)
        for _, g in track[::7]:
            patches = {e: generate_eye_appearance(g) for e in ("left_eye", "right_eye")}
            img = render_sensed_image(face_model, c, np.eye(3), [0, 0, rc.z0], patches, rc.intrinsics)
            for eye in ("left_eye", "right_eye"):
                u0, v0, u1, v1 = eye_box(canon, face_model.annotations[eye], rc.intrinsics, rc.margin)
                # pupil pixels near this eye, found in the full image
                rows, cols = np.nonzero((img.data < 0.3) & img.mask)
                cu, cv = (u0 + u1) / 2, (v0 + v1) / 2
                near = (np.abs(cols - cu) < (u1 - u0)) & (np.abs(rows - cv) < (v1 - v0))
                pu, pv = cols[near].mean(), rows[near].mean()
                assert u0 <= pu <= u1 and v0 <= pv <= v1


class TestFeatures:
    def test_identity_on_3x5(self, rng):
        p = rng.random((3, 5))
        np.testing.assert_array_equal(downsample_to_feature(Image(p), normalize=False), p.ravel())

    def test_constant_patch(self):
        np.testing.assert_array_equal(downsample_to_feature(Image(np.full((9, 12), 0.4))), np.zeros(15))

    def test_checkerboard(self):
        board = (np.indices((6, 10)).sum(axis=0) % 2).astype(float)
        np.testing.assert_allclose(cell_means(board), 0.5)

    def test_normalized_range(self, rng):
        f = downsample_to_feature(Image(rng.random((28, 40))))
        assert f.min() == 0.0 and f.max() == 1.0

    def test_uneven_cells_average_exactly(self, rng):
        p = rng.random((7, 11))
        # rows split 0:2, 2:4, 4:7; columns 0:2, 2:4, 4:6, 6:8, 8:11
        assert cell_means(p)[2, 4] == pytest.approx(p[4:7, 8:11].mean(), abs=1e-15)


class TestSubpixelCells:
    def test_integer_box_matches_crop(self, rng):
        img = Image(rng.random((40, 60)))
        box = (7, 4, 27, 19)  # 20 x 15, divisible into 5 x 3 cells
        np.testing.assert_allclose(box_cell_means(img, box), cell_means(crop_box(img, box)), rtol=1e-13)

    @given(st.integers(0, 40), st.integers(0, 30), st.integers(25, 80), st.integers(15, 60))
    @settings(max_examples=30, deadline=None)
    def test_matches_supersampled_oracle(self, u0, v0, w, h):
        # a box on a tenth-pixel grid is an integer box of the 10x upsampled image
        data = np.random.default_rng(u0 * 1000 + v0).random((12, 16))
        big = np.kron(data, np.ones((10, 10)))
        box = (u0 / 10, v0 / 10, (u0 + w) / 10, (v0 + h) / 10)
        want = np.empty((3, 5))
        for i in range(3):
            for j in range(5):
                r = np.linspace(v0, v0 + h, 4)
                c = np.linspace(u0, u0 + w, 6)
                # cell edges fall between tenth-pixel samples; weight the boundary samples fractionally
                rw = np.clip(np.minimum(r[i + 1], np.arange(120) + 1) - np.maximum(r[i], np.arange(120)), 0, None)
                cw = np.clip(np.minimum(c[j + 1], np.arange(160) + 1) - np.maximum(c[j], np.arange(160)), 0, None)
                want[i, j] = rw @ big @ cw / (rw.sum() * cw.sum())
        np.testing.assert_allclose(box_cell_means(Image(data), box), want, rtol=1e-12)

    def test_continuous_in_box_position(self, rng):
        img = Image(rng.random((40, 60)))
        a = box_cell_means(img, (10.0, 5.0, 40.0, 25.0))
        b = box_cell_means(img, (10.001, 5.0, 40.001, 25.0))
        assert np.abs(a - b).max() < 1e-3

    def test_outside_image(self):
        with pytest.raises(ExtractionError):
            box_cell_means(Image(np.zeros((20, 20))), (-0.5, 0, 10, 10))

    def test_eye_feature_normalized(self):
        shape, intr = TestEyePatch._shape_with_eye_box(None)
        img = Image(np.tile(np.linspace(0, 1, 300), (300, 1)))
        f = eye_feature(img, shape, np.arange(5), intr, 0.0)
        assert f.min() == 0.0 and f.max() == 1.0
        np.testing.assert_allclose(f.reshape(3, 5)[0], np.linspace(0, 1, 5), atol=1e-12)


class TestImages:
    def test_pgm_round_trip(self, tmp_path, rng):
        q = rng.integers(0, 256, (17, 23)) / 255.0
        write_pgm(Image(q), tmp_path / "a.pgm")
        np.testing.assert_allclose(read_pgm(tmp_path / "a.pgm").data, q, atol=1e-15)

    def test_out_of_range_rejected(self):
        with pytest.raises(ValidationError):
            Image(np.full((2, 2), 1.5))
