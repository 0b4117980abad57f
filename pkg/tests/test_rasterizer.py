import numpy as np
import pytest

from gs4d.gaussians import Camera, Gaussians
from gs4d.rasterizer import (
    LOWPASS,
    RenderOutput,
    RenderSettings,
    rasterize,
    save_color_png,
    save_transmittance_raw,
)
from gs4d.sh import eval_sh


def make_camera(size=8, focal=16.0, z_off=0.0):
    w2c = np.eye(4)
    w2c[2, 3] = z_off
    return Camera(
        world_to_camera=w2c,
        focal=np.array([focal, focal]),
        principal_point=np.array([(size - 1) / 2.0, (size - 1) / 2.0]),
        image_size=(size, size),
    )


def random_scene(rng, n, degree=1, z_range=(1.5, 4.0), spread=0.6, opac=(0.2, 0.9)):
    centers = np.column_stack(
        [
            rng.uniform(-spread, spread, n),
            rng.uniform(-spread, spread, n),
            rng.uniform(*z_range, n),
        ]
    )
    k = (degree + 1) ** 2
    sh = rng.normal(0.0, 0.3, (n, k, 3))
    return Gaussians(
        centers=centers,
        rotations=rng.normal(size=(n, 4)),
        log_scales=rng.uniform(np.log(0.05), np.log(0.35), (n, 3)),
        opacity_logits=np.log(
            rng.uniform(*opac, n) / (1 - rng.uniform(*opac, n))
        ),
        sh_coeffs=sh,
        embeddings=np.zeros((n, 2)),
    )


def oracle_render(gaussians, camera, settings):
    """Scalar per-pixel reference: full global depth sort, no spatial culling.

    Evaluates the blend contract directly with its own linear algebra
    (np.linalg.inv for the conic), returning color, transmittance, count and
    the per-pixel list of accepted alphas.
    """
    w, h = camera.image_size
    n = len(gaussians)
    fx, fy = camera.focal
    cx, cy = camera.principal_point
    wr = camera.rotation

    splats = []
    for i in range(n):
        pc = wr @ gaussians.centers[i] + camera.translation
        if pc[2] <= settings.near_plane:
            continue
        x, y, z = pc
        u = fx * x / z + cx
        v = fy * y / z + cy
        q = gaussians.rotations[i] / np.linalg.norm(gaussians.rotations[i])
        qw, qx, qy, qz = q
        rot = np.array(
            [
                [1 - 2 * (qy**2 + qz**2), 2 * (qx * qy - qw * qz), 2 * (qx * qz + qw * qy)],
                [2 * (qx * qy + qw * qz), 1 - 2 * (qx**2 + qz**2), 2 * (qy * qz - qw * qx)],
                [2 * (qx * qz - qw * qy), 2 * (qy * qz + qw * qx), 1 - 2 * (qx**2 + qy**2)],
            ]
        )
        s = np.diag(np.exp(gaussians.log_scales[i]))
        cov3 = rot @ s @ s.T @ rot.T
        jac = np.array([[fx / z, 0, -fx * x / z**2], [0, fy / z, -fy * y / z**2]])
        t2 = jac @ wr
        cov2 = t2 @ cov3 @ t2.T + LOWPASS * np.eye(2)
        conic = np.linalg.inv(cov2)
        opacity = 1.0 / (1.0 + np.exp(-gaussians.opacity_logits[i]))
        viewdir = gaussians.centers[i] - camera.position
        viewdir = viewdir / np.linalg.norm(viewdir)
        color = eval_sh(gaussians.sh_coeffs[i], viewdir, gaussians.sh_degree)
        splats.append((z, i, np.array([u, v]), conic, opacity, color))
    splats.sort(key=lambda t: (t[0], t[1]))

    bg = np.asarray(settings.background, float)
    color_buf = np.zeros((h, w, 3))
    t_buf = np.ones((h, w))
    count = np.zeros((h, w), dtype=int)
    traces = {}
    for iy in range(h):
        for ix in range(w):
            t = 1.0
            c = np.zeros(3)
            n_contrib = 0
            trace = []
            for z, i, mu, conic, opacity, col in splats:
                d = np.array([ix, iy]) - mu
                alpha = min(settings.max_alpha, opacity * np.exp(-0.5 * d @ conic @ d))
                if alpha < settings.alpha_cutoff:
                    continue
                tn = t * (1 - alpha)
                if tn < settings.transmittance_floor:
                    break
                c += t * alpha * col
                t = tn
                n_contrib += 1
                trace.append(alpha)
            color_buf[iy, ix] = c + t * bg
            t_buf[iy, ix] = t
            count[iy, ix] = n_contrib
            traces[(iy, ix)] = trace
    return color_buf, t_buf, count, traces


class TestForwardTrivial:
    def test_empty_scene(self):
        g = Gaussians(
            centers=np.zeros((0, 3)),
            rotations=np.zeros((0, 4)),
            log_scales=np.zeros((0, 3)),
            opacity_logits=np.zeros(0),
            sh_coeffs=np.zeros((0, 1, 3)),
            embeddings=np.zeros((0, 2)),
        )
        cam = make_camera()
        st = RenderSettings(background=(0.2, 0.4, 0.6))
        out = rasterize(g, cam, st)
        assert np.all(out.color == np.array([0.2, 0.4, 0.6]))
        assert np.all(out.final_transmittance == 1.0)
        assert np.all(out.contributor_count == 0)

    def test_single_gaussian_on_pixel_center(self):
        # camera: identity pose, focal 8, principal point (4, 4); gaussian on
        # the optical axis projects exactly to pixel (4, 4)
        cam = Camera(
            world_to_camera=np.eye(4),
            focal=np.array([8.0, 8.0]),
            principal_point=np.array([4.0, 4.0]),
            image_size=(8, 8),
        )
        o = 0.8
        g = Gaussians(
            centers=np.array([[0.0, 0.0, 2.0]]),
            rotations=np.array([[1.0, 0, 0, 0]]),
            log_scales=np.full((1, 3), np.log(0.5)),
            opacity_logits=np.array([np.log(o / (1 - o))]),
            sh_coeffs=np.array([[[0.9, 0.1, -0.4]]]),
            embeddings=np.zeros((1, 2)),
        )
        st = RenderSettings(background=(0.0, 0.0, 0.0))
        out = rasterize(g, cam, st)
        c = eval_sh(g.sh_coeffs[0], np.array([0.0, 0.0, 1.0]), 0)
        np.testing.assert_allclose(out.color[4, 4], o * c, rtol=1e-12)
        np.testing.assert_allclose(out.final_transmittance[4, 4], 1 - o, rtol=1e-12)
        assert out.contributor_count[4, 4] == 1

    def test_behind_camera_culled(self):
        g = Gaussians(
            centers=np.array([[0.0, 0.0, -2.0]]),
            rotations=np.array([[1.0, 0, 0, 0]]),
            log_scales=np.zeros((1, 3)),
            opacity_logits=np.array([2.0]),
            sh_coeffs=np.ones((1, 1, 3)),
            embeddings=np.zeros((1, 2)),
        )
        out = rasterize(g, make_camera(), RenderSettings(background=(0.5, 0.5, 0.5)))
        assert np.all(out.color == 0.5)
        assert np.all(out.contributor_count == 0)


class TestForwardOracle:
    @pytest.mark.parametrize("seed", [0, 1, 2, 3])
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        g = random_scene(rng, 5, degree=int(rng.integers(0, 3)))
        cam = make_camera()
        st = RenderSettings(background=tuple(rng.uniform(0, 1, 3)))
        out = rasterize(g, cam, st)
        oc, ot, ocnt, _ = oracle_render(g, cam, st)
        np.testing.assert_allclose(out.color, oc, atol=1e-6)
        np.testing.assert_allclose(out.final_transmittance, ot, atol=1e-9)
        np.testing.assert_array_equal(out.contributor_count, ocnt)

    def test_transmittance_telescoping(self):
        rng = np.random.default_rng(11)
        g = random_scene(rng, 6, degree=0)
        cam = make_camera()
        st = RenderSettings()
        out = rasterize(g, cam, st)
        _, _, _, traces = oracle_render(g, cam, st)
        for (iy, ix), trace in traces.items():
            prod = np.prod([1 - a for a in trace]) if trace else 1.0
            assert abs(out.final_transmittance[iy, ix] - prod) < 1e-9


class TestInvariants:
    def test_determinism_bitwise(self):
        rng = np.random.default_rng(21)
        g = random_scene(rng, 12)
        cam = make_camera(16)
        a = rasterize(g, cam, RenderSettings())
        b = rasterize(g, cam, RenderSettings())
        assert np.array_equal(a.color, b.color)
        assert np.array_equal(a.final_transmittance, b.final_transmittance)
        assert np.array_equal(a.contributor_count, b.contributor_count)

    @pytest.mark.parametrize("seed", [5, 6])
    def test_tile_size_independence_bitwise(self, seed):
        rng = np.random.default_rng(seed)
        g = random_scene(rng, 20)
        cam = make_camera(32, focal=40.0)
        outs = [
            rasterize(g, cam, RenderSettings(tile_size=ts)) for ts in (8, 16, 64)
        ]
        for other in outs[1:]:
            assert np.array_equal(outs[0].color, other.color)
            assert np.array_equal(outs[0].final_transmittance, other.final_transmittance)
            assert np.array_equal(outs[0].contributor_count, other.contributor_count)

    def test_occlusion_weight_bound(self):
        # opaque front splat clamped at max_alpha; rear contribution weight
        # (= pixel value with white rear, black front and background) <= 1 - max_alpha
        cam = Camera(
            world_to_camera=np.eye(4),
            focal=np.array([8.0, 8.0]),
            principal_point=np.array([4.0, 4.0]),
            image_size=(8, 8),
        )
        sh_black = np.full((1, 3), -0.5 / 0.28209479177387814)
        sh_white = np.full((1, 3), 0.5 / 0.28209479177387814)
        g = Gaussians(
            centers=np.array([[0.0, 0.0, 2.0], [0.0, 0.0, 3.0]]),
            rotations=np.tile([1.0, 0, 0, 0], (2, 1)),
            log_scales=np.full((2, 3), np.log(0.6)),
            opacity_logits=np.array([9.0, 9.0]),
            sh_coeffs=np.stack([sh_black, sh_white]),
            embeddings=np.zeros((2, 2)),
        )
        st = RenderSettings(max_alpha=0.99)
        out = rasterize(g, cam, st)
        assert out.color[4, 4].max() <= (1 - 0.99) + 1e-12

    def test_count_zero_means_background(self):
        rng = np.random.default_rng(31)
        g = random_scene(rng, 3, spread=0.1)
        cam = make_camera(16)
        st = RenderSettings(background=(0.1, 0.7, 0.3))
        out = rasterize(g, cam, st)
        mask = out.contributor_count == 0
        assert mask.any()
        assert np.all(out.color[mask] == np.array([0.1, 0.7, 0.3]))
        assert np.all(out.final_transmittance >= 0) and np.all(out.final_transmittance <= 1)


class TestDebugDumps:
    def test_png_and_raw(self, tmp_path):
        rng = np.random.default_rng(41)
        g = random_scene(rng, 4)
        cam = make_camera()
        out = rasterize(g, cam, RenderSettings())
        png = tmp_path / "color.png"
        raw = tmp_path / "t.f32"
        save_color_png(png, out)
        save_transmittance_raw(raw, out)
        from PIL import Image

        img = np.asarray(Image.open(png))
        assert img.shape == (8, 8, 3) and img.dtype == np.uint8
        t = np.fromfile(raw, dtype="<f4").reshape(8, 8)
        np.testing.assert_allclose(t, out.final_transmittance, atol=1e-7)
