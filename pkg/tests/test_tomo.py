import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dudotrans import _kernels_py, kernels, metrics, tomo
from conftest import disk_image, rel


# ---------------------------------------------------------------- geometry

class TestGeometry:
    def test_defaults(self):
        g = tomo.ScanGeometry(num_views=96)
        assert g.sinogram_shape == (96, 256)
        assert g.parallel_shape == (96, 256)
        assert g.image_size == (128, 128)
        assert g.pixel_spacing == pytest.approx(2.0 / 128)
        assert g.detector_arc == pytest.approx(math.asin(1.0 / 3.0))

    def test_view_angles_cover_full_turn(self):
        g = tomo.ScanGeometry(num_views=24)
        np.testing.assert_allclose(np.diff(g.view_angles), 2 * np.pi / 24)

    def test_detectors_see_whole_field(self):
        g = tomo.ScanGeometry(num_views=8)
        assert g.source_to_iso * math.sin(g.detector_arc) >= 1.0 - 1e-12

    @pytest.mark.parametrize("bad", [dict(num_views=0), dict(num_views=8, num_detectors=0),
                                     dict(num_views=8, source_to_detector=2.0),
                                     dict(num_views=8, image_size=(0, 4))])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            tomo.ScanGeometry(**bad)

    def test_dict_roundtrip(self):
        g = tomo.ScanGeometry(num_views=72, image_size=(64, 64), hann=True)
        assert tomo.ScanGeometry.from_dict(g.to_dict()) == g


# ---------------------------------------------------------- forward project

class TestForwardProject:
    def test_zero(self, small_geom):
        out = tomo.forward_project(np.zeros(small_geom.image_size), small_geom)
        assert out.kind == "fan"
        assert not out.data.any()

    def test_shape_mismatch(self, small_geom):
        with pytest.raises(ValueError, match="shape"):
            tomo.forward_project(np.zeros((10, 10)), small_geom)

    def test_nonfinite_rejected(self, small_geom):
        img = np.zeros(small_geom.image_size)
        img[3, 3] = np.nan
        with pytest.raises(ValueError):
            tomo.forward_project(tomo.CtImage(img, small_geom), small_geom)

    def test_linearity(self, small_geom, rng):
        x1, x2 = rng.random((2, *small_geom.image_size))
        a, b = 0.7, -1.3
        lhs = tomo.forward_project(a * x1 + b * x2, small_geom).data
        rhs = a * tomo.forward_project(x1, small_geom).data + b * tomo.forward_project(x2, small_geom).data
        assert np.max(np.abs(lhs - rhs)) <= 1e-5 * np.max(np.abs(rhs))

    def test_disk_chord_oracle(self):
        g = tomo.ScanGeometry(num_views=16)
        sino = tomo.forward_project(disk_image(g, 0.5), g, oversample=4).data
        gam = g.detector_angles
        d = g.source_to_iso * np.sin(gam)
        chord = 2.0 * np.sqrt(np.clip(0.25 - d ** 2, 0.0, None))
        interior = np.abs(d) <= 0.4
        err = np.abs(sino[:, interior] - chord[interior]) / chord[interior]
        assert err.max() < 0.01

    def test_symmetric_image_rows_identical_on_quarter_turns(self):
        g = tomo.ScanGeometry(num_views=16)
        sino = tomo.forward_project(disk_image(g, 0.5), g).data
        for k in (4, 8, 12):
            assert np.max(np.abs(sino[k] - sino[0])) < 1e-5

    def test_smooth_symmetric_image_rows_agree(self):
        g = tomo.ScanGeometry(num_views=24)
        ps = g.pixel_spacing
        h, w = g.image_size
        xs = (np.arange(w) - 0.5 * (w - 1)) * ps
        ys = (0.5 * (h - 1) - np.arange(h)) * ps
        img = np.exp(-(xs[None] ** 2 + ys[:, None] ** 2) / (2 * 0.2 ** 2))
        sino = tomo.forward_project(img, g).data
        assert np.max(np.abs(sino - sino[0])) < 1e-3 * np.max(sino)

    def test_point_view_dependence(self, small_geom):
        img = np.zeros(small_geom.image_size)
        img[10, 40] = 1.0
        sino = tomo.forward_project(img, small_geom).data
        peaks = np.argmax(sino, axis=1)
        assert len(set(peaks.tolist())) > 5


# ------------------------------------------------------------------ rebin

class TestRebin:
    def test_zero(self, small_geom):
        assert not tomo.rebin_fan_to_parallel(np.zeros(small_geom.sinogram_shape), small_geom).any()

    def test_linearity(self, small_geom, rng):
        y1, y2 = rng.random((2, *small_geom.sinogram_shape))
        lhs = tomo.rebin_fan_to_parallel(2 * y1 - 3 * y2, small_geom)
        rhs = 2 * tomo.rebin_fan_to_parallel(y1, small_geom) - 3 * tomo.rebin_fan_to_parallel(y2, small_geom)
        np.testing.assert_allclose(lhs, rhs, atol=1e-5 * np.abs(rhs).max())

    def test_adjoint(self, small_geom, rng):
        y = rng.standard_normal(small_geom.sinogram_shape)
        p = rng.standard_normal(small_geom.parallel_shape)
        lhs = np.vdot(tomo.rebin_fan_to_parallel(y, small_geom), p)
        rhs = np.vdot(y, tomo.rebin_adjoint(p, small_geom))
        assert rel(lhs, rhs) < 1e-10

    def test_disk_parallel_oracle(self):
        g = tomo.ScanGeometry(num_views=360)
        fan = tomo.forward_project(disk_image(g, 0.5), g, oversample=4).data
        par = tomo.rebin_fan_to_parallel(fan, g)
        s = g.offsets
        analytic = 2.0 * np.sqrt(np.clip(0.25 - s ** 2, 0.0, None))
        inner = np.abs(s) <= 0.4
        err = np.abs(par[:, inner] - analytic[inner]) / analytic[inner]
        assert err.max() < 0.03

    def test_parallel_kind_rejected(self, small_geom):
        par = tomo.Sinogram(np.zeros(small_geom.parallel_shape), small_geom, "parallel")
        with pytest.raises(ValueError, match="fan"):
            tomo.rebin_fan_to_parallel(par, small_geom)


# ------------------------------------------------------------------- ramp

class TestRamp:
    def test_zero(self):
        assert not tomo.ramp_filter(np.zeros((2, 64)), 1.0).any()

    def test_constant_row_interior(self):
        row = np.ones((1, 256))
        out = tomo.ramp_filter(row, 1.0)[0]
        interior = out[64:192]
        assert np.mean(np.abs(interior)) < 1e-3

    def test_scaling_exact(self, rng):
        y = rng.standard_normal((3, 100))
        np.testing.assert_allclose(tomo.ramp_filter(2.5 * y, 0.1), 2.5 * tomo.ramp_filter(y, 0.1), rtol=1e-12)

    def test_self_adjoint(self, rng):
        a, b = rng.standard_normal((2, 4, 90))
        assert rel(np.vdot(tomo.ramp_filter(a, 0.3), b), np.vdot(a, tomo.ramp_filter(b, 0.3))) < 1e-12

    def test_impulse_response_matches_ram_lak(self):
        row = np.zeros((1, 33))
        row[0, 16] = 1.0
        out = tomo.ramp_filter(row, 1.0)[0]
        assert out[16] == pytest.approx(0.25)
        assert out[17] == pytest.approx(-1.0 / np.pi ** 2)
        assert out[18] == pytest.approx(0.0, abs=1e-12)

    def test_hann_attenuates_high_frequencies(self, rng):
        y = rng.standard_normal((1, 128))
        plain = tomo.ramp_filter(y, 1.0)
        hann = tomo.ramp_filter(y, 1.0, hann=True)
        assert np.linalg.norm(hann) < np.linalg.norm(plain)


# ---------------------------------------------------------- backprojection

class TestBackprojection:
    def test_zero(self, small_geom):
        assert not tomo.backproject(np.zeros(small_geom.parallel_shape), small_geom).any()

    def test_dot_test(self, small_geom, rng):
        x = rng.standard_normal(small_geom.image_size)
        y = rng.standard_normal(small_geom.parallel_shape)
        scale = np.pi / small_geom.num_views
        lhs = np.vdot(tomo.project_parallel(x, small_geom), y)
        rhs = np.vdot(x, tomo.backproject(y, small_geom)) / scale
        assert rel(lhs, rhs) < 1e-4

    def test_single_bin_strip(self, small_geom):
        par = np.zeros(small_geom.parallel_shape)
        k, j = 12, 80
        par[k, j] = 1.0
        img = tomo.backproject(par, small_geom)
        h, w = small_geom.image_size
        ps = small_geom.pixel_spacing
        xs = (np.arange(w) - 0.5 * (w - 1)) * ps
        ys = (0.5 * (h - 1) - np.arange(h)) * ps
        th = small_geom.parallel_angles[k]
        dist = np.abs(xs[None] * np.cos(th) + ys[:, None] * np.sin(th) - small_geom.offsets[j])
        on = img > 0
        assert on.any()
        assert np.all(dist[on] < small_geom.offset_spacing + 1e-12)


# ------------------------------------------------------------------- FBP

class TestFbp:
    def test_zero(self, small_geom):
        assert not tomo.fbp(np.zeros(small_geom.sinogram_shape), small_geom).any()

    def test_scaling(self, small_geom, rng):
        y = rng.random(small_geom.sinogram_shape)
        a = tomo.fbp(y, small_geom)
        np.testing.assert_allclose(tomo.fbp(3.0 * y, small_geom), 3.0 * a, atol=1e-5 * np.abs(a).max())

    def test_dot_test(self, small_geom, rng):
        y = rng.standard_normal(small_geom.sinogram_shape)
        gimg = rng.standard_normal(small_geom.image_size)
        lhs = np.vdot(tomo.fbp(y, small_geom), gimg)
        rhs = np.vdot(y, tomo.fbp_adjoint(gimg, small_geom))
        assert rel(lhs, rhs) < 1e-4

    def test_zero_cotangent(self, small_geom):
        assert not tomo.fbp_adjoint(np.zeros(small_geom.image_size), small_geom).any()

    def test_norm_gradient_finite_difference(self, tiny_geom, rng):
        y = rng.random(tiny_geom.sinogram_shape)
        grad = 2.0 * tomo.fbp_adjoint(tomo.fbp(y, tiny_geom), tiny_geom)
        f = lambda v: float(np.sum(tomo.fbp(v, tiny_geom) ** 2))  # noqa: E731
        direction = rng.standard_normal(y.shape)
        h = 1e-3
        numeric = (f(y + h * direction) - f(y - h * direction)) / (2 * h)
        assert rel(numeric, float(np.vdot(grad, direction))) < 1e-3
        for idx in [(0, 10), (5, 30), (17, 50)]:
            e = np.zeros_like(y)
            e[idx] = 1.0
            num = (f(y + h * e) - f(y - h * e)) / (2 * h)
            assert abs(num - grad[idx]) <= 1e-3 * np.abs(grad).max()

    def test_unit_disk_value(self):
        g = tomo.ScanGeometry(num_views=360)
        img = disk_image(g, 0.5)
        rec = tomo.fbp(tomo.forward_project(img, g).data, g)
        h, w = g.image_size
        assert rec[h // 2 - 8:h // 2 + 8, w // 2 - 8:w // 2 + 8].mean() == pytest.approx(1.0, abs=0.02)

    def test_view_count_ordering(self):
        values = []
        for views in (24, 96, 360):
            g = tomo.ScanGeometry(num_views=views)
            ph = tomo.rasterize_phantom(tomo.SHEPP_LOGAN, g)
            rec = tomo.fbp(tomo.forward_project(ph, g).data, g)
            values.append(metrics.psnr(rec, ph))
        assert values[0] < values[1] < values[2]


# ---------------------------------------------------------------- phantoms

class TestPhantom:
    def test_empty(self, small_geom):
        assert not tomo.rasterize_phantom(tomo.PhantomSpec(()), small_geom).any()

    def test_full_disk(self, small_geom):
        img = tomo.rasterize_phantom(tomo.PhantomSpec(((0, 0, 1.0, 1.0, 0, 1.0),)), small_geom)
        h, w = small_geom.image_size
        ps = small_geom.pixel_spacing
        xs = (np.arange(w) - 0.5 * (w - 1)) * ps
        ys = (0.5 * (h - 1) - np.arange(h)) * ps
        r = np.hypot(xs[None], ys[:, None])
        assert np.all(img[r < 1.0 - ps] == 1.0)
        assert np.all(img[r > 1.0 + ps] == 0.0)

    def test_shepp_logan_range_and_skull(self):
        g = tomo.ScanGeometry(num_views=8)
        img = tomo.rasterize_phantom(tomo.SHEPP_LOGAN, g)
        assert img.min() >= 0.0 and img.max() <= 1.0
        # the outer ring lies between the two largest ellipses on the vertical axis
        assert tomo.phantom_value(tomo.SHEPP_LOGAN, 0.0, 0.92 * 0.98) == pytest.approx(1.0)
        assert tomo.phantom_value(tomo.SHEPP_LOGAN, 0.0, -0.35) == pytest.approx(0.2)
        assert tomo.phantom_value(tomo.SHEPP_LOGAN, 0.0, 0.95) == 0.0

    def test_outside_unit_disk_rejected(self):
        with pytest.raises(ValueError, match="unit disk"):
            tomo.PhantomSpec(((0.5, 0.0, 0.6, 0.2, 0.0, 1.0),))

    def test_values_clipped(self, small_geom):
        spec = tomo.PhantomSpec(((0, 0, 0.5, 0.5, 0, 0.8), (0, 0, 0.3, 0.3, 0, 0.8), (0.6, 0, 0.2, 0.2, 0, -0.5)))
        img = tomo.rasterize_phantom(spec, small_geom)
        assert img.max() == 1.0 and img.min() == 0.0


# -------------------------------------------------------------- backends

@pytest.mark.skipif(kernels.BACKEND != "cython", reason="compiled kernels not built")
class TestBackendsAgree:
    def test_fan_project(self, tiny_geom, rng):
        from dudotrans import _kernels_c

        img = rng.random(tiny_geom.image_size)
        args = (tiny_geom.view_angles, tiny_geom.detector_angles, tiny_geom.source_to_iso,
                tiny_geom.pixel_spacing, tiny_geom.pixel_spacing / 2, 100)
        np.testing.assert_allclose(_kernels_c.fan_project(img, *args), _kernels_py.fan_project(img, *args),
                                   rtol=1e-10, atol=1e-12)

    def test_backproject_and_transpose(self, tiny_geom, rng):
        from dudotrans import _kernels_c

        c, s = np.cos(tiny_geom.parallel_angles), np.sin(tiny_geom.parallel_angles)
        h, w = tiny_geom.image_size
        par = rng.random(tiny_geom.parallel_shape)
        img = rng.random(tiny_geom.image_size)
        bp = (par, c, s, tiny_geom.offsets[0], tiny_geom.offset_spacing, h, w, tiny_geom.pixel_spacing)
        np.testing.assert_allclose(_kernels_c.backproject(*bp), _kernels_py.backproject(*bp), rtol=1e-10)
        pp = (img, c, s, tiny_geom.offsets[0], tiny_geom.offset_spacing, tiny_geom.num_detectors,
              tiny_geom.pixel_spacing)
        np.testing.assert_allclose(_kernels_c.project_parallel(*pp), _kernels_py.project_parallel(*pp),
                                   rtol=1e-10, atol=1e-12)


@settings(max_examples=10, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2 ** 16))
def test_fbp_linearity_property(a, b, seed):
    g = tomo.ScanGeometry(num_views=12, num_detectors=32, image_size=(16, 16))
    r = np.random.default_rng(seed)
    y1, y2 = r.random((2, *g.sinogram_shape))
    lhs = tomo.fbp(a * y1 + b * y2, g)
    rhs = a * tomo.fbp(y1, g) + b * tomo.fbp(y2, g)
    scale = max(np.abs(tomo.fbp(y1, g)).max(), np.abs(tomo.fbp(y2, g)).max()) * (abs(a) + abs(b) + 1e-12)
    assert np.max(np.abs(lhs - rhs)) <= 1e-5 * scale


def test_pure_python_fallback_selected_by_environment(tmp_path):
    import os
    import subprocess
    import sys

    code = ("import numpy as np; from dudotrans import kernels, tomo; "
            "g = tomo.ScanGeometry(num_views=8, num_detectors=32, image_size=(16, 16)); "
            "img = tomo.rasterize_phantom(tomo.SHEPP_LOGAN, g); "
            "np.save(r'%s', tomo.fbp(tomo.forward_project(img, g).data, g)); print(kernels.BACKEND)")
    results = {}
    for flag in ("1", "0"):
        out = tmp_path / f"fbp_{flag}.npy"
        env = dict(os.environ, DUDOTRANS_PURE_PYTHON=flag)
        proc = subprocess.run([sys.executable, "-c", code % out], env=env, capture_output=True, text=True,
                              check=True)
        results[flag] = (proc.stdout.strip(), np.load(out))
    assert results["1"][0] == "python"
    assert results["0"][0] == kernels.BACKEND
    np.testing.assert_allclose(results["1"][1], results["0"][1], rtol=1e-10, atol=1e-12)
