import json

import numpy as np
import pytest
from scipy import stats

from mgabrain import Volume
from mgabrain.augment import (
    AngleOutOfRange,
    AugmentConfig,
    BadKernel,
    SizeConstraintViolated,
    SpacingOutOfRange,
    TauOutOfRange,
    add_noise,
    apply_params,
    draw_params,
    motion_blur,
    random_augment,
    rotate,
    sample_rng,
    sdt_crop,
    zoom,
)
from mgabrain.errors import ValidationError
from mgabrain.phantoms import radius_grid, sphere_mask
from mgabrain.preprocess import volume_histogram
from mgabrain.sdt import reference_mask, signed_distance, threshold_mask


def dice(a, b):
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    return 2 * (a & b).sum() / (a.sum() + b.sum())


@pytest.fixture(scope="module")
def pair():
    r = radius_grid((32, 32, 32))
    m = sphere_mask((32, 32, 32), 8.0)
    image = Volume((np.clip(1 - r / 14, 0, 1) * (r < 11)).astype(np.float32))
    return image, signed_distance(m), m


def test_rotate_identity(pair):
    image, sdt, _ = pair
    a, b = rotate((image, sdt), (0, 0, 0))
    assert np.abs(a.data - image.data).max() <= 1e-6
    assert np.abs(b.data - sdt.data).max() <= 1e-6


def test_rotate_inverse_composition(pair):
    image, sdt, _ = pair
    a = rotate(rotate((image, sdt), (10, 0, 0)), (-10, 0, 0))[0]
    assert np.abs(a.data - image.data).mean() <= 2e-2


@pytest.mark.parametrize("angles", [(10, 0, 0), (-7, 9, 3), (4, -10, 10)])
def test_rotated_sphere_keeps_mask(pair, angles):
    image, sdt, m = pair
    _, s = rotate((image, sdt), angles)
    assert dice(threshold_mask(s, 0).data, m.data) >= 0.95
    assert s.data.min() >= -sdt.d_max and s.data.max() <= sdt.d_max


def test_rotate_rejects_large_angle(pair):
    with pytest.raises(AngleOutOfRange):
        rotate(pair[:2], (11, 0, 0))


def test_zoom_identity(pair):
    image, sdt, _ = pair
    a, b = zoom((image, sdt), 1.0)
    assert np.abs(a.data - image.data).max() <= 1e-6


def test_zoom_halved_spacing_doubles_radius(pair):
    image, sdt, m = pair
    a, b = zoom((image, sdt), 0.5)
    assert b.spacing == (0.5, 0.5, 0.5)
    inside = threshold_mask(b, 0).data
    ratio = (inside.sum() / m.data.sum()) ** (1 / 3)
    assert ratio == pytest.approx(2.0, abs=0.05)
    # physical size unchanged: the SDT still reads in mm
    centre = b.data[15:17, 15:17, 15:17].mean()
    assert centre == pytest.approx(sdt.d_max)


def test_zoom_rejections(pair):
    with pytest.raises(SpacingOutOfRange):
        zoom(pair[:2], 0.4)
    big = Volume(pair[0].data, spacing=(3, 3, 3))
    with pytest.raises(SizeConstraintViolated):
        zoom((big, pair[1]), 1.0)


def test_sdt_crop_cases(pair):
    image, sdt, m = pair
    t0 = sdt_crop((image, sdt), 0)[0].data
    assert np.array_equal(t0 != 0, (image.data != 0) & m.as_bool())
    t4 = sdt_crop((image, sdt), 4)[0].data
    assert np.array_equal(t4 != 0, (image.data != 0) & reference_mask(m).as_bool())
    prev = None
    for tau in (0.0, 0.5, 1.5, 2.5, 4.0):
        support = sdt_crop((image, sdt), tau)[0].data != 0
        if prev is not None:
            assert np.all(prev <= support)
        prev = support
    assert sdt_crop((image, sdt), 2)[1] is sdt
    with pytest.raises(TauOutOfRange):
        sdt_crop((image, sdt), 4.5)


def test_motion_blur_cases(pair):
    const = Volume(np.full((9, 9, 9), 0.3, dtype=np.float32))
    assert np.abs(motion_blur(const, 11, (1, 2, 3)).data - 0.3).max() <= 1e-6
    imp = np.zeros((15, 15, 15), dtype=np.float32)
    imp[7, 7, 7] = 1
    out = motion_blur(Volume(imp), 5, (1, 0, 0)).data
    assert np.allclose(out[5:10, 7, 7], 0.2)
    assert out.sum() == pytest.approx(1.0)
    image = pair[0]
    assert abs(motion_blur(image, 11, (0.3, -0.5, 0.8)).data.mean() - image.data.mean()) <= 1e-4
    with pytest.raises(BadKernel):
        motion_blur(image, 7, (1, 0, 0))
    with pytest.raises(ValidationError):
        motion_blur(image, 5, (0, 0, 0))


def test_noise_cases():
    v = Volume(np.full((32, 32, 32), 0.5, dtype=np.float32))
    assert add_noise(v, 0.0, np.random.default_rng(0)) is v
    out = add_noise(v, 0.05, np.random.default_rng(0)).data
    assert 0.045 <= out.std() <= 0.055
    assert np.array_equal(out, add_noise(v, 0.05, np.random.default_rng(0)).data)
    assert out.min() >= 0 and out.max() <= 1


def test_config_validation():
    with pytest.raises(ValidationError):
        AugmentConfig(rotation_deg=(5, -5))
    with pytest.raises(ValidationError):
        AugmentConfig(p_blur=1.5)
    with pytest.raises(ValidationError):
        AugmentConfig(blur_kernels=(4,))


def test_disabled_is_identity(pair):
    image, sdt, _ = pair
    aug = random_augment((image, sdt), AugmentConfig.disabled(), sample_rng(0, 0))
    assert np.array_equal(aug.image.data, image.data)
    assert np.array_equal(aug.sdt.data, sdt.data)


def test_seeded_draw_is_reproducible(pair):
    image, sdt, _ = pair
    cfg = AugmentConfig(p_rotate=1, p_zoom=1, p_blur=1, p_noise=1, p_sdt_crop=1,
                        p_histogram=1, reference_histogram=volume_histogram(image))
    a = random_augment((image, sdt), cfg, sample_rng(7, 3))
    b = random_augment((image, sdt), cfg, sample_rng(7, 3))
    assert json.dumps(a.params, sort_keys=True) == json.dumps(b.params, sort_keys=True)
    assert a.image.data.tobytes() == b.image.data.tobytes()
    assert a.sdt.data.tobytes() == b.sdt.data.tobytes()
    assert all(a.params[k] is not None for k in ("rotate", "zoom", "sdt_crop", "motion_blur", "noise"))
    again = apply_params((image, sdt), a.params, cfg)
    assert again.image.data.tobytes() == a.image.data.tobytes()


def test_every_draw_keeps_ranges_and_alignment(pair):
    image, sdt, m = pair
    cfg = AugmentConfig(p_rotate=1, p_zoom=0, p_blur=1, p_noise=1, p_sdt_crop=1)
    for i in range(6):
        aug = random_augment((image, sdt), cfg, sample_rng(1, i))
        assert aug.image.data.min() >= 0 and aug.image.data.max() <= 1
        assert np.abs(aug.sdt.data).max() <= sdt.d_max
        assert dice(threshold_mask(aug.sdt, 0).data, m.data) >= 0.95


def test_rotation_angles_uniform():
    cfg = AugmentConfig()
    angles = [draw_params(cfg, sample_rng(0, i))["rotate"] for i in range(1000)]
    first = np.array([a[0] for a in angles if a is not None])
    assert stats.kstest(first, stats.uniform(loc=-10, scale=20).cdf).pvalue > 0.01


def test_draw_consumes_fixed_randomness():
    on = AugmentConfig(p_rotate=1)
    off = AugmentConfig(p_rotate=0)
    rng_a, rng_b = sample_rng(0, 0), sample_rng(0, 0)
    draw_params(on, rng_a)
    draw_params(off, rng_b)
    assert rng_a.random() == rng_b.random()
