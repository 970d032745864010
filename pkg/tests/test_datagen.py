import numpy as np
import pytest

from mdgt.datagen import (
    STANDARD_STYLES,
    DomainStyle,
    ImageSpec,
    Palette,
    generate_domain,
    load_dataset_dir,
    save_dataset_dir,
    split_train_test,
    standard_suite,
)
from mdgt.discrepancy import pixel_mmd

SPEC = ImageSpec(3, 32)


def flat_style(name="flat", fg=(0.3, 0.6, 0.9), bg=(1.0, 1.0, 1.0), **kw):
    return DomainStyle(name, Palette(fg=fg, bg=bg), **kw)


def test_generate_domain_contract():
    ds = generate_domain(flat_style(), 2, 1, SPEC, seed=7)
    assert len(ds) == 2
    assert sorted(ds.labels.tolist()) == [0, 1]
    assert ds.images.shape == (2, 3, 32, 32)
    assert ds.images.min() >= -1.0 and ds.images.max() <= 1.0
    assert ds.provenance.kind == "real" and ds.provenance.origins == ("flat",)


def test_generate_domain_deterministic_bytes():
    a = generate_domain(flat_style(), 2, 1, SPEC, seed=7)
    b = generate_domain(flat_style(), 2, 1, SPEC, seed=7)
    assert a.images.tobytes() == b.images.tobytes()
    assert a.labels.tobytes() == b.labels.tobytes()
    c = generate_domain(flat_style(), 2, 1, SPEC, seed=8)
    assert c.images.tobytes() != a.images.tobytes()


def test_invert_is_exact_complement_of_paired_render():
    style = flat_style(texture_noise=0.4)
    inverted = DomainStyle(style.name, style.palette, style.stroke,
                           style.texture_noise, invert=True,
                           blur_radius=style.blur_radius)
    plain = generate_domain(style, 3, 4, SPEC, seed=11)
    flipped = generate_domain(inverted, 3, 4, SPEC, seed=11)
    # complement applies in [0,1] space before [-1,1] scaling:
    # scaled(1-v) = 2(1-v)-1 = -(2v-1) = -scaled(v)
    np.testing.assert_allclose(flipped.images, -plain.images, atol=0)


def test_noise_free_foreground_is_exact_palette_color():
    ds = generate_domain(flat_style(), 2, 2, SPEC, seed=3)
    expected = np.array([0.3, 0.6, 0.9]) * 2.0 - 1.0
    img = ds.images[0]
    exact = np.all(np.isclose(img, expected[:, None, None], rtol=0, atol=0), axis=0)
    # glyph interior pixels carry the exact foreground color
    assert exact.sum() > 20


def test_jitter_varies_samples_within_class():
    ds = generate_domain(flat_style(), 2, 3, SPEC, seed=5)
    same_class = ds.images[ds.labels == 0]
    assert not np.array_equal(same_class[0], same_class[1])


def test_class_count_bounds():
    with pytest.raises(ValueError):
        generate_domain(flat_style(), 1, 1, SPEC, 0)
    with pytest.raises(ValueError):
        generate_domain(flat_style(), 17, 1, SPEC, 0)
    ds = generate_domain(flat_style(), 16, 1, SPEC, 0)
    assert ds.num_classes == 16


def test_image_spec_validation():
    with pytest.raises(ValueError):
        ImageSpec(2, 32)
    with pytest.raises(ValueError):
        ImageSpec(3, 24)


def test_grayscale_palette_renders_gray():
    style = DomainStyle("gray", Palette(fg=(0.1, 0.5, 0.9), bg=(0.9, 0.9, 0.9),
                                        grayscale=True))
    ds = generate_domain(style, 2, 1, SPEC, seed=1)
    img = ds.images[0]
    np.testing.assert_allclose(img[0], img[1], atol=0)
    np.testing.assert_allclose(img[1], img[2], atol=0)


def test_single_channel_spec():
    ds = generate_domain(flat_style(), 3, 2, ImageSpec(1, 16), seed=2)
    assert ds.images.shape == (6, 1, 16, 16)


# ---------------------------------------------------------------------------
# standard suite

def test_standard_suite_sizes():
    suite = standard_suite(0)
    assert [s.domain for s in suite] == ["photo", "clipart", "sketch", "inverted-noisy"]
    for s in suite:
        assert len(s.train) == 420 and len(s.test) == 140
        np.testing.assert_array_equal(np.bincount(s.train.labels), [60] * 7)
        np.testing.assert_array_equal(np.bincount(s.test.labels), [20] * 7)


def test_standard_suite_deterministic():
    a = standard_suite(0)
    b = standard_suite(0)
    for x, y in zip(a, b):
        assert x.train.images.tobytes() == y.train.images.tobytes()


def test_cross_domain_pixel_mmd_exceeds_within_domain():
    suite = standard_suite(0)
    photo, sketch = suite[0], suite[2]
    cross = pixel_mmd(photo.test.images, sketch.test.images)
    within = pixel_mmd(photo.test.images[:70], photo.test.images[70:])
    assert cross > within


def test_split_train_test_partitions_each_class():
    ds = generate_domain(flat_style(), 3, 10, SPEC, seed=9)
    split = split_train_test(ds, 7, 3)
    assert len(split.train) == 21 and len(split.test) == 9
    np.testing.assert_array_equal(np.bincount(split.train.labels), [7, 7, 7])
    merged = np.concatenate([split.train.images, split.test.images])
    assert merged.shape[0] == len(ds)


def test_styles_have_distinct_names():
    names = [s.name for s in STANDARD_STYLES]
    assert len(set(names)) == 4


# ---------------------------------------------------------------------------
# disk round trip

def test_dataset_dir_round_trip(tmp_path):
    suite = standard_suite(1, ImageSpec(3, 16), train_per_class=3, test_per_class=2)
    save_dataset_dir(tmp_path / "photo", suite[0], STANDARD_STYLES[0])
    back = load_dataset_dir(tmp_path / "photo")
    assert back.domain == "photo"
    np.testing.assert_array_equal(back.train.images, suite[0].train.images)
    np.testing.assert_array_equal(back.test.labels, suite[0].test.labels)
    assert back.train.provenance.origins == ("photo",)


def test_style_json_round_trip():
    style = STANDARD_STYLES[0]
    assert DomainStyle.from_json(style.to_json()) == style
