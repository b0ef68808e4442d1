import numpy as np
import pytest

from underpass.data import ClassLabel
from underpass.synth import (
    DAY_COUNTS,
    NIGHT_COUNTS,
    build_corpus,
    day_twin,
    luminance,
    photometric,
    render_neutral,
    synth_scene,
)


def test_render_is_deterministic():
    a = synth_scene(ClassLabel.DOG_WALKER, "night", 1234)
    b = synth_scene(ClassLabel.DOG_WALKER, "night", 1234)
    assert a.pixels.tobytes() == b.pixels.tobytes()
    assert a.source_id == "night-dog_walker-1234"


@pytest.mark.parametrize("label", list(ClassLabel))
@pytest.mark.parametrize("domain", ["day", "night"])
def test_pixels_in_range(label, domain):
    img = synth_scene(label, domain, 7).pixels
    assert img.shape == (64, 64, 3) and img.dtype == np.float32
    assert img.min() >= 0 and img.max() <= 1


def test_empty_day_and_night_differ_only_by_photometric_map():
    seed = 99
    neutral = render_neutral(ClassLabel.EMPTY, seed)
    day = synth_scene(ClassLabel.EMPTY, "day", seed).pixels
    night = synth_scene(ClassLabel.EMPTY, "night", seed).pixels
    np.testing.assert_array_equal(day, photometric(neutral, "day"))
    np.testing.assert_array_equal(night, photometric(neutral, "night"))
    # no glyph: the neutral render is the shared corridor plus sensor noise
    other = render_neutral(ClassLabel.EMPTY, seed + 1)
    assert np.abs(neutral - other).max() < 0.15


def test_glyphs_change_pixels():
    empty = render_neutral(ClassLabel.EMPTY, 5)
    for label in (ClassLabel.PEDESTRIAN, ClassLabel.DOG_WALKER, ClassLabel.BICYCLIST):
        changed = (np.abs(render_neutral(label, 5) - empty).max(axis=2) > 0.15).sum()
        assert changed > 20, label


def test_night_to_day_luminance_ratio():
    ratios = []
    for seed in range(100):
        label = ClassLabel(seed % 4)
        day = luminance(synth_scene(label, "day", seed).pixels).mean()
        night = luminance(synth_scene(label, "night", seed).pixels).mean()
        ratios.append(night / day)
    assert float(np.mean(ratios)) == pytest.approx(0.25, abs=0.05)


def test_day_twin_shares_the_scene():
    night = synth_scene(ClassLabel.BICYCLIST, "night", 321)
    twin = day_twin(night)
    assert twin.domain == "day" and twin.seed == 321 and twin.label is ClassLabel.BICYCLIST
    np.testing.assert_array_equal(twin.pixels, synth_scene(ClassLabel.BICYCLIST, "day", 321).pixels)


def test_unknown_domain_rejected():
    with pytest.raises(ValueError):
        synth_scene(ClassLabel.EMPTY, "night2day", 0)


def test_corpus_sizes():
    assert len(build_corpus({}, {})) == 0
    assert sum(DAY_COUNTS.values()) == 2241
    assert NIGHT_COUNTS == {ClassLabel.EMPTY: 106, ClassLabel.PEDESTRIAN: 106, ClassLabel.DOG_WALKER: 0, ClassLabel.BICYCLIST: 60}
    small = build_corpus({ClassLabel.EMPTY: 3, ClassLabel.BICYCLIST: 2}, {ClassLabel.PEDESTRIAN: 2}, seed=1, size=16)
    assert len(small) == 7
    assert len(set(small.source_ids())) == 7
    assert len({i.seed for i in small}) == 7
    assert small[0].pixels.shape == (16, 16, 3)
    with pytest.raises(ValueError):
        build_corpus({ClassLabel.EMPTY: -1})


def test_default_corpus_is_paper_shaped():
    corpus = build_corpus(size=16)
    assert len(corpus) == 2241
    assert corpus.class_counts() == DAY_COUNTS
