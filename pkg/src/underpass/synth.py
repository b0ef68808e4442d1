"""Procedural underpass scenes in day and night lighting.

A scene is rendered once in neutral light from its seed (corridor,
sensor noise, one class glyph) and then passed through a fixed photometric
map per domain. Day and night renders of the same seed therefore differ
only by that map, which gives every night image an exact day twin.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .data import ClassLabel, Dataset, LabeledImage

DEFAULT_SIZE = 64
DAY_RED_BIAS = 0.05
NIGHT_GAIN = 0.25
NIGHT_BLUE_BIAS = 0.08
# lamp glare: (u, v) centre in unit image coords, sigma in units of width
GLARE_SPOTS = ((0.28, 0.1), (0.72, 0.1))
GLARE_SIGMA = 0.035
GLARE_COLOR = (0.55, 0.5, 0.35)
NOISE_SIGMA = 0.015

# paper-shaped default corpus sizes
DAY_COUNTS = {ClassLabel.EMPTY: 904, ClassLabel.PEDESTRIAN: 904, ClassLabel.DOG_WALKER: 180, ClassLabel.BICYCLIST: 253}
NIGHT_COUNTS = {ClassLabel.EMPTY: 106, ClassLabel.PEDESTRIAN: 106, ClassLabel.DOG_WALKER: 0, ClassLabel.BICYCLIST: 60}

_DOMAIN_CODES = {"day": 0, "night": 1}

_CLOTHES = np.array(
    [[0.8, 0.15, 0.1], [0.1, 0.3, 0.75], [0.15, 0.55, 0.2], [0.85, 0.7, 0.1], [0.5, 0.2, 0.6], [0.9, 0.45, 0.1]],
    dtype=np.float32,
)
_SKIN = np.array([[0.95, 0.8, 0.65], [0.75, 0.55, 0.4], [0.45, 0.3, 0.2]], dtype=np.float32)
_DOGS = np.array([[0.35, 0.2, 0.1], [0.95, 0.92, 0.85], [0.1, 0.1, 0.1]], dtype=np.float32)


@lru_cache(maxsize=8)
def _corridor(size: int) -> np.ndarray:
    """Neutral-light trapezoidal corridor, identical for every scene."""
    v, u = np.mgrid[0:size, 0:size].astype(np.float32)
    u = (u + 0.5) / size
    v = (v + 0.5) / size
    img = np.empty((size, size, 3), dtype=np.float32)
    img[:] = (0.32, 0.32, 0.34)  # ceiling
    horizon = 0.42
    t = np.clip((v - horizon) / (1.0 - horizon), 0.0, 1.0)
    left = 0.42 - 0.42 * t
    right = 0.58 + 0.42 * t
    floor = (v >= horizon) & (u >= left) & (u <= right)
    img[(v >= 0.12) & ~floor] = (0.58, 0.58, 0.55)  # walls
    tiles = (v >= 0.12) & ~floor & ((np.floor(v * 16).astype(int) % 2) == 0)
    img[tiles] *= 0.9
    img[floor] = (0.5, 0.47, 0.42)
    # far exit
    exit_ = (np.abs(u - 0.5) < 0.075) & (v > horizon - 0.13) & (v < horizon)
    img[exit_] = (0.85, 0.88, 0.9)
    # floor lane marking
    lane = floor & (np.abs(u - 0.5) < 0.006 + 0.01 * t)
    img[lane] = (0.75, 0.72, 0.6)
    return img


@lru_cache(maxsize=8)
def _glare(size: int) -> np.ndarray:
    v, u = np.mgrid[0:size, 0:size].astype(np.float32)
    u = (u + 0.5) / size
    v = (v + 0.5) / size
    g = np.zeros((size, size), dtype=np.float32)
    for cu, cv in GLARE_SPOTS:
        g += np.exp(-((u - cu) ** 2 + (v - cv) ** 2) / (2 * GLARE_SIGMA**2))
    return g[..., None] * np.asarray(GLARE_COLOR, dtype=np.float32)


def _disc(vv, uu, cy, cx, ry, rx):
    return ((vv - cy) / ry) ** 2 + ((uu - cx) / rx) ** 2 <= 1.0


def _paint(img, mask, color):
    img[mask] = color


def _line(img, y0, x0, y1, x1, color):
    n = int(max(abs(y1 - y0), abs(x1 - x0)) * 2) + 2
    ys = np.clip(np.rint(np.linspace(y0, y1, n)).astype(int), 0, img.shape[0] - 1)
    xs = np.clip(np.rint(np.linspace(x0, x1, n)).astype(int), 0, img.shape[1] - 1)
    img[ys, xs] = color


def _person(img, vv, uu, ground, cx, height, rng, lean=0.0):
    clothes = _CLOTHES[rng.integers(len(_CLOTHES))]
    skin = _SKIN[rng.integers(len(_SKIN))]
    head_r = 0.11 * height
    body_h = 0.5 * height
    body_cy = ground - 0.22 * height - body_h / 2 + 0.2 * height
    legs = (vv > body_cy) & (vv <= ground) & (np.abs(uu - cx - lean * (ground - vv)) < 0.09 * height)
    _paint(img, legs, clothes * 0.45)
    _paint(img, _disc(vv, uu, body_cy, cx + lean * body_h, body_h / 2, 0.15 * height), clothes)
    head_cy = body_cy - body_h / 2 - head_r * 0.9
    _paint(img, _disc(vv, uu, head_cy, cx + lean * body_h * 1.4, head_r, head_r), skin)
    return body_cy


def render_neutral(label: ClassLabel | int, seed: int, size: int = DEFAULT_SIZE) -> np.ndarray:
    """Scene in neutral light: corridor + noise + glyph, values in [0, 1]."""
    label = ClassLabel(int(label))
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFFFFFF, 0x5CE7E]))
    img = _corridor(size).copy()
    img += rng.normal(0.0, NOISE_SIGMA, img.shape).astype(np.float32)
    vv, uu = np.mgrid[0:size, 0:size].astype(np.float32) + 0.5
    ground = size * rng.uniform(0.82, 0.97)
    cx = size * rng.uniform(0.32, 0.68)
    height = size * rng.uniform(0.42, 0.55) * (ground / size)
    if label == ClassLabel.PEDESTRIAN:
        _person(img, vv, uu, ground, cx, height, rng)
    elif label == ClassLabel.DOG_WALKER:
        side = rng.choice((-1.0, 1.0))
        body_cy = _person(img, vv, uu, ground, cx, height, rng)
        dog_cx = cx + side * 0.42 * height
        dog_ry, dog_rx = 0.08 * height, 0.17 * height
        dog_cy = ground - dog_ry
        _paint(img, _disc(vv, uu, dog_cy, dog_cx, dog_ry, dog_rx), _DOGS[rng.integers(len(_DOGS))])
        hand_x = cx + side * 0.15 * height
        _line(img, body_cy, hand_x, dog_cy - dog_ry, dog_cx - side * dog_rx * 0.6, np.array([0.9, 0.1, 0.1]))
    elif label == ClassLabel.BICYCLIST:
        wheel_r = 0.2 * height
        gap = 0.62 * height
        wheel_cy = ground - wheel_r
        thick = max(1.0, size / 64.0)
        frame = np.array([0.1, 0.1, 0.12], dtype=np.float32)
        for wx in (cx - gap / 2, cx + gap / 2):
            ring = np.abs(np.hypot(vv - wheel_cy, uu - wx) - wheel_r) <= thick * 0.75
            _paint(img, ring, frame)
        _line(img, wheel_cy, cx - gap / 2, wheel_cy - wheel_r, cx, frame)
        _line(img, wheel_cy, cx + gap / 2, wheel_cy - wheel_r, cx, frame)
        _line(img, wheel_cy - wheel_r, cx - gap / 2 + wheel_r * 0.3, wheel_cy - wheel_r, cx + gap / 2 - wheel_r * 0.2, frame)
        _person(img, vv, uu, wheel_cy - wheel_r * 0.6, cx - 0.05 * height, height * 0.8, rng, lean=0.25)
    return np.clip(img, 0.0, 1.0)


def photometric(neutral: np.ndarray, domain: str) -> np.ndarray:
    """The fixed per-domain lighting map applied to a neutral render."""
    out = neutral.astype(np.float32, copy=True)
    if domain == "day":
        out[..., 0] += DAY_RED_BIAS
    elif domain == "night":
        out *= NIGHT_GAIN
        out[..., 2] += NIGHT_BLUE_BIAS
        out += _glare(neutral.shape[0]) if neutral.shape[0] == neutral.shape[1] else 0.0
    else:
        raise ValueError(f"synthetic scenes exist for 'day' and 'night', not {domain!r}")
    return np.clip(out, 0.0, 1.0)


def synth_scene(label: ClassLabel | int, domain: str, seed: int, size: int = DEFAULT_SIZE) -> LabeledImage:
    label = ClassLabel(int(label))
    pixels = photometric(render_neutral(label, seed, size), domain)
    return LabeledImage(pixels, label, domain, f"{domain}-{label.slug}-{seed}", seed)


def day_twin(image: LabeledImage) -> LabeledImage:
    """The day render of a synthetic image's scene."""
    if image.seed is None:
        raise ValueError(f"{image.source_id} carries no scene seed")
    return synth_scene(image.label, "day", image.seed, image.pixels.shape[0])


def scene_seed(corpus_seed: int, domain: str, label: ClassLabel, index: int) -> int:
    """Distinct scene seeds per (corpus seed, domain, class, index < 1e5)."""
    return ((corpus_seed * 4 + _DOMAIN_CODES[domain]) * 4 + int(label)) * 100_000 + index


def build_corpus(
    day_counts: dict | None = None,
    night_counts: dict | None = None,
    seed: int = 0,
    size: int = DEFAULT_SIZE,
) -> Dataset:
    """Render ``counts[class]`` scenes per domain; the default day counts are
    904/904/180/253 and the night domain is left empty."""
    day_counts = DAY_COUNTS if day_counts is None else day_counts
    night_counts = {} if night_counts is None else night_counts
    items = []
    for domain, counts in (("day", day_counts), ("night", night_counts)):
        for label in ClassLabel:
            n = int(counts.get(label, 0))
            if n < 0:
                raise ValueError(f"negative count for {label.slug}")
            if n > 100_000:
                raise ValueError("at most 100000 scenes per class and domain")
            items += [synth_scene(label, domain, scene_seed(seed, domain, label, i), size) for i in range(n)]
    return Dataset(items)


def luminance(pixels: np.ndarray) -> np.ndarray:
    return pixels[..., 0] * 0.299 + pixels[..., 1] * 0.587 + pixels[..., 2] * 0.114
