"""Deterministic MNIST-format dataset: 28x28 grayscale digits in [0,1],
rendered from 5x7 glyph bitmaps with random affine jitter, contrast, additive
noise, and a faint "ghost" of a competing digit.

The ghost and noise keep decision margins small enough that gradient attacks
succeed at realistic budgets while the task stays learnable to >95%.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .modelir import Dataset

_GLYPHS = """
01110 00100 01110 11111 00010 11111 00110 11111 01110 01110
10001 01100 10001 00010 00110 10000 01000 00001 10001 10001
10011 00100 00001 00100 01010 11110 10000 00010 10001 10001
10101 00100 00010 00010 10010 00001 11110 00100 01110 01111
11001 00100 00100 00001 11111 00001 10001 01000 10001 00001
10001 00100 01000 10001 00010 10001 10001 01000 10001 00010
01110 01110 11111 01110 00010 01110 01110 01000 01110 01100
"""

# second handwriting style per digit (slashed 0, serif-less 1, flat-top 3,
# open 4, square 5, hooked 6, crossbar 7, flat 8, straight 9, ...)
_GLYPHS_ALT = """
01110 00010 11110 11110 01000 11111 01110 11111 01110 01110
10011 00110 00001 00001 01000 10000 10000 00001 10001 10001
10101 00010 00010 00110 01010 10110 10110 00010 01110 10011
10101 00010 00100 00001 01001 11001 11001 00111 10001 01101
10101 00010 01000 00001 11111 00001 10001 00100 10001 00001
11001 00010 10000 10001 00001 00001 10001 00100 10001 00001
01110 00111 11111 01110 00001 11110 01110 00100 01110 00110
"""


def _glyph_bank(text) -> np.ndarray:
    rows = [line.split() for line in text.strip().splitlines()]
    bank = np.zeros((10, 7, 5), dtype=np.float64)
    for r, row in enumerate(rows):
        for d, cell in enumerate(row):
            bank[d, r] = [int(ch) for ch in cell]
    return bank


GLYPHS = _glyph_bank(_GLYPHS)
GLYPHS_ALT = _glyph_bank(_GLYPHS_ALT)


def _bold(glyph: np.ndarray) -> np.ndarray:
    """Horizontal dilation: thicker strokes."""
    out = glyph.copy()
    out[:, 1:] = np.maximum(out[:, 1:], glyph[:, :-1])
    return out


@dataclass
class DigitGenConfig:
    size: int = 28
    glyph_height: tuple = (13.0, 20.0)
    max_rotation_deg: float = 22.0
    max_shift: float = 4.0
    max_shear: float = 0.45
    alt_glyph_prob: float = 0.5
    bold_prob: float = 0.4
    intensity: tuple = (0.55, 1.0)
    noise_sigma: float = 0.19
    ghost_prob: float = 0.70
    ghost_intensity: tuple = (0.27, 0.50)


def _render(glyph: np.ndarray, size: int, gh: float, angle: float, dy: float, dx: float, shear: float = 0.0) -> np.ndarray:
    """Inverse-affine bilinear sampling of the glyph onto a size x size canvas."""
    gw = gh * (5.0 + 1.0) / 7.0
    cy = size / 2.0 + dy
    cx = size / 2.0 + dx
    r = np.arange(size, dtype=np.float64)[:, None] - cy
    c = np.arange(size, dtype=np.float64)[None, :] - cx
    ca, sa = np.cos(angle), np.sin(angle)
    u = ca * r + sa * c
    v = -sa * r + ca * c
    v = v - shear * u  # italic slant
    gr = (u / gh + 0.5) * 7.0 - 0.5
    gc = (v / gw + 0.5) * 5.0 - 0.5
    r0 = np.floor(gr).astype(np.int64)
    c0 = np.floor(gc).astype(np.int64)
    fr = gr - r0
    fc = gc - c0
    out = np.zeros((size, size), dtype=np.float64)
    for ro, co, w in (
        (0, 0, (1 - fr) * (1 - fc)),
        (0, 1, (1 - fr) * fc),
        (1, 0, fr * (1 - fc)),
        (1, 1, fr * fc),
    ):
        rr = r0 + ro
        cc = c0 + co
        inside = (rr >= 0) & (rr < 7) & (cc >= 0) & (cc < 5)
        vals = np.where(inside, glyph[np.clip(rr, 0, 6), np.clip(cc, 0, 4)], 0.0)
        out += w * vals
    return out


def _pick_glyph(digit: int, rng: np.random.Generator, cfg: DigitGenConfig) -> np.ndarray:
    g = GLYPHS_ALT[digit] if rng.random() < cfg.alt_glyph_prob else GLYPHS[digit]
    if rng.random() < cfg.bold_prob:
        g = _bold(g)
    return g


def render_digit(digit: int, rng: np.random.Generator, cfg: DigitGenConfig) -> np.ndarray:
    gh = rng.uniform(*cfg.glyph_height)
    angle = np.deg2rad(rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg))
    dy = rng.uniform(-cfg.max_shift, cfg.max_shift)
    dx = rng.uniform(-cfg.max_shift, cfg.max_shift)
    shear = rng.uniform(-cfg.max_shear, cfg.max_shear)
    img = _render(_pick_glyph(digit, rng, cfg), cfg.size, gh, angle, dy, dx, shear) * rng.uniform(*cfg.intensity)
    if rng.random() < cfg.ghost_prob:
        other = int((digit + rng.integers(1, 10)) % 10)
        g2 = _render(
            _pick_glyph(other, rng, cfg),
            cfg.size,
            rng.uniform(*cfg.glyph_height),
            np.deg2rad(rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg)),
            rng.uniform(-cfg.max_shift, cfg.max_shift),
            rng.uniform(-cfg.max_shift, cfg.max_shift),
            rng.uniform(-cfg.max_shear, cfg.max_shear),
        )
        img = np.maximum(img, g2 * rng.uniform(*cfg.ghost_intensity))
    img = img + rng.normal(0.0, cfg.noise_sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)[None]  # [1, size, size]


def make_digits(count: int, seed: int, cfg: DigitGenConfig | None = None) -> Dataset:
    """Deterministic dataset of `count` samples, labels uniform over 0..9."""
    cfg = cfg or DigitGenConfig()
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(count):
        digit = int(rng.integers(0, 10))
        samples.append((render_digit(digit, rng, cfg), digit))
    return Dataset(samples, 10)
