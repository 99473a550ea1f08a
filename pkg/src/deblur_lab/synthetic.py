"""Seeded synthetic scene-text images for fixtures and desk-scale corpora."""

from __future__ import annotations

import string

import numpy as np
from PIL import Image, ImageDraw, ImageFont

_ALPHABET = string.ascii_uppercase + string.ascii_lowercase + string.digits


def _font(size: int):
    try:
        return ImageFont.load_default(size=size)
    except TypeError:  # Pillow built without FreeType
        return ImageFont.load_default()


def pink_texture(size: int, rng: np.random.Generator, channels: int = 3) -> np.ndarray:
    """Unit-variance noise with a 1/f amplitude spectrum, like natural image clutter."""
    f = np.fft.fftfreq(size)
    r = np.sqrt(f[:, None] ** 2 + f[None, :] ** 2)
    r[0, 0] = 1.0
    amp = 1.0 / r
    amp[0, 0] = 0.0
    layers = []
    for _ in range(channels):
        t = np.real(np.fft.ifft2(amp * np.exp(2j * np.pi * rng.random((size, size)))))
        layers.append(t / t.std())
    return np.stack(layers, axis=2)


def text_scene(size: int = 256, seed: int = 0, channels: int = 3, texture: float = 0.05) -> np.ndarray:
    """A sign-like image: smooth background, a few panels, text lines, and
    a faint 1/f texture of std ``texture`` (mostly luminance) over everything.

    Returns an ``[size, size, channels]`` float array in [0, 1].
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    base = rng.uniform(0.15, 0.85, 3)
    tilt = rng.uniform(-0.25, 0.25, (3, 2))
    bg = base[None, None, :] + xx[..., None] * tilt[:, 0] + yy[..., None] * tilt[:, 1]
    canvas = Image.fromarray(np.clip(bg * 255, 0, 255).astype(np.uint8), mode="RGB")
    draw = ImageDraw.Draw(canvas)

    for _ in range(int(rng.integers(1, 4))):
        x0, y0 = rng.integers(0, size // 2, 2)
        x1, y1 = x0 + rng.integers(size // 4, size // 2 + 1), y0 + rng.integers(size // 6, size // 2 + 1)
        draw.rectangle([int(x0), int(y0), int(x1), int(y1)], fill=tuple(int(v) for v in rng.integers(0, 256, 3)))

    n_lines = int(rng.integers(2, 5))
    y = int(rng.integers(0, max(1, size // 8)))
    for _ in range(n_lines):
        font_px = int(rng.integers(max(8, size // 14), max(9, size // 5)))
        word = "".join(rng.choice(list(_ALPHABET), int(rng.integers(3, 9))))
        x = int(rng.integers(0, max(1, size // 6)))
        bright = rng.random() < 0.5
        color = tuple(int(v) for v in (rng.integers(200, 256, 3) if bright else rng.integers(0, 60, 3)))
        draw.text((x, y), word, fill=color, font=_font(font_px))
        y += int(font_px * rng.uniform(1.0, 1.5))
        if y >= size:
            break

    arr = np.asarray(canvas, dtype=np.float64) / 255.0
    if texture > 0:
        t = pink_texture(size, np.random.default_rng([seed, 1]))
        arr = np.clip(arr + texture * (0.7 * t.mean(axis=2, keepdims=True) + 0.3 * t), 0.0, 1.0)
    if channels == 1:
        return arr.mean(axis=2, keepdims=True)
    return arr


def text_scenes(n: int, size: int = 256, seed: int = 0) -> list[tuple[str, np.ndarray]]:
    return [(f"scene{i:04d}", text_scene(size, seed * 100003 + i)) for i in range(n)]
