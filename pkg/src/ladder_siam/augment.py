"""Two-view stochastic augmentation for 3xHxW images in [0, 1]."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np


@dataclass(frozen=True)
class AugPolicy:
    crop_scale: tuple[float, float] = (0.2, 1.0)
    crop_ratio: tuple[float, float] = (3 / 4, 4 / 3)
    out_size: int = 32
    flip_p: float = 0.5
    jitter_p: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1
    gray_p: float = 0.2

    def __post_init__(self):
        for name in ("flip_p", "jitter_p", "gray_p"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be a probability, got {p}")
        lo, hi = self.crop_scale
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError(f"bad crop scale range {self.crop_scale}")

    @classmethod
    def identity(cls, out_size: int = 32) -> "AugPolicy":
        return cls(crop_scale=(1.0, 1.0), crop_ratio=(0.0, math.inf), out_size=out_size,
                   flip_p=0.0, jitter_p=0.0, gray_p=0.0)

    def with_(self, **kw) -> "AugPolicy":
        return replace(self, **kw)


def sample_crop(rng: np.random.Generator, h: int, w: int,
                scale: tuple[float, float], ratio: tuple[float, float]) -> tuple[int, int, int, int]:
    """(top, left, height, width) of a random area/aspect crop inside an h x w image."""
    area = h * w
    if scale[0] == scale[1] == 1.0 and ratio[0] <= w / h <= ratio[1]:
        return 0, 0, h, w
    log_r = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        target = area * rng.uniform(scale[0], scale[1])
        aspect = math.exp(rng.uniform(*log_r))
        cw = int(round(math.sqrt(target * aspect)))
        ch = int(round(math.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    # fallback: central crop clamped to the ratio range
    in_ratio = w / h
    if in_ratio < ratio[0]:
        cw, ch = w, max(1, int(round(w / ratio[0])))
    elif in_ratio > ratio[1]:
        ch, cw = h, max(1, int(round(h * ratio[1])))
    else:
        cw, ch = w, h
    return (h - ch) // 2, (w - cw) // 2, ch, cw


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling with half-pixel centers and edge clamping."""
    c, h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()

    def coords(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        i0 = np.floor(src).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, src - i0

    y0, y1, fy = coords(h, out_h)
    x0, x1, fx = coords(w, out_w)
    fy = fy[:, None]
    fx = fx[None, :]
    top = img[:, y0][:, :, x0] * (1 - fx) + img[:, y0][:, :, x1] * fx
    bot = img[:, y1][:, :, x0] * (1 - fx) + img[:, y1][:, :, x1] * fx
    return (top * (1 - fy) + bot * fy).astype(img.dtype, copy=False)


def grayscale(img: np.ndarray) -> np.ndarray:
    g = 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]
    return np.broadcast_to(g, img.shape).astype(img.dtype)


def rgb_to_hsv(img: np.ndarray) -> np.ndarray:
    r, g, b = img
    mx = img.max(axis=0)
    mn = img.min(axis=0)
    d = mx - mn
    safe = np.where(d > 0, d, 1.0)
    h = np.where(mx == r, ((g - b) / safe) % 6.0,
                 np.where(mx == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0))
    h = np.where(d > 0, h / 6.0, 0.0)
    s = np.where(mx > 0, d / np.where(mx > 0, mx, 1.0), 0.0)
    return np.stack([h, s, mx])


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1 - s)
    q = v * (1 - s * f)
    t = v * (1 - s * (1 - f))
    i = i.astype(int) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b])


def color_jitter(img: np.ndarray, rng: np.random.Generator, policy: AugPolicy) -> np.ndarray:
    """Brightness, contrast, saturation and hue changes in a random order."""
    out = img
    for k in rng.permutation(4):
        if k == 0 and policy.brightness > 0:
            f = rng.uniform(max(0.0, 1 - policy.brightness), 1 + policy.brightness)
            out = np.clip(out * f, 0, 1)
        elif k == 1 and policy.contrast > 0:
            f = rng.uniform(max(0.0, 1 - policy.contrast), 1 + policy.contrast)
            m = grayscale(out)[0].mean()
            out = np.clip((out - m) * f + m, 0, 1)
        elif k == 2 and policy.saturation > 0:
            f = rng.uniform(max(0.0, 1 - policy.saturation), 1 + policy.saturation)
            gray = grayscale(out)
            out = np.clip((out - gray) * f + gray, 0, 1)
        elif k == 3 and policy.hue > 0:
            shift = rng.uniform(-policy.hue, policy.hue)
            hsv = rgb_to_hsv(out)
            hsv[0] = (hsv[0] + shift) % 1.0
            out = np.clip(hsv_to_rgb(hsv), 0, 1)
    return out.astype(img.dtype, copy=False)


def augment(image: np.ndarray, policy: AugPolicy, rng: np.random.Generator,
            record: list | None = None) -> np.ndarray:
    """One random view. ``record`` (if given) receives the crop rectangle."""
    _, h, w = image.shape
    top, left, ch, cw = sample_crop(rng, h, w, policy.crop_scale, policy.crop_ratio)
    if record is not None:
        record.append((top, left, ch, cw))
    out = resize_bilinear(image[:, top:top + ch, left:left + cw], policy.out_size, policy.out_size)
    if rng.random() < policy.flip_p:
        out = out[:, :, ::-1]
    if rng.random() < policy.jitter_p:
        out = color_jitter(out, rng, policy)
    if rng.random() < policy.gray_p:
        out = grayscale(out)
    return np.ascontiguousarray(np.clip(out, 0.0, 1.0), dtype=image.dtype)


def make_view_pair(image: np.ndarray, policy: AugPolicy | tuple[AugPolicy, AugPolicy],
                   seed) -> tuple[np.ndarray, np.ndarray]:
    """Two independently augmented views; ``policy`` may be a (view_a, view_b) pair."""
    pa, pb = policy if isinstance(policy, tuple) else (policy, policy)
    sa, sb = np.random.SeedSequence(seed).spawn(2)
    return (augment(image, pa, np.random.default_rng(sa)),
            augment(image, pb, np.random.default_rng(sb)))


def sample_seed(global_seed: int, epoch: int, index: int) -> list[int]:
    """Seed material for one sample's view pair, independent of batching."""
    return [int(global_seed), int(epoch), int(index)]


def view_batch(images: np.ndarray, indices, policy, global_seed: int, epoch: int,
               workers: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Stack view pairs for dataset rows ``indices`` (per-sample seeding)."""

    def one(i):
        return make_view_pair(images[i], policy, sample_seed(global_seed, epoch, i))

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(workers) as ex:
            pairs = list(ex.map(one, indices))
    else:
        pairs = [one(i) for i in indices]
    return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])
