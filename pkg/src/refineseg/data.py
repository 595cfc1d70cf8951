"""Synthetic thin-structure images and videos, prompt sampling and the on-disk
dataset format (PNG rasters + JSON-lines manifest)."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage
from skimage import draw, morphology

from .base_model import PromptSet

FAMILIES = ("branches", "comb", "ring", "star")
PROMPT_KINDS = ("box", "points", "coarse")


@dataclass
class SyntheticSample:
    image: np.ndarray  # float32 [3, R, R] in [0, 1], 8-bit quantised
    gt_mask: np.ndarray  # bool [R, R]
    seed: int
    family: str
    frame: int = 0

    @property
    def resolution(self) -> int:
        return self.gt_mask.shape[0]


def _rng(*keys) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


# --- vector shapes -------------------------------------------------------------
# A shape is a list of primitives:
#   ("line", p0, p1, radius)   segment dilated by a disk of ``radius``
#   ("poly", vertices)         filled polygon, vertices [N, 2] as (x, y)
#   ("ring", center, r_in, r_out)


def _make_branches(rng, r):
    s = r / 256
    radius = int(rng.integers(1, 4))
    root = rng.uniform(0.3 * r, 0.7 * r, size=2)
    prims = []
    stack = [(root, rng.uniform(0, 2 * math.pi), 0)]
    while stack:
        start, angle, depth = stack.pop()
        length = rng.uniform(30, 60) * s * (0.8 ** depth)
        end = start + length * np.array([math.cos(angle), math.sin(angle)])
        prims.append(("line", start, end, radius))
        if depth < 3:
            for _ in range(int(rng.integers(1, 3))):
                stack.append((end, angle + rng.uniform(-0.9, 0.9), depth + 1))
    return prims


def _rect(center, direction, length, width):
    d = np.asarray(direction, dtype=float)
    n = np.array([-d[1], d[0]])
    c = np.asarray(center, dtype=float)
    hl, hw = length / 2, width / 2
    return np.array([c - d * hl - n * hw, c + d * hl - n * hw, c + d * hl + n * hw, c - d * hl + n * hw])


def _make_comb(rng, r):
    s = r / 256
    angle = rng.uniform(0, math.pi)
    d = np.array([math.cos(angle), math.sin(angle)])
    n = np.array([-d[1], d[0]])
    length = rng.uniform(70, 140) * s
    spine_w = max(3.0, 6 * s)
    center = rng.uniform(0.35 * r, 0.65 * r, size=2)
    prims = [("poly", _rect(center, d, length, spine_w))]
    tooth_len = rng.uniform(18, 40) * s
    spacing = max(3.0, rng.uniform(5, 9) * s)
    k = int(length // spacing)
    for i in range(k):
        along = -length / 2 + spacing * (i + 0.5)
        base = center + d * along + n * (spine_w / 2 + tooth_len / 2)
        prims.append(("poly", _rect(base, n, tooth_len, 2.0)))
    return prims


def _make_ring(rng, r):
    s = r / 256
    r_out = rng.uniform(20, 60) * s
    width = max(2.0, rng.uniform(2, 6) * s)
    center = rng.uniform(r_out + 4, r - r_out - 4, size=2)
    return [("ring", center, max(r_out - width, 1.0), r_out)]


def _make_star(rng, r):
    s = r / 256
    spikes = int(rng.integers(5, 10))
    r_outer = rng.uniform(35, 80) * s
    r_inner = max(2.0, rng.uniform(4, 10) * s)
    center = rng.uniform(r_outer * 0.7, r - r_outer * 0.7, size=2)
    phase = rng.uniform(0, 2 * math.pi)
    verts = []
    for i in range(2 * spikes):
        rad = r_outer * rng.uniform(0.7, 1.0) if i % 2 == 0 else r_inner
        a = phase + math.pi * i / spikes
        verts.append(center + rad * np.array([math.cos(a), math.sin(a)]))
    return [("poly", np.array(verts))]


_MAKERS = {"branches": _make_branches, "comb": _make_comb, "ring": _make_ring, "star": _make_star}


def shape_centroid(prims) -> np.ndarray:
    pts = []
    for p in prims:
        if p[0] == "line":
            pts += [p[1], p[2]]
        elif p[0] == "poly":
            pts += list(p[1])
        else:
            pts.append(p[1])
    return np.mean(pts, axis=0)


def transform_shape(prims, angle_deg: float, shift, center):
    """Rotate by ``angle_deg`` about ``center`` then translate by ``shift`` (x, y)."""
    a = math.radians(angle_deg)
    rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    c = np.asarray(center, dtype=float)
    t = np.asarray(shift, dtype=float)

    def f(p):
        return (np.asarray(p, dtype=float) - c) @ rot.T + c + t

    out = []
    for p in prims:
        if p[0] == "line":
            out.append(("line", f(p[1]), f(p[2]), p[3]))
        elif p[0] == "poly":
            out.append(("poly", f(p[1])))
        else:
            out.append(("ring", f(p[1]), p[2], p[3]))
    return out


def rasterize_shape(prims, r: int) -> np.ndarray:
    mask = np.zeros((r, r), dtype=bool)
    lines = {}
    for p in prims:
        if p[0] == "line":
            (x0, y0), (x1, y1) = np.round(p[1]).astype(int), np.round(p[2]).astype(int)
            rr, cc = draw.line(y0, x0, y1, x1)
            keep = (rr >= 0) & (rr < r) & (cc >= 0) & (cc < r)
            canvas = lines.setdefault(p[3], np.zeros((r, r), dtype=bool))
            canvas[rr[keep], cc[keep]] = True
        elif p[0] == "poly":
            v = p[1]
            rr, cc = draw.polygon(v[:, 1], v[:, 0], shape=(r, r))
            mask[rr, cc] = True
        else:
            (cx, cy), r_in, r_out = p[1], p[2], p[3]
            yy, xx = np.mgrid[0:r, 0:r]
            d2 = (xx - cx) ** 2 + (yy - cy) ** 2
            mask |= (d2 <= r_out ** 2) & (d2 >= r_in ** 2)
    for radius, canvas in lines.items():
        mask |= ndimage.binary_dilation(canvas, structure=morphology.disk(radius))
    return mask


# --- appearance ----------------------------------------------------------------

def _texture(rng, r):
    tex = np.zeros((3, r, r))
    for sigma, weight in ((r / 32, 0.6), (r / 8, 1.0), (1.0, 0.15)):
        spectrum = np.fft.rfft2(rng.standard_normal((3, r, r)))
        # periodic gaussian blur, done in the frequency domain
        smooth = np.fft.irfft2(ndimage.fourier_gaussian(spectrum, (0, sigma, sigma), n=r), s=(r, r))
        smooth /= smooth.std() + 1e-8
        tex += weight * smooth
    return tex / np.abs(tex).max()


def _colors(rng):
    bg = rng.uniform(0.2, 0.8, size=3)
    for _ in range(100):
        fg = rng.uniform(0.0, 1.0, size=3)
        if np.linalg.norm(fg - bg) >= 0.45:
            return bg, fg
    return bg, 1.0 - bg


def quantize(image: np.ndarray) -> np.ndarray:
    return (np.round(np.clip(image, 0, 1) * 255) / 255).astype(np.float32)


def _paint(background, mask, fg, rng):
    img = background.copy()
    fg_noise = 0.04 * rng.standard_normal((3,) + mask.shape)
    for c in range(3):
        img[c][mask] = fg[c] + fg_noise[c][mask]
    return quantize(img)


def _draw_shape(rng, family, r, max_tries=50):
    for _ in range(max_tries):
        prims = _MAKERS[family](rng, r)
        mask = rasterize_shape(prims, r)
        frac = mask.mean()
        if 0.01 <= frac <= 0.5:
            return prims, mask
    raise RuntimeError(f"could not draw a {family} shape with a valid foreground fraction")


def generate_image_sample(seed: int, r: int = 256, family: str | None = None) -> SyntheticSample:
    """Deterministic thin-structure sample: ``(seed, r, family)`` fixes every byte."""
    if r % 16:
        raise ValueError("resolution must be divisible by 16")
    if family is None:
        family = FAMILIES[seed % len(FAMILIES)]
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}")
    rng = _rng(seed, r, FAMILIES.index(family))
    prims, mask = _draw_shape(rng, family, r)
    bg, fg = _colors(rng)
    background = bg[:, None, None] + 0.25 * _texture(rng, r)
    return SyntheticSample(_paint(background, mask, fg, rng), mask, seed, family)


def _warp(channel, angle_deg, shift, center):
    # output pixel (y, x) samples input at R^-1 ((y, x) - c - t) + c
    a = math.radians(angle_deg)
    rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])  # acts on (x, y)
    inv = np.linalg.inv(rot)
    m_xy = inv
    m_yx = m_xy[::-1, ::-1]
    c_yx = np.asarray(center, dtype=float)[::-1]
    t_yx = np.asarray(shift, dtype=float)[::-1]
    offset = c_yx - m_yx @ (c_yx + t_yx)
    return ndimage.affine_transform(channel, m_yx, offset=offset, order=1, mode="reflect")


def generate_video_sequence(seed: int, r: int = 256, t: int = 8, family: str | None = None,
                            max_shift: float = 2.0, max_rotation: float = 2.0) -> list:
    """Frames share one shape and background under constant per-frame rigid motion."""
    if t < 1:
        raise ValueError("t must be >= 1")
    if family is None:
        family = FAMILIES[seed % len(FAMILIES)]
    rng = _rng(seed, r, FAMILIES.index(family), t, 7)
    bg, fg = _colors(rng)
    background = bg[:, None, None] + 0.25 * _texture(rng, r)
    for _ in range(50):
        prims, mask0 = _draw_shape(rng, family, r)
        speed = rng.uniform(0.5, max_shift)
        heading = rng.uniform(0, 2 * math.pi)
        velocity = speed * np.array([math.cos(heading), math.sin(heading)])
        omega = rng.uniform(-max_rotation, max_rotation)
        center = shape_centroid(prims)
        masks = [mask0] + [rasterize_shape(transform_shape(prims, omega * k, velocity * k, center), r)
                           for k in range(1, t)]
        areas = np.array([m.sum() for m in masks], dtype=float)
        if areas.min() > 0 and (areas.max() - areas.min()) / areas.max() < 0.1 \
                and all(0.01 <= m.mean() <= 0.5 for m in masks):
            break
    else:
        raise RuntimeError("could not generate a valid sequence")
    noise_rng = _rng(seed, r, t, 11)
    frames = []
    for k, mask in enumerate(masks):
        if k == 0:
            bg_k = background
        else:
            bg_k = np.stack([_warp(c, omega * k, velocity * k, center) for c in background])
        frames.append(SyntheticSample(_paint(bg_k, mask, fg, noise_rng), mask, seed, family, frame=k))
    return frames


# --- prompts -------------------------------------------------------------------

def coarse_from_mask(gt: np.ndarray) -> np.ndarray:
    """GT area-downsampled x8, bilinearly resized to R/4 and thresholded at 0.5."""
    import torch
    import torch.nn.functional as F

    r = gt.shape[0]
    t = torch.as_tensor(gt, dtype=torch.float32)[None, None]
    low = F.avg_pool2d(t, 8)
    up = F.interpolate(low, size=(r // 4, r // 4), mode="bilinear", align_corners=False)
    return (up[0, 0] > 0.5).numpy().astype(np.float32)


def tight_box(gt: np.ndarray):
    rows = np.flatnonzero(gt.any(axis=1))
    cols = np.flatnonzero(gt.any(axis=0))
    return float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1)


def sample_prompts(gt_mask, kind: str, seed: int, num_points: int | None = None,
                   num_negatives: int | None = None, jitter: float = 0.05) -> PromptSet:
    gt = np.asarray(gt_mask).astype(bool)
    if not gt.any():
        raise ValueError("cannot sample prompts from an empty mask")
    r = gt.shape[0]
    rng = _rng(seed, 99)
    if kind == "box":
        x0, y0, x1, y1 = tight_box(gt)
        if jitter > 0:
            w, h = x1 - x0, y1 - y0
            dx = rng.uniform(-jitter, jitter, size=2) * w
            dy = rng.uniform(-jitter, jitter, size=2) * h
            x0, x1 = np.clip([x0 + dx[0], x1 + dx[1]], 0, r)
            y0, y1 = np.clip([y0 + dy[0], y1 + dy[1]], 0, r)
            if x1 - x0 < 1:
                x0, x1 = tight_box(gt)[0::2]
            if y1 - y0 < 1:
                y0, y1 = tight_box(gt)[1::2]
        return PromptSet(box=(float(x0), float(y0), float(x1), float(y1)))
    if kind == "points":
        k = int(rng.integers(1, 11)) if num_points is None else int(num_points)
        j = int(rng.integers(0, 4)) if num_negatives is None else int(num_negatives)
        fg = np.argwhere(gt)
        bg = np.argwhere(~gt)
        pos = fg[rng.integers(0, len(fg), size=k)]
        neg = bg[rng.integers(0, len(bg), size=j)] if len(bg) and j else np.zeros((0, 2), dtype=int)
        rows_cols = np.concatenate([pos, neg])
        points = rows_cols[:, ::-1].astype(np.float64)  # (x, y)
        labels = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))]).astype(np.int64)
        return PromptSet(points=points, labels=labels)
    if kind == "coarse":
        return PromptSet(coarse_mask=coarse_from_mask(gt))
    raise ValueError(f"unknown prompt kind {kind!r}")


# --- dataset format ------------------------------------------------------------

def generate_dataset(n: int, r: int = 256, seed: int = 0) -> list:
    return [generate_image_sample(seed * 1_000_003 + i, r, FAMILIES[i % len(FAMILIES)]) for i in range(n)]


def stack_samples(samples):
    images = np.stack([s.image for s in samples]).astype(np.float32)
    masks = np.stack([s.gt_mask for s in samples])
    return images, masks


def save_mask(mask, path) -> None:
    Image.fromarray(np.asarray(mask, dtype=bool).astype(np.uint8) * 255, mode="L").save(path)


def load_mask(path) -> np.ndarray:
    arr = np.asarray(Image.open(path))
    if arr.ndim == 3:
        arr = arr[..., 0]
    return arr >= 128


def save_image(image, path) -> None:
    arr = np.round(np.clip(np.asarray(image), 0, 1) * 255).astype(np.uint8)
    if arr.shape[0] == 3:
        arr = arr.transpose(1, 2, 0)
    Image.fromarray(arr, mode="RGB").save(path)


def load_image(path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255
    return arr.transpose(2, 0, 1).copy()


def write_dataset(samples, out_dir, sequence_ids=None) -> Path:
    """Write PNG rasters and ``manifest.jsonl``; returns the manifest path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    records = []
    for i, s in enumerate(samples):
        sid = f"{i:05d}" if sequence_ids is None else f"{sequence_ids[i]:04d}_{s.frame:03d}"
        image_path = Path("images") / f"{sid}.png"
        mask_path = Path("masks") / f"{sid}.png"
        save_image(s.image, out / image_path)
        save_mask(s.gt_mask, out / mask_path)
        rec = {"id": sid, "image_path": str(image_path), "mask_path": str(mask_path),
               "family": s.family, "seed": int(s.seed)}
        if sequence_ids is not None:
            rec["sequence"] = int(sequence_ids[i])
            rec["frame"] = int(s.frame)
        records.append(rec)
    manifest = out / "manifest.jsonl"
    manifest.write_text("".join(json.dumps(r) + "\n" for r in records))
    return manifest


def read_dataset(path) -> list:
    path = Path(path)
    manifest = path / "manifest.jsonl" if path.is_dir() else path
    root = manifest.parent
    samples = []
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        samples.append(SyntheticSample(load_image(root / rec["image_path"]), load_mask(root / rec["mask_path"]),
                                       int(rec["seed"]), rec["family"], int(rec.get("frame", 0))))
    return samples


def read_sequences(path) -> list:
    """Group a video manifest into sequences ordered by frame."""
    path = Path(path)
    manifest = path / "manifest.jsonl" if path.is_dir() else path
    recs = [json.loads(line) for line in manifest.read_text().splitlines() if line.strip()]
    samples = read_dataset(manifest)
    groups = {}
    for rec, s in zip(recs, samples):
        groups.setdefault(rec.get("sequence", 0), []).append(s)
    return [sorted(g, key=lambda s: s.frame) for _, g in sorted(groups.items())]
