"""Fundus preprocessing: FoV circle detection, crop/pad/resize, augmentation.

Images are H x W x 3 float arrays with intensities in [0, 1].  The field
of view (FoV) is located with a gradient-voting circular Hough transform
on a Sobel edge map of the luminance; the crop is the axis-aligned
bounding square of the detected circle, zero-padded square and resampled
bilinearly to the network input size.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image


class NoFovFound(RuntimeError):
    """Peak Hough vote count is too low: blank or non-fundus image."""


class EmptyCrop(ValueError):
    """The clipped bounding box of the circle has zero area."""


class ImageLoadError(RuntimeError):
    """An image file could not be read or decoded."""


@dataclass(frozen=True)
class FovCircle:
    cx: float  # column of the centre, pixels
    cy: float  # row of the centre, pixels
    r: float   # radius, pixels


@dataclass(frozen=True)
class PreprocessConfig:
    target_size: int = 224
    fov_enabled: bool = True
    edge_percentile: float = 95.0
    # radius search range as fractions of min(H, W); fundus FoVs dominate the frame
    radius_min_frac: float = 0.35
    radius_max_frac: float = 0.60
    # centres restricted to the middle 60% of the frame
    center_margin_frac: float = 0.20
    # votes are cast at a working resolution whose min side is <= this cap
    accumulator_cap: int = 256

    def __post_init__(self):
        if self.target_size < 32 or self.target_size % 2:
            raise ValueError(f"target_size must be even and >= 32, got {self.target_size}")


@dataclass(frozen=True)
class AugmentFlags:
    hflip: bool = True
    vflip: bool = True
    rotate: bool = True


def validate_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 image, got shape {image.shape}")
    if image.shape[0] < 8 or image.shape[1] < 8:
        raise ValueError(f"image too small: {image.shape[0]}x{image.shape[1]}")
    if not np.all(np.isfinite(image)):
        raise ValueError("image contains non-finite values")
    if image.min() < 0.0 or image.max() > 1.0:
        raise ValueError("intensities must lie in [0, 1]")
    return image


def luminance(image: np.ndarray) -> np.ndarray:
    return (
        0.299 * image[:, :, 0] + 0.587 * image[:, :, 1] + 0.114 * image[:, :, 2]
    )


def _sobel(gray: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p = np.pad(gray, 1, mode="edge")
    gx = (
        (p[0:-2, 2:] + 2.0 * p[1:-1, 2:] + p[2:, 2:])
        - (p[0:-2, 0:-2] + 2.0 * p[1:-1, 0:-2] + p[2:, 0:-2])
    )
    gy = (
        (p[2:, 0:-2] + 2.0 * p[2:, 1:-1] + p[2:, 2:])
        - (p[0:-2, 0:-2] + 2.0 * p[0:-2, 1:-1] + p[0:-2, 2:])
    )
    return gx, gy


def _block_mean(gray: np.ndarray, factor: int) -> np.ndarray:
    h = (gray.shape[0] // factor) * factor
    w = (gray.shape[1] // factor) * factor
    return gray[:h, :w].reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))


def detect_fov(image: np.ndarray, cfg: PreprocessConfig = PreprocessConfig()) -> FovCircle:
    """Locate the FoV disk via a gradient-voting circular Hough transform.

    Every edge pixel votes for circle centres along +/- its gradient
    direction at each candidate radius.  The highest-vote circle wins;
    if its votes fall below 25% of the circle circumference (the
    theoretical maximum one vote per boundary pixel) the image is
    treated as blank and NoFovFound is raised.
    """
    image = validate_image(image)
    if not (0.0 < cfg.radius_min_frac <= cfg.radius_max_frac <= 0.75):
        raise ValueError("radius fractions must satisfy 0 < min <= max <= 0.75")

    lum = luminance(image)
    big = min(lum.shape)
    factor = -(-big // cfg.accumulator_cap) if big > cfg.accumulator_cap else 1
    work = _block_mean(lum, factor) if factor > 1 else lum
    h, w = work.shape

    gx, gy = _sobel(work)
    gm = np.hypot(gx, gy)
    thresh = np.percentile(gm, cfg.edge_percentile)
    edges = gm > max(thresh, 1e-12)
    ys, xs = np.nonzero(edges)
    if ys.size == 0:
        raise NoFovFound("no edges above threshold (blank image?)")
    norms = gm[edges]
    ux = gx[edges] / norms
    uy = gy[edges] / norms

    m = min(h, w)
    r_lo = max(2, int(round(cfg.radius_min_frac * m)))
    r_hi = max(r_lo, int(round(cfg.radius_max_frac * m)))
    radii = np.arange(r_lo, r_hi + 1)
    x_lo, x_hi = cfg.center_margin_frac * (w - 1), (1.0 - cfg.center_margin_frac) * (w - 1)
    y_lo, y_hi = cfg.center_margin_frac * (h - 1), (1.0 - cfg.center_margin_frac) * (h - 1)

    acc = np.zeros((radii.size, h, w), dtype=np.int32)
    xs_f = xs.astype(np.float64)
    ys_f = ys.astype(np.float64)
    for ri, r in enumerate(radii):
        for sign in (1.0, -1.0):
            cx = np.rint(xs_f + sign * r * ux).astype(np.int64)
            cy = np.rint(ys_f + sign * r * uy).astype(np.int64)
            keep = (cx >= x_lo) & (cx <= x_hi) & (cy >= y_lo) & (cy <= y_hi)
            np.add.at(acc[ri], (cy[keep], cx[keep]), 1)

    ri, py, px = np.unravel_index(int(np.argmax(acc)), acc.shape)
    peak = int(acc[ri, py, px])
    r_best = int(radii[ri])
    max_votes = max(1.0, 2.0 * np.pi * r_best)
    if peak < 0.25 * max_votes:
        raise NoFovFound(
            f"peak votes {peak} below 25% of circumference {max_votes:.0f} "
            f"at radius {r_best}"
        )

    # sub-bin refinement: vote-weighted centroid over the 3x3x3 neighbourhood
    r0, r1 = max(0, ri - 1), min(radii.size, ri + 2)
    v0, v1 = max(0, py - 1), min(h, py + 2)
    u0, u1 = max(0, px - 1), min(w, px + 2)
    sub = acc[r0:r1, v0:v1, u0:u1].astype(np.float64)
    rr, vv, uu = np.meshgrid(
        radii[r0:r1].astype(np.float64),
        np.arange(v0, v1, dtype=np.float64),
        np.arange(u0, u1, dtype=np.float64),
        indexing="ij",
    )
    wsum = sub.sum()
    r_ref = float((sub * rr).sum() / wsum)
    cy_ref = float((sub * vv).sum() / wsum)
    cx_ref = float((sub * uu).sum() / wsum)

    if factor > 1:
        cx_ref = (cx_ref + 0.5) * factor - 0.5
        cy_ref = (cy_ref + 0.5) * factor - 0.5
        r_ref *= factor
    return FovCircle(cx=cx_ref, cy=cy_ref, r=r_ref)


def full_frame_circle(image: np.ndarray) -> FovCircle:
    """Circle whose bounding square is the centred largest square of the frame."""
    h, w = image.shape[:2]
    return FovCircle(cx=(w - 1) / 2.0, cy=(h - 1) / 2.0, r=min(h, w) / 2.0)


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling with half-pixel-centre source coordinates.

    src = (dst + 0.5) * (in_size / out_size) - 0.5, clamped to the frame;
    an equal-size resize is therefore an exact identity.
    """
    img = np.asarray(image)
    flat = img.ndim == 2
    if flat:
        img = img[:, :, None]
    h, w = img.shape[:2]
    ys = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0.0, h - 1.0)
    xs = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    out = (
        img[y0[:, None], x0[None, :]] * (1.0 - fy) * (1.0 - fx)
        + img[y0[:, None], x1[None, :]] * (1.0 - fy) * fx
        + img[y1[:, None], x0[None, :]] * fy * (1.0 - fx)
        + img[y1[:, None], x1[None, :]] * fy * fx
    )
    out = out.astype(img.dtype, copy=False)
    return out[:, :, 0] if flat else out


def crop_pad_resize(
    image: np.ndarray,
    circle: FovCircle,
    cfg: PreprocessConfig = PreprocessConfig(),
) -> np.ndarray:
    """Crop the circle's bounding square, zero-pad square, resample to target.

    The bounding square is clipped to the frame; when the clip leaves a
    non-square region the shorter side is zero-padded symmetrically.
    """
    image = np.asarray(image)
    h, w = image.shape[:2]
    y0 = max(0, int(np.floor(circle.cy - circle.r)))
    y1 = min(h, int(np.ceil(circle.cy + circle.r)) + 1)
    x0 = max(0, int(np.floor(circle.cx - circle.r)))
    x1 = min(w, int(np.ceil(circle.cx + circle.r)) + 1)
    if y1 <= y0 or x1 <= x0:
        raise EmptyCrop(f"circle {circle} does not intersect the {h}x{w} frame")
    crop = image[y0:y1, x0:x1]
    ch, cw = crop.shape[:2]
    side = max(ch, cw)
    pt = (side - ch) // 2
    pl = (side - cw) // 2
    sq = np.pad(crop, ((pt, side - ch - pt), (pl, side - cw - pl), (0, 0)))
    return resize_bilinear(sq, cfg.target_size, cfg.target_size)


def hflip(image: np.ndarray) -> np.ndarray:
    """Mirror columns: pixel (y, x) moves to (y, W-1-x)."""
    return np.ascontiguousarray(image[:, ::-1])


def vflip(image: np.ndarray) -> np.ndarray:
    """Mirror rows: pixel (y, x) moves to (H-1-y, x)."""
    return np.ascontiguousarray(image[::-1])


def _sample_bilinear_zero(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Bilinear gather at real coordinates; samples outside the frame read 0."""
    flat = img.ndim == 2
    chan = img[:, :, None] if flat else img
    h, w = chan.shape[:2]
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    fy = (ys - y0)[:, :, None]
    fx = (xs - x0)[:, :, None]

    def tap(yi, xi):
        valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        v = chan[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
        return v * valid[:, :, None]

    out = (
        tap(y0, x0) * (1.0 - fy) * (1.0 - fx)
        + tap(y0, x0 + 1) * (1.0 - fy) * fx
        + tap(y0 + 1, x0) * fy * (1.0 - fx)
        + tap(y0 + 1, x0 + 1) * fy * fx
    )
    out = out.astype(img.dtype, copy=False)
    return out[:, :, 0] if flat else out


def rotate(image: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate about the image centre with bilinear resampling, zero fill.

    90 degrees reproduces ``np.rot90(image, 1)`` up to float rounding.
    """
    img = np.asarray(image)
    h, w = img.shape[:2]
    theta = np.deg2rad(angle_deg)
    c, s = np.cos(theta), np.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    dy, dx = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    ys = cy + c * dy + s * dx
    xs = cx - s * dy + c * dx
    return _sample_bilinear_zero(img, ys, xs)


def augment(
    image: np.ndarray,
    rng: np.random.Generator,
    flags: AugmentFlags = AugmentFlags(),
) -> np.ndarray:
    """Random horizontal/vertical flip (probability 0.5 each), then a rotation
    by an angle uniform in [0, 360).  Deterministic given the rng state."""
    out = image
    if flags.hflip and rng.random() < 0.5:
        out = hflip(out)
    if flags.vflip and rng.random() < 0.5:
        out = vflip(out)
    if flags.rotate:
        out = rotate(out, float(rng.uniform(0.0, 360.0)))
    if out is image:
        out = image.copy()
    return out


# ---------------------------------------------------------------------------
# image file IO: 8-bit PNG and PPM (P6) in, PNG / PGM (P5) out
# ---------------------------------------------------------------------------


def _read_pnm_header(data: bytes, magic: bytes) -> tuple[list[int], int]:
    if not data.startswith(magic):
        raise ValueError(f"bad magic, expected {magic!r}")
    fields: list[int] = []
    i = len(magic)
    want = 3  # width, height, maxval
    while len(fields) < want:
        while i < len(data) and data[i : i + 1].isspace():
            i += 1
        if i < len(data) and data[i : i + 1] == b"#":
            while i < len(data) and data[i : i + 1] != b"\n":
                i += 1
            continue
        j = i
        while j < len(data) and not data[j : j + 1].isspace():
            j += 1
        if j == i:
            raise ValueError("truncated header")
        fields.append(int(data[i:j]))
        i = j
    return fields, i + 1  # single whitespace after maxval


def _read_ppm(path: Path) -> np.ndarray:
    data = path.read_bytes()
    (w, h, maxval), offset = _read_pnm_header(data, b"P6")
    if not 0 < maxval < 256:
        raise ValueError(f"only 8-bit PPM supported, maxval {maxval}")
    raw = np.frombuffer(data, dtype=np.uint8, count=h * w * 3, offset=offset)
    if raw.size < h * w * 3:
        raise ValueError("truncated pixel data")
    return raw.reshape(h, w, 3).astype(np.float64) / float(maxval)


def read_image(path) -> np.ndarray:
    """Read an 8-bit PNG or PPM (P6) file as an HxWx3 float image in [0, 1]."""
    p = Path(path)
    try:
        if p.suffix.lower() in (".ppm", ".pnm"):
            return _read_ppm(p)
        with Image.open(p) as im:
            rgb = im.convert("RGB")
            return np.asarray(rgb, dtype=np.uint8).astype(np.float64) / 255.0
    except FileNotFoundError:
        raise ImageLoadError(f"cannot read image {p}: no such file") from None
    except Exception as exc:
        raise ImageLoadError(f"cannot read image {p}: {exc}") from exc


def write_png(path, image: np.ndarray) -> None:
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    data = np.rint(arr * 255.0).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(Path(path), format="PNG")


def write_pgm(path, values: np.ndarray) -> None:
    """Write a single-channel map in [0, 1] as binary PGM (P5), v -> round(255*v)."""
    arr = np.clip(np.asarray(values), 0.0, 1.0)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D map, got shape {arr.shape}")
    data = np.rint(arr * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    (w, h, maxval), offset = _read_pnm_header(data, b"P5")
    if not 0 < maxval < 256:
        raise ValueError(f"only 8-bit PGM supported, maxval {maxval}")
    raw = np.frombuffer(data, dtype=np.uint8, count=h * w, offset=offset)
    if raw.size < h * w:
        raise ValueError("truncated pixel data")
    return raw.reshape(h, w).astype(np.float64) / float(maxval)
