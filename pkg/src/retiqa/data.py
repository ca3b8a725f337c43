"""Synthetic fundus data, manifests, stratified k-fold splits and batching.

The generator renders a circular field of view (reddish disk, dark
vessel curves, one bright optic-disc blob) on a black background and
then degrades it according to the quality label.  Label semantics are
carried by the amplitude of a spatial illumination field: 'good' images
are lit almost evenly, 'usable' ones moderately unevenly and 'reject'
ones severely so (plus occasional occlusion patches).  Blur and noise
ranges overlap across labels so that unevenness stays the
discriminative axis.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import IntEnum
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.ndimage import gaussian_filter

from . import imgproc
from .imgproc import FovCircle


class QualityLabel(IntEnum):
    GOOD = 0
    USABLE = 1
    REJECT = 2


_LABEL_NAMES = {
    QualityLabel.GOOD: "good",
    QualityLabel.USABLE: "usable",
    QualityLabel.REJECT: "reject",
}
_NAME_LABELS = {v: k for k, v in _LABEL_NAMES.items()}


def label_name(label: QualityLabel) -> str:
    return _LABEL_NAMES[QualityLabel(label)]


def label_from_name(name: str) -> QualityLabel:
    try:
        return _NAME_LABELS[name]
    except KeyError:
        raise ValueError(f"unknown quality label {name!r}") from None


class ManifestRecord(NamedTuple):
    path: str
    label: QualityLabel


Manifest = list[ManifestRecord]


class ManifestParseError(ValueError):
    """A manifest line failed to parse; carries the 1-based line number."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class TooFewSamples(ValueError):
    """A class has fewer members than the requested fold count."""


@dataclass(frozen=True)
class SyntheticParams:
    """Generator knobs; per-label ranges are indexed by the label value."""

    image_size: int = 128
    fov_radius_frac: tuple[float, float] = (0.38, 0.46)
    center_jitter_frac: float = 0.02
    vessel_count: tuple[int, int] = (4, 8)
    vessel_width: tuple[float, float] = (1.0, 2.2)
    disc_radius_frac: tuple[float, float] = (0.14, 0.20)
    disc_brightness: tuple[float, float] = (0.8, 1.2)
    illum_amplitude: tuple[tuple[float, float], ...] = (
        (0.0, 0.05),
        (0.15, 0.35),
        (0.45, 0.8),
    )
    blur_sigma: tuple[tuple[float, float], ...] = (
        (0.4, 0.8),
        (0.5, 1.1),
        (0.6, 1.4),
    )
    noise_sigma: tuple[tuple[float, float], ...] = (
        (0.004, 0.010),
        (0.006, 0.015),
        (0.008, 0.025),
    )
    occlusion_prob: float = 0.5
    global_gain: tuple[float, float] = (0.9, 1.1)

    def __post_init__(self):
        if self.image_size < 32:
            raise ValueError("image_size must be >= 32")
        bands = self.illum_amplitude
        for lo, hi in bands:
            if not 0.0 <= lo <= hi:
                raise ValueError(f"bad illumination band ({lo}, {hi})")
        for (_, hi), (lo, _) in zip(bands, bands[1:]):
            if hi >= lo:
                raise ValueError("illumination bands must not overlap across labels")


def _stamp_curve(mask: np.ndarray, px: np.ndarray, py: np.ndarray,
                 width: float, values: np.ndarray) -> None:
    """Max-accumulate disks of the given width at sampled curve points."""
    size = mask.shape[0]
    rad = max(1, int(np.ceil(width / 2.0)))
    lim = (width / 2.0 + 0.5) ** 2
    ix = np.rint(px).astype(np.int64)
    iy = np.rint(py).astype(np.int64)
    for oy in range(-rad, rad + 1):
        for ox in range(-rad, rad + 1):
            if ox * ox + oy * oy > lim:
                continue
            xs = ix + ox
            ys = iy + oy
            ok = (xs >= 0) & (xs < size) & (ys >= 0) & (ys < size)
            np.maximum.at(mask, (ys[ok], xs[ok]), values[ok])


def synth_fundus_with_truth(
    label: QualityLabel,
    rng: np.random.Generator,
    params: SyntheticParams = SyntheticParams(),
    circle: FovCircle | None = None,
) -> tuple[np.ndarray, FovCircle]:
    """Render one labelled fundus image; also return its FoV circle.

    Passing ``circle`` pins the FoV geometry (the corresponding random
    draws are skipped).  Deterministic given the rng state.
    """
    label = QualityLabel(label)
    size = params.image_size
    if circle is None:
        r = rng.uniform(*params.fov_radius_frac) * size
        cx = (size - 1) / 2.0 + rng.uniform(-1.0, 1.0) * params.center_jitter_frac * size
        cy = (size - 1) / 2.0 + rng.uniform(-1.0, 1.0) * params.center_jitter_frac * size
        circle = FovCircle(cx=cx, cy=cy, r=r)
    cx, cy, r = circle.cx, circle.cy, circle.r

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dist = np.hypot(xx - cx, yy - cy)
    fov = dist <= r

    base = np.array([0.72, 0.40, 0.20]) + rng.uniform(-0.06, 0.06, size=3)
    vignette = 1.0 - 0.18 * np.clip(dist / r, 0.0, 1.0) ** 2
    img = base[None, None, :] * vignette[:, :, None]

    # optic disc: one bright blob off-centre
    phi = rng.uniform(0.0, 2.0 * np.pi)
    disc_d = rng.uniform(0.35, 0.60) * r
    dcx, dcy = cx + disc_d * np.cos(phi), cy + disc_d * np.sin(phi)
    disc_r = rng.uniform(*params.disc_radius_frac) * r
    blob = np.exp(-((np.hypot(xx - dcx, yy - dcy) / disc_r) ** 2) * 1.5)
    gain = rng.uniform(*params.disc_brightness)
    img += (gain * blob)[:, :, None] * np.array([0.20, 0.32, 0.38])[None, None, :]

    # vessels radiating from the disc
    n_vessels = int(rng.integers(params.vessel_count[0], params.vessel_count[1] + 1))
    vessels = np.zeros((size, size))
    for _ in range(n_vessels):
        ang0 = rng.uniform(0.0, 2.0 * np.pi)
        curl = rng.uniform(-1.2, 1.2)
        width = rng.uniform(*params.vessel_width)
        t = np.linspace(0.0, 1.0, max(16, int(2.0 * r)))
        ang = ang0 + curl * t
        px = dcx + t * 1.15 * r * np.cos(ang)
        py = dcy + t * 1.15 * r * np.sin(ang)
        _stamp_curve(vessels, px, py, width, 1.0 - 0.45 * t)
    vessels = np.clip(gaussian_filter(vessels, 0.6), 0.0, 1.0)
    img *= 1.0 - 0.55 * vessels[:, :, None] * np.array([0.8, 1.0, 0.9])[None, None, :]

    # label-dependent illumination field, planar or radial
    amp = rng.uniform(*params.illum_amplitude[int(label)])
    if rng.random() < 0.5:
        theta = rng.uniform(0.0, 2.0 * np.pi)
        grad = ((xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)) / (2.0 * r)
        factor = 1.0 + 2.0 * amp * grad
    else:
        qphi = rng.uniform(0.0, 2.0 * np.pi)
        qd = rng.uniform(0.2, 0.8) * r
        qx, qy = cx + qd * np.cos(qphi), cy + qd * np.sin(qphi)
        spot = rng.uniform(0.35, 0.7) * r
        bump = np.exp(-((xx - qx) ** 2 + (yy - qy) ** 2) / (2.0 * spot * spot))
        factor = (1.0 - amp) + 2.0 * amp * bump
    img *= factor[:, :, None]

    img *= rng.uniform(*params.global_gain)

    blur = rng.uniform(*params.blur_sigma[int(label)])
    img = gaussian_filter(img, (blur, blur, 0.0))

    noise = rng.uniform(*params.noise_sigma[int(label)])
    img = img + rng.normal(0.0, noise, size=img.shape)

    if label == QualityLabel.REJECT and rng.random() < params.occlusion_prob:
        ophi = rng.uniform(0.0, 2.0 * np.pi)
        od = rng.uniform(0.0, 0.6) * r
        ox, oy = cx + od * np.cos(ophi), cy + od * np.sin(ophi)
        orad = rng.uniform(0.15, 0.30) * r
        patch = np.exp(-((np.hypot(xx - ox, yy - oy) / orad) ** 4))
        img *= 1.0 - 0.75 * patch[:, :, None]

    img = np.clip(img, 0.0, 1.0) * fov[:, :, None]
    return img, circle


def synth_fundus(
    label: QualityLabel,
    rng: np.random.Generator,
    params: SyntheticParams = SyntheticParams(),
) -> np.ndarray:
    return synth_fundus_with_truth(label, rng, params)[0]


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


def save_manifest(manifest: Manifest, path) -> None:
    """One record per line: ``relative/path.png,label`` (lowercase label)."""
    seen = set()
    lines = []
    for rec in manifest:
        if rec.path in seen:
            raise ValueError(f"duplicate path in manifest: {rec.path}")
        seen.add(rec.path)
        lines.append(f"{rec.path},{label_name(rec.label)}\n")
    Path(path).write_text("".join(lines), encoding="utf-8")


def load_manifest(path) -> Manifest:
    text = Path(path).read_text(encoding="utf-8")
    records: Manifest = []
    seen = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        head, sep, tail = line.rpartition(",")
        if not sep or not head:
            raise ManifestParseError(lineno, f"expected 'path,label', got {line!r}")
        try:
            label = label_from_name(tail.strip())
        except ValueError:
            raise ManifestParseError(lineno, f"unknown label {tail.strip()!r}") from None
        if head in seen:
            raise ManifestParseError(lineno, f"duplicate path {head!r}")
        seen.add(head)
        records.append(ManifestRecord(head, label))
    return records


def generate_dataset(
    out_dir,
    counts: dict[QualityLabel, int],
    seed: int,
    params: SyntheticParams = SyntheticParams(),
) -> Manifest:
    """Write ``counts[label]`` PNGs per label plus a manifest.txt; returns it."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    records: Manifest = []
    for label in QualityLabel:
        for i in range(counts.get(label, 0)):
            img = synth_fundus(label, rng, params)
            rel = f"{label_name(label)}_{i:04d}.png"
            imgproc.write_png(out / rel, img)
            records.append(ManifestRecord(rel, label))
    save_manifest(records, out / "manifest.txt")
    return records


# ---------------------------------------------------------------------------
# splits and batching
# ---------------------------------------------------------------------------


def kfold_split(manifest: Manifest, k: int, seed: int) -> list[tuple[Manifest, Manifest]]:
    """Stratified k-fold: per class, a seeded shuffle dealt round-robin.

    Fold i's validation set is fold i, its training set the rest; per
    class the fold sizes differ by at most one.
    """
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    rng = np.random.default_rng(seed)
    fold_indices: list[list[int]] = [[] for _ in range(k)]
    for label in QualityLabel:
        idx = [i for i, rec in enumerate(manifest) if rec.label == label]
        if len(idx) < k:
            raise TooFewSamples(
                f"class {label_name(label)} has {len(idx)} samples, needs >= {k}"
            )
        perm = rng.permutation(len(idx))
        for j, p in enumerate(perm):
            fold_indices[j % k].append(idx[p])
    pairs = []
    for i in range(k):
        val_set = set(fold_indices[i])
        val = [manifest[j] for j in sorted(fold_indices[i])]
        tr = [rec for j, rec in enumerate(manifest) if j not in val_set]
        pairs.append((tr, val))
    return pairs


def preload_images(manifest: Manifest, root) -> dict[str, np.ndarray]:
    """Load every manifest image once as float32 HxWx3."""
    root = Path(root)
    return {
        rec.path: imgproc.read_image(root / rec.path).astype(np.float32)
        for rec in manifest
    }


def batch_iter(
    manifest: Manifest,
    root,
    batch_size: int,
    seed: int,
    epoch: int = 1,
    augment: imgproc.AugmentFlags | None = None,
    images: dict[str, np.ndarray] | None = None,
    shuffle: bool = True,
    dtype=np.float32,
):
    """Yield (batch, labels) as (B,3,H,W) float and (B,) int64 arrays.

    Each epoch visits every record exactly once in a seeded permutation;
    the final partial batch is kept.  Deterministic per (seed, epoch).
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    root = Path(root)
    rng = np.random.default_rng((seed, epoch))
    order = rng.permutation(len(manifest)) if shuffle else np.arange(len(manifest))
    for start in range(0, len(manifest), batch_size):
        chunk = order[start : start + batch_size]
        batch = []
        labels = np.empty(len(chunk), dtype=np.int64)
        for j, idx in enumerate(chunk):
            rec = manifest[int(idx)]
            if images is not None and rec.path in images:
                img = images[rec.path]
            else:
                img = imgproc.read_image(root / rec.path).astype(np.float32)
            if augment is not None:
                img = imgproc.augment(img, rng, augment)
            batch.append(np.ascontiguousarray(img.transpose(2, 0, 1), dtype=dtype))
            labels[j] = int(rec.label)
        yield np.stack(batch), labels
