"""Two-level image pyramids: tiling, alignment, synthetic slide generation.

The low-resolution level of every pyramid produced here is the exact
box-filtered downsample of the high-resolution level. Generated slides get
their per-block pixel sums dithered to a multiple of mag_ratio**2 so the
block averages are exact integers and the alignment round-trip is bit-exact
in both integer and float arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import IntegrityError
from .netpbm import read_ppm, write_ppm

WHITE = 255


@dataclass
class ImagePyramid:
    """An aligned (low, high) resolution pair of RGB images."""

    level_l: np.ndarray  # (H, W, 3) uint8
    level_h: np.ndarray  # (mag*H, mag*W, 3) uint8
    mag_ratio: int

    def validate(self) -> "ImagePyramid":
        if self.mag_ratio < 2:
            raise IntegrityError(f"mag_ratio must be >= 2, got {self.mag_ratio}")
        hl, wl = self.level_l.shape[:2]
        hh, wh = self.level_h.shape[:2]
        if (hh, wh) != (hl * self.mag_ratio, wl * self.mag_ratio):
            raise IntegrityError(
                f"level_h {self.level_h.shape[:2]} is not mag_ratio={self.mag_ratio} "
                f"times level_l {self.level_l.shape[:2]}"
            )
        return self


@dataclass
class PatchPair:
    """A context patch and its aligned magnified detail region.

    Pixel (r, c) of context_img covers the block
    [g*r, g*(r+1)) x [g*c, g*(c+1)) of detail_img, g = detail/context side.
    """

    context_img: np.ndarray
    detail_img: np.ndarray
    origin: tuple[int, int]  # (row, col) in level-L pixels

    @property
    def mag_ratio(self) -> int:
        return self.detail_img.shape[0] // self.context_img.shape[0]


def block_sum(img: np.ndarray, g: int) -> np.ndarray:
    """Per-channel sums over non-overlapping g x g blocks (int64)."""
    h, w = img.shape[:2]
    if h % g or w % g:
        raise IntegrityError(f"image {img.shape} not divisible into {g}x{g} blocks")
    view = img.reshape(h // g, g, w // g, g, -1).astype(np.int64)
    return view.sum(axis=(1, 3))


def box_downsample(img: np.ndarray, g: int) -> np.ndarray:
    """Round-half-up average over g x g blocks; uint8 in, uint8 out."""
    g2 = g * g
    return ((block_sum(img, g) + g2 // 2) // g2).astype(np.uint8)


def block_mean(img: np.ndarray, g: int) -> np.ndarray:
    """Float block average; exact when block sums are multiples of g*g.

    float32/float64 inputs keep their dtype (uint8 block sums fit exactly
    in either); everything else is computed in float64.
    """
    dtype = img.dtype if img.dtype in (np.float32, np.float64) else np.float64
    x = np.ascontiguousarray(img, dtype=dtype)
    h, w = x.shape[:2]
    c = 1 if x.ndim == 2 else x.shape[2]
    t = x.reshape(h // g, g, w * c).sum(axis=1)
    t = t.reshape(h // g, w // g, g, c).sum(axis=2)
    out = t / (g * g)
    return out.reshape(h // g, w // g) if img.ndim == 2 else out


def pad_to_multiple(img: np.ndarray, multiple: int, value: int = WHITE) -> np.ndarray:
    h, w = img.shape[:2]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return img
    return np.pad(img, ((0, ph), (0, pw), (0, 0)), constant_values=value)


def tile(pyramid: ImagePyramid, patch_px: int) -> list[PatchPair]:
    """Non-overlapping grid of aligned pairs covering the whole slide.

    Both levels are padded with background white to a multiple of the patch
    size, which keeps the alignment invariant on the padded border.
    """
    pyramid.validate()
    g = pyramid.mag_ratio
    ctx = pad_to_multiple(pyramid.level_l, patch_px)
    det = pad_to_multiple(pyramid.level_h, patch_px * g)
    pairs = []
    for r in range(0, ctx.shape[0], patch_px):
        for c in range(0, ctx.shape[1], patch_px):
            pairs.append(PatchPair(
                context_img=ctx[r:r + patch_px, c:c + patch_px].copy(),
                detail_img=det[g * r:g * (r + patch_px), g * c:g * (c + patch_px)].copy(),
                origin=(r, c),
            ))
    return pairs


def tissue_filter(pair: PatchPair, threshold: float = 0.15) -> bool:
    """Keep a pair when at least 10% of its context pixels are tissue.

    A pixel counts as background only when it is both bright and nearly
    gray: value >= 0.85 and saturation <= threshold. Dark pixels are always
    tissue regardless of saturation.
    """
    img = pair.context_img.astype(np.float64) / 255.0
    mx = img.max(axis=-1)
    mn = img.min(axis=-1)
    sat = np.where(mx > 0, (mx - mn) / np.maximum(mx, 1e-12), 0.0)
    background = (mx >= 0.85) & (sat <= threshold)
    return float(1.0 - background.mean()) >= 0.1


# ---------------------------------------------------------------------------
# synthetic slides


def _force_block_divisible(img: np.ndarray, g: int) -> np.ndarray:
    """Dither pixel values so every g x g block sum is a multiple of g*g.

    Subtracts 1 from the first (sum mod g*g) pixels of each block in
    row-major order; callers keep pixel values >= g*g so this cannot
    underflow. At most a 1/255 intensity change per pixel.
    """
    h, w, c = img.shape
    g2 = g * g
    work = img.astype(np.int16).reshape(h // g, g, w // g, g, c)
    sums = work.sum(axis=(1, 3))
    rem = (sums % g2).astype(np.int16)  # (hb, wb, c)
    flat_pos = (np.arange(g2).reshape(g, g))[None, :, None, :, None]
    work -= (flat_pos < rem[:, None, :, None, :]).astype(np.int16)
    return work.reshape(h, w, c).astype(np.uint8)


_BG = np.array([242.0, 229.0, 238.0])
_CELL = np.array([98.0, 72.0, 122.0])
_SPECKLE_AMPLITUDE = 40.0
_CELLS_PER_TILE = 90          # per 256 x 256 high-resolution area
# every slide is shifted to these channel means so that overlap differences
# between scattered and clustered layouts leave no first-order intensity cue
_TARGET_MEAN = _BG - 22.0


def gen_synthetic(seed: int, label: int, size_l: int = 192, mag_ratio: int = 4) -> ImagePyramid:
    """Procedural two-level slide with class signal at both scales.

    Class 1 slides place cells in clusters (visible at the low level) and
    render them elongated with a 2-pixel speckle texture (visible only at
    the high level; the speckle and the eccentricity both preserve the mean
    intensity, so first-order pixel statistics do not separate the classes).
    """
    if label not in (0, 1):
        raise IntegrityError(f"label must be 0 or 1, got {label}")
    rng = np.random.default_rng([seed, label, size_l, mag_ratio])
    side = size_l * mag_ratio

    img = np.empty((side, side, 3), dtype=np.float64)
    img[...] = _BG
    # gentle low-frequency luminance wash, identical in law for both classes
    coarse = 16
    wash = rng.normal(0.0, 2.5, size=(side // coarse, side // coarse))
    img += np.kron(wash, np.ones((coarse, coarse)))[:, :, None]

    n_cells = int(round(_CELLS_PER_TILE * (side / 256.0) ** 2))
    if label == 0:
        centers = rng.uniform(8.0, side - 8.0, size=(n_cells, 2))
    else:
        n_clusters = max(1, n_cells // 18)
        hubs = rng.uniform(24.0, side - 24.0, size=(n_clusters, 2))
        pick = rng.integers(0, n_clusters, size=n_cells)
        centers = hubs[pick] + rng.normal(0.0, 22.0, size=(n_cells, 2))
        centers = np.clip(centers, 8.0, side - 8.0)

    radii = rng.uniform(5.5, 8.5, size=n_cells)
    thetas = rng.uniform(0.0, np.pi, size=n_cells)
    if label == 0:
        eccs = rng.uniform(1.0, 1.15, size=n_cells)
    else:
        eccs = rng.uniform(1.7, 2.1, size=n_cells)
    tints = rng.normal(0.0, 6.0, size=n_cells)

    # high-frequency interior texture for class 1; zero-mean over 4x4 blocks
    yy = np.arange(side)
    checker = (((yy[:, None] // 2) + (yy[None, :] // 2)) % 2) * 2.0 - 1.0

    for i in range(n_cells):
        cy, cx = centers[i]
        a = radii[i] * eccs[i]
        b = radii[i] / eccs[i]
        reach = int(np.ceil(max(a, b))) + 2
        y0, y1 = max(0, int(cy) - reach), min(side, int(cy) + reach + 1)
        x0, x1 = max(0, int(cx) - reach), min(side, int(cx) + reach + 1)
        if y0 >= y1 or x0 >= x1:
            continue
        ys = np.arange(y0, y1, dtype=np.float64) - cy
        xs = np.arange(x0, x1, dtype=np.float64) - cx
        ct, st = np.cos(thetas[i]), np.sin(thetas[i])
        u = ys[:, None] * ct + xs[None, :] * st
        v = -ys[:, None] * st + xs[None, :] * ct
        quad = (u / a) ** 2 + (v / b) ** 2
        alpha = np.clip(1.5 * (1.0 - quad), 0.0, 1.0)
        color = _CELL + tints[i]
        fill = np.broadcast_to(color, alpha.shape + (3,)).copy()
        if label == 1:
            fill += (_SPECKLE_AMPLITUDE * checker[y0:y1, x0:x1])[:, :, None]
        patch = img[y0:y1, x0:x1]
        img[y0:y1, x0:x1] = patch * (1.0 - alpha[:, :, None]) + fill * alpha[:, :, None]

    # normalize to fixed channel means, then apply slide-level stain jitter
    # drawn from the same law for both classes
    img += _TARGET_MEAN - img.mean(axis=(0, 1)) + rng.normal(0.0, 1.0, size=3)
    level_h = np.clip(np.rint(img), 16, 250).astype(np.uint8)
    level_h = _force_block_divisible(level_h, mag_ratio)
    level_l = (block_sum(level_h, mag_ratio) // (mag_ratio * mag_ratio)).astype(np.uint8)
    return ImagePyramid(level_l=level_l, level_h=level_h, mag_ratio=mag_ratio).validate()


# ---------------------------------------------------------------------------
# manifest


@dataclass(frozen=True)
class ManifestEntry:
    pair_id: str
    context_path: str
    detail_path: str
    row: int
    col: int
    slide_id: str
    label: int


def write_manifest(path: str | Path, entries: list[ManifestEntry]) -> None:
    lines = [
        f"{e.pair_id}\t{e.context_path}\t{e.detail_path}\t{e.row}\t{e.col}"
        f"\t{e.slide_id}\t{e.label}"
        for e in entries
    ]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path: str | Path) -> list[ManifestEntry]:
    entries = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 7:
            raise IntegrityError(f"{path}:{lineno}: expected 7 tab-separated fields")
        entries.append(ManifestEntry(
            pair_id=parts[0], context_path=parts[1], detail_path=parts[2],
            row=int(parts[3]), col=int(parts[4]), slide_id=parts[5],
            label=int(parts[6]),
        ))
    return entries


def load_pair(manifest_path: str | Path, entry: ManifestEntry) -> PatchPair:
    base = Path(manifest_path).parent
    ctx = read_ppm(base / entry.context_path)
    det = read_ppm(base / entry.detail_path)
    if det.shape[0] % ctx.shape[0] or det.shape[0] // ctx.shape[0] < 2:
        raise IntegrityError(
            f"{entry.pair_id}: detail {det.shape[:2]} does not magnify "
            f"context {ctx.shape[:2]}"
        )
    return PatchPair(context_img=ctx, detail_img=det, origin=(entry.row, entry.col))


def generate_dataset(
    out_dir: str | Path,
    count_per_class: int,
    seed: int,
    size_l: int = 192,
    mag_ratio: int = 4,
    patch_px: int = 64,
) -> Path:
    """Render `count_per_class` slides per class, tile them, and write the
    pair images plus a manifest. Returns the manifest path."""
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    entries: list[ManifestEntry] = []
    for label in (0, 1):
        for k in range(count_per_class):
            slide_id = f"slide{label}_{k:04d}"
            pyr = gen_synthetic(seed + k, label, size_l=size_l, mag_ratio=mag_ratio)
            for pair in tile(pyr, patch_px):
                r, c = pair.origin
                pair_id = f"{slide_id}_r{r:04d}_c{c:04d}"
                ctx_rel = f"images/{pair_id}_ctx.ppm"
                det_rel = f"images/{pair_id}_det.ppm"
                write_ppm(out_dir / ctx_rel, pair.context_img)
                write_ppm(out_dir / det_rel, pair.detail_img)
                entries.append(ManifestEntry(
                    pair_id=pair_id, context_path=ctx_rel, detail_path=det_rel,
                    row=r, col=c, slide_id=slide_id, label=label,
                ))
    manifest = out_dir / "manifest.tsv"
    write_manifest(manifest, entries)
    return manifest
