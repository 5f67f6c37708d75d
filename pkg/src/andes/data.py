"""Multi-spectral tile data model: tiling, quantization, featureless filtering,
manifests, band statistics, and a deterministic synthetic scene generator.

Rasters are band-sequential: an array of shape (bands, height, width) stored
C-contiguous is exactly the on-disk layout of the MST1 tile format.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError

# Canonical 8-band slot semantics, recorded for file headers and sanity checks.
BAND_NAMES = ("coastal", "blue", "green", "yellow", "red", "red_edge", "nir1", "nir2")

MST1_MAGIC = b"MST1"
_DTYPE_U8 = 0
_DTYPE_F32 = 1


@dataclass(frozen=True)
class BandImage:
    """An N-band raster with 8-bit samples, shape (bands, height, width)."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.uint8)
        if arr.ndim != 3:
            raise ValueError(f"expected (bands, height, width) array, got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ValueError(f"all dimensions must be >= 1, got shape {arr.shape}")
        object.__setattr__(self, "data", arr)

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class RawScene:
    """Pre-quantization raster with 32-bit float samples, shape (bands, height, width)."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.ndim != 3:
            raise ValueError(f"expected (bands, height, width) array, got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ValueError(f"all dimensions must be >= 1, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("scene contains non-finite samples")
        object.__setattr__(self, "data", arr)

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass
class ManifestEntry:
    tile_path: str
    label: int | None = None
    mask_path: str | None = None


@dataclass
class DatasetManifest:
    """Index of tiles (paths relative to `root`) with optional labels and masks."""

    entries: list[ManifestEntry]
    bands: int
    tile_size: int
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        for e in self.entries:
            if e.label is not None and e.label < 0:
                raise ValueError(f"negative label {e.label} for {e.tile_path}")

    def __len__(self) -> int:
        return len(self.entries)

    def tile_path(self, i: int) -> Path:
        return self.root / self.entries[i].tile_path

    def mask_path(self, i: int) -> Path | None:
        mp = self.entries[i].mask_path
        return None if mp is None else self.root / mp

    def labels(self) -> np.ndarray:
        labs = [e.label for e in self.entries]
        if any(l is None for l in labs):
            raise DataError("manifest has unlabeled entries")
        return np.asarray(labs, dtype=np.int64)

    def ids(self) -> list[str]:
        return [Path(e.tile_path).stem for e in self.entries]


# ---------------------------------------------------------------------------
# MST1 binary tile format
# ---------------------------------------------------------------------------


def write_mst(path: Path | str, image: BandImage | RawScene) -> None:
    """Write a raster in MST1 layout: magic, LE u32 w/h/bands, dtype tag, payload."""
    path = Path(path)
    tag = _DTYPE_U8 if isinstance(image, BandImage) else _DTYPE_F32
    header = (
        MST1_MAGIC
        + np.asarray([image.width, image.height, image.bands], dtype="<u4").tobytes()
        + bytes([tag, 0, 0, 0])
    )
    payload = np.ascontiguousarray(image.data).astype(
        "<u1" if tag == _DTYPE_U8 else "<f4", copy=False
    )
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload.tobytes())


def read_mst(path: Path | str) -> BandImage | RawScene:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read tile file {path}: {exc}") from exc
    if len(blob) < 20 or blob[:4] != MST1_MAGIC:
        raise DataError(f"bad magic in tile file {path}")
    width, height, bands = (int(x) for x in np.frombuffer(blob[4:16], dtype="<u4"))
    tag = blob[16]
    if tag not in (_DTYPE_U8, _DTYPE_F32):
        raise DataError(f"unknown dtype tag {tag} in tile file {path}")
    itemsize = 1 if tag == _DTYPE_U8 else 4
    expected = 20 + width * height * bands * itemsize
    if len(blob) != expected:
        raise DataError(f"truncated tile file {path}: {len(blob)} bytes, expected {expected}")
    flat = np.frombuffer(blob[20:], dtype="<u1" if tag == _DTYPE_U8 else "<f4")
    arr = flat.reshape(bands, height, width)
    if tag == _DTYPE_U8:
        return BandImage(arr.copy())
    return RawScene(arr.astype(np.float32))


# ---------------------------------------------------------------------------
# Manifest text format
# ---------------------------------------------------------------------------


def save_manifest(manifest: DatasetManifest, path: Path | str) -> None:
    path = Path(path)
    lines = [f"#bands={manifest.bands} tile={manifest.tile_size}"]
    for e in manifest.entries:
        label = "-" if e.label is None else str(e.label)
        mask = "-" if e.mask_path is None else e.mask_path
        lines.append(f"{e.tile_path}\t{label}\t{mask}")
    path.write_text("\n".join(lines) + "\n")


def load_manifest(path: Path | str) -> DatasetManifest:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    lines = text.splitlines()
    if not lines or not lines[0].startswith("#bands="):
        raise DataError(f"manifest {path} missing '#bands=<B> tile=<S>' header")
    try:
        head = dict(part.split("=", 1) for part in lines[0].lstrip("#").split())
        bands = int(head["bands"])
        tile_size = int(head["tile"])
    except (ValueError, KeyError) as exc:
        raise DataError(f"malformed manifest header in {path}: {lines[0]!r}") from exc
    entries = []
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataError(f"{path}:{ln}: expected 3 tab-separated fields, got {len(parts)}")
        tile, label, mask = parts
        entries.append(
            ManifestEntry(
                tile_path=tile,
                label=None if label == "-" else int(label),
                mask_path=None if mask == "-" else mask,
            )
        )
    return DatasetManifest(entries=entries, bands=bands, tile_size=tile_size, root=path.parent)


# ---------------------------------------------------------------------------
# Core operations
# ---------------------------------------------------------------------------


def tile_scene(scene: BandImage, tile_size: int) -> list[BandImage]:
    """Cut a scene into non-overlapping tiles in row-major scan order.

    Right/bottom remainders are discarded. A tile_size larger than either
    scene dimension is an error rather than an empty result.
    """
    if tile_size < 1:
        raise ValueError(f"tile_size must be >= 1, got {tile_size}")
    ny = scene.height // tile_size
    nx = scene.width // tile_size
    if ny == 0 or nx == 0:
        raise ValueError(
            f"tile_size {tile_size} exceeds scene dimensions {scene.width}x{scene.height}"
        )
    tiles = []
    for iy in range(ny):
        for ix in range(nx):
            y0, x0 = iy * tile_size, ix * tile_size
            tiles.append(BandImage(scene.data[:, y0 : y0 + tile_size, x0 : x0 + tile_size].copy()))
    return tiles


def quantize_to_u8(scene: RawScene, lo_pct: float = 2.0, hi_pct: float = 98.0) -> BandImage:
    """Per-band percentile stretch of float samples onto [0, 255].

    [p_lo, p_hi] maps linearly to [0, 255] with clamping outside and
    round-half-up. A band with p_lo == p_hi has no dynamic range and maps to
    constant 0 (a warning is emitted).
    """
    if not (0.0 <= lo_pct < hi_pct <= 100.0):
        raise ValueError(f"need 0 <= lo_pct < hi_pct <= 100, got ({lo_pct}, {hi_pct})")
    out = np.empty(scene.data.shape, dtype=np.uint8)
    for b in range(scene.bands):
        band = scene.data[b].astype(np.float64)
        p_lo, p_hi = np.percentile(band, [lo_pct, hi_pct])
        if p_lo == p_hi:
            warnings.warn(f"band {b} has zero dynamic range; mapped to 0", stacklevel=2)
            out[b] = 0
            continue
        scaled = np.clip((band - p_lo) / (p_hi - p_lo), 0.0, 1.0) * 255.0
        out[b] = np.floor(scaled + 0.5).astype(np.uint8)
    return BandImage(out)


def is_featureless(
    tile: BandImage,
    dark_thresh: int = 5,
    bright_thresh: int = 250,
    frac: float = 0.98,
) -> bool:
    """True when at least `frac` of pixels are entirely dark or entirely bright.

    A pixel counts as dark (bright) when its mean over bands is <= dark_thresh
    (>= bright_thresh). The two fractions are tested separately, not summed.
    """
    if not dark_thresh < bright_thresh:
        raise ValueError(f"need dark_thresh < bright_thresh, got ({dark_thresh}, {bright_thresh})")
    if not 0.0 < frac <= 1.0:
        raise ValueError(f"frac must be in (0, 1], got {frac}")
    pixel_mean = tile.data.astype(np.float64).mean(axis=0)
    dark_frac = float(np.mean(pixel_mean <= dark_thresh))
    bright_frac = float(np.mean(pixel_mean >= bright_thresh))
    return dark_frac >= frac or bright_frac >= frac


@dataclass(frozen=True)
class BandStats:
    """Per-band mean/std over samples rescaled to [0, 1]."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        std = np.asarray(self.std, dtype=np.float64)
        if mean.shape != std.shape or mean.ndim != 1:
            raise ValueError(f"mean/std must be matching 1-D arrays, got {mean.shape}/{std.shape}")
        if np.any(std <= 0):
            raise ValueError("std must be positive for every band")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @property
    def bands(self) -> int:
        return self.mean.shape[0]


STD_FLOOR = 1e-6


def compute_band_stats(manifest: DatasetManifest) -> BandStats:
    """Population mean/std per band over all tiles, computed on sample/255.

    Accumulation is float64 and order-independent at the tile level, so
    parallel manifest scans reduce to the same result. Std is floored at
    STD_FLOOR so downstream normalization never divides by zero.
    """
    if len(manifest) == 0:
        raise ValueError("manifest is empty")
    b = manifest.bands
    total = 0
    s1 = np.zeros(b, dtype=np.float64)
    s2 = np.zeros(b, dtype=np.float64)
    for i in range(len(manifest)):
        tile = read_mst(manifest.tile_path(i))
        if tile.bands != b:
            raise DataError(f"tile {manifest.tile_path(i)} has {tile.bands} bands, expected {b}")
        x = tile.data.astype(np.float64) / 255.0
        total += x.shape[1] * x.shape[2]
        s1 += x.sum(axis=(1, 2))
        s2 += np.square(x).sum(axis=(1, 2))
    mean = s1 / total
    var = np.maximum(s2 / total - mean**2, 0.0)
    std = np.maximum(np.sqrt(var), STD_FLOOR)
    return BandStats(mean=mean, std=std)


# ---------------------------------------------------------------------------
# Synthetic dataset generator
# ---------------------------------------------------------------------------

# Structure families cycled over positive classes: hollow rectangular
# enclosures, filled elliptical blobs, and parallel stripes.
_N_GEOMETRIES = 3


def _upsample_grid(grid: np.ndarray, size: int) -> np.ndarray:
    """Bilinear upsampling of a small square grid to (size, size)."""
    g = grid.shape[0]
    coords = (np.arange(size) + 0.5) * g / size - 0.5
    i0 = np.clip(np.floor(coords).astype(int), 0, g - 1)
    i1 = np.clip(i0 + 1, 0, g - 1)
    t = np.clip(coords - np.floor(coords), 0.0, 1.0)
    rows = grid[i0][:, i1] * (t[None, :]) + grid[i0][:, i0] * (1 - t[None, :])
    rows1 = grid[i1][:, i1] * (t[None, :]) + grid[i1][:, i0] * (1 - t[None, :])
    return rows * (1 - t[:, None]) + rows1 * (t[:, None])


def _draw_rectangles(mask: np.ndarray, rng: np.random.Generator) -> None:
    s = mask.shape[0]
    for _ in range(int(rng.integers(1, 4))):
        w = int(rng.integers(s // 4, (3 * s) // 4))
        h = int(rng.integers(s // 4, (3 * s) // 4))
        y0 = int(rng.integers(0, s - h))
        x0 = int(rng.integers(0, s - w))
        thick = int(rng.integers(2, max(3, s // 24)))
        mask[y0 : y0 + h, x0 : x0 + w] = True
        inner = mask[y0 + thick : y0 + h - thick, x0 + thick : x0 + w - thick]
        if inner.size:
            inner[:] = False


def _draw_blobs(mask: np.ndarray, rng: np.random.Generator) -> None:
    s = mask.shape[0]
    yy, xx = np.mgrid[0:s, 0:s]
    for _ in range(int(rng.integers(2, 6))):
        cy = rng.uniform(0.15 * s, 0.85 * s)
        cx = rng.uniform(0.15 * s, 0.85 * s)
        ry = rng.uniform(0.06 * s, 0.2 * s)
        rx = rng.uniform(0.06 * s, 0.2 * s)
        theta = rng.uniform(0, math.pi)
        dy, dx = yy - cy, xx - cx
        u = dy * math.cos(theta) + dx * math.sin(theta)
        v = -dy * math.sin(theta) + dx * math.cos(theta)
        mask |= (u / ry) ** 2 + (v / rx) ** 2 <= 1.0


def _draw_stripes(mask: np.ndarray, rng: np.random.Generator) -> None:
    s = mask.shape[0]
    yy, xx = np.mgrid[0:s, 0:s]
    theta = rng.uniform(0, math.pi)
    period = rng.uniform(0.12 * s, 0.3 * s)
    duty = rng.uniform(0.2, 0.4)
    phase = rng.uniform(0, period)
    proj = yy * math.cos(theta) + xx * math.sin(theta) + phase
    mask |= (proj % period) < duty * period


_GEOMETRY_FNS = (_draw_rectangles, _draw_blobs, _draw_stripes)


def _class_signatures(rng: np.random.Generator, n_classes: int, bands: int) -> np.ndarray:
    """Per-class spectral reflectance vectors, kept away from the u8 extremes."""
    return rng.uniform(0.35, 0.85, size=(n_classes, bands))


def _render_tile(
    label: int,
    tile_size: int,
    bands: int,
    signatures: np.ndarray,
    bg_profile: np.ndarray,
    rng: np.random.Generator,
) -> tuple[BandImage, BandImage]:
    """Render one tile and its foreground mask.

    The background is a smooth correlated field shared across bands; positive
    classes add geometry with a class spectral signature. A per-tile global
    gain keeps raw intensity statistics overlapping between classes so that
    plain pixel averages are weak class evidence.
    """
    s = tile_size
    low = rng.normal(0.0, 1.0, size=(8, 8))
    field = _upsample_grid(low, s) * 0.08
    gain = rng.uniform(0.75, 1.25)
    img = np.empty((bands, s, s), dtype=np.float64)
    for b in range(bands):
        band_gain = rng.uniform(0.9, 1.1)
        img[b] = (bg_profile[b] + field) * gain * band_gain
    img += rng.normal(0.0, 0.02, size=img.shape)

    mask = np.zeros((s, s), dtype=bool)
    if label > 0:
        _GEOMETRY_FNS[(label - 1) % _N_GEOMETRIES](mask, rng)
        if not mask.any():
            # Geometry draws can degenerate on tiny tiles; guarantee foreground.
            mask[s // 4 : s // 2, s // 4 : s // 2] = True
        sig = signatures[label] * rng.uniform(0.85, 1.15)
        texture = rng.normal(0.0, 0.04, size=(s, s))
        alpha = 0.85
        for b in range(bands):
            fg = np.clip(sig[b] * gain + texture, 0.0, 1.2)
            img[b][mask] = (1 - alpha) * img[b][mask] + alpha * fg[mask]

    tile = BandImage(np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8))
    mask_img = BandImage((mask[None].astype(np.uint8)) * 255)
    return tile, mask_img


def _assign_labels(
    rng: np.random.Generator,
    n_tiles: int,
    n_classes: int,
    imbalance: tuple[int, int] | None,
) -> np.ndarray:
    if imbalance is not None:
        if n_classes != 2:
            raise ValueError("imbalance ratio only applies to binary datasets")
        pos, neg = imbalance
        n_pos = (n_tiles * pos) // (pos + neg)
        labels = np.zeros(n_tiles, dtype=np.int64)
        labels[:n_pos] = 1
    else:
        labels = np.arange(n_tiles, dtype=np.int64) % n_classes
    rng.shuffle(labels)
    return labels


def synth_dataset(
    out_dir: Path | str,
    seed: int,
    n_tiles: int,
    n_classes: int,
    tile_size: int,
    bands: int = 8,
    imbalance: tuple[int, int] | None = None,
) -> DatasetManifest:
    """Deterministically generate labeled 8-bit tiles with foreground masks.

    Class 0 is background-only; classes >= 1 draw geometric structures
    (rectangular enclosures, blobs, stripes — cycled) with class-dependent
    spectral signatures. The same seed reproduces tile bytes exactly.
    """
    if n_classes < 2:
        raise ValueError(f"n_classes must be >= 2, got {n_classes}")
    if bands < 1:
        raise ValueError(f"bands must be >= 1, got {bands}")
    out_dir = Path(out_dir)
    (out_dir / "tiles").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)

    seeds = np.random.SeedSequence(seed).spawn(n_tiles + 1)
    meta_rng = np.random.Generator(np.random.PCG64(seeds[0]))
    signatures = _class_signatures(meta_rng, n_classes, bands)
    bg_profile = meta_rng.uniform(0.25, 0.55, size=bands)
    labels = _assign_labels(meta_rng, n_tiles, n_classes, imbalance)

    entries = []
    for i in range(n_tiles):
        rng = np.random.Generator(np.random.PCG64(seeds[i + 1]))
        tile, mask = _render_tile(int(labels[i]), tile_size, bands, signatures, bg_profile, rng)
        tile_rel = f"tiles/tile_{i:05d}.mst"
        mask_rel = f"masks/mask_{i:05d}.mst"
        write_mst(out_dir / tile_rel, tile)
        write_mst(out_dir / mask_rel, mask)
        if labels[i] > 0:
            assert mask.data.any(), "positive tile rendered with empty mask"
        entries.append(ManifestEntry(tile_path=tile_rel, label=int(labels[i]), mask_path=mask_rel))

    return DatasetManifest(entries=entries, bands=bands, tile_size=tile_size, root=out_dir)


def load_mask(path: Path | str) -> np.ndarray:
    """Read a stored mask tile as a boolean (H, W) array."""
    img = read_mst(path)
    if img.bands != 1:
        raise DataError(f"mask {path} has {img.bands} bands, expected 1")
    return img.data[0] > 127


class TileCache:
    """Indexed access to a manifest's tiles with in-memory caching."""

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        self._tiles: dict[int, BandImage] = {}
        self._masks: dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.manifest)

    def __getitem__(self, i: int) -> BandImage:
        if i not in self._tiles:
            tile = read_mst(self.manifest.tile_path(i))
            if not isinstance(tile, BandImage):
                raise DataError(f"tile {self.manifest.tile_path(i)} is not 8-bit")
            self._tiles[i] = tile
        return self._tiles[i]

    def mask(self, i: int) -> np.ndarray:
        if i not in self._masks:
            path = self.manifest.mask_path(i)
            if path is None:
                raise DataError(f"entry {i} has no mask")
            self._masks[i] = load_mask(path)
        return self._masks[i]
