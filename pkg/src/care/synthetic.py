"""Procedural multi-band rasters with building-density ground truth.

Each tile is a random union of axis-aligned rectangles (the building mask).
Density is the fraction of built pixels in the 7x7 window around each pixel.
Four input bands carry that signal with varying clarity:

    0  building reflectance, 0.8 * mask + noise
    1  vegetation texture on unbuilt ground + noise
    2  region-wide nuisance level + noise
    3  blurred density + noise whose scale grows with density
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from care.errors import ConfigError, FormatError

TILE_MAGIC = b"CAREtile"
TILE_VERSION = 1
MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1
DENSITY_WINDOW = 7
NUM_CHANNELS = 4
SPLITS = ("train", "val", "test")


@dataclass
class RegionSpec:
    name: str
    building_rate: float
    size_range: Tuple[int, int] = (3, 8)
    noise_sigma: float = 0.1
    density_bias: int = 0
    nuisance_level: float = 0.5

    def validate(self, height: int = 32, width: int = 32) -> "RegionSpec":
        lo, hi = self.size_range
        if self.building_rate < 0:
            raise ConfigError(f"region {self.name}: building_rate must be >= 0")
        if not 1 <= lo <= hi <= min(height, width):
            raise ConfigError(f"region {self.name}: size_range {self.size_range} outside tile extents {height}x{width}")
        if self.noise_sigma < 0:
            raise ConfigError(f"region {self.name}: noise_sigma must be >= 0")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "RegionSpec":
        d = dict(d)
        if "size_range" in d:
            d["size_range"] = tuple(d["size_range"])
        return cls(**d)


# name, building_rate, size_range, noise_sigma, density_bias, nuisance_level
_DEFAULT_REGIONS = [
    ("arid_sparse", 0.8, (3, 6), 0.05, 0, 0.9),
    ("coastal_town", 4.0, (3, 7), 0.10, 0, 0.3),
    ("dense_core", 10.0, (4, 10), 0.15, 2, 0.6),
    ("farmland", 1.0, (2, 5), 0.08, 0, 0.4),
    ("forest_edge", 1.5, (3, 6), 0.12, 0, 0.2),
    ("highland", 0.5, (2, 4), 0.06, 0, 0.7),
    ("industrial", 3.0, (6, 14), 0.10, 0, 0.8),
    ("mega_city", 14.0, (3, 9), 0.20, 3, 0.5),
    ("river_delta", 5.0, (2, 6), 0.18, 0, 0.1),
    ("savanna", 1.2, (2, 5), 0.07, 0, 0.85),
    ("suburb_grid", 8.0, (3, 5), 0.10, 1, 0.45),
    ("tundra", 0.3, (3, 6), 0.04, 0, 0.95),
    ("village_cluster", 6.0, (2, 4), 0.12, 0, 0.35),
    ("wetland", 2.0, (3, 7), 0.22, 0, 0.15),
]


def default_regions() -> List[RegionSpec]:
    return [RegionSpec(n, r, s, sig, b, nl) for n, r, s, sig, b, nl in _DEFAULT_REGIONS]


@dataclass
class RasterTile:
    input: np.ndarray  # C x H x W float32
    y_star: np.ndarray  # H x W float32 in [0, 1]
    region: str
    tile_id: int


def _stable_key(text: str) -> int:
    return zlib.crc32(text.encode("utf-8"))


def tile_rng(global_seed: int, region: str, tile_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([global_seed, _stable_key(region), tile_id]))


def sample_rectangles(rng: np.random.Generator, k: int, size_range: Tuple[int, int], height: int, width: int):
    """Draw ``k`` rectangles ``(top, left, h, w)`` that fit inside the tile."""
    lo, hi = size_range
    rects = []
    for _ in range(k):
        h = int(rng.integers(lo, hi + 1))
        w = int(rng.integers(lo, hi + 1))
        top = int(rng.integers(0, height - h + 1))
        left = int(rng.integers(0, width - w + 1))
        rects.append((top, left, h, w))
    return rects


def building_mask(rects, height: int, width: int) -> np.ndarray:
    mask = np.zeros((height, width), dtype=np.uint8)
    for top, left, h, w in rects:
        mask[top : top + h, left : left + w] = 1
    return mask


def density_from_mask(mask: np.ndarray, window: int = DENSITY_WINDOW) -> np.ndarray:
    """Fraction of built pixels in the ``window`` x ``window`` neighbourhood (zero outside the tile)."""
    counts = ndimage.correlate(mask.astype(np.int32), np.ones((window, window), dtype=np.int32), mode="constant", cval=0)
    return np.clip(counts / float(window * window), 0.0, 1.0).astype(np.float32)


def generate_tile(region: RegionSpec, tile_id: int, global_seed: int, height: int = 32, width: int = 32) -> RasterTile:
    region.validate(height, width)
    rng = tile_rng(global_seed, region.name, tile_id)
    k = max(int(rng.poisson(region.building_rate)) + region.density_bias, 0)
    rects = sample_rectangles(rng, k, region.size_range, height, width)
    mask = building_mask(rects, height, width)
    y_star = density_from_mask(mask)
    b = mask.astype(np.float64)
    sigma = region.noise_sigma
    noise = lambda: rng.standard_normal((height, width))  # noqa: E731

    texture = ndimage.gaussian_filter(rng.standard_normal((height, width)), sigma=2.0)
    span = texture.max() - texture.min()
    texture = (texture - texture.min()) / span if span > 0 else np.zeros_like(texture)

    ch0 = 0.8 * b + sigma * noise()
    ch1 = 0.6 * (1.0 - b) * texture + sigma * noise()
    ch2 = region.nuisance_level + sigma * noise()
    ch3 = ndimage.gaussian_filter(y_star.astype(np.float64), sigma=1.0) + sigma * (0.5 + y_star) * noise()
    inputs = np.stack([ch0, ch1, ch2, ch3]).astype(np.float32)
    return RasterTile(inputs, y_star, region.name, tile_id)


@dataclass
class DatasetManifest:
    global_seed: int = 0
    tiles_per_region: int = 100
    height: int = 32
    width: int = 32
    channels: int = NUM_CHANNELS
    split_fractions: Dict[str, float] = field(default_factory=lambda: {"train": 0.7, "val": 0.15, "test": 0.15})
    regions: List[RegionSpec] = field(default_factory=default_regions)
    splits: Dict[str, List[int]] = field(default_factory=dict)
    channel_means: List[float] = field(default_factory=list)
    channel_stds: List[float] = field(default_factory=list)

    def validate(self) -> "DatasetManifest":
        if self.tiles_per_region < 1:
            raise ConfigError(f"tiles_per_region must be >= 1, got {self.tiles_per_region}")
        if self.channels != NUM_CHANNELS:
            raise ConfigError(f"channels: the generator produces {NUM_CHANNELS} bands, got {self.channels}")
        if set(self.split_fractions) != set(SPLITS):
            raise ConfigError(f"split_fractions must have keys {SPLITS}, got {sorted(self.split_fractions)}")
        if any(v < 0 for v in self.split_fractions.values()) or abs(sum(self.split_fractions.values()) - 1.0) > 1e-9:
            raise ConfigError(f"split_fractions must be non-negative and sum to 1, got {self.split_fractions}")
        if not self.regions:
            raise ConfigError("regions: at least one region is required")
        names = [r.name for r in self.regions]
        if len(set(names)) != len(names):
            raise ConfigError(f"regions: duplicate region names in {names}")
        for r in self.regions:
            r.validate(self.height, self.width)
        return self

    def region_tile_ids(self, region_index: int) -> List[int]:
        start = region_index * self.tiles_per_region
        return list(range(start, start + self.tiles_per_region))

    def region_of(self, tile_id: int) -> str:
        return self.regions[tile_id // self.tiles_per_region].name

    def to_dict(self) -> dict:
        d = asdict(self)
        d["regions"] = [{**asdict(r), "size_range": list(r.size_range)} for r in self.regions]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        d = dict(d)
        d.pop("format_version", None)
        d.pop("tiles", None)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown dataset keys: {sorted(unknown)}")
        if "regions" in d:
            d["regions"] = [RegionSpec.from_dict(r) for r in d["regions"]]
        if "splits" in d:
            d["splits"] = {k: [int(i) for i in v] for k, v in d["splits"].items()}
        return cls(**d)


def assign_splits(manifest: DatasetManifest) -> Dict[str, List[int]]:
    """Seeded per-region partition of tile ids into train/val/test."""
    out: Dict[str, List[int]] = {s: [] for s in SPLITS}
    n = manifest.tiles_per_region
    n_train = int(round(manifest.split_fractions["train"] * n))
    n_val = min(int(round(manifest.split_fractions["val"] * n)), n - n_train)
    for r, region in enumerate(manifest.regions):
        ids = np.array(manifest.region_tile_ids(r))
        rng = np.random.default_rng(np.random.SeedSequence([manifest.global_seed, _stable_key(region.name), 1]))
        perm = ids[rng.permutation(n)]
        out["train"] += sorted(int(i) for i in perm[:n_train])
        out["val"] += sorted(int(i) for i in perm[n_train : n_train + n_val])
        out["test"] += sorted(int(i) for i in perm[n_train + n_val :])
    return out


def channel_stats(tiles: Sequence[RasterTile]) -> Tuple[List[float], List[float]]:
    stack = np.stack([t.input for t in tiles]).astype(np.float64)
    means = stack.mean(axis=(0, 2, 3))
    stds = stack.std(axis=(0, 2, 3))
    stds = np.where(stds > 0, stds, 1.0)
    return [float(m) for m in means], [float(s) for s in stds]


class Dataset:
    """Tiles keyed by id plus the manifest that describes them."""

    def __init__(self, manifest: DatasetManifest, tiles: Dict[int, RasterTile]):
        self.manifest = manifest
        self.tiles = tiles

    def __len__(self) -> int:
        return len(self.tiles)

    def split_ids(self, split: str) -> List[int]:
        if split not in self.manifest.splits:
            raise ConfigError(f"unknown split {split!r}")
        return list(self.manifest.splits[split])

    @property
    def normalization(self) -> dict:
        return {"means": list(self.manifest.channel_means), "stds": list(self.manifest.channel_stds)}

    def arrays(self, ids: Sequence[int], normalization: Optional[dict] = None) -> Tuple[np.ndarray, np.ndarray]:
        """Stacked, channel-normalized inputs (N x C x H x W) and targets (N x H x W)."""
        norm = normalization or self.normalization
        means = np.asarray(norm["means"], dtype=np.float32)[:, None, None]
        stds = np.asarray(norm["stds"], dtype=np.float32)[:, None, None]
        x = np.stack([(self.tiles[i].input - means) / stds for i in ids]).astype(np.float32)
        y = np.stack([self.tiles[i].y_star for i in ids]).astype(np.float32)
        return x, y


def make_dataset(manifest: Optional[DatasetManifest] = None) -> Dataset:
    """Generate every tile, assign splits and compute train-split channel statistics."""
    manifest = manifest or DatasetManifest()
    manifest.validate()
    tiles = {}
    for r, region in enumerate(manifest.regions):
        for tid in manifest.region_tile_ids(r):
            tiles[tid] = generate_tile(region, tid, manifest.global_seed, manifest.height, manifest.width)
    manifest.splits = assign_splits(manifest)
    if not manifest.splits["train"]:
        raise ConfigError("split_fractions: train split is empty")
    manifest.channel_means, manifest.channel_stds = channel_stats([tiles[i] for i in manifest.splits["train"]])
    return Dataset(manifest, tiles)


def sample_nshot(manifest: DatasetManifest, n: int, seed: int) -> List[int]:
    """``n`` distinct train-split tile ids from every region, region order, ids ascending."""
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    train = set(manifest.splits.get("train", []))
    out: List[int] = []
    for r, region in enumerate(manifest.regions):
        pool = [i for i in manifest.region_tile_ids(r) if i in train]
        if n > len(pool):
            raise ConfigError(f"region {region.name}: n={n} exceeds its {len(pool)} training tiles")
        rng = np.random.default_rng(np.random.SeedSequence([seed, _stable_key(region.name)]))
        picked = rng.choice(len(pool), size=n, replace=False)
        out += sorted(pool[i] for i in picked)
    return out


# file format ---------------------------------------------------------------

def tile_filename(tile_id: int) -> str:
    return f"tile_{tile_id:06d}.bin"


def tile_bytes(tile: RasterTile) -> bytes:
    C, H, W = tile.input.shape
    name = tile.region.encode("utf-8")
    return b"".join(
        [
            TILE_MAGIC,
            struct.pack("<IIIII", TILE_VERSION, C, H, W, len(name)),
            name,
            np.asarray(tile.input, dtype="<f4").tobytes(order="C"),
            np.asarray(tile.y_star, dtype="<f4").tobytes(order="C"),
        ]
    )


def parse_tile(data: bytes, tile_id: int, source: str = "<bytes>") -> RasterTile:
    def need(offset: int, n: int, what: str) -> None:
        if len(data) < offset + n:
            raise FormatError(f"{source}: truncated at offset {len(data)} while reading {what} (needs {offset + n} bytes)")

    need(0, 8, "magic")
    if data[:8] != TILE_MAGIC:
        raise FormatError(f"{source}: bad magic {data[:8]!r} at offset 0")
    need(8, 20, "header")
    version, C, H, W, nlen = struct.unpack_from("<IIIII", data, 8)
    if version != TILE_VERSION:
        raise FormatError(f"{source}: unsupported tile version {version} at offset 8")
    off = 28
    need(off, nlen, "region name")
    region = data[off : off + nlen].decode("utf-8")
    off += nlen
    payload = 4 * (C * H * W + H * W)
    need(off, payload, "float planes")
    if len(data) != off + payload:
        raise FormatError(f"{source}: unexpected trailing data at offset {off + payload}")
    planes = np.frombuffer(data, dtype="<f4", offset=off, count=C * H * W + H * W).astype(np.float32)
    return RasterTile(planes[: C * H * W].reshape(C, H, W), planes[C * H * W :].reshape(H, W), region, tile_id)


def write_dataset(dataset: Dataset, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for tid in sorted(dataset.tiles):
        fname = tile_filename(tid)
        (directory / fname).write_bytes(tile_bytes(dataset.tiles[tid]))
        entries.append({"id": tid, "region": dataset.tiles[tid].region, "file": fname})
    doc = {"format_version": MANIFEST_VERSION, **dataset.manifest.to_dict(), "tiles": entries}
    tmp = directory / (MANIFEST_NAME + ".tmp")
    tmp.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    os.replace(tmp, directory / MANIFEST_NAME)


def read_dataset(directory) -> Dataset:
    """Load tiles listed by the manifest; files not listed there are ignored."""
    directory = Path(directory)
    mpath = directory / MANIFEST_NAME
    if not mpath.is_file():
        raise FileNotFoundError(f"no {MANIFEST_NAME} in {directory}")
    try:
        doc = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{mpath}: invalid JSON: {exc}") from None
    if doc.get("format_version") != MANIFEST_VERSION:
        raise FormatError(f"{mpath}: unsupported manifest version {doc.get('format_version')!r}")
    entries = doc.get("tiles", [])
    manifest = DatasetManifest.from_dict(doc)
    tiles = {}
    for entry in entries:
        path = directory / entry["file"]
        try:
            data = path.read_bytes()
        except FileNotFoundError:
            raise FormatError(f"{path}: listed in manifest but missing") from None
        tile = parse_tile(data, int(entry["id"]), str(path))
        if tile.region != entry["region"]:
            raise FormatError(f"{path}: region {tile.region!r} does not match manifest {entry['region']!r}")
        tiles[tile.tile_id] = tile
    return Dataset(manifest, tiles)
