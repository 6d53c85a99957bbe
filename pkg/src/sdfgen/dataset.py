"""Procedural furniture-like shapes with labels, keywords, silhouettes, and partial variants.

A ShapeSpec (category + attributes + seed) maps deterministically to a CSG
tree; rasterized samples carry everything the conditioning pipeline needs:
keyword lists, a fixed frontal silhouette, and a masked partial grid.
"""

from __future__ import annotations

import base64
import json
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import geometry as geo
from .geometry import SdfNode, TsdfGrid

CATEGORIES = ("chair", "table", "sofa", "lamp")

SHAPE_KEYWORDS = (
    "chair", "table", "sofa", "lamp",
    "round", "square", "l-shaped",
    "three-legged", "four-legged",
    "tall", "short",
    "wide", "narrow",
    "with-arms", "armless",
    "high-back", "low-back", "backless",
)
COLOR_KEYWORDS = ("red", "green", "blue", "yellow", "white", "gray")
KEYWORD_VOCAB = SHAPE_KEYWORDS + COLOR_KEYWORDS  # stays well under 64 entries

PARTIAL_MODES = ("bottom-half", "top-half", "octant")

# Numeric attribute ranges (inclusive) and categorical choices per category.
ATTRIBUTE_SCHEMA: dict[str, dict[str, tuple]] = {
    "chair": {
        "legs": (3, 4),
        "seat_shape": ("round", "square"),
        "seat_size": (0.28, 0.42),
        "seat_height": (0.25, 0.45),
        "back_height": (0.0, 0.55),
    },
    "table": {
        "legs": (3, 4),
        "top_shape": ("round", "square", "l-shaped"),
        "top_size": (0.38, 0.6),
        "height": (0.4, 0.72),
    },
    "sofa": {
        "width": (0.5, 0.8),
        "back_height": (0.25, 0.5),
        "arms": (0, 1),
    },
    "lamp": {
        "pole_height": (0.7, 1.1),
        "base_radius": (0.18, 0.3),
        "shade_radius": (0.14, 0.28),
    },
}

_FLOOR = -0.55  # shapes stand on this plane so bottom-half partials keep the legs


@dataclass(frozen=True)
class ShapeSpec:
    category: str
    attributes: tuple  # sorted (name, value) pairs; tuple keeps the spec hashable
    seed: int

    def attr(self, name):
        return dict(self.attributes)[name]


def _check_attributes(category: str, attrs: dict) -> None:
    schema = ATTRIBUTE_SCHEMA.get(category)
    if schema is None:
        raise ValueError(f"unknown category {category!r}")
    for name, rng in schema.items():
        if name not in attrs:
            raise ValueError(f"{category}: missing attribute {name!r}")
        v = attrs[name]
        if all(isinstance(r, str) for r in rng):
            if v not in rng:
                raise ValueError(f"{category}.{name}: {v!r} not in {rng}")
        elif not (rng[0] <= v <= rng[1]):
            raise ValueError(f"{category}.{name}: {v} outside [{rng[0]}, {rng[1]}]")
    extra = set(attrs) - set(schema)
    if extra:
        raise ValueError(f"{category}: unexpected attributes {sorted(extra)}")


def sample_spec(category: str, seed: int) -> ShapeSpec:
    """Draw attributes uniformly from the schema; deterministic per seed."""
    rng = np.random.default_rng(seed)
    attrs = {}
    for name, spec in sorted(ATTRIBUTE_SCHEMA[category].items()):
        if all(isinstance(r, str) for r in spec):
            attrs[name] = spec[rng.integers(len(spec))]
        elif all(isinstance(r, int) for r in spec):
            attrs[name] = int(rng.integers(spec[0], spec[1] + 1))
        else:
            attrs[name] = float(rng.uniform(spec[0], spec[1]))
    return ShapeSpec(category, tuple(sorted(attrs.items())), seed)


def _legs(count: int, radius_at: float, leg_r: float, height: float) -> list[SdfNode]:
    if count == 4:
        spots = [(radius_at, radius_at), (-radius_at, radius_at),
                 (radius_at, -radius_at), (-radius_at, -radius_at)]
    else:
        ang = np.pi / 2 + np.arange(3) * 2 * np.pi / 3
        spots = [(radius_at * np.cos(a), radius_at * np.sin(a)) for a in ang]
    leg = geo.Cylinder(leg_r, height / 2)
    return [geo.translate(leg, (x, y, _FLOOR + height / 2)) for x, y in spots]


def generate_shape(spec: ShapeSpec) -> SdfNode:
    """CSG composite realizing the attributes; at most 12 primitives."""
    attrs = dict(spec.attributes)
    _check_attributes(spec.category, attrs)
    parts: list[SdfNode] = []
    if spec.category == "chair":
        s = attrs["seat_size"]
        sh = attrs["seat_height"]
        seat_z = _FLOOR + sh
        if attrs["seat_shape"] == "round":
            seat = geo.Cylinder(s, 0.07)
        else:
            seat = geo.Box((s, s, 0.07))
        parts.append(geo.translate(seat, (0, 0, seat_z)))
        parts += _legs(attrs["legs"], s - 0.12, 0.12, sh)
        bh = attrs["back_height"]
        if bh > 0.0:
            back = geo.Box((s, 0.07, bh / 2))
            parts.append(geo.translate(back, (0, -(s - 0.07), seat_z + bh / 2)))
    elif spec.category == "table":
        s = attrs["top_size"]
        h = attrs["height"]
        top_z = _FLOOR + h
        if attrs["top_shape"] == "round":
            parts.append(geo.translate(geo.Cylinder(s, 0.07), (0, 0, top_z)))
        elif attrs["top_shape"] == "square":
            parts.append(geo.translate(geo.Box((s, s, 0.07)), (0, 0, top_z)))
        else:  # l-shaped: full slab plus a wing, leaving one quadrant open
            parts.append(geo.translate(geo.Box((s, s / 2, 0.07)), (0, -s / 2, top_z)))
            parts.append(geo.translate(geo.Box((s / 2, s / 2, 0.07)), (-s / 2, s / 2, top_z)))
        parts += _legs(attrs["legs"], s - 0.14, 0.12, h)
    elif spec.category == "sofa":
        w = attrs["width"]
        bh = attrs["back_height"]
        base = geo.Box((w, 0.3, 0.14))
        parts.append(geo.translate(base, (0, 0, _FLOOR + 0.14)))
        back = geo.Box((w, 0.07, bh / 2))
        parts.append(geo.translate(back, (0, -0.23, _FLOOR + 0.28 + bh / 2)))
        if attrs["arms"]:
            for sx in (-1.0, 1.0):
                arm = geo.Box((0.07, 0.3, 0.13))
                parts.append(geo.translate(arm, (sx * (w - 0.07), 0, _FLOOR + 0.28 + 0.08)))
    elif spec.category == "lamp":
        ph = attrs["pole_height"]
        parts.append(geo.translate(geo.Cylinder(attrs["base_radius"], 0.07), (0, 0, _FLOOR + 0.07)))
        parts.append(geo.translate(geo.Cylinder(0.11, ph / 2), (0, 0, _FLOOR + ph / 2)))
        shade = geo.Cylinder(attrs["shade_radius"], 0.11)
        parts.append(geo.translate(shade, (0, 0, _FLOOR + ph + 0.08)))
    assert len(parts) <= 12
    return geo.union(*parts)


def keywords_for(spec: ShapeSpec) -> list[str]:
    """Deterministic keyword list derived from the attributes."""
    attrs = dict(spec.attributes)
    words = [spec.category]
    if spec.category == "chair":
        words.append(attrs["seat_shape"])
        words.append("four-legged" if attrs["legs"] == 4 else "three-legged")
        bh = attrs["back_height"]
        words.append("backless" if bh == 0.0 else ("high-back" if bh > 0.3 else "low-back"))
        words.append("tall" if attrs["seat_height"] > 0.35 else "short")
    elif spec.category == "table":
        words.append(attrs["top_shape"])
        words.append("four-legged" if attrs["legs"] == 4 else "three-legged")
        words.append("tall" if attrs["height"] > 0.56 else "short")
    elif spec.category == "sofa":
        words.append("wide" if attrs["width"] > 0.65 else "narrow")
        words.append("with-arms" if attrs["arms"] else "armless")
        words.append("high-back" if attrs["back_height"] > 0.37 else "low-back")
    elif spec.category == "lamp":
        words.append("tall" if attrs["pole_height"] > 0.9 else "short")
        words.append("wide" if attrs["shade_radius"] > 0.21 else "narrow")
    return words


# ---------------------------------------------------------------------------
# Partial observations
# ---------------------------------------------------------------------------

def make_partial(grid: TsdfGrid, mode: str, seed: int = 0) -> tuple[TsdfGrid, np.ndarray]:
    """Restrict a grid to an observed region; unobserved voxels read +truncation.

    Returns (observed grid, mask) with mask 1 exactly on observed voxels.
    Octant mode keeps one seeded octant observed.
    """
    if mode not in PARTIAL_MODES:
        raise ValueError(f"unknown partial mode {mode!r}")
    d = grid.resolution
    mask = np.zeros((d, d, d), dtype=np.uint8)
    if mode == "bottom-half":
        mask[:, :, : d // 2] = 1
    elif mode == "top-half":
        mask[:, :, d // 2:] = 1
    else:
        rng = np.random.default_rng(seed)
        ox, oy, oz = (int(v) for v in rng.integers(0, 2, size=3))
        h = d // 2
        mask[ox * h:(ox + 1) * h, oy * h:(oy + 1) * h, oz * h:(oz + 1) * h] = 1
    observed = np.where(mask == 1, grid.values, grid.truncation)
    return TsdfGrid(d, grid.truncation, observed), mask


def render_silhouette(grid: TsdfGrid, size: int = 64) -> np.ndarray:
    """Frontal orthographic occupancy: pixel on iff some voxel along its y-ray is inside."""
    d = grid.resolution
    occupied = np.any(grid.values < 0, axis=1)  # (x, z) footprint
    px = (np.arange(size) + 0.5) * d / size
    idx = np.minimum(px.astype(np.int64), d - 1)
    return occupied[np.ix_(idx, idx)]


# ---------------------------------------------------------------------------
# Samples and datasets
# ---------------------------------------------------------------------------

@dataclass
class DatasetSample:
    spec: ShapeSpec
    grid: TsdfGrid
    keywords: list[str]
    silhouette: np.ndarray          # (64, 64) bool
    partial: TsdfGrid
    mask: np.ndarray                # (D, D, D) uint8, 1 on observed voxels
    partial_mode: str
    partial_seed: int

    @property
    def category(self) -> str:
        return self.spec.category


def build_sample(spec: ShapeSpec, resolution: int, truncation: float,
                 partial_mode: str = "bottom-half", partial_seed: int = 0) -> DatasetSample:
    tree = generate_shape(spec)
    grid = geo.rasterize_tsdf(tree, resolution, truncation)
    partial, mask = make_partial(grid, partial_mode, partial_seed)
    return DatasetSample(
        spec=spec,
        grid=grid,
        keywords=keywords_for(spec),
        silhouette=render_silhouette(grid),
        partial=partial,
        mask=mask,
        partial_mode=partial_mode,
        partial_seed=partial_seed,
    )


@dataclass
class Dataset:
    resolution: int
    truncation: float
    samples: list[DatasetSample]
    train_ids: list[int]
    test_ids: list[int]
    vocab: tuple = KEYWORD_VOCAB
    categories: tuple = CATEGORIES

    @property
    def train(self) -> list[DatasetSample]:
        return [self.samples[i] for i in self.train_ids]

    @property
    def test(self) -> list[DatasetSample]:
        return [self.samples[i] for i in self.test_ids]

    def keyword_ids(self, words: list[str]) -> list[int]:
        return [self.vocab.index(w) for w in words]


def build_dataset(n: int, seed: int, split_ratio: float = 0.8,
                  resolution: int = 16, truncation: float = geo.DEFAULT_TRUNCATION) -> Dataset:
    """Uniform-category procedural dataset with a disjoint deterministic split."""
    if n < 10:
        raise ValueError("need at least 10 samples")
    if not (0.0 < split_ratio < 1.0):
        raise ValueError("split ratio must be in (0, 1)")
    seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n + 1)]
    rng = np.random.default_rng(seeds[-1])
    samples = []
    for i in range(n):
        category = CATEGORIES[i % len(CATEGORIES)]
        spec = sample_spec(category, seeds[i])
        mode = PARTIAL_MODES[int(rng.integers(len(PARTIAL_MODES)))]
        samples.append(build_sample(spec, resolution, truncation,
                                    partial_mode=mode, partial_seed=seeds[i] ^ 0x5EED))
    order = rng.permutation(n)
    n_train = int(round(n * split_ratio))
    return Dataset(resolution, truncation, samples,
                   train_ids=[int(i) for i in order[:n_train]],
                   test_ids=[int(i) for i in order[n_train:]])


# ---------------------------------------------------------------------------
# Serialization: one TSDF file + one JSON sidecar per sample, plus a manifest
# ---------------------------------------------------------------------------

def _encode_silhouette(sil: np.ndarray) -> str:
    return base64.b64encode(np.packbits(sil.astype(np.uint8)).tobytes()).decode("ascii")


def _decode_silhouette(s: str, size: int = 64) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(base64.b64decode(s), dtype=np.uint8))
    return bits[: size * size].reshape(size, size).astype(bool)


def save_dataset(ds: Dataset, root) -> None:
    os.makedirs(root, exist_ok=True)
    for i, s in enumerate(ds.samples):
        geo.save_tsdf(s.grid, os.path.join(root, f"sample_{i:05d}.tsdf"))
        meta = {
            "category": s.spec.category,
            "attributes": list(s.spec.attributes),
            "spec_seed": s.spec.seed,
            "keywords": s.keywords,
            "silhouette": _encode_silhouette(s.silhouette),
            "partial_mode": s.partial_mode,
            "partial_seed": s.partial_seed,
        }
        with open(os.path.join(root, f"sample_{i:05d}.json"), "w") as f:
            json.dump(meta, f, indent=0, sort_keys=True)
    manifest = {
        "resolution": ds.resolution,
        "truncation": ds.truncation,
        "n_samples": len(ds.samples),
        "train": ds.train_ids,
        "test": ds.test_ids,
        "categories": list(ds.categories),
        "keyword_vocab": list(ds.vocab),
    }
    with open(os.path.join(root, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)


def load_dataset(root) -> Dataset:
    with open(os.path.join(root, "manifest.json")) as f:
        manifest = json.load(f)
    samples = []
    for i in range(manifest["n_samples"]):
        grid = geo.load_tsdf(os.path.join(root, f"sample_{i:05d}.tsdf"))
        with open(os.path.join(root, f"sample_{i:05d}.json")) as f:
            meta = json.load(f)
        spec = ShapeSpec(meta["category"],
                         tuple((k, v) for k, v in meta["attributes"]),
                         meta["spec_seed"])
        partial, mask = make_partial(grid, meta["partial_mode"], meta["partial_seed"])
        samples.append(DatasetSample(
            spec=spec,
            grid=grid,
            keywords=list(meta["keywords"]),
            silhouette=_decode_silhouette(meta["silhouette"]),
            partial=partial,
            mask=mask,
            partial_mode=meta["partial_mode"],
            partial_seed=meta["partial_seed"],
        ))
    return Dataset(
        resolution=manifest["resolution"],
        truncation=manifest["truncation"],
        samples=samples,
        train_ids=list(manifest["train"]),
        test_ids=list(manifest["test"]),
        vocab=tuple(manifest["keyword_vocab"]),
        categories=tuple(manifest["categories"]),
    )
