"""Synthetic multilabel shape dataset with exact region maps, plus corruptions.

Shapes are rasterized with integer arithmetic only: a pixel belongs to a shape
iff an integer predicate on its doubled, box-centred coordinates holds, so the
region maps are bit-identical on every platform.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import netpbm

# Predicates over doubled box coordinates u, v in [-(s-1), s-1] (pixel centres
# of an s x s box). Order fixes the class ids.
SHAPES = {
    "circle": lambda u, v, s: u * u + v * v <= s * s,
    "square": lambda u, v, s: 5 * np.maximum(abs(u), abs(v)) <= 4 * s,
    "triangle": lambda u, v, s: 2 * abs(u) <= v + s,
    "bar": lambda u, v, s: 3 * abs(v) <= s,
    "diamond": lambda u, v, s: abs(u) + abs(v) <= s,
    "cross": lambda u, v, s: (3 * abs(u) <= s) | (3 * abs(v) <= s),
    "ring": lambda u, v, s: (u * u + v * v <= s * s) & (4 * (u * u + v * v) >= s * s),
    "frame": lambda u, v, s: 2 * np.maximum(abs(u), abs(v)) >= s,
    "vbar": lambda u, v, s: 3 * abs(u) <= s,
    "saltire": lambda u, v, s: 3 * abs(abs(u) - abs(v)) <= s,
    "triangle_down": lambda u, v, s: 2 * abs(u) <= s - v,
    "half_disc": lambda u, v, s: (u * u + v * v <= s * s) & (v <= 0),
    "ellipse_h": lambda u, v, s: u * u + 4 * v * v <= s * s,
    "ellipse_v": lambda u, v, s: 4 * u * u + v * v <= s * s,
    "ell": lambda u, v, s: (3 * u <= -s) | (3 * v >= s),
    "tee": lambda u, v, s: (3 * v <= -s) | (3 * abs(u) <= s),
    "hourglass": lambda u, v, s: abs(u) <= abs(v),
    "octagon": lambda u, v, s: 2 * (abs(u) + abs(v)) <= 3 * s,
    "trapezoid": lambda u, v, s: 4 * abs(u) <= v + 3 * s,
    "crescent": lambda u, v, s: (u * u + v * v <= s * s) & (16 * ((u - s // 2) ** 2 + v * v) > 9 * s * s),
}
SHAPE_NAMES = tuple(SHAPES)
BACKGROUNDS = ("flat", "stripes", "checker", "noise", "gradient")

# vivid object colours; backgrounds are drawn from a muted range so objects stay visible
_OBJECT_COLORS = np.array([
    [230, 25, 25], [25, 200, 40], [40, 70, 240], [245, 220, 20], [220, 30, 220],
    [20, 220, 230], [250, 140, 10], [250, 250, 250],
])


@dataclass(frozen=True)
class SyntheticSpec:
    canvas: int = 64
    n_classes: int = 8
    backgrounds: tuple[str, ...] = BACKGROUNDS
    min_objects: int = 1
    max_objects: int = 3
    # defaults: 16 px objects on an 8 px lattice, i.e. aligned to 2 x 2 patches of size 8
    min_size: int = 16
    max_size: int = 16
    # probability that the background class is tied to the first object's class
    bg_correlation: float = 0.5
    # object box corners lie on multiples of this many pixels
    position_step: int = 8

    def __post_init__(self):
        object.__setattr__(self, "backgrounds", tuple(self.backgrounds))
        if not 1 <= self.n_classes <= len(SHAPES):
            raise ValueError(f"n_classes must be in [1, {len(SHAPES)}]")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("object count range must satisfy 1 <= min <= max")
        if self.max_objects > self.n_classes:
            raise ValueError("objects per image carry distinct classes; max_objects > n_classes")
        if not 2 <= self.min_size <= self.max_size <= self.canvas:
            raise ValueError("object sizes must fit the canvas")
        unknown = set(self.backgrounds) - set(BACKGROUNDS)
        if unknown or not self.backgrounds:
            raise ValueError(f"unknown background classes {sorted(unknown)}")
        if not 0.0 <= self.bg_correlation <= 1.0:
            raise ValueError("bg_correlation must be in [0, 1]")
        if self.position_step < 1:
            raise ValueError("position_step must be >= 1")

    @property
    def class_names(self) -> tuple[str, ...]:
        return SHAPE_NAMES[: self.n_classes]

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "SyntheticSpec":
        return cls(**d)


@dataclass
class Sample:
    image: np.ndarray        # H x W x 3 uint8
    region_map: np.ndarray   # H x W uint8, 0 = background, k = k-th object
    region_classes: list[int]
    background: str
    bg_seed: int
    seed: int = 0
    boxes: list = field(default_factory=list)  # (top, left, size) per region

    @property
    def labels(self) -> list[int]:
        return sorted(set(self.region_classes))


@dataclass(frozen=True)
class Record:
    image: str
    mask: str
    labels: list[int]
    seed: int
    regions: list[int] = field(default_factory=list)
    background: str = ""
    bg_seed: int = 0


def sample_seed(seed: int, index: int) -> int:
    """Independent per-sample stream derived from ``(seed, index)``."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1, np.uint64)[0])


def shape_mask(kind: str, size: int) -> np.ndarray:
    idx = np.arange(size, dtype=np.int64)
    uv = 2 * idx + 1 - size
    v, u = np.meshgrid(uv, uv, indexing="ij")
    return np.asarray(SHAPES[kind](u, v, size), dtype=bool)


def _muted_color(rng) -> np.ndarray:
    return rng.integers(50, 170, size=3)


def render_background(kind: str, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """Integer-only procedural texture, ``h x w x 3`` uint8."""
    c0, c1 = _muted_color(rng), _muted_color(rng)
    yy, xx = np.mgrid[0:h, 0:w]
    if kind == "flat":
        t = np.zeros((h, w), dtype=np.int64)
        den = 1
    elif kind == "stripes":
        period = int(rng.integers(4, 13))
        orient = int(rng.integers(0, 3))
        coord = (yy, xx, yy + xx)[orient]
        t = ((coord // (period // 2 + 1)) % 2).astype(np.int64)
        den = 1
    elif kind == "checker":
        cell = int(rng.integers(4, 13))
        t = ((yy // cell + xx // cell) % 2).astype(np.int64)
        den = 1
    elif kind == "noise":
        lattice = int(rng.integers(4, 9))
        step_y, step_x = -(-h // (lattice - 1)), -(-w // (lattice - 1))
        grid = rng.integers(0, 256, size=(lattice + 1, lattice + 1))
        gy, gx = yy // step_y, xx // step_x
        fy, fx = yy - gy * step_y, xx - gx * step_x
        top = grid[gy, gx] * (step_x - fx) + grid[gy, gx + 1] * fx
        bot = grid[gy + 1, gx] * (step_x - fx) + grid[gy + 1, gx + 1] * fx
        t = top * (step_y - fy) + bot * fy
        den = 255 * step_x * step_y
    elif kind == "gradient":
        a, b = (int(x) for x in rng.integers(-4, 5, size=2))
        if a == 0 and b == 0:
            a = 1
        t = a * yy + b * xx
        t = t - t.min()
        den = max(int(t.max()), 1)
    else:
        raise ValueError(f"unknown background class {kind!r}")
    img = (c0[None, None, :] * (den - t[..., None]) + c1[None, None, :] * t[..., None]) // den
    return img.astype(np.uint8)


def _background_for(spec: SyntheticSpec, first_class: int, rng) -> str:
    if spec.bg_correlation > 0 and rng.random() < spec.bg_correlation:
        return spec.backgrounds[first_class % len(spec.backgrounds)]
    return spec.backgrounds[int(rng.integers(len(spec.backgrounds)))]


def generate_sample(spec: SyntheticSpec, seed: int) -> Sample:
    rng = np.random.default_rng(seed)
    n = spec.canvas
    count = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    classes = [int(c) for c in rng.choice(spec.n_classes, size=count, replace=False)]
    while True:
        boxes = _place(classes, spec, rng)
        if boxes is not None or len(classes) == 1:
            break
        classes = classes[:-1]
    if boxes is None:
        s = int(rng.integers(spec.min_size, spec.max_size + 1))
        step = spec.position_step
        boxes = [(*(step * int(v) for v in rng.integers(0, (n - s) // step + 1, size=2)), s)]

    bg_seed = int(rng.integers(0, 2**63 - 1))
    background = _background_for(spec, classes[0], rng)
    image = render_background(background, n, n, np.random.default_rng(bg_seed))
    region_map = np.zeros((n, n), dtype=np.uint8)
    for rid, (cls, (y, x, s)) in enumerate(zip(classes, boxes), start=1):
        m = shape_mask(SHAPE_NAMES[cls], s)
        color = np.clip(_OBJECT_COLORS[rng.integers(len(_OBJECT_COLORS))] + rng.integers(-20, 21, size=3), 0, 255)
        region_map[y:y + s, x:x + s][m] = rid
        image[y:y + s, x:x + s][m] = color
    return Sample(image, region_map, classes, background, bg_seed, seed, boxes)


def _place(classes, spec: SyntheticSpec, rng, attempts: int = 100):
    """Rejection-sample non-overlapping boxes, or None after ``attempts`` tries."""
    n = spec.canvas
    for _ in range(attempts):
        boxes = []
        for _cls in classes:
            s = int(rng.integers(spec.min_size, spec.max_size + 1))
            step = spec.position_step
            y, x = (step * int(v) for v in rng.integers(0, (n - s) // step + 1, size=2))
            boxes.append((y, x, s))
        if all(_disjoint(a, b) for i, a in enumerate(boxes) for b in boxes[i + 1:]):
            return boxes
    return None


def _disjoint(a, b) -> bool:
    (ya, xa, sa), (yb, xb, sb) = a, b
    return ya + sa <= yb or yb + sb <= ya or xa + sa <= xb or xb + sb <= xa


def generate_dataset(spec: SyntheticSpec, n: int, seed: int, out_dir) -> list[Record]:
    """Write ``n`` samples plus ``manifest.jsonl`` and ``dataset.json`` under ``out_dir``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return write_dataset(spec, (generate_sample(spec, sample_seed(seed, i)) for i in range(n)), seed, out_dir)


def write_dataset(spec: SyntheticSpec, samples, seed: int, out_dir) -> list[Record]:
    """Write ``samples`` in the on-disk dataset layout."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    records = []
    for i, sample in enumerate(samples):
        img_rel, mask_rel = f"images/{i:05d}.ppm", f"masks/{i:05d}.pgm"
        netpbm.write_ppm(out / img_rel, sample.image)
        netpbm.write_pgm(out / mask_rel, sample.region_map)
        records.append(Record(img_rel, mask_rel, sample.labels, sample.seed, sample.region_classes,
                              sample.background, sample.bg_seed))
    lines = "".join(json.dumps(asdict(r), sort_keys=True) + "\n" for r in records)
    _write_text(out / "manifest.jsonl", lines)
    meta = {"spec": spec.to_json(), "n": len(records), "seed": seed, "class_names": list(spec.class_names)}
    _write_text(out / "dataset.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return records


def four_patch_example() -> tuple[SyntheticSpec, Sample]:
    """16x16 image, 2x2 patches of 8: one object over the top two patches,
    a second over the bottom-left patch, background bottom-right."""
    spec = SyntheticSpec(canvas=16, n_classes=2, max_objects=2, min_size=8, max_size=16)
    image = np.full((16, 16, 3), 100, dtype=np.uint8)
    region_map = np.zeros((16, 16), dtype=np.uint8)
    region_map[2:6, 2:14] = 1
    region_map[10:14, 2:6] = 2
    image[region_map == 1] = (230, 25, 25)
    image[region_map == 2] = (40, 70, 240)
    return spec, Sample(image, region_map, [0, 1], "flat", 0, 0, [(2, 2, 12), (10, 2, 4)])


def synthesize(spec: SyntheticSpec, n: int, seed: int) -> Dataset:
    """In-memory equivalent of ``generate_dataset`` followed by ``load_dataset``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    samples, records = [], []
    for i in range(n):
        s = sample_seed(seed, i)
        sample = generate_sample(spec, s)
        samples.append(sample)
        records.append(Record(f"images/{i:05d}.ppm", f"masks/{i:05d}.pgm", sample.labels, s,
                              sample.region_classes, sample.background, sample.bg_seed))
    labels = np.zeros((n, spec.n_classes))
    for i, r in enumerate(records):
        labels[i, r.labels] = 1
    return Dataset(np.stack([x.image for x in samples]), np.stack([x.region_map for x in samples]),
                   labels, records, spec)


def _write_text(path: Path, text: str):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def read_manifest(data_dir) -> list[Record]:
    path = Path(data_dir) / "manifest.jsonl"
    with open(path) as fh:
        return [Record(**json.loads(line)) for line in fh if line.strip()]


@dataclass
class Dataset:
    images: np.ndarray      # n x H x W x 3 uint8
    region_maps: np.ndarray  # n x H x W uint8
    labels: np.ndarray      # n x C multi-hot
    records: list[Record]
    spec: SyntheticSpec

    def __len__(self):
        return len(self.records)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.intp)
        return Dataset(self.images[idx], self.region_maps[idx], self.labels[idx],
                       [self.records[i] for i in idx], self.spec)

    def sample(self, i: int) -> Sample:
        r = self.records[i]
        return Sample(self.images[i].copy(), self.region_maps[i].copy(), list(r.regions), r.background, r.bg_seed, r.seed)


def load_dataset(data_dir) -> Dataset:
    data_dir = Path(data_dir)
    meta = json.loads((data_dir / "dataset.json").read_text())
    spec = SyntheticSpec.from_json(meta["spec"])
    records = read_manifest(data_dir)
    images = np.stack([netpbm.read_ppm(data_dir / r.image) for r in records])
    maps = np.stack([netpbm.read_pgm(data_dir / r.mask) for r in records])
    labels = np.zeros((len(records), spec.n_classes))
    for i, r in enumerate(records):
        if any(not 0 <= c < spec.n_classes for c in r.labels):
            raise ValueError(f"record {i} has labels outside [0, {spec.n_classes})")
        labels[i, r.labels] = 1
    return Dataset(images, maps, labels, records, spec)


# ----------------------------------------------------------------------------
# corruptions


def shuffle_patches(image: np.ndarray, grid_n: int, seed=None, permutation=None, k: int | None = None):
    """Cut ``image`` into ``grid_n x grid_n`` blocks and rearrange them.

    ``permutation[j]`` is the source block placed at position ``j``. Without an
    explicit permutation, ``k`` blocks (all by default) are chosen uniformly and
    permuted uniformly among themselves; the others stay in place.
    Returns ``(shuffled, permutation)``.
    """
    image = np.asarray(image)
    h, w = image.shape[:2]
    if grid_n < 1 or h % grid_n or w % grid_n:
        raise ValueError(f"grid {grid_n} does not divide image {h}x{w}")
    nb = grid_n * grid_n
    if permutation is None:
        rng = np.random.default_rng(seed)
        k = nb if k is None else int(k)
        if not 0 <= k <= nb:
            raise ValueError(f"k must be in [0, {nb}]")
        permutation = np.arange(nb)
        chosen = np.sort(rng.choice(nb, size=k, replace=False))
        permutation[chosen] = chosen[rng.permutation(k)]
    permutation = np.asarray(permutation, dtype=np.intp)
    if sorted(permutation.tolist()) != list(range(nb)):
        raise ValueError("not a permutation of the blocks")
    bh, bw = h // grid_n, w // grid_n
    rest = image.shape[2:]
    blocks = image.reshape(grid_n, bh, grid_n, bw, *rest).swapaxes(1, 2).reshape(nb, bh, bw, *rest)
    out = blocks[permutation].reshape(grid_n, grid_n, bh, bw, *rest).swapaxes(1, 2).reshape(image.shape)
    return out, permutation


def inverse_permutation(permutation) -> np.ndarray:
    return np.argsort(np.asarray(permutation))


def swap_background(sample: Sample, background: str, seed: int) -> Sample:
    """Re-render every background pixel with a fresh texture; object pixels untouched."""
    if background not in BACKGROUNDS:
        raise ValueError(f"unknown background class {background!r}")
    h, w = sample.region_map.shape
    texture = render_background(background, h, w, np.random.default_rng(seed))
    bg = sample.region_map == 0
    image = sample.image.copy()
    image[bg] = texture[bg]
    return Sample(image, sample.region_map.copy(), list(sample.region_classes), background, seed, sample.seed,
                  list(sample.boxes))
