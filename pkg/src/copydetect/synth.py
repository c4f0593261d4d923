"""Toy scenes, edited copies and directed hard-negative pairs.

Images are ``size x size`` float64 grids in [0, 1] (64x64 by default), stored
on disk as binary PGM (P5, maxval 255). Generated pixels are quantized to
multiples of 1/255 so the in-memory dataset equals what is read back from disk.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import rng as _rng
from .core import CopyDetectError

IMAGE_SIZE = 64
# Crop ladder used for self-supervised (reference, copy) pairs: 0.8**k.
CROP_SCHEDULE = (1.0, 0.8, 0.64, 0.512, 0.41)


class InvalidScale(CopyDetectError, ValueError):
    pass


class ConfigInvalid(CopyDetectError, ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(eq=False)
class ToyImage:
    id: int
    pixels: np.ndarray

    @property
    def size(self) -> int:
        return self.pixels.shape[0]


def quantize(pixels: np.ndarray) -> np.ndarray:
    return np.round(np.clip(pixels, 0.0, 1.0) * 255.0) / 255.0


# -- scenes ------------------------------------------------------------------

@dataclass
class Shape:
    kind: str  # "rect" or "ellipse"
    cy: float
    cx: float
    ry: float
    rx: float
    intensity: float


@dataclass
class Scene:
    background: float
    shapes: list[Shape]


def random_scene(rng: np.random.Generator, size: int = IMAGE_SIZE) -> Scene:
    n = int(rng.integers(4, 13))
    shapes = []
    for _ in range(n):
        kind = "rect" if rng.random() < 0.5 else "ellipse"
        cy, cx = rng.uniform(0, size, 2)
        ry, rx = rng.uniform(size / 16, size / 4, 2)
        shapes.append(Shape(kind, float(cy), float(cx), float(ry), float(rx), float(rng.uniform(0, 1))))
    return Scene(float(rng.uniform(0.1, 0.9)), shapes)


def _shape_mask(s: Shape, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    dy, dx = (yy - s.cy) / s.ry, (xx - s.cx) / s.rx
    if s.kind == "rect":
        return (np.abs(dy) <= 1) & (np.abs(dx) <= 1)
    return dy * dy + dx * dx <= 1


def render(scene: Scene, size: int = IMAGE_SIZE, texture_rng: np.random.Generator | None = None) -> np.ndarray:
    """Rasterize a scene at pixel centers; later shapes paint over earlier ones.

    With ``texture_rng`` every shape (and the background) is filled with a
    random sinusoidal stripe pattern around its flat intensity instead.
    """
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    img = np.full((size, size), scene.background)
    if texture_rng is not None:
        img = img + _stripes(texture_rng, yy, xx)
    for s in scene.shapes:
        mask = _shape_mask(s, yy, xx)
        fill = np.full((size, size), s.intensity)
        if texture_rng is not None:
            fill = fill + _stripes(texture_rng, yy, xx)
        img = np.where(mask, fill, img)
    return np.clip(img, 0.0, 1.0)


def _stripes(rng: np.random.Generator, yy, xx) -> np.ndarray:
    amp = rng.uniform(0.15, 0.3)
    period = rng.uniform(3.0, 6.0)
    theta = rng.uniform(0, math.pi)
    phase = rng.uniform(0, 2 * math.pi)
    t = xx * math.cos(theta) + yy * math.sin(theta)
    return amp * np.sin(2 * math.pi * t / period + phase)


def gen_image(seed: int, image_id: int, size: int = IMAGE_SIZE) -> ToyImage:
    """Deterministic toy scene: 4-12 rectangles/ellipses over a flat background."""
    scene = random_scene(_rng.stream(seed, "scene", image_id), size)
    return ToyImage(image_id, quantize(render(scene, size)))


# -- crops -------------------------------------------------------------------

def random_anchor(rng: np.random.Generator, scale: float, size: int = IMAGE_SIZE) -> tuple[float, float]:
    slack = size * (1.0 - scale)
    return float(rng.uniform(0, slack)), float(rng.uniform(0, slack))


def _interp_matrix(start: float, scale: float, out: int, n: int) -> np.ndarray:
    # Pixel-center convention: output pixel r samples source coordinate
    # start + (r + 0.5) * scale - 0.5, so crops compose exactly in coordinates.
    # Coordinates are clamped to the grid (edge replication).
    c = np.clip(start + (np.arange(out) + 0.5) * scale - 0.5, 0.0, n - 1)
    i0 = np.floor(c).astype(np.intp)
    frac = c - i0
    i1 = np.minimum(i0 + 1, n - 1)
    M = np.zeros((out, n))
    rows = np.arange(out)
    M[rows, i0] = 1.0 - frac
    M[rows, i1] += frac  # one entry per row, so fancy-index += is safe
    return M


def _resample(pixels: np.ndarray, y0: float, x0: float, scale_y: float, scale_x: float, out: int) -> np.ndarray:
    """Separable bilinear resampling of an axis-aligned window."""
    h, w = pixels.shape
    return _interp_matrix(y0, scale_y, out, h) @ pixels @ _interp_matrix(x0, scale_x, out, w).T


def crop_copy(img: ToyImage, scale: float, anchor: tuple[float, float], seed: int,
              jitter: float = 0.05, new_id: int | None = None) -> ToyImage:
    """Cut a ``scale``-sized window at ``anchor`` (top, left) and resize it back.

    The window is resampled bilinearly to the original size, then a seeded
    brightness shift in ``[-jitter, jitter]`` is added.
    """
    if not 0.2 <= scale <= 1.0:
        raise InvalidScale(f"crop scale {scale} outside [0.2, 1.0]")
    size = img.size
    y0, x0 = anchor
    extent = scale * size
    tol = 1e-9 * size
    if y0 < -tol or x0 < -tol or y0 + extent > size + tol or x0 + extent > size + tol:
        raise InvalidScale(f"crop window at {anchor} with scale {scale} leaves the image")
    out = _resample(img.pixels, y0, x0, scale, scale, size)
    if jitter > 0:
        out = out + _rng.stream(seed, "crop").uniform(-jitter, jitter)
    return ToyImage(img.id if new_id is None else new_id, np.clip(out, 0.0, 1.0))


# -- basic edits -------------------------------------------------------------

def hflip(p: np.ndarray) -> np.ndarray:
    return p[:, ::-1].copy()


def rot90(p: np.ndarray) -> np.ndarray:
    return np.rot90(p).copy()


_BLUR = np.outer([1, 2, 1], [1, 2, 1]) / 16.0


def blur3(p: np.ndarray) -> np.ndarray:
    return ndimage.convolve(p, _BLUR, mode="reflect")


def color_jitter(p: np.ndarray, brightness: float, contrast: float) -> np.ndarray:
    return np.clip((p - 0.5) * contrast + 0.5 + brightness, 0.0, 1.0)


def pad_border(p: np.ndarray, width: int, value: float) -> np.ndarray:
    size = p.shape[0]
    padded = np.pad(p, width, constant_values=value)
    s = padded.shape[0] / size
    return np.clip(_resample(padded, 0.0, 0.0, s, s, size), 0.0, 1.0)


# Applied in this order, each independently with probability 1/2, so the
# identity composition is drawn with probability 1/32.
EDIT_OPS = ("hflip", "rot90", "blur", "color", "pad")
# Edits that keep the scene layout in place; used for benchmark queries.
PHOTOMETRIC_OPS = ("blur", "color", "pad")


def _check_ops(ops) -> tuple[str, ...]:
    ops = tuple(ops)
    bad = [op for op in ops if op not in EDIT_OPS]
    if bad:
        raise ValueError(f"unknown edit ops {bad}; expected a subset of {EDIT_OPS}")
    return ops


def edit_plan(seed: int, ops=EDIT_OPS) -> dict:
    """The seeded composition used by :func:`basic_edit`, restricted to ``ops``."""
    ops = _check_ops(ops)
    r = _rng.stream(seed, "edit")
    plan = {}
    for op in (op for op in EDIT_OPS if op in ops):
        if r.random() < 0.5:
            if op == "color":
                plan[op] = (float(r.uniform(-0.1, 0.1)), float(r.uniform(0.8, 1.2)))
            elif op == "pad":
                plan[op] = (int(r.integers(2, 9)), float(r.uniform(0, 1)))
            else:
                plan[op] = ()
    return plan


def basic_edit(img: ToyImage, seed: int, new_id: int | None = None, ops=EDIT_OPS) -> ToyImage:
    p = img.pixels
    plan = edit_plan(seed, ops)
    if "hflip" in plan:
        p = hflip(p)
    if "rot90" in plan:
        p = rot90(p)
    if "blur" in plan:
        p = blur3(p)
    if "color" in plan:
        p = color_jitter(p, *plan["color"])
    if "pad" in plan:
        p = pad_border(p, *plan["pad"])
    return ToyImage(img.id if new_id is None else new_id, np.clip(p, 0.0, 1.0))


# -- hard negatives ----------------------------------------------------------

@dataclass
class RelationLabel:
    kind: str  # "EditedCopy" or "HardNegativeDirected"
    former: int
    latter: int

    def __post_init__(self):
        if self.kind not in ("EditedCopy", "HardNegativeDirected"):
            raise ValueError(f"unknown relation kind {self.kind!r}")
        if self.former == self.latter:
            raise ValueError("former and latter must differ")


@dataclass(eq=False)
class HardNegativePair:
    reference: ToyImage
    negative: ToyImage
    label: RelationLabel
    variant: str  # "superset" or "similar"
    # (top, left, scale) of each image within the shared scene, in scene
    # pixel units; both are None for the similar-layout variant.
    ref_window: tuple[float, float, float] | None = None
    neg_window: tuple[float, float, float] | None = None


def make_hard_negative(seed: int, ref_id: int, neg_id: int, variant: str = "superset",
                       size: int = IMAGE_SIZE) -> HardNegativePair:
    """Build a (reference, negative) pair where the negative is NOT a copy of the reference.

    ``superset``: the negative is a whole scene and the reference is a crop of
    it, so the reference could be derived from the negative but never the
    other way around. ``similar``: both share one shape layout, the negative
    painted with stripe textures the reference lacks.
    """
    r = _rng.stream(seed, "hardneg", ref_id, neg_id)
    scene = random_scene(r, size)
    label = RelationLabel("HardNegativeDirected", ref_id, neg_id)
    if variant == "superset":
        whole = ToyImage(neg_id, quantize(render(scene, size)))
        scale = float(r.uniform(0.7, 0.9))
        anchor = random_anchor(r, scale, size)
        ref = crop_copy(whole, scale, anchor, seed=0, jitter=0.0, new_id=ref_id)
        ref.pixels = quantize(ref.pixels)
        return HardNegativePair(ref, whole, label, variant, (*anchor, scale), (0.0, 0.0, 1.0))
    if variant == "similar":
        ref = ToyImage(ref_id, quantize(render(scene, size)))
        neg = ToyImage(neg_id, quantize(render(scene, size, texture_rng=r)))
        return HardNegativePair(ref, neg, label, variant)
    raise ValueError(f"unknown hard-negative variant {variant!r}")


# -- datasets ----------------------------------------------------------------

@dataclass
class SynthConfig:
    seed: int = 0
    refs: int = 200
    pos_queries: int = 60
    easy_neg: int = 60
    hard_neg: int = 100
    train_images: int = 200
    train_pairs: int = 100
    similar_fraction: float = 0.5
    pos_scale_min: float = 0.7
    pos_scale_max: float = 0.95
    query_edits: tuple = PHOTOMETRIC_OPS
    size: int = IMAGE_SIZE

    def validate(self) -> None:
        if self.refs < 1:
            raise ConfigInvalid("refs", "refs must be ≥ 1")
        for name in ("pos_queries", "easy_neg", "hard_neg", "train_images", "train_pairs"):
            if getattr(self, name) < 0:
                raise ConfigInvalid(name, f"{name} must be ≥ 0")
        if self.pos_queries > self.refs:
            raise ConfigInvalid("pos_queries", "pos_queries must not exceed refs")
        if self.hard_neg > self.refs:
            raise ConfigInvalid("hard_neg", "hard_neg must not exceed refs (one reference per hard negative)")
        if not 0.0 <= self.similar_fraction <= 1.0:
            raise ConfigInvalid("similar_fraction", "similar_fraction must lie in [0, 1]")
        if not 0.2 <= self.pos_scale_min <= self.pos_scale_max <= 1.0:
            raise ConfigInvalid("pos_scale_min", "need 0.2 ≤ pos_scale_min ≤ pos_scale_max ≤ 1")
        if self.size < 8:
            raise ConfigInvalid("size", "size must be ≥ 8")
        self.query_edits = tuple(self.query_edits)
        if any(op not in EDIT_OPS for op in self.query_edits):
            raise ConfigInvalid("query_edits", f"query_edits must be a subset of {EDIT_OPS}")


@dataclass
class DatasetManifest:
    references: list[int]
    queries: list[int]
    train_images: list[int]
    labels: list[RelationLabel]
    hard_negative_query_ids: list[int]
    seed: int = 0
    image_size: int = IMAGE_SIZE
    config: dict = field(default_factory=dict)

    def gt_pairs(self) -> list[tuple[int, int]]:
        """True (query, reference) pairs of the test split."""
        refs = set(self.references)
        return [(lb.latter, lb.former) for lb in self.labels
                if lb.kind == "EditedCopy" and lb.former in refs]

    def train_hard_negative_pairs(self) -> list[tuple[int, int]]:
        train = set(self.train_images)
        return [(lb.former, lb.latter) for lb in self.labels
                if lb.kind == "HardNegativeDirected" and lb.former in train]

    def base_train_images(self) -> list[int]:
        paired = {i for pair in self.train_hard_negative_pairs() for i in pair}
        return [i for i in self.train_images if i not in paired]

    def to_json(self) -> str:
        d = asdict(self)
        return json.dumps(d, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        d = json.loads(text)
        d["labels"] = [RelationLabel(**lb) for lb in d["labels"]]
        return cls(**d)


@dataclass(eq=False)
class Dataset:
    manifest: DatasetManifest
    images: dict[int, np.ndarray]

    def image(self, image_id: int) -> ToyImage:
        return ToyImage(image_id, self.images[image_id])


def generate_dataset(config: SynthConfig) -> Dataset:
    """Build the test and train splits in memory.

    Id layout: references, then queries (positives, easy negatives, hard
    negatives), then train base images, then train pair members. The
    reference ids backing hard negatives and the references copied by
    positive queries are chosen by seeded permutations.
    """
    config.validate()
    seed, size = config.seed, config.size
    r = _rng.stream(seed, "dataset")
    images: dict[int, np.ndarray] = {}
    labels: list[RelationLabel] = []

    ref_ids = list(range(config.refs))
    next_id = config.refs
    pos_ids = list(range(next_id, next_id + config.pos_queries))
    next_id += config.pos_queries
    easy_ids = list(range(next_id, next_id + config.easy_neg))
    next_id += config.easy_neg
    hard_ids = list(range(next_id, next_id + config.hard_neg))
    next_id += config.hard_neg

    hard_refs = [int(i) for i in r.permutation(config.refs)[: config.hard_neg]]
    n_similar = int(round(config.similar_fraction * config.hard_neg))
    hard_negative_labels = []
    for k, (ref_id, neg_id) in enumerate(zip(hard_refs, hard_ids)):
        variant = "similar" if k < n_similar else "superset"
        pair = make_hard_negative(seed, ref_id, neg_id, variant, size)
        images[ref_id] = pair.reference.pixels
        images[neg_id] = pair.negative.pixels
        hard_negative_labels.append(pair.label)
    for ref_id in ref_ids:
        if ref_id not in images:
            images[ref_id] = gen_image(seed, ref_id, size).pixels

    copied = [int(i) for i in r.permutation(config.refs)[: config.pos_queries]]
    for ref_id, q_id in zip(copied, pos_ids):
        images[q_id] = make_copy_query(seed, ToyImage(ref_id, images[ref_id]), q_id,
                                       config.pos_scale_min, config.pos_scale_max, config.query_edits).pixels
        labels.append(RelationLabel("EditedCopy", ref_id, q_id))
    for q_id in easy_ids:
        images[q_id] = gen_image(seed, q_id, size).pixels
    labels.extend(hard_negative_labels)

    base_ids = list(range(next_id, next_id + config.train_images))
    next_id += config.train_images
    for i in base_ids:
        images[i] = gen_image(seed, i, size).pixels
    pair_ids = []
    for k in range(config.train_pairs):
        former, latter = next_id, next_id + 1
        next_id += 2
        variant = "similar" if _rng.stream(seed, "hardneg", former).random() < config.similar_fraction else "superset"
        pair = make_hard_negative(seed, former, latter, variant, size)
        images[former] = pair.reference.pixels
        images[latter] = pair.negative.pixels
        labels.append(pair.label)
        pair_ids += [former, latter]

    manifest = DatasetManifest(
        references=ref_ids,
        queries=pos_ids + easy_ids + hard_ids,
        train_images=base_ids + pair_ids,
        labels=labels,
        hard_negative_query_ids=hard_ids,
        seed=seed,
        image_size=size,
        config=asdict(config),
    )
    return Dataset(manifest, images)


def edited_copy(img: ToyImage, r: np.random.Generator, scale_min: float, scale_max: float,
                new_id: int | None = None, ops=EDIT_OPS) -> ToyImage:
    """A random crop of ``img`` followed by a basic edit over ``ops``, all drawn from ``r``."""
    scale = float(r.uniform(scale_min, scale_max))
    anchor = random_anchor(r, scale, img.size)
    cropped = crop_copy(img, scale, anchor, seed=int(r.integers(2**63 - 1)), new_id=new_id)
    return basic_edit(cropped, seed=int(r.integers(2**63 - 1)), ops=ops)


def make_copy_query(seed: int, ref: ToyImage, query_id: int, scale_min: float = 0.7,
                    scale_max: float = 0.95, ops=PHOTOMETRIC_OPS) -> ToyImage:
    copy = edited_copy(ref, _rng.stream(seed, "query", query_id), scale_min, scale_max,
                       new_id=query_id, ops=ops)
    return ToyImage(query_id, quantize(copy.pixels))


# -- disk format -------------------------------------------------------------

def write_pgm(path, pixels: np.ndarray) -> None:
    h, w = pixels.shape
    data = np.round(np.clip(pixels, 0, 1) * 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos)
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1
    if tokens[0] != b"P5" or int(tokens[3]) != 255:
        raise ValueError(f"{path}: not an 8-bit P5 PGM")
    w, h = int(tokens[1]), int(tokens[2])
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos)
    return data.reshape(h, w).astype(np.float64) / 255.0


def build_dataset(config: SynthConfig, out_dir) -> DatasetManifest:
    """Generate a dataset and write images, ``manifest.json``, ``gt.csv`` and ``train_pairs.csv``."""
    ds = generate_dataset(config)
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    for image_id in sorted(ds.images):
        write_pgm(out / "images" / f"{image_id}.pgm", ds.images[image_id])
    (out / "manifest.json").write_text(ds.manifest.to_json())
    with open(out / "gt.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["query_id", "ref_id"])
        w.writerows(ds.manifest.gt_pairs())
    with open(out / "train_pairs.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["former_id", "latter_id", "kind"])
        for former, latter in ds.manifest.train_hard_negative_pairs():
            w.writerow([former, latter, "hardneg"])
    return ds.manifest


def load_dataset(data_dir) -> Dataset:
    d = Path(data_dir)
    manifest = DatasetManifest.from_json((d / "manifest.json").read_text())
    ids = manifest.references + manifest.queries + manifest.train_images
    images = {i: read_pgm(d / "images" / f"{i}.pgm") for i in ids}
    return Dataset(manifest, images)
