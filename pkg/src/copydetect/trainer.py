"""Mini-batch SGD training for the baseline and every ablation mode.

Per-mode objective (``lam`` is the metric-term balance of the loss config)::

    baseline      CosFace on edited-copy pairs
    triplet       triplet on edited-copy pairs (in-batch negatives) + lam * CosFace
    asl-crop      edited-copy pairs + crop-ladder pairs, ratio term on ladders
    asl-negative  edited-copy pairs + hard-negative pairs, ratio term on hard
                  negatives, latter image in its own class
    asl-positive  as asl-negative, latter image in the former's class
    asl-full      asl-crop + asl-positive

Ratio terms on crop ladders use numerator = larger crop; on hard-negative
pairs numerator = latter image (the non-copy), so ``R(latter -> former)`` is
pushed above 1.
"""

from __future__ import annotations

import csv
import enum
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import rng as _rng
from .core import CopyDetectError
from .encoder import EncoderParams, backward, forward_batch, init_params
from .objectives import LossConfig, cosface_loss_rows, ratio_loss_rows, triplet_loss_rows
from .synth import (CROP_SCHEDULE, EDIT_OPS, PHOTOMETRIC_OPS, Dataset, DatasetManifest, ToyImage, crop_copy,
                    edited_copy, random_anchor)

log = logging.getLogger(__name__)


class Mode(str, enum.Enum):
    BASELINE = "baseline"
    ASL_CROP = "asl-crop"
    ASL_NEGATIVE = "asl-negative"
    ASL_POSITIVE = "asl-positive"
    TRIPLET = "triplet"
    ASL_FULL = "asl-full"

    @property
    def uses_crop_ladders(self) -> bool:
        return self in (Mode.ASL_CROP, Mode.ASL_FULL)

    @property
    def uses_hard_negatives(self) -> bool:
        return self in (Mode.ASL_NEGATIVE, Mode.ASL_POSITIVE, Mode.ASL_FULL)


EDIT_COPY = "EditCopy"
CROP_COPY = "CropCopy"
HARD_NEGATIVE = "HardNegativeDirected"


class DivergenceDetected(CopyDetectError, FloatingPointError):
    def __init__(self, epoch: int):
        super().__init__(f"training diverged (non-finite loss or weights) in epoch {epoch}")
        self.epoch = epoch


@dataclass
class TrainConfig:
    mode: Mode = Mode.ASL_FULL
    epochs: int = 200
    batch_size: int = 32
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    proxy_lr_mult: float = 100.0
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    hardneg_fraction: float = 0.25
    hidden: int = 128
    dim: int = 32
    features: str = "edges"
    copy_scale_min: float = 0.5
    copy_edits: tuple = PHOTOMETRIC_OPS
    heldout_pairs: int = 100

    def __post_init__(self):
        self.mode = Mode(self.mode)
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if not self.lr >= 0:
            raise ValueError("lr must be ≥ 0")
        if not self.proxy_lr_mult >= 0:
            raise ValueError("proxy_lr_mult must be ≥ 0")
        if self.epochs < 1:
            raise ValueError("epochs must be ≥ 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be ≥ 2")
        if not 0 <= self.hardneg_fraction < 1:
            raise ValueError("hardneg_fraction must lie in [0, 1)")
        if not 0.2 <= self.copy_scale_min <= 1:
            raise ValueError("copy_scale_min must lie in [0.2, 1]")
        self.copy_edits = tuple(self.copy_edits)
        if any(op not in EDIT_OPS for op in self.copy_edits):
            raise ValueError(f"copy_edits must be a subset of {EDIT_OPS}")


@dataclass(eq=False)
class TrainSample:
    former: ToyImage
    latter: ToyImage
    relation: str
    class_former: int
    class_latter: int
    # Crop scales relative to the source image; set for crop-ladder samples.
    former_scale: float | None = None
    latter_scale: float | None = None


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)
    counters: dict[str, int] = field(default_factory=dict)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "loss", "mean_ratio_heldout"])
            for r in self.rows:
                w.writerow([r["epoch"], f"{r['loss']:.9g}", f"{r['mean_ratio_heldout']:.9g}"])


def assign_classes(manifest: DatasetManifest, mode: Mode | str) -> dict[int, int]:
    """Class index per training image the mode reads.

    Every base image is its own class. Hard-negative pairs (modes that use
    them) give the former a fresh class; the latter joins it under
    asl-positive/asl-full and gets a class of its own under asl-negative.
    """
    mode = Mode(mode)
    classes = {image_id: k for k, image_id in enumerate(manifest.base_train_images())}
    if mode.uses_hard_negatives:
        for former, latter in manifest.train_hard_negative_pairs():
            classes[former] = len(classes)
            if mode is Mode.ASL_NEGATIVE:
                classes[latter] = max(classes.values()) + 1
            else:
                classes[latter] = classes[former]
    return classes


def num_classes(classes: dict[int, int]) -> int:
    return max(classes.values()) + 1 if classes else 1


def crop_ladder(img: ToyImage, r: np.random.Generator) -> tuple[ToyImage, ToyImage, float, float]:
    """Two consecutive rungs of the crop schedule, the smaller nested in the larger."""
    k = int(r.integers(0, len(CROP_SCHEDULE) - 1))
    big, small = CROP_SCHEDULE[k], CROP_SCHEDULE[k + 1]
    former = crop_copy(img, big, random_anchor(r, big, img.size), seed=int(r.integers(2**63 - 1)))
    rel = small / big
    latter = crop_copy(former, rel, random_anchor(r, rel, img.size), seed=int(r.integers(2**63 - 1)))
    return former, latter, big, small


def sample_batch(r: np.random.Generator, dataset: Dataset, mode: Mode | str, anchors: list[int],
                 classes: dict[int, int], n_hardneg: int = 0, copy_scale_min: float = 0.5,
                 copy_edits=PHOTOMETRIC_OPS) -> list[TrainSample]:
    """Training samples for one step, built from the base images in ``anchors``.

    Every anchor yields an edited-copy pair; crop-ladder modes add a ladder
    pair per anchor, hard-negative modes add ``n_hardneg`` annotated pairs
    drawn with replacement.
    """
    mode = Mode(mode)
    samples = []
    for image_id in anchors:
        img = dataset.image(image_id)
        c = classes[image_id]
        samples.append(TrainSample(img, edited_copy(img, r, copy_scale_min, 1.0, ops=copy_edits), EDIT_COPY, c, c))
        if mode.uses_crop_ladders:
            former, latter, big, small = crop_ladder(img, r)
            samples.append(TrainSample(former, latter, CROP_COPY, c, c, big, small))
    if mode.uses_hard_negatives and n_hardneg:
        pairs = dataset.manifest.train_hard_negative_pairs()
        for k in r.integers(0, len(pairs), n_hardneg):
            former, latter = pairs[int(k)]
            samples.append(TrainSample(dataset.image(former), dataset.image(latter), HARD_NEGATIVE,
                                       classes[former], classes[latter]))
    return samples


def loss_terms(sample: TrainSample, mode: Mode | str) -> dict:
    """Which terms a sample contributes under ``mode``.

    ``ratio`` is ``None`` or ``("former"|"latter", "former"|"latter")`` naming
    the numerator and denominator descriptors.
    """
    mode = Mode(mode)
    ratio = None
    if sample.relation == CROP_COPY and mode.uses_crop_ladders:
        ratio = ("former", "latter")
    elif sample.relation == HARD_NEGATIVE and mode.uses_hard_negatives:
        ratio = ("latter", "former")
    return {
        "ratio": ratio,
        "metric": True,
        "triplet": mode is Mode.TRIPLET and sample.relation == EDIT_COPY,
    }


def batch_loss(params: EncoderParams, samples: list[TrainSample], mode: Mode, cfg: LossConfig):
    """Mean per-sample loss and its gradient w.r.t. ``params``.

    Gradients are reduced in sample order, so the result is deterministic.
    """
    n = len(samples)
    Y, tape = forward_batch(params, [s.former for s in samples] + [s.latter for s in samples])
    F, L = Y[:n], Y[n:]
    G = np.zeros_like(Y)
    GF, GL = G[:n], G[n:]
    terms = [loss_terms(s, mode) for s in samples]
    total = 0.0

    metric_w = 1.0 if mode is Mode.BASELINE else cfg.lam
    if metric_w:
        targets = [s.class_former for s in samples] + [s.class_latter for s in samples]
        v, gX, gP = cosface_loss_rows(Y, targets, params.class_proxies, cfg.cosface_scale, cfg.cosface_margin)
        w = 0.5 * metric_w
        total += w * v.sum()
        G += w * gX
        g_proxies = w * gP
    else:
        g_proxies = np.zeros_like(params.class_proxies)

    rows = [k for k, t in enumerate(terms) if t["ratio"]]
    if rows:
        outputs = {"former": F, "latter": L}
        out_grads = {"former": GF, "latter": GL}
        for numer, denom in (("former", "latter"), ("latter", "former")):
            idx = [k for k in rows if terms[k]["ratio"] == (numer, denom)]
            if not idx:
                continue
            v, gi, gj = ratio_loss_rows(outputs[numer][idx], outputs[denom][idx])
            total += v.sum()
            out_grads[numer][idx] += gi
            out_grads[denom][idx] += gj

    trip = [k for k, t in enumerate(terms) if t["triplet"]]
    if len(trip) >= 2:
        neg = trip[1:] + trip[:1]
        v, ga, gp, gn = triplet_loss_rows(F[trip], L[trip], L[neg], cfg.triplet_margin)
        total += v.sum()
        GF[trip] += ga
        GL[trip] += gp
        np.add.at(GL, neg, gn)

    grads = backward(tape, G / n)
    grads.class_proxies = g_proxies / n
    return total / n, grads


class SGD:
    """Momentum SGD; weight decay on the network weights and biases, not on proxies.

    Each proxy only receives gradient from the few samples of its class in a
    batch, so proxies step with ``lr * proxy_lr_mult``.
    """

    def __init__(self, params: EncoderParams, lr: float, momentum: float, weight_decay: float,
                 proxy_lr_mult: float = 1.0):
        self.params = params
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.proxy_lr_mult = proxy_lr_mult
        self.velocity = params.zeros_like()

    def step(self, grads: EncoderParams) -> None:
        for name, w in self.params.arrays().items():
            g = getattr(grads, name)
            if name != "class_proxies" and self.weight_decay:
                g = g + self.weight_decay * w
            v = getattr(self.velocity, name)
            v *= self.momentum
            v += g
            w -= self.lr * (self.proxy_lr_mult if name == "class_proxies" else 1.0) * v


def heldout_crop_pairs(dataset: Dataset, count: int = 100, seed: int = 0) -> list[tuple[ToyImage, ToyImage]]:
    """(reference, crop) probe pairs from test references, which training never reads."""
    pairs = []
    for ref_id in sorted(dataset.manifest.references)[:count]:
        r = _rng.stream(seed, "heldout", ref_id)
        img = dataset.image(ref_id)
        scale = CROP_SCHEDULE[int(r.integers(1, len(CROP_SCHEDULE)))]
        pairs.append((img, crop_copy(img, scale, random_anchor(r, scale, img.size), seed=int(r.integers(2**63 - 1)))))
    return pairs


def probe_norms(params: EncoderParams, pairs) -> tuple[np.ndarray, np.ndarray]:
    if not pairs:
        return np.zeros(0), np.zeros(0)
    Yr, _ = forward_batch(params, [a for a, _ in pairs])
    Yc, _ = forward_batch(params, [b for _, b in pairs])
    return np.linalg.norm(Yr, axis=1), np.linalg.norm(Yc, axis=1)


def train(config: TrainConfig, dataset: Dataset, params: EncoderParams | None = None,
          verbose: bool = False) -> tuple[EncoderParams, TrainLog]:
    mode = config.mode
    manifest = dataset.manifest
    classes = assign_classes(manifest, mode)
    base = manifest.base_train_images()
    if not base:
        raise ValueError("dataset has no base training images")
    if params is None:
        pixels = dataset.image(base[0]).pixels.size
        params = init_params(config.seed, pixels, config.hidden, config.dim, num_classes(classes), config.features)
    opt = SGD(params, config.lr, config.momentum, config.weight_decay, config.proxy_lr_mult)

    has_pairs = mode.uses_hard_negatives and manifest.train_hard_negative_pairs()
    n_hardneg = int(round(config.hardneg_fraction * config.batch_size)) if has_pairs else 0
    per_step = config.batch_size - n_hardneg
    probe = heldout_crop_pairs(dataset, config.heldout_pairs, config.seed)
    out = TrainLog(counters={EDIT_COPY: 0, CROP_COPY: 0, HARD_NEGATIVE: 0, "ratio_terms": 0,
                             "ratio_numerator_latter": 0, "steps": 0})

    for epoch in range(1, config.epochs + 1):
        r = _rng.stream(config.seed, "batch", epoch)
        order = [base[int(k)] for k in r.permutation(len(base))]
        epoch_loss, epoch_samples = 0.0, 0
        for start in range(0, len(order), per_step):
            samples = sample_batch(r, dataset, mode, order[start:start + per_step], classes,
                                   n_hardneg, config.copy_scale_min, config.copy_edits)
            for s in samples:
                out.counters[s.relation] += 1
                t = loss_terms(s, mode)
                if t["ratio"]:
                    out.counters["ratio_terms"] += 1
                    out.counters["ratio_numerator_latter"] += t["ratio"][0] == "latter"
            loss, grads = batch_loss(params, samples, mode, config.loss)
            if not math.isfinite(loss):
                raise DivergenceDetected(epoch)
            opt.step(grads)
            out.counters["steps"] += 1
            epoch_loss += loss * len(samples)
            epoch_samples += len(samples)
        if not params.all_finite():
            raise DivergenceDetected(epoch)
        nr, nc = probe_norms(params, probe)
        row = {
            "epoch": epoch,
            "loss": epoch_loss / epoch_samples,
            "mean_ratio_heldout": float(np.mean(nr / nc)) if len(nr) else float("nan"),
            "ordered_heldout": float(np.mean(nr > nc)) if len(nr) else float("nan"),
            "max_norm_probe": float(max(nr.max(), nc.max())) if len(nr) else 0.0,
        }
        out.rows.append(row)
        if verbose:
            print(f"epoch {epoch:4d}  loss {row['loss']:.5f}  mean R {row['mean_ratio_heldout']:.4f}  "
                  f"ordered {row['ordered_heldout']:.2f}", flush=True)
        log.debug("epoch %d loss %.6f", epoch, row["loss"])
    return params, out
