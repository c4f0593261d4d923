"""Two-stage matching: exact symmetric search, then the norm-ratio filter."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import CopyDetectError, Descriptor, DimensionMismatch, ZeroNormDenominator, norm

log = logging.getLogger(__name__)


class ZeroNormDescriptor(CopyDetectError, ValueError):
    def __init__(self, image_id: int):
        super().__init__(f"reference {image_id} has a zero-norm descriptor")
        self.image_id = image_id


class DuplicateId(CopyDetectError, ValueError):
    pass


class PredictionsParseError(CopyDetectError, ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class Prediction:
    query: int
    reference: int
    score: float


@dataclass
class MatchConfig:
    k: int = 10
    eps: float = 0.5
    tau: float = 1.0
    delta: float = 0.05
    filter_enabled: bool = True
    metric: str = "cosine"
    # Only used with metric="l2": candidates farther than this are dropped.
    l2_max_distance: float = math.inf

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be ≥ 1")
        if not self.tau > 0:
            raise ValueError("tau must be > 0")
        if self.delta < 0:
            raise ValueError("delta must be ≥ 0")
        if self.metric not in ("cosine", "l2"):
            raise ValueError(f"unknown metric {self.metric!r}")


class RefIndex:
    """Immutable exhaustive index over reference descriptors."""

    def __init__(self, refs: Sequence[Descriptor]):
        if not refs:
            raise ValueError("reference set is empty")
        dim = refs[0].dim
        seen = set()
        for d in refs:
            if d.dim != dim:
                raise DimensionMismatch(f"reference {d.id} has dim {d.dim}, expected {dim}", 0)
            if d.id in seen:
                raise DuplicateId(f"duplicate reference id {d.id}")
            seen.add(d.id)
        order = sorted(range(len(refs)), key=lambda k: refs[k].id)
        self.descriptors = tuple(refs[k] for k in order)
        self.ids = np.array([d.id for d in self.descriptors], dtype=np.uint64)
        self.matrix = np.stack([d.vec for d in self.descriptors])
        self.norms = np.array([norm(d) for d in self.descriptors])
        for d, n in zip(self.descriptors, self.norms):
            if n == 0.0:
                raise ZeroNormDescriptor(d.id)
        self.unit = self.matrix / self.norms[:, None]
        self._pos = {d.id: k for k, d in enumerate(self.descriptors)}
        for a in (self.ids, self.matrix, self.norms, self.unit):
            a.setflags(write=False)

    def __len__(self) -> int:
        return len(self.descriptors)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def norm_of(self, ref_id: int) -> float:
        return float(self.norms[self._pos[ref_id]])


def build_index(refs: Sequence[Descriptor]) -> RefIndex:
    return RefIndex(refs)


def search(index: RefIndex, query: Descriptor, cfg: MatchConfig) -> list[tuple[int, float]]:
    """Exact top-k references by similarity, descending; ties by ascending id."""
    if query.dim != index.dim:
        raise DimensionMismatch(f"query {query.id} has dim {query.dim}, index has {index.dim}", 0)
    qn = norm(query)
    if qn == 0.0:
        raise ZeroNormDenominator(f"query {query.id} has zero norm")
    if cfg.metric == "cosine":
        scores = (index.matrix @ query.vec) / (index.norms * qn)
        keep = scores >= cfg.eps
    else:
        dist = np.sqrt(np.sum((index.matrix - query.vec) ** 2, axis=1))
        scores = -dist
        keep = dist <= cfg.l2_max_distance
    # index rows are sorted by id, so a stable sort on -score breaks ties by id
    order = np.argsort(-scores, kind="stable")
    order = order[keep[order]][: cfg.k]
    return [(int(index.ids[k]), float(scores[k])) for k in order]


def ratio_filter(query: Descriptor, candidates: list[tuple[int, float]], index: RefIndex,
                 cfg: MatchConfig) -> list[tuple[int, float]]:
    """Drop candidates whose query-to-reference norm ratio exceeds ``tau + delta``.

    A query with a clearly larger norm than the reference holds more content
    than it, so it is unlikely to be an edited copy of that reference.
    """
    if not cfg.filter_enabled:
        return list(candidates)
    qn = norm(query)
    limit = cfg.tau + cfg.delta
    return [(ref_id, s) for ref_id, s in candidates if not qn / index.norm_of(ref_id) > limit]


def match_all(queries: Sequence[Descriptor], index: RefIndex, cfg: MatchConfig,
              errors: list | None = None) -> list[Prediction]:
    """Search and filter every query; output ordered by query id, then rank.

    A query that fails (zero norm, wrong dimension) is skipped and recorded as
    ``(query_id, message)`` in ``errors`` when a list is supplied.
    """
    out = []
    for q in sorted(queries, key=lambda d: d.id):
        try:
            kept = ratio_filter(q, search(index, q, cfg), index, cfg)
        except (ZeroNormDenominator, DimensionMismatch) as e:
            log.warning("query %d skipped: %s", q.id, e)
            if errors is not None:
                errors.append((q.id, str(e)))
            continue
        out += [Prediction(q.id, ref_id, s) for ref_id, s in kept]
    return out


def write_predictions(path, predictions: Sequence[Prediction]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["query_id", "ref_id", "score"])
        for p in predictions:
            w.writerow([p.query, p.reference, f"{p.score:.9g}"])


def read_predictions(path) -> list[Prediction]:
    out = []
    with open(path, newline="") as f:
        rows = csv.reader(f)
        header = next(rows, None)
        if header != ["query_id", "ref_id", "score"]:
            raise PredictionsParseError("expected header query_id,ref_id,score", 1)
        for line, row in enumerate(rows, start=2):
            if len(row) != 3:
                raise PredictionsParseError(f"expected 3 fields, got {len(row)}", line)
            try:
                p = Prediction(int(row[0]), int(row[1]), float(row[2]))
            except ValueError as e:
                raise PredictionsParseError(str(e), line) from None
            if not math.isfinite(p.score):
                raise PredictionsParseError("score is not finite", line)
            out.append(p)
    return out
