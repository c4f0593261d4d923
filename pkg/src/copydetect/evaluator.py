"""Micro average precision, precision over the top-N pairs, and the hard-negative sweep.

All metrics rank predictions globally by descending score, then ascending
query id, then ascending reference id.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

from .core import CopyDetectError, Descriptor
from .matcher import MatchConfig, Prediction, RefIndex, match_all


class EmptyGroundTruth(CopyDetectError, ValueError):
    pass


class DuplicatePrediction(CopyDetectError, ValueError):
    pass


class GtMismatch(CopyDetectError, ValueError):
    pass


def ranked(predictions: Iterable[Prediction]) -> list[Prediction]:
    preds = sorted(predictions, key=lambda p: (-p.score, p.query, p.reference))
    for a, b in zip(preds, preds[1:]):
        if (a.query, a.reference) == (b.query, b.reference):
            raise DuplicatePrediction(f"pair ({a.query}, {a.reference}) predicted twice")
    return preds


def _gt_set(gt_pairs) -> set[tuple[int, int]]:
    return {(int(q), int(r)) for q, r in gt_pairs}


def micro_ap(predictions: Iterable[Prediction], gt_pairs) -> float:
    """Uninterpolated average precision over the global ranking.

    Sum of ``hits_so_far / rank`` at every correct prediction, divided by the
    number of ground-truth pairs, so unretrieved pairs count as zero.
    """
    gt = _gt_set(gt_pairs)
    if not gt:
        raise EmptyGroundTruth("micro-AP is undefined without ground-truth pairs")
    hits, total = 0, 0.0
    for rank, p in enumerate(ranked(predictions), start=1):
        if (p.query, p.reference) in gt:
            hits += 1
            total += hits / rank
    return total / len(gt)


@dataclass
class PrecisionAtN:
    precision: float
    tp: int
    fp: int
    short_list: bool


def precision_at_n(predictions: Iterable[Prediction], gt_pairs, n: int) -> PrecisionAtN:
    """TP / (TP + FP) among the top ``n`` pairs.

    With fewer than ``n`` predictions the denominator is the number available
    and ``short_list`` is set; missing pairs are not counted as false positives.
    """
    if n < 1:
        raise ValueError("n must be ≥ 1")
    gt = _gt_set(gt_pairs)
    top = ranked(predictions)[:n]
    tp = sum((p.query, p.reference) in gt for p in top)
    fp = len(top) - tp
    return PrecisionAtN(tp / len(top) if top else 0.0, tp, fp, len(top) < n)


def precision_from_counts(tp: int, fp: int) -> float:
    return tp / (tp + fp)


@dataclass
class EvalReport:
    micro_ap: float
    precision_at_n: float
    n: int
    tp: int
    fp: int
    num_gt_pairs: int
    short_list: bool
    gt_digest: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))

    def table(self) -> str:
        return (f"µAP            {100 * self.micro_ap:6.2f}%\n"
                f"precision@{self.n:<5d}{100 * self.precision_at_n:6.2f}%\n"
                f"true positive  {self.tp}\n"
                f"false positive {self.fp}\n"
                f"gt pairs       {self.num_gt_pairs}" + ("\n(short list)" if self.short_list else ""))


def gt_digest(gt_pairs) -> str:
    text = "\n".join(f"{q},{r}" for q, r in sorted(_gt_set(gt_pairs)))
    return hashlib.sha1(text.encode()).hexdigest()[:16]


def evaluate(predictions: Sequence[Prediction], gt_pairs, n: int | None = None) -> EvalReport:
    """Full report; ``n`` defaults to the number of queries with a true match."""
    gt = _gt_set(gt_pairs)
    if n is None:
        n = len({q for q, _ in gt})
    pr = precision_at_n(predictions, gt, n)
    return EvalReport(micro_ap(predictions, gt), pr.precision, n, pr.tp, pr.fp, len(gt), pr.short_list,
                      gt_digest(gt))


# -- hard-negative sweep -----------------------------------------------------

def sweep_hard_negatives(queries: Sequence[Descriptor], index: RefIndex, cfg: MatchConfig,
                         base_query_ids, hard_negative_ids, gt_pairs,
                         proportions=(0.0, 0.25, 0.5, 0.75, 1.0)) -> list[tuple[float, float]]:
    """µAP with the base queries plus the first ``ceil(f * pool)`` hard negatives.

    Hard negatives enter in the order of ``hard_negative_ids``. Each query is
    matched independently, so all queries are matched once and predictions are
    subset per point.
    """
    proportions = list(proportions)
    if any(not 0 <= f <= 1 for f in proportions) or proportions != sorted(proportions):
        raise ValueError("proportions must be sorted and within [0, 1]")
    hard = list(hard_negative_ids)
    wanted = set(base_query_ids) | set(hard)
    preds = match_all([q for q in queries if q.id in wanted], index, cfg)
    curve = []
    for f in proportions:
        active = set(base_query_ids) | set(hard[: math.ceil(f * len(hard))])
        curve.append((f, micro_ap([p for p in preds if p.query in active], gt_pairs)))
    return curve


def write_sweep_csv(path, curve) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["fraction", "micro_ap"])
        for frac, ap in curve:
            w.writerow([f"{frac:.6g}", f"{ap:.9g}"])


def sweep_svg(curve, width: int = 360, height: int = 240) -> str:
    """A bare line plot of µAP against hard-negative fraction."""
    pad = 40
    pw, ph = width - 2 * pad, height - 2 * pad
    pts = " ".join(f"{pad + f * pw:.1f},{pad + (1 - ap) * ph:.1f}" for f, ap in curve)
    dots = "".join(f'<circle cx="{pad + f * pw:.1f}" cy="{pad + (1 - ap) * ph:.1f}" r="3"/>' for f, ap in curve)
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">'
            f'<rect x="{pad}" y="{pad}" width="{pw}" height="{ph}" fill="none" stroke="#888"/>'
            f'<text x="{width / 2}" y="{height - 8}" text-anchor="middle" font-size="12">hard-negative fraction</text>'
            f'<text x="12" y="{height / 2}" font-size="12" transform="rotate(-90 12 {height / 2})" '
            f'text-anchor="middle">µAP</text>'
            f'<polyline points="{pts}" fill="none" stroke="#1f5fa8" stroke-width="2"/>{dots}</svg>\n')


# -- report comparison -------------------------------------------------------

DELTA_FIELDS = ("micro_ap", "precision_at_n", "tp", "fp", "n", "num_gt_pairs")


def compare_reports(a: EvalReport, b: EvalReport) -> dict[str, float]:
    """Signed ``b - a`` for every numeric report field."""
    if a.num_gt_pairs != b.num_gt_pairs or (a.gt_digest and b.gt_digest and a.gt_digest != b.gt_digest):
        raise GtMismatch("reports were computed against different ground truth")
    return {k: getattr(b, k) - getattr(a, k) for k in DELTA_FIELDS}


def render_delta(a: EvalReport, b: EvalReport, fmt: str = "text") -> str:
    delta = compare_reports(a, b)
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["field", "before", "after", "delta"])
        for k in DELTA_FIELDS:
            w.writerow([k, getattr(a, k), getattr(b, k), delta[k]])
        return buf.getvalue()
    lines = [f"{'field':<16}{'before':>12}{'after':>12}{'delta':>12}"]
    for k in DELTA_FIELDS:
        lines.append(f"{k:<16}{getattr(a, k):>12.6g}{getattr(b, k):>12.6g}{delta[k]:>+12.6g}")
    return "\n".join(lines)
