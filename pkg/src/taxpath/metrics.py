"""Path- and leaf-level evaluation: set-overlap precision/recall/F1.

Path mode scores the overlap between predicted and true path node sets, each
node judged independently of position. Leaf mode compares effective leaves
(the deepest node of a possibly partial path). Micro pools counts over all
samples; macro averages per-category scores.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .dataset import ProductRecord
from .taxonomy import Taxonomy, is_valid_path
from .util import atomic_write_text


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class EvalPair:
    predicted_path: tuple[str, ...]
    true_path: tuple[str, ...]
    true_depth: int


@dataclass(frozen=True)
class EvalReport:
    path_macro_f1: float
    path_micro_f1: float
    leaf_macro_f1: float
    leaf_micro_f1: float
    per_depth: dict[int, dict]
    confidence_cdf: tuple[tuple[float, float], ...]
    sample_count: int

    def to_dict(self) -> dict:
        return {
            "path_macro_f1": self.path_macro_f1,
            "path_micro_f1": self.path_micro_f1,
            "leaf_macro_f1": self.leaf_macro_f1,
            "leaf_micro_f1": self.leaf_micro_f1,
            "per_depth": {str(d): stats for d, stats in sorted(self.per_depth.items())},
            "confidence_cdf": [[c, f] for c, f in self.confidence_cdf],
            "sample_count": self.sample_count,
        }


def effective_leaf(path: list[str] | tuple[str, ...]) -> str:
    """Deepest node of a (possibly partial) path."""
    if not path:
        raise EvaluationError("empty path has no effective leaf")
    return path[-1]


def _f1(tp: int, pred: int, true: int) -> tuple[float, float, float]:
    precision = tp / pred if pred else 0.0
    recall = tp / true if true else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def path_counts(pair: EvalPair) -> tuple[int, int, int]:
    """(overlap, predicted size, true size) over the paths as node sets."""
    pred = set(pair.predicted_path)
    true = set(pair.true_path)
    return len(pred & true), len(pred), len(true)


def micro_f1(pairs: list[EvalPair], mode: str = "path") -> tuple[float, float, float]:
    """Pooled-count precision/recall/F1 over all samples.

    Leaf mode treats each sample as a single-label prediction, so micro
    precision, recall, and F1 all equal leaf accuracy.
    """
    if not pairs:
        raise EvaluationError("micro_f1 needs at least one pair")
    if mode == "path":
        tp = pred = true = 0
        for pair in pairs:
            t, p, y = path_counts(pair)
            tp, pred, true = tp + t, pred + p, true + y
        return _f1(tp, pred, true)
    if mode == "leaf":
        hits = sum(
            1 for pair in pairs if effective_leaf(pair.predicted_path) == effective_leaf(pair.true_path)
        )
        return _f1(hits, len(pairs), len(pairs))
    raise EvaluationError(f"unknown mode: {mode!r}")


def macro_f1(
    pairs: list[EvalPair],
    taxonomy: Taxonomy,
    mode: str = "path",
    include_absent: bool = False,
) -> tuple[float, float, float]:
    """Unweighted mean of per-category precision/recall/F1.

    By default only categories touched by some prediction or truth enter the
    mean; `include_absent` averages over every taxonomy node instead (absent
    categories score 0), for strict fixed-catalogue averaging.
    """
    if not pairs:
        raise EvaluationError("macro_f1 needs at least one pair")
    tallies: dict[str, list[int]] = {}  # code -> [tp, fp, fn]

    def bump(code: str, slot: int) -> None:
        tallies.setdefault(code, [0, 0, 0])[slot] += 1

    if mode == "path":
        for pair in pairs:
            pred = set(pair.predicted_path)
            true = set(pair.true_path)
            for code in pred & true:
                bump(code, 0)
            for code in pred - true:
                bump(code, 1)
            for code in true - pred:
                bump(code, 2)
    elif mode == "leaf":
        for pair in pairs:
            pred = effective_leaf(pair.predicted_path)
            true = effective_leaf(pair.true_path)
            if pred == true:
                bump(pred, 0)
            else:
                bump(pred, 1)
                bump(true, 2)
    else:
        raise EvaluationError(f"unknown mode: {mode!r}")

    if include_absent:
        categories = sorted(taxonomy.nodes)
    else:
        categories = sorted(tallies)
    if not categories:
        return 0.0, 0.0, 0.0
    sums = [0.0, 0.0, 0.0]
    for code in categories:
        tp, fp, fn = tallies.get(code, (0, 0, 0))
        p, r, f1 = _f1(tp, tp + fp, tp + fn)
        sums[0] += p
        sums[1] += r
        sums[2] += f1
    return tuple(s / len(categories) for s in sums)  # type: ignore[return-value]


def evaluate(
    pred_rows: list[dict],
    truth_records: list[ProductRecord],
    taxonomy: Taxonomy,
    include_absent: bool = False,
) -> EvalReport:
    """Full report from a prediction dump and its ground-truth records."""
    pred_by_id = {row["id"]: row for row in pred_rows}
    truth_by_id = {rec.id: rec for rec in truth_records}
    if len(pred_by_id) != len(pred_rows):
        raise EvaluationError("duplicate ids in prediction dump")
    missing = sorted(set(truth_by_id) - set(pred_by_id))
    extra = sorted(set(pred_by_id) - set(truth_by_id))
    if missing or extra:
        raise EvaluationError(
            f"id mismatch between predictions and truth: missing={missing[:5]} extra={extra[:5]}"
        )
    if not pred_rows:
        raise EvaluationError("nothing to evaluate")

    pairs = []
    confidences = []
    for rec_id in sorted(truth_by_id):
        row = pred_by_id[rec_id]
        rec = truth_by_id[rec_id]
        # Predicted paths may be structurally inconsistent (that is what
        # RePath repairs); set-overlap scoring handles them fine. Ground
        # truth, however, must be a real chain.
        if not is_valid_path(taxonomy, list(rec.label_path)):
            raise EvaluationError(f"truth record {rec_id!r} carries an invalid path")
        pairs.append(
            EvalPair(
                predicted_path=tuple(row["path"]),
                true_path=tuple(rec.label_path),
                true_depth=len(rec.label_path),
            )
        )
        confidences.append(float(row.get("leaf_confidence", 0.0)))

    per_depth: dict[int, dict] = {}
    for depth in sorted({p.true_depth for p in pairs}):
        bucket = [p for p in pairs if p.true_depth == depth]
        per_depth[depth] = {
            "count": len(bucket),
            "path_macro_f1": macro_f1(bucket, taxonomy, "path", include_absent)[2],
            "path_micro_f1": micro_f1(bucket, "path")[2],
            "leaf_macro_f1": macro_f1(bucket, taxonomy, "leaf", include_absent)[2],
            "leaf_micro_f1": micro_f1(bucket, "leaf")[2],
        }

    cdf = []
    n = len(confidences)
    for c in sorted(set(confidences)):
        covered = sum(1 for x in confidences if x <= c)
        cdf.append((c, covered / n))

    return EvalReport(
        path_macro_f1=macro_f1(pairs, taxonomy, "path", include_absent)[2],
        path_micro_f1=micro_f1(pairs, "path")[2],
        leaf_macro_f1=macro_f1(pairs, taxonomy, "leaf", include_absent)[2],
        leaf_micro_f1=micro_f1(pairs, "leaf")[2],
        per_depth=per_depth,
        confidence_cdf=tuple(cdf),
        sample_count=len(pairs),
    )


def render_table(report: EvalReport) -> str:
    """Plain-text Path/Leaf x Macro/Micro summary table."""
    rows = [
        ("Path", report.path_macro_f1, report.path_micro_f1),
        ("Leaf", report.leaf_macro_f1, report.leaf_micro_f1),
    ]
    lines = [
        f"{'Level':<6} {'Macro F1 (%)':>13} {'Micro F1 (%)':>13}",
        "-" * 34,
    ]
    for name, macro, micro in rows:
        lines.append(f"{name:<6} {100 * macro:>13.2f} {100 * micro:>13.2f}")
    lines.append(f"samples: {report.sample_count}")
    return "\n".join(lines)


def write_report(path: str | Path, report: EvalReport) -> None:
    atomic_write_text(path, json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")


def write_cdf_csv(path: str | Path, report: EvalReport) -> None:
    lines = ["confidence,cumulative_fraction"]
    lines += [f"{c!r},{f!r}" for c, f in report.confidence_cdf]
    atomic_write_text(path, "\n".join(lines) + "\n")
