"""Consistency judging: does a product title match a tax code's definition?

A deterministic token-overlap oracle plays the expert role, labeling
(title, code) pairs Y / N / U. A lightweight 3-class linear judge is then
distilled from oracle labels over overlap statistics, and annotates whole
corpora for consistency-assisted training.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dataset import ProductRecord, normalize_title
from .moe import JUDGE_MAGIC, read_container, write_container
from .taxonomy import Taxonomy, ancestors
from .util import atomic_write_bytes, stream_rng

VERDICTS = ("Y", "N", "U")
FEATURE_NAMES = ("leaf_overlap", "ancestor_overlap", "title_length", "popularity")

DEFAULT_Y_THRESHOLD = 0.5
DEFAULT_N_THRESHOLD = 0.1


class DegenerateLabelsError(ValueError):
    pass


@dataclass(frozen=True)
class ConsistencyLabel:
    verdict: str
    rationale: str

    def __post_init__(self):
        if self.verdict not in VERDICTS:
            raise ValueError(f"verdict must be one of {VERDICTS}: {self.verdict!r}")


def _definition_tokens(code: str, taxonomy: Taxonomy) -> set[str]:
    node = taxonomy.node(code)
    return set(normalize_title(node.definition).split()) | set(normalize_title(node.name).split())


def oracle_judge(
    title: str,
    code: str,
    taxonomy: Taxonomy,
    y_threshold: float = DEFAULT_Y_THRESHOLD,
    n_threshold: float = DEFAULT_N_THRESHOLD,
) -> ConsistencyLabel:
    """Expert stand-in: verdict from the share of title tokens found in the
    code's name + definition. Y above `y_threshold`, N at or below
    `n_threshold`, U between."""
    title_tokens = set(normalize_title(title).split())
    def_tokens = _definition_tokens(code, taxonomy)
    matched = sorted(title_tokens & def_tokens)
    s = len(matched) / len(title_tokens) if title_tokens else 0.0
    if s >= y_threshold:
        verdict = "Y"
    elif s <= n_threshold:
        verdict = "N"
    else:
        verdict = "U"
    rationale = (
        f"overlap {s:.3f} ({len(matched)}/{len(title_tokens)}); "
        f"matched: {', '.join(matched) if matched else '(none)'}"
    )
    return ConsistencyLabel(verdict=verdict, rationale=rationale)


def judge_features(
    title: str, code: str, taxonomy: Taxonomy, popularity: dict[str, float]
) -> np.ndarray:
    """Overlap statistics the distilled judge scores (see FEATURE_NAMES)."""
    title_tokens = set(normalize_title(title).split())
    if not title_tokens:
        return np.array([0.0, 0.0, 0.0, popularity.get(code, 0.0)])
    leaf_tokens = _definition_tokens(code, taxonomy)
    chain = ancestors(taxonomy, code)[:-1]
    anc_tokens: set[str] = set()
    for anc in chain:
        anc_tokens |= _definition_tokens(anc, taxonomy)
    return np.array(
        [
            len(title_tokens & leaf_tokens) / len(title_tokens),
            len(title_tokens & anc_tokens) / len(title_tokens) if anc_tokens else 0.0,
            min(1.0, len(title_tokens) / 16.0),
            popularity.get(code, 0.0),
        ]
    )


@dataclass
class JudgeModel:
    """Distilled 3-class linear judge plus its Y/N decision thresholds.

    The verdict comes from score = P(Y) - P(N): Y at or above tau_hi,
    N at or below tau_lo, U in between.
    """

    weights: np.ndarray  # (n_features, 3)
    bias: np.ndarray  # (3,)
    tau_hi: float
    tau_lo: float
    popularity: dict[str, float] = field(default_factory=dict)
    holdout_agreement: float = float("nan")

    def __post_init__(self):
        if not self.tau_hi > self.tau_lo:
            raise ValueError(f"tau_hi must exceed tau_lo: {self.tau_hi} <= {self.tau_lo}")
        if not (np.isfinite(self.weights).all() and np.isfinite(self.bias).all()):
            raise ValueError("judge weights must be finite")

    def score(self, title: str, code: str, taxonomy: Taxonomy) -> float:
        phi = judge_features(title, code, taxonomy, self.popularity)
        logits = phi @ self.weights + self.bias
        probs = np.exp(logits - logits.max())
        probs /= probs.sum()
        return float(probs[0] - probs[1])

    def judge(self, title: str, code: str, taxonomy: Taxonomy) -> ConsistencyLabel:
        s = self.score(title, code, taxonomy)
        if s >= self.tau_hi:
            verdict = "Y"
        elif s <= self.tau_lo:
            verdict = "N"
        else:
            verdict = "U"
        return ConsistencyLabel(
            verdict=verdict,
            rationale=f"judge score {s:.3f} (tau_hi {self.tau_hi:.3f}, tau_lo {self.tau_lo:.3f})",
        )


def judge_verdict(judge, title: str, code: str, taxonomy: Taxonomy) -> str:
    """Uniform access for either a JudgeModel or an oracle-style callable."""
    if isinstance(judge, JudgeModel):
        return judge.judge(title, code, taxonomy).verdict
    return judge(title, code, taxonomy).verdict


def _code_popularity(codes: list[str]) -> dict[str, float]:
    counts: dict[str, int] = {}
    for code in codes:
        counts[code] = counts.get(code, 0) + 1
    if not counts:
        return {}
    top = math.log1p(max(counts.values()))
    return {code: math.log1p(n) / top if top else 0.0 for code, n in sorted(counts.items())}


def _best_threshold(scores: np.ndarray, positive: np.ndarray, direction: str) -> float:
    """1-D sweep for the boundary maximizing agreement.

    direction "ge": predict positive when score >= t; "le": when score <= t.
    Candidates are midpoints between adjacent distinct scores plus outer
    sentinels; ties resolve to the first (lowest) candidate.
    """
    distinct = np.unique(scores)
    candidates = [distinct[0] - 1.0]
    candidates += [(a + b) / 2.0 for a, b in zip(distinct, distinct[1:])]
    candidates += [distinct[-1] + 1.0]
    best_t, best_hits = candidates[0], -1
    for t in candidates:
        pred = scores >= t if direction == "ge" else scores <= t
        hits = int((pred == positive).sum())
        if hits > best_hits:
            best_hits, best_t = hits, t
    return float(best_t)


def distill_judge(
    labeled: list[tuple[str, str, ConsistencyLabel]],
    taxonomy: Taxonomy,
    seed: int,
    holdout_fraction: float = 0.2,
    epochs: int = 400,
    learning_rate: float = 2.0,
) -> JudgeModel:
    """Fit the lightweight judge on oracle-labeled (title, code) pairs.

    Full-batch gradient descent on 3-class cross-entropy from a zero init,
    then threshold calibration on the fit split; agreement with the given
    labels is measured on a held-out split and stored on the model.
    """
    verdict_counts = {v: 0 for v in VERDICTS}
    for _, _, label in labeled:
        verdict_counts[label.verdict] += 1
    if verdict_counts["Y"] == 0 or verdict_counts["N"] == 0:
        raise DegenerateLabelsError(
            f"degenerate label set: need at least one Y and one N, got {verdict_counts}"
        )

    rng = stream_rng(seed, "judge-distill")
    order = rng.permutation(len(labeled))
    n_holdout = int(len(labeled) * holdout_fraction)
    holdout_idx = set(order[:n_holdout].tolist())
    fit_rows = [labeled[i] for i in range(len(labeled)) if i not in holdout_idx]
    holdout_rows = [labeled[i] for i in sorted(holdout_idx)]
    if not any(l.verdict == "Y" for _, _, l in fit_rows) or not any(
        l.verdict == "N" for _, _, l in fit_rows
    ):
        fit_rows = list(labeled)

    popularity = _code_popularity([code for _, code, _ in fit_rows])
    phi = np.stack([judge_features(t, c, taxonomy, popularity) for t, c, _ in fit_rows])
    target = np.array([VERDICTS.index(l.verdict) for _, _, l in fit_rows])

    w = np.zeros((phi.shape[1], 3))
    b = np.zeros(3)
    n = len(fit_rows)
    onehot = np.zeros((n, 3))
    onehot[np.arange(n), target] = 1.0
    for _ in range(epochs):
        logits = phi @ w + b
        probs = np.exp(logits - logits.max(axis=1, keepdims=True))
        probs /= probs.sum(axis=1, keepdims=True)
        delta = (probs - onehot) / n
        w -= learning_rate * (phi.T @ delta)
        b -= learning_rate * delta.sum(axis=0)

    logits = phi @ w + b
    probs = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs /= probs.sum(axis=1, keepdims=True)
    scores = probs[:, 0] - probs[:, 1]
    tau_hi = _best_threshold(scores, target == 0, "ge")
    tau_lo = _best_threshold(scores, target == 1, "le")
    if tau_lo >= tau_hi:
        mid = (tau_lo + tau_hi) / 2.0
        tau_hi, tau_lo = mid + 1e-6, mid - 1e-6

    model = JudgeModel(weights=w, bias=b, tau_hi=tau_hi, tau_lo=tau_lo, popularity=popularity)
    check_rows = holdout_rows if holdout_rows else fit_rows
    hits = sum(
        1 for t, c, l in check_rows if model.judge(t, c, taxonomy).verdict == l.verdict
    )
    model.holdout_agreement = hits / len(check_rows)
    return model


def annotate_corpus(
    records: list[ProductRecord], judge, taxonomy: Taxonomy
) -> dict[str, ConsistencyLabel]:
    """One consistency label per record, judged on (title, effective leaf).

    Output ordering is stable: keys ascend by record id.
    """
    out: dict[str, ConsistencyLabel] = {}
    for rec in sorted(records, key=lambda r: r.id):
        if isinstance(judge, JudgeModel):
            out[rec.id] = judge.judge(rec.title, rec.leaf(), taxonomy)
        else:
            out[rec.id] = judge(rec.title, rec.leaf(), taxonomy)
    return out


def save_judge(judge: JudgeModel, sink) -> None:
    meta = {
        "tau_hi": judge.tau_hi,
        "tau_lo": judge.tau_lo,
        "popularity": judge.popularity,
        "holdout_agreement": judge.holdout_agreement,
        "feature_names": list(FEATURE_NAMES),
    }
    blob = write_container(JUDGE_MAGIC, meta, {"weights": judge.weights, "bias": judge.bias})
    if hasattr(sink, "write"):
        sink.write(blob)
    else:
        atomic_write_bytes(sink, blob)


def load_judge(source) -> JudgeModel:
    if hasattr(source, "read"):
        blob = source.read()
    else:
        with open(source, "rb") as fh:
            blob = fh.read()
    meta, params = read_container(blob, JUDGE_MAGIC)
    return JudgeModel(
        weights=params["weights"],
        bias=params["bias"],
        tau_hi=meta["tau_hi"],
        tau_lo=meta["tau_lo"],
        popularity=dict(meta["popularity"]),
        holdout_agreement=meta["holdout_agreement"],
    )
