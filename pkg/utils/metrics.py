"""
Scoring for all three explanation tasks.

Correlations, the lexical judge used in place of an LM judge, has-changed
macro F1, content/exact match, paired t-tests, and the representation
alignment metrics between an explainer and a target.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import stats
from sklearn.metrics import confusion_matrix

from .transformer import TokenSeq, Transformer
from .vocab import QUOTE_CLOSE, QUOTE_OPEN

logger = logging.getLogger(__name__)

ZERO_VARIANCE = 1e-20
P_VALUE_FLOOR = 1e-6

CHANGED_PREFIX = ["the", "most", "likely", "output", "would", "change", "to"]
UNCHANGED_PREFIX = ["the", "output", "would", "remain", "unchanged", "from"]
TASKS = ("feat", "patch", "ablate")


def pearson(a: Sequence[float], b: Sequence[float]) -> float:
    """Pearson correlation; 0 when either series has zero variance."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"Series lengths differ ({a.shape} vs {b.shape})")
    a_c = a - a.mean() if a.size else a
    b_c = b - b.mean() if b.size else b
    ss_a = float(a_c @ a_c)
    ss_b = float(b_c @ b_c)
    if ss_a <= ZERO_VARIANCE or ss_b <= ZERO_VARIANCE:
        return 0.0
    return float(np.clip((a_c @ b_c) / math.sqrt(ss_a * ss_b), -1.0, 1.0))


# lexical judge

def lexical_judge(predicted: Sequence[str], gold: Sequence[str], grammar, corpus_tokens: Iterable[int]) -> float:
    """
    Deterministic five-level rubric over label renderings.

    1 for the same label, 0.75 for the same family with another modifier,
    0.5 when the extensions seen in the corpus have Jaccard >= 0.5, 0.25 for
    any overlap, otherwise 0. Unparseable predictions score 0.
    """
    pred_label = grammar.parse(predicted)
    gold_label = grammar.parse(gold)
    if pred_label is None or gold_label is None:
        return 0.0
    if pred_label == gold_label:
        return 1.0
    if pred_label.family == gold_label.family:
        return 0.75
    seen = set(corpus_tokens)
    a = grammar.extension(pred_label) & seen
    b = grammar.extension(gold_label) & seen
    union = a | b
    if not union:
        return 0.0
    jaccard = len(a & b) / len(union)
    if jaccard >= 0.5:
        return 0.5
    if a & b:
        return 0.25
    return 0.0


# two-branch explanations

def render_branch(has_changed: bool, content: str) -> List[str]:
    prefix = CHANGED_PREFIX if has_changed else UNCHANGED_PREFIX
    return [*prefix, QUOTE_OPEN, content, QUOTE_CLOSE, "."]


def parse_branch(tokens: Sequence[str]) -> Optional[Tuple[bool, str]]:
    tokens = list(tokens)
    for has_changed, prefix in ((True, CHANGED_PREFIX), (False, UNCHANGED_PREFIX)):
        n = len(prefix)
        if tokens[:n] == prefix and len(tokens) >= n + 4 and tokens[n] == QUOTE_OPEN \
                and tokens[n + 2] == QUOTE_CLOSE and tokens[n + 3] == ".":
            return has_changed, tokens[n + 1]
    return None


@dataclass
class PredictionRecord:
    task: str
    instance_id: str
    predicted: List[str]
    gold: List[str]
    score: Optional[float] = None

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"Unknown task {self.task!r}")

    @property
    def parsed(self) -> Optional[Tuple[bool, str]]:
        return parse_branch(self.predicted) if self.task != "feat" else None

    @property
    def gold_parsed(self) -> Optional[Tuple[bool, str]]:
        return parse_branch(self.gold) if self.task != "feat" else None

    def to_record(self) -> Dict:
        row = {"task": self.task, "instance_id": self.instance_id, "predicted": " ".join(self.predicted),
               "gold": " ".join(self.gold)}
        if self.score is not None:
            row["score"] = self.score
        parsed = self.parsed
        if parsed is not None:
            row["has_changed"], row["content"] = parsed
        return row

    @classmethod
    def from_record(cls, row: Dict) -> "PredictionRecord":
        split = lambda s: s.split(" ") if s else []
        return cls(row["task"], row["instance_id"], split(row["predicted"]), split(row["gold"]), row.get("score"))


def _class_f1(tp: int, predicted: int, actual: int) -> float:
    if predicted == 0:
        return 1.0 if actual == 0 else 0.0
    return 2.0 * tp / (predicted + actual)


def has_changed_f1(records: Sequence[PredictionRecord]) -> float:
    """Macro F1 over the changed/unchanged classes; unparseable predictions count as the wrong class."""
    truths, preds = [], []
    unparseable = 0
    for r in records:
        gold = r.gold_parsed
        if gold is None:
            raise ValueError(f"Gold explanation for {r.instance_id} is not a branch template")
        parsed = r.parsed
        if parsed is None:
            unparseable += 1
            preds.append(not gold[0])
        else:
            preds.append(parsed[0])
        truths.append(gold[0])
    if unparseable:
        logger.warning(f"{unparseable} of {len(records)} predictions were not parseable")
    if not records:
        return 0.0
    cm = confusion_matrix(truths, preds, labels=[True, False])
    scores = []
    for i in range(2):
        scores.append(_class_f1(int(cm[i, i]), int(cm[:, i].sum()), int(cm[i, :].sum())))
    return float(np.mean(scores))


def content_match(records: Sequence[PredictionRecord]) -> float:
    if not records:
        return 0.0
    hits = 0
    for r in records:
        parsed, gold = r.parsed, r.gold_parsed
        hits += int(parsed is not None and gold is not None and parsed[1] == gold[1])
    return hits / len(records)


def exact_match(records: Sequence[PredictionRecord]) -> float:
    if not records:
        return 0.0
    return sum(int(r.parsed is not None and list(r.predicted) == list(r.gold)) for r in records) / len(records)


def branch_accuracy(records: Sequence[PredictionRecord]) -> float:
    if not records:
        return 0.0
    hits = sum(int(r.parsed is not None and r.gold_parsed is not None and r.parsed[0] == r.gold_parsed[0])
               for r in records)
    return hits / len(records)


# significance

def paired_t_test(scores_a: Sequence[float], scores_b: Sequence[float]) -> float:
    """Two-sided paired t-test p-value; degenerate differences give 1 (all zero) or 0 (constant nonzero)."""
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"Paired samples differ in length ({a.size} vs {b.size})")
    if a.size < 2:
        raise ValueError("A paired t-test needs at least two pairs")
    diff = a - b
    if np.allclose(diff, diff[0], rtol=0.0, atol=1e-12):
        return 1.0 if abs(diff[0]) <= 1e-12 else 0.0
    return float(stats.ttest_rel(a, b).pvalue)


def welch_t_test(scores_a: Sequence[float], scores_b: Sequence[float]) -> float:
    """Two-sided unequal-variance t-test for independent samples; two constant samples give 1 (equal) or 0."""
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError(f"Welch's t-test needs at least two scores per side (got {a.size} and {b.size})")
    if np.ptp(a) <= 1e-12 and np.ptp(b) <= 1e-12:
        return 1.0 if abs(a[0] - b[0]) <= 1e-12 else 0.0
    return float(stats.ttest_ind(a, b, equal_var=False).pvalue)


def format_p_value(p: float) -> str:
    return f"<{P_VALUE_FLOOR:g}" if p < P_VALUE_FLOOR else f"{p:.6f}"


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    if len(x) < 2:
        return 0.0
    rho = stats.spearmanr(x, y).correlation
    return 0.0 if rho is None or not np.isfinite(rho) else float(rho)


# aggregation

def mean_stderr(values: Sequence[float]) -> Tuple[float, float, int]:
    values = np.asarray(values, dtype=np.float64)
    n = int(values.size)
    if n == 0:
        return 0.0, 0.0, 0
    stderr = float(values.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return float(values.mean()), stderr, n


@dataclass
class ScoreReport:
    metrics: Dict[str, Tuple[float, float, int]] = field(default_factory=dict)
    breakdown: Dict[str, Dict[str, Tuple[float, float, int]]] = field(default_factory=dict)
    annotations: Dict[str, str] = field(default_factory=dict)

    def add(self, name: str, values: Sequence[float]) -> None:
        self.metrics[name] = mean_stderr(values)

    def add_cell(self, cell: str, name: str, values: Sequence[float]) -> None:
        self.breakdown.setdefault(cell, {})[name] = mean_stderr(values)

    def to_frame(self) -> pd.DataFrame:
        rows = [{"cell": "all", "metric": k, "mean": m, "stderr": s, "n": n} for k, (m, s, n) in self.metrics.items()]
        for cell, metrics in self.breakdown.items():
            rows += [{"cell": cell, "metric": k, "mean": m, "stderr": s, "n": n} for k, (m, s, n) in metrics.items()]
        frame = pd.DataFrame(rows, columns=["cell", "metric", "mean", "stderr", "n"])
        return frame.sort_values(["cell", "metric"], kind="mergesort").reset_index(drop=True)

    def to_dict(self) -> Dict:
        return {
            "metrics": {k: {"mean": m, "stderr": s, "n": n} for k, (m, s, n) in sorted(self.metrics.items())},
            "breakdown": {c: {k: {"mean": m, "stderr": s, "n": n} for k, (m, s, n) in sorted(v.items())}
                          for c, v in sorted(self.breakdown.items())},
            "annotations": dict(sorted(self.annotations.items())),
        }


def score_branch_task(records: Sequence[PredictionRecord]) -> ScoreReport:
    """Branch F1 plus per-record content, exact and branch accuracy as means with standard errors."""
    report = ScoreReport()
    if not records:
        return report
    report.metrics["has_changed_f1"] = (has_changed_f1(records), 0.0, len(records))
    report.add("content_match", [content_match([r]) for r in records])
    report.add("exact_match", [exact_match([r]) for r in records])
    report.add("branch_accuracy", [branch_accuracy([r]) for r in records])
    return report


# alignment between explainer and target

def _residual_pairs(explainer: Transformer, target: Transformer, ids: Sequence[int],
                    mapping: Dict[int, int]) -> List[Tuple[np.ndarray, np.ndarray]]:
    seq = TokenSeq(list(ids))
    t_trace = target.forward(seq, tap_layers=sorted(mapping))
    e_trace = explainer.forward(seq, tap_layers=sorted(set(mapping.values())))
    return [(e_trace.residuals[l_e].astype(np.float64), t_trace.residuals[l_m].astype(np.float64))
            for l_m, l_e in sorted(mapping.items())]


def dot_similarity(explainer: Transformer, target: Transformer, corpus: Sequence[Sequence[int]],
                   mapping: Dict[int, int]) -> float:
    """Mean <h_E, h_M> over (x, layer, t), normalized by the geometric mean of the self-similarities (x100)."""
    if explainer.config.d_model != target.config.d_model:
        raise ValueError("Dot-product similarity needs equal hidden sizes")
    cross = self_e = self_m = 0.0
    count = 0
    for ids in corpus:
        for h_e, h_m in _residual_pairs(explainer, target, ids, mapping):
            cross += float(np.sum(h_e * h_m))
            self_e += float(np.sum(h_e * h_e))
            self_m += float(np.sum(h_m * h_m))
            count += h_e.shape[0]
    if count == 0 or self_e == 0 or self_m == 0:
        return 0.0
    return 100.0 * (cross / count) / math.sqrt((self_e / count) * (self_m / count))


def sae_pattern_similarity(explainer: Transformer, target: Transformer, features, exemplars: Dict[str, List[List[int]]],
                           mapping: Dict[int, int]) -> float:
    """Mean Pearson correlation over features and exemplars between <h_E, v> and <h_M, v>."""
    scores = []
    for feature in features:
        v = np.asarray(feature.vector, dtype=np.float64)
        l_e = mapping[feature.layer]
        for ids in exemplars.get(feature.id, []):
            seq = TokenSeq(list(ids))
            a_m = target.forward(seq, tap_layers=[feature.layer]).residuals[feature.layer].astype(np.float64) @ v
            a_e = explainer.forward(seq, tap_layers=[l_e]).residuals[l_e].astype(np.float64) @ v
            scores.append(pearson(a_e, a_m))
    return float(np.mean(scores)) if scores else 0.0
