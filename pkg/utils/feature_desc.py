"""
Feature description: a closed label grammar with a rule simulator, exhaustive
correlation-maximizing label search, explanation dataset construction,
explainer training with projected continuous slots, and description decoding.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed

from .codec_helpers import decode_vector, encode_vector
from .metrics import ZERO_VARIANCE, lexical_judge, pearson
from .projection import ProjectionSet, canonical_mode
from .sae import FeatureDirection
from .training import OptimizerConfig, SlotRef, TrainingExample, fine_tune
from .transformer import TokenSeq, Transformer
from .vocab import BOS, EOS, SLOT, SLOT_CLOSE, SLOT_OPEN, UNION_CLASSES, Vocabulary, layer_token

logger = logging.getLogger(__name__)

MAX_LABEL_TOKENS = 4


@dataclass(frozen=True)
class Label:
    family: str
    modifier: str

    @property
    def key(self) -> str:
        return f"{self.family}:{self.modifier}"

    @property
    def tokens(self) -> List[str]:
        return [self.family, self.modifier]

    @property
    def rendered(self) -> str:
        return " ".join(self.tokens)


class LabelGrammar:
    """
    Finite label set over the vocabulary's content classes.

    Every base class gets an `all` label, classes with four or more members
    get `low`/`high` halves and one singleton label per member, and every
    union class gets an `all` label.
    """

    def __init__(self, vocab: Vocabulary):
        self.vocab = vocab
        extensions: Dict[Label, FrozenSet[int]] = {}
        for family, members in vocab.classes.items():
            ids = vocab.members(family)
            extensions[Label(family, "all")] = frozenset(ids)
            if len(ids) >= 4:
                half = len(ids) // 2
                extensions[Label(family, "low")] = frozenset(ids[:half])
                extensions[Label(family, "high")] = frozenset(ids[half:])
            for token in members:
                extensions[Label(family, token)] = frozenset([vocab.id(token)])
        for family in UNION_CLASSES:
            extensions[Label(family, "all")] = frozenset(vocab.members(family))

        self.labels: List[Label] = sorted(extensions, key=lambda label: label.rendered)
        self._extensions = extensions
        self._by_key = {label.key: label for label in self.labels}
        self._by_tokens = {tuple(label.tokens): label for label in self.labels}
        self.indicator = np.zeros((len(self.labels), len(vocab)), dtype=np.float64)
        for row, label in enumerate(self.labels):
            self.indicator[row, sorted(extensions[label])] = 1.0

    def __len__(self):
        return len(self.labels)

    def __contains__(self, label: Label) -> bool:
        return label in self._extensions

    def get(self, key: str) -> Label:
        try:
            return self._by_key[key]
        except KeyError:
            raise ValueError(f"Unknown label {key!r}") from None

    def parse(self, tokens: Sequence[str]) -> Optional[Label]:
        tokens = [t for t in tokens if t != EOS]
        return self._by_tokens.get(tuple(tokens))

    def extension(self, label: Label) -> FrozenSet[int]:
        if label not in self._extensions:
            raise ValueError(f"Label {label.rendered!r} is not in the grammar")
        return self._extensions[label]

    def row(self, label: Label) -> int:
        return self.labels.index(label)

    def gold_ids(self, label: Label) -> List[int]:
        return self.vocab.encode(label.tokens + [EOS])


def simulate(grammar: LabelGrammar, label: Label, ids: Sequence[int]) -> np.ndarray:
    """1 where the token belongs to the label's class, else 0."""
    extension = grammar.extension(label)
    return np.array([1.0 if t in extension else 0.0 for t in ids], dtype=np.float64)


class ActivationCorpus:
    """Residual streams of a frozen model over a scoring corpus, cached per layer."""

    def __init__(self, model: Transformer, corpus: Sequence[Sequence[int]], layers: Sequence[int], n_jobs: int = 1):
        if not corpus:
            raise ValueError("Scoring corpus is empty")
        self.corpus = [list(ids) for ids in corpus]
        self.layers = sorted(set(layers))
        handle = model.read_only()
        traces = Parallel(n_jobs=n_jobs, prefer="threads")(
            delayed(handle.forward)(TokenSeq(ids), self.layers) for ids in self.corpus
        )
        self.residuals: Dict[int, List[np.ndarray]] = {
            layer: [trace.residuals[layer].astype(np.float64) for trace in traces] for layer in self.layers
        }
        self.tokens = frozenset(t for ids in self.corpus for t in ids)

    def activations(self, v: np.ndarray, layer: int) -> List[np.ndarray]:
        if layer not in self.residuals:
            raise ValueError(f"Scoring corpus has no activations for layer {layer}")
        v = np.asarray(v, dtype=np.float64)
        return [h @ v for h in self.residuals[layer]]

    def score_matrix(self, grammar: LabelGrammar, vectors: np.ndarray, layer: int,
                     labels: Optional[Sequence[Label]] = None) -> np.ndarray:
        """Mean per-input Pearson correlation, shape (n_labels, n_features)."""
        if layer not in self.residuals:
            raise ValueError(f"Scoring corpus has no activations for layer {layer}")
        rows = [grammar.row(label) for label in labels] if labels is not None else list(range(len(grammar)))
        vectors = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
        total = np.zeros((len(rows), vectors.shape[0]))
        for ids, h in zip(self.corpus, self.residuals[layer]):
            acts = h @ vectors.T  # (n, F)
            acts_c = acts - acts.mean(axis=0, keepdims=True)
            sim = grammar.indicator[np.ix_(rows, ids)]  # (R, n)
            sim_c = sim - sim.mean(axis=1, keepdims=True)
            ss_a = (acts_c * acts_c).sum(axis=0)
            ss_s = (sim_c * sim_c).sum(axis=1)
            num = sim_c @ acts_c
            den = np.sqrt(np.outer(ss_s, ss_a))
            valid = (ss_s[:, None] > ZERO_VARIANCE) & (ss_a[None, :] > ZERO_VARIANCE)
            corr = np.zeros_like(num)
            np.divide(num, den, out=corr, where=valid)
            total += np.clip(corr, -1.0, 1.0)
        return total / len(self.corpus)


def simulator_score(acorpus: ActivationCorpus, grammar: LabelGrammar, v: np.ndarray, layer: int, label: Label) -> float:
    """Mean over inputs of the Pearson correlation between true and simulated activations."""
    grammar.extension(label)
    scores = [pearson(a, simulate(grammar, label, ids))
              for a, ids in zip(acorpus.activations(v, layer), acorpus.corpus)]
    return float(np.mean(scores))


def _pick(scores: np.ndarray, labels: Sequence[Label]) -> Tuple[Label, float]:
    # labels are sorted by rendering, and argmax keeps the first maximum
    best = int(np.argmax(scores))
    return labels[best], float(scores[best])


def label_feature(acorpus: ActivationCorpus, grammar: LabelGrammar, v: np.ndarray, layer: int,
                  candidates: Optional[Sequence[Label]] = None) -> Tuple[Label, float]:
    """Exhaustive argmax of the simulator score; ties go to the lexicographically smallest rendering."""
    candidates = list(grammar.labels if candidates is None else candidates)
    if not candidates:
        raise ValueError("Label search needs at least one candidate")
    candidates.sort(key=lambda label: label.rendered)
    scores = acorpus.score_matrix(grammar, v, layer, candidates)[:, 0]
    return _pick(scores, candidates)


def label_features(acorpus: ActivationCorpus, grammar: LabelGrammar, features: Sequence[FeatureDirection],
                   min_score: float = float("-inf")) -> Dict[str, Tuple[Label, float]]:
    """Best label per feature, batched by layer; features scoring below `min_score` are dropped."""
    labeled: Dict[str, Tuple[Label, float]] = {}
    by_layer: Dict[int, List[FeatureDirection]] = {}
    for f in features:
        by_layer.setdefault(f.layer, []).append(f)
    for layer, group in sorted(by_layer.items()):
        matrix = acorpus.score_matrix(grammar, np.stack([f.vector for f in group]), layer)
        for column, f in enumerate(group):
            label, score = _pick(matrix[:, column], grammar.labels)
            if score >= min_score:
                labeled[f.id] = (label, score)
    dropped = len(features) - len(labeled)
    if dropped:
        logger.warning(f"Dropped {dropped} features scoring below {min_score}")
    logger.info(f"Labeled {len(labeled)} features")
    return labeled


def top_exemplars(acorpus: ActivationCorpus, v: np.ndarray, layer: int, k: int) -> List[List[int]]:
    """The `k` corpus inputs with the highest peak activation (stable order on ties)."""
    peaks = np.array([a.max() for a in acorpus.activations(v, layer)])
    order = np.argsort(-peaks, kind="stable")[:k]
    return [acorpus.corpus[i] for i in order]


# prompt templates

TEMPLATES: Tuple[Tuple[str, ...], ...] = (
    ("what", "does", "{slot}", "mean", "{layer}", "?"),
    ("describe", "feature", "{slot}", "{layer}", ":"),
    ("what", "{slot}", "encodes", "{layer}", "?"),
    ("{layer}", ",", "{slot}", "activates", "for", "what", "?"),
)
LAYER_MODES = ("true", "wrong", "none")


def render_feature_prompt(template_id: int, layer: int, n_layers: int, layer_mode: str = "true") -> Tuple[List[str], int]:
    """Prompt tokens and the slot index; `layer_mode` swaps in a wrong layer or drops the annotation."""
    if not 0 <= template_id < len(TEMPLATES):
        raise ValueError(f"Unknown template id {template_id}")
    if layer_mode not in LAYER_MODES:
        raise ValueError(f"Unknown layer mode {layer_mode!r}")
    shown = (layer + 1) % n_layers if layer_mode == "wrong" else layer
    tokens = [BOS]
    slot_index = -1
    for part in TEMPLATES[template_id]:
        if part == "{slot}":
            tokens += [SLOT_OPEN, SLOT, SLOT_CLOSE]
            slot_index = len(tokens) - 2
        elif part == "{layer}":
            if layer_mode != "none":
                tokens += ["at", "layer", layer_token(shown)]
        else:
            tokens.append(part)
    return tokens, slot_index


@dataclass
class FeatureExplanationRecord:
    feature_id: str
    layer: int
    source: str
    template_id: int
    prompt_ids: List[int]
    slot_index: int
    gold_label: str
    gold_ids: List[int]
    vector: np.ndarray

    def to_example(self) -> TrainingExample:
        ids = self.prompt_ids + self.gold_ids
        mask = [False] * len(self.prompt_ids) + [True] * len(self.gold_ids)
        return TrainingExample(ids, mask, [SlotRef(self.slot_index, self.vector, self.layer)])

    def to_record(self, vocab: Vocabulary) -> Dict:
        return {
            "feature_id": self.feature_id, "layer": self.layer, "source": self.source,
            "template_id": self.template_id, "prompt_ids": self.prompt_ids, "slot_index": self.slot_index,
            "gold_label": self.gold_label, "gold_tokens": " ".join(vocab.decode(self.gold_ids)),
            "vector": encode_vector(self.vector),
        }

    @classmethod
    def from_record(cls, row: Dict, vocab: Vocabulary) -> "FeatureExplanationRecord":
        return cls(row["feature_id"], int(row["layer"]), row["source"], int(row["template_id"]),
                   list(row["prompt_ids"]), int(row["slot_index"]), row["gold_label"],
                   vocab.encode(row["gold_tokens"].split(" ")), decode_vector(row["vector"]))


@dataclass
class FeatureDataset:
    train: List[FeatureExplanationRecord] = field(default_factory=list)
    held_out: List[FeatureExplanationRecord] = field(default_factory=list)

    @property
    def held_out_ids(self) -> List[str]:
        return sorted({r.feature_id for r in self.held_out})


def _record(grammar: LabelGrammar, feature: FeatureDirection, label: Label, template_id: int,
            n_layers: int) -> FeatureExplanationRecord:
    prompt, slot_index = render_feature_prompt(template_id, feature.layer, n_layers)
    return FeatureExplanationRecord(
        feature.id, feature.layer, feature.source, template_id, grammar.vocab.encode(prompt), slot_index,
        label.key, grammar.gold_ids(label), np.asarray(feature.vector, dtype=np.float32),
    )


def build_feature_dataset(features: Sequence[FeatureDirection], labels: Dict[str, Tuple[Label, float]],
                          grammar: LabelGrammar, n_layers: int, held_out_per_layer: int, seed: int) -> FeatureDataset:
    """
    Train records get one uniformly sampled template; held-out features are
    rendered under every template. Held-out features are drawn per layer.
    """
    labeled_layers = {f.layer for f in features if f.id in labels}
    rng = np.random.default_rng(seed)
    by_layer: Dict[int, List[FeatureDirection]] = {}
    for f in features:
        if f.layer not in labeled_layers:
            raise ValueError(f"Feature {f.id} is on layer {f.layer}, which has no labeled corpus coverage")
        if f.id in labels:
            by_layer.setdefault(f.layer, []).append(f)

    dataset = FeatureDataset()
    for layer in sorted(by_layer):
        group = sorted(by_layer[layer], key=lambda f: f.id)
        held = set(rng.choice(len(group), size=min(held_out_per_layer, len(group)), replace=False).tolist())
        for i, f in enumerate(group):
            label = labels[f.id][0]
            if i in held:
                dataset.held_out.extend(_record(grammar, f, label, t, n_layers) for t in range(len(TEMPLATES)))
            else:
                dataset.train.append(_record(grammar, f, label, int(rng.integers(len(TEMPLATES))), n_layers))
    logger.info(f"Feature dataset: {len(dataset.train)} train records, {len(dataset.held_out)} held-out records")
    return dataset


def subsample_fraction(records: Sequence[FeatureExplanationRecord], fraction: float, seed: int) -> List[FeatureExplanationRecord]:
    """Per-layer uniform subsample keeping `fraction` of the train records."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    if fraction == 1:
        return list(records)
    rng = np.random.default_rng(seed)
    by_layer: Dict[int, List[FeatureExplanationRecord]] = {}
    for r in records:
        by_layer.setdefault(r.layer, []).append(r)
    kept = []
    for layer in sorted(by_layer):
        group = by_layer[layer]
        count = int(round(fraction * len(group)))
        picks = sorted(rng.choice(len(group), size=count, replace=False).tolist())
        kept.extend(group[i] for i in picks)
    if not kept:
        raise ValueError(f"fraction {fraction} leaves no training records")
    return kept


def train_explainer_feat(explainer: Transformer, records: Sequence[FeatureExplanationRecord],
                         projections: ProjectionSet, mode: str, config: OptimizerConfig,
                         on_epoch_end: Optional[Callable[[int, Transformer], Dict[str, float]]] = None):
    """Fine-tune on label tokens with Pi_l v in the slot; projections train unless mode is frozen-pretrained."""
    mode = canonical_mode(mode)
    for r in records:
        if r.vector.shape != (projections.d_in,):
            raise ValueError(f"Feature {r.feature_id} has dimension {r.vector.shape[0]}, "
                             f"projection expects {projections.d_in}")
    examples = [r.to_example() for r in records]
    return fine_tune(explainer, examples, config, projections, train_projections=mode != "frozen-pretrained",
                     on_epoch_end=on_epoch_end)


def describe(explainer: Transformer, projections: Optional[ProjectionSet], v: np.ndarray, layer: int,
             template_id: int, vocab: Vocabulary, target_layers: int, layer_mode: str = "true",
             scale: float = 1.0) -> List[str]:
    """Greedy decode of a label for `v`; returns the tokens before the end token."""
    prompt, slot_index = render_feature_prompt(template_id, layer, target_layers, layer_mode)
    vector = np.asarray(v, dtype=np.float64) * scale
    if projections is not None:
        vector = projections.project_numpy(vector, layer)
    slot = np.asarray(vector, dtype=explainer.dtype)
    out = explainer.greedy_decode(TokenSeq(vocab.encode(prompt), [(slot_index, slot)]), MAX_LABEL_TOKENS + 1,
                                  stop_id=vocab.eos_id)
    tokens = vocab.decode(out)
    return tokens[:-1] if tokens and tokens[-1] == EOS else tokens


def judge_records(explainer: Transformer, projections: Optional[ProjectionSet], records: Sequence[FeatureExplanationRecord],
                  grammar: LabelGrammar, corpus_tokens, target_layers: int, layer_mode: str = "true"
                  ) -> List[Tuple[str, List[str], float]]:
    """(feature id, predicted tokens, lexical judge score) per record."""
    vocab = grammar.vocab
    out = []
    for r in records:
        predicted = describe(explainer, projections, r.vector, r.layer, r.template_id, vocab, target_layers, layer_mode)
        gold = grammar.get(r.gold_label).tokens
        out.append((r.feature_id, predicted, lexical_judge(predicted, gold, grammar, corpus_tokens)))
    return out


def layer_annotation_agreement(explainer: Transformer, projections: Optional[ProjectionSet],
                               records: Sequence[FeatureExplanationRecord], vocab: Vocabulary,
                               target_layers: int) -> Dict[str, float]:
    """Fraction of records whose decoded label is unchanged with a wrong or a removed layer annotation."""
    if not records:
        return {"wrong": 0.0, "none": 0.0}
    agree = {"wrong": 0, "none": 0}
    for r in records:
        base = describe(explainer, projections, r.vector, r.layer, r.template_id, vocab, target_layers)
        for mode in agree:
            other = describe(explainer, projections, r.vector, r.layer, r.template_id, vocab, target_layers, mode)
            agree[mode] += int(other == base)
    return {mode: count / len(records) for mode, count in agree.items()}
