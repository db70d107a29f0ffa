"""
Untrained comparison methods: nearest-neighbour label retrieval, SelfIE-style
prompting of the base explainer with a scale sweep, and constrained zero-shot
prompting for the patch and ablate tasks.
"""

import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import joblib
import numpy as np

from .feature_desc import MAX_LABEL_TOKENS, ActivationCorpus, LabelGrammar, simulator_score
from .metrics import CHANGED_PREFIX, UNCHANGED_PREFIX, render_branch
from .transformer import TokenSeq, Transformer
from .vocab import BOS, EOS, QUOTE_CLOSE, QUOTE_OPEN, SLOT, SLOT_CLOSE, SLOT_OPEN, Vocabulary

logger = logging.getLogger(__name__)

SELFIE_SCALES = (1.0, 5.0, 10.0, 25.0, 50.0)


@dataclass
class FeatureIndex:
    """Training features sorted by id, so argmax ties resolve to the lowest id."""
    ids: List[str] = field(default_factory=list)
    layers: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    vectors: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    labels: List[str] = field(default_factory=list)

    @classmethod
    def build(cls, entries: Sequence[Tuple[str, int, np.ndarray, str]]) -> "FeatureIndex":
        entries = sorted(entries, key=lambda e: e[0])
        ids = [e[0] for e in entries]
        if len(set(ids)) != len(ids):
            raise ValueError("Feature index ids must be unique")
        if not entries:
            return cls()
        vectors = np.stack([np.asarray(e[2], dtype=np.float64) for e in entries])
        norms = np.linalg.norm(vectors, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-4):
            raise ValueError("Feature index vectors must be unit norm")
        return cls(ids, np.array([e[1] for e in entries], dtype=np.int64), vectors, [e[3] for e in entries])

    def __len__(self):
        return len(self.ids)

    def _best(self, v: np.ndarray, rows: np.ndarray) -> str:
        scores = self.vectors[rows] @ np.asarray(v, dtype=np.float64)
        return self.labels[int(rows[int(np.argmax(scores))])]

    def nn_layer(self, v: np.ndarray, layer: int) -> str:
        rows = np.nonzero(self.layers == layer)[0]
        if rows.size == 0:
            raise ValueError(f"Feature index has no training features on layer {layer}")
        return self._best(v, rows)

    def nn_all(self, v: np.ndarray) -> str:
        if not self.ids:
            raise ValueError("Feature index is empty")
        return self._best(v, np.arange(len(self.ids)))

    def save(self, path: str) -> None:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        joblib.dump({"ids": self.ids, "layers": self.layers, "vectors": self.vectors, "labels": self.labels}, path)

    @classmethod
    def load(cls, path: str) -> "FeatureIndex":
        data = joblib.load(path)
        return cls(data["ids"], data["layers"], data["vectors"], data["labels"])


def selfie_prompt(vocab: Vocabulary) -> Tuple[List[int], List[int]]:
    """Definition prompt with the vector inserted twice; returns ids and slot positions."""
    quoted = ["'", SLOT_OPEN, SLOT, SLOT_CLOSE, "'"]
    tokens = [BOS, "what", "is", "the", "meaning", "of", "the", "word", *quoted, "?",
              "the", "meaning", "of", "the", "word", *quoted, "is"]
    slots = [i for i, t in enumerate(tokens) if t == SLOT]
    return vocab.encode(tokens), slots


@dataclass
class SelfieResult:
    tokens: List[str]
    score: float
    per_scale: Dict[float, float]
    decodes: Dict[float, List[str]]


def selfie_describe(explainer: Transformer, v: np.ndarray, layer: int, acorpus: ActivationCorpus,
                    grammar: LabelGrammar, scales: Sequence[float] = SELFIE_SCALES) -> SelfieResult:
    """Decode with s*v for every scale and keep the decode with the highest simulator score."""
    vocab = grammar.vocab
    ids, slot_positions = selfie_prompt(vocab)
    per_scale: Dict[float, float] = {}
    decodes: Dict[float, List[str]] = {}
    for scale in scales:
        vector = (np.asarray(v, dtype=np.float64) * scale).astype(explainer.dtype)
        out = vocab.decode(explainer.greedy_decode(TokenSeq(ids, [(p, vector) for p in slot_positions]),
                                                   MAX_LABEL_TOKENS + 1, stop_id=vocab.eos_id))
        tokens = out[:-1] if out and out[-1] == EOS else out
        label = grammar.parse(tokens)
        decodes[scale] = tokens
        per_scale[scale] = simulator_score(acorpus, grammar, v, layer, label) if label is not None else 0.0
    best = max(scales, key=lambda s: (per_scale[s], -list(scales).index(s)))
    return SelfieResult(decodes[best], per_scale[best], per_scale, decodes)


def zero_shot_scaffold() -> List[str]:
    return ["respond", "with", "one", "of", ":", *render_branch(True, "X"), "or", *render_branch(False, "X")]


def zero_shot_branch(explainer: Transformer, prompt_ids: Sequence[int], slots: Sequence[Tuple[int, np.ndarray]],
                     candidates: Sequence[int], vocab: Vocabulary) -> List[str]:
    """
    Constrained two-branch answer: the branch whose prefix has the higher
    per-token log-likelihood (ties go to "unchanged"), then the best-scoring
    candidate token. The two prefixes differ in length, so summed
    log-likelihoods would favour the shorter one.
    """
    if not candidates:
        raise ValueError("Zero-shot decoding needs at least one content candidate")
    ids = list(prompt_ids) + vocab.encode(zero_shot_scaffold())
    seq = TokenSeq(ids, list(slots))
    changed = vocab.encode(CHANGED_PREFIX + [QUOTE_OPEN])
    unchanged = vocab.encode(UNCHANGED_PREFIX + [QUOTE_OPEN])
    has_changed = (explainer.sequence_log_likelihood(seq, changed) / len(changed)
                   > explainer.sequence_log_likelihood(seq, unchanged) / len(unchanged))
    prefix = changed if has_changed else unchanged
    logits = explainer.forward(TokenSeq(ids + prefix, list(slots)), tap_layers=()).logits[-1]
    candidates = sorted(set(candidates))
    content = candidates[int(np.argmax(logits[candidates]))]
    return render_branch(has_changed, vocab.tokens[content])


def zero_shot_patch(explainer: Transformer, record, vocab: Vocabulary, candidates: Sequence[int],
                    projections=None) -> List[str]:
    slots = []
    if record.slot_index is not None:
        v = np.asarray(record.vector, dtype=np.float64)
        if projections is not None:
            v = projections.project_numpy(v, record.projection_layer)
        slots = [(record.slot_index, np.asarray(v, dtype=explainer.dtype))]
    return zero_shot_branch(explainer, record.prompt_ids, slots, candidates, vocab)


def zero_shot_ablate(explainer: Transformer, record, vocab: Vocabulary) -> List[str]:
    return zero_shot_branch(explainer, record.prompt_ids, [], vocab.letter_ids(), vocab)
