"""
Activation patching explanations.

Counterfactual fact pairs share a relation and an option list. For a token
position and a layer chunk, the counterfactual run's post-layer residuals are
averaged over the chunk and written into every chunk layer of the original
run; the explanation says whether the argmax answer changes and what it is.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from .codec_helpers import decode_vector, encode_vector
from .metrics import render_branch
from .projection import ProjectionSet
from .training import OptimizerConfig, SlotRef, TrainingExample, fine_tune
from .transformer import Intervention, TokenSeq, Transformer
from .vocab import (BOS, EOS, QUOTE_CLOSE, QUOTE_OPEN, SLOT, SLOT_CLOSE, SLOT_OPEN, Vocabulary, layer_token,
                    position_token)
from .world import FACT_RELATION_POS, FACT_SUBJECT_POS, FactTriple, World, fact_triple

logger = logging.getLogger(__name__)

N_CHUNKS = 4
TOKEN_TYPES = ("subject-final", "relation", "orig-option", "new-option", "other-option", "other")
ABLATION_FLAGS = ("activation", "layer", "token")
MAX_BRANCH_TOKENS = 12


@dataclass(frozen=True)
class LayerChunk:
    ordinal: int
    layers: Tuple[int, ...]


def layer_chunks(n_layers: int) -> List[LayerChunk]:
    """Four contiguous chunks covering [0, n_layers); earlier chunks take the extra layers."""
    if n_layers < N_CHUNKS:
        raise ValueError(f"Layer chunking needs at least {N_CHUNKS} layers, got {n_layers}")
    base, extra = divmod(n_layers, N_CHUNKS)
    chunks = []
    start = 0
    for ordinal in range(N_CHUNKS):
        size = base + (1 if ordinal < extra else 0)
        chunks.append(LayerChunk(ordinal, tuple(range(start, start + size))))
        start += size
    return chunks


@dataclass
class CounterfactualPair:
    pair_id: str
    x: FactTriple
    x_prime: FactTriple


def make_counterfactual_pairs(world: World, seed: int, max_pairs: Optional[int] = None) -> List[CounterfactualPair]:
    """
    Ordered pairs of facts with the same relation and different objects.

    Both prompts share one option list holding both objects, so they align
    token by token. `max_pairs` samples uniformly without replacement.
    """
    rng = np.random.default_rng(seed)
    objects = world.vocab.classes["object"]
    candidates = []
    for relation, facts in sorted(world.facts_by_relation().items()):
        if len({f.object for f in facts}) < 2:
            raise ValueError(f"Relation {relation} has a single object; no counterfactual pairs exist")
        for a in facts:
            for b in facts:
                if a.object != b.object:
                    candidates.append((a, b))
    if max_pairs is not None and max_pairs < len(candidates):
        keep = sorted(rng.choice(len(candidates), size=max_pairs, replace=False).tolist())
        candidates = [candidates[i] for i in keep]

    pairs = []
    for n, (a, b) in enumerate(candidates):
        x = fact_triple(a, objects, rng, include=[b.object])
        pairs.append(CounterfactualPair(f"p{n:05d}", x, FactTriple(b, x.options)))
    logger.info(f"Built {len(pairs)} counterfactual pairs")
    return pairs


@dataclass
class PatchOutcome:
    has_changed: bool
    content: int
    clean: int
    vector: np.ndarray


def patch_outcome(model: Transformer, x: Sequence[int], x_prime: Sequence[int], t: int, chunk: LayerChunk) -> PatchOutcome:
    """Patch the chunk-mean of h(x') at position t into every chunk layer of the run on x."""
    if not (0 <= t < len(x) and 0 <= t < len(x_prime)):
        raise ValueError(f"Position {t} out of range for lengths {len(x)} and {len(x_prime)}")
    layers = list(chunk.layers)
    counterfactual = model.forward(TokenSeq(list(x_prime)), tap_layers=layers)
    vector = np.mean([counterfactual.residuals[l][t] for l in layers], axis=0).astype(model.dtype)
    clean = model.forward(TokenSeq(list(x)), tap_layers=()).next_token()
    patched = model.forward_patched(TokenSeq(list(x)), [Intervention(chunk.layers, t, vector)], tap_layers=())
    content = patched.next_token()
    return PatchOutcome(content != clean, content, clean, vector)


def token_type(pair: CounterfactualPair, t: int) -> str:
    if t == FACT_SUBJECT_POS:
        return "subject-final"
    if t == FACT_RELATION_POS:
        return "relation"
    token = pair.x.tokens()[t]
    if token == pair.x.fact.object:
        return "orig-option"
    if token == pair.x_prime.fact.object:
        return "new-option"
    if token in pair.x.options:
        return "other-option"
    return "other"


@dataclass
class PatchSample:
    sample_id: str
    pair_id: str
    x: List[int]
    x_prime: List[int]
    position: int
    token_type: str
    chunk: int
    layers: Tuple[int, ...]
    vector: np.ndarray
    has_changed: bool
    content: str

    def to_record(self) -> Dict:
        return {
            "sample_id": self.sample_id, "pair_id": self.pair_id, "x": self.x, "x_prime": self.x_prime,
            "position": self.position, "token_type": self.token_type, "chunk": self.chunk,
            "layers": list(self.layers), "vector": encode_vector(self.vector),
            "has_changed": self.has_changed, "content": self.content,
        }

    @classmethod
    def from_record(cls, row: Dict) -> "PatchSample":
        return cls(row["sample_id"], row["pair_id"], list(row["x"]), list(row["x_prime"]), int(row["position"]),
                   row["token_type"], int(row["chunk"]), tuple(row["layers"]), decode_vector(row["vector"]),
                   bool(row["has_changed"]), row["content"])


def _pair_samples(model: Transformer, vocab: Vocabulary, pair: CounterfactualPair,
                  chunks: Sequence[LayerChunk]) -> List[PatchSample]:
    x = vocab.encode(pair.x.tokens())
    x_prime = vocab.encode(pair.x_prime.tokens())
    samples = []
    for chunk in chunks:
        for t in range(len(x)):
            outcome = patch_outcome(model, x, x_prime, t, chunk)
            samples.append(PatchSample(
                f"{pair.pair_id}-c{chunk.ordinal}-t{t:02d}", pair.pair_id, x, x_prime, t, token_type(pair, t),
                chunk.ordinal, chunk.layers, outcome.vector.astype(np.float32), outcome.has_changed,
                vocab.tokens[outcome.content],
            ))
    return samples


def generate_patch_samples(model: Transformer, vocab: Vocabulary, pairs: Sequence[CounterfactualPair],
                           n_jobs: int = 1) -> List[PatchSample]:
    """Label every (pair, chunk, position) over a read-only handle."""
    handle = model.read_only()
    chunks = layer_chunks(model.config.n_layers)
    groups = Parallel(n_jobs=n_jobs, prefer="threads")(
        delayed(_pair_samples)(handle, vocab, pair, chunks) for pair in pairs
    )
    samples = [s for group in groups for s in group]
    changed = sum(s.has_changed for s in samples)
    logger.info(f"Labeled {len(samples)} patch samples ({changed} changed)")
    return samples


def verify_patch_labels(model: Transformer, vocab: Vocabulary, samples: Sequence[PatchSample]) -> float:
    """Fraction of samples whose stored (has_changed, content) re-computes exactly."""
    if not samples:
        return 1.0
    chunks = {c.ordinal: c for c in layer_chunks(model.config.n_layers)}
    hits = 0
    for s in samples:
        outcome = patch_outcome(model, s.x, s.x_prime, s.position, chunks[s.chunk])
        hits += int(outcome.has_changed == s.has_changed and vocab.tokens[outcome.content] == s.content)
    return hits / len(samples)


def balance_cells(cells: Dict[tuple, List], cap: int, seed: int) -> Tuple[Dict[tuple, List], List[tuple]]:
    """Uniform downsampling without replacement to min(cap, size) per cell; also returns (cell, available, kept) rows."""
    if cap < 0:
        raise ValueError(f"cap must be non-negative, got {cap}")
    rng = np.random.default_rng(seed)
    kept: Dict[tuple, List] = {}
    rows = []
    for key in sorted(cells):
        items = cells[key]
        count = min(cap, len(items))
        picks = sorted(rng.choice(len(items), size=count, replace=False).tolist()) if count else []
        kept[key] = [items[i] for i in picks]
        rows.append((key, len(items), count))
        if not items:
            logger.warning(f"Balancing cell {key} is empty")
    return kept, rows


def balance_patch_dataset(samples: Sequence[PatchSample], cap: int, seed: int) -> Tuple[List[PatchSample], pd.DataFrame]:
    """Balance per (token-type, chunk, has_changed); every type x chunk x class cell appears in the census."""
    types = sorted({s.token_type for s in samples}, key=TOKEN_TYPES.index)
    chunk_ids = sorted({s.chunk for s in samples})
    cells: Dict[tuple, List[PatchSample]] = {
        (TOKEN_TYPES.index(tt), c, hc): [] for tt in types for c in chunk_ids for hc in (False, True)
    }
    for s in sorted(samples, key=lambda s: s.sample_id):
        cells[(TOKEN_TYPES.index(s.token_type), s.chunk, s.has_changed)].append(s)
    kept, rows = balance_cells(cells, cap, seed)
    census = pd.DataFrame(
        [{"token_type": TOKEN_TYPES[k[0]], "chunk": k[1], "has_changed": k[2], "available": n, "kept": m}
         for k, n, m in rows],
        columns=["token_type", "chunk", "has_changed", "available", "kept"],
    )
    balanced = sorted((s for group in kept.values() for s in group), key=lambda s: s.sample_id)
    logger.info(f"Balanced patch dataset: {len(balanced)} of {len(samples)} samples kept")
    return balanced, census


@dataclass
class PatchRecord:
    sample_id: str
    prompt_ids: List[int]
    slot_index: Optional[int]
    gold_ids: List[int]
    vector: np.ndarray
    projection_layer: int
    flags: Tuple[str, ...] = ()

    def to_example(self) -> TrainingExample:
        slots = [] if self.slot_index is None else [SlotRef(self.slot_index, self.vector, self.projection_layer)]
        return TrainingExample(self.prompt_ids + self.gold_ids,
                               [False] * len(self.prompt_ids) + [True] * len(self.gold_ids), slots)

    def to_record(self, vocab: Vocabulary) -> Dict:
        return {
            "sample_id": self.sample_id, "prompt_ids": self.prompt_ids, "slot_index": self.slot_index,
            "gold_tokens": " ".join(vocab.decode(self.gold_ids)), "vector": encode_vector(self.vector),
            "projection_layer": self.projection_layer, "flags": list(self.flags),
        }

    @classmethod
    def from_record(cls, row: Dict, vocab: Vocabulary) -> "PatchRecord":
        return cls(row["sample_id"], list(row["prompt_ids"]), row["slot_index"],
                   vocab.encode(row["gold_tokens"].split(" ")), decode_vector(row["vector"]),
                   int(row["projection_layer"]), tuple(row["flags"]))


def render_patch_record(sample: PatchSample, vocab: Vocabulary, template_id: int = 0,
                        flags: Sequence[str] = ()) -> PatchRecord:
    """Render the prompt without the ablated components; the gold is the two-branch template."""
    flags = tuple(sorted(set(flags)))
    unknown = [f for f in flags if f not in ABLATION_FLAGS]
    if unknown:
        raise ValueError(f"Unknown ablation flags {unknown}")
    if len(flags) == len(ABLATION_FLAGS):
        raise ValueError("Ablating activation, layer and token together leaves nothing to explain")

    x_tokens = vocab.decode(sample.x)
    prompt = [BOS, QUOTE_OPEN, *x_tokens[1:], QUOTE_CLOSE]
    slot_index = None
    lead = ["if", "feature"] if template_id == 0 else ["feature"]
    prompt += lead
    if "activation" not in flags:
        prompt += [SLOT_OPEN, SLOT, SLOT_CLOSE]
        slot_index = len(prompt) - 2
    prompt += ["is", "patched"]
    if "layer" not in flags:
        prompt += ["at", "layers", *[layer_token(l) for l in sample.layers]]
    if "token" not in flags:
        prompt += ["in", "token", position_token(sample.position), x_tokens[sample.position]]
    prompt += [",", "how", "would", "the", "output", "change", "?"]

    gold = render_branch(sample.has_changed, sample.content) + [EOS]
    return PatchRecord(sample.sample_id, vocab.encode(prompt), slot_index, vocab.encode(gold),
                       np.asarray(sample.vector, dtype=np.float32), sample.layers[0], flags)


def train_explainer_patch(explainer: Transformer, records: Sequence[PatchRecord], projections: Optional[ProjectionSet],
                          config: OptimizerConfig, train_projections: bool = True,
                          on_epoch_end: Optional[Callable[[int, Transformer], Dict[str, float]]] = None):
    return fine_tune(explainer, [r.to_example() for r in records], config, projections, train_projections,
                     on_epoch_end=on_epoch_end)


def predict_branch(explainer: Transformer, projections: Optional[ProjectionSet], prompt_ids: Sequence[int],
                   slot_index: Optional[int], vector: np.ndarray, projection_layer: int, vocab: Vocabulary) -> List[str]:
    """Greedy two-branch decode for one rendered record; returns tokens before the end token."""
    slots = []
    if slot_index is not None:
        v = np.asarray(vector, dtype=np.float64)
        if projections is not None:
            v = projections.project_numpy(v, projection_layer)
        slots = [(slot_index, np.asarray(v, dtype=explainer.dtype))]
    out = vocab.decode(explainer.greedy_decode(TokenSeq(list(prompt_ids), slots), MAX_BRANCH_TOKENS,
                                               stop_id=vocab.eos_id))
    return out[:-1] if out and out[-1] == EOS else out


# location probe

@dataclass
class LocationRecord:
    record_id: str
    x: List[int]
    position: int
    chunk: int
    layers: Tuple[int, ...]
    vector: np.ndarray

    def prompt(self, vocab: Vocabulary) -> Tuple[List[int], int]:
        tokens = [BOS, "where", "did", SLOT_OPEN, SLOT, SLOT_CLOSE, "come", "from", "in", QUOTE_OPEN,
                  *vocab.decode(self.x[1:]), QUOTE_CLOSE, "?"]
        return vocab.encode(tokens), 4

    def gold(self, vocab: Vocabulary) -> List[int]:
        return vocab.encode(["token", position_token(self.position), "at", "layers",
                             *[layer_token(l) for l in self.layers], ".", EOS])

    def to_example(self, vocab: Vocabulary) -> TrainingExample:
        prompt, slot_index = self.prompt(vocab)
        gold = self.gold(vocab)
        return TrainingExample(prompt + gold, [False] * len(prompt) + [True] * len(gold),
                               [SlotRef(slot_index, self.vector)])


def make_location_records(model: Transformer, vocab: Vocabulary, prompts: Sequence[Sequence[int]]) -> List[LocationRecord]:
    """One record per (prompt, position, chunk): v is the chunk-mean residual at that position."""
    chunks = layer_chunks(model.config.n_layers)
    records = []
    for n, x in enumerate(prompts):
        trace = model.forward(TokenSeq(list(x)))
        for chunk in chunks:
            for t in range(len(x)):
                v = np.mean([trace.residuals[l][t] for l in chunk.layers], axis=0).astype(np.float32)
                records.append(LocationRecord(f"loc{n:04d}-c{chunk.ordinal}-t{t:02d}", list(x), t, chunk.ordinal,
                                              chunk.layers, v))
    return records


def decode_location(explainer: Transformer, v: np.ndarray, x: Sequence[int], vocab: Vocabulary,
                    chunks: Sequence[LayerChunk]) -> Optional[Tuple[int, int]]:
    """Greedy decode of "token @t at layers ..."; returns (t, chunk ordinal) or None if unparseable."""
    record = LocationRecord("query", list(x), 0, 0, (), np.asarray(v, dtype=np.float32))
    prompt, slot_index = record.prompt(vocab)
    out = vocab.decode(explainer.greedy_decode(
        TokenSeq(prompt, [(slot_index, np.asarray(v, dtype=explainer.dtype))]), 4 + len(chunks[0].layers) + 2,
        stop_id=vocab.eos_id))
    if len(out) < 4 or out[0] != "token" or not out[1].startswith("@") or out[2:4] != ["at", "layers"]:
        return None
    layer_part = []
    for token in out[4:]:
        if token in (".", EOS):
            break
        layer_part.append(token)
    by_layers = {tuple(layer_token(l) for l in c.layers): c.ordinal for c in chunks}
    chunk = by_layers.get(tuple(layer_part))
    if chunk is None:
        return None
    return int(out[1][1:]), chunk
