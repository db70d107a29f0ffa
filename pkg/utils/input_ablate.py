"""
Input ablation explanations over hinted multiple-choice questions.

A hint naming one option is inserted after the question stem. The
explanation states whether removing the hint changes the target's answer
and what the answer without the hint is.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from .act_patch import balance_cells
from .metrics import render_branch
from .training import OptimizerConfig, TrainingExample, fine_tune, train_lm
from .transformer import ModelConfig, TokenSeq, Transformer
from .vocab import BOS, EOS, OPTION_LETTERS, QUOTE_CLOSE, QUOTE_OPEN, Vocabulary
from .world import ANSWER_SCAFFOLD, McQuestion, World, fact_sequences

logger = logging.getLogger(__name__)

HINT_STYLES: Dict[int, Tuple[str, ...]] = {
    0: ("hint", "{option}"),
    1: ("hint", "the", "answer", "is", "{option}"),
}


def hint_span(option: str, style: int) -> List[str]:
    if style not in HINT_STYLES:
        raise ValueError(f"Unknown hint style {style}; expected one of {sorted(HINT_STYLES)}")
    if option not in OPTION_LETTERS:
        raise ValueError(f"Hint option must be one of {OPTION_LETTERS}, got {option!r}")
    return [option if part == "{option}" else part for part in HINT_STYLES[style]]


def question_prompt(question: McQuestion) -> List[str]:
    """The question c without any hint."""
    return question.stem() + ANSWER_SCAFFOLD


def inject_hint(question: McQuestion, option: Optional[str], style: int = 0) -> List[str]:
    """Stem, then the hint span, then the answer scaffold; `None` means no hint."""
    if option is None:
        return question_prompt(question)
    return question.stem() + hint_span(option, style) + ANSWER_SCAFFOLD


def strip_hint(tokens: Sequence[str], question: McQuestion, style: int) -> List[str]:
    stem_len = len(question.stem())
    span = len(HINT_STYLES[style])
    return list(tokens[:stem_len]) + list(tokens[stem_len + span:])


def answer_of(model: Transformer, vocab: Vocabulary, tokens: Sequence[str]) -> Optional[str]:
    """Greedy single-token answer; None when it is not an option letter."""
    token = vocab.tokens[model.forward(TokenSeq(vocab.encode(tokens)), tap_layers=()).next_token()]
    return token if token in OPTION_LETTERS else None


@dataclass
class AblationOutcome:
    has_changed: bool
    content: str
    hinted_answer: str


def ablation_outcome(model: Transformer, vocab: Vocabulary, question: McQuestion, hint: Optional[str],
                     style: int = 0) -> Optional[AblationOutcome]:
    """content is M(c); has_changed is M([c, hint]) != M(c). None when either answer is invalid."""
    plain = answer_of(model, vocab, question_prompt(question))
    hinted = plain if hint is None else answer_of(model, vocab, inject_hint(question, hint, style))
    if plain is None or hinted is None:
        return None
    return AblationOutcome(hinted != plain, plain, hinted)


@dataclass
class HintedSample:
    sample_id: str
    question_id: str
    hint: str
    style: int
    hinted_answer: str
    has_changed: bool
    content: str

    def to_record(self) -> Dict:
        return {"sample_id": self.sample_id, "question_id": self.question_id, "hint": self.hint,
                "style": self.style, "hinted_answer": self.hinted_answer, "has_changed": self.has_changed,
                "content": self.content}

    @classmethod
    def from_record(cls, row: Dict) -> "HintedSample":
        return cls(row["sample_id"], row["question_id"], row["hint"], int(row["style"]), row["hinted_answer"],
                   bool(row["has_changed"]), row["content"])


def _question_samples(model: Transformer, vocab: Vocabulary, question: McQuestion,
                      styles: Sequence[int]) -> Tuple[List[HintedSample], int]:
    samples = []
    invalid = 0
    for style in styles:
        for option in OPTION_LETTERS:
            outcome = ablation_outcome(model, vocab, question, option, style)
            if outcome is None:
                invalid += 1
                continue
            samples.append(HintedSample(f"{question.question_id}-h{option}-s{style}", question.question_id, option,
                                        style, outcome.hinted_answer, outcome.has_changed, outcome.content))
    return samples, invalid


def generate_ablate_samples(model: Transformer, world: World, styles: Sequence[int] = (0, 1),
                            n_jobs: int = 1) -> Tuple[List[HintedSample], int]:
    """Label every (question, hint option, style); returns samples and the count of invalid answers dropped."""
    handle = model.read_only()
    results = Parallel(n_jobs=n_jobs, prefer="threads")(
        delayed(_question_samples)(handle, world.vocab, q, styles) for q in world.questions
    )
    samples = [s for group, _ in results for s in group]
    invalid = sum(n for _, n in results)
    if invalid:
        logger.warning(f"Dropped {invalid} hinted samples with an answer outside {OPTION_LETTERS}")
    logger.info(f"Labeled {len(samples)} hinted samples ({sum(s.has_changed for s in samples)} changed)")
    return samples, invalid


def changed_rate(samples: Sequence[HintedSample]) -> float:
    return sum(s.has_changed for s in samples) / len(samples) if samples else 0.0


def verify_ablate_labels(model: Transformer, world: World, samples: Sequence[HintedSample]) -> float:
    questions = {q.question_id: q for q in world.questions}
    if not samples:
        return 1.0
    hits = 0
    for s in samples:
        outcome = ablation_outcome(model, world.vocab, questions[s.question_id], s.hint, s.style)
        hits += int(outcome is not None and outcome.has_changed == s.has_changed and outcome.content == s.content)
    return hits / len(samples)


def balance_ablate_dataset(samples: Sequence[HintedSample], seed: int,
                           cap: Optional[int] = None) -> Tuple[List[HintedSample], pd.DataFrame]:
    """Balance the changed/unchanged classes; the default cap is the smaller class size."""
    cells: Dict[tuple, List[HintedSample]] = {(False,): [], (True,): []}
    for s in sorted(samples, key=lambda s: s.sample_id):
        cells[(s.has_changed,)].append(s)
    if cap is None:
        cap = min(len(v) for v in cells.values())
    kept, rows = balance_cells(cells, cap, seed)
    census = pd.DataFrame([{"has_changed": k[0], "available": n, "kept": m} for k, n, m in rows],
                          columns=["has_changed", "available", "kept"])
    balanced = sorted((s for group in kept.values() for s in group), key=lambda s: s.sample_id)
    return balanced, census


# hint-following targets

def hint_sequences(world: World, rng: np.random.Generator, follow_fraction: float,
                   hinted_per_question: int) -> List[List[int]]:
    """Unhinted questions answered from knowledge, and hinted copies answered with the hint with probability p."""
    vocab = world.vocab
    seqs = []
    for q in world.questions:
        seqs.append(vocab.encode(question_prompt(q) + [q.answer, EOS]))
        for _ in range(hinted_per_question):
            option = OPTION_LETTERS[int(rng.integers(len(OPTION_LETTERS)))]
            style = int(rng.integers(len(HINT_STYLES)))
            supervised = option if rng.random() < follow_fraction else q.answer
            seqs.append(vocab.encode(inject_hint(q, option, style) + [supervised, EOS]))
    return seqs


def target_corpus(world: World, seed: int, follow_fraction: float, part: Optional[int] = None,
                  fact_renderings: int = 4, hinted_per_question: int = 4) -> List[List[int]]:
    rng = np.random.default_rng(seed)
    corpus = [world.vocab.encode(t) for t in world.text_half(part)]
    corpus += fact_sequences(world, rng, fact_renderings)
    corpus += hint_sequences(world, rng, follow_fraction, hinted_per_question)
    return corpus


def build_hint_following_target(world: World, model_config: ModelConfig, config: OptimizerConfig,
                                follow_fraction: float, part: Optional[int] = None
                                ) -> Tuple[Transformer, List[float], float]:
    """Train a target on text, facts and hinted questions; returns model, losses and its changed-rate."""
    if not 0.0 <= follow_fraction <= 1.0:
        raise ValueError(f"follow fraction must be in [0, 1], got {follow_fraction}")
    model = Transformer(model_config)
    losses = train_lm(model, target_corpus(world, model_config.seed, follow_fraction, part), config)
    samples, _ = generate_ablate_samples(model, world)
    rate = changed_rate(samples)
    logger.info(f"Target (p={follow_fraction}, part={part}) changed-rate {rate:.3f}")
    return model, losses, rate


def sweep_follow_fraction(world: World, model_config: ModelConfig, config: OptimizerConfig,
                          fractions: Sequence[float]) -> Tuple[float, pd.DataFrame]:
    """Pick the p whose changed-rate is closest to 0.5, preferring rates inside [0.4, 0.6]."""
    rows = []
    for p in fractions:
        _, _, rate = build_hint_following_target(world, model_config, config, p)
        rows.append({"follow_fraction": p, "changed_rate": rate})
    table = pd.DataFrame(rows, columns=["follow_fraction", "changed_rate"])
    inside = table[(table.changed_rate >= 0.4) & (table.changed_rate <= 0.6)]
    pool = inside if len(inside) else table
    best = pool.iloc[int(np.argmin(np.abs(pool.changed_rate.to_numpy() - 0.5)))]
    return float(best.follow_fraction), table


# explainer records

def ablate_prompt(question: McQuestion, hint: str, style: int) -> List[str]:
    x = inject_hint(question, hint, style)
    return [BOS, QUOTE_OPEN, *x[1:], QUOTE_CLOSE, "if", "the", "hint", "was", "removed", "how", "would",
            "the", "answer", "change", "?"]


@dataclass
class AblateRecord:
    sample_id: str
    prompt_ids: List[int]
    gold_ids: List[int]

    def to_example(self) -> TrainingExample:
        return TrainingExample(self.prompt_ids + self.gold_ids,
                               [False] * len(self.prompt_ids) + [True] * len(self.gold_ids))

    def to_record(self, vocab: Vocabulary) -> Dict:
        return {"sample_id": self.sample_id, "prompt_ids": self.prompt_ids,
                "gold_tokens": " ".join(vocab.decode(self.gold_ids))}

    @classmethod
    def from_record(cls, row: Dict, vocab: Vocabulary) -> "AblateRecord":
        return cls(row["sample_id"], list(row["prompt_ids"]), vocab.encode(row["gold_tokens"].split(" ")))


def render_ablate_record(sample: HintedSample, question: McQuestion, vocab: Vocabulary) -> AblateRecord:
    """Gold is the two-branch template filled with the no-hint answer for both branches."""
    prompt = ablate_prompt(question, sample.hint, sample.style)
    gold = render_branch(sample.has_changed, sample.content) + [EOS]
    return AblateRecord(sample.sample_id, vocab.encode(prompt), vocab.encode(gold))


def train_explainer_input(explainer: Transformer, records: Sequence[AblateRecord], config: OptimizerConfig,
                          on_epoch_end: Optional[Callable[[int, Transformer], Dict[str, float]]] = None):
    return fine_tune(explainer, [r.to_example() for r in records], config, on_epoch_end=on_epoch_end)
