"""
Synthetic world: vocabulary, knowledge base, free-text corpus and
multiple-choice questions, all derived deterministically from one seed.
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .vocab import BOS, EOS, OPTION_LETTERS, UNKNOWN, Vocabulary

logger = logging.getLogger(__name__)

N_OPTIONS = 5
FACT_SUBJECT_POS = 1 + N_OPTIONS + 2
FACT_RELATION_POS = FACT_SUBJECT_POS + 1
FACT_PROMPT_LENGTH = FACT_RELATION_POS + 1

TEXT_CLASSES = ["digit", "letter", "animal", "color", "filler", "subject", "object"]


@dataclass
class WorldConfig:
    n_subjects: int = 24
    n_relations: int = 4
    n_objects: int = 12
    n_text: int = 400
    text_min: int = 6
    text_max: int = 14
    n_questions: int = 64
    seed: int = 0

    def __post_init__(self):
        for name in ("n_subjects", "n_relations", "n_objects", "n_text", "text_min", "n_questions"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.text_max < self.text_min:
            raise ValueError(f"text_max ({self.text_max}) must be >= text_min ({self.text_min})")
        if self.n_subjects < 2:
            raise ValueError("At least two subjects are needed for every relation to have two distinct objects")
        if self.n_questions > self.n_subjects * self.n_relations:
            raise ValueError(
                f"n_questions={self.n_questions} exceeds the number of facts ({self.n_subjects * self.n_relations})"
            )


@dataclass(frozen=True)
class Fact:
    subject: str
    relation: str
    object: str


@dataclass
class FactTriple:
    """A fact rendered as a five-option prompt; the answer token follows the prompt."""
    fact: Fact
    options: Tuple[str, ...]

    def __post_init__(self):
        if len(self.options) != N_OPTIONS:
            raise ValueError(f"A fact prompt needs {N_OPTIONS} options, got {len(self.options)}")

    def tokens(self) -> List[str]:
        return [BOS, *self.options, UNKNOWN, ":", self.fact.subject, self.fact.relation]


@dataclass
class McQuestion:
    question_id: str
    fact: Fact
    options: Tuple[str, ...]  # object tokens behind A..D
    answer: str  # knowledge answer letter

    def stem(self) -> List[str]:
        tokens = [BOS, "question", self.fact.subject, self.fact.relation]
        for letter, obj in zip(OPTION_LETTERS, self.options):
            tokens += [letter, obj]
        return tokens


ANSWER_SCAFFOLD = ["answer", ":"]


@dataclass
class World:
    config: WorldConfig
    vocab: Vocabulary
    facts: List[Fact]
    text: List[List[str]]
    questions: List[McQuestion] = field(default_factory=list)

    def lookup(self) -> Dict[Tuple[str, str], str]:
        return {(f.subject, f.relation): f.object for f in self.facts}

    def facts_by_relation(self) -> Dict[str, List[Fact]]:
        grouped: Dict[str, List[Fact]] = {}
        for f in self.facts:
            grouped.setdefault(f.relation, []).append(f)
        return grouped

    def text_half(self, part: Optional[int]) -> List[List[str]]:
        """Disjoint halves of the text corpus for twin targets; `None` keeps all of it."""
        if part is None:
            return list(self.text)
        return self.text[part::2]

    def label_corpus(self, limit: Optional[int] = None) -> List[List[int]]:
        """Token-id sequences used for activation scoring: text plus one rendering of each fact."""
        rng = np.random.default_rng(self.config.seed + 7)
        seqs = [self.vocab.encode(t) for t in self.text]
        objects = self.vocab.classes["object"]
        for f in self.facts:
            seqs.append(self.vocab.encode(fact_triple(f, objects, rng).tokens()))
        return seqs if limit is None else seqs[:limit]

    def to_json(self) -> str:
        payload = {
            "config": asdict(self.config),
            "facts": [asdict(f) for f in self.facts],
            "text": [" ".join(t) for t in self.text],
            "questions": [
                {"question_id": q.question_id, "fact": asdict(q.fact), "options": list(q.options), "answer": q.answer}
                for q in self.questions
            ],
        }
        return json.dumps(payload, sort_keys=True, indent=1)

    def save(self, path: str) -> None:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w") as f:
            f.write(self.to_json())

    @classmethod
    def load(cls, path: str) -> "World":
        with open(path, "r") as f:
            payload = json.load(f)
        config = WorldConfig(**payload["config"])
        vocab = Vocabulary(config.n_subjects, config.n_relations, config.n_objects)
        return cls(
            config=config,
            vocab=vocab,
            facts=[Fact(**f) for f in payload["facts"]],
            text=[line.split(" ") for line in payload["text"]],
            questions=[
                McQuestion(q["question_id"], Fact(**q["fact"]), tuple(q["options"]), q["answer"])
                for q in payload["questions"]
            ],
        )


def fact_triple(fact: Fact, objects: Sequence[str], rng: np.random.Generator,
                include: Sequence[str] = ()) -> FactTriple:
    """Render `fact` with five options holding its object, every token in `include`, and random fillers."""
    required = list(dict.fromkeys([fact.object, *include]))
    pool = [o for o in objects if o not in required]
    extra = rng.choice(len(pool), size=N_OPTIONS - len(required), replace=False)
    options = required + [pool[i] for i in sorted(extra)]
    order = rng.permutation(len(options))
    return FactTriple(fact, tuple(options[i] for i in order))


def _generate_text(vocab: Vocabulary, config: WorldConfig, rng: np.random.Generator) -> List[List[str]]:
    text = []
    for _ in range(config.n_text):
        length = int(rng.integers(config.text_min, config.text_max + 1))
        seq = [BOS]
        while len(seq) < length:
            family = TEXT_CLASSES[int(rng.integers(len(TEXT_CLASSES)))]
            members = vocab.classes[family]
            run = int(rng.integers(1, 4))
            for _ in range(min(run, length - len(seq))):
                seq.append(members[int(rng.integers(len(members)))])
        text.append(seq)
    return text


def gen_world(config: WorldConfig) -> World:
    """Build the vocabulary, facts (two or more distinct objects per relation), text and questions."""
    vocab = Vocabulary(config.n_subjects, config.n_relations, config.n_objects)
    rng = np.random.default_rng(config.seed)
    subjects = vocab.classes["subject"]
    objects = vocab.classes["object"]

    facts = []
    for relation in vocab.classes["relation"]:
        picks = rng.integers(0, len(objects), size=len(subjects))
        if len(set(picks.tolist())) == 1:
            picks[1] = (picks[0] + 1) % len(objects)
        facts.extend(Fact(s, relation, objects[int(p)]) for s, p in zip(subjects, picks))

    text = _generate_text(vocab, config, rng)

    questions = []
    chosen = sorted(rng.choice(len(facts), size=config.n_questions, replace=False).tolist())
    for n, idx in enumerate(chosen):
        fact = facts[idx]
        distractors = [o for o in objects if o != fact.object]
        picks = rng.choice(len(distractors), size=3, replace=False)
        options = [fact.object] + [distractors[int(i)] for i in picks]
        order = rng.permutation(4)
        options = [options[i] for i in order]
        answer = OPTION_LETTERS[options.index(fact.object)]
        questions.append(McQuestion(f"q{n:04d}", fact, tuple(options), answer))

    logger.info(
        f"Generated world: {len(vocab)} tokens, {len(facts)} facts, {len(text)} text sequences, "
        f"{len(questions)} questions"
    )
    return World(config=config, vocab=vocab, facts=facts, text=text, questions=questions)


def fact_sequences(world: World, rng: np.random.Generator, renderings: int) -> List[List[int]]:
    """Training sequences `prompt + object + <eos>` with freshly sampled option sets."""
    objects = world.vocab.classes["object"]
    seqs = []
    for fact in world.facts:
        for _ in range(renderings):
            tokens = fact_triple(fact, objects, rng).tokens() + [fact.object, EOS]
            seqs.append(world.vocab.encode(tokens))
    return seqs
