"""
Closed vocabulary shared by every model in a run.

Token ids are assigned in a fixed order: special tokens, prompt words, layer
and position markers, label words, then content tokens grouped by class.
Content classes partition the content tokens; they feed the label grammar
and the rule simulator.
"""

from typing import Dict, Iterable, List, Sequence

PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"
SLOT_OPEN, SLOT, SLOT_CLOSE = "[s]", "<slot>", "[e]"
QUOTE_OPEN, QUOTE_CLOSE = "<<<", ">>>"
UNKNOWN = "unknown"

SPECIAL_TOKENS = [PAD, BOS, EOS, SLOT_OPEN, SLOT, SLOT_CLOSE, QUOTE_OPEN, QUOTE_CLOSE]

PROMPT_WORDS = [
    "what", "does", "mean", "at", "layer", "layers", "encodes", "activates", "for", "describe",
    "?", ":", ",", ".", "if", "feature", "is", "patched", "token", "in", "how", "would", "the",
    "output", "change", "to", "most", "likely", "remain", "unchanged", "from", "where", "did",
    "come", "hint", "answer", "question", "removed", "respond", "with", "one", "of", "X", "word",
    "meaning", "'", "was", "or",
]

MAX_LAYERS = 12
MAX_POSITIONS = 16

BASE_CLASSES = {
    "digit": [str(i) for i in range(10)],
    "letter": ["A", "B", "C", "D"],
    "animal": ["cat", "dog", "fox", "owl", "bee", "elk"],
    "color": ["red", "blue", "green", "gold", "pink", "gray"],
    "filler": ["and", "but", "so", "then", "very", "quite", "just"],
}
UNION_CLASSES = {
    "entity": ["subject", "object"],
    "symbol": ["digit", "letter"],
    "nature": ["animal", "color"],
}
MODIFIERS = ["all", "low", "high"]
OPTION_LETTERS = ["A", "B", "C", "D"]

MAX_SUBJECTS = 100
MAX_RELATIONS = 10
MAX_OBJECTS = 100


def layer_token(layer: int) -> str:
    return f"L{layer}"


def position_token(position: int) -> str:
    return f"@{position}"


class Vocabulary:
    def __init__(self, n_subjects: int, n_relations: int, n_objects: int):
        if not 1 <= n_subjects <= MAX_SUBJECTS:
            raise ValueError(f"n_subjects must be in [1, {MAX_SUBJECTS}], got {n_subjects}")
        if not 1 <= n_relations <= MAX_RELATIONS:
            raise ValueError(f"n_relations must be in [1, {MAX_RELATIONS}], got {n_relations}")
        if not 5 <= n_objects <= MAX_OBJECTS:
            raise ValueError(f"n_objects must be in [5, {MAX_OBJECTS}] (five answer options), got {n_objects}")
        self.sizes = {"n_subjects": n_subjects, "n_relations": n_relations, "n_objects": n_objects}

        self.classes: Dict[str, List[str]] = dict(BASE_CLASSES)
        self.classes["subject"] = [f"S{i:02d}" for i in range(n_subjects)]
        self.classes["relation"] = [f"R{i}" for i in range(n_relations)]
        self.classes["object"] = [f"O{i:02d}" for i in range(n_objects)]

        label_words = list(self.classes) + list(UNION_CLASSES) + MODIFIERS
        tokens = list(SPECIAL_TOKENS) + PROMPT_WORDS
        tokens += [layer_token(i) for i in range(MAX_LAYERS)]
        tokens += [position_token(i) for i in range(MAX_POSITIONS)]
        tokens += [w for w in label_words if w not in tokens]
        for members in self.classes.values():
            tokens += members
        tokens.append(UNKNOWN)

        if len(set(tokens)) != len(tokens):
            dupes = sorted({t for t in tokens if tokens.count(t) > 1})
            raise ValueError(f"Vocabulary has duplicate tokens: {dupes}")
        self.tokens = tokens
        self.index = {tok: i for i, tok in enumerate(tokens)}
        self._class_of = {self.index[tok]: name for name, members in self.classes.items() for tok in members}

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def id(self, token: str) -> int:
        try:
            return self.index[token]
        except KeyError:
            raise ValueError(f"Token {token!r} is not in the vocabulary") from None

    def encode(self, tokens: Iterable[str]) -> List[int]:
        return [self.id(t) for t in tokens]

    def decode(self, ids: Iterable[int]) -> List[str]:
        return [self.tokens[i] for i in ids]

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def eos_id(self) -> int:
        return self.index[EOS]

    def members(self, family: str) -> List[int]:
        """Token ids of a base class or a union of base classes."""
        if family in self.classes:
            return [self.index[t] for t in self.classes[family]]
        if family in UNION_CLASSES:
            return [i for part in UNION_CLASSES[family] for i in self.members(part)]
        raise ValueError(f"Unknown token class {family!r}")

    def class_of(self, token_id: int) -> str:
        return self._class_of.get(int(token_id), "")

    def content_ids(self) -> List[int]:
        return sorted(self._class_of)

    def option_ids(self) -> List[int]:
        return self.members("object") + [self.index[UNKNOWN]]

    def letter_ids(self) -> List[int]:
        return [self.index[t] for t in OPTION_LETTERS]

    def to_dict(self) -> Dict:
        return dict(self.sizes)

    @classmethod
    def from_dict(cls, data: Dict) -> "Vocabulary":
        return cls(**data)


def render(vocab: Vocabulary, ids: Sequence[int]) -> str:
    return " ".join(vocab.decode(ids))
