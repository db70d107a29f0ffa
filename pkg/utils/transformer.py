"""
Decoder-only transformer used for both target and explainer models.

Pre-norm blocks (attention + GELU MLP), learned positional embeddings and an
untied unembedding. Besides plain next-token prediction the model exposes
residual-stream taps after every layer, continuous "slot" vectors inserted at
the embedding layer in place of a token, and activation patching of the
post-layer residual stream.
"""

import copy
import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import Tensor, embedding, no_grad, stack
from .checkpoint import load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)

LN_EPS = 1e-5
MASK_VALUE = -1e9


@dataclass
class ModelConfig:
    n_layers: int
    d_model: int
    n_heads: int
    vocab_size: int
    context_length: int
    mlp_ratio: int = 4
    seed: int = 0
    dtype: str = "float32"
    rescale_slots: bool = False

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads", "vocab_size", "context_length", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"Unsupported dtype {self.dtype}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "ModelConfig":
        return cls(**data)


@dataclass
class TokenSeq:
    """Token ids plus optional continuous vectors that replace token embeddings."""
    ids: List[int]
    slots: List[Tuple[int, np.ndarray]] = field(default_factory=list)

    def __post_init__(self):
        self.ids = [int(i) for i in self.ids]
        last = -1
        for position, _ in self.slots:
            if position <= last:
                raise ValueError(f"Slot positions must be strictly increasing, got {position} after {last}")
            if position >= len(self.ids):
                raise ValueError(f"Slot position {position} outside sequence of length {len(self.ids)}")
            last = position

    def __len__(self):
        return len(self.ids)


@dataclass
class Intervention:
    layers: Tuple[int, ...]
    position: int
    vector: np.ndarray


@dataclass
class ResidualTrace:
    residuals: Dict[int, np.ndarray]  # layer -> (n, d)
    logits: np.ndarray  # (n, V)

    def h(self, layer: int, position: int) -> np.ndarray:
        return self.residuals[layer][position]

    def next_token(self) -> int:
        # np.argmax keeps the first maximum, so ties resolve to the lowest id
        return int(np.argmax(self.logits[-1]))


# (batch index, position, vector) for a slot or a patched residual row
SlotSpec = Tuple[int, int, object]


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / (var + LN_EPS) ** 0.5 * weight + bias


class Transformer:
    def __init__(self, config: ModelConfig, params: Optional[Dict[str, np.ndarray]] = None, frozen: bool = False):
        self.config = config
        self.frozen = frozen
        self.dtype = np.dtype(config.dtype)
        arrays = params if params is not None else self._init_params()
        self.params: Dict[str, Tensor] = {}
        for name, array in arrays.items():
            array = np.asarray(array, dtype=self.dtype)
            if frozen:
                array = array.copy()
                array.flags.writeable = False
            self.params[name] = Tensor(array, requires_grad=not frozen)
        self._causal_cache: Dict[int, np.ndarray] = {}

    def _init_params(self) -> Dict[str, np.ndarray]:
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        d, hidden = cfg.d_model, cfg.d_model * cfg.mlp_ratio

        def normal(*shape):
            return rng.normal(0.0, 0.02, size=shape).astype(cfg.dtype)

        params = {
            "tok_emb": normal(cfg.vocab_size, d),
            "pos_emb": normal(cfg.context_length, d),
        }
        for layer in range(cfg.n_layers):
            prefix = f"blocks.{layer}"
            params[f"{prefix}.ln1.weight"] = np.ones(d, dtype=cfg.dtype)
            params[f"{prefix}.ln1.bias"] = np.zeros(d, dtype=cfg.dtype)
            for proj in ("q", "k", "v", "o"):
                params[f"{prefix}.attn.{proj}.weight"] = normal(d, d)
                params[f"{prefix}.attn.{proj}.bias"] = np.zeros(d, dtype=cfg.dtype)
            params[f"{prefix}.ln2.weight"] = np.ones(d, dtype=cfg.dtype)
            params[f"{prefix}.ln2.bias"] = np.zeros(d, dtype=cfg.dtype)
            params[f"{prefix}.mlp.fc.weight"] = normal(d, hidden)
            params[f"{prefix}.mlp.fc.bias"] = np.zeros(hidden, dtype=cfg.dtype)
            params[f"{prefix}.mlp.proj.weight"] = normal(hidden, d)
            params[f"{prefix}.mlp.proj.bias"] = np.zeros(d, dtype=cfg.dtype)
        params["ln_f.weight"] = np.ones(d, dtype=cfg.dtype)
        params["ln_f.bias"] = np.zeros(d, dtype=cfg.dtype)
        params["unembed"] = normal(d, cfg.vocab_size)
        return params

    # parameters and persistence

    def parameters(self) -> List[Tuple[str, Tensor]]:
        return sorted(self.params.items())

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def clone(self) -> "Transformer":
        """Trainable deep copy, used to start an explainer from a target."""
        return Transformer(copy.deepcopy(self.config), self.state_dict())

    def read_only(self) -> "Transformer":
        """Handle with non-writeable weights that never records gradients; safe to share across workers."""
        if self.frozen:
            return self
        return Transformer(self.config, self.state_dict(), frozen=True)

    def save(self, path: str, extra: Optional[Dict[str, np.ndarray]] = None) -> None:
        tensors = self.state_dict()
        if extra:
            tensors.update(extra)
        save_checkpoint(path, {"model": self.config.to_dict()}, tensors)

    @classmethod
    def load(cls, path: str, frozen: bool = False) -> "Transformer":
        config, tensors = load_checkpoint(path)
        model_config = ModelConfig.from_dict(config["model"])
        names = {k for k in tensors if not k.startswith("proj.")}
        return cls(model_config, {k: tensors[k] for k in names}, frozen=frozen)

    # forward

    def _causal_mask(self, n: int) -> np.ndarray:
        if n not in self._causal_cache:
            mask = np.triu(np.full((n, n), MASK_VALUE, dtype=self.dtype), k=1)
            self._causal_cache[n] = mask
        return self._causal_cache[n]

    def _attention(self, x: Tensor, layer: int) -> Tensor:
        cfg = self.config
        p = self.params
        prefix = f"blocks.{layer}.attn"
        batch, n, d = x.shape
        heads, head_dim = cfg.n_heads, cfg.head_dim

        def split(t: Tensor) -> Tensor:
            return t.reshape(batch, n, heads, head_dim).transpose(0, 2, 1, 3)

        q = split(x @ p[f"{prefix}.q.weight"] + p[f"{prefix}.q.bias"])
        k = split(x @ p[f"{prefix}.k.weight"] + p[f"{prefix}.k.bias"])
        v = split(x @ p[f"{prefix}.v.weight"] + p[f"{prefix}.v.bias"])
        scores = q @ k.transpose(0, 1, 3, 2) * (1.0 / np.sqrt(head_dim))
        scores = scores + Tensor(self._causal_mask(n))
        weights = scores.softmax(axis=-1)
        out = (weights @ v).transpose(0, 2, 1, 3).reshape(batch, n, d)
        return out @ p[f"{prefix}.o.weight"] + p[f"{prefix}.o.bias"]

    def _mlp(self, x: Tensor, layer: int) -> Tensor:
        p = self.params
        prefix = f"blocks.{layer}.mlp"
        hidden = (x @ p[f"{prefix}.fc.weight"] + p[f"{prefix}.fc.bias"]).gelu()
        return hidden @ p[f"{prefix}.proj.weight"] + p[f"{prefix}.proj.bias"]

    def _as_row(self, vector) -> Tensor:
        if isinstance(vector, Tensor):
            row = vector
        else:
            row = Tensor(np.asarray(vector, dtype=self.dtype))
        if row.shape != (self.config.d_model,):
            raise ValueError(f"Vector of shape {row.shape} does not match hidden size {self.config.d_model}")
        return row

    def _rows(self, specs: Sequence[SlotSpec]) -> Tuple[Tuple[np.ndarray, np.ndarray], Tensor]:
        b_idx = np.array([s[0] for s in specs], dtype=np.int64)
        p_idx = np.array([s[1] for s in specs], dtype=np.int64)
        return (b_idx, p_idx), stack([self._as_row(s[2]) for s in specs])

    def _rescale(self, row: Tensor) -> Tensor:
        emb = self.params["tok_emb"].data
        target_rms = float(np.sqrt(np.mean(emb * emb)))
        rms = float(np.sqrt(np.mean(row.data * row.data)))
        if rms == 0.0:
            return row
        return row * (target_rms / rms)

    def run(self, ids: np.ndarray, slots: Sequence[SlotSpec] = (),
            patches: Optional[Dict[int, Sequence[SlotSpec]]] = None,
            tap_layers: Optional[Iterable[int]] = None) -> Tuple[Tensor, Dict[int, Tensor]]:
        """
        Batched forward over `ids` of shape (B, n).

        `slots` replace token embeddings before positional embeddings are added;
        `patches` maps a layer to rows written into that layer's output
        residual. Returns the logits tensor (B, n, V) and the post-layer
        residual tensors for every tapped layer.
        """
        cfg = self.config
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 2:
            raise ValueError(f"Expected ids of shape (batch, n), got {ids.shape}")
        batch, n = ids.shape
        if n == 0:
            raise ValueError("Cannot run the model on an empty sequence")
        if n > cfg.context_length:
            raise ValueError(f"Sequence length {n} exceeds context length {cfg.context_length}")
        if ids.min() < 0 or ids.max() >= cfg.vocab_size:
            raise ValueError(f"Token id outside vocabulary of size {cfg.vocab_size}")
        taps = set(range(cfg.n_layers)) if tap_layers is None else set(tap_layers)
        patches = patches or {}

        x = embedding(self.params["tok_emb"], ids)
        if slots:
            index, rows = self._rows(slots)
            if cfg.rescale_slots:
                rows = stack([self._rescale(self._as_row(s[2])) for s in slots])
            x = x.set_rows(index, rows)
        x = x + embedding(self.params["pos_emb"], np.arange(n))

        residuals: Dict[int, Tensor] = {}
        for layer in range(cfg.n_layers):
            prefix = f"blocks.{layer}"
            x = x + self._attention(layer_norm(x, self.params[f"{prefix}.ln1.weight"], self.params[f"{prefix}.ln1.bias"]), layer)
            x = x + self._mlp(layer_norm(x, self.params[f"{prefix}.ln2.weight"], self.params[f"{prefix}.ln2.bias"]), layer)
            if layer in patches and patches[layer]:
                index, rows = self._rows(patches[layer])
                x = x.set_rows(index, rows)
            if layer in taps:
                residuals[layer] = x

        x = layer_norm(x, self.params["ln_f.weight"], self.params["ln_f.bias"])
        return x @ self.params["unembed"], residuals

    def _check_seq(self, seq: TokenSeq) -> List[SlotSpec]:
        for position, vector in seq.slots:
            if np.shape(vector) != (self.config.d_model,):
                raise ValueError(
                    f"Slot vector at position {position} has shape {np.shape(vector)}, expected ({self.config.d_model},)"
                )
        return [(0, position, vector) for position, vector in seq.slots]

    def _patch_specs(self, seq: TokenSeq, interventions: Sequence[Intervention]) -> Dict[int, List[SlotSpec]]:
        seen = set()
        patches: Dict[int, List[SlotSpec]] = {}
        for item in interventions:
            if not 0 <= item.position < len(seq):
                raise ValueError(f"Intervention position {item.position} outside sequence of length {len(seq)}")
            for layer in item.layers:
                if not 0 <= layer < self.config.n_layers:
                    raise ValueError(f"Intervention layer {layer} outside [0, {self.config.n_layers})")
                if (layer, item.position) in seen:
                    raise ValueError(f"Conflicting interventions at layer {layer}, position {item.position}")
                seen.add((layer, item.position))
                patches.setdefault(layer, []).append((0, item.position, item.vector))
        return patches

    def forward(self, seq: TokenSeq, tap_layers: Optional[Iterable[int]] = None) -> ResidualTrace:
        return self.forward_patched(seq, (), tap_layers)

    def forward_patched(self, seq: TokenSeq, interventions: Sequence[Intervention],
                        tap_layers: Optional[Iterable[int]] = None) -> ResidualTrace:
        slots = self._check_seq(seq)
        patches = self._patch_specs(seq, interventions)
        with no_grad():
            logits, residuals = self.run(np.asarray([seq.ids]), slots, patches, tap_layers)
        return ResidualTrace(
            residuals={layer: t.data[0].copy() for layer, t in residuals.items()},
            logits=logits.data[0].copy(),
        )

    # decoding

    def greedy_decode(self, seq: TokenSeq, max_new_tokens: int, stop_id: Optional[int] = None) -> List[int]:
        """Argmax continuation of `seq`; stops at `stop_id`, `max_new_tokens` or the context length."""
        ids = list(seq.ids)
        out: List[int] = []
        while len(out) < max_new_tokens and len(ids) < self.config.context_length:
            token = self.forward(TokenSeq(ids, seq.slots), tap_layers=()).next_token()
            out.append(token)
            ids.append(token)
            if stop_id is not None and token == stop_id:
                break
        return out

    def sequence_log_likelihood(self, seq: TokenSeq, continuation: Sequence[int]) -> float:
        """Sum of log-probabilities of `continuation` following `seq`."""
        ids = list(seq.ids) + list(continuation)
        if not continuation:
            return 0.0
        trace = self.forward(TokenSeq(ids, seq.slots), tap_layers=())
        logits = trace.logits.astype(np.float64)
        logits = logits - logits.max(axis=-1, keepdims=True)
        log_probs = logits - np.log(np.exp(logits).sum(axis=-1, keepdims=True))
        start = len(seq.ids)
        return float(sum(log_probs[start + i - 1, token] for i, token in enumerate(continuation)))
