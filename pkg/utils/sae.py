"""
Sparse autoencoders over the residual stream and the three feature sources
evaluated downstream: SAE decoder directions, raw activations (ACT) and
counterfactual activation differences (DACT).
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from joblib import Parallel, delayed

from .autodiff import Tensor, parameter
from .checkpoint import load_checkpoint, save_checkpoint
from .codec_helpers import decode_vector, encode_vector, read_jsonl, write_jsonl
from .training import Adam, OptimizerConfig, TrainingDivergedError
from .transformer import TokenSeq, Transformer
from .world import FACT_SUBJECT_POS

logger = logging.getLogger(__name__)

SOURCES = ("SAE", "ACT", "DACT")
MIN_DIFFERENCE_NORM = 1e-8


@dataclass
class ActivationTap:
    input_id: int
    layer: int
    position: int
    vector: np.ndarray


@dataclass
class FeatureDirection:
    id: str
    layer: int
    vector: np.ndarray
    source: str = "SAE"

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"Unknown feature source {self.source!r}; expected one of {SOURCES}")

    def to_record(self) -> Dict:
        return {"id": self.id, "layer": self.layer, "source": self.source, "vector": encode_vector(self.vector)}

    @classmethod
    def from_record(cls, record: Dict) -> "FeatureDirection":
        return cls(record["id"], int(record["layer"]), decode_vector(record["vector"]), record["source"])


def save_features(path: str, features: Sequence[FeatureDirection]) -> int:
    return write_jsonl(path, (f.to_record() for f in features))


def load_features(path: str) -> List[FeatureDirection]:
    return [FeatureDirection.from_record(r) for r in read_jsonl(path)]


def _normalize(vector: np.ndarray) -> np.ndarray:
    vector = np.asarray(vector, dtype=np.float64)
    return (vector / np.linalg.norm(vector)).astype(np.float32)


def _trace_layers(model: Transformer, input_id: int, ids: Sequence[int], layers: Sequence[int]) -> List[ActivationTap]:
    trace = model.forward(TokenSeq(list(ids)), tap_layers=layers)
    return [
        ActivationTap(input_id, layer, t, trace.residuals[layer][t])
        for layer in layers
        for t in range(len(ids))
    ]


def collect_activations(model: Transformer, corpus: Sequence[Sequence[int]], layers: Sequence[int],
                        n_jobs: int = 1) -> List[ActivationTap]:
    """One tap per (input, layer, position), ordered by input then layer then position."""
    vocab_size = model.config.vocab_size
    for i, ids in enumerate(corpus):
        if any(t < 0 or t >= vocab_size for t in ids):
            raise ValueError(f"Corpus sequence {i} has a token outside the vocabulary of size {vocab_size}")
    if not corpus:
        return []
    handle = model.read_only()
    layers = sorted(set(layers))
    chunks = Parallel(n_jobs=n_jobs, prefer="threads")(
        delayed(_trace_layers)(handle, i, ids, layers) for i, ids in enumerate(corpus)
    )
    taps = [tap for chunk in chunks for tap in chunk]
    logger.info(f"Collected {len(taps)} activation taps over {len(corpus)} inputs and layers {layers}")
    return taps


def tap_matrix(taps: Iterable[ActivationTap], layer: int) -> np.ndarray:
    rows = [tap.vector for tap in taps if tap.layer == layer]
    if not rows:
        raise ValueError(f"No activation taps recorded for layer {layer}")
    return np.stack(rows).astype(np.float32)


@dataclass
class SaeConfig:
    expansion: int = 4
    l1: float = 1e-3
    steps: int = 2000
    lr: float = 1e-3
    batch_size: int = 256
    seed: int = 0
    log_every: int = 200


class SaeModel:
    def __init__(self, layer: int, W_enc: np.ndarray, b_enc: np.ndarray, W_dec: np.ndarray, b_dec: np.ndarray,
                 l1: float = 0.0):
        self.layer = layer
        self.W_enc = W_enc
        self.b_enc = b_enc
        self.W_dec = W_dec  # (m, d); row j is decoder column j
        self.b_dec = b_dec
        self.l1 = l1
        self.stats: Dict[str, float] = {}

    @property
    def d(self) -> int:
        return self.W_enc.shape[0]

    @property
    def m(self) -> int:
        return self.W_enc.shape[1]

    def encode(self, x: np.ndarray) -> np.ndarray:
        return np.maximum(np.asarray(x) @ self.W_enc + self.b_enc, 0.0)

    def decode(self, codes: np.ndarray) -> np.ndarray:
        return codes @ self.W_dec + self.b_dec

    def reconstruction_mse(self, x: np.ndarray) -> float:
        return float(np.mean((self.decode(self.encode(x)) - x) ** 2))

    def mean_l0(self, x: np.ndarray) -> float:
        return float(np.mean(np.count_nonzero(self.encode(x) > 0, axis=1)))

    def save(self, path: str) -> None:
        config = {"sae": {"layer": self.layer, "l1": self.l1, "d": self.d, "m": self.m, "stats": self.stats}}
        tensors = {"W_enc": self.W_enc, "b_enc": self.b_enc, "W_dec": self.W_dec, "b_dec": self.b_dec}
        save_checkpoint(path, config, tensors)

    @classmethod
    def load(cls, path: str) -> "SaeModel":
        config, tensors = load_checkpoint(path)
        meta = config["sae"]
        sae = cls(meta["layer"], tensors["W_enc"], tensors["b_enc"], tensors["W_dec"], tensors["b_dec"], meta["l1"])
        sae.stats = meta.get("stats", {})
        return sae


def train_sae(taps: np.ndarray, layer: int, m: int, l1: float, steps: int, config: Optional[SaeConfig] = None) -> SaeModel:
    """
    Fit a single-hidden-layer SAE to the (N, d) tap matrix.

    Loss is element-mean reconstruction MSE plus `l1` times the mean code L1.
    Decoder columns are renormalized to unit length after every step.
    """
    config = config or SaeConfig()
    x_all = np.asarray(taps, dtype=np.float32)
    n, d = x_all.shape
    if m <= d:
        raise ValueError(f"SAE width m={m} must exceed the hidden size d={d}")
    if l1 < 0:
        raise ValueError(f"Sparsity weight must be non-negative, got {l1}")
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")

    rng = np.random.default_rng(config.seed)
    W_dec = rng.normal(size=(m, d)).astype(np.float32)
    W_dec /= np.linalg.norm(W_dec, axis=1, keepdims=True)
    W_enc = parameter(W_dec.T.copy())
    b_enc = parameter(np.zeros(m, dtype=np.float32))
    W_dec = parameter(W_dec)
    b_dec = parameter(x_all.mean(axis=0).astype(np.float32))

    optimizer = Adam([W_enc, b_enc, W_dec, b_dec], OptimizerConfig(lr=config.lr, grad_clip=0.0, steps=steps))
    batch_size = min(config.batch_size, n)
    for step in range(steps):
        lr = 0.5 * config.lr * (1 + math.cos(math.pi * step / steps))
        batch = Tensor(x_all[rng.integers(0, n, size=batch_size)])
        codes = (batch @ W_enc + b_enc).relu()
        recon = codes @ W_dec + b_dec
        diff = recon - batch
        mse = (diff * diff).mean()
        loss = mse + codes.sum(axis=1).mean() * l1 if l1 > 0 else mse
        value = float(loss.data)
        if not np.isfinite(value):
            raise TrainingDivergedError(f"SAE for layer {layer} diverged at step {step + 1} (loss {value})")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step(lr)
        W_dec.data /= np.maximum(np.linalg.norm(W_dec.data, axis=1, keepdims=True), 1e-12)
        if (step + 1) % config.log_every == 0:
            logger.info(f"SAE layer {layer} step {step + 1}/{steps} loss {value:.6f} mse {float(mse.data):.6f}")

    sae = SaeModel(layer, W_enc.data.copy(), b_enc.data.copy(), W_dec.data.copy(), b_dec.data.copy(), l1)
    sae.stats = {"mse": sae.reconstruction_mse(x_all), "mean_l0": sae.mean_l0(x_all),
                 "variance": float(np.mean((x_all - x_all.mean(axis=0)) ** 2))}
    logger.info(f"SAE layer {layer}: mse {sae.stats['mse']:.6f}, mean L0 {sae.stats['mean_l0']:.2f}")
    return sae


def train_sae_set(taps: Sequence[ActivationTap], layers: Sequence[int], config: SaeConfig, d: int,
                  n_jobs: int = 1) -> Dict[int, SaeModel]:
    """Train one SAE per layer; layers are independent and may run in parallel."""
    matrices = {layer: tap_matrix(taps, layer) for layer in layers}
    results = Parallel(n_jobs=n_jobs, prefer="threads")(
        delayed(train_sae)(matrices[layer], layer, config.expansion * d, config.l1, config.steps, config)
        for layer in layers
    )
    return dict(zip(layers, results))


def feature_id(layer: int, kind: str, index: int) -> str:
    return f"L{layer:02d}-{kind}{index:04d}"


def extract_features(saes: Dict[int, SaeModel]) -> List[FeatureDirection]:
    features = []
    for layer in sorted(saes):
        for column, row in enumerate(saes[layer].W_dec):
            features.append(FeatureDirection(feature_id(layer, "F", column), layer, _normalize(row), "SAE"))
    return features


def activation_features(taps: Sequence[ActivationTap], per_layer: int, seed: int) -> List[FeatureDirection]:
    """Raw residual taps sampled per layer and normalized (not mean-centered)."""
    rng = np.random.default_rng(seed)
    by_layer: Dict[int, List[ActivationTap]] = {}
    for tap in taps:
        by_layer.setdefault(tap.layer, []).append(tap)
    features = []
    for layer in sorted(by_layer):
        pool = [tap for tap in by_layer[layer] if np.linalg.norm(tap.vector) >= MIN_DIFFERENCE_NORM]
        picks = sorted(rng.choice(len(pool), size=min(per_layer, len(pool)), replace=False).tolist())
        for n, i in enumerate(picks):
            features.append(FeatureDirection(feature_id(layer, "A", n), layer, _normalize(pool[i].vector), "ACT"))
    return features


PositionRule = Union[int, Callable[[Sequence[int]], int]]


def delta_features(model: Transformer, pairs: Sequence[Tuple[Sequence[int], Sequence[int]]], layer: int,
                   position: PositionRule = FACT_SUBJECT_POS) -> Tuple[List[FeatureDirection], int]:
    """
    Directions h(x) - h(x') at the designated position, normalized.

    Returns the features and the number of pairs skipped for a (near) zero difference.
    """
    features = []
    skipped = 0
    for n, (x, x_prime) in enumerate(pairs):
        t = position(x) if callable(position) else position
        if not (0 <= t < len(x) and 0 <= t < len(x_prime)):
            raise ValueError(f"Pair {n} is not aligned at position {t} (lengths {len(x)} and {len(x_prime)})")
        h = model.forward(TokenSeq(list(x)), tap_layers=[layer]).residuals[layer][t].astype(np.float64)
        h_prime = model.forward(TokenSeq(list(x_prime)), tap_layers=[layer]).residuals[layer][t].astype(np.float64)
        diff = h - h_prime
        if np.linalg.norm(diff) < MIN_DIFFERENCE_NORM:
            skipped += 1
            continue
        features.append(FeatureDirection(feature_id(layer, "D", n), layer, _normalize(diff), "DACT"))
    if skipped:
        logger.warning(f"Skipped {skipped} counterfactual pairs with zero activation difference at layer {layer}")
    return features, skipped


def feature_activation(model: Transformer, v: np.ndarray, layer: int, ids: Sequence[int]) -> np.ndarray:
    """a_v(x, layer, t) = <h_{layer,t}(x), v> for every position t."""
    if not 0 <= layer < model.config.n_layers:
        raise ValueError(f"Layer {layer} outside [0, {model.config.n_layers})")
    trace = model.forward(TokenSeq(list(ids)), tap_layers=[layer])
    return trace.residuals[layer].astype(np.float64) @ np.asarray(v, dtype=np.float64)
