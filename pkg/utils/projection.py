"""
Per-layer linear maps from the target's residual space into the
explainer's embedding space, and their least-squares pre-training.
"""

import logging
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.linear_model import Ridge

from .autodiff import Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .transformer import TokenSeq, Transformer

logger = logging.getLogger(__name__)

MODES = ("joint", "frozen-pretrained", "random-init")
MODE_ALIASES = {"joint": "joint", "frozen": "frozen-pretrained", "random": "random-init"}


def canonical_mode(mode: str) -> str:
    mode = MODE_ALIASES.get(mode, mode)
    if mode not in MODES:
        raise ValueError(f"Unknown projection mode {mode!r}; expected one of {MODES}")
    return mode


class ProjectionSet:
    """One (d_M, d_E) matrix per target layer; a feature v maps to v @ W."""

    def __init__(self, weights: Dict[int, np.ndarray], dtype: str = "float32"):
        if not weights:
            raise ValueError("A projection set needs at least one layer")
        self.weights: Dict[int, Tensor] = {}
        for layer, w in sorted(weights.items()):
            w = np.asarray(w, dtype=dtype)
            if w.ndim != 2 or not np.all(np.isfinite(w)):
                raise ValueError(f"Projection for layer {layer} must be a finite 2-D matrix")
            self.weights[int(layer)] = Tensor(w.copy(), requires_grad=True)

    @property
    def layers(self) -> List[int]:
        return sorted(self.weights)

    @property
    def d_in(self) -> int:
        return next(iter(self.weights.values())).shape[0]

    @property
    def d_out(self) -> int:
        return next(iter(self.weights.values())).shape[1]

    def parameters(self) -> List[Tensor]:
        return [self.weights[layer] for layer in self.layers]

    def project(self, vector, layer: int) -> Tensor:
        if layer not in self.weights:
            raise ValueError(f"No projection for target layer {layer}")
        w = self.weights[layer]
        v = vector if isinstance(vector, Tensor) else Tensor(np.asarray(vector, dtype=w.dtype))
        if v.shape != (w.shape[0],):
            raise ValueError(f"Vector of shape {v.shape} does not match projection input size {w.shape[0]}")
        return (v.reshape(1, w.shape[0]) @ w).reshape(w.shape[1])

    def project_numpy(self, vectors: np.ndarray, layer: int) -> np.ndarray:
        return np.asarray(vectors) @ self.weights[layer].data

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {f"proj.{layer}": self.weights[layer].data.copy() for layer in self.layers}

    def save(self, path: str, meta: Optional[Dict] = None) -> None:
        save_checkpoint(path, {"projection": meta or {}}, self.state_dict())

    @classmethod
    def load(cls, path: str) -> "ProjectionSet":
        _, tensors = load_checkpoint(path)
        return cls({int(name.split(".", 1)[1]): w for name, w in tensors.items() if name.startswith("proj.")})

    @classmethod
    def identity(cls, layers: Iterable[int], d: int) -> "ProjectionSet":
        return cls({layer: np.eye(d, dtype=np.float32) for layer in layers})

    @classmethod
    def random(cls, layers: Iterable[int], d_in: int, d_out: int, seed: int) -> "ProjectionSet":
        rng = np.random.default_rng(seed)
        return cls({layer: rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, d_out)) for layer in layers})


def layer_map(n_target: int, n_explainer: int) -> Dict[int, int]:
    """Proportional correspondence l_E = round(l_M * L_E / L_M)."""
    return {l: min(int(round(l * n_explainer / n_target)), n_explainer - 1) for l in range(n_target)}


def fit_least_squares(X: np.ndarray, Y: np.ndarray) -> Tuple[np.ndarray, bool]:
    """Closed-form fit of Y ~ X W; rank-deficient X falls back to ridge. Returns (W, used_ridge)."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    d = X.shape[1]
    if np.linalg.matrix_rank(X) < d:
        alpha = 1e-3 * float(np.trace(X.T @ X)) / d
        logger.warning(f"Activation matrix is rank-deficient; fitting ridge with lambda={alpha:.3e}")
        ridge = Ridge(alpha=max(alpha, 1e-12), fit_intercept=False)
        ridge.fit(X, Y)
        return ridge.coef_.T.reshape(d, Y.shape[1]), True
    W, *_ = np.linalg.lstsq(X, Y, rcond=None)
    return W, False


def fit_gradient_descent(X: np.ndarray, Y: np.ndarray, steps: int = 2000, lr: Optional[float] = None) -> np.ndarray:
    """Plain gradient descent on the mean squared residual, with step size from the spectral norm."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    n = X.shape[0]
    if lr is None:
        lr = 1.0 / (np.linalg.norm(X, 2) ** 2 / n)
    W = np.zeros((X.shape[1], Y.shape[1]))
    for _ in range(steps):
        W -= lr * (X.T @ (X @ W - Y)) / n
    return W


def relative_residual(W: np.ndarray, X: np.ndarray, Y: np.ndarray) -> float:
    denom = np.linalg.norm(Y)
    if denom == 0:
        return 0.0
    return float(np.linalg.norm(Y - np.asarray(X) @ W) / denom)


def paired_taps(target: Transformer, explainer: Transformer, corpus: Sequence[Sequence[int]],
                mapping: Dict[int, int]) -> Dict[int, Tuple[np.ndarray, np.ndarray]]:
    """(X, Y) tap matrices per target layer, same input and token position."""
    xs: Dict[int, List[np.ndarray]] = {l: [] for l in mapping}
    ys: Dict[int, List[np.ndarray]] = {l: [] for l in mapping}
    target_layers = sorted(mapping)
    explainer_layers = sorted(set(mapping.values()))
    for ids in corpus:
        seq = TokenSeq(list(ids))
        t_trace = target.forward(seq, tap_layers=target_layers)
        e_trace = explainer.forward(seq, tap_layers=explainer_layers)
        for l_m, l_e in mapping.items():
            xs[l_m].append(t_trace.residuals[l_m])
            ys[l_m].append(e_trace.residuals[l_e])
    return {l: (np.concatenate(xs[l]), np.concatenate(ys[l])) for l in mapping}


def pretrain_projection(target: Transformer, explainer: Transformer, corpus: Sequence[Sequence[int]],
                        layers: Optional[Iterable[int]] = None) -> Tuple[ProjectionSet, Dict[int, float]]:
    """Least-squares alignment of explainer activations from target activations; returns the set and residuals."""
    mapping = layer_map(target.config.n_layers, explainer.config.n_layers)
    if layers is not None:
        mapping = {l: mapping[l] for l in layers}
    data = paired_taps(target.read_only(), explainer.read_only(), corpus, mapping)
    weights = {}
    residuals = {}
    for layer, (X, Y) in sorted(data.items()):
        W, used_ridge = fit_least_squares(X, Y)
        weights[layer] = W
        residuals[layer] = relative_residual(W, X, Y)
        logger.info(f"Projection layer {layer} -> {mapping[layer]}: residual {residuals[layer]:.6f}"
                    f"{' (ridge)' if used_ridge else ''}")
    return ProjectionSet(weights), residuals


def build_projections(mode: str, target: Transformer, explainer: Transformer, corpus: Sequence[Sequence[int]],
                      seed: int, pretrained: Optional[ProjectionSet] = None) -> Tuple[ProjectionSet, bool]:
    """Projection set and whether it is trained jointly, for one of the three modes."""
    mode = canonical_mode(mode)
    if mode == "random-init":
        layers = range(target.config.n_layers)
        return ProjectionSet.random(layers, target.config.d_model, explainer.config.d_model, seed), True
    if pretrained is None:
        pretrained, _ = pretrain_projection(target, explainer, corpus)
    return ProjectionSet({l: w.data for l, w in pretrained.weights.items()}), mode == "joint"
