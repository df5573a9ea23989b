"""Layer-wise 1-bit quantized graph convolution: forward pass and scoring.

The forward pass propagates base embeddings through the interaction graph,
transforms each layer into the code space, quantizes to {-1,+1} with a shared
transform, and tracks per-layer rescaling factors. Variant flags cover the
end-to-end mode, the annealed/rescaled mode, and the ablations (final-layer
quantization only, no rescaling, learnable rescaling, masked quantization).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from bitgcf.graph import InteractionGraph, propagate

RESCALE_MODES = ("none", "deterministic", "learnable")


@dataclass
class VariantFlags:
    """Forward-path switches.

    mode           "end" (pure codes) or "anl" (rescaled codes).
    quantization_enabled   False masks quantization: the aggregation uses the
                   transformed continuous embeddings (full-precision path).
    topology_aware False quantizes only the final layer; earlier layers
                   contribute their continuous transforms.
    rescaling      "none", "deterministic" (codes scaled by per-node L1
                   means), or "learnable" (per-node-per-layer trained scalars).
    """

    mode: str = "end"
    quantization_enabled: bool = True
    topology_aware: bool = True
    rescaling: str = "none"

    def __post_init__(self):
        if self.mode not in ("end", "anl"):
            raise ValueError(f"mode must be 'end' or 'anl', got {self.mode!r}")
        if self.rescaling not in RESCALE_MODES:
            raise ValueError(f"rescaling must be one of {RESCALE_MODES}, got {self.rescaling!r}")
        if self.mode == "end" and self.rescaling != "none":
            raise ValueError("end mode does not use rescaling factors")


@dataclass
class ModelParams:
    """Learnable tensors: per-node base embeddings and the shared quantization transform.

    ``learnable_factors`` (one scalar per node per layer) exists only for the
    learnable-rescaling ablation.
    """

    base_embeddings: np.ndarray  # (num_nodes, embed_dim) float64
    transform: np.ndarray  # (embed_dim, code_dim) float64
    num_layers: int
    learnable_factors: np.ndarray | None = None  # (num_nodes, num_layers + 1)

    def __post_init__(self):
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if self.base_embeddings.ndim != 2 or self.transform.ndim != 2:
            raise ValueError("base_embeddings and transform must be 2-D")
        if self.base_embeddings.shape[1] != self.transform.shape[0]:
            raise ValueError("embedding dim does not match transform rows")
        if self.learnable_factors is not None:
            want = (self.base_embeddings.shape[0], self.num_layers + 1)
            if self.learnable_factors.shape != want:
                raise ValueError(f"learnable_factors must have shape {want}")
        for name, t in self.named_tensors():
            if not np.isfinite(t).all():
                raise ValueError(f"non-finite values in {name}")

    @classmethod
    def initialize(cls, num_nodes, embed_dim, code_dim, num_layers, rng,
                   learnable_rescaling=False, init_std=0.01) -> "ModelParams":
        """Draw embeddings and transform from N(0, init_std^2); factors start at 1."""
        lf = np.ones((num_nodes, num_layers + 1)) if learnable_rescaling else None
        return cls(
            base_embeddings=rng.normal(0.0, init_std, size=(num_nodes, embed_dim)),
            transform=rng.normal(0.0, init_std, size=(embed_dim, code_dim)),
            num_layers=num_layers,
            learnable_factors=lf,
        )

    @property
    def num_nodes(self) -> int:
        return self.base_embeddings.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.base_embeddings.shape[1]

    @property
    def code_dim(self) -> int:
        return self.transform.shape[1]

    def named_tensors(self):
        pairs = [("base_embeddings", self.base_embeddings), ("transform", self.transform)]
        if self.learnable_factors is not None:
            pairs.append(("learnable_factors", self.learnable_factors))
        return pairs

    def copy(self) -> "ModelParams":
        lf = None if self.learnable_factors is None else self.learnable_factors.copy()
        return ModelParams(self.base_embeddings.copy(), self.transform.copy(),
                           self.num_layers, lf)


@dataclass
class ForwardCache:
    """Everything the forward pass produced, retained for the backward pass.

    Per layer l = 0..L: continuous embeddings (N, c), pre-activations
    (N, d) kept for the straight-through mask, sign codes (N, d) in {-1,+1}
    (None for layers skipped in final-layer-only quantization), and rescaling
    factors (N, L+1).
    """

    continuous: list  # of (N, c) float64
    preactivation: list  # of (N, d) float64
    codes: list  # of (N, d) float64 in {-1, +1}, or None
    alphas: np.ndarray  # (N, L+1) float64
    graph: InteractionGraph
    learnable_factors: np.ndarray | None = None

    @property
    def num_layers(self) -> int:
        return len(self.continuous) - 1


def sign(x: np.ndarray) -> np.ndarray:
    """Map to {-1, +1}: strictly negative entries to -1, everything else to +1.

    The zero tie resolves to +1 so packing and rankings are deterministic.
    """
    x = np.asarray(x, dtype=np.float64)
    if not np.isfinite(x).all():
        raise ValueError("sign() requires finite input")
    return np.where(x >= 0.0, 1.0, -1.0)


def quantize_layer(v: np.ndarray, transform: np.ndarray):
    """Transform continuous embeddings and quantize: returns (preactivation, codes)."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != transform.shape[0]:
        raise ValueError(
            f"embedding dim {v.shape[-1]} does not match transform rows {transform.shape[0]}")
    phi = v @ transform
    return phi, sign(phi)


def rescale_factor(v: np.ndarray, code_dim: int) -> np.ndarray:
    """L1 norm over the embedding axis divided by the code dimension.

    Deterministic stand-in for a learned scale; the divisor is the code
    dimension d even when the embedding dim c differs.
    """
    if code_dim < 1:
        raise ValueError("code_dim must be >= 1")
    return np.abs(np.asarray(v, dtype=np.float64)).sum(axis=-1) / code_dim


def layer_is_quantized(layer: int, flags: VariantFlags, num_layers: int) -> bool:
    """Whether this layer contributes codes (vs its continuous transform) to the sum."""
    if not flags.quantization_enabled:
        return False
    if not flags.topology_aware and layer < num_layers:
        return False
    return True


def forward(params: ModelParams, graph: InteractionGraph, flags: VariantFlags) -> ForwardCache:
    """Run propagation + per-layer quantization for all nodes.

    Layer 0 is the base embeddings; layer l is one more propagation step.
    Every layer 0..L is pushed through the shared transform; codes are taken
    at each layer when topology-aware, otherwise only at the final layer.
    """
    if params.num_nodes != graph.num_nodes:
        raise ValueError(
            f"params cover {params.num_nodes} nodes but graph has {graph.num_nodes}")
    L = params.num_layers
    continuous = [params.base_embeddings]
    for _ in range(L):
        continuous.append(propagate(continuous[-1], graph))
    if not np.isfinite(continuous[-1]).all():
        raise FloatingPointError("non-finite embeddings after propagation (divergence)")

    preactivation, codes = [], []
    alphas = np.empty((params.num_nodes, L + 1))
    for layer in range(L + 1):
        phi = continuous[layer] @ params.transform
        if not np.isfinite(phi).all():
            raise FloatingPointError("non-finite pre-activations (divergence)")
        preactivation.append(phi)
        if flags.topology_aware or layer == L:
            codes.append(sign(phi))
        else:
            codes.append(None)
        alphas[:, layer] = rescale_factor(continuous[layer], params.code_dim)

    lf = params.learnable_factors if flags.rescaling == "learnable" else None
    return ForwardCache(continuous=continuous, preactivation=preactivation,
                        codes=codes, alphas=alphas, graph=graph,
                        learnable_factors=lf)


def _layer_term(cache: ForwardCache, flags: VariantFlags, layer: int) -> np.ndarray:
    if not layer_is_quantized(layer, flags, cache.num_layers):
        return cache.preactivation[layer]
    q = cache.codes[layer]
    if flags.rescaling == "deterministic":
        return cache.alphas[:, layer:layer + 1] * q
    if flags.rescaling == "learnable":
        return cache.learnable_factors[:, layer:layer + 1] * q
    return q


def aggregate(cache: ForwardCache, flags: VariantFlags, training: bool) -> np.ndarray:
    """Element-wise sum of the per-layer representations, (N, d).

    During training the sum is divided by (L+1); the shrink keeps score
    magnitudes small and cannot change any per-user ranking.
    """
    out = _layer_term(cache, flags, 0).copy()
    for layer in range(1, cache.num_layers + 1):
        out += _layer_term(cache, flags, layer)
    if training:
        out /= cache.num_layers + 1
    return out


def predict_scores(f_users: np.ndarray, f_items: np.ndarray, user: int,
                   candidate_items) -> np.ndarray:
    """Inner-product scores of one user against candidate items."""
    if not 0 <= user < f_users.shape[0]:
        raise IndexError(f"user {user} out of range")
    candidates = np.asarray(candidate_items, dtype=np.int64)
    if len(candidates) and (candidates.min() < 0 or candidates.max() >= f_items.shape[0]):
        raise IndexError("candidate item out of range")
    return f_items[candidates] @ f_users[user]
