"""Loss-surface probe: perturb base embeddings along the all-ones direction.

For each signed pair (p_user, p_item) the user block is shifted by
p_user * rowwise-mean(|embedding|) and the item block likewise, the total
loss is recomputed on one fixed batch, and the grid of losses is recorded.
Quantized surfaces come out bumpy where sign flips move codes; masked
(full-precision) surfaces stay smooth.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from bitgcf.graph import SplitDataset
from bitgcf.model import ModelParams, VariantFlags
from bitgcf.train import TrainConfig, compute_batch, sample_batch


@dataclass
class LandscapeGrid:
    p_values: np.ndarray  # (m,) signed perturbation magnitudes
    losses: np.ndarray  # (m, m); rows index p_user, columns p_item

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("p_user,p_item,loss\n")
            for iu, pu in enumerate(self.p_values):
                for ii, pi in enumerate(self.p_values):
                    fh.write(f"{pu:.10g},{pi:.10g},{self.losses[iu, ii]:.12g}\n")


def signed_grid(p_max: float = 0.5, p_step: float = 0.01) -> np.ndarray:
    """Symmetric grid -p_max..p_max inclusive; the default is 101 points."""
    n = int(round(p_max / p_step))
    return np.arange(-n, n + 1) * p_step


def perturb_landscape(params: ModelParams, split: SplitDataset, config: TrainConfig,
                      p_values, seed: int,
                      flags: VariantFlags | None = None) -> LandscapeGrid:
    """Evaluate the total loss over a grid of embedding perturbations.

    The batch (positives and negatives) is sampled once from ``seed`` and
    reused for every grid point, so the p=0 entry reproduces the unperturbed
    loss exactly. The caller's params are never modified.
    """
    p_values = np.asarray(p_values, dtype=np.float64)
    if flags is None:
        flags = config.variant_flags(quantization_enabled=config.mode != "fp")
    graph = split.train
    rng = np.random.default_rng(seed)
    batch = sample_batch(split, min(config.batch_size, graph.num_edges),
                         config.neg_per_pos, rng,
                         rec_neg_per_pos=config.rec_neg_per_pos)

    base = params.base_embeddings
    num_users = graph.num_users
    user_scale = np.abs(base[:num_users]).mean(axis=1, keepdims=True)
    item_scale = np.abs(base[num_users:]).mean(axis=1, keepdims=True)

    losses = np.empty((len(p_values), len(p_values)))
    for iu, p_user in enumerate(p_values):
        for ii, p_item in enumerate(p_values):
            shifted = base.copy()
            shifted[:num_users] += p_user * user_scale
            shifted[num_users:] += p_item * item_scale
            trial = replace(params, base_embeddings=shifted)
            values, _ = compute_batch(trial, graph, batch, flags, config.l2_coeff,
                                      config.use_bpr, config.use_rec,
                                      want_grads=False)
            losses[iu, ii] = values.total
    return LandscapeGrid(p_values=p_values, losses=losses)
