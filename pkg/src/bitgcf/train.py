"""Training: manual reverse-mode gradients, ranking + reconstruction losses, Adam.

Gradients are hand-derived rather than autodiff-generated. The quantizer's
backward rule is a straight-through estimator masked to |preactivation| <= 1;
the propagation operator is symmetric, so its adjoint is itself. Rescaling
factors are treated as constants of the backward pass unless learnable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from bitgcf.evaluate import evaluate
from bitgcf.graph import SplitDataset, propagate
from bitgcf.model import (ForwardCache, ModelParams, VariantFlags, aggregate,
                          forward, layer_is_quantized)


class DivergenceError(RuntimeError):
    """Training produced non-finite values; carries epoch/batch context."""


class SamplingError(RuntimeError):
    """Negative sampling is impossible (a user interacts with every item)."""


# variant name -> TrainConfig overrides (ablation switchboard)
VARIANTS = {
    "wo-tq": {"mode": "end", "topology_aware": False},
    "wo-bpr": {"mode": "end", "use_bpr": False},
    "wo-rec": {"mode": "end", "use_rec": False},
    "wo-raf": {"mode": "anl", "rescaling": "none"},
    "in-lf": {"mode": "anl", "rescaling": "learnable"},
    "wo-at": {"mode": "anl", "anneal_trigger_epoch": 1},
}


@dataclass
class TrainConfig:
    """Hyperparameters and variant switches for one training run.

    ``mode`` is "end" (quantized from epoch 1), "anl" (full-precision until
    the trigger epoch, quantized after), or "fp" (quantization masked
    throughout; the full-precision reference model).
    """

    batch_size: int = 2048
    learning_rate: float = 1e-3
    l2_coeff: float = 1e-4
    num_layers: int = 2
    embed_dim: int = 128
    code_dim: int = 128
    epochs: int = 200
    anneal_trigger_epoch: int | None = None
    neg_per_pos: int = 1
    rec_neg_per_pos: int = 1
    seed: int = 0
    mode: str = "end"
    topology_aware: bool = True
    rescaling: str | None = None
    use_bpr: bool = True
    use_rec: bool = True
    eval_every: int = 0
    eval_k: int = 20
    early_stop_patience: int | None = None
    init_std: float = 0.01

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.l2_coeff < 0:
            raise ValueError("l2_coeff must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.mode not in ("end", "anl", "fp"):
            raise ValueError(f"mode must be end, anl, or fp, got {self.mode!r}")
        if self.neg_per_pos < 1 or self.rec_neg_per_pos < 1:
            raise ValueError("negatives per positive must be >= 1")
        if self.rescaling is None:
            self.rescaling = "deterministic" if self.mode == "anl" else "none"
        if self.mode in ("end", "fp") and self.rescaling != "none":
            raise ValueError(f"{self.mode} mode does not take rescaling factors")
        if self.mode == "end":
            if self.anneal_trigger_epoch is None:
                self.anneal_trigger_epoch = 1
            elif self.anneal_trigger_epoch != 1:
                raise ValueError("end mode quantizes from epoch 1")
        if self.anneal_trigger_epoch is None:
            self.anneal_trigger_epoch = math.ceil(self.epochs / 2)
        if not 1 <= self.anneal_trigger_epoch <= self.epochs:
            raise ValueError("anneal_trigger_epoch must lie in [1, epochs]")

    @classmethod
    def for_variant(cls, variant: str | None, **kwargs) -> "TrainConfig":
        """Build a config for one of the named ablations (or None for the base model)."""
        if variant:
            if variant not in VARIANTS:
                raise ValueError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
            kwargs = {**kwargs, **VARIANTS[variant]}
        return cls(**kwargs)

    def variant_flags(self, quantization_enabled: bool) -> VariantFlags:
        return VariantFlags(
            mode="anl" if self.mode == "anl" else "end",
            quantization_enabled=quantization_enabled,
            topology_aware=self.topology_aware,
            rescaling=self.rescaling,
        )


@dataclass
class Gradients:
    base_embeddings: np.ndarray
    transform: np.ndarray
    learnable_factors: np.ndarray | None = None

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "Gradients":
        lf = None
        if params.learnable_factors is not None:
            lf = np.zeros_like(params.learnable_factors)
        return cls(np.zeros_like(params.base_embeddings),
                   np.zeros_like(params.transform), lf)

    def named_tensors(self):
        pairs = [("base_embeddings", self.base_embeddings), ("transform", self.transform)]
        if self.learnable_factors is not None:
            pairs.append(("learnable_factors", self.learnable_factors))
        return pairs


@dataclass
class AdamState:
    first_moment: dict
    second_moment: dict
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: ModelParams) -> "AdamState":
        return cls(first_moment={n: np.zeros_like(t) for n, t in params.named_tensors()},
                   second_moment={n: np.zeros_like(t) for n, t in params.named_tensors()})


@dataclass
class Batch:
    """One training batch: positive edges plus sampled negative item indices."""

    users: np.ndarray  # (B,) user indices
    pos_items: np.ndarray  # (B,) item indices
    bpr_neg_items: np.ndarray | None = None  # (B, neg_per_pos)
    rec_neg_items: np.ndarray | None = None  # (B, rec_neg_per_pos)


@dataclass
class LossValues:
    total: float
    bpr: float | None
    rec: float | None


def sample_negatives(graph, users, per_user: int, rng, max_rounds: int = 100) -> np.ndarray:
    """Uniform non-neighbor items for each user, (len(users), per_user).

    Rejection sampling against the train adjacency, with a bounded number of
    redraw rounds; stubborn entries fall back to an explicit complement draw.
    A user adjacent to every item makes sampling impossible and raises.
    """
    users = np.asarray(users, dtype=np.int64)
    num_items = graph.num_items
    cand = rng.integers(num_items, size=(len(users), per_user))
    user_grid = np.broadcast_to(users[:, None], cand.shape)

    for _ in range(max_rounds):
        bad = graph.has_edges(user_grid, cand)
        if not bad.any():
            return cand
        cand[bad] = rng.integers(num_items, size=int(bad.sum()))
    bad = graph.has_edges(user_grid, cand)
    for b, j in zip(*np.nonzero(bad)):
        pool = np.setdiff1d(np.arange(num_items), graph.items_of(int(users[b])),
                            assume_unique=True)
        if len(pool) == 0:
            raise SamplingError(
                f"user {users[b]} interacts with every item; no negative exists")
        cand[b, j] = rng.choice(pool)
    return cand


def sample_batch(split: SplitDataset, batch_size: int, neg_per_pos: int, rng,
                 rec_neg_per_pos: int | None = None) -> Batch:
    """Draw batch_size positive edges uniformly plus negatives for each."""
    graph = split.train
    if graph.num_edges == 0:
        raise ValueError("train graph has no edges")
    users_e, items_e = graph.edge_arrays()
    pick = rng.integers(graph.num_edges, size=batch_size)
    users, pos = users_e[pick], items_e[pick]
    negs = sample_negatives(graph, users, neg_per_pos, rng)
    rec_negs = None
    if rec_neg_per_pos is not None:
        rec_negs = sample_negatives(graph, users, rec_neg_per_pos, rng)
    return Batch(users=users, pos_items=pos, bpr_neg_items=negs, rec_neg_items=rec_negs)


def _scatter_add(target: np.ndarray, rows: np.ndarray, values: np.ndarray) -> None:
    """target[rows] += values with repeated rows accumulated (fast np.add.at)."""
    dim = target.shape[1]
    flat = (rows[:, None] * dim + np.arange(dim)).ravel()
    target += np.bincount(flat, weights=values.ravel(),
                          minlength=target.size).reshape(target.shape)


def bpr_loss(pos_scores, neg_scores) -> float:
    """Mean pairwise ranking loss softplus(neg - pos), stable for large gaps."""
    pos_scores = np.asarray(pos_scores, dtype=np.float64)
    neg_scores = np.asarray(neg_scores, dtype=np.float64)
    if pos_scores.shape != neg_scores.shape:
        raise ValueError("pos and neg score arrays must have equal shape")
    return float(np.logaddexp(0.0, neg_scores - pos_scores).mean())


def rec_loss(v_users, v_pos_items, v_neg_items) -> float:
    """Binary cross-entropy on last-layer continuous inner products.

    Observed pairs carry label 1, sampled negatives label 0; the mean runs
    over all positive and negative terms together.
    """
    v_users = np.asarray(v_users, dtype=np.float64)
    v_pos = np.asarray(v_pos_items, dtype=np.float64)
    v_neg = np.asarray(v_neg_items, dtype=np.float64)
    z_pos = (v_users * v_pos).sum(axis=1)
    z_neg = np.einsum("bc,bnc->bn", v_users, v_neg)
    total = np.logaddexp(0.0, -z_pos).sum() + np.logaddexp(0.0, z_neg).sum()
    return float(total / (z_pos.size + z_neg.size))


def l2_penalty(params: ModelParams) -> float:
    return float(sum(np.sum(t * t) for _, t in params.named_tensors()))


def total_loss(bpr: float | None, rec: float | None, params: ModelParams,
               l2_coeff: float, use_bpr: bool = True, use_rec: bool = True) -> float:
    """Sum of the enabled loss terms plus the L2 regularizer over all tensors."""
    if not (use_bpr or use_rec):
        raise ValueError("at least one of the BPR and reconstruction losses must be enabled")
    out = l2_coeff * l2_penalty(params)
    if use_bpr:
        out += bpr
    if use_rec:
        out += rec
    return float(out)


def ste_backward(upstream_grad: np.ndarray, preactivation: np.ndarray) -> np.ndarray:
    """Straight-through estimator: pass gradients where |phi| <= 1, zero elsewhere."""
    upstream_grad = np.asarray(upstream_grad, dtype=np.float64)
    preactivation = np.asarray(preactivation, dtype=np.float64)
    if upstream_grad.shape != preactivation.shape:
        raise ValueError("gradient and preactivation shapes differ")
    return upstream_grad * (np.abs(preactivation) <= 1.0)


def backward(cache: ForwardCache, loss_grads_at_f: np.ndarray, params: ModelParams,
             flags: VariantFlags, training: bool = True,
             grad_last_continuous: np.ndarray | None = None) -> Gradients:
    """Reverse-mode pass from aggregated representations back to the parameters.

    ``loss_grads_at_f`` is dL/df for the aggregation produced with the same
    ``training`` flag. ``grad_last_continuous`` injects dL/dv^(L) for loss
    terms on the last-layer continuous embeddings (no straight-through mask
    on that path).
    """
    L = cache.num_layers
    if loss_grads_at_f.shape != (params.num_nodes, params.code_dim):
        raise ValueError("loss_grads_at_f shape does not match the model")
    grads = Gradients.zeros_like(params)
    upstream = loss_grads_at_f / (L + 1) if training else loss_grads_at_f

    grad_v = []
    for layer in range(L + 1):
        if layer_is_quantized(layer, flags, L):
            if flags.rescaling == "deterministic":
                g_codes = cache.alphas[:, layer:layer + 1] * upstream
            elif flags.rescaling == "learnable":
                g_codes = cache.learnable_factors[:, layer:layer + 1] * upstream
                grads.learnable_factors[:, layer] = (upstream * cache.codes[layer]).sum(axis=1)
            else:
                g_codes = upstream
            g_phi = ste_backward(g_codes, cache.preactivation[layer])
        else:
            g_phi = upstream
        grads.transform += cache.continuous[layer].T @ g_phi
        grad_v.append(g_phi @ params.transform.T)

    if grad_last_continuous is not None:
        grad_v[L] = grad_v[L] + grad_last_continuous
    acc = grad_v[L]
    for layer in range(L, 0, -1):
        acc = propagate(acc, cache.graph)  # operator is its own adjoint
        acc += grad_v[layer - 1]
    grads.base_embeddings += acc
    return grads


def compute_batch(params: ModelParams, graph, batch: Batch, flags: VariantFlags,
                  l2_coeff: float, use_bpr: bool = True, use_rec: bool = True,
                  want_grads: bool = True):
    """Forward + losses (+ gradients) for one batch. Returns (LossValues, Gradients|None).

    The regularizer follows the batched convention: the squared norms of the
    batch rows' base embeddings (positives and sampled negatives) plus the
    shared tensors, scaled by 1/batch_size. Regularizing the whole embedding
    table every step at the same strength would swamp the data gradients and
    pin the full-precision path at zero.
    """
    if not (use_bpr or use_rec):
        raise ValueError("at least one of the BPR and reconstruction losses must be enabled")
    num_users = graph.num_users
    cache = forward(params, graph, flags)
    f = aggregate(cache, flags, training=True)
    d = params.code_dim

    grad_f = np.zeros_like(f) if want_grads else None
    grad_v_last = None
    bpr_value = rec_value = None

    users = np.asarray(batch.users, dtype=np.int64)
    pos_nodes = np.asarray(batch.pos_items, dtype=np.int64) + num_users

    if use_bpr:
        neg_nodes = np.asarray(batch.bpr_neg_items, dtype=np.int64) + num_users
        f_u, f_p, f_n = f[users], f[pos_nodes], f[neg_nodes]
        pos_scores = (f_u * f_p).sum(axis=1)
        neg_scores = np.einsum("bd,bnd->bn", f_u, f_n)
        gap = neg_scores - pos_scores[:, None]
        bpr_value = float(np.logaddexp(0.0, gap).mean())
        if want_grads:
            g_gap = expit(gap) / gap.size
            g_users = np.einsum("bn,bnd->bd", g_gap, f_n) - g_gap.sum(axis=1)[:, None] * f_p
            rows = np.concatenate([users, pos_nodes, neg_nodes.ravel()])
            vals = np.concatenate([
                g_users,
                -g_gap.sum(axis=1)[:, None] * f_u,
                (g_gap[:, :, None] * f_u[:, None, :]).reshape(-1, d),
            ])
            _scatter_add(grad_f, rows, vals)

    if use_rec:
        v_last = cache.continuous[-1]
        rec_neg_nodes = np.asarray(batch.rec_neg_items, dtype=np.int64) + num_users
        v_u, v_p, v_n = v_last[users], v_last[pos_nodes], v_last[rec_neg_nodes]
        z_pos = (v_u * v_p).sum(axis=1)
        z_neg = np.einsum("bc,bnc->bn", v_u, v_n)
        count = z_pos.size + z_neg.size
        rec_value = float((np.logaddexp(0.0, -z_pos).sum() + np.logaddexp(0.0, z_neg).sum())
                          / count)
        if want_grads:
            dz_pos = -expit(-z_pos) / count
            dz_neg = expit(z_neg) / count
            grad_v_last = np.zeros_like(v_last)
            g_users = dz_pos[:, None] * v_p + np.einsum("bn,bnc->bc", dz_neg, v_n)
            rows = np.concatenate([users, pos_nodes, rec_neg_nodes.ravel()])
            vals = np.concatenate([
                g_users,
                dz_pos[:, None] * v_u,
                (dz_neg[:, :, None] * v_u[:, None, :]).reshape(-1, v_last.shape[1]),
            ])
            _scatter_add(grad_v_last, rows, vals)

    batch_size = len(users)
    reg_rows = [users, pos_nodes]
    if batch.bpr_neg_items is not None:
        reg_rows.append(np.asarray(batch.bpr_neg_items, dtype=np.int64).ravel() + num_users)
    if batch.rec_neg_items is not None:
        reg_rows.append(np.asarray(batch.rec_neg_items, dtype=np.int64).ravel() + num_users)
    reg_rows = np.concatenate(reg_rows)
    base = params.base_embeddings
    reg = float((base[reg_rows] ** 2).sum() + (params.transform ** 2).sum())
    if params.learnable_factors is not None:
        reg += float((params.learnable_factors ** 2).sum())
    reg *= l2_coeff / batch_size

    total = reg
    if use_bpr:
        total += bpr_value
    if use_rec:
        total += rec_value
    losses = LossValues(total=float(total), bpr=bpr_value, rec=rec_value)
    if not want_grads:
        return losses, None
    grads = backward(cache, grad_f, params, flags, training=True,
                     grad_last_continuous=grad_v_last)
    scale = 2.0 * l2_coeff / batch_size
    _scatter_add(grads.base_embeddings, reg_rows, scale * base[reg_rows])
    grads.transform += scale * params.transform
    if params.learnable_factors is not None:
        grads.learnable_factors += scale * params.learnable_factors
    return losses, grads


def adam_step(params: ModelParams, grads: Gradients, state: AdamState,
              learning_rate: float) -> None:
    """One bias-corrected Adam update, in place."""
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, tensor in params.named_tensors():
        g = getattr(grads, name)
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise DivergenceError(f"non-finite gradient for {name}")
        m = state.first_moment[name]
        v = state.second_moment[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        tensor -= learning_rate * (m / c1) / (np.sqrt(v / c2) + state.eps)


def annealing_schedule(epoch: int, config: TrainConfig) -> bool:
    """Quantization on/off for a 1-based epoch: off before the trigger epoch."""
    if not 1 <= epoch <= config.epochs:
        raise ValueError(f"epoch {epoch} outside [1, {config.epochs}]")
    if config.mode == "fp":
        return False
    if config.mode == "end":
        return True
    return epoch >= config.anneal_trigger_epoch


@dataclass
class EpochRecord:
    epoch: int
    total_loss: float
    bpr_loss: float | None
    rec_loss: float | None
    quant_enabled: bool
    recall: float | None = None
    ndcg: float | None = None


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    eval_k: int = 20

    def to_csv(self, path) -> None:
        def cell(v):
            return "" if v is None else (f"{v:.10g}" if isinstance(v, float) else str(v))

        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"epoch,total_loss,bpr_loss,rec_loss,quant_enabled,"
                     f"recall@{self.eval_k},ndcg@{self.eval_k}\n")
            for r in self.records:
                fh.write(",".join([str(r.epoch), cell(r.total_loss), cell(r.bpr_loss),
                                   cell(r.rec_loss), str(int(r.quant_enabled)),
                                   cell(r.recall), cell(r.ndcg)]) + "\n")


def train_loop(config: TrainConfig, split: SplitDataset, verbose: bool = False):
    """Run the full training schedule; returns (params, history).

    Each epoch shuffles the train edges, walks them in batches with freshly
    sampled negatives, and applies one Adam step per batch. Quantization is
    switched per epoch by the annealing schedule. Fixed (config, seed, data)
    reproduces bitwise-identical parameters and history.
    """
    if not (config.use_bpr or config.use_rec):
        raise ValueError("both loss terms disabled; nothing to optimize")
    graph = split.train
    if graph.num_edges == 0:
        raise ValueError("train graph has no edges")
    rng_init = np.random.default_rng(config.seed)
    params = ModelParams.initialize(
        graph.num_nodes, config.embed_dim, config.code_dim, config.num_layers,
        rng_init, learnable_rescaling=(config.rescaling == "learnable"),
        init_std=config.init_std)
    state = AdamState.for_params(params)
    users_e, items_e = graph.edge_arrays()
    num_edges = len(users_e)
    history = TrainHistory(eval_k=config.eval_k)
    best_recall, stale = -np.inf, 0

    for epoch in range(1, config.epochs + 1):
        quant_on = annealing_schedule(epoch, config)
        flags = config.variant_flags(quant_on)
        order = np.random.default_rng([config.seed, 101, epoch]).permutation(num_edges)
        sums = {"total": 0.0, "bpr": 0.0, "rec": 0.0}
        num_batches = 0
        for b, start in enumerate(range(0, num_edges, config.batch_size)):
            idx = order[start:start + config.batch_size]
            rng_b = np.random.default_rng([config.seed, 733, epoch, b])
            batch = Batch(
                users=users_e[idx],
                pos_items=items_e[idx],
                bpr_neg_items=(sample_negatives(graph, users_e[idx], config.neg_per_pos, rng_b)
                               if config.use_bpr else None),
                rec_neg_items=(sample_negatives(graph, users_e[idx], config.rec_neg_per_pos, rng_b)
                               if config.use_rec else None),
            )
            try:
                losses, grads = compute_batch(
                    params, graph, batch, flags, config.l2_coeff,
                    config.use_bpr, config.use_rec)
            except (FloatingPointError, DivergenceError) as exc:
                raise DivergenceError(f"divergence at epoch {epoch}, batch {b}: {exc}") from exc
            if not np.isfinite(losses.total):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, batch {b}")
            adam_step(params, grads, state, config.learning_rate)
            sums["total"] += losses.total
            sums["bpr"] += losses.bpr or 0.0
            sums["rec"] += losses.rec or 0.0
            num_batches += 1

        record = EpochRecord(
            epoch=epoch,
            total_loss=sums["total"] / num_batches,
            bpr_loss=sums["bpr"] / num_batches if config.use_bpr else None,
            rec_loss=sums["rec"] / num_batches if config.use_rec else None,
            quant_enabled=quant_on,
        )
        if config.eval_every and (epoch % config.eval_every == 0 or epoch == config.epochs):
            report = evaluate((params, flags), split, ks=(config.eval_k,))
            record.recall = report.recall[config.eval_k]
            record.ndcg = report.ndcg[config.eval_k]
        history.records.append(record)
        if verbose:
            extra = "" if record.recall is None else (
                f"  recall@{config.eval_k}={record.recall:.4f}")
            print(f"epoch {epoch:4d}  loss={record.total_loss:.5f}  "
                  f"quant={int(quant_on)}{extra}")
        if (config.early_stop_patience is not None and record.recall is not None
                and quant_on):
            if record.recall > best_recall:
                best_recall, stale = record.recall, 0
            else:
                stale += 1
                if stale > config.early_stop_patience:
                    break
    return params, history
