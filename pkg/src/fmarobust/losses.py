"""Training objectives: cross-entropy, the feature-map consistency
regularizer (FMA), the stability-training (ST) softmax regularizer, and
the total-loss dispatcher for the AT / ST / FMA finetuning methods.

All losses are graph scalars; gradients flow through both the clean and
the augmented branch (no stop-gradient anywhere).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model as M
from . import tensor as T
from .errors import ContractError, DimensionError

METHODS = ("at", "st", "fma")
DEFAULT_GAMMA_GRID = (0.01, 0.1, 1.0, 10.0)


@dataclass(frozen=True)
class LossConfig:
    """Which objective to optimize and its weights."""

    method: str = "fma"
    gamma: float = 1.0              # FMA regularizer weight
    st_weight: float = 1.0          # ST regularizer weight
    epsilon_mean: float = 1e-8      # guard for dead feature-map means
    st_distance: str = "kl"         # "kl" or "l2" on the softmax outputs

    def __post_init__(self):
        if self.method not in METHODS:
            raise ContractError(f"method must be one of {METHODS}")
        if self.gamma < 0 or self.st_weight < 0:
            raise ContractError("loss weights must be >= 0")
        if self.epsilon_mean <= 0:
            raise ContractError("epsilon_mean must be > 0")
        if self.st_distance not in ("kl", "l2"):
            raise ContractError("st_distance must be 'kl' or 'l2'")


def cross_entropy(logp: T.GraphNode, labels) -> T.GraphNode:
    """Mean over the batch of -logp[n, labels[n]]."""
    picked = T.take_per_row(logp, labels)
    return T.mul_scalar(T.mean_all(picked), -1.0)


def fma_loss(taps_clean, taps_aug, epsilon_mean: float = 1e-8) -> T.GraphNode:
    """Layer-averaged, dimension-normalized squared feature-map difference.

    Per layer and per sample: || (f(x) - f(x~)) / max(mean f(x), eps) ||^2
    divided by the element count of the tap, averaged over the batch, then
    averaged over layers. Zero iff all paired taps agree.
    """
    if len(taps_clean) != len(taps_aug) or not taps_clean:
        raise ContractError(
            f"fma_loss: need equal nonempty tap lists, got "
            f"{len(taps_clean)} and {len(taps_aug)}")
    total = None
    for clean, aug in zip(taps_clean, taps_aug):
        clean, aug = T.as_node(clean), T.as_node(aug)
        if clean.shape != aug.shape:
            raise DimensionError(
                f"fma_loss: paired tap shapes differ: "
                f"{clean.shape} vs {aug.shape}")
        if clean.value.array.ndim < 2:
            raise DimensionError("fma_loss: taps must be (N, ...) batched")
        kappa = int(np.prod(clean.shape[1:]))
        diff = T.sub(clean, aug)
        denom = T.reciprocal(T.clamp_min(T.per_sample_mean(clean), epsilon_mean))
        scaled = T.scale_rows(diff, denom)
        per_sample = T.per_sample_sum(T.mul(scaled, scaled))
        term = T.mul_scalar(T.mean_all(per_sample), 1.0 / kappa)
        total = term if total is None else T.add(total, term)
    return T.mul_scalar(total, 1.0 / len(taps_clean))


def st_loss(logp_clean: T.GraphNode, logp_aug: T.GraphNode,
            distance: str = "kl") -> T.GraphNode:
    """Divergence between clean and augmented softmax outputs.

    "kl": mean_n KL(P_clean ; P_aug) with the clean side as reference.
    "l2": mean_n sum_j (P_clean_j - P_aug_j)^2.
    """
    logp_clean, logp_aug = T.as_node(logp_clean), T.as_node(logp_aug)
    if logp_clean.shape != logp_aug.shape:
        raise DimensionError(
            f"st_loss: shapes differ: {logp_clean.shape} vs {logp_aug.shape}")
    p_clean = T.exp(logp_clean)
    if distance == "kl":
        pointwise = T.mul(p_clean, T.sub(logp_clean, logp_aug))
    else:
        d = T.sub(p_clean, T.exp(logp_aug))
        pointwise = T.mul(d, d)
    return T.mean_all(T.per_sample_sum(pointwise))


def _check_aligned(batch_clean, batch_aug, labels):
    bc = np.asarray(batch_clean.array if isinstance(batch_clean, (T.GraphNode,))
                    else batch_clean)
    ba = np.asarray(batch_aug.array if isinstance(batch_aug, (T.GraphNode,))
                    else batch_aug)
    if bc.shape != ba.shape:
        raise ContractError(
            f"clean/augmented batches misaligned: {bc.shape} vs {ba.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (bc.shape[0],):
        raise ContractError(
            f"labels shape {labels.shape} does not match batch {bc.shape[0]}")
    return bc, ba, labels


def total_loss(config: LossConfig, m: M.ModelSnapshot, batch_clean, batch_aug,
               labels, param_nodes=None) -> T.GraphNode:
    """The finetuning objective for the configured method.

    AT: cross-entropy over the concatenated clean+augmented batch (the
        augmented copies reuse the clean labels).
    ST: cross-entropy(clean) + st_weight * softmax divergence.
    FMA: cross-entropy(clean) + gamma * feature-map consistency loss.
    ST and FMA never consult labels for the augmented branch.
    """
    bc, ba, labels = _check_aligned(batch_clean, batch_aug, labels)

    if config.method == "at":
        both = np.concatenate([bc, ba], axis=0)
        logits, _ = M.forward(m, both, want_taps=False, param_nodes=param_nodes)
        return cross_entropy(T.softmax_logp(logits),
                             np.concatenate([labels, labels]))

    if config.method == "st":
        logits_c, _ = M.forward(m, bc, want_taps=False, param_nodes=param_nodes)
        ce = cross_entropy(T.softmax_logp(logits_c), labels)
        if config.st_weight == 0.0:
            return ce
        logits_a, _ = M.forward(m, ba, want_taps=False, param_nodes=param_nodes)
        reg = st_loss(T.softmax_logp(logits_c), T.softmax_logp(logits_a),
                      distance=config.st_distance)
        return T.add(ce, T.mul_scalar(reg, config.st_weight))

    # FMA
    want = config.gamma != 0.0
    logits_c, taps_c = M.forward(m, bc, want_taps=want, param_nodes=param_nodes)
    ce = cross_entropy(T.softmax_logp(logits_c), labels)
    if not want:
        return ce
    _, taps_a = M.forward(m, ba, want_taps=True, param_nodes=param_nodes)
    reg = fma_loss(taps_c, taps_a, epsilon_mean=config.epsilon_mean)
    return T.add(ce, T.mul_scalar(reg, config.gamma))
