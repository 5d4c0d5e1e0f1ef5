"""Training objectives over per-timestep output logits.

The main objective weights each timestep's cross entropy by how confident
the network already is at that step. Confidence is one minus the normalized
entropy of the step's softmax, so it lives in [0, 1] regardless of class
count. The per-step confidences pass through a temperature softmax over
time to become mixing weights. Steps where the network has made up its mind
dominate the loss; undecided early steps contribute less.

By default the weights are treated as constants during the backward pass
(only the cross-entropy terms receive gradient). The plain baseline
averages logits over time first and applies a single cross entropy.
"""
from __future__ import annotations

import numpy as np

from .autodiff import Tensor, softmax_rows, stack
from .errors import ContractError, ShapeError


def _check_labels(labels, n, c):
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape}, expected ({n},)")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ContractError("labels must be integers")
    if labels.min() < 0 or labels.max() >= c:
        raise ContractError(f"labels must lie in [0, {c})")
    return labels


def _log_softmax(o):
    z = o - o.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def cross_entropy_rows(logits: Tensor, labels) -> Tensor:
    """Per-row cross entropy, shape (N,). Stable via log-sum-exp."""
    if logits.ndim != 2:
        raise ShapeError("cross_entropy_rows expects (N, C) logits")
    n, c = logits.shape
    labels = _check_labels(labels, n, c)
    logp = _log_softmax(logits.data)
    out = Tensor(-logp[np.arange(n), labels], (logits,), "cross_entropy")

    def bw(g, logits=logits, logp=logp, labels=labels, n=n):
        dz = np.exp(logp)
        dz[np.arange(n), labels] -= 1.0
        logits.accumulate(g[:, None] * dz)

    out._backward = bw
    return out


def confidence(logits: Tensor) -> Tensor:
    """Per-row certainty in [0, 1]: one minus entropy over log(C).

    Uniform logits give 0; probability mass concentrated on one class
    approaches 1. Entropy is measured in nats and normalized by log(C).
    """
    if logits.ndim != 2:
        raise ShapeError("confidence expects (N, C) logits")
    n, c = logits.shape
    if c < 2:
        raise ContractError("confidence needs at least two classes")
    logp = _log_softmax(logits.data)
    p = np.exp(logp)
    ent = -(p * logp).sum(axis=1)
    log_c = np.log(c)
    out = Tensor(1.0 - ent / log_c, (logits,), "confidence")

    def bw(g, logits=logits, p=p, logp=logp, ent=ent, log_c=log_c):
        # d(1 - H/logC)/do_j = p_j (logp_j + H) / logC
        d = p * (logp + ent[:, None]) / log_c
        logits.accumulate(g[:, None] * d)

    out._backward = bw
    return out


def temporal_weights(lam: Tensor, tau: float = 2.0) -> Tensor:
    """Softmax over time of confidence/tau; lam is (N, T), result is (N, T)."""
    if tau <= 0:
        raise ContractError(f"tau must be positive, got {tau}")
    return softmax_rows(lam * (1.0 / tau))


def tad_loss(step_logits, labels, tau: float = 2.0,
             detach_weights: bool = True) -> Tensor:
    """Confidence-weighted cross entropy over an unrolled run.

    ``step_logits`` is a list of (N, C) tensors, one per timestep. Each
    sample's per-step cross entropies are mixed by its own temporal weights
    and the result is averaged over the batch.
    """
    step_logits = list(step_logits)
    if not step_logits:
        raise ContractError("tad_loss needs at least one timestep")
    lam = stack([confidence(o) for o in step_logits], axis=1)
    w = temporal_weights(lam, tau)
    if detach_weights:
        w = w.detach()
    ces = stack([cross_entropy_rows(o, labels) for o in step_logits], axis=1)
    return (w * ces).sum(axis=1).mean()


def vanilla_loss(step_logits, labels) -> Tensor:
    """Cross entropy of the time-averaged logits, batch-averaged."""
    step_logits = list(step_logits)
    if not step_logits:
        raise ContractError("vanilla_loss needs at least one timestep")
    scale = 1.0 / len(step_logits)
    avg = step_logits[0] * scale
    for o in step_logits[1:]:
        avg = avg + o * scale
    return cross_entropy_rows(avg, labels).mean()
