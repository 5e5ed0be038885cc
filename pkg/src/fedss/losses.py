"""Softmax-family training objectives with analytic gradients.

Four closely related objectives act on one logit vector laid out over an
ordered label set S (the union of a client's own classes and its sampled
negatives):

* full softmax cross-entropy over every class,
* sampled softmax over the target plus sampled negatives,
* the federated variant over all of S (positives included as extra
  negatives for each example),
* negatives-only and positives-only ablations that restrict which
  columns push against the target.

All of them are a masked softmax cross-entropy over importance-adjusted
logits, so they share one stable log-sum-exp core. Sampled negatives get
their logits shifted down by log(m * q_j); classes that are present with
certainty (the client's own labels, including the target) carry no
adjustment.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from . import model as model_lib
from .errors import ContractViolationError
from .numerics import as_vector, log_sum_exp

OBJECTIVES = ("fedss", "fullsoftmax", "negonly", "posonly")


@dataclass
class LossOutput:
    """Loss value plus its gradient wrt the raw logit vector."""

    value: float
    grad_logits: np.ndarray


@dataclass
class SampledLogitContext:
    """Bookkeeping for one example's sampled label set.

    labels        ordered global class ids the logits are indexed by
    target        position of the example's true class within `labels`
    positive_mask True where the label is one of the client's own classes
    proposal_q    per-position sampling probability; consulted only at
                  negative positions
    """

    labels: np.ndarray
    target: int
    positive_mask: np.ndarray
    proposal_q: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 1 or self.labels.size == 0:
            raise ContractViolationError("labels must be a nonempty 1-D sequence")
        if np.unique(self.labels).size != self.labels.size:
            raise ContractViolationError("labels must be distinct")
        self.positive_mask = np.asarray(self.positive_mask, dtype=bool)
        if self.positive_mask.shape != self.labels.shape:
            raise ContractViolationError("positive_mask shape mismatch")
        self.target = int(self.target)
        if not 0 <= self.target < self.labels.size:
            raise ContractViolationError("target position out of range")
        if not self.positive_mask[self.target]:
            raise ContractViolationError("target must be a positive class")
        self.proposal_q = np.asarray(self.proposal_q, dtype=np.float64)
        if self.proposal_q.shape != self.labels.shape:
            raise ContractViolationError("proposal_q shape mismatch")
        if np.any(self.proposal_q[self.negative_mask] <= 0.0):
            raise ContractViolationError("proposal probabilities must be positive")

    @property
    def negative_mask(self) -> np.ndarray:
        return ~self.positive_mask

    @property
    def num_negatives(self) -> int:
        return int(self.negative_mask.sum())

    @classmethod
    def uniform(cls, labels, target, positive_mask, pool_size: int):
        """Context for negatives drawn uniformly from a pool of `pool_size`."""
        labels = np.asarray(labels, dtype=np.int64)
        positive_mask = np.asarray(positive_mask, dtype=bool)
        if np.any(~positive_mask) and pool_size < 1:
            raise ContractViolationError("pool_size must be >= 1 with negatives")
        q = np.full(labels.shape, 1.0 / pool_size if pool_size >= 1 else 1.0)
        return cls(
            labels=labels, target=target, positive_mask=positive_mask, proposal_q=q
        )


def logit_adjustments(ctx: SampledLogitContext) -> np.ndarray:
    """Importance corrections: log(m * q_j) at negatives, zero at positives."""
    adj = np.zeros(ctx.labels.shape)
    m = ctx.num_negatives
    if m > 0:
        neg = ctx.negative_mask
        adj[neg] = np.log(m * ctx.proposal_q[neg])
    return adj


def adjust_logits(o, ctx: SampledLogitContext) -> np.ndarray:
    """o'_j = o_j - log(m q_j) for sampled negatives; positives unchanged."""
    o = as_vector(o, "o")
    if o.shape != ctx.labels.shape:
        raise ContractViolationError("logit length does not match context")
    return o - logit_adjustments(ctx)


def softmax_probs(o) -> np.ndarray:
    """Softmax distribution over logits, via the stable log-sum-exp."""
    o = as_vector(o, "o")
    if o.size == 0:
        raise ContractViolationError("softmax of an empty vector")
    return np.exp(o - log_sum_exp(o))


def full_softmax_loss(o, t: int) -> LossOutput:
    """Cross-entropy over every class: -o_t + log sum_j exp(o_j)."""
    o = as_vector(o, "o")
    t = int(t)
    if not 0 <= t < o.size:
        raise ContractViolationError(f"target {t} out of range for {o.size} logits")
    lse = log_sum_exp(o)
    grad = np.exp(o - lse)
    grad[t] -= 1.0
    return LossOutput(value=lse - float(o[t]), grad_logits=grad)


def _masked_ce(adjusted: np.ndarray, t: int, mask: np.ndarray) -> LossOutput:
    """Cross-entropy over the masked columns; `mask[t]` must hold."""
    sub = np.where(mask, adjusted, -np.inf)
    hi = float(np.max(sub))
    z = np.exp(sub - hi)
    total = float(z.sum())
    lse = hi + float(np.log(total))
    grad = z / total
    grad[t] -= 1.0
    return LossOutput(value=lse - float(adjusted[t]), grad_logits=grad)


def sampled_softmax_loss(o, ctx: SampledLogitContext) -> LossOutput:
    """Sampled softmax over the target plus its sampled negatives.

    The context must contain exactly one positive (the target); use
    fedss_loss when further positives participate.
    """
    if int(ctx.positive_mask.sum()) != 1:
        raise ContractViolationError(
            "sampled softmax context must contain only the target as positive"
        )
    adjusted = adjust_logits(o, ctx)
    return _masked_ce(adjusted, ctx.target, np.ones(adjusted.shape, dtype=bool))


def fedss_loss(o, ctx: SampledLogitContext) -> LossOutput:
    """Sampled softmax over the whole label set S, local positives included."""
    adjusted = adjust_logits(o, ctx)
    return _masked_ce(adjusted, ctx.target, np.ones(adjusted.shape, dtype=bool))


def fedss_loss_rewritten(o, ctx: SampledLogitContext) -> float:
    """Equivalent log(1 + sum of exp(o'_j - o'_t)) form, used as an oracle."""
    adjusted = adjust_logits(o, ctx)
    delta = adjusted - adjusted[ctx.target]
    others = np.delete(delta, ctx.target)
    return float(np.log1p(np.sum(np.exp(others))))


def negonly_loss(o, ctx: SampledLogitContext) -> LossOutput:
    """Only the sampled negatives push against the target."""
    adjusted = adjust_logits(o, ctx)
    mask = ctx.negative_mask.copy()
    mask[ctx.target] = True
    return _masked_ce(adjusted, ctx.target, mask)


def posonly_loss(o, ctx: SampledLogitContext) -> LossOutput:
    """Only the client's own classes participate; no sampled negatives."""
    adjusted = adjust_logits(o, ctx)
    return _masked_ce(adjusted, ctx.target, ctx.positive_mask.copy())


def loss_backward_to_params(grad_logits, logit_cache, feature_cache, phi, head: str):
    """Chain a loss gradient back through the logit head and the extractor.

    Returns (grad_layers, grad_W_S) where grad_layers aligns with
    phi.layers.
    """
    grad_f, grad_W = model_lib.logits_backward(head, logit_cache, grad_logits)
    grad_layers, _ = model_lib.features_backward(phi, feature_cache, grad_f)
    return grad_layers, grad_W


def objective_for_method(method: str) -> str:
    """Map a federation method name onto the loss it optimizes locally."""
    table = {
        "fedss": "fedss",
        "fullsoftmax": "fullsoftmax",
        "negonly": "negonly",
        "negonly_matched": "negonly",
        "posonly": "posonly",
        "fedaws": "posonly",
    }
    if method not in table:
        raise ContractViolationError(f"unknown method {method!r}")
    return table[method]


def minibatch_loss_and_grad(
    logits: np.ndarray,
    targets: np.ndarray,
    positive_mask: np.ndarray,
    adjustments: np.ndarray,
    objective: str,
) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorized per-example losses for a batch sharing one label set.

    logits       (B, S) raw logits over the shared ordered label set
    targets      (B,) position of each example's true class
    positive_mask(S,) True at the client's own classes
    adjustments  (S,) importance corrections subtracted from the logits

    Returns (values, grads) with grads the per-example gradients wrt the
    raw logits. The adjustment shift is constant per column, so gradients
    wrt raw and adjusted logits coincide.
    """
    if objective not in OBJECTIVES:
        raise ContractViolationError(f"unknown objective {objective!r}")
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    B, S = logits.shape
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (B,):
        raise ContractViolationError("targets shape does not match batch")
    if np.any((targets < 0) | (targets >= S)):
        raise ContractViolationError("target position out of range")
    positive_mask = np.asarray(positive_mask, dtype=bool)
    if not np.all(positive_mask[targets]):
        raise ContractViolationError("every target must be a positive class")
    rows = np.arange(B)
    adjusted = logits - adjustments[None, :]
    if objective in ("fedss", "fullsoftmax"):
        mask = np.ones((B, S), dtype=bool)
    elif objective == "negonly":
        mask = np.repeat(~positive_mask[None, :], B, axis=0)
        mask[rows, targets] = True
    else:  # posonly
        mask = np.repeat(positive_mask[None, :], B, axis=0)
    sub = np.where(mask, adjusted, -np.inf)
    hi = sub.max(axis=1, keepdims=True)
    z = np.exp(sub - hi)
    total = z.sum(axis=1, keepdims=True)
    lse = hi + np.log(total)
    values = lse[:, 0] - adjusted[rows, targets]
    grads = z / total
    grads[rows, targets] -= 1.0
    return values, grads
