"""Loss functions: clean task cross-entropy, the label-preserving loss on
perturbed inputs, and the symmetric-KL regularizer tying perturbed
predictions to the clean prediction distribution.

Everything here is computed in logit space through log-softmax so saturated
heads cannot produce infinities, and every scalar is differentiable through
the tape.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import (
    Tensor,
    add,
    constant,
    log_softmax,
    mul,
    reduce_sum,
    reshape,
    scale,
    softmax,
    sub,
)
from .errors import ContractError, NumericDomainError
from .model import forward

KL_TARGET_GRAD_MODES = ("stop", "flow")


@dataclass(frozen=True)
class LossBreakdown:
    """Scalar decomposition of one step's objective."""

    l_std: float
    r_at: float
    r_kl: float
    total: float

    @classmethod
    def build(cls, l_std, r_at, r_kl, kl_weight):
        parts = {"l_std": float(l_std), "r_at": float(r_at), "r_kl": float(r_kl)}
        for name, v in parts.items():
            if not np.isfinite(v):
                raise NumericDomainError(f"loss component {name} is not finite: {v}")
            if v < 0.0:
                raise ContractError(f"loss component {name} must be nonnegative, got {v}")
        total = parts["l_std"] + parts["r_at"] + float(kl_weight) * parts["r_kl"]
        return cls(parts["l_std"], parts["r_at"], parts["r_kl"], total)

    @classmethod
    def standard(cls, l_std):
        return cls.build(l_std, 0.0, 0.0, 0.0)


def cross_entropy(logits, labels, ignore_index=None):
    """Mean negative log-likelihood over rows whose label is not ignored."""
    t = logits if isinstance(logits, Tensor) else Tensor(np.asarray(logits, dtype=np.float64))
    if t.values.ndim != 2:
        raise ContractError(f"cross_entropy expects N x C logits, got shape {t.values.shape}")
    n, c = t.values.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ContractError(f"labels shape {labels.shape} does not match {n} logit rows")
    keep = np.ones(n, dtype=bool) if ignore_index is None else labels != ignore_index
    kept = int(keep.sum())
    if kept == 0:
        raise ContractError("cross_entropy: every label is ignored")
    valid = labels[keep]
    if valid.size and (valid.min() < 0 or valid.max() >= c):
        raise ContractError(f"labels must lie in [0, {c})")
    onehot = np.zeros((n, c))
    onehot[np.nonzero(keep)[0], valid] = 1.0
    return scale(reduce_sum(mul(log_softmax(t), constant(onehot))), -1.0 / kept)


def masked_lm_loss(mlm_logits, mlm_targets):
    """Cross-entropy over masked token positions only (targets of -1 skip)."""
    t = mlm_logits if isinstance(mlm_logits, Tensor) else Tensor(
        np.asarray(mlm_logits, dtype=np.float64))
    if t.values.ndim != 3:
        raise ContractError(f"masked_lm_loss expects B x T x V logits, got {t.values.shape}")
    b, length, v = t.values.shape
    targets = np.asarray(mlm_targets)
    if targets.shape != (b, length):
        raise ContractError("mlm_targets must be B x T")
    if not np.any(targets >= 0):
        raise ContractError("masked_lm_loss: no masked positions in the batch")
    return cross_entropy(reshape(t, (b * length, v)), targets.reshape(-1), ignore_index=-1)


def sym_kl(p_logits, q_logits):
    """Mean over rows of KL(p, q) + KL(q, p) between softmax distributions."""
    p_t = p_logits if isinstance(p_logits, Tensor) else Tensor(
        np.asarray(p_logits, dtype=np.float64))
    q_t = q_logits if isinstance(q_logits, Tensor) else Tensor(
        np.asarray(q_logits, dtype=np.float64))
    if p_t.values.shape != q_t.values.shape:
        raise ContractError(
            f"sym_kl: shape mismatch {p_t.values.shape} vs {q_t.values.shape}"
        )
    lp, lq = log_softmax(p_t), log_softmax(q_t)
    diff = sub(lp, lq)
    per_entry = sub(mul(softmax(p_t), diff), mul(softmax(q_t), diff))
    n_rows = int(np.prod(p_t.values.shape[:-1]))
    return scale(reduce_sum(per_entry), 1.0 / n_rows)


def task_loss(output, batch):
    """Cross-entropy of a forward's task logits against the batch labels."""
    if output.task == "mlm":
        return cross_entropy(output.task_logits, output.mlm_flat_targets)
    if output.task == "itm":
        if batch.itm_label is None:
            raise ContractError("itm loss requires batch.itm_label")
        return cross_entropy(output.task_logits, batch.itm_label)
    if output.task == "answer":
        if batch.answer_label is None:
            raise ContractError("answer loss requires batch.answer_label")
        return cross_entropy(output.task_logits, batch.answer_label)
    raise ContractError(f"unknown task {output.task!r}")


@dataclass
class BranchLoss:
    """Scalars produced by one perturbed-modality branch."""

    theta: Tensor            # contributes to the parameter gradient
    ascent: Tensor           # drives the perturbation update
    ce: Tensor               # label-preserving term of this branch
    kl: Optional[Tensor]     # confidence term; None when weight is 0


def adversarial_branch_loss(params, batch, state, task, modality, clean_logits,
                            kl_weight, kl_target_grad="stop"):
    """Perturbed forward through one modality plus its two loss scalars.

    The ascent scalar is CE + KL (the quantity the perturbation climbs); the
    theta scalar weights the KL by kl_weight per the training objective. A
    kl_weight of exactly 0 omits the KL nodes entirely so the computation is
    structurally identical to a run that never defines them.
    """
    if kl_target_grad not in KL_TARGET_GRAD_MODES:
        raise ContractError(
            f"kl_target_grad must be one of {KL_TARGET_GRAD_MODES}, got {kl_target_grad!r}"
        )
    view = state.branch_view(modality)
    out = forward(params, batch, view, task)
    ce = task_loss(out, batch)
    if kl_weight == 0.0:
        return BranchLoss(theta=ce, ascent=ce, ce=ce, kl=None), out
    target = clean_logits.detach() if kl_target_grad == "stop" else clean_logits
    kl = sym_kl(out.task_logits, target)
    theta = add(ce, scale(kl, kl_weight))
    ascent = add(ce, kl)
    return BranchLoss(theta=theta, ascent=ascent, ce=ce, kl=kl), out
