"""Perturbation state: driven by normalized-gradient ascent inside an
epsilon-ball measured per sample in the Frobenius norm.

All three primitives (init, ascent, projection) treat axis 0 as the sample
axis and never couple samples. Padded positions are forced to zero after
every update so perturbations cannot leak through attention masking.
"""

from types import SimpleNamespace

import numpy as np

from .autodiff import Tensor
from .errors import ContractError, NumericDomainError

MODALITY_MODES = ("txt", "img", "both")

_ZERO_GRAD_GUARD = 1e-12
# relative slack on the ball test: radial rescaling lands within a few ulps
# of the boundary, and re-projecting those points must be a bitwise no-op
_BALL_SLACK = 1e-12


def _per_sample_norms(values):
    v = np.asarray(values, dtype=np.float64)
    return np.sqrt((v * v).reshape(v.shape[0], -1).sum(axis=1))


def _expand(per_sample, ndim):
    return per_sample.reshape((-1,) + (1,) * (ndim - 1))


def _apply_position_mask(values, sample_mask):
    if sample_mask is None:
        return values
    mask = np.asarray(sample_mask, dtype=np.float64)
    if mask.shape != values.shape[:2]:
        raise ContractError(
            f"sample_mask shape {mask.shape} does not match delta leading dims {values.shape[:2]}"
        )
    return values * _expand_mask(mask, values.ndim)


def _expand_mask(mask, ndim):
    return mask.reshape(mask.shape + (1,) * (ndim - 2))


def init_delta(shape, epsilon, rng, sample_mask=None):
    """Uniform draw on [-eps, eps] scaled by 1/sqrt(N) per entry.

    N is the number of entries in one sample's slice, so each sample's
    Frobenius norm is at most eps by construction. Padded positions (rows
    where sample_mask is 0) are zeroed afterwards.
    """
    if epsilon < 0:
        raise ContractError(f"epsilon must be nonnegative, got {epsilon}")
    n_delta = int(np.prod(shape[1:]))
    d = rng.uniform(-epsilon, epsilon, size=shape) / np.sqrt(n_delta)
    return _apply_position_mask(d, sample_mask)


def project(delta, epsilon):
    """Euclidean projection onto the per-sample Frobenius epsilon-ball."""
    if epsilon < 0:
        raise ContractError(f"epsilon must be nonnegative, got {epsilon}")
    v = np.asarray(delta, dtype=np.float64)
    norms = _per_sample_norms(v)
    over = norms > epsilon * (1.0 + _BALL_SLACK)
    if not over.any():
        return v.copy()
    factor = np.where(over, epsilon / np.where(over, norms, 1.0), 1.0)
    return v * _expand(factor, v.ndim)


def ascent_step(delta, grad, adv_step_size, epsilon, sample_mask=None):
    """One normalized-gradient ascent move followed by ball projection.

    Samples whose gradient norm falls below the zero guard are left alone
    (not even re-projected). Non-finite gradients signal divergence upstream.
    """
    v = np.asarray(delta, dtype=np.float64)
    g = np.asarray(grad, dtype=np.float64)
    if v.shape != g.shape:
        raise ContractError(f"delta shape {v.shape} != grad shape {g.shape}")
    if not np.isfinite(g).all():
        raise NumericDomainError("non-finite gradient in ascent step")
    norms = _per_sample_norms(g)
    move = norms > _ZERO_GRAD_GUARD
    safe = np.where(move, norms, 1.0)
    stepped = v + adv_step_size * g / _expand(safe, v.ndim)
    projected = project(stepped, epsilon)
    out = np.where(_expand(move, v.ndim), projected, v)
    return _apply_position_mask(out, sample_mask)


class PerturbationState:
    """Owns both modality deltas for one minibatch of one training step.

    Inactive modalities keep an all-zero, non-trainable delta so a forward
    through them is exactly the clean forward.
    """

    def __init__(self, delta_txt, delta_img, epsilon, adv_step_size, modality_mode,
                 txt_mask, region_mask):
        if modality_mode not in MODALITY_MODES:
            raise ContractError(f"modality_mode must be one of {MODALITY_MODES}")
        self.epsilon = float(epsilon)
        self.adv_step_size = float(adv_step_size)
        self.modality_mode = modality_mode
        self.txt_mask = txt_mask
        self.region_mask = region_mask
        self.delta_txt = Tensor(delta_txt, requires_grad=self.active("txt"))
        self.delta_img = Tensor(delta_img, requires_grad=self.active("img"))

    @classmethod
    def fresh(cls, batch, hidden, epsilon, adv_step_size, modality_mode, rng):
        b, t = batch.txt_tokens.shape
        r = batch.img_feats.shape[1]
        d = batch.img_feats.shape[2]
        txt_active = modality_mode in ("txt", "both")
        img_active = modality_mode in ("img", "both")
        delta_txt = (
            init_delta((b, t, hidden), epsilon, rng, batch.txt_mask)
            if txt_active else np.zeros((b, t, hidden))
        )
        delta_img = (
            init_delta((b, r, d), epsilon, rng, batch.region_mask)
            if img_active else np.zeros((b, r, d))
        )
        return cls(delta_txt, delta_img, epsilon, adv_step_size, modality_mode,
                   batch.txt_mask, batch.region_mask)

    def active(self, modality):
        if modality == "txt":
            return self.modality_mode in ("txt", "both")
        if modality == "img":
            return self.modality_mode in ("img", "both")
        raise ContractError(f"unknown modality {modality!r}")

    def branch_view(self, modality):
        """Delta carrier perturbing exactly one modality."""
        if not self.active(modality):
            raise ContractError(f"modality {modality!r} is disabled by mode "
                                f"{self.modality_mode!r}")
        if modality == "txt":
            return SimpleNamespace(delta_txt=self.delta_txt, delta_img=None)
        return SimpleNamespace(delta_txt=None, delta_img=self.delta_img)

    def joint_view(self):
        """Delta carrier perturbing every active modality in one forward."""
        return SimpleNamespace(
            delta_txt=self.delta_txt if self.active("txt") else None,
            delta_img=self.delta_img if self.active("img") else None,
        )

    def ascend(self, modality, grad):
        """Replace one modality's delta with its ascent update."""
        if modality == "txt":
            new = ascent_step(self.delta_txt.values, grad, self.adv_step_size,
                              self.epsilon, self.txt_mask)
            self.delta_txt = Tensor(new, requires_grad=True)
        elif modality == "img":
            new = ascent_step(self.delta_img.values, grad, self.adv_step_size,
                              self.epsilon, self.region_mask)
            self.delta_img = Tensor(new, requires_grad=True)
        else:
            raise ContractError(f"unknown modality {modality!r}")

    def mean_norms(self):
        """Mean per-sample Frobenius norm of each delta, for metrics."""
        return (
            float(_per_sample_norms(self.delta_img.values).mean()),
            float(_per_sample_norms(self.delta_txt.values).mean()),
        )
