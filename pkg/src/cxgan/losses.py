"""Adversarial, cycle-consistency and residual objectives.

Conventions:
  * ``||.||_1`` is the mean absolute error per pixel, not the sum.
  * Expectations are means over the batch and the discriminator patch grid.
  * The adversarial values are the log-likelihood forms that discriminators
    *maximise*; trainers negate them for the discriminator step.

All functions accept torch tensors (autograd flows through) or array-likes.
Discriminator scores may also be passed as :class:`Logits`; the log terms are
then computed with log-sigmoid, which keeps generator gradients alive when a
discriminator is confident.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Union

import numpy as np
import torch
import torch.nn.functional as F

from .core import ContractError, DomainError, LossWeights

Number = Union[float, torch.Tensor]


def _t(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def _check_prob(name: str, p: torch.Tensor) -> torch.Tensor:
    with torch.no_grad():
        bad = ~((p > 0) & (p < 1))
        if bool(bad.any()):
            raise DomainError(f"{name} has values outside the open interval (0, 1)")
    return p


def _same_shape(*xs: torch.Tensor) -> None:
    shapes = {tuple(x.shape) for x in xs}
    if len(shapes) != 1:
        raise ContractError(f"shape mismatch: {sorted(shapes)}")


def mean_l1(a, b) -> torch.Tensor:
    a, b = _t(a), _t(b)
    _same_shape(a, b)
    return (a - b).abs().mean()


class Logits:
    """Pre-sigmoid discriminator scores, D = sigmoid(z)."""

    __slots__ = ("z",)

    def __init__(self, z: torch.Tensor):
        self.z = z


def log_real(p) -> torch.Tensor:
    """E[ln D(real)]."""
    if isinstance(p, Logits):
        return F.logsigmoid(p.z).mean()
    return torch.log(_check_prob("D(real)", _t(p))).mean()


def log_one_minus_fake(p) -> torch.Tensor:
    """E[ln(1 - D(fake))]."""
    if isinstance(p, Logits):
        return F.logsigmoid(-p.z).mean()
    return torch.log1p(-_check_prob("D(fake)", _t(p))).mean()


def gan_loss(d_pos_real, d_neg_real, d_pos_fake, d_neg_fake) -> torch.Tensor:
    """Two-way CycleGAN adversarial value.

    ``d_pos_fake`` scores G^{c-->c+}(x-) under D^{c+}; ``d_neg_fake`` scores
    G^{c+->c-}(x+) under D^{c-}.
    """
    return (log_real(d_pos_real) + log_real(d_neg_real)
            + log_one_minus_fake(d_pos_fake) + log_one_minus_fake(d_neg_fake))


def cycle_consistency_loss(x_pos, x_pos_rec, x_neg, x_neg_rec) -> torch.Tensor:
    return mean_l1(x_pos_rec, x_pos) + mean_l1(x_neg_rec, x_neg)


def residual_l1(x_pos, map_, x_neg) -> torch.Tensor:
    x_pos, map_, x_neg = _t(x_pos), _t(map_), _t(x_neg)
    _same_shape(x_pos, map_, x_neg)
    return (x_neg - (x_pos + map_)).abs().mean()


def residual_gan_loss(d_neg_real, d_neg_fake) -> torch.Tensor:
    """``d_neg_fake`` must be D^{c-} evaluated on x+ + M(x+)."""
    return log_real(d_neg_real) + log_one_minus_fake(d_neg_fake)


def cx_gan_loss(d_pos_real, d_neg_real, d_pos_fake_from_neg, d_neg_fake_from_mapped) -> torch.Tensor:
    """Same structure as :func:`gan_loss`; the last grid is D^{c-}(x+ + M(x+))."""
    return gan_loss(d_pos_real, d_neg_real, d_pos_fake_from_neg, d_neg_fake_from_mapped)


def cx_cycle_terms(x_pos, map_fwd, back_of_mapped, x_neg, back_img, map_of_back,
                   literal_backward: bool = False) -> tuple[torch.Tensor, torch.Tensor]:
    """Forward and backward reconstruction errors of the integrated cycle.

    forward:  G_back(x+ + M(x+)) vs x+   (``back_of_mapped`` is G_back(x+ + M(x+)))
    backward: G_back(x-) + M(G_back(x-)) vs x-

    ``literal_backward`` swaps the backward reconstruction for the printed
    variant x+ + M(G_back(x-)).
    """
    x_pos, map_fwd, back_of_mapped = _t(x_pos), _t(map_fwd), _t(back_of_mapped)
    x_neg, back_img, map_of_back = _t(x_neg), _t(back_img), _t(map_of_back)
    _same_shape(x_pos, map_fwd, back_of_mapped)
    _same_shape(x_neg, back_img, map_of_back)
    fwd = mean_l1(back_of_mapped, x_pos)
    base = x_pos if literal_backward else back_img
    _same_shape(base, map_of_back)
    bwd = mean_l1(base + map_of_back, x_neg)
    return fwd, bwd


def cx_cycle_loss(x_pos, map_fwd, back_of_mapped, x_neg, back_img, map_of_back,
                  literal_backward: bool = False) -> torch.Tensor:
    fwd, bwd = cx_cycle_terms(x_pos, map_fwd, back_of_mapped, x_neg, back_img, map_of_back,
                              literal_backward)
    return fwd + bwd


@dataclass
class LossBreakdown:
    """A weighted objective: ``total = sum(weights[k] * components[k])``."""

    total: Number
    components: Mapping[str, Number]
    weights: Mapping[str, float] = field(default_factory=dict)

    def as_floats(self) -> dict[str, float]:
        out = {k: float(v) for k, v in self.components.items()}
        out["total"] = float(self.total)
        return out

    def check(self, tol: float = 1e-6) -> None:
        expect = sum(self.weights.get(k, 1.0) * float(v) for k, v in self.components.items())
        if not np.isfinite(float(self.total)) or abs(expect - float(self.total)) > tol:
            raise ContractError(f"loss total {float(self.total)} != weighted sum {expect}")


def _objective(adv_name: str, adv: Number, reg_name: str, reg: Number, lam: float) -> LossBreakdown:
    return LossBreakdown(
        total=adv + lam * reg,
        components={adv_name: adv, reg_name: reg},
        weights={adv_name: 1.0, reg_name: lam},
    )


def ci_objective(gan: Number, cc: Number, w: LossWeights) -> LossBreakdown:
    return _objective("gan", gan, "cc", cc, w.lambda_cc)


def rgan_objective(rgan: Number, l1r: Number, w: LossWeights) -> LossBreakdown:
    """Residual GAN total; trainers take min over G and max over D of the adversarial part."""
    return _objective("rgan", rgan, "l1r", l1r, w.lambda_l1)


def cx_objective(cxgan: Number, cxcc: Number, w: LossWeights) -> LossBreakdown:
    return _objective("cxgan", cxgan, "cxcc", cxcc, w.lambda_cc)


def generator_adversarial(d_fake, non_saturating: bool = True) -> torch.Tensor:
    """Generator-side adversarial term for one discriminator, to be minimised.

    Saturating form: E[ln(1 - D(fake))]. Non-saturating form: -E[ln D(fake)].
    """
    if non_saturating:
        return -log_real(d_fake)
    return log_one_minus_fake(d_fake)
