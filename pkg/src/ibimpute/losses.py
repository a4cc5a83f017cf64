"""Training objectives: latent regularizer, masked local fit, global terms.

Three ingredients combine into the training objective:

* ``reg_loss``: closed-form KL from the encoder's diagonal Gaussian to the
  standard normal, averaged over variables and batch;
* ``loc_loss``: mean squared error over a {0,1} target mask;
* a global representation term, either ``infonce_loss`` (softmax contrast
  against in-batch negatives) or ``cosine_align_loss`` (negative cosine to a
  target embedding).  Both treat the target branch as a constant: gradients
  never flow into ``z_target``.

``total_objective`` forms the weighted sum and a float breakdown for logs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, exp, log, negate, reshape, sqrt, square, tmean, tsum
from .model import LatentDistribution

GLO_INFONCE = "infonce"
GLO_COSINE = "cosine"
GLO_NONE = "none"
GLO_VARIANTS = (GLO_INFONCE, GLO_COSINE, GLO_NONE)


@dataclass(frozen=True)
class LossWeights:
    """Weights of the objective terms plus the global-term configuration."""

    reg: float = 0.01
    loc: float = 1.0
    glo: float = 0.1
    glo_variant: str = GLO_COSINE
    temperature: float = 0.1

    def validate(self, for_training: bool = False) -> None:
        for name in ("reg", "loc", "glo"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"loss weight {name} must be >= 0")
        if self.glo_variant not in GLO_VARIANTS:
            raise ValueError(
                f"glo_variant must be one of {GLO_VARIANTS}, got {self.glo_variant!r}"
            )
        if self.temperature <= 0.0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if for_training and self.loc == 0.0 and (
            self.glo == 0.0 or self.glo_variant == GLO_NONE
        ):
            raise ValueError(
                "training needs a data-fit term: loc or glo weight must be positive"
            )


@dataclass(frozen=True)
class LossBreakdown:
    """Float snapshot of one objective evaluation, for logging."""

    reg: float
    loc: float
    glo: float
    total: float


def reg_loss(dist: LatentDistribution) -> Tensor:
    """KL[N(mu, diag sigma^2) || N(0, I)], summed over the latent axis.

    0.5 * sum_j (mu_j^2 + sigma_j^2 - log sigma_j^2 - 1), then averaged over
    every remaining axis (variables, batch).  Nonnegative; zero only at
    mu = 0, sigma = 1.
    """
    mu, sigma = dist.mu, dist.sigma
    if np.any(sigma.data <= 0.0):
        raise ValueError("reg_loss: sigma must be strictly positive")
    per = square(mu) + square(sigma) - log(square(sigma)) - 1.0
    kl = tsum(per, axis=-1) * 0.5
    return tmean(kl) if kl.ndim > 0 else kl


def loc_loss(x: Tensor, x_hat: Tensor, target_mask: Tensor) -> Tensor:
    """Mean squared error over positions where ``target_mask`` is 1."""
    if x.shape != x_hat.shape or x.shape != target_mask.shape:
        raise ValueError(
            f"loc_loss: shapes differ: x {x.shape}, x_hat {x_hat.shape}, "
            f"mask {target_mask.shape}"
        )
    m = target_mask.data
    if not np.all((m == 0.0) | (m == 1.0)):
        raise ValueError("loc_loss: target_mask must contain only 0 and 1")
    count = float(m.sum())
    if count == 0.0:
        raise ValueError("loc_loss: empty target mask")
    sq = square(x - x_hat) * target_mask
    return tsum(sq) * (1.0 / count)


def _as_rows(name: str, t: Tensor) -> Tensor:
    if t.ndim < 2:
        raise ValueError(f"{name}: expected [.., rows, dim], got shape {t.shape}")
    if t.ndim == 2:
        return t
    return reshape(t, (-1, t.shape[-1]))


def _l2_normalize_rows(name: str, t: Tensor) -> Tensor:
    norms_sq = tsum(square(t), axis=-1, keepdims=True)
    if np.any(norms_sq.data == 0.0):
        raise ValueError(f"{name}: zero-norm row cannot be normalized")
    return t / sqrt(norms_sq)


def infonce_loss(z_proj: Tensor, z_target: Tensor, temperature: float = 0.1) -> Tensor:
    """Softmax contrast: each row of ``z_proj`` must identify its own row of
    ``z_target`` among all rows of the batch.

    Rows are L2-normalized, scores are scaled by 1/temperature, and the
    per-anchor loss is logsumexp minus the matching-pair score.  ``z_target``
    is treated as a constant.  With R identical rows the loss is exactly
    log(R).
    """
    if temperature <= 0.0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    a = _as_rows("infonce_loss", z_proj)
    b = _as_rows("infonce_loss", z_target).detach()
    if a.shape != b.shape:
        raise ValueError(
            f"infonce_loss: row shapes differ: {a.shape} vs {b.shape}"
        )
    n_rows = a.shape[0]
    if n_rows < 2:
        raise ValueError("infonce_loss: need at least 2 rows to form negatives")
    na = _l2_normalize_rows("infonce_loss", a)
    nb = _l2_normalize_rows("infonce_loss", b)
    scores = (na @ nb.transpose()) * (1.0 / temperature)      # [R, R]
    # constant row max keeps exp bounded; the gradient is unchanged
    row_max = Tensor(scores.data.max(axis=-1, keepdims=True))
    shifted = exp(scores - row_max)
    lse = log(tsum(shifted, axis=-1, keepdims=True)) + row_max  # [R, 1]
    eye = Tensor(np.eye(n_rows))
    matching = tsum(scores * eye, axis=-1, keepdims=True)        # [R, 1]
    return tmean(lse - matching)


def cosine_align_loss(z_proj: Tensor, z_target: Tensor) -> Tensor:
    """Mean negative cosine similarity between matching rows.

    Minimal at -1 (parallel), 0 for orthogonal rows, +1 anti-parallel.
    ``z_target`` is treated as a constant.
    """
    a = _as_rows("cosine_align_loss", z_proj)
    b = _as_rows("cosine_align_loss", z_target).detach()
    if a.shape != b.shape:
        raise ValueError(
            f"cosine_align_loss: row shapes differ: {a.shape} vs {b.shape}"
        )
    na = _l2_normalize_rows("cosine_align_loss", a)
    nb = _l2_normalize_rows("cosine_align_loss", b)
    cos = tsum(na * nb, axis=-1)
    return negate(tmean(cos))


def total_objective(
    weights: LossWeights,
    reg: Tensor | None = None,
    loc: Tensor | None = None,
    glo: Tensor | None = None,
) -> tuple[Tensor, LossBreakdown]:
    """Weighted sum of the supplied terms.

    Terms may be omitted (None); a missing term contributes nothing and is
    logged as 0.  Zero-weight terms are skipped in the sum, so their value
    still appears in the breakdown but never touches the gradient.
    """
    weights.validate()
    use_glo = weights.glo_variant != GLO_NONE
    total: Tensor | None = None
    for w, term, enabled in (
        (weights.reg, reg, True),
        (weights.loc, loc, True),
        (weights.glo, glo, use_glo),
    ):
        if term is None or not enabled or w == 0.0:
            continue
        piece = term * w
        total = piece if total is None else total + piece
    if total is None:
        total = Tensor(0.0)
    breakdown = LossBreakdown(
        reg=float(reg.data) if reg is not None else 0.0,
        loc=float(loc.data) if loc is not None else 0.0,
        glo=float(glo.data) if glo is not None and use_glo else 0.0,
        total=float(total.data),
    )
    return total, breakdown
