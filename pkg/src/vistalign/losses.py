"""Cross-entropy, position-weighted alignment terms and the composite loss.

The alignment term pulls every supervised text representation ``x_t`` toward
the last image-position hidden state ``S_n`` with a weight ``f(t)`` that grows
with position.  Supervised positions of each row are renumbered ``1..m_eff``
and the row value is ``(1/m_eff) * sum_t f(t) * dist(x_t, S_n)``; the batch
value is the mean over rows.  All logs are natural logs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import tensor as tc
from .model import ForwardOutput, MultimodalBatch
from .tensor import ContractError, DimensionError, Tensor

COSINE_EPS = 1e-12
VARIANTS = ("l2", "cosine", "none")


@dataclass(frozen=True)
class WeightScheme:
    """Position weighting f(t): ``normalized`` t/m, ``linear`` t, ``uniform`` c."""

    variant: str = "normalized"
    c: float = 1.0

    def __post_init__(self):
        if self.variant not in ("normalized", "linear", "uniform"):
            raise ValueError(f"unknown weight scheme {self.variant!r}")
        if self.variant == "uniform" and not self.c >= 0:
            raise ValueError("uniform weight must be >= 0")

    def weights(self, m: int) -> np.ndarray:
        """f(1..m) as an array."""
        if m < 1:
            raise ContractError("sequence length must be >= 1")
        t = np.arange(1, m + 1, dtype=np.float64)
        if self.variant == "normalized":
            return t / m
        if self.variant == "linear":
            return t
        return np.full(m, float(self.c))

    def exact_weights(self, m: int) -> list[Fraction]:
        """f(1..m) in rational arithmetic, for exact identities."""
        if m < 1:
            raise ContractError("sequence length must be >= 1")
        if self.variant == "normalized":
            return [Fraction(t, m) for t in range(1, m + 1)]
        if self.variant == "linear":
            return [Fraction(t) for t in range(1, m + 1)]
        return [Fraction(self.c)] * m

    def __str__(self) -> str:
        return f"uniform({self.c:g})" if self.variant == "uniform" else self.variant


def vista_weight(t: int, m: int, scheme: WeightScheme) -> float:
    if not 1 <= t <= m:
        raise ContractError(f"position t={t} outside 1..{m}")
    if scheme.variant == "normalized":
        return t / m
    if scheme.variant == "linear":
        return float(t)
    return float(scheme.c)


def position_weights(mask: np.ndarray, scheme: WeightScheme) -> np.ndarray:
    """Per-entry coefficients ``f(rank)/m_eff`` for a (B, m) supervision mask.

    Unsupervised entries get 0; a row with no supervised token contributes 0.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ContractError("loss mask selects no positions")
    out = np.zeros(mask.shape)
    for b, row in enumerate(mask):
        m_eff = int(row.sum())
        if m_eff:
            out[b, row] = scheme.weights(m_eff) / m_eff
    return out


def cross_entropy(logits: Tensor, targets, mask) -> Tensor:
    """Mean negative log-likelihood over supervised positions."""
    targets = np.asarray(targets)
    mask = np.asarray(mask, dtype=bool)
    if logits.shape[:-1] != targets.shape or mask.shape != targets.shape:
        raise DimensionError(f"logits {logits.shape} vs targets {targets.shape} vs mask {mask.shape}")
    count = int(mask.sum())
    if count == 0:
        raise ContractError("loss mask selects no positions")
    picked = tc.pick(tc.log_softmax(logits), targets)
    return tc.scale(tc.tsum(tc.mul(picked, Tensor(mask.astype(np.float64)))), -1.0 / count)


def _pairwise_inputs(text_repr: Tensor, image_summary: Tensor, mask) -> tuple[Tensor, np.ndarray]:
    if text_repr.ndim != 3 or image_summary.ndim != 2:
        raise DimensionError("expected text_repr (B,m,d) and image_summary (B,d)")
    B, m, d = text_repr.shape
    if image_summary.shape != (B, d):
        raise DimensionError(f"image_summary {image_summary.shape} != ({B}, {d})")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (B, m):
        raise DimensionError(f"mask {mask.shape} != ({B}, {m})")
    return tc.repeat_axis(image_summary, 1, m), mask


def vista_l2_loss(text_repr: Tensor, image_summary: Tensor, mask, scheme: WeightScheme) -> Tensor:
    s, mask = _pairwise_inputs(text_repr, image_summary, mask)
    w = Tensor(position_weights(mask, scheme))
    dist = tc.squared_l2(text_repr, s)
    return tc.scale(tc.tsum(tc.mul(dist, w)), 1.0 / text_repr.shape[0])


def vista_cosine_loss(text_repr: Tensor, image_summary: Tensor, mask, scheme: WeightScheme) -> Tensor:
    s, mask = _pairwise_inputs(text_repr, image_summary, mask)
    w = Tensor(position_weights(mask, scheme))
    sim = tc.cosine_sim(text_repr, s, COSINE_EPS)
    return tc.scale(tc.tsum(tc.mul(sim, w)), -1.0 / text_repr.shape[0])


@dataclass
class LossReport:
    ce: float
    vista: float
    total: float
    weights: np.ndarray
    supervised_count: int
    loss: Tensor = field(repr=False)  # differentiable total
    ce_tensor: Tensor = field(repr=False)
    vista_tensor: Tensor = field(repr=False)


def total_loss(
    out: ForwardOutput,
    batch: MultimodalBatch,
    scheme: WeightScheme,
    variant: str = "l2",
    text_source: str = "embedding",
    vista_scale: float = 1.0,
) -> LossReport:
    """``ce + vista`` with the alignment surrogate chosen by ``variant``."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown loss variant {variant!r}")
    ce = cross_entropy(out.logits, batch.text_ids, batch.loss_mask)
    if variant == "none":
        vista = Tensor(np.zeros(()))
    else:
        fn = vista_l2_loss if variant == "l2" else vista_cosine_loss
        vista = fn(out.text_repr(text_source), out.image_summary, batch.loss_mask, scheme)
        if vista_scale != 1.0:
            vista = tc.scale(vista, vista_scale)
    total = tc.add(ce, vista)
    return LossReport(
        ce=ce.item(),
        vista=vista.item(),
        total=total.item(),
        weights=scheme.weights(batch.text_ids.shape[1]),
        supervised_count=int(batch.loss_mask.sum()),
        loss=total,
        ce_tensor=ce,
        vista_tensor=vista,
    )
