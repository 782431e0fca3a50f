"""First-order Takagi-Sugeno-Kang inference head.

Each rule holds Gaussian antecedents over the two per-pixel inputs (edge
strength x1, semantic confidence x2) and an affine consequent
a0 + a1*x1 + a2*x2. The crisp output is the firing-strength weighted average
of consequents, computed per pixel and fully differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError

SIGMA_MIN = 1e-3   # width clamp applied after every optimizer step
EPS_DEN = 1e-9     # defuzzification denominator guard

# Rule-center corners of the unit square, one rule per quadrant:
# (x1 high, x2 high), (low, high), (high, low), (low, low).
CORNER_CENTERS = ((1.0, 1.0), (0.0, 1.0), (1.0, 0.0), (0.0, 0.0))
INIT_SIGMA = 0.25


@dataclass
class FuzzyRuleParams:
    """Trainable rule parameters, stored rule-per-channel for broadcasting.

    Every field is a Tensor of shape [1, R, 1, 1] so the per-pixel math can
    run over whole feature maps with the generic broadcasting ops.
    """
    center_x1: Tensor
    center_x2: Tensor
    width_x1: Tensor
    width_x2: Tensor
    coef_const: Tensor
    coef_x1: Tensor
    coef_x2: Tensor

    @classmethod
    def initialize(cls, rules: int = 4) -> "FuzzyRuleParams":
        if rules < 1:
            raise ValueError("need at least one rule")
        corners = [CORNER_CENTERS[i % len(CORNER_CENTERS)] for i in range(rules)]
        c1 = np.array([c[0] for c in corners]).reshape(1, rules, 1, 1)
        c2 = np.array([c[1] for c in corners]).reshape(1, rules, 1, 1)
        sig = np.full((1, rules, 1, 1), INIT_SIGMA)
        zeros = np.zeros((1, rules, 1, 1))
        return cls(
            center_x1=Tensor(c1, requires_grad=True),
            center_x2=Tensor(c2, requires_grad=True),
            width_x1=Tensor(sig.copy(), requires_grad=True),
            width_x2=Tensor(sig.copy(), requires_grad=True),
            coef_const=Tensor(zeros.copy(), requires_grad=True),
            coef_x1=Tensor(zeros.copy(), requires_grad=True),
            coef_x2=Tensor(zeros.copy(), requires_grad=True),
        )

    @property
    def rules(self) -> int:
        return self.center_x1.shape[1]

    def named_tensors(self) -> dict[str, Tensor]:
        return {
            "tsk.center_x1": self.center_x1,
            "tsk.center_x2": self.center_x2,
            "tsk.width_x1": self.width_x1,
            "tsk.width_x2": self.width_x2,
            "tsk.coef_const": self.coef_const,
            "tsk.coef_x1": self.coef_x1,
            "tsk.coef_x2": self.coef_x2,
        }

    # Row views used by export and the scalar reference math.
    def centers(self) -> np.ndarray:
        return np.stack([self.center_x1.data.reshape(-1), self.center_x2.data.reshape(-1)], axis=1)

    def widths(self) -> np.ndarray:
        return np.stack([self.width_x1.data.reshape(-1), self.width_x2.data.reshape(-1)], axis=1)

    def consequents(self) -> np.ndarray:
        return np.stack([self.coef_const.data.reshape(-1),
                         self.coef_x1.data.reshape(-1),
                         self.coef_x2.data.reshape(-1)], axis=1)

    def set_rows(self, centers: np.ndarray, widths: np.ndarray, consequents: np.ndarray) -> None:
        r = self.rules
        shape = (1, r, 1, 1)
        self.center_x1.data = np.asarray(centers, dtype=np.float64)[:, 0].reshape(shape)
        self.center_x2.data = np.asarray(centers, dtype=np.float64)[:, 1].reshape(shape)
        self.width_x1.data = np.asarray(widths, dtype=np.float64)[:, 0].reshape(shape)
        self.width_x2.data = np.asarray(widths, dtype=np.float64)[:, 1].reshape(shape)
        cons = np.asarray(consequents, dtype=np.float64)
        self.coef_const.data = cons[:, 0].reshape(shape)
        self.coef_x1.data = cons[:, 1].reshape(shape)
        self.coef_x2.data = cons[:, 2].reshape(shape)

    def clamp_widths(self) -> None:
        np.maximum(self.width_x1.data, SIGMA_MIN, out=self.width_x1.data)
        np.maximum(self.width_x2.data, SIGMA_MIN, out=self.width_x2.data)


def membership(x: float, c: float, sigma: float) -> float:
    """Gaussian membership exp(-(x-c)^2 / (2 sigma^2)), in (0, 1]."""
    d = x - c
    return float(np.exp(-(d * d) / (2.0 * sigma * sigma)))


def firing_strengths(x1: float, x2: float, params: FuzzyRuleParams) -> np.ndarray:
    """Per-rule firing w_i = mu_i1(x1) * mu_i2(x2)."""
    centers = params.centers()
    widths = params.widths()
    out = np.empty(params.rules)
    for i in range(params.rules):
        out[i] = membership(x1, centers[i, 0], widths[i, 0]) * membership(x2, centers[i, 1], widths[i, 1])
    return out


def normalized_firing(w: np.ndarray) -> np.ndarray:
    """w_i / (sum(w) + eps); sums to at most 1 with deficit eps/(sum+eps)."""
    w = np.asarray(w, dtype=np.float64)
    return w / (w.sum() + EPS_DEN)


def _channel_sum(t: Tensor) -> Tensor:
    """Sum over the rule axis via a fixed all-ones 1x1 convolution."""
    r = t.shape[1]
    ones = Tensor(np.ones((1, r, 1, 1)))
    return ad.conv2d(t, ones)


def _gaussian_map(x: Tensor, center: Tensor, width: Tensor) -> Tensor:
    d = x - center
    two_var = ad.square(width) * 2.0
    return ad.exp(ad.neg(ad.square(d) / two_var))


def tsk_forward(x1_map: Tensor, x2_map: Tensor, params: FuzzyRuleParams) -> tuple[Tensor, Tensor]:
    """Weighted-average defuzzification over [N,1,H,W] input maps.

    Returns (y, firing): y is the crisp logit-like output [N,1,H,W] and
    firing holds the raw rule strengths [N,R,H,W].
    """
    if x1_map.shape != x2_map.shape:
        raise ShapeError(f"tsk_forward: input maps disagree, {x1_map.shape} vs {x2_map.shape}")
    if x1_map.data.ndim != 4 or x1_map.shape[1] != 1:
        raise ShapeError(f"tsk_forward expects [N,1,H,W] maps, got {x1_map.shape}")

    mu1 = _gaussian_map(x1_map, params.center_x1, params.width_x1)
    mu2 = _gaussian_map(x2_map, params.center_x2, params.width_x2)
    firing = mu1 * mu2  # [N,R,H,W]

    consequent = params.coef_const + params.coef_x1 * x1_map + params.coef_x2 * x2_map
    numer = _channel_sum(firing * consequent)
    denom = _channel_sum(firing) + EPS_DEN
    return numer / denom, firing
