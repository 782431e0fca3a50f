"""Encoder-decoder backbone with mixture-of-experts skip blocks and the
fuzzy classification head.

The encoder halves resolution per level while doubling channels; the decoder
mirrors it with nearest-neighbour upsampling followed by a 3x3 conv. Skip
features pass through a gated expert blend before concatenation, and the
final 1x1 head produces edge logits. The fuzzy head consumes the guidance
magnitude (x1) and the sigmoid of the logits (x2) per pixel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError
from .fuzzy import FuzzyRuleParams, tsk_forward
from .guidance import resize_bilinear, sobel_magnitude, to_luma
from .smoe import GateMap, SmoeParams, he_uniform, init_smoe_params, smoe_forward

FORMAT_VERSION = 1


@dataclass
class ModelConfig:
    depth: int = 4
    base_channels: int = 64
    input_channels: int = 1
    smoe_enabled: bool = True
    tsk_rules: int = 4

    def __post_init__(self):
        if self.depth < 1 or self.base_channels < 1 or self.tsk_rules < 1:
            raise ValueError(f"invalid model config: {self}")
        if self.input_channels not in (1, 3):
            raise ValueError(f"input_channels must be 1 or 3, got {self.input_channels}")

    def to_dict(self) -> dict:
        return {"depth": self.depth, "base_channels": self.base_channels,
                "input_channels": self.input_channels,
                "smoe_enabled": self.smoe_enabled, "tsk_rules": self.tsk_rules}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class ForwardBundle:
    """Everything one forward pass produces, at padded resolution.

    Graph tensors stay padded so losses can run on them; `crop` strips the
    reflect padding for user-facing rasters.
    """
    logits: Tensor                 # [N,1,Hp,Wp], pre-sigmoid
    semantic_confidence: Tensor    # sigmoid(logits)
    gate_maps: list[GateMap]       # per level (0 = highest resolution); empty when gating disabled
    tsk_output: Tensor             # [N,1,Hp,Wp], logit-like
    firing: Tensor                 # [N,R,Hp,Wp], raw rule strengths
    guidance: np.ndarray           # [N,1,Hp,Wp], the x1 input map
    pad_box: tuple                 # (top, bottom, left, right)
    orig_hw: tuple

    def crop(self, a: np.ndarray) -> np.ndarray:
        """Strip the reflect padding from a full-resolution [...,H,W] array."""
        t, b, l, r = self.pad_box
        h, w = a.shape[-2], a.shape[-1]
        return a[..., t:h - b, l:w - r]


class Model:
    """Parameter container; forward passes never mutate it."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor],
                 smoe_blocks: list[SmoeParams], fuzzy: FuzzyRuleParams):
        self.config = config
        self.params = params
        self.smoe_blocks = smoe_blocks
        self.fuzzy = fuzzy

    def named_parameters(self) -> dict[str, Tensor]:
        out = dict(self.params)
        for level, block in enumerate(self.smoe_blocks):
            out.update(block.named_tensors(f"smoe{level}"))
        out.update(self.fuzzy.named_tensors())
        return out

    def parameter_count(self) -> int:
        return sum(t.size for t in self.named_parameters().values())

    def zero_grad(self) -> None:
        for t in self.named_parameters().values():
            t.zero_grad()


def _conv_pair(rng, name: str, cin: int, cout: int, params: dict[str, Tensor]) -> None:
    params[f"{name}.weight"] = Tensor(he_uniform(rng, (cout, cin, 3, 3)), requires_grad=True)
    params[f"{name}.bias"] = Tensor(np.zeros(cout), requires_grad=True)


def build_model(config: ModelConfig, seed: int = 0) -> Model:
    """Deterministic construction: the same seed yields bit-identical weights."""
    rng = np.random.Generator(np.random.PCG64(seed))
    params: dict[str, Tensor] = {}
    base, depth = config.base_channels, config.depth

    cin = config.input_channels
    for i in range(depth):
        cout = base * (2 ** i)
        _conv_pair(rng, f"enc{i}.conv1", cin, cout, params)
        _conv_pair(rng, f"enc{i}.conv2", cout, cout, params)
        cin = cout
    cbot = base * (2 ** depth)
    _conv_pair(rng, "bottleneck.conv1", cin, cbot, params)
    _conv_pair(rng, "bottleneck.conv2", cbot, cbot, params)

    for i in reversed(range(depth)):
        ch = base * (2 ** i)
        _conv_pair(rng, f"dec{i}.up", ch * 2, ch, params)
        _conv_pair(rng, f"dec{i}.conv1", ch * 2, ch, params)
        _conv_pair(rng, f"dec{i}.conv2", ch, ch, params)

    params["head.weight"] = Tensor(he_uniform(rng, (1, base, 1, 1)), requires_grad=True)
    params["head.bias"] = Tensor(np.zeros(1), requires_grad=True)

    smoe_blocks = []
    if config.smoe_enabled:
        for i in range(depth):
            smoe_blocks.append(init_smoe_params(rng, base * (2 ** i)))

    fuzzy = FuzzyRuleParams.initialize(config.tsk_rules)
    return Model(config, params, smoe_blocks, fuzzy)


# ---------------------------------------------------------------------------
# input preparation
# ---------------------------------------------------------------------------

def _as_batch(image: np.ndarray, input_channels: int) -> np.ndarray:
    """Normalize to [N,H,W,C] float64."""
    a = np.asarray(image, dtype=np.float64)
    if a.ndim == 2:
        a = a[None, :, :, None]
    elif a.ndim == 3:
        if a.shape[-1] == input_channels:
            a = a[None]
        elif input_channels == 1:
            a = a[..., None]
        else:
            raise ShapeError(f"cannot interpret image of shape {a.shape} with {input_channels} input channels")
    elif a.ndim != 4:
        raise ShapeError(f"expected 2-4 dimensional image array, got shape {a.shape}")
    if a.shape[-1] != input_channels:
        raise ShapeError(f"image has {a.shape[-1]} channels, model expects {input_channels}")
    return a


def _pad_box(h: int, w: int, multiple: int) -> tuple:
    ph = (-h) % multiple
    pw = (-w) % multiple
    top, left = ph // 2, pw // 2
    return (top, ph - top, left, pw - left)


def prepare_input(model: Model, image: np.ndarray):
    """Reflect-pad to a pooling-friendly size and precompute all guidance maps.

    Returns (x [N,C,Hp,Wp], guidance per level [N,1,h,w], pad_box, orig_hw).
    """
    cfg = model.config
    batch = _as_batch(image, cfg.input_channels)
    n, h, w, _ = batch.shape
    multiple = 2 ** cfg.depth
    top, bottom, left, right = _pad_box(h, w, multiple)
    if top >= h or bottom >= h or left >= w or right >= w:
        raise ShapeError(f"image {h}x{w} too small to pad to a multiple of {multiple}")
    padded = np.pad(batch, ((0, 0), (top, bottom), (left, right), (0, 0)), mode="reflect") \
        if (top or bottom or left or right) else batch
    hp, wp = padded.shape[1:3]

    full_maps = [sobel_magnitude(to_luma(padded[i])) for i in range(n)]
    guidance_levels = []
    for level in range(cfg.depth):
        gh, gw = hp // (2 ** level), wp // (2 ** level)
        maps = [resize_bilinear(m, gh, gw).values for m in full_maps]
        guidance_levels.append(np.stack(maps)[:, None])  # [N,1,gh,gw]

    x = np.transpose(padded, (0, 3, 1, 2))
    return x, guidance_levels, (top, bottom, left, right), (h, w)


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------

def _double_conv(x: Tensor, params: dict[str, Tensor], name: str) -> Tensor:
    x = ad.relu(ad.conv2d(x, params[f"{name}.conv1.weight"], params[f"{name}.conv1.bias"], padding=1))
    return ad.relu(ad.conv2d(x, params[f"{name}.conv2.weight"], params[f"{name}.conv2.bias"], padding=1))


def forward_padded(model: Model, x: Tensor, guidance_levels: list[Tensor]):
    """Graph-only forward on an already-padded NCHW tensor.

    `guidance_levels[i]` must hold the [N,1,H/2^i,W/2^i] guidance tensor.
    Returns (logits, gate_maps).
    """
    cfg = model.config
    p = model.params

    skips = []
    cur = x
    for i in range(cfg.depth):
        cur = _double_conv(cur, p, f"enc{i}")
        ad.assert_finite(cur.data, f"enc{i} activations")
        skips.append(cur)
        cur = ad.max_pool2d(cur)
    cur = _double_conv(cur, p, "bottleneck")
    ad.assert_finite(cur.data, "bottleneck activations")

    gate_maps: list[GateMap] = [None] * cfg.depth if cfg.smoe_enabled else []
    for i in reversed(range(cfg.depth)):
        up = ad.conv2d(ad.upsample2x(cur), p[f"dec{i}.up.weight"], p[f"dec{i}.up.bias"], padding=1)
        skip = skips[i]
        if cfg.smoe_enabled:
            skip, gate = smoe_forward(skip, guidance_levels[i], model.smoe_blocks[i], level=i)
            gate_maps[i] = gate
        cur = ad.concat_channels(skip, up)
        cur = _double_conv(cur, p, f"dec{i}")
        ad.assert_finite(cur.data, f"dec{i} activations")

    logits = ad.conv2d(cur, p["head.weight"], p["head.bias"])
    ad.assert_finite(logits.data, "head logits")
    return logits, gate_maps


def forward(model: Model, image: np.ndarray) -> ForwardBundle:
    """Full forward pass from a raw [0,1] image (or batch of them).

    Deterministic given parameters and input. The fuzzy head sees the
    guidance magnitude and a detached copy of the semantic confidence, so
    distillation gradients never reach the backbone.
    """
    x_np, guidance_levels, pad_box, orig_hw = prepare_input(model, image)
    x = Tensor(x_np)
    guidance_tensors = [Tensor(g) for g in guidance_levels]

    logits, gate_maps = forward_padded(model, x, guidance_tensors)
    confidence = ad.sigmoid(logits)

    x1 = Tensor(guidance_levels[0])
    x2 = confidence.detach()
    tsk_out, firing = tsk_forward(x1, x2, model.fuzzy)
    ad.assert_finite(tsk_out.data, "fuzzy head output")

    return ForwardBundle(
        logits=logits,
        semantic_confidence=confidence,
        gate_maps=gate_maps,
        tsk_output=tsk_out,
        firing=firing,
        guidance=guidance_levels[0],
        pad_box=pad_box,
        orig_hw=orig_hw,
    )


def predict_probability(model: Model, image: np.ndarray, head: str = "fuzzy") -> np.ndarray:
    """Edge probability map at the input resolution (padding stripped).

    head='fuzzy' applies a sigmoid to the fuzzy head's logit-like output;
    head='unet' returns the main head's sigmoid directly.
    """
    bundle = forward(model, image)
    if head == "fuzzy":
        prob = 1.0 / (1.0 + np.exp(-np.clip(bundle.tsk_output.data, -500, 500)))
    elif head == "unet":
        prob = bundle.semantic_confidence.data
    else:
        raise ValueError(f"unknown head {head!r}, expected 'fuzzy' or 'unet'")
    out = bundle.crop(prob)[:, 0]
    return out[0] if out.shape[0] == 1 else out
