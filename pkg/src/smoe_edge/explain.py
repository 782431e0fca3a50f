"""Emitters for the model's explainability artifacts: per-level strategy
maps (which expert handled each pixel), per-rule firing maps, and the
rulebase export with auto-generated linguistic labels.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError
from .fuzzy import EPS_DEN, SIGMA_MIN, FuzzyRuleParams
from .model import ForwardBundle

# Fixed palette for the dominant-rule composite (rule 0..3, cycled beyond).
ARGMAX_PALETTE = ((230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200))

MF_CURVE_SAMPLES = 256


def to_byte(values: np.ndarray) -> np.ndarray:
    """[0,1] floats to uint8, rounding half up (0.5 -> 128)."""
    return np.floor(np.clip(values, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def _upsample_nearest(a: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return a
    return np.repeat(np.repeat(a, factor, axis=-2), factor, axis=-1)


def strategy_map_images(bundle: ForwardBundle) -> list[np.ndarray]:
    """One uint8 map per skip level at input resolution: 0 = context expert,
    255 = boundary expert."""
    if not bundle.gate_maps:
        raise DataError("no gate maps in this forward pass; rerun with the "
                        "mixture-of-experts blocks enabled (smoe_enabled=true)")
    images = []
    for gate in bundle.gate_maps:
        full = _upsample_nearest(gate.values.data[0, 0], 2 ** gate.level)
        images.append(to_byte(bundle.crop(full)))
    return images


def firing_map_images(bundle: ForwardBundle) -> tuple[list[np.ndarray], np.ndarray]:
    """Normalized firing maps (uint8, one per rule) and the RGB composite
    coloring each pixel by its dominant rule."""
    w = bundle.firing.data[0]  # [R, Hp, Wp]
    norm = w / (w.sum(axis=0, keepdims=True) + EPS_DEN)
    norm = bundle.crop(norm)
    images = [to_byte(norm[i]) for i in range(norm.shape[0])]

    dominant = np.argmax(norm, axis=0)
    palette = np.array([ARGMAX_PALETTE[i % len(ARGMAX_PALETTE)]
                        for i in range(norm.shape[0])], dtype=np.uint8)
    return images, palette[dominant]


def write_explain_artifacts(bundle: ForwardBundle, fuzzy: FuzzyRuleParams,
                            out_dir: Path) -> list[Path]:
    """Write strategy maps, firing maps, the argmax composite and the
    rulebase export; returns the created paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for level, img in enumerate(strategy_map_images(bundle)):
        p = out_dir / f"strategy_level{level}.png"
        Image.fromarray(img, mode="L").save(p, format="PNG")
        paths.append(p)
    rule_imgs, argmax_rgb = firing_map_images(bundle)
    for i, img in enumerate(rule_imgs):
        p = out_dir / f"rule{i}_firing.png"
        Image.fromarray(img, mode="L").save(p, format="PNG")
        paths.append(p)
    p = out_dir / "rules_argmax.png"
    Image.fromarray(argmax_rgb, mode="RGB").save(p, format="PNG")
    paths.append(p)
    paths.extend(export_rulebase(fuzzy, out_dir / "rulebase.json"))
    return paths


# ---------------------------------------------------------------------------
# rulebase export / import
# ---------------------------------------------------------------------------

def linguistic_level(center: float) -> str:
    """LOW below 0.5, HIGH above, MEDIUM at exactly 0.5."""
    if center < 0.5:
        return "LOW"
    if center > 0.5:
        return "HIGH"
    return "MEDIUM"


def rule_label(c1: float, c2: float) -> str:
    return f"IF x1 is {linguistic_level(c1)} AND x2 is {linguistic_level(c2)}"


def mf_curves(fuzzy: FuzzyRuleParams, samples: int = MF_CURVE_SAMPLES) -> np.ndarray:
    """[R, 2, samples] membership values over [0,1] per rule and input."""
    xs = np.linspace(0.0, 1.0, samples)
    centers = fuzzy.centers()
    widths = fuzzy.widths()
    out = np.empty((fuzzy.rules, 2, samples))
    for i in range(fuzzy.rules):
        for j in range(2):
            d = xs - centers[i, j]
            out[i, j] = np.exp(-(d * d) / (2.0 * widths[i, j] ** 2))
    return out


def export_rulebase(fuzzy: FuzzyRuleParams, json_path: Path) -> list[Path]:
    """JSON rulebase (centers, widths, consequents, linguistic labels and the
    sign of each rule's constant term) plus the membership curves as CSV."""
    json_path = Path(json_path)
    centers = fuzzy.centers()
    widths = fuzzy.widths()
    cons = fuzzy.consequents()
    rules = []
    for i in range(fuzzy.rules):
        a0 = cons[i, 0]
        rules.append({
            "index": i,
            "centers": list(centers[i]),
            "widths": list(widths[i]),
            "consequents": list(cons[i]),
            "antecedent": rule_label(centers[i, 0], centers[i, 1]),
            "consequent_constant_sign": "negative" if a0 < 0 else ("positive" if a0 > 0 else "zero"),
        })
    doc = {"rules": rules, "sigma_min": SIGMA_MIN, "defuzz_epsilon": EPS_DEN}
    try:
        json_path.write_text(json.dumps(doc, indent=2) + "\n")
    except OSError as exc:
        raise DataError(f"cannot write rulebase to {json_path}: {exc}") from exc

    curves = mf_curves(fuzzy)
    xs = np.linspace(0.0, 1.0, curves.shape[2])
    csv_path = json_path.with_name(json_path.stem + "_mf_curves.csv")
    with open(csv_path, "w") as f:
        f.write("rule,input,x,mu\n")
        for i in range(curves.shape[0]):
            for j in range(2):
                for k in range(curves.shape[2]):
                    f.write(f"{i},x{j + 1},{xs[k]:.10g},{curves[i, j, k]:.17g}\n")
    return [json_path, csv_path]


def load_rulebase(json_path: Path) -> FuzzyRuleParams:
    """Rebuild rule parameters from an exported JSON file (bit-exact floats)."""
    try:
        doc = json.loads(Path(json_path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read rulebase {json_path}: {exc}") from exc
    rules = sorted(doc["rules"], key=lambda r: r["index"])
    params = FuzzyRuleParams.initialize(len(rules))
    params.set_rows(
        np.array([r["centers"] for r in rules]),
        np.array([r["widths"] for r in rules]),
        np.array([r["consequents"] for r in rules]),
    )
    return params
