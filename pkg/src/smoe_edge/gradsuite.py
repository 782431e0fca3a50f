"""Finite-difference verification suite covering every primitive op, the
expert-gate block, the fuzzy head, the losses and the end-to-end model.

Checks run at step 1e-5 / rtol 1e-4 in float64. Points for kinked ops
(relu, max pooling) are sampled away from their non-differentiable sets so
central differences stay meaningful.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import GradcheckReport, Tensor, finite_diff_gradcheck
from .fuzzy import FuzzyRuleParams, tsk_forward
from .losses import LossConfig, bce_with_logits, composite_loss, dice_loss, distill_mse
from .model import Model, ModelConfig, build_model, forward_padded, prepare_input
from .smoe import init_smoe_params, smoe_forward

STEP = 1e-5
RTOL = 1e-4


def _away_from_zero(rng, shape, margin=0.05):
    a = rng.uniform(margin, 1.0, size=shape)
    return a * rng.choice([-1.0, 1.0], size=shape)


def _set_model_param(model: Model, name: str, tensor: Tensor) -> None:
    """Rebind one named parameter so a probe tensor joins the graph."""
    if name in model.params:
        model.params[name] = tensor
        return
    if name.startswith("smoe"):
        level, rest = name.split(".", 1)
        setattr(model.smoe_blocks[int(level[4:])], rest.replace(".", "_"), tensor)
        return
    if name.startswith("tsk."):
        setattr(model.fuzzy, name.split(".", 1)[1], tensor)
        return
    raise KeyError(f"unknown parameter {name!r}")


def _coords_sample(tensor: Tensor, rng, cap: int):
    if tensor.size <= cap:
        return None
    return sorted(rng.choice(tensor.size, size=cap, replace=False).tolist())


def run_suite(seeds=range(20), verbose: bool = False) -> list[tuple[str, GradcheckReport]]:
    """Run every check for every seed; returns (name, report) pairs."""
    results: list[tuple[str, GradcheckReport]] = []

    def add(name, report):
        results.append((name, report))
        if verbose:
            state = "ok  " if report.passed else "FAIL"
            print(f"  {state} {name}  max_rel_err={report.max_rel_error:.3e}")

    for seed in seeds:
        rng = np.random.default_rng(seed)
        tag = f"seed{seed}"

        # --- primitives -----------------------------------------------------
        w = Tensor(rng.normal(size=(3, 2, 3, 3)))
        b = Tensor(rng.normal(size=3))
        x0 = Tensor(rng.normal(size=(2, 2, 6, 6)))
        add(f"{tag}/conv2d.input", finite_diff_gradcheck(
            lambda t: ad.reduce(ad.sigmoid(ad.conv2d(t, w, b, padding=1)), "sum"), x0, STEP, RTOL))
        add(f"{tag}/conv2d.weight", finite_diff_gradcheck(
            lambda t: ad.reduce(ad.sigmoid(ad.conv2d(x0, t, b, padding=1)), "sum"), w, STEP, RTOL))
        add(f"{tag}/conv2d.bias", finite_diff_gradcheck(
            lambda t: ad.reduce(ad.sigmoid(ad.conv2d(x0, w, t, padding=1)), "sum"), b, STEP, RTOL))
        wd = Tensor(rng.normal(size=(2, 2, 3, 3)))
        add(f"{tag}/conv2d.dilated", finite_diff_gradcheck(
            lambda t: ad.reduce(ad.sigmoid(ad.conv2d(t, wd, None, padding=2, dilation=2)), "sum"),
            x0, STEP, RTOL))

        # distinct pool-window values keep the argmax stable under the probe step
        pool_pt = Tensor((rng.permutation(64).reshape(1, 1, 8, 8)) / 16.0)
        add(f"{tag}/max_pool2d", finite_diff_gradcheck(
            lambda t: ad.reduce(ad.square(ad.max_pool2d(t)), "sum"), pool_pt, STEP, RTOL))
        add(f"{tag}/upsample2x", finite_diff_gradcheck(
            lambda t: ad.reduce(ad.square(ad.upsample2x(t)), "sum"),
            Tensor(rng.normal(size=(1, 2, 3, 3))), STEP, RTOL))
        cc_b = Tensor(rng.normal(size=(1, 2, 3, 3)))
        add(f"{tag}/concat_channels", finite_diff_gradcheck(
            lambda t: ad.reduce(ad.square(ad.concat_channels(t, cc_b)), "sum"),
            Tensor(rng.normal(size=(1, 1, 3, 3))), STEP, RTOL))

        for fn in ("sigmoid", "exp", "neg", "square"):
            add(f"{tag}/map_unary.{fn}", finite_diff_gradcheck(
                lambda t, fn=fn: ad.reduce(ad.map_unary(t, fn), "sum"),
                Tensor(rng.normal(size=(3, 4))), STEP, RTOL))
        add(f"{tag}/map_unary.relu", finite_diff_gradcheck(
            lambda t: ad.reduce(ad.square(ad.map_unary(t, "relu")), "sum"),
            Tensor(_away_from_zero(rng, (3, 4))), STEP, RTOL))

        zb = Tensor(_away_from_zero(rng, (1, 3, 1, 1), margin=0.3))
        za = Tensor(rng.normal(size=(2, 3, 4, 4)))
        for fn in ("add", "sub", "mul", "div"):
            add(f"{tag}/zip_binary.{fn}.lhs", finite_diff_gradcheck(
                lambda t, fn=fn: ad.reduce(ad.square(ad.zip_binary(t, zb, fn)), "sum"),
                za, STEP, RTOL))
            add(f"{tag}/zip_binary.{fn}.rhs", finite_diff_gradcheck(
                lambda t, fn=fn: ad.reduce(ad.square(ad.zip_binary(za, t, fn)), "sum"),
                zb, STEP, RTOL))
        add(f"{tag}/reduce.mean", finite_diff_gradcheck(
            lambda t: ad.reduce(ad.square(t), "mean"), Tensor(rng.normal(size=(4, 5))), STEP, RTOL))

        # --- expert-gate block ------------------------------------------------
        block = init_smoe_params(rng, channels=3)
        guide = Tensor(rng.random((1, 1, 5, 5)))
        feats = Tensor(rng.normal(size=(1, 3, 5, 5)))

        def smoe_loss(x):
            y, _ = smoe_forward(x, guide, block)
            return ad.reduce(ad.square(y), "sum")

        add(f"{tag}/smoe.input", finite_diff_gradcheck(smoe_loss, feats, STEP, RTOL))
        for pname, ptensor in block.named_tensors("smoe").items():
            field = pname.split(".", 1)[1].replace(".", "_")

            def f(t, field=field):
                setattr(block, field, t)
                try:
                    y, _ = smoe_forward(feats, guide, block)
                    return ad.reduce(ad.square(y), "sum")
                finally:
                    setattr(block, field, ptensor)

            add(f"{tag}/{pname}", finite_diff_gradcheck(
                f, ptensor, STEP, RTOL, coords=_coords_sample(ptensor, rng, 12)))

        # --- fuzzy head -------------------------------------------------------
        fuzzy = FuzzyRuleParams.initialize(4)
        fuzzy.set_rows(rng.random((4, 2)), rng.uniform(0.15, 0.6, (4, 2)), rng.normal(size=(4, 3)))
        x1 = Tensor(rng.random((1, 1, 4, 4)))
        x2 = Tensor(rng.random((1, 1, 4, 4)))

        add(f"{tag}/tsk.x1", finite_diff_gradcheck(
            lambda t: ad.reduce(ad.square(tsk_forward(t, x2, fuzzy)[0]), "sum"), x1, STEP, RTOL))
        add(f"{tag}/tsk.x2", finite_diff_gradcheck(
            lambda t: ad.reduce(ad.square(tsk_forward(x1, t, fuzzy)[0]), "sum"), x2, STEP, RTOL))
        for pname, ptensor in fuzzy.named_tensors().items():
            attr = pname.split(".", 1)[1]

            def f(t, attr=attr):
                setattr(fuzzy, attr, t)
                try:
                    y, _ = tsk_forward(x1, x2, fuzzy)
                    return ad.reduce(ad.square(y), "sum")
                finally:
                    setattr(fuzzy, attr, ptensor)

            add(f"{tag}/{pname}", finite_diff_gradcheck(f, ptensor, STEP, RTOL))

        # --- losses -----------------------------------------------------------
        target_soft = rng.random((1, 1, 4, 4))
        target_bin = (rng.random((1, 1, 4, 4)) > 0.6).astype(float)
        logits_pt = Tensor(rng.normal(size=(1, 1, 4, 4)))
        add(f"{tag}/loss.bce", finite_diff_gradcheck(
            lambda t: bce_with_logits(t, target_soft), logits_pt, STEP, 1e-5))
        add(f"{tag}/loss.dice", finite_diff_gradcheck(
            lambda t: dice_loss(ad.sigmoid(t), target_bin), logits_pt, STEP, 1e-5))
        add(f"{tag}/loss.composite", finite_diff_gradcheck(
            lambda t: composite_loss(t, target_soft, LossConfig(bce_weight=0.5)), logits_pt, STEP, 1e-5))
        fixed_logits = Tensor(rng.normal(size=(1, 1, 4, 4)))
        add(f"{tag}/loss.distill", finite_diff_gradcheck(
            lambda t: distill_mse(t, fixed_logits), logits_pt, STEP, 1e-5))

        # --- end-to-end model -------------------------------------------------
        cfg = ModelConfig(depth=2, base_channels=4, input_channels=1)
        net = build_model(cfg, seed=seed)
        image = rng.random((8, 8))
        x_np, guidance_np, _, _ = prepare_input(net, image)
        guidance_ts = [Tensor(g) for g in guidance_np]
        x_fixed = Tensor(x_np)
        e2e_target = (rng.random((1, 1, 8, 8)) > 0.7).astype(float)
        lcfg = LossConfig(bce_weight=0.5)

        def e2e_composite(x_in: Tensor) -> Tensor:
            logits, _ = forward_padded(net, x_in, guidance_ts)
            return composite_loss(logits, e2e_target, lcfg)

        def e2e_total(x_in: Tensor) -> Tensor:
            logits, _ = forward_padded(net, x_in, guidance_ts)
            confidence = ad.sigmoid(logits)
            tsk_out, _ = tsk_forward(guidance_ts[0], confidence.detach(), net.fuzzy)
            comp = composite_loss(logits, e2e_target, lcfg)
            return comp + distill_mse(tsk_out, logits)

        add(f"{tag}/model.input", finite_diff_gradcheck(e2e_composite, x_fixed, STEP, RTOL))

        net_params = net.named_parameters()
        backbone = [n for n in sorted(net_params) if not n.startswith("tsk.")]
        picks = [backbone[i] for i in rng.choice(len(backbone), size=4, replace=False)]
        picks += ["tsk.center_x1", "tsk.coef_x2"]
        for name in picks:
            ptensor = net_params[name]
            loss_fn = e2e_total if name.startswith("tsk.") else e2e_composite

            def f(t, name=name, ptensor=ptensor, loss_fn=loss_fn):
                _set_model_param(net, name, t)
                try:
                    return loss_fn(x_fixed)
                finally:
                    _set_model_param(net, name, ptensor)

            add(f"{tag}/model.{name}", finite_diff_gradcheck(
                f, ptensor, STEP, RTOL, coords=_coords_sample(ptensor, rng, 10)))

    return results


def suite_passed(results) -> bool:
    return all(rep.passed for _, rep in results)


def negative_control() -> bool:
    """A deliberately broken backward (off by a factor of 2) must fail."""
    from .autodiff import _accumulate, _from_op

    def broken_sum_of_squares(t: Tensor) -> Tensor:
        value = np.asarray((t.data * t.data).sum())

        def _bw(out):
            if t.requires_grad:
                _accumulate(t, out.grad * 4.0 * t.data)  # true derivative is 2x

        return _from_op(value, (t,), "broken_square_sum", _bw)

    report = finite_diff_gradcheck(broken_sum_of_squares, Tensor([1.0, 2.0, 3.0]), STEP, RTOL)
    return not report.passed