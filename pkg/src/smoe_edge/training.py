"""Dataset ingestion, rotation augmentation, the Adam loop and checkpoints.

Dataset layout: `<root>/<split>/images/*.png` paired with
`<root>/<split>/gt/*.png` by stem; ground truth is 8-bit grayscale where
value/255 is the consensus boundary strength.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .autodiff import Tensor, backward
from .errors import CheckpointError, DataError, NumericError
from .losses import LossConfig, composite_loss, distill_mse, total_loss
from .model import Model, ModelConfig, build_model, forward

CHECKPOINT_MAGIC = b"SMOEEDGE"
CHECKPOINT_VERSION = 1

ROTATIONS = ("rot0", "rot90", "rot180", "rot270")


@dataclass
class Sample:
    image: np.ndarray         # H x W x C in [0,1]
    ground_truth: np.ndarray  # H x W in [0,1], consensus boundary strength
    id: str


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 4
    lr: float = 1e-4
    loss_cfg: LossConfig = field(default_factory=LossConfig)
    seed: int = 0
    out_dir: Path | None = None
    two_phase: bool = False   # when set: composite-only epochs, then distill-only epochs

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.lr < 0:
            raise ValueError(f"invalid train config: {self}")


# ---------------------------------------------------------------------------
# dataset
# ---------------------------------------------------------------------------

def read_image(path: Path) -> np.ndarray:
    """PNG to float array in [0,1]; RGB stays 3-channel, grayscale is HxW."""
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB" if im.mode in ("RGBA", "P", "CMYK") else "L")
            arr = np.asarray(im, dtype=np.float64) / 255.0
    except OSError as exc:
        raise DataError(f"unreadable image file {path}: {exc}") from exc
    return arr


def write_gray_png(path: Path, values: np.ndarray) -> None:
    """8-bit grayscale PNG from [0,1] values, rounding half up."""
    q = np.floor(np.clip(values, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(q, mode="L").save(path, format="PNG")


def load_dataset(root: Path, split: str) -> list[Sample]:
    """Load one split in deterministic lexicographic stem order."""
    root = Path(root)
    img_dir = root / split / "images"
    gt_dir = root / split / "gt"
    if not img_dir.is_dir():
        return []
    samples = []
    for img_path in sorted(img_dir.glob("*.png")):
        stem = img_path.stem
        gt_path = gt_dir / f"{stem}.png"
        if not gt_path.is_file():
            raise DataError(f"missing ground truth for image stem {stem!r} (expected {gt_path})")
        image = read_image(img_path)
        if image.ndim == 2:
            image = image[:, :, None]
        gt = read_image(gt_path)
        if gt.ndim == 3:
            gt = gt.mean(axis=2)
        if gt.shape != image.shape[:2]:
            raise DataError(f"sample {stem!r}: image {image.shape[:2]} vs ground truth {gt.shape}")
        samples.append(Sample(image=image, ground_truth=gt, id=stem))
    return samples


def augment(sample: Sample, mode: str) -> Sample:
    """Rotate image and ground truth together by a multiple of 90 degrees
    (counter-clockwise); rot90 maps pixel (r,c) to (W-1-c, r)."""
    if mode not in ROTATIONS:
        raise ValueError(f"unknown augmentation mode {mode!r}")
    k = ROTATIONS.index(mode)
    if k == 0:
        return sample
    return Sample(
        image=np.ascontiguousarray(np.rot90(sample.image, k, axes=(0, 1))),
        ground_truth=np.ascontiguousarray(np.rot90(sample.ground_truth, k, axes=(0, 1))),
        id=f"{sample.id}:{mode}",
    )


def _crop_center(arr: np.ndarray, th: int, tw: int) -> np.ndarray:
    h, w = arr.shape[:2]
    top = (h - th) // 2
    left = (w - tw) // 2
    return arr[top:top + th, left:left + tw]


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState, post_hooks=()) -> None:
    """One bias-corrected Adam update, in place.

    A non-finite gradient aborts the whole step (no partial updates) and
    names the offending parameter.
    """
    for name in params:
        g = grads.get(name)
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}; step aborted")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, tensor in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(tensor.data)
        m = state.m.setdefault(name, np.zeros_like(tensor.data))
        v = state.v.setdefault(name, np.zeros_like(tensor.data))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        tensor.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    for hook in post_hooks:
        hook()


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    seconds: float


def _batch_arrays(batch: list[Sample]) -> tuple[np.ndarray, np.ndarray]:
    th = min(s.image.shape[0] for s in batch)
    tw = min(s.image.shape[1] for s in batch)
    imgs, gts = [], []
    for s in batch:
        img = _crop_center(s.image, th, tw)
        if img.ndim == 2:
            img = img[:, :, None]
        imgs.append(img)
        gts.append(_crop_center(s.ground_truth, th, tw))
    return np.stack(imgs), np.stack(gts)


def _padded_target(gt: np.ndarray, pad_box: tuple) -> np.ndarray:
    top, bottom, left, right = pad_box
    if any(pad_box):
        gt = np.pad(gt, ((0, 0), (top, bottom), (left, right)), mode="reflect")
    return gt[:, None]


def _batch_loss(model: Model, images: np.ndarray, gts: np.ndarray,
                loss_cfg: LossConfig, mode: str) -> Tensor:
    bundle = forward(model, images)
    target = _padded_target(gts, bundle.pad_box)
    if mode == "composite":
        return composite_loss(bundle.logits, target, loss_cfg)
    if mode == "distill":
        return distill_mse(bundle.tsk_output, bundle.logits)
    loss, _ = total_loss(bundle.logits, bundle.tsk_output, target, loss_cfg)
    return loss


def train(model: Model, train_samples: list[Sample], val_samples: list[Sample],
          config: TrainConfig) -> list[EpochRecord]:
    """Seeded, fully deterministic training with per-epoch checkpoints.

    The training set is expanded with all four right-angle rotations before
    shuffling. Batches are centre-cropped to their common shape. Checkpoints
    land in config.out_dir (per epoch, plus `ckpt_best` at the lowest
    validation loss) together with a `training_log.csv`.
    """
    if not train_samples:
        raise DataError("training set is empty")
    out_dir = Path(config.out_dir) if config.out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)

    expanded = [augment(s, mode) for s in train_samples for mode in ROTATIONS]
    rng = np.random.Generator(np.random.PCG64(config.seed))
    state = AdamState(lr=config.lr)
    params = model.named_parameters()
    hooks = (model.fuzzy.clamp_widths,)

    phases = [("composite", config.epochs), ("distill", config.epochs)] if config.two_phase \
        else [("joint", config.epochs)]

    records: list[EpochRecord] = []
    best_val = np.inf
    epoch_no = 0
    for mode, n_epochs in phases:
        for _ in range(n_epochs):
            epoch_no += 1
            start = time.time()
            order = rng.permutation(len(expanded))
            losses = []
            for i in range(0, len(order), config.batch_size):
                batch = [expanded[j] for j in order[i:i + config.batch_size]]
                images, gts = _batch_arrays(batch)
                model.zero_grad()
                loss = _batch_loss(model, images, gts, config.loss_cfg, mode)
                if not np.isfinite(loss.item()):
                    raise NumericError(f"non-finite training loss at epoch {epoch_no} "
                                       f"batch {i // config.batch_size} (samples {[s.id for s in batch]})")
                backward(loss)
                grads = {name: t.grad for name, t in params.items()}
                adam_step(params, grads, state, post_hooks=hooks)
                losses.append(loss.item())
            train_loss = float(np.mean(losses))

            val_loss = float("nan")
            if val_samples:
                vals = []
                for s in val_samples:
                    img = s.image if s.image.ndim == 3 else s.image[:, :, None]
                    vals.append(_batch_loss(model, img[None], s.ground_truth[None],
                                            config.loss_cfg, mode).item())
                val_loss = float(np.mean(vals))

            rec = EpochRecord(epoch=epoch_no, train_loss=train_loss, val_loss=val_loss,
                              seconds=time.time() - start)
            records.append(rec)
            if out_dir:
                save_checkpoint(model, state, out_dir / f"ckpt_epoch_{epoch_no:03d}.smoe")
                score = val_loss if val_samples else train_loss
                if score < best_val:
                    best_val = score
                    save_checkpoint(model, state, out_dir / "ckpt_best.smoe")
    if out_dir:
        write_log(out_dir / "training_log.csv", records)
    return records


def write_log(path: Path, records: list[EpochRecord]) -> None:
    with open(path, "w") as f:
        f.write("epoch,train_loss,val_loss,seconds\n")
        for r in records:
            f.write(f"{r.epoch},{r.train_loss:.10g},{r.val_loss:.10g},{r.seconds:.3f}\n")


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------
# Layout (little-endian): magic "SMOEEDGE" | u32 version | u32 json length |
# config JSON | u32 param count | per parameter: u16 name length, name,
# u8 ndim, u32 dims..., raw float64 data | u8 optimizer flag | optimizer
# section (hyperparameters, step, and m/v slots in the same record format) |
# sha256 of everything before it.

def _write_array(buf: io.BytesIO, name: str, arr: np.ndarray) -> None:
    encoded = name.encode()
    buf.write(struct.pack("<H", len(encoded)))
    buf.write(encoded)
    buf.write(struct.pack("<B", arr.ndim))
    for d in arr.shape:
        buf.write(struct.pack("<I", d))
    buf.write(arr.astype("<f8").tobytes())


def _read_array(buf: io.BytesIO) -> tuple[str, np.ndarray]:
    (nlen,) = struct.unpack("<H", buf.read(2))
    name = buf.read(nlen).decode()
    (ndim,) = struct.unpack("<B", buf.read(1))
    shape = tuple(struct.unpack("<I", buf.read(4))[0] for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(buf.read(count * 8), dtype="<f8").reshape(shape).copy()
    return name, data


def save_checkpoint(model: Model, state: AdamState | None, path: Path) -> None:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    cfg_json = json.dumps(model.config.to_dict(), sort_keys=True).encode()
    buf.write(struct.pack("<I", len(cfg_json)))
    buf.write(cfg_json)

    params = model.named_parameters()
    buf.write(struct.pack("<I", len(params)))
    for name in sorted(params):
        _write_array(buf, name, params[name].data)

    buf.write(struct.pack("<B", 1 if state is not None else 0))
    if state is not None:
        buf.write(struct.pack("<Qdddd", state.step, state.lr, state.beta1, state.beta2, state.eps))
        slots = sorted(set(state.m) | set(state.v))
        buf.write(struct.pack("<I", len(slots)))
        for name in slots:
            zero = np.zeros_like(params[name].data) if name in params else np.zeros(0)
            _write_array(buf, name, state.m.get(name, zero))
            _write_array(buf, name, state.v.get(name, zero))

    payload = buf.getvalue()
    digest = hashlib.sha256(payload).digest()
    with open(path, "wb") as f:
        f.write(payload)
        f.write(digest)


def load_checkpoint(path: Path, expect_config: ModelConfig | None = None):
    """Rebuild (model, optimizer state) from a checkpoint file.

    Rejects corrupt files (magic / version / checksum / truncation) and,
    when `expect_config` is given, configs that do not match it.
    """
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < len(CHECKPOINT_MAGIC) + 4 + 32:
        raise CheckpointError(f"checkpoint {path} is truncated ({len(raw)} bytes)")
    payload, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise CheckpointError(f"checkpoint {path} failed its checksum")
    buf = io.BytesIO(payload)
    if buf.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"checkpoint {path} has a bad magic string")
    (version,) = struct.unpack("<I", buf.read(4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint {path}: format version {version} != {CHECKPOINT_VERSION}")
    (jlen,) = struct.unpack("<I", buf.read(4))
    config = ModelConfig.from_dict(json.loads(buf.read(jlen).decode()))
    if expect_config is not None and config != expect_config:
        diff = {k: (getattr(config, k), getattr(expect_config, k))
                for k in config.to_dict()
                if getattr(config, k) != getattr(expect_config, k)}
        raise CheckpointError(f"checkpoint {path} config mismatch (stored, expected): {diff}")

    model = build_model(config, seed=0)
    params = model.named_parameters()
    (n_params,) = struct.unpack("<I", buf.read(4))
    if n_params != len(params):
        raise CheckpointError(f"checkpoint {path}: {n_params} parameters stored, model has {len(params)}")
    for _ in range(n_params):
        name, data = _read_array(buf)
        if name not in params:
            raise CheckpointError(f"checkpoint {path}: unknown parameter {name!r}")
        if params[name].data.shape != data.shape:
            raise CheckpointError(f"checkpoint {path}: parameter {name!r} shape "
                                  f"{data.shape} != {params[name].data.shape}")
        params[name].data = data

    (has_state,) = struct.unpack("<B", buf.read(1))
    state = None
    if has_state:
        step, lr, b1, b2, eps = struct.unpack("<Qdddd", buf.read(8 + 32))
        state = AdamState(lr=lr, beta1=b1, beta2=b2, eps=eps, step=step)
        (n_slots,) = struct.unpack("<I", buf.read(4))
        for _ in range(n_slots):
            name, m = _read_array(buf)
            name_v, v = _read_array(buf)
            if name_v != name:
                raise CheckpointError(f"checkpoint {path}: optimizer slots out of order")
            state.m[name] = m
            state.v[name] = v
    return model, state
