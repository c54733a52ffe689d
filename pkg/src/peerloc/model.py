"""The localization network: spec, losses, training loop, checkpoints.

The network maps a 320x224 RGB image (scaled to [0, 1]) to a 28x40 grid
with a confidence channel (sigmoid) and a metric depth channel (linear),
plus optional per-class probability channels.  Losses follow the
masked-MSE / weighted-cross-entropy design; "mean" is the mean over the
batch of the grid-summed quantity.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import datagen, geometry, nn
from .geometry import DEFAULT_GRID, DEFAULT_INTRINSICS, GridMap, GridShape

_MAGIC = b"PLOCCKPT"
_CLAMP = 1e-7


class CheckpointFormatError(ValueError):
    """Checkpoint file is truncated, corrupt, or not a checkpoint."""


class SpecMismatchError(ValueError):
    """Checkpoint parameters do not fit the expected network spec."""


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; carries the offending batch for diagnosis."""

    def __init__(self, message: str, epoch: int, step: int, batch_indices: list[int]):
        super().__init__(message)
        self.epoch = epoch
        self.step = step
        self.batch_indices = batch_indices


@dataclass(frozen=True)
class NetworkSpec:
    """Ordered layer list plus input/output contract.

    Output channel 0 is confidence (sigmoid applied outside the stack),
    channel 1 is depth (linear), channels 2+ are class probabilities.
    """

    layers: tuple[nn.LayerSpec, ...]
    in_channels: int = 3
    num_classes: int = 0
    grid: GridShape = DEFAULT_GRID

    def __post_init__(self) -> None:
        pools = sum(1 for s in self.layers if s.kind == "maxpool")
        if 2**pools != self.grid.stride:
            raise ValueError(
                f"{pools} maxpools give {2 ** pools}x downsampling, "
                f"need exactly {self.grid.stride}x"
            )
        convs = [s for s in self.layers if s.kind == "conv"]
        if not convs or convs[-1].out_channels != 2 + self.num_classes:
            raise ValueError(
                f"final conv must output {2 + self.num_classes} channels"
            )

    def build(self) -> list[nn.Layer]:
        return nn.build_layers(list(self.layers), self.in_channels)

    def to_json(self) -> dict:
        return {
            "layers": [s.to_json() for s in self.layers],
            "in_channels": self.in_channels,
            "num_classes": self.num_classes,
        }

    @classmethod
    def from_json(cls, d: dict) -> "NetworkSpec":
        return cls(
            layers=tuple(nn.LayerSpec.from_json(s) for s in d["layers"]),
            in_channels=d["in_channels"],
            num_classes=d["num_classes"],
        )


def default_network_spec(num_classes: int = 0) -> NetworkSpec:
    """Encoder with four conv stages and three 2x2 poolings (8x total),
    ending in a 1x1 projection to the output channels."""
    conv = lambda ch, k=3: nn.LayerSpec("conv", out_channels=ch, kernel=k)
    bn = nn.LayerSpec("batchnorm")
    relu = nn.LayerSpec("relu")
    pool = nn.LayerSpec("maxpool")
    return NetworkSpec(
        layers=(
            conv(8), bn, relu, pool,
            conv(16), bn, relu, pool,
            conv(32), bn, relu, pool,
            conv(32), bn, relu,
            conv(2 + num_classes, k=1),
        ),
        num_classes=num_classes,
    )


@dataclass
class Checkpoint:
    """Trained (or initial) parameters bound to their network spec."""

    spec: NetworkSpec
    store: nn.ParamStore
    epoch: int = 0
    seed: int = 0


@dataclass
class LossBreakdown:
    total: float
    depth: float
    confidence: float
    class_prob: Optional[float] = None


@dataclass
class TrainConfig:
    epochs: int = 25
    warm_epochs: int = 2
    batch: int = 5
    base_lr: float = 1e-3
    seed: Optional[int] = None
    conf_threshold: float = 0.33
    num_classes: int = 0

    def __post_init__(self) -> None:
        if self.warm_epochs >= self.epochs:
            raise ValueError("warm_epochs must be < epochs")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")


@dataclass
class CurvePoint:
    step: int
    epoch: int
    lr: float
    loss: LossBreakdown


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# --- losses -----------------------------------------------------------
# All loss functions take batched grids shaped (B, rows, cols); label
# confidence is {0, 1}.


def depth_loss(
    pred_depth: np.ndarray, label_conf: np.ndarray, label_depth: np.ndarray
) -> float:
    """Squared depth error summed over active cells, averaged over the batch."""
    b = pred_depth.shape[0]
    return float((label_conf * (pred_depth - label_depth) ** 2).sum() / b)


def confidence_loss(pred_conf: np.ndarray, label_conf: np.ndarray) -> float:
    """Cross entropy weighted by the squared confidence error.

    Predictions are clamped away from {0, 1} before the logs.
    """
    b = pred_conf.shape[0]
    cc = np.clip(pred_conf, _CLAMP, 1.0 - _CLAMP)
    ce = -label_conf * np.log(cc) - (1.0 - label_conf) * np.log(1.0 - cc)
    return float(((label_conf - pred_conf) ** 2 * ce).sum() / b)


def class_loss(
    pred_prob: np.ndarray, label_conf: np.ndarray, label_prob: np.ndarray
) -> float:
    """Per-class binary cross entropy on active cells (one-hot labels).

    Shapes: (B, rows, cols, K).  Disabled by default at the network
    level (num_classes = 0).
    """
    if pred_prob.shape[-1] < 1:
        raise ValueError("class loss requires at least one class channel")
    b = pred_prob.shape[0]
    pc = np.clip(pred_prob, _CLAMP, 1.0 - _CLAMP)
    ce = -label_prob * np.log(pc) - (1.0 - label_prob) * np.log(1.0 - pc)
    return float((label_conf[..., None] * ce).sum() / b)


def loss_and_grad(
    raw: np.ndarray,
    label_conf: np.ndarray,
    label_depth: np.ndarray,
    label_prob: Optional[np.ndarray] = None,
) -> tuple[LossBreakdown, np.ndarray]:
    """Loss of the raw network output plus its analytic gradient.

    `raw` is (B, 2+K, rows, cols): channel 0 pre-sigmoid confidence,
    channel 1 depth, channels 2+ pre-sigmoid class probabilities.
    """
    b = raw.shape[0]
    num_classes = raw.shape[1] - 2
    conf_hat = sigmoid(raw[:, 0])
    depth_hat = raw[:, 1]

    l_d = depth_loss(depth_hat, label_conf, label_depth)
    l_c = confidence_loss(conf_hat, label_conf)

    grad = np.zeros_like(raw)
    # depth: d/d(d_hat) of c*(d_hat-d)^2 / B
    grad[:, 1] = 2.0 * label_conf * (depth_hat - label_depth) / b
    # confidence, through the sigmoid; the clamp freezes the log term
    cc = np.clip(conf_hat, _CLAMP, 1.0 - _CLAMP)
    ce = -label_conf * np.log(cc) - (1.0 - label_conf) * np.log(1.0 - cc)
    err = label_conf - conf_hat
    d_ce = np.where(
        (conf_hat > _CLAMP) & (conf_hat < 1.0 - _CLAMP),
        -label_conf / cc + (1.0 - label_conf) / (1.0 - cc),
        0.0,
    )
    d_conf = -2.0 * err * ce + err**2 * d_ce
    grad[:, 0] = d_conf * conf_hat * (1.0 - conf_hat) / b

    l_p = None
    if num_classes > 0:
        if label_prob is None:
            raise ValueError("network has class channels but no class labels given")
        prob_hat = np.moveaxis(sigmoid(raw[:, 2:]), 1, -1)  # (B, R, C, K)
        l_p = class_loss(prob_hat, label_conf, label_prob)
        pc = np.clip(prob_hat, _CLAMP, 1.0 - _CLAMP)
        d_p = np.where(
            (prob_hat > _CLAMP) & (prob_hat < 1.0 - _CLAMP),
            -label_prob / pc + (1.0 - label_prob) / (1.0 - pc),
            0.0,
        )
        d_p = label_conf[..., None] * d_p * prob_hat * (1.0 - prob_hat) / b
        grad[:, 2:] = np.moveaxis(d_p, -1, 1)

    total = l_d + l_c + (l_p or 0.0)
    return LossBreakdown(total, l_d, l_c, l_p), grad


# --- inference --------------------------------------------------------


def image_to_input(image: np.ndarray) -> np.ndarray:
    """(H, W, 3) image, uint8 or [0, 1] float, to a (3, H, W) float32 plane."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got shape {image.shape}")
    if image.dtype == np.uint8:
        arr = image.astype(np.float32) / 255.0
    else:
        arr = image.astype(np.float32)
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def _raw_to_gridmap(raw: np.ndarray, num_classes: int) -> GridMap:
    conf = sigmoid(raw[0])
    depth = raw[1].copy()
    probs = None
    if num_classes > 0:
        probs = np.moveaxis(sigmoid(raw[2:]), 0, -1)
    return GridMap(confidence=conf, depth=depth, class_prob=probs)


def forward(ckpt: Checkpoint, image: np.ndarray) -> GridMap:
    """Predict the confidence/depth grid for one image (eval mode)."""
    x = image_to_input(image)[None]
    layers = ckpt.spec.build()
    out, _ = nn.forward_stack(layers, ckpt.store, x, training=False)
    return _raw_to_gridmap(out[0], ckpt.spec.num_classes)


def forward_images(
    ckpt: Checkpoint, images: Sequence[np.ndarray], batch: int = 16
) -> list[GridMap]:
    """Batched eval-mode forward over many images."""
    layers = ckpt.spec.build()
    maps: list[GridMap] = []
    for start in range(0, len(images), batch):
        chunk = images[start : start + batch]
        x = np.stack([image_to_input(im) for im in chunk])
        out, _ = nn.forward_stack(layers, ckpt.store, x, training=False)
        for row in out:
            maps.append(_raw_to_gridmap(row, ckpt.spec.num_classes))
    return maps


# --- dataset access ---------------------------------------------------


class TrainingSet:
    """Images plus grid labels, ready for the optimizer.

    Frames whose labels collide in one grid cell are dropped (the label
    format has no merge rule); robots that project out of view simply
    contribute nothing to the frame's label.
    """

    def __init__(self, image_paths: list[Path], labels: list[GridMap]):
        if len(image_paths) != len(labels):
            raise ValueError("image/label count mismatch")
        self.image_paths = image_paths
        self.labels = labels
        self._cache: dict[int, np.ndarray] = {}
        self.dropped = 0

    def __len__(self) -> int:
        return len(self.image_paths)

    @classmethod
    def from_dataset_dir(
        cls,
        root: str | Path,
        intrinsics: geometry.CameraIntrinsics = DEFAULT_INTRINSICS,
        grid: GridShape = DEFAULT_GRID,
    ) -> "TrainingSet":
        root = Path(root)
        records = datagen.read_records(root / "labels.jsonl")
        paths: list[Path] = []
        labels: list[GridMap] = []
        dropped = 0
        for rec in records:
            att = geometry.Attitude(rec.roll, rec.pitch)
            cell_labels = []
            for robot in rec.robots:
                lab = geometry.label_from_horizontal(robot, att, intrinsics)
                if lab is not None:
                    cell_labels.append(lab)
            try:
                gmap = geometry.grid_labels(cell_labels, grid)
            except geometry.GridCellCollisionError:
                dropped += 1
                continue
            paths.append(root / rec.image)
            labels.append(gmap)
        ts = cls(paths, labels)
        ts.dropped = dropped
        return ts

    def image(self, i: int) -> np.ndarray:
        """Decoded (H, W, 3) uint8 image, cached after first use."""
        if i not in self._cache:
            self._cache[i] = datagen.load_image(self.image_paths[i])
        return self._cache[i]

    def input_tensor(self, i: int) -> np.ndarray:
        return image_to_input(self.image(i))


# --- training ---------------------------------------------------------


def _learning_rate(step: int, warm_steps: int, base_lr: float) -> float:
    """Linear warm ramp from 0.1*base to base, then constant."""
    if warm_steps > 0 and step < warm_steps:
        return base_lr * (0.1 + 0.9 * (step + 1) / warm_steps)
    return base_lr


def train(
    config: TrainConfig,
    train_set: TrainingSet,
    init: Optional[Checkpoint] = None,
) -> tuple[Checkpoint, list[CurvePoint]]:
    """Run the full schedule; returns the final checkpoint and the
    per-step loss curve.

    Pass `init` to refine an existing checkpoint instead of starting
    from fresh parameters (same schedule, same warm ramp).
    """
    if config.seed is None:
        raise ValueError("training requires a seed")
    if len(train_set) == 0:
        raise ValueError("training set is empty")

    if init is not None:
        spec = init.spec
        store = init.store.copy()
        start_epoch = init.epoch
    else:
        spec = default_network_spec(config.num_classes)
        store = None
        start_epoch = 0
    if spec.num_classes != config.num_classes:
        raise SpecMismatchError(
            f"config expects {config.num_classes} classes, "
            f"checkpoint has {spec.num_classes}"
        )

    layers = spec.build()
    root_seq = np.random.SeedSequence(config.seed)
    init_seq, shuffle_seq = root_seq.spawn(2)
    if store is None:
        store = nn.init_params(layers, init_seq)
    shuffle_rng = np.random.Generator(np.random.PCG64(shuffle_seq))

    n = len(train_set)
    steps_per_epoch = math.ceil(n / config.batch)
    warm_steps = config.warm_epochs * steps_per_epoch
    adam = nn.AdamState.for_params(store)
    rows, cols = spec.grid.rows, spec.grid.cols

    curve: list[CurvePoint] = []
    step = 0
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        for start in range(0, n, config.batch):
            idx = order[start : start + config.batch]
            x = np.stack([train_set.input_tensor(i) for i in idx])
            conf_t = np.stack([train_set.labels[i].confidence for i in idx]).astype(np.float32)
            depth_t = np.stack([train_set.labels[i].depth for i in idx]).astype(np.float32)
            prob_t = None
            if config.num_classes > 0:
                prob_t = np.stack(
                    [train_set.labels[i].class_prob for i in idx]
                ).astype(np.float32)

            out, caches = nn.forward_stack(layers, store, x, training=True)
            loss, grad_raw = loss_and_grad(out, conf_t, depth_t, prob_t)
            if not math.isfinite(loss.total):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch + 1}, step {step} "
                    f"(images {[train_set.image_paths[i].name for i in idx]})",
                    epoch=epoch,
                    step=step,
                    batch_indices=[int(i) for i in idx],
                )
            _, grads = nn.backward_stack(layers, store, caches, grad_raw)
            lr = _learning_rate(step, warm_steps, config.base_lr)
            nn.adam_step(adam, store, grads, lr)
            curve.append(CurvePoint(step=step, epoch=epoch, lr=lr, loss=loss))
            step += 1

    ckpt = Checkpoint(
        spec=spec, store=store, epoch=start_epoch + config.epochs, seed=config.seed
    )
    return ckpt, curve


def write_loss_curve(curve: Sequence[CurvePoint], path: str | Path) -> None:
    """Loss curve CSV: step, epoch, lr, l_total, l_d, l_c (l_p appended
    when the class loss is active)."""
    with_class = any(p.loss.class_prob is not None for p in curve)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["step", "epoch", "lr", "l_total", "l_d", "l_c"]
        if with_class:
            header.append("l_p")
        writer.writerow(header)
        for p in curve:
            row = [
                p.step,
                p.epoch,
                f"{p.lr:.8g}",
                f"{p.loss.total:.8g}",
                f"{p.loss.depth:.8g}",
                f"{p.loss.confidence:.8g}",
            ]
            if with_class:
                row.append(f"{(p.loss.class_prob or 0.0):.8g}")
            writer.writerow(row)


# --- checkpoint serialization ----------------------------------------
# Layout: magic, little-endian uint32 header length, JSON header, then
# all tensors as little-endian float32 in declaration order.


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    tensors = []
    chunks = []
    for kind, table in (("param", ckpt.store.params), ("buffer", ckpt.store.buffers)):
        for name, arr in table.items():
            tensors.append({"name": name, "kind": kind, "shape": list(arr.shape)})
            chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    blob = b"".join(chunks)
    header = {
        "version": 1,
        "spec": ckpt.spec.to_json(),
        "epoch": ckpt.epoch,
        "seed": ckpt.seed,
        "tensors": tensors,
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(blob)


def load_checkpoint(
    path: str | Path, expected_spec: Optional[NetworkSpec] = None
) -> Checkpoint:
    """Read a checkpoint; verifies blob length and digest.

    When `expected_spec` is given, a differing stored spec raises
    SpecMismatchError.
    """
    data = Path(path).read_bytes()
    if len(data) < len(_MAGIC) + 4 or data[: len(_MAGIC)] != _MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint file")
    off = len(_MAGIC)
    (header_len,) = struct.unpack_from("<I", data, off)
    off += 4
    if len(data) < off + header_len:
        raise CheckpointFormatError(f"{path}: truncated header")
    try:
        header = json.loads(data[off : off + header_len])
    except json.JSONDecodeError as exc:
        raise CheckpointFormatError(f"{path}: bad header: {exc}") from exc
    off += header_len
    blob = data[off:]

    expected_len = sum(
        4 * int(np.prod(t["shape"])) for t in header["tensors"]
    )
    if len(blob) != expected_len:
        raise CheckpointFormatError(
            f"{path}: blob length {len(blob)} != expected {expected_len}"
        )
    if hashlib.sha256(blob).hexdigest() != header["blob_sha256"]:
        raise CheckpointFormatError(f"{path}: blob digest mismatch")

    spec = NetworkSpec.from_json(header["spec"])
    if expected_spec is not None and spec != expected_spec:
        raise SpecMismatchError(
            f"{path}: stored spec does not match the expected network spec"
        )
    store = nn.ParamStore()
    flat = np.frombuffer(blob, dtype="<f4")
    pos = 0
    for t in header["tensors"]:
        count = int(np.prod(t["shape"]))
        arr = flat[pos : pos + count].reshape(t["shape"]).astype(np.float32)
        pos += count
        if t["kind"] == "param":
            store.add_param(t["name"], arr)
        else:
            store.add_buffer(t["name"], arr)
    return Checkpoint(
        spec=spec, store=store, epoch=header["epoch"], seed=header["seed"]
    )
