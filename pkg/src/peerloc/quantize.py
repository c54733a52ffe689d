"""int8 post-training quantization and integer-arithmetic inference.

Scheme: symmetric per-tensor scales (zero point 0), max-abs calibration.
Batchnorm is folded into the preceding convolution first, so the
quantized graph is conv/relu/maxpool only.  Integer accumulation is
32-bit; on the host it is carried in float64, which is exact for these
magnitudes, and the 32-bit range is enforced explicitly.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import model as model_mod
from . import nn
from .geometry import GridMap

_MAGIC = b"PLOCQNT1"
_SCALE_FLOOR = 1e-8
_INT32_MAX = 2**31 - 1


class ZeroVarianceError(ValueError):
    """A batchnorm channel has zero running variance; statistics are unusable."""


class CalibrationError(ValueError):
    """Calibration inputs missing or unusable."""


class AccumulatorOverflowError(ArithmeticError):
    """A 32-bit integer accumulator would overflow; calibration is bad."""


@dataclass
class QuantParams:
    """Per-tensor scales; value = scale * int8 code (zero point 0)."""

    input_scale: float
    weight_scales: dict[str, float]
    act_scales: dict[str, float]  # conv-output scales, keyed by conv name

    def to_json(self) -> dict:
        return {
            "input_scale": self.input_scale,
            "weight_scales": self.weight_scales,
            "act_scales": self.act_scales,
        }

    @classmethod
    def from_json(cls, d: dict) -> "QuantParams":
        return cls(
            input_scale=float(d["input_scale"]),
            weight_scales={k: float(v) for k, v in d["weight_scales"].items()},
            act_scales={k: float(v) for k, v in d["act_scales"].items()},
        )


@dataclass
class QuantizedModel:
    """Folded network with int8 weights and int32 biases.

    Bias codes live on the scale input_scale_of_conv * weight_scale.
    """

    spec: model_mod.NetworkSpec
    weights: dict[str, np.ndarray]  # int8
    biases: dict[str, np.ndarray]  # int32
    qparams: QuantParams


def quantize_symmetric(x: np.ndarray, scale: float) -> np.ndarray:
    """clamp(round(x / scale), -127, 127); rounding is to-nearest-even."""
    return np.clip(np.rint(x / scale), -127, 127)


def max_abs_scale(x: np.ndarray) -> float:
    return max(float(np.abs(x).max()) / 127.0, _SCALE_FLOOR)


def fold_batchnorm(ckpt: model_mod.Checkpoint) -> model_mod.Checkpoint:
    """Absorb each batchnorm into the convolution before it.

    The float forward map is preserved up to rounding; requires every
    batchnorm to directly follow a conv and all running variances to be
    positive.
    """
    layers = ckpt.spec.build()
    specs = list(ckpt.spec.layers)
    new_specs: list[nn.LayerSpec] = []
    store = nn.ParamStore()
    i = 0
    while i < len(layers):
        layer = layers[i]
        if isinstance(layer, nn.BatchNorm2d):
            raise ValueError(f"{layer.name} does not follow a convolution")
        if isinstance(layer, nn.Conv2d):
            w = ckpt.store.params[layer.weight_name]
            b = ckpt.store.params[layer.bias_name]
            new_specs.append(specs[i])
            if i + 1 < len(layers) and isinstance(layers[i + 1], nn.BatchNorm2d):
                bn = layers[i + 1]
                rv = ckpt.store.buffers[bn.var_name]
                if np.any(rv <= 0.0):
                    raise ZeroVarianceError(
                        f"{bn.name}: running variance has non-positive channels"
                    )
                gamma = ckpt.store.params[bn.gamma_name]
                beta = ckpt.store.params[bn.beta_name]
                rm = ckpt.store.buffers[bn.mean_name]
                factor = gamma / np.sqrt(rv + bn.eps)
                w = w * factor[:, None, None, None]
                b = beta + (b - rm) * factor
                i += 1  # consume the batchnorm
            store.add_param(layer.weight_name, w.astype(np.float32))
            store.add_param(layer.bias_name, b.astype(np.float32))
            i += 1
            continue
        new_specs.append(specs[i])
        i += 1

    folded_spec = model_mod.NetworkSpec(
        layers=tuple(new_specs),
        in_channels=ckpt.spec.in_channels,
        num_classes=ckpt.spec.num_classes,
        grid=ckpt.spec.grid,
    )
    return model_mod.Checkpoint(
        spec=folded_spec, store=store, epoch=ckpt.epoch, seed=ckpt.seed
    )


def calibrate(
    ckpt: model_mod.Checkpoint, images: Sequence[np.ndarray]
) -> QuantParams:
    """Max-abs scales from a calibration sweep.

    The checkpoint must already be batchnorm-folded.  Activation scales
    are recorded at every conv output (pre-relu); relu and maxpool only
    shrink ranges, so they reuse the scale of the tensor feeding them.
    """
    if any(s.kind == "batchnorm" for s in ckpt.spec.layers):
        raise CalibrationError("fold batchnorm before calibration")
    if len(images) == 0:
        raise CalibrationError("at least one calibration image is required")
    layers = ckpt.spec.build()
    weight_scales = {
        layer.name: max_abs_scale(ckpt.store.params[layer.weight_name])
        for layer in layers
        if isinstance(layer, nn.Conv2d)
    }
    input_max = 0.0
    act_max = {layer.name: 0.0 for layer in layers if isinstance(layer, nn.Conv2d)}
    for image in images:
        x = model_mod.image_to_input(image)[None]
        input_max = max(input_max, float(np.abs(x).max()))
        for layer in layers:
            x, _ = layer.forward(ckpt.store, x, training=False)
            if isinstance(layer, nn.Conv2d):
                act_max[layer.name] = max(
                    act_max[layer.name], float(np.abs(x).max())
                )
    return QuantParams(
        input_scale=max(input_max / 127.0, _SCALE_FLOOR),
        weight_scales=weight_scales,
        act_scales={k: max(v / 127.0, _SCALE_FLOOR) for k, v in act_max.items()},
    )


def build_quantized(
    ckpt: model_mod.Checkpoint, qparams: QuantParams
) -> QuantizedModel:
    """Quantize a folded checkpoint's weights and biases."""
    layers = ckpt.spec.build()
    weights: dict[str, np.ndarray] = {}
    biases: dict[str, np.ndarray] = {}
    in_scale = qparams.input_scale
    for layer in layers:
        if not isinstance(layer, nn.Conv2d):
            continue
        sw = qparams.weight_scales[layer.name]
        w_q = quantize_symmetric(ckpt.store.params[layer.weight_name], sw)
        weights[layer.name] = w_q.astype(np.int8)
        bias_scale = in_scale * sw
        b_q = np.rint(ckpt.store.params[layer.bias_name] / bias_scale)
        if np.any(np.abs(b_q) > _INT32_MAX):
            raise AccumulatorOverflowError(f"{layer.name}: bias exceeds int32")
        biases[layer.name] = b_q.astype(np.int32)
        in_scale = qparams.act_scales[layer.name]
    return QuantizedModel(
        spec=ckpt.spec, weights=weights, biases=biases, qparams=qparams
    )


def quantize_checkpoint(
    ckpt: model_mod.Checkpoint, calib_images: Sequence[np.ndarray]
) -> QuantizedModel:
    """Fold, calibrate, quantize: the whole deployment path."""
    folded = fold_batchnorm(ckpt)
    return build_quantized(folded, calibrate(folded, calib_images))


def quantized_forward(qmodel: QuantizedModel, image: np.ndarray) -> GridMap:
    """Integer inference: int8 tensors, 32-bit accumulation, integer relu
    and maxpool; the final conv output is dequantized to floats and the
    confidence channel passed through the sigmoid."""
    x = model_mod.image_to_input(image)[None].astype(np.float64)
    q = quantize_symmetric(x, qmodel.qparams.input_scale)
    cur_scale = qmodel.qparams.input_scale

    layers = qmodel.spec.build()
    conv_names = [l.name for l in layers if isinstance(l, nn.Conv2d)]
    last_conv = conv_names[-1]
    out_float: Optional[np.ndarray] = None
    for layer in layers:
        if isinstance(layer, nn.Conv2d):
            w_q = qmodel.weights[layer.name].astype(np.float64)
            b_q = qmodel.biases[layer.name].astype(np.float64)
            cols = nn._im2col(q, layer.kernel)
            acc = np.matmul(w_q.reshape(layer.out_channels, -1), cols)
            acc += b_q[None, :, None]
            if float(np.abs(acc).max()) > _INT32_MAX:
                raise AccumulatorOverflowError(
                    f"{layer.name}: 32-bit accumulator overflow"
                )
            b, _, hw = acc.shape
            h = q.shape[2]
            acc = acc.reshape(b, layer.out_channels, h, hw // h)
            acc_scale = cur_scale * qmodel.qparams.weight_scales[layer.name]
            if layer.name == last_conv:
                out_float = acc * acc_scale
            else:
                out_scale = qmodel.qparams.act_scales[layer.name]
                q = np.clip(np.rint(acc * (acc_scale / out_scale)), -127, 127)
                cur_scale = out_scale
        elif isinstance(layer, nn.ReLU):
            q = np.maximum(q, 0.0)
        elif isinstance(layer, nn.MaxPool2d):
            q, _ = layer.forward(None, q, training=False)  # type: ignore[arg-type]
        else:
            raise ValueError(f"unsupported layer {layer.kind} in quantized graph")
    assert out_float is not None
    raw = out_float[0]
    conf = model_mod.sigmoid(raw[0])
    depth = raw[1].copy()
    probs = None
    if qmodel.spec.num_classes > 0:
        probs = np.moveaxis(model_mod.sigmoid(raw[2:]), 0, -1)
    return GridMap(confidence=conf, depth=depth, class_prob=probs)


def compare_float_quant(
    ckpt: model_mod.Checkpoint,
    qmodel: QuantizedModel,
    images: Sequence[np.ndarray],
    quant_forward=None,
) -> dict:
    """Per-image float-vs-int8 agreement report.

    For each image: max absolute confidence difference, whether the
    confidence argmax cell agrees, and the absolute difference of the
    depth value each model reports at its own argmax cell.
    `quant_forward` is injectable so the comparison path itself can be
    validated against the float model.
    """
    if quant_forward is None:
        quant_forward = quantized_forward
    conf_diffs = []
    agree = []
    depth_diffs = []
    float_maps = model_mod.forward_images(ckpt, list(images))
    for image, fmap in zip(images, float_maps):
        qmap = quant_forward(qmodel, image)
        conf_diffs.append(float(np.abs(fmap.confidence - qmap.confidence).max()))
        f_cell = np.unravel_index(np.argmax(fmap.confidence), fmap.confidence.shape)
        q_cell = np.unravel_index(np.argmax(qmap.confidence), qmap.confidence.shape)
        agree.append(bool(f_cell == q_cell))
        depth_diffs.append(
            float(abs(fmap.depth[f_cell] - qmap.depth[q_cell]))
        )
    n = len(images)
    return {
        "n_images": n,
        "conf_max_abs_diff": conf_diffs,
        "argmax_agree": agree,
        "depth_at_argmax_diff": depth_diffs,
        "argmax_agree_rate": (sum(agree) / n) if n else 0.0,
    }


# --- serialization ----------------------------------------------------
# Layout: magic, uint32 header length, JSON header, int8 weight blob,
# little-endian int32 bias blob.


def save_quantized(qmodel: QuantizedModel, path: str | Path) -> None:
    w_order = list(qmodel.weights)
    w_blob = b"".join(qmodel.weights[n].tobytes() for n in w_order)
    b_blob = b"".join(
        np.ascontiguousarray(qmodel.biases[n], dtype="<i4").tobytes() for n in w_order
    )
    header = {
        "version": 1,
        "spec": qmodel.spec.to_json(),
        "qparams": qmodel.qparams.to_json(),
        "convs": [
            {"name": n, "weight_shape": list(qmodel.weights[n].shape)} for n in w_order
        ],
        "weights_sha256": hashlib.sha256(w_blob).hexdigest(),
        "biases_sha256": hashlib.sha256(b_blob).hexdigest(),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(w_blob)
        fh.write(b_blob)


def load_quantized(path: str | Path) -> QuantizedModel:
    data = Path(path).read_bytes()
    if len(data) < len(_MAGIC) + 4 or data[: len(_MAGIC)] != _MAGIC:
        raise model_mod.CheckpointFormatError(f"{path}: not a quantized model file")
    off = len(_MAGIC)
    (header_len,) = struct.unpack_from("<I", data, off)
    off += 4
    try:
        header = json.loads(data[off : off + header_len])
    except json.JSONDecodeError as exc:
        raise model_mod.CheckpointFormatError(f"{path}: bad header: {exc}") from exc
    off += header_len

    weights = {}
    biases = {}
    w_len = sum(int(np.prod(c["weight_shape"])) for c in header["convs"])
    b_len = 4 * sum(c["weight_shape"][0] for c in header["convs"])
    if len(data) - off != w_len + b_len:
        raise model_mod.CheckpointFormatError(f"{path}: blob length mismatch")
    w_blob = data[off : off + w_len]
    b_blob = data[off + w_len :]
    if hashlib.sha256(w_blob).hexdigest() != header["weights_sha256"]:
        raise model_mod.CheckpointFormatError(f"{path}: weight digest mismatch")
    if hashlib.sha256(b_blob).hexdigest() != header["biases_sha256"]:
        raise model_mod.CheckpointFormatError(f"{path}: bias digest mismatch")
    pos = 0
    flat_w = np.frombuffer(w_blob, dtype=np.int8)
    for c in header["convs"]:
        count = int(np.prod(c["weight_shape"]))
        weights[c["name"]] = flat_w[pos : pos + count].reshape(c["weight_shape"]).copy()
        pos += count
    flat_b = np.frombuffer(b_blob, dtype="<i4")
    pos = 0
    for c in header["convs"]:
        count = c["weight_shape"][0]
        biases[c["name"]] = flat_b[pos : pos + count].astype(np.int32)
        pos += count
    return QuantizedModel(
        spec=model_mod.NetworkSpec.from_json(header["spec"]),
        weights=weights,
        biases=biases,
        qparams=QuantParams.from_json(header["qparams"]),
    )
