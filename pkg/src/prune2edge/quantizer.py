"""Post-training int8 affine quantization.

``real = (q - zero_point) * scale``.  Weights use a symmetric per-tensor
scheme (zero_point 0, codes in [-127, 127]); activations get an asymmetric
scheme over [-128, 127] calibrated from min/max of one batch.  Inference is
simulated: int8 weights are dequantized and layer inputs are passed through
quantize/dequantize before the float matmul.  Biases stay float32.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nncore
from .errors import ConfigError
from .nncore import Model

ROUNDING_MODE = "half-away-from-zero"
WEIGHT_RANGE = (-127, 127)
ACTIVATION_RANGE = (-128, 127)


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int = 0
    role: str = "weight"

    def __post_init__(self):
        if not self.scale > 0 or not np.isfinite(self.scale):
            raise ConfigError(f"scale must be positive and finite, got {self.scale}")
        if self.role == "weight" and self.zero_point != 0:
            raise ConfigError("weight zero_point must be 0")
        if self.role == "activation" and not -128 <= self.zero_point <= 127:
            raise ConfigError(f"activation zero_point {self.zero_point} outside [-128, 127]")
        if self.role not in ("weight", "activation"):
            raise ConfigError(f"unknown role {self.role!r}")

    @property
    def qrange(self) -> tuple[int, int]:
        return WEIGHT_RANGE if self.role == "weight" else ACTIVATION_RANGE


@dataclass
class QuantizedTensor:
    data: np.ndarray  # int8
    params: QuantParams

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def calibrate_weight_params(weights) -> QuantParams:
    w = np.asarray(weights, dtype=np.float64)
    if w.size == 0:
        raise ConfigError("cannot calibrate an empty tensor")
    scale = float(np.max(np.abs(w))) / 127
    # all zeros, or a subnormal peak whose scale underflows: any scale >= peak works
    return QuantParams(scale if scale > 0 else 1.0, 0, "weight")


def calibrate_activation_params(samples) -> QuantParams:
    """Map the observed ``[min, max]`` onto ``[-128, 127]``.

    The range is widened to contain 0 so the zero point never clamps and
    every value inside the range round-trips within ``scale / 2``.  A
    constant batch gets scale 1 and a zero_point that sends the (rounded)
    constant to code 0.
    """
    s = np.asarray(samples, dtype=np.float64)
    if s.size == 0:
        raise ConfigError("empty calibration batch")
    lo, hi = float(s.min()), float(s.max())
    if hi == lo:
        zp = int(np.clip(-round_half_away(np.float64(lo)), -128, 127))
        return QuantParams(1.0, zp, "activation")
    lo, hi = min(lo, 0.0), max(hi, 0.0)
    scale = (hi - lo) / 255
    if not scale > 0:  # range so small the scale underflows
        scale = 1.0
    zp = int(np.clip(round_half_away(np.float64(-128 - lo / scale)), -128, 127))
    return QuantParams(scale, zp, "activation")


def quantize(t, params: QuantParams) -> QuantizedTensor:
    r = np.asarray(t, dtype=np.float64)
    lo, hi = params.qrange
    q = np.clip(round_half_away(r / params.scale) + params.zero_point, lo, hi)
    return QuantizedTensor(q.astype(np.int8), params)


def dequantize(q: QuantizedTensor, dtype=np.float32) -> np.ndarray:
    real = (q.data.astype(np.float64) - q.params.zero_point) * q.params.scale
    return real.astype(dtype)


def fake_quantize(x: np.ndarray, params: QuantParams) -> np.ndarray:
    return dequantize(quantize(x, params), dtype=x.dtype)


def layer_inputs(model: Model, inputs) -> list[np.ndarray]:
    """Float activations entering each layer, in order."""
    x = nncore._check_inputs(model, inputs)
    acts, _ = nncore._forward_cached(model, x)
    return acts[:-1]


def quantize_model(model: Model, calibration_batch) -> Model:
    """Return an int8 copy of ``model``.

    Weight matrices become :class:`QuantizedTensor` (``weights`` keeps their
    dequantized float32 view).  Activation params are recorded per layer
    input.  Entries that quantize to 0 are folded into the mask so the mask
    always equals the nonzero pattern of a quantized pruned model.
    """
    calib = np.asarray(calibration_batch)
    if calib.size == 0 or len(calib) == 0:
        raise ConfigError("empty calibration batch")
    if model.is_quantized:
        return model.copy()
    float_model = model.copy()
    float_model.act_params = None
    inputs = layer_inputs(float_model, calib)

    out = model.copy()
    out.qweights = [quantize(w, calibrate_weight_params(w)) for w in model.weights]
    out.weights = [dequantize(q, dtype=w.dtype) for q, w in zip(out.qweights, model.weights)]
    out.act_params = [calibrate_activation_params(a) for a in inputs]
    if model.masks is not None:
        out.masks = [(q.data != 0).astype(np.uint8) for q in out.qweights]
    out.metadata = {**model.metadata, "quantized": True, "rounding_mode": ROUNDING_MODE,
                    "calibration_samples": int(len(calib))}
    out.validate()
    return out
