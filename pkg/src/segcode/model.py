"""Two-stream activity classifier.

Per-frame conv encoders for the RGB and color-coded mask streams, scalar
stream gates, concatenation (RGB half first), a single bidirectional LSTM
layer, sigmoid-scored frame attention with normalized pooling, and a linear
softmax head. ``single_stream=True`` keeps only the RGB path.

Parameter names are stable and double as checkpoint keys::

    rgb_encoder.conv{i}.weight / .bias     (filters, in_ch, k, k) / (filters,)
    mask_encoder.conv{i}.weight / .bias    two-stream only
    gate.theta_rgb, gate.theta_mask        scalars, two-stream only
    lstm.fwd.w_ih / .w_hh / .bias          (m, 4u) / (u, 4u) / (4u,)
    lstm.bwd.w_ih / .w_hh / .bias
    attention.v, attention.bias            (2u,) / ()
    classifier.weight, classifier.bias     (2u, C) / (C,)
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import DimensionError, LSTMParams, Tensor

SUPPORTED_RESOLUTIONS = (8, 16, 32, 64, 112, 224)
DEFAULT_STAGES = ((8, 3, 1), (16, 3, 1), (32, 3, 1))
CHECKPOINT_VERSION = 1


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    num_classes: int
    resolution: int = 64
    k: int = 40
    hidden: int = 32
    stages: list = field(default_factory=lambda: [list(s) for s in DEFAULT_STAGES])
    single_stream: bool = False
    forget_bias: float = 1.0

    def __post_init__(self):
        self.stages = [list(map(int, s)) for s in self.stages]
        if not self.stages:
            raise ModelError("encoder needs at least one conv stage")
        side = self.resolution
        for filters, kernel, stride in self.stages:
            side = (side + 2 * (kernel // 2) - kernel) // stride + 1
            side //= 2
            if side < 1:
                raise ModelError(
                    f"encoder stages {self.stages} shrink {self.resolution}px input below 1px")

    @property
    def feature_size(self) -> int:
        return self.stages[-1][0]

    @property
    def lstm_input(self) -> int:
        return self.feature_size * (1 if self.single_stream else 2)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        return cls(**obj)


def _uniform(rng, shape, fan_in, dtype):
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_params(config: ModelConfig, seed: int = 0, dtype=None) -> dict[str, Tensor]:
    """Weights uniform in +-sqrt(1/fan_in); biases zero except the LSTM forget gate."""
    dtype = np.dtype(dtype or T.get_default_dtype())
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    streams = ["rgb"] if config.single_stream else ["rgb", "mask"]
    for s in streams:
        in_ch = 3
        for i, (filters, kernel, _stride) in enumerate(config.stages):
            fan_in = in_ch * kernel * kernel
            params[f"{s}_encoder.conv{i}.weight"] = _uniform(rng, (filters, in_ch, kernel, kernel), fan_in, dtype)
            params[f"{s}_encoder.conv{i}.bias"] = np.zeros(filters, dtype)
            in_ch = filters
    if not config.single_stream:
        params["gate.theta_rgb"] = np.zeros((), dtype)
        params["gate.theta_mask"] = np.zeros((), dtype)
    u, m = config.hidden, config.lstm_input
    for d in ("fwd", "bwd"):
        params[f"lstm.{d}.w_ih"] = _uniform(rng, (m, 4 * u), m, dtype)
        params[f"lstm.{d}.w_hh"] = _uniform(rng, (u, 4 * u), u, dtype)
        b = np.zeros(4 * u, dtype)
        b[u:2 * u] = config.forget_bias
        params[f"lstm.{d}.bias"] = b
    params["attention.v"] = _uniform(rng, (2 * u,), 2 * u, dtype)
    params["attention.bias"] = np.zeros((), dtype)
    params["classifier.weight"] = _uniform(rng, (2 * u, config.num_classes), 2 * u, dtype)
    params["classifier.bias"] = np.zeros(config.num_classes, dtype)
    return {k: Tensor(v, requires_grad=True, dtype=dtype, name=k) for k, v in params.items()}


# ---------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------

def frames_to_input(frames: np.ndarray, dtype=None) -> Tensor:
    """uint8 (..., h, w, 3) -> float (..., 3, h, w) scaled to [0, 1]."""
    arr = np.asarray(frames)
    x = np.moveaxis(arr, -1, -3).astype(dtype or T.get_default_dtype()) / 255.0
    return Tensor(x, dtype=x.dtype)


def encode_frames(x: Tensor, params: dict[str, Tensor], prefix: str, stages) -> Tensor:
    """(n, 3, h, w) frames -> (n, d) features: [conv -> relu -> 2x2 max-pool]* -> global mean."""
    if x.ndim != 4 or x.shape[1] != 3:
        raise DimensionError(f"{prefix}: expected (n, 3, h, w) frames, got {x.shape}")
    for i, (_filters, kernel, stride) in enumerate(stages):
        x = T.conv2d(x, params[f"{prefix}.conv{i}.weight"], params[f"{prefix}.conv{i}.bias"],
                     stride=stride, padding=kernel // 2)
        x = T.max_pool2d(T.relu(x), 2)
    return T.global_avg_pool(x)


def stream_gates(params: dict[str, Tensor]) -> tuple[Tensor, Tensor]:
    return T.sigmoid(params["gate.theta_rgb"]), T.sigmoid(params["gate.theta_mask"])


def gate_and_concat(f_rgb: Tensor, f_mask: Tensor, eta_rgb: Tensor, eta_mask: Tensor) -> Tensor:
    """(eta_rgb * f_rgb) || (eta_mask * f_mask) along the feature axis."""
    if f_rgb.shape != f_mask.shape:
        raise DimensionError(f"stream features differ in shape: {f_rgb.shape} vs {f_mask.shape}")
    return T.concat_last(f_rgb * eta_rgb, f_mask * eta_mask)


def lstm_direction(params: dict[str, Tensor], name: str) -> LSTMParams:
    return LSTMParams(params[f"lstm.{name}.w_ih"], params[f"lstm.{name}.w_hh"], params[f"lstm.{name}.bias"])


def _run_lstm(seq: Tensor, cell: LSTMParams, order) -> list[Tensor]:
    b = seq.shape[0]
    h = Tensor(np.zeros((b, cell.units), seq.dtype), dtype=seq.dtype)
    c = h
    outs = {}
    for t in order:
        h, c = T.lstm_cell(seq[:, t, :], h, c, cell)
        outs[t] = h
    return [outs[t] for t in range(seq.shape[1])]


def bilstm(seq: Tensor, fwd: LSTMParams, bwd: LSTMParams) -> Tensor:
    """(b, k, m) -> (b, k, 2u); row n is forward state at n || backward state at n."""
    if seq.ndim != 3 or seq.shape[-1] != fwd.input_size:
        raise DimensionError(f"bilstm: sequence {seq.shape} does not match input width {fwd.input_size}")
    k = seq.shape[1]
    hf = _run_lstm(seq, fwd, range(k))
    hb = _run_lstm(seq, bwd, range(k - 1, -1, -1))
    return T.concat_last(T.stack(hf, axis=1), T.stack(hb, axis=1))


def attend_and_pool(hseq: Tensor, v: Tensor, bias: Tensor) -> tuple[Tensor, Tensor]:
    """Frame weights a[n] = sigmoid(v . H[n] + bias); pooled = sum a[n] H[n] / sum a[n].

    ``hseq`` is (b, k, 2u); returns pooled (b, 2u) and weights (b, k).
    """
    scores = T.matmul(hseq, T.reshape(v, (-1, 1)))[..., 0] + bias
    a = T.sigmoid(scores)
    num = (hseq * T.reshape(a, a.shape + (1,))).sum(axis=1)
    den = T.reshape(a.sum(axis=1), (a.shape[0], 1))
    return num / den, a


# ---------------------------------------------------------------------
# network
# ---------------------------------------------------------------------

class TwoStreamNet:
    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None, seed: int = 0):
        self.config = config
        self.params = params if params is not None else init_params(config, seed)
        expected = set(init_params_names(config))
        if set(self.params) != expected:
            missing = sorted(expected - set(self.params))
            extra = sorted(set(self.params) - expected)
            raise ModelError(f"parameter set mismatch: missing {missing}, unexpected {extra}")

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def astype(self, dtype) -> "TwoStreamNet":
        params = {k: Tensor(v.data.astype(dtype), requires_grad=True, dtype=dtype, name=k)
                  for k, v in self.params.items()}
        return TwoStreamNet(self.config, params)

    def _encode(self, frames, prefix) -> Tensor:
        cfg = self.config
        x = frames if isinstance(frames, Tensor) else frames_to_input(frames, self.dtype)
        if x.ndim == 4:  # single clip
            x = T.reshape(x, (1,) + x.shape)
        b, k = x.shape[:2]
        if x.shape[-2:] != (cfg.resolution, cfg.resolution):
            raise DimensionError(
                f"{prefix}: frames are {x.shape[-2]}x{x.shape[-1]}, model expects "
                f"{cfg.resolution}x{cfg.resolution}")
        feats = encode_frames(T.reshape(x, (b * k,) + x.shape[2:]), self.params, prefix, cfg.stages)
        return T.reshape(feats, (b, k, feats.shape[-1]))

    def features(self, rgb, mask=None) -> Tensor:
        """LSTM input sequence (b, k, m)."""
        f_rgb = self._encode(rgb, "rgb_encoder")
        if self.config.single_stream:
            return f_rgb
        if mask is None:
            raise ModelError("two-stream model needs a mask stream")
        f_mask = self._encode(mask, "mask_encoder")
        return gate_and_concat(f_rgb, f_mask, *stream_gates(self.params))

    def logits(self, rgb, mask=None, return_attention: bool = False):
        p = self.params
        hseq = bilstm(self.features(rgb, mask), lstm_direction(p, "fwd"), lstm_direction(p, "bwd"))
        pooled, a = attend_and_pool(hseq, p["attention.v"], p["attention.bias"])
        out = T.linear(pooled, p["classifier.weight"], p["classifier.bias"])
        return (out, a) if return_attention else out

    def forward(self, rgb, mask=None) -> np.ndarray:
        """Class probabilities, shape (b, C) (or (C,) for a single unbatched clip)."""
        single = np.asarray(rgb.data if isinstance(rgb, Tensor) else rgb).ndim == 4
        with T.no_grad():
            probs = T.softmax(self.logits(rgb, mask)).data
        return probs[0] if single else probs

    __call__ = forward

    def eta(self) -> tuple[float, float] | None:
        if self.config.single_stream:
            return None
        with T.no_grad():
            r, m = stream_gates(self.params)
        return float(r.data), float(m.data)

    # -- persistence ---------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            self.params[k].data = np.array(v, dtype=self.params[k].dtype).reshape(self.params[k].shape)


def init_params_names(config: ModelConfig) -> list[str]:
    names = []
    for s in (["rgb"] if config.single_stream else ["rgb", "mask"]):
        for i in range(len(config.stages)):
            names += [f"{s}_encoder.conv{i}.weight", f"{s}_encoder.conv{i}.bias"]
    if not config.single_stream:
        names += ["gate.theta_rgb", "gate.theta_mask"]
    for d in ("fwd", "bwd"):
        names += [f"lstm.{d}.w_ih", f"lstm.{d}.w_hh", f"lstm.{d}.bias"]
    names += ["attention.v", "attention.bias", "classifier.weight", "classifier.bias"]
    return names


def checkpoint_json(net: TwoStreamNet, extra_config: dict | None = None) -> dict:
    config = {"model": net.config.to_json(), **(extra_config or {})}
    tensors = {k: {"shape": list(v.shape), "data": [float(x) for x in v.data.reshape(-1)]}
               for k, v in net.params.items()}
    return {"format_version": CHECKPOINT_VERSION, "config": config, "tensors": tensors}


def save_checkpoint(path, net: TwoStreamNet, extra_config: dict | None = None) -> None:
    Path(path).write_text(json.dumps(checkpoint_json(net, extra_config), sort_keys=True) + "\n")


def load_checkpoint(path) -> tuple[TwoStreamNet, dict]:
    raw = json.loads(Path(path).read_text())
    if raw.get("format_version") != CHECKPOINT_VERSION:
        raise ModelError(f"{path}: unsupported checkpoint version {raw.get('format_version')}")
    config = ModelConfig.from_json(raw["config"]["model"])
    params = {}
    for name, t in raw["tensors"].items():
        data = np.asarray(t["data"], dtype=np.float32).reshape(t["shape"])
        params[name] = Tensor(data, requires_grad=True, dtype=np.float32, name=name)
    return TwoStreamNet(config, params), raw["config"]
