"""ARPA-N assembly with ablation flags, parameter counting and checkpoints.

Flags (all independent switches):

====  ==========================================================
S     sigmoid (instead of ReLU) after the last convolution
D     second initial conv block (5x5 with K, else 3x3)
K     7x7 / 5x5 initial kernels (3x3 / 3x3 without)
B     spatial dropout in the initial (pre-pooling) blocks
G     additive |Gaussian| input noise during training
M     adaptive max pooling to a fixed grid (fixed 2x4 pooling without)
All   spatial dropout after every convolution
R     random time-axis flips of training inputs (augmentation, not a layer)
====  ==========================================================

``attention=False`` gives the ARP-N variant without CBAM spatial gates.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .dsp import Spectrogram
from .errors import CheckpointError, CorruptCheckpointError, DataError, ShapeMismatchError
from .nn import layers as L
from .nn import ops
from .nn.tensor import Tensor, no_grad
from .rng import RandomState

FLAGS = ("S", "D", "K", "B", "G", "M", "All", "R")
FULL = frozenset(FLAGS) - {"R"}
CHECKPOINT_FORMAT = "getnet-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ArpanConfig:
    flags: frozenset = FULL
    attention: bool = True
    width_scale: float = 1.0
    input_shape: tuple[int, int] = (128, 256)
    pool_grid: tuple[int, int] = (64, 64)
    dropout_p: float = 0.2
    noise_sigma: float = 0.05
    dense_units: int = 256
    seed: int = 0

    def __post_init__(self):
        flags = frozenset(self.flags)
        unknown = flags - set(FLAGS)
        if unknown:
            raise DataError(f"unknown architecture flags: {sorted(unknown)}")
        object.__setattr__(self, "flags", flags)
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "pool_grid", tuple(int(v) for v in self.pool_grid))
        if self.width_scale <= 0 or self.width_scale * 64 < 1:
            raise DataError(f"width_scale must satisfy width_scale * 64 >= 1, got {self.width_scale}")
        if not 0 <= self.dropout_p < 1:
            raise DataError("dropout_p must be in [0, 1)")
        if self.noise_sigma < 0:
            raise DataError("noise_sigma must be nonnegative")

    def has(self, flag: str) -> bool:
        return flag in self.flags

    def width(self, base: int) -> int:
        return max(1, int(round(base * self.width_scale)))

    def without(self, *flags: str) -> "ArpanConfig":
        return replace(self, flags=self.flags - set(flags))

    def with_flags(self, *flags: str) -> "ArpanConfig":
        return replace(self, flags=self.flags | set(flags))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["flags"] = sorted(self.flags, key=FLAGS.index)
        d["input_shape"] = list(self.input_shape)
        d["pool_grid"] = list(self.pool_grid)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArpanConfig":
        d = dict(d)
        d["flags"] = frozenset(d.get("flags", FULL))
        for key in ("input_shape", "pool_grid"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def vanilla(**kw) -> ArpanConfig:
    """Plain CNN baseline: no flags, no attention."""
    return ArpanConfig(flags=frozenset(), attention=False, **kw)


@dataclass
class PlanRow:
    name: str
    kind: str
    out_shape: tuple
    params: int


@dataclass
class Model:
    config: ArpanConfig
    net: L.Sequential
    plan: list[PlanRow] = field(default_factory=list)

    @property
    def layers(self) -> list[L.Layer]:
        return self.net.layers

    def named_params(self) -> dict[str, Tensor]:
        return self.net.named_params()

    def named_buffers(self) -> dict[str, np.ndarray]:
        return self.net.named_buffers()

    def forward_tensor(self, x: Tensor, mode: str = ops.INFER,
                       rs: RandomState | None = None) -> Tensor:
        """(N, H, W, 1) input -> (N, 1) probabilities, with graph if enabled."""
        if tuple(x.shape[1:3]) != self.config.input_shape:
            raise DataError(f"input shape {tuple(x.shape[1:3])} != configured "
                            f"{self.config.input_shape}")
        return self.net.forward(x, mode, rs)

    def astype(self, dtype) -> "Model":
        """Deep copy with all parameters and buffers cast to ``dtype``."""
        twin = build(self.config, dtype=dtype)
        copy_weights(self, twin)
        return twin

    def without_attention(self) -> "Model":
        """A view with every attention gate bypassed (parameters shared)."""
        twin = Model(self.config, L.Sequential([replace(layer, enabled=False)
                                                if isinstance(layer, L.SpatialAttention)
                                                else layer for layer in self.layers]), self.plan)
        return twin

    def plan_table(self) -> str:
        """Human-readable layer table with output shapes and parameter counts."""
        lines = [f"{'layer':<14}{'kind':<20}{'output':<18}{'params':>10}"]
        for row in self.plan:
            lines.append(f"{row.name:<14}{row.kind:<20}{'x'.join(map(str, row.out_shape)):<18}"
                         f"{row.params:>10,}")
        lines.append(f"{'total':<52}{count_parameters(self):>10,}")
        return "\n".join(lines)


def _initial_kernels(cfg: ArpanConfig) -> tuple[int, int]:
    return (7, 5) if cfg.has("K") else (3, 3)


def build(config: ArpanConfig, dtype=np.float32) -> Model:
    """Assemble the network and propagate shapes; deterministic in ``config.seed``."""
    gen = RandomState(config.seed).child("init").generator()
    c0, c1, c2, dense_units = (config.width(64), config.width(128), config.width(256),
                               config.width(config.dense_units))
    k1, k2 = _initial_kernels(config)
    early_drop = config.has("B") or config.has("All")
    seq: list[L.Layer] = []

    if config.has("G"):
        seq.append(L.GaussianNoise("noise", config.noise_sigma))
    cin = 1
    blocks = [("b1", k1)] + ([("b2", k2)] if config.has("D") else [])
    for tag, k in blocks:
        seq.append(L.Conv2d.create(f"{tag}_conv", k, k, cin, c0, gen, dtype=dtype))
        seq.append(L.BatchNorm.create(f"{tag}_bn", c0, dtype=dtype))
        if early_drop:
            seq.append(L.SpatialDropout(f"{tag}_drop", config.dropout_p))
        seq.append(L.Activation(f"{tag}_relu", "relu"))
        if config.attention:
            seq.append(L.SpatialAttention.create(f"{tag}_att", gen, dtype=dtype))
        cin = c0
    if config.has("M"):
        seq.append(L.AdaptiveMaxPool("pool", *config.pool_grid))
    else:
        seq.append(L.MaxPool("pool", 2, 4))
    for i in range(1, 4):
        seq.append(L.Conv2d.create(f"d{i}_conv", 3, 3, cin, c1, gen, dtype=dtype))
        if config.has("All"):
            seq.append(L.SpatialDropout(f"d{i}_drop", config.dropout_p))
        seq.append(L.Activation(f"d{i}_relu", "relu"))
        seq.append(L.MaxPool(f"d{i}_pool", 2, 2))
        cin = c1
    seq.append(L.Conv2d.create("head_conv", 3, 3, cin, c2, gen, dtype=dtype))
    if config.has("All"):
        seq.append(L.SpatialDropout("head_drop", config.dropout_p))
    seq.append(L.Activation("head_act", "sigmoid" if config.has("S") else "relu"))
    seq.append(L.Flatten("flatten"))

    # dense sizes come from shape propagation
    shape: tuple = (*config.input_shape, 1)
    plan = []
    for layer in seq:
        shape = layer.out_shape(shape)
        plan.append(PlanRow(layer.name, layer.kind, shape, layer.n_params()))
    if min(shape) < 1:
        raise DataError(f"input {config.input_shape} too small for the pooling chain")
    for layer in (L.Dense.create("dense", shape[0], dense_units, gen, dtype=dtype),
                  L.Activation("dense_act", "sigmoid"),
                  L.Dense.create("out", dense_units, 1, gen, dtype=dtype),
                  L.Activation("out_act", "sigmoid")):
        seq.append(layer)
        shape = layer.out_shape(shape)
        plan.append(PlanRow(layer.name, layer.kind, shape, layer.n_params()))
    return Model(config, L.Sequential(seq), plan)


def _head_grid(config: ArpanConfig) -> tuple[int, int]:
    h, w = config.input_shape
    if config.has("M"):
        h, w = config.pool_grid
    else:
        h, w = h // 2, w // 4
    for _ in range(3):
        h, w = h // 2, w // 2
    return h, w


def analytic_parameter_count(config: ArpanConfig) -> int:
    """Closed-form trainable parameter count, independent of :func:`build`."""
    c0, c1, c2, u = (config.width(64), config.width(128), config.width(256),
                     config.width(config.dense_units))
    k1, k2 = _initial_kernels(config)
    att = (7 * 7 * 2 + 1) + 2 if config.attention else 0
    total = k1 * k1 * 1 * c0 + c0 + 2 * c0 + att
    if config.has("D"):
        total += k2 * k2 * c0 * c0 + c0 + 2 * c0 + att
    total += 9 * c0 * c1 + c1 + 2 * (9 * c1 * c1 + c1)
    total += 9 * c1 * c2 + c2
    h, w = _head_grid(config)
    total += h * w * c2 * u + u + u + 1
    return total


def count_parameters(model: Model) -> int:
    return sum(int(t.data.size) for t in model.named_params().values())


def as_batch(batch, dtype=np.float32) -> np.ndarray:
    """Spectrograms or arrays -> (N, H, W, 1) array."""
    if isinstance(batch, Spectrogram):
        batch = [batch]
    if isinstance(batch, (list, tuple)):
        arr = np.stack([s.values if isinstance(s, Spectrogram) else np.asarray(s) for s in batch])
    else:
        arr = np.asarray(batch)
        if arr.ndim == 2:
            arr = arr[None]
    if arr.ndim == 3:
        arr = arr[..., None]
    return arr.astype(dtype, copy=False)


def forward(model: Model, batch, mode: str = ops.INFER, rs: RandomState | None = None,
            batch_size: int = 64) -> np.ndarray:
    """Detection probabilities, one per input."""
    dtype = model.layers[-2].weight.dtype if isinstance(model.layers[-2], L.Dense) else np.float32
    x = as_batch(batch, dtype)
    if tuple(x.shape[1:3]) != model.config.input_shape:
        raise DataError(f"input shape {tuple(x.shape[1:3])} != configured "
                        f"{model.config.input_shape}")
    out = []
    with no_grad():
        for start in range(0, x.shape[0], batch_size):
            chunk = Tensor(x[start:start + batch_size])
            out.append(model.forward_tensor(chunk, mode, rs).data[:, 0])
    return np.concatenate(out) if out else np.zeros(0, dtype=dtype)


def copy_weights(src: Model, dst: Model) -> None:
    """Copy every parameter and buffer present in both models (by name)."""
    dp, db = dst.named_params(), dst.named_buffers()
    for name, t in src.named_params().items():
        if name in dp:
            if dp[name].shape != t.shape:
                raise ShapeMismatchError(f"{name}: {t.shape} vs {dp[name].shape}")
            dp[name].data[...] = t.data
    for name, a in src.named_buffers().items():
        if name in db:
            db[name][...] = a


def state_arrays(model: Model) -> dict[str, np.ndarray]:
    d = {name: t.data for name, t in model.named_params().items()}
    d.update(model.named_buffers())
    return d


def save_checkpoint(model: Model, path) -> None:
    """One JSON header line, then float32 little-endian tensors in manifest order."""
    arrays = state_arrays(model)
    manifest, offset = [], 0
    for name, arr in arrays.items():
        nbytes = arr.size * 4
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset,
                         "nbytes": nbytes})
        offset += nbytes
    header = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
              "config": model.config.to_dict(), "tensors": manifest, "data_bytes": offset}
    with open(path, "wb") as fh:
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path, expected: ArpanConfig | None = None) -> Model:
    """Rebuild a model from a checkpoint.

    With ``expected``, the model is built from that configuration and every
    stored tensor must match its shape.
    """
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise CorruptCheckpointError(f"{path}: missing header line")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable header ({exc})") from exc
    if header.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {header.get('version')} "
                              f"!= supported {CHECKPOINT_VERSION}")
    data = raw[nl + 1:]
    if len(data) != header["data_bytes"]:
        raise CorruptCheckpointError(f"{path}: expected {header['data_bytes']} data bytes, "
                                     f"found {len(data)} (truncated?)")
    config = expected if expected is not None else ArpanConfig.from_dict(header["config"])
    model = build(config)
    targets = state_arrays(model)
    stored = {t["name"]: t for t in header["tensors"]}
    if set(stored) != set(targets):
        missing = sorted(set(targets) ^ set(stored))
        raise ShapeMismatchError(f"{path}: tensor names differ from the model: {missing[:5]}")
    for name, arr in targets.items():
        entry = stored[name]
        if tuple(entry["shape"]) != arr.shape:
            raise ShapeMismatchError(f"{path}: {name} has shape {tuple(entry['shape'])}, "
                                     f"model expects {arr.shape}")
        chunk = data[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arr[...] = np.frombuffer(chunk, dtype="<f4").reshape(arr.shape)
    return model
