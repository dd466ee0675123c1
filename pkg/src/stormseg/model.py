"""Configurable-depth U-Net assembly, checkpoint serialization, and the four
published reference configurations.

The encoder halves the raster ``depth`` times, so inputs are reflect-padded on
the bottom/right edges up to the next multiple of 2**depth and the output is
cropped back.  Skip connections concatenate each encoder block's output onto
the matching decoder level.  Checkpoints are a little-endian binary container:
magic "UNETCKPT", u32 format version, u32-length JSON metadata blob (config,
normalization stats, optimizer hyperparameters, seed, history summary), u32
tensor count, then per tensor u16 name length + name, u8 dtype tag (1=f32,
2=f64), u8 rank, u32 extents, raw values.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ContractError, FormatError, ParameterError, ShapeError
from .layers import (
    BatchNormParams,
    Conv2dParams,
    batchnorm,
    concat_channels,
    conv2d,
    dropout,
    gaussian_noise,
    maxpool2d,
    narrow,
    relu,
    sigmoid,
    upconv2d,
)
from .losses import LossSpec
from .tensor import DTYPES, Rng, Tensor

FORMAT_VERSION = 1
_MAGIC = b"UNETCKPT"
_REG_STREAM_KEY = 101  # child rng stream feeding dropout/noise draws


@dataclass
class ModelConfig:
    """Static shape and regularization choices for one U-Net."""

    depth: int = 4
    base_channels: int = 16
    in_channels: int = 3
    out_channels: int = 1
    dropout_rate: float = 0.0
    noise_stddev: float = 0.0
    bn_momentum: float = 0.99
    loss: LossSpec = field(default_factory=LossSpec)
    input_height: int | None = None
    input_width: int | None = None

    def __post_init__(self):
        if self.depth < 2:
            raise ParameterError(f"depth must be >= 2, got {self.depth}")
        if self.base_channels < 1:
            raise ParameterError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ParameterError("channel counts must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ParameterError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.noise_stddev < 0:
            raise ParameterError(f"noise_stddev must be >= 0, got {self.noise_stddev}")
        if not 0.0 <= self.bn_momentum < 1.0:
            raise ParameterError(f"bn_momentum must be in [0, 1), got {self.bn_momentum}")
        if self.dropout_rate > 0 and self.noise_stddev > 0:
            raise ParameterError("dropout and noise are mutually exclusive")
        for ext in (self.input_height, self.input_width):
            if ext is not None and ext < 1:
                raise ParameterError(f"input extents must be positive, got {ext}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["loss"] = LossSpec(**d["loss"])
        return cls(**d)


@dataclass
class _Block:
    conv1: Conv2dParams
    bn1: BatchNormParams
    conv2: Conv2dParams
    bn2: BatchNormParams


def _he_weight(rng: Rng, shape, fan_in: int) -> Tensor:
    return Tensor(rng.normal(shape, std=float(np.sqrt(2.0 / fan_in))), requires_grad=True)


def _zero_bias(n: int) -> Tensor:
    return Tensor(np.zeros(n, np.float32), requires_grad=True)


class Model:
    """A built U-Net: parameter storage plus the forward computation."""

    def __init__(self, config: ModelConfig, rng: Rng):
        self.config = config
        self.seed = rng.seed
        self.reg_rng = rng.spawn(_REG_STREAM_KEY)
        self._slots: dict[str, tuple[object, str]] = {}
        self._stat_slots: dict[str, tuple[object, str]] = {}

        base = config.base_channels
        self.encoder: list[_Block] = []
        ch = config.in_channels
        for i in range(config.depth):
            out = base * 2**i
            self.encoder.append(self._make_block(f"enc{i}", rng, ch, out))
            ch = out
        self.bottleneck = self._make_block("bottleneck", rng, ch, ch * 2)
        ch *= 2
        self.decoder_up: list[Conv2dParams] = []
        self.decoder_block: list[_Block] = []
        for i in reversed(range(config.depth)):
            low = base * 2**i
            up = Conv2dParams(
                weight=_he_weight(rng, (ch, low, 2, 2), ch * 4),
                bias=_zero_bias(low),
                stride=2,
                padding=0,
            )
            self._register(f"dec{i}.up", up, ("weight", "bias"))
            self.decoder_up.append(up)
            self.decoder_block.append(self._make_block(f"dec{i}", rng, 2 * low, low))
            ch = low
        self.head = Conv2dParams(
            weight=_he_weight(rng, (config.out_channels, base, 1, 1), base),
            bias=_zero_bias(config.out_channels),
            stride=1,
            padding=0,
        )
        self._register("head", self.head, ("weight", "bias"))

    def _register(self, prefix: str, holder, attrs):
        for a in attrs:
            self._slots[f"{prefix}.{a}"] = (holder, a)

    def _make_block(self, name: str, rng: Rng, cin: int, cout: int) -> _Block:
        blk = _Block(
            conv1=Conv2dParams(_he_weight(rng, (cout, cin, 3, 3), cin * 9),
                               _zero_bias(cout), 1, 1),
            bn1=BatchNormParams.initial(cout, momentum=self.config.bn_momentum),
            conv2=Conv2dParams(_he_weight(rng, (cout, cout, 3, 3), cout * 9),
                               _zero_bias(cout), 1, 1),
            bn2=BatchNormParams.initial(cout, momentum=self.config.bn_momentum),
        )
        self._register(f"{name}.conv1", blk.conv1, ("weight", "bias"))
        self._register(f"{name}.bn1", blk.bn1, ("scale", "shift"))
        self._register(f"{name}.conv2", blk.conv2, ("weight", "bias"))
        self._register(f"{name}.bn2", blk.bn2, ("scale", "shift"))
        for bn, tag in ((blk.bn1, "bn1"), (blk.bn2, "bn2")):
            self._stat_slots[f"{name}.{tag}.running_mean"] = (bn, "running_mean")
            self._stat_slots[f"{name}.{tag}.running_var"] = (bn, "running_var")
        return blk

    # parameter access -----------------------------------------------------
    def params(self) -> dict[str, Tensor]:
        """Trainable tensors keyed by stable dotted names."""
        return {n: getattr(h, a) for n, (h, a) in self._slots.items()}

    def set_params(self, new: dict[str, Tensor]):
        """Swap in replacement tensors (functional update; buffers stay frozen)."""
        for n, t in new.items():
            if n not in self._slots:
                raise ContractError(f"unknown parameter {n!r}")
            h, a = self._slots[n]
            if t.shape != getattr(h, a).shape:
                raise ShapeError(f"parameter {n!r}: shape {t.shape} != {getattr(h, a).shape}")
            setattr(h, a, t)

    def param_count(self) -> int:
        return sum(t.size for t in self.params().values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Every persistent array: trainable params plus batch-norm stats."""
        out = {n: t.values for n, t in self.params().items()}
        out.update({n: getattr(h, a) for n, (h, a) in self._stat_slots.items()})
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        expected = set(self._slots) | set(self._stat_slots)
        missing = expected - set(arrays)
        extra = set(arrays) - expected
        if missing or extra:
            raise ContractError(f"state mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        self.set_params({n: Tensor(arrays[n].copy(), requires_grad=True) for n in self._slots})
        for n, (h, a) in self._stat_slots.items():
            setattr(h, a, arrays[n].copy())

    # forward --------------------------------------------------------------
    def _regularize(self, t: Tensor, mode: str) -> Tensor:
        if mode != "train":
            return t
        if self.config.dropout_rate > 0:
            return dropout(t, self.config.dropout_rate, self.reg_rng, mode)
        if self.config.noise_stddev > 0:
            return gaussian_noise(t, self.config.noise_stddev, self.reg_rng, mode)
        return t

    def _run_block(self, t: Tensor, blk: _Block, mode: str) -> Tensor:
        t = relu(batchnorm(conv2d(t, blk.conv1), blk.bn1, mode))
        t = relu(batchnorm(conv2d(t, blk.conv2), blk.bn2, mode))
        return self._regularize(t, mode)

    def forward(self, x, mode: str = "eval", trace: dict | None = None) -> Tensor:
        """Probability map with the input's spatial extents, values in (0, 1)."""
        if mode not in ("train", "eval"):
            raise ParameterError(f"mode must be 'train' or 'eval', got {mode!r}")
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, np.float32))
        if len(x.shape) != 4 or x.shape[1] != self.config.in_channels:
            raise ShapeError(f"expected N x {self.config.in_channels} x H x W input, "
                             f"got {x.shape}")
        h, w = x.shape[2], x.shape[3]
        mult = 2**self.config.depth
        ph, pw = (-h) % mult, (-w) % mult
        if ph or pw:
            if x.requires_grad:
                raise ContractError("padding a gradient-carrying input is unsupported")
            mode_pad = "reflect" if ph < h and pw < w else "edge"
            x = Tensor(np.pad(x.values, ((0, 0), (0, 0), (0, ph), (0, pw)), mode=mode_pad))
        skips: list[Tensor] = []
        t = x
        for i, blk in enumerate(self.encoder):
            t = self._run_block(t, blk, mode)
            skips.append(t)
            if trace is not None:
                trace[f"enc{i}"] = t
            t = maxpool2d(t)
        t = self._run_block(t, self.bottleneck, mode)
        if trace is not None:
            trace["bottleneck"] = t
        for up, blk, i in zip(self.decoder_up, self.decoder_block,
                              reversed(range(self.config.depth))):
            t = upconv2d(t, up)
            t = concat_channels(t, skips[i])
            if trace is not None:
                trace[f"cat{i}"] = t
            t = self._run_block(t, blk, mode)
            if trace is not None:
                trace[f"dec{i}"] = t
        out = sigmoid(conv2d(t, self.head))
        if ph:
            out = narrow(out, 2, 0, h)
        if pw:
            out = narrow(out, 3, 0, w)
        if trace is not None:
            trace["out"] = out
        return out

    __call__ = forward

    # checkpoint glue ------------------------------------------------------
    def checkpoint(self, norm_stats: dict | None = None, optimizer: dict | None = None,
                   history_summary: dict | None = None) -> "Checkpoint":
        return Checkpoint(
            config=self.config,
            norm_stats=norm_stats,
            optimizer=optimizer,
            seed=self.seed,
            tensors={n: a.copy() for n, a in self.state_arrays().items()},
            history_summary=history_summary,
        )

    @classmethod
    def from_checkpoint(cls, ckpt: "Checkpoint") -> "Model":
        m = cls(ckpt.config, Rng(ckpt.seed))
        m.load_state_arrays(ckpt.tensors)
        return m


def build(config: ModelConfig, rng: Rng) -> Model:
    return Model(config, rng)


@dataclass
class Checkpoint:
    """Everything needed to reproduce a trained model's outputs."""

    config: ModelConfig
    tensors: dict[str, np.ndarray]
    seed: int = 0
    norm_stats: dict | None = None
    optimizer: dict | None = None
    history_summary: dict | None = None
    version: int = FORMAT_VERSION


_DTYPE_TAGS = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_TAG_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    meta = {
        "config": ckpt.config.to_dict(),
        "norm_stats": ckpt.norm_stats,
        "optimizer": ckpt.optimizer,
        "seed": ckpt.seed,
        "history_summary": ckpt.history_summary,
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [_MAGIC, struct.pack("<I", ckpt.version), struct.pack("<I", len(blob)), blob,
             struct.pack("<I", len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        if arr.dtype not in _DTYPE_TAGS:
            raise ContractError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<BB", _DTYPE_TAGS[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).astype(_TAG_DTYPES[_DTYPE_TAGS[arr.dtype]],
                                                      copy=False).tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise FormatError(f"truncated checkpoint: needed {n} bytes at offset {self.off}, "
                              f"file has {len(self.buf)}")
        out = self.buf[self.off : self.off + n]
        self.off += n
        return out

    def u(self, fmt: str) -> int:
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))[0]


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        r = _Reader(f.read())
    if r.take(len(_MAGIC)) != _MAGIC:
        raise FormatError(f"bad magic at offset 0: expected {_MAGIC!r}")
    version = r.u("<I")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint format version {version} at offset "
                          f"{len(_MAGIC)} (supported: {FORMAT_VERSION})")
    blob = r.take(r.u("<I"))
    try:
        meta = json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"corrupt metadata blob: {e}") from e
    count = r.u("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.take(r.u("<H")).decode("utf-8")
        tag = r.u("<B")
        if tag not in _TAG_DTYPES:
            raise FormatError(f"unknown dtype tag {tag} at offset {r.off - 1}")
        rank = r.u("<B")
        shape = tuple(r.u("<I") for _ in range(rank))
        dt = _TAG_DTYPES[tag]
        raw = r.take(int(np.prod(shape, dtype=np.int64)) * dt.itemsize)
        if name in tensors:
            raise FormatError(f"duplicate tensor name {name!r} at offset {r.off}")
        tensors[name] = np.frombuffer(raw, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    if r.off != len(r.buf):
        raise FormatError(f"{len(r.buf) - r.off} trailing bytes at offset {r.off}")
    return Checkpoint(
        config=ModelConfig.from_dict(meta["config"]),
        tensors=tensors,
        seed=meta.get("seed", 0),
        norm_stats=meta.get("norm_stats"),
        optimizer=meta.get("optimizer"),
        history_summary=meta.get("history_summary"),
        version=version,
    )


@dataclass(frozen=True)
class Preset:
    """One published reference configuration, with its reported GPU metrics.

    ``batch_size`` and the reference timings/metrics describe the original
    GPU experiments; they are carried as documentation and are not desk-scale
    reproduction targets.
    """

    name: str
    labels: str
    source: str
    input_width: int
    input_height: int
    train_size: int
    val_size: int
    batch_size: int
    roi_pixels: int
    regularizer: tuple[str, float]
    loss_kind: str
    depth: int
    epochs: int
    learning_rate: float
    reference: dict
    notes: str = ""

    def model_config(self, in_channels: int = 3, base_channels: int = 16) -> ModelConfig:
        kind, amount = self.regularizer
        return ModelConfig(
            depth=self.depth,
            base_channels=base_channels,
            in_channels=in_channels,
            dropout_rate=amount if kind == "dropout" else 0.0,
            noise_stddev=amount if kind == "noise" else 0.0,
            loss=LossSpec(kind=self.loss_kind),
            input_height=self.input_height,
            input_width=self.input_width,
        )


PRESETS: dict[str, Preset] = {
    "ibtracs-gfs": Preset(
        name="ibtracs-gfs", labels="ibtracs", source="gfs",
        input_width=720, input_height=361,
        train_size=8622, val_size=3020, batch_size=256, roi_pixels=25,
        regularizer=("noise", 0.2), loss_kind="focal", depth=6,
        epochs=37, learning_rate=8e-5,
        reference={"training_seconds": 2130, "infer_single_seconds": 0.03,
                   "infer_month_seconds": 8.16, "accuracy": 0.991, "loss_score": 0.237,
                   "dice": 0.763, "tversky": 0.750, "optimizer": "rms 0.00008",
                   "batchnorm": True},
        notes="reference sources disagree on this row's loss (focal vs tversky); "
              "the tabular value, focal, is recorded here",
    ),
    "heuristic-gfs": Preset(
        name="heuristic-gfs", labels="heuristic", source="gfs",
        input_width=720, input_height=361,
        train_size=15574, val_size=2902, batch_size=1520, roi_pixels=30,
        regularizer=("dropout", 0.1), loss_kind="dice", depth=5,
        epochs=200, learning_rate=1e-5,
        reference={"training_seconds": 2200, "infer_single_seconds": 0.03,
                   "infer_month_seconds": 6.48, "accuracy": 0.807, "loss_score": 0.351,
                   "dice": 0.58, "tversky": 0.649, "optimizer": "rms 0.00001",
                   "batchnorm": True},
    ),
    "ibtracs-goes": Preset(
        name="ibtracs-goes", labels="ibtracs", source="goes",
        input_width=1024, input_height=512,
        train_size=5638, val_size=2214, batch_size=128, roi_pixels=25,
        regularizer=("dropout", 0.2), loss_kind="bce", depth=5,
        epochs=70, learning_rate=1e-4,
        reference={"training_seconds": 3540, "infer_single_seconds": 0.15,
                   "infer_month_seconds": 36, "accuracy": 0.996, "loss_score": 0.311,
                   "dice": 0.689, "tversky": 0.680, "optimizer": "rms 0.0001",
                   "batchnorm": True},
        notes="published input size 1024x560 is not divisible by 2^5; the resized "
              "1024x512 extent the experiments actually used is recorded",
    ),
    "heuristic-goes": Preset(
        name="heuristic-goes", labels="heuristic", source="goes",
        input_width=1024, input_height=512,
        train_size=25288, val_size=2735, batch_size=720, roi_pixels=60,
        regularizer=("dropout", 0.1), loss_kind="tversky", depth=4,
        epochs=150, learning_rate=1e-5,
        reference={"training_seconds": 4650, "infer_single_seconds": 0.06,
                   "infer_month_seconds": 14.4, "accuracy": 0.901, "loss_score": 0.442,
                   "dice": 0.511, "tversky": 0.558, "optimizer": "rms 0.00001",
                   "batchnorm": True},
        notes="published input size is 1024x560, but the satellite experiments "
              "resized to 1024x512; that extent is recorded for both satellite presets",
    ),
}
