"""Tiny residual video classifier with pluggable temporal modules.

The trunk is a per-frame 2D residual network (time folded into the batch
axis). Each block may carry a temporal module on its residual branch:
``shift`` (see tsm), ``action`` (see actionnet), or ``none``. After the
trunk: global spatial pooling, consensus averaging over the T segments,
and a linear classification head.

Normalization is a per-channel affine (scale/bias with running statistics
frozen to mean 0 / var 1), so outputs carry no batch-size dependence.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, asdict

import numpy as np

from .errors import ConfigError, DimensionError, InputError, NumericError, UsageError
from .sampler import consensus
from .tensor import (Array, Parameter, Tensor, add, conv2d, global_avg_pool, matmul,
                     mul, relu, reshape, softmax_cross_entropy,
                     load_weights, save_weights)
from .tsm import (BIDIRECTIONAL, UNIDIRECTIONAL, OnlineCache, ShiftConfig, online_step,
                  shift)
from .actionnet import ActionBlock, ActionConfig

TEMPORAL_NONE = "none"
TEMPORAL_SHIFT = "shift"
TEMPORAL_ACTION = "action"


@dataclass(frozen=True)
class StageSpec:
    blocks: int
    channels: int
    stride: int = 1


@dataclass(frozen=True)
class NetSpec:
    """Architecture description; weights come from build()."""

    num_classes: int
    t: int = 8
    in_channels: int = 1
    frame_size: tuple[int, int] = (32, 32)
    stem_channels: int = 8
    stem_stride: int = 2
    stages: tuple[StageSpec, ...] = (StageSpec(1, 8), StageSpec(1, 16, 2))
    temporal: str = TEMPORAL_SHIFT
    fold_fraction: float = 0.125
    direction: str = BIDIRECTIONAL
    action_ratio: int = 4
    action_temporal_kernel: int = 3

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.t < 1:
            raise ConfigError(f"t must be >= 1, got {self.t}")
        if self.temporal not in (TEMPORAL_NONE, TEMPORAL_SHIFT, TEMPORAL_ACTION):
            raise ConfigError(f"unknown temporal module {self.temporal!r}")
        if self.temporal == TEMPORAL_ACTION:
            cfg = ActionConfig(self.action_ratio, self.action_temporal_kernel)
            for channels in self._block_input_channels():
                cfg.squeezed(channels)
        if self.temporal == TEMPORAL_SHIFT:
            # validates fraction/direction and the 2*c_f <= C constraint
            sc = ShiftConfig(self.fold_fraction, self.direction)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                for channels in self._block_input_channels():
                    sc.fold_channels(channels)

    def _block_input_channels(self) -> list[int]:
        chans = []
        current = self.stem_channels
        for stage in self.stages:
            for _ in range(stage.blocks):
                chans.append(current)
                current = stage.channels
        return chans

    @property
    def clip_shape(self) -> tuple[int, int, int, int]:
        return (self.t, self.in_channels, *self.frame_size)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = [asdict(s) for s in self.stages]
        d["frame_size"] = list(self.frame_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetSpec":
        d = dict(d)
        d["stages"] = tuple(StageSpec(**s) for s in d["stages"])
        d["frame_size"] = tuple(d["frame_size"])
        return cls(**d)

    # -- presets ----------------------------------------------------------------

    @classmethod
    def tiny(cls, num_classes: int, temporal: str = TEMPORAL_SHIFT, **kw) -> "NetSpec":
        """Default desk-scale net: stem 3->16, stages 2x16 / 2x32 / 2x64."""
        kw.setdefault("t", 8)
        return cls(num_classes=num_classes, in_channels=3, frame_size=(32, 32),
                   stem_channels=16, stem_stride=1,
                   stages=(StageSpec(2, 16), StageSpec(2, 32, 2), StageSpec(2, 64, 2)),
                   temporal=temporal, **kw)

    @classmethod
    def micro(cls, num_classes: int, temporal: str = TEMPORAL_SHIFT, **kw) -> "NetSpec":
        """Minutes-on-CPU net used by the synthetic-signal experiments.

        Downsamples to 4x4 maps so one 3x3 kernel spans the whole frame;
        cross-frame patch transitions then stay inside the receptive field.
        """
        kw.setdefault("t", 8)
        return cls(num_classes=num_classes, in_channels=1, frame_size=(32, 32),
                   stem_channels=8, stem_stride=2,
                   stages=(StageSpec(1, 8, 2), StageSpec(1, 16, 2)),
                   temporal=temporal, **kw)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    precision: str = "float32"

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr < 0:
            raise ConfigError("epochs/batch_size/lr must be non-negative (batch >= 1)")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64


@dataclass
class Metrics:
    prec1: float
    prec5: float
    loss: float

    def to_dict(self, epoch: int | None = None) -> dict:
        d = {"prec1": round(self.prec1, 4), "prec5": round(self.prec5, 4),
             "loss": round(self.loss, 6)}
        if epoch is not None:
            d = {"epoch": epoch, **d}
        return d


# -- layers ------------------------------------------------------------------------


class _Affine:
    """Per-channel scale/bias; running statistics frozen to (0, 1)."""

    def __init__(self, channels: int, name: str, dtype):
        self.gamma = Parameter(np.ones(channels, dtype=dtype), f"{name}.gamma")
        self.beta = Parameter(np.zeros(channels, dtype=dtype), f"{name}.beta")
        self.channels = channels

    def __call__(self, x: Tensor) -> Tensor:
        c = self.channels
        return add(mul(x, reshape(self.gamma, 1, c, 1, 1)), reshape(self.beta, 1, c, 1, 1))

    def parameters(self):
        return [self.gamma, self.beta]


class _ConvUnit:
    def __init__(self, cin: int, cout: int, k: int, stride: int, pad: int, name: str,
                 rng: np.random.Generator, dtype):
        bound = math.sqrt(6.0 / (cin * k * k))
        self.w = Parameter(rng.uniform(-bound, bound, size=(cout, cin, k, k)).astype(dtype),
                           f"{name}.w")
        self.b = Parameter(np.zeros(cout, dtype=dtype), f"{name}.b")
        self.stride, self.pad = stride, pad

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.w, self.b, stride=self.stride, pad=self.pad)

    def parameters(self):
        return [self.w, self.b]


class _Block:
    """Residual block; temporal module feeds the conv branch, skip stays clean."""

    def __init__(self, cin: int, cout: int, stride: int, spec: NetSpec, name: str,
                 rng: np.random.Generator, dtype):
        self.cin, self.cout, self.stride = cin, cout, stride
        self.conv1 = _ConvUnit(cin, cout, 3, stride, 1, f"{name}.conv1", rng, dtype)
        self.norm1 = _Affine(cout, f"{name}.norm1", dtype)
        self.conv2 = _ConvUnit(cout, cout, 3, 1, 1, f"{name}.conv2", rng, dtype)
        self.norm2 = _Affine(cout, f"{name}.norm2", dtype)
        if cin != cout or stride != 1:
            self.proj = _ConvUnit(cin, cout, 1, stride, 0, f"{name}.proj", rng, dtype)
            self.proj_norm = _Affine(cout, f"{name}.proj_norm", dtype)
        else:
            self.proj = None
            self.proj_norm = None
        self.action: ActionBlock | None = None
        if spec.temporal == TEMPORAL_ACTION:
            self.action = ActionBlock(cin, ActionConfig(spec.action_ratio,
                                                        spec.action_temporal_kernel),
                                      rng, f"{name}.action", dtype)

    def parameters(self):
        params = [*self.conv1.parameters(), *self.norm1.parameters(),
                  *self.conv2.parameters(), *self.norm2.parameters()]
        if self.proj is not None:
            params += [*self.proj.parameters(), *self.proj_norm.parameters()]
        if self.action is not None:
            params += self.action.parameters()
        return params


class Model:
    """Built network: parameters plus the forward graph builders."""

    def __init__(self, spec: NetSpec, seed: int = 0, dtype=np.float32):
        self.spec = spec
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        self.shift_cfg = ShiftConfig(spec.fold_fraction, spec.direction) \
            if spec.temporal == TEMPORAL_SHIFT else None

        self.stem = _ConvUnit(spec.in_channels, spec.stem_channels, 3, spec.stem_stride, 1,
                              "stem", rng, dtype)
        self.stem_norm = _Affine(spec.stem_channels, "stem_norm", dtype)

        self.blocks: list[_Block] = []
        cin = spec.stem_channels
        for si, stage in enumerate(spec.stages):
            for bi in range(stage.blocks):
                stride = stage.stride if bi == 0 else 1
                self.blocks.append(_Block(cin, stage.channels, stride, spec,
                                          f"stage{si}.block{bi}", rng, dtype))
                cin = stage.channels

        head_in = cin
        bound = math.sqrt(6.0 / head_in)
        self.head_w = Parameter(
            rng.uniform(-bound, bound, size=(head_in, spec.num_classes)).astype(dtype), "head.w")
        self.head_b = Parameter(np.zeros(spec.num_classes, dtype=dtype), "head.b")

    # -- parameter plumbing ------------------------------------------------------

    def parameters(self) -> list[Parameter]:
        params = [*self.stem.parameters(), *self.stem_norm.parameters()]
        for block in self.blocks:
            params += block.parameters()
        params += [self.head_w, self.head_b]
        return params

    def state_dict(self) -> dict[str, Array]:
        return {p.name: p.data for p in self.parameters()}

    def load_state_dict(self, state: dict[str, Array]) -> None:
        params = {p.name: p for p in self.parameters()}
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        if missing or extra:
            raise ConfigError(f"weight mismatch: missing {missing}, unexpected {extra}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=self.dtype)
            if arr.shape != p.data.shape:
                raise DimensionError(
                    f"weight {name}: file shape {arr.shape} vs model shape {p.data.shape}")
            p.data = arr
            p.grad = None

    def save(self, weights_path, spec_path=None) -> None:
        save_weights(weights_path, self.state_dict())
        if spec_path is not None:
            with open(spec_path, "w", encoding="utf-8") as fh:
                json.dump(self.spec.to_dict(), fh, indent=2, sort_keys=True)
                fh.write("\n")

    @classmethod
    def load(cls, weights_path, spec_path) -> "Model":
        with open(spec_path, encoding="utf-8") as fh:
            spec = NetSpec.from_dict(json.load(fh))
        model = cls(spec, seed=0)
        model.load_state_dict(load_weights(weights_path))
        return model

    # -- forward -------------------------------------------------------------------

    def _temporal(self, x4: Tensor, block: _Block, n: int, t: int) -> Tensor:
        """Apply the block's temporal module to [N*T,C,H,W] features."""
        if self.spec.temporal == TEMPORAL_NONE:
            return x4
        _, c, h, w = x4.shape
        x5 = reshape(x4, n, t, c, h, w)
        if self.spec.temporal == TEMPORAL_SHIFT:
            out = shift(x5, self.shift_cfg)
        else:
            out = block.action(x5)
        return reshape(out, n * t, c, h, w)

    def _block_forward(self, x: Tensor, block: _Block, branch_input: Tensor) -> Tensor:
        y = relu(block.norm1(block.conv1(branch_input)))
        y = block.norm2(block.conv2(y))
        skip = block.proj_norm(block.proj(x)) if block.proj is not None else x
        return relu(add(y, skip))

    def _trunk(self, frames: Tensor, n: int, t: int) -> Tensor:
        """[N*T,C,H,W] frames -> [N*T,D] pooled features."""
        x = relu(self.stem_norm(self.stem(frames)))
        for block in self.blocks:
            branch = self._temporal(x, block, n, t)
            x = self._block_forward(x, block, branch)
        return global_avg_pool(x)

    def forward(self, clip) -> Tensor:
        """[N,T,C,H,W] clip -> [N,K] consensus logits."""
        x = clip if isinstance(clip, Tensor) else Tensor(np.asarray(clip, dtype=self.dtype))
        if x.data.ndim == 4:  # single clip without batch axis
            x = reshape(x, 1, *x.shape)
        if x.data.ndim != 5 or x.shape[1:] != (self.spec.t, self.spec.in_channels,
                                               *self.spec.frame_size):
            raise DimensionError(
                f"clip shape {x.shape} does not match spec [N,{self.spec.t},"
                f"{self.spec.in_channels},{self.spec.frame_size[0]},{self.spec.frame_size[1]}]")
        n, t = x.shape[0], x.shape[1]
        feats = self._trunk(reshape(x, n * t, *x.shape[2:]), n, t)     # [N*T, D]
        per_frame = reshape(feats, n, t, feats.shape[1])
        pooled = consensus(per_frame)                                  # mean over T
        return add(matmul(pooled, self.head_w), self.head_b)

    def per_frame_logits(self, clip) -> Tensor:
        """[N,T,C,H,W] -> [N,T,K] logits of each frame before consensus."""
        x = clip if isinstance(clip, Tensor) else Tensor(np.asarray(clip, dtype=self.dtype))
        n, t = x.shape[0], x.shape[1]
        feats = self._trunk(reshape(x, n * t, *x.shape[2:]), n, t)
        logits = add(matmul(feats, self.head_w), self.head_b)
        return reshape(logits, n, t, self.spec.num_classes)

    # -- streaming ---------------------------------------------------------------

    def open_stream(self, stream_id: str = "stream0", n: int = 1) -> "StreamState":
        if self.spec.temporal == TEMPORAL_ACTION:
            raise UsageError("streaming inference is only defined for shift or none")
        if self.spec.temporal == TEMPORAL_SHIFT and self.spec.direction != UNIDIRECTIONAL:
            raise UsageError("streaming requires a unidirectional shift model")
        caches: list[OnlineCache] = []
        if self.spec.temporal == TEMPORAL_SHIFT:
            h, w = self.spec.frame_size
            h = (h + 2 - 3) // self.spec.stem_stride + 1
            w = (w + 2 - 3) // self.spec.stem_stride + 1
            for li, block in enumerate(self.blocks):
                cf = self.shift_cfg.fold_channels(block.cin)
                caches.append(OnlineCache.zeros(stream_id, f"block{li}", n, cf, h, w,
                                                dtype=self.dtype))
                if block.stride != 1:
                    h = (h + 2 - 3) // block.stride + 1
                    w = (w + 2 - 3) // block.stride + 1
        return StreamState(self, stream_id, caches)


class StreamState:
    """Per-stream mutable state: one fold cache per block plus a logit sum."""

    def __init__(self, model: Model, stream_id: str, caches: list[OnlineCache]):
        self.model = model
        self.stream_id = stream_id
        self.caches = caches
        self.frames_seen = 0
        self.logit_sum: Array | None = None

    def step(self, frame: Array) -> dict:
        """Process one [N,C,H,W] frame (or [C,H,W]); returns per-frame and
        rolling consensus logits."""
        model = self.model
        frame = np.asarray(frame, dtype=model.dtype)
        if frame.ndim == 3:
            frame = frame[None]
        if frame.ndim != 4:
            raise InputError(f"stream step expects [N,C,H,W] frame, got {frame.shape}")
        x = relu(model.stem_norm(model.stem(Tensor(frame))))
        for li, block in enumerate(model.blocks):
            if model.spec.temporal == TEMPORAL_SHIFT:
                branch, self.caches[li] = online_step(x, self.caches[li])
            else:
                branch = x
            x = model._block_forward(x, block, branch)
        feats = global_avg_pool(x)
        logits = add(matmul(feats, model.head_w), model.head_b).numpy()
        self.frames_seen += 1
        self.logit_sum = logits if self.logit_sum is None else self.logit_sum + logits
        rolling = self.logit_sum / self.frames_seen
        return {"frame_logits": logits, "rolling_logits": rolling,
                "prediction": int(np.argmax(rolling[0]))}


def build(spec: NetSpec, seed: int = 0, dtype=np.float32) -> Model:
    """Deterministic model construction: same spec and seed, same weights."""
    return Model(spec, seed=seed, dtype=dtype)


def parameter_count(model: Model) -> int:
    return sum(p.data.size for p in model.parameters())


# -- evaluation ---------------------------------------------------------------------


def topk_hits(logits: Array, labels: Array, k: int) -> int:
    """Count rows whose label is among the k largest logits.

    Ties broken toward the lower class index (stable sort on descending value).
    """
    k = min(k, logits.shape[1])
    order = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return int((order == labels[:, None]).any(axis=1).sum())


def evaluate(model: Model, dataset) -> Metrics:
    """Prec@1 / Prec@5 / mean loss over (clip, label) pairs.

    Samples are forwarded one at a time and per-sample losses combined with
    an exact sum, so the result does not depend on iteration order.
    """
    items = list(dataset)
    if not items:
        raise InputError("evaluate requires a nonempty dataset")
    hits1 = hits5 = 0
    losses: list[float] = []
    for clip, label in items:
        arr = np.asarray(clip, dtype=model.dtype)[None]
        label_arr = np.array([label], dtype=np.int64)
        logits = model.forward(arr).numpy()
        hits1 += topk_hits(logits, label_arr, 1)
        hits5 += topk_hits(logits, label_arr, 5)
        losses.append(float(softmax_cross_entropy(Tensor(logits), label_arr).item()))
    n = len(items)
    return Metrics(prec1=100.0 * hits1 / n, prec5=100.0 * hits5 / n,
                   loss=math.fsum(losses) / n)


# -- training -----------------------------------------------------------------------


def train(model: Model, dataset, cfg: TrainConfig, eval_dataset=None,
          on_epoch=None) -> list[dict]:
    """SGD with momentum; returns one metrics record per epoch.

    Records carry training prec/loss (accumulated over the epoch's batches);
    when eval_dataset is given, its metrics are appended under val_*.
    """
    items = list(dataset)
    if not items:
        raise InputError("train requires a nonempty dataset")
    for _, label in items:
        if not 0 <= label < model.spec.num_classes:
            raise InputError(f"label {label} out of range for {model.spec.num_classes} classes")

    params = model.parameters()
    velocity = [np.zeros_like(p.data) for p in params]
    rng = np.random.default_rng(cfg.seed)
    history: list[dict] = []

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(items))
        hits1 = hits5 = 0
        loss_sum = 0.0
        for start in range(0, len(items), cfg.batch_size):
            batch = [items[i] for i in order[start:start + cfg.batch_size]]
            clips = np.stack([np.asarray(c, dtype=cfg.dtype) for c, _ in batch])
            labels = np.array([l for _, l in batch], dtype=np.int64)

            logits = model.forward(Tensor(clips))
            loss = softmax_cross_entropy(logits, labels)
            loss_value = loss.item()
            if not math.isfinite(loss_value):
                raise NumericError(
                    f"non-finite loss {loss_value} at epoch {epoch}, batch {start // cfg.batch_size}")
            loss.backward()

            for p, v in zip(params, velocity):
                if p.grad is None:
                    raise UsageError(f"parameter {p.name!r} received no gradient")
                grad = p.grad + cfg.weight_decay * p.data
                np.multiply(v, cfg.momentum, out=v)
                v -= cfg.lr * grad
                p.data = p.data + v

            hits1 += topk_hits(logits.numpy(), labels, 1)
            hits5 += topk_hits(logits.numpy(), labels, 5)
            loss_sum += loss_value * len(batch)

        record = Metrics(prec1=100.0 * hits1 / len(items), prec5=100.0 * hits5 / len(items),
                         loss=loss_sum / len(items)).to_dict(epoch=epoch)
        if eval_dataset is not None:
            val = evaluate(model, eval_dataset)
            record.update({"val_prec1": round(val.prec1, 4), "val_prec5": round(val.prec5, 4),
                           "val_loss": round(val.loss, 6)})
        history.append(record)
        if on_epoch is not None:
            on_epoch(record)
    return history
