"""Multi-exit classifier: a backbone of blocks with exit heads attached.

A network with K exits evaluates its blocks in order; after the block that
carries exit i, a lightweight head (global average pool for conv features,
then a single dense layer) produces class probabilities. Inference under an
`OutputStrategy` takes the first exit whose top confidence reaches that
exit's threshold; the last exit is unconditional.

FLOPs convention, used for every cost number in the package: a dense map
m -> n costs 2*m*n + n (multiply-adds plus bias), a conv costs
Ho*Wo*Cout*(2*Cin*kh*kw) + Ho*Wo*Cout, a global average pool costs C*H*W.
Activations are free. The cost of stopping at exit k charges every backbone
block up to and including the exit's block plus every head evaluated on the
way (heads 1..k).
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from . import numerics as nm
from .errors import ContractError, FormatError

Array = np.ndarray

# Threshold value meaning "never exit here"; anything > 1 behaves the same
# because confidences cannot exceed 1.
SENTINEL = 2.0

_CHECKPOINT_MAGIC = b"MXCKPT01"


@dataclass(frozen=True)
class DenseBlockSpec:
    in_width: int
    out_width: int

    def __post_init__(self):
        if self.in_width < 1 or self.out_width < 1:
            raise ContractError("dense block widths must be >= 1")


@dataclass(frozen=True)
class ConvBlockSpec:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1

    def __post_init__(self):
        if min(self.in_channels, self.out_channels, self.kernel, self.stride) < 1:
            raise ContractError("conv block fields must be >= 1")


BlockSpec = Union[DenseBlockSpec, ConvBlockSpec]

_ACTIVATIONS = {"relu": nm.relu, "tanh": nm.tanh}


@dataclass(frozen=True)
class BackboneSpec:
    """Ordered block descriptors plus the shared activation tag."""

    blocks: tuple[BlockSpec, ...]
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        if not self.blocks:
            raise ContractError("backbone needs at least one block")
        if self.activation not in _ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")
        kinds = {type(b) for b in self.blocks}
        if len(kinds) != 1:
            raise ContractError("backbone blocks must be all dense or all conv")
        for prev, cur in zip(self.blocks, self.blocks[1:]):
            if isinstance(prev, DenseBlockSpec):
                if prev.out_width != cur.in_width:
                    raise ContractError(
                        f"block widths do not compose: {prev.out_width} -> {cur.in_width}"
                    )
            else:
                if prev.out_channels != cur.in_channels:
                    raise ContractError(
                        f"block channels do not compose: {prev.out_channels} -> {cur.in_channels}"
                    )

    @property
    def kind(self) -> str:
        return "dense" if isinstance(self.blocks[0], DenseBlockSpec) else "conv"

    @classmethod
    def dense(cls, widths: Sequence[int], activation: str = "relu") -> "BackboneSpec":
        """Chain of dense blocks: widths = (input, w1, w2, ..., wB)."""
        widths = [int(w) for w in widths]
        if len(widths) < 2:
            raise ContractError("dense backbone needs an input width and one block")
        blocks = tuple(
            DenseBlockSpec(widths[i], widths[i + 1]) for i in range(len(widths) - 1)
        )
        return cls(blocks=blocks, activation=activation)

    @classmethod
    def conv(
        cls,
        channels: Sequence[int],
        kernel: int,
        stride: int = 1,
        activation: str = "relu",
    ) -> "BackboneSpec":
        """Chain of conv blocks: channels = (input, c1, ..., cB)."""
        channels = [int(c) for c in channels]
        if len(channels) < 2:
            raise ContractError("conv backbone needs input channels and one block")
        blocks = tuple(
            ConvBlockSpec(channels[i], channels[i + 1], int(kernel), int(stride))
            for i in range(len(channels) - 1)
        )
        return cls(blocks=blocks, activation=activation)


@dataclass(frozen=True)
class OutputStrategy:
    """Per-exit confidence thresholds for the first K-1 exits.

    thresholds[i] is the bar the max softmax confidence at exit i+1 must
    reach (inclusive) to stop there; a value > 1 is a sentinel meaning
    "never exit here". The final exit has no threshold. `fallback` marks a
    strategy produced by a selection that found no feasible threshold and
    fell back to routing everything to the last exit.
    """

    thresholds: tuple[float, ...]
    fallback: bool = False

    def __post_init__(self):
        ts = tuple(float(t) for t in self.thresholds)
        object.__setattr__(self, "thresholds", ts)
        if not ts:
            raise ContractError("a strategy needs at least one threshold")
        arr = np.asarray(ts)
        if not np.all(np.isfinite(arr)) or np.any(arr < 0.0):
            raise ContractError("thresholds must be finite and >= 0")

    @property
    def exit_count(self) -> int:
        return len(self.thresholds) + 1

    @classmethod
    def uniform(cls, tau: float, exit_count: int) -> "OutputStrategy":
        if exit_count < 2:
            raise ContractError("exit_count must be >= 2")
        return cls(thresholds=(float(tau),) * (exit_count - 1))

    @classmethod
    def never_early(cls, exit_count: int, fallback: bool = False) -> "OutputStrategy":
        if exit_count < 2:
            raise ContractError("exit_count must be >= 2")
        return cls(thresholds=(SENTINEL,) * (exit_count - 1), fallback=fallback)


@dataclass(frozen=True)
class ExitOutcome:
    """Result of one cascaded inference: what was predicted, where the
    cascade stopped (1-based), the taken exit's probability vector, and the
    FLOPs actually spent getting there."""

    predicted_class: int
    exit_index: int
    probs: Array
    flops: int


def _dense_flops(m: int, n: int) -> int:
    return 2 * m * n + n


class MultiExitNet:
    """A backbone with K >= 2 exit heads at strictly increasing block indices.

    Parameters are float64 numpy arrays owned by the instance, in declaration
    order: (W, b) per backbone block, then (W, b) per exit head. `bind` wraps
    them in tape nodes for training.
    """

    def __init__(
        self,
        backbone: BackboneSpec,
        exit_indices: Sequence[int],
        class_count: int,
        params: Sequence[Array],
        input_hw: tuple[int, int] | None = None,
    ):
        exit_indices = tuple(int(i) for i in exit_indices)
        class_count = int(class_count)
        if class_count < 2:
            raise ContractError("class_count must be >= 2")
        if len(exit_indices) < 2:
            raise ContractError("a multi-exit net needs at least 2 exits")
        b = len(backbone.blocks)
        if any(i < 1 or i > b for i in exit_indices):
            raise ContractError(f"exit indices must lie in [1, {b}]")
        if any(j <= i for i, j in zip(exit_indices, exit_indices[1:])):
            raise ContractError("exit indices must be strictly increasing")
        if exit_indices[-1] != b:
            raise ContractError("the last exit must sit after the final block")
        if backbone.kind == "conv":
            if input_hw is None:
                raise ContractError("conv backbones need input_hw")
            input_hw = (int(input_hw[0]), int(input_hw[1]))

        self.backbone = backbone
        self.exit_indices = exit_indices
        self.class_count = class_count
        self.input_hw = input_hw if backbone.kind == "conv" else None

        self._feature_dims = self._trace_features()
        shapes = self._param_shapes()
        params = list(params)
        if len(params) != len(shapes):
            raise ContractError(f"expected {len(shapes)} parameter arrays, got {len(params)}")
        owned = []
        for arr, shape in zip(params, shapes):
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != shape:
                raise ContractError(f"parameter shape {arr.shape} != expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ContractError("parameters must be finite")
            owned.append(np.ascontiguousarray(arr))
        self._params = owned

        self._block_flops = self._compute_block_flops()
        self._head_flops = self._compute_head_flops()
        cum_blocks = np.cumsum(self._block_flops)
        cum_heads = np.cumsum(self._head_flops)
        self._flops_to_exit = tuple(
            int(cum_blocks[bi - 1] + cum_heads[k])
            for k, bi in enumerate(self.exit_indices)
        )

    # -- construction helpers -------------------------------------------------

    def _trace_features(self):
        """Feature description after each block: width for dense backbones,
        (channels, h, w) for conv ones."""
        dims = []
        if self.backbone.kind == "dense":
            for blk in self.backbone.blocks:
                dims.append(blk.out_width)
        else:
            h, w = self.input_hw
            for blk in self.backbone.blocks:
                h = (h - blk.kernel) // blk.stride + 1
                w = (w - blk.kernel) // blk.stride + 1
                if h < 1 or w < 1:
                    raise ContractError("conv backbone shrinks features below 1x1")
                dims.append((blk.out_channels, h, w))
        return dims

    def _param_shapes(self):
        shapes = []
        for blk in self.backbone.blocks:
            if isinstance(blk, DenseBlockSpec):
                shapes.append((blk.in_width, blk.out_width))
                shapes.append((blk.out_width,))
            else:
                shapes.append((blk.out_channels, blk.in_channels, blk.kernel, blk.kernel))
                shapes.append((blk.out_channels,))
        for bi in self.exit_indices:
            width = self._head_in_width(bi)
            shapes.append((width, self.class_count))
            shapes.append((self.class_count,))
        return shapes

    def _head_in_width(self, block_index: int) -> int:
        feat = self._feature_dims[block_index - 1]
        return feat if self.backbone.kind == "dense" else feat[0]

    def _compute_block_flops(self):
        flops = []
        if self.backbone.kind == "dense":
            for blk in self.backbone.blocks:
                flops.append(_dense_flops(blk.in_width, blk.out_width))
        else:
            for blk, feat in zip(self.backbone.blocks, self._feature_dims):
                cout, h, w = feat
                flops.append(h * w * cout * (2 * blk.in_channels * blk.kernel * blk.kernel) + h * w * cout)
        return flops

    def _compute_head_flops(self):
        flops = []
        for bi in self.exit_indices:
            width = self._head_in_width(bi)
            cost = _dense_flops(width, self.class_count)
            if self.backbone.kind == "conv":
                c, h, w = self._feature_dims[bi - 1]
                cost += c * h * w  # global average pool
            flops.append(cost)
        return flops

    # -- parameter access ------------------------------------------------------

    @property
    def exit_count(self) -> int:
        return len(self.exit_indices)

    def parameters(self) -> list[Array]:
        """The live parameter arrays, in declaration order."""
        return self._params

    def bind(self, tape: nm.GradTape) -> list[nm.Node]:
        return [tape.param(p) for p in self._params]

    def copy(self, frozen: bool = False) -> "MultiExitNet":
        dup = MultiExitNet(
            self.backbone,
            self.exit_indices,
            self.class_count,
            [p.copy() for p in self._params],
            input_hw=self.input_hw,
        )
        if frozen:
            for p in dup._params:
                p.setflags(write=False)
        return dup

    # -- forward ---------------------------------------------------------------

    def _check_input(self, x: Array) -> tuple[Array, bool]:
        if self.backbone.kind == "dense":
            want = self.backbone.blocks[0].in_width
            if x.ndim == 1:
                if x.shape[0] != want:
                    raise ContractError(f"input width {x.shape[0]} != {want}")
                return x[None, :], True
            if x.ndim == 2 and x.shape[1] == want:
                return x, False
            raise ContractError(f"bad dense input shape {x.shape}, want (*, {want})")
        cin = self.backbone.blocks[0].in_channels
        want = (cin, *self.input_hw)
        if x.ndim == 3:
            if x.shape != want:
                raise ContractError(f"input shape {x.shape} != {want}")
            return x[None], True
        if x.ndim == 4 and x.shape[1:] == want:
            return x, False
        raise ContractError(f"bad conv input shape {x.shape}, want (*, {want})")

    def forward_exit_logits(self, x, params=None):
        """Logits at every exit. `params` is an optional bound-node list from
        `bind`; without it the forward pass is plain numpy."""
        squeeze = False
        if not isinstance(x, nm.Node):
            x, squeeze = self._check_input(nm.as_array(x))
        p = self._params if params is None else list(params)
        act = _ACTIVATIONS[self.backbone.activation]
        nblocks = len(self.backbone.blocks)
        exit_at = {bi: k for k, bi in enumerate(self.exit_indices)}
        logits: list = [None] * self.exit_count
        h = x
        for i, blk in enumerate(self.backbone.blocks):
            w, b = p[2 * i], p[2 * i + 1]
            if isinstance(blk, DenseBlockSpec):
                h = act(nm.add(nm.matmul(h, w), b))
            else:
                h = act(nm.conv2d(h, w, b, stride=blk.stride))
            k = exit_at.get(i + 1)
            if k is not None:
                hw, hb = p[2 * nblocks + 2 * k], p[2 * nblocks + 2 * k + 1]
                feat = h if self.backbone.kind == "dense" else nm.global_avg_pool(h)
                logits[k] = nm.add(nm.matmul(feat, hw), hb)
        if squeeze:
            logits = [l[0] if isinstance(l, np.ndarray) else l for l in logits]
        return logits

    def __repr__(self):
        return (
            f"MultiExitNet(kind={self.backbone.kind}, blocks={len(self.backbone.blocks)}, "
            f"exits={self.exit_indices}, classes={self.class_count})"
        )


def forward_all_exits(net: MultiExitNet, x, params=None) -> list:
    """Probability vectors from every exit head, shallowest first.

    Accepts a single sample or a batch; a single (d,) / (C,H,W) input yields
    K vectors of shape (classes,), a batch yields K arrays of shape
    (batch, classes). Rows are softmax outputs, so they sum to 1.
    """
    return [nm.softmax(l) for l in net.forward_exit_logits(x, params=params)]


def flops_to_exit(net: MultiExitNet, exit_index: int) -> int:
    """Cost of stopping at `exit_index` (1-based): all blocks up to the
    exit's block plus every head evaluated along the way."""
    if not 1 <= exit_index <= net.exit_count:
        raise ContractError(f"exit_index must lie in [1, {net.exit_count}]")
    return net._flops_to_exit[exit_index - 1]


def taken_exits(confidences: Array, strategy: OutputStrategy) -> Array:
    """Vectorized first-passing-exit rule: confidences is (batch, K) of
    per-exit max-softmax values; returns 1-based exit indices."""
    conf = np.asarray(confidences, dtype=np.float64)
    if conf.ndim != 2 or conf.shape[1] != strategy.exit_count:
        raise ContractError(
            f"confidence shape {conf.shape} does not match {strategy.exit_count} exits"
        )
    thr = np.asarray(strategy.thresholds)
    hits = conf[:, :-1] >= thr[None, :]
    full = np.concatenate([hits, np.ones((conf.shape[0], 1), dtype=bool)], axis=1)
    return full.argmax(axis=1) + 1


def cascade(net: MultiExitNet, x, strategy: OutputStrategy):
    """Batched cascade evaluation.

    Returns (exit_idx, predicted, flops, probs): 1-based exits, argmax
    classes, per-sample FLOPs and the taken exit's probability rows.
    """
    if strategy.exit_count != net.exit_count:
        raise ContractError(
            f"strategy has {strategy.exit_count} exits, net has {net.exit_count}"
        )
    xb, _ = net._check_input(nm.as_array(x))
    probs = forward_all_exits(net, xb)  # K x (B, C)
    stacked = np.stack(probs, axis=1)  # (B, K, C)
    conf = stacked.max(axis=2)
    exits = taken_exits(conf, strategy)
    rows = np.arange(stacked.shape[0])
    taken = stacked[rows, exits - 1]
    predicted = taken.argmax(axis=1)
    flops = np.asarray(net._flops_to_exit)[exits - 1]
    return exits, predicted, flops, taken


def cascade_outcomes(net: MultiExitNet, x, strategy: OutputStrategy) -> list[ExitOutcome]:
    exits, predicted, flops, taken = cascade(net, x, strategy)
    return [
        ExitOutcome(int(predicted[i]), int(exits[i]), taken[i].copy(), int(flops[i]))
        for i in range(len(exits))
    ]


def infer_with_strategy(net: MultiExitNet, x, strategy: OutputStrategy) -> ExitOutcome:
    """Cascaded inference for a single sample."""
    xv = nm.as_array(x)
    if (net.backbone.kind == "dense" and xv.ndim != 1) or (
        net.backbone.kind == "conv" and xv.ndim != 3
    ):
        raise ContractError("infer_with_strategy takes a single sample")
    return cascade_outcomes(net, xv[None], strategy)[0]


def build_evenly_partitioned(
    backbone: BackboneSpec,
    exit_count: int,
    class_count: int,
    seed: int,
    input_hw: tuple[int, int] | None = None,
) -> MultiExitNet:
    """Attach `exit_count` heads at evenly spaced depths: exit j sits after
    block ceil(j*B/K), so the last exit lands on the final block. Parameters
    are He-style initialized from `seed`; the same seed rebuilds the same
    net bit for bit."""
    exit_count = int(exit_count)
    if exit_count < 2:
        raise ContractError("exit_count must be >= 2")
    b = len(backbone.blocks)
    if exit_count > b:
        raise ContractError(f"cannot place {exit_count} exits on {b} blocks")
    indices = sorted({-(-j * b // exit_count) for j in range(1, exit_count + 1)})
    if len(indices) != exit_count:
        raise ContractError("even partition collapsed two exits onto one block")
    rng = np.random.default_rng(seed)
    params: list[Array] = []
    for blk in backbone.blocks:
        if isinstance(blk, DenseBlockSpec):
            fan_in = blk.in_width
            params.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), (blk.in_width, blk.out_width)))
            params.append(np.zeros(blk.out_width))
        else:
            fan_in = blk.in_channels * blk.kernel * blk.kernel
            params.append(
                rng.normal(0.0, np.sqrt(2.0 / fan_in), (blk.out_channels, blk.in_channels, blk.kernel, blk.kernel))
            )
            params.append(np.zeros(blk.out_channels))
    probe = MultiExitNet.__new__(MultiExitNet)  # only to reuse the feature trace
    probe.backbone = backbone
    probe.input_hw = input_hw if backbone.kind == "conv" else None
    probe.exit_indices = tuple(indices)
    probe.class_count = class_count
    feature_dims = MultiExitNet._trace_features(probe)
    for bi in indices:
        feat = feature_dims[bi - 1]
        width = feat if backbone.kind == "dense" else feat[0]
        params.append(rng.normal(0.0, np.sqrt(1.0 / width), (width, class_count)))
        params.append(np.zeros(class_count))
    return MultiExitNet(backbone, indices, class_count, params, input_hw=input_hw)


# ---------------------------------------------------------------------------
# checkpoint container


def _backbone_to_json(spec: BackboneSpec):
    blocks = []
    for blk in spec.blocks:
        if isinstance(blk, DenseBlockSpec):
            blocks.append({"kind": "dense", "in": blk.in_width, "out": blk.out_width})
        else:
            blocks.append(
                {
                    "kind": "conv",
                    "in": blk.in_channels,
                    "out": blk.out_channels,
                    "kernel": blk.kernel,
                    "stride": blk.stride,
                }
            )
    return {"activation": spec.activation, "blocks": blocks}


def _backbone_from_json(obj) -> BackboneSpec:
    blocks = []
    for b in obj["blocks"]:
        if b["kind"] == "dense":
            blocks.append(DenseBlockSpec(b["in"], b["out"]))
        elif b["kind"] == "conv":
            blocks.append(ConvBlockSpec(b["in"], b["out"], b["kernel"], b["stride"]))
        else:
            raise FormatError(f"unknown block kind {b['kind']!r}")
    return BackboneSpec(blocks=tuple(blocks), activation=obj["activation"])


def save_checkpoint(net: MultiExitNet, path) -> None:
    """Versioned binary container: magic, a JSON descriptor of the
    architecture, then every parameter array as little-endian float64 in
    declaration order. Round-trips bit-exactly."""
    desc = {
        "format_version": 1,
        "backbone": _backbone_to_json(net.backbone),
        "exit_indices": list(net.exit_indices),
        "class_count": net.class_count,
        "input_hw": list(net.input_hw) if net.input_hw else None,
    }
    blob = json.dumps(desc, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(_CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    for arr in net.parameters():
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> MultiExitNet:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(_CHECKPOINT_MAGIC) + 4:
        raise FormatError(f"checkpoint too short ({len(raw)} bytes)")
    if raw[: len(_CHECKPOINT_MAGIC)] != _CHECKPOINT_MAGIC:
        raise FormatError(
            f"bad checkpoint magic {raw[:len(_CHECKPOINT_MAGIC)]!r}, expected {_CHECKPOINT_MAGIC!r}"
        )
    off = len(_CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack_from("<I", raw, off)
    off += 4
    if off + hlen > len(raw):
        raise FormatError("checkpoint descriptor truncated")
    try:
        desc = json.loads(raw[off : off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable checkpoint descriptor: {exc}") from exc
    off += hlen
    if desc.get("format_version") != 1:
        raise FormatError(f"unsupported checkpoint version {desc.get('format_version')!r}")
    backbone = _backbone_from_json(desc["backbone"])
    input_hw = tuple(desc["input_hw"]) if desc.get("input_hw") else None

    # Reconstruct the expected parameter shapes, then check the payload size
    # before touching the data.
    shell = MultiExitNet.__new__(MultiExitNet)
    shell.backbone = backbone
    shell.input_hw = input_hw if backbone.kind == "conv" else None
    shell.exit_indices = tuple(desc["exit_indices"])
    shell.class_count = int(desc["class_count"])
    shell._feature_dims = MultiExitNet._trace_features(shell)
    shapes = MultiExitNet._param_shapes(shell)
    expected = sum(int(np.prod(s)) * 8 for s in shapes)
    actual = len(raw) - off
    if expected != actual:
        raise FormatError(f"checkpoint payload: expected {expected} bytes, got {actual}")
    params = []
    for shape in shapes:
        n = int(np.prod(shape)) * 8
        arr = np.frombuffer(raw[off : off + n], dtype="<f8").reshape(shape)
        params.append(arr.astype(np.float64))
        off += n
    return MultiExitNet(
        backbone, desc["exit_indices"], desc["class_count"], params, input_hw=input_hw
    )
