"""Shared convolutional backbone with positive (pcc) and negative (ncc) heads.

Layout is NHWC. The backbone is

    conv3x3(same) -> ReLU -> maxpool2 -> conv3x3(same) -> ReLU -> maxpool2 -> GAP

giving D = conv2 channels features; each head is a D -> C affine map followed
by softmax. Gradients are written out by hand for this fixed layer
vocabulary. Reductions go through numpy matmul/sum in a fixed order, so a
given (params, batch) reproduces bit-for-bit on one machine and BLAS build.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import losses
from .losses import LossReport, NegativeMask
from .selection import BatchPartition

Params = dict[str, np.ndarray]

BACKBONE_KEYS = ("conv1.w", "conv1.b", "conv2.w", "conv2.b")
HEAD_KEYS = ("pcc.w", "pcc.b", "ncc.w", "ncc.b")
PARAM_KEYS = BACKBONE_KEYS + HEAD_KEYS


@dataclass(frozen=True)
class ArchConfig:
    num_classes: int = 7
    conv1_channels: int = 16
    conv2_channels: int = 32
    in_channels: int = 1

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"num_classes must satisfy C >= 2, got {self.num_classes}")
        if self.feature_dim < 1:
            raise ValueError(f"feature dimension must satisfy D >= 1, got {self.feature_dim}")
        if self.conv1_channels < 1 or self.in_channels < 1:
            raise ValueError("channel counts must be positive")

    @property
    def feature_dim(self) -> int:
        return self.conv2_channels

    @classmethod
    def from_params(cls, params: Params) -> "ArchConfig":
        kh, kw, cin, c1 = params["conv1.w"].shape
        return cls(
            num_classes=params["pcc.w"].shape[1],
            conv1_channels=c1,
            conv2_channels=params["conv2.w"].shape[3],
            in_channels=cin,
        )


def param_shapes(arch: ArchConfig) -> dict[str, tuple[int, ...]]:
    d, c = arch.feature_dim, arch.num_classes
    return {
        "conv1.w": (3, 3, arch.in_channels, arch.conv1_channels),
        "conv1.b": (arch.conv1_channels,),
        "conv2.w": (3, 3, arch.conv1_channels, arch.conv2_channels),
        "conv2.b": (arch.conv2_channels,),
        "pcc.w": (d, c),
        "pcc.b": (c,),
        "ncc.w": (d, c),
        "ncc.b": (c,),
    }


def num_parameters(params: Params) -> int:
    return sum(p.size for p in params.values())


def init_params(arch: ArchConfig, seed: int = 0, dtype=np.float64) -> Params:
    """Fan-in scaled uniform weights, zero biases.

    Conv weights use U(-sqrt(6/fan_in), sqrt(6/fan_in)) (ReLU gain); head
    weights use U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(arch).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=dtype)
            continue
        fan_in = int(np.prod(shape[:-1]))
        bound = math.sqrt(6.0 / fan_in) if name.startswith("conv") else 1.0 / math.sqrt(fan_in)
        params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return params


def init_std(name: str, shape: tuple[int, ...]) -> float:
    """Standard deviation targeted by init_params for a weight tensor."""
    fan_in = int(np.prod(shape[:-1]))
    bound = math.sqrt(6.0 / fan_in) if name.startswith("conv") else 1.0 / math.sqrt(fan_in)
    return bound / math.sqrt(3.0)


def copy_params(params: Params) -> Params:
    return {k: v.copy() for k, v in params.items()}


def cast_params(params: Params, dtype) -> Params:
    return {k: v.astype(dtype) for k, v in params.items()}


# --------------------------------------------------------------------------
# layers


def _im2col(x: np.ndarray) -> np.ndarray:
    """(N, H, W, C) -> (N*H*W, 9*C) patches of a zero-padded 3x3 'same' conv."""
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))  # N,H,W,C,3,3
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, 9 * c)


def _maxpool(z: np.ndarray):
    """2x2/2 max pool: rows pair first, then columns; ties keep the first."""
    n, h, w, c = z.shape
    r = z.reshape(n, h // 2, 2, w // 2, 2 * c)
    top, bottom = r[:, :, 0], r[:, :, 1]
    pick_row = bottom > top
    m = np.maximum(top, bottom).reshape(n, h // 2, w // 2, 2, c)
    left, right = m[:, :, :, 0], m[:, :, :, 1]
    pick_col = right > left
    return np.maximum(left, right), (pick_row, pick_col)


def _unpool(d: np.ndarray, picks) -> np.ndarray:
    pick_row, pick_col = picks
    n, h2, w2, c = d.shape
    dm = np.empty((n, h2, w2, 2, c), dtype=d.dtype)
    np.multiply(d, pick_col, out=dm[:, :, :, 1])
    np.subtract(d, dm[:, :, :, 1], out=dm[:, :, :, 0])
    dm = dm.reshape(n, h2, w2, 2 * c)
    out = np.empty((n, h2, 2, w2, 2 * c), dtype=d.dtype)
    np.multiply(dm, pick_row, out=out[:, :, 1])
    np.subtract(dm, out[:, :, 1], out=out[:, :, 0])
    return out.reshape(n, 2 * h2, 2 * w2, c)


def _conv_pool_relu(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """conv3x3(same) -> maxpool2 -> ReLU.

    Pooling before the ReLU gives the same values as ReLU-then-pool (ReLU is
    monotone) on a quarter of the elements.
    """
    n, h, wd, _ = x.shape
    cout = w.shape[-1]
    cols = _im2col(x)
    z = (cols @ w.reshape(-1, cout) + b).reshape(n, h, wd, cout)
    pz, choice = _maxpool(z)
    return np.maximum(pz, 0), (cols, pz, choice, x.shape)


def _conv_pool_relu_backward(dout: np.ndarray, w: np.ndarray, cache, need_input_grad: bool):
    cols, pz, choice, x_shape = cache
    cout = w.shape[-1]
    dpz = dout * (pz > 0)
    dz = _unpool(dpz, choice)
    dw = (cols.T @ dz.reshape(-1, cout)).reshape(w.shape)
    db = dpz.sum(axis=(0, 1, 2))
    dx = None
    if need_input_grad:
        n, h, wd, cin = x_shape
        dxp = np.zeros((n, h + 2, wd + 2, cin), dtype=dout.dtype)
        for a in range(3):
            for bb in range(3):
                dxp[:, a : a + h, bb : bb + wd] += dz @ w[a, bb].T
        dx = dxp[:, 1:-1, 1:-1]
    return dx, dw, db


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _as_input(images: np.ndarray, dtype) -> np.ndarray:
    x = np.asarray(images, dtype=dtype)
    if x.ndim == 3:
        x = x[..., None]
    if x.ndim != 4:
        raise ValueError(f"expected (N, H, W) images, got shape {np.shape(images)}")
    if x.shape[1] % 4 or x.shape[2] % 4:
        raise ValueError(f"image sides must be multiples of 4, got {x.shape[1:3]}")
    return x


def backbone_forward(params: Params, images: np.ndarray):
    x = _as_input(images, params["conv1.w"].dtype)
    if x.shape[-1] != params["conv1.w"].shape[2]:
        raise ValueError("input channel count does not match conv1")
    h1, c1 = _conv_pool_relu(x, params["conv1.w"], params["conv1.b"])
    h2, c2 = _conv_pool_relu(h1, params["conv2.w"], params["conv2.b"])
    feats = h2.mean(axis=(1, 2))
    return feats, (c1, c2, h2.shape)


def backbone_backward(params: Params, dfeats: np.ndarray, cache) -> dict[str, np.ndarray]:
    c1, c2, h2_shape = cache
    n, h, w, _ = h2_shape
    dh2 = np.broadcast_to((dfeats / (h * w))[:, None, None, :], h2_shape)
    dh1, dw2, db2 = _conv_pool_relu_backward(dh2, params["conv2.w"], c2, True)
    _, dw1, db1 = _conv_pool_relu_backward(dh1, params["conv1.w"], c1, False)
    return {"conv1.w": dw1, "conv1.b": db1, "conv2.w": dw2, "conv2.b": db2}


# --------------------------------------------------------------------------
# forward / backward


@dataclass
class PredictionBundle:
    p_w_p: np.ndarray
    p_w_n: np.ndarray
    features_w: np.ndarray
    p_s_p: np.ndarray | None = None
    p_s_n: np.ndarray | None = None
    features_s: np.ndarray | None = None
    _tape: tuple | None = field(default=None, repr=False)


def forward(params: Params, weak_batch: np.ndarray, strong_batch: np.ndarray | None = None) -> PredictionBundle:
    """Both heads on the weak view and, if given, the strong view.

    The two views go through the backbone as one stacked batch; the returned
    bundle keeps the activations so ``backward`` can reuse them.
    """
    weak_batch = np.asarray(weak_batch)
    n = len(weak_batch)
    if strong_batch is not None:
        strong_batch = np.asarray(strong_batch)
        if strong_batch.shape != weak_batch.shape:
            raise ValueError(
                f"weak and strong batches differ in shape: {weak_batch.shape} vs {strong_batch.shape}"
            )
        stacked = np.concatenate([weak_batch, strong_batch])
    else:
        stacked = weak_batch
    feats, cache = backbone_forward(params, stacked)
    zp = feats @ params["pcc.w"] + params["pcc.b"]
    zn = feats @ params["ncc.w"] + params["ncc.b"]
    pp, pn = softmax(zp), softmax(zn)
    bundle = PredictionBundle(p_w_p=pp[:n], p_w_n=pn[:n], features_w=feats[:n])
    if strong_batch is not None:
        bundle.p_s_p, bundle.p_s_n, bundle.features_s = pp[n:], pn[n:], feats[n:]
    bundle._tape = (id(params), stacked.shape, feats, cache)
    return bundle


def predict(params: Params, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """pcc probabilities for un-augmented images."""
    out = []
    for start in range(0, len(images), batch_size):
        feats, _ = backbone_forward(params, images[start : start + batch_size])
        out.append(softmax(feats @ params["pcc.w"] + params["pcc.b"]))
    if not out:
        return np.zeros((0, params["pcc.w"].shape[1]))
    return np.concatenate(out)


@dataclass(frozen=True)
class LossTerms:
    """Which loss terms are live and which head the consistency term uses.

    ``consistency_head="pcc"`` is the single-classifier ablation.
    """

    supervised: bool = True
    consistency: bool = True
    consistency_head: str = "ncc"

    def __post_init__(self):
        if self.consistency_head not in ("ncc", "pcc"):
            raise ValueError(f"consistency_head must be 'ncc' or 'pcc', got {self.consistency_head!r}")


@dataclass
class Batch:
    weak: np.ndarray
    labels: np.ndarray
    strong: np.ndarray | None = None


@dataclass
class GradientReport:
    grads: dict[str, np.ndarray]
    loss: LossReport

    @property
    def value(self) -> float:
        return self.loss.L_overall


def _tape_usable(bundle, params: Params, n: int, need_strong: bool) -> bool:
    if bundle is None or bundle._tape is None or bundle._tape[0] != id(params):
        return False
    rows = bundle._tape[1][0]
    return rows == 2 * n if need_strong else rows in (n, 2 * n)


def backward(
    params: Params,
    batch: Batch,
    partition: BatchPartition,
    mask: NegativeMask | None,
    hyper: LossTerms = LossTerms(),
    bundle: PredictionBundle | None = None,
) -> GradientReport:
    """Loss and exact gradient of L_s + L_c for a fixed partition and mask.

    L_s: cross-entropy of pcc on the weak view over confident rows.
    L_c: masked consistency from the weak view (constant target) to the
    strong view, over non-confident rows, on ``hyper.consistency_head``.
    """
    labels = np.asarray(batch.labels, dtype=np.int64)
    n = len(labels)
    use_cons = hyper.consistency and len(partition.non_confident) > 0
    if use_cons and batch.strong is None:
        raise ValueError("consistency term needs a strong view")
    if use_cons and mask is None:
        raise ValueError("consistency term needs a mask")
    if partition.size != n:
        raise ValueError(f"partition covers {partition.size} samples, batch has {n}")

    if not _tape_usable(bundle, params, n, use_cons):
        bundle = forward(params, batch.weak, batch.strong if use_cons else None)
    _, stacked_shape, feats, cache = bundle._tape
    m = stacked_shape[0]
    c = params["pcc.w"].shape[1]
    dz = {"pcc": np.zeros((m, c), dtype=feats.dtype), "ncc": np.zeros((m, c), dtype=feats.dtype)}

    conf = partition.confident
    nonconf = partition.non_confident
    L_s = L_c = 0.0
    clamped = 0
    if hyper.supervised and len(conf):
        p = bundle.p_w_p[conf]
        L_s = losses.supervised_ce(p, labels[conf])
        dz["pcc"][conf] += losses.supervised_ce_logit_grad(p, labels[conf])
        clamped += losses.count_clamped(p[np.arange(len(conf)), labels[conf]])
    if use_cons:
        head = hyper.consistency_head
        target = bundle.p_w_n if head == "ncc" else bundle.p_w_p
        live = bundle.p_s_n if head == "ncc" else bundle.p_s_p
        L_c = losses.masked_consistency(target, live, mask, nonconf)
        dz[head][n:] += losses.masked_consistency_logit_grad(target, live, mask, nonconf)
        clamped += losses.count_clamped(np.where(mask.mask[nonconf] == 1, live[nonconf], 1.0))

    grads: dict[str, np.ndarray] = {}
    dfeats = np.zeros_like(feats)
    for head in ("pcc", "ncc"):
        w = params[f"{head}.w"]
        grads[f"{head}.w"] = feats.T @ dz[head]
        grads[f"{head}.b"] = dz[head].sum(axis=0)
        dfeats += dz[head] @ w.T
    grads.update(backbone_backward(params, dfeats, cache))
    # backprop order, so the first name listed is where the non-finite value entered
    bad = [name for name in HEAD_KEYS + BACKBONE_KEYS[::-1] if not np.all(np.isfinite(grads[name]))]
    if bad:
        raise FloatingPointError(f"non-finite gradient in parameter block {bad[0]!r} (also: {bad[1:]})")
    report = losses.combine(
        L_s, L_c, len(conf) if hyper.supervised else 0, len(nonconf) if use_cons else 0,
        {"clamped": clamped} if clamped else None,
    )
    return GradientReport(grads={k: grads[k] for k in PARAM_KEYS}, loss=report)


def activation_pattern(bundle: PredictionBundle) -> tuple[np.ndarray, ...]:
    """ReLU signs and max-pool choices of the forward pass behind ``bundle``.

    The loss is smooth in the parameters wherever this pattern is constant.
    """
    _, _, _, (c1, c2, _) = bundle._tape
    out = []
    for _, pz, (pick_row, pick_col), _ in (c1, c2):
        out += [pz > 0, pick_row, pick_col]
    return tuple(out)


def loss_value(params: Params, batch: Batch, partition: BatchPartition, mask: NegativeMask | None,
               hyper: LossTerms = LossTerms(), target: np.ndarray | None = None,
               with_pattern: bool = False):
    """Forward-only loss with the same fixed partition and mask.

    ``target`` overrides the weak-view consistency target; passing the value
    computed at other parameters makes the stop-gradient explicit.
    """
    labels = np.asarray(batch.labels, dtype=np.int64)
    use_cons = hyper.consistency and len(partition.non_confident) > 0
    b = forward(params, batch.weak, batch.strong if use_cons else None)
    total = 0.0
    if hyper.supervised:
        total += losses.supervised_ce(b.p_w_p[partition.confident], labels[partition.confident])
    if use_cons:
        head_w, head_s = (b.p_w_n, b.p_s_n) if hyper.consistency_head == "ncc" else (b.p_w_p, b.p_s_p)
        total += losses.masked_consistency(head_w if target is None else target, head_s, mask,
                                           partition.non_confident)
    if with_pattern:
        return total, activation_pattern(b)
    return total


def consistency_target(params: Params, weak: np.ndarray, hyper: LossTerms = LossTerms()) -> np.ndarray:
    b = forward(params, weak)
    return b.p_w_n if hyper.consistency_head == "ncc" else b.p_w_p


# --------------------------------------------------------------------------
# finite-difference check


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    worst_index: tuple
    tolerance: float
    per_param: dict[str, float]
    kink_crossings: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    """||a - n|| / max(||a||, ||n||) over one parameter block.

    Per-entry ratios are not used: central differences carry an O(eps^2)
    truncation error that dominates entries many orders below the block scale.
    """
    scale = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)), floor)
    return float(np.linalg.norm(analytic - numeric)) / scale


def _same_pattern(a, b) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def numerical_gradient(fn, params: Params, eps: float = 1e-3, pattern_fn=None):
    """Central differences of ``fn(params)`` w.r.t. every parameter entry.

    With ``pattern_fn`` (returning ``(value, pattern)``) also counts entries
    whose +-eps probes change the activation pattern, i.e. where the central
    difference straddles a kink and is not a valid derivative estimate.
    """
    grads = {}
    crossings = 0
    if pattern_fn is not None:
        _, base = pattern_fn(params)
    for name, p in params.items():
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            if pattern_fn is None:
                plus = fn(params)
            else:
                plus, pat_plus = pattern_fn(params)
            flat[i] = orig - eps
            if pattern_fn is None:
                minus = fn(params)
            else:
                minus, pat_minus = pattern_fn(params)
                crossings += not (_same_pattern(base, pat_plus) and _same_pattern(base, pat_minus))
            flat[i] = orig
            gflat[i] = (plus - minus) / (2 * eps)
        grads[name] = g
    if pattern_fn is None:
        return grads
    return grads, crossings


def grad_check(
    params: Params,
    batch: Batch,
    partition: BatchPartition,
    mask: NegativeMask | None,
    hyper: LossTerms = LossTerms(),
    tolerance: float = 1e-4,
    eps: float = 1e-3,
) -> GradCheckReport:
    """Compare ``backward`` against central differences of ``loss_value``.

    Partition, mask and the consistency target are held fixed, so the
    differentiated function is one step's loss with selection treated as data
    and the stop-gradient made explicit. ``kink_crossings`` counts parameter
    entries whose probes changed the ReLU/max-pool pattern.
    """
    if num_parameters(params) > 10_000:
        raise ValueError("grad_check is meant for nets with at most 10k parameters")
    params = cast_params(params, np.float64)
    batch = Batch(
        weak=np.asarray(batch.weak, dtype=np.float64),
        labels=batch.labels,
        strong=None if batch.strong is None else np.asarray(batch.strong, dtype=np.float64),
    )
    analytic = backward(params, batch, partition, mask, hyper).grads
    target = consistency_target(params, batch.weak, hyper)
    numeric, crossings = numerical_gradient(
        None,
        params,
        eps,
        pattern_fn=lambda p: loss_value(p, batch, partition, mask, hyper, target=target, with_pattern=True),
    )
    per_param = {name: relative_error(analytic[name], numeric[name]) for name in PARAM_KEYS}
    worst_name = max(PARAM_KEYS, key=per_param.__getitem__)
    diff = np.abs(analytic[worst_name] - numeric[worst_name])
    worst_idx = tuple(int(i) for i in np.unravel_index(int(np.argmax(diff)), diff.shape))
    return GradCheckReport(per_param[worst_name], worst_name, worst_idx, tolerance, per_param, crossings)


# --------------------------------------------------------------------------
# NCPT v1 checkpoints

CKPT_MAGIC = b"NCPT"
CKPT_VERSION = 1


class CheckpointFormatError(ValueError):
    pass


def encode_checkpoint(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [CKPT_MAGIC, struct.pack("<BI", CKPT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_checkpoint(data: bytes) -> dict[str, np.ndarray]:
    if data[:4] != CKPT_MAGIC:
        raise CheckpointFormatError(f"bad magic {data[:4]!r}, expected {CKPT_MAGIC!r}")
    if len(data) < 13:
        raise CheckpointFormatError(f"truncated checkpoint: {len(data)} bytes")
    (stored,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != stored:
        raise CheckpointFormatError("checkpoint CRC32 mismatch")
    version, count = struct.unpack_from("<BI", data, 4)
    if version != CKPT_VERSION:
        raise CheckpointFormatError(f"unsupported NCPT version {version}")
    pos = 9
    out = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos : pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<B", data, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            if pos + 8 * size > len(data) - 4:
                raise CheckpointFormatError(f"truncated tensor {name!r}")
            out[name] = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(dims).astype(np.float64)
            pos += 8 * size
    except struct.error as exc:
        raise CheckpointFormatError(f"truncated checkpoint: {exc}") from None
    if pos != len(data) - 4:
        raise CheckpointFormatError("trailing bytes after last tensor")
    return out


def save_checkpoint(params: Params, path) -> None:
    Path(path).write_bytes(encode_checkpoint({k: params[k] for k in PARAM_KEYS}))


def load_checkpoint(path) -> Params:
    tensors = decode_checkpoint(Path(path).read_bytes())
    missing = set(PARAM_KEYS) - set(tensors)
    if missing:
        raise CheckpointFormatError(f"checkpoint lacks tensors {sorted(missing)}")
    return {k: tensors[k] for k in PARAM_KEYS}
