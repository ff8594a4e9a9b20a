"""A small 1-D convolutional network engine with hand-written backpropagation.

Every layer is a kernel-3, stride-1, zero-padded ("same") convolution. All
layers but the last are followed by batch normalization and a per-channel
PReLU. Tensors crossing the public API are ``[batch, channels, length]``;
internally activations are kept channels-last so each convolution is one
matrix product.
"""

from __future__ import annotations

import enum
import hashlib
import struct
import zlib
from collections.abc import Callable
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .errors import (
    CacheError,
    ChecksumError,
    DivergenceError,
    FileFormatError,
    ShapeError,
    TruncatedFileError,
)

KERNEL = 3
PAPER_PLAN = (16, 32, 64, 64, 128, 2)
BN_MOMENTUM = 0.1
BN_EPS = 1e-5
PRELU_INIT = 0.25


class Mode(str, enum.Enum):
    TRAIN = "train"
    EVAL = "eval"


@dataclass
class Layer:
    weight: np.ndarray  # [out, in, KERNEL]
    bias: np.ndarray
    gamma: np.ndarray | None = None
    beta: np.ndarray | None = None
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None
    slope: np.ndarray | None = None

    @property
    def has_bn(self) -> bool:
        return self.gamma is not None

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def trainable(self) -> dict[str, np.ndarray]:
        d = {"weight": self.weight, "bias": self.bias}
        if self.has_bn:
            d.update(gamma=self.gamma, beta=self.beta, slope=self.slope)
        return d

    def tensors(self) -> list[np.ndarray]:
        """All stored arrays in file order."""
        out = [self.weight, self.bias]
        if self.has_bn:
            out += [self.gamma, self.beta, self.running_mean, self.running_var, self.slope]
        return out


@dataclass
class ConvNetParams:
    """Weights, batch-norm statistics and PReLU slopes of the conv stack.

    ``version`` increments on every in-place change so stale forward caches
    can be detected.
    """

    layers: list[Layer]
    version: int = 0

    @classmethod
    def initialize(cls, in_channels: int, plan=PAPER_PLAN, seed: int = 0, dtype=np.float32) -> ConvNetParams:
        """Kaiming-uniform (fan-in) conv weights, zero bias, BN identity, PReLU slope 0.25."""
        rng = np.random.Generator(np.random.Philox(seed))
        layers = []
        cin = in_channels
        for i, cout in enumerate(plan):
            bound = np.sqrt(6.0 / (cin * KERNEL))
            w = rng.uniform(-bound, bound, size=(cout, cin, KERNEL)).astype(dtype)
            layer = Layer(w, np.zeros(cout, dtype))
            if i < len(plan) - 1:
                layer.gamma = np.ones(cout, dtype)
                layer.beta = np.zeros(cout, dtype)
                layer.running_mean = np.zeros(cout, dtype)
                layer.running_var = np.ones(cout, dtype)
                layer.slope = np.full(cout, PRELU_INIT, dtype)
            layers.append(layer)
            cin = cout
        return cls(layers)

    @property
    def in_channels(self) -> int:
        return self.layers[0].in_channels

    @property
    def plan(self) -> tuple[int, ...]:
        return tuple(layer.out_channels for layer in self.layers)

    @property
    def dtype(self):
        return self.layers[0].weight.dtype

    def named_parameters(self):
        for i, layer in enumerate(self.layers):
            for name, arr in layer.trainable().items():
                yield f"{i}.{name}", arr

    def get(self, name: str) -> np.ndarray:
        i, attr = name.split(".")
        return getattr(self.layers[int(i)], attr)

    def num_parameters(self) -> int:
        return sum(a.size for _, a in self.named_parameters())

    def copy(self, dtype=None) -> ConvNetParams:
        def cp(a):
            return None if a is None else np.array(a, dtype=dtype or a.dtype)

        return ConvNetParams([Layer(*(cp(getattr(layer, f)) for f in Layer.__dataclass_fields__))
                              for layer in self.layers])

    def bump(self) -> None:
        self.version += 1

    def equal(self, other: ConvNetParams) -> bool:
        """Bitwise equality of every stored tensor."""
        if self.plan != other.plan or self.in_channels != other.in_channels:
            return False
        return all(
            a.dtype == b.dtype and a.tobytes() == b.tobytes()
            for la, lb in zip(self.layers, other.layers)
            for a, b in zip(la.tensors(), lb.tensors())
        )

    def digest(self) -> str:
        h = hashlib.sha256()
        for layer in self.layers:
            for a in layer.tensors():
                h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()


@dataclass
class _LayerCache:
    col: np.ndarray
    xhat: np.ndarray | None = None
    inv_std: np.ndarray | None = None


@dataclass
class ForwardCache:
    params_id: int
    version: int
    mode: Mode
    shape: tuple
    layers: list[_LayerCache] = field(default_factory=list)

    def active_masks(self, params: ConvNetParams) -> list[np.ndarray]:
        """Boolean PReLU sign pattern of every hidden layer."""
        masks = []
        for layer, lc in zip(params.layers, self.layers):
            if lc.xhat is not None:
                m = np.empty(lc.xhat.shape, dtype=np.bool_)
                _kernels.active_mask(lc.xhat, layer.gamma, layer.beta, m)
                masks.append(m)
        return masks


def _im2col(x: np.ndarray) -> np.ndarray:
    """``[B, L, C]`` -> ``[B*L, 3C]`` with block ``k`` holding ``x[t + k - 1]`` (zero outside)."""
    b, n, c = x.shape
    col = np.empty((b, n, KERNEL * c), dtype=x.dtype)
    col[:, :, c : 2 * c] = x
    col[:, 1:, :c] = x[:, :-1]
    col[:, 0, :c] = 0
    col[:, :-1, 2 * c :] = x[:, 1:]
    col[:, -1, 2 * c :] = 0
    return col.reshape(b * n, KERNEL * c)


def _weight_matrix(w: np.ndarray) -> np.ndarray:
    """``[out, in, 3]`` -> ``[3*in, out]`` matching :func:`_im2col` ordering."""
    return w.transpose(2, 1, 0).reshape(-1, w.shape[0])


def _conv_backward(col, dz, w, shape, need_dx=True):
    """Gradients of ``z = col @ W + b`` for weight, bias and (optionally) the layer input."""
    b, n, c = shape
    dwm = col.T @ dz
    dw = dwm.reshape(KERNEL, c, -1).transpose(2, 1, 0)
    db = dz.sum(axis=0)
    if not need_dx:
        return dw, db, None
    dcol = (dz @ _weight_matrix(w).T).reshape(b, n, KERNEL * c)
    dx = dcol[:, :, c : 2 * c].copy()
    dx[:, :-1] += dcol[:, 1:, :c]
    dx[:, 1:] += dcol[:, :-1, 2 * c :]
    return dw, db, dx


def net_forward(params: ConvNetParams, x: np.ndarray, mode: Mode = Mode.EVAL) -> tuple[np.ndarray, ForwardCache]:
    """Run the network on ``x`` of shape ``[batch, in_channels, length]``.

    Train mode normalizes with batch statistics and updates the running
    statistics in place; eval mode uses the running statistics and leaves
    ``params`` untouched. Any length works; the networks are trained on
    128-sample windows.

    Returns:
        Output ``[batch, out_channels, length]`` and the cache for :func:`net_backward`.
    """
    mode = Mode(mode)
    x = np.asarray(x)
    if x.ndim != 3 or x.shape[1] != params.in_channels:
        raise ShapeError(f"expected [batch, {params.in_channels}, length], got {x.shape}")
    b, _, n = x.shape
    dt = params.dtype
    a = np.ascontiguousarray(x.transpose(0, 2, 1), dtype=dt)
    cache = ForwardCache(id(params), params.version, mode, x.shape)
    last = len(params.layers) - 1
    for i, layer in enumerate(params.layers):
        col = _im2col(a)
        # per-example matmul keeps each row's result independent of the batch size
        z = (col.reshape(b, n, -1) @ _weight_matrix(layer.weight)).reshape(b * n, -1)
        lc = _LayerCache(col)
        if i < last:
            xhat = np.empty_like(z)
            out = np.empty_like(z)
            if mode is Mode.TRAIN:
                mu = np.empty(z.shape[1], dtype=dt)
                var = np.empty(z.shape[1], dtype=dt)
                inv = _kernels.bn_prelu_train(z, layer.bias, layer.gamma, layer.beta, layer.slope,
                                              BN_EPS, xhat, out, mu, var)
                m = z.shape[0]
                layer.running_mean *= 1 - BN_MOMENTUM
                layer.running_mean += BN_MOMENTUM * mu
                layer.running_var *= 1 - BN_MOMENTUM
                layer.running_var += BN_MOMENTUM * var * (m / max(m - 1, 1))
            else:
                inv = (1.0 / np.sqrt(layer.running_var + BN_EPS)).astype(dt)
                _kernels.bn_prelu_eval(z, layer.bias, layer.gamma, layer.beta, layer.slope,
                                       layer.running_mean, inv, xhat, out)
            lc.xhat, lc.inv_std = xhat, inv
            z = out
        else:
            z += layer.bias
        cache.layers.append(lc)
        a = z.reshape(b, n, -1)
    return a.transpose(0, 2, 1), cache


def net_backward(params: ConvNetParams, cache: ForwardCache, grad_out: np.ndarray,
                 param_grads: bool = True, input_grad: bool = True):
    """Backpropagate ``grad_out`` (``[batch, out_channels, length]``) through a forward pass.

    Returns:
        ``(grads, dx)``: a dict of parameter gradients keyed like
        :meth:`ConvNetParams.named_parameters` (``None`` if not requested) and
        the input gradient ``[batch, in_channels, length]`` (``None`` if not requested).

    Raises:
        CacheError: if the cache came from different or since-modified parameters.
    """
    if cache.params_id != id(params) or cache.version != params.version:
        raise CacheError("forward cache does not belong to the current parameters")
    b, _, n = cache.shape
    g = np.asarray(grad_out)
    if g.shape != (b, params.layers[-1].out_channels, n):
        raise ShapeError(f"grad_out shape {g.shape} does not match forward output")
    dt = params.dtype
    d = np.ascontiguousarray(g.transpose(0, 2, 1), dtype=dt).reshape(b * n, -1)
    grads = {} if param_grads else None
    last = len(params.layers) - 1
    for i in range(last, -1, -1):
        layer, lc = params.layers[i], cache.layers[i]
        if i < last:
            c = layer.out_channels
            dz = np.empty_like(d)
            dgamma, dbeta, dslope = (np.empty(c, dtype=dt) for _ in range(3))
            _kernels.bn_prelu_backward(d, lc.xhat, layer.gamma, layer.beta, layer.slope, lc.inv_std,
                                       cache.mode is Mode.TRAIN, dz, dgamma, dbeta, dslope)
            if param_grads:
                grads[f"{i}.gamma"] = dgamma
                grads[f"{i}.beta"] = dbeta
                grads[f"{i}.slope"] = dslope
            d = dz
        need_dx = i > 0 or input_grad
        dw, db, dx = _conv_backward(lc.col, d, layer.weight, (b, n, layer.in_channels), need_dx)
        if param_grads:
            grads[f"{i}.weight"] = dw
            grads[f"{i}.bias"] = db
        if dx is not None:
            d = dx.reshape(b * n, -1)
    dx_out = d.reshape(b, n, -1).transpose(0, 2, 1) if input_grad else None
    return grads, dx_out


@dataclass
class AdamState:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: ConvNetParams, grads: dict, state: AdamState) -> tuple[ConvNetParams, AdamState]:
    """One bias-corrected Adam update, applied in place.

    Raises:
        DivergenceError: if any gradient is non-finite (``layer`` names the first offender).
    """
    for name, arr in params.named_parameters():
        g = grads[name]
        if g.shape != arr.shape:
            raise ShapeError(f"gradient {name} has shape {g.shape}, expected {arr.shape}")
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient in {name}", layer=int(name.split(".")[0]))
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, arr in params.named_parameters():
        g = grads[name].astype(arr.dtype, copy=False)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(arr)
            state.v[name] = np.zeros_like(arr)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        arr -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(arr.dtype)
    params.bump()
    return params, state


@dataclass
class GradCheckResult:
    max_rel_error: float
    per_tensor: dict[str, float]
    checked: int
    skipped: int = 0

    @property
    def worst(self) -> str:
        return max(self.per_tensor, key=self.per_tensor.get)

    def flagged(self, tol: float) -> list[str]:
        return [k for k, e in self.per_tensor.items() if e > tol]

    def flagged_layers(self, tol: float) -> list[int]:
        return sorted({int(k.split(".")[0]) for k in self.flagged(tol) if k[0].isdigit()})


LossFn = Callable[[np.ndarray], "tuple[float, np.ndarray]"]


def grad_check(params: ConvNetParams, x: np.ndarray, loss_fn: LossFn, h: float = 1e-3,
               mode: Mode = Mode.TRAIN, fraction: float = 0.01, seed: int = 0,
               dtype=np.float64, check_input: bool = False) -> GradCheckResult:
    """Compare analytic gradients with central differences.

    ``loss_fn(output) -> (loss, d loss / d output)``. A random ``fraction`` of
    each weight tensor is probed (at least one entry) together with every
    PReLU slope and batch-norm gamma; with ``check_input`` a random subset of
    input entries is probed too. The check runs on a ``dtype`` copy of the
    parameters, so ``params`` is not modified.

    Probes whose ``±h`` perturbation flips the sign of any PReLU input straddle
    a kink where the loss is not differentiable; they are skipped and counted
    in ``skipped``. Relative error is ``|a - n| / max(|a|, |n|, floor)``, the
    floor being ``1e-4`` times the largest analytic gradient magnitude probed.
    """
    p = params.copy(dtype=dtype)
    x = np.array(x, dtype=dtype)
    rng = np.random.Generator(np.random.Philox(seed))

    out, cache = net_forward(p, x, mode)
    base_masks = cache.active_masks(p)
    _, gout = loss_fn(out)
    grads, dx = net_backward(p, cache, gout, input_grad=check_input)

    def loss_at():
        o, c = net_forward(p, x, mode)
        smooth = all(np.array_equal(m, b) for m, b in zip(c.active_masks(p), base_masks))
        return float(loss_fn(o)[0]), smooth

    probes = []
    for name, arr in p.named_parameters():
        attr = name.split(".")[1]
        if attr in ("slope", "gamma"):
            idx = np.arange(arr.size)
        else:
            k = max(1, int(np.ceil(fraction * arr.size)))
            idx = rng.choice(arr.size, size=min(k, arr.size), replace=False)
        probes.append((name, arr.reshape(-1), grads[name].reshape(-1), idx))
    if check_input:
        k = max(1, int(np.ceil(max(fraction, 0.05) * x.size)))
        probes.append(("input", x.reshape(-1), dx.reshape(-1), rng.choice(x.size, size=min(k, x.size), replace=False)))

    analytic, numeric, names = [], [], []
    skipped = 0
    for name, flat, gflat, idx in probes:
        for j in idx:
            orig = flat[j]
            flat[j] = orig + h
            lp, sp = loss_at()
            flat[j] = orig - h
            lm, sm = loss_at()
            flat[j] = orig
            if not (sp and sm):
                skipped += 1
                continue
            analytic.append(gflat[j])
            numeric.append((lp - lm) / (2 * h))
            names.append(name)
    a = np.asarray(analytic)
    nmr = np.asarray(numeric)
    floor = 1e-4 * max(np.max(np.abs(a)), 1e-300)
    rel = np.abs(a - nmr) / np.maximum(np.maximum(np.abs(a), np.abs(nmr)), floor)
    per = {}
    for name, r in zip(names, rel):
        per[name] = max(per.get(name, 0.0), float(r))
    return GradCheckResult(float(rel.max()), per, len(rel), skipped)


_MAGIC = b"DPN1"


def save_params(params: ConvNetParams, path) -> None:
    """Write the ``DPN1`` weight file: header, layer table, float32 tensors, CRC32 trailer."""
    body = bytearray(_MAGIC)
    body += struct.pack("<I", len(params.layers))
    for layer in params.layers:
        body += struct.pack("<IIB", layer.in_channels, layer.out_channels, int(layer.has_bn))
    for layer in params.layers:
        for t in layer.tensors():
            body += np.ascontiguousarray(t, dtype="<f4").tobytes()
    body += struct.pack("<I", zlib.crc32(body))
    Path(path).write_bytes(bytes(body))


def load_params(path, expect_in_channels: int | None = None, expect_plan=None) -> ConvNetParams:
    """Read a ``DPN1`` file, optionally checking its channel plan.

    Raises:
        FileFormatError: bad magic.
        TruncatedFileError: file shorter than the layer table promises.
        ChecksumError: CRC mismatch.
        ShapeError: channel plan differs from ``expect_plan`` / ``expect_in_channels``.
    """
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise TruncatedFileError(f"{path}: too short")
    if data[:4] != _MAGIC:
        raise FileFormatError(f"{path}: bad magic {data[:4]!r}")
    (nl,) = struct.unpack_from("<I", data, 4)
    off = 8
    table = []
    for _ in range(nl):
        if off + 9 > len(data):
            raise TruncatedFileError(f"{path}: layer table truncated")
        table.append(struct.unpack_from("<IIB", data, off))
        off += 9
    sizes = []
    for cin, cout, bn in table:
        sizes.append([(cout, cin, KERNEL), (cout,)] + ([(cout,)] * 5 if bn else []))
    need = off + 4 * sum(int(np.prod(s)) for layer in sizes for s in layer) + 4
    if len(data) < need:
        raise TruncatedFileError(f"{path}: expected {need} bytes, found {len(data)}")
    if len(data) > need:
        raise FileFormatError(f"{path}: {len(data) - need} trailing bytes")
    (crc,) = struct.unpack_from("<I", data, need - 4)
    if zlib.crc32(data[: need - 4]) != crc:
        raise ChecksumError(f"{path}: checksum mismatch")
    layers = []
    for (cin, cout, bn), shapes in zip(table, sizes):
        arrs = []
        for s in shapes:
            count = int(np.prod(s))
            arrs.append(np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(s).astype(np.float32))
            off += 4 * count
        layers.append(Layer(*arrs) if bn else Layer(arrs[0], arrs[1]))
    params = ConvNetParams(layers)
    if expect_in_channels is not None and params.in_channels != expect_in_channels:
        raise ShapeError(f"{path}: network takes {params.in_channels} input channels, expected {expect_in_channels}")
    if expect_plan is not None and params.plan != tuple(expect_plan):
        raise ShapeError(f"{path}: channel plan {params.plan} differs from expected {tuple(expect_plan)}")
    return params
