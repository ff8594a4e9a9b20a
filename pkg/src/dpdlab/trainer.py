"""Two-stage training: a conditional PA surrogate, then a pre-distorter trained through it.

Stage 1 fits the PA network (PAN) to virtual-PA recordings of several
operating conditions, the condition entering as one-hot input channels.
Stage 2 freezes the PAN and trains the pre-distortion network (PDN) so that
``PAN(PDN(x))`` matches the linear response ``g0·x``. Helpers here also cut
frames into training windows, run the PDN on streams and score results.
"""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
from collections.abc import Callable, Iterator
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from . import spectra
from .errors import ConfigError, DivergenceError, FileFormatError, ShapeError, SizeError
from .iqsig import (
    IqSignal,
    WaveformConfig,
    align,
    apply_alignment,
    generate_frame,
    ls_gain,
)
from .losses import ALL_LOSSES, LossValue, LossWeights, combined
from .mpdpd import MpCoeffs, mp_apply
from .tinynet import (
    AdamState,
    ConvNetParams,
    Mode,
    adam_step,
    load_params,
    net_backward,
    net_forward,
    save_params,
)
from .vpa import PaCondition, pa_apply, pa_preset

WINDOW = 128
HOP = 64
SMALL_SIGNAL_LEVEL = 0.01

# --------------------------------------------------------------------------- config


@dataclass(frozen=True)
class DeskScale:
    """Reduced budget for runs on a workstation or CI.

    ``lr_decay_every`` defaults to a quarter of ``epochs``.
    """

    epochs: int = 200
    windows: int = 65536
    lr_decay_every: int | None = None

    def __post_init__(self):
        if self.epochs <= 0 or self.windows <= 0:
            raise ConfigError("desk-scale epochs and windows must be positive")
        if self.lr_decay_every is not None and self.lr_decay_every <= 0:
            raise ConfigError("lr_decay_every must be positive")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 4000
    lr0: float = 0.01
    lr_decay_every: int = 1000
    lr_decay_factor: float = 10.0
    batch_pan: int = 512
    batch_pdn: int = 256
    loss_weights: LossWeights = ALL_LOSSES
    seed: int = 0
    desk_scale: DeskScale | None = None

    def __post_init__(self):
        if isinstance(self.loss_weights, dict):
            object.__setattr__(self, "loss_weights", LossWeights(**self.loss_weights))
        elif not isinstance(self.loss_weights, LossWeights):
            object.__setattr__(self, "loss_weights", LossWeights(*self.loss_weights))
        if isinstance(self.desk_scale, dict):
            object.__setattr__(self, "desk_scale", DeskScale(**self.desk_scale))
        for name in ("epochs", "lr_decay_every", "batch_pan", "batch_pdn"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v <= 0:
                raise ConfigError(f"{name} must be a positive integer")
        if min(self.batch_pan, self.batch_pdn) < 2:
            raise ConfigError("batch sizes must be at least 2 for batch normalization")
        if not (self.lr0 > 0 and self.lr_decay_factor > 0):
            raise ConfigError("lr0 and lr_decay_factor must be positive")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")

    @property
    def total_epochs(self) -> int:
        return self.desk_scale.epochs if self.desk_scale else self.epochs

    @property
    def decay_every(self) -> int:
        if self.desk_scale is None:
            return self.lr_decay_every
        return self.desk_scale.lr_decay_every or max(1, self.desk_scale.epochs // 4)

    @property
    def max_windows(self) -> int | None:
        return self.desk_scale.windows if self.desk_scale else None

    def lr_at(self, epoch: int) -> float:
        """``lr0 / factor^floor(epoch / decay_every)``."""
        return self.lr0 / self.lr_decay_factor ** (epoch // self.decay_every)

    def with_weights(self, weights: LossWeights) -> TrainConfig:
        return dataclasses.replace(self, loss_weights=weights)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


def config_hash(doc: dict) -> str:
    """SHA-256 of the canonical JSON encoding of ``doc``."""
    return hashlib.sha256(json.dumps(doc, sort_keys=True, default=str).encode()).hexdigest()


def resume_key(cfg: TrainConfig) -> str:
    """Hash of everything but the epoch budget, so a run can be resumed and extended."""
    d = cfg.to_dict()
    d.pop("epochs")
    if d["desk_scale"]:
        d["desk_scale"].pop("epochs")
    d["decay_every"] = cfg.decay_every
    return config_hash(d)


# --------------------------------------------------------------------------- layouts and windows


def to_channels(z: np.ndarray, dtype=np.float32) -> np.ndarray:
    """Complex ``[..., L]`` -> real ``[..., 2, L]``."""
    return np.stack([z.real, z.imag], axis=-2).astype(dtype)


def from_channels(a: np.ndarray) -> np.ndarray:
    """Real ``[..., 2, L]`` -> complex128 ``[..., L]``."""
    return a[..., 0, :].astype(np.float64) + 1j * a[..., 1, :].astype(np.float64)


@dataclass(frozen=True)
class PanInputLayout:
    """I, Q and one constant one-hot channel per condition.

    Conditions are kept in canonical (label) order, so the channel assignment
    does not depend on the order they were listed in.
    """

    conditions: tuple[PaCondition, ...]

    def __post_init__(self):
        conds = tuple(sorted(set(self.conditions), key=lambda c: c.label))
        if len(conds) != len(tuple(self.conditions)):
            raise ConfigError("duplicate PA conditions")
        if not conds:
            raise ConfigError("at least one condition is required")
        object.__setattr__(self, "conditions", conds)

    @property
    def channels(self) -> int:
        return 2 + len(self.conditions)

    def index(self, cond: PaCondition) -> int:
        try:
            return self.conditions.index(cond)
        except ValueError:
            raise ConfigError(f"condition {cond.label} is not part of this layout") from None

    def one_hot(self, cond: PaCondition) -> np.ndarray:
        v = np.zeros(len(self.conditions), dtype=np.float32)
        v[self.index(cond)] = 1.0
        return v

    def build(self, u: np.ndarray, cond: PaCondition) -> np.ndarray:
        """Signal tensor ``[B, 2, L]`` -> network input ``[B, 2 + C, L]``."""
        b, _, n = u.shape
        cond_ch = np.broadcast_to(self.one_hot(cond)[None, :, None], (b, len(self.conditions), n))
        return np.concatenate([u, cond_ch.astype(u.dtype)], axis=1)


@dataclass(frozen=True)
class PdnInputLayout:
    """Current block I/Q, previous transmitted block I/Q, previous PA-output block I/Q."""

    channels: int = 6


@dataclass
class Batch:
    inputs: np.ndarray  # [W, channels, WINDOW]
    targets: np.ndarray  # [W, 2, WINDOW]

    def __len__(self) -> int:
        return len(self.inputs)

    def take(self, idx) -> Batch:
        return Batch(self.inputs[idx], self.targets[idx])

    @staticmethod
    def concat(batches) -> Batch:
        batches = list(batches)
        return Batch(np.concatenate([b.inputs for b in batches]), np.concatenate([b.targets for b in batches]))


def _samples(sig) -> np.ndarray:
    return sig.samples if isinstance(sig, IqSignal) else np.asarray(sig)


def _blocks(z: np.ndarray, count: int) -> np.ndarray:
    return z[: count * WINDOW].reshape(count, WINDOW)


def make_windows(frame, layout, *, target=None, cond: PaCondition | None = None,
                 previous: tuple | None = None) -> Batch:
    """Cut a frame into contiguous, non-overlapping 128-sample windows.

    For a :class:`PanInputLayout` the targets are the matching windows of
    ``target`` (the PA output) and ``cond`` selects the one-hot channel. For a
    :class:`PdnInputLayout` the targets are the input windows themselves and
    ``previous = (transmitted, pa_output)`` fills the previous-pair channels
    from the preceding window; they are zero for the first window.
    """
    x = _samples(frame)
    count = x.size // WINDOW
    if count == 0:
        raise SizeError(f"frame of {x.size} samples is shorter than one {WINDOW}-sample window")
    xw = to_channels(_blocks(x, count))
    if isinstance(layout, PanInputLayout):
        if target is None or cond is None:
            raise ConfigError("PAN windows need a target frame and a condition")
        y = _samples(target)
        if y.shape != x.shape:
            raise ShapeError("frame and target lengths differ")
        return Batch(layout.build(xw, cond), to_channels(_blocks(y, count)))
    if isinstance(layout, PdnInputLayout):
        prev = np.zeros((count, 4, WINDOW), dtype=np.float32)
        if previous is not None:
            tx, fb = (_samples(s) for s in previous)
            if tx.shape != x.shape or fb.shape != x.shape:
                raise ShapeError("previous-pair signals must match the frame length")
            prev[1:, 0:2] = to_channels(_blocks(tx, count))[:-1]
            prev[1:, 2:4] = to_channels(_blocks(fb, count))[:-1]
        return Batch(np.concatenate([xw, prev], axis=1), xw.copy())
    raise ConfigError(f"unknown layout {layout!r}")


def epoch_order(n: int, seed: int, epoch: int, stream: int = 0) -> np.ndarray:
    """Deterministic permutation for one epoch, independent of earlier epochs."""
    rng = np.random.Generator(np.random.Philox(key=[seed % 2**64, (stream << 32) | epoch]))
    return rng.permutation(n)


def condition_draws(seed: int, epoch: int, n_batches: int, n_conditions: int) -> np.ndarray:
    """Uniform condition index for every step of one epoch."""
    rng = np.random.Generator(np.random.Philox(key=[seed % 2**64, (3 << 32) | epoch]))
    return rng.integers(n_conditions, size=n_batches)


def minibatches(n: int, batch: int, order: np.ndarray) -> Iterator[np.ndarray]:
    """Full batches only; a single short batch is kept if it is all there is."""
    if n < batch:
        yield order
        return
    for k in range(n // batch):
        yield order[k * batch : (k + 1) * batch]


# --------------------------------------------------------------------------- datasets


Dataset = dict  # PaCondition -> list[(input IqSignal, aligned PA-output IqSignal)]


def record(cond: PaCondition, x: IqSignal) -> IqSignal:
    """Virtual-PA output for ``x``, delay- and phase-aligned to ``x`` (gain kept)."""
    y = pa_apply(pa_preset(cond), x)
    return apply_alignment(y, align(x, y), gain=False)


def build_dataset(wave: WaveformConfig, seeds, conditions) -> Dataset:
    """Input frames for ``seeds`` run through every condition's virtual PA."""
    frames = [generate_frame(wave, s) for s in seeds]
    return {c: [(x, record(c, x)) for x in frames] for c in conditions}


def _limit_frames(pairs, per_condition: int | None):
    """Take whole frames, then trim windows, so each condition keeps ``per_condition`` windows."""
    if per_condition is None:
        return pairs, None
    out, have = [], 0
    for x, y in pairs:
        if have >= per_condition:
            break
        out.append((x, y))
        have += len(x) // WINDOW
    return out, per_condition


# --------------------------------------------------------------------------- logging and checkpoints


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss: LossValue
    snapshot: dict | None = None

    def to_dict(self) -> dict:
        d = {"epoch": self.epoch, "lr": self.lr, "tmse": self.loss.tmse, "fmae": self.loss.fmae,
             "fspec": self.loss.fspec, "total": self.loss.total}
        if self.snapshot is not None:
            d["eval"] = self.snapshot
        return d


@dataclass
class TrainResult:
    params: ConvNetParams
    history: list[EpochRecord]
    adam: AdamState
    extra: dict = field(default_factory=dict)

    def totals(self) -> np.ndarray:
        return np.array([r.loss.total for r in self.history])


def _save_adam(state: AdamState, path: Path) -> None:
    arrays = {f"m:{k}": v for k, v in state.m.items()}
    arrays.update({f"v:{k}": v for k, v in state.v.items()})
    arrays["_scalars"] = np.array([state.lr, state.beta1, state.beta2, state.eps, state.step], dtype=np.float64)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def _load_adam(path: Path) -> AdamState:
    with np.load(path) as z:
        lr, b1, b2, eps, step = z["_scalars"]
        st = AdamState(float(lr), float(b1), float(b2), float(eps), int(step))
        for key in z.files:
            if key.startswith("m:"):
                st.m[key[2:]] = z[key].copy()
            elif key.startswith("v:"):
                st.v[key[2:]] = z[key].copy()
    return st


@dataclass(frozen=True)
class Checkpoint:
    """``<dir>/<name>.dpn`` weights, ``.adam.npz`` optimizer state and ``.json`` manifest."""

    directory: Path
    name: str

    @property
    def weights(self) -> Path:
        return Path(self.directory) / f"{self.name}.dpn"

    @property
    def optimizer(self) -> Path:
        return Path(self.directory) / f"{self.name}.adam.npz"

    @property
    def manifest(self) -> Path:
        return Path(self.directory) / f"{self.name}.json"

    def exists(self) -> bool:
        return self.weights.exists() and self.manifest.exists()

    def save(self, params: ConvNetParams, adam: AdamState, meta: dict) -> None:
        Path(self.directory).mkdir(parents=True, exist_ok=True)
        save_params(params, self.weights)
        _save_adam(adam, self.optimizer)
        self.manifest.write_text(json.dumps(meta, indent=2, sort_keys=True))

    def load(self, in_channels: int | None = None) -> tuple[ConvNetParams, AdamState | None, dict]:
        params = load_params(self.weights, expect_in_channels=in_channels)
        try:
            meta = json.loads(self.manifest.read_text())
        except json.JSONDecodeError as exc:
            raise FileFormatError(f"{self.manifest}: {exc}") from exc
        adam = _load_adam(self.optimizer) if self.optimizer.exists() else None
        return params, adam, meta


class _Logger:
    def __init__(self, path):
        self.path = None if path is None else Path(path)
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, rec: EpochRecord) -> None:
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(rec.to_dict()) + "\n")


def _mean_loss(values: list[LossValue]) -> LossValue:
    arr = np.array([[v.total, v.tmse, v.fmae, v.fspec] for v in values])
    m = arr.mean(axis=0)
    return LossValue(*map(float, m))


# --------------------------------------------------------------------------- generic loop


def _train_loop(params: ConvNetParams, cfg: TrainConfig, n_items: int, batch: int,
                step_fn: Callable[[np.ndarray, int, int], tuple[LossValue, dict]], *, stream: int,
                start_epoch: int, adam: AdamState, history: list, logger: _Logger,
                checkpoint: Checkpoint | None, meta: dict, snapshot: Callable | None, eval_every: int):
    last_good = params.copy()
    for epoch in range(start_epoch, cfg.total_epochs):
        adam.lr = cfg.lr_at(epoch)
        vals = []
        batches = minibatches(n_items, batch, epoch_order(n_items, cfg.seed, epoch, stream))
        for k, idx in enumerate(batches):
            val, grads = step_fn(idx, epoch, k)
            if not np.isfinite(val.total):
                raise DivergenceError(f"non-finite loss at epoch {epoch}", checkpoint=last_good)
            try:
                adam_step(params, grads, adam)
            except DivergenceError as exc:
                raise DivergenceError(str(exc), layer=exc.layer, checkpoint=last_good) from exc
            vals.append(val)
        snap = snapshot(params) if snapshot and eval_every and (epoch + 1) % eval_every == 0 else None
        rec = EpochRecord(epoch, adam.lr, _mean_loss(vals), snap)
        history.append(rec)
        logger.write(rec)
        last_good = params.copy()
        if checkpoint is not None:
            checkpoint.save(params, adam, {**meta, "epoch": epoch + 1,
                                           "history": [r.to_dict() for r in history]})
    return params


def _resume(checkpoint: Checkpoint | None, resume: bool, in_channels: int, cfg: TrainConfig, meta: dict):
    if not (resume and checkpoint is not None and checkpoint.exists()):
        return None
    params, adam, saved = checkpoint.load(in_channels)
    if saved.get("resume_key") != meta["resume_key"]:
        raise ConfigError("checkpoint was written with a different configuration")
    history = [EpochRecord(h["epoch"], h["lr"], LossValue(h["total"], h["tmse"], h["fmae"], h["fspec"]),
                           h.get("eval")) for h in saved.get("history", [])]
    return params, adam or AdamState(cfg.lr0), int(saved["epoch"]), history


# --------------------------------------------------------------------------- stage 1: PAN


def pan_apply(pan: ConvNetParams, layout: PanInputLayout, u, cond: PaCondition) -> np.ndarray:
    """Eval-mode PAN over a whole signal (one forward pass, zero padding at both ends)."""
    z = _samples(u)
    inp = layout.build(to_channels(z[None], pan.dtype), cond)
    out, _ = net_forward(pan, inp, Mode.EVAL)
    return from_channels(out[0])


def train_pan(data: Dataset, cfg: TrainConfig, *, holdout: Dataset | None = None,
              log_path=None, checkpoint: Checkpoint | None = None, resume: bool = False,
              eval_every: int = 0, dataset_seeds=None) -> TrainResult:
    """Fit one conditional PAN to the PA recordings of every condition in ``data``.

    Raises:
        ConfigError: fewer than two conditions.
        DivergenceError: non-finite loss or gradient; ``checkpoint`` holds the last finite weights.
    """
    if len(data) < 2:
        raise ConfigError("PAN training needs at least two PA conditions")
    layout = PanInputLayout(tuple(data))
    per_cond = None if cfg.max_windows is None else max(1, cfg.max_windows // len(layout.conditions))
    parts = []
    for cond in layout.conditions:
        pairs, limit = _limit_frames(data[cond], per_cond)
        b = Batch.concat(make_windows(x, layout, target=y, cond=cond) for x, y in pairs)
        parts.append(b.take(slice(0, limit)))
    windows = Batch.concat(parts)

    meta = {"kind": "pan", "config": cfg.to_dict(), "config_hash": config_hash(cfg.to_dict()),
            "resume_key": resume_key(cfg),
            "conditions": [c.label for c in layout.conditions], "dataset_seeds": dataset_seeds}
    state = _resume(checkpoint, resume, layout.channels, cfg, meta)
    if state is None:
        params = ConvNetParams.initialize(layout.channels, seed=cfg.seed)
        adam, start, history = AdamState(cfg.lr0), 0, []
    else:
        params, adam, start, history = state
    w = cfg.loss_weights

    def step(idx, epoch, k):
        out, cache = net_forward(params, windows.inputs[idx], Mode.TRAIN)
        val, g = combined(windows.targets[idx], out, w)
        grads, _ = net_backward(params, cache, g, input_grad=False)
        return val, grads

    snapshot = None
    if holdout is not None:
        def snapshot(p):
            return {c.label: dataclasses.asdict(pan_fidelity(p, layout, c, holdout[c]))
                    for c in layout.conditions if c in holdout}

    _train_loop(params, cfg, len(windows), cfg.batch_pan, step, stream=1, start_epoch=start, adam=adam,
                history=history, logger=_Logger(log_path), checkpoint=checkpoint, meta=meta,
                snapshot=snapshot, eval_every=eval_every)
    return TrainResult(params, history, adam, {"layout": layout})


@dataclass(frozen=True)
class PanFidelity:
    """PAN output scored against the virtual PA on the same frames."""

    condition: str
    mse_dbc: float
    aclr_h_db: float
    aclr_l_db: float
    oracle_aclr_h_db: float
    oracle_aclr_l_db: float

    @property
    def aclr_errors_db(self) -> tuple[float, float]:
        return self.aclr_h_db - self.oracle_aclr_h_db, self.aclr_l_db - self.oracle_aclr_l_db

    @property
    def max_abs_aclr_error_db(self) -> float:
        return max(abs(e) for e in self.aclr_errors_db)


def pan_fidelity(pan: ConvNetParams, layout: PanInputLayout, cond: PaCondition, pairs) -> PanFidelity:
    ys = np.concatenate([_samples(y) for _, y in pairs])
    fs = pairs[0][0].sample_rate_hz
    yp = np.concatenate([pan_apply(pan, layout, x, cond) for x, _ in pairs])
    mine = spectra.aclr(IqSignal(yp, fs))
    ref = spectra.aclr(IqSignal(ys, fs))
    return PanFidelity(cond.label, spectra.mse_dbc(ys, yp), mine.aclr_high_db, mine.aclr_low_db,
                       ref.aclr_high_db, ref.aclr_low_db)


# --------------------------------------------------------------------------- frozen plants for stage 2


class Plant(Protocol):
    """Frozen differentiable stand-in for the PA used while training the PDN."""

    conditions: tuple

    def forward(self, u: np.ndarray, cond) -> tuple[np.ndarray, Callable[[np.ndarray], np.ndarray]]: ...

    def apply(self, u: np.ndarray, cond) -> np.ndarray: ...

    def small_signal_gain(self, x: np.ndarray, cond) -> complex: ...


class PanPlant:
    def __init__(self, pan: ConvNetParams, layout: PanInputLayout):
        if pan.in_channels != layout.channels:
            raise ShapeError("PAN input channels do not match the layout")
        self.pan, self.layout = pan, layout
        self.conditions = layout.conditions

    def forward(self, u, cond):
        out, cache = net_forward(self.pan, self.layout.build(u, cond), Mode.EVAL)

        def backward(g):
            _, dx = net_backward(self.pan, cache, g, param_grads=False, input_grad=True)
            return dx[:, :2]

        return out, backward

    def apply(self, u, cond):
        return pan_apply(self.pan, self.layout, u, cond)

    def small_signal_gain(self, x, cond):
        xs = _samples(x) * SMALL_SIGNAL_LEVEL
        return ls_gain(xs, self.apply(xs, cond))


class IdentityPlant:
    """``y = u``: the PDN target becomes the identity map."""

    def __init__(self, conditions=None):
        self.conditions = tuple(conditions) if conditions is not None else (PaCondition(),)

    def forward(self, u, cond):
        return u, lambda g: g

    def apply(self, u, cond):
        return np.asarray(u, dtype=np.complex128)

    def small_signal_gain(self, x, cond):
        return 1.0 + 0.0j


# --------------------------------------------------------------------------- stage 2: PDN


def _rms(a: np.ndarray) -> float:
    """RMS over complex samples of a ``[..., 2, L]`` tensor."""
    return float(np.sqrt(np.mean(a.astype(np.float64) ** 2) * 2.0))


def _previous_index(counts, limit: int | None) -> np.ndarray:
    """Index of the preceding window of the same frame, ``-1`` for first windows."""
    idx = []
    start = 0
    for c in counts:
        idx.extend([-1] + list(range(start, start + c - 1)))
        start += c
    return np.asarray(idx[:limit] if limit is not None else idx, dtype=np.int64)


def train_pdn(plant: Plant, frames, cfg: TrainConfig, *, log_path=None, checkpoint: Checkpoint | None = None,
              resume: bool = False, dataset_seeds=None) -> TrainResult:
    """Train the PDN end to end through the frozen ``plant``.

    Each step samples one plant condition uniformly and builds PDN inputs
    whose previous-pair channels hold the current PDN's output for the
    preceding window and the plant's response to it, as in streaming
    inference (no gradient flows through them). The plant output and the
    target ``g0·x`` are divided by the same factor, the RMS of the target, so
    the loss is scale-free across datasets but still sees the PDN's gain.
    """
    conds = tuple(plant.conditions)
    frames = [f if isinstance(f, IqSignal) else IqSignal(f, 1.0) for f in frames]
    limit = cfg.max_windows
    used, have = [], 0
    for f in frames:
        if limit is not None and have >= limit:
            break
        used.append(f)
        have += len(f) // WINDOW
    layout = PdnInputLayout()
    per_cond = []
    for c in conds:
        b = Batch.concat(make_windows(x, layout, previous=(x, plant.apply(x.samples, c))) for x in used)
        per_cond.append(b.take(slice(0, limit)))
    prev_index = _previous_index([len(f) // WINDOW for f in used], limit)
    n = len(per_cond[0])
    g0 = [plant.small_signal_gain(np.concatenate([f.samples for f in used]), c) for c in conds]

    meta = {"kind": "pdn", "config": cfg.to_dict(), "config_hash": config_hash(cfg.to_dict()),
            "resume_key": resume_key(cfg),
            "conditions": [getattr(c, "label", str(c)) for c in conds], "dataset_seeds": dataset_seeds}
    state = _resume(checkpoint, resume, layout.channels, cfg, meta)
    if state is None:
        params = ConvNetParams.initialize(layout.channels, seed=cfg.seed)
        adam, start, history = AdamState(cfg.lr0), 0, []
    else:
        params, adam, start, history = state
    w = cfg.loss_weights

    n_batches = max(1, n // cfg.batch_pdn)

    def step(idx, epoch, k):
        ci = int(condition_draws(cfg.seed, epoch, n_batches, len(conds))[k])
        src = per_cond[ci]
        data = src.take(idx)
        inputs = data.inputs.copy()
        pi = prev_index[idx]
        has = pi >= 0
        if np.any(has):
            u_prev, _ = net_forward(params, src.inputs[pi[has]], Mode.EVAL)
            y_prev, _ = plant.forward(u_prev, conds[ci])
            inputs[has, 2:4] = u_prev
            inputs[has, 4:6] = y_prev
        u, pcache = net_forward(params, inputs, Mode.TRAIN)
        y, plant_back = plant.forward(u, conds[ci])
        ph = g0[ci] / abs(g0[ci])
        t = np.stack([ph.real * data.targets[:, 0] - ph.imag * data.targets[:, 1],
                      ph.imag * data.targets[:, 0] + ph.real * data.targets[:, 1]], axis=1)
        r = _rms(t)
        scale = abs(g0[ci]) * r
        val, g = combined(t / r, y / scale, w)
        gy = (g / scale).astype(params.dtype)
        grads, _ = net_backward(params, pcache, plant_back(gy), input_grad=False)
        return val, grads

    _train_loop(params, cfg, n, cfg.batch_pdn, step, stream=2, start_epoch=start, adam=adam, history=history,
                logger=_Logger(log_path), checkpoint=checkpoint, meta=meta, snapshot=None, eval_every=0)
    return TrainResult(params, history, adam, {"g0": g0})


# --------------------------------------------------------------------------- streaming inference

Feedback = Callable[[np.ndarray], np.ndarray]


def vpa_feedback(cond_or_model) -> Callable:
    """Feedback from the virtual PA: its output for the previous transmitted block."""
    model = pa_preset(cond_or_model) if isinstance(cond_or_model, PaCondition) else cond_or_model
    m = model.memory_depth

    def fb(hist: np.ndarray, s: int) -> np.ndarray:
        seg = hist[s - WINDOW - m : s]
        return pa_apply(model, seg)[m:]

    fb.lookback = WINDOW + m
    return fb


def plant_feedback(plant: Plant, cond) -> Callable:
    """Feedback from a frozen plant, evaluated with 32 samples of context on each side."""
    ctx = 32

    def fb(hist: np.ndarray, s: int) -> np.ndarray:
        seg = hist[s - WINDOW - ctx : s + ctx]
        return plant.apply(seg, cond)[ctx:-ctx]

    # the context after s ends exactly at the last finalized output sample
    fb.lookback = WINDOW + ctx
    return fb


@dataclass
class StreamTrace:
    """Per-window PDN inputs and raw outputs recorded by :func:`pdn_infer`."""

    inputs: np.ndarray  # [K, 6, WINDOW]
    outputs: np.ndarray  # [K, 2, WINDOW]


def pdn_infer(pdn: ConvNetParams, frame: IqSignal, feedback: Callable, *, trace: bool = False):
    """Stream ``frame`` through the PDN with 128-sample windows at hop 64.

    Window ``k`` covers samples ``[64k - 32, 64k + 96)`` and contributes its
    central 64 outputs. The previous-pair channels hold the 128 transmitted
    samples before the window start and the ``feedback`` response to them;
    history before the frame start is zero. The frame is zero-padded to a
    multiple of 64 and the output trimmed back to the input length.

    Returns:
        The pre-distorted ``IqSignal`` (and a :class:`StreamTrace` when ``trace``).
    """
    x = _samples(frame).astype(np.complex128)
    n = x.size
    count = -(-n // HOP)
    look = max(fb_attr(feedback, "lookback"), WINDOW)
    q = HOP // 2
    off = look + q
    xp = np.zeros(off + count * HOP + WINDOW, dtype=np.complex128)
    xp[off : off + n] = x
    up = np.zeros_like(xp)
    ins, outs = [], []
    dt = pdn.dtype
    for k in range(count):
        s = off + k * HOP - q  # window start in buffer coordinates
        inp = np.zeros((1, 6, WINDOW), dtype=dt)
        inp[0, 0:2] = to_channels(xp[s : s + WINDOW], dt)
        if k > 0:
            tx = up[s - WINDOW : s]
            fb = feedback(up, s)
            lead = off - (s - WINDOW)
            if lead > 0:
                tx = tx.copy()
                fb = np.asarray(fb).copy()
                tx[:lead] = 0
                fb[:lead] = 0
            inp[0, 2:4] = to_channels(tx, dt)
            inp[0, 4:6] = to_channels(fb, dt)
        out, _ = net_forward(pdn, inp, Mode.EVAL)
        up[s + q : s + q + HOP] = from_channels(out[0, :, q : q + HOP])
        if trace:
            ins.append(inp[0])
            outs.append(out[0])
    u = up[off : off + n]
    result = frame.with_samples(u) if isinstance(frame, IqSignal) else u
    if trace:
        return result, StreamTrace(np.stack(ins), np.stack(outs))
    return result


def fb_attr(fb, name: str) -> int:
    return int(getattr(fb, name, 0))


# --------------------------------------------------------------------------- evaluation


class DpdKind(str, enum.Enum):
    NONE = "none"
    PDN = "pdn"
    MP = "mp"


class TargetKind(str, enum.Enum):
    PAN = "pan"
    VPA = "vpa"


EVAL_CSV_HEADER = ("dpd", "target", "condition", "mse_dbc", "aclr_h_db", "aclr_l_db", "oob_reduction_pct", "flags")


@dataclass(frozen=True)
class EvalReport:
    mse_dbc: float
    aclr_h_db: float
    aclr_l_db: float
    oob_reduction_pct: float
    condition: PaCondition
    dpd_kind: DpdKind
    target_kind: TargetKind = TargetKind.VPA
    flags: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {"dpd": self.dpd_kind.value, "target": self.target_kind.value, "condition": self.condition.label,
                "mse_dbc": self.mse_dbc, "aclr_h_db": self.aclr_h_db, "aclr_l_db": self.aclr_l_db,
                "oob_reduction_pct": self.oob_reduction_pct, "flags": list(self.flags)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    def to_csv_row(self) -> list:
        """The four metrics in report-column order."""
        return [self.mse_dbc, self.aclr_h_db, self.aclr_l_db, self.oob_reduction_pct]

    def csv_row(self) -> list:
        d = self.to_dict()
        d["flags"] = ";".join(self.flags)
        for k in ("mse_dbc", "aclr_h_db", "aclr_l_db", "oob_reduction_pct"):
            d[k] = f"{d[k]:.6f}"
        return [d[k] for k in EVAL_CSV_HEADER]


@dataclass
class Target:
    """What the (pre-distorted) signal is sent through, plus the matching feedback path."""

    kind: TargetKind
    apply: Callable[[np.ndarray], np.ndarray]
    feedback: Callable

    @classmethod
    def vpa(cls, cond: PaCondition) -> Target:
        model = pa_preset(cond)
        return cls(TargetKind.VPA, lambda u: pa_apply(model, u), vpa_feedback(model))

    @classmethod
    def pan(cls, plant: Plant, cond) -> Target:
        return cls(TargetKind.PAN, lambda u: plant.apply(u, cond), plant_feedback(plant, cond))


@dataclass
class EvalSignals:
    """Concatenated evaluation signals kept for spectrum dumps."""

    input: IqSignal
    no_dpd: IqSignal
    with_dpd: IqSignal
    reference: IqSignal


def evaluate(dpd, target: Target, cond: PaCondition, frames, *, keep_signals: bool = False):
    """Score ``x -> dpd -> target`` on held-out frames.

    ``dpd`` is ``None``, a PDN (:class:`ConvNetParams`) or :class:`MpCoeffs`.
    Frames are processed independently and concatenated for measurement. The
    reference is ``g0·x`` with ``g0`` the target's small-signal gain.
    """
    if dpd is None:
        kind = DpdKind.NONE
    elif isinstance(dpd, ConvNetParams):
        kind = DpdKind.PDN
    elif isinstance(dpd, MpCoeffs):
        kind = DpdKind.MP
    else:
        raise ConfigError(f"unsupported DPD {type(dpd).__name__}")
    fs = frames[0].sample_rate_hz
    xs, y0s, ys = [], [], []
    for f in frames:
        x = f.samples.astype(np.complex128)
        if kind is DpdKind.PDN:
            u = pdn_infer(dpd, x, target.feedback)
        elif kind is DpdKind.MP:
            u = mp_apply(dpd, x)
        else:
            u = x
        y0 = target.apply(x)
        xs.append(x)
        y0s.append(y0)
        ys.append(y0 if kind is DpdKind.NONE else target.apply(u))
    x, y0, y = (IqSignal(np.concatenate(a), fs) for a in (xs, y0s, ys))
    g0 = ls_gain(x.samples * SMALL_SIGNAL_LEVEL, target.apply(x.samples * SMALL_SIGNAL_LEVEL))
    ref = x * g0
    rep = spectra.aclr(y)
    flags = list(rep.flags)
    if kind is DpdKind.NONE:
        oob = 0.0
    else:
        red = spectra.oob_reduction(y0, y, ref)
        oob = red.pct
        if red.out_of_range:
            flags.append(f"oob clamped from {red.raw_pct:.3f}")
    report = EvalReport(spectra.mse_dbc(ref, y), rep.aclr_high_db, rep.aclr_low_db, oob, cond, kind,
                        target.kind, tuple(flags))
    if keep_signals:
        return report, EvalSignals(x, y0, y, ref)
    return report


def write_reports_csv(reports, path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EVAL_CSV_HEADER)
        for r in reports:
            w.writerow(r.csv_row())


def monotone_fraction(totals, window: int) -> float:
    """Share of consecutive ``window``-epoch block means that do not increase."""
    t = np.asarray(totals, dtype=float)
    k = t.size // window
    if k < 2:
        return 1.0
    means = t[: k * window].reshape(k, window).mean(axis=1)
    return float(np.mean(np.diff(means) <= 0))
