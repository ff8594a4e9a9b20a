"""Command-line entry point: ``dpdlab <command> --config run.json``.

Commands: ``gen-data``, ``train-pan``, ``train-pdn``, ``fit-mp``, ``eval`` and
``grad-check``. Exit codes: 0 success, 1 failed check, 2 configuration error,
3 training divergence, 4 I/O error or corrupt file. ``DPDLAB_THREADS`` caps the
BLAS thread pool.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import jsonschema
import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__, spectra, trainer
from .errors import ConfigError, DivergenceError, FileFormatError
from .iqsig import IqSignal, WaveformConfig, generate_frame, read_iq, write_iq
from .losses import LossWeights, combined
from .mpdpd import MpCoeffs, mp_fit_postinverse
from .tinynet import ConvNetParams, Mode, grad_check, load_params
from .trainer import (
    Checkpoint,
    DeskScale,
    PanInputLayout,
    PanPlant,
    Target,
    TrainConfig,
)
from .vpa import PaCondition

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3, 4

_NUM = {"type": "number"}
_POS_INT = {"type": "integer", "minimum": 1}
_SEEDS = {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1, "uniqueItems": True}
_COND = {"type": "string", "pattern": r"^v\d\.\d(-f\d{4})?(-d[0-9.]+)?$"}

RUN_CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["output_dir"],
    "properties": {
        "output_dir": {"type": "string"},
        "waveform": {
            "type": "object", "additionalProperties": False,
            "properties": {"fft_size": _POS_INT, "occupied_subcarriers": _POS_INT, "subcarrier_spacing_hz": _NUM,
                           "num_ofdm_symbols": _POS_INT, "target_rms": _NUM,
                           "modulation": {"enum": ["QPSK"]}},
        },
        "train": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "epochs": _POS_INT, "lr0": _NUM, "lr_decay_every": _POS_INT, "lr_decay_factor": _NUM,
                "batch_pan": _POS_INT, "batch_pdn": _POS_INT, "seed": {"type": "integer", "minimum": 0},
                "loss_weights": {"type": "object", "additionalProperties": False,
                                 "properties": {"w_tmse": _NUM, "w_fmae": _NUM, "w_fspec": _NUM}},
                "desk_scale": {"type": ["object", "null"], "additionalProperties": False,
                               "properties": {"epochs": _POS_INT, "windows": _POS_INT,
                                              "lr_decay_every": {"type": ["integer", "null"], "minimum": 1}}},
            },
        },
        "pdn_loss_weights": {"type": "object", "additionalProperties": False,
                             "properties": {"w_tmse": _NUM, "w_fmae": _NUM, "w_fspec": _NUM}},
        "bands": {
            "type": "object", "additionalProperties": False,
            "properties": {"inband_lo_hz": _NUM, "inband_hi_hz": _NUM, "adj_offset_hz": _NUM, "adj_bw_hz": _NUM},
        },
        "presets": {
            "type": "object", "additionalProperties": False,
            "properties": {"train_conditions": {"type": "array", "items": _COND, "minItems": 2},
                           "eval_conditions": {"type": "array", "items": _COND, "minItems": 1}},
        },
        "data": {
            "type": "object", "additionalProperties": False,
            "properties": {"train_seeds": _SEEDS, "test_seeds": _SEEDS},
        },
        "mp": {
            "type": "object", "additionalProperties": False,
            "properties": {"memory_depth": {"type": "integer", "minimum": 0}, "order": _POS_INT},
        },
    },
}


@dataclasses.dataclass(frozen=True)
class RunConfig:
    """Everything a run needs, loaded from one JSON document."""

    output_dir: Path
    waveform: WaveformConfig
    train: TrainConfig
    pdn_loss_weights: LossWeights
    bands: spectra.BandPlan
    train_conditions: tuple[PaCondition, ...]
    eval_conditions: tuple[PaCondition, ...]
    train_seeds: tuple[int, ...]
    test_seeds: tuple[int, ...]
    mp_memory_depth: int
    mp_order: int
    document: dict

    @property
    def hash(self) -> str:
        return trainer.config_hash(self.document)

    @classmethod
    def from_dict(cls, doc: dict) -> RunConfig:
        try:
            jsonschema.validate(doc, RUN_CONFIG_SCHEMA)
        except jsonschema.ValidationError as exc:
            raise ConfigError(f"invalid run config: {exc.message}") from None
        data = doc.get("data", {})
        train_seeds = tuple(data.get("train_seeds", [100, 101, 102, 103, 104, 105]))
        test_seeds = tuple(data.get("test_seeds", [1007]))
        overlap = set(train_seeds) & set(test_seeds)
        if overlap:
            raise ConfigError(f"train and test seeds overlap: {sorted(overlap)}")
        presets = doc.get("presets", {})
        train_conds = tuple(PaCondition.parse(s) for s in presets.get("train_conditions", ["v4.0", "v4.2", "v4.6"]))
        eval_conds = tuple(PaCondition.parse(s) for s in presets.get("eval_conditions",
                                                                      [c.label for c in train_conds]))
        tdoc = dict(doc.get("train", {}))
        if "loss_weights" in tdoc:
            tdoc["loss_weights"] = LossWeights(**tdoc["loss_weights"])
        if tdoc.get("desk_scale"):
            tdoc["desk_scale"] = DeskScale(**tdoc["desk_scale"])
        try:
            train = TrainConfig(**tdoc)
            wave = WaveformConfig.from_dict(doc.get("waveform", {}))
            bands = spectra.BandPlan(**doc.get("bands", {}))
            bands.check_rate(wave.sample_rate_hz)
            pdn_w = LossWeights(**doc["pdn_loss_weights"]) if "pdn_loss_weights" in doc else train.loss_weights
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        mp = doc.get("mp", {})
        return cls(Path(doc["output_dir"]), wave, train, pdn_w, bands, train_conds, eval_conds,
                   train_seeds, test_seeds, mp.get("memory_depth", 3), mp.get("order", 5), doc)

    @classmethod
    def load(cls, path) -> RunConfig:
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return cls.from_dict(doc)


# --------------------------------------------------------------------------- helpers


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(directory: Path, cfg: RunConfig, command: str, files=(), extra=None) -> Path:
    """``manifest.json`` with config hash, seeds, tool version and output file hashes."""
    directory.mkdir(parents=True, exist_ok=True)
    doc = {
        "command": command,
        "config_hash": cfg.hash,
        "tool_version": __version__,
        "train_seeds": list(cfg.train_seeds),
        "test_seeds": list(cfg.test_seeds),
        "files": {str(Path(f).relative_to(directory)): sha256_file(f) for f in files},
    }
    if extra:
        doc.update(extra)
    path = directory / "manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True))
    return path


def _data_dir(cfg: RunConfig) -> Path:
    return cfg.output_dir / "data"


def _x_path(cfg, split, seed):
    return _data_dir(cfg) / split / f"x_{seed}.iqf"


def _y_path(cfg, split, seed, cond):
    return _data_dir(cfg) / split / cond.label / f"y_{seed}.iqf"


def _load_frames(cfg: RunConfig, split: str, seeds) -> list[IqSignal]:
    paths = [_x_path(cfg, split, s) for s in seeds]
    missing = [p for p in paths if not p.exists()]
    if missing:
        raise FileNotFoundError(f"missing dataset file {missing[0]}; run gen-data first")
    return [read_iq(p) for p in paths]


def _load_dataset(cfg: RunConfig, split: str, seeds, conds) -> dict:
    xs = _load_frames(cfg, split, seeds)
    out = {}
    for c in conds:
        pairs = []
        for s, x in zip(seeds, xs):
            p = _y_path(cfg, split, s, c)
            if not p.exists():
                raise FileNotFoundError(f"missing dataset file {p}; run gen-data first")
            pairs.append((x, read_iq(p)))
        out[c] = pairs
    return out


def _pan_checkpoint(cfg: RunConfig) -> Checkpoint:
    return Checkpoint(cfg.output_dir / "pan", "pan")


def _pdn_checkpoint(cfg: RunConfig) -> Checkpoint:
    return Checkpoint(cfg.output_dir / "pdn", "pdn")


def _load_pan(cfg: RunConfig) -> PanPlant:
    ck = _pan_checkpoint(cfg)
    if not ck.exists():
        raise FileNotFoundError(f"missing PAN checkpoint {ck.weights}; run train-pan first")
    layout = PanInputLayout(cfg.train_conditions)
    pan, _, _ = ck.load(layout.channels)
    return PanPlant(pan, layout)


# --------------------------------------------------------------------------- commands


def cmd_gen_data(cfg: RunConfig, args) -> int:
    conds = tuple(dict.fromkeys(cfg.train_conditions + cfg.eval_conditions))
    files = []
    for split, seeds, cs in (("train", cfg.train_seeds, cfg.train_conditions), ("test", cfg.test_seeds, conds)):
        for s in seeds:
            x = generate_frame(cfg.waveform, s)
            xp = _x_path(cfg, split, s)
            xp.parent.mkdir(parents=True, exist_ok=True)
            write_iq(x, xp)
            files.append(xp)
            for c in cs:
                yp = _y_path(cfg, split, s, c)
                yp.parent.mkdir(parents=True, exist_ok=True)
                write_iq(trainer.record(c, x), yp)
                files.append(yp)
    extra = {"splits": {"train": {"seeds": list(cfg.train_seeds), "conditions": [c.label for c in cfg.train_conditions]},
                        "test": {"seeds": list(cfg.test_seeds), "conditions": [c.label for c in conds]}}}
    m = write_manifest(_data_dir(cfg), cfg, "gen-data", files, extra)
    print(f"wrote {len(files)} frames; manifest {m}")
    return EXIT_OK


def cmd_train_pan(cfg: RunConfig, args) -> int:
    data = _load_dataset(cfg, "train", cfg.train_seeds, cfg.train_conditions)
    ck = _pan_checkpoint(cfg)
    res = trainer.train_pan(data, cfg.train, log_path=ck.directory / "train.jsonl", checkpoint=ck,
                            resume=args.resume, dataset_seeds=list(cfg.train_seeds))
    write_manifest(ck.directory, cfg, "train-pan", [ck.weights, ck.manifest],
                   {"epoch": len(res.history)})
    last = res.history[-1].to_dict() if res.history else {}
    print(f"PAN trained to epoch {len(res.history)}: {json.dumps(last)}")
    return EXIT_OK


def cmd_train_pdn(cfg: RunConfig, args) -> int:
    plant = _load_pan(cfg)
    frames = _load_frames(cfg, "train", cfg.train_seeds)
    ck = _pdn_checkpoint(cfg)
    tcfg = cfg.train.with_weights(cfg.pdn_loss_weights)
    res = trainer.train_pdn(plant, frames, tcfg, log_path=ck.directory / "train.jsonl", checkpoint=ck,
                            resume=args.resume, dataset_seeds=list(cfg.train_seeds))
    write_manifest(ck.directory, cfg, "train-pdn", [ck.weights, ck.manifest], {"epoch": len(res.history)})
    last = res.history[-1].to_dict() if res.history else {}
    print(f"PDN trained to epoch {len(res.history)}: {json.dumps(last)}")
    return EXIT_OK


def _mp_path(cfg: RunConfig, cond: PaCondition) -> Path:
    return cfg.output_dir / "mp" / f"mp_{cond.label}.json"


def cmd_fit_mp(cfg: RunConfig, args) -> int:
    conds = _conditions(cfg, args)
    files = []
    for c in conds:
        data = _load_dataset(cfg, "test" if c not in cfg.train_conditions else "train",
                             cfg.test_seeds if c not in cfg.train_conditions else cfg.train_seeds, [c])
        x = np.concatenate([p[0].samples for p in data[c]])
        y = np.concatenate([p[1].samples for p in data[c]])
        coeffs = mp_fit_postinverse(x, y, cfg.mp_memory_depth, cfg.mp_order)
        path = _mp_path(cfg, c)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(coeffs.to_json())
        files.append(path)
        print(f"MP-DPD for {c.label} -> {path}")
    write_manifest(cfg.output_dir / "mp", cfg, "fit-mp", files)
    return EXIT_OK


def _conditions(cfg: RunConfig, args) -> tuple[PaCondition, ...]:
    if getattr(args, "cond", None):
        try:
            return tuple(PaCondition.parse(s) for s in args.cond)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    return cfg.eval_conditions


def write_psd_csv(path: Path, signals: trainer.EvalSignals) -> None:
    """Welch PSD of input, no-DPD output, DPD output and reference, one row per frequency."""
    cols = {}
    for name, sig in (("input", signals.input), ("no_dpd", signals.no_dpd), ("dpd", signals.with_dpd),
                      ("reference", signals.reference)):
        f, p = spectra.welch_psd(sig)
        cols[name] = 10 * np.log10(np.maximum(p, 1e-30))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["freq_hz", "input_db", "no_dpd_db", "dpd_db", "reference_db"])
        for i, fr in enumerate(f):
            w.writerow([f"{fr:.1f}"] + [f"{cols[k][i]:.6f}" for k in ("input", "no_dpd", "dpd", "reference")])


def cmd_eval(cfg: RunConfig, args) -> int:
    conds = _conditions(cfg, args)
    frames = _load_frames(cfg, "test", cfg.test_seeds)
    plant = _load_pan(cfg) if args.target == "pan" else None
    if args.dpd == "pdn":
        ck = _pdn_checkpoint(cfg)
        if not ck.exists():
            raise FileNotFoundError(f"missing PDN checkpoint {ck.weights}; run train-pdn first")
        pdn = load_params(ck.weights, expect_in_channels=6)
    out_dir = cfg.output_dir / "eval"
    out_dir.mkdir(parents=True, exist_ok=True)
    reports, files = [], []
    for c in conds:
        if args.dpd == "pdn":
            dpd = pdn
        elif args.dpd == "mp":
            p = _mp_path(cfg, c)
            if not p.exists():
                raise FileNotFoundError(f"missing MP coefficients {p}; run fit-mp first")
            dpd = MpCoeffs.from_json(p.read_text())
        else:
            dpd = None
        if args.target == "pan":
            if c not in plant.conditions:
                raise ConfigError(f"the PAN was not trained on {c.label}")
            target = Target.pan(plant, c)
        else:
            target = Target.vpa(c)
        rep, sig = trainer.evaluate(dpd, target, c, frames, keep_signals=True)
        reports.append(rep)
        psd = out_dir / f"psd_{args.dpd}_{args.target}_{c.label}.csv"
        write_psd_csv(psd, sig)
        files.append(psd)
        print(rep.to_json())
    stem = out_dir / f"report_{args.dpd}_{args.target}"
    trainer.write_reports_csv(reports, stem.with_suffix(".csv"))
    stem.with_suffix(".json").write_text(json.dumps([r.to_dict() for r in reports], indent=2))
    files += [stem.with_suffix(".csv"), stem.with_suffix(".json")]
    write_manifest(out_dir, cfg, f"eval --dpd {args.dpd} --target {args.target}", files)
    return EXIT_OK


def cmd_grad_check(cfg: RunConfig | None, args) -> int:
    """Finite-difference check of the full network with the combined loss (64-bit)."""
    rng = np.random.Generator(np.random.Philox(args.seed))
    params = ConvNetParams.initialize(args.in_channels, seed=args.seed)
    x = rng.standard_normal((args.batch, args.in_channels, trainer.WINDOW))
    target = 0.5 * rng.standard_normal((args.batch, 2, trainer.WINDOW))

    def loss_fn(out):
        val, g = combined(target, out)
        return val.total, g

    res = grad_check(params, x, loss_fn, h=args.h, mode=Mode(args.mode), check_input=True)
    print(json.dumps({"max_rel_error": res.max_rel_error, "worst": res.worst, "checked": res.checked,
                      "skipped": res.skipped, "tolerance": args.tol}))
    return EXIT_OK if res.max_rel_error < args.tol else EXIT_CHECK


# --------------------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dpdlab", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="RunConfig JSON file")
        p.add_argument("--output-dir", help="override output_dir")
        p.add_argument("--seed", type=int, help="override train.seed")
        p.add_argument("--epochs", type=int, help="override the effective epoch count")
        p.set_defaults(func=fn)
        return p

    add("gen-data", cmd_gen_data, "generate frames and virtual-PA recordings")
    for name, fn in (("train-pan", cmd_train_pan), ("train-pdn", cmd_train_pdn)):
        p = add(name, fn, f"run {name[6:].upper()} training")
        p.add_argument("--resume", action="store_true", help="continue from the checkpoint in output_dir")
    p = add("fit-mp", cmd_fit_mp, "fit the memory-polynomial baseline")
    p.add_argument("--cond", nargs="+", help="condition labels, e.g. v4.0 v4.2-f2643")
    p = add("eval", cmd_eval, "evaluate a DPD against the PAN or the virtual PA")
    p.add_argument("--dpd", choices=["none", "pdn", "mp"], default="none")
    p.add_argument("--target", choices=["pan", "vpa"], default="vpa")
    p.add_argument("--cond", nargs="+", help="condition labels, e.g. v4.0 v4.2-f2643")

    g = sub.add_parser("grad-check", help="finite-difference check of backprop through the full network")
    g.add_argument("--config", help="accepted for symmetry; not needed")
    g.add_argument("--in-channels", type=int, default=5)
    g.add_argument("--batch", type=int, default=4)
    g.add_argument("--h", type=float, default=1e-4)
    g.add_argument("--mode", choices=["train", "eval"], default="train")
    g.add_argument("--tol", type=float, default=1e-4)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_grad_check)
    return ap


def _apply_overrides(doc: dict, args) -> dict:
    doc = json.loads(json.dumps(doc))
    if getattr(args, "output_dir", None):
        doc["output_dir"] = args.output_dir
    train = doc.setdefault("train", {})
    if getattr(args, "seed", None) is not None:
        train["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        if train.get("desk_scale"):
            train["desk_scale"]["epochs"] = args.epochs
        else:
            train["epochs"] = args.epochs
    return doc


def thread_limit() -> int | None:
    v = os.environ.get("DPDLAB_THREADS")
    if not v:
        return None
    try:
        n = int(v)
    except ValueError:
        raise ConfigError(f"DPDLAB_THREADS must be a positive integer, got {v!r}") from None
    if n <= 0:
        raise ConfigError(f"DPDLAB_THREADS must be a positive integer, got {v!r}")
    return n


@contextmanager
def _threads(n):
    if n is None:
        yield
    else:
        with threadpool_limits(limits=n):
            yield


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        limit = thread_limit()
        cfg = None
        if args.command != "grad-check":
            doc = json.loads(Path(args.config).read_text())
            cfg = RunConfig.from_dict(_apply_overrides(doc, args))
        with _threads(limit):
            return args.func(cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except json.JSONDecodeError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, FileFormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
