import csv
import json

import numpy as np
import pytest

from dpdlab import cli
from dpdlab.cli import EXIT_CHECK, EXIT_CONFIG, EXIT_IO, EXIT_OK, RunConfig, main

MICRO = {
    "waveform": {"num_ofdm_symbols": 1},
    "train": {"lr0": 0.003, "batch_pan": 16, "batch_pdn": 16, "seed": 0,
              "desk_scale": {"epochs": 2, "windows": 64, "lr_decay_every": 1}},
    "data": {"train_seeds": [100, 101], "test_seeds": [1007]},
}


def _write_cfg(tmp_path, **extra):
    doc = json.loads(json.dumps(MICRO))
    doc["output_dir"] = str(tmp_path / "run")
    doc.update(extra)
    p = tmp_path / "run.json"
    p.write_text(json.dumps(doc))
    return p


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One micro run through every command, shared by the tests below."""
    tmp = tmp_path_factory.mktemp("cli")
    cfg = _write_cfg(tmp)
    codes = {}
    for cmd in (["gen-data"], ["train-pan"], ["train-pdn"], ["fit-mp"],
                ["eval", "--dpd", "none", "--target", "vpa"], ["eval", "--dpd", "pdn", "--target", "vpa"],
                ["eval", "--dpd", "mp", "--target", "vpa", "--cond", "v4.0"],
                ["eval", "--dpd", "pdn", "--target", "pan"]):
        codes[" ".join(cmd)] = main(cmd + ["--config", str(cfg)])
    return tmp, cfg, codes


class TestRunConfig:
    def test_defaults(self, tmp_path):
        c = RunConfig.from_dict({"output_dir": str(tmp_path)})
        assert len(c.train_conditions) == 3 and c.test_seeds == (1007,)
        assert c.train.batch_pan == 512 and c.mp_memory_depth == 3 and c.mp_order == 5

    def test_unknown_key(self, tmp_path):
        with pytest.raises(cli.ConfigError):
            RunConfig.from_dict({"output_dir": str(tmp_path), "learning_rate": 1})

    def test_overlapping_seeds(self, tmp_path):
        with pytest.raises(cli.ConfigError):
            RunConfig.from_dict({"output_dir": str(tmp_path), "data": {"train_seeds": [1, 2], "test_seeds": [2]}})

    def test_hash_stable(self, tmp_path):
        d = {"output_dir": str(tmp_path), "train": {"seed": 3}}
        assert RunConfig.from_dict(d).hash == RunConfig.from_dict(json.loads(json.dumps(d))).hash


class TestExitCodes:
    def test_config_error(self, tmp_path):
        p = _write_cfg(tmp_path, bogus=1)
        assert main(["gen-data", "--config", str(p)]) == EXIT_CONFIG

    def test_bad_json(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("{not json")
        assert main(["gen-data", "--config", str(p)]) == EXIT_CONFIG

    def test_missing_dataset(self, tmp_path):
        p = _write_cfg(tmp_path)
        assert main(["train-pan", "--config", str(p)]) == EXIT_IO

    def test_missing_checkpoint(self, tmp_path):
        p = _write_cfg(tmp_path)
        assert main(["gen-data", "--config", str(p)]) == EXIT_OK
        assert main(["eval", "--dpd", "pdn", "--config", str(p)]) == EXIT_IO

    def test_bad_threads(self, tmp_path, monkeypatch):
        monkeypatch.setenv("DPDLAB_THREADS", "zero")
        assert main(["gen-data", "--config", str(_write_cfg(tmp_path))]) == EXIT_CONFIG

    def test_divergence(self, tmp_path, monkeypatch):
        p = _write_cfg(tmp_path)
        assert main(["gen-data", "--config", str(p)]) == EXIT_OK

        def boom(*a, **k):
            raise cli.DivergenceError("non-finite loss")

        monkeypatch.setattr(cli.trainer, "train_pan", boom)
        assert main(["train-pan", "--config", str(p)]) == 3


class TestGradCheck:
    def test_passes(self, capsys):
        assert main(["grad-check", "--in-channels", "3", "--batch", "2", "--mode", "eval", "--h", "1e-3"]) == EXIT_OK
        out = json.loads(capsys.readouterr().out)
        assert out["max_rel_error"] < 1e-4

    def test_fails_tight_tolerance(self):
        assert main(["grad-check", "--in-channels", "3", "--batch", "2", "--tol", "1e-30"]) == EXIT_CHECK


class TestPipeline:
    def test_all_commands_succeed(self, pipeline):
        _, _, codes = pipeline
        assert all(c == EXIT_OK for c in codes.values()), codes

    def test_data_manifest(self, pipeline):
        tmp, _, _ = pipeline
        m = json.loads((tmp / "run" / "data" / "manifest.json").read_text())
        assert m["splits"]["train"]["seeds"] == [100, 101] and m["splits"]["test"]["seeds"] == [1007]
        assert len(m["splits"]["train"]["conditions"]) == 3
        assert {"config_hash", "tool_version", "files"} <= set(m)

    def test_every_output_dir_has_manifest(self, pipeline):
        tmp, _, _ = pipeline
        for d in ("data", "pan", "pdn", "mp", "eval"):
            assert (tmp / "run" / d / "manifest.json").exists()

    def test_gen_data_deterministic(self, pipeline, tmp_path):
        tmp, cfg, _ = pipeline
        first = json.loads((tmp / "run" / "data" / "manifest.json").read_text())["files"]
        assert main(["gen-data", "--config", str(cfg), "--output-dir", str(tmp_path / "again")]) == EXIT_OK
        second = json.loads((tmp_path / "again" / "data" / "manifest.json").read_text())["files"]
        assert first == second

    def test_training_log(self, pipeline):
        tmp, _, _ = pipeline
        lines = (tmp / "run" / "pan" / "train.jsonl").read_text().splitlines()
        assert [json.loads(l)["epoch"] for l in lines] == [0, 1]

    def test_report_csv(self, pipeline):
        tmp, _, _ = pipeline
        with open(tmp / "run" / "eval" / "report_none_vpa.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert [r["condition"] for r in rows] == ["v4.0-f2593", "v4.2-f2593", "v4.6-f2593"]
        assert all(float(r["oob_reduction_pct"]) == 0.0 for r in rows)
        with open(tmp / "run" / "eval" / "report_mp_vpa.csv") as fh:
            assert len(list(csv.DictReader(fh))) == 1

    def test_psd_dump(self, pipeline):
        tmp, _, _ = pipeline
        with open(tmp / "run" / "eval" / "psd_pdn_vpa_v4.0-f2593.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["freq_hz", "input_db", "no_dpd_db", "dpd_db", "reference_db"]
        f = np.array([float(r[0]) for r in rows[1:]])
        assert np.all(np.diff(f) > 0)
        fs = 368.64e6
        assert f[0] >= -fs / 2 and f[-1] < fs / 2 and f[0] < -0.49 * fs and f[-1] > 0.49 * fs

    def test_resume_continues_epochs(self, pipeline):
        tmp, cfg, _ = pipeline
        assert main(["train-pan", "--config", str(cfg), "--resume"]) == EXIT_OK
        meta = json.loads((tmp / "run" / "pan" / "pan.json").read_text())
        assert meta["epoch"] == 2
        assert main(["train-pan", "--config", str(cfg), "--resume", "--epochs", "3"]) == EXIT_OK
        meta = json.loads((tmp / "run" / "pan" / "pan.json").read_text())
        assert meta["epoch"] == 3 and [h["epoch"] for h in meta["history"]] == [0, 1, 2]
        assert main(["train-pan", "--config", str(cfg), "--resume", "--seed", "5"]) == EXIT_CONFIG

    def test_corrupted_checkpoint(self, pipeline, tmp_path):
        tmp, cfg, _ = pipeline
        w = tmp / "run" / "pdn" / "pdn.dpn"
        data = bytearray(w.read_bytes())
        data[100] ^= 0x55
        w.write_bytes(bytes(data))
        try:
            assert main(["eval", "--dpd", "pdn", "--config", str(cfg)]) == EXIT_IO
        finally:
            data[100] ^= 0x55
            w.write_bytes(bytes(data))
