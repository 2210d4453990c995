import csv
import json
import math

import pytest

from edgelm import bench
from edgelm.cli import main

TINY = {"n_layers": 1, "d_model": 16, "n_heads": 2, "n_kv_heads": 1,
        "head_dim": 8}


class TestConfig:
    def test_valid_config_passes(self):
        bench.validate_config({"seed": 1, "trials": 2, "model": TINY})

    def test_missing_seed_rejected(self):
        with pytest.raises(Exception):
            bench.validate_config({"trials": 2})

    def test_unknown_model_key_rejected(self):
        with pytest.raises(Exception):
            bench.validate_config({"seed": 1, "model": {"n_layer": 2}})


class TestReports:
    def evict_report(self):
        return bench.run_evict_bench({
            "seed": 1, "trials": 1, "model": TINY,
            "task": {"context_len": 96, "decode_len": 4},
            "method": {"eviction_ratios": [0.5],
                       "policies": [{"kind": "heavy_hitter", "recent": 2},
                                    {"kind": "random", "seed": 0}]}})

    def test_aggregates_recomputable(self):
        report = self.evict_report()
        assert bench.verify_report(report)

    def test_tampered_aggregate_detected(self):
        report = self.evict_report()
        report["aggregates"]["rouge1_vs_baseline"]["mean"] += 0.1
        assert not bench.verify_report(report)

    def test_spec_bench_lossless_and_bounded(self):
        report = bench.run_spec_bench({
            "seed": 2, "trials": 2, "model": TINY,
            "task": {"max_new": 8, "prompt_len": 4}, "method": {"k": [2]}})
        for row in report["trials"]:
            assert 1.0 <= row["block_efficiency"] <= 3.0
            assert row["target_forwards"] == row["rounds"]

    def test_quant_bench_sanity_row(self):
        report = bench.run_quant_bench({
            "seed": 3, "model": TINY,
            "task": {"sequences": 1, "seq_len": 8}, "method": {"bits": [8]}})
        sanity = report["trials"][0]
        assert sanity["plan"] == "identity-sanity"
        assert sanity["top1_overlap"] == 1.0

    def test_lora_demo_invariants(self):
        report = bench.run_lora_demo({
            "seed": 4, "model": TINY, "method": {"adapters": 2, "swaps": 10}})
        row = report["trials"][0]
        assert row["hash_invariant"]
        assert row["qalft_final_loss"] < 1e-6
        assert row["gradient_check_max_rel_err"] < 1e-4

    def test_write_report_formats(self, tmp_path):
        report = self.evict_report()
        paths = bench.write_report(report, tmp_path, "r", fmt="csv")
        names = {p.name for p in paths}
        assert names == {"r.json", "r.trials.jsonl", "r.csv"}
        with open(tmp_path / "r.trials.jsonl") as f:
            rows = [json.loads(line) for line in f]
        assert len(rows) == len(report["trials"])
        with open(tmp_path / "r.csv") as f:
            rdr = list(csv.reader(f))
        assert rdr[0] == [bench.CSV_HEADER_VERSION]
        assert len(rdr) == 2 + len(report["trials"])


class TestCli:
    def test_gen(self, capsys):
        assert main(["gen", "--seed", "3", "--max-new", "4"]) == 0
        out = json.loads(capsys.readouterr().out)
        assert len(out["tokens"]) == len(out["prompt"]) + 4

    def test_evict_with_config(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({
            "seed": 5, "trials": 1, "model": TINY,
            "task": {"context_len": 80, "decode_len": 2},
            "method": {"eviction_ratios": [0.25],
                       "policies": [{"kind": "random", "seed": 0}]}}))
        assert main(["evict", "--config", str(cfg), "--out", str(tmp_path),
                     "--format", "csv"]) == 0
        written = json.loads(capsys.readouterr().out)["written"]
        assert any(p.endswith("evict.csv") for p in written)

    def test_report_verification_roundtrip(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({
            "seed": 6, "trials": 1, "model": TINY,
            "task": {"max_new": 6, "prompt_len": 3}, "method": {"k": [2]}}))
        assert main(["spec", "--config", str(cfg), "--out", str(tmp_path)]) == 0
        capsys.readouterr()
        assert main(["report", str(tmp_path / "spec.json")]) == 0
        out = json.loads(capsys.readouterr().out)
        assert out["verified"]

    def test_losses(self, tmp_path, capsys):
        payload = {"lp_theta_c": [0.0], "lp_0_c": [0.0],
                   "lp_theta_r": [0.0], "lp_0_r": [0.0],
                   "weights": {"beta": 1.0}, "token_logprobs": [-1.0]}
        p = tmp_path / "b.json"
        p.write_text(json.dumps(payload))
        assert main(["losses", str(p)]) == 0
        out = json.loads(capsys.readouterr().out)
        assert out["breakdown"]["preference"] == pytest.approx(math.log(2))

    def test_rouge(self, tmp_path, capsys):
        (tmp_path / "ref.txt").write_text("a b c d")
        (tmp_path / "hyp.txt").write_text("a b e f")
        assert main(["rouge", str(tmp_path / "ref.txt"),
                     str(tmp_path / "hyp.txt")]) == 0
        out = json.loads(capsys.readouterr().out)
        assert out["rouge1"]["f1"] == pytest.approx(0.5)

    def test_error_is_machine_readable(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"trials": 1}))  # missing seed
        assert main(["evict", "--config", str(bad)]) != 0
        err = json.loads(capsys.readouterr().err)
        assert "error" in err and "message" in err

    def test_seed_override(self, capsys):
        assert main(["gen", "--seed", "11", "--max-new", "2"]) == 0
        a = json.loads(capsys.readouterr().out)
        assert main(["gen", "--seed", "11", "--max-new", "2"]) == 0
        b = json.loads(capsys.readouterr().out)
        assert a == b
