import csv
import json

import numpy as np
import pytest

from libragrad import cli
from libragrad.attribution import read_pgm
from libragrad.models import LayerSpec, build_vit, save_model

SMALL = {"model": {"tokens": 4, "depth": 1}, "inputs": 3, "ig_steps": 4}


def run(tmp_path, command, cfg, *extra, name="out"):
    cfg_path = tmp_path / f"{name}.json"
    cfg_path.write_text(json.dumps(cfg))
    out = tmp_path / name
    code = cli.main([command, "--config", str(cfg_path), "--out", str(out), *extra])
    return code, out


def rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


class TestConfig:
    def test_defaults_resolve(self):
        cfg = cli.parse_config({})
        assert cfg.seed == 0 and cfg.model["tokens"] == 16 and cfg.ig_steps == 50

    def test_model_fields_merge(self):
        cfg = cli.parse_config({"model": {"depth": 1}})
        assert cfg.model["depth"] == 1 and cfg.model["dim"] == 16

    @pytest.mark.parametrize("doc", [{"sed": 1}, {"model": {"depht": 1}}, {"methods": ["lrp"]},
                                     {"policies": [{"libra_norm": True}]}, {"variants": ["x/y"]},
                                     {"version": 2}, {"inputs": 0}, {"eps_grid": [0.0]},
                                     {"model": {"dim": 15}}, {"policies": []}, []])
    def test_rejected(self, doc):
        with pytest.raises(cli.ConfigError):
            cli.parse_config(doc)

    def test_policy_objects(self):
        (p,) = cli.resolve_policies([{"libra_layernorm": True, "include_biases": False}])
        assert p.libra_layernorm and not p.include_biases and p.label == "layernorm/nobias"


def test_config_error_exit(tmp_path, capsys):
    code, out = run(tmp_path, "attribute", {"methods": ["nope"]})
    assert code == 2
    assert not out.exists()
    assert "unknown methods" in capsys.readouterr().err


def test_bad_json_exit(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    assert cli.main(["attribute", "--config", str(p), "--out", str(tmp_path / "o")]) == 2


def test_missing_model_file(tmp_path):
    code, out = run(tmp_path, "verify-ce", {"model_path": str(tmp_path / "missing.json")})
    assert code == 2 and not out.exists()


class TestAttribute:
    def test_outputs(self, tmp_path):
        cfg = {**SMALL, "methods": ["ixg", "fullgrad"], "policies": ["libra"]}
        code, out = run(tmp_path, "attribute", cfg)
        assert code == 0
        table = rows(out / "attribute.csv")
        assert list(table[0]) == cli.ATTRIBUTE_COLUMNS
        assert len(table) == 2 * 3
        for r in table:
            rec = json.loads((out / r["map_file"]).read_text())
            assert rec["method"] == r["method"] and len(rec["per_token"]) == 4
            assert read_pgm(out / r["image_file"]).shape == (8, 8)
            if r["method"] == "fullgrad":
                assert float(r["ce_rel"]) < 1e-8 and rec["ce"] < 1e-8
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["command"] == "attribute"
        assert manifest["config"]["model"]["dim"] == 16
        assert "attribute.csv" in manifest["outputs"]
        assert not list(out.rglob("*.tmp"))

    def test_ixg_on_zero_bias_affine_model(self, tmp_path):
        cfg = {"model": {"depth": 0, "final_norm": False, "tokens": 4}, "zero_biases": True,
               "methods": ["ixg"], "policies": ["standard"], "inputs": 2}
        code, out = run(tmp_path, "attribute", cfg)
        assert code == 0
        for r in rows(out / "attribute.csv"):
            assert abs(float(r["map_sum"]) - float(r["output_value"])) < 1e-14

    def test_saved_model(self, tmp_path):
        path = tmp_path / "m.json"
        save_model(path, build_vit(LayerSpec(tokens=4, depth=1), seed=11))
        cfg = {"model_path": str(path), "inputs": 1, "policies": ["libra"]}
        code, out = run(tmp_path, "attribute", cfg)
        assert code == 0 and float(rows(out / "attribute.csv")[0]["ce_rel"]) < 1e-8


class TestVerifyCe:
    def test_rows(self, tmp_path):
        cfg = {**SMALL, "model": {"tokens": 8}, "methods": ["fullgrad", "ixg"], "inputs": 5}
        code, out = run(tmp_path, "verify-ce", cfg)
        assert code == 0
        summary = {(r["method"], r["policy"]): r for r in rows(out / "verify_ce_summary.csv")}
        assert float(summary["fullgrad", "libra"]["median_ce_rel"]) < 1e-8
        assert float(summary["ixg", "standard"]["median_ce_abs"]) > 0
        assert len(rows(out / "verify_ce.csv")) == 4 * 5

    def test_affine_model_both_policies(self, tmp_path):
        cfg = {"model": {"depth": 0, "final_norm": False, "tokens": 4}, "inputs": 4}
        code, out = run(tmp_path, "verify-ce", cfg)
        assert code == 0
        for r in rows(out / "verify_ce.csv"):
            assert float(r["ce_abs"]) < 1e-12


class TestAblate:
    def test_table(self, tmp_path):
        cfg = {**SMALL, "model": {"tokens": 4, "depth": 2}, "inputs": 2, "ablate_faithfulness": False}
        code, out = run(tmp_path, "ablate", cfg)
        assert code == 0
        table = rows(out / "ablation.csv")
        assert len(table) == 32 and list(table[0]) == cli.ABLATION_COLUMNS
        complete = [r["label"] for r in table if float(r["max_ce_rel"]) < 1e-8]
        assert complete == ["libra"]
        for r in table:
            if r["include_biases"] == "0":
                assert float(r["max_ce_minus_abs_bias_sum"]) <= float(r["median_ce_abs"]) + 1e-6
        sweep = rows(out / "ln_sweep.csv")
        norms = [float(r["fg_total_norm"]) for r in sweep]
        assert all(a > b for a, b in zip(norms, norms[1:]))

    def test_faithfulness_columns(self, tmp_path):
        cfg = {**SMALL, "inputs": 1}
        code, out = run(tmp_path, "ablate", cfg)
        assert code == 0
        r = rows(out / "ablation.csv")[0]
        assert abs(float(r["srg"]) - (float(r["lif"]) + 100 - float(r["mif"])) / 2) < 1e-12


def test_faithfulness(tmp_path):
    cfg = {**SMALL, "methods": ["fullgrad", "gradcam"],
           "variants": ["accuracy/predicted", "aopc/ground-truth"]}
    code, out = run(tmp_path, "faithfulness", cfg)
    assert code == 0
    table = rows(out / "faithfulness.csv")
    assert list(table[0]) == cli.FAITHFULNESS_COLUMNS
    assert len(table) == 2 * 2 * 2 * 3
    for r in table:
        assert abs(float(r["mif_norm"]) - (100 - float(r["mif"]))) < 1e-12
        assert abs(float(r["srg"]) - (float(r["lif"]) + float(r["mif_norm"])) / 2) < 1e-12
    assert len(rows(out / "faithfulness_summary.csv")) == 8


def test_gradcheck(tmp_path, capsys):
    code, out = run(tmp_path, "gradcheck", {"gradcheck_cases": 3})
    assert code == 0
    table = rows(out / "gradcheck.csv")
    assert {r["group"] for r in table} == {"primitive", "libra"}
    assert all(r["passed"] == "1" for r in table)
    assert "libra-selfgate" in capsys.readouterr().out


def test_numeric_failure_exit(tmp_path, monkeypatch):
    from libragrad import oracles

    monkeypatch.setattr(oracles, "gradcheck_primitives", lambda seed, cases: {"matmul": 1.0})
    code, _ = run(tmp_path, "gradcheck", {"gradcheck_cases": 1})
    assert code == 3


@pytest.mark.parametrize("command", list(cli.COMMANDS))
def test_byte_identical_reruns(tmp_path, command):
    cfg = {**SMALL, "inputs": 2, "gradcheck_cases": 2, "ablate_faithfulness": False,
           "eps_grid": [1e-2, 1e-4]}
    _, a = run(tmp_path, command, cfg, "--seed", "7", name="a")
    _, b = run(tmp_path, command, cfg, "--seed", "7", name="b")
    files = sorted(p.relative_to(a) for p in a.rglob("*.csv"))
    assert files
    for rel in files:
        assert (a / rel).read_bytes() == (b / rel).read_bytes()


def test_seed_changes_output(tmp_path):
    _, a = run(tmp_path, "verify-ce", SMALL, "--seed", "1", name="a")
    _, b = run(tmp_path, "verify-ce", SMALL, "--seed", "2", name="b")
    assert (a / "verify_ce.csv").read_bytes() != (b / "verify_ce.csv").read_bytes()
    assert json.loads((a / "manifest.json").read_text())["config"]["seed"] == 1
