import json
import os

import pytest
import yaml

import subreglab.radius_cli as cli
from subreglab.mappings import catalog


def _write(tmp_path, name, cfg):
    tmp_path.mkdir(parents=True, exist_ok=True)
    path = tmp_path / name
    path.write_text(yaml.safe_dump(cfg))
    return str(path)


def _run(tmp_path, capsys, cfg, *args):
    cfg = dict(cfg)
    cfg.setdefault("output", str(tmp_path / "out"))
    path = _write(tmp_path, "cfg.yaml", cfg)
    code = cli.main(["run", path, *args])
    out = capsys.readouterr().out
    return code, out


def test_catalog_lists_every_map(capsys):
    assert cli.main(["catalog"]) == 0
    out = capsys.readouterr().out
    for mid in catalog():
        assert mid in out


def test_moduli_run_writes_all_artifacts(tmp_path, capsys):
    code, out = _run(tmp_path, capsys, {
        "map": "abs", "task": "moduli", "seed": 7, "norm": "l1",
        "ladder": {"depth": 8, "samples": 128},
    }, "--format", "full")
    assert code == 0
    payload = json.loads(out)
    assert payload["status"] == "ok"
    names = {row["name"] for row in payload["estimates"]}
    assert {"clm", "lip", "rg", "srg", "ssrg"} <= names
    out_dir = tmp_path / "out"
    for fname in ("report.json", "per_scale.csv", "summary.txt"):
        assert (out_dir / fname).exists()
    on_disk = json.loads((out_dir / "report.json").read_text())
    assert on_disk["config_hash"] == payload["config_hash"]


def test_csv_format_has_the_per_scale_header(tmp_path, capsys):
    code, out = _run(tmp_path, capsys, {
        "map": "abs", "task": "moduli", "seed": 7,
        "ladder": {"depth": 6, "samples": 64},
    }, "--format", "csv")
    assert code == 0
    assert out.splitlines()[0] == "estimate,scale_index,radius,value"


@pytest.mark.parametrize("cfg,fragment", [
    ({"map": "abs", "task": "moduli", "seed": 7, "bogus": 1}, "unknown config keys"),
    ({"map": "abs", "task": "no_such_task", "seed": 7}, "'task' must be one of"),
    ({"map": "abs", "task": "moduli"}, "'seed' is mandatory"),
    ({"map": "abs", "task": "moduli", "seed": 7, "norm": "l7"}, "'norm' must be"),
    ({"task": "moduli", "seed": 7}, "requires a 'map'"),
    ({"map": "abs", "task": "moduli", "seed": 7, "gamma": 0.5}, "only valid for task"),
    ({"task": "eckart_young", "seed": 7, "matrices": 0}, "positive integer"),
    ({"map": "abs", "task": "verify_radius", "seed": 7}, "verify_radius supports maps"),
    ({"map": "square", "task": "build_perturbation", "seed": 7, "kind": "nope",
      "gamma": 0.5}, "needs 'kind'"),
])
def test_config_errors_exit_2(tmp_path, capsys, cfg, fragment):
    code, out = _run(tmp_path, capsys, cfg)
    assert code == 2
    err = json.loads(out)["error"]
    assert err["kind"] == "config"
    assert fragment in err["message"]


def test_unknown_map_id_exits_2(tmp_path, capsys):
    code, out = _run(tmp_path, capsys, {"map": "no_such", "task": "moduli", "seed": 7})
    assert code == 2
    assert "unknown catalog id" in json.loads(out)["error"]["message"]


def test_unreadable_config_exits_2(capsys):
    assert cli.main(["run", "/nonexistent/cfg.yaml"]) == 2
    assert json.loads(capsys.readouterr().out)["error"]["kind"] == "config"


def test_invalid_yaml_exits_2(tmp_path, capsys):
    path = tmp_path / "broken.yaml"
    path.write_text("a: [unclosed\n")
    assert cli.main(["run", str(path)]) == 2
    assert json.loads(capsys.readouterr().out)["error"]["kind"] == "config"


def test_build_refusal_exits_3(tmp_path, capsys):
    code, out = _run(tmp_path, capsys, {
        "map": "identity", "task": "build_perturbation", "kind": "ssr",
        "gamma": 0.9, "seed": 7, "ladder": {"depth": 12, "samples": 512},
    }, "--format", "full")
    assert code == 3
    payload = json.loads(out)
    assert payload["status"] == "verification_fail"
    assert "no destabilizer below gamma" in payload["builder"]["refused"]


def test_build_success_exits_0_with_description(tmp_path, capsys):
    code, out = _run(tmp_path, capsys, {
        "map": "square", "task": "build_perturbation", "kind": "ss",
        "gamma": 0.5, "seed": 7, "ladder": {"depth": 12, "samples": 512},
    }, "--format", "full")
    assert code == 0
    payload = json.loads(out)
    assert payload["builder"]["passed"] is True
    desc = payload["builder"]["description"]
    assert desc["class_tag"] == "fclm_ss"
    assert desc["witness"]["entries"]


def test_semismooth_task_reports_scale_triples(tmp_path, capsys):
    code, out = _run(tmp_path, capsys, {
        "map": "square", "task": "semismooth", "seed": 7,
        "ladder": {"depth": 8, "samples": 128},
    }, "--format", "full")
    assert code == 0
    ss = json.loads(out)["semismooth"]
    assert ss["verdict"] == "pass"
    assert all(len(row) == 3 for row in ss["per_scale"])


def test_relations_task_is_consistent(tmp_path, capsys):
    code, out = _run(tmp_path, capsys, {
        "map": "abs", "task": "relations", "seed": 7,
        "ladder": {"depth": 10, "samples": 256},
    }, "--format", "full")
    assert code == 0
    payload = json.loads(out)
    assert payload["relations"]["ok"] is True
    assert payload["alarms"] == []


def test_eckart_young_task(tmp_path, capsys):
    code, out = _run(tmp_path, capsys, {
        "task": "eckart_young", "seed": 7, "matrices": 2,
    }, "--format", "full")
    assert code == 0
    checks = json.loads(out)["checks"]
    assert len(checks) == 1
    assert checks[0]["passed"] is True


def test_verify_radius_pipeline_zero_map(tmp_path, capsys):
    code, out = _run(tmp_path, capsys, {
        "map": "zero", "task": "verify_radius", "seed": 7,
        "ladder": {"depth": 12, "samples": 512},
    }, "--format", "full")
    assert code == 0
    payload = json.loads(out)
    assert payload["status"] == "ok"
    assert payload["checks"]
    assert all(c["passed"] for c in payload["checks"])


def test_cache_hit_skips_recomputation(tmp_path, capsys):
    cfg = {"map": "abs", "task": "moduli", "seed": 7,
           "ladder": {"depth": 8, "samples": 128},
           "output": str(tmp_path / "out")}
    path = _write(tmp_path, "cfg.yaml", cfg)
    assert cli.main(["run", path, "--format", "summary"]) == 0
    capsys.readouterr()
    fresh = json.loads((tmp_path / "out" / "report.json").read_text())
    assert "timings" in fresh  # fresh runs record wall clock
    cache_dir = tmp_path / "out" / "cache"
    assert any(cache_dir.iterdir())
    assert cli.main(["run", path, "--format", "summary"]) == 0
    capsys.readouterr()
    cached = json.loads((tmp_path / "out" / "report.json").read_text())
    assert "timings" not in cached  # a hit does no numeric work
    fresh.pop("timings")
    assert cached == fresh
    # --no-cache forces a recomputation
    assert cli.main(["run", path, "--format", "summary", "--no-cache"]) == 0
    capsys.readouterr()
    again = json.loads((tmp_path / "out" / "report.json").read_text())
    assert "timings" in again


def test_payload_is_deterministic_across_fresh_runs(tmp_path, capsys):
    base = {"map": "xsin", "task": "moduli", "seed": 7,
            "ladder": {"depth": 8, "samples": 128}}
    code_a, out_a = _run(tmp_path / "a", capsys, dict(base), "--format", "full")
    code_b, out_b = _run(tmp_path / "b", capsys, dict(base), "--format", "full")
    assert code_a == code_b == 0
    pa, pb = json.loads(out_a), json.loads(out_b)
    for payload in (pa, pb):
        payload.pop("config")
        payload.pop("config_hash")
    assert pa == pb


def test_seed_override_changes_the_config_hash(tmp_path, capsys):
    cfg = {"map": "abs", "task": "moduli", "seed": 7,
           "ladder": {"depth": 6, "samples": 64}}
    _, out_a = _run(tmp_path / "a", capsys, dict(cfg), "--format", "full")
    _, out_b = _run(tmp_path / "b", capsys, dict(cfg), "--format", "full", "--seed", "8")
    assert json.loads(out_a)["config"]["seed"] == 7
    assert json.loads(out_b)["config"]["seed"] == 8


def test_internal_failure_exits_4(tmp_path, capsys, monkeypatch):
    def boom(*args, **kwargs):
        raise RuntimeError("synthetic estimator fault")

    monkeypatch.setattr(cli, "estimate_clm", boom)
    code, out = _run(tmp_path, capsys, {
        "map": "abs", "task": "moduli", "seed": 7,
        "ladder": {"depth": 6, "samples": 64},
    })
    assert code == 4
    err = json.loads(out)["error"]
    assert err["kind"] == "internal"
    assert err["type"] == "RuntimeError"
