import json

import pytest

from ntmplan.cli import main, run_manifest_path, sha256_file
from ntmplan.model import NtmConfig, build_model, load_params, params_hash
from ntmplan.sdf import load_environment, sample_free_points
from ntmplan.trajectory import read_jsonl

SMALL_MODEL = '{"width": 16, "layers": 1, "heads": 2, "ff_width": 32, "epochs": 2}'


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run("gen-env", "--kind", "sphere-forest", "--density", 25, "--seed", 1, "--out", d / "env.json") == 0
    cfg = '{"n_instances": 6, "split": [0.5, 0.17, 0.33]}'
    assert run("gen-data", "--env", d / "env.json", "--out", d / "ds.jsonl", "--agents", 3, "--horizon", 8, "--config", cfg) == 0
    assert run("train", "--env", d / "env.json", "--dataset", d / "ds.train.jsonl", "--out", d / "m.ckpt", "--config", SMALL_MODEL) == 0
    return d


def test_gen_env_is_deterministic(tmp_path):
    for name in ("a.json", "b.json"):
        assert run("gen-env", "--kind", "box-city", "--density", 60, "--seed", 4, "--out", tmp_path / name) == 0
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    env = load_environment(tmp_path / "a.json")
    assert len(env.primitives) == 60
    assert len(sample_free_points(env, 10, 0.0, seed=0)) == 10
    manifest = json.loads(run_manifest_path(tmp_path / "a.json").read_text())
    assert manifest["seed"] == 4
    assert manifest["outputs"][str(tmp_path / "a.json")] == sha256_file(tmp_path / "a.json")
    assert {"python", "numpy", "torch", "ntmplan"} <= set(manifest["versions"])


def test_gen_env_zero_density_is_empty(tmp_path):
    assert run("gen-env", "--kind", "sphere-forest", "--density", 0, "--out", tmp_path / "e.json") == 0
    assert load_environment(tmp_path / "e.json").primitives == ()


def test_infeasible_density_gives_error_json(tmp_path, capsys):
    assert run("gen-env", "--kind", "sphere-forest", "--density", 100000, "--out", tmp_path / "e.json") == 1
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "InfeasibleDensity"
    assert not (tmp_path / "e.json").exists()


def test_malformed_config_rejected_before_compute(tmp_path, capsys):
    env = tmp_path / "env.json"
    assert run("gen-env", "--kind", "sphere-forest", "--density", 3, "--out", env) == 0
    assert run("gen-data", "--env", env, "--out", tmp_path / "d.jsonl", "--config", "{not json") == 2
    assert run("gen-data", "--env", env, "--out", tmp_path / "d.jsonl", "--config", '{"n_instancez": 3}') == 2
    assert run("train", "--env", env, "--dataset", tmp_path / "missing.jsonl", "--out", tmp_path / "m.ckpt") == 2
    assert not (tmp_path / "d.jsonl").exists()
    assert "error" in json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def test_unknown_flag_rejected():
    with pytest.raises(SystemExit) as info:
        main(["gen-env", "--colour", "blue"])
    assert info.value.code == 2


def test_dataset_is_reproducible(pipeline, tmp_path):
    d = pipeline
    cfg = '{"n_instances": 6, "split": [0.5, 0.17, 0.33]}'
    assert run("gen-data", "--env", d / "env.json", "--out", tmp_path / "ds.jsonl", "--agents", 3, "--horizon", 8, "--config", cfg) == 0
    for name in ("ds.jsonl", "ds.train.jsonl", "ds.test.jsonl"):
        assert (tmp_path / name).read_bytes() == (d / name).read_bytes()
    man = json.loads((d / "ds.jsonl.manifest.json").read_text())
    assert man["env_file_hash"] == sha256_file(d / "env.json")


def test_training_is_reproducible(pipeline, tmp_path):
    d = pipeline
    assert run("train", "--env", d / "env.json", "--dataset", d / "ds.train.jsonl", "--out", tmp_path / "m.ckpt", "--config", SMALL_MODEL) == 0
    assert (tmp_path / "m.ckpt").read_bytes() == (d / "m.ckpt").read_bytes()
    _, _, header = load_params(d / "m.ckpt")
    assert header["dataset_hash"] == sha256_file(d / "ds.train.jsonl")


def test_zero_epoch_checkpoint_equals_initialization(pipeline, tmp_path):
    d = pipeline
    cfg = '{"width": 16, "layers": 1, "heads": 2, "ff_width": 32, "epochs": 0}'
    assert run("train", "--env", d / "env.json", "--dataset", d / "ds.train.jsonl", "--out", tmp_path / "z.ckpt", "--config", cfg) == 0
    model, config, _ = load_params(tmp_path / "z.ckpt")
    assert params_hash(model) == params_hash(build_model(NtmConfig.from_dict(config.to_dict())))


def test_plan_random_queries(pipeline, tmp_path, capsys):
    d = pipeline
    out = tmp_path / "plan.jsonl"
    assert run("plan", "--env", d / "env.json", "--checkpoint", d / "m.ckpt", "--agents", 8, "--out", out, "--refine-steps", 5) == 0
    [inst] = read_jsonl(out)
    assert inst.trajectories.shape == (8, 9, 4)
    report = json.loads((tmp_path / "plan.jsonl.report.json").read_text())
    assert report["conditions"][0]["counts"]["trajectories"] == 8
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert {"ecr", "icr", "td"} <= set(summary)


def test_eval_ground_truth_has_no_collisions(pipeline, tmp_path):
    d = pipeline
    out = tmp_path / "gt.json"
    assert run("eval", "--env", d / "env.json", "--dataset", d / "ds.jsonl", "--protocol", "dataset", "--out", out) == 0
    cond = json.loads(out.read_text())["conditions"][0]
    assert cond["ecr"] == 0.0 and cond["icr"] == 0.0


def test_eval_protocol_report_reproducible(pipeline, tmp_path):
    d = pipeline
    outs = []
    for name in ("a.json", "b.json"):
        out = tmp_path / name
        assert run("eval", "--env", d / "env.json", "--checkpoint", d / "m.ckpt", "--dataset", d / "ds.test.jsonl", "--protocol", "ablation", "--out", out) == 0
        outs.append(json.loads(out.read_text()))
    for rep in outs:
        for c in rep["conditions"]:
            c.pop("ct_mean")
            c.pop("ct_std")
    assert outs[0] == outs[1]
    assert outs[0]["model_hash"] == sha256_file(d / "m.ckpt")


def test_deconflict_and_optimize(pipeline, tmp_path):
    d = pipeline
    dc = tmp_path / "dc.jsonl"
    assert run("deconflict", "--env", d / "env.json", "--checkpoint", d / "m.ckpt", "--dataset", d / "ds.test.jsonl", "--out", dc, "--refine-steps", 10, "--config", '{"perturb_icr": 0.8}') == 0
    report = json.loads((tmp_path / "dc.jsonl.report.json").read_text())
    assert report["before"]["icr"] >= 0.8
    opt = tmp_path / "opt.jsonl"
    assert run("optimize", "--env", d / "env.json", "--dataset", dc, "--out", opt, "--refine-steps", 50) == 0
    assert len(read_jsonl(opt)) == len(read_jsonl(dc))


def test_checkpoint_env_mismatch_fails(pipeline, tmp_path, capsys):
    d = pipeline
    other = tmp_path / "other.json"
    assert run("gen-env", "--kind", "capsule-grove", "--density", 5, "--out", other) == 0
    assert run("plan", "--env", other, "--checkpoint", d / "m.ckpt", "--out", tmp_path / "p.jsonl") == 1
    assert json.loads(capsys.readouterr().err.strip().splitlines()[-1])["error"] == "CheckpointError"
