import json
from copy import deepcopy

import numpy as np
import pytest

from ntmplan.datagen import (
    DatagenConfig,
    InfeasibleDataset,
    generate_dataset,
    load_dataset,
    manifest_path,
    revalidate,
    save_dataset,
    split_dataset,
)
from ntmplan.envgen import KINDS, InfeasibleDensity, free_fraction, generate_environment
from ntmplan.sdf import Box, EnvironmentSdf
from ntmplan.trajectory import Thresholds, bundle_valid

THR = Thresholds()


@pytest.fixture(scope="module")
def env():
    return generate_environment("sphere-forest", 25, seed=1)


@pytest.fixture(scope="module")
def small(env):
    return generate_dataset(env, DatagenConfig(n_instances=6, n_agents=4, horizon=12, seed=3))


@pytest.mark.parametrize("kind", KINDS)
def test_environment_kinds(kind):
    env = generate_environment(kind, 20, seed=2)
    assert len(env.primitives) == 20
    assert free_fraction(env) > 0.5
    assert generate_environment(kind, 20, seed=2) == env


def test_environment_density_limits():
    with pytest.raises(InfeasibleDensity):
        generate_environment("sphere-forest", 10_000)
    with pytest.raises(ValueError):
        generate_environment("lava-lake", 3)


def test_instances_are_valid(env, small):
    assert len(small) == 6
    for inst in small.instances:
        tr = inst.trajectories
        assert tr.shape == (4, 13, 4)
        assert bundle_valid(tr, env, THR)
        np.testing.assert_array_equal(tr[:, 0, 1:], inst.starts_goals[:, :3])
        np.testing.assert_array_equal(tr[:, -1, 1:], inst.starts_goals[:, 3:])
    assert revalidate(small, env, THR) == []
    assert small.manifest["env_hash"] == env.content_hash()
    assert small.manifest["counts"]["ok"] == 6


def test_revalidate_flags_broken_instance(env, small):
    broken = deepcopy(small)
    broken.instances[2].trajectories[1, 5, 1:] = broken.instances[2].trajectories[0, 5, 1:]
    assert revalidate(broken, env, THR) == [2]


def test_worker_count_does_not_change_output(env, small):
    par = generate_dataset(env, DatagenConfig(n_instances=6, n_agents=4, horizon=12, seed=3, workers=2))
    for a, b in zip(small.instances, par.instances):
        assert a.trajectories.tobytes() == b.trajectories.tobytes()
    assert par.manifest["counts"] == small.manifest["counts"]


def test_save_load_round_trip(tmp_path, small):
    path = tmp_path / "ds.jsonl"
    save_dataset(small, path)
    assert manifest_path(path).exists()
    back = load_dataset(path)
    assert back.manifest == json.loads(json.dumps(small.manifest))
    for a, b in zip(small.instances, back.instances):
        assert a.trajectories.tobytes() == b.trajectories.tobytes()
    path2 = tmp_path / "ds2.jsonl"
    save_dataset(back, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_split_is_disjoint_and_deterministic(small):
    tr, va, te = split_dataset(small, (0.5, 0.17, 0.33), seed=1)
    idx = [set(d.manifest["indices"]) for d in (tr, va, te)]
    assert sum(map(len, idx)) == len(small)
    assert set().union(*idx) == set(range(len(small)))
    assert len(te) == 1 and len(va) == 1
    again = split_dataset(small, (0.5, 0.17, 0.33), seed=1)
    assert [d.manifest["indices"] for d in again] == [d.manifest["indices"] for d in (tr, va, te)]
    with pytest.raises(ValueError):
        split_dataset(small, (0.5, 0.5, 0.5))


def test_infeasible_world_raises():
    # a world almost entirely filled except thin slivers along the bounds
    env = EnvironmentSdf((Box((0, 0, 0), (0.93, 0.93, 0.93)),))
    with pytest.raises(InfeasibleDataset):
        generate_dataset(env, DatagenConfig(n_instances=2, n_agents=2, horizon=8, grid_resolution=16))


def test_config_round_trip():
    cfg = DatagenConfig(n_instances=3, seed=9)
    assert DatagenConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
