import json

import pytest

from vsrprune.graphir import validate
from vsrprune.profiles import ProfileError, get_profile, profile_network, stage_config


def test_builtin_profiles_valid():
    for name in ("toy", "toy-uni", "paper-scale"):
        profile = get_profile(name)
        assert validate(profile_network(profile)) == []


def test_toy_uni_has_no_backward_cell():
    spec = profile_network(get_profile("toy-uni"))
    assert spec.backward_cell is None


def test_paper_scale_reference_numbers():
    profile = get_profile("paper-scale")
    assert profile["network"] == {"trunk_width": 64, "blocks_per_cell": 30, "bidirectional": True}
    sp = profile["sparsify"]
    assert (sp["delta"], sp["tau"], sp["t1"], sp["t2"]) == (1e-4, 0.1, 5, 3375)
    assert profile["finetune"]["iterations"] == 300_000
    cfg = stage_config(profile, "sparsify", seed=0)
    assert cfg.schedule_iterations() == 5000 + 3375


def test_unknown_profile_raises():
    with pytest.raises(ProfileError):
        get_profile("not-a-profile")


def test_json_profile_with_base(tmp_path):
    path = tmp_path / "custom.json"
    path.write_text(json.dumps({"base": "toy", "pretrain": {"iterations": 7}}))
    profile = get_profile(str(path))
    assert profile["pretrain"]["iterations"] == 7
    assert profile["network"]["trunk_width"] == 16  # inherited


def test_json_profile_requires_sections(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"pretrain": {}}))
    with pytest.raises(ProfileError, match="network"):
        get_profile(str(path))


def test_malformed_json(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{nope")
    with pytest.raises(ProfileError, match="JSON"):
        get_profile(str(path))


def test_stage_config_overrides():
    cfg = stage_config(get_profile("toy"), "finetune", seed=5, loss_tf=True)
    assert cfg.stage == "finetune"
    assert cfg.seed == 5
    assert cfg.loss_tf
    assert cfg.patch == 16
