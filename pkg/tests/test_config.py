import pytest
import yaml

from regdesk.config import ConfigError, RunConfig, load_config


def test_round_trip_is_lossless(tmp_path):
    rc = RunConfig(run_name="x", mixture={"num_classes": 3, "grid": 2}, teacher={"D_vf": 8})
    rc.train.steps = 17
    rc.train.loss_weights.lam = 0.25
    path = rc.dump(tmp_path / "c.yaml")
    back = load_config(path)
    assert back.to_dict() == rc.to_dict()
    assert back.config_hash() == rc.config_hash()


def test_hash_tracks_content():
    a, b = RunConfig(), RunConfig()
    assert a.config_hash() == b.config_hash()
    b.train.lr = 2e-4
    assert a.config_hash() != b.config_hash()
    assert a.run_dir("out").name == f"reg-{a.config_hash()}"
    b = RunConfig(output_dir="elsewhere")
    assert a.config_hash() == b.config_hash()


def test_net_follows_world():
    rc = RunConfig(mixture={"num_classes": 5, "grid": 3, "channels": 1}, teacher={"D_vf": 12})
    assert (rc.net.num_classes, rc.net.grid, rc.net.channels, rc.net.D_vf) == (5, 3, 1, 12)
    mix, teacher = rc.build_mixture(), rc.build_teacher()
    assert mix.dim == 9 and teacher.codebook.shape == (5, 12)


@pytest.mark.parametrize(
    "doc, msg",
    [
        ({"version": 2}, "version"),
        ({}, "version"),
        ({"version": 1, "bogus": 1}, "unknown"),
        ({"version": 1, "mixture": {"colour": 3}}, "unknown"),
        ({"version": 1, "train": {"lrate": 1}}, "lrate"),
    ],
)
def test_bad_documents(tmp_path, doc, msg):
    p = tmp_path / "bad.yaml"
    p.write_text(yaml.safe_dump(doc))
    with pytest.raises(ConfigError, match=msg):
        load_config(p)


def test_unreadable_and_non_mapping(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")
    p = tmp_path / "list.yaml"
    p.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError, match="mapping"):
        load_config(p)
