import pytest

from lcbyol import config as C
from lcbyol.augment import AugPolicy


def test_defaults_and_hash_stability():
    a, b = C.build_config(), C.build_config()
    assert a.config_hash() == b.config_hash() and len(a.config_hash()) == 16
    assert C.build_config(overrides=["seeds.world=5"]).config_hash() != a.config_hash()
    assert a.finetune.policy.policy() == AugPolicy()
    assert a.byol.augment == C.desk_byol_policy() and a.byol.augment.hue == 0


def test_overrides_and_yaml_roundtrip(tmp_path):
    cfg = C.build_config(overrides=["dataset.n_strata=10", "byol.augment.blur_sigma=[0.1,1.0]"])
    assert cfg.dataset.n_strata == 10 and cfg.byol.augment.policy().blur_sigma == (0.1, 1.0)
    path = tmp_path / "run.yaml"
    path.write_text(C.dump_config(cfg))
    back = C.load_config(path)
    assert back == cfg and back.config_hash() == cfg.config_hash()


@pytest.mark.parametrize("override,path", [
    ("byol.foo=1", "byol.foo"),
    ("dataset.n_strata=0", "dataset.n_strata"),
    ("finetune.n_train_folds=4", "finetune"),
    ("mosaic.stride=0", "mosaic"),
])
def test_errors_name_the_field(override, path):
    with pytest.raises(C.ConfigError, match=path):
        C.build_config(overrides=[override])


def test_bad_files(tmp_path):
    (tmp_path / "a.yaml").write_text("- 1\n- 2\n")
    with pytest.raises(C.ConfigError, match="mapping"):
        C.load_config(tmp_path / "a.yaml")
    (tmp_path / "b.yaml").write_text("schema_version: 7\n")
    with pytest.raises(C.ConfigError, match="schema_version"):
        C.load_config(tmp_path / "b.yaml")
    with pytest.raises(C.ConfigError, match="section.field=value"):
        C.parse_overrides(["nonsense"])
