import json

import pytest

from coopquant.config import (
    ArtifactMismatchError,
    ConfigError,
    MissingArtifactError,
    apply_override,
    check_manifest,
    config_hash,
    load_config,
    read_manifest,
    update_manifest,
)


def test_defaults_load_without_file():
    cfg = load_config()
    assert cfg["quant"]["bits_weights"] == 8
    assert cfg["scenario"]["n_agents"] == 3


def test_partial_file_merges_with_defaults(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"model": {"epochs": 3}}))
    cfg = load_config(p)
    assert cfg["model"]["epochs"] == 3
    assert cfg["model"]["lr"] == load_config()["model"]["lr"]


def test_unknown_key_rejected(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"model": {"epochz": 3}}))
    with pytest.raises(ConfigError, match="model.epochz"):
        load_config(p)


def test_bad_type_rejected(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"model": {"epochs": "three"}}))
    with pytest.raises(ConfigError, match="bad type"):
        load_config(p)
    # bools are not acceptable integers
    p.write_text(json.dumps({"model": {"epochs": True}}))
    with pytest.raises(ConfigError):
        load_config(p)


def test_int_accepted_for_float_field(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"model": {"lr": 1}}))
    assert load_config(p)["model"]["lr"] == 1


def test_invalid_json_is_config_error(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{nope")
    with pytest.raises(ConfigError):
        load_config(p)


def test_missing_file_is_missing_artifact(tmp_path):
    with pytest.raises(MissingArtifactError):
        load_config(tmp_path / "absent.json")


def test_override_parses_json_values():
    cfg = load_config(overrides=["model.epochs=5", "channel.rate_mbps=13.5"])
    assert cfg["model"]["epochs"] == 5
    assert cfg["channel"]["rate_mbps"] == 13.5


def test_override_list_value():
    cfg = load_config(overrides=["eval.pose_noise_sigmas=[0.0,0.3]"])
    assert cfg["eval"]["pose_noise_sigmas"] == [0.0, 0.3]


def test_override_unknown_path():
    with pytest.raises(ConfigError):
        apply_override(load_config(), "model.nope=1")
    with pytest.raises(ConfigError):
        apply_override(load_config(), "no_equals_sign")


def test_seed_and_out_flags_win():
    cfg = load_config(seed=7, out_dir="runs/x")
    assert cfg["seed"] == 7 and cfg["out_dir"] == "runs/x"


def test_config_hash_stable_and_sensitive():
    a = load_config()
    b = load_config()
    assert config_hash(a) == config_hash(b)
    c = load_config(overrides=["model.epochs=5"])
    assert config_hash(a) != config_hash(c)


def test_manifest_roundtrip_and_checks(tmp_path):
    cfg = load_config()
    with pytest.raises(MissingArtifactError):
        check_manifest(tmp_path, "model", cfg)
    update_manifest(tmp_path, "model", cfg)
    check_manifest(tmp_path, "model", cfg)  # no raise
    other = load_config(overrides=["model.epochs=5"])
    with pytest.raises(ArtifactMismatchError):
        check_manifest(tmp_path, "model", other)
    m = read_manifest(tmp_path)
    m["model"]["version"] = 999
    (tmp_path / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(ArtifactMismatchError, match="version"):
        check_manifest(tmp_path, "model", cfg)
