import json

import pytest
from hypothesis import given, strategies as st

from dfka.config import (CONFIG_VERSION, ConfigError, ExperimentConfig, load_config, save_config)


class TestValidation:
    def test_default_is_valid(self):
        cfg = ExperimentConfig()
        assert cfg.method == "stratanet" and cfg.version == CONFIG_VERSION

    @pytest.mark.parametrize("key,value", [
        ("method", "magic"),
        ("amalgam.lam", 1.5),
        ("amalgam.tau", 0.0),
        ("student.n_layers", 5),
        ("student.d_model", 50),
        ("teachers.depths", (4,)),
        ("steer.max_len", 8),
        ("steer.k", 25),
        ("version", 2),
    ])
    def test_rejects(self, key, value):
        with pytest.raises(ConfigError):
            ExperimentConfig().replace(**{key: value})

    def test_unknown_key_in_replace(self):
        with pytest.raises(ConfigError):
            ExperimentConfig().replace(**{"amalgam.alpha": 1.0})


class TestSerialisation:
    def test_roundtrip(self, tmp_path):
        cfg = ExperimentConfig(seed=3).replace(**{"teachers.depths": (4, 6), "amalgam.lam": 0.5})
        save_config(cfg, tmp_path / "c.json")
        assert load_config(tmp_path / "c.json") == cfg

    def test_canonical_is_sorted_json(self):
        text = ExperimentConfig().canonical()
        doc = json.loads(text)
        assert text == json.dumps(doc, sort_keys=True, indent=2) + "\n"

    def test_digest_tracks_content(self):
        a, b = ExperimentConfig(), ExperimentConfig(seed=1)
        assert a.digest() == ExperimentConfig().digest() and a.digest() != b.digest()
        assert len(a.digest()) == 12

    def test_partial_section_keeps_section_defaults(self):
        cfg = ExperimentConfig.from_dict({"student": {"train": {"epochs": 3}}})
        assert cfg.student.train.epochs == 3
        assert cfg.student.train.lr == ExperimentConfig().student.train.lr
        assert cfg.teachers == ExperimentConfig().teachers

    @pytest.mark.parametrize("doc", [
        {"bogus": 1},
        {"amalgam": {"lam": "high"}},
        {"amalgam": 3},
        {"teachers": {"depths": 4}},
        {"amalgam": {"share_blocks": 1}},
        {"version": 9},
        [],
    ])
    def test_bad_documents(self, doc):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(doc)

    def test_invalid_json(self, tmp_path):
        (tmp_path / "c.json").write_text("{not json")
        with pytest.raises(ConfigError, match="not valid JSON"):
            load_config(tmp_path / "c.json")

    def test_int_accepted_for_float(self):
        assert ExperimentConfig.from_dict({"amalgam": {"lam": 1}}).amalgam.lam == 1.0

    @given(st.floats(0, 1), st.integers(0, 2**31), st.booleans())
    def test_dict_roundtrip(self, lam, seed, share):
        cfg = ExperimentConfig(seed=seed).replace(**{"amalgam.lam": lam, "amalgam.share_blocks": share})
        assert ExperimentConfig.from_dict(json.loads(cfg.canonical())) == cfg
