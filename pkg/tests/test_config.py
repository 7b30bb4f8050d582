"""Config parsing/serialization: defaults, round-trip fixpoint, hashing."""

from __future__ import annotations

import pytest
import tomli

from gswap import config as cfg
from gswap.errors import ConfigError, ParameterError


class TestDefaults:
    def test_train_defaults(self):
        t = cfg.TrainConfig()
        assert t.stage_a_iters == 3000
        assert t.stage_b_iters == 1000
        assert t.lr_mu == 1.6e-4
        assert t.lr_rot == 1e-3
        assert t.lr_scale == 5e-3
        assert t.lr_opacity == 5e-2
        assert t.lr_sh == 2.5e-3
        assert t.adam_beta1 == 0.9
        assert t.adam_beta2 == 0.999
        assert t.adam_eps == 1e-15
        assert t.opacity_prune_threshold == 0.005
        assert t.seed == 0
        assert t.max_splats >= 320

    def test_validation(self):
        with pytest.raises(ParameterError):
            cfg.TrainConfig(stage_a_iters=0)
        with pytest.raises(ParameterError):
            cfg.TrainConfig(lr_mu=-1.0)
        with pytest.raises(ParameterError):
            cfg.TrainConfig(adam_beta1=1.0)
        with pytest.raises(ParameterError):
            cfg.TrainConfig(max_splats=0)

    def test_learning_rates_mapping(self):
        t = cfg.TrainConfig()
        assert t.learning_rates() == {
            "mu": 1.6e-4, "rot": 1e-3, "scale": 5e-3,
            "opacity": 5e-2, "sh": 2.5e-3,
        }


class TestRoundTrip:
    def test_empty_text_gives_defaults(self):
        run = cfg.parse_config("")
        assert run == cfg.RunConfig()

    def test_serialize_parse_fixpoint(self):
        run = cfg.RunConfig()
        text = cfg.serialize_config(run)
        again = cfg.serialize_config(cfg.parse_config(text))
        assert text == again
        assert cfg.parse_config(text) == run

    def test_partial_override(self):
        run = cfg.parse_config("[weights]\nlambda_ssim = 0.3\n")
        assert run.weights.lambda_ssim == 0.3
        assert run.weights.lambda_scale == 1.0
        assert run.train.stage_a_iters == 3000

    def test_train_override(self):
        run = cfg.parse_config("[train]\nstage_a_iters = 50\nseed = 9\n")
        assert run.train.stage_a_iters == 50
        assert run.train.seed == 9

    def test_lambda_k_round_trips_as_tuple(self):
        run = cfg.parse_config("[weights]\nlambda_k = [0.5, 0.5]\n")
        assert run.weights.lambda_k == (0.5, 0.5)
        again = cfg.parse_config(cfg.serialize_config(run))
        assert again.weights.lambda_k == (0.5, 0.5)

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="lamda_ssim"):
            cfg.parse_config("[weights]\nlamda_ssim = 0.3\n")
        with pytest.raises(ConfigError, match="section"):
            cfg.parse_config("[wieghts]\nlambda_ssim = 0.3\n")

    def test_serializer_emits_valid_toml(self):
        text = cfg.serialize_config(cfg.RunConfig())
        parsed = tomli.loads(text)
        assert parsed["weights"]["lambda_ssim"] == 0.2
        assert parsed["train"]["stage_a_iters"] == 3000
        assert parsed["weights"]["lambda_k"] == [0.9, 0.001, 0.1]

    def test_file_round_trip(self, tmp_path):
        path = tmp_path / "run.toml"
        path.write_text("[train]\nseed = 4\n")
        run = cfg.load_config(path)
        assert run.train.seed == 4


class TestHash:
    def test_stable_and_sensitive(self):
        a = cfg.config_hash(cfg.RunConfig())
        b = cfg.config_hash(cfg.RunConfig())
        assert a == b
        assert len(a) == 64
        c = cfg.config_hash(cfg.parse_config("[train]\nseed = 1\n"))
        assert c != a
