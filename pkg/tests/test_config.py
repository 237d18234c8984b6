import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gaitprop.config import ExperimentConfig, format_config, parse_config, parse_layers
from gaitprop.errors import ConfigError

MINIMAL = """
[model]
layers = dense 64, dense 10
"""


class TestParse:
    def test_minimal_defaults(self):
        cfg = parse_config(MINIMAL)
        assert cfg.layers == (("dense", 64), ("dense", 10))
        assert cfg.algorithm == "bp" and cfg.norm_power == 2 and cfg.beta == 1.0
        assert cfg.input_shape == (64,)

    def test_echo_round_trip(self):
        cfg = parse_config(MINIMAL)
        text = format_config(cfg)
        again = parse_config(text)
        assert again == cfg
        assert format_config(again) == text

    def test_comments_and_case(self):
        cfg = parse_config(
            "# header\n[Experiment]\nalgorithm = gp  # inline\n[credit]\nETA = 1e-4\n" + MINIMAL
        )
        assert cfg.algorithm == "gp" and cfg.eta == 1e-4

    def test_conv_layers(self):
        cfg = parse_config(
            "[data]\nfeatures = 1x16x16\n[model]\nlayers = conv 2 1 4 4, conv 3 2 36 4, conv 3 2 36 8, dense 10\n"
        )
        assert cfg.input_shape == (1, 16, 16)
        assert cfg.layers[1] == ("conv", 3, 2, 36, 4)

    def test_invertibility_constraint(self):
        with pytest.raises(ConfigError, match="invertibility constraint violated") as info:
            parse_config("[data]\nfeatures = 1x4x4\n[model]\nlayers = conv 2 1 3 3, dense 10\n")
        assert info.value.key == "layers" and info.value.line == 4

    def test_gp_without_eta(self):
        with pytest.raises(ConfigError, match="missing hyper-parameter") as info:
            parse_config("[experiment]\nalgorithm = gp\n" + MINIMAL)
        assert info.value.key == "eta"

    def test_vgp_without_gamma(self):
        with pytest.raises(ConfigError, match="gamma"):
            parse_config("[experiment]\nalgorithm = vgp\n" + MINIMAL)

    def test_unknown_key_line_number(self):
        with pytest.raises(ConfigError) as info:
            parse_config("[experiment]\nseed = 1\nlearning_rate = 3\n" + MINIMAL)
        assert info.value.line == 3 and info.value.key == "learning_rate"
        assert "line 3" in str(info.value)

    def test_key_in_wrong_section(self):
        with pytest.raises(ConfigError, match=r"belongs in \[optimizer\]"):
            parse_config("[experiment]\nlr = 0.1\n" + MINIMAL)

    def test_duplicate_key(self):
        with pytest.raises(ConfigError, match="duplicate"):
            parse_config("[experiment]\nseed = 1\nseed = 2\n" + MINIMAL)

    def test_bad_value(self):
        with pytest.raises(ConfigError) as info:
            parse_config("[experiment]\nepochs = many\n" + MINIMAL)
        assert info.value.key == "epochs"

    def test_unknown_section(self):
        with pytest.raises(ConfigError, match="unknown section"):
            parse_config("[extra]\n")

    def test_missing_layers(self):
        with pytest.raises(ConfigError, match="layers"):
            parse_config("[experiment]\nseed = 1\n")

    def test_entry_outside_section(self):
        with pytest.raises(ConfigError, match="outside"):
            parse_config("seed = 1\n" + MINIMAL)

    def test_last_layer_must_match_classes(self):
        with pytest.raises(ConfigError, match="dense 10"):
            parse_config("[model]\nlayers = dense 64, dense 5\n")

    def test_widening_dense(self):
        with pytest.raises(ConfigError, match="square layer"):
            parse_config("[data]\nfeatures = 8\nclasses = 10\n[model]\nlayers = dense 10\n")

    def test_conv_tiling(self):
        with pytest.raises(ConfigError, match="tiled exactly"):
            parse_config("[data]\nfeatures = 1x5x5\n[model]\nlayers = conv 2 2 4 4, dense 10\n")

    @pytest.mark.parametrize(
        "entry,key",
        [("norm_power = 3", "norm_power"), ("kappa = -1", "kappa"), ("beta = 0", "beta")],
    )
    def test_range_checks(self, entry, key):
        with pytest.raises(ConfigError) as info:
            parse_config(f"[credit]\n{entry}\n" + MINIMAL)
        assert info.value.key == key

    def test_gamma_none(self):
        cfg = parse_config("[credit]\ngamma = none\n" + MINIMAL)
        assert cfg.gamma is None


def test_parse_layers_rejects_garbage():
    with pytest.raises(ValueError):
        parse_layers("dense")
    with pytest.raises(ValueError):
        parse_layers(" , ")


@settings(max_examples=40, deadline=None)
@given(
    st.sampled_from(["bp", "fa", "tp", "gp", "vgp"]),
    st.integers(0, 2**31),
    st.floats(1e-8, 1.0),
    st.floats(1e-6, 10.0),
    st.lists(st.integers(10, 64), min_size=0, max_size=3),
)
def test_format_parse_round_trip(algorithm, seed, eta, kappa, widths):
    widths = sorted(widths, reverse=True)
    cfg = ExperimentConfig(
        layers=tuple(("dense", w) for w in widths) + (("dense", 10),),
        algorithm=algorithm,
        seed=seed,
        eta=eta,
        gamma=eta,
        kappa=kappa,
    )
    assert parse_config(format_config(cfg)) == cfg
