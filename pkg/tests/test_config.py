import pytest

from sceneipw import ConfigError
from sceneipw.config import (
    build_grid,
    build_net,
    build_synth,
    build_train,
    config_digest,
    load_config,
    parse_config,
)


class TestParsing:
    def test_empty_text_gives_all_defaults(self):
        cfg = parse_config("")
        assert cfg["synth.height"] == 32
        assert cfg["dgp.tau"] == 1.0
        assert cfg["estimate.clip"] == (0.01, 0.99)
        assert cfg["grid.est_widths"] == (5, 7, 9, 11, 13)

    def test_comments_and_blanks_ignored(self):
        cfg = parse_config("\n# a comment\n  dgp.beta = 2.5  # trailing\n\n")
        assert cfg["dgp.beta"] == 2.5

    def test_layer_syntax(self):
        cfg = parse_config("net.layers = 32:5:max2, 16:3\n")
        layers = cfg["net.layers"]
        assert [(l.filter_count, l.kernel_width, l.pool) for l in layers] == [
            (32, 5, "max2"),
            (16, 3, "none"),
        ]

    def test_clip_none(self):
        assert parse_config("estimate.clip = none\n")["estimate.clip"] is None

    def test_clip_pair(self):
        assert parse_config("estimate.clip = 0.05, 0.95\n")["estimate.clip"] == (0.05, 0.95)

    def test_float_list(self):
        cfg = parse_config("grid.resolution_factors = 1.0, 0.5\n")
        assert cfg["grid.resolution_factors"] == (1.0, 0.5)

    def test_problems_are_aggregated(self):
        text = "bogus.key = 1\ndgp.beta = abc\ndgp.beta = 2\nnot a line\n"
        with pytest.raises(ConfigError) as info:
            parse_config(text)
        msg = str(info.value)
        assert "line 1" in msg and "unknown key" in msg
        assert "line 2" in msg
        assert "line 4" in msg
        # The first dgp.beta line failed to parse, so line 3 is not a duplicate.
        assert "line 3" not in msg

    def test_duplicate_detected(self):
        with pytest.raises(ConfigError, match="duplicate"):
            parse_config("dgp.beta = 1\ndgp.beta = 2\n")

    def test_seeds_are_not_config_keys(self):
        with pytest.raises(ConfigError, match="unknown key"):
            parse_config("dgp.seed = 3\n")

    def test_non_finite_float_rejected(self):
        with pytest.raises(ConfigError):
            parse_config("dgp.beta = inf\n")

    def test_bad_bool(self):
        with pytest.raises(ConfigError):
            parse_config("net.batch_norm = yes\n")

    def test_bad_choice(self):
        with pytest.raises(ConfigError):
            parse_config("train.optimizer = adagrad\n")


class TestBuilders:
    def test_build_synth_defaults(self):
        synth = build_synth(parse_config(""))
        assert (synth.height, synth.width, synth.channels) == (32, 32, 1)

    def test_build_net(self):
        net = build_net(parse_config("net.layers = 2:3:max2\nnet.projection_dim = 4\n"))
        assert net.projection_dim == 4
        assert net.layers[0].pool == "max2"

    def test_build_train_seed_comes_from_argument(self):
        train = build_train(parse_config("train.epochs = 7\n"), seed=123)
        assert train.epochs == 7
        assert train.seed == 123

    def test_build_grid(self):
        cfg = parse_config("grid.replicates = 3\ngrid.scenes_per_replicate = 20\n")
        grid = build_grid(cfg, master_seed=9)
        assert grid.replicates == 3
        assert grid.master_seed == 9
        assert grid.true_filter.width == 9

    def test_build_grid_pools_value_errors(self):
        cfg = parse_config("synth.height = -4\ntrain.batch_size = 0\n")
        with pytest.raises(ConfigError) as info:
            build_grid(cfg, master_seed=0)
        msg = str(info.value)
        assert "synth" in msg and "train" in msg

    def test_build_grid_rejects_oversized_true_kernel(self):
        cfg = parse_config("synth.height = 8\nsynth.width = 8\n")
        with pytest.raises(ConfigError):
            build_grid(cfg, master_seed=0)


class TestFiles:
    def test_load_and_digest(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("dgp.tau = 2.0\n")
        assert load_config(path)["dgp.tau"] == 2.0
        d1 = config_digest(path)
        assert len(d1) == 64
        path.write_text("dgp.tau = 2.0\n# new comment\n")
        assert config_digest(path) != d1
