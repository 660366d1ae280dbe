"""Configuration loading: strict unknown-key rejection with dotted paths,
eager invariant validation, constructed objects, and stable hashing."""
import pathlib

import numpy as np
import pytest

from koopmpc.config import config_from_dict, load_config
from koopmpc.prices import PriceSeries, save_prices


class TestStrictKeys:
    def test_unknown_top_level_key_rejected(self):
        with pytest.raises(ValueError, match="mystery"):
            config_from_dict({"mystery": 1})

    def test_unknown_nested_key_reports_dotted_path(self):
        with pytest.raises(ValueError, match=r"ocp"):
            config_from_dict({"ocp": {"horizont": 12}})

    def test_deeply_nested_path_reported(self):
        with pytest.raises(ValueError, match="prices.synthetic"):
            config_from_dict({"prices": {"synthetic": {"sigma": 3}}})

    def test_section_must_be_a_mapping(self):
        with pytest.raises(ValueError, match="mapping"):
            config_from_dict({"ocp": 5})


class TestValidation:
    def test_invalid_ocp_values_rejected_at_load(self):
        with pytest.raises(ValueError):
            config_from_dict({"ocp": {"horizon": 0}})
        with pytest.raises(ValueError):
            config_from_dict({"ocp": {"delta": 2.0}})

    def test_defaults_load_cleanly(self):
        cfg = config_from_dict({})
        assert cfg.dims.n_z == 10
        assert cfg.ocp.dt_minutes == 15.0
        assert cfg.train.seeds == (1, 2, 3, 4, 5)

    def test_seed_lists_become_tuples(self):
        cfg = config_from_dict({"train": {"seeds": [4, 5]}})
        assert cfg.train.seeds == (4, 5)


class TestConstructedObjects:
    def test_model_dims_follow_the_latent_size(self):
        cfg = config_from_dict({"dims": {"n_z": 7}})
        dims = cfg.model_dims()
        assert (dims.n_x_obs, dims.n_z, dims.n_u, dims.n_x_pred, dims.n_y) \
            == (4, 7, 4, 3, 2)

    def test_ocp_config_mirrors_the_section(self):
        cfg = config_from_dict({"ocp": {"horizon": 12, "m_penalty": 5e3}})
        ocp = cfg.ocp_config()
        assert ocp.horizon == 12
        assert ocp.m_penalty == 5e3
        assert ocp.scaler.y.n == 2

    def test_plant_uses_configured_substep(self):
        cfg = config_from_dict({"plant": {"substep_minutes": 0.5}})
        assert cfg.make_plant().substep_minutes == 0.5

    def test_synthetic_reference_prices(self):
        cfg = config_from_dict({"prices": {"synthetic": {
            "hours": 48, "seed": 3, "mean": 45.0, "std": 6.0}}})
        ps = cfg.reference_prices()
        assert ps.n_hours == 48
        assert ps.mean() == pytest.approx(45.0, abs=1e-9)

    def test_price_file_takes_precedence(self, tmp_path):
        path = tmp_path / "p.csv"
        save_prices(path, PriceSeries(np.full(30, 41.0)))
        cfg = config_from_dict({"prices": {"file": str(path)}})
        ps = cfg.reference_prices()
        assert ps.n_hours == 30
        assert ps.mean() == pytest.approx(41.0)

    def test_eval_prices_are_held_out_but_moment_matched(self):
        cfg = config_from_dict({"prices": {"synthetic": {"hours": 96},
                                           "eval_hours": 48,
                                           "eval_seed": 5}})
        ref = cfg.reference_prices()
        ev = cfg.eval_prices()
        assert ev.n_hours == 48
        assert ev.mean() == pytest.approx(ref.mean(), abs=1e-9)
        assert not np.allclose(ev.prices, ref.prices[:48])


class TestHash:
    def test_hash_is_stable_and_value_sensitive(self):
        a = config_from_dict({"seed": 1})
        b = config_from_dict({"seed": 1})
        c = config_from_dict({"seed": 2})
        assert a.hash() == b.hash()
        assert a.hash() != c.hash()
        assert len(a.hash()) == 12

    def test_to_dict_round_trips_through_coercion(self):
        cfg = config_from_dict({"ocp": {"horizon": 9},
                                "train": {"seeds": [2, 3]}})
        again = config_from_dict(cfg.to_dict())
        assert again.hash() == cfg.hash()


class TestLoadFile:
    def test_yaml_file_loads(self, tmp_path):
        path = tmp_path / "run.yaml"
        path.write_text("seed: 3\nocp:\n  horizon: 8\n")
        cfg = load_config(path)
        assert cfg.seed == 3
        assert cfg.ocp.horizon == 8

    def test_empty_file_gives_defaults(self, tmp_path):
        path = tmp_path / "empty.yaml"
        path.write_text("")
        assert load_config(path).dims.n_z == 10

    def test_error_message_names_the_file(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("nonsense_key: 1\n")
        with pytest.raises(ValueError, match="bad.yaml"):
            load_config(path)

    def test_non_mapping_top_level_rejected(self, tmp_path):
        path = tmp_path / "list.yaml"
        path.write_text("- a\n- b\n")
        with pytest.raises(ValueError, match="mapping"):
            load_config(path)

    def test_shipped_configs_load(self):
        root = pathlib.Path(__file__).resolve().parent.parent
        for name in ("desk.yaml", "full_scale.yaml"):
            cfg = load_config(root / "configs" / name)
            assert cfg.ocp_config().horizon >= 1
