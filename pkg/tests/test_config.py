import numpy as np
import pytest

from mvalign.config import KEYS, ConfigKeyError, default_config, load_config, parse_config
from mvalign.landmarks.schema import five_point_template


def test_defaults():
    cfg = default_config()
    assert cfg.lr == 1e-4 and cfg.batch_size == 12 and cfg.optimizer == "sgd"
    assert cfg.thresholds == (0.5, 0.5, 0.3, 0.7)
    np.testing.assert_allclose(np.array(cfg.template), five_point_template(1.0), atol=1e-12)


def test_text_round_trip(tmp_path):
    cfg = default_config()
    path = tmp_path / "c.cfg"
    path.write_text(cfg.to_text())
    assert load_config(str(path)) == cfg
    assert set(cfg) == set(KEYS)


def test_parse_overrides_and_errors():
    cfg = parse_config("lr = 0.01  # faster\nthresholds = 0.6, 0.7, 0.7, 0.7\nsmooth = yes\n")
    assert cfg.lr == 0.01 and cfg.thresholds == (0.6, 0.7, 0.7, 0.7) and cfg.smooth is True
    with pytest.raises(ConfigKeyError):
        parse_config("learning_rate = 1")
    with pytest.raises(ValueError, match="line 2"):
        parse_config("lr = 1\nbatch_size = many")
    with pytest.raises(ValueError):
        parse_config("just words")
