import pytest

from irfuse.config import ConfigError, apply_overrides, dump_kv, load_kv, parse_kv
from irfuse.train import TrainConfig
from irfuse.translate import TranslatorConfig


def test_parse_kv_comments_and_blanks():
    text = "# header\nlr = 0.01\n\nwidths = (8, 16, 32)  # inline\nmethod=method3\n"
    assert parse_kv(text) == {"lr": "0.01", "widths": "(8, 16, 32)", "method": "method3"}


@pytest.mark.parametrize("bad", ["lr 0.01", " = 3"])
def test_parse_kv_rejects_malformed(bad):
    with pytest.raises(ConfigError, match="line 1"):
        parse_kv(bad)


def test_load_kv_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="does not exist"):
        load_kv(tmp_path / "nope.cfg")


def test_apply_overrides_coerces_types():
    cfg = apply_overrides(TrainConfig.desk(), {
        "lr": "0.2", "epochs_meta": "30", "augment": "off", "widths": "[4, 8, 8]", "method": "method3",
    })
    assert cfg.lr == 0.2 and cfg.epochs_meta == 30 and cfg.augment is False
    assert cfg.widths == (4, 8, 8) and cfg.method == "method3"


def test_apply_overrides_errors():
    with pytest.raises(ConfigError, match="unknown"):
        apply_overrides(TrainConfig.desk(), {"learning_rate": "1"})
    with pytest.raises(ConfigError, match="epochs_meta"):
        apply_overrides(TrainConfig.desk(), {"epochs_meta": "many"})
    with pytest.raises(ConfigError, match="boolean"):
        apply_overrides(TrainConfig.desk(), {"augment": "maybe"})


@pytest.mark.parametrize("cfg", [TrainConfig.desk(), TrainConfig.paper(), TranslatorConfig.desk("ir2l")])
def test_dump_round_trip(cfg):
    assert apply_overrides(cfg, parse_kv(dump_kv(cfg))) == cfg
