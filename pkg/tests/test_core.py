import numpy as np
import pytest
import torch

from ccenternet.core import (CLASS_NAMES, AblationFlags, BoundingBox, ConfigError, DataError, Detection,
                             DivergenceError, ImageSample, ModelConfig, RngState, dump_config,
                             load_config_text, parse_override, seed_all, validate_config)


def test_class_ids_and_exit_codes():
    assert CLASS_NAMES == ("dotted", "folded", "malposed", "normal", "unfiltered")
    assert (ConfigError.exit_code, DataError.exit_code, DivergenceError.exit_code) == (2, 3, 4)


def test_box_validation_and_geometry():
    b = BoundingBox(1, 2, 5, 10, 3)
    assert (b.width, b.height, b.area, b.center) == (4, 8, 32, (3.0, 6.0))
    for bad in [(0, 0, 0, 1), (0, 0, 1, -1), (0, 0, float("nan"), 1)]:
        with pytest.raises(ValueError):
            BoundingBox(*bad)
    with pytest.raises(ValueError):
        BoundingBox(0, 0, 1, 1, -1)
    assert BoundingBox(-5, -5, 5, 5).clip(3, 3).as_tuple() == (0, 0, 3, 3)
    assert BoundingBox(10, 10, 12, 12).clip(5, 5) is None


def test_sample_and_detection_validation():
    with pytest.raises(ValueError):
        ImageSample(np.zeros((3, 10, 10)), [BoundingBox(0, 0, 11, 5)])
    with pytest.raises(ValueError):
        ImageSample(np.zeros((10, 10)), [])
    with pytest.raises(ValueError):
        Detection(0, 1.5, BoundingBox(0, 0, 1, 1))


def test_validate_config_examples():
    assert validate_config(ModelConfig()).output_stride == 4
    with pytest.raises(ConfigError):
        validate_config(ModelConfig(output_stride=3))
    cfg = validate_config(ModelConfig(lambda_reg=None))
    assert cfg.lambda_reg == 0.1 and cfg.lambda_off == 1.0
    assert validate_config({"input_size": [256, 512]}).input_size == (256, 512)


@pytest.mark.parametrize("bad", [
    {"input_size": (500, 500)},
    {"lambda_off": 0},
    {"top_k": 0},
    {"cbam_kernel": 4},
    {"gaussian_iou": 1.0},
    {"n_classes": 3},
    {"no_such_key": 1},
    {"base_width": 0},
])
def test_validate_config_rejects(bad):
    with pytest.raises(ConfigError):
        validate_config(bad)


def test_config_dict_round_trip():
    cfg = ModelConfig(input_size=(128, 512), base_width=16, ablation=AblationFlags(cbam=False, dcn=False))
    d = cfg.to_dict()
    assert d["cbam"] is False and "ablation" not in d
    assert ModelConfig.from_dict(d) == cfg
    assert ModelConfig.from_dict(load_config_text(dump_config(d))) == cfg


def test_ablation_rows_are_cumulative():
    rows = AblationFlags.ablation_rows()
    assert len(rows) == 6
    assert rows[0] == AblationFlags(False, False, False, False, False)
    assert rows[1] == AblationFlags(True, False, False, False, False)
    assert rows[-1] == AblationFlags()
    on = [sum(vars(r).values()) for r in rows]
    assert on == [0, 1, 2, 3, 4, 5]


def test_parse_override():
    assert parse_override("base_width=16") == ("base_width", 16)
    assert parse_override("cbam=false") == ("cbam", False)
    assert parse_override("input_size=128,512") == ("input_size", [128, 512])
    assert parse_override("lr_frozen=1e-3") == ("lr_frozen", 1e-3)
    for bad in ("nokey", "=3"):
        with pytest.raises(ConfigError):
            parse_override(bad)


def test_load_config_rejects_nested():
    with pytest.raises(ConfigError):
        load_config_text("a:\n  b: 1\n")
    with pytest.raises(ConfigError):
        load_config_text("- 1\n- 2\n")


def test_rng_children_deterministic_and_distinct():
    a, b = RngState(0), RngState(0)
    assert np.array_equal(a.child("augment").random(8), b.child("augment").random(8))
    assert not np.array_equal(a.child("augment").random(8), a.child("shuffle").random(8))
    assert not np.array_equal(RngState(0).child("x").random(8), RngState(1).child("x").random(8))
    # independent of how many other streams were drawn first
    c = RngState(0)
    c.child("other").random(100)
    assert np.array_equal(c.child("augment").random(8), RngState(0).child("augment").random(8))


def test_seed_all_seeds_torch():
    seed_all(5)
    x = torch.rand(4)
    seed_all(5)
    assert torch.equal(x, torch.rand(4))
