import numpy as np
import pytest

from palmseg import checkpoint
from palmseg.errors import ConfigError, CorruptHeaderError, DimensionError, ShapeMismatchError, TruncatedFileError
from palmseg.nn import ConvParams
from palmseg.tensor import Tensor, no_grad
from palmseg.unet import (
    UNetConfig,
    build,
    closed_form_param_count,
    expected_shapes,
    forward,
    load,
    param_count,
    save,
)

TINY = UNetConfig(depth=2, base_channels=4)


def test_single_conv_param_count():
    conv = ConvParams.init("c", 3, 2, 1, seed=0)
    assert sum(p.size for p in conv.named("c").values()) == 8


def test_hand_counted_depth1_base4():
    # enc 40+148, bottleneck 296+584, cfm 9+2*(18+24), dec 292+292+148, head 5
    assert param_count(build(UNetConfig(depth=1, base_channels=4))) == 1898


@pytest.mark.parametrize("depth,base,r,cfm", [(1, 4, 4, True), (2, 4, 2, True), (3, 8, 4, True), (2, 6, 4, False)])
def test_closed_form_matches_built_model(depth, base, r, cfm):
    cfg = UNetConfig(depth=depth, base_channels=base, cfm_reduction=r, use_cfm=cfm)
    assert param_count(build(cfg)) == closed_form_param_count(cfg)


def test_default_config_count():
    # reported in module docs and the README next to the published figure
    assert closed_form_param_count(UNetConfig()) == 8_893_858


def test_same_seed_bit_identical():
    a, b = build(TINY, seed=3), build(TINY, seed=3)
    for k, v in a.named_parameters().items():
        assert v.data.tobytes() == b.named_parameters()[k].data.tobytes()
    c = build(TINY, seed=4)
    assert any(not np.array_equal(v.data, c.named_parameters()[k].data) for k, v in a.named_parameters().items())


def test_removing_cfm_keeps_other_parameters():
    a = build(TINY, seed=1).named_parameters()
    b = build(UNetConfig(depth=2, base_channels=4, use_cfm=False), seed=1).named_parameters()
    assert set(a) - set(b) == {k for k in a if k.startswith("cfm.")}
    for k in b:
        np.testing.assert_array_equal(a[k].data, b[k].data)


def test_bad_reduction_is_config_error():
    with pytest.raises(ConfigError):
        build(UNetConfig(depth=1, base_channels=3, cfm_reduction=4))
    with pytest.raises(ConfigError):
        build(UNetConfig(depth=0))


def test_forward_shape_and_range(rng):
    model = build(TINY)
    with no_grad():
        out = forward(model, Tensor(rng.random((2, 1, 16, 24)))).data
    assert out.shape == (2, 1, 16, 24)
    assert np.all((out > 0) & (out < 1))


def test_forward_names_offending_level():
    model = build(UNetConfig(depth=3, base_channels=2, cfm_reduction=2))
    with pytest.raises(DimensionError, match="level 2"):
        forward(model, Tensor(np.zeros((1, 1, 12, 16))))
    with pytest.raises(DimensionError):
        forward(model, Tensor(np.zeros((1, 3, 16, 16))))


def test_save_load_save_identical_bytes(tmp_path, rng):
    model = build(TINY, seed=2)
    for p in model.named_parameters().values():
        p.data += rng.standard_normal(p.shape).astype(np.float32)
    save(model, tmp_path / "a.bin")
    back = load(tmp_path / "a.bin")
    save(back, tmp_path / "b.bin")
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    assert back.config == model.config
    x = Tensor(rng.random((1, 1, 8, 8)))
    with no_grad():
        assert forward(model, x).data.tobytes() == forward(back, x).data.tobytes()


def test_load_flipped_shape(tmp_path):
    model = build(TINY)
    entries = {k: v.data for k, v in model.named_parameters().items()}
    entries["dec0.up.weight"] = np.ascontiguousarray(entries["dec0.up.weight"].transpose(1, 0, 2, 3))
    checkpoint.write_checkpoint(tmp_path / "x.bin", entries, {"config": {"depth": 2, "base_channels": 4}})
    with pytest.raises(ShapeMismatchError, match="dec0.up.weight"):
        load(tmp_path / "x.bin")


def test_load_truncated_and_corrupt(tmp_path):
    save(build(TINY), tmp_path / "m.bin")
    raw = (tmp_path / "m.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(raw[:-10])
    with pytest.raises(TruncatedFileError):
        load(tmp_path / "t.bin")
    (tmp_path / "c.bin").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CorruptHeaderError, match="magic"):
        load(tmp_path / "c.bin")
    (tmp_path / "e.bin").write_bytes(raw + b"\0")
    with pytest.raises(CorruptHeaderError, match="trailing"):
        load(tmp_path / "e.bin")


def test_checkpoint_generic_roundtrip(tmp_path, rng):
    entries = {"a": rng.standard_normal((2, 3)).astype(np.float32), "b": np.arange(4, dtype=np.float32)}
    checkpoint.write_checkpoint(tmp_path / "g.bin", entries, {"k": 1})
    meta, got = checkpoint.read_checkpoint(tmp_path / "g.bin", expected={"a": (2, 3), "b": (4,)})
    assert meta == {"k": 1}
    for k in entries:
        np.testing.assert_array_equal(got[k], entries[k])
    with pytest.raises(ShapeMismatchError):
        checkpoint.read_checkpoint(tmp_path / "g.bin", expected={"a": (3, 2), "b": (4,)})


def test_expected_shapes_cover_model():
    model = build(TINY)
    assert {k: v.shape for k, v in model.named_parameters().items()} == expected_shapes(TINY)
