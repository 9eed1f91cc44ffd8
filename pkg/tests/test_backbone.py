import numpy as np
import pytest
import torch

from glff.backbone import (
    BackboneConfig,
    ResNetBackbone,
    extract_multiscale,
    pooled_deep_feature,
    to_image_tensor,
)
from glff.errors import ConfigError, NumericError, PreprocessError

SMALL = dict(pretrained=False, base_width=8, blocks=(1, 1, 1, 1))


@pytest.fixture(scope="module")
def full():
    return ResNetBackbone(BackboneConfig(pretrained=False)).eval()


@pytest.fixture(scope="module")
def small():
    return ResNetBackbone(BackboneConfig(**SMALL)).eval()


@torch.no_grad()
def test_full_size_tap_shapes(full):
    shallow, deep = extract_multiscale(full, torch.rand(1, 3, 224, 224))
    assert shallow.shape == (1, 256, 56, 56)
    assert deep.shape == (1, 2048, 7, 7)


def test_config_reports_tap_shapes():
    cfg = BackboneConfig(pretrained=False)
    assert (cfg.stage_size(1), cfg.stage_channels(1)) == (56, 256)
    assert (cfg.stage_size(5), cfg.stage_channels(5)) == (7, 2048)
    assert (cfg.stage_size(2), cfg.stage_channels(2)) == (28, 512)
    assert (cfg.stage_size(4), cfg.stage_channels(4)) == (14, 1024)


@torch.no_grad()
def test_zero_image_is_finite(small):
    shallow, deep = extract_multiscale(small, torch.zeros(1, 3, 224, 224))
    assert torch.isfinite(shallow).all() and torch.isfinite(deep).all()


@torch.no_grad()
def test_eval_mode_is_deterministic(small):
    x = torch.rand(1, 3, 224, 224)
    a = extract_multiscale(small, torch.cat([x, x]))
    b = extract_multiscale(small, x)
    assert torch.equal(a[1][0], a[1][1])
    assert torch.allclose(a[1][:1], b[1], atol=1e-6)


@torch.no_grad()
def test_pooled_feature_of_constant_map(small, monkeypatch):
    import glff.backbone as bb

    const = torch.arange(small.cfg.stage_channels(5), dtype=torch.float32)
    monkeypatch.setattr(bb, "deep_tap", lambda b, x: const.view(1, -1, 1, 1).expand(x.shape[0], -1, 7, 7))
    v = bb.pooled_deep_feature(small, torch.rand(2, 3, 224, 224))
    assert torch.equal(v, const.expand(2, -1))


@torch.no_grad()
def test_pooled_feature_shape(small):
    v = pooled_deep_feature(small, torch.rand(3, 3, 224, 224))
    assert v.shape == (3, small.cfg.stage_channels(5))
    assert torch.isfinite(v).all()


def test_wrong_input_size_raises(small):
    with pytest.raises(PreprocessError):
        extract_multiscale(small, torch.rand(1, 3, 200, 200))


def test_non_finite_activation_raises(small):
    x = torch.rand(1, 3, 224, 224)
    x[0, 0, 0, 0] = float("inf")
    with pytest.raises(NumericError):
        extract_multiscale(small, x)


@pytest.mark.parametrize("s,d", [(5, 1), (3, 4), (4, 3), (0, 5), (1, 6)])
def test_stage_order_validated(s, d):
    with pytest.raises(ConfigError):
        BackboneConfig(shallow_stage=s, deep_stage=d, pretrained=False)


@torch.no_grad()
def test_other_stage_pairs():
    b = ResNetBackbone(BackboneConfig(shallow_stage=2, deep_stage=4, **SMALL)).eval()
    shallow, deep = extract_multiscale(b, torch.rand(1, 3, 224, 224))
    assert shallow.shape[2:] == (28, 28) and deep.shape[2:] == (14, 14)


def test_resize_to_input():
    img = np.random.default_rng(0).integers(0, 256, size=(100, 150, 3), dtype=np.uint8)
    t = to_image_tensor(img, 224)
    assert t.shape == (3, 224, 224)
    assert 0 <= t.min() and t.max() <= 1


def test_resize_identity_for_exact_size():
    img = np.random.default_rng(0).integers(0, 256, size=(224, 224, 3), dtype=np.uint8)
    t = to_image_tensor(img, 224)
    assert torch.equal(t, torch.from_numpy(img).permute(2, 0, 1).float() / 255)


def test_bad_image_shape():
    with pytest.raises(PreprocessError):
        to_image_tensor(np.zeros((10, 10), np.uint8))


def test_seeded_init_is_reproducible():
    a = ResNetBackbone(BackboneConfig(seed=3, **SMALL))
    b = ResNetBackbone(BackboneConfig(seed=3, **SMALL))
    c = ResNetBackbone(BackboneConfig(seed=4, **SMALL))
    assert torch.equal(a.conv1.weight, b.conv1.weight)
    assert not torch.equal(a.conv1.weight, c.conv1.weight)


def test_missing_pretrained_falls_back_with_warning(monkeypatch, tmp_path, caplog):
    monkeypatch.setenv("GLFF_PRETRAINED", str(tmp_path / "absent.pth"))
    b = ResNetBackbone(BackboneConfig(pretrained=True))
    assert "random init" in caplog.text
    ref = ResNetBackbone(BackboneConfig(pretrained=False))
    assert torch.equal(b.conv1.weight, ref.conv1.weight)


def test_pretrained_weights_load_from_file(monkeypatch, tmp_path):
    src = ResNetBackbone(BackboneConfig(pretrained=False, seed=9))
    state = {k: v for k, v in src.state_dict().items() if k not in ("mean", "std")}
    state["fc.weight"] = torch.zeros(1000, 2048)
    torch.save(state, tmp_path / "w.pth")
    monkeypatch.setenv("GLFF_PRETRAINED", str(tmp_path / "w.pth"))
    b = ResNetBackbone(BackboneConfig(pretrained=True, seed=0))
    assert torch.equal(b.layer4[0].conv2.weight, src.layer4[0].conv2.weight)
