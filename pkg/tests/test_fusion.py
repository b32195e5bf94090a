import pytest
import torch

from fuseser.errors import ConfigError, DataError, IngestionError
from fuseser.fusion import (
    F0Variant,
    HeadConfig,
    MLPKind,
    ModalityProjection,
    SERModel,
    SimpleFusion,
    Strategy,
    TransformerFusion,
)
from fuseser.gradchecks import REGISTRY

STRATEGIES = list(Strategy)


def small_cfg(strategy, **kw):
    return HeadConfig(strategy=strategy, speech_dim=6, text_dim=5, model_dim=8, mlp_hidden=8, num_classes=3, **kw)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


def test_projection_identity_and_shapes():
    proj = ModalityProjection(4, 4, 4)
    with torch.no_grad():
        proj.speech.weight.copy_(torch.eye(4))
    s = torch.randn(3, 4)
    ps, pt = proj(s, torch.randn(2, 4))
    assert torch.equal(ps, s)
    assert pt.shape == (2, 4)


def test_projection_dim_mismatch():
    with pytest.raises(IngestionError, match="speech"):
        ModalityProjection(6, 5, 8)(torch.randn(3, 7), torch.randn(2, 5))


def test_simple_constant_modalities():
    vs, vt = torch.randn(8), torch.randn(8)
    out = SimpleFusion()(vs.repeat(4, 1), vt.repeat(3, 1))
    assert torch.allclose(out.pooled, torch.cat([vs, vt]))


def test_simple_permutation_invariant():
    s, t = torch.randn(5, 8, dtype=torch.float64), torch.randn(3, 8, dtype=torch.float64)
    a = SimpleFusion()(s, t).pooled
    b = SimpleFusion()(s[torch.randperm(5)], t).pooled
    assert torch.allclose(a, b, atol=1e-14)


def test_transformer_zero_branch_residual():
    fus = TransformerFusion(8, 4, 0.1).eval()
    with torch.no_grad():
        for name, p in fus.encoder.named_parameters():
            p.zero_()
        fus.encoder.norm1.scale.fill_(1.0)
        fus.encoder.norm2.scale.fill_(1.0)
    s, t = torch.randn(4, 8), torch.randn(3, 8)
    simple = SimpleFusion()(s, t).pooled
    expected = simple + torch.cat([fus.type_embed[0], fus.type_embed[1]])
    assert torch.allclose(fus(s, t).pooled, expected, atol=1e-6)


@pytest.mark.parametrize("strategy", STRATEGIES)
def test_pooled_dim(strategy):
    m = SERModel(small_cfg(strategy)).eval()
    fused = m.fuse(torch.randn(4, 6), torch.randn(3, 5))
    assert fused.pooled.shape == (16,)
    assert torch.isfinite(fused.pooled).all()


@pytest.mark.parametrize("strategy", [Strategy.HCAM, Strategy.MDAT])
def test_single_frame_inputs(strategy):
    m = SERModel(small_cfg(strategy)).eval()
    fused = m.fuse(torch.randn(1, 6), torch.randn(1, 5))
    assert fused.pooled.shape == (16,)
    assert torch.isfinite(fused.pooled).all()


@pytest.mark.parametrize("strategy", [Strategy.HCAM, Strategy.MDAT])
def test_attention_rows_sum_to_one(strategy):
    m = SERModel(small_cfg(strategy)).eval()
    fused = m.fuse(torch.randn(5, 6), torch.randn(4, 5))
    for name, w in fused.attention.items():
        assert (w >= 0).all(), name
        assert torch.allclose(w.sum(-1), torch.ones_like(w.sum(-1)), atol=1e-6), name


def test_mdat_gat_uniform_for_identical_frames():
    m = SERModel(small_cfg(Strategy.MDAT)).eval()
    fused = m.fuse(torch.randn(1, 6).repeat(4, 1), torch.randn(3, 5))
    assert torch.allclose(fused.attention["gat_speech"], torch.full((4, 4), 0.25), atol=1e-6)


def test_mdat_uses_eight_heads():
    assert HeadConfig(strategy=Strategy.MDAT).heads == 8
    assert HeadConfig(strategy=Strategy.HCAM).heads == 4


def test_head_config_validation():
    with pytest.raises(ConfigError, match="divisible"):
        HeadConfig(model_dim=10, heads=4)
    with pytest.raises(ConfigError):
        HeadConfig(num_classes=1)
    with pytest.raises(ConfigError, match="unknown"):
        HeadConfig.from_dict({"strategy": "SIMPLE", "bogus": 1})


def test_head_config_round_trip():
    cfg = HeadConfig(strategy="MDAT", use_f0=True, mlp="SWIGLU")
    again = HeadConfig.from_dict(cfg.to_dict())
    assert again == cfg
    assert cfg.to_dict()["strategy"] == "MDAT"


def test_logits_length():
    m = SERModel(HeadConfig(num_classes=8))
    assert m(torch.randn(3, 64), torch.randn(2, 48)).shape == (8,)


def test_head_input_dims():
    assert SERModel(HeadConfig()).head_in_dim == 128
    assert SERModel(HeadConfig(use_f0=True, use_spectral=True)).head_in_dim == 128 + 1024


def test_missing_branch_input():
    m = SERModel(small_cfg(Strategy.SIMPLE, use_f0=True, f0_bins=16, f0_embed_dim=4, branch_dim=6))
    fused = m.fuse(torch.randn(2, 6), torch.randn(2, 5))
    with pytest.raises(DataError):
        m.classify(fused)
    with pytest.raises(DataError):
        m(torch.randn(2, 6), torch.randn(2, 5))


@pytest.mark.parametrize("strategy", STRATEGIES)
def test_argmax_shift_invariant(strategy):
    m = SERModel(small_cfg(strategy)).eval()
    logits = m(torch.randn(4, 6), torch.randn(3, 5))
    assert torch.argmax(logits) == torch.argmax(logits + 7.5)


def test_prepare_builds_inputs():
    from fuseser.dataio import Example
    import numpy as np

    m = SERModel(small_cfg(Strategy.SIMPLE, use_f0=True, use_spectral=True, mel_bands=4,
                           f0_bins=16, f0_embed_dim=4, branch_dim=6, spectral_width=8, spectral_heads=2))
    ex = Example("u", 0, np.zeros((3, 6)), np.zeros((2, 5)), f0=np.array([0.0, 120.0]), mel=np.zeros((3, 4)))
    kw = m.prepare(ex)
    assert kw["f0"].tolist()[0] == 16
    assert m(**kw).shape == (3,)


def test_cnn_variant_prepare_passes_hz():
    from fuseser.dataio import Example
    import numpy as np

    m = SERModel(small_cfg(Strategy.SIMPLE, use_f0=True, f0_variant=F0Variant.CNN, cnn_channels=4,
                           branch_dim=6, mlp=MLPKind.SWIGLU))
    ex = Example("u", 0, np.zeros((3, 6)), np.zeros((2, 5)), f0=np.array([110.0, 0.0, 130.0]))
    assert m.prepare(ex)["f0"].dtype == torch.float32
    assert m(**m.prepare(ex)).shape == (3,)


@pytest.mark.parametrize(
    "name", ["project_modalities", "fuse_simple", "fuse_transformer", "fuse_mdat", "head_simple"]
)
def test_fusion_gradients(name):
    for seed in range(2):
        rep = REGISTRY[name](seed)
        assert rep.passed(), (seed, rep)
