import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from scenessl import numerics as nx
from scenessl.errors import ContractError, DimensionError, FingerprintError, NumericInstabilityError
from scenessl.model import (
    Checkpoint,
    EncoderConfig,
    ModelConfig,
    ProjectionConfig,
    SceneModel,
    encoder_parameter_count,
    load_checkpoint,
    save_checkpoint,
)
from scenessl.numerics import Rng, Tensor
from scenessl.numerics.gradcheck import directional_derivative


def tiny_config(size=16, widths=(8, 16), blocks=(1, 1), emb=8, classes=8, prototypes=0):
    enc = EncoderConfig(input_size=(size, size, 3), stage_widths=widths, blocks_per_stage=blocks,
                        embedding_dim=emb, groups=4)
    return ModelConfig(enc, ProjectionConfig(hidden_dim=16, output_dim=8), num_classes=classes,
                       prototypes=prototypes)


def encoder_params(model):
    return [(n, p) for n, p in model.named_parameters() if n.startswith("encoder.")]


def test_parameter_count_hand_check():
    # stem 3·3·3·8 + norm 2·8                      = 232
    # stage 0, 8→8:   2 convs 9·8·8 + 2 norms 2·8   = 1184
    # stage 1, 8→16:  9·8·16 + 9·16·16 + 2 norms 2·16 + 1×1 shortcut 8·16 + norm 2·16 = 3680
    # fc 16·8 + 8                                   = 136
    cfg = tiny_config()
    assert encoder_parameter_count(cfg.encoder) == 232 + 1184 + 3680 + 136 == 5232
    model = SceneModel(cfg, Rng(0))
    assert sum(p.data.size for _, p in encoder_params(model)) == 5232


@given(widths=st.lists(st.integers(1, 12), min_size=1, max_size=3), data=st.data())
def test_parameter_count_matches_built_encoder(widths, data):
    blocks = data.draw(st.lists(st.integers(1, 2), min_size=len(widths), max_size=len(widths)))
    enc = EncoderConfig(input_size=(16, 16, 3), stage_widths=widths, blocks_per_stage=blocks, embedding_dim=8)
    model = SceneModel(ModelConfig(enc, ProjectionConfig(8, 8)), Rng(0))
    assert encoder_parameter_count(enc) == sum(p.data.size for _, p in encoder_params(model))


def test_config_invariants():
    with pytest.raises(ContractError):
        EncoderConfig(stage_widths=(8, 16), blocks_per_stage=(1,))
    with pytest.raises(ContractError):
        EncoderConfig(embedding_dim=4)
    with pytest.raises(ContractError):
        ProjectionConfig(hidden_dim=8, output_dim=16)


def test_zero_image_gives_finite_embedding_and_is_deterministic():
    model = SceneModel(tiny_config(), Rng(1))
    x = Tensor(np.zeros((2, 3, 16, 16)))
    a, b = model.encode(x).data, model.encode(x).data
    assert a.shape == (2, 8) and np.isfinite(a).all()
    assert np.array_equal(a, b)


def test_all_zero_parameters_give_zero_embedding():
    model = SceneModel(tiny_config(), Rng(1))
    for _, p in encoder_params(model):
        p.data[...] = 0
    x = Tensor(Rng(2).uniform(0, 1, (3, 3, 16, 16)))
    np.testing.assert_array_equal(model.encode(x).data, 0.0)


def test_encoder_rejects_wrong_extent():
    model = SceneModel(tiny_config(), Rng(1))
    with pytest.raises(DimensionError):
        model.encode(Tensor(np.zeros((1, 3, 32, 32))))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_output_names_the_layer():
    model = SceneModel(tiny_config(), Rng(1))
    model.encoder.stem.weight.data[...] = np.inf
    with pytest.raises(NumericInstabilityError) as info:
        model.encode(Tensor(np.ones((1, 3, 16, 16))))
    assert info.value.layer == "stem"


def test_input_gradient_matches_finite_differences(f64):
    model = SceneModel(tiny_config(), Rng(4))
    # nonzero final-norm scales so every residual branch contributes
    for n, p in model.named_parameters():
        if n.endswith("norm2.weight"):
            p.data[...] = 0.5
    rng = Rng(5)
    x = Tensor(rng.uniform(0, 1, (2, 3, 16, 16)), requires_grad=True)
    f = lambda: nx.sum(model.encode(x))  # noqa: E731
    nx.backward(f())
    worst = 0.0
    for k in range(5):
        d = rng.child("dir", k).normal(size=x.shape)
        d /= np.linalg.norm(d)
        numeric = directional_derivative(f, [x], [d], step=1e-4)
        analytic = float((x.grad * d).sum())
        worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12))
    assert worst < 1e-3


def test_heads_shapes_and_softmax():
    model = SceneModel(tiny_config(), Rng(1))
    e = model.encode(Tensor(Rng(2).uniform(0, 1, (4, 3, 16, 16))))
    logits = model.classify(e)
    assert logits.shape == (4, 8)
    np.testing.assert_allclose(nx.softmax(logits, 1).data.sum(axis=1), 1.0, atol=1e-6)
    assert model.project(e).shape == (4, 8)
    with pytest.raises(DimensionError):
        model.classify(Tensor(np.ones((4, 5))))


@pytest.mark.parametrize("classes", [4, 8, 12])
def test_identity_classifier_pads_or_truncates(classes):
    model = SceneModel(tiny_config(classes=classes), Rng(1), classifier_init="identity")
    e = Rng(3).normal(size=(2, 8))
    out = model.classify(Tensor(e)).data
    expect = np.zeros((2, classes))
    k = min(8, classes)
    expect[:, :k] = e[:, :k]
    np.testing.assert_allclose(out, expect, rtol=1e-6)


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    cfg = tiny_config(prototypes=5)
    model = SceneModel(cfg, Rng(8))
    ckpt = Checkpoint.from_model(model, lineage=["pretext-scene"], epoch=3, seed=8,
                                 rng_state=Rng(8).state(), class_names=list("abcdefgh"))
    path = save_checkpoint(ckpt, tmp_path / "m.ckpt")
    back = load_checkpoint(path, expected=cfg)
    assert back.lineage == ["pretext-scene"] and back.epoch == 3 and back.class_names == list("abcdefgh")
    x = Tensor(Rng(9).uniform(0, 1, (3, 3, 16, 16)))
    one = model.classify(model.encode(x)).data
    two = back.build_model().classify(back.build_model().encode(x)).data
    assert np.array_equal(one, two)


def test_checkpoint_refuses_wrong_embedding_dim(tmp_path):
    path = save_checkpoint(Checkpoint.from_model(SceneModel(tiny_config(), Rng(0))), tmp_path / "m.ckpt")
    with pytest.raises(FingerprintError) as info:
        load_checkpoint(path, expected=tiny_config(emb=16))
    assert "encoder.embedding_dim" in info.value.diff


def test_with_stage_appends_lineage():
    ckpt = Checkpoint.from_model(SceneModel(tiny_config(), Rng(0)))
    chained = ckpt.with_stage("pretext-object").with_stage("pretext-scene").with_stage("downstream")
    assert chained.lineage == ["pretext-object", "pretext-scene", "downstream"]
    with pytest.raises(ContractError):
        ckpt.with_stage("imagenet")


def test_not_a_checkpoint(tmp_path):
    p = tmp_path / "junk.ckpt"
    p.write_bytes(b"hello world, not a checkpoint")
    with pytest.raises(ContractError):
        load_checkpoint(p)
