import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from fea_cncd import diffkernel as dk
from fea_cncd.model import (
    CheckpointError,
    CosineClassifier,
    Encoder,
    ModelState,
    ProjectionHead,
    classify,
    encode,
    extend_classifier,
    read_blocks,
    snapshot_teacher,
    write_blocks,
)


def test_identity_encoder_passes_batch_through():
    enc = Encoder(3, 3, mode="identity")
    x = np.random.default_rng(0).normal(size=(4, 3))
    assert np.array_equal(encode(enc, x).data, x)
    assert enc.parameters() == []


def test_identity_needs_matching_dims():
    with pytest.raises(ValueError):
        Encoder(3, 4, mode="identity")


def test_one_layer_relu_example():
    enc = Encoder(2, 2, layers=[(np.eye(2), np.zeros((1, 2)))], out_relu=True)
    assert np.array_equal(encode(enc, np.array([[-1.0, 2.0]])).data, [[0.0, 2.0]])


def test_two_layer_mlp_matches_scalar_oracle():
    rng = np.random.default_rng(1)
    enc = Encoder(5, 4, mode="mlp", rng=rng)
    x = rng.normal(size=(6, 5))
    layers = [(w.data, b.data) for w, b in enc.layers]
    assert np.allclose(encode(enc, x).data, oracles.mlp_forward(x, layers), atol=1e-12, rtol=0)


def test_encoder_rejects_wrong_width_and_non_finite_weights():
    enc = Encoder(3, 2, rng=np.random.default_rng(0))
    with pytest.raises(dk.ShapeError):
        encode(enc, np.zeros((2, 4)))
    with pytest.raises(ValueError, match="finite"):
        Encoder(2, 2, layers=[(np.array([[np.nan, 0], [0, 1]]), np.zeros((1, 2)))])


def test_residual_mode_starts_near_identity():
    enc = Encoder(4, 4, mode="residual", rng=np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(3, 4))
    assert np.abs(encode(enc, x).data - x).max() < 1.0


# ---------------------------------------------------------------- classifier


def test_same_direction_logit_is_scale():
    clf = CosineClassifier(np.array([[2.0, 1.0]]), scale=10.0)
    assert classify(clf, np.array([[4.0, 2.0]])).item() == pytest.approx(10.0)


def test_orthogonal_logit_is_zero():
    clf = CosineClassifier(np.array([[1.0, 0.0]]))
    assert classify(clf, np.array([[0.0, 3.0]])).item() == 0.0


def test_half_diagonal_logit():
    clf = CosineClassifier(np.array([[1.0, 0.0]]), scale=1.0)
    assert classify(clf, np.array([[1.0, 1.0]])).item() == pytest.approx(0.70711, abs=1e-5)


def test_logits_match_oracle_and_stay_in_range():
    rng = np.random.default_rng(2)
    w, h = rng.normal(size=(5, 6)), rng.normal(size=(7, 6))
    out = classify(CosineClassifier(w, 3.0), h).data
    assert np.allclose(out, oracles.cosine_logits(h, w, 3.0), atol=1e-12)
    assert np.all(np.abs(out) <= 3.0 + 1e-12)


def test_zero_weight_row_rejected_at_construction():
    with pytest.raises(ValueError, match="non-zero"):
        CosineClassifier(np.array([[1.0, 0.0], [0.0, 0.0]]))
    with pytest.raises(ValueError):
        CosineClassifier(np.ones((1, 2)), scale=0.0)


def test_classifier_width_mismatch():
    with pytest.raises(dk.ShapeError):
        classify(CosineClassifier(np.ones((2, 3))), np.ones((1, 4)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100.0))
def test_argmax_invariant_to_row_rescaling(seed, factor):
    rng = np.random.default_rng(seed)
    clf = CosineClassifier(rng.normal(size=(4, 5)))
    h = rng.normal(size=(6, 5))
    scaled = h.copy()
    scaled[rng.integers(6)] *= factor
    assert np.array_equal(classify(clf, h).data.argmax(1), classify(clf, scaled).data.argmax(1))


# ---------------------------------------------------------------- extension


def test_extend_by_zero_is_a_no_op():
    clf = CosineClassifier(np.eye(3))
    assert extend_classifier(clf, 0, seed=1) is clf


def test_extend_keeps_old_rows_byte_for_byte():
    rng = np.random.default_rng(3)
    clf = CosineClassifier(rng.normal(size=(5, 4)))
    before = clf.weight.data.tobytes()
    bigger = extend_classifier(clf, 2, seed=7)
    assert bigger.n_classes == 7
    assert bigger.weight.data[:5].tobytes() == before
    assert np.allclose(np.linalg.norm(bigger.weight.data[5:], axis=1), 1.0)


def test_extend_is_deterministic_under_seed():
    clf = CosineClassifier(np.eye(3))
    a = extend_classifier(clf, 4, seed=11).weight.data
    b = extend_classifier(clf, 4, seed=11).weight.data
    c = extend_classifier(clf, 4, seed=12).weight.data
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_extend_negative_rejected():
    with pytest.raises(ValueError):
        extend_classifier(CosineClassifier(np.eye(2)), -1, seed=0)


def test_empty_classifier_grows_from_nothing():
    clf = extend_classifier(CosineClassifier.empty(3), 2, seed=0)
    assert clf.n_classes == 2 and clf.feature_dim == 3


# ---------------------------------------------------------------- teacher and heads


def test_teacher_equals_student_then_stays_frozen():
    rng = np.random.default_rng(4)
    enc = Encoder(4, 3, rng=rng)
    probe = rng.normal(size=(5, 4))
    teacher = snapshot_teacher(enc)
    assert encode(enc, probe).data.tobytes() == teacher(probe).data.tobytes()
    frozen = teacher(probe).data.copy()
    params = enc.parameters()
    for _ in range(100):
        dk.zero_grad(params)
        dk.backward(dk.mean(dk.mul(encode(enc, probe), encode(enc, probe))))
        for p in params:
            p.data -= 0.05 * p.grad
    assert not np.array_equal(encode(enc, probe).data, frozen)
    assert np.array_equal(teacher(probe).data, frozen)
    assert all(not p.requires_grad for p in teacher.parameters())


def test_teacher_of_identity_is_identity():
    x = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(snapshot_teacher(Encoder(3, 3, mode="identity"))(x).data, x)


def test_projection_head_shapes_and_purpose():
    head = ProjectionHead(4, 6, purpose="bap", rng=np.random.default_rng(0))
    assert head(np.ones((3, 4))).shape == (3, 6)
    with pytest.raises(ValueError):
        ProjectionHead(4, 6, purpose="cluster")


def test_heads_do_not_change_classifier_input():
    rng = np.random.default_rng(5)
    enc = Encoder(4, 4, rng=rng)
    m = ModelState(enc, CosineClassifier(rng.normal(size=(3, 4))), ProjectionHead(4, 4, rng=rng))
    x = rng.normal(size=(2, 4))
    before = classify(m.classifier, encode(enc, x)).data
    m.contrastive_head(encode(enc, x))
    assert np.array_equal(classify(m.classifier, encode(enc, x)).data, before)


# ---------------------------------------------------------------- checkpoint container


def test_model_state_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    m = ModelState(Encoder(4, 3, rng=rng), CosineClassifier(rng.normal(size=(2, 3)), 7.0),
                   ProjectionHead(3, 3, rng=rng), ProjectionHead(3, 3, purpose="bap", rng=rng))
    write_blocks(tmp_path / "m.feac", m.blocks())
    back = ModelState.from_blocks(read_blocks(tmp_path / "m.feac"))
    x = rng.normal(size=(5, 4))
    assert np.array_equal(encode(back.encoder, x).data, encode(m.encoder, x).data)
    assert np.array_equal(back.classifier.weight.data, m.classifier.weight.data)
    assert back.classifier.scale == 7.0
    assert np.array_equal(back.bap_head.w2.data, m.bap_head.w2.data)


def test_container_layout_is_little_endian_f8(tmp_path):
    write_blocks(tmp_path / "a.feac", {"w": np.array([[1.0, 2.0]])})
    raw = (tmp_path / "a.feac").read_bytes()
    assert raw[:4] == b"FEAC"
    assert raw[4:8] == (1).to_bytes(4, "little")
    assert raw[8:10] == (1).to_bytes(2, "little") and raw[10:11] == b"w"
    assert raw[11:19] == (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
    assert np.frombuffer(raw[19:], "<f8").tolist() == [1.0, 2.0]


def test_container_errors(tmp_path):
    p = tmp_path / "x.feac"
    p.write_bytes(b"NOPE\x01\x00\x00\x00")
    with pytest.raises(CheckpointError, match="magic"):
        read_blocks(p)
    write_blocks(p, {"w": np.ones((3, 3))})
    p.write_bytes(p.read_bytes()[:-5])
    with pytest.raises(CheckpointError, match="truncated"):
        read_blocks(p)
    p.write_bytes(b"FEAC" + (9).to_bytes(4, "little"))
    with pytest.raises(CheckpointError, match="version"):
        read_blocks(p)
