import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradleak import autodiff as ad
from gradleak.autodiff import DimensionError, Tape, Tensor
from gradleak.models import (
    audit_shapes,
    build_by_id,
    build_dlg_lenet,
    build_feature_classifier,
    build_frozen_extractor,
    build_moderate_classifier,
    build_simple_classifier,
    extract_features,
    forward_loss,
    model_from_manifest,
)


class TestDeterminism:
    @given(st.integers(0, 2**31), st.sampled_from(["dlg-lenet", "simple", "moderate"]))
    @settings(max_examples=10, deadline=None)
    def test_same_seed_same_params(self, seed, model_id):
        shape = (3, 32, 32)
        a = build_by_id(model_id, seed, shape, 10)
        b = build_by_id(model_id, seed, shape, 10)
        assert set(a.params) == set(b.params)
        for k in a.params:
            assert np.array_equal(a.params[k].data, b.params[k].data)

    def test_different_seed_different_params(self):
        a = build_dlg_lenet(10, seed=0)
        b = build_dlg_lenet(10, seed=1)
        assert any(
            not np.array_equal(a.params[k].data, b.params[k].data) for k in a.params
        )

    def test_init_range(self):
        m = build_dlg_lenet(10, seed=0)
        for t in m.params.values():
            assert t.data.min() >= -0.5 and t.data.max() <= 0.5


class TestShapes:
    def test_lenet_forward_shape(self):
        m = build_dlg_lenet(100, seed=0)
        with Tape():
            out = m.forward(Tensor(np.zeros((3, 32, 32))))
        assert out.shape == (1, 100)

    def test_feature_classifier_forward_shape(self):
        m = build_feature_classifier(13, seed=0)
        assert m.input_shape == (1, 10, 64)
        with Tape():
            out = m.forward(Tensor(np.zeros((1, 10, 64))))
        assert out.shape == (1, 13)

    def test_simple_is_affine(self):
        m = build_simple_classifier((64,), 13, seed=0)
        rng = np.random.default_rng(0)
        x1, x2 = rng.standard_normal(64), rng.standard_normal(64)

        def logits(v):
            with Tape():
                return m.forward(Tensor(v)).data.copy()

        lhs = logits(0.3 * x1 + 0.7 * x2) + logits(np.zeros(64)) * 0
        combo = 0.3 * logits(x1) + 0.7 * logits(x2)
        bias_part = logits(np.zeros(64))
        assert np.allclose(lhs, combo + 0 * bias_part, atol=1e-10) or np.allclose(
            logits(x1 + x2) + bias_part, logits(x1) + logits(x2), atol=1e-10
        )

    def test_moderate_has_more_parameters_than_simple(self):
        for shape in ((3, 32, 32), (64,)):
            s = build_simple_classifier(shape, 13, seed=0)
            m = build_moderate_classifier(shape, 13, seed=0)
            assert m.param_count() > s.param_count()
            assert len(m.layers) > len(s.layers)

    def test_audit_shapes_returns_logit_shape(self):
        m = build_dlg_lenet(10, seed=0)
        assert audit_shapes(m) == (1, 10)

    def test_wrong_input_shape_raises(self):
        m = build_dlg_lenet(10, seed=0)
        with Tape():
            with pytest.raises(DimensionError):
                m.forward(Tensor(np.zeros((3, 16, 16))))


class TestSimpleGradientStructure:
    def test_weight_gradient_is_rank_one_outer_product(self):
        rng = np.random.default_rng(5)
        m = build_simple_classifier((64,), 13, seed=2)
        x = rng.standard_normal(64)
        with Tape():
            xt = Tensor(x)
            logits, loss = forward_loss(m, xt, 4)
            grads = ad.grad(loss, [m.params["fc1.w"], m.params["fc1.b"]])
        gw, gb = grads[0].data, grads[1].data
        z = logits.data[0]
        p = np.exp(z - z.max())
        p /= p.sum()
        delta = p.copy()
        delta[4] -= 1.0
        assert np.allclose(gb, delta, atol=1e-12)
        assert np.allclose(gw, np.outer(delta, x), atol=1e-12)
        assert np.linalg.matrix_rank(gw) == 1


class TestExtractor:
    def test_extractor_is_frozen(self):
        ext = build_frozen_extractor(64, seed=7)
        assert ext.trainable_params() == {}

    def test_features_are_bounded_and_deterministic(self):
        ext = build_frozen_extractor(64, seed=7)
        x = Tensor(np.random.default_rng(0).uniform(0, 1, (3, 32, 32)))
        f1 = extract_features(ext, x)
        f2 = extract_features(ext, x)
        assert f1.shape == (64,)
        assert np.array_equal(f1.data, f2.data)
        assert f1.data.min() > 0.0 and f1.data.max() < 1.0


class TestManifests:
    def test_manifest_round_trip_rebuilds_identical_model(self):
        m = build_moderate_classifier((3, 32, 32), 17, seed=9)
        back = model_from_manifest(json.loads(json.dumps(m.manifest())))
        assert back.id == m.id
        assert back.input_shape == m.input_shape
        for k in m.params:
            assert np.array_equal(back.params[k].data, m.params[k].data)

    def test_embedded_params_override(self):
        m = build_simple_classifier((8,), 3, seed=1)
        man = m.manifest(embed_params=True)
        man["seed"] = 999  # params should come from the blob, not the seed
        back = model_from_manifest(man)
        for k in m.params:
            assert np.allclose(
                back.params[k].data, m.params[k].data.astype(np.float32), atol=0
            )

    def test_unknown_architecture_raises(self):
        with pytest.raises(ValueError):
            build_by_id("nonexistent", 0, (3, 32, 32), 10)
