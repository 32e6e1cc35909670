import numpy as np
import pytest

from gradleak.attacks import (
    AmbiguityError,
    AttackConfig,
    dlg_attack,
    gradient_match_loss,
    idlg_attack,
    idlg_label_recover,
    rgap_reconstruct,
    solve_outer_product,
)
from gradleak.autodiff import Tensor
from gradleak.harness import compute_shared_gradient
from gradleak.models import (
    _Builder,
    build_dlg_lenet,
    build_moderate_classifier,
    build_simple_classifier,
)


def brute_force_label(model, x, capsule):
    """Oracle: recompute the capsule for every candidate label and pick the
    closest match."""
    best, best_d = None, np.inf
    for c in range(model.num_classes):
        cand = compute_shared_gradient(model, x, c)
        d = sum(
            float(np.sum((cand.gradients[k] - capsule.gradients[k]) ** 2))
            for k in capsule.gradients
        )
        if d < best_d:
            best, best_d = c, d
    return best


def linear_sigmoid_net(widths, num_classes, seed=0):
    """Stack of square linear+sigmoid blocks ending in a linear classifier."""
    b = _Builder("test-net", seed, (widths[0],), num_classes)
    for w in widths[1:]:
        b.linear(w).activation()
    b.linear(num_classes)
    return b.build()


class TestConfig:
    def test_rejects_bad_values(self):
        with pytest.raises(ValueError):
            AttackConfig(loss_threshold=0)
        with pytest.raises(ValueError):
            AttackConfig(max_restarts=0)
        with pytest.raises(ValueError):
            AttackConfig(optimizer="sgd")
        with pytest.raises(ValueError):
            AttackConfig(schedule="annealing")


class TestGradientMatchLoss:
    def test_zero_iff_identical(self):
        g = {"a": np.ones((2, 2)), "b": np.arange(3.0)}
        assert gradient_match_loss(g, g).item() == 0.0
        h = {"a": np.ones((2, 2)), "b": np.arange(3.0) + 0.5}
        assert gradient_match_loss(g, h).item() == pytest.approx(3 * 0.25)

    def test_symmetric_and_nonnegative(self):
        rng = np.random.default_rng(0)
        g = {"a": rng.standard_normal((3, 2))}
        h = {"a": rng.standard_normal((3, 2))}
        assert gradient_match_loss(g, h).item() == gradient_match_loss(h, g).item()
        assert gradient_match_loss(g, h).item() > 0


class TestLabelRecovery:
    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(0)
        for trial in range(10):
            model = build_simple_classifier((12,), 7, seed=trial)
            x = Tensor(rng.standard_normal(12))
            label = int(rng.integers(7))
            cap = compute_shared_gradient(model, x, label)
            assert idlg_label_recover(cap, model) == label
            assert brute_force_label(model, x, cap) == label

    def test_saturated_logits_still_unambiguous(self):
        # Large inputs saturate softmax; most gradient rows underflow to ~0.
        model = build_simple_classifier((12,), 7, seed=1)
        x = Tensor(np.random.default_rng(2).standard_normal(12) * 40)
        cap = compute_shared_gradient(model, x, 3)
        assert idlg_label_recover(cap, model) == 3

    def test_multilayer_model(self):
        model = build_moderate_classifier((16,), 5, seed=0)
        x = Tensor(np.random.default_rng(3).uniform(0, 1, 16))
        cap = compute_shared_gradient(model, x, 4)
        assert idlg_label_recover(cap, model) == 4


class TestIterativeAttacks:
    def test_dlg_recovers_small_input(self):
        model = linear_sigmoid_net([6, 6], 4, seed=1)
        x = Tensor(np.random.default_rng(4).uniform(-1, 1, 6))
        cap = compute_shared_gradient(model, x, 2)
        cfg = AttackConfig(max_iterations=120, max_restarts=4, seed=0)
        res = dlg_attack(cap, model, cfg)
        assert res.success
        assert np.mean((res.reconstructed_input.data - x.data) ** 2) < 1e-4

    def test_truth_init_is_immediate_success(self):
        model = build_dlg_lenet(10, seed=0)
        x = Tensor(np.random.default_rng(5).uniform(0, 1, (3, 32, 32)))
        cap = compute_shared_gradient(model, x, 6)
        cfg = AttackConfig(max_iterations=3, max_restarts=1, seed=0)
        res = idlg_attack(cap, model, cfg, x_init=Tensor(x.data.copy()))
        assert res.success
        assert res.loss_trace[0] < 1e-12

    def test_idlg_fixes_recovered_label(self):
        model = linear_sigmoid_net([6, 6], 4, seed=2)
        x = Tensor(np.random.default_rng(6).uniform(-1, 1, 6))
        cap = compute_shared_gradient(model, x, 1)
        cfg = AttackConfig(max_iterations=120, max_restarts=4, seed=0)
        res = idlg_attack(cap, model, cfg)
        assert res.recovered_label == 1
        assert res.success

    def test_failure_is_reported_not_raised(self):
        model = build_dlg_lenet(10, seed=0)
        x = Tensor(np.random.default_rng(7).uniform(0, 1, (3, 32, 32)))
        cap = compute_shared_gradient(model, x, 0)
        cfg = AttackConfig(max_iterations=2, max_restarts=2, seed=0)
        res = dlg_attack(cap, model, cfg)
        assert not res.success
        assert res.restarts_used == 2
        assert np.isfinite(res.final_loss)

    def test_deterministic_given_seed(self):
        model = linear_sigmoid_net([5, 5], 3, seed=3)
        x = Tensor(np.random.default_rng(8).uniform(-1, 1, 5))
        cap = compute_shared_gradient(model, x, 0)
        cfg = AttackConfig(max_iterations=30, max_restarts=2, seed=11)
        a = dlg_attack(cap, model, cfg)
        b = dlg_attack(cap, model, cfg)
        assert np.array_equal(a.reconstructed_input.data, b.reconstructed_input.data)
        assert a.loss_trace == b.loss_trace


class TestOuterProductSolve:
    def test_recovers_vector(self):
        rng = np.random.default_rng(9)
        delta = rng.standard_normal(5)
        x = rng.standard_normal(8)
        out = solve_outer_product(delta, np.outer(delta, x))
        assert np.allclose(out, x, atol=1e-10)

    def test_zero_delta_rejected(self):
        with pytest.raises(Exception):
            solve_outer_product(np.zeros(4), np.zeros((4, 6)))


class TestRGAP:
    def test_exact_on_full_rank_linear_net(self):
        model = linear_sigmoid_net([8, 8, 8], 5, seed=4)
        x = Tensor(np.random.default_rng(10).standard_normal(8))
        cap = compute_shared_gradient(model, x, 3)
        recon, info = rgap_reconstruct(cap, model)
        rel = np.linalg.norm(recon.data - x.data) / np.linalg.norm(x.data)
        assert rel < 1e-6
        assert info["label"] == 3

    def test_rank_deficient_layer_is_flagged(self):
        # Convolutional bottleneck: 192 input values but far fewer layer
        # equations, so the stacked system is underdetermined.
        b = _Builder("deficient-net", 5, (3, 8, 8), 3)
        b.conv(1, 3, 4, 1).activation()
        b.flatten().linear(3)
        model = b.build()
        x = Tensor(np.random.default_rng(11).standard_normal((3, 8, 8)))
        cap = compute_shared_gradient(model, x, 1)
        recon, info = rgap_reconstruct(cap, model)
        assert info["approximate"]
        assert any(layer["deficient"] for layer in info["layers"])
        rel = np.linalg.norm(recon.data.ravel() - x.data.ravel()) / np.linalg.norm(
            x.data.ravel()
        )
        assert rel > 1e-2

    def test_scale_invariant_label_recovery(self):
        # The rule uses only gradient signs, so positive rescaling cannot
        # change the recovered label.
        model = build_simple_classifier((10,), 6, seed=8)
        x = Tensor(np.random.default_rng(12).standard_normal(10))
        cap = compute_shared_gradient(model, x, 4)
        cap.gradients = {k: 3.7 * v for k, v in cap.gradients.items()}
        assert idlg_label_recover(cap, model) == 4
