"""Activation map, classification loss and pseudo-label tests."""

import math

import numpy as np
import pytest
import torch

from toco.cam import (
    BACKGROUND,
    IGNORE,
    ActivationMap,
    ClassifierHead,
    cls_loss,
    compute_cam,
    gmp_classify,
    load_label_png,
    save_label_png,
    token_pseudo_labels,
    seg_pseudo_labels,
)
from toco.vit import TokenGrid


def head_with(weight):
    w = torch.as_tensor(weight, dtype=torch.float64)
    head = ClassifierHead(w.shape[1], w.shape[0]).double()
    with torch.no_grad():
        head.fc.weight.copy_(w)
    return head


class TestGmpClassify:
    def test_single_token(self):
        head = head_with([[1.0, 2.0], [0.5, -1.0]])
        token = torch.tensor([[3.0, 4.0]], dtype=torch.float64)
        logits = gmp_classify(TokenGrid(token, (1, 1)), head)
        assert torch.allclose(logits, torch.tensor([11.0, -2.5], dtype=torch.float64))

    def test_identical_tokens_match_single(self):
        head = head_with([[1.0, -1.0, 0.5]])
        one = torch.tensor([[0.2, 0.4, -0.3]], dtype=torch.float64)
        many = one.repeat(5, 1)
        assert torch.allclose(
            gmp_classify(TokenGrid(one, (1, 1)), head),
            gmp_classify(TokenGrid(many, (5, 1)), head),
        )

    def test_matches_max_then_matmul_oracle(self):
        torch.manual_seed(0)
        tokens = torch.rand(4, 3, dtype=torch.float64)
        head = head_with(torch.randn(2, 3, dtype=torch.float64))
        logits = gmp_classify(tokens, head)
        pooled = tokens.numpy().max(axis=0)
        oracle = head.fc.weight.detach().numpy() @ pooled
        np.testing.assert_allclose(logits.detach().numpy(), oracle, atol=1e-12)

    def test_empty_grid_rejected(self):
        head = head_with([[1.0]])
        with pytest.raises(ValueError):
            gmp_classify(torch.zeros(0, 1, dtype=torch.float64), head)


class TestClsLoss:
    def test_zero_logits_give_ln2(self):
        for labels in ([1.0, 0.0], [0.0, 0.0], [1.0, 1.0]):
            loss = cls_loss(torch.zeros(2), torch.tensor(labels))
            assert math.isclose(float(loss), math.log(2.0), rel_tol=1e-6)

    def test_saturated_positive_goes_to_zero(self):
        loss = cls_loss(torch.tensor([40.0]), torch.tensor([1.0]))
        assert float(loss) < 1e-12

    def test_matches_sigmoid_bce_oracle(self):
        logits = torch.tensor([1.0, -2.0], dtype=torch.float64)
        labels = torch.tensor([1.0, 0.0], dtype=torch.float64)
        def sig(x):
            return 1.0 / (1.0 + math.exp(-x))
        oracle = -(math.log(sig(1.0)) + math.log(1.0 - sig(-2.0))) / 2.0
        assert math.isclose(float(cls_loss(logits, labels)), oracle, rel_tol=1e-12)


class TestComputeCam:
    def test_single_token_self_normalizes(self):
        head = head_with([[5.0]])
        grid = TokenGrid(torch.tensor([[1.0]], dtype=torch.float64), (1, 1))
        amap = compute_cam(grid, head, torch.tensor([True]))
        assert float(amap.values[0, 0, 0]) == 1.0

    def test_nonpositive_response_yields_zero_map(self):
        head = head_with([[-1.0, -2.0]])
        grid = TokenGrid(torch.rand(4, 2, dtype=torch.float64), (2, 2))
        amap = compute_cam(grid, head, torch.tensor([True]))
        assert torch.equal(amap.values, torch.zeros_like(amap.values))

    def test_absent_class_zeroed(self):
        head = head_with(torch.rand(2, 3, dtype=torch.float64) + 0.1)
        grid = TokenGrid(torch.rand(4, 3, dtype=torch.float64), (2, 2))
        amap = compute_cam(grid, head, torch.tensor([True, False]))
        assert torch.equal(amap.values[1], torch.zeros(2, 2, dtype=torch.float64))
        assert amap.values[0].max() > 0

    def test_matches_brute_force_oracle(self):
        torch.manual_seed(1)
        grid = TokenGrid(torch.randn(4, 5, dtype=torch.float64), (2, 2))
        head = head_with(torch.randn(2, 5, dtype=torch.float64))
        amap = compute_cam(grid, head, torch.tensor([True, True]))
        w = head.fc.weight.detach().numpy()
        toks = grid.tokens.numpy()
        oracle = np.zeros((2, 2, 2))
        for c in range(2):
            raw = np.array([sum(w[c, i] * toks[t, i] for i in range(5)) for t in range(4)])
            relu = np.maximum(raw, 0.0)
            peak = relu.max()
            normed = relu / peak if peak > 0 else relu
            oracle[c] = normed.reshape(2, 2)
        np.testing.assert_allclose(amap.values.detach().numpy(), oracle, atol=1e-12)

    def test_batched_matches_per_image(self):
        torch.manual_seed(2)
        tokens = torch.randn(3, 4, 5)
        head = ClassifierHead(5, 2)
        present = torch.tensor([[True, False], [True, True], [False, True]])
        batched = compute_cam(TokenGrid(tokens, (2, 2)), head, present)
        for i in range(3):
            single = compute_cam(TokenGrid(tokens[i], (2, 2)), head, present[i])
            assert torch.allclose(batched.values[i], single.values, atol=1e-6)

    def test_scale_invariance_under_positive_row_scaling(self):
        torch.manual_seed(3)
        grid = TokenGrid(torch.randn(9, 4, dtype=torch.float64), (3, 3))
        w = torch.randn(2, 4, dtype=torch.float64)
        present = torch.tensor([True, True])
        base = compute_cam(grid, head_with(w), present)
        for k in (0.5, 3.0, 117.0):
            scaled = w.clone()
            scaled[0] *= k
            out = compute_cam(grid, head_with(scaled), present)
            assert torch.allclose(out.values[0], base.values[0], atol=1e-12)

    def test_range_and_peak_property(self):
        torch.manual_seed(4)
        for _ in range(25):
            grid = TokenGrid(torch.randn(8, 6), (2, 4))
            head = ClassifierHead(6, 3)
            amap = compute_cam(grid, head, torch.ones(3, dtype=torch.bool))
            v = amap.values
            assert (v >= 0).all() and (v <= 1).all()
            for c in range(3):
                if (v[c] > 0).any():
                    assert torch.isclose(v[c].max(), torch.tensor(1.0))


class TestTokenPseudoLabels:
    def _amap(self, scores, present=None):
        s = torch.as_tensor(scores, dtype=torch.float64)
        if s.dim() == 2:
            s = s.unsqueeze(0)
        present = torch.ones(s.shape[0], dtype=torch.bool) if present is None else present
        return ActivationMap(s, present)

    def test_high_score_is_foreground(self):
        labels = token_pseudo_labels(self._amap([[0.8]]), 0.25, 0.7)
        assert int(labels[0, 0]) == 1

    def test_zero_score_is_background(self):
        labels = token_pseudo_labels(self._amap([[0.0]]), 0.25, 0.7)
        assert int(labels[0, 0]) == BACKGROUND

    def test_boundary_values_are_uncertain(self):
        scores = [[0.1, 0.25, 0.5, 0.7, 0.9]]
        labels = token_pseudo_labels(self._amap(scores), 0.25, 0.7)
        expected = [BACKGROUND, IGNORE, IGNORE, IGNORE, 1]
        assert labels[0].tolist() == expected

    def test_argmax_tie_takes_lowest_class(self):
        scores = torch.full((3, 1, 1), 0.9)
        labels = token_pseudo_labels(ActivationMap(scores, torch.ones(3, dtype=torch.bool)), 0.25, 0.7)
        assert int(labels[0, 0]) == 1

    def test_absent_class_never_wins(self):
        scores = torch.tensor([[[0.9]], [[0.95]]])
        present = torch.tensor([True, False])
        labels = token_pseudo_labels(ActivationMap(scores, present), 0.25, 0.7)
        assert int(labels[0, 0]) == 1

    def test_invalid_thresholds_rejected(self):
        amap = self._amap([[0.5]])
        with pytest.raises(ValueError):
            token_pseudo_labels(amap, 0.7, 0.25)
        with pytest.raises(ValueError):
            token_pseudo_labels(amap, 0.0, 0.7)

    def test_threshold_monotonicity(self):
        # raising beta_high never creates FG; lowering beta_low never creates BG
        rng = np.random.default_rng(0)
        for _ in range(50):
            scores = rng.uniform(0, 1, size=(2, 4, 4))
            amap = self._amap(scores, torch.tensor([True, True]))
            lo = token_pseudo_labels(amap, 0.25, 0.6)
            hi = token_pseudo_labels(amap, 0.25, 0.8)
            gained_fg = ((hi > 0) & (hi != IGNORE)) & ~((lo > 0) & (lo != IGNORE))
            assert not gained_fg.any()
            wide = token_pseudo_labels(amap, 0.1, 0.6)
            lost_bg_becomes = (wide == BACKGROUND) & (lo != BACKGROUND)
            assert not lost_bg_becomes.any()


class TestSegPseudoLabels:
    def test_all_zero_cam_is_background(self):
        amap = ActivationMap(torch.zeros(1, 2, 2), torch.tensor([True]))
        labels = seg_pseudo_labels(amap, 0.25, 0.7, out_size=(4, 4))
        assert (labels == BACKGROUND).all()

    def test_upsample_replicates_blocks(self):
        scores = torch.tensor([[[0.9, 0.0], [0.5, 0.8]]])
        amap = ActivationMap(scores, torch.tensor([True]))
        labels = seg_pseudo_labels(amap, 0.25, 0.7, out_size=(4, 4))
        token = token_pseudo_labels(amap, 0.25, 0.7)
        assert torch.equal(labels, token.repeat_interleave(2, 0).repeat_interleave(2, 1))

    def test_matches_label_then_replicate_oracle(self):
        torch.manual_seed(5)
        scores = torch.rand(3, 4, 4)
        present = torch.tensor([True, False, True])
        amap = ActivationMap(scores, present)
        labels = seg_pseudo_labels(amap, 0.25, 0.7, out_size=(8, 8))
        token = token_pseudo_labels(amap, 0.25, 0.7).numpy()
        oracle = np.kron(token, np.ones((2, 2), dtype=np.int64))
        np.testing.assert_array_equal(labels.numpy(), oracle)


class TestLabelPng:
    def test_round_trip(self, tmp_path):
        labels = np.array([[0, 1, 2], [3, IGNORE, 0]], dtype=np.int64)
        path = tmp_path / "mask.png"
        save_label_png(torch.from_numpy(labels), path, num_classes=3)
        back = load_label_png(path, num_classes=3)
        np.testing.assert_array_equal(back, labels)

    def test_unknown_palette_index_rejected(self, tmp_path):
        labels = np.array([[0, 7]], dtype=np.int64)
        path = tmp_path / "bad.png"
        save_label_png(labels, path, num_classes=3)
        with pytest.raises(ValueError, match=r"unknown palette index \[7\]"):
            load_label_png(path, num_classes=3)

    def test_missing_file_names_path(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="nope.png"):
            load_label_png(tmp_path / "nope.png", num_classes=3)
