"""
Unit tests for losses.py: analytic extremes and the weighted total.
"""
import numpy as np
import pytest
from pydantic import ValidationError

from losses import (
    LossError, LossWeights, NonFiniteLossError, classification_losses, contrastive_loss, joint_objective,
    recon_loss, slot_similarity, total_loss
)
from memory import MemoryBank
from tensor import Graph, Tensor, cross_entropy, randn


def bank_with_values(values):
    values = np.asarray(values, dtype=np.float64)
    bank = MemoryBank(level=1, dim=values.shape[1], heads=1, slots=values.shape[0])
    bank.values.assign(values)
    return bank


class TestReconstruction:

    def test_identical_features_give_zero(self):
        f = randn([6, 4], seed=0)
        assert recon_loss([f], [f]).item() == pytest.approx(0.0, abs=1e-6)

    def test_opposite_features_give_two(self):
        f = randn([6, 4], seed=0)
        assert recon_loss([Tensor(-f.data)], [f]).item() == pytest.approx(2.0, abs=1e-6)

    def test_mean_over_levels(self):
        f = randn([6, 4], seed=0)
        loss = recon_loss([f, Tensor(-f.data)], [f, f])
        assert loss.item() == pytest.approx(1.0, abs=1e-6)

    def test_target_is_detached(self):
        recalled = randn([3, 4], seed=1, requires_grad=True)
        target = randn([3, 4], seed=2, requires_grad=True)
        with Graph() as graph:
            loss = recon_loss([recalled], [target])
        graph.backward(loss)
        assert recalled.grad is not None
        assert target.grad is None

    def test_level_count_mismatch(self):
        f = randn([2, 2], seed=0)
        with pytest.raises(LossError, match="levels"):
            recon_loss([f, f], [f])

    def test_shape_mismatch(self):
        with pytest.raises(LossError, match="Level 1"):
            recon_loss([randn([2, 3], seed=0)], [randn([3, 3], seed=0)])


class TestContrastive:
    """Normalised off-diagonal slot similarity."""

    def test_identical_slots(self):
        assert slot_similarity(bank_with_values(np.ones((4, 3)))).item() == pytest.approx(1.0, abs=1e-6)

    def test_orthogonal_slots(self):
        assert slot_similarity(bank_with_values(np.eye(4))).item() == pytest.approx(0.0, abs=1e-6)

    def test_antipodal_slots(self):
        bank = bank_with_values([[1.0, 2.0], [-1.0, -2.0]])
        assert slot_similarity(bank).item() == pytest.approx(-1.0, abs=1e-6)

    def test_mean_over_banks(self):
        banks = [bank_with_values(np.ones((4, 3))), bank_with_values(np.eye(4))]
        assert contrastive_loss(banks).item() == pytest.approx(0.5, abs=1e-6)

    def test_no_banks(self):
        with pytest.raises(LossError):
            contrastive_loss([])


class TestClassification:

    def test_uniform_logits_give_log_classes(self):
        logits = Tensor(np.zeros((3, 7)))
        for loss in classification_losses(logits, logits, logits, np.array([0, 3, 6])):
            assert loss.item() == pytest.approx(np.log(7), abs=1e-6)

    def test_batched_matches_single_calls(self):
        logits = randn([4, 5], seed=3)
        labels = np.array([0, 2, 4, 1])
        for loss in classification_losses(logits, logits, logits, labels):
            singles = [cross_entropy(Tensor(logits.data[i]), int(labels[i])).item() for i in range(4)]
            assert loss.item() == pytest.approx(np.mean(singles), abs=1e-6)


class TestTotal:

    @pytest.fixture
    def parts(self):
        return {name: Tensor(value) for name, value in
                zip(('recon', 'cont', 'cls_v', 'cls_a', 'cls_va'), (0.25, -0.1, 1.5, 0.75, 2.0))}

    def test_unweighted_total_is_sum(self, parts):
        assert total_loss(parts).item() == pytest.approx(0.25 - 0.1 + 1.5 + 0.75 + 2.0, abs=1e-6)

    def test_weighted_total(self, parts):
        weights = LossWeights(recon=2.0, cont=0.0)
        assert total_loss(parts, weights).item() == pytest.approx(0.5 + 1.5 + 0.75 + 2.0, abs=1e-6)

    def test_missing_part(self, parts):
        del parts['cls_a']
        with pytest.raises(LossError, match="cls_a"):
            total_loss(parts)

    def test_weights_reject_unknown_fields(self):
        with pytest.raises(ValidationError):
            LossWeights(recon_weight=1.0)


class TestJointObjective:

    @pytest.fixture
    def logits(self):
        return [randn([2, 5], seed=s) for s in range(3)]

    def test_report_matches_parts(self, logits):
        bank = MemoryBank(level=1, dim=4, heads=2, slots=3)
        f = randn([2, 6, 4], seed=9)
        total, report = joint_objective([f], [f], [bank], *logits, np.array([1, 4]))
        parts = report.recon + report.cont + report.cls_v + report.cls_a + report.cls_va
        assert report.total == pytest.approx(parts, abs=1e-6)
        assert total.item() == pytest.approx(report.total)
        assert report.recon == pytest.approx(0.0, abs=1e-6)

    def test_baseline_has_no_memory_terms(self, logits):
        _, report = joint_objective([], [], [], *logits, np.array([0, 1]))
        assert report.recon == 0.0 and report.cont == 0.0

    def test_non_finite_raises(self, logits):
        bad = Tensor(np.full((2, 5), np.nan))
        with pytest.raises(NonFiniteLossError, match="Non-finite"):
            joint_objective([], [], [], bad, logits[1], logits[2], np.array([0, 1]))

    def test_report_row(self, logits):
        _, report = joint_objective([], [], [], *logits, np.array([0, 1]))
        row = report.as_row(7)
        assert list(row) == ['step', 'recon', 'cont', 'cls_v', 'cls_a', 'cls_va', 'total']
        assert row['step'] == 7

