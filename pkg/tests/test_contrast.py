import numpy as np
import pytest

from comen.contrast import (
    contrastive_loss_from_features,
    info_nce,
    protoccl_loss,
)
from comen.prototypes import PrototypeBank
from comen.tensor import Tensor, finite_difference_check


def contrastive_oracle(x, labels, tau, normalize):
    """Scalar double-loop evaluation of the prototype contrastive loss."""
    x = np.asarray(x, dtype=float)
    if normalize:
        x = x / np.linalg.norm(x, axis=1, keepdims=True)
    n = x.shape[0]
    total, queries = 0.0, 0
    for i in range(n):
        positives = [j for j in range(n) if j != i and labels[j] == labels[i]]
        negatives = [j for j in range(n) if labels[j] != labels[i]]
        if not positives:
            continue
        queries += 1
        term = 0.0
        for j in positives:
            a = np.exp(x[i] @ x[j] / tau)
            b = sum(np.exp(x[i] @ x[m] / tau) for m in negatives)
            term += -np.log(a / (a + b))
        total += term / len(positives)
    return total / queries if queries else 0.0


class TestInfoNce:
    def test_no_negatives_gives_zero(self):
        q = Tensor(np.array([1.0, 0.0]))
        loss = info_nce(q, Tensor(np.array([1.0, 0.0])), np.zeros((0, 2)), tau=0.5)
        assert loss.item() == 0.0

    def test_symmetric_single_negative_gives_log_two(self):
        q = Tensor(np.array([1.0, 0.0, 0.0]))
        pos = Tensor(np.array([0.0, 1.0, 0.0]))
        neg = Tensor(np.array([[0.0, 0.0, 1.0]]))  # q.pos == q.neg == 0
        loss = info_nce(q, pos, neg, tau=0.5)
        assert abs(loss.item() - np.log(2.0)) < 1e-12

    def test_unit_positive_orthogonal_negative(self):
        # sims 1 and 0 at tau=0.5: -log(e^2 / (e^2 + 1))
        q = Tensor(np.array([1.0, 0.0]))
        pos = Tensor(np.array([1.0, 0.0]))
        neg = Tensor(np.array([[0.0, 1.0]]))
        expected = -np.log(np.exp(2.0) / (np.exp(2.0) + 1.0))
        assert info_nce(q, pos, neg, 0.5).item() == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(0.126928, abs=1e-6)

    def test_dominant_positive_limit(self):
        q = Tensor(np.array([1.0, 0.0]))
        pos = Tensor(np.array([1.0, 0.0]))
        neg = Tensor(np.array([[0.0, 1.0]]))
        assert info_nce(q, pos, neg, tau=0.01).item() < 1e-12

    def test_tau_must_be_positive(self):
        with pytest.raises(ValueError):
            info_nce(Tensor([1.0]), Tensor([1.0]), np.zeros((0, 1)), tau=0.0)

    def test_gradient_check(self):
        rng = np.random.default_rng(0)
        pos = Tensor(rng.normal(size=4))
        negs = Tensor(rng.normal(size=(3, 4)))

        def fn(t):
            return info_nce(t, pos, negs, tau=0.5)

        assert finite_difference_check(fn, rng.normal(size=4), 1e-5) < 1e-5


class TestContrastiveLoss:
    def test_all_orthogonal_prototypes(self):
        """M=2, K=2 mutually orthogonal unit vectors: every query sees
        positive and negative similarities of zero, so the per-query loss is
        -log(1 / (1 + 2)) = log 3 (verified against the brute-force oracle)."""
        x = np.eye(4)
        labels = np.array([0, 1, 0, 1])  # domains {0,1} x classes {0,1}
        loss = contrastive_loss_from_features(Tensor(x), labels, tau=0.5, normalize=True)
        oracle = contrastive_oracle(x, labels, 0.5, True)
        assert loss.item() == pytest.approx(oracle, abs=1e-12)
        assert loss.item() == pytest.approx(np.log(3.0), abs=1e-12)

    def test_identical_positives_orthogonal_negatives(self):
        # same-class prototypes identical, cross-class orthogonal:
        # per-query loss -log(e^2 / (e^2 + 2)) at tau = 0.5
        x = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]])
        labels = np.array([0, 1, 0, 1])
        loss = contrastive_loss_from_features(Tensor(x), labels, tau=0.5, normalize=True)
        expected = -np.log(np.exp(2.0) / (np.exp(2.0) + 2.0))
        oracle = contrastive_oracle(x, labels, 0.5, True)
        assert loss.item() == pytest.approx(oracle, abs=1e-12)
        assert loss.item() == pytest.approx(expected, abs=1e-12)

    @pytest.mark.parametrize("normalize", [True, False])
    @pytest.mark.parametrize("seed", [1, 2, 3, 4])
    def test_matches_brute_force_oracle(self, seed, normalize):
        rng = np.random.default_rng(seed)
        m, k, d = rng.integers(2, 5), rng.integers(2, 7), rng.integers(3, 17)
        n = int(m * k)
        x = rng.normal(size=(n, int(d)))
        labels = np.tile(np.arange(k), m)
        loss = contrastive_loss_from_features(Tensor(x), labels, tau=0.5,
                                              normalize=normalize)
        oracle = contrastive_oracle(x, labels, 0.5, normalize)
        assert abs(loss.item() - oracle) < 1e-12

    def test_normalization_changes_value(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(6, 4)) * 2.0
        labels = np.array([0, 1, 2, 0, 1, 2])
        on = contrastive_loss_from_features(Tensor(x), labels, 0.5, True).item()
        off = contrastive_loss_from_features(Tensor(x), labels, 0.5, False).item()
        assert on == pytest.approx(contrastive_oracle(x, labels, 0.5, True), abs=1e-12)
        assert off == pytest.approx(contrastive_oracle(x, labels, 0.5, False), abs=1e-12)
        assert abs(on - off) > 1e-6

    def test_single_domain_class_skipped(self):
        x = np.array([[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]])
        labels = np.array([0, 0, 1])  # class 1 has no positives
        loss = contrastive_loss_from_features(Tensor(x), labels, 0.5, True)
        oracle = contrastive_oracle(x, labels, 0.5, True)
        assert loss.item() == pytest.approx(oracle, abs=1e-12)

    def test_all_single_domain_returns_zero(self):
        x = np.eye(3)
        labels = np.array([0, 1, 2])
        loss = contrastive_loss_from_features(Tensor(x), labels, 0.5, True)
        assert loss.item() == 0.0

    def test_loss_nonnegative_and_decreasing_in_positive_similarity(self):
        labels = np.array([0, 0, 1, 1])
        rng = np.random.default_rng(6)
        for _ in range(20):
            x = rng.normal(size=(4, 3))
            assert contrastive_loss_from_features(Tensor(x), labels, 0.5, True).item() >= 0.0
        # pulling a positive pair together lowers the loss, negatives fixed
        base = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]])
        closer = np.array([[1.0, 0.2], [0.2, 1.0], [-1.0, 0.0], [0.0, -1.0]])
        l_base = contrastive_loss_from_features(Tensor(base), labels, 0.5, True).item()
        l_closer = contrastive_loss_from_features(Tensor(closer), labels, 0.5, True).item()
        assert l_closer < l_base

    def test_gradient_check(self):
        rng = np.random.default_rng(7)
        n, d = 6, 4
        labels = np.array([0, 1, 2, 0, 1, 2])

        def fn(t):
            return contrastive_loss_from_features(t.reshape(n, d), labels, 0.5, True)

        assert finite_difference_check(fn, rng.normal(size=n * d), 1e-5) < 1e-4

    def test_gradient_check_unnormalized(self):
        rng = np.random.default_rng(8)
        n, d = 4, 3
        labels = np.array([0, 1, 0, 1])

        def fn(t):
            return contrastive_loss_from_features(t.reshape(n, d), labels, 0.5, False)

        assert finite_difference_check(fn, rng.normal(size=n * d) * 0.5, 1e-5) < 1e-4


class TestBankLoss:
    def test_bank_wrapper_matches_feature_version(self):
        rng = np.random.default_rng(9)
        bank = PrototypeBank(3, 4, 5, 0.7)
        bank.protos = rng.normal(size=(3, 4, 5))
        bank.initialized[:] = True
        bank.initialized[2, 3] = False
        rows, classes = [], []
        for m in range(3):
            for k in range(4):
                if bank.initialized[m, k]:
                    rows.append(bank.protos[m, k])
                    classes.append(k)
        expected = contrastive_loss_from_features(
            Tensor(np.stack(rows)), np.array(classes), 0.5, True
        ).item()
        assert protoccl_loss(bank, 0.5, True).item() == pytest.approx(expected, abs=1e-15)

    def test_empty_bank_returns_zero(self):
        bank = PrototypeBank(2, 2, 3, 0.7)
        assert protoccl_loss(bank).item() == 0.0
