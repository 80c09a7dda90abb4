import numpy as np
import pytest

from comen.prototypes import (
    PrototypeBank,
    ema_update,
    local_prototypes,
    loss_features,
)
from comen.tensor import Tensor, backward, finite_difference_check


class TestLocalPrototypes:
    def test_singleton_cell(self):
        emb = Tensor(np.array([[1.0, 2.0, 3.0]]))
        p = np.zeros((1, 2))
        p[0, 1] = 1.0
        local = local_prototypes(emb, np.array([0]), Tensor(p))
        assert local.present(1, 0)
        assert np.allclose(local.values[1][0].data, [1.0, 2.0, 3.0])
        assert not local.present(0, 0)

    def test_two_samples_give_midpoint(self):
        emb = Tensor(np.array([[0.0, 0.0], [2.0, 4.0]]))
        p = np.ones((2, 1))
        local = local_prototypes(emb, np.array([1, 1]), Tensor(p))
        assert np.allclose(local.values[0][1].data, [1.0, 2.0])

    def test_brute_force_oracle(self):
        """Direct double-loop oracle, < 1e-12."""
        rng = np.random.default_rng(0)
        b, d, m, k = 16, 5, 3, 4
        emb = rng.normal(size=(b, d))
        labels = rng.integers(0, k, size=b)
        p = rng.dirichlet(np.ones(m), size=b)
        local = local_prototypes(Tensor(emb), labels, Tensor(p))
        for dom in range(m):
            for cls in range(int(labels.max()) + 1):
                num = np.zeros(d)
                den = 0.0
                for i in range(b):
                    if labels[i] == cls:
                        num += p[i, dom] * emb[i]
                        den += p[i, dom]
                if den < 1e-8:
                    assert not local.present(dom, cls)
                    continue
                assert local.present(dom, cls)
                assert np.abs(local.values[dom][cls].data - num / den).max() < 1e-12
                assert abs(local.mass[dom, cls] - den) < 1e-12

    def test_gradient_flows_to_embeddings(self):
        rng = np.random.default_rng(1)
        b, d = 6, 4
        labels = np.array([0, 0, 1, 1, 0, 1])
        p = rng.dirichlet(np.ones(2), size=b)
        probe = rng.normal(size=d)

        def fn(t):
            local = local_prototypes(t.reshape(b, d), labels, Tensor(p))
            total = None
            for m in range(2):
                for k in range(2):
                    if local.present(m, k):
                        term = (local.values[m][k] * Tensor(probe)).sum()
                        total = term if total is None else total + term
            return total

        assert finite_difference_check(fn, rng.normal(size=(b * d,)), 1e-5) < 1e-6


class TestEmaUpdate:
    def _bank_with(self, values, rho=0.7):
        m, k, d = values.shape
        bank = PrototypeBank(m, k, d, rho)
        bank.protos = values.astype(float).copy()
        bank.initialized[:] = True
        return bank

    def _local(self, bank, cell_values):
        values = [[None] * bank.classes for _ in range(bank.domains)]
        mass = np.zeros((bank.domains, bank.classes))
        for (m, k), v in cell_values.items():
            values[m][k] = Tensor(np.asarray(v, dtype=float))
            mass[m, k] = 1.0
        from comen.prototypes import LocalPrototypes
        return LocalPrototypes(values=values, mass=mass)

    def test_paper_decay_arithmetic(self):
        # previous (1,0), local (0,1), decay 0.7 -> (0.7, 0.3); the second
        # component is the IEEE value of (1 - 0.7) * 1, one ulp from 0.3
        bank = self._bank_with(np.array([[[1.0, 0.0]]]))
        ema_update(bank, self._local(bank, {(0, 0): [0.0, 1.0]}))
        assert bank.protos[0, 0, 0] == 0.7 * 1.0 + (1.0 - 0.7) * 0.0
        assert bank.protos[0, 0, 1] == 0.7 * 0.0 + (1.0 - 0.7) * 1.0
        assert abs(bank.protos[0, 0, 0] - 0.7) < 1e-15
        assert abs(bank.protos[0, 0, 1] - 0.3) < 1e-15

    def test_fixpoint(self):
        bank = self._bank_with(np.array([[[2.0, -1.0]]]))
        ema_update(bank, self._local(bank, {(0, 0): [2.0, -1.0]}))
        assert np.array_equal(bank.protos[0, 0], [2.0, -1.0])

    def test_geometric_contraction(self):
        """||c_t - target|| = rho^t ||c_0 - target|| to 1e-10 over 20 steps."""
        rng = np.random.default_rng(2)
        start = rng.normal(size=(1, 1, 6))
        target = rng.normal(size=6)
        bank = self._bank_with(start)
        gap0 = np.linalg.norm(start[0, 0] - target)
        for t in range(1, 21):
            ema_update(bank, self._local(bank, {(0, 0): target}))
            gap = np.linalg.norm(bank.protos[0, 0] - target)
            assert abs(gap - 0.7 ** t * gap0) < 1e-10

    def test_absent_cells_unchanged_uninitialized_adopt(self):
        bank = PrototypeBank(2, 2, 3, 0.7)
        bank.protos[0, 0] = [1.0, 1.0, 1.0]
        bank.initialized[0, 0] = True
        local = self._local(bank, {(1, 1): [5.0, 5.0, 5.0]})
        ema_update(bank, local)
        assert np.array_equal(bank.protos[0, 0], [1.0, 1.0, 1.0])  # absent: unchanged
        assert np.array_equal(bank.protos[1, 1], [5.0, 5.0, 5.0])  # adopt
        assert bank.initialized[1, 1]

    def test_invalid_rho(self):
        with pytest.raises(ValueError):
            PrototypeBank(1, 1, 2, rho=1.0)


class TestBatchOrderInvariance:
    def test_bank_state_invariant_to_within_batch_order(self):
        rng = np.random.default_rng(3)
        b, d = 12, 5
        emb = rng.normal(size=(b, d))
        labels = rng.integers(0, 3, size=b)
        p = rng.dirichlet(np.ones(2), size=b)

        def run(order):
            bank = PrototypeBank(2, 3, d, 0.7)
            local = local_prototypes(Tensor(emb[order]), labels[order], Tensor(p[order]))
            ema_update(bank, local)
            return bank.protos.copy()

        perm = rng.permutation(b)
        assert np.abs(run(np.arange(b)) - run(perm)).max() < 1e-10


class TestLossFeatures:
    def test_gradient_reaches_embeddings_only_through_local_term(self):
        rng = np.random.default_rng(4)
        b, d = 8, 4
        labels = np.array([0, 1, 0, 1, 0, 1, 0, 1])
        p = np.ones((b, 1))
        bank = PrototypeBank(1, 2, d, 0.7)
        bank.protos = rng.normal(size=(1, 2, d))
        bank.initialized[:] = True
        probe = rng.normal(size=(2, d))

        def fn(t):
            local = local_prototypes(t.reshape(b, d), labels, Tensor(p))
            feats, classes, _ = loss_features(bank, local)
            return (feats * Tensor(probe)).sum()

        emb0 = rng.normal(size=b * d)
        # finite differences see exactly the (1 - rho)-scaled local path
        assert finite_difference_check(fn, emb0, 1e-5) < 1e-6

        # analytically: grad wrt one embedding is (1-rho) * p/mass * probe
        t = Tensor(emb0.reshape(b, d), requires_grad=True)
        local = local_prototypes(t, labels, Tensor(p))
        feats, _, _ = loss_features(bank, local)
        backward((feats * Tensor(probe)).sum())
        mass0 = 4.0  # four samples of class 0, unit weights
        expected_row0 = 0.3 / mass0 * probe[0]
        assert np.allclose(t.grad[0], expected_row0, atol=1e-12)

    def test_history_shift_leaves_gradient_unchanged(self):
        rng = np.random.default_rng(5)
        b, d = 6, 3
        labels = np.array([0, 0, 1, 1, 0, 1])
        p = np.ones((b, 1))
        probe = rng.normal(size=(2, d))
        emb = rng.normal(size=(b, d))

        def grad_with_bank(protos):
            bank = PrototypeBank(1, 2, d, 0.7)
            bank.protos = protos
            bank.initialized[:] = True
            t = Tensor(emb, requires_grad=True)
            local = local_prototypes(t, labels, Tensor(p))
            feats, _, _ = loss_features(bank, local)
            backward((feats * Tensor(probe)).sum())
            return t.grad

        g1 = grad_with_bank(rng.normal(size=(1, 2, d)))
        g2 = grad_with_bank(rng.normal(size=(1, 2, d)))
        assert np.array_equal(g1, g2)

    def test_feature_values_match_post_update_bank(self):
        rng = np.random.default_rng(6)
        b, d = 6, 3
        labels = rng.integers(0, 2, size=b)
        labels[:2] = [0, 1]
        p = np.ones((b, 1))
        emb = rng.normal(size=(b, d))
        bank = PrototypeBank(1, 2, d, 0.7)
        bank.protos = rng.normal(size=(1, 2, d))
        bank.initialized[:] = True
        local = local_prototypes(Tensor(emb), labels, Tensor(p))
        feats, classes, domains = loss_features(bank, local)
        ema_update(bank, local)
        for row, (m, k) in enumerate(zip(domains, classes)):
            assert np.abs(feats.data[row] - bank.protos[m, k]).max() < 1e-12

    def test_uninitialized_absent_cells_are_skipped(self):
        bank = PrototypeBank(2, 2, 3, 0.7)
        feats, classes, domains = loss_features(bank, None)
        assert feats is None and classes.size == 0
        bank.protos[0, 1] = [1.0, 2.0, 3.0]
        bank.initialized[0, 1] = True
        feats, classes, domains = loss_features(bank, None)
        assert feats.data.shape == (1, 3)
        assert classes.tolist() == [1] and domains.tolist() == [0]
