import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dfka import amalgam as A
from dfka import tensor as T
from dfka.corpus import LabelAssignment, assign_labels
from dfka.tensor import Rng


@pytest.fixture
def f64():
    with T.precision("float64"):
        yield


def softmax(x, tau=1.0):
    e = np.exp((x - x.max(axis=-1, keepdims=True)) / tau)
    return e / e.sum(axis=-1, keepdims=True)


class TestPartition:
    def test_examples(self):
        assert A.partition(6, 3) == [range(0, 2), range(2, 4), range(4, 6)]
        assert A.partition(8, 3) == [range(0, 3), range(3, 6), range(6, 8)]
        assert A.partition(4, 4) == [range(i, i + 1) for i in range(4)]

    def test_too_few_layers(self):
        with pytest.raises(ValueError):
            A.partition(2, 3)

    @given(st.integers(1, 30), st.integers(1, 30))
    def test_contiguous_cover(self, L, B):
        if B > L:
            return
        parts = A.partition(L, B)
        assert len(parts) == B and parts[0].start == 0 and parts[-1].stop == L
        assert all(a.stop == b.start for a, b in zip(parts, parts[1:]))
        sizes = [len(p) for p in parts]
        assert max(sizes) - min(sizes) <= 1 and sizes == sorted(sizes, reverse=True)

    def test_block_reps(self):
        reps = np.arange(2 * 4 * 1, dtype=float).reshape(2, 4, 1)
        out = A.block_reps(reps, 3)
        np.testing.assert_array_equal(out[0, :, 0], [0.5, 2.0, 3.0])


class TestEnrich:
    def net(self, variant="st", dims=(3, 5), d_a=4, blocks=2):
        return A.AmalgamNet(list(dims), blocks, d_a, Rng(0), A.AmalgamConfig(variant, n_heads=2))

    def test_zero_maps_give_biases(self, f64):
        net = self.net()
        f, g = net._maps(0, 1)
        for lin in (f, g):
            lin.weight.data[:] = 0
        f.bias.data[:] = [1, 2, 3, 4]
        g.bias.data[:] = [0.5, 0, 0, 0]
        z = net.enrich(0, 1, np.ones((2, 3)), np.array([3.0, -1.0]))
        np.testing.assert_array_equal(z.data, [[1.5, 2, 3, 4]] * 2)

    def test_zero_confidence(self, f64):
        net = self.net()
        f, g = net._maps(1, 0)
        h = np.random.default_rng(0).normal(size=(3, 5))
        z = net.enrich(1, 0, h, np.zeros(3))
        np.testing.assert_allclose(z.data, h @ f.weight.data + f.bias.data + g.bias.data)

    def test_hand_matrix_arithmetic(self, f64):
        rng = np.random.default_rng(1)
        net = self.net()
        f, g = net._maps(0, 0)
        for p in (f.weight, f.bias, g.weight, g.bias):
            p.data[:] = rng.normal(size=p.shape)
        h, c = rng.normal(size=(1, 3)), rng.normal()
        want = [sum(h[0, k] * f.weight.data[k, j] for k in range(3)) + f.bias.data[j]
                + c * g.weight.data[0, j] + g.bias.data[j] for j in range(4)]
        np.testing.assert_allclose(net.enrich(0, 0, h, [c]).data[0], want, rtol=1e-12)

    def test_mul_variant(self, f64):
        net = self.net("mul")
        f, _ = net._maps(0, 0)
        h = np.ones((2, 3))
        z = net.enrich(0, 0, h, np.array([2.0, 0.0]))
        np.testing.assert_allclose(z.data[0], 2 * (h[0] @ f.weight.data + f.bias.data))
        np.testing.assert_allclose(z.data[1], 0.0)

    def test_shared_blocks(self):
        net = A.AmalgamNet([3], 3, 4, Rng(0), A.AmalgamConfig(share_blocks=True, n_heads=2))
        assert net._maps(0, 0)[0] is net._maps(0, 2)[0]

    def test_unknown_variant(self):
        with pytest.raises(ValueError):
            A.AmalgamConfig(variant="sum")


class TestFuse:
    @pytest.fixture
    def net(self):
        return A.AmalgamNet([3, 3, 3], 1, 8, Rng(2), A.AmalgamConfig(n_heads=2))

    def zs(self, k, seed=0):
        rng = np.random.default_rng(seed)
        return [T.Tensor(rng.normal(size=(4, 8))) for _ in range(k)]

    def test_permutation_invariance(self, net, f64):
        zs = self.zs(3)
        base = A.st_amalg(net, zs).data
        for perm in ([2, 0, 1], [1, 0, 2], [2, 1, 0]):
            np.testing.assert_allclose(A.st_amalg(net, [zs[i] for i in perm]).data, base, atol=1e-6)

    def test_single_teacher_deterministic(self, net):
        z = self.zs(1)
        np.testing.assert_array_equal(net.fuse(z).data, net.fuse(z).data)

    def test_duplicate_inputs(self, net):
        z = self.zs(1)[0]
        np.testing.assert_allclose(net.fuse([z, z]).data, net.fuse([z, z][::-1]).data, atol=1e-6)

    def test_empty(self, net):
        with pytest.raises(ValueError):
            net.fuse([])

    def test_targets_and_project(self):
        net = A.AmalgamNet([3, 5], 2, 4, Rng(0), A.AmalgamConfig(n_heads=2))
        rng = np.random.default_rng(0)
        feats = [rng.normal(size=(6, 2, 3)), rng.normal(size=(6, 2, 5))]
        confs = [rng.normal(size=(6, 2)) for _ in range(2)]
        goals = net.targets(feats, confs)
        assert [g.shape for g in goals] == [(6, 4), (6, 4)]
        proj = net.project([T.Tensor(rng.normal(size=(6, 4)))] * 2)
        assert proj[0].shape == (6, 4)
        with pytest.raises(ValueError):
            net.targets(feats[:1], confs[:1])
        with pytest.raises(ValueError):
            net.project([proj[0]])

    def test_no_st_uses_confidence_weights(self, f64):
        net = A.AmalgamNet([2, 2], 1, 2, Rng(0), A.AmalgamConfig("noST", n_heads=1))
        rng = np.random.default_rng(3)
        feats = [rng.normal(size=(1, 1, 2)) for _ in range(2)]
        confs = [np.array([[30.0]]), np.array([[-30.0]])]
        z0 = net.enrich(0, 0, feats[0][:, 0], confs[0][:, 0])
        np.testing.assert_allclose(net.block_target(0, feats, confs).data, net.mix(z0).data, atol=1e-12)

    def test_gradients(self, f64):
        net = A.AmalgamNet([3, 2], 2, 4, Rng(1), A.AmalgamConfig(n_heads=2))
        rng = np.random.default_rng(4)
        feats = [rng.normal(size=(3, 2, 3)), rng.normal(size=(3, 2, 2))]
        confs = [rng.normal(size=(3, 2)) for _ in range(2)]
        s = [T.parameter(rng.normal(size=(3, 4))) for _ in range(2)]
        named = dict(net.named_parameters())
        pick = {"e_amalg": net.e_amalg, "f": named["f.0.1.weight"], "g": named["g.1.0.weight"],
                "fuser": named["fuser.attn.wq.weight"], "ffn": named["fuser.ff1.weight"],
                "proj": named["proj.1.weight"], "student": s[0]}
        loss = lambda: A.amal_loss([A.unit_rows(p) for p in net.project(s)],
                                   [A.unit_rows(z) for z in net.targets(feats, confs)])
        err = T.grad_check(loss, pick, max_entries=10, rng=np.random.default_rng(0))
        assert max(err.values()) < 1e-4


class TestLosses:
    def test_amal_zero(self):
        x = T.Tensor(np.ones((2, 3)))
        assert A.amal_loss([x], [x]).item() == 0.0

    def test_amal_three_four(self):
        assert A.amal_loss([T.Tensor(np.array([[3.0, 4.0]]))], [T.Tensor(np.zeros((1, 2)))]).item() == 25.0

    def test_amal_scalar_oracle(self, f64):
        rng = np.random.default_rng(5)
        p = [rng.normal(size=(4, 3)) for _ in range(2)]
        z = [rng.normal(size=(4, 3)) for _ in range(2)]
        want = sum(sum(sum((p[b][n, j] - z[b][n, j]) ** 2 for j in range(3)) for n in range(4)) / 4
                   for b in range(2))
        got = A.amal_loss([T.Tensor(a) for a in p], [T.Tensor(a) for a in z]).item()
        assert got == pytest.approx(want, rel=1e-12)

    def test_amal_block_mismatch(self):
        x = T.Tensor(np.ones((1, 2)))
        with pytest.raises(ValueError):
            A.amal_loss([x], [x, x])

    def test_unit_rows(self, f64):
        u = A.unit_rows(T.Tensor(np.array([[3.0, 4.0]])))
        np.testing.assert_allclose(u.data, [[0.6, 0.8]], rtol=1e-6)

    def test_out_loss_single_teacher_exact(self, f64):
        la = LabelAssignment(((0, 1, 2),), "disjoint", 3)
        lg = np.array([[0.1, 2.0, -1.0], [1.0, 1.0, 0.0]])
        loss = A.out_loss([lg], np.zeros((2, 1)), T.Tensor(lg), la, tau=0.75)
        assert abs(loss.item()) < 1e-12

    def test_out_loss_saturated_weights(self):
        la = assign_labels(4, 2)
        lg = [np.array([[2.0, 0.0]]), np.array([[0.0, 3.0]])]
        w = A.teacher_weights(np.array([[10.0, -10.0]]))
        mix = A.union_mixture(lg, w, la, 1.0)
        np.testing.assert_allclose(mix[0, :2], softmax(lg[0])[0], atol=1e-8)
        assert mix[0, 2:].sum() < 1e-8

    def test_out_loss_hand_mixture(self, f64):
        la = assign_labels(4, 2)
        lg = [np.array([[1.0, -1.0]]), np.array([[0.5, 2.0]])]
        tau = 0.5
        t = 0.5 * np.r_[softmax(lg[0][0], tau), 0, 0] + 0.5 * np.r_[0, 0, softmax(lg[1][0], tau)]
        s_logits = np.array([[0.3, -0.2, 1.0, 0.1]])
        q = softmax(s_logits[0], tau)
        want = sum(ti * np.log(ti / qi) for ti, qi in zip(t, q)) * tau ** 2
        got = A.out_loss(lg, np.zeros((1, 2)), T.Tensor(s_logits), la, tau).item()
        assert got == pytest.approx(want, rel=1e-10)

    def test_weights_must_sum_to_one(self):
        la = assign_labels(4, 2)
        with pytest.raises(ValueError):
            A.union_mixture([np.zeros((1, 2))] * 2, np.array([[0.7, 0.7]]), la, 1.0)

    def test_tau_positive(self):
        with pytest.raises(ValueError):
            A.out_loss([np.zeros((1, 2))] * 2, np.zeros((1, 2)), T.Tensor(np.zeros((1, 4))), assign_labels(4, 2), 0.0)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.sampled_from(["disjoint", "partial"]), st.floats(0.2, 3.0))
    def test_mixture_rows_normalised(self, seed, mode, tau):
        rng = np.random.default_rng(seed)
        la = assign_labels(5, 2, mode)
        lg = [rng.normal(size=(6, len(s))) * 4 for s in la.subsets]
        w = A.teacher_weights(rng.normal(size=(6, 2)) * 5)
        mix = A.union_mixture(lg, w, la, tau)
        np.testing.assert_allclose(mix.sum(axis=1), 1.0, atol=1e-6)
        assert np.all(mix > 0)  # every union label is covered by a teacher with positive weight

    @given(st.floats(0.0, 1.0), st.floats(0, 100), st.floats(0, 100), st.floats(0, 100))
    def test_total_loss_affine(self, lam, a, b, c):
        assert A.total_loss(a + c, b, lam) == pytest.approx(A.total_loss(a, b, lam) + lam * c, abs=1e-9)

    def test_total_loss_examples(self):
        assert A.total_loss(2.0, 4.0, 0.65) == pytest.approx(2.7)
        assert A.total_loss(2.0, None, 1.0) == 2.0
        assert A.total_loss(None, 4.0, 0.0) == 4.0
        with pytest.raises(ValueError):
            A.total_loss(1.0, 1.0, 1.5)

    def test_kl_nonnegative_zero_iff_match(self, f64):
        la = assign_labels(4, 2)
        rng = np.random.default_rng(6)
        lg = [rng.normal(size=(3, 2)) for _ in range(2)]
        confs = rng.normal(size=(3, 2))
        target = A.union_mixture(lg, A.teacher_weights(confs), la, 1.0)
        assert A.distill_loss(target, T.Tensor(np.log(target)), 1.0).item() == pytest.approx(0, abs=1e-12)
        assert A.out_loss(lg, confs, T.Tensor(rng.normal(size=(3, 4))), la, 1.0).item() > 0


class TestBaselines:
    def test_ensemble_concatenates(self):
        la = assign_labels(4, 2)
        out = A.ensemble_logits([np.array([[1.0, 2.0]]), np.array([[3.0, 4.0]])], la)
        np.testing.assert_array_equal(out, [[1, 2, 3, 4]])

    def test_ensemble_averages_shared(self):
        la = assign_labels(3, 2, "partial")
        out = A.ensemble_logits([np.array([[1.0, 2.0]]), np.array([[4.0, 5.0]])], la)
        np.testing.assert_array_equal(out, [[1, 3, 5]])

    def test_teacher_only_zero_pads(self):
        la = assign_labels(4, 2)
        p = A.teacher_only_probs(np.array([[0.0, 0.0]]), la, 1)
        np.testing.assert_allclose(p, [[0, 0, 0.5, 0.5]])
