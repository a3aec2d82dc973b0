import dataclasses

import numpy as np
import pytest

from dfka import tensor as T
from dfka.corpus import assign_labels
from dfka.generator import (SteerConfig, _truncate, build_transfer_set, load_transfer_set,
                            sample_sequence, save_transfer_set, steered_batch, steered_next_distribution,
                            steering_success)
from dfka.models import EOS, CausalLM, Classifier, ModelSpec
from dfka.tensor import Rng

V = 8


class StubLM:
    """Fixed next-token distribution regardless of the prefix."""

    def __init__(self, probs):
        self.probs = np.asarray(probs, dtype=float)
        self.spec = ModelSpec(vocab_size=len(probs), max_len=64, n_layers=1, d_model=2, n_heads=1,
                              kind="causal_lm")

    def forward(self, tokens):
        B, N = tokens.shape
        return T.Tensor(np.broadcast_to(np.log(np.maximum(self.probs, 1e-300)), (B, N, len(self.probs))).copy())


class StubTeacher:
    """Class probabilities depend only on the last token of the row."""

    def __init__(self, table):
        self.table = np.asarray(table, dtype=float)  # (V, C)
        self.spec = ModelSpec(vocab_size=len(table), max_len=64, n_layers=1, d_model=2, n_heads=1,
                              n_classes=self.table.shape[1])

    def forward(self, rows):
        return None, T.Tensor(np.log(self.table[rows[:, -1]])), None


def lm_probs():
    p = np.array([0.0, 0.0, 0.05, 0.3, 0.25, 0.2, 0.15, 0.05])
    return p / p.sum()


def teacher_table(rng=np.random.default_rng(0)):
    t = rng.uniform(0.05, 1.0, size=(V, 2))
    return t / t.sum(axis=1, keepdims=True)


CFG = SteerConfig(gamma=1.0, m=3, k=2, max_len=6, min_len=1, n_samples=4, heldout_fraction=0.5)


class TestSteeredDistribution:
    def test_gamma_zero_is_top_m_lm(self):
        p = lm_probs()
        out = steered_next_distribution(StubLM(p), StubTeacher(teacher_table()), [3], 0,
                                        dataclasses.replace(CFG, gamma=0.0))
        lm_dist = T.softmax(T.Tensor(np.log(np.maximum(p, 1e-300)))).data
        want = np.zeros(V)
        top = np.argsort(-lm_dist, kind="stable")[:3]
        want[top] = lm_dist[top] / lm_dist[top].sum()
        np.testing.assert_array_equal(out, want)

    def test_gamma_zero_full_m_is_lm_softmax(self):
        p = lm_probs()
        out = steered_next_distribution(StubLM(p), StubTeacher(teacher_table()), [3], 1,
                                        dataclasses.replace(CFG, gamma=0.0, m=V, k=1))
        np.testing.assert_allclose(out, p, atol=1e-12)

    def test_hand_computed_product(self):
        probs = np.array([0.1, 0.2, 0.3, 0.4])
        table = np.array([[0.5, 0.5], [0.9, 0.1], [0.2, 0.8], [0.6, 0.4]])
        out = steered_next_distribution(StubLM(probs), StubTeacher(table), [3], 0,
                                        SteerConfig(gamma=1.0, m=3, k=1, max_len=5, min_len=1))
        # candidates 3, 2, 1; token 2 is EOS, so it is judged on the prefix [3] alone
        s = np.array([0.0, 0.2 * 0.9, 0.3 * 0.6, 0.4 * 0.6])
        np.testing.assert_allclose(out, s / s.sum(), rtol=1e-12)

    def test_m_one_is_lm_argmax(self):
        out = steered_next_distribution(StubLM(lm_probs()), StubTeacher(teacher_table()), [4], 1,
                                        dataclasses.replace(CFG, m=1, k=1, gamma=5.0))
        assert out[3] == 1.0 and out.sum() == 1.0

    def test_zero_mass_outside_top_m(self):
        out = steered_next_distribution(StubLM(lm_probs()), StubTeacher(teacher_table()), [4], 0, CFG)
        top = set(np.argsort(-lm_probs(), kind="stable")[:3].tolist())
        assert all(out[j] == 0 for j in range(V) if j not in top)
        assert abs(out.sum() - 1) < 1e-6

    def test_underflow_falls_back_to_lm(self):
        table = np.full((V, 2), 1e-20)
        table[:, 1] = 1.0
        out = steered_next_distribution(StubLM(lm_probs()), StubTeacher(table), [4], 0,
                                        dataclasses.replace(CFG, gamma=2.0))
        want = steered_next_distribution(StubLM(lm_probs()), StubTeacher(table), [4], 0,
                                         dataclasses.replace(CFG, gamma=0.0))
        np.testing.assert_allclose(out, want)

    def test_errors(self):
        lm, te = StubLM(lm_probs()), StubTeacher(teacher_table())
        with pytest.raises(ValueError):
            steered_next_distribution(lm, te, [3], 2, CFG)
        with pytest.raises(ValueError):
            steered_next_distribution(lm, te, [3] * 6, 0, CFG)
        with pytest.raises(ValueError):
            steered_batch(lm, te, np.array([[3]]), np.array([0, 1]), CFG)


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(gamma=-1.0), dict(k=3), dict(m=9), dict(heldout_fraction=1.0),
                                    dict(top_p=1.5), dict(min_len=7)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            dataclasses.replace(CFG, **kw).validate(V)

    def test_nucleus_skips_k_check(self):
        dataclasses.replace(CFG, k=5, top_p=0.9).validate(V)


class TestTruncate:
    def test_top_k(self):
        d = np.array([[0.1, 0.5, 0.15, 0.25]])
        np.testing.assert_allclose(_truncate(d, dataclasses.replace(CFG, k=2)), [[0, 0.5 / 0.75, 0, 0.25 / 0.75]])

    def test_nucleus(self):
        d = np.array([[0.1, 0.5, 0.15, 0.25]])
        out = _truncate(d, dataclasses.replace(CFG, top_p=0.7))
        np.testing.assert_allclose(out, [[0, 0.5 / 0.75, 0, 0.25 / 0.75]])

    def test_keeps_at_least_one(self):
        out = _truncate(np.array([[0.9, 0.1]]), dataclasses.replace(CFG, top_p=0.01))
        np.testing.assert_array_equal(out, [[1.0, 0.0]])


@pytest.fixture(scope="module")
def tiny_models():
    lm = CausalLM(ModelSpec(vocab_size=12, max_len=8, n_layers=1, d_model=8, n_heads=2, kind="causal_lm"), Rng(0))
    ts = [Classifier(ModelSpec(vocab_size=12, max_len=8, n_layers=1, d_model=8, n_heads=2, n_classes=2), Rng(i))
          for i in (1, 2)]
    return lm, ts


class TestSampling:
    def test_seeded_sequence_reproducible(self, tiny_models):
        lm, ts = tiny_models
        a = sample_sequence(lm, ts[0], 1, CFG, Rng(3).child("s"))
        b = sample_sequence(lm, ts[0], 1, CFG, Rng(3).child("s"))
        np.testing.assert_array_equal(a.tokens, b.tokens)
        assert a.target == 1 and len(a.tokens) <= CFG.max_len and EOS not in a.tokens

    def test_k_one_is_greedy(self, tiny_models):
        lm, ts = tiny_models
        cfg = dataclasses.replace(CFG, k=1)
        a = sample_sequence(lm, ts[0], 0, cfg, Rng(1))
        b = sample_sequence(lm, ts[0], 0, cfg, Rng(99))
        np.testing.assert_array_equal(a.tokens, b.tokens)

    def test_model_context_check(self, tiny_models):
        lm, ts = tiny_models
        with pytest.raises(ValueError):
            sample_sequence(lm, ts[0], 0, dataclasses.replace(CFG, max_len=8), Rng(0))


class TestTransferSet:
    def test_sizes_and_coverage(self, tiny_models, tmp_path):
        lm, ts = tiny_models
        cfg = dataclasses.replace(CFG, n_samples=50, max_len=4, min_len=2)
        out = build_transfer_set(lm, ts, cfg, Rng(0))
        assert len(out.train) == 100
        assert {i: len(v) for i, v in out.heldout.items()} == {0: 50, 1: 50}
        la = assign_labels(4, 2)
        labels = out.union_labels(la)
        assert np.bincount(labels).tolist() == [25, 25, 25, 25]
        train_ids = {id(s) for s in out.train}
        assert not any(id(s) in train_ids for v in out.heldout.values() for s in v)

        save_transfer_set(out, tmp_path, la)
        back = load_transfer_set(tmp_path)
        assert back.config == cfg
        assert all(np.array_equal(a.tokens, b.tokens) and a.target == b.target and a.teacher == b.teacher
                   for a, b in zip(out.train, back.train))
        assert len(back.heldout[1]) == 50
        assert 0.0 <= steering_success(ts[0], out.heldout[0]) <= 1.0

    def test_no_teachers(self, tiny_models):
        with pytest.raises(ValueError):
            build_transfer_set(tiny_models[0], [], CFG, Rng(0))
