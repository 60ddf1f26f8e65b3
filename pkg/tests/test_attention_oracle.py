import numpy as np
import pytest

from mossnet import attention_oracle as ao
from mossnet import ssm_kernel
from mossnet.block import BlockConfig, block_forward
from mossnet.errors import DimensionError, SingularityError
from mossnet.numerics import Rng, no_grad

from conftest import random_block


def naive_cumprod(A_bar):
    out = np.empty_like(A_bar)
    for t in range(A_bar.shape[0]):
        acc = np.ones(A_bar.shape[1:])
        for j in range(t + 1):
            acc = acc * A_bar[j]
        out[t] = acc
    return out


def one_step_instance(seed, Me=2):
    r = Rng(seed)
    P, N, M = 3, 2, 2
    probs = r.uniform((1, Me), 0.1, 1.0)
    probs /= probs.sum()
    return ao.TheoremInstance(r.uniform((1, P), 0.2, 0.9), r.normal((Me, 1, P, N)),
                              r.normal((Me, 1, M, P)), r.normal((1, N)), probs)


class TestBuildHeads:
    def test_single_step_telescopes(self):
        inst = one_step_instance(0)
        h = ao.build_heads(inst)
        p = inst.probs[0]
        for m in range(2):
            assert np.allclose(h.q[m, 0], p[m] * inst.C[m, 0] * inst.A_bar[0], rtol=0, atol=1e-15)
            assert np.allclose(h.k[m, 0], p[m] * inst.B_bar[m, 0] / inst.A_bar[0][:, None], rtol=0, atol=1e-14)
        # the A_bar factors cancel inside <q, k>
        qk = h.q[0, 0] @ h.k[1, 0]
        assert np.max(np.abs(qk - p[0] * p[1] * inst.C[0, 0] @ inst.B_bar[1, 0])) <= 1e-13

    def test_identity_transition_has_no_decay(self):
        r = Rng(1)
        Me, T, P, N, M = 3, 5, 4, 2, 1
        probs = r.uniform((T, Me), 0.1, 1.0)
        probs /= probs.sum(axis=1, keepdims=True)
        inst = ao.TheoremInstance(np.ones((T, P)), r.normal((Me, T, P, N)), r.normal((Me, T, M, P)),
                                  r.normal((T, N)), probs)
        h = ao.build_heads(inst, check_range=False)
        assert np.array_equal(h.q, probs.T[:, :, None, None] * inst.C)
        assert np.array_equal(h.k, probs.T[:, :, None, None] * inst.B_bar)

    def test_cumulative_products_match_naive(self):
        for seed in range(20):
            inst = ao.random_instance(seed)
            assert np.max(np.abs(ao.cumulative_transitions(inst.A_bar) / naive_cumprod(inst.A_bar) - 1)) <= 1e-12

    def test_value_is_input(self):
        inst = ao.random_instance(3)
        assert np.array_equal(ao.build_heads(inst).v, inst.x)

    @pytest.mark.parametrize("bad", [0.0, 5e-4, 1.0, 1.2])
    def test_out_of_range_transition(self, bad):
        inst = ao.random_instance(4)
        A = inst.A_bar.copy()
        A[0, 0] = bad
        with pytest.raises(SingularityError):
            ao.build_heads(ao.TheoremInstance(A, inst.B_bar, inst.C, inst.x, inst.probs))

    def test_shape_checks(self):
        inst = ao.random_instance(5, T=4, P=2, N=2, n_experts=2, M=1)
        with pytest.raises(DimensionError):
            ao.TheoremInstance(inst.A_bar, inst.B_bar[:1], inst.C, inst.x, inst.probs)
        with pytest.raises(ValueError):
            ao.TheoremInstance(inst.A_bar, inst.B_bar, inst.C, inst.x, inst.probs * 2)


class TestForward:
    def test_single_expert_is_unroll(self):
        for seed in range(10):
            inst = ao.random_instance(seed, n_experts=1, N=1, M=1)
            y = ao.mha_moa_forward(ao.build_heads(inst))
            ref = ssm_kernel.unroll(inst.A_bar[:, None, :], inst.B_bar[0][:, :, 0][:, None, :],
                                    inst.C[0][:, 0, :], inst.x)
            assert np.max(np.abs(y - ref)) <= 1e-10

    def test_fixed_two_expert_instance(self):
        inst = ao.random_instance(11, T=8, P=4, n_experts=2)
        assert ao.verify_equivalence(inst) <= 1e-8

    def test_cross_terms_are_needed(self):
        differs = sum(ao.verify_equivalence(ao.random_instance(s, n_experts=2), include_cross=False) > 1e-3
                      for s in range(200))
        assert differs / 200 >= 0.95

    def test_term_count_is_squared_head_count(self):
        for Me in (1, 2, 3, 4):
            inst = ao.random_instance(Me, T=6, n_experts=Me)
            counts = np.zeros((6, 6), dtype=np.int64)
            ao.mha_moa_forward(ao.build_heads(inst), term_counts=counts)
            assert np.array_equal(counts, np.tril(np.full((6, 6), Me * Me)))

    def test_value_perturbation_breaks_equivalence(self):
        broken = 0
        for seed in range(50):
            inst = ao.random_instance(seed, T=6)
            h = ao.build_heads(inst)
            ref = ao.ssm_output(inst)
            v2 = h.v + Rng(seed + 1000).normal(h.v.shape)
            y = ao.mha_moa_forward(ao.HeadVectors(h.q, h.k, v2))
            broken += np.max(np.abs(y - ref)) > 1e-3
        assert broken == 50


class TestEquivalence:
    def test_zero_input(self):
        inst = ao.random_instance(2)
        zero = ao.TheoremInstance(inst.A_bar, inst.B_bar, inst.C, np.zeros_like(inst.x), inst.probs)
        assert ao.verify_equivalence(zero) == 0.0
        assert not ao.ssm_output(zero).any()

    def test_single_expert_tight(self):
        for seed in range(20):
            assert ao.verify_equivalence(ao.random_instance(seed, n_experts=1)) <= 1e-10

    def test_seeded_instance_set(self):
        worst = 0.0
        sizes = set()
        for seed in range(1000):
            inst = ao.random_instance(seed, n_experts=2 + seed % 3)
            sizes.add(inst.n_experts)
            assert inst.T <= 16
            worst = max(worst, ao.verify_equivalence(inst))
        assert sizes == {2, 3, 4}
        assert worst <= 1e-8

    def test_default_draws_cover_one_to_four(self):
        assert {ao.random_instance(s).n_experts for s in range(40)} == {1, 2, 3, 4}

    def test_scan_side_agrees(self):
        for seed in range(20):
            inst = ao.random_instance(seed)
            assert np.max(np.abs(ao.ssm_output(inst, "scan") - ao.ssm_output(inst))) <= 1e-12

    def test_top_k_routing_instance(self):
        inst = ao.random_instance(8, n_experts=4, k=2)
        assert np.all((inst.probs > 0).sum(axis=1) == 2)
        assert ao.verify_equivalence(inst) <= 1e-8


class TestFromBlock:
    def _block(self, seed):
        cfg = BlockConfig(d_model=6, d_inner=5, d_state=4, n_experts=3, k=3, dt_rank=2, theorem_mode=True)
        p = random_block(cfg, seed, scale=0.3)
        p.dt_bias.data[:] = -1.0
        return p

    def test_block_channel_matches_oracle(self):
        for seed in range(5):
            p = self._block(seed)
            x = Rng(seed).normal((8, 6))
            trace = {}
            with no_grad():
                block_forward(x, p, trace=trace)
            for ch in range(p.cfg.d_inner):
                inst = ao.instance_from_block(p, x, channel=ch)
                y_block = trace["y_ssm"][0, :, ch]
                assert np.max(np.abs(ao.ssm_output(inst)[:, 0] - y_block)) <= 1e-10
                assert ao.verify_equivalence(inst) <= 1e-8

    def test_requires_theorem_mode(self):
        p = random_block(BlockConfig(d_model=6, d_inner=5, d_state=4, n_experts=3, k=2, dt_rank=2), 0)
        with pytest.raises(ValueError):
            ao.instance_from_block(p, np.zeros((3, 6)))
