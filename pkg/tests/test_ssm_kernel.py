import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, strategies as st

from mossnet import ssm_kernel as sk
from mossnet.errors import ContractError, ParameterDomainError, SingularityError
from mossnet.numerics import Rng, Tensor, backward, finite_diff_grad, relative_error
from mossnet.ssm_kernel import SsmParams, discretize, scan, sequential_scan, step, unroll


def scalar_params(a, delta, b):
    return SsmParams(np.array([[a]]), np.array([[delta]]), np.array([[b]]), np.zeros((1, 1)))


def taylor_zoh(a, delta, b, terms=50):
    """``exp(delta a)`` and ``(exp(delta a) - 1)/a * b`` from 50-term series at 50 digits."""
    with mpmath.workdps(50):
        z = mpmath.mpf(delta) * mpmath.mpf(a)
        e = mpmath.fsum(z ** n / mpmath.factorial(n) for n in range(terms))
        phi = mpmath.fsum(z ** n / mpmath.factorial(n + 1) for n in range(terms))
        return float(e), float(mpmath.mpf(delta) * phi * mpmath.mpf(b))


def random_recurrence(seed, T, shape=(3, 4)):
    r = Rng(seed)
    a = r.uniform((T,) + shape, 0.2, 1.0)
    b = r.normal((T,) + shape)
    return a, b


class TestDiscretize:
    def test_closed_form_scalar(self):
        d = discretize(scalar_params(-1.0, math.log(2.0), 1.0))
        assert d.A_bar[0, 0, 0] == pytest.approx(0.5, abs=1e-15)
        assert d.B_bar[0, 0, 0] == pytest.approx(0.5, abs=1e-15)

    def test_series_limit(self):
        d = discretize(scalar_params(-3.0, 1e-12, 2.0))
        assert d.A_bar[0, 0, 0] == pytest.approx(1.0, abs=1e-11)
        assert d.B_bar[0, 0, 0] == pytest.approx(2e-12, rel=1e-10)

    def test_against_high_precision_series(self):
        r = Rng(0)
        worst_a = worst_b = 0.0
        for _ in range(64):
            a, delta, b = (float(v) for v in (-r.uniform((), 0.01, 5.0), r.uniform((), 1e-3, 1.0), r.normal(())))
            d = discretize(scalar_params(a, delta, b))
            ea, eb = taylor_zoh(a, delta, b)
            worst_a = max(worst_a, abs(d.A_bar[0, 0, 0] - ea) / abs(ea))
            worst_b = max(worst_b, abs(d.B_bar[0, 0, 0] - eb) / abs(eb))
        assert worst_a <= 1e-12 and worst_b <= 1e-12

    @pytest.mark.parametrize("a,delta", [(0.0, 1.0), (1.0, 0.5), (-1.0, 0.0), (-1.0, -0.1)])
    def test_domain_errors(self, a, delta):
        with pytest.raises(ParameterDomainError):
            discretize(scalar_params(a, delta, 1.0))

    def test_abar_in_unit_interval(self):
        r = Rng(1)
        p = SsmParams(-r.uniform((4, 3), 0.1, 3), r.uniform((5, 4), 0.01, 2), r.normal((5, 3)), r.normal((5, 3)))
        d = discretize(p)
        assert np.all((d.A_bar > 0) & (d.A_bar < 1))

    @given(st.floats(-10, -1e-3), st.floats(1e-4, 5.0), st.floats(1e-4, 5.0))
    def test_abar_strictly_decreasing_in_delta(self, a, d1, d2):
        if d1 == d2:
            return
        lo, hi = sorted((d1, d2))
        A_lo = discretize(scalar_params(a, lo, 1.0)).A_bar[0, 0, 0]
        A_hi = discretize(scalar_params(a, hi, 1.0)).A_bar[0, 0, 0]
        assert A_hi < A_lo or (A_hi == A_lo == 0.0) or lo * a - hi * a < 1e-15

    def test_graph_version_matches(self):
        r = Rng(2)
        A = -r.uniform((4, 3), 0.1, 2)
        delta = r.uniform((5, 4), 1e-9, 1.0)
        delta[0, 0] = 1e-12
        B = r.normal((5, 3))
        d = discretize(SsmParams(A, delta, B, np.zeros((5, 3))))
        a_t, b_t = sk.discretize_tensors(Tensor(delta), Tensor(A), Tensor(B))
        assert np.max(np.abs(a_t.data - d.A_bar)) <= 1e-15
        assert np.max(relative_error(b_t.data, d.B_bar, floor=1e-300)) <= 1e-12


class TestStep:
    def test_zero_state(self):
        r = Rng(3)
        Ab, Bb, C, x = r.uniform((2, 3)), r.normal((2, 3)), r.normal((3,)), r.normal((2,))
        s, y = step(np.zeros((2, 3)), x, Ab, Bb, C)
        assert np.allclose(s.s, Bb * x[:, None], atol=0)
        assert np.allclose(y, (s.s * C).sum(-1), atol=0)

    def test_integrator(self):
        s = np.zeros((1, 1))
        ys = []
        for _ in range(3):
            s, y = step(s, np.ones(1), np.ones((1, 1)), np.ones((1, 1)), np.ones(1))
            ys.append(float(y[0]))
        assert ys == [1.0, 2.0, 3.0]

    def test_matches_unroll(self):
        for seed in range(10):
            r = Rng(seed)
            T, di, ds = 16, 3, 4
            Ab, Bb, C, x = r.uniform((T, di, ds), 0.3, 1.0), r.normal((T, di, ds)), r.normal((T, ds)), r.normal((T, di))
            s = np.zeros((di, ds))
            ys = []
            for t in range(T):
                s, y = step(s, x[t], Ab[t], Bb[t], C[t])
                ys.append(y)
            assert np.max(np.abs(np.array(ys) - unroll(Ab, Bb, C, x))) <= 1e-10


class TestScan:
    def test_single_pair_unchanged(self):
        a, b = np.array([[0.3, 0.7]]), np.array([[1.5, -2.0]])
        pa, pb = sk.associative_scan(a, b)
        assert np.array_equal(pa, a) and np.array_equal(pb, b)

    @given(st.floats(-3, 3), st.floats(-3, 3))
    def test_identity_element(self, a, b):
        assert sk.combine((1.0, 0.0), (a, b)) == (a, b)
        assert sk.combine((a, b), (1.0, 0.0)) == (a, b)

    def test_identity_inserted_is_noop(self):
        a, b = random_recurrence(0, 9)
        ai = np.concatenate([a[:4], np.ones_like(a[:1]), a[4:]])
        bi = np.concatenate([b[:4], np.zeros_like(b[:1]), b[4:]])
        s, si = scan(a, b), scan(ai, bi)
        assert np.max(np.abs(np.delete(si, 4, axis=0) - s)) <= 1e-15

    def test_long_sequence(self):
        a, b = random_recurrence(11, 1024)
        assert np.max(np.abs(scan(a, b) - sequential_scan(a, b))) <= 1e-10

    def test_duality_200_cases(self):
        worst = 0.0
        lengths = (1, 2, 3, 17, 256, 1024)
        for case in range(200):
            T = lengths[case % len(lengths)]
            a, b = random_recurrence(1000 + case, T, (2, 3))
            s0 = Rng(case).normal((2, 3)) if case % 2 else None
            worst = max(worst, float(np.max(np.abs(scan(a, b, s0) - sequential_scan(a, b, s0)))))
        assert worst <= 1e-10

    def test_axis_argument(self):
        a, b = random_recurrence(5, 13)
        ref = sequential_scan(a, b)
        moved = scan(np.moveaxis(a, 0, 2), np.moveaxis(b, 0, 2), axis=2)
        assert np.max(np.abs(np.moveaxis(moved, 2, 0) - ref)) <= 1e-12

    def test_bit_reproducible(self):
        a, b = random_recurrence(6, 300)
        assert scan(a, b).tobytes() == scan(a.copy(), b.copy()).tobytes()

    def test_empty_raises(self):
        with pytest.raises(ContractError):
            sk.associative_scan(np.zeros((0, 2)), np.zeros((0, 2)))

    def test_state_decays_without_input(self):
        r = Rng(8)
        p = SsmParams(-r.uniform((3, 4), 0.1, 2), r.uniform((30, 3), 0.01, 1), r.normal((30, 4)), r.normal((30, 4)))
        d = discretize(p)
        x = r.normal((30, 3))
        x[10:] = 0
        s = sequential_scan(d.A_bar, d.B_bar * x[:, :, None])
        norms = np.linalg.norm(s.reshape(30, -1), axis=1)
        assert np.all(np.diff(norms[10:]) < 0)


class TestUnroll:
    def test_no_decay(self):
        r = Rng(4)
        T, di, ds = 6, 2, 3
        Bb, C, x = r.normal((T, di, ds)), r.normal((T, ds)), r.normal((T, di))
        y = unroll(np.ones((T, di, ds)), Bb, C, x)
        acc = np.cumsum(Bb * x[:, :, None], axis=0)
        assert np.max(np.abs(y - (acc * C[:, None, :]).sum(-1))) <= 1e-12

    def test_single_step(self):
        r = Rng(5)
        Ab, Bb, C, x = r.uniform((1, 2, 3), 0.1, 1), r.normal((1, 2, 3)), r.normal((1, 3)), r.normal((1, 2))
        assert np.allclose(unroll(Ab, Bb, C, x)[0], ((Bb[0] * x[0][:, None]) * C[0]).sum(-1), atol=1e-15)

    def test_matches_recurrence(self):
        for seed in range(20):
            r = Rng(seed)
            T = 1 + seed % 64
            Ab, Bb, C, x = r.uniform((T, 2, 3), 0.5, 1.0), r.normal((T, 2, 3)), r.normal((T, 3)), r.normal((T, 2))
            s = sequential_scan(Ab, Bb * x[:, :, None])
            assert np.max(np.abs((s * C[:, None, :]).sum(-1) - unroll(Ab, Bb, C, x))) <= 1e-9

    def test_floor_and_length_guards(self):
        with pytest.raises(SingularityError):
            unroll(np.full((2, 1, 1), 1e-7), np.ones((2, 1, 1)), np.ones((2, 1)), np.ones((2, 1)))
        with pytest.raises(ContractError):
            unroll(np.ones((65, 1, 1)), np.ones((65, 1, 1)), np.ones((65, 1)), np.ones((65, 1)))


class TestSelectiveOps:
    def _inputs(self, seed, nb=2, T=7, di=3, ds=4, tiny=False):
        r = Rng(seed)
        delta = r.uniform((nb, T, di), 0.05, 1.5)
        if tiny:
            delta[0, :2] = 1e-10
        return (delta, -r.uniform((di, ds), 0.2, 2.0), r.normal((nb, T, ds)), r.normal((nb, T, ds)),
                r.normal((nb, T, di)), r.normal((nb, di, ds)))

    def _composed(self, delta, A, B, C, u, s0, method):
        a, bb = sk.discretize_tensors(delta, A, B)
        s = sk.selective_scan(a, bb * u.reshape(u.shape + (1,)), s0, axis=1, method=method)
        return (s * C.reshape(C.shape[:2] + (1, C.shape[2]))).sum(axis=-1)

    @pytest.mark.parametrize("method", ["blelloch", "sequential"])
    @pytest.mark.parametrize("tiny", [False, True])
    def test_fused_matches_composed_values_and_gradients(self, method, tiny):
        arrays = self._inputs(0, tiny=tiny)
        s0 = arrays[-1]
        r = Rng(9)
        proj = r.normal(arrays[0].shape)
        ts = [Tensor(v, requires_grad=True) for v in arrays[:-1]]
        y, _ = sk.selective_ssm(*ts, s0, method)
        g1 = backward((y * Tensor(proj)).sum())
        ts2 = [Tensor(v, requires_grad=True) for v in arrays[:-1]]
        y2 = self._composed(*ts2, s0, "sequential")
        g2 = backward((y2 * Tensor(proj)).sum())
        assert np.max(np.abs(y.data - y2.data)) <= 1e-12
        for a, b in zip(ts, ts2):
            assert np.max(relative_error(g1[a], g2[b], floor=1e-10)) <= 1e-10

    def test_fused_gradient_against_finite_differences(self):
        arrays = self._inputs(1, nb=1, T=5, di=2, ds=3)
        s0 = arrays[-1]
        proj = Rng(2).normal(arrays[0].shape)
        for method in ("blelloch", "sequential"):
            ts = [Tensor(v, requires_grad=True) for v in arrays[:-1]]
            loss = lambda *xs: (sk.selective_ssm(*xs, s0, method)[0] * Tensor(proj)).sum()
            g = backward(loss(*ts))
            for i, t in enumerate(ts):
                def f(x, i=i):
                    args = list(ts)
                    args[i] = x
                    return loss(*args)
                assert relative_error(g[t], finite_diff_grad(f, t), floor=1e-6).max() <= 1e-6

    def test_selective_scan_gradient(self):
        for method in ("blelloch", "sequential"):
            a, b = random_recurrence(3, 6, (2,))
            s0 = np.array([0.5, -1.0])
            at, bt = Tensor(a[None], requires_grad=True), Tensor(b[None], requires_grad=True)
            proj = Rng(1).normal((1, 6, 2))
            loss = lambda x, y: (sk.selective_scan(x, y, s0[None], 1, method) * Tensor(proj)).sum()
            g = backward(loss(at, bt))
            assert relative_error(g[at], finite_diff_grad(lambda x: loss(x, bt), at)).max() <= 1e-6
            assert relative_error(g[bt], finite_diff_grad(lambda y: loss(at, y), bt)).max() <= 1e-6

    def test_phi_gradient_across_series_switch(self):
        z = Tensor(np.array([-1e-9, -5e-3, -1e-2, -0.5, -4.0]), requires_grad=True)
        g = backward(sk.phi(z).sum())[z]
        fd = finite_diff_grad(lambda t: sk.phi(t).sum(), z.data, h=1e-7)
        assert relative_error(g, fd).max() <= 1e-6
