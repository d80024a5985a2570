import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kifusion.importance import (
    ImportanceState, layer_sums, raw_importance, raw_importance_gradonly, raw_metric, record_static,
    snapshot, update_inner, update_outer, write_snapshot_csv,
)
from kifusion.model import FlatParams, adapter_layout, loss_and_grad
from kifusion.numkit import Rng

from conftest import small_batch, small_model

LAYOUT = adapter_layout([3, 2], 1)  # A: 1x3, B: 2x1 -> n = 5


def vec(values):
    return FlatParams(np.asarray(values, dtype=np.float64), LAYOUT)


def rand(rng, scale=1.0):
    return vec(rng.normal(5, scale=scale))


class TestRaw:
    def test_product(self):
        assert raw_importance(vec([2, 0, 0, 0, 0]), vec([-3, 1, 0, 0, 0])).tolist() == [6, 0, 0, 0, 0]

    def test_zero_grad(self):
        assert not raw_importance(rand(Rng(1)), vec(np.zeros(5))).any()

    def test_sign_invariant(self):
        w, g = rand(Rng(1)), rand(Rng(2))
        ref = raw_importance(w, g)
        for a, b in ((-1, 1), (1, -1), (-1, -1)):
            assert np.array_equal(raw_importance(vec(a * w.data), vec(b * g.data)), ref)

    def test_gradonly(self):
        g = vec([-3, 1, 0, 2, -0.5])
        assert raw_importance_gradonly(g).tolist() == [3, 1, 0, 2, 0.5]
        assert np.array_equal(raw_metric("abs_grad", vec(np.full(5, 9.0)), g), raw_metric("abs_grad", vec(np.ones(5)), g))

    def test_rankings_differ(self):
        # |w| varies: coordinate 0 has the larger gradient, coordinate 1 the larger product
        w, g = vec([0.1, 5.0, 0, 0, 0]), vec([2.0, 1.0, 0, 0, 0])
        assert np.argmax(raw_importance_gradonly(g)) == 0
        assert np.argmax(raw_importance(w, g)) == 1

    def test_layout_mismatch(self):
        other = FlatParams(np.zeros(5), adapter_layout([4, 1], 1))  # same size, different shapes
        with pytest.raises(ValueError):
            raw_importance(vec(np.zeros(5)), other)

    def test_unknown_metric(self):
        with pytest.raises(ValueError):
            raw_metric("fisher", vec(np.zeros(5)), vec(np.zeros(5)))


class TestInner:
    def test_arithmetic(self):
        st_ = ImportanceState(LAYOUT, alpha1=0.55)
        st_.begin_iteration()
        update_inner(st_, vec(np.ones(5)), vec(np.ones(5)))
        update_inner(st_, vec(np.ones(5)), vec(np.zeros(5)))
        assert st_.inner.tolist() == [0.55] * 5

    def test_first_step_passes_through(self):
        st_ = ImportanceState(LAYOUT)
        st_.begin_iteration()
        w, g = rand(Rng(3)), rand(Rng(4))
        update_inner(st_, w, g)
        assert np.array_equal(st_.inner, raw_importance(w, g))

    def test_constant_raw_fixed_point(self):
        st_ = ImportanceState(LAYOUT)
        st_.begin_iteration()
        w, g = rand(Rng(3)), rand(Rng(4))
        for _ in range(60):
            update_inner(st_, w, g)
        np.testing.assert_allclose(st_.inner, raw_importance(w, g), rtol=1e-12)

    @pytest.mark.parametrize("steps", [8, 32])
    def test_closed_form(self, steps):
        # I_Q = a^(Q-1) r_1 + (1-a) sum_{q>=2} a^(Q-q) r_q  (the first observation seeds the average)
        a = 0.55
        st_ = ImportanceState(LAYOUT, alpha1=a)
        rng = Rng(steps)
        raws = []
        st_.begin_iteration()
        for _ in range(steps):
            w, g = rand(rng), rand(rng)
            raws.append(np.abs(w.data * g.data))
            update_inner(st_, w, g)
        closed = a ** (steps - 1) * raws[0] + sum((1 - a) * a ** (steps - q) * raws[q - 1] for q in range(2, steps + 1))
        np.testing.assert_allclose(st_.inner, closed, rtol=1e-12, atol=1e-15)

    def test_reset_each_iteration(self):
        st_ = ImportanceState(LAYOUT)
        for seed in (1, 2):
            st_.begin_iteration()
            w, g = rand(Rng(seed)), rand(Rng(seed + 10))
            update_inner(st_, w, g)
            assert np.array_equal(st_.inner, raw_importance(w, g))

    def test_carryover(self):
        st_ = ImportanceState(LAYOUT, alpha1=0.5, inner_ema_carryover=True)
        st_.begin_iteration()
        update_inner(st_, vec(np.ones(5)), vec(np.ones(5)))
        st_.begin_iteration()
        update_inner(st_, vec(np.ones(5)), vec(np.zeros(5)))
        assert st_.inner.tolist() == [0.5] * 5


class TestOuter:
    def test_arithmetic(self):
        st_ = ImportanceState(LAYOUT, alpha2=0.55)
        update_outer(st_, vec(np.ones(5)), vec(np.ones(5)))
        assert st_.outer.tolist() == [0.55] * 5

    def test_fixed_point(self):
        st_ = ImportanceState(LAYOUT)
        w, g = rand(Rng(5)), rand(Rng(6))
        for _ in range(80):
            update_outer(st_, w, g)
        np.testing.assert_allclose(st_.outer, raw_importance(w, g), rtol=1e-12)

    def test_closed_form_32(self):
        # I_B = sum_b a (1-a)^(B-b) r_b, starting from zeros
        a = 0.55
        st_ = ImportanceState(LAYOUT, alpha2=a)
        rng = Rng(77)
        raws = []
        for _ in range(32):
            w, g = rand(rng), rand(rng)
            raws.append(np.abs(w.data * g.data))
            update_outer(st_, w, g)
        closed = sum(a * (1 - a) ** (32 - b) * raws[b - 1] for b in range(1, 33))
        np.testing.assert_allclose(st_.outer, closed, rtol=1e-12, atol=1e-15)

    def test_depends_on_parameters(self):
        model, params = small_model(2)
        batch = small_batch(2)
        moved = params.like(params.data + Rng(9).normal(params.n, scale=0.2))
        raws = []
        for p in (params, moved):
            st_ = ImportanceState(model.layout)
            _, g = loss_and_grad(model, p, batch)
            raws.append(update_outer(st_, p, g))
        assert not np.allclose(raws[0], raws[1])

    def test_not_reset_by_iterations(self):
        st_ = ImportanceState(LAYOUT)
        update_outer(st_, vec(np.ones(5)), vec(np.ones(5)))
        before = st_.outer.copy()
        st_.begin_iteration()
        update_inner(st_, rand(Rng(1)), rand(Rng(2)))
        assert np.array_equal(st_.outer, before)


@settings(max_examples=60, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.integers(0, 2**32 - 1))
def test_non_negative(a1, a2, seed):
    st_ = ImportanceState(LAYOUT, a1, a2)
    rng = Rng(seed)
    for step in range(10):
        if step % 4 == 0:
            st_.begin_iteration()
        update_inner(st_, rand(rng), rand(rng))
        update_outer(st_, rand(rng), rand(rng))
    assert np.all(st_.inner >= 0) and np.all(st_.outer >= 0)


def test_record_static_running_mean():
    st_ = ImportanceState(LAYOUT)
    rng = Rng(1)
    raws = []
    for _ in range(3):
        w, g = rand(rng), rand(rng)
        raws.append(np.abs(w.data * g.data))
        record_static(st_, w, g)
    np.testing.assert_allclose(st_.outer, np.mean(raws, axis=0), rtol=1e-12)


def test_rejects_alpha():
    with pytest.raises(ValueError):
        ImportanceState(LAYOUT, alpha1=1.5)


class TestSnapshot:
    def test_fresh_zeros(self):
        inner, outer = snapshot(ImportanceState(LAYOUT))
        assert not inner.any() and not outer.any()

    def test_copy(self):
        st_ = ImportanceState(LAYOUT)
        inner, _ = snapshot(st_)
        st_.begin_iteration()
        update_inner(st_, rand(Rng(1)), rand(Rng(2)))
        assert not inner.any()

    def test_layer_sums(self):
        model, params = small_model(1)
        values = np.abs(Rng(2).normal(params.n))
        sums = layer_sums(values, model.layout)
        for s in model.layout:
            manual = sum(values[s.offset + i] for i in range(s.size))
            assert sums[(s.layer, s.tensor)] == pytest.approx(manual, rel=1e-12)
        assert sum(sums.values()) == pytest.approx(values.sum(), rel=1e-12)

    def test_csv(self, tmp_path):
        inner, outer = np.arange(5.0), np.arange(5.0) * 2
        write_snapshot_csv(inner, outer, LAYOUT, tmp_path / "s.csv")
        rows = list(csv.reader(open(tmp_path / "s.csv")))
        assert rows[0] == ["layer", "tensor", "row", "col", "inner", "outer"]
        assert rows[1:] == [["0", "A", "0", "0", "0.0", "0.0"], ["0", "A", "0", "1", "1.0", "2.0"],
                            ["0", "A", "0", "2", "2.0", "4.0"], ["0", "B", "0", "0", "3.0", "6.0"],
                            ["0", "B", "1", "0", "4.0", "8.0"]]
