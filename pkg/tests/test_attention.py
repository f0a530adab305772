"""Attention modules: baselines, cell variants, and the shared unit."""

import numpy as np
import pytest

from dialstm import tensor as T
from dialstm.attention import (DiaUnit, EcaModule, LstmCellConfig, SamConfig,
                               SeModule, cell_weight_formula, dia_apply,
                               dia_lstm_step, make_cell)
from dialstm.errors import ConfigError
from dialstm.tensor import Tensor, backward, finite_difference_grad


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


class TestSeModule:
    def test_zero_weights_give_half(self, rng):
        se = SeModule(8, reduction=4, rng=rng)
        for layer in se.layers():
            for p in layer.parameters().values():
                p.data[:] = 0.0
        out = se(Tensor(rng.standard_normal((3, 8, 5, 5))))
        np.testing.assert_array_equal(out.data, np.full((3, 8), 0.5))

    def test_spatially_constant_input_ignores_extent(self, rng):
        se = SeModule(4, reduction=2, rng=rng)
        base = rng.standard_normal((2, 4))
        small = np.broadcast_to(base[:, :, None, None], (2, 4, 3, 3))
        large = np.broadcast_to(base[:, :, None, None], (2, 4, 9, 9))
        np.testing.assert_allclose(se(Tensor(small.copy())).data,
                                   se(Tensor(large.copy())).data, atol=1e-15)

    def test_matches_dense_matrix_oracle(self, rng):
        se = SeModule(8, reduction=4, rng=rng)
        a = rng.standard_normal((5, 8, 4, 4))
        got = se(Tensor(a)).data
        y = a.mean(axis=(2, 3))
        hidden = np.maximum(y @ se.fc1.weight.data + se.fc1.bias.data, 0.0)
        want = _sigmoid(hidden @ se.fc2.weight.data + se.fc2.bias.data)
        np.testing.assert_allclose(got, want, atol=1e-12)


class TestEcaModule:
    def test_zero_weights_give_half(self, rng):
        eca = EcaModule(6, kernel_size=3, rng=rng)
        eca.conv.weight.data[:] = 0.0
        out = eca(Tensor(rng.standard_normal((2, 6, 4, 4))))
        np.testing.assert_array_equal(out.data, np.full((2, 6), 0.5))

    def test_kernel_one_is_pointwise(self, rng):
        eca = EcaModule(5, kernel_size=1, rng=rng)
        w = float(eca.conv.weight.data[0])
        a = rng.standard_normal((3, 5, 2, 2))
        np.testing.assert_allclose(eca(Tensor(a)).data,
                                   _sigmoid(w * a.mean(axis=(2, 3))), atol=1e-12)

    def test_matches_sliding_window_oracle(self, rng):
        eca = EcaModule(7, kernel_size=3, rng=rng)
        a = rng.standard_normal((2, 7, 3, 3))
        y = a.mean(axis=(2, 3))
        padded = np.pad(y, ((0, 0), (1, 1)))
        w = eca.conv.weight.data
        want = np.zeros_like(y)
        for c in range(7):
            want[:, c] = sum(w[k] * padded[:, c + k] for k in range(3))
        np.testing.assert_allclose(eca(Tensor(a)).data, _sigmoid(want), atol=1e-12)

    def test_even_kernel_rejected(self, rng):
        with pytest.raises(ConfigError, match="odd"):
            EcaModule(4, kernel_size=2, rng=rng)


class TestCells:
    def _zero_cell(self, variant, n=6, r=2, act="sigmoid"):
        cell = make_cell(LstmCellConfig(variant=variant, r=r,
                                        output_activation=act), n,
                         np.random.default_rng(0))
        for layer in cell.layers():
            for p in layer.parameters().values():
                p.data[:] = 0.0
        if hasattr(cell, "b"):
            for b in cell.b.values():
                b.data[:] = 0.0
        return cell

    @pytest.mark.parametrize("variant", ["standard", "modified", "light"])
    def test_zero_cell_sigmoid_output_is_quarter(self, variant, rng):
        cell = self._zero_cell(variant)
        y = Tensor(rng.standard_normal((3, 6)))
        h, c = cell.step(y, Tensor(np.zeros((3, 6))), Tensor(np.zeros((3, 6))))
        np.testing.assert_allclose(h.data, np.full((3, 6), 0.25), atol=1e-15)
        np.testing.assert_array_equal(c.data, np.zeros((3, 6)))

    def test_zero_cell_tanh_output_is_zero(self, rng):
        cell = self._zero_cell("standard", act="tanh")
        y = Tensor(rng.standard_normal((2, 6)))
        h, _ = cell.step(y, Tensor(np.zeros((2, 6))), Tensor(np.zeros((2, 6))))
        np.testing.assert_array_equal(h.data, np.zeros((2, 6)))

    def test_weight_formulas_all_widths(self):
        for n in (8, 16, 64):
            for r in (1, 2, 4, 8):
                for variant in ("standard", "modified", "light"):
                    cell = make_cell(LstmCellConfig(variant=variant, r=r), n,
                                     np.random.default_rng(1))
                    got = sum(layer.weight_count() for layer in cell.layers())
                    assert got == cell_weight_formula(variant, n, r)

    def test_forget_gate_bias_starts_open(self):
        std = make_cell(LstmCellConfig(variant="standard"), 4,
                        np.random.default_rng(0))
        assert np.all(std.b["f"].data == 1.0) and np.all(std.b["i"].data == 0.0)
        light = make_cell(LstmCellConfig(variant="light", r=2), 4,
                          np.random.default_rng(0))
        assert np.all(light.ea_y["f"].bias.data == 1.0)

    def test_modified_two_step_gradient_matches_differences(self, rng):
        cell = make_cell(LstmCellConfig(variant="modified", r=2), 8,
                         np.random.default_rng(3))
        # random weights everywhere: zero-initialized biases would park the
        # step-1 hidden-path pre-activation exactly on relu's kink, where
        # central differences are undefined
        for layer in cell.layers():
            for p in layer.parameters().values():
                p.data += rng.normal(0.0, 0.05, size=p.data.shape)
        for b in cell.b.values():
            b.data += rng.normal(0.0, 0.05, size=b.data.shape)
        y1 = Tensor(rng.standard_normal((2, 8)))
        y2 = Tensor(rng.standard_normal((2, 8)))

        def loss_fn():
            h0 = Tensor(np.zeros((2, 8)))
            c0 = Tensor(np.zeros((2, 8)))
            h1, c1 = cell.step(y1, h0, c0)
            h2, _ = cell.step(y2, h1, c1)
            return T.sum_all(h2)

        params = [p for layer in cell.layers()
                  for p in layer.parameters().values()]
        params += [cell.b[g] for g in ("i", "f", "g", "o")]
        for p in params:
            p.grad = None
        backward(loss_fn())
        for p in params[:6] + params[-2:]:  # spot-check several tensors fully
            analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
            numeric = finite_difference_grad(lambda _t: loss_fn(), p).data
            scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
            assert (np.abs(analytic - numeric) / scale).max() <= 1e-4

    def test_invalid_reduction_rejected(self):
        with pytest.raises(ConfigError, match="divide"):
            make_cell(LstmCellConfig(variant="modified", r=3), 8,
                      np.random.default_rng(0))


class TestDiaUnit:
    def test_sigmoid_range_invariant(self):
        for trial in range(40):
            rng = np.random.default_rng([9, trial])
            variant = ("standard", "modified", "light")[trial % 3]
            unit = DiaUnit(LstmCellConfig(variant=variant, r=2), 8, rng)
            state = unit.init_state(4)
            for _ in range(3):
                y = Tensor(rng.standard_normal((4, 8)) * 3.0)
                h, state = unit.step(y, state)
                assert np.all(h.data > 0.0) and np.all(h.data < 1.0)

    def test_tanh_outputs_bounded_by_one(self):
        for trial in range(20):
            rng = np.random.default_rng([10, trial])
            unit = DiaUnit(LstmCellConfig(variant="standard",
                                          output_activation="tanh"), 6, rng)
            state = unit.init_state(3)
            for _ in range(3):
                h, state = unit.step(Tensor(rng.standard_normal((3, 6)) * 4.0), state)
                assert np.all(np.abs(h.data) < 1.0)

    def test_stack_depth_one_equals_plain_cell(self, rng):
        unit = DiaUnit(LstmCellConfig(variant="modified", r=2, stack_depth=1),
                       6, np.random.default_rng(4))
        y = Tensor(rng.standard_normal((2, 6)))
        state = unit.init_state(2)
        h_unit, new_state = unit.step(y, state)
        h_cell, c_cell = unit.cells[0].step(y, state.pairs[0][0], state.pairs[0][1])
        np.testing.assert_array_equal(h_unit.data, h_cell.data)
        np.testing.assert_array_equal(new_state.pairs[0][1].data, c_cell.data)

    def test_stacked_cells_have_private_parameters(self):
        unit = DiaUnit(LstmCellConfig(variant="light", r=2, stack_depth=3), 8,
                       np.random.default_rng(5))
        ids = [id(p) for p in unit.parameters().values()]
        assert len(ids) == len(set(ids))
        assert unit.weight_count() == 3 * cell_weight_formula("light", 8, 2)

    def test_state_never_leaks_across_calls(self, rng):
        unit = DiaUnit(LstmCellConfig(variant="standard"), 5,
                       np.random.default_rng(6))
        xs = [Tensor(rng.standard_normal((2, 5))) for _ in range(2)]

        def run(y):
            h, _ = unit.step(y, unit.init_state(2))
            return h.data.copy()

        first, second = run(xs[0]), run(xs[1])
        np.testing.assert_array_equal(run(xs[0]), first)
        np.testing.assert_array_equal(run(xs[1]), second)

    def test_dia_lstm_requires_sharing(self):
        cfg = SamConfig(kind="dia-lstm", sharing="per-block")
        with pytest.raises(ConfigError, match="recurrence"):
            cfg.validate(8)


class _OnesUnit:
    """Debug stand-in whose attention map is always exactly one."""

    def __init__(self, n):
        self.n = n

    def init_state(self, batch):
        return batch

    def step(self, y, state):
        return Tensor(np.ones(y.shape)), state


class TestDiaApply:
    def _blocks(self, rng, n=4, count=2):
        weights = [rng.standard_normal((n, n, 1, 1)) * 0.4 for _ in range(count)]

        def make(w):
            wt = Tensor(w, requires_grad=True)
            return lambda x: T.conv2d(x, wt)

        return [make(w) for w in weights]

    def test_identity_unit_equals_plain_residual(self, rng):
        blocks = self._blocks(rng)
        x0 = rng.standard_normal((2, 4, 3, 3))
        got = dia_apply(_OnesUnit(4), blocks, Tensor(x0.copy()))
        x = Tensor(x0.copy())
        for blk in blocks:
            x = T.add(x, blk(x))
        np.testing.assert_array_equal(got.data, x.data)

    def test_two_block_stage_matches_manual_unroll(self, rng):
        unit = DiaUnit(LstmCellConfig(variant="modified", r=2), 4,
                       np.random.default_rng(8))
        blocks = self._blocks(rng)
        x0 = rng.standard_normal((2, 4, 3, 3))

        got = dia_apply(unit, blocks, Tensor(x0.copy()))

        x = Tensor(x0.copy())
        state = unit.init_state(2)
        for blk in blocks:
            a = blk(x)
            h, state = dia_lstm_step(unit, T.global_avg_pool(a), state)
            x = T.add(x, T.channelwise_mul(a, h))
        np.testing.assert_array_equal(got.data, x.data)

    def test_no_skip_drops_identity_term(self, rng):
        unit = DiaUnit(LstmCellConfig(variant="light", r=2), 4,
                       np.random.default_rng(9))
        blocks = self._blocks(rng, count=1)
        x0 = rng.standard_normal((1, 4, 3, 3))
        with_skip = dia_apply(unit, blocks, Tensor(x0.copy()), use_skip=True)
        without = dia_apply(unit, blocks, Tensor(x0.copy()), use_skip=False)
        np.testing.assert_allclose(with_skip.data - without.data, x0, atol=1e-12)

    def test_trace_recording(self, rng):
        from dialstm.trace import AttentionTrace

        unit = DiaUnit(LstmCellConfig(variant="standard"), 4,
                       np.random.default_rng(10))
        blocks = self._blocks(rng, count=3)
        trace = AttentionTrace()
        trace.set_samples([0, 1])
        dia_apply(unit, blocks, Tensor(rng.standard_normal((2, 4, 3, 3))),
                  trace=trace, stage=0)
        assert len(trace.h) == 3 * 2
        assert trace.blocks(0) == [0, 1, 2]
