"""Tensor op semantics, backprop correctness, Adam, and checkpoint IO.

The gradient oracle throughout is central finite differences in float64;
analytic values asserted directly are hand-derived.
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vokenret.errors import FormatError, ShapeError, UsageError
from vokenret import numerics as nm
from vokenret.numerics import tensor as T


def _rand(rng, *shape):
    return nm.parameter(rng.standard_normal(shape))


class TestForwardSemantics:
    def test_softmax_symmetry(self):
        out = nm.softmax(nm.Tensor([0.0, 0.0]))
        np.testing.assert_allclose(out.data, [0.5, 0.5], atol=1e-7)

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        out = nm.softmax(nm.Tensor(rng.standard_normal((7, 13))))
        np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-6)

    def test_log_softmax_matches_log_of_softmax(self):
        rng = np.random.default_rng(1)
        x = nm.Tensor(rng.standard_normal((5, 9)))
        np.testing.assert_allclose(
            nm.log_softmax(x).data, np.log(nm.softmax(x).data), atol=1e-6
        )

    def test_masked_softmax_renormalizes_over_allowed(self):
        x = nm.Tensor([[1.0, 2.0, 3.0]])
        mask = np.array([[True, False, False]])
        p = nm.softmax(x, mask=mask).data
        assert p[0, 0] == 0.0
        np.testing.assert_allclose(p.sum(), 1.0, atol=1e-9)
        np.testing.assert_allclose(p[0, 2] / p[0, 1], math.e, rtol=1e-6)

    def test_fully_masked_row_rejected(self):
        with pytest.raises(UsageError):
            nm.softmax(nm.Tensor([[1.0, 2.0]]), mask=np.array([[True, True]]))

    def test_squared_l2_hand_value(self):
        # (0.9, 0.2) - (1, 0) -> 0.01 + 0.04
        diff = nm.sub(nm.Tensor([0.9, 0.2]), nm.Tensor([1.0, 0.0]))
        assert abs(nm.squared_l2(diff).item() - 0.05) < 1e-6

    def test_cross_entropy_uniform_is_log_v(self):
        for v in (3, 17, 771):
            logits = nm.Tensor(np.zeros((2, v)))
            out = nm.cross_entropy(logits, np.array([0, v - 1]))
            np.testing.assert_allclose(out.data, math.log(v), rtol=1e-6)

    def test_cross_entropy_rejects_bad_target(self):
        with pytest.raises(UsageError):
            nm.cross_entropy(nm.Tensor(np.zeros((1, 4))), np.array([4]))

    def test_matmul_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError) as err:
            nm.matmul(nm.Tensor(np.zeros((2, 3))), nm.Tensor(np.zeros((4, 2))))
        assert "(2, 3)" in str(err.value) and "(4, 2)" in str(err.value)

    def test_gather_rows_selects(self):
        table = nm.Tensor(np.arange(12.0).reshape(4, 3))
        out = nm.gather_rows(table, np.array([[3, 0], [1, 1]]))
        assert out.shape == (2, 2, 3)
        np.testing.assert_array_equal(out.data[0, 0], [9, 10, 11])

    def test_debug_mode_flags_nan(self):
        with nm.debug_checks():
            with pytest.raises(UsageError):
                nm.scale(nm.Tensor([np.nan]), 1.0)


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = nm.parameter(np.arange(6.0).reshape(2, 3))
        with nm.Graph() as g:
            loss = nm.sum_all(x)
        nm.backpropagate(g, loss)
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_squared_norm_gradient_is_2x(self):
        x = nm.parameter([1.0, -2.0, 0.5])
        with nm.Graph() as g:
            loss = nm.squared_l2(x)
        nm.backpropagate(g, loss)
        np.testing.assert_allclose(x.grad, 2 * x.data, atol=1e-6)

    def test_unreached_param_gets_zero_grad(self):
        x = nm.parameter([1.0])
        y = nm.parameter([2.0])
        with nm.Graph() as g:
            loss = nm.sum_all(x)
        nm.backpropagate(g, loss, params={"x": x, "y": y})
        np.testing.assert_array_equal(y.grad, [0.0])

    def test_non_scalar_loss_rejected(self):
        x = nm.parameter([1.0, 2.0])
        with nm.Graph() as g:
            out = nm.scale(x, 2.0)
        with pytest.raises(UsageError):
            nm.backpropagate(g, out)

    def test_gather_rows_scatters_only_selected(self):
        table = nm.parameter(np.ones((5, 2)))
        with nm.Graph() as g:
            out = nm.gather_rows(table, np.array([1, 1, 3]))
            loss = nm.sum_all(out)
        nm.backpropagate(g, loss)
        expected = np.zeros((5, 2))
        expected[1] = 2.0
        expected[3] = 1.0
        np.testing.assert_array_equal(table.grad, expected)

    def test_stop_gradient_blocks(self):
        x = nm.parameter([3.0])
        with nm.Graph() as g:
            loss = nm.sum_all(nm.stop_gradient(x))
        nm.backpropagate(g, loss, params={"x": x})
        np.testing.assert_array_equal(x.grad, [0.0])

    def test_no_grad_suppresses_recording(self):
        x = nm.parameter([1.0])
        with nm.Graph() as g:
            with nm.no_grad():
                nm.scale(x, 2.0)
            assert len(g) == 0

    def test_reused_tensor_accumulates(self):
        x = nm.parameter([2.0])
        with nm.Graph() as g:
            loss = nm.sum_all(nm.add(nm.scale(x, 3.0), nm.scale(x, 4.0)))
        nm.backpropagate(g, loss)
        np.testing.assert_allclose(x.grad, [7.0])


def _fd_case(build, seed, n_params=None):
    """Run finite_difference_check on a seeded case in float64 mode."""
    with nm.verification_mode():
        rng = np.random.default_rng(seed)
        params, f = build(rng)
        report = nm.finite_difference_check(f, params, eps=1e-4, tol=1e-4)
    assert report.passed, str(report)


OPS_CASES = {
    "matmul": lambda rng: (
        {"a": _rand(rng, 3, 4), "b": _rand(rng, 4, 2)},
        lambda p: nm.sum_all(nm.relu(nm.matmul(p["a"], p["b"]))),
    ),
    "batched_matmul": lambda rng: (
        {"a": _rand(rng, 2, 3, 4), "b": _rand(rng, 4, 3)},
        lambda p: nm.mean(nm.squared_l2(nm.matmul(p["a"], p["b"]))),
    ),
    "add_broadcast": lambda rng: (
        {"x": _rand(rng, 2, 5), "b": _rand(rng, 5)},
        lambda p: nm.sum_all(nm.relu(nm.add(p["x"], p["b"]))),
    ),
    "mul": lambda rng: (
        {"x": _rand(rng, 4, 3), "y": _rand(rng, 4, 3)},
        lambda p: nm.mean(nm.mul(p["x"], p["y"])),
    ),
    "softmax": lambda rng: (
        {"x": _rand(rng, 3, 6)},
        lambda p: nm.sum_all(nm.mul(nm.softmax(p["x"]), nm.Tensor(
            np.linspace(-1, 1, 18).reshape(3, 6)))),
    ),
    "cross_entropy_masked": lambda rng: (
        {"x": _rand(rng, 2, 5)},
        lambda p: nm.mean(nm.cross_entropy(
            p["x"], np.array([2, 1]),
            mask=np.array([[True, False, False, False, True]]))),
    ),
    "layer_norm": lambda rng: (
        {"x": _rand(rng, 3, 7), "g": _rand(rng, 7), "b": _rand(rng, 7)},
        lambda p: nm.mean(nm.squared_l2(nm.layer_norm(p["x"], p["g"], p["b"]))),
    ),
    "cross_entropy": lambda rng: (
        {"x": _rand(rng, 4, 9)},
        lambda p: nm.mean(nm.cross_entropy(p["x"], np.array([1, 0, 8, 4]))),
    ),
    "gather_rows": lambda rng: (
        {"t": _rand(rng, 6, 3)},
        lambda p: nm.sum_all(nm.squared_l2(nm.gather_rows(p["t"], np.array([0, 5, 0])))),
    ),
    "transpose_reshape": lambda rng: (
        {"x": _rand(rng, 2, 3, 4)},
        lambda p: nm.sum_all(nm.relu(nm.reshape(nm.transpose(p["x"], (2, 0, 1)), (4, 6)))),
    ),
    "repeat_rows": lambda rng: (
        {"x": _rand(rng, 3, 2)},
        lambda p: nm.mean(nm.squared_l2(nm.repeat_rows(p["x"], 4))),
    ),
    "composite_3layer": lambda rng: (
        {
            "w1": _rand(rng, 5, 8), "b1": _rand(rng, 8),
            "w2": _rand(rng, 8, 8), "b2": _rand(rng, 8),
            "w3": _rand(rng, 8, 3), "b3": _rand(rng, 3),
            "x": _rand(rng, 4, 5),
        },
        lambda p: nm.mean(nm.cross_entropy(
            nm.add(nm.matmul(nm.relu(nm.add(nm.matmul(nm.relu(
                nm.add(nm.matmul(p["x"], p["w1"]), p["b1"])), p["w2"]), p["b2"])),
                p["w3"]), p["b3"]),
            np.array([0, 2, 1, 1]))),
    ),
}


@pytest.mark.parametrize("name", sorted(OPS_CASES))
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradients_match_finite_differences(name, seed):
    _fd_case(OPS_CASES[name], seed)


def test_linear_function_gradcheck_near_machine_precision():
    with nm.verification_mode():
        rng = np.random.default_rng(7)
        c = rng.standard_normal(6)
        params = {"x": _rand(rng, 6)}
        report = nm.finite_difference_check(
            lambda p: nm.sum_all(nm.mul(p["x"], nm.Tensor(c))), params
        )
    assert report.max_error < 1e-8


class TestAdam:
    def test_zero_gradient_leaves_params_unchanged(self):
        p = {"w": nm.parameter([1.0, 2.0])}
        before = p["w"].data.copy()
        nm.adam_update(p, {"w": np.zeros(2)}, nm.AdamState(lr=0.1))
        np.testing.assert_array_equal(p["w"].data, before)

    def test_step1_magnitude_is_lr(self):
        # Bias-corrected first step: lr * g / (|g| + eps) ~ lr * sign(g)
        p = {"w": nm.parameter([1.0, -1.0, 5.0])}
        g = np.array([0.3, -0.7, 2.0])
        nm.adam_update(p, {"w": g.copy()}, nm.AdamState(lr=0.01))
        delta = p["w"].data - np.array([1.0, -1.0, 5.0])
        np.testing.assert_allclose(np.abs(delta), 0.01, rtol=1e-5)
        np.testing.assert_array_equal(np.sign(delta), -np.sign(g))

    def test_deterministic_trajectories(self):
        def run():
            rng = np.random.default_rng(3)
            p = {"w": nm.parameter(rng.standard_normal(4))}
            state = nm.AdamState(lr=0.05)
            for step in range(20):
                g = np.sin(p["w"].data + step)
                nm.adam_update(p, {"w": g}, state)
            return p["w"].data
        np.testing.assert_array_equal(run(), run())

    def test_missing_state_is_usage_error(self):
        with pytest.raises(UsageError):
            nm.adam_update({"w": nm.parameter([1.0])}, {"w": np.ones(1)}, None)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            nm.adam_update({"w": nm.parameter([1.0])}, {"w": np.ones(2)}, nm.AdamState())


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(11)
        params = {
            "emb.tok": rng.standard_normal((7, 3)).astype(np.float32),
            "scalar": np.float32(4.25).reshape(()),
            "dec.0.bias": rng.standard_normal(5).astype(np.float32),
        }
        path = tmp_path / "w.avgw"
        nm.save_weights(path, params)
        loaded = nm.load_weights(path)
        assert set(loaded) == set(params)
        for name in params:
            got = loaded[name]
            np.testing.assert_array_equal(got, np.asarray(params[name]))
            assert got.shape == np.asarray(params[name]).shape

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.avgw"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(FormatError):
            nm.load_weights(path)

    def test_truncation_rejected(self, tmp_path):
        path = tmp_path / "w.avgw"
        nm.save_weights(path, {"w": np.ones((4, 4), dtype=np.float32)})
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(FormatError):
            nm.load_weights(path)


def test_masked_log_softmax_grad_matches_compacted():
    """Gradient at allowed columns equals the unmasked gradient on the
    compacted submatrix; masked columns get exactly zero."""
    rng = np.random.default_rng(5)
    x = rng.standard_normal((3, 6))
    mask = np.array([False, True, False, False, True, False])
    keep = ~mask

    xm = nm.parameter(x)
    with nm.Graph() as g:
        out = nm.log_softmax(xm, mask=np.broadcast_to(mask, x.shape))
        loss = nm.sum_all(nm.cross_entropy(xm, np.array([0, 3, 5]),
                                           mask=np.broadcast_to(mask, x.shape)))
    nm.backpropagate(g, loss)
    assert np.all(out.data[:, mask] == -np.inf)
    np.testing.assert_array_equal(xm.grad[:, mask], 0.0)

    xc = nm.parameter(x[:, keep])
    with nm.Graph() as g2:
        loss2 = nm.sum_all(nm.cross_entropy(xc, np.array([0, 2, 3])))
    nm.backpropagate(g2, loss2)
    np.testing.assert_allclose(xm.grad[:, keep], xc.grad, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(
    rows=st.integers(2, 6),
    cols=st.integers(2, 6),
    seed=st.integers(0, 10_000),
)
def test_softmax_sums_to_one_property(rows, cols, seed):
    with nm.precision(np.float64):
        rng = np.random.default_rng(seed)
        x = nm.Tensor(rng.standard_normal((rows, cols)) * 10)
        p = nm.softmax(x).data
        assert np.all(np.abs(p.sum(axis=-1) - 1.0) < 1e-6)
        np.testing.assert_allclose(nm.log_softmax(x).data, np.log(p), atol=1e-6)
