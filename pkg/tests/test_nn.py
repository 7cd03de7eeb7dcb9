import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blip.nn import (
    QUANTIZED,
    Batch,
    Network,
    NetworkSpec,
    ScheduleState,
    backward,
    bounded_sgd_step,
    forward,
    log_softmax,
    lr_schedule,
    sgd_step,
)
from conftest import logistic_net, small_net


def _loss(net, x, y, task_id):
    logp = log_softmax(forward(net, x, task_id))
    return -logp[np.arange(len(y)), y].mean()


class TestLayout:
    def test_sizes_and_offsets(self):
        net = small_net()
        assert [l.name for l in net.layers] == ["fc1", "fc2", "head1", "head2"]
        assert net.num_params == 5 * 7 + 7 + 7 * 6 + 6 + 6 * 3 + 3 + 6 * 4 + 4
        assert net.backbone_size == 5 * 7 + 7 + 7 * 6 + 6
        assert net.head(2).offset == net.head(1).offset + 6 * 3 + 3

    def test_scale_is_range_over_root_fan_in(self):
        net = small_net()
        assert net.layers[0].scale == pytest.approx(6 / math.sqrt(5))
        assert net.head(1).scale == pytest.approx(6 / math.sqrt(6))

    def test_init_inside_range(self):
        net = Network.build(NetworkSpec(50, (100,), ((1, 10),)), rng=np.random.default_rng(0))
        for layer in net.layers:
            assert np.abs(net.params[layer.span]).max() <= layer.scale / math.sqrt(3)

    def test_unknown_head(self):
        with pytest.raises(KeyError, match="no such head"):
            forward(small_net(), np.zeros((1, 5)), 9)

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            NetworkSpec(0, (3,), ((1, 2),))
        with pytest.raises(ValueError):
            NetworkSpec(4, (3,), ((1, 2), (1, 3)))


class TestForward:
    def test_zero_weights_give_zero_logits(self):
        net = Network.build(NetworkSpec(4, (3,), ((1, 2),)))
        assert forward(net, np.ones((2, 4)), 1).tolist() == [[0.0, 0.0], [0.0, 0.0]]

    def test_identity_relu_example(self):
        # 2 -> 2 (identity) -> 1-layer head summing the hidden units
        net = Network.build(NetworkSpec(2, (2,), ((1, 2),)))
        fc1, head = net.layers
        net.params[fc1.span][:4] = [1.0, 0.0, 0.0, 1.0]
        net.params[head.span][:4] = [1.0, 0.0, 1.0, 0.0]
        out = forward(net, np.array([[1.0, -1.0], [2.0, -3.0], [0.5, 0.25]]), 1)
        # relu zeroes the negative unit: hidden [1, 0] for input [1, -1]
        assert out.tolist() == [[1.0, 0.0], [2.0, 0.0], [0.75, 0.0]]

    def test_non_finite_input(self):
        with pytest.raises(ValueError, match="non-finite"):
            forward(small_net(), np.full((1, 5), np.nan), 1)

    def test_quantized_close_to_raw(self):
        net = small_net(3, input_dim=20, hidden=(30, 25), heads=((1, 4), (2, 3)))
        x = np.random.default_rng(5).standard_normal((6, 20))
        diff = np.abs(forward(net, x, 1) - forward(net, x, 1, QUANTIZED)).max()
        assert 0 < diff < 1e-4

    def test_heads_are_isolated(self):
        net = small_net()
        x = np.random.default_rng(0).standard_normal((3, 5))
        before = forward(net, x, 1)
        net.params[net.head(2).span] += 1.0
        assert forward(net, x, 1).tolist() == before.tolist()

    def test_wrong_input_width(self):
        with pytest.raises(ValueError):
            forward(small_net(), np.zeros((2, 4)), 1)

    def test_deterministic_given_seed(self):
        a, b = small_net(11), small_net(11)
        assert a.params.tobytes() == b.params.tobytes()
        assert small_net(12).params.tobytes() != a.params.tobytes()


class TestBackward:
    def test_logistic_gradient_closed_form(self):
        # at theta=0 and x=1: p1 = 1/2, label 1, dL/dtheta = (p1 - 1) * h = -1/2
        net, idx = logistic_net(0.0)
        _, g = backward(net, Batch(np.array([[1.0]]), np.array([1]), 1))
        assert g[idx] == -0.5

    def test_uniform_logits_loss_is_log_k(self):
        net = Network.build(NetworkSpec(3, (4,), ((1, 7),)))
        loss, _ = backward(net, Batch(np.ones((5, 3)), np.arange(5), 1))
        assert loss == pytest.approx(math.log(7), abs=1e-15)

    def test_matches_finite_differences(self):
        net = small_net(3, input_dim=20, hidden=(30, 25), heads=((1, 4), (2, 3)))
        x = np.random.default_rng(5).standard_normal((6, 20))
        y = np.array([0, 1, 2, 3, 1, 2])
        _, g = backward(net, Batch(x, y, 1))
        active = np.concatenate([np.arange(net.backbone_size), np.arange(net.head(1).offset, net.head(2).offset)])
        h = 1e-5
        for i in np.random.default_rng(7).choice(active, 100, replace=False):
            p = net.params[i]
            net.params[i] = p + h
            up = _loss(net, x, y, 1)
            net.params[i] = p - h
            down = _loss(net, x, y, 1)
            net.params[i] = p
            numeric = (up - down) / (2 * h)
            if max(abs(numeric), abs(g[i])) < 1e-10:
                continue  # dead relu
            assert abs(numeric - g[i]) <= 1e-5 * max(abs(numeric), abs(g[i])), i

    def test_other_heads_get_zero_gradient(self):
        net = small_net()
        _, g = backward(net, Batch(np.ones((2, 5)), np.array([0, 2]), 1))
        assert not g[net.head(2).span].any()
        assert g[net.head(1).span].any()

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            backward(small_net(), Batch(np.ones((1, 5)), np.array([3]), 1))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(-1, 1))
    def test_gradient_independent_of_anything_but_params(self, seed, shift):
        # same params -> same gradient, whatever else happened to the network object
        net = small_net(seed)
        x = np.random.default_rng(seed).standard_normal((4, 5))
        batch = Batch(x, np.array([0, 1, 2, 0]), 1)
        _, g1 = backward(net, batch)
        other = net.copy()
        other.params[other.head(2).span] += shift
        _, g2 = backward(other, batch)
        g2[other.head(2).span] = 0
        assert g1.tobytes() == g2.tobytes()


class TestSteps:
    def test_sgd_example(self):
        net, idx = logistic_net(1.0)
        g = np.zeros_like(net.params)
        g[idx] = 0.5
        sgd_step(net, g, 0.05)
        assert net.params[idx] == 0.975

    def test_sgd_rejects_nonfinite(self):
        net, idx = logistic_net(1.0)
        g = np.zeros_like(net.params)
        g[idx] = np.nan
        with pytest.raises(FloatingPointError, match="diverged"):
            sgd_step(net, g, 0.05)

    @settings(max_examples=50)
    @given(st.integers(0, 2**31 - 1), st.floats(1e-3, 1.0))
    def test_fused_step_equals_sgd_then_clip(self, seed, lr):
        rng = np.random.default_rng(seed)
        net = small_net(seed)
        grads = rng.standard_normal(net.num_params)
        lo = net.params - rng.random(net.num_params) * 0.05
        hi = lo + rng.random(net.num_params) * 0.1
        expect = net.copy()
        sgd_step(expect, grads, lr)
        want = np.minimum(np.maximum(expect.params, lo), hi)
        bounded_sgd_step(net, grads, lr, lo, hi)
        assert net.params.tobytes() == want.tobytes()

    def test_fused_step_respects_spans(self):
        net = small_net()
        before = net.params.copy()
        n = net.num_params
        bounded_sgd_step(net, np.ones(n), 0.1, np.full(n, -9.0), np.full(n, 9.0), net.active_slices(1))
        assert (net.params[net.head(2).span] == before[net.head(2).span]).all()
        assert (net.params[: net.backbone_size] == before[: net.backbone_size] - 0.1).all()


class TestSchedule:
    def _decays(self, lr0, losses):
        state = ScheduleState(lr=lr0)
        decays, stop_epoch = [], None
        for loss in losses:
            before = state.lr
            _, stop = lr_schedule(state, loss)
            if state.lr < before:
                decays.append(state.epoch)
            if stop:
                stop_epoch = state.epoch
                break
        return decays, stop_epoch, state

    def test_flat_loss(self):
        decays, stop, state = self._decays(0.05, [1.0] * 300)
        # 0.05 / 3**k < 1e-4 first at k = 6
        assert decays == [6, 11, 16, 21, 26, 31]
        assert stop == 31
        assert state.lr == pytest.approx(0.05 / 3**6)

    def test_improving_loss_never_decays(self):
        decays, stop, _ = self._decays(0.05, [1.0 / (k + 1) for k in range(300)])
        assert decays == [] and stop == 200

    def test_tiny_initial_rate_stops_after_one_epoch(self):
        _, stop, _ = self._decays(5e-5, [1.0] * 10)
        assert stop == 1

    def test_improvement_resets_patience(self):
        losses = [1.0, 1.0, 1.0, 1.0, 0.5] + [0.5] * 5
        decays, _, _ = self._decays(0.05, losses)
        assert decays == [10]
