import math

import numpy as np
import numpy.testing as npt
import pytest

from signflow.backbone import (Metrics, Model, NetSpec, StageSpec, TrainConfig, build,
                               evaluate, parameter_count, topk_hits, train)
from signflow.errors import ConfigError, DimensionError, InputError, NumericError
from signflow.tensor import Tensor, softmax_cross_entropy


def tiny_spec(**kw):
    defaults = dict(num_classes=3, t=4, in_channels=2, frame_size=(8, 8),
                    stem_channels=8, stem_stride=1, stages=(StageSpec(1, 8),),
                    temporal="shift")
    defaults.update(kw)
    return NetSpec(**defaults)


def random_dataset(spec, n, seed=0):
    rng = np.random.default_rng(seed)
    return [(rng.uniform(0, 1, spec.clip_shape).astype(np.float32),
             int(rng.integers(0, spec.num_classes))) for _ in range(n)]


def expected_param_count(spec: NetSpec) -> int:
    """Closed-form count: convs (Co*Ci*k*k + Co), affines (2C), head (D*K + K)."""
    def conv(ci, co, k):
        return co * ci * k * k + co

    def affine(c):
        return 2 * c

    total = conv(spec.in_channels, spec.stem_channels, 3) + affine(spec.stem_channels)
    cin = spec.stem_channels
    for stage in spec.stages:
        for bi in range(stage.blocks):
            stride = stage.stride if bi == 0 else 1
            cout = stage.channels
            total += conv(cin, cout, 3) + affine(cout)
            total += conv(cout, cout, 3) + affine(cout)
            if cin != cout or stride != 1:
                total += conv(cin, cout, 1) + affine(cout)
            cin = cout
    total += cin * spec.num_classes + spec.num_classes
    return total


class TestBuild:
    def test_deterministic_from_seed(self):
        a = build(tiny_spec(), seed=5)
        b = build(tiny_spec(), seed=5)
        for pa, pb in zip(a.parameters(), b.parameters()):
            npt.assert_array_equal(pa.data, pb.data)
        c = build(tiny_spec(), seed=6)
        assert any(not np.array_equal(pa.data, pc.data)
                   for pa, pc in zip(a.parameters(), c.parameters()))

    def test_parameter_count_matches_closed_form(self):
        for spec in (tiny_spec(), NetSpec.micro(4), NetSpec.tiny(10)):
            assert parameter_count(build(spec, seed=0)) == expected_param_count(spec)

    def test_shift_adds_no_parameters(self):
        with_shift = parameter_count(build(tiny_spec(temporal="shift"), seed=0))
        without = parameter_count(build(tiny_spec(temporal="none"), seed=0))
        assert with_shift == without

    def test_action_adds_parameters(self):
        with_action = parameter_count(build(tiny_spec(temporal="action"), seed=0))
        without = parameter_count(build(tiny_spec(temporal="none"), seed=0))
        assert with_action > without

    def test_invalid_spec_rejected(self):
        with pytest.raises(ConfigError):
            tiny_spec(num_classes=1)
        with pytest.raises(ConfigError):
            tiny_spec(temporal="wavelet")
        with pytest.raises(ConfigError):
            # stem 6 channels not divisible by action ratio 4
            tiny_spec(temporal="action", stem_channels=6, stages=(StageSpec(1, 8),))


class TestForward:
    def test_logit_shape(self):
        model = build(tiny_spec(), seed=0)
        rng = np.random.default_rng(0)
        out = model.forward(rng.uniform(0, 1, (3, 4, 2, 8, 8)).astype(np.float32))
        assert out.shape == (3, 3)

    def test_batch_independence(self):
        model = build(tiny_spec(), seed=1, dtype=np.float64)
        rng = np.random.default_rng(1)
        clip = rng.uniform(0, 1, (1, 4, 2, 8, 8))
        single = model.forward(clip).numpy()
        stacked = model.forward(np.concatenate([clip, clip], axis=0)).numpy()
        npt.assert_allclose(stacked[0], stacked[1], rtol=1e-12)
        npt.assert_allclose(stacked[0], single[0], rtol=1e-9)

    def test_wrong_shape_rejected(self):
        model = build(tiny_spec(), seed=0)
        with pytest.raises(DimensionError):
            model.forward(np.zeros((1, 5, 2, 8, 8), dtype=np.float32))

    def test_shift_net_is_order_sensitive_none_net_is_not(self):
        rng = np.random.default_rng(3)
        clip = rng.uniform(0, 1, (1, 4, 2, 8, 8))
        permuted = clip[:, [2, 0, 3, 1]]
        shift_model = build(tiny_spec(temporal="shift"), seed=7, dtype=np.float64)
        none_model = build(tiny_spec(temporal="none"), seed=7, dtype=np.float64)
        shift_a = shift_model.forward(clip).numpy()
        shift_b = shift_model.forward(permuted).numpy()
        assert np.abs(shift_a - shift_b).max() > 1e-6
        none_a = none_model.forward(clip).numpy()
        none_b = none_model.forward(permuted).numpy()
        npt.assert_allclose(none_a, none_b, atol=1e-12)


class TestGradients:
    def test_full_net_parameter_gradients(self):
        # analytic grads of every parameter vs central differences
        spec = tiny_spec()
        model = build(spec, seed=2, dtype=np.float64)
        rng = np.random.default_rng(2)
        clip = Tensor(rng.uniform(0.05, 1, (1, *spec.clip_shape)))
        labels = np.array([1])

        loss = softmax_cross_entropy(model.forward(clip), labels)
        loss.backward()
        grads = {p.name: p.grad.copy() for p in model.parameters()}

        eps = 1e-5
        worst = 0.0
        for p in model.parameters():
            flat = p.data.reshape(-1)
            analytic = grads[p.name].reshape(-1)
            stride = max(1, flat.size // 8)  # spot-check a spread of coordinates
            for i in range(0, flat.size, stride):
                orig = flat[i]
                flat[i] = orig + eps
                hi = softmax_cross_entropy(model.forward(clip), labels).item()
                flat[i] = orig - eps
                lo = softmax_cross_entropy(model.forward(clip), labels).item()
                flat[i] = orig
                numeric = (hi - lo) / (2 * eps)
                denom = max(1.0, abs(analytic[i]), abs(numeric))
                worst = max(worst, abs(analytic[i] - numeric) / denom)
        assert worst <= 1e-4


class TestEvaluate:
    class OracleModel:
        """Perfect classifier stub implementing the forward protocol."""

        def __init__(self, labels_by_clip, k):
            self.labels = labels_by_clip
            self.k = k
            self.dtype = np.float32

        def forward(self, clips):
            logits = np.zeros((len(clips), self.k), dtype=np.float32)
            for i, clip in enumerate(np.asarray(clips)):
                logits[i, self.labels[round(float(clip.sum()))]] = 10.0
            return Tensor(logits)

    def test_oracle_model_scores_100(self):
        k = 6
        items, labels = [], {}
        for i in range(12):
            clip = np.full((2, 1, 2, 2), i / 8.0, dtype=np.float32)
            label = i % k
            items.append((clip, label))
            labels[round(float(clip.sum()))] = label
        m = evaluate(self.OracleModel(labels, k), items)
        assert m.prec1 == 100.0 and m.prec5 == 100.0
        assert m.loss <= 1e-3

    def test_k5_prec5_always_100(self):
        spec = tiny_spec(num_classes=3)  # K <= 5: pigeonhole
        model = build(spec, seed=0)
        ds = random_dataset(spec, 10, seed=4)
        assert evaluate(model, ds).prec5 == 100.0

    def test_uniform_random_logits_monte_carlo(self):
        rng = np.random.default_rng(8)
        n, k = 10_000, 4
        logits = rng.uniform(-1, 1, (n, k))
        labels = rng.integers(0, k, n)
        prec1 = 100.0 * topk_hits(logits, labels, 1) / n
        assert abs(prec1 - 25.0) <= 2.0

    def test_order_independent(self):
        spec = tiny_spec()
        model = build(spec, seed=3)
        ds = random_dataset(spec, 9, seed=5)
        a = evaluate(model, ds)
        b = evaluate(model, list(reversed(ds)))
        assert a == b

    def test_tie_break_prefers_lower_class(self):
        logits = np.zeros((1, 6))
        assert topk_hits(logits, np.array([0]), 1) == 1
        assert topk_hits(logits, np.array([5]), 1) == 0
        assert topk_hits(logits, np.array([4]), 5) == 1
        assert topk_hits(logits, np.array([5]), 5) == 0

    def test_prec1_le_prec5(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            logits = rng.uniform(-1, 1, (30, 8))
            labels = rng.integers(0, 8, 30)
            assert topk_hits(logits, labels, 1) <= topk_hits(logits, labels, 5)

    def test_empty_dataset_rejected(self):
        with pytest.raises(InputError):
            evaluate(build(tiny_spec(), seed=0), [])


class TestTrain:
    def test_lr_zero_keeps_weights(self):
        spec = tiny_spec()
        model = build(spec, seed=4)
        before = {p.name: p.data.copy() for p in model.parameters()}
        ds = random_dataset(spec, 4, seed=6)
        history = train(model, ds, TrainConfig(epochs=3, batch_size=2, lr=0.0, seed=1))
        for p in model.parameters():
            npt.assert_array_equal(p.data, before[p.name])
        assert len({h["loss"] for h in history}) == 1  # constant metrics

    def test_single_sample_overfits(self):
        spec = tiny_spec()
        model = build(spec, seed=5)
        ds = random_dataset(spec, 1, seed=7)
        history = train(model, ds, TrainConfig(epochs=120, batch_size=1, lr=0.05,
                                               weight_decay=0.0, seed=2))
        assert history[-1]["loss"] < 1e-3

    def test_two_sample_overfit_within_200_epochs(self):
        spec = tiny_spec()
        model = build(spec, seed=6)
        # distinguishable pair (iid noise washes out under global pooling)
        a = np.zeros(spec.clip_shape, dtype=np.float32)
        a[:, :, :4, :] = 1.0
        b = np.zeros(spec.clip_shape, dtype=np.float32)
        b[:, :, 4:, :] = 1.0
        history = train(model, [(a, 0), (b, 2)],
                        TrainConfig(epochs=200, batch_size=2, lr=0.05,
                                    weight_decay=0.0, seed=3))
        assert min(h["loss"] for h in history) < 0.01

    def test_reproducible_history_at_float64(self):
        spec = tiny_spec()
        ds = random_dataset(spec, 6, seed=9)
        cfg = TrainConfig(epochs=3, batch_size=2, lr=0.02, seed=4, precision="float64")
        h1 = train(build(spec, seed=7, dtype=np.float64), ds, cfg)
        h2 = train(build(spec, seed=7, dtype=np.float64), ds, cfg)
        assert h1 == h2

    def test_shuffle_order_differs_but_both_converge(self):
        spec = tiny_spec()
        ds = random_dataset(spec, 8, seed=10)
        cfg_a = TrainConfig(epochs=12, batch_size=4, lr=0.03, seed=5)
        cfg_b = TrainConfig(epochs=12, batch_size=4, lr=0.03, seed=99)
        h_a = train(build(spec, seed=8), ds, cfg_a)
        h_b = train(build(spec, seed=8), ds, cfg_b)
        assert h_a != h_b
        assert h_a[-1]["loss"] < h_a[0]["loss"]
        assert h_b[-1]["loss"] < h_b[0]["loss"]

    def test_nan_loss_aborts(self):
        spec = tiny_spec()
        model = build(spec, seed=9)
        model.head_w.data = np.full_like(model.head_w.data, np.nan)
        ds = random_dataset(spec, 2, seed=11)
        with pytest.raises(NumericError, match="epoch 0"):
            train(model, ds, TrainConfig(epochs=1, batch_size=2, seed=0))

    def test_label_out_of_range_rejected(self):
        spec = tiny_spec()
        ds = [(np.zeros(spec.clip_shape, dtype=np.float32), 3)]
        with pytest.raises(InputError):
            train(build(spec, seed=0), ds, TrainConfig(epochs=1, batch_size=1))


class TestSaveLoad:
    def test_roundtrip_preserves_outputs(self, tmp_path):
        spec = tiny_spec()
        model = build(spec, seed=10)
        model.save(tmp_path / "m.sgnf", tmp_path / "netspec.json")
        loaded = Model.load(tmp_path / "m.sgnf", tmp_path / "netspec.json")
        rng = np.random.default_rng(12)
        clip = rng.uniform(0, 1, (1, *spec.clip_shape)).astype(np.float32)
        npt.assert_array_equal(model.forward(clip).numpy(), loaded.forward(clip).numpy())

    def test_weight_file_roundtrips_bit_exact(self, tmp_path):
        from signflow.tensor import load_weights
        model = build(tiny_spec(), seed=11)
        p1, p2 = tmp_path / "a.sgnf", tmp_path / "b.sgnf"
        model.save(p1)
        loaded = build(tiny_spec(), seed=0)
        loaded.load_state_dict(load_weights(p1))
        loaded.save(p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_mismatched_weights_rejected(self, tmp_path):
        model = build(tiny_spec(), seed=0)
        model.save(tmp_path / "m.sgnf", tmp_path / "netspec.json")
        other = build(tiny_spec(stem_channels=16, stages=(StageSpec(1, 16),)), seed=0)
        from signflow.tensor import load_weights
        with pytest.raises((ConfigError, DimensionError)):
            other.load_state_dict(load_weights(tmp_path / "m.sgnf"))


class TestMetricsInvariants:
    def test_metrics_dict_shape(self):
        d = Metrics(prec1=50.0, prec5=100.0, loss=0.5).to_dict(epoch=3)
        assert list(d) == ["epoch", "prec1", "prec5", "loss"]
