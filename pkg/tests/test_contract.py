import json
import math

import numpy as np
import pytest

from conftest import forced_params, noisy_params
from ipcontract import contract, geometry, jsonio, mlp
from ipcontract.contract import (
    PacInputs,
    Sample,
    TrainConfig,
    TrainingDiverged,
    empirical_truncated_loss,
    erm_loss,
    evaluate_error,
    hinge,
    pac_bound,
    query,
    reg_loss,
    total_loss,
    train,
    truncated_hinge,
    truth_gauge,
)


def random_sample(rng, scale=1.0):
    return Sample(
        rng.normal(0.0, scale, 9), rng.normal(0.0, scale, 3), rng.normal(0.0, scale, 3)
    )


class TestSample:
    def test_shapes_enforced(self):
        with pytest.raises(ValueError):
            Sample(np.zeros(8), np.zeros(3), np.zeros(3))

    def test_finiteness_enforced(self):
        with pytest.raises(ValueError):
            Sample(np.zeros(9), np.array([np.nan, 0, 0]), np.zeros(3))


class TestHinge:
    @pytest.mark.parametrize("alpha", [0.05, 0.1, 0.5, 2.0])
    def test_formula_points(self, alpha):
        assert hinge(0.0, alpha) == 1.0
        assert hinge(-alpha, alpha) == 0.0
        assert hinge(alpha, alpha) == 2.0

    def test_alpha_must_be_positive(self):
        with pytest.raises(ValueError):
            hinge(0.5, 0.0)
        with pytest.raises(ValueError):
            truncated_hinge(0.5, -1.0)

    def test_truncated_points(self):
        alpha = 0.3
        assert truncated_hinge(0.0, alpha) == 1.0
        assert truncated_hinge(-2 * alpha, alpha) == 0.0
        assert truncated_hinge(-alpha / 2, alpha) == 0.5

    def test_truncated_bounds_and_dominance(self):
        rng = np.random.default_rng(0)
        for _ in range(500):
            x = rng.normal(0.0, 3.0)
            alpha = rng.uniform(0.05, 2.0)
            t = truncated_hinge(x, alpha)
            assert 0.0 <= t <= 1.0
            assert t >= (1.0 if x > 0 else 0.0)


class TestTruthGauge:
    def test_centered_truth(self):
        s = Sample(np.zeros(9), np.array([0.3, -0.2, 0.5]), np.zeros(3))
        params = forced_params(s.truth_c, np.eye(3))
        assert truth_gauge(params, s) == 0.0

    def test_unit_offset_boundary(self):
        s = Sample(np.zeros(9), np.array([0.3, -0.2, 0.5]), np.zeros(3))
        params = forced_params(s.truth_c + np.array([1.0, 0.0, 0.0]), np.eye(3))
        assert truth_gauge(params, s) == 1.0

    def test_bitwise_consistency_with_geometry(self):
        rng = np.random.default_rng(4)
        for trial in range(50):
            params = noisy_params(trial, input_dim=9, hidden=(64, 128), scale=0.05)
            s = random_sample(rng, scale=0.5)
            g = truth_gauge(params, s)
            e = query(params, s.state_c, s.perceived_c)
            assert g == geometry.gauge(e, s.truth_c)


class TestLosses:
    def test_erm_centered_zero(self):
        s = Sample(np.zeros(9), np.array([1.0, 2.0, 0.5]), np.zeros(3))
        params = forced_params(s.truth_c, np.eye(3))
        assert erm_loss(params, [s, s, s], alpha=0.5) == 0.0

    def test_erm_boundary_one(self):
        s = Sample(np.zeros(9), np.array([1.0, 0.0, 0.0]), np.zeros(3))
        params = forced_params(np.zeros(3), np.eye(3))  # g = 1 exactly
        assert erm_loss(params, [s] * 4, alpha=0.25) == 1.0

    def test_erm_equals_mean_of_per_sample(self):
        rng = np.random.default_rng(9)
        params = noisy_params(3, input_dim=9, hidden=(64, 128), scale=0.05)
        batch = [random_sample(rng, 0.5) for _ in range(17)]
        alpha = 0.3
        per_sample = [hinge(truth_gauge(params, s) - 1.0, alpha) for s in batch]
        assert erm_loss(params, batch, alpha) == pytest.approx(
            float(np.mean(per_sample)), rel=1e-12
        )

    def test_empty_batch_rejected(self):
        params = mlp.init(0, 9)
        with pytest.raises(ValueError):
            erm_loss(params, [], alpha=0.1)
        with pytest.raises(ValueError):
            reg_loss(params, [])
        with pytest.raises(ValueError):
            evaluate_error(params, [])

    def test_reg_identity_zero(self):
        s = Sample(np.zeros(9), np.zeros(3), np.zeros(3))
        params = forced_params(np.zeros(3), np.eye(3))
        assert reg_loss(params, [s, s]) == 0.0

    def test_reg_twice_identity(self):
        s = Sample(np.zeros(9), np.zeros(3), np.zeros(3))
        params = forced_params(np.zeros(3), 2.0 * np.eye(3))
        assert reg_loss(params, [s]) == pytest.approx(-math.log(64.0), abs=1e-12)

    def test_reg_matches_geometry_oracle(self):
        rng = np.random.default_rng(14)
        params = noisy_params(7, input_dim=9, hidden=(64, 128), scale=0.05)
        batch = [random_sample(rng, 0.5) for _ in range(11)]
        expected = []
        for s in batch:
            heads = mlp.forward(params, contract.net_input(s.state_c, s.perceived_c))
            expected.append(geometry.neg_log_det_sq(heads.shape_raw))
        assert reg_loss(params, batch) == pytest.approx(float(np.mean(expected)), rel=1e-12)

    def test_total_loss_composition(self):
        rng = np.random.default_rng(2)
        params = noisy_params(5, input_dim=9, hidden=(64, 128), scale=0.05)
        batch = [random_sample(rng, 0.5) for _ in range(8)]
        zero_lam = TrainConfig(alpha=0.2, lam=0.0)
        assert total_loss(params, batch, zero_lam) == pytest.approx(
            erm_loss(params, batch, 0.2), rel=1e-12
        )
        unit_lam = TrainConfig(alpha=0.2, lam=1.0)
        assert total_loss(params, batch, unit_lam) == pytest.approx(
            erm_loss(params, batch, 0.2) + reg_loss(params, batch), rel=1e-12
        )

    def test_erm_dominates_indicator(self):
        rng = np.random.default_rng(31)
        for trial in range(30):
            params = noisy_params(trial, input_dim=9, hidden=(5, 6), scale=0.3)
            batch = [random_sample(rng) for _ in range(12)]
            alpha = rng.uniform(0.05, 1.5)
            X, Y = contract.stack_samples(batch)
            zero_one = float(np.mean(contract.gauges(params, X, Y) > 1.0))
            assert zero_one <= erm_loss(params, batch, alpha) + 1e-12


class TestGradients:
    def test_total_loss_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(77)
        checked = 0
        attempt = 0
        while checked < 5:
            attempt += 1
            params = noisy_params(attempt, input_dim=4)
            X = rng.normal(0.0, 0.6, (3, 4))
            Y = rng.normal(0.0, 1.0, (3, 3))
            alpha, lam = 0.5, 0.05
            trace = mlp.forward_trace(params, X)
            pre_ok = all(np.min(np.abs(z)) > 1e-3 for z in trace.pre_acts)
            g = contract.gauges(params, X, Y)
            shapes = trace.out[:, 3:].reshape(-1, 3, 3)
            dets = np.abs(np.linalg.det(shapes))
            if not (
                pre_ok
                and np.all(np.abs(g - (1.0 - alpha)) > 1e-3)
                and np.all(g > 1e-3)
                and np.all(dets > 1e-2)
            ):
                continue
            checked += 1
            terms, grads = contract.loss_grads(params, X, Y, alpha, lam)
            flat = grads.flat()
            h = 1e-5
            k = 0
            for arr in params.weights + params.biases:
                it = np.nditer(arr, flags=["multi_index"])
                for _ in it:
                    idx = it.multi_index
                    orig = arr[idx]
                    arr[idx] = orig + h
                    up = contract.loss_terms(params, X, Y, alpha, lam).total
                    arr[idx] = orig - h
                    down = contract.loss_terms(params, X, Y, alpha, lam).total
                    arr[idx] = orig
                    fd = (up - down) / (2 * h)
                    a = flat[k]
                    assert abs(a - fd) / max(abs(a), abs(fd), 1e-4) <= 1e-4
                    k += 1


class TestTrain:
    def identical_dataset(self, n=64):
        s = Sample(
            np.array([0.1, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.5, 2.0]),
            np.array([1.02, 0.48, 2.05]),
            np.array([1.0, 0.5, 2.0]),
        )
        return [s] * n

    def test_one_point_problem_converges(self):
        data = self.identical_dataset()
        cfg = TrainConfig(alpha=0.5, lam=0.01, epochs=20, batch_size=16, seed=0,
                          train_fraction=1.0, slope=0.5)
        params, report = train(data, cfg)
        assert truth_gauge(params, data[0]) < 1.0
        assert report.final_train_error == 0.0

    def test_training_is_deterministic(self):
        rng = np.random.default_rng(0)
        data = [random_sample(rng, 0.5) for _ in range(96)]
        cfg = TrainConfig(epochs=3, batch_size=16, seed=11)
        _, r1 = train(data, cfg)
        _, r2 = train(data, cfg)
        assert r1.loss_curve == r2.loss_curve

    def test_dataset_smaller_than_batch_rejected(self):
        rng = np.random.default_rng(1)
        data = [random_sample(rng) for _ in range(8)]
        with pytest.raises(ValueError):
            train(data, TrainConfig(batch_size=64))

    def test_divergence_reports_term(self):
        huge = Sample(np.zeros(9), np.full(3, 1e200), np.zeros(3))
        data = [huge] * 64
        with pytest.raises(TrainingDiverged) as info, np.errstate(over="ignore"):
            train(data, TrainConfig(epochs=1, batch_size=64))
        assert info.value.term == "erm"

    def test_heldout_split_sizes(self):
        rng = np.random.default_rng(5)
        data = [random_sample(rng, 0.5) for _ in range(100)]
        _, report = train(data, TrainConfig(epochs=1, batch_size=16, train_fraction=0.8))
        assert report.n_train == 80
        assert report.n_heldout == 20
        assert report.heldout_error is not None

    def test_lambda_tradeoff_monotone(self):
        # volume (tracked by the penalty value) shrinks as lambda grows while
        # the empirical error grows, allowing one inversion per metric
        rng = np.random.default_rng(3)
        data = [
            Sample(
                np.concatenate([rng.normal(0, 0.5, 6), y + rng.normal(0, 0.02, 3)]),
                y,
                y + rng.normal(0, 0.02, 3),
            )
            for y in rng.normal(0.0, 1.0, (600, 3))
        ]
        volumes, errors = [], []
        for lam in (1e-4, 1e-3, 1e-2):
            cfg = TrainConfig(alpha=0.5, lam=lam, epochs=10, batch_size=16, seed=0,
                              slope=0.5, beta1=0.95)
            params, _ = train(data, cfg)
            volumes.append(reg_loss(params, data))
            errors.append(evaluate_error(params, data))
        vol_inversions = sum(1 for a, b in zip(volumes, volumes[1:]) if b > a + 1e-9)
        err_inversions = sum(1 for a, b in zip(errors, errors[1:]) if b < a - 1e-9)
        assert vol_inversions <= 1
        assert err_inversions <= 1


class TestEvaluate:
    def test_all_contained(self):
        s = Sample(np.zeros(9), np.array([0.2, 0.1, -0.3]), np.zeros(3))
        params = forced_params(s.truth_c, np.eye(3))
        assert evaluate_error(params, [s] * 10) == 0.0

    def test_all_outside(self):
        s = Sample(np.zeros(9), np.array([2.0, 0.0, 0.0]), np.zeros(3))
        params = forced_params(np.zeros(3), np.eye(3))  # g = 2
        assert evaluate_error(params, [s] * 10) == 1.0

    def test_boundary_is_not_an_error(self):
        s = Sample(np.zeros(9), np.array([1.0, 0.0, 0.0]), np.zeros(3))
        params = forced_params(np.zeros(3), np.eye(3))  # g = 1 exactly
        assert evaluate_error(params, [s]) == 0.0

    def test_truncated_loss_in_unit_interval(self):
        rng = np.random.default_rng(6)
        params = noisy_params(1, input_dim=9, hidden=(5, 6), scale=0.3)
        batch = [random_sample(rng) for _ in range(50)]
        value = empirical_truncated_loss(params, batch, alpha=0.2)
        assert 0.0 <= value <= 1.0


class TestPacBound:
    def test_reference_confidence(self):
        inp = PacInputs(0.0, 0.1, 1.0, 10508, 5000, 0.02)
        _, confidence = pac_bound(inp)
        assert confidence == pytest.approx(1.0 - 2.0 * math.exp(-4.0), abs=1e-12)
        assert round(confidence, 6) == 0.963369

    def test_zero_limit(self):
        bound, _ = pac_bound(PacInputs(0.0, 0.1, 0.0, 10508, 5000, 0.0))
        assert bound == 0.0

    def test_doubling_n_shrinks_middle_term(self):
        a = PacInputs(0.2, 0.1, 3.0, 10508, 4000, 0.0)
        b = PacInputs(0.2, 0.1, 3.0, 10508, 8000, 0.0)
        slack_a = pac_bound(a)[0] - 0.2
        slack_b = pac_bound(b)[0] - 0.2
        assert slack_b == pytest.approx(slack_a / math.sqrt(2.0), rel=1e-12)

    def test_monotonicities(self):
        base = PacInputs(0.1, 0.2, 2.0, 10508, 5000, 0.02)
        b0, c0 = pac_bound(base)
        assert pac_bound(PacInputs(0.2, 0.2, 2.0, 10508, 5000, 0.02))[0] > b0
        assert pac_bound(PacInputs(0.1, 0.2, 3.0, 10508, 5000, 0.02))[0] > b0
        assert pac_bound(PacInputs(0.1, 0.2, 2.0, 20000, 5000, 0.02))[0] > b0
        assert pac_bound(PacInputs(0.1, 0.2, 2.0, 10508, 10000, 0.02))[0] < b0
        assert pac_bound(PacInputs(0.1, 0.2, 2.0, 10508, 5000, 0.05))[0] > b0
        assert pac_bound(PacInputs(0.1, 0.2, 2.0, 10508, 10000, 0.02))[1] > c0
        assert pac_bound(PacInputs(0.1, 0.2, 2.0, 10508, 5000, 0.05))[1] > c0

    def test_validation(self):
        with pytest.raises(ValueError):
            PacInputs(1.5, 0.1, 1.0, 10, 10, 0.1)
        with pytest.raises(ValueError):
            PacInputs(0.1, -0.1, 1.0, 10, 10, 0.1)
        with pytest.raises(ValueError):
            PacInputs(0.1, 0.1, 1.0, 0, 10, 0.1)


class TestLipschitzEstimate:
    def test_safety_factor_scales(self):
        rng = np.random.default_rng(8)
        params = noisy_params(2, input_dim=9, hidden=(5, 6), scale=0.2)
        batch = [random_sample(rng) for _ in range(20)]
        one = contract.estimate_lipschitz(params, batch, safety=1.0)
        two = contract.estimate_lipschitz(params, batch, safety=2.0)
        assert one > 0.0
        assert two == pytest.approx(2.0 * one, rel=1e-12)


class TestQuery:
    def test_deterministic(self):
        params = noisy_params(0, input_dim=9, hidden=(64, 128), scale=0.05)
        state = np.linspace(-1, 1, 9)
        perceived = np.array([0.5, 0.1, 2.0])
        a = query(params, state, perceived)
        b = query(params, state, perceived)
        assert np.array_equal(a.center, b.center)
        assert np.array_equal(a.shape, b.shape)

    def test_degenerate_shape_surfaces(self):
        params = forced_params(np.zeros(3), np.zeros((3, 3)))
        with pytest.raises(geometry.DegenerateEllipsoidError):
            query(params, np.zeros(9), np.zeros(3))

    def test_json_round_trip_exact(self):
        params = noisy_params(5, input_dim=9, hidden=(64, 128), scale=0.05)
        e = query(params, np.linspace(0, 1, 9), np.array([1.0, -0.5, 2.0]))
        doc = jsonio.render(geometry.ellipsoid_to_dict(e))
        back = geometry.ellipsoid_from_dict(json.loads(doc))
        assert np.array_equal(back.center, e.center)
        assert np.array_equal(back.shape, e.shape)


class TestIo:
    def test_dataset_round_trip(self, tmp_path):
        rng = np.random.default_rng(19)
        samples = [random_sample(rng) for _ in range(25)]
        path = tmp_path / "data.jsonl"
        contract.write_dataset(path, samples)
        back = contract.read_dataset(path)
        assert len(back) == 25
        for a, b in zip(samples, back):
            assert np.array_equal(a.state_c, b.state_c)
            assert np.array_equal(a.truth_c, b.truth_c)
            assert np.array_equal(a.perceived_c, b.perceived_c)

    def test_dataset_write_is_byte_stable(self, tmp_path):
        rng = np.random.default_rng(23)
        samples = [random_sample(rng) for _ in range(10)]
        p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        contract.write_dataset(p1, samples)
        contract.write_dataset(p2, samples)
        assert p1.read_bytes() == p2.read_bytes()

    def test_model_round_trip(self, tmp_path):
        params = noisy_params(3, input_dim=9, hidden=(64, 128), scale=0.05)
        cfg = TrainConfig(seed=7)
        path = tmp_path / "model.json"
        contract.save_model(path, params, train_config=cfg,
                            dataset_fingerprint="sha256:abc", sim_config={"seed": 7})
        back, meta = contract.load_model(path)
        for a, b in zip(back.weights, params.weights):
            assert np.array_equal(a, b)
        assert meta["dataset_fingerprint"] == "sha256:abc"
        assert meta["train_config"]["alpha"] == cfg.alpha
        assert meta["sim_config"] == {"seed": 7}

    def test_model_format_checked(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"format": 99}')
        with pytest.raises(ValueError):
            contract.load_model(path)

    def test_train_config_round_trip(self):
        cfg = TrainConfig(alpha=0.5, lam=0.06, batch_size=16, slope=0.5,
                          beta1=0.95, settle_epochs=5)
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg
