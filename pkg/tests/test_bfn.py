import math

import numpy as np
import pytest

from sculptdrug import bfn
from sculptdrug.bfn import (
    BfnState,
    NoiseSchedule,
    coordinate_loss,
    discrete_time_loss,
    flow_sample_continuous,
    flow_sample_discrete,
    pocket_frame,
    sample_ligand,
    schedule_continuous,
    schedule_discrete,
    type_loss,
)
from sculptdrug.encoder import EncoderConfig, ScaOutput
from sculptdrug.errors import ValidationError
from sculptdrug.geometry import RbfConfig
from sculptdrug.io import AtomVocabulary
from sculptdrug.numerics import ParameterStore, Tensor, backward

from conftest import make_complex, random_rotation

# frozen by direct high-precision evaluation: (1 - 0.0009)^2 / 0.0018
WEIGHT_N1_I1_S003 = 554.5560055555556


def oracle_network(cx):
    """Stub returning the centered ground truth regardless of inputs."""
    com = cx.pocket.positions().mean(axis=0)
    x_star = cx.ligand.positions - com
    onehot = np.eye(9)[cx.ligand.types]

    def network(mu, theta, pocket, surface, t):
        return ScaOutput(Tensor(x_star.copy()), Tensor(onehot.copy()))

    return network


class TestScheduleContinuous:
    def test_zero_endpoint(self):
        beta, gamma = schedule_continuous(0.0, 0.03)
        assert beta == 0.0 and gamma == 0.0

    def test_unit_endpoint(self):
        _, gamma = schedule_continuous(1.0, 0.03)
        assert abs(gamma - 0.9991) < 1e-12

    def test_midpoint_identity(self):
        beta, gamma = schedule_continuous(0.5, 0.03)
        assert abs(gamma - 0.97) < 1e-12
        assert abs(beta / (1.0 + beta) - gamma) < 1e-12

    def test_out_of_range_rejected(self):
        with pytest.raises(ValidationError):
            schedule_continuous(1.5, 0.03)

    def test_verbatim_variant_differs(self):
        reconciled = schedule_continuous(0.5, 0.03)
        verbatim = schedule_continuous(0.5, 0.03, variant="verbatim")
        assert reconciled != verbatim


class TestScheduleDiscrete:
    def test_unit_time(self):
        beta_v, alpha = schedule_discrete(1.5, 10, t=1.0)
        assert beta_v == 1.5 and alpha is None

    def test_first_step_precision(self):
        _, alpha = schedule_discrete(1.5, 1000, i=1)
        assert abs(alpha - 1.5e-6) < 1e-18

    def test_telescoping_sum(self):
        for n in (1, 10, 1000):
            total = sum(schedule_discrete(1.5, n, i=i)[1] for i in range(1, n + 1))
            assert abs(total - 1.5) < 1e-12

    def test_exactly_one_query(self):
        with pytest.raises(ValidationError):
            schedule_discrete(1.5, 10)
        with pytest.raises(ValidationError):
            schedule_discrete(1.5, 10, t=0.5, i=3)


class TestFlowSampleContinuous:
    def test_zero_time_collapses_to_zero(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(5, 3))
        mu = flow_sample_continuous(x, 0.0, 0.03, rng)
        assert np.array_equal(mu, np.zeros((5, 3)))

    def test_terminal_mean(self):
        # Monte-Carlo moment oracle at t=1
        rng = np.random.default_rng(1)
        x = np.array([[2.0, -1.0, 0.5]])
        draws = np.stack([flow_sample_continuous(x, 1.0, 0.03, rng) for _ in range(100_000)])
        se = draws.std(axis=0) / math.sqrt(len(draws))
        assert np.all(np.abs(draws.mean(axis=0) - 0.9991 * x) < 3 * se + 1e-12)

    def test_midpoint_variance(self):
        rng = np.random.default_rng(2)
        x = np.zeros((1, 3))
        draws = np.stack([flow_sample_continuous(x, 0.5, 0.03, rng) for _ in range(100_000)])
        var = draws.var(axis=0)
        assert np.all(np.abs(var - 0.0291) < 0.05 * 0.0291)


class TestFlowSampleDiscrete:
    def test_zero_time_uniform(self):
        rng = np.random.default_rng(0)
        theta = flow_sample_discrete(np.array([0, 3]), 0.0, 1.5, 9, rng)
        assert np.abs(theta - 1.0 / 9).max() < 1e-15

    def test_high_accuracy_recovers_class(self):
        rng = np.random.default_rng(1)
        hits = 0
        for _ in range(10_000):
            theta = flow_sample_discrete(np.array([4]), 1.0, 50.0, 9, rng)
            hits += theta[0].argmax() == 4
        assert hits >= 9900

    def test_logit_gap_moment(self):
        # E[y_true] - E[y_other] = beta_v * K
        rng = np.random.default_rng(2)
        beta1, k = 1.5, 9
        gaps = []
        for _ in range(20_000):
            beta_v = beta1
            onehot = np.zeros((1, k))
            onehot[0, 3] = 1.0
            y = beta_v * (k * onehot - 1.0) + math.sqrt(beta_v * k) * rng.standard_normal((1, k))
            gaps.append(y[0, 3] - np.delete(y[0], 3).mean())
        se = np.std(gaps) / math.sqrt(len(gaps))
        assert abs(np.mean(gaps) - beta1 * k) < 3 * se

    def test_rows_on_simplex(self):
        rng = np.random.default_rng(3)
        theta = flow_sample_discrete(np.arange(5) % 9, 0.7, 1.5, 9, rng)
        assert np.abs(theta.sum(axis=1) - 1.0).max() < 1e-12
        assert np.all(theta > 0)


class TestCoordinateLoss:
    def test_zero_residual(self):
        x = np.random.default_rng(0).normal(size=(4, 3))
        assert coordinate_loss(x, x.copy(), 3, 10, 0.03).item() == 0.0

    def test_frozen_weight_value(self):
        loss = coordinate_loss(np.zeros((1, 3)), np.array([[1.0, 0.0, 0.0]]), 1, 1, 0.03)
        assert abs(loss.item() - WEIGHT_N1_I1_S003) / WEIGHT_N1_I1_S003 < 1e-9

    def test_quadratic_scaling(self):
        x = np.zeros((2, 3))
        base = coordinate_loss(x, x + 0.3, 5, 20, 0.03).item()
        doubled = coordinate_loss(x, x + 0.6, 5, 20, 0.03).item()
        assert abs(doubled - 4.0 * base) < 1e-9 * doubled

    def test_differentiable(self):
        pred = Tensor(np.array([[0.5, 0.0, 0.0]]))
        loss = coordinate_loss(np.zeros((1, 3)), pred, 1, 4, 0.03)
        backward(loss)
        assert pred.grad is not None and np.all(np.isfinite(pred.grad))


class TestTypeLoss:
    def test_one_hot_prediction_zero_loss(self):
        rng = np.random.default_rng(0)
        a = np.array([2, 5, 0])
        onehot = np.eye(9)[a]
        for _ in range(50):
            loss = type_loss(a, onehot, 3, 10, 1.5, 9, rng)
            assert loss.item() == 0.0

    def test_uniform_prediction_matches_integrated_kl(self):
        # 1-D numeric-integration oracle for K=2, uniform prediction
        beta1, n, i, k = 1.5, 1, 1, 2
        alpha = beta1 * (2 * i - 1) / n**2
        # likelihood ratio depends on u = y0 - y1 ~ N(2 alpha, 4 alpha) under the sender
        mean_u, var_u = 2 * alpha, 4 * alpha
        grid = np.linspace(mean_u - 12 * math.sqrt(var_u), mean_u + 12 * math.sqrt(var_u), 40_001)
        def normal_pdf(u, m, v):
            return np.exp(-((u - m) ** 2) / (2 * v)) / math.sqrt(2 * math.pi * v)
        p = normal_pdf(grid, mean_u, var_u)
        q = 0.5 * p + 0.5 * normal_pdf(grid, -mean_u, var_u)
        expected = np.trapezoid(p * np.log(p / q), grid)

        rng = np.random.default_rng(1)
        a = np.array([0])
        uniform = np.full((1, 2), 0.5)
        draws = [type_loss(a, uniform, i, n, beta1, k, rng).item() for _ in range(100_000)]
        assert abs(np.mean(draws) - expected) < 0.02 * expected

    def test_expectation_non_negative(self):
        rng = np.random.default_rng(2)
        v = rng.uniform(0.05, 1.0, size=(3, 9))
        v /= v.sum(axis=1, keepdims=True)
        a = np.array([1, 7, 4])
        draws = [type_loss(a, v, 2, 8, 1.5, 9, rng).item() for _ in range(10_000)]
        se = np.std(draws) / math.sqrt(len(draws))
        assert np.mean(draws) > -3 * se

    def test_differentiable(self):
        rng = np.random.default_rng(3)
        v = Tensor(np.full((2, 9), 1.0 / 9))
        loss = type_loss(np.array([0, 1]), v, 2, 4, 1.5, 9, rng)
        backward(loss)
        assert v.grad is not None and np.all(np.isfinite(v.grad))


class TestDiscreteTimeLoss:
    def test_oracle_stub_zero_for_every_step(self, toy_complex):
        network = oracle_network(toy_complex)
        store = ParameterStore()
        schedule = NoiseSchedule(steps=100)
        vocab = AtomVocabulary()
        cfg = EncoderConfig()
        for trial in range(100):
            rng = np.random.default_rng(trial)
            breakdown = discrete_time_loss(toy_complex, store, cfg, vocab, schedule, rng, network=network)
            assert breakdown.total.item() == 0.0
            assert breakdown.loss_x.item() == 0.0

    def test_frozen_rng_identical_breakdowns(self, toy_complex):
        network = oracle_network(toy_complex)
        store = ParameterStore()
        schedule = NoiseSchedule(steps=50)
        vocab = AtomVocabulary()
        cfg = EncoderConfig()
        first = discrete_time_loss(toy_complex, store, cfg, vocab, schedule, np.random.default_rng(9), network=network)
        second = discrete_time_loss(toy_complex, store, cfg, vocab, schedule, np.random.default_rng(9), network=network)
        assert first.step == second.step and first.t == second.t
        assert first.total.item() == second.total.item()

    def test_breakdown_consistency(self, toy_complex):
        store = ParameterStore()
        vocab = AtomVocabulary()
        schedule = NoiseSchedule(steps=20)

        def half_oracle(mu, theta, pocket, surface, t):
            # slightly wrong positions, correct types
            com = toy_complex.pocket.positions().mean(axis=0)
            return ScaOutput(
                Tensor(toy_complex.ligand.positions - com + 0.1),
                Tensor(np.eye(9)[toy_complex.ligand.types]),
            )

        breakdown = discrete_time_loss(
            toy_complex, store, EncoderConfig(), vocab, schedule, np.random.default_rng(1), network=half_oracle
        )
        assert breakdown.loss_x.item() > 0.0
        assert breakdown.loss_v.item() == 0.0
        assert abs(breakdown.total.item() - breakdown.loss_x.item() - breakdown.loss_v.item()) < 1e-12
        assert 1 <= breakdown.step <= 20


class TestSampler:
    def test_oracle_convergence(self, toy_complex):
        com = toy_complex.pocket.positions().mean(axis=0)
        x_star = toy_complex.ligand.positions - com
        onehot = np.eye(9)[toy_complex.ligand.types]
        final_mus = []

        def network(mu, theta, pocket, surface, t):
            if t == 1.0:
                final_mus.append(np.array(mu))
            return ScaOutput(Tensor(x_star.copy()), Tensor(onehot.copy()))

        store = ParameterStore()
        vocab = AtomVocabulary()
        schedule = NoiseSchedule(sigma1=0.03, beta1=1.5, steps=100)
        errors = []
        for run in range(100):
            rng = np.random.default_rng(run)
            ligand = sample_ligand(
                toy_complex.pocket, toy_complex.surface, x_star.shape[0], 100,
                store, EncoderConfig(), vocab, schedule, rng, network=network,
            )
            assert np.array_equal(ligand.types, toy_complex.ligand.types)
            errors.append(np.linalg.norm(final_mus[-1] - 0.9991 * x_star, axis=1).mean())
            assert np.abs(ligand.positions - toy_complex.ligand.positions).max() < 1e-9
        assert np.mean(errors) < 0.1

    def test_single_step_degenerate(self, toy_complex):
        network = oracle_network(toy_complex)
        store = ParameterStore()
        ligand = sample_ligand(
            toy_complex.pocket, toy_complex.surface, toy_complex.ligand.size, 1,
            store, EncoderConfig(), AtomVocabulary(), NoiseSchedule(steps=1),
            np.random.default_rng(0), network=network,
        )
        assert np.abs(ligand.positions - toy_complex.ligand.positions).max() < 1e-9

    def test_rigid_motion_same_stream(self, toy_complex):
        # with a conditioning-equivariant network, the whole sampling run
        # transforms rigidly under the same noise stream
        def equivariant_network_for(cx):
            def network(mu, theta, pocket, surface, t):
                anchors = pocket.positions()[: mu.shape[0]]
                return ScaOutput(Tensor(anchors * 0.8), Tensor(np.full((mu.shape[0], 9), 1.0 / 9)))

            return network

        store = ParameterStore()
        vocab = AtomVocabulary()
        schedule = NoiseSchedule(steps=25)
        base = sample_ligand(
            toy_complex.pocket, toy_complex.surface, 3, 25, store, EncoderConfig(), vocab,
            schedule, np.random.default_rng(4), network=equivariant_network_for(toy_complex),
        )
        rot = random_rotation(11)
        shift = np.array([1.5, -2.0, 0.7])
        moved = sample_ligand(
            toy_complex.pocket.transformed(rot, shift), toy_complex.surface.transformed(rot, shift),
            3, 25, store, EncoderConfig(), vocab, schedule, np.random.default_rng(4),
            network=equivariant_network_for(toy_complex),
        )
        assert np.abs(moved.positions - (base.positions @ rot.T + shift)).max() < 1e-6

    def test_theta_simplex_every_step(self, toy_complex):
        thetas = []
        com = toy_complex.pocket.positions().mean(axis=0)
        x_star = toy_complex.ligand.positions - com

        def network(mu, theta, pocket, surface, t):
            thetas.append(np.array(theta))
            return ScaOutput(Tensor(x_star.copy()), Tensor(np.eye(9)[toy_complex.ligand.types]))

        store = ParameterStore()
        sample_ligand(
            toy_complex.pocket, toy_complex.surface, x_star.shape[0], 30, store,
            EncoderConfig(), AtomVocabulary(), NoiseSchedule(steps=30),
            np.random.default_rng(5), network=network,
        )
        assert len(thetas) == 31
        for theta in thetas:
            assert np.abs(theta.sum(axis=1) - 1.0).max() < 1e-9


class TestStateValidation:
    def test_theta_must_be_simplex(self):
        with pytest.raises(ValidationError):
            BfnState(np.zeros((1, 3)), np.array([[0.4, 0.4]]), 1)

    def test_schedule_validation(self):
        with pytest.raises(ValidationError):
            NoiseSchedule(sigma1=1.5)
        with pytest.raises(ValidationError):
            NoiseSchedule(beta1=0.0)
        with pytest.raises(ValidationError):
            NoiseSchedule(variant="bogus")

    def test_pocket_frame_centering(self, toy_complex):
        pocket, surface, com = pocket_frame(toy_complex.pocket, toy_complex.surface)
        assert np.abs(pocket.positions().mean(axis=0)).max() < 1e-9
        assert np.abs(surface.positions() + com - toy_complex.surface.positions()).max() < 1e-12
