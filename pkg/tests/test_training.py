"""
Test suite.
"""

import importlib.util
import unittest
from dataclasses import replace
from unittest import mock

import numpy as np
import torch
from torch import optim

from utils import training
from utils.autodiff import DTYPE, ParameterStore
from utils.dynamics import InitialCondition, rk4_integrate
from utils.errors import ConfigurationError, ContractViolation, TrainingDivergedError
from utils.metrics import evaluate_solution
from utils.models import ModelConfig, checkpoint_dict, freeze_base, init_model
from utils.potential import sample_potential

TINY_MODEL = ModelConfig(hidden_layers=2, hidden_width=8, init_seed=1)
TINY_TRAINING = training.TrainingConfig(epochs=10, collocation_count=16, eval_points=20)
BASE_Y0S = (0.0, 0.5, 1.0)


def tiny_net(y0s=BASE_Y0S, model=TINY_MODEL):
    return init_model(model, [InitialCondition(y0) for y0 in y0s])


def zero_heads(net):
    for l in range(net.n_heads):
        for name in net.head_tensor_names(l):
            net.store.assign(name, torch.zeros(net.store.shape(name)))


class TestResidualMethods(unittest.TestCase):
    """
    Hamilton residuals and the PINN loss.
    """

    def setUp(self):
        self.free = sample_potential(0, K=0)
        self.potential = sample_potential(3, K=4)
        self.times = torch.linspace(0, 1, 11, dtype=DTYPE)

    def test_exactfreeparticlezero(self):
        """(t, y0, 1, 0) solves the free-particle equations exactly."""
        t = self.times
        u = torch.stack([t, torch.full_like(t, 0.3), torch.ones_like(t), torch.zeros_like(t)], dim=1)
        du = torch.stack([torch.ones_like(t), torch.zeros_like(t), torch.zeros_like(t), torch.zeros_like(t)], dim=1)
        self.assertTrue(torch.all(training.hamilton_residuals(u, du, self.free) == 0))

    def test_zeronetresiduals(self):
        """u = 0: u~ stays at (0, y0, 1, 0) so r = (-1, 0, 0, 0)."""
        net = tiny_net()
        zero_heads(net)
        residuals = training.residual_batch(net, 1, self.free, self.times)
        expected = torch.tensor([-1.0, 0.0, 0.0, 0.0], dtype=DTYPE).expand_as(residuals)
        self.assertTrue(torch.equal(residuals, expected))
        self.assertEqual(float(training.residual_loss(residuals)), 0.25)

    def test_residuallossarithmetic(self):
        residuals = torch.tensor([[1.0, -1.0, 0.0, 0.0]], dtype=DTYPE)
        self.assertEqual(float(training.residual_loss(residuals)), 0.5)

    def test_oraclesatisfiesequations(self):
        """RK4 states differentiated numerically leave a negligible residual."""
        trajectory = rk4_integrate(InitialCondition(0.4), self.potential, 1.0, 1e-3)
        du = np.gradient(trajectory.states, trajectory.times, axis=0, edge_order=2)
        residuals = training.hamilton_residuals(torch.as_tensor(trajectory.states), torch.as_tensor(du),
                                                self.potential)
        self.assertLess(float(training.residual_loss(residuals)), 1e-4)

    def test_duplicateheadsunchanged(self):
        net = tiny_net()
        single = training.pinn_loss(net, [1], self.potential, self.times)
        doubled = training.pinn_loss(net, [1, 1], self.potential, self.times)
        self.assertEqual(float(single), float(doubled))

    def test_pinnlossnonnegative(self):
        net = tiny_net()
        self.assertGreaterEqual(float(training.pinn_loss(net, range(3), self.potential, self.times)), 0.0)

    def test_emptyheadset(self):
        with self.assertRaises(ConfigurationError):
            training.pinn_loss(tiny_net(), [], self.potential, self.times)

    def test_evaluatesolutionexact(self):
        """The closed-form free-particle ray scores zero error against RK4."""
        def straight_ray(t):
            u = torch.stack([t, torch.full_like(t, 0.2), torch.ones_like(t), torch.zeros_like(t)], dim=1)
            du = torch.zeros_like(u)
            du[:, 0] = 1.0
            return u, du

        times = np.linspace(0.0, 1.0, 50)
        evaluation = evaluate_solution(straight_ray, InitialCondition(0.2), self.free, times)
        self.assertLessEqual(evaluation.max_error, 1e-12)
        self.assertEqual(evaluation.final_residual, 0.0)

    def test_samplingpolicies(self):
        generator = torch.Generator().manual_seed(0)
        uniform = training.sample_times(TINY_TRAINING, generator)
        self.assertEqual(len(uniform), 16)
        self.assertTrue(torch.all((uniform >= 0) & (uniform <= 1)))

        grid = training.sample_times(replace(TINY_TRAINING, sampling='fixed_grid'), generator)
        self.assertTrue(torch.equal(grid, torch.linspace(0, 1, 16, dtype=DTYPE)))

    def test_invalidtrainingconfig(self):
        with self.assertRaises(ConfigurationError):
            training.TrainingConfig(collocation_count=0)
        with self.assertRaises(ConfigurationError):
            training.TrainingConfig(sampling='sobol')


class TestAdamMethods(unittest.TestCase):
    """
    Adam updates over a ParameterStore.
    """

    def setUp(self):
        self.store = ParameterStore()
        self.store.add('w', [1.0, -2.0])
        self.store.add('f', [3.0], frozen=True)

    def test_firststep(self):
        """First bias-corrected step moves each entry by -lr * g / (|g| + eps)."""
        state = training.init_adam(self.store, lr=0.1)
        grad = torch.tensor([0.5, -4.0], dtype=DTYPE)
        training.adam_step(self.store, {'w': grad}, state, lr=0.1)
        expected = torch.tensor([1.0 - 0.1 * 0.5 / (0.5 + 1e-8), -2.0 + 0.1 * 4.0 / (4.0 + 1e-8)], dtype=DTYPE)
        self.assertTrue(torch.allclose(self.store['w'].detach(), expected, rtol=0, atol=1e-12))

    def test_zerogradient(self):
        state = training.init_adam(self.store)
        before = self.store.checksum()
        training.adam_step(self.store, {'w': torch.zeros(2, dtype=DTYPE)}, state)
        self.assertEqual(self.store.checksum(), before)

    def test_frozenuntouched(self):
        state = training.init_adam(self.store, ['w', 'f'])
        self.assertNotIn('f', state.params)
        for _ in range(5):
            training.adam_step(self.store, {'w': torch.ones(2, dtype=DTYPE)}, state)
        self.assertEqual(self.store['f'].item(), 3.0)
        with self.assertRaises(ConfigurationError):
            training.adam_step(self.store, {'f': torch.ones(1, dtype=DTYPE)}, state)

    def test_shapemismatch(self):
        state = training.init_adam(self.store)
        with self.assertRaises(ConfigurationError):
            training.adam_step(self.store, {'w': torch.zeros(3, dtype=DTYPE)}, state)


class TestTrainingMethods(unittest.TestCase):
    """
    Base, classical and transfer training loops.
    """

    def setUp(self):
        self.potential = sample_potential(0, K=3)

    def test_zeroepochs(self):
        net = tiny_net()
        before = net.store.checksum()
        report = training.train_base(net, self.potential, replace(TINY_TRAINING, epochs=0))
        self.assertEqual(report.loss_curve, [])
        self.assertEqual(report.stopped_epoch, 0)
        self.assertEqual(report.final_loss, report.initial_loss)
        self.assertEqual(net.store.checksum(), before)

    def test_deterministic(self):
        first, second = tiny_net(), tiny_net()
        report_a = training.train_base(first, self.potential, TINY_TRAINING)
        report_b = training.train_base(second, self.potential, TINY_TRAINING)
        self.assertEqual(report_a.loss_curve, report_b.loss_curve)
        self.assertEqual(first.store.checksum(), second.store.checksum())

    def test_reportinvariants(self):
        report = training.train_base(tiny_net(), self.potential, TINY_TRAINING)
        self.assertEqual(report.stopped_epoch, len(report.loss_curve))
        self.assertEqual(report.stopped_epoch, TINY_TRAINING.epochs)
        self.assertEqual(report.final_loss, report.loss_curve[-1])
        self.assertAlmostEqual(report.epochs_per_second, report.stopped_epoch / report.wall_clock_seconds)

    def test_curveisevaluationloss(self):
        net = tiny_net()
        report = training.train_base(net, self.potential, TINY_TRAINING)
        self.assertEqual(report.final_loss, training.evaluate_loss(net, range(3), self.potential, 1.0, 20))

    def test_lossdecreases(self):
        free = sample_potential(0, K=0)
        report = training.train_base(tiny_net(), free, replace(TINY_TRAINING, epochs=300))
        self.assertLess(report.final_loss, report.initial_loss)

    def test_earlystop(self):
        report = training.train_base(tiny_net(), self.potential, replace(TINY_TRAINING, loss_threshold=1e9))
        self.assertEqual(report.stopped_epoch, 1)

    def test_divergencecarriespartialreport(self):
        with mock.patch.object(training, 'evaluate_loss', side_effect=[0.5, 0.4, float('nan')]):
            with self.assertRaises(TrainingDivergedError) as ctx:
                training.train_base(tiny_net(), self.potential, TINY_TRAINING)
        self.assertEqual(ctx.exception.epoch, 2)
        self.assertEqual(ctx.exception.report.loss_curve, [0.4])
        self.assertIsNotNone(ctx.exception.report.error)

    def test_frozenbaserejected(self):
        net = freeze_base(tiny_net())
        with self.assertRaises(ContractViolation):
            training.train_base(net, self.potential, TINY_TRAINING)
        with self.assertRaises(ContractViolation):
            training.deqgan_train(net, self.potential, training.DeqganConfig(), TINY_TRAINING)

    def test_classical(self):
        net, report = training.train_classical(InitialCondition(0.3), self.potential, TINY_MODEL, TINY_TRAINING)
        self.assertEqual(net.n_heads, 1)
        self.assertEqual(len(report.loss_curve), TINY_TRAINING.epochs)
        self.assertTrue(report.label.startswith('classical'))

    def test_epochstothreshold(self):
        report = training.TrainingReport(loss_curve=[1.0, 0.5, 0.1, 0.05])
        self.assertEqual(training.epochs_to_threshold(report, 0.1), 3)
        self.assertIsNone(training.epochs_to_threshold(report, 0.01))

    def test_epochspersecond(self):
        calls = []
        rate = training.measure_epochs_per_second(calls.append, min_epochs=5, min_seconds=0.0)
        self.assertEqual(calls, [0, 1, 2, 3, 4])
        self.assertGreater(rate, 0.0)


class TestTransferMethods(unittest.TestCase):
    """
    Frozen-base transfer of new heads.
    """

    def setUp(self):
        self.potential = sample_potential(0, K=3)
        self.net = tiny_net()
        training.train_base(self.net, self.potential, TINY_TRAINING)

    def test_unfrozenrejected(self):
        with self.assertRaises(ContractViolation):
            training.transfer_train(self.net, [InitialCondition(0.2)], self.potential, TINY_TRAINING)

    def test_basechecksumunchanged(self):
        freeze_base(self.net)
        checksum = self.net.base_checksum()
        old_heads = [name for l in range(3) for name in self.net.head_tensor_names(l)]
        old = self.net.store.checksum(old_heads)

        new_ics = [InitialCondition(y0) for y0 in (0.25, 0.6, 0.9)]
        heads, reports = training.transfer_train(self.net, new_ics, self.potential, TINY_TRAINING)

        self.assertEqual(self.net.base_checksum(), checksum)
        self.assertEqual(self.net.store.checksum(old_heads), old)
        self.assertEqual(heads, [3, 4, 5])
        self.assertEqual([r.y0 for r in reports], [0.25, 0.6, 0.9])
        self.assertTrue(all(self.net.heads[l].role == 'transfer' for l in heads))
        self.assertTrue(all(len(r.loss_curve) == TINY_TRAINING.epochs for r in reports))

    def test_warmstart(self):
        """A head copied for an existing y0 starts at that head's loss."""
        freeze_base(self.net)
        expected = training.evaluate_loss(self.net, [1], self.potential, 1.0, TINY_TRAINING.eval_points)
        _, reports = training.transfer_train(self.net, [InitialCondition(0.5)], self.potential, TINY_TRAINING)
        self.assertAlmostEqual(reports[0].initial_loss, expected, delta=1e-12)

    def test_randominit(self):
        freeze_base(self.net)
        heads, _ = training.transfer_train(self.net, [InitialCondition(0.5)], self.potential,
                                           replace(TINY_TRAINING, epochs=0), init='random', seed=4)
        self.assertFalse(torch.equal(self.net.store[self.net.head_tensor_names(heads[0])[0]],
                                     self.net.store[self.net.head_tensor_names(1)[0]]))

    def test_divergedicdoesnotstopsweep(self):
        freeze_base(self.net)
        real_train = training._train

        def flaky(net, head_set, potential, config, names=None, dconfig=None, label='', y0=None):
            if y0 == 0.6:
                raise TrainingDivergedError(3, training.TrainingReport(loss_curve=[0.1, 0.2], stopped_epoch=2,
                                                                       y0=y0, error='non-finite'))
            return real_train(net, head_set, potential, config, names, dconfig, label, y0)

        new_ics = [InitialCondition(y0) for y0 in (0.25, 0.6, 0.9)]
        with mock.patch.object(training, '_train', side_effect=flaky):
            heads, reports = training.transfer_train(self.net, new_ics, self.potential, TINY_TRAINING)
        self.assertEqual(len(heads), 3)
        self.assertEqual([r.error is not None for r in reports], [False, True, False])

    def test_derivedseeds(self):
        seeds = {training.derive_seed(0, index) for index in range(100)}
        self.assertEqual(len(seeds), 100)
        self.assertEqual(training.derive_seed(5, 2), training.derive_seed(5, 2))

    def test_workermatchessequential(self):
        """A worker given the checkpoint payload fits the same head as the sequential sweep."""
        freeze_base(self.net)
        payload = checkpoint_dict(self.net)
        new_ics = [InitialCondition(y0) for y0 in (0.25, 0.6)]
        threads = torch.get_num_threads()
        self.addCleanup(torch.set_num_threads, threads)
        weight, bias, worker_report = training._transfer_worker(
            payload, 1, 0.6, self.potential, TINY_TRAINING, 'random', 4, list(range(3)), None)
        torch.set_num_threads(threads)

        heads, reports = training.transfer_train(self.net, new_ics, self.potential, TINY_TRAINING,
                                                 init='random', seed=4)
        weight_name, bias_name = self.net.head_tensor_names(heads[1])
        np.testing.assert_allclose(weight, self.net.store[weight_name].detach().numpy(), rtol=1e-10, atol=1e-14)
        np.testing.assert_allclose(bias, self.net.store[bias_name].detach().numpy(), rtol=1e-10, atol=1e-14)
        np.testing.assert_allclose(worker_report.loss_curve, reports[1].loss_curve, rtol=1e-10)
        self.assertEqual(worker_report.y0, 0.6)
        self.assertEqual(worker_report.label, reports[1].label)

    @unittest.skipUnless(importlib.util.find_spec('ray'), 'ray is not installed')
    def test_raysweepmatchessequential(self):
        import ray

        self.addCleanup(ray.shutdown)
        new_ics = [InitialCondition(y0) for y0 in (0.25, 0.6)]
        sequential, parallel = tiny_net(), tiny_net()
        training.train_base(sequential, self.potential, TINY_TRAINING)
        training.train_base(parallel, self.potential, TINY_TRAINING)
        freeze_base(sequential)
        freeze_base(parallel)

        _, first = training.transfer_train(sequential, new_ics, self.potential, TINY_TRAINING)
        heads, second = training.transfer_train(parallel, new_ics, self.potential, TINY_TRAINING, workers=2)

        self.assertEqual(heads, [3, 4])
        self.assertEqual(parallel.base_checksum(), sequential.base_checksum())
        for l in heads:
            for name in parallel.head_tensor_names(l):
                np.testing.assert_allclose(parallel.store[name].detach().numpy(),
                                           sequential.store[name].detach().numpy(), rtol=1e-10, atol=1e-14)
        for a, b in zip(first, second):
            np.testing.assert_allclose(a.loss_curve, b.loss_curve, rtol=1e-10)


class TestDeqganMethods(unittest.TestCase):
    """
    Adversarial training components.
    """

    def setUp(self):
        self.dconfig = training.DeqganConfig(seed=0)
        self.disc = training.build_discriminator(self.dconfig)
        self.noise = torch.Generator().manual_seed(0)

    def test_noiseschedule(self):
        self.assertEqual(self.dconfig.noise_at(0), 1e-2)
        self.assertEqual(self.dconfig.noise_at(1999), 1e-2)
        self.assertEqual(self.dconfig.noise_at(2000), 5e-3)
        self.assertEqual(self.dconfig.noise_at(4000), 2.5e-3)

    def test_discriminatorseparates(self):
        """Large residuals are told apart from noise within 200 steps."""
        opt = optim.Adam(self.disc.parameters(), lr=1e-2)
        fake = 1.0 + 0.1 * torch.randn(64, 4, generator=torch.Generator().manual_seed(1), dtype=DTYPE)
        for _ in range(200):
            _, accuracy = training.discriminator_step(self.disc, opt, fake, 1e-2, self.noise)
        self.assertGreater(accuracy, 0.99)

    def test_discriminatorchanceonexactsolution(self):
        """Zero residuals cannot be told apart from noise."""
        opt = optim.Adam(self.disc.parameters(), lr=1e-3)
        fake = torch.zeros(64, 4, dtype=DTYPE)
        accuracies = [training.discriminator_step(self.disc, opt, fake, 1e-2, self.noise)[1] for _ in range(200)]
        self.assertAlmostEqual(np.mean(accuracies), 0.5, delta=0.1)

    def test_deqgantrain(self):
        potential = sample_potential(0, K=3)
        first, second = tiny_net(), tiny_net()
        before = first.base_checksum()
        report_a = training.deqgan_train(first, potential, self.dconfig, replace(TINY_TRAINING, epochs=5))
        report_b = training.deqgan_train(second, potential, self.dconfig, replace(TINY_TRAINING, epochs=5))

        self.assertEqual(report_a.loss_curve, report_b.loss_curve)
        self.assertEqual(len(report_a.loss_curve), 5)
        self.assertNotEqual(first.base_checksum(), before)
        self.assertEqual(report_a.final_loss, training.evaluate_loss(first, range(3), potential, 1.0, 20))
        self.assertIn('deqgan', report_a.config)


if __name__ == '__main__':
    unittest.main()
