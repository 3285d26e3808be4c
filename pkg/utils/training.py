"""
Training of multi-head PINNs on Hamilton's equations.

Contains:

- residuals and the mean squared residual loss
- `adam_step` over a ParameterStore (frozen tensors skipped)
- base multi-head training, classical single-head training
- frozen-base transfer fine-tuning of new heads
- DEQGAN: residuals are "fake" samples, zero-centred noise is "real"

One epoch = sample collocation times + forward + backward + optimizer step
for every active head. Reported losses are always the mean squared residual
on a fixed evaluation grid so curves compare across sampling policies and
between FFNN and DEQGAN.
"""

import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn, optim
from torch.nn import functional as F

from utils.autodiff import DTYPE, GradientTape, backward
from utils.dynamics import InitialCondition
from utils.errors import ConfigurationError, ContractViolation, DivergenceError, TrainingDivergedError
from utils.models import attach_head, base_forward, head_forward, init_model, network_from_dict, checkpoint_dict, reparametrize
from utils.potential import grad_potential_torch, potential_hash

SAMPLING = ('uniform_resample', 'fixed_grid')


@dataclass
class TrainingConfig:
    epochs: int = 20000
    collocation_count: int = 100
    t_end: float = 1.0
    learning_rate: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    sampling: str = 'uniform_resample'
    seed: int = 0
    loss_threshold: float = None
    eval_points: int = 200
    verbose: bool = False
    log_every: int = 1000
    log_dir: str = None

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.collocation_count < 1:
            raise ConfigurationError(f'collocation_count must be >= 1, got {self.collocation_count}')
        if not self.learning_rate > 0:
            raise ConfigurationError(f'learning_rate must be positive, got {self.learning_rate}')
        if not self.t_end > 0:
            raise ConfigurationError(f't_end must be positive, got {self.t_end}')
        if self.epochs < 0:
            raise ConfigurationError(f'epochs must be non-negative, got {self.epochs}')
        if self.sampling not in SAMPLING:
            raise ConfigurationError(f'Unknown sampling {self.sampling!r}, expected one of {SAMPLING}')


@dataclass
class DeqganConfig:
    noise_std: float = 1e-2
    noise_decay: float = 0.5
    noise_decay_every: int = 2000
    discriminator_layers: tuple = (32, 32, 32)
    negative_slope: float = 0.2
    generator_lr: float = 1e-3
    discriminator_lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    seed: int = 0

    def __post_init__(self):
        self.discriminator_layers = tuple(self.discriminator_layers)
        self.betas = tuple(self.betas)
        if not self.noise_std > 0:
            raise ConfigurationError(f'noise_std must be positive, got {self.noise_std}')

    def noise_at(self, epoch):
        return self.noise_std * self.noise_decay ** (epoch // self.noise_decay_every)


@dataclass
class TrainingReport:
    """
    `loss_curve[e]` is the evaluation-grid loss after epoch e+1.

    `initial_loss` is the same quantity before the first epoch.
    """
    loss_curve: list = field(default_factory=list)
    wall_clock_seconds: float = 0.0
    epochs_per_second: float = 0.0
    final_loss: float = None
    stopped_epoch: int = 0
    initial_loss: float = None
    config: dict = field(default_factory=dict)
    label: str = ''
    y0: float = None
    error: str = None

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, payload):
        return cls(**payload)

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8') as handle:
            json.dump(self.to_dict(), handle)

    @classmethod
    def load(cls, path):
        with open(path, encoding='utf-8') as handle:
            return cls.from_dict(json.load(handle))


###################################
# Residuals and loss
###################################

def sample_times(config, generator):
    """Collocation times in [0, t_end] per the sampling policy."""
    if config.sampling == 'fixed_grid':
        return torch.linspace(0, config.t_end, config.collocation_count, dtype=DTYPE)
    return config.t_end * torch.rand(config.collocation_count, generator=generator, dtype=DTYPE)


def eval_grid(t_end, n=200):
    return torch.linspace(0, t_end, n, dtype=DTYPE)


def hamilton_residuals(u_tilde, du_tilde, potential):
    """
    r1 = dx/dt - px, r2 = dy/dt - py, r3 = dpx/dt + dV/dx, r4 = dpy/dt + dV/dy.

    Works on any proposed solution given as values and t-derivatives [n x 4].
    """
    grad_v = grad_potential_torch(potential, u_tilde[:, :2])
    return torch.cat([du_tilde[:, :2] - u_tilde[:, 2:], du_tilde[:, 2:] + grad_v], dim=1)


def _features(net, times, tape):
    # Frozen base: no graph needed through the base.
    if net.frozen_base:
        with torch.no_grad():
            return base_forward(net, times, tape)
    return base_forward(net, times, tape)


def _head_residuals(net, head_index, features, potential, times, tape):
    raw = head_forward(net, head_index, features, tape)
    u_tilde, du_tilde = reparametrize(net.heads[head_index].ic, times, raw)
    residuals = hamilton_residuals(u_tilde, du_tilde, potential)
    if not torch.all(torch.isfinite(residuals)):
        raise DivergenceError(f'Non-finite residuals for head {head_index}')
    return residuals


def residual_batch(net, head_index, potential, times, tape=None):
    """[n x 4] residuals of one head at the given times."""
    net._check_head(head_index)
    times = torch.as_tensor(times, dtype=DTYPE).reshape(-1)
    return _head_residuals(net, head_index, _features(net, times, tape), potential, times, tape)


def residual_loss(residuals):
    """Mean over samples and the four components of squared residuals."""
    return torch.mean(residuals**2)


def _all_residuals(net, head_set, potential, times, tape):
    times = torch.as_tensor(times, dtype=DTYPE).reshape(-1)
    features = _features(net, times, tape)
    return [_head_residuals(net, l, features, potential, times, tape) for l in head_set]


def pinn_loss(net, head_set, potential, times, tape=None):
    """Mean over heads, times and components of squared residuals."""
    head_set = list(head_set)
    if not head_set:
        raise ConfigurationError('pinn_loss needs at least one head')
    return torch.stack([residual_loss(r) for r in _all_residuals(net, head_set, potential, times, tape)]).mean()


def evaluate_loss(net, head_set, potential, t_end, n=200):
    """Evaluation-grid loss as a float (no graph)."""
    with torch.no_grad():
        return float(pinn_loss(net, head_set, potential, eval_grid(t_end, n)))


###################################
# Optimizer
###################################

@dataclass
class AdamState:
    """Named parameters and the torch Adam holding their moments."""
    params: dict
    optimizer: optim.Adam


def init_adam(store, names=None, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
    """Adam state over the trainable tensors of `store` (or the named subset)."""
    trainable = store.trainable()
    if names is not None:
        trainable = {name: trainable[name] for name in names if name in trainable}
    params = dict(trainable)
    opt = optim.Adam(list(params.values()) or [torch.zeros(1, dtype=DTYPE, requires_grad=True)],
                     lr=lr, betas=betas, eps=eps)
    return AdamState(params, opt)


def adam_step(params, grads, state, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
    """
    One bias-corrected Adam update of `params` (a ParameterStore).

    Frozen tensors are skipped even when they sit in the state.
    """
    for name, grad in grads.items():
        if name not in state.params or state.params[name] is not params[name]:
            raise ConfigurationError(f'Adam state does not track tensor {name!r}')
        if tuple(grad.shape) != tuple(state.params[name].shape):
            raise ConfigurationError(
                f'Gradient shape {tuple(grad.shape)} does not match {name!r} {tuple(state.params[name].shape)}')

    for name, p in state.params.items():
        p.grad = grads.get(name) if p.requires_grad else None
    for group in state.optimizer.param_groups:
        group.update(lr=lr, betas=tuple(betas), eps=eps)
    state.optimizer.step()
    for p in state.params.values():
        p.grad = None
    return state


###################################
# DEQGAN components
###################################

def build_discriminator(dconfig):
    """Dense leaky-ReLU classifier on single 4-component residual samples."""
    layers = []
    width = 4
    with torch.random.fork_rng():
        torch.manual_seed(dconfig.seed)
        for hidden in dconfig.discriminator_layers:
            layers += [nn.Linear(width, hidden), nn.LeakyReLU(dconfig.negative_slope)]
            width = hidden
        layers.append(nn.Linear(width, 1))
        model = nn.Sequential(*layers)
    return model.to(DTYPE)


def discriminator_step(disc, disc_opt, fake, noise_std, generator):
    """
    One update separating noise ("real", label 1) from residuals ("fake").

    Returns (loss, accuracy) with accuracy over the joint real+fake batch.
    """
    fake = fake.detach()
    real = noise_std * torch.randn(fake.shape, generator=generator, dtype=DTYPE)
    logits_real = disc(real)
    logits_fake = disc(fake)
    loss = (F.binary_cross_entropy_with_logits(logits_real, torch.ones_like(logits_real))
            + F.binary_cross_entropy_with_logits(logits_fake, torch.zeros_like(logits_fake)))

    disc_opt.zero_grad()
    loss.backward()
    disc_opt.step()

    with torch.no_grad():
        correct = (logits_real > 0).sum() + (logits_fake <= 0).sum()
        accuracy = float(correct) / (len(logits_real) + len(logits_fake))
    return float(loss), accuracy


def generator_loss(disc, fake):
    """Non-saturating generator loss: make residuals look real."""
    logits = disc(fake)
    return F.binary_cross_entropy_with_logits(logits, torch.ones_like(logits))


###################################
# Training loops
###################################

def make_epoch(net, head_set, potential, config, names=None, dconfig=None):
    """
    Returns `epoch(index) -> float` doing one full training epoch.

    `names` restricts the optimized tensors (default: all trainable).
    With `dconfig` the epoch is a DEQGAN discriminator + generator update.
    """
    head_set = list(head_set)
    sampler = torch.Generator().manual_seed(config.seed)
    lr = config.learning_rate if dconfig is None else dconfig.generator_lr
    betas = config.betas if dconfig is None else dconfig.betas
    state = init_adam(net.store, names, lr, betas, config.eps)

    if dconfig is None:
        def epoch(index):
            tape = GradientTape()
            loss = pinn_loss(net, head_set, potential, sample_times(config, sampler), tape)
            grads = backward(tape, loss, net.store)
            adam_step(net.store, {n: grads[n] for n in state.params}, state, lr, betas, config.eps)
            return float(loss)
        return epoch

    disc = build_discriminator(dconfig)
    disc_opt = optim.Adam(disc.parameters(), lr=dconfig.discriminator_lr, betas=dconfig.betas)
    noise = torch.Generator().manual_seed(dconfig.seed)

    def epoch(index):
        tape = GradientTape()
        fake = torch.cat(_all_residuals(net, head_set, potential, sample_times(config, sampler), tape))
        discriminator_step(disc, disc_opt, fake, dconfig.noise_at(index), noise)
        loss = generator_loss(disc, fake)
        grads = backward(tape, loss, net.store)
        adam_step(net.store, {n: grads[n] for n in state.params}, state, lr, betas, config.eps)
        return float(residual_loss(fake.detach()))

    return epoch


def _summary_writer(config, label):
    if not config.log_dir:
        return None
    try:
        from torch.utils.tensorboard import SummaryWriter
    except ImportError:
        print('tensorboard not installed, scalar logging disabled')
        return None
    return SummaryWriter(log_dir=str(Path(config.log_dir) / (label or 'run')))


def _report(curve, start, config, label, y0, initial_loss, dconfig=None, error=None):
    wall = time.perf_counter() - start
    run_config = asdict(config)
    if dconfig is not None:
        run_config['deqgan'] = asdict(dconfig)
    return TrainingReport(loss_curve=list(curve),
                          wall_clock_seconds=wall,
                          epochs_per_second=len(curve) / wall if wall > 0 else 0.0,
                          final_loss=curve[-1] if curve else initial_loss,
                          stopped_epoch=len(curve),
                          initial_loss=initial_loss,
                          config=run_config,
                          label=label,
                          y0=y0,
                          error=error)


def _train(net, head_set, potential, config, names=None, dconfig=None, label='', y0=None):
    """Shared epoch loop: train, evaluate on the fixed grid, early-stop, report."""
    head_set = list(head_set)
    writer = _summary_writer(config, label)
    start = time.perf_counter()
    curve = []
    initial_loss = evaluate_loss(net, head_set, potential, config.t_end, config.eval_points)

    if config.verbose:
        print(f'{label or "Training"}: {len(head_set)} head(s), {config.epochs} epochs')

    epoch = make_epoch(net, head_set, potential, config, names, dconfig) if config.epochs else None
    for index in range(config.epochs):
        try:
            epoch(index)
            loss = evaluate_loss(net, head_set, potential, config.t_end, config.eval_points)
            if not np.isfinite(loss):
                raise DivergenceError(f'Non-finite evaluation loss {loss}')
        except DivergenceError as err:
            report = _report(curve, start, config, label, y0, initial_loss, dconfig, error=str(err))
            raise TrainingDivergedError(index + 1, report) from err

        curve.append(loss)
        if writer is not None:
            writer.add_scalar('residual_l2', loss, index + 1)
        if config.verbose and (index + 1) % config.log_every == 0:
            print(f'Epoch {index + 1}: loss = {loss:.3e}')
        if config.loss_threshold is not None and loss <= config.loss_threshold:
            break

    if writer is not None:
        writer.close()
    if config.verbose:
        print('Training completed', '\n')
    return _report(curve, start, config, label, y0, initial_loss, dconfig)


def train_base(net, potential, config, heads=None, label='base'):
    """Trains base and heads jointly on every head (or `heads`)."""
    if net.frozen_base:
        raise ContractViolation('train_base needs an unfrozen base')
    head_set = range(net.n_heads) if heads is None else heads
    return _train(net, head_set, potential, config, label=label)


def deqgan_train(net, potential, dconfig, config, heads=None, label='base_deqgan'):
    """Adversarial multi-head training; the report curve is the L2 residual."""
    if net.frozen_base:
        raise ContractViolation('deqgan_train needs an unfrozen base')
    head_set = range(net.n_heads) if heads is None else heads
    return _train(net, head_set, potential, config, dconfig=dconfig, label=label)


def train_classical(ic, potential, model_config, config, dconfig=None):
    """Single-head network trained from scratch. Returns (net, report)."""
    net = init_model(model_config, [ic])
    label = f'classical_y0={ic.y0:.4f}'
    if dconfig is None:
        return net, train_base(net, potential, config, label=label)
    return net, deqgan_train(net, potential, dconfig, config, label=label)


###################################
# Transfer
###################################

def derive_seed(seed, index):
    """Independent per-IC stream derived from (seed, index)."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def _transfer_head(net, index, ic, potential, config, init, seed, among, dconfig):
    head_seed = derive_seed(config.seed if seed is None else seed, index)
    head = attach_head(net, ic, init=init, seed=head_seed, among=among,
                       role='transfer', potential_hash=potential_hash(potential))
    head_config = replace(config, seed=derive_seed(config.seed, index))
    label = f'transfer_y0={ic.y0:.4f}'
    try:
        report = _train(net, [head], potential, head_config,
                        names=net.head_tensor_names(head), dconfig=dconfig, label=label, y0=ic.y0)
    except TrainingDivergedError as err:
        report = err.report
        if config.verbose:
            print(f'{label} diverged at epoch {err.epoch}')
    return head, report


def _transfer_worker(payload, index, y0, potential, config, init, seed, among, dconfig):
    torch.set_num_threads(1)
    net, _ = network_from_dict(payload)
    head, report = _transfer_head(net, index, InitialCondition(y0), potential, config, init, seed, among, dconfig)
    weight_name, bias_name = net.head_tensor_names(head)
    return net.store[weight_name].detach().numpy(), net.store[bias_name].detach().numpy(), report


def transfer_train(frozen_net, new_ics, potential, config, init='copy_nearest', seed=None,
                   dconfig=None, workers=1):
    """
    Fits one new head per IC with the base frozen.

    Heads are warm-started from the nearest head present before the sweep.
    A diverged IC keeps its partial report (with `error` set) and the sweep
    continues. Returns (head_indices, reports).
    """
    if not frozen_net.frozen_base:
        raise ContractViolation('transfer_train needs a frozen base; call freeze_base first')

    checksum = frozen_net.base_checksum()
    among = range(frozen_net.n_heads)
    heads, reports = [], []

    if workers <= 1:
        for index, ic in enumerate(new_ics):
            head, report = _transfer_head(frozen_net, index, ic, potential, config, init, seed, among, dconfig)
            heads.append(head)
            reports.append(report)
    else:
        import ray
        ray.init(num_cpus=workers, ignore_reinit_error=True, include_dashboard=False)
        remote = ray.remote(_transfer_worker)
        payload = ray.put(checkpoint_dict(frozen_net))
        futures = [remote.remote(payload, index, ic.y0, potential, config, init, seed, list(among), dconfig)
                   for index, ic in enumerate(new_ics)]
        for ic, (weight, bias, report) in zip(new_ics, ray.get(futures)):
            head = attach_head(frozen_net, ic, init='random', seed=0,
                               role='transfer', potential_hash=potential_hash(potential))
            weight_name, bias_name = frozen_net.head_tensor_names(head)
            frozen_net.store.assign(weight_name, weight)
            frozen_net.store.assign(bias_name, bias)
            heads.append(head)
            reports.append(report)

    if frozen_net.base_checksum() != checksum:
        raise ContractViolation('Base tensors changed during transfer')
    return heads, reports


###################################
# Timing helpers
###################################

def epochs_to_threshold(report, tau):
    """First epoch count at which the loss is <= tau, else None."""
    for index, loss in enumerate(report.loss_curve):
        if loss <= tau:
            return index + 1
    return None


def measure_epochs_per_second(epoch, min_epochs=200, min_seconds=30.0):
    """Runs `epoch` until both budgets are met; returns epochs/sec."""
    done = 0
    start = time.perf_counter()
    while done < min_epochs or time.perf_counter() - start < min_seconds:
        epoch(done)
        done += 1
    return done / (time.perf_counter() - start)
