"""
Multi-head PINN model definitions.

One shared base MLP reads the scalar time t; L linear heads read the last
hidden activation and emit four raw outputs u_l = (u_x, u_y, u_px, u_py).
Each head is bound to one plane-wave initial condition z_l(0).

=================================================================
Layer                                    Output Shape
=================================================================
MultiHeadNetwork
├─base_0      affine + activation        [n, hidden_width]
├─base_1      affine + activation        [n, hidden_width]
|                  ... (hidden_layers) ...
├─base_{H-1}  affine + activation        [n, hidden_width]
├─head_0      affine                     [n, 4]
|                  ... (L heads) ...
└─head_{L-1}  affine                     [n, 4]
=================================================================

The reparametrised output satisfies the initial condition exactly:

    u~(t)    = z(0) + (1 - e^-t) u(t)
    du~/dt   = e^-t u(t) + (1 - e^-t) du/dt
"""

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
from torch import nn

from utils.autodiff import DTYPE, ACTIVATIONS, DualBatch, ParameterStore, activation_forward, affine_forward
from utils.dynamics import InitialCondition
from utils.errors import ConfigurationError

N_OUTPUTS = 4
HEAD_INITS = ('copy_nearest', 'random')
TIE_TOLERANCE = 1e-12


@dataclass
class ModelConfig:
    hidden_layers: int = 5
    hidden_width: int = 40
    activation: str = 'tanh'
    init_seed: int = 0

    def __post_init__(self):
        if self.hidden_layers < 1 or self.hidden_width < 1:
            raise ConfigurationError(
                f'Need hidden_layers >= 1 and hidden_width >= 1, got {self.hidden_layers}x{self.hidden_width}')
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f'Unsupported activation {self.activation!r}')


@dataclass
class Head:
    """Head metadata. `role` is 'base' or 'transfer'."""
    ic: InitialCondition
    role: str = 'base'
    potential_hash: str = ''

    @property
    def y0(self):
        return self.ic.y0


def _base_names(i):
    return f'base_{i}_weight', f'base_{i}_bias'


def _head_names(l):
    return f'head_{l}_weight', f'head_{l}_bias'


def _lecun_normal(fan_in, fan_out, generator):
    return torch.randn(fan_in, fan_out, generator=generator, dtype=DTYPE) / fan_in**0.5


def _random_head(width, generator):
    weight = 0.1 * torch.randn(width, N_OUTPUTS, generator=generator, dtype=DTYPE) / width**0.5
    return weight, torch.zeros(N_OUTPUTS, dtype=DTYPE)


class MultiHeadNetwork(nn.Module):
    """
    Shared base + linear heads over one ParameterStore.

    Use `init_model` to build one.
    """

    def __init__(self, config, store, heads, frozen_base=False):
        super().__init__()
        self.config = config
        self.store = store
        self.heads = list(heads)
        self.frozen_base = frozen_base

    @property
    def n_heads(self):
        return len(self.heads)

    def base_tensor_names(self):
        return [name for i in range(self.config.hidden_layers) for name in _base_names(i)]

    def head_tensor_names(self, head_index):
        self._check_head(head_index)
        return list(_head_names(head_index))

    def base_checksum(self):
        return self.store.checksum(self.base_tensor_names())

    def head_y0s(self):
        return [head.y0 for head in self.heads]

    def _check_head(self, head_index):
        if not 0 <= head_index < self.n_heads:
            raise ConfigurationError(f'Head index {head_index} out of range for {self.n_heads} heads')


def init_model(config, ics):
    """Deterministic in (config, ics)."""
    if not ics:
        raise ConfigurationError('init_model needs at least one initial condition')

    generator = torch.Generator().manual_seed(config.init_seed)
    store = ParameterStore()
    fan_in = 1
    for i in range(config.hidden_layers):
        weight_name, bias_name = _base_names(i)
        store.add(weight_name, _lecun_normal(fan_in, config.hidden_width, generator))
        store.add(bias_name, torch.randn(config.hidden_width, generator=generator, dtype=DTYPE) / fan_in**0.5)
        fan_in = config.hidden_width

    for l in range(len(ics)):
        weight, bias = _random_head(config.hidden_width, generator)
        weight_name, bias_name = _head_names(l)
        store.add(weight_name, weight)
        store.add(bias_name, bias)

    return MultiHeadNetwork(config, store, [Head(ic) for ic in ics])


def _as_times(times):
    return torch.as_tensor(times, dtype=DTYPE).reshape(-1)


def base_forward(net, times, tape=None):
    """Shared representation: last hidden activation as a DualBatch."""
    hidden = DualBatch.from_times(_as_times(times))
    for i in range(net.config.hidden_layers):
        weight_name, bias_name = _base_names(i)
        hidden = affine_forward(tape, hidden, net.store[weight_name], net.store[bias_name])
        hidden = activation_forward(tape, hidden, net.config.activation)
    return hidden


def head_forward(net, head_index, features, tape=None):
    """Linear head on precomputed base features."""
    weight_name, bias_name = net.head_tensor_names(head_index)
    return affine_forward(tape, features, net.store[weight_name], net.store[bias_name])


def raw_forward(net, head_index, times, tape=None):
    """Raw outputs u_l and du_l/dt for a batch of times."""
    net._check_head(head_index)
    return head_forward(net, head_index, base_forward(net, times, tape), tape)


def reparametrize(ic, times, raw):
    """Applies u~ = z(0) + (1 - e^-t) u to a raw DualBatch."""
    t = _as_times(times)[:, None]
    decay = torch.exp(-t)
    z0 = torch.as_tensor(ic.as_array(), dtype=DTYPE)
    u_tilde = z0 + (1 - decay) * raw.values
    du_tilde = decay * raw.values + (1 - decay) * raw.tangents
    return u_tilde, du_tilde


def reparametrized_forward(net, head_index, times, tape=None):
    """(u~, du~/dt), each [n x 4]."""
    raw = raw_forward(net, head_index, times, tape)
    return reparametrize(net.heads[head_index].ic, times, raw)


def freeze_base(net):
    """Marks base tensors frozen. Idempotent; heads untouched."""
    net.store.freeze(net.base_tensor_names())
    net.frozen_base = True
    return net


def nearest_head(net, y0, among=None):
    """Index of the head closest in y0; ties go to the lower y0."""
    candidates = list(range(net.n_heads)) if among is None else list(among)
    if not candidates:
        return None
    distances = {l: abs(net.heads[l].y0 - y0) for l in candidates}
    best = min(distances.values())
    tied = [l for l in candidates if distances[l] <= best + TIE_TOLERANCE]
    return min(tied, key=lambda l: net.heads[l].y0)


def attach_head(net, ic, init='copy_nearest', seed=None, among=None, role='transfer', potential_hash=''):
    """
    Appends a head bound to `ic` and returns its index.

    `init='copy_nearest'` copies the weights of the closest existing head
    (restricted to `among` if given), falling back to `random` when there is
    none. `init='random'` draws a fresh head from `seed`.
    """
    if init not in HEAD_INITS:
        raise ConfigurationError(f'Unknown head init {init!r}, expected one of {HEAD_INITS}')

    source = nearest_head(net, ic.y0, among) if init == 'copy_nearest' else None
    if source is not None:
        src_weight, src_bias = _head_names(source)
        weight = net.store[src_weight].detach().clone()
        bias = net.store[src_bias].detach().clone()
    else:
        seed = net.config.init_seed + 7919 * (net.n_heads + 1) if seed is None else seed
        weight, bias = _random_head(net.config.hidden_width, torch.Generator().manual_seed(seed))

    head_index = net.n_heads
    weight_name, bias_name = _head_names(head_index)
    net.store.add(weight_name, weight)
    net.store.add(bias_name, bias)
    net.heads.append(Head(ic, role=role, potential_hash=potential_hash))
    return head_index


###################################
# Checkpoints
###################################

def checkpoint_dict(net, **meta):
    payload = {'config': asdict(net.config),
               'frozen_base': net.frozen_base,
               'heads': [{'y0': head.y0,
                          'role': head.role,
                          'potential_hash': head.potential_hash,
                          'tensors': list(_head_names(l))}
                         for l, head in enumerate(net.heads)],
               **meta}
    payload.update(net.store.to_dict())
    return payload


def network_from_dict(payload):
    """Returns (net, meta) where meta holds every extra checkpoint key."""
    config = ModelConfig(**payload['config'])
    store = ParameterStore.from_dict(payload)
    heads = [Head(InitialCondition(h['y0']), h.get('role', 'base'), h.get('potential_hash', ''))
             for h in payload['heads']]
    net = MultiHeadNetwork(config, store, heads, frozen_base=payload.get('frozen_base', False))
    known = {'config', 'frozen_base', 'heads', 'tensors'}
    return net, {k: v for k, v in payload.items() if k not in known}


def save_checkpoint(net, path, **meta):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as handle:
        json.dump(checkpoint_dict(net, **meta), handle)


def load_checkpoint(path):
    with open(path, encoding='utf-8') as handle:
        return network_from_dict(json.load(handle))
