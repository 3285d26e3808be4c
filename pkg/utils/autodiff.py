"""
Derivative machinery for networks with a single scalar input t.

Two derivatives are needed to train on Hamilton's equations:

- d(output)/dt        forward mode: every layer carries a `DualBatch` of
                      (values, tangents), tangents being d(value)/dt.
- d(loss)/d(params)   reverse mode over the combined value + tangent
                      computation, replayed by torch autograd.

A `GradientTape` lives for one training step. Primitive ops applied through
`affine_forward` / `activation_forward` are recorded on it and `backward`
consumes it.

Everything is float64 on CPU.
"""

import hashlib
import json
from dataclasses import dataclass

import torch
from torch import nn

from utils.errors import ConfigurationError, ContractViolation

DTYPE = torch.float64

# name: (phi(x), phi'(x) given x and phi(x))
ACTIVATIONS = {
    'tanh': (torch.tanh, lambda x, y: 1 - y**2),
    'sin': (torch.sin, lambda x, y: torch.cos(x)),
}


class ParameterStore(nn.Module):
    """
    Ordered collection of named float64 tensors with a frozen flag each.

    Frozen tensors have `requires_grad=False`: autograd never produces a
    gradient for them and the optimizer never sees them.
    """

    def __init__(self):
        super().__init__()
        self.tensors = nn.ParameterDict()

    def add(self, name, data, frozen=False):
        """Registers a new tensor. Names are unique."""
        if name in self.tensors:
            raise ConfigurationError(f'Tensor {name!r} already exists')
        data = torch.as_tensor(data, dtype=DTYPE).clone()
        self.tensors[name] = nn.Parameter(data, requires_grad=not frozen)
        return self.tensors[name]

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def __len__(self):
        return len(self.tensors)

    def names(self):
        return list(self.tensors.keys())

    def shape(self, name):
        return tuple(self.tensors[name].shape)

    def is_frozen(self, name):
        return not self.tensors[name].requires_grad

    def freeze(self, names):
        for name in names:
            self.tensors[name].requires_grad_(False)

    def trainable(self):
        """Non-frozen tensors, in store order."""
        return {name: p for name, p in self.tensors.items() if p.requires_grad}

    def assign(self, name, data):
        """Overwrites tensor values in place. Shapes never change."""
        data = torch.as_tensor(data, dtype=DTYPE)
        if tuple(data.shape) != self.shape(name):
            raise ConfigurationError(
                f'Shape mismatch for {name!r}: {tuple(data.shape)} vs {self.shape(name)}')
        with torch.no_grad():
            self.tensors[name].copy_(data)

    def n_params(self, names=None):
        names = self.names() if names is None else names
        return sum(self.tensors[n].numel() for n in names)

    def checksum(self, names=None):
        """SHA-256 over raw bytes of the given tensors (all by default)."""
        digest = hashlib.sha256()
        for name in (self.names() if names is None else names):
            digest.update(name.encode())
            digest.update(self.tensors[name].detach().numpy().tobytes())
        return digest.hexdigest()

    def to_dict(self):
        """JSON-ready dict. `data` is row-major; floats round-trip exactly."""
        return {'tensors': [{'name': name,
                             'shape': list(p.shape),
                             'frozen': not p.requires_grad,
                             'data': p.detach().reshape(-1).tolist()}
                            for name, p in self.tensors.items()]}

    @classmethod
    def from_dict(cls, payload):
        store = cls()
        for entry in payload['tensors']:
            data = torch.tensor(entry['data'], dtype=DTYPE).reshape(entry['shape'])
            store.add(entry['name'], data, frozen=entry['frozen'])
        return store

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


@dataclass
class DualBatch:
    """Values [batch x width] and their t-derivatives of identical shape."""
    values: torch.Tensor
    tangents: torch.Tensor

    def __post_init__(self):
        if self.values.shape != self.tangents.shape:
            raise ConfigurationError(
                f'values {tuple(self.values.shape)} and tangents '
                f'{tuple(self.tangents.shape)} differ in shape')

    @classmethod
    def from_times(cls, times):
        """Input layer: a column of t with tangent exactly 1."""
        times = torch.as_tensor(times, dtype=DTYPE).reshape(-1, 1)
        return cls(times, torch.ones_like(times))

    @property
    def width(self):
        return self.values.shape[1]

    def __add__(self, other):
        return DualBatch(self.values + other.values, self.tangents + other.tangents)

    def scale(self, factor):
        return DualBatch(factor * self.values, factor * self.tangents)


class GradientTape:
    """
    Record of the primitive ops of one training step.

    Reverse replay is done by torch autograd over the graph the recorded ops
    built; the tape guards the lifetime (one `backward` per tape).
    """

    def __init__(self):
        self.records = []
        self.outputs = []
        self.consumed = False

    def record(self, op, *outputs):
        if self.consumed:
            raise ContractViolation('GradientTape already consumed by backward')
        self.records.append(op)
        self.outputs.extend(t for t in outputs if t.grad_fn is not None)

    def reaches(self, loss):
        """True when the autograd graph of `loss` passes through a recorded output."""
        recorded = {id(t.grad_fn) for t in self.outputs}
        seen = set()
        stack = [loss.grad_fn]
        while stack:
            node = stack.pop()
            if node is None or id(node) in seen:
                continue
            if id(node) in recorded:
                return True
            seen.add(id(node))
            stack.extend(next_fn for next_fn, _ in node.next_functions)
        return False

    def __len__(self):
        return len(self.records)


def affine_forward(tape, inputs, weight, bias):
    """values @ W + b, tangents @ W. `weight` is [in x out]."""
    if weight.dim() != 2 or weight.shape[0] != inputs.width:
        raise ConfigurationError(
            f'Weight shape {tuple(weight.shape)} does not match input width {inputs.width}')
    if tuple(bias.shape) != (weight.shape[1],):
        raise ConfigurationError(
            f'Bias shape {tuple(bias.shape)} does not match weight {tuple(weight.shape)}')
    outputs = DualBatch(inputs.values @ weight + bias, inputs.tangents @ weight)
    if tape is not None:
        tape.record('affine', outputs.values, outputs.tangents)
    return outputs


def activation_forward(tape, inputs, kind='tanh'):
    """phi(values), phi'(values) * tangents."""
    try:
        phi, dphi = ACTIVATIONS[kind]
    except KeyError:
        raise ConfigurationError(
            f'Unsupported activation {kind!r}, expected one of {sorted(ACTIVATIONS)}') from None
    values = phi(inputs.values)
    outputs = DualBatch(values, dphi(inputs.values, values) * inputs.tangents)
    if tape is not None:
        tape.record(kind, outputs.values, outputs.tangents)
    return outputs


def backward(tape, loss, store):
    """
    d(loss)/dp for every non-frozen tensor p of `store`.

    Frozen tensors are absent from the result. Tensors that do not influence
    the loss get zeros. The tape is consumed.
    """
    if tape.consumed:
        raise ContractViolation('GradientTape already consumed by backward')
    if loss.numel() != 1:
        raise ConfigurationError(f'Loss must be a scalar, got shape {tuple(loss.shape)}')
    if loss.grad_fn is None or not tape.reaches(loss):
        raise ContractViolation('Loss was not produced through ops recorded on the tape')

    trainable = store.trainable()
    tape.consumed = True
    if not trainable:
        return {}
    grads = torch.autograd.grad(loss.reshape(()), list(trainable.values()), allow_unused=True)
    return {name: torch.zeros_like(p) if g is None else g
            for (name, p), g in zip(trainable.items(), grads)}
