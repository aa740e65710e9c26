"""Network blocks shared by both learners.

All encoders are stacks of three causal dilated convolutions (dilation
2^i on layer i) followed by global max pooling and a linear head; the
generative decoder is a vanilla tanh RNN unrolled for one window; the
probe classifier is dropout plus a linear map.  Weights are float64
tensors from :mod:`maneuverlab.ndtensor`, initialized uniformly with
fan-in scaling (biases start at zero).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndtensor as nd
from .ndtensor import Tensor

__all__ = [
    "EncoderSpec",
    "DecoderSpec",
    "DilatedConvEncoder",
    "PairDiscriminator",
    "RnnDecoder",
    "ClassifierHead",
    "cross_entropy",
]


def _uniform_init(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    # Weights and biases both draw from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    limit = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True)


@dataclass(frozen=True)
class EncoderSpec:
    """Architecture of a dilated-convolution window encoder.

    ``variational=True`` doubles the head so it emits (mean, log-variance)
    pairs for reparameterized sampling.
    """

    in_features: int
    window: int
    out_size: int
    kernel_size: int = 3
    channels: tuple[int, ...] = (32, 64, 64)
    dilations: tuple[int, ...] = (1, 2, 4)
    variational: bool = False

    def __post_init__(self):
        if self.out_size < 1 or self.in_features < 1 or self.window < 1:
            raise ValueError("encoder sizes must be positive")
        if self.kernel_size < 1:
            raise ValueError("kernel size must be >= 1")
        if len(self.channels) != len(self.dilations):
            raise ValueError("channels and dilations must have equal length")
        if self.receptive_field > self.window:
            raise ValueError(
                f"receptive field {self.receptive_field} exceeds window {self.window}; "
                f"shrink kernel_size or dilations"
            )

    @property
    def receptive_field(self) -> int:
        return 1 + (self.kernel_size - 1) * sum(self.dilations)


@dataclass(frozen=True)
class DecoderSpec:
    """Recurrent decoder shape: concat(local, global) in, one window out."""

    local_size: int
    global_size: int
    hidden: int
    out_features: int
    steps: int

    def __post_init__(self):
        if min(self.local_size, self.hidden, self.out_features, self.steps) < 1 or self.global_size < 0:
            raise ValueError("decoder sizes must be positive (global_size may be 0)")


class DilatedConvEncoder:
    """conv(d=1) -> relu -> conv(d=2) -> relu -> conv(d=4) -> relu -> max pool -> linear."""

    def __init__(self, spec: EncoderSpec, rng: np.random.Generator):
        self.spec = spec
        self.params: dict[str, Tensor] = {}
        c_in = spec.in_features
        for i, c_out in enumerate(spec.channels):
            self.params[f"conv{i}_w"] = _uniform_init(rng, (c_out, c_in, spec.kernel_size), c_in * spec.kernel_size)
            self.params[f"conv{i}_b"] = _uniform_init(rng, c_out, c_in * spec.kernel_size)
            c_in = c_out
        head = spec.out_size * (2 if spec.variational else 1)
        self.params["head_w"] = _uniform_init(rng, (head, c_in), c_in)
        self.params["head_b"] = _uniform_init(rng, head, c_in)
        if spec.variational:
            # posteriors start confident (sigma ~ e^-2): reconstruction
            # gradients are not swamped by reparameterization noise early on
            self.params["head_b"].data[spec.out_size:] -= 4.0

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def _check_input(self, window) -> Tensor:
        x = window if isinstance(window, Tensor) else Tensor(window)
        if x.shape != (self.spec.in_features, self.spec.window):
            raise ValueError(f"encoder expects {(self.spec.in_features, self.spec.window)}, got {x.shape}")
        return x

    def layer_activations(self, window) -> list[Tensor]:
        """Post-activation output of every conv layer; causal per layer."""
        h = self._check_input(window)
        acts = []
        for i, d in enumerate(self.spec.dilations):
            h = nd.conv1d_dilated(h, self.params[f"conv{i}_w"], d)
            h = nd.add_channel_bias(h, self.params[f"conv{i}_b"])
            h = nd.relu(h)
            acts.append(h)
        return acts

    def conv_stack(self, window) -> Tensor:
        return self.layer_activations(window)[-1]

    def __call__(self, window):
        pooled = nd.global_max_pool(self.conv_stack(window))
        out = nd.matmul(self.params["head_w"], pooled) + self.params["head_b"]
        if self.spec.variational:
            m = self.spec.out_size
            # Bounded log-variance keeps posterior densities (and their
            # gradients) finite everywhere.
            return out[0:m], nd.clip(out[m:2 * m], -8.0, 8.0)
        return out


class PairDiscriminator:
    """MLP scoring whether two window representations share a neighborhood; output in (0, 1)."""

    def __init__(self, repr_size: int, hidden: int, rng: np.random.Generator):
        self.repr_size = repr_size
        self.hidden = hidden
        self.params = {
            "w1": _uniform_init(rng, (hidden, 2 * repr_size), 2 * repr_size),
            "b1": _uniform_init(rng, hidden, 2 * repr_size),
            "w2": _uniform_init(rng, (1, hidden), hidden),
            "b2": _uniform_init(rng, 1, hidden),
        }

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def __call__(self, z_a: Tensor, z_b: Tensor) -> Tensor:
        if z_a.shape != (self.repr_size,) or z_b.shape != (self.repr_size,):
            raise ValueError(f"discriminator expects two ({self.repr_size},) vectors, got {z_a.shape}, {z_b.shape}")
        x = nd.concat([z_a, z_b])
        h = nd.relu(nd.matmul(self.params["w1"], x) + self.params["b1"])
        score = nd.matmul(self.params["w2"], h) + self.params["b2"]
        return nd.sigmoid(score).sum()  # (1,) -> scalar


class RnnDecoder:
    """Vanilla tanh RNN unrolled for ``steps``; the same concat(z_l, z_g) feeds every step."""

    def __init__(self, spec: DecoderSpec, rng: np.random.Generator):
        self.spec = spec
        in_size = spec.local_size + spec.global_size
        self.params = {
            "w_ih": _uniform_init(rng, (spec.hidden, in_size), in_size),
            "w_hh": _uniform_init(rng, (spec.hidden, spec.hidden), spec.hidden),
            "b_h": _uniform_init(rng, spec.hidden, spec.hidden),
            "w_out": _uniform_init(rng, (spec.out_features, spec.hidden), spec.hidden),
            "b_out": _uniform_init(rng, spec.out_features, spec.hidden),
        }

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def __call__(self, z_l: Tensor, z_g: Tensor | None = None) -> Tensor:
        z_l = z_l if isinstance(z_l, Tensor) else Tensor(z_l)
        if z_l.shape != (self.spec.local_size,):
            raise ValueError(f"decoder expects local code ({self.spec.local_size},), got {z_l.shape}")
        if self.spec.global_size:
            if z_g is None:
                raise ValueError(f"decoder expects global code ({self.spec.global_size},)")
            z_g = z_g if isinstance(z_g, Tensor) else Tensor(z_g)
            if z_g.shape != (self.spec.global_size,):
                raise ValueError(f"decoder expects global code ({self.spec.global_size},)")
            inp = nd.concat([z_l, z_g])
        else:
            inp = z_l
        drive = nd.matmul(self.params["w_ih"], inp) + self.params["b_h"]
        h = Tensor(np.zeros(self.spec.hidden))
        cols = []
        for _ in range(self.spec.steps):
            h = nd.tanh(drive + nd.matmul(self.params["w_hh"], h))
            cols.append(nd.matmul(self.params["w_out"], h) + self.params["b_out"])
        return nd.stack_cols(cols)


class ClassifierHead:
    """Dropout plus a linear map from a representation to class scores."""

    def __init__(self, in_size: int, n_classes: int = 4, dropout_rate: float = 0.5,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_size = in_size
        self.n_classes = n_classes
        self.dropout_rate = dropout_rate
        self.training = True
        self._rng = rng
        self.params = {
            "w": _uniform_init(rng, (n_classes, in_size), in_size),
            "b": _uniform_init(rng, n_classes, in_size),
        }

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def train(self, mode: bool = True):
        self.training = mode
        return self

    def eval(self):
        return self.train(False)

    def __call__(self, z) -> Tensor:
        z = z if isinstance(z, Tensor) else Tensor(z)
        if z.shape != (self.in_size,):
            raise ValueError(f"classifier expects ({self.in_size},), got {z.shape}")
        x = nd.dropout(z, self.dropout_rate, self._rng, training=self.training)
        return nd.matmul(self.params["w"], x) + self.params["b"]


def cross_entropy(scores: Tensor, label: int) -> Tensor:
    """Softmax cross-entropy of one score vector against an integer label.

    Max-shifted for stability; the shift is a constant, so gradients stay
    the usual softmax-minus-onehot.
    """
    label = int(label)
    if not 0 <= label < scores.shape[0]:
        raise ValueError(f"label {label} out of range for {scores.shape[0]} classes")
    shift = float(np.max(scores.data))
    lse = nd.log(nd.exp(scores - shift).sum()) + shift
    return lse - scores[label:label + 1].sum()
