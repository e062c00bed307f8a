"""
Neural-network layers built from the tape primitives: linear layers with Xavier
initialisation, layer and batch normalisation, the residual MLP used for every
correction network, the parameter encoder, the Adam optimiser, learning-rate and
early-stopping helpers and versioned JSON checkpoints.
"""

__author__ = "HybridODE contributors"
__copyright__ = "Copyright (C) 2026 HybridODE contributors"
__license__ = "GPL-3.0"


import json
import math
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence, Union
import numpy as np
from packaging import version
import hybridode.utils.version
from hybridode.models.numerics import Tensor, as_tensor, relu, reshape, tsqrt, ttanh
from hybridode.utils.exceptions import CheckpointError, MissingArtifactError, ShapeError
from hybridode.utils.logger import StructuredLogger

logger = StructuredLogger()

CHECKPOINT_FORMAT = "hybridode-checkpoint"
BATCH_NORM_MOMENTUM = 0.1
NORM_EPS = 1e-5


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, gain: float = 1.0) -> np.ndarray:
    """
    Glorot/Xavier uniform initialisation scaled by `gain`.
    """
    limit = gain * math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Module:
    """
    Minimal container for named parameters, buffers and sub-modules.

    Sub-classes declare `own_parameters`, `own_buffers` and `children`; naming,
    train/eval switching, freezing and state (de)serialisation are shared.
    """
    def __init__(self):
        self.training = True

    def own_parameters(self) -> Dict[str, Tensor]:
        return {}

    def own_buffers(self) -> Dict[str, np.ndarray]:
        return {}

    def children(self) -> Dict[str, "Module"]:
        return {}

    def named_parameters(self, prefix: str = "") -> Dict[str, Tensor]:
        named = {f"{prefix}{name}": tensor for name, tensor in self.own_parameters().items()}
        for name, child in self.children().items():
            named.update(child.named_parameters(f"{prefix}{name}."))
        return named

    def named_buffers(self, prefix: str = "") -> Dict[str, np.ndarray]:
        named = {f"{prefix}{name}": buffer for name, buffer in self.own_buffers().items()}
        for name, child in self.children().items():
            named.update(child.named_buffers(f"{prefix}{name}."))
        return named

    def parameters(self) -> List[Tensor]:
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for child in self.children().values():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def freeze(self) -> "Module":
        for parameter in self.parameters():
            parameter.requires_grad = False
        return self

    def zero_(self) -> "Module":
        """
        Sets every weight matrix to zero. Normalisation gains keep their value.
        """
        for name, parameter in self.named_parameters().items():
            if name.endswith("weight"):
                parameter.data[...] = 0.0
        return self

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters().items()}
        state.update({name: b.copy() for name, b in self.named_buffers().items()})
        return state

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        """
        Copies arrays into the existing parameters and buffers in place.

        Raises:
            CheckpointError: On missing entries or shape mismatches.
        """
        targets = {name: p.data for name, p in self.named_parameters().items()}
        targets.update(self.named_buffers())
        for name, target in targets.items():
            if name not in state:
                raise CheckpointError(f"Checkpoint is missing tensor '{name}'.")
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != target.shape:
                raise CheckpointError(f"Tensor '{name}' has shape {value.shape}, expected {target.shape}.")
            np.copyto(target, value)

    def __call__(self, x):
        return self.forward(x)

    def forward(self, x):
        raise NotImplementedError


class Linear(Module):
    """
    Affine map x @ W + b with W of shape (in_dim, out_dim).
    """
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, gain: float = 1.0):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = Tensor(xavier_uniform(rng, in_dim, out_dim, gain))
        self.bias = Tensor(np.zeros(out_dim))

    def own_parameters(self) -> Dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x) -> Tensor:
        x = as_tensor(x)
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"Linear layer expects trailing dimension {self.in_dim}, got {x.shape}.")
        return x @ self.weight + self.bias


class LayerNorm(Module):
    """
    Normalises over the trailing feature dimension, then applies gain and shift.
    """
    def __init__(self, dim: int, eps: float = NORM_EPS):
        super().__init__()
        self.dim = dim
        self.eps = eps
        self.weight_gain = Tensor(np.ones(dim))
        self.shift = Tensor(np.zeros(dim))

    def own_parameters(self) -> Dict[str, Tensor]:
        return {"gain": self.weight_gain, "shift": self.shift}

    def forward(self, x) -> Tensor:
        x = as_tensor(x)
        centered = x - x.mean(axis=-1, keepdims=True)
        variance = (centered * centered).mean(axis=-1, keepdims=True)
        return centered / tsqrt(variance + self.eps) * self.weight_gain + self.shift


class BatchNorm(Module):
    """
    Batch normalisation over axis 0 of a (batch, features) input.

    Training mode normalises with batch statistics and updates the running
    estimates with momentum 0.1 (unbiased variance); inference mode uses the
    running estimates as constants.
    """
    def __init__(self, dim: int, eps: float = NORM_EPS, momentum: float = BATCH_NORM_MOMENTUM):
        super().__init__()
        self.dim = dim
        self.eps = eps
        self.momentum = momentum
        self.weight_gain = Tensor(np.ones(dim))
        self.shift = Tensor(np.zeros(dim))
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)

    def own_parameters(self) -> Dict[str, Tensor]:
        return {"gain": self.weight_gain, "shift": self.shift}

    def own_buffers(self) -> Dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, x) -> Tensor:
        x = as_tensor(x)
        if self.training:
            mean = x.mean(axis=0, keepdims=True)
            centered = x - mean
            variance = (centered * centered).mean(axis=0, keepdims=True)
            n = x.shape[0]
            unbiased = variance.data[0] * (n / (n - 1)) if n > 1 else variance.data[0]
            self.running_mean *= 1.0 - self.momentum
            self.running_mean += self.momentum * mean.data[0]
            self.running_var *= 1.0 - self.momentum
            self.running_var += self.momentum * unbiased
            normalized = centered / tsqrt(variance + self.eps)
        else:
            normalized = (x - self.running_mean) / np.sqrt(self.running_var + self.eps)
        return normalized * self.weight_gain + self.shift


class ResidualBlock(Module):
    """
    LayerNorm -> Linear -> Tanh -> Linear -> Tanh, added to the block input.
    """
    def __init__(self, dim: int, rng: np.random.Generator, gain: float = 1.0):
        super().__init__()
        self.norm = LayerNorm(dim)
        self.linear1 = Linear(dim, dim, rng, gain)
        self.linear2 = Linear(dim, dim, rng, gain)

    def children(self) -> Dict[str, Module]:
        return {"norm": self.norm, "linear1": self.linear1, "linear2": self.linear2}

    def forward(self, x) -> Tensor:
        hidden = ttanh(self.linear1(self.norm(x)))
        return x + ttanh(self.linear2(hidden))


class ResidualMlp(Module):
    """
    Residual multilayer perceptron used for every correction network and for the
    data-driven vector fields.

    Layout: input projection, `num_blocks` residual blocks, a final layer
    normalisation (optional) and an output projection. Leading dimensions other than
    the last are flattened for the matrix products and restored afterwards.

    Residual blocks with zero weights pass their input through unchanged. The network
    then reduces to output_projection(input_projection(x)) only with
    `final_norm=False`; with the default final LayerNorm in between, the hidden
    features are normalised before the output projection.
    """
    def __init__(self, input_dim: int, hidden_dim: int, num_blocks: int, output_dim: int,
                 rng: np.random.Generator, gain: float = 1.0, final_norm: bool = True):
        super().__init__()
        if min(input_dim, hidden_dim, output_dim) < 1 or num_blocks < 0:
            raise ShapeError("ResidualMlp dimensions must be positive and num_blocks non-negative.")
        if gain <= 0:
            raise ShapeError("ResidualMlp init gain must be positive.")
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.num_blocks = num_blocks
        self.output_dim = output_dim
        self.gain = gain
        self.final_norm = final_norm
        self.input_projection = Linear(input_dim, hidden_dim, rng, gain)
        self.blocks = [ResidualBlock(hidden_dim, rng, gain) for _ in range(num_blocks)]
        self.output_norm = LayerNorm(hidden_dim) if final_norm else None
        self.output_projection = Linear(hidden_dim, output_dim, rng, gain)

    def children(self) -> Dict[str, Module]:
        modules: Dict[str, Module] = {"input_projection": self.input_projection}
        for index, block in enumerate(self.blocks):
            modules[f"blocks.{index}"] = block
        if self.output_norm is not None:
            modules["output_norm"] = self.output_norm
        modules["output_projection"] = self.output_projection
        return modules

    def descriptor(self) -> Dict[str, Any]:
        return {
            "kind": "residual_mlp",
            "input_dim": self.input_dim,
            "hidden_dim": self.hidden_dim,
            "num_blocks": self.num_blocks,
            "output_dim": self.output_dim,
            "gain": self.gain,
            "final_norm": self.final_norm,
        }

    @classmethod
    def from_descriptor(cls, descriptor: Mapping[str, Any], rng: Optional[np.random.Generator] = None) -> "ResidualMlp":
        return cls(descriptor["input_dim"], descriptor["hidden_dim"], descriptor["num_blocks"], descriptor["output_dim"],
                   rng if rng is not None else np.random.default_rng(0), descriptor["gain"], descriptor.get("final_norm", True))

    def forward(self, x) -> Tensor:
        x = as_tensor(x)
        if x.ndim == 0 or x.shape[-1] != self.input_dim:
            raise ShapeError(f"ResidualMlp expects trailing dimension {self.input_dim}, got {x.shape}.")
        leading = x.shape[:-1]
        hidden = self.input_projection(reshape(x, (-1, self.input_dim)) if x.ndim != 2 else x)
        for block in self.blocks:
            hidden = block(hidden)
        if self.output_norm is not None:
            hidden = self.output_norm(hidden)
        out = self.output_projection(hidden)
        return reshape(out, leading + (self.output_dim,)) if x.ndim != 2 else out


def mlp_forward(net: ResidualMlp, x) -> Tensor:
    return net(x)


class EncoderNet(Module):
    """
    Maps an observed window of `window_len` steps with `input_dim` channels per step
    (states plus intervention) to an estimate of the mechanistic parameters.

    Layout: batch norm of the flattened input; Linear(T*d -> H), BN, ReLU; two
    Linear(H -> H), BN, ReLU; Linear(H -> H/2), BN, ReLU; linear output H/2 -> out.
    """
    def __init__(self, window_len: int, input_dim: int, rng: np.random.Generator,
                 hidden_dim: int = 128, output_dim: int = 2, gain: float = 1.0):
        super().__init__()
        self.window_len = window_len
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.output_dim = output_dim
        self.gain = gain
        flat = window_len * input_dim
        self.input_norm = BatchNorm(flat)
        self.layers = [
            Linear(flat, hidden_dim, rng, gain),
            Linear(hidden_dim, hidden_dim, rng, gain),
            Linear(hidden_dim, hidden_dim, rng, gain),
            Linear(hidden_dim, hidden_dim // 2, rng, gain),
        ]
        self.norms = [BatchNorm(hidden_dim), BatchNorm(hidden_dim), BatchNorm(hidden_dim), BatchNorm(hidden_dim // 2)]
        self.output_layer = Linear(hidden_dim // 2, output_dim, rng, gain)

    def children(self) -> Dict[str, Module]:
        modules: Dict[str, Module] = {"input_norm": self.input_norm}
        for index, (layer, norm) in enumerate(zip(self.layers, self.norms)):
            modules[f"layers.{index}"] = layer
            modules[f"norms.{index}"] = norm
        modules["output_layer"] = self.output_layer
        return modules

    def descriptor(self) -> Dict[str, Any]:
        return {
            "kind": "encoder",
            "window_len": self.window_len,
            "input_dim": self.input_dim,
            "hidden_dim": self.hidden_dim,
            "output_dim": self.output_dim,
            "gain": self.gain,
        }

    @classmethod
    def from_descriptor(cls, descriptor: Mapping[str, Any], rng: Optional[np.random.Generator] = None) -> "EncoderNet":
        return cls(descriptor["window_len"], descriptor["input_dim"], rng if rng is not None else np.random.default_rng(0),
                   descriptor["hidden_dim"], descriptor["output_dim"], descriptor.get("gain", 1.0))

    def forward(self, window) -> Tensor:
        """
        Args:
            window: Array or Tensor of shape (B, T, d) with T >= window_len; only the
                first window_len steps are used.

        Returns:
            Tensor: Parameter estimates of shape (B, output_dim).

        Raises:
            ShapeError: If the window is shorter than window_len or has the wrong channel count.
        """
        window = as_tensor(window)
        if window.ndim != 3 or window.shape[2] != self.input_dim:
            raise ShapeError(f"Encoder expects windows of shape (B, T, {self.input_dim}), got {window.shape}.")
        if window.shape[1] < self.window_len:
            raise ShapeError(f"Encoder window has {window.shape[1]} steps, needs {self.window_len}.")
        if window.shape[1] > self.window_len:
            window = window[:, :self.window_len, :]
        hidden = self.input_norm(reshape(window, (window.shape[0], self.window_len * self.input_dim)))
        for layer, norm in zip(self.layers, self.norms):
            hidden = relu(norm(layer(hidden)))
        return self.output_layer(hidden)


def encoder_forward(net: EncoderNet, window) -> Tensor:
    return net(window)


@dataclass
class AdamState:
    """
    First and second moment accumulators plus the step counter.
    """
    step: int = 0
    first_moment: List[np.ndarray] = field(default_factory=list)
    second_moment: List[np.ndarray] = field(default_factory=list)

    @classmethod
    def zeros_like(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls(0, [np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params: Sequence[Tensor], grads: Union[Mapping[Tensor, np.ndarray], Sequence[np.ndarray]], state: AdamState,
              lr: float, weight_decay: float = 0.0, betas: tuple = (0.9, 0.999), eps: float = 1e-8) -> AdamState:
    """
    One Adam update with bias correction and decoupled weight decay, applied in place.

    Args:
        params (Sequence[Tensor]): Parameters to update.
        grads: Gradient per parameter, either keyed by tensor or in parameter order.
        state (AdamState): Moment accumulators matching the parameter shapes.
        lr (float): Learning rate.
        weight_decay (float): Decoupled weight decay coefficient.

    Returns:
        AdamState: The updated state (same object).

    Raises:
        ShapeError: If a gradient or accumulator shape does not match its parameter.
    """
    beta1, beta2 = betas
    if len(state.first_moment) != len(params):
        raise ShapeError(f"Optimizer state tracks {len(state.first_moment)} tensors, got {len(params)} parameters.")

    state.step += 1
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step
    for index, param in enumerate(params):
        grad = grads.get(param) if isinstance(grads, Mapping) else grads[index]
        grad = np.zeros_like(param.data) if grad is None else np.asarray(grad, dtype=np.float64)
        if grad.shape != param.shape or state.first_moment[index].shape != param.shape:
            raise ShapeError(f"Gradient shape {grad.shape} does not match parameter shape {param.shape}.")
        m = state.first_moment[index]
        v = state.second_moment[index]
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        update = (m / correction1) / (np.sqrt(v / correction2) + eps)
        if weight_decay:
            update = update + weight_decay * param.data
        param.data -= lr * update
    return state


class Adam:
    """
    Adam optimiser over a fixed list of parameters.
    """
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, weight_decay: float = 0.0,
                 betas: tuple = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.state = AdamState.zeros_like(self.params)

    def step(self, grads: Mapping[Tensor, np.ndarray]) -> None:
        adam_step(self.params, grads, self.state, self.lr, self.weight_decay, self.betas, self.eps)


class ReduceLROnPlateau:
    """
    Multiplies the optimiser learning rate by `factor` after `patience` epochs
    without a relative improvement of `threshold` in the monitored value (mode min).
    """
    def __init__(self, optimizer: Adam, factor: float = 0.5, patience: int = 5, threshold: float = 1e-4, min_lr: float = 0.0):
        self.optimizer = optimizer
        self.factor = factor
        self.patience = patience
        self.threshold = threshold
        self.min_lr = min_lr
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, value: float) -> None:
        if value < self.best * (1.0 - self.threshold):
            self.best = value
            self.bad_epochs = 0
            return
        self.bad_epochs += 1
        if self.bad_epochs > self.patience:
            new_lr = max(self.optimizer.lr * self.factor, self.min_lr)
            if new_lr < self.optimizer.lr:
                logger.info("Reducing learning rate.", old_lr=self.optimizer.lr, new_lr=new_lr)
            self.optimizer.lr = new_lr
            self.bad_epochs = 0


class EarlyStopping:
    """
    Signals a stop after `patience` epochs without an improvement larger than `tol`.
    A patience of None never stops but still tracks the best value.
    """
    def __init__(self, patience: Optional[int] = None, tol: float = 0.0):
        self.patience = patience
        self.tol = tol
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, value: float) -> bool:
        """
        Returns:
            bool: True if the value is a new best.
        """
        if value < self.best - self.tol:
            self.best = value
            self.bad_epochs = 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.patience is not None and self.bad_epochs >= self.patience


class Checkpoint:
    """
    Versioned JSON checkpoints: a header (format, schema version, kind, architecture,
    metadata) followed by named row-major float64 arrays. Floats are written with their
    shortest round-trip representation, so reloading is bit-exact.

    Methods:
        save(path, kind, architecture, tensors, metadata) -> None:
            Writes a checkpoint file.

        load(path, kind) -> Dict[str, Any]:
            Reads a checkpoint, validates its header and returns architecture,
            metadata and arrays.
    """
    @staticmethod
    def save(path: str, kind: str, architecture: Dict[str, Any], tensors: Mapping[str, np.ndarray],
             metadata: Optional[Dict[str, Any]] = None) -> None:
        logger.debug("Starting: Checkpoint.save.", path=path, kind=kind)
        payload = {
            "format": CHECKPOINT_FORMAT,
            "schema_version": hybridode.utils.version.__schema_version__,
            "kind": kind,
            "architecture": architecture,
            "metadata": metadata or {},
            "tensors": {
                name: {"shape": list(np.shape(array)), "data": np.asarray(array, dtype=np.float64).reshape(-1).tolist()}
                for name, array in tensors.items()
            },
        }
        try:
            text = json.dumps(payload, sort_keys=True, allow_nan=False)
        except ValueError as exception_error:
            raise CheckpointError(f"Refusing to write non-finite weights to {path}.") from exception_error
        with open(path, "w", encoding="utf-8") as handle:
            handle.write(text)
            handle.write("\n")
        logger.debug("Finished: Checkpoint.save.")

    @staticmethod
    def load(path: str, kind: Optional[str] = None) -> Dict[str, Any]:
        """
        Raises:
            MissingArtifactError: If the file does not exist.
            CheckpointError: On a foreign format, incompatible schema version or kind mismatch.
        """
        logger.debug("Starting: Checkpoint.load.", path=path)
        if not os.path.isfile(path):
            raise MissingArtifactError(f"Checkpoint {path} does not exist.", path=path)
        try:
            with open(path, "r", encoding="utf-8") as handle:
                payload = json.load(handle)
        except json.JSONDecodeError as exception_error:
            raise CheckpointError(f"Checkpoint {path} is not valid JSON: {exception_error}") from exception_error

        if payload.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError(f"File {path} is not a {CHECKPOINT_FORMAT} file.")

        found = version.parse(str(payload.get("schema_version", "0")))
        expected = version.parse(hybridode.utils.version.__schema_version__)
        if found.major != expected.major:
            raise CheckpointError(f"Checkpoint {path} has schema version {found}, expected {expected.major}.x.")
        if found > expected:
            logger.warning("Checkpoint written by a newer schema version.", path=path, found=str(found), expected=str(expected))

        if kind is not None and payload.get("kind") != kind:
            raise CheckpointError(f"Checkpoint {path} holds a '{payload.get('kind')}', expected '{kind}'.")

        tensors = {
            name: np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
            for name, entry in payload.get("tensors", {}).items()
        }
        logger.debug("Finished: Checkpoint.load.")
        return {"kind": payload.get("kind"), "architecture": payload.get("architecture", {}),
                "metadata": payload.get("metadata", {}), "tensors": tensors}
