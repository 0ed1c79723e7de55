"""
Named, ordered parameter storage and the per-forward-pass binding of
parameters onto a tape.
"""

import logging
import zlib
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple, Union

import numpy as np

from .autograd import Tape, Variable
from .exceptions import ConfigurationError, ShapeMismatchError
from .nn_ops import RunningStats
from .tensor import default_dtype, load_tensors, save_tensors

logger = logging.getLogger(__name__)

# Parameter kinds. Only CONV_WEIGHT entries are weight-decayed / regularized.
CONV_WEIGHT = "conv_weight"
BIAS = "bias"
BN_GAMMA = "bn_gamma"
BN_BETA = "bn_beta"
BN_RUNNING = "bn_running"

TRAINABLE_KINDS = (CONV_WEIGHT, BIAS, BN_GAMMA, BN_BETA)

HE_NORMAL = "he_normal"
FAN_IN_UNIFORM = "uniform"


def _name_seed(seed: int, name: str) -> np.random.Generator:
    # Per-name streams keep every draw independent of which other layers exist.
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode("utf-8"))]))


def _init_weights(init: str, rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    if init == HE_NORMAL:
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)
    if init == FAN_IN_UNIFORM:
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, shape)
    raise ConfigurationError(f"unknown weight init {init!r}; expected {HE_NORMAL!r} or {FAN_IN_UNIFORM!r}")


class ParamStore:
    """
    Ordered map from hierarchical names (encoder.stage2.block0.conv1.weight)
    to tensors, with a kind tag per entry.
    """

    def __init__(self, seed: int = 0, dtype=None):
        self.seed = seed
        self.dtype = np.dtype(dtype or default_dtype())
        self._tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self._kinds: Dict[str, str] = {}

    # mapping protocol
    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        if name not in self._tensors:
            raise KeyError(f"unknown parameter {name!r}")
        if value.shape != self._tensors[name].shape:
            raise ShapeMismatchError(name, self._tensors[name].shape, value.shape)
        self._tensors[name] = value

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def kind(self, name: str) -> str:
        return self._kinds[name]

    def names(self, kinds: Optional[Tuple[str, ...]] = None, prefix: str = "") -> List[str]:
        return [n for n in self._tensors if n.startswith(prefix) and (kinds is None or self._kinds[n] in kinds)]

    def trainable(self) -> List[str]:
        return self.names(TRAINABLE_KINDS)

    def count(self, prefix: str = "", trainable_only: bool = True) -> int:
        kinds = TRAINABLE_KINDS if trainable_only else None
        return int(sum(self._tensors[n].size for n in self.names(kinds, prefix)))

    def copy(self) -> "ParamStore":
        other = ParamStore(self.seed, self.dtype)
        other._tensors = OrderedDict((k, v.copy()) for k, v in self._tensors.items())
        other._kinds = dict(self._kinds)
        return other

    def as_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict(self._tensors)

    # registration
    def _add(self, name: str, value: np.ndarray, kind: str) -> np.ndarray:
        if name in self._tensors:
            raise ConfigurationError(f"duplicate parameter name {name!r}")
        if any(d < 1 for d in value.shape):
            raise ConfigurationError(f"parameter {name!r} would have shape {list(value.shape)}")
        self._tensors[name] = value.astype(self.dtype)
        self._kinds[name] = kind
        return self._tensors[name]

    def add_conv(self, prefix: str, cout: int, cin: int, kh: int, kw: int, bias: bool = False,
                 init: str = HE_NORMAL) -> None:
        """
        Zero bias. Weights are fan-in scaled: he_normal draws N(0, 2 / fan_in),
        uniform draws U(-1/sqrt(fan_in), 1/sqrt(fan_in)) (variance 1 / (3 fan_in))
        for linear chains that no batch norm rescales.
        """
        name = f"{prefix}.weight"
        self._add(name, _init_weights(init, _name_seed(self.seed, name), (cout, cin, kh, kw), cin * kh * kw),
                  CONV_WEIGHT)
        if bias:
            self._add(f"{prefix}.bias", np.zeros(cout), BIAS)

    def add_deconv(self, prefix: str, cin: int, cout: int, kh: int, kw: int, bias: bool = False) -> None:
        name = f"{prefix}.weight"
        self._add(name, _init_weights(HE_NORMAL, _name_seed(self.seed, name), (cin, cout, kh, kw), cin * kh * kw),
                  CONV_WEIGHT)
        if bias:
            self._add(f"{prefix}.bias", np.zeros(cout), BIAS)

    def add_bn(self, prefix: str, channels: int) -> None:
        self._add(f"{prefix}.gamma", np.ones(channels), BN_GAMMA)
        self._add(f"{prefix}.beta", np.zeros(channels), BN_BETA)
        self._add(f"{prefix}.running_mean", np.zeros(channels), BN_RUNNING)
        self._add(f"{prefix}.running_var", np.ones(channels), BN_RUNNING)

    # persistence
    def save(self, path: Union[str, Path]) -> None:
        save_tensors(path, self._tensors)

    def fill_from(self, tensors: Dict[str, np.ndarray], prefix: str = "", strict: bool = True) -> List[str]:
        """
        Copy tensors into this store, checking names and shapes. Returns the names
        filled. With `strict`, every expected name under `prefix` must be present.
        """
        filled = []
        for name in self.names(prefix=prefix):
            if name not in tensors:
                if strict:
                    raise ShapeMismatchError(name, self._tensors[name].shape, None)
                continue
            found = tensors[name]
            if found.shape != self._tensors[name].shape:
                raise ShapeMismatchError(name, self._tensors[name].shape, found.shape)
            self._tensors[name] = np.asarray(found, dtype=self.dtype).copy()
            filled.append(name)
        return filled


class Binder:
    """
    Binds store entries onto one tape for one forward pass. `tape=None` binds
    parameters as constants (inference, nothing recorded).
    """

    def __init__(self, store: ParamStore, tape: Optional[Tape] = None, mode: str = "eval"):
        self.store = store
        self.tape = tape
        self.mode = mode
        self._bound: Dict[str, Variable] = {}
        # (layer name, output shape) pairs, collected when set to a list
        self.trace: Optional[List[Tuple[str, List[int]]]] = None

    @property
    def training(self) -> bool:
        return self.mode == "train"

    def __call__(self, name: str) -> Variable:
        var = self._bound.get(name)
        if var is None:
            value = self.store[name]
            if self.tape is None:
                var = Variable(value, name=name)
            else:
                var = self.tape.variable(value, requires_grad=True, name=name)
            self._bound[name] = var
        return var

    def has(self, name: str) -> bool:
        return name in self.store

    def running(self, prefix: str) -> RunningStats:
        mean_name, var_name = f"{prefix}.running_mean", f"{prefix}.running_var"

        def write_back(mean, var):
            self.store[mean_name] = mean
            self.store[var_name] = var

        return RunningStats(self.store[mean_name], self.store[var_name], on_update=write_back)

    def gradients(self) -> "OrderedDict[str, np.ndarray]":
        """
        d(root)/d(param) for every trainable parameter after a backward pass;
        parameters the pass never touched get zeros.
        """
        grads: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for name in self.store.trainable():
            var = self._bound.get(name)
            grads[name] = var.grad if var is not None else np.zeros_like(self.store[name])
        return grads
