#!/usr/bin/env python3
"""Base classes for parameterized networks."""

import logging
from collections import OrderedDict
from typing import Any, Dict, Iterator, List, Tuple

import numpy as np

from ..exceptions import ShapeError, ValidationError, format_shape
from ..tensor import Tensor

# Module logger
logger = logging.getLogger("pcdlib")


class Parameter(Tensor):
    """A trainable tensor.

    Attributes:
        decay: False for tensors excluded from weight decay and trust-ratio
            scaling (biases and BN affine parameters)
    """

    def __init__(self, data, decay: bool = True, name: str = "") -> None:
        super().__init__(data, requires_grad=True, name=name)
        self.decay = decay


class Module:
    """Base class for all layers and networks.

    Parameters are discovered from instance attributes in assignment order;
    non-trainable state (BN running statistics) lives in ``_buffers``.
    """

    kind = "module"

    def __init__(self) -> None:
        self.training = True
        self._buffers: Dict[str, np.ndarray] = OrderedDict()

    def __call__(self, *args: Any, **kwargs: Any) -> Any:
        return self.forward(*args, **kwargs)

    def forward(self, *args: Any, **kwargs: Any) -> Any:
        raise NotImplementedError

    def children(self) -> Iterator[Tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value

    def named_modules(self, prefix: str = "") -> Iterator[Tuple[str, "Module"]]:
        """This module and every descendant, depth first, by dotted path."""
        yield prefix.rstrip("."), self
        for name, child in self.children():
            yield from child.named_modules(prefix + name + ".")

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix + name + ".")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def _state_items(self, prefix: str) -> Iterator[Tuple[str, Any]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value._state_items(prefix + name + ".")
        for name in self._buffers:
            yield prefix + name, (self, name)

    def state_dict(self, prefix: str = "") -> "OrderedDict[str, np.ndarray]":
        """Parameters and buffers by dotted path, as float32 copies."""
        out: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for path, ref in self._state_items(prefix):
            if isinstance(ref, Parameter):
                out[path] = np.array(ref.data, dtype=np.float32)
            else:
                owner, name = ref
                out[path] = np.array(owner._buffers[name], dtype=np.float32)
        return out

    def load_state_dict(self, state: Dict[str, np.ndarray], prefix: str = "", strict: bool = True) -> None:
        expected = dict(self._state_items(prefix))
        if strict:
            missing = [p for p in expected if p not in state]
            unexpected = [p for p in state if p.startswith(prefix) and p not in expected]
            if missing or unexpected:
                raise ValidationError(
                    f"state mismatch: missing {missing[:5]}, unexpected {unexpected[:5]}",
                    field="state",
                )
        for path, ref in expected.items():
            if path not in state:
                continue
            array = np.asarray(state[path], dtype=np.float32)
            if isinstance(ref, Parameter):
                if array.shape != ref.shape:
                    raise ShapeError("load_state_dict", format_shape(ref.shape), format_shape(array.shape))
                ref.data = np.array(array, dtype=ref.data.dtype)
                ref.grad = None
            else:
                owner, name = ref
                if array.shape != owner._buffers[name].shape:
                    raise ShapeError(
                        "load_state_dict",
                        format_shape(owner._buffers[name].shape),
                        format_shape(array.shape),
                    )
                owner._buffers[name] = np.array(array)

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def freeze(self) -> "Module":
        """Stop recording gradients for every parameter of this module."""
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class frozen_buffers:
    """Context in which forwards of ``module`` leave its buffers unchanged.

    Training-mode batch norm still normalizes with batch statistics; only the
    running-statistics update is discarded on exit.
    """

    def __init__(self, module: Module) -> None:
        self.module = module
        self._saved: List[Tuple[Module, Dict[str, np.ndarray]]] = []

    def __enter__(self) -> "frozen_buffers":
        self._saved = [(m, OrderedDict(m._buffers)) for _, m in self.module.named_modules() if m._buffers]
        return self

    def __exit__(self, *exc) -> None:
        for m, buffers in self._saved:
            m._buffers.update(buffers)
        self._saved = []


class Sequential(Module):
    """Ordered chain of modules, addressed as ``0``, ``1``, ..."""

    kind = "sequential"

    def __init__(self, *layers: Module) -> None:
        super().__init__()
        self._size = 0
        for layer in layers:
            self.append(layer)

    def append(self, layer: Module) -> None:
        setattr(self, str(self._size), layer)
        self._size += 1

    def __len__(self) -> int:
        return self._size

    def __getitem__(self, index: int) -> Module:
        if index < 0:
            index += self._size
        if not 0 <= index < self._size:
            raise IndexError(index)
        return getattr(self, str(index))

    def __iter__(self) -> Iterator[Module]:
        return (getattr(self, str(i)) for i in range(self._size))

    def forward(self, x: Tensor) -> Tensor:
        for layer in self:
            x = layer(x)
        return x
