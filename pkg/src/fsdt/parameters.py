"""Named-parameter containers shared by the client and server models."""
from __future__ import annotations

import hashlib
from collections import OrderedDict

import numpy as np

from .autodiff import Tensor, zero_grads


class ParamModule:
    """Ordered collection of named parameter tensors.

    Provides the freeze/copy/hash plumbing the federation loop relies
    on: byte hashes certify freeze contracts, array export/import backs
    aggregation and distribution, and registration order is stable so
    checkpoints and hashes are reproducible.
    """

    def __init__(self):
        self._params: OrderedDict[str, Tensor] = OrderedDict()

    def _add(self, name: str, array: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(array, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def parameters(self) -> list[Tensor]:
        return list(self._params.values())

    def named_parameters(self) -> OrderedDict[str, Tensor]:
        return OrderedDict(self._params)

    def set_frozen(self, flag: bool) -> None:
        for p in self._params.values():
            p.frozen = flag

    def zero_grad(self) -> None:
        zero_grads(self._params.values())

    def param_count(self) -> int:
        return sum(p.data.size for p in self._params.values())

    def payload_bytes(self, bytes_per_scalar: int = 8) -> int:
        """Wire size of one full copy of the parameters."""
        return self.param_count() * bytes_per_scalar

    def byte_hash(self) -> str:
        """SHA-256 over names, shapes and little-endian parameter bytes."""
        digest = hashlib.sha256()
        for name, p in self._params.items():
            digest.update(name.encode("utf-8"))
            digest.update(repr(p.data.shape).encode("ascii"))
            digest.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        return digest.hexdigest()

    def export_arrays(self) -> OrderedDict[str, np.ndarray]:
        return OrderedDict((name, p.data.copy()) for name, p in self._params.items())

    def load_arrays(self, arrays) -> None:
        missing = set(self._params) - set(arrays)
        extra = set(arrays) - set(self._params)
        if missing or extra:
            raise ValueError(f"parameter name mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, p in self._params.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name!r}: {arr.shape} vs {p.data.shape}")
            p.data = arr.copy()
