"""Singlet-return traces shared by the simulator, the fitters and the CLI."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import fileio
from .errors import InvalidParams

AXIS_KINDS = ("tau_S", "tau", "distance")
AXIS_UNITS = {"tau_S": "ns", "tau": "ns", "distance": "nm"}


@dataclass(frozen=True, eq=False)
class SingletTrace:
    axis_kind: str
    abscissa: np.ndarray
    ps: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.axis_kind not in AXIS_KINDS:
            raise InvalidParams(f"axis_kind must be one of {AXIS_KINDS}")
        a = np.asarray(self.abscissa, float)
        p = np.asarray(self.ps, float)
        if a.shape != p.shape or a.ndim != 1:
            raise InvalidParams("abscissa and P_S must be 1D arrays of equal length")
        if np.any(np.diff(a) <= 0):
            raise InvalidParams("abscissa must be strictly increasing")
        if np.any((p < -1e-12) | (p > 1 + 1e-12)):
            raise InvalidParams("P_S must lie in [0, 1]")
        object.__setattr__(self, "abscissa", a)
        object.__setattr__(self, "ps", np.clip(p, 0.0, 1.0))

    def __len__(self):
        return len(self.abscissa)

    def write_csv(self, path):
        header = {"kind": "singlet_trace", "axis_kind": self.axis_kind,
                  "units": AXIS_UNITS[self.axis_kind], "version": fileio.FORMAT_VERSION,
                  "metadata": self.metadata}
        name = f"{self.axis_kind}_{AXIS_UNITS[self.axis_kind]}"
        return fileio.write_columns(path, {name: self.abscissa, "P_S": self.ps}, header=header)

    @classmethod
    def read_csv(cls, path):
        header, cols = fileio.read_columns(path)
        kind = header["axis_kind"]
        name = f"{kind}_{AXIS_UNITS[kind]}"
        return cls(kind, cols[name], cols["P_S"], header.get("metadata", {}))
