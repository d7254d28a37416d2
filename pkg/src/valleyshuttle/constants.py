"""Physical constants in the package unit system (nm, ns, ueV, T)."""

from dataclasses import dataclass


@dataclass(frozen=True)
class PhysicalConstants:
    mu_B: float = 57.8838  # ueV / T
    hbar: float = 0.658212  # ueV * ns
    g0: float = 2.0

    def __post_init__(self):
        for name in ("mu_B", "hbar", "g0"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")

    def zeeman(self, B, g=None):
        """Zeeman energy g*mu_B*B in ueV."""
        return (self.g0 if g is None else g) * self.mu_B * B


CONSTANTS = PhysicalConstants()
MU_B = CONSTANTS.mu_B
HBAR = CONSTANTS.hbar
G0 = CONSTANTS.g0
