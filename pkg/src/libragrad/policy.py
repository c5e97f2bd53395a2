from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass, replace

__all__ = ["GradPolicy", "PolicyError", "FLAG_NAMES"]

FLAG_NAMES = ("libra_layernorm", "libra_attention", "libra_activation", "libra_selfgate")


class PolicyError(ValueError):
    pass


@dataclass(frozen=True)
class GradPolicy:
    """Which backward rule each non-affine component uses.

    Flags only change the backward pass; forward values are identical under
    every policy. ``elemwise_coeffs`` are the branch scales used by the
    self-gating product when ``libra_selfgate`` is on and must sum to one.
    """

    libra_layernorm: bool = False
    libra_attention: bool = False
    libra_activation: bool = False
    libra_selfgate: bool = False
    include_biases: bool = True
    elemwise_coeffs: tuple[float, float] = (0.5, 0.5)

    def __post_init__(self):
        a, b = self.elemwise_coeffs
        object.__setattr__(self, "elemwise_coeffs", (float(a), float(b)))
        if self.libra_selfgate and abs(a + b - 1.0) > 1e-12:
            raise PolicyError(f"elemwise_coeffs must sum to 1, got {a} + {b}")

    @classmethod
    def standard(cls, include_biases: bool = True) -> "GradPolicy":
        return cls(include_biases=include_biases)

    @classmethod
    def libra(cls, include_biases: bool = True) -> "GradPolicy":
        return cls(True, True, True, True, include_biases)

    @classmethod
    def combinations(cls, include_biases: bool = True) -> list["GradPolicy"]:
        """All 16 on/off settings of the four component flags."""
        return [cls(*flags, include_biases=include_biases)
                for flags in itertools.product((False, True), repeat=4)]

    @property
    def flags(self) -> tuple[bool, bool, bool, bool]:
        return tuple(getattr(self, n) for n in FLAG_NAMES)

    @property
    def is_full_libra(self) -> bool:
        return all(self.flags)

    @property
    def label(self) -> str:
        if self.is_full_libra:
            name = "libra"
        elif not any(self.flags):
            name = "standard"
        else:
            name = "+".join(n.removeprefix("libra_") for n, on in zip(FLAG_NAMES, self.flags) if on)
        return name if self.include_biases else name + "/nobias"

    def with_(self, **changes) -> "GradPolicy":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["elemwise_coeffs"] = list(self.elemwise_coeffs)
        return d
