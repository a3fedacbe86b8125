"""Keep plans: which singular directions of which layer survive compression.

Global policies pick one threshold over the pooled spectrum:

- gamma: keep exactly ``round_half_up(gamma * B_init)`` values (rank preservation ratio)
- epsilon: keep the shortest prefix of the sorted spectrum whose energy reaches
  ``epsilon * E_total`` (energy preservation ratio)

Ablation selectors: ``local`` keeps the same number of values in every layer, ``topk`` drops the
k globally largest values and keeps the rest.

Selections walk the pooled spectrum in its deterministic order, so ties at the threshold are
resolved by (layer_index, layer type, position) and budgets are met exactly.
"""

import logging
import math
from dataclasses import dataclass, field
try:
    from enum import StrEnum
except ImportError:  # Python < 3.11
    from enum import Enum

    class StrEnum(str, Enum):  # type: ignore[no-redef]
        def __str__(self) -> str:
            return str(self.value)

        def __format__(self, format_spec: str) -> str:
            return format(str(self.value), format_spec)
from typing import Iterable, Mapping, NamedTuple

import numpy as np
import numpy.typing as npt

from .adapter.layer import LayerKey
from .errors import DegenerateError, DomainError, EmptyInputError
from .spectral import GlobalSpectrum, SpectralDecomposition, pool_spectrum

logger = logging.getLogger(__name__)


class PolicyKind(StrEnum):
    GAMMA = 'gamma'
    EPSILON = 'epsilon'
    LOCAL = 'local'
    TOPK = 'topk'

    @property
    def is_global(self) -> bool:
        return self in (PolicyKind.GAMMA, PolicyKind.EPSILON)


class Policy(NamedTuple):
    kind: PolicyKind
    value: float

    @classmethod
    def parse(cls, kind: str, value: float | str) -> 'Policy':
        """Build and validate a policy from command-line style inputs.

        Raises:
            DomainError: Unknown kind or value outside the kind's range
        """
        try:
            policy = cls(PolicyKind(kind), float(value))
        except ValueError:
            raise DomainError(f"Invalid policy {kind!r} with value {value!r}") from None
        policy.validate()
        return policy

    def validate(self) -> None:
        """Check the value range of the policy; does not need the spectrum.

        Raises:
            DomainError: gamma/epsilon outside (0, 1], local/topk not a non-negative integer
        """
        if self.kind.is_global:
            if not (math.isfinite(self.value) and 0.0 < self.value <= 1.0):
                raise DomainError(f"{self.kind.value} must lie in (0, 1], got {self.value}")
        elif not (math.isfinite(self.value) and self.value >= 0 and float(self.value).is_integer()):
            raise DomainError(f"{self.kind.value} needs a non-negative integer, got {self.value}")

    def __str__(self) -> str:
        if self.kind.is_global:
            return f"{self.kind.value}={format_value(self.value)}"
        return f"{self.kind.value}={int(self.value)}"


@dataclass(frozen=True, eq=False)
class KeepPlan:
    """Per-layer boolean masks over singular-value positions.

    Attributes:
        threshold: Global threshold tau; NaN for selectors without a threshold
        keep: Mask per layer, indexed by position in the layer's non-increasing spectrum
        kept_total: Number of true entries across masks
        retained_energy_fraction: Kept spectral energy over total spectral energy
        pruned_energy: Sum of squared dropped singular values
        policy: Policy that produced the plan, when known
    """
    threshold: float
    keep: Mapping[LayerKey, npt.NDArray[np.bool_]]
    kept_total: int
    retained_energy_fraction: float
    pruned_energy: float
    policy: Policy | None = field(default=None)

    @property
    def threshold_or_none(self) -> float | None:
        return self.threshold if math.isfinite(self.threshold) else None

    def kept_set(self) -> set[tuple[LayerKey, int]]:
        return {(key, int(j)) for key, mask in self.keep.items() for j in np.flatnonzero(mask)}

    def new_rank(self, key: LayerKey) -> int:
        return int(np.count_nonzero(self.keep[key]))


def format_value(value: float) -> str:
    """Shortest text that reads back as exactly ``value``; integral values drop the ``.0``."""
    text = repr(float(value))
    return text[:-2] if text.endswith('.0') else text


def round_half_up(x: float) -> int:
    return math.floor(x + 0.5)


def threshold_gamma(spectrum: GlobalSpectrum, gamma: float) -> KeepPlan:
    """Keep exactly ``B_tgt = round_half_up(gamma * B_init)`` values.

    The reported threshold is the B_tgt-th largest value; values equal to it beyond the budget
    are dropped in tie order.

    Raises:
        DomainError: gamma not in (0, 1]
        EmptyInputError: Empty spectrum
    """
    policy = Policy(PolicyKind.GAMMA, float(gamma))
    policy.validate()
    _require_values(spectrum)

    b_tgt = min(round_half_up(gamma * spectrum.budget), spectrum.budget)
    selected = np.zeros(len(spectrum), dtype=bool)
    selected[:b_tgt] = True
    threshold = float(spectrum.values[b_tgt - 1]) if b_tgt > 0 else math.inf

    logger.info(f"gamma={gamma:g}: B_tgt={b_tgt} of {spectrum.budget}, tau={threshold:.6g}")
    return _plan_from_selection(spectrum, selected, threshold, policy)


def threshold_epsilon(spectrum: GlobalSpectrum, epsilon: float) -> KeepPlan:
    """Keep the shortest prefix of the sorted spectrum retaining ``epsilon * E_total`` energy.

    Zero singular values contribute no energy and are never kept, even at epsilon = 1.

    Raises:
        DomainError: epsilon not in (0, 1]
        EmptyInputError: Empty spectrum
        DegenerateError: Every singular value is zero
    """
    policy = Policy(PolicyKind.EPSILON, float(epsilon))
    policy.validate()
    _require_values(spectrum)

    cumulative = np.cumsum(spectrum.values ** 2)
    total = float(cumulative[-1])
    if total <= 0.0:
        raise DegenerateError("All singular values are zero; energy-based selection is undefined")

    if epsilon >= 1.0:
        count = int(np.count_nonzero(spectrum.values > 0.0))
    else:
        count = int(np.searchsorted(cumulative, epsilon * total, side='left')) + 1
    selected = np.zeros(len(spectrum), dtype=bool)
    selected[:count] = True
    threshold = float(spectrum.values[count - 1])

    logger.info(f"epsilon={epsilon:g}: kept {count} of {spectrum.budget}, tau={threshold:.6g}")
    return _plan_from_selection(spectrum, selected, threshold, policy)


def local_uniform_plan(decomps: Iterable[SpectralDecomposition], r_local: int) -> KeepPlan:
    """Keep the ``min(r_local, rank)`` largest values of every layer independently.

    Raises:
        DomainError: r_local is negative
    """
    policy = Policy(PolicyKind.LOCAL, float(r_local))
    policy.validate()
    decomps = list(decomps)

    keep: dict[LayerKey, npt.NDArray[np.bool_]] = {}
    kept_energy = 0.0
    total_energy = 0.0
    for d in decomps:
        mask = np.zeros(d.original_rank, dtype=bool)
        mask[:min(int(r_local), d.original_rank)] = True
        keep[d.key] = mask
        energies = d.sigma ** 2
        kept_energy += float(np.sum(energies[mask]))
        total_energy += float(np.sum(energies))

    kept_total = sum(int(np.count_nonzero(m)) for m in keep.values())
    logger.info(f"local r={r_local}: kept {kept_total} values across {len(keep)} layers")
    return KeepPlan(
        threshold=math.nan,
        keep=keep,
        kept_total=kept_total,
        retained_energy_fraction=_fraction(kept_energy, total_energy),
        pruned_energy=max(total_energy - kept_energy, 0.0),
        policy=policy,
    )


def drop_top_k_plan(decomps: Iterable[SpectralDecomposition], k: int) -> KeepPlan:
    """Drop the k globally largest values (in tie order) and keep everything else.

    Raises:
        DomainError: k outside [0, B_init]
    """
    policy = Policy(PolicyKind.TOPK, float(k))
    policy.validate()
    spectrum = pool_spectrum(decomps)
    if k > spectrum.budget:
        raise DomainError(f"topk={k} exceeds the total budget {spectrum.budget}")

    selected = np.ones(len(spectrum), dtype=bool)
    selected[:int(k)] = False

    logger.info(f"topk={k}: dropped {k} of {spectrum.budget} values")
    return _plan_from_selection(spectrum, selected, math.nan, policy)


def local_rank_for_budget(b_tgt: int, n_layers: int) -> int:
    """Uniform rank of the local ablation at a matched global budget: floor(B_tgt / layers)."""
    if n_layers < 1:
        raise DomainError(f"Need at least one layer, got {n_layers}")
    return b_tgt // n_layers


def make_plan(policy: Policy, decomps: list[SpectralDecomposition], spectrum: GlobalSpectrum | None = None) -> KeepPlan:
    """Dispatch a policy to its selector; ``spectrum`` is pooled on demand when not given."""
    policy.validate()
    match policy.kind:
        case PolicyKind.GAMMA:
            return threshold_gamma(spectrum or pool_spectrum(decomps), policy.value)
        case PolicyKind.EPSILON:
            return threshold_epsilon(spectrum or pool_spectrum(decomps), policy.value)
        case PolicyKind.LOCAL:
            return local_uniform_plan(decomps, int(policy.value))
        case PolicyKind.TOPK:
            return drop_top_k_plan(decomps, int(policy.value))
    raise DomainError(f"Unknown policy {policy.kind!r}")


def _require_values(spectrum: GlobalSpectrum) -> None:
    if len(spectrum) == 0:
        raise EmptyInputError("Spectrum is empty")


def _fraction(part: float, whole: float) -> float:
    if whole <= 0.0:
        return 1.0
    return min(part / whole, 1.0)


def _plan_from_selection(spectrum: GlobalSpectrum, selected: npt.NDArray[np.bool_], threshold: float,
                         policy: Policy) -> KeepPlan:
    keep = {key: np.zeros(rank, dtype=bool) for key, rank in zip(spectrum.keys, spectrum.ranks)}
    for owner, position in zip(spectrum.owners[selected], spectrum.positions[selected]):
        keep[spectrum.keys[owner]][position] = True

    energies = spectrum.values ** 2
    kept_energy = float(np.sum(energies[selected]))
    pruned_energy = float(np.sum(energies[~selected]))
    return KeepPlan(
        threshold=threshold,
        keep=keep,
        kept_total=int(np.count_nonzero(selected)),
        retained_energy_fraction=_fraction(kept_energy, kept_energy + pruned_energy),
        pruned_energy=pruned_energy,
        policy=policy,
    )
