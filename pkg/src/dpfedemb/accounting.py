"""Privacy accounting for the sampled Gaussian and tree mechanisms.

* RDP of the Poisson-subsampled Gaussian mechanism, composed over rounds and
  converted to (epsilon, delta) with the classic bound
  ``eps = min_a [rdp(a) + log(1/delta) / (a - 1)]``.
* zCDP of single-participation binary-tree noise, converted with
  ``eps = rho + 2 sqrt(rho log(1/delta))``.
* The privacy/computation extrapolation sweep: scale clients per round and
  noise multiplier by the same factor and report epsilon.

``+inf`` is a legitimate value everywhere (e.g. zero noise) and propagates
through composition and conversion.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import IO, Iterable, Sequence

import numpy as np
from scipy.special import logsumexp

from . import kernels

DEFAULT_ORDERS: tuple[float, ...] = (1.25, 1.5, *map(float, range(2, 257)))
NEIGHBORING = ("add_remove_poisson", "substitute_conservative")


def _is_integer(a: float) -> bool:
    return float(a).is_integer()


def _log_a_frac(q: float, sigma: float, alpha: float) -> float:
    """``log E_{z~N(0,s^2)} [(1 - q + q exp((2z-1)/(2 s^2)))^alpha]`` by
    trapezoidal quadrature of the log-integrand on a fine grid.

    The integrand has at most two bumps of width ~sigma, near 0 and near
    alpha; the grid spans both with 40 sigma margins at step sigma/50.
    """
    lo = -40.0 * sigma
    hi = alpha + 40.0 * sigma
    step = sigma / 50.0
    z = np.linspace(lo, hi, int(math.ceil((hi - lo) / step)) + 1)
    log_mix = np.logaddexp(math.log1p(-q), math.log(q) + (2.0 * z - 1.0) / (2.0 * sigma ** 2))
    log_f = -z ** 2 / (2.0 * sigma ** 2) - math.log(sigma * math.sqrt(2.0 * math.pi)) + alpha * log_mix
    dz = z[1] - z[0]
    weights = np.full(z.shape, math.log(dz))
    weights[0] = weights[-1] = math.log(dz / 2.0)
    return float(logsumexp(log_f + weights))


def rdp_subsampled_gaussian_step(q: float, sigma: float, orders: Sequence[float] = DEFAULT_ORDERS) -> np.ndarray:
    """Per-round RDP of the sampled Gaussian mechanism at each order.

    Integer orders use the exact binomial expansion; fractional orders fall
    back to numerical integration.
    """
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"sampling rate must be in [0, 1], got {q}")
    if sigma < 0:
        raise ValueError("noise multiplier must be >= 0")
    orders = np.asarray(orders, dtype=np.float64)
    if np.any(orders <= 1):
        raise ValueError("RDP orders must be > 1")
    if q == 0:
        return np.zeros_like(orders)
    if sigma == 0:
        return np.full_like(orders, np.inf)
    if q == 1.0:
        return orders / (2.0 * sigma ** 2)
    out = np.empty_like(orders)
    for i, a in enumerate(orders):
        if _is_integer(a):
            log_a = kernels.log_a_int(q, sigma, int(a))
        else:
            log_a = _log_a_frac(q, sigma, float(a))
        out[i] = max(log_a / (a - 1.0), 0.0)
    return out


@dataclass(frozen=True)
class DpGuarantee:
    epsilon: float
    delta: float
    order: float | None = None


@dataclass(frozen=True)
class RdpAccountant:
    orders: np.ndarray = field(default_factory=lambda: np.array(DEFAULT_ORDERS))
    eps_rdp: np.ndarray | None = None
    neighboring: str = "add_remove_poisson"
    steps: int = 0

    def __post_init__(self):
        if self.neighboring not in NEIGHBORING:
            raise ValueError(f"neighboring must be one of {NEIGHBORING}")
        orders = np.asarray(self.orders, dtype=np.float64)
        object.__setattr__(self, "orders", orders)
        if self.eps_rdp is None:
            object.__setattr__(self, "eps_rdp", np.zeros_like(orders))

    @property
    def sensitivity_factor(self) -> float:
        # Substituting a user can move one clipped update by 2*gamma.
        return 2.0 if self.neighboring == "substitute_conservative" else 1.0


def compose(acc: RdpAccountant, step_rdp: np.ndarray, num_steps: int = 1) -> RdpAccountant:
    if num_steps < 0:
        raise ValueError("num_steps must be >= 0")
    if num_steps == 0:
        return acc
    step_rdp = np.asarray(step_rdp, dtype=np.float64)
    if step_rdp.shape != acc.orders.shape:
        raise ValueError("step RDP does not match the accountant's orders")
    return replace(acc, eps_rdp=acc.eps_rdp + num_steps * step_rdp, steps=acc.steps + num_steps)


def compose_sampled_gaussian(acc: RdpAccountant, q: float, sigma: float, num_steps: int = 1) -> RdpAccountant:
    """Compose ``num_steps`` rounds of sampling rate ``q`` and noise ``sigma``
    under the accountant's neighboring relation."""
    step = rdp_subsampled_gaussian_step(q, sigma / acc.sensitivity_factor, acc.orders)
    return compose(acc, step, num_steps)


def rdp_to_dp(acc: RdpAccountant, delta: float) -> DpGuarantee:
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must be in (0, 1), got {delta}")
    if not np.any(acc.eps_rdp > 0):
        return DpGuarantee(0.0, delta)
    with np.errstate(invalid="ignore"):
        eps = acc.eps_rdp + math.log(1.0 / delta) / (acc.orders - 1.0)
    i = int(np.argmin(eps))
    if not np.isfinite(eps[i]):
        return DpGuarantee(math.inf, delta)
    return DpGuarantee(float(eps[i]), delta, float(acc.orders[i]))


def account_gaussian(q: float, sigma: float, rounds: int, delta: float,
                     neighboring: str = "add_remove_poisson",
                     orders: Sequence[float] = DEFAULT_ORDERS) -> DpGuarantee:
    acc = RdpAccountant(np.asarray(orders), neighboring=neighboring)
    return rdp_to_dp(compose_sampled_gaussian(acc, q, sigma, rounds), delta)


@dataclass(frozen=True)
class ZcdpAccountant:
    rho: float = 0.0

    def compose(self, other: "ZcdpAccountant") -> "ZcdpAccountant":
        return ZcdpAccountant(self.rho + other.rho)


def tree_depth(rounds: int) -> int:
    """``ceil(log2 T) + 1``: nodes on a root-to-leaf path."""
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    return (rounds - 1).bit_length() + 1


def zcdp_tree_single_participation(rounds: int, sigma: float) -> ZcdpAccountant:
    """zCDP of tree noise when every user contributes to a single leaf."""
    if sigma < 0:
        raise ValueError("noise multiplier must be >= 0")
    d = tree_depth(rounds)
    if sigma == 0:
        return ZcdpAccountant(math.inf)
    return ZcdpAccountant(d / (2.0 * sigma ** 2))


def zcdp_to_dp(rho: float, delta: float) -> DpGuarantee:
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must be in (0, 1), got {delta}")
    if rho < 0:
        raise ValueError("rho must be >= 0")
    if math.isinf(rho):
        return DpGuarantee(math.inf, delta)
    return DpGuarantee(rho + 2.0 * math.sqrt(rho * math.log(1.0 / delta)), delta)


# ---------------------------------------------------------------------------
# Extrapolation
# ---------------------------------------------------------------------------

SWEEP_COLUMNS = ("k", "users_per_round", "q", "sigma", "rounds", "delta",
                 "epsilon_add_remove", "epsilon_substitute", "rho", "epsilon_zcdp")


@dataclass(frozen=True)
class SweepRow:
    k: float
    users_per_round: int
    q: float
    sigma: float
    rounds: int
    delta: float
    epsilon_add_remove: float
    epsilon_substitute: float
    rho: float
    epsilon_zcdp: float


def privacy_row(k: float, users_per_round: int, total_users: int, sigma: float, rounds: int,
                delta: float) -> SweepRow:
    if users_per_round > total_users:
        raise ValueError(f"{users_per_round} users per round exceeds {total_users} total users")
    q = users_per_round / total_users
    rho = zcdp_tree_single_participation(rounds, sigma).rho if rounds > 0 else 0.0
    return SweepRow(
        k=k,
        users_per_round=users_per_round,
        q=q,
        sigma=sigma,
        rounds=rounds,
        delta=delta,
        epsilon_add_remove=account_gaussian(q, sigma, rounds, delta, "add_remove_poisson").epsilon,
        epsilon_substitute=account_gaussian(q, sigma, rounds, delta, "substitute_conservative").epsilon,
        rho=rho,
        epsilon_zcdp=zcdp_to_dp(rho, delta).epsilon,
    )


def extrapolate_sweep(base_sigma: float, base_clients: int, users_per_vc: int, rounds: int,
                      total_users: int, delta: float, scale_factors: Iterable[float]) -> list[SweepRow]:
    """Scale clients per round and noise together by each factor ``k``.

    Row ``k`` has ``k * base_clients * users_per_vc`` users per round and noise
    multiplier ``k * base_sigma``.
    """
    rows = []
    for k in scale_factors:
        if k <= 0:
            raise ValueError("scale factors must be positive")
        users = int(round(k * base_clients * users_per_vc))
        if users > total_users:
            raise ValueError(f"k={k}: sampling rate {users}/{total_users} exceeds 1")
        rows.append(privacy_row(k, users, total_users, k * base_sigma, rounds, delta))
    return rows


def write_sweep_csv(rows: Sequence[SweepRow], fh: IO[str]) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for r in rows:
        w.writerow([_fmt(getattr(r, c)) for c in SWEEP_COLUMNS])


def _fmt(v) -> str:
    if isinstance(v, float):
        if math.isinf(v):
            return "inf"
        return repr(v)
    return str(v)
