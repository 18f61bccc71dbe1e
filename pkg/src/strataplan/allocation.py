"""Multivariate stratified allocation under coefficient-of-variation constraints.

Builds the variance-input problem from a baseline sample, evaluates design
CVs for any allocation, and solves three allocation rules:

* single-variable minimum-size allocation proportional to N_h * S_h (with
  design effects and finite population correction),
* the element-wise maximum of those per-variable allocations, and
* the minimum-cost allocation meeting every (domain, variable) CV bound
  simultaneously, via a normalised-multiplier fixed point.

The multi-constraint solver exploits that each CV constraint

    sum_h DEFF_h (1 - n_h/N_h) N_h^2 S_h^2 / n_h  <=  (g Y)^2

is equivalent to ``sum_h A_h / n_h <= (g Y)^2 + sum_h A_h / N_h`` with
``A_h = DEFF_h N_h^2 S_h^2``, restoring a convex 1/n form exactly.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from ._util import ceil_tol, round_half_even
from .popgen import VARIABLES, SyntheticPopulation
from .sampling import Allocation, BaselineSummary


@dataclass(frozen=True)
class PrecisionTargets:
    """CV upper bounds: one national bound and one domain bound per variable."""

    national: dict
    domain: dict

    def __post_init__(self):
        for label, table in (("national", self.national), ("domain", self.domain)):
            for var, g in table.items():
                if not 0 < g < 1:
                    raise ValueError(f"{label} CV bound for {var} must be in (0,1), got {g}")

    def bound(self, variable: str, d: int) -> float:
        """Bound for domain d (0 = national)."""
        return self.national[variable] if d == 0 else self.domain[variable]


def default_targets(variables=VARIABLES, national: float = 0.03, domain: float = 0.08) -> PrecisionTargets:
    return PrecisionTargets(
        national={v: national for v in variables},
        domain={v: domain for v in variables},
    )


@dataclass
class VarianceInputs:
    """Problem data for the allocation rules.

    Strata nest in domains, so a domain constraint sums only over its own
    strata while the national constraint (d = 0) sums over all of them.
    ``anticipated_totals[var]`` is indexed 0..D with 0 = national.
    """

    variables: tuple
    stratum_sizes: np.ndarray
    domain_of: np.ndarray
    s2: dict                    # variable -> (H,) within-stratum variances
    deff: dict                  # variable -> (H,) design effects
    anticipated_totals: dict    # variable -> (D+1,)
    costs: np.ndarray
    n_min: np.ndarray

    def __post_init__(self):
        self.stratum_sizes = np.asarray(self.stratum_sizes, dtype=np.int64)
        self.domain_of = np.asarray(self.domain_of, dtype=np.int64)
        self.costs = np.asarray(self.costs, dtype=float)
        self.n_min = np.asarray(self.n_min, dtype=np.int64)
        for var in self.variables:
            self.s2[var] = np.asarray(self.s2[var], dtype=float)
            self.deff[var] = np.asarray(self.deff[var], dtype=float)
            self.anticipated_totals[var] = np.asarray(self.anticipated_totals[var], dtype=float)
            if np.any(self.s2[var] < 0):
                raise ValueError(f"negative variance for {var}")
            if np.any(self.deff[var] < 1):
                raise ValueError(f"design effects for {var} must be >= 1")
        if np.any(self.costs <= 0):
            raise ValueError("unit costs must be positive")
        if np.any(self.n_min < 1):
            raise ValueError("per-stratum minimums must be >= 1")

    @property
    def n_strata(self) -> int:
        return len(self.stratum_sizes)

    @property
    def n_domains(self) -> int:
        return int(self.domain_of.max()) + 1

    def domain_mask(self, d: int) -> np.ndarray:
        if d == 0:
            return np.ones(self.n_strata, dtype=bool)
        return self.domain_of == d - 1

    def to_json(self, path, targets: PrecisionTargets | None = None) -> None:
        payload = {
            "variables": list(self.variables),
            "stratum_sizes": self.stratum_sizes.tolist(),
            "domain_of": self.domain_of.tolist(),
            "s2": {v: self.s2[v].tolist() for v in self.variables},
            "deff": {v: self.deff[v].tolist() for v in self.variables},
            "anticipated_totals": {v: self.anticipated_totals[v].tolist() for v in self.variables},
            "costs": self.costs.tolist(),
            "n_min": self.n_min.tolist(),
        }
        if targets is not None:
            payload["targets"] = {"national": targets.national, "domain": targets.domain}
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=1, sort_keys=True)

    @staticmethod
    def from_json(path):
        """Returns (VarianceInputs, PrecisionTargets or None)."""
        with open(path) as fh:
            payload = json.load(fh)
        variables = tuple(payload["variables"])
        inputs = VarianceInputs(
            variables=variables,
            stratum_sizes=payload["stratum_sizes"],
            domain_of=payload["domain_of"],
            s2={v: payload["s2"][v] for v in variables},
            deff={v: payload["deff"][v] for v in variables},
            anticipated_totals={v: payload["anticipated_totals"][v] for v in variables},
            costs=payload["costs"],
            n_min=payload["n_min"],
        )
        targets = None
        if "targets" in payload:
            targets = PrecisionTargets(
                national=payload["targets"]["national"],
                domain=payload["targets"]["domain"],
            )
        return inputs, targets


def build_variance_inputs(
    baseline: BaselineSummary,
    population: SyntheticPopulation,
    n_min: int = 2,
    costs: np.ndarray | None = None,
) -> VarianceInputs:
    """Anticipated totals and variance components from a baseline summary.

    Binary strata whose sample shows zero spread get a small positive
    variance floor so no constrained cell degenerates to zero.
    """
    strata = population.strata
    sizes = strata.sizes
    n_domains = strata.n_domains
    variables = VARIABLES
    s2, deff, totals = {}, {}, {}
    floored = []
    for var in variables:
        var_s2 = baseline.sds[var] ** 2
        if var in ("employment", "unemployment"):
            zero = np.flatnonzero(var_s2 == 0)
            if len(zero):
                n0 = baseline.n0[zero].astype(float)
                p_floor = 0.5 / n0
                var_s2 = var_s2.copy()
                var_s2[zero] = p_floor * (1 - p_floor) / (n0 - 1)
                floored.extend((var, int(h)) for h in zero)
        s2[var] = var_s2
        deff[var] = strata.deff.copy()
        y = np.empty(n_domains + 1)
        contributions = sizes * baseline.means[var]
        y[0] = contributions.sum()
        for d in range(1, n_domains + 1):
            y[d] = contributions[strata.domain_of == d - 1].sum()
        totals[var] = y
    if floored:
        warnings.warn(
            f"variance floor applied to zero-spread binary cells: {floored}",
            stacklevel=2,
        )
    bad = [
        (var, d)
        for var in variables
        for d in range(n_domains + 1)
        if totals[var][d] <= 0
    ]
    if bad:
        raise ValueError(f"anticipated totals must be positive; offending (variable, domain) cells: {bad}")
    return VarianceInputs(
        variables=variables,
        stratum_sizes=sizes.copy(),
        domain_of=strata.domain_of.copy(),
        s2=s2,
        deff=deff,
        anticipated_totals=totals,
        costs=np.ones(strata.n_strata) if costs is None else np.asarray(costs, float),
        n_min=np.full(strata.n_strata, n_min, dtype=np.int64),
    )


def variance_of_total(allocation: Allocation, inputs: VarianceInputs, variable: str, d: int) -> float:
    """Design variance of the estimated total for domain d (0 = national)."""
    mask = inputs.domain_mask(d)
    n = allocation.counts[mask].astype(float)
    big_n = inputs.stratum_sizes[mask].astype(float)
    s2 = inputs.s2[variable][mask]
    deff = inputs.deff[variable][mask]
    starved = (n == 0) & (s2 > 0)
    if np.any(starved):
        raise ValueError(
            f"zero sample in strata with positive variance for {variable}, domain {d}"
        )
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(s2 > 0, deff * (1 - n / big_n) * big_n**2 * s2 / np.where(n > 0, n, 1.0), 0.0)
    return float(terms.sum())


def cv_of(allocation: Allocation, inputs: VarianceInputs, variable: str, d: int) -> float:
    """CV of the estimated domain total under the given allocation."""
    y = float(inputs.anticipated_totals[variable][d])
    if y <= 0:
        raise ValueError(f"anticipated total for {variable}, domain {d} must be positive")
    return float(np.sqrt(variance_of_total(allocation, inputs, variable, d)) / y)


def all_cvs(allocation: Allocation, inputs: VarianceInputs) -> dict:
    """(variable, domain) -> CV for every constrained cell."""
    return {
        (var, d): cv_of(allocation, inputs, var, d)
        for var in inputs.variables
        for d in range(inputs.n_domains + 1)
    }


# ---------------------------------------------------------------------------
# Single-variable allocation and the element-wise maximum rule
# ---------------------------------------------------------------------------


def neyman_allocation(
    inputs: VarianceInputs, variable: str, g_national: float | None = None,
    targets: PrecisionTargets | None = None,
) -> Allocation:
    """Allocation proportional to N_h S_h sqrt(DEFF_h), sized for the national CV.

    The total is the smallest real n whose proportional split meets the
    national bound (take-all strata are peeled off iteratively); per-stratum
    values are then ceiled and clamped to [n_min, N_h].
    """
    if g_national is None:
        if targets is None:
            raise ValueError("provide g_national or targets")
        g_national = targets.bound(variable, 0)
    s = np.sqrt(inputs.s2[variable])
    if np.all(s == 0):
        raise ValueError(f"all stratum variances are zero for {variable}")
    deff = inputs.deff[variable]
    big_n = inputs.stratum_sizes.astype(float)
    y = float(inputs.anticipated_totals[variable][0])
    target_var = (g_national * y) ** 2

    weight = big_n * s * np.sqrt(deff)
    take_all = np.zeros(inputs.n_strata, dtype=bool)
    n_real = np.zeros(inputs.n_strata)
    for _ in range(inputs.n_strata + 1):
        free = ~take_all & (weight > 0)
        if not free.any():
            break
        numer = weight[free].sum() ** 2
        denom = target_var + (deff[free] * big_n[free] * s[free] ** 2).sum()
        total = numer / denom
        shares = weight[free] / weight[free].sum()
        n_real[free] = total * shares
        overs = free & (n_real > big_n)
        if not overs.any():
            break
        take_all |= overs
    n_real[take_all] = big_n[take_all]
    counts = np.minimum(
        np.maximum(ceil_tol(n_real), inputs.n_min), inputs.stratum_sizes
    )
    return Allocation(counts, provenance=f"neyman({variable})")


def nso_max_allocation(per_variable: dict) -> Allocation:
    """Element-wise maximum of per-variable allocations over the same strata."""
    allocs = list(per_variable.values())
    if not allocs:
        raise ValueError("need at least one allocation")
    counts = allocs[0].counts.copy()
    for a in allocs[1:]:
        if len(a.counts) != len(counts):
            raise ValueError("allocations cover different strata")
        counts = np.maximum(counts, a.counts)
    return Allocation(counts, provenance="nso_max")


# ---------------------------------------------------------------------------
# Minimum-cost multi-constraint allocation
# ---------------------------------------------------------------------------


@dataclass
class BethelSolution:
    """Continuous and rounded solutions plus solver diagnostics."""

    continuous: np.ndarray
    allocation: Allocation
    iterations: int
    multipliers: dict            # (variable, domain) -> normalised multiplier
    slacks: dict                 # (variable, domain) -> relative slack of rounded solution
    active: list                 # constraints with relative slack < 1e-6
    cost: float


class BethelAllocator(BaseEstimator):
    """Minimum-cost allocation meeting every (domain, variable) CV bound.

    Normalised-multiplier fixed point: given multipliers ``lam`` summing to
    one, the direction ``u_h = sqrt(sum_j lam_j a_hj / c_h)`` is scaled to
    feasibility, and each multiplier is updated in proportion to how close
    its constraint is to binding, with damping.  Take-all and minimum-size
    strata are pinned and the reduced problem re-solved until clean.

    Parameters
    ----------
    damping : weight on the fresh multiplier update per iteration.
    tol : relative feasibility tolerance for the continuous solution.
    multiplier_tol : convergence threshold on the multiplier change.
    max_iter : fixed-point iteration budget per reduced problem.
    """

    def __init__(self, damping=0.5, tol=1e-9, multiplier_tol=1e-10, max_iter=10000):
        self.damping = damping
        self.tol = tol
        self.multiplier_tol = multiplier_tol
        self.max_iter = max_iter

    def fit(self, inputs: VarianceInputs, targets: PrecisionTargets):
        cells = [
            (var, d) for var in inputs.variables for d in range(inputs.n_domains + 1)
        ]
        h_count = inputs.n_strata
        a = np.zeros((h_count, len(cells)))
        v = np.zeros(len(cells))
        big_n = inputs.stratum_sizes.astype(float)
        for j, (var, d) in enumerate(cells):
            mask = inputs.domain_mask(d)
            col = np.where(mask, inputs.deff[var] * big_n**2 * inputs.s2[var], 0.0)
            y = float(inputs.anticipated_totals[var][d])
            if y <= 0:
                raise ValueError(f"anticipated total must be positive for cell {(var, d)}")
            a[:, j] = col
            v[j] = (targets.bound(var, d) * y) ** 2 + (col / big_n).sum()
        a_norm = a / v  # constraint form: sum_h a_norm[h, j] / n_h <= 1

        fixed = np.full(h_count, -1.0)  # <0 means free
        zero_rows = a_norm.sum(axis=1) == 0
        fixed[zero_rows] = inputs.n_min[zero_rows]
        lam = np.full(len(cells), 1.0 / len(cells))
        n_cont = np.zeros(h_count)
        iterations = 0
        for _outer in range(h_count + 2):
            free = fixed < 0
            if not free.any():
                n_cont = fixed.copy()
                break
            pinned = ~free
            denom = np.where(pinned, fixed, 1.0)
            contrib = np.where(pinned[:, None], a_norm / denom[:, None], 0.0)
            rhs = 1.0 - contrib.sum(axis=0)
            if np.any(rhs <= 0):
                bad = [cells[j] for j in np.flatnonzero(rhs <= 0)]
                raise ValueError(f"infeasible problem data for cells {bad}")
            a_red = a_norm[free] / rhs
            lam, n_free, iterations = self._fixed_point(a_red, inputs.costs[free], lam)
            n_cont = fixed.copy()
            n_cont[free] = n_free
            overs = free & (n_cont > big_n)
            if overs.any():
                fixed[overs] = big_n[overs]
                continue
            unders = free & (n_cont < inputs.n_min)
            if unders.any():
                fixed[unders] = inputs.n_min[unders]
                continue
            break

        counts = np.minimum(np.maximum(ceil_tol(n_cont), inputs.n_min), inputs.stratum_sizes)
        counts = self._greedy_trim(counts, a, v, inputs)
        allocation = Allocation(counts, provenance="bethel")

        lhs = (a / counts[:, None]).sum(axis=0)
        slack = (v - lhs) / v
        violated = np.flatnonzero(slack < -self.tol)
        if len(violated):
            raise RuntimeError(
                f"rounded solution violates constraints {[cells[j] for j in violated]}"
            )
        cont_slack = 1.0 - (a_norm / n_cont[:, None]).sum(axis=0)
        self.solution_ = BethelSolution(
            continuous=n_cont,
            allocation=allocation,
            iterations=iterations,
            multipliers={cells[j]: float(lam[j]) for j in range(len(cells))},
            slacks={cells[j]: float(slack[j]) for j in range(len(cells))},
            active=[cells[j] for j in np.flatnonzero(cont_slack < 1e-6)],
            cost=float((inputs.costs * counts).sum()),
        )
        self.allocation_ = allocation
        return self

    def _fixed_point(self, a, costs, lam0):
        """Solve the reduced problem; returns (multipliers, n per free stratum, iters)."""
        lam = lam0 / lam0.sum()
        n = None
        for it in range(1, self.max_iter + 1):
            pressure = a @ lam
            u = np.sqrt(pressure / costs)
            live = u > 0
            if not live.any():
                raise RuntimeError("all multiplier pressure vanished")
            rho = np.where(live[:, None], a / np.where(live, u, 1.0)[:, None], 0.0).sum(axis=0)
            scale = rho.max()
            if scale <= 0:
                raise RuntimeError("constraints vanished; nothing to solve")
            n = scale * u
            ratio = rho / scale
            lam_new = np.maximum(lam * ratio, 1e-250)
            lam_new /= lam_new.sum()
            step = self.damping * lam_new + (1 - self.damping) * lam
            delta = np.abs(step - lam).max()
            lam = step
            if delta < self.multiplier_tol:
                return lam, n, it
        residual = (a / n).sum(axis=0) - 1.0
        raise RuntimeError(
            f"allocation fixed point did not converge in {self.max_iter} iterations; "
            f"max residual {residual.max():.3e}"
        )

    def _greedy_trim(self, counts, a, v, inputs):
        """Walk integer counts down where constraints allow, most costly strata first."""
        counts = counts.copy()
        lhs = (a / counts[:, None]).sum(axis=0)
        order = np.argsort(-inputs.costs, kind="stable")
        improved = True
        while improved:
            improved = False
            for h in order:
                floor = max(int(inputs.n_min[h]), 1)
                if counts[h] <= floor:
                    continue
                candidate = counts[h] - 1
                delta = a[h] * (1.0 / candidate - 1.0 / counts[h])
                if np.all(lhs + delta <= v * (1 + self.tol)):
                    lhs = lhs + delta
                    counts[h] = candidate
                    improved = True
        return counts


def bethel_solve(inputs: VarianceInputs, targets: PrecisionTargets, **solver_options) -> BethelSolution:
    """Functional wrapper over BethelAllocator."""
    return BethelAllocator(**solver_options).fit(inputs, targets).solution_


# ---------------------------------------------------------------------------
# Cluster design-effect bookkeeping
# ---------------------------------------------------------------------------


def deff_cluster(b: float, rho: float) -> float:
    """Design effect of a cluster design with take b and intra-class correlation rho."""
    if b < 1:
        raise ValueError(f"cluster take must be >= 1, got {b}")
    if not 0 <= rho <= 1:
        raise ValueError(f"intra-class correlation must be in [0,1], got {rho}")
    return 1.0 + (b - 1.0) * rho


def preserve_deff_reduction(m: int, b: float, scale: float):
    """Shrink the PSU count, not the within-PSU take, so the design effect holds.

    Returns (m', b') with m' = round(scale * m) and b' = b.
    """
    if not 0 < scale <= 1:
        raise ValueError(f"scale must be in (0,1], got {scale}")
    return round_half_even(scale * m), b
