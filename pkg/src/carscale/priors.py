"""Hyperpriors for the reparametrized disease-mapping model.

The mixed random effect splits total variability between an iid component
and the scaled intrinsic field through a mixing weight phi in [0, 1], with
one overall precision tau. Both hyperparameters carry penalized-complexity
priors: an exponential penalty on the distance (root of twice the
Kullback-Leibler divergence) from the base model, calibrated by a tail
statement ``P(statistic beyond U) = alpha``. The precision prior has the
classical closed form; the phi prior is normalized numerically on a cached
grid. A plain gamma prior is provided for the intrinsic-field precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.special import gammaln

from .scaling import ScaledCarModel, component_pseudoinverse

#: step for centered finite differences of the distance function
_FD_STEP = 1e-5

#: number of phi grid points cached per graph
PHI_GRID_POINTS = 1024


class PriorError(ValueError):
    """A prior specification cannot be realized."""


@dataclass(frozen=True)
class PcPriorSpec:
    """Tail calibration of a penalized-complexity prior.

    `u` is the threshold and `tail_prob` the probability assigned to the
    tail event (named tail_prob rather than alpha to avoid clashing with the
    model intercept).
    """

    u: float
    tail_prob: float

    def __post_init__(self) -> None:
        if not self.u > 0:
            raise PriorError(f"threshold u must be positive, got {self.u}")
        if not 0 < self.tail_prob < 1:
            raise PriorError(f"tail_prob must lie in (0, 1), got {self.tail_prob}")


@dataclass(frozen=True)
class Bym2Spec:
    """Pieces of the scaled structure needed by the mixed-effect priors.

    `gen_inv_diag` is the diagonal of the generalized inverse of the scaled
    structure (1.0 for singletons); `eigenvalues` holds, per component, the
    non-null spectrum of that generalized inverse (singletons contribute a
    single 1.0).
    """

    scaled_model: ScaledCarModel
    gen_inv_diag: np.ndarray
    eigenvalues: tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        self.gen_inv_diag.flags.writeable = False
        for e in self.eigenvalues:
            e.flags.writeable = False

    @classmethod
    def from_model(cls, model: ScaledCarModel) -> "Bym2Spec":
        part = model.partition
        dense = model.scaled_R.to_dense()
        diag = np.ones(part.n)
        spectra: list[np.ndarray] = []
        for k in range(part.n_components):
            idx = part.members[k]
            if idx.size == 1:
                spectra.append(np.array([1.0]))
                continue
            block = dense[np.ix_(idx, idx)]
            lam = np.linalg.eigvalsh(block)
            tol = idx.size * lam.max() * 1e-12
            gamma = np.sort(1.0 / lam[lam > tol])
            spectra.append(gamma)
            pinv = component_pseudoinverse(block)
            diag[idx] = np.diag(pinv)
        return cls(scaled_model=model, gen_inv_diag=diag, eigenvalues=tuple(spectra))

    @cached_property
    def _gamma_flat(self) -> np.ndarray:
        return np.concatenate(self.eigenvalues)

    @cached_property
    def gen_inverse(self) -> np.ndarray:
        """Dense generalized inverse of the scaled structure matrix."""
        part = self.scaled_model.partition
        dense = self.scaled_model.scaled_R.to_dense()
        out = np.zeros((part.n, part.n))
        for k in range(part.n_components):
            idx = part.members[k]
            if idx.size == 1:
                out[idx[0], idx[0]] = 1.0
            else:
                out[np.ix_(idx, idx)] = component_pseudoinverse(dense[np.ix_(idx, idx)])
        return out


def bym2_covariance(phi: float, tau: float, spec: Bym2Spec) -> np.ndarray:
    """Marginal covariance of the mixed effect: tau^-1((1-phi)I + phi*Qinv)."""
    if not 0.0 <= phi <= 1.0:
        raise ValueError(f"phi must lie in [0, 1], got {phi}")
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    n = spec.scaled_model.partition.n
    return ((1.0 - phi) * np.eye(n) + phi * spec.gen_inverse) / tau


def pc_prior_precision_logpdf(tau, spec: PcPriorSpec):
    """Log-density of the PC prior for a precision.

    Induced by an exponential prior on the standard deviation sigma =
    tau^-1/2 with P(sigma > u) = tail_prob, i.e. a type-2 Gumbel on tau:
    pi(tau) = (lam/2) tau^-3/2 exp(-lam tau^-1/2), lam = -ln(tail_prob)/u.
    """
    tau = np.asarray(tau, dtype=np.float64)
    if np.any(tau <= 0):
        raise ValueError("tau must be positive")
    lam = -math.log(spec.tail_prob) / spec.u
    out = math.log(lam) - math.log(2.0) - 1.5 * np.log(tau) - lam / np.sqrt(tau)
    return float(out) if out.ndim == 0 else out


def gamma_prior_logpdf(kappa, shape: float, rate: float):
    """Log-density of a gamma prior parameterized by shape and rate."""
    if shape <= 0 or rate <= 0:
        raise ValueError("shape and rate must be positive")
    kappa = np.asarray(kappa, dtype=np.float64)
    if np.any(kappa <= 0):
        raise ValueError("kappa must be positive")
    out = (shape - 1.0) * np.log(kappa) - rate * kappa + shape * math.log(rate) - gammaln(shape)
    return float(out) if out.ndim == 0 else out


def _kld(phi, gamma: np.ndarray):
    """KL divergence of the mixed model from the iid base, summed spectrum-wise."""
    phi = np.asarray(phi, dtype=np.float64)
    t = np.multiply.outer(phi, gamma - 1.0)
    return 0.5 * np.sum(t - np.log1p(t), axis=-1)


def _distance(phi, gamma: np.ndarray):
    return np.sqrt(2.0 * np.maximum(_kld(phi, gamma), 0.0))


def _distance_derivative(phi, gamma: np.ndarray):
    """d'(phi) by centered differences, one-sided within a step of 0 or 1."""
    phi = np.asarray(phi, dtype=np.float64)
    h = _FD_STEP
    lo = np.clip(phi - h, 0.0, 1.0)
    hi = np.clip(phi + h, 0.0, 1.0)
    return (_distance(hi, gamma) - _distance(lo, gamma)) / (hi - lo)


class PhiPrior:
    """Penalized-complexity prior for the mixing weight of one graph.

    The density is proportional to ``exp(-lambda * d(phi)) * |d'(phi)|``,
    normalized to integrate to one on [0, 1]. The rate lambda solves
    ``integral_0^u pi = tail_prob`` by bisection on a cached phi grid; it may
    come out negative when the tail statement asks for more upper mass than
    the unpenalized |d'| measure carries (the distance to the fully
    structured model is bounded, so both tilt directions are proper).
    """

    def __init__(self, bym2: Bym2Spec, spec: PcPriorSpec, grid_points: int = PHI_GRID_POINTS):
        if not spec.u < 1.0:
            raise PriorError("phi prior threshold u must lie in (0, 1)")
        self.spec = spec
        self._gamma = bym2._gamma_flat
        self.grid = np.linspace(0.0, 1.0, grid_points)
        self._dist = _distance(self.grid, self._gamma)
        self._dabs = np.abs(_distance_derivative(self.grid, self._gamma))
        d_max = float(self._dist.max())
        if not d_max > 0:
            raise PriorError("distance function vanishes: graph has no structure to mix")
        self.lam = self._solve_lambda(bound=2000.0 / d_max)
        dens = np.exp(-self.lam * self._dist) * self._dabs
        self._log_norm = math.log(np.trapezoid(dens, self.grid))

    def _mass_below(self, lam: float, u: float) -> float:
        # shift the exponent for stability when lam is large in magnitude
        expo = -lam * self._dist
        dens = np.exp(expo - expo.max()) * self._dabs
        total = np.trapezoid(dens, self.grid)
        cut = self.grid <= u
        gx = np.append(self.grid[cut], u)
        gy = np.append(dens[cut], np.interp(u, self.grid, dens))
        return float(np.trapezoid(gy, gx) / total)

    def _solve_lambda(self, bound: float) -> float:
        u, alpha = self.spec.u, self.spec.tail_prob
        lo, hi = -bound, bound
        if self._mass_below(lo, u) > alpha or self._mass_below(hi, u) < alpha:
            raise PriorError(
                f"no penalty rate achieves P(phi < {u}) = {alpha} on this graph"
            )
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if self._mass_below(mid, u) > alpha:
                hi = mid
            else:
                lo = mid
            if hi - lo < 1e-12 * max(1.0, abs(mid)):
                break
        return 0.5 * (lo + hi)

    def logpdf(self, phi):
        phi = np.asarray(phi, dtype=np.float64)
        if np.any(phi <= 0.0) or np.any(phi >= 1.0):
            raise ValueError("phi must lie strictly inside (0, 1)")
        d = _distance(phi, self._gamma)
        dabs = np.abs(_distance_derivative(phi, self._gamma))
        with np.errstate(divide="ignore"):
            out = -self.lam * d + np.log(dabs) - self._log_norm
        return float(out) if out.ndim == 0 else out


def pc_prior_phi_logpdf(phi, spec: PcPriorSpec, bym2: Bym2Spec):
    """Log-density of the PC prior for the mixing weight (cached per graph)."""
    cache = getattr(bym2, "_phi_cache", None)
    if cache is None:
        cache = {}
        object.__setattr__(bym2, "_phi_cache", cache)
    key = (spec.u, spec.tail_prob)
    if key not in cache:
        cache[key] = PhiPrior(bym2, spec)
    return cache[key].logpdf(phi)
