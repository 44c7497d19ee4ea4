"""Noising schedules, score identities, and PF-ODE drift assembly.

Supported families: variance-preserving (vp), sub-variance-preserving
(subvp), variance-exploding (ve), linear-interpolation flow (flow_linear),
and the trigonometric path (trigflow). Every family exposes the conditional
bridge p(x_t | x_start) = N(scale(t) x_start, std(t)^2 I); diffusion
families additionally expose the SDE drift/diffusion coefficients from
which the PF-ODE drift is assembled as f(x,t) - 0.5 g(t)^2 score.

Schedule methods accept scalar or per-sample array times, so batched cache
construction and batched losses reuse the same code paths as ODE solves.
"""

import math
from dataclasses import dataclass, asdict
from typing import Optional

import numpy as np


class TimeRange(ValueError):
    """Time outside the schedule's [eps, T] interval."""


class SingularTime(ValueError):
    """Velocity-to-score identity evaluated where it is singular."""


class NonFiniteField(RuntimeError):
    """Field evaluation produced NaN or Inf; carries the offending (x, t)."""

    def __init__(self, message, x=None, t=None):
        super().__init__(message)
        self.x = x
        self.t = t


class InvalidCovariance(ValueError):
    """Covariance is not symmetric positive definite."""


FAMILIES = ("vp", "subvp", "ve", "flow_linear", "trigflow")
_FLOW_FAMILIES = ("flow_linear", "trigflow")


def _cmul(coef, arr):
    """Multiply per-sample scalars onto row vectors with broadcasting."""
    coef = np.asarray(coef, dtype=float)
    arr = np.asarray(arr, dtype=float)
    if coef.ndim == arr.ndim - 1:
        return coef[..., None] * arr
    return coef * arr


@dataclass(frozen=True)
class ScheduleSpec:
    """Noising schedule for one model family.

    ``beta_min``/``beta_max`` are the linear drift-coefficient endpoints for
    vp/subvp; for ve they are reused as the sigma_min/sigma_max noise range.
    ``sigma_d`` is the data standard deviation entering the trigflow path.
    Conventions: vp/subvp integrate beta from time 0 so scale(eps) ~ 1;
    flow_linear uses scale = 1 - t, std = t on [eps, 1]; trigflow uses
    scale = cos t, std = sigma_d sin t on (eps, pi/2]. When ``T`` is left
    unset it resolves to 1 (pi/2 for trigflow).
    """

    family: str = "vp"
    eps: float = 1e-3
    T: Optional[float] = None
    beta_min: float = 0.1
    beta_max: float = 20.0
    sigma_d: float = 1.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown schedule family {self.family!r}")
        if self.T is None:
            object.__setattr__(self, "T", math.pi / 2 if self.family == "trigflow" else 1.0)
        if not (0.0 < self.eps < self.T):
            raise ValueError("schedule needs 0 < eps < T")
        if self.family == "trigflow" and self.T > math.pi / 2 + 1e-12:
            raise ValueError("trigflow time domain is (eps, pi/2]")

    # -- shared bridge ------------------------------------------------------

    @property
    def is_flow(self) -> bool:
        return self.family in _FLOW_FAMILIES

    def check_time(self, t):
        t = np.asarray(t)
        if np.any(t < self.eps - 1e-12) or np.any(t > self.T + 1e-12):
            raise TimeRange(f"t={t} outside [{self.eps}, {self.T}]")

    def _beta_integral(self, t):
        return self.beta_min * t + 0.5 * t * t * (self.beta_max - self.beta_min)

    def beta(self, t):
        return self.beta_min + t * (self.beta_max - self.beta_min)

    def scale(self, t):
        """Conditional mean coefficient of p(x_t | x_start)."""
        t = np.asarray(t, dtype=float)
        if self.family in ("vp", "subvp"):
            return np.exp(-0.5 * self._beta_integral(t))
        if self.family == "ve":
            return np.ones_like(t)
        if self.family == "flow_linear":
            return 1.0 - t
        return np.cos(t)

    def std(self, t):
        """Conditional standard deviation of p(x_t | x_start)."""
        t = np.asarray(t, dtype=float)
        if self.family == "vp":
            nu = self.scale(t)
            return np.sqrt(np.maximum(0.0, 1.0 - nu * nu))
        if self.family == "subvp":
            nu = self.scale(t)
            return 1.0 - nu * nu
        if self.family == "ve":
            s0, s1 = self.beta_min, self.beta_max
            return np.sqrt(np.maximum(0.0, s0 * s0 * ((s1 / s0) ** (2.0 * t) - 1.0)))
        if self.family == "flow_linear":
            return t
        return self.sigma_d * np.sin(t)

    def scale_dot(self, t):
        """d scale / dt; flow families only (used by marginal velocities)."""
        t = np.asarray(t, dtype=float)
        if self.family == "flow_linear":
            return -np.ones_like(t)
        if self.family == "trigflow":
            return -np.sin(t)
        raise ValueError("scale_dot is defined for flow families")

    def std_dot(self, t):
        t = np.asarray(t, dtype=float)
        if self.family == "flow_linear":
            return np.ones_like(t)
        if self.family == "trigflow":
            return self.sigma_d * np.cos(t)
        raise ValueError("std_dot is defined for flow families")

    # -- diffusion SDE coefficients ------------------------------------------

    def drift_coeff(self, t):
        """Scalar a(t) with SDE drift f(x,t) = a(t) x."""
        t = np.asarray(t, dtype=float)
        if self.family in ("vp", "subvp"):
            return -0.5 * self.beta(t)
        if self.family == "ve":
            return np.zeros_like(t)
        raise ValueError("drift_coeff is defined for diffusion families")

    def diffusion_sq(self, t):
        """Squared diffusion coefficient g(t)^2."""
        t = np.asarray(t, dtype=float)
        if self.family == "vp":
            return self.beta(t)
        if self.family == "subvp":
            nu = self.scale(t)
            return self.beta(t) * (1.0 - nu ** 4)
        if self.family == "ve":
            s0, s1 = self.beta_min, self.beta_max
            sig2 = s0 * s0 * (s1 / s0) ** (2.0 * t)
            return 2.0 * sig2 * math.log(s1 / s0)
        raise ValueError("diffusion_sq is defined for diffusion families")

    def terminal_std(self) -> float:
        """Std of the base density p_T used for likelihoods."""
        if self.family in ("vp", "subvp"):
            return 1.0
        if self.family == "ve":
            return self.beta_min * (self.beta_max / self.beta_min) ** self.T
        return float(self.std(self.T))

    # -- serialization --------------------------------------------------------

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ScheduleSpec":
        return cls(**{k: d[k] for k in ("family", "eps", "T", "beta_min", "beta_max", "sigma_d") if k in d})

    def spec_id(self) -> str:
        return (
            f"{self.family}[{self.eps:g},{self.T:g}]"
            f"b({self.beta_min:g},{self.beta_max:g})sd{self.sigma_d:g}"
        )


def marginal_sample(sched: ScheduleSpec, x_start, t, z):
    """Draw x_t from the conditional bridge: scale(t) x_start + std(t) z."""
    sched.check_time(t)
    return _cmul(sched.scale(t), x_start) + _cmul(sched.std(t), z)


def score_from_velocity(sched: ScheduleSpec, v, x, t):
    """Score of the marginal from the marginal velocity, linear-path flows.

    s = -(x + scale * v) / (std * (scale + std)); exact when the velocity is
    the marginal flow-matching field for the Gaussian bridge.
    """
    if sched.family != "flow_linear":
        raise ValueError("score_from_velocity applies to flow_linear schedules")
    a, s = sched.scale(t), sched.std(t)
    if np.any(s <= 0.0):
        raise SingularTime(f"std(t)=0 at t={t}")
    return -_cmul(1.0 / (s * (a + s)), np.asarray(x, float) + _cmul(a, v))


def score_from_velocity_trig(sched: ScheduleSpec, v, x, t):
    """Score from the marginal velocity on the trigonometric path.

    s = -(x + cot(t) v) / sigma_d^2; the division restores exactness for
    data whose standard deviation is not 1.
    """
    if sched.family != "trigflow":
        raise ValueError("score_from_velocity_trig applies to trigflow schedules")
    st = np.sin(np.asarray(t, dtype=float))
    if np.any(np.abs(st) < 1e-12):
        raise SingularTime(f"sin(t)=0 at t={t}")
    cot = np.cos(np.asarray(t, dtype=float)) / st
    return -(np.asarray(x, float) + _cmul(cot, v)) / (sched.sigma_d ** 2)


class VelocityField:
    """PF-ODE drift with score-net, velocity-net, or analytic backing.

    All evaluations are pure; ``drift_evals`` counts drift calls for NFE
    accounting in single-threaded use (solvers keep their own counters).
    Methods accept a single state (D,) or a batch (B, D), with matching
    scalar or per-sample times.
    """

    def __init__(self, schedule: ScheduleSpec, mode: str, drift_impl, score_impl, jvp_impl, jac_impl, log_density_impl=None):
        if mode not in ("score_backed", "velocity_backed", "analytic"):
            raise ValueError(f"unknown field mode {mode!r}")
        self.schedule = schedule
        self.mode = mode
        self._drift = drift_impl
        self._score = score_impl
        self._jvp = jvp_impl
        self._jac = jac_impl
        self._log_density = log_density_impl
        self.drift_evals = 0

    def drift(self, x, t, c=None):
        self.drift_evals += 1
        out = self._drift(x, t, c)
        if not np.all(np.isfinite(out)):
            raise NonFiniteField("drift is non-finite", x=np.asarray(x), t=t)
        return out

    def score(self, x, t, c=None):
        out = self._score(x, t, c)
        if not np.all(np.isfinite(out)):
            raise NonFiniteField("score is non-finite", x=np.asarray(x), t=t)
        return out

    def drift_jvp(self, x, t, tangent, c=None):
        return self._jvp(x, t, tangent, c)

    def drift_jacobian(self, x, t, c=None):
        return self._jac(x, t, c)

    def drift_divergence(self, x, t, c=None):
        """Exact divergence via the analytic Jacobian trace."""
        J = self._jac(x, t, c)
        return np.trace(J, axis1=-2, axis2=-1)

    def marginal_log_density(self, x, t, c=None):
        if self._log_density is None:
            raise ValueError("field does not expose a marginal density")
        return self._log_density(x, t, c)


def pf_ode_drift(field: VelocityField, x, t, c=None):
    """Evaluate the PF-ODE right-hand side v_t(x)."""
    return field.drift(x, t, c)


def field_from_score_net(sched: ScheduleSpec, net) -> VelocityField:
    """Assemble f(x,t) - 0.5 g^2 score_net(x,t) for diffusion families."""
    if sched.is_flow:
        raise ValueError("score-backed fields require a diffusion family")

    def drift(x, t, c):
        a = sched.drift_coeff(t)
        g2 = sched.diffusion_sq(t)
        return _cmul(a, x) - 0.5 * _cmul(g2, net.forward(x, t, c))

    def score(x, t, c):
        return net.forward(x, t, c)

    def jvp(x, t, u, c):
        a = sched.drift_coeff(t)
        g2 = sched.diffusion_sq(t)
        return _cmul(a, u) - 0.5 * _cmul(g2, net.jvp(x, t, c, tangent=u))

    def jac(x, t, c):
        a = np.asarray(sched.drift_coeff(t), dtype=float)
        g2 = np.asarray(sched.diffusion_sq(t), dtype=float)
        J = net.jacobian(x, t, c)
        eye = np.eye(J.shape[-1])
        return a[..., None, None] * eye - 0.5 * g2[..., None, None] * J

    def score_from_drift(x, t, v):
        # invert v = a x - 0.5 g^2 s; saves the second net pass per RHS call
        a = sched.drift_coeff(t)
        g2 = sched.diffusion_sq(t)
        return _cmul(2.0 / g2, _cmul(a, x) - np.asarray(v, float))

    field = VelocityField(sched, "score_backed", drift, score, jvp, jac)
    field.score_from_drift = score_from_drift
    field.x_dim = net.x_dim
    return field


def field_from_velocity_net(sched: ScheduleSpec, net) -> VelocityField:
    """Wrap a trained flow velocity net; score comes from the path identity."""
    if not sched.is_flow:
        raise ValueError("velocity-backed fields require a flow family")

    def drift(x, t, c):
        return net.forward(x, t, c)

    def score(x, t, c):
        v = net.forward(x, t, c)
        if sched.family == "flow_linear":
            return score_from_velocity(sched, v, x, t)
        return score_from_velocity_trig(sched, v, x, t)

    def jvp(x, t, u, c):
        return net.jvp(x, t, c, tangent=u)

    def jac(x, t, c):
        return net.jacobian(x, t, c)

    field = VelocityField(sched, "velocity_backed", drift, score, jvp, jac)
    field.x_dim = net.x_dim
    return field


def analytic_gaussian_field(mean, covariance, sched: ScheduleSpec) -> VelocityField:
    """Exact PF-ODE field for a Gaussian target N(mean, covariance).

    The marginal at time t is N(scale(t) mean, scale^2 Sigma + std^2 I); the
    returned field evaluates the exact marginal score, drift, Jacobian, and
    log density, and additionally supports exact marginal sampling. Used as
    ground truth in likelihood and Stein-identity tests.
    """
    mean = np.asarray(mean, dtype=float)
    Sigma = np.asarray(covariance, dtype=float)
    D = mean.shape[0]
    if Sigma.shape != (D, D):
        raise InvalidCovariance(f"covariance shape {Sigma.shape} does not match mean dim {D}")
    if not np.allclose(Sigma, Sigma.T, atol=1e-10):
        raise InvalidCovariance("covariance is not symmetric")
    lam, V = np.linalg.eigh(Sigma)
    if np.min(lam) <= 0:
        raise InvalidCovariance("covariance is not positive definite")

    def moments(t):
        a = np.asarray(sched.scale(t), dtype=float)
        s = np.asarray(sched.std(t), dtype=float)
        den = a[..., None] ** 2 * lam + s[..., None] ** 2
        return a, s, den

    def score(x, t, c=None):
        a, _, den = moments(t)
        xc = np.asarray(x, float) - _cmul(a, np.broadcast_to(mean, np.shape(x)))
        return -((xc @ V) / den) @ V.T

    def drift(x, t, c=None):
        x = np.asarray(x, float)
        a, s, den = moments(t)
        xc = x - _cmul(a, np.broadcast_to(mean, x.shape))
        if sched.is_flow:
            ad = np.asarray(sched.scale_dot(t), dtype=float)
            sd = np.asarray(sched.std_dot(t), dtype=float)
            coeff = ((ad * a)[..., None] * lam + (sd * s)[..., None]) / den
            return _cmul(ad, np.broadcast_to(mean, x.shape)) + ((xc @ V) * coeff) @ V.T
        fc = np.asarray(sched.drift_coeff(t), dtype=float)
        g2 = np.asarray(sched.diffusion_sq(t), dtype=float)
        return _cmul(fc, x) + 0.5 * _cmul(g2, ((xc @ V) / den) @ V.T)

    def jac(x, t, c=None):
        x = np.asarray(x, float)
        a, s, den = moments(t)
        if sched.is_flow:
            ad = np.asarray(sched.scale_dot(t), dtype=float)
            sd = np.asarray(sched.std_dot(t), dtype=float)
            coeff = ((ad * a)[..., None] * lam + (sd * s)[..., None]) / den
        else:
            fc = np.asarray(sched.drift_coeff(t), dtype=float)
            g2 = np.asarray(sched.diffusion_sq(t), dtype=float)
            coeff = fc[..., None] + 0.5 * g2[..., None] / den
        B = np.einsum("ij,...j,kj->...ik", V, coeff, V)
        if x.ndim == 2 and B.ndim == 2:
            return np.broadcast_to(B, (x.shape[0], D, D))
        return B

    def jvp(x, t, u, c=None):
        J = jac(np.asarray(x, float), t)
        u = np.asarray(u, float)
        if J.ndim == 2:
            return u @ J.T
        return np.einsum("...ij,...j->...i", J, u)

    def log_density(x, t, c=None):
        a, _, den = moments(t)
        xc = np.asarray(x, float) - _cmul(a, np.broadcast_to(mean, np.shape(x)))
        quad = np.sum((xc @ V) ** 2 / den, axis=-1)
        return -0.5 * (quad + np.sum(np.log(2.0 * np.pi * den), axis=-1))

    field = VelocityField(sched, "analytic", drift, score, jvp, jac, log_density_impl=log_density)

    def sample_marginal(t, n, rng):
        a, _, den = moments(t)
        xi = rng.standard_normal((n, D))
        return a * mean + (xi * np.sqrt(den)) @ V.T

    field.sample_marginal = sample_marginal
    field.target_mean = mean
    field.target_covariance = Sigma
    field.x_dim = D
    return field


def boundary_decay_probe(field: VelocityField, t, ray, radii):
    """Density-weighted boundary flux magnitude along one ray.

    Returns R^(D-1) * p_t(R rhat) * ||v_t(R rhat)|| for each radius; for
    fields whose target behaves, this decays to zero, which is the
    numerical form of the boundary condition the Stein identity needs.
    """
    ray = np.asarray(ray, dtype=float)
    rhat = ray / np.linalg.norm(ray)
    D = rhat.shape[0]
    out = np.empty(len(radii))
    for i, R in enumerate(radii):
        x = R * rhat
        p = math.exp(field.marginal_log_density(x, t))
        v = field.drift(x, t)
        out[i] = R ** (D - 1) * p * float(np.linalg.norm(v))
    return out
