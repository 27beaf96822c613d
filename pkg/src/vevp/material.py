"""Finite-strain viscoelastic-viscoplastic damage model for BNP/epoxy.

The stress is split into an equilibrium neo-Hookean branch, a
non-equilibrium branch with an Argon-type dashpot, and a volumetric term.
A second, phenomenological dashpot carries the viscoplastic flow, and a
scalar Mullins-type damage variable scales the total stress.

All functions are written for stacks of material points: tensors are
``(..., 3, 3)`` arrays and scalars are ``(...)`` arrays, so a whole batch of
quadrature points (or sequences) is integrated in one call.  Converged points
are frozen inside the iteration loops so each point's result does not depend
on what else is in the batch.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import tensor3 as t3

# exp() argument clamp for the Argon and sigmoid laws
EXP_CLAMP = 500.0

# largest representable damage below one
D_MAX = float(np.nextafter(1.0, 0.0))

# absolute error allowed when the viscous increment is taken explicitly
NEGLIGIBLE_FLOW = 1e-12


class NonConvergenceError(RuntimeError):
    """The local fixed-point loop did not reach ``fp_tol``."""

    def __init__(self, message: str, residual: float, index=None):
        super().__init__(message)
        self.residual = residual
        self.index = index


@dataclass(frozen=True)
class MaterialParams:
    mu_eq0: float = 760.0
    mu_neq0: float = 790.0
    k_v: float = 1154.0
    eps_dot_0: float = 1.0447e12
    delta_H: float = 1.977e-19
    m: float = 0.657
    y_0: float = 75.0
    x_0: float = 0.2369
    b_s: float = 0.06786
    a_s: float = -48.23
    a_vp: float = 0.179
    b_vp: float = 0.910
    sigma_0: float = 5.5
    A_dmg: float = 320.0
    alpha_w: float = 0.039
    k_b: float = 1.380649e-23
    T: float = 296.0
    fp_tol: float = 1e-5
    fp_max_iter: int = 200
    perturb_alpha: float = 1e-4

    def __post_init__(self):
        for name in ("mu_eq0", "mu_neq0", "k_v", "sigma_0", "m", "fp_tol", "k_b", "T"):
            if not getattr(self, name) > 0:
                raise ValueError(f"MaterialParams.{name} must be > 0")
        # eps_dot_0 = 0 is the frozen-dashpot limit
        if self.eps_dot_0 < 0:
            raise ValueError("MaterialParams.eps_dot_0 must be >= 0")
        if self.A_dmg < 0:
            raise ValueError("MaterialParams.A_dmg must be >= 0")
        if self.fp_max_iter < 1:
            raise ValueError("MaterialParams.fp_max_iter must be >= 1")

    @property
    def activation_ratio(self) -> float:
        """Dimensionless ``delta_H / (k_b T)`` of the Argon law."""
        return self.delta_H / (self.k_b * self.T)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "MaterialParams":
        known = {f.name: f for f in fields(cls)}
        unknown = set(data) - set(known)
        if unknown:
            raise KeyError(f"unknown material parameter(s): {sorted(unknown)}")
        kwargs = {k: (int(v) if k == "fp_max_iter" else float(v)) for k, v in data.items()}
        return cls(**kwargs)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def loads(cls, text: str) -> "MaterialParams":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.dumps() + "\n")

    @classmethod
    def load(cls, path) -> "MaterialParams":
        return cls.loads(Path(path).read_text())

    @classmethod
    def table3(cls) -> "MaterialParams":
        """Calibrated parameter set shipped with the package."""
        text = resources.files("vevp.data").joinpath("table3.json").read_text()
        return cls.loads(text)

    def with_overrides(self, **kwargs) -> "MaterialParams":
        return replace(self, **kwargs)


@dataclass(frozen=True)
class Environment:
    """Moisture mass fraction ``w_w`` and nanoparticle volume fraction ``v_np``.

    Either field may be an array broadcastable against a batch of points.
    """

    w_w: float | np.ndarray = 0.0
    v_np: float | np.ndarray = 0.0

    def __post_init__(self):
        w = np.asarray(self.w_w, dtype=float)
        v = np.asarray(self.v_np, dtype=float)
        if np.any(v < 0) or np.any(v > 0.3):
            raise ValueError("v_np must lie in [0, 0.3]")
        if np.any(w < 0) or np.any(w > 0.05):
            raise ValueError("w_w must lie in [0, 0.05]")

    def take(self, index) -> "Environment":
        w = np.asarray(self.w_w)
        v = np.asarray(self.v_np)
        return Environment(w_w=w[index] if w.ndim else w, v_np=v[index] if v.ndim else v)


@dataclass
class MaterialState:
    """Internal variables of a (stack of) material point(s).

    ``F`` is the last converged deformation gradient; it is needed for the
    discrete effective strain rate.  ``eps_onset`` is NaN until the
    viscoplastic branch has been activated.
    """

    F: np.ndarray = field(default_factory=lambda: np.eye(3))
    F_v: np.ndarray = field(default_factory=lambda: np.eye(3))
    F_vp: np.ndarray = field(default_factory=lambda: np.eye(3))
    lambda_max: np.ndarray = field(default_factory=lambda: np.array(1.0))
    d: np.ndarray = field(default_factory=lambda: np.array(0.0))
    eps_onset: np.ndarray = field(default_factory=lambda: np.array(np.nan))

    @classmethod
    def virgin(cls, shape: tuple[int, ...] = ()) -> "MaterialState":
        eye = np.broadcast_to(np.eye(3), shape + (3, 3)).copy()
        return cls(
            F=eye.copy(),
            F_v=eye.copy(),
            F_vp=eye.copy(),
            lambda_max=np.ones(shape),
            d=np.zeros(shape),
            eps_onset=np.full(shape, np.nan),
        )

    @property
    def shape(self) -> tuple[int, ...]:
        return np.shape(self.d)

    def copy(self) -> "MaterialState":
        return MaterialState(*(np.array(getattr(self, f.name), dtype=float) for f in fields(self)))

    def take(self, index) -> "MaterialState":
        return MaterialState(*(np.asarray(getattr(self, f.name))[index] for f in fields(self)))

    def broadcast(self, shape: tuple[int, ...]) -> "MaterialState":
        """Copy of the state broadcast to a larger batch shape."""
        return MaterialState(
            F=np.broadcast_to(self.F, shape + (3, 3)).copy(),
            F_v=np.broadcast_to(self.F_v, shape + (3, 3)).copy(),
            F_vp=np.broadcast_to(self.F_vp, shape + (3, 3)).copy(),
            lambda_max=np.broadcast_to(self.lambda_max, shape).copy(),
            d=np.broadcast_to(self.d, shape).copy(),
            eps_onset=np.broadcast_to(self.eps_onset, shape).copy(),
        )


@dataclass
class StressResult:
    sigma_eq: np.ndarray
    sigma_neq: np.ndarray
    sigma_vol: np.ndarray
    sigma_tot: np.ndarray
    sigma_tot_d: np.ndarray
    iterations: np.ndarray | None = None


# ---------------------------------------------------------------------------
# scalar laws


def amplification_factor(env: Environment) -> np.ndarray:
    """Guth-Gold type stiffening from filler and softening from moisture."""
    v = np.asarray(env.v_np, dtype=float)
    w = np.asarray(env.w_w, dtype=float)
    x = (1.0 + 5.0 * v + 18.0 * v**2) * (1.0 + 0.057 * w**2 - 9.5 * w)
    if np.any(x <= 0):
        raise ValueError("amplification factor <= 0: moisture outside model validity")
    return x


def decompose_deformation(f: np.ndarray, env: Environment, params: MaterialParams):
    """Volumetric/isochoric split with moisture swelling.

    Returns:
        ``(J, J_w, J_m, F_iso)`` with ``J = J_m J_w`` and ``det(F_iso) = 1``.
    """
    f = np.asarray(f, dtype=float)
    j = t3.det(f)
    if np.any(j <= 0):
        raise ValueError("decompose_deformation: det(F) must be positive")
    j_w = 1.0 + params.alpha_w * np.asarray(env.w_w, dtype=float)
    j_m = j / j_w
    f_iso = f * np.cbrt(1.0 / j)[..., None, None]
    return j, j_w, j_m, f_iso


def swollen_gradient(f: np.ndarray, env: Environment, params: MaterialParams) -> np.ndarray:
    """Total deformation gradient from the dry state.

    Loading paths are measured from the moisture-conditioned specimen, which
    is stress-free; its free swelling ``J_w^(1/3) I`` is composed in here so
    that ``J_m = det(f)`` and ``f = I`` carries no stress for any moisture.
    """
    j_w = 1.0 + params.alpha_w * np.asarray(env.w_w, dtype=float)
    return np.cbrt(j_w)[..., None, None] * np.asarray(f, dtype=float)


def chain_stretch(b_iso: np.ndarray) -> np.ndarray:
    tr = t3.trace(np.asarray(b_iso, dtype=float))
    if np.any(tr <= 0):
        raise ValueError("chain_stretch: trace must be positive")
    return np.sqrt(tr / 3.0)


def athermal_yield_stress(lambda_max, params: MaterialParams) -> np.ndarray:
    """Sigmoid athermal yield stress driven by the maximum chain stretch."""
    arg = -(np.asarray(lambda_max, dtype=float) - params.x_0) / params.b_s
    arg = np.clip(arg, -EXP_CLAMP, EXP_CLAMP)
    return params.y_0 + params.a_s / (1.0 + np.exp(arg))


def viscous_flow_rate(tau_neq, tau_0, params: MaterialParams) -> np.ndarray:
    """Argon law for the non-equilibrium dashpot (1/s)."""
    ratio = np.asarray(tau_neq, dtype=float) / np.asarray(tau_0, dtype=float)
    arg = params.activation_ratio * (ratio**params.m - 1.0)
    return params.eps_dot_0 * np.exp(np.clip(arg, -EXP_CLAMP, EXP_CLAMP))


def viscoplastic_flow_rate(tau_tot, eps_eff, eps_onset, eps_rate, params: MaterialParams) -> np.ndarray:
    """Strain-driven viscoplastic flow rate (1/s).

    Zero below ``sigma_0``, before activation (``eps_onset`` NaN) and whenever
    the effective strain is below the onset strain.
    """
    tau_tot, eps_eff, eps_onset, eps_rate = np.broadcast_arrays(
        *(np.asarray(a, dtype=float) for a in (tau_tot, eps_eff, eps_onset, eps_rate))
    )
    base = eps_eff - eps_onset
    active = (tau_tot >= params.sigma_0) & np.isfinite(eps_onset) & (base > 0)
    safe = np.where(active, base, 0.0)
    return np.where(active, params.a_vp * safe**params.b_vp * eps_rate, 0.0)


def damage_update(d, lambda_max_old, lambda_new, params: MaterialParams):
    """Exact integral of the chain-stretch driven damage law.

    Returns:
        ``(d_new, lambda_max_new)``.
    """
    d = np.asarray(d, dtype=float)
    lam_old = np.asarray(lambda_max_old, dtype=float)
    lam_new = np.asarray(lambda_new, dtype=float)
    grow = lam_new > lam_old
    dlam = np.where(grow, lam_new - lam_old, 0.0)
    d_new = np.where(grow, 1.0 - (1.0 - d) * np.exp(-params.A_dmg * dlam), d)
    # 1 - (1 - d) exp(-A dL) rounds to exactly 1 once the product underflows
    d_new = np.minimum(d_new, D_MAX)
    return d_new, np.maximum(lam_old, lam_new)


# ---------------------------------------------------------------------------
# stress


def _neo_hooke(f_iso: np.ndarray, modulus: np.ndarray) -> np.ndarray:
    return modulus[..., None, None] * t3.dev(t3.left_cauchy_green(f_iso))


def stress(f_ve_iso, f_e_iso, j_m, j, d, env: Environment, params: MaterialParams) -> StressResult:
    """Cauchy stress contributions for a given kinematic split (MPa)."""
    x = amplification_factor(env)
    j = np.asarray(j, dtype=float)
    j_m = np.asarray(j_m, dtype=float)
    d = np.asarray(d, dtype=float)
    s_eq = _neo_hooke(np.asarray(f_ve_iso, dtype=float), x * params.mu_eq0 / j)
    s_neq = _neo_hooke(np.asarray(f_e_iso, dtype=float), x * params.mu_neq0 / j)
    s_vol = t3.spherical(0.5 * params.k_v * (j_m - 1.0 / j_m))
    s_tot = s_eq + s_neq + s_vol
    return StressResult(s_eq, s_neq, s_vol, s_tot, (1.0 - d)[..., None, None] * s_tot)


# ---------------------------------------------------------------------------
# time integration


def _unit_det(a: np.ndarray) -> np.ndarray:
    return a * np.cbrt(1.0 / t3.det(a))[..., None, None]


# unit deviatoric basis of the principal plane; u(psi) = cos*A + sin*B
_DEV_A = np.array([2.0, -1.0, -1.0]) / np.sqrt(6.0)
_DEV_B = np.array([0.0, 1.0, -1.0]) / np.sqrt(2.0)


def _dot3(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # explicit sums rather than ``@``: BLAS dot products round differently for
    # single vectors and stacks, which would make results batch-dependent
    return np.sum(a * b, axis=-1)


def _dev_angle(v: np.ndarray) -> np.ndarray:
    return np.arctan2(_dot3(v, _DEV_B), _dot3(v, _DEV_A))


def _dev_unit(psi: np.ndarray) -> np.ndarray:
    return np.cos(psi)[..., None] * _DEV_A + np.sin(psi)[..., None] * _DEV_B


def _stress_direction(ell: np.ndarray):
    """Principal flow direction and ``|dev c|`` for log eigenvalues ``ell``."""
    c = np.exp(ell)
    dev_c = c - np.mean(c, axis=-1, keepdims=True)
    norm = np.sqrt(_dot3(dev_c, dev_c))
    n = dev_c / np.where(norm > 0, norm, 1.0)[..., None]
    return c, dev_c, norm, n


def _relaxed_size(ell_tr, u, mod, tau_0, dt, params, skip, s0=None, tol=1e-12, max_iter=100):
    """Size ``s`` of the relaxed log strain ``s u`` along a fixed direction.

    The balance ``s + 2 x(s) (n.u) = ell_tr.u`` with ``x = dt rate(tau(s u))``
    is written for the log gap ``z = ln(ell_tr.u - s)`` as
    ``H(z) = ln(2 dt rate (n.u)) - z = 0``.  ``H`` falls strictly with ``z``
    and is nearly linear when the flow is small, so a bracketed Newton
    iteration in ``z`` converges in a few steps across the whole range from
    negligible to complete relaxation.  ``s0`` is an optional warm start.
    """
    kappa, m = params.activation_ratio, params.m
    log_eps0 = np.log(params.eps_dot_0)
    s_max = _dot3(ell_tr, u)
    flat = s_max <= 0
    done = np.array(skip, dtype=bool) | flat
    s_max = np.where(done, 1.0, s_max)
    z_hi = np.log(s_max)
    # a gap below e^-60 of the trial size is lost to round-off anyway
    z_lo = z_hi - 60.0

    def balance(z):
        gap = np.exp(z)
        s = np.maximum(s_max - gap, 0.0)
        c, dev_c, norm, n = _stress_direction(s[..., None] * u)
        tau = mod * norm
        dtau = mod * _dot3(dev_c, c * u) / np.where(norm > 0, norm, 1.0)
        nu = np.where(norm > 0, _dot3(n, u), 1.0)
        ratio = np.maximum(tau / tau_0, 1e-300)
        flow = np.log(2.0 * dt * nu) + log_eps0 + kappa * (ratio**m - 1.0)
        dflow = kappa * m * ratio ** (m - 1.0) * dtau / tau_0
        return flow - z, -dflow * gap - 1.0

    # flow at zero stress already exceeds the trial strain: fully relaxed
    h_top, _ = balance(z_hi)
    relaxed = ~done & (h_top >= 0)
    done = done | relaxed
    if s0 is None:
        # explicit flow at the trial stress bounds the gap from above
        h_bottom, _ = balance(z_lo)
        z = z_lo + h_bottom
    else:
        z = np.log(np.maximum(s_max - s0, 1e-300))
    z = np.clip(z, z_lo, z_hi - 1e-3)
    lo, hi = z_lo.copy(), z_hi.copy()
    for _ in range(max_iter):
        h, dh = balance(z)
        lo = np.where(~done & (h > 0), z, lo)
        hi = np.where(~done & (h < 0), z, hi)
        done = done | (np.abs(h) < tol) | (hi - lo <= 1e-14 * np.maximum(1.0, np.abs(z)))
        if np.all(done):
            break
        cand = z - h / dh
        bad = ~((cand > lo) & (cand < hi))
        z = np.where(done, z, np.where(bad, 0.5 * (lo + hi), cand))
    else:
        raise NonConvergenceError("viscous relaxation size did not converge", float(np.max(np.abs(h[~done]))))
    s = np.maximum(s_max - np.exp(z), 0.0)
    return np.where(relaxed | flat, 0.0, s)


def _viscous_return(f_ve, fv_n, mod, tau_0, dt, params, tol=1e-13, max_iter=60):
    """Backward-Euler exponential update ``F_v = exp(x N) F_v^n`` with the Argon law.

    ``N`` is the non-equilibrium stress rotated back by the elastic rotation,
    i.e. the normalised deviator of ``C_e = F_e^T F_e``.  Since
    ``F_e = F_e^tr exp(-x N)``, ``N`` shares the principal frame of the trial
    ``C_e`` and the log eigenvalues relax linearly: ``ell = ell_tr - 2 x n``.
    The relaxed state ``ell = s u(psi)`` is found from two scalar problems:
    the balance along ``u`` (``_relaxed_size``) and, outside it, the
    perpendicular balance ``2 x (n.u_perp) = ell_tr.u_perp`` in ``psi``, whose
    slope is about ``|ell_tr|``, solved by a bracketed secant iteration.

    Returns:
        ``(F_v, x)``.
    """
    shape = np.shape(mod)
    fe_tr = f_ve @ t3.inv(fv_n)
    c_tr, q = np.linalg.eigh(t3.sym(t3.transpose(fe_tr) @ fe_tr))
    ell_tr = np.log(c_tr)
    ell_tr = ell_tr - np.mean(ell_tr, axis=-1, keepdims=True)
    _, dev_tr, norm_tr, n_tr = _stress_direction(ell_tr)
    tau_tr = mod * norm_tr

    rate_tr = viscous_flow_rate(tau_tr, tau_0, params) if params.eps_dot_0 > 0 else np.zeros(shape)
    # no overstress, no flow direction
    x_exp = np.where(tau_tr > 0, dt * rate_tr, 0.0)
    # Frozen dashpot, or flow so slow that the implicit correction to the
    # explicit increment (about x times the relative rate change) is below
    # NEGLIGIBLE_FLOW in absolute terms.
    dtau_dx = 2.0 * mod * _dot3(dev_tr, np.exp(ell_tr) * n_tr) / np.where(norm_tr > 0, norm_tr, 1.0)
    ratio0 = np.maximum(tau_tr / tau_0, 1e-300)
    sens = params.activation_ratio * params.m * ratio0 ** (params.m - 1.0) * np.abs(dtau_dx) / tau_0
    size_tr = np.sqrt(_dot3(ell_tr, ell_tr))
    # The Argon rate stays positive at zero stress, so near the reference
    # state the explicit increment can overshoot the trial strain; those
    # points need the implicit solve, which relaxes them completely.
    overshoot = 2.0 * x_exp > 1e-3 * size_tr
    trivial = (tau_tr == 0.0) | (rate_tr == 0.0) | ((x_exp * x_exp * sens < NEGLIGIBLE_FLOW) & ~overshoot)

    x = x_exp
    n = n_tr
    if not np.all(trivial):

        warm = [None]

        def perpendicular(psi):
            u = _dev_unit(psi)
            s = _relaxed_size(ell_tr, u, mod, tau_0, dt, params, trivial, warm[0])
            warm[0] = s
            _, _, norm, nn = _stress_direction(s[..., None] * u)
            nn = np.where((norm > 0)[..., None], nn, u)
            # a fully relaxed point absorbs exactly its trial strain along u
            xx = np.where(
                s > 0, dt * viscous_flow_rate(mod * norm, tau_0, params), np.maximum(0.5 * _dot3(ell_tr, u), 0.0)
            )
            u_perp = _dev_unit(psi + 0.5 * np.pi)
            r = 2.0 * xx * _dot3(nn, u_perp) - _dot3(ell_tr, u_perp)
            return r / np.where(size_tr > 0, size_tr, 1.0), xx, nn

        psi0 = _dev_angle(ell_tr)
        ra, xa, na = perpendicular(psi0)
        # the scaled residual has slope close to one in psi
        a = psi0
        b = psi0 - ra
        rb, xb, nb = perpendicular(b)
        fin = trivial | (np.abs(ra) < tol)
        x_out = np.where(trivial, x_exp, xa)
        n_out = np.where(trivial[..., None], n_tr, na)
        side = np.zeros(shape)
        for _ in range(max_iter):
            newly = ~fin & ((np.abs(rb) < tol) | (np.abs(b - a) < 1e-15))
            x_out = np.where(newly, xb, x_out)
            n_out = np.where(newly[..., None], nb, n_out)
            fin = fin | newly
            if np.all(fin):
                break
            denom = np.where(rb != ra, rb - ra, 1.0)
            c = np.where(rb != ra, b - rb * (b - a) / denom, 0.5 * (a + b))
            # stay within a quarter turn of the trial direction
            c = np.clip(c, psi0 - 0.5 * np.pi, psi0 + 0.5 * np.pi)
            c = np.where(fin, b, c)
            rc, xc, nc = perpendicular(c)
            opposite = np.sign(rc) != np.sign(rb)
            # Illinois: halve the stale end's residual when it is kept twice
            ra = np.where(opposite, rb, np.where(side == 1, 0.5 * ra, ra))
            a = np.where(opposite, b, a)
            side = np.where(opposite, -1, 1)
            b, rb, xb, nb = c, rc, xc, nc
        else:
            raise NonConvergenceError(
                "viscous flow direction solve did not converge", float(np.max(np.abs(rb[~fin])))
            )
        x, n = x_out, n_out

    flow = (q * np.exp(x[..., None] * n)[..., None, :]) @ t3.transpose(q)
    # Q Q^T is the identity only to round-off; leave F_v exactly untouched
    fv = np.where((x == 0)[..., None, None], fv_n, _unit_det(flow @ fv_n))
    return fv, x


def _flow_direction(s: np.ndarray, f: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Deviatoric stress rotated to the relaxed configuration, normalised."""
    tau = t3.fnorm(s)
    r = t3.polar_rotation(f)
    s_rel = t3.sym(t3.transpose(r) @ s @ r)
    safe = np.where(tau > 0, tau, 1.0)
    n = np.where((tau > 0)[..., None, None], s_rel / safe[..., None, None], 0.0)
    return n, tau


def integrate_step(state: MaterialState, f_new, dt, env: Environment, params: MaterialParams):
    """Advance the internal variables over one time increment.

    ``f_new`` is measured from the moisture-conditioned specimen (see
    ``swollen_gradient``).  Each pass of the fixed-point loop on
    ``(F_v, F_vp)`` solves the Argon dashpot exactly for the current
    viscoplastic iterate, then updates ``F_vp`` from the rotated total stress
    deviator.  The loop stops once both iterates move by less than ``fp_tol``
    (Frobenius norm); stresses and damage are evaluated afterwards.

    ``dt`` is a scalar or an array broadcastable to the batch shape.

    Returns:
        ``(new_state, StressResult)``.  ``StressResult.iterations`` holds the
        number of fixed-point passes per point.

    Raises:
        NonConvergenceError: if ``fp_max_iter`` passes are not enough.
        ValueError: for ``dt <= 0`` or ``det(F) <= 0``.
    """
    dt = np.asarray(dt, dtype=float)
    if not np.all(dt > 0):
        raise ValueError("integrate_step: dt must be positive")
    f_new = np.asarray(f_new, dtype=float)
    if f_new.ndim == 2:
        if dt.ndim:
            raise ValueError("integrate_step: a single point takes a scalar dt")
        # numpy scalar arithmetic goes through libm rather than the vectorised
        # ufunc loops; evaluating a single point as a batch of one keeps its
        # result bit-identical to the same point inside any larger batch
        new_state, result = integrate_step(state.broadcast((1,)), f_new[None], dt, _expand_env(env, (), 1), params)
        return _select_state(new_state, 0, 0), _select_result(result, 0)
    shape = f_new.shape[:-2]
    dt = np.broadcast_to(dt, shape) if dt.ndim else float(dt)
    x_amp = np.broadcast_to(amplification_factor(env), shape)
    j, _, j_m, f_iso = decompose_deformation(swollen_gradient(f_new, env, params), env, params)
    mod_eq = x_amp * params.mu_eq0 / j
    mod_neq = x_amp * params.mu_neq0 / j

    lam = chain_stretch(t3.left_cauchy_green(f_iso))
    lam_max = np.maximum(np.broadcast_to(state.lambda_max, shape), lam)
    tau_0 = athermal_yield_stress(lam_max, params)

    e_new = t3.green_strain(f_new)
    eps = t3.fnorm(e_new)
    eps_rate = t3.fnorm(e_new - t3.green_strain(np.broadcast_to(state.F, f_new.shape))) / dt
    onset = np.broadcast_to(state.eps_onset, shape)

    fv_n = np.broadcast_to(state.F_v, f_new.shape)
    fvp_n = np.broadcast_to(state.F_vp, f_new.shape)
    fv = fv_n.copy()
    fvp = fvp_n.copy()
    active = np.ones(shape, dtype=bool)
    iterations = np.zeros(shape, dtype=int)
    residual = np.zeros(shape)
    for _ in range(params.fp_max_iter):
        iterations = iterations + active
        f_ve = f_iso @ t3.inv(fvp)

        # non-equilibrium dashpot, solved exactly for the current F_ve
        fv_next, _ = _viscous_return(f_ve, fv_n, mod_neq, tau_0, dt, params)
        f_e = f_ve @ t3.inv(fv_next)
        s_neq = _neo_hooke(f_e, mod_neq)

        # viscoplastic dashpot, driven by the deviatoric total stress
        s_dev = _neo_hooke(f_ve, mod_eq) + s_neq
        n_vp, tau_tot = _flow_direction(s_dev, f_ve)
        rate_vp = viscoplastic_flow_rate(tau_tot, eps, onset, eps_rate, params)
        fvp_next = _unit_det(fvp_n + (dt * rate_vp)[..., None, None] * (n_vp @ fvp))

        residual = np.where(
            active, np.maximum(t3.fnorm(fv_next - fv), t3.fnorm(fvp_next - fvp)), residual
        )
        fv = np.where(active[..., None, None], fv_next, fv)
        fvp = np.where(active[..., None, None], fvp_next, fvp)
        active = active & (residual >= params.fp_tol)
        if not np.any(active):
            break
    else:
        idx = np.argwhere(active)
        raise NonConvergenceError(
            f"fixed-point loop exceeded {params.fp_max_iter} iterations "
            f"(residual {np.max(residual[active]):.3e})",
            float(np.max(residual[active])),
            index=tuple(idx[0]) if idx.size else None,
        )

    f_ve = f_iso @ t3.inv(fvp)
    f_e = f_ve @ t3.inv(fv)
    d_new, lam_max_new = damage_update(np.broadcast_to(state.d, shape), np.broadcast_to(state.lambda_max, shape), lam, params)
    result = stress(f_ve, f_e, j_m, j, d_new, env, params)
    result.iterations = iterations

    tau_tot = t3.fnorm(t3.dev(result.sigma_tot))
    latch = ~np.isfinite(onset) & (tau_tot >= params.sigma_0)
    new_state = MaterialState(
        F=f_new.copy(),
        F_v=fv,
        F_vp=fvp,
        lambda_max=lam_max_new,
        d=d_new,
        eps_onset=np.where(latch, eps, onset),
    )
    return new_state, result


# ---------------------------------------------------------------------------
# consistent tangent by perturbation


def perturbation_increments(f: np.ndarray, alpha: float) -> np.ndarray:
    """Symmetric perturbations ``dF_ij = alpha/2 (e_i e_j + e_j e_i) F``.

    Returns an array of shape ``(..., 6, 3, 3)`` in Voigt order.
    """
    f = np.asarray(f, dtype=float)
    basis = np.stack([t3.unit_basis_sym(i, j) for i, j in t3.VOIGT_PAIRS])
    return alpha * (basis @ f[..., None, :, :])


def kirchhoff_d(f: np.ndarray, result: StressResult) -> np.ndarray:
    return t3.det(f)[..., None, None] * result.sigma_tot_d


TANGENT_SCHEMES = ("central", "forward")


def integrate_with_tangent(
    state: MaterialState, f, dt: float, env: Environment, params: MaterialParams, scheme: str = "central"
):
    """One step plus the perturbation tangent, all in a single batched call.

    Each column re-integrates the step from the same input state with
    ``F + dF_ij`` (and ``F - dF_ij`` for the central scheme), forms the
    Kirchhoff stress difference quotient and divides by ``J``.  The central
    scheme costs 13 integrations instead of 7; the one-sided quotient carries
    an O(alpha) error that the steep Argon law amplifies to a few 1e-3 when
    the viscous branch is flowing.

    Returns:
        ``(new_state, StressResult, tangent)`` where ``tangent`` has shape
        ``(..., 6, 6)`` (MPa) and maps engineering Voigt strain increments to
        Cauchy stress increments.
    """
    if scheme not in TANGENT_SCHEMES:
        raise ValueError(f"unknown tangent scheme {scheme!r}; expected one of {TANGENT_SCHEMES}")
    f = np.asarray(f, dtype=float)
    shape = f.shape[:-2]
    alpha = params.perturb_alpha
    df = perturbation_increments(f, alpha)
    parts = [f[..., None, :, :], f[..., None, :, :] + df]
    if scheme == "central":
        parts.append(f[..., None, :, :] - df)
    f_all = np.concatenate(parts, axis=-3)
    k = f_all.shape[-3]
    new_all, res_all = integrate_step(_repeat_state(state, shape, k), f_all, dt, _expand_env(env, shape, k), params)
    tau = kirchhoff_d(f_all, res_all)
    if scheme == "central":
        dtau = 0.5 * (tau[..., 1:7, :, :] - tau[..., 7:, :, :])
    else:
        dtau = tau[..., 1:, :, :] - tau[..., :1, :, :]
    cols = t3.voigt_pack(t3.sym(dtau))
    j = t3.det(f)
    tangent = np.swapaxes(cols, -1, -2) / (alpha * j[..., None, None])
    new_state = _select_state(new_all, len(shape), 0)
    result = StressResult(
        *(getattr(res_all, name)[..., 0, :, :] for name in ("sigma_eq", "sigma_neq", "sigma_vol", "sigma_tot", "sigma_tot_d")),
        iterations=res_all.iterations[..., 0],
    )
    return new_state, result, tangent


def _repeat_state(state: MaterialState, shape: tuple[int, ...], k: int) -> MaterialState:
    """Insert a new axis of length ``k`` right after the batch dimensions."""
    axis = len(shape)
    out = {}
    for f in fields(MaterialState):
        a = np.asarray(getattr(state, f.name), dtype=float)
        tail = a.shape[a.ndim - (2 if f.name.startswith("F") else 0):]
        a = np.expand_dims(np.broadcast_to(a, shape + tail), axis)
        out[f.name] = np.broadcast_to(a, shape + (k,) + tail).copy()
    return MaterialState(**out)


def _select_state(state: MaterialState, axis: int, k: int) -> MaterialState:
    return MaterialState(
        **{f.name: np.take(getattr(state, f.name), k, axis=axis) for f in fields(MaterialState)}
    )


def _select_result(result: StressResult, k: int) -> StressResult:
    return StressResult(**{f.name: np.take(getattr(result, f.name), k, axis=0) for f in fields(StressResult)})


def _expand_env(env: Environment, shape: tuple[int, ...], k: int) -> Environment:
    w = np.asarray(env.w_w, dtype=float)
    v = np.asarray(env.v_np, dtype=float)
    w = np.broadcast_to(w, shape)[..., None] if w.ndim else w
    v = np.broadcast_to(v, shape)[..., None] if v.ndim else v
    return Environment(w_w=w, v_np=v)


def tangent(
    state: MaterialState, f, dt: float, env: Environment, params: MaterialParams, scheme: str = "central"
) -> np.ndarray:
    """Spatial tangent (6x6, MPa) from perturbed Kirchhoff stresses."""
    return integrate_with_tangent(state, f, dt, env, params, scheme)[2]


# ---------------------------------------------------------------------------
# material point driver


def run_path(f_path: np.ndarray, dts, env: Environment, params: MaterialParams, state: MaterialState | None = None):
    """Drive material point(s) through a deformation-gradient history.

    Args:
        f_path: ``(n, ..., 3, 3)``; record 0 is the starting configuration
            (normally the identity) and is not integrated.
        dts: time increment per record, ``(n,)`` or ``(n, ...)`` with the
            batch shape; entry 0 is ignored.

    Returns:
        ``(results, states)``: one ``StressResult`` and one state per
        record, record 0 evaluated at the starting state.  Fixed-point
        counts are in ``StressResult.iterations``.
    """
    f_path = np.asarray(f_path, dtype=float)
    dts = np.asarray(dts, dtype=float)
    batch = f_path.shape[1:-2]
    if state is None:
        state = MaterialState.virgin(batch)
        state.F = f_path[0].copy()
    j, _, j_m, f_iso = decompose_deformation(swollen_gradient(f_path[0], env, params), env, params)
    f_ve = f_iso @ t3.inv(np.broadcast_to(state.F_vp, f_iso.shape))
    f_e = f_ve @ t3.inv(np.broadcast_to(state.F_v, f_iso.shape))
    first = stress(f_ve, f_e, j_m, j, np.broadcast_to(state.d, batch), env, params)
    first.iterations = np.zeros(batch, dtype=int)
    results = [first]
    states = [state]
    for k in range(1, f_path.shape[0]):
        state, res = integrate_step(state, f_path[k], dts[k], env, params)
        results.append(res)
        states.append(state)
    return results, states
