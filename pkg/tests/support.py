"""Shared loading-path helpers for the test suite."""

import numpy as np

from vevp import material as mat
from vevp import tensor3 as t3


def uniaxial(stretch):
    """Isochoric uniaxial deformation gradient along x."""
    return np.diag([stretch, stretch**-0.5, stretch**-0.5])


def triangle_cycle(amplitude, increment, cycles=1):
    """Strain samples 0 -> amplitude -> 0, repeated."""
    up = np.arange(0.0, amplitude + 0.5 * increment, increment)
    one = np.concatenate([up, up[::-1][1:]])
    return np.concatenate([one] + [one[1:]] * (cycles - 1))


def drive(f_list, dt, env, params, state=None):
    """Integrate a list of deformation gradients; returns (states, results)."""
    st = state if state is not None else mat.MaterialState.virgin(np.shape(f_list[0])[:-2])
    states, results = [], []
    for f in f_list:
        st, res = mat.integrate_step(st, f, dt, env, params)
        states.append(st)
        results.append(res)
    return states, results


def random_box_gradient(rng, diag=(0.9, 1.1), off=(-0.05, 0.05)):
    f = rng.uniform(*off, size=(3, 3))
    np.fill_diagonal(f, rng.uniform(*diag, size=3))
    return f


def walk_to(target, n):
    return [np.eye(3) + (target - np.eye(3)) * k / n for k in range(1, n + 1)]


def central_tangent(state, f, dt, env, params, h):
    """Independent central-difference oracle of the spatial tangent."""
    j = np.linalg.det(f)
    cols = []
    for i, k in t3.VOIGT_PAIRS:
        e = np.zeros((3, 3))
        e[i, k] += 0.5
        e[k, i] += 0.5
        df = h * e @ f
        _, rp = mat.integrate_step(state, f + df, dt, env, params)
        _, rm = mat.integrate_step(state, f - df, dt, env, params)
        tp = np.linalg.det(f + df) * rp.sigma_tot_d
        tm = np.linalg.det(f - df) * rm.sigma_tot_d
        d = 0.5 * ((tp - tm) + (tp - tm).T)
        cols.append([d[a, b] for a, b in t3.VOIGT_PAIRS])
    return np.array(cols).T / (2.0 * h * j)


def path_violations(f, dt, diag=(0.9, 1.1), off=(-0.05, 0.05), dt_range=(0.05, 5.0), rate=(1e-5, 1e-3), df_max=1e-4):
    """Independent check of a loading path; returns a list of broken rules.

    The last record is the tangent perturbation and is exempt from the
    increment and rate rules.
    """
    f = np.asarray(f, dtype=float)
    dt = np.asarray(dt, dtype=float)
    problems = []
    if not np.array_equal(f[0], np.eye(3)):
        problems.append("first record is not the identity")
    mask = np.eye(3, dtype=bool)
    if np.any(f[:, mask] < diag[0]) or np.any(f[:, mask] > diag[1]):
        problems.append("diagonal outside box")
    if np.any(f[:, ~mask] < off[0]) or np.any(f[:, ~mask] > off[1]):
        problems.append("off-diagonal outside box")
    if np.any(dt < dt_range[0]) or np.any(dt > dt_range[1]):
        problems.append("dt outside range")
    walk = f[:-1]
    if np.max(np.abs(np.diff(walk, axis=0))) > df_max * (1 + 1e-9):
        problems.append("component increment too large")
    strain = np.array([0.5 * (g.T @ g - np.eye(3)) for g in walk])
    rates = np.sqrt(np.sum(np.diff(strain, axis=0) ** 2, axis=(1, 2))) / dt[1:-1]
    if np.any(rates < rate[0]) or np.any(rates > rate[1]):
        problems.append(f"rate outside bounds ({rates.min():.3e}, {rates.max():.3e})")
    return problems


def box_count_deviation(points, cells=16):
    """Largest deviation of 2D box counts from the uniform expectation."""
    counts, _, _ = np.histogram2d(points[:, 0], points[:, 1], bins=cells, range=[[0, 1], [0, 1]])
    return np.max(np.abs(counts - len(points) / cells**2))


def finite_difference_gradients(loss, arrays, step=1e-6):
    """Central differences of ``loss(arrays)`` with respect to every entry."""
    out = {}
    for name, value in arrays.items():
        g = np.zeros_like(value)
        for idx in np.ndindex(value.shape):
            orig = value[idx]
            value[idx] = orig + step
            up = loss(arrays)
            value[idx] = orig - step
            down = loss(arrays)
            value[idx] = orig
            g[idx] = (up - down) / (2 * step)
        out[name] = g
    return out
