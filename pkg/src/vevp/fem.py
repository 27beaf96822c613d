"""Small updated-Lagrangian finite-element solver on trilinear hexahedra.

Meshes are structured boxes (or read from a plain text format).  Each step
prescribes Dirichlet displacements, and Newton-Raphson iterates

    K du = -r,   K = int B^T C_hat B dv + int G^T sigma G dv

in the current configuration until the relative L2 norm of the free-DOF
residual drops below ``tol`` (1e-4).  The material tangent ``C_hat`` is
symmetrized for ``K``; the residual uses the unsymmetrized stress.  Two
material backends are available: the classical integrator with its
perturbation tangent, and the LSTM surrogate.  Both evaluate all Gauss
points of the mesh in one batch and commit their internal state only when
a step converges.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import material as mat
from . import surrogate as sg
from . import tensor3 as t3

log = logging.getLogger(__name__)

NEWTON_TOL = 1e-4
NEWTON_MAX_ITER = 25

# reference node ordering of the trilinear hexahedron
HEX_NODES = np.array(
    [[-1, -1, -1], [1, -1, -1], [1, 1, -1], [-1, 1, -1], [-1, -1, 1], [1, -1, 1], [1, 1, 1], [-1, 1, 1]],
    dtype=float,
)
GAUSS = HEX_NODES / math.sqrt(3.0)


class MeshFormatError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class BackendError(RuntimeError):
    """Material evaluation failed at a Gauss point."""

    def __init__(self, message: str, element: int | None, point: int | None):
        super().__init__(f"element {element}, Gauss point {point}: {message}")
        self.element = element
        self.point = point


class NewtonError(RuntimeError):
    def __init__(self, message: str, iterations: int, residual: float, step: int | None = None):
        super().__init__(message)
        self.iterations = iterations
        self.residual = residual
        self.step = step


# ---------------------------------------------------------------------------
# mesh


@dataclass
class Mesh:
    nodes: np.ndarray  # (N, 3) reference coordinates, mm
    elements: np.ndarray  # (E, 8) node indices

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=float)
        self.elements = np.asarray(self.elements, dtype=int)
        if self.nodes.ndim != 2 or self.nodes.shape[1] != 3:
            raise ValueError("Mesh.nodes must be (N, 3)")
        if self.elements.ndim != 2 or self.elements.shape[1] != 8:
            raise ValueError("Mesh.elements must be (E, 8)")
        if self.elements.size and (self.elements.min() < 0 or self.elements.max() >= len(self.nodes)):
            raise ValueError("Mesh.elements references a missing node")
        for e in range(len(self.elements)):
            for xi in GAUSS:
                shape_eval(self.nodes[self.elements[e]], xi)

    @property
    def n_dof(self) -> int:
        return 3 * len(self.nodes)

    def nodes_where(self, axis: int, value: float, tol: float = 1e-9) -> np.ndarray:
        return np.flatnonzero(np.abs(self.nodes[:, axis] - value) <= tol)


def box_mesh(nx: int, ny: int, nz: int, size=(1.0, 1.0, 1.0)) -> Mesh:
    """Structured ``nx x ny x nz`` brick of ``size`` (mm) with a corner at the origin."""
    if min(nx, ny, nz) < 1:
        raise ValueError("box_mesh: element counts must be positive")
    xs = [np.linspace(0.0, s, n + 1) for s, n in zip(size, (nx, ny, nz))]
    grid = np.stack(np.meshgrid(*xs, indexing="ij"), axis=-1).reshape(-1, 3)

    def node(i, j, k):
        return (i * (ny + 1) + j) * (nz + 1) + k

    elements = []
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                elements.append(
                    [node(i + a, j + b, k + c) for a, b, c in ((0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0), (0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1))]
                )
    return Mesh(grid, np.array(elements))


def write_mesh(mesh: Mesh, location) -> None:
    """Text format: ``n_nodes n_elements`` header, node lines ``x y z``, element lines of 8 indices."""
    with open(location, "w") as fh:
        fh.write(f"{len(mesh.nodes)} {len(mesh.elements)}\n")
        for x in mesh.nodes:
            fh.write(" ".join(repr(float(v)) for v in x) + "\n")
        for e in mesh.elements:
            fh.write(" ".join(str(int(n)) for n in e) + "\n")


def read_mesh(location) -> Mesh:
    """Parse the ``write_mesh`` format.

    Raises:
        MeshFormatError: naming the offending line.
    """
    lines = Path(location).read_text().splitlines()
    if not lines:
        raise MeshFormatError("empty mesh file", 1)
    try:
        n_nodes, n_elems = (int(v) for v in lines[0].split())
    except ValueError as exc:
        raise MeshFormatError(f"bad header: {exc}", 1) from exc
    if len(lines) < 1 + n_nodes + n_elems:
        raise MeshFormatError(f"expected {n_nodes + n_elems} body lines, found {len(lines) - 1}", len(lines) + 1)
    nodes, elements = [], []
    for k in range(n_nodes):
        parts = lines[1 + k].split()
        try:
            if len(parts) != 3:
                raise ValueError(f"expected 3 coordinates, got {len(parts)}")
            nodes.append([float(v) for v in parts])
        except ValueError as exc:
            raise MeshFormatError(str(exc), 2 + k) from exc
    for k in range(n_elems):
        number = 2 + n_nodes + k
        parts = lines[number - 1].split()
        try:
            if len(parts) != 8:
                raise ValueError(f"expected 8 node indices, got {len(parts)}")
            elements.append([int(v) for v in parts])
        except ValueError as exc:
            raise MeshFormatError(str(exc), number) from exc
    return Mesh(np.array(nodes).reshape(-1, 3), np.array(elements, dtype=int).reshape(-1, 8))


# ---------------------------------------------------------------------------
# element kinematics


def shape_functions(xi) -> tuple[np.ndarray, np.ndarray]:
    """Trilinear shape values ``(..., 8)`` and local derivatives ``(..., 8, 3)``."""
    xi = np.asarray(xi, dtype=float)
    terms = 1.0 + xi[..., None, :] * HEX_NODES  # (..., 8, 3)
    n = np.prod(terms, axis=-1) / 8.0
    dn = np.empty(terms.shape)
    for a in range(3):
        others = [b for b in range(3) if b != a]
        dn[..., a] = HEX_NODES[:, a] * terms[..., others[0]] * terms[..., others[1]] / 8.0
    return n, dn


def shape_eval(coords, xi):
    """Shape values, spatial gradients ``(8, 3)`` and Jacobian determinant at ``xi``.

    Raises:
        ValueError: for a non-positive Jacobian.
    """
    coords = np.asarray(coords, dtype=float)
    n, dn = shape_functions(xi)
    jac = coords.T @ dn  # dx_a / dxi_b
    det = float(np.linalg.det(jac))
    if not det > 0:
        raise ValueError(f"non-positive element Jacobian {det:.3e}")
    return n, dn @ np.linalg.inv(jac), det


_, _DN_GAUSS = shape_functions(GAUSS)  # (8 points, 8 nodes, 3)


def _kinematics(x_ref: np.ndarray, x_cur: np.ndarray):
    """Deformation gradient, current shape gradients and volumes at every Gauss point.

    ``x_ref`` and ``x_cur`` are ``(E, 8, 3)``; results are ``(E, 8, ...)``.
    """
    j_ref = np.einsum("ena,gnb->egab", x_ref, _DN_GAUSS)
    j_cur = np.einsum("ena,gnb->egab", x_cur, _DN_GAUSS)
    det_ref = np.linalg.det(j_ref)
    det_cur = np.linalg.det(j_cur)
    if np.any(det_ref <= 0) or np.any(det_cur <= 0):
        raise ValueError("non-positive Jacobian at a Gauss point")
    f = j_cur @ np.linalg.inv(j_ref)
    grad = np.einsum("gnb,egba->egna", _DN_GAUSS, np.linalg.inv(j_cur))
    return f, grad, det_cur


def _b_matrix(grad: np.ndarray) -> np.ndarray:
    """Strain-displacement matrices ``(..., 6, 24)`` for engineering Voigt strain (11, 22, 33, 12, 13, 23)."""
    shape = grad.shape[:-2]
    b = np.zeros(shape + (6, 8, 3))
    gx, gy, gz = grad[..., 0], grad[..., 1], grad[..., 2]
    b[..., 0, :, 0] = gx
    b[..., 1, :, 1] = gy
    b[..., 2, :, 2] = gz
    b[..., 3, :, 0] = gy
    b[..., 3, :, 1] = gx
    b[..., 4, :, 0] = gz
    b[..., 4, :, 2] = gx
    b[..., 5, :, 1] = gz
    b[..., 5, :, 2] = gy
    return b.reshape(shape + (6, 24))


# ---------------------------------------------------------------------------
# material backends


class ClassicalBackend:
    """Classical integrator with the perturbation tangent at every Gauss point."""

    name = "classical"

    def __init__(self, params: mat.MaterialParams, env: mat.Environment, shape: tuple[int, ...], scheme: str = "central"):
        self.params = params
        self.env = env
        self.scheme = scheme
        self.state = mat.MaterialState.virgin(shape)

    def evaluate(self, f: np.ndarray, dt: float):
        """Returns ``(sigma_d, tangent, trial)``."""
        try:
            new, res, tangent = mat.integrate_with_tangent(self.state, f, dt, self.env, self.params, self.scheme)
        except mat.NonConvergenceError as exc:
            idx = exc.index or (None, None)
            raise BackendError(str(exc), idx[0], idx[1] if len(idx) > 1 else None) from exc
        return res.sigma_tot_d, tangent, (new, res)

    def commit(self, trial) -> None:
        self.state = trial[0]

    def stress_at(self, f: np.ndarray, dt: float) -> np.ndarray:
        """Damaged stress for ``f`` without the tangent or any commit."""
        _, res = mat.integrate_step(self.state, f, dt, self.env, self.params)
        return res.sigma_tot_d


class SurrogateBackend:
    """LSTM surrogate; the recurrent state stands in for the input history."""

    name = "surrogate"

    def __init__(self, network: sg.NetworkParams, params: mat.MaterialParams, env: mat.Environment, shape: tuple[int, ...]):
        self.params = params
        self.env = env
        self.point = sg.SurrogatePoint.virgin(network, shape)

    def evaluate(self, f: np.ndarray, dt: float):
        sigma_d, tangent, trial = self.point.stress_and_tangent(f, dt, self.env, self.params)
        return sigma_d, tangent, trial

    def commit(self, trial) -> None:
        self.point.commit(trial)

    def stress_at(self, f: np.ndarray, dt: float) -> np.ndarray:
        return self.point.evaluate(f, dt, self.env, self.params)[1]


# ---------------------------------------------------------------------------
# model, assembly and Newton iteration


@dataclass
class FeModel:
    mesh: Mesh
    backend: object
    fixed: dict = field(default_factory=dict)  # dof -> fixed value (mm)
    loaded: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))  # dofs driven by the program
    u: np.ndarray | None = None
    tol: float = NEWTON_TOL
    max_iter: int = NEWTON_MAX_ITER
    material_time: float = 0.0

    def __post_init__(self):
        if self.u is None:
            self.u = np.zeros(self.mesh.n_dof)
        self.loaded = np.asarray(self.loaded, dtype=int)

    @property
    def constrained(self) -> np.ndarray:
        return np.union1d(np.fromiter(self.fixed, dtype=int, count=len(self.fixed)), self.loaded)

    def element_dofs(self) -> np.ndarray:
        return (3 * self.mesh.elements[..., None] + np.arange(3)).reshape(len(self.mesh.elements), 24)


def uniaxial_box_model(mesh: Mesh, backend, axis: int = 0) -> FeModel:
    """Symmetry rollers on the three coordinate planes; the far face along ``axis`` is driven."""
    fixed = {}
    for a in range(3):
        for n in mesh.nodes_where(a, 0.0):
            fixed[3 * int(n) + a] = 0.0
    far = mesh.nodes[:, axis].max()
    loaded = 3 * mesh.nodes_where(axis, far) + axis
    return FeModel(mesh, backend, fixed, loaded)


def assemble(model: FeModel, u: np.ndarray, dt: float):
    """Internal force, tangent stiffness and the backend trial for displacements ``u``.

    Returns:
        ``(f_int, K, trial, sigma)`` with ``sigma`` the Gauss-point Cauchy
        stresses ``(E, 8, 3, 3)``.
    """
    mesh = model.mesh
    dofs = model.element_dofs()
    x_ref = mesh.nodes[mesh.elements]
    x_cur = x_ref + u[dofs].reshape(-1, 8, 3)
    f, grad, vol = _kinematics(x_ref, x_cur)
    start = time.perf_counter()
    sigma, tangent, trial = model.backend.evaluate(f, dt)
    model.material_time += time.perf_counter() - start
    b = _b_matrix(grad)
    s_voigt = t3.voigt_pack(t3.sym(sigma))
    c_sym = 0.5 * (tangent + np.swapaxes(tangent, -1, -2))
    f_e = np.einsum("egij,egi,eg->ej", b, s_voigt, vol)
    k_mat = np.einsum("egij,egik,egkl,eg->ejl", b, c_sym, b, vol)
    geo = np.einsum("egna,egab,egmb,eg->enm", grad, sigma, grad, vol)
    k_geo = np.einsum("enm,ab->enamb", geo, np.eye(3)).reshape(-1, 24, 24)
    n = mesh.n_dof
    f_int = np.zeros(n)
    np.add.at(f_int, dofs, f_e)
    k = np.zeros((n, n))
    for e in range(len(dofs)):
        k[np.ix_(dofs[e], dofs[e])] += k_mat[e] + k_geo[e]
    return f_int, k, trial, sigma


@dataclass
class StepResult:
    u: np.ndarray
    f_int: np.ndarray
    sigma: np.ndarray
    iterations: int
    residuals: list


def newton_solve(model: FeModel, targets: dict, dt: float, tol: float | None = None, max_iter: int | None = None) -> StepResult:
    """Solve one load step with the constrained DOFs set to ``targets`` (plus ``model.fixed``).

    Convergence is ``||r_free|| <= tol * ||f_int||`` (all DOFs), with an
    absolute floor for load-free states.  ``tol`` and ``max_iter`` default
    to the model settings.  The backend state and ``model.u`` are committed
    only on success.

    Raises:
        NewtonError: carrying the iteration count and last residual.
    """
    tol = model.tol if tol is None else tol
    max_iter = model.max_iter if max_iter is None else max_iter
    u = model.u.copy()
    prescribed = dict(model.fixed)
    prescribed.update(targets)
    cons = np.array(sorted(prescribed), dtype=int)
    u[cons] = [prescribed[d] for d in cons]
    free = np.setdiff1d(np.arange(model.mesh.n_dof), cons)
    residuals = []
    for it in range(1, max_iter + 1):
        f_int, k, trial, sigma = assemble(model, u, dt)
        r = f_int[free]
        scale = np.linalg.norm(f_int)
        rel = np.linalg.norm(r) / scale if scale > 0 else 0.0
        residuals.append(rel)
        if rel < tol or np.linalg.norm(r) < 1e-12:
            model.backend.commit(trial)
            model.u = u
            return StepResult(u, f_int, sigma, it, residuals)
        if it == max_iter:
            break
        u[free] -= np.linalg.solve(k[np.ix_(free, free)], r)
    raise NewtonError(f"Newton did not converge in {max_iter} iterations (relative residual {residuals[-1]:.3e})", max_iter, residuals[-1])


# ---------------------------------------------------------------------------
# load programs


@dataclass
class LoadProgram:
    """Piecewise-linear prescribed displacement of the loaded DOFs.

    ``knots`` are ``(time s, displacement mm)`` pairs starting at time 0.
    """

    knots: list
    dt: float

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("LoadProgram.dt must be positive")
        times = [t for t, _ in self.knots]
        if not self.knots or times[0] != 0 or any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("LoadProgram knots must start at t = 0 and increase in time")

    def times(self) -> np.ndarray:
        end = self.knots[-1][0]
        n = round(end / self.dt)
        if not math.isclose(n * self.dt, end, rel_tol=1e-9, abs_tol=1e-12):
            raise ValueError("LoadProgram duration must be a multiple of dt")
        return np.arange(n + 1) * self.dt

    def displacement(self, t) -> np.ndarray:
        ts, us = zip(*self.knots)
        return np.interp(t, ts, us)

    @classmethod
    def cyclic(cls, amplitude: float, cycles: int, rate: float, dt: float) -> "LoadProgram":
        """Triangular cycles ``0 -> amplitude -> 0`` at displacement rate ``rate`` (mm/s)."""
        half = amplitude / rate
        knots = [(0.0, 0.0)]
        for c in range(cycles):
            knots.append(((2 * c + 1) * half, amplitude))
            knots.append(((2 * c + 2) * half, 0.0))
        return cls(knots, dt)


def run_program(model: FeModel, program: LoadProgram) -> list[dict]:
    """Step through ``program``; returns one row per time point.

    Rows hold the step index, time, prescribed displacement, total reaction
    force on the loaded DOFs (N for mm and MPa), Newton iterations and the
    material wall time of the step.

    Raises:
        NewtonError: with the failing step index.
    """
    rows = [{"step": 0, "time": 0.0, "displacement": 0.0, "force": 0.0, "iterations": 0, "material_time": 0.0}]
    times = program.times()
    for k in range(1, len(times)):
        disp = float(program.displacement(times[k]))
        model.material_time = 0.0
        try:
            res = newton_solve(model, {int(d): disp for d in model.loaded}, program.dt)
        except NewtonError as exc:
            raise NewtonError(f"step {k}: {exc}", exc.iterations, exc.residual, step=k) from exc
        except BackendError as exc:
            raise NewtonError(f"step {k}: {exc}", 0, math.nan, step=k) from exc
        rows.append(
            {
                "step": k,
                "time": float(times[k]),
                "displacement": disp,
                "force": float(np.sum(res.f_int[model.loaded])),
                "iterations": res.iterations,
                "material_time": model.material_time,
            }
        )
        log.debug("step %d u=%.4e F=%.4e its=%d", k, disp, rows[-1]["force"], res.iterations)
    return rows


def write_rows(rows: list[dict], location, header: dict | None = None) -> None:
    """CSV with optional ``# key=value`` comment lines in front."""
    with open(location, "w", newline="") as fh:
        for key, value in (header or {}).items():
            fh.write(f"# {key}={value}\n")
        if rows:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
