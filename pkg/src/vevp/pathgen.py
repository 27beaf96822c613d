"""Training-data generation: Halton-sampled loading paths, labeled by the material model.

A loading path starts at ``F = I`` and walks piecewise linearly towards ``P``
target points drawn from a nine-dimensional Halton cloud that fills the box
``F_ii in [0.9, 1.1]``, ``F_ij in [-0.05, 0.05]``.  Each path uses one time
increment and one maximum component increment, both log-uniform.  A path is
redrawn whenever a step's strain rate ``||E_k - E_{k-1}||_F / dt`` leaves
``rate_bounds``.  The finished path gets one extra record in which a single
component is bumped by ``alpha`` so the network sees the perturbations used
for the numerical tangent.

Labels are the undamaged total Cauchy stress from ``material.run_path``.
Datasets are stored as JSON lines with an optional manifest header.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import material as mat
from . import tensor3 as t3

log = logging.getLogger(__name__)

PRIMES = (2, 3, 5, 7, 11, 13, 17, 19, 23)

# diagonal positions of the row-major nine-vector of F
_DIAGONAL = np.array([True, False, False, False, True, False, False, False, True])


class PathGenerationError(RuntimeError):
    """The rate filter rejected every attempt."""


class LabelingError(RuntimeError):
    """The material integrator failed on a path."""

    def __init__(self, message: str, sequence: int | None = None, step: int | None = None):
        super().__init__(message)
        self.sequence = sequence
        self.step = step


class DatasetFormatError(ValueError):
    """A dataset file line could not be parsed."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


# ---------------------------------------------------------------------------
# Halton sequence


def radical_inverse(index: int, base: int) -> float:
    """Mirror the base-``base`` digits of ``index`` about the radix point."""
    if index < 0:
        raise ValueError("radical_inverse: index must be non-negative")
    result, scale = 0.0, 1.0
    while index > 0:
        index, digit = divmod(index, base)
        scale /= base
        result += digit * scale
    return result


def halton_point(index: int, dims: int) -> np.ndarray:
    """Point ``index`` of the Halton sequence in ``dims <= 9`` dimensions."""
    if not 1 <= dims <= len(PRIMES):
        raise ValueError(f"halton_point: dims must be in [1, {len(PRIMES)}]")
    return np.array([radical_inverse(index, p) for p in PRIMES[:dims]])


def halton(indices, dims: int) -> np.ndarray:
    """Halton points for an iterable of indices, shape ``(len, dims)``."""
    return np.array([halton_point(int(i), dims) for i in indices]).reshape(-1, dims)


# ---------------------------------------------------------------------------
# configuration and containers


@dataclass(frozen=True)
class PathConfig:
    """Sampling box, increments, rate filter and dataset recipe.

    ``P`` is the number of targets for ``generate_path``; ``p_choices`` is
    the mixture used by ``generate_dataset``, which also reserves
    ``single_fraction`` of the sequences for single-component loadings.
    """

    diag_bounds: tuple[float, float] = (0.9, 1.1)
    offdiag_bounds: tuple[float, float] = (-0.05, 0.05)
    dF_range: tuple[float, float] = (1e-6, 1e-4)
    dt_range: tuple[float, float] = (0.05, 5.0)
    rate_bounds: tuple[float, float] = (1e-5, 1e-3)
    P: int = 1
    seed: int = 0
    max_retries: int = 50
    segment_steps: int = 100
    cloud_size: int = 4096
    perturb_alpha: float = 1e-4
    p_choices: tuple[int, ...] = (1, 3, 6)
    single_fraction: float = 0.05
    w_w_values: tuple[float, ...] = (0.0, 0.012)
    v_np_values: tuple[float, ...] = (0.0, 0.1)

    def __post_init__(self):
        for name in ("diag_bounds", "offdiag_bounds", "dF_range", "dt_range", "rate_bounds"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ValueError(f"PathConfig.{name} must be ordered, got {(lo, hi)}")
        for name in ("dF_range", "dt_range", "rate_bounds"):
            if getattr(self, name)[0] <= 0:
                raise ValueError(f"PathConfig.{name} must be positive")
        if self.P < 1 or min(self.p_choices) < 1:
            raise ValueError("PathConfig: P must be at least 1")
        if self.max_retries < 1 or self.segment_steps < 1 or self.cloud_size < 1:
            raise ValueError("PathConfig: max_retries, segment_steps and cloud_size must be positive")
        if not 0.0 <= self.single_fraction <= 1.0:
            raise ValueError("PathConfig.single_fraction must lie in [0, 1]")

    def lower(self) -> np.ndarray:
        """Row-major lower corner of the sampling box."""
        return np.where(_DIAGONAL, self.diag_bounds[0], self.offdiag_bounds[0])

    def upper(self) -> np.ndarray:
        return np.where(_DIAGONAL, self.diag_bounds[1], self.offdiag_bounds[1])

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, data: dict) -> "PathConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise KeyError(f"unknown PathConfig keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in data.items()})


@dataclass
class LoadingPath:
    """Deformation-gradient records ``F`` ``(n, 3, 3)`` with time increments ``dt`` ``(n,)``."""

    F: np.ndarray
    dt: np.ndarray
    env: mat.Environment
    perturbed: bool = False

    def __len__(self) -> int:
        return len(self.F)


@dataclass
class TrainingSequence:
    """Network inputs ``(T, 9)`` and undamaged stress targets ``(T, 6)``.

    Input columns are ``voigt(B)`` of the total ``B = F F^T``, then ``dt``,
    ``w_w`` and ``v_np``.  ``F`` is kept so a stored sequence can be
    relabeled.
    """

    env: tuple[float, float]
    dt_list: np.ndarray
    F: np.ndarray
    inputs: np.ndarray
    targets: np.ndarray

    def __len__(self) -> int:
        return len(self.inputs)

    def path(self) -> LoadingPath:
        return LoadingPath(self.F.copy(), self.dt_list.copy(), mat.Environment(*self.env))

    def __eq__(self, other) -> bool:
        if not isinstance(other, TrainingSequence):
            return NotImplemented
        return self.env == other.env and all(
            np.array_equal(getattr(self, k), getattr(other, k)) for k in ("dt_list", "F", "inputs", "targets")
        )


# ---------------------------------------------------------------------------
# path generation


def step_rates(f: np.ndarray, dt) -> np.ndarray:
    """Strain rate ``||E_k - E_{k-1}||_F / dt_k`` of every step ``k >= 1``."""
    e = t3.green_strain(np.asarray(f, dtype=float))
    return t3.fnorm(np.diff(e, axis=0)) / np.asarray(dt, dtype=float)[1:]


def _log_uniform(rng: np.random.Generator, bounds) -> float:
    lo, hi = bounds
    return float(np.exp(rng.uniform(np.log(lo), np.log(hi))))


def _targets(cfg: PathConfig, rng: np.random.Generator, count: int, component: int | None) -> np.ndarray:
    """``count`` row-major target gradients drawn from the Halton cloud.

    With ``component`` set, only that entry leaves the identity (its value
    comes from the matching Halton column).
    """
    idx = rng.integers(1, cfg.cloud_size + 1, size=count)
    unit = halton(idx, 9)
    pts = cfg.lower() + unit * (cfg.upper() - cfg.lower())
    if component is None:
        return pts
    out = np.tile(np.eye(3).ravel(), (count, 1))
    out[:, component] = pts[:, component]
    return out


def _walk(targets: np.ndarray, step: float, budget: int) -> np.ndarray:
    """Piecewise-linear walk from the identity towards each target in turn.

    Every segment has exactly ``budget`` records, so a path with ``P``
    targets always has ``P * budget + 1`` records.  Along a segment all
    components move linearly; the one with the farthest to go advances by at
    most ``step`` per record.  A target beyond ``budget * step`` is
    approached along the same line without being reached.
    """
    current = np.eye(3).ravel()
    records = [current[None]]
    frac = np.arange(1, budget + 1)[:, None] / budget
    for target in targets:
        delta = target - current
        dist = np.max(np.abs(delta))
        if dist > budget * step:
            delta = delta * (budget * step / dist)
        records.append(current + frac * delta)
        current = current + delta
    return np.concatenate(records).reshape(-1, 3, 3)


def generate_path(
    cfg: PathConfig,
    env: mat.Environment,
    rng: np.random.Generator | None = None,
    component: int | None = None,
) -> LoadingPath:
    """Draw a rate-admissible loading path with ``cfg.P`` targets.

    ``component`` (row-major index 0..8) restricts the loading to one entry
    of ``F``.  The path has ``P * segment_steps + 1`` records.  Every attempt draws fresh targets, a fresh step size from
    ``dF_range`` and a fresh ``dt`` from ``dt_range``.

    Raises:
        PathGenerationError: if ``max_retries`` attempts all violate the rate bounds.
    """
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    lo, hi = cfg.rate_bounds
    for attempt in range(cfg.max_retries):
        targets = _targets(cfg, rng, cfg.P, component)
        # uniform rather than log-uniform: a fixed-length segment with a step
        # near the lower bound would hardly leave the identity
        step = float(rng.uniform(*cfg.dF_range))
        dt = _log_uniform(rng, cfg.dt_range)
        f = _walk(targets, step, cfg.segment_steps)
        dts = np.full(len(f), dt)
        rates = step_rates(f, dts)
        if np.all((rates >= lo) & (rates <= hi)):
            log.debug("path accepted after %d attempts", attempt + 1)
            return LoadingPath(f, dts, env)
    raise PathGenerationError(f"no path met the rate bounds {cfg.rate_bounds} in {cfg.max_retries} attempts")


def perturb_last_step(path: LoadingPath, rng_seed, alpha: float = 1e-4) -> LoadingPath:
    """Append a copy of the last record with one random component raised by ``alpha``.

    ``rng_seed`` is a seed or a ``numpy.random.Generator``.  The new record
    reuses the last time increment.
    """
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    i, j = divmod(int(rng.integers(9)), 3)
    bumped = path.F[-1].copy()
    bumped[i, j] = path.F[-1][i, j] + alpha
    return LoadingPath(
        np.concatenate([path.F, bumped[None]]),
        np.append(path.dt, path.dt[-1]),
        path.env,
        perturbed=True,
    )


# ---------------------------------------------------------------------------
# labeling


def _sequence(f: np.ndarray, dt: np.ndarray, env: tuple[float, float], sigma: np.ndarray) -> TrainingSequence:
    n = len(f)
    inputs = np.empty((n, 9))
    inputs[:, :6] = t3.voigt_pack(t3.left_cauchy_green(f))
    inputs[:, 6] = dt
    inputs[:, 7] = env[0]
    inputs[:, 8] = env[1]
    return TrainingSequence(env, dt.copy(), f.copy(), inputs, t3.voigt_pack(sigma))


def label_path(path: LoadingPath, params: mat.MaterialParams) -> TrainingSequence:
    """Integrate the model along ``path`` from a virgin state.

    Raises:
        LabelingError: carrying the failing step index.
    """
    return label_paths([path], params)[0]


def label_paths(paths: list[LoadingPath], params: mat.MaterialParams, chunk: int = 256) -> list[TrainingSequence]:
    """Label many paths, integrating up to ``chunk`` of them side by side.

    Paths are sorted by length and padded by holding their last record; every
    point is integrated independently of its neighbours, so the labels are
    bit-identical to ``label_path`` on each path alone.
    """
    order = sorted(range(len(paths)), key=lambda i: len(paths[i]))
    out: list[TrainingSequence | None] = [None] * len(paths)
    for start in range(0, len(order), chunk):
        ids = order[start : start + chunk]
        n = max(len(paths[i]) for i in ids)
        f = np.empty((n, len(ids), 3, 3))
        dt = np.empty((n, len(ids)))
        for b, i in enumerate(ids):
            m = len(paths[i])
            f[:m, b] = paths[i].F
            f[m:, b] = paths[i].F[-1]
            dt[:m, b] = paths[i].dt
            dt[m:, b] = paths[i].dt[-1]
        env = mat.Environment(
            np.array([paths[i].env.w_w for i in ids], dtype=float),
            np.array([paths[i].env.v_np for i in ids], dtype=float),
        )
        try:
            results, _ = mat.run_path(f, dt, env, params)
        except mat.NonConvergenceError as exc:
            seq = ids[exc.index[0]] if exc.index else None
            step = None
            if seq is not None:
                # replay the culprit alone to find the step
                try:
                    _label_steps(paths[seq], params)
                except LabelingError as inner:
                    step = inner.step
            raise LabelingError(
                f"integration failed on sequence {seq} at step {step}: {exc}", sequence=seq, step=step
            ) from exc
        sigma = np.stack([r.sigma_tot for r in results])
        for b, i in enumerate(ids):
            m = len(paths[i])
            env_i = (float(paths[i].env.w_w), float(paths[i].env.v_np))
            out[i] = _sequence(paths[i].F, paths[i].dt, env_i, sigma[:m, b])
    return out


def _label_steps(path: LoadingPath, params: mat.MaterialParams) -> TrainingSequence:
    """Step-by-step labeling that reports the failing step."""
    state = mat.MaterialState.virgin()
    state.F = path.F[0].copy()
    sigma = [np.zeros((3, 3))]
    for k in range(1, len(path)):
        try:
            state, res = mat.integrate_step(state, path.F[k], float(path.dt[k]), path.env, params)
        except mat.NonConvergenceError as exc:
            raise LabelingError(f"integration failed at step {k}: {exc}", step=k) from exc
        sigma.append(res.sigma_tot)
    env = (float(path.env.w_w), float(path.env.v_np))
    return _sequence(path.F, path.dt, env, np.array(sigma))


# ---------------------------------------------------------------------------
# dataset recipe


def params_fingerprint(params: mat.MaterialParams) -> str:
    return hashlib.sha256(params.dumps().encode()).hexdigest()


def generate_paths(n: int, cfg: PathConfig, seed: int | None = None) -> list[LoadingPath]:
    """Perturbed paths following the dataset recipe.

    The first ``round(single_fraction * n)`` sequences load one random
    component of ``F``; the rest visit ``P`` targets with ``P`` drawn from
    ``p_choices``.  The environment is drawn per sequence from the grid.
    Sequence ``i`` uses its own generator spawned from ``seed``, so the
    output does not depend on how the work is split.
    """
    seed = cfg.seed if seed is None else seed
    children = np.random.SeedSequence(seed).spawn(n)
    n_single = round(cfg.single_fraction * n)
    paths = []
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        env = mat.Environment(float(rng.choice(cfg.w_w_values)), float(rng.choice(cfg.v_np_values)))
        if i < n_single:
            p, component = int(rng.choice(cfg.p_choices)), int(rng.integers(9))
        else:
            p, component = int(rng.choice(cfg.p_choices)), None
        path = generate_path(replace(cfg, P=p), env, rng, component)
        paths.append(perturb_last_step(path, rng, cfg.perturb_alpha))
    return paths


def generate_dataset(
    n: int, cfg: PathConfig, params: mat.MaterialParams, seed: int | None = None
) -> tuple[list[TrainingSequence], dict]:
    """Generate and label ``n`` sequences; returns ``(sequences, manifest)``."""
    seed = cfg.seed if seed is None else seed
    paths = generate_paths(n, cfg, seed)
    seqs = label_paths(paths, params)
    manifest = {
        "seed": seed,
        "count": n,
        "config": cfg.to_dict(),
        "params_sha256": params_fingerprint(params),
    }
    return seqs, manifest


# ---------------------------------------------------------------------------
# persistence


def _record(seq: TrainingSequence) -> dict:
    return {
        "env": list(seq.env),
        "dt_list": seq.dt_list.tolist(),
        "F": seq.F.reshape(len(seq), 9).tolist(),
        "inputs": seq.inputs.tolist(),
        "targets": seq.targets.tolist(),
    }


def _from_record(rec: dict) -> TrainingSequence:
    f = np.asarray(rec["F"], dtype=float)
    seq = TrainingSequence(
        env=(float(rec["env"][0]), float(rec["env"][1])),
        dt_list=np.asarray(rec["dt_list"], dtype=float),
        F=f.reshape(-1, 3, 3),
        inputs=np.asarray(rec["inputs"], dtype=float).reshape(-1, 9),
        targets=np.asarray(rec["targets"], dtype=float).reshape(-1, 6),
    )
    n = len(seq.inputs)
    if len(seq.targets) != n or len(seq.dt_list) != n or len(seq.F) != n:
        raise ValueError("field lengths differ")
    return seq


def write_dataset(seqs: list[TrainingSequence], location, manifest: dict | None = None) -> None:
    """One JSON object per line; floats are written with full round-trip precision."""
    with open(location, "w") as fh:
        if manifest is not None:
            fh.write(json.dumps({"manifest": manifest}) + "\n")
        for seq in seqs:
            fh.write(json.dumps(_record(seq)) + "\n")


def read_dataset(location, with_manifest: bool = False):
    """Inverse of ``write_dataset``.

    Returns the sequence list, or ``(manifest, sequences)`` when
    ``with_manifest`` is set (``manifest`` is ``None`` if absent).

    Raises:
        DatasetFormatError: naming the first malformed line.
    """
    manifest = None
    seqs = []
    text = Path(location).read_text()
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    for number, line in enumerate(lines, start=1):
        try:
            rec = json.loads(line)
            if number == 1 and isinstance(rec, dict) and set(rec) == {"manifest"}:
                manifest = rec["manifest"]
                continue
            seqs.append(_from_record(rec))
        except (ValueError, KeyError, TypeError, IndexError) as exc:
            raise DatasetFormatError(str(exc), number) from exc
    return (manifest, seqs) if with_manifest else seqs
