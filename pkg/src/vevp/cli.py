"""Command-line front end: ``vevp {generate,train,mp-drive,bench,fem}``.

Each command starts from built-in defaults, overlays an optional JSON config
file (``--config``) and then the command-line flags.  Unknown keys are
rejected before any work is done.  The fully resolved config is logged and
its SHA-256 fingerprint is embedded in every output file.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import fem
from . import material as mat
from . import pathgen as pg
from . import surrogate as sg
from . import tensor3 as t3

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Invalid or unknown configuration entry."""


# ---------------------------------------------------------------------------
# configuration

_ENV = {"w_w": 0.0, "v_np": 0.0}

DEFAULTS = {
    "generate": {
        "count": 100,
        "seed": 0,
        "out": "dataset.jsonl",
        "path": pg.PathConfig().to_dict(),
        "params": {},
    },
    "train": {
        "dataset": "dataset.jsonl",
        "seed": 0,
        "out": "weights.json",
        "loss_log": None,
        "weights": None,
        "train": sg.TrainConfig().to_dict(),
    },
    "mp-drive": {
        "backend": "classical",
        "weights": None,
        "out": "mp_drive.csv",
        "scenario": "uniaxial",
        "amplitude": 0.01,
        "strain_rate": 5e-4,
        "cycles": 2,
        "dt": 0.1,
        "path_file": None,
        "sequence": 0,
        **_ENV,
        "params": {},
    },
    "bench": {
        "weights": None,
        "hidden": 32,
        "seed": 0,
        "out": "bench.csv",
        "repeats": 5,
        "simple": {"amplitude": 0.01, "steps": 200, "dt": 0.1},
        "complex": {"targets": 3, "step": 1e-4, "dt": 0.2},
        **_ENV,
        "params": {},
    },
    "fem": {
        "backend": "classical",
        "weights": None,
        "out": "fem.csv",
        "mesh": {"divisions": [1, 1, 1], "size": [1.0, 1.0, 1.0]},
        "mesh_file": None,
        # dt keeps the strain step at 1e-4, the largest increment in the training paths
        "program": {"amplitude": 0.01, "cycles": 2, "rate": 5e-4, "dt": 0.2},
        "compare": False,
        "newton_tol": fem.NEWTON_TOL,
        "newton_max_iter": fem.NEWTON_MAX_ITER,
        **_ENV,
        "params": {},
    },
}

# nested sections whose keys are checked against another schema
_PARAM_KEYS = set(mat.MaterialParams().to_dict())


def _merge(base: dict, override: dict, where: str) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        name = f"{where}.{key}" if where else key
        if key not in base:
            raise ConfigError(f"unknown config key {name!r}")
        if key == "params":
            if not isinstance(value, dict):
                raise ConfigError("'params' must be a mapping of material parameter overrides")
            unknown = set(value) - _PARAM_KEYS
            if unknown:
                raise ConfigError(f"unknown material parameter(s) {sorted(unknown)}")
            out[key] = {**out[key], **value}
        elif isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {name!r} must be a mapping")
            out[key] = _merge(base[key], value, name)
        else:
            out[key] = value
    return out


def resolve_config(command: str, file_cfg: dict | None = None, flags: dict | None = None) -> dict:
    """Defaults, then the file, then the flags (``None`` flags are ignored)."""
    cfg = _merge(DEFAULTS[command], file_cfg or {}, "")
    return _merge(cfg, {k: v for k, v in (flags or {}).items() if v is not None}, "")


def fingerprint(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def _params(cfg: dict) -> mat.MaterialParams:
    return mat.MaterialParams.table3().with_overrides(**cfg["params"])


def _env(cfg: dict) -> mat.Environment:
    return mat.Environment(float(cfg["w_w"]), float(cfg["v_np"]))


def _network(cfg: dict) -> sg.NetworkParams:
    if not cfg.get("weights"):
        raise ConfigError("the surrogate backend needs --weights")
    return sg.load_weights(cfg["weights"])


def _write_csv(location, header: list[str], rows, meta: dict) -> None:
    with open(location, "w") as fh:
        for key, value in meta.items():
            fh.write(f"# {key}={value}\n")
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(repr(float(v)) if not isinstance(v, (int, np.integer)) else str(v) for v in row) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_generate(cfg: dict) -> dict:
    try:
        path_cfg = pg.PathConfig.from_dict(cfg["path"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad path config: {exc}") from exc
    count = int(cfg["count"])
    if count < 0:
        raise ConfigError("count must be non-negative")
    seqs, manifest = pg.generate_dataset(count, path_cfg, _params(cfg), seed=int(cfg["seed"]))
    manifest["config_sha256"] = fingerprint(cfg)
    pg.write_dataset(seqs, cfg["out"], manifest)
    return {"count": len(seqs), "out": cfg["out"]}


def cmd_train(cfg: dict) -> dict:
    if not Path(cfg["dataset"]).is_file():
        raise FileNotFoundError(f"dataset {cfg['dataset']!r} not found")
    seqs = pg.read_dataset(cfg["dataset"])
    try:
        train_cfg = sg.TrainConfig(**{**cfg["train"], "seed": int(cfg["seed"])})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad train config: {exc}") from exc
    init = sg.load_weights(cfg["weights"], hidden=train_cfg.hidden) if cfg["weights"] else None
    best, history, (_, val_idx) = sg.fit(seqs, train_cfg, init=init, loss_log=cfg["loss_log"])
    sg.save_weights(best, cfg["out"], metadata={"config_sha256": fingerprint(cfg)})
    val = [seqs[i] for i in val_idx]
    report = {"epochs": len(history), "final": history[-1], "out": cfg["out"]}
    if val:
        std = np.concatenate([s.targets for s in val]).std(axis=0)
        report["val_mae_over_std"] = (sg.component_mae(val, best) / np.where(std > 0, std, 1.0)).tolist()
    return report


def cyclic_history(amplitude: float, rate: float, cycles: int, dt: float) -> np.ndarray:
    """Triangular strain history 0 -> amplitude -> 0 at ``rate`` sampled every ``dt``."""
    if amplitude <= 0 or rate <= 0 or dt <= 0 or cycles < 1:
        raise ConfigError("cyclic loading needs positive amplitude, rate, dt and cycles")
    half = amplitude / rate
    n = round(2 * cycles * half / dt)
    t = np.arange(n + 1) * dt
    phase = np.mod(t, 2 * half)
    return np.where(phase <= half, phase, 2 * half - phase) * rate


def scripted_path(cfg: dict) -> tuple[np.ndarray, np.ndarray, mat.Environment]:
    """Deformation-gradient history, time steps and environment for ``mp-drive``."""
    if cfg["scenario"] == "file":
        if not cfg["path_file"]:
            raise ConfigError("scenario 'file' needs path_file")
        seqs = pg.read_dataset(cfg["path_file"])
        seq = seqs[int(cfg["sequence"])]
        return seq.F, seq.dt_list, mat.Environment(*seq.env)
    strain = cyclic_history(cfg["amplitude"], cfg["strain_rate"], int(cfg["cycles"]), cfg["dt"])
    f = np.broadcast_to(np.eye(3), (len(strain), 3, 3)).copy()
    if cfg["scenario"] == "uniaxial":
        f[:, 0, 0] += strain
    elif cfg["scenario"] == "shear":
        f[:, 0, 1] += strain
    else:
        raise ConfigError(f"unknown scenario {cfg['scenario']!r}; expected uniaxial, shear or file")
    return f, np.full(len(f), float(cfg["dt"])), _env(cfg)


def drive_surrogate(f: np.ndarray, dts: np.ndarray, env: mat.Environment, network, params):
    """Undamaged and damaged surrogate stress along a history; record 0 is the stress-free start."""
    point = sg.SurrogatePoint.virgin(network)
    undamaged = np.zeros((len(f), 3, 3))
    damaged = np.zeros((len(f), 3, 3))
    for k in range(1, len(f)):
        undamaged[k], damaged[k], trial = point.evaluate(f[k], dts[k], env, params)
        point.commit(trial)
    return undamaged, damaged


def drive_classical(f: np.ndarray, dts: np.ndarray, env: mat.Environment, params):
    """Undamaged and damaged classical stress along a history."""
    results, _ = mat.run_path(f, dts, env, params)
    return np.stack([r.sigma_tot for r in results]), np.stack([r.sigma_tot_d for r in results])


def cmd_mp_drive(cfg: dict) -> dict:
    """Columns: Green strain ``E``, damaged Cauchy stress ``S`` and undamaged stress ``U`` (Voigt order)."""
    f, dts, env = scripted_path(cfg)
    params = _params(cfg)
    if cfg["backend"] == "classical":
        try:
            undamaged, damaged = drive_classical(f, dts, env, params)
        except mat.NonConvergenceError as exc:
            raise RuntimeError(f"classical backend failed: {exc}") from exc
    elif cfg["backend"] == "surrogate":
        undamaged, damaged = drive_surrogate(f, dts, env, _network(cfg), params)
    else:
        raise ConfigError(f"unknown backend {cfg['backend']!r}")
    green = t3.voigt_pack(0.5 * (t3.transpose(f) @ f - np.eye(3)))
    s = t3.voigt_pack(damaged)
    u = t3.voigt_pack(undamaged)
    time_s = np.concatenate([[0.0], np.cumsum(dts[1:])])
    names = ["11", "22", "33", "12", "13", "23"]
    header = ["step", "time"] + [f"E{n}" for n in names] + [f"S{n}" for n in names] + [f"U{n}" for n in names]
    rows = [[k, time_s[k], *green[k], *s[k], *u[k]] for k in range(len(f))]
    _write_csv(cfg["out"], header, rows, {"config_sha256": fingerprint(cfg), "backend": cfg["backend"]})
    return {"steps": len(f) - 1, "peak_stress": float(np.abs(s).max()), "out": cfg["out"]}


def bench_paths(cfg: dict) -> dict:
    """Simple (uniaxial ramp) and complex (all-component, several targets) benchmark paths."""
    simple = cfg["simple"]
    strain = np.linspace(0.0, simple["amplitude"], int(simple["steps"]) + 1)
    f_simple = np.broadcast_to(np.eye(3), (len(strain), 3, 3)).copy()
    f_simple[:, 0, 0] += strain
    cplx = cfg["complex"]
    path_cfg = pg.PathConfig(P=int(cplx["targets"]), dF_range=(cplx["step"], cplx["step"] * (1 + 1e-12)),
                             dt_range=(cplx["dt"], cplx["dt"] * (1 + 1e-12)))
    path = pg.generate_path(path_cfg, _env(cfg), np.random.default_rng(int(cfg["seed"])))
    return {
        "simple": (f_simple, np.full(len(f_simple), float(simple["dt"]))),
        "complex": (path.F, path.dt),
    }


def time_backends(f: np.ndarray, dts: np.ndarray, env, params, network, repeats: int) -> dict:
    """Median per-step wall time of stress plus tangent for both backends.

    Each repeat replays the whole path from the virgin state; the per-step
    median over repeats suppresses scheduler noise.
    """
    n = len(f) - 1
    classical = np.zeros((repeats, n))
    surrogate = np.zeros((repeats, n))
    iterations = np.zeros(n, dtype=int)
    for r in range(repeats):
        state = mat.MaterialState.virgin(())
        point = sg.SurrogatePoint.virgin(network)
        for k in range(1, n + 1):
            start = time.perf_counter()
            state, res, _ = mat.integrate_with_tangent(state, f[k], dts[k], env, params)
            classical[r, k - 1] = time.perf_counter() - start
            iterations[k - 1] = int(res.iterations)
            start = time.perf_counter()
            _, _, trial = point.stress_and_tangent(f[k], dts[k], env, params)
            point.commit(trial)
            surrogate[r, k - 1] = time.perf_counter() - start
    return {
        "classical": np.median(classical, axis=0),
        "surrogate": np.median(surrogate, axis=0),
        "iterations": iterations,
    }


def coefficient_of_variation(x) -> float:
    x = np.asarray(x, dtype=float)
    return float(x.std() / x.mean())


def cmd_bench(cfg: dict) -> dict:
    params, env = _params(cfg), _env(cfg)
    network = sg.load_weights(cfg["weights"]) if cfg["weights"] else sg.NetworkParams.initialize(int(cfg["hidden"]), int(cfg["seed"]))
    rows, report = [], {}
    for name, (f, dts) in bench_paths(cfg).items():
        t = time_backends(f, dts, env, params, network, int(cfg["repeats"]))
        total_c, total_s = float(t["classical"].sum()), float(t["surrogate"].sum())
        report[name] = {
            "steps": len(dts) - 1,
            "classical_total_s": total_c,
            "surrogate_total_s": total_s,
            "speedup": total_c / total_s,
            "classical_cv": coefficient_of_variation(t["classical"]),
            "surrogate_cv": coefficient_of_variation(t["surrogate"]),
        }
        rows += [[name, k + 1, t["classical"][k], t["surrogate"][k], t["iterations"][k]] for k in range(len(dts) - 1)]
    meta = {"config_sha256": fingerprint(cfg), "summary": json.dumps(report, sort_keys=True)}
    with open(cfg["out"], "w") as fh:
        for key, value in meta.items():
            fh.write(f"# {key}={value}\n")
        fh.write("path,step,classical_s,surrogate_s,classical_iterations\n")
        for row in rows:
            fh.write(f"{row[0]},{row[1]},{row[2]!r},{row[3]!r},{row[4]}\n")
    return report


def build_model(cfg: dict, backend: str) -> fem.FeModel:
    mesh = fem.read_mesh(cfg["mesh_file"]) if cfg["mesh_file"] else fem.box_mesh(*cfg["mesh"]["divisions"], size=cfg["mesh"]["size"])
    shape = (len(mesh.elements), len(fem.GAUSS))
    if backend == "classical":
        material = fem.ClassicalBackend(_params(cfg), _env(cfg), shape)
    elif backend == "surrogate":
        material = fem.SurrogateBackend(_network(cfg), _params(cfg), _env(cfg), shape)
    else:
        raise ConfigError(f"unknown backend {backend!r}")
    model = fem.uniaxial_box_model(mesh, material)
    model.tol = float(cfg["newton_tol"])
    model.max_iter = int(cfg["newton_max_iter"])
    return model


def load_program(cfg: dict) -> fem.LoadProgram:
    prog = cfg["program"]
    return fem.LoadProgram.cyclic(prog["amplitude"], int(prog["cycles"]), prog["rate"], prog["dt"])


def cmd_fem(cfg: dict) -> dict:
    program = load_program(cfg)
    rows = fem.run_program(build_model(cfg, cfg["backend"]), program)
    report = {"steps": len(rows) - 1, "peak_force": max(abs(r["force"]) for r in rows), "out": cfg["out"]}
    meta = {"config_sha256": fingerprint(cfg), "backend": cfg["backend"]}
    if cfg["compare"]:
        other = "classical" if cfg["backend"] == "surrogate" else "surrogate"
        reference = fem.run_program(build_model(cfg, other), program)
        for row, ref in zip(rows, reference):
            row[f"force_{other}"] = ref["force"]
        force = np.array([r["force"] for r in rows])
        ref_force = np.array([r["force"] for r in reference])
        classical = ref_force if other == "classical" else force
        report["mae"] = float(np.mean(np.abs(force - ref_force)))
        report["mae_over_peak"] = report["mae"] / float(np.abs(classical).max())
        meta["mae"] = report["mae"]
    fem.write_rows(rows, cfg["out"], meta)
    return report


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "mp-drive": cmd_mp_drive,
    "bench": cmd_bench,
    "fem": cmd_fem,
}


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vevp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="JSON config file")
        p.add_argument("--out", help="output path")
        if "seed" in DEFAULTS[name]:
            p.add_argument("--seed", type=int)
        if "backend" in DEFAULTS[name]:
            p.add_argument("--backend", choices=("classical", "surrogate"))
        if "weights" in DEFAULTS[name]:
            p.add_argument("--weights", help="weight file (initial weights for train)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        file_cfg = json.loads(args.config.read_text()) if args.config else {}
        flags = {k: getattr(args, k, None) for k in ("seed", "out", "backend", "weights")}
        cfg = resolve_config(args.command, file_cfg, flags)
        log.info("resolved config %s (sha256 %s)", json.dumps(cfg, sort_keys=True), fingerprint(cfg))
        report = COMMANDS[args.command](cfg)
    except (ConfigError, json.JSONDecodeError, ValueError, KeyError, OSError, RuntimeError) as exc:
        log.error("%s: %s", args.command, exc)
        return 2 if isinstance(exc, (ConfigError, json.JSONDecodeError)) else 1
    print(json.dumps(report, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
