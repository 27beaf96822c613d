"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 7 and 9 share a session fixture that generates 2000 sequences and
trains the H = 32 surrogate; that fixture dominates the runtime.
"""

import math
import time

import numpy as np
import pytest

from support import box_count_deviation, central_tangent, drive, finite_difference_gradients, path_violations, random_box_gradient, uniaxial, walk_to
from vevp import cli
from vevp import fem
from vevp import material as mat
from vevp import pathgen as pg
from vevp import surrogate as sg
from vevp import tensor3 as t3

P = mat.MaterialParams.table3()
ENVIRONMENTS = [mat.Environment(w, v) for w in (0.0, 0.012) for v in (0.0, 0.1)]

SURROGATE_SEQUENCES = 2000
# material-point overlay and FE program: 1% amplitude at 5e-4 1/s, two cycles
CYCLE = {"amplitude": 0.01, "rate": 5e-4, "cycles": 2}


@pytest.fixture
def verdict(capsys):
    """Print ``criterion N <name>: PASS|FAIL (details)`` past the capture, then assert."""

    def emit(number, name, checks: dict, details: str, started: float):
        ok = all(checks.values())
        failed = [k for k, v in checks.items() if not v]
        line = f"criterion {number} {name}: {'PASS' if ok else 'FAIL'} ({details}; {time.perf_counter() - started:.1f} s)"
        if failed:
            line += f" failed checks: {', '.join(failed)}"
        with capsys.disabled():
            print("\n" + line)
        assert ok, line

    return emit


def uniaxial_cycle(amplitude, rate, dt, cycles=1):
    """F11-only triangular cycles as used by the material-point driver."""
    strain = cli.cyclic_history(amplitude, rate, cycles, dt)
    f = np.broadcast_to(np.eye(3), (len(strain), 3, 3)).copy()
    f[:, 0, 0] += strain
    return f, np.full(len(f), dt)


def loop_area(f, sigma):
    e = 0.5 * (f[:, 0, 0] ** 2 - 1.0)
    s = sigma[:, 0, 0]
    return float(np.sum(0.5 * (s[1:] + s[:-1]) * np.diff(e)))


@pytest.fixture(scope="session")
def trained(tmp_path_factory):
    """2000 labeled sequences and an H = 32 network trained on them."""
    start = time.perf_counter()
    seqs, _ = pg.generate_dataset(SURROGATE_SEQUENCES, pg.PathConfig(), P, seed=0)
    cfg = sg.TrainConfig(hidden=32)
    log = tmp_path_factory.mktemp("surrogate") / "loss.csv"
    net, history, (_, val_idx) = sg.fit(seqs, cfg, loss_log=log)
    return {
        "network": net,
        "history": history,
        "validation": [seqs[i] for i in val_idx],
        "seconds": time.perf_counter() - start,
    }


class TestAcceptance:
    def test_criterion_1_constitutive_correctness(self, verdict):
        start = time.perf_counter()
        checks = {}
        # stress-free reference in every environment
        ref = max(
            t3.fnorm(mat.integrate_step(mat.MaterialState.virgin(), np.eye(3), dt, env, P)[1].sigma_tot_d)
            for env in ENVIRONMENTS
            for dt in (0.05, 1.0, 5.0)
        )
        checks["reference"] = ref <= 1e-10
        # damage against the closed form on monotone paths from the virgin state
        damage_err = 0.0
        for target in (uniaxial(1.03), np.array([[1.02, 0.01, 0.0], [0.0, 0.99, 0.02], [0.0, 0.0, 1.01]])):
            path = walk_to(target, 30)
            states, _ = drive(path, 1.0, mat.Environment(0.012, 0.1), P)
            lam_max = 1.0
            for f, s in zip(path, states):
                b = f @ f.T / np.linalg.det(f) ** (2.0 / 3.0)
                lam_max = max(lam_max, math.sqrt(np.trace(b) / 3.0))
                damage_err = max(damage_err, abs(float(s.d) - (1.0 - math.exp(-P.A_dmg * (lam_max - 1.0)))))
        checks["damage"] = damage_err <= 1e-10
        # amplification factor against direct evaluation
        amp_err = 0.0
        for v in np.linspace(0.0, 0.3, 7):
            for w in np.linspace(0.0, 0.05, 6):
                direct = (1 + 5 * v + 18 * v * v) * (1 + 0.057 * w * w - 9.5 * w)
                amp_err = max(amp_err, abs(float(mat.amplification_factor(mat.Environment(w, v))) - direct))
        checks["amplification"] = amp_err <= 1e-12
        # sigmoid yield limits
        far = 50.0 * P.b_s
        tau = mat.athermal_yield_stress(np.array([P.x_0 - far, P.x_0, P.x_0 + far]), P)
        expected = np.array([P.y_0, P.y_0 + P.a_s / 2, P.y_0 + P.a_s])
        yield_err = float(np.max(np.abs(tau - expected)))
        checks["yield limits"] = yield_err <= 1e-9
        elapsed = time.perf_counter() - start
        checks["runtime < 1 s"] = elapsed < 1.0
        details = f"|sigma(I)| {ref:.1e}, damage {damage_err:.1e}, X {amp_err:.1e}, tau0 {yield_err:.1e}"
        verdict(1, "constitutive correctness", checks, details, start)

    def test_criterion_2_tangent_consistency(self, verdict):
        start = time.perf_counter()
        rng = np.random.default_rng(2024)
        dry = mat.Environment(0.0, 0.0)
        # all 20 points are driven as one batch to their random targets
        path = walk_to(np.stack([random_box_gradient(rng) for _ in range(20)]), 40)
        states, _ = drive(path[:-1], 0.5, dry, P)
        c = mat.integrate_with_tangent(states[-1], path[-1], 0.5, dry, P)[2]
        errors = []
        for i in range(20):
            ref = central_tangent(states[-1].take(i), path[-1][i], 0.5, dry, P, P.perturb_alpha / 10)
            errors.append(np.linalg.norm(c[i] - ref) / np.linalg.norm(ref))
        c0 = mat.integrate_with_tangent(mat.MaterialState.virgin(), np.eye(3), 1.0, dry, P)[2]
        checks = {
            "20 random states <= 1e-3": max(errors) <= 1e-3,
            "C1111 = 3220.7 within 1%": abs(c0[0, 0] / 3220.7 - 1) <= 0.01,
            "shear = 1550 within 1%": abs(c0[3, 3] / 1550.0 - 1) <= 0.01,
            "runtime < 10 s": time.perf_counter() - start < 10,
        }
        details = f"max rel err {max(errors):.2e}, C1111 {c0[0, 0]:.1f}, C1212 {c0[3, 3]:.1f} MPa"
        verdict(2, "tangent consistency", checks, details, start)

    def test_criterion_3_integrator_convergence_order(self, verdict):
        start = time.perf_counter()
        period, amplitude = 40.0, 0.002
        dry = mat.Environment(0.0, 0.0)

        def final_stress(n):
            dt = period / n
            path = [uniaxial(1 + amplitude * math.sin(2 * math.pi * k * dt / period)) for k in range(1, n + 1)]
            return drive(path, dt, dry, P)[1][-1].sigma_tot_d

        sigma = [final_stress(n) for n in (40, 80, 160, 320)]
        diffs = [np.linalg.norm(a - b) for a, b in zip(sigma, sigma[1:])]
        orders = [math.log2(a / b) for a, b in zip(diffs, diffs[1:])]
        checks = {
            "order in [0.8, 1.2]": 0.8 <= orders[-1] <= 1.2,
            "runtime < 30 s": time.perf_counter() - start < 30,
        }
        verdict(3, "integrator convergence order", checks, "observed orders " + ", ".join(f"{o:.3f}" for o in orders), start)

    def test_criterion_4_rate_dependence_and_hysteresis(self, verdict):
        start = time.perf_counter()
        peaks, areas = {}, []
        for env in ENVIRONMENTS:
            for rate, dt in ((1e-5, 10.0), (1e-3, 0.1)):
                f, dts = uniaxial_cycle(0.01, rate, dt)
                sigma = cli.drive_classical(f, dts, env, P)[1]
                peaks[(env.w_w, env.v_np, rate)] = float(sigma[:, 0, 0].max())
                areas.append(loop_area(f, sigma))
        faster = [peaks[(w, v, 1e-3)] > peaks[(w, v, 1e-5)] for (w, v, r) in peaks if r == 1e-5]
        checks = {
            "faster rate has larger peak": all(faster),
            "positive loop area": min(areas) > 0,
            "runtime < 30 s": time.perf_counter() - start < 30,
        }
        pairs = ", ".join(f"{peaks[(w, v, 1e-5)]:.2f}<{peaks[(w, v, 1e-3)]:.2f}" for (w, v, r) in peaks if r == 1e-5)
        verdict(4, "rate dependence and hysteresis", checks, f"peaks slow<fast {pairs}; min area {min(areas):.3e} MPa", start)

    def test_criterion_5_data_pipeline(self, verdict, tmp_path):
        start = time.perf_counter()
        cfg = pg.PathConfig()
        seqs, manifest = pg.generate_dataset(500, cfg, P, seed=11)
        pg.write_dataset(seqs, tmp_path / "d.jsonl", manifest)
        generation_seconds = time.perf_counter() - start
        stored = pg.read_dataset(tmp_path / "d.jsonl")
        problems = [p for s in stored for p in path_violations(s.F, s.dt_list)]
        first_rows = all(np.all(s.targets[0] == 0.0) for s in stored)
        relabeled = pg.label_paths([s.path() for s in stored], P)
        exact = all(np.array_equal(a.targets, b.targets) for a, b in zip(relabeled, stored))
        roundtrip = all(a == b for a, b in zip(seqs, stored))
        rng = np.random.default_rng(5)
        wins = 0
        for _ in range(100):
            offset = int(rng.integers(1, 100000))
            halton = pg.halton(range(offset, offset + 1024), 2)
            wins += box_count_deviation(halton) < box_count_deviation(rng.random((1024, 2)))
        checks = {
            "box, increment and rate bounds": not problems,
            "first target row zero": first_rows,
            "bit-exact relabeling": exact,
            "write/read roundtrip": roundtrip and len(stored) == len(seqs),
            "Halton wins >= 95/100": wins >= 95,
            "runtime < 2 min": time.perf_counter() - start < 120,
        }
        details = f"{len(stored)} sequences, {len(problems)} violations, Halton wins {wins}/100, generation {generation_seconds:.1f} s"
        verdict(5, "data pipeline", checks, details, start)

    def test_criterion_6_lstm_gradient_check(self, verdict):
        start = time.perf_counter()
        worst = 0.0
        ok = True
        for hidden, steps, batch in ((2, 3, 1), (5, 7, 2), (8, 10, 2)):
            p = sg.NetworkParams.initialize(hidden, seed=hidden)
            rng = np.random.default_rng(hidden)
            p = p.with_arrays({k: v + rng.normal(scale=0.1, size=v.shape) for k, v in p.arrays.items()})
            p.norm = sg.Normalization(rng.normal(size=9), rng.uniform(0.5, 2.0, size=9))
            p.target_norm = sg.Normalization(rng.normal(size=6), rng.uniform(0.5, 2.0, size=6))
            x = rng.normal(size=(batch, steps, 9))
            y = rng.normal(size=(batch, steps, 6))
            _, grads = sg.loss_and_gradients(x, y, p)
            work = {k: v.copy() for k, v in p.arrays.items()}
            fd = finite_difference_gradients(lambda a: sg.loss_and_gradients(x, y, p.with_arrays(a))[0], work)
            for name in sg.PARAM_NAMES:
                ok &= bool(np.allclose(grads[name], fd[name], rtol=1e-5, atol=1e-9))
                scale = np.maximum(np.abs(fd[name]), 1e-4)
                worst = max(worst, float(np.max(np.abs(grads[name] - fd[name]) / scale)))
        checks = {"all gradients within rtol 1e-5": ok, "runtime < 30 s": time.perf_counter() - start < 30}
        verdict(6, "LSTM gradient check", checks, f"H <= 8, T <= 10, worst scaled error {worst:.1e}", start)

    def test_criterion_7_surrogate_quality(self, verdict, trained):
        start = time.perf_counter()
        net = trained["network"]
        val = trained["validation"]
        std = np.concatenate([s.targets for s in val]).std(axis=0)
        ratio = sg.component_mae(val, net) / std
        worst_trace = 0.0
        for env in ENVIRONMENTS:
            f, dts = uniaxial_cycle(CYCLE["amplitude"], CYCLE["rate"], 0.1, cycles=CYCLE["cycles"])
            classical = cli.drive_classical(f, dts, env, P)[1]
            surrogate = cli.drive_surrogate(f, dts, env, net, P)[1]
            peak = np.abs(classical).max()
            worst_trace = max(worst_trace, float(np.abs(surrogate - classical).max() / peak))
        checks = {
            ">= 2000 sequences, H = 32": SURROGATE_SEQUENCES >= 2000 and net.hidden == 32,
            "val MAE <= 0.1 std per component": bool(np.all(ratio <= 0.1)),
            "uniaxial cyclic error <= 15% of peak": worst_trace <= 0.15,
        }
        details = (
            f"val MAE/std {np.array2string(ratio, precision=3)}, trace error {worst_trace:.3f} of peak, "
            f"training {trained['seconds']:.0f} s"
        )
        verdict(7, "desk-scale surrogate quality", checks, details, start)

    def test_criterion_8_efficiency_trend(self, verdict):
        start = time.perf_counter()
        cfg = cli.resolve_config("bench")
        f, dts = cli.bench_paths(cfg)["complex"]
        net = sg.NetworkParams.initialize(32, seed=0)
        timing = cli.time_backends(f, dts, mat.Environment(0.0, 0.0), P, net, repeats=5)
        iterations = timing["iterations"]
        classical = timing["classical"]
        active = np.flatnonzero(iterations > 1)
        onset = int(active[0]) if active.size else len(iterations)
        before = float(np.median(classical[:onset])) if onset else math.nan
        after = float(np.median(classical[onset:])) if onset < len(classical) else math.nan
        cv = cli.coefficient_of_variation(timing["surrogate"])
        checks = {
            "surrogate CV < 20%": cv < 0.2,
            "classical cost rises after dashpot activation": onset < len(classical) and after > before,
            "runtime < 2 min": time.perf_counter() - start < 120,
        }
        details = (
            f"surrogate CV {cv:.3f}; classical median {1e3 * before:.2f} ms before vs {1e3 * after:.2f} ms after "
            f"activation at step {onset + 1}; speedup {classical.sum() / timing['surrogate'].sum():.2f}x"
        )
        verdict(8, "efficiency trend", checks, details, start)

    def test_criterion_9_fe_suite(self, verdict, trained):
        start = time.perf_counter()
        dry = mat.Environment(0.0, 0.0)
        # patch test: prescribed homogeneous F on one element against the driver
        mesh = fem.box_mesh(1, 1, 1)
        model = fem.FeModel(mesh, fem.ClassicalBackend(P, dry, (1, 8)))
        f_end = np.array([[1.015, 0.008, -0.003], [0.004, 0.992, 0.006], [-0.002, 0.001, 1.004]])
        path = np.array([np.eye(3) + (f_end - np.eye(3)) * k / 10 for k in range(11)])
        results, _ = mat.run_path(path, np.full(11, 1.0), dry, P)
        patch = 0.0
        for k in range(1, 11):
            u = mesh.nodes @ (path[k] - np.eye(3)).T
            step = fem.newton_solve(model, {d: float(v) for d, v in enumerate(u.ravel())}, 1.0)
            patch = max(patch, float(np.abs(step.sigma - results[k].sigma_tot_d).max()))
        # 2x2x2 cyclic tension with both backends
        program = fem.LoadProgram.cyclic(CYCLE["amplitude"], CYCLE["cycles"], CYCLE["rate"], 0.2)
        curves = {}
        for name in ("classical", "surrogate"):
            mesh = fem.box_mesh(2, 2, 2)
            shape = (len(mesh.elements), 8)
            backend = fem.ClassicalBackend(P, dry, shape) if name == "classical" else fem.SurrogateBackend(trained["network"], P, dry, shape)
            curves[name] = fem.run_program(fem.uniaxial_box_model(mesh, backend), program)
        its = max(r["iterations"] for r in curves["classical"])
        force = {k: np.array([r["force"] for r in v]) for k, v in curves.items()}
        peak = np.abs(force["classical"]).max()
        mae = float(np.mean(np.abs(force["surrogate"] - force["classical"])))
        checks = {
            "patch test <= 1e-8 MPa": patch <= 1e-8,
            "Newton <= 25 iterations at 1e-4": its <= fem.NEWTON_MAX_ITER,
            "force MAE <= 15% of peak": mae <= 0.15 * peak,
            "runtime < 10 min": time.perf_counter() - start < 600,
        }
        details = f"patch {patch:.1e} MPa, max Newton iterations {its}, force MAE {mae:.3f} N = {mae / peak:.3f} of peak {peak:.2f} N"
        verdict(9, "FE suite", checks, details, start)
