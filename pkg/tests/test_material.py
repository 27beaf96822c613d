import json
import math

import numpy as np
import pytest

from support import central_tangent, drive, random_box_gradient, uniaxial, walk_to
from vevp import material as mat
from vevp import tensor3 as t3

P = mat.MaterialParams.table3()
DRY = mat.Environment(0.0, 0.0)


class TestParams:
    def test_bundled_values(self):
        assert P.mu_eq0 == 760.0 and P.mu_neq0 == 790.0 and P.k_v == 1154.0
        assert P.eps_dot_0 == 1.0447e12 and P.delta_H == 1.977e-19
        assert P.T == 296.0 and P.fp_tol == 1e-5 and P.fp_max_iter == 200
        assert P.perturb_alpha == 1e-4

    def test_bundled_document_matches_defaults(self):
        assert P == mat.MaterialParams()

    def test_activation_ratio(self):
        assert P.activation_ratio == pytest.approx(48.376, abs=1e-3)

    def test_round_trip(self, tmp_path):
        path = tmp_path / "p.json"
        q = P.with_overrides(T=310.0)
        q.save(path)
        assert mat.MaterialParams.load(path) == q
        assert json.loads(path.read_text())["T"] == 310.0

    def test_unknown_key_rejected(self):
        with pytest.raises(KeyError):
            mat.MaterialParams.from_dict({"mu_eq": 1.0})

    @pytest.mark.parametrize("field", ["mu_eq0", "k_v", "sigma_0", "m", "fp_tol"])
    def test_positivity(self, field):
        with pytest.raises(ValueError):
            P.with_overrides(**{field: 0.0})

    def test_negative_damage_rate_rejected(self):
        with pytest.raises(ValueError):
            P.with_overrides(A_dmg=-1.0)


class TestEnvironment:
    @pytest.mark.parametrize("w, v", [(-0.01, 0.0), (0.06, 0.0), (0.0, 0.31), (0.0, -0.1)])
    def test_bounds(self, w, v):
        with pytest.raises(ValueError):
            mat.Environment(w, v)


class TestAmplificationFactor:
    @pytest.mark.parametrize(
        "v, w, expected",
        [(0.0, 0.0, 1.0), (0.1, 0.0, 1.68), (0.0, 0.01, 0.905006), (0.1, 0.012, 1.488493)],
    )
    def test_frozen_values(self, v, w, expected):
        assert mat.amplification_factor(mat.Environment(w, v)) == pytest.approx(expected, abs=1e-6)

    def test_vectorised(self):
        env = mat.Environment(np.array([0.0, 0.012]), np.array([0.1, 0.0]))
        np.testing.assert_allclose(mat.amplification_factor(env), [1.68, 1 + 0.057 * 0.012**2 - 9.5 * 0.012])

    def test_non_positive_rejected(self):
        # 1 - 9.5 w turns negative only past w ~ 0.105, outside the Environment
        # bounds, so build the inadmissible case directly
        env = object.__new__(mat.Environment)
        object.__setattr__(env, "w_w", 0.2)
        object.__setattr__(env, "v_np", 0.0)
        with pytest.raises(ValueError):
            mat.amplification_factor(env)


class TestDecomposition:
    def test_identity(self):
        j, jw, jm, fiso = mat.decompose_deformation(np.eye(3), DRY, P)
        assert (j, jw, jm) == (1.0, 1.0, 1.0)
        np.testing.assert_allclose(fiso, np.eye(3), atol=1e-15)

    def test_moisture_swelling(self):
        _, jw, jm, _ = mat.decompose_deformation(np.eye(3), mat.Environment(0.01, 0.0), P)
        assert jw == pytest.approx(1.00039, abs=1e-15)
        assert jm == pytest.approx(0.9996101520407042, abs=1e-14)

    def test_uniaxial(self):
        f = np.diag([1.1, 1.0, 1.0])
        j, _, _, fiso = mat.decompose_deformation(f, DRY, P)
        assert j == pytest.approx(1.1)
        np.testing.assert_allclose(fiso, 1.1 ** (-1 / 3) * f, rtol=1e-14)
        assert abs(np.linalg.det(fiso) - 1) < 1e-12

    def test_rejects_inverted(self):
        with pytest.raises(ValueError):
            mat.decompose_deformation(np.diag([-1.0, 1.0, 1.0]), DRY, P)


class TestChainStretch:
    def test_identity(self):
        assert mat.chain_stretch(np.eye(3)) == 1.0

    def test_uniaxial(self):
        b = np.diag([1.21, 1 / 1.1, 1 / 1.1])
        assert mat.chain_stretch(b) == pytest.approx(1.004686, abs=1e-6)

    def test_shear(self):
        f = np.eye(3)
        f[0, 1] = 0.1
        assert mat.chain_stretch(f @ f.T) == pytest.approx(math.sqrt(3.01 / 3), abs=1e-15)
        assert mat.chain_stretch(f @ f.T) == pytest.approx(1.001665, abs=1e-6)

    def test_rejects_non_positive_trace(self):
        with pytest.raises(ValueError):
            mat.chain_stretch(np.zeros((3, 3)))


class TestAthermalYield:
    def test_midpoint(self):
        assert mat.athermal_yield_stress(P.x_0, P) == pytest.approx(50.885, abs=1e-12)

    def test_lower_asymptote(self):
        assert mat.athermal_yield_stress(-1e9, P) == 75.0

    def test_unit_stretch(self):
        assert mat.athermal_yield_stress(1.0, P) == pytest.approx(26.77063, abs=1e-5)

    def test_overflow_guarded(self):
        with np.errstate(over="raise"):
            assert mat.athermal_yield_stress(1e9, P) == pytest.approx(P.y_0 + P.a_s)


class TestViscousFlowRate:
    def test_at_yield(self):
        assert mat.viscous_flow_rate(30.0, 30.0, P) == pytest.approx(1.0447e12)

    def test_at_zero_stress(self):
        assert mat.viscous_flow_rate(0.0, 26.0, P) == pytest.approx(1.03e-9, rel=1e-2)

    def test_monotone(self):
        tau = np.linspace(0.0, 60.0, 200)
        assert np.all(np.diff(mat.viscous_flow_rate(tau, 26.77, P)) > 0)


class TestViscoplasticFlowRate:
    def test_below_threshold(self):
        assert mat.viscoplastic_flow_rate(5.0, 0.05, 0.02, 1e-4, P) == 0.0

    def test_active(self):
        assert mat.viscoplastic_flow_rate(10.0, 0.05, 0.02, 1e-4, P) == pytest.approx(7.36e-7, abs=1e-9)

    def test_zero_base(self):
        assert mat.viscoplastic_flow_rate(10.0, 0.02, 0.02, 1e-4, P) == 0.0

    def test_negative_base_is_zero_flow(self):
        assert mat.viscoplastic_flow_rate(10.0, 0.01, 0.02, 1e-4, P) == 0.0

    def test_unset_onset(self):
        assert mat.viscoplastic_flow_rate(10.0, 0.05, np.nan, 1e-4, P) == 0.0


class TestStress:
    def test_reference_is_stress_free(self):
        r = mat.stress(np.eye(3), np.eye(3), 1.0, 1.0, 0.0, DRY, P)
        for s in (r.sigma_eq, r.sigma_neq, r.sigma_vol, r.sigma_tot, r.sigma_tot_d):
            assert np.all(s == 0.0)

    def test_uniaxial_value(self):
        f = uniaxial(1.02)
        r = mat.stress(f, f, 1.0, 1.0, 0.0, DRY, P)
        assert r.sigma_tot[0, 0] == pytest.approx(62.01, abs=0.1)

    def test_volumetric(self):
        r = mat.stress(np.eye(3), np.eye(3), 1.001, 1.001, 0.0, DRY, P)
        np.testing.assert_allclose(r.sigma_vol, 1.1534 * np.eye(3), atol=1e-3)

    def test_damage_scaling(self):
        f = uniaxial(1.05)
        r = mat.stress(f, f, 1.0, 1.0, 0.5, DRY, P)
        np.testing.assert_array_equal(r.sigma_tot_d, 0.5 * r.sigma_tot)

    def test_sum_and_symmetry(self):
        rng = np.random.default_rng(4)
        fa, fb = (t3.IDENTITY + rng.normal(scale=0.05, size=(3, 3)) for _ in range(2))
        fa = fa / np.cbrt(np.linalg.det(fa))
        fb = fb / np.cbrt(np.linalg.det(fb))
        r = mat.stress(fa, fb, 1.01, 1.01, 0.2, mat.Environment(0.012, 0.1), P)
        np.testing.assert_allclose(r.sigma_tot, r.sigma_eq + r.sigma_neq + r.sigma_vol, atol=1e-13)
        for s in (r.sigma_eq, r.sigma_neq, r.sigma_vol, r.sigma_tot_d):
            assert np.array_equal(s, s.T)


class TestDamage:
    def test_no_growth_below_high_water_mark(self):
        assert mat.damage_update(0.3, 1.02, 1.01, P) == (0.3, 1.02)

    def test_closed_form(self):
        d, lam = mat.damage_update(0.0, 1.0, 1.001, P)
        assert d == pytest.approx(0.273851, abs=1e-6)
        assert lam == 1.001

    def test_stays_below_one(self):
        d, _ = mat.damage_update(0.999999, 1.0, 50.0, P)
        assert d < 1.0


class TestIntegrateStep:
    def test_identity_is_fixed_point(self):
        for dt in (0.05, 1.0, 5.0):
            st, r = mat.integrate_step(mat.MaterialState.virgin(), np.eye(3), dt, mat.Environment(0.012, 0.1), P)
            assert t3.fnorm(r.sigma_tot) <= 1e-10
            np.testing.assert_array_equal(st.F_v, np.eye(3))
            np.testing.assert_array_equal(st.F_vp, np.eye(3))
            assert st.d == 0.0 and st.lambda_max == 1.0 and np.isnan(st.eps_onset)

    def test_pure_volumetric(self):
        f = 1.001 ** (1 / 3) * np.eye(3)
        _, r = mat.integrate_step(mat.MaterialState.virgin(), f, 1.0, DRY, P)
        np.testing.assert_allclose(r.sigma_tot, 1.1534 * np.eye(3), atol=1e-3)
        np.testing.assert_allclose(r.sigma_eq, 0.0, atol=1e-12)
        np.testing.assert_allclose(r.sigma_neq, 0.0, atol=1e-12)

    def test_rejects_bad_input(self):
        with pytest.raises(ValueError):
            mat.integrate_step(mat.MaterialState.virgin(), np.eye(3), 0.0, DRY, P)
        with pytest.raises(ValueError):
            mat.integrate_step(mat.MaterialState.virgin(), np.diag([-1.0, 1, 1]), 1.0, DRY, P)

    def test_non_convergence_reported(self):
        q = P.with_overrides(fp_max_iter=1)
        with pytest.raises(mat.NonConvergenceError) as info:
            drive([uniaxial(1 + 0.001 * k) for k in range(1, 30)], 1.0, DRY, q)
        assert info.value.residual >= q.fp_tol

    def test_stress_relaxation(self):
        states, _ = drive([uniaxial(1 + 0.001 * k) for k in range(1, 31)], 1.0, DRY, P)
        _, results = drive([uniaxial(1.03)] * 50, 1.0, DRY, P, state=states[-1])
        norms = np.array([t3.fnorm(r.sigma_neq) for r in results])
        assert np.all(np.diff(norms) < 0)

    def test_onset_latched_once(self):
        states, results = drive([uniaxial(1 + 0.0005 * k) for k in range(1, 41)], 1.0, DRY, P)
        onset = np.array([s.eps_onset for s in states])
        first = np.argmax(np.isfinite(onset))
        tau = [t3.fnorm(t3.dev(r.sigma_tot)) for r in results]
        assert tau[first] >= P.sigma_0 and (first == 0 or tau[first - 1] < P.sigma_0)
        assert np.all(onset[first:] == onset[first])
        assert onset[first] == pytest.approx(t3.fnorm(t3.green_strain(uniaxial(1 + 0.0005 * (first + 1)))))

    def test_isochoric_internal_variables(self):
        rng = np.random.default_rng(11)
        path = []
        for _ in range(5):
            path += walk_to(random_box_gradient(rng), 200)
        states, _ = drive(path, 0.5, DRY, P)
        for s in states[::50] + states[-1:]:
            assert abs(np.linalg.det(s.F_v) - 1) <= 1e-6
            assert abs(np.linalg.det(s.F_vp) - 1) <= 1e-6

    def test_damage_monotone_along_cycle(self):
        strain = 0.03 * np.sin(np.linspace(0, 4 * np.pi, 201))[1:]
        states, _ = drive([uniaxial(1 + e) for e in strain], 0.5, DRY, P)
        d = np.array([s.d for s in states])
        assert np.all(np.diff(d) >= 0) and np.all(d < 1)

    def test_equilibrium_branch_objective(self):
        f = np.array([[1.05, 0.02, 0.01], [0.0, 0.97, 0.03], [0.02, 0.0, 1.01]])
        c, s = math.cos(0.8), math.sin(0.8)
        q = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        _, r = mat.integrate_step(mat.MaterialState.virgin(), f, 1.0, DRY, P)
        _, rq = mat.integrate_step(mat.MaterialState.virgin(), q @ f, 1.0, DRY, P)
        np.testing.assert_allclose(rq.sigma_eq, q @ r.sigma_eq @ q.T, atol=1e-8)

    def test_frozen_dashpot_is_hyperelastic(self):
        q = P.with_overrides(eps_dot_0=0.0, a_vp=0.0)
        f = np.array([[1.05, 0.02, 0.01], [0.0, 0.97, 0.03], [0.02, 0.0, 1.01]])
        env = mat.Environment(0.012, 0.1)
        st, r = mat.integrate_step(mat.MaterialState.virgin(), f, 1.0, env, q)
        j, _, jm, fiso = mat.decompose_deformation(mat.swollen_gradient(f, env, q), env, q)
        ref = mat.stress(fiso, fiso, jm, j, st.d, env, q)
        np.testing.assert_array_equal(r.sigma_tot_d, ref.sigma_tot_d)

    def test_batch_matches_single_points_bitwise(self):
        rng = np.random.default_rng(5)
        targets = np.stack([random_box_gradient(rng) for _ in range(6)])
        env = mat.Environment(np.array([0, 0.012, 0, 0.012, 0, 0]), np.array([0, 0, 0.1, 0.1, 0, 0.1]))
        batch = [np.eye(3) + (targets - np.eye(3)) * k / 40 for k in range(1, 41)]
        _, rb = drive(batch, 0.5, env, P)
        for i in (0, 3, 5):
            _, rs = drive([f[i] for f in batch], 0.5, env.take(i), P)
            np.testing.assert_array_equal(rs[-1].sigma_tot_d, rb[-1].sigma_tot_d[i])

    def test_rate_dependence(self):
        path = [uniaxial(1 + 1e-4 * k) for k in range(1, 201)]
        _, slow = drive(path, 10.0, DRY, P)
        _, fast = drive(path, 0.1, DRY, P)
        assert fast[-1].sigma_tot_d[0, 0] > slow[-1].sigma_tot_d[0, 0]


class TestTangent:
    def test_small_strain_limit(self):
        c = mat.tangent(mat.MaterialState.virgin(), np.eye(3), 1.0, DRY, P)
        assert c[0, 0] == pytest.approx(P.k_v + 4 / 3 * (P.mu_eq0 + P.mu_neq0), rel=1e-2)
        assert c[0, 0] == pytest.approx(3220.7, rel=1e-2)
        assert c[3, 3] == pytest.approx(1550.0, rel=1e-2)

    def test_matches_central_difference_oracle(self):
        rng = np.random.default_rng(21)
        for _ in range(3):
            path = walk_to(random_box_gradient(rng), 60)
            states, _ = drive(path[:-1], 0.5, DRY, P)
            c = mat.tangent(states[-1], path[-1], 0.5, DRY, P)
            ref = central_tangent(states[-1], path[-1], 0.5, DRY, P, P.perturb_alpha / 10)
            assert np.linalg.norm(c - ref) / np.linalg.norm(ref) <= 1e-3

    def test_alpha_halving(self):
        f = uniaxial(1.01)
        st, _ = drive([uniaxial(1 + 0.001 * k) for k in range(1, 10)], 1.0, DRY, P)
        c1 = mat.tangent(st[-1], f, 1.0, DRY, P)
        c2 = mat.tangent(st[-1], f, 1.0, DRY, P.with_overrides(perturb_alpha=P.perturb_alpha / 2))
        assert np.linalg.norm(c1 - c2) / np.linalg.norm(c1) < 5e-3

    def test_forward_scheme_is_first_order(self):
        # the one-sided quotient converges to the same tangent as alpha shrinks
        st, _ = drive([uniaxial(1 + 0.001 * k) for k in range(1, 10)], 1.0, DRY, P)
        f = uniaxial(1.01)
        ref = mat.tangent(st[-1], f, 1.0, DRY, P)
        errs = [
            np.linalg.norm(mat.tangent(st[-1], f, 1.0, DRY, P.with_overrides(perturb_alpha=a), "forward") - ref)
            for a in (1e-4, 1e-5)
        ]
        assert errs[1] < 0.2 * errs[0]

    def test_state_untouched(self):
        st, _ = drive([uniaxial(1.005)], 1.0, DRY, P)
        before = st[-1].copy()
        mat.tangent(st[-1], uniaxial(1.01), 1.0, DRY, P)
        for name in ("F", "F_v", "F_vp", "lambda_max", "d"):
            np.testing.assert_array_equal(getattr(before, name), getattr(st[-1], name))

    def test_unknown_scheme(self):
        with pytest.raises(ValueError):
            mat.tangent(mat.MaterialState.virgin(), np.eye(3), 1.0, DRY, P, scheme="backward")


class TestRunPath:
    def test_first_record_and_lengths(self):
        path = np.stack([np.eye(3)] + [uniaxial(1 + 0.001 * k) for k in range(1, 6)])
        results, states = mat.run_path(path, np.full(6, 1.0), DRY, P)
        assert len(results) == len(states) == 6
        assert np.all(results[0].sigma_tot == 0.0)
        _, direct = drive(list(path[1:]), 1.0, DRY, P)
        np.testing.assert_array_equal(results[-1].sigma_tot, direct[-1].sigma_tot)
