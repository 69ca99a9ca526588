import numpy as np
import pytest
from scipy.special import erf

from solidfv.discretization import DirichletBC, FaceGradients, FaceGradientStencil
from solidfv.meshgen import box_mesh
from solidfv.solidify import (FACE_BLOCKED, FACE_NORMAL, FACE_SMEARED,
                              ActiveMap, MaterialModel, SolidifyError, Solver,
                              classify_cells, drag_coefficient, permeability,
                              reduce_momentum_system, smear_gradient_stencil,
                              solid_fraction)


def wide_alloy(**kw):
    """Alloy with a wide freezing interval and a long Scheil tail."""
    args = dict(rho=2500.0, mu=1.3e-3, cp=900.0, k_temps=(300.0,),
                k_values=(150.0,), latent_heat=4e5, beta=1e-4,
                k_partition=0.13, t_fusion=933.0, t_liq=866.0,
                t_sol=811.0, dendrite_spacing=1e-5, t_eps=2.0, t_ref=900.0)
    args.update(kw)
    return MaterialModel(**args)


def narrow_alloy(**kw):
    """Alloy whose latent release concentrates in the solidus smear, so
    the source slope stays away from zero wherever it operates."""
    args = dict(rho=2500.0, mu=1.3e-3, cp=900.0, k_temps=(300.0,),
                k_values=(160.0,), latent_heat=4e5, beta=1e-4,
                k_partition=0.5, t_fusion=1401.0, t_liq=901.0,
                t_sol=895.0, dendrite_spacing=1e-5, t_eps=2.5, t_ref=900.0)
    args.update(kw)
    return MaterialModel(**args)


class TestMaterialModel:
    def test_rejects_bad_parameters(self):
        good = dict(rho=2500.0, mu=1.3e-3, cp=900.0, k_temps=(300.0,),
                    k_values=(150.0,), latent_heat=4e5, beta=1e-4,
                    k_partition=0.13, t_fusion=933.0, t_liq=866.0,
                    t_sol=811.0, dendrite_spacing=1e-5)
        bad = [dict(rho=0.0), dict(cp=-1.0), dict(latent_heat=0.0),
               dict(k_partition=0.0), dict(k_partition=1.0),
               dict(k_partition=1.5), dict(t_sol=870.0),
               dict(t_liq=940.0), dict(t_eps=0.0), dict(t_eps=60.0),
               dict(dendrite_spacing=0.0), dict(k_values=(1.0, 2.0)),
               dict(k_temps=(400.0, 300.0), k_values=(1.0, 2.0))]
        for kw in bad:
            with pytest.raises(SolidifyError):
                MaterialModel(**{**good, **kw})

    def test_conductivity_table(self):
        mat = wide_alloy(k_temps=(300.0, 400.0), k_values=(100.0, 200.0))
        assert mat.conductivity(350.0) == pytest.approx(150.0)
        assert mat.conductivity(250.0) == pytest.approx(100.0)
        assert mat.conductivity(500.0) == pytest.approx(200.0)
        assert wide_alloy().conductivity(1234.0) == pytest.approx(150.0)

    def test_solver_rejects_bad_arguments(self):
        m = box_mesh(2, 1, 1)
        with pytest.raises(SolidifyError, match="dt"):
            Solver(m, wide_alloy(), dt=0.0)
        with pytest.raises(SolidifyError, match="momentum_bc"):
            Solver(m, wide_alloy(), dt=0.1, momentum_bc="free")


class TestSolidFraction:
    def test_liquid_is_zero(self):
        mat = wide_alloy()
        fs, dfs = solid_fraction(np.array([866.0, 900.0, 1200.0]), mat)
        assert np.all(fs == 0.0)
        assert np.all(dfs == 0.0)

    def test_scheil_branch_value(self):
        mat = wide_alloy(t_sol=780.0)
        fs, dfs = solid_fraction(800.0, mat)
        assert fs == pytest.approx(0.5452970496873883, rel=1e-13)
        assert dfs == pytest.approx(-0.003929677212968728, rel=1e-12)

    def test_smear_is_linear_and_continuous(self):
        mat = narrow_alloy()
        hi = mat.t_sol + mat.t_eps
        lo = mat.t_sol - mat.t_eps
        fs_hi, dfs_hi = solid_fraction(hi, mat)
        fs_above, _ = solid_fraction(hi + 1e-9, mat)
        assert fs_hi == pytest.approx(fs_above, abs=1e-9)
        fs_lo, _ = solid_fraction(lo, mat)
        assert fs_lo == pytest.approx(1.0, abs=1e-12)
        fs_mid, dfs_mid = solid_fraction(mat.t_sol, mat)
        assert fs_mid == pytest.approx(0.5 * (1.0 + fs_hi), rel=1e-12)
        assert dfs_mid == pytest.approx(dfs_hi, rel=1e-12)
        assert dfs_mid == pytest.approx(-(1.0 - fs_hi) / (2.0 * mat.t_eps),
                                        rel=1e-12)

    def test_solid_below_smear(self):
        mat = wide_alloy()
        fs, dfs = solid_fraction(mat.t_sol - mat.t_eps - 0.01, mat)
        assert fs == 1.0
        assert dfs == 0.0

    def test_derivative_matches_finite_difference(self):
        mat = wide_alloy()
        T = np.concatenate([np.linspace(815.0, 864.0, 40),
                            np.linspace(809.5, 812.5, 20)])
        h = 1e-4
        _, dfs = solid_fraction(T, mat)
        fp, _ = solid_fraction(T + h, mat)
        fm, _ = solid_fraction(T - h, mat)
        fd = (fp - fm) / (2.0 * h)
        kink = np.minimum(np.abs(T - (mat.t_sol + mat.t_eps)),
                          np.abs(T - (mat.t_sol - mat.t_eps))) < 2 * h
        assert np.abs(dfs[~kink] - fd[~kink]).max() < 1e-6

    def test_monotone_and_source_slope_sign(self):
        mat = wide_alloy()
        T = np.linspace(700.0, 900.0, 4001)
        fs, dfs = solid_fraction(T, mat)
        assert np.all(np.diff(fs) <= 1e-15)
        assert np.all(dfs <= 0.0)
        assert np.all((fs >= 0.0) & (fs <= 1.0))

    def test_scalar_in_scalar_out(self):
        fs, dfs = solid_fraction(850.0, wide_alloy())
        assert isinstance(fs, float) and isinstance(dfs, float)


class TestPermeabilityAndDrag:
    def test_blake_kozeny_value(self):
        assert permeability(0.5, 1e-5) == pytest.approx(1e-10 / 360.0,
                                                        rel=1e-12)

    def test_free_liquid(self):
        assert permeability(0.0, 1e-5) == np.inf
        assert drag_coefficient(0.0, wide_alloy(), 0.05) == 0.0

    def test_drag_is_mu_over_permeability(self):
        mat = wide_alloy()
        K = permeability(0.5, mat.dendrite_spacing)
        assert drag_coefficient(0.5, mat, 0.05) == pytest.approx(mat.mu / K,
                                                                 rel=1e-12)

    def test_drag_cap(self):
        mat = wide_alloy()
        cap = 1e12 * mat.rho / 0.05
        assert drag_coefficient(1.0, mat, 0.05) == cap
        assert drag_coefficient(1.0 - 1e-7, mat, 0.05) == cap


class TestSmearStencil:
    def _stencil(self, n):
        row = np.arange(1.0, n + 1.0)
        return FaceGradientStencil(0, np.arange(n), np.tile(row, (3, 1)), 1.0)

    def test_redistributes_dropped_coefficients(self):
        st = self._stencil(7)
        solid = np.zeros(7, bool)
        solid[[0, 1]] = True
        out = smear_gradient_stencil(st, solid)
        assert np.array_equal(out.cells, np.arange(2, 7))
        expect = np.array([3.6, 4.6, 5.6, 6.6, 7.6])
        assert np.allclose(out.coeffs, np.tile(expect, (3, 1)))
        # constant fields still see a zero gradient if they did before
        assert np.allclose(out.coeffs.sum(axis=1), st.coeffs.sum(axis=1))

    def test_no_solid_returns_same_stencil(self):
        st = self._stencil(4)
        assert smear_gradient_stencil(st, np.zeros(4, bool)) is st

    def test_all_solid_raises(self):
        st = self._stencil(3)
        with pytest.raises(SolidifyError, match="solid"):
            smear_gradient_stencil(st, np.ones(3, bool))


def _face_between(m, a, b):
    for f in m.interior_faces():
        pair = {int(m.face_owner[f]), int(m.face_neighbor[f])}
        if pair == {a, b}:
            return int(f)
    raise AssertionError(f"no face between {a} and {b}")


class TestClassify:
    def test_bar_split(self):
        mat = wide_alloy()
        m = box_mesh(6, 1, 1, (0.006, 0.001, 0.001))
        order = np.argsort(m.cell_centroid[:, 0])
        T = np.full(6, 900.0)
        T[order[:3]] = 700.0
        amap = classify_cells(T, mat, m, FaceGradients(m))
        assert np.array_equal(amap.solid, T < mat.t_sol - mat.t_eps)
        assert np.array_equal(np.sort(amap.active_cells), np.sort(order[3:]))
        assert np.all(amap.reduced_index[order[:3]] == -1)
        assert amap.n_active == 3
        # one cell thick: faces of liquid cells share no vertex with the
        # solid block, so nothing is smeared here
        a, b, c, d = (int(v) for v in order[2:6])
        assert amap.face_case[_face_between(m, a, b)] == FACE_BLOCKED
        assert amap.face_case[_face_between(m, b, c)] == FACE_NORMAL
        assert amap.face_case[_face_between(m, c, d)] == FACE_NORMAL
        assert amap.face_case[_face_between(m, *order[:2])] == FACE_BLOCKED
        assert amap.smeared == {}

    def test_corner_pattern(self):
        mat = wide_alloy()
        m = box_mesh(3, 3, 1, (0.003, 0.003, 0.001))
        cx = m.cell_centroid
        corner = int(np.argmin(cx[:, 0] + cx[:, 1]))
        T = np.full(9, 900.0)
        T[corner] = 700.0
        amap = classify_cells(T, mat, m, FaceGradients(m))

        def cell_at(i, j):
            d = np.hypot(cx[:, 0] - (i + 0.5) * 1e-3,
                         cx[:, 1] - (j + 0.5) * 1e-3)
            return int(np.argmin(d))

        blocked = {_face_between(m, corner, cell_at(1, 0)),
                   _face_between(m, corner, cell_at(0, 1))}
        smeared = {_face_between(m, cell_at(1, 0), cell_at(1, 1)),
                   _face_between(m, cell_at(0, 1), cell_at(1, 1))}
        for f in m.interior_faces():
            f = int(f)
            want = (FACE_BLOCKED if f in blocked
                    else FACE_SMEARED if f in smeared else FACE_NORMAL)
            assert amap.face_case[f] == want
        for f in smeared:
            st = amap.smeared[f]
            assert corner not in st.cells

    def test_identical_pattern_same_key(self):
        mat = wide_alloy()
        m = box_mesh(4, 1, 1)
        a = classify_cells(np.array([700.0, 900, 900, 900]), mat, m)
        b = classify_cells(np.array([705.0, 880, 870, 912]), mat, m)
        assert a.key == b.key


class TestReduceMomentum:
    def test_drops_solid_rows_and_columns(self):
        import scipy.sparse as sp
        A = sp.csr_matrix(np.arange(16.0).reshape(4, 4) + np.eye(4))
        b = np.arange(4.0)
        solid = np.array([False, True, False, True])
        act = np.array([0, 2])
        red = np.array([0, -1, 1, -1])
        amap = ActiveMap(solid, act, red, np.zeros(0, np.int8), {}, b"")
        Ar, br = reduce_momentum_system(A, b, amap)
        assert np.allclose(Ar.toarray(), A.toarray()[np.ix_(act, act)])
        assert np.array_equal(br, b[act])

    def test_all_active_is_identity(self):
        import scipy.sparse as sp
        A = sp.eye(3, format="csr")
        b = np.ones(3)
        amap = ActiveMap(np.zeros(3, bool), np.arange(3), np.arange(3),
                         np.zeros(0, np.int8), {}, b"")
        Ar, br = reduce_momentum_system(A, b, amap)
        assert Ar is A and br is b


class TestFlow:
    def test_single_cell_buoyant_rise(self):
        mat = wide_alloy(t_sol=780.0)
        m = box_mesh(1, 1, 1, (0.01, 0.01, 0.01))
        s = Solver(m, mat, dt=0.01, momentum_bc="slip")
        st = s.initial_state(910.0)
        ustar = s.predictor_step(st, s.classify(st))
        expect = 9.81 * mat.beta * (910.0 - mat.t_ref) * 0.01
        assert ustar[0, 2] == pytest.approx(expect, rel=1e-10)
        assert np.abs(ustar[0, :2]).max() < 1e-18

    def test_buoyant_cavity_stays_divergence_free(self):
        mat = wide_alloy(t_sol=780.0)
        m = box_mesh(8, 8, 8, (0.02, 0.02, 0.02))
        hot, cold = m.patches["xmin"], m.patches["xmax"]

        def bc(t0, t1):
            faces = np.concatenate([hot, cold])
            vals = np.concatenate([np.full(len(hot), 905.0),
                                   np.full(len(cold), 895.0)])
            return DirichletBC(faces, vals, vals)

        s = Solver(m, mat, dt=0.05, thermal_bc=bc)
        st = s.initial_state(900.0)
        for _ in range(100):
            s.advance(st)
        assert max(s.stats["div_ratio"]) < 1e-8
        assert np.abs(st.u).max() > 1e-3
        # no latent source engages above liquidus: one sweep must do
        assert max(s.stats["energy_iters"]) == 1

    def test_zero_gravity_uniform_liquid_is_quiescent(self):
        mat = wide_alloy(gravity=(0.0, 0.0, 0.0))
        m = box_mesh(4, 4, 1, (0.004, 0.004, 0.001))
        s = Solver(m, mat, dt=0.05)
        st = s.initial_state(900.0)
        for _ in range(3):
            s.advance(st)
        assert np.abs(st.u).max() == 0.0
        assert np.abs(st.T - 900.0).max() < 1e-9


class TestMushSuppression:
    def test_velocity_scale_separation(self):
        mat = wide_alloy(t_ref=810.0)
        m = box_mesh(12, 4, 4, (0.012, 0.004, 0.004))
        x = m.cell_centroid[:, 0]
        T0 = np.where(x < 0.006, 806.0, 809.05)
        liq = x >= 0.007
        T0[liq] = 868.0 + (x[liq] - 0.007) / 0.005 * 12.0
        s = Solver(m, mat, dt=0.01)
        st = s.initial_state(T0)
        checked = 0
        for _ in range(3):
            fs_pre = st.fs.copy()
            s.advance(st)
            umag = np.linalg.norm(st.u, axis=1)
            assert umag[st.solid_tags].max() == 0.0
            mush99 = (fs_pre > 0.99) & ~st.solid_tags
            liquid = fs_pre == 0.0
            if mush99.any():
                checked += 1
                assert umag[liquid].max() > 1e-5
                ratio = umag[mush99].max() / umag[liquid].max()
                assert ratio < 1e-10
        assert checked >= 1


class TestEnergy:
    def test_insulated_bar_conserves_enthalpy(self):
        mat = wide_alloy()
        m = box_mesh(20, 1, 1, (0.02, 0.002, 0.002))
        T0 = 845.0 + 50.0 * m.cell_centroid[:, 0] / 0.02
        s = Solver(m, mat, dt=0.05, convection=False,
                   energy_tol=1e-10, max_outer=60)
        st = s.initial_state(T0)
        vol = m.cell_volume

        def enthalpy(state):
            return float(np.sum(mat.rho * vol * (mat.cp * state.T
                                                 - mat.latent_heat * state.fs)))

        scale = float(np.sum(mat.rho * vol * mat.cp * np.abs(st.T)))
        e_prev = enthalpy(st)
        worst = 0.0
        for _ in range(200):
            s.advance(st)
            e_now = enthalpy(st)
            worst = max(worst, abs(e_now - e_prev) / scale)
            e_prev = e_now
        assert worst < 1e-8
        # the latent source really engaged somewhere along the run
        assert max(s.stats["energy_iters"]) in range(2, 11)
        assert st.fs.max() > 0.03

    def test_outer_loop_failure_raises(self):
        mat = wide_alloy()
        m = box_mesh(20, 1, 1, (0.02, 0.002, 0.002))
        T0 = 845.0 + 50.0 * m.cell_centroid[:, 0] / 0.02
        s = Solver(m, mat, dt=0.05, convection=False,
                   energy_tol=1e-10, max_outer=1)
        st = s.initial_state(T0)
        with pytest.raises(SolidifyError, match="outer loop"):
            s.advance(st)

    def test_initial_state_defaults(self):
        mat = wide_alloy(t_ref=None)
        m = box_mesh(3, 1, 1)
        s = Solver(m, mat, dt=0.1)
        T0 = np.array([850.0, 900.0, 870.0])
        st = s.initial_state(T0)
        assert mat.t_ref == 900.0
        fs_ref, _ = solid_fraction(T0, mat)
        assert np.allclose(st.fs, fs_ref)
        assert s.t_liq_cross[0] == 0.0 and np.isnan(s.t_liq_cross[1])

    def test_run_takes_requested_steps(self):
        mat = wide_alloy()
        m = box_mesh(4, 1, 1)
        s = Solver(m, mat, dt=0.5, convection=False)
        st = s.initial_state(900.0)
        s.run(st, 5.0)
        assert st.step == 10
        assert st.time == pytest.approx(5.0)


class TestDirectionalFreezing:
    def _setup(self):
        mat = narrow_alloy()
        L, n = 0.08, 80
        m = box_mesh(n, 1, 1, (L, 0.004, 0.004))
        wall = m.patches["xmin"]
        x = m.cell_centroid[:, 0]
        T_wall = 500.0
        T0 = mat.t_sol + mat.t_eps - 0.1
        top = mat.t_sol + mat.t_eps
        fs_top, _ = solid_fraction(top, mat)
        T_half = top - 2 * mat.t_eps * (0.5 - fs_top) / (1.0 - fs_top)
        alpha = mat.conductivity(800.0) / (mat.rho * mat.cp)
        fs0, _ = solid_fraction(T0, mat)
        stefan = mat.cp * (T_half - T_wall) / ((1.0 - fs0) * mat.latent_heat)
        from scipy.optimize import brentq
        zeta = brentq(lambda z: z * np.exp(z * z) * erf(z)
                      - stefan / np.sqrt(np.pi), 1e-6, 3.0)
        return mat, m, wall, x, T_wall, T0, T_half, alpha, zeta, L

    def test_front_follows_similarity_solution(self):
        mat, m, wall, x, T_wall, T0, T_half, alpha, zeta, L = self._setup()
        t_final = (L / (2 * zeta)) ** 2 / alpha
        t_start, t_stop = 1.0, 0.85 * t_final
        prof = T_wall + (T_half - T_wall) * erf(
            x / (2 * np.sqrt(alpha * t_start))) / erf(zeta)
        s = Solver(m, mat, dt=0.05, convection=False,
                   thermal_bc=lambda a, b: DirichletBC.uniform(wall, T_wall))
        st = s.initial_state(np.minimum(prof, T0))
        st.time = t_start
        rows = []
        while st.time < t_stop:
            s.advance(st)
            fs = st.fs
            if fs[0] > 0.5 and fs[-1] < 0.5:
                i = int(np.argmax(fs < 0.5))
                rows.append((st.time, np.interp(0.5, [fs[i], fs[i - 1]],
                                                [x[i], x[i - 1]])))
        rows = np.array(rows)
        lo = t_start + 0.2 * (t_stop - t_start)
        hi = t_start + 0.8 * (t_stop - t_start)
        msk = (rows[:, 0] > lo) & (rows[:, 0] < hi)
        exact = 2 * zeta * np.sqrt(alpha * rows[msk, 0])
        rel = np.abs(rows[msk, 1] - exact) / exact
        assert rel.max() < 0.05
        assert rel.mean() < 0.02
        assert max(s.stats["energy_iters"]) <= 10


class TestActiveSetGrowth:
    def test_solid_set_never_shrinks_under_cooling(self):
        mat = narrow_alloy()
        m = box_mesh(30, 1, 1, (0.03, 0.002, 0.002))
        wall = m.patches["xmin"]
        s = Solver(m, mat, dt=0.05, convection=False,
                   thermal_bc=lambda a, b: DirichletBC.uniform(wall, 500.0))
        st = s.initial_state(897.4)
        prev = np.zeros(m.n_cells, bool)
        for _ in range(400):
            s.advance(st)
            cur = st.solid_tags
            assert not (prev & ~cur).any()
            prev = cur.copy()
        assert prev.sum() == 30
        order = np.argsort(m.cell_centroid[:, 0])
        cross = s.t_sol_cross[order]
        assert np.all(np.isfinite(cross))
        assert np.all(np.diff(cross) > 0)
