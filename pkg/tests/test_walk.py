import math

import numpy as np
import pytest

from rcmwalk import (
    BoxGeometry,
    Environment,
    STRONG_LABEL,
    TrajectoryRecord,
    ValidationError,
    effective_conductance_matrix,
    effective_conductances,
    empirical_heat_kernel_hat,
    ensemble_walk,
    homogeneous_environment,
    next_point_frequencies,
    simulate_ctmc,
    step_distribution,
    strong_cluster,
    time_changed_trajectory,
    transition_matrix,
)


def _env_with_bonds(d, N, default, overrides):
    geom = BoxGeometry(d, N)
    omega = np.full(geom.n_bonds, default)
    for (u, v), w in overrides.items():
        lo, hi = min(u, v), max(u, v)
        axis = int(np.where(geom.strides == hi - lo)[0][0])
        omega[geom.bond_id_table[lo, axis]] = w
    return Environment(geometry=geom, gamma=math.inf, seed=0, omega=omega)


class TestStepDistribution:
    def test_homogeneous_interior(self, homog_env):
        nb, pr = step_distribution(homog_env, homog_env.geometry.origin)
        assert len(nb) == 4
        assert np.allclose(pr, 0.25)

    def test_two_conductance_corner(self):
        geom = BoxGeometry(2, 1)
        corner = geom.site_index([-1, -1])
        up = geom.site_index([-1, 0])
        right = geom.site_index([0, -1])
        env = _env_with_bonds(2, 1, 0.5, {(corner, up): 0.2, (corner, right): 0.8})
        nb, pr = step_distribution(env, corner)
        table = dict(zip(nb.tolist(), pr.tolist()))
        assert table[up] == pytest.approx(0.2)
        assert table[right] == pytest.approx(0.8)

    def test_normalization(self, small_env):
        rng = np.random.default_rng(1)
        for x in rng.integers(0, small_env.geometry.n_sites, 30):
            _, pr = step_distribution(small_env, int(x))
            assert abs(pr.sum() - 1.0) <= 4 * np.finfo(float).eps

    def test_outside_box(self, small_env):
        with pytest.raises(ValidationError):
            step_distribution(small_env, -1)


class TestDetailedBalance:
    def test_pi_p_symmetric(self, small_env):
        geom = small_env.geometry
        pi = small_env.pi_all
        w = small_env.omega
        left = pi[geom.bond_u] * (w / pi[geom.bond_u])
        right = pi[geom.bond_v] * (w / pi[geom.bond_v])
        np.testing.assert_allclose(left, w, rtol=1e-14)
        np.testing.assert_allclose(right, w, rtol=1e-14)

    def test_transition_matrix_killed_rows(self, small_env):
        chain = transition_matrix(small_env, 5)
        rows = np.asarray(chain.P.sum(axis=1)).ravel()
        assert np.all(rows <= 1.0 + 1e-12)
        interior = small_env.geometry.linf_norm[chain.sites] < 5
        np.testing.assert_allclose(rows[interior], 1.0, atol=1e-12)
        assert np.any(rows < 1.0 - 1e-6)  # rim leaks

    def test_free_chain_stochastic(self, small_env):
        chain = transition_matrix(small_env, killed=False)
        rows = np.asarray(chain.P.sum(axis=1)).ravel()
        np.testing.assert_allclose(rows, 1.0, atol=1e-12)

    def test_killed_radius_validation(self, small_env):
        with pytest.raises(ValidationError):
            transition_matrix(small_env, small_env.geometry.N)


class TestSimulateCtmc:
    def test_poisson_clock_rate(self, homog_env, rng):
        t = 12.0
        res = ensemble_walk(homog_env, homog_env.geometry.origin, 10_000, t, rng, kill_radius=None)
        mean = res.n_jumps.mean()
        sd_mean = math.sqrt(t / 10_000)
        assert abs(mean - t) <= 4 * sd_mean

    def test_full_box_additive_functional(self, homog_env, rng):
        dec = strong_cluster(homog_env, 0.5)
        for _ in range(5):
            traj = simulate_ctmc(homog_env, homog_env.geometry.origin, 7.0, rng, decomp=dec, kill_radius=None)
            assert traj.A_hat(traj.end_time) == pytest.approx(traj.end_time, abs=1e-12)

    def test_zero_horizon(self, small_env, rng):
        traj = simulate_ctmc(small_env, small_env.geometry.origin, 0.0, rng)
        assert traj.n_jumps == 0
        assert np.array_equal(traj.sites, [small_env.geometry.origin])
        assert traj.A_hat(0.0) == 0.0

    def test_additive_functional_bounds(self, small_env, holey_decomp, rng):
        start = int(np.flatnonzero(holey_decomp.in_cluster)[0])
        traj = simulate_ctmc(small_env, start, 30.0, rng, decomp=holey_decomp, kill_radius=None)
        ts = np.linspace(0, traj.end_time, 40)
        a = traj.A_hat(ts)
        assert np.all(a <= ts + 1e-12)
        assert np.all(np.diff(a) >= -1e-12)
        assert np.all(np.diff(a) <= np.diff(ts) + 1e-12)

    def test_nearest_neighbor_steps(self, small_env, rng):
        traj = simulate_ctmc(small_env, small_env.geometry.origin, 20.0, rng)
        coords = small_env.geometry.all_coords[traj.sites]
        assert np.all(np.abs(np.diff(coords, axis=0)).sum(axis=1) == 1)

    def test_killing_records_exit(self, small_env, rng):
        # tiny kill radius: exits happen fast and land just outside
        geom = small_env.geometry
        traj = simulate_ctmc(small_env, geom.origin, 500.0, rng, kill_radius=2)
        assert math.isfinite(traj.tau_N)
        assert geom.linf_norm[traj.sites[-1]] == 3
        assert np.all(geom.linf_norm[traj.sites[:-1]] <= 2)
        assert traj.end_time == traj.tau_N


class TestTimeChange:
    def test_identity_on_cluster_paths(self, homog_env, rng):
        dec = strong_cluster(homog_env, 0.5)
        traj = simulate_ctmc(homog_env, homog_env.geometry.origin, 9.0, rng, decomp=dec, kill_radius=None)
        hat = time_changed_trajectory(traj, dec)
        assert np.array_equal(hat.sites, traj.sites)
        np.testing.assert_allclose(hat.increments, traj.increments, rtol=1e-15)
        assert hat.horizon == pytest.approx(traj.horizon, abs=1e-12)

    def test_hand_built_excursion(self):
        # three segments: cluster (1.5), hole (0.7), cluster (2.3); the time
        # change removes exactly the hole duration
        geom = BoxGeometry(2, 1)
        a = geom.site_index([0, 0])
        h = geom.site_index([0, 1])
        b = geom.site_index([1, 1])
        env = _env_with_bonds(2, 1, 0.9, {})
        labels = np.full(geom.n_sites, STRONG_LABEL)
        labels[h] = 0
        from rcmwalk.percolation import ClusterDecomposition, Hole

        dec = ClusterDecomposition(
            env=env,
            threshold=0.5,
            labels=labels,
            holes=[Hole(sites=np.array([h]), boundary=np.array(sorted([a, b])), anchor=min(a, b))],
        )
        traj = TrajectoryRecord(
            start=a,
            sites=np.array([a, h, b]),
            increments=np.array([1.5, 0.7]),
            horizon=4.5,
            tau_N=math.inf,
            phi_sites=np.array([1.0, 0.0, 1.0]),
            A_at_jumps=np.array([0.0, 1.5, 1.5]),
        )
        hat = time_changed_trajectory(traj, dec)
        assert np.array_equal(hat.sites, [a, b])
        assert hat.horizon == pytest.approx(4.5 - 0.7)
        assert hat.increments[0] == pytest.approx(1.5)

    def test_idempotence(self, small_env, holey_decomp, rng):
        start = int(np.flatnonzero(holey_decomp.in_cluster)[0])
        traj = simulate_ctmc(small_env, start, 25.0, rng, decomp=holey_decomp, kill_radius=None)
        hat = time_changed_trajectory(traj, holey_decomp)
        assert np.all(holey_decomp.in_cluster[hat.sites])
        # the additive functional of the output is its own clock
        again = time_changed_trajectory(hat, holey_decomp)
        assert again.horizon == pytest.approx(hat.horizon, abs=1e-12)
        assert hat.A_hat(hat.end_time) == pytest.approx(hat.end_time, abs=1e-12)

    def test_start_in_hole_rejected(self, small_env, holey_decomp, rng):
        hole_site = int(holey_decomp.holes[0].sites[0])
        traj = simulate_ctmc(small_env, hole_site, 5.0, rng, kill_radius=None)
        with pytest.raises(ValidationError):
            time_changed_trajectory(traj, holey_decomp)


class TestEffectiveConductances:
    def test_no_adjacent_hole(self, small_env, holey_decomp):
        # a site all of whose neighbors are on the cluster: table equals omega
        geom = small_env.geometry
        for x in np.flatnonzero(holey_decomp.in_cluster):
            nbs = geom.neighbor_table[int(x)]
            nbs = nbs[nbs >= 0]
            if np.all(holey_decomp.in_cluster[nbs]):
                ec = effective_conductances(small_env, holey_decomp, int(x))
                assert set(ec.sites.tolist()) == set(nbs.tolist())
                for y in nbs:
                    assert ec.weight(int(y)) == pytest.approx(
                        small_env.bond_conductance(int(x), int(y)), rel=1e-15
                    )
                break
        else:
            pytest.skip("no fully-surrounded site in fixture")

    def test_strong_bond_lower_bound(self, small_env, holey_decomp):
        geom = small_env.geometry
        xi = holey_decomp.threshold
        in_c = holey_decomp.in_cluster
        checked = 0
        for k in range(geom.n_bonds):
            u, v = int(geom.bond_u[k]), int(geom.bond_v[k])
            if small_env.omega[k] >= xi and in_c[u] and in_c[v]:
                ec = effective_conductances(small_env, holey_decomp, u)
                assert ec.weight(v) >= xi - 1e-12
                checked += 1
                if checked > 40:
                    break
        assert checked > 0

    def test_single_site_hole_closed_form(self):
        # center of a 5x5 box isolated by weak bonds; from a boundary site x
        # the next-cluster law folds one hop through the hole:
        # what(x, y) = omega_xy + omega_xz * omega_zy / pi(z)
        geom = BoxGeometry(2, 2)
        z = geom.origin
        nbs = [int(geom.neighbor_table[z, c]) for c in range(4)]
        overrides = {(z, y): 0.1 for y in nbs}
        env = _env_with_bonds(2, 2, 0.9, overrides)
        dec = strong_cluster(env, 0.5)
        assert len(dec.holes) == 1 and dec.holes[0].volume == 1
        x = nbs[0]
        ec = effective_conductances(env, dec, x)
        pi_z = float(env.pi_all[z])
        # every entry against the explicit one-hop formula
        for y in ec.sites:
            y = int(y)
            direct = 0.0
            for c in range(4):
                nb = int(geom.neighbor_table[x, c])
                if nb == y and dec.in_cluster[y]:
                    direct += env.bond_conductance(x, y)
            through = 0.0
            if z in [int(geom.neighbor_table[x, c]) for c in range(4)] and y in nbs:
                through = env.bond_conductance(x, z) * env.bond_conductance(z, y) / pi_z
            assert ec.weight(y) == pytest.approx(direct + through, rel=1e-12)

    def test_two_site_hole_dense_oracle(self):
        # two adjacent isolated sites: fold through the 2x2 fundamental matrix
        geom = BoxGeometry(2, 2)
        z1 = geom.site_index([0, 0])
        z2 = geom.site_index([0, 1])
        overrides = {}
        for z in (z1, z2):
            for c in range(4):
                y = int(geom.neighbor_table[z, c])
                if y != z1 and y != z2:
                    overrides[(z, y)] = 0.05
        env = _env_with_bonds(2, 2, 0.9, overrides)
        dec = strong_cluster(env, 0.5)
        assert len(dec.holes) == 1 and dec.holes[0].volume == 2
        hole = dec.holes[0]
        pi = env.pi_all
        hs = [int(s) for s in hole.sites]
        bd = [int(s) for s in hole.boundary]
        # absorbing-chain oracle built directly: H = (I - Q)^{-1} R
        Q = np.zeros((2, 2))
        R = np.zeros((2, len(bd)))
        for i, z in enumerate(hs):
            for c in range(4):
                y = int(geom.neighbor_table[z, c])
                if y < 0:
                    continue
                w = env.bond_conductance(z, y)
                if y in hs:
                    Q[i, hs.index(y)] = w / pi[z]
                else:
                    R[i, bd.index(y)] = w / pi[z]
        H = np.linalg.solve(np.eye(2) - Q, R)
        x = bd[0]
        ec = effective_conductances(env, dec, x)
        for j, y in enumerate(bd):
            expected = 0.0
            if dec.in_cluster[y]:
                for c in range(4):
                    if int(geom.neighbor_table[x, c]) == y:
                        expected += env.bond_conductance(x, y)
            for i, z in enumerate(hs):
                if z in [int(geom.neighbor_table[x, c]) for c in range(4)]:
                    expected += env.bond_conductance(x, z) * H[i, j]
            assert ec.weight(y) == pytest.approx(expected, rel=1e-12, abs=1e-15)

    def test_symmetry_and_normalization(self, small_env, holey_decomp):
        M = effective_conductance_matrix(small_env, holey_decomp).tocsr()
        gap = abs(M - M.T).max()
        assert gap <= 1e-10 * M.max()
        rows = np.asarray(M.sum(axis=1)).ravel()
        mask = holey_decomp.in_cluster
        np.testing.assert_allclose(rows[mask], small_env.pi_all[mask], rtol=1e-12)

    def test_support_rule(self, small_env, holey_decomp):
        # positive weight only toward box neighbors on the cluster or sites
        # sharing an adjacent hole's boundary
        geom = small_env.geometry
        hole_of_boundary: dict[int, set[int]] = {}
        for k, h in enumerate(holey_decomp.holes):
            for s in h.boundary:
                hole_of_boundary.setdefault(int(s), set()).add(k)
        for x in np.flatnonzero(holey_decomp.in_cluster)[:60]:
            x = int(x)
            ec = effective_conductances(small_env, holey_decomp, x)
            nbs = set(int(y) for y in geom.neighbor_table[x] if y >= 0)
            for y in ec.sites:
                y = int(y)
                ok_direct = y in nbs and holey_decomp.in_cluster[y]
                shared = hole_of_boundary.get(x, set()) & hole_of_boundary.get(y, set())
                assert ok_direct or shared

    def test_mc_cross_check(self, small_env, holey_decomp):
        x = int(holey_decomp.holes[0].boundary[0])
        ec = effective_conductances(small_env, holey_decomp, x)
        n = 30_000
        sites, counts = next_point_frequencies(small_env, holey_decomp, x, n, np.random.default_rng(77))
        freq = dict(zip(sites.tolist(), counts.tolist()))
        for y, w in ec.as_dict().items():
            p = w / ec.eta
            se = math.sqrt(p * (1 - p) / n)
            assert abs(freq.get(y, 0) / n - p) <= 4 * max(se, 1e-9)

    def test_mc_cross_check_via_time_change(self, small_env, holey_decomp):
        # the same law read off full trajectories: second visited site of the
        # time-changed path is the next strong-cluster point
        x = int(holey_decomp.holes[0].boundary[0])
        ec = effective_conductances(small_env, holey_decomp, x)
        rng = np.random.default_rng(123)
        n = 1_500
        hits: dict[int, int] = {}
        for _ in range(n):
            traj = simulate_ctmc(small_env, x, 50.0, rng, decomp=holey_decomp, kill_radius=None)
            hat = time_changed_trajectory(traj, holey_decomp)
            assert len(hat.sites) >= 2  # horizon is long enough to jump
            y = int(hat.sites[1])
            hits[y] = hits.get(y, 0) + 1
        for y, w in sorted(ec.as_dict().items()):
            p = w / ec.eta
            se = math.sqrt(p * (1 - p) / n)
            assert abs(hits.get(y, 0) / n - p) <= 4 * max(se, 1e-9)

    def test_off_cluster_rejected(self, small_env, holey_decomp):
        hole_site = int(holey_decomp.holes[0].sites[0])
        with pytest.raises(ValidationError):
            effective_conductances(small_env, holey_decomp, hole_site)


class TestEnsembleSemantics:
    def test_positions_blank_after_death(self, small_env, rng):
        grid = np.array([0.5, 2.0, 8.0, 30.0])
        res = ensemble_walk(small_env, small_env.geometry.origin, 400, 30.0, rng,
                            kill_radius=2, real_grid=grid)
        dead = np.isfinite(res.tau)
        assert dead.any()
        for j, tj in enumerate(grid):
            gone = dead & (res.tau < tj)
            assert np.all(res.site_at[gone, j] == -1)
        # exit sites sit just outside the kill radius
        linf = small_env.geometry.linf_norm
        assert np.all(linf[res.exit_site[dead]] == 3)

    def test_mc_respects_box_radius(self, small_env):
        # MC on a smaller operator box agrees with the exact kernel there
        from rcmwalk import UniformizationCache, return_prob_mc

        cache = UniformizationCache(small_env, box_radius=4)
        grid = np.array([1.0, 4.0, 10.0])
        mc = return_prob_mc(small_env, grid, 30_000, np.random.default_rng(6), box_radius=4)
        for j, t in enumerate(grid):
            assert abs(mc.p[j] - cache.return_prob(t)) <= 4 * max(mc.stderr[j], 1e-9)


class TestEmpiricalHeatKernelHat:
    def test_t_zero(self, homog_env, rng):
        dec = strong_cluster(homog_env, 0.5)
        curve = empirical_heat_kernel_hat(homog_env, dec, homog_env.geometry.origin, [0.0, 2.0], 500, rng)
        assert curve.sup_estimate[0] == 1.0

    def test_homogeneous_rescaled_bounded(self):
        env = homogeneous_environment(2, 14)
        dec = strong_cluster(env, 0.5)
        curve = empirical_heat_kernel_hat(
            env, dec, env.geometry.origin, [4.0, 8.0, 16.0, 32.0], 4000, np.random.default_rng(5)
        )
        assert np.all(curve.rescaled <= 1.0)
        assert np.all(curve.n_unreached == 0)
        # no blow-up: the rescaled envelope shows no increasing trend beyond
        # Monte Carlo noise
        trend = np.polyfit(np.log(curve.t), np.log(curve.rescaled), 1)[0]
        assert trend <= 0.25
        assert curve.rescaled[-1] <= 2.0 * curve.rescaled[0]

    def test_full_box_sup_matches_exact_kernel(self):
        # with no holes the time change is the identity, so the envelope at
        # each t is the free-boundary kernel's peak, which sits at the start
        from rcmwalk import UniformizationCache

        env = homogeneous_environment(2, 14)
        dec = strong_cluster(env, 0.5)
        t_grid = [4.0, 8.0, 16.0]
        curve = empirical_heat_kernel_hat(env, dec, env.geometry.origin, t_grid, 6000,
                                          np.random.default_rng(11))
        cache = UniformizationCache(env, killed=False)
        for j, t in enumerate(t_grid):
            exact = cache.return_prob(t)
            # the MC sup is biased upward by at most a few bin errors
            assert curve.sup_estimate[j] >= exact - 4 * curve.stderr[j]
            assert curve.sup_estimate[j] <= exact + 6 * curve.stderr[j]
