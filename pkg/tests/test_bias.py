import numpy as np
import pytest
from scipy.stats import pearsonr

from voxelflow.bias import (
    BiasFieldCorrector,
    ClassPriorField,
    FuzzyState,
    PbcfcmParams,
    build_masks,
    estimate_priors,
    pbcfcm_objective,
    pbcfcm_step,
    run_pbcfcm,
    uniform_priors,
)
from voxelflow.geometry import ScalarVolume, VolumeGeometry
from voxelflow.phantom import PhantomParams, generate_phantom


def tiny_volume(values, dims=None):
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, 1, -1)
    nz, ny, nx = arr.shape
    geom = VolumeGeometry((nx, ny, nz), (float(nx), float(ny), float(nz)))
    return ScalarVolume(geom, arr)


def random_instance(rng, dims=(4, 4, 4), n_classes=3, uniform_p=True, alpha=0.0):
    nx, ny, nz = dims
    geom = VolumeGeometry(dims, (float(nx), float(ny), float(nz)))
    y = ScalarVolume(geom, rng.uniform(0, 10, size=(nz, ny, nx)))
    if uniform_p:
        priors = uniform_priors(geom, n_classes)
    else:
        raw = rng.uniform(0.1, 1.0, size=(n_classes, nz, ny, nx))
        priors = ClassPriorField(geom, raw / raw.sum(axis=0))
    u = rng.uniform(0.05, 1.0, size=(n_classes, nz, ny, nx))
    u /= u.sum(axis=0)
    v = np.sort(rng.uniform(0, 10, size=n_classes))
    bias = ScalarVolume(geom, rng.uniform(-0.5, 0.5, size=(nz, ny, nx)))
    state = FuzzyState(u, v, bias)
    params = PbcfcmParams(n_clusters=n_classes, neighbor_weight=alpha)
    return y, state, priors, params


class TestObjective:
    def test_hand_computed_single_voxel(self):
        y = tiny_volume([5.0])
        geom = y.geometry
        state = FuzzyState(
            np.array([1.0, 0.0]).reshape(2, 1, 1, 1),
            np.array([0.0, 10.0]),
            ScalarVolume(geom, np.zeros((1, 1, 1))),
        )
        priors = uniform_priors(geom, 2)
        # make the priors exactly 1 (positive, not a probability vector; the
        # objective only requires positivity)
        priors.probs[:] = 1.0
        params = PbcfcmParams(n_clusters=2, neighbor_weight=0.0)
        assert pbcfcm_objective(y, state, priors, params) == pytest.approx(25.0)

    def test_zero_at_exact_assignment(self):
        y = tiny_volume([0.0, 10.0, 10.0, 0.0])
        geom = y.geometry
        u = np.zeros((2, 1, 1, 4))
        u[0, 0, 0, [0, 3]] = 1.0
        u[1, 0, 0, [1, 2]] = 1.0
        state = FuzzyState(u, np.array([0.0, 10.0]), ScalarVolume(geom, np.zeros((1, 1, 4))))
        priors = uniform_priors(geom, 2)
        params = PbcfcmParams(n_clusters=2, neighbor_weight=0.0)
        assert pbcfcm_objective(y, state, priors, params) == 0.0

    def test_matches_direct_fcm_oracle(self):
        # independent direct-sum FCM objective on a 16-voxel instance
        rng = np.random.default_rng(21)
        y, state, priors, _ = random_instance(rng, dims=(4, 2, 2))
        priors.probs[:] = 1.0
        params = PbcfcmParams(n_clusters=3, neighbor_weight=0.0)
        w = y.data - state.bias.data
        expected = 0.0
        for i in range(3):
            for k in np.ndindex(w.shape):
                expected += state.memberships[i][k] ** 2 * (w[k] - state.centroids[i]) ** 2
        got = pbcfcm_objective(y, state, priors, params)
        assert got == pytest.approx(expected, rel=1e-12)

    def test_rejects_nonpositive_priors(self):
        rng = np.random.default_rng(22)
        y, state, priors, params = random_instance(rng)
        priors.probs[0, 0, 0, 0] = 0.0
        with pytest.raises(ValueError, match="positive"):
            pbcfcm_objective(y, state, priors, params)


class TestStep:
    def test_zero_distance_degenerate_assignment(self):
        y = tiny_volume([0.0, 10.0])
        geom = y.geometry
        u0 = np.full((2, 1, 1, 2), 0.5)
        state = FuzzyState(u0, np.array([0.0, 10.0]), ScalarVolume(geom, np.zeros((1, 1, 2))))
        priors = uniform_priors(geom, 2)
        params = PbcfcmParams(n_clusters=2, neighbor_weight=0.0)
        out = pbcfcm_step(y, state, priors, params)
        assert np.allclose(out.memberships[:, 0, 0, 0], [1.0, 0.0])
        assert np.allclose(out.memberships[:, 0, 0, 1], [0.0, 1.0])

    def test_tied_zero_distances_split_equally(self):
        y = tiny_volume([5.0])
        geom = y.geometry
        state = FuzzyState(
            np.full((2, 1, 1, 1), 0.5), np.array([5.0, 5.0]),
            ScalarVolume(geom, np.zeros((1, 1, 1))),
        )
        priors = uniform_priors(geom, 2)
        params = PbcfcmParams(n_clusters=2, neighbor_weight=0.0)
        out = pbcfcm_step(y, state, priors, params)
        assert np.allclose(out.memberships[:, 0, 0, 0], [0.5, 0.5])

    def test_one_hot_bias_update(self):
        # with one-hot memberships the bias lands on y_k - v_assigned
        rng = np.random.default_rng(23)
        y, state, priors, params = random_instance(rng, dims=(3, 3, 1))
        out = pbcfcm_step(y, state, priors, params)
        u = out.memberships
        recon = (u**2 * out.centroids.reshape(-1, 1, 1, 1)).sum(axis=0) / (u**2).sum(axis=0)
        assert np.allclose(out.bias.data, y.data - recon, atol=1e-12)

    def test_matches_reference_fcm_with_bias(self):
        # independent loop implementation of the closed-form updates
        rng = np.random.default_rng(24)
        y, state, priors, _ = random_instance(rng, dims=(8, 2, 2))
        params = PbcfcmParams(n_clusters=3, neighbor_weight=0.0)
        out = pbcfcm_step(y, state, priors, params)

        w = y.data - state.bias.data
        u_ref = np.zeros_like(state.memberships)
        for k in np.ndindex(w.shape):
            d = np.array([(w[k] - v) ** 2 for v in state.centroids])
            for i in range(3):
                u_ref[i][k] = 1.0 / np.sum((d[i] / d) ** 1.0)
        v_ref = np.array([
            float((u_ref[i] ** 2 * w).sum() / (u_ref[i] ** 2).sum()) for i in range(3)
        ])
        assert np.abs(out.memberships - u_ref).max() < 1e-10
        assert np.abs(out.centroids - v_ref).max() < 1e-10

    def test_memberships_stay_on_simplex(self):
        rng = np.random.default_rng(25)
        for uniform_p, alpha in ((True, 0.0), (False, 0.7), (False, 0.0), (True, 1.2)):
            y, state, priors, params = random_instance(
                rng, uniform_p=uniform_p, alpha=alpha
            )
            out = pbcfcm_step(y, state, priors, params)
            u = out.memberships
            assert u.min() >= 0.0 and u.max() <= 1.0 + 1e-12
            assert np.abs(u.sum(axis=0) - 1.0).max() < 1e-9

    def test_membership_and_centroid_steps_descend_objective(self):
        # u-step descends for arbitrary priors (it is the exact block
        # minimizer); the centroid step is exact when priors are uniform 1,
        # which is how the printed update is derived
        rng = np.random.default_rng(26)
        for trial in range(20):
            y, state, priors, params = random_instance(rng, uniform_p=False, alpha=0.8)
            before = pbcfcm_objective(y, state, priors, params)
            out = pbcfcm_step(y, state, priors, params)
            after_u = pbcfcm_objective(
                y, FuzzyState(out.memberships, state.centroids, state.bias), priors, params
            )
            assert after_u <= before + 1e-8

            y2, state2, priors2, _ = random_instance(rng, uniform_p=True, alpha=0.0)
            priors2.probs[:] = 1.0
            params2 = PbcfcmParams(n_clusters=3, neighbor_weight=0.0)
            before2 = pbcfcm_objective(y2, state2, priors2, params2)
            out2 = pbcfcm_step(y2, state2, priors2, params2)
            mid = FuzzyState(out2.memberships, state2.centroids, state2.bias)
            after_u2 = pbcfcm_objective(y2, mid, priors2, params2)
            after_uv = pbcfcm_objective(
                y2, FuzzyState(out2.memberships, out2.centroids, state2.bias), priors2, params2
            )
            assert after_u2 <= before2 + 1e-8
            assert after_uv <= after_u2 + 1e-8

    def test_prior_scaling_invariance_without_neighbors(self):
        rng = np.random.default_rng(27)
        y, state, priors, params = random_instance(rng, uniform_p=False, alpha=0.0)
        out1 = pbcfcm_step(y, state, priors, params)
        scaled = ClassPriorField(priors.geometry, priors.probs.copy())
        scaled.probs[:, 1, 2, 3] *= 7.5  # bypass the sum-to-1 check on purpose
        out2 = pbcfcm_step(y, state, scaled, params)
        assert np.allclose(out1.memberships[:, 1, 2, 3], out2.memberships[:, 1, 2, 3], atol=1e-12)


class TestRun:
    def test_two_level_image_recovers_levels(self):
        rng = np.random.default_rng(28)
        data = rng.choice([2.0, 9.0], size=(2, 4, 4))
        data[0, 0, 0] = 2.0
        data[0, 0, 1] = 9.0  # both levels present
        y = tiny_volume(data)
        priors = uniform_priors(y.geometry, 2)
        params = PbcfcmParams(n_clusters=2, neighbor_weight=0.0, centroid_tol=1e-10)
        corrected, state, report = run_pbcfcm(y, priors, params)
        assert np.allclose(np.sort(state.centroids), [2.0, 9.0], atol=1e-8)
        assert report.converged

    def test_uniform_prior_reduction_matches_no_prior(self):
        rng = np.random.default_rng(29)
        dims = (6, 5, 2)
        geom = VolumeGeometry(dims, (6.0, 5.0, 2.0))
        y = ScalarVolume(geom, rng.uniform(0, 100, size=(2, 5, 6)))
        params = PbcfcmParams(n_clusters=3, neighbor_weight=0.0, max_iter=40)

        near_uniform = uniform_priors(geom, 3)
        near_uniform.probs[:] = 1.0 / 3.0 + 1e-6
        near_uniform.probs /= near_uniform.probs.sum(axis=0)
        ones = uniform_priors(geom, 3)
        ones.probs[:] = 1.0

        c1, s1, _ = run_pbcfcm(y, near_uniform, params)
        c2, s2, _ = run_pbcfcm(y, ones, params)
        assert np.abs(c1.data - c2.data).max() < 1e-8
        assert np.abs(s1.centroids - s2.centroids).max() < 1e-8
        assert np.abs(s1.memberships - s2.memberships).max() < 1e-8

    def test_nonconvergence_flagged(self):
        rng = np.random.default_rng(30)
        geom = VolumeGeometry((4, 4, 2), (4.0, 4.0, 2.0))
        y = ScalarVolume(geom, rng.uniform(0, 50, size=(2, 4, 4)))
        params = PbcfcmParams(neighbor_weight=0.3, max_iter=2, centroid_tol=1e-14)
        _, _, report = run_pbcfcm(y, uniform_priors(geom), params)
        assert not report.converged
        assert report.n_iter == 2
        assert len(report.objective) == 2


class TestMasksAndPriors:
    def test_zero_image_all_background(self):
        geom = VolumeGeometry((4, 4, 2), (4.0, 4.0, 2.0))
        t1 = ScalarVolume(geom, np.zeros((2, 4, 4)))
        ff = ScalarVolume(geom, np.zeros((2, 4, 4)))
        params = PbcfcmParams(tau_bg=0.01, tau_fat=0.5)
        bg, fat, muscle = build_masks(t1, ff, params)
        assert bg.data.all()
        assert not fat.data.any()
        assert not muscle.data.any()

    def test_masks_partition_domain(self):
        rng = np.random.default_rng(31)
        geom = VolumeGeometry((8, 8, 3), (8.0, 8.0, 3.0))
        t1 = ScalarVolume(geom, rng.uniform(0, 200, size=(3, 8, 8)))
        ff = ScalarVolume(geom, rng.uniform(0, 1, size=(3, 8, 8)))
        bg, fat, muscle = build_masks(t1, ff, PbcfcmParams())
        total = bg.data.astype(int) + fat.data.astype(int) + muscle.data.astype(int)
        assert (total == 1).all()

    def test_geometry_mismatch_rejected(self):
        g1 = VolumeGeometry((4, 4, 2), (4.0, 4.0, 2.0))
        g2 = VolumeGeometry((8, 8, 2), (4.0, 4.0, 2.0))
        t1 = ScalarVolume(g1, np.zeros((2, 4, 4)))
        ff = ScalarVolume(g2, np.zeros((2, 8, 8)))
        with pytest.raises(ValueError, match="resampled"):
            build_masks(t1, ff, PbcfcmParams())

    def test_phantom_masks_match_truth_classes(self):
        from voxelflow.geometry import resample

        p = PhantomParams(dims=(64, 64, 8), fov_mm=(200.0, 200.0, 40.0), seed=3,
                          bias_amplitude=0.3, noise_sigma=0.02)
        bundle = generate_phantom(p)
        clean = generate_phantom(PhantomParams(dims=p.dims, fov_mm=p.fov_mm, seed=3))
        ff = resample(bundle.fat_fraction_like, bundle.t1_like.geometry)
        bg, fat, muscle = build_masks(bundle.t1_like, ff, PbcfcmParams())
        bg_l, mus_l, fat_l = p.intensity_levels
        truth = np.zeros(clean.t1_like.data.shape, dtype=int)
        truth[clean.t1_like.data == mus_l] = 1
        truth[clean.t1_like.data == fat_l] = 2
        predicted = np.zeros_like(truth)
        predicted[muscle.data] = 1
        predicted[fat.data] = 2
        agreement = (predicted == truth).mean()
        assert agreement >= 0.95

    def test_prior_vectors(self):
        geom = VolumeGeometry((4, 4, 1), (4.0, 4.0, 1.0))
        bg = np.zeros((1, 4, 4), bool)
        fat = np.zeros((1, 4, 4), bool)
        muscle = np.zeros((1, 4, 4), bool)
        bg[0, 0], fat[0, 1], muscle[0, 2:] = True, True, True
        from voxelflow.geometry import MaskVolume

        masks = (MaskVolume(geom, bg), MaskVolume(geom, fat), MaskVolume(geom, muscle))
        field = estimate_priors(masks, 0.9)
        assert np.allclose(field.probs[:, 0, 1, 0], [0.05, 0.05, 0.9])  # fat voxel
        assert np.allclose(field.probs[:, 0, 0, 0], [0.9, 0.05, 0.05])  # bg voxel
        assert np.allclose(field.probs.sum(axis=0), 1.0)
        with pytest.raises(ValueError):
            estimate_priors(masks, 0.2)
        near = estimate_priors(masks, 1.0 / 3.0 + 1e-6)
        assert np.abs(near.probs - 1.0 / 3.0).max() < 1e-5


class TestEstimator:
    def test_bias_recovery_on_phantom(self):
        # half-size instance, so the inhomogeneity scale and the smoothing
        # scale shrink with the field of view
        p = PhantomParams(dims=(64, 64, 12), fov_mm=(200.0, 200.0, 60.0), seed=5,
                          bias_amplitude=0.3, noise_sigma=0.02,
                          bias_smoothness_mm=40.0)
        bundle = generate_phantom(p)
        corr = BiasFieldCorrector(bias_smoothing_mm=12.5).fit(
            bundle.t1_like, bundle.fat_fraction_like)
        clean = generate_phantom(PhantomParams(dims=p.dims, fov_mm=p.fov_mm, seed=5))
        foreground = clean.t1_like.data > p.intensity_levels[0]
        r = pearsonr(corr.bias_.data[foreground], bundle.true_bias.data[foreground])[0]
        assert r >= 0.95

    def test_transform_requires_fit(self):
        from sklearn.exceptions import NotFittedError

        with pytest.raises(NotFittedError):
            BiasFieldCorrector().transform()

    def test_get_params_roundtrip(self):
        est = BiasFieldCorrector(neighbor_weight=0.25, tau_bg=12.0)
        params = est.get_params()
        assert params["neighbor_weight"] == 0.25
        clone = BiasFieldCorrector(**params)
        assert clone.tau_bg == 12.0
