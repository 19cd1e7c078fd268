import json
import math

import numpy as np
import pytest

from atlasflow import atlas
from atlasflow import flow as fl
from atlasflow.cover import ChartCover, MapperConfig, refine_partition
from atlasflow.errors import CheckpointError, CoverError
from atlasflow.synth import PointCloud


def _plane_cloud(n=400, noise=0.01, seed=0):
    rng = np.random.default_rng(seed)
    pts = np.column_stack([
        rng.uniform(-2, 2, n),
        rng.uniform(-2, 2, n),
        rng.normal(0, noise, n),
    ])
    return PointCloud(points=pts)


def _tiny_config(**overrides):
    base = dict(
        latent_dim=2,
        n_layers=3,
        hidden=(24, 24),
        epochs=(4, 3, 6, 4, 3),
        batch_size=128,
        lambda_p=0.1,
        seed=0,
        mapper=MapperConfig(n_cubes=2, perc_overlap=0.3, linkage_threshold=1.0),
    )
    base.update(overrides)
    return atlas.TrainConfig(**base)


@pytest.fixture(scope="module")
def plane_model():
    cloud = _plane_cloud()
    cover = ChartCover(n_points=cloud.n, charts=[np.arange(cloud.n)])
    cfg = _tiny_config(epochs=(25, 4, 25, 6, 6))
    log_rows = []
    model = atlas.train(cloud, cover, cfg, log_rows=log_rows)
    return cloud, model, log_rows


class TestDisintegrationWeights:
    def test_counting_example(self):
        # 100 points: 30 exclusive to each chart, 40 shared
        charts = [np.arange(0, 70), np.arange(30, 100)]
        cover = ChartCover(n_points=100, charts=charts)
        part = refine_partition(cover)
        c, per_chart = atlas.disintegration_weights(part, 2)
        np.testing.assert_allclose(c, [0.5, 0.5], atol=1e-15)
        # the shared cell contributes (0.4/2)/0.5 = 0.4 inside chart 0
        weights = {idx: w for idx, w in per_chart[0]}
        shared_idx = next(i for i, (_, owners, n, _) in enumerate(part.cells) if n == 2)
        assert weights[shared_idx] == pytest.approx(0.4)

    def test_disjoint_charts(self):
        cover = ChartCover(n_points=10, charts=[np.arange(0, 3), np.arange(3, 10)])
        part = refine_partition(cover)
        c, _ = atlas.disintegration_weights(part, 2)
        np.testing.assert_allclose(c, [0.3, 0.7], atol=1e-15)

    def test_sums_to_one(self):
        rng = np.random.default_rng(0)
        for trial in range(5):
            n = 200
            charts = []
            for _ in range(4):
                size = rng.integers(30, 120)
                charts.append(np.sort(rng.choice(n, size=size, replace=False)))
            covered = np.unique(np.concatenate(charts))
            missing = np.setdiff1d(np.arange(n), covered)
            if missing.size:
                charts[0] = np.sort(np.concatenate([charts[0], missing]))
            cover = ChartCover(n_points=n, charts=charts)
            c, _ = atlas.disintegration_weights(refine_partition(cover), 4)
            assert abs(c.sum() - 1.0) < 1e-12


class TestBootstrap:
    def test_two_point_probabilities(self):
        cover = ChartCover(n_points=2, charts=[np.array([0, 1]), np.array([1])])
        pts = np.zeros((2, 2))
        rng = np.random.default_rng(0)
        draws = atlas.bootstrap_batch(np.array([0, 1]), cover, pts, 30_000, rng)
        freq = np.bincount(draws.indices, minlength=2) / 30_000
        # probabilities 1/m normalized: (1, 1/2) -> (2/3, 1/3)
        np.testing.assert_allclose(freq, [2 / 3, 1 / 3], atol=0.01)

    def test_uniform_when_no_overlap(self):
        cover = ChartCover(n_points=4, charts=[np.arange(4)])
        rng = np.random.default_rng(1)
        draws = atlas.bootstrap_batch(np.arange(4), cover, np.zeros((4, 2)), 40_000, rng)
        freq = np.bincount(draws.indices, minlength=4) / 40_000
        np.testing.assert_allclose(freq, 0.25, atol=0.01)

    def test_empirical_matches_multinomial_3sigma(self):
        cover = ChartCover(
            n_points=6,
            charts=[np.arange(6), np.array([0, 1, 2]), np.array([0, 1])],
        )
        members = np.arange(6)
        inv = 1.0 / cover.multiplicity[members]
        probs = inv / inv.sum()
        n_draws = 100_000
        rng = np.random.default_rng(2)
        draws = atlas.bootstrap_batch(members, cover, np.zeros((6, 2)), n_draws, rng)
        counts = np.bincount(draws.indices, minlength=6)
        for i in range(6):
            sigma = math.sqrt(n_draws * probs[i] * (1 - probs[i]))
            assert abs(counts[i] - n_draws * probs[i]) < 3 * sigma


class TestTraining:
    def test_deterministic_checkpoints(self, tmp_path):
        cloud = _plane_cloud(n=200)
        cover = ChartCover(n_points=cloud.n, charts=[np.arange(cloud.n)])
        cfg = _tiny_config(epochs=(2, 2, 3, 2, 2))
        m1 = atlas.train(cloud, cover, cfg)
        m2 = atlas.train(cloud, cover, cfg)
        p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
        atlas.save(m1, p1)
        atlas.save(m2, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_chart_count_matches_cover(self):
        cloud = _plane_cloud(n=300, seed=2)
        half = cloud.n // 2
        cover = ChartCover(
            n_points=cloud.n,
            charts=[np.arange(0, half + 30), np.arange(half - 30, cloud.n)],
        )
        model = atlas.train(cloud, cover, _tiny_config(epochs=(2, 2, 2, 2, 2)))
        assert len(model.charts) == cover.n_charts
        assert abs(model.c.sum() - 1.0) < 1e-12

    def test_flat_plane_reconstruction(self, plane_model):
        cloud, model, _ = plane_model
        xr = fl.reconstruct(model.charts[0].phi, 2, cloud.points)
        final = float(((xr - cloud.points) ** 2).sum(axis=1).mean())
        assert final < 1e-3

    def test_mismatched_cover_rejected(self):
        cloud = _plane_cloud(n=100)
        cover = ChartCover(n_points=50, charts=[np.arange(50)])
        with pytest.raises(CoverError):
            atlas.train(cloud, cover, _tiny_config())

    def test_training_log_rows(self, plane_model):
        _, model, log_rows = plane_model
        phases = {r["phase"] for r in log_rows}
        assert phases == {1, 2, 3, 4, 5}
        e1 = model.config.epochs[0]
        assert len([r for r in log_rows if r["phase"] == 1]) == e1
        r3 = [r for r in log_rows if r["phase"] == 3]
        assert r3[0]["recon"] > 0  # recon evaluated even while lambda_t = 1
        assert all(math.isfinite(r["mfd"]) for r in r3)


class TestSampling:
    def test_count_and_dim(self, plane_model):
        _, model, _ = plane_model
        cloud, labels = atlas.sample(model, 1000, np.random.default_rng(0))
        assert cloud.points.shape == (1000, 3)
        assert labels.shape == (1000,)

    def test_degenerate_weights_pick_single_chart(self, plane_model):
        _, model, _ = plane_model
        rigged = atlas.AtlasModel(
            dim=model.dim,
            latent_dim=model.latent_dim,
            charts=[
                atlas.ChartModel(0, model.charts[0].members, model.charts[0].phi, model.charts[0].gamma, 1.0),
                atlas.ChartModel(1, model.charts[0].members, model.charts[0].phi, model.charts[0].gamma, 0.0),
            ],
            cover=ChartCover(
                n_points=model.cover.n_points,
                charts=[model.cover.charts[0], model.cover.charts[0]],
            ),
            config=model.config,
        )
        _, labels = atlas.sample(rigged, 500, np.random.default_rng(1))
        assert np.all(labels == 0)

    def test_samples_near_plane(self, plane_model):
        _, model, _ = plane_model
        cloud, _ = atlas.sample(model, 2000, np.random.default_rng(2))
        # surface z=0 with noise 0.01: samples live on the learned surface
        assert np.quantile(np.abs(cloud.points[:, 2]), 0.95) < 0.3

    def test_generation_encoding_consistency(self, plane_model):
        _, model, _ = plane_model
        cloud, labels = atlas.sample(model, 300, np.random.default_rng(3))
        for k, cm in enumerate(model.charts):
            rows = labels == k
            if rows.sum():
                xr = fl.reconstruct(cm.phi, model.latent_dim, cloud.points[rows])
                assert np.abs(xr - cloud.points[rows]).max() < 1e-6


class TestLogDensity:
    def test_identity_model_standard_normal(self):
        # identity phi embeds v -> (v, 0); identity gamma keeps the standard
        # normal; at the origin log p = -0.5 log(2 pi)
        rng = np.random.default_rng(0)
        phi = fl.make_flow(2, 2, rng)
        gamma = fl.make_flow(1, 2, rng)
        cover = ChartCover(n_points=1, charts=[np.array([0])])
        model = atlas.AtlasModel(
            dim=2, latent_dim=1,
            charts=[atlas.ChartModel(0, np.array([0]), phi, gamma, 1.0)],
            cover=cover, config=atlas.TrainConfig(latent_dim=1),
        )
        got = atlas.log_density(model, np.array([0.0, 0.0]))
        assert got == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-9)

    def test_scaling_embedding_shifts_density(self):
        # phi whose inverse stretches the latent axis by c: density drops by log c
        c = 1.6
        target = (1.0 / c) * fl._DERIV_NORM - fl.MIN_DERIVATIVE
        ud_raw = math.log(math.expm1(target)) - fl._DERIV_OFFSET
        ud_param = fl.RAW_CAP * math.atanh(ud_raw / fl.RAW_CAP)
        layer = fl.CouplingLayer(
            dim=2, id_idx=np.array([], dtype=int), tr_idx=np.array([0, 1]),
            n_bins=2, bound=5.0,
            raw=[np.zeros((2, 2)), np.zeros((2, 2)), np.array([[ud_param], [0.0]])],
        )
        phi = fl.FlowStack(dim=2, layers=[layer])
        gamma = fl.make_flow(1, 1, np.random.default_rng(0))
        cover = ChartCover(n_points=1, charts=[np.array([0])])
        model = atlas.AtlasModel(
            dim=2, latent_dim=1,
            charts=[atlas.ChartModel(0, np.array([0]), phi, gamma, 1.0)],
            cover=cover, config=atlas.TrainConfig(latent_dim=1),
        )
        got = atlas.log_density(model, np.array([0.0, 0.0]))
        assert got == pytest.approx(-0.5 * math.log(2 * math.pi) - math.log(c), abs=1e-3)

    def test_monte_carlo_normalization(self):
        # integral of the chart density over the surface == integral over the
        # latent of N(gamma(v)) |det J_gamma| sqrt(det G) / sqrt(det G) = 1
        rng = np.random.default_rng(1)
        phi = fl.make_flow(2, 3, rng)
        phi.set_parameters([p + 0.1 * rng.normal(size=p.shape) for p in phi.parameters()])
        gamma = fl.make_flow(1, 3, rng)
        gamma.set_parameters([p + 0.2 * rng.normal(size=p.shape) for p in gamma.parameters()])
        cover = ChartCover(n_points=1, charts=[np.array([0])])
        model = atlas.AtlasModel(
            dim=2, latent_dim=1,
            charts=[atlas.ChartModel(0, np.array([0]), phi, gamma, 1.0)],
            cover=cover, config=atlas.TrainConfig(latent_dim=1),
        )
        n_mc = 100_000
        lim = 6.0
        v = rng.uniform(-lim, lim, size=(n_mc, 1))
        surface = fl.embed_latent(phi, v)
        log_p = atlas.chart_log_density(model, surface, 0)
        gram = fl.embedding_gram_logdet(phi, 1, v)
        integral = float(np.exp(log_p + gram).mean() * (2 * lim))
        assert abs(integral - 1.0) < 0.05


class TestCheckpointIO:
    def test_round_trip_parameters(self, plane_model, tmp_path):
        _, model, _ = plane_model
        path = tmp_path / "ckpt.json"
        atlas.save(model, path)
        back = atlas.load(path)
        assert back.dim == model.dim and back.latent_dim == model.latent_dim
        for a, b in zip(model.charts, back.charts):
            assert a.c_k == b.c_k
            for pa, pb in zip(a.phi.parameters(), b.phi.parameters()):
                np.testing.assert_array_equal(pa, pb)
            for pa, pb in zip(a.gamma.parameters(), b.gamma.parameters()):
                np.testing.assert_array_equal(pa, pb)

    def test_forward_identical_after_round_trip(self, plane_model, tmp_path):
        _, model, _ = plane_model
        path = tmp_path / "ckpt.json"
        atlas.save(model, path)
        back = atlas.load(path)
        x = np.random.default_rng(4).normal(size=(100, 3))
        za, la = fl.stack_forward(model.charts[0].phi, x)
        zb, lb = fl.stack_forward(back.charts[0].phi, x)
        assert np.array_equal(za, zb) and np.array_equal(la, lb)

    def test_version_mismatch(self, plane_model, tmp_path):
        _, model, _ = plane_model
        path = tmp_path / "ckpt.json"
        atlas.save(model, path)
        payload = json.loads(path.read_text())
        payload["format_version"] = 2
        path.write_text(json.dumps(payload))
        with pytest.raises(CheckpointError, match="format_version"):
            atlas.load(path)

    def test_corrupt_file_reports_offset(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"format_version": 1, "dim": ???')
        with pytest.raises(CheckpointError, match="byte"):
            atlas.load(path)


class TestConfigValidation:
    def test_lambda_p_range(self):
        with pytest.raises(ValueError):
            atlas.TrainConfig(lambda_p=0.0)
        with pytest.raises(ValueError):
            atlas.TrainConfig(lambda_p=1.5)

    def test_epochs_shape(self):
        with pytest.raises(ValueError):
            atlas.TrainConfig(epochs=(1, 2, 3))

    def test_presets(self):
        torus = atlas.torus_defaults()
        assert torus.epochs == (60, 30, 60, 60, 60)
        assert torus.lambda_o == 25.0 and torus.lambda_d == 0.01
        knot = atlas.trefoil_defaults()
        assert knot.epochs == (15, 30, 60, 60, 60)
        assert knot.latent_dim == 1 and knot.n_layers == 11
        assert knot.mapper.n_cubes == 2 and knot.mapper.perc_overlap == 0.2
