import itertools

import numpy as np
import pytest

from audioshield.features import (
    Codebook,
    ZoningPlan,
    count_patches,
    encode,
    extract_descriptors,
    kmeanspp_fit,
    load_codebook,
    read_encoded_csv,
    save_codebook,
    surf64,
    surf64_batch,
    write_encoded_csv,
    zone_and_slide,
)


class TestZoning:
    def test_16_stride_5(self):
        img = np.zeros((16, 16))
        patches, _, _ = zone_and_slide(img, ZoningPlan([16], [5]))
        assert patches.shape[0] == 4

    def test_16_stride_1(self):
        img = np.zeros((16, 16))
        patches, _, _ = zone_and_slide(img, ZoningPlan([16], [1]))
        assert patches.shape[0] == 81

    def test_plan_validation(self):
        with pytest.raises(ValueError):
            ZoningPlan([16, 32], [1])
        with pytest.raises(ValueError):
            ZoningPlan([4], [1])
        with pytest.raises(ValueError):
            ZoningPlan([16], [6])

    def test_too_small_image(self):
        with pytest.raises(ValueError):
            zone_and_slide(np.zeros((6, 6)), ZoningPlan([16], [1]))

    def test_patch_content_matches_origins(self):
        rng = np.random.default_rng(0)
        img = rng.normal(size=(40, 56))
        patches, _, grid = zone_and_slide(img, ZoningPlan([16, 32], [3, 4]))
        for i in range(0, patches.shape[0], 17):
            r, c = grid[i]
            assert np.array_equal(patches[i], img[r : r + 8, c : c + 8])

    def test_count_closed_form_random_sweep(self):
        rng = np.random.default_rng(1)
        for _ in range(25):
            h = int(rng.integers(16, 90))
            w = int(rng.integers(16, 90))
            sizes = sorted(rng.choice([8, 16, 24, 32, 48], size=2, replace=False))
            strides = [int(rng.integers(1, 6)) for _ in sizes]
            plan = ZoningPlan(list(map(int, sizes)), strides)
            patches, _, _ = zone_and_slide(np.zeros((h, w)), plan)
            assert patches.shape[0] == count_patches((h, w), plan)

    def test_fitted_plan_drops_oversized_zones(self):
        plan = ZoningPlan([16, 32, 64, 96, 128], [1, 2, 3, 4, 5])
        fitted = plan.fitted_to((64, 96))
        assert fitted.zone_sizes == [16, 32, 64]
        assert fitted.strides == [1, 2, 3]


class TestSurf:
    def test_constant_patch_zero_vector(self):
        d = surf64(np.full((8, 8), 0.37))
        assert np.all(d.values == 0.0)

    def test_descriptor_norm_one(self):
        rng = np.random.default_rng(2)
        descs = surf64_batch(rng.normal(size=(50, 8, 8)))
        assert np.allclose(np.linalg.norm(descs, axis=1), 1.0, atol=1e-6)

    def test_horizontal_step_edge(self):
        patch = np.zeros((8, 8))
        patch[:, 4:] = 1.0  # intensity steps along x
        d = surf64(patch).values.reshape(16, 4)
        assert d[:, 2].sum() > d[:, 3].sum()  # |dx| slots dominate |dy|
        assert d[:, 3].sum() == pytest.approx(0.0)

    def test_invariant_to_constant_offset(self):
        rng = np.random.default_rng(3)
        patch = rng.normal(size=(8, 8))
        assert np.allclose(surf64(patch).values, surf64(patch + 5.0).values)

    def test_length_and_shape_validation(self):
        with pytest.raises(ValueError):
            surf64(np.zeros((7, 8)))

    def test_extract_descriptor_count(self):
        rng = np.random.default_rng(4)
        img = rng.normal(size=(40, 40))
        plan = ZoningPlan([16], [2])
        descs = extract_descriptors(img, plan)
        assert descs.shape == (count_patches((40, 40), plan), 64)


class TestKmeans:
    def test_perfect_fit(self):
        pts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        book = kmeanspp_fit(pts, k=3, seed=0)
        assert book.inertia == pytest.approx(0.0, abs=1e-12)
        assert {tuple(c) for c in book.centroids} == {tuple(p) for p in pts}

    def test_separated_blobs_seeding(self):
        rng = np.random.default_rng(5)
        sigma = 0.05
        centers = np.array([[0.0, 0.0], [5.0, 0.0], [0.0, 5.0]]) * (100 * sigma)
        pts = np.vstack([rng.normal(c, sigma, (30, 2)) for c in centers])
        hits = 0
        for seed in range(100):
            book = kmeanspp_fit(pts, k=3, seed=seed, max_iter=1)
            d = np.sqrt(((book.centroids[:, None, :] - centers[None]) ** 2).sum(-1))
            if set(np.argmin(d, axis=1)) == {0, 1, 2}:
                hits += 1
        assert hits >= 95

    def test_unit_square_matches_exhaustive(self):
        pts = np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]])
        book = kmeanspp_fit(pts, k=2, seed=1)
        assert book.inertia == pytest.approx(1.0, abs=1e-12)

    def test_objective_monotone(self):
        rng = np.random.default_rng(6)
        for seed in range(10):
            pts = rng.normal(size=(60, 5))
            book = kmeanspp_fit(pts, k=4, seed=seed)
            hist = np.array(book.inertia_history)
            assert np.all(np.diff(hist) <= 1e-9)

    def test_preconditions(self):
        pts = np.zeros((3, 2))
        with pytest.raises(ValueError):
            kmeanspp_fit(pts, k=1, seed=0)
        with pytest.raises(ValueError):
            kmeanspp_fit(pts, k=4, seed=0)

    def test_matches_brute_force_two_clusters(self):
        rng = np.random.default_rng(7)
        wins = 0
        for trial in range(40):
            n = int(rng.integers(4, 8))
            pts = rng.normal(size=(n, 2))
            best = min(
                kmeanspp_fit(pts, 2, seed=s).inertia for s in range(trial * 10, trial * 10 + 8)
            )
            oracle = _exhaustive_two_partition(pts)
            assert best >= oracle - 1e-9
            if best <= oracle + 1e-9:
                wins += 1
        assert wins >= 36  # 90%


def _exhaustive_two_partition(pts: np.ndarray) -> float:
    n = pts.shape[0]
    best = np.inf
    for bits in range(1, 2 ** (n - 1)):
        mask = np.array([(bits >> i) & 1 for i in range(n)], dtype=bool)
        if mask.all() or not mask.any():
            continue
        cost = 0.0
        for part in (pts[mask], pts[~mask]):
            cost += float(((part - part.mean(axis=0)) ** 2).sum())
        best = min(best, cost)
    return best


class TestEncode:
    def _book(self):
        return Codebook(np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 2.0]]), inertia=0.0)

    def test_descriptor_on_centroid(self):
        book = self._book()
        f = encode(np.array([[0.0, 0.0]]), book, aggregate=False)[0]
        d = np.array([0.0, 2.0, 2.0])
        assert f[0] == pytest.approx(d.mean())
        assert f[0] == f.max()

    def test_equidistant_two_centroids(self):
        book = Codebook(np.array([[-1.0, 0.0], [1.0, 0.0]]), inertia=0.0)
        f = encode(np.array([[0.0, 3.0]]), book, aggregate=False)[0]
        assert np.allclose(f, 0.0)

    def test_nonnegative_with_zero_coordinate(self):
        rng = np.random.default_rng(8)
        book = Codebook(rng.normal(size=(5, 4)), inertia=0.0)
        f = encode(rng.normal(size=(30, 4)), book, aggregate=False)
        assert np.all(f >= 0.0)
        assert np.all(np.min(f, axis=1) == 0.0)

    def test_order_invariance_of_mean_pooling(self):
        rng = np.random.default_rng(9)
        book = Codebook(rng.normal(size=(4, 3)), inertia=0.0)
        vecs = rng.normal(size=(20, 3))
        perm = rng.permutation(20)
        assert np.allclose(encode(vecs, book), encode(vecs[perm], book))

    def test_dim_mismatch(self):
        book = self._book()
        with pytest.raises(ValueError):
            encode(np.zeros((2, 5)), book)


class TestFiles:
    def test_codebook_roundtrip(self, tmp_path):
        rng = np.random.default_rng(10)
        book = kmeanspp_fit(rng.normal(size=(50, 6)), k=4, seed=0)
        path = tmp_path / "book.kmb"
        save_codebook(book, path)
        back = load_codebook(path)
        assert back.k == 4 and back.dim == 6
        assert np.allclose(back.centroids, book.centroids)
        assert path.read_bytes()[:4] == b"KMB1"

    def test_encoded_csv_roundtrip(self, tmp_path):
        rng = np.random.default_rng(11)
        enc = rng.uniform(size=(5, 3))
        path = tmp_path / "enc.csv"
        write_encoded_csv(path, [f"s{i}" for i in range(5)], [0, 1, 2, 0, 1], enc)
        ids, labels, rows = read_encoded_csv(path)
        assert ids == [f"s{i}" for i in range(5)]
        assert np.array_equal(labels, [0, 1, 2, 0, 1])
        assert np.allclose(rows, enc, atol=1e-8)
        header = path.read_text().splitlines()[0]
        assert header == "source_id,label,f1,f2,f3"
