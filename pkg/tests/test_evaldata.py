"""Datasets, sliced Wasserstein, and the consistency probe."""

import math

import pytest
import torch

from snaplab.evaldata import (
    ConsistencyProbe,
    ProbeIntegrityError,
    TradeoffPoint,
    condition_consistency,
    distribution_distance,
    eval_curve,
    make_conditional_mixture,
    make_latent_mixture,
    read_curve_csv,
    shape_image,
    train_probe,
    write_curve_csv,
)
from snaplab.sampler import BayesDenoiser
from snaplab.schedule import CosineSchedule

SCHED = CosineSchedule()


@pytest.fixture(scope="module")
def dataset():
    return make_conditional_mixture(num_conditions=8, seed=0)


@pytest.fixture(scope="module")
def probe(dataset):
    return train_probe(dataset, seed=0)


def test_dataset_shapes_and_determinism(dataset):
    g = torch.Generator().manual_seed(0)
    x, c = dataset.sample_batch(256, g)
    assert x.shape == (256, 2) and c.shape == (256,)
    assert x.dtype == torch.float32
    assert dataset.draw(3, 17).shape == (2,)
    assert torch.equal(dataset.draw(3, 17), dataset.draw(3, 17))
    assert not torch.equal(dataset.draw(3, 17), dataset.draw(3, 18))
    ref1, c1 = dataset.reference_sample(1000, seed=4)
    ref2, _ = dataset.reference_sample(1000, seed=4)
    assert torch.equal(ref1, ref2)
    assert int(c1.bincount().min()) == 125  # balanced


def test_pooled_mixture_covers_all_conditions(dataset):
    pooled = dataset.pooled()
    assert pooled.n_components == 8
    assert float(pooled.weights.sum()) == pytest.approx(1.0, abs=1e-12)


def test_latent_mixture_shape():
    lat = make_latent_mixture(num_conditions=4, shape=(4, 8, 8), seed=1)
    assert lat.data_dim == 4 * 8 * 8
    g = torch.Generator().manual_seed(0)
    x, c = lat.sample_batch(8, g)
    assert x.shape == (8, 256)


def test_shape_image():
    img = shape_image(2)
    assert img.shape == (3, 32, 32)
    assert float(img.max()) <= 1.0 and float(img.min()) >= 0.0
    assert not torch.equal(shape_image(2), shape_image(5))


# ---------------------------------------------------------------------------
# sliced Wasserstein


def test_distance_zero_iff_identical():
    g = torch.Generator().manual_seed(0)
    a = torch.randn(1500, 2, generator=g, dtype=torch.float64)
    assert distribution_distance(a, a.clone()) == 0.0
    b = a.clone()
    b[0, 0] += 1.0
    assert distribution_distance(a, b) > 0.0


def test_distance_symmetric_and_permutation_invariant():
    g = torch.Generator().manual_seed(1)
    a = torch.randn(2000, 3, generator=g, dtype=torch.float64)
    b = torch.randn(2000, 3, generator=g, dtype=torch.float64) + 0.3
    d_ab = distribution_distance(a, b)
    d_ba = distribution_distance(b, a)
    assert d_ab == pytest.approx(d_ba, abs=1e-12)
    perm = torch.randperm(2000, generator=g)
    assert distribution_distance(a[perm], b) == pytest.approx(d_ab, abs=1e-12)


def test_distance_triangle_inequality():
    g = torch.Generator().manual_seed(2)
    a = torch.randn(1200, 2, generator=g, dtype=torch.float64)
    b = torch.randn(1200, 2, generator=g, dtype=torch.float64) * 1.5
    c = torch.randn(1200, 2, generator=g, dtype=torch.float64) + 2.0
    d_ac = distribution_distance(a, c)
    d_ab = distribution_distance(a, b)
    d_bc = distribution_distance(b, c)
    assert d_ac <= d_ab + d_bc + 1e-6


def test_distance_shifted_gaussian_scales_with_shift():
    # W1(N(0,1), N(delta,1)) = |delta| in 1-D.
    g = torch.Generator().manual_seed(3)
    base = torch.randn(10_000, 1, generator=g, dtype=torch.float64)
    for delta in (0.5, 1.0, 2.0):
        d = distribution_distance(base, base + delta)
        assert d == pytest.approx(delta, rel=0.10)


def test_distance_input_validation():
    a = torch.randn(1500, 2, dtype=torch.float64)
    with pytest.raises(ValueError):
        distribution_distance(a[:500], a[:500])  # too few
    with pytest.raises(ValueError):
        distribution_distance(a, a[:1200])  # unequal sizes
    with pytest.raises(ValueError):
        distribution_distance(a, torch.randn(1500, 3, dtype=torch.float64))


# ---------------------------------------------------------------------------
# probe


def test_probe_confident_on_real_data(dataset, probe):
    g = torch.Generator().manual_seed(99)
    x, c = dataset.sample_batch(4000, g, dtype=torch.float64)
    score = condition_consistency(x, c, probe)
    assert score >= 0.95


def test_probe_chance_on_random_points(dataset, probe):
    g = torch.Generator().manual_seed(7)
    x = torch.rand(4000, 2, generator=g, dtype=torch.float64) * 12 - 6
    c = torch.randint(8, (4000,), generator=g)
    score = condition_consistency(x, c, probe)
    assert score == pytest.approx(1.0 / 8.0, abs=0.05)


def test_probe_below_chance_on_mislabeled_data(dataset, probe):
    g = torch.Generator().manual_seed(8)
    x, c = dataset.sample_batch(4000, g, dtype=torch.float64)
    wrong = (c + 4) % 8  # opposite cluster
    assert condition_consistency(x, wrong, probe) <= 1.0 / 8.0


def test_probe_checksum_guards_mutation(dataset, probe):
    tampered = ConsistencyProbe(probe.weight, probe.bias)
    tampered.weight[0, 0] += 1.0
    with pytest.raises(ProbeIntegrityError):
        tampered.probabilities(torch.zeros(1, 2))


def test_probe_save_load_roundtrip(dataset, probe, tmp_path):
    path = tmp_path / "probe.npz"
    probe.save(path)
    loaded = ConsistencyProbe.load(path)
    assert loaded.checksum == probe.checksum
    assert torch.equal(loaded.weight, probe.weight)


# ---------------------------------------------------------------------------
# curves


def test_eval_curve_oracle_near_self_distance(dataset, probe, tmp_path):
    # An exact sampler at w=1 should sit within 2x of the distance between
    # two independent ground-truth draws of the same size.
    oracle = BayesDenoiser(dataset.mixtures, SCHED)
    pts = eval_curve(
        oracle, SCHED, dataset, probe, steps=50, w_list=(1.0,),
        n_samples=2048, seed=0, out_dir=tmp_path, label="oracle",
    )
    ref_a, _ = dataset.reference_sample(2048, seed=101)
    ref_b, _ = dataset.reference_sample(2048, seed=202)
    self_dist = distribution_distance(ref_a, ref_b)
    assert pts[0].dist <= 2.0 * self_dist
    assert pts[0].consistency >= 0.9
    assert (tmp_path / "oracle.csv").exists()
    assert (tmp_path / "oracle.png").exists()


def test_curve_csv_roundtrip_and_determinism(tmp_path):
    pts = [TradeoffPoint(1.0, 0.123456789, 0.9), TradeoffPoint(3.0, 0.2, 0.95)]
    p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
    write_curve_csv(p1, pts, steps=8, n_samples=100, seed=5, config_hash="abc")
    write_curve_csv(p2, pts, steps=8, n_samples=100, seed=5, config_hash="abc")
    assert p1.read_bytes() == p2.read_bytes()
    back = read_curve_csv(p1)
    assert back == pts
    assert "config_hash=abc" in p1.read_text().splitlines()[0]
    assert p1.read_text().splitlines()[1] == "w,dist,consistency,steps,n_samples,seed"
