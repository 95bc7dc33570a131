import numpy as np
import pytest

from csidn import datagen, rng
from csidn.errors import ConfigError, DataError, ParseError, SchemaError, ValidationError


def _ring(angles, radius=2.0, label=0, n_classes=3):
    x = radius * np.column_stack([np.cos(angles), np.sin(angles)])
    y = np.full(len(angles), label)
    return datagen.Dataset(x, y, y.copy(), None, n_classes)


# ---------------------------------------------------------------- streams


def test_point_stream_is_shardable():
    serial = rng.point_uniforms(7, rng.CORRUPT, 0, 1000)
    parts = [rng.point_uniforms(7, rng.CORRUPT, a, b) for a, b in [(0, 1), (1, 333), (333, 1000)]]
    np.testing.assert_array_equal(serial, np.concatenate(parts))


def test_streams_are_independent():
    a = rng.point_uniforms(0, rng.CIRCLES, 0, 10)
    b = rng.point_uniforms(0, rng.CORRUPT, 0, 10)
    c = rng.point_uniforms(1, rng.CIRCLES, 0, 10)
    assert not np.array_equal(a, b) and not np.array_equal(a, c)


# ---------------------------------------------------------------- circles


def test_circles_deterministic():
    spec = datagen.CirclesSpec(n_per_class=100, seed=9)
    assert datagen.gen_circles(spec) == datagen.gen_circles(spec)
    assert not np.array_equal(datagen.gen_circles(spec).x, datagen.gen_circles_test(spec).x)


def test_zero_sigma_lies_on_rings():
    spec = datagen.CirclesSpec(sigma_r=0.0, n_per_class=50)
    d = datagen.gen_circles(spec)
    np.testing.assert_allclose(np.linalg.norm(d.x, axis=1), np.asarray(spec.radii)[d.y_clean], rtol=1e-12)


def test_circles_shape_and_balance():
    d = datagen.gen_circles(datagen.CirclesSpec(n_per_class=40))
    assert d.x.shape == (120, 2)
    np.testing.assert_array_equal(np.bincount(d.y_clean), [40, 40, 40])
    assert np.array_equal(d.y_noisy, d.y_clean) and np.all(d.r == 1)


def test_circles_spec_validation():
    with pytest.raises(ValidationError):
        datagen.CirclesSpec(radii=(2.0, 1.0))
    with pytest.raises(ValidationError):
        datagen.CirclesSpec(sigma_r=-0.1)


def test_posterior_matches_class_means():
    spec = datagen.CirclesSpec()
    post = datagen.circles_posterior([[0, 1.0], [0, 2.0], [3.0, 0], [0, 1.5]], spec)
    np.testing.assert_array_equal(post[:3].argmax(axis=1), [0, 1, 2])
    np.testing.assert_allclose(post[3, 0], post[3, 1], rtol=1e-9)


# ------------------------------------------------------------ flip law


@pytest.mark.parametrize("x, rho, want", [((0, 2), 0.5, 0.5), ((0, -1), 0.7, 0.0), ((1, 0), 0.5, 0.25), ((0, 0), 0.6, 0.3)])
def test_flip_prob_examples(x, rho, want):
    assert datagen.idn_flip_prob(np.array(x, float), (0, 1), rho) == pytest.approx(want, abs=1e-15)


def test_transition_law_rows_are_stochastic(small_circles):
    spec, d = small_circles
    T = datagen.transition_law(d.x, datagen.NoiseSpec(rho=0.8), 3)
    np.testing.assert_allclose(T.sum(axis=2), 1.0, atol=1e-12)
    p = datagen.idn_flip_prob(d.x, (0, 1), 0.8)
    np.testing.assert_allclose(T[:, 0, 1], p / 2)


def test_clean_kind_is_identity(small_circles):
    spec, d = small_circles
    out = datagen.corrupt(d, datagen.NoiseSpec("clean"))
    assert np.array_equal(out.y_noisy, d.y_clean) and np.all(out.r == 1)


def test_uniform_angles_flip_half():
    n = 20000
    d = _ring(2 * np.pi * (np.arange(n) + 0.5) / n)
    out = datagen.corrupt(d, datagen.NoiseSpec("idn", rho=1.0, seed=1))
    assert abs(datagen.noise_rate(out) - 0.5) <= 0.02


def test_ccn_row_rates():
    M = np.full((3, 3), 0.2)
    np.fill_diagonal(M, 0.6)
    y = np.repeat(np.arange(3), 10000)
    d = datagen.Dataset(np.zeros((y.size, 2)), y, y.copy(), None, 3)
    out = datagen.corrupt(d, datagen.NoiseSpec("ccn", matrix=M.tolist(), seed=2))
    for k in range(3):
        sel = out.y_clean == k
        assert abs(np.mean(out.y_noisy[sel] != k) - 0.4) <= 0.02
        for j in range(3):
            if j != k:
                assert abs(np.mean(out.y_noisy[sel] == j) - 0.2) <= 0.02


@pytest.mark.parametrize("angle", [-np.pi / 2, -np.pi / 6, 0.0, np.pi / 4, np.pi / 2 - 0.01])
def test_flip_frequency_per_cosine_band(angle):
    n = 10000
    angles = angle + np.linspace(-0.01, 0.01, n)
    d = _ring(angles)
    out = datagen.corrupt(d, datagen.NoiseSpec("idn", rho=0.8, seed=4))
    want = datagen.idn_flip_prob(d.x, (0, 1), 0.8).mean()
    assert abs(np.mean(out.y_noisy != 0) - want) <= 0.03


def test_corruption_preserves_features(small_circles):
    spec, d = small_circles
    out = datagen.corrupt_circles(d, spec, datagen.NoiseSpec(rho=0.9, seed=1))
    assert out.x is d.x or np.array_equal(out.x, d.x)
    assert np.array_equal(out.y_clean, d.y_clean)
    assert datagen.noise_rate(out) > 0.1


def test_corrupt_deterministic(small_circles):
    spec, d = small_circles
    ns = datagen.NoiseSpec(rho=0.5, seed=3)
    assert datagen.corrupt_circles(d, spec, ns) == datagen.corrupt_circles(d, spec, ns)


def test_noise_spec_validation():
    with pytest.raises(ValidationError, match="rho"):
        datagen.NoiseSpec(rho=1.5)
    with pytest.raises(ValidationError):
        datagen.NoiseSpec("ccn")
    assert datagen.NoiseSpec(w=(0, 3)).w == (0.0, 1.0)


# ---------------------------------------------------------- confidences


def test_confidence_is_one_without_flips():
    x = np.array([[0.0, -2.0]])
    post = datagen.circles_posterior(x, datagen.CirclesSpec())
    for mode in datagen.CONFIDENCE_MODES:
        ns = datagen.NoiseSpec(rho=0.7, confidence_mode=mode)
        assert datagen.compute_confidence(x, [1], ns, post)[0] == pytest.approx(1.0)


def test_keep_probability_mode():
    ns = datagen.NoiseSpec(rho=0.6, confidence_mode="keep-probability")
    # cos = 0 gives p = 0.3
    assert datagen.compute_confidence(np.array([[2.0, 0.0]]), [0], ns)[0] == pytest.approx(0.7)


@pytest.mark.parametrize("y_obs", [0, 1, 2])
def test_exact_confidence_monte_carlo(y_obs):
    """Draw Y from the clean posterior, flip by the law, and count how often Y equals the observed label."""
    spec = datagen.CirclesSpec()
    x = np.array([[1.05, 1.05]])  # radius ~1.48, between rings 0 and 1
    ns = datagen.NoiseSpec(rho=0.6)
    post = datagen.circles_posterior(x, spec)[0]
    p = datagen.idn_flip_prob(x[0], ns.w, ns.rho)
    g = np.random.default_rng(100 + y_obs)
    n = 400000
    y = g.choice(3, size=n, p=post)
    flip = g.uniform(size=n) < p
    y_noisy = np.where(flip, (y + g.integers(1, 3, size=n)) % 3, y)
    seen = y_noisy == y_obs
    assert seen.sum() >= 10000
    empirical = np.mean(y[seen] == y_obs)
    r = datagen.compute_confidence(x, [y_obs], ns, post[None])[0]
    assert abs(r - empirical) <= 0.03


def test_exact_confidences_are_calibrated():
    # wide rings overlap, which spreads r across the unit interval
    spec = datagen.CirclesSpec(sigma_r=0.5, n_per_class=20000, seed=5)
    d = datagen.corrupt_circles(datagen.gen_circles(spec), spec, datagen.NoiseSpec(rho=0.6, seed=5))
    correct = d.y_noisy == d.y_clean
    checked = 0
    for lo in np.arange(0.0, 1.0, 0.05):
        band = (d.r >= lo) & (d.r < lo + 0.05)
        if band.sum() >= 300:
            assert abs(correct[band].mean() - (lo + 0.025)) <= 0.05
            checked += 1
    assert checked >= 4


def test_exact_mode_needs_posterior():
    with pytest.raises(ValidationError):
        datagen.compute_confidence(np.zeros((1, 2)), [0], datagen.NoiseSpec(rho=0.2))


def test_perturb_confidence():
    r = np.linspace(0, 1, 1000)
    np.testing.assert_array_equal(datagen.perturb_confidence(r, 0.0, 1), r)
    out = datagen.perturb_confidence(r, 0.6, 1)
    assert out.min() >= 0 and out.max() <= 1
    assert not np.array_equal(out, r)
    np.testing.assert_array_equal(out, datagen.perturb_confidence(r, 0.6, 1))


def test_dataset_validation():
    with pytest.raises(DataError):
        datagen.Dataset(np.zeros((3, 2)), [0, 1, 2], r=[0.5, 1.2, 0.0])
    with pytest.raises(DataError):
        datagen.Dataset(np.zeros((3, 2)), [0, 1])


# ------------------------------------------------------------------- csv


def test_csv_round_trip(tmp_path, small_circles):
    spec, d = small_circles
    noisy = datagen.corrupt_circles(d, spec, datagen.NoiseSpec(rho=0.5))
    path = tmp_path / "d.csv"
    datagen.write_csv(noisy, path)
    back = datagen.read_csv(path, require_confidence=True)
    assert np.array_equal(back.y_noisy, noisy.y_noisy) and np.array_equal(back.y_clean, noisy.y_clean)
    np.testing.assert_allclose(back.x, noisy.x, rtol=1e-8)
    np.testing.assert_allclose(back.r, noisy.r, rtol=1e-8, atol=1e-12)
    # a second pass is exact
    datagen.write_csv(back, tmp_path / "e.csv")
    assert datagen.read_csv(tmp_path / "e.csv") == back
    assert (tmp_path / "e.csv").read_bytes() == path.read_bytes()


def test_csv_header_only(tmp_path):
    path = tmp_path / "h.csv"
    path.write_text("x0,x1,y_noisy,r\n")
    d = datagen.read_csv(path)
    assert len(d) == 0 and d.dim == 2


def test_csv_missing_confidence(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("x0,x1,y_noisy\n0.5,0.5,1\n")
    with pytest.raises(SchemaError, match="'r'"):
        datagen.read_csv(path, require_confidence=True)
    assert datagen.read_csv(path).r is None


def test_csv_bad_row_reports_line(tmp_path):
    path = tmp_path / "b.csv"
    path.write_text("x0,x1,y_noisy\n0.5,0.5,1\n0.1,oops,0\n")
    with pytest.raises(ParseError) as info:
        datagen.read_csv(path)
    assert info.value.line == 3
    path.write_text("x0,x1,y_noisy\n0.5,1\n")
    with pytest.raises(ParseError, match="line 2"):
        datagen.read_csv(path)


def test_csv_bad_header(tmp_path):
    path = tmp_path / "b.csv"
    path.write_text("a,b,label\n")
    with pytest.raises(SchemaError):
        datagen.read_csv(path)


# ------------------------------------------------------------ pseudo-labels


def _digits_splits(clean_size, seed=0):
    source = datagen.load_digits_dataset()
    return datagen.split(source, [clean_size, 200, 600], seed, balanced_first=True)


def test_balanced_split_covers_classes():
    clean, valid, pool = _digits_splits(20)
    assert set(clean.y_noisy.tolist()) == set(range(10))
    assert len(clean) == 20 and len(valid) == 200 and len(pool) == 600


def test_split_is_disjoint():
    d = datagen.gen_circles(datagen.CirclesSpec(n_per_class=50))
    a, b = datagen.split(d, [40, 60], seed=1)
    rows = {tuple(v) for v in a.x} & {tuple(v) for v in b.x}
    assert not rows
    with pytest.raises(ConfigError):
        datagen.split(d, [100, 100], seed=1)


def test_pipeline_forced_unit_temperature_is_plain_argmax():
    clean, valid, pool = _digits_splits(50)
    out, report, model = datagen.pseudo_label_pipeline(clean, valid, pool, hidden=(32,), epochs=20, temperature=1.0)
    probs = model.forward(pool.x)
    np.testing.assert_array_equal(out.y_noisy, probs.argmax(axis=1))
    np.testing.assert_array_equal(out.r, probs.max(axis=1))
    assert report.temperature == 1.0 and report.ece_calibrated == report.ece_uncalibrated


def test_pipeline_memorized_point_is_confident():
    spec = datagen.CirclesSpec(sigma_r=0.05, n_per_class=40, seed=2)
    data = datagen.gen_circles(spec)
    clean, valid = datagen.split(data, [60, 60], seed=0, balanced_first=True)
    pool = clean.take(np.arange(10))
    out, report, _ = datagen.pseudo_label_pipeline(clean, valid, pool, hidden=(64, 64), epochs=300, batch_size=16)
    assert np.array_equal(out.y_noisy, pool.y_clean)
    assert np.all(out.r >= 0.9)


def test_pipeline_larger_clean_subset_is_not_noisier():
    rates = []
    for size in (50, 500):
        source = datagen.load_digits_dataset()
        clean, valid, pool = datagen.split(source, [size, 200, 800], 0, balanced_first=True)
        out, report, _ = datagen.pseudo_label_pipeline(clean, valid, pool, hidden=(64,), epochs=60)
        rates.append(report.noise_rate)
    assert rates[1] <= rates[0]


def test_pipeline_missing_class():
    clean, valid, pool = _digits_splits(50)
    keep = np.flatnonzero(clean.y_noisy != 3)
    with pytest.raises(ConfigError, match=r"\[3\]"):
        datagen.pseudo_label_pipeline(clean.take(keep), valid, pool, epochs=1)
