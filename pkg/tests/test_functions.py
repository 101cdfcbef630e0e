import numpy as np
import pytest

from d2no.functions import (
    FunctionSet,
    GrfSpec,
    PeakFamilySpec,
    RegularityFamilySpec,
    SensorPlacement,
    bumps,
    grf_factor,
    grf_sample,
    load_function_set,
    peak_family_sample,
    peak_function_sample,
    peak_parameters,
    place_sensors,
    rbf_kernel,
    regularity_sample,
    save_function_set,
    total_variation,
)


def test_rbf_kernel_values():
    assert rbf_kernel(0.3, 0.3, 0.1) == 1.0
    assert rbf_kernel(0.0, 0.5, 0.5) == pytest.approx(0.6065306597126334, abs=1e-15)
    assert rbf_kernel(0.2, 0.9, 0.4) == rbf_kernel(0.9, 0.2, 0.4)
    with pytest.raises(ValueError):
        rbf_kernel(0, 1, 0.0)


def test_grf_deterministic_and_prefix_stable():
    spec = GrfSpec(0.3, resolution=64)
    a, b = grf_sample(spec, 5, 11), grf_sample(spec, 5, 11)
    assert np.array_equal(a.values, b.values)
    tail = grf_sample(spec, 2, 11, start=3)
    assert np.array_equal(a.values[3:], tail.values)
    assert not np.array_equal(a.values, grf_sample(spec, 5, 12).values)


def test_grf_rejects_empty_and_bad_specs():
    with pytest.raises(ValueError):
        grf_sample(GrfSpec(0.5, resolution=16), 0, 0)
    with pytest.raises(ValueError):
        GrfSpec(-1.0)
    with pytest.raises(ValueError):
        GrfSpec(1.0, domain=(1.0, 0.0))


def test_grf_cholesky_small_length_scale_dense_grid():
    # ill-conditioned kernel; the jitter ladder must still give a valid factor
    L = grf_factor(GrfSpec(0.1, resolution=1000))
    assert np.all(np.isfinite(L))
    assert np.allclose(np.sum(L * L, axis=1), 1.0, atol=1e-6)


def test_grf_long_length_scale_is_nearly_constant():
    fs = grf_sample(GrfSpec(1000.0, resolution=200), 50, 3)
    spread = fs.values.max(axis=1) - fs.values.min(axis=1)
    assert np.all(spread < 0.01 * fs.values.std())


@pytest.mark.parametrize("ls", [0.1, 1.0])
def test_grf_covariance_monte_carlo(ls):
    n = 20000
    spec = GrfSpec(ls, resolution=101)
    fs = grf_sample(spec, n, 5)
    x = spec.grid
    for i, j in [(10, 10), (10, 15), (40, 60)]:
        rho = rbf_kernel(x[i], x[j], ls)
        est = np.mean(fs.values[:, i] * fs.values[:, j])
        sigma = np.sqrt((1 + rho**2) / n)
        assert abs(est - rho) < 3 * sigma


def test_grf_roughness_ordering():
    rough = total_variation(grf_sample(GrfSpec(0.1), 200, 1)).mean()
    smooth = total_variation(grf_sample(GrfSpec(1.0), 200, 1)).mean()
    assert rough > 2 * smooth


def test_peaks_zero_peaks_is_baseline():
    spec = PeakFamilySpec(n_peaks=(0, 0), baseline=0.4)
    f = peak_function_sample(spec, 0, 9)
    assert np.all(f.values == 0.4)


def test_single_peak_height_at_center():
    spec = PeakFamilySpec(n_peaks=(1, 1), width=(0.05, 0.05), amplitude=(1.0, 1.0),
                          random_sign=False, baseline=0.2)
    p = peak_parameters(spec, 0, 4)
    value = spec.baseline + bumps(p.centers, p.centers, p.widths, p.amplitudes)
    assert abs(value[0] - 1.2) < 1e-6
    f = peak_function_sample(spec, 0, 4)
    assert f.values.max() <= 1.2 + 1e-12
    assert abs(f.grid[np.argmax(f.values)] - p.centers[0]) < f.grid[1] - f.grid[0]


def test_peak_centers_stay_in_region():
    spec = PeakFamilySpec()
    for cluster in (0, 1):
        lo, hi = spec.regions[cluster]
        for i in range(1000):
            c = peak_parameters(spec, cluster, 21, i).centers
            assert np.all((c >= lo) & (c <= hi))
    with pytest.raises(ValueError):
        peak_parameters(spec, 2, 0)


def test_peak_family_is_localized():
    spec = PeakFamilySpec(width=(0.03, 0.08))
    fs = peak_family_sample(spec, 1, 50, 2)
    lo, hi = spec.regions[1]
    outside = (fs.grid < lo - 0.5) | (fs.grid > hi + 0.5)
    assert np.abs(fs.values[:, outside]).max() < 1e-6


def test_peak_spec_validation():
    with pytest.raises(ValueError):
        PeakFamilySpec(regions=((0.5, 2.0), (1.5, 3.0)))
    with pytest.raises(ValueError):
        PeakFamilySpec(width=(0.0, 0.1))


def test_regularity_families():
    hump = regularity_sample(RegularityFamilySpec("hump"), 40, 0)
    smooth = regularity_sample(RegularityFamilySpec("smooth"), 40, 0)
    assert np.allclose(smooth.values[:, 0], smooth.values[:, -1], atol=1e-12)
    # centres sit >= 4 max-widths from the ends: each hump is below a*exp(-8) there
    assert np.abs(hump.values[:, [0, -1]]).max() < 3 * 1.5 * np.exp(-8.0)
    # energy above the smooth family's highest mode: none for smooth, substantial for humps
    def high_share(fs):
        c = np.abs(np.fft.rfft(fs.values[:, :-1], axis=1)) ** 2
        return c[:, 3:].sum(axis=1) / c.sum(axis=1)
    assert high_share(smooth).max() < 1e-20
    assert high_share(hump).mean() > 0.3
    assert RegularityFamilySpec().wavelength_ratio() > 10
    with pytest.raises(ValueError):
        RegularityFamilySpec("jagged")


def test_place_sensors():
    g = place_sensors(SensorPlacement("uniform", 2), (0.0, 1.0))
    assert g.locations.tolist() == [0.0, 1.0]
    g6 = place_sensors(SensorPlacement("uniform", 6), (0.0, 2 * np.pi))
    assert np.allclose(np.diff(g6.locations), 2 * np.pi / 5, rtol=0, atol=1e-15)
    gc = place_sensors(SensorPlacement("clustered", 10, (1.0, 2.0)), (0.0, 2 * np.pi))
    assert gc.count == 10 and gc.locations.min() >= 1 and gc.locations.max() <= 2
    ge = place_sensors(SensorPlacement("explicit", locations=(0.5, 0.1)), (0.0, 1.0))
    assert ge.locations.tolist() == [0.1, 0.5]
    with pytest.raises(ValueError):
        place_sensors(SensorPlacement("clustered", 4, (5.0, 7.0)), (0.0, 2 * np.pi))
    with pytest.raises(ValueError):
        SensorPlacement("uniform", 0)
    assert SensorPlacement.from_dict({"kind": "clustered", "m": 3, "region": [0, 1]}).region == (0, 1)


def test_function_set_io_roundtrip(tmp_path):
    fs = grf_sample(GrfSpec(0.2, resolution=50), 4, 8)
    save_function_set(tmp_path / "f.csv", fs)
    back = load_function_set(tmp_path / "f.csv")
    assert np.array_equal(back.values, fs.values)
    assert np.array_equal(back.grid, fs.grid)
    assert back.meta["length_scale"] == 0.2
    with pytest.raises(ValueError):
        FunctionSet(np.arange(3.0), np.zeros((2, 4)))
