import numpy as np
import pytest

from gnerflab import metrics as mt

RNG = np.random.default_rng(23)


def test_psnr_identical_images_capped():
    a = RNG.uniform(0, 1, size=(16, 16, 3))
    assert mt.psnr(a, a) == 99.0


def test_psnr_constant_offset_closed_form():
    a = np.full((8, 8, 3), 0.4)
    b = a + 0.1
    assert mt.psnr(a, b) == pytest.approx(20.0, abs=1e-9)
    c = a + 0.05
    assert mt.psnr(a, c) == pytest.approx(20.0 + 20.0 * np.log10(2.0), abs=1e-9)


def test_psnr_monotone_in_error_scale():
    a = RNG.uniform(0, 1, size=(12, 12, 3))
    err = RNG.uniform(-0.1, 0.1, size=a.shape)
    values = [mt.psnr(a, a + s * err) for s in (0.25, 0.5, 1.0)]
    assert values[0] > values[1] > values[2]


def test_psnr_shape_mismatch():
    with pytest.raises(ValueError):
        mt.psnr(np.zeros((4, 4)), np.zeros((5, 4)))


def test_ssim_self_is_one():
    a = RNG.uniform(0, 1, size=(16, 16, 3))
    assert mt.ssim(a, a) == pytest.approx(1.0, abs=1e-12)


def test_ssim_symmetry():
    a = RNG.uniform(0, 1, size=(16, 16, 3))
    b = RNG.uniform(0, 1, size=(16, 16, 3))
    assert mt.ssim(a, b) == pytest.approx(mt.ssim(b, a), abs=1e-9)


def test_ssim_inverted_checkerboard_negative():
    u, v = np.meshgrid(np.arange(16), np.arange(16))
    a = ((u + v) % 2).astype(np.float64)
    b = 1.0 - a
    assert mt.ssim(a, b) < 0


def test_ssim_matches_brute_force_single_window():
    """Direct-formula oracle on one 11x11 tile."""
    a = RNG.uniform(0, 1, size=(11, 11))
    b = RNG.uniform(0, 1, size=(11, 11))
    w = mt._gaussian_window()
    mx = (w * a).sum()
    my = (w * b).sum()
    vx = (w * a * a).sum() - mx ** 2
    vy = (w * b * b).sum() - my ** 2
    cxy = (w * a * b).sum() - mx * my
    c1 = (0.01) ** 2
    c2 = (0.03) ** 2
    expect = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2))
    assert mt.ssim(a, b) == pytest.approx(expect, abs=1e-12)


def test_ssim_rejects_small_images():
    with pytest.raises(ValueError):
        mt.ssim(np.zeros((8, 8)), np.zeros((8, 8)))


def test_ssim_bounded_above_with_equality_iff_equal():
    a = RNG.uniform(0, 1, size=(16, 16))
    b = a.copy()
    b[3, 3] += 0.2
    assert mt.ssim(a, b) < 1.0 - 1e-9


def test_metrics_row_validation():
    with pytest.raises(ValueError):
        mt.MetricsRow("s", "0", "clean", 0.0, psnr=120.0, ssim=0.5)
    with pytest.raises(ValueError):
        mt.MetricsRow("s", "0", "clean", 0.0, psnr=30.0, ssim=1.5)


def test_write_report_single_row(tmp_path):
    path = tmp_path / "report.csv"
    rows = [mt.MetricsRow("sceneA", "3", "clean", 0.0, 31.5, 0.93)]
    mt.write_report(rows, str(path))
    lines = path.read_text().splitlines()
    assert lines[0] == mt.CSV_HEADER
    assert len(lines) == 3  # header + data + aggregate
    assert lines[2].startswith("ALL,mean,clean")


def test_write_report_aggregate_mean(tmp_path):
    path = tmp_path / "report.csv"
    rows = [mt.MetricsRow("a", "0", "attacked", 8 / 255, 10.0, 0.5),
            mt.MetricsRow("b", "0", "attacked", 8 / 255, 20.0, 0.7)]
    mt.write_report(rows, str(path))
    agg = [l for l in path.read_text().splitlines() if l.startswith("ALL")][0]
    assert ",15.0000," in agg


def test_write_report_deterministic_bytes(tmp_path):
    rows = [mt.MetricsRow("b", "1", "clean", 0.0, 25.0, 0.9),
            mt.MetricsRow("a", "0", "attacked", 8 / 255, 12.0, 0.4)]
    p1, p2 = tmp_path / "r1.csv", tmp_path / "r2.csv"
    mt.write_report(rows, str(p1))
    mt.write_report(list(reversed(rows)), str(p2))
    assert p1.read_bytes() == p2.read_bytes()


def test_write_report_empty_rejected(tmp_path):
    with pytest.raises(ValueError):
        mt.write_report([], str(tmp_path / "x.csv"))
