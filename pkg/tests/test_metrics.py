import json
import shlex
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from conftest import make_cloud
from gsmc import metrics
from gsmc.errors import BackendError, DataError
from gsmc.models import GaussianCloud
from gsmc.pipeline import EncodeConfig
from gsmc.ply import save_cloud
from gsmc.synthetic import generate_cloud, generate_random_cloud


def test_psnr_examples():
    assert metrics.psnr(np.zeros(4), np.zeros(4), 1.0) == float("inf")
    assert metrics.psnr(np.zeros(4), np.full(4, 0.1), 1.0) == pytest.approx(20.0)
    assert metrics.json_number(float("inf")) == "inf"
    assert metrics.json_number(1.5) == 1.5


def test_identical_clouds_report_infinite_psnr():
    cloud = make_cloud(200, seed=1)
    report = metrics.compare_clouds(cloud, cloud.take(np.arange(199, -1, -1)))
    assert report.matching == "nearest"
    assert report.attribute_psnr == float("inf")
    assert all(quality.max_error == 0.0 for quality in report.groups)
    payload = report.as_json()
    assert payload["attribute_psnr"] == "inf"
    assert json.dumps(payload)


def test_shared_positions_fall_back_to_morton_rank(caplog):
    matrix = make_cloud(50, seed=2).to_matrix()
    matrix[10, :3] = matrix[20, :3]
    cloud = GaussianCloud.from_matrix(matrix)
    with caplog.at_level("WARNING"):
        report = metrics.compare_clouds(cloud, cloud)
    assert report.matching == "morton-rank"
    assert report.ambiguous >= 1
    assert report.group("positions").max_error == 0.0
    assert "Morton rank" in caplog.text


def test_attribute_error_lowers_psnr():
    cloud = make_cloud(100, seed=3)
    noisy = replace(cloud, scale=cloud.scale + 0.05)
    report = metrics.compare_clouds(cloud, noisy)
    assert report.group("scale").psnr < float("inf")
    assert report.group("opacity").psnr == float("inf")
    assert report.attribute_psnr < float("inf")


def test_primitive_count_must_match():
    with pytest.raises(DataError):
        metrics.compare_clouds(make_cloud(10), make_cloud(11))


def test_qp_sweep_trades_bytes_for_quality():
    cloud = generate_cloud(3000, seed=4)
    points = metrics.qp_sweep(cloud, [0, 2, 4, 6], EncodeConfig(k=12))
    sizes = [point.total_bytes for point in points]
    quality = [point.attribute_psnr for point in points]
    assert all(a > b for a, b in zip(sizes, sizes[1:]))
    assert quality[0] == float("inf")
    assert all(a > b for a, b in zip(quality, quality[1:]))
    assert all(point.coordinate_max_error == 0.0 for point in points)


def test_layout_study_orders_layouts():
    cloud = generate_cloud(4096, seed=5)
    report = metrics.analyze_cloud(cloud, EncodeConfig(k=12, mbs=8))
    assert [row.layout for row in report.layouts] == ["random", "row-major", "morton2", "morton2+miniplas(8)"]
    assert report.side == 64
    assert report.row("morton2").smoothness < report.row("random").smoothness
    assert report.row("morton2").lossless_bytes < report.row("random").lossless_bytes
    assert report.row("morton2+miniplas(8)").smoothness <= report.row("morton2").smoothness
    assert report.row("morton2+miniplas(8)").lossless_bytes <= report.row("morton2").lossless_bytes
    assert set(report.evr) == {"joint", "per-color", "order-clip"}
    assert len(report.evr["joint"]) == 15
    assert report.evr["joint"][-1] == pytest.approx(1.0)
    assert json.dumps(report.as_json())


def test_miniplas_never_grows_lossless_maps():
    kept = 0
    for seed in range(10):
        report = metrics.analyze_cloud(generate_cloud(100_000, seed=seed), EncodeConfig(k=12, mbs=4, seed=seed))
        kept += report.row("morton2+miniplas(4)").lossless_bytes <= report.row("morton2").lossless_bytes
    assert kept >= 8


def test_correlated_sh_needs_fewer_components():
    clustered = metrics.cumulative_evr(generate_cloud(2000, seed=6))
    random = metrics.cumulative_evr(generate_random_cloud(2000, seed=6))
    # index 3 is k=12
    assert clustered["joint"][3] > random["joint"][3]
    assert clustered["joint"][3] >= clustered["order-clip"][3]


def test_single_primitive_skips_fitted_curves(caplog):
    with caplog.at_level("WARNING"):
        curves = metrics.cumulative_evr(make_cloud(1))
    assert list(curves) == ["order-clip"]


def test_render_hook_receives_both_paths(tmp_path: Path):
    original = tmp_path / "original.ply"
    decoded = tmp_path / "decoded.ply"
    cloud = make_cloud(20)
    save_cloud(cloud, original)
    save_cloud(cloud, decoded)
    command = (
        f"{shlex.quote(sys.executable)} -c \"import sys; print('rendered', len(sys.argv) - 1)\""
        " {original} {decoded}"
    )
    report = metrics.compare_files(original, decoded, render_cmd=command)
    assert report.render_output == "rendered 2"
    assert report.as_json()["render_output"] == "rendered 2"


def test_failing_render_hook_is_a_backend_error(tmp_path: Path):
    command = f"{shlex.quote(sys.executable)} -c \"import sys; sys.exit('no gpu')\" {{original}} {{decoded}}"
    with pytest.raises(BackendError, match="no gpu"):
        metrics.run_render_hook(command, tmp_path / "a.ply", tmp_path / "b.ply")
