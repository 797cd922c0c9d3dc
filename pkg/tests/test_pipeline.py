import json
import shlex
import sys
from pathlib import Path

import numpy as np
import pytest
from plyfile import PlyData, PlyElement

from conftest import make_cloud
from gsmc import codec
from gsmc.container import pack_container, unpack_container
from gsmc.errors import ConfigError, ContainerError, DataError
from gsmc.mapping import read_quantized
from gsmc.models import PROPERTY_NAMES, AttributeMapSet, GroupRange, ImageEntry
from gsmc.pipeline import EncodeConfig, decode_container, encode_cloud, run_decode, run_encode
from gsmc.ply import load_cloud, save_cloud
from gsmc.synthetic import generate_cloud

LOSSLESS_45 = dict(k=45, threads=2)


def test_defaults_reproduce_main_configuration():
    config = EncodeConfig()
    assert config.k == 12
    assert config.pca_mode == "joint"
    assert config.schedule().block_sizes == [4]
    assert config.schedule().iterations_per_size == 1
    assert all(entry.mode == "lossless" for entry in config.image_entries())
    assert len(config.image_entries()) == 11


def test_config_rejects_lossy_coordinates():
    with pytest.raises(ConfigError):
        EncodeConfig(qp={"positions": 2})
    with pytest.raises(ConfigError):
        EncodeConfig(qp={"colour": 2})
    with pytest.raises(ConfigError):
        EncodeConfig(k=10)
    with pytest.raises(ConfigError):
        EncodeConfig(mbs=3)


def test_config_file_and_overrides(tmp_path: Path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"k": 24, "mbs": 8, "qp": {"ac": 3}, "block_sizes": [8, 4]}))
    config = EncodeConfig.from_file(path, seed=5)
    assert config.k == 24
    assert config.seed == 5
    assert config.schedule().block_sizes == [8, 4]
    assert config.image_entries()[3].mode == "lossy"
    assert config.group_qp("positions") == 0

    path.write_text(json.dumps({"kay": 24}))
    with pytest.raises(ConfigError):
        EncodeConfig.from_file(path)


@pytest.mark.parametrize("count", [1, 100, 10_000, 100_000, 100_007])
def test_lossless_roundtrip_reproduces_quantized_cloud(count):
    cloud = generate_cloud(count, seed=count)
    result = encode_cloud(cloud, EncodeConfig(**LOSSLESS_45))
    decoded = decode_container(result.data, threads=2)

    reference = result.reference()
    assert decoded.n == count
    assert decoded.same_point_set(reference)

    manifest, _ = unpack_container(result.data)
    assert manifest.k == 45 and len(manifest.images) == 22
    maps = AttributeMapSet(images=result.maps.images, n_real=count, side=manifest.side)
    assert np.array_equal(
        np.sort(read_quantized(maps, 45)["positions"], axis=0),
        np.sort(result.quantized["positions"], axis=0),
    )


@pytest.mark.parametrize("mode", ["joint", "per-color", "order-clip"])
def test_every_pca_mode_roundtrips(mode):
    cloud = make_cloud(300, seed=2)
    result = encode_cloud(cloud, EncodeConfig(k=12, pca_mode=mode))
    decoded = decode_container(result.data)
    assert result.manifest.pca_mode == mode
    assert decoded.same_point_set(result.reference())


def test_miniplas_does_not_change_the_point_set():
    cloud = generate_cloud(2000, seed=3)
    plain = encode_cloud(cloud, EncodeConfig(k=45, mbs=4, block_sizes=None, iterations=1))
    heavy = encode_cloud(cloud, EncodeConfig(k=45, mbs=16, iterations=2, seed=9))
    assert decode_container(plain.data).same_point_set(decode_container(heavy.data))


def test_rate_guard_bounds_the_refined_maps():
    cloud = generate_cloud(4096, seed=8)
    guarded = encode_cloud(cloud, EncodeConfig(k=12)).report.miniplas
    assert guarded.final_bytes <= guarded.initial_bytes
    assert all(record.bytes_before is not None for record in guarded.passes)
    unguarded = encode_cloud(cloud, EncodeConfig.from_json({"k": 12, "rate_guard": False})).report.miniplas
    assert unguarded.initial_bytes is None
    assert all(record.bytes_after is None for record in unguarded.passes)


def test_single_primitive_falls_back_to_order_clip(caplog):
    cloud = make_cloud(1)
    with caplog.at_level("WARNING"):
        result = encode_cloud(cloud, EncodeConfig(k=12))
    assert result.manifest.pca_mode == "order-clip"
    assert "order-clip" in caplog.text
    decoded = decode_container(result.data)
    assert decoded.equals(result.reference())
    assert result.manifest.side == 1


@pytest.mark.parametrize("qp", [4])
def test_lossy_keeps_coordinates_exact(qp):
    cloud = generate_cloud(3000, seed=4)
    result = encode_cloud(cloud, EncodeConfig(k=12, qp={"sh_dc": qp, "ac": qp, "scale": qp}))
    decoded = decode_container(result.data)
    reference = result.reference()
    order = np.lexsort(reference.positions.T)
    decoded_order = np.lexsort(decoded.positions.T)
    assert np.array_equal(reference.positions[order], decoded.positions[decoded_order])


def test_container_shrinks_as_qp_grows():
    cloud = generate_cloud(5000, seed=5)
    sizes = []
    for qp in (0, 2, 4, 6):
        config = EncodeConfig(k=12, qp={group: qp for group in ("sh_dc", "ac", "opacity", "scale", "rotation")})
        sizes.append(len(encode_cloud(cloud, config).data))
    assert sizes == sorted(sizes, reverse=True)
    assert len(set(sizes)) == 4


def test_report_has_map_generation_shape():
    cloud = generate_cloud(4096, seed=6)
    report = encode_cloud(cloud, EncodeConfig(k=12, mbs=64)).report
    times = report.map_generation_times()
    assert list(times) == ["Morton3D", "Morton2D", "PCA", "MiniPLAS", "All"]
    assert times["All"] == pytest.approx(sum(times[stage] for stage in list(times)[:4]))
    # 64 x 64 grid hosts every block size of the mbs=64 schedule.
    assert [record.block_size for record in report.miniplas.passes] == [64, 32, 16, 8, 4]
    assert report.bitrate.total_bytes > 0
    payload = report.as_json()
    assert json.dumps(payload)


def test_encoding_is_byte_reproducible():
    cloud = generate_cloud(1500, seed=7)
    first = encode_cloud(cloud, EncodeConfig(k=12, mbs=8, seed=2, threads=1))
    second = encode_cloud(cloud, EncodeConfig(k=12, mbs=8, seed=2, threads=4))
    assert first.data == second.data


def test_stage_attribution_names_the_failing_stage():
    cloud = make_cloud(10)
    config = EncodeConfig(k=12, weights={"ac": 1.0})
    config.weights["scale"] = -1.0
    with pytest.raises(ConfigError, match="^MiniPLAS: "):
        encode_cloud(cloud, config)


def test_run_encode_and_decode_files(tmp_path: Path):
    cloud = generate_cloud(500, seed=8)
    source = tmp_path / "scene.ply"
    save_cloud(cloud, source)

    result = run_encode(EncodeConfig(input=source, output=tmp_path / "scene.gsmc", k=45))
    first = tmp_path / "first.ply"
    second = tmp_path / "second.ply"
    run_decode(tmp_path / "scene.gsmc", first)
    run_decode(tmp_path / "scene.gsmc", second)

    assert first.read_bytes() == second.read_bytes()
    assert load_cloud(first).same_point_set(result.reference())


def test_truncated_container_leaves_no_output(tmp_path: Path):
    result = encode_cloud(make_cloud(64), EncodeConfig())
    broken = tmp_path / "broken.gsmc"
    broken.write_bytes(result.data[: len(result.data) // 2])
    output = tmp_path / "out.ply"
    with pytest.raises(ContainerError):
        run_decode(broken, output)
    assert not output.exists()


def test_pca_block_must_agree_with_manifest():
    result = encode_cloud(make_cloud(64), EncodeConfig(k=12))
    manifest, blocks = unpack_container(result.data)
    manifest.k = 15
    ac = manifest.quantization["ac"]
    manifest.quantization.groups["ac"] = GroupRange(
        minimum=np.append(ac.minimum, [0.0] * 3), maximum=np.append(ac.maximum, [1.0] * 3), bits=10
    )
    manifest.images.append(ImageEntry(tag="ac_4", mode="lossless", qp=0))
    blocks["ac_4"] = blocks["ac_0"]
    data = pack_container(manifest, blocks)
    with pytest.raises(ContainerError, match="PCA block"):
        decode_container(data)


def test_non_finite_cloud_cannot_be_encoded(tmp_path: Path):
    matrix = make_cloud(4).to_matrix()
    matrix[2, 0] = np.nan
    path = tmp_path / "nan.ply"
    records = np.empty(4, dtype=[(name, "<f4") for name in PROPERTY_NAMES])
    for column, name in enumerate(PROPERTY_NAMES):
        records[name] = matrix[:, column]
    PlyData([PlyElement.describe(records, "vertex")], text=False, byte_order="<").write(str(path))

    with pytest.raises(DataError):
        run_encode(EncodeConfig(input=path, output=tmp_path / "nan.gsmc"))
    assert not (tmp_path / "nan.gsmc").exists()


def test_external_backend_end_to_end():
    copy = f"{shlex.quote(sys.executable)} -c \"import shutil, sys; shutil.copyfile(sys.argv[1], sys.argv[2])\""
    backend = codec.CodecBackend(
        kind="external",
        encode_cmd=copy + " {in} {out} {w} {h} {qp} {lossless}",
        decode_cmd=copy + " {in} {out}",
        max_procs=2,
    )
    codec.set_backend_for_testing(backend)
    cloud = make_cloud(50, seed=11)
    result = encode_cloud(cloud, EncodeConfig(k=12, backend="external"))
    assert result.manifest.backend == "external"
    assert decode_container(result.data).same_point_set(result.reference())
