import json
import struct
import zlib

import numpy as np
import pytest

from loopfit import cli, geometry, io
from loopfit import regressor as R
from loopfit import sdf_diffusion as sd

from meshes import tetrahedron


def write(path, text):
    path.write_text(text)
    return path


# -- meshes ----------------------------------------------------------------------------------------

def test_one_triangle_obj(tmp_path):
    v, f = io.load_mesh(write(tmp_path / "t.obj", "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n"))
    assert v.shape == (3, 3) and f.tolist() == [[0, 1, 2]]


def test_obj_quads_and_negative_indices(tmp_path):
    v, f = io.load_mesh(write(tmp_path / "q.obj", "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf -4 -3 -2 -1\n"))
    assert f.tolist() == [[0, 1, 2], [0, 2, 3]]


def test_obj_bad_index_names_the_line(tmp_path):
    path = write(tmp_path / "bad.obj", "# header\nv 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 4\n")
    with pytest.raises(io.ParseError, match="line 5"):
        io.load_mesh(path)


def test_float32_ply_round_trips_bit_exact(tmp_path, rng):
    v, f = tetrahedron()
    v = (v + rng.normal(0, 1e-3, v.shape)).astype(np.float32)
    first = tmp_path / "a.ply"
    io.save_mesh(first, v, f, dtype="f4")
    loaded, faces = io.load_mesh(first)
    assert np.array_equal(loaded.astype(np.float32), v) and np.array_equal(faces, f)
    second = tmp_path / "b.ply"
    io.save_mesh(second, loaded, faces, dtype="f4")
    assert first.read_bytes() == second.read_bytes()


def test_ascii_ply_with_extra_properties(tmp_path):
    text = ("ply\nformat ascii 1.0\nelement vertex 3\nproperty float nx\nproperty float x\n"
            "property float y\nproperty float z\nelement face 1\nproperty list uchar int vertex_indices\n"
            "end_header\n9 0 0 0\n9 1 0 0\n9 0 1 0\n3 0 1 2\n")
    v, f = io.load_mesh(write(tmp_path / "a.ply", text))
    np.testing.assert_array_equal(v, [[0, 0, 0], [1, 0, 0], [0, 1, 0]])
    assert f.tolist() == [[0, 1, 2]]


def test_big_endian_ply_reads_the_same_values(tmp_path, rng):
    v = rng.normal(size=(5, 3))
    header = ("ply\nformat binary_big_endian 1.0\nelement vertex 5\n"
              "property double x\nproperty double y\nproperty double z\nend_header\n").encode()
    (tmp_path / "be.ply").write_bytes(header + v.astype(">f8").tobytes())
    np.testing.assert_array_equal(io.load_points(tmp_path / "be.ply"), v)


def test_truncated_ply(tmp_path):
    header = b"ply\nformat binary_little_endian 1.0\nelement vertex 4\nproperty float x\nproperty float y\nproperty float z\nend_header\n"
    (tmp_path / "t.ply").write_bytes(header + b"\0" * 20)
    with pytest.raises(io.ParseError, match="byte"):
        io.load_points(tmp_path / "t.ply")


def test_non_manifold_edges_are_listed(tmp_path):
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1.0]])
    f = np.array([[0, 1, 2], [1, 0, 3], [0, 1, 4]])
    io.save_mesh(tmp_path / "nm.obj", v, f)
    with pytest.raises(geometry.MeshError) as err:
        io.load_mesh(tmp_path / "nm.obj")
    assert err.value.offending_edges == [[0, 1]]


# -- containers ----------------------------------------------------------------------------------

@pytest.fixture
def small_grid():
    v, f = tetrahedron(0.3)
    from types import SimpleNamespace
    return sd.build_sdf(SimpleNamespace(vertices=v, faces=f), resolution=6)


def test_grid_round_trip(tmp_path, small_grid):
    io.save_grid(tmp_path / "g.lfc", small_grid, {"seed": 1})
    back = io.load_grid(tmp_path / "g.lfc")
    assert set(back.channels) == set(small_grid.channels)
    for name, arr in small_grid.channels.items():
        assert back.channels[name].dtype == arr.dtype
        assert back.channels[name].tobytes() == np.ascontiguousarray(arr).tobytes()
    np.testing.assert_array_equal(back.resolution, small_grid.resolution)
    assert back.metadata["provenance"] == {"seed": 1}


def test_regressor_round_trip(tmp_path, rng):
    params = R.RegressorParams.init(3, rng, width=8)
    io.save_regressor(tmp_path / "r.lfc", params)
    back = io.load_regressor(tmp_path / "r.lfc")
    assert all(np.array_equal(back.weights[k], params.weights[k]) for k in params.weights)
    pts = rng.uniform(-0.3, 0.3, (20, 3))
    np.testing.assert_array_equal(R.predict(back, pts)[0], R.predict(params, pts)[0])


def test_container_rejects_corruption():
    raw = io.pack_container("grid", {"a": np.arange(6, dtype=np.float32)})
    with pytest.raises(io.ContainerError, match="magic"):
        io.unpack_container(b"X" + raw[1:])
    bumped = raw[:8] + struct.pack("<I", io.FORMAT_VERSION + 1) + raw[12:]
    with pytest.raises(io.MigrationError):
        io.unpack_container(bumped)
    flipped = bytearray(raw)
    flipped[-8] ^= 0xFF
    with pytest.raises(io.ChecksumError):
        io.unpack_container(bytes(flipped))
    with pytest.raises(io.ContainerError, match="truncated"):
        io.unpack_container(raw[:-12])
    with pytest.raises(io.ContainerError):
        io.unpack_container(raw, expected_kind="regressor")


def test_container_is_little_endian_on_any_host():
    values = np.linspace(-1, 1, 7)
    raw_native = io.pack_container("x", {"v": values})
    raw_swapped = io.pack_container("x", {"v": values.astype(">f8")})
    assert raw_native == raw_swapped
    _, ch, *_ = io.unpack_container(raw_swapped)
    np.testing.assert_array_equal(ch["v"], values)
    # the block itself is stored little-endian
    assert values.astype("<f8").tobytes() in raw_native
    assert zlib.crc32(raw_native[:-4]) == struct.unpack("<I", raw_native[-4:])[0]


# -- configs and provenance --------------------------------------------------------------------------

def test_config_errors_exit_with_code_2(tmp_path):
    bad_toml = write(tmp_path / "bad.toml", "seed = [\n")
    unknown = write(tmp_path / "unknown.toml", "[train]\nepochs = 3\n")
    negative = write(tmp_path / "neg.toml", "[synth]\nnoise_sigma = -1.0\n")
    missing = write(tmp_path / "missing.toml", "[paths]\nmodel = 'nowhere.json'\n")
    for cfg in (bad_toml, unknown, negative, missing, tmp_path / "absent.toml"):
        assert cli.main(["synth", "--config", str(cfg), "--out", str(tmp_path / "c")]) == 2, cfg
    assert cli.main(["synth"]) == 2


def test_data_errors_exit_with_code_3(tmp_path):
    model = tmp_path / "model.json"
    model.write_text("{not json")
    assert cli.main(["precompute", "--model", str(model), "--out", str(tmp_path / "g.lfc")]) == 3


def test_provenance_header():
    cfg = cli.RunConfig.from_dict({"seed": 5}).to_dict()
    prov = io.provenance(cfg, 5)
    assert set(prov) == {"config_hash", "seed", "version"} and prov["seed"] == 5
    assert prov["config_hash"] == io.config_hash(json.loads(json.dumps(cfg)))
    assert io.config_hash({**cfg, "seed": 6}) != prov["config_hash"]


def test_synth_and_precompute_write_provenance(tmp_path):
    corpus = tmp_path / "corpus"
    assert cli.main(["synth", "--seed", "2", "--out", str(corpus), "--labeled", "1", "--unlabeled", "1",
                     "--test", "1", "--points-per-scan", "50"]) == 0
    manifest = json.loads((corpus / "manifest.json").read_text())
    assert manifest["labeled"] == ["labeled_000"] and manifest["provenance"]["seed"] == 2
    assert json.loads((corpus / "gt" / "test_000.json").read_text())["provenance"]["seed"] == 2
    assert len(io.load_points(corpus / "scans" / "unlabeled_000.ply")) == 50
    grid = tmp_path / "grid.lfc"
    assert cli.main(["precompute", "--seed", "2", "--model", str(corpus / "model.json"), "--out", str(grid),
                     "--res", "8"]) == 0
    loaded = io.load_grid(grid)
    assert loaded.metadata["provenance"]["seed"] == 2 and tuple(loaded.resolution) == (8, 8, 8)
