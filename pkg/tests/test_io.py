import json
import struct

import jsonschema
import numpy as np
import pytest

from transducer import io
from transducer.baselines import KNNRegressor, RegressionReport, outlier_detect
from transducer.io import ContainerError
from transducer.model import ModelConfig, init_params, predict
from transducer.pde import MetaConfig, generate_meta_dataset
from transducer.training import AdamState, TrainingCurve


@pytest.fixture(scope="module")
def meta():
    return generate_meta_dataset(MetaConfig(n_datasets=3, pairs=5, grid_n=20, seed=4))


def small_config(**kw):
    return ModelConfig(**{**dict(depth=2, heads=2, head_dim=3, value_dim=2, in_dim=4, out_dim=4, mlp_dim=5), **kw})


def test_meta_dataset_round_trip_is_byte_identical(meta, tmp_path):
    raw = io.encode_meta_dataset(meta)
    back = io.decode_meta_dataset(raw)
    assert io.encode_meta_dataset(back) == raw
    for a, b in zip(meta.datasets, back.datasets):
        assert np.array_equal(a.inputs, b.inputs) and np.array_equal(a.outputs, b.outputs)
        assert np.array_equal(a.coeffs.delta, b.coeffs.delta) and a.coeffs.k_reaction == b.coeffs.k_reaction
        assert a.key == b.key and a.t == b.t
    path = tmp_path / "m.tdxd"
    io.save_meta_dataset(path, meta)
    io.save_meta_dataset(tmp_path / "again.tdxd", io.load_meta_dataset(path))
    assert path.read_bytes() == (tmp_path / "again.tdxd").read_bytes()


def test_meta_dataset_layout(meta):
    raw = io.encode_meta_dataset(meta)
    magic, version, hlen = struct.unpack_from("<4sIQ", raw)
    assert magic == b"TDXD" and version == 1
    header = json.loads(raw[16:16 + hlen])
    assert header["grid_n"] == 20 and header["pairs"] == 5 and header["count"] == 3
    assert header["config"]["seed"] == 4
    body = np.frombuffer(raw[16 + hlen:], dtype="<f8")
    assert body.size == 3 * 5 * 2 * 20
    # dataset-major, pair-major, v before u, grid-point-major
    assert body[0] == meta.datasets[0].inputs[0, 0]
    assert np.array_equal(body[20:40], meta.datasets[0].outputs[0])
    assert np.array_equal(body[200:220], meta.datasets[1].inputs[0])


def test_meta_dataset_errors(meta):
    raw = io.encode_meta_dataset(meta)
    with pytest.raises(ContainerError, match=r"expected b'TDXD', found b'XXXD'") as info:
        io.decode_meta_dataset(b"XXXD" + raw[4:])
    assert info.value.position == 0
    with pytest.raises(ContainerError, match="version 2"):
        io.decode_meta_dataset(raw[:4] + struct.pack("<I", 2) + raw[8:])
    with pytest.raises(ContainerError, match=r"holds 4784 bytes, header implies 4800"):
        io.decode_meta_dataset(raw[:-16])
    with pytest.raises(ContainerError, match="too short"):
        io.decode_meta_dataset(raw[:10])
    with pytest.raises(ContainerError, match="multiple of 8"):
        io.decode_meta_dataset(raw[:-3])


@pytest.fixture
def checkpoint_parts():
    c = small_config()
    params = init_params(c, 3)
    g = np.random.default_rng(0)
    state = AdamState({k: g.standard_normal(a.shape) for k, a in params.items()},
                      {k: g.random(a.shape) for k, a in params.items()}, 17)
    prov = {"steps": 17, "final_loss": 0.125, "seed": 3}
    return c, params, state, prov


def test_checkpoint_round_trip(checkpoint_parts, tmp_path):
    c, params, state, prov = checkpoint_parts
    raw = io.encode_checkpoint(params, c, prov, state, {"kind": "spectral", "n": 20, "modes": 2})
    p2, c2, header, s2 = io.decode_checkpoint(raw)
    assert c2 == c and header["provenance"] == prov and header["codec"]["modes"] == 2
    assert all(np.array_equal(params[k], p2[k]) for k in params)
    assert s2.t == 17 and all(np.array_equal(state.v[k], s2.v[k]) for k in params)
    assert io.encode_checkpoint(p2, c2, header["provenance"], s2, header["codec"]) == raw
    assert list(p2) == list(params)
    path = tmp_path / "c.tdxc"
    io.save_checkpoint(path, params, c, prov)
    p3, _, _, s3 = io.load_checkpoint(path)
    assert s3 is None
    probe = np.random.default_rng(1)
    batch = (probe.standard_normal((5, 4)), probe.standard_normal((5, 4)), probe.standard_normal((3, 4)))
    assert np.abs(predict(params, c, *batch) - predict(p3, c, *batch)).max() < 1e-12


def test_checkpoint_param_table_order(checkpoint_parts):
    c, params, state, prov = checkpoint_parts
    header = io.decode_checkpoint(io.encode_checkpoint(params, c, prov))[2]
    names = [e["name"] for e in header["params"]]
    assert names[:4] == ["layer0.Q", "layer0.K", "layer0.V", "layer0.W"]
    offsets = [e["offset"] for e in header["params"]]
    assert offsets[0] == 0 and offsets == sorted(offsets)


def _rewrite_header(raw: bytes, edit) -> bytes:
    hlen = struct.unpack_from("<Q", raw, 8)[0]
    h = json.loads(raw[16:16 + hlen])
    edit(h)
    blob = json.dumps(h, sort_keys=True, separators=(",", ":")).encode()
    return raw[:8] + struct.pack("<Q", len(blob)) + blob + raw[16 + hlen:]


def test_checkpoint_errors(checkpoint_parts):
    c, params, state, prov = checkpoint_parts
    raw = io.encode_checkpoint(params, c, prov)
    with pytest.raises(ContainerError, match="TDXC"):
        io.decode_checkpoint(b"TDXD" + raw[4:])
    with pytest.raises(ContainerError, match="listed twice"):
        io.decode_checkpoint(_rewrite_header(raw, lambda h: h["params"].insert(1, h["params"][0])))
    with pytest.raises(ContainerError, match="misses parameters"):
        io.decode_checkpoint(_rewrite_header(raw[:-8 * 4], lambda h: h["params"].pop()))
    with pytest.raises(ContainerError, match="offset"):
        io.decode_checkpoint(_rewrite_header(raw, lambda h: h["params"][1].update(offset=8)))
    with pytest.raises(ContainerError, match="not implied"):
        io.decode_checkpoint(_rewrite_header(raw, lambda h: h["params"][0].update(shape=[2, 4, 2])))
    with pytest.raises(ContainerError, match="payload"):
        io.decode_checkpoint(raw[:-8])
    with pytest.raises(ContainerError, match="payload holds"):
        io.decode_checkpoint(raw + b"\0" * 8)
    with pytest.raises(ValueError, match="missing"):
        io.encode_checkpoint({k: v for k, v in params.items() if k != "layer1.W"}, c)


def test_read_header(checkpoint_parts, meta, tmp_path):
    c, params, _, prov = checkpoint_parts
    io.save_checkpoint(tmp_path / "c", params, c, prov)
    io.save_meta_dataset(tmp_path / "m", meta)
    assert io.read_header(tmp_path / "c")["magic"] == "TDXC"
    h = io.read_header(tmp_path / "m")
    assert h["magic"] == "TDXD" and h["body_bytes"] == 3 * 5 * 2 * 20 * 8
    (tmp_path / "x").write_bytes(b"nope" * 8)
    with pytest.raises(ContainerError):
        io.read_header(tmp_path / "x")


def test_idx_round_trip_and_shapes(tmp_path):
    imgs = np.random.default_rng(0).integers(0, 256, (7, 28, 28), dtype=np.uint8)
    labels = np.arange(7, dtype=np.uint8)
    io.write_idx(tmp_path / "i", imgs)
    io.write_idx(tmp_path / "l", labels)
    raw = (tmp_path / "i").read_bytes()
    assert raw[:4] == bytes([0, 0, 8, 3]) and struct.unpack(">3I", raw[4:16]) == (7, 28, 28)
    assert io.read_idx_images(tmp_path / "i").shape == (7, 784)
    assert np.array_equal(io.read_idx_images(tmp_path / "i"), imgs.reshape(7, 784))
    assert np.array_equal(io.read_idx_labels(tmp_path / "l"), labels)
    assert io.encode_idx(io.decode_idx(raw)) == raw


def test_idx_rejects_bad_magic_with_position(tmp_path):
    raw = io.encode_idx(np.zeros((2, 3, 3), np.uint8))
    bad = bytes([0x12, 0, 8, 3]) + raw[4:]
    with pytest.raises(ContainerError, match=r"magic 0x12000803.*at byte 0") as info:
        io.decode_idx(bad)
    assert info.value.position == 0
    with pytest.raises(ContainerError, match="expected 0x00000801, found 0x00000803"):
        io.decode_idx(raw, io.IDX_LABELS)
    with pytest.raises(ContainerError, match=r"payload is 17 bytes.*imply 18") as info:
        io.decode_idx(raw[:-1])
    assert info.value.position == 16 + 17
    with pytest.raises(ContainerError, match="ends"):
        io.decode_idx(raw[:8])
    with pytest.raises(ValueError):
        io.encode_idx(np.zeros(3))


def test_atomic_write_leaves_no_temp_files(tmp_path):
    io.atomic_write(tmp_path / "f", b"abc")
    io.atomic_write(tmp_path / "f", b"xyz")
    assert (tmp_path / "f").read_bytes() == b"xyz"
    assert [p.name for p in tmp_path.iterdir()] == ["f"]


def test_reports_validate_against_schemas(meta, tmp_path):
    rep = RegressionReport("knn", 3, 2, [0.5, 0.25, 0.125], [1.0, 2.0, 4.0], 0.01)
    jsonschema.validate(rep.to_dict(), io.schema("regression_report"))
    out = outlier_detect(meta.datasets[0], KNNRegressor(1), num_regressions=10, labels=[0, 1, 0, 0, 0])
    io.write_json(tmp_path / "o.json", out.to_dict())
    jsonschema.validate(json.loads((tmp_path / "o.json").read_text()), io.schema("outlier_report"))
    bad = dict(out.to_dict(), precision=1.5)
    with pytest.raises(jsonschema.ValidationError):
        jsonschema.validate(bad, io.schema("outlier_report"))


def test_csv_writers_follow_table_schema(tmp_path):
    tables = io.schema("csv_tables")
    curve = TrainingCurve()
    curve.append(0, 0.5, 1e-3, 0.01)
    curve.to_csv(tmp_path / "curve.csv")
    header = (tmp_path / "curve.csv").read_text().splitlines()[0].split(",")
    jsonschema.validate({"curve": header}, tables)
    io.write_csv(tmp_path / "t.csv", ["a", "b"], [[1, 0.1 + 0.2], ["x", 2.5]])
    assert (tmp_path / "t.csv").read_text() == "a,b\n1,0.30000000000000004\nx,2.5\n"
    with pytest.raises(jsonschema.ValidationError):
        jsonschema.validate({"curve": ["step", "loss"]}, tables)
