import gzip
import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lowacc.config import RunConfig, load_config, parse_config
from lowacc.container import MAGIC, decode_model, encode_model, load_model, save_model
from lowacc.errors import ConfigError, FormatError
from lowacc.idx import IMAGES_MAGIC, LABELS_MAGIC, load_idx, read_idx, write_idx
from lowacc.nn.model import build_model, preset
from lowacc.nn.train import calibrate
from lowacc.sparsity import apply_mask, nm_prune


# --- IDX ------------------------------------------------------------------

def test_idx_two_sample_round_trip(tmp_path):
    imgs = np.arange(2 * 3 * 4, dtype=np.uint8).reshape(2, 3, 4)
    labels = np.array([7, 1], dtype=np.uint8)
    write_idx(tmp_path / "i.gz", imgs)
    write_idx(tmp_path / "l", labels)
    assert read_idx(tmp_path / "i.gz", IMAGES_MAGIC).tolist() == imgs.tolist()
    x, y = load_idx(tmp_path / "i.gz", tmp_path / "l")
    assert x.dtype == np.float32 and x.shape == (2, 3, 4)
    np.testing.assert_allclose(x, imgs / 255.0, rtol=1e-7)
    assert y.tolist() == [7, 1]


def test_idx_header_layout(tmp_path):
    write_idx(tmp_path / "l", np.array([3], dtype=np.uint8))
    raw = (tmp_path / "l").read_bytes()
    assert struct.unpack(">II", raw[:8]) == (LABELS_MAGIC, 1)
    assert raw[8:] == b"\x03"


def test_idx_truncated_reports_byte_position(tmp_path):
    write_idx(tmp_path / "i", np.zeros((2, 2, 2), dtype=np.uint8))
    raw = (tmp_path / "i").read_bytes()
    (tmp_path / "t").write_bytes(raw[:-3])
    with pytest.raises(FormatError, match="byte 21"):
        read_idx(tmp_path / "t")
    (tmp_path / "h").write_bytes(raw[:6])
    with pytest.raises(FormatError, match="byte 6"):
        read_idx(tmp_path / "h")


def test_idx_magic_and_count_mismatch(tmp_path):
    write_idx(tmp_path / "i", np.zeros((2, 2, 2), dtype=np.uint8))
    write_idx(tmp_path / "l", np.zeros(3, dtype=np.uint8))
    with pytest.raises(FormatError, match="magic"):
        read_idx(tmp_path / "l", IMAGES_MAGIC)
    with pytest.raises(FormatError, match="count"):
        load_idx(tmp_path / "i", tmp_path / "l")
    with pytest.raises(FormatError):
        read_idx(tmp_path / "missing")


def test_idx_reads_gzip_by_content(tmp_path):
    write_idx(tmp_path / "l", np.array([1, 2], dtype=np.uint8))
    (tmp_path / "z").write_bytes(gzip.compress((tmp_path / "l").read_bytes()))
    assert read_idx(tmp_path / "z").tolist() == [1, 2]


# --- container ------------------------------------------------------------

def _model(name="convnet", seed=0):
    specs, shape = preset(name)
    m = build_model(specs, shape, seed=seed, m=8)
    j = len(m.weights) - 2  # a hidden layer when there is one
    if j >= 0:
        m.patterns[j] = nm_prune(m.weights[j], 3, 8)
        m.weights[j] = apply_mask(m.weights[j], m.patterns[j]).astype(np.float32)
    rng = np.random.default_rng(seed)
    calibrate(m, rng.uniform(0, 1, size=(8, *shape)))
    m.meta["note"] = {"seed": seed, "history": [{"loss": 0.25}]}
    return m


@pytest.mark.parametrize("name", ["mlp1", "mlp2", "convnet"])
def test_container_round_trip(tmp_path, name):
    m = _model(name)
    save_model(tmp_path / "m.pqsm", m)
    r = load_model(tmp_path / "m.pqsm")
    assert [s.to_dict() for s in r.specs] == [s.to_dict() for s in m.specs]
    for a, b, pa, pb in zip(m.weights, r.weights, m.patterns, r.patterns):
        assert a.tobytes() == b.tobytes() and a.dtype == b.dtype
        np.testing.assert_array_equal(pa.mask, pb.mask)
        assert (pa.n, pa.m) == (pb.n, pb.m)
    assert r.act_stats == m.act_stats
    assert r.meta == m.meta
    assert encode_model(r) == encode_model(m)


def test_container_is_deterministic():
    assert encode_model(_model(seed=3)) == encode_model(_model(seed=3))


def test_container_header_fields():
    blob = encode_model(_model())
    magic, version, hlen = struct.unpack_from("<4sIQ", blob)
    assert magic == MAGIC == b"PQSM" and version == 1
    header = json.loads(blob[16:16 + hlen])
    roles = {r["role"] for r in header["manifest"]}
    assert {"weight", "mask", "quant-params"} <= roles
    masks = [r for r in header["manifest"] if r["role"] == "mask"]
    assert all(r["dtype"] == "u8-bitmask" for r in masks)
    weights = [r for r in header["manifest"] if r["role"] == "weight"]
    assert len(weights) == len(masks) == len(_model().weights)


@pytest.mark.parametrize("mutate,match", [
    (lambda b: b"XXXX" + b[4:], "magic"),
    (lambda b: b[:4] + struct.pack("<I", 9) + b[8:], "version"),
    (lambda b: b[:-10], "past end"),
    (lambda b: b[:10], "truncated"),
])
def test_container_rejects_corruption(mutate, match):
    with pytest.raises(FormatError, match=match):
        decode_model(mutate(encode_model(_model())))


def test_container_rejects_overlap():
    blob = encode_model(_model())
    _, _, hlen = struct.unpack_from("<4sIQ", blob)
    header = json.loads(blob[16:16 + hlen])
    header["manifest"][1]["offset"] = header["manifest"][0]["offset"] + 4
    hb = json.dumps(header).encode()
    bad = struct.pack("<4sIQ", b"PQSM", 1, len(hb)) + hb + blob[16 + hlen:]
    with pytest.raises(FormatError, match="overlap"):
        decode_model(bad)


# --- config ---------------------------------------------------------------

def test_empty_config_uses_defaults():
    cfg = parse_config({})
    assert cfg == RunConfig()
    assert cfg.train_config().schedule == "ptoq"


@pytest.mark.parametrize("obj", [
    {"bogus": 1},
    {"train": {"epochs": "ten"}},
    {"train": {"prune": {"target": 0.5, "extra": 1}}},
    {"w_bits": 1},
    {"policies": ["clipsort"]},
    {"p_grid": []},
    {"train": {"epochs": 1, "qat_epochs": 2}},
])
def test_config_rejects_bad_input(obj):
    with pytest.raises(ConfigError):
        parse_config(obj)


def test_config_file_errors(tmp_path):
    (tmp_path / "c.json").write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "c.json")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.json")


def test_config_prune_and_sweep_sparsity():
    cfg = parse_config({"seed": 5, "train": {"epochs": 40, "qat_epochs": 10,
                                             "prune": {"target": 0.5, "m": 32}}})
    tc = cfg.train_config()
    assert tc.seed == 5 and tc.prune.m == 32 and tc.prune.target == 0.5
    assert cfg.train_config(0.75).prune.target == 0.75
    assert cfg.train_config(0.0).prune is None


@settings(max_examples=30, deadline=None)
@given(st.dictionaries(st.text(min_size=1, max_size=8), st.integers(), min_size=1))
def test_config_unknown_keys_always_rejected(extra):
    from lowacc.config import SCHEMA

    if set(extra) <= set(SCHEMA["properties"]):
        return
    with pytest.raises(ConfigError):
        parse_config({k: v for k, v in extra.items() if k not in SCHEMA["properties"]})
