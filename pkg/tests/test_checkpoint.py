"""Checkpoint format: bit-exact roundtrips and corruption detection."""

import json
import struct

import numpy as np
import pytest

from vadkit.checkpoint import CHECKPOINT_VERSION, load_checkpoint, save_checkpoint
from vadkit.detector import (
    init_predictor,
    predict_score,
    predictor_from_params,
    predictor_params,
)


def sample_params(seed=0):
    rng = np.random.default_rng(seed)
    return {
        "l1.w": rng.normal(size=(3, 4)),
        "l1.b": rng.normal(size=3),
        "l2.w": rng.normal(size=(2, 3)),
        "l2.b": rng.normal(size=2),
    }


def test_roundtrip_is_bit_exact(tmp_path):
    params = sample_params()
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, "phase1", params, meta={"epochs": 30, "seed": 7})
    loaded, meta = load_checkpoint(path, kind="phase1")
    assert list(loaded) == list(params)  # payload order preserved
    for k in params:
        assert loaded[k].dtype == np.float64
        assert np.array_equal(loaded[k], params[k])
    assert meta == {"epochs": 30, "seed": 7}


def test_loaded_arrays_are_independent_copies(tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, "phase1", sample_params())
    a, _ = load_checkpoint(path)
    b, _ = load_checkpoint(path)
    a["l1.w"][0, 0] = 99.0
    assert b["l1.w"][0, 0] != 99.0
    assert a["l1.w"].flags.writeable


def test_kind_check(tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, "phase1", sample_params())
    with pytest.raises(ValueError, match="phase2"):
        load_checkpoint(path, kind="phase2")
    load_checkpoint(path)  # no expected kind: accepted
    load_checkpoint(path, kind="phase1")


def test_rejects_non_finite_parameters(tmp_path):
    params = sample_params()
    params["l1.w"][0, 0] = np.nan
    with pytest.raises(ValueError, match="l1.w"):
        save_checkpoint(tmp_path / "bad.ckpt", "phase1", params)


def test_truncated_payload_detected(tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, "phase1", sample_params())
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(ValueError, match="truncated"):
        load_checkpoint(path)


def test_truncated_header_detected(tmp_path):
    path = tmp_path / "model.ckpt"
    path.write_bytes(struct.pack("<I", 1000) + b"{}")
    with pytest.raises(ValueError, match="truncated"):
        load_checkpoint(path)
    path.write_bytes(b"\x01")
    with pytest.raises(ValueError, match="truncated"):
        load_checkpoint(path)


def test_corrupt_header_detected(tmp_path):
    path = tmp_path / "model.ckpt"
    blob = b"not json at all"
    path.write_bytes(struct.pack("<I", len(blob)) + blob)
    with pytest.raises(ValueError, match="corrupt"):
        load_checkpoint(path)


def test_version_mismatch_detected(tmp_path):
    header = json.dumps(
        {"version": CHECKPOINT_VERSION + 1, "kind": "x", "meta": {}, "params": []}
    ).encode()
    path = tmp_path / "model.ckpt"
    path.write_bytes(struct.pack("<I", len(header)) + header)
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(path)


def test_predictor_survives_roundtrip(tmp_path):
    g = init_predictor(dim=6, hidden=9, rng=np.random.default_rng(3))
    path = tmp_path / "phase1.ckpt"
    save_checkpoint(path, "phase1", predictor_params(g))
    loaded, _ = load_checkpoint(path, kind="phase1")
    g2 = predictor_from_params(loaded)
    x = np.random.default_rng(4).normal(size=6)
    assert predict_score(g, x) == predict_score(g2, x)
