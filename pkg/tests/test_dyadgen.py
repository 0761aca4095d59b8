import hashlib
import json
import struct

import numpy as np
import pytest

from dyadimp.dyadgen import (GenConfig, ParseError, Stream, generate, generate_session, read_session,
                             splitmix64, write_session, write_sidecar)
from dyadimp.losses import ccc
from dyadimp.signalprep import EMITTER_DIM, RECEIVER_DIM


def ls_ccc(train, test):
    """Fit labels from features by least squares on one session, score on another."""
    def design(x):
        return np.hstack([x, np.ones((len(x), 1))])
    (xa, ya), (xb, yb) = train, test
    w, *_ = np.linalg.lstsq(design(xa), ya, rcond=None)
    pred = design(xb) @ w
    return min(ccc(pred[:, k], yb[:, k]) for k in range(2))


def pair(cfg, source):
    a, b = generate_session(cfg, 0), generate_session(cfg, 1)
    get = lambda s: (getattr(s, source).features, s.labels)
    return get(a), get(b)


def test_splitmix64_reference_values():
    # published first outputs for seed 1234567
    g = splitmix64(1234567)
    assert [next(g) for _ in range(3)] == [6457827717110365317, 3203168211198807973, 9817491932198370423]


def test_stream_uniforms_in_range_and_deterministic():
    u = Stream(3, 5).uniform(10000)
    assert u.min() >= 0.0 and u.max() < 1.0
    assert abs(u.mean() - 0.5) < 0.02
    assert np.array_equal(u, Stream(3, 5).uniform(10000))
    assert not np.array_equal(u, Stream(3, 6).uniform(10000))
    z = Stream(0, 0).normal((20000,))
    assert abs(z.mean()) < 0.03 and abs(z.std() - 1.0) < 0.03


def test_shapes_and_ids():
    cfg = GenConfig(num_sessions=3, timeline_length=50)
    sessions = generate(cfg)
    assert [s.session_id for s in sessions] == ["synth-7-0000", "synth-7-0001", "synth-7-0002"]
    for s in sessions:
        assert s.emitter.features.shape == (50, EMITTER_DIM)
        assert s.receiver.features.shape == (50, RECEIVER_DIM)
        assert s.labels.shape == (50, 2)


def test_determinism():
    cfg = GenConfig(num_sessions=2, timeline_length=80)
    a, b = generate(cfg), generate(cfg)
    for x, y in zip(a, b):
        assert np.array_equal(x.emitter.features, y.emitter.features)
        assert np.array_equal(x.receiver.features, y.receiver.features)
        assert np.array_equal(x.labels, y.labels)
    c = generate_session(GenConfig(seed=8, num_sessions=2, timeline_length=80), 0)
    assert not np.array_equal(c.labels, a[0].labels)


def test_labels_piecewise_constant():
    s = generate_session(GenConfig(timeline_length=2000, label_step_prob=0.02), 0)
    changes = np.count_nonzero(np.any(np.diff(s.labels, axis=0) != 0, axis=1))
    assert 10 <= changes <= 80
    flat = generate_session(GenConfig(timeline_length=300, label_step_prob=0.0), 0)
    assert np.all(flat.labels == flat.labels[0])


def test_noiseless_receiver_is_linearly_exact():
    cfg = GenConfig(num_sessions=2, timeline_length=500, noise_std=0.0, relatedness=1.0, receiver_lag=0)
    assert ls_ccc(*pair(cfg, "receiver")) > 0.999
    assert ls_ccc(*pair(cfg, "emitter")) > 0.999


def test_predictability_increases_with_relatedness():
    scores = [ls_ccc(*pair(GenConfig(num_sessions=2, timeline_length=1500, relatedness=rho), "receiver"))
              for rho in (0.0, 0.5, 1.0)]
    assert scores[0] < scores[1] < scores[2]
    assert abs(scores[0]) < 0.2


def test_emitter_weaker_than_receiver():
    for rho in (0.5, 0.8, 1.0):
        cfg = GenConfig(num_sessions=2, timeline_length=1500, relatedness=rho)
        assert ls_ccc(*pair(cfg, "emitter")) < ls_ccc(*pair(cfg, "receiver"))


def test_receiver_lag_shifts_signal():
    cfg = GenConfig(num_sessions=1, timeline_length=200, noise_std=0.0, relatedness=1.0, receiver_lag=5)
    s = generate_session(cfg, 0)
    fit = np.linalg.lstsq(s.labels[:-5], s.receiver.features[5:], rcond=None)[0]
    np.testing.assert_allclose(s.labels[:-5] @ fit, s.receiver.features[5:], atol=1e-10)


def test_invalid_configs():
    with pytest.raises(ValueError):
        generate_session(GenConfig(timeline_length=5, receiver_lag=4), 0)
    for bad in ({"relatedness": 1.5}, {"label_step_prob": -0.1}, {"noise_std": -1.0},
                {"ar_coef": 1.0}, {"label_step_scale": 0.0}):
        with pytest.raises(ValueError):
            GenConfig(**bad)
    with pytest.raises(ValueError):
        generate_session(GenConfig(num_sessions=2), 2)


# ---------------------------------------------------------------- file format

@pytest.fixture
def session_file(tmp_path):
    s = generate_session(GenConfig(num_sessions=1, timeline_length=30), 0)
    p = tmp_path / "a.session"
    write_session(p, s)
    return s, p


def test_round_trip(session_file, tmp_path):
    s, p = session_file
    t = read_session(p)
    assert t.session_id == s.session_id
    assert np.array_equal(t.emitter.features, s.emitter.features)
    assert np.array_equal(t.receiver.features, s.receiver.features)
    assert np.array_equal(t.labels, s.labels)
    assert t.emitter.column_map == s.emitter.column_map
    assert t.receiver.blocks == s.receiver.blocks
    write_sidecar(tmp_path / "a.json", s)
    side = json.loads((tmp_path / "a.json").read_text())
    assert side["T"] == 30 and len(side["column_map"]["emitter"]) == EMITTER_DIM


def test_header_checksum_matches_payload(session_file):
    s, p = session_file
    raw = p.read_bytes()
    (n,) = struct.unpack_from("<I", raw, 12)
    header = json.loads(raw[16:16 + n])
    assert header["sha256"] == hashlib.sha256(raw[16 + n:]).hexdigest()
    assert len(raw) - 16 - n == 8 * 30 * (EMITTER_DIM + RECEIVER_DIM + 2)


def test_truncated_file(session_file):
    _, p = session_file
    raw = p.read_bytes()
    p.write_bytes(raw[:-8])
    with pytest.raises(ParseError) as exc:
        read_session(p)
    assert exc.value.offset == len(raw) - 8
    p.write_bytes(raw[:10])
    with pytest.raises(ParseError):
        read_session(p)
    p.write_bytes(raw[:40])
    with pytest.raises(ParseError):
        read_session(p)


def test_corruption_detected(session_file):
    _, p = session_file
    raw = bytearray(p.read_bytes())
    bad_magic = bytes(b"X" + raw[1:])
    p.write_bytes(bad_magic)
    with pytest.raises(ParseError) as exc:
        read_session(p)
    assert exc.value.offset == 0
    flipped = bytearray(raw)
    flipped[-3] ^= 0xFF
    p.write_bytes(bytes(flipped))
    with pytest.raises(ParseError, match="checksum"):
        read_session(p)
    version = bytearray(raw)
    version[8] = 9
    p.write_bytes(bytes(version))
    with pytest.raises(ParseError, match="version"):
        read_session(p)
