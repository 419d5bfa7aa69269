import struct

import numpy as np
import pytest

from snforge import Supernet, SupernetConfig, extract_dense
from snforge.checkpoint import load_model, read_archive, save_model, write_archive
from snforge.errors import FormatError


def test_archive_layout(tmp_path):
    p = tmp_path / "t.snfw"
    write_archive(p, {"a": 1}, {"w": np.arange(6, dtype=np.float32).reshape(2, 3)})
    raw = p.read_bytes()
    assert raw[:4] == b"SNFW"
    version, clen = struct.unpack_from("<II", raw, 4)
    assert version == 1 and raw[12:12 + clen] == b'{"a": 1}'
    pos = 12 + clen
    (nlen,) = struct.unpack_from("<I", raw, pos)
    assert raw[pos + 4:pos + 4 + nlen] == b"w"
    pos += 4 + nlen
    code, rank = struct.unpack_from("<BI", raw, pos)
    assert (code, rank) == (0, 2)
    assert struct.unpack_from("<2Q", raw, pos + 5) == (2, 3)
    payload = np.frombuffer(raw[pos + 5 + 16:], dtype="<f4")
    assert payload.tolist() == [0, 1, 2, 3, 4, 5]


def test_round_trip_models(tmp_path, gqa_sup):
    net = Supernet(gqa_sup, seed=3)
    save_model(tmp_path / "s.snfw", net)
    back, cfg = load_model(tmp_path / "s.snfw")
    assert isinstance(back, Supernet) and back.config == gqa_sup
    for k, v in net.state_dict().items():
        assert np.array_equal(v, back.state_dict()[k])
    cfg = gqa_sup.full_subnet()
    cfg.l, cfg.h, cfg.q, cfg.h_s, cfg.d = 2, [2, 2], [1, 2], [4, 4], [24, 24]
    dense = extract_dense(net, cfg)
    save_model(tmp_path / "d.snfw", dense)
    back, _ = load_model(tmp_path / "d.snfw")
    assert back.arch == dense.arch
    x = np.arange(8)[None] % 64
    assert np.array_equal(back(x).data, dense(x).data)


def test_rejects_garbage(tmp_path):
    p = tmp_path / "x.snfw"
    p.write_bytes(b"NOPE")
    with pytest.raises(FormatError):
        read_archive(p)
    with pytest.raises(FormatError):
        read_archive(tmp_path / "missing.snfw")


def test_rejects_truncated_tensor(tmp_path):
    p = tmp_path / "t.snfw"
    write_archive(p, {}, {"w": np.ones(100, dtype=np.float32)})
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(FormatError):
        read_archive(p)


def test_full_extraction_checkpoint_payloads_equal(tmp_path):
    sup = SupernetConfig(2, 8, 2, 4, 16, vocab_size=32, max_seq=8)
    net = Supernet(sup, seed=1)
    save_model(tmp_path / "dense.snfw", extract_dense(net, sup.full_subnet()))
    _, a = read_archive(tmp_path / "dense.snfw")
    for k, v in net.state_dict().items():
        assert a[k].tobytes() == v.tobytes()
