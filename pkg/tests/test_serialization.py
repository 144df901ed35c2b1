import struct

import numpy as np
import pytest

from diffgate.config import TrainPlan, model_hash
from diffgate.diffnet import DiffSubnetwork, magnitude_prune, zero_diff
from diffgate.encoder import EncoderConfig, group_shapes, param_count
from diffgate.errors import IncompatibleMaskError, MaskFormatError
from diffgate.rng import RngState
from diffgate.serialization import (load_checkpoint, load_gate_state, load_mask, read_mask_header, save_checkpoint,
                                    save_gate_state, save_mask)

H = "ab" * 32
SHAPES = {"x": (4, 5), "y": (3,)}


def pruned(eta=0.3, shapes=SHAPES, seed=0):
    return magnitude_prune(DiffSubnetwork.create(shapes, RngState(seed)), eta)[0]


def test_mask_round_trip_is_bitwise(tmp_path):
    net = pruned()
    save_mask(net, tmp_path / "a.dgm", H)
    back = load_mask(tmp_path / "a.dgm", SHAPES, H)
    save_mask(back, tmp_path / "b.dgm", H)
    assert (tmp_path / "a.dgm").read_bytes() == (tmp_path / "b.dgm").read_bytes()
    for g in SHAPES:
        assert np.array_equal(back.delta_arrays()[g], net.delta_arrays()[g])


def test_mask_layout_matches_documentation(tmp_path):
    net = pruned(0.5, {"g": (4,)})
    save_mask(net, tmp_path / "m.dgm", H)
    buf = (tmp_path / "m.dgm").read_bytes()
    assert buf[:4] == b"DGM1" and struct.unpack("<I", buf[4:8])[0] == 1
    assert buf[8:40] == bytes.fromhex(H) and struct.unpack("<I", buf[40:44])[0] == 1
    assert struct.unpack("<I", buf[44:48])[0] == 1 and buf[48:49] == b"g"
    (count,) = struct.unpack("<Q", buf[49:57])
    assert count == 2 and len(buf) == 57 + count * 16
    idx, val = struct.unpack("<Qd", buf[57:73])
    assert val == net.groups["g"].w.data[idx]


def test_empty_mask(tmp_path):
    save_mask(zero_diff(SHAPES), tmp_path / "z.dgm", H)
    back = load_mask(tmp_path / "z.dgm", SHAPES)
    assert all(np.all(d == 0) for d in back.delta_arrays().values())
    assert len((tmp_path / "z.dgm").read_bytes()) == 44 + sum(4 + len(g) + 8 for g in SHAPES)


def test_sparse_mask_size_against_dense_checkpoint(tmp_path):
    shapes = group_shapes(EncoderConfig())
    net = magnitude_prune(DiffSubnetwork.create(shapes, RngState(0)), 0.005)[0]
    save_mask(net, tmp_path / "m.dgm", H)
    save_checkpoint({g: np.zeros(s) for g, s in shapes.items()}, tmp_path / "c.dgc", H)
    ratio = (tmp_path / "m.dgm").stat().st_size / (tmp_path / "c.dgc").stat().st_size
    assert ratio < 0.015
    assert param_count(EncoderConfig()) * 8 < (tmp_path / "c.dgc").stat().st_size


def test_hash_mismatch_reports_both(tmp_path):
    save_mask(pruned(), tmp_path / "a.dgm", H)
    other = "cd" * 32
    with pytest.raises(IncompatibleMaskError) as e:
        load_mask(tmp_path / "a.dgm", SHAPES, other)
    assert e.value.expected == other and e.value.found == H
    assert read_mask_header(tmp_path / "a.dgm") == H


@pytest.mark.parametrize("mutate", [
    lambda b: b"XXXX" + b[4:],
    lambda b: b[:4] + struct.pack("<I", 9) + b[8:],
    lambda b: b[:-3],
    lambda b: b + b"\0",
])
def test_corrupt_files_rejected(tmp_path, mutate):
    save_mask(pruned(), tmp_path / "a.dgm", H)
    p = tmp_path / "a.dgm"
    p.write_bytes(mutate(p.read_bytes()))
    with pytest.raises(MaskFormatError):
        load_mask(p, SHAPES)


def test_unknown_group_and_unfrozen_net_rejected(tmp_path):
    save_mask(pruned(), tmp_path / "a.dgm", H)
    with pytest.raises(MaskFormatError):
        load_mask(tmp_path / "a.dgm", {"x": (4, 5)})
    with pytest.raises(MaskFormatError):
        save_mask(DiffSubnetwork.create(SHAPES, RngState(0)), tmp_path / "b.dgm", H)


def test_checkpoint_round_trip(tmp_path):
    r = RngState(4)
    params = {g: r.normal(s) for g, s in SHAPES.items()}
    save_checkpoint(params, tmp_path / "c.dgc", H)
    back = load_checkpoint(tmp_path / "c.dgc", SHAPES, H)
    assert all(back[g].tobytes() == params[g].tobytes() for g in SHAPES)
    assert not back["x"].flags.writeable
    with pytest.raises(MaskFormatError):
        load_checkpoint(tmp_path / "c.dgc", {"x": (5, 4), "y": (3,), "z": (1,)})
    with pytest.raises(MaskFormatError):
        load_mask(tmp_path / "c.dgc", SHAPES)


def test_gate_state_round_trip_prunes_identically(tmp_path):
    net = DiffSubnetwork.create(SHAPES, RngState(5), structured=True, log_alpha_std=1.0)
    save_gate_state(net, tmp_path / "g.dgc", H)
    back = load_gate_state(tmp_path / "g.dgc", SHAPES, H)
    assert back.structured
    a, b = magnitude_prune(net, 0.4)[0], magnitude_prune(back, 0.4)[0]
    for g in SHAPES:
        assert np.array_equal(a.frozen_mask[g], b.frozen_mask[g])
        assert a.delta_arrays()[g].tobytes() == b.delta_arrays()[g].tobytes()


def test_real_model_hash_is_accepted(tmp_path):
    h = model_hash(TrainPlan())
    save_mask(pruned(), tmp_path / "a.dgm", h)
    assert read_mask_header(tmp_path / "a.dgm") == h
