import struct

import numpy as np
import pytest

from nablanet.checkpoint import (
    KIND_PARAM,
    CheckpointVersionError,
    CorruptManifestError,
    TruncatedPayloadError,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
    transfer_load,
)
from nablanet.models import ModelSpec, build_model, count_params
from nablanet.optim import Adam
from nablanet.tensor import Tensor, no_grad


def tiny_nabla(seed=0):
    return build_model(ModelSpec("nabla", "AB", 2, (2, 4, 8), input_size=8, seed=seed))


def tiny_irrcnn(classes=3, seed=0):
    return build_model(ModelSpec("irrcnn", widths=(4, 8, 8, 8), input_size=16, classes=classes, seed=seed))


@pytest.fixture
def saved(tmp_path):
    m = tiny_nabla(seed=1)
    with no_grad():
        m.forward(Tensor(np.random.default_rng(0).random((2, 3, 8, 8)).astype(np.float32)))
    opt = Adam(m.parameters())
    path = save_checkpoint(m, tmp_path / "m.nbln", epoch=7, optimizer=opt)
    return m, path


def test_round_trip_bit_exact(saved):
    m, path = saved
    loaded, ckpt = load_checkpoint(path)
    assert ckpt.epoch == 7 and loaded.spec == m.spec
    for (na, a), (nb, b) in zip(m.named_parameters(), loaded.named_parameters()):
        assert na == nb and a.data.tobytes() == b.data.tobytes()
    for (_, sa), (_, sb) in zip(m.named_bn_states(), loaded.named_bn_states()):
        assert sa.mean.tobytes() == sb.mean.tobytes() and sa.updates == sb.updates
    assert ckpt.optimizer_state and "optim.step" in ckpt.optimizer_state


def test_manifest_param_entries_match_model(saved):
    m, path = saved
    ckpt = read_checkpoint(path)
    params = [e for e in ckpt.entries if e.kind == KIND_PARAM]
    assert len(params) == len(m.named_parameters())
    assert sum(int(np.prod(e.shape)) for e in params) == count_params(m)
    assert path.read_bytes()[:4] == b"NBLN"


def test_loaded_model_predicts_identically(saved):
    m, path = saved
    loaded, _ = load_checkpoint(path)
    x = Tensor(np.random.default_rng(3).random((1, 3, 8, 8)).astype(np.float32))
    with no_grad():
        assert m.forward(x, "infer").data.tobytes() == loaded.forward(x, "infer").data.tobytes()


def test_truncated_payload(saved, tmp_path):
    _, path = saved
    bad = tmp_path / "trunc.nbln"
    bad.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(TruncatedPayloadError):
        load_checkpoint(bad)


def test_truncated_inside_manifest(saved, tmp_path):
    _, path = saved
    bad = tmp_path / "short.nbln"
    bad.write_bytes(path.read_bytes()[:40])
    with pytest.raises(CorruptManifestError):
        read_checkpoint(bad)


def test_version_mismatch(saved, tmp_path):
    _, path = saved
    buf = bytearray(path.read_bytes())
    buf[4:8] = struct.pack("<I", 99)
    bad = tmp_path / "v99.nbln"
    bad.write_bytes(bytes(buf))
    with pytest.raises(CheckpointVersionError, match="99"):
        read_checkpoint(bad)


def test_bad_magic_and_offsets(saved, tmp_path):
    _, path = saved
    buf = path.read_bytes()
    (tmp_path / "magic.nbln").write_bytes(b"XXXX" + buf[4:])
    with pytest.raises(CorruptManifestError, match="magic"):
        read_checkpoint(tmp_path / "magic.nbln")
    # shift the first entry's offset so it overlaps the payload start
    ckpt = read_checkpoint(path)
    first = ckpt.entries[0].name.encode()
    pos = buf.index(struct.pack("<H", len(first)) + first) + 2 + len(first) + 2 + 4 * len(ckpt.entries[0].shape)
    corrupt = bytearray(buf)
    corrupt[pos : pos + 8] = struct.pack("<Q", 4)
    (tmp_path / "off.nbln").write_bytes(bytes(corrupt))
    with pytest.raises(CorruptManifestError, match="offset"):
        read_checkpoint(tmp_path / "off.nbln")


def test_errors_are_distinct_types():
    assert len({CorruptManifestError, TruncatedPayloadError, CheckpointVersionError}) == 3
    assert not issubclass(TruncatedPayloadError, CorruptManifestError)


def test_transfer_same_spec_loads_everything(tmp_path):
    src = tiny_irrcnn(seed=1)
    path = save_checkpoint(src, tmp_path / "src.nbln")
    dst = tiny_irrcnn(seed=2)
    rep = transfer_load(dst, path)
    assert rep.skipped == [] and len(rep.loaded) == len(dst.named_parameters())
    for (_, a), (_, b) in zip(src.named_parameters(), dst.named_parameters()):
        assert a.data.tobytes() == b.data.tobytes()


def test_transfer_skips_mismatched_head(tmp_path):
    src = tiny_irrcnn(classes=7, seed=1)
    path = save_checkpoint(src, tmp_path / "src.nbln")
    dst = tiny_irrcnn(classes=3, seed=2)
    before = {n: t.data.copy() for n, t in dst.named_parameters()}
    rep = transfer_load(dst, path)
    src_shapes = {n: t.shape for n, t in src.named_parameters()}
    expected_skip = [n for n, t in dst.named_parameters() if src_shapes.get(n) != t.shape]
    assert rep.skipped == expected_skip == ["classifier.weight", "classifier.bias"]
    for n, t in dst.named_parameters():
        if n in rep.skipped:
            np.testing.assert_array_equal(t.data, before[n])
        else:
            np.testing.assert_array_equal(t.data, src.param_dict()[n].data)


def test_transfer_from_unrelated_checkpoint_warns(tmp_path):
    path = save_checkpoint(tiny_nabla(), tmp_path / "seg.nbln")
    dst = tiny_irrcnn()
    rep = transfer_load(dst, path)
    assert rep.loaded == [] and len(rep.skipped) == len(dst.named_parameters())
    assert rep.warning


def test_empty_checkpoint_transfer(tmp_path):
    spec = ModelSpec("irrcnn", widths=(4, 8, 8, 8), input_size=16, classes=3)
    buf = bytearray(b"NBLN") + struct.pack("<I", 1)
    sb = spec.to_json().encode()
    buf += struct.pack("<I", len(sb)) + sb + struct.pack("<II", 0, 0) + struct.pack("<Q", 0)
    path = tmp_path / "empty.nbln"
    path.write_bytes(bytes(buf))
    rep = transfer_load(tiny_irrcnn(), path)
    assert rep.loaded == [] and rep.warning
