import numpy as np
import pytest
import torch

from inharmony.checkpoint import (MANIFEST, CheckpointError, import_frozen_weights, load_into, read_checkpoint,
                                  save_store, save_tensors)
from inharmony.diffcore import ParamStore
from inharmony.domenc import DomainEncoderConfig, init_domain_encoder
from inharmony.optim import Adam


def small_store(seed=0):
    g = torch.Generator().manual_seed(seed)
    store = ParamStore()
    store.add("a.w", torch.randn(3, 2, generator=g))
    store.add("a.b", torch.randn(3, generator=g))
    store.add("frozen.k", torch.randn(2, 2, 1, 1, generator=g), trainable=False)
    return store


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_manifest_format(tmp_path):
    save_store(tmp_path, small_store())
    lines = (tmp_path / MANIFEST).read_text().splitlines()
    assert lines[0] == "a.b\tf32\t3\tparams/a.b.f32"
    assert lines[1] == "a.w\tf32\t3,2\tparams/a.w.f32"
    assert len((tmp_path / "params/a.w.f32").read_bytes()) == 6 * 4


def test_save_load_save_is_byte_identical(tmp_path):
    store = small_store()
    opt = Adam(store)
    for _, p in store.trainable():
        p.grad = torch.ones_like(p)
    opt.step()
    save_store(tmp_path / "one", store, *opt.state())
    fresh = small_store(seed=9)
    ckpt = load_into(fresh, tmp_path / "one")
    opt2 = Adam(fresh)
    opt2.load_state(ckpt.moments, ckpt.step)
    save_store(tmp_path / "two", fresh, *opt2.state())
    assert tree_bytes(tmp_path / "one") == tree_bytes(tmp_path / "two")
    assert opt2.step_count == 1


def test_optimizer_section(tmp_path):
    save_tensors(tmp_path, {"x": np.zeros(2)}, {"m": {"x": np.ones(2)}, "v": {"x": np.full(2, 2.0)}}, step=5)
    text = (tmp_path / MANIFEST).read_text()
    assert "[optimizer]\nstep\t5\nm:x\tf32\t2\toptim/m.x.f32\nv:x" in text
    ckpt = read_checkpoint(tmp_path)
    assert ckpt.step == 5 and ckpt.moments["v"]["x"].tolist() == [2.0, 2.0]


def test_unknown_name_refused(tmp_path):
    save_tensors(tmp_path, {"a.w": np.zeros((3, 2)), "intruder": np.zeros(1)})
    with pytest.raises(CheckpointError, match="unknown"):
        load_into(small_store(), tmp_path)


def test_missing_name_strict(tmp_path):
    save_tensors(tmp_path, {"a.w": np.zeros((3, 2))})
    with pytest.raises(CheckpointError, match="lacks"):
        load_into(small_store(), tmp_path)
    store = small_store()
    load_into(store, tmp_path, strict=False)
    assert not store["a.w"].any()


def test_shape_mismatch(tmp_path):
    save_tensors(tmp_path, {"a.w": np.zeros((2, 3)), "a.b": np.zeros(3), "frozen.k": np.zeros((2, 2, 1, 1))})
    with pytest.raises(CheckpointError):
        load_into(small_store(), tmp_path)


def test_truncated_tensor_file(tmp_path):
    save_store(tmp_path, small_store())
    (tmp_path / "params/a.w.f32").write_bytes(b"\x00" * 8)
    with pytest.raises(CheckpointError, match="expected shape"):
        read_checkpoint(tmp_path)


def test_missing_manifest(tmp_path):
    with pytest.raises(CheckpointError, match="no checkpoint"):
        read_checkpoint(tmp_path)


def test_float32_little_endian(tmp_path):
    save_tensors(tmp_path, {"x": np.array([1.0, -2.5])})
    assert (tmp_path / "params/x.f32").read_bytes() == np.array([1.0, -2.5], "<f4").tobytes()


def test_import_frozen_weights(tmp_path):
    cfg = DomainEncoderConfig(widths=(4, 4, 4), depths=(1, 1, 1), code_dim=4)
    src, dst = ParamStore(), ParamStore()
    init_domain_encoder(src, cfg)
    init_domain_encoder(dst, DomainEncoderConfig(widths=(4, 4, 4), depths=(1, 1, 1), code_dim=4, seed=3))
    save_tensors(tmp_path, dict(src.frozen()))
    proj_before = {n: t.clone() for n, t in dst.trainable()}
    import_frozen_weights(dst, tmp_path)
    for name, t in src.frozen():
        assert torch.equal(dst[name], t)
    for name, t in proj_before.items():
        assert torch.equal(dst[name], t)


def test_import_rejects_non_extractor_names(tmp_path):
    store = ParamStore()
    init_domain_encoder(store, DomainEncoderConfig(widths=(4, 4, 4), depths=(1, 1, 1), code_dim=4))
    save_tensors(tmp_path, dict(store.items()))
    with pytest.raises(CheckpointError, match="unknown"):
        import_frozen_weights(store, tmp_path)
