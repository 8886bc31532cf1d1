import dataclasses
import re
import time

import numpy as np
import pytest

from recon3dpx.autodiff import DimensionError, Tensor, no_grad
from recon3dpx.network import (
    CheckpointError,
    DigestMismatch,
    Net3DPX,
    NetworkConfig,
    load_checkpoint,
    model_state,
    parameter_count,
    read_checkpoint,
    save_checkpoint,
)

DESK = NetworkConfig()


def px(batch=2, hw=(32, 64), seed=0, dtype=np.float32):
    return Tensor(np.random.default_rng(seed).random((batch, 1, *hw)).astype(dtype))


def shapes(out):
    return {k: v.shape for k, v in out.levels.items()}


def test_desk_shapes():
    out = Net3DPX(DESK)(px())
    assert out.final.shape == (2, 16, 32, 64)
    assert shapes(out) == {3: (2, 16, 4, 8), 4: (2, 16, 4, 8), 5: (2, 16, 8, 16), 6: (2, 16, 16, 32), 7: (2, 16, 32, 64)}


def test_paper_scale_dry_run():
    cfg = NetworkConfig.paper_scale()
    model = Net3DPX(cfg).eval()
    start = time.perf_counter()
    with no_grad():
        out = model(px(1, (128, 256)))
    assert time.perf_counter() - start < 60
    assert out.final.shape == (1, 128, 128, 256)
    assert [v.shape[2:] for _, v in sorted(out.levels.items())] == [(16, 32), (16, 32), (32, 64), (64, 128), (128, 256)]


def test_cnn_and_hybrid_decoders_share_the_output_contract():
    hyb = Net3DPX(DESK)(px())
    cnn = Net3DPX(dataclasses.replace(DESK, decoder_type="cnn"))(px())
    assert shapes(hyb) == shapes(cnn)


def test_non_progressive_final_is_bit_identical():
    prog = Net3DPX(DESK, seed=3)(px())
    flat = Net3DPX(dataclasses.replace(DESK, progressive=False), seed=3)(px())
    assert list(flat.levels) == [7]
    assert np.array_equal(prog.final.data, flat.final.data)


def test_wrong_input_size_errors():
    with pytest.raises(DimensionError, match="spatial size"):
        Net3DPX(DESK)(px(1, (32, 32)))


def test_non_divisible_config_errors():
    with pytest.raises(ValueError, match="divisible by 8"):
        NetworkConfig(input_hw=(36, 64))


def test_stem_parameter_count():
    assert Net3DPX(NetworkConfig.paper_scale()).stem.weight.size + 16 == 160


@pytest.mark.parametrize(
    "cfg",
    [DESK, dataclasses.replace(DESK, decoder_type="cnn"), NetworkConfig.paper_scale(), NetworkConfig(block_size=2, grid_size=8)],
)
def test_parameter_count_matches_module_walk(cfg):
    walked = sum(p.size for p in Net3DPX(cfg).parameters())
    assert parameter_count(cfg) == walked


def test_init_is_seed_deterministic():
    a = model_state(Net3DPX(DESK, seed=5))
    b = model_state(Net3DPX(DESK, seed=5))
    c = model_state(Net3DPX(DESK, seed=6))
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not all(np.array_equal(a[k], c[k]) for k in a)


def _dead_parameters(model):
    out = model(px())
    total = None
    for t in out.levels.values():
        s = (t * t).mean()
        total = s if total is None else total + s
    total.backward()
    return [n for n, p in model.named_parameters() if p.grad is None or not np.any(p.grad)]


def test_only_gating_norms_are_silent_at_init():
    # the spatial mixing weight starts at zero, so nothing flows back into the
    # LayerNorm on the gated half until that weight moves
    dead = _dead_parameters(Net3DPX(DESK))
    assert len(dead) == 16
    assert all(re.fullmatch(r"dec\d\.gmlp\.(block|grid)_gate\.norm\.(gamma|beta)", n) for n in dead)


def test_every_parameter_receives_gradient_once_gating_moves():
    model = Net3DPX(DESK)
    rng = np.random.default_rng(0)
    for name, p in model.named_parameters():
        if name.endswith("_gate.weight"):
            p.data[...] = rng.normal(0, 0.1, p.shape)
    assert _dead_parameters(model) == []


# --- checkpoints ------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    model = Net3DPX(DESK, seed=1)
    model(px())  # train-mode pass moves the BN running stats off their defaults
    model.eval()
    with no_grad():
        before = model(px(seed=4)).final.data
    save_checkpoint(tmp_path / "m.ckpt", model)
    loaded = load_checkpoint(tmp_path / "m.ckpt", DESK).eval()
    with no_grad():
        after = loaded(px(seed=4)).final.data
    assert np.array_equal(before, after)
    cfg, state = read_checkpoint(tmp_path / "m.ckpt")
    assert cfg == DESK
    assert any(k.endswith("stats.var") for k in state)


def test_checkpoint_digest_mismatch(tmp_path):
    save_checkpoint(tmp_path / "m.ckpt", Net3DPX(DESK))
    other = dataclasses.replace(DESK, depth=8, encoder_channels=(8, 16, 16, 8))
    with pytest.raises(DigestMismatch) as info:
        load_checkpoint(tmp_path / "m.ckpt", other)
    assert info.value.expected == other.digest()
    assert info.value.found == DESK.digest()


def test_corrupt_checkpoint_rejected(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOPE" + bytes(40))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_config_digest_is_stable_across_round_trip():
    assert NetworkConfig.from_dict(DESK.to_dict()).digest() == DESK.digest()
