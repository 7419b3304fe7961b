import numpy as np
import pytest
import torch

from cxgan.checkpoint import MAGIC, decode, encode, file_hash, load_checkpoint, save_checkpoint
from cxgan.core import CheckpointError, LossWeights
from cxgan.nets import DiscriminatorSpec, GeneratorSpec, Scheme, build_bundle


@pytest.fixture
def bundle():
    b = build_bundle(Scheme.INTEGRATED, GeneratorSpec(16, 4, 2), DiscriminatorSpec(16, 4, 1),
                     LossWeights(5.0, 50.0), seed=3)
    # one optimiser step so there is Adam state to carry
    opt = torch.optim.Adam(b.forward_generator.parameters(), lr=2e-4, betas=(0.5, 0.9))
    b.forward_generator(torch.rand(1, 1, 16, 16)).sum().backward()
    opt.step()
    b.state["optimizers"] = {"gen": opt.state_dict()}
    b.state["buffers"] = {"fake_neg": torch.rand(3, 1, 16, 16)}
    b.epoch = 7
    b.trained = True
    return b


def test_round_trip_bit_exact(bundle, tmp_path):
    path = save_checkpoint(bundle, tmp_path / "a.ckpt", config={"lr": 2e-4})
    back = load_checkpoint(path)
    assert back.scheme is Scheme.INTEGRATED and back.epoch == 7 and back.trained
    assert back.weights == LossWeights(5.0, 50.0)
    assert back.state["config"] == {"lr": 2e-4}
    x = torch.rand(2, 1, 16, 16)
    for name, net in bundle.networks().items():
        other = back.networks()[name]
        net.eval(), other.eval()
        with torch.no_grad():
            assert net(x).numpy().tobytes() == other(x).numpy().tobytes()
    assert torch.equal(back.state["buffers"]["fake_neg"], bundle.state["buffers"]["fake_neg"])


def test_optimizer_state_restored(bundle, tmp_path):
    back = load_checkpoint(save_checkpoint(bundle, tmp_path / "a.ckpt"))
    opt = torch.optim.Adam(back.forward_generator.parameters(), lr=1.0)
    opt.load_state_dict(back.state["optimizers"]["gen"])
    ref = bundle.state["optimizers"]["gen"]
    assert opt.param_groups[0]["lr"] == 2e-4
    assert opt.param_groups[0]["betas"] == (0.5, 0.9) or list(opt.param_groups[0]["betas"]) == [0.5, 0.9]
    for idx, st in ref["state"].items():
        got = opt.state_dict()["state"][idx]
        assert torch.equal(got["exp_avg"], st["exp_avg"])
        assert float(got["step"]) == float(st["step"])


def test_save_is_deterministic(bundle, tmp_path):
    a = save_checkpoint(bundle, tmp_path / "a.ckpt")
    b = save_checkpoint(bundle, tmp_path / "b.ckpt")
    assert file_hash(a) == file_hash(b)


def test_bad_magic(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"NOTACKPT" + bytes(64))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(p)


def test_bad_version():
    blob = bytearray(encode({"a": np.zeros(2)}, {}))
    blob[len(MAGIC)] = 9
    with pytest.raises(CheckpointError, match="version 9"):
        decode(bytes(blob))


def test_corrupt_payload(bundle, tmp_path):
    p = save_checkpoint(bundle, tmp_path / "a.ckpt")
    blob = bytearray(p.read_bytes())
    blob[100] ^= 0xFF
    p.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(p)


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nope.ckpt")


def test_rgan_bundle_round_trip(tmp_path):
    b = build_bundle(Scheme.CASCADED_RGAN, GeneratorSpec(16, 4, 2), DiscriminatorSpec(16, 4, 1))
    back = load_checkpoint(save_checkpoint(b, tmp_path / "r.ckpt"))
    assert back.backward_generator is None and back.disc_pos is None
