import csv

import numpy as np
import pytest
import torch

from cxgan.buffer import HistoryBuffer
from cxgan.core import ConfigError, DatasetSplit, Image, Label, RangeTag, SchemeError, StateError
from cxgan.nets import Scheme, build_bundle
from cxgan.train import (
    CONTINUE,
    STOP,
    EarlyStopConfig,
    OptimizerConfig,
    TrainConfig,
    early_stop_check,
    read_pair_cache,
    split_validation,
    synthesize_pairs,
    train_ci_cyclegan,
    train_integrated,
    train_rgan,
    write_pair_cache,
)

ES = EarlyStopConfig(patience=10, mode="maximize")


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_early_stop_examples():
    assert early_stop_check([1, 2, 3], ES) == CONTINUE
    hist = [0.1, 0.2, 0.9] + [0.5] * 9
    assert early_stop_check(hist, ES) == CONTINUE
    assert early_stop_check(hist + [0.5], ES) == STOP  # epoch 13
    assert early_stop_check([0.7] * 10, ES) == CONTINUE
    assert early_stop_check([0.7] * 11, ES) == STOP
    assert early_stop_check([3, 2, 1], EarlyStopConfig(patience=2, mode="minimize")) == CONTINUE


def test_early_stop_needs_patience_plus_one_points():
    for n in range(1, 11):
        assert early_stop_check([0.0] * n, ES) == CONTINUE
    with pytest.raises(ConfigError):
        early_stop_check([], ES)
    with pytest.raises(ConfigError):
        EarlyStopConfig(patience=0)


def test_optimizer_defaults():
    o = OptimizerConfig()
    assert (o.learning_rate, o.beta1, o.beta2, o.batch_size) == (2e-4, 0.5, 0.9, 1)
    with pytest.raises(ConfigError):
        OptimizerConfig(beta1=1.0)


def _params(bundle):
    return {f"{n}.{k}": v.detach().clone() for n, net in bundle.networks().items()
            for k, v in net.state_dict().items()}


def test_zero_learning_rate_freezes_parameters(small_data, tiny_specs, monkeypatch):
    import cxgan.train as T
    snap = {}
    real = T.build_bundle

    def capture(*a, **kw):
        b = real(*a, **kw)
        snap.update(_params(b))
        return b

    monkeypatch.setattr(T, "build_bundle", capture)
    b = train_integrated(small_data, *tiny_specs, opt=OptimizerConfig(learning_rate=0.0),
                         cfg=TrainConfig(max_epochs=1))
    after = _params(b)
    assert snap.keys() == after.keys()
    for k in snap:
        assert torch.equal(snap[k], after[k]), k


def test_deterministic_replay(small_data, tiny_specs, tmp_path):
    for name in ("a", "b"):
        train_integrated(small_data, *tiny_specs, cfg=TrainConfig(max_epochs=2, run_dir=str(tmp_path / name)))
    a = (tmp_path / "a" / "metrics.csv").read_bytes()
    assert a == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert b"wall_time_s" not in a
    assert len((tmp_path / "a" / "timing.csv").read_text().splitlines()) == 2


def test_run_directory_layout(small_data, tiny_specs, tmp_path):
    train_integrated(small_data, *tiny_specs, cfg=TrainConfig(max_epochs=2, run_dir=str(tmp_path)))
    for rel in ("config.snapshot", "metrics.csv", "best.ckpt", "last.ckpt",
                "checkpoints/epoch_1.ckpt", "checkpoints/epoch_2.ckpt"):
        assert (tmp_path / rel).exists(), rel
    assert list((tmp_path / "samples").glob("epoch_2_*.png"))
    rows = _rows(tmp_path / "metrics.csv")
    assert [r["epoch"] for r in rows] == ["1", "2"]
    assert {"cxgan", "cycle_fwd", "cycle_bwd", "total", "val_ncc"} <= rows[0].keys()


def test_nondeterministic_mode_logs_wall_time(small_data, tiny_specs, tmp_path):
    train_integrated(small_data, *tiny_specs,
                     cfg=TrainConfig(max_epochs=1, run_dir=str(tmp_path), deterministic=False))
    assert float(_rows(tmp_path / "metrics.csv")[0]["wall_time_s"]) > 0


def test_resume_continues_epoch_counter(small_data, tiny_specs, tmp_path):
    train_integrated(small_data, *tiny_specs, cfg=TrainConfig(max_epochs=2, run_dir=str(tmp_path)))
    train_integrated(small_data, *tiny_specs, cfg=TrainConfig(
        max_epochs=3, run_dir=str(tmp_path), resume=str(tmp_path / "last.ckpt")))
    assert [r["epoch"] for r in _rows(tmp_path / "metrics.csv")] == ["1", "2", "3"]


def test_resume_matches_uninterrupted_run(small_data, tiny_specs, tmp_path):
    train_integrated(small_data, *tiny_specs, cfg=TrainConfig(max_epochs=3, run_dir=str(tmp_path / "full")))
    train_integrated(small_data, *tiny_specs, cfg=TrainConfig(max_epochs=2, run_dir=str(tmp_path / "split")))
    train_integrated(small_data, *tiny_specs, cfg=TrainConfig(
        max_epochs=3, run_dir=str(tmp_path / "split"), resume=str(tmp_path / "split" / "last.ckpt")))
    assert (tmp_path / "full" / "metrics.csv").read_bytes() == (tmp_path / "split" / "metrics.csv").read_bytes()


def test_resume_wrong_scheme(small_data, tiny_specs, tmp_path):
    train_integrated(small_data, *tiny_specs, cfg=TrainConfig(max_epochs=1, run_dir=str(tmp_path)))
    with pytest.raises(SchemeError):
        train_ci_cyclegan(small_data, *tiny_specs, cfg=TrainConfig(max_epochs=2, resume=str(tmp_path / "last.ckpt")))


@pytest.mark.parametrize("drop", [Label.POSITIVE, Label.NEGATIVE])
def test_single_class_rejected(small_data, tiny_specs, drop, monkeypatch):
    data = DatasetSplit([s for s in small_data.train if s.label is not drop], small_data.test)
    steps = []
    monkeypatch.setattr(torch.optim.Adam, "step", lambda self, *a, **k: steps.append(1))
    for fn in (train_integrated, train_ci_cyclegan):
        with pytest.raises(ConfigError):
            fn(data, *tiny_specs, cfg=TrainConfig(max_epochs=1))
    assert not steps


def test_one_step_per_network_per_batch(small_data, tiny_specs, monkeypatch):
    counts = {}
    real = torch.optim.Adam.step

    def counting(self, *a, **k):
        counts[id(self)] = counts.get(id(self), 0) + 1
        return real(self, *a, **k)

    monkeypatch.setattr(torch.optim.Adam, "step", counting)
    draws = []
    real_draw = HistoryBuffer.draw_batch
    monkeypatch.setattr(HistoryBuffer, "draw_batch",
                        lambda self, batch, rng: draws.append(id(self)) or real_draw(self, batch, rng))
    train_integrated(small_data, *tiny_specs, cfg=TrainConfig(max_epochs=1, val_fraction=0.0))
    pos = len(small_data.by_label("train", Label.POSITIVE))
    neg = len(small_data.by_label("train", Label.NEGATIVE))
    batches = max(pos, neg)
    assert sorted(counts.values()) == [batches] * 4
    # both discriminators draw from their own history every batch
    assert len(draws) == 2 * batches and len(set(draws)) == 2


def test_epoch_covers_larger_class(small_data, tiny_specs, monkeypatch):
    pos = [s for s in small_data.train if s.label is Label.POSITIVE]
    neg = [s for s in small_data.train if s.label is Label.NEGATIVE][:3]
    data = DatasetSplit(pos + neg, small_data.test)
    import cxgan.train as T
    seen = []
    real = T._IntegratedLoop.step
    monkeypatch.setattr(T._IntegratedLoop, "step", lambda self, xp, xn: seen.append(1) or real(self, xp, xn))
    train_integrated(data, *tiny_specs, cfg=TrainConfig(max_epochs=1, val_fraction=0.0))
    assert len(seen) == len(pos)


def test_validation_slice_is_held_out(small_data):
    pos = small_data.by_label("train", Label.POSITIVE)
    tr, val = split_validation(pos, TrainConfig())
    assert len(tr) + len(val) == len(pos) and val
    assert not {s.sample_id for s in tr} & {s.sample_id for s in val}


def _ci_bundle(tiny_specs, trained=True):
    b = build_bundle(Scheme.CASCADED_CI, *tiny_specs)
    b.trained = trained
    return b


def test_synthesize_pairs_contract(small_data, tiny_specs):
    pos = small_data.by_label("train", Label.POSITIVE)[:10]
    pairs = synthesize_pairs(_ci_bundle(tiny_specs), pos)
    assert len(pairs) == 10
    for (a, b), s in zip(pairs, pos):
        assert a.range_tag is b.range_tag is RangeTag.MODEL11
        assert b.data.min() >= -1 and b.data.max() <= 1
        assert np.allclose(a.data, 2 * s.image.data - 1, atol=1e-6)


def test_synthesize_pairs_identity_generator(small_data, tiny_specs):
    b = _ci_bundle(tiny_specs)
    b.forward_generator.forward = lambda x: x
    pos = small_data.by_label("train", Label.POSITIVE)[:4]
    for a, c in synthesize_pairs(b, pos):
        assert np.array_equal(a.data, c.data)


def test_synthesize_pairs_requires_trained_ci(small_data, tiny_specs):
    pos = small_data.by_label("train", Label.POSITIVE)[:2]
    with pytest.raises(StateError):
        synthesize_pairs(_ci_bundle(tiny_specs, trained=False), pos)
    with pytest.raises(SchemeError):
        synthesize_pairs(build_bundle(Scheme.INTEGRATED, *tiny_specs), pos)


def test_rgan_single_pair_runs(tiny_specs):
    x = Image(np.zeros((32, 32)), RangeTag.MODEL11)
    b = train_rgan([(x, x)], *tiny_specs, cfg=TrainConfig(max_epochs=1))
    assert b.scheme is Scheme.CASCADED_RGAN and b.epoch == 1


def test_rgan_empty_pairs(tiny_specs):
    with pytest.raises(ConfigError):
        train_rgan([], *tiny_specs)


def test_pair_cache_round_trip(tmp_path, rng):
    pairs = [(Image(rng.uniform(-1, 1, (4, 4)), RangeTag.MODEL11), Image(rng.uniform(-1, 1, (4, 4)), RangeTag.MODEL11))
             for _ in range(3)]
    write_pair_cache(tmp_path, pairs, ["a", "b", "c"])
    back = read_pair_cache(tmp_path)
    for (a, b), (c, d) in zip(pairs, back):
        assert np.array_equal(a.data.astype(np.float32), c.data)
        assert np.array_equal(b.data.astype(np.float32), d.data)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(max_epochs=0)
    with pytest.raises(ConfigError):
        TrainConfig(val_fraction=1.0)


def test_resume_from_earlier_checkpoint_rewrites_later_rows(small_data, tiny_specs, tmp_path):
    run = tmp_path / "run"
    train_integrated(small_data, *tiny_specs, cfg=TrainConfig(max_epochs=3, run_dir=str(run)))
    first = (run / "metrics.csv").read_bytes()
    train_integrated(small_data, *tiny_specs, cfg=TrainConfig(
        max_epochs=3, run_dir=str(run), resume=str(run / "checkpoints" / "epoch_1.ckpt")))
    assert (run / "metrics.csv").read_bytes() == first
    assert len((run / "timing.csv").read_text().splitlines()) == 3
