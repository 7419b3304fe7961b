"""Training loops for the cascaded (CycleGAN then residual GAN) and integrated schemes.

Every scheme alternates one generator step and one discriminator step per
batch, with each discriminator fed through a :class:`HistoryBuffer`. After
each epoch a validation score is computed, logged to ``metrics.csv`` and
used for best-checkpoint selection and patience-based early stopping.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterator, Optional, Sequence

import numpy as np
import torch

from . import losses as L
from .buffer import HistoryBuffer
from .checkpoint import load_checkpoint, save_checkpoint
from .core import (
    ConfigError,
    DatasetSplit,
    Image,
    Label,
    LabeledSample,
    LossWeights,
    MetricError,
    RangeTag,
    StateError,
)
from .imgio import write_f32, write_panel
from .metrics import ncc
from .nets import DiscriminatorSpec, GeneratorSpec, ModelBundle, Scheme, build_bundle

log = logging.getLogger(__name__)

CONTINUE = "continue"
STOP = "stop"


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.9
    batch_size: int = 1

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


@dataclass(frozen=True)
class EarlyStopConfig:
    patience: int = 10
    metric: str = "auto"
    mode: str = "auto"  # maximize | minimize | auto (from the metric id)

    def __post_init__(self):
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.mode not in ("auto", "maximize", "minimize"):
            raise ConfigError(f"unknown early-stop mode {self.mode!r}")

    def resolved_mode(self, metric_id: str) -> str:
        if self.mode != "auto":
            return self.mode
        return "maximize" if metric_id == "val_ncc" else "minimize"


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 100
    seed: int = 0
    deterministic: bool = True
    non_saturating: bool = True
    literal_backward_cycle: bool = False
    buffer_capacity: int = 50
    val_fraction: float = 0.1
    max_val: int = 64
    run_dir: Optional[str] = None
    checkpoint_every: int = 1
    save_samples: bool = True
    resume: Optional[str] = None
    device: str = "cpu"

    def __post_init__(self):
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in [0, 1)")


def early_stop_check(history: Sequence[float], cfg: EarlyStopConfig, mode: Optional[str] = None) -> str:
    """``stop`` once ``patience`` epochs have passed without a strict improvement.

    Ties are not improvements; NaN scores never improve.
    """
    if not history:
        raise ConfigError("early_stop_check needs at least one validation score")
    mode = mode or cfg.resolved_mode(cfg.metric)
    sign = 1.0 if mode == "maximize" else -1.0
    best_i, best = None, -math.inf
    for i, s in enumerate(history):
        v = sign * float(s)
        if not math.isnan(v) and v > best:
            best_i, best = i, v
    since = len(history) if best_i is None else len(history) - 1 - best_i
    return STOP if since >= cfg.patience else CONTINUE


def _is_better(score: float, best: Optional[float], mode: str) -> bool:
    if math.isnan(score):
        return False
    if best is None or math.isnan(best):
        return True
    return score > best if mode == "maximize" else score < best


def _to_tensor(images: Sequence[np.ndarray]) -> torch.Tensor:
    return torch.from_numpy(np.stack([np.asarray(a, dtype=np.float32) for a in images]))[:, None]


def _device_of(net: torch.nn.Module) -> torch.device:
    return next(net.parameters()).device


def _model11(sample: LabeledSample) -> np.ndarray:
    img = sample.image
    if img.range_tag is RangeTag.STORAGE01:
        return 2.0 * img.data - 1.0
    return img.data


def _set_requires_grad(nets, flag: bool) -> None:
    for n in nets:
        for p in n.parameters():
            p.requires_grad_(flag)


def _gt_has_variance(s: LabeledSample) -> bool:
    return s.ground_truth is not None and float(np.std(s.ground_truth.data)) > 0


def split_validation(positives: Sequence[LabeledSample], cfg: TrainConfig):
    """Deterministically hold out a slice of the training positives for validation."""
    n = len(positives)
    if n < 2 or cfg.val_fraction == 0:
        return list(positives), []
    k = min(cfg.max_val, max(1, int(round(cfg.val_fraction * n))))
    order = np.random.default_rng([cfg.seed, 0xA11D]).permutation(n)
    val_idx = set(order[:k].tolist())
    train = [s for i, s in enumerate(positives) if i not in val_idx]
    val = [s for i, s in enumerate(positives) if i in val_idx]
    return train, val


def _prepared(samples: Sequence[LabeledSample], transform, seed: int) -> list[LabeledSample]:
    """Validation view of raw samples: the transform's non-augmenting variant when it has one."""
    if transform is None:
        return list(samples)
    plain = getattr(transform, "deterministic", None)
    if plain is not None:
        return [plain(s) for s in samples]
    return [transform(s, np.random.default_rng([seed, 0x7E57, i])) for i, s in enumerate(samples)]


class _Pool:
    """Training images of one class, materialised once or transformed per draw."""

    def __init__(self, samples: Sequence[LabeledSample], transform=None):
        self.samples = list(samples)
        self.transform = transform
        self.tensor = None if transform else _to_tensor([_model11(s) for s in self.samples])

    def __len__(self):
        return len(self.samples)

    def take(self, idx: np.ndarray, rng: np.random.Generator) -> torch.Tensor:
        if self.tensor is not None:
            return self.tensor[torch.from_numpy(np.asarray(idx, dtype=np.int64))]
        return _to_tensor([_model11(self.transform(self.samples[i], rng)) for i in idx])


class _Loop:
    scheme: Scheme
    columns: tuple[str, ...] = ()

    def __init__(self, bundle: ModelBundle, opt: OptimizerConfig, stop: EarlyStopConfig,
                 cfg: TrainConfig, val: Sequence[LabeledSample], config_snapshot: Optional[dict] = None):
        self.bundle = bundle
        self.opt_cfg = opt
        self.stop = stop
        self.cfg = cfg
        self.val = list(val)
        self.w = bundle.weights
        self.device = torch.device(cfg.device)
        for net in bundle.networks().values():
            net.to(self.device)
        self.optims = {
            name: torch.optim.Adam(net.parameters(), lr=opt.learning_rate, betas=(opt.beta1, opt.beta2))
            for name, net in bundle.networks().items()
        }
        self.rng = np.random.default_rng([cfg.seed, 0x7A1, list(Scheme).index(bundle.scheme)])
        self.buffers = {"pos": HistoryBuffer(cfg.buffer_capacity), "neg": HistoryBuffer(cfg.buffer_capacity)}
        self.history: list[float] = []
        self.best: Optional[float] = None
        self.best_epoch = 0
        self.metric_id = self._resolve_metric()
        self.mode = stop.resolved_mode(self.metric_id)
        self.snapshot = {
            "scheme": bundle.scheme.value,
            "optimizer": asdict(opt),
            "early_stop": asdict(stop),
            "train": asdict(cfg),
            "weights": asdict(bundle.weights),
            "generator_spec": asdict(bundle.forward_generator.spec),
            "discriminator_spec": asdict(bundle.disc_neg.spec),
            "metric_id": self.metric_id,
        }
        if config_snapshot:
            self.snapshot["run"] = config_snapshot
        if bundle.state.get("optimizers"):
            self._restore(bundle.state)

    # -- state ---------------------------------------------------------------

    def _resolve_metric(self) -> str:
        if self.stop.metric not in ("auto", "val_ncc"):
            return self.stop.metric
        if self.val and all(_gt_has_variance(s) for s in self.val):
            return "val_ncc"
        if self.stop.metric == "val_ncc":
            raise ConfigError("val_ncc requested but validation samples lack informative ground truth")
        return self.fallback_metric

    fallback_metric = "val_fwd_l1"

    def _restore(self, state: dict) -> None:
        for name, sd in state["optimizers"].items():
            if name in self.optims:
                self.optims[name].load_state_dict(copy.deepcopy(sd))
        if "rng" in state:
            self.rng.bit_generator.state = _rng_state_from_json(state["rng"])
        for name, t in state.get("buffers", {}).items():
            self.buffers[name].load_state_tensor(t)
        self.history = [float(v) for v in state.get("history", [])]
        self.best = state.get("best_score")
        self.best_epoch = int(state.get("best_epoch", 0))

    def _capture(self) -> None:
        self.bundle.state.update({
            "optimizers": {k: copy.deepcopy(o.state_dict()) for k, o in self.optims.items()},
            "rng": _rng_state_to_json(self.rng.bit_generator.state),
            "buffers": {k: b.state_tensor() for k, b in self.buffers.items()},
            "history": list(self.history),
            "best_score": self.best,
            "best_epoch": self.best_epoch,
            "metric_id": self.metric_id,
            "config": self.snapshot,
        })

    # -- per-scheme hooks ------------------------------------------------------

    def batches(self) -> Iterator[tuple[torch.Tensor, torch.Tensor]]:
        raise NotImplementedError

    def step(self, xp: torch.Tensor, xn: torch.Tensor) -> dict[str, float]:
        raise NotImplementedError

    def map_of(self, x: torch.Tensor) -> torch.Tensor:
        """Signed counterfactual discrepancy used for validation and sample panels."""
        return self.bundle.forward_generator(x)

    def fallback_score(self) -> float:
        raise NotImplementedError

    # -- shared machinery ------------------------------------------------------

    def _gen_step(self, names: Sequence[str], loss: torch.Tensor) -> None:
        for n in names:
            self.optims[n].zero_grad(set_to_none=True)
        loss.backward()
        for n in names:
            self.optims[n].step()

    def validate(self) -> float:
        if not self.val:
            return float("nan")
        with torch.no_grad():
            if self.metric_id != "val_ncc":
                return self.fallback_score()
            x = _to_tensor([_model11(s) for s in self.val]).to(self.device)
            maps = self.map_of(x)[:, 0].double().cpu().numpy()
            scores = []
            for s, m in zip(self.val, maps):
                try:
                    # the disease effect is what the map removes: x+ - x- = -M
                    scores.append(ncc(-m, s.ground_truth.data))
                except MetricError:
                    scores.append(0.0)
            return float(np.mean(scores))

    def run(self) -> ModelBundle:
        cfg = self.cfg
        run_dir = Path(cfg.run_dir) if cfg.run_dir else None
        writer = None
        if cfg.deterministic:
            torch.use_deterministic_algorithms(True)
        torch.manual_seed(cfg.seed)
        if run_dir is not None:
            run_dir.mkdir(parents=True, exist_ok=True)
            (run_dir / "config.snapshot").write_text(json.dumps(self.snapshot, indent=1, sort_keys=True))
            resuming = self.bundle.epoch > 0 and (run_dir / "metrics.csv").exists()
            if resuming:
                # resuming from an earlier checkpoint (e.g. best.ckpt) drops the rows after it
                for name in ("metrics.csv", "timing.csv"):
                    _truncate_log(run_dir / name, self.bundle.epoch, has_header=name == "metrics.csv")
            fh = open(run_dir / "metrics.csv", "a" if resuming else "w", newline="")
            header = ["epoch", *self.columns, self.metric_id]
            if not cfg.deterministic:
                header.append("wall_time_s")
            writer = csv.writer(fh, lineterminator="\n")
            if not resuming:
                writer.writerow(header)
            tfh = open(run_dir / "timing.csv", "a" if resuming else "w", newline="") if cfg.deterministic else None
        best_nets = {k: copy.deepcopy(n.state_dict()) for k, n in self.bundle.networks().items()}
        best_state = None
        if run_dir is not None and 0 < self.best_epoch < self.bundle.epoch and (run_dir / "best.ckpt").exists():
            prior = load_checkpoint(run_dir / "best.ckpt")
            if prior.epoch == self.best_epoch:
                best_nets = {k: n.state_dict() for k, n in prior.networks().items()}
                best_state = prior.state
        try:
            for epoch in range(self.bundle.epoch + 1, cfg.max_epochs + 1):
                t0 = time.perf_counter()
                self.bundle.train_mode(True)
                sums: dict[str, float] = {}
                n = 0
                for xp, xn in self.batches():
                    for k, v in self.step(xp.to(self.device), xn.to(self.device)).items():
                        sums[k] = sums.get(k, 0.0) + v
                    n += 1
                means = {k: v / max(n, 1) for k, v in sums.items()}
                self.bundle.train_mode(False)
                score = self.validate()
                wall = time.perf_counter() - t0
                self.history.append(score)
                self.bundle.epoch = epoch
                self.bundle.trained = True
                improved = _is_better(score, self.best, self.mode)
                if improved:
                    self.best, self.best_epoch = score, epoch
                self._capture()
                log.info("%s epoch %d %s %s=%.4f (%.1fs)", self.bundle.scheme.value, epoch,
                         " ".join(f"{k}={means.get(k, float('nan')):.4f}" for k in self.columns),
                         self.metric_id, score, wall)
                if writer is not None:
                    row = [epoch, *[_fmt(means.get(k, float("nan"))) for k in self.columns], _fmt(score)]
                    if not cfg.deterministic:
                        row.append(f"{wall:.3f}")
                    writer.writerow(row)
                    fh.flush()
                    if tfh is not None:
                        tfh.write(f"{epoch},{wall:.3f}\n")
                        tfh.flush()
                if improved:
                    best_nets = {k: copy.deepcopy(n.state_dict()) for k, n in self.bundle.networks().items()}
                    best_state = copy.deepcopy({k: v for k, v in self.bundle.state.items()})
                if run_dir is not None:
                    if improved:
                        save_checkpoint(self.bundle, run_dir / "best.ckpt", self.snapshot)
                    if cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
                        save_checkpoint(self.bundle, run_dir / "checkpoints" / f"epoch_{epoch}.ckpt",
                                        self.snapshot)
                    save_checkpoint(self.bundle, run_dir / "last.ckpt", self.snapshot)
                    if cfg.save_samples and self.val:
                        self._write_samples(run_dir / "samples", epoch)
                if early_stop_check(self.history, self.stop, self.mode) == STOP:
                    log.info("early stop at epoch %d (best epoch %d)", epoch, self.best_epoch)
                    break
        finally:
            if writer is not None:
                fh.close()
                if tfh is not None:
                    tfh.close()
        if best_state is not None:
            for k, net in self.bundle.networks().items():
                net.load_state_dict(best_nets[k])
            self.bundle.state = best_state
            self.bundle.epoch = self.best_epoch
        self.bundle.train_mode(False)
        return self.bundle

    def _write_samples(self, out: Path, epoch: int) -> None:
        s = self.val[0]
        with torch.no_grad():
            x = _to_tensor([_model11(s)]).to(self.device)
            m = self.map_of(x)[0, 0].double().cpu().numpy()
        x01 = (x[0, 0].double().cpu().numpy() + 1) / 2
        cf = np.clip(x01 + m / 2, 0, 1)
        tiles = [x01, m, cf]
        signed = [False, True, False]
        if s.ground_truth is not None:
            tiles.append(np.asarray(s.ground_truth.data, dtype=np.float64))
            signed.append(True)
        write_panel(out / f"epoch_{epoch}_{s.sample_id or 'val'}.png", tiles, signed)


def _truncate_log(path: Path, last_epoch: int, has_header: bool) -> None:
    if not path.exists():
        return
    lines = path.read_text().splitlines(keepends=True)
    head, body = (lines[:1], lines[1:]) if has_header else ([], lines)
    kept = [ln for ln in body if ln.strip() and int(ln.split(",", 1)[0]) <= last_epoch]
    path.write_text("".join(head + kept))


def _fmt(v: float) -> str:
    return repr(float(v))


def _rng_state_to_json(state: dict) -> dict:
    return json.loads(json.dumps(state))


def _rng_state_from_json(state: dict) -> dict:
    return state


class _UnpairedLoop(_Loop):
    def __init__(self, bundle, opt, stop, cfg, pos: _Pool, neg: _Pool, val, config_snapshot=None):
        self.pos, self.neg = pos, neg
        super().__init__(bundle, opt, stop, cfg, val, config_snapshot)

    def batches(self):
        """One pass over the larger class; the smaller one is drawn with replacement."""
        rng = self.rng
        n_p, n_n = len(self.pos), len(self.neg)
        if n_p == n_n:
            ip, in_ = rng.permutation(n_p), rng.permutation(n_n)
        elif n_p > n_n:
            ip, in_ = rng.permutation(n_p), rng.integers(n_n, size=n_p)
        else:
            in_, ip = rng.permutation(n_n), rng.integers(n_p, size=n_n)
        b = self.opt_cfg.batch_size
        for i in range(0, len(ip), b):
            yield self.pos.take(ip[i:i + b], rng), self.neg.take(in_[i:i + b], rng)

    def fallback_score(self) -> float:
        x = _to_tensor([_model11(s) for s in self.val]).to(self.device)
        back = self.bundle.backward_generator
        return float(L.mean_l1(back(self.forward_image(x)), x))

    def forward_image(self, x):
        raise NotImplementedError


def _scores(D, x) -> L.Logits:
    return L.Logits(D.logits(x))


class _IntegratedLoop(_UnpairedLoop):
    columns = ("cxgan", "cycle_fwd", "cycle_bwd", "cxcc", "total", "g_adv", "d_loss")

    def forward_image(self, x):
        return x + self.bundle.forward_generator(x)

    def step(self, xp, xn):
        b = self.bundle
        G, F, Dp, Dn = b.forward_generator, b.backward_generator, b.disc_pos, b.disc_neg
        ns = self.cfg.non_saturating
        _set_requires_grad((Dp, Dn), False)
        m = G(xp)
        cf = xp + m
        rec_p = F(cf)
        fake_p = F(xn)
        m_back = G(fake_p)
        fwd, bwd = L.cx_cycle_terms(xp, m, rec_p, xn, fake_p, m_back,
                                    literal_backward=self.cfg.literal_backward_cycle)
        adv = L.generator_adversarial(_scores(Dn, cf), ns) + L.generator_adversarial(_scores(Dp, fake_p), ns)
        self._gen_step(("forward_generator", "backward_generator"), adv + self.w.lambda_cc * (fwd + bwd))

        _set_requires_grad((Dp, Dn), True)
        cf_hist = self.buffers["neg"].draw_batch(cf, self.rng)
        fp_hist = self.buffers["pos"].draw_batch(fake_p, self.rng)
        v = L.cx_gan_loss(_scores(Dp, xp), _scores(Dn, xn), _scores(Dp, fp_hist), _scores(Dn, cf_hist))
        self._gen_step(("disc_pos", "disc_neg"), -v)
        v, fwd, bwd, adv = v.detach(), fwd.detach(), bwd.detach(), adv.detach()
        obj = L.cx_objective(float(v), float(fwd + bwd), self.w)
        return {"cxgan": float(v), "cycle_fwd": float(fwd), "cycle_bwd": float(bwd),
                "cxcc": float(fwd + bwd), "total": float(obj.total), "g_adv": float(adv), "d_loss": -float(v)}


class _CycleLoop(_UnpairedLoop):
    columns = ("gan", "cycle_fwd", "cycle_bwd", "cc", "total", "g_adv", "d_loss")

    def forward_image(self, x):
        return self.bundle.forward_generator(x)

    def map_of(self, x):
        return self.bundle.forward_generator(x) - x

    def step(self, xp, xn):
        b = self.bundle
        G, F, Dp, Dn = b.forward_generator, b.backward_generator, b.disc_pos, b.disc_neg
        ns = self.cfg.non_saturating
        _set_requires_grad((Dp, Dn), False)
        fake_n = G(xp)
        rec_p = F(fake_n)
        fake_p = F(xn)
        rec_n = G(fake_p)
        fwd, bwd = L.mean_l1(rec_p, xp), L.mean_l1(rec_n, xn)
        adv = L.generator_adversarial(_scores(Dn, fake_n), ns) + L.generator_adversarial(_scores(Dp, fake_p), ns)
        self._gen_step(("forward_generator", "backward_generator"), adv + self.w.lambda_cc * (fwd + bwd))

        _set_requires_grad((Dp, Dn), True)
        fn_hist = self.buffers["neg"].draw_batch(fake_n, self.rng)
        fp_hist = self.buffers["pos"].draw_batch(fake_p, self.rng)
        v = L.gan_loss(_scores(Dp, xp), _scores(Dn, xn), _scores(Dp, fp_hist), _scores(Dn, fn_hist))
        self._gen_step(("disc_pos", "disc_neg"), -v)
        v, fwd, bwd, adv = v.detach(), fwd.detach(), bwd.detach(), adv.detach()
        obj = L.ci_objective(float(v), float(fwd + bwd), self.w)
        return {"gan": float(v), "cycle_fwd": float(fwd), "cycle_bwd": float(bwd),
                "cc": float(fwd + bwd), "total": float(obj.total), "g_adv": float(adv), "d_loss": -float(v)}


class _ResidualLoop(_Loop):
    columns = ("rgan", "l1r", "total", "g_adv", "d_loss")
    fallback_metric = "val_l1r"

    def __init__(self, bundle, opt, stop, cfg, pos: torch.Tensor, neg: torch.Tensor, val,
                 val_pairs: Optional[tuple[torch.Tensor, torch.Tensor]] = None, config_snapshot=None):
        self.xp_all, self.xn_all = pos, neg
        self.val_pairs = val_pairs
        super().__init__(bundle, opt, stop, cfg, val, config_snapshot)

    def batches(self):
        order = self.rng.permutation(len(self.xp_all))
        b = self.opt_cfg.batch_size
        for i in range(0, len(order), b):
            idx = torch.from_numpy(order[i:i + b].astype(np.int64))
            yield self.xp_all[idx], self.xn_all[idx]

    def validate(self) -> float:
        if self.metric_id == "val_ncc":
            return super().validate()
        return self.fallback_score()

    def fallback_score(self) -> float:
        if self.val_pairs is None:
            return float("nan")
        with torch.no_grad():
            xp, xn = (t.to(self.device) for t in self.val_pairs)
            return float(L.residual_l1(xp, self.bundle.forward_generator(xp), xn))

    def step(self, xp, xn):
        b = self.bundle
        G, Dn = b.forward_generator, b.disc_neg
        _set_requires_grad((Dn,), False)
        m = G(xp)
        cf = xp + m
        l1r = L.residual_l1(xp, m, xn)
        adv = L.generator_adversarial(_scores(Dn, cf), self.cfg.non_saturating)
        self._gen_step(("forward_generator",), adv + self.w.lambda_l1 * l1r)

        _set_requires_grad((Dn,), True)
        cf_hist = self.buffers["neg"].draw_batch(cf, self.rng)
        v = L.residual_gan_loss(_scores(Dn, xn), _scores(Dn, cf_hist))
        self._gen_step(("disc_neg",), -v)
        v, l1r, adv = v.detach(), l1r.detach(), adv.detach()
        obj = L.rgan_objective(float(v), float(l1r), self.w)
        return {"rgan": float(v), "l1r": float(l1r), "total": float(obj.total),
                "g_adv": float(adv), "d_loss": -float(v)}


# -- public entry points ------------------------------------------------------


def _check_classes(data: DatasetSplit) -> tuple[list[LabeledSample], list[LabeledSample]]:
    pos = data.by_label("train", Label.POSITIVE)
    neg = data.by_label("train", Label.NEGATIVE)
    if not pos or not neg:
        raise ConfigError(
            f"training needs both classes (got {len(pos)} positive, {len(neg)} negative samples)"
        )
    return pos, neg


def _prepare_bundle(scheme: Scheme, gen_spec, disc_spec, weights, cfg: TrainConfig) -> ModelBundle:
    if cfg.resume:
        bundle = load_checkpoint(cfg.resume)
        if bundle.scheme is not scheme:
            from .core import SchemeError
            raise SchemeError(f"cannot resume a {bundle.scheme.value} checkpoint as {scheme.value}")
        return bundle
    return build_bundle(scheme, gen_spec, disc_spec, weights, seed=cfg.seed)


def _check_size(samples: Sequence[LabeledSample], size: int, transform=None) -> None:
    if transform is not None:
        return
    for s in samples:
        if s.image.shape != (size, size):
            raise ConfigError(f"sample {s.sample_id} is {s.image.shape}, networks expect {size}x{size}")


def train_integrated(data: DatasetSplit, gen_spec: GeneratorSpec, disc_spec: DiscriminatorSpec,
                     weights: LossWeights = LossWeights(), opt: OptimizerConfig = OptimizerConfig(),
                     stop: EarlyStopConfig = EarlyStopConfig(), cfg: TrainConfig = TrainConfig(),
                     config_snapshot: Optional[dict] = None) -> ModelBundle:
    """Train the integrated scheme: map generator, back generator and both discriminators."""
    pos, neg = _check_classes(data)
    pos_train, val = split_validation(pos, cfg)
    val = _prepared(val, data.transform, cfg.seed)
    _check_size(pos + neg, gen_spec.input_size, data.transform)
    bundle = _prepare_bundle(Scheme.INTEGRATED, gen_spec, disc_spec, weights, cfg)
    loop = _IntegratedLoop(bundle, opt, stop, cfg, _Pool(pos_train, data.transform),
                           _Pool(neg, data.transform), val, config_snapshot)
    return loop.run()


def train_ci_cyclegan(data: DatasetSplit, gen_spec: GeneratorSpec, disc_spec: DiscriminatorSpec,
                      weights: LossWeights = LossWeights(), opt: OptimizerConfig = OptimizerConfig(),
                      stop: EarlyStopConfig = EarlyStopConfig(), cfg: TrainConfig = TrainConfig(),
                      config_snapshot: Optional[dict] = None) -> ModelBundle:
    """Phase one of the cascaded scheme: an unpaired positive <-> negative translator."""
    pos, neg = _check_classes(data)
    pos_train, val = split_validation(pos, cfg)
    val = _prepared(val, data.transform, cfg.seed)
    _check_size(pos + neg, gen_spec.input_size, data.transform)
    bundle = _prepare_bundle(Scheme.CASCADED_CI, gen_spec, disc_spec, weights, cfg)
    loop = _CycleLoop(bundle, opt, stop, cfg, _Pool(pos_train, data.transform),
                      _Pool(neg, data.transform), val, config_snapshot)
    return loop.run()


def synthesize_pairs(bundle: ModelBundle, positives: Sequence[LabeledSample],
                     batch_size: int = 64) -> list[tuple[Image, Image]]:
    """(x+, G^{c+->c-}(x+)) pairs, both as model11 Images."""
    if bundle.scheme is not Scheme.CASCADED_CI:
        from .core import SchemeError
        raise SchemeError(f"pair synthesis needs a cascaded_ci bundle, got {bundle.scheme.value}")
    if not bundle.trained:
        raise StateError("pair synthesis needs a trained (or loaded) cascaded_ci bundle")
    G = bundle.forward_generator
    was_training = G.training
    G.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(positives), batch_size):
            chunk = positives[i:i + batch_size]
            x = _to_tensor([_model11(s) for s in chunk])
            y = G(x.to(_device_of(G))).double().clamp(-1, 1).cpu().numpy()
            for s, xi, yi in zip(chunk, x[:, 0].double().numpy(), y[:, 0]):
                out.append((Image(xi, RangeTag.MODEL11), Image(yi, RangeTag.MODEL11)))
    G.train(was_training)
    return out


def train_rgan(pairs: Sequence[tuple[Image, Image]], gen_spec: GeneratorSpec, disc_spec: DiscriminatorSpec,
               weights: LossWeights = LossWeights(), opt: OptimizerConfig = OptimizerConfig(),
               stop: EarlyStopConfig = EarlyStopConfig(), cfg: TrainConfig = TrainConfig(),
               val_samples: Sequence[LabeledSample] = (), config_snapshot: Optional[dict] = None) -> ModelBundle:
    """Phase two of the cascaded scheme: a residual generator trained on (x+, x-) pairs.

    Without ``val_samples`` carrying ground truth, a slice of the pairs is held
    out and the residual L1 on it drives model selection.
    """
    pairs = list(pairs)
    if not pairs:
        raise ConfigError("train_rgan needs at least one (x+, x-) pair")
    for a, b in pairs:
        if a.range_tag is not RangeTag.MODEL11 or b.range_tag is not RangeTag.MODEL11:
            raise ConfigError("pairs must be model11 images")
    val_pairs = None
    if not val_samples and len(pairs) >= 2 and cfg.val_fraction > 0:
        k = min(cfg.max_val, max(1, int(round(cfg.val_fraction * len(pairs)))))
        order = np.random.default_rng([cfg.seed, 0xBA1]).permutation(len(pairs))
        held = [pairs[i] for i in sorted(order[:k])]
        pairs = [pairs[i] for i in sorted(order[k:])]
        val_pairs = (_to_tensor([a.data for a, _ in held]), _to_tensor([b.data for _, b in held]))
    xp = _to_tensor([a.data for a, _ in pairs])
    xn = _to_tensor([b.data for _, b in pairs])
    if xp.shape[-1] != gen_spec.input_size:
        raise ConfigError(f"pairs are {tuple(xp.shape[-2:])}, networks expect {gen_spec.input_size}")
    bundle = _prepare_bundle(Scheme.CASCADED_RGAN, gen_spec, disc_spec, weights, cfg)
    loop = _ResidualLoop(bundle, opt, stop, cfg, xp, xn, list(val_samples), val_pairs, config_snapshot)
    return loop.run()


@dataclass
class CascadedResult:
    ci: ModelBundle
    rgan: ModelBundle
    pairs: list = field(default_factory=list)


def train_cascaded(data: DatasetSplit, gen_spec: GeneratorSpec, disc_spec: DiscriminatorSpec,
                   weights: LossWeights = LossWeights(), opt: OptimizerConfig = OptimizerConfig(),
                   stop: EarlyStopConfig = EarlyStopConfig(), cfg: TrainConfig = TrainConfig(),
                   config_snapshot: Optional[dict] = None) -> CascadedResult:
    """Phase one, pair synthesis over the training positives, then phase two.

    With a run directory, phases go to ``phase1_ci/`` and ``phase2_rgan/`` and
    the synthesised pairs are cached under ``pairs/``.
    """
    from dataclasses import replace

    run = Path(cfg.run_dir) if cfg.run_dir else None
    c1 = replace(cfg, run_dir=str(run / "phase1_ci") if run else None)
    ci = train_ci_cyclegan(data, gen_spec, disc_spec, weights, opt, stop, c1, config_snapshot)
    pos, _ = _check_classes(data)
    pos_train, val = split_validation(pos, cfg)
    pos_train = _prepared(pos_train, data.transform, cfg.seed)
    val = _prepared(val, data.transform, cfg.seed)
    pairs = synthesize_pairs(ci, pos_train)
    if run is not None:
        write_pair_cache(run / "pairs", pairs, [s.sample_id for s in pos_train])
    c2 = replace(cfg, run_dir=str(run / "phase2_rgan") if run else None, resume=None)
    rgan = train_rgan(pairs, gen_spec, disc_spec, weights, opt, stop, c2, val_samples=val,
                      config_snapshot=config_snapshot)
    return CascadedResult(ci, rgan, pairs)


def write_pair_cache(root: Path, pairs: Sequence[tuple[Image, Image]], ids: Sequence[str]) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    h, w = pairs[0][0].shape
    write_f32(root / "pos.f32", np.stack([a.data for a, _ in pairs]))
    write_f32(root / "neg.f32", np.stack([b.data for _, b in pairs]))
    (root / "index.json").write_text(json.dumps(
        {"count": len(pairs), "shape": [h, w], "range": "model11", "ids": list(ids),
         "files": {"pos": "pos.f32", "neg": "neg.f32"}}, indent=1))
    return root


def read_pair_cache(root: Path) -> list[tuple[Image, Image]]:
    root = Path(root)
    idx = json.loads((root / "index.json").read_text())
    n, (h, w) = idx["count"], idx["shape"]
    pos = np.fromfile(root / "pos.f32", dtype="<f4").reshape(n, h, w).astype(np.float64)
    neg = np.fromfile(root / "neg.f32", dtype="<f4").reshape(n, h, w).astype(np.float64)
    return [(Image(a, RangeTag.MODEL11), Image(b, RangeTag.MODEL11)) for a, b in zip(pos, neg)]
