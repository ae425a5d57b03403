"""Unpaired cycle training of the degradation/enhancement pair.

One iteration runs both cycles, updates the two generators on the weighted
generator objective, then updates both discriminators on detached fakes, and
finally advances the spectral-norm power iteration (once, then on to
convergence when ``sn_tol`` is set).
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import torch
from torch import nn

from .checkpoint import read_archive, write_archive
from .data import UnpairedDataset, UnpairedSampler
from .discriminators import DISC_WIDTHS, MultiScaleDiscriminator
from .encoder import VGGEncoder, build_encoder
from .generators import DECODER_WIDTHS, DegradationGenerator, EnhancementGenerator
from .imaging import make_rng
from .losses import (
    LossBundle,
    cycle_losses,
    exposure_loss,
    generator_objective,
    rahinge_discriminator_loss,
    rahinge_generator_loss,
)
from .spectral import apply_spectral_norm

log = logging.getLogger(__name__)

TOGGLES = ("lgt", "frp", "dam", "mfpd", "lip", "exp_loss")
LOG_COLUMNS = ["step", "epoch", *LossBundle.names(), "lr"]


@dataclass
class TrainConfig:
    epochs: int = 100
    batch: int = 10
    crop: int = 224
    adam_beta1: float = 0.0
    adam_beta2: float = 0.999
    lr: float = 1e-4
    lr_fixed_epochs: int = 50
    lambda_exp: float = 10.0
    lambda_con: float = 10.0
    lambda_per: float = 1.0
    exp_target: float = 0.1
    exp_sigma: float = 0.1
    exp_window: int = 7
    exp_gray: bool = True
    lip_lambda: float = 1.0
    perceptual_layer: str = "relu4_1"
    seed: int = 0
    backbone_seed: int = 0
    backbone_path: Optional[str] = None
    decoder_widths: tuple = DECODER_WIDTHS
    disc_widths: tuple = DISC_WIDTHS
    zero_init_heads: bool = False
    sn_tol: Optional[float] = 1e-3
    hflip: bool = False
    max_steps: Optional[int] = None
    num_threads: Optional[int] = None
    lgt: bool = True
    frp: bool = True
    dam: bool = True
    mfpd: bool = True
    lip: bool = True
    exp_loss: bool = True

    def __post_init__(self):
        self.decoder_widths = tuple(int(w) for w in self.decoder_widths)
        self.disc_widths = tuple(int(w) for w in self.disc_widths)
        if self.epochs < 1 or self.batch < 1 or self.crop < 32:
            raise ValueError("epochs and batch must be >= 1 and crop >= 32")
        if self.lip_lambda < 1:
            raise ValueError("lip_lambda must be >= 1")

    @property
    def loss_weights(self) -> tuple[float, float, float]:
        return (self.lambda_exp, self.lambda_con, self.lambda_per)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["decoder_widths"] = list(self.decoder_widths)
        d["disc_widths"] = list(self.disc_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise KeyError(f"unknown config key: {unknown[0]}")
        return cls(**d)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class CIGAN(nn.Module):
    """Frozen encoder, both generators and both discriminators."""

    def __init__(self, cfg: TrainConfig, encoder: Optional[VGGEncoder] = None):
        super().__init__()
        self.cfg = cfg
        self.encoder = encoder if encoder is not None else build_encoder(cfg.backbone_path, cfg.backbone_seed)
        self.encoder.requires_grad_(False)
        self.g_low = DegradationGenerator(cfg.decoder_widths, use_lgt=cfg.lgt, use_frp=cfg.frp, use_dam=cfg.dam)
        self.g_normal = EnhancementGenerator(
            cfg.decoder_widths, use_dam=cfg.dam, use_lip=cfg.lip, lip_lambda=cfg.lip_lambda
        )
        self.d_low = MultiScaleDiscriminator(cfg.disc_widths, pyramid=cfg.mfpd, zero_init_heads=cfg.zero_init_heads)
        self.d_normal = MultiScaleDiscriminator(cfg.disc_widths, pyramid=cfg.mfpd, zero_init_heads=cfg.zero_init_heads)

    @property
    def generators(self) -> nn.ModuleList:
        return nn.ModuleList([self.g_low, self.g_normal])

    @property
    def discriminators(self) -> nn.ModuleList:
        return nn.ModuleList([self.d_low, self.d_normal])

    def degrade(
        self,
        normal: torch.Tensor,
        reference_low: torch.Tensor,
        rng: Optional[torch.Generator] = None,
        deterministic: bool = False,
    ) -> torch.Tensor:
        if normal.shape != reference_low.shape:
            raise ValueError(
                f"normal {tuple(normal.shape)} and reference {tuple(reference_low.shape)} must match"
            )
        return self.g_low(self.encoder(normal), self.encoder(reference_low), rng=rng, deterministic=deterministic)

    def enhance(self, low: torch.Tensor) -> torch.Tensor:
        return self.g_normal(self.encoder(low), low)

    def perceptual(self, x: torch.Tensor) -> torch.Tensor:
        return self.encoder.layer(x, self.cfg.perceptual_layer)


def build_model(cfg: TrainConfig, encoder: Optional[VGGEncoder] = None) -> CIGAN:
    """Construct a model whose trainable weights depend only on ``cfg.seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        return CIGAN(cfg, encoder)


def degrade(normal, reference_low, model: CIGAN, rng=None, deterministic: bool = False) -> torch.Tensor:
    return model.degrade(normal, reference_low, rng=rng, deterministic=deterministic)


def enhance(low, model: CIGAN) -> torch.Tensor:
    return model.enhance(low)


@dataclass
class TrainState:
    model: CIGAN
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    noise_rng: torch.Generator
    data_rng: torch.Generator
    epoch: int = 0
    step: int = 0
    sampler_state: dict = field(default_factory=dict)


def init_state(cfg: TrainConfig, encoder: Optional[VGGEncoder] = None) -> TrainState:
    model = build_model(cfg, encoder)
    betas = (cfg.adam_beta1, cfg.adam_beta2)
    opt_g = torch.optim.Adam(model.generators.parameters(), lr=cfg.lr, betas=betas, weight_decay=0.0)
    opt_d = torch.optim.Adam(model.discriminators.parameters(), lr=cfg.lr, betas=betas, weight_decay=0.0)
    return TrainState(
        model=model,
        opt_g=opt_g,
        opt_d=opt_d,
        noise_rng=make_rng(cfg.seed * 2 + 1),
        data_rng=make_rng(cfg.seed * 2 + 2),
    )


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Constant for the first ``lr_fixed_epochs`` epochs, then linear to zero at ``epochs``."""
    if not 1 <= epoch <= cfg.epochs:
        raise ValueError(f"epoch {epoch} outside 1..{cfg.epochs}")
    if epoch <= cfg.lr_fixed_epochs:
        return cfg.lr
    return cfg.lr * (cfg.epochs - epoch) / (cfg.epochs - cfg.lr_fixed_epochs)


def set_lr(state: TrainState, lr: float) -> None:
    for opt in (state.opt_g, state.opt_d):
        for group in opt.param_groups:
            group["lr"] = lr


class NonFiniteLossError(RuntimeError):
    def __init__(self, step: int, bundle: LossBundle, last_checkpoint: Optional[Path] = None):
        self.step, self.bundle, self.last_checkpoint = step, bundle, last_checkpoint
        super().__init__(f"non-finite loss at step {step}: {bundle}; last good checkpoint: {last_checkpoint}")


def train_step(
    batch_n: torch.Tensor, batch_l: torch.Tensor, state: TrainState, cfg: TrainConfig
) -> tuple[TrainState, LossBundle]:
    if batch_n.shape[-2:] != batch_l.shape[-2:]:
        raise ValueError("normal and low-light batches must share the crop size")
    m = state.model
    enc, rng = m.encoder, state.noise_rng
    m.train()

    # generator phase
    m.generators.requires_grad_(True)
    m.discriminators.requires_grad_(False)
    with torch.no_grad():
        pyr_n = enc(batch_n)
        pyr_l = enc(batch_l)
    fake_l = m.g_low(pyr_n, pyr_l, rng=rng)
    rec_n = m.g_normal(enc(fake_l), fake_l)
    fake_n = m.g_normal(pyr_l, batch_l)
    rec_l = m.g_low(enc(fake_n), pyr_l, rng=rng)

    with torch.no_grad():
        real_l_scores = m.d_low(batch_l)
        real_n_scores = m.d_normal(batch_n)
    lg_L = rahinge_generator_loss(m.d_low(fake_l), real_l_scores)
    lg_N = rahinge_generator_loss(m.d_normal(fake_n), real_n_scores)
    if cfg.exp_loss:
        l_exp = exposure_loss(fake_l, cfg.exp_target, cfg.exp_sigma, cfg.exp_window, gray=cfg.exp_gray)
    else:
        l_exp = torch.zeros(())
    l_con, l_per = cycle_losses(
        batch_n, rec_n, batch_l, rec_l, m.perceptual,
        in_n_feat=m.perceptual(batch_n) if cfg.perceptual_layer != "relu4_1" else pyr_n[3],
        in_l_feat=m.perceptual(batch_l) if cfg.perceptual_layer != "relu4_1" else pyr_l[3],
    )
    lg_total = generator_objective(lg_L, lg_N, l_exp, l_con, l_per, cfg.loss_weights)

    bundle = LossBundle(
        lg_adv_L=lg_L.item(), lg_adv_N=lg_N.item(), l_exp=l_exp.item(),
        l_con=l_con.item(), l_per=l_per.item(), lg_total=lg_total.item(),
    )
    if not bundle.is_finite():
        raise NonFiniteLossError(state.step + 1, bundle)
    state.opt_g.zero_grad(set_to_none=True)
    lg_total.backward()
    state.opt_g.step()

    # discriminator phase
    m.generators.requires_grad_(False)
    m.discriminators.requires_grad_(True)
    fake_l, fake_n = fake_l.detach(), fake_n.detach()
    ld_L = rahinge_discriminator_loss(m.d_low(fake_l), m.d_low(batch_l))
    ld_N = rahinge_discriminator_loss(m.d_normal(fake_n), m.d_normal(batch_n))
    ld_total = ld_L + ld_N
    bundle.ld_L, bundle.ld_N, bundle.ld_total = ld_L.item(), ld_N.item(), ld_total.item()
    if not bundle.is_finite():
        raise NonFiniteLossError(state.step + 1, bundle)
    state.opt_d.zero_grad(set_to_none=True)
    ld_total.backward()
    state.opt_d.step()
    m.generators.requires_grad_(True)

    apply_spectral_norm(m.generators, tol=cfg.sn_tol)
    apply_spectral_norm(m.discriminators, tol=cfg.sn_tol)
    state.step += 1
    return state, bundle


# --------------------------------------------------------------------------- checkpoints


def _flatten_optimizer(prefix: str, opt: torch.optim.Optimizer, tensors: dict, meta: dict) -> None:
    sd = opt.state_dict()
    scalars = {}
    for pid, pstate in sd["state"].items():
        for key, val in pstate.items():
            if torch.is_tensor(val):
                tensors[f"{prefix}.state.{pid}.{key}"] = val
            else:
                scalars[f"{pid}.{key}"] = val
    meta[prefix] = {"param_groups": sd["param_groups"], "scalars": scalars}


def _unflatten_optimizer(prefix: str, tensors: dict, meta: dict) -> dict:
    state: dict = {}
    head = prefix + ".state."
    for name, t in tensors.items():
        if name.startswith(head):
            pid, key = name[len(head):].split(".", 1)
            state.setdefault(int(pid), {})[key] = t
    for k, v in meta[prefix]["scalars"].items():
        pid, key = k.split(".", 1)
        state.setdefault(int(pid), {})[key] = v
    return {"state": state, "param_groups": meta[prefix]["param_groups"]}


def save_checkpoint(path, state: TrainState, cfg: TrainConfig) -> Path:
    tensors = {f"model.{k}": v for k, v in state.model.state_dict().items()}
    meta = {
        "epoch": state.epoch,
        "step": state.step,
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
    }
    _flatten_optimizer("opt_g", state.opt_g, tensors, meta)
    _flatten_optimizer("opt_d", state.opt_d, tensors, meta)
    tensors["rng.noise"] = state.noise_rng.get_state()
    tensors["rng.data"] = state.data_rng.get_state()
    if state.sampler_state:
        tensors["sampler.rng"] = state.sampler_state["rng"]
        tensors["sampler.perm"] = state.sampler_state["perm"]
        meta["sampler_pos"] = state.sampler_state["pos"]
    return write_archive(path, tensors, meta)


def load_checkpoint(path, state: Optional[TrainState] = None, encoder: Optional[VGGEncoder] = None) -> tuple[TrainState, TrainConfig]:
    """Restore a training state; builds a fresh one from the stored config if none is given."""
    tensors, meta = read_archive(path)
    cfg = TrainConfig.from_dict(_config_from_meta(meta["config"]))
    if state is None:
        state = init_state(cfg, encoder)
    model_sd = {k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")}
    state.model.load_state_dict(model_sd, strict=True)
    state.opt_g.load_state_dict(_unflatten_optimizer("opt_g", tensors, meta))
    state.opt_d.load_state_dict(_unflatten_optimizer("opt_d", tensors, meta))
    state.noise_rng.set_state(tensors["rng.noise"])
    state.data_rng.set_state(tensors["rng.data"])
    if "sampler.rng" in tensors:
        state.sampler_state = {"rng": tensors["sampler.rng"], "perm": tensors["sampler.perm"], "pos": meta["sampler_pos"]}
    state.epoch, state.step = int(meta["epoch"]), int(meta["step"])
    return state, cfg


def _config_from_meta(d: dict) -> dict:
    d = dict(d)
    for key in ("decoder_widths", "disc_widths"):
        if key in d:
            d[key] = tuple(d[key])
    return d


def load_model(path, encoder: Optional[VGGEncoder] = None) -> tuple[CIGAN, TrainConfig]:
    """Model weights only, for inference."""
    tensors, meta = read_archive(path)
    cfg = TrainConfig.from_dict(_config_from_meta(meta["config"]))
    model = build_model(cfg, encoder)
    model.load_state_dict({k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")}, strict=True)
    model.eval()
    return model, cfg


# --------------------------------------------------------------------------- fit


def _format_row(step: int, epoch: int, bundle: LossBundle, lr: float) -> list[str]:
    return [str(step), str(epoch), *(repr(float(v)) for v in bundle.as_dict().values()), repr(float(lr))]


def _read_log(path: Path, upto_step: int) -> list[list[str]]:
    if not path.exists():
        return []
    with path.open(newline="") as f:
        rows = list(csv.reader(f))
    return [r for r in rows[1:] if int(r[0]) <= upto_step]


def fit(
    cfg: TrainConfig,
    ds: UnpairedDataset,
    out_dir,
    resume=None,
    encoder: Optional[VGGEncoder] = None,
    keep_checkpoints: bool = True,
) -> Path:
    """Run the full schedule, writing ``losses.csv``, per-epoch and final checkpoints.

    ``resume`` continues from a checkpoint written by an earlier call; the loss
    trace then matches an uninterrupted run.
    """
    out_dir = Path(out_dir)
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    if cfg.num_threads:
        torch.set_num_threads(cfg.num_threads)

    state = init_state(cfg, encoder)
    last_ckpt: Optional[Path] = None
    if resume is not None:
        state, _ = load_checkpoint(resume, state)
        last_ckpt = Path(resume)
    sampler = UnpairedSampler(ds, cfg.batch, state.data_rng)
    if state.sampler_state:
        sampler.load_state_dict(state.sampler_state)

    log_path = out_dir / "losses.csv"
    prior = _read_log(log_path, state.step) if resume is not None else []
    done = cfg.max_steps is not None and state.step >= cfg.max_steps
    with log_path.open("w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
        writer.writerows(prior)
        for epoch in range(state.epoch + 1, cfg.epochs + 1):
            if done:
                break
            lr = lr_schedule(epoch, cfg)
            set_lr(state, lr)
            for batch_n, batch_l in sampler.epoch():
                try:
                    state, bundle = train_step(batch_n, batch_l, state, cfg)
                except NonFiniteLossError as exc:
                    exc.last_checkpoint = last_ckpt
                    raise
                writer.writerow(_format_row(state.step, epoch, bundle, lr))
                if cfg.max_steps is not None and state.step >= cfg.max_steps:
                    done = True
                    break
            f.flush()
            state.epoch = epoch
            state.sampler_state = sampler.state_dict()
            if keep_checkpoints:
                last_ckpt = save_checkpoint(ckpt_dir / f"epoch_{epoch:03d}.ckpt", state, cfg)
            log.info("epoch %d done at step %d", epoch, state.step)
    final = out_dir / "final.ckpt"
    final.unlink(missing_ok=True)
    if last_ckpt is not None and state.epoch > 0 and last_ckpt == ckpt_dir / f"epoch_{state.epoch:03d}.ckpt":
        try:
            os.link(last_ckpt, final)
            return final
        except OSError:
            pass
    return save_checkpoint(final, state, cfg)


def read_loss_log(path) -> list[dict[str, float]]:
    with Path(path).open(newline="") as f:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(f)]


def moving_average(values: Sequence[float], k: int) -> list[float]:
    return [sum(values[i : i + k]) / k for i in range(len(values) - k + 1)]


def finite_log(rows: Sequence[dict[str, float]]) -> bool:
    return all(math.isfinite(v) for r in rows for v in r.values())
