"""Multi-domain image translation with adversarial + cycle losses.

One encoder, decoder, and patch discriminator per domain; any ordered
domain pair (i, j) translates as decoder_j(encoder_i(x)). Training
round-robins over ordered pairs, and each visit trains the pair in both
directions: discriminators first on real versus detached fakes, then
the four generator halves on the adversarial terms plus the
cycle-consistency reconstruction weighted by lambda_cyc.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import seeding, tensorio
from .autodiff import NonFiniteError, Tensor, l1_norm, no_grad, softplus, square
from .datagen import DomainDataset, ImageSpec, Provenance
from .nets import (
    DecoderParams,
    DiscriminatorParams,
    EncoderParams,
    assign_parameters,
    build_discriminator,
    build_generator_pair,
    param_arrays,
    param_tensors,
)
from .optim import Adam

ADVERSARIAL_FORMS = ("least_squares", "log")


class TrainingDiverged(RuntimeError):
    """A loss went non-finite; carries the step where it happened."""


@dataclass(frozen=True)
class TranslationConfig:
    lambda_cyc: float = 10.0
    lr: float = 2e-4
    batch_size: int = 1
    epochs: int = 40
    decay_start: int | None = None     # defaults to epochs // 2
    adversarial_form: str = "least_squares"
    pair_steps: int = 12               # batches per ordered pair per epoch
    seed: int = 0
    base_width: int = 16
    n_res_blocks: int = 2
    disc_width: int = 32

    def __post_init__(self):
        if self.lambda_cyc <= 0:
            raise ValueError("lambda_cyc must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1 or self.epochs < 1 or self.pair_steps < 1:
            raise ValueError("batch_size, epochs and pair_steps must be >= 1")
        if self.adversarial_form not in ADVERSARIAL_FORMS:
            raise ValueError(f"adversarial_form must be one of {ADVERSARIAL_FORMS}")
        if self.resolved_decay_start() >= self.epochs:
            raise ValueError("decay_start must be < epochs")

    def resolved_decay_start(self) -> int:
        return self.epochs // 2 if self.decay_start is None else self.decay_start

    def to_json(self) -> dict:
        return {"lambda_cyc": self.lambda_cyc, "lr": self.lr,
                "batch_size": self.batch_size, "epochs": self.epochs,
                "decay_start": self.decay_start,
                "adversarial_form": self.adversarial_form,
                "pair_steps": self.pair_steps, "seed": self.seed,
                "base_width": self.base_width, "n_res_blocks": self.n_res_blocks,
                "disc_width": self.disc_width}

    @classmethod
    def from_json(cls, obj: dict) -> "TranslationConfig":
        return cls(**obj)


def learning_rate(cfg: TranslationConfig, epoch: int) -> float:
    """Constant until decay_start, then linear to zero at `epochs`."""
    start = cfg.resolved_decay_start()
    if epoch < start:
        return cfg.lr
    return cfg.lr * (cfg.epochs - epoch) / (cfg.epochs - start)


@dataclass
class TranslatorModel:
    domains: list[str]
    image_spec: ImageSpec
    config: TranslationConfig
    encoders: dict[str, EncoderParams]
    decoders: dict[str, DecoderParams]
    discriminators: dict[str, DiscriminatorParams]
    checkpoint_id: str | None = None

    def _check_domain(self, name: str) -> None:
        if name not in self.encoders:
            raise KeyError(f"unknown domain {name!r}; model has {self.domains}")


@dataclass
class StepRecord:
    epoch: int
    pair: str              # "src>dst" ordered pair label
    d_loss: float
    g_adv_fwd: float       # adversarial term, src -> dst direction
    g_adv_bwd: float       # adversarial term, dst -> src direction
    cycle: float
    g_total: float


def build_translator(domains: list[str], image_spec: ImageSpec,
                     cfg: TranslationConfig) -> TranslatorModel:
    if len(domains) < 2:
        raise ValueError("translator needs at least 2 domains")
    if len(set(domains)) != len(domains):
        raise ValueError("domain names must be unique")
    encoders, decoders, discs = {}, {}, {}
    for i, name in enumerate(domains):
        enc, dec = build_generator_pair(image_spec, cfg.n_res_blocks,
                                        seed=seeding.child_seed(cfg.seed, 10, i),
                                        base_width=cfg.base_width)
        encoders[name], decoders[name] = enc, dec
        discs[name] = build_discriminator(image_spec,
                                          seed=seeding.child_seed(cfg.seed, 20, i),
                                          base_width=cfg.disc_width)
    return TranslatorModel(list(domains), image_spec, cfg, encoders, decoders, discs)


# ---------------------------------------------------------------------------
# losses

def adversarial_losses(real_scores: Tensor, fake_scores: Tensor,
                       form: str = "least_squares") -> tuple[Tensor, Tensor]:
    """Discriminator and generator losses from raw patch score grids.

    log form uses the non-saturating generator objective; least_squares
    regresses scores to the 1 (real) / 0 (fake) targets.
    """
    if real_scores.shape != fake_scores.shape:
        raise ValueError(f"score grids differ: {real_scores.shape} vs {fake_scores.shape}")
    if form == "log":
        # -log sigmoid(z) = softplus(-z),  -log(1 - sigmoid(z)) = softplus(z)
        d_loss = softplus(-real_scores).mean() + softplus(fake_scores).mean()
        g_loss = softplus(-fake_scores).mean()
    elif form == "least_squares":
        d_loss = square(real_scores - 1.0).mean() + square(fake_scores).mean()
        g_loss = square(fake_scores - 1.0).mean()
    else:
        raise ValueError(f"unknown adversarial form {form!r}")
    return d_loss, g_loss


def cycle_loss(x: Tensor, reconstructed: Tensor) -> Tensor:
    """Mean absolute reconstruction error over all elements."""
    if x.shape != reconstructed.shape:
        raise ValueError(f"cycle_loss shapes differ: {x.shape} vs {reconstructed.shape}")
    return l1_norm(reconstructed - x) / x.size


def full_objective(g_adv_fwd: Tensor, g_adv_bwd: Tensor, cyc: Tensor,
                   lambda_cyc: float) -> Tensor:
    """Generator objective for one pair: both adversarial terms + weighted cycle."""
    return g_adv_fwd + g_adv_bwd + lambda_cyc * cyc


# ---------------------------------------------------------------------------
# training

def _set_requires_grad(params: list[Tensor], value: bool) -> None:
    for p in params:
        p.requires_grad = value


def ordered_pairs(domains: list[str]) -> list[tuple[str, str]]:
    return [(a, b) for a in domains for b in domains if a != b]


def train_translator(datasets: list[DomainDataset], cfg: TranslationConfig
                     ) -> tuple[TranslatorModel, list[StepRecord]]:
    """Train on >= 2 domains; returns the model and the per-step loss history."""
    if len(datasets) < 2:
        raise ValueError("need at least 2 domains to translate between")
    for ds in datasets:
        if len(ds) == 0:
            raise ValueError(f"dataset for domain {ds.domain!r} is empty")
    shapes = {ds.images.shape[1:] for ds in datasets}
    if len(shapes) != 1:
        raise ValueError(f"inconsistent image shapes across domains: {shapes}")
    c, h, w = shapes.pop()
    if h != w:
        raise ValueError("images must be square")
    spec = ImageSpec(c, h)

    domains = [ds.domain for ds in datasets]
    data = {ds.domain: ds for ds in datasets}
    model = build_translator(domains, spec, cfg)

    g_params = {d: param_tensors(model.encoders[d]) + param_tensors(model.decoders[d])
                for d in domains}
    d_params = {d: param_tensors(model.discriminators[d]) for d in domains}
    opt_g = {d: Adam(g_params[d], cfg.lr, betas=(0.5, 0.999)) for d in domains}
    opt_d = {d: Adam(d_params[d], cfg.lr, betas=(0.5, 0.999)) for d in domains}

    batch_rng = seeding.stream(cfg.seed, seeding.BATCH_A)
    pairs = ordered_pairs(domains)
    history: list[StepRecord] = []

    for epoch in range(cfg.epochs):
        lr = learning_rate(cfg, epoch)
        for opt in list(opt_g.values()) + list(opt_d.values()):
            opt.lr = lr
        for a, b in pairs:
            for _ in range(cfg.pair_steps):
                idx_a = batch_rng.integers(0, len(data[a]), size=cfg.batch_size)
                idx_b = batch_rng.integers(0, len(data[b]), size=cfg.batch_size)
                x_a = Tensor(data[a].images[idx_a])
                x_b = Tensor(data[b].images[idx_b])
                try:
                    rec = _pair_step(model, cfg, opt_g, opt_d, epoch,
                                     a, b, x_a, x_b)
                except NonFiniteError as err:
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch}, pair {a}>{b}: {err}"
                    ) from err
                history.append(rec)
    return model, history


def _pair_step(model, cfg, opt_g, opt_d, epoch, a, b, x_a, x_b) -> StepRecord:
    enc_a, dec_a = model.encoders[a], model.decoders[a]
    enc_b, dec_b = model.encoders[b], model.decoders[b]
    disc_a, disc_b = model.discriminators[a], model.discriminators[b]

    fake_b = dec_b.forward(enc_a.forward(x_a))
    fake_a = dec_a.forward(enc_b.forward(x_b))

    # discriminators first, on real vs detached fake
    real_scores_b = disc_b.forward(x_b)
    real_scores_a = disc_a.forward(x_a)
    d_loss_b, _ = adversarial_losses(real_scores_b, disc_b.forward(fake_b.detach()),
                                     cfg.adversarial_form)
    d_loss_a, _ = adversarial_losses(real_scores_a, disc_a.forward(fake_a.detach()),
                                     cfg.adversarial_form)
    d_loss = 0.5 * (d_loss_a + d_loss_b)
    opt_d[a].zero_grad()
    opt_d[b].zero_grad()
    d_loss.backward()
    opt_d[a].step()
    opt_d[b].step()

    # generator halves next; discriminators frozen so they never
    # accumulate gradient from this phase
    frozen = [p for d in (a, b) for p in opt_d[d].params]
    _set_requires_grad(frozen, False)
    try:
        _, g_adv_fwd = adversarial_losses(real_scores_b.detach(),
                                          disc_b.forward(fake_b),
                                          cfg.adversarial_form)
        _, g_adv_bwd = adversarial_losses(real_scores_a.detach(),
                                          disc_a.forward(fake_a),
                                          cfg.adversarial_form)
        rec_a = dec_a.forward(enc_b.forward(fake_b))
        rec_b = dec_b.forward(enc_a.forward(fake_a))
        cyc = 0.5 * (cycle_loss(x_a, rec_a) + cycle_loss(x_b, rec_b))
        g_total = full_objective(g_adv_fwd, g_adv_bwd, cyc, cfg.lambda_cyc)
        opt_g[a].zero_grad()
        opt_g[b].zero_grad()
        g_total.backward()
        opt_g[a].step()
        opt_g[b].step()
    finally:
        _set_requires_grad(frozen, True)

    return StepRecord(epoch, f"{a}>{b}", d_loss.item(), g_adv_fwd.item(),
                      g_adv_bwd.item(), cyc.item(), g_total.item())


def epoch_pair_rows(history: list[StepRecord]) -> list[dict]:
    """Aggregate step records to per-(epoch, pair) means for the loss CSV."""
    groups: dict[tuple[int, str], list[StepRecord]] = {}
    for rec in history:
        groups.setdefault((rec.epoch, rec.pair), []).append(rec)
    rows = []
    for (epoch, pair), recs in sorted(groups.items()):
        rows.append({
            "epoch": epoch,
            "pair": pair,
            "d_loss": float(np.mean([r.d_loss for r in recs])),
            "g_loss": float(np.mean([r.g_adv_fwd + r.g_adv_bwd for r in recs])),
            "cycle_loss": float(np.mean([r.cycle for r in recs])),
        })
    return rows


# ---------------------------------------------------------------------------
# inference

def translate(model: TranslatorModel, image, src: str, dst: str) -> np.ndarray:
    """Re-style image(s) from src into dst; src == dst is an identity-style pass."""
    model._check_domain(src)
    model._check_domain(dst)
    arr = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    with no_grad():
        out = model.decoders[dst].forward(model.encoders[src].forward(Tensor(arr))).data
    return out[0] if single else out


def translate_dataset(model: TranslatorModel, dataset: DomainDataset,
                      targets: list[str] | None = None,
                      batch_size: int = 32) -> list[DomainDataset]:
    """One synthetic dataset per target domain, labels copied from the source.

    Default targets are every model domain except the source itself;
    pass explicit targets (possibly including the source) to override.
    """
    model._check_domain(dataset.domain)
    if targets is None:
        targets = [d for d in model.domains if d != dataset.domain]
    for t in targets:
        model._check_domain(t)
    out = []
    for dst in targets:
        chunks = []
        for lo in range(0, len(dataset), batch_size):
            chunks.append(translate(model, dataset.images[lo:lo + batch_size],
                                    dataset.domain, dst))
        prov = Provenance("synthetic", dst, dataset.provenance.origins,
                          model.checkpoint_id)
        out.append(DomainDataset(f"{dataset.domain}>{dst}",
                                 np.concatenate(chunks), dataset.labels.copy(),
                                 dataset.seed, prov))
    return out


# ---------------------------------------------------------------------------
# checkpoints

def save_translator(model: TranslatorModel, directory: str | Path) -> str:
    params: dict[str, np.ndarray] = {}
    for name in model.domains:
        for prefix, net in (("enc", model.encoders[name]),
                            ("dec", model.decoders[name]),
                            ("disc", model.discriminators[name])):
            for pname, arr in param_arrays(net).items():
                params[f"{prefix}.{name}.{pname}"] = arr
    meta = {"kind": "translator", "domains": model.domains,
            "image_spec": {"channels": model.image_spec.channels,
                           "size": model.image_spec.size},
            "config": model.config.to_json()}
    ckpt_id = tensorio.save_checkpoint(directory, meta, params)
    model.checkpoint_id = ckpt_id
    return ckpt_id


def load_translator(directory: str | Path) -> TranslatorModel:
    meta, params, ckpt_id = tensorio.load_checkpoint(directory)
    if meta.get("kind") != "translator":
        raise ValueError(f"{directory} is not a translator checkpoint")
    cfg = TranslationConfig.from_json(meta["config"])
    spec = ImageSpec(**meta["image_spec"])
    model = build_translator(meta["domains"], spec, cfg)
    for name in model.domains:
        for prefix, net in (("enc", model.encoders[name]),
                            ("dec", model.decoders[name]),
                            ("disc", model.discriminators[name])):
            scoped = {}
            lead = f"{prefix}.{name}."
            for full, arr in params.items():
                if full.startswith(lead):
                    scoped[full[len(lead):]] = arr
            assign_parameters(net, scoped)
    model.checkpoint_id = ckpt_id
    return model
