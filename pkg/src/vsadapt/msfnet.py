"""
MSF-Net: unpaired ceT1 <-> hrT2 translation with a single encoder shared by both modalities, one decoder
and one patch discriminator per modality, and proxy segmentation heads (VS and parcellation) on the latent
of real ceT1 inputs.

Generator objective per batch:
    loss_rec + adversarial * loss_G + cycle * loss_cyc + proxy * loss_proxy_seg
with the least-squares split for the adversarial term. Losses are mean-reduced over voxels and batch.
"""
import logging
import os
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from vsadapt.checkpoint import load_checkpoint, restore, save_checkpoint
from vsadapt.errors import ArgumentError, CheckpointError, ValidationError
from vsadapt.features import FeatureExtractor, RandomConvFeatures, perceptual_distance
from vsadapt.losses import soft_dice_loss
from vsadapt.training import (
    EpochAverager, LossLog, check_finite, parameter_checksum, seed_everything, stack_channels,
)
from vsadapt.volume import Modality, Slab, Volume, assemble_slices, volume_slabs

logger = logging.getLogger("vsadapt.msfnet")

CHECKPOINT_KIND = "msfnet"
PROXY_TASKS = ("vs", "gif")
VARIANTS = ("msfnet", "cyclegan")


@dataclass(frozen=True)
class ArchitectureProfile:
    """Widths and depths of every MSF-Net component. `n_gif_labels` excludes background."""
    in_channels: int = 3
    base_width: int = 64
    n_downsample: int = 2
    n_residual: int = 9
    stem_kernel: int = 7
    out_kernel: int = 7
    disc_width: int = 64
    disc_layers: int = 3
    norm: str = "instance"
    output_activation: str = "tanh"
    n_vs_classes: int = 3
    n_gif_labels: int = 4

    @property
    def latent_channels(self) -> int:
        return self.base_width * 2 ** self.n_downsample

    @property
    def multiple(self) -> int:
        return 2 ** self.n_downsample


PROFILES: Dict[str, ArchitectureProfile] = {
    "full": ArchitectureProfile(),
    "small": ArchitectureProfile(base_width=16, n_residual=3, disc_width=16),
    "tiny": ArchitectureProfile(base_width=1, n_residual=0, stem_kernel=3, out_kernel=3,
                                disc_width=1, disc_layers=2),
}


@dataclass(frozen=True)
class LossWeights:
    lambda_r: float = 10.0
    lambda_p: float = 0.01
    adversarial: float = 1.0
    cycle: float = 1.0
    proxy: float = 1.0
    proxy_tasks: Tuple[str, ...] = PROXY_TASKS

    def __post_init__(self):
        for name in ("lambda_r", "lambda_p", "adversarial", "cycle", "proxy"):
            if getattr(self, name) < 0:
                raise ArgumentError(f'loss weight {name} must be non-negative, got {getattr(self, name)}')
        unknown = set(self.proxy_tasks) - set(PROXY_TASKS)
        if unknown:
            raise ArgumentError(f'unknown proxy tasks {sorted(unknown)}, expected a subset of {PROXY_TASKS}')
        object.__setattr__(self, "proxy_tasks", tuple(self.proxy_tasks))


def _norm(kind: str, channels: int) -> nn.Module:
    if kind == "instance":
        return nn.InstanceNorm2d(channels)
    if kind == "none":
        return nn.Identity()
    raise ArgumentError(f'unknown normalization {kind!r}')


def _conv(in_ch: int, out_ch: int, kernel: int, stride: int = 1) -> nn.Conv2d:
    pad = kernel // 2
    return nn.Conv2d(in_ch, out_ch, kernel, stride=stride, padding=pad, padding_mode="reflect" if pad else "zeros")


def pad_to_multiple(x: torch.Tensor, multiple: int, mode: str = "replicate") -> torch.Tensor:
    """Pad the last two axes of (B, C, H, W) at the far end up to a multiple of `multiple`."""
    h, w = x.shape[-2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if not (ph or pw):
        return x
    if mode == "constant":
        return F.pad(x, (0, pw, 0, ph))
    return F.pad(x, (0, pw, 0, ph), mode=mode)


class ResidualBlock(nn.Module):
    def __init__(self, channels: int, norm: str):
        super().__init__()
        self.block = nn.Sequential(
            _conv(channels, channels, 3), _norm(norm, channels), nn.ReLU(),
            _conv(channels, channels, 3), _norm(norm, channels),
        )

    def forward(self, x):
        return x + self.block(x)


class Encoder(nn.Module):
    """Stem convolution, `n_downsample` stride-2 convolutions, `n_residual` residual blocks."""

    def __init__(self, p: ArchitectureProfile):
        super().__init__()
        width = p.base_width
        layers: List[nn.Module] = [_conv(p.in_channels, width, p.stem_kernel), _norm(p.norm, width), nn.ReLU()]
        for _ in range(p.n_downsample):
            layers += [_conv(width, width * 2, 3, stride=2), _norm(p.norm, width * 2), nn.ReLU()]
            width *= 2
        layers += [ResidualBlock(width, p.norm) for _ in range(p.n_residual)]
        self.layers = nn.Sequential(*layers)

    def forward(self, x):
        return self.layers(x)


class Decoder(nn.Module):
    """Mirror of the encoder: nearest upsampling + convolution back to the input resolution."""

    def __init__(self, p: ArchitectureProfile):
        super().__init__()
        width = p.latent_channels
        layers: List[nn.Module] = []
        for _ in range(p.n_downsample):
            layers += [nn.Upsample(scale_factor=2, mode="nearest"), _conv(width, width // 2, 3),
                       _norm(p.norm, width // 2), nn.ReLU()]
            width //= 2
        layers.append(_conv(width, p.in_channels, p.out_kernel))
        if p.output_activation == "tanh":
            layers.append(nn.Tanh())
        elif p.output_activation != "none":
            raise ArgumentError(f'unknown output activation {p.output_activation!r}')
        self.layers = nn.Sequential(*layers)

    def forward(self, z):
        return self.layers(z)


class PatchDiscriminator(nn.Module):
    """
    Patch discriminator: `disc_layers` stride-2 4x4 convolutions, one stride-1 4x4 convolution and a 1-channel
    4x4 output convolution. Three strided layers give a 70x70 receptive field per output score.
    """

    def __init__(self, p: ArchitectureProfile):
        super().__init__()
        width = p.disc_width
        layers: List[nn.Module] = [nn.Conv2d(p.in_channels, width, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
        for _ in range(p.disc_layers - 1):
            layers += [nn.Conv2d(width, width * 2, 4, stride=2, padding=1), _norm(p.norm, width * 2), nn.LeakyReLU(0.2)]
            width *= 2
        layers += [nn.Conv2d(width, width * 2, 4, stride=1, padding=1), _norm(p.norm, width * 2), nn.LeakyReLU(0.2),
                   nn.Conv2d(width * 2, 1, 4, stride=1, padding=1)]
        self.layers = nn.Sequential(*layers)

    def forward(self, x):
        return self.layers(x)


class TranslationModel(nn.Module):
    """
    Encoder(s), decoders G_T1/G_T2, discriminators D_T1/D_T2 and proxy heads G_vs/G_gif.

    The "msfnet" variant holds one encoder used for both modalities; "cyclegan" holds one encoder per
    source modality and is the unshared baseline.
    """

    def __init__(self, profile: ArchitectureProfile = ArchitectureProfile(), variant: str = "msfnet"):
        super().__init__()
        if variant not in VARIANTS:
            raise ArgumentError(f'unknown variant {variant!r}, expected one of {VARIANTS}')
        self.profile = profile
        self.variant = variant
        if variant == "msfnet":
            self.encoder = Encoder(profile)
        else:
            self.encoder_t1 = Encoder(profile)
            self.encoder_t2 = Encoder(profile)
        self.decoder_t1 = Decoder(profile)
        self.decoder_t2 = Decoder(profile)
        self.disc_t1 = PatchDiscriminator(profile)
        self.disc_t2 = PatchDiscriminator(profile)
        self.proxy_vs = nn.Conv2d(profile.latent_channels, profile.n_vs_classes, 1)
        self.proxy_gif = nn.Conv2d(profile.latent_channels, profile.n_gif_labels + 1, 1)

    def encoder_for(self, source: Modality) -> nn.Module:
        if self.variant == "msfnet":
            return self.encoder
        return self.encoder_t1 if Modality(source) is Modality.T1 else self.encoder_t2

    def decoder_for(self, target: Modality) -> nn.Module:
        return self.decoder_t1 if Modality(target) is Modality.T1 else self.decoder_t2

    def discriminator_for(self, modality: Modality) -> nn.Module:
        return self.disc_t1 if Modality(modality) is Modality.T1 else self.disc_t2

    def _pad(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.profile.in_channels:
            raise ArgumentError(f'expected input of shape (B, {self.profile.in_channels}, H, W), got {tuple(x.shape)}')
        return pad_to_multiple(x, self.profile.multiple)

    def encode(self, x: torch.Tensor, source: Modality) -> torch.Tensor:
        return self.encoder_for(source)(self._pad(x))

    def decode(self, z: torch.Tensor, target: Modality, size: Tuple[int, int]) -> torch.Tensor:
        return self.decoder_for(target)(z)[..., :size[0], :size[1]]

    def translate(self, x: torch.Tensor, source: Modality, target: Modality) -> torch.Tensor:
        return self.decode(self.encode(x, source), target, tuple(x.shape[-2:]))

    def proxy_logits(self, z: torch.Tensor, task: str, size: Tuple[int, int]) -> torch.Tensor:
        head = self.proxy_vs if task == "vs" else self.proxy_gif
        logits = head(z)
        full = (z.shape[-2] * self.profile.multiple, z.shape[-1] * self.profile.multiple)
        logits = F.interpolate(logits, size=full, mode="bilinear", align_corners=False)
        return logits[..., :size[0], :size[1]]

    def generator_modules(self) -> List[nn.Module]:
        encoders = [self.encoder] if self.variant == "msfnet" else [self.encoder_t1, self.encoder_t2]
        return encoders + [self.decoder_t1, self.decoder_t2, self.proxy_vs, self.proxy_gif]

    def discriminator_modules(self) -> List[nn.Module]:
        return [self.disc_t1, self.disc_t2]


def _params(modules: Sequence[nn.Module]) -> Iterator[nn.Parameter]:
    for module in modules:
        yield from module.parameters()


def _set_requires_grad(modules: Sequence[nn.Module], flag: bool) -> None:
    for p in _params(modules):
        p.requires_grad_(flag)


def _l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return torch.mean(torch.abs(a - b))


def _sq(d: torch.Tensor, target: float) -> torch.Tensor:
    return torch.mean((d - target) ** 2)


def reconstruct(m: TranslationModel, slab1: torch.Tensor, slab2: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """recon1 = G_T1(E(slab1)), recon2 = G_T2(E(slab2))."""
    if slab1.shape[1:] != slab2.shape[1:]:
        raise ArgumentError(f'slab shapes differ: {tuple(slab1.shape)} vs {tuple(slab2.shape)}')
    return m.translate(slab1, Modality.T1, Modality.T1), m.translate(slab2, Modality.T2, Modality.T2)


def loss_rec(recon1: torch.Tensor, slab1: torch.Tensor, recon2: torch.Tensor, slab2: torch.Tensor,
             perceptual: Optional[FeatureExtractor], w: LossWeights) -> torch.Tensor:
    """lambda_r * (|I1' - I1|_1 + |I2' - I2|_1) + lambda_p * (L_p(I1', I1) + L_p(I2', I2))."""
    loss = w.lambda_r * (_l1(recon1, slab1) + _l1(recon2, slab2))
    if w.lambda_p > 0:
        if perceptual is None:
            raise ArgumentError('lambda_p > 0 needs a perceptual feature extractor')
        loss = loss + w.lambda_p * (perceptual_distance(recon1, slab1, perceptual)
                                    + perceptual_distance(recon2, slab2, perceptual))
    return loss


def discriminator_loss(m: TranslationModel, real1: torch.Tensor, real2: torch.Tensor,
                       fake12: torch.Tensor, fake21: torch.Tensor) -> torch.Tensor:
    """|D_T1(I1) - 1|^2 + |D_T1(I'_21)|^2 + |D_T2(I2) - 1|^2 + |D_T2(I'_12)|^2 with fakes detached."""
    return (_sq(m.disc_t1(real1), 1.0) + _sq(m.disc_t1(fake21.detach()), 0.0)
            + _sq(m.disc_t2(real2), 1.0) + _sq(m.disc_t2(fake12.detach()), 0.0))


def generator_adversarial_loss(m: TranslationModel, fake12: torch.Tensor, fake21: torch.Tensor) -> torch.Tensor:
    """|D_T1(I'_21) - 1|^2 + |D_T2(I'_12) - 1|^2."""
    return _sq(m.disc_t1(fake21), 1.0) + _sq(m.disc_t2(fake12), 1.0)


def loss_adv(m: TranslationModel, real1: torch.Tensor, real2: torch.Tensor,
             fake12: torch.Tensor, fake21: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Least-squares GAN split: (loss_D, loss_G)."""
    return discriminator_loss(m, real1, real2, fake12, fake21), generator_adversarial_loss(m, fake12, fake21)


def loss_cyc(m: TranslationModel, slab1: torch.Tensor, slab2: torch.Tensor,
             fake12: Optional[torch.Tensor] = None, fake21: Optional[torch.Tensor] = None) -> torch.Tensor:
    """|G_T1(E(G_T2(E(I1)))) - I1|_1 + |G_T2(E(G_T1(E(I2)))) - I2|_1."""
    if fake12 is None:
        fake12 = m.translate(slab1, Modality.T1, Modality.T2)
    if fake21 is None:
        fake21 = m.translate(slab2, Modality.T2, Modality.T1)
    return (_l1(m.translate(fake12, Modality.T2, Modality.T1), slab1)
            + _l1(m.translate(fake21, Modality.T1, Modality.T2), slab2))


def segmentation_terms(logits: torch.Tensor, target: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """(cross entropy, 1 - mean foreground soft Dice) of one proxy head."""
    return F.cross_entropy(logits, target.long()), soft_dice_loss(logits, target)


def loss_proxy_seg(m: TranslationModel, slab1: torch.Tensor, vs_mask: Optional[torch.Tensor],
                   gif_mask: Optional[torch.Tensor], tasks: Sequence[str] = PROXY_TASKS,
                   latent: Optional[torch.Tensor] = None) -> torch.Tensor:
    """
    CE + Dice of G_vs and G_gif on E(slab1) for real ceT1 slabs. `vs_mask`/`gif_mask` are the centre
    slice labels (B, H, W). Tasks not listed in `tasks` are skipped.
    """
    if not tasks:
        return slab1.new_zeros(())
    if "vs" in tasks and vs_mask is None:
        raise ArgumentError('VS proxy task needs vs_mask')
    if "gif" in tasks and gif_mask is None:
        raise ArgumentError('parcellation proxy task needs gif_mask')
    size = tuple(slab1.shape[-2:])
    z = latent if latent is not None else m.encode(slab1, Modality.T1)
    total = slab1.new_zeros(())
    for task, mask in (("vs", vs_mask), ("gif", gif_mask)):
        if task in tasks:
            ce, dice = segmentation_terms(m.proxy_logits(z, task, size), mask)
            total = total + ce + dice
    return total


def generator_losses(m: TranslationModel, real1: torch.Tensor, real2: torch.Tensor,
                     vs_mask: Optional[torch.Tensor], gif_mask: Optional[torch.Tensor], w: LossWeights,
                     perceptual: Optional[FeatureExtractor]) -> Dict[str, torch.Tensor]:
    """Every generator-side term for one batch plus their weighted `total`."""
    size = tuple(real1.shape[-2:])
    z1 = m.encode(real1, Modality.T1)
    z2 = m.encode(real2, Modality.T2)
    fake12 = m.decode(z1, Modality.T2, size)
    fake21 = m.decode(z2, Modality.T1, size)
    terms: Dict[str, torch.Tensor] = {}
    if m.variant == "msfnet":
        recon1 = m.decode(z1, Modality.T1, size)
        recon2 = m.decode(z2, Modality.T2, size)
        terms["rec"] = loss_rec(recon1, real1, recon2, real2, perceptual, w)
        terms["proxy"] = loss_proxy_seg(m, real1, vs_mask, gif_mask, w.proxy_tasks, latent=z1)
    terms["adv_g"] = generator_adversarial_loss(m, fake12, fake21)
    terms["cyc"] = loss_cyc(m, real1, real2, fake12, fake21)
    total = w.adversarial * terms["adv_g"] + w.cycle * terms["cyc"]
    if m.variant == "msfnet":
        total = total + terms["rec"] + w.proxy * terms["proxy"]
    terms["total"] = total
    return terms


@dataclass(frozen=True)
class TrainingOptions:
    epochs: int = 1000
    batch_size: int = 1
    lr: float = 2e-4
    betas: Tuple[float, float] = (0.5, 0.999)
    seed: int = 0
    variant: str = "msfnet"
    profile: ArchitectureProfile = field(default_factory=ArchitectureProfile)
    out_dir: Optional[str] = None
    checkpoint_every: int = 1
    check_isolation: bool = False


@dataclass
class TrainingResult:
    model: TranslationModel
    log: LossLog
    checkpoint: Optional[Path] = None


def _slab_tensors(slabs: Sequence[Slab], with_masks: bool) -> Dict[str, torch.Tensor]:
    tensors = {"x": stack_channels(s.channels for s in slabs)}
    if with_masks:
        if any(s.vs_mask is None for s in slabs):
            raise ArgumentError('ceT1 training slabs must carry vs masks')
        tensors["vs"] = stack_channels((s.center_vs for s in slabs), dtype=torch.long)
        if all(s.gif_mask is not None for s in slabs):
            tensors["gif"] = stack_channels((s.center_gif for s in slabs), dtype=torch.long)
    return tensors


def _manifest(model: TranslationModel, w: LossWeights, opts: TrainingOptions, epoch: int,
              perceptual: Optional[FeatureExtractor]) -> Dict:
    return {
        "kind": CHECKPOINT_KIND,
        "variant": model.variant,
        "profile": asdict(model.profile),
        "loss_weights": asdict(w),
        "epoch": epoch,
        "seed": opts.seed,
        "perceptual": _describe_extractor(perceptual),
        "encoder_checksum": parameter_checksum(model.encoder_for(Modality.T1)),
    }


def _describe_extractor(extractor: Optional[FeatureExtractor]) -> Dict:
    if extractor is None:
        return {"provider": "none"}
    if isinstance(extractor, RandomConvFeatures):
        return {"provider": "random", "seed": extractor.seed, "widths": list(extractor.widths)}
    return {"provider": type(extractor).__name__}


def step_checksums(m: TranslationModel) -> Dict[str, str]:
    """Parameter checksums of the generator side and of the discriminator side."""
    return {"generator": parameter_checksum(nn.ModuleList(m.generator_modules())),
            "discriminator": parameter_checksum(nn.ModuleList(m.discriminator_modules()))}


def check_step_isolation(m: TranslationModel, before: Dict[str, str], stepped: str, epoch: int) -> Dict[str, str]:
    """
    Raise ValidationError if a step of the `stepped` side ("generator" or "discriminator") changed the
    other side's parameters since `before`, or if the "msfnet" variant no longer shares one encoder.
    :return: the checksums after the step
    """
    after = step_checksums(m)
    for side, checksum in after.items():
        if side != stepped and checksum != before[side]:
            raise ValidationError(f'epoch {epoch}: the {stepped} step changed {side} parameters')
    if m.variant == "msfnet" and m.encoder_for(Modality.T1) is not m.encoder_for(Modality.T2):
        raise ValidationError(f'epoch {epoch}: T1 and T2 no longer share one encoder')
    return after


def train_msfnet(data1: Sequence[Slab], data2: Sequence[Slab], w: LossWeights = LossWeights(),
                 opts: TrainingOptions = TrainingOptions(),
                 perceptual: Optional[FeatureExtractor] = None) -> TrainingResult:
    """
    Alternating updates per batch: one discriminator step (fakes detached), then one generator step
    over encoder(s), decoders and proxy heads. data1 are annotated ceT1 slabs, data2 unlabeled hrT2 slabs,
    paired at random each epoch.

    Writes `<out_dir>/msfnet.pt` every `checkpoint_every` epochs and `<out_dir>/losses.csv`.
    With `check_isolation` each step is followed by check_step_isolation.
    """
    logger.info(f'train_msfnet({len(data1)} T1 slabs, {len(data2)} T2 slabs, epochs={opts.epochs}, '
                f'variant={opts.variant}, proxy_tasks={w.proxy_tasks})')
    if not data1 or not data2:
        raise ArgumentError('train_msfnet needs slabs of both modalities')
    generator = seed_everything(opts.seed)
    model = TranslationModel(opts.profile, opts.variant)
    if perceptual is None and w.lambda_p > 0 and opts.variant == "msfnet":
        perceptual = RandomConvFeatures(seed=opts.seed)

    needs_gif = "gif" in w.proxy_tasks and opts.variant == "msfnet"
    t1 = _slab_tensors(data1, with_masks=opts.variant == "msfnet")
    if needs_gif and "gif" not in t1:
        raise ArgumentError('parcellation proxy task needs gif masks on every ceT1 slab')
    t2 = _slab_tensors(data2, with_masks=False)

    g_opt = torch.optim.Adam(_params(model.generator_modules()), lr=opts.lr, betas=opts.betas)
    d_opt = torch.optim.Adam(_params(model.discriminator_modules()), lr=opts.lr, betas=opts.betas)
    log = LossLog()
    out_dir = Path(opts.out_dir) if opts.out_dir else None
    last_checkpoint: Optional[Path] = None
    n1, n2 = len(data1), len(data2)

    for epoch in range(1, opts.epochs + 1):
        model.train()
        averager = EpochAverager()
        order1 = torch.randperm(n1, generator=generator)
        order2 = torch.randperm(n2, generator=generator)
        for start in range(0, n1, opts.batch_size):
            idx1 = order1[start:start + opts.batch_size]
            idx2 = order2[torch.arange(start, start + len(idx1)) % n2]
            real1, real2 = t1["x"][idx1], t2["x"][idx2]
            vs = t1["vs"][idx1] if "vs" in t1 else None
            gif = t1["gif"][idx1] if "gif" in t1 else None

            if opts.check_isolation:
                checksums = step_checksums(model)
            _set_requires_grad(model.discriminator_modules(), True)
            with torch.no_grad():
                fake12 = model.translate(real1, Modality.T1, Modality.T2)
                fake21 = model.translate(real2, Modality.T2, Modality.T1)
            d_opt.zero_grad()
            loss_d = discriminator_loss(model, real1, real2, fake12, fake21)
            check_finite({"adv_d": loss_d}, epoch, last_checkpoint)
            loss_d.backward()
            d_opt.step()
            if opts.check_isolation:
                checksums = check_step_isolation(model, checksums, "discriminator", epoch)

            _set_requires_grad(model.discriminator_modules(), False)
            g_opt.zero_grad()
            terms = generator_losses(model, real1, real2, vs, gif, w, perceptual)
            check_finite(terms, epoch, last_checkpoint)
            terms["total"].backward()
            g_opt.step()
            if opts.check_isolation:
                check_step_isolation(model, checksums, "generator", epoch)

            averager.add({"adv_d": loss_d.detach(), **{k: v.detach() for k, v in terms.items()}})

        means = averager.means()
        log.record(epoch, means)
        logger.debug(f'train_msfnet epoch {epoch}: ' + ', '.join(f'{k}={v:.4f}' for k, v in means.items()))
        if out_dir is not None and (epoch % opts.checkpoint_every == 0 or epoch == opts.epochs):
            last_checkpoint = save_checkpoint(out_dir / "msfnet.pt", {"model": model},
                                              _manifest(model, w, opts, epoch, perceptual))
            log.write_csv(out_dir / "losses.csv")

    _set_requires_grad(model.discriminator_modules(), True)
    model.eval()
    logger.info(f'train_msfnet finished: total={log.last("total")}')
    return TrainingResult(model=model, log=log, checkpoint=last_checkpoint)


def load_translation_model(path: Union[str, os.PathLike]) -> Tuple[TranslationModel, Dict]:
    tensors, manifest = load_checkpoint(path)
    if manifest.get("kind") != CHECKPOINT_KIND:
        raise CheckpointError(f'{path} is a {manifest.get("kind")!r} checkpoint, expected {CHECKPOINT_KIND!r}')
    profile = ArchitectureProfile(**manifest["profile"])
    model = TranslationModel(profile, manifest.get("variant", "msfnet"))
    restore(model, tensors, "model")
    model.eval()
    return model, manifest


class Direction(str, Enum):
    T1_TO_T2 = "T1->T2"
    T2_TO_T1 = "T2->T1"

    @classmethod
    def parse(cls, value: Union[str, "Direction"]) -> "Direction":
        if isinstance(value, Direction):
            return value
        return cls(str(value).replace("→", "->").replace(" ", ""))

    @property
    def source(self) -> Modality:
        return Modality.T1 if self is Direction.T1_TO_T2 else Modality.T2

    @property
    def target(self) -> Modality:
        return self.source.other()


def translate(m: TranslationModel, v: Volume, direction: Union[str, Direction], batch_size: int = 8) -> Volume:
    """
    Translate every stride-1 slab of `v` and reassemble the centre channels into a volume with the same
    shape, spacing and origin, tagged with the target modality.
    """
    direction = Direction.parse(direction)
    logger.info(f'translate({v.shape}, {direction.value})')
    slabs = volume_slabs(v)
    dtype = next(m.parameters()).dtype
    m.eval()
    centers = []
    with torch.no_grad():
        for start in range(0, len(slabs), batch_size):
            x = torch.as_tensor(slabs[start:start + batch_size], dtype=dtype)
            centers.append(m.translate(x, direction.source, direction.target)[:, 1].cpu().numpy())
    out = np.concatenate(centers).astype(np.float32)
    return assemble_slices(out, v, modality=direction.target)


def discriminator_accuracy(m: TranslationModel, real: torch.Tensor, fake: torch.Tensor,
                           modality: Modality) -> Dict[str, float]:
    """Fraction of patch scores on the correct side of 0.5 for real and for generated inputs of `modality`."""
    disc = m.discriminator_for(modality)
    with torch.no_grad():
        real_scores = disc(real)
        fake_scores = disc(fake)
    return {
        "real": float((real_scores > 0.5).float().mean()),
        "fake": float((fake_scores < 0.5).float().mean()),
    }

