"""
Pooled-data segmentation: real ceT1 volumes and their translated hrT2 counterparts become independent
training samples with the same labels, and a 2-D U-Net is trained on 2.5-D slabs with CE + soft Dice.
Classes are {0: background, 1: VS, 2: cochlea}.
"""
import logging
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch import nn

from vsadapt.checkpoint import load_checkpoint, restore, save_checkpoint
from vsadapt.errors import ArgumentError, CheckpointError
from vsadapt.losses import ce_dice_loss
from vsadapt.msfnet import pad_to_multiple
from vsadapt.training import EpochAverager, LossLog, check_finite, seed_everything, stack_channels
from vsadapt.volume import LabeledVolume, Slab, Volume, VS_LABELS, assemble_slices, extract_slabs, volume_slabs

logger = logging.getLogger("vsadapt.segharness")

CHECKPOINT_KIND = "seg"
N_CLASSES = len(VS_LABELS)


def _double_conv(in_ch: int, out_ch: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, padding=1), nn.InstanceNorm2d(out_ch, affine=True), nn.LeakyReLU(0.01),
        nn.Conv2d(out_ch, out_ch, 3, padding=1), nn.InstanceNorm2d(out_ch, affine=True), nn.LeakyReLU(0.01),
    )


class UNet(nn.Module):
    """
    `depth` resolution levels with widths width, 2*width, ...; max-pool down, transposed-conv up, skip
    concatenation. Inputs are padded to a multiple of 2^(depth - 1) and the logits cropped back.
    """

    def __init__(self, in_channels: int = 3, n_classes: int = N_CLASSES, depth: int = 4, width: int = 16):
        super().__init__()
        if depth < 1:
            raise ArgumentError(f'U-Net depth must be >= 1, got {depth}')
        self.depth = depth
        self.width = width
        widths = [width * 2 ** i for i in range(depth)]
        self.down = nn.ModuleList()
        channels = in_channels
        for w in widths:
            self.down.append(_double_conv(channels, w))
            channels = w
        self.pool = nn.MaxPool2d(2)
        self.up = nn.ModuleList()
        self.merge = nn.ModuleList()
        for w in reversed(widths[:-1]):
            self.up.append(nn.ConvTranspose2d(channels, w, 2, stride=2))
            self.merge.append(_double_conv(2 * w, w))
            channels = w
        self.head = nn.Conv2d(channels, n_classes, 1)

    @property
    def multiple(self) -> int:
        return 2 ** (self.depth - 1)

    def forward(self, x):
        h, w = x.shape[-2:]
        x = pad_to_multiple(x, self.multiple)
        skips = []
        for i, block in enumerate(self.down):
            x = block(x)
            if i < self.depth - 1:
                skips.append(x)
                x = self.pool(x)
        for up, merge in zip(self.up, self.merge):
            x = merge(torch.cat([skips.pop(), up(x)], dim=1))
        return self.head(x)[..., :h, :w]


def _shuffled_slabs(volumes: Sequence[LabeledVolume], seed: int, stride: int) -> List[Slab]:
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(volumes))
    slabs: List[Slab] = []
    for k, index in enumerate(order):
        slabs.extend(extract_slabs(volumes[index].replace(subject_id=f'pool-{k:03d}', koos_grade=None,
                                                          metadata={}), stride))
    return [slabs[i] for i in rng.permutation(len(slabs))]


def build_pooled_set(real1: Sequence[LabeledVolume], fake2: Sequence[Volume], seed: int = 0,
                     stride: int = 1) -> List[Slab]:
    """
    Slabs of every real ceT1 volume and of its translated counterpart, which carries a copy of the real
    labels. Volume ids are anonymized and the slab order is shuffled, so no real/fake pairing survives.
    """
    logger.info(f'build_pooled_set({len(real1)} real, {len(fake2)} translated)')
    if len(real1) != len(fake2):
        raise ArgumentError(f'{len(real1)} real volumes but {len(fake2)} translated volumes')
    volumes: List[LabeledVolume] = list(real1)
    for real, fake in zip(real1, fake2):
        if fake.shape != real.image.shape:
            raise ArgumentError(f'{real.subject_id}: translated shape {fake.shape} differs from {real.image.shape}')
        volumes.append(real.replace(image=fake))
    return _shuffled_slabs(volumes, seed, stride)


def build_real_set(real1: Sequence[LabeledVolume], seed: int = 0, stride: int = 1) -> List[Slab]:
    """Single-modality training set: the real ceT1 slabs alone."""
    logger.info(f'build_real_set({len(real1)} real)')
    return _shuffled_slabs(list(real1), seed, stride)


@dataclass(frozen=True)
class SegOptions:
    epochs: int = 50
    batch_size: int = 8
    lr: float = 1e-3
    depth: int = 4
    width: int = 16
    seed: int = 0
    flip: bool = True
    out_dir: Optional[str] = None


@dataclass
class SegTrainingResult:
    model: UNet
    log: LossLog
    checkpoint: Optional[Path] = None


def _flip(x: torch.Tensor, y: torch.Tensor, generator: torch.Generator) -> Tuple[torch.Tensor, torch.Tensor]:
    for axis in (-2, -1):
        if torch.rand(1, generator=generator).item() < 0.5:
            x, y = torch.flip(x, dims=(axis,)), torch.flip(y, dims=(axis,))
    return x, y


def train_seg(dataset: Sequence[Slab], opts: SegOptions = SegOptions()) -> SegTrainingResult:
    """Adam on CE + foreground soft Dice of the centre-slice labels, with seeded row/column flips."""
    logger.info(f'train_seg({len(dataset)} slabs, epochs={opts.epochs}, depth={opts.depth}, width={opts.width})')
    if not dataset:
        raise ArgumentError('train_seg needs a nonempty dataset')
    if any(s.vs_mask is None for s in dataset):
        raise ArgumentError('every training slab needs a vs mask')
    generator = seed_everything(opts.seed)
    model = UNet(depth=opts.depth, width=opts.width)
    optimizer = torch.optim.Adam(model.parameters(), lr=opts.lr)
    x_all = stack_channels(s.channels for s in dataset)
    y_all = stack_channels((s.center_vs for s in dataset), dtype=torch.long)

    log = LossLog()
    out_dir = Path(opts.out_dir) if opts.out_dir else None
    last_checkpoint: Optional[Path] = None
    for epoch in range(1, opts.epochs + 1):
        model.train()
        averager = EpochAverager()
        order = torch.randperm(len(dataset), generator=generator)
        for start in range(0, len(dataset), opts.batch_size):
            idx = order[start:start + opts.batch_size]
            x, y = x_all[idx], y_all[idx]
            if opts.flip:
                x, y = _flip(x, y, generator)
            loss = ce_dice_loss(model(x), y)
            check_finite({"ce_dice": loss}, epoch, last_checkpoint)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            averager.add({"ce_dice": loss.detach()})
        log.record(epoch, averager.means())
        if out_dir is not None:
            last_checkpoint = save_checkpoint(out_dir / "seg.pt", {"model": model},
                                              {"kind": CHECKPOINT_KIND, "epoch": epoch, "depth": opts.depth,
                                               "width": opts.width, "options": asdict(opts)})
            log.write_csv(out_dir / "losses.csv")
    model.eval()
    logger.info(f'train_seg finished: ce_dice={log.last("ce_dice")}')
    return SegTrainingResult(model=model, log=log, checkpoint=last_checkpoint)


def load_seg_model(path: Union[str, os.PathLike]) -> UNet:
    tensors, manifest = load_checkpoint(path)
    if manifest.get("kind") != CHECKPOINT_KIND:
        raise CheckpointError(f'{path} is a {manifest.get("kind")!r} checkpoint, expected {CHECKPOINT_KIND!r}')
    model = UNet(depth=manifest["depth"], width=manifest["width"])
    restore(model, tensors, "model")
    model.eval()
    return model


def infer_seg(m: UNet, v: Volume, batch_size: int = 8) -> Volume:
    """Argmax labels per centre slice, reassembled into a uint8 volume with the geometry of `v`."""
    logger.info(f'infer_seg({v.shape})')
    if v.shape[0] < 1 or min(v.shape[1:]) < 1:
        raise ArgumentError(f'cannot segment a volume of shape {v.shape}')
    slabs = volume_slabs(v)
    dtype = next(m.parameters()).dtype
    m.eval()
    labels = []
    with torch.no_grad():
        for start in range(0, len(slabs), batch_size):
            x = torch.as_tensor(slabs[start:start + batch_size], dtype=dtype)
            labels.append(m(x).argmax(dim=1).cpu().numpy().astype(np.uint8))
    return assemble_slices(np.concatenate(labels), v)
