"""
MSF-Koos-Net: the frozen MSF-Net encoder E extracts low-level features per slab, the tumor mask is
max-pooled to the feature resolution and concatenated, a high-level encoder E_H maps each slab to a
feature vector, slab features are mean-pooled per subject and a linear layer outputs four Koos logits.
"""
import logging
import os
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from torch import nn

from vsadapt.checkpoint import load_checkpoint, restore, save_checkpoint
from vsadapt.errors import ArgumentError, CheckpointError, StageError, VsAdaptError
from vsadapt.msfnet import Encoder, pad_to_multiple
from vsadapt.training import EpochAverager, LossLog, check_finite, freeze, seed_everything
from vsadapt.volume import Volume, volume_slabs

logger = logging.getLogger("vsadapt.koosnet")

GRADES = (1, 2, 3, 4)
CHECKPOINT_KIND = "koos"
VS_LABEL = 1
PREDICTION_COLUMNS = ["subject_id", "grade"] + [f"logit_{g}" for g in GRADES]


@dataclass(frozen=True)
class SubjectSample:
    """The slabs of one subject used for grading, with the binary tumor mask of each centre slice."""
    subject_id: str
    slabs: np.ndarray
    masks: np.ndarray
    grade: Optional[int] = None

    def __post_init__(self):
        slabs = np.asarray(self.slabs, dtype=np.float32)
        masks = np.asarray(self.masks, dtype=np.float32)
        if slabs.ndim != 4 or slabs.shape[1] != 3:
            raise ArgumentError(f'{self.subject_id}: slabs must have shape (S, 3, H, W), got {slabs.shape}')
        if masks.shape != (slabs.shape[0],) + slabs.shape[2:]:
            raise ArgumentError(f'{self.subject_id}: mask shape {masks.shape} does not match slabs {slabs.shape}')
        if len(slabs) == 0:
            raise ArgumentError(f'{self.subject_id}: no slabs')
        if self.grade is not None and self.grade not in GRADES:
            raise ArgumentError(f'{self.subject_id}: grade must be in {GRADES}, got {self.grade}')
        object.__setattr__(self, "slabs", slabs)
        object.__setattr__(self, "masks", masks)


def subject_sample(v: Volume, mask: np.ndarray, subject_id: str = '', grade: Optional[int] = None,
                   max_slabs: int = 16) -> SubjectSample:
    """
    Slabs whose centre slice contains tumor, or all slabs when the mask is empty. At most `max_slabs`
    are kept, nearest first to the tumor's centre slice (the middle slice without tumor).
    """
    mask = np.asarray(mask)
    if mask.shape != v.shape:
        raise ArgumentError(f'{subject_id}: mask shape {mask.shape} differs from volume shape {v.shape}')
    tumor = (mask == VS_LABEL)
    per_slice = tumor.reshape(tumor.shape[0], -1).any(axis=1)
    candidates = np.flatnonzero(per_slice)
    if candidates.size == 0:
        candidates = np.arange(v.shape[0])
        center = (v.shape[0] - 1) / 2.0
    else:
        weights = tumor.reshape(tumor.shape[0], -1).sum(axis=1)
        center = float(np.average(np.arange(v.shape[0]), weights=weights))
    if candidates.size > max_slabs:
        nearest = np.argsort(np.abs(candidates - center), kind="stable")[:max_slabs]
        candidates = np.sort(candidates[nearest])
    slabs = volume_slabs(v)[candidates]
    return SubjectSample(subject_id=subject_id, slabs=slabs, masks=tumor[candidates].astype(np.float32),
                         grade=grade)


class HighLevelEncoder(nn.Module):
    """E_H: strided conv blocks over (latent + mask) channels, then global average pooling."""

    def __init__(self, in_channels: int, width: int = 64, n_blocks: int = 2, norm: str = "instance"):
        super().__init__()
        layers: List[nn.Module] = []
        channels = in_channels
        for i in range(n_blocks):
            out = width * 2 ** i
            layers += [nn.Conv2d(channels, out, 3, stride=2, padding=1),
                       nn.InstanceNorm2d(out) if norm == "instance" else nn.Identity(),
                       nn.ReLU()]
            channels = out
        self.layers = nn.Sequential(*layers)
        self.out_features = channels

    def forward(self, x):
        return torch.flatten(F.adaptive_avg_pool2d(self.layers(x), 1), 1)


class KoosClassifier(nn.Module):
    """
    encoder_e is frozen on construction and stays in eval mode; encoder_h and fc are trainable depending on
    the operation.
    """

    def __init__(self, encoder_e: Encoder, latent_channels: int, multiple: int, width: int = 64,
                 n_blocks: int = 2, norm: str = "instance"):
        super().__init__()
        self.encoder_e = freeze(encoder_e)
        self.multiple = multiple
        self.config = {"latent_channels": latent_channels, "multiple": multiple, "width": width,
                       "n_blocks": n_blocks, "norm": norm}
        self.encoder_h = HighLevelEncoder(latent_channels + 1, width=width, n_blocks=n_blocks, norm=norm)
        self.fc = nn.Linear(self.encoder_h.out_features, len(GRADES))

    def train(self, mode: bool = True):
        super().train(mode)
        self.encoder_e.eval()
        return self

    def slab_features(self, slabs: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
        """(S, 3, H, W) slabs and (S, H, W) masks -> (S, F) high-level features."""
        if masks.shape != (slabs.shape[0],) + tuple(slabs.shape[2:]):
            raise ArgumentError(f'mask shape {tuple(masks.shape)} does not match slabs {tuple(slabs.shape)}')
        with torch.no_grad():
            z = self.encoder_e(pad_to_multiple(slabs, self.multiple))
        m = pad_to_multiple(masks[:, None].to(z.dtype), self.multiple, mode="constant")
        m = F.adaptive_max_pool2d(m, z.shape[-2:])
        return self.encoder_h(torch.cat([z, m], dim=1))

    def subject_features(self, slabs: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
        return self.slab_features(slabs, masks).mean(dim=0)

    def forward(self, slabs: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
        """Koos logits (4,) for one subject."""
        return self.fc(self.subject_features(slabs, masks))

    def logits_for(self, samples: Sequence[SubjectSample]) -> torch.Tensor:
        dtype = self.fc.weight.dtype
        return torch.stack([self(torch.as_tensor(s.slabs, dtype=dtype), torch.as_tensor(s.masks, dtype=dtype))
                            for s in samples])


@dataclass(frozen=True)
class KoosPrediction:
    subject_id: str
    logits: Tuple[float, ...]
    grade: int

    def __post_init__(self):
        if len(self.logits) != len(GRADES):
            raise ArgumentError(f'expected {len(GRADES)} logits, got {len(self.logits)}')
        if self.grade != int(np.argmax(self.logits)) + 1:
            raise ArgumentError(f'grade {self.grade} is not the argmax of {self.logits}')

    @classmethod
    def from_logits(cls, subject_id: str, logits: Sequence[float]) -> "KoosPrediction":
        logits = tuple(float(x) for x in logits)
        return cls(subject_id=subject_id, logits=logits, grade=int(np.argmax(logits)) + 1)


def forward(c: KoosClassifier, sample: SubjectSample) -> KoosPrediction:
    c.eval()
    with torch.no_grad():
        logits = c.logits_for([sample])[0]
    return KoosPrediction.from_logits(sample.subject_id, logits.tolist())


@dataclass(frozen=True)
class FinetuneOptions:
    epochs: int = 20
    lr: float = 1e-4
    batch_size: int = 4
    seed: int = 0
    unfreeze: bool = False
    out_dir: Optional[str] = None


@dataclass
class FinetuneResult:
    classifier: KoosClassifier
    log: LossLog
    checkpoint: Optional[Path] = None
    accuracy: List[float] = field(default_factory=list)


def classifier_manifest(c: KoosClassifier, stage: str, **extra) -> Dict:
    """`stage` is "pretrain" for E_H + projection heads and "finetune" for the full classifier."""
    return {"kind": CHECKPOINT_KIND, "stage": stage, **c.config, **extra}


def finetune(c: KoosClassifier, data: Sequence[SubjectSample], opts: FinetuneOptions = FinetuneOptions()
             ) -> FinetuneResult:
    """
    Cross-entropy over the four grades on annotated subjects. Only fc is optimized (fc and E_H with
    `unfreeze`); E never changes.
    """
    logger.info(f'finetune({len(data)} subjects, epochs={opts.epochs}, lr={opts.lr}, unfreeze={opts.unfreeze})')
    if not data:
        raise ArgumentError('finetune needs at least one annotated subject')
    missing = [s.subject_id for s in data if s.grade is None]
    if missing:
        raise ArgumentError(f'subjects without Koos grade: {missing}')
    generator = seed_everything(opts.seed)
    trainable: List[nn.Module] = [c.fc]
    for p in c.encoder_h.parameters():
        p.requires_grad_(opts.unfreeze)
    if opts.unfreeze:
        trainable.append(c.encoder_h)
    optimizer = torch.optim.Adam([p for m in trainable for p in m.parameters()], lr=opts.lr)
    targets = torch.tensor([s.grade - 1 for s in data])

    log = LossLog()
    accuracy: List[float] = []
    out_dir = Path(opts.out_dir) if opts.out_dir else None
    last_checkpoint: Optional[Path] = None
    for epoch in range(1, opts.epochs + 1):
        c.train()
        averager = EpochAverager()
        correct = 0
        order = torch.randperm(len(data), generator=generator)
        for start in range(0, len(data), opts.batch_size):
            idx = order[start:start + opts.batch_size]
            logits = c.logits_for([data[i] for i in idx.tolist()])
            loss = F.cross_entropy(logits, targets[idx])
            check_finite({"ce": loss}, epoch, last_checkpoint)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            averager.add({"ce": loss.detach()})
            correct += int((logits.argmax(dim=1) == targets[idx]).sum())
        accuracy.append(correct / len(data))
        log.record(epoch, {**averager.means(), "accuracy": accuracy[-1]})
        if out_dir is not None:
            last_checkpoint = save_checkpoint(out_dir / "koos.pt", {"classifier": c},
                                              classifier_manifest(c, "finetune", epoch=epoch, seed=opts.seed,
                                                                  unfreeze=opts.unfreeze))
            log.write_csv(out_dir / "losses.csv")
    c.eval()
    logger.info(f'finetune finished: ce={log.last("ce")}, accuracy={accuracy[-1]:.3f}')
    return FinetuneResult(classifier=c, log=log, checkpoint=last_checkpoint, accuracy=accuracy)


def load_classifier(path: Union[str, os.PathLike], encoder_e: Encoder) -> KoosClassifier:
    tensors, manifest = load_checkpoint(path)
    if manifest.get("kind") != CHECKPOINT_KIND:
        raise CheckpointError(f'{path} is a {manifest.get("kind")!r} checkpoint, expected {CHECKPOINT_KIND!r}')
    c = KoosClassifier(encoder_e, manifest["latent_channels"], manifest["multiple"], width=manifest["width"],
                       n_blocks=manifest["n_blocks"], norm=manifest["norm"])
    if manifest.get("stage") == "pretrain":
        restore(c.encoder_h, tensors, "encoder_h")
    else:
        restore(c, tensors, "classifier")
    c.eval()
    return c


@dataclass
class CohortPredictions:
    predictions: List[KoosPrediction] = field(default_factory=list)
    errors: Dict[str, str] = field(default_factory=dict)


def predict_cohort(c: KoosClassifier, volumes: Mapping[str, Volume], masks: Mapping[str, np.ndarray],
                   max_slabs: int = 16, out_csv: Optional[Union[str, os.PathLike]] = None) -> CohortPredictions:
    """One prediction per subject with a mask; subjects that fail are recorded in `errors` and skipped."""
    logger.info(f'predict_cohort({len(volumes)} subjects)')
    result = CohortPredictions()
    for subject_id, v in volumes.items():
        try:
            if subject_id not in masks:
                raise ArgumentError(f'no tumor mask for {subject_id}')
            result.predictions.append(forward(c, subject_sample(v, masks[subject_id], subject_id,
                                                                max_slabs=max_slabs)))
        except VsAdaptError as e:
            logger.error(f'Koos prediction failed for {subject_id}: ' + traceback.format_exc())
            result.errors[subject_id] = str(e)
        except Exception as e:
            logger.error(f'Unexpected error predicting {subject_id}: ' + traceback.format_exc())
            result.errors[subject_id] = str(StageError("forward", e))
    if out_csv is not None:
        write_predictions(result.predictions, out_csv)
    return result


def write_predictions(predictions: Sequence[KoosPrediction], path: Union[str, os.PathLike]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = [[p.subject_id, p.grade, *p.logits] for p in predictions]
    tmp = path.with_name(path.name + '.tmp')
    pd.DataFrame(rows, columns=PREDICTION_COLUMNS).to_csv(tmp, index=False)
    os.replace(tmp, path)
    return path


def read_predictions(path: Union[str, os.PathLike]) -> Dict[str, int]:
    frame = pd.read_csv(path, dtype={"subject_id": str})
    return {row.subject_id: int(row.grade) for row in frame.itertuples(index=False)}
