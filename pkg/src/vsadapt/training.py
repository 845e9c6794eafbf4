"""Seeding, loss bookkeeping and divergence checks shared by every training loop."""
import hashlib
import logging
import os
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Tuple, Union

import numpy as np
import pandas as pd
import torch
from torch import nn

from vsadapt.errors import TrainingDivergedError

logger = logging.getLogger("vsadapt.training")


def seed_everything(seed: int) -> torch.Generator:
    """Seed python, numpy and torch; returns a torch generator seeded the same way."""
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)
    generator = torch.Generator()
    generator.manual_seed(seed)
    return generator


def parameter_checksum(module: nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in registration order."""
    digest = hashlib.sha256()
    for name, tensor in list(module.named_parameters()) + list(module.named_buffers()):
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    module.eval()
    return module


@dataclass
class LossLog:
    """Per-epoch loss curves, written as CSV rows (epoch, loss_name, value)."""
    rows: List[Tuple[int, str, float]] = field(default_factory=list)

    def record(self, epoch: int, values: Mapping[str, float]) -> None:
        for name, value in values.items():
            self.rows.append((epoch, name, float(value)))

    def last(self, name: str) -> Optional[float]:
        for epoch, loss_name, value in reversed(self.rows):
            if loss_name == name:
                return value
        return None

    def series(self, name: str) -> List[float]:
        return [value for _, loss_name, value in self.rows if loss_name == name]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=['epoch', 'loss_name', 'value'])

    def write_csv(self, path: Union[str, os.PathLike]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + '.tmp')
        self.to_frame().to_csv(tmp, index=False)
        os.replace(tmp, path)
        return path


class EpochAverager:
    """Running means of named scalar losses within one epoch."""

    def __init__(self):
        self.sums: Dict[str, float] = {}
        self.counts: Dict[str, int] = {}

    def add(self, values: Mapping[str, torch.Tensor]) -> None:
        for name, value in values.items():
            self.sums[name] = self.sums.get(name, 0.0) + float(value)
            self.counts[name] = self.counts.get(name, 0) + 1

    def means(self) -> Dict[str, float]:
        return {name: self.sums[name] / self.counts[name] for name in self.sums}


def check_finite(values: Mapping[str, torch.Tensor], epoch: int, last_checkpoint: Optional[Path]) -> None:
    """Raise TrainingDivergedError when any loss value is NaN or infinite."""
    for name, value in values.items():
        if not torch.isfinite(torch.as_tensor(value)).all():
            logger.error(f'{name} is not finite at epoch {epoch}; aborting')
            raise TrainingDivergedError(
                f'{name} became non-finite at epoch {epoch}',
                last_checkpoint=str(last_checkpoint) if last_checkpoint else None,
            )


def stack_channels(arrays: Iterable[np.ndarray], dtype: torch.dtype = torch.float32) -> torch.Tensor:
    return torch.as_tensor(np.stack([np.asarray(a) for a in arrays]), dtype=dtype)
