"""
Cross-modal contrastive objectives for pretraining the Koos high-level encoder.

Both losses work on S = z1 z2^T / tau with unit-norm rows. Row i of z1 and row i of z2 come from the same
subject in the two modalities. loss_self treats only the same-index pair as positive; loss_sup treats every
pair with the same Koos grade as positive, the anchor itself included.
"""
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from vsadapt.checkpoint import save_checkpoint
from vsadapt.errors import ArgumentError
from vsadapt.koosnet import KoosClassifier, SubjectSample, classifier_manifest
from vsadapt.training import EpochAverager, LossLog, check_finite, seed_everything

logger = logging.getLogger("vsadapt.contrastive")

DEFAULT_TEMPERATURE = 0.1


@dataclass(frozen=True)
class EmbeddingBatch:
    """
    z1, z2: (N, d) projections of the two modalities. grades: (N,) integers, 1..4 for annotated rows and
    0 for rows without a grade; None when no row is annotated. Rows are unit-normalized on construction.
    """
    z1: torch.Tensor
    z2: torch.Tensor
    grades: Optional[torch.Tensor] = None
    temperature: float = DEFAULT_TEMPERATURE

    def __post_init__(self):
        if self.temperature <= 0:
            raise ArgumentError(f'temperature must be positive, got {self.temperature}')
        if self.z1.ndim != 2 or self.z1.shape != self.z2.shape:
            raise ArgumentError(f'z1 and z2 must be (N, d) of equal shape, got {tuple(self.z1.shape)} '
                                f'and {tuple(self.z2.shape)}')
        if self.z1.shape[0] < 1:
            raise ArgumentError('embedding batch is empty')
        object.__setattr__(self, "z1", F.normalize(self.z1, dim=1))
        object.__setattr__(self, "z2", F.normalize(self.z2, dim=1))
        if self.grades is not None:
            grades = torch.as_tensor(self.grades, dtype=torch.long)
            if grades.shape != (self.z1.shape[0],):
                raise ArgumentError(f'grades must have shape ({self.z1.shape[0]},), got {tuple(grades.shape)}')
            if ((grades < 0) | (grades > 4)).any():
                raise ArgumentError(f'grades must be 0 (unannotated) or 1..4, got {grades.tolist()}')
            object.__setattr__(self, "grades", grades)

    @property
    def size(self) -> int:
        return self.z1.shape[0]

    def similarity(self) -> torch.Tensor:
        return self.z1 @ self.z2.T / self.temperature

    def annotated_subset(self) -> Optional["EmbeddingBatch"]:
        """Rows with a grade, or None when there are none."""
        if self.grades is None:
            return None
        keep = self.grades > 0
        if not keep.any():
            return None
        return EmbeddingBatch(self.z1[keep], self.z2[keep], self.grades[keep], self.temperature)


def loss_self(b: EmbeddingBatch) -> torch.Tensor:
    """-sum_i log(row-softmax(S)[i, i] * column-softmax(S)[i, i])."""
    s = b.similarity()
    rows = torch.log_softmax(s, dim=1)
    cols = torch.log_softmax(s, dim=0)
    return -(torch.diagonal(rows) + torch.diagonal(cols)).sum()


def loss_sup(b: EmbeddingBatch) -> torch.Tensor:
    """
    -sum_i 1/|P(i)| sum_{p in P(i)} log(row-softmax(S)[i, p] * column-softmax(S)[p, i]),
    P(i) = rows with the grade of row i, i included. Every row must be annotated.
    """
    if b.grades is None or (b.grades < 1).any():
        raise ArgumentError('loss_sup needs a grade for every row')
    s = b.similarity()
    rows = torch.log_softmax(s, dim=1)
    cols = torch.log_softmax(s, dim=0)
    positives = (b.grades[:, None] == b.grades[None, :]).to(s.dtype)
    pair_terms = rows + cols.T
    return -((positives * pair_terms).sum(dim=1) / positives.sum(dim=1)).sum()


class ProjectionHead(nn.Module):
    """Two-layer perceptron: feature -> hidden (feature width) -> d."""

    def __init__(self, in_features: int, out_dim: int = 128):
        super().__init__()
        self.out_dim = out_dim
        self.layers = nn.Sequential(nn.Linear(in_features, in_features), nn.ReLU(), nn.Linear(in_features, out_dim))

    def forward(self, h):
        return self.layers(h)


@dataclass(frozen=True)
class PairedSubject:
    """The same subject in both modalities (one real, one translated), on the same grid."""
    t1: SubjectSample
    t2: SubjectSample
    grade: Optional[int] = None

    def __post_init__(self):
        if self.t1.slabs.shape != self.t2.slabs.shape:
            raise ArgumentError(f'{self.t1.subject_id}: paired samples differ in shape '
                                f'{self.t1.slabs.shape} vs {self.t2.slabs.shape}')


@dataclass(frozen=True)
class PretrainOptions:
    epochs: int = 100
    lr: float = 1e-2
    batch_size: int = 4
    temperature: float = DEFAULT_TEMPERATURE
    projection_dim: int = 128
    self_weight: float = 1.0
    sup_weight: float = 1.0
    seed: int = 0
    out_dir: Optional[str] = None


@dataclass
class PretrainResult:
    classifier: KoosClassifier
    heads: Tuple[ProjectionHead, ProjectionHead]
    log: LossLog
    checkpoint: Optional[Path] = None


def embed_batch(c: KoosClassifier, head: ProjectionHead, pairs: Sequence[PairedSubject],
                temperature: float, graded: bool) -> EmbeddingBatch:
    dtype = c.fc.weight.dtype
    h1 = torch.stack([c.subject_features(torch.as_tensor(p.t1.slabs, dtype=dtype),
                                         torch.as_tensor(p.t1.masks, dtype=dtype)) for p in pairs])
    h2 = torch.stack([c.subject_features(torch.as_tensor(p.t2.slabs, dtype=dtype),
                                         torch.as_tensor(p.t2.masks, dtype=dtype)) for p in pairs])
    grades = torch.tensor([p.grade or 0 for p in pairs]) if graded else None
    return EmbeddingBatch(head(h1), head(h2), grades, temperature)


def pretrain(c: KoosClassifier, data: Sequence[PairedSubject], opts: PretrainOptions = PretrainOptions(),
             heads: Optional[Tuple[ProjectionHead, ProjectionHead]] = None) -> PretrainResult:
    """
    Minimize self_weight * loss_self (all pairs) + sup_weight * loss_sup (graded pairs of the batch) over
    E_H and the two projection heads. E is frozen inside the classifier and must not change.
    """
    logger.info(f'pretrain({len(data)} pairs, {sum(p.grade is not None for p in data)} graded, '
                f'epochs={opts.epochs}, lr={opts.lr}, tau={opts.temperature})')
    if not data:
        raise ArgumentError('pretrain needs at least one paired subject')
    generator = seed_everything(opts.seed)
    if heads is None:
        features = c.encoder_h.out_features
        heads = (ProjectionHead(features, opts.projection_dim), ProjectionHead(features, opts.projection_dim))
    head_self, head_sup = heads
    for p in c.encoder_h.parameters():
        p.requires_grad_(True)
    params: List[nn.Parameter] = [*c.encoder_h.parameters(), *head_self.parameters(), *head_sup.parameters()]
    optimizer = torch.optim.Adam(params, lr=opts.lr)

    log = LossLog()
    out_dir = Path(opts.out_dir) if opts.out_dir else None
    last_checkpoint: Optional[Path] = None
    for epoch in range(1, opts.epochs + 1):
        c.train()
        head_self.train()
        head_sup.train()
        averager = EpochAverager()
        order = torch.randperm(len(data), generator=generator).tolist()
        for start in range(0, len(data), opts.batch_size):
            batch = [data[i] for i in order[start:start + opts.batch_size]]
            terms = {"self": loss_self(embed_batch(c, head_self, batch, opts.temperature, graded=False))}
            graded = [p for p in batch if p.grade is not None]
            if graded:
                terms["sup"] = loss_sup(embed_batch(c, head_sup, graded, opts.temperature, graded=True))
            total = opts.self_weight * terms["self"] + opts.sup_weight * terms.get("sup", 0.0)
            terms["total"] = total
            check_finite(terms, epoch, last_checkpoint)
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            averager.add({k: v.detach() for k, v in terms.items()})
        log.record(epoch, averager.means())
        if out_dir is not None:
            last_checkpoint = save_checkpoint(
                out_dir / "koos-pretrain.pt",
                {"encoder_h": c.encoder_h, "head_self": head_self, "head_sup": head_sup},
                classifier_manifest(c, "pretrain", epoch=epoch, seed=opts.seed, options=asdict(opts)),
            )
            log.write_csv(out_dir / "losses.csv")

    c.eval()
    logger.info(f'pretrain finished: total={log.last("total")}')
    return PretrainResult(classifier=c, heads=(head_self, head_sup), log=log, checkpoint=last_checkpoint)


def cross_modal_alignment(c: KoosClassifier, head: ProjectionHead, data: Sequence[PairedSubject]) -> Tuple[float, float]:
    """(mean cosine similarity of same-subject pairs, mean over different-subject pairs)."""
    c.eval()
    head.eval()
    with torch.no_grad():
        b = embed_batch(c, head, data, DEFAULT_TEMPERATURE, graded=False)
        cos = b.z1 @ b.z2.T
    n = cos.shape[0]
    positive = float(torch.diagonal(cos).mean())
    negative = float((cos.sum() - torch.diagonal(cos).sum()) / max(n * n - n, 1))
    return positive, negative
