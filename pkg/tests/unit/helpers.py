import math

import numpy as np
import torch

from vsadapt.msfnet import PROFILES, TranslationModel
from vsadapt.volume import LabeledVolume, Modality, Volume


def make_volume(shape=(4, 16, 16), spacing=(1.0, 1.0, 1.0), modality=Modality.T1, seed=0, origin=(0.0, 0.0, 0.0)):
    rng = np.random.default_rng(seed)
    return Volume(data=rng.uniform(-1.0, 1.0, size=shape).astype(np.float32), spacing=spacing, origin=origin,
                  modality=modality)


def box_mask(shape, start, stop, label=1, dtype=np.uint8):
    mask = np.zeros(shape, dtype=dtype)
    mask[tuple(slice(a, b) for a, b in zip(start, stop))] = label
    return mask


def make_case(subject_id='case-000', shape=(4, 16, 16), modality=Modality.T1, grade=2, seed=0, with_gif=True):
    """Random image with a 2x4x4 tumor box and a one-voxel-thick cochlea line."""
    image = make_volume(shape, modality=modality, seed=seed)
    vs = box_mask(shape, (1, 4, 4), (3, 8, 8))
    vs[1, 12, 10:13] = 2
    gif = None
    if with_gif:
        gif = np.zeros(shape, dtype=np.int16)
        gif[:, :, :shape[2] // 2] = 1
        gif[:, :, shape[2] // 2:] = 2
    return LabeledVolume(image=image, vs_mask=vs, subject_id=subject_id, gif_mask=gif, koos_grade=grade,
                         n_gif_labels=4 if with_gif else None)


def tiny_model(variant='msfnet', seed=0):
    torch.manual_seed(seed)
    return TranslationModel(PROFILES['tiny'], variant)


# Reference implementations of the contrastive objectives, written as explicit loops.

def brute_force_loss_self(z1, z2, tau):
    z1 = [_unit(r) for r in z1]
    z2 = [_unit(r) for r in z2]
    n = len(z1)
    s = [[_dot(z1[i], z2[j]) / tau for j in range(n)] for i in range(n)]
    total = 0.0
    for i in range(n):
        row = math.exp(s[i][i]) / sum(math.exp(s[i][k]) for k in range(n))
        col = math.exp(s[i][i]) / sum(math.exp(s[k][i]) for k in range(n))
        total -= math.log(row * col)
    return total


def brute_force_loss_sup(z1, z2, grades, tau):
    z1 = [_unit(r) for r in z1]
    z2 = [_unit(r) for r in z2]
    n = len(z1)
    s = [[_dot(z1[i], z2[j]) / tau for j in range(n)] for i in range(n)]
    total = 0.0
    for i in range(n):
        positives = [p for p in range(n) if grades[p] == grades[i]]
        inner = 0.0
        for p in positives:
            row = math.exp(s[i][p]) / sum(math.exp(s[i][k]) for k in range(n))
            col = math.exp(s[p][i]) / sum(math.exp(s[k][i]) for k in range(n))
            inner += math.log(row * col)
        total -= inner / len(positives)
    return total


def brute_force_assd(pred, truth, spacing):
    """Boundary-to-boundary distances by exhaustive search over voxel pairs."""
    def edge(mask):
        return np.asarray([np.asarray(idx, dtype=float) * np.asarray(spacing)
                           for idx in zip(*np.nonzero(mask)) if _on_boundary(mask, idx)])

    a, b = edge(np.asarray(pred, bool)), edge(np.asarray(truth, bool))
    d = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1))
    return 0.5 * (d.min(axis=1).mean() + d.min(axis=0).mean())


def _on_boundary(mask, idx):
    for axis in range(mask.ndim):
        for step in (-1, 1):
            n = list(idx)
            n[axis] += step
            if n[axis] < 0 or n[axis] >= mask.shape[axis] or not mask[tuple(n)]:
                return True
    return False


def _unit(row):
    norm = math.sqrt(sum(x * x for x in row))
    return [x / norm for x in row]


def _dot(a, b):
    return sum(x * y for x, y in zip(a, b))
