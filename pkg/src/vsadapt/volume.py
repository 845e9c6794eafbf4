"""
Volumes and their geometry. Arrays are (slice, row, column), spacing and origin are in mm in the same
order. Files are NIfTI or a raw little-endian float32 payload with a JSON header.
"""
import json
import logging
import os
import traceback
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, List, Mapping, Optional, Sequence, Tuple, Union

import nibabel as nib
import numpy as np
from scipy import ndimage

from vsadapt.errors import ArgumentError, ValidationError, VolumeIOError

logger = logging.getLogger("vsadapt.volume")

Vector3 = Tuple[float, float, float]
PathLike = Union[str, os.PathLike]

# Raw sidecar format, see docs/formats.md
RAW_DTYPE = "f32"
RAW_ORDER = "slice-row-col"
VS_LABELS = (0, 1, 2)  # background, VS, cochlea


class Modality(str, Enum):
    T1 = "T1"
    T2 = "T2"
    UNKNOWN = "UNKNOWN"

    def other(self) -> "Modality":
        if self is Modality.T1:
            return Modality.T2
        if self is Modality.T2:
            return Modality.T1
        raise ArgumentError('UNKNOWN modality has no counterpart')


class Interpolation(str, Enum):
    LINEAR = "linear"
    NEAREST = "nearest"

    @property
    def order(self) -> int:
        return 1 if self is Interpolation.LINEAR else 0


def _vector3(values: Sequence[float], name: str) -> Vector3:
    vec = tuple(float(v) for v in values)
    if len(vec) != 3:
        raise ValidationError(f'{name} must have 3 components, got {len(vec)}')
    return vec  # type: ignore[return-value]


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class Volume:
    """
    A 3-D scalar grid with physical geometry. Axes are (slice, row, column); spacing and origin are in mm
    along the same axes. Instances are immutable: `data` is a read-only copy.
    """
    data: np.ndarray
    spacing: Vector3
    origin: Vector3 = (0.0, 0.0, 0.0)
    modality: Modality = Modality.UNKNOWN

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValidationError(f'volume data must be 3-D, got shape {data.shape}')
        spacing = _vector3(self.spacing, 'spacing')
        if min(spacing) <= 0:
            raise ValidationError(f'spacing components must be strictly positive, got {spacing}')
        if np.issubdtype(data.dtype, np.floating):
            bad = int(np.count_nonzero(~np.isfinite(data)))
            if bad:
                raise ValidationError(f'volume contains {bad} NaN/Inf voxels')
        object.__setattr__(self, 'data', _frozen(data))
        object.__setattr__(self, 'spacing', spacing)
        object.__setattr__(self, 'origin', _vector3(self.origin, 'origin'))
        object.__setattr__(self, 'modality', Modality(self.modality))

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.data.shape)  # type: ignore[return-value]

    def with_data(self, data: np.ndarray, **changes: Any) -> "Volume":
        """Same geometry and modality, new voxels (and optionally other fields)."""
        fields = {'spacing': self.spacing, 'origin': self.origin, 'modality': self.modality}
        fields.update(changes)
        return Volume(data=data, **fields)


@dataclass(frozen=True)
class LabeledVolume:
    """An image with its VS/cochlea mask and optional parcellation and Koos grade."""
    image: Volume
    vs_mask: np.ndarray
    subject_id: str = ''
    gif_mask: Optional[np.ndarray] = None
    koos_grade: Optional[int] = None
    n_gif_labels: Optional[int] = None
    metadata: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        vs = np.asarray(self.vs_mask)
        if vs.shape != self.image.shape:
            raise ValidationError(f'vs_mask shape {vs.shape} differs from image shape {self.image.shape}')
        if not np.isin(vs, VS_LABELS).all():
            raise ValidationError(f'vs_mask values must be within {VS_LABELS}, got {np.unique(vs).tolist()}')
        object.__setattr__(self, 'vs_mask', _frozen(vs.astype(np.uint8)))
        if self.gif_mask is not None:
            gif = np.asarray(self.gif_mask)
            if gif.shape != self.image.shape:
                raise ValidationError(f'gif_mask shape {gif.shape} differs from image shape {self.image.shape}')
            if gif.size and gif.min() < 0:
                raise ValidationError('gif_mask labels must be non-negative')
            if self.n_gif_labels is not None and gif.size and gif.max() > self.n_gif_labels:
                raise ValidationError(f'gif_mask label {int(gif.max())} exceeds declared count {self.n_gif_labels}')
            object.__setattr__(self, 'gif_mask', _frozen(gif.astype(np.int16)))
        if self.koos_grade is not None and self.koos_grade not in (1, 2, 3, 4):
            raise ValidationError(f'koos_grade must be in 1..4, got {self.koos_grade}')
        object.__setattr__(self, 'metadata', dict(self.metadata))

    @property
    def modality(self) -> Modality:
        return self.image.modality

    def replace(self, **changes: Any) -> "LabeledVolume":
        fields = {
            'image': self.image, 'vs_mask': self.vs_mask, 'subject_id': self.subject_id,
            'gif_mask': self.gif_mask, 'koos_grade': self.koos_grade,
            'n_gif_labels': self.n_gif_labels, 'metadata': self.metadata,
        }
        fields.update(changes)
        return LabeledVolume(**fields)


@dataclass(frozen=True)
class Slab:
    """
    A 2.5-D sample: three adjacent slices as channels (3, H, W). Masks, when present, hold the labels of the
    same three slices; index 1 is the centre slice.
    """
    channels: np.ndarray
    subject_id: str
    slice_index: int
    vs_mask: Optional[np.ndarray] = None
    gif_mask: Optional[np.ndarray] = None
    grade: Optional[int] = None
    modality: Modality = Modality.UNKNOWN

    def __post_init__(self):
        channels = np.asarray(self.channels)
        if channels.ndim != 3 or channels.shape[0] != 3:
            raise ValidationError(f'slab must have shape (3, H, W), got {channels.shape}')
        object.__setattr__(self, 'channels', _frozen(channels))
        for name in ('vs_mask', 'gif_mask'):
            mask = getattr(self, name)
            if mask is not None:
                mask = np.asarray(mask)
                if mask.shape != channels.shape:
                    raise ValidationError(f'{name} shape {mask.shape} differs from slab shape {channels.shape}')
                object.__setattr__(self, name, _frozen(mask))

    @property
    def center_vs(self) -> Optional[np.ndarray]:
        return None if self.vs_mask is None else self.vs_mask[1]

    @property
    def center_gif(self) -> Optional[np.ndarray]:
        return None if self.gif_mask is None else self.gif_mask[1]


def _is_raw_header(path: Path) -> bool:
    return path.suffix == '.json'


def _is_nifti(path: Path) -> bool:
    return path.name.endswith('.nii') or path.name.endswith('.nii.gz')


def load_volume(path: PathLike, modality: Modality = Modality.UNKNOWN) -> Volume:
    """
    Read a NIfTI-1 file (.nii / .nii.gz) or a raw sidecar header (.json) into a float32 Volume.

    NIfTI arrays are stored (x, y, z); they are transposed to (slice, row, column) = (z, y, x) and the
    voxel sizes and origin are reversed accordingly.

    :param path: file to read
    :param modality: tag for the returned volume (raw headers may carry their own)
    :return: Volume with data cast to float32
    """
    path = Path(path)
    logger.info(f'load_volume({path})')
    if not path.exists():
        raise VolumeIOError(f'no such volume file: {path}')

    try:
        if _is_raw_header(path):
            data, spacing, origin, header_modality = _read_raw(path)
            if header_modality is not None and modality is Modality.UNKNOWN:
                modality = Modality(header_modality)
        elif _is_nifti(path):
            image = nib.load(str(path))
            data = np.asarray(image.dataobj).transpose(2, 1, 0)
            spacing = tuple(float(z) for z in image.header.get_zooms()[:3])[::-1]
            origin = tuple(float(o) for o in image.affine[:3, 3])[::-1]
        else:
            raise VolumeIOError(f'unsupported volume format: {path.name}')
    except VolumeIOError:
        raise
    except Exception as e:
        logger.error(f'Could not read {path}: ' + traceback.format_exc())
        raise VolumeIOError(f'unreadable volume {path}: {e}') from e

    data = np.asarray(data, dtype=np.float32)
    bad = int(np.count_nonzero(~np.isfinite(data)))
    if bad:
        raise ValidationError(f'{path} contains {bad} NaN/Inf voxels')
    return Volume(data=data, spacing=spacing, origin=origin, modality=modality)


def load_label_grid(path: PathLike) -> np.ndarray:
    """Read a mask file written by `save_volume` and return integer labels (rounded)."""
    return np.rint(load_volume(path).data).astype(np.int16)


def _read_raw(path: Path) -> Tuple[np.ndarray, Vector3, Vector3, Optional[str]]:
    header = json.loads(path.read_text())
    for key in ('shape', 'spacing', 'origin', 'dtype', 'order'):
        if key not in header:
            raise VolumeIOError(f'raw header {path} is missing "{key}"')
    if header['dtype'] != RAW_DTYPE or header['order'] != RAW_ORDER:
        raise VolumeIOError(f'raw header {path} declares unsupported dtype/order {header["dtype"]}/{header["order"]}')
    shape = tuple(int(s) for s in header['shape'])
    payload = path.with_name(header.get('payload', path.stem + '.raw'))
    blob = payload.read_bytes()
    expected = int(np.prod(shape)) * 4
    if len(blob) != expected:
        raise VolumeIOError(f'raw payload {payload} has {len(blob)} bytes, header implies {expected}')
    data = np.frombuffer(blob, dtype='<f4').reshape(shape)
    return data, tuple(header['spacing']), tuple(header['origin']), header.get('modality')


def save_volume(volume: Volume, path: PathLike) -> Path:
    """
    Write a Volume as NIfTI-1 (.nii / .nii.gz) or as a raw sidecar pair (header .json + payload .raw).
    The file is written to a temporary name first and renamed into place.
    """
    path = Path(path)
    logger.debug(f'save_volume({path})')
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        if _is_raw_header(path):
            payload = path.with_suffix('.raw')
            tmp_payload = payload.with_name(payload.name + '.tmp')
            tmp_payload.write_bytes(np.ascontiguousarray(volume.data, dtype='<f4').tobytes())
            header = {
                'shape': list(volume.shape),
                'spacing': list(volume.spacing),
                'origin': list(volume.origin),
                'dtype': RAW_DTYPE,
                'order': RAW_ORDER,
                'payload': payload.name,
                'modality': volume.modality.value,
            }
            tmp_header = path.with_name(path.name + '.tmp')
            tmp_header.write_text(json.dumps(header, indent=2))
            os.replace(tmp_payload, payload)
            os.replace(tmp_header, path)
        elif _is_nifti(path):
            affine = np.eye(4)
            affine[:3, :3] = np.diag(volume.spacing[::-1])
            affine[:3, 3] = volume.origin[::-1]
            data = volume.data.transpose(2, 1, 0)
            if np.issubdtype(data.dtype, np.floating):
                data = data.astype(np.float32)
            image = nib.Nifti1Image(np.ascontiguousarray(data), affine)
            image.header.set_zooms(volume.spacing[::-1])
            suffix = '.nii.gz' if path.name.endswith('.nii.gz') else '.nii'
            tmp = path.with_name(path.name[:-len(suffix)] + '.tmp' + suffix)
            nib.save(image, str(tmp))
            os.replace(tmp, path)
        else:
            raise VolumeIOError(f'unsupported volume format: {path.name}')
    except VolumeIOError:
        raise
    except Exception as e:
        logger.error(f'Could not write {path}: ' + traceback.format_exc())
        raise VolumeIOError(f'could not write {path}: {e}') from e
    return path


def resample(v: Volume, target_spacing: Sequence[float],
             interpolation: Interpolation = Interpolation.LINEAR) -> Volume:
    """
    Resample onto a grid with `target_spacing`, keeping the first voxel centre fixed.
    Output shape per axis is round(n * spacing / target_spacing). Samples beyond the last input voxel
    are clamped to the edge. Use NEAREST for label grids.
    """
    target = tuple(float(s) for s in target_spacing)
    if len(target) != 3 or min(target) <= 0:
        raise ArgumentError(f'target spacing must be 3 positive values, got {target_spacing}')
    interpolation = Interpolation(interpolation)
    logger.debug(f'resample({v.shape}, {v.spacing} -> {target}, {interpolation.value})')

    if np.allclose(v.spacing, target, rtol=0, atol=1e-9):
        return v.with_data(v.data, spacing=target)

    out_shape = tuple(max(1, int(round(n * s / t))) for n, s, t in zip(v.shape, v.spacing, target))
    scale = np.asarray(target) / np.asarray(v.spacing)
    data = ndimage.affine_transform(
        v.data, scale, offset=0.0, output_shape=out_shape,
        order=interpolation.order, mode='nearest', prefilter=False,
        output=v.data.dtype,
    )
    return v.with_data(data, spacing=target)


def resample_labels(mask: np.ndarray, spacing: Sequence[float], target_spacing: Sequence[float]) -> np.ndarray:
    """Nearest-neighbour resampling of an integer label grid."""
    grid = Volume(data=np.asarray(mask), spacing=spacing)
    return np.asarray(resample(grid, target_spacing, Interpolation.NEAREST).data)


def rescale_intensity(v: Volume, low: float, high: float) -> Volume:
    """Clip to [low, high] and map linearly onto [-1, 1]."""
    if not high > low:
        raise ArgumentError(f'intensity window must satisfy high > low, got [{low}, {high}]')
    data = (np.clip(v.data, low, high) - low) / (high - low) * 2.0 - 1.0
    return v.with_data(data.astype(np.float32))


def extract_slabs(lv: LabeledVolume, stride: int = 1) -> List[Slab]:
    """
    One Slab per centre slice 0, stride, 2*stride, ... Channels are slices (k-1, k, k+1) with indices
    clamped to the volume, so the first and last slabs replicate their edge slice.
    """
    if stride < 1:
        raise ArgumentError(f'stride must be >= 1, got {stride}')
    n_slices = lv.image.shape[0]
    slabs = []
    for center in range(0, n_slices, stride):
        index = np.clip([center - 1, center, center + 1], 0, n_slices - 1)
        slabs.append(Slab(
            channels=lv.image.data[index],
            subject_id=lv.subject_id,
            slice_index=center,
            vs_mask=lv.vs_mask[index],
            gif_mask=None if lv.gif_mask is None else lv.gif_mask[index],
            grade=lv.koos_grade,
            modality=lv.modality,
        ))
    return slabs


def volume_slabs(v: Volume) -> np.ndarray:
    """All stride-1 slab channel stacks of an unlabeled volume, shape (N, 3, H, W)."""
    n_slices = v.shape[0]
    index = np.clip(np.arange(n_slices)[:, None] + np.array([-1, 0, 1])[None, :], 0, n_slices - 1)
    return np.asarray(v.data)[index]


def assemble_slices(slices: np.ndarray, like: Volume, **changes: Any) -> Volume:
    """Stack per-slice 2-D results (N, H, W) back into a volume with the geometry of `like`."""
    slices = np.asarray(slices)
    if slices.shape != like.shape:
        raise ArgumentError(f'slice stack shape {slices.shape} differs from volume shape {like.shape}')
    return like.with_data(slices, **changes)
