"""
Per-case preprocessing: resampling to the target spacing, histogram matching against the atlas, affine
registration (mutual information or NCC) to the atlas grid, fixed-size cropping and intensity rescaling.
Each sub-operation failure surfaces as a StageError naming it.
"""
import logging
import traceback
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage, optimize
from scipy.spatial.transform import Rotation

from vsadapt.errors import ArgumentError, RegistrationError, StageError, ValidationError, VsAdaptError
from vsadapt.volume import (
    Interpolation, LabeledVolume, Modality, Volume, resample, resample_labels, rescale_intensity,
)

logger = logging.getLogger("vsadapt.preprocess")

MI = "MI"
NCC = "NCC"

# Parameter vector layout used by the optimizer: translation (mm), rotation (rad), log-scale, shear.
_PARAM_SCALES = np.array([1.0] * 3 + [0.02] * 3 + [0.02] * 3 + [0.02] * 3)
_PARAM_BOUNDS = np.array([25.0] * 3 + [0.35] * 3 + [0.25] * 3 + [0.15] * 3)
_DOF = {'translation': 3, 'rigid': 6, 'affine': 12}


@dataclass(frozen=True)
class AffineTransform:
    """
    y = matrix @ x + translation, mapping moving-space physical points (mm, slice-row-col order) onto
    atlas space. Resampling a moving image onto the atlas grid uses the inverse mapping.
    """
    matrix: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        matrix = np.asarray(self.matrix, dtype=np.float64).reshape(3, 3)
        translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if abs(np.linalg.det(matrix)) <= 1e-8:
            raise ArgumentError(f'affine matrix is singular (det={np.linalg.det(matrix):.3g})')
        object.__setattr__(self, 'matrix', matrix)
        object.__setattr__(self, 'translation', translation)

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls()

    def inverse(self) -> "AffineTransform":
        inv = np.linalg.inv(self.matrix)
        return AffineTransform(inv, -inv @ self.translation)

    def compose(self, other: "AffineTransform") -> "AffineTransform":
        """self after other."""
        return AffineTransform(self.matrix @ other.matrix, self.matrix @ other.translation + self.translation)

    def apply_points(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.matrix.T + self.translation

    def to_dict(self) -> Dict[str, Any]:
        return {'matrix': self.matrix.tolist(), 'translation': self.translation.tolist()}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "AffineTransform":
        return cls(np.asarray(d['matrix']), np.asarray(d['translation']))


@dataclass(frozen=True)
class CropRegion:
    start: Tuple[int, int, int]
    size: Tuple[int, int, int]

    def __post_init__(self):
        start = tuple(int(s) for s in self.start)
        size = tuple(int(s) for s in self.size)
        if len(start) != 3 or len(size) != 3 or min(size) < 1:
            raise ArgumentError(f'invalid crop region start={self.start} size={self.size}')
        object.__setattr__(self, 'start', start)
        object.__setattr__(self, 'size', size)


@dataclass(frozen=True)
class RegistrationOptions:
    levels: Tuple[int, ...] = (4, 2, 1)
    max_evaluations: int = 400
    mi_bins: int = 32
    dof: str = 'affine'
    xtol: float = 1e-3
    ftol: float = 1e-6
    min_overlap: float = 0.2


@dataclass(frozen=True)
class PreprocessOptions:
    """Per-case preprocessing settings; built from the [preprocess] config section."""
    target_spacing: Tuple[float, float, float] = (1.0, 0.4102, 0.4102)
    n_quantiles: int = 256
    crop_start: Optional[Tuple[int, int, int]] = None
    crop_size: Tuple[int, int, int] = (80, 256, 256)
    similarity: Mapping[str, str] = field(default_factory=lambda: {'T1': MI, 'T2': NCC})
    registration: RegistrationOptions = field(default_factory=RegistrationOptions)
    background: float = 0.0
    rescale: bool = True
    intensity_percentiles: Tuple[float, float] = (0.5, 99.5)


def histogram_match(moving: Volume, reference: Volume, n_quantiles: int = 256) -> Volume:
    """
    Map `moving` intensities onto the distribution of `reference`.

    Every moving voxel gets its mid-rank empirical CDF value u in (0, 1); the output is the reference
    quantile function at u, linearly interpolated between `n_quantiles` evenly spaced levels. Tied voxels
    share one rank, so the mapping is monotone non-decreasing and a constant volume maps to the
    reference median.
    """
    logger.info(f'histogram_match({moving.shape} -> {reference.shape}, n_quantiles={n_quantiles})')
    if n_quantiles < 2:
        raise ArgumentError(f'n_quantiles must be >= 2, got {n_quantiles}')
    if moving.data.size == 0 or reference.data.size == 0:
        raise ValidationError('histogram matching needs nonempty volumes')
    ref = np.asarray(reference.data, dtype=np.float64).ravel()
    if ref.min() == ref.max():
        raise ValidationError('reference volume is constant; histogram mapping is undefined')

    levels = np.linspace(0.0, 1.0, n_quantiles)
    ref_quantiles = np.quantile(ref, levels)

    values, inverse, counts = np.unique(np.asarray(moving.data).ravel(), return_inverse=True, return_counts=True)
    below = np.cumsum(counts) - counts
    ranks = (below + 0.5 * counts) / counts.sum()
    mapped = np.interp(ranks, levels, ref_quantiles)
    out = mapped[inverse].reshape(moving.shape).astype(np.float32)
    logger.debug(f'histogram_match: {len(values)} distinct moving values mapped')
    return moving.with_data(out)


def _rank_image(data: np.ndarray) -> np.ndarray:
    values, inverse, counts = np.unique(np.asarray(data).ravel(), return_inverse=True, return_counts=True)
    ranks = (np.cumsum(counts) - 0.5 * counts) / counts.sum()
    return ranks[inverse].reshape(np.shape(data))


def _mi_from_ranks(a: np.ndarray, b: np.ndarray, bins: int) -> float:
    joint, _, _ = np.histogram2d(a, b, bins=bins, range=[[0.0, 1.0], [0.0, 1.0]])
    total = joint.sum()
    if total == 0:
        return float('nan')
    p = joint / total
    px = p.sum(axis=1, keepdims=True)
    py = p.sum(axis=0, keepdims=True)
    nz = p > 0
    return float(np.sum(p[nz] * np.log(p[nz] / (px @ py)[nz])))


def mutual_information(a: np.ndarray, b: np.ndarray, bins: int = 32) -> float:
    """
    Mutual information (nats) from a bins x bins joint histogram over equal-frequency bins: each image
    is replaced by its mid-rank CDF before binning, so the value does not change under any strictly
    monotone remapping of either input.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ArgumentError(f'MI inputs differ in size: {a.shape} vs {b.shape}')
    return _mi_from_ranks(_rank_image(a), _rank_image(b), bins)


def normalized_cross_correlation(a: np.ndarray, b: np.ndarray) -> float:
    """Global NCC of the standardized inputs, in [-1, 1]; NaN when either input is constant."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ArgumentError(f'NCC inputs differ in size: {a.shape} vs {b.shape}')
    sa, sb = a.std(), b.std()
    if sa == 0 or sb == 0:
        return float('nan')
    return float(np.mean((a - a.mean()) / sa * (b - b.mean()) / sb))


def similarity(moving: Volume, atlas: Volume, kind: str, t: Optional[AffineTransform] = None,
               bins: int = 32) -> float:
    """Similarity between `moving` resampled through `t` onto the atlas grid and `atlas`, over the overlap."""
    t = t or AffineTransform.identity()
    warped = _warp(np.asarray(moving.data, dtype=np.float64), moving, atlas, t, order=1, cval=np.nan)
    valid = np.isfinite(warped)
    if not valid.any():
        return float('nan')
    if kind == MI:
        return mutual_information(warped[valid], np.asarray(atlas.data)[valid], bins)
    if kind == NCC:
        return normalized_cross_correlation(warped[valid], np.asarray(atlas.data)[valid])
    raise ArgumentError(f'unknown similarity {kind!r}, expected {MI} or {NCC}')


def _index_mapping(moving: Volume, grid: Volume, t: AffineTransform) -> Tuple[np.ndarray, np.ndarray]:
    """Voxel-index affine (matrix, offset) taking output grid indices to moving indices."""
    inv = np.linalg.inv(t.matrix)
    s_in = np.asarray(moving.spacing)
    s_out = np.asarray(grid.spacing)
    matrix = np.diag(1.0 / s_in) @ inv @ np.diag(s_out)
    offset = (inv @ (np.asarray(grid.origin) - t.translation) - np.asarray(moving.origin)) / s_in
    return matrix, offset


def _warp(data: np.ndarray, moving: Volume, grid: Volume, t: AffineTransform, order: int, cval: float) -> np.ndarray:
    matrix, offset = _index_mapping(moving, grid, t)
    return ndimage.affine_transform(
        data, matrix, offset=offset, output_shape=grid.shape, order=order,
        mode='constant', cval=cval, prefilter=False,
    )


def apply_affine(v: Volume, t: AffineTransform, interpolation: Interpolation = Interpolation.LINEAR,
                 reference: Optional[Volume] = None, background: float = 0.0) -> Volume:
    """
    Resample `v` through `t` onto the grid of `reference` (default: the grid of `v`). Each output voxel
    at physical point y reads `v` at t^-1(y); points outside `v` get `background`.
    """
    if not isinstance(t, AffineTransform):
        raise ArgumentError('apply_affine needs an AffineTransform')
    interpolation = Interpolation(interpolation)
    grid = reference if reference is not None else v
    data = np.asarray(v.data)
    out = _warp(data, v, grid, t, order=interpolation.order, cval=background)
    if interpolation is Interpolation.NEAREST:
        out = out.astype(data.dtype)
    else:
        out = out.astype(np.float32)
    return Volume(data=out, spacing=grid.spacing, origin=grid.origin, modality=v.modality)


def _params_to_transform(params: np.ndarray, center: np.ndarray) -> AffineTransform:
    p = np.zeros(12)
    p[:len(params)] = params
    rotation = Rotation.from_rotvec(p[3:6]).as_matrix()
    scale = np.diag(np.exp(p[6:9]))
    shear = np.eye(3)
    shear[0, 1], shear[0, 2], shear[1, 2] = p[9:12]
    matrix = rotation @ shear @ scale
    return AffineTransform(matrix, center - matrix @ center + p[:3])


def _grid_center(v: Volume) -> np.ndarray:
    return np.asarray(v.origin) + (np.asarray(v.shape) - 1) / 2.0 * np.asarray(v.spacing)


def _pyramid(v: Volume, factor: int) -> Volume:
    if factor == 1:
        return v
    smoothed = v.with_data(ndimage.gaussian_filter(np.asarray(v.data, dtype=np.float32), sigma=factor / 2.0))
    return resample(smoothed, tuple(s * factor for s in v.spacing))


class _Objective:
    """Negative similarity of the warped moving image; remembers the best finite transform seen."""

    def __init__(self, moving: Volume, atlas: Volume, kind: str, center: np.ndarray, opts: RegistrationOptions):
        self.kind = kind
        self.center = center
        self.atlas = atlas
        self.moving = moving
        self.bins = opts.mi_bins
        self.min_overlap = opts.min_overlap
        if kind == MI:
            self.moving_values = _rank_image(moving.data)
            self.atlas_values = _rank_image(atlas.data).ravel()
        elif kind == NCC:
            m = np.asarray(moving.data, dtype=np.float64)
            a = np.asarray(atlas.data, dtype=np.float64)
            self.moving_values = (m - m.mean()) / (m.std() or 1.0)
            self.atlas_values = ((a - a.mean()) / (a.std() or 1.0)).ravel()
        else:
            raise ArgumentError(f'unknown similarity {kind!r}, expected {MI} or {NCC}')
        self.best_value = np.inf
        self.best_params: Optional[np.ndarray] = None

    def value(self, params: np.ndarray) -> float:
        t = _params_to_transform(params, self.center)
        warped = _warp(self.moving_values, self.moving, self.atlas, t, order=1, cval=np.nan).ravel()
        valid = np.isfinite(warped)
        overlap = valid.mean()
        if overlap < self.min_overlap:
            # finite penalty below any attainable similarity, steeper as overlap shrinks
            return -10.0 - (self.min_overlap - overlap)
        if self.kind == MI:
            return _mi_from_ranks(warped[valid], self.atlas_values[valid], self.bins)
        return normalized_cross_correlation(warped[valid], self.atlas_values[valid])

    def __call__(self, scaled: np.ndarray) -> float:
        params = scaled * _PARAM_SCALES[:len(scaled)]
        sim = self.value(params)
        if not np.isfinite(sim):
            last = None if self.best_params is None else _params_to_transform(self.best_params, self.center)
            raise RegistrationError(f'{self.kind} similarity became NaN during optimization', last_transform=last)
        if -sim < self.best_value:
            self.best_value = -sim
            self.best_params = params.copy()
        return -sim


def register_affine(moving: Volume, atlas: Volume, similarity_kind: str = MI,
                    opts: Optional[RegistrationOptions] = None) -> AffineTransform:
    """
    Find the affine transform maximizing MI or NCC between `moving` (resampled onto the atlas grid) and
    `atlas`. Multi-resolution Powell search over translation, rotation, log-scale and shear around the
    atlas grid centre; each level starts from the previous optimum.

    The start point is the better of identity and centre alignment, and the result is never worse than the
    identity transform at full resolution.
    """
    opts = opts or RegistrationOptions()
    if opts.dof not in _DOF:
        raise ArgumentError(f'dof must be one of {sorted(_DOF)}, got {opts.dof!r}')
    n_params = _DOF[opts.dof]
    logger.info(f'register_affine({moving.modality.value} -> atlas, {similarity_kind}, dof={opts.dof}, levels={opts.levels})')

    center = _grid_center(atlas)
    identity_params = np.zeros(n_params)
    # identity expressed in centre parameterization: translation 0 around atlas centre is identity
    full = _Objective(moving, atlas, similarity_kind, center, opts)
    identity_value = full.value(identity_params)
    if not np.isfinite(identity_value):
        raise RegistrationError('moving and atlas do not overlap at the identity transform', AffineTransform.identity())

    start = identity_params.copy()
    shift = _grid_center(atlas) - _grid_center(moving)
    if n_params >= 3 and np.any(shift != 0):
        centred = identity_params.copy()
        centred[:3] = shift
        centred_value = full.value(centred)
        if np.isfinite(centred_value) and centred_value > identity_value:
            start = centred
    logger.debug(f'register_affine: identity {similarity_kind}={identity_value:.6f}, start={start[:3]}')

    params = start
    bounds = [(-b, b) for b in (_PARAM_BOUNDS / _PARAM_SCALES)[:n_params]]
    for factor in opts.levels:
        level_moving = _pyramid(moving, factor)
        level_atlas = _pyramid(atlas, factor)
        objective = _Objective(level_moving, level_atlas, similarity_kind, center, opts)
        x0 = np.clip(params / _PARAM_SCALES[:n_params], [b[0] for b in bounds], [b[1] for b in bounds])
        start_value = objective(x0)
        try:
            result = optimize.minimize(
                objective, x0, method='Powell', bounds=bounds,
                options={'maxfev': opts.max_evaluations, 'xtol': opts.xtol, 'ftol': opts.ftol},
            )
        except RegistrationError as e:
            logger.error(f'register_affine diverged at pyramid level {factor}: ' + traceback.format_exc())
            raise RegistrationError(str(e), last_transform=e.last_transform or _params_to_transform(params, center))
        if objective.best_value <= start_value and objective.best_params is not None:
            params = objective.best_params
        logger.debug(f'register_affine level {factor}: {similarity_kind}={-objective.best_value:.6f} after {result.nfev} evaluations')

    final_value = full.value(params)
    if not np.isfinite(final_value) or final_value < identity_value:
        logger.warning(f'register_affine: optimum {final_value:.6f} worse than identity {identity_value:.6f}; keeping identity')
        return AffineTransform.identity()
    t = _params_to_transform(params, center)
    logger.info(f'register_affine: {similarity_kind} {identity_value:.4f} -> {final_value:.4f}, translation {np.round(t.translation, 3).tolist()}')
    return t


def crop_fixed(v: Volume, region: CropRegion, background: float = 0.0) -> Volume:
    """
    Extract `region` (voxel start and size). Parts of the region outside `v` are filled with `background`;
    the output origin is the physical position of the region start.
    """
    data = np.asarray(v.data)
    out = np.full(region.size, background, dtype=data.dtype)
    src, dst = [], []
    for start, size, n in zip(region.start, region.size, data.shape):
        lo, hi = max(start, 0), min(start + size, n)
        if hi <= lo:
            return v.with_data(out, origin=_region_origin(v, region))
        src.append(slice(lo, hi))
        dst.append(slice(lo - start, hi - start))
    out[tuple(dst)] = data[tuple(src)]
    return v.with_data(out, origin=_region_origin(v, region))


def crop_labels(mask: np.ndarray, region: CropRegion) -> np.ndarray:
    grid = Volume(data=np.asarray(mask), spacing=(1.0, 1.0, 1.0))
    return np.asarray(crop_fixed(grid, region, background=0).data)


def _region_origin(v: Volume, region: CropRegion) -> Tuple[float, float, float]:
    return tuple(float(o + s * st) for o, s, st in zip(v.origin, v.spacing, region.start))  # type: ignore[return-value]


def centered_region(shape: Sequence[int], size: Sequence[int]) -> CropRegion:
    return CropRegion(tuple((n - s) // 2 for n, s in zip(shape, size)), tuple(size))


def covering_region(masks: Iterable[np.ndarray], margin: int = 0,
                    size: Optional[Sequence[int]] = None) -> CropRegion:
    """
    Smallest region covering the foreground bounding boxes of every mask, grown by `margin` voxels.
    With `size`, a region of exactly that size centred on the covering box is returned instead.
    """
    lo, hi = None, None
    for mask in masks:
        idx = np.argwhere(np.asarray(mask) > 0)
        if idx.size == 0:
            continue
        lo = idx.min(axis=0) if lo is None else np.minimum(lo, idx.min(axis=0))
        hi = idx.max(axis=0) if hi is None else np.maximum(hi, idx.max(axis=0))
    if lo is None:
        raise ArgumentError('covering_region needs at least one nonempty mask')
    lo = lo - margin
    hi = hi + margin
    if size is None:
        return CropRegion(tuple(lo), tuple(hi - lo + 1))
    center = (lo + hi) // 2
    return CropRegion(tuple(center - np.asarray(size) // 2), tuple(size))


@contextmanager
def _stage(name: str) -> Iterator[None]:
    try:
        yield
    except StageError:
        raise
    except VsAdaptError as e:
        logger.error(f'preprocessing stage {name} failed: {e}')
        raise StageError(name, e) from e
    except Exception as e:
        logger.error(f'preprocessing stage {name} failed: ' + traceback.format_exc())
        raise StageError(name, e) from e


def intensity_window(reference: Volume, percentiles: Tuple[float, float]) -> Tuple[float, float]:
    low, high = np.percentile(np.asarray(reference.data), percentiles)
    if not high > low:
        high = low + 1.0
    return float(low), float(high)


def align_case(lv: LabeledVolume, atlas: Volume, opts: PreprocessOptions,
               reference: Optional[Volume] = None, transform: Optional[AffineTransform] = None) -> LabeledVolume:
    """
    resample -> histogram match -> register -> transform onto the atlas grid. Images use linear
    interpolation, masks nearest. The transform is recorded in `metadata['affine']`. A given `transform`
    is applied as is and registration is skipped.
    """
    modality = lv.modality
    logger.info(f'align_case({lv.subject_id}, {modality.value})')
    reference = reference if reference is not None else atlas
    kind = opts.similarity.get(modality.value)
    if kind is None:
        raise StageError('register', ArgumentError(f'no similarity configured for modality {modality.value}'))

    with _stage('resample'):
        image = resample(lv.image, opts.target_spacing, Interpolation.LINEAR)
        vs = resample_labels(lv.vs_mask, lv.image.spacing, opts.target_spacing)
        gif = None if lv.gif_mask is None else resample_labels(lv.gif_mask, lv.image.spacing, opts.target_spacing)
    with _stage('histogram_match'):
        image = histogram_match(image, reference, opts.n_quantiles)
    with _stage('register'):
        t = transform if transform is not None else register_affine(image, atlas, kind, opts.registration)
    with _stage('apply_affine'):
        vs = _warp_labels(vs, lv.image.origin, t, atlas, opts.target_spacing)
        if gif is not None:
            gif = _warp_labels(gif, lv.image.origin, t, atlas, opts.target_spacing)
        image = apply_affine(image, t, Interpolation.LINEAR, reference=atlas, background=opts.background)

    metadata = dict(lv.metadata)
    metadata['affine'] = t.to_dict()
    return lv.replace(image=image, vs_mask=vs, gif_mask=gif, metadata=metadata)


def _warp_labels(mask: np.ndarray, origin, t: AffineTransform, atlas: Volume, target_spacing) -> np.ndarray:
    grid = Volume(data=mask, spacing=target_spacing, origin=origin)
    return np.asarray(apply_affine(grid, t, Interpolation.NEAREST, reference=atlas, background=0).data)


def finish_case(lv: LabeledVolume, region: CropRegion, opts: PreprocessOptions,
                window: Optional[Tuple[float, float]] = None) -> LabeledVolume:
    """Crop an aligned case to `region` and, when configured, rescale intensities with `window`."""
    with _stage('crop'):
        image = crop_fixed(lv.image, region, background=opts.background)
        vs = crop_labels(lv.vs_mask, region)
        gif = None if lv.gif_mask is None else crop_labels(lv.gif_mask, region)
    if opts.rescale:
        if window is None:
            raise StageError('rescale', ArgumentError('rescaling needs an intensity window'))
        with _stage('rescale'):
            image = rescale_intensity(image, *window)
    metadata = dict(lv.metadata)
    metadata['crop'] = {'start': list(region.start), 'size': list(region.size)}
    return lv.replace(image=image, vs_mask=vs, gif_mask=gif, metadata=metadata)


def preprocess_case(lv: LabeledVolume, atlas: Volume, opts: PreprocessOptions,
                    reference: Optional[Volume] = None) -> LabeledVolume:
    """
    The full per-case pipeline: resample, histogram match within modality, register to the atlas (MI for
    T1, NCC for T2 by default), transform image (linear) and masks (nearest), crop to the fixed region and
    optionally rescale to [-1, 1] with the reference's percentile window.

    :param lv: raw labeled case
    :param atlas: atlas volume, already at the target spacing
    :param opts: preprocessing options
    :param reference: histogram reference for this case's modality; the atlas when omitted
    """
    if not np.allclose(atlas.spacing, opts.target_spacing, atol=1e-6):
        raise ArgumentError(f'atlas spacing {atlas.spacing} differs from target spacing {opts.target_spacing}')
    reference = reference if reference is not None else atlas
    aligned = align_case(lv, atlas, opts, reference)
    if opts.crop_start is None:
        region = centered_region(atlas.shape, opts.crop_size)
    else:
        region = CropRegion(opts.crop_start, opts.crop_size)
    window = intensity_window(reference, opts.intensity_percentiles) if opts.rescale else None
    return finish_case(aligned, region, opts, window)
