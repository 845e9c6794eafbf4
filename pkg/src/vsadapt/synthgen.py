"""
Deterministic two-modality head phantoms.

Anatomy, in mm relative to the grid centre (plus a small seeded shift per subject):
- head: ellipsoid with semi-axes 0.42 x the grid extent
- parcellation (labels 1-4): left / right hemisphere split at the mid column, a brainstem cylinder along the
  slice axis (label 3), a fluid ellipsoid in front of it (label 4)
- cochleas (VS label 2): two spheres of `cochlea_radius_mm`, lateral of the brainstem and behind the tumor
- tumor (VS label 1): sphere on the left side whose surface lies `contact_gap_mm - radius` from the brainstem,
  so it touches the brainstem exactly when radius >= contact_gap_mm

Tumor radii are drawn per subject from the grade bin `index % 4`, so cohorts are grade-balanced.
Koos grade = 1 + number of thresholds <= radius, raised to at least 3 on brainstem contact.

ceT1 rendering: tumor bright, fluid dark. hrT2 rendering: tumor dark, fluid and cochleas bright.
Both get additive Gaussian noise with standard deviation `noise_sigma`.
"""
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from vsadapt.errors import ArgumentError, VolumeIOError
from vsadapt.volume import LabeledVolume, Modality, Volume, load_label_grid, load_volume, save_volume

logger = logging.getLogger("vsadapt.synthgen")

N_GIF_LABELS = 4
LEFT, RIGHT, BRAINSTEM, FLUID = 1, 2, 3, 4
TUMOR, COCHLEA = 1, 2
COHORT_MANIFEST = "cohort.json"
ATLAS_INDEX = 2 ** 31 - 1

# Intensity per structure: background, left, right, brainstem, fluid, cochlea, tumor
_INTENSITIES = {
    Modality.T1: (0.0, 0.45, 0.42, 0.55, 0.10, 0.30, 0.95),
    Modality.T2: (0.0, 0.35, 0.33, 0.28, 0.90, 0.85, 0.20),
}


@dataclass(frozen=True)
class PhantomSpec:
    seed: int = 0
    shape: Tuple[int, int, int] = (16, 64, 64)
    spacing: Tuple[float, float, float] = (1.0, 0.5, 0.5)
    radius_range_mm: Tuple[float, float] = (1.0, 6.0)
    koos_thresholds_mm: Tuple[float, float, float] = (2.0, 3.5, 5.0)
    contact_gap_mm: float = 3.5
    brainstem_radius_mm: float = 3.0
    cochlea_radius_mm: float = 1.0
    max_shift_mm: float = 1.0
    noise_sigma: float = 0.02

    def __post_init__(self):
        if len(self.shape) != 3 or min(self.shape) < 1:
            raise ArgumentError(f'phantom shape must be three positive sizes, got {self.shape}')
        low, high = self.radius_range_mm
        if not 0 < low < high:
            raise ArgumentError(f'radius range must satisfy 0 < low < high, got {self.radius_range_mm}')
        if list(self.koos_thresholds_mm) != sorted(self.koos_thresholds_mm) or not low < self.koos_thresholds_mm[0] \
                or not self.koos_thresholds_mm[-1] < high:
            raise ArgumentError(f'Koos thresholds {self.koos_thresholds_mm} must increase strictly inside '
                                f'the radius range {self.radius_range_mm}')
        if self.noise_sigma < 0:
            raise ArgumentError(f'noise_sigma must be non-negative, got {self.noise_sigma}')


def koos_grade(radius_mm: float, contact: bool, thresholds: Tuple[float, ...]) -> int:
    grade = 1 + sum(radius_mm >= t for t in thresholds)
    return max(grade, 3) if contact else grade


@dataclass(frozen=True)
class Anatomy:
    """Modality-independent structure of one phantom subject."""
    index: int
    structures: np.ndarray
    vs_mask: np.ndarray
    gif_mask: np.ndarray
    radius_mm: float
    contact: bool
    grade: int


def _coordinates(spec: PhantomSpec, shift: np.ndarray) -> List[np.ndarray]:
    axes = [(np.arange(n) - (n - 1) / 2.0) * s - d for n, s, d in zip(spec.shape, spec.spacing, shift)]
    return np.meshgrid(*axes, indexing='ij')


def _radius_for(spec: PhantomSpec, index: int, rng: np.random.Generator) -> float:
    edges = (spec.radius_range_mm[0],) + tuple(spec.koos_thresholds_mm) + (spec.radius_range_mm[1],)
    low, high = edges[index % 4], edges[index % 4 + 1]
    margin = 0.1 * (high - low)
    return float(rng.uniform(low + margin, high - margin))


def build_anatomy(spec: PhantomSpec, index: int, radius_mm: Optional[float] = None,
                  shift: bool = True) -> Anatomy:
    """Structure map of subject `index`; `radius_mm` overrides the drawn tumor radius."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, index, 0]))
    offset = rng.uniform(-spec.max_shift_mm, spec.max_shift_mm, size=3) if shift else np.zeros(3)
    drawn = _radius_for(spec, index, rng)
    radius = drawn if radius_mm is None else float(radius_mm)
    z, y, x = _coordinates(spec, offset)
    extent = np.array(spec.shape) * np.array(spec.spacing)
    a, b, c = 0.42 * extent

    structures = np.zeros(spec.shape, dtype=np.uint8)
    head = (z / a) ** 2 + (y / b) ** 2 + (x / c) ** 2 <= 1.0
    structures[head & (x < 0)] = LEFT
    structures[head & (x >= 0)] = RIGHT
    brainstem = head & (y ** 2 + x ** 2 <= spec.brainstem_radius_mm ** 2)
    structures[brainstem] = BRAINSTEM
    fluid = head & (((y + 2.5 * spec.brainstem_radius_mm) / (0.8 * spec.brainstem_radius_mm)) ** 2
                    + (x / (1.5 * spec.brainstem_radius_mm)) ** 2 + (z / (0.3 * a)) ** 2 <= 1.0)
    structures[fluid] = FLUID

    vs = np.zeros(spec.shape, dtype=np.uint8)
    cochlea_x = spec.brainstem_radius_mm + spec.contact_gap_mm + 3 * spec.cochlea_radius_mm
    cochlea_y = spec.radius_range_mm[1] + spec.cochlea_radius_mm + 0.5
    for side in (-1.0, 1.0):
        cochlea = (z ** 2 + (y - cochlea_y) ** 2 + (x - side * cochlea_x) ** 2) <= spec.cochlea_radius_mm ** 2
        vs[cochlea & head] = COCHLEA
    tumor_x = spec.brainstem_radius_mm + spec.contact_gap_mm
    tumor = (z ** 2 + y ** 2 + (x + tumor_x) ** 2) <= radius ** 2
    vs[tumor] = TUMOR

    contact = radius >= spec.contact_gap_mm
    gif = np.where(head, structures, 0).astype(np.int16)
    structures = structures.copy()
    structures[vs == COCHLEA] = 5
    structures[vs == TUMOR] = 6
    return Anatomy(index=index, structures=structures, vs_mask=vs, gif_mask=gif, radius_mm=radius, contact=contact,
                   grade=koos_grade(radius, contact, spec.koos_thresholds_mm))


def render(spec: PhantomSpec, anatomy: Anatomy, modality: Modality, noise: bool = True) -> Volume:
    modality = Modality(modality)
    table = np.asarray(_INTENSITIES[modality], dtype=np.float32)
    data = table[anatomy.structures]
    if noise and spec.noise_sigma > 0:
        stream = 1 if modality is Modality.T1 else 2
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, anatomy.index, stream]))
        data = data + rng.normal(0.0, spec.noise_sigma, size=data.shape).astype(np.float32)
    return Volume(data=data.astype(np.float32), spacing=spec.spacing, modality=modality)


def labeled(spec: PhantomSpec, anatomy: Anatomy, modality: Modality, subject_id: str, role: str) -> LabeledVolume:
    return LabeledVolume(
        image=render(spec, anatomy, modality), vs_mask=anatomy.vs_mask, subject_id=subject_id,
        gif_mask=anatomy.gif_mask, koos_grade=anatomy.grade, n_gif_labels=N_GIF_LABELS,
        metadata={'radius_mm': anatomy.radius_mm, 'contact': anatomy.contact, 'anatomy_index': anatomy.index,
                  'role': role},
    )


@dataclass
class Cohort:
    """
    t1 / t2: training subjects per modality. heldout: for every training subject, the rendering of the same
    anatomy in the other modality, keyed by the training subject's id.
    """
    t1: List[LabeledVolume] = field(default_factory=list)
    t2: List[LabeledVolume] = field(default_factory=list)
    heldout: Dict[str, LabeledVolume] = field(default_factory=dict)
    atlas: Dict[Modality, Volume] = field(default_factory=dict)
    spec: Optional[PhantomSpec] = None


def atlas(spec: PhantomSpec, modality: Modality) -> Volume:
    """Noise-free, unshifted phantom with a mid-range tumor."""
    middle = 0.5 * sum(spec.radius_range_mm)
    return render(spec, build_anatomy(spec, ATLAS_INDEX, radius_mm=middle, shift=False), modality, noise=False)


def generate_cohort(spec: PhantomSpec, n: int, paired: bool = False) -> Cohort:
    """
    `n` ceT1 and `n` hrT2 subjects. Paired cohorts render anatomies 0..n-1 in both modalities; unpaired
    cohorts use anatomies 0..n-1 for ceT1 and n..2n-1 for hrT2.
    """
    logger.info(f'generate_cohort(seed={spec.seed}, n={n}, paired={paired})')
    if n < 1:
        raise ArgumentError(f'cohort size must be >= 1, got {n}')
    cohort = Cohort(spec=spec, atlas={m: atlas(spec, m) for m in (Modality.T1, Modality.T2)})
    for i in range(n):
        a1 = build_anatomy(spec, i)
        a2 = a1 if paired else build_anatomy(spec, n + i)
        id1, id2 = f'synth-t1-{i:03d}', f'synth-t2-{i:03d}'
        cohort.t1.append(labeled(spec, a1, Modality.T1, id1, 'train'))
        cohort.t2.append(labeled(spec, a2, Modality.T2, id2, 'train'))
        cohort.heldout[id1] = labeled(spec, a1, Modality.T2, id1, 'heldout')
        cohort.heldout[id2] = labeled(spec, a2, Modality.T1, id2, 'heldout')
    return cohort


def _rows(lv: LabeledVolume, role: str, stem: str) -> Dict:
    return {
        'subject_id': lv.subject_id,
        'modality': lv.modality.value,
        'grade': lv.koos_grade,
        'image': f'{stem}_image.nii.gz',
        'vs_mask': f'{stem}_vs.nii.gz',
        'gif_mask': f'{stem}_gif.nii.gz',
        'role': role,
    }


def _write_case(lv: LabeledVolume, root: Path, row: Dict) -> None:
    save_volume(lv.image, root / row['image'])
    save_volume(lv.image.with_data(lv.vs_mask), root / row['vs_mask'])
    save_volume(lv.image.with_data(lv.gif_mask), root / row['gif_mask'])


def write_cohort(cohort: Cohort, root: Union[str, os.PathLike]) -> Path:
    """Volumes as NIfTI plus `cohort.json` listing {subject_id, modality, grade, image, vs_mask, gif_mask, role}."""
    root = Path(root)
    logger.info(f'write_cohort({root}): {len(cohort.t1)} T1, {len(cohort.t2)} T2')
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    for lv in cohort.t1 + cohort.t2:
        row = _rows(lv, 'train', lv.subject_id)
        _write_case(lv, root, row)
        rows.append(row)
    for subject_id, lv in cohort.heldout.items():
        row = _rows(lv, 'heldout', f'{subject_id}_cross')
        _write_case(lv, root, row)
        rows.append(row)
    atlases = {}
    for modality, volume in cohort.atlas.items():
        atlases[modality.value] = f'atlas_{modality.value.lower()}.nii.gz'
        save_volume(volume, root / atlases[modality.value])
    manifest = {'spec': asdict(cohort.spec) if cohort.spec else None, 'atlas': atlases, 'subjects': rows}
    path = root / COHORT_MANIFEST
    tmp = path.with_name(path.name + '.tmp')
    tmp.write_text(json.dumps(manifest, indent=2))
    os.replace(tmp, path)
    return path


def read_cohort(root: Union[str, os.PathLike]) -> Cohort:
    root = Path(root)
    path = root / COHORT_MANIFEST
    logger.info(f'read_cohort({root})')
    try:
        manifest = json.loads(path.read_text())
        rows = manifest['subjects']
    except (OSError, ValueError, KeyError) as e:
        raise VolumeIOError(f'unreadable cohort manifest {path}: {e}') from e
    spec = None
    if manifest.get('spec'):
        spec = PhantomSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in manifest['spec'].items()})
    cohort = Cohort(spec=spec, atlas={Modality(m): load_volume(root / p, Modality(m))
                                      for m, p in manifest.get('atlas', {}).items()})
    for row in rows:
        modality = Modality(row['modality'])
        gif = load_label_grid(root / row['gif_mask']) if row.get('gif_mask') else None
        lv = LabeledVolume(
            image=load_volume(root / row['image'], modality),
            vs_mask=load_label_grid(root / row['vs_mask']),
            subject_id=row['subject_id'], gif_mask=gif, koos_grade=row.get('grade'),
            n_gif_labels=N_GIF_LABELS if gif is not None else None, metadata={'role': row['role']},
        )
        if row['role'] == 'heldout':
            cohort.heldout[lv.subject_id] = lv
        elif modality is Modality.T1:
            cohort.t1.append(lv)
        else:
            cohort.t2.append(lv)
    return cohort
