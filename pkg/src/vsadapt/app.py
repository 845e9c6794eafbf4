"""
Command line entry point `vsadapt`: one subcommand per pipeline stage.

    synth -> prep -> train-da -> translate -> train-seg -> infer-seg -> pretrain-koos -> finetune-koos
          -> predict-koos -> evaluate -> report

Each stage reads the outputs of earlier stages from the configured directories, writes only its own
directory and leaves a run.json manifest there. Exit codes: 0 success, 1 pipeline error, 2 usage or
configuration error.
"""
import argparse
import json
import logging
import subprocess
import sys
import time
import traceback
from dataclasses import replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch

from vsadapt import contrastive, evalmetrics, koosnet, msfnet, preprocess, segharness, synthgen
from vsadapt.config import PipelineConfig, apply_ablations, load_config
from vsadapt.errors import (
    EXIT_DOMAIN_ERROR, EXIT_OK, EXIT_USAGE_ERROR, ArgumentError, ArtifactMissingError, ConfigError, VsAdaptError,
)
from vsadapt.features import build_feature_extractor
from vsadapt.volume import LabeledVolume, Modality, Volume, extract_slabs, load_label_grid, resample, save_volume

logger = logging.getLogger("vsadapt.app")

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


class Workspace:
    """Stage directories of one configured run."""

    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        paths = cfg.paths
        self.raw = paths.resolve("raw")
        self.prep = paths.resolve("prep")
        self.fake = paths.resolve("fake")
        self.models = paths.resolve("models")
        self.preds = paths.resolve("preds")
        self.reports = paths.resolve("reports")
        self.cache = paths.resolve("cache")

    @property
    def msfnet_checkpoint(self) -> Path:
        return self.models / "msfnet" / "msfnet.pt"

    @property
    def seg_checkpoint(self) -> Path:
        return self.models / "seg" / "seg.pt"

    @property
    def pretrain_checkpoint(self) -> Path:
        return self.models / "koos-pretrain" / "koos-pretrain.pt"

    @property
    def koos_checkpoint(self) -> Path:
        return self.models / "koos" / "koos.pt"

    @property
    def seg_preds(self) -> Path:
        return self.preds / "seg"

    @property
    def koos_preds(self) -> Path:
        return self.preds / "koos" / "predictions.csv"


def require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise ArtifactMissingError(str(path), producer)
    return path


def git_describe() -> Optional[str]:
    try:
        result = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
                                timeout=10, check=False)
    except (OSError, subprocess.SubprocessError):
        return None
    return result.stdout.strip() or None


def write_run_manifest(out_dir: Path, stage: str, cfg: PipelineConfig, started: float) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "stage": stage,
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "stage_seed": cfg.stage_seed(stage),
        "ablations": list(cfg.ablations),
        "git_describe": git_describe(),
        "wall_time_s": round(time.time() - started, 3),
        "config": cfg.to_dict(),
    }
    path = out_dir / "run.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def read_prepared(ws: Workspace) -> synthgen.Cohort:
    require(ws.prep / synthgen.COHORT_MANIFEST, "prep")
    return synthgen.read_cohort(ws.prep)


def read_translated(ws: Workspace) -> synthgen.Cohort:
    require(ws.fake / synthgen.COHORT_MANIFEST, "translate")
    return synthgen.read_cohort(ws.fake)


def load_model(ws: Workspace) -> msfnet.TranslationModel:
    model, _ = msfnet.load_translation_model(require(ws.msfnet_checkpoint, "train-da"))
    return model


def run_synth(cfg: PipelineConfig, ws: Workspace) -> Path:
    cohort = synthgen.generate_cohort(cfg.phantom_spec(), cfg.synth.n_subjects, cfg.synth.paired)
    synthgen.write_cohort(cohort, ws.raw)
    return ws.raw


def _target_atlas(atlas: Volume, target_spacing) -> Volume:
    if np.allclose(atlas.spacing, target_spacing, atol=1e-6):
        return atlas
    return resample(atlas, target_spacing)


def run_prep(cfg: PipelineConfig, ws: Workspace) -> Path:
    """
    Every modality is registered to the atlas rendering of the same modality. Held-out renderings reuse the
    transform of the training case with the same anatomy, so both stay voxel-aligned.
    """
    opts = cfg.preprocess_options()
    require(ws.raw / synthgen.COHORT_MANIFEST, "synth")
    raw = synthgen.read_cohort(ws.raw)
    if not raw.atlas:
        raise ArgumentError(f'{ws.raw} holds no atlas volumes')
    atlases = {m: _target_atlas(a, opts.target_spacing) for m, a in raw.atlas.items()}

    aligned: Dict[str, LabeledVolume] = {}
    for lv in raw.t1 + raw.t2:
        aligned[lv.subject_id] = preprocess.align_case(lv, atlases[lv.modality], opts, atlases[lv.modality])
    heldout: Dict[str, LabeledVolume] = {}
    for subject_id, lv in raw.heldout.items():
        transform = preprocess.AffineTransform.from_dict(aligned[subject_id].metadata['affine'])
        heldout[subject_id] = preprocess.align_case(lv, atlases[lv.modality], opts, atlases[lv.modality],
                                                    transform=transform)

    crop_start = cfg.preprocess.crop_start
    shape = next(iter(atlases.values())).shape
    if crop_start == "auto":
        region = preprocess.covering_region([lv.vs_mask == 1 for lv in aligned.values() if lv.modality is Modality.T1],
                                            margin=cfg.preprocess.crop_margin, size=opts.crop_size)
    elif crop_start == "center":
        region = preprocess.centered_region(shape, opts.crop_size)
    else:
        region = preprocess.CropRegion(tuple(crop_start), opts.crop_size)
    logger.info(f'run_prep: crop region start={region.start} size={region.size}')

    windows = {m: preprocess.intensity_window(a, opts.intensity_percentiles) if opts.rescale else None
               for m, a in atlases.items()}

    def finish(lv: LabeledVolume) -> LabeledVolume:
        return preprocess.finish_case(lv, region, opts, windows[lv.modality])

    prepared = synthgen.Cohort(
        t1=[finish(aligned[lv.subject_id]) for lv in raw.t1],
        t2=[finish(aligned[lv.subject_id]) for lv in raw.t2],
        heldout={k: finish(v) for k, v in heldout.items()},
        atlas={m: preprocess.crop_fixed(a, region) for m, a in atlases.items()},
    )
    synthgen.write_cohort(prepared, ws.prep)
    transforms = {lv.subject_id: lv.metadata for lv in prepared.t1 + prepared.t2}
    (ws.prep / "transforms.json").write_text(json.dumps(transforms, indent=2, default=str))
    return ws.prep


def run_train_da(cfg: PipelineConfig, ws: Workspace) -> Path:
    cohort = read_prepared(ws)
    stride = cfg.translation.slab_stride
    data1 = [s for lv in cohort.t1 for s in extract_slabs(lv, stride)]
    data2 = [s for lv in cohort.t2 for s in extract_slabs(lv.replace(koos_grade=None), stride)]
    t = cfg.translation
    perceptual = None
    if t.lambda_p > 0 and t.variant == "msfnet":
        perceptual = build_feature_extractor(t.perceptual, seed=cfg.stage_seed("train-da"),
                                             weights_path=t.perceptual_weights or None,
                                             weights_url=t.perceptual_url or None,
                                             weights_sha256=t.perceptual_sha256 or None, cache_dir=ws.cache)
    out_dir = ws.msfnet_checkpoint.parent
    msfnet.train_msfnet(data1, data2, cfg.loss_weights(), cfg.translation_options(out_dir), perceptual)
    return out_dir


def _translated(lv: LabeledVolume, model: msfnet.TranslationModel, direction: msfnet.Direction) -> LabeledVolume:
    return lv.replace(image=msfnet.translate(model, lv.image, direction))


def run_translate(cfg: PipelineConfig, ws: Workspace) -> Path:
    """Every real training volume into the other modality, labels copied; MAE against held-out renderings."""
    cohort = read_prepared(ws)
    model = load_model(ws)
    fake_t2 = [_translated(lv, model, msfnet.Direction.T1_TO_T2) for lv in cohort.t1]
    fake_t1 = [_translated(lv, model, msfnet.Direction.T2_TO_T1) for lv in cohort.t2]
    synthgen.write_cohort(synthgen.Cohort(t1=fake_t1, t2=fake_t2), ws.fake)

    rows = []
    for fake in fake_t2 + fake_t1:
        reference = cohort.heldout.get(fake.subject_id)
        if reference is not None:
            mae = float(np.mean(np.abs(np.asarray(fake.image.data) - np.asarray(reference.image.data))))
            rows.append({"subject_id": fake.subject_id, "modality": fake.modality.value, "mae": mae})
    pd.DataFrame(rows, columns=["subject_id", "modality", "mae"]).to_csv(ws.fake / "translation_mae.csv",
                                                                         index=False)
    return ws.fake


def run_train_seg(cfg: PipelineConfig, ws: Workspace) -> Path:
    cohort = read_prepared(ws)
    opts = cfg.seg_options(ws.seg_checkpoint.parent)
    if cfg.segmentation.training_set == "pooled":
        fakes = {lv.subject_id: lv.image for lv in read_translated(ws).t2}
        missing = [lv.subject_id for lv in cohort.t1 if lv.subject_id not in fakes]
        if missing:
            raise ArtifactMissingError(str(ws.fake / f'{missing[0]}_image.nii.gz'), "translate")
        dataset = segharness.build_pooled_set(cohort.t1, [fakes[lv.subject_id] for lv in cohort.t1], opts.seed,
                                               cfg.segmentation.slab_stride)
    else:
        dataset = segharness.build_real_set(cohort.t1, opts.seed, cfg.segmentation.slab_stride)
    segharness.train_seg(dataset, opts)
    return ws.seg_checkpoint.parent


def run_infer_seg(cfg: PipelineConfig, ws: Workspace) -> Path:
    """Segments the real hrT2 volumes, the target domain."""
    cohort = read_prepared(ws)
    model = segharness.load_seg_model(require(ws.seg_checkpoint, "train-seg"))
    for lv in cohort.t2:
        save_volume(segharness.infer_seg(model, lv.image), ws.seg_preds / f'{lv.subject_id}_seg.nii.gz')
    return ws.seg_preds


def _seg_masks(ws: Workspace, subject_ids: Sequence[str]) -> Dict[str, np.ndarray]:
    masks = {}
    for subject_id in subject_ids:
        path = ws.seg_preds / f'{subject_id}_seg.nii.gz'
        if path.exists():
            masks[subject_id] = load_label_grid(path)
    return masks


def _sample(lv: LabeledVolume, mask: np.ndarray, cfg: PipelineConfig, grade: Optional[int]) -> koosnet.SubjectSample:
    return koosnet.subject_sample(lv.image, mask, lv.subject_id, grade, cfg.koos.max_slabs)


def _annotated_pairs(cfg: PipelineConfig, cohort: synthgen.Cohort, fakes: synthgen.Cohort
                     ) -> List[contrastive.PairedSubject]:
    """Real ceT1 with its translated hrT2, sharing the ground-truth mask and grade."""
    fake_t2 = {lv.subject_id: lv for lv in fakes.t2}
    pairs = []
    for lv in cohort.t1:
        fake = require_subject(fake_t2, lv.subject_id, "translate")
        pairs.append(contrastive.PairedSubject(_sample(lv, lv.vs_mask, cfg, lv.koos_grade),
                                               _sample(fake, lv.vs_mask, cfg, lv.koos_grade), lv.koos_grade))
    return pairs


def require_subject(volumes: Dict[str, LabeledVolume], subject_id: str, producer: str) -> LabeledVolume:
    if subject_id not in volumes:
        raise ArtifactMissingError(subject_id, producer)
    return volumes[subject_id]


def _classifier(cfg: PipelineConfig, model: msfnet.TranslationModel) -> koosnet.KoosClassifier:
    torch.manual_seed(cfg.stage_seed("pretrain-koos"))
    return koosnet.KoosClassifier(model.encoder_for(Modality.T1), model.profile.latent_channels,
                                  model.profile.multiple, width=cfg.koos.width, n_blocks=cfg.koos.n_blocks)


def run_pretrain_koos(cfg: PipelineConfig, ws: Workspace) -> Path:
    out_dir = ws.pretrain_checkpoint.parent
    if not cfg.koos.pretrain:
        logger.info('run_pretrain_koos: pretraining disabled, nothing to do')
        out_dir.mkdir(parents=True, exist_ok=True)
        return out_dir
    cohort, fakes = read_prepared(ws), read_translated(ws)
    model = load_model(ws)
    pairs = _annotated_pairs(cfg, cohort, fakes)
    fake_t1 = {lv.subject_id: lv for lv in fakes.t1}
    masks = _seg_masks(ws, [lv.subject_id for lv in cohort.t2])
    for lv in cohort.t2:
        if lv.subject_id not in masks:
            raise ArtifactMissingError(str(ws.seg_preds / f'{lv.subject_id}_seg.nii.gz'), "infer-seg")
        fake = require_subject(fake_t1, lv.subject_id, "translate")
        pairs.append(contrastive.PairedSubject(_sample(fake, masks[lv.subject_id], cfg, None),
                                               _sample(lv, masks[lv.subject_id], cfg, None)))
    contrastive.pretrain(_classifier(cfg, model), pairs, cfg.pretrain_options(out_dir))
    return out_dir


def run_finetune_koos(cfg: PipelineConfig, ws: Workspace) -> Path:
    cohort, fakes = read_prepared(ws), read_translated(ws)
    model = load_model(ws)
    if cfg.koos.pretrain:
        classifier = koosnet.load_classifier(require(ws.pretrain_checkpoint, "pretrain-koos"),
                                             model.encoder_for(Modality.T1))
    else:
        classifier = _classifier(cfg, model)
    samples = [s for pair in _annotated_pairs(cfg, cohort, fakes) for s in (pair.t1, pair.t2)]
    koosnet.finetune(classifier, samples, cfg.finetune_options(ws.koos_checkpoint.parent))
    return ws.koos_checkpoint.parent


def run_predict_koos(cfg: PipelineConfig, ws: Workspace) -> Path:
    cohort = read_prepared(ws)
    model = load_model(ws)
    classifier = koosnet.load_classifier(require(ws.koos_checkpoint, "finetune-koos"), model.encoder_for(Modality.T1))
    volumes = {lv.subject_id: lv.image for lv in cohort.t2}
    masks = _seg_masks(ws, list(volumes))
    if not masks and volumes:
        raise ArtifactMissingError(str(ws.seg_preds), "infer-seg")
    result = koosnet.predict_cohort(classifier, volumes, masks, cfg.koos.max_slabs, out_csv=ws.koos_preds)
    if result.errors:
        (ws.koos_preds.parent / "errors.json").write_text(json.dumps(result.errors, indent=2))
    return ws.koos_preds.parent


def report_name(cfg: PipelineConfig) -> str:
    name = cfg.translation.variant
    if cfg.ablations:
        name += "-no-" + "-".join(cfg.ablations)
    return name


def run_evaluate(cfg: PipelineConfig, ws: Workspace) -> Path:
    cohort = read_prepared(ws)
    truths = {lv.subject_id: lv for lv in cohort.t2}
    preds = _seg_masks(ws, list(truths))
    koos_preds = koosnet.read_predictions(ws.koos_preds) if ws.koos_preds.exists() else None
    koos_truths = {k: v.koos_grade for k, v in truths.items() if v.koos_grade is not None}
    out_dir = ws.reports / report_name(cfg)
    evalmetrics.report(preds, truths, report_name(cfg), koos_preds, koos_truths, out_dir)
    return out_dir


def run_report(cfg: PipelineConfig, ws: Workspace) -> Path:
    paths = sorted(ws.reports.glob("*/report.json"))
    if not paths:
        raise ArtifactMissingError(str(ws.reports / "<name>" / "report.json"), "evaluate")
    evalmetrics.write_table([evalmetrics.MetricReport.from_json(p) for p in paths], ws.reports)
    return ws.reports


HANDLERS: Dict[str, Tuple[Callable[[PipelineConfig, Workspace], Path], str]] = {
    "synth": (run_synth, "generate the synthetic two-modality cohort"),
    "prep": (run_prep, "resample, match, register and crop every case"),
    "train-da": (run_train_da, "train the translation model"),
    "translate": (run_translate, "translate every training volume into the other modality"),
    "train-seg": (run_train_seg, "train the segmentation U-Net on the pooled set"),
    "infer-seg": (run_infer_seg, "segment the target-modality volumes"),
    "pretrain-koos": (run_pretrain_koos, "contrastive pretraining of the Koos encoder"),
    "finetune-koos": (run_finetune_koos, "fine-tune the Koos classifier"),
    "predict-koos": (run_predict_koos, "predict Koos grades of the target-modality subjects"),
    "evaluate": (run_evaluate, "Dice, ASSD and MAMSE report"),
    "report": (run_report, "comparison table over every report"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vsadapt", description=__doc__.strip().splitlines()[0])
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in HANDLERS.items():
        sub = subparsers.add_parser(name, help=help_text, description=help_text)
        sub.add_argument("--config", "-c", default="vsadapt.toml", help="pipeline TOML file")
        sub.add_argument("--workdir", help="base directory for relative paths (overrides paths.root)")
        sub.add_argument("--ablate", default="", help="comma separated: vs, gif, unfreeze, no-pretrain")
        sub.add_argument("--seed", type=int, help="override the configured seed")
        sub.add_argument("--verbose", "-v", action="store_true", help="log at DEBUG level")
    return parser


def resolve_config(args: argparse.Namespace) -> PipelineConfig:
    cfg = load_config(args.config)
    if args.workdir:
        cfg = replace(cfg, paths=replace(cfg.paths, root=args.workdir))
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError(f'seed must be non-negative, got {args.seed}')
        cfg = replace(cfg, seed=args.seed)
    if args.ablate:
        cfg = apply_ablations(cfg, args.ablate.split(","))
    return cfg


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format=LOG_FORMAT, force=True)
    try:
        logger.info(f'main({args.command}, config={args.config})')
        cfg = resolve_config(args)
        handler, _ = HANDLERS[args.command]
        started = time.time()
        out_dir = handler(cfg, Workspace(cfg))
        write_run_manifest(out_dir, args.command, cfg, started)
        logger.info(f'{args.command} finished in {time.time() - started:.1f}s, outputs in {out_dir}')
        return EXIT_OK
    except ConfigError as e:
        logger.error(f'Invalid configuration: {e}')
        return EXIT_USAGE_ERROR
    except ArtifactMissingError as e:
        logger.error(str(e))
        return EXIT_DOMAIN_ERROR
    except VsAdaptError as e:
        logger.error(f'{args.command} failed: {e}')
        logger.debug(traceback.format_exc())
        return EXIT_DOMAIN_ERROR
    except Exception:
        logger.error(f'Unexpected error in {args.command}! ' + traceback.format_exc())
        return EXIT_DOMAIN_ERROR


if __name__ == "__main__":
    sys.exit(main())
