"""Experiment orchestration: staged two-step workflow over a run directory.

Stage 1 trains the unpaired translator on phantom MR/CT pools; stage 2
synthesizes CT volumes from the labeled MR cases (masks carried across) and
trains the 2.5D segmenter on them; stage 3 evaluates Dice on held-out
synthetic folds and on real CT-like phantoms. Every stage reads and writes
only the run directory, so the CLI subcommands and :func:`run_pipeline`
share one code path, and a finished directory regenerates its report
bit-identically.
"""

from __future__ import annotations

import json
import logging
import math
import os
import traceback
import zlib
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, save_config
from .losses import SsimConfig, dice_score
from .metrics import MetricsWriter
from .phantom import ModalityStyle, PhantomSpec, generate_phantom
from .report import compare_runs, emit_report
from .segment import (
    ResUNetConfig,
    build_res_unet,
    load_segmenter,
    predict_mask,
    save_segmenter,
    train_segmenter,
    volume_samples,
)
from .translate import build_translator, cycle_train_step, load_translator, save_translator, synthesize_volume
from .volumes import (
    MaskVolume,
    Volume,
    central_crop,
    normalize,
    read_mask,
    read_volume,
    window_clip,
    write_mask,
    write_volume,
)

logger = logging.getLogger(__name__)

DATA_DIR = "data"
SYNCT_DIR = "synct"
CHECKPOINT_DIR = "checkpoints"
REPORT_DIR = "report"
LOCK_FILE = ".lock"
ERROR_FILE = "error.json"


class PipelineError(RuntimeError):
    """A pipeline stage failed; details were written to ``error.json``."""


def derive_rng(seed: int, *labels) -> np.random.Generator:
    """Independent, named Philox substream of the experiment seed."""
    entropy = [int(seed)] + [zlib.crc32(str(lab).encode()) for lab in labels]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def derive_int(seed: int, *labels) -> int:
    return int(derive_rng(seed, *labels).integers(0, 2**31 - 1))


# ---------------------------------------------------------------------------
# Cross-validation


def kfold_split(case_ids, k: int, strata=None, seed: int = 0):
    """Deterministic stratified k-fold partitions: list of (train, test) id lists.

    ``strata`` maps each case id to a bucket; within each bucket the shuffled
    cases are dealt to folds with a pointer that continues across buckets, so
    fold sizes differ by at most one and each bucket spreads evenly. Buckets
    smaller than k are balanced best-effort with a logged warning.
    """
    case_ids = list(case_ids)
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if len(case_ids) < k:
        raise ValueError(f"need at least k={k} cases, got {len(case_ids)}")
    if len(set(case_ids)) != len(case_ids):
        raise ValueError("case ids must be unique")
    strata = dict(strata) if strata is not None else {c: 0 for c in case_ids}
    missing = [c for c in case_ids if c not in strata]
    if missing:
        raise ValueError(f"strata missing for cases: {missing}")

    rng = derive_rng(seed, "kfold")
    buckets: dict = {}
    for case in sorted(case_ids):
        buckets.setdefault(strata[case], []).append(case)

    folds: list[list] = [[] for _ in range(k)]
    pointer = 0
    for key in sorted(buckets, key=str):
        members = buckets[key]
        if len(members) < k:
            logger.warning(
                "stratum %r has %d cases (< k=%d); balance is best-effort",
                key, len(members), k,
            )
        members = [members[i] for i in rng.permutation(len(members))]
        for case in members:
            folds[pointer].append(case)
            pointer = (pointer + 1) % k
    return [
        (sorted(c for f2, f in enumerate(folds) if f2 != i for c in f), sorted(folds[i]))
        for i in range(k)
    ]


def size_strata(cases: dict[str, MaskVolume]) -> dict[str, int]:
    """Tercile buckets of mask voxel counts, the default stratification key."""
    ids = sorted(cases)
    counts = np.array([cases[c].voxel_count for c in ids])
    order = np.argsort(counts, kind="stable")
    strata = {}
    for rank, idx in enumerate(order):
        strata[ids[idx]] = rank * 3 // len(ids)
    return strata


# ---------------------------------------------------------------------------
# Run directory plumbing


@dataclass
class Case:
    case_id: str
    volume: Volume
    mask: MaskVolume


@contextmanager
def lock_run_dir(run_dir: Path):
    run_dir.mkdir(parents=True, exist_ok=True)
    lock_path = run_dir / LOCK_FILE
    try:
        fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RuntimeError(
            f"run directory {run_dir} is locked by another run "
            f"(remove {lock_path} if that run is dead)"
        ) from None
    try:
        os.close(fd)
        yield
    finally:
        lock_path.unlink(missing_ok=True)


def _write_case(directory: Path, case: Case):
    directory.mkdir(parents=True, exist_ok=True)
    write_volume(case.volume, directory / f"{case.case_id}.img.mv01")
    write_mask(case.mask, directory / f"{case.case_id}.msk.mv01")


def load_cases(directory: Path) -> list[Case]:
    cases = []
    for img in sorted(Path(directory).glob("*.img.mv01")):
        case_id = img.name.removesuffix(".img.mv01")
        volume = read_volume(img)
        mask = read_mask(img.with_name(f"{case_id}.msk.mv01"))
        cases.append(Case(case_id, volume, mask))
    if not cases:
        raise FileNotFoundError(f"no volumes found under {directory}")
    return cases


def preprocess_mr(cfg: ExperimentConfig, v: Volume) -> Volume:
    return normalize(v, cfg.data.mr_norm_lo, cfg.data.mr_norm_hi)


def preprocess_ct(cfg: ExperimentConfig, case: Case) -> Case:
    v, m = case.volume, case.mask
    if cfg.data.ct_crop < 1.0:
        v = central_crop(v, cfg.data.ct_crop)
        m = central_crop(m, cfg.data.ct_crop)
    if cfg.window.enabled:
        v = window_clip(v, cfg.window.lo, cfg.window.hi)
        v = normalize(v, cfg.window.lo, cfg.window.hi)
    else:
        v = normalize(v, -1000.0, 1000.0)
    return Case(case.case_id, v, m)


# ---------------------------------------------------------------------------
# Stages


def stage_phantom(cfg: ExperimentConfig, run_dir: Path):
    """Generate the unpaired MR/CT training pools and the held-out CT cases."""
    run_dir = Path(run_dir)
    data = cfg.data
    pools = [
        ("mr", data.mr_cases, data.mr_seed_start, ModalityStyle.MR_LIKE,
         data.mr_fov, data.mr_noise_sigma),
        ("ct", data.ct_cases, data.ct_seed_start, ModalityStyle.CT_LIKE,
         data.ct_fov, data.ct_noise_sigma),
        ("eval_ct", data.eval_ct_cases, data.eval_seed_start, ModalityStyle.CT_LIKE,
         data.ct_fov, data.ct_noise_sigma),
    ]
    for name, count, seed_start, style, fov, sigma in pools:
        directory = run_dir / DATA_DIR / name
        for i in range(count):
            spec = PhantomSpec(
                seed=seed_start + i,
                dims=data.dims,
                organ_count=data.organ_count,
                organ_radius_range=(data.organ_radius_min, data.organ_radius_max),
                modality_style=style,
                noise_sigma=sigma,
                fov_scale=fov,
            )
            volume, mask = generate_phantom(spec)
            _write_case(directory, Case(f"{name}-{i:03d}", volume, mask))
        logger.info("stage phantom: wrote %d %s cases", count, name)


def stage_train_translate(cfg: ExperimentConfig, run_dir: Path, mode: str | None = None,
                          run_id: str | None = None):
    """Train the unpaired translator on all MR/CT slices; checkpoint at the end."""
    run_dir = Path(run_dir)
    mode = mode or cfg.translate.cycle_mode
    if mode == "both":
        raise ValueError("stage_train_translate needs a concrete mode, not 'both'")
    run_id = run_id or cfg.run_name
    tr = cfg.translate

    mr_cases = load_cases(run_dir / DATA_DIR / "mr")
    ct_cases = load_cases(run_dir / DATA_DIR / "ct")
    mr_slices = np.concatenate([preprocess_mr(cfg, c.volume).data for c in mr_cases])
    ct_slices = np.concatenate([preprocess_ct(cfg, c).volume.data for c in ct_cases])

    state = build_translator(
        tr.generator_config(), tr.discriminator_config(),
        seed=derive_int(cfg.seed, "translator-init"), lr=tr.lr,
    )
    weights = tr.weights(mode)
    ssim_cfg = SsimConfig(window=tr.ssim_window)
    rng = derive_rng(cfg.seed, "translate-batches")

    ckpt_dir = run_dir / CHECKPOINT_DIR
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    with MetricsWriter(run_dir, run_id, "train-translate") as writer:
        for step in range(tr.steps):
            if tr.lr_linear_decay:
                # Constant through the first half, then linear decay to zero.
                frac = max(0.0, (step - tr.steps / 2) / max(1.0, tr.steps / 2))
                state.set_lr(tr.lr * (1.0 - frac))
            batch_mr = mr_slices[rng.integers(0, len(mr_slices), size=tr.batch_size)]
            batch_ct = ct_slices[rng.integers(0, len(ct_slices), size=tr.batch_size)]
            report = cycle_train_step(state, batch_mr, batch_ct, weights, ssim_cfg)
            if (step + 1) % tr.log_every == 0 or step + 1 == tr.steps:
                for name, value in report.as_dict().items():
                    writer.write(name, value, step=report.step)
    save_translator(state, ckpt_dir / "translator.ckpt")
    logger.info("stage train-translate: %d steps (%s cycle) done", tr.steps, mode)


def stage_synthesize(cfg: ExperimentConfig, run_dir: Path):
    """Translate every labeled MR case to a synthetic CT; masks carry over."""
    run_dir = Path(run_dir)
    state = load_translator(run_dir / CHECKPOINT_DIR / "translator.ckpt",
                            gcfg=cfg.translate.generator_config(),
                            dcfg=cfg.translate.discriminator_config())
    out_dir = run_dir / SYNCT_DIR
    for case in load_cases(run_dir / DATA_DIR / "mr"):
        mr = preprocess_mr(cfg, case.volume)
        synct, mask = synthesize_volume(state, mr, case.mask)
        _write_case(out_dir, Case(case.case_id.replace("mr-", "synct-"), synct, mask))
    logger.info("stage synthesize: wrote synthetic CT volumes")


def _segmentation_folds(cfg: ExperimentConfig, cases: list[Case]):
    strata = size_strata({c.case_id: c.mask for c in cases})
    return kfold_split([c.case_id for c in cases], cfg.evaluation.folds, strata,
                       seed=derive_int(cfg.seed, "folds"))


def _train_one_segmenter(cfg: ExperimentConfig, cases: list[Case], fold: int,
                         label: str, run_dir: Path, run_id: str, context: int,
                         steps: int):
    """Train a segmenter on one fold's training cases; returns the checkpoint path."""
    folds = _segmentation_folds(cfg, cases)
    train_ids, test_ids = folds[fold]
    val_ids = set(folds[(fold + 1) % len(folds)][1]) & set(train_ids)
    by_id = {c.case_id: c for c in cases}

    train_samples, val_samples = [], []
    for cid in train_ids:
        case = by_id[cid]
        samples = volume_samples(case.volume, case.mask, context, source_id=cid)
        (val_samples if cid in val_ids else train_samples).extend(samples)

    seg = cfg.seg
    net = build_res_unet(
        ResUNetConfig(depth=seg.depth, base_channels=seg.base_channels,
                      in_channels=1 + 2 * context),
        seed=derive_int(cfg.seed, "segmenter-init", label, fold),
    )
    policy = cfg.augment.policy(seed=cfg.seed) if (cfg.augment.enabled and seg.augment) else None
    steps_per_epoch = math.ceil(len(train_samples) / seg.batch_size)
    epochs = math.ceil(steps / steps_per_epoch)
    _, history = train_segmenter(
        net, train_samples, epochs=epochs, lr=seg.lr, policy=policy,
        val_samples=val_samples, batch_size=seg.batch_size,
        seed=derive_int(cfg.seed, "segmenter-train", label, fold),
        threshold=seg.threshold, max_steps=steps,
    )
    with MetricsWriter(run_dir, run_id, f"train-seg-{label}", fold=fold) as writer:
        for stats in history:
            if (stats.epoch + 1) % cfg.seg.log_every == 0 or stats.epoch + 1 == len(history):
                writer.write("train_loss", stats.train_loss, step=stats.epoch)
                if stats.val_dice is not None:
                    writer.write("val_dice", stats.val_dice, step=stats.epoch)
    path = Path(run_dir) / CHECKPOINT_DIR / f"segmenter-{label}-fold{fold}.ckpt"
    path.parent.mkdir(parents=True, exist_ok=True)
    save_segmenter(net, context, path, meta={"fold": fold, "label": label,
                                             "train_cases": list(train_ids),
                                             "test_cases": list(test_ids)})
    return path


def stage_train_seg(cfg: ExperimentConfig, run_dir: Path, run_id: str | None = None,
                    data_dir: Path | None = None, context: int | None = None):
    """Train segmenters on synthetic CT (and optionally on MR as the upper bound)."""
    run_dir = Path(run_dir)
    data_dir = Path(data_dir) if data_dir else run_dir
    run_id = run_id or cfg.run_name
    context = cfg.seg.context if context is None else context

    synct_cases = load_cases(data_dir / SYNCT_DIR)
    for fold in range(cfg.evaluation.folds_to_run):
        _train_one_segmenter(cfg, synct_cases, fold, "synct", run_dir, run_id,
                             context, cfg.seg.steps)
    if cfg.evaluation.include_mr_baseline:
        mr_cases = [
            Case(c.case_id, preprocess_mr(cfg, c.volume), c.mask)
            for c in load_cases(data_dir / DATA_DIR / "mr")
        ]
        steps = cfg.evaluation.mr_baseline_steps or cfg.seg.steps
        for fold in range(cfg.evaluation.folds_to_run):
            _train_one_segmenter(cfg, mr_cases, fold, "mr", run_dir, run_id,
                                 context, steps)
    logger.info("stage train-seg: trained %d fold(s)", cfg.evaluation.folds_to_run)


def stage_eval(cfg: ExperimentConfig, run_dir: Path, run_id: str | None = None,
               data_dir: Path | None = None):
    """Dice on synthetic test folds, held-out real CT phantoms, and the MR bound."""
    run_dir = Path(run_dir)
    data_dir = Path(data_dir) if data_dir else run_dir
    run_id = run_id or cfg.run_name

    synct_cases = {c.case_id: c for c in load_cases(data_dir / SYNCT_DIR)}
    eval_ct = [preprocess_ct(cfg, c) for c in load_cases(data_dir / DATA_DIR / "eval_ct")]
    mr_cases = {
        c.case_id: Case(c.case_id, preprocess_mr(cfg, c.volume), c.mask)
        for c in load_cases(data_dir / DATA_DIR / "mr")
    }

    with MetricsWriter(run_dir, run_id, "eval") as writer:
        for fold in range(cfg.evaluation.folds_to_run):
            path = run_dir / CHECKPOINT_DIR / f"segmenter-synct-fold{fold}.ckpt"
            net, context, meta = load_segmenter(path)
            for cid in meta["test_cases"]:
                case = synct_cases[cid]
                pred = predict_mask(net, case.volume, context, cfg.seg.threshold)
                writer.write("dice:synct->synct", dice_score(pred, case.mask),
                             case_id=cid, step=fold)
            for case in eval_ct:
                pred = predict_mask(net, case.volume, context, cfg.seg.threshold)
                writer.write("dice:synct->ct", dice_score(pred, case.mask),
                             case_id=case.case_id, step=fold)
            mr_path = run_dir / CHECKPOINT_DIR / f"segmenter-mr-fold{fold}.ckpt"
            if mr_path.exists():
                net, context, meta = load_segmenter(mr_path)
                for cid in meta["test_cases"]:
                    case = mr_cases[cid]
                    pred = predict_mask(net, case.volume, context, cfg.seg.threshold)
                    writer.write("dice:mr->mr", dice_score(pred, case.mask),
                                 case_id=cid, step=fold)
    logger.info("stage eval: metrics written")


# ---------------------------------------------------------------------------
# Orchestration


def _run_stage(name: str, run_dir: Path, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except Exception as exc:
        record = {
            "stage": name,
            "error": type(exc).__name__,
            "message": str(exc),
            "traceback": traceback.format_exc(),
        }
        run_dir.mkdir(parents=True, exist_ok=True)
        with open(Path(run_dir) / ERROR_FILE, "w", encoding="utf-8") as f:
            json.dump(record, f, indent=2)
        raise PipelineError(f"stage {name!r} failed: {exc}") from exc


def _run_single(cfg: ExperimentConfig, run_dir: Path, mode: str, run_id: str):
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    save_config(cfg, run_dir / "config.resolved")
    _run_stage("phantom", run_dir, stage_phantom, cfg, run_dir)
    _run_stage("train-translate", run_dir, stage_train_translate, cfg, run_dir,
               mode=mode, run_id=run_id)
    _run_stage("synthesize", run_dir, stage_synthesize, cfg, run_dir)
    _run_stage("train-seg", run_dir, stage_train_seg, cfg, run_dir, run_id=run_id)
    _run_stage("eval", run_dir, stage_eval, cfg, run_dir, run_id=run_id)
    _run_stage("report", run_dir, emit_report, run_dir)


def run_pipeline(cfg: ExperimentConfig, run_dir) -> Path:
    """Execute all stages under ``run_dir``; with cycle_mode=both, run each mode
    in a subdirectory and emit a comparative report with paired significance."""
    run_dir = Path(run_dir)
    cfg.validate()
    with lock_run_dir(run_dir):
        if cfg.translate.cycle_mode == "both":
            save_config(cfg, run_dir / "config.resolved")
            subruns = []
            for mode in ("ssim", "mse"):
                sub = run_dir / f"mode-{mode}"
                _run_single(cfg, sub, mode, run_id=f"{cfg.run_name}-{mode}")
                subruns.append((mode, sub))
            _run_stage("report", run_dir, compare_runs, run_dir, subruns)
        else:
            _run_single(cfg, run_dir, cfg.translate.cycle_mode, cfg.run_name)
    return run_dir


def context_sweep(cfg: ExperimentConfig, run_dir, contexts) -> Path:
    """Train/evaluate one segmenter per context on identical folds and seeds.

    The translator stage does not depend on the context, so it runs once into
    a shared directory and every context reuses it (the stage-1 cache).
    """
    contexts = sorted(set(int(c) for c in contexts))
    if not contexts or any(c not in (0, 1, 2, 3) for c in contexts):
        raise ValueError(f"contexts must be a non-empty subset of {{0,1,2,3}}, got {contexts}")
    if cfg.translate.cycle_mode == "both":
        raise ValueError("context_sweep needs a concrete cycle mode, not 'both'")
    run_dir = Path(run_dir)
    cfg.validate()
    with lock_run_dir(run_dir):
        save_config(cfg, run_dir / "config.resolved")
        shared = run_dir / "stage1"
        shared.mkdir(parents=True, exist_ok=True)
        _run_stage("phantom", run_dir, stage_phantom, cfg, shared)
        _run_stage("train-translate", run_dir, stage_train_translate, cfg, shared,
                   mode=cfg.translate.cycle_mode, run_id=f"{cfg.run_name}-stage1")
        _run_stage("synthesize", run_dir, stage_synthesize, cfg, shared)
        subruns = []
        for c in contexts:
            sub = run_dir / f"context-{c}"
            sub.mkdir(parents=True, exist_ok=True)
            run_id = f"{cfg.run_name}-ctx{c}"
            _run_stage("train-seg", run_dir, stage_train_seg, cfg, sub, run_id=run_id,
                       data_dir=shared, context=c)
            _run_stage("eval", run_dir, stage_eval, cfg, sub, run_id=run_id,
                       data_dir=shared)
            _run_stage("report", run_dir, emit_report, sub)
            subruns.append((f"context-{c}", sub))
        _run_stage("report", run_dir, compare_runs, run_dir, subruns)
    return run_dir
