"""Training loop, checkpointing and evaluation orchestration."""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .config import RunConfig
from .cpre import KeepMode, MixAssignment, MixPolicy, mix_batch
from .data import Dataset, SyntheticConfig, generate_synthetic_dataset, load_directory_dataset, pk_sample
from .errors import CheckpointError, ConfigurationError, DataError, NumericError, TrainingError
from .evaluation import (CLOTH_CHANGING, STANDARD, attention_maps, compute_cmc_map, extract_embeddings,
                         hairstyle_probe, single_shot_report)
from .hsoa import FileAdapter, ProceduralStub, augment_identity
from .losses import (AttentionTarget, LossWeights, attention_loss, cal_loss, id_loss, positive_clothes_mask,
                     total_loss, triplet_loss)
from .masks import derive_masks, dilate_mask, downsample_mask
from .model import Backbone, ModelConfig, MSPNet, normalize_images, to_tensor
from .structures import HairstyleLabel, View

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "msp-reid-checkpoint"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# Data preparation
# ---------------------------------------------------------------------------

def synthetic_config(cfg: RunConfig) -> SyntheticConfig:
    s = cfg.dataset.synthetic
    return SyntheticConfig(
        num_identities=s.num_identities, clothes_per_identity=s.clothes_per_identity,
        hairstyles_per_identity=s.hairstyles_per_identity, images_per_combination=s.images_per_combination,
        image_size=tuple(s.image_size), noise_std=s.noise_std, seed=s.seed, num_cameras=s.num_cameras,
        num_test_identities=s.num_test_identities)


def load_dataset(cfg: RunConfig) -> Dataset:
    if cfg.dataset.source == "synthetic":
        return generate_synthetic_dataset(synthetic_config(cfg))
    return load_directory_dataset(cfg.dataset.path)


def make_synthesizer(cfg: RunConfig):
    if cfg.hsoa.synthesizer == "files":
        return FileAdapter(cfg.hsoa.synth_root, cfg.hsoa.face_tolerance)
    return ProceduralStub()


def augment_dataset(dataset: Dataset, cfg: RunConfig, splits=("train",)):
    """HSOA views for every original sample in ``splits``.

    Returns ``(augmented_samples, report)``; samples without a semantic map
    are skipped and counted in the report.
    """
    synth = make_synthesizer(cfg)
    styles = [HairstyleLabel.parse(s) for s in cfg.hsoa.styles]
    out, report = [], {"skipped_missing_mask": 0, "empty_hair": 0, "failures": []}
    for s in dataset:
        if s.split not in splits or s.view is View.HSOA_AUG:
            continue
        if s.semantic_map is None:
            report["skipped_missing_mask"] += 1
            continue
        masks = derive_masks(s.semantic_map)
        events = []
        aug = augment_identity(s, masks, synth, styles, report=events)
        for e in events:
            if e.get("reason") == "empty_hair":
                report["empty_hair"] += 1
            else:
                report["failures"].append(e)
        if any("empty_hair" in a.flags for a in aug):
            continue
        out.extend(aug)
    return out, report


def cloth_dilation_radius(cfg: RunConfig) -> int:
    """Configured radius, or 2 px per 384 rows of input height."""
    if cfg.cpre.dilation_radius is not None:
        return cfg.cpre.dilation_radius
    return int(round(2 * cfg.model.input_size[0] / 384))


@dataclass
class TrainingSet:
    images: np.ndarray           # (N, H, W, 3) float32 normalized
    identity: np.ndarray         # contiguous train ids
    clothes: np.ndarray          # contiguous train clothes ids
    cloth_dilated: list          # per-sample uint8 mask or None
    cloth_raw: list
    face_ds: np.ndarray          # (N, H', W')
    limbs_ds: np.ndarray
    hair_ds: np.ndarray
    has_mask: np.ndarray
    positive_clothes: dict
    samples: list = field(default_factory=list)


def build_training_set(dataset: Dataset, cfg: RunConfig, feature_size, augmented=()) -> TrainingSet:
    train = [s for s in dataset if s.split == "train"]
    if not cfg.hsoa.enabled:
        train = [s for s in train if s.view is not View.HSOA_AUG]
    train = train + list(augmented)
    if not train:
        raise DataError("dataset has no training samples")
    id_map = {pid: i for i, pid in enumerate(sorted({s.identity for s in train}))}
    cl_map = {c: i for i, c in enumerate(sorted({s.clothes for s in train}))}
    images = normalize_images(np.stack([s.image for s in train]))
    h, w = images.shape[1:3]
    if (h, w) != tuple(cfg.model.input_size):
        raise DataError(f"images are {h}x{w}, model expects {tuple(cfg.model.input_size)}")
    fh, fw = feature_size
    n = len(train)
    face_ds = np.zeros((n, fh, fw))
    limbs_ds = np.zeros((n, fh, fw))
    hair_ds = np.zeros((n, fh, fw))
    has_mask = np.zeros(n, dtype=bool)
    cloth_dilated, cloth_raw = [], []
    cache = {}
    for i, s in enumerate(train):
        if s.semantic_map is None:
            cloth_dilated.append(None)
            cloth_raw.append(None)
            continue
        key = s.source_id or s.sample_id
        if key not in cache:
            m = derive_masks(s.semantic_map)
            cache[key] = (
                dilate_mask(m.cloth, cloth_dilation_radius(cfg)), m.cloth,
                downsample_mask(m.face, (fh, fw)), downsample_mask(m.limbs, (fh, fw)),
                downsample_mask(m.hair, (fh, fw)),
            )
        cd, cr, face_ds[i], limbs_ds[i], hair_ds[i] = cache[key]
        cloth_dilated.append(cd)
        cloth_raw.append(cr)
        has_mask[i] = True
    identity = np.array([id_map[s.identity] for s in train], dtype=np.int64)
    clothes = np.array([cl_map[s.clothes] for s in train], dtype=np.int64)
    positive = {}
    for pid, c in zip(identity, clothes):
        positive.setdefault(int(pid), set()).add(int(c))
    return TrainingSet(images, identity, clothes, cloth_dilated, cloth_raw, face_ds, limbs_ds, hair_ds,
                       has_mask, {k: sorted(v) for k, v in positive.items()}, train)


def build_model(cfg: RunConfig, num_identities: int, num_clothes: int) -> MSPNet:
    torch.manual_seed(cfg.seed)
    mc = ModelConfig(backbone=Backbone(cfg.model.backbone), input_size=tuple(cfg.model.input_size),
                     embed_dim=cfg.model.embed_dim, num_identities=num_identities,
                     num_clothes_classes=num_clothes, rpa_enabled=cfg.model.rpa_enabled,
                     pretrained=cfg.model.pretrained, last_stride=cfg.model.last_stride,
                     gate_scale=cfg.model.gate_scale)
    return MSPNet(mc)


def set_determinism(strict: bool) -> None:
    if strict:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


# ---------------------------------------------------------------------------
# One optimisation step
# ---------------------------------------------------------------------------

def loss_weights(cfg: RunConfig) -> LossWeights:
    l = cfg.loss
    return LossWeights(l.lambda_tri, l.lambda_att, l.lambda_cal, l.lambda_neg, l.epsilon, l.margin)


def batch_losses(model: MSPNet, images: torch.Tensor, ids: torch.Tensor, clothes: torch.Tensor,
                 target: Optional[AttentionTarget], positive_mask: torch.Tensor, weights: LossWeights):
    """Forward one batch and return ``(components, clothes_head_term)``."""
    out = model(images, mode="train")
    comps = {
        "L_id": id_loss(out.id_logits, ids),
        "L_tri": triplet_loss(out.embedding_pre_bn, ids, weights.margin),
    }
    if model.config.rpa_enabled and target is not None:
        comps["L_att"] = attention_loss(out.A_hat, target, weights)
    else:
        comps["L_att"] = images.new_zeros(())
    cal = cal_loss(out.F, model.clothes_head, clothes, ids, positive_mask)
    comps["L_cal"] = cal.adversarial
    return comps, cal.classifier, out


def make_target(ts: TrainingSet, idx, epsilon, dtype=torch.float32) -> AttentionTarget:
    from .losses import attention_target

    t = attention_target(torch.as_tensor(ts.face_ds[idx], dtype=dtype),
                         torch.as_tensor(ts.limbs_ds[idx], dtype=dtype), epsilon,
                         hair_ds=torch.as_tensor(ts.hair_ds[idx], dtype=dtype))
    t.absent |= ~torch.as_tensor(ts.has_mask[idx])
    return t


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path: Path, cfg: RunConfig, model, optimizer, scheduler, epoch: int, extra: dict) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config_hash": cfg.model_hash(),
        "config": cfg.to_dict(),
        "num_identities": model.config.num_identities,
        "num_clothes_classes": model.config.num_clothes_classes,
        "state_dict": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "scheduler": scheduler.state_dict() if scheduler is not None else None,
        "epoch": epoch,
        **extra,
    }
    tmp = path.with_suffix(".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> dict:
    try:
        ckpt = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint {path} not found") from None
    if not isinstance(ckpt, dict) or ckpt.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not an msp-reid checkpoint")
    if ckpt.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {ckpt.get('version')}")
    return ckpt


def model_from_checkpoint(ckpt: dict, cfg: RunConfig) -> MSPNet:
    if ckpt["config_hash"] != cfg.model_hash():
        raise CheckpointError(
            f"checkpoint model config hash {ckpt['config_hash']} does not match the run config "
            f"({cfg.model_hash()}); the model section differs")
    model = build_model(cfg, ckpt["num_identities"], ckpt["num_clothes_classes"])
    model.load_state_dict(ckpt["state_dict"])
    model.eval()
    return model


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def evaluate(model: MSPNet, dataset: Dataset, cfg: RunConfig, with_probe: bool = True) -> dict:
    query, gallery = dataset.subset("query"), dataset.subset("gallery")
    if not len(query) or not len(gallery):
        raise DataError("dataset has no query/gallery split to evaluate on")
    qe = extract_embeddings(model, query.samples, cfg.eval.batch_size, cfg.eval.feature)
    ge = extract_embeddings(model, gallery.samples, cfg.eval.batch_size, cfg.eval.feature)
    reports = {}
    for protocol in (STANDARD, CLOTH_CHANGING):
        if cfg.eval.single_shot_trials > 0:
            rep = single_shot_report(qe, query.samples, ge, gallery.samples, protocol,
                                     cfg.eval.single_shot_trials, cfg.seed)
        else:
            rep = compute_cmc_map(qe, query.samples, ge, gallery.samples, protocol)
        reports[protocol.name] = rep
    if with_probe:
        emb = np.concatenate([qe, ge])
        labels = [s.hairstyle.value for s in query] + [s.hairstyle.value for s in gallery]
        if len(set(labels)) >= 2:
            acc = hairstyle_probe(emb, labels, cfg.seed)
            for rep in reports.values():
                rep.probe_accuracy, rep.probe_target = acc, "hairstyle"
    return reports


def attention_mass(model: MSPNet, samples) -> dict:
    """Mean attention mass on hair cells vs face+limb cells."""
    samples = [s for s in samples if s.semantic_map is not None]
    if not samples:
        return {"hair": float("nan"), "face_limbs": float("nan"), "count": 0}
    maps = attention_maps(model, np.stack([s.image for s in samples]))
    fs = maps.shape[1:]
    hair, pos = [], []
    for a, s in zip(maps, samples):
        m = derive_masks(s.semantic_map)
        hair.append((a * downsample_mask(m.hair, fs)).sum())
        pos.append((a * (downsample_mask(m.face, fs) + downsample_mask(m.limbs, fs))).sum())
    return {"hair": float(np.mean(hair)), "face_limbs": float(np.mean(pos)), "count": len(samples)}


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    out_dir: Path
    model: MSPNet
    final_reports: dict
    best_metric: float
    cpre_stats: dict
    steps: int


def _jsonable(report_dict) -> dict:
    return {name: rep.to_json() for name, rep in report_dict.items()}


def train(cfg: RunConfig, out_dir: str | Path, resume: bool = True, dataset: Optional[Dataset] = None) -> TrainResult:
    out = Path(out_dir)
    for sub in ("checkpoints", "logs", "reports", "dumps"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    set_determinism(cfg.strict)
    dataset = dataset if dataset is not None else load_dataset(cfg)

    augmented = []
    already = any(s.view is View.HSOA_AUG for s in dataset)
    if cfg.hsoa.enabled and not already:
        augmented, aug_report = augment_dataset(dataset, cfg)
        log.info("HSOA produced %d views (%s)", len(augmented), aug_report)
    feature_size = ModelConfig(backbone=Backbone(cfg.model.backbone), input_size=tuple(cfg.model.input_size),
                               last_stride=cfg.model.last_stride).feature_size
    ts = build_training_set(dataset, cfg, feature_size, augmented)
    num_ids = int(ts.identity.max()) + 1
    num_clothes = int(ts.clothes.max()) + 1
    model = build_model(cfg, num_ids, num_clothes)
    weights = loss_weights(cfg)
    pos_mask = positive_clothes_mask(ts.positive_clothes, num_ids, num_clothes)
    optimizer = torch.optim.Adam([p for p in model.parameters() if p.requires_grad],
                                 lr=cfg.optim.lr, weight_decay=cfg.optim.weight_decay)
    scheduler = torch.optim.lr_scheduler.MultiStepLR(optimizer, milestones=cfg.schedule.milestones,
                                                     gamma=cfg.schedule.gamma)
    policy = MixPolicy(MixAssignment(cfg.cpre.mix))
    keep_mode = KeepMode(cfg.cpre.mode)

    last_path = out / "checkpoints" / "last.pt"
    best_path = out / "checkpoints" / "best.pt"
    log_path = out / "logs" / "loss.jsonl"
    start_epoch, step, best = 0, 0, -math.inf
    cpre_stats = {"non_cloth_pixels": 0, "non_cloth_changed": 0, "erased_samples": 0, "raw_samples": 0}
    if resume and last_path.exists():
        ckpt = load_checkpoint(last_path)
        if ckpt["config_hash"] != cfg.model_hash():
            raise CheckpointError("existing checkpoint was written with a different model config")
        model.load_state_dict(ckpt["state_dict"])
        optimizer.load_state_dict(ckpt["optimizer"])
        scheduler.load_state_dict(ckpt["scheduler"])
        start_epoch, step = ckpt["epoch"], ckpt["step"]
        best = ckpt.get("best_metric", -math.inf)
        cpre_stats = ckpt.get("cpre_stats", cpre_stats)
        kept = log_path.read_text().splitlines()[:step] if log_path.exists() else []
        log_path.write_text("".join(line + "\n" for line in kept))
        log.info("resumed from epoch %d (step %d)", start_epoch, step)
    elif log_path.exists():
        log_path.unlink()

    final_reports = {}
    model.train()
    for epoch in range(start_epoch, cfg.schedule.epochs):
        epoch_seq = np.random.SeedSequence(cfg.seed, spawn_key=(epoch,))
        n_batches = cfg.sampler.passes * math.ceil(num_ids / cfg.sampler.P)
        sampler_seq, *batch_seqs = epoch_seq.spawn(1 + n_batches)
        sampler_rng = np.random.default_rng(sampler_seq)
        batches = [b for _ in range(cfg.sampler.passes)
                   for b in pk_sample(ts.identity, cfg.sampler.P, cfg.sampler.K, sampler_rng)]
        records = []
        for b, idx in enumerate(batches):
            idx = np.asarray(idx)
            images = ts.images[idx]
            if cfg.cpre.enabled:
                batch = [ts.samples[i].replace(image=ts.images[i]) for i in idx]
                mixed = mix_batch(batch, (cfg.cpre.keep_min, cfg.cpre.keep_max), policy, batch_seqs[b],
                                  cloth_masks=[ts.cloth_dilated[i] for i in idx], fill=cfg.cpre.fill,
                                  mode=keep_mode)
                images = np.stack([m.image for m in mixed])
                for m, i, img in zip(mixed, idx, images):
                    if m.view is View.ERASED:
                        cpre_stats["erased_samples"] += 1
                        raw = ts.cloth_raw[i]
                        outside = raw == 0
                        changed = np.any(img != ts.images[i], axis=-1)
                        cpre_stats["non_cloth_pixels"] += int(outside.sum())
                        cpre_stats["non_cloth_changed"] += int((changed & outside).sum())
                    else:
                        cpre_stats["raw_samples"] += 1
            x = to_tensor(images)
            ids = torch.as_tensor(ts.identity[idx])
            clothes = torch.as_tensor(ts.clothes[idx])
            target = make_target(ts, idx, weights.epsilon) if model.config.rpa_enabled else None
            comps, head_term, _ = batch_losses(model, x, ids, clothes, target, pos_mask, weights)
            try:
                total = total_loss(comps, weights)
            except NumericError as exc:
                raise TrainingError(f"epoch {epoch} step {step}: {exc}; last good checkpoint kept at {last_path}") from exc
            optimizer.zero_grad(set_to_none=True)
            (total + head_term).backward()
            optimizer.step()
            step += 1
            rec = {"step": step, "epoch": epoch}
            rec.update({k: float(v.detach()) for k, v in comps.items()})
            rec["L_clothes_head"] = float(head_term.detach())
            rec["L_total"] = float(total.detach())
            records.append(json.dumps(rec))
        with log_path.open("a") as fh:
            fh.write("".join(r + "\n" for r in records))
        scheduler.step()

        if (epoch + 1) % cfg.eval.every == 0 or epoch + 1 == cfg.schedule.epochs:
            try:
                final_reports = evaluate(model, dataset, cfg)
            except DataError:
                final_reports = {}
            model.train()
            if final_reports:
                report_json = _jsonable(final_reports)
                (out / "reports" / f"epoch_{epoch + 1:03d}.json").write_text(json.dumps(report_json, indent=2))
                metric = final_reports["cloth_changing"].mAP
                if metric > best:
                    best = metric
                    save_checkpoint(best_path, cfg, model, None, None, epoch + 1,
                                    {"step": step, "best_metric": best})
        save_checkpoint(last_path, cfg, model, optimizer, scheduler, epoch + 1,
                        {"step": step, "best_metric": best, "cpre_stats": cpre_stats})

    if final_reports:
        (out / "reports" / "final.json").write_text(json.dumps(_jsonable(final_reports), indent=2))
    (out / "logs" / "cpre_stats.json").write_text(json.dumps(cpre_stats, indent=2))
    model.eval()
    return TrainResult(out, model, final_reports, best, cpre_stats, step)
