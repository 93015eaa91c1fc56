"""Adversarial training loop over healthy-vertebra canvases.

One discriminator update (maximising the patch objectives) followed by one
generator update (minimising the weighted total) per step; learning rate
holds at lr0 and then decays linearly after the configured epoch. Only
vertebrae whose metadata grade is 0 ever enter the dataset.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .attention import ClassifierBundle, attention_maps_for
from .generator import CoarseInput, GeneratorConfig, GeneratorPair
from .losses import (
    DiscriminatorSet,
    LossWeights,
    adversarial_losses,
    dice_loss,
    edge_loss,
    height_loss,
    l1_loss,
    total_generator_loss,
)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 16
    lr0: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    decay_start: int = 100
    total_epochs: int = 1000
    decay_floor: float = 0.0
    image_size: int = 256
    base_width: int = 32
    d_base_width: int = 32
    h_max_mm: float = 40.0
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    healthy_only: bool = True
    checkpoint_every: int = 50
    val_fraction: float = 0.1

    def validate(self):
        if not self.decay_start < self.total_epochs:
            raise TrainingError("decay_start must be below total_epochs")
        self.weights.validate()

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(
            image_size=self.image_size, base_width=self.base_width, h_max_mm=self.h_max_mm
        )

    def config_hash(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True, default=float)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """lr0 plateau through decay_start, then linear decay (to
    ``decay_floor * lr0`` at total_epochs; zero by default)."""
    if epoch < 0 or epoch > cfg.total_epochs:
        raise TrainingError(f"epoch {epoch} outside [0, {cfg.total_epochs}]")
    if epoch <= cfg.decay_start:
        return cfg.lr0
    t = (epoch - cfg.decay_start) / (cfg.total_epochs - cfg.decay_start)
    return cfg.lr0 * ((1.0 - t) * (1.0 - cfg.decay_floor) + cfg.decay_floor)


@dataclass
class CanvasDataset:
    """Stacked healthy-canvas tensors with precomputed attention maps."""

    masked: np.ndarray       # (N, H, W)
    mask: np.ndarray         # (N, H, W)
    ratio: np.ndarray        # (N,)
    attn_half: np.ndarray    # (N, H/2, W/2)
    attn_full: np.ndarray    # (N, H, W)
    target: np.ndarray       # (N, H, W)
    target_seg: np.ndarray   # (N, H, W)
    ahvs: np.ndarray         # (N, H, W)
    h_real: np.ndarray       # (N,) mm
    slot: tuple              # (start, end), shared by all canvases
    group: np.ndarray        # (N,) vertebra group id, for splits

    def __len__(self):
        return len(self.masked)

    def batch(self, idx) -> dict:
        size = self.masked.shape[-1]
        to_t = lambda a: torch.from_numpy(np.ascontiguousarray(a[idx], dtype=np.float32))
        ratio_plane = torch.from_numpy(
            np.broadcast_to(
                self.ratio[idx, None, None].astype(np.float32), (len(idx), size, size)
            ).copy()
        )[:, None]
        return {
            "masked": to_t(self.masked)[:, None],
            "mask": to_t(self.mask)[:, None],
            "ratio_plane": ratio_plane,
            "attn_half": to_t(self.attn_half)[:, None],
            "attn_full": to_t(self.attn_full)[:, None],
            "target": to_t(self.target)[:, None],
            "target_seg": to_t(self.target_seg)[:, None],
            "ahvs": to_t(self.ahvs)[:, None],
            "h_real": to_t(self.h_real),
        }


def build_canvas_dataset(cases, classifier: ClassifierBundle, image_size: int,
                         healthy_only: bool = True, slice_stride: int = 1) -> CanvasDataset:
    """Assemble the training dataset from preprocessed cases.

    ``cases`` is an iterable of (per_vertebra, meta) pairs as returned by
    :func:`vertsynth.preprocess.preprocess_case`.
    """
    sizes = (image_size // 2, image_size)
    rows = {k: [] for k in ("masked", "mask", "ratio", "target", "target_seg", "ahvs", "h_real", "group")}
    attn_half, attn_full = [], []
    slot = None
    group_id = 0
    for per_vertebra, meta in cases:
        for label, vc in sorted(per_vertebra.items()):
            if healthy_only and vc.grade != 0:
                continue
            for canvas, pair in list(zip(vc.canvases, vc.pairs))[::slice_stride]:
                if slot is None:
                    slot = (canvas.slot_start, canvas.slot_end)
                elif slot != (canvas.slot_start, canvas.slot_end):
                    raise TrainingError("canvases disagree on slot geometry")
                rows["masked"].append(canvas.image)
                rows["mask"].append(canvas.mask)
                rows["ratio"].append(canvas.ratio)
                rows["target"].append(pair.target_image)
                rows["target_seg"].append(pair.target_seg)
                rows["ahvs"].append(pair.ahvs_target)
                rows["h_real"].append(canvas.h_real)
                rows["group"].append(group_id)
            group_id += 1
    if not rows["masked"]:
        raise TrainingError("no healthy training data")

    maps = attention_maps_for(classifier.model, rows["masked"], sizes)
    attn_half = [m.healthy[sizes[0]] for m in maps]
    attn_full = [m.healthy[sizes[1]] for m in maps]
    return CanvasDataset(
        masked=np.stack(rows["masked"]).astype(np.float32),
        mask=np.stack(rows["mask"]).astype(np.float32),
        ratio=np.array(rows["ratio"], dtype=np.float32),
        attn_half=np.stack(attn_half).astype(np.float32),
        attn_full=np.stack(attn_full).astype(np.float32),
        target=np.stack(rows["target"]).astype(np.float32),
        target_seg=np.stack(rows["target_seg"]).astype(np.float32),
        ahvs=np.stack(rows["ahvs"]).astype(np.float32),
        h_real=np.array(rows["h_real"], dtype=np.float32),
        slot=slot,
        group=np.array(rows["group"], dtype=np.int64),
    )


@dataclass
class Models:
    generators: GeneratorPair
    discriminators: DiscriminatorSet

    @classmethod
    def build(cls, cfg: TrainConfig):
        torch.manual_seed(cfg.seed)
        return cls(
            GeneratorPair.build(cfg.generator_config()),
            DiscriminatorSet.build(cfg.d_base_width),
        )


def _splice(masked, mask, generated):
    return masked * (1 - mask) + generated * mask


def train_step(batch: dict, models: Models, opt_g, opt_d, slot, w: LossWeights,
               step_id: int = 0) -> dict:
    """One discriminator update followed by one generator update."""
    gen = models.generators
    inputs = CoarseInput(
        batch["masked"], batch["mask"], batch["ratio_plane"],
        batch["attn_half"], batch["attn_full"],
    )
    coarse_out, fine_out = gen.forward_full(inputs)
    fake = _splice(batch["masked"], batch["mask"], fine_out.refined_ct)

    # discriminator update on detached fakes
    opt_d.zero_grad()
    d_terms = adversarial_losses(
        models.discriminators, batch["target"], fake.detach(),
        batch["target_seg"], fine_out.target_seg.detach(), slot, w,
    )
    (-d_terms.d_total).backward()
    opt_d.step()

    # generator update
    opt_g.zero_grad()
    g_terms = adversarial_losses(
        models.discriminators, batch["target"], fake,
        batch["target_seg"], fine_out.target_seg, slot, w,
    )
    part_l1 = l1_loss(batch["target"], coarse_out.coarse_ct, fine_out.refined_ct, batch["mask"], w)
    part_dice = dice_loss(coarse_out.ahvs_seg, batch["ahvs"], fine_out.target_seg, batch["target_seg"])
    part_edge = edge_loss(batch["target_seg"], fine_out.target_seg)
    part_height = height_loss(batch["h_real"], coarse_out.h_pred, fine_out.h_pred, w)
    total = total_generator_loss(g_terms.g_total, part_dice, part_l1, part_edge, part_height, w)
    total.backward()
    opt_g.step()

    record = {
        "step": step_id,
        "d_total": d_terms.d_total.item(),
        "adv": g_terms.g_total.item(),
        "dice": part_dice.item(),
        "l1": part_l1.item(),
        "edge": part_edge.item(),
        "height": part_height.item(),
        "total": total.item(),
    }
    bad = [k for k, v in record.items() if k != "step" and not np.isfinite(v)]
    if bad:
        raise TrainingError(f"non-finite loss terms {bad} at step {step_id}")
    return record


def validation_rhdr(models: Models, dataset: CanvasDataset, idx) -> float:
    """Slice-level height-difference ratio (%) on held-out canvases."""
    if len(idx) == 0:
        return float("nan")
    gen = models.generators.eval()
    with torch.no_grad():
        batch = dataset.batch(np.asarray(idx))
        inputs = CoarseInput(
            batch["masked"], batch["mask"], batch["ratio_plane"],
            batch["attn_half"], batch["attn_full"],
        )
        _, fine_out = gen.forward_full(inputs)
        h_pred = fine_out.h_pred.numpy()
        h_real = batch["h_real"].numpy()
    gen.train()
    return float(np.mean(np.abs(h_pred - h_real) / np.maximum(h_pred, 1e-6)) * 100.0)


@dataclass
class FitResult:
    models: Models
    records: list
    epoch_means: list        # mean generator total per epoch
    val_history: list        # (epoch, rhdr%)
    best_checkpoint: Path | None
    last_checkpoint: Path | None


def fit(dataset: CanvasDataset, cfg: TrainConfig, out_dir=None) -> FitResult:
    """Train for cfg.total_epochs, checkpointing every ``checkpoint_every``
    epochs plus the best-by-validation-RHDR model."""
    cfg.validate()
    if len(dataset) == 0:
        raise TrainingError("no healthy training data")

    rng = np.random.default_rng(cfg.seed)
    groups = np.unique(dataset.group)
    n_val_groups = max(1, int(round(cfg.val_fraction * len(groups)))) if len(groups) > 1 else 0
    val_groups = set(rng.permutation(groups)[:n_val_groups].tolist())
    train_idx = np.array([i for i in range(len(dataset)) if dataset.group[i] not in val_groups])
    val_idx = np.array([i for i in range(len(dataset)) if dataset.group[i] in val_groups])
    if len(train_idx) == 0:
        raise TrainingError("validation split consumed every canvas")

    models = Models.build(cfg)
    opt_g = torch.optim.Adam(models.generators.parameters(), lr=cfg.lr0,
                             betas=(cfg.beta1, cfg.beta2))
    opt_d = torch.optim.Adam(models.discriminators.parameters(), lr=cfg.lr0,
                             betas=(cfg.beta1, cfg.beta2))

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    records, epoch_means, val_history = [], [], []
    best = (float("inf"), None)
    last_path = None
    step = 0
    for epoch in range(1, cfg.total_epochs + 1):
        lr = lr_schedule(epoch, cfg)
        for opt in (opt_g, opt_d):
            for pg in opt.param_groups:
                pg["lr"] = lr
        order = rng.permutation(train_idx)
        epoch_totals = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            try:
                record = train_step(dataset.batch(idx), models, opt_g, opt_d,
                                    dataset.slot, cfg.weights, step)
            except TrainingError as e:
                raise TrainingError(f"{e}; batch indices {idx.tolist()}") from e
            record["epoch"] = epoch
            record["lr"] = lr
            records.append(record)
            epoch_totals.append(record["total"])
            step += 1
        epoch_means.append(float(np.mean(epoch_totals)))

        if len(val_idx) and (epoch % max(1, cfg.checkpoint_every // 5) == 0 or epoch == cfg.total_epochs):
            rhdr = validation_rhdr(models, dataset, val_idx)
            val_history.append((epoch, rhdr))
            if out_dir is not None and rhdr < best[0]:
                best_path = out_dir / "checkpoint_best.pt"
                save_checkpoint(best_path, models, cfg, epoch, rhdr)
                best = (rhdr, best_path)
        if out_dir is not None and (epoch % cfg.checkpoint_every == 0 or epoch == cfg.total_epochs):
            last_path = out_dir / "checkpoint_last.pt"
            save_checkpoint(last_path, models, cfg, epoch,
                            val_history[-1][1] if val_history else float("nan"))

    if out_dir is not None:
        write_loss_csv(out_dir / "losses.csv", records)
    return FitResult(models, records, epoch_means, val_history, best[1], last_path)


LOSS_CSV_FIELDS = ["step", "epoch", "lr", "d_total", "adv", "dice", "l1", "edge", "height", "total"]


def write_loss_csv(path, records) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOSS_CSV_FIELDS)
        writer.writeheader()
        for rec in records:
            writer.writerow({k: rec.get(k, "") for k in LOSS_CSV_FIELDS})


def save_checkpoint(path, models: Models, cfg: TrainConfig, epoch: int, val_rhdr: float) -> None:
    """Single-archive checkpoint with a manifest; written atomically."""
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(
        {
            "coarse": models.generators.coarse.state_dict(),
            "fine": models.generators.fine.state_dict(),
            "d_global": models.discriminators.d_global.state_dict(),
            "d_local": models.discriminators.d_local.state_dict(),
            "d_seg": models.discriminators.d_seg.state_dict(),
            "config": asdict(cfg),
            "manifest": {
                "epoch": epoch,
                "loss_weights": asdict(cfg.weights),
                "config_hash": cfg.config_hash(),
                "val_rhdr": val_rhdr,
            },
        },
        tmp,
    )
    tmp.replace(path)


def load_checkpoint(path):
    """Returns ``(models, cfg, manifest)`` with everything in eval mode."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing checkpoint: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    cfg_dict = dict(payload["config"])
    cfg_dict["weights"] = LossWeights(**cfg_dict["weights"])
    cfg = TrainConfig(**cfg_dict)
    models = Models.build(cfg)
    models.generators.coarse.load_state_dict(payload["coarse"])
    models.generators.fine.load_state_dict(payload["fine"])
    models.discriminators.d_global.load_state_dict(payload["d_global"])
    models.discriminators.d_local.load_state_dict(payload["d_local"])
    models.discriminators.d_seg.load_state_dict(payload["d_seg"])
    models.generators.eval()
    for d in models.discriminators.modules():
        d.eval()
    return models, cfg, payload["manifest"]
