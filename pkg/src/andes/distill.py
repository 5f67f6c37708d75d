"""Self-distillation training engine.

A student backbone + projection heads is trained against an EMA teacher:
image-level cross-entropy on class tokens across multi-crop views, plus
patch-level cross-entropy at block-masked positions. Teacher targets are
centered and temperature-sharpened; all schedules are warmup+cosine functions
of training progress.

All stochasticity is keyed by (run seed, absolute step), so resuming from a
checkpoint continues bit-identically.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .augment import AugmentConfig, CropConfig, ViewSet, multi_crop
from .backbone import MultiSpectralViT, PatchMask, ViTConfig, build_backbone, trunc_normal_
from .checkpoint import load_checkpoint, save_checkpoint, tensor_digest
from .data import BandStats
from .errors import NumericalAbort

DINO_WEIGHT = 1.0
IBOT_WEIGHT = 1.0

# Sub-stream tags for deriving independent RNG streams from (seed, tag, ...).
_TAG_INIT = 1
_TAG_BATCH = 2
_TAG_AUG = 3
_TAG_MASK = 4
_TAG_TORCH = 5


def derive_rng(*keys: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(keys))))


def derive_int(*keys: int) -> int:
    return int(np.random.SeedSequence(list(keys)).generate_state(1)[0])


# ---------------------------------------------------------------------------
# Projection heads
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HeadConfig:
    prototypes: int = 256
    bottleneck: int = 64
    hidden: int = 512
    layers: int = 3
    separate_ibot_head: bool = True

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError(f"layers must be >= 1, got {self.layers}")
        if self.prototypes < 2:
            raise ValueError(f"prototypes must be >= 2, got {self.prototypes}")


class ProjectionHead(torch.nn.Module):
    """MLP to a bottleneck, L2-normalized, scored against unit-norm prototypes."""

    def __init__(self, in_dim: int, cfg: HeadConfig):
        super().__init__()
        self.cfg = cfg
        if cfg.layers == 1:
            mlp: list[torch.nn.Module] = [torch.nn.Linear(in_dim, cfg.bottleneck)]
        else:
            mlp = [torch.nn.Linear(in_dim, cfg.hidden), torch.nn.GELU()]
            for _ in range(cfg.layers - 2):
                mlp += [torch.nn.Linear(cfg.hidden, cfg.hidden), torch.nn.GELU()]
            mlp.append(torch.nn.Linear(cfg.hidden, cfg.bottleneck))
        self.mlp = torch.nn.Sequential(*mlp)
        self.prototypes = torch.nn.Linear(cfg.bottleneck, cfg.prototypes, bias=False)

    def init_weights(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        for module in self.modules():
            if isinstance(module, torch.nn.Linear):
                trunc_normal_(module.weight, 0.02, gen)
                if module.bias is not None:
                    torch.nn.init.zeros_(module.bias)

    def bottleneck(self, x: torch.Tensor) -> torch.Tensor:
        z = self.mlp(x)
        return z / z.norm(dim=-1, keepdim=True).clamp_min(1e-6)

    def prototype_logits(self, z: torch.Tensor) -> torch.Tensor:
        w = F.normalize(self.prototypes.weight, dim=-1)
        return F.linear(z, w)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.prototype_logits(self.bottleneck(x))


# ---------------------------------------------------------------------------
# Losses and teacher-side statistics
# ---------------------------------------------------------------------------


def teacher_targets(logits: torch.Tensor, center: torch.Tensor, temp: float) -> torch.Tensor:
    """Centered, sharpened teacher distributions (no gradient)."""
    if temp <= 0:
        raise ValueError(f"teacher temperature must be positive, got {temp}")
    return torch.softmax((logits - center) / temp, dim=-1).detach()


def dino_loss(
    student_logits: torch.Tensor,
    teacher_logits: torch.Tensor,
    center: torch.Tensor,
    student_temp: float,
    teacher_temp: float,
    teacher_probs: torch.Tensor | None = None,
) -> torch.Tensor:
    """Image-level objective: mean cross-entropy over ordered (teacher global,
    student view) pairs with differing indices.

    student_logits: (V, B, K) over all views (globals first);
    teacher_logits: (G, B, K) over global views only.
    """
    if student_temp <= 0:
        raise ValueError(f"student temperature must be positive, got {student_temp}")
    q = teacher_targets(teacher_logits, center, teacher_temp) if teacher_probs is None else teacher_probs
    logp = F.log_softmax(student_logits / student_temp, dim=-1)
    total = student_logits.new_zeros(())
    pairs = 0
    for g in range(q.shape[0]):
        for v in range(logp.shape[0]):
            if v == g:
                continue
            total = total - (q[g] * logp[v]).sum(-1).mean()
            pairs += 1
    return total / pairs


def ibot_loss(
    student_masked_logits: torch.Tensor,
    teacher_masked_logits: torch.Tensor,
    center: torch.Tensor,
    student_temp: float,
    teacher_temp: float,
    teacher_probs: torch.Tensor | None = None,
) -> torch.Tensor:
    """Patch-level objective at masked positions, averaged over all positions.

    Both logit tensors are (M, K), index-aligned. M = 0 contributes 0.
    """
    if student_masked_logits.shape != teacher_masked_logits.shape:
        raise ValueError(
            f"student/teacher masked logits misaligned: "
            f"{tuple(student_masked_logits.shape)} vs {tuple(teacher_masked_logits.shape)}"
        )
    if student_masked_logits.shape[0] == 0:
        return student_masked_logits.new_zeros(())
    if student_temp <= 0:
        raise ValueError(f"student temperature must be positive, got {student_temp}")
    q = teacher_targets(teacher_masked_logits, center, teacher_temp) if teacher_probs is None else teacher_probs
    logp = F.log_softmax(student_masked_logits / student_temp, dim=-1)
    return -(q * logp).sum(-1).mean()


def update_center(center: torch.Tensor, teacher_logits: torch.Tensor, momentum: float) -> torch.Tensor:
    """EMA of batch-mean teacher logits: center <- m*center + (1-m)*mean."""
    if not 0.0 <= momentum < 1.0:
        raise ValueError(f"center momentum must be in [0, 1), got {momentum}")
    batch_mean = teacher_logits.detach().reshape(-1, teacher_logits.shape[-1]).mean(dim=0)
    return momentum * center + (1.0 - momentum) * batch_mean


def sinkhorn_knopp(teacher_logits: torch.Tensor, temp: float, n_iters: int = 3) -> torch.Tensor:
    """Iterative row/column normalization producing per-sample distributions."""
    q = torch.exp(teacher_logits.detach() / temp).t()  # (K, n)
    n = q.shape[1]
    k = q.shape[0]
    q = q / q.sum()
    for _ in range(n_iters):
        q = q / q.sum(dim=1, keepdim=True) / k
        q = q / q.sum(dim=0, keepdim=True) / n
    return (q * n).t()


def koleo_loss(embeddings: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Differential-entropy regularizer: -mean log nearest-neighbor distance
    over L2-normalized embeddings. Penalizes embedding collapse within a batch."""
    if embeddings.shape[0] < 2:
        return embeddings.new_zeros(())
    x = F.normalize(embeddings, dim=-1, eps=eps)
    sim = x @ x.t()
    sim.fill_diagonal_(-2.0)
    nearest = sim.argmax(dim=1)
    dist = (x - x[nearest]).norm(dim=1)
    return -torch.log(dist + eps).mean()


def ema_update(teacher_params, student_params, momentum: float) -> None:
    """teacher <- m*teacher + (1-m)*student, elementwise over the whole tree."""
    if not 0.0 <= momentum <= 1.0:
        raise ValueError(f"momentum must be in [0, 1], got {momentum}")
    teacher_params = list(teacher_params)
    student_params = list(student_params)
    if len(teacher_params) != len(student_params):
        raise ValueError("teacher/student parameter trees differ in length")
    with torch.no_grad():
        for t, s in zip(teacher_params, student_params):
            if t.shape != s.shape:
                raise ValueError(f"shape mismatch {tuple(t.shape)} vs {tuple(s.shape)}")
            if momentum == 1.0:
                continue
            if momentum == 0.0:
                t.copy_(s)
            else:
                # two explicit ops round exactly like the textbook formula
                # m*t + (1-m)*s, unlike the fused add_(alpha=...) kernel
                t.mul_(momentum)
                t.add_((1.0 - momentum) * s)


# ---------------------------------------------------------------------------
# Block masking
# ---------------------------------------------------------------------------


def sample_block_mask(
    grid_h: int,
    grid_w: int,
    ratio_range: tuple[float, float] = (0.1, 0.5),
    p_sample: float = 0.5,
    rng: np.random.Generator | None = None,
) -> PatchMask:
    """Union of random rectangular blocks covering exactly ceil(r*N) patches,
    r ~ U(ratio_range); with probability 1 - p_sample the mask is empty."""
    if grid_h < 2 or grid_w < 2:
        raise ValueError(f"grid must be at least 2x2, got {grid_h}x{grid_w}")
    rng = rng if rng is not None else np.random.default_rng()
    if rng.uniform() >= p_sample:
        return PatchMask.empty(grid_h, grid_w)
    n = grid_h * grid_w
    ratio = rng.uniform(ratio_range[0], ratio_range[1])
    target = math.ceil(ratio * n)
    mask = np.zeros((grid_h, grid_w), dtype=bool)
    covered = 0
    max_area = max(4.0, ratio * n)
    attempts = 0
    while covered < target:
        attempts += 1
        if attempts > 10 * n:
            # Degenerate geometry; finish deterministically in scan order.
            for flat in np.flatnonzero(~mask.reshape(-1)):
                mask.reshape(-1)[flat] = True
                covered += 1
                if covered == target:
                    break
            break
        area = math.exp(rng.uniform(math.log(4.0), math.log(max_area)))
        aspect = math.exp(rng.uniform(math.log(0.3), math.log(1.0 / 0.3)))
        bh = min(grid_h, max(1, int(round(math.sqrt(area * aspect)))))
        bw = min(grid_w, max(1, int(round(math.sqrt(area / aspect)))))
        top = int(rng.integers(0, grid_h - bh + 1))
        left = int(rng.integers(0, grid_w - bw + 1))
        block = np.zeros_like(mask)
        block[top : top + bh, left : left + bw] = True
        new_cells = np.flatnonzero(block.reshape(-1) & ~mask.reshape(-1))
        if covered + new_cells.size > target:
            new_cells = new_cells[: target - covered]
        mask.reshape(-1)[new_cells] = True
        covered += new_cells.size
    return PatchMask(grid_h, grid_w, mask.reshape(-1))


# ---------------------------------------------------------------------------
# Schedules
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Schedule:
    """Linear warmup start -> base over warmup_frac, then cosine base -> final."""

    warmup_frac: float
    start: float
    base: float
    final: float

    def __post_init__(self):
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ValueError(f"warmup_frac must be in [0, 1), got {self.warmup_frac}")

    def __call__(self, t: float) -> float:
        if not 0.0 <= t <= 1.0:
            raise ValueError(f"progress must be in [0, 1], got {t}")
        if t < self.warmup_frac:
            return self.start + (self.base - self.start) * t / self.warmup_frac
        u = (t - self.warmup_frac) / (1.0 - self.warmup_frac)
        if u >= 1.0:
            return self.final  # keep the endpoint exact under float round-off
        return self.base + (self.final - self.base) * (1.0 - math.cos(math.pi * u)) / 2.0


@dataclass(frozen=True)
class ScheduleSet:
    lr: Schedule
    weight_decay: Schedule
    teacher_momentum: Schedule
    teacher_temp: Schedule


@dataclass(frozen=True)
class DistillConfig:
    total_steps: int = 1000
    batch_size: int = 16
    base_lr: float = 2e-4  # reference value at batch 1024; sqrt-scaled by batch
    lr_override: float | None = None
    final_lr: float = 1e-6
    warmup_frac: float = 0.16
    weight_decay: tuple[float, float] = (0.04, 0.4)
    teacher_momentum: tuple[float, float] = (0.992, 1.0)
    teacher_temp: tuple[float, float] = (0.04, 0.07)
    teacher_temp_warmup_frac: float = 0.06
    student_temp: float = 0.1
    center_momentum: float = 0.9
    centering: str = "ema"  # "ema" or "sinkhorn"
    sinkhorn_iters: int = 3
    ibot_p_sample: float = 0.5
    mask_ratio: tuple[float, float] = (0.1, 0.5)
    grad_clip: float = 3.0
    layerwise_decay: float = 0.9
    betas: tuple[float, float] = (0.9, 0.999)
    freeze_proto_steps: int = 0
    # Embedding-spread regularizer on student global class tokens; 0 disables.
    koleo_weight: float = 0.0

    def __post_init__(self):
        if self.centering not in ("ema", "sinkhorn"):
            raise ValueError(f"unknown centering mode {self.centering!r}")

    def effective_lr(self) -> float:
        if self.lr_override is not None:
            return self.lr_override
        return self.base_lr * math.sqrt(self.batch_size / 1024.0)

    def schedules(self) -> ScheduleSet:
        lr = self.effective_lr()
        return ScheduleSet(
            lr=Schedule(self.warmup_frac, 0.0, lr, self.final_lr),
            weight_decay=Schedule(0.0, self.weight_decay[0], self.weight_decay[0], self.weight_decay[1]),
            teacher_momentum=Schedule(0.0, self.teacher_momentum[0], self.teacher_momentum[0], self.teacher_momentum[1]),
            teacher_temp=Schedule(
                self.teacher_temp_warmup_frac,
                self.teacher_temp[0],
                self.teacher_temp[1],
                self.teacher_temp[1],
            ),
        )


@dataclass(frozen=True)
class LossReport:
    dino: float
    ibot: float

    @property
    def total(self) -> float:
        return DINO_WEIGHT * self.dino + IBOT_WEIGHT * self.ibot


# ---------------------------------------------------------------------------
# Trainer
# ---------------------------------------------------------------------------


class DistillTrainer:
    """Owns the student/teacher pair, heads, centers, optimizer, and the clock.

    `tiles` is any indexable of BandImage; batches, augmentations, masks, and
    drop-path draws are all derived from (seed, step), never from shared
    mutable RNG state.
    """

    def __init__(
        self,
        tiles,
        stats: BandStats,
        vit_cfg: ViTConfig,
        head_cfg: HeadConfig,
        crop_cfg: CropConfig,
        distill_cfg: DistillConfig,
        seed: int,
        aug_cfg: AugmentConfig | None = None,
    ):
        crop_cfg.validate_patch_size(vit_cfg.patch_size)
        self.tiles = tiles
        self.stats = stats
        self.vit_cfg = vit_cfg
        self.head_cfg = head_cfg
        self.crop_cfg = crop_cfg
        self.cfg = distill_cfg
        self.aug_cfg = aug_cfg if aug_cfg is not None else AugmentConfig()
        self.seed = seed
        self.step = 0
        self.last_grad_norm = float("nan")
        self.last_koleo = 0.0

        self.student = build_backbone(vit_cfg, derive_int(seed, _TAG_INIT, 0))
        self.dino_head = ProjectionHead(vit_cfg.embed_dim, head_cfg)
        self.dino_head.init_weights(derive_int(seed, _TAG_INIT, 1))
        if head_cfg.separate_ibot_head:
            self.ibot_head = ProjectionHead(vit_cfg.embed_dim, head_cfg)
            self.ibot_head.init_weights(derive_int(seed, _TAG_INIT, 2))
        else:
            self.ibot_head = self.dino_head

        self.teacher = copy.deepcopy(self.student)
        self.teacher_dino_head = copy.deepcopy(self.dino_head)
        self.teacher_ibot_head = (
            self.teacher_dino_head if not head_cfg.separate_ibot_head else copy.deepcopy(self.ibot_head)
        )
        for module in self._teacher_modules():
            module.eval()
            for p in module.parameters():
                p.requires_grad_(False)

        k = head_cfg.prototypes
        self.dino_center = torch.zeros(k)
        self.ibot_center = torch.zeros(k)
        self.schedules = distill_cfg.schedules()
        self.optimizer = self._build_optimizer()

    # -- parameter bookkeeping ------------------------------------------------

    def _student_modules(self):
        mods = [("backbone", self.student), ("dino_head", self.dino_head)]
        if self.head_cfg.separate_ibot_head:
            mods.append(("ibot_head", self.ibot_head))
        return mods

    def _teacher_modules(self):
        mods = [self.teacher, self.teacher_dino_head]
        if self.head_cfg.separate_ibot_head:
            mods.append(self.teacher_ibot_head)
        return mods

    def named_student_params(self):
        for prefix, module in self._student_modules():
            for name, p in module.named_parameters():
                yield f"{prefix}.{name}", p

    def named_teacher_params(self):
        prefixes = ["backbone", "dino_head"] + (["ibot_head"] if self.head_cfg.separate_ibot_head else [])
        for prefix, module in zip(prefixes, self._teacher_modules()):
            for name, p in module.named_parameters():
                yield f"{prefix}.{name}", p

    def _layer_index(self, name: str) -> int:
        """Depth position for layerwise lr decay: embedding 0, block i -> i+1,
        final norm and heads -> depth."""
        depth = self.vit_cfg.depth
        if name.startswith("backbone.blocks."):
            return int(name.split(".")[2]) + 1
        if name.startswith("backbone.norm.") or name.startswith(("dino_head.", "ibot_head.")):
            return depth
        return 0

    @staticmethod
    def _uses_weight_decay(name: str, p: torch.Tensor) -> bool:
        if p.ndim <= 1:
            return False
        return not name.endswith(("cls_token", "mask_token", "pos_embed"))

    def _build_optimizer(self) -> torch.optim.AdamW:
        groups: dict[tuple[float, bool], dict] = {}
        decay = self.cfg.layerwise_decay
        depth = self.vit_cfg.depth
        for name, p in self.named_student_params():
            scale = decay ** (depth - self._layer_index(name))
            wd = self._uses_weight_decay(name, p)
            key = (scale, wd)
            if key not in groups:
                groups[key] = {"params": [], "lr": 0.0, "weight_decay": 0.0, "lr_scale": scale, "use_wd": wd}
            groups[key]["params"].append(p)
        ordered = [groups[k] for k in sorted(groups, key=lambda k: (k[0], k[1]))]
        return torch.optim.AdamW(ordered, lr=0.0, betas=self.cfg.betas)

    # -- data plumbing ---------------------------------------------------------

    def batch_indices(self, step: int) -> np.ndarray:
        rng = derive_rng(self.seed, _TAG_BATCH, step)
        n = len(self.tiles)
        replace = n < self.cfg.batch_size
        return rng.choice(n, size=self.cfg.batch_size, replace=replace)

    def build_batch(self, step: int) -> list[ViewSet]:
        views = []
        for slot, idx in enumerate(self.batch_indices(step)):
            rng = derive_rng(self.seed, _TAG_AUG, step, slot)
            views.append(multi_crop(self.tiles[int(idx)], self.crop_cfg, self.stats, rng, self.aug_cfg))
        return views

    # -- the step ---------------------------------------------------------------

    def train_step(self, batch: list[ViewSet]) -> LossReport:
        if not batch:
            raise ValueError("batch must be non-empty")
        cfg = self.cfg
        t = self.step / max(cfg.total_steps, 1)
        t = min(t, 1.0)
        lr_t = self.schedules.lr(t)
        wd_t = self.schedules.weight_decay(t)
        momentum_t = self.schedules.teacher_momentum(t)
        teacher_temp_t = self.schedules.teacher_temp(t)

        torch.manual_seed(derive_int(self.seed, _TAG_TORCH, self.step))
        self.student.train()
        self.dino_head.train()
        self.ibot_head.train()

        b = len(batch)
        n_local = len(batch[0].local_views)
        g_tensor = torch.from_numpy(
            np.stack([vs.global_views[g].tensor for g in range(2) for vs in batch])
        )
        grid = self.student.grid_for(self.crop_cfg.global_size)
        masks = np.stack(
            [
                sample_block_mask(
                    grid,
                    grid,
                    cfg.mask_ratio,
                    cfg.ibot_p_sample,
                    derive_rng(self.seed, _TAG_MASK, self.step, j),
                ).mask
                for j in range(2 * b)
            ]
        )
        mask_tensor = torch.from_numpy(masks)

        with torch.no_grad():
            t_out = self.teacher(g_tensor)
            t_dino_logits = self.teacher_dino_head(t_out.class_token).reshape(2, b, -1)
            t_patch_sel = t_out.patch_tokens[mask_tensor]
            t_ibot_logits = self.teacher_ibot_head(t_patch_sel) if t_patch_sel.shape[0] else t_patch_sel

        s_gout = self.student(g_tensor, mask=mask_tensor)
        student_class = [s_gout.class_token.reshape(2, b, -1)]
        if n_local:
            l_tensor = torch.from_numpy(
                np.stack([vs.local_views[i].tensor for i in range(n_local) for vs in batch])
            )
            s_lout = self.student(l_tensor)
            student_class.append(s_lout.class_token.reshape(n_local, b, -1))
        s_dino_logits = self.dino_head(torch.cat([c.reshape(-1, c.shape[-1]) for c in student_class]))
        s_dino_logits = s_dino_logits.reshape(2 + n_local, b, -1)

        s_patch_sel = s_gout.patch_tokens[mask_tensor]
        s_ibot_logits = self.ibot_head(s_patch_sel) if s_patch_sel.shape[0] else s_patch_sel

        if cfg.centering == "sinkhorn":
            q_dino = sinkhorn_knopp(t_dino_logits.reshape(2 * b, -1), teacher_temp_t, cfg.sinkhorn_iters)
            q_dino = q_dino.reshape(2, b, -1)
            q_ibot = (
                sinkhorn_knopp(t_ibot_logits, teacher_temp_t, cfg.sinkhorn_iters)
                if t_ibot_logits.shape[0]
                else None
            )
        else:
            q_dino = q_ibot = None

        loss_dino = dino_loss(
            s_dino_logits, t_dino_logits, self.dino_center, cfg.student_temp, teacher_temp_t, q_dino
        )
        if s_ibot_logits.shape[0]:
            loss_ibot = ibot_loss(
                s_ibot_logits, t_ibot_logits, self.ibot_center, cfg.student_temp, teacher_temp_t, q_ibot
            )
        else:
            loss_ibot = s_dino_logits.new_zeros(())
        total = DINO_WEIGHT * loss_dino + IBOT_WEIGHT * loss_ibot
        if cfg.koleo_weight > 0.0:
            # spread regularizer per global view on the student class tokens
            s_cls = s_gout.class_token.reshape(2, b, -1)
            loss_koleo = (koleo_loss(s_cls[0]) + koleo_loss(s_cls[1])) / 2.0
            total = total + cfg.koleo_weight * loss_koleo
            self.last_koleo = float(loss_koleo.detach())
        else:
            self.last_koleo = 0.0
        report = LossReport(dino=float(loss_dino.detach()), ibot=float(loss_ibot.detach()))
        if not (math.isfinite(report.total) and math.isfinite(float(total.detach()))):
            raise NumericalAbort(f"non-finite loss at step {self.step}", step=self.step, report=report)

        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        if self.step < cfg.freeze_proto_steps:
            # A None grad makes AdamW skip the prototypes entirely, weight decay included.
            for head in {id(self.dino_head): self.dino_head, id(self.ibot_head): self.ibot_head}.values():
                head.prototypes.weight.grad = None
        params = [p for _, p in self.named_student_params()]
        self.last_grad_norm = float(torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip))
        for group in self.optimizer.param_groups:
            group["lr"] = lr_t * group["lr_scale"]
            group["weight_decay"] = wd_t if group["use_wd"] else 0.0
        self.optimizer.step()

        ema_update(
            (p for _, p in self.named_teacher_params()),
            (p for _, p in self.named_student_params()),
            momentum_t,
        )

        if cfg.centering == "ema":
            self.dino_center = update_center(self.dino_center, t_dino_logits, cfg.center_momentum)
            if t_ibot_logits.shape[0]:
                self.ibot_center = update_center(self.ibot_center, t_ibot_logits, cfg.center_momentum)
        self.step += 1
        return report

    def run(self, steps: int, log_fn=None, checkpoint_every: int = 0, checkpoint_dir: Path | None = None):
        """Advance `steps` training steps, optionally logging and checkpointing."""
        reports = []
        for _ in range(steps):
            t = min(self.step / max(self.cfg.total_steps, 1), 1.0)
            report = self.train_step(self.build_batch(self.step))
            reports.append(report)
            if log_fn is not None:
                log_fn(
                    {
                        "step": self.step,
                        "lr": self.schedules.lr(t),
                        "wd": self.schedules.weight_decay(t),
                        "momentum": self.schedules.teacher_momentum(t),
                        "teacher_temp": self.schedules.teacher_temp(t),
                        "dino": report.dino,
                        "ibot": report.ibot,
                        "total": report.total,
                        "grad_norm": self.last_grad_norm,
                    }
                )
            if checkpoint_every and checkpoint_dir is not None and self.step % checkpoint_every == 0:
                self.save(Path(checkpoint_dir) / f"step_{self.step:07d}.ckpt")
        return reports

    # -- persistence -------------------------------------------------------------

    def state_tensors(self) -> dict[str, np.ndarray]:
        tensors: dict[str, np.ndarray] = {}
        for name, p in self.named_student_params():
            tensors[f"student.{name}"] = p.detach().numpy()
        for name, p in self.named_teacher_params():
            tensors[f"teacher.{name}"] = p.detach().numpy()
        tensors["center.dino"] = self.dino_center.numpy()
        tensors["center.ibot"] = self.ibot_center.numpy()
        for name, p in self.named_student_params():
            state = self.optimizer.state.get(p)
            if state:
                tensors[f"opt.{name}.exp_avg"] = state["exp_avg"].numpy()
                tensors[f"opt.{name}.exp_avg_sq"] = state["exp_avg_sq"].numpy()
                tensors[f"opt.{name}.step"] = np.asarray(float(state["step"]), dtype=np.float32)
        return tensors

    def config_dict(self) -> dict:
        return {
            "step": self.step,
            "seed": self.seed,
            "vit": asdict(self.vit_cfg),
            "head": asdict(self.head_cfg),
            "crop": asdict(self.crop_cfg),
            "aug": asdict(self.aug_cfg),
            "distill": asdict(self.cfg),
            "stats": {"mean": self.stats.mean.tolist(), "std": self.stats.std.tolist()},
        }

    def save(self, path: Path | str) -> None:
        save_checkpoint(path, self.config_dict(), self.state_tensors())

    def load_state(self, path: Path | str) -> None:
        """Restore parameters, centers, optimizer moments, and the step clock."""
        config, tensors = load_checkpoint(path)
        self.step = int(config["step"])
        with torch.no_grad():
            for name, p in self.named_student_params():
                p.copy_(torch.from_numpy(tensors[f"student.{name}"]))
            for name, p in self.named_teacher_params():
                p.copy_(torch.from_numpy(tensors[f"teacher.{name}"]))
        self.dino_center = torch.from_numpy(tensors["center.dino"].copy())
        self.ibot_center = torch.from_numpy(tensors["center.ibot"].copy())
        for name, p in self.named_student_params():
            key = f"opt.{name}.exp_avg"
            if key in tensors:
                self.optimizer.state[p] = {
                    "step": torch.tensor(float(tensors[f"opt.{name}.step"].reshape(-1)[0])),
                    "exp_avg": torch.from_numpy(tensors[f"opt.{name}.exp_avg"].copy()),
                    "exp_avg_sq": torch.from_numpy(tensors[f"opt.{name}.exp_avg_sq"].copy()),
                }

    def student_digest(self) -> str:
        return tensor_digest({n: p.detach().numpy() for n, p in self.named_student_params()})
