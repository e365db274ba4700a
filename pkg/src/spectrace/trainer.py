"""Self-supervised contrastive training.

A batch is B pairs of patches; both elements of a pair come from one image
and the B images are pairwise distinct. Each anchor (a pair's first element)
is softmax-classified over the B second elements by temperature-scaled
cosine similarity, and the loss sums -log of the matching-pair probability
over anchors. Optimization is Adam under a linear-warmup / cosine-annealed
learning rate.
"""

from __future__ import annotations

import copy
import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .encoder import Embedding, ModelState, prepare_inputs, save_model
from .errors import DataError, DegenerateEmbeddingError, NumericalError
from .imagedata import DatasetManifest, Patch, load_image, sample_training_patches


@dataclass
class TrainConfig:
    batch_pairs: int = 256
    temperature: float = 0.9
    peak_lr: float = 1e-3
    final_lr: float = 1e-5
    warmup_steps: int = 500
    total_steps: int = 20000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    seed: int = 0
    symmetric_loss: bool = False
    patches_per_image: int = 100
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.batch_pairs < 2:
            raise ValueError("batch_pairs must be >= 2 for a non-degenerate loss")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not 0 < self.final_lr <= self.peak_lr:
            raise ValueError("need 0 < final_lr <= peak_lr")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError("need 0 <= warmup_steps < total_steps")


@dataclass
class PairBatch:
    """B patch pairs; first[i] and second[i] share the image image_ids[i]."""

    first: list[Patch]
    second: list[Patch]
    image_ids: list[str]

    def __post_init__(self):
        if not (len(self.first) == len(self.second) == len(self.image_ids)):
            raise ValueError("pair batch fields must have equal length")
        if len(set(self.image_ids)) != len(self.image_ids):
            raise ValueError("image ids within a batch must be pairwise distinct")
        for a, b, img in zip(self.first, self.second, self.image_ids):
            if a.source_id != img or b.source_id != img:
                raise ValueError(f"pair for image {img!r} contains foreign patches")

    @property
    def size(self) -> int:
        return len(self.image_ids)


@dataclass
class StepRecord:
    step: int
    lr: float
    loss: float
    intra_sim: float
    inter_sim: float


@dataclass
class TrainLog:
    records: list[StepRecord] = field(default_factory=list)

    def write_csv(self, path: Path | str) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "lr", "loss", "intra_sim", "inter_sim"])
            for r in self.records:
                writer.writerow([r.step, f"{r.lr:.8g}", f"{r.loss:.8g}", f"{r.intra_sim:.8g}", f"{r.inter_sim:.8g}"])


# ---------------------------------------------------------------------------
# Patch pools and pair batches
# ---------------------------------------------------------------------------


@dataclass
class PatchPool:
    """Pre-cropped training patches keyed by image id."""

    patches: dict[str, list[Patch]]
    image_ids: list[str] = field(init=False)

    def __post_init__(self):
        self.image_ids = sorted(self.patches.keys())

    def __len__(self) -> int:
        return len(self.image_ids)


def build_patch_pool(
    manifest: DatasetManifest,
    per_image: int,
    size: tuple[int, int],
    seed: int,
) -> PatchPool:
    """Pre-crop `per_image` random patches from every manifest image."""
    if per_image < 2:
        raise ValueError("per_image must be >= 2 so a pair can be drawn")
    children = np.random.SeedSequence(seed).spawn(len(manifest.entries))
    pool: dict[str, list[Patch]] = {}
    for entry, child in zip(manifest.entries, children):
        image = load_image(entry.path, entry.image_id)
        pool[entry.image_id] = sample_training_patches(image, per_image, size, child)
    return PatchPool(pool)


def build_pair_batch(
    pool: PatchPool, batch_pairs: int, seed: int | Sequence[int]
) -> PairBatch:
    """Sample B distinct images and two distinct pre-cropped patches from each."""
    if len(pool) < batch_pairs:
        raise DataError(
            f"need at least {batch_pairs} images for a pair batch, pool has {len(pool)}"
        )
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(pool), size=batch_pairs, replace=False)
    first, second, ids = [], [], []
    for idx in chosen:
        image_id = pool.image_ids[int(idx)]
        candidates = pool.patches[image_id]
        if len(candidates) < 2:
            raise DataError(f"image {image_id!r} has fewer than 2 pre-cropped patches")
        i, j = rng.choice(len(candidates), size=2, replace=False)
        first.append(candidates[int(i)])
        second.append(candidates[int(j)])
        ids.append(image_id)
    return PairBatch(first, second, ids)


# ---------------------------------------------------------------------------
# Similarity and loss
# ---------------------------------------------------------------------------


def cosine_similarity(a: Embedding | np.ndarray, b: Embedding | np.ndarray) -> float:
    """Cosine of two embedding vectors; errors on a zero-norm input."""
    va = np.asarray(a.values if isinstance(a, Embedding) else a, dtype=np.float64)
    vb = np.asarray(b.values if isinstance(b, Embedding) else b, dtype=np.float64)
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    if na == 0.0 or nb == 0.0:
        raise DegenerateEmbeddingError("cosine similarity of a zero-norm embedding")
    return float(np.clip(np.dot(va, vb) / (na * nb), -1.0, 1.0))


def _as_tensor(z) -> torch.Tensor:
    if isinstance(z, torch.Tensor):
        return z
    return torch.as_tensor(np.asarray(z))


def _cosine_matrix(z_first: torch.Tensor, z_second: torch.Tensor) -> torch.Tensor:
    n1 = torch.linalg.vector_norm(z_first, dim=1, keepdim=True)
    n2 = torch.linalg.vector_norm(z_second, dim=1, keepdim=True)
    if (n1 == 0).any() or (n2 == 0).any():
        raise DegenerateEmbeddingError("zero-norm embedding in similarity matrix")
    return (z_first / n1) @ (z_second / n2).T


def contrastive_loss(
    z_first, z_second, temperature: float, symmetric: bool = False
) -> tuple[torch.Tensor, torch.Tensor]:
    """Pairwise softmax loss over a pair batch.

    Returns (loss, phi) where phi[k, k'] is the probability that anchor k
    matches second element k' under temperature-scaled cosine similarity,
    and loss = -sum_k log phi[k, k]. With symmetric=True the transposed
    direction (anchors in z_second) is averaged in.
    """
    zf, zs = _as_tensor(z_first), _as_tensor(z_second)
    if zf.shape != zs.shape or zf.ndim != 2:
        raise ValueError(f"embedding batches must share shape (B, D), got {tuple(zf.shape)} and {tuple(zs.shape)}")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if not (torch.isfinite(zf).all() and torch.isfinite(zs).all()):
        raise NumericalError("non-finite embedding values in loss")
    sim = _cosine_matrix(zf, zs)
    phi = torch.softmax(sim / temperature, dim=1)
    loss = -torch.log(torch.diagonal(phi)).sum()
    if symmetric:
        phi_t = torch.softmax(sim.T / temperature, dim=1)
        loss = 0.5 * (loss - torch.log(torch.diagonal(phi_t)).sum())
    return loss, phi


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear warmup to peak_lr, then cosine annealing down to final_lr."""
    if step < 0 or step > config.total_steps:
        raise ValueError(f"step {step} outside [0, {config.total_steps}]")
    if config.warmup_steps > 0 and step < config.warmup_steps:
        return config.peak_lr * step / config.warmup_steps
    t = (step - config.warmup_steps) / (config.total_steps - config.warmup_steps)
    return config.final_lr + 0.5 * (config.peak_lr - config.final_lr) * (1.0 + np.cos(np.pi * t))


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------


def make_optimizer(model: ModelState, config: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(
        model.net.parameters(),
        lr=config.peak_lr,
        betas=(config.adam_beta1, config.adam_beta2),
    )


def train_step(
    model: ModelState,
    batch: PairBatch,
    optimizer: torch.optim.Optimizer,
    config: TrainConfig,
    normalization: str = "signed_log",
) -> StepRecord:
    """One Adam update at the scheduled learning rate; mutates model and
    optimizer in place and increments model.training_steps."""
    step = model.training_steps
    lr = lr_at(min(step, config.total_steps), config)
    for group in optimizer.param_groups:
        group["lr"] = lr

    model.net.train()
    inputs = prepare_inputs(model.config, batch.first + batch.second, normalization)
    z = model.net(**inputs)
    z_first, z_second = z[: batch.size], z[batch.size :]
    loss, _ = contrastive_loss(z_first, z_second, config.temperature, config.symmetric_loss)
    if not torch.isfinite(loss):
        raise NumericalError(
            f"non-finite loss at step {step} (lr={lr:.3g}, images={batch.image_ids})"
        )
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    model.training_steps = step + 1

    with torch.no_grad():
        sim = _cosine_matrix(z_first.detach(), z_second.detach())
        b = batch.size
        intra = float(torch.diagonal(sim).mean())
        inter = float((sim.sum() - torch.diagonal(sim).sum()) / (b * b - b))
    return StepRecord(step, lr, float(loss.detach()), intra, inter)


def train(
    model: ModelState,
    pool: PatchPool,
    config: TrainConfig,
    normalization: str = "signed_log",
    checkpoint_dir: Path | str | None = None,
    progress: Callable[[StepRecord], None] | None = None,
) -> TrainLog:
    """Run the training loop from model.training_steps up to total_steps.

    Batches are drawn deterministically from (config.seed, step), so resumed
    runs see the same batch sequence they would have seen uninterrupted.
    """
    if len(pool) < config.batch_pairs:
        raise DataError(
            f"training pool has {len(pool)} images, need >= {config.batch_pairs} per batch"
        )
    optimizer = make_optimizer(model, config)
    log = TrainLog()
    for step in range(model.training_steps, config.total_steps):
        batch = build_pair_batch(pool, config.batch_pairs, seed=[config.seed, step])
        record = train_step(model, batch, optimizer, config, normalization)
        log.records.append(record)
        if progress is not None:
            progress(record)
        if (
            checkpoint_dir is not None
            and config.checkpoint_every > 0
            and model.training_steps % config.checkpoint_every == 0
        ):
            save_model(model, Path(checkpoint_dir) / f"checkpoint_{model.training_steps:07d}.sisl")
    return log


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------


def gradient_check(
    model: ModelState,
    batch: PairBatch,
    temperature: float,
    epsilon: float = 1e-4,
    num_coords: int = 60,
    seed: int = 0,
    normalization: str = "none",
) -> float:
    """Compare backprop gradients of the loss against central finite
    differences on a random subset of parameter coordinates.

    Runs a double-precision copy of the network in evaluation mode so the
    loss is a pure function of the parameters. Returns the max relative
    error using denominator max(|analytic|, |numeric|, 1e-8). Intended for
    small models (<= ~10k parameters).
    """
    net = copy.deepcopy(model.net).double()
    net.eval()
    inputs = {
        k: v.double()
        for k, v in prepare_inputs(model.config, batch.first + batch.second, normalization).items()
    }

    def loss_value() -> torch.Tensor:
        z = net(**inputs)
        loss, _ = contrastive_loss(z[: batch.size], z[batch.size :], temperature)
        return loss

    loss = loss_value()
    loss.backward()
    params = [p for p in net.parameters() if p.requires_grad]
    sizes = [p.numel() for p in params]
    total = sum(sizes)
    rng = np.random.default_rng(seed)
    coords = rng.choice(total, size=min(num_coords, total), replace=False)

    max_rel = 0.0
    offsets = np.cumsum([0] + sizes)
    with torch.no_grad():
        for flat_idx in coords:
            pi = int(np.searchsorted(offsets, flat_idx, side="right") - 1)
            local = int(flat_idx - offsets[pi])
            param = params[pi].view(-1)
            analytic = float(params[pi].grad.view(-1)[local])
            orig = float(param[local])
            param[local] = orig + epsilon
            plus = float(loss_value())
            param[local] = orig - epsilon
            minus = float(loss_value())
            param[local] = orig
            numeric = (plus - minus) / (2.0 * epsilon)
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
            max_rel = max(max_rel, rel)
    return max_rel
