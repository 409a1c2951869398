"""Two-pass forward pipeline, optimisation loop and checkpoint conversion."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch

from .backbone import BackboneConfig, ToyBackbone, build_backbone
from .cap import PromptBank, PromptEmbeddings, encode_prompt_bank, orthogonality_loss
from .checkpoint import Checkpoint
from .dap import AbnormalityPrior, PriorNetwork, compute_prior, patch_scores, prior_loss, select_top_patches
from .data import DatasetHandle, Sample, resize_sample
from .errors import ConfigError, TrainingError, ValidationError
from .losses import LossBreakdown, global_loss, local_loss, total_loss
from .scoring import ScoreBundle, final_score, image_probability, to_segmentation_map

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 8
    epochs: int = 7
    input_size: tuple[int, int] = (518, 518)
    n_normal_tokens: int = 5  # E
    n_abnormal_tokens: int = 2  # E'
    n_prompts: int = 10  # K
    n_patches: int = 10  # M
    tau: float = 100.0
    gamma: float = 2.0
    alpha: float = 0.5
    sigma: float = 10.0
    seed: int = 0
    init_std: float = 0.02
    use_prior: bool = True
    use_oc: bool = True

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        if len(self.input_size) != 2 or min(self.input_size) <= 0:
            raise ConfigError(f"input_size must be two positive ints, got {self.input_size}")
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")
        for name in ("batch_size", "epochs", "n_normal_tokens", "n_abnormal_tokens", "n_prompts", "n_patches"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.tau <= 0 or self.sigma <= 0 or self.gamma < 0 or not 0 < self.alpha < 1:
            raise ConfigError("tau and sigma must be positive, gamma >= 0, alpha in (0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        return d


@dataclass
class ForwardOutput:
    """Batched model outputs; leading axis is the batch."""

    prompt_free: PromptEmbeddings
    prompt_refined: PromptEmbeddings
    prior: AbnormalityPrior
    patch_normal: torch.Tensor
    patch_abnormal: torch.Tensor
    patch_normal_prior: torch.Tensor
    patch_abnormal_prior: torch.Tensor
    map_normal: torch.Tensor
    map_abnormal: torch.Tensor
    map_normal_prior: torch.Tensor
    map_abnormal_prior: torch.Tensor
    image_probability: torch.Tensor
    score: torch.Tensor

    def bundle(self, i: int) -> ScoreBundle:
        def np_(t):
            return t[i].detach().cpu().numpy().astype(np.float64)

        return ScoreBundle(
            np_(self.patch_normal),
            np_(self.patch_abnormal),
            np_(self.patch_normal_prior),
            np_(self.patch_abnormal_prior),
            np_(self.map_normal),
            np_(self.map_abnormal),
            np_(self.map_normal_prior),
            np_(self.map_abnormal_prior),
            float(self.image_probability[i].detach()),
            float(self.score[i].detach()),
        )


class FAPrompt:
    """Frozen backbone plus the learnable prompt bank and prior network."""

    def __init__(self, backbone, config: TrainConfig, bank: PromptBank | None = None, psi: PriorNetwork | None = None):
        bcfg = backbone.config
        if tuple(bcfg.input_size) != tuple(config.input_size):
            raise ConfigError(f"backbone input {bcfg.input_size} != train input {config.input_size}")
        l = bcfg.grid_shape[0] * bcfg.grid_shape[1]
        if config.n_patches > l:
            raise ConfigError(f"M={config.n_patches} exceeds the {l} patches of a {config.input_size} image")
        self.backbone = backbone
        self.config = config
        self.bank = bank or PromptBank.for_backbone(
            backbone,
            config.n_normal_tokens,
            config.n_abnormal_tokens,
            config.n_prompts,
            seed=config.seed,
            init_std=config.init_std,
        )
        self.psi = psi or PriorNetwork(bcfg.embedding_dim, config.n_patches, bcfg.token_dim, seed=config.seed + 1)
        if psi is None and not config.use_prior:
            self.psi.zero_()

    def trainable_parameters(self) -> list[torch.nn.Parameter]:
        params = list(self.bank.parameters())
        if self.config.use_prior:
            params += list(self.psi.parameters())
        return params

    def named_state(self) -> dict[str, torch.Tensor]:
        state = {f"bank.{k}": v for k, v in self.bank.state_dict().items()}
        state.update({f"psi.{k}": v for k, v in self.psi.state_dict().items()})
        return state

    def forward(self, images) -> ForwardOutput:
        cfg = self.config
        bb = self.backbone
        glob, patches = bb.encode_images(images)

        # pass 1: prior-free prompts locate the most abnormal patches
        free = encode_prompt_bank(self.bank, bb)
        s_n, s_a = patch_scores(patches, free.normal, free.prototype, cfg.tau)
        idx, selected = select_top_patches(s_a, patches, cfg.n_patches)
        prior = compute_prior(self.psi, selected, idx)

        # pass 2: abnormal tokens shifted by the sample-wise prior
        refined = encode_prompt_bank(self.bank, bb, prior=prior.omega)
        sh_n, sh_a = patch_scores(patches, free.normal, refined.prototype, cfg.tau)

        grid, size = bb.grid_shape, cfg.input_size
        s_img = image_probability(glob, free.normal, refined.prototype, cfg.tau)
        return ForwardOutput(
            free,
            refined,
            prior,
            s_n,
            s_a,
            sh_n,
            sh_a,
            to_segmentation_map(s_n, grid, size),
            to_segmentation_map(s_a, grid, size),
            to_segmentation_map(sh_n, grid, size),
            to_segmentation_map(sh_a, grid, size),
            s_img,
            final_score(s_img, s_a, sh_a),
        )

    def losses(self, out: ForwardOutput, masks: torch.Tensor, labels: torch.Tensor) -> LossBreakdown:
        cfg = self.config
        g, a = cfg.gamma, cfg.alpha
        local = local_loss(out.map_normal_prior, out.map_abnormal_prior, masks, g, a) + local_loss(
            out.map_normal, out.map_abnormal, masks, g, a
        )
        glob = global_loss(out.score, labels, g, a)
        zero = local.new_zeros(())
        prior = prior_loss(out.prior.omega, labels) if cfg.use_prior else zero
        oc = orthogonality_loss(out.prompt_free.per_prompt) if cfg.use_oc else zero
        return total_loss(local, glob, prior, oc)

    def to_checkpoint(self) -> Checkpoint:
        tensors = {k: v.detach().cpu().numpy().astype(np.float32) for k, v in self.named_state().items()}
        meta = {
            "backbone": {"identifier": self.backbone.identifier, "config": self.backbone.config.to_dict()},
            "train_config": self.config.to_dict(),
        }
        return Checkpoint(tensors, meta)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, backbone=None) -> FAPrompt:
        bmeta = ckpt.meta["backbone"]
        if backbone is None:
            if bmeta["identifier"] != ToyBackbone.identifier:
                raise ConfigError(f"no built-in backbone for identifier {bmeta['identifier']!r}")
            backbone = build_backbone(BackboneConfig(**bmeta["config"]))
        elif backbone.identifier != bmeta["identifier"] or backbone.config.to_dict() != bmeta["config"]:
            raise ConfigError("checkpoint was trained with a different backbone")
        model = cls(backbone, TrainConfig.from_dict(ckpt.meta["train_config"]))
        state = model.named_state()
        missing = set(state) ^ set(ckpt.tensors)
        if missing:
            raise ValidationError(f"checkpoint tensors do not match model: {sorted(missing)}")
        with torch.no_grad():
            for name, target in state.items():
                src = torch.from_numpy(ckpt.tensors[name])
                if src.shape != target.shape:
                    raise ValidationError(f"{name}: checkpoint shape {tuple(src.shape)} != {tuple(target.shape)}")
                target.copy_(src)
        return model


def model_forward(sample: Sample, bank: PromptBank, psi: PriorNetwork, backbone, config: TrainConfig):
    """Single-image two-pass forward; returns ``(ScoreBundle, AbnormalityPrior)``."""
    model = FAPrompt(backbone, config, bank, psi)
    image, _ = resize_sample(sample, config.input_size)
    with torch.no_grad():
        out = model.forward(torch.from_numpy(image)[None])
    prior = AbnormalityPrior(out.prior.omega[0].detach(), out.prior.source_indices[0])
    return out.bundle(0), prior


def load_batch(dataset: DatasetHandle, indices, size) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    images, masks, labels = [], [], []
    for i in indices:
        img, mask = resize_sample(dataset[int(i)], size)
        images.append(img)
        masks.append(mask)
        labels.append(dataset.entries[int(i)].label)
    return (
        torch.from_numpy(np.stack(images)),
        torch.from_numpy(np.stack(masks).astype(np.float32)),
        torch.tensor(labels, dtype=torch.float32),
    )


def batch_order(n: int, batch_size: int, epoch_rng: np.random.Generator) -> list[np.ndarray]:
    perm = epoch_rng.permutation(n)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


def train(
    config: TrainConfig,
    dataset: DatasetHandle,
    backbone,
    log_path=None,
    model: FAPrompt | None = None,
    max_steps: int | None = None,
) -> Checkpoint:
    """Adam over {V, A, deep prompts, psi}; the backbone and object token stay fixed.

    Appends one JSON line per step to ``log_path`` when given; the same
    records are kept on the returned checkpoint's ``history``.
    """
    if len(dataset) == 0:
        raise ValidationError("training dataset is empty")
    model = model or FAPrompt(backbone, config)
    params = model.trainable_parameters()
    optimizer = torch.optim.Adam(params, lr=config.lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0)
    rng = np.random.default_rng(config.seed)
    history: list[dict] = []
    log_file = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        log_file = open(log_path, "w")
    step = 0
    try:
        for epoch in range(config.epochs):
            for batch in batch_order(len(dataset), config.batch_size, rng):
                if max_steps is not None and step >= max_steps:
                    break
                images, masks, labels = load_batch(dataset, batch, config.input_size)
                out = model.forward(images)
                try:
                    breakdown = model.losses(out, masks, labels)
                except TrainingError as exc:
                    raise TrainingError(f"epoch {epoch} step {step}: {exc}") from exc
                optimizer.zero_grad(set_to_none=True)
                breakdown.total.backward()
                optimizer.step()
                record = {"epoch": epoch, "step": step, **breakdown.as_floats()}
                history.append(record)
                if log_file is not None:
                    log_file.write(json.dumps(record) + "\n")
                log.debug("epoch %d step %d total %.5f", epoch, step, record["total"])
                step += 1
            if history:
                epoch_losses = [r["total"] for r in history if r["epoch"] == epoch]
                if epoch_losses:
                    log.info("epoch %d mean total loss %.5f", epoch, float(np.mean(epoch_losses)))
    finally:
        if log_file is not None:
            log_file.close()
    ckpt = model.to_checkpoint()
    ckpt.history = history
    return ckpt


def epoch_means(history: list[dict], key: str = "total") -> list[float]:
    epochs = sorted({r["epoch"] for r in history})
    return [float(np.mean([r[key] for r in history if r["epoch"] == e])) for e in epochs]
