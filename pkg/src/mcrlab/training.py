"""Model assembly, optimisation loop, checkpoints and resource accounting."""

from __future__ import annotations

import json
import logging
import math
import os
import statistics
import time
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn

from .alignment import Projection, align
from .config import ExperimentConfig, build_config
from .data import StudyPair
from .encoders import TextEncoder, VisionEncoder, count_parameters, init_weights
from .masking import sample_plan
from .objectives import (ImageDecoder, LossBundle, TextDecoder, contrastive_loss, mim_loss,
                         mrm_loss, total_loss)
from .preprocessing import Vocabulary, patchify, wordpiece_tokenize

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "mcrlab-ckpt-1"
# fields that may differ between a checkpoint and the run resuming it
_RESUMABLE_FIELDS = ("epochs",)


class CheckpointError(RuntimeError):
    pass


class MCRModel(nn.Module):
    def __init__(self, config: ExperimentConfig, pad_id: int = 0):
        super().__init__()
        c = config
        self.config = c
        self.vision = VisionEncoder(c.num_patches, c.patch_dim, c.embed_dim, c.vision_depth,
                                    c.num_heads, c.mlp_ratio)
        self.text = TextEncoder(c.vocab_size, c.text_positions, c.embed_dim, c.text_depth,
                                c.num_heads, c.mlp_ratio, pad_id)
        self.proj_v = Projection(c.embed_dim, c.proj_dim, c.proj_hidden, c.projection)
        self.proj_r = Projection(c.embed_dim, c.proj_dim, c.proj_hidden, c.projection)
        self.image_decoder = ImageDecoder(c.num_patches, c.patch_dim, c.embed_dim,
                                          c.decoder_depth, c.num_heads, c.mlp_ratio)
        self.text_decoder = TextDecoder(c.embed_dim, c.vocab_size)
        self.log_tau = nn.Parameter(torch.tensor(math.log(c.tau_init)))
        init_weights(self)
        for p in (self.vision.cls_token, self.vision.pos_embed, self.text.pos_embed,
                  self.image_decoder.mask_token, self.image_decoder.pos_embed):
            nn.init.trunc_normal_(p, std=0.02, a=-0.04, b=0.04)
        self.counters: Counter[str] = Counter()

    @property
    def tau(self) -> torch.Tensor:
        return self.log_tau.exp()

    def clamp_tau(self) -> None:
        with torch.no_grad():
            self.log_tau.clamp_(min=math.log(self.config.tau_min))

    def param_groups(self) -> tuple[list[nn.Parameter], list[nn.Parameter]]:
        enc = list(self.vision.parameters()) + list(self.text.parameters())
        ids = {id(p) for p in enc}
        rest = [p for p in self.parameters() if id(p) not in ids]
        return enc, rest

    def _align(self, fv, fr):
        c = self.config
        sv = align(fv, self.proj_v, c.align_strategy, c.agg, c.pool_cls)
        sr = align(fr, self.proj_r, c.align_strategy, c.agg, c.pool_cls)
        return sv, sr

    def embed_images(self, patches: torch.Tensor) -> torch.Tensor:
        """Unit embeddings for complete (unmasked) images, (B, N, P*P*C) -> (B, d_s)."""
        self.counters["vision_full"] += 1
        fv = self.vision(patches)
        c = self.config
        return align(fv, self.proj_v, c.align_strategy, c.agg, c.pool_cls)

    def embed_texts(self, ids: torch.Tensor, valid: torch.Tensor | None = None) -> torch.Tensor:
        self.counters["text_full"] += 1
        fr = self.text(ids, valid)
        c = self.config
        return align(fr, self.proj_r, c.align_strategy, c.agg, c.pool_cls)

    def losses(self, batch: "Batch") -> LossBundle:
        c = self.config
        kept = batch.patches.gather(1, batch.kept_positions[..., None].expand(-1, -1, c.patch_dim))
        fv = self.vision(kept, batch.kept_positions)
        fr = self.text(batch.masked_ids, batch.valid)
        self.counters["vision_masked"] += 1
        self.counters["text_masked"] += 1
        if c.input_mode == "masked_only":
            sv, sr = self._align(fv, fr)
        else:
            self.counters["vision_full"] += 1
            self.counters["text_full"] += 1
            sv, sr = self._align(self.vision(batch.patches), self.text(batch.ids, batch.valid))
        tau = self.tau
        l_vrc = contrastive_loss(sv, sr, tau, c.lambda_v, c.lambda_r)
        l_mim = mim_loss(self.image_decoder(fv), batch.targets, batch.image_masked)
        l_mrm = mrm_loss(self.text_decoder(fr), batch.ids, batch.text_masked)
        return total_loss(l_vrc, l_mim, l_mrm, c.lambda_vrc, c.lambda_mim, c.lambda_mrm,
                          float(tau.detach()), batch.size)


def build_model(config: ExperimentConfig, pad_id: int = 0) -> MCRModel:
    """Construct with parameters drawn from a private generator seeded by ``config.seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        return MCRModel(config, pad_id)


# batches --------------------------------------------------------------------

@dataclass
class Batch:
    patches: torch.Tensor  # (B, N, P*P*C) raw pixels
    targets: torch.Tensor  # (B, N, P*P*C) per-patch normalised
    image_masked: torch.Tensor  # (B, N) bool
    kept_positions: torch.Tensor  # (B, N - |M^v|) long
    ids: torch.Tensor  # (B, M+2) original ids, [PAD]-filled
    masked_ids: torch.Tensor  # (B, M+2)
    valid: torch.Tensor  # (B, M+2) bool
    text_masked: torch.Tensor  # (B, M+2) bool
    study_ids: list[str] = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.patches.shape[0]


class EncodedCorpus:
    """Patchified views and tokenised reports, ready for batching."""

    def __init__(self, pairs: Sequence[StudyPair], vocab: Vocabulary, config: ExperimentConfig):
        if len(vocab) > config.vocab_size:
            raise ValueError(f"vocabulary has {len(vocab)} tokens, config allows {config.vocab_size}")
        self.config = config
        self.vocab = vocab
        self.study_ids = [p.study_id for p in pairs]
        self.reports = [p.report for p in pairs]
        views, self.view_offsets, self.view_counts = [], [], []
        for p in pairs:
            self.view_offsets.append(len(views))
            self.view_counts.append(len(p.images))
            for img in p.images:
                if img.shape != (config.image_size, config.image_size, config.channels):
                    raise ValueError(f"study {p.study_id}: image shape {img.shape} does not match config")
                views.append(patchify(img, config.patch_size).patches)
        shape = (0, config.num_patches, config.patch_dim)
        self.patches = np.stack(views).astype(np.float32) if views else np.zeros(shape, np.float32)
        t = config.text_positions
        self.ids = np.full((len(pairs), t), vocab.pad_id, dtype=np.int64)
        self.body_len = np.zeros(len(pairs), dtype=np.int64)
        for i, p in enumerate(pairs):
            seq = wordpiece_tokenize(p.report, vocab, config.max_text_len).ids
            self.ids[i, : len(seq)] = seq
            self.body_len[i] = len(seq) - 2
        self.view_owner = np.repeat(np.arange(len(pairs)), self.view_counts)

    def __len__(self) -> int:
        return len(self.study_ids)

    def make_batch(self, rows: Sequence[int], views: Sequence[int],
                   rng: np.random.Generator) -> Batch:
        c = self.config
        n, b = c.num_patches, len(rows)
        patches = self.patches[[self.view_offsets[r] + v for r, v in zip(rows, views)]]
        ids = self.ids[list(rows)]
        img_masked = np.zeros((b, n), dtype=bool)
        txt_masked = np.zeros(ids.shape, dtype=bool)
        for j, r in enumerate(rows):
            plan = sample_plan(n, int(self.body_len[r]), c.image_mask_rate, c.text_mask_rate, rng)
            img_masked[j, list(plan.image_masked_idx)] = True
            txt_masked[j, list(plan.text_masked_idx)] = True
        kept = np.stack([np.flatnonzero(~m) for m in img_masked])
        mean = patches.mean(axis=2, keepdims=True)
        var = patches.var(axis=2, keepdims=True)
        targets = (patches - mean) / np.sqrt(var + 1e-6)
        masked_ids = np.where(txt_masked, self.vocab.mask_id, ids)
        return Batch(
            patches=torch.from_numpy(patches),
            targets=torch.from_numpy(targets.astype(np.float32)),
            image_masked=torch.from_numpy(img_masked),
            kept_positions=torch.from_numpy(kept),
            ids=torch.from_numpy(ids),
            masked_ids=torch.from_numpy(masked_ids),
            valid=torch.from_numpy(ids != self.vocab.pad_id),
            text_masked=torch.from_numpy(txt_masked),
            study_ids=[self.study_ids[r] for r in rows],
        )

    def epoch_batches(self, epoch: int, batch_size: int, seed: int):
        """Shuffle, one random view per study and fresh masks, keyed to (seed, epoch)."""
        rng = np.random.Generator(np.random.PCG64([seed, 1, epoch]))
        order = rng.permutation(len(self))
        views = [int(rng.integers(self.view_counts[i])) for i in order]
        for s in range(0, len(order), batch_size):
            rows = order[s:s + batch_size].tolist()
            yield self.make_batch(rows, views[s:s + batch_size], rng)


# schedule -------------------------------------------------------------------

def lr_at(step: int, config: ExperimentConfig, steps_per_epoch: int, group: str = "rest") -> float:
    """Linear warm-up from 0 to the group peak, then cosine down to peak * final_lr_ratio.

    The last step of training (``epochs * steps_per_epoch - 1``) lands
    exactly on the floor.
    """
    peak = config.peak_lr_encoders if group == "encoders" else config.peak_lr_rest
    warmup = config.warmup_epochs * steps_per_epoch
    last = config.epochs * steps_per_epoch - 1
    if step < warmup:
        return peak * step / warmup
    floor = peak * config.final_lr_ratio
    span = last - warmup
    progress = 1.0 if span <= 0 else min((step - warmup) / span, 1.0)
    return floor + (peak - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


# state and step ---------------------------------------------------------------

@dataclass
class TrainState:
    model: MCRModel
    optimizer: torch.optim.Optimizer
    config: ExperimentConfig
    steps_per_epoch: int
    step: int = 0
    epoch: int = 0


def make_optimizer(model: MCRModel, config: ExperimentConfig) -> torch.optim.AdamW:
    enc, rest = model.param_groups()
    return torch.optim.AdamW(
        [{"params": enc, "group": "encoders"}, {"params": rest, "group": "rest"}],
        lr=0.0, betas=(config.beta1, config.beta2), weight_decay=config.weight_decay,
    )


def init_state(config: ExperimentConfig, steps_per_epoch: int, pad_id: int = 0) -> TrainState:
    model = build_model(config, pad_id)
    return TrainState(model, make_optimizer(model, config), config, steps_per_epoch)


def train_step(state: TrainState, batch: Batch) -> LossBundle:
    """One optimisation step on ``batch``; advances ``state.step``."""
    if batch.size == 0:
        raise ValueError("empty batch")
    model, opt, c = state.model, state.optimizer, state.config
    model.train()
    bundle = model.losses(batch)
    if not torch.isfinite(bundle.l_total):
        raise FloatingPointError(f"non-finite loss at step {state.step}: {bundle.to_record()}")
    opt.zero_grad(set_to_none=False)
    bundle.l_total.backward()
    if c.grad_clip > 0:
        nn.utils.clip_grad_norm_(model.parameters(), c.grad_clip)
    for g in opt.param_groups:
        g["lr"] = lr_at(state.step, c, state.steps_per_epoch, g["group"])
    opt.step()
    model.clamp_tau()
    state.step += 1
    return bundle


def train(state: TrainState, corpus: EncodedCorpus, *, log_path: str | os.PathLike | None = None,
          checkpoint_dir: str | os.PathLike | None = None,
          on_epoch: Callable[[TrainState], None] | None = None) -> list[dict]:
    """Run from ``state.epoch`` to ``config.epochs``; returns per-step log rows."""
    c = state.config
    history = []
    fh = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        while state.epoch < c.epochs:
            t0 = time.perf_counter()
            for batch in corpus.epoch_batches(state.epoch, c.batch_size, c.seed):
                lr = lr_at(state.step, c, state.steps_per_epoch, "rest")
                bundle = train_step(state, batch)
                row = {"step": state.step - 1, "epoch": state.epoch, **bundle.to_record(), "lr": lr}
                history.append(row)
                if fh:
                    fh.write(json.dumps(row) + "\n")
            state.epoch += 1
            log.info("epoch %d/%d  loss %.4f  (%.1fs)", state.epoch, c.epochs,
                     history[-1]["l_total"] if history else float("nan"), time.perf_counter() - t0)
            if checkpoint_dir:
                save_checkpoint(state, Path(checkpoint_dir) / "last.pt")
            if on_epoch:
                on_epoch(state)
    finally:
        if fh:
            fh.close()
    return history


def steps_per_epoch(n_studies: int, batch_size: int) -> int:
    return max(1, math.ceil(n_studies / batch_size))


# checkpoints ------------------------------------------------------------------

def save_checkpoint(state: TrainState, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": state.config.to_dict(),
        "config_hash": state.config.digest(exclude=_RESUMABLE_FIELDS),
        "epoch": state.epoch,
        "step": state.step,
        "steps_per_epoch": state.steps_per_epoch,
        "pad_id": state.model.text.pad_id,
        "model": state.model.state_dict(),
        "optimizer": state.optimizer.state_dict(),
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | os.PathLike, config: ExperimentConfig | None = None) -> TrainState:
    """Restore a TrainState. With ``config`` given, its hash must match the file's."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises several unrelated types on bad files
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint")
    stored = build_config(payload["config"])
    if stored.digest(exclude=_RESUMABLE_FIELDS) != payload["config_hash"]:
        raise CheckpointError(f"{path}: config hash does not match stored config")
    if config is not None:
        if config.digest(exclude=_RESUMABLE_FIELDS) != payload["config_hash"]:
            raise CheckpointError(f"{path}: config hash mismatch with the requested config")
        stored = config
    state = init_state(stored, payload["steps_per_epoch"], payload.get("pad_id", 0))
    state.model.load_state_dict(payload["model"])
    state.optimizer.load_state_dict(payload["optimizer"])
    state.step, state.epoch = payload["step"], payload["epoch"]
    return state


# resource accounting ------------------------------------------------------------

@dataclass
class ResourceReport:
    mode: str
    image_tokens_per_sample: int
    text_tokens_per_sample: int
    image_tokens_per_step: int
    text_tokens_per_step: int
    params_total: int
    wall_seconds_per_step: float
    peak_allocation_proxy: int
    probe_steps: int

    def to_dict(self) -> dict:
        return asdict(self)


def token_counts(config: ExperimentConfig, mode: str) -> tuple[int, int]:
    """Encoder tokens per sample (image, text) for one training step."""
    n = config.num_patches
    from .masking import mask_count

    kept = n - mask_count(n, config.image_mask_rate) + 1
    text = config.text_positions
    if mode == "masked_only":
        return kept, text
    if mode == "dual_input":
        return (n + 1) + kept, 2 * text
    raise ValueError(f"unknown input mode {mode!r}")


def _block_activations(tokens: int, dim: int, hidden: int, heads: int) -> int:
    # saved for backward per block: 2 norms, qkv, scores + softmax, attn out, proj,
    # fc1 out + gelu out, fc2 out
    return tokens * (2 * dim + 3 * dim + dim + dim + 2 * hidden + dim) + 2 * heads * tokens * tokens


def activation_proxy(config: ExperimentConfig, mode: str, bytes_per_value: int = 4) -> int:
    """Analytic bytes of activations kept alive for one backward pass."""
    c = config
    hidden = int(c.embed_dim * c.mlp_ratio)
    img_kept = token_counts(c, "masked_only")[0]
    forwards = [(img_kept, c.vision_depth), (c.text_positions, c.text_depth)]
    if mode == "dual_input":
        forwards += [(c.num_patches + 1, c.vision_depth), (c.text_positions, c.text_depth)]
    total = sum(depth * _block_activations(t, c.embed_dim, hidden, c.num_heads)
                for t, depth in forwards)
    total += c.decoder_depth * _block_activations(c.num_patches + 1, c.embed_dim, hidden, c.num_heads)
    total += c.text_positions * c.vocab_size * 2
    return total * c.batch_size * bytes_per_value


def resource_report(config: ExperimentConfig, mode: str, n_probe_steps: int = 20,
                    corpus: EncodedCorpus | None = None, warmup_steps: int = 3) -> ResourceReport:
    """Token accounting plus the median wall time of ``n_probe_steps`` real steps."""
    cfg = config.replace(input_mode=mode)
    if corpus is None:
        from .data import SyntheticSpec, build_vocabulary, generate_corpus

        pairs = generate_corpus(SyntheticSpec(n_studies=cfg.batch_size, image_size=cfg.image_size,
                                              channels=cfg.channels, seed=cfg.seed))
        corpus = EncodedCorpus(pairs, build_vocabulary(), cfg)
    state = init_state(cfg, steps_per_epoch=1, pad_id=corpus.vocab.pad_id)
    # constant non-zero lr: keeps the probe doing real updates
    state.steps_per_epoch = 10**6
    state.step = 10**6
    rng = np.random.Generator(np.random.PCG64([cfg.seed, 99]))
    rows = list(range(min(cfg.batch_size, len(corpus))))
    times = []
    for i in range(warmup_steps + n_probe_steps):
        batch = corpus.make_batch(rows, [0] * len(rows), rng)
        t0 = time.perf_counter()
        train_step(state, batch)
        if i >= warmup_steps:
            times.append(time.perf_counter() - t0)
    img, txt = token_counts(cfg, mode)
    b = cfg.batch_size
    return ResourceReport(
        mode=mode,
        image_tokens_per_sample=img,
        text_tokens_per_sample=txt,
        image_tokens_per_step=img * b,
        text_tokens_per_step=txt * b,
        params_total=count_parameters(state.model),
        wall_seconds_per_step=statistics.median(times) if times else float("nan"),
        peak_allocation_proxy=activation_proxy(cfg, mode),
        probe_steps=n_probe_steps,
    )
