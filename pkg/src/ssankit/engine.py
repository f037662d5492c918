"""Mini-batch sampling, the optimisation loop and checkpoints.

A checkpoint is a single ``.npz`` archive of flat ``key -> array`` entries:
``model/<param>``, ``heads/<param>``, ``optim/<param>/{exp_avg,exp_avg_sq,step}`` and a
``__meta__`` JSON string (format version, config, vocabulary, label map, RNG state,
epoch, history). No pickling is involved.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .config import TrainConfig
from .data import DatasetRecord, Vocabulary, build_vocabulary, tokenize
from .encoders import prepare_images
from .losses import IdentityHeads, mine_hard_negatives, total_loss  # noqa: F401  (re-export)
from .model import SSAN

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainingSet:
    """Training records in array form: pixels, padded caption ids and class labels."""

    images: np.ndarray                 # N x H x W x 3 uint8
    labels: np.ndarray                 # N class indices
    caption_ids: np.ndarray            # total_captions x n_max
    caption_lengths: np.ndarray
    caption_owner: list[np.ndarray]    # per image: indices into caption arrays
    classes: list[int]                 # class index -> identity id

    @classmethod
    def build(cls, records: Sequence[DatasetRecord], vocab: Vocabulary, n_max: int) -> "TrainingSet":
        classes = sorted({r.identity_id for r in records})
        lookup = {pid: i for i, pid in enumerate(classes)}
        ids, lengths, owner = [], [], []
        for rec in records:
            start = len(ids)
            for cap in rec.captions:
                tok = tokenize(cap, vocab, n_max)
                ids.append(tok.ids)
                lengths.append(tok.length)
            owner.append(np.arange(start, len(ids)))
        return cls(
            images=np.stack([r.image() for r in records]),
            labels=np.array([lookup[r.identity_id] for r in records], dtype=np.int64),
            caption_ids=np.stack(ids),
            caption_lengths=np.array(lengths, dtype=np.int64),
            caption_owner=owner,
            classes=classes,
        )

    def text_batch(self, caption_idx: np.ndarray) -> tuple[torch.Tensor, torch.Tensor]:
        lengths = self.caption_lengths[caption_idx]
        ids = self.caption_ids[caption_idx, : lengths.max()]
        return torch.from_numpy(ids), torch.from_numpy(lengths)


def identity_batches(labels: np.ndarray, batch_size: int, per_identity: int,
                     rng: np.random.Generator) -> list[np.ndarray]:
    """Identity-balanced batches: groups of `per_identity` images of one person, shuffled.

    A trailing batch holding a single identity is dropped.
    """
    groups = []
    for pid in np.unique(labels):
        members = rng.permutation(np.flatnonzero(labels == pid))
        groups += [members[i:i + per_identity] for i in range(0, len(members), per_identity)]
    batches, current = [], []
    for g in rng.permutation(len(groups)):
        current.extend(groups[g].tolist())
        if len(current) >= batch_size:
            batches.append(np.array(current[:batch_size]))
            current = current[batch_size:]
    if current and len(np.unique(labels[current])) >= 2:
        batches.append(np.array(current))
    return batches


def sample_companions(batch: np.ndarray, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """For each image, another image of the same identity (itself if it is the only one)."""
    out = np.empty_like(batch)
    for i, idx in enumerate(batch):
        others = np.flatnonzero(labels == labels[idx])
        others = others[others != idx]
        out[i] = rng.choice(others) if len(others) else idx
    return out


def pick_captions(images: np.ndarray, data: TrainingSet, rng: np.random.Generator) -> np.ndarray:
    return np.array([
        data.caption_owner[i][0] if len(data.caption_owner[i]) == 1 else rng.choice(data.caption_owner[i])
        for i in images
    ])


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    return cfg.lr * cfg.lr_decay ** sum(epoch >= m for m in cfg.lr_decay_epochs)


@dataclass
class TrainState:
    cfg: TrainConfig
    vocab: Vocabulary
    classes: list[int]
    model: SSAN
    heads: IdentityHeads
    optimizer: torch.optim.Adam
    rng: np.random.Generator
    epoch: int = 0
    step: int = 0
    history: list[dict] = field(default_factory=list)

    @classmethod
    def create(cls, cfg: TrainConfig, vocab: Vocabulary, classes: list[int]) -> "TrainState":
        cfg.model.vocab_size = vocab.num_ids
        cfg.loss.num_classes = len(classes)
        cfg.validate()
        torch.manual_seed(cfg.seed)
        model = SSAN(cfg.model)
        m = cfg.model
        heads = IdentityHeads(len(classes), m.global_dim,
                              m.global_dim if m.use_pfl else None,
                              m.part_out_dim if m.use_prl else None, m.parts)
        opt = torch.optim.Adam(list(model.parameters()) + list(heads.parameters()),
                               lr=cfg.lr, betas=(0.9, 0.999), weight_decay=0.0)
        return cls(cfg, vocab, classes, model, heads, opt, np.random.default_rng(cfg.seed))

    def named_parameters(self) -> list[tuple[str, torch.nn.Parameter]]:
        return ([(f"model/{k}", p) for k, p in self.model.named_parameters()]
                + [(f"heads/{k}", p) for k, p in self.heads.named_parameters()])

    # -- checkpoints --------------------------------------------------------

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        arrays: dict[str, np.ndarray] = {}
        for prefix, module in (("model", self.model), ("heads", self.heads)):
            for k, v in module.state_dict().items():
                arrays[f"{prefix}/{k}"] = v.detach().cpu().numpy()
        for name, p in self.named_parameters():
            for k, v in self.optimizer.state.get(p, {}).items():
                arrays[f"optim/{name}/{k}"] = v.detach().cpu().numpy()
        meta = {
            "format_version": FORMAT_VERSION,
            "config": self.cfg.to_dict(),
            "vocab": self.vocab.to_json(),
            "classes": self.classes,
            "epoch": self.epoch,
            "step": self.step,
            "rng": self.rng.bit_generator.state,
            "history": self.history,
        }
        arrays["__meta__"] = np.array(json.dumps(meta, sort_keys=True))
        tmp = path.with_name(path.name + ".tmp.npz")
        np.savez(tmp, **arrays)
        tmp.replace(path)
        return path

    @classmethod
    def load(cls, path: str | Path) -> "TrainState":
        with np.load(path, allow_pickle=False) as archive:
            meta = json.loads(str(archive["__meta__"]))
            if meta["format_version"] != FORMAT_VERSION:
                raise ValueError(f"unsupported checkpoint format {meta['format_version']}")
            arrays = {k: archive[k] for k in archive.files if k != "__meta__"}
        cfg = TrainConfig.from_dict(meta["config"])
        state = cls.create(cfg, Vocabulary.from_json(meta["vocab"]), meta["classes"])
        for prefix, module in (("model", state.model), ("heads", state.heads)):
            sd = {k[len(prefix) + 1:]: torch.from_numpy(v.copy())
                  for k, v in arrays.items() if k.startswith(prefix + "/")}
            module.load_state_dict(sd, strict=True)
        for name, p in state.named_parameters():
            entries = {k.rsplit("/", 1)[1]: torch.from_numpy(v.copy())
                       for k, v in arrays.items() if k.startswith(f"optim/{name}/")}
            if entries:
                state.optimizer.state[p] = entries
        state.rng.bit_generator.state = meta["rng"]
        state.epoch, state.step, state.history = meta["epoch"], meta["step"], meta["history"]
        return state


def train_step(state: TrainState, data: TrainingSet, batch: np.ndarray) -> dict[str, float]:
    cfg, rng = state.cfg, state.rng
    flips = rng.random(len(batch)) < 0.5 if cfg.flip else None
    companions = sample_companions(batch, data.labels, rng)
    caps = pick_captions(batch, data, rng)
    weak_caps = pick_captions(companions, data, rng)

    images = prepare_images(data.images[batch], flips)
    labels = torch.from_numpy(data.labels[batch])
    visual = state.model.encode_images(images)
    textual = state.model.encode_texts(*data.text_batch(caps))
    weak = state.model.encode_texts(*data.text_batch(weak_caps))
    loss, breakdown = total_loss(visual, textual, weak, labels, state.heads, cfg.loss)
    if not math.isfinite(float(loss.detach())):
        raise TrainingDiverged(json.dumps({
            "step": state.step, "batch": batch.tolist(), "captions": caps.tolist(),
            "weak_captions": weak_caps.tolist(), "losses": breakdown,
        }))
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if cfg.grad_clip:
        torch.nn.utils.clip_grad_norm_([p for _, p in state.named_parameters()], cfg.grad_clip)
    state.optimizer.step()
    return breakdown


def run_epochs(state: TrainState, data: TrainingSet, until: int | None = None,
               out_dir: str | Path | None = None,
               on_epoch: Callable[[TrainState], dict] | None = None) -> TrainState:
    """Continue training from `state.epoch` up to `until` (default: the configured epochs)."""
    cfg = state.cfg
    until = cfg.epochs if until is None else until
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    step_log = (out_dir / "train_log.jsonl").open("a") if out_dir else None
    try:
        while state.epoch < until:
            lr = learning_rate(cfg, state.epoch)
            for group in state.optimizer.param_groups:
                group["lr"] = lr
            state.model.train()
            state.heads.train()
            totals = []
            for batch in identity_batches(data.labels, cfg.batch_size, cfg.images_per_identity, state.rng):
                try:
                    breakdown = train_step(state, data, batch)
                except TrainingDiverged as exc:
                    if out_dir:
                        dump = out_dir / f"diverged_step{state.step}.json"
                        dump.write_text(str(exc))
                        raise TrainingDiverged(f"non-finite loss at step {state.step}; batch dumped to {dump}") from None
                    raise TrainingDiverged(f"non-finite loss: {exc}") from None
                state.step += 1
                totals.append(breakdown["total"])
                if step_log:
                    step_log.write(json.dumps({"step": state.step, **breakdown}) + "\n")
            state.epoch += 1
            record = {"epoch": state.epoch, "lr": lr, "mean_loss": float(np.mean(totals))}
            if on_epoch is not None:
                state.model.eval()
                record.update(on_epoch(state))
            state.history.append(record)
            log.info("epoch %d loss %.4f", state.epoch, record["mean_loss"])
            if out_dir:
                state.save(out_dir / f"epoch_{state.epoch:03d}.npz")
    finally:
        if step_log:
            step_log.close()
    state.model.eval()
    state.heads.eval()
    return state


def train(cfg: TrainConfig, records: Sequence[DatasetRecord], out_dir: str | Path | None = None,
          vocab: Vocabulary | None = None,
          on_epoch: Callable[[TrainState], dict] | None = None) -> TrainState:
    """Train from scratch on `records` (the training split)."""
    cfg.validate()
    if vocab is None:
        vocab = build_vocabulary(records, dim=cfg.model.embed_dim)
    data = TrainingSet.build(records, vocab, cfg.model.max_len)
    state = TrainState.create(cfg, vocab, data.classes)
    if out_dir:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
    return run_epochs(state, data, out_dir=out_dir, on_epoch=on_epoch)


def resume(checkpoint: str | Path, records: Sequence[DatasetRecord], out_dir: str | Path | None = None,
           epochs: int | None = None,
           on_epoch: Callable[[TrainState], dict] | None = None) -> TrainState:
    state = TrainState.load(checkpoint)
    if epochs is not None:
        state.cfg.epochs = epochs
    data = TrainingSet.build(records, state.vocab, state.cfg.model.max_len)
    if data.classes != state.classes:
        raise ValueError("training identities differ from the checkpoint's")
    return run_epochs(state, data, out_dir=out_dir, on_epoch=on_epoch)
