"""Training loops: pretraining, rehearsal fine-tuning, and the sweep driver.

Run directory layout:
``runs/<name>/{config.json, eval_results.csv, ckpt_epoch_<n>.bin, best.bin, log.txt}``
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import cross_entropy, reshape
from .corpus import EmptyCorpus, MixConfig, SongRecord, build_finetune_mix
from .evaluator import EvalRow, evaluate_split, write_eval_csv
from .model import Model, ModelCheckpoint, ModelConfig
from .optim import AdamW
from .tokenizer import PAD, Vocabulary, augment_twelve_keys, encode


class NonFiniteLoss(RuntimeError):
    pass


class EmptyRecords(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    phase: str                      # "pretrain" | "finetune"
    epochs_max: int
    peak_lr: float
    warmup_epochs: int
    micro_batch: int = 64
    accum_factor: int = 2
    early_stop_patience: int | None = None
    seed: int = 0
    weight_decay: float = 0.01

    @classmethod
    def pretrain_defaults(cls, **overrides) -> "TrainConfig":
        base = dict(phase="pretrain", epochs_max=3, peak_lr=3e-4,
                    warmup_epochs=1, micro_batch=64, accum_factor=2,
                    early_stop_patience=None)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def finetune_defaults(cls, **overrides) -> "TrainConfig":
        base = dict(phase="finetune", epochs_max=10, peak_lr=2e-5,
                    warmup_epochs=2, micro_batch=64, accum_factor=2,
                    early_stop_patience=5)
        base.update(overrides)
        return cls(**base)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    rows: dict[str, EvalRow] = field(default_factory=dict)
    checkpoint_path: str | None = None


def lr_at(step: int, total_steps: int, warmup_steps: int, peak_lr: float) -> float:
    """Linear warmup to peak, then cosine decay to zero at total_steps."""
    if warmup_steps > 0 and step < warmup_steps:
        return peak_lr * step / warmup_steps
    span = max(1, total_steps - warmup_steps)
    progress = min(1.0, (step - warmup_steps) / span)
    return peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def encode_split(songs: list[SongRecord], vocab: Vocabulary,
                 augment: bool = False) -> list[list[int]]:
    seqs = [encode(s, vocab) for s in songs]
    return augment_twelve_keys(seqs, vocab) if augment else seqs


def _padded_batch(seqs: list[list[int]]) -> np.ndarray:
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
    return ids


def steps_per_epoch(n_seqs: int, cfg: TrainConfig) -> int:
    n_micro = math.ceil(n_seqs / cfg.micro_batch)
    return math.ceil(n_micro / cfg.accum_factor)


def train_epoch(ckpt: ModelCheckpoint, seqs: list[list[int]], cfg: TrainConfig,
                epoch_index: int, *, optimizer: AdamW | None = None,
                model: Model | None = None, total_steps: int | None = None) -> float:
    """One pass over ``seqs``; returns mean train NLL per position.

    Data order is a per-epoch seeded shuffle. The optimizer steps once
    per ``accum_factor`` micro-batches (trailing partial window flushed);
    gradients accumulate as sums and are normalized by the window's
    position count at step time, so accumulation matches a single large
    batch exactly.
    """
    if not seqs:
        raise EmptyCorpus("no training sequences")
    model = model or ckpt.model(dropout_seed=cfg.seed)
    optimizer = optimizer or AdamW(ckpt.params, lr=cfg.peak_lr,
                                   weight_decay=cfg.weight_decay)
    per_epoch = steps_per_epoch(len(seqs), cfg)
    total = total_steps if total_steps is not None else per_epoch * cfg.epochs_max
    warmup = per_epoch * cfg.warmup_epochs

    order = list(range(len(seqs)))
    random.Random(f"{cfg.seed}:epoch:{epoch_index}").shuffle(order)

    epoch_nll, epoch_count = 0.0, 0
    window_count = 0
    micro_in_window = 0
    for start in range(0, len(order), cfg.micro_batch):
        chunk = [seqs[i] for i in order[start:start + cfg.micro_batch]]
        ids = _padded_batch(chunk)
        logits = model.forward(ids[:, :-1], training=True)
        targets = ids[:, 1:].reshape(-1)
        mask = targets != PAD
        flat = reshape(logits, (targets.size, ckpt.config.vocab_size))
        loss = cross_entropy(flat, targets, mask, reduction="sum")
        if not math.isfinite(loss.item()):
            raise NonFiniteLoss(
                f"non-finite loss in epoch {epoch_index}, micro-batch at {start}")
        loss.backward()
        n_here = int(mask.sum())
        epoch_nll += loss.item()
        epoch_count += n_here
        window_count += n_here
        micro_in_window += 1

        last = start + cfg.micro_batch >= len(order)
        if micro_in_window == cfg.accum_factor or last:
            for p in ckpt.params.values():
                if p.grad is not None:
                    p.grad /= window_count
            step_index = epoch_index * per_epoch + (start // cfg.micro_batch) // cfg.accum_factor
            optimizer.step(lr_at(step_index, total, warmup, cfg.peak_lr))
            optimizer.zero_grad()
            window_count = 0
            micro_in_window = 0
    return epoch_nll / epoch_count


def _evaluate_epoch(ckpt: ModelCheckpoint, epoch: int,
                    eval_splits: dict[str, list[list[int]]],
                    vocab: Vocabulary) -> dict[str, EvalRow]:
    rows: dict[str, EvalRow] = {}
    for name, seqs in eval_splits.items():
        if not seqs:
            continue
        for variant in ("chord", "all"):
            key = f"{name}/{variant}"
            rows[key] = evaluate_split(ckpt, seqs, vocab, split=key,
                                       epoch=epoch, positions=variant)
    return rows


def _run_loop(ckpt: ModelCheckpoint, train_seqs: list[list[int]],
              eval_splits: dict[str, list[list[int]]], cfg: TrainConfig,
              vocab: Vocabulary, run_dir: Path, *,
              keep_epoch_ckpts: bool = True,
              monitor: str = "val/all") -> list[EpochRecord]:
    """Shared epoch loop with per-epoch evaluation and early stopping."""
    run_dir.mkdir(parents=True, exist_ok=True)
    model = ckpt.model(dropout_seed=cfg.seed)
    optimizer = AdamW(ckpt.params, lr=cfg.peak_lr, weight_decay=cfg.weight_decay)
    total = steps_per_epoch(len(train_seqs), cfg) * cfg.epochs_max

    records: list[EpochRecord] = []
    csv_rows: list[EvalRow] = []
    best_monitor = math.inf
    best_epoch = -1
    log_lines: list[str] = []
    for epoch in range(cfg.epochs_max):
        train_loss = train_epoch(ckpt, train_seqs, cfg, epoch,
                                 optimizer=optimizer, model=model,
                                 total_steps=total)
        rows = _evaluate_epoch(ckpt, epoch, eval_splits, vocab)
        record = EpochRecord(epoch=epoch, train_loss=train_loss, rows=rows)
        if keep_epoch_ckpts:
            path = run_dir / f"ckpt_epoch_{epoch}.bin"
            ckpt.provenance["epoch"] = epoch
            ckpt.save(path)
            record.checkpoint_path = str(path)
        records.append(record)
        csv_rows.extend(rows.values())
        write_eval_csv(csv_rows, run_dir / "eval_results.csv")

        monitored = rows[monitor].loss if monitor in rows else train_loss
        summary = " ".join(f"{k}={v.top1:.2f}" for k, v in rows.items()
                           if k.endswith("/chord"))
        log_lines.append(f"epoch {epoch}: train_loss={train_loss:.6f} "
                         f"{monitor}={monitored:.6f} {summary}")
        (run_dir / "log.txt").write_text("\n".join(log_lines) + "\n",
                                         encoding="utf-8")
        if monitored < best_monitor - 1e-12:
            best_monitor = monitored
            best_epoch = epoch
        elif (cfg.early_stop_patience is not None
                and epoch - best_epoch >= cfg.early_stop_patience):
            log_lines.append(f"early stop at epoch {epoch} "
                             f"(no {monitor} improvement since {best_epoch})")
            (run_dir / "log.txt").write_text("\n".join(log_lines) + "\n",
                                             encoding="utf-8")
            break
    return records


def run_pretrain(corpus: list[SongRecord], model_cfg: ModelConfig,
                 train_cfg: TrainConfig, run_dir: str | Path,
                 vocab: Vocabulary, *, augment: bool = True,
                 keep_epoch_ckpts: bool = False,
                 init_seed: int | None = None
                 ) -> tuple[ModelCheckpoint, list[EpochRecord]]:
    """Phase 0: train from scratch; best checkpoint by validation loss."""
    run_dir = Path(run_dir)
    train_songs = [s for s in corpus if s.split == "train"]
    if not train_songs:
        raise EmptyCorpus("no songs in the train split")
    val_songs = [s for s in corpus if s.split == "val"]
    test_songs = [s for s in corpus if s.split == "test"]
    eval_splits = {
        "val": encode_split(val_songs, vocab),
        "pop_test": encode_split([s for s in test_songs if s.genre != "jazz"], vocab),
        "jazz_test": encode_split([s for s in test_songs if s.genre == "jazz"], vocab),
    }
    train_seqs = encode_split(train_songs, vocab, augment=augment)

    seed = train_cfg.seed if init_seed is None else init_seed
    ckpt = ModelCheckpoint.fresh(
        model_cfg, seed=seed, vocab_version=vocab.version,
        provenance={"phase": "pretrain",
                    "seeds": {"init": seed, "train": train_cfg.seed}})
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(
        {"model": asdict(model_cfg), "train": asdict(train_cfg),
         "augment": augment, "n_train_songs": len(train_songs),
         "n_train_seqs": len(train_seqs)},
        indent=2, sort_keys=True) + "\n", encoding="utf-8")

    records = _run_loop(ckpt, train_seqs, eval_splits, train_cfg, vocab,
                        run_dir, keep_epoch_ckpts=True)
    best = min(records, key=lambda r: (r.rows["val/all"].loss
                                       if "val/all" in r.rows else r.train_loss))
    best_ckpt = ModelCheckpoint.load(best.checkpoint_path)
    best_ckpt.provenance["best_epoch"] = best.epoch
    best_ckpt.save(run_dir / "best.bin")
    if not keep_epoch_ckpts:
        for record in records:
            if record.checkpoint_path:
                Path(record.checkpoint_path).unlink(missing_ok=True)
                record.checkpoint_path = None
    return best_ckpt, records


def run_finetune(base: ModelCheckpoint, mix_songs: list[SongRecord],
                 val_songs: list[SongRecord],
                 eval_splits: dict[str, list[list[int]]], cfg: TrainConfig,
                 run_dir: str | Path, vocab: Vocabulary, *,
                 mix_name: str, augment: bool = False,
                 baseline_source_top1: float | None = None,
                 source_split: str = "pop_test/chord",
                 target_split: str = "jazz_test/chord"
                 ) -> tuple[ModelCheckpoint, list[EpochRecord]]:
    """One fine-tune run resuming from a copy of ``base``."""
    run_dir = Path(run_dir)
    ckpt = base.clone()
    ckpt.provenance = {"phase": "finetune", "mix": mix_name,
                       "seeds": dict(base.provenance.get("seeds", {}),
                                     finetune=cfg.seed),
                       "base_epoch": base.provenance.get("best_epoch")}
    splits = dict(eval_splits)
    splits["val"] = encode_split(val_songs, vocab)
    train_seqs = encode_split(mix_songs, vocab, augment=augment)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(
        {"model": asdict(base.config), "train": asdict(cfg), "mix": mix_name,
         "augment": augment, "n_train_songs": len(mix_songs),
         "n_train_seqs": len(train_seqs)},
        indent=2, sort_keys=True) + "\n", encoding="utf-8")

    records = _run_loop(ckpt, train_seqs, splits, cfg, vocab, run_dir,
                        keep_epoch_ckpts=True)
    if baseline_source_top1 is not None:
        idx, unsatisfiable = select_best_epoch(
            records, baseline_source_top1, source_split=source_split,
            target_split=target_split)
    else:
        idx = min(records, key=lambda r: r.rows["val/all"].loss).epoch
        unsatisfiable = False
    chosen = next(r for r in records if r.epoch == idx)
    best_ckpt = ModelCheckpoint.load(chosen.checkpoint_path)
    best_ckpt.provenance["best_epoch"] = idx
    best_ckpt.provenance["constraint_unsatisfiable"] = unsatisfiable
    best_ckpt.save(run_dir / "best.bin")
    return best_ckpt, records


def run_finetune_sweep(base: ModelCheckpoint, jazz_train: list[SongRecord],
                       pop_train: list[SongRecord], mixes: list[MixConfig],
                       val_songs: list[SongRecord],
                       eval_splits: dict[str, list[list[int]]],
                       cfg: TrainConfig, out_dir: str | Path,
                       vocab: Vocabulary, *, augment: bool = False,
                       baseline_source_top1: float | None = None
                       ) -> dict[str, list[EpochRecord]]:
    """One run per mix, each resuming from an identical copy of ``base``."""
    out_dir = Path(out_dir)
    results: dict[str, list[EpochRecord]] = {}
    base_bytes = {k: t.data.tobytes() for k, t in base.params.items()}
    for mix in mixes:
        mix_songs = build_finetune_mix(jazz_train, pop_train, mix)
        _, records = run_finetune(
            base, mix_songs, val_songs, eval_splits, cfg,
            out_dir / mix.name, vocab, mix_name=mix.name, augment=augment,
            baseline_source_top1=baseline_source_top1)
        results[mix.name] = records
        for k, t in base.params.items():  # the shared base must never move
            assert t.data.tobytes() == base_bytes[k], f"base mutated at {k}"
    return results


def select_best_epoch(records: list[EpochRecord], baseline_source_top1: float,
                      slack: float = 3.0, *,
                      source_split: str = "pop_test/chord",
                      target_split: str = "jazz_test/chord") -> tuple[int, bool]:
    """Highest target top-1 subject to source top-1 within ``slack`` of
    baseline; ties go to the earliest epoch. When nothing satisfies the
    constraint, fall back to argmax source top-1 and flag it.
    """
    if not records:
        raise EmptyRecords("select_best_epoch needs at least one record")
    floor = baseline_source_top1 - slack
    eligible = [r for r in records if r.rows[source_split].top1 >= floor]
    if eligible:
        best = max(eligible,
                   key=lambda r: (r.rows[target_split].top1, -r.epoch))
        return best.epoch, False
    best = max(records, key=lambda r: (r.rows[source_split].top1, -r.epoch))
    return best.epoch, True
