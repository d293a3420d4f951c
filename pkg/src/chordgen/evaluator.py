"""Teacher-forced evaluation: loss, perplexity, top-k, CSV and reports.

Next-token metrics are reported in two variants per split: ``all``
(every non-PAD target) and ``chord`` (chord-token targets only, the
headline variant, matching evaluation over held-out chord events).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import AllMasked, Tensor
from .model import Model, ModelCheckpoint
from .tokenizer import CHORD_BASE, PAD, Vocabulary

CSV_HEADER = "epoch,split,loss,ppl,top1,top5,n_positions"


class EmptySplit(ValueError):
    pass


@dataclass(frozen=True)
class EvalRow:
    epoch: int
    split: str
    loss: float       # nats per token
    ppl: float        # exp(loss)
    top1: float       # percent
    top5: float       # percent
    n_positions: int

    def __post_init__(self) -> None:
        if self.n_positions > 0:
            assert abs(self.ppl - math.exp(self.loss)) <= 1e-9 * max(1.0, self.ppl)
        assert 0.0 <= self.top1 <= self.top5 <= 100.0

    def csv_line(self) -> str:
        return (f"{self.epoch},{self.split},{self.loss:.6f},{self.ppl:.6f},"
                f"{self.top1:.6f},{self.top5:.6f},{self.n_positions}")


def topk_accuracy(logits: np.ndarray, targets: np.ndarray, k: int,
                  mask: np.ndarray) -> float:
    """Percent of unmasked positions whose target ranks in the top k.

    Logit ties resolve to the lower token id (stable sort on -logit).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise AllMasked("no unmasked positions")
    order = np.argsort(-logits, axis=-1, kind="stable")
    hits = (order[:, :k] == np.asarray(targets)[:, None]).any(axis=-1)
    return 100.0 * int((hits & mask).sum()) / n


def _position_stats(logits: np.ndarray, targets: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-position (nll, top1 hit, top5 hit) under the id tie-break."""
    m = logits.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(logits - m).sum(axis=-1, keepdims=True))
    nll = lse[:, 0] - logits[np.arange(len(targets)), targets]
    order = np.argsort(-logits, axis=-1, kind="stable")
    hit1 = order[:, 0] == targets
    hit5 = (order[:, :5] == targets[:, None]).any(axis=-1)
    return nll, hit1, hit5


def evaluate_split(ckpt: ModelCheckpoint, seqs: list[list[int]],
                   vocab: Vocabulary, *, split: str = "split", epoch: int = 0,
                   positions: str = "chord", micro_batch: int = 64) -> EvalRow:
    """Metrics over all next-token positions of a held-out split.

    ``positions`` selects "chord" (headline) or "all" targets.
    Sequences are evaluated in a canonical order (sorted by length and
    content) in equal-length batches, so the result is independent of
    input order and duplication-consistent.
    """
    if not seqs:
        raise EmptySplit(f"empty split {split!r}")
    if positions not in ("chord", "all"):
        raise ValueError(f"unknown positions selector {positions!r}")
    eval_params = {k: Tensor(t.data) for k, t in ckpt.params.items()}
    model = Model(ckpt.config, eval_params)

    canonical = sorted(range(len(seqs)), key=lambda i: (len(seqs[i]), tuple(seqs[i])))
    total_nll, hits1, hits5, n = 0.0, 0, 0, 0
    batch: list[list[int]] = []

    def flush(batch):
        nonlocal total_nll, hits1, hits5, n
        ids = np.array(batch, dtype=np.int64)
        logits = model.forward(ids[:, :-1]).data
        targets = ids[:, 1:]
        mask = targets != PAD
        if positions == "chord":
            mask &= targets >= CHORD_BASE
        flat_mask = mask.reshape(-1)
        if not flat_mask.any():
            return
        flat_logits = logits.reshape(-1, ckpt.config.vocab_size)[flat_mask]
        flat_targets = targets.reshape(-1)[flat_mask]
        nll, hit1, hit5 = _position_stats(flat_logits, flat_targets)
        total_nll += float(nll.sum())
        hits1 += int(hit1.sum())
        hits5 += int(hit5.sum())
        n += len(flat_targets)

    for i in canonical:
        if batch and (len(seqs[i]) != len(batch[0]) or len(batch) >= micro_batch):
            flush(batch)
            batch = []
        batch.append(seqs[i])
    if batch:
        flush(batch)

    if n == 0:
        raise EmptySplit(f"split {split!r} has no {positions} targets")
    loss = total_nll / n
    return EvalRow(epoch=epoch, split=split, loss=loss, ppl=math.exp(loss),
                   top1=100.0 * hits1 / n, top5=100.0 * hits5 / n, n_positions=n)


def write_eval_csv(rows: list[EvalRow], path: str | Path) -> None:
    """Fixed 6-decimal CSV with LF endings; byte-identical for equal rows."""
    lines = [CSV_HEADER] + [r.csv_line() for r in rows]
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def append_eval_csv(row: EvalRow, path: str | Path) -> None:
    path = Path(path)
    new_file = not path.exists()
    with open(path, "a", encoding="utf-8", newline="\n") as f:
        if new_file:
            f.write(CSV_HEADER + "\n")
        f.write(row.csv_line() + "\n")


def dominates(x: tuple[float, float], y: tuple[float, float]) -> bool:
    """True when x is >= y on both axes and strictly better on one."""
    return x[0] >= y[0] and x[1] >= y[1] and (x[0] > y[0] or x[1] > y[1])


def report_sweep(runs: dict[str, list], baseline: tuple[EvalRow, EvalRow],
                 out_dir: str | Path | None = None, *,
                 source_split: str = "pop_test/chord",
                 target_split: str = "jazz_test/chord",
                 slack: float = 3.0) -> dict:
    """Best-epoch, delta, trend, and Pareto views over a sweep.

    ``runs`` maps run name to its EpochRecord list; ``baseline`` is the
    (source, target) EvalRow pair of the starting checkpoint. Returns
    the bundle as a dict and, when ``out_dir`` is given, writes
    report.md plus one JSON series per figure analog.
    """
    from .trainer import select_best_epoch  # local import; trainer uses evaluator

    if not runs:
        raise ValueError("report_sweep needs at least one run")
    base_source, base_target = baseline

    best: dict[str, dict] = {}
    trends: dict[str, list[dict]] = {}
    for name, records in runs.items():
        idx, unsatisfiable = select_best_epoch(
            records, base_source.top1, slack=slack,
            source_split=source_split, target_split=target_split)
        record = next(r for r in records if r.epoch == idx)
        best[name] = {
            "epoch": idx,
            "constraint_unsatisfiable": unsatisfiable,
            "source": record.rows[source_split],
            "target": record.rows[target_split],
        }
        trends[name] = [
            {"epoch": r.epoch,
             "train_loss": r.train_loss,
             "source_top1": r.rows[source_split].top1,
             "target_top1": r.rows[target_split].top1,
             "source_ppl": r.rows[source_split].ppl,
             "target_ppl": r.rows[target_split].ppl}
            for r in records
        ]

    deltas = {
        name: {
            "source_top1": entry["source"].top1 - base_source.top1,
            "target_top1": entry["target"].top1 - base_target.top1,
        }
        for name, entry in best.items()
    }

    points = {name: (entry["source"].top1, entry["target"].top1)
              for name, entry in best.items()}
    dominated: dict[str, list[str]] = {}
    for name, pt in points.items():
        dominators = sorted(other for other, opt in points.items()
                            if other != name and dominates(opt, pt))
        if dominators:
            dominated[name] = dominators
    frontier = sorted(name for name in points if name not in dominated)

    bundle = {
        "baseline": {"source": base_source, "target": base_target},
        "best": best,
        "deltas": deltas,
        "trends": trends,
        "pareto": {"frontier": frontier, "dominated": dominated},
    }
    if out_dir is not None:
        _write_report_files(bundle, Path(out_dir), source_split, target_split)
    return bundle


def _row_json(row: EvalRow) -> dict:
    return {"epoch": row.epoch, "split": row.split, "loss": row.loss,
            "ppl": row.ppl, "top1": row.top1, "top5": row.top5,
            "n_positions": row.n_positions}


def _write_report_files(bundle: dict, out_dir: Path, source_split: str,
                        target_split: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    base_source = bundle["baseline"]["source"]
    base_target = bundle["baseline"]["target"]

    lines = ["# Fine-tune sweep report", "",
             f"Source axis: `{source_split}` | target axis: `{target_split}`", "",
             "## Best-epoch metrics", "",
             "| run | epoch | source top-1 | source top-5 | target top-1 "
             "| target top-5 | target ppl |",
             "|---|---|---|---|---|---|---|"]
    base = bundle["baseline"]
    lines.append(
        f"| baseline | - | {base_source.top1:.2f} | {base_source.top5:.2f} "
        f"| {base_target.top1:.2f} | {base_target.top5:.2f} "
        f"| {base_target.ppl:.3f} |")
    for name, entry in bundle["best"].items():
        s, t = entry["source"], entry["target"]
        flag = " *" if entry["constraint_unsatisfiable"] else ""
        lines.append(f"| {name}{flag} | {entry['epoch']} | {s.top1:.2f} "
                     f"| {s.top5:.2f} | {t.top1:.2f} | {t.top5:.2f} "
                     f"| {t.ppl:.3f} |")
    lines += ["", "## Deltas vs baseline (positive = better)", "",
              "| run | d source top-1 | d target top-1 |", "|---|---|---|"]
    for name, d in bundle["deltas"].items():
        lines.append(f"| {name} | {d['source_top1']:+.2f} "
                     f"| {d['target_top1']:+.2f} |")
    lines += ["", "## Pareto classification", "",
              f"Frontier: {', '.join(bundle['pareto']['frontier']) or '-'}", ""]
    for name, doms in bundle["pareto"]["dominated"].items():
        lines.append(f"- {name} is dominated by {', '.join(doms)}")
    (out_dir / "report.md").write_text("\n".join(lines) + "\n", encoding="utf-8")

    fig1 = [{"run": name,
             "source_top1": entry["source"].top1,
             "target_top1": entry["target"].top1,
             "epoch": entry["epoch"]}
            for name, entry in bundle["best"].items()]
    (out_dir / "fig1_accuracy_vs_mix.json").write_text(
        json.dumps(fig1, indent=2) + "\n", encoding="utf-8")
    (out_dir / "fig2_trends.json").write_text(
        json.dumps(bundle["trends"], indent=2) + "\n", encoding="utf-8")
    fig3 = {"points": {name: {"source_top1": entry["source"].top1,
                              "target_top1": entry["target"].top1}
                       for name, entry in bundle["best"].items()},
            "frontier": bundle["pareto"]["frontier"],
            "dominated": bundle["pareto"]["dominated"],
            "baseline": {"source_top1": base_source.top1,
                         "target_top1": base_target.top1}}
    (out_dir / "fig3_pareto.json").write_text(
        json.dumps(fig3, indent=2) + "\n", encoding="utf-8")
