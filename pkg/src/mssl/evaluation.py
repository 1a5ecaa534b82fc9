"""Checkpoint evaluation, comparison-table rendering, and training-curve plots."""

import os
from dataclasses import dataclass, field, asdict

import numpy as np
import yaml

from .data import ImageStore
from .errors import InconsistentDatasets, IoError, MissingFile, MissingMask, EmptyList
from .model import build_model, load_parameters, predict_probs
from .objectives import confusion_counts, metric_pair, aggregate
from .training import arch_from_cfg


@dataclass
class MetricReport:
    run_id: str
    role: str
    dataset: str
    per_image: list                 # [(id, dice, iou)]
    m_dice: float
    m_iou: float
    image_size: tuple
    checkpoint_digest: str
    labeled_ratio: float = 0.0
    online: bool = False
    momentum: bool = False


def evaluate(ckpt, index, cfg, store=None):
    """Evaluate a checkpoint on a masked dataset index; deterministic."""
    if any(e[2] is None for e in index.entries):
        raise MissingMask(f"dataset {index.name!r} has unmasked entries")
    if store is None:
        store = ImageStore(index, cfg.data.image_size)
    model = build_model(arch_from_cfg(cfg), cfg.seed)
    load_parameters(model, ckpt.params)
    thr = cfg.ssl.pseudo_threshold
    per_image, pairs = [], []
    order = sorted(index.ids)
    bs = cfg.optim.batch_size
    for start in range(0, len(order), bs):
        chunk = order[start:start + bs]
        samples = [store.load(i, with_mask=True) for i in chunk]
        probs = predict_probs(model, np.stack([s.image for s in samples]))
        for s, pr in zip(samples, probs):
            pred = (pr >= thr).astype(np.uint8)
            m = metric_pair(confusion_counts(pred, s.mask))
            per_image.append((s.id, m.dice, m.iou))
            pairs.append(m)
    m_dice, m_iou = aggregate(pairs)
    role = ckpt.meta.get("role", "unknown")
    return MetricReport(run_id=cfg.run_id, role=role, dataset=index.name,
                        per_image=per_image, m_dice=m_dice, m_iou=m_iou,
                        image_size=tuple(cfg.data.image_size),
                        checkpoint_digest=ckpt.params.content_digest(),
                        labeled_ratio=cfg.data.labeled_ratio,
                        online=cfg.ssl.mode == "online",
                        momentum=role in ("momentum_teacher", "momentum_student"))


def save_report(report, path):
    doc = asdict(report)
    doc["image_size"] = list(report.image_size)
    doc["per_image"] = [[i, float(d), float(j)] for i, d, j in report.per_image]
    try:
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        with open(path, "w") as fh:
            fh.write(yaml.safe_dump(doc, sort_keys=True))
    except OSError as exc:
        raise IoError(f"cannot write report: {exc}")


def load_report(path):
    if not os.path.isfile(path):
        raise MissingFile(f"report not found: {path}")
    with open(path, "r") as fh:
        doc = yaml.safe_load(fh.read())
    doc["image_size"] = tuple(doc["image_size"])
    doc["per_image"] = [(i, d, j) for i, d, j in doc["per_image"]]
    return MetricReport(**doc)


@dataclass
class ComparisonTable:
    datasets: list
    rows: list      # [{"ratio", "online", "momentum", "cells": {ds: (iou, dice)},
                    #   "avg_iou", "avg_dice"}]


def render_comparison(reports, precomputed_rows=None):
    """Group reports into a Table-II-shaped grid: one row per
    (labeled ratio, online?, momentum?) with per-dataset mIoU/mDice and an
    unweighted Average column."""
    if precomputed_rows is None and not reports:
        raise EmptyList("no reports to render")
    groups = {}
    for r in reports:
        key = (r.labeled_ratio, r.online, r.momentum)
        groups.setdefault(key, {})[r.dataset] = (r.m_iou, r.m_dice)
    dataset_sets = {frozenset(cells) for cells in groups.values()}
    if len(dataset_sets) > 1:
        raise InconsistentDatasets("rows cover different dataset sets")
    datasets = sorted(next(iter(dataset_sets))) if groups else []
    rows = []
    for key in sorted(groups):
        ratio, online, momentum = key
        cells = groups[key]
        rows.append(make_row(ratio, online, momentum, datasets, cells))
    return ComparisonTable(datasets=datasets, rows=rows)


def make_row(ratio, online, momentum, datasets, cells):
    ious = [cells[d][0] for d in datasets]
    dices = [cells[d][1] for d in datasets]
    return {"ratio": ratio, "online": online, "momentum": momentum, "cells": cells,
            "avg_iou": float(np.mean(ious)), "avg_dice": float(np.mean(dices))}


def table_to_csv(table, path):
    lines = ["ratio,online,momentum,"
             + ",".join(f"{d}_mIoU,{d}_mDice" for d in table.datasets)
             + ",avg_mIoU,avg_mDice"]
    for r in table.rows:
        cells = ",".join(f"{r['cells'][d][0]:.6f},{r['cells'][d][1]:.6f}"
                         for d in table.datasets)
        lines.append(f"{r['ratio']},{int(r['online'])},{int(r['momentum'])},{cells},"
                     f"{r['avg_iou']:.6f},{r['avg_dice']:.6f}")
    text = "\n".join(lines) + "\n"
    try:
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        with open(path, "w") as fh:
            fh.write(text)
    except OSError as exc:
        raise IoError(f"cannot write table: {exc}")
    return text


def table_to_text(table):
    """Human-readable grid rendering."""
    header = ["ratio", "online", "momentum"]
    for d in table.datasets:
        header += [f"{d} mIoU", f"{d} mDice"]
    header += ["Avg mIoU", "Avg mDice"]
    body = []
    for r in table.rows:
        row = [f"{r['ratio']:.0%}", "yes" if r["online"] else "-",
               "yes" if r["momentum"] else "-"]
        for d in table.datasets:
            row += [f"{r['cells'][d][0]:.3f}", f"{r['cells'][d][1]:.3f}"]
        row += [f"{r['avg_iou']:.3f}", f"{r['avg_dice']:.3f}"]
        body.append(row)
    widths = [max(len(header[i]), *(len(row[i]) for row in body)) if body
              else len(header[i]) for i in range(len(header))]
    def fmt(row):
        return " | ".join(c.rjust(w) for c, w in zip(row, widths))
    sep = "-+-".join("-" * w for w in widths)
    return "\n".join([fmt(header), sep] + [fmt(row) for row in body]) + "\n"


def plot_history(history, path):
    """Loss and validation mDice curves per role as a PNG."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    roles = sorted({r["role"] for r in history})
    fig, (ax_loss, ax_dice) = plt.subplots(1, 2, figsize=(10, 4))
    for role in roles:
        rows = [r for r in history if r["role"] == role]
        epochs = [r["epoch"] for r in rows]
        losses = [r["loss"] for r in rows if r["loss"] != ""]
        if losses:
            ax_loss.plot(epochs[:len(losses)], losses, label=role)
        ax_dice.plot(epochs, [r["val_mDice"] for r in rows], label=role)
    ax_loss.set_title("training loss")
    ax_loss.set_xlabel("epoch")
    ax_dice.set_title("validation mDice")
    ax_dice.set_xlabel("epoch")
    for ax in (ax_loss, ax_dice):
        ax.legend()
    fig.tight_layout()
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def export_overlays(ckpt, index, cfg, out_dir, limit=8):
    """Debug panels (input, ground truth, prediction) per image."""
    from PIL import Image
    store = ImageStore(index, cfg.data.image_size)
    model = build_model(arch_from_cfg(cfg), cfg.seed)
    load_parameters(model, ckpt.params)
    os.makedirs(out_dir, exist_ok=True)
    thr = cfg.ssl.pseudo_threshold
    for sample_id in sorted(index.ids)[:limit]:
        s = store.load(sample_id, with_mask=True)
        pr = predict_probs(model, s.image[None])[0]
        pred = (pr >= thr).astype(np.uint8)
        gt_rgb = np.repeat(s.mask[:, :, None] * 255, 3, axis=2).astype(np.uint8)
        pr_rgb = np.repeat(pred[:, :, None] * 255, 3, axis=2).astype(np.uint8)
        panel = np.concatenate([(s.image * 255).astype(np.uint8), gt_rgb, pr_rgb], axis=1)
        Image.fromarray(panel).save(os.path.join(out_dir, f"{sample_id}.png"))
    return out_dir
