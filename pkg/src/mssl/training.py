"""Teacher training, pseudo-label generation, and offline/online student training."""

import csv
import hashlib
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .config import config_digest
from .data import weak_augment, strong_augment
from .errors import (EmptyLabeledSet, DivergedLoss, EmptyHistory, UnknownId, IoError)
from .model import (ArchSpec, build_model, forward_logits, predict_probs,
                    named_parameters_map, load_parameters)
from .momentum import MomentumTracker, init_momentum, ema_update, Checkpoint
from .objectives import per_sample_tversky, confusion_counts, metric_pair, aggregate


@dataclass
class PseudoLabelStore:
    masks: dict                  # id -> H x W uint8 mask
    generator_epoch: int
    generator_digest: str        # content digest of the MT ParamMap used
    threshold: float

    def content_digest(self):
        h = hashlib.sha256()
        h.update(self.generator_digest.encode())
        for sample_id in sorted(self.masks):
            h.update(sample_id.encode())
            h.update(np.ascontiguousarray(self.masks[sample_id], dtype=np.uint8).tobytes())
        return h.hexdigest()


@dataclass
class TeacherArtifacts:
    teacher: Checkpoint
    momentum_teacher: Checkpoint
    history: list


@dataclass
class StudentArtifacts:
    student: Checkpoint
    momentum_student: Checkpoint     # None when not tracked
    momentum_teacher: Checkpoint     # final MT state (input MT for offline runs)
    history: list
    pseudo_digests: list = field(default_factory=list)   # (epoch, store digest)

    @property
    def final(self):
        return self.momentum_student if self.momentum_student is not None else self.student


def arch_from_cfg(cfg):
    return ArchSpec(family=cfg.model.family, levels=cfg.model.levels,
                    base_width=cfg.model.base_width,
                    pretrained_encoder=cfg.model.pretrained_encoder,
                    encoder_weights=cfg.model.encoder_weights)


def _rng_streams(seed):
    data_rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(100,)))
    aug_rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(200,)))
    return data_rng, aug_rng


def evaluate_on_ids(model, store, ids, cfg):
    """Mean per-image (dice, iou) of thresholded eval-mode predictions."""
    pairs = []
    thr = cfg.ssl.pseudo_threshold
    bs = cfg.optim.batch_size
    order = sorted(ids)
    for start in range(0, len(order), bs):
        chunk = order[start:start + bs]
        samples = [store.load(i, with_mask=True) for i in chunk]
        images = np.stack([s.image for s in samples])
        probs = predict_probs(model, images)
        for s, pr in zip(samples, probs):
            pred = (pr >= thr).astype(np.uint8)
            pairs.append(metric_pair(confusion_counts(pred, s.mask)))
    return aggregate(pairs)


def _train_one_epoch(model, optimizer, plan, cfg, step_hook=None):
    """plan: list of (images B, targets B, weights B) numpy batches. Returns mean loss."""
    model.train()
    losses = []
    a, b, s = (cfg.loss.tversky_fp_weight, cfg.loss.tversky_fn_weight, cfg.loss.smooth)
    for images, targets, weights in plan:
        w = torch.from_numpy(weights.astype(np.float32))
        if float(w.sum()) == 0.0:
            continue
        logits = forward_logits(model, images)
        probs = torch.sigmoid(logits)
        per = per_sample_tversky(probs, torch.from_numpy(targets.astype(np.float32)),
                                 a=a, b=b, smooth=s)
        loss = (per * w).sum() / w.sum()
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        losses.append(float(loss.detach()))
        if step_hook is not None:
            step_hook()
    if losses and not np.isfinite(losses).all():
        raise DivergedLoss("non-finite training loss")
    return float(np.mean(losses)) if losses else 0.0


def _assemble_plan(tagged_ids, store, pseudo, cfg, data_rng, aug_rng):
    """Build shuffled batches from (id, labeled?) tags.

    Labeled samples get weak augmentation and ground-truth masks; unlabeled get
    strong augmentation and pseudo masks scaled by unsup_loss_weight.
    """
    order = list(tagged_ids)
    perm = data_rng.permutation(len(order))
    order = [order[i] for i in perm]
    bs = cfg.optim.batch_size
    w_unsup = cfg.ssl.unsup_loss_weight
    plan = []
    for start in range(0, len(order), bs):
        images, targets, weights = [], [], []
        for sample_id, labeled in order[start:start + bs]:
            if labeled:
                sample = store.load(sample_id, with_mask=True)
                sample = weak_augment(sample, aug_rng, cfg.augment)
                weight = 1.0
            else:
                if sample_id not in pseudo.masks:
                    raise UnknownId(f"no pseudo label for {sample_id!r}")
                sample = store.load(sample_id, with_mask=False)
                sample.mask = pseudo.masks[sample_id].copy()
                sample = strong_augment(sample, aug_rng, cfg.augment)
                weight = w_unsup
            assert set(np.unique(sample.mask)) <= {0, 1}
            images.append(sample.image)
            targets.append(sample.mask.astype(np.float32))
            weights.append(weight)
        plan.append((np.stack(images), np.stack(targets), np.array(weights)))
    return plan


def _checkpoint(params, role, epoch, cfg, val_mdice, alpha=None):
    meta = {"role": role, "epoch": epoch, "config_digest": config_digest(cfg),
            "val_mDice": val_mdice}
    if alpha is not None:
        meta["alpha"] = alpha
    return Checkpoint(params=params.copy(), meta=meta)


class _Best:
    def __init__(self):
        self.score = -1.0
        self.epoch = -1
        self.params = None

    def offer(self, score, epoch, params):
        if score > self.score:  # strict: ties keep the earliest epoch
            self.score, self.epoch, self.params = score, epoch, params.copy()


def train_teacher(cfg, splits, store):
    """Supervised teacher training on D_sup with an EMA momentum copy."""
    if not splits.labeled_ids:
        raise EmptyLabeledSet("no labeled samples")
    torch.manual_seed(cfg.seed)
    arch = arch_from_cfg(cfg)
    model = build_model(arch, cfg.seed)
    eval_model = build_model(arch, cfg.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.optim.learning_rate)
    mt = init_momentum(named_parameters_map(model), cfg.ssl.momentum_ratio)
    data_rng, aug_rng = _rng_streams(cfg.seed)
    alpha = cfg.ssl.momentum_ratio
    history = []
    best = {"teacher": _Best(), "momentum_teacher": _Best()}
    epochs = cfg.optim.epochs_teacher
    if epochs == 0:
        params = named_parameters_map(model)
        dice, _ = evaluate_on_ids(model, store, splits.val_ids, cfg)
        return TeacherArtifacts(
            teacher=_checkpoint(params, "teacher", -1, cfg, dice),
            momentum_teacher=_checkpoint(mt.shadow, "momentum_teacher", -1, cfg, dice,
                                         alpha=alpha),
            history=[])
    interval = cfg.ssl.ema_interval
    for epoch in range(epochs):
        tagged = [(i, True) for i in splits.labeled_ids]
        plan = _assemble_plan(tagged, store, None, cfg, data_rng, aug_rng)
        hook = None
        if interval != "epoch":
            counter = {"n": 0}

            def hook():
                counter["n"] += 1
                if counter["n"] % interval == 0:
                    ema_update(mt, named_parameters_map(model))
        loss = _train_one_epoch(model, optimizer, plan, cfg, step_hook=hook)
        if interval == "epoch":
            ema_update(mt, named_parameters_map(model))
        t_dice, t_iou = evaluate_on_ids(model, store, splits.val_ids, cfg)
        load_parameters(eval_model, mt.shadow)
        m_dice, m_iou = evaluate_on_ids(eval_model, store, splits.val_ids, cfg)
        history.append({"epoch": epoch, "role": "teacher", "loss": loss,
                        "val_mDice": t_dice, "val_mIoU": t_iou})
        history.append({"epoch": epoch, "role": "momentum_teacher", "loss": "",
                        "val_mDice": m_dice, "val_mIoU": m_iou})
        best["teacher"].offer(t_dice, epoch, named_parameters_map(model))
        best["momentum_teacher"].offer(m_dice, epoch, mt.shadow)
    return TeacherArtifacts(
        teacher=_checkpoint(best["teacher"].params, "teacher",
                            best["teacher"].epoch, cfg, best["teacher"].score),
        momentum_teacher=_checkpoint(best["momentum_teacher"].params, "momentum_teacher",
                                     best["momentum_teacher"].epoch, cfg,
                                     best["momentum_teacher"].score, alpha=alpha),
        history=history)


def generate_pseudo_labels(mt_params, unlabeled_ids, store, threshold, model,
                           generator_epoch=0):
    """Threshold eval-mode momentum-teacher predictions on un-augmented images."""
    load_parameters(model, mt_params)
    masks = {}
    order = sorted(unlabeled_ids)
    bs = 16
    for start in range(0, len(order), bs):
        chunk = order[start:start + bs]
        images = np.stack([store.load(i, with_mask=False).image for i in chunk])
        probs = predict_probs(model, images)
        for sample_id, pr in zip(chunk, probs):
            masks[sample_id] = (pr >= threshold).astype(np.uint8)
    return PseudoLabelStore(masks=masks, generator_epoch=generator_epoch,
                            generator_digest=mt_params.content_digest(),
                            threshold=threshold)


def _train_student(cfg, splits, store, mt0, online):
    if not splits.labeled_ids:
        raise EmptyLabeledSet("no labeled samples")
    torch.manual_seed(cfg.seed)
    arch = arch_from_cfg(cfg)
    student = build_model(arch, cfg.seed)
    if cfg.ssl.student_init == "teacher":
        load_parameters(student, mt0.params)
    helper = build_model(arch, cfg.seed)   # scratch net for pseudo gen / shadow eval
    optimizer = torch.optim.Adam(student.parameters(), lr=cfg.optim.learning_rate)
    alpha = cfg.ssl.momentum_ratio
    mt = init_momentum(mt0.params, alpha)
    ms = init_momentum(named_parameters_map(student), alpha) \
        if cfg.ssl.track_momentum_student else None
    data_rng, aug_rng = _rng_streams(cfg.seed)
    thr = cfg.ssl.pseudo_threshold
    use_unlabeled = cfg.ssl.unsup_loss_weight > 0 and splits.unlabeled_ids
    history, pseudo_digests = [], []
    best_s, best_ms = _Best(), _Best()
    pseudo = None
    interval = cfg.ssl.ema_interval
    for epoch in range(cfg.optim.epochs_student):
        if use_unlabeled and (online or pseudo is None):
            mt_updates_before = mt.updates
            pseudo = generate_pseudo_labels(mt.shadow, splits.unlabeled_ids, store, thr,
                                            helper, generator_epoch=epoch if online else 0)
            assert mt.updates == mt_updates_before  # labels precede any MT update
            pseudo_digests.append((epoch, pseudo.content_digest()))
        tagged = [(i, True) for i in splits.labeled_ids]
        if use_unlabeled:
            tagged += [(i, False) for i in splits.unlabeled_ids]
        plan = _assemble_plan(tagged, store, pseudo, cfg, data_rng, aug_rng)
        hook = None
        if interval != "epoch" and (online or ms is not None):
            counter = {"n": 0}

            def hook():
                counter["n"] += 1
                if counter["n"] % interval == 0:
                    s_now = named_parameters_map(student)
                    if online:
                        ema_update(mt, s_now)   # step order: MT then MS
                    if ms is not None:
                        ema_update(ms, s_now)
        loss = _train_one_epoch(student, optimizer, plan, cfg, step_hook=hook)
        s_params = named_parameters_map(student)
        if interval == "epoch":
            if online:
                ema_update(mt, s_params)        # step order: MT then MS
            if ms is not None:
                ema_update(ms, s_params)
        s_dice, s_iou = evaluate_on_ids(student, store, splits.val_ids, cfg)
        history.append({"epoch": epoch, "role": "student", "loss": loss,
                        "val_mDice": s_dice, "val_mIoU": s_iou})
        best_s.offer(s_dice, epoch, s_params)
        if ms is not None:
            load_parameters(helper, ms.shadow)
            ms_dice, ms_iou = evaluate_on_ids(helper, store, splits.val_ids, cfg)
            history.append({"epoch": epoch, "role": "momentum_student", "loss": "",
                            "val_mDice": ms_dice, "val_mIoU": ms_iou})
            best_ms.offer(ms_dice, epoch, ms.shadow)
    if best_s.params is None:   # zero-epoch run
        best_s.params = named_parameters_map(student)
        best_s.score, _ = evaluate_on_ids(student, store, splits.val_ids, cfg)
        best_s.epoch = -1
        if ms is not None:
            best_ms.params, best_ms.score, best_ms.epoch = ms.shadow.copy(), best_s.score, -1
    ms_ckpt = None
    if ms is not None:
        ms_ckpt = _checkpoint(best_ms.params, "momentum_student", best_ms.epoch, cfg,
                              best_ms.score, alpha=alpha)
    return StudentArtifacts(
        student=_checkpoint(best_s.params, "student", best_s.epoch, cfg, best_s.score),
        momentum_student=ms_ckpt,
        momentum_teacher=_checkpoint(mt.shadow, "momentum_teacher",
                                     cfg.optim.epochs_student - 1, cfg, -1.0, alpha=alpha),
        history=history, pseudo_digests=pseudo_digests)


def train_student_offline(cfg, splits, store, mt0):
    """Student training with pseudo labels generated once from a frozen MT_0."""
    return _train_student(cfg, splits, store, mt0, online=False)


def train_student_online(cfg, splits, store, mt0):
    """Student training with per-epoch label regeneration and EMA teacher updates."""
    return _train_student(cfg, splits, store, mt0, online=True)


def select_best(history, role):
    """Epoch with the highest val_mDice for a role; ties go to the earliest epoch."""
    rows = [r for r in history if r["role"] == role]
    if not rows:
        raise EmptyHistory(f"no history rows for role {role!r}")
    best = max(rows, key=lambda r: (r["val_mDice"], -r["epoch"]))
    return best["epoch"]


def write_history(history, path):
    try:
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["epoch", "role", "loss",
                                                    "val_mDice", "val_mIoU"])
            writer.writeheader()
            for row in history:
                writer.writerow(row)
    except OSError as exc:
        raise IoError(f"cannot write history: {exc}")
