"""Frozen-feature linear probe, few-shot episodes, and classifier finetuning.

The probe is a multinomial logistic regression trained by full-batch
gradient descent from a zero initialization: fully deterministic, no rng
involved. Features are standardized with train-split statistics first.
Few-shot evaluation draws K-way (N support + 20 query)-per-class episodes
from precomputed features. Finetuning puts a 3-layer MLP head on the
pooled global feature and trains with the same optimizer machinery as
pretraining, optionally with the encoder frozen.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .model import extract_global_feature
from .rng import derive_rng
from .training import OptimizerState, Schedule, adamw_step, lr_at


@dataclass
class ProbeResult:
    accuracy: float
    per_class: list
    confusion: list  # rows true class, columns predicted
    num_train: int
    num_test: int

    def as_dict(self):
        return {
            "accuracy": self.accuracy,
            "per_class": self.per_class,
            "confusion": self.confusion,
            "num_train": self.num_train,
            "num_test": self.num_test,
        }


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def linear_probe(train_feats, train_labels, test_feats, test_labels,
                 iters=500, lr=0.1, weight_decay=1e-4):
    """Multinomial logistic regression on frozen features.

    Zero-initialized, full-batch gradient descent, weight decay on the
    weight matrix but not the bias row. Deterministic: two calls with the
    same arrays give the same result bit for bit.
    """
    Xtr = np.asarray(train_feats, dtype=np.float64)
    Xte = np.asarray(test_feats, dtype=np.float64)
    ytr = np.asarray(train_labels, dtype=np.int64)
    yte = np.asarray(test_labels, dtype=np.int64)
    if Xtr.ndim != 2 or Xtr.shape[0] != ytr.shape[0]:
        raise ContractError(f"train features {Xtr.shape} do not align with labels {ytr.shape}")
    classes = np.unique(np.concatenate([ytr, yte]))
    k = int(classes.max()) + 1
    if np.unique(ytr).size < 2:
        raise ConfigError("probe needs at least two classes in the train split")
    if Xtr.shape[0] < np.unique(ytr).size:
        raise ConfigError(f"{Xtr.shape[0]} train rows cannot cover {np.unique(ytr).size} classes")
    mu = Xtr.mean(axis=0)
    sd = np.maximum(Xtr.std(axis=0), 1e-6)
    Xtr = np.concatenate([(Xtr - mu) / sd, np.ones((Xtr.shape[0], 1))], axis=1)
    Xte = np.concatenate([(Xte - mu) / sd, np.ones((Xte.shape[0], 1))], axis=1)
    m = Xtr.shape[0]
    onehot = np.zeros((m, k))
    onehot[np.arange(m), ytr] = 1.0
    W = np.zeros((Xtr.shape[1], k))
    for _ in range(iters):
        G = Xtr.T @ (_softmax(Xtr @ W) - onehot) / m
        G[:-1] += weight_decay * W[:-1]
        W -= lr * G
    pred = (Xte @ W).argmax(axis=1)
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (yte, pred), 1)
    row = confusion.sum(axis=1)
    per_class = np.where(row > 0, confusion.diagonal() / np.maximum(row, 1), 0.0)
    accuracy = float(confusion.trace() / max(confusion.sum(), 1))
    return ProbeResult(accuracy=accuracy, per_class=[float(x) for x in per_class],
                       confusion=confusion.tolist(), num_train=m, num_test=int(yte.shape[0]))


def extract_features(model, records, threads=1):
    """Global feature per record, stacked (M, C_S); no masking, no tape.

    Samples are independent, so the thread count never changes the result.
    """
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as pool:
            feats = list(pool.map(lambda r: model.global_feature(r.points).data, records))
        return np.stack(feats)
    return np.stack([model.global_feature(r.points).data for r in records])


@dataclass
class FewShotEpisode:
    way: int
    shot: int
    train_rows: np.ndarray
    test_rows: np.ndarray
    run_seed: int


def sample_episode(labels, way, shot, seed, run, queries=20):
    """One K-way episode: `shot` support + `queries` query rows per class.

    Classes are drawn without replacement from the sorted label set; rows
    within a class are permuted and split, so support and query never
    overlap.
    """
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if way > classes.size:
        raise ConfigError(f"{way}-way episode impossible with {classes.size} classes")
    rng = derive_rng(seed, "episode", run)
    chosen = rng.choice(classes, size=way, replace=False)
    train_rows, test_rows = [], []
    for c in chosen:
        rows = np.flatnonzero(labels == c)
        if rows.size < shot + queries:
            raise ConfigError(
                f"class {int(c)} has {rows.size} samples, {shot}-shot needs {shot + queries}"
            )
        perm = rng.permutation(rows)
        train_rows.extend(perm[:shot])
        test_rows.extend(perm[shot:shot + queries])
    return FewShotEpisode(way=way, shot=shot, train_rows=np.asarray(train_rows),
                          test_rows=np.asarray(test_rows), run_seed=run)


def few_shot_eval(features, labels, way, shot, runs=10, seed=0, queries=20, **probe_kw):
    """Mean and std of probe accuracy over independent episodes."""
    if runs < 1:
        raise ConfigError("runs must be >= 1")
    labels = np.asarray(labels)
    accs = []
    for run in range(runs):
        ep = sample_episode(labels, way, shot, seed, run, queries=queries)
        remap = {int(c): i for i, c in enumerate(np.unique(labels[ep.train_rows]))}
        ytr = np.asarray([remap[int(l)] for l in labels[ep.train_rows]])
        yte = np.asarray([remap[int(l)] for l in labels[ep.test_rows]])
        res = linear_probe(features[ep.train_rows], ytr, features[ep.test_rows], yte, **probe_kw)
        accs.append(res.accuracy)
    accs = np.asarray(accs)
    return {"mean": float(accs.mean()), "std": float(accs.std()), "runs": [float(a) for a in accs],
            "way": way, "shot": shot, "queries": queries}


def head_shapes(feat_dim, num_classes):
    """3-layer MLP classifier head on the pooled global feature."""
    if feat_dim < 2 or num_classes < 2:
        raise ConfigError(f"head needs feat_dim >= 2 and >= 2 classes, got {feat_dim}/{num_classes}")
    h = feat_dim // 2
    return {
        "head.w0": (feat_dim, feat_dim), "head.b0": (feat_dim,),
        "head.w1": (feat_dim, h), "head.b1": (h,),
        "head.w2": (h, num_classes), "head.b2": (num_classes,),
    }


def init_head(feat_dim, num_classes, seed, dtype=np.float32):
    rng = np.random.default_rng(seed)
    head = {}
    for name, shape in head_shapes(feat_dim, num_classes).items():
        if len(shape) == 1:
            arr = np.zeros(shape)
        else:
            bound = math.sqrt(6.0 / (shape[0] + shape[1]))
            arr = rng.uniform(-bound, bound, size=shape)
        head[name] = T.tensor(arr.astype(dtype), requires_grad=True)
    return head


def head_forward(head, feats):
    h = T.gelu(T.add(T.matmul(feats, head["head.w0"]), head["head.b0"]))
    h = T.gelu(T.add(T.matmul(h, head["head.w1"]), head["head.b1"]))
    return T.add(T.matmul(h, head["head.w2"]), head["head.b2"])


@dataclass
class FinetuneConfig:
    epochs: int = 50
    batch_size: int = 32
    base_lr: float = 1e-4
    min_lr: float = 1e-6
    warmup_epochs: int = 5
    weight_decay: float = 0.05
    freeze_encoder: bool = False
    seed: int = 0

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.warmup_epochs >= self.epochs:
            raise ConfigError("warmup_epochs must be < epochs")
        return self


def finetune(model, train_records, val_records, num_classes, ftc):
    """Train the MLP head (and optionally the encoder) for classification.

    Masking is off throughout: features come from the full cloud. With
    freeze_encoder the encoder never enters the tape and its parameters
    are bit-identical afterwards; features are then precomputed once.
    Returns (ProbeResult on the validation split, head parameter dict).
    """
    ftc.validate()
    model.config.validate()
    records = sorted(train_records, key=lambda r: r.id)
    if len(records) < ftc.batch_size:
        raise ConfigError(f"batch_size {ftc.batch_size} exceeds train size {len(records)}")
    feat_dim = model.config.dims[-1]
    head = init_head(feat_dim, num_classes, ftc.seed)
    if ftc.freeze_encoder:
        for p in model.params.values():
            p.requires_grad = False
        cached = extract_features(model, records)
    trainable = dict(head) if ftc.freeze_encoder else {**model.params, **head}
    names = list(trainable)
    opt = OptimizerState.init(trainable, weight_decay=ftc.weight_decay)
    steps_per_epoch = len(records) // ftc.batch_size
    sched = Schedule(base_lr=ftc.base_lr, min_lr=ftc.min_lr, warmup_epochs=ftc.warmup_epochs,
                     total_epochs=ftc.epochs, steps_per_epoch=steps_per_epoch)
    step = 0
    for epoch in range(ftc.epochs):
        order = derive_rng(ftc.seed, "shuffle", epoch).permutation(len(records))
        for b in range(steps_per_epoch):
            batch = order[b * ftc.batch_size:(b + 1) * ftc.batch_size]
            grad_sum = None
            for i in batch:
                rec = records[int(i)]
                with T.Tape() as tape:
                    if ftc.freeze_encoder:
                        gf = T.tensor(cached[int(i)])
                    else:
                        gf = extract_global_feature(model.params, model.config, rec.points)
                    logits = T.reshape(head_forward(head, T.reshape(gf, (1, feat_dim))), (1, num_classes))
                    loss = T.softmax_cross_entropy(logits, np.asarray([rec.label]))
                grads = tape.gradients(loss, [trainable[n] for n in names])
                if grad_sum is None:
                    grad_sum = [g.copy() for g in grads]
                else:
                    for acc, g in zip(grad_sum, grads):
                        acc += g
            gd = {n: g / len(batch) for n, g in zip(names, grad_sum)}
            adamw_step(trainable, gd, opt, lr_at(step + 1, sched))
            step += 1
    if ftc.freeze_encoder:
        for p in model.params.values():
            p.requires_grad = True
    val = sorted(val_records, key=lambda r: r.id)
    feats = extract_features(model, val)
    logits = head_forward(head, T.tensor(feats.astype(np.float32))).data
    pred = logits.argmax(axis=1)
    yte = np.asarray([r.label for r in val])
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (yte, pred), 1)
    row = confusion.sum(axis=1)
    per_class = np.where(row > 0, confusion.diagonal() / np.maximum(row, 1), 0.0)
    result = ProbeResult(accuracy=float(confusion.trace() / max(confusion.sum(), 1)),
                         per_class=[float(x) for x in per_class],
                         confusion=confusion.tolist(),
                         num_train=len(records), num_test=len(val))
    return result, head
