"""Labeled terminal images for the ranking CNN, and its training/evaluation.

Images are named ``<id>_<distance>[O].pgm``; the trailing ``O`` marks an
opened door (or a reached goal outside the door task). Labels are recovered
from the filename alone.
"""

import csv
import json
import logging
import os
import re
from dataclasses import dataclass, field

import numpy as np

from .envs import read_episode_log, read_pgm, write_pgm
from .her import N_GROUPS, distance_group
from .nn import cnn_from_preset, loss_categorical_crossentropy, make_optimizer

log = logging.getLogger(__name__)

OPEN_ANGLE = 0.05
FILENAME_RE = re.compile(r"^(\d+)_(\d+\.\d{4})(O?)\.pgm$")
SPLITS = ("train", "validation", "test")


class FilenameError(ValueError):
    pass


class DatasetError(ValueError):
    pass


def encode_filename(episode_id, distance, opened):
    if distance < 0:
        raise ValueError("distance must be non-negative")
    return f"{int(episode_id)}_{distance:.4f}{'O' if opened else ''}.pgm"


def decode_filename(filename):
    """``(episode_id, distance, opened)`` from an encoded image name."""
    m = FILENAME_RE.match(os.path.basename(filename))
    if m is None:
        raise FilenameError(f"malformed image filename: {filename!r}")
    return int(m.group(1)), float(m.group(2)), m.group(3) == "O"


def decode_and_classify(filename, spec, bands=(0.25, 0.5, 0.75)):
    _, distance, opened = decode_filename(filename)
    if opened:
        return 0
    return distance_group(distance, spec.workspace_diameter, bands)


def episode_outcome(record, env):
    """(distance, opened) used for naming a logged episode."""
    summary = record["summary"]
    if env.spec.name.startswith("door"):
        return summary["distance"], summary["hinge_angle"] > OPEN_ANGLE
    goal = np.asarray(record["goal"], dtype=float)
    d = float(np.linalg.norm(np.asarray(summary["achieved"], dtype=float) - goal))
    return d, d < env.spec.success_epsilon


@dataclass
class DatasetManifest:
    seed: int
    env: str
    images: list = field(default_factory=list)  # dicts: file, group, episode_id, source, split
    root: str = "."

    @property
    def counts(self):
        out = [0] * N_GROUPS
        for im in self.images:
            out[im["group"]] += 1
        return out

    def split(self, name):
        return [im for im in self.images if im["split"] == name]

    def to_dict(self):
        split_counts = {s: len(self.split(s)) for s in SPLITS}
        return {"seed": self.seed, "env": self.env, "counts": self.counts,
                "split_counts": split_counts, "images": self.images}

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            d = json.load(fh)
        return cls(d["seed"], d["env"], d["images"], os.path.dirname(os.path.abspath(path)))

    def load_split(self, name):
        items = self.split(name)
        if not items:
            return np.zeros((0, 1, 1, 1)), np.zeros(0, dtype=int)
        x = np.stack([read_pgm(os.path.join(self.root, im["file"])) for im in items])[:, None]
        y = np.array([im["group"] for im in items])
        return x, y


def assign_splits(groups, seed, fractions=(0.70, 0.15, 0.15)):
    """Split labels stratified by group; a group's first image always goes to train."""
    groups = np.asarray(groups)
    rng = np.random.default_rng(seed)
    labels = np.empty(len(groups), dtype=object)
    for g in np.unique(groups):
        idx = rng.permutation(np.flatnonzero(groups == g))
        n_train = max(1, int(round(fractions[0] * len(idx))))
        n_val = int(round(fractions[1] * len(idx)))
        labels[idx[:n_train]] = "train"
        labels[idx[n_train:n_train + n_val]] = "validation"
        labels[idx[n_train + n_val:]] = "test"
    return labels.tolist()


def generate_dataset(log_files, env, out_dir, seed=0, size=32):
    """Re-render every logged episode's terminal state, name it, and label it from the name."""
    if isinstance(log_files, (str, os.PathLike)):
        log_files = [log_files]
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot create {out_dir}: {exc}") from None
    images = []
    for path in log_files:
        for record in read_episode_log(path):
            last = record["transitions"][-1]["s_next"]
            if len(last) != env.spec.state_dim:
                raise DatasetError(f"{path}: logged state has {len(last)} dims, "
                                   f"{env.spec.name} expects {env.spec.state_dim}")
            distance, opened = episode_outcome(record, env)
            name = encode_filename(len(images), distance, opened)
            write_pgm(os.path.join(out_dir, name), env.render_terminal(np.asarray(last), size))
            images.append({"file": name, "group": decode_and_classify(name, env.spec),
                           "episode_id": record["episode_id"], "seed": record.get("seed", 0),
                           "source": os.path.basename(str(path))})
    for im, split in zip(images, assign_splits([im["group"] for im in images], seed)):
        im["split"] = split
    manifest = DatasetManifest(seed, env.spec.name, images, os.path.abspath(out_dir))
    manifest.save(os.path.join(out_dir, "manifest.json"))
    return manifest


@dataclass
class RankerTraining:
    """Ranker training hyperparameters: SGD, batch 16, 1000 samples per epoch, 500 epochs."""

    batch_size: int = 16
    samples_per_epoch: int = 1000
    epochs: int = 500
    lr: float = 0.001
    optimizer: str = "sgd"
    seed: int = 0


@dataclass
class RankerReport:
    history: list          # (epoch, train_loss, val_acc)
    best_epoch: int
    val_accuracy: float
    test_accuracy: float
    confusion: np.ndarray

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_acc"])
            for epoch, loss, acc in self.history:
                w.writerow([epoch, f"{loss:.6f}", f"{acc:.6f}"])


def predict(net, x, batch=256):
    out = []
    for i in range(0, len(x), batch):
        out.append(np.argmax(net.forward(x[i:i + batch]), axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=int)


def evaluate_ranker(net, x, y, n_classes=N_GROUPS):
    """Exact-match accuracy and confusion matrix (rows: true group, cols: predicted)."""
    if len(y) == 0:
        raise DatasetError("cannot evaluate on an empty split")
    pred = predict(net, x) if net is not None else None
    return score_predictions(y, pred, n_classes)


def score_predictions(y, pred, n_classes=N_GROUPS):
    confusion = np.zeros((n_classes, n_classes), dtype=int)
    np.add.at(confusion, (np.asarray(y), np.asarray(pred)), 1)
    return float(np.trace(confusion) / len(y)), confusion


def train_ranker(manifest, preset="desk", hyper=None, n_classes=N_GROUPS, log_every=50):
    """Train the ranking CNN on the manifest's train split; keep the best validation epoch."""
    hyper = hyper or RankerTraining()
    x_tr, y_tr = manifest.load_split("train")
    missing = sorted(set(range(n_classes)) - set(y_tr.tolist()))
    if missing:
        raise DatasetError(f"train split has no images for groups {missing}")
    x_val, y_val = manifest.load_split("validation")
    x_te, y_te = manifest.load_split("test")
    rng = np.random.default_rng(hyper.seed)
    net = cnn_from_preset(preset, n_classes, rng, input_size=x_tr.shape[-1])
    opt = make_optimizer(hyper.optimizer, net, hyper.lr)
    steps = max(1, hyper.samples_per_epoch // hyper.batch_size)
    best = (-1.0, 0, net.flat_params.copy())
    history = []
    for epoch in range(1, hyper.epochs + 1):
        total = 0.0
        for _ in range(steps):
            idx = rng.integers(0, len(y_tr), hyper.batch_size)
            probs = net.forward(x_tr[idx])
            loss, g = loss_categorical_crossentropy(probs, y_tr[idx])
            if not np.isfinite(loss):
                raise DatasetError(f"ranker training diverged at epoch {epoch}")
            net.backward(g, skip_softmax=True)
            opt.step()
            total += loss
        val_acc = evaluate_ranker(net, x_val, y_val, n_classes)[0] if len(y_val) else 0.0
        history.append((epoch, total / steps, val_acc))
        if val_acc > best[0]:
            best = (val_acc, epoch, net.flat_params.copy())
        if log_every and epoch % log_every == 0:
            log.info("ranker epoch %d loss %.4f val_acc %.3f", epoch, total / steps, val_acc)
    net.flat_params[...] = best[2]
    test_acc, confusion = evaluate_ranker(net, x_te, y_te, n_classes) if len(y_te) else (0.0, None)
    return net, RankerReport(history, best[1], best[0], test_acc, confusion)
