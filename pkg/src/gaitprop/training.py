"""Training and evaluation loops with metrics logging."""

import logging
import os

import numpy as np

from . import credit
from .checkpoint import checkpoint_load, checkpoint_save
from .config import format_config, parse_config
from .data import batches, load_cifar10, load_idx_dir, standardize, synthetic_dataset, write_mnist_subset
from .diagnostics import angle_report
from .errors import GaitPropError
from .layers import build_network
from .linalg import resolve_dtype

log = logging.getLogger(__name__)

METRICS_HEADER = "step,epoch,layer,metric,value"


class TrainingError(GaitPropError):
    """A module error raised mid-run, tagged with where it happened."""

    def __init__(self, cause, step, layer=None):
        where = f"step {step}" + (f", layer {layer}" if layer is not None else "")
        super().__init__(f"{where}: {cause}")
        self.cause = cause
        self.step = step
        self.layer = layer


class MetricsLog:
    """Append-only ``(step, epoch, layer, metric, value)`` rows."""

    def __init__(self):
        self.rows = []

    def append(self, step, epoch, layer, metric, value):
        if self.rows and step < self.rows[-1][0]:
            raise ValueError(f"metrics must be appended in step order ({step} after {self.rows[-1][0]})")
        self.rows.append((int(step), int(epoch), layer, metric, float(value)))

    def __len__(self):
        return len(self.rows)

    def select(self, metric, layer=None):
        return [r for r in self.rows if r[3] == metric and (layer is None or r[2] == layer)]

    def values(self, metric, layer=None):
        return np.array([r[4] for r in self.select(metric, layer)])

    def to_csv(self):
        lines = [METRICS_HEADER]
        for step, epoch, layer, metric, value in self.rows:
            lines.append(f"{step},{epoch},{layer},{metric},{value!r}")
        return "\n".join(lines) + "\n"

    def write_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_csv())

    @classmethod
    def read_csv(cls, path):
        out = cls()
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().strip()
            if header != METRICS_HEADER:
                raise ValueError(f"unexpected metrics header {header!r}")
            for line in fh:
                step, epoch, layer, metric, value = line.rstrip("\n").split(",")
                layer = layer if layer == "all" else int(layer)
                out.rows.append((int(step), int(epoch), layer, metric, float(value)))
        return out


def evaluate(net, dataset, k=1, batch_size=1000):
    """Fraction of samples whose true class is among the top-``k`` logits.

    Ties are broken towards the lower class index, so the result is
    deterministic.
    """
    n = len(dataset)
    if n == 0:
        return 0.0
    hits = 0
    for start in range(0, n, batch_size):
        x = dataset.inputs[start : start + batch_size]
        y = dataset.labels[start : start + batch_size]
        logits = net.predict(x)
        top = np.argsort(-logits, axis=1, kind="stable")[:, :k]
        hits += int((top == y[:, None]).any(axis=1).sum())
    return hits / n


def load_datasets(cfg):
    """Return ``(train, test)`` for a config, honouring precision and limits."""
    if cfg.dataset == "synthetic":
        train = synthetic_dataset(cfg.classes, cfg.features, cfg.per_class, cfg.seed, cfg.separation, "train")
        test = synthetic_dataset(cfg.classes, cfg.features, cfg.test_per_class, cfg.seed, cfg.separation, "test")
    elif cfg.dataset == "idx":
        train, test = load_idx_dir(cfg.path)
    elif cfg.dataset == "mnist5k":
        path = cfg.path or os.path.join(os.path.expanduser("~"), ".cache", "gaitprop", "mnist5k")
        if not os.path.exists(os.path.join(path, "test-labels.idx")):
            write_mnist_subset(path)
        train, test = load_idx_dir(path)
    elif cfg.dataset == "cifar10":
        train, test = load_cifar10(cfg.path)
    else:
        raise GaitPropError(f"unknown dataset {cfg.dataset!r}")
    if cfg.train_limit:
        train = train.subset(np.arange(min(cfg.train_limit, len(train))))
    if cfg.standardize:
        train, test = standardize(train, test)
    dtype = resolve_dtype(cfg.precision)
    train.inputs = train.inputs.astype(dtype)
    test.inputs = test.inputs.astype(dtype)
    return train, test


class Trainer:
    """Holds the mutable state of one run so it can be checkpointed."""

    def __init__(self, cfg, net=None, opt_state=None, step=0):
        self.cfg = cfg
        self.dtype = resolve_dtype(cfg.precision)
        self.net = net or build_network(cfg.input_shape, cfg.layers, cfg.slope, cfg.seed, self.dtype)
        if cfg.overlap_correction != "subtract":
            for layer in self.net.layers:
                if layer.kind == "conv":
                    layer.correction = cfg.overlap_correction
        self.opt = opt_state or credit.OptimizerState.for_network(
            self.net, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps
        )
        self.feedback = credit.FeedbackMatrices.for_network(self.net, cfg.feedback_seed) if cfg.algorithm == "fa" else None
        self.step = step
        self.log = MetricsLog()
        self.targets = None

    def updates_for(self, cache, y):
        cfg, net = self.cfg, self.net
        alg = cfg.algorithm
        self.targets = None
        if alg == "bp":
            return credit.bp_backward(net, cache, y)
        if alg == "fa":
            return credit.fa_backward(net, cache, y, self.feedback)
        t_L = credit.output_target(cache.logits, y, cfg.beta)
        if alg == "tp":
            return credit.tp_backward(net, cache, t_L)
        mode = "vanilla" if alg == "vgp" else "normalized"
        up, self.targets = credit.gp_backward(
            net, cache, t_L, mode=mode, eta=cfg.eta, gamma=cfg.gamma, norm_power=cfg.norm_power
        )
        return up

    def train_step(self, x, labels, epoch):
        cfg, net = self.cfg, self.net
        step = self.step
        y = credit.one_hot(labels, net.n_classes, self.dtype)
        try:
            cache = net.forward(x)
            up = self.updates_for(cache, y)
            up.step = step
            self.log.append(step, epoch, "all", "loss", credit.cross_entropy(cache.logits, y))
            measure = step % cfg.angle_stride == 0
            if measure and cfg.angles and cfg.algorithm != "bp":
                ref = credit.bp_backward(net, cache, y)
                for rec in angle_report(up, ref, step, cfg.include_bias):
                    self.log.append(step, epoch, rec.layer, "angle_deg", rec.angle)
            if measure and self.targets is not None:
                for l, d in enumerate(self.targets.distances):
                    self.log.append(step, epoch, l, "target_distance", d)
            if cfg.algorithm in ("gp", "vgp") and cfg.kappa > 0:
                up = credit.with_orthogonality(net, up, cfg.kappa)
            net.set_params(credit.adam_step(self.opt, net.params(), up))
            if measure:
                for l, layer in enumerate(net.layers):
                    self.log.append(step, epoch, l, "ortho_residual", credit.ortho_residual(layer.weight_matrix()))
        except GaitPropError as exc:
            raise TrainingError(exc, step, getattr(exc, "layer", None)) from exc
        self.step += 1

    def epoch_seed(self, epoch):
        return [int(self.cfg.seed), 0xE90C, int(epoch)]

    def run(self, train, test, stop_at=None, checkpoint_path=None):
        """Train until the configured epochs (or ``max_steps``) are done.

        ``stop_at`` halts after that global step count (used to take a
        mid-run checkpoint); resuming continues from ``self.step``.
        """
        cfg = self.cfg
        flatten = len(cfg.input_shape) == 1
        total = cfg.max_steps or None
        per_epoch = -(-len(train) // cfg.batch_size)
        start_epoch, skip = divmod(self.step, per_epoch)
        for epoch in range(start_epoch, cfg.epochs):
            stream = batches(train, cfg.batch_size, self.epoch_seed(epoch), flatten=flatten)
            for i, (x, labels) in enumerate(stream):
                if epoch == start_epoch and i < skip:
                    continue
                if (total is not None and self.step >= total) or (stop_at is not None and self.step >= stop_at):
                    break
                self.train_step(x, labels, epoch)
            else:
                last = self.step - 1
                self.log.append(last, epoch, "all", "train_acc", evaluate(self.net, train))
                self.log.append(last, epoch, "all", "test_acc", evaluate(self.net, test))
                log.info("epoch %d: train %.4f test %.4f", epoch, *self.log.values("train_acc")[-1:], *self.log.values("test_acc")[-1:])
                continue
            break
        if checkpoint_path:
            self.save(checkpoint_path)
        return self.log

    def save(self, path):
        checkpoint_save(self.net, self.opt, path, extra={"step": self.step, "config": format_config(self.cfg)})

    @classmethod
    def resume(cls, path):
        net, opt, extra = checkpoint_load(path)
        cfg = parse_config(extra["config"])
        return cls(cfg, net=net, opt_state=opt, step=int(extra["step"]))


def run_training(cfg, out_dir=None, datasets=None):
    """Train per ``cfg`` and return the :class:`MetricsLog`.

    With ``out_dir`` the metrics CSV and a final checkpoint are written
    there.
    """
    train, test = datasets or load_datasets(cfg)
    trainer = Trainer(cfg)
    ckpt = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        ckpt = os.path.join(out_dir, "checkpoint.bin")
    metrics = trainer.run(train, test, checkpoint_path=ckpt)
    if out_dir:
        metrics.write_csv(os.path.join(out_dir, "metrics.csv"))
    return metrics
