"""Experiment configuration and the training loop behind ``proxconnect train``."""
from __future__ import annotations

import csv
import dataclasses
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import BatchIterator, Dataset, find_mnist, load_cifar_bin, load_idx, synthetic_blobs
from .errors import ConfigError, DivergenceError
from .nn import TASK_MODES, LayerSpec, Model, QuantContext, build_model, cnn_spec, mlp_spec
from .optim import Schedule, pair_param
from .packing import load_checkpoint, model_to_bqw, save_checkpoint, write_bqw
from .quantizers import PAIR_NAMES, ProximalQuantizer, QuantizerPair, bc_pair, fp_pair, get_pair

SCHEMA = 1
METRIC_FIELDS = ("schema", "phase", "epoch", "step", "train_loss", "train_acc", "test_acc",
                 "mean_abs_wstar", "frac_binary", "overflow_rate", "mu", "rho")


@dataclass(frozen=True)
class Algorithm:
    name: str
    rule: str                  # pcpp | pq | rpc
    pair: str | None           # quantizer pair name for pcpp
    mu_rule: str = "fixed"     # how the pair parameter evolves
    mu0: float | None = None
    muT: float | None = None
    rho_ramp: bool = False


ALGORITHMS = {
    "fp": Algorithm("fp", "pcpp", "fp"),
    "bc": Algorithm("bc", "pcpp", "bc"),
    "pc": Algorithm("pc", "pcpp", "pc", rho_ramp=True),
    "bnn": Algorithm("bnn", "pcpp", "bnn"),
    "bnn+": Algorithm("bnn+", "pcpp", "bnn+", mu0=5.0),
    "bnn++": Algorithm("bnn++", "pcpp", "bnn++", "linear", 5.0, 30.0),
    "pq": Algorithm("pq", "pq", None, rho_ramp=True),
    "rpc": Algorithm("rpc", "rpc", None, rho_ramp=True),
    "bireal": Algorithm("bireal", "pcpp", "bireal"),
    "rbnn": Algorithm("rbnn", "pcpp", "rbnn"),
    "poly+": Algorithm("poly+", "pcpp", "poly+", "linear", 5.0, 30.0),
    "ede": Algorithm("ede", "pcpp", "ede", "linear", 5.0, 30.0),
    "ede+": Algorithm("ede+", "pcpp", "ede+", "linear", 5.0, 30.0),
    "react": Algorithm("react", "pcpp", "react"),
}


@dataclass
class ExperimentConfig:
    algorithm: str = "fp"
    pair: str = ""                    # overrides the algorithm's quantizer pair
    act_pair: str = "bnn"             # activation pair under BWA/BWAA; "same" reuses the weight pair
    task_mode: str = "BW"
    pipeline: str = "end-to-end"      # end-to-end | fine-tune
    checkpoint: str = ""              # FP checkpoint for fine-tune
    seed: int = 0
    out: str = "runs/default"
    epochs: int = 5
    # data
    dataset: str = "blobs"            # blobs | mnist | idx | cifar10 | cifar100
    data_dir: str = ""
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    n_train: int = 0                  # 0 = all
    n_test: int = 0
    blob_classes: int = 4
    blob_dim: int = 16
    blob_train: int = 2000
    blob_test: int = 500
    batch_size: int = 64
    # model
    model: str = "mlp"                # mlp | cnn
    mlp_hidden: list = field(default_factory=lambda: [64, 64])
    cnn_widths: list = field(default_factory=lambda: [8, 16])
    cnn_hidden: int = 64
    keep_fp_ends: bool = True
    scale: bool = True
    # schedule
    eta: float = 0.05
    eta_rule: str = "cosine"
    momentum: float = 0.9
    clip: float = 0.0                 # 0 = off (BWAA turns it on at 10)
    mu0: float = 0.0                  # 0 = algorithm default
    muT: float = 0.0
    rho0: float = 0.01
    rhoT: float = 10.0
    ramp: bool = True                 # False freezes mu/rho at their start values

    def validate(self) -> "ExperimentConfig":
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}; choose from {sorted(ALGORITHMS)}")
        if self.task_mode not in TASK_MODES:
            raise ConfigError(f"task mode must be one of {TASK_MODES}")
        if self.algorithm == "fp" and self.task_mode != "BW":
            raise ConfigError("algorithm fp only runs in task mode BW")
        if self.pair and self.pair not in PAIR_NAMES:
            raise ConfigError(f"unknown quantizer pair {self.pair!r}")
        if self.act_pair != "same" and self.act_pair not in PAIR_NAMES:
            raise ConfigError(f"unknown activation pair {self.act_pair!r}")
        if self.pair and ALGORITHMS[self.algorithm].rule != "pcpp":
            raise ConfigError(f"algorithm {self.algorithm} does not take a quantizer pair")
        if self.pipeline not in ("end-to-end", "fine-tune"):
            raise ConfigError(f"unknown pipeline {self.pipeline!r}")
        if self.pipeline == "fine-tune" and not self.checkpoint:
            raise ConfigError("fine-tune needs a checkpoint path")
        if self.dataset not in ("blobs", "mnist", "idx", "cifar10", "cifar100"):
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        if self.model not in ("mlp", "cnn"):
            raise ConfigError(f"unknown model {self.model!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.eta_rule not in ("constant", "cosine", "step", "invsqrt"):
            raise ConfigError(f"unknown eta rule {self.eta_rule!r}")
        return self

    @classmethod
    def from_mapping(cls, data: dict) -> "ExperimentConfig":
        flat = {}
        for key, value in data.items():
            if isinstance(value, dict):      # TOML sections are cosmetic
                flat.update(value)
            else:
                flat[key] = value
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(flat) - known)
        if unknown:
            raise ConfigError(f"unknown config keys {unknown}")
        return cls(**{k.replace("-", "_"): v for k, v in flat.items()})

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# ---------------------------------------------------------------- assembly

def load_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    if cfg.dataset == "blobs":
        train = synthetic_blobs(cfg.blob_train, cfg.blob_classes, cfg.blob_dim, cfg.seed, split="train")
        test = synthetic_blobs(cfg.blob_test, cfg.blob_classes, cfg.blob_dim, cfg.seed + 10_000, split="test")
    elif cfg.dataset == "mnist":
        found = find_mnist(cfg.data_dir or None)
        if found is None:
            raise ConfigError("MNIST IDX files not found; set data_dir or MNIST_DIR")
        train, test = found
    elif cfg.dataset == "idx":
        train = load_idx(cfg.train_images, cfg.train_labels, split="train")
        test = load_idx(cfg.test_images, cfg.test_labels, split="test")
    else:
        coarse = cfg.dataset == "cifar100"
        train = load_cifar_bin(cfg.train_images, coarse, "train")
        test = load_cifar_bin(cfg.test_images, coarse, "test")
    if cfg.n_train:
        train = train.subset(cfg.n_train)
    if cfg.n_test:
        test = test.subset(cfg.n_test)
    return train, test


def model_specs(cfg: ExperimentConfig, train: Dataset) -> list[LayerSpec]:
    _, c, h, w = train.images.shape
    classes = train.num_classes
    if cfg.model == "cnn":
        if h != w:
            raise ConfigError("cnn model expects square images")
        specs = cnn_spec(c, h, classes, tuple(cfg.cnn_widths), cfg.cnn_hidden)
    else:
        specs = mlp_spec((c * h * w, *cfg.mlp_hidden, classes))
    if cfg.algorithm == "fp":
        for s in specs:
            if s.kind in ("linear", "conv2d"):
                s.binarize_weights = False
    return specs


def _pair_for(alg: Algorithm, cfg: ExperimentConfig) -> QuantizerPair:
    if alg.rule != "pcpp":
        return fp_pair()
    name = cfg.pair or alg.pair
    pair = get_pair(name, rho=cfg.rho0) if name == "pc" else get_pair(name)
    if alg.mu0 is not None:
        pair = pair.at(cfg.mu0 or alg.mu0)
    return pair


def make_schedule(cfg: ExperimentConfig, alg: Algorithm, total_steps: int) -> Schedule:
    mu_rule = alg.mu_rule if cfg.ramp else "fixed"
    mu0 = cfg.mu0 or (alg.mu0 if alg.mu0 is not None else 5.0)
    muT = cfg.muT or (alg.muT if alg.muT is not None else mu0)
    return Schedule(T=total_steps, eta0=cfg.eta, eta_rule=cfg.eta_rule,
                    mu_rule=mu_rule, mu0=mu0, muT=muT,
                    rho_rule="linear" if (alg.rho_ramp and cfg.ramp) else "fixed",
                    rho0=cfg.rho0, rhoT=cfg.rhoT)


class Trainer:
    """Owns the model, the quantization context and the per-parameter optimizer state."""

    def __init__(self, cfg: ExperimentConfig, model: Model, schedule: Schedule):
        self.cfg = cfg
        self.model = model
        self.schedule = schedule
        self.alg = ALGORITHMS[cfg.algorithm]
        self.pair = _pair_for(self.alg, cfg)
        self.act = get_pair(cfg.act_pair) if cfg.act_pair != "same" else None
        self.params = model.parameters()
        self.velocity = {name: np.zeros_like(t.data) for name, t, _ in self.params}
        self.clip = cfg.clip or (10.0 if cfg.task_mode == "BWAA" else 0.0)
        self.step = 0

    # quantization state at step t
    def context(self, t: int, export: bool = False) -> QuantContext:
        alg = self.alg
        rho = self.schedule.rho(t)
        if alg.rule == "pcpp":
            pair = self.pair.at(pair_param(self.pair, self.schedule, t))
            act = pair if alg.name == "fp" or self.cfg.act_pair == "same" else self.act
            prox = None
        else:
            pair = fp_pair()
            act = bc_pair() if self.cfg.act_pair == "same" else self.act
            prox = ProximalQuantizer("linear", rho=rho)
        return QuantContext(pair, act, alg.rule, prox, self.cfg.scale, export)

    def train_step(self, xb, yb) -> tuple[float, float]:
        t = self.step
        q = self.context(t)
        for _, p, _ in self.params:
            p.zero_grad()
        logits = self.model.forward(xb, training=True, quant=q)
        loss = ad.softmax_cross_entropy(logits, yb)
        value = float(loss.data)
        if not math.isfinite(value):
            raise DivergenceError(f"non-finite loss at step {t}", step=t)
        loss.backward()
        eta = self.schedule.eta(t)
        m = self.cfg.momentum
        for name, p, role in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise DivergenceError(f"non-finite gradient for {name} at step {t}", step=t)
            if self.clip:
                n = float(np.linalg.norm(g))
                if n > self.clip:
                    g = g * (self.clip / n)
            if m:
                v = self.velocity[name]
                v *= m
                v += g
                g = v
            base = p.data
            if role == "binary" and self.alg.rule in ("pq", "rpc"):
                base = np.asarray(q.prox(p.data), dtype=np.float64)
            p.data = base - eta * g
        self.step += 1
        acc = float(np.mean(np.argmax(logits.data, axis=1) == yb))
        return value, acc

    def frac_binary(self, q: QuantContext) -> float:
        layers = self.model.binary_layers()
        if not layers:
            return 0.0
        total = sum(l.weight.data.size for l in layers)
        hits = 0
        for l in layers:
            soft = q.export_weight(l.weight.data) if q.export else q.soft_weight(l.weight.data)
            ref = np.abs(soft).max() if q.export else 1.0
            hits += int(np.count_nonzero(np.abs(soft) == ref))
        return hits / total

    def mean_abs_wstar(self) -> float:
        layers = self.model.binary_layers() or self.model.gemm_layers()
        return float(np.mean(np.concatenate([np.abs(l.weight.data).ravel() for l in layers])))

    def evaluate(self, ds: Dataset, q: QuantContext) -> tuple[float, float]:
        preds = self.model.predict(ds.images, q)
        acc = float(np.mean(preds == ds.labels)) if len(ds) else 0.0
        rates = self.model.overflow_rates()
        return acc, (max(rates.values()) if rates else 0.0)


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(round(v, 12))
    return str(v)


def run_experiment(config: ExperimentConfig, datasets: tuple[Dataset, Dataset] | None = None) -> dict:
    """Train, export and write metrics.csv, timing.csv, model.bqw, model.ckpt and config.json."""
    cfg = config.validate()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))

    train, test = datasets if datasets is not None else load_datasets(cfg)
    model = build_model(model_specs(cfg, train), cfg.task_mode, cfg.seed, cfg.keep_fp_ends)
    if cfg.pipeline == "fine-tune":
        model.load_state_arrays(load_checkpoint(cfg.checkpoint))
    batches = BatchIterator(train, cfg.batch_size, cfg.seed)
    total = cfg.epochs * len(batches)
    alg = ALGORITHMS[cfg.algorithm]
    trainer = Trainer(cfg, model, make_schedule(cfg, alg, total))

    rows, timing, summary = [], [], {"divergence": None}
    t_start = time.perf_counter()
    try:
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            losses, accs, sizes = [], [], []
            for xb, yb in batches:
                loss, acc = trainer.train_step(xb, yb)
                losses.append(loss)
                accs.append(acc)
                sizes.append(len(yb))
            w = np.array(sizes, dtype=np.float64)
            q = trainer.context(trainer.step)
            test_acc, overflow = trainer.evaluate(test, q)
            rows.append(dict(schema=SCHEMA, phase="train", epoch=epoch, step=trainer.step,
                             train_loss=float(np.dot(losses, w) / w.sum()),
                             train_acc=float(np.dot(accs, w) / w.sum()),
                             test_acc=test_acc, mean_abs_wstar=trainer.mean_abs_wstar(),
                             frac_binary=trainer.frac_binary(q), overflow_rate=overflow,
                             mu=trainer.schedule.mu(trainer.step), rho=trainer.schedule.rho(trainer.step)))
            timing.append((epoch, round((time.perf_counter() - t0) * 1000.0, 3)))
    except DivergenceError as exc:
        summary["divergence"] = {"step": exc.step, "last_good_epoch": rows[-1]["epoch"] if rows else 0}
        (out / "divergence.json").write_text(json.dumps(summary["divergence"], indent=2))
        _write_outputs(out, rows, timing, model, trainer, None)
        raise

    qx = trainer.context(trainer.step, export=alg.name != "fp")
    test_acc, overflow = trainer.evaluate(test, qx)
    rows.append(dict(schema=SCHEMA, phase="export", epoch=cfg.epochs, step=trainer.step,
                     train_loss=rows[-1]["train_loss"], train_acc=rows[-1]["train_acc"],
                     test_acc=test_acc, mean_abs_wstar=trainer.mean_abs_wstar(),
                     frac_binary=trainer.frac_binary(qx), overflow_rate=overflow,
                     mu=trainer.schedule.mu(trainer.step), rho=trainer.schedule.rho(trainer.step)))
    timing.append(("total", round((time.perf_counter() - t_start) * 1000.0, 3)))
    _write_outputs(out, rows, timing, model, trainer, qx)
    summary.update(final=rows[-1], rows=rows, overflow=model.overflow_rates(), out=str(out))
    return summary


def _write_outputs(out: Path, rows, timing, model: Model, trainer: Trainer, qx):
    with (out / "metrics.csv").open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_FIELDS)
        for row in rows:
            writer.writerow([_fmt(row[k]) for k in METRIC_FIELDS])
    with (out / "timing.csv").open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("epoch", "wall_ms"))
        writer.writerows(timing)
    save_checkpoint(model.state_arrays(), out / "model.ckpt")
    if qx is not None:
        write_bqw(out / "model.bqw", model_to_bqw(model, qx))

