"""Training and inference driver: config, optimizer, schedule, loop, restore.

Training is deterministic given the config seed: batch composition, parameter
initialization, and every numeric op depend only on it. Each iteration draws
``batch_size`` samples according to the supervision mix, accumulates the
mixed loss over them, and takes one decoupled-weight-decay Adam step under a
polynomial learning-rate decay.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import numpy as np

from textspot import checkpoint as ckpt_io
from textspot import matching
from textspot.dataset_io import read_dataset
from textspot.metrics import evaluate_model
from textspot.model import ModelConfig, SpotterModel

KIND_ORDER = ("full", "text", "weak")


@dataclass
class TrainConfig:
    """Everything a run needs; JSON config files mirror these field names."""

    d: int = 64
    num_queries: int = 8
    num_char_queries: int = 8
    encoder_layers: int = 2
    decoder_layers: int = 2
    recognizer_layers: int = 2
    heads: int = 4
    charset_symbols: str = "ABCEHKLTUY0"
    masked_attention: bool = True
    score_thresh: float = 0.5
    precision: str = "float32"

    data_full: str | None = None
    data_text: str | None = None
    data_weak: str | None = None
    mix_ratios: tuple = (1.0, 0.0, 0.0)

    learning_rate: float = 1e-3
    weight_decay: float = 0.05
    poly_power: float = 0.9
    max_iterations: int = 2000
    batch_size: int = 4
    seed: int = 0
    checkpoint_interval: int = 500

    lambda_mask: float = 5.0
    lambda_rec: float = 1.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0

    @classmethod
    def from_json(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"{path}: unknown config keys {sorted(unknown)}")
        cfg = cls(**raw)
        cfg.validate()
        return cfg

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["mix_ratios"] = list(self.mix_ratios)
        return d

    def validate(self):
        self.mix_ratios = tuple(float(r) for r in self.mix_ratios)
        if len(self.mix_ratios) != 3 or any(r < 0 for r in self.mix_ratios) or sum(self.mix_ratios) <= 0:
            raise ValueError(f"mix_ratios must be 3 non-negative numbers with positive sum, got {self.mix_ratios}")
        if self.max_iterations < 1 or self.batch_size < 1:
            raise ValueError("max_iterations and batch_size must be positive")
        if self.checkpoint_interval < 1:
            raise ValueError("checkpoint_interval must be positive")
        self.model_config().validate()

    def model_config(self):
        return ModelConfig(
            d=self.d,
            num_queries=self.num_queries,
            num_char_queries=self.num_char_queries,
            encoder_layers=self.encoder_layers,
            decoder_layers=self.decoder_layers,
            recognizer_layers=self.recognizer_layers,
            heads=self.heads,
            charset_symbols=self.charset_symbols,
            masked_attention=self.masked_attention,
            score_thresh=self.score_thresh,
            precision=self.precision,
        )

    def loss_weights(self):
        return matching.LossWeights(
            lambda_mask=self.lambda_mask,
            lambda_rec=self.lambda_rec,
            focal_alpha=self.focal_alpha,
            focal_gamma=self.focal_gamma,
        )


def poly_lr(base_lr, iteration, max_iterations, power=0.9):
    """base_lr * (1 - t/T)^power; exactly base_lr at t=0 and 0 at t=T."""
    frac = 1.0 - iteration / max_iterations
    return base_lr * frac**power


class AdamW:
    """Adam with decoupled weight decay, bias-corrected moments."""

    def __init__(self, params, weight_decay=0.05, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self, lr):
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for p in self.params:
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            g = g.astype(np.float64)
            m = self.m[p.name] = self.beta1 * self.m[p.name] + (1.0 - self.beta1) * g
            v = self.v[p.name] = self.beta2 * self.v[p.name] + (1.0 - self.beta2) * g * g
            update = (m / b1c) / (np.sqrt(v / b2c) + self.eps) + self.weight_decay * p.data
            p.data = (p.data - lr * update).astype(p.data.dtype)

    def state_records(self):
        out = {}
        for name in self.m:
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        return out

    def load_state(self, records):
        for name in self.m:
            self.m[name] = np.asarray(records[f"opt.m.{name}"], dtype=np.float64)
            self.v[name] = np.asarray(records[f"opt.v.{name}"], dtype=np.float64)


def load_datasets(config):
    """Read the configured dataset directories, keyed by supervision kind."""
    paths = {"full": config.data_full, "text": config.data_text, "weak": config.data_weak}
    datasets = {}
    for i, kind in enumerate(KIND_ORDER):
        if config.mix_ratios[i] > 0:
            if not paths[kind]:
                raise ValueError(f"mix ratio for {kind!r} is positive but data_{kind} is not set")
            samples = read_dataset(paths[kind])
            off_kind = [s.sample_id for s in samples if s.kind != kind]
            if off_kind:
                raise ValueError(f"dataset {paths[kind]} contains non-{kind} samples: {off_kind[:3]}")
            datasets[kind] = samples
    return datasets


def train(config, out_path=None, datasets=None, log_fn=print):
    """Run the loop; returns (model, optimizer). Aborts on non-finite loss.

    ``datasets`` maps kind -> list of samples and defaults to the directories
    named in the config. A checkpoint is written to ``out_path`` every
    ``checkpoint_interval`` iterations and at completion.
    """
    config.validate()
    if datasets is None:
        datasets = load_datasets(config)
    ratios = np.array(config.mix_ratios, dtype=np.float64)
    ratios /= ratios.sum()
    active = [k for k, r in zip(KIND_ORDER, ratios) if r > 0]
    for kind in active:
        if not datasets.get(kind):
            raise ValueError(f"no samples available for supervision kind {kind!r}")

    model = SpotterModel(config.model_config(), seed=config.seed)
    optimizer = AdamW(model.parameters(), weight_decay=config.weight_decay)
    weights = config.loss_weights()
    rng = np.random.default_rng(config.seed)

    for it in range(config.max_iterations):
        kinds = rng.choice(3, size=config.batch_size, p=ratios)
        batch_total = None
        reports = []
        for kind_idx in kinds:
            kind = KIND_ORDER[kind_idx]
            pool = datasets[kind]
            sample = pool[int(rng.integers(len(pool)))]
            loss, report = _sample_loss(model, sample, weights, iteration=it)
            reports.append(report)
            batch_total = loss if batch_total is None else batch_total + loss
        batch_total = batch_total * (1.0 / config.batch_size)
        if not np.isfinite(batch_total.data):
            parts = ", ".join(
                f"{r.kind}: total={r.total:.4g} cls={r.cls:.4g} dice={r.dice:.4g} "
                f"focal={r.focal:.4g} rec={r.rec:.4g}"
                for r in reports
            )
            raise RuntimeError(f"non-finite loss at iteration {it}: {parts}")
        model.store.zero_grads()
        batch_total.backward(np.ones((), dtype=batch_total.dtype))
        lr = poly_lr(config.learning_rate, it, config.max_iterations, config.poly_power)
        optimizer.step(lr)

        mean = {k: float(np.mean([getattr(r, k) for r in reports])) for k in ("total", "cls", "dice", "focal", "rec")}
        if log_fn:
            log_fn(
                f"iter {it + 1}/{config.max_iterations} lr {lr:.3e} "
                f"loss {mean['total']:.4f} cls {mean['cls']:.4f} dice {mean['dice']:.4f} "
                f"focal {mean['focal']:.4f} rec {mean['rec']:.4f}"
            )
        if out_path and ((it + 1) % config.checkpoint_interval == 0 or it + 1 == config.max_iterations):
            save_checkpoint(out_path, model, config, optimizer, it + 1)
    return model, optimizer


def _sample_loss(model, sample, weights, iteration=0):
    preds = model.forward(sample.image)
    for name, t in (("class", preds.class_logits), ("mask", preds.mask_logits), ("char", preds.char_logits)):
        if not np.isfinite(t.data).all():
            raise RuntimeError(
                f"non-finite {name} logits at iteration {iteration} on sample {sample.sample_id!r}"
            )
    hq, wq = preds.mask_logits.shape[1:]
    targets = matching.targets_from_sample(
        sample, model.charset, model.config.num_char_queries, (hq, wq)
    )
    assignment = matching.match(
        preds.class_probs.data, preds.mask_logits.data, preds.char_logits.data, targets
    )
    return matching.total_loss(
        preds.class_logits, preds.mask_logits, preds.char_logits, targets, assignment, weights
    )


def save_checkpoint(path, model, config, optimizer=None, iteration=0):
    records = {name: p.data for name, p in model.store.items()}
    if optimizer is not None:
        records.update(optimizer.state_records())
    ckpt_io.save(path, records, config.to_dict(), iteration)


def load_checkpoint(path):
    """Rebuild (model, config, iteration, optimizer) from a checkpoint file."""
    records, raw_config, iteration = ckpt_io.load(path)
    config = TrainConfig(**raw_config)
    config.validate()
    model = SpotterModel(config.model_config(), seed=config.seed)
    params = {k: v for k, v in records.items() if not k.startswith("opt.")}
    model.store.load_values(params)
    optimizer = AdamW(model.parameters(), weight_decay=config.weight_decay)
    optimizer.t = iteration
    opt_records = {k: v for k, v in records.items() if k.startswith("opt.")}
    if opt_records:
        optimizer.load_state(opt_records)
    return model, config, iteration, optimizer


def evaluate(model, samples):
    """Spot every fully annotated sample and aggregate the metrics."""
    return evaluate_model(model, samples)
