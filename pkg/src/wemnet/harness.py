"""Training loop, evaluation metrics, ablation runner and domain-error probe."""
from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .data import (
    Dataset,
    load_csv,
    make_blob_shift,
    make_two_moons_shift,
    paired_batches,
    standardize,
    steps_per_epoch,
)
from .model import WemnetModel, grl_ramp
from .nn import SgdOptimizer, save_checkpoint

log = logging.getLogger(__name__)

GENERATORS = {"two_moons": make_two_moons_shift, "blobs": make_blob_shift}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    dataset: str = "two_moons"
    dataset_params: dict = field(default_factory=dict)
    source_csv: str | None = None
    target_csv: str | None = None
    d_in: int | None = None
    n_hidden: int = 64
    n_classes: int | None = None
    backbone_depth: int = 2
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.001
    epochs: int = 20
    batch_per_domain: int = 32
    lambda_adv: float = 1.0
    grl_lambda: float = 1.0
    grl_schedule: str = "constant"
    dim_enabled: bool = True
    sem_enabled: bool = True
    per_row_class_threshold: bool = False
    pseudo_from_dim: bool = True
    seed: int = 0
    out_dir: str | None = None

    def validate(self) -> "RunConfig":
        if self.dataset == "csv":
            if not self.source_csv or not self.target_csv:
                raise ConfigError("dataset 'csv' needs source_csv and target_csv")
        elif self.dataset not in GENERATORS:
            raise ConfigError(f"unknown dataset {self.dataset!r}; choose from {sorted(GENERATORS) + ['csv']}")
        if self.grl_schedule not in ("constant", "ramp"):
            raise ConfigError(f"grl_schedule must be 'constant' or 'ramp', got {self.grl_schedule!r}")
        for name in ("n_hidden", "backbone_depth", "batch_per_domain", "lr"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("momentum", "weight_decay", "epochs", "lambda_adv", "grl_lambda"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        for name in ("dim_enabled", "sem_enabled", "per_row_class_threshold", "pseudo_from_dim"):
            if not isinstance(getattr(self, name), bool):
                raise ConfigError(f"{name} must be a boolean")
        return self

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**raw).validate()

    @classmethod
    def load(cls, path: str | os.PathLike) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MetricsRecord:
    epoch: int
    L_cls: float
    L_adv: float
    L_total: float
    source_accuracy: float
    target_accuracy: float
    err_d_with_source: float
    err_d_with_target: float
    err_d_without_source: float | None
    err_d_without_target: float | None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class StepLog:
    epoch: int
    step: int
    L_cls: float
    L_adv: float
    L_total: float
    lam: float


# ---------------------------------------------------------------------------
# data + model construction


def build_datasets(config: RunConfig) -> tuple[Dataset, Dataset]:
    if config.dataset == "csv":
        source = load_csv(config.source_csv, "source", config.n_classes)
        target = load_csv(config.target_csv, "target", config.n_classes)
        if target.labels is not None and source.n_classes is not None:
            target.n_classes = max(source.n_classes, target.n_classes or 0)
            source.n_classes = target.n_classes
    else:
        params = dict(config.dataset_params)
        params.setdefault("seed", config.seed)
        try:
            source, target = GENERATORS[config.dataset](**params)
        except TypeError as exc:
            raise ConfigError(f"bad dataset_params for {config.dataset}: {exc}") from None
    if source.n_features != target.n_features:
        raise ConfigError(f"source has {source.n_features} features, target {target.n_features}")
    return standardize(source, target)


def build_model(config: RunConfig, source: Dataset) -> WemnetModel:
    d_in = source.n_features
    if config.d_in is not None and config.d_in != d_in:
        raise ConfigError(f"config d_in={config.d_in} but data has {d_in} features")
    n_classes = config.n_classes or source.n_classes
    if source.n_classes is not None and n_classes < source.n_classes:
        raise ConfigError(f"config n_classes={n_classes} but labels need {source.n_classes}")
    return WemnetModel(
        d_in=d_in,
        n_hidden=config.n_hidden,
        n_classes=n_classes,
        depth=config.backbone_depth,
        dim_enabled=config.dim_enabled,
        sem_enabled=config.sem_enabled,
        grl_lambda=config.grl_lambda,
        per_row_class_threshold=config.per_row_class_threshold,
        pseudo_from_dim=config.pseudo_from_dim,
        seed=config.seed,
    )


# ---------------------------------------------------------------------------
# metrics


def domain_error(score: float) -> float:
    """Distance of a domain score from 0.5, in percent: |x - 0.5| * 100."""
    if not 0.0 <= score <= 1.0:
        raise ValueError(f"domain score must be in [0, 1], got {score}")
    return abs(score - 0.5) * 100.0


def predict(model: WemnetModel, features: np.ndarray) -> np.ndarray:
    with no_grad():
        logits = model.classify(Tensor(features))
    return logits.data.argmax(axis=1)


def evaluate_accuracy(model: WemnetModel, dataset: Dataset) -> float:
    if dataset.labels is None:
        raise ValueError("evaluate_accuracy needs a labeled dataset")
    hits = predict(model, dataset.features) == dataset.labels
    return 100.0 * float(hits.mean())


def _mean_err(scores: np.ndarray) -> float:
    return float(np.mean(np.abs(scores - 0.5) * 100.0))


def domain_scores(model: WemnetModel, features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Discriminator scores on raw features and on the DIM output, SEM bypassed."""
    with no_grad():
        f = model.features(Tensor(features))
        with_fd = ad.sigmoid(model.discriminator(f)).data.ravel()
        without_fd = ad.sigmoid(model.discriminator(model.dim_forward(f))).data.ravel()
    return with_fd, without_fd


def domain_error_probe(model: WemnetModel, source: Dataset, target: Dataset) -> dict[str, dict[str, float]]:
    """Mean domain error per domain for features with and without domain-related content."""
    if not model.dim_enabled:
        raise ValueError("domain_error_probe needs a model with DIM enabled")
    table = {}
    for name, ds in (("source", source), ("target", target)):
        with_fd, without_fd = domain_scores(model, ds.features)
        table[name] = {"with": _mean_err(with_fd), "without": _mean_err(without_fd)}
    return table


def _full_batch_losses(model: WemnetModel, source: Dataset, target: Dataset, lam: float) -> tuple[float, float, float]:
    from .data import one_hot

    with no_grad():
        terms = model.losses(
            Tensor(source.features),
            Tensor(one_hot(source.labels, model.n_classes)),
            Tensor(target.features),
            lam=lam,
        )
    return terms.cls.item(), terms.adv.item(), terms.total.item()


def evaluate(model: WemnetModel, source: Dataset, target: Dataset, epoch: int,
             losses: tuple[float, float, float]) -> MetricsRecord:
    with_s, without_s = domain_scores(model, source.features)
    with_t, without_t = domain_scores(model, target.features)
    dim = model.dim_enabled
    return MetricsRecord(
        epoch=epoch,
        L_cls=float(losses[0]),
        L_adv=float(losses[1]),
        L_total=float(losses[2]),
        source_accuracy=evaluate_accuracy(model, source),
        target_accuracy=evaluate_accuracy(model, target),
        err_d_with_source=_mean_err(with_s),
        err_d_with_target=_mean_err(with_t),
        err_d_without_source=_mean_err(without_s) if dim else None,
        err_d_without_target=_mean_err(without_t) if dim else None,
    )


# ---------------------------------------------------------------------------
# training


def train(
    config: RunConfig,
    data: tuple[Dataset, Dataset] | None = None,
    on_step: Callable[[StepLog], None] | None = None,
) -> tuple[WemnetModel, list[MetricsRecord]]:
    """Train one model; history[0] is the evaluation before any update.

    Epoch records carry the mean of the per-step losses of that epoch.
    """
    config.validate()
    source, target = data if data is not None else build_datasets(config)
    model = build_model(config, source)
    opt = SgdOptimizer(model.parameters(), config.lr, config.momentum, config.weight_decay)
    tape = ad.get_tape()

    history = [evaluate(model, source, target, 0,
                        _full_batch_losses(model, source, target, config.lambda_adv))]
    n_steps = steps_per_epoch(len(source), len(target), config.batch_per_domain)
    total_steps = max(1, config.epochs * n_steps)
    global_step = 0
    for epoch in range(1, config.epochs + 1):
        sums = np.zeros(3)
        count = 0
        for batch in paired_batches(source, target, config.batch_per_domain, config.seed, epoch):
            if config.grl_schedule == "ramp":
                model.grl_lambda = config.grl_lambda * grl_ramp(global_step / total_steps)
            tape.clear()
            terms = model.losses(
                Tensor(batch.x_s), Tensor(batch.y_s), Tensor(batch.x_t), lam=config.lambda_adv
            )
            step_vals = (terms.cls.item(), terms.adv.item(), terms.total.item())
            if not np.isfinite(step_vals[2]):
                raise FloatingPointError(f"loss is non-finite at epoch {epoch} step {batch.step}")
            terms.total.backward()
            opt.step()
            if on_step is not None:
                on_step(StepLog(epoch, batch.step, *step_vals, config.lambda_adv))
            sums += step_vals
            count += 1
            global_step += 1
        means = sums / count
        # Mean of the totals, recomputed from the component means so the
        # record satisfies L_total = L_cls + lam * L_adv up to one rounding.
        record = evaluate(model, source, target, epoch,
                          (means[0], means[1], means[0] + config.lambda_adv * means[1]))
        history.append(record)
        log.debug("epoch %d: %s", epoch, record)
    return model, history


def write_run(out_dir: str | os.PathLike, config: RunConfig, model: WemnetModel,
              history: list[MetricsRecord]) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for rec in history:
            fh.write(rec.to_json() + "\n")
    write_summary_csv(out / "summary.csv", [("run", history[-1])])
    with open(out / "config.json", "w", encoding="utf-8") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    save_checkpoint(out / "model.npz", model.named_parameters())
    return out


def write_summary_csv(path: str | os.PathLike, rows: list[tuple[str, MetricsRecord]]) -> None:
    names = [f.name for f in fields(MetricsRecord)]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["variant"] + names)
        for label, rec in rows:
            writer.writerow([label] + ["" if getattr(rec, n) is None else repr(getattr(rec, n)) for n in names])


# ---------------------------------------------------------------------------
# experiments

ABLATION_VARIANTS = {
    "baseline": (False, False),
    "+DIM": (True, False),
    "+SEM": (False, True),
    "full": (True, True),
}


def _run_variant(args: tuple[RunConfig, tuple[Dataset, Dataset] | None]) -> list[MetricsRecord]:
    config, data = args
    return train(config, data)[1]


def ablation_run(base_config: RunConfig, workers: int = 1,
                 data: tuple[Dataset, Dataset] | None = None) -> dict[str, list[MetricsRecord]]:
    """Train the four DIM/SEM combinations on the same data and seed."""
    base_config.validate()
    if data is None:
        data = build_datasets(base_config)
    jobs = [
        (replace(base_config, dim_enabled=dim, sem_enabled=sem), data)
        for dim, sem in ABLATION_VARIANTS.values()
    ]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_variant, jobs))
    else:
        results = [_run_variant(job) for job in jobs]
    return dict(zip(ABLATION_VARIANTS, results))


def ablation_table(results: dict[str, list[MetricsRecord]]) -> str:
    lines = [f"{'DIM':>4} {'SEM':>4} {'variant':>9} {'source':>8} {'target':>8}"]
    for name, hist in results.items():
        dim, sem = ABLATION_VARIANTS[name]
        last = hist[-1]
        lines.append(
            f"{'x' if dim else '':>4} {'x' if sem else '':>4} {name:>9} "
            f"{last.source_accuracy:8.2f} {last.target_accuracy:8.2f}"
        )
    return "\n".join(lines)


def probe_run(config: RunConfig, epochs: int = 10) -> tuple[WemnetModel, dict[str, dict[str, float]]]:
    """Train with DIM enabled for ``epochs`` epochs, then probe domain error."""
    cfg = replace(config, epochs=epochs, dim_enabled=True)
    data = build_datasets(cfg)
    model, _ = train(cfg, data)
    return model, domain_error_probe(model, *data)


def mask_rows(model: WemnetModel) -> list[dict]:
    """Flattened domain and class masks with the values that produced them."""
    rows = []
    dmask = model.domain_mask()
    cmask = model.class_mask()
    heads = (
        ("domain", model.discriminator.weight.data, dmask.mask.data, np.full(1, dmask.threshold)),
        ("class", model.classifier.weight.data, cmask.mask.data, cmask.threshold),
    )
    for head, W, M, thr in heads:
        sig = ad._sigmoid(np.abs(W))
        for i in range(W.shape[0]):
            t = thr[i] if len(thr) > 1 else thr[0]
            for j in range(W.shape[1]):
                rows.append({
                    "head": head, "row": i, "col": j, "weight": float(W[i, j]),
                    "sigmoid_abs": float(sig[i, j]), "threshold": float(t), "mask_bit": int(M[i, j]),
                })
    return rows


def write_masks_csv(path: str | os.PathLike, model: WemnetModel) -> None:
    cols = ["head", "row", "col", "weight", "sigmoid_abs", "threshold", "mask_bit"]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        writer.writeheader()
        for row in mask_rows(model):
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def gradcheck_model(model: WemnetModel, x_s: Tensor, y_s: Tensor, x_t: Tensor,
                    lam: float = 1.0, step: float = 1e-5) -> dict[str, float]:
    """Finite-difference check of the training gradient over every active parameter.

    Masks and target pseudo-scores are computed once at the unperturbed point
    and held fixed, since the tape treats them as constants. The feature
    extractor sits behind the gradient reversal layer, so its reference is
    the derivative of ``L_cls - grl_lambda * lam * L_adv``; every other
    parameter is checked against ``L_cls + lam * L_adv``.
    """
    with no_grad():
        f = model.features(ad.concat_rows(x_s, x_t))
    masks = model.compute_masks(f, y_s)
    params = model.named_parameters(active_only=True)
    for p in params.values():
        p.grad = None
    ad.get_tape().clear()
    model.total_loss(x_s, y_s, x_t, lam=lam, masks=masks).backward()
    analytic = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
    for p in params.values():
        p.grad = None

    def objective(sign: float) -> float:
        terms = model.losses(x_s, y_s, x_t, lam=lam, masks=masks)
        return ad.add(terms.cls, ad.scale(terms.adv, sign * lam))

    reversed_sign = -model.grl_lambda
    errors = {}
    for name, p in params.items():
        sign = reversed_sign if name.startswith("backbone.") else 1.0
        numeric = ad.numerical_grad(lambda: objective(sign), p, step)
        errors[name] = ad.relative_error(analytic[name], numeric)
    return errors


def gradcheck_run(seed: int = 7, n_hidden: int = 8, n_classes: int = 3, d_in: int = 5,
                  n_per_domain: int = 4, step: float = 1e-5) -> dict[str, float]:
    """Gradient check of the full model (DIM and SEM on) on a small random batch."""
    rng = np.random.default_rng(seed)
    model = WemnetModel(d_in, n_hidden, n_classes, depth=2, seed=seed)
    x_s = Tensor(rng.normal(size=(n_per_domain, d_in)))
    x_t = Tensor(rng.normal(size=(n_per_domain, d_in)) + 0.5)
    labels = np.arange(n_per_domain) % n_classes
    y_s = Tensor(np.eye(n_classes)[labels])
    return gradcheck_model(model, x_s, y_s, x_t, step=step)
