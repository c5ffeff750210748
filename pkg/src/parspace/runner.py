"""Pretraining, fine-tuning, evaluation and ablation drivers."""

import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import datagen, losses, optim, segnet
from . import tensor as T
from .datagen import Scenario
from .peft import FULL_SCALE_REFERENCE, PeftStrategy, apply_strategy
from .reparam import Mode

log = logging.getLogger(__name__)

HELDOUT_START = 1_000_000
DEFAULT_LAMBDA = 0.25
CSV_COLUMNS = ["run_id", "strategy", "scenario", "dsc", "miou", "f1", "trainable_params", "steps", "seed"]


class PretrainingQualityError(RuntimeError):
    def __init__(self, dsc, target, curve):
        super().__init__(f"pretraining reached held-out DSC {dsc:.4f} < {target}")
        self.dsc = dsc
        self.curve = curve


class DivergenceError(RuntimeError):
    def __init__(self, step, value):
        super().__init__(f"loss became {value} at step {step}")
        self.step = step


def loss_config_for(scenario, lam=None):
    scenario = Scenario.parse(scenario)
    if scenario.single_instance:
        return losses.LossConfig(lam=0.0)
    return losses.LossConfig(lam=DEFAULT_LAMBDA if lam is None else lam)


def heldout(scenario, n, seed):
    return datagen.generate(scenario, n, seed, start=HELDOUT_START)


def evaluate(model, samples, batch=50):
    """MetricReport of ``model`` on ``samples`` (no tape)."""
    preds = []
    with T.no_grad():
        for i in range(0, len(samples), batch):
            imgs, _, boxes = datagen.batch_arrays(samples[i:i + batch])
            preds.append(losses.binarize(segnet.forward(model, imgs, boxes))[:, 0])
    masks = np.stack([s.mask[0] for s in samples])
    return losses.metrics(np.concatenate(preds), masks)


def _train_step(model, trainable, state, samples, loss_cfg, step):
    imgs, masks, boxes = datagen.batch_arrays(samples)
    logits = segnet.forward(model, imgs, boxes)
    loss = losses.composite_loss(logits, masks, loss_cfg)
    value = loss.item()
    if not math.isfinite(value):
        raise DivergenceError(step, value)
    optim.zero_grad(trainable)
    T.backward(loss)
    optim.adam_step(state, trainable, {n: p.grad for n, p in trainable.items()})
    return value


@dataclass
class PretrainResult:
    model: segnet.ToySamModel
    curve: list
    dsc: float


def pretrain(seed=0, steps=2000, lr=1e-3, batch=1, eval_size=200, min_dsc=0.85, weight_decay=0.0):
    """Train every parameter of a fresh model on the Base scenario.

    Training draws a fresh sample per step; the gate is the held-out DSC.
    """
    model = segnet.ToySamModel(seed=seed)
    params = model.parameter_dict()
    for p in params.values():
        p.requires_grad = True
    state = optim.AdamState(lr=lr, weight_decay=weight_decay)
    cfg = loss_config_for(Scenario.BASE)
    curve = []
    for step in range(steps):
        batch_samples = datagen.generate(Scenario.BASE, batch, seed, start=step * batch)
        curve.append(_train_step(model, params, state, batch_samples, cfg, step))
        if step % 500 == 0:
            log.info("pretrain step %d loss %.4f", step, curve[-1])
    for p in params.values():
        p.requires_grad = False
        p.grad = None
    dsc = evaluate(model, heldout(Scenario.BASE, eval_size, seed)).dsc
    log.info("pretrain held-out DSC %.4f", dsc)
    if dsc < min_dsc:
        raise PretrainingQualityError(dsc, min_dsc, curve)
    return PretrainResult(model, curve, dsc)


@dataclass(frozen=True)
class RunConfig:
    strategy: PeftStrategy
    scenario: Scenario
    lam: float = None
    lr: float = 5e-4
    weight_decay: float = 5e-4
    steps: int = 300
    batch: int = 1
    seed: int = 0
    train_size: int = 300
    eval_size: int = 200

    def __post_init__(self):
        if isinstance(self.strategy, str):
            object.__setattr__(self, "strategy", PeftStrategy.parse(self.strategy))
        object.__setattr__(self, "scenario", Scenario.parse(self.scenario))
        # single-instance scenes always use lambda = 0
        if self.scenario.single_instance:
            object.__setattr__(self, "lam", 0.0)
        elif self.lam is None:
            object.__setattr__(self, "lam", DEFAULT_LAMBDA)

    @property
    def run_id(self):
        return f"{self.strategy}@{self.scenario.value}#s{self.seed}"

    def loss_config(self):
        return loss_config_for(self.scenario, self.lam)

    def echo(self):
        d = asdict(self)
        d["strategy"] = str(self.strategy)
        d["scenario"] = self.scenario.value
        return d


@dataclass
class RunReport:
    run_id: str
    strategy: str
    scenario: str
    seed: int
    steps: int
    counts: dict
    loss_curve: list
    initial: losses.MetricReport
    final: losses.MetricReport
    wall_clock_s: float
    config: dict
    full_scale_reference: dict = field(default_factory=lambda: dict(FULL_SCALE_REFERENCE))

    @property
    def steps_per_sec(self):
        return self.steps / self.wall_clock_s if self.wall_clock_s > 0 else float("nan")

    def csv_row(self):
        return {"run_id": self.run_id, "strategy": self.strategy, "scenario": self.scenario,
                "dsc": f"{self.final.dsc:.6f}", "miou": f"{self.final.miou:.6f}",
                "f1": f"{self.final.f1:.6f}", "trainable_params": self.counts["total"],
                "steps": self.steps, "seed": self.seed}

    def to_json(self):
        d = {k: v for k, v in asdict(self).items() if k not in ("initial", "final")}
        for key in ("initial", "final"):
            m = getattr(self, key)
            d[key] = {"dsc": m.dsc, "miou": m.miou, "f1": m.f1}
        d["steps_per_sec"] = self.steps_per_sec
        d["notes"] = {"miou": "mean of foreground and background IoU per binary mask",
                      "f1": "identical to DSC on binary masks",
                      "lora_rank_default": 4, "adapter_bottleneck_default": 4}
        return json.dumps(d, indent=2, default=str)


def finetune(base_model, cfg):
    """Fine-tune a clone of ``base_model`` under ``cfg.strategy``; returns a RunReport.

    Only the strategy's trainable partition is handed to the optimizer, so
    frozen tensors are never written.
    """
    started = time.perf_counter()
    model = base_model.clone()
    part = apply_strategy(model, cfg.strategy, seed=cfg.seed)
    train = datagen.generate(cfg.scenario, cfg.train_size, cfg.seed)
    test = heldout(cfg.scenario, cfg.eval_size, cfg.seed)
    initial = evaluate(model, test)
    state = optim.AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    loss_cfg = cfg.loss_config()
    curve = []
    order = []
    for step in range(cfg.steps):
        if not order:
            epoch = step * cfg.batch // cfg.train_size
            order = list(np.random.default_rng([cfg.seed, 0xE90C, epoch]).permutation(cfg.train_size))
        picks = [train[order.pop(0)] for _ in range(min(cfg.batch, len(order)))]
        curve.append(_train_step(model, part.trainable, state, picks, loss_cfg, step))
    final = evaluate(model, test)
    report = RunReport(
        run_id=cfg.run_id, strategy=str(cfg.strategy), scenario=cfg.scenario.value, seed=cfg.seed,
        steps=cfg.steps, counts=part.counts(), loss_curve=curve, initial=initial, final=final,
        wall_clock_s=time.perf_counter() - started, config=cfg.echo())
    report.model = model
    return report


ABLATION_AXES = {
    "subspace": [PeftStrategy("parser", mode=Mode.COEFFICIENTS, selection=s)
                 for s in ("transformer", "conv", "both")],
    "coeff-bases": [PeftStrategy("parser", mode=m, selection="conv")
                    for m in (Mode.COEFFICIENTS, Mode.BASES, Mode.BOTH)],
}


def ablate(base_model, axis, scenario, steps=300, seed=0, **overrides):
    if axis not in ABLATION_AXES:
        raise ValueError(f"unknown ablation axis {axis!r}; choose from {sorted(ABLATION_AXES)}")
    reports = []
    for strategy in ABLATION_AXES[axis]:
        cfg = RunConfig(strategy=strategy, scenario=scenario, steps=steps, seed=seed, **overrides)
        reports.append(finetune(base_model, cfg))
    return reports


def csv_text(reports):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in reports:
        w.writerow(r.csv_row())
    return buf.getvalue()


def markdown_table(reports, axis):
    lines = [f"## Ablation: {axis} ({reports[0].scenario}, {reports[0].steps} steps, seed {reports[0].seed})",
             "",
             "| strategy | encoder trainable | total trainable | DSC | mIoU | F1 | final loss |",
             "|---|---:|---:|---:|---:|---:|---:|"]
    for r in reports:
        lines.append(f"| {r.strategy} | {r.counts['encoder']} | {r.counts['total']} | {r.final.dsc:.4f} "
                     f"| {r.final.miou:.4f} | {r.final.f1:.4f} | {r.loss_curve[-1]:.4f} |")
    lines.append("")
    if axis == "coeff-bases":
        enc = [r.counts["encoder"] for r in reports]
        lines.append(f"Coefficient-only trains {enc[2] / enc[0]:.0f}x fewer encoder parameters than "
                     "bases+coefficients here.")
        lines.append("Full-scale reference (not asserted): ~1700x fewer parameters, "
                     "performance drop of only 0.7% and 1.1%.")
    else:
        lines.append("Full-scale reference (not asserted): conv-only reconstruction needs 0.5k coefficients, "
                     "~290x fewer than PEFT baselines.")
    lines.append("mIoU = mean of foreground/background IoU; F1 = DSC on binary masks.")
    return "\n".join(lines) + "\n"


def with_overrides(cfg, **kw):
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
