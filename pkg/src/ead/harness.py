"""Evaluation harness.

Attack adapters with a shared outcome shape, the best/average/worst-case
target protocols, the distillation / transferability / adversarial-training
experiments, and CSV/JSON report emission.

Protocol semantics: images the model misclassifies are dropped up front;
best and worst case attack every incorrect label and keep the easiest or
hardest target by the attack's own difficulty score (worst case counts an
image as a success only when all targets succeed); average case attacks
one seeded random incorrect label per image. Distortion means run over
successful images only and are absent when the success rate is zero.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import tempfile
from dataclasses import dataclass, field, replace

import numpy as np

from . import baselines, elastic, nn, zoo
from .data import Dataset, Example

log = logging.getLogger(__name__)

PROTOCOLS = ("best", "average", "worst")
CSV_COLUMNS = (
    "attack", "model", "protocol", "asr", "l1", "l2", "linf",
    "beta", "kappa", "rule", "seed",
)


@dataclass
class DistortionStats:
    asr: float
    l1: float | None
    l2: float | None
    linf: float | None


@dataclass
class ExperimentReport:
    attack: str
    model: str
    protocol: str
    stats: DistortionStats
    config: dict = field(default_factory=dict)
    seed: int = 0


@dataclass
class Outcome:
    """One (image, target) attack job: distortions of the crafted example
    and the attack's own difficulty score used for best/worst ranking."""

    success: bool
    x_adv: np.ndarray | None
    l1: float | None
    l2: float | None
    linf: float | None
    difficulty: float


def distortions(x, x0):
    """(L1, L2, Linf) of x - x0."""
    x = np.asarray(x, dtype=np.float64)
    x0 = np.asarray(x0, dtype=np.float64)
    if x.shape != x0.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {x0.shape}")
    delta = x - x0
    return (
        float(np.abs(delta).sum()),
        float(np.sqrt((delta * delta).sum())),
        float(np.abs(delta).max()) if delta.size else 0.0,
    )


# ---------------------------------------------------------------------------
# attack adapters


class ElasticMethod:
    """FISTA elastic-net attack; difficulty is the decision-rule score."""

    def __init__(self, cfg: elastic.EadConfig, name: str | None = None):
        self.cfg = cfg
        self.name = name or f"ead-{cfg.rule}"

    def params(self) -> dict:
        return {"beta": self.cfg.beta, "kappa": self.cfg.kappa, "rule": self.cfg.rule}

    def _score(self, r: elastic.AttackResult) -> float:
        if self.cfg.rule == "l1":
            return r.l1
        return self.cfg.beta * r.l1 + r.l2**2

    def _wrap(self, results):
        return [
            Outcome(r.success, r.x_adv, r.l1, r.l2, r.linf,
                    self._score(r) if r.success else math.inf)
            for r in results
        ]

    def run_batch(self, net, x0s, targets):
        return self._wrap(elastic.binary_search_attack_batch(net, x0s, targets, self.cfg))


class CovMethod(ElasticMethod):
    """Change-of-variable control; same scoring, different solver."""

    def __init__(self, cfg: elastic.EadConfig, name: str = "cov"):
        super().__init__(cfg, name)

    def run_batch(self, net, x0s, targets):
        return self._wrap(elastic.cov_attack_batch(net, x0s, targets, self.cfg))


class _GridMethod:
    def __init__(self, norm: str, grid: baselines.GridSpec | None, name: str):
        self.norm = norm
        self.grid = grid or baselines.DEFAULT_GRIDS[norm]
        self.name = name

    def params(self) -> dict:
        return {}

    def _attack_one(self, net, x0, t):
        raise NotImplementedError

    def run_batch(self, net, x0s, targets):
        out = []
        for x0, t in zip(np.atleast_2d(x0s), np.atleast_1d(targets)):
            hit = self._attack_one(net, x0, int(t))
            if hit is None:
                out.append(Outcome(False, None, None, None, None, math.inf))
            else:
                eps, x_adv = hit
                l1, l2, linf = distortions(x_adv, x0)
                out.append(Outcome(True, x_adv, l1, l2, linf, eps))
        return out


class FgmMethod(_GridMethod):
    """Single-shot gradient step, grid-searched epsilon; difficulty = eps*."""

    def __init__(self, norm: str, grid=None):
        super().__init__(norm, grid, f"fgm-{norm}")

    def _attack_one(self, net, x0, t):
        return baselines.fgm_grid_attack(net, x0, t, self.grid)


class IfgmMethod(_GridMethod):
    def __init__(self, norm: str, grid=None, iters: int = 10):
        super().__init__(norm, grid, f"ifgm-{norm}")
        self.iters = iters

    def _attack_one(self, net, x0, t):
        return baselines.ifgm_grid_attack(net, x0, t, self.grid, iters=self.iters)


# ---------------------------------------------------------------------------
# protocols


def _as_examples(images) -> list[Example]:
    if isinstance(images, Dataset):
        return images.examples()
    return list(images)


def correctly_classified(net, images) -> list[Example]:
    """Keep the examples the model already gets right, preserving order."""
    examples = _as_examples(images)
    if not examples:
        raise ValueError("empty image set")
    xs = np.stack([ex.x for ex in examples])
    preds = nn.predict(net, xs)
    return [ex for ex, p in zip(examples, preds) if p == ex.label]


def sample_incorrect_targets(labels, num_classes: int, seed: int) -> np.ndarray:
    """One uniform incorrect label per image, deterministic in the seed."""
    rng = np.random.default_rng(seed)
    out = []
    for y in labels:
        choices = [c for c in range(num_classes) if c != int(y)]
        out.append(rng.choice(choices))
    return np.asarray(out, dtype=np.int64)


def _aggregate_groups(outcomes, group_sizes, protocol):
    """Collapse per-target outcomes into one per image."""
    final = []
    at = 0
    for size in group_sizes:
        group = outcomes[at : at + size]
        at += size
        hits = [o for o in group if o.success]
        if protocol == "average":
            final.append(group[0])
        elif protocol == "best":
            final.append(min(hits, key=lambda o: o.difficulty) if hits else group[0])
        else:  # worst
            if len(hits) == len(group):
                final.append(max(hits, key=lambda o: o.difficulty))
            else:
                final.append(Outcome(False, None, None, None, None, math.inf))
    return final


def stats_from_outcomes(outcomes) -> DistortionStats:
    n = len(outcomes)
    hits = [o for o in outcomes if o.success]
    if not hits:
        return DistortionStats(0.0, None, None, None)
    return DistortionStats(
        asr=100.0 * len(hits) / n,
        l1=float(np.mean([o.l1 for o in hits])),
        l2=float(np.mean([o.l2 for o in hits])),
        linf=float(np.mean([o.linf for o in hits])),
    )


def protocol_jobs(net, images, protocol: str, seed: int):
    """(x0 rows, targets, per-image group sizes) for a protocol run."""
    if protocol not in PROTOCOLS:
        raise ValueError(f"protocol must be one of {PROTOCOLS}, got {protocol!r}")
    kept = correctly_classified(net, images)
    if not kept:
        raise ValueError("no correctly classified images to attack")
    k = net.num_classes
    xs, targets, sizes = [], [], []
    if protocol == "average":
        labels = [ex.label for ex in kept]
        sampled = sample_incorrect_targets(labels, k, seed)
        log.debug("average-case targets: %s", sampled.tolist())
        for ex, t in zip(kept, sampled):
            xs.append(ex.x)
            targets.append(int(t))
            sizes.append(1)
    else:
        for ex in kept:
            incorrect = [c for c in range(k) if c != ex.label]
            xs.extend([ex.x] * len(incorrect))
            targets.extend(incorrect)
            sizes.append(len(incorrect))
    return np.stack(xs), np.asarray(targets, dtype=np.int64), sizes


def run_protocol(method, net, images, protocol: str, seed: int) -> DistortionStats:
    """Attack every kept image under a target-selection protocol."""
    xs, targets, sizes = protocol_jobs(net, images, protocol, seed)
    outcomes = method.run_batch(net, xs, targets)
    return stats_from_outcomes(_aggregate_groups(outcomes, sizes, protocol))


# ---------------------------------------------------------------------------
# experiments


def transfer_experiment(source, target, images, kappa_list, cfg: elastic.EadConfig,
                        seed: int):
    """Craft on `source` at each kappa; measure success on `target`.

    Returns [(kappa, DistortionStats)] where ASR counts target-model
    argmax == attack target and distortion means run over those transfers.
    The same seed fixes the same (image, target) jobs for every kappa.
    """
    if source.input_shape != target.input_shape or source.num_classes != target.num_classes:
        raise ValueError("source and target networks disagree on shape or classes")
    xs, targets, sizes = protocol_jobs(source, images, "average", seed)
    out = []
    for kappa in kappa_list:
        method = ElasticMethod(replace(cfg, kappa=float(kappa)))
        outcomes = method.run_batch(source, xs, targets)
        transferred = []
        for o, t in zip(outcomes, targets):
            hit = bool(
                o.success
                and int(np.argmax(nn.forward(target, o.x_adv))) == int(t)
            )
            transferred.append(
                Outcome(hit, o.x_adv, o.l1, o.l2, o.linf, o.difficulty)
                if hit
                else Outcome(False, None, None, None, None, math.inf)
            )
        out.append((float(kappa), stats_from_outcomes(transferred)))
    return out


def build_distilled(train_data: Dataset, temperature: float, train_cfg: zoo.TrainConfig,
                    eval_data: Dataset | None = None, arch=None):
    """Teacher trained at T, then a student distilled from its soft labels."""
    teacher_cfg = replace(train_cfg, temperature=float(temperature))
    arch = arch if arch is not None else zoo.default_arch(train_data.num_classes)
    teacher = zoo.train(arch, train_data, teacher_cfg)
    student = zoo.distill(teacher, train_data, float(temperature), train_cfg)
    if eval_data is not None:
        log.info(
            "distilled T=%g: teacher acc %.4f student acc %.4f",
            temperature, zoo.evaluate(teacher, eval_data), zoo.evaluate(student, eval_data),
        )
    return teacher, student


def distillation_experiment(t_list, methods, train_data: Dataset, eval_images,
                            train_cfg: zoo.TrainConfig, seed: int, students=None,
                            arch=None):
    """ASR/distortion table across distillation temperatures.

    `students` may carry prebuilt {T: Network} models (they are reused);
    missing temperatures are trained here.
    """
    students = dict(students or {})
    table = {}
    for t in t_list:
        if t not in students:
            _, students[t] = build_distilled(train_data, t, train_cfg, arch=arch)
        net = students[t]
        table[t] = {
            m.name: run_protocol(m, net, eval_images, "average", seed) for m in methods
        }
    return table


def craft_augmentation(net, images, cfg: elastic.EadConfig, m_sources: int):
    """Adversarial examples for retraining: every incorrect target of the
    first m correctly classified images, labeled with the TRUE class."""
    kept = correctly_classified(net, images)[:m_sources]
    if not kept:
        raise ValueError("no correctly classified source images")
    k = net.num_classes
    xs, targets, labels = [], [], []
    for ex in kept:
        for c in range(k):
            if c != ex.label:
                xs.append(ex.x)
                targets.append(c)
                labels.append(ex.label)
    results = elastic.binary_search_attack_batch(net, np.stack(xs), targets, cfg)
    return [
        Example(r.x_adv, label)
        for r, label in zip(results, labels)
        if r.success
    ]


def advtrain_experiment(train_data: Dataset, test_data: Dataset,
                        train_cfg: zoo.TrainConfig, craft_cfgs: dict,
                        m_sources: int, eval_images, seed: int,
                        baseline=None, arch=None):
    """Retrain on adversarial augmentations and re-attack.

    craft_cfgs maps attack name -> EadConfig. Regimes are 'none', each
    single augmentation, and the union of all. Returns regime accuracies
    and per-(attack, regime) average-case stats.
    """
    if m_sources < 1:
        raise ValueError("m_sources must be >= 1")
    if arch is None:
        arch = zoo.default_arch(train_data.num_classes)
    if baseline is None:
        baseline = zoo.train(arch, train_data, train_cfg)
    sets = {
        name: craft_augmentation(baseline, train_data.examples(), cfg, m_sources)
        for name, cfg in craft_cfgs.items()
    }
    regimes = {"none": baseline}
    for name, examples in sets.items():
        regimes[name] = zoo.adversarial_retrain(arch, train_data, examples, train_cfg)
    if len(sets) > 1:
        union = [ex for name in sets for ex in sets[name]]
        regimes["+".join(sets)] = zoo.adversarial_retrain(arch, train_data, union, train_cfg)
    accuracy = {name: zoo.evaluate(net, test_data) for name, net in regimes.items()}
    stats = {}
    for attack_name, cfg in craft_cfgs.items():
        method = ElasticMethod(cfg, name=attack_name)
        for regime, net in regimes.items():
            stats[(attack_name, regime)] = run_protocol(
                method, net, eval_images, "average", seed
            )
    return {"accuracy": accuracy, "stats": stats}


# ---------------------------------------------------------------------------
# reports


def _atomic_write(path, text: str):
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)) or ".")
    try:
        with os.fdopen(fd, "w", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def _cell(name, value):
    # missing distortions print as N.A.; inapplicable attack knobs stay blank
    if value is None:
        return "" if name in ("beta", "kappa", "rule") else "N.A."
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _report_row(report: ExperimentReport) -> dict:
    cfg = report.config
    return {
        "attack": report.attack,
        "model": report.model,
        "protocol": report.protocol,
        "asr": report.stats.asr,
        "l1": report.stats.l1,
        "l2": report.stats.l2,
        "linf": report.stats.linf,
        "beta": cfg.get("beta"),
        "kappa": cfg.get("kappa"),
        "rule": cfg.get("rule"),
        "seed": report.seed,
    }


def emit_report(reports, path, fmt: str | None = None) -> None:
    """Write reports as CSV or JSON (inferred from the extension) atomically."""
    fmt = fmt or ("json" if str(path).endswith(".json") else "csv")
    rows = [_report_row(r) for r in reports]
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for row in rows:
            writer.writerow([_cell(c, row[c]) for c in CSV_COLUMNS])
        _atomic_write(path, buf.getvalue())
    elif fmt == "json":
        _atomic_write(path, json.dumps(rows, indent=2) + "\n")
    else:
        raise ValueError(f"format must be csv or json, got {fmt!r}")


def _parse_cell(name, raw):
    if raw in ("", "N.A.", None):
        return None
    if name in ("attack", "model", "protocol", "rule"):
        return raw
    if name == "seed":
        return int(raw)
    return float(raw)


def read_report(path) -> list[ExperimentReport]:
    """Inverse of emit_report; config keeps the beta/kappa/rule columns."""
    if str(path).endswith(".json"):
        with open(path) as f:
            rows = json.load(f)
    else:
        with open(path, newline="") as f:
            reader = csv.DictReader(f)
            rows = [
                {name: _parse_cell(name, row[name]) for name in CSV_COLUMNS}
                for row in reader
            ]
    out = []
    for row in rows:
        config = {
            key: row[key] for key in ("beta", "kappa", "rule") if row.get(key) is not None
        }
        out.append(
            ExperimentReport(
                attack=row["attack"],
                model=row["model"],
                protocol=row["protocol"],
                stats=DistortionStats(row["asr"], row["l1"], row["l2"], row["linf"]),
                config=config,
                seed=int(row["seed"]),
            )
        )
    return out
