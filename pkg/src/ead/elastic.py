"""Elastic-net regularized adversarial attacks.

The attack minimizes  c*f(x,t) + beta*||x - x0||_1 + ||x - x0||_2^2  over
the pixel box [0,1]^p, where f is a hinge on the logit margin. The solver
is FISTA with a projected shrinkage-thresholding step; an outer binary
search tunes c. Candidates (iterates whose target logit leads every rival
by the configured margin kappa) are pooled across all rounds and one
winner is picked by a decision rule.

A change-of-variable solver (x = (1+tanh w)/2, ADAM on w, subgradient for
the L1 term) is included as the negative control: it optimizes the same
objective but cannot exploit the sparsifying threshold step.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass

import numpy as np

from . import nn

log = logging.getLogger(__name__)

# decayed as alpha0 * sqrt(1 - k/I); named so run snapshots can pin it
STEP_SCHEDULE = "poly_sqrt"


@dataclass
class EadConfig:
    beta: float = 1e-3
    kappa: float = 0.0
    c_init: float = 1e-3
    binary_search_steps: int = 9
    iterations: int = 1000
    alpha0: float = 0.01
    rule: str = "en"
    targeted: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if self.kappa < 0:
            raise ValueError(f"kappa must be >= 0, got {self.kappa}")
        if self.c_init <= 0:
            raise ValueError(f"c_init must be positive, got {self.c_init}")
        if self.binary_search_steps < 1:
            raise ValueError("binary_search_steps must be >= 1")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.alpha0 <= 0:
            raise ValueError(f"alpha0 must be positive, got {self.alpha0}")
        if self.rule not in ("en", "l1"):
            raise ValueError(f"rule must be 'en' or 'l1', got {self.rule!r}")


@dataclass
class AttackCandidate:
    """A successful iterate: classified as the attack wants, with the
    config's kappa-sized logit gap to spare."""

    x: np.ndarray
    iteration: int  # 1-based index within its FISTA/ADAM run
    l1: float
    l2: float
    linf: float
    en: float  # beta*l1 + l2^2 at the config's beta
    prediction: int


@dataclass
class AttackResult:
    success: bool
    x_adv: np.ndarray | None
    c_final: float
    l1: float | None
    l2: float | None
    linf: float | None
    candidate_count: int
    wall_time: float


# ---------------------------------------------------------------------------
# losses


def attack_loss_targeted(logits, t: int, kappa: float = 0.0) -> float:
    """Hinge on the margin between the runner-up and the target logit."""
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= t < logits.shape[-1]:
        raise ValueError(f"target class {t} out of range")
    others = np.delete(logits, t)
    return float(max(others.max() - logits[t], -kappa))


def attack_loss_untargeted(logits, t0: int, kappa: float = 0.0) -> float:
    """Hinge pushing the true class t0 below the best other logit."""
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= t0 < logits.shape[-1]:
        raise ValueError(f"class {t0} out of range")
    others = np.delete(logits, t0)
    return float(max(logits[t0] - others.max(), -kappa))


def _margin_objective(targets, kappa: float, targeted: bool):
    """Batched loss values and logit gradients; zero gradient on the -kappa floor."""
    targets = np.asarray(targets, dtype=np.int64)

    def objective(logits):
        n = logits.shape[0]
        rows = np.arange(n)
        masked = logits.copy()
        masked[rows, targets] = -np.inf
        runner = masked.argmax(axis=1)
        margin = logits[rows, runner] - logits[rows, targets]
        if not targeted:
            margin = -margin
        values = np.maximum(margin, -kappa)
        d = np.zeros_like(logits)
        sign = 1.0 if targeted else -1.0
        d[rows, runner] = sign
        d[rows, targets] -= sign
        d[margin <= -kappa] = 0.0
        return values, d

    return objective


# ---------------------------------------------------------------------------
# proximal step


def shrink_threshold(z, x0, beta: float) -> np.ndarray:
    """Projected shrinkage-thresholding: the [0,1]-constrained proximal map
    of beta*||.-x0||_1. With beta=0 this is a plain box clip."""
    z = np.asarray(z, dtype=np.float64)
    x0 = np.asarray(x0, dtype=np.float64)
    if z.shape != x0.shape:
        raise ValueError(f"shape mismatch: {z.shape} vs {x0.shape}")
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    diff = z - x0
    return np.where(
        diff > beta,
        np.minimum(z - beta, 1.0),
        np.where(diff < -beta, np.maximum(z + beta, 0.0), x0),
    )


# ---------------------------------------------------------------------------
# engine
#
# Everything below runs a whole batch of (image, target) pairs through the
# attack at once: one forward/backward per iteration for the batch instead
# of per image. Per-image results are tracked online so pooling candidates
# across binary-search rounds costs O(1) memory per image.


class _BestTracker:
    def __init__(self, n, p, rule, beta):
        self.rule = rule
        self.beta = beta
        self.score = np.full(n, np.inf)
        self.x = np.zeros((n, p))
        self.l1 = np.zeros(n)
        self.l2 = np.zeros(n)
        self.linf = np.zeros(n)
        self.c = np.zeros(n)
        self.count = np.zeros(n, dtype=np.int64)

    def update(self, ok, x_new, x0, c):
        rows = np.flatnonzero(ok)
        if rows.size == 0:
            return
        delta = x_new[rows] - x0[rows]
        l1 = np.abs(delta).sum(axis=1)
        sq = (delta * delta).sum(axis=1)
        score = l1 if self.rule == "l1" else self.beta * l1 + sq
        # strict improvement keeps the earliest candidate on ties
        better = score < self.score[rows]
        upd = rows[better]
        self.score[upd] = score[better]
        self.x[upd] = x_new[upd]
        self.l1[upd] = l1[better]
        self.l2[upd] = np.sqrt(sq[better])
        self.linf[upd] = np.abs(delta[better]).max(axis=1)
        self.c[upd] = c[upd]
        self.count[rows] += 1


def _record(trackers, collect, ok, x_new, x0, c, k, preds, beta):
    for tracker in trackers:
        tracker.update(ok, x_new, x0, c)
    if collect is not None:
        for i in np.flatnonzero(ok):
            delta = x_new[i] - x0[i]
            l1 = float(np.abs(delta).sum())
            l2sq = float(delta @ delta)
            collect[i].append(
                AttackCandidate(
                    x=x_new[i].copy(),
                    iteration=k + 1,
                    l1=l1,
                    l2=math.sqrt(l2sq),
                    linf=float(np.abs(delta).max()),
                    en=beta * l1 + l2sq,
                    prediction=int(preds[i]),
                )
            )


def _success_mask(logits, targets, targeted, kappa):
    """Success per logit row: the kappa-hinge sits at its floor, so the
    target tops every rival by at least kappa (targeted) or trails the
    leading rival by at least kappa (untargeted). kappa=0 is the plain
    argmax test; larger kappa makes candidacy demand the full margin,
    which is what lets crafted examples survive a model change."""
    idx = np.arange(logits.shape[0])
    rival = logits.copy()
    rival[idx, targets] = -np.inf
    gap = logits[idx, targets] - rival.max(axis=1)
    return gap >= kappa if targeted else -gap >= kappa


def _fista_round(net, x0, targets, c, cfg, trackers, collect):
    objective = _margin_objective(targets, cfg.kappa, cfg.targeted)
    x = x0.copy()
    y = x0.copy()
    succeeded = np.zeros(x0.shape[0], dtype=bool)
    for k in range(cfg.iterations):
        alpha = cfg.alpha0 * math.sqrt(1.0 - k / cfg.iterations)
        _, df = nn.input_gradient_batch(net, objective, y)
        grad = c[:, None] * df + 2.0 * (y - x0)
        x_new = shrink_threshold(y - alpha * grad, x0, cfg.beta)
        logits = nn.forward(net, x_new)
        preds = np.argmax(logits, axis=1)
        ok = _success_mask(logits, targets, cfg.targeted, cfg.kappa)
        succeeded |= ok
        _record(trackers, collect, ok, x_new, x0, c, k, preds, cfg.beta)
        y = x_new + (k / (k + 3.0)) * (x_new - x)
        x = x_new
    return succeeded


def _cov_round(net, x0, targets, c, cfg, trackers, collect):
    objective = _margin_objective(targets, cfg.kappa, cfg.targeted)
    w = np.arctanh(np.clip(2.0 * x0 - 1.0, -1.0 + 1e-6, 1.0 - 1e-6))
    state = nn.AdamState.init([w])
    succeeded = np.zeros(x0.shape[0], dtype=bool)
    th = np.tanh(w)
    for k in range(cfg.iterations):
        xw = (th + 1.0) / 2.0
        _, df = nn.input_gradient_batch(net, objective, xw)
        delta = xw - x0
        dgdx = c[:, None] * df + 2.0 * delta + cfg.beta * np.sign(delta)
        dw = dgdx * (1.0 - th * th) / 2.0
        state, (w,) = nn.adam_step(state, [w], [dw], cfg.alpha0)
        th = np.tanh(w)
        x_new = (th + 1.0) / 2.0
        logits = nn.forward(net, x_new)
        preds = np.argmax(logits, axis=1)
        ok = _success_mask(logits, targets, cfg.targeted, cfg.kappa)
        succeeded |= ok
        _record(trackers, collect, ok, x_new, x0, c, k, preds, cfg.beta)
    return succeeded


_ROUNDS = {"fista": _fista_round, "cov": _cov_round}


def _validate_batch(net, x0, targets, cfg):
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    if x0.min() < -1e-9 or x0.max() > 1.0 + 1e-9:
        raise ValueError("x0 must lie in [0,1]^p")
    targets = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    if targets.shape[0] != x0.shape[0]:
        raise ValueError("one target per image required")
    if targets.min() < 0 or targets.max() >= net.num_classes:
        raise ValueError("class index out of range")
    return np.clip(x0, 0.0, 1.0), targets


def _run_attack(net, x0, targets, cfg, method, rules=None, collect=None):
    """Binary search over c around repeated solver rounds, pooled candidates.

    One tracker per decision rule shares the rounds, so asking for both
    rules costs one run instead of two.
    """
    n, p = x0.shape
    rules = rules or (cfg.rule,)
    trackers = {rule: _BestTracker(n, p, rule, cfg.beta) for rule in rules}
    lo = np.zeros(n)
    hi = np.full(n, np.inf)
    c = np.full(n, cfg.c_init)
    last_c = c.copy()
    round_fn = _ROUNDS[method]
    log.debug(
        "%s attack: n=%d beta=%g kappa=%g rounds=%d iters=%d schedule=%s",
        method, n, cfg.beta, cfg.kappa, cfg.binary_search_steps,
        cfg.iterations, STEP_SCHEDULE,
    )
    for _ in range(cfg.binary_search_steps):
        last_c = c.copy()
        success = round_fn(net, x0, targets, c, cfg, list(trackers.values()), collect)
        hi = np.where(success, np.minimum(hi, c), hi)
        lo = np.where(success, lo, np.maximum(lo, c))
        c = np.where(np.isfinite(hi), (lo + hi) / 2.0, c * 10.0)
    return trackers, last_c


def _results_from_tracker(tracker, last_c, elapsed, n):
    out = []
    share = elapsed / n
    for i in range(n):
        if tracker.count[i] > 0:
            out.append(
                AttackResult(
                    success=True,
                    x_adv=tracker.x[i].copy(),
                    c_final=float(tracker.c[i]),
                    l1=float(tracker.l1[i]),
                    l2=float(tracker.l2[i]),
                    linf=float(tracker.linf[i]),
                    candidate_count=int(tracker.count[i]),
                    wall_time=share,
                )
            )
        else:
            out.append(
                AttackResult(
                    success=False,
                    x_adv=None,
                    c_final=float(last_c[i]),
                    l1=None,
                    l2=None,
                    linf=None,
                    candidate_count=0,
                    wall_time=share,
                )
            )
    return out


# ---------------------------------------------------------------------------
# public API


def fista_attack(net, x0, t: int, c: float, cfg: EadConfig) -> list[AttackCandidate]:
    """One FISTA run at fixed c; returns, in order, every iterate that hits
    the target class with at least the config's kappa margin."""
    if c <= 0:
        raise ValueError(f"c must be positive, got {c}")
    x0b, targets = _validate_batch(net, x0, [t], cfg)
    collect = [[]]
    tracker = _BestTracker(1, x0b.shape[1], cfg.rule, cfg.beta)
    _fista_round(net, x0b, targets, np.array([float(c)]), cfg, [tracker], collect)
    return collect[0]


def select_final(candidates, rule: str = "en", beta: float = 0.0) -> AttackCandidate:
    """Winner under the decision rule; ties go to the earliest candidate.

    The EN score is recomputed as beta*l1 + l2^2 with the beta given here,
    so a pooled list can be re-scored; the L1 rule ignores beta.
    """
    if not candidates:
        raise ValueError("empty candidate list")
    if rule not in ("en", "l1"):
        raise ValueError(f"rule must be 'en' or 'l1', got {rule!r}")
    best = None
    best_score = math.inf
    for cand in candidates:
        score = cand.l1 if rule == "l1" else beta * cand.l1 + cand.l2**2
        if score < best_score:
            best, best_score = cand, score
    return best


def binary_search_attack_batch(net, x0s, targets, cfg: EadConfig) -> list[AttackResult]:
    """The full attack for a batch of (image, target) pairs at once."""
    x0b, tb = _validate_batch(net, x0s, targets, cfg)
    start = time.perf_counter()
    trackers, last_c = _run_attack(net, x0b, tb, cfg, "fista")
    return _results_from_tracker(
        trackers[cfg.rule], last_c, time.perf_counter() - start, x0b.shape[0]
    )


def binary_search_attack_rules(net, x0s, targets, cfg: EadConfig,
                               rules=("en", "l1")) -> dict[str, list[AttackResult]]:
    """One binary-search run reported under several decision rules at once."""
    x0b, tb = _validate_batch(net, x0s, targets, cfg)
    start = time.perf_counter()
    trackers, last_c = _run_attack(net, x0b, tb, cfg, "fista", rules=rules)
    elapsed = time.perf_counter() - start
    return {
        rule: _results_from_tracker(trackers[rule], last_c, elapsed, x0b.shape[0])
        for rule in rules
    }


def binary_search_attack(net, x0, t: int, cfg: EadConfig) -> AttackResult:
    """Binary search on c around FISTA rounds; candidates pooled across rounds."""
    return binary_search_attack_batch(net, x0, [t], cfg)[0]


def cov_attack_batch(net, x0s, targets, cfg: EadConfig) -> list[AttackResult]:
    """Change-of-variable control attack for a batch of (image, target) pairs."""
    x0b, tb = _validate_batch(net, x0s, targets, cfg)
    start = time.perf_counter()
    trackers, last_c = _run_attack(net, x0b, tb, cfg, "cov")
    return _results_from_tracker(
        trackers[cfg.rule], last_c, time.perf_counter() - start, x0b.shape[0]
    )


def cov_attack(net, x0, t: int, cfg: EadConfig) -> AttackResult:
    """Same objective and binary search, solved over w with x=(1+tanh w)/2 and
    ADAM plus an L1 subgradient instead of the shrinkage step."""
    return cov_attack_batch(net, x0, [t], cfg)[0]
