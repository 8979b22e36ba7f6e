"""Session fixtures shared by the acceptance suite.

The heavyweight artifacts (trained reference model, the full beta sweep,
distilled students) are built once per session and reused across criteria;
they only materialize when an acceptance test first asks for them, so the
unit-test files stay fast on their own.
"""

import time

import numpy as np
import pytest

from ead import data, elastic, harness, zoo

ACCEPTANCE_LINES = []

SWEEP_BETAS = (0.0, 1e-4, 1e-3, 1e-2)
NUM_IMAGES = 50
RUN_SEED = 0


def record(line):
    ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def full_cfg(**kw):
    base = dict(beta=1e-3, kappa=0.0, c_init=1e-3, binary_search_steps=9,
                iterations=1000, alpha0=0.01, rule="en", seed=RUN_SEED)
    base.update(kw)
    return elastic.EadConfig(**base)


@pytest.fixture(scope="session")
def digits_train():
    return data.load_digits_dataset("train")


@pytest.fixture(scope="session")
def digits_test():
    return data.load_digits_dataset("test")


@pytest.fixture(scope="session")
def cnn(digits_train, digits_test):
    net = zoo.train(zoo.default_arch(10), digits_train, zoo.TrainConfig())
    accuracy = zoo.evaluate(net, digits_test)
    assert accuracy >= 0.97, f"reference model accuracy {accuracy:.4f} below gate"
    return net


@pytest.fixture(scope="session")
def attack_images(cnn, digits_test):
    kept = harness.correctly_classified(cnn, digits_test.examples())
    assert len(kept) >= NUM_IMAGES
    return kept[:NUM_IMAGES]


@pytest.fixture(scope="session")
def attack_jobs(cnn, attack_images):
    """Average-case (image, target) jobs fixed by the run seed."""
    xs, targets, _ = harness.protocol_jobs(cnn, attack_images, "average", RUN_SEED)
    return xs, targets


@pytest.fixture(scope="session")
def beta_sweep(cnn, attack_jobs):
    """Full-schedule EAD (both rules, one solver pass) and the
    change-of-variable control at every sweep beta; many criteria share it."""
    xs, targets = attack_jobs
    sweep = {}
    for beta in SWEEP_BETAS:
        started = time.perf_counter()
        by_rule = elastic.binary_search_attack_rules(
            cnn, xs, targets, full_cfg(beta=beta), rules=("en", "l1")
        )
        cov = elastic.cov_attack_batch(cnn, xs, targets, full_cfg(beta=beta))
        sweep[beta] = {
            "en": by_rule["en"],
            "l1": by_rule["l1"],
            "cov": cov,
            "seconds": time.perf_counter() - started,
        }
    return sweep


@pytest.fixture(scope="session")
def students(digits_train, digits_test):
    """Distilled models at the sweep temperatures, trained once."""
    out = {}
    for temperature in (1.0, 10.0, 100.0):
        _, out[temperature] = harness.build_distilled(
            digits_train, temperature, zoo.TrainConfig(), eval_data=digits_test
        )
    return out


def result_stats(results):
    """DistortionStats over a list of AttackResult."""
    outcomes = [
        harness.Outcome(r.success, r.x_adv, r.l1, r.l2, r.linf, np.inf)
        for r in results
    ]
    return harness.stats_from_outcomes(outcomes)
