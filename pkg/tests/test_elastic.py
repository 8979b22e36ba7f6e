"""Attack module tests: losses, proximal step against a grid oracle,
FISTA/binary-search behavior on linear toys, selection rules, and the
change-of-variable control."""

import math

import numpy as np
import pytest

from ead import elastic, nn


def linear_net(w, b):
    w = np.asarray(w, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    return nn.Network(
        (w.shape[0],), [nn.Dense(w.shape[1])], [{"W": w, "b": b}]
    )


def sum_net():
    """logit0 = x0+x1, logit1 = 1-(x0+x1): boundary at pixel sum 0.5... times 2."""
    return linear_net([[1.0, -1.0], [1.0, -1.0]], [0.0, 1.0])


def constant_net(favored, classes=3):
    b = np.zeros(classes)
    b[favored] = 5.0
    return linear_net(np.zeros((2, classes)), b)


def quick_cfg(**kw):
    base = dict(beta=1e-2, iterations=200, binary_search_steps=5, alpha0=0.01)
    base.update(kw)
    return elastic.EadConfig(**base)


# ---------------------------------------------------------------------------
# losses


def test_targeted_loss_values():
    assert elastic.attack_loss_targeted([1.0, 3.0, 2.0], 1, 0.0) == 0.0
    assert elastic.attack_loss_targeted([5.0, 1.0, 0.0], 1, 0.0) == 4.0
    assert elastic.attack_loss_targeted([1.0, 3.0, 2.0], 1, 2.0) == -1.0


def test_untargeted_loss_values():
    assert elastic.attack_loss_untargeted([3.0, 1.0], 0, 0.0) == 2.0
    assert elastic.attack_loss_untargeted([1.0, 3.0], 0, 0.0) == 0.0
    assert elastic.attack_loss_untargeted([1.0, 3.0], 0, 5.0) == -2.0


def test_losses_reject_out_of_range_class():
    with pytest.raises(ValueError):
        elastic.attack_loss_targeted([1.0, 2.0], 2, 0.0)
    with pytest.raises(ValueError):
        elastic.attack_loss_untargeted([1.0, 2.0], -1, 0.0)


def test_margin_objective_zero_gradient_on_floor():
    obj = elastic._margin_objective([0], kappa=2.0, targeted=True)
    logits = np.array([[5.0, 1.0, 0.0]])  # margin 1-5 = -4 <= -kappa
    values, d = obj(logits)
    assert values[0] == -2.0
    assert np.all(d == 0.0)


def test_margin_objective_gradient_directions():
    obj = elastic._margin_objective([2], kappa=0.0, targeted=True)
    values, d = obj(np.array([[1.0, 4.0, 2.0]]))
    assert values[0] == 2.0
    np.testing.assert_array_equal(d[0], [0.0, 1.0, -1.0])
    obj = elastic._margin_objective([1], kappa=0.0, targeted=False)
    values, d = obj(np.array([[1.0, 4.0, 2.0]]))
    assert values[0] == 2.0
    np.testing.assert_array_equal(d[0], [0.0, 1.0, -1.0])


# ---------------------------------------------------------------------------
# proximal step


def test_shrink_branch_examples():
    got = elastic.shrink_threshold(
        np.array([0.7, 0.55, 1.5, -0.2]),
        np.array([0.5, 0.5, 0.5, 0.3]),
        0.1,
    )
    np.testing.assert_allclose(got, [0.6, 0.5, 1.0, 0.0], atol=1e-12)


def test_shrink_beta_zero_is_clip():
    rng = np.random.default_rng(0)
    z = rng.uniform(-1, 2, size=200)
    x0 = rng.uniform(0, 1, size=200)
    np.testing.assert_array_equal(
        elastic.shrink_threshold(z, x0, 0.0), np.clip(z, 0.0, 1.0)
    )


def test_shrink_matches_grid_oracle():
    # argmin over u in [0,1] of 0.5*(u-z)^2 + beta*|u-x0|, step 1e-4
    rng = np.random.default_rng(1)
    grid = np.arange(0.0, 1.0 + 1e-9, 1e-4)
    for beta in [0.0, 1e-4, 1e-2, 0.1, 0.3]:
        z = rng.uniform(-0.5, 1.5, size=40)
        x0 = rng.uniform(0.0, 1.0, size=40)
        got = elastic.shrink_threshold(z, x0, beta)
        obj = 0.5 * (grid[None, :] - z[:, None]) ** 2 + beta * np.abs(
            grid[None, :] - x0[:, None]
        )
        want = grid[obj.argmin(axis=1)]
        assert np.abs(got - want).max() < 2e-4


def test_shrink_output_in_box():
    rng = np.random.default_rng(2)
    z = rng.uniform(-3, 3, size=500)
    x0 = rng.uniform(0, 1, size=500)
    out = elastic.shrink_threshold(z, x0, 0.05)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_shrink_rejects_bad_args():
    with pytest.raises(ValueError):
        elastic.shrink_threshold(np.zeros(3), np.zeros(4), 0.1)
    with pytest.raises(ValueError):
        elastic.shrink_threshold(np.zeros(3), np.zeros(3), -0.1)


# ---------------------------------------------------------------------------
# config


def test_config_validation():
    for bad in [
        dict(beta=-1.0),
        dict(kappa=-0.1),
        dict(c_init=0.0),
        dict(binary_search_steps=0),
        dict(iterations=0),
        dict(alpha0=0.0),
        dict(rule="l2"),
    ]:
        with pytest.raises(ValueError):
            elastic.EadConfig(**bad)


# ---------------------------------------------------------------------------
# fista_attack


def test_fista_trivially_fooled_model_succeeds_fast():
    net = sum_net()
    cfg = quick_cfg(beta=0.0, iterations=50)
    cands = elastic.fista_attack(net, np.array([0.2, 0.2]), 0, c=1000.0, cfg=cfg)
    assert cands and cands[0].iteration <= 50
    assert all(c.prediction == 0 for c in cands)


def test_fista_records_origin_when_already_target():
    net = sum_net()
    x0 = np.array([0.9, 0.9])  # classified 0 with a wide gap
    cands = elastic.fista_attack(net, x0, 0, c=1.0, cfg=quick_cfg(iterations=5))
    assert cands[0].iteration == 1
    assert cands[0].l1 == 0.0 and cands[0].l2 == 0.0
    np.testing.assert_array_equal(cands[0].x, x0)


def test_fista_candidates_stay_in_box_and_hit_target():
    net = sum_net()
    cands = elastic.fista_attack(
        net, np.array([0.1, 0.3]), 0, c=5.0, cfg=quick_cfg(iterations=100)
    )
    assert cands
    for cand in cands:
        assert cand.x.min() >= 0.0 and cand.x.max() <= 1.0
        assert cand.prediction == 0
        assert cand.l1 >= 0 and cand.l2 >= 0 and cand.linf >= 0


def test_fista_rejects_bad_inputs():
    net = sum_net()
    with pytest.raises(ValueError):
        elastic.fista_attack(net, np.array([0.2, 1.4]), 0, 1.0, quick_cfg())
    with pytest.raises(ValueError):
        elastic.fista_attack(net, np.array([0.2, 0.4]), 5, 1.0, quick_cfg())
    with pytest.raises(ValueError):
        elastic.fista_attack(net, np.array([0.2, 0.4]), 0, 0.0, quick_cfg())


# ---------------------------------------------------------------------------
# select_final


def cand(l1, l2, iteration=1):
    return elastic.AttackCandidate(
        x=np.zeros(2), iteration=iteration, l1=l1, l2=l2,
        linf=0.0, en=0.0, prediction=0,
    )


def test_select_final_rules_disagree_as_designed():
    a = cand(l1=10.0, l2=2.0)  # en score 4.01 at beta=1e-3
    b = cand(l1=5.0, l2=math.sqrt(4.1))  # en score 4.105
    assert elastic.select_final([a, b], "en", 1e-3) is a
    assert elastic.select_final([a, b], "l1", 1e-3) is b


def test_select_final_single_candidate_both_rules():
    only = cand(3.0, 1.0)
    assert elastic.select_final([only], "en", 0.1) is only
    assert elastic.select_final([only], "l1", 0.1) is only


def test_select_final_tie_goes_to_earliest():
    first = cand(2.0, 1.0, iteration=3)
    second = cand(2.0, 1.0, iteration=9)
    assert elastic.select_final([first, second], "en", 1e-2) is first


def test_select_final_l1_pick_never_beats_en_pick_on_l1():
    rng = np.random.default_rng(3)
    for _ in range(50):
        cands = [
            cand(float(l1), float(l2))
            for l1, l2 in rng.uniform(0.1, 5.0, size=(6, 2))
        ]
        l1_pick = elastic.select_final(cands, "l1", 1e-2)
        en_pick = elastic.select_final(cands, "en", 1e-2)
        assert l1_pick.l1 <= en_pick.l1


def test_select_final_rejects_empty_and_bad_rule():
    with pytest.raises(ValueError):
        elastic.select_final([], "en", 0.0)
    with pytest.raises(ValueError):
        elastic.select_final([cand(1, 1)], "linf", 0.0)


# ---------------------------------------------------------------------------
# binary_search_attack


def test_constant_net_favoring_target_succeeds_at_zero_distortion():
    net = constant_net(favored=1)
    cfg = quick_cfg(iterations=20, binary_search_steps=3)
    res = elastic.binary_search_attack(net, np.array([0.4, 0.6]), 1, cfg)
    assert res.success
    assert res.l1 == 0.0 and res.l2 == 0.0 and res.linf == 0.0
    assert res.c_final == cfg.c_init
    assert res.candidate_count == 3 * 20


def test_constant_net_favoring_other_class_fails():
    net = constant_net(favored=0)
    cfg = quick_cfg(iterations=20, binary_search_steps=4)
    res = elastic.binary_search_attack(net, np.array([0.4, 0.6]), 1, cfg)
    assert not res.success
    assert res.x_adv is None and res.l1 is None
    assert res.candidate_count == 0
    # every round failed, so c grew tenfold each round
    assert res.c_final == pytest.approx(cfg.c_init * 10 ** (4 - 1))


def test_kappa_gates_candidacy_on_constant_net():
    # logits are fixed with a gap of exactly 5 toward class 1
    net = constant_net(favored=1)
    x0 = np.array([0.4, 0.6])
    easy = elastic.binary_search_attack(net, x0, 1, quick_cfg(kappa=4.0))
    assert easy.success and easy.l1 == 0.0
    hard = elastic.binary_search_attack(net, x0, 1, quick_cfg(kappa=6.0))
    assert not hard.success and hard.candidate_count == 0


def test_selected_example_carries_kappa_margin():
    net = sum_net()
    x0 = np.array([0.1, 0.2])  # classified 1; push toward 0
    plain = elastic.binary_search_attack(net, x0, 0, quick_cfg())
    deep = elastic.binary_search_attack(net, x0, 0, quick_cfg(kappa=1.5))
    assert plain.success and deep.success
    logits = nn.forward(net, deep.x_adv[None])[0]
    assert logits[0] - logits[1] >= 1.5 - 1e-9
    assert deep.l2 > plain.l2


def test_unreachable_margin_fails_cleanly():
    # class-1 margin is 1 - 2*(x0+x1), capped at 1 over the box
    net = sum_net()
    res = elastic.binary_search_attack(
        net, np.array([0.8, 0.7]), 1, quick_cfg(kappa=1.5))
    assert not res.success and res.candidate_count == 0


def test_pooled_search_never_worse_than_single_round():
    net = sum_net()
    x0 = np.array([0.4995, 0.5])  # just below the boundary
    cfg = quick_cfg()
    pooled = elastic.binary_search_attack(net, x0, 0, cfg)
    single = elastic.select_final(
        elastic.fista_attack(net, x0, 0, cfg.c_init, cfg), cfg.rule, cfg.beta
    )
    assert pooled.success
    pooled_score = cfg.beta * pooled.l1 + pooled.l2**2
    single_score = cfg.beta * single.l1 + single.l2**2
    assert pooled_score <= single_score + 1e-12


def test_success_contract_on_toy():
    net = sum_net()
    cfg = quick_cfg()
    for x0 in [np.array([0.1, 0.2]), np.array([0.3, 0.1])]:
        res = elastic.binary_search_attack(net, x0, 0, cfg)
        assert res.success
        assert int(np.argmax(nn.forward(net, res.x_adv))) == 0
        assert res.x_adv.min() >= 0.0 and res.x_adv.max() <= 1.0


def test_untargeted_mode_flips_prediction():
    net = sum_net()
    x0 = np.array([0.1, 0.2])  # classified 1
    cfg = quick_cfg(targeted=False)
    res = elastic.binary_search_attack(net, x0, 1, cfg)
    assert res.success
    assert int(np.argmax(nn.forward(net, res.x_adv))) != 1


def test_batch_matches_single_runs():
    net = sum_net()
    cfg = quick_cfg(iterations=150, binary_search_steps=4)
    xs = np.array([[0.1, 0.2], [0.25, 0.15]])
    batch = elastic.binary_search_attack_batch(net, xs, [0, 0], cfg)
    for i, row in enumerate(xs):
        solo = elastic.binary_search_attack(net, row, 0, cfg)
        assert batch[i].success == solo.success
        np.testing.assert_allclose(batch[i].x_adv, solo.x_adv, atol=1e-10)
        assert batch[i].candidate_count == solo.candidate_count


def test_attack_is_deterministic():
    net = sum_net()
    cfg = quick_cfg(iterations=150, binary_search_steps=4)
    a = elastic.binary_search_attack(net, np.array([0.2, 0.2]), 0, cfg)
    b = elastic.binary_search_attack(net, np.array([0.2, 0.2]), 0, cfg)
    assert a.x_adv.tobytes() == b.x_adv.tobytes()
    assert a.c_final == b.c_final


# ---------------------------------------------------------------------------
# cov_attack


def test_cov_starts_exactly_at_x0():
    # constant logits favoring the target: gradients vanish, w never moves,
    # so the recorded candidate is x0 itself up to the atanh clamp
    net = constant_net(favored=2)
    x0 = np.array([0.25, 0.75])
    res = elastic.cov_attack(net, x0, 2, quick_cfg(iterations=10, binary_search_steps=2))
    assert res.success
    np.testing.assert_allclose(res.x_adv, x0, atol=1e-6)
    assert res.linf < 1e-6


def test_cov_succeeds_on_toy_and_respects_box():
    net = sum_net()
    res = elastic.cov_attack(
        net, np.array([0.1, 0.2]), 0, quick_cfg(iterations=300, binary_search_steps=4)
    )
    assert res.success
    assert int(np.argmax(nn.forward(net, res.x_adv))) == 0
    assert res.x_adv.min() >= 0.0 and res.x_adv.max() <= 1.0


def test_cov_is_deterministic():
    net = sum_net()
    cfg = quick_cfg(iterations=200, binary_search_steps=4)
    a = elastic.cov_attack(net, np.array([0.3, 0.1]), 0, cfg)
    b = elastic.cov_attack(net, np.array([0.3, 0.1]), 0, cfg)
    assert a.x_adv.tobytes() == b.x_adv.tobytes()
