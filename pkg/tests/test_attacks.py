import numpy as np
import pytest
from scipy.optimize import brentq

from ma2t import attacks as at
from ma2t.attacks import AttackConfig
from ma2t.driving import DEFAULT_BUDGETS
from ma2t.errors import ContractError
from ma2t.pipeline import SITE_IDS, forward_with_noise
from ma2t.rng import Stream

FEATURES = {s: e for s, e in DEFAULT_BUDGETS.items() if s != "Images"}


def l1_oracle(v, eps):
    """Soft-threshold with the threshold found by root finding."""
    a = np.abs(v)
    if a.sum() <= eps:
        return v.copy()
    theta = brentq(lambda t: np.maximum(a - t, 0).sum() - eps, 0.0, a.max())
    return np.sign(v) * np.maximum(a - theta, 0)


def test_projection_examples():
    assert np.allclose(at.project([0.3, -0.5, 0.1], "linf", 0.2), [0.2, -0.2, 0.1])
    assert np.allclose(at.project([3.0, 4.0], "l2", 1.0), [0.6, 0.8])
    assert np.allclose(at.project([3.0, 1.0], "l1", 2.0), [2.0, 0.0])
    assert np.allclose(at.project([0.5, -0.5], "l1", 2.0), [0.5, -0.5])
    assert np.all(at.project(np.ones(4), "l2", 0.0) == 0)
    with pytest.raises(ContractError):
        at.project([1.0], "l2", -1.0)
    with pytest.raises(ContractError):
        at.project([1.0], "l3", 1.0)


def test_l1_projection_matches_oracle():
    rs = Stream(0, "test")
    for _ in range(200):
        v = rs.normal(int(rs.integers(1, 40))) * 3
        eps = float(rs.uniform((), 0.1, 5.0))
        out = at.project(v, "l1", eps)
        np.testing.assert_allclose(out, l1_oracle(v, eps), atol=1e-10)
        assert np.abs(out).sum() <= eps + 1e-9


def test_l1_projection_grid_search():
    # in two dimensions a fine grid over the ball confirms optimality
    g = np.linspace(-1, 1, 801)
    X, Y = np.meshgrid(g, g)
    inside = np.abs(X) + np.abs(Y) <= 1 + 1e-12
    for v in ([1.5, 0.2], [-0.3, 2.0], [0.9, -0.9]):
        d = (X - v[0]) ** 2 + (Y - v[1]) ** 2
        d[~inside] = np.inf
        i = np.unravel_index(np.argmin(d), d.shape)
        assert np.allclose(at.project(v, "l1", 1.0), [X[i], Y[i]], atol=5e-3)


def test_projection_is_idempotent_and_rowwise():
    rs = Stream(1, "test")
    v = rs.normal((6, 3, 5))
    for p in at.NORMS:
        once = at.project_batch(v, p, 0.7)
        assert np.allclose(at.project_batch(once, p, 0.7), once)
        assert np.all(at.batch_norm(once, p) <= 0.7 + 1e-9)
        assert np.allclose(once[2], at.project(v[2], p, 0.7))


def test_image_budget_arithmetic():
    assert at.image_budget(0.2, "linf") == 0.2
    assert np.isclose(at.image_budget(0.2, "l1"), 0.2 * 32)
    assert np.isclose(at.image_budget(0.2, "l2"), 0.2 * 1024)


def test_config_validation():
    for bad in [dict(method="cw"), dict(norm="l0"), dict(objective="x"), dict(budgets={"Nope": 1.0}),
                dict(budgets={"Images": -0.1}), dict(steps=-1), dict(restarts=0),
                dict(step_size={"Images": 2.0})]:
        with pytest.raises(ContractError):
            AttackConfig(**bad)
    assert AttackConfig().alpha("Images") == pytest.approx(0.16)


def test_fgsm_is_signed_gradient(pretrained, batch):
    pipe = pretrained.to_pipeline()
    cfg = AttackConfig("fgsm", budgets=dict(FEATURES))
    pert = at.fgsm(pipe, *batch, cfg)
    zero = {s: np.zeros((8,) + tuple(pipe.site(s).shape)) for s in FEATURES}
    _, grads = at.evaluate_objective(pipe, *batch, zero, cfg)
    for s, eps in FEATURES.items():
        assert np.array_equal(pert.deltas[s], eps * np.sign(grads[s]))


def test_fgsm_zero_budget_is_clean(pretrained, batch):
    pipe = pretrained.to_pipeline()
    pert = at.fgsm(pipe, *batch, AttackConfig("fgsm", budgets={s: 0.0 for s in SITE_IDS}))
    assert all(not d.any() for d in pert.deltas.values())
    clean = forward_with_noise(pipe, *batch)[1].total.item()
    assert forward_with_noise(pipe, *batch, pert.as_noise())[1].total.item() == clean


def test_pgd_on_one_dimensional_quadratic():
    # maximum of x^2 on [-1, 1] is at the boundary
    best, val = at.pgd_vector(lambda d: ((d ** 2).sum(1), 2 * d), 1, "linf", 1.0,
                              steps=5, restarts=1, stream=Stream(3, "attack"))
    assert abs(best[0, 0]) == pytest.approx(1.0) and val[0] == pytest.approx(1.0)


def test_ascent_on_shifted_quadratic_moves_away_from_minimum():
    # L = (d - 1)^2 has gradient -2 at 0, so loss ascent heads to -eps
    f = lambda d: (((d - 1.0) ** 2).sum(1), 2 * (d - 1.0))
    best, val = at.pgd_vector(f, 1, "linf", 0.5, steps=5, restarts=3, stream=Stream(0, "attack"))
    assert best[0, 0] == pytest.approx(-0.5) and val[0] == pytest.approx(2.25)


def test_mifgsm_one_step_equals_fgsm(pretrained, batch):
    pipe = pretrained.to_pipeline()
    eps = dict(FEATURES)
    f = at.fgsm(pipe, *batch, AttackConfig("fgsm", budgets=eps))
    m = at.mifgsm(pipe, *batch, AttackConfig("mifgsm", budgets=eps, steps=1, step_size=dict(eps)))
    for s in eps:
        assert np.allclose(f.deltas[s], m.deltas[s])


def test_mifgsm_zero_momentum_is_iterated_sign_step(pretrained, batch):
    pipe = pretrained.to_pipeline()
    eps = {"MotionPlan": 0.1}
    m = at.mifgsm(pipe, *batch, AttackConfig("mifgsm", budgets=eps, steps=3, momentum=0.0))
    cfg = AttackConfig("pgd", budgets=eps)
    d = {"MotionPlan": np.zeros((8,) + tuple(pipe.site("MotionPlan").shape))}
    for _ in range(3):
        _, g = at.evaluate_objective(pipe, *batch, d, cfg)
        d["MotionPlan"] = np.clip(d["MotionPlan"] + 0.02 * np.sign(g["MotionPlan"]), -0.1, 0.1)
    assert np.allclose(m.deltas["MotionPlan"], d["MotionPlan"])


def test_pgd_steps_zero_keeps_best_start(pretrained, batch):
    pipe = pretrained.to_pipeline()
    cfg = AttackConfig(budgets=dict(FEATURES), steps=0, restarts=3)
    pert = at.pgd(pipe, *batch, cfg, Stream(0, "attack"))
    assert pert.check_budgets()
    vals, _ = at.evaluate_objective(pipe, *batch, pert.deltas, cfg, with_grad=False)
    assert np.allclose(vals, pert.flags["objective"])


def test_pgd_never_worse_with_more_work(pretrained, batch):
    pipe = pretrained.to_pipeline()
    base = AttackConfig(steps=2, restarts=1)
    objective = lambda c: np.array(at.pgd(pipe, *batch, c, Stream(5, "attack")).flags["objective"])
    a = objective(base)
    assert np.all(objective(base.replace(steps=5)) >= a - 1e-12)
    assert np.all(objective(base.replace(restarts=3)) >= a - 1e-12)


def test_pgd_respects_budgets_and_clamp(pretrained, batch):
    pipe = pretrained.to_pipeline()
    obs = batch[0]
    for norm in at.NORMS:
        budgets = dict(DEFAULT_BUDGETS, Images=at.image_budget(0.2, norm))
        pert = at.pgd(pipe, *batch, AttackConfig(norm=norm, budgets=budgets, restarts=2))
        assert pert.check_budgets()
        img = obs + pert.deltas["Images"]
        assert img.min() >= 0.0 and img.max() <= 1.0


def test_attack_leaves_parameters_alone(pretrained, batch):
    pipe = pretrained.to_pipeline()
    before = pipe.checksum()
    flags = [p.requires_grad for p in pipe.parameters()]
    at.pgd(pipe, *batch, AttackConfig(restarts=1))
    at.mifgsm(pipe, *batch, AttackConfig("mifgsm"))
    assert pipe.checksum() == before
    assert [p.requires_grad for p in pipe.parameters()] == flags


def test_objectives_pick_module_losses(pretrained, batch):
    pipe = pretrained.to_pipeline()
    zero = {s: np.zeros((8,) + tuple(pipe.site(s).shape)) for s in SITE_IDS}
    _, br = forward_with_noise(pipe, *batch)
    ps = br.per_sample
    for objective, expect in [("total_loss", sum(ps[m].data for m in ps)),
                              ("plan_loss", ps["Plan"].data)]:
        vals, _ = at.evaluate_objective(pipe, *batch, zero, AttackConfig(objective=objective),
                                        with_grad=False)
        assert np.allclose(vals, expect)
    # the plan-loss gradient at a site that only feeds planning matches total loss there
    _, gp = at.evaluate_objective(pipe, *batch, zero, AttackConfig(objective="plan_loss"))
    _, gt = at.evaluate_objective(pipe, *batch, zero, AttackConfig(objective="total_loss"))
    assert np.allclose(gp["MotionPlan"], gt["MotionPlan"])
    _, gs = at.evaluate_objective(pipe, *batch, zero, AttackConfig(objective="sub_loss"))
    assert np.allclose(gs["MotionPlan"], gp["MotionPlan"])


def test_pgd_beats_random_noise(pretrained, small_data):
    pipe = pretrained.to_pipeline()
    _, val = small_data
    obs, labels = val.batch(np.arange(24))
    cfg = AttackConfig(restarts=1)
    pert = at.pgd(pipe, obs, labels, cfg)
    attacked = forward_with_noise(pipe, obs, labels, pert.as_noise())[1].total.item()
    rs = Stream(9, "test")
    rand = {s: at._fit_image(rs.uniform(pert.deltas[s].shape, -e, e), obs, s, pipe)
            for s, e in DEFAULT_BUDGETS.items()}
    from ma2t.autodiff import Tensor
    noisy = forward_with_noise(pipe, obs, labels, {s: Tensor._wrap(d) for s, d in rand.items()})
    clean = forward_with_noise(pipe, obs, labels)[1].total.item()
    assert attacked > noisy[1].total.item() and attacked > clean


def test_adaptive_wrappers(pretrained, batch):
    pipe = pretrained.to_pipeline()
    cfg = AttackConfig(restarts=1, steps=1)
    assert set(at.module_wise_attack(pipe, *batch, cfg).deltas) == set(SITE_IDS)
    assert set(at.sub_loss_attack(pipe, *batch, cfg).deltas) == set(DEFAULT_BUDGETS)
    assert at.plan_targeted_attack(pipe, *batch, cfg).check_budgets()


def test_transfer_with_self_is_whitebox(pretrained, batch):
    pipe = pretrained.to_pipeline()
    cfg = AttackConfig(budgets={"Images": 0.2}, restarts=1)
    _, br, pert = at.transfer_attack(pipe, pipe, *batch, cfg, Stream(0, "attack"))
    white = at.pgd(pipe, *batch, cfg, Stream(0, "attack"))
    assert np.array_equal(pert.deltas["Images"], white.deltas["Images"])
    direct = forward_with_noise(pipe, *batch, white.as_noise())[1].total.item()
    assert br.total.item() == direct
    with pytest.raises(ContractError):
        at.transfer_attack(pipe, pipe, *batch, AttackConfig(), Stream(0))


def test_universal_noise(pretrained, small_data):
    pipe = pretrained.to_pipeline()
    train, val = small_data
    seen = []
    delta = at.universal_noise(pipe, train, 0.2, epochs=1, callback=lambda e, d: seen.append(e))
    assert delta.shape == (4, 32, 32) and np.abs(delta).max() <= 0.2 and seen == [0]
    assert not at.universal_noise(pipe, train, 0.0).any()
    obs, labels = val.batch(np.arange(len(val)))
    from ma2t.autodiff import Tensor
    clean = forward_with_noise(pipe, obs, labels)[1].total.item()
    noisy = forward_with_noise(pipe, obs, labels, {"Images": Tensor._wrap(np.broadcast_to(delta, obs.shape).copy())})
    assert noisy[1].total.item() > clean


def test_perturbation_round_trip(tmp_path, pretrained, batch):
    pert = at.pgd(pretrained.to_pipeline(), *batch, AttackConfig(restarts=1, steps=1))
    at.save_perturbation(tmp_path / "p.bin", pert)
    back = at.load_perturbation(tmp_path / "p.bin")
    assert back.norm == pert.norm and back.budgets == pert.budgets
    for s in pert.deltas:
        assert back.deltas[s].tobytes() == pert.deltas[s].tobytes()
    (tmp_path / "bad.bin").write_bytes(b"nonsense")
    with pytest.raises(ContractError):
        at.load_perturbation(tmp_path / "bad.bin")
