import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dpfedemb.config import config_from_dict
from dpfedemb.data import VirtualClient, generate_synthetic_identities
from dpfedemb.model import Batch, MlpConfig, ModelSplit, build_model, forward_loss_and_grads, init_head, \
    load_checkpoint
from dpfedemb.params import PURPOSE_BATCH, PURPOSE_HEAD, RngStream, TrainableMask
from dpfedemb.trainer import (ClientOptConfig, FederatedTrainer, ServerOptState, client_update, local_train,
                              minibatch_schedule, privacy_report, run_training, server_step, write_round_logs)

MODEL = MlpConfig(6, (5,), 4)


def small_cfg(**over):
    raw = dict(seed=3, mode="fedemb",
               data=dict(num_users=24, examples_per_class=5, input_dim=6, signal_dim=4, nuisance_std=0.5,
                         eval_users=6, eval_examples_per_class=4),
               model=dict(hidden_dims=[5], embed_dim=4),
               federated=dict(users_per_vc=3, vcs_per_round=3, rounds=6, examples_cap=64),
               client=dict(local_steps=3, batch_size=4, lr=0.05, head_lr_scale=10.0),
               server=dict(lr=1.0, momentum=0.9),
               dp=dict(noise_multiplier=0.5, clip_norm=0.4))
    for k, v in over.items():
        if isinstance(v, dict):
            raw.setdefault(k, {}).update(v)
        else:
            raw[k] = v
    return config_from_dict(raw)


def _vc(n=12, classes=(3, 8, 5), seed=0):
    gen = np.random.default_rng(seed)
    labels = np.array([classes[i % len(classes)] for i in range(n)])
    return VirtualClient((0, 1), gen.standard_normal((n, MODEL.input_dim)), labels)


def test_client_zero_learning_rate_gives_zero_delta():
    theta, _ = build_model(MODEL, 10, RngStream(0))
    for mode in ("fedemb", "fedavg"):
        opt = ClientOptConfig(mode, 5, 4, 0.0, 0.0, 0.9)
        up = client_update(theta, init_head(10, 4, RngStream(1)), _vc(), MODEL, opt, 1.0, RngStream(2))
        assert np.all(up.delta == 0) and up.norm == 0.0


def test_single_step_equals_negative_gradient_fedavg():
    theta, _ = build_model(MODEL, 10, RngStream(0))
    omega = init_head(10, 4, RngStream(1))
    vc = _vc()
    opt = ClientOptConfig("fedavg", 1, 1000, 0.3, 123.0, 0.0)  # head rate ignored in fedavg
    up = client_update(theta, omega, vc, MODEL, opt, math.inf, RngStream(2))
    _, g_t, g_o = forward_loss_and_grads(theta, omega, MODEL, ModelSplit(MODEL.backbone_len, 10, 4),
                                         Batch(vc.inputs, vc.labels))
    np.testing.assert_allclose(up.delta, -0.3 * np.concatenate([g_t, g_o]), atol=1e-14)


def test_single_step_equals_negative_gradient_fedemb():
    theta, _ = build_model(MODEL, 1, RngStream(0))
    vc = _vc()
    rng = RngStream(2)
    opt = ClientOptConfig("fedemb", 1, 1000, 0.3, 30.0, 0.0)
    up = client_update(theta, None, vc, MODEL, opt, math.inf, rng)
    _, local = np.unique(vc.labels, return_inverse=True)
    head = init_head(3, 4, rng.child(PURPOSE_HEAD))
    _, g_t, _ = forward_loss_and_grads(theta, head, MODEL, ModelSplit(MODEL.backbone_len, 3, 4),
                                       Batch(vc.inputs, local))
    assert up.delta.shape == theta.shape
    np.testing.assert_allclose(up.delta, -0.3 * g_t, atol=1e-14)


@settings(max_examples=30)
@given(st.integers(0, 1000), st.floats(1e-4, 2.0), st.sampled_from(["fedavg", "fedemb"]))
def test_clipped_norm_bound(seed, gamma, mode):
    theta, _ = build_model(MODEL, 10, RngStream(seed))
    opt = ClientOptConfig(mode, 4, 3, 0.5, 5.0, 0.9)
    up = client_update(theta, init_head(10, 4, RngStream(1)), _vc(seed=seed), MODEL, opt, gamma, RngStream(seed))
    assert np.linalg.norm(up.delta) <= gamma + 1e-12


def test_client_errors():
    theta, _ = build_model(MODEL, 1, RngStream(0))
    opt = ClientOptConfig("fedemb", 1, 4, 0.1, 1.0)
    empty = VirtualClient((), np.zeros((0, 6)), np.zeros(0, dtype=np.int64))
    with pytest.raises(ValueError, match="no examples"):
        client_update(theta, None, empty, MODEL, opt, 1.0, RngStream(0))
    with pytest.raises(ValueError):
        client_update(theta, None, _vc(), MODEL, ClientOptConfig("fedavg", 1, 4, 0.1, 1.0), 1.0, RngStream(0))
    with pytest.raises(ValueError):
        ClientOptConfig("fedprox", 1, 1, 0.1, 0.1)
    with pytest.raises(ValueError):
        ClientOptConfig("fedemb", 0, 1, 0.1, 0.1)


def test_frozen_entries_have_zero_delta():
    theta, _ = build_model(MODEL, 10, RngStream(0))
    mask = TrainableMask.from_ranges(MODEL.backbone_len, [(0, 12), (30, 35)])
    for mode in ("fedemb", "fedavg"):
        opt = ClientOptConfig(mode, 4, 4, 0.2, 2.0, 0.9, mask)
        up = client_update(theta, init_head(10, 4, RngStream(1)), _vc(), MODEL, opt, math.inf, RngStream(3))
        assert np.all(up.delta[:MODEL.backbone_len][mask.frozen] == 0)
        assert np.any(up.delta[:MODEL.backbone_len][~mask.frozen] != 0)


def test_head_relabel_invariance():
    theta, _ = build_model(MODEL, 1, RngStream(0))
    vc = _vc(n=15, classes=(0, 1, 2, 3, 4))
    head = init_head(5, 4, RngStream(1)).reshape(5, 4)
    perm = np.array([3, 0, 4, 1, 2])
    sched = minibatch_schedule(15, 4, 6, RngStream(2))
    opt = ClientOptConfig("fedemb", 6, 4, 0.1, 3.0, 0.9)
    a, _, _ = local_train(theta, head.ravel(), vc.inputs, vc.labels, sched, MODEL, opt)
    # class c is now called perm[c]; its head row moves with it
    permuted = np.empty_like(head)
    permuted[perm] = head
    b, _, _ = local_train(theta, permuted.ravel(), vc.inputs, perm[vc.labels], sched, MODEL, opt)
    np.testing.assert_allclose(a, b, atol=1e-10, rtol=0)


def test_minibatch_schedule():
    idx, off = minibatch_schedule(10, 4, 5, RngStream(0))
    sizes = np.diff(off).tolist()
    assert sizes == [4, 4, 2, 4, 4]
    assert sorted(idx[:10].tolist()) == list(range(10))
    idx, off = minibatch_schedule(3, 50, 2, RngStream(0))
    assert np.diff(off).tolist() == [3, 3]


def test_server_step_examples():
    st_ = ServerOptState(1.0, 0.0, np.zeros(3))
    np.testing.assert_array_equal(server_step(st_, np.ones(3), np.array([1.0, 2.0, 3.0])), [2, 3, 4])
    st_ = ServerOptState(0.5, 0.9, np.zeros(2))
    theta = np.array([1.0, -1.0])
    for _ in range(5):
        theta = server_step(st_, theta, np.zeros(2))
    np.testing.assert_array_equal(theta, [1.0, -1.0])
    with pytest.raises(ValueError, match="length mismatch"):
        server_step(st_, theta, np.zeros(3))


def test_server_step_matches_manual_unroll():
    a, mu = 0.3, 0.9
    d1, d2 = np.array([1.0, -2.0]), np.array([0.5, 4.0])
    st_ = ServerOptState(a, mu, np.zeros(2))
    theta = server_step(st_, np.zeros(2), d1)
    theta = server_step(st_, theta, d2)
    # v1 = d1; th1 = a d1; v2 = mu d1 + d2; th2 = a d1 + a (mu d1 + d2)
    np.testing.assert_allclose(theta, a * d1 + a * (mu * d1 + d2), rtol=1e-15)
    np.testing.assert_allclose(st_.velocity, mu * d1 + d2, rtol=1e-15)


def test_centralized_equivalence():
    for mode in ("fedavg", "fedemb"):
        cfg = small_cfg(mode=mode, federated=dict(users_per_vc=24, vcs_per_round=1, rounds=1, examples_cap=10_000),
                        server=dict(lr=1.0, momentum=0.0), dp=dict(noise_multiplier=0.0, clip_norm=math.inf))
        tr = FederatedTrainer(cfg)
        state = tr.init_state()
        theta0, omega0 = tr.split_params(state.params)
        (vc,) = tr.plan_round(0).virtual_clients
        rng = tr.rng.child(PURPOSE_BATCH, 0, 0)
        sched = minibatch_schedule(len(vc), cfg.client.batch_size, cfg.client.local_steps, rng.child(PURPOSE_BATCH))
        if mode == "fedemb":
            classes, y = np.unique(vc.labels, return_inverse=True)
            head = init_head(classes.size, 4, rng.child(PURPOSE_HEAD))
        else:
            y, head = vc.labels, omega0
        th, om, _ = local_train(theta0, head, vc.inputs, y, sched, tr.model_cfg, tr.client_opt)
        new, _ = tr.run_round(state)
        expected = th if mode == "fedemb" else np.concatenate([th, om])
        assert np.max(np.abs(new.params - expected)) < 1e-10


def test_noop_round():
    cfg = small_cfg(federated=dict(users_per_round=0, rounds=3))
    res = run_training(cfg)
    assert [l.loss for l in res.logs] == [None] * 3
    np.testing.assert_array_equal(res.theta, FederatedTrainer(cfg).init_state().params)
    assert all(l.num_clients == 0 and l.eps_add_remove == 0.0 for l in res.logs)


def _strip(logs):
    return [(l.round, l.loss, l.clip_fraction, l.gamma, l.recall_at_far, l.eps_add_remove, l.rho) for l in logs]


@pytest.mark.parametrize("over", [
    {},
    {"mode": "fedavg"},
    {"dp": {"mechanism": "tree"}},
    {"dp": {"noise_multiplier": 0.0, "adaptive_clip": True}},
])
def test_same_seed_same_logs_and_thread_invariance(over):
    a = run_training(small_cfg(**over))
    b = run_training(small_cfg(**over), threads=3)
    assert _strip(a.logs) == _strip(b.logs)
    np.testing.assert_array_equal(a.theta, b.theta)


def test_seed_changes_results():
    a = run_training(small_cfg(seed=1))
    b = run_training(small_cfg(seed=2))
    assert not np.array_equal(a.theta, b.theta)


def test_zero_rounds_returns_initial_and_respects_warm_start(tmp_path):
    cfg = small_cfg(federated=dict(rounds=0))
    res = run_training(cfg)
    np.testing.assert_array_equal(res.theta, FederatedTrainer(cfg).init_state().params)
    trained = run_training(small_cfg(federated=dict(rounds=2)), checkpoint_dir=tmp_path)
    warm = run_training(small_cfg(federated=dict(rounds=0), model=dict(warm_start=str(tmp_path / "final.ckpt"))))
    np.testing.assert_array_equal(warm.theta, trained.theta)
    assert res.privacy["epsilon_add_remove_poisson"] == 0.0


@pytest.mark.parametrize("over", [{}, {"mode": "fedavg"}, {"dp": {"mechanism": "tree"}},
                                  {"dp": {"noise_multiplier": 0.0, "adaptive_clip": True}}])
def test_resume_is_bit_exact(tmp_path, over):
    full = run_training(small_cfg(federated=dict(rounds=20), **over))
    ck = tmp_path / "ck"
    run_training(small_cfg(federated=dict(rounds=20), run=dict(checkpoint_every=10), **over), checkpoint_dir=ck)
    resumed = run_training(small_cfg(federated=dict(rounds=20), **over), resume=ck / "round_000010.ckpt")
    np.testing.assert_array_equal(full.theta, resumed.theta)
    assert _strip(full.logs[10:]) == _strip(resumed.logs)


def test_adaptive_clip_only_without_noise():
    res = run_training(small_cfg(dp=dict(noise_multiplier=0.0, adaptive_clip=True, clip_norm=5.0)))
    gammas = [l.gamma for l in res.logs]
    assert gammas[0] == 5.0 and len(set(gammas)) > 1
    res = run_training(small_cfg(dp=dict(noise_multiplier=0.5, adaptive_clip=True, clip_norm=5.0)))
    assert {l.gamma for l in res.logs} == {5.0}


def test_fedemb_releases_backbone_only(tmp_path):
    emb = run_training(small_cfg(), checkpoint_dir=tmp_path / "e")
    avg = run_training(small_cfg(mode="fedavg"), checkpoint_dir=tmp_path / "a")
    ce, ca = load_checkpoint(tmp_path / "e" / "final.ckpt"), load_checkpoint(tmp_path / "a" / "final.ckpt")
    assert ce.head_len == 0 and ce.params.size == MlpConfig(6, (5,), 4).backbone_len
    assert ca.head_len == 24 * 4
    assert emb.omega is None and avg.omega.shape == (96,)


def test_round_logs_and_privacy():
    res = run_training(small_cfg(eval=dict(every=2, far=0.1), dp=dict(mechanism="tree")))
    assert [l.round for l in res.logs] == list(range(6))
    assert [l.recall_at_far is not None for l in res.logs] == [False, True] * 3
    assert res.logs[-1].rho == pytest.approx(4 / (2 * 0.25))  # depth(6) = 4, sigma = 0.5
    eps = [l.eps_add_remove for l in res.logs]
    assert eps == sorted(eps)
    assert res.privacy["epsilon_add_remove_poisson"] == pytest.approx(eps[-1])
    assert res.privacy["epsilon_substitute_conservative"] > res.privacy["epsilon_add_remove_poisson"]
    buf = io.StringIO()
    write_round_logs(res.logs, buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "round,loss,clip_fraction,sigma,gamma,recall_at_far,eps_add_remove,rho"
    assert len(lines) == 7 and lines[1].split(",")[5] == ""


def test_privacy_report_zero_noise_is_infinite():
    rep = privacy_report(0.1, 0.0, 10, 1e-5, "gaussian")
    assert rep["epsilon_add_remove_poisson"] == math.inf


def test_trainer_rejects_oversampling():
    cfg = small_cfg()
    users = generate_synthetic_identities(4, 1, 2, 6, 0.1, RngStream(0))
    with pytest.raises(ValueError, match="exceeds"):
        FederatedTrainer(cfg, users=users)
