import numpy as np
import pytest

from pcmas.diffcore import hyper_forward, param_count
from pcmas.hyperdesign import (
    Architecture,
    DesignSpace,
    GameContext,
    TrainingDiverged,
    actor_step,
    build_type_nets,
    bundle_hash,
    critic_step,
    desk_config,
    generate_policies,
    init_bundle,
    load_bundle,
    run_episode,
    sample_context,
    save_bundle,
    train,
    type_policies,
    write_history,
)
from pcmas.mfac import Batch, MfacConfig, critic_loss_grad, encode_obs
from pcmas.taxidata import synthetic_demand

TINY = Architecture((6,), (6,), (5,), (5,), (4,))


@pytest.fixture(scope="module")
def demand():
    return synthetic_demand(seed=0, background=0.3)


def tiny_cfg(**kw):
    base = dict(architecture=TINY, episodes=30, update_interval=5, updates_per_phase=3,
                min_buffer=16)
    base.update(kw)
    return desk_config(**base)


def random_batch(rng, n, n_cells, contexts):
    ctx = contexts[rng.integers(len(contexts), size=n)]
    obs = np.hstack([encode_obs(rng.integers(n_cells, size=n), 3, 21, n_cells), ctx])
    nxt = np.hstack([encode_obs(rng.integers(n_cells, size=n), 5, 21, n_cells), ctx])
    dist = lambda: rng.dirichlet(np.ones(5), size=n)
    return Batch(obs, rng.integers(5, size=n), dist(), dist(), dist(), rng.normal(size=n), nxt,
                 dist(), dist(), rng.random(n) < 0.3, ctx)


def test_hyper_gradient_routing_matches_finite_differences():
    rng = np.random.default_rng(0)
    mcfg = MfacConfig(lr_actor=1e-3, lr_critic=1e-3)
    nets = build_type_nets(TINY, 4, mcfg, seed=3)
    contexts = np.array([[0.2, 0.5], [0.7, 0.1], [0.4, 0.9]])
    batch = random_batch(rng, 12, 4, contexts)
    ctx_u, inv = np.unique(batch.context, axis=0, return_inverse=True)
    inv = inv.reshape(-1)

    def critic_loss(phi):
        theta = hyper_forward(nets.critic.spec, phi, ctx_u)[inv]
        tgt = hyper_forward(nets.critic.spec, nets.critic_target, ctx_u)[inv]
        act = hyper_forward(nets.actor.spec, nets.actor.params, ctx_u)[inv]
        return critic_loss_grad(nets.critic_spec, theta, batch, tgt, nets.actor_spec, act)

    theta_grad = critic_loss(nets.critic.params)[1]
    analytic = nets.route(nets.critic, ctx_u, inv, theta_grad)
    phi = nets.critic.params
    for k in rng.choice(phi.size, 25, replace=False):
        e = np.zeros_like(phi)
        e[k] = 1e-6
        fd = (critic_loss(phi + e)[0] - critic_loss(phi - e)[0]) / 2e-6
        assert abs(fd - analytic[k]) <= 1e-4 * max(1.0, abs(fd))

    # actor loss holds the advantage fixed, so check routing on a linear functional instead
    G = rng.normal(size=(len(inv), param_count(nets.actor_spec)))
    lin = lambda phi: float(np.sum(G * hyper_forward(nets.actor.spec, phi, ctx_u)[inv]))
    analytic = nets.route(nets.actor, ctx_u, inv, G)
    phi = nets.actor.params
    for k in rng.choice(phi.size, 25, replace=False):
        e = np.zeros_like(phi)
        e[k] = 1e-6
        fd = (lin(phi + e) - lin(phi - e)) / 2e-6
        assert abs(fd - analytic[k]) <= 1e-4 * max(1.0, abs(fd))


def test_steps_update_hypernet_params():
    rng = np.random.default_rng(1)
    mcfg = MfacConfig(lr_actor=1e-3, lr_critic=1e-3)
    nets = build_type_nets(TINY, 4, mcfg, seed=3)
    before = nets.critic.params.copy(), nets.actor.params.copy()
    batch = random_batch(rng, 16, 4, np.array([[0.1, 0.2], [0.3, 0.4]]))
    assert np.isfinite(critic_step(nets, batch, mcfg))
    assert np.isfinite(actor_step(nets, batch, mcfg))
    assert not np.array_equal(before[0], nets.critic.params)
    assert not np.array_equal(before[1], nets.actor.params)


def test_plain_nets_are_context_free(demand):
    bundle = init_bundle(tiny_cfg(), demand, kind="plain", include_context=False)
    g1 = generate_policies(bundle, GameContext(2, 0.1))
    g2 = generate_policies(bundle, GameContext(8, 0.9))
    for k in g1:
        np.testing.assert_array_equal(g1[k], g2[k])


def test_generated_policies_depend_on_context(demand):
    bundle = init_bundle(tiny_cfg(), demand)
    g1 = generate_policies(bundle, GameContext(2, 0.1))
    g2 = generate_policies(bundle, GameContext(8, 0.9))
    assert set(g1) == {"actor_c", "critic_c", "actor_u", "critic_u"}
    assert not np.array_equal(g1["actor_c"], g2["actor_c"])
    assert g1["actor_c"].shape == (param_count(bundle.nets["c"].actor_spec),)


def test_sample_context_bounds():
    rng = np.random.default_rng(0)
    space = DesignSpace((2, 5), (0.25, 0.5))
    seen = set()
    for _ in range(500):
        c = sample_context(space, rng)
        assert isinstance(c.n_c, int) and space.contains(c)
        seen.add(c.n_c)
    assert seen == {2, 3, 4, 5}
    with pytest.raises(ValueError):
        DesignSpace((5, 2))


def test_episode_transitions_chain_and_telescoping(demand):
    bundle = init_bundle(tiny_cfg(), demand)
    ctx = GameContext(4, 0.6)
    pols = type_policies(bundle, ctx)
    res = run_episode(demand, ctx, 10, pols, seed=5, rng=np.random.default_rng(2),
                      reward_scale=0.5)
    c, u = res.transitions["c"], res.transitions["u"]
    assert len(c) + len(u) == res.n_decisions
    np.testing.assert_allclose(c.context, np.tile([0.4, 0.6], (len(c), 1)))
    # with gamma = 1 the sum of per-transition rewards telescopes to the episode return
    total = c.reward.sum() + u.reward.sum()
    assert total == pytest.approx(0.5 * res.reward_sum.sum())
    # one terminal transition per agent that ever acted, and non-terminal links line up
    assert c.terminal.sum() + u.terminal.sum() == 10
    nonterm = np.flatnonzero(~c.terminal)
    obs_rows = {tuple(r) for r in c.obs}
    assert all(tuple(c.next_obs[j]) in obs_rows for j in nonterm)


def test_eval_mode_keeps_no_transitions(demand):
    bundle = init_bundle(tiny_cfg(), demand)
    ctx = GameContext(3, 0.2)
    res = run_episode(demand, ctx, 10, type_policies(bundle, ctx), 0, np.random.default_rng(0),
                      mode="eval", mean_mode="previous")
    assert res.transitions == {} and res.metrics.total_requests > 0


def test_override_agent_collected_separately(demand):
    bundle = init_bundle(tiny_cfg(), demand)
    ctx = GameContext(3, 0.2)
    pols = type_policies(bundle, ctx)
    res = run_episode(demand, ctx, 10, pols, 0, np.random.default_rng(0), overrides={0: pols["c"]})
    assert 0 in res.transitions
    assert res.transitions[0].terminal.sum() == 1


def test_training_deterministic_and_resumable(demand, tmp_path):
    a = train(tiny_cfg(episodes=30), demand)
    b = train(tiny_cfg(episodes=30), demand)
    assert bundle_hash(a) == bundle_hash(b)
    assert a.phases == 6 and len(a.history) == 30

    half = train(tiny_cfg(episodes=15), demand)
    save_bundle(half, tmp_path / "half.ckpt")
    resumed = train(tiny_cfg(episodes=30), demand, bundle=load_bundle(tmp_path / "half.ckpt"))
    assert bundle_hash(resumed) == bundle_hash(a)
    assert resumed.history == a.history

    write_history(a, tmp_path)
    assert (tmp_path / "history.csv").read_text().startswith("episode,n_c,alpha")
    assert "critic_loss_c" in (tmp_path / "updates.csv").read_text().splitlines()[0]


def test_nonfinite_updates_abort_with_diagnostics(demand, tmp_path):
    bundle = init_bundle(tiny_cfg(nonfinite_limit=1), demand)
    bundle.nets["c"].critic.params[:] = np.nan
    bundle.nets["u"].critic.params[:] = np.nan
    with pytest.raises(TrainingDiverged):
        train(tiny_cfg(nonfinite_limit=1, episodes=40), demand, bundle=bundle, out_dir=tmp_path)
    assert (tmp_path / "diverged.ckpt").exists()
