import math

import numpy as np
import pytest
import torch

from ssomotion.control import (
    Controller,
    ControlBranch,
    CrossAttention,
    DirectionalHint,
    ZeroLinear,
    build_control_items,
    clip_direction,
    control_signals,
    interaction_direction,
    locomotion_direction,
    train_control,
)
from ssomotion.denoiser import Condition, DenoiserConfig, build_net
from ssomotion.diffusion import linear_schedule, sample
from ssomotion.encoding import SceneEncoderConfig, ScenePipeline, hash_embed
from ssomotion.skeleton import POSE_DIM, default_skeleton, fk_numpy
from ssomotion.store import LabelVocab, voxelize_points
from ssomotion.training import TrainConfig, loss_terms
from ssomotion.triplane import SensorGridConfig

SKEL = default_skeleton()
VOCAB = LabelVocab(("empty", "floor", "wall"))
DT = torch.float64

MAIN_CFG = DenoiserConfig(width=32, blocks=2, heads=2, num_actions=3, max_len=40)
SENSORS = SensorGridConfig(counts=(9, 9, 7), extents=(2.0, 2.0, 1.6))


def small_scene():
    pts = []
    for x in np.arange(-1.5, 1.5, 0.1):
        for y in np.arange(-1.5, 1.5, 0.1):
            pts.append([x, y, -0.05, 0.4, 0.3, 0.2, 1.0, 1])  # floor slab
    for y in np.arange(-1.5, 1.5, 0.1):
        for z in np.arange(0.0, 1.4, 0.1):
            pts.append([1.45, y, z, 0.7, 0.7, 0.7, 1.0, 2])  # one wall
    return voxelize_points(np.array(pts), 0.1, VOCAB)


def scene_pipeline(seed=0):
    torch.manual_seed(seed)
    cfg = SceneEncoderConfig(dim_low=4, conv_width=8, family_dim=16, tokens=(8, 64))
    return ScenePipeline(VOCAB, hash_embed(VOCAB, 32, seed=1), cfg)


def walk_world(n=40, heading=0.5, speed=1.1, fps=30.0):
    data = np.zeros((n, POSE_DIM))
    d = np.array([math.cos(heading + math.pi / 2), math.sin(heading + math.pi / 2), 0.0])
    for s in range(n):
        data[s, 0:3] = np.array([0.0, 0.0, 0.91]) + d * speed * s / fps
        data[s, 5] = heading
    return data


def toy_cond(s=6, seed=0):
    gen = torch.Generator().manual_seed(seed)
    joints = torch.randn((s, 22, 3), generator=gen, dtype=DT)
    mask = torch.zeros(s, dtype=torch.bool)
    mask[0] = True
    return Condition(0, joints, mask)


class TestHints:
    def test_locomotion_zero_at_goal(self):
        joints = fk_numpy(SKEL, np.zeros(POSE_DIM))
        hint = locomotion_direction(joints[0], joints)
        assert (hint.d == 0).all()

    def test_locomotion_replicates_rows(self):
        joints = fk_numpy(SKEL, np.zeros(POSE_DIM))
        hint = locomotion_direction(joints[0] + [1.0, 0.0, 0.0], joints)
        assert hint.d.shape == (22, 3)
        np.testing.assert_array_equal(hint.d, np.tile([1.0, 0.0, 0.0], (22, 1)))

    def test_locomotion_random_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            joints = rng.normal(size=(22, 3))
            goal = rng.normal(size=3)
            hint = locomotion_direction(goal, joints)
            for row in hint.d:
                np.testing.assert_array_equal(row, goal - joints[0])

    def test_interaction_zero_and_uniform(self):
        joints = fk_numpy(SKEL, np.zeros(POSE_DIM))
        assert (interaction_direction(joints, joints).d == 0).all()
        hint = interaction_direction(joints + [0.1, 0.2, 0.0], joints)
        np.testing.assert_allclose(hint.d, np.tile([0.1, 0.2, 0.0], (22, 1)))

    def test_interaction_rowwise_oracle(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(22, 3)), rng.normal(size=(22, 3))
        hint = interaction_direction(a, b)
        for k in range(22):
            np.testing.assert_array_equal(hint.d[k], a[k] - b[k])

    def test_interaction_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            interaction_direction(np.zeros((21, 3)), np.zeros((22, 3)))

    def test_locomotion_rows_must_match(self):
        with pytest.raises(ValueError, match="identical"):
            DirectionalHint(np.arange(66).reshape(22, 3), "locomotion")


class TestClipDirection:
    def test_zero_stays_zero(self):
        np.testing.assert_array_equal(clip_direction(np.zeros((4, 3))), np.zeros((4, 3)))

    def test_short_vectors_pass_through_exactly(self):
        d = np.array([[0.3, 0.4, 0.0]])  # norm 0.5
        out = clip_direction(d)
        assert (out == d).all()  # factor is algebraically 1

    def test_long_vector_clips_to_unit(self):
        out = clip_direction(np.array([[3.0, 0.0, 0.0]]), eps=1e-6)
        want = (1.0 + 1e-6) / (3.0 + 1e-6) * 3.0
        assert out[0, 0] == pytest.approx(want, rel=1e-12)
        assert np.linalg.norm(out) <= 1.0 + 1e-6

    def test_properties_random(self):
        rng = np.random.default_rng(2)
        d = rng.normal(size=(2000, 3)) * rng.uniform(0, 4, (2000, 1))
        out = clip_direction(d)
        norms_in = np.linalg.norm(d, axis=1)
        norms_out = np.linalg.norm(out, axis=1)
        assert (norms_out <= 1.0 + 1e-6 + 1e-12).all()
        short = norms_in <= 1.0
        assert (out[short] == d[short]).all()
        # parallel: cross products vanish
        cross = np.cross(out, d)
        assert np.abs(cross).max() < 1e-9


def naive_cross_attention(module: CrossAttention, queries: np.ndarray,
                          tokens: np.ndarray) -> np.ndarray:
    """Two-loop per-head attention reference built from the module weights."""
    wq = module.wq.weight.detach().numpy()
    bq = module.wq.bias.detach().numpy()
    wk = module.wk.weight.detach().numpy()
    bk = module.wk.bias.detach().numpy()
    wv = module.wv.weight.detach().numpy()
    bv = module.wv.bias.detach().numpy()
    wb = module.bridge.weight.detach().numpy()
    bb = module.bridge.bias.detach().numpy()
    wo = module.out.weight.detach().numpy()
    bo = module.out.bias.detach().numpy()
    h, hd = module.heads, module.head_dim

    bridged = np.array([wb @ tok + bb for tok in tokens])
    out = np.zeros((len(queries), wo.shape[0]))
    for s, q_vec in enumerate(queries):
        q_full = wq @ q_vec + bq
        heads_out = []
        for i in range(h):
            sl = slice(i * hd, (i + 1) * hd)
            scores = []
            for tok in bridged:
                k_full = wk @ tok + bk
                scores.append(q_full[sl] @ k_full[sl] / math.sqrt(hd))
            scores = np.array(scores)
            w = np.exp(scores - scores.max())
            w = w / w.sum()
            mixed = np.zeros(hd)
            for j, tok in enumerate(bridged):
                v_full = wv @ tok + bv
                mixed += w[j] * v_full[sl]
            heads_out.append(mixed)
        out[s] = wo @ np.concatenate(heads_out) + bo
    return out


class TestCrossAttention:
    def _module(self, seed=0):
        torch.manual_seed(seed)
        return CrossAttention(query_dim=12, token_dim=5, latent=8, heads=2)

    def test_identical_tokens_make_queries_irrelevant(self):
        m = self._module()
        gen = torch.Generator().manual_seed(1)
        tok = torch.randn(1, 5, generator=gen, dtype=DT).repeat(6, 1)
        queries = torch.randn(4, 12, generator=gen, dtype=DT)
        out = m(queries, tok)
        for s in range(1, 4):
            np.testing.assert_allclose(out[s].detach(), out[0].detach(), atol=1e-12)
        # equals W_o applied to that single value vector
        bridged = m.bridge(tok[:1])
        v = m.wv(bridged)
        want = m.out(v)
        np.testing.assert_allclose(out[0].detach(), want[0].detach(), atol=1e-12)

    def test_softmax_rows_sum_to_one(self):
        m = self._module()
        gen = torch.Generator().manual_seed(2)
        attn, _, _ = m.weights_and_values(
            torch.randn(7, 12, generator=gen, dtype=DT),
            torch.randn(5, 5, generator=gen, dtype=DT))
        sums = attn.sum(dim=-1)
        assert (sums - 1.0).abs().max() < 1e-12

    def test_matches_naive_two_loop_reference(self):
        rng = np.random.default_rng(3)
        for seed in range(3):
            m = self._module(seed)
            queries = rng.normal(size=(6, 12))
            tokens = rng.normal(size=(4, 5))
            got = m(torch.as_tensor(queries), torch.as_tensor(tokens)).detach().numpy()
            want = naive_cross_attention(m, queries, tokens)
            assert np.abs(got - want).max() <= 1e-12

    def test_gradients_match_finite_differences(self):
        m = self._module(4)
        gen = torch.Generator().manual_seed(5)
        queries = torch.randn(5, 12, generator=gen, dtype=DT)
        tokens = torch.randn(3, 5, generator=gen, dtype=DT)
        probe = torch.randn(5, 12, generator=gen, dtype=DT)

        def loss_value():
            return (m(queries, tokens) * probe).sum()

        m.zero_grad()
        loss_value().backward()
        rng = np.random.default_rng(0)
        eps = 1e-6
        analytic, numeric = [], []
        for p in m.parameters():
            flat, grad = p.detach().reshape(-1), p.grad.reshape(-1)
            for k in rng.choice(flat.numel(), size=min(6, flat.numel()), replace=False):
                orig = flat[k].item()
                with torch.no_grad():
                    flat[k] = orig + eps
                    up = loss_value().item()
                    flat[k] = orig - eps
                    down = loss_value().item()
                    flat[k] = orig
                numeric.append((up - down) / (2 * eps))
                analytic.append(grad[k].item())
        analytic, numeric = np.array(analytic), np.array(numeric)
        rel = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-12)
        assert rel <= 1e-4

    def test_latent_must_divide_heads(self):
        with pytest.raises(ValueError, match="divide"):
            CrossAttention(8, 4, latent=9, heads=2)


class TestZeroInit:
    def test_fresh_branch_residuals_are_exactly_zero(self):
        main = build_net(MAIN_CFG, seed=0)
        torch.manual_seed(1)
        branch = ControlBranch(MAIN_CFG)
        gen = torch.Generator().manual_seed(2)
        x = torch.randn(6, POSE_DIM, generator=gen, dtype=DT)
        gs = torch.randn(6, MAIN_CFG.width, generator=gen, dtype=DT)
        res = control_signals(branch, main, x, 3, toy_cond(), gs)
        assert len(res) == MAIN_CFG.blocks
        for r in res:
            assert torch.equal(r, torch.zeros_like(r))

    def test_sampling_is_bit_identical_with_fresh_controller(self):
        main = build_net(MAIN_CFG, seed=0)
        torch.manual_seed(3)
        controller = Controller(MAIN_CFG, scene_pipeline())
        scene = small_scene()
        items = build_control_items(scene, walk_world(36), 0,
                                    np.array([0.0, 2.0, 0.91]), SKEL, SENSORS,
                                    stride=5, clip_len=30)
        cond = Condition(0, torch.as_tensor(items[0].joints, dtype=DT),
                         torch.zeros(30, dtype=torch.bool).index_fill_(0, torch.tensor([0]), True))
        sched = linear_schedule(6)
        hint = locomotion_direction(np.array([0.0, 2.0, 0.91]), items[0].joints[0])
        hook = controller.sampling_hook(main, cond, hint, items[0].triplanes)
        with_branch = sample(main, cond, sched, torch.Generator().manual_seed(9),
                             control_hook=hook)
        without = sample(main, cond, sched, torch.Generator().manual_seed(9))
        assert with_branch.data.tobytes() == without.data.tobytes()

    def test_training_signal_flows_after_one_step(self):
        main = build_net(MAIN_CFG, seed=0)
        torch.manual_seed(4)
        controller = Controller(MAIN_CFG, scene_pipeline())
        scene = small_scene()
        items = build_control_items(scene, walk_world(30), 0,
                                    np.array([1.0, 1.0, 0.91]), SKEL, SENSORS)
        sched = linear_schedule(6)
        cfg = TrainConfig(steps=1, batch_size=2, lr=1e-2, seed=0, log_every=0)
        train_control(main, controller, items, sched, cfg, SKEL)
        gen = torch.Generator().manual_seed(5)
        x = torch.randn(30, POSE_DIM, generator=gen, dtype=DT)
        cond = Condition(0, torch.as_tensor(items[0].joints, dtype=DT),
                         torch.ones(30, dtype=torch.bool))
        tokens = controller.scene.tokens(items[0].triplanes)
        hint = torch.as_tensor(items[0].dir_hint.reshape(-1), dtype=DT)
        res = controller.residuals(main, x, 2, cond, hint, tokens)
        assert any(float(r.detach().abs().max()) > 0 for r in res)


class TestTrainControl:
    def _setup(self, steps, lr=3e-3, freeze=False, seed=0):
        main = build_net(MAIN_CFG, seed=0)
        torch.manual_seed(10 + seed)
        controller = Controller(MAIN_CFG, scene_pipeline(seed))
        scene = small_scene()
        goal = np.array([walk_world(40)[-1, 0], walk_world(40)[-1, 1], 0.91])
        items = build_control_items(scene, walk_world(40), 0, goal, SKEL, SENSORS)
        sched = linear_schedule(8)
        cfg = TrainConfig(steps=steps, batch_size=4, lr=lr, seed=0, log_every=0)
        return main, controller, items, sched, cfg, goal

    def test_freeze_base_leaves_main_untouched(self):
        main, controller, items, sched, cfg, _ = self._setup(steps=3)
        before = [p.detach().clone() for p in main.parameters()]
        train_control(main, controller, items, sched, cfg, SKEL, freeze_base=True)
        for p, q in zip(main.parameters(), before):
            assert torch.equal(p.detach(), q)

    def test_fresh_branch_loss_equals_base_loss(self):
        main, controller, items, sched, _, _ = self._setup(steps=1)
        gen = torch.Generator().manual_seed(0)
        x0 = torch.as_tensor(np.stack([items[0].x0, items[1].x0]), dtype=DT)
        t = np.array([3, 5])
        noise = torch.randn(x0.shape, generator=gen, dtype=DT)
        joints = torch.as_tensor(np.stack([items[0].joints, items[1].joints]), dtype=DT)
        mask = torch.zeros(2, 30, dtype=torch.bool)
        mask[:, 0] = True
        cond = Condition(torch.zeros(2, dtype=torch.long), joints, mask)
        from ssomotion.diffusion import q_sample
        x_t = q_sample(x0, t, noise, sched)
        tokens = torch.stack([controller.scene.tokens(items[i].triplanes) for i in (0, 1)])
        hints = torch.as_tensor(np.stack(
            [items[0].dir_hint.reshape(-1), items[1].dir_hint.reshape(-1)]), dtype=DT)
        res = controller.residuals(main, x_t, torch.as_tensor(t, dtype=DT), cond, hints, tokens)
        fmask = torch.ones(2, 30, dtype=torch.bool)
        with_branch = loss_terms(
            main(x_t, torch.as_tensor(t, dtype=DT), cond, residuals=res),
            x0, fmask, SKEL, 30.0)
        base = loss_terms(main(x_t, torch.as_tensor(t, dtype=DT), cond), x0, fmask, SKEL, 30.0)
        assert float(with_branch["total"]) == float(base["total"])

    def test_overfit_single_pair_reaches_clip_end(self):
        main, controller, items, sched, cfg, goal = self._setup(steps=400, lr=3e-3)
        items = items[:1]
        _, curve = train_control(main, controller, items, sched, cfg, SKEL)
        assert curve[-1] < curve[0]
        item = items[0]
        cond = Condition(0, torch.as_tensor(item.joints, dtype=DT),
                         torch.arange(30).lt(1))
        hint = DirectionalHint(item.dir_hint, "locomotion")
        hook = controller.sampling_hook(main, cond, hint, item.triplanes)
        out = sample(main, cond, sched, torch.Generator().manual_seed(3), control_hook=hook)
        err = np.linalg.norm(out.data[-1, 0:3] - item.x0[-1, 0:3])
        assert err <= 0.1
