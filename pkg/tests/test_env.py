import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from segrl.env import (
    NUM_CHANNELS,
    EnvConfig,
    FeatureImage,
    PatchEncoder,
    SceneState,
    ToyEnv,
    patch_embed,
    rasterize,
)
from segrl.errors import ConfigError, ContractViolation


def _state(effector, target, distractors=(), obj=None):
    return SceneState(
        np.asarray(effector, float),
        np.asarray(target, float),
        None if obj is None else np.asarray(obj, float),
        [(np.asarray(p, float), s) for p, s in distractors],
        0,
        np.random.default_rng(0),
    )


def _same_state(a, b):
    assert np.array_equal(a.effector_pos, b.effector_pos)
    assert np.array_equal(a.target_pos, b.target_pos)
    assert (a.object_pos is None) == (b.object_pos is None)
    assert len(a.distractors) == len(b.distractors)
    for (p, s), (q, t) in zip(a.distractors, b.distractors):
        assert np.array_equal(p, q) and s == t


def test_reset_is_deterministic():
    env = ToyEnv(EnvConfig())
    _same_state(env.reset(7), env.reset(7))


def test_distractor_count_in_range():
    env = ToyEnv(EnvConfig(distractors_min=0, distractors_max=4))
    counts = {len(env.reset(s).distractors) for s in range(300)}
    assert counts <= set(range(5))
    assert len(counts) > 1


def test_push_object_present_and_separated():
    env = ToyEnv(EnvConfig(task="push"))
    for seed in range(1000):
        s = env.reset(seed)
        assert s.object_pos is not None
        assert np.linalg.norm(s.object_pos - s.target_pos) >= 0.1


def test_minimum_pairwise_separation():
    env = ToyEnv(EnvConfig(distractors_min=4, distractors_max=4))
    for seed in range(200):
        s = env.reset(seed)
        pts = [s.effector_pos, s.target_pos] + [p for p, _ in s.distractors]
        for i in range(len(pts)):
            for j in range(i):
                assert np.linalg.norm(pts[i] - pts[j]) >= 0.1


def test_invalid_task_is_config_error():
    with pytest.raises(ConfigError):
        EnvConfig(task="fly")


def test_zero_action_on_target_gives_reward_one():
    env = ToyEnv(EnvConfig())
    _, r, _ = env.step(_state([0.3, 0.3], [0.3, 0.3]), [0.0, 0.0])
    assert r == 1.0


def test_clipping_at_corner():
    env = ToyEnv(EnvConfig())
    s, _, _ = env.step(_state([1.0, 1.0], [0.0, 0.0]), [1.0, 1.0])
    assert np.array_equal(s.effector_pos, [1.0, 1.0])


def test_step_arithmetic():
    env = ToyEnv(EnvConfig())
    s, r, _ = env.step(_state([0.5, 0.5], [0.5, 0.9]), [1.0, 0.0])
    np.testing.assert_allclose(s.effector_pos, [0.55, 0.5], atol=1e-15)
    np.testing.assert_allclose(r, 1.0 - np.hypot(0.05, 0.4) / np.sqrt(2.0))


def test_action_out_of_range_is_contract_violation():
    env = ToyEnv(EnvConfig())
    s = _state([0.5, 0.5], [0.1, 0.1])
    env.step(s, [1.0 + 5e-7, -1.0])
    with pytest.raises(ContractViolation):
        env.step(s, [1.01, 0.0])
    with pytest.raises(ContractViolation):
        env.step(s, [0.0, 0.0, 0.0])


def test_done_exactly_at_horizon():
    env = ToyEnv(EnvConfig(horizon=3))
    s = env.reset(0)
    flags = []
    for _ in range(3):
        s, _, d = env.step(s, [0.0, 0.0])
        flags.append(d)
    assert flags == [False, False, True]
    with pytest.raises(ContractViolation):
        env.step(s, [0.0, 0.0])


def test_push_contact_moves_object():
    env = ToyEnv(EnvConfig(task="push"))
    s, _, _ = env.step(_state([0.5, 0.5], [0.9, 0.9], obj=[0.58, 0.5]), [1.0, 0.0])
    np.testing.assert_allclose(s.object_pos, [0.63, 0.5])
    far, _, _ = env.step(_state([0.1, 0.1], [0.9, 0.9], obj=[0.6, 0.6]), [1.0, 0.0])
    np.testing.assert_array_equal(far.object_pos, [0.6, 0.6])


def test_push_reward_formula():
    env = ToyEnv(EnvConfig(task="push"))
    s = _state([0.2, 0.2], [0.8, 0.2], obj=[0.5, 0.2])
    expected = 0.5 * (1 - 0.3 / np.sqrt(2)) + 0.5 * (1 - 0.3 / np.sqrt(2))
    np.testing.assert_allclose(env.reward(s), expected)


@given(
    seed=st.integers(0, 2**32),
    actions=st.lists(st.tuples(st.floats(-1, 1), st.floats(-1, 1)), min_size=1, max_size=20),
    task=st.sampled_from(["reach", "push"]),
)
def test_rewards_bounded(seed, actions, task):
    env = ToyEnv(EnvConfig(task=task, horizon=20))
    s = env.reset(seed)
    for a in actions:
        s, r, _ = env.step(s, a)
        assert 0.0 <= r <= 1.0
        assert np.all((s.effector_pos >= 0) & (s.effector_pos <= 1))


def test_trajectories_are_deterministic():
    cfg = EnvConfig(distractors_max=3, teleport_prob=0.3)
    env = ToyEnv(cfg)
    acts = np.random.default_rng(1).uniform(-1, 1, size=(20, 2))
    runs = []
    for _ in range(2):
        s = env.reset(11)
        frames = []
        for a in acts:
            s, r, _ = env.step(s, a)
            img, masks = rasterize(s, cfg)
            frames.append((r, img.channels.copy(), masks.masks.copy()))
        runs.append(frames)
    for (r1, c1, m1), (r2, c2, m2) in zip(*runs):
        assert r1 == r2 and np.array_equal(c1, c2) and np.array_equal(m1, m2)


# -- renderer -------------------------------------------------------------


def test_reach_without_distractors_has_three_masks():
    cfg = EnvConfig()
    _, masks = rasterize(_state([0.2, 0.2], [0.8, 0.8]), cfg)
    assert sorted(masks.labels) == ["background", "effector", "target"]
    assert masks.masks.shape == (3, 1, 64, 64)


def test_covered_target_disappears():
    cfg = EnvConfig()
    # an object disc (r=5) fully covers a distractor (r=3) at the same spot
    _, masks = rasterize(_state([0.2, 0.2], [0.8, 0.8], [([0.5, 0.5], 0)], obj=[0.5, 0.5]), cfg)
    assert "distractor" not in masks.labels
    # the effector (r=4) over the target (r=6) leaves a visible ring
    _, masks = rasterize(_state([0.5, 0.5], [0.5, 0.5]), cfg)
    assert "target" in masks.labels
    n_before = len(rasterize(_state([0.2, 0.2], [0.8, 0.8], [([0.5, 0.5], 0)]), cfg)[1].labels)
    n_after = len(rasterize(_state([0.5, 0.5], [0.8, 0.8], [([0.5, 0.5], 0)]), cfg)[1].labels)
    assert n_after == n_before - 1


@given(seed=st.integers(0, 10_000), bg=st.booleans())
def test_masks_disjoint_and_channels_one_hot(seed, bg):
    cfg = EnvConfig(distractors_max=5, include_background=bg)
    img, masks = rasterize(ToyEnv(cfg).reset(seed), cfg)
    total = masks.masks[:, 0].astype(int).sum(axis=0)
    assert total.max() <= 1
    if bg:
        assert np.all(total == 1)
    cls = img.channels[:4]
    assert set(np.unique(cls)) <= {0.0, 1.0}
    assert cls.sum(axis=0).max() <= 1
    # class channel of every entity pixel matches its mask label
    for m, label in zip(masks.masks[:, 0].astype(bool), masks.labels):
        if label != "background":
            idx = ["effector", "target", "object", "distractor"].index(label)
            assert np.all(img.channels[idx][m] == 1.0)


def test_ramps_are_coordinate_grids():
    cfg = EnvConfig()
    img, _ = rasterize(_state([0.2, 0.2], [0.8, 0.8]), cfg)
    x, y = img.channels[4], img.channels[5]
    assert x[0, 0] == 0.0 and x[0, -1] == 1.0 and np.all(x == x[:1])
    assert np.array_equal(y, x.T)


def test_disc_radii():
    cfg = EnvConfig()
    _, masks = rasterize(_state([0.25, 0.25], [0.75, 0.75]), cfg)
    area = {lab: int(m.sum()) for m, lab in zip(masks.masks, masks.labels)}
    # pixel-centre count of a disc of radius r centred on a grid corner
    def disc(r):
        c = np.arange(-10, 10) + 0.5
        return int(((c[None] ** 2 + c[:, None] ** 2) <= r * r).sum())

    assert area["effector"] == disc(4.0)
    assert area["target"] == disc(6.0)


def test_variable_segment_count_within_an_episode():
    cfg = EnvConfig(distractors_min=0, distractors_max=4, teleport_prob=0.1)
    env = ToyEnv(cfg)
    for seed in range(1000):
        s = env.reset(seed)
        seen = {len(rasterize(s, cfg)[1])}
        rng = np.random.default_rng(seed)
        for _ in range(cfg.horizon):
            s, _, _ = env.step(s, rng.uniform(-1, 1, 2))
            seen.add(len(rasterize(s, cfg)[1]))
        if len(seen) >= 2:
            return
    pytest.fail("segment count never varied within an episode")


# -- patch encoder ----------------------------------------------------------


def test_encoder_is_frozen_and_bounded():
    enc = PatchEncoder.create(32, 8, seed=3)
    bound = 1.0 / np.sqrt(NUM_CHANNELS * 64)
    assert enc.projection.shape == (32, NUM_CHANNELS * 64)
    assert np.abs(enc.projection).max() <= bound
    with pytest.raises(ValueError):
        enc.projection[0, 0] = 1.0
    assert np.array_equal(enc.projection, PatchEncoder.create(32, 8, seed=3).projection)


def test_patch_embed_shape_zero_and_linearity():
    cfg = EnvConfig()
    enc = PatchEncoder.from_config(cfg)
    zero = FeatureImage(np.zeros((NUM_CHANNELS, 64, 64), np.float32))
    assert patch_embed(zero, enc).shape == (8, 8, 32)
    assert not patch_embed(zero, enc).any()
    img, _ = rasterize(ToyEnv(cfg).reset(2), cfg)
    doubled = FeatureImage(img.channels * 2)
    np.testing.assert_array_equal(patch_embed(doubled, enc), 2 * patch_embed(img, enc))


def test_patch_embed_matches_per_patch_loop():
    cfg = EnvConfig(image_size=32, patch_size=8, segment_dim=5)
    enc = PatchEncoder.from_config(cfg)
    img = FeatureImage(np.random.default_rng(0).random((NUM_CHANNELS, 32, 32)).astype(np.float32))
    got = patch_embed(img, enc)
    for gy in range(4):
        for gx in range(4):
            block = img.channels[:, gy * 8 : gy * 8 + 8, gx * 8 : gx * 8 + 8]
            vec = np.concatenate([block[c].ravel() for c in range(NUM_CHANNELS)])
            np.testing.assert_allclose(got[gy, gx], enc.projection @ vec, rtol=1e-5, atol=1e-6)


def test_indivisible_image_is_config_error():
    with pytest.raises(ConfigError):
        EnvConfig(image_size=60, patch_size=8)
    enc = PatchEncoder.create(4, 8, 0)
    with pytest.raises(ConfigError):
        patch_embed(FeatureImage(np.zeros((NUM_CHANNELS, 60, 64), np.float32)), enc)
