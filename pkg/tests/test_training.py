import numpy as np
import pytest

from gnerflab import gnerf
from gnerflab import scenes as sc
from gnerflab import training as tr


def make_tiny_datasets(n_scenes=2, size=16, n_views=6):
    scenes = sc.builtin_scenes()[:n_scenes]
    tags = {"source": (1, 4), "test": (0,)}
    return [sc.generate_dataset(s, n_views=n_views, seed=11 + i, image_size=size,
                                tags=tags)
            for i, s in enumerate(scenes)]


def tiny_train_config(**kw):
    base = dict(lr=2e-3, rays_per_step=48, steps=20, seed=0, n_sources=3,
                n_samples=12)
    base.update(kw)
    return tr.TrainConfig(**base)


TINY_MODEL = gnerf.ModelConfig(enc_channels=(6, 6), mlp_width=16, mlp_depth=2,
                               pe_x=3, pe_d=1)


def test_adam_matches_textbook_recurrence_two_steps():
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    adam = tr.Adam(beta1, beta2, eps)
    g1, g2 = 0.3, -0.5

    d1 = adam.direction({"w": np.array([g1])})["w"][0]
    m = (1 - beta1) * g1
    v = (1 - beta2) * g1 * g1
    expect1 = (m / (1 - beta1)) / (np.sqrt(v / (1 - beta2)) + eps)
    assert d1 == pytest.approx(expect1, abs=1e-12)
    # constant-gradient first step is the sign of the gradient to ~eps
    assert abs(d1 - np.sign(g1)) <= 1e-6

    d2 = adam.direction({"w": np.array([g2])})["w"][0]
    m = beta1 * m + (1 - beta1) * g2
    v = beta2 * v + (1 - beta2) * g2 * g2
    expect2 = (m / (1 - beta1 ** 2)) / (np.sqrt(v / (1 - beta2 ** 2)) + eps)
    assert d2 == pytest.approx(expect2, abs=1e-12)


def test_first_step_displacement_magnitude_is_lr():
    adam = tr.Adam()
    lr = 5e-4
    d = adam.direction({"w": np.array([42.0])})["w"]
    assert abs(abs(lr * d[0]) - lr) <= 1e-6 * lr


def test_rgb_loss_examples():
    pred = np.array([[0.3, 0.5, 0.7]])
    assert tr.rgb_loss(pred, pred.copy()).item() == 0.0

    target = pred - np.array([[0.1, 0.0, 0.0]])
    assert tr.rgb_loss(pred, target).item() == pytest.approx(0.01, abs=1e-8)

    two = np.concatenate([pred, pred])
    two_t = np.concatenate([target, target])
    assert tr.rgb_loss(two, two_t).item() == pytest.approx(0.02, abs=1e-8)

    with pytest.raises(ValueError):
        tr.rgb_loss(pred, np.zeros((2, 3)))


def test_train_config_validation():
    with pytest.raises(ValueError):
        tr.TrainConfig(lr=0.0)
    with pytest.raises(ValueError):
        tr.TrainConfig(adv_eps=-0.1)


def test_pretrain_reduces_loss_and_is_deterministic():
    datasets = make_tiny_datasets()
    config = tiny_train_config(steps=30)
    w0 = gnerf.init_weights(TINY_MODEL, seed=0)
    weights, history = tr.pretrain(datasets, config, weights=w0.copy())
    first = np.mean([h["loss"] for h in history[:5]])
    last = np.mean([h["loss"] for h in history[-5:]])
    assert last < first

    weights2, history2 = tr.pretrain(datasets, config, weights=w0.copy())
    assert [h["loss"] for h in history] == [h["loss"] for h in history2]
    for k in weights.params:
        np.testing.assert_array_equal(weights.params[k], weights2.params[k])


def test_pretrain_requires_two_scenes():
    datasets = make_tiny_datasets(n_scenes=1)
    with pytest.raises(ValueError):
        tr.pretrain(datasets, tiny_train_config())


def test_finetune_zero_steps_keeps_weights():
    datasets = make_tiny_datasets(n_scenes=1)
    w = gnerf.init_weights(TINY_MODEL, seed=1)
    out, history = tr.finetune(w, datasets[0], tiny_train_config(steps=0))
    assert history == []
    for k in w.params:
        np.testing.assert_array_equal(out.params[k], w.params[k])


def test_finetune_targets_exclude_eval_views():
    datasets = make_tiny_datasets(n_scenes=1)
    ds = datasets[0]
    pool = [i for i, v in enumerate(ds.views) if v.tag != "test"]
    assert 0 not in pool


def test_adversarial_zero_budget_reduces_to_pretrain():
    datasets = make_tiny_datasets()
    config = tiny_train_config(steps=8)
    w0 = gnerf.init_weights(TINY_MODEL, seed=2)
    clean, hist_clean = tr.pretrain(datasets, config, weights=w0.copy())
    adv, hist_adv = tr.adversarial_train(w0.copy(), datasets,
                                         tiny_train_config(steps=8, adv_eps=0.0))
    assert [h["loss"] for h in hist_clean] == [h["loss"] for h in hist_adv]
    for k in clean.params:
        np.testing.assert_array_equal(clean.params[k], adv.params[k])


def test_adversarial_training_runs_and_is_deterministic():
    datasets = make_tiny_datasets()
    config = tiny_train_config(steps=6, adv_eps=8 / 255)
    w0 = gnerf.init_weights(TINY_MODEL, seed=3)
    a, ha = tr.adversarial_train(w0.copy(), datasets, config)
    b, hb = tr.adversarial_train(w0.copy(), datasets, config)
    assert [h["loss"] for h in ha] == [h["loss"] for h in hb]
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])
    assert ha[0]["mode"] == "adv-pretrain"


def test_inner_maximization_respects_box():
    datasets = make_tiny_datasets(n_scenes=1)
    ds = datasets[0]
    w = gnerf.init_weights(TINY_MODEL, seed=4)
    view = ds.views[2]
    src_ids = tr.nearest_sources(ds, 2, 3)
    sources = tr.source_set(ds, src_ids)
    rng = np.random.default_rng(0)
    pixels = tr.sample_pixel_batch(rng, view.intrinsics, 32)
    gt = view.image[pixels[:, 1], pixels[:, 0]]
    config = tiny_train_config(adversarial=True, adv_eps=8 / 255,
                               adv_inner_iters=3)
    qcfg = tr._quad_config(ds, config)
    deltas = tr._inner_maximize(w, sources, view, pixels, gt, qcfg, config, rng)
    for d in deltas:
        assert np.abs(d).max() <= 8 / 255 + 1e-7


def test_cosine_lr_schedule_endpoints():
    config = tiny_train_config(steps=100, lr=1e-3)
    assert tr.cosine_lr(0, config) == pytest.approx(1e-3)
    assert tr.cosine_lr(100, config) == pytest.approx(1e-3 * config.lr_final_scale)


def test_save_history_csv(tmp_path):
    path = tmp_path / "hist.csv"
    tr.save_history_csv(path, [{"step": 0, "loss": 1.5, "mode": "pretrain"}])
    text = path.read_text()
    assert text.splitlines()[0] == "step,loss,mode"
    assert "pretrain" in text
