import numpy as np
import pytest

from eegsal import dataio as D
from eegsal import training as T
from eegsal.errors import ConfigError, NumericalError
from eegsal.models import build_classifier
from eegsal.models.classifier import branch_loss
from eegsal.tensor import Tape, backward

SMALL = dict(hidden=6, cnn_widths=(2, 3, 4), cnn_depths=(1, 1, 1), image_size=8, fusion_hidden=8,
             batch_size=16, max_epochs=3, domain_hidden=6, lr=3e-3)


def tiny_sets(tiny, sigma=0.5, sigma_subj=0.3, seed=0):
    spec = D.SyntheticSpec(n_subjects=3, trials_per_subject=4, windows_per_trial=6, n_classes=3, n_bands=2,
                           sigma=sigma, sigma_subj=sigma_subj, pattern_scale=1.0, seed=seed)
    ds = D.generate_synthetic(spec, tiny)
    test = ds.subjects == "s03"
    val = T.split_validation(ds.labels[~test], 0.2, seed)
    tr_x, tr_y = ds.features[~test][~val], ds.labels[~test][~val]
    va_x, va_y = ds.features[~test][val], ds.labels[~test][val]
    return (tr_x, tr_y), (va_x, va_y), ds.features[test]


def sets_for(model, tiny, cfg, **kw):
    (tx, ty), (vx, vy), target = tiny_sets(tiny, **kw)
    std = T.Standardizer.fit(tx)
    size = cfg.image_size if model.needs_images else None
    lay = tiny if model.needs_images else None
    return (T.sample_set(std(tx), ty, lay, size), T.sample_set(std(vx), vy, lay, size),
            T.sample_set(std(target), None, lay, size))


def make(tiny, cfg):
    return T.build_from_config(cfg, tiny, 2, 3)


@pytest.mark.parametrize("losses,patience,expected", [
    ([1.0, 0.9, 0.8], 5, False),
    ([1.0] * 5, 5, False),
    ([1.0] * 6, 5, True),
    ([1.0, 1.0 - 1e-4, 1.0 - 1e-4, 1.0 - 1e-4], 3, False),
    ([1.0, 1.0 - 0.5e-4, 1.0 - 0.9e-4, 1.0 - 0.99e-4], 3, True),
])
def test_early_stop_examples(losses, patience, expected):
    assert T.early_stop_check(losses, patience, 1e-4) is expected


def test_early_stop_exact_min_delta_resets():
    # 0.75 - 0.25 is exact in binary, so the boundary is hit precisely
    assert not T.early_stop_check([0.75, 0.5, 0.5], 2, 0.25)
    assert T.early_stop_check([0.75, 0.5, 0.5, 0.5], 2, 0.25)


def test_early_stop_needs_history():
    with pytest.raises(ConfigError):
        T.early_stop_check([], 5, 1e-4)


def test_config_defaults_and_validation(tmp_path):
    cfg = T.TrainConfig()
    assert (cfg.lr, cfg.weight_decay, cfg.max_epochs, cfg.patience, cfg.batch_size) == (1e-3, 1e-8, 150, 5, 64)
    for bad in (dict(patience=0), dict(batch_size=0), dict(lr=0.0), dict(fusion="late")):
        with pytest.raises(ConfigError):
            T.TrainConfig(**bad)
    p = tmp_path / "c.conf"
    p.write_text("max_epochs = 7\ncnn_widths = 8, 16, 32\n")
    loaded = T.TrainConfig.from_file(p, seed=4)
    assert (loaded.max_epochs, loaded.cnn_widths, loaded.seed) == (7, (8, 16, 32), 4)
    assert loaded.config_hash() == T.TrainConfig.from_file(p, seed=4).config_hash()
    assert loaded.config_hash() != cfg.config_hash()


def test_lambda_schedule_and_constant():
    cfg = T.TrainConfig(max_epochs=10)
    assert cfg.lam(0) == 0.0 and 0 < cfg.lam(5) < cfg.lam(9) < 1
    assert T.TrainConfig(lambda_mode="constant", lambda_value=0.3).lam(7) == 0.3


def test_standardizer_floor():
    x = np.full((3, 2, 2), 4.0)
    std = T.Standardizer.fit(x)
    assert np.all(std.std == 1.0)
    assert not std(x).any()


def test_validation_split_stratified():
    labels = np.repeat(np.arange(4), 20)
    mask = T.split_validation(labels, 0.1, 3)
    assert np.bincount(labels[mask]).tolist() == [2, 2, 2, 2]
    assert (mask == T.split_validation(labels, 0.1, 3)).all()


def test_separable_set_reaches_full_train_accuracy(tiny):
    cfg = T.TrainConfig(**{**SMALL, "max_epochs": 150, "patience": 150, "lr": 1e-2})
    model = make(tiny, cfg)
    train, val, _ = sets_for(model, tiny, cfg, sigma=0.0, sigma_subj=0.0)
    res = T.train_classifier(model, train, val, cfg)
    assert max(h.train_acc for h in res.history) == 1.0
    first = next(h.epoch for h in res.history if h.train_acc == 1.0)
    assert first < 150


def test_history_deterministic(tiny):
    cfg = T.TrainConfig(**SMALL, models="hrnn,cnn", fusion="feature")

    def run():
        model = make(tiny, cfg)
        train, val, _ = sets_for(model, tiny, cfg)
        return T.history_csv(T.train_classifier(model, train, val, cfg).history)

    assert run() == run()


def test_constant_validation_loss_stops_after_patience_plus_one(tiny, monkeypatch):
    cfg = T.TrainConfig(**{**SMALL, "max_epochs": 50, "patience": 4})
    monkeypatch.setattr(T, "_eval_loss", lambda model, ss, bs: (0.7, 0.5))
    model = make(tiny, cfg)
    train, val, _ = sets_for(model, tiny, cfg)
    res = T.train_classifier(model, train, val, cfg)
    assert len(res.history) == cfg.patience + 1
    assert res.best_epoch == 0


def test_best_epoch_parameters_restored(tiny):
    cfg = T.TrainConfig(**{**SMALL, "max_epochs": 6})
    model = make(tiny, cfg)
    train, val, _ = sets_for(model, tiny, cfg)
    res = T.train_classifier(model, train, val, cfg)
    best = min(res.history, key=lambda h: h.val_loss)
    assert res.best_epoch == best.epoch
    assert T._eval_loss(res.model, val, 64)[0] == best.val_loss


def test_saliency_recomputed_once_per_batch(tiny):
    cfg = T.TrainConfig(**SMALL, models="hrnn,cnn", fusion="saliency")
    model = make(tiny, cfg)
    train, val, _ = sets_for(model, tiny, cfg)
    res = T.train_saliency_fusion(model, train, val, cfg)
    eval_batches = -(-len(val) // cfg.batch_size)
    assert model.saliency_calls == res.steps + len(res.history) * eval_batches
    assert res.steps == len(res.history) * -(-len(train) // cfg.batch_size)


def test_saliency_training_needs_saliency_model(tiny):
    cfg = T.TrainConfig(**SMALL, models="hrnn,cnn", fusion="feature")
    model = make(tiny, cfg)
    with pytest.raises(ConfigError):
        T.train_saliency_fusion(model, None, None, cfg)


def trace_run(tiny, cfg, prepare=None, trainer=T.train_classifier, **kw):
    model = make(tiny, cfg)
    if prepare:
        prepare(model)
    train, val, target = sets_for(model, tiny, cfg)
    trace = []
    if trainer is T.train_domain_adversarial:
        res = trainer(model, train, val, target, cfg, trace=trace)
    else:
        res = trainer(model, train, val, cfg, trace=trace)
    return model, res, trace, target


def test_uniform_saliency_equals_feature_fusion(tiny):
    feat_cfg = T.TrainConfig(**SMALL, models="hrnn,cnn", fusion="feature")
    sal_cfg = feat_cfg.replace(fusion="saliency")
    _, _, ref, _ = trace_run(tiny, feat_cfg)

    def force(model):
        model.force_uniform_saliency = True

    _, res, got, _ = trace_run(tiny, sal_cfg, force, T.train_saliency_fusion)
    assert len(got) == len(ref) == res.steps >= 3
    for a, b in zip(got, ref):
        assert all(x.tobytes() == y.tobytes() for x, y in zip(a, b))


def test_zero_lambda_matches_baseline_and_never_reads_target_labels(tiny):
    base_cfg = T.TrainConfig(**SMALL)
    adv_cfg = base_cfg.replace(domain_adversarial=True, lambda_mode="constant", lambda_value=0.0)
    model, _, ref, _ = trace_run(tiny, base_cfg)
    n_model = len(model.parameters())
    _, res, got, target = trace_run(tiny, adv_cfg, trainer=T.train_domain_adversarial)
    assert len(got) == len(ref)
    for a, b in zip(got, ref):
        assert all(x.tobytes() == y.tobytes() for x, y in zip(a[:n_model], b))
    assert target.label_reads == 0
    assert all(h.domain_acc is not None for h in res.history)


def test_domain_adversarial_with_schedule_moves_parameters(tiny):
    cfg = T.TrainConfig(**SMALL, domain_adversarial=True)
    model, _, ref, _ = trace_run(tiny, T.TrainConfig(**SMALL))
    n_model = len(model.parameters())
    _, _, got, target = trace_run(tiny, cfg, trainer=T.train_domain_adversarial)
    assert target.label_reads == 0
    assert any(x.tobytes() != y.tobytes() for x, y in zip(got[-1][:n_model], ref[-1]))


def test_saliency_is_a_stop_gradient(tiny, rng):
    cfg = T.TrainConfig(**SMALL, models="hrnn,cnn", fusion="saliency")
    model = make(tiny, cfg)
    x = rng.normal(size=(4, 6, 2))
    img = T.make_images(x, tiny, 8)
    y = np.array([0, 1, 2, 0])
    hrnn_params = model.hrnn.parameters()
    with Tape() as tape:
        out = model.forward(x, img)
        loss = branch_loss("cnn", out.parts["cnn"], y)
    backward(loss, tape, leaves=hrnn_params)
    assert all(not p.grad.any() for p in hrnn_params)


def test_train_loss_decreases(tiny):
    cfg = T.TrainConfig(**{**SMALL, "max_epochs": 8}, models="hrnn,cnn", fusion="saliency")
    model = make(tiny, cfg)
    train, val, _ = sets_for(model, tiny, cfg, sigma=0.2, sigma_subj=0.1)
    res = T.train_saliency_fusion(model, train, val, cfg)
    assert res.history[-1].train_loss < res.history[0].train_loss


def test_nan_parameter_raises_numerical_error(tiny):
    cfg = T.TrainConfig(**SMALL)
    model = make(tiny, cfg)
    train, val, _ = sets_for(model, tiny, cfg)
    model.parameters()[0].data[...] = np.nan
    with pytest.raises(NumericalError):
        T.train_classifier(model, train, val, cfg)


def test_history_csv_columns():
    hist = [T.EpochStats(0, 1.5, 1.25, 0.5, 0.25), T.EpochStats(1, 1.0, 1.0, 0.75, 0.5, 0.5)]
    text = T.history_csv(hist, ["seed 0"])
    lines = text.splitlines()
    assert lines[0] == "# seed 0"
    assert lines[1] == ",".join(T.HISTORY_COLUMNS)
    assert lines[2] == "0,1.5,1.25,0.5,0.25,"
    with pytest.raises(NumericalError):
        T.EpochStats(0, float("nan"), 1.0, 0.5, 0.5)


def test_alpha_grid_search(tiny):
    cfg = T.TrainConfig(**SMALL, models="hrnn,cnn", fusion="output")
    model = make(tiny, cfg)
    train, val, _ = sets_for(model, tiny, cfg)
    T.train_classifier(model, train, val, cfg)
    best, scores = T.alpha_grid_search(model, val)
    assert set(scores) == set(T.ALPHA_GRID)
    assert scores[best] == max(scores.values())
    with pytest.raises(ConfigError):
        T.alpha_grid_search(build_classifier("hrnn", "none", tiny, 2, 3), val)


def test_fit_standardizes_on_training_split_only(tiny):
    cfg = T.TrainConfig(**SMALL)
    (tx, ty), (vx, vy), _ = tiny_sets(tiny)
    res, std = T.fit(make(tiny, cfg), tx, ty, vx, vy, cfg, tiny)
    np.testing.assert_array_equal(std.mean, tx.mean(axis=0))
    with pytest.raises(ConfigError):
        T.fit(make(tiny, cfg.replace(domain_adversarial=True)), tx, ty, vx, vy,
              cfg.replace(domain_adversarial=True), tiny)
