import json
import os
from dataclasses import replace

import numpy as np
import pytest

from slimseg import cost, dataset, nn, trainer


def small_cfg(**kw):
    base = dict(seed=0, epochs=2, batch_size=4, num_classes=3, base_width=8,
                learning_rate=0.05, log_decisions=True)
    base.update(kw)
    return trainer.RunConfig(**base)


def test_config_validation():
    with pytest.raises(trainer.ConfigError):
        trainer.RunConfig(rd=True, casd=True)
    with pytest.raises(trainer.ConfigError):
        trainer.RunConfig(p_mode="sideways")
    trainer.RunConfig(rd=True, casd=False)  # RD alone is fine


def test_config_file_roundtrip(tmp_path):
    cfg = small_cfg(scale_range=(0.25, 1.0), prune_ratio=0.3)
    path = tmp_path / "cfg.json"
    with open(path, "w") as fh:
        json.dump(cfg.to_dict(), fh)
    assert trainer.RunConfig.from_file(path) == cfg


def test_effective_p_modes():
    cfg = small_cfg(p_mode="proposed")
    assert trainer._effective_p(0.3, cfg, 0, 0) == 0.3
    cfg = small_cfg(p_mode="inverse")
    assert trainer._effective_p(0.3, cfg, 0, 0) == 0.7
    cfg = small_cfg(p_mode="random")
    a = trainer._effective_p(0.3, cfg, 4, 2)
    assert a == trainer._effective_p(0.9, cfg, 4, 2)  # ignores raw p
    assert 0.0 <= a < 1.0
    assert a != trainer._effective_p(0.3, cfg, 4, 3)


def test_metrics_from_confusion_oracle():
    confusion = np.array([[5, 1], [2, 2]])
    m = trainer.metrics_from_confusion(confusion)
    assert abs(m.per_class_iou[0] - 5 / 8) < 1e-12
    assert abs(m.per_class_iou[1] - 2 / 5) < 1e-12
    assert abs(m.miou - (5 / 8 + 2 / 5) / 2) < 1e-12
    assert abs(m.pixel_accuracy - 0.7) < 1e-12
    assert m.classes_evaluated == 2


def test_metrics_excludes_absent_classes():
    confusion = np.array([[4, 0, 0], [0, 0, 0], [1, 0, 2]])
    m = trainer.metrics_from_confusion(confusion)
    assert m.per_class_iou[1] is None
    assert m.classes_evaluated == 2
    assert abs(m.miou - (4 / 5 + 2 / 3) / 2) < 1e-12


def test_pad_to_stride():
    img = np.zeros((21, 24, 3))
    labels = np.zeros((21, 24), dtype=int)
    pimg, plab, orig = trainer._pad_to_stride(img, labels, 255)
    assert pimg.shape == (24, 24, 3)
    assert plab.shape == (24, 24)
    assert orig == (21, 24)
    assert np.all(plab[21:] == 255)


def test_run_writes_artifacts(tiny_corpus, tmp_path):
    out = tmp_path / "run"
    result = trainer.run(small_cfg(), tiny_corpus, out_dir=str(out))
    for name in ("config.json", "metrics.csv", "ledger.csv",
                 "prune_report.csv", "decisions.csv", "checkpoint.bin"):
        assert (out / name).exists(), name
    assert 0.0 <= result.metrics.miou <= 1.0
    assert len(result.metrics.per_class_iou) == 3
    loaded = nn.load_checkpoint(out / "checkpoint.bin")
    assert loaded.base_width == 8


def test_run_is_deterministic(tiny_corpus, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    trainer.run(small_cfg(), tiny_corpus, out_dir=str(a))
    trainer.run(small_cfg(), tiny_corpus, out_dir=str(b))
    for name in ("metrics.csv", "ledger.csv", "prune_report.csv",
                 "decisions.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_baseline_ledger_matches_hand_count(tiny_corpus):
    cfg = small_cfg(epochs=1, ans=False, cad=False, casd=False, cal=False)
    result = trainer.run(cfg, tiny_corpus)
    samples = trainer.load_samples(tiny_corpus)
    n_train = sum(s.split == "train" for s in samples)
    net = nn.SegNet(num_classes=3, base_width=8, seed=0)
    fwd, _ = cost.net_flops(net.live_layer_shapes(24, 24))
    indicator = sum(cost.indicator_overhead(s.image.shape[:2]) for s in samples)
    # every sample trains once at native dims; 3x forward for fwd+bwd
    assert result.ledger.train_flops == indicator + 3 * fwd * n_train
    assert result.ledger.indicator_flops == indicator
    iters = (n_train + cfg.batch_size - 1) // cfg.batch_size
    assert len(result.ledger.records) == iters


def test_baseline_decisions_are_neutral(tiny_corpus, tmp_path):
    out = tmp_path / "neutral"
    cfg = small_cfg(epochs=1, ans=False, cad=False, casd=False, cal=False)
    trainer.run(cfg, tiny_corpus, out_dir=str(out))
    rows = (out / "decisions.csv").read_text().strip().split("\n")[1:]
    for row in rows:
        _, _, _, scale, keep, weight = row.split(",")
        assert float(scale) == 1.0
        assert keep == "1"
        assert float(weight) == 1.0


def test_loss_weight_range_collapse_matches_cal_off(tiny_corpus, tmp_path):
    # weighting with a constant-1 range must equal disabling the weighting
    a, b = tmp_path / "wa", tmp_path / "wb"
    cfg_off = small_cfg(cal=False, log_decisions=False)
    cfg_one = small_cfg(cal=True, weight_range=(1.0, 1.0), log_decisions=False)
    trainer.run(cfg_off, tiny_corpus, out_dir=str(a))
    trainer.run(cfg_one, tiny_corpus, out_dir=str(b))
    for name in ("metrics.csv", "ledger.csv", "prune_report.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_slimming_reduces_training_flops(tiny_corpus):
    base = trainer.run(small_cfg(epochs=1, ans=False, cad=False, casd=False,
                                 cal=False), tiny_corpus)
    slim = trainer.run(small_cfg(epochs=1, ans=False, cad=True, casd=True,
                                 cal=True), tiny_corpus)
    assert slim.ledger.train_flops < base.ledger.train_flops


def test_ans_prunes_to_target(tiny_corpus):
    cfg = small_cfg(epochs=2, ans=True, cad=False, casd=False, cal=False,
                    prune_ratio=0.5)
    result = trainer.run(cfg, tiny_corpus)
    total = sum(s.channels_total for tag, s in result.prune_report.groups.items()
                if tag in cfg.prunable_groups)
    pruned = sum(s.channels_pruned for tag, s in result.prune_report.groups.items()
                 if tag in cfg.prunable_groups)
    assert abs(pruned - int(0.5 * total)) <= 1
    assert result.prune_report.target_ratio == 0.5


def test_ans_off_prunes_nothing(tiny_corpus):
    result = trainer.run(small_cfg(ans=False), tiny_corpus)
    assert all(s.channels_pruned == 0
               for s in result.prune_report.groups.values())


def test_rd_keeps_about_half(tiny_corpus, tmp_path):
    out = tmp_path / "rd"
    cfg = small_cfg(epochs=4, ans=False, cad=False, casd=False, cal=False,
                    rd=True)
    trainer.run(cfg, tiny_corpus, out_dir=str(out))
    rows = (out / "decisions.csv").read_text().strip().split("\n")[1:]
    keeps = [int(r.split(",")[4]) for r in rows]
    rate = sum(keeps) / len(keeps)
    assert 0.35 <= rate <= 0.65


def test_evaluate_without_cad_uses_native_dims(tiny_corpus):
    samples = trainer.load_samples(tiny_corpus)
    index = trainer.index_samples(samples)
    cfg = small_cfg(cad=False)
    net = nn.SegNet(num_classes=3, base_width=8, seed=0)
    test_split = [s for s in samples if s.split == "test"]
    metrics, flops, _, res = trainer.evaluate(net, test_split, index, cfg,
                                              return_cost=True)
    fwd, _ = cost.net_flops(net.live_layer_shapes(24, 24))
    assert flops == fwd  # every eval image at native 24x24
    assert res == (24, 24)
    assert 0.0 <= metrics.miou <= 1.0


def test_evaluate_empty_split_raises(tiny_corpus):
    samples = trainer.load_samples(tiny_corpus)
    index = trainer.index_samples(samples)
    with pytest.raises(trainer.ConfigError):
        trainer.evaluate(nn.SegNet(3, 8, 0), [], index, small_cfg())


def test_net_then_data_and_data_then_net(tiny_corpus, tmp_path):
    base = small_cfg(epochs=2)
    r1 = trainer._net_then_data(tiny_corpus, base, str(tmp_path))
    r2 = trainer._data_then_net(tiny_corpus, base, str(tmp_path))
    for r in (r1, r2):
        pruned = sum(s.channels_pruned for s in r.prune_report.groups.values())
        assert pruned > 0
