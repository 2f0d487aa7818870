import json
from dataclasses import replace

import numpy as np
import pytest

from promptlab import harness as H
from promptlab import reparam as R
from promptlab.harness import ExperimentConfig

SMALL = ExperimentConfig(task_sizes=(32, 32, 32), epochs=2, m=8, bottleneck=8)


def test_method_defaults_follow_the_recipe():
    expect = {"simple": (0.01, 0.01), "residual": (0.3, 0.01), "superpos": (0.01, 1e-5),
              "full_finetune": (1e-5, 0.0)}
    for method, (lr, wd) in expect.items():
        cfg = ExperimentConfig(method=method)
        assert (cfg.resolved_lr, cfg.resolved_weight_decay) == (lr, wd)
    d = ExperimentConfig()
    assert (d.n, d.m, d.bottleneck, d.epochs, d.batch_size) == (10, 128, 128, 80, 32)
    assert ExperimentConfig(lr=0.5).resolved_lr == 0.5


def test_config_validation_and_round_trip():
    with pytest.raises(H.ExperimentError):
        ExperimentConfig(method="lora")
    with pytest.raises(H.ExperimentError):
        ExperimentConfig(epochs=-1)
    cfg = ExperimentConfig(method="residual", seed=4, task_sizes=[8, 8, 8])
    assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg


def test_missing_checkpoint():
    with pytest.raises(FileNotFoundError):
        H.run_experiment(replace(SMALL, backbone_path="/nonexistent/bb.npz"))


def test_zero_epochs(tiny_backbone):
    r = H.run_experiment(replace(SMALL, epochs=0), tiny_backbone)
    assert r.curve == [] and r.best_epoch == 0 and r.steps_to_fraction(0.9) == 0
    assert r.test.n_examples == 32


@pytest.mark.parametrize("method", H.HARNESS_METHODS)
def test_every_method_runs_and_keeps_the_backbone(tiny_backbone, method):
    r = H.run_experiment(replace(SMALL, method=method), tiny_backbone)
    assert len(r.curve) == 2 and not r.failed
    assert r.weights_hash_before == r.weights_hash_after == tiny_backbone.weights_hash
    assert r.trainable_params == r.expected_trainable_params
    if method != "full_finetune":
        e = tiny_backbone.config.model_dim
        assert r.trainable_params == R.expected_trainable(method, e, 10, 8, 8)


def test_run_is_deterministic(tmp_path, tiny_backbone):
    a = H.run_experiment(SMALL, tiny_backbone, out_dir=tmp_path / "a")
    b = H.run_experiment(SMALL, tiny_backbone, out_dir=tmp_path / "b")
    for name in ("curve.csv", "result.json", "prompt.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert a.best_val_score == b.best_val_score


def test_artifact_formats(tmp_path, tiny_backbone):
    H.run_experiment(SMALL, tiny_backbone, out_dir=tmp_path)
    lines = (tmp_path / "curve.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_score,invalid_frac" and len(lines) == 3
    loss = lines[1].split(",")[1]
    assert float(repr(float(loss))) == float(loss)
    summary = json.loads((tmp_path / "result.json").read_text())
    assert {"config", "seed", "weights_hash", "parameter_counts", "test"} <= set(summary)
    assert "wall_clock_seconds" in json.loads((tmp_path / "timing.json").read_text())


def test_dropout_flag_changes_training_only(tiny_backbone):
    on = H.run_experiment(replace(SMALL, dropout=True), tiny_backbone)
    off = H.run_experiment(replace(SMALL, dropout=False), tiny_backbone)
    assert on.curve[0].train_loss != off.curve[0].train_loss
    untouched = H.run_experiment(replace(SMALL, epochs=0, dropout=True), tiny_backbone)
    again = H.run_experiment(replace(SMALL, epochs=0, dropout=False), tiny_backbone)
    assert untouched.test.scores == again.test.scores


def test_nan_loss_marks_run_failed(tiny_backbone, monkeypatch):
    real = H.label_logits
    calls = []

    def poisoned(bb, P, ids, valid, training=False):
        out = real(bb, P, ids, valid, training)
        if training:
            calls.append(1)
            if len(calls) > 3:
                return H.ad.mul(out, H.Tensor(np.nan))
        return out

    monkeypatch.setattr(H, "label_logits", poisoned)
    # one batch per epoch, so the fourth epoch is the first poisoned one
    r = H.run_experiment(replace(SMALL, epochs=5), tiny_backbone)
    assert r.failed and r.test_score == 0.0 and "epoch 4" in r.failure
    assert len(r.curve) == 3


def test_steps_to_fraction():
    rec = [H.EpochRecord(i + 1, 1.0, s, 0.0) for i, s in enumerate([10, 50, 95, 100, 80])]
    r = H.RunResult(SMALL, rec, 100.0, 4, None, 0.0, "", "", 0, 0)
    assert r.steps_to_fraction(0.9) == 3 and r.steps_to_fraction(0.5) == 2
    assert r.steps_to_fraction(1.0) == 4


def test_compare_single_cell(tmp_path, tiny_backbone):
    comp = H.compare_methods(["parity"], ["simple"], [0], SMALL, tiny_backbone, tmp_path)
    run = comp.runs[("simple", "parity", 0)]
    assert comp.table == {"simple": {"parity": run.test_score}}
    assert comp.averages == {"simple": run.test_score}
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["seeds"] == [0] and (tmp_path / "parity" / "simple" / "seed0" / "curve.csv").exists()


def test_compare_seed_order_irrelevant(tiny_backbone):
    a = H.compare_methods(["order"], ["superpos"], [0, 1], SMALL, tiny_backbone)
    b = H.compare_methods(["order"], ["superpos"], [1, 0], SMALL, tiny_backbone)
    assert a.table == b.table


def test_compare_needs_input():
    with pytest.raises(H.ExperimentError):
        H.compare_methods([], ["simple"], [0])


def test_parallel_matches_serial(tiny_backbone):
    cfgs = [replace(SMALL, seed=s, epochs=1) for s in (0, 1)]
    serial = H.run_many(cfgs, tiny_backbone)
    parallel = H.run_many(cfgs, tiny_backbone, n_jobs=2)
    assert [H.curve_csv(r) for r in serial] == [H.curve_csv(r) for r in parallel]


def test_dropout_comparison(tmp_path, tiny_backbone):
    rep = H.run_dropout_comparison(["parity"], ["simple", "superpos"], [0], SMALL, tiny_backbone, tmp_path)
    assert set(rep["table"]) == {"simple", "simple-nodrop", "superpos", "superpos-nodrop"}
    swapped = H.dropout_deltas(rep["comparison"], ["simple", "superpos"], first=True, second=False)
    for m, d in rep["deltas_nodrop_minus_drop"].items():
        assert swapped[m]["score_delta"] == -d["score_delta"]
        assert swapped[m]["steps_to_0.9_delta"] == -d["steps_to_0.9_delta"]
    assert (tmp_path / "dropout_report.json").exists()


def test_m_ablation(tmp_path, tiny_backbone):
    series = H.run_m_ablation(["parity"], [1], [0], SMALL, tiny_backbone, tmp_path)
    assert list(series) == [1]
    assert (tmp_path / "m_series.csv").read_text().startswith("m,best_score\n1,")
    with pytest.raises(H.ExperimentError):
        H.run_m_ablation(["parity"], [0], [0], SMALL, tiny_backbone)


def test_m_ablation_only_m_varies(tiny_backbone):
    # with m=1 and m=2 the first sampled token is shared, so both start from the same prompt
    a = H.run_experiment(replace(SMALL, m=1, epochs=0), tiny_backbone)
    b = H.run_experiment(replace(SMALL, m=2, epochs=0), tiny_backbone)
    assert a.prompt.indices[0] == b.prompt.indices[0]


def test_similarity_matrix(tiny_backbone):
    p = R.init_superpos(tiny_backbone, 5, 8, np.random.default_rng(0))
    S = H.prompt_similarity_matrix(p).matrix.data
    np.testing.assert_array_equal(S, np.eye(5))
    rng = np.random.default_rng(1)
    for c in p.coef_list:
        c.data = rng.normal(size=8)
    p.coef_list[2].data = np.zeros(8)
    res = H.prompt_similarity_matrix(p)
    S = res.matrix.data
    assert res.zero_prompts == [2]
    np.testing.assert_allclose(np.diag(S), 1.0, atol=1e-12)
    np.testing.assert_allclose(S, S.T, atol=1e-12)
    assert np.all(S[2, [0, 1, 3, 4]] == 0.0)
    with pytest.raises(H.ExperimentError):
        H.prompt_similarity_matrix(R.init_simple(tiny_backbone, 2, rng))


def test_stability_report():
    same = {"a": {"t1": 1.0, "t2": 5.0}, "b": {"t1": 1.0, "t2": 5.0}}
    stats, text = H.stability_report(same)
    assert stats["a"] == stats["b"]
    best = {"a": {"t1": 9.0, "t2": 9.0}, "b": {"t1": 1.0, "t2": 5.0}}
    stats, text = H.stability_report(best)
    assert stats["a"] == (100.0, 0.0)
    assert "100.0±0.0" in text.splitlines()[1]
