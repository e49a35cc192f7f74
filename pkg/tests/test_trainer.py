import hashlib
import json

import numpy as np
import pytest

from mcseg import trainer
from mcseg.autodiff import ContractError
from mcseg.models import build_model, checkpoint_bytes
from mcseg.scenegen import Dataset
from mcseg.trainer import Batch, TrainConfig, TrainState, step_a, step_b, step_c


def digest(model, group):
    h = hashlib.sha256()
    for n in model.groups[group]:
        h.update(model.params[n].data.tobytes())
    return h.hexdigest()


def load_batches(root, model):
    ds = Dataset(root)
    cache = trainer.SampleCache(ds)
    src = [trainer._batch(cache, [e], trainer._source_kinds(model)) for e in ds.entries("source_train")]
    tgt = [trainer._batch(cache, [e], trainer._target_kinds(model)) for e in ds.entries("target_train")]
    return src, tgt


def test_step_a_overfits_one_sample(tiny_data):
    model = build_model("rgb_only", width=4, seed=0)
    state = TrainState(model, lr=1e-2)
    src, _ = load_batches(tiny_data, model)
    losses = [step_a(state, src[0])["L_seg"] for _ in range(51)]
    rises = sum(b > a for a, b in zip(losses, losses[1:]))
    assert rises <= 5 and losses[-1] < losses[0]


def test_step_a_needs_labels():
    state = TrainState(build_model("rgb_only", width=4))
    with pytest.raises(ContractError):
        step_a(state, Batch(rgb=np.zeros((1, 3, 16, 16), np.float32)))


def test_step_a_multitask_updates_log_vars_and_heads(tiny_data):
    model = build_model("rgb_only", "triple", width=4)
    state = TrainState(model)
    src, tgt = load_batches(tiny_data, model)
    before = {g: digest(model, g) for g in ("head", "uncertainty")}
    r = step_a(state, src[0], tgt[0])
    assert set(r) >= {"L_seg", "L_depth", "L_depth_tgt", "L_boundary", "total"}
    assert all(digest(model, g) != before[g] for g in before)


@pytest.mark.parametrize("tasks", ["seg_only", "dual"])
def test_steps_respect_parameter_partition(tiny_data, tasks):
    model = build_model("rgb_only", tasks, width=4)
    state = TrainState(model)
    src, tgt = load_batches(tiny_data, model)
    groups = [g for g in ("generator", "classifier", "head", "uncertainty") if model.groups[g]]
    before = {g: digest(model, g) for g in groups}
    step_b(state, src[0], tgt[0])
    after_b = {g: digest(model, g) for g in groups}
    assert {g for g in groups if after_b[g] != before[g]} == {"classifier"}
    step_c(state, tgt[0], 2)
    after_c = {g: digest(model, g) for g in groups}
    assert {g for g in groups if after_c[g] != after_b[g]} == {"generator"}
    step_c(state, tgt[0], 0)
    assert {g: digest(model, g) for g in groups} == after_c


def trained_state(root, seed):
    model = build_model("rgb_only", width=4, seed=seed)
    state = TrainState(model)
    src, tgt = load_batches(root, model)
    for i in range(3):
        step_a(state, src[i % len(src)])
    # fresh optimizers, so warm-up momentum does not leak into the step under test
    return TrainState(model), src, tgt


def test_step_b_pushes_discrepancy_up(tiny_data):
    # The same step also fits both classifiers to the source labels, which pulls
    # them together, so the adversarial direction is measured against that step
    # run with the adversarial weight zeroed.
    up = 0
    for trial in range(20):
        adv, src, tgt = trained_state(tiny_data, trial)
        ctrl, _, _ = trained_state(tiny_data, trial)
        ctrl.adv_weight = 0.0
        s, t = src[trial % len(src)], tgt[trial % len(tgt)]
        step_b(adv, s, t)
        step_b(ctrl, s, t)
        up += trainer.discrepancy_value(adv, t) > trainer.discrepancy_value(ctrl, t)
    assert up >= 16


def test_step_c_lowers_discrepancy(tiny_data):
    down = 0
    for trial in range(20):
        state, src, tgt = trained_state(tiny_data, trial)
        t = tgt[trial % len(tgt)]
        before = trainer.discrepancy_value(state, t)
        step_c(state, t, 1)
        down += trainer.discrepancy_value(state, t) < before
    assert down >= 16


def test_step_b_without_adversarial_term_is_source_training(tiny_data):
    a, src, tgt = trained_state(tiny_data, 0)
    b, _, _ = trained_state(tiny_data, 0)
    a.adv_weight = 0.0
    step_b(a, src[1], tgt[0])
    b.model.set_trainable("classifier")
    trainer._seg_loss(trainer._forward(b.model, src[1]), src[1].labels).backward()
    b._step(("classifier",))
    assert checkpoint_bytes(a.model) == checkpoint_bytes(b.model)


def test_select_epoch_rules(tmp_path):
    assert trainer.select_from_entropies([2.1, 1.4, 1.7]) == 2
    assert trainer.select_from_entropies([1.0, 1.0, 1.0]) == 1
    assert trainer.select_from_entropies([0.3]) == 1
    with pytest.raises(ValueError):
        trainer.select_from_entropies([])
    rows = [{"epoch": e, "target_entropy": v} for e, v in ((1, 0.9), (2, 0.5), (3, 0.5))]
    assert trainer.select_epoch(rows) == 2
    assert trainer.select_epoch([{"epoch": 1, "target_entropy": None}, {"epoch": 2, "target_entropy": None}]) == 2
    assert trainer.select_epoch([{"epoch": 1, "target_entropy": float("nan")}, {"epoch": 2, "target_entropy": 0.7}]) == 2
    with pytest.raises(ValueError):
        trainer.select_epoch([])


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(mode="semi")
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_dict({"learning_rate": 1})
    assert TrainConfig.from_dict(TrainConfig(seed=3).to_dict()) == TrainConfig(seed=3)


class ReadAudit:
    def __init__(self, monkeypatch):
        self.reads = []
        original = Dataset.read

        def read(ds, entry, kind):
            self.reads.append((entry["domain"], entry["split"], kind))
            return original(ds, entry, kind)

        monkeypatch.setattr(Dataset, "read", read)


def small_config(root, out, **kw):
    d = dict(data_dir=str(root), out_dir=str(out), width=4, iters_per_epoch=6, epochs=2, entropy_samples=2)
    d.update(kw)
    return TrainConfig(**d)


def test_source_only_never_reads_target(tiny_data, tmp_path, monkeypatch):
    audit = ReadAudit(monkeypatch)
    trainer.train(small_config(tiny_data, tmp_path, mode="source_only"))
    assert audit.reads and all(d == "source" for d, _, _ in audit.reads)
    rows = trainer.read_log(tmp_path)
    assert [r["epoch"] for r in rows] == [1, 2]
    assert all(r["target_entropy"] is None and r["L_adv_tgt"] is None for r in rows)
    assert trainer.select_epoch(tmp_path) == 2


def test_adapt_never_reads_target_labels(tiny_data, tmp_path, monkeypatch):
    audit = ReadAudit(monkeypatch)
    trainer.train(small_config(tiny_data, tmp_path, fusion="rgb_only", tasks="triple"))
    target_kinds = {k for d, _, k in audit.reads if d == "target"}
    assert target_kinds == {"rgb", "hha"}


def test_run_directory_contents_and_determinism(tiny_data, tmp_path):
    for name in ("a", "b"):
        trainer.train(small_config(tiny_data, tmp_path / name, track_dynamics=True))
    configs = [json.loads((tmp_path / n / "config.json").read_text()) for n in ("a", "b")]
    assert configs[0].pop("out_dir") != configs[1].pop("out_dir") and configs[0] == configs[1]
    for f in ("log.csv", "dynamics.csv", "ckpt_epoch1.mcseg", "ckpt_epoch2.mcseg"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f
    header = (tmp_path / "a" / "log.csv").read_text().splitlines()[0]
    assert header == "epoch,L_seg_src,L_adv_tgt,L_depth,L_boundary,target_entropy"
    rows = trainer.read_log(tmp_path / "a")
    assert len(rows) == 2
    assert all(np.isfinite(r[k]) for r in rows for k in ("L_seg_src", "L_adv_tgt", "target_entropy"))
    manifest = json.loads((tmp_path / "a" / "run_manifest.json").read_text())
    assert manifest["seed"] == 0 and manifest["version"].startswith("mcseg-")
    listed = {f["name"]: f for f in manifest["files"]}
    assert set(listed) == {"config.json", "log.csv", "dynamics.csv", "ckpt_epoch1.mcseg", "ckpt_epoch2.mcseg"}
    blob = (tmp_path / "a" / "ckpt_epoch2.mcseg").read_bytes()
    assert listed["ckpt_epoch2.mcseg"]["sha256"] == hashlib.sha256(blob).hexdigest()
    dyn = trainer.read_log(tmp_path / "a", "dynamics.csv")
    assert [r["epoch"] for r in dyn] == [1, 2]


def test_warmup_skips_adversarial_steps(tiny_data, tmp_path):
    trainer.train(small_config(tiny_data, tmp_path, warmup_epochs=1))
    rows = trainer.read_log(tmp_path)
    assert rows[0]["L_adv_tgt"] is None and rows[1]["L_adv_tgt"] is not None


def test_oracle_mode_trains_on_target_labels(tiny_data, tmp_path, monkeypatch):
    audit = ReadAudit(monkeypatch)
    trainer.train(small_config(tiny_data, tmp_path, mode="oracle", epochs=1))
    assert {(d, s) for d, s, k in audit.reads if k == "labels"} == {("target", "train")}


def test_missing_dataset_is_reported(tmp_path):
    with pytest.raises(FileNotFoundError, match="manifest"):
        trainer.train(small_config(tmp_path / "nowhere", tmp_path / "out"))


def blow_up_after(monkeypatch, iteration):
    """Make step_c report a NaN loss from the given iteration on."""
    original = trainer.step_c

    def step_c(state, tgt, num_c_steps=4):
        out = original(state, tgt, num_c_steps)
        return {"L_adv": float("nan")} if state.iteration >= iteration else out

    monkeypatch.setattr(trainer, "step_c", step_c)


def test_divergence_stops_and_keeps_finished_epochs(tiny_data, tmp_path, monkeypatch):
    blow_up_after(monkeypatch, 8)
    with pytest.raises(trainer.TrainingDiverged) as exc:
        trainer.train(small_config(tiny_data, tmp_path, epochs=3))
    assert (exc.value.epoch, exc.value.iteration, exc.value.completed) == (2, 9, 1)
    rows = trainer.read_log(tmp_path)
    assert [r["epoch"] for r in rows] == [1] and np.isfinite(rows[0]["L_adv_tgt"])
    assert (tmp_path / "ckpt_epoch1.mcseg").exists() and not (tmp_path / "ckpt_epoch2.mcseg").exists()
    manifest = json.loads((tmp_path / "run_manifest.json").read_text())
    assert manifest["diverged"] == {"epoch": 2, "iteration": 9}
    assert {f["name"] for f in manifest["files"]} == {"config.json", "log.csv", "ckpt_epoch1.mcseg"}
