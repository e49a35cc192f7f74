import numpy as np
import pytest

from mcseg import models
from mcseg.autodiff import ContractError, Tensor, ops
from mcseg.models import FUSION_KINDS, GROUPS, build_model

RNG = np.random.default_rng(0)
RGB = RNG.uniform(size=(1, 3, 16, 24)).astype(np.float32)
HHA = RNG.uniform(size=(1, 3, 16, 24)).astype(np.float32)


def count(model, prefix):
    return sum(p.size for n, p in model.params.items() if n.startswith(prefix))


def conv_count(cin, cout, k):
    return cin * cout * k * k + cout


def encoder_count(cin, w):
    total = 0
    for cout in (w, 2 * w, 4 * w):
        total += conv_count(cin, cout, 3) + conv_count(cout, cout, 3)
        cin = cout
    return total


def head_count(cin, w, cout):
    return conv_count(cin, w, 1) + conv_count(w, w, 1) + conv_count(w, cout, 1)


@pytest.mark.parametrize("fusion", FUSION_KINDS)
def test_forward_shapes_and_purity(fusion):
    m = build_model(fusion, num_classes=5, width=4)
    a, b = m(RGB, HHA), m(RGB, HHA)
    assert a.logits1.shape == a.logits2.shape == (1, 5, 16, 24)
    np.testing.assert_array_equal(a.logits1.data, b.logits1.data)
    assert not np.array_equal(a.logits1.data, a.logits2.data)  # independent initialisation
    np.testing.assert_array_equal(m(RGB, HHA, mode="eval").logits2.data, a.logits2.data)


def test_parameter_census():
    w, k = 4, 6
    early = build_model("early", width=w)
    assert early.params["enc.s1.down.weight"].shape == (w, 6, 3, 3)
    gate = build_model("score_gate", width=w)
    expected = 2 * encoder_count(3, w) + 4 * head_count(4 * w, w, k) + conv_count(2 * k, k, 1)
    assert sum(p.size for p in gate.params.values()) == expected
    assert count(gate, "enc_rgb") == count(gate, "enc_hha") == encoder_count(3, w)
    lc = build_model("late_concat", width=w)
    assert count(lc, "c1.") == head_count(8 * w, w, k)
    triple = build_model("rgb_only", "triple", width=w)
    extra = head_count(4 * w, w, 3) + 3 + conv_count(w, 1, 1) + conv_count(2 * w, 1, 1) + conv_count(4 * w, 1, 1)
    assert sum(p.size for p in triple.params.values()) == encoder_count(3, w) + 2 * head_count(4 * w, w, k) + extra


@pytest.mark.parametrize("fusion,tasks", [(f, "seg_only") for f in FUSION_KINDS] + [("rgb_only", "dual"),
                                                                                    ("rgb_only", "triple")])
def test_parameter_groups_partition(fusion, tasks):
    m = build_model(fusion, tasks, width=4)
    tensors = m.parameter_groups()
    assert set(tensors) == set(GROUPS)
    groups = m.groups
    assert all([id(t) for t in tensors[g]] == [id(m.params[n]) for n in groups[g]] for g in GROUPS)
    names = [n for g in GROUPS for n in groups[g]]
    assert sorted(names) == sorted(m.params) and len(names) == len(set(names))
    if tasks == "seg_only":
        assert groups["head"] == [] and groups["uncertainty"] == []
    heads = {n.split(".")[0] for n in groups["classifier"]} - {"fuse"}
    assert len(heads) == (4 if fusion.startswith("score") else 2)


def test_triple_outputs():
    m = build_model("rgb_only", "triple", width=4)
    out = m(RGB)
    assert out.depth.shape == (1, 3, 16, 24) and out.boundary.shape == (1, 1, 16, 24)
    assert np.all((out.boundary.data > 0) & (out.boundary.data < 1))
    np.testing.assert_array_equal(m.predict_depth(RGB).data, out.depth.data)


def test_invalid_combinations_and_inputs():
    with pytest.raises(ContractError):
        build_model("early", "dual")
    with pytest.raises(ContractError):
        build_model("bogus")
    with pytest.raises(ContractError, match="HHA"):
        build_model("early", width=4)(RGB)
    with pytest.raises(ContractError, match="multiples of 8"):
        build_model("rgb_only", width=4)(RGB[:, :, :12])
    with pytest.raises(ContractError):
        build_model("rgb_only", width=4)(RGB, mode="test")


def test_class_permutation_equivariance():
    m = build_model("rgb_only", num_classes=5, width=4)
    base = m(RGB)
    perm = np.array([3, 0, 4, 1, 2])
    for name in ("c1", "c2"):
        for suffix in ("weight", "bias"):
            p = m.params[f"{name}.conv3.{suffix}"]
            p.data = p.data[perm].copy()
    out = m(RGB)
    np.testing.assert_allclose(out.logits1.data, base.logits1.data[:, perm], rtol=1e-6, atol=1e-6)
    np.testing.assert_allclose(out.logits2.data, base.logits2.data[:, perm], rtol=1e-6, atol=1e-6)


def test_fusenet_with_zero_hha_encoder_equals_rgb_only():
    fuse = build_model("fusenet", width=4, seed=1)
    plain = build_model("rgb_only", width=4, seed=2)
    for name, p in fuse.params.items():
        if name.startswith("enc_hha"):
            p.data = np.zeros_like(p.data)
        elif name.startswith("enc_rgb"):
            plain.params[name.replace("enc_rgb", "enc")].data = p.data.copy()
        else:
            plain.params[name].data = p.data.copy()
    np.testing.assert_allclose(fuse(RGB, HHA).logits1.data, plain(RGB).logits1.data, rtol=1e-6, atol=1e-7)


def test_late_add_and_concat_share_everything_before_fusion():
    add = build_model("late_add", width=4, seed=3)
    cat = build_model("late_concat", width=4, seed=4)
    for name, p in add.params.items():
        if name.startswith("enc"):
            cat.params[name].data = p.data.copy()
    fa, _ = add.generate(RGB, HHA)
    fc, _ = cat.generate(RGB, HHA)
    np.testing.assert_allclose(fa.data, fc.data[:, :16] + fc.data[:, 16:], rtol=1e-6)
    assert fc.shape[1] == 2 * fa.shape[1]


def test_gate_is_convex_combination_of_scores():
    m = build_model("score_gate", width=4)
    (fr, fh), _ = m.generate(RGB, HHA)
    s_rgb, s_hha = m._head_apply("c1_rgb", fr).data, m._head_apply("c1_hha", fh).data
    both = np.concatenate([s_rgb, s_hha], axis=1)
    z = ops.conv2d(Tensor(both), m.params["fuse.weight"], m.params["fuse.bias"]).data
    g = 1 / (1 + np.exp(-z))
    np.testing.assert_allclose(m(RGB, HHA).logits1.data, g * s_rgb + (1 - g) * s_hha, rtol=1e-5, atol=1e-6)


def test_head_upsample_order_is_equivalent():
    m = build_model("rgb_only", width=4)
    feat, _ = m.generate(RGB)
    x = ops.bilinear_upsample(feat, 8)
    x = ops.relu(ops.conv2d(x, m.params["c1.conv1.weight"], m.params["c1.conv1.bias"]))
    x = ops.relu(ops.conv2d(x, m.params["c1.conv2.weight"], m.params["c1.conv2.bias"]))
    x = ops.conv2d(x, m.params["c1.conv3.weight"], m.params["c1.conv3.bias"])
    np.testing.assert_allclose(m(RGB).logits1.data, x.data, rtol=1e-5, atol=1e-6)


def test_checkpoint_round_trip_and_layout(tmp_path):
    m = build_model("score_concat_conv", width=4, seed=7)
    path = tmp_path / "m.mcseg"
    models.save_checkpoint(m, path, meta={"epoch": 2})
    raw = path.read_bytes()
    assert raw.startswith(models.CHECKPOINT_MAGIC)
    n = int.from_bytes(raw[7:11], "little")
    assert len(raw) == 11 + n + 4 * sum(p.size for p in m.params.values())
    back, meta = models.load_checkpoint(path)
    assert meta == {"epoch": 2} and back.config() == m.config()
    for name, p in m.params.items():
        np.testing.assert_array_equal(back.params[name].data, p.data)
    assert models.checkpoint_bytes(back, meta) == raw


def test_checkpoint_errors(tmp_path):
    m = build_model("rgb_only", width=4)
    raw = models.checkpoint_bytes(m)
    cases = {"magic": b"NOTACKPT" + raw[8:], "truncated": raw[:-4], "trailing": raw + b"\x00",
             "header": raw[:11] + b"[" + raw[12:]}
    for label, blob in cases.items():
        path = tmp_path / f"{label}.mcseg"
        path.write_bytes(blob)
        with pytest.raises(ValueError):
            models.load_checkpoint(path)


def test_astype_and_trainable_flags():
    m = build_model("rgb_only", "dual", width=4)
    m.set_trainable(["classifier"])
    trainable = {n for n, p in m.params.items() if p.requires_grad}
    assert trainable == set(m.groups["classifier"])
    m64 = m.astype(np.float64)
    assert all(p.data.dtype == np.float64 for p in m64.params.values())
