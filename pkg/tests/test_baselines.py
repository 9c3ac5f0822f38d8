import numpy as np
import pytest
import torch

from emotx.baselines import MaxPoolMLP, SingleTx
from emotx.checkpoint import build_model
from emotx.features import CharTrack, FeatureBundle
from emotx.tokens import collate

from _util import plan_for, random_bundle, tiny_config

DIMS = (6, 5, 4)


def mlp():
    torch.manual_seed(0)
    return MaxPoolMLP(3, 2, 16, DIMS).double().eval()


def single_tx(layers=2):
    torch.manual_seed(0)
    return SingleTx(3, 2, 16, DIMS, 13, layers=layers, heads=4, dropout=0.0).double().eval()


def batch(bundles, n_cls=1, pad_to=None):
    cfg = tiny_config()
    return collate([plan_for(b, cfg, n_cls) for b in bundles], pad_to=pad_to, dtype=torch.float64)


def test_mlp_pool_constant_features():
    rng = np.random.default_rng(0)
    b = random_bundle(rng, n_frames=5)
    row_v = rng.standard_normal(6).astype(np.float32)
    row_c = rng.standard_normal(5).astype(np.float32)
    const = FeatureBundle(b.scene_id, b.duration, b.video_times, np.tile(row_v, (5, 1)),
                          {k: CharTrack(t.times, np.tile(row_c, (len(t), 1))) for k, t in b.char_feats.items()},
                          (), np.zeros(0), np.zeros((0, 4), np.float32))
    m = mlp()
    scene, chars, counts = m.pool(batch([const]))
    with torch.no_grad():
        torch.testing.assert_close(scene[0], m.proj_video(torch.as_tensor(row_v, dtype=torch.float64)))
        for i in range(2):
            torch.testing.assert_close(chars[0, i], m.proj_char(torch.as_tensor(row_c, dtype=torch.float64)))


def test_mlp_pool_loop_oracle():
    rng = np.random.default_rng(1)
    bundles = [random_bundle(rng, n_frames=int(rng.integers(1, 8))) for _ in range(4)]
    m = mlp()
    bt = batch(bundles)
    scene, chars, counts = m.pool(bt)
    with torch.no_grad():
        # project the batch's rows exactly as the model does; the loops check the pooling
        pv = m.proj_video(bt.video[0])
        pu = m.proj_utt(bt.utts[0])
        pc = m.proj_char(bt.chars[0])
    for n in range(len(bundles)):
        rows = [r for r, b in zip(pv, bt.video[1]) if b == n] + [r for r, b in zip(pu, bt.utts[1]) if b == n]
        expected = [max(float(r[d]) for r in rows) for d in range(16)]
        assert scene[n].tolist() == expected
        for i in range(2):
            crows = [r for r, b, pos in zip(pc, bt.chars[1], bt.chars[2]) if b == n and bt.char[n, pos] == i]
            assert int(counts[n, i]) == len(crows) == len(bundles[n].char_feats[f"c{i}"])
            assert chars[n, i].tolist() == [max(float(r[d]) for r in crows) for d in range(16)]


def test_mlp_frame_order_free():
    rng = np.random.default_rng(2)
    b = random_bundle(rng, n_frames=7, char_prob=1.0)
    m = mlp()
    a = m(batch([b]))
    cfg = tiny_config()
    times = b.video_times[rng.permutation(7)]
    plan = plan_for(b, cfg, 1, times=times)
    p = m(collate([plan], dtype=torch.float64))
    torch.testing.assert_close(a.scene, p.scene, rtol=0, atol=0)
    torch.testing.assert_close(a.chars, p.chars, rtol=0, atol=0)


def test_mlp_skips_character_without_frames():
    rng = np.random.default_rng(3)
    b = random_bundle(rng, n_frames=4)
    chars = dict(b.char_feats)
    chars["c1"] = CharTrack(np.zeros(0), np.zeros((0, 5), np.float32))
    b = FeatureBundle(b.scene_id, b.duration, b.video_times, b.video_feats, chars, b.utt_ids, b.utt_times, b.utt_feats)
    out = mlp()(batch([b]))
    assert out.char_present[0].tolist() == [True, False]


@pytest.mark.parametrize("factory", [mlp, single_tx])
def test_probabilities_shape_and_range(factory):
    rng = np.random.default_rng(4)
    out = factory()(batch([random_bundle(rng) for _ in range(3)]))
    assert out.scene.shape == (3, 3) and out.chars.shape == (3, 2, 3)
    for p in (out.scene, out.chars):
        assert ((p > 0) & (p < 1)).all()


def test_single_tx_padding_invariance():
    rng = np.random.default_rng(5)
    bundles = [random_bundle(rng, n_frames=int(rng.integers(2, 8))) for _ in range(4)]
    m = single_tx()
    a = m(batch(bundles))
    b = m(batch(bundles, pad_to=batch(bundles).shape[1] + 60))
    for x, y in ((a.scene, b.scene), (a.chars, b.chars)):
        assert ((x - y).abs() / x.abs()).max() < 1e-5


def test_single_tx_zero_layers_is_head_on_raw_cls():
    rng = np.random.default_rng(6)
    m = single_tx(layers=0)
    bt = batch([random_bundle(rng)])
    out = m(bt)
    with torch.no_grad():
        x, _ = m.assembler(bt)
        torch.testing.assert_close(out.scene[0], torch.sigmoid(m.scene_head(x[0, 0])))
        torch.testing.assert_close(out.chars[0, 0], torch.sigmoid(m.char_head(x[0, 1])))


def test_single_tx_passes():
    rng = np.random.default_rng(7)
    m = single_tx()
    bt = batch([random_bundle(rng, n_chars=2, char_prob=1.0)])
    masks = m.pass_masks(bt)[0]
    kind, char = bt.kind[0], bt.char[0]
    # scene pass: scene cls plus every feature token
    assert masks[0].sum() == 1 + int(((kind >= 2) & bt.mask[0]).sum())
    # character pass: own cls plus own boxes
    for i in range(2):
        assert masks[1 + i].sum() == 1 + int(((kind == 3) & (char == i)).sum())


def test_build_model_kinds():
    cfg = tiny_config()
    for kind, cls in (("mlp", MaxPoolMLP), ("single-tx", SingleTx)):
        assert isinstance(build_model(cfg.updated(model=kind), 10), cls)
    m = build_model(cfg.updated(model="emotx-1cls"), 10)
    assert m.n_cls == 1 and m.cls_mode == "single"
