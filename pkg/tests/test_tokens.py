import time
from collections import Counter

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from emotx.features import CharTrack, FeatureBundle
from emotx.tokens import (
    CHAR,
    CHAR_CLS,
    PAD,
    SCENE_CLS,
    UTT,
    VIDEO,
    AssemblyError,
    TokenAssembler,
    assemble,
    build_plan,
    check_drop,
    collate,
    l_max,
    modality_mask,
    time_bin,
    time_bins,
)

from _util import random_bundle

DIMS = (6, 5, 4)
TAU = 1 / 3


def assembler(n_cls=3, N=2, table=13, D=8, **kw):
    torch.manual_seed(0)
    return TokenAssembler(D, DIMS, n_cls, N, table, **kw).double()


# ------------------------------------------------------------ time bins


def test_time_bin_examples():
    assert time_bin(0.0, TAU, 301) == 0
    assert time_bin(10.0, TAU, 301) == 30
    assert time_bin(200.0, TAU, 301) == 300
    assert time_bin(0.1, TAU, 301) == 1


def test_time_bin_negative():
    with pytest.raises(AssemblyError):
        time_bin(-0.5, TAU, 301)
    with pytest.raises(AssemblyError):
        time_bins(np.array([0.0, -1.0]), TAU, 301)


@given(st.integers(0, 299))
def test_time_bin_exact_multiples(n):
    assert time_bin(n / 3, TAU, 301) == n
    assert time_bins(np.array([n / 3]), TAU, 301)[0] == n


@given(st.floats(0, 500, allow_nan=False))
def test_time_bins_match_scalar(t):
    assert time_bins(np.array([t]), TAU, 301)[0] == time_bin(t, TAU, 301)


# ------------------------------------------------------------ budget


def test_l_max_full_budget():
    assert l_max(25, 4, 300) == 1925
    assert l_max(1, 4, 300) == 1805


def test_minimal_sequence_has_two_tokens():
    b = FeatureBundle("s", 1.0, np.zeros(0), np.zeros((0, 6), np.float32),
                      {"c0": CharTrack(np.zeros(0), np.zeros((0, 5), np.float32))},
                      (), np.zeros(0), np.zeros((0, 4), np.float32))
    asm = assembler(n_cls=1, N=1)
    seq = assemble(b, [], asm, T=0, tau=TAU)
    assert len(seq) == 2 and seq.n_real == 2
    assert [t[0] for t in seq.role_tags()] == ["scene_cls", "char_cls"]


def test_full_budget_assembly_fast():
    rng = np.random.default_rng(0)
    b = random_bundle(rng, n_frames=300, n_chars=4, n_utt=300, dims=DIMS, char_prob=1.0)
    asm = TokenAssembler(16, DIMS, 25, 4, 301)
    t0 = time.perf_counter()
    seq = assemble(b, b.video_times, asm, T=300, tau=TAU)
    assert time.perf_counter() - t0 < 1.0
    assert len(seq) == 1925 and seq.n_real == 1925


def test_budget_identity_random_configs():
    rng = np.random.default_rng(1)
    for _ in range(100):
        K, N, T = int(rng.integers(1, 6)), int(rng.integers(1, 5)), int(rng.integers(1, 12))
        n_chars = int(rng.integers(1, N + 1))
        b = random_bundle(rng, n_frames=T, n_chars=n_chars, n_utt=int(rng.integers(0, T + 1)), dims=DIMS)
        picked = np.sort(rng.choice(b.video_times, size=int(rng.integers(1, T + 1)), replace=False))
        plan = build_plan(b, picked, n_cls=K, N=N, T=T, tau=TAU, table_size=T + 1)
        char_frames = sum(int(np.isin(t.times, picked).sum()) for t in b.char_feats.values())
        assert plan.n_real == K + len(picked) + n_chars * K + char_frames + len(b.utt_times)
        batch = collate([plan], pad_to=l_max(K, N, T))
        assert int(batch.mask.sum()) == plan.n_real


def test_assembly_errors():
    rng = np.random.default_rng(2)
    b = random_bundle(rng, n_frames=6, n_chars=3, n_utt=4)
    with pytest.raises(AssemblyError, match="characters"):
        build_plan(b, b.video_times, n_cls=1, N=2, T=10, tau=TAU, table_size=5)
    with pytest.raises(AssemblyError, match="video tokens"):
        build_plan(b, b.video_times, n_cls=1, N=3, T=5, tau=TAU, table_size=5)
    with pytest.raises(AssemblyError, match="utterances"):
        build_plan(b, b.video_times[:3], n_cls=1, N=3, T=3, tau=TAU, table_size=5)
    plan = build_plan(b, b.video_times, n_cls=1, N=3, T=10, tau=TAU, table_size=5)
    with pytest.raises(AssemblyError, match="pad_to"):
        collate([plan], pad_to=3)


# ------------------------------------------------------------ token construction


def _ln(x, norm):
    mu = x.mean(-1, keepdim=True)
    var = ((x - mu) ** 2).mean(-1, keepdim=True)
    return (x - mu) / torch.sqrt(var + norm.eps) * norm.weight + norm.bias


def test_token_construction_oracle():
    rng = np.random.default_rng(3)
    b = random_bundle(rng, n_frames=7, n_chars=2, n_utt=3)
    asm = assembler(n_cls=3, N=2, table=13)
    with torch.no_grad():
        asm.norm.weight.uniform_(0.5, 1.5)
        asm.norm.bias.uniform_(-0.2, 0.2)
    seq = assemble(b, b.video_times, asm, T=8, tau=TAU)
    E_M, E_C, E_T = asm.modality_emb, asm.char_emb, asm.time_emb
    order = list(b.char_feats)
    dt = torch.float64
    with torch.no_grad():
        for pos, r in enumerate(seq.roles):
            kind = int(r["kind"])
            if kind == PAD:
                assert not seq.mask[pos]
                assert torch.count_nonzero(seq.tokens[pos]) == 0
                continue
            if kind == SCENE_CLS:
                raw = asm.scene_cls[r["k"]] + E_M[0]
            elif kind == CHAR_CLS:
                raw = asm.char_cls[r["char"], r["k"]] + E_M[1] + E_C[r["char"]]
            elif kind == VIDEO:
                f = torch.as_tensor(b.video_feats[r["src"]], dtype=dt)
                raw = asm.proj_video(f) + E_M[0] + E_T[time_bin(b.video_times[r["src"]], TAU, 13)]
            elif kind == CHAR:
                tr = b.char_feats[order[r["char"]]]
                c = torch.as_tensor(tr.feats[r["src"]], dtype=dt)
                raw = asm.proj_char(c) + E_M[1] + E_C[r["char"]] + E_T[time_bin(tr.times[r["src"]], TAU, 13)]
            else:
                u = torch.as_tensor(b.utt_feats[r["src"]], dtype=dt)
                raw = asm.proj_utt(u) + E_M[2] + E_T[time_bin(b.utt_times[r["src"]], TAU, 13)]
            assert seq.mask[pos]
            torch.testing.assert_close(seq.tokens[pos], _ln(raw, asm.norm), rtol=1e-12, atol=1e-12)


def test_zero_features_zero_embeddings_give_layernorm_of_zero():
    rng = np.random.default_rng(4)
    b = random_bundle(rng)
    b = FeatureBundle(b.scene_id, b.duration, b.video_times, np.zeros_like(b.video_feats),
                      {k: CharTrack(t.times, np.zeros_like(t.feats)) for k, t in b.char_feats.items()},
                      b.utt_ids, b.utt_times, np.zeros_like(b.utt_feats))
    asm = assembler(proj_bias=False)
    with torch.no_grad():
        for p in (asm.modality_emb, asm.char_emb, asm.time_emb, asm.scene_cls, asm.char_cls):
            p.zero_()
        asm.norm.bias.uniform_(-1, 1)
    seq = assemble(b, b.video_times, asm, T=8, tau=TAU)
    real = seq.tokens[seq.mask]
    expected = asm.norm(torch.zeros(8, dtype=torch.float64))
    assert torch.equal(real, expected.expand_as(real))


def test_roles_in_range_and_fixed_cls_slots():
    rng = np.random.default_rng(5)
    b = random_bundle(rng, n_chars=1)
    asm = assembler(n_cls=3, N=2)
    seq = assemble(b, b.video_times, asm, T=8, tau=TAU)
    r = seq.roles
    assert (r["kind"][:3] == SCENE_CLS).all() and r["k"][:3].tolist() == [0, 1, 2]
    assert (r["kind"][3:9] == CHAR_CLS).all() and r["char"][3:9].tolist() == [0, 0, 0, 1, 1, 1]
    # second character absent: its classifier slots are masked
    assert seq.mask[3:6].all() and not seq.mask[6:9].any()
    real = r[seq.mask.numpy()]
    assert (real["k"][np.isin(real["kind"], [SCENE_CLS, CHAR_CLS])] < 3).all()
    assert (real["char"][real["kind"] == CHAR] < 1).all()
    assert (real["tbin"][np.isin(real["kind"], [VIDEO, CHAR, UTT])] < 13).all()


def test_shared_time_embedding_for_video_and_character():
    rng = np.random.default_rng(6)
    b = random_bundle(rng, n_frames=6, char_prob=1.0)
    plan = build_plan(b, b.video_times, n_cls=1, N=2, T=8, tau=TAU, table_size=13)
    video_bin = dict(zip(plan.video_src.tolist(), plan.video_bins.tolist()))
    for idx, src, tb in zip(plan.char_idx, plan.char_src, plan.char_bins):
        t = b.char_feats[f"c{idx}"].times[src]
        frame = int(np.flatnonzero(np.isclose(b.video_times, t))[0])
        assert video_bin[frame] == tb


def test_utterance_permutation_keeps_token_multiset():
    rng = np.random.default_rng(7)
    b = random_bundle(rng, n_utt=5)
    asm = assembler()
    perm = rng.permutation(5)
    pb = FeatureBundle(b.scene_id, b.duration, b.video_times, b.video_feats, b.char_feats,
                       tuple(np.array(b.utt_ids)[perm]), b.utt_times[perm], b.utt_feats[perm])
    a = assemble(b, b.video_times, asm, T=8, tau=TAU)
    p = assemble(pb, b.video_times, asm, T=8, tau=TAU)
    ua = a.tokens[torch.as_tensor(a.roles["kind"] == UTT)]
    up = p.tokens[torch.as_tensor(p.roles["kind"] == UTT)]
    key = lambda rows: sorted(tuple(np.round(r, 12)) for r in rows.detach().numpy())
    assert key(ua) == key(up)
    torch.testing.assert_close(up, ua[torch.as_tensor(perm)], rtol=0, atol=0)


def test_frame_selection_picks_latest_frame_at_or_before():
    rng = np.random.default_rng(8)
    b = random_bundle(rng, n_frames=6)
    plan = build_plan(b, [0.05, 0.4, 1.0, 1.99], n_cls=1, N=2, T=8, tau=TAU, table_size=13)
    assert plan.video_src.tolist() == [0, 1, 3, 5]


# ------------------------------------------------------------ modality masking


def test_check_drop():
    assert check_drop([]) == ()
    with pytest.raises(ValueError):
        check_drop(["audio"])
    with pytest.raises(ValueError):
        check_drop(["video", "character", "dialog"])


def test_modality_mask_identity_and_character_only():
    rng = np.random.default_rng(9)
    b = random_bundle(rng)
    seq = assemble(b, b.video_times, assembler(), T=8, tau=TAU)
    assert modality_mask(seq, ()) is seq
    only = modality_mask(seq, ("video", "dialog"))
    kinds = set(seq.roles["kind"][only.mask.numpy()].tolist())
    assert kinds == {SCENE_CLS, CHAR_CLS, CHAR}
    assert torch.count_nonzero(only.tokens[~only.mask]) == 0


@pytest.mark.parametrize("drop", [("video",), ("character",), ("dialog",), ("video", "dialog"), ("character", "dialog")])
def test_modality_mask_equals_physical_removal(drop):
    rng = np.random.default_rng(10)
    b = random_bundle(rng, n_frames=7, n_utt=4)
    asm = assembler()
    full = assemble(b, b.video_times, asm, T=8, tau=TAU)
    masked = modality_mask(full, drop)
    plan = build_plan(b, b.video_times, n_cls=3, N=2, T=8, tau=TAU, table_size=13, drop=drop)
    x, mask = asm(collate([plan], dtype=torch.float64))
    torch.testing.assert_close(masked.tokens[masked.mask], x[0][mask[0]], rtol=0, atol=0)
    # a bundle with the dialog or character data deleted gives the same real tokens
    if drop == ("dialog",):
        stripped = FeatureBundle(b.scene_id, b.duration, b.video_times, b.video_feats, b.char_feats,
                                 (), np.zeros(0), np.zeros((0, 4), np.float32))
    elif drop == ("character",):
        stripped = FeatureBundle(b.scene_id, b.duration, b.video_times, b.video_feats,
                                 {k: CharTrack(t.times[:0], t.feats[:0]) for k, t in b.char_feats.items()},
                                 b.utt_ids, b.utt_times, b.utt_feats)
    else:
        return
    seq = assemble(stripped, b.video_times, asm, T=8, tau=TAU)
    torch.testing.assert_close(masked.tokens[masked.mask], seq.tokens[seq.mask], rtol=0, atol=0)


def test_collate_pads_to_batch_max():
    rng = np.random.default_rng(11)
    plans = [
        build_plan(random_bundle(rng, n_frames=n), np.arange(n) / 3, n_cls=2, N=2, T=8, tau=TAU, table_size=13)
        for n in (2, 5)
    ]
    batch = collate(plans)
    assert batch.shape == (2, 2 * 3 + max(p.n_var for p in plans))
    assert int(batch.mask[0].sum()) == plans[0].n_real
