import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given
from hypothesis import strategies as st
from torch import nn

from vlp3d.encoders import PoolingSpec, VisionEncoder, VisionEncoderConfig, patchify_batch
from vlp3d.errors import ArgumentError, StateError
from vlp3d.objectives import (
    MASK_STYLES,
    MAEDecoder,
    MaskSpec,
    ReportDecoder,
    build_causal_decoder_input,
    build_parallel_decoder_input,
    clip_sigmoid_loss,
    clip_softmax_loss,
    collate_decoder_inputs,
    combine_losses,
    mae_loss,
    masked_count,
    parallel_input_length,
    reconstruction_target,
    rrg_loss,
    sample_mask,
)
from vlp3d.reportgen import BOS, EOS, HEADER_IDS, MASK, PAD, SPECIALS, Vocab, section_token_ids, synth_report

from fdcheck import gradient_errors
from oracles import flood_fill_components, masked_mse_loop, sigmoid_clip_loss_enum, softmax_clip_loss_enum


def unit_rows(n, d, seed):
    x = torch.randn(n, d, generator=torch.Generator().manual_seed(seed))
    return F.normalize(x, dim=-1)


class Raw(nn.Module):
    """Free parameters for gradient checks of functional losses."""

    def __init__(self, **tensors):
        super().__init__()
        for k, v in tensors.items():
            setattr(self, k, nn.Parameter(v.clone()))


# --- softmax contrastive ------------------------------------------------------------


def test_softmax_single_pair_is_zero():
    e = unit_rows(1, 8, 0)
    assert float(clip_softmax_loss(e, unit_rows(1, 8, 1), 0.07)) == 0.0


def test_softmax_two_orthonormal_pairs():
    eye = torch.eye(2, dtype=torch.float64)
    loss = float(clip_softmax_loss(eye, eye, 1.0))
    oracle = softmax_clip_loss_enum(eye.tolist(), eye.tolist(), 1.0)
    assert oracle == pytest.approx(0.3132616875182228, abs=1e-15)
    assert loss == pytest.approx(oracle, abs=1e-12)
    assert loss == pytest.approx(math.log1p(math.exp(-1)), abs=1e-12)


@given(st.integers(1, 9), st.integers(0, 10_000), st.floats(0.005, 1.0))
def test_softmax_matches_enumeration(b, seed, t):
    img, txt = unit_rows(b, 6, seed).double(), unit_rows(b, 6, seed + 1).double()
    assert float(clip_softmax_loss(img, txt, t)) == pytest.approx(
        softmax_clip_loss_enum(img.tolist(), txt.tolist(), t), rel=1e-9, abs=1e-9)


@given(st.integers(1, 12), st.integers(0, 10_000))
def test_softmax_swap_and_permutation_are_bit_exact(b, seed):
    img, txt = unit_rows(b, 16, seed), unit_rows(b, 16, seed + 1)
    ref = clip_softmax_loss(img, txt, 0.07)
    assert torch.equal(clip_softmax_loss(txt, img, 0.07), ref)
    perm = torch.randperm(b, generator=torch.Generator().manual_seed(seed))
    assert torch.equal(clip_softmax_loss(img[perm], txt[perm], 0.07), ref)


def test_contrastive_rejects_non_unit_rows():
    img = unit_rows(3, 4, 0)
    with pytest.raises(ArgumentError):
        clip_softmax_loss(img * 1.01, img, 0.1)
    with pytest.raises(ArgumentError):
        clip_sigmoid_loss(img, img * 0.5, 0.1, 0.0)
    with pytest.raises(ArgumentError):
        clip_softmax_loss(img, unit_rows(2, 4, 0), 0.1)


@given(st.integers(2, 10), st.integers(0, 10_000), st.floats(0.005, 1.0), st.floats(0.005, 1.0))
def test_row_argmax_is_temperature_invariant(b, seed, t1, t2):
    img, txt = unit_rows(b, 8, seed), unit_rows(b, 8, seed + 1)
    sim = img @ txt.T
    assert torch.equal((sim / t1).argmax(dim=1), (sim / t2).argmax(dim=1))


# --- sigmoid contrastive ------------------------------------------------------------


def test_sigmoid_zero_logit_is_ln2():
    e = torch.tensor([[1.0, 0.0]])
    o = torch.tensor([[0.0, 1.0]])
    assert float(clip_sigmoid_loss(e, o, 1.0, 0.0)) == pytest.approx(math.log(2), abs=1e-7)


def test_sigmoid_toy_matrix():
    img = torch.tensor([[0.6, 0.8], [1.0, 0.0]], dtype=torch.float64)
    txt = torch.tensor([[0.0, 1.0], [0.8, 0.6]], dtype=torch.float64)
    oracle = sigmoid_clip_loss_enum(img.tolist(), txt.tolist(), 0.5, -1.0)
    assert oracle == pytest.approx(0.6109128593549311, abs=1e-15)
    assert float(clip_sigmoid_loss(img, txt, 0.5, -1.0)) == pytest.approx(oracle, abs=1e-12)


@given(st.integers(1, 12), st.integers(0, 10_000))
def test_sigmoid_permutation_is_bit_exact(b, seed):
    img, txt = unit_rows(b, 16, seed), unit_rows(b, 16, seed + 1)
    ref = clip_sigmoid_loss(img, txt, 0.1, -2.0)
    perm = torch.randperm(b, generator=torch.Generator().manual_seed(seed))
    assert torch.equal(clip_sigmoid_loss(img[perm], txt[perm], 0.1, -2.0), ref)


# --- contrastive gradients ----------------------------------------------------------


def test_softmax_gradients_match_finite_differences():
    raw = Raw(img=torch.randn(5, 6), txt=torch.randn(5, 6), log_t=torch.tensor(math.log(0.2)))
    errs = gradient_errors(raw, lambda m, dt: clip_softmax_loss(
        F.normalize(m.img, dim=-1), F.normalize(m.txt, dim=-1), m.log_t.exp()))
    assert max(errs) < 1e-3


def test_sigmoid_gradients_match_finite_differences():
    raw = Raw(img=torch.randn(5, 6), txt=torch.randn(5, 6), log_t=torch.tensor(math.log(0.2)),
              bias=torch.tensor(-1.5))
    errs = gradient_errors(raw, lambda m, dt: clip_sigmoid_loss(
        F.normalize(m.img, dim=-1), F.normalize(m.txt, dim=-1), m.log_t.exp(), m.bias))
    assert max(errs) < 1e-3


# --- decoder inputs -----------------------------------------------------------------


@pytest.fixture(scope="module")
def vocab():
    return Vocab.build()


def _sections(labels, seed, vocab):
    return section_token_ids(synth_report(labels, seed), vocab)


def test_parallel_length_is_content_independent(vocab):
    rng = np.random.default_rng(0)
    lengths = set()
    for k in range(100):
        a = _sections((rng.random(18) < 0.3).astype(int), 2 * k, vocab)
        b = _sections((rng.random(18) < 0.05).astype(int), 2 * k + 1, vocab)
        da = build_parallel_decoder_input(a, 16, seed=k)
        db = build_parallel_decoder_input(b, 16, seed=k + 1)
        assert da.ids.count(MASK) == db.ids.count(MASK) == 8 * 16
        lengths |= {len(da.ids), len(db.ids)}
    assert lengths == {parallel_input_length(16)}


def test_parallel_layout_and_loss_positions(vocab):
    secs = _sections([1] * 18, 3, vocab)
    d = build_parallel_decoder_input(secs, 4, seed=7)
    assert d.ids[0] == BOS and d.ids[-1] == EOS
    assert d.ids[1:9] == [HEADER_IDS[k] for k in d.section_order]
    assert sorted(d.section_order) == list(range(8))
    for pos, on in enumerate(d.loss_mask):
        if on:
            assert d.ids[pos] == MASK
    for slot, k in enumerate(d.section_order):
        start = 9 + slot * 4
        expected = list(secs[k])[:4]
        assert d.targets[start : start + len(expected)] == expected


def test_parallel_truncates_and_pads(vocab):
    secs = [[11, 12, 13, 14, 15, 16], [17], [], [18], [19], [20], [21], [22]]
    d = build_parallel_decoder_input(secs, 3, seed=0, shuffle_sections=False)
    assert d.targets[9:12] == [11, 12, 13]
    assert d.targets[12:15] == [17, PAD, PAD]
    assert d.loss_mask[12:15] == [True, False, False]
    assert d.targets[15:18] == [PAD] * 3


def test_parallel_is_seeded(vocab):
    secs = _sections([0] * 18, 1, vocab)
    assert build_parallel_decoder_input(secs, 8, seed=5) == build_parallel_decoder_input(secs, 8, seed=5)
    orders = {build_parallel_decoder_input(secs, 8, seed=s).section_order for s in range(10)}
    assert len(orders) > 1


def test_parallel_rejects_zero_mask_tokens(vocab):
    with pytest.raises(ArgumentError):
        build_parallel_decoder_input(_sections([0] * 18, 1, vocab), 0, seed=0)


def test_causal_loss_skips_specials(vocab):
    secs = _sections([1, 0, 1] + [0] * 15, 2, vocab)
    d = build_causal_decoder_input(secs, seed=4)
    assert d.ids[0] == BOS and d.attention_mode == "causal"
    assert d.ids[1:] == d.targets[:-1]
    special = set(range(len(SPECIALS)))
    for t, on in zip(d.targets, d.loss_mask):
        assert on == (t not in special)
    assert sum(d.loss_mask) == sum(len(s) for s in secs)


def test_collate_rejects_mixed_modes(vocab):
    secs = _sections([0] * 18, 1, vocab)
    with pytest.raises(ArgumentError):
        collate_decoder_inputs([build_causal_decoder_input(secs, 0), build_parallel_decoder_input(secs, 2, 0)])


# --- report decoder -----------------------------------------------------------------


def _decoder(vocab_size=30, max_len=40):
    torch.manual_seed(0)
    return ReportDecoder(vocab_size, dim=16, depth=2, heads=2, vision_dim=12, max_len=max_len)


def test_causal_logits_ignore_future_inputs():
    dec = _decoder()
    ids = torch.randint(20, 30, (1, 10), generator=torch.Generator().manual_seed(0))
    vision = torch.randn(1, 5, 12)
    t = 6
    ids2 = ids.clone()
    ids2[0, t] = (ids[0, t] + 1 - 20) % 10 + 20
    a, b = dec(ids, vision, "causal"), dec(ids2, vision, "causal")
    assert torch.allclose(a[0, :t], b[0, :t], atol=1e-6)
    assert not torch.allclose(a[0, t:], b[0, t:], atol=1e-6)
    c, e = dec(ids, vision, "bidirectional"), dec(ids2, vision, "bidirectional")
    assert not torch.allclose(c[0, :t], e[0, :t], atol=1e-6)


def test_uniform_output_gives_log_vocab():
    dec = _decoder(vocab_size=30)
    with torch.no_grad():
        dec.head.weight.zero_()
        dec.head.bias.zero_()
    secs = [[20, 21], [22], [23, 24, 25], [26], [27], [28], [29], [20]]
    loss = rrg_loss(torch.randn(5, 12), build_parallel_decoder_input(secs, 2, seed=0), dec)
    assert float(loss.detach()) == pytest.approx(math.log(30), abs=1e-6)


def test_empty_loss_mask_raises():
    dec = _decoder()
    d = build_parallel_decoder_input([[] for _ in range(8)], 2, seed=0)
    with pytest.raises(ArgumentError):
        rrg_loss(torch.randn(5, 12), d, dec)


def test_cross_attention_is_live_after_training():
    dec = _decoder(vocab_size=30)
    g = torch.Generator().manual_seed(3)
    vision = torch.randn(4, 5, 12, generator=g)
    items = [build_parallel_decoder_input([[20 + (i + k) % 10, 20 + (2 * i + k) % 10] for k in range(8)], 2, seed=i)
             for i in range(4)]
    batch = collate_decoder_inputs(items)
    opt = torch.optim.Adam(dec.parameters(), lr=3e-3)
    for _ in range(50):
        opt.zero_grad()
        rrg_loss(vision, batch, dec).backward()
        opt.step()
    with torch.no_grad():
        trained = float(rrg_loss(vision, batch, dec))
        blind = float(rrg_loss(torch.zeros_like(vision), batch, dec))
    assert abs(blind - trained) > 0


@pytest.mark.parametrize("mode", ["causal", "parallel"])
def test_rrg_gradients_match_finite_differences(mode):
    dec = _decoder(vocab_size=30, max_len=40)
    secs = [[20 + k, 21 + k] for k in range(8)]
    d = (build_causal_decoder_input(secs, seed=1) if mode == "causal"
         else build_parallel_decoder_input(secs, 2, seed=1))

    class Wrap(nn.Module):
        def __init__(self):
            super().__init__()
            self.dec = dec
            self.vision = nn.Parameter(torch.randn(1, 5, 12, generator=torch.Generator().manual_seed(0)))

    errs = gradient_errors(Wrap(), lambda m, dt: rrg_loss(m.vision, d, m.dec))
    assert max(errs) < 1e-3


# --- masks --------------------------------------------------------------------------


def test_ratio_zero_masks_nothing():
    for style in MASK_STYLES:
        assert not sample_mask(MaskSpec(0.0, style, 1, (4, 4, 4))).any()


def test_default_ratio_masks_48_of_64():
    for style in MASK_STYLES:
        assert int(sample_mask(MaskSpec(0.75, style, 2, (4, 4, 4))).sum()) == 48


def test_mask_is_seeded_and_validated():
    spec = MaskSpec(0.6, "random", 9, (3, 4, 5))
    assert np.array_equal(sample_mask(spec), sample_mask(spec))
    with pytest.raises(ArgumentError):
        sample_mask(MaskSpec(1.2, "random", 0, (4, 4, 4)))
    with pytest.raises(ArgumentError):
        sample_mask(MaskSpec(0.5, "stripes", 0, (4, 4, 4)))


grids = st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6))


@given(st.floats(0, 1), grids, st.sampled_from(MASK_STYLES), st.integers(0, 2**31 - 1))
def test_mask_count_contract(ratio, grid, style, seed):
    m = sample_mask(MaskSpec(ratio, style, seed, grid))
    total = int(np.prod(grid))
    assert m.shape == grid
    assert int(m.sum()) == masked_count(ratio, total) == int(math.floor(ratio * total + 0.5))


@given(st.floats(0.01, 1), grids, st.integers(0, 2**31 - 1))
def test_block_masks_are_connected(ratio, grid, seed):
    m = sample_mask(MaskSpec(ratio, "block", seed, grid))
    if m.any():
        assert flood_fill_components(m) == 1
    kept = ~sample_mask(MaskSpec(ratio, "inverse-block", seed, grid))
    if kept.any():
        assert flood_fill_components(kept) == 1


# --- masked autoencoding ------------------------------------------------------------


def _mae_models(dim=16):
    torch.manual_seed(0)
    enc = VisionEncoder(VisionEncoderConfig(patch_size=4, embed_dim=dim, depth=1, heads=2, input_size=(16, 16, 16),
                                            pool=PoolingSpec.make("avg")))
    dec = MAEDecoder(dim, 12, 1, 2, 4)
    return enc, dec


class Capture(nn.Module):
    def __init__(self, inner):
        super().__init__()
        self.inner = inner
        self.out = None

    def forward(self, *args):
        self.out = self.inner(*args)
        return self.out


def test_mae_matches_per_voxel_oracle():
    enc, dec = _mae_models()
    cap = Capture(dec)
    vol = torch.rand(2, 16, 16, 16, generator=torch.Generator().manual_seed(1)) * 2 - 1
    mask = torch.from_numpy(sample_mask(MaskSpec(0.75, "random", 3, (4, 4, 4))))
    loss = float(mae_loss(vol, mask, enc, cap).detach())
    target = patchify_batch(vol, 4)
    flat = mask.reshape(-1)
    oracle = masked_mse_loop(cap.out.detach().double(), target.double(), [flat.tolist()] * 2)
    assert loss == pytest.approx(oracle, rel=1e-5)


def test_mae_ignores_unmasked_targets():
    enc, dec = _mae_models()
    vol = torch.rand(1, 16, 16, 16, generator=torch.Generator().manual_seed(1))
    mask = torch.from_numpy(sample_mask(MaskSpec(0.5, "block", 3, (4, 4, 4))))
    target = patchify_batch(vol, 4).clone()
    ref = mae_loss(vol, mask, enc, dec, target=target)
    visible = int(torch.nonzero(~mask.reshape(-1))[0])
    target[0, visible, 5] += 10.0
    assert torch.equal(mae_loss(vol, mask, enc, dec, target=target), ref)


def test_exact_decoder_gives_zero():
    enc, _ = _mae_models()
    vol = torch.rand(2, 16, 16, 16, generator=torch.Generator().manual_seed(1))
    patches = patchify_batch(vol, 4)

    class Oracle(nn.Module):
        def forward(self, visible, visible_index, grid):
            return patches

    mask = torch.from_numpy(sample_mask(MaskSpec(0.75, "random", 0, (4, 4, 4))))
    assert float(mae_loss(vol, mask, enc, Oracle())) == 0.0


def test_mae_rejects_degenerate_masks():
    enc, dec = _mae_models()
    vol = torch.zeros(1, 16, 16, 16)
    with pytest.raises(ArgumentError):
        mae_loss(vol, torch.zeros(4, 4, 4, dtype=torch.bool), enc, dec)
    with pytest.raises(ArgumentError):
        mae_loss(vol, torch.ones(4, 4, 4, dtype=torch.bool), enc, dec)
    with pytest.raises(ArgumentError):
        mae_loss(vol, torch.zeros(2, 2, 2, dtype=torch.bool), enc, dec)


def test_patch_normalized_target():
    p = torch.randn(2, 3, 8)
    t = reconstruction_target(p, "patch-normalized")
    assert torch.allclose(t.mean(-1), torch.zeros(2, 3), atol=1e-6)
    assert torch.allclose(t.std(-1, unbiased=False), torch.ones(2, 3), atol=1e-3)
    assert reconstruction_target(p, "raw") is p
    with pytest.raises(ArgumentError):
        reconstruction_target(p, "whitened")


def test_mae_gradients_match_finite_differences():
    enc, dec = _mae_models(dim=12)

    class Wrap(nn.Module):
        def __init__(self):
            super().__init__()
            self.enc, self.dec = enc, dec

    vol = torch.rand(1, 16, 16, 16, generator=torch.Generator().manual_seed(1))
    mask = torch.from_numpy(sample_mask(MaskSpec(0.75, "random", 0, (4, 4, 4))))
    errs = gradient_errors(Wrap(), lambda m, dt: mae_loss(vol.to(dt), mask, m.enc, m.dec))
    assert max(errs) < 1e-3


# --- combination --------------------------------------------------------------------


def test_vision_only_step():
    b = combine_losses({"mae": torch.tensor(0.5)}, 0.3, 1.0, "vision_only")
    assert float(b.total) == 0.5
    assert b.clip_loss is None and b.rrg_loss is None and b.branch == "vision_only"


def test_vl_step_total_and_recompute():
    b = combine_losses({"clip": torch.tensor(2.0), "rrg": torch.tensor(4.0)}, 0.3, 1.0, "vl")
    assert float(b.total) == pytest.approx(2.0 + 0.3 * 4.0)
    assert torch.equal(b.recompute_total(), b.total)
    assert b.as_floats() == {"total": float(b.total), "clip_loss": 2.0, "rrg_loss": 4.0}


@given(st.floats(0, 100), st.floats(0, 100))
def test_single_nonzero_weight_gives_that_component(clip, rrg):
    c, r = torch.tensor(clip), torch.tensor(rrg)
    assert torch.equal(combine_losses({"clip": c, "rrg": r}, 0.0, 0.0, "vl").total, c)
    assert torch.equal(combine_losses({"mae": r}, 0.0, 1.0, "vision_only").total, r)


def test_inconsistent_parts_raise():
    one = torch.tensor(1.0)
    with pytest.raises(StateError):
        combine_losses({"mae": one}, 0.3, 1.0, "vl")
    with pytest.raises(StateError):
        combine_losses({"clip": one, "mae": one}, 0.3, 1.0, "vision_only")
    with pytest.raises(StateError):
        combine_losses({"clip": one}, 0.3, 1.0, "warmup")
    with pytest.raises(ArgumentError):
        combine_losses({"clip": one}, -0.1, 1.0, "vl")
