import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from vlp3d.encoders import (
    POOL_SCHEMES,
    Pool,
    PoolingSpec,
    Rotary3D,
    TextEncoder,
    TextEncoderConfig,
    VisionEncoder,
    VisionEncoderConfig,
    batch_token_sequences,
    encode_image,
    encode_text,
    grid_coords,
    patchify_batch,
)
from vlp3d.errors import ArgumentError
from vlp3d.reportgen import BOS, EOS, PAD, TokenSequence, Vocab, tokenize
from vlp3d.volstore import Volume

from fdcheck import gradient_errors


def tiny_vision(**kw):
    base = dict(patch_size=4, embed_dim=24, depth=2, heads=2, input_size=(8, 8, 8),
                pool=PoolingSpec.make("learned-attention", heads=4))
    base.update(kw)
    torch.manual_seed(0)
    return VisionEncoder(VisionEncoderConfig(**base))


def tiny_text(vocab_size=40, **kw):
    base = dict(vocab_size=vocab_size, embed_dim=16, depth=2, heads=2, max_len=12,
                pool=PoolingSpec.make("learned-attention", heads=4))
    base.update(kw)
    torch.manual_seed(0)
    return TextEncoder(TextEncoderConfig(**base))


# --- configs -----------------------------------------------------------------------


def test_pooling_spec_fields_follow_scheme():
    assert PoolingSpec.make("avg") == PoolingSpec("avg", None, None)
    assert PoolingSpec.make("multi-learned-attention").query_count == 4
    assert PoolingSpec.make("learned-attention").heads == 12
    with pytest.raises(ArgumentError):
        PoolingSpec("avg", heads=12)
    with pytest.raises(ArgumentError):
        PoolingSpec("learned-attention", heads=None)
    with pytest.raises(ArgumentError):
        PoolingSpec("multi-learned-attention", heads=12, query_count=None)


def test_config_invariants():
    with pytest.raises(ArgumentError):
        VisionEncoderConfig(patch_size=8, input_size=(30, 32, 32))
    with pytest.raises(ArgumentError):
        VisionEncoderConfig(embed_dim=100, heads=6)
    with pytest.raises(ArgumentError):
        TextEncoderConfig(vocab_size=10, max_len=1)


# --- vision ------------------------------------------------------------------------


def test_variable_input_sizes_share_parameters():
    enc = tiny_vision(patch_size=16, embed_dim=16, depth=1, heads=2, input_size=(128, 128, 128),
                      pool=PoolingSpec.make("avg"))
    with torch.no_grad():
        for n in (128, 160):
            out = enc(torch.zeros(1, n, n, n))
            assert out.dense_tokens.shape == (1, (n // 16) ** 3, 16)


def test_ape_fixes_input_size():
    enc = tiny_vision(use_ape=True)
    enc(torch.zeros(1, 8, 8, 8))
    with pytest.raises(ArgumentError):
        enc(torch.zeros(1, 12, 8, 8))


def test_rotary_model_accepts_other_sizes():
    enc = tiny_vision()
    out = enc(torch.zeros(2, 12, 8, 16))
    assert out.dense_tokens.shape == (2, 3 * 2 * 4, 24)


def test_token_count_160_patch_8():
    assert patchify_batch(torch.zeros(1, 160, 160, 160), 8).shape[1] == 8000


def test_constant_parameters_give_equal_tokens():
    enc = tiny_vision(pool=PoolingSpec.make("avg"))
    with torch.no_grad():
        for p in enc.parameters():
            p.zero_()
        bias = torch.arange(24, dtype=torch.float32)
        enc.norm.bias.copy_(bias)
        out = enc(torch.randn(1, 8, 8, 8))
    assert torch.equal(out.dense_tokens[0], bias.expand(8, -1))
    assert torch.allclose(out.pooled[0], bias / bias.norm(), atol=1e-7)


def test_pooled_is_unit_norm_and_encode_image_unbatched():
    enc = tiny_vision()
    v = Volume(np.random.default_rng(0).normal(size=(8, 8, 8)), normalized=True)
    out = encode_image(v, enc)
    assert out.dense_tokens.shape == (8, 24)
    assert abs(float(out.pooled.detach().norm()) - 1) < 1e-5


def test_projection_sets_shared_width():
    enc = tiny_vision(proj_dim=10)
    assert enc(torch.zeros(1, 8, 8, 8)).pooled.shape == (1, 10)
    assert enc.dense_aligned(torch.zeros(1, 8, 8, 8)).shape == (1, 8, 10)


def test_rotary_preserves_norm_and_encodes_relative_offsets():
    rot = Rotary3D(12)
    x = torch.randn(1, 1, 5, 12)
    coords = torch.randint(0, 6, (5, 3))
    y = rot(x, coords)
    assert torch.allclose(y.norm(dim=-1), x.norm(dim=-1), atol=1e-5)
    q, k = torch.randn(1, 1, 1, 12), torch.randn(1, 1, 1, 12)
    a, b = torch.tensor([[1, 2, 3]]), torch.tensor([[4, 0, 2]])
    shift = torch.tensor([[2, 5, 1]])
    dot = (rot(q, a) * rot(k, b)).sum()
    dot_shifted = (rot(q, a + shift) * rot(k, b + shift)).sum()
    assert torch.allclose(dot, dot_shifted, atol=1e-5)


def test_grid_coords_row_major():
    c = grid_coords((2, 3, 4))
    assert c.shape == (24, 3)
    assert c[1].tolist() == [0, 0, 1] and c[4].tolist() == [0, 1, 0] and c[12].tolist() == [1, 0, 0]


# --- text --------------------------------------------------------------------------


def test_trailing_pad_does_not_change_embedding():
    enc = tiny_text()
    a = enc(torch.tensor([[BOS, 7, 8, EOS]]))
    b = enc(torch.tensor([[BOS, 7, 8, EOS, PAD, PAD, PAD]]))
    assert torch.equal(a.pooled, b.pooled)


def test_pad_position_ids_are_ignored():
    enc = tiny_text()
    ids, mask = batch_token_sequences([[BOS, 5, EOS], [BOS, 5, 6, 7, EOS]])
    ref = enc(ids, mask).pooled
    ids2 = ids.clone()
    ids2[0, 3:] = 9
    assert torch.equal(enc(ids2, mask).pooled, ref)


def test_bos_eos_only_is_finite_and_unit():
    enc = tiny_text()
    out = encode_text(TokenSequence([BOS, EOS]), enc)
    assert torch.isfinite(out.pooled).all()
    assert abs(float(out.pooled.detach().norm()) - 1) < 1e-5


def test_over_length_text_raises():
    with pytest.raises(ArgumentError):
        tiny_text()(torch.ones(1, 13, dtype=torch.long))


@given(st.integers(0, 1000))
def test_random_text_pooled_norm(seed):
    g = torch.Generator().manual_seed(seed)
    enc = tiny_text()
    ids = torch.randint(5, 40, (3, 10), generator=g)
    assert torch.allclose(enc(ids).pooled.norm(dim=-1), torch.ones(3), atol=1e-5)


def test_real_vocab_tokens_encode():
    vocab = Vocab.build()
    enc = tiny_text(vocab_size=len(vocab), max_len=32)
    out = encode_text(tokenize("Normal esophagus.", vocab, 32), enc)
    assert out.dense_tokens.shape == (5, 16)


# --- pooling -----------------------------------------------------------------------


@pytest.mark.parametrize("scheme", POOL_SCHEMES)
def test_single_token_pools_to_itself(scheme):
    torch.manual_seed(0)
    pool = Pool(12, PoolingSpec.make(scheme, heads=3, query_count=2))
    x = torch.randn(2, 1, 12)
    assert torch.allclose(pool(x), x[:, 0], atol=1e-6)


@pytest.mark.parametrize("scheme", POOL_SCHEMES)
def test_pooling_permutation_invariance(scheme):
    torch.manual_seed(0)
    pool = Pool(12, PoolingSpec.make(scheme, heads=3, query_count=2))
    x = torch.randn(2, 7, 12)
    perm = torch.randperm(7)
    a, b = pool(x), pool(x[:, perm])
    if scheme in ("avg", "max"):
        x64 = x.double()
        # exact for max; avg sums in a different order, so compare the float64 means
        if scheme == "max":
            assert torch.equal(a, b)
        else:
            assert torch.allclose(a.double(), x64.mean(1), atol=1e-6)
            assert torch.allclose(b.double(), x64.mean(1), atol=1e-6)
    else:
        assert torch.allclose(a, b, atol=1e-6)


def test_avg_pool_bitwise_permutation_invariance_on_dyadic_values():
    pool = Pool(4, PoolingSpec.make("avg"))
    x = torch.randint(-8, 8, (3, 8, 4)).float() / 4
    perm = torch.randperm(8)
    assert torch.equal(pool(x), pool(x[:, perm]))


def test_average_attention_equals_learned_attention_on_equal_tokens():
    torch.manual_seed(0)
    avg_att = Pool(12, PoolingSpec.make("average-attention", heads=3))
    learned = Pool(12, PoolingSpec.make("learned-attention", heads=3))
    learned.load_state_dict({**avg_att.state_dict(), "query": learned.query.data}, strict=True)
    token = torch.randn(12)
    with torch.no_grad():
        learned.query.copy_(token[None])
    x = token.expand(2, 5, 12)
    assert torch.allclose(avg_att(x), learned(x), atol=1e-6)


def test_masked_pooling_ignores_masked_tokens_and_rejects_empty():
    torch.manual_seed(0)
    for scheme in POOL_SCHEMES:
        pool = Pool(12, PoolingSpec.make(scheme, heads=3, query_count=2))
        x = torch.randn(1, 4, 12)
        mask = torch.tensor([[True, True, False, False]])
        y = x.clone()
        y[:, 2:] = 100.0
        assert torch.allclose(pool(x, mask), pool(y, mask), atol=1e-6)
        with pytest.raises(ArgumentError):
            pool(x, torch.zeros(1, 4, dtype=torch.bool))


# --- gradients ---------------------------------------------------------------------


@pytest.mark.parametrize("scheme", POOL_SCHEMES)
def test_vision_gradients_match_finite_differences(scheme):
    enc = tiny_vision(embed_dim=12, heads=2, depth=2, pool=PoolingSpec.make(scheme, heads=3, query_count=2))
    x = torch.randn(2, 8, 8, 8, generator=torch.Generator().manual_seed(1))
    r = torch.randn(2, 12, generator=torch.Generator().manual_seed(2))
    errs = gradient_errors(enc, lambda m, dt: (m(x.to(dt)).pooled * r.to(dt)).sum())
    assert max(errs) < 1e-3


def test_text_gradients_match_finite_differences():
    enc = tiny_text(pool=PoolingSpec.make("multi-learned-attention", heads=4, query_count=2))
    ids = torch.tensor([[BOS, 6, 7, 8, EOS], [BOS, 9, EOS, PAD, PAD]])
    r = torch.randn(2, 16, generator=torch.Generator().manual_seed(2))
    errs = gradient_errors(enc, lambda m, dt: (m(ids).pooled * r.to(dt)).sum())
    assert max(errs) < 1e-3


def test_vision_gradients_float64_tight():
    enc = tiny_vision(embed_dim=12, heads=2, depth=1, pool=PoolingSpec.make("learned-attention", heads=3)).double()
    x = torch.randn(1, 8, 8, 8, generator=torch.Generator().manual_seed(1))
    r = torch.randn(1, 12, generator=torch.Generator().manual_seed(2))
    errs = gradient_errors(enc, lambda m, dt: (m(x.to(dt)).pooled * r.to(dt)).sum(), eps=1e-5)
    assert max(errs) < 1e-6
