"""Self/cross attention, shifted-window attention, deformable attention."""

import pytest
import torch
import torch.nn as nn

from scenefusion.attention import (AttentionConfig, DeformableAttention,
                                   DeformableSpec, MultiHeadCrossAttention,
                                   MultiHeadSelfAttention, WindowAttention,
                                   WindowSpec, sinusoidal_encoding)
from scenefusion.geometry import bilinear_sample
from scenefusion.selfcheck import naive_mca, naive_msa


def zero_biases(module: nn.Module) -> None:
    with torch.no_grad():
        for name, p in module.named_parameters():
            if name.endswith("bias"):
                p.zero_()


class TestAttentionConfig:
    def test_head_dim(self):
        assert AttentionConfig(32, 4).head_dim == 8

    def test_indivisible_rejected(self):
        with pytest.raises(ValueError):
            AttentionConfig(30, 4)


class TestWindowSpec:
    def test_shifted_constructor(self):
        spec = WindowSpec.shifted(6)
        assert spec.shift == (3, 3)

    def test_shift_bounds(self):
        with pytest.raises(ValueError):
            WindowSpec(4, (4, 0))


class TestMultiHeadSelfAttention:
    def test_single_token_is_wo_wv(self):
        # softmax over one element is exactly 1, so out = W_O (W_V x)
        msa = MultiHeadSelfAttention(AttentionConfig(8, 2)).double()
        zero_biases(msa)
        x = torch.randn(1, 8, dtype=torch.float64)
        want = msa.out_proj(msa.v_proj(x))
        assert float((msa(x) - want).abs().max()) < 1e-12

    def test_permutation_equivariance(self):
        gen = torch.Generator().manual_seed(0)
        msa = MultiHeadSelfAttention(AttentionConfig(8, 2)).double()
        x = torch.randn(6, 8, generator=gen, dtype=torch.float64)
        perm = torch.randperm(6, generator=gen)
        assert float((msa(x[perm]) - msa(x)[perm]).abs().max()) < 1e-10

    def test_matches_naive_oracle(self):
        gen = torch.Generator().manual_seed(1)
        msa = MultiHeadSelfAttention(AttentionConfig(8, 2)).double()
        x = torch.randn(6, 8, generator=gen, dtype=torch.float64)
        assert float((msa(x) - naive_msa(x, msa)).abs().max()) < 1e-10

    def test_masked_rows_zeroed_and_excluded(self):
        gen = torch.Generator().manual_seed(2)
        msa = MultiHeadSelfAttention(AttentionConfig(8, 2)).double()
        x = torch.randn(5, 8, generator=gen, dtype=torch.float64)
        mask = torch.tensor([True, True, False, True, False])
        out = msa(x, mask)
        assert float(out[~mask].abs().max()) == 0.0
        # equals plain attention over the valid subset
        sub = msa(x[mask])
        assert float((out[mask] - sub).abs().max()) < 1e-10

    def test_all_masked_raises(self):
        msa = MultiHeadSelfAttention(AttentionConfig(8, 2)).double()
        x = torch.randn(3, 8, dtype=torch.float64)
        with pytest.raises(ValueError):
            msa(x, torch.zeros(3, dtype=torch.bool))

    def test_empty_sequence_raises(self):
        msa = MultiHeadSelfAttention(AttentionConfig(8, 2)).double()
        with pytest.raises(ValueError):
            msa(torch.zeros(0, 8, dtype=torch.float64))

    def test_softmax_rows_sum_to_one(self):
        gen = torch.Generator().manual_seed(3)
        msa = MultiHeadSelfAttention(AttentionConfig(8, 2)).double()
        msa.capture_weights = True
        x = torch.randn(7, 8, generator=gen, dtype=torch.float64)
        msa(x)
        sums = msa.last_weights.sum(dim=-1)
        assert float((sums - 1).abs().max()) < 1e-6


class TestMultiHeadCrossAttention:
    def test_single_key_ignores_query_content(self):
        mca = MultiHeadCrossAttention(AttentionConfig(8, 2)).double()
        zero_biases(mca)
        kv = torch.randn(1, 8, dtype=torch.float64)
        q = torch.randn(4, 8, dtype=torch.float64)
        want = mca.out_proj(mca.v_proj(kv)).expand(4, 8)
        assert float((mca(q, kv) - want).abs().max()) < 1e-12

    def test_duplicating_keys_is_invariant(self):
        gen = torch.Generator().manual_seed(4)
        mca = MultiHeadCrossAttention(AttentionConfig(8, 2)).double()
        q = torch.randn(4, 8, generator=gen, dtype=torch.float64)
        kv = torch.randn(3, 8, generator=gen, dtype=torch.float64)
        doubled = torch.cat([kv, kv])
        assert float((mca(q, kv) - mca(q, doubled)).abs().max()) < 1e-10

    def test_matches_naive_oracle(self):
        gen = torch.Generator().manual_seed(5)
        mca = MultiHeadCrossAttention(AttentionConfig(8, 2)).double()
        q = torch.randn(4, 8, generator=gen, dtype=torch.float64)
        kv = torch.randn(3, 8, generator=gen, dtype=torch.float64)
        assert float((mca(q, kv) - naive_mca(q, kv, mca)).abs().max()) < 1e-10

    def test_empty_keys_raise(self):
        mca = MultiHeadCrossAttention(AttentionConfig(8, 2)).double()
        with pytest.raises(ValueError):
            mca(torch.randn(2, 8, dtype=torch.float64),
                torch.zeros(0, 8, dtype=torch.float64))

    def test_underflowed_weight_means_zero_influence(self):
        # keys whose logits underflow the softmax to exactly 0 can be removed
        # without changing the output at all
        cfg = AttentionConfig(4, 1)
        mca = MultiHeadCrossAttention(cfg).double()
        with torch.no_grad():
            for proj in (mca.q_proj, mca.k_proj, mca.v_proj, mca.out_proj):
                proj.weight.copy_(torch.eye(4, dtype=torch.float64))
                proj.bias.zero_()
        q = torch.tensor([[30.0, 0.0, 0.0, 0.0]], dtype=torch.float64)
        kv = torch.tensor([[30.0, 0.0, 0.0, 0.0],
                           [-30.0, 1.0, 2.0, 3.0]], dtype=torch.float64)
        mca.capture_weights = True
        full = mca(q, kv)
        assert float(mca.last_weights[0, 0, 1]) == 0.0
        assert torch.equal(full, mca(q, kv[:1]))


class TestWindowAttention:
    def test_single_window_equals_msa(self):
        gen = torch.Generator().manual_seed(6)
        cfg = AttentionConfig(8, 2)
        attn = WindowAttention(cfg, WindowSpec(4), relative_bias=False).double()
        x = torch.randn(4, 4, 8, generator=gen, dtype=torch.float64)
        got = attn(x)
        # same projections run as plain msa over the 16-cell sequence
        msa = MultiHeadSelfAttention(cfg).double()
        msa.load_state_dict(attn.attn.state_dict())
        want = msa(x.reshape(16, 8)).reshape(4, 4, 8)
        assert float((got - want).abs().max()) < 1e-10

    def test_partition_reverse_roundtrip(self):
        gen = torch.Generator().manual_seed(7)
        x = torch.randn(12, 8, 5, generator=gen, dtype=torch.float64)
        win = WindowAttention.partition(x, 4)
        assert torch.equal(WindowAttention.reverse(win, 4, 12, 8), x)

    def test_shifted_mask_blocks_cyclic_neighbors(self):
        # after a (3, 3) shift of a 12x12 map, cells (0,0) and (11,11) share
        # a window but sit across the cyclic boundary; their weight must be 0
        gen = torch.Generator().manual_seed(8)
        attn = WindowAttention(AttentionConfig(8, 2), WindowSpec.shifted(6)).double()
        attn.capture_weights = True
        x = torch.randn(12, 12, 8, generator=gen, dtype=torch.float64)
        attn(x)
        w = attn.last_weights  # (4 windows, heads, 36, 36)
        # both cells roll into window (1, 1): (0,0) -> (9,9) = seq 21,
        # (11,11) -> (8,8) = seq 14 within the window starting at (6,6)
        win = w[2 * 1 + 1]
        assert float(win[:, 21, 14].max()) == 0.0
        assert float(win[:, 14, 21].max()) == 0.0

    def test_locality_unshifted(self):
        # zeroing any cell outside the window of cell c never changes c
        gen = torch.Generator().manual_seed(9)
        attn = WindowAttention(AttentionConfig(8, 2), WindowSpec(3)).double()
        x = torch.randn(6, 6, 8, generator=gen, dtype=torch.float64)
        base = attn(x)
        cell = (1, 2)  # inside window rows 0-2, cols 0-2
        for r in range(6):
            for c in range(6):
                if r < 3 and c < 3:
                    continue
                mod = x.clone()
                mod[r, c] = 0
                out = attn(mod)
                assert torch.equal(out[cell], base[cell]), (r, c)

    def test_padding_roundtrip_on_non_multiple(self):
        gen = torch.Generator().manual_seed(10)
        attn = WindowAttention(AttentionConfig(8, 2), WindowSpec(4)).double()
        x = torch.randn(6, 7, 8, generator=gen, dtype=torch.float64)
        assert attn(x).shape == (6, 7, 8)

    def test_window_too_large_raises(self):
        attn = WindowAttention(AttentionConfig(8, 2), WindowSpec(8)).double()
        with pytest.raises(ValueError):
            attn(torch.randn(6, 6, 8, dtype=torch.float64))


class TestDeformableAttention:
    def test_default_init_collapses_to_reference_sample(self):
        # zero offsets + uniform weights: all D samples coincide, so the
        # output is W_O (W_V bilinear(map, ref))
        gen = torch.Generator().manual_seed(11)
        deform = DeformableAttention(AttentionConfig(8, 2), DeformableSpec(4)).double()
        with torch.no_grad():
            deform.v_proj.bias.zero_()
            deform.out_proj.bias.zero_()
        vmap = torch.randn(6, 6, 8, generator=gen, dtype=torch.float64)
        q = torch.randn(8, generator=gen, dtype=torch.float64)
        ref = torch.tensor([2.3, 3.7], dtype=torch.float64)
        want = deform.out_proj(deform.v_proj(bilinear_sample(vmap, ref)))
        assert float((deform(q, ref, vmap) - want).abs().max()) < 1e-10

    def test_one_hot_weights_same_collapse(self):
        # forcing the weight head one-hot on slot 0 changes nothing while the
        # offsets stay zero (all samples are the same point)
        gen = torch.Generator().manual_seed(12)
        deform = DeformableAttention(AttentionConfig(8, 2), DeformableSpec(4)).double()
        vmap = torch.randn(6, 6, 8, generator=gen, dtype=torch.float64)
        q = torch.randn(8, generator=gen, dtype=torch.float64)
        ref = torch.tensor([1.2, 4.1], dtype=torch.float64)
        uniform = deform(q, ref, vmap)
        with torch.no_grad():
            deform.weight_head.bias.copy_(torch.tensor(
                [50.0, 0.0, 0.0, 0.0], dtype=torch.float64))
        assert float((deform(q, ref, vmap) - uniform).abs().max()) < 1e-10

    def test_matches_explicit_sample_oracle(self):
        from scenefusion.selfcheck import naive_deformable

        gen = torch.Generator().manual_seed(13)
        deform = DeformableAttention(AttentionConfig(8, 2), DeformableSpec(4)).double()
        with torch.no_grad():
            for p in deform.parameters():
                p.add_(0.3 * torch.randn(p.shape, generator=gen,
                                         dtype=torch.float64))
        vmap = torch.randn(6, 7, 8, generator=gen, dtype=torch.float64)
        q = torch.randn(8, generator=gen, dtype=torch.float64)
        ref = torch.rand(2, generator=gen, dtype=torch.float64) * 4 + 0.5
        got = deform(q, ref, vmap)
        want = naive_deformable(q, ref, vmap, deform)
        assert float((got - want).abs().max()) < 1e-10

    def test_weights_sum_to_one(self):
        gen = torch.Generator().manual_seed(14)
        deform = DeformableAttention(AttentionConfig(8, 2), DeformableSpec(5)).double()
        with torch.no_grad():
            deform.weight_head.weight.add_(
                torch.randn(5, 8, generator=gen, dtype=torch.float64))
        deform.capture_weights = True
        q = torch.randn(3, 8, generator=gen, dtype=torch.float64)
        ref = torch.rand(3, 2, generator=gen, dtype=torch.float64) * 4
        deform(q, ref, torch.randn(6, 6, 8, generator=gen, dtype=torch.float64))
        assert float((deform.last_weights.sum(dim=-1) - 1).abs().max()) < 1e-6

    def test_invalid_num_points(self):
        with pytest.raises(ValueError):
            DeformableSpec(0)


class TestSinusoidalEncoding:
    def test_shape_and_range(self):
        pos = torch.rand(5, 2, dtype=torch.float64) * 10
        enc = sinusoidal_encoding(pos, 16)
        assert enc.shape == (5, 16)
        assert float(enc.abs().max()) <= 1.0

    def test_distinct_positions_distinct_codes(self):
        pos = torch.tensor([[0.0, 0.0], [3.0, 7.0]], dtype=torch.float64)
        enc = sinusoidal_encoding(pos, 16)
        assert float((enc[0] - enc[1]).abs().max()) > 1e-3
