import numpy as np
import pytest
import torch

from diffrec.nn import AttentionPattern, pattern_matrix
from diffrec.predictor import (
    MaskPredictor,
    PredictorConfig,
    SequenceLayout,
    VocabLayout,
    assemble_input,
    encode_histories,
    load_predictor,
    save_predictor,
)


def make(n_heads=3, k=4, max_items=3, **cfg):
    vocab, layout = VocabLayout(n_heads, k), SequenceLayout(max_items, n_heads)
    config = PredictorConfig(**{"layers": 2, "d_model": 16, "heads": 2, **cfg})
    return MaskPredictor(vocab, layout, config).eval()


def random_tokens(model, gen, n, mask_prob=0.3):
    """Valid non-pad sequences: each position holds a code of its own head or [MASK]."""
    vocab, layout = model.vocab, model.layout
    offset = torch.from_numpy(layout.offset_of)
    codes = torch.randint(0, vocab.codebook_size, (n, layout.length), generator=gen)
    tokens = offset * vocab.codebook_size + codes
    masked = torch.rand(n, layout.length, generator=gen) < mask_prob
    return tokens.masked_fill(masked, vocab.mask_id)


# ---------------------------------------------------------------- layout


def test_vocab_layout_constants():
    v = VocabLayout(4, 256)
    assert (v.mask_id, v.pad_id, v.size) == (1024, 1025, 1026)


def test_vocab_round_trip_exhaustive():
    v = VocabLayout(3, 5)
    seen = set()
    for m in range(3):
        for c in range(5):
            t = v.token(m, c)
            assert (v.head_of(t), v.code_of(t)) == (m, c)
            seen.add(t)
    assert seen == set(range(v.mask_id))
    for special in (v.mask_id, v.pad_id):
        with pytest.raises(ValueError):
            v.head_of(special)
    with pytest.raises(ValueError):
        v.token(0, 5)


def test_sequence_layout():
    layout = SequenceLayout(2, 3)
    assert layout.length == 9
    assert layout.item_of.tolist() == [0, 0, 0, 1, 1, 1, 2, 2, 2]
    assert layout.offset_of.tolist() == [0, 1, 2] * 3
    assert list(range(9))[layout.block] == [6, 7, 8]


def test_assemble_empty_history():
    v, layout = VocabLayout(2, 4), SequenceLayout(3, 2)
    tokens = assemble_input([], [v.mask_id] * 2, v, layout)
    assert tokens == [v.pad_id] * 6 + [v.mask_id] * 2


def test_assemble_offsets_codes():
    v, layout = VocabLayout(2, 4), SequenceLayout(2, 2)
    tokens = assemble_input([(3, 1)], [v.mask_id] * 2, v, layout)
    assert tokens == [v.pad_id, v.pad_id, 3, 5, v.mask_id, v.mask_id]


def test_assemble_errors():
    v, layout = VocabLayout(2, 4), SequenceLayout(1, 2)
    with pytest.raises(ValueError, match="out of range"):
        assemble_input([(4, 0)], [v.mask_id] * 2, v, layout)
    with pytest.raises(ValueError, match="exceeds"):
        assemble_input([(0, 0), (1, 1)], [v.mask_id] * 2, v, layout)


def test_encode_histories_matches_assemble():
    v, layout = VocabLayout(3, 5), SequenceLayout(4, 3)
    rng = np.random.default_rng(0)
    hists = [[tuple(rng.integers(0, 5, 3)) for _ in range(n)] for n in range(5)]
    got = encode_histories(hists, v, layout)
    for row, h in zip(got, hists):
        assert row.tolist() == assemble_input(h, [v.mask_id] * 3, v, layout)


# ---------------------------------------------------------------- outputs


def test_block_distributions_normalised_and_head_restricted():
    model = make()
    gen = torch.Generator().manual_seed(0)
    tokens = random_tokens(model, gen, 8)
    with torch.no_grad():
        probs = torch.softmax(model(tokens), dim=-1)
    k, m = model.vocab.codebook_size, model.vocab.n_heads
    offset = model.layout.offset_of
    for pos in range(model.layout.length):
        own = slice(offset[pos] * k, offset[pos] * k + k)
        assert torch.allclose(probs[:, pos, own].sum(-1), torch.ones(8, dtype=probs.dtype), atol=1e-6)
        outside = probs[:, pos].clone()
        outside[:, own] = 0
        assert torch.count_nonzero(outside) == 0
    # offset-2 positions put no mass on heads 0, 1 or the specials
    pos2 = [p for p in range(model.layout.length) if offset[p] == 2]
    assert torch.count_nonzero(probs[:, pos2, : 2 * k]) == 0
    assert torch.count_nonzero(probs[:, pos2, m * k :]) == 0


def test_block_log_probs_shape_and_values():
    model = make()
    tokens = random_tokens(model, torch.Generator().manual_seed(1), 5)
    with torch.no_grad():
        lp = model.block_log_probs(tokens)
        full = torch.log_softmax(model(tokens), -1)
    assert lp.shape == (5, 3, 4)
    for j, pos in enumerate(range(model.layout.length - 3, model.layout.length)):
        torch.testing.assert_close(lp[:, j], full[:, pos, j * 4 : j * 4 + 4])


def test_head_log_probs_match_full_vocab():
    model = make()
    tokens = random_tokens(model, torch.Generator().manual_seed(2), 6)
    k, offset = model.vocab.codebook_size, model.layout.offset_of
    with torch.no_grad():
        local = model.head_log_probs(tokens)
        full = torch.log_softmax(model(tokens), -1)
    for pos in range(model.layout.length):
        torch.testing.assert_close(local[:, pos], full[:, pos, offset[pos] * k : offset[pos] * k + k])


def test_invalid_tokens_rejected():
    model = make()
    with pytest.raises(ValueError, match="length"):
        model(torch.zeros(1, 5, dtype=torch.long))
    bad = torch.full((1, model.layout.length), model.vocab.size)
    with pytest.raises(ValueError, match="range"):
        model(bad)


def test_bidirectional_last_token_reaches_first_position():
    model = make(attention="bidirectional")
    tokens = random_tokens(model, torch.Generator().manual_seed(2), 1, mask_prob=0.0)
    other = tokens.clone()
    other[0, -1] = model.vocab.mask_id
    with torch.no_grad():
        assert not torch.equal(model(tokens)[0, 0], model(other)[0, 0])


def reachable(pattern, model):
    allow = pattern_matrix(pattern, torch.from_numpy(model.layout.item_of)).to(torch.int64)
    step = ((allow + torch.eye(len(allow), dtype=torch.int64)) > 0).to(torch.int64)
    reach = torch.eye(len(allow), dtype=torch.int64)
    for _ in range(model.config.layers):
        reach = ((reach @ step) > 0).to(torch.int64)
    return reach.bool()


@pytest.mark.parametrize("layers", [1, 2])
@pytest.mark.parametrize("pattern", ["causal", "inter-item-causal", "intra-item-causal"])
def test_zero_influence_through_predict(pattern, layers):
    model = make(attention=pattern, layers=layers, seed=layers)
    reach = reachable(pattern, model)
    gen = torch.Generator().manual_seed(3)
    length = model.layout.length
    for _ in range(20):
        tokens = random_tokens(model, gen, 1)
        j = int(torch.randint(0, length, (1,), generator=gen))
        other = tokens.clone()
        if tokens[0, j] == model.vocab.mask_id:
            other[0, j] = int(model.layout.offset_of[j]) * model.vocab.codebook_size
        else:
            other[0, j] = model.vocab.mask_id
        with torch.no_grad():
            a, b = model(tokens)[0], model(other)[0]
        blind = ~reach[:, j]
        assert torch.equal(a[blind], b[blind])
        if pattern == "causal":
            assert blind.tolist() == [i < j for i in range(length)]


def test_one_layer_intra_item_matches_direct_rule():
    model = make(attention="intra-item-causal", layers=1)
    item_of = model.layout.item_of
    reach = reachable("intra-item-causal", model)
    for i in range(model.layout.length):
        for j in range(model.layout.length):
            assert bool(reach[i, j]) == (item_of[i] != item_of[j] or j <= i)


def test_pad_content_never_matters():
    model = make()
    gen = torch.Generator().manual_seed(4)
    tokens = random_tokens(model, gen, 4)
    tokens[:, :3] = model.vocab.pad_id  # one padded history slot
    with torch.no_grad():
        base = model(tokens)
        model.token_emb.weight[model.vocab.pad_id] += torch.randn(model.config.d_model, generator=gen)
        model.pos_emb.weight[:3] += torch.randn(3, model.config.d_model, generator=gen)
        moved = model(tokens)
    assert torch.equal(base[:, 3:], moved[:, 3:])


def test_predict_is_deterministic_and_seeded():
    a, b = make(seed=7), make(seed=7)
    tokens = random_tokens(a, torch.Generator().manual_seed(5), 3)
    with torch.no_grad():
        assert torch.equal(a(tokens), a(tokens))
        assert torch.equal(a(tokens), b(tokens))
        assert not torch.equal(a(tokens), make(seed=8)(tokens))


def test_config_validation():
    with pytest.raises(ValueError):
        PredictorConfig(layers=0)
    with pytest.raises(ValueError):
        PredictorConfig(attention="sideways")
    with pytest.raises(ValueError, match="heads"):
        MaskPredictor(VocabLayout(2, 3), SequenceLayout(2, 3), PredictorConfig())


def test_checkpoint_round_trip(tmp_path):
    model = make(attention="causal")
    save_predictor(tmp_path / "m.ckpt", model, {"note": 1})
    loaded, meta = load_predictor(tmp_path / "m.ckpt")
    assert meta["note"] == 1 and loaded.pattern is AttentionPattern.CAUSAL
    tokens = random_tokens(model, torch.Generator().manual_seed(6), 2)
    with torch.no_grad():
        assert torch.equal(loaded(tokens), model(tokens))
