import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from diffrep.heads import (
    AttentionHead,
    AttentionHeadConfig,
    DifFormerConfig,
    HeadKind,
    ProbeProtocol,
    StoreSource,
    Tokenizer,
    TokenSequence,
    attention_head_forward,
    build_difformer,
    build_head,
    difformer_forward,
    evaluate_head,
    head_param_count,
    tokenize,
    topk_accuracy,
    train_probe,
)
from diffrep.heads import add_cls
from diffrep.unet import build_unet, count_parameters, toy_config


@pytest.fixture(scope="module")
def catalog():
    return build_unet(toy_config(), device="meta").catalog


def _head(c=16, classes=5, **kw):
    torch.manual_seed(0)
    return AttentionHead(AttentionHeadConfig(in_channels=c, num_classes=classes, d_model=32, num_heads=4, **kw))


# ---------------------------------------------------------------- tokenizer

def test_tokenize_pools_large_maps():
    tok = Tokenizer(8, d_model=16, pool_threshold=16)
    seq = tokenize(torch.randn(8, 32, 32), tok)
    assert tuple(seq.tokens.shape) == (256, 16)
    assert not seq.has_cls


def test_tokenize_small_map_not_pooled():
    tok = Tokenizer(8, d_model=16, pool_threshold=16)
    x = torch.randn(1, 8, 8, 8)
    assert tuple(tok(x).shape) == (1, 64, 16)
    # no pooling: the normalized map is the layer norm of the raw positions
    ref = torch.nn.functional.layer_norm(x.permute(0, 2, 3, 1), (8,), tok.norm.weight, tok.norm.bias)
    assert torch.equal(tok.normalized(x), ref)


def test_tokenize_row_major_order():
    tok = Tokenizer(4, project=False, pool_threshold=16)
    x = torch.randn(1, 4, 3, 3)
    tokens = tok(x)[0]
    norm = tok.normalized(x)[0]
    for i in range(3):
        for j in range(3):
            assert torch.equal(tokens[3 * i + j], norm[i, j])


def test_constant_channels_give_layernorm_bias():
    tok = Tokenizer(6, d_model=8)
    with torch.no_grad():
        tok.norm.bias.copy_(torch.arange(6.0))
        tok.norm.weight.fill_(2.5)
    x = torch.full((2, 6, 5, 5), 1.7)
    out = tok.normalized(x)
    assert torch.equal(out, tok.norm.bias.expand_as(out))


def test_tokenize_channel_mismatch():
    with pytest.raises(ValueError, match="channels"):
        Tokenizer(8)(torch.zeros(1, 4, 8, 8))


def test_token_count_formula_exhaustive_on_toy(catalog):
    # every single block and every pair, under a few thresholds
    ids = [e.block_id for e in catalog]
    chans = {b: catalog.entry(b).channels for b in ids}
    for thr in (4, 8, 16):
        for i, a in enumerate(ids):
            for b in ids[i:]:
                blocks = tuple(sorted({a, b}))
                torch.manual_seed(0)
                cfg = DifFormerConfig((10,), blocks, chans, 3, d_model=8, num_heads=2, num_layers=1,
                                      pool_threshold=thr)
                head = build_difformer(cfg)
                sides = {k: catalog.entry(k).spatial for k in blocks}
                want = sum(min(sides[k], thr) ** 2 for k in blocks)
                assert head.tokens_per_timestep(sides) == want
                got = sum(head.tokenizers[str(k)](torch.zeros(1, chans[k], sides[k], sides[k])).shape[1]
                          for k in blocks)
                assert got == want


def test_toy_token_count_8_and_16(catalog):
    # block 7 is 8x8, block 10 is 16x16
    assert catalog.entry(7).spatial == 8 and catalog.entry(10).spatial == 16
    chans = {b: catalog.entry(b).channels for b in (7, 10)}
    head = build_difformer(DifFormerConfig((5,), (7, 10), chans, 2, d_model=8, num_heads=2, pool_threshold=16))
    assert head.tokens_per_timestep({7: 8, 10: 16}) == 320


# ---------------------------------------------------------------- attention head

def test_attention_logit_shape():
    head = _head().eval()
    assert tuple(head(torch.randn(3, 16, 8, 8)).shape) == (3, 5)


def test_attention_permutation_invariance():
    head = _head().eval()
    x = torch.randn(2, 16, 6, 6)
    seq = add_cls(tokenize(x, head.tokenizer), head)
    perm = torch.randperm(36, generator=torch.Generator().manual_seed(1)) + 1
    shuffled = TokenSequence(torch.cat([seq.tokens[:, :1], seq.tokens[:, perm]], dim=1), True, seq.origin)
    with torch.no_grad():
        a = attention_head_forward(seq, head)
        b = attention_head_forward(shuffled, head)
        assert torch.allclose(a, b, atol=1e-6, rtol=0)
        assert torch.allclose(a, head(x), atol=1e-6, rtol=0)


def test_attention_zero_classifier_gives_bias():
    head = _head().eval()
    with torch.no_grad():
        head.classifier.weight.zero_()
        head.classifier.bias.copy_(torch.arange(5.0))
        out = head(torch.randn(4, 16, 8, 8))
    assert torch.equal(out, torch.arange(5.0).expand(4, 5))


def test_attention_requires_cls():
    head = _head()
    seq = tokenize(torch.randn(16, 4, 4), head.tokenizer)
    with pytest.raises(ValueError, match="CLS"):
        attention_head_forward(seq, head)


def test_attention_config_divisibility():
    with pytest.raises(ValueError, match="divisible"):
        AttentionHeadConfig(in_channels=8, num_classes=2, d_model=30, num_heads=4)


# ---------------------------------------------------------------- DifFormer

def test_difformer_fused_dim_paper_width():
    cfg = DifFormerConfig((50, 150, 300), (7,), {7: 64}, 10, d_model=1024, num_heads=16)
    assert cfg.fused_dim == 3072
    head = build_difformer(cfg)
    assert head.classifier.in_features == 3072


def test_difformer_concatenates_cls_per_timestep():
    cfg = DifFormerConfig((1, 2), (3, 4), {3: 8, 4: 16}, 4, d_model=16, num_heads=2, num_layers=1)
    head = build_difformer(cfg).eval()
    feats = {(t, b): torch.randn(2, cfg.block_channels[b], 4, 4) for t in (1, 2) for b in (3, 4)}
    with torch.no_grad():
        fused = head.fused(feats)
        assert tuple(fused.shape) == (2, 32)
        # the second half only depends on timestep 2
        tokens = torch.cat([head.tokenizers["3"](feats[(2, 3)]), head.tokenizers["4"](feats[(2, 4)])], dim=1)
        assert torch.equal(fused[:, 16:], head.transformer(tokens))


def test_difformer_degenerates_to_attention_head():
    head = _head(c=16, classes=5).eval()
    cfg = DifFormerConfig((150,), (7,), {7: 16}, 5, d_model=32, num_heads=4)
    fusion = build_difformer(cfg, seed=9).eval()
    fusion.load_from_attention_head(head)
    x = torch.randn(3, 16, 8, 8)
    with torch.no_grad():
        a = difformer_forward({(150, 7): x}, fusion)
        b = attention_head_forward(add_cls(tokenize(x, head.tokenizer), head), head)
    assert torch.allclose(a, b, atol=1e-6, rtol=0)


def test_difformer_missing_pair():
    cfg = DifFormerConfig((1, 2), (3,), {3: 8}, 2, d_model=8, num_heads=2)
    head = build_difformer(cfg)
    with pytest.raises(KeyError, match=r"\(2, 3\)"):
        head({(1, 3): torch.zeros(1, 8, 4, 4)})


def test_difformer_config_errors():
    with pytest.raises(ValueError, match="non-empty"):
        DifFormerConfig((), (1,), {1: 4}, 2)
    with pytest.raises(ValueError, match="channel"):
        DifFormerConfig((1,), (2,), {1: 4}, 2)


# ---------------------------------------------------------------- build_head / parameter counts

def test_linear_closed_form():
    for d, c in [(1, 1), (7, 3), (64 * 8 * 8, 10)]:
        head = build_head(HeadKind("linear"), (d,), c)
        assert count_parameters(head) == d * c + c


def test_linear_pool_reduces_input():
    head = build_head(HeadKind("linear", {"pool": 4}), (64, 8, 8), 10)
    assert count_parameters(head) == 64 * 16 * 10 + 10
    assert tuple(head(torch.randn(2, 64, 8, 8)).shape) == (2, 10)


def test_mlp_hand_sum():
    head = build_head(HeadKind("mlp", {"hidden": (300, 40)}), (50,), 7)
    assert count_parameters(head) == (50 * 300 + 300) + (300 * 40 + 40) + (40 * 7 + 7)


@pytest.mark.parametrize(
    "kind, shape",
    [
        (HeadKind("linear"), (4096,)),
        (HeadKind("linear", {"pool": 2}), (32, 8, 8)),
        (HeadKind("mlp", {"hidden": (64,)}), (32, 4, 4)),
        (HeadKind("cnn", {"channels": (24, 12)}), (32, 8, 8)),
        (HeadKind("attention", {"d_model": 32, "num_heads": 4}), (16, 8, 8)),
        (HeadKind("attention", {"project": False, "num_heads": 4, "num_layers": 1}), (16, 8, 8)),
    ],
)
def test_closed_form_matches_built(kind, shape):
    head = build_head(kind, shape, 6)
    assert count_parameters(head) == head_param_count(kind, shape, 6)


def test_build_head_deterministic():
    a = build_head(HeadKind("mlp", {"hidden": (8,)}), (5,), 3, seed=4)
    b = build_head(HeadKind("mlp", {"hidden": (8,)}), (5,), 3, seed=4)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)


def test_build_head_errors():
    with pytest.raises(ValueError, match="unknown head"):
        build_head(HeadKind("svm"), (4,), 2)
    with pytest.raises(ValueError, match="C x H x W"):
        build_head(HeadKind("cnn"), (4,), 2)
    with pytest.raises(ValueError, match="C x H x W"):
        build_head(HeadKind("attention"), (4,), 2)
    with pytest.raises(ValueError, match="pool"):
        build_head(HeadKind("linear", {"pool": 2}), (4,), 2)


# ---------------------------------------------------------------- probe protocol

def _separable(n_per=40, dim=6, seed=0):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(2 * n_per, dim, generator=g)
    y = torch.arange(2).repeat_interleave(n_per)
    x[:, 0] = torch.where(y == 1, 3.0, -3.0) + 0.3 * x[:, 0]  # margin along axis 0
    return x, y


def test_lr_trace_step_schedule():
    x, y = _separable()
    head = build_head(HeadKind("linear"), (6,), 2)
    rep = train_probe(head, StoreSource(x), y, ProbeProtocol(epochs=15, lr=0.01, batch_size=16))
    assert len(rep.lr_trace) == 15 and len(rep.epoch_losses) == 15
    assert math.isclose(rep.lr_trace[7], 0.1 * rep.lr_trace[0], rel_tol=1e-12)
    assert math.isclose(rep.lr_trace[14], 0.01 * rep.lr_trace[0], rel_tol=1e-12)
    assert rep.lr_trace[:7] == [0.01] * 7


def test_separable_linear_probe_perfect_and_loss_drops():
    x, y = _separable()
    # perceptron-style check that the data really is separable by construction
    w = torch.zeros(6)
    for _ in range(20):
        for xi, yi in zip(x, y):
            s = 1 if yi == 1 else -1
            if s * float(w @ xi) <= 0:
                w += s * xi
    assert all((float(w @ xi) > 0) == bool(yi) for xi, yi in zip(x, y))
    head = build_head(HeadKind("linear"), (6,), 2, seed=1)
    rep = train_probe(head, StoreSource(x), y, ProbeProtocol(epochs=28, lr=0.05, batch_size=16))
    assert rep.top1 == 1.0 and rep.train_top1 == 1.0
    assert rep.epoch_losses[-1] < 0.1 * rep.epoch_losses[0]


def test_zero_epochs_is_chance():
    g = torch.Generator().manual_seed(2)
    n, c = 800, 4
    x = torch.randn(n, 12, generator=g)
    y = torch.arange(c).repeat(n // c)
    head = build_head(HeadKind("linear"), (12,), c, seed=3)
    rep = train_probe(head, StoreSource(x), y, ProbeProtocol(epochs=0))
    assert rep.epoch_losses == []
    sd = math.sqrt(0.25 * 0.75 / n)
    assert abs(rep.top1 - 1 / c) <= 4 * sd


def test_probe_errors():
    x, y = _separable()
    head = build_head(HeadKind("linear"), (6,), 2)
    with pytest.raises(ValueError, match="feature count 80 does not match label count 79"):
        train_probe(head, StoreSource(x), y[:79])
    with pytest.raises(ValueError, match="live backbone"):
        train_probe(head, StoreSource(x), y, mode="finetune")
    with pytest.raises(ValueError, match="mode"):
        train_probe(head, StoreSource(x), y, mode="partial")


def test_probe_report_provenance():
    x, y = _separable()
    rep = train_probe(build_head(HeadKind("linear"), (6,), 2), StoreSource(x), y, ProbeProtocol(epochs=1), seed=5)
    cfg = rep.to_dict()["config"]
    assert cfg["protocol"]["epochs"] == 1 and cfg["seed"] == 5 and cfg["mode"] == "frozen"
    assert cfg["source"]["source"] == "store"


def test_probe_deterministic():
    x, y = _separable()
    reps = [train_probe(build_head(HeadKind("linear"), (6,), 2), StoreSource(x), y, ProbeProtocol(epochs=3), seed=1)
            for _ in range(2)]
    assert reps[0].epoch_losses == reps[1].epoch_losses


# ---------------------------------------------------------------- evaluation

def _scalar_topk(logits, labels, k):
    hits = 0
    for row, y in zip(logits.tolist(), labels.tolist()):
        order = sorted(range(len(row)), key=lambda c: (-row[c], c))
        hits += y in order[:k]
    return hits / len(labels)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 30), c=st.integers(1, 9), seed=st.integers(0, 10_000), ties=st.booleans())
def test_topk_matches_scalar_loop(n, c, seed, ties):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(n, c))
    if ties:
        logits = np.round(logits)  # many exact ties
    logits = torch.tensor(logits)
    labels = torch.tensor(rng.integers(0, c, size=n))
    acc = topk_accuracy(logits, labels)
    assert acc[1] == _scalar_topk(logits, labels, 1)
    assert acc[5] == _scalar_topk(logits, labels, 5)
    assert acc[5] >= acc[1]


def test_tie_goes_to_lowest_index():
    logits = torch.zeros(3, 4)
    acc = topk_accuracy(logits, torch.tensor([0, 1, 3]), ks=(1, 2))
    assert acc[1] == pytest.approx(1 / 3) and acc[2] == pytest.approx(2 / 3)


def test_memorizing_head_is_perfect():
    c = 7
    x = torch.eye(c).repeat(3, 1)
    y = torch.arange(c).repeat(3)
    head = build_head(HeadKind("linear"), (c,), c)
    with torch.no_grad():
        head.fc.weight.copy_(torch.eye(c))
        head.fc.bias.zero_()
    acc = evaluate_head(head, StoreSource(x), y)
    assert acc == {"top1": 1.0, "top5": 1.0}


def test_evaluate_mismatch():
    head = build_head(HeadKind("linear"), (3,), 2)
    with pytest.raises(ValueError, match="does not match"):
        evaluate_head(head, StoreSource(torch.zeros(4, 3)), torch.zeros(3))


def test_evaluate_is_batch_size_independent():
    g = torch.Generator().manual_seed(0)
    x = torch.randn(50, 5, generator=g)
    y = torch.randint(0, 9, (50,), generator=g)
    head = build_head(HeadKind("mlp", {"hidden": (16,)}), (5,), 9)
    assert evaluate_head(head, StoreSource(x), y, batch_size=7) == evaluate_head(head, StoreSource(x), y)
