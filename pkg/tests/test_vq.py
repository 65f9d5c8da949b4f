import json
from dataclasses import replace

import pytest
import torch

from lyric2melody.checkpoint import CheckpointError
from lyric2melody.neural import gradcheck
from lyric2melody.remi import PAD, tokenize_sentence
from lyric2melody.training import TrainConfig
from lyric2melody.vq import (
    GroupedQuantizer,
    VQConfig,
    VQTrainer,
    VQVAE,
    collate_vq,
    extract_features,
    load_vqvae,
    nearest_codes,
    prepare_vq_examples,
    read_features,
    straight_through_surrogate,
    write_features,
)
from oracles import nearest_code
from oracles import brute_force_codes

TINY = VQConfig(layers=2, heads=2, d=16, d_ff=32, groups=4, codebook_size=32, budget=400, sentence_budget=200)


def test_config_invariants():
    assert VQConfig.paper().groups == 64 and VQConfig.paper().codebook_size == 2048
    assert VQConfig.paper().group_dim == 8
    with pytest.raises(ValueError):
        VQConfig(d=64, heads=2, groups=6)


def test_nearest_codes_match_exhaustive_scan():
    gen = torch.Generator().manual_seed(0)
    cfg = VQConfig(d=64, heads=2, groups=8, codebook_size=256)
    q = GroupedQuantizer(cfg).double()
    with torch.no_grad():
        q.codebook.copy_(torch.randn(256, 8, generator=gen, dtype=torch.float64))
    z = torch.randn(1000, 64, generator=gen, dtype=torch.float64)
    codes = q.codes(z)
    assert torch.equal(codes, torch.from_numpy(brute_force_codes(z.numpy(), q.codebook.detach().numpy(), 8)))
    book = q.codebook.detach().tolist()
    for i in range(50):
        for g in range(8):
            assert codes[i, g] == nearest_code(z[i, 8 * g : 8 * g + 8].tolist(), book)


def test_latent_on_codebook_is_exact():
    q = GroupedQuantizer(TINY)
    with torch.no_grad():
        q.codebook.copy_(torch.randn(32, 4, generator=torch.Generator().manual_seed(1)))
    codes = torch.tensor([[3, 7, 7, 31], [0, 1, 2, 3]])
    z = q.lookup(codes)
    out = q(z)
    assert torch.equal(out.codes, codes)
    assert out.codebook_loss.item() == 0 and torch.equal(out.quantized, z)


def test_quantization_idempotent():
    q = GroupedQuantizer(TINY)
    z = torch.randn(20, 16, generator=torch.Generator().manual_seed(2))
    q.initialize(z, torch.Generator().manual_seed(0))
    codes = q.codes(z)
    assert torch.equal(q.codes(q.lookup(codes)), codes)


def test_ties_go_to_lower_index():
    book = torch.tensor([[1.0], [1.0], [-1.0]])
    assert nearest_codes(torch.tensor([[0.5], [0.0]]), book).tolist() == [0, 0]


def test_straight_through_gradient():
    q = GroupedQuantizer(TINY).double()
    gen = torch.Generator().manual_seed(3)
    with torch.no_grad():
        q.codebook.copy_(torch.randn(32, 4, generator=gen, dtype=torch.float64))
    z = torch.randn(3, 16, generator=gen, dtype=torch.float64, requires_grad=True)
    probe = torch.randn(3, 16, generator=gen, dtype=torch.float64)
    out = q(z)
    (out.quantized * probe).sum().backward(retain_graph=True)
    assert torch.allclose(z.grad, probe)
    z.grad = None
    ((out.quantized * probe).sum() + 0.25 * out.commitment_loss).backward()
    e = q.lookup(out.codes).detach()
    assert torch.allclose(z.grad, probe + 0.25 * 2 * (z - e).detach() / z.numel())


@pytest.fixture(scope="module")
def vq_setup(small_corpus):
    model = VQVAE(TINY, seed=1).double()
    examples = prepare_vq_examples(small_corpus[:2], TINY)
    batch = collate_vq(examples)
    with torch.no_grad():
        z = model.encode(batch.sentences)
    model.quantizer.initialize(z + 0.3 * torch.randn(z.shape, generator=torch.Generator().manual_seed(0), dtype=z.dtype), torch.Generator().manual_seed(0))
    return model, batch


def test_autograd_equals_surrogate_gradient(vq_setup):
    model, batch = vq_setup
    model.zero_grad()
    model(batch).total.backward()
    real = {k: p.grad.clone() for k, p in model.named_parameters() if p.grad is not None}
    model.zero_grad()
    straight_through_surrogate(model, batch)().backward()
    for k, p in model.named_parameters():
        if k in real:
            assert torch.allclose(real[k], p.grad, atol=1e-12), k
    model.zero_grad()


def test_vqvae_gradcheck(vq_setup):
    model, batch = vq_setup
    report = gradcheck(straight_through_surrogate(model, batch), dict(model.named_parameters()), max_entries=8)
    assert report.passed, str(report)
    assert "quantizer.codebook" in report.errors and "encoder.embed.weight" in report.errors


def test_encoder_identical_sentences_and_gradcheck(vq_setup, small_corpus):
    model, _ = vq_setup
    tokens = torch.tensor([tokenize_sentence(small_corpus[0].sentences[0])] * 2)
    z = model.encode(tokens)
    assert z.shape == (2, TINY.d) and torch.equal(z[0], z[1])
    probe = torch.randn(2, TINY.d, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    report = gradcheck(lambda: (model.encode(tokens) * probe).sum(), dict(model.encoder.named_parameters()), max_entries=8)
    assert report.passed, str(report)


def test_beta_changes_only_commitment(small_corpus):
    examples = prepare_vq_examples(small_corpus[:2], TINY)
    batch = collate_vq(examples)
    a = VQVAE(TINY, seed=0)
    b = VQVAE(replace(TINY, beta=0.0), seed=0)
    b.load_state_dict(a.state_dict())
    la, lb = a(batch), b(batch)
    assert torch.equal(la.nll, lb.nll) and torch.equal(la.codebook, lb.codebook)
    assert torch.allclose(la.total - lb.total, 0.25 * la.commitment, rtol=0, atol=2e-6)


def test_training_uses_codes_and_nll_falls(small_corpus):
    tr = VQTrainer.create(small_corpus[:4], TINY, seed=0)
    res = tr.train(TrainConfig(steps=60, log_every=0, seed=0))
    assert int((tr.model.quantizer.usage > 0).sum()) >= 2
    assert res.losses[-1] < res.losses[0]


def test_dead_codes_reseeded():
    q = GroupedQuantizer(VQConfig(d=16, heads=2, groups=4, codebook_size=8, dead_after=5))
    z = torch.randn(6, 16, generator=torch.Generator().manual_seed(0))
    q.initialize(z, torch.Generator().manual_seed(0))
    q.record_usage(torch.tensor([[0, 1, 1, 0]]), step=10)
    before = q.codebook.detach().clone()
    n = q.reseed_dead(z * 5, step=10, generator=torch.Generator().manual_seed(1))
    assert n == 6
    assert torch.equal(q.codebook[:2], before[:2]) and not torch.equal(q.codebook[2:], before[2:])


def test_extraction_deterministic_and_file(tmp_path, small_corpus):
    tr = VQTrainer.create(small_corpus[:3], TINY, seed=0)
    tr.train(TrainConfig(steps=3, log_every=0))
    ckpt = tmp_path / "vq.pt"
    digest = tr.save(ckpt)
    model, h = load_vqvae(ckpt)
    assert h == digest
    songs = small_corpus[:3]
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    write_features(a, extract_features(model, songs), h)
    write_features(b, extract_features(model, songs), h)
    assert a.read_bytes() == b.read_bytes()
    feats = read_features(a, h)
    for song in songs:
        assert len(feats[song.id]) == len(song.sentences)
        assert all(len(v) == TINY.d for v in feats[song.id])
    rec = json.loads(a.read_text().splitlines()[0])
    assert len(rec["sentences"][0]["codes"]) == TINY.groups and rec["checkpoint"] == h
    with pytest.raises(CheckpointError):
        read_features(a, "0" * 64)
    with pytest.raises(CheckpointError):
        load_vqvae(tmp_path / "missing.pt")


def test_pad_never_a_target(small_corpus):
    batch = collate_vq(prepare_vq_examples(small_corpus[:3], TINY))
    assert (batch.tokens[:, 0] != PAD).all()
