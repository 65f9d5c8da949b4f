"""Float64 finite-difference checks of every differentiable component."""

from __future__ import annotations

import torch

from . import neural as ops
from .attributes import fit_quantizer
from .model import CSLModel, LyricVocab, ModelConfig
from .neural import GradcheckReport, gradcheck
from .score import lyrics_of
from .synth import CorpusSpec, gen_synthetic
from .training import batch_loss, collate, prepare_examples
from .vq import VQConfig, VQVAE, collate_vq, prepare_vq_examples, straight_through_surrogate

TINY_MODEL = ModelConfig(layers=2, heads=2, d=16, d_ff=32, d_l=8, d_a=4, budget=400, learned_dim=16)
TINY_VQ = VQConfig(layers=2, heads=2, d=16, d_ff=32, groups=4, codebook_size=32, budget=400, sentence_budget=200)


def _rand(*shape, seed: int) -> torch.Tensor:
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g, dtype=torch.float64).requires_grad_()


def operator_cases(seed: int = 0) -> dict:
    """Name -> (loss closure, parameters) for each primitive operator."""
    x = _rand(2, 5, 8, seed=seed + 3)
    w, b = _rand(8, seed=seed + 4), _rand(8, seed=seed + 5)
    table = _rand(7, 4, seed=seed + 6)
    ids = torch.tensor([[1, 6, 0], [3, 3, 2]])
    a, m = _rand(3, 4, seed=seed + 7), _rand(4, 2, seed=seed + 8)
    qkv_w = (_rand(24, 8, seed=seed + 9) * 0.3).detach().requires_grad_()
    qkv_b = (_rand(24, seed=seed + 10) * 0.1).detach().requires_grad_()
    out_w = (_rand(8, 8, seed=seed + 11) * 0.3).detach().requires_grad_()
    out_b = (_rand(8, seed=seed + 12) * 0.1).detach().requires_grad_()
    logits, targets = _rand(2, 4, 6, seed=seed + 13), torch.tensor([[1, 2, 0, 5], [0, 0, 3, 4]])
    probe = _rand(2, 5, 8, seed=seed + 14).detach()
    pad = torch.tensor([[False] * 5, [False] * 3 + [True] * 2])
    attn = {"x": x, "w_qkv": qkv_w, "b_qkv": qkv_b, "w_out": out_w, "b_out": out_b}
    return {
        "matmul": (lambda: (ops.matmul(a, m) ** 2).sum(), {"a": a, "b": m}),
        "add": (lambda: (ops.add(x, w) ** 2).sum(), {"x": x, "w": w}),
        "embedding": (lambda: (ops.embedding_lookup(table, ids) ** 3).sum(), {"table": table}),
        "layer_norm": (lambda: (ops.layer_norm(x, w, b) * probe).sum(), {"x": x, "w": w, "b": b}),
        "gelu": (lambda: (ops.gelu(x) * probe).sum(), {"x": x}),
        "softmax": (lambda: (ops.softmax(x) * probe).sum(), {"x": x}),
        "causal_attention": (
            lambda: (ops.causal_multihead_attention(x, qkv_w, qkv_b, out_w, out_b, 2, pad) * probe).sum(),
            attn,
        ),
        "bidirectional_attention": (
            lambda: (ops.bidirectional_multihead_attention(x, qkv_w, qkv_b, out_w, out_b, 2, pad) * probe).sum(),
            attn,
        ),
        "cross_entropy": (lambda: ops.cross_entropy(logits, targets), {"logits": logits}),
    }


def model_cases(seed: int = 0) -> dict:
    """Tiny sentence encoder, full conditioned decoder and VQ-VAE."""
    songs = gen_synthetic(CorpusSpec(4, seed=seed, sentences=(2, 2), syllables=(3, 4)))
    quantizer = fit_quantizer(songs, k=8)
    vocab = LyricVocab.build([s for song in songs for s in lyrics_of(song)])
    cfg = ModelConfig(**{**TINY_MODEL.to_dict(), "lyric_vocab_size": len(vocab), "k": quantizer.k})
    model = CSLModel(cfg, seed=seed).double()
    batch = collate(prepare_examples(songs[:1], vocab, quantizer, cfg.budget))

    chars = list(vocab.chars)
    ids = torch.tensor([vocab.encode(chars[:4]), vocab.encode(chars[1:5])])
    ids[1, 3:] = LyricVocab.PAD
    probe = torch.randn(2, cfg.d_l, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)

    vq = VQVAE(TINY_VQ, seed=seed + 1).double()
    vq_batch = collate_vq(prepare_vq_examples(songs[:1], TINY_VQ))
    with torch.no_grad():
        z = vq.encode(vq_batch.sentences)
    # spread the codebook around the latents so several codes are in use
    noise = 0.3 * torch.randn(z.shape, generator=torch.Generator().manual_seed(seed), dtype=z.dtype)
    vq.quantizer.initialize(z + noise, torch.Generator().manual_seed(seed))

    return {
        "sentence_encoder": (
            lambda: (model.encoder(ids, ids == LyricVocab.PAD) * probe).sum(),
            dict(model.encoder.named_parameters()),
        ),
        "conditioned_decoder": (lambda: batch_loss(model, batch), dict(model.named_parameters())),
        "vqvae": (straight_through_surrogate(vq, vq_batch), dict(vq.named_parameters())),
    }


def gradcheck_suite(seed: int = 0, tolerance: float = 1e-5, max_entries: int = 8) -> dict[str, GradcheckReport]:
    torch.set_num_threads(1)
    reports = {}
    for name, (fn, params) in operator_cases(seed).items():
        reports[name] = gradcheck(fn, params, tolerance=tolerance, seed=seed)
    for name, (fn, params) in model_cases(seed).items():
        reports[name] = gradcheck(fn, params, tolerance=tolerance, max_entries=max_entries, seed=seed)
    return reports
