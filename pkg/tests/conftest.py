import io

import numpy as np
import pytest
import torch

from longcxr import corpus, textproc, training, vision
from longcxr.config import ModelConfig


def finite_difference_grad(loss_fn, param, index, step=1e-4):
    """Central finite difference of loss_fn w.r.t. one parameter element."""
    with torch.no_grad():
        orig = param.view(-1)[index].item()
        param.view(-1)[index] = orig + step
        up = loss_fn().item()
        param.view(-1)[index] = orig - step
        down = loss_fn().item()
        param.view(-1)[index] = orig
    return (up - down) / (2 * step)


def check_gradients(loss_fn, named_params, rng, n_elements=3, step=1e-4, rtol=1e-4):
    """Compare autograd against central differences on sampled elements of
    every parameter tensor. Returns the worst relative error seen."""
    params = [(n, p) for n, p in named_params if p.requires_grad]
    for _, p in params:
        p.grad = None
    loss_fn().backward()
    worst = 0.0
    for name, p in params:
        if p.numel() == 0 or p.grad is None:
            continue
        idxs = rng.choice(p.numel(), size=min(n_elements, p.numel()), replace=False)
        for idx in idxs:
            analytic = p.grad.view(-1)[int(idx)].item()
            numeric = finite_difference_grad(loss_fn, p, int(idx), step=step)
            denom = max(abs(analytic), abs(numeric), 1e-8)
            rel = abs(analytic - numeric) / denom
            assert rel < rtol, f"{name}[{idx}]: analytic {analytic} vs fd {numeric} (rel {rel})"
            worst = max(worst, rel)
    return worst


@pytest.fixture
def rng():
    return np.random.RandomState(0)


def toy_model_config(vocab_size, **overrides):
    base = dict(vocab_size=vocab_size, hidden=16, heads=4, enc_layers=1, dec_blocks=2,
                ff_dim=16, feat_dim=8, mem_slots=2, mem_heads=4, beta=0.2, dropout=0.0,
                max_len=16, image_size=32)
    base.update(overrides)
    return ModelConfig(**base)


def make_visit(pid, sid, when, findings="FINDINGS: lungs clear .\nIMPRESSION: ok ."):
    return corpus.VisitRecord(
        patient_id=pid, study_id=sid, study_datetime=when,
        image_refs=(f"img_{sid}",), report_text=findings,
        findings_text=corpus.extract_findings(findings),
    )


@pytest.fixture(scope="session")
def overfit_fixture():
    """32-sample synthetic corpus with tensorized batches and a scaled config."""
    meta, reports = corpus.generate_synthetic_corpus(11, 24, {2: 0.6, 3: 0.4})
    records, errors = corpus.parse_metadata(io.StringIO(meta), reports)
    assert not errors
    samples, _ = corpus.build_longitudinal_pairs(corpus.group_by_patient(records))
    sample_dicts = [dict(s.to_json(), split="train") for s in samples][:32]
    assert len(sample_dicts) == 32
    vocab = textproc.build_vocab(
        (s[k] for s in sample_dicts for k in ("prev_findings", "curr_findings")),
        min_freq=1)
    assert len(vocab) <= 200
    config = ModelConfig(vocab_size=len(vocab), hidden=128, heads=4, enc_layers=2,
                         dec_blocks=2, ff_dim=256, mem_slots=2, mem_heads=4,
                         image_size=64, dropout=0.0, max_len=64)
    backend = vision.StubBackend(seed=3)
    batches = training.prepare_batches(sample_dicts, vocab, config, backend, batch_size=8)
    return {"samples": sample_dicts, "vocab": vocab, "config": config,
            "backend": backend, "batches": batches}
