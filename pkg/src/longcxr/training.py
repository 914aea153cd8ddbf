"""Loss, learning-rate schedule, training loop, and the ablation harness."""

import json
import time
from dataclasses import asdict

import numpy as np
import torch
from torch import nn

from . import textproc, vision
from .checkpoint import save_checkpoint
from .config import VARIANTS, ModelConfig, TrainConfig
from .model.decoder import LongitudinalReportModel


class TrainingError(RuntimeError):
    pass


def compute_loss(logits, target_ids, pad_mask=None):
    """Word-level cross entropy, averaged over non-pad positions."""
    if pad_mask is None:
        pad_mask = torch.ones_like(target_ids, dtype=torch.bool)
    if not bool(pad_mask.any()):
        raise TrainingError("every target position is padding")
    logp = torch.log_softmax(logits, dim=-1)
    nll = -logp.gather(-1, target_ids.unsqueeze(-1)).squeeze(-1)
    return (nll * pad_mask).sum() / pad_mask.sum()


def lr_schedule(epoch, cfg: TrainConfig):
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    decay = cfg.lr_decay ** epoch
    return cfg.lr_visual * decay, cfg.lr_other * decay


# ---------------------------------------------------------------------------
# tensorization

def prepare_batches(samples, vocab, config: ModelConfig, backend, batch_size,
                    feature_cache=None):
    """Turn corpus samples (JSON dicts) into padded tensor batches."""

    def feats_for(image_ref):
        if feature_cache is not None:
            hit = feature_cache.get(image_ref, backend.name)
            if hit is not None:
                return hit
        image = vision.synthetic_image(image_ref, config.image_size)
        feats = vision.extract_patch_features(image, backend).data
        if feature_cache is not None:
            feature_cache.put(image_ref, backend.name, feats)
        return feats

    def ids_for(text):
        seq = textproc.encode_ids(textproc.tokenize(text), vocab, add_bos_eos=True)
        return seq.ids[: config.max_len]

    items = []
    for s in samples:
        items.append({
            "id": f"{s['patient_id']}:{s['curr_study_id']}",
            "prev_feats": feats_for(s["prev_image"]),
            "curr_feats": feats_for(s["curr_image"]),
            "prev_report": ids_for(s["prev_findings"]),
            "target": ids_for(s["curr_findings"]),
        })

    batches = []
    for start in range(0, len(items), batch_size):
        chunk = items[start: start + batch_size]
        rep_len = max(len(it["prev_report"]) for it in chunk)
        tgt_len = max(len(it["target"]) for it in chunk)

        def pad(ids, length):
            return ids + [textproc.PAD] * (length - len(ids))

        rep = torch.tensor([pad(it["prev_report"], rep_len) for it in chunk])
        tgt = torch.tensor([pad(it["target"], tgt_len) for it in chunk])
        batches.append({
            "ids": [it["id"] for it in chunk],
            "prev_feats": torch.from_numpy(np.stack([it["prev_feats"] for it in chunk])),
            "curr_feats": torch.from_numpy(np.stack([it["curr_feats"] for it in chunk])),
            "prev_report_ids": rep,
            "prev_report_mask": rep != textproc.PAD,
            "target_in": tgt[:, :-1],
            "target_in_mask": tgt[:, :-1] != textproc.PAD,
            "target_out": tgt[:, 1:],
            "target_out_mask": tgt[:, 1:] != textproc.PAD,
        })
    return batches


def unbatch(batch, i):
    """Single-sample view (no batch dim) of one element of a batch."""
    out = {}
    for key, val in batch.items():
        if isinstance(val, torch.Tensor):
            out[key] = val[i]
    # trim report padding for per-sample generation
    mask = out["prev_report_mask"]
    out["prev_report_ids"] = out["prev_report_ids"][mask]
    out["prev_report_mask"] = mask[mask]
    return out


# ---------------------------------------------------------------------------
# training loop

def make_optimizer(model, backend, cfg: TrainConfig):
    """ADAM with two groups: the visual extractor and everything else."""
    visual = list(backend.parameters()) if backend.trainable else []
    visual_ids = {id(p) for p in visual}
    other = [p for p in model.parameters() if id(p) not in visual_ids]
    return torch.optim.Adam(
        [{"params": visual, "lr": cfg.lr_visual},
         {"params": other, "lr": cfg.lr_other}],
        betas=cfg.adam_betas, eps=cfg.adam_eps,
    )


def evaluate_loss(model, batches):
    model.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for batch in batches:
            logits = model(batch)
            n = int(batch["target_out_mask"].sum())
            total += float(compute_loss(logits, batch["target_out"],
                                        batch["target_out_mask"])) * n
            count += n
    return total / max(count, 1)


def train(train_batches, model_config: ModelConfig, cfg: TrainConfig, backend,
          val_batches=None, checkpoint_path=None, log_path=None, model=None,
          stop_loss=None):
    """Deterministic single-device training; returns (model, per-epoch log)."""
    torch.manual_seed(cfg.seed)
    torch.set_num_threads(1)
    if model is None:
        model = LongitudinalReportModel(model_config, variant=cfg.variant)
    optimizer = make_optimizer(model, backend, cfg)
    shuffler = torch.Generator().manual_seed(cfg.seed)

    log = []
    best_val = float("inf")
    log_fh = open(log_path, "w") if log_path else None
    try:
        for epoch in range(cfg.epochs):
            lr_vis, lr_other = lr_schedule(epoch, cfg)
            optimizer.param_groups[0]["lr"] = lr_vis
            optimizer.param_groups[1]["lr"] = lr_other

            model.train()
            t0 = time.time()
            order = torch.randperm(len(train_batches), generator=shuffler).tolist()
            epoch_loss, n_tokens = 0.0, 0
            for bi in order:
                batch = train_batches[bi]
                optimizer.zero_grad()
                logits = model(batch)
                loss = compute_loss(logits, batch["target_out"], batch["target_out_mask"])
                if not torch.isfinite(loss):
                    raise TrainingError(f"non-finite loss at epoch {epoch}, batch {bi}")
                loss.backward()
                if cfg.grad_clip > 0:
                    nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
                optimizer.step()
                n = int(batch["target_out_mask"].sum())
                epoch_loss += loss.item() * n
                n_tokens += n

            entry = {
                "epoch": epoch,
                "split": "train",
                "loss": epoch_loss / max(n_tokens, 1),
                "lr_visual": lr_vis,
                "lr_other": lr_other,
                "wall_time": time.time() - t0,
            }
            if val_batches:
                entry["val_loss"] = evaluate_loss(model, val_batches)
                if checkpoint_path and entry["val_loss"] < best_val:
                    best_val = entry["val_loss"]
                    _save(model, cfg, checkpoint_path)
            log.append(entry)
            if log_fh:
                log_fh.write(json.dumps(entry) + "\n")
            if stop_loss is not None and entry["loss"] < stop_loss:
                break
        if checkpoint_path and not val_batches:
            _save(model, cfg, checkpoint_path)
    finally:
        if log_fh:
            log_fh.close()
    return model, log


def _save(model, cfg, path):
    meta = {
        "model_config": asdict(model.config),
        "variant": model.variant,
        "train_config": {k: list(v) if isinstance(v, tuple) else v
                         for k, v in asdict(cfg).items()},
    }
    save_checkpoint(path, model.state_dict(), meta=meta)


def load_model(path):
    from .checkpoint import load_checkpoint

    meta, tensors = load_checkpoint(path)
    config = ModelConfig(**meta["model_config"])
    model = LongitudinalReportModel(config, variant=meta["variant"])
    model.load_state_dict({k: tensors[k] for k in model.state_dict()})
    model.checkpoint_meta = meta
    return model


def run_ablations(train_batches, model_config, base_cfg: TrainConfig, backend,
                  evaluate_fn):
    """Train all five variants and collect one metric row per variant."""
    from dataclasses import replace

    rows = []
    for variant in VARIANTS:
        cfg = replace(base_cfg, variant=variant)
        model, _ = train(train_batches, model_config, cfg, backend)
        rows.append({"variant": variant, **evaluate_fn(model)})
    return rows
