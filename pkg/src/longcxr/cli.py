"""Command-line entry point wiring the pipeline end to end.

Subcommands: build-dataset, train, generate, evaluate, ablate.
"""

import csv
import hashlib
import json
import os
from datetime import datetime, timezone
from pathlib import Path

import click

from . import corpus, evaluation, textproc, training, vision
from .config import ModelConfig, TrainConfig, config_from_kv, parse_kv_file


def _hash_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, seed, inputs, outputs, config_snapshot):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "config": config_snapshot,
        "seed": seed,
        "inputs": {str(p): _hash_file(p) for p in inputs if Path(p).exists()},
        "outputs": [str(p) for p in outputs],
        "started_at": datetime.now(timezone.utc).isoformat(),
    }
    tmp = out_dir / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    os.replace(tmp, out_dir / "manifest.json")


@click.group()
def main():
    """Longitudinal chest X-ray report pre-filling pipeline."""


def _auto_split(patient_ids, ratios=(0.9, 0.05, 0.05)):
    pids = sorted(patient_ids)
    n = len(pids)
    n_train = max(1, round(n * ratios[0]))
    n_val = max(0, round(n * ratios[1]))
    manifest = {}
    for i, pid in enumerate(pids):
        if i < n_train:
            manifest[pid] = "train"
        elif i < n_train + n_val:
            manifest[pid] = "validation"
        else:
            manifest[pid] = "test"
    return manifest


@main.command("build-dataset")
@click.option("--metadata", type=click.Path(), help="metadata CSV (omit with --synthetic)")
@click.option("--reports", type=click.Path(), help="reports dir or 2-column CSV")
@click.option("--splits", type=click.Path(), help="patient_id,split manifest CSV")
@click.option("--default-split", default=None, help="fallback split for unmanifested patients")
@click.option("--synthetic", is_flag=True, help="generate a synthetic corpus first")
@click.option("--seed", default=7, show_default=True)
@click.option("--n-patients", default=20, show_default=True)
@click.option("--histogram", default="2:0.5,3:0.3,4:0.2", show_default=True,
              help="visit-count:weight pairs for the synthetic generator")
@click.option("--out", "out_dir", required=True, type=click.Path())
def cmd_build_dataset(metadata, reports, splits, default_split, synthetic, seed,
                      n_patients, histogram, out_dir):
    """Build the consecutive-visit sample file and corpus stats."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        if synthetic:
            hist = {int(k): float(v) for k, v in
                    (pair.split(":") for pair in histogram.split(","))}
            corpus.generate_synthetic_corpus(seed, n_patients, hist, out_dir=out_dir)
            metadata = out_dir / "metadata.csv"
            reports = out_dir / "reports.csv"
        if not metadata or not Path(metadata).exists():
            raise click.ClickException(f"metadata file not found: {metadata}")
        if not reports or not Path(reports).exists():
            raise click.ClickException(f"reports source not found: {reports}")

        report_map = corpus.load_reports(reports)
        with open(metadata, newline="") as fh:
            records, errors = corpus.parse_metadata(fh, report_map)
        for err in errors:
            click.echo(f"warning: {err}", err=True)
        samples, stats = corpus.build_longitudinal_pairs(corpus.group_by_patient(records))

        if splits:
            manifest = corpus.read_split_manifest(splits)
        elif default_split:
            manifest = {}
        else:
            manifest = _auto_split({s.patient_id for s in samples})
            with open(out_dir / "split_manifest.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["patient_id", "split"])
                for pid in sorted(manifest):
                    w.writerow([pid, manifest[pid]])
        corpus.assign_splits(samples, manifest, default_split=default_split)

        per_split = {}
        for s in samples:
            entry = per_split.setdefault(s.split, {"patients": set(), "samples": 0})
            entry["patients"].add(s.patient_id)
            entry["samples"] += 1
        stats.per_split = {k: {"patients": len(v["patients"]), "samples": v["samples"]}
                           for k, v in sorted(per_split.items())}

        corpus.write_samples_jsonl(samples, out_dir / "samples.jsonl")
        (out_dir / "stats.json").write_text(json.dumps(stats.to_json(), indent=1, sort_keys=True))
        write_manifest(out_dir, seed, [metadata, reports],
                       [out_dir / "samples.jsonl", out_dir / "stats.json"],
                       {"histogram": histogram if synthetic else None,
                        "parse_errors": len(errors)})
        click.echo(json.dumps(stats.to_json(), indent=1, sort_keys=True))
    except corpus.CorpusError as exc:
        raise click.ClickException(str(exc))


def _load_configs(config_path, overrides):
    """Flat key=value file; 'model.'-prefixed keys go to ModelConfig, the
    rest to TrainConfig. CLI --set overrides win."""
    kv = parse_kv_file(config_path) if config_path else {}
    for item in overrides:
        key, _, val = item.partition("=")
        if not _:
            raise click.ClickException(f"--set expects key=value, got {item!r}")
        kv[key.strip()] = val.strip()
    model_kv = {k[len("model."):]: v for k, v in kv.items() if k.startswith("model.")}
    train_kv = {k: v for k, v in kv.items() if not k.startswith("model.")}
    try:
        return (config_from_kv(ModelConfig, model_kv),
                config_from_kv(TrainConfig, train_kv))
    except KeyError as exc:
        raise click.ClickException(f"bad config key: {exc}")
    except ValueError as exc:
        raise click.ClickException(str(exc))


def _split_samples(samples, split):
    return [s for s in samples if s.get("split") == split]


@main.command("train")
@click.option("--samples", "samples_path", required=True, type=click.Path(exists=True))
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--set", "overrides", multiple=True, help="key=value config override")
@click.option("--backend", default="stub", show_default=True)
@click.option("--min-freq", default=3, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
def cmd_train(samples_path, config_path, overrides, backend, min_freq, out_dir):
    """Train a model on the train split; keep the best-validation checkpoint."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model_cfg, train_cfg = _load_configs(config_path, overrides)

    samples = corpus.read_samples_jsonl(samples_path)
    train_samples = _split_samples(samples, "train") or samples
    val_samples = _split_samples(samples, "validation")

    vocab = textproc.build_vocab(
        (s[k] for s in train_samples for k in ("prev_findings", "curr_findings")),
        min_freq=min_freq)
    vocab.save(out_dir / "vocab.json")
    model_cfg.vocab_size = len(vocab)

    vb = vision.make_backend(backend, seed=train_cfg.seed)
    train_batches = training.prepare_batches(train_samples, vocab, model_cfg, vb,
                                             train_cfg.batch_size)
    val_batches = training.prepare_batches(val_samples, vocab, model_cfg, vb,
                                           train_cfg.batch_size) if val_samples else None

    write_manifest(out_dir, train_cfg.seed, [samples_path],
                   [out_dir / "checkpoint.bin", out_dir / "log.jsonl"],
                   {"model": model_cfg.__dict__, "train": {**train_cfg.__dict__,
                    "adam_betas": list(train_cfg.adam_betas)}, "backend": backend})
    try:
        training.train(train_batches, model_cfg, train_cfg, vb,
                       val_batches=val_batches,
                       checkpoint_path=out_dir / "checkpoint.bin",
                       log_path=out_dir / "log.jsonl")
    except training.TrainingError as exc:
        raise click.ClickException(str(exc))
    click.echo(f"checkpoint written to {out_dir / 'checkpoint.bin'}")


@main.command("generate")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--samples", "samples_path", required=True, type=click.Path(exists=True))
@click.option("--vocab", "vocab_path", required=True, type=click.Path(exists=True))
@click.option("--split", default=None, help="restrict to one split")
@click.option("--mode", type=click.Choice(["greedy", "beam"]), default="greedy",
              show_default=True)
@click.option("--beam-size", default=3, show_default=True)
@click.option("--max-len", default=None, type=int)
@click.option("--backend", default="stub", show_default=True)
@click.option("--with-references", is_flag=True,
              help="include reference and previous findings in the output")
@click.option("--out", "out_path", required=True, type=click.Path())
def cmd_generate(checkpoint, samples_path, vocab_path, split, mode, beam_size,
                 max_len, backend, with_references, out_path):
    """Generate findings text for each sample."""
    model = training.load_model(checkpoint)
    vocab = textproc.Vocabulary.load(vocab_path)
    samples = corpus.read_samples_jsonl(samples_path)
    if split:
        samples = _split_samples(samples, split)
    if not samples:
        raise click.ClickException("no samples to generate for")

    # the stub backend must see the same seed as training did
    seed = model.checkpoint_meta.get("train_config", {}).get("seed", 0)
    vb = vision.make_backend(backend, seed=seed)
    batches = training.prepare_batches(samples, vocab, model.config, vb, batch_size=1)
    with open(out_path, "w") as fh:
        for sample, batch in zip(samples, batches):
            single = training.unbatch(batch, 0)
            seq = model.generate(single, mode=mode, beam_size=beam_size, max_len=max_len)
            text = textproc.decode_ids(seq, vocab)
            row = {"id": batch["ids"][0], "generated": text, "token_count": len(seq)}
            if with_references:
                row["reference"] = sample["curr_findings"]
                row["previous"] = sample["prev_findings"]
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    click.echo(f"wrote {len(samples)} generations to {out_path}")


@main.command("evaluate")
@click.option("--input", "input_path", required=True, type=click.Path(exists=True),
              help="JSONL with id, generated, reference, optional previous")
@click.option("--out", "out_dir", required=True, type=click.Path())
def cmd_evaluate(input_path, out_dir):
    """Score generated findings: NLG metrics, CE metrics, label consistency."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = corpus.read_samples_jsonl(input_path)
    if not rows:
        raise click.ClickException("empty evaluation input")
    missing = [i for i, r in enumerate(rows) if "reference" not in r or "generated" not in r]
    if missing:
        raise click.ClickException(
            f"rows missing generated/reference fields: lines {missing[:5]}")

    candidates = [textproc.tokenize(r["generated"]) for r in rows]
    references = [textproc.tokenize(r["reference"]) for r in rows]
    report = evaluation.full_report(candidates, references)
    (out_dir / "metrics.json").write_text(
        json.dumps(report.to_json(), indent=1, sort_keys=True))

    if all("previous" in r for r in rows):
        prev = [evaluation.stub_labeler(r["previous"]) for r in rows]
        truth = [evaluation.stub_labeler(r["reference"]) for r in rows]
        gen = [evaluation.stub_labeler(r["generated"]) for r in rows]
        consistency = evaluation.longitudinal_label_consistency(prev, truth, gen)
        with open(out_dir / "consistency.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["condition", "same_total", "same_match", "diff_total", "diff_wrong"])
            for c in evaluation.CONDITIONS:
                pc = consistency["per_condition"][c]
                w.writerow([c, pc["same_total"], pc["same_match"],
                            pc["diff_total"], pc["diff_wrong"]])
        (out_dir / "consistency.json").write_text(json.dumps(
            {k: v for k, v in consistency.items() if k != "per_condition"},
            indent=1, sort_keys=True))
    click.echo(json.dumps(report.to_json(), indent=1, sort_keys=True))


ABLATION_COLUMNS = ["variant", "BL-1", "BL-2", "BL-3", "BL-4", "M", "R_L",
                    "A", "P", "R", "F-1"]


@main.command("ablate")
@click.option("--samples", "samples_path", required=True, type=click.Path(exists=True))
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--set", "overrides", multiple=True)
@click.option("--backend", default="stub", show_default=True)
@click.option("--min-freq", default=1, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
def cmd_ablate(samples_path, config_path, overrides, backend, min_freq, out_dir):
    """Train all five ablation variants and emit one results CSV."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model_cfg, train_cfg = _load_configs(config_path, overrides)

    samples = corpus.read_samples_jsonl(samples_path)
    train_samples = _split_samples(samples, "train") or samples
    vocab = textproc.build_vocab(
        (s[k] for s in train_samples for k in ("prev_findings", "curr_findings")),
        min_freq=min_freq)
    model_cfg.vocab_size = len(vocab)
    vb = vision.make_backend(backend, seed=train_cfg.seed)
    batches = training.prepare_batches(train_samples, vocab, model_cfg, vb,
                                       train_cfg.batch_size)

    def evaluate_fn(model):
        candidates, references = [], []
        for batch in batches:
            for i in range(batch["target_in"].shape[0]):
                single = training.unbatch(batch, i)
                seq = model.generate(single, mode="greedy")
                candidates.append(textproc.tokenize(textproc.decode_ids(seq, vocab)))
                ref_ids = textproc.TokenSeq(
                    ids=[t for t in single["target_out"].tolist() if t != textproc.PAD])
                references.append(textproc.tokenize(textproc.decode_ids(ref_ids, vocab)))
        rep = evaluation.full_report(candidates, references)
        return {"BL-1": rep.bleu_1, "BL-2": rep.bleu_2, "BL-3": rep.bleu_3,
                "BL-4": rep.bleu_4, "M": rep.meteor, "R_L": rep.rouge_l,
                "A": rep.ce_accuracy, "P": rep.ce_precision, "R": rep.ce_recall,
                "F-1": rep.ce_f1}

    rows = training.run_ablations(batches, model_cfg, train_cfg, vb, evaluate_fn)
    with open(out_dir / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS)
        w.writeheader()
        for row in rows:
            w.writerow({k: row[k] for k in ABLATION_COLUMNS})
    click.echo(f"wrote {out_dir / 'ablation.csv'}")


if __name__ == "__main__":
    main()
