"""Command-line pipelines: corpus generation through retrieval evaluation."""

from __future__ import annotations

import dataclasses
import json
import os
import sys

import click
import numpy as np
import yaml

from .config import (
    ModelConfig,
    SyntheticSpec,
    TrainConfig,
    config_to_dict,
    dict_to_config,
)
from .corpus import MANIFEST_NAME, generate_synthetic_corpus, load_manifest
from .embedder import AblationMask
from .finetune_eval import (
    evaluate_classification,
    evaluate_retrieval,
    evaluate_token_labeling,
    finetune,
)
from .model import build_model
from .topics import (
    fit_lda,
    infer_topics,
    read_doc_topics,
    save_topic_model,
    write_doc_topics,
)
from .trainer import Pretrainer, checkpoint_model_config, load_checkpoint, save_checkpoint

DOC_TOPICS_NAME = "doc_topics.jsonl"
TOPICS_NAME = "topics.json"


class CliError(click.ClickException):
    pass


def _load_config_file(path):
    if path is None:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise CliError(f"config file {path} must hold a mapping")
    return data


def _build_configs(config_path, seed, precision):
    raw = _load_config_file(config_path)
    model_raw = dict(raw.get("model", {}))
    train_raw = dict(raw.get("train", {}))
    synth_raw = dict(raw.get("synthetic", {}))
    if precision is not None:
        model_raw["precision"] = precision
    if seed is not None:
        train_raw["seed"] = seed
    model_cfg = dict_to_config(ModelConfig, model_raw)
    train_cfg = dict_to_config(TrainConfig, train_raw)
    synth = dict_to_config(SyntheticSpec, synth_raw)
    return model_cfg, train_cfg, synth


def _make_run_dir(run_dir, resume=False):
    if os.path.exists(run_dir) and os.listdir(run_dir) and not resume:
        raise CliError(f"run directory {run_dir} already exists; refusing to overwrite")
    os.makedirs(run_dir, exist_ok=True)
    return run_dir


def _echo_config(run_dir, model_cfg, train_cfg, synth, extra=None):
    payload = {
        "model": config_to_dict(model_cfg),
        "train": config_to_dict(train_cfg),
        "synthetic": config_to_dict(synth),
    }
    payload["train"]["tasks"] = list(payload["train"]["tasks"])
    if extra:
        payload.update(extra)
    with open(os.path.join(run_dir, "config.yaml"), "w", encoding="utf-8") as fh:
        yaml.safe_dump(payload, fh, sort_keys=True)


def _load_corpus(corpus_dir, model_cfg):
    manifest = os.path.join(corpus_dir, MANIFEST_NAME)
    if not os.path.exists(manifest):
        raise CliError(f"missing corpus manifest: {manifest}")
    return load_manifest(
        manifest, expected_size=(model_cfg.page_width, model_cfg.page_height)
    )


def common_options(fn):
    fn = click.option("--config", "config_path", type=click.Path(exists=True),
                      default=None, help="YAML config with model/train/synthetic keys")(fn)
    fn = click.option("--seed", type=int, default=None, help="master seed override")(fn)
    fn = click.option("--run-dir", required=True, type=click.Path(),
                      help="fresh directory for this run's artifacts")(fn)
    fn = click.option("--device", default="cpu", show_default=True)(fn)
    fn = click.option("--precision", type=click.Choice(["single", "double"]),
                      default=None)(fn)
    return fn


@click.group()
def main():
    """Multi-modal multi-page document representation pipelines."""


@main.command("gen-corpus")
@common_options
def gen_corpus(config_path, seed, run_dir, device, precision):
    """Generate a deterministic synthetic corpus under RUN_DIR/corpus."""
    model_cfg, train_cfg, synth = _build_configs(config_path, seed, precision)
    _make_run_dir(run_dir)
    _echo_config(run_dir, model_cfg, train_cfg, synth)
    out = os.path.join(run_dir, "corpus")
    docs = generate_synthetic_corpus(synth, out, seed=train_cfg.seed)
    click.echo(f"wrote {len(docs)} documents to {out}")


@main.command("mine-topics")
@common_options
@click.option("--corpus", "corpus_dir", required=True, type=click.Path(exists=True))
@click.option("--iterations", type=int, default=200, show_default=True)
def mine_topics(config_path, seed, run_dir, device, precision, corpus_dir, iterations):
    """Fit LDA over the corpus and write topics.json + doc_topics.jsonl."""
    model_cfg, train_cfg, synth = _build_configs(config_path, seed, precision)
    _make_run_dir(run_dir)
    _echo_config(run_dir, model_cfg, train_cfg, synth)
    docs = _load_corpus(corpus_dir, model_cfg)
    streams = [[t.token_id for t in d.tokens] for d in docs]
    model = fit_lda(
        streams, vocab_size=model_cfg.vocab_size, num_topics=model_cfg.num_topics,
        iterations=iterations, seed=train_cfg.seed,
    )
    save_topic_model(model, os.path.join(run_dir, TOPICS_NAME))
    thetas = {
        d.id: infer_topics(s, model, seed=train_cfg.seed + i)
        for i, (d, s) in enumerate(zip(docs, streams))
    }
    write_doc_topics(thetas, os.path.join(run_dir, DOC_TOPICS_NAME))
    click.echo(f"mined {model.num_topics} topics over {len(docs)} documents")


@main.command("pretrain")
@common_options
@click.option("--corpus", "corpus_dir", required=True, type=click.Path(exists=True))
@click.option("--topics", "topics_dir", default=None, type=click.Path(),
              help="directory holding doc_topics.jsonl (required for DTM)")
@click.option("--tasks", default=None, help="comma list: mvlm_clf,dsp,dtm")
@click.option("--steps", type=int, default=None)
@click.option("--resume", is_flag=True, default=False)
def pretrain(config_path, seed, run_dir, device, precision, corpus_dir,
             topics_dir, tasks, steps, resume):
    """Run the multi-task pre-training loop."""
    model_cfg, train_cfg, synth = _build_configs(config_path, seed, precision)
    if tasks is not None:
        train_cfg = dataclasses.replace(
            train_cfg, tasks=tuple(t.strip() for t in tasks.split(",") if t.strip())
        )
    if steps is not None:
        train_cfg = dataclasses.replace(train_cfg, steps=steps)
    _make_run_dir(run_dir, resume=resume)
    _echo_config(run_dir, model_cfg, train_cfg, synth)
    docs = _load_corpus(corpus_dir, model_cfg)
    doc_topics = None
    if "dtm" in train_cfg.tasks:
        if topics_dir is None:
            raise CliError(f"DTM enabled but no --topics directory with {DOC_TOPICS_NAME}")
        topics_path = os.path.join(topics_dir, DOC_TOPICS_NAME)
        if not os.path.exists(topics_path):
            raise CliError(f"missing topic file: {topics_path}")
        doc_topics = read_doc_topics(topics_path)
    model = build_model(model_cfg, seed=train_cfg.seed)
    runner = Pretrainer(model, docs, train_cfg, doc_topics=doc_topics)
    ckpt_dir = os.path.join(run_dir, "checkpoints")
    start = 0
    if resume:
        existing = sorted(os.listdir(ckpt_dir)) if os.path.isdir(ckpt_dir) else []
        if existing:
            runner.load_checkpoint(os.path.join(ckpt_dir, existing[-1]))
            start = runner.step
    log_path = os.path.join(run_dir, "train.log")
    with open(log_path, "a", encoding="utf-8") as log:
        def log_fn(line):
            log.write(line + "\n")
            click.echo(line)

        runner.train(train_cfg.steps - start, log_fn=log_fn, checkpoint_dir=ckpt_dir)
    final = os.path.join(ckpt_dir, "final.pt")
    runner.save_checkpoint(final)
    click.echo(f"pre-training complete at step {runner.step}; checkpoint {final}")


def _restore_model(checkpoint, precision):
    model_cfg = checkpoint_model_config(checkpoint)
    if precision is not None and precision != model_cfg.precision:
        raise CliError(
            f"checkpoint precision {model_cfg.precision} does not match --precision"
        )
    model = build_model(model_cfg, seed=0)
    load_checkpoint(checkpoint, model)
    return model


@main.command("finetune")
@common_options
@click.option("--corpus", "corpus_dir", required=True, type=click.Path(exists=True))
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--task", type=click.Choice(["classification", "token-labeling"]),
              default="classification", show_default=True)
@click.option("--steps", type=int, default=200, show_default=True)
@click.option("--batch-size", type=int, default=8, show_default=True)
@click.option("--learning-rate", type=float, default=3e-5, show_default=True)
def finetune_cmd(config_path, seed, run_dir, device, precision, corpus_dir,
                 checkpoint, task, steps, batch_size, learning_rate):
    """Fine-tune a head on top of a pre-trained checkpoint."""
    _, train_cfg, synth = _build_configs(config_path, seed, precision)
    _make_run_dir(run_dir)
    model = _restore_model(checkpoint, precision)
    _echo_config(run_dir, model.cfg, train_cfg, synth, extra={"finetune_task": task})
    docs = _load_corpus(corpus_dir, model.cfg)
    log_path = os.path.join(run_dir, "train.log")
    with open(log_path, "w", encoding="utf-8") as log:
        finetune(
            model, docs, task=task.replace("-", "_"), steps=steps,
            batch_size=batch_size, lr=learning_rate, seed=train_cfg.seed,
            log_fn=lambda line: log.write(line + "\n"),
        )
    out = os.path.join(run_dir, "finetuned.pt")
    save_checkpoint(model, None, steps, train_cfg, out)
    click.echo(f"fine-tuned checkpoint written to {out}")


@main.command("evaluate")
@common_options
@click.option("--corpus", "corpus_dir", required=True, type=click.Path(exists=True))
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--task", type=click.Choice(["classification", "token-labeling"]),
              default="classification", show_default=True)
@click.option("--ablation", type=click.Choice(["all", "text-only", "image-only"]),
              default="all", show_default=True)
def evaluate_cmd(config_path, seed, run_dir, device, precision, corpus_dir,
                 checkpoint, task, ablation):
    """Evaluate a fine-tuned checkpoint; writes metrics.json."""
    _, train_cfg, synth = _build_configs(config_path, seed, precision)
    _make_run_dir(run_dir)
    model = _restore_model(checkpoint, precision)
    _echo_config(run_dir, model.cfg, train_cfg, synth,
                 extra={"ablation": ablation, "eval_task": task})
    docs = _load_corpus(corpus_dir, model.cfg)
    mask = AblationMask.from_name(ablation)
    if task == "classification":
        report = evaluate_classification(model, docs, mask)
    else:
        report = evaluate_token_labeling(model, docs, mask)
    report.ablation = dict(mask.__dict__, name=ablation)
    out = os.path.join(run_dir, "metrics.json")
    with open(out, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
    click.echo(f"metrics written to {out}")


@main.command("retrieve")
@common_options
@click.option("--corpus", "corpus_dir", required=True, type=click.Path(exists=True))
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--query-count", type=int, default=40, show_default=True,
              help="first N corpus documents serve as queries, the rest as index")
@click.option("--ndcg-k", default="1,10", show_default=True)
def retrieve_cmd(config_path, seed, run_dir, device, precision, corpus_dir,
                 checkpoint, query_count, ndcg_k):
    """Cosine-distance retrieval over fine-tuned embeddings."""
    _, train_cfg, synth = _build_configs(config_path, seed, precision)
    _make_run_dir(run_dir)
    model = _restore_model(checkpoint, precision)
    _echo_config(run_dir, model.cfg, train_cfg, synth)
    docs = _load_corpus(corpus_dir, model.cfg)
    if query_count < 1 or query_count >= len(docs):
        raise CliError(f"--query-count must be in [1, {len(docs) - 1}]")
    ks = tuple(int(k) for k in ndcg_k.split(","))
    report, rankings = evaluate_retrieval(
        model, docs[:query_count], docs[query_count:], k_values=ks
    )
    with open(os.path.join(run_dir, "ranking.jsonl"), "w", encoding="utf-8") as fh:
        for row in rankings:
            fh.write(json.dumps(row, separators=(",", ":")) + "\n")
    with open(os.path.join(run_dir, "metrics.json"), "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
    click.echo(f"MAP={report.map_score:.4f} " +
               " ".join(f"NDCG@{k}={v:.4f}" for k, v in report.ndcg.items()))


if __name__ == "__main__":
    main()
