"""Acceptance gate: one test per criterion, each printing a pass/fail line.

The learnability criteria (07-10) share a module-scoped 200-document corpus
and a 300-step pre-training run; expect several minutes of CPU time.
"""

import copy
import json
import math
import os
import time

import numpy as np
import pytest
import torch
import yaml
from click.testing import CliRunner

from docrep.cli import main as cli_main
from docrep.config import IGNORE_INDEX, ModelConfig, SyntheticSpec, TrainConfig
from docrep.corpus import generate_synthetic_corpus
from docrep.embedder import AblationMask
from docrep.encoder import Encoder
from docrep.finetune_eval import (
    average_precision,
    evaluate_retrieval,
    evaluate_token_labeling,
    extract_embedding,
    finetune,
    ndcg_at_k,
    weighted_prf,
)
from docrep.model import build_model
from docrep.pretrain import (
    build_dsp_batch,
    build_dtm_batch,
    build_mvlm_batch,
    compute_task_loss,
    mvlm_clf_loss,
    soft_cross_entropy,
)
from docrep.topics import fit_lda, infer_topics
from docrep.trainer import Pretrainer
from docrep.vision import roi_pool, scale_bbox
from tests.conftest import TINY
from tests.test_encoder import DenseTransformerLayer, enc_cfg
from tests.test_finetune_eval import prf_oracle


def criterion(num, desc, passed):
    print(f"\ncriterion {num:02d} [{'PASS' if passed else 'FAIL'}] {desc}")
    assert passed, f"criterion {num}: {desc}"


# ------------------------------------------------------------ shared fixtures

ACC_SPEC = dict(
    num_categories=4, pages_min=2, pages_max=4,
    tokens_per_page_min=4, tokens_per_page_max=6,
    vocab_size=64, page_width=64, page_height=80,
)
LEARN_LR = 1e-3  # desk-scale rate; the full-scale 3e-5 default is far too slow here


@pytest.fixture(scope="module")
def acc_cfg():
    return ModelConfig(**TINY)


@pytest.fixture(scope="module")
def acc_corpus(tmp_path_factory):
    spec = SyntheticSpec(num_docs=200, **ACC_SPEC)
    base = tmp_path_factory.mktemp("acceptance")
    train = generate_synthetic_corpus(spec, str(base / "train"), seed=101)
    test = generate_synthetic_corpus(spec, str(base / "test"), seed=202)
    return train, test


@pytest.fixture(scope="module")
def acc_topics(acc_corpus):
    train, _ = acc_corpus
    streams = [[t.token_id for t in d.tokens] for d in train]
    model = fit_lda(streams, vocab_size=64, num_topics=TINY["num_topics"],
                    iterations=100, seed=0)
    return {d.id: infer_topics(s, model, seed=i)
            for i, (d, s) in enumerate(zip(train, streams))}


def run_pretrain(cfg, docs, topics, tasks, seed, steps):
    tc = TrainConfig(
        steps=steps, learning_rate=LEARN_LR,
        mvlm_clf_batch=8, mvlm_clf_accum=1,
        dsp_batch=8, dsp_accum=1, dtm_batch=8, dtm_accum=1,
        tasks=tasks, seed=seed, checkpoint_interval=0,
    )
    model = build_model(cfg, seed=seed)
    runner = Pretrainer(model, docs, tc,
                        doc_topics=topics if "dtm" in tasks else None)
    history = [runner.multitask_step() for _ in range(steps)]
    return model, history


@pytest.fixture(scope="module")
def pretrained(acc_cfg, acc_corpus, acc_topics):
    train, _ = acc_corpus
    start = time.time()
    model, history = run_pretrain(
        acc_cfg, train, acc_topics, ("mvlm_clf", "dsp", "dtm"), seed=0, steps=300
    )
    return model, history, time.time() - start


@pytest.fixture(scope="module")
def clf_finetuned(pretrained, acc_corpus):
    train, _ = acc_corpus
    model = copy.deepcopy(pretrained[0])
    finetune(model, train, "classification", steps=200, batch_size=8,
             lr=LEARN_LR, seed=0)
    return model


# ------------------------------------------------------------------ criteria

def test_criterion_01_dense_attention_equivalence():
    results = []
    start = time.time()
    for precision, tol in (("single", 1e-5), ("double", 1e-10)):
        cfg = enc_cfg(window=16, precision=precision)
        torch.manual_seed(0)
        enc = Encoder(cfg).to(cfg.dtype)
        x = torch.randn(2, 8, cfg.hidden_size, dtype=cfg.dtype)
        amask = torch.ones(2, 8, dtype=torch.long)
        gmask = torch.zeros(2, 8, dtype=torch.long)
        gmask[:, 0] = 1
        with torch.no_grad():
            got = enc(x, amask, gmask)
            h = x
            for layer in enc.layers:
                h = DenseTransformerLayer(layer)(h, amask)
            expect = enc.final_norm(h)
        results.append(float((got - expect).abs().max()) <= tol)
    elapsed = time.time() - start
    criterion(1, "windowed encoder matches dense oracle (S=8, W=16)",
              all(results) and elapsed < 10)


def test_criterion_02_full_model_gradient_check(acc_corpus, acc_topics):
    train, _ = acc_corpus
    cfg = ModelConfig(**{**TINY, "hidden_size": 16, "num_heads": 2,
                         "ffn_size": 32})
    start = time.time()
    model = build_model(cfg, seed=0)
    docs = train[:2]
    batches = [
        build_mvlm_batch(docs, cfg, seed=1),
        build_dsp_batch(docs, cfg, seed=2, shuffle_prob=1.0),
        build_dtm_batch(docs, acc_topics, cfg),
    ]
    probe = None

    def loss_fn():
        nonlocal probe
        total = sum(compute_task_loss(model, tb)[0] for tb in batches)
        # route gradients through the token head too so every parameter
        # group participates
        hidden = model(batches[0].batch)
        logits = model.token_head(hidden)
        if probe is None:
            probe = torch.sin(torch.arange(logits.numel(), dtype=cfg.dtype)
                              ).reshape(logits.shape)
        return total + (logits * probe).sum() * 0.1

    loss = loss_fn()
    model.zero_grad()
    loss.backward()
    eps = 1e-5
    gen = torch.Generator().manual_seed(0)
    ok = True
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        direction = torch.randn(p.shape, generator=gen, dtype=torch.float64)
        direction /= direction.norm()
        analytic = float((p.grad * direction).sum())
        with torch.no_grad():
            p.add_(eps * direction)
            up = float(loss_fn())
            p.add_(-2 * eps * direction)
            down = float(loss_fn())
            p.add_(eps * direction)
        numeric = (up - down) / (2 * eps)
        denom = max(abs(analytic), abs(numeric), 1e-8)
        if abs(analytic - numeric) / denom > 1e-4:
            ok = False
            print(f"  gradient mismatch at {name}: "
                  f"analytic={analytic:.3e} numeric={numeric:.3e}")
    elapsed = time.time() - start
    criterion(2, "full-model finite-difference gradient check",
              ok and elapsed < 300)


def test_criterion_03_roi_pooling_oracle():
    rng = np.random.default_rng(0)
    ok = True
    for _ in range(1000):
        C = int(rng.integers(1, 4))
        H = int(rng.integers(1, 13))
        W = int(rng.integers(1, 13))
        values = torch.from_numpy(rng.normal(size=(C, H, W)))
        u = int(rng.integers(8, 200))
        v = int(rng.integers(8, 200))
        x1 = int(rng.integers(0, u))
        x2 = int(rng.integers(x1, u + 1))
        y1 = int(rng.integers(0, v))
        y2 = int(rng.integers(y1, v + 1))
        region = scale_bbox(x1, y1, x2, y2, (u, v), (W, H))
        left, top, right, bottom = region
        if not (0 <= left < right <= W and 0 <= top < bottom <= H):
            ok = False
            break
        got = roi_pool(values, region)
        for c in range(C):
            brute = max(float(values[c, i, j])
                        for i in range(top, bottom)
                        for j in range(left, right))
            if float(got[c]) != brute:
                ok = False
    criterion(3, "RoI pooling equals brute-force max; regions never empty", ok)


def test_criterion_04_soft_cross_entropy():
    torch.manual_seed(0)
    K = 30
    uniform = float(soft_cross_entropy(
        torch.zeros(2, K, dtype=torch.float64),
        torch.full((2, K), 1.0 / K, dtype=torch.float64)))
    ok = abs(uniform - math.log(K)) <= 1e-9

    logits = torch.randn(4, 9, dtype=torch.float64)
    labels = torch.randint(0, 9, (4,))
    theta = torch.zeros(4, 9, dtype=torch.float64)
    theta[torch.arange(4), labels] = 1.0
    ok &= float(soft_cross_entropy(logits, theta)) == float(
        torch.nn.functional.cross_entropy(logits, labels))

    x = torch.randn(3, 7, dtype=torch.float64, requires_grad=True)
    t = torch.softmax(torch.randn(3, 7, dtype=torch.float64), dim=-1)
    soft_cross_entropy(x, t).backward()
    analytic_ok = torch.allclose(
        x.grad, (torch.softmax(x.detach(), dim=-1) - t) / 3, atol=1e-12)
    eps = 1e-6
    base = x.detach()
    fd_ok = True
    for i in range(3):
        for j in range(7):
            up = base.clone(); up[i, j] += eps
            dn = base.clone(); dn[i, j] -= eps
            fd = (float(soft_cross_entropy(up, t))
                  - float(soft_cross_entropy(dn, t))) / (2 * eps)
            if abs(fd - float(x.grad[i, j])) > 1e-6:
                fd_ok = False
    criterion(4, "soft cross-entropy: ln K, one-hot, and gradient checks",
              ok and analytic_ok and fd_ok)


def test_criterion_05_lda_invariants():
    rng = np.random.default_rng(0)
    docs = [rng.integers(0, 40, size=int(rng.integers(10, 30))).tolist()
            for _ in range(12)]
    total = sum(len(d) for d in docs)
    conserved = True
    for iters in range(1, 6):
        model = fit_lda(docs, vocab_size=40, num_topics=4, iterations=iters,
                        seed=7)
        model.validate()
        if int(model.topic_word_counts.sum()) != total:
            conserved = False

    passes = 0
    theta_ok = True
    for seed in range(10):
        srng = np.random.default_rng(1000 + seed)
        group_a = [srng.integers(0, 32, size=30).tolist() for _ in range(8)]
        group_b = [srng.integers(32, 64, size=30).tolist() for _ in range(8)]
        model = fit_lda(group_a + group_b, vocab_size=64, num_topics=2,
                        alpha=0.1, iterations=100, seed=seed)
        tops = []
        for i, doc in enumerate(group_a + group_b):
            theta = infer_topics(doc, model, seed=i)
            if abs(theta.sum() - 1.0) > 1e-9 or (theta < 0).any():
                theta_ok = False
            tops.append(int(theta.argmax()))
        a, b = tops[:8], tops[8:]
        top_a = max(set(a), key=a.count)
        top_b = max(set(b), key=b.count)
        purity = (a.count(top_a) + b.count(top_b)) / 16
        if top_a != top_b and purity >= 0.9:
            passes += 1
    criterion(5, f"LDA count conservation, purity ({passes}/10 seeds), theta sums",
              conserved and theta_ok and passes >= 9)


def test_criterion_06_mvlm_statistics(acc_cfg, acc_corpus):
    train, _ = acc_corpus
    mask = rand = keep = total = 0
    seed = 0
    while total < 10000:
        tb = build_mvlm_batch(train[:32], acc_cfg, seed=seed, mask_prob=1.0)
        seed += 1
        ids = tb.batch.input_ids
        labels = tb.batch.mvlm_labels
        sel = labels != IGNORE_INDEX
        total += int(sel.sum())
        from docrep.config import MASK_ID
        mask += int((ids[sel] == MASK_ID).sum())
        keep += int((ids[sel] == labels[sel]).sum())
        rand += int(((ids[sel] != MASK_ID) & (ids[sel] != labels[sel])).sum())
    stats_ok = (abs(mask / total - 0.80) <= 0.02
                and abs(rand / total - 0.10) <= 0.022
                and abs(keep / total - 0.10) <= 0.022)

    # loss must be exactly invariant to logits at ignore-marker positions
    model = build_model(acc_cfg, seed=0)
    tb = build_mvlm_batch(train[:4], acc_cfg, seed=3, mask_prob=0.3)
    with torch.no_grad():
        logits = model.mvlm_head(model(tb.batch))
    labels = tb.batch.mvlm_labels
    base = float(torch.nn.functional.cross_entropy(
        logits.reshape(-1, logits.shape[-1]), labels.reshape(-1),
        ignore_index=IGNORE_INDEX))
    perturbed = logits.clone()
    perturbed[labels == IGNORE_INDEX] = 1e6
    after = float(torch.nn.functional.cross_entropy(
        perturbed.reshape(-1, perturbed.shape[-1]), labels.reshape(-1),
        ignore_index=IGNORE_INDEX))
    criterion(6, "MVLM 80/10/10 statistics and ignore-position invariance",
              stats_ok and base == after)


def test_criterion_07_dsp_learnability(pretrained, acc_cfg, acc_corpus):
    model, history, elapsed = pretrained
    _, test = acc_corpus
    model.eval()
    correct = total = 0
    with torch.no_grad():
        for i in range(0, 100, 10):
            tb = build_dsp_batch(test[i:i + 10], acc_cfg, seed=1000 + i,
                                 shuffle_prob=0.5)
            hidden = model(tb.batch, page_perms=tb.page_perms)
            pred = model.dsp_head(model.cls_hidden(hidden)).argmax(-1)
            correct += int((pred == tb.dsp_labels).sum())
            total += len(pred)
    acc = correct / total
    early = np.median([h["dsp"] for h in history[:20]])
    late = np.median([h["dsp"] for h in history[-20:]])
    criterion(7, f"DSP validation accuracy {acc:.3f} (>=0.90), "
                 f"loss {early:.3f}->{late:.3f}, {elapsed:.0f}s pretrain",
              acc >= 0.90 and late < early and elapsed < 1800)


def test_criterion_08_clf_learnability(clf_finetuned, acc_corpus):
    _, test = acc_corpus
    preds = []
    from docrep.finetune_eval import classify_document
    for doc in test[:100]:
        pred, _ = classify_document(clf_finetuned, doc)
        preds.append(pred == doc.category)
    acc = float(np.mean(preds))
    criterion(8, f"CLF validation accuracy {acc:.3f} (>=0.90, <=200 ft steps)",
              acc >= 0.90)


def test_criterion_09_retrieval(clf_finetuned, acc_corpus):
    _, test = acc_corpus
    queries, index = test[:40], test[40:200]
    report, rankings = evaluate_retrieval(clf_finetuned, queries, index,
                                          k_values=(1, 10))

    # exhaustive oracle: recompute distances, rankings, and metrics from
    # scratch with independent formulas
    index_vecs = [extract_embedding(clf_finetuned, d) for d in index]
    aps, ndcg1s, ndcg10s = [], [], []
    oracle_ok = True
    for qi, doc in enumerate(queries):
        q = extract_embedding(clf_finetuned, doc)
        dists = []
        for vec in index_vecs:
            dists.append(1.0 - float(np.dot(q, vec))
                         / (float(np.linalg.norm(q)) * float(np.linalg.norm(vec))))
        order = sorted(range(len(index)), key=lambda i: (dists[i], i))
        if [index[i].id for i in order] != rankings[qi]["ranked_ids"]:
            oracle_ok = False
        rel = [1 if index[i].category == doc.category else 0 for i in order]
        hits = [i for i, r in enumerate(rel) if r]
        aps.append(sum((j + 1) / (h + 1) for j, h in enumerate(hits)) / len(hits))
        for k, acc in ((1, ndcg1s), (10, ndcg10s)):
            dcg = sum(rel[i] / math.log2(i + 2) for i in range(min(k, len(rel))))
            ideal = sorted(rel, reverse=True)
            idcg = sum(ideal[i] / math.log2(i + 2) for i in range(min(k, len(rel))))
            acc.append(dcg / idcg if idcg else 0.0)
    oracle_ok &= abs(report.map_score - np.mean(aps)) <= 1e-9
    oracle_ok &= abs(report.ndcg[1] - np.mean(ndcg1s)) <= 1e-9
    oracle_ok &= abs(report.ndcg[10] - np.mean(ndcg10s)) <= 1e-9
    criterion(9, f"retrieval MAP {report.map_score:.3f} (>=0.85) and metric "
                 f"oracle agreement",
              report.map_score >= 0.85 and oracle_ok)


def test_criterion_10_ablation_direction(acc_cfg, acc_corpus, acc_topics):
    train, test = acc_corpus
    img_only = AblationMask.image_only()
    all_scores, mvlm_scores = [], []
    for seed in range(3):
        for tasks, scores in ((("mvlm_clf", "dsp", "dtm"), all_scores),
                              (("mvlm_clf",), mvlm_scores)):
            model, _ = run_pretrain(acc_cfg, train, acc_topics, tasks,
                                    seed=seed, steps=120)
            finetune(model, train, "token_labeling", steps=100, batch_size=8,
                     lr=LEARN_LR, seed=seed)
            report = evaluate_token_labeling(model, test[:60], ablation=img_only)
            scores.append(report.f1)
    mean_all = float(np.mean(all_scores))
    mean_mvlm = float(np.mean(mvlm_scores))
    criterion(10, f"image-only token F1: all-tasks {mean_all:.3f} >= "
                  f"MVLM+CLF-only {mean_mvlm:.3f} (3 seeds)",
              mean_all >= mean_mvlm)


def test_criterion_11_metric_oracles():
    rng = np.random.default_rng(4)
    ok = True
    for _ in range(1000):
        n = int(rng.integers(1, 25))
        k = int(rng.integers(1, 6))
        y_true = rng.integers(0, k, size=n).tolist()
        y_pred = rng.integers(0, k, size=n).tolist()
        if weighted_prf(y_true, y_pred)[:3] != prf_oracle(y_true, y_pred):
            ok = False
    ok &= abs(average_precision([1, 0, 1, 0]) - 0.8333333333333333) <= 1e-9
    ok &= ndcg_at_k([1, 0, 0, 1], 1) == 1.0
    criterion(11, "weighted P/R/F1 vs confusion-matrix oracle; AP and NDCG@1",
              ok)


def _pipeline_metrics(base):
    cfg = {
        "model": dict(TINY),
        "train": {
            "steps": 2, "learning_rate": 1e-4,
            "mvlm_clf_batch": 2, "mvlm_clf_accum": 1,
            "dsp_batch": 2, "dsp_accum": 1, "dtm_batch": 2, "dtm_accum": 1,
            "tasks": ["mvlm_clf", "dsp"], "checkpoint_interval": 0, "seed": 3,
        },
        "synthetic": {
            "num_docs": 8, "num_categories": 4, "pages_min": 2, "pages_max": 3,
            "tokens_per_page_min": 4, "tokens_per_page_max": 6,
            "vocab_size": 64, "page_width": 64, "page_height": 80,
        },
    }
    os.makedirs(base, exist_ok=True)
    config_path = os.path.join(base, "config.yaml")
    with open(config_path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(cfg, fh)
    runner = CliRunner()

    def run(args):
        result = runner.invoke(cli_main, args, catch_exceptions=False)
        assert result.exit_code == 0, result.output

    corpus_run = os.path.join(base, "corpus_run")
    run(["gen-corpus", "--config", config_path, "--run-dir", corpus_run])
    corpus = os.path.join(corpus_run, "corpus")
    pt = os.path.join(base, "pt")
    run(["pretrain", "--config", config_path, "--run-dir", pt,
         "--corpus", corpus])
    final = os.path.join(pt, "checkpoints", "final.pt")
    ft = os.path.join(base, "ft")
    run(["finetune", "--config", config_path, "--run-dir", ft,
         "--corpus", corpus, "--checkpoint", final, "--steps", "3"])
    ev = os.path.join(base, "eval")
    run(["evaluate", "--config", config_path, "--run-dir", ev,
         "--corpus", corpus, "--checkpoint", os.path.join(ft, "finetuned.pt")])
    ret = os.path.join(base, "ret")
    run(["retrieve", "--config", config_path, "--run-dir", ret,
         "--corpus", corpus, "--checkpoint", os.path.join(ft, "finetuned.pt"),
         "--query-count", "2", "--ndcg-k", "1,3"])
    return (open(os.path.join(ev, "metrics.json"), "rb").read(),
            open(os.path.join(ret, "metrics.json"), "rb").read(),
            open(os.path.join(ret, "ranking.jsonl"), "rb").read())


def test_criterion_12_pipeline_reproducibility(tmp_path):
    a = _pipeline_metrics(str(tmp_path / "a"))
    b = _pipeline_metrics(str(tmp_path / "b"))
    criterion(12, "seeded CLI pipeline is bit-identical across two runs",
              a == b)


def test_criterion_13_checkpoint_replay(acc_cfg, acc_corpus, tmp_path):
    train, _ = acc_corpus
    tc = TrainConfig(
        steps=6, learning_rate=LEARN_LR,
        mvlm_clf_batch=2, mvlm_clf_accum=1,
        dsp_batch=2, dsp_accum=1, dtm_batch=2, dtm_accum=1,
        tasks=("mvlm_clf", "dsp"), seed=9, checkpoint_interval=0,
    )
    model_a = build_model(acc_cfg, seed=9)
    runner_a = Pretrainer(model_a, train, tc)
    straight = [runner_a.multitask_step() for _ in range(6)]

    model_b = build_model(acc_cfg, seed=9)
    runner_b = Pretrainer(model_b, train, tc)
    for _ in range(3):
        runner_b.multitask_step()
    ckpt = str(tmp_path / "mid.pt")
    runner_b.save_checkpoint(ckpt)
    model_c = build_model(acc_cfg, seed=17)
    runner_c = Pretrainer(model_c, train, tc)
    runner_c.load_checkpoint(ckpt)
    resumed = [runner_c.multitask_step() for _ in range(3)]

    losses_ok = all(s == r for s, r in zip(straight[3:], resumed))
    params_ok = all(torch.equal(pa, pc)
                    for (_, pa), (_, pc) in zip(model_a.named_parameters(),
                                                model_c.named_parameters()))
    criterion(13, "checkpoint save/load replays training bit-identically",
              losses_ok and params_ok)
