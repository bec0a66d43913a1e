"""The acceptance gate: ten end-to-end properties, one test each.

Run with ``pytest -v tests/test_acceptance.py`` to get one pass/fail
line per criterion; each test also prints a one-line summary with the
measured values when it passes.
"""

import time

import numpy as np
import pytest

from test_descriptions import (
    GOLDEN_CAERS_BOX,
    GOLDEN_CAERS_NO_BOX,
    GOLDEN_EMOTIC_BOX,
    GOLDEN_EMOTIC_NO_BOX,
)
from test_metrics import ap_by_definition, auc_by_pair_counting
from test_training import learnable_dataset, tiny_model

from emofuse import tensor as T
from emofuse.cli import main
from emofuse.config import load_run_config, to_model_config, to_optim_config
from emofuse.data import EncodedDataset, SyntheticSpec, single_modality_ceilings, synth_generate
from emofuse.descriptions import CAERS_CLASSES, EMOTIC_CLASSES, PromptSpec, build_prompt
from emofuse.gradcheck import run_suite
from emofuse.metrics import (
    Box,
    PredictionSet,
    accuracy,
    average_precision,
    iou,
    overlap_partition,
    roc_auc,
    stratified_map_at_iou,
)
from emofuse.model import EmotionModel
from emofuse.qformer import QFormer, QFormerConfig, concat_sequence
from emofuse.tensor import Tensor
from emofuse.text import TextBatch, build_vocab
from emofuse.training import AdamW, OptimConfig, ParamGroup, fit, linear_schedule
from emofuse.vision import VisionConfig, VisionEncoder, patchify, temporal_pool


def _pass(n: int, detail: str) -> None:
    print(f"ACCEPTANCE {n:02d} PASS — {detail}")


EXPECTED_CHECKS = {
    "linear", "layer_norm", "softmax_attention", "msa", "mca", "ffn",
    "classifier_head", "cross_entropy", "bce_with_logits", "end_to_end",
}


def test_criterion_01_gradient_suite():
    results = run_suite()
    names = {r.name for r in results}
    assert names == EXPECTED_CHECKS, f"checks drifted: {names ^ EXPECTED_CHECKS}"
    worst = max(r.max_rel_err for r in results)
    total = sum(r.seconds for r in results)
    assert worst < 1e-4, {r.name: r.max_rel_err for r in results}
    assert total < 60.0, f"suite took {total:.1f}s"
    _pass(1, f"10 checks, worst rel err {worst:.2e}, {total:.1f}s")


def test_criterion_02_shape_laws():
    rng = np.random.default_rng(0)
    tried = 0
    for _ in range(12):
        patch = int(rng.choice([2, 4]))
        h = patch * int(rng.integers(2, 5))
        w = patch * int(rng.integers(2, 5))
        heads = int(rng.choice([2, 4]))
        dim = heads * int(rng.choice([4, 8]))
        n_queries = int(rng.integers(2, 7))
        text_len = int(rng.integers(3, 9))

        expected_tokens = (h // patch) * (w // patch) + 1
        assert patchify(rng.random((h, w, 3)), patch).shape == (expected_tokens - 1, patch * patch * 3)

        vis_cfg = VisionConfig(height=h, width=w, patch_size=patch, dim=dim, depth=1, num_heads=heads, dropout=0.0)
        encoder = VisionEncoder(vis_cfg, rng)
        tokens = encoder(rng.random((2, h, w, 3)))
        assert tokens.shape == (2, expected_tokens, dim)

        queries = Tensor(rng.normal(size=(n_queries, dim)))
        text = Tensor(rng.normal(size=(text_len, dim)))
        assert concat_sequence(queries, text).shape == (n_queries + text_len, dim)

        qf_cfg = QFormerConfig(
            num_queries=n_queries, dim=dim, num_blocks=2, num_heads=heads,
            attn_dropout=0.0, num_classes=3, visual_dim=dim,
        )
        qf = QFormer(qf_cfg, rng)
        visual = Tensor(rng.normal(size=(2, 5, dim)))
        batch_text = Tensor(rng.normal(size=(2, text_len, dim)))
        mask = np.ones((2, text_len), dtype=bool)
        fused = qf(queries, batch_text, mask, visual)
        assert fused.shape == (2, n_queries, dim)
        single = qf(queries, Tensor(rng.normal(size=(text_len, dim))), None, Tensor(rng.normal(size=(5, dim))))
        assert single.shape == (n_queries, dim)
        tried += 1
    assert tried >= 10
    _pass(2, f"token, concatenation, and query-shape laws held for {tried} random configs")


def test_criterion_03_temporal_pooling_exactness():
    rng = np.random.default_rng(3)
    frames = [Tensor(rng.normal(size=(6, 4)) * 10.0 ** rng.integers(-3, 4)) for _ in range(7)]
    pooled = temporal_pool(frames).data
    for seed in range(5):
        perm = np.random.default_rng(seed).permutation(len(frames))
        shuffled = temporal_pool([frames[i] for i in perm]).data
        np.testing.assert_array_equal(pooled, shuffled)

    still = Tensor(rng.normal(size=(6, 4)))
    np.testing.assert_array_equal(temporal_pool([still] * 9).data, still.data)

    a = Tensor(np.array([0.1, 7.0, -3.5]))
    b = Tensor(np.array([0.3, 9.0, 1.5]))
    np.testing.assert_array_equal(temporal_pool([a, b]).data, (a.data + b.data) / 2.0)
    _pass(3, "permutation, idempotence, and 2-frame mean all bit-exact")


def test_criterion_04_pad_masking_is_airtight():
    data, vocab = learnable_dataset(n=4)
    model = tiny_model(vocab_size=len(vocab))
    ids = np.array([[2, 3, 4, 0], [5, 0, 0, 0], [2, 2, 2, 2], [3, 0, 0, 0]])
    batch = TextBatch(ids=ids, mask=ids != 0)
    images = data.images[:4]
    before = model.forward(images, batch).data.copy()
    # poison everything the pad positions could possibly contribute
    model.text.table.data[0, :] += 1234.5
    after = model.forward(images, batch).data
    np.testing.assert_array_equal(before, after)
    _pass(4, "perturbing PAD embeddings moved the logits by exactly 0")


def test_criterion_05_metric_oracles():
    rng = np.random.default_rng(42)
    for _ in range(1000):
        m = int(rng.integers(2, 11))
        scores = rng.integers(0, 5, size=m) / 4.0
        labels = rng.integers(0, 2, size=m)
        if labels.sum() == 0:
            labels[int(rng.integers(m))] = 1
        expected_ap = ap_by_definition(scores.tolist(), labels.tolist())
        assert average_precision(scores, labels) == pytest.approx(expected_ap, abs=1e-12)
        if 0 < labels.sum() < m:
            expected_auc = auc_by_pair_counting(scores.tolist(), labels.tolist())
            assert roc_auc(scores, labels) == pytest.approx(expected_auc, abs=1e-12)

    hand = PredictionSet(np.array([[0.7, 0.3], [0.2, 0.8], [0.6, 0.4]]), np.array([0, 1, 1]))
    assert accuracy(hand) == 2.0 / 3.0
    assert iou(Box(0, 0, 10, 10), Box(0, 0, 10, 10)) == 1.0
    assert iou(Box(0, 0, 10, 10), Box(5, 0, 15, 10)) == 1.0 / 3.0  # 50 over 150
    _pass(5, "AP and AUC matched brute force on 1000 instances within 1e-12; hand cases exact")


def test_criterion_06_iou_stratification():
    boxes = [
        Box(0, 0, 10, 10), Box(5, 0, 15, 10), Box(40, 40, 50, 50),
        Box(0, 0, 4, 4), Box(1, 1, 5, 5), Box(0, 0, 8, 8),
    ]
    image_ids = ["a", "a", "a", "b", "b", "b"]
    rng = np.random.default_rng(1)
    labels = rng.integers(0, 2, size=(6, 3))
    labels[0] = 1
    pred = PredictionSet(rng.random((6, 3)), labels, boxes=boxes, image_ids=image_ids)
    # pair IoUs by hand: 1/3, 9/23, 1/4, 1/4 — everything else disjoint
    expected = {0.2: 5, 0.3: 4, 0.4: 0, 0.5: 0, 0.7: 0}
    rows = stratified_map_at_iou(pred, sorted(expected))
    assert len(rows) == 5
    for row in rows:
        assert row.n_overlapping == expected[row.threshold], f"threshold {row.threshold}"
        assert row.n_overlapping + row.n_remaining == len(pred)
        mask = overlap_partition(pred, row.threshold)
        assert int(mask.sum()) == row.n_overlapping
    _pass(6, "partition counts at {0.2,0.3,0.4,0.5,0.7} match hand counts; disjoint and exhaustive")


@pytest.fixture(scope="module")
def synthetic_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance_corpus")
    spec = SyntheticSpec(num_train=1000, num_val=200, seed=7)
    manifest = synth_generate(spec, root)
    return root, spec, manifest


def test_criterion_07_fusion_beats_single_modality(synthetic_corpus):
    root, spec, manifest = synthetic_corpus
    started = time.monotonic()
    vision_ceiling, text_ceiling = single_modality_ceilings(spec)
    ceiling = max(vision_ceiling, text_ceiling)
    assert ceiling == 0.5  # proven by exhaustive enumeration of the generator

    cfg = load_run_config(profile="synthetic")
    vocab = build_vocab([s.description for s in manifest.split("train")])
    best = {}
    for modality in ("both", "vision", "text"):
        train = EncodedDataset.from_manifest(
            manifest, "train", vocab, cfg.text_len, root=root, modality=modality
        )
        val = EncodedDataset.from_manifest(
            manifest, "val", vocab, cfg.text_len, root=root, modality=modality
        )
        model = EmotionModel(to_model_config(cfg, len(vocab), spec.num_classes), seed=cfg.seed)
        result = fit(model, train, val, to_optim_config(cfg), seed=cfg.seed)
        best[modality] = result.best_metric
    elapsed = time.monotonic() - started

    assert best["both"] >= 0.90, best
    assert best["vision"] < ceiling + 0.05, best
    assert best["text"] < ceiling + 0.05, best
    assert elapsed < 600.0, f"took {elapsed:.0f}s"
    _pass(
        7,
        f"fused {best['both']:.3f} vs vision {best['vision']:.3f} / text {best['text']:.3f} "
        f"(ceiling {ceiling}); {elapsed:.0f}s",
    )


def test_criterion_08_optimizer_contract():
    # every logged lr is base * group multiplier * linear decay
    data, vocab = learnable_dataset(n=16)
    model = tiny_model(vocab_size=len(vocab))
    cfg = OptimConfig(
        base_lr=1e-3, backbone_multiplier=0.5, vision_multiplier=0.25,
        weight_decay=0.0, max_epochs=3, patience=10, batch_size=8,
    )
    result = fit(model, data, data, cfg, seed=0)
    total_steps = 3 * 2
    multipliers = {"classifier": 1.0, "backbone": 0.5, "vision": 0.25}
    assert len(result.lr_log) == total_steps * 3
    for step, group, lr in result.lr_log:
        assert lr == 1e-3 * multipliers[group] * linear_schedule(step, total_steps)

    # a frozen vision encoder is bit-identical after training
    model = tiny_model(vocab_size=len(vocab))
    before = model.state_dict()
    fit(model, data, data, OptimConfig(
        base_lr=1e-2, max_epochs=2, patience=10, batch_size=8,
        weight_decay=0.1, freeze_vision=True,
    ), seed=0)
    after = model.state_dict()
    for name in before:
        if name.startswith("vision."):
            np.testing.assert_array_equal(after[name], before[name])

    # the scalar hand case: theta 1.0 -> ~0.9 on the first step
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = AdamW(
        [ParamGroup("classifier", 1.0, [("w", p)])],
        OptimConfig(base_lr=0.1, weight_decay=0.0, max_epochs=1),
    )
    p.grad = np.array([1.0])
    opt.step(1.0)
    assert abs(p.data[0] - 0.9) < 1e-6
    _pass(8, "lr schedule audited per step; frozen vision bit-identical; AdamW hand case within 1e-6")


def test_criterion_09_prompt_golden_bytes():
    assert build_prompt(PromptSpec(EMOTIC_CLASSES, has_bbox=True)) == GOLDEN_EMOTIC_BOX
    assert build_prompt(PromptSpec(EMOTIC_CLASSES, has_bbox=False)) == GOLDEN_EMOTIC_NO_BOX
    assert build_prompt(PromptSpec(CAERS_CLASSES, has_bbox=True)) == GOLDEN_CAERS_BOX
    assert build_prompt(PromptSpec(CAERS_CLASSES, has_bbox=False)) == GOLDEN_CAERS_NO_BOX
    _pass(9, "all four prompt variants byte-identical to their goldens")


def test_criterion_10_full_run_determinism(tmp_path):
    corpus = tmp_path / "corpus"
    rc = main(["synth", "--out", str(corpus), "--train-count", "64", "--val-count", "16", "--seed", "9"])
    assert rc == 0
    outputs = []
    for tag in ("a", "b"):
        ckpt = tmp_path / tag / "model.ckpt"
        rc = main(
            [
                "train",
                "--manifest", str(corpus / "manifest.jsonl"),
                "--checkpoint", str(ckpt),
                "--seed", "0",
                "--set", "max_epochs=3",
                "--set", "batch_size=16",
            ]
        )
        assert rc == 0
        outputs.append((ckpt.read_bytes(), ckpt.with_suffix(".history.csv").read_bytes()))
    assert outputs[0][0] == outputs[1][0], "checkpoints differ between identical runs"
    assert outputs[0][1] == outputs[1][1], "history logs differ between identical runs"
    _pass(10, "two identically-seeded runs: checkpoint and history bytes identical")
