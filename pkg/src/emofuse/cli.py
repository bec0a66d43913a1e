"""Command-line surface: describe, train, eval, gradcheck, synth.

Exit codes: 0 on success, 1 on runtime failures (endpoint unreachable,
non-finite gradients), 2 on configuration errors (unknown config keys,
contradictory flags, malformed manifests).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from .config import (
    ConfigError,
    load_run_config,
    parse_overrides,
    run_config_from_dict,
    run_config_to_dict,
    to_model_config,
    to_optim_config,
)
from .data import EncodedDataset, ManifestError, SyntheticSpec, load_image, load_manifest
from .data import sample_frames as list_clip_frames
from .data import single_modality_ceilings, synth_generate, write_manifest
from .descriptions import (
    DescriptionCache,
    DescriptionClient,
    DescriptionError,
    PromptSpec,
    build_prompt,
)
from .gradcheck import run_suite
from .metrics import Box, build_report, stratified_map_at_iou, write_predictions
from .model import (
    EmotionModel,
    load_checkpoint,
    model_config_from_dict,
    model_config_to_dict,
    save_checkpoint,
)
from .text import Vocab, build_vocab
from .training import NonFiniteGradientError, fit, predict

log = logging.getLogger(__name__)

ENDPOINT_ENV = "EMOFUSE_ENDPOINT"
API_KEY_ENV = "EMOFUSE_API_KEY"


def _overrides(args: argparse.Namespace) -> dict[str, str]:
    pairs: dict[str, str] = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got '{item}'")
        key, _, value = item.partition("=")
        pairs[key.strip()] = value.strip()
    if getattr(args, "seed", None) is not None:
        pairs["seed"] = str(args.seed)
    return pairs


def _load_config(args: argparse.Namespace):
    return load_run_config(
        path=getattr(args, "config", None),
        profile=getattr(args, "profile", None),
        overrides=_overrides(args),
    )


def _reconcile(cfg, manifest):
    """The manifest is authoritative for the task shape; the config may
    restate it but not contradict it."""
    if cfg.task_kind != manifest.task_kind:
        raise ConfigError(
            f"config task_kind={cfg.task_kind} but manifest says {manifest.task_kind}"
        )
    if cfg.num_classes and cfg.num_classes != manifest.num_classes:
        raise ConfigError(
            f"config num_classes={cfg.num_classes} but manifest has {manifest.num_classes}"
        )


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    manifest = load_manifest(args.manifest)
    _reconcile(cfg, manifest)
    root = Path(args.manifest).parent
    checkpoint_path = Path(args.checkpoint)
    checkpoint_path.parent.mkdir(parents=True, exist_ok=True)
    history_path = Path(args.history) if args.history else checkpoint_path.with_suffix(".history.csv")
    history_path.parent.mkdir(parents=True, exist_ok=True)

    epochs_done = 0
    if args.resume and checkpoint_path.exists():
        tensors, meta = load_checkpoint(checkpoint_path)
        cfg = replace(run_config_from_dict(meta["run"]), **parse_overrides(_overrides(args)))
        vocab = Vocab(tuple(meta["vocab"]))
        model = EmotionModel(model_config_from_dict(meta["model"]), seed=cfg.seed)
        model.load_state_dict(tensors)
        epochs_done = int(meta["epochs_completed"])
        print(f"resuming from {checkpoint_path} after {epochs_done} epochs")
    else:
        train_texts = [s.description for s in manifest.split("train")]
        vocab = build_vocab(train_texts, min_freq=cfg.min_freq)
        model = EmotionModel(
            to_model_config(cfg, len(vocab), manifest.num_classes), seed=cfg.seed
        )

    frames = cfg.num_frames if cfg.video else None
    train_ds = EncodedDataset.from_manifest(
        manifest, "train", vocab, cfg.text_len, root=root, num_frames=frames, modality=args.modality
    )
    val_ds = EncodedDataset.from_manifest(
        manifest, "val", vocab, cfg.text_len, root=root, num_frames=frames, modality=args.modality
    )

    optim_cfg = to_optim_config(cfg)
    if epochs_done >= optim_cfg.max_epochs:
        print(f"nothing to do: {epochs_done} epochs already completed")
        return 0

    fresh = not (args.resume and history_path.exists())
    with open(history_path, "w" if fresh else "a", encoding="utf-8") as fh:
        if fresh:
            fh.write("epoch,train_loss,lr,val_metric\n")
            fh.flush()

        def on_epoch(rec):
            fh.write(
                f"{rec.epoch + epochs_done},{rec.train_loss:.10g},{rec.lr:.10g},{rec.val_metric:.10g}\n"
            )
            fh.flush()
            print(
                f"epoch {rec.epoch + epochs_done}: loss={rec.train_loss:.4f} "
                f"val={rec.val_metric:.4f}"
            )

        result = fit(
            model,
            train_ds,
            val_ds,
            replace(optim_cfg, max_epochs=optim_cfg.max_epochs - epochs_done),
            seed=cfg.seed,
            on_epoch=on_epoch,
        )

    meta = {
        "model": model_config_to_dict(model.config),
        "run": run_config_to_dict(cfg),
        "vocab": list(vocab.tokens),
        "epochs_completed": epochs_done + len(result.history),
        "best_epoch": result.best_epoch + epochs_done,
        "best_metric": result.best_metric,
    }
    save_checkpoint(checkpoint_path, result.best_state, meta)
    print(
        f"best val metric {result.best_metric:.4f} at epoch {result.best_epoch + epochs_done}; "
        f"checkpoint written to {checkpoint_path}"
    )
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    tensors, meta = load_checkpoint(args.checkpoint)
    cfg = run_config_from_dict(meta["run"])
    vocab = Vocab(tuple(meta["vocab"]))
    model = EmotionModel(model_config_from_dict(meta["model"]), seed=cfg.seed)
    model.load_state_dict(tensors)
    manifest = load_manifest(args.manifest)
    _reconcile(cfg, manifest)
    frames = cfg.num_frames if cfg.video else None
    dataset = EncodedDataset.from_manifest(
        manifest, args.split, vocab, cfg.text_len, root=Path(args.manifest).parent,
        num_frames=frames, modality=args.modality,
    )
    pred = predict(model, dataset, cfg.batch_size)
    print(build_report(pred, manifest.task_kind).format())
    if args.predictions:
        write_predictions(args.predictions, pred)
        print(f"predictions written to {args.predictions}")
    if args.iou_strata:
        if manifest.task_kind != "multi_label":
            raise ConfigError("--iou-strata requires a multi_label manifest")
        thresholds = [float(t) for t in args.iou_strata.split(",")]
        print("threshold  overlapping(n, mAP)  remaining(n, mAP)")
        for stratum in stratified_map_at_iou(pred, thresholds):
            over = "-" if stratum.map_overlapping is None else f"{stratum.map_overlapping:.4f}"
            rest = "-" if stratum.map_remaining is None else f"{stratum.map_remaining:.4f}"
            print(
                f"{stratum.threshold:>9.2f}  {stratum.n_overlapping:>6d} {over:>8}  "
                f"{stratum.n_remaining:>6d} {rest:>8}"
            )
    return 0


def cmd_describe(args: argparse.Namespace) -> int:
    manifest = load_manifest(args.manifest)
    root = Path(args.manifest).parent
    endpoint = args.endpoint or os.environ.get(ENDPOINT_ENV)
    if not endpoint:
        raise ConfigError(f"no endpoint: pass --endpoint or set {ENDPOINT_ENV}")
    cache_path = args.cache or root / "descriptions.cache.jsonl"
    client = DescriptionClient(
        endpoint,
        api_key=os.environ.get(API_KEY_ENV),
        cache=DescriptionCache(cache_path),
    )
    pending = [s for s in manifest.samples if not s.description]
    cached_before = len(client.cache)
    for i, sample in enumerate(pending):
        prompt = build_prompt(
            PromptSpec(class_names=manifest.class_names, has_bbox=sample.box is not None)
        )
        box = Box(*sample.box) if sample.box else None
        try:
            if sample.is_video:
                frame_paths = list_clip_frames(root / sample.media, args.frames)
                record = client.describe_video([load_image(p) for p in frame_paths], prompt, box)
            else:
                record = client.describe_image(load_image(root / sample.media), prompt, box)
        except DescriptionError:
            print(f"failed after {i}/{len(pending)} new descriptions; cache kept", file=sys.stderr)
            raise
        sample.description = record.description
    out_path = args.out or args.manifest
    write_manifest(out_path, manifest)
    from_cache = len(pending) - (len(client.cache) - cached_before)
    print(
        f"described {len(pending)} samples ({from_cache} from cache); manifest written to {out_path}"
    )
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    results = run_suite(seed=args.seed if args.seed is not None else 1)
    failed = False
    for res in results:
        status = "ok" if res.max_rel_err < 1e-4 else "FAIL"
        failed |= status == "FAIL"
        print(f"{res.name:<18} max_rel_err={res.max_rel_err:.3e}  params={res.param_count:<6d} {status}")
    if failed:
        print("gradient check FAILED", file=sys.stderr)
        return 1
    print("all gradient checks passed")
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    spec = SyntheticSpec(
        num_train=args.train_count,
        num_val=args.val_count,
        image_size=args.image_size,
        seed=args.seed if args.seed is not None else 7,
    )
    manifest = synth_generate(spec, args.out)
    vision_ceiling, text_ceiling = single_modality_ceilings(spec)
    print(f"wrote {len(manifest.samples)} samples to {Path(args.out) / 'manifest.jsonl'}")
    print(
        f"single-modality Bayes ceilings: vision={vision_ceiling:.4f} text={text_ceiling:.4f} "
        f"(chance={1 / spec.num_classes:.4f})"
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="emofuse", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, config: bool = True):
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        if config:
            p.add_argument("--config", default=None, help="key=value config file")
            p.add_argument("--profile", default=None, help="named preset to start from")
            p.add_argument("--set", action="append", metavar="KEY=VALUE", help="inline config override")

    p = sub.add_parser("train", help="train a model from a manifest")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True, help="output checkpoint path")
    p.add_argument("--history", default=None, help="history CSV (default: alongside checkpoint)")
    p.add_argument("--resume", action="store_true", help="continue from an existing checkpoint")
    p.add_argument(
        "--modality", choices=("both", "vision", "text"), default="both",
        help="ablation: zero out the other modality",
    )
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest split")
    common(p, config=False)
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--modality", choices=("both", "vision", "text"), default="both")
    p.add_argument("--predictions", default=None, help="write per-sample scores as JSONL")
    p.add_argument("--iou-strata", default=None, help="comma-separated IoU thresholds")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("describe", help="fill missing descriptions via a captioning endpoint")
    common(p, config=False)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", default=None, help="output manifest (default: in place)")
    p.add_argument("--endpoint", default=None, help=f"chat-completions URL (or ${ENDPOINT_ENV})")
    p.add_argument("--cache", default=None, help="description cache JSONL")
    p.add_argument("--frames", type=int, default=8, help="frames sampled per clip")
    p.set_defaults(func=cmd_describe)

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer")
    common(p, config=False)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="generate the synthetic two-factor corpus")
    common(p, config=False)
    p.add_argument("--out", required=True)
    p.add_argument("--train-count", type=int, default=1000)
    p.add_argument("--val-count", type=int, default=200)
    p.add_argument("--image-size", type=int, default=32)
    p.set_defaults(func=cmd_synth)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ManifestError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DescriptionError, NonFiniteGradientError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
