"""Command-line entry point: ``aptm <subcommand> [options] [--key=value ...]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from . import numcore as nc
from .attributes import Vocab, annotate, default_space, render_prompts
from .datapipe import (
    HttpCaptionClient,
    HttpPoseClient,
    StubCaptionClient,
    StubPoseClient,
    load_manifest,
    recrop,
    resolve,
    run_filters,
    save_manifest,
)
from .encoders import ConfigError
from .train import RunConfig, evaluate, load_config, load_run, recognize, train

log = logging.getLogger("aptm")


def parse_overrides(extra: list[str]) -> dict:
    """``--a.b=value`` flags; values are parsed as YAML scalars."""
    out = {}
    for arg in extra:
        if not arg.startswith("--") or "=" not in arg:
            raise SystemExit(f"unrecognized argument {arg!r} (overrides take the form --key=value)")
        key, value = arg[2:].split("=", 1)
        out[key] = yaml.safe_load(value)
    return out


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="aptm", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, manifest=True):
        p.add_argument("--config", help="YAML or JSON run config")
        p.add_argument("--seed", type=int)
        if manifest:
            p.add_argument("--manifest", required=True)
        return p

    for name in ("pretrain", "finetune"):
        p = common(sub.add_parser(name, help=f"{name} on a manifest"))
        p.add_argument("--run-dir", required=True)
        p.add_argument("--resume", help="checkpoint of an interrupted run to continue")
        p.add_argument("--init", help="checkpoint whose weights start this run")
    p = common(sub.add_parser("eval", help="text-to-image retrieval metrics"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--output", help="metrics file (default: beside the checkpoint)")
    p.add_argument("--rankings", help="optional per-query ranking dump (JSON lines)")
    p = common(sub.add_parser("attr-rec", help="attribute recognition by prompt matching"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--output", help="metrics file (default: beside the checkpoint)")
    p.add_argument("--predictions", help="optional per-image predictions (JSON lines)")
    p = common(sub.add_parser("annotate", help="label captions with attribute values"))
    p.add_argument("--output", required=True)
    p.add_argument("--calibrate", action="store_true", help="pass captions through the caption client first")
    p = common(sub.add_parser("filter", help="drop small, grayscale and non-single-person images"))
    p.add_argument("--output", required=True)
    p.add_argument("--report", help="per-rule drop counts (default: <output>.report.json)")
    p.add_argument("--pose", choices=("none", "stub", "http"), default="none")
    p.add_argument("--recrop-dir", help="write person crops here and point the output manifest at them")
    common(sub.add_parser("prompts", help="print the attribute prompts"), manifest=False)
    return ap


def _config(args, overrides, mode) -> RunConfig:
    over = dict(overrides)
    if args.seed is not None:
        over["seed"] = args.seed
    over["mode"] = mode
    cfg_path = args.config
    if cfg_path is None and getattr(args, "checkpoint", None):
        snap = Path(args.checkpoint).parent / "config.yaml"
        cfg_path = snap if snap.exists() else None
    return load_config(cfg_path, over)


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def run(argv=None) -> int:
    args, extra = _parser().parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = parse_overrides(extra)
    cmd = args.command

    if cmd == "prompts":
        for p in render_prompts():
            print(p.text)
        return 0

    cfg = _config(args, overrides, cmd)

    if cmd in ("pretrain", "finetune"):
        out = train(cfg, args.manifest, args.run_dir, resume=args.resume, init=args.init)
        last = out["history"][-1].total if out["history"] else float("nan")
        print(f"{cmd}: {out['steps']} steps, final loss {last:.6f}, outputs in {out['run_dir']}")
        return 0

    if cmd == "eval":
        model, vocab, cfg = load_run(args.checkpoint, cfg)
        report, results = evaluate(model, vocab, args.manifest, cfg)
        out = Path(args.output) if args.output else Path(args.checkpoint).parent / "eval_metrics.json"
        _dump(out, report)
        if args.rankings:
            Path(args.rankings).write_text("".join(
                json.dumps({"query": r.query_id, "ranking": [[i, s, p] for i, s, p in r.rows()]}) + "\n"
                for r in results))
        print(json.dumps(report, sort_keys=True))
        return 0

    if cmd == "attr-rec":
        model, vocab, cfg = load_run(args.checkpoint, cfg)
        pred, _, metrics, records = recognize(model, vocab, args.manifest)
        space = default_space()
        metrics["excluded_attributes"] = [space.attributes[a].name for a in metrics["excluded_attributes"]]
        out = Path(args.output) if args.output else Path(args.checkpoint).parent / "attr_metrics.json"
        _dump(out, metrics)
        if args.predictions:
            Path(args.predictions).write_text("".join(
                json.dumps({"image": r.image, "attributes": space.vector_to_dict(p)}) + "\n"
                for r, p in zip(records, pred)))
        print(json.dumps({k: v for k, v in metrics.items() if k != "per_attribute_mA"}, sort_keys=True))
        return 0

    if cmd == "annotate":
        records = load_manifest(args.manifest)
        root = Path(args.manifest).parent
        client = None
        if args.calibrate:
            client = HttpCaptionClient(cfg.caption_url) if cfg.caption_url or _env("APTM_CAPTION_URL") \
                else StubCaptionClient()
        conflicts = []
        for r in records:
            if client is not None:
                r.caption = client.calibrate(str(resolve(r, root)), r.caption)
            r.attributes = annotate(r.caption, conflicts=conflicts).tolist()
        out = Path(args.output)
        for r in records:
            r.image = _rebase(r.image, root, out.parent)
        save_manifest(records, out)
        print(f"annotated {len(records)} records; {len(conflicts)} conflicting attribute mentions set unknown")
        return 0

    if cmd == "filter":
        records = load_manifest(args.manifest, check_images=False)
        root = Path(args.manifest).parent
        pose = {"none": None, "stub": StubPoseClient(),
                "http": HttpPoseClient(cfg.pose_url) if args.pose == "http" else None}[args.pose]
        kept, report = run_filters(records, root, size_threshold=cfg.filesize_threshold,
                                   gray_threshold=cfg.grayscale_threshold, pose_client=pose,
                                   workers=cfg.workers)
        out = Path(args.output)
        if args.recrop_dir and pose is not None:
            crop_dir = Path(args.recrop_dir)
            crop_dir.mkdir(parents=True, exist_ok=True)
            cropped = []
            for r in kept:
                im, why = recrop(resolve(r, root), pose)
                if im is None:
                    report.dropped[f"recrop_{why}"] += 1
                    continue
                dst = crop_dir / Path(r.image).name
                im.save(dst)
                r.image = str(dst.resolve())
                cropped.append(r)
            kept = cropped
            report.kept = len(kept)
        for r in kept:
            r.image = _rebase(r.image, root, out.parent)
        save_manifest(kept, out)
        report_path = Path(args.report) if args.report else out.with_suffix(".report.json")
        _dump(report_path, report.to_dict())
        print(json.dumps(report.to_dict(), sort_keys=True))
        return 0
    raise AssertionError(cmd)


def _env(name):
    import os
    return os.environ.get(name)


def _rebase(image: str, old_root: Path, new_root: Path) -> str:
    """Keep image paths valid when the output manifest lives in another directory."""
    p = Path(image)
    if p.is_absolute():
        return image
    if old_root.resolve() == new_root.resolve():
        return image
    return str((old_root / p).resolve())


def main(argv=None) -> None:
    try:
        code = run(argv)
    except nc.CheckpointMismatch as exc:
        print("checkpoint does not match the model configuration:", file=sys.stderr)
        for line in exc.diffs:
            print(f"  {line}", file=sys.stderr)
        code = 2
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        code = 2
    sys.exit(code)


if __name__ == "__main__":
    main()
