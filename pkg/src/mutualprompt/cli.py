"""Command-line entry point: ``mutualprompt <command> [options]``."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from importlib import metadata
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, RunConfig, dump_config, load_config
from .data import (
    ContainerError,
    DomainData,
    EmbeddingSet,
    LabeledDomain,
    export_embeddings,
    generate,
    load_dataset,
    save_dataset,
)
from .experiments import run_sweep, sweep_csv
from .gradcheck import check_model_gradients
from .trainer import (
    CHECKPOINT_FILE,
    METRICS_FILE,
    NonFiniteLossError,
    CheckpointError,
    to_tensor,
    build_model,
    confusion_matrix,
    load_checkpoint,
    restore_model,
    train,
)

OUTPUT_ROOT_ENV = "MUTUALPROMPT_OUTPUT_ROOT"
DATASET_FILE = "dataset.npz"
MANIFEST_FILE = "manifest.json"
CONFIG_SNAPSHOT = "config.yaml"

log = logging.getLogger("mutualprompt")


class CliError(Exception):
    pass


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def _resolve_out(path: str | None, default_name: str) -> Path:
    """Explicit paths are used as given; defaults live under the output root."""
    return Path(path) if path is not None else output_root() / default_name


def _package_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def run_id(cfg: RunConfig) -> str:
    digest = hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()[:10]
    return f"{cfg.mode.value}-seed{cfg.seed}-{digest}"


def _config(args) -> RunConfig:
    return load_config(args.config, args.set)


def _load_data(path: str | None, cfg: RunConfig) -> DomainData:
    if path is None:
        return generate(cfg.data)
    _, data = load_dataset(path)
    return data


def encoders_unchanged(model, cfg: RunConfig) -> bool:
    """Bitwise comparison of every encoder tensor against a fresh build."""
    fresh = build_model(cfg).encoders.state_dict()
    return all(torch.equal(t, fresh[k]) for k, t in model.encoders.state_dict().items())


# ---------------------------------------------------------------------------
# commands


def cmd_generate_data(args) -> int:
    cfg = _config(args)
    out = _resolve_out(args.out, "data")
    out.mkdir(parents=True, exist_ok=True)
    data = generate(cfg.data)
    save_dataset(out / DATASET_FILE, cfg.data, data)
    print(f"wrote {out / DATASET_FILE}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    run_dir = _resolve_out(args.out, run_id(cfg))
    run_dir.mkdir(parents=True, exist_ok=True)
    if args.resume and not (run_dir / CHECKPOINT_FILE).exists():
        raise CliError(f"--resume: no checkpoint in {run_dir}")
    dump_config(cfg, run_dir / CONFIG_SNAPSHOT)
    manifest = {
        "run_id": run_dir.name,
        "version": _package_version(),
        "mode": cfg.mode.value,
        "seeds": {"run": cfg.seed, "data": cfg.data.seed, "encoder": cfg.encoder.seed},
        "layout": {
            "config": CONFIG_SNAPSHOT,
            "metrics": METRICS_FILE,
            "checkpoint": CHECKPOINT_FILE,
            "final": "final.json",
        },
    }
    (run_dir / MANIFEST_FILE).write_text(json.dumps(manifest, indent=2) + "\n")
    data = _load_data(args.dataset, cfg)
    result = train(cfg, data=data, run_dir=run_dir, resume=args.resume)
    frozen_ok = encoders_unchanged(result.model, cfg)
    final = {**result.final, "encoders_unchanged": frozen_ok}
    (run_dir / "final.json").write_text(json.dumps(final, indent=2) + "\n")
    print(json.dumps({"run_dir": str(run_dir), **final}))
    return 0 if frozen_ok else 1


def _pick_domain(data: DomainData, which: str) -> LabeledDomain:
    if which == "target":
        if data.target is None:
            raise CliError("dataset has no target domain")
        return data.target_eval
    if which == "unseen":
        if data.unseen is None:
            raise CliError("dataset has no unseen domain")
        return data.unseen
    if which == "source":
        return data.source_eval[0]
    raise CliError(f"unknown domain {which!r}")


def _model_from_checkpoint(path: str):
    payload = load_checkpoint(path)
    cfg = RunConfig.from_dict(payload["config"])
    return restore_model(payload, cfg), cfg


def evaluate_domain(model, domain: LabeledDomain) -> dict:
    k = model.num_classes
    pred = model.predict(to_tensor(domain.images))
    cm = confusion_matrix(pred, domain.labels, k)
    totals = cm.sum(axis=1)
    per_class = [float(cm[i, i] / totals[i]) if totals[i] else float("nan") for i in range(k)]
    return {
        "domain": domain.name,
        "samples": int(cm.sum()),
        "accuracy": float(np.trace(cm) / cm.sum()),
        "per_class_accuracy": per_class,
        "mean_class_accuracy": float(np.nanmean(per_class)),
        "confusion": cm.tolist(),
    }


def cmd_eval(args) -> int:
    model, cfg = _model_from_checkpoint(args.checkpoint)
    data = _load_data(args.dataset, cfg)
    report = evaluate_domain(model, _pick_domain(data, args.domain))
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / f"eval-{args.domain}"
    out.mkdir(parents=True, exist_ok=True)
    np.savetxt(out / "confusion.csv", np.asarray(report["confusion"]), fmt="%d", delimiter=",")
    (out / "eval.json").write_text(json.dumps(report, indent=2) + "\n")
    print(json.dumps({k: report[k] for k in ("domain", "samples", "accuracy", "mean_class_accuracy")}))
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    seeds = [int(s) for s in args.seeds.split(",")]
    out = _resolve_out(args.out, "ablation.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    rows = run_sweep(
        cfg,
        seeds,
        ladder=not args.strategies_only,
        strategies=not args.ladder_only,
        progress=lambda r: log.info("%s/%s target=%s", r.table, r.row, r.target_acc),
    )
    out.write_text(sweep_csv(rows))
    print(f"wrote {out}")
    return 0


@torch.no_grad()
def dump_embeddings(model, data: DomainData) -> EmbeddingSet:
    """Pre- and post-prompting embeddings of every evaluation sample."""
    domains = [(d.name, d.images, d.labels) for d in data.source_eval]
    if data.target is not None:
        domains.append((data.target.name, data.target.images, data.target_labels))
    if data.unseen is not None:
        domains.append((data.unseen.name, data.unseen.images, data.unseen.labels))
    texts = model.encode_texts()
    v, vt, vp, sp, ys, ds = [], [], [], [], [], []
    for i, (_, images, labels) in enumerate(domains):
        x = to_tensor(images)
        enc = model.encode_images(x)
        pair = model.prompter.prompt_pair(enc, texts)
        v.append(enc.v.numpy())
        vt.append(enc.v_tilde.numpy())
        vp.append(pair.v_prime.numpy())
        sp.append(pair.s_prime.numpy())
        ys.append(np.asarray(labels, dtype=np.int64))
        ds.append(np.full(len(labels), i, dtype=np.int64))
    return EmbeddingSet(
        v=np.concatenate(v),
        v_tilde=np.concatenate(vt),
        s=texts.s.numpy(),
        s_tilde=texts.s_tilde.numpy(),
        labels=np.concatenate(ys),
        domain=np.concatenate(ds),
        domain_names=[d[0] for d in domains],
        extras={"v_prime": np.concatenate(vp), "s_prime": np.concatenate(sp)},
    )


def cmd_dump_embeddings(args) -> int:
    model, cfg = _model_from_checkpoint(args.checkpoint)
    data = _load_data(args.dataset, cfg)
    emb = dump_embeddings(model, data)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    export_embeddings(out, emb)
    print(f"wrote {len(emb)} records to {out}")
    return 0


def cmd_grad_check(args) -> int:
    cfg = _config(args)
    report = check_model_gradients(cfg, batches=args.batches, tolerance=args.tolerance)
    for line in report.lines():
        print(line)
    print(f"max relative error {report.max_error():.3e} (tolerance {report.tolerance:g})")
    return 0 if report.passed else 1


# ---------------------------------------------------------------------------


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML run config (defaults used when omitted)")
    p.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a config field by dotted path, e.g. prompter.decoder_layers=3",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mutualprompt", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="write the configured synthetic dataset")
    _add_config_args(p)
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", help="train the configured mode")
    _add_config_args(p)
    p.add_argument("--out", help="run directory")
    p.add_argument("--dataset", help="dataset container; generated from the config when omitted")
    p.add_argument("--resume", action="store_true", help="continue from the run directory's checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy and confusion matrix of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset")
    p.add_argument("--domain", default="target", choices=["target", "source", "unseen"])
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="ablation ladder and prompting-strategy sweep")
    _add_config_args(p)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--out", help="CSV path")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--ladder-only", action="store_true")
    group.add_argument("--strategies-only", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("dump-embeddings", help="pre/post prompting embeddings of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dump_embeddings)

    p = sub.add_parser("grad-check", help="finite-difference check of every loss and group")
    _add_config_args(p)
    p.add_argument("--batches", type=int, default=3)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (ConfigError, ContainerError, CliError, CheckpointError, NonFiniteLossError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
