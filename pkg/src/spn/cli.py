"""Command-line entry point.

Exit status: 0 on success, 1 on a runtime failure (message on stderr), 2 on
a usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import trainer
from .errors import ConfigError, SpnError
from .metrics import top_k_ms
from .synth import GeneratorConfig, generate_dataset, write_dataset

# flag dest -> TrainConfig key
TRAIN_OVERRIDES = {
    "epochs": int, "seed": int, "batch_size": int, "lr": float,
    "lambda_cluster": float, "lambda_l1": float, "tau": float,
    "n_prototypes": int, "dim": int, "k_topms": int,
}


def _env_seed() -> int | None:
    value = os.environ.get("SPN_SEED")
    if value is None or value == "":
        return None
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"SPN_SEED must be an integer, got {value!r}") from None


def resolve_train_config(args) -> trainer.TrainConfig:
    """flag > config file > SPN_SEED (seed only) > built-in default."""
    values = trainer.load_config(args.config) if getattr(args, "config", None) else {}
    if "seed" not in values:
        env = _env_seed()
        if env is not None:
            values["seed"] = env
    for key in TRAIN_OVERRIDES:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    return trainer.TrainConfig.from_dict(values)


def _add_train_overrides(p):
    for key, typ in TRAIN_OVERRIDES.items():
        p.add_argument("--" + key.replace("_", "-"), dest=key, type=typ, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="generate a synthetic dataset")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--n-train", type=int, default=2000)
    p.add_argument("--n-val", type=int, default=250)
    p.add_argument("--n-test", type=int, default=250)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", type=Path, default=None, help="JSON file of generator settings")

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--log", type=Path, default=None, help="per-epoch JSON-lines log")
    _add_train_overrides(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--split", default="test")
    p.add_argument("--report", required=True, type=Path)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("explain", help="export prototype explanations")
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--top-k", type=int, default=5)
    p.add_argument("--split", default="train")
    p.add_argument("--report", required=True, type=Path)

    p = sub.add_parser("ablate-reg", help="regularisation ablation grid")
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--report", required=True, type=Path)
    p.add_argument("--split", default="test")
    _add_train_overrides(p)

    p = sub.add_parser("ablate-partial", help="evaluate with a subset of prototypes")
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--criterion", required=True, choices=trainer.CRITERIA)
    p.add_argument("--keep", required=True, type=int)
    p.add_argument("--split", default="test")
    p.add_argument("--report", required=True, type=Path)

    p = sub.add_parser("ms", help="Top-K mono-semanticity of an activation file")
    p.add_argument("--activations", required=True, type=Path,
                   help="one row of pooled activations per prototype (text or JSON)")
    p.add_argument("--k", type=int, default=5)
    return parser


def read_activation_file(path: Path) -> list[np.ndarray]:
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".json":
        data = json.loads(text)
        if isinstance(data, dict):
            data = data["activations"]
        if data and not isinstance(data[0], list):
            data = [data]
        return [np.asarray(row, dtype=np.float64) for row in data]
    rows = []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        rows.append(np.asarray([float(v) for v in line.replace(",", " ").split()]))
    if not rows:
        raise ConfigError(f"{path}: no activations found")
    return rows


def _cmd_datagen(args):
    seed = args.seed if args.seed is not None else (_env_seed() or 0)
    gen = GeneratorConfig.from_dict(json.loads(args.config.read_text())) if args.config else GeneratorConfig()
    data = generate_dataset(gen, seed, {"train": args.n_train, "val": args.n_val, "test": args.n_test})
    write_dataset(data, args.out, gen, seed)
    print(f"wrote {sum(len(v) for v in data.values())} samples to {args.out}")


def _cmd_train(args):
    cfg = resolve_train_config(args)
    ckpt = trainer.train(cfg, args.data, log_path=args.log)
    trainer.save_checkpoint(ckpt, args.out)
    final = ckpt.loss_report.total if ckpt.loss_report else float("nan")
    print(f"saved {args.out} after {ckpt.epoch} epochs (total loss {final:.6f})")


def _cmd_eval(args):
    report = trainer.evaluate(trainer.load_checkpoint(args.ckpt), args.data, args.split, seed=args.seed)
    trainer.write_json(args.report, report.to_dict())
    print(f"accuracy {report.accuracy:.4f}  f1 {report.f1:.4f}  traj {report.traj_mse:.6g}  "
          f"pose {report.pose_mse:.6g}  mean top-k ms {report.mean_topk_ms:.4f}")


def _cmd_explain(args):
    table = trainer.explain(trainer.load_checkpoint(args.ckpt), args.data, args.top_k, args.split)
    trainer.write_json(args.report, table)
    print(f"explained {len(table['prototypes'])} prototypes on {args.split}")


def _cmd_ablate_reg(args):
    rows = trainer.ablate_regularizers(resolve_train_config(args), args.data, args.split)
    trainer.write_json(args.report, {"split": args.split, "rows": rows})
    for r in rows:
        print(f"cluster={r['lambda_cluster']:g} l1={r['lambda_l1']:g}  acc {r['accuracy']:.4f}  "
              f"mean top-5 ms {r['mean_topk_ms']:.4f}")


def _cmd_ablate_partial(args):
    report = trainer.ablate_partial(trainer.load_checkpoint(args.ckpt), args.data,
                                    args.criterion, args.keep, args.split)
    out = report.to_dict()
    out["criterion"] = args.criterion
    trainer.write_json(args.report, out)
    print(f"kept {report.kept_prototypes}: accuracy {report.accuracy:.4f}")


def _cmd_ms(args):
    for n, row in enumerate(read_activation_file(args.activations)):
        print(f"prototype {n}: psi={top_k_ms(row, args.k)!r}")


COMMANDS = {
    "datagen": _cmd_datagen, "train": _cmd_train, "eval": _cmd_eval, "explain": _cmd_explain,
    "ablate-reg": _cmd_ablate_reg, "ablate-partial": _cmd_ablate_partial, "ms": _cmd_ms,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except (SpnError, OSError, ValueError, KeyError) as exc:
        print(f"spn {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
