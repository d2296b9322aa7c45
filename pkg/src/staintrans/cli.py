"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data/validation error,
3 numerical failure. Errors go to stderr as one ``error[...]`` line.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence


from . import __version__
from .checkpoint import CheckpointError
from .codec import read_png, write_png
from .config import build, config_hash, load_yaml, merge
from .metrics import EmbedderSpec, evaluate
from .sampler import SamplerConfig, generate, reconstruct, translate
from .schedule import (
    EtaSchedule,
    ddim_sigma,
    eta_value,
    make_linear_schedule,
    rescale_zero_terminal_snr,
    snr,
    trailing_timesteps,
)
from .synthdata import SynthParams, write_dataset
from .trainer import NumericalError, TrainConfig, load_model, train

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3

CONFIG_SECTIONS = {"synth": SynthParams, "train": TrainConfig, "sampler": None, "metrics": EmbedderSpec}
SAMPLER_KEYS = {"inversion_steps", "denoise_steps", "eta", "seed"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def load_run_config(path: str | None) -> dict[str, dict]:
    """Read a sectioned YAML run config; unknown sections or keys are rejected."""
    if not path:
        return {k: {} for k in CONFIG_SECTIONS}
    raw = load_yaml(path)
    unknown = sorted(set(raw) - set(CONFIG_SECTIONS))
    if unknown:
        raise ValueError(f"unknown config sections: {', '.join(unknown)}")
    out = {}
    for name, cls in CONFIG_SECTIONS.items():
        sec = raw.get(name) or {}
        if cls is None:
            bad = sorted(set(sec) - SAMPLER_KEYS)
            if bad:
                raise ValueError(f"unknown sampler keys: {', '.join(bad)}")
        else:
            build(cls, sec)
        out[name] = dict(sec)
    return out


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_dataclass_flags(p: argparse.ArgumentParser, cls, skip=()) -> None:
    for f in dataclasses.fields(cls):
        if f.name in skip or not f.init:
            continue
        default = f.default
        kind = type(default) if default is not dataclasses.MISSING else str
        if kind is bool:
            p.add_argument(_flag(f.name), dest=f.name, default=None,
                           type=lambda s: s.lower() in ("1", "true", "yes", "on"),
                           metavar="BOOL", help=f"(default {default})")
        else:
            p.add_argument(_flag(f.name), dest=f.name, default=None, type=kind,
                           help=f"(default {default})")


def _overrides(args, cls, skip=()) -> dict:
    return {f.name: getattr(args, f.name) for f in dataclasses.fields(cls)
            if f.init and f.name not in skip and getattr(args, f.name, None) is not None}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="staintrans", description="Diffusion stain-translation toolkit.")
    p.add_argument("--version", action="version", version=f"staintrans {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic paired dataset")
    s.add_argument("--n", type=int, required=True, help="number of pairs")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--start", type=int, default=0, help="first image id")
    s.add_argument("--config", help="YAML run config")
    _add_dataclass_flags(s, SynthParams)

    t = sub.add_parser("train", help="train the denoiser")
    t.add_argument("--config", help="YAML run config")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.add_argument("--stop-at", type=int, help="stop after this many total updates")
    _add_dataclass_flags(t, TrainConfig)

    for name, helptext in (("translate", "translate one source image"),
                           ("generate", "sample an image from noise"),
                           ("invert-roundtrip", "print inversion reconstruction MAE")):
        c = sub.add_parser(name, help=helptext)
        c.add_argument("--checkpoint", required=True)
        c.add_argument("--config", help="YAML run config")
        if name == "translate":
            c.add_argument("--input", required=True, help="source PNG")
            c.add_argument("--output", required=True, help="output PNG")
            c.add_argument("--inv-steps", type=int)
            c.add_argument("--den-steps", type=int)
            c.add_argument("--eta", help="0 | constant:v | cosine:s")
            c.add_argument("--seed", type=int)
        elif name == "generate":
            c.add_argument("--size", type=int, default=64, help="square image size in pixels")
            c.add_argument("--output", required=True, help="output PNG")
            c.add_argument("--den-steps", type=int)
            c.add_argument("--eta", help="0 | constant:v | cosine:s")
            c.add_argument("--seed", type=int, default=0)
        else:
            c.add_argument("--input", required=True, help="source PNG")
            c.add_argument("--steps", type=int, help="inversion and denoising steps")

    e = sub.add_parser("eval", help="compute SSIM/MRA/Frechet/kernel metrics")
    e.add_argument("--pred-dir", required=True)
    e.add_argument("--gt-dir", required=True)
    e.add_argument("--report", required=True, help="output JSON report")
    e.add_argument("--csv", help="per-sample SSIM CSV (default: report path with .csv)")
    e.add_argument("--config", help="YAML run config")
    _add_dataclass_flags(e, EmbedderSpec)

    sc = sub.add_parser("schedule", help="noise schedule utilities")
    ssub = sc.add_subparsers(dest="schedule_command", parser_class=_Parser)
    d = ssub.add_parser("dump", help="CSV of the schedule along a trailing plan")
    d.add_argument("--T", type=int, default=1000)
    d.add_argument("--beta-start", type=float, default=1e-4)
    d.add_argument("--beta-end", type=float, default=0.02)
    d.add_argument("--rescale", action="store_true", help="zero terminal SNR rescale")
    d.add_argument("--steps", type=int, default=10)
    d.add_argument("--eta", choices=("constant", "cosine"), default="cosine")
    d.add_argument("--eta-start", type=float, default=0.2)
    d.add_argument("--out", help="write CSV here instead of stdout")
    return p


def _sampler_config(section: dict, args) -> SamplerConfig:
    vals = merge(section, {
        "inversion_steps": getattr(args, "inv_steps", None),
        "denoise_steps": getattr(args, "den_steps", None),
        "eta": getattr(args, "eta", None),
        "seed": getattr(args, "seed", None),
    })
    eta = vals.pop("eta", None)
    cfg = SamplerConfig(**{k: int(v) for k, v in vals.items()})
    if eta is not None:
        cfg = dataclasses.replace(cfg, eta=EtaSchedule.parse(str(eta)))
    return cfg


def _sampler_tag(cfg: SamplerConfig, meta: dict) -> dict:
    return {"tool_version": __version__,
            "config_hash": config_hash({"model": meta.get("config_hash"), "sampler": dataclasses.asdict(cfg)})}


def cmd_synth(args, conf) -> int:
    sp = build(SynthParams, merge(conf["synth"], _overrides(args, SynthParams)))
    write_dataset(sp, args.n, args.out, start=args.start)
    return 0


def cmd_train(args, conf) -> int:
    cfg = build(TrainConfig, merge(conf["train"], _overrides(args, TrainConfig)))
    res = train(cfg, resume_from=args.resume, stop_at=args.stop_at)
    print(json.dumps({"checkpoint": str(res.checkpoint), "steps": res.step,
                      "final_loss": res.losses[-1] if res.losses else None,
                      "config_hash": cfg.digest()}))
    return 0


def cmd_translate(args, conf) -> int:
    model, sched, codec, meta = load_model(args.checkpoint)
    cfg = _sampler_config(conf["sampler"], args)
    out = translate(model, sched, codec, read_png(args.input), cfg)
    write_png(args.output, out, _sampler_tag(cfg, meta))
    return 0


def cmd_generate(args, conf) -> int:
    model, sched, codec, meta = load_model(args.checkpoint)
    cfg = _sampler_config(conf["sampler"], args)
    out = generate(model, sched, codec, (args.size, args.size), cfg, args.seed)
    write_png(args.output, out, _sampler_tag(cfg, meta))
    return 0


def cmd_invert_roundtrip(args, conf) -> int:
    model, sched, codec, _ = load_model(args.checkpoint)
    steps = args.steps or int(conf["sampler"].get("inversion_steps", SamplerConfig().inversion_steps))
    z0, z = reconstruct(model, sched, codec, [read_png(args.input)], steps)
    print(f"{float((z - z0).abs().mean()):.6f}")
    return 0


def _pair_files(pred_dir: Path, gt_dir: Path):
    preds = sorted(pred_dir.glob("*.png"), key=lambda p: (len(p.stem), p.stem))
    if not preds:
        raise ValueError(f"no PNG files in {pred_dir}")
    pairs = []
    for p in preds:
        stem = p.stem.removesuffix("_tgt")
        for cand in (gt_dir / f"{stem}.png", gt_dir / f"{stem}_tgt.png"):
            if cand.exists():
                pairs.append((stem, p, cand))
                break
        else:
            raise ValueError(f"no ground truth for {p.name} in {gt_dir}")
    return pairs


def cmd_eval(args, conf) -> int:
    spec = build(EmbedderSpec, merge(conf["metrics"], _overrides(args, EmbedderSpec)))
    pairs = _pair_files(Path(args.pred_dir), Path(args.gt_dir))
    ids = [s for s, _, _ in pairs]
    tag = {"tool_version": __version__,
           "config_hash": config_hash({"metrics": dataclasses.asdict(spec),
                                       "pred": str(args.pred_dir), "gt": str(args.gt_dir)})}
    rep = evaluate([read_png(p) for _, p, _ in pairs], [read_png(g) for _, _, g in pairs], ids, spec, tag)
    report = Path(args.report)
    report.parent.mkdir(parents=True, exist_ok=True)
    report.write_text(json.dumps(rep.to_dict(), indent=1, sort_keys=True) + "\n")
    csv_path = Path(args.csv) if args.csv else report.with_suffix(".csv")
    with open(csv_path, "w", newline="") as f:
        f.write(f"# staintrans {__version__} config_hash={tag['config_hash']}\n")
        w = csv.writer(f)
        w.writerow(["id", "ssim"])
        for i, v in zip(ids, rep.per_sample_ssim):
            w.writerow([i, repr(v)])
    return 0


def schedule_dump_csv(T: int, beta_start: float, beta_end: float, rescale: bool, steps: int,
                      eta_kind: str, eta_start: float) -> str:
    s = make_linear_schedule(T, beta_start, beta_end)
    if rescale:
        s = rescale_zero_terminal_snr(s)
    plan = trailing_timesteps(T, steps)
    eta = EtaSchedule(eta_kind, eta_start, 1.0 if eta_kind == "cosine" else eta_start)
    params = {"T": T, "beta_start": beta_start, "beta_end": beta_end, "rescale": rescale,
              "steps": steps, "eta": eta_kind, "eta_start": eta_start}
    buf = io.StringIO()
    buf.write(f"# staintrans {__version__} config_hash={config_hash(params)}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "beta", "alpha_bar", "snr", "sigma", "eta"])
    hops = plan.pairs()
    n = len(hops)
    for i, (t, t_prev) in enumerate(hops):
        w.writerow([t, repr(float(s.betas[t - 1])), repr(s.alpha_bar(t)), repr(snr(s, t)),
                    repr(ddim_sigma(s, t, t_prev)), repr(eta_value(eta, i / (n - 1) if n > 1 else 0.0))])
    return buf.getvalue()


def cmd_schedule(args, conf) -> int:
    if args.schedule_command != "dump":
        raise UsageError("schedule needs a subcommand: dump")
    text = schedule_dump_csv(args.T, args.beta_start, args.beta_end, args.rescale, args.steps,
                             args.eta, args.eta_start)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "translate": cmd_translate,
    "generate": cmd_generate,
    "invert-roundtrip": cmd_invert_roundtrip,
    "eval": cmd_eval,
    "schedule": cmd_schedule,
}


def _fail(code: int, kind: str, err: Any) -> int:
    msg = " ".join(str(err).split())
    print(f"error[{kind}]: {msg}", file=sys.stderr)
    return code


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError("a subcommand is required")
        if args.verbose:
            logging.basicConfig(level=logging.INFO, stream=sys.stderr)
        conf = load_run_config(getattr(args, "config", None))
        return COMMANDS[args.command](args, conf)
    except UsageError as err:
        return _fail(EXIT_USAGE, "usage", err)
    except (NumericalError, FloatingPointError) as err:
        return _fail(EXIT_NUMERIC, "numerical", err)
    except (ValueError, CheckpointError, OSError, KeyError) as err:
        return _fail(EXIT_DATA, "data", err)


if __name__ == "__main__":
    sys.exit(main())
