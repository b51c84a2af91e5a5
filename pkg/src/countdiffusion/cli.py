"""Command-line entry point: ``countdiffusion {synth,train,sample,impute,eval}``.

Every command reads an optional YAML config (``--config``), applies
``--set section.key=value`` overrides and command flags, writes its outputs
to ``--out`` (``output_dir``) and persists the resolved config there.

Exit codes: 0 success, 2 config/validation error, 3 IO error, 4 numerical
abort.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import plotting
from .config import ConfigError, RunConfig, parse_value
from .kernel import make_rng
from .metrics import evaluate
from .predictor import NumericalError, load_checkpoint, save_checkpoint, smoothed, train
from .sampler import (
    GuidanceConfigError,
    ensemble_imputations,
    generate,
    load_mask,
    make_mask,
    parse_mechanism,
    repaint_impute,
    save_mask,
)
from .synth import CountFileError, load_counts, read_header, sample_dataset, save_counts

log = logging.getLogger("countdiffusion")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


class InputFileError(OSError):
    pass


def _require_file(path, what: str) -> Path:
    if path is None:
        raise ConfigError(f"no {what} given")
    p = Path(path)
    if not p.is_file():
        raise InputFileError(f"{what} not found: {p}")
    return p


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# -- commands -----------------------------------------------------------------

def cmd_synth(cfg: RunConfig, out: Path) -> dict:
    counts, record = sample_dataset(cfg.negbin_spec(), cfg.data.n)
    save_counts(counts, out / "data.csv")
    record["zero_fraction"] = float((counts == 0).mean())
    record["max_count"] = int(counts.max())
    _write_json(out / "data_params.json", record)
    return {"data": str(out / "data.csv"), "rows": int(counts.shape[0]),
            "zero_fraction": record["zero_fraction"], "max_count": record["max_count"]}


def cmd_train(cfg: RunConfig, out: Path) -> dict:
    path = _require_file(cfg.data.path, "dataset")
    x, labels = load_counts(path)
    tc = cfg.train_config()
    model, losses = train(x, labels, tc)
    save_checkpoint(model, out / "checkpoint.json", tc.to_dict())
    sm = smoothed(losses) if len(losses) else losses
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "loss", "smoothed"])
    for i, (a, b) in enumerate(zip(losses, sm), start=1):
        w.writerow([i, repr(float(a)), repr(float(b))])
    (out / "loss_trace.csv").write_text(buf.getvalue(), encoding="utf-8")
    if cfg.eval.figures and len(losses):
        plotting.plot_loss(losses, out / "figures" / "loss.png", sm)
    summary = {"checkpoint": str(out / "checkpoint.json"), "steps": int(len(losses))}
    if len(losses):
        summary.update(initial_smoothed=float(sm[0]), final_smoothed=float(sm[-1]))
    return summary


def cmd_sample(cfg: RunConfig, out: Path, checkpoint) -> dict:
    model, _ = load_checkpoint(_require_file(checkpoint, "checkpoint"))
    samples = generate(model, cfg.sampler_config(), cfg.sample.n)
    save_counts(samples, out / "samples.csv")
    return {"samples": str(out / "samples.csv"), "rows": int(samples.shape[0])}


def cmd_impute(cfg: RunConfig, out: Path, checkpoint) -> dict:
    model, _ = load_checkpoint(_require_file(checkpoint, "checkpoint"))
    x, _ = load_counts(_require_file(cfg.data.path, "dataset"))
    if cfg.impute.mask_path:
        mask = load_mask(_require_file(cfg.impute.mask_path, "mask"))
    else:
        mech = parse_mechanism(cfg.impute.mechanism)
        mask = make_mask(x, mech, make_rng(np.random.SeedSequence([cfg.seed, 7])))
    if mask.shape != x.shape:
        raise ConfigError(f"mask shape {mask.shape} does not match data shape {x.shape}")
    save_mask(mask, out / "mask.csv")
    header = read_header(cfg.data.path)[: x.shape[1]]
    x_obs = np.where(mask.observed, x, 0)
    samples = repaint_impute(model, x_obs, mask, cfg.sampler_config(), cfg.impute.n_imputations)
    files = []
    for i, s in enumerate(samples):
        files.append(str(save_counts(s, out / f"imputed_{i}.csv", header=header)))
    summary = {"mask": str(out / "mask.csv"), "imputations": files,
               "missing_fraction": mask.missing_fraction}
    if len(samples) > 1:
        ens = ensemble_imputations(samples, make_rng(np.random.SeedSequence([cfg.seed, 11])))
        summary["ensemble"] = str(save_counts(ens, out / "imputed_ensemble.csv", header=header))
    return summary


def cmd_eval(cfg: RunConfig, out: Path, generated, reference, mask_path=None) -> dict:
    g, _ = load_counts(_require_file(generated, "generated file"))
    r, _ = load_counts(_require_file(reference, "reference file"))
    mask = None
    if mask_path is not None:
        mask = load_mask(_require_file(mask_path, "mask"))
        if g.shape != r.shape or mask.shape != r.shape:
            raise ConfigError(f"shape mismatch: generated {g.shape}, reference {r.shape}, mask {mask.shape}")
    elif g.shape[1] != r.shape[1]:
        raise ConfigError(f"shape mismatch: generated {g.shape} vs reference {r.shape}")
    rep = evaluate(g, r, cfg.eval.kernel_gamma, cfg.eval.n_projections, seed=cfg.seed, mask=mask)
    (out / "metrics.json").write_text(rep.to_json(), encoding="utf-8")
    (out / "metrics.csv").write_text(rep.to_csv(), encoding="utf-8")
    if cfg.eval.figures:
        plotting.plot_marginals(g, r, out / "figures" / "marginals.png")
        plotting.plot_variances(rep, out / "figures" / "variances.png")
    log.info("joint MMD %.6g  joint SWD %.6g", rep.joint_mmd, rep.joint_swd)
    return {"metrics": str(out / "metrics.json"), "joint_mmd": rep.joint_mmd, "joint_swd": rep.joint_swd}


# -- argument handling --------------------------------------------------------

def _flag(p, name, **kw):
    """Register ``--a_b`` together with its dashed spelling ``--a-b``."""
    names = ["--" + name]
    if "_" in name:
        names.append("--" + name.replace("_", "-"))
    p.add_argument(*names, dest=name, **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="countdiffusion",
                                     description="Diffusion models on count data.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run config")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. train.max_steps=100")
    common.add_argument("--out", help="output directory (config output_dir)")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, help="BLAS thread cap (default: all cores)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic count dataset")
    _flag(s, "n", type=int, help="number of rows")
    _flag(s, "dim", type=int)

    t = sub.add_parser("train", parents=[common], help="fit a predictor")
    _flag(t, "data", help="counts CSV")
    _flag(t, "max_steps", type=int)

    sa = sub.add_parser("sample", parents=[common], help="generate samples")
    _flag(sa, "checkpoint", required=True)
    _flag(sa, "n", type=int)
    _flag(sa, "num_steps", type=int)
    _flag(sa, "gamma", type=float)
    _flag(sa, "class_id", type=int)
    _flag(sa, "attrition", help="'none' or 'rescale:<eta>'")

    im = sub.add_parser("impute", parents=[common], help="impute masked entries")
    _flag(im, "checkpoint", required=True)
    _flag(im, "data")
    _flag(im, "mask", help="0/1 mask CSV (1 = observed)")
    _flag(im, "mechanism", help="mcar:<rate> or mnar:<rate>[:<bias>]")
    _flag(im, "n_imputations", type=int)
    _flag(im, "num_steps", type=int)
    _flag(im, "attrition")
    _flag(im, "resample", type=int, help="passes per reverse step (1 = single pass)")

    ev = sub.add_parser("eval", parents=[common], help="compare samples with a reference")
    _flag(ev, "generated", required=True)
    _flag(ev, "reference", required=True)
    _flag(ev, "mask")
    _flag(ev, "no_figures", action="store_true")
    return parser


_FLAG_KEYS = {
    "synth": {"n": "data.n", "dim": "data.dim"},
    "train": {"data": "data.path", "max_steps": "train.max_steps"},
    "sample": {"n": "sample.n", "num_steps": "sample.num_steps", "gamma": "sample.gamma",
               "class_id": "sample.class_id", "attrition": "sample.attrition"},
    "impute": {"data": "data.path", "mask": "impute.mask_path", "mechanism": "impute.mechanism",
               "n_imputations": "impute.n_imputations", "num_steps": "sample.num_steps",
               "attrition": "sample.attrition", "resample": "impute.resample"},
    "eval": {},
}


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        cfg.override(key.strip(), parse_value(value))
    for flag, key in _FLAG_KEYS[args.command].items():
        value = getattr(args, flag, None)
        if value is not None:
            cfg.override(key, value)
    if args.out is not None:
        cfg.override("output_dir", args.out)
    if args.seed is not None:
        cfg.override("seed", args.seed)
    if args.threads is not None:
        cfg.override("threads", args.threads)
    if args.command == "eval" and args.no_figures:
        cfg.override("eval.figures", False)
    return cfg


def _thread_limit(n):
    if n is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=int(n))


def run(args) -> dict:
    cfg = resolve_config(args)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write_resolved(out)
    with _thread_limit(cfg.threads):
        if args.command == "synth":
            return cmd_synth(cfg, out)
        if args.command == "train":
            return cmd_train(cfg, out)
        if args.command == "sample":
            return cmd_sample(cfg, out, args.checkpoint)
        if args.command == "impute":
            return cmd_impute(cfg, out, args.checkpoint)
        return cmd_eval(cfg, out, args.generated, args.reference, args.mask)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        summary = run(args)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CountFileError, InputFileError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, GuidanceConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
