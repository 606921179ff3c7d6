"""Command-line pipeline: label, prep, train-base, train-structure, train-context,
sample, eval, sweep and replay.

Every stage writes its artifacts plus ``run.json`` (resolved settings and tool
version) into its output directory; wall-clock timings go to ``timing.json``
so that ``run.json`` and the artifacts stay byte-reproducible. ``replay``
re-executes a ``run.json``.

Exit codes: 0 ok, 1 data error, 2 I/O error, 3 missing upstream stage,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .artifacts import load_image_batch, read_json, save_image_batch, write_json, write_pgm
from .binning import DEFAULT_BINS, BinScheme, denormalize, normalize
from .config import load_config, parse_bool, resolve
from .dataprep import SceneConfig, build_corpus, daytime_mask, filter_rain, ingest_metadata, mini_subset, write_manifest
from .diffusion import DiffusionModel, sample_partial
from .encoder import ContextNet, TokenSet, context_tokens
from .ephemeris import label_batch
from .errors import ContractError, ParseError, PipelineOrderError, SunpriorError
from .metrics import SWEEP_ALTITUDES, eval_sweep
from .records import dumps_jsonl
from .training import OptimConfig, default_generator, sweep_structure, train_base, train_context_net, train_structure_token

log = logging.getLogger("sunprior")

# stage directory -> (artifact that proves the stage ran, stage name)
STAGE_ARTIFACTS = {
    "prep": "images.spar",
    "train-base": "model.spar",
    "train-structure": "tokens.spar",
    "train-context": "context.spar",
}


def _floats(text):
    return tuple(float(x) for x in str(text).split(",") if x.strip())


def _ints(text):
    return tuple(int(x) for x in str(text).split(",") if x.strip())


def _altitude(text):
    """``"-3.5"`` in degrees or ``"norm:0.25"`` as a normalized value."""
    text = str(text).strip()
    if text.startswith("norm:"):
        return ("norm", float(text[5:]))
    return ("deg", float(text))


# option tables: key -> (converter, default, help); a default of None means required
OPTIONS = {
    "label": {
        "strict": (parse_bool, False, "abort on the first malformed or out-of-range record"),
        "keep_rain": (parse_bool, False, "keep samples tagged 'rain'"),
        "bins": (str, "", "also write normalized altitude and bin, e.g. 'a_min,-6,-4,-2,a_max'"),
        "refraction": (parse_bool, False, "add the standard refraction correction"),
        "workers": (int, 1, "labeling threads"),
    },
    "prep": {
        "seed": (int, 0, "corpus seed"),
        "per_bin": (int, 500, "scenes per bin"),
        "bins": (str, DEFAULT_BINS, "bin edges; a_min/a_max resolve to --a-min/--a-max"),
        "a_min": (float, -18.0, "lowest altitude of the synthetic range (degrees)"),
        "a_max": (float, 60.0, "highest altitude of the synthetic range (degrees)"),
        "geometry_seed": (int, 5, "fixed scene layout seed; -1 draws a layout per image"),
        "width": (int, 32, "image width"),
        "height": (int, 32, "image height"),
        "write_pgm": (parse_bool, True, "also write one PGM per image"),
    },
    "train-base": {
        "seed": (int, None, "training seed"),
        "epochs": (int, 200, "epochs"),
        "lr": (float, 1e-3, "learning rate"),
        "weight_decay": (float, 0.01, "decoupled weight decay"),
        "batch_size": (int, 32, "batch size"),
        "cond_dropout": (float, 0.1, "probability of the null caption"),
        "word_dropout": (float, 0.2, "probability of dropping the lighting word"),
        "ema_decay": (float, 0.999, "weight averaging decay; 0 disables"),
    },
    "train-structure": {
        "seed": (int, None, "training seed"),
        "epochs": (int, 5, "epochs"),
        "lr": (float, 0.005, "learning rate"),
        "weight_decay": (float, 0.01, "decoupled weight decay"),
        "batch_size": (int, 8, "batch size"),
        "tokens": (int, 1, "number of structure embeddings (1..5)"),
        "mini_fraction": (float, 0.1, "fraction of the daytime images used"),
    },
    "train-context": {
        "seed": (int, None, "training seed"),
        "epochs": (int, 5, "epochs"),
        "lr": (float, 0.005, "learning rate"),
        "weight_decay": (float, 0.01, "decoupled weight decay"),
        "batch_size": (int, 8, "batch size"),
        "centers": (int, 16, "RBF centers"),
        "resample": (parse_bool, True, "balance bins by resampling with replacement"),
    },
    "sample": {
        "seed": (int, None, "sampling seed"),
        "altitude": (_altitude, None, "degrees, or norm:<value in [0, 1]>"),
        "n": (int, 1, "images to generate"),
        "steps": (int, 30, "DDIM steps"),
        "switch_step": (int, 15, "steps conditioned on the context tokens"),
        "guidance": (float, 7.5, "classifier-free guidance scale"),
        "clamp": (parse_bool, False, "clamp altitudes outside the bin range"),
    },
    "eval": {
        "seed": (int, None, "sampling seed"),
        "altitudes": (_floats, SWEEP_ALTITUDES, "normalized altitudes, comma separated"),
        "n": (int, 64, "images per condition"),
        "steps": (int, 30, "DDIM steps"),
        "switch_step": (int, 15, "steps conditioned on the context tokens"),
        "guidance": (float, 7.5, "classifier-free guidance scale"),
        "grid": (int, 8, "images per row in the contact sheet"),
    },
    "sweep": {
        "seed": (int, None, "training and sampling seed"),
        "lrs": (_floats, (0.001, 0.005, 0.0001), "learning rates"),
        "token_counts": (_ints, (1, 2, 3, 4, 5), "token counts"),
        "epochs": (int, 5, "epochs per cell"),
        "batch_size": (int, 8, "batch size"),
        "mini_fraction": (float, 0.1, "fraction of the daytime images used"),
        "n": (int, 32, "generated images per candidate"),
    },
}

# input directories each stage reads; value is the upstream stage
INPUTS = {
    "label": {},
    "prep": {},
    "train-base": {"data": "prep"},
    "train-structure": {"data": "prep", "base": "train-base"},
    "train-context": {"data": "prep", "base": "train-base", "structure": "train-structure"},
    "sample": {"data": "prep", "base": "train-base", "structure": "train-structure", "context": "train-context"},
    "eval": {"data": "prep", "base": "train-base", "structure": "train-structure", "context": "train-context"},
    "sweep": {"data": "prep", "base": "train-base"},
}


def _check_stage(path, stage):
    p = Path(path)
    if not (p / STAGE_ARTIFACTS[stage]).is_file() or not (p / "run.json").is_file():
        raise PipelineOrderError(stage)
    return p


def _write_run(out, command, settings, timing):
    write_json(out / "run.json", {"tool": "sunprior", "version": __version__, "command": command, "config": settings})
    write_json(out / "timing.json", timing)


def _load_scheme(data):
    return BinScheme.from_json((Path(data) / "scheme.json").read_text())


def _load_scene(data):
    return SceneConfig(**read_json(Path(data) / "scene.json"))


def _load_corpus(data):
    images, _ = load_image_batch(Path(data) / "images.spar")
    alts = np.load(Path(data) / "altitudes.npy")
    return images, alts


def _optim(s):
    return OptimConfig(lr=s["lr"], weight_decay=s["weight_decay"], epochs=s["epochs"], batch_size=s["batch_size"], seed=s["seed"])


# -- stages -------------------------------------------------------------------


def cmd_label(s):
    with open(s["input"]) as fh:
        samples, errors = ingest_metadata(fh, strict=s["strict"])
    for e in errors:
        log.warning("skipped %s", e)
    if not s["keep_rain"]:
        kept = filter_rain(samples)
        log.info("removed %d rain-tagged samples", len(samples) - len(kept))
        samples = kept
    labeled, lerrs = label_batch(samples, strict=s["strict"], refraction=s["refraction"], workers=s["workers"])
    for e in lerrs:
        log.warning("record %d: %s", e.index, e.message)
    if s["bins"] and labeled:
        alts = [r.altitude_deg for r in labeled]
        scheme = BinScheme.parse(s["bins"], min(alts), max(alts))
        out = []
        for r in labeled:
            na = normalize(r.altitude_deg, scheme)
            out.append(replace(r, normalized=na.value, bin=na.bin_index))
        labeled = out
    Path(s["output"]).write_text(dumps_jsonl(labeled))
    log.info("labeled %d records (%d errors)", len(labeled), len(errors) + len(lerrs))
    return {}


def cmd_prep(s):
    out = Path(s["out"])
    scheme = BinScheme.parse(s["bins"], s["a_min"], s["a_max"])
    geo = None if s["geometry_seed"] < 0 else s["geometry_seed"]
    cfg = SceneConfig(width=s["width"], height=s["height"], geometry_seed=geo)
    corpus = build_corpus(scheme, s["per_bin"], cfg, seed=s["seed"])
    out.mkdir(parents=True, exist_ok=True)
    save_image_batch(out / "images.spar", corpus.images)
    np.save(out / "altitudes.npy", corpus.altitudes)
    (out / "scheme.json").write_text(scheme.to_json() + "\n")
    write_json(out / "scene.json", asdict(cfg))
    paths = [f"images/{i:06d}.pgm" for i in range(len(corpus))]
    if s["write_pgm"]:
        (out / "images").mkdir(exist_ok=True)
        for p, img in zip(paths, corpus.images):
            write_pgm(out / p, img)
    write_manifest(out / "manifest.csv", paths, corpus.altitudes, scheme)
    log.info("wrote %d scenes over %d bins (altitude range %s is a synthetic stand-in)", len(corpus), scheme.K, [scheme.lower, scheme.upper])
    return {}


def cmd_train_base(s):
    images, alts = _load_corpus(s["data"])
    model, rep = train_base(
        images, alts, _optim(s), cond_dropout=s["cond_dropout"], word_dropout=s["word_dropout"], ema_decay=s["ema_decay"] or None
    )
    out = Path(s["out"])
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / "model.spar")
    write_json(out / "report.json", rep.to_json())
    return {"train_seconds": rep.wall_time}


def _structure_subset(images, alts, fraction, seed):
    day = daytime_mask(alts)
    idx = np.flatnonzero(day)
    chosen = idx[mini_subset(len(idx), fraction, seed)]
    log.info("structure subset: %d of %d images are daytime (altitude > 0); using %d", len(idx), len(alts), len(chosen))
    return images[chosen], len(idx)


def cmd_train_structure(s):
    images, alts = _load_corpus(s["data"])
    model = DiffusionModel.load(Path(s["base"]) / "model.spar")
    subset, n_day = _structure_subset(images, alts, s["mini_fraction"], s["seed"])
    tokens, rep = train_structure_token(model, subset, _optim(s), s["tokens"])
    out = Path(s["out"])
    out.mkdir(parents=True, exist_ok=True)
    tokens.save(out / "tokens.spar")
    rep.extra.update({"n_daytime": n_day, "n_excluded_night": int(len(alts) - n_day)})
    write_json(out / "report.json", rep.to_json())
    return {"train_seconds": rep.wall_time}


def cmd_train_context(s):
    images, alts = _load_corpus(s["data"])
    scheme = _load_scheme(s["data"])
    model = DiffusionModel.load(Path(s["base"]) / "model.spar")
    tokens = TokenSet.load(Path(s["structure"]) / "tokens.spar")
    net = ContextNet.init(tokens.count, model.embed_dim, s["centers"], seed=s["seed"])
    net, rep = train_context_net(model, images, alts, scheme, net, _optim(s), resample=s["resample"])
    out = Path(s["out"])
    out.mkdir(parents=True, exist_ok=True)
    net.save(out / "context.spar")
    write_json(out / "report.json", rep.to_json())
    return {"train_seconds": rep.wall_time}


def _load_stack(s):
    model = DiffusionModel.load(Path(s["base"]) / "model.spar")
    tokens = TokenSet.load(Path(s["structure"]) / "tokens.spar")
    net = ContextNet.load(Path(s["context"]) / "context.spar")
    return model, tokens, net, _load_scheme(s["data"])


def cmd_sample(s):
    model, tokens, net, scheme = _load_stack(s)
    kind, value = s["altitude"]
    if kind == "norm":
        a = denormalize(value, scheme)
    else:
        a = value
    d = context_tokens(a, scheme, net, clamp=s["clamp"])
    imgs = sample_partial(model, model.context(d), model.context(tokens), s["steps"], s["switch_step"], s["guidance"], seed=s["seed"], n=s["n"])
    out = Path(s["out"])
    out.mkdir(parents=True, exist_ok=True)
    save_image_batch(out / "samples.spar", imgs, {"altitude_deg": a})
    for i, img in enumerate(imgs):
        write_pgm(out / f"sample_{i:04d}.pgm", img)
    log.info("wrote %d samples at altitude %.3f deg", len(imgs), a)
    return {}


def cmd_eval(s):
    from .plotting import contact_sheet, sweep_curves

    model, tokens, net, scheme = _load_stack(s)
    rep = eval_sweep(
        model, tokens, net, scheme, s["altitudes"], s["n"], s["seed"], _load_scene(s["data"]), s["steps"], s["switch_step"], s["guidance"]
    )
    out = Path(s["out"])
    out.mkdir(parents=True, exist_ok=True)
    body = rep.to_json()
    body["settings"]["altitude_range_deg"] = [scheme.lower, scheme.upper]
    body["settings"]["note"] = "synthetic altitude range; Frechet proxy uses handcrafted features and is not comparable to Inception FID"
    write_json(out / "report.json", body)
    header = (
        "# noise: Immerkaer blind estimator (substitute); frechet proxy: 8 handcrafted features\n"
        f"# altitude range [{scheme.lower:g}, {scheme.upper:g}] deg is a synthetic stand-in\n"
    )
    (out / "report.txt").write_text(header + rep.table())
    contact_sheet(out / "grid.png", rep.images, per_row=s["grid"])
    sweep_curves(out / "curves.png", rep)
    print(rep.table(), end="")
    return {}


def cmd_sweep(s):
    images, alts = _load_corpus(s["data"])
    model = DiffusionModel.load(Path(s["base"]) / "model.spar")
    subset, _ = _structure_subset(images, alts, s["mini_fraction"], s["seed"])
    rng = np.random.default_rng(s["seed"])
    day = images[daytime_mask(alts)]
    heldout = day[rng.permutation(len(day))[: max(2, min(len(day), s["n"]))]]
    base_cfg = OptimConfig(epochs=s["epochs"], batch_size=s["batch_size"], seed=s["seed"])
    gen = default_generator(model, n=s["n"], seed=s["seed"])
    best, rows = sweep_structure(model, subset, heldout, s["lrs"], s["token_counts"], base_cfg, gen)
    out = Path(s["out"])
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lr", "token_count", "proxy_fid", "final_loss"])
        for lr, m, fid, loss in rows:
            w.writerow([lr, m, f"{fid:.6f}", f"{loss:.6f}"])
    best.tokens.save(out / "tokens.spar", {"lr": best.lr})
    log.info("best: lr=%g tokens=%d", best.lr, best.tokens.count)
    return {}


COMMANDS = {
    "label": cmd_label,
    "prep": cmd_prep,
    "train-base": cmd_train_base,
    "train-structure": cmd_train_structure,
    "train-context": cmd_train_context,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
}


def execute(command, settings):
    """Run one stage from fully resolved settings; writes run.json unless labeling."""
    for key, stage in INPUTS[command].items():
        _check_stage(settings[key], stage)
    start = time.perf_counter()
    timing = COMMANDS[command](settings)
    if command != "label":
        timing["wall_seconds"] = time.perf_counter() - start
        _write_run(Path(settings["out"]), command, settings, timing)


def _jsonable(settings):
    return {k: list(v) if isinstance(v, tuple) else v for k, v in settings.items()}


def build_parser():
    p = argparse.ArgumentParser(prog="sunprior", description="Solar-altitude illumination prior for a toy diffusion model.")
    p.add_argument("--version", action="version", version=f"sunprior {__version__}")
    p.add_argument("--log-level", default="INFO")
    sub = p.add_subparsers(dest="command", required=True)
    for name, opts in OPTIONS.items():
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="key-value config file with a [%s] section" % name)
        if name == "label":
            sp.add_argument("input")
            sp.add_argument("output")
        else:
            sp.add_argument("--out", required=True)
        for key in INPUTS[name]:
            sp.add_argument(f"--{key}", required=True, help=f"output directory of '{INPUTS[name][key]}'")
        for key, (conv, default, help_) in opts.items():
            flag = "--" + key.replace("_", "-")
            if conv is parse_bool:
                sp.add_argument(flag, dest=key, type=parse_bool, nargs="?", const=True, default=None, help=help_)
            else:
                sp.add_argument(flag, dest=key, type=conv, default=None, help=help_)
    rp = sub.add_parser("replay", help="re-run a stage from its run.json")
    rp.add_argument("run_json")
    rp.add_argument("--out", help="write to this directory instead of the recorded one")
    return p


def resolve_settings(args):
    name = args.command
    opts = OPTIONS[name]
    file_values = load_config(args.config).get(name, {}) if args.config else {}
    defaults = {k: d for k, (_, d, _) in opts.items()}
    cli = {k: getattr(args, k) for k in opts}
    s = resolve({k: c for k, (c, _, _) in opts.items()}, defaults, file_values, cli)
    missing = [k for k, v in s.items() if v is None]
    if missing:
        raise ContractError("missing required setting(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))
    if name == "label":
        s["input"], s["output"] = args.input, args.output
    else:
        s["out"] = str(Path(args.out).resolve())
    for key in INPUTS[name]:
        s[key] = str(Path(getattr(args, key)).resolve())
    return s


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO), format="%(levelname)s %(message)s")
    try:
        if args.command == "replay":
            try:
                run = read_json(args.run_json)
            except ValueError as exc:
                raise ParseError(f"{args.run_json}: {exc}") from None
            if not isinstance(run, dict) or run.get("tool") != "sunprior" or run.get("command") not in COMMANDS:
                raise ParseError(f"{args.run_json}: not a sunprior run record")
            s = dict(run["config"])
            if args.out:
                s["out"] = str(Path(args.out).resolve())
            execute(run["command"], s)
        else:
            s = resolve_settings(args)
            execute(args.command, _jsonable(s))
    except SunpriorError as exc:
        log.error("%s", exc)
        return exc.exit_code
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
