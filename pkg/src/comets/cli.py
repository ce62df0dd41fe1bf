"""``comets`` command line: data, training, generation, evaluation and shock experiments."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Callable

import numpy as np
import torch

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import data as cdata
from . import diffusion as cdiff
from . import gan as cgan
from . import generation as cgen
from . import metrics as cmet
from . import nn as cnn
from .seeding import substream_seed

log = logging.getLogger("comets")

EXIT_OK, EXIT_USER, EXIT_NUMERIC = 0, 2, 3


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------- config schema

def _is_int(v):
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _list_of(pred):
    return lambda v: isinstance(v, list) and all(pred(x) for x in v)


_TYPES: dict[str, Callable[[Any], bool]] = {
    "int": _is_int,
    "float": _is_num,
    "str": lambda v: isinstance(v, str),
    "bool": lambda v: isinstance(v, bool),
    "list[float]": _list_of(_is_num),
    "list[int]": _list_of(_is_int),
    "list[str]": _list_of(lambda x: isinstance(x, str)),
    "channels": _list_of(lambda x: _is_int(x) or isinstance(x, str)),
}

# key -> (type, default); ``None`` default means optional / unset
SCHEMA: dict[str, tuple[str, Any]] = {
    "seed": ("int", 0),
    "out": ("str", "runs"),
    # data
    "data.path": ("str", None),
    "data.tickers": ("list[str]", None),
    "data.start_row": ("int", 0),
    "synth.kind": ("str", "gaussian_ar"),
    "synth.channels": ("int", 5),
    "synth.length": ("int", 2000),
    "synth.frequencies": ("list[float]", None),
    "synth.phases": ("list[float]", None),
    "synth.phi": ("float", 0.8),
    "synth.sigma": ("float", 0.8),
    "preprocess.enabled": ("bool", True),
    # GAN
    "gan.P": ("int", 24),
    "gan.F": ("int", 24),
    "gan.hidden": ("int", 64),
    "gan.kernel_size": ("int", 3),
    "gan.dilations": ("list[int]", [1, 2, 4, 8, 16, 32, 64]),
    "gan.time_dim": ("int", 32),
    "gan.dropout": ("float", 0.1),
    "gan.alpha": ("float", 1.0),
    "gan.conv_channels": ("list[int]", [32, 64, 128, 256]),
    "gan.power_iters": ("int", 1),
    "gan.checkpoint": ("str", None),
    "train.lr_g": ("float", 1e-4),
    "train.lr_d": ("float", 1e-4),
    "train.batch_size": ("int", 64),
    "train.critic_steps": ("int", 5),
    "train.gen_steps": ("int", 1000),
    "train.eval_every": ("int", 50),
    "train.holdout_fraction": ("float", 0.1),
    # diffusion
    "diffusion.F": ("int", 24),
    "diffusion.hidden": ("int", 64),
    "diffusion.dilations": ("list[int]", [1, 2, 4, 8]),
    "diffusion.T": ("int", 100),
    "diffusion.beta_start": ("float", None),
    "diffusion.beta_end": ("float", None),
    "diffusion.lr": ("float", 1e-3),
    "diffusion.batch_size": ("int", 64),
    "diffusion.steps": ("int", 2000),
    "diffusion.log_every": ("int", 50),
    "diffusion.stride": ("int", 1),
    "diffusion.checkpoint": ("str", None),
    # generation
    "generate.mode": ("str", "rollout"),
    "generate.total_steps": ("int", 9360),
    "generate.start_minute": ("int", 0),
    "generate.count": ("int", 64),
    "generate.w": ("list[float]", [0.0]),
    "generate.critic_mode": ("str", "zero_past"),
    "generate.critic_steps": ("int", 300),
    # evaluation
    "eval.real": ("str", None),
    "eval.synthetic": ("str", None),
    "eval.window": ("int", 390),
    "eval.stride": ("int", None),
    "eval.disc_window": ("int", 24),
    "eval.disc_steps": ("int", 500),
    "eval.figures_data": ("bool", False),
    # perturbation
    "perturb.channels": ("channels", [0]),
    "perturb.t_start": ("int", 100),
    "perturb.t_end": ("int", 200),
    "perturb.intensities": ("list[float]", [0.0, 1.0, 2.0]),
    "perturb.seeds": ("int", 10),
    "perturb.pad": ("int", 0),
    "perturb.total_steps": ("int", 390),
}


def _flatten(doc: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in doc.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def load_config(path: str | None, overrides: dict | None = None) -> dict:
    """Read a TOML config into a flat dotted-key dict, validated against ``SCHEMA``."""
    raw: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = _flatten(tomllib.loads(p.read_text(encoding="utf-8")))
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from None
    raw.update(overrides or {})
    unknown = sorted(set(raw) - set(SCHEMA))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    cfg = {}
    for key, (typ, default) in SCHEMA.items():
        if key in raw:
            v = raw[key]
            if typ == "float" and _is_int(v):
                v = float(v)
            if typ == "list[float]" and _is_num(v):
                v = [float(v)]
            if not _TYPES[typ](v):
                raise ConfigError(f"config key {key} expects {typ}, got {v!r}")
            cfg[key] = v
        else:
            cfg[key] = default
    if os.environ.get("COMETS_SEED"):
        try:
            cfg["seed"] = int(os.environ["COMETS_SEED"])
        except ValueError:
            raise ConfigError("COMETS_SEED must be an integer") from None
    if not 0 <= cfg["seed"] < 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    return cfg


# --------------------------------------------------------------------------- io helpers

def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def _write_json(path: Path, doc) -> None:
    _atomic_write(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _need_file(path: str | None, what: str) -> Path:
    if not path:
        raise ConfigError(f"{what} path is not configured")
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what} not found: {path}")
    return p


def _load_series(cfg: dict) -> cdata.MultivariateSeries:
    p = _need_file(cfg["data.path"], "dataset")
    if cfg["data.tickers"]:
        return cdata.ingest_csv(p, cfg["data.tickers"])
    return cdata.read_series_csv(p)


def _model_space(cfg: dict, out: Path) -> tuple[cdata.MultivariateSeries, cdata.PreprocessState | None]:
    """Load the dataset and map stock layouts to returns/scaled volumes (state saved under ``out``)."""
    series = _load_series(cfg)
    if not cfg["preprocess.enabled"] or not (
        series.channels_of(cdata.ChannelKind.PRICE) or series.channels_of(cdata.ChannelKind.VOLUME)
    ):
        return series, None
    state = cdata.fit_preprocess(series)
    _write_json(out / "preprocess.json", state.to_json())
    return cdata.apply_preprocess(series, state), state


def _read_state(out: Path) -> cdata.PreprocessState | None:
    p = out / "preprocess.json"
    return cdata.PreprocessState.from_json(json.loads(p.read_text())) if p.is_file() else None


def _gan_configs(cfg: dict, C: int, seed: int):
    gc = cgan.GeneratorConfig(
        cfg["gan.P"], cfg["gan.F"], C, hidden=cfg["gan.hidden"], kernel_size=cfg["gan.kernel_size"],
        dilations=tuple(cfg["gan.dilations"]), time_dim=cfg["gan.time_dim"], dropout=cfg["gan.dropout"],
    )
    cc = cgan.CriticConfig(
        cfg["gan.P"], cfg["gan.F"], C, conv_channels=tuple(cfg["gan.conv_channels"]),
        alpha=cfg["gan.alpha"], time_dim=cfg["gan.time_dim"], dropout=cfg["gan.dropout"],
        power_iters=cfg["gan.power_iters"],
    )
    tc = cgan.GanTrainConfig(
        lr_g=cfg["train.lr_g"], lr_d=cfg["train.lr_d"], batch_size=cfg["train.batch_size"],
        critic_steps=cfg["train.critic_steps"], gen_steps=cfg["train.gen_steps"], seed=seed,
        eval_every=cfg["train.eval_every"], holdout_fraction=cfg["train.holdout_fraction"],
    )
    return gc, cc, tc


def _gan_path(cfg: dict, out: Path) -> Path:
    return Path(cfg["gan.checkpoint"]) if cfg["gan.checkpoint"] else out / "gan.ckpt"


def _diff_path(cfg: dict, out: Path) -> Path:
    return Path(cfg["diffusion.checkpoint"]) if cfg["diffusion.checkpoint"] else out / "diffusion.ckpt"


def _schedule(cfg: dict) -> cdiff.NoiseSchedule:
    return cdiff.NoiseSchedule.linear(cfg["diffusion.T"], cfg["diffusion.beta_start"], cfg["diffusion.beta_end"])


# --------------------------------------------------------------------------- commands

def cmd_synth_data(cfg: dict, out: Path, args) -> None:
    spec = cdata.SyntheticDatasetSpec(
        cfg["synth.kind"], cfg["synth.channels"], cfg["synth.length"], cfg["seed"],
        cfg["synth.frequencies"], cfg["synth.phases"], cfg["synth.phi"], cfg["synth.sigma"],
    )
    series = cdata.generate(spec)
    path = out / "data.csv"
    cdata.write_series_csv(series, path)
    _write_json(out / "data.manifest.json", {
        "kind": spec.kind, "channels": spec.channels, "length": spec.length, "seed": spec.seed,
        "phi": spec.phi, "sigma": spec.sigma, "frequencies": list(spec.frequencies or []) or None,
        "phases": list(spec.phases or []) or None, "sha256": _sha256(path),
    })
    log.info("wrote %s (%d x %d)", path, series.T, series.C)


def cmd_ingest(cfg: dict, out: Path, args) -> None:
    series = _load_series(cfg)
    path = out / "ingested.csv"
    cdata.write_series_csv(series, path)
    if series.channels_of(cdata.ChannelKind.PRICE):
        state = cdata.fit_preprocess(series)
        _write_json(out / "preprocess.json", state.to_json())
    log.info("ingested %d rows x %d channels", series.T, series.C)


def cmd_train_gan(cfg: dict, out: Path, args) -> None:
    series, _ = _model_space(cfg, out)
    gc, cc, tc = _gan_configs(cfg, series.C, cfg["seed"])
    pairs = cdata.segment(series, gc.P, gc.F)
    model, records = cgan.train_gan(pairs, gc, cc, tc, callbacks=[lambda r: log.info("%s", json.dumps(r))])
    ck = _gan_path(cfg, out)
    ck.parent.mkdir(parents=True, exist_ok=True)
    model.save(ck)
    cgan.write_log(records, out / "gan_log.ndjson")
    log.info("saved %s", ck)


def cmd_train_diffusion(cfg: dict, out: Path, args) -> None:
    series, _ = _model_space(cfg, out)
    ec = cdiff.EpsNetConfig(cfg["diffusion.F"], series.C, hidden=cfg["diffusion.hidden"],
                            dilations=tuple(cfg["diffusion.dilations"]))
    windows = cmet.cut_windows(series.values, ec.F, cfg["diffusion.stride"])
    if len(windows) == 0:
        raise ConfigError(f"dataset shorter than one {ec.F}-row window")
    tc = cdiff.DiffusionTrainConfig(cfg["diffusion.lr"], cfg["diffusion.batch_size"], cfg["diffusion.steps"],
                                    cfg["seed"], cfg["diffusion.log_every"])
    model, records = cdiff.train_diffusion(windows, ec, _schedule(cfg), tc)
    ck = _diff_path(cfg, out)
    ck.parent.mkdir(parents=True, exist_ok=True)
    model.save(ck)
    cgan.write_log(records, out / "diffusion_log.ndjson")
    log.info("saved %s", ck)


def _columns_for(cfg: dict, out: Path, C: int) -> list[cdata.ChannelMeta]:
    if cfg["data.path"] and Path(cfg["data.path"]).is_file():
        meta = _load_series(cfg).channel_meta
        if len(meta) == C:
            return list(meta)
    return cdata.raw_layout(C)


def _starting_window(cfg: dict, out: Path, P: int, C: int) -> np.ndarray:
    if cfg["data.path"]:
        series, _ = _model_space(cfg, out) if cfg["preprocess.enabled"] else (_load_series(cfg), None)
        s = cfg["data.start_row"]
        if series.C != C or s + P > series.T:
            raise ConfigError("dataset cannot supply a starting window for this checkpoint")
        return series.values[s : s + P]
    return np.zeros((P, C))


def _as_raw_columns(series: cdata.MultivariateSeries) -> cdata.MultivariateSeries:
    """Model-space values under raw column names (``AAA_mid_z``), so the CSV reads back."""
    meta = [m if m.kind is cdata.ChannelKind.RAW else cdata.ChannelMeta(m.column + "_z", cdata.ChannelKind.RAW)
            for m in series.channel_meta]
    return cdata.MultivariateSeries(series.values, meta, series.timestamps, series.minute_offset)


def cmd_generate(cfg: dict, out: Path, args) -> None:
    mode = cfg["generate.mode"]
    if mode == "rollout":
        model = cgan.GanModel.load(_need_file(str(_gan_path(cfg, out)), "GAN checkpoint"))
        g = model.gen_cfg
        rc = cgen.RolloutConfig(cfg["generate.total_steps"], cfg["seed"], _starting_window(cfg, out, g.P, g.channels),
                                cfg["generate.start_minute"], _columns_for(cfg, out, g.channels))
        res = cgen.rollout(model, rc, state=_read_state(out))
        cdata.write_series_csv(_as_raw_columns(res.series), out / "rollout.csv")
        if res.raw is not None:
            cdata.write_series_csv(res.raw, out / "rollout_raw.csv")
        log.info("rollout: %d rows from %d generator calls", res.series.T, res.calls)
        return
    if mode not in ("diffusion", "guided"):
        raise ConfigError(f"generate.mode must be rollout, diffusion or guided, got {mode!r}")
    dpath = _need_file(str(_diff_path(cfg, out)), "diffusion checkpoint")
    model = cdiff.DiffusionModel.load(dpath)
    sched = model.schedule
    count, seed = cfg["generate.count"], cfg["seed"]
    columns = [m.column for m in _columns_for(cfg, out, model.cfg.channels)]
    base = {"checkpoint_sha256": cdiff.file_checksum(dpath), "schedule": sched.to_json(), "seed": seed}
    if mode == "diffusion":
        x = cdiff.sample_unguided(model, sched, count, seed)
        cdiff.write_sample_dump(x, out / "samples", {**base, "w": 0.0, "guided": False}, columns)
        return
    critic = None
    cmode = cfg["generate.critic_mode"]
    if any(w != 0.0 for w in cfg["generate.w"]):
        critic = _guidance_critic(cfg, out, model, cmode)
    for w in cfg["generate.w"]:
        gcfg = cdiff.GuidanceConfig(w, critic, cmode)
        try:
            gcfg.validate(model.cfg.F, model.cfg.channels)
        except cdiff.GuidanceError as e:
            raise ConfigError(str(e)) from None
        x = cdiff.sample_guided(model, sched, gcfg, count, seed)
        cdiff.write_sample_dump(x, out / f"guided_w{w:+g}", {**base, "w": w, "guided": True, "critic_mode": cmode},
                                columns)
        log.info("guided samples with w=%g written", w)


def _guidance_critic(cfg: dict, out: Path, model: cdiff.DiffusionModel, mode: str) -> cgan.Critic:
    if mode == "zero_past":
        gan = cgan.GanModel.load(_need_file(str(_gan_path(cfg, out)), "GAN checkpoint"))
        return gan.critic
    if mode != "unconditional":
        raise ConfigError(f"generate.critic_mode must be zero_past or unconditional, got {mode!r}")
    series, _ = _model_space(cfg, out)
    real = cmet.cut_windows(series.values, model.cfg.F)
    fake = cdiff.sample_unguided(model, model.schedule, max(len(real), 64), substream_seed(cfg["seed"], "critic-fit"))
    cc = cgan.CriticConfig(0, model.cfg.F, model.cfg.channels, conv_channels=tuple(cfg["gan.conv_channels"]),
                           alpha=cfg["gan.alpha"], time_dim=cfg["gan.time_dim"], dropout=cfg["gan.dropout"])
    return cdiff.fit_unconditional_critic(real, fake.numpy(), cc, steps=cfg["generate.critic_steps"], seed=cfg["seed"])


def cmd_evaluate(cfg: dict, out: Path, args) -> None:
    real = cdata.read_series_csv(_need_file(cfg["eval.real"], "real series"))
    synth = cdata.read_series_csv(_need_file(cfg["eval.synthetic"], "synthetic series"))
    if real.columns != synth.columns:
        raise ConfigError(f"channel layouts differ: {real.columns} vs {synth.columns}")
    spec = cmet.CorrelationWindowSpec(cfg["eval.window"], cfg["eval.stride"])
    report, dists = cmet.evaluate(real, synth, spec, cfg["eval.disc_window"], cfg["seed"], cfg["eval.disc_steps"])
    _write_json(out / "report.json", report.to_json())
    if cfg["eval.figures_data"] or getattr(args, "figures_data", False):
        for name, arr in sorted(dists.items()):
            _atomic_write(out / "figures" / f"{name}.csv",
                          "value\n" + "".join(f"{float(v)!r}\n" for v in np.asarray(arr).ravel()))
    log.info("report written to %s", out / "report.json")


def cmd_perturb(cfg: dict, out: Path, args) -> None:
    model = cgan.GanModel.load(_need_file(str(_gan_path(cfg, out)), "GAN checkpoint"))
    g = model.gen_cfg
    meta = _columns_for(cfg, out, g.channels)
    names = [m.column for m in meta]
    targets = []
    for c in cfg["perturb.channels"]:
        if isinstance(c, str):
            if c not in names:
                raise ConfigError(f"target channel {c!r} not in layout {names}")
            targets.append(names.index(c))
        elif not 0 <= c < g.channels:
            raise ConfigError(f"target channel {c} out of range for {g.channels} channels")
        else:
            targets.append(c)
    spec = cgen.PerturbationSpec(tuple(targets), cfg["perturb.t_start"], cfg["perturb.t_end"], 0.0)
    try:
        spec.validate(cfg["perturb.total_steps"], g.channels)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    base = cgen.RolloutConfig(cfg["perturb.total_steps"], cfg["seed"], _starting_window(cfg, out, g.P, g.channels),
                              cfg["generate.start_minute"], meta)
    seeds = [substream_seed(cfg["seed"], "perturb", i) for i in range(cfg["perturb.seeds"])]
    real = _model_space(cfg, out)[0] if cfg["data.path"] else None
    report = cgen.reactivity_experiment(model, base, spec, cfg["perturb.intensities"], seeds, real, cfg["perturb.pad"])
    _write_json(out / "reactivity.json", report)
    log.info("reactivity report written (%d entries)", len(report))


COMMANDS = {
    "synth-data": cmd_synth_data,
    "ingest": cmd_ingest,
    "train-gan": cmd_train_gan,
    "train-diffusion": cmd_train_diffusion,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
    "perturb": cmd_perturb,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="comets", description=__doc__)
    ap.add_argument("--config", help="TOML run config (flat dotted keys)")
    ap.add_argument("--seed", type=int, help="override the config seed")
    ap.add_argument("--out", help="output directory")
    ap.add_argument("--quiet", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        if name == "evaluate":
            p.add_argument("--figures-data", action="store_true", help="dump per-figure distributions as CSV")
    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USER
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.out is not None:
            overrides["out"] = args.out
        cfg = load_config(args.config, overrides)
        if args.seed is not None:  # explicit flag beats COMETS_SEED
            cfg["seed"] = args.seed
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        torch.manual_seed(substream_seed(cfg["seed"], "global"))
        COMMANDS[args.command](cfg, out, args)
    except (cgan.TrainingAborted, cgen.RolloutAborted, cnn.NonFiniteGradient) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, cdata.SpecificationError, cdata.IngestionError, cdata.PreprocessError,
            cnn.CheckpointError, cnn.ShapeError, cdiff.GuidanceError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USER
    return EXIT_OK


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
