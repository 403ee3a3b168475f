"""``ppgmamba`` command line: prepare, contaminate, train-hrp, train-dpnet, denoise, eval.

Every command accepts ``--config run.json``; explicit flags override the file.
The effective configuration is written next to the command's output.

Exit codes: 0 ok, 2 usage, 3 input, 4 config, 5 data, 6 checkpoint, 1 other.
Errors print a single line ``error[<category>]: <message>`` on stderr.
Set ``PPGMAMBA_LOG`` (DEBUG, INFO, WARNING) for more or less chatter.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import data, pipeline, store
from .metrics import REPORT_KEYS, MetricReport, snr_db
from .models import DPNetConfig, HRPConfig, dpnet_forward
from .training import (CheckpointError, TrainConfig, TrainData, denoise_batch, load_checkpoint,
                       train_dpnet, train_hrp)

log = logging.getLogger("ppgmamba")

REPORT_VERSION = 1
EXIT = {"usage": 2, "input": 3, "config": 4, "data": 5, "checkpoint": 6, "internal": 1}


class CLIError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


# ---------------------------------------------------------------- run config

TRAIN_KEYS = ("lr", "batch", "hrp_epochs", "dpnet_epochs", "E_w", "lam1", "lam2", "dtype", "clip_norm",
              "micro_batch", "hrp_batch")
RUN_SCHEMA = {
    "preset": None,
    "seed": None,
    "train": TRAIN_KEYS,
    "dpnet": tuple(f.name for f in dataclasses.fields(DPNetConfig)),
    "hrp": tuple(f.name for f in dataclasses.fields(HRPConfig)),
    "data": ("column", "fs", "source", "synthetic", "subject_split", "ratios"),
    "noise": ("profile", "motion_csv", "motion_column", "motion_fs", "synthetic_motion"),
}
DEFAULTS = {
    "preset": "paper",
    "seed": 0,
    "train": {},
    "dpnet": {},
    "hrp": {},
    "data": {"column": "PLETH", "fs": 125.0, "source": "bidmc-csv", "synthetic": None,
             "subject_split": False, "ratios": [8, 1, 1]},
    "noise": {"profile": "paper-default", "motion_csv": [], "motion_column": "value",
              "motion_fs": 256.0, "synthetic_motion": False},
}


def validate_run_config(cfg: dict) -> dict:
    if not isinstance(cfg, dict):
        raise CLIError("config", "run config must be a JSON object")
    for k, v in cfg.items():
        if k not in RUN_SCHEMA:
            raise CLIError("config", f"unknown config key {k!r}; allowed: {sorted(RUN_SCHEMA)}")
        allowed = RUN_SCHEMA[k]
        if allowed is not None:
            if not isinstance(v, dict):
                raise CLIError("config", f"config section {k!r} must be an object")
            bad = sorted(set(v) - set(allowed))
            if bad:
                raise CLIError("config", f"unknown key(s) {bad} in section {k!r}; allowed: {sorted(allowed)}")
    if cfg.get("preset", "paper") not in ("paper", "desk"):
        raise CLIError("config", f"preset must be 'paper' or 'desk', got {cfg.get('preset')!r}")
    return cfg


def load_run_config(path) -> dict:
    cfg = json.loads(json.dumps(DEFAULTS))
    if path:
        try:
            user = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise CLIError("input", f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise CLIError("config", f"config file {path} is not valid JSON: {exc}") from None
        validate_run_config(user)
        for k, v in user.items():
            if isinstance(v, dict):
                cfg[k].update(v)
            else:
                cfg[k] = v
    return cfg


def set_key(cfg: dict, dotted: str, value) -> None:
    if value is None:
        return
    if "." in dotted:
        sec, key = dotted.split(".", 1)
        cfg[sec][key] = value
    else:
        cfg[dotted] = value


def train_config(cfg: dict, checkpoint_dir=None) -> TrainConfig:
    base = TrainConfig.desk() if cfg["preset"] == "desk" else TrainConfig.paper()
    try:
        dp = dataclasses.replace(base.dpnet, **cfg["dpnet"])
        hp = dataclasses.replace(base.hrp, **cfg["hrp"])
        return dataclasses.replace(base, seed=int(cfg["seed"]), checkpoint_dir=checkpoint_dir,
                                   dpnet=dp, hrp=hp, **cfg["train"])
    except (TypeError, ValueError) as exc:
        raise CLIError("config", str(exc)) from None


def echo_config(out_dir, cfg: dict, name: str = "effective_config.json") -> None:
    p = Path(out_dir)
    p.mkdir(parents=True, exist_ok=True)
    store.write_json(p / name, cfg)


# ---------------------------------------------------------------- commands

def _records_from_dir(d: Path, column: str, fs: float, source: str) -> list[data.Record]:
    if not d.is_dir():
        raise CLIError("input", f"input directory {d} does not exist")
    files = sorted(d.glob("*.csv"))
    if not files:
        raise CLIError("input", f"no .csv files in {d}")
    recs = []
    for f in files:
        try:
            r = data.ingest_csv(f, column, fs, source=source)
        except (KeyError, ValueError, OSError) as exc:
            raise CLIError("input", str(exc).strip('"')) from None
        if r.dropped:
            log.warning("%s: dropped %d unparseable rows", f.name, r.dropped)
        recs.append(r)
    return recs


def cmd_prepare(args, cfg) -> int:
    set_key(cfg, "data.synthetic", args.synthetic)
    set_key(cfg, "data.column", args.column)
    set_key(cfg, "data.fs", args.fs)
    set_key(cfg, "data.source", args.source)
    if args.subject_split:
        cfg["data"]["subject_split"] = True
    dc = cfg["data"]
    seed = int(cfg["seed"])
    ratios = tuple(dc["ratios"])
    try:
        if args.input:
            recs = _records_from_dir(Path(args.input), dc["column"], float(dc["fs"]), dc["source"])
            segs, summary = pipeline.prepare_records(recs, seed, ratios, dc["subject_split"])
        elif dc["synthetic"]:
            segs, summary = pipeline.prepare_synthetic(int(dc["synthetic"]), seed, ratios, dc["subject_split"])
        else:
            raise CLIError("usage", "prepare needs --input DIR or --synthetic N")
    except ValueError as exc:
        raise CLIError("data", str(exc)) from None
    extra = {"seed": seed, "gate": summary.to_dict(), "noise_profile": "none",
             "source": "synthetic" if not args.input else dc["source"]}
    store.write_store(args.out, segs, extra=extra)
    echo_config(args.out, cfg, "prepare_config.json")
    counts = {k: sum(s.split == k for s in segs) for k in data.SPLITS}
    print(f"prepared {len(segs)} segments ({counts['train']}/{counts['val']}/{counts['test']}) "
          f"accepted={summary.accepted} rejected={summary.rejected} {dict(summary.reasons)}")
    return 0


def _motion_records(nc: dict, seed: int) -> list[data.Record] | None:
    if nc["motion_csv"]:
        recs = []
        for p in nc["motion_csv"]:
            try:
                recs.append(data.ingest_csv(p, nc["motion_column"], float(nc["motion_fs"]), source="wrist-csv"))
            except (KeyError, ValueError, OSError) as exc:
                raise CLIError("input", str(exc).strip('"')) from None
        return pipeline.prepare_motion(recs)
    if nc["synthetic_motion"]:
        return pipeline.prepare_motion(pipeline.synthetic_motion_records(seed))
    return None


def cmd_contaminate(args, cfg) -> int:
    set_key(cfg, "noise.profile", args.noise_profile)
    if args.motion_csv:
        cfg["noise"]["motion_csv"] = list(args.motion_csv)
    set_key(cfg, "noise.motion_column", args.motion_column)
    set_key(cfg, "noise.motion_fs", args.motion_fs)
    if args.synthetic_motion:
        cfg["noise"]["synthetic_motion"] = True
    nc = cfg["noise"]
    seed = int(cfg["seed"])
    if nc["profile"] not in pipeline.PROFILES:
        raise CLIError("config", f"unknown noise profile {nc['profile']!r}; expected one of {pipeline.PROFILES}")
    motion = _motion_records(nc, seed)
    if nc["profile"] in ("paper-default", "motion-only") and motion is None:
        raise CLIError("input", f"profile {nc['profile']!r} needs --motion-csv (or --synthetic-motion)")
    segs, manifest = _read_store(args.store)
    segs, prov = pipeline.contaminate(segs, nc["profile"], seed, motion)
    out = Path(args.out or args.store)
    manifest.update({"noise_profile": nc["profile"], "noise_seed": seed})
    manifest.pop("segments", None)
    manifest.pop("counts", None)
    store.write_store(out, segs, extra=manifest)
    store.write_json(out / "noise_provenance.json", prov)
    echo_config(out, cfg, "contaminate_config.json")
    snrs = [snr_db(s.noisy, s.samples) for s in segs]
    print(f"contaminated {len(segs)} segments with profile {nc['profile']!r}; "
          f"mean input SNR {np.mean(snrs):.2f} dB")
    return 0


def _read_store(path):
    try:
        return store.read_store(path)
    except (store.StoreError, OSError) as exc:
        raise CLIError("input", str(exc)) from None


def _splits(path):
    segs, _ = _read_store(path)
    return [TrainData.from_segments(segs, s) for s in data.SPLITS]


def _json_log(path):
    path.write_text("")

    def write(row):
        with path.open("a") as fh:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
        log.info("%s", row)
    return write


def cmd_train_hrp(args, cfg) -> int:
    _train_overrides(args, cfg)
    out = Path(args.out)
    tc = train_config(cfg, str(out))
    echo_config(out, {**cfg, "effective": tc.to_dict()}, "hrp_config.json")
    tr, va, _ = _splits(args.store)
    try:
        res = train_hrp(tr, va, tc, log=_json_log(out / "hrp_log.jsonl"))
    except ValueError as exc:
        raise CLIError("data", str(exc)) from None
    print(f"HRP best epoch {res.checkpoint.epoch}: val HR-MAE {res.checkpoint.metrics['val_hr_mae']:.3f} BPM "
          f"-> {out / 'hrp_best.ckpt'}")
    return 0


def cmd_train_dpnet(args, cfg) -> int:
    if not args.hrp:
        raise CLIError("usage", "train-dpnet needs --hrp CHECKPOINT (run train-hrp first)")
    _train_overrides(args, cfg)
    out = Path(args.out)
    tc = train_config(cfg, str(out))
    hrp = _load_ckpt(args.hrp)
    if not isinstance(hrp.config, HRPConfig):
        raise CLIError("checkpoint", f"{args.hrp} is not an HRP checkpoint")
    echo_config(out, {**cfg, "effective": tc.to_dict()}, "dpnet_config.json")
    tr, va, _ = _splits(args.store)
    try:
        res = train_dpnet(tr, va, hrp, tc, log=_json_log(out / "dpnet_log.jsonl"))
    except ValueError as exc:
        raise CLIError("data", str(exc)) from None
    m = res.checkpoint.metrics
    print(f"DPNet best epoch {res.checkpoint.epoch}: val MSE {m['val_mse']:.4f}, "
          f"val HR-MAE {m['val_hr_mae']:.3f} -> {out / 'dpnet_best.ckpt'}")
    return 0


def _train_overrides(args, cfg):
    set_key(cfg, "preset", args.preset)
    set_key(cfg, "seed", args.seed)
    for key in ("lr", "batch", "hrp_batch", "micro_batch", "hrp_epochs", "dpnet_epochs", "E_w", "dtype"):
        set_key(cfg, f"train.{key}", getattr(args, key, None))


def _load_ckpt(path):
    try:
        return load_checkpoint(path)
    except FileNotFoundError as exc:
        raise CLIError("checkpoint", str(exc)) from None
    except CheckpointError as exc:
        raise CLIError("checkpoint", str(exc)) from None


def triangular_weights(n: int) -> np.ndarray:
    i = np.arange(n)
    return np.minimum(i + 1, n - i).astype(float)


def window_starts(length: int, win: int, hop: int) -> list[int]:
    starts = list(range(0, length - win + 1, hop))
    if starts[-1] != length - win:
        starts.append(length - win)
    return starts


def denoise_record(x: np.ndarray, params, win: int = data.SEG_LEN, hop: int = 250) -> np.ndarray:
    """Overlap-add of independently denoised windows, triangular weights.

    Each window is z-scored, denoised, then mapped back to its own scale.
    """
    if len(x) < win:
        raise ValueError(f"input has {len(x)} samples, need at least one window ({win})")
    starts = window_starts(len(x), win, hop)
    wins = np.stack([x[s:s + win] for s in starts])
    mu = wins.mean(axis=1, keepdims=True)
    sd = wins.std(axis=1, keepdims=True)
    sd = np.where(sd > 0, sd, 1.0)
    dtype = params.alpha_raw.data.dtype
    den = denoise_batch(params, wins, dtype) * sd + mu
    acc = np.zeros(len(x))
    wsum = np.zeros(len(x))
    w = triangular_weights(win)
    for s, d in zip(starts, den):
        acc[s:s + win] += w * d
        wsum[s:s + win] += w
    return acc / wsum


def read_signal_csv(path, column: str | None = None):
    """Read a (t, value) CSV or a single named column; returns samples and fs if a t column exists."""
    import csv
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    col = column or ("value" if "value" in header else header[-1])
    rec = data.ingest_csv(path, col, 1.0, source="wrist-csv")
    fs = None
    if "t" in header and len(rows) > 2:
        ti = header.index("t")
        try:
            t0, t1 = float(rows[1][ti]), float(rows[2][ti])
            fs = 1.0 / (t1 - t0) if t1 > t0 else None
        except ValueError:
            fs = None
    return rec.samples, fs


def write_signal_csv(path, x, fs: float) -> None:
    x32 = np.asarray(x, dtype=np.float32)
    lines = ["t,value"] + [f"{i / fs:.6f},{repr(float(v))}" for i, v in enumerate(x32)]
    Path(path).write_text("\n".join(lines) + "\n")


def cmd_denoise(args, cfg) -> int:
    try:
        x, fs_file = read_signal_csv(args.input, args.column)
    except (KeyError, ValueError, OSError) as exc:
        raise CLIError("input", str(exc).strip('"')) from None
    fs = args.fs or fs_file or data.FS
    if fs != data.FS:
        if fs < data.FS:
            raise CLIError("input", f"input sampled at {fs} Hz; at least {data.FS} Hz is needed")
        x = data.resample(data.Record("input", fs, x, "wrist-csv"), data.FS).samples
    if len(x) < data.SEG_LEN:
        raise CLIError("input", f"input has {len(x)} samples at 125 Hz, shorter than one 6 s window")
    if args.baseline == "bandpass":
        y = data.bandpass_baseline(x, fs=data.FS)
    elif args.checkpoint:
        ck = _load_ckpt(args.checkpoint)
        if not isinstance(ck.config, DPNetConfig):
            raise CLIError("checkpoint", f"{args.checkpoint} is not a DPNet checkpoint")
        y = denoise_record(x, ck.params(np.float32))
    else:
        raise CLIError("usage", "denoise needs --checkpoint or --baseline bandpass")
    write_signal_csv(args.out, y, data.FS)
    print(f"wrote {len(y)} samples to {args.out}")
    return 0


def evaluate(segments, denoise_fn, split: str = "test") -> MetricReport:
    test = [s for s in segments if s.split == split]
    if not test:
        raise CLIError("data", f"the {split} split is empty")
    g, n, _ = store.arrays(test)
    d = denoise_fn(n)
    rep = MetricReport()
    for gi, ni, di in zip(g, n, d):
        rep.add(gi, ni, di)
    return rep


def report_dict(rep: MetricReport, source: str, split: str) -> dict:
    s = rep.summary()
    assert tuple(s) == REPORT_KEYS
    return {"version": REPORT_VERSION, "metrics": s, "hr_fail_n": rep.hr_fail_n(),
            "source": source, "split": split}


def cmd_eval(args, cfg) -> int:
    segs, _ = _read_store(args.store)
    if args.baseline == "bandpass":
        fn, source = (lambda n: data.bandpass_baseline(n, fs=data.FS)), "bandpass"
    elif args.baseline == "identity":
        fn, source = (lambda n: n.copy()), "identity"
    elif args.checkpoint:
        ck = _load_ckpt(args.checkpoint)
        if not isinstance(ck.config, DPNetConfig):
            raise CLIError("checkpoint", f"{args.checkpoint} is not a DPNet checkpoint")
        params = ck.params(np.float32)
        fn, source = (lambda n: denoise_batch(params, n)), str(args.checkpoint)
    else:
        raise CLIError("usage", "eval needs --checkpoint or --baseline")
    rep = evaluate(segs, fn, args.split)
    out = report_dict(rep, source, args.split)
    if args.report:
        p = Path(args.report)
        p.parent.mkdir(parents=True, exist_ok=True)
        store.write_json(p, out)
        p.with_suffix(".txt").write_text(rep.table() + "\n")
    print(rep.table())
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ppgmamba", description="PPG denoising with bidirectional Mamba blocks")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="run configuration (JSON)")
        p.add_argument("--seed", type=int)

    p = sub.add_parser("prepare", help="window, gate and split clean PPG into a segment store")
    common(p)
    src = p.add_mutually_exclusive_group()
    src.add_argument("--input", help="directory of CSV recordings")
    src.add_argument("--synthetic", type=int, help="generate N synthetic clean segments")
    p.add_argument("--out", required=True, help="segment store directory")
    p.add_argument("--column")
    p.add_argument("--fs", type=float)
    p.add_argument("--source", choices=["bidmc-csv", "wrist-csv"])
    p.add_argument("--subject-split", action="store_true", help="assign whole subjects to a split")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("contaminate", help="fill the noisy channel of a store")
    common(p)
    p.add_argument("--store", required=True)
    p.add_argument("--out", help="write to a new store directory instead of in place")
    p.add_argument("--noise-profile", choices=pipeline.PROFILES)
    p.add_argument("--motion-csv", action="append", help="motion recording CSV (repeatable)")
    p.add_argument("--motion-column")
    p.add_argument("--motion-fs", type=float)
    p.add_argument("--synthetic-motion", action="store_true", help="use generated motion records")
    p.set_defaults(func=cmd_contaminate)

    for name, func, help_ in (("train-hrp", cmd_train_hrp, "pre-train the heart-rate predictor"),
                              ("train-dpnet", cmd_train_dpnet, "train the denoiser against a frozen HRP")):
        p = sub.add_parser(name, help=help_)
        common(p)
        p.add_argument("--store", required=True)
        p.add_argument("--out", required=True, help="output directory for checkpoints and logs")
        p.add_argument("--preset", choices=["paper", "desk"])
        p.add_argument("--lr", type=float)
        p.add_argument("--batch", type=int)
        p.add_argument("--hrp-batch", dest="hrp_batch", type=int, help="HRP pre-training batch size")
        p.add_argument("--micro-batch", dest="micro_batch", type=int,
                       help="accumulate gradients over parts of this size (memory only)")
        p.add_argument("--hrp-epochs", dest="hrp_epochs", type=int)
        p.add_argument("--dpnet-epochs", dest="dpnet_epochs", type=int)
        p.add_argument("--warmup", dest="E_w", type=int)
        p.add_argument("--dtype", choices=["float32", "float64"])
        if name == "train-dpnet":
            p.add_argument("--hrp", help="frozen HRP checkpoint")
        p.set_defaults(func=func)

    p = sub.add_parser("denoise", help="denoise a CSV recording")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--baseline", choices=["bandpass"])
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--column")
    p.add_argument("--fs", type=float, help="input rate when the CSV has no t column")
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("eval", help="score a model or baseline on a store split")
    common(p)
    p.add_argument("--store", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--baseline", choices=["bandpass", "identity"])
    p.add_argument("--split", default="test", choices=list(data.SPLITS))
    p.add_argument("--report")
    p.set_defaults(func=cmd_eval)
    return ap


def main(argv=None) -> int:
    level = os.environ.get("PPGMAMBA_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = load_run_config(args.config)
        set_key(cfg, "seed", getattr(args, "seed", None))
        return args.func(args, cfg)
    except CLIError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return EXIT.get(exc.category, 1)
    except Exception as exc:  # noqa: BLE001
        print(f"error[internal]: {type(exc).__name__}: {exc}", file=sys.stderr)
        if level == "DEBUG":
            raise
        return EXIT["internal"]


if __name__ == "__main__":
    sys.exit(main())
