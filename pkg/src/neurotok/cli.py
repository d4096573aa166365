"""Command-line front end for the full pipeline.

Every subcommand is a pure function of its inputs plus the seed: outputs are
written to --out together with a resolved-config snapshot (config.json) that
suffices to rerun the command. Metric CSVs use the long format
(subject, channel, metric, value); `report` renders matplotlib figures next
to the CSVs. Exit codes: 0 success, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import evaluation, plots
from .core import (
    SyntheticSpec,
    TimeSeries,
    load_timeseries,
    save_timeseries,
    synth_generate,
)
from .errors import ConfigError, IoError, NeurotokError
from .fixedtok import (
    FixedTokenizer,
    TokenSequence,
    fit_mu_tokenizer,
    fit_sq_tokenizer,
    load_tokens,
    save_tokens,
)
from .gpt import GptConfig, GptModel, SamplerConfig, sample_prompt
from .learntok import LearnableTokenizer, TrainConfig, segment_pool, train_restarts


def _fmt(v) -> str:
    if isinstance(v, float):
        return format(v, ".12g")
    return str(v)


def write_csv(path, header: list[str], rows: list[tuple]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    header = lines[0].split(",")
    return header, [ln.split(",") for ln in lines[1:]]


def write_json(path, doc: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _snapshot(out: Path, command: str, cfg: dict) -> None:
    write_json(out / "config.json", {"command": command, "config": cfg})


def _resolve(defaults: dict, args: argparse.Namespace) -> dict:
    """defaults <- JSON config file <- explicitly passed flags."""
    cfg = dict(defaults)
    if getattr(args, "config", None):
        try:
            with open(args.config, "r", encoding="utf-8") as fh:
                loaded = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON in {args.config}: {exc}") from exc
        for key, value in loaded.items():
            if key not in cfg:
                raise ConfigError(f"unknown config key {key!r}")
            cfg[key] = value
    for key in cfg:
        flag = getattr(args, key.replace("-", "_"), None)
        if flag is not None:
            cfg[key] = flag
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _list_files(path, suffix: str) -> list[Path]:
    p = Path(path)
    if p.is_dir():
        files = sorted(p.glob(f"*{suffix}"))
        if not files:
            raise IoError(f"no {suffix} files in {p}")
        return files
    if not p.exists():
        raise IoError(f"{p} does not exist")
    return [p]


def _load_recordings(path) -> list[TimeSeries]:
    return [load_timeseries(f) for f in _list_files(path, ".nts")]


def load_any_tokenizer(path):
    """A tokenizer reference is either a fixed-codec JSON file or a learnable
    checkpoint directory containing tokenizer.json."""
    p = Path(path)
    if p.is_dir():
        return LearnableTokenizer.load(p)
    return FixedTokenizer.from_json(p)


def _load_token_files(path) -> list[TokenSequence]:
    files = _list_files(path, ".ntk")
    manifest = {}
    mpath = Path(path) / "tokens_manifest.csv" if Path(path).is_dir() else None
    if mpath and mpath.exists():
        _, rows = read_csv(mpath)
        for name, subject, rate in rows:
            manifest[name] = (int(subject), float(rate))
    out = []
    for f in files:
        subject, rate = manifest.get(f.name, (0, 1.0))
        out.append(load_tokens(f, sample_rate=rate, subject_id=subject))
    return out


def _parse_oscillators(text: str):
    out = []
    for part in text.split(","):
        bits = part.split(":")
        if len(bits) != 3:
            raise ConfigError(f"oscillator {part!r} must be freq:amp:bandwidth")
        out.append(tuple(float(b) for b in bits))
    return tuple(out)


def _parse_lags(text: str) -> list[int]:
    if ".." in text:
        lo, hi = text.split("..")
        return list(range(int(lo), int(hi) + 1))
    return [int(x) for x in text.split(",")]


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("NEUROTOK_THREADS", "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# Subcommand implementations
# ---------------------------------------------------------------------------

def run_synth(args) -> None:
    cfg = _resolve({
        "subjects": 4, "channels": 4, "duration": 30.0, "rate": 250.0,
        "oscillators": "10:1:1.5", "noise": 0.25, "jitter": 0.05, "seed": 0,
    }, args)
    out = _out_dir(args)
    spec = SyntheticSpec(
        n_subjects=int(cfg["subjects"]),
        n_channels=int(cfg["channels"]),
        n_samples=int(round(cfg["duration"] * cfg["rate"])),
        sample_rate=float(cfg["rate"]),
        oscillators=_parse_oscillators(cfg["oscillators"])
        if isinstance(cfg["oscillators"], str) else tuple(map(tuple, cfg["oscillators"])),
        noise_sigma=float(cfg["noise"]),
        subject_jitter=float(cfg["jitter"]),
        seed=int(cfg["seed"]),
    )
    for ts in synth_generate(spec):
        save_timeseries(out / f"subject_{ts.subject_id:03d}.nts", ts)
    _snapshot(out, "synth", cfg)
    print(f"wrote {spec.n_subjects} recordings to {out}")


def run_fit_tokenizer(args) -> None:
    cfg = _resolve({
        "kind": "sq", "vocab": 108, "mu": None,
        "clip-lo": 0.0005, "clip-hi": 0.9995, "data": None, "seed": 0,
    }, args)
    if not cfg["data"]:
        raise ConfigError("fit-tokenizer requires --data")
    out = _out_dir(args)
    recordings = _load_recordings(cfg["data"])
    quantiles = (float(cfg["clip-lo"]), float(cfg["clip-hi"]))
    if cfg["kind"] == "mu":
        tok = fit_mu_tokenizer(recordings, int(cfg["vocab"]),
                               mu=cfg["mu"], clip_quantiles=quantiles)
    elif cfg["kind"] == "sq":
        tok = fit_sq_tokenizer(recordings, int(cfg["vocab"]), clip_quantiles=quantiles)
    else:
        raise ConfigError(f"unknown tokenizer kind {cfg['kind']!r}")
    tok.to_json(out / "tokenizer.json")
    _snapshot(out, "fit-tokenizer", cfg)
    print(f"wrote {out / 'tokenizer.json'}")


def run_train_tokenizer(args) -> None:
    cfg = _resolve({
        "vocab": 32, "hidden": 32, "kernel-width": 10, "causal": False,
        "epochs": 40, "batch": 32, "seq-len": 200, "lr": 0.02,
        "restarts": 1, "refactor": True, "max-segments": None,
        "data": None, "seed": 0,
    }, args)
    if not cfg["data"]:
        raise ConfigError("train-tokenizer requires --data")
    out = _out_dir(args)
    recordings = _load_recordings(cfg["data"])
    segments = segment_pool(recordings, int(cfg["seq-len"]))
    if cfg["max-segments"]:
        segments = segments[: int(cfg["max-segments"])]
    train_cfg = TrainConfig(epochs=int(cfg["epochs"]), batch_size=int(cfg["batch"]),
                            lr=float(cfg["lr"]), seed=int(cfg["seed"]))
    tok, curves = train_restarts(
        segments, int(cfg["restarts"]), base_seed=int(cfg["seed"]), cfg=train_cfg,
        max_workers=_threads(), vocab_size=int(cfg["vocab"]),
        hidden=int(cfg["hidden"]), d_token=int(cfg["kernel-width"]),
        causal=bool(cfg["causal"]),
    )
    if cfg["refactor"]:
        tok.refactorize(recordings)
    tok.save(out / "tokenizer")
    rows = [(r, e, loss) for r, curve in enumerate(curves)
            for e, loss in enumerate(curve)]
    write_csv(out / "curve.csv", ["restart", "epoch", "loss"], rows)
    _snapshot(out, "train-tokenizer", cfg)
    print(f"best final loss {tok.final_loss:.6g}, effective vocabulary "
          f"{tok.effective_vocab}; wrote {out / 'tokenizer'}")


def run_tokenize(args) -> None:
    cfg = _resolve({"tokenizer": None, "data": None, "seed": 0}, args)
    if not cfg["tokenizer"] or not cfg["data"]:
        raise ConfigError("tokenize requires --tokenizer and --data")
    out = _out_dir(args)
    tok = load_any_tokenizer(cfg["tokenizer"])
    manifest_rows = []
    total_counts = None
    for f in _list_files(cfg["data"], ".nts"):
        seq = tok.tokenize(load_timeseries(f))
        name = f.stem + ".ntk"
        save_tokens(out / name, seq)
        manifest_rows.append((name, seq.subject_id, seq.sample_rate))
        counts = np.bincount(seq.labels.ravel(), minlength=seq.vocab_size)
        total_counts = counts if total_counts is None else total_counts + counts
    write_csv(out / "tokens_manifest.csv", ["file", "subject", "sample_rate"],
              manifest_rows)
    ranked = np.sort(total_counts)[::-1]
    write_csv(out / "histogram.csv", ["rank", "count"],
              list(enumerate(ranked.tolist())))
    _snapshot(out, "tokenize", cfg)
    print(f"wrote {len(manifest_rows)} token files to {out}")


def run_detokenize(args) -> None:
    cfg = _resolve({"tokenizer": None, "tokens": None, "rate": 250.0, "seed": 0}, args)
    if not cfg["tokenizer"] or not cfg["tokens"]:
        raise ConfigError("detokenize requires --tokenizer and --tokens")
    out = _out_dir(args)
    tok = load_any_tokenizer(cfg["tokenizer"])
    n = 0
    for seq in _load_token_files(cfg["tokens"]):
        if seq.sample_rate == 1.0:
            seq = TokenSequence(seq.labels, seq.vocab_size, seq.provenance,
                                float(cfg["rate"]), seq.subject_id)
        ts = tok.detokenize(seq)
        save_timeseries(out / f"recon_{ts.subject_id:03d}_{n:03d}.nts", ts)
        n += 1
    _snapshot(out, "detokenize", cfg)
    print(f"wrote {n} reconstructions to {out}")


def run_eval_recon(args) -> None:
    cfg = _resolve({"tokenizer": None, "data": None, "per-channel": False, "seed": 0}, args)
    if not cfg["tokenizer"] or not cfg["data"]:
        raise ConfigError("eval-recon requires --tokenizer and --data")
    out = _out_dir(args)
    tok = load_any_tokenizer(cfg["tokenizer"])
    rows = []
    overall = []
    for ts in _load_recordings(cfg["data"]):
        recon = tok.detokenize(tok.tokenize(ts))
        report = evaluation.pve(ts, recon)
        rows.append((ts.subject_id, "all", "pve", report.overall))
        overall.append(report.overall)
        if cfg["per-channel"]:
            per = evaluation.pve(ts, recon, axes="time")
            for name, value in zip(ts.channel_names, per.values):
                rows.append((ts.subject_id, name, "pve", float(value)))
    write_csv(out / "pve.csv", ["subject", "channel", "metric", "value"], rows)
    write_json(out / "summary.json", {
        "metric": "pve", "mean": float(np.mean(overall)),
        "min": float(np.min(overall)), "max": float(np.max(overall)),
        "n_subjects": len(overall),
    })
    _snapshot(out, "eval-recon", cfg)
    print(f"mean PVE {np.mean(overall):.3f} over {len(overall)} recordings")


def run_train_gpt(args) -> None:
    cfg = _resolve({
        "tokens": None, "embed-dim": 64, "layers": 2, "heads": 2,
        "receptive-field": 32, "head-hidden": 64, "dropout": 0.0,
        "lr": 1e-3, "batch": 8, "epochs": 5, "max-steps": None,
        "stride": None, "val-fraction": 0.1, "seed": 0,
    }, args)
    if not cfg["tokens"]:
        raise ConfigError("train-gpt requires --tokens")
    out = _out_dir(args)
    dataset = _load_token_files(cfg["tokens"])
    vocab = dataset[0].vocab_size
    channels = dataset[0].n_channels
    subjects = max(seq.subject_id for seq in dataset) + 1
    model_cfg = GptConfig(
        vocab_size=vocab, n_channels=channels, n_subjects=subjects,
        embed_dim=int(cfg["embed-dim"]), n_layers=int(cfg["layers"]),
        n_heads=int(cfg["heads"]), receptive_field=int(cfg["receptive-field"]),
        head_hidden=int(cfg["head-hidden"]), dropout=float(cfg["dropout"]),
        lr=float(cfg["lr"]), batch_size=int(cfg["batch"]),
    )
    model = GptModel(model_cfg, seed=int(cfg["seed"]))
    curves = model.train(
        dataset, epochs=int(cfg["epochs"]),
        max_steps=int(cfg["max-steps"]) if cfg["max-steps"] else None,
        window_stride=int(cfg["stride"]) if cfg["stride"] else None,
        val_fraction=float(cfg["val-fraction"]), seed=int(cfg["seed"]),
    )
    model.save(out / "model")
    rows = [(e, curves["train_loss"][e], curves["train_top1"][e],
             curves["val_loss"][e], curves["val_top1"][e])
            for e in range(len(curves["train_loss"]))]
    write_csv(out / "curves.csv",
              ["epoch", "train_loss", "train_top1", "val_loss", "val_top1"], rows)
    _snapshot(out, "train-gpt", cfg)
    print(f"final train loss {curves['train_loss'][-1]:.4f}, "
          f"val top-1 {curves['val_top1'][-1]:.4f}; wrote {out / 'model'}")


def run_generate(args) -> None:
    cfg = _resolve({
        "model": None, "tokenizer": None, "steps": 1000, "prompt-len": 8,
        "top-p": 0.99, "temperature": 1.0, "subjects": None, "rate": 250.0,
        "seed": 0,
    }, args)
    if not cfg["model"]:
        raise ConfigError("generate requires --model")
    out = _out_dir(args)
    model = GptModel.load(cfg["model"])
    if model.token_counts is None:
        raise ConfigError("model checkpoint lacks token counts; retrain with train-gpt")
    tok = load_any_tokenizer(cfg["tokenizer"]) if cfg["tokenizer"] else None
    subject_ids = ([int(s) for s in str(cfg["subjects"]).split(",")]
                   if cfg["subjects"] is not None
                   else list(range(model.cfg.n_subjects)))
    manifest_rows = []
    for sid in subject_ids:
        seed = int(cfg["seed"]) + sid
        prompt = np.stack([
            sample_prompt(model.token_counts, int(cfg["prompt-len"]), seed=seed * 1000 + c)
            for c in range(model.cfg.n_channels)
        ], axis=1)
        sampler = SamplerConfig(top_p=float(cfg["top-p"]),
                                temperature=float(cfg["temperature"]), seed=seed)
        tokens = model.generate(prompt, int(cfg["steps"]), sampler, subject_id=sid)
        seq = TokenSequence(tokens.T.copy(), model.cfg.vocab_size, "generated",
                            float(cfg["rate"]), sid)
        name = f"gen_{sid:03d}.ntk"
        save_tokens(out / name, seq)
        manifest_rows.append((name, sid, float(cfg["rate"])))
        if tok is not None:
            save_timeseries(out / f"gen_{sid:03d}.nts", tok.detokenize(seq))
    write_csv(out / "tokens_manifest.csv", ["file", "subject", "sample_rate"],
              manifest_rows)
    _snapshot(out, "generate", cfg)
    print(f"generated {len(subject_ids)} sequences of {cfg['steps']} steps in {out}")


def run_eval_gen(args) -> None:
    cfg = _resolve({
        "real": None, "generated": None, "window-s": 2.0, "overlap": 0.5, "seed": 0,
    }, args)
    if not cfg["real"] or not cfg["generated"]:
        raise ConfigError("eval-gen requires --real and --generated")
    out = _out_dir(args)
    real = {ts.subject_id: ts for ts in _load_recordings(cfg["real"])}
    gen = {ts.subject_id: ts for ts in _load_recordings(cfg["generated"])}
    shared = sorted(set(real) & set(gen))
    if not shared:
        raise ConfigError("no common subject ids between real and generated data")
    metric_rows, psd_rows = [], []
    for sid in shared:
        est_r = evaluation.welch_psd(real[sid], float(cfg["window-s"]), float(cfg["overlap"]))
        est_g = evaluation.welch_psd(gen[sid], float(cfg["window-s"]), float(cfg["overlap"]))
        if not np.array_equal(est_r.frequencies, est_g.frequencies):
            raise ConfigError("real and generated PSDs have different frequency grids")
        dists = evaluation.l2_psd_distance(est_r, est_g)
        for c, d in enumerate(dists):
            metric_rows.append((sid, real[sid].channel_names[c], "l2_psd", float(d)))
        metric_rows.append((sid, "all", "peak_freq_real", est_r.peak_frequency()))
        metric_rows.append((sid, "all", "peak_freq_generated", est_g.peak_frequency()))
        for source, est in (("real", est_r), ("generated", est_g)):
            mean_power = est.power.mean(axis=0)
            for f, p in zip(est.frequencies, mean_power):
                psd_rows.append((source, sid, float(f), float(p)))
    write_csv(out / "metrics.csv", ["subject", "channel", "metric", "value"],
              metric_rows)
    write_csv(out / "psd.csv", ["source", "subject", "frequency_hz", "power"],
              psd_rows)
    l2_values = [r[3] for r in metric_rows if r[2] == "l2_psd"]
    peaks = [r[3] for r in metric_rows if r[2] == "peak_freq_generated"]
    write_json(out / "summary.json", {
        "mean_l2_psd": float(np.mean(l2_values)),
        "generated_peak_frequencies": peaks,
        "n_subjects": len(shared),
    })
    _snapshot(out, "eval-gen", cfg)
    print(f"mean L2 PSD distance {np.mean(l2_values):.6g} over {len(shared)} subjects")


def run_fingerprint(args) -> None:
    cfg = _resolve({
        "real": None, "generated": None, "lags": "-7..7", "k": 1, "seed": 0,
    }, args)
    if not cfg["real"] or not cfg["generated"]:
        raise ConfigError("fingerprint requires --real and --generated")
    out = _out_dir(args)
    lags = _parse_lags(str(cfg["lags"]))
    real = sorted(_load_recordings(cfg["real"]), key=lambda t: t.subject_id)
    gen = sorted(_load_recordings(cfg["generated"]), key=lambda t: t.subject_id)
    shared = sorted({t.subject_id for t in real} & {t.subject_id for t in gen})
    if not shared:
        raise ConfigError("no common subject ids between real and generated data")
    real = [t for t in real if t.subject_id in shared]
    gen = [t for t in gen if t.subject_id in shared]
    fp_real = evaluation.build_fingerprints(real, lags)
    fp_gen = evaluation.build_fingerprints(gen, lags)
    result = evaluation.fingerprint(fp_real, fp_gen, k=int(cfg["k"]))
    rows = [("all", "all", f"top_{cfg['k']}_accuracy", result.top_k_accuracy),
            ("all", "all", "consistency", result.consistency)]
    write_csv(out / "metrics.csv", ["subject", "channel", "metric", "value"], rows)
    write_json(out / "summary.json", {
        "top_k_accuracy": result.top_k_accuracy,
        "consistency": result.consistency,
        "k": int(cfg["k"]), "lags": lags, "n_subjects": len(shared),
    })
    _snapshot(out, "fingerprint", cfg)
    print(f"top-{cfg['k']} accuracy {result.top_k_accuracy:.3f}, "
          f"consistency {result.consistency:.3f}")


def run_probe(args) -> None:
    cfg = _resolve({
        "trials": None, "labels": None, "mode": "baseline", "split": "within",
        "model": None, "tokenizer": None, "epochs": 300, "lr": 0.05, "seed": 0,
    }, args)
    if not cfg["trials"]:
        raise ConfigError("probe requires --trials")
    out = _out_dir(args)
    labels_path = Path(cfg["labels"]) if cfg["labels"] else Path(cfg["trials"]) / "labels.csv"
    if not labels_path.exists():
        raise ConfigError(f"labels file {labels_path} not found")
    _, rows = read_csv(labels_path)
    files = [r[0] for r in rows]
    labels = np.array([int(r[1]) for r in rows])
    subjects = np.array([int(r[2]) for r in rows])
    sessions = np.array([int(r[3]) for r in rows])
    trials = [load_timeseries(Path(cfg["trials"]) / f) for f in files]
    if cfg["mode"] == "baseline":
        feats = np.stack([ts.data.T for ts in trials])  # (N, L, C)
    elif cfg["mode"] == "zero-shot":
        if not cfg["model"] or not cfg["tokenizer"]:
            raise ConfigError("zero-shot probe requires --model and --tokenizer")
        model = GptModel.load(cfg["model"])
        tok = load_any_tokenizer(cfg["tokenizer"])
        feats = np.stack([
            model.extract_features(tok.tokenize(ts).labels.T, subject_id=0)
            for ts in trials
        ])  # (N, L, C, D)
    else:
        raise ConfigError(f"unknown probe mode {cfg['mode']!r}")
    split = evaluation.probe_split(subjects, sessions, str(cfg["split"]))
    acc = evaluation.zero_shot_probe(feats, labels, split,
                                     epochs=int(cfg["epochs"]),
                                     lr=float(cfg["lr"]), seed=int(cfg["seed"]))
    write_csv(out / "metrics.csv", ["subject", "channel", "metric", "value"],
              [("all", "all", f"accuracy_{cfg['mode']}_{cfg['split']}", acc)])
    write_json(out / "summary.json", {
        "accuracy": acc, "mode": cfg["mode"], "split": cfg["split"],
        "n_train": int(split.train_idx.size), "n_test": int(split.test_idx.size),
    })
    _snapshot(out, "probe", cfg)
    print(f"{cfg['mode']} {cfg['split']} accuracy {acc:.3f}")


def run_report(args) -> None:
    cfg = _resolve({"run": None, "format": "svg", "seed": 0}, args)
    if not cfg["run"]:
        raise ConfigError("report requires --run")
    run_dir = Path(cfg["run"])
    out = Path(args.out) if args.out else run_dir
    out.mkdir(parents=True, exist_ok=True)
    ext = cfg["format"]
    written = []

    hist = run_dir / "histogram.csv"
    if hist.exists():
        _, rows = read_csv(hist)
        counts = np.array([float(r[1]) for r in rows])
        written.append(plots.plot_token_histogram(counts, out / f"histogram.{ext}"))

    pve_csv = run_dir / "pve.csv"
    if pve_csv.exists():
        _, rows = read_csv(pve_csv)
        subj = [r[0] for r in rows if r[1] == "all"]
        vals = np.array([float(r[3]) for r in rows if r[1] == "all"])
        if len(vals):
            written.append(plots.plot_pve(np.array(subj), vals, out / f"pve.{ext}"))

    curves_csv = run_dir / "curves.csv"
    if curves_csv.exists():
        header, rows = read_csv(curves_csv)
        series = {name: [float(r[i]) for r in rows]
                  for i, name in enumerate(header) if name != "epoch"}
        written.append(plots.plot_loss_curves(
            {k: v for k, v in series.items() if k.endswith("loss")},
            out / f"curves.{ext}"))
        try:
            analysis = evaluation.loss_convergence(series["train_loss"])
            written.append(plots.plot_convergence(
                analysis.log_relative, analysis.rates, out / f"convergence.{ext}"))
        except NeurotokError:
            pass  # short or flat curves have no convergence story

    curve_csv = run_dir / "curve.csv"
    if curve_csv.exists():
        _, rows = read_csv(curve_csv)
        by_restart: dict[str, list[float]] = {}
        for r, _, loss in rows:
            by_restart.setdefault(f"restart {r}", []).append(float(loss))
        written.append(plots.plot_loss_curves(by_restart, out / f"curve.{ext}",
                                              title="Tokenizer training loss"))

    psd_csv = run_dir / "psd.csv"
    if psd_csv.exists():
        _, rows = read_csv(psd_csv)
        freqs = sorted({float(r[2]) for r in rows})
        curves = {}
        for source in sorted({r[0] for r in rows}):
            acc: dict[float, list[float]] = {}
            for r in rows:
                if r[0] == source:
                    acc.setdefault(float(r[2]), []).append(float(r[3]))
            curves[source] = np.array([np.mean(acc[f]) for f in freqs])
        written.append(plots.plot_psd(np.array(freqs), curves, out / f"psd.{ext}"))

    if not written:
        raise ConfigError(f"no reportable CSVs found in {run_dir}")
    for path in written:
        print(f"wrote {path}")


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser, need_out: bool = True) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int, default=None, help="global seed")
    p.add_argument("--out", required=need_out, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="neurotok",
        description="Sample-level tokenizers, a small autoregressive "
                    "transformer, and evaluation reports for multichannel "
                    "time series.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic oscillatory recordings")
    _add_common(p)
    p.add_argument("--subjects", type=int)
    p.add_argument("--channels", type=int)
    p.add_argument("--duration", type=float, help="seconds per recording")
    p.add_argument("--rate", type=float)
    p.add_argument("--oscillators", help="freq:amp:bw[,freq:amp:bw...]")
    p.add_argument("--noise", type=float)
    p.add_argument("--jitter", type=float)
    p.set_defaults(func=run_synth)

    p = sub.add_parser("fit-tokenizer", help="fit a fixed codec (mu-law or quantile)")
    _add_common(p)
    p.add_argument("--kind", choices=["mu", "sq"])
    p.add_argument("--vocab", type=int)
    p.add_argument("--mu", type=float)
    p.add_argument("--clip-lo", type=float)
    p.add_argument("--clip-hi", type=float)
    p.add_argument("--data")
    p.set_defaults(func=run_fit_tokenizer)

    p = sub.add_parser("train-tokenizer", help="train the learnable tokenizer")
    _add_common(p)
    p.add_argument("--vocab", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--kernel-width", type=int)
    p.add_argument("--causal", action="store_true", default=None)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--seq-len", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--restarts", type=int)
    p.add_argument("--max-segments", type=int)
    p.add_argument("--no-refactor", dest="refactor", action="store_false", default=None)
    p.add_argument("--data")
    p.set_defaults(func=run_train_tokenizer)

    p = sub.add_parser("tokenize", help="tokenize recordings with a fitted tokenizer")
    _add_common(p)
    p.add_argument("--tokenizer")
    p.add_argument("--data")
    p.set_defaults(func=run_tokenize)

    p = sub.add_parser("detokenize", help="reconstruct recordings from token files")
    _add_common(p)
    p.add_argument("--tokenizer")
    p.add_argument("--tokens")
    p.add_argument("--rate", type=float)
    p.set_defaults(func=run_detokenize)

    p = sub.add_parser("eval-recon", help="round-trip reconstruction PVE report")
    _add_common(p)
    p.add_argument("--tokenizer")
    p.add_argument("--data")
    p.add_argument("--per-channel", action="store_true", default=None)
    p.set_defaults(func=run_eval_recon)

    p = sub.add_parser("train-gpt", help="train the autoregressive transformer")
    _add_common(p)
    p.add_argument("--tokens")
    p.add_argument("--embed-dim", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--receptive-field", type=int)
    p.add_argument("--head-hidden", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--val-fraction", type=float)
    p.set_defaults(func=run_train_gpt)

    p = sub.add_parser("generate", help="sample token sequences from a trained model")
    _add_common(p)
    p.add_argument("--model")
    p.add_argument("--tokenizer", help="also detokenize generated sequences")
    p.add_argument("--steps", type=int)
    p.add_argument("--prompt-len", type=int)
    p.add_argument("--top-p", type=float)
    p.add_argument("--temperature", type=float)
    p.add_argument("--subjects", help="comma-separated subject ids")
    p.add_argument("--rate", type=float)
    p.set_defaults(func=run_generate)

    p = sub.add_parser("eval-gen", help="spectral comparison of real vs generated data")
    _add_common(p)
    p.add_argument("--real")
    p.add_argument("--generated")
    p.add_argument("--window-s", type=float)
    p.add_argument("--overlap", type=float)
    p.set_defaults(func=run_eval_gen)

    p = sub.add_parser("fingerprint", help="subject identification between datasets")
    _add_common(p)
    p.add_argument("--real")
    p.add_argument("--generated")
    p.add_argument("--lags", help="lo..hi or comma-separated")
    p.add_argument("--k", type=int)
    p.set_defaults(func=run_fingerprint)

    p = sub.add_parser("probe", help="linear decoding probe on epoched trials")
    _add_common(p)
    p.add_argument("--trials")
    p.add_argument("--labels", help="CSV of file,label,subject,session")
    p.add_argument("--mode", choices=["baseline", "zero-shot"])
    p.add_argument("--split", choices=["within", "new-subject"])
    p.add_argument("--model")
    p.add_argument("--tokenizer")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.set_defaults(func=run_probe)

    p = sub.add_parser("report", help="render figures from a run's CSV outputs")
    _add_common(p, need_out=False)
    p.add_argument("--run", help="directory holding the CSVs")
    p.add_argument("--format", choices=["svg", "png"])
    p.set_defaults(func=run_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except NeurotokError as exc:
        print(f"error: {exc.code}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
