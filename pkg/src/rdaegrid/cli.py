"""Command line: gen-data, train, calibrate, attack, evaluate (and run for all five).

Exit status is 0 on success, 1 when inputs or configuration are invalid and
2 when a stage fails at run time.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import attacks, detector, report
from .data import DispatchError, MinMaxScaler, series_to_csv
from .experiment import (RunConfig, build_model, campaign_for, generate_data, load_config, load_dataset,
                         load_windows, save_dataset, stage_seed)
from .grid import CaseParseError, CaseValidationError
from .io import ArtifactError
from .nn.model import load_model, save_model
from .nn.train import Adam, TrainingDivergedError, train

log = logging.getLogger("rdaegrid")

MODEL_FILE = "model.bin"
LOSS_FILE = "loss.csv"
TABLE_FILE = "thresholds.json"
SCENARIO_FILE = "scenarios.jsonl"


class UsageError(Exception):
    """Invalid input; maps to exit status 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _alpha(text: str) -> float:
    v = float(text)
    if not 0.0 < v <= 1.0:
        raise argparse.ArgumentTypeError("alpha must lie in (0, 1]")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration (TOML or JSON)")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out-dir", help="artifact directory (overrides the config)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="rdaegrid", description="Detect stealthy and masked attacks on DC state estimation.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", parents=[common], help="synthesise measurements and windows")
    g.add_argument("--case", help="bundled case name or path to a MATPOWER/JSON case")
    g.add_argument("--train-days", type=int)
    g.add_argument("--test-days", type=int)
    g.add_argument("--csv", action="store_true", help="also export the raw series as CSV")

    t = sub.add_parser("train", parents=[common], help="train the autoencoder")
    t.add_argument("--kind", choices=("lstm", "dense"))
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--resume", action="store_true", help="continue from the model file in the output directory")
    t.add_argument("--model", help="model file name (default model.bin)")

    c = sub.add_parser("calibrate", parents=[common], help="per-missing-ratio thresholds")
    c.add_argument("--alpha", type=_alpha)
    c.add_argument("--model", help="model file name (default model.bin)")

    a = sub.add_parser("attack", parents=[common], help="write the attack scenario list")

    e = sub.add_parser("evaluate", parents=[common], help="score scenarios and write reports")
    e.add_argument("--model", help="model file name (default model.bin)")

    r = sub.add_parser("run", parents=[common], help="all five stages in order")
    r.add_argument("--epochs", type=int)
    for q in (a, r):
        q.set_defaults(model=None)
    return p


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out_dir:
        cfg.out_dir = args.out_dir
    d = cfg.data
    for flag, attr in (("case", "case"), ("train_days", "train_days"), ("test_days", "test_days")):
        if getattr(args, flag, None) is not None:
            setattr(d, attr, getattr(args, flag))
    t = cfg.train
    for flag, attr in (("epochs", "epochs"), ("lr", "learning_rate"), ("batch_size", "batch_size")):
        if getattr(args, flag, None) is not None:
            setattr(t, attr, getattr(args, flag))
    if getattr(args, "kind", None):
        cfg.model.kind = args.kind
    if getattr(args, "alpha", None) is not None:
        cfg.detect.alpha = args.alpha
    if not 0.0 < cfg.detect.alpha <= 1.0:
        raise UsageError("alpha must lie in (0, 1]")
    return cfg


def _model_fingerprint(model) -> str:
    h = hashlib.sha256()
    for k in sorted(model.params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(model.params[k], dtype="<f8").tobytes())
    return h.hexdigest()[:16]


# ------------------------------------------------------------------ stages

def cmd_gen_data(cfg: RunConfig, args) -> int:
    out = Path(cfg.out_dir)
    ds = generate_data(cfg.data, stage_seed(cfg.seed, "data"))
    paths = save_dataset(out, ds, cfg.seed)
    if getattr(args, "csv", False):
        series_to_csv(out / "series.csv", ds.series, ds.obs.index_map)
    n = ds.series.Z_raw.shape[1]
    print(f"m={ds.obs.m} N={n} train windows={len(ds.train_idx)} val={len(ds.val_idx)} "
          f"test={n - ds.train_steps - ds.T + 1} -> {paths['series'].parent}")
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    out = Path(cfg.out_dir)
    header, w = load_windows(out)
    path = out / (args.model or MODEL_FILE)
    L = 1 if cfg.model.kind == "dense" and not cfg.model.window else (cfg.model.window or header["T"])
    tr, va = w["train"][..., w["train"].shape[-1] - L:], w["val"][..., w["val"].shape[-1] - L:]
    tcfg = dataclasses.replace(cfg.train, seed=stage_seed(cfg.seed, "train"))
    opt = None
    if getattr(args, "resume", False) and path.exists():
        model, extra, mhead = load_model(path, with_extra=True)
        if model.meta.get("data_hash") != header["config_hash"]:
            raise UsageError(f"{path} was trained on different data; refusing to resume")
        opt = Adam(model.params, tcfg.learning_rate, tcfg.beta1, tcfg.beta2, tcfg.epsilon)
        opt.load_state(extra, int(mhead.get("adam_steps", 0)))
    else:
        scaler = MinMaxScaler.from_dict(json.loads((out / "scaler.json").read_text()))
        model = build_model(cfg.model, tr.shape[1], header["T"], stage_seed(cfg.seed, "init"), scaler)
        model.meta = {"data_hash": header["config_hash"], "config_hash": cfg.hash("data", "model", "train"),
                      "seed": cfg.seed}

    rows = []

    def report_epoch(epoch, hist):
        rows.append((epoch, hist.train_loss[-1], hist.val_loss[-1]))
        if tcfg.report_every and epoch % tcfg.report_every == 0:
            print(f"epoch {epoch}: train {hist.train_loss[-1]:.6g} val {hist.val_loss[-1]:.6g}", flush=True)

    model, hist, opt = train(model, tr, tcfg, va, opt, report_epoch)
    save_model(path, model, opt.state(), {"adam_steps": opt.t})
    loss_path = out / LOSS_FILE
    new = not (getattr(args, "resume", False) and loss_path.exists())
    with open(loss_path, "w" if new else "a", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        if new:
            wr.writerow(["epoch", "train_loss", "val_loss"])
        wr.writerows((e, repr(a), repr(b)) for e, a, b in rows)
    print(f"trained {model.kind} model to epoch {model.epochs_trained} -> {path}")
    return 0


def _load_checked_model(cfg: RunConfig, args, data_hash: str):
    path = Path(cfg.out_dir) / (args.model or MODEL_FILE)
    model = load_model(path)
    if model.meta.get("data_hash") != data_hash:
        raise UsageError(f"{path} was trained on data {model.meta.get('data_hash')!r}, "
                         f"but the windows are {data_hash!r}")
    return model


def cmd_calibrate(cfg: RunConfig, args) -> int:
    out = Path(cfg.out_dir)
    header, w = load_windows(out)
    model = _load_checked_model(cfg, args, header["config_hash"])
    ds = load_dataset(out)
    sampler = attacks.MaskSampler(ds.obs)
    val = w["val"][..., w["val"].shape[-1] - model.T:]
    lineage = {"model": _model_fingerprint(model), "data_hash": header["config_hash"], "seed": cfg.seed}
    table = detector.calibrate_thresholds(model, val, cfg.detect.gammas, cfg.detect.alpha,
                                          stage_seed(cfg.seed, "calibrate"), sampler, lineage)
    table.save(out / TABLE_FILE)
    for g, t in zip(table.gammas, table.taus):
        print(f"gamma {g:.2f}: tau2 = {t:.6g}")
    return 0


def cmd_attack(cfg: RunConfig, args) -> int:
    out = Path(cfg.out_dir)
    ds = load_dataset(out)
    camp = dataclasses.replace(cfg.campaign, seed=stage_seed(cfg.seed, "campaign"))
    scenarios = campaign_for(camp, ds)
    attacks.write_manifest(out / SCENARIO_FILE, scenarios)
    print(f"{len(scenarios)} scenarios (hash {attacks.campaign_hash(scenarios)}) -> {out / SCENARIO_FILE}")
    return 0


def _scenarios_from_manifest(path: Path) -> list[attacks.AttackScenario]:
    keys = ("id", "kind", "window", "bus", "mu", "steps", "gamma", "scheme", "seed")
    return [attacks.AttackScenario(**{k: d[k] for k in keys}) for d in attacks.read_manifest(path)]


def cmd_evaluate(cfg: RunConfig, args) -> int:
    out = Path(cfg.out_dir)
    header, w = load_windows(out)
    model = _load_checked_model(cfg, args, header["config_hash"])
    table = detector.ThresholdTable.load(out / TABLE_FILE)
    if table.lineage.get("model") != _model_fingerprint(model):
        raise UsageError(f"{out / TABLE_FILE} was calibrated for a different model; re-run calibrate")
    ds = load_dataset(out)
    scen_path = out / SCENARIO_FILE
    scenarios = _scenarios_from_manifest(scen_path) if scen_path.exists() else []
    ctx = ds.context()
    L = model.T
    seed = stage_seed(cfg.seed, "evaluate")
    val_scores = detector.validation_scores(model, w["val"][..., -L:], table.gammas,
                                            stage_seed(cfg.seed, "calibrate"), ctx.sampler)
    res = detector.evaluate_campaign(model, table, scenarios, ctx, ds.scaler, w["test"], val_scores, seed)
    write_reports(out, res, table)
    print(f"{len(scenarios)} scenarios, clean FPR {res.clean.fpr:.4f}; reports in {out}")
    return 0


def write_reports(out: Path, res: detector.CampaignResult, table: detector.ThresholdTable) -> None:
    rows = res.rows()
    report.write_csv(out / "report.csv", rows)
    report.write_json(out / "report.json", {"thresholds": table.to_dict(), "rows": rows,
                                            "alpha_curve": res.alpha_curve, "meta": res.meta})
    if res.alpha_curve:
        report.write_csv(out / "fpr_alpha.csv", res.alpha_curve)
        series = {}
        for r in res.alpha_curve:
            xs, ys = series.setdefault(f"gamma {r['gamma']:.2f}", ([], []))
            xs.append(r["alpha"])
            ys.append(r["fpr"])
        series["1 - alpha"] = (sorted({r["alpha"] for r in res.alpha_curve}),
                               [1 - a for a in sorted({r["alpha"] for r in res.alpha_curve})])
        report.write_svg(out / "fpr_alpha.svg", report.line_chart(series, "False positives vs alpha", "alpha", "FPR"))

    def pooled(pred):
        hit = [r for r in res.reports if pred(r.key)]
        tp = sum(r.tp for r in hit)
        return tp / max(1, sum(r.tp + r.fn for r in hit)), sum(r.tp + r.fn for r in hit)

    attacked = [r.key for r in res.reports if r.key.get("kind") in ("fdia", "combined")]
    mus = sorted({abs(k["mu"]) for k in attacked})
    gammas = sorted({k["gamma"] for k in attacked})
    mu_rows, mu_series = [], {}
    for g in gammas:
        xs, ys = mu_series.setdefault(f"gamma {g:.2f}", ([], []))
        for mu in mus:
            rate, n = pooled(lambda k: k.get("kind") != "replay" and abs(k["mu"]) == mu and k["gamma"] == g
                             and k.get("steps", 1) == 1)
            if n:
                mu_rows.append({"mu": mu, "gamma": g, "rate": rate, "n": n})
                xs.append(mu)
                ys.append(rate)
    if mu_rows:
        report.write_csv(out / "rate_vs_mu.csv", mu_rows)
        report.write_svg(out / "rate_vs_mu.svg",
                         report.line_chart(mu_series, "Detection rate vs attack magnitude", "|mu|", "rate", y_range=(0, 1)))
        g_rows, g_series = [], {}
        for mu in mus:
            xs, ys = g_series.setdefault(f"|mu| {mu:.2f}", ([], []))
            for g in gammas:
                rate, n = pooled(lambda k: k.get("kind") != "replay" and abs(k["mu"]) == mu and k["gamma"] == g
                                 and k.get("steps", 1) == 1)
                if n:
                    g_rows.append({"gamma": g, "mu": mu, "rate": rate, "n": n})
                    xs.append(g)
                    ys.append(rate)
        report.write_csv(out / "rate_vs_gamma.csv", g_rows)
        report.write_svg(out / "rate_vs_gamma.svg",
                         report.line_chart(g_series, "Detection rate vs missing ratio", "gamma", "rate", y_range=(0, 1)))
    replay = [r.row() for r in res.reports if r.key.get("kind") == "replay"]
    if replay:
        report.write_csv(out / "replay.csv", replay)


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "calibrate": cmd_calibrate,
            "attack": cmd_attack, "evaluate": cmd_evaluate}


def cmd_run(cfg: RunConfig, args) -> int:
    for name in ("gen-data", "train", "calibrate", "attack", "evaluate"):
        print(f"== {name}")
        COMMANDS[name](cfg, args)
    return 0


COMMANDS["run"] = cmd_run


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        cfg = _config(args)
        return COMMANDS[args.command](cfg, args)
    except UsageError as exc:
        print(f"rdaegrid: error: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, CaseParseError, CaseValidationError, ArtifactError, ValueError, KeyError) as exc:
        print(f"rdaegrid: error: {exc}", file=sys.stderr)
        return 1
    except (DispatchError, TrainingDivergedError, attacks.InfeasibleMaskError, RuntimeError) as exc:
        print(f"rdaegrid: failed: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
