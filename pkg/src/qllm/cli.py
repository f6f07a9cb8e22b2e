"""Command line front end.

Every subcommand reads and writes artifacts under ``--out-dir``::

    qllm gen-model --seed 0 --out-dir run
    qllm gen-calib --out-dir run
    qllm stats --out-dir run
    qllm reassemble --mode adaptive --grid-points 16 --out-dir run
    qllm quantize --bits-w 4 --bits-a 4 --out-dir run
    qllm correct --rank 4 --epochs 5 --out-dir run
    qllm eval --out-dir run --report run/eval.json

or, in one go, ``qllm run --config cfg.json``.  Exit status: 0 on success,
1 when a stage fails, 2 for invalid arguments or configuration, 3 when the
run finished but an invariant check failed.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

from .checkpoint import (CheckpointError, load_calibration, load_checkpoint, load_quantized,
                         save_calibration, save_checkpoint, save_quantized)
from .correction import sequential_correct
from .metrics import channel_minmax_report, stage_output_mse
from .model import quantize_model, site_activations
from .pipeline import (SITE_CONSUMERS, ConfigError, PipelineConfig, StageError, _csv_text, _dump, _fmt,
                       build_plans, make_calibration, make_eval_set, make_model, run_pipeline)
from .reassembly import ReassemblyPlan

log = logging.getLogger("qllm")


FLAG_TO_FIELD = {"seed": "seed", "out_dir": "out_dir", "bits_w": "w_bits", "bits_a": "a_bits",
                 "gamma": "gamma", "grid_points": "grid_points", "mode": "mode", "rank": "rank",
                 "epochs": "epochs", "group_size": "group_size"}


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat JSON config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out-dir", dest="out_dir")
    common.add_argument("--bits-w", dest="bits_w", type=int)
    common.add_argument("--bits-a", dest="bits_a", type=int)
    common.add_argument("--gamma", type=float)
    common.add_argument("--grid-points", dest="grid_points", type=int)
    common.add_argument("--mode", choices=("off", "fixed_ratio", "adaptive"))
    common.add_argument("--rank", type=int)
    common.add_argument("--epochs", type=int)
    common.add_argument("--group-size", dest="group_size", type=int)
    common.add_argument("--report", type=Path, help="where to write the JSON report")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="qllm", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in (("gen-model", "generate a synthetic model checkpoint"),
                        ("gen-calib", "generate calibration and evaluation sets"),
                        ("stats", "per-channel min/max of every reassembly site"),
                        ("reassemble", "build reassembly plans"),
                        ("quantize", "reassemble and quantize the model"),
                        ("correct", "low-rank error correction of the quantized model"),
                        ("eval", "output MSE of every available model"),
                        ("run", "the whole pipeline")):
        sub.add_parser(name, parents=[common], help=help_)
    return p


def load_config(args) -> PipelineConfig:
    cfg = PipelineConfig.from_file(args.config) if args.config else PipelineConfig()
    overrides = {field: getattr(args, flag) for flag, field in FLAG_TO_FIELD.items()}
    cfg = cfg.updated(**overrides)
    cfg.validate()
    return cfg


def _out(cfg: PipelineConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _need(path: Path, what: str, hint: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"{what} not found at {path}; run `qllm {hint}` first")
    return path


def _write_report(report: dict, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_text(_dump(report))
    tmp.replace(path)


def cmd_gen_model(cfg, args) -> int:
    out = _out(cfg)
    save_checkpoint(make_model(cfg), out / "model")
    print(f"wrote {out / 'model'}")
    return 0


def cmd_gen_calib(cfg, args) -> int:
    out = _out(cfg)
    mc = cfg.model_config()
    save_calibration(make_calibration(cfg), out / "calibration", mc)
    save_calibration(make_eval_set(cfg), out / "eval", mc)
    print(f"wrote {out / 'calibration'} and {out / 'eval'}")
    return 0


def cmd_stats(cfg, args) -> int:
    out = _out(cfg)
    model = load_checkpoint(_need(out / "model", "model", "gen-model"))
    calib = load_calibration(_need(out / "calibration", "calibration set", "gen-calib"))
    rows, xs = [], list(calib.samples)
    for i, block in enumerate(model.blocks):
        acts = [site_activations(x, block) for x in xs]
        for site in SITE_CONSUMERS:
            rows += [(i, site, c, _fmt(lo), _fmt(hi)) for c, lo, hi in channel_minmax_report([a[site] for a in acts])]
        xs = [a["out"] for a in acts]
    (out / "channel_stats.csv").write_text(_csv_text(("layer", "site", "channel", "min", "max"), rows))
    first = [r for r in rows if r[0] == 0 and r[1] == "attn"]
    top = max(first, key=lambda r: max(abs(float(r[3])), abs(float(r[4]))))
    print(f"wrote {out / 'channel_stats.csv'}; largest layer-0 attention-input channel: {top[2]}")
    return 0


def cmd_reassemble(cfg, args) -> int:
    out = _out(cfg)
    model = load_checkpoint(_need(out / "model", "model", "gen-model"))
    calib = load_calibration(_need(out / "calibration", "calibration set", "gen-calib"))
    plans, summary = build_plans(model, calib.samples, cfg)
    doc = {"mode": cfg.mode, "layers": [{s: p.to_dict() for s, p in layer.items()} for layer in plans],
           "summary": summary}
    _write_report(doc, out / "plans.json")
    extra = sum(p.extra_channels for layer in plans for p in layer.values())
    print(f"wrote {out / 'plans.json'} ({extra} extra channels before assembly)")
    return 0


def _load_plans(out: Path, cfg) -> list[dict[str, ReassemblyPlan]] | None:
    path = out / "plans.json"
    if cfg.mode == "off":
        return None
    doc = json.loads(_need(path, "plans", "reassemble").read_text())
    return [{s: ReassemblyPlan.from_dict(d) for s, d in layer.items()} for layer in doc["layers"]]


def cmd_quantize(cfg, args) -> int:
    out = _out(cfg)
    model = load_checkpoint(_need(out / "model", "model", "gen-model"))
    qmodel = quantize_model(model, _load_plans(out, cfg), cfg.quant_config())
    save_quantized(qmodel, out / "quantized")
    print(f"wrote {out / 'quantized'}")
    return 0


def cmd_correct(cfg, args) -> int:
    out = _out(cfg)
    model = load_checkpoint(_need(out / "model", "model", "gen-model"))
    calib = load_calibration(_need(out / "calibration", "calibration set", "gen-calib"))
    qmodel = load_quantized(_need(out / "quantized", "quantized model", "quantize"))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        res = sequential_correct(model, qmodel, calib.samples, cfg.correction_config())
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    save_quantized(res.model, out / "corrected")
    traces = {"groups": [t.to_dict(max_steps=200) for t in res.traces]}
    _write_report(traces, args.report or out / "correction.json")
    for t in res.traces:
        print(f"group {list(t.group)}: loss {t.initial_loss:.4g} -> {t.final_loss:.4g}")
    print(f"wrote {out / 'corrected'}")
    return 0 if all(t.improved for t in res.traces) else 3


def cmd_eval(cfg, args) -> int:
    out = _out(cfg)
    model = load_checkpoint(_need(out / "model", "model", "gen-model"))
    evalset = load_calibration(_need(out / "eval", "evaluation set", "gen-calib"))
    results = {}
    for name in ("quantized", "corrected"):
        if (out / name).exists():
            results[name] = stage_output_mse(model, load_quantized(out / name), evalset.samples)
    if not results:
        raise FileNotFoundError(f"no quantized model under {out}; run `qllm quantize` first")
    report = {"output_mse": results, "n_eval": len(evalset.samples)}
    _write_report(report, args.report or out / "eval.json")
    for k, v in results.items():
        print(f"{k}: output MSE {v:.6g}")
    return 0


def cmd_run(cfg, args) -> int:
    report = run_pipeline(cfg)
    if args.report:
        _write_report(report, args.report)
    mse = report["metrics"]["output_mse"]["eval"]
    print("output MSE: " + ", ".join(f"{k} {v:.6g}" for k, v in mse.items()))
    print(f"wrote {Path(cfg.out_dir) / 'report.json'}")
    failed = [k for k, ok in report["checks"].items() if not ok]
    if failed:
        print(f"invariant checks failed: {', '.join(failed)}", file=sys.stderr)
        return 3
    return 0


COMMANDS = {"gen-model": cmd_gen_model, "gen-calib": cmd_gen_calib, "stats": cmd_stats,
            "reassemble": cmd_reassemble, "quantize": cmd_quantize, "correct": cmd_correct,
            "eval": cmd_eval, "run": cmd_run}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
    except (ConfigError, FileNotFoundError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        return COMMANDS[args.command](cfg, args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, CheckpointError, ValueError) as exc:
        print(f"error: {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
