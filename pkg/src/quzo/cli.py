"""``quzo`` command line: train, bias-sweep, dtype-search, mem-report, gen-data."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings

from threadpoolctl import threadpool_limits

from . import analysis
from .config import canonical, load_config, run_id, train_config
from .data import Dataset, gen_synthetic, load_csv, save_csv
from .errors import ConfigurationError, QuzoError
from .models import MLP, TinyEncoder, load_checkpoint, save_checkpoint
from .trainer import train

log = logging.getLogger("quzo")


def _write(out, name, text):
    with open(os.path.join(out, name), "w", newline="") as fh:
        fh.write(text)


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n"


def _dataset(cfg) -> Dataset:
    d = cfg["data"]
    if d["path"]:
        return load_csv(d["path"])
    return gen_synthetic(cfg["task"], d["n"], d["seed"], dim=d["dim"], margin=d["margin"],
                         vocab=d["vocab"], seq_len=d["seq_len"])


def _model(cfg, dataset: Dataset):
    m = cfg["model"]
    if m["checkpoint"]:
        return load_checkpoint(m["checkpoint"])
    if m["kind"] == "encoder":
        if dataset.inputs.ndim != 2 or dataset.targets.ndim != 2:
            raise ConfigurationError("the encoder needs a token sequence task")
        d = cfg["data"]
        return TinyEncoder(d["vocab"], d["seq_len"], m["d_model"], m["heads"], blocks=m["blocks"],
                           seed=cfg["seed"])
    if dataset.targets.ndim != 1:
        raise ConfigurationError("the MLP needs a classification task with one label per row")
    return MLP([dataset.inputs.shape[1], *m["hidden"], max(dataset.n_classes, 2)],
               m["activation"], seed=cfg["seed"])


def cmd_train(cfg, out):
    data = _dataset(cfg)
    model = _model(cfg, data)
    model, tlog = train(model, data, train_config(cfg))
    _write(out, "train_log.csv", tlog.to_csv())
    _write(out, "summary.json", _json(tlog.summary))
    save_checkpoint(model, os.path.join(out, "model.ckpt"))
    log.info("final loss %.4f, accuracy %.4f", tlog.summary["final_loss"], tlog.summary["final_acc"])


def cmd_bias_sweep(cfg, out):
    data = _dataset(cfg)
    model = _model(cfg, data)
    bs = cfg["bias_sweep"]
    batch = data.batch(slice(0, bs["batch_size"]))
    res = analysis.bias_sweep(model, batch, bs["bits"], bs["n"], bs["epsilon"], cfg["seed"])
    _write(out, "bias_sweep.csv", res.to_csv())
    _write(out, "bias_sweep_long.csv", res.to_long_csv())
    _write(out, "bias_sweep.json", _json(res.to_json()))


def cmd_dtype_search(cfg, out):
    data = _dataset(cfg)
    model = _model(cfg, data)
    ds = cfg["dtype_search"]
    rep = analysis.datatype_search(model, ds["candidates"], ds["granularity"])
    _write(out, "dtype_search.csv", rep.to_csv())
    _write(out, "dtype_search.json", _json(rep.to_json()))


def cmd_mem_report(cfg, out):
    data = _dataset(cfg)
    model = _model(cfg, data)
    be = cfg["mem_report"]["batch_elems"]
    if be is None:
        be = cfg["train"]["batch_size"] * (cfg["data"]["seq_len"] if cfg["model"]["kind"] == "encoder" else 1)
    reports = analysis.memory_table(model, be)
    _write(out, "mem_report.csv", analysis.memory_csv(reports))
    _write(out, "mem_report.json", _json([dict(zip(
        ("optimizer", "weight_mem", "dynamic_mem", "weight_bytes", "dynamic_bytes", "total_bytes"),
        r.row())) for r in reports]))


def cmd_gen_data(cfg, out):
    save_csv(_dataset(cfg), os.path.join(out, "data.csv"))


COMMANDS = {
    "train": cmd_train,
    "bias-sweep": cmd_bias_sweep,
    "dtype-search": cmd_dtype_search,
    "mem-report": cmd_mem_report,
    "gen-data": cmd_gen_data,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--out", help="output directory (default runs/<command>-<run id>)")
    common.add_argument("--seed", type=int, help="master seed, overrides the config")
    common.add_argument("--threads", type=int, help="BLAS threads")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="quzo", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    overrides = {k: v for k, v in (("seed", args.seed), ("out", args.out),
                                   ("threads", args.threads)) if v is not None}
    if args.seed is not None:
        overrides["train"] = {"seed": args.seed}
    try:
        cfg = load_config(args.config, overrides)
    except ConfigurationError as exc:
        print(f"quzo: {exc}", file=sys.stderr)
        return 2
    rid = run_id(cfg, args.command)
    out = cfg["out"] or os.path.join("runs", f"{args.command}-{rid[:12]}")
    try:
        os.makedirs(out, exist_ok=True)
        _write(out, "config.resolved.json", _json(cfg))
        _write(out, "run.json", _json({"command": args.command, "run_id": rid,
                                       "config_sha1": rid, "canonical_config": canonical(cfg)}))
        with threadpool_limits(cfg["threads"]), warnings.catch_warnings():
            warnings.simplefilter("default")
            COMMANDS[args.command](cfg, out)
    except ConfigurationError as exc:
        print(f"quzo: {exc}", file=sys.stderr)
        return 2
    except (QuzoError, OSError) as exc:
        print(f"quzo: {exc}", file=sys.stderr)
        return 1
    log.info("wrote %s", out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
