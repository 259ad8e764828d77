"""``unlearn-lab`` experiment driver.

Every subcommand loops over the configured seeds and writes plain CSV /
JSON files. Files whose name contains ``.timing.`` hold wall-clock
measurements; every other file is a pure function of config and seed and is
byte-identical across re-runs and ``--jobs`` values.
"""

from __future__ import annotations

import argparse
import csv
import filecmp
import json
import logging
import math
import os
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np
from joblib import Parallel, delayed
from scipy import stats

from . import __version__
from .config import REQUIRED, ConfigError, load_config
from .data import select_forget, write_dataset_csv
from .evaluation import evaluate, mia_score
from .memorization import estimate_memorization
from .nn_core import save_checkpoint
from .proxies import (LEARNING_EVENT_FIELDS, FIDELITY_COLUMNS, fidelity_report,
                      holdout_retraining_proxy, learning_event_proxies, loss_curvature_proxy,
                      write_fidelity_csv)
from .rum import ids_digest, non_increasing, run_approach, sequential_stability
from .scores import read_score_csv, sidecar, write_score_csv
from .trainer import fresh_model, train
from .unlearn import retrain

log = logging.getLogger("unlearn_lab")

COMMANDS = tuple(REQUIRED)
REPORT_FIELDS = ("acc_forget_u", "acc_retain_u", "acc_test_u", "acc_forget_r", "acc_retain_r",
                 "acc_test_r", "mia_u", "mia_r", "tow", "tow_mia")


class OverwriteRefused(RuntimeError):
    pass


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "nan" if math.isnan(v) else repr(float(v))
    return str(v)


def _json_safe(v):
    if isinstance(v, dict):
        return {k: _json_safe(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_json_safe(x) for x in v]
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return None if math.isnan(v) else float(v)
    return v


class Outputs:
    """Stage files in a scratch directory and publish them all at once.

    Publishing refuses to replace an existing deterministic file whose bytes
    differ, unless ``force`` is set. Timing files are always replaced.
    """

    def __init__(self, root, force=False):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.force = force
        self.stage = Path(tempfile.mkdtemp(prefix=".staging-", dir=self.root))
        self.files = []

    def path(self, rel) -> Path:
        p = self.stage / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        self.files.append(rel)
        return p

    def write_text(self, rel, text: str) -> None:
        with open(self.path(rel), "w", encoding="utf-8", newline="") as fh:
            fh.write(text)

    def write_json(self, rel, payload) -> None:
        self.write_text(rel, json.dumps(_json_safe(payload), indent=2, sort_keys=True) + "\n")

    def write_csv(self, rel, header, rows, preamble="") -> None:
        with open(self.path(rel), "w", encoding="utf-8", newline="") as fh:
            fh.write(preamble)
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([_fmt(row[h]) for h in header])

    def commit(self) -> list:
        try:
            clashes = []
            for rel in self.files:
                dest = self.root / rel
                if ".timing." in Path(rel).name or not dest.exists():
                    continue
                if not filecmp.cmp(self.stage / rel, dest, shallow=False):
                    clashes.append(str(dest))
            if clashes and not self.force:
                raise OverwriteRefused(
                    "refusing to overwrite differing results (use --force): " + ", ".join(clashes))
            for rel in self.files:
                dest = self.root / rel
                dest.parent.mkdir(parents=True, exist_ok=True)
                os.replace(self.stage / rel, dest)
            return [self.root / rel for rel in self.files]
        finally:
            self.discard()

    def discard(self) -> None:
        shutil.rmtree(self.stage, ignore_errors=True)


def _preamble(command, digest, seed) -> str:
    return f"# unlearn-lab {command} config_digest={digest} seed={seed}\n"


def _read_preamble(path) -> dict:
    try:
        with open(path) as fh:
            first = fh.readline()
    except OSError:
        return {}
    if not first.startswith("# unlearn-lab"):
        return {}
    return dict(tok.split("=", 1) for tok in first.split() if "=" in tok)


def _ci95(values):
    """Mean and Student-t half-width over seeds (NaN half-width for one seed)."""
    v = np.asarray(values, dtype=np.float64)
    mean = float(v.mean())
    if len(v) < 2:
        return mean, float("nan")
    half = stats.t.ppf(0.975, len(v) - 1) * v.std(ddof=1) / math.sqrt(len(v))
    return mean, float(half)


def _run_seeds(fn, seeds, jobs):
    """Run ``fn(seed)`` per seed; results come back keyed by seed."""
    if jobs == 1 or len(seeds) == 1:
        out = [fn(s) for s in seeds]
    else:
        out = Parallel(n_jobs=jobs)(delayed(fn)(s) for s in seeds)
    return dict(zip(seeds, out))


# shared pipeline pieces

def _trained(cfg, seed):
    data = cfg.dataset(seed)
    tcfg = cfg.train_cfg(seed)
    res = train(fresh_model(data, tcfg), data, data.train_ids, tcfg,
                checkpoint_every=cfg.checkpoint_every())
    return data, res


def _proxies(cfg, seed, data, res, kinds):
    out = {}
    events = None
    for kind in kinds:
        if kind in LEARNING_EVENT_FIELDS:
            events = events or learning_event_proxies(res.events, res.log_time)
            out[kind] = events[kind]
        elif kind == "holdout_retraining":
            out[kind] = holdout_retraining_proxy(res.model, data, cfg.holdout_cfg(seed))
        elif kind == "loss_curvature":
            out[kind] = loss_curvature_proxy(res.checkpoints, data, cfg.curvature_cfg(seed))
    return out


def _memorization(cfg, seed, data, jobs, out_root):
    """Reuse a matching memorization table from an earlier ``mem`` run."""
    digest = cfg.digest(REQUIRED["mem"])
    csv_path = Path(out_root) / f"seed{seed}" / "memorization.csv"
    timing = Path(out_root) / f"seed{seed}" / "memorization.timing.json"
    head = _read_preamble(csv_path)
    if head.get("config_digest") == digest and head.get("seed") == str(seed) and timing.exists():
        table = read_score_csv(csv_path)
        table.wall_time = json.loads(timing.read_text())["wall_time_s"]
        log.info("seed %d: reusing %s", seed, csv_path)
        return table
    return estimate_memorization(data, cfg.train_cfg(seed), cfg.mem_cfg(seed), n_jobs=jobs)


# subcommands

def cmd_gen_data(cfg, out, jobs):
    digest = cfg.digest(REQUIRED["gen-data"])
    for seed in cfg.seeds:
        write_dataset_csv(cfg.dataset(seed), out.path(f"seed{seed}/dataset.csv"),
                          _preamble("gen-data", digest, seed))


def cmd_train(cfg, out, jobs):
    digest = cfg.digest(REQUIRED["train"])
    for seed in cfg.seeds:
        _, res = _trained(cfg, seed)
        save_checkpoint(res.model, out.path(f"seed{seed}/model.ckpt"),
                        meta={"config_digest": digest, "seed": seed})
        res.events.write_csv(out.path(f"seed{seed}/events.csv"), _preamble("train", digest, seed))
        out.write_json(f"seed{seed}/train.timing.json",
                       {"config_digest": digest, "seed": seed, "wall_time_s": res.wall_time,
                        "log_time_s": res.log_time})
        print(f"seed {seed}: trained in {res.wall_time:.2f}s, final loss {res.losses[-1]:.4f}")


def cmd_mem(cfg, out, jobs):
    digest = cfg.digest(REQUIRED["mem"])
    for seed in cfg.seeds:
        data = cfg.dataset(seed)
        table = estimate_memorization(data, cfg.train_cfg(seed), cfg.mem_cfg(seed), n_jobs=jobs)
        write_score_csv(table, out.path(f"seed{seed}/memorization.csv"),
                        _preamble("mem", digest, seed))
        out.write_text(f"seed{seed}/memorization.json",
                       sidecar(table, config_digest=digest, n_examples=len(table.ids)))
        out.write_json(f"seed{seed}/memorization.timing.json",
                       {"config_digest": digest, "seed": seed, "wall_time_s": table.wall_time})
        print(f"seed {seed}: memorization over {len(table.ids)} examples "
              f"(T={table.meta['T']}, p={table.meta['p']}) in {table.wall_time:.2f}s")


def cmd_proxy(cfg, out, jobs):
    digest = cfg.digest(REQUIRED["proxy"])
    kinds = cfg["proxy"]["kinds"]
    for seed in cfg.seeds:
        data, res = _trained(cfg, seed)
        tables = _proxies(cfg, seed, data, res, kinds)
        for kind in kinds:
            write_score_csv(tables[kind], out.path(f"seed{seed}/proxy_{kind}.csv"),
                            _preamble("proxy", digest, seed))
        out.write_json(f"seed{seed}/proxy.timing.json",
                       {"config_digest": digest, "seed": seed,
                        "wall_time_s": {k: tables[k].wall_time for k in kinds}})


def cmd_fidelity(cfg, out, jobs):
    digest = cfg.digest(REQUIRED["fidelity"])
    kinds = cfg["proxy"]["kinds"]
    per_seed = {}
    for seed in cfg.seeds:
        data, res = _trained(cfg, seed)
        mem = _memorization(cfg, seed, data, jobs, out.root)
        tables = _proxies(cfg, seed, data, res, kinds)
        per_seed[seed] = fidelity_report(mem, [tables[k] for k in kinds], res.wall_time)
    seeds_tag = ",".join(map(str, cfg.seeds))
    runs = [{"seed": s, **row} for s in cfg.seeds for row in per_seed[s]]
    out.write_csv("fidelity_runs.csv", ["seed", "proxy", "spearman_vs_mem"], runs,
                  _preamble("fidelity", digest, seeds_tag))
    summary, timing = [], []
    for i, kind in enumerate(kinds):
        rows = [per_seed[s][i] for s in cfg.seeds]
        mean, half = _ci95([r["spearman_vs_mem"] for r in rows])
        summary.append({"proxy": kind, "spearman_vs_mem": mean, "spearman_ci95": half,
                        "n_seeds": len(rows)})
        timing.append({"proxy": kind, "spearman_vs_mem": mean,
                       **{c: float(np.mean([r[c] for r in rows])) for c in FIDELITY_COLUMNS[2:]}})
    out.write_csv("fidelity.csv", ["proxy", "spearman_vs_mem", "spearman_ci95", "n_seeds"],
                  summary, _preamble("fidelity", digest, seeds_tag))
    write_fidelity_csv(timing, out.path("fidelity.timing.csv"),
                       preamble=_preamble("fidelity", digest, seeds_tag))
    for row in timing:
        print(f"{row['proxy']:>20}  spearman={row['spearman_vs_mem']:+.3f}  "
              f"time={row['wall_time_s']:.3f}s ({row['pct_of_mem_time']:.3f}% of mem)")


def _rum_seed(cfg, seed):
    """All (algorithm, approach, proxy) runs for one seed, plus retrain rows."""
    data, res = _trained(cfg, seed)
    kinds = cfg["proxy"]["kinds"]
    tables = _proxies(cfg, seed, data, res, kinds)
    tcfg, mcfg, K = cfg.train_cfg(seed), cfg.mia_cfg(seed), cfg["rum"]["K"]
    rows = []
    for kind in kinds:
        task = select_forget(tables[kind], cfg["rum"]["band_size"])
        oracle, oracle_time = retrain(data, task, tcfg)
        m_r = mia_score(oracle, data, task, mcfg)
        base = {"proxy": kind, "seed": seed, "forget_ids_digest": ids_digest(task.forget_ids)}
        rep = evaluate(oracle, oracle, data, task, mcfg, oracle_time, mia_r=m_r)
        rows.append({"algorithm": "retrain", "approach": "retrain", **base,
                     **{f: getattr(rep, f) for f in REPORT_FIELDS}, "wall_time_s": oracle_time})
        for algorithm in cfg["unlearn"]["algorithms"]:
            ucfg = cfg.unlearn_cfg(algorithm, seed)
            for approach in cfg["rum"]["approaches"]:
                result = run_approach(approach, res.model, data, task, ucfg, scores=tables[kind],
                                      K=K, seed=seed, train_cfg=tcfg)
                rep = evaluate(result.model, oracle, data, task, mcfg, result.wall_time, mia_r=m_r)
                rows.append({"algorithm": algorithm, "approach": approach, **base,
                             **{f: getattr(rep, f) for f in REPORT_FIELDS},
                             "wall_time_s": result.wall_time})
    return rows


def cmd_rum(cfg, out, jobs):
    digest = cfg.digest(REQUIRED["rum"])
    seeds_tag = ",".join(map(str, cfg.seeds))
    by_seed = _run_seeds(lambda s: _rum_seed(cfg, s), list(cfg.seeds), jobs)
    runs = [row for s in cfg.seeds for row in by_seed[s]]
    keys = ["algorithm", "approach", "proxy", "seed"]
    head = keys + list(REPORT_FIELDS) + ["forget_ids_digest"]
    pre = _preamble("rum", digest, seeds_tag)
    out.write_csv("rum_runs.csv", head, runs, pre)
    out.write_csv("rum_runs.timing.csv", keys + ["wall_time_s"], runs, pre)

    groups = {}
    for row in runs:
        groups.setdefault((row["algorithm"], row["approach"], row["proxy"]), []).append(row)
    summary, timing = [], []
    for (algorithm, approach, proxy), rows in groups.items():
        t_mean, t_ci = _ci95([r["tow"] for r in rows])
        m_mean, m_ci = _ci95([r["tow_mia"] for r in rows])
        w_mean, w_ci = _ci95([r["wall_time_s"] for r in rows])
        key = {"algorithm": algorithm, "approach": approach, "proxy": proxy, "n_seeds": len(rows)}
        summary.append({**key, "tow_mean": t_mean, "tow_ci95": t_ci,
                        "tow_mia_mean": m_mean, "tow_mia_ci95": m_ci})
        timing.append({**key, "wall_time_mean": w_mean, "wall_time_ci95": w_ci})
    cols = ["algorithm", "approach", "proxy", "n_seeds"]
    out.write_csv("rum_summary.csv", cols + ["tow_mean", "tow_ci95", "tow_mia_mean",
                                             "tow_mia_ci95"], summary, pre)
    out.write_csv("rum_summary.timing.csv", cols + ["wall_time_mean", "wall_time_ci95"],
                  timing, pre)
    out.write_json("rum.json", {
        "config_digest": digest, "seed": list(cfg.seeds), "summary": summary,
        "runs": [{k: v for k, v in r.items() if k != "wall_time_s"} for r in runs],
    })
    for row in summary:
        print(f"{row['algorithm']:>12} {row['approach']:>8} {row['proxy']:>20}  "
              f"ToW={row['tow_mean']:.4f}±{row['tow_ci95']:.4f}  "
              f"ToW-MIA={row['tow_mia_mean']:.4f}±{row['tow_mia_ci95']:.4f}")


def _sequential_seed(cfg, seed):
    data, res = _trained(cfg, seed)
    kind = cfg["sequential"]["proxy"]
    initial = _proxies(cfg, seed, data, res, [kind])[kind]
    out = {}
    for algorithm in cfg["unlearn"]["algorithms"]:
        out[algorithm] = sequential_stability(
            data, res.model, kind, cfg.sequential_cfg(algorithm, seed),
            cfg["sequential"]["n_steps"], cfg["rum"]["band_size"], initial=initial)
    return out


def cmd_sequential(cfg, out, jobs):
    # proxy settings feed the recomputed tables, so they belong in the digest
    digest = cfg.digest(REQUIRED["sequential"] + ("proxy",))
    seeds_tag = ",".join(map(str, cfg.seeds))
    by_seed = _run_seeds(lambda s: _sequential_seed(cfg, s), list(cfg.seeds), jobs)
    lines, timing_lines, gini_rows, checks = [], [], [], []
    for seed in cfg.seeds:
        for algorithm, result in by_seed[seed].items():
            for track, steps in result["steps"].items():
                for st in steps:
                    rec = {"config_digest": digest, "seed": seed, "algorithm": algorithm,
                           **st.record()}
                    timing_lines.append(json.dumps(_json_safe(rec), sort_keys=True))
                    rec.pop("wall_time_s")
                    lines.append(json.dumps(_json_safe(rec), sort_keys=True))
                series = result["gini"][track]
                for step, g in enumerate(series):
                    increased = step > 0 and g > series[step - 1]
                    gini_rows.append({"seed": seed, "algorithm": algorithm, "track": track,
                                      "step": step, "gini": g, "increase_flag": increased})
                ok = non_increasing(series)
                checks.append({"seed": seed, "algorithm": algorithm, "track": track,
                               "non_increasing": ok})
                if not ok:
                    log.warning("seed %d %s/%s: Gini rose during the run: %s", seed, algorithm,
                                track, ", ".join(f"{g:.4f}" for g in series))
    out.write_text("sequential.jsonl", "".join(line + "\n" for line in lines))
    out.write_text("sequential.timing.jsonl", "".join(line + "\n" for line in timing_lines))
    pre = _preamble("sequential", digest, seeds_tag)
    out.write_csv("gini.csv", ["seed", "algorithm", "track", "step", "gini", "increase_flag"],
                  gini_rows, pre)
    out.write_csv("gini_checks.csv", ["seed", "algorithm", "track", "non_increasing"], checks, pre)
    tracks = sorted({(c["algorithm"], c["track"]) for c in checks})
    for algorithm, track in tracks:
        sel = [c for c in checks if c["algorithm"] == algorithm and c["track"] == track]
        print(f"{algorithm} {track}: Gini non-increasing in "
              f"{sum(c['non_increasing'] for c in sel)}/{len(sel)} seeds")


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "mem": cmd_mem,
    "proxy": cmd_proxy,
    "fidelity": cmd_fidelity,
    "rum": cmd_rum,
    "sequential": cmd_sequential,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="unlearn-lab",
                                description="Memorization-aware unlearning experiments.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="sectioned key=value config file")
    p.add_argument("--seed", type=int, help="run this seed instead of [experiment] seeds")
    p.add_argument("--out", help="output directory (default: [experiment] output_dir)")
    p.add_argument("--force", action="store_true", help="overwrite differing results")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return 2
    try:
        cfg = load_config(args.config)
        cfg.require(args.command)
        if args.seed is not None:
            cfg = cfg.with_seeds([args.seed])
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out = Outputs(args.out or cfg.output_dir, force=args.force)
    try:
        HANDLERS[args.command](cfg, out, args.jobs)
        written = out.commit()
    except Exception as exc:  # noqa: BLE001 - report and map to exit code 1
        out.discard()
        log.debug("failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for path in written:
        log.info("wrote %s", path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
