"""Experiment runner: deterministic simulation or one socket role per process."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .allreduce import LayoutMismatch, ServerLost, SimulatedCluster, SocketOptions, WorkerLost, run_worker, serve
from .config import PRESETS, ConfigError, ExperimentConfig, ToleranceConfig, from_ini, parse_address, preset
from .kernels import BACKEND, stream_key
from .metrics import Direction, summarize, write_csv
from .transport import TransportError
from .workload import BlobDataset, SyntheticWorker, ToyModel, ToyWorker, make_blobs, toy_eval

log = logging.getLogger("dblp")

WORKER_STREAM = 0x574B5252


class RuntimeFailure(RuntimeError):
    pass


def _seed32(seed: int, *words: int) -> int:
    return stream_key(seed, *words) & 0xFFFFFFFF


def worker_dataset(cfg: ExperimentConfig, i: int) -> BlobDataset:
    wl = cfg.workload
    return make_blobs(wl.examples, wl.classes, wl.features, wl.separation,
                      center_seed=cfg.seed, seed=_seed32(cfg.seed, WORKER_STREAM, i))


def make_worker(cfg: ExperimentConfig, i: int):
    wl = cfg.workload
    if wl.kind == "toy":
        model = ToyModel.init(wl.classes, wl.features, wl.lr, seed=cfg.seed)
        return ToyWorker(model, worker_dataset(cfg, i), wl.batch_size, _seed32(cfg.seed, WORKER_STREAM, i, 1))
    return SyntheticWorker(wl.layout, cfg.norm_profile(), _seed32(cfg.seed, WORKER_STREAM, i))


def model_layout(cfg: ExperimentConfig):
    wl = cfg.workload
    if wl.kind == "toy":
        return ToyModel.init(wl.classes, wl.features).layout
    return wl.layout


def train_accuracy(cfg: ExperimentConfig, workers) -> float:
    """Mean over workers of each local model's accuracy on the union of all training shards."""
    shards = [worker_dataset(cfg, i) for i in range(cfg.workers)]
    x = np.concatenate([d.x for d in shards])
    y = np.concatenate([d.y for d in shards])
    return float(np.mean([toy_eval(w.model, x, y) for w in workers]))


@dataclass
class SimRun:
    records: list
    workers: list
    elapsed: float


def simulate(cfg: ExperimentConfig, tolerance: ToleranceConfig) -> SimRun:
    t0 = time.perf_counter()
    net = cfg.network
    cluster = SimulatedCluster(
        [make_worker(cfg, i) for i in range(cfg.workers)], tolerance.build(),
        loss=net.schedule(cfg.seed), delay=net.delay(), timing=net.timing(),
        max_payload=net.max_payload, compute_time=net.compute_time,
    )
    out = cluster.run(cfg.steps)
    return SimRun(out.records, cluster.workers, time.perf_counter() - t0)


def pass_stats(records) -> dict:
    w2s = [r for r in records if r.direction is Direction.W2S]
    burst = [r.passes for r in w2s if r.burst_round]
    calm = [r.passes for r in w2s if not r.burst_round and not r.clr_active]
    return {
        "total_passes": int(sum(r.passes for r in records)),
        "w2s_passes": int(sum(r.passes for r in w2s)),
        "burst_passes": sorted(set(burst)),
        "non_clr_passes": sorted(set(calm)),
        "clr_fraction": len({r.round for r in w2s if r.clr_active}) / max(1, len({r.round for r in w2s})),
    }


def _summary_block(label: str, records, comparison=None) -> tuple[str, dict]:
    w2s = [r for r in records if r.direction is Direction.W2S]
    cmp_w2s = None if comparison is None else [r for r in comparison if r.direction is Direction.W2S]
    s = summarize(w2s, cmp_w2s)
    d = s.to_dict()
    d.update(pass_stats(records))
    text = s.to_text(f"{label}: worker->server") + f"\n  passes   {d['total_passes']} total, " \
        f"burst {d['burst_passes']}, non-CLR {d['non_clr_passes']}, CLR rounds {d['clr_fraction']:.1%}"
    return text, d


def write_outputs(cfg: ExperimentConfig, out: Path, runs: dict, extra: dict | None = None) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    summary: dict = {"name": cfg.name, "mode": cfg.mode, "steps": cfg.steps, "workers": cfg.workers}
    texts = [f"{cfg.name} ({cfg.mode}, {cfg.workers} workers, {cfg.steps} steps, seed {cfg.seed})"]
    base = runs.get("baseline")
    for label, records in runs.items():
        write_csv(out / f"{label}.csv", records)
        text, d = _summary_block(label, records, base if label != "baseline" else None)
        texts.append(text)
        summary[label] = d
    if extra:
        summary.update(extra)
        texts.extend(f"{k}: {v}" for k, v in extra.items())
    (out / "summary.txt").write_text("\n".join(texts) + "\n")
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def write_manifest(cfg: ExperimentConfig, out: Path, files) -> None:
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "version": __version__,
        "kernel_backend": BACKEND,
        "seed": cfg.seed,
        "mode": cfg.mode,
        "files": sorted(files),
        "config": cfg.to_ini(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _options(cfg: ExperimentConfig) -> SocketOptions:
    return SocketOptions(cfg.network.max_payload, cfg.socket.probe_timeout, recv_timeout=cfg.socket.recv_timeout)


def run(cfg: ExperimentConfig) -> dict:
    cfg.validate()
    out = Path(cfg.out)
    if cfg.mode == "simulate":
        main_run = simulate(cfg, cfg.tolerance)
        runs = {"dblp": main_run.records}
        extra = {}
        base_run = None
        if cfg.baseline is not None:
            base_run = simulate(cfg, cfg.baseline)
            runs["baseline"] = base_run.records
        if cfg.workload.kind == "toy":
            extra["accuracy_dblp"] = train_accuracy(cfg, main_run.workers)
            if base_run is not None:
                extra["accuracy_baseline"] = train_accuracy(cfg, base_run.workers)
        summary = write_outputs(cfg, out, runs, extra)
        write_manifest(cfg, out, [f"{k}.csv" for k in runs] + ["summary.txt", "summary.json"])
        return summary

    opts = _options(cfg)
    try:
        if cfg.mode == "server":
            log.info("serving %d workers on %s", cfg.workers, cfg.socket.listen)
            res = serve(parse_address(cfg.socket.listen), cfg.workers, cfg.steps, cfg.tolerance.build(),
                        model_layout(cfg), options=opts)
            summary = write_outputs(cfg, out, {"dblp": res.records})
            write_manifest(cfg, out, ["dblp.csv", "summary.txt", "summary.json"])
            return summary
        wid, workload = run_worker(parse_address(cfg.socket.connect), model_layout(cfg),
                                   lambda i: make_worker(cfg, i), cfg.steps, opts)
    except (WorkerLost, ServerLost, TransportError, LayoutMismatch, OSError) as e:
        raise RuntimeFailure(str(e)) from e
    info = {"worker_id": wid, "steps": cfg.steps}
    if cfg.workload.kind == "toy":
        shard = worker_dataset(cfg, wid)
        info["train_accuracy"] = toy_eval(workload.model, shard.x, shard.y)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"worker-{wid}.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    write_manifest(cfg, out, [f"worker-{wid}.json"])
    return info


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dblp", description="Bounded-loss gradient transport experiments")
    ap.add_argument("--config", help="INI experiment file")
    ap.add_argument("--preset", choices=sorted(PRESETS), help="start from a shipped experiment")
    ap.add_argument("--mode", choices=["simulate", "server", "worker"])
    ap.add_argument("--seed", type=int)
    ap.add_argument("--steps", type=int)
    ap.add_argument("--workers", type=int)
    ap.add_argument("--out", help="output directory")
    ap.add_argument("--listen", help="server host:port")
    ap.add_argument("--connect", help="worker host:port")
    ap.add_argument("--baseline", action="store_true", help="run the baseline tolerance instead (socket modes)")
    ap.add_argument("--list-presets", action="store_true")
    return ap


def config_from_args(args) -> ExperimentConfig:
    cfg = preset(args.preset) if args.preset else None
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config: {e}") from None
        cfg = from_ini(text, cfg)
    if cfg is None:
        cfg = ExperimentConfig()
    for key in ("mode", "seed", "steps", "workers", "out"):
        v = getattr(args, key)
        if v is not None:
            setattr(cfg, key, v)
    if args.listen:
        cfg.socket.listen = args.listen
    if args.connect:
        cfg.socket.connect = args.connect
    if args.baseline:
        if cfg.baseline is None:
            raise ConfigError("--baseline needs a [baseline] section")
        cfg.tolerance, cfg.baseline = cfg.baseline, None
    return cfg


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("DBLP_LOG", "WARNING").upper(),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    if args.list_presets:
        for name in sorted(PRESETS):
            print(name)
        return 0
    try:
        cfg = config_from_args(args)
        result = run(cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except RuntimeFailure as e:
        print(f"run failed: {e}", file=sys.stderr)
        return 1
    if cfg.mode == "simulate" or cfg.mode == "server":
        print((Path(cfg.out) / "summary.txt").read_text(), end="")
    else:
        print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
