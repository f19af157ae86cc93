"""Experiment runner.

    fedkd --config run.json --algo FedAL --seed 0..4 --out results/

Writes, per seed, ``manifest.json``, ``metrics.csv`` (one row per round),
parameter checkpoints and plot-ready TSV files. Exit status is 0 on success,
2 on an invalid configuration and 1 on any other failure.

metrics.csv columns, in order:
    round, algo, seed, mean_acc, acc_client_0..N-1, mean_pairwise_kl,
    zeta_0..N-1, up_cum, down_cum
``up_cum`` / ``down_cum`` are cumulative scalar counts summed over clients.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError
from .metrics import class_prob_matrix
from .nn import save_params
from .protocol import RunConfig, init_state, probe_variances, run

log = logging.getLogger("fedkd")

# CLI flag -> RunConfig field
FLAG_FIELDS = {
    "algo": "algo",
    "clients": "clients",
    "alpha": "alpha",
    "rounds": "rounds",
    "tau": "tau",
    "eta_l": "eta_l",
    "eta_d": "eta_d",
    "temp_kd": "temp_kd",
    "temp_disc": "temp_disc",
    "public_size": "public_size",
    "batch": "batch",
    "parallel": "parallel",
}
MANIFEST_TAG = "fedkd_manifest"


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedkd", description="Federated KD experiments (FedAL / FedMD / FedMD-LF).")
    p.add_argument("--config", help="JSON config or a previous run's manifest.json")
    p.add_argument("--algo", choices=["FedAL", "FedMD", "FedMD-LF"])
    p.add_argument("--clients", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--rounds", type=int)
    p.add_argument("--tau", type=int)
    p.add_argument("--eta-l", dest="eta_l", type=float)
    p.add_argument("--eta-d", dest="eta_d", type=float)
    p.add_argument("--temp-kd", dest="temp_kd", type=float)
    p.add_argument("--temp-disc", dest="temp_disc", type=float)
    p.add_argument("--public-size", dest="public_size", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--seed", help="an integer, a range like 0..4, or a comma list")
    p.add_argument("--out", help="output directory (default: $FEDKD_OUT or ./fedkd_out)")
    p.add_argument("--parallel", type=int, help="worker threads for client computation")
    p.add_argument("--probe-variance", dest="probe_variance", action="store_true", default=None)
    return p


def parse_seeds(spec) -> list[int]:
    if spec is None:
        return []
    if isinstance(spec, int):
        return [spec]
    s = str(spec).strip()
    try:
        if ".." in s:
            lo, hi = s.split("..")
            seeds = list(range(int(lo), int(hi) + 1))
        else:
            seeds = [int(x) for x in s.split(",")]
    except ValueError:
        raise ConfigError(f"invalid --seed {spec!r}; accepted: N, A..B or a comma list") from None
    if not seeds:
        raise ConfigError(f"empty seed range {spec!r}")
    return seeds


def _load_json(path) -> dict:
    try:
        data = json.loads(Path(path).read_text() or "{}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON ({e})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    if MANIFEST_TAG in data:
        data = data["config"]
    return data


def parse_config(path, args: argparse.Namespace | None = None) -> RunConfig:
    """File values, then CLI overrides, then validation. Unknown keys are errors."""
    values = _load_json(path) if path else {}
    known = {f.name for f in dataclasses.fields(RunConfig)}
    for key in values:
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
    if args is not None:
        for flag, field in FLAG_FIELDS.items():
            v = getattr(args, flag, None)
            if v is not None:
                values[field] = v
        if getattr(args, "probe_variance", None):
            values["probe_variance"] = True
        seeds = parse_seeds(getattr(args, "seed", None))
        if seeds:
            values["seed"] = seeds[0]
    try:
        return RunConfig(**values)
    except TypeError as e:
        raise ConfigError(str(e)) from None


def _git_blob_sha1(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def content_hash(config: RunConfig) -> str:
    """Git-style hash of the resolved config plus any dataset files it reads."""
    inputs = {"config": config.to_dict(), "files": {}}
    if config.dataset.get("kind") == "idx":
        for key in ("images", "labels", "test_images", "test_labels"):
            if config.dataset.get(key):
                inputs["files"][key] = _git_blob_sha1(Path(config.dataset[key]).read_bytes())
    return _git_blob_sha1(json.dumps(inputs, sort_keys=True).encode())


def _fmt(x) -> str:
    return repr(float(x))


def metrics_header(N: int) -> list[str]:
    return (["round", "algo", "seed", "mean_acc"] + [f"acc_client_{n}" for n in range(N)]
            + ["mean_pairwise_kl"] + [f"zeta_{n}" for n in range(N)] + ["up_cum", "down_cum"])


def metrics_row(rec) -> list[str]:
    return ([str(rec.round), rec.algo, str(rec.seed), _fmt(rec.mean_acc)] + [_fmt(a) for a in rec.acc]
            + [_fmt(rec.mean_pairwise_kl)] + [_fmt(z) for z in rec.zeta] + [str(rec.up_cum), str(rec.down_cum)])


def _write_tsv(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, delimiter="\t", lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _check_writable(out: Path) -> None:
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".fedkd_write_test"
        probe.write_text("")
        probe.unlink()
    except OSError as e:
        raise OSError(f"output directory {out} is not writable: {e}") from e


def run_single(config: RunConfig, out: Path) -> list:
    """One seeded run; every artifact goes under ``out``."""
    _check_writable(out)
    manifest = {
        MANIFEST_TAG: 1,
        "version": __version__,
        "config": config.to_dict(),
        "seed": config.seed,
        "content_hash": content_hash(config),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    state = init_state(config)
    with open(out / "metrics.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(metrics_header(config.clients))

        def on_record(rec):
            w.writerow(metrics_row(rec))
            f.flush()

        records = run(config, on_record=on_record, state=state)

    ck = out / "checkpoints"
    ck.mkdir(exist_ok=True)
    for n, m in enumerate(state.models):
        save_params(ck / f"client_{n}.fkdp", m.spec, m.params, {"client": n})
    if state.disc is not None:
        save_params(ck / "discriminator.fkdp", state.disc.net.spec, state.disc.params,
                    {"input_temperature": state.disc.E_d})

    N = config.clients
    _write_tsv(out / "accuracy_vs_round.tsv", ["round", "mean_acc"] + [f"acc_client_{n}" for n in range(N)],
               [[r.round, _fmt(r.mean_acc)] + [_fmt(a) for a in r.acc] for r in records])
    _write_tsv(out / "accuracy_vs_comm.tsv", ["up_cum", "down_cum", "mean_acc"],
               [[r.up_cum, r.down_cum, _fmt(r.mean_acc)] for r in records])
    M = class_prob_matrix(state.models, state.partition.test)
    _write_tsv(out / "class_prob_matrix.tsv", ["true_class"] + [f"p_{k}" for k in range(M.shape[1])],
               [[c] + [_fmt(v) for v in row] for c, row in enumerate(M)])
    if config.probe_variance:
        table = probe_variances(state)
        _write_tsv(out / "variance.tsv", ["term", "batch_size", "variance"],
                   [[t, b, _fmt(v)] for (t, b), v in sorted(table.items())])
    return records


def run_experiment(config: RunConfig, out, seeds: list[int] | None = None) -> int:
    """Run one or several seeds; several seeds also get summary.tsv (mean/std of final accuracy)."""
    out = Path(out)
    _check_writable(out)
    seeds = seeds or [config.seed]
    if len(seeds) == 1:
        run_single(dataclasses.replace(config, seed=seeds[0]), out)
        return 0
    finals = []
    for s in seeds:
        recs = run_single(dataclasses.replace(config, seed=s), out / f"seed_{s}")
        finals.append(recs[-1].mean_acc)
    finals = np.array(finals)
    _write_tsv(out / "summary.tsv", ["algo", "seeds", "final_mean_acc_mean", "final_mean_acc_std"],
               [[config.algo, ",".join(map(str, seeds)), _fmt(finals.mean()), _fmt(finals.std())]])
    return 0


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        config = parse_config(args.config, args)
        seeds = parse_seeds(args.seed) or [config.seed]
    except ConfigError as e:
        print(f"fedkd: configuration error: {e}", file=sys.stderr)
        return 2
    out = args.out or os.environ.get("FEDKD_OUT") or "fedkd_out"
    try:
        return run_experiment(config, out, seeds)
    except ConfigError as e:
        print(f"fedkd: configuration error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001
        log.exception("run failed")
        print(f"fedkd: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
