"""Campaign runner: build zoo models, scan oracles, probe, simulate, serve.

Subcommands
-----------
zoo       build a (optionally backdoored) model and write model.bin + summary.json
scan      run a full detection campaign against a local model or remote endpoint
probe     noise-sensitivity probe of an oracle
simulate  empirical vs analytic amplified-tail table
serve     expose a saved model over the wire protocol

Every output file is reproducible byte-for-byte from (config, seed); the only
exception is the `metadata.created_at` timestamp, which never appears outside
the metadata block. The scan config is a flat JSON object whose keys mirror
CampaignConfig; any key can be overridden on the command line, and the command
line wins. Exit codes for `scan`: 0 benign, 2 infected labels found, 1 error
(with a structured error record written to the output directory).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .blackbox import EstimatorConfig
from .core import GapScanError, apply_trigger, build_sample_bank
from .eva import (
    PeakConfig,
    detect,
    export_heatmap_csv,
    label_heatmap,
    noise_flip_counts,
)
from .modelzoo import (
    LocalOracle,
    MlpConfig,
    load_model,
    make_poisoned_dataset,
    one_hot,
    patch_trigger,
    save_model,
    synthetic_dataset,
    train_kernel_backdoored,
    train_linear_backdoored,
    train_mlp_backdoored,
    watermark_trigger,
)
from .wire import WireConfig, WireServer, remote_oracle


class CliError(GapScanError, ValueError):
    """Invalid command-line or config-file input."""


# ---------------------------------------------------------------------------
# Campaign configuration
# ---------------------------------------------------------------------------


@dataclass
class CampaignConfig:
    """Everything a scan needs; serialized flat so a run can be replayed.

    Exactly one of `model` (path to a saved model file) and `endpoint`
    (wire-protocol URL) must be set. Sample sourcing: `samples` names an .npz
    whose keys are decimal label numbers; otherwise candidates are drawn from
    the synthetic family (`data_seed` fixes the class prototypes, `bank_seed`
    the draws, so scan samples never replay training noise).
    """

    # oracle source
    model: Optional[str] = None
    endpoint: Optional[str] = None
    # scan scope
    labels: Optional[list] = None
    samples_per_class: int = 40
    candidates_per_class: int = 120
    tau: float = 4.0
    pair_budget: Optional[int] = None
    workers: Optional[int] = None
    # estimator fields (EstimatorConfig)
    delta: float = 0.01
    num_probes: int = 200
    projection_tolerance: float = 1e-3
    step_init: float = 1.0
    max_iters: int = 15
    lam: Optional[float] = None
    seed: int = 0
    # peak fields (PeakConfig)
    top_k: int = 1
    channel_reduce: str = "abs_sum"
    # sample sourcing
    samples: Optional[str] = None
    data_seed: int = 0
    bank_seed: Optional[int] = None
    noise: float = 0.12
    # output
    out: str = "scan_out"
    export_all_heatmaps: bool = False

    def __post_init__(self):
        if (self.model is None) == (self.endpoint is None):
            raise CliError("exactly one of model / endpoint must be set")
        if self.model is not None and not Path(self.model).is_file():
            raise CliError(f"model file not found: {self.model}")
        if self.samples is not None and not Path(self.samples).is_file():
            raise CliError(f"samples file not found: {self.samples}")
        if self.samples_per_class < 1:
            raise CliError("samples_per_class must be >= 1")
        if self.candidates_per_class < self.samples_per_class:
            raise CliError("candidates_per_class must be >= samples_per_class")
        if self.tau <= 0:
            raise CliError("tau must be > 0")
        if self.pair_budget is not None and self.pair_budget < 1:
            raise CliError("pair_budget, when set, must be >= 1")
        if self.noise < 0:
            raise CliError("noise must be >= 0")

    def estimator_config(self) -> EstimatorConfig:
        return EstimatorConfig(
            delta=self.delta,
            num_probes=self.num_probes,
            projection_tolerance=self.projection_tolerance,
            step_init=self.step_init,
            max_iters=self.max_iters,
            lam=self.lam,
            seed=self.seed,
        )

    def peak_config(self) -> PeakConfig:
        return PeakConfig(top_k=self.top_k, channel_reduce=self.channel_reduce)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_CONFIG_KEYS = {f.name for f in dataclasses.fields(CampaignConfig)}


def load_campaign_config(path, overrides: dict) -> CampaignConfig:
    """Flat JSON config + command-line overrides (command line wins)."""
    values = {}
    if path is not None:
        try:
            loaded = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise CliError(f"config {path} must hold a flat JSON object")
        unknown = sorted(set(loaded) - _CONFIG_KEYS)
        if unknown:
            raise CliError(f"unknown config key(s): {', '.join(unknown)}")
        values.update(loaded)
    values.update({k: v for k, v in overrides.items() if v is not None})
    unknown = sorted(set(values) - _CONFIG_KEYS)
    if unknown:
        raise CliError(f"unknown config key(s): {', '.join(unknown)}")
    try:
        return CampaignConfig(**values)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, CliError):
            raise
        raise CliError(str(exc)) from exc


# ---------------------------------------------------------------------------
# Deterministic artifact writers (all output funnels through these)
# ---------------------------------------------------------------------------


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _metadata(extra: Optional[dict] = None) -> dict:
    md = {"created_at": _now(), "tool_version": __version__}
    if extra:
        md.update(extra)
    return md


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _g(v) -> str:
    return format(float(v), ".12g")


def _write_csv(path: Path, header, rows) -> None:
    lines = [",".join(header)]
    lines += [",".join(str(c) for c in row) for row in rows]
    path.write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Oracle acquisition
# ---------------------------------------------------------------------------


def _open_oracle(model_path, endpoint):
    """Returns (oracle, source_description)."""
    if model_path is not None:
        return LocalOracle(load_model(model_path)), f"model:{model_path}"
    return remote_oracle(endpoint), f"endpoint:{endpoint}"


def _load_candidates(cfg: CampaignConfig, oracle) -> dict:
    """Per-class candidate pools, from an .npz or the synthetic family."""
    if cfg.samples is not None:
        with np.load(cfg.samples) as npz:
            try:
                pools = {int(k): np.asarray(npz[k], dtype=np.float64) for k in npz.files}
            except ValueError as exc:
                raise CliError(
                    f"sample file keys must be decimal labels, got {npz.files}"
                ) from exc
        for label, arr in pools.items():
            if arr.shape[1:] != oracle.input_shape:
                raise CliError(
                    f"samples for label {label} have shape {arr.shape[1:]}, "
                    f"oracle expects {oracle.input_shape}"
                )
        return pools
    bank_seed = cfg.bank_seed if cfg.bank_seed is not None else cfg.data_seed + 10_000
    xs, ys = synthetic_dataset(
        oracle.input_shape,
        oracle.num_labels,
        cfg.candidates_per_class,
        seed=cfg.data_seed,
        noise=cfg.noise,
        sample_seed=bank_seed,
    )
    return {c: xs[ys == c] for c in range(oracle.num_labels)}


# ---------------------------------------------------------------------------
# zoo
# ---------------------------------------------------------------------------


def _parse_shape(text: str) -> tuple:
    try:
        shape = tuple(int(v) for v in text.lower().split("x"))
    except ValueError:
        shape = ()
    if len(shape) != 3 or any(v < 1 for v in shape):
        raise CliError(f"shape must look like 16x16x1, got {text!r}")
    return shape


def _build_trigger(args, shape):
    if args.trigger == "none":
        return None
    if args.trigger == "patch":
        origin = tuple(int(v) for v in args.origin.split(","))
        return patch_trigger(shape, args.patch_size, args.target, origin=origin, blend=args.blend)
    return watermark_trigger(shape, args.target, blend=args.blend, seed=args.seed)


def cmd_zoo(args) -> int:
    shape = _parse_shape(args.shape)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trigger = _build_trigger(args, shape)
    fraction = args.fraction if trigger is not None else 0.0

    xs, labels = synthetic_dataset(
        shape, args.classes, args.n_per_class, seed=args.seed, noise=args.noise
    )
    data = make_poisoned_dataset(xs, one_hot(labels, args.classes), trigger, fraction, seed=args.seed)

    if args.kind == "mlp":
        hidden = tuple(int(v) for v in args.hidden.split(","))
        cfg = MlpConfig(
            hidden=hidden, epochs=args.epochs, lr=args.lr,
            momentum=args.momentum, batch_size=args.batch_size, seed=args.seed,
        )
        report = train_mlp_backdoored(data, cfg)
        model = report.model
        clean_acc = report.clean_accuracy
        asr = report.attack_success_rate
    else:
        if args.kind == "linear":
            model = train_linear_backdoored(data)
        else:
            model = train_kernel_backdoored(data, gamma=args.gamma)
        ho_x, ho_y = synthetic_dataset(
            shape, args.classes, max(args.n_per_class // 5, 20),
            seed=args.seed, noise=args.noise, sample_seed=args.seed + 7_000,
        )
        clean_acc = float(np.mean(model.predict_labels(ho_x) == ho_y))
        asr = None
        if trigger is not None:
            keep = ho_y != trigger.target_label
            stamped = np.stack([apply_trigger(x, trigger) for x in ho_x[keep]])
            asr = float(np.mean(model.predict_labels(stamped) == trigger.target_label))

    model_file = out / "model.bin"
    save_model(model, model_file)
    summary = {
        "kind": args.kind,
        "shape": list(shape),
        "num_classes": args.classes,
        "seed": args.seed,
        "n_per_class": args.n_per_class,
        "noise": args.noise,
        "fraction": fraction,
        "trigger": None if trigger is None else {
            "style": args.trigger,
            "target_label": trigger.target_label,
            "blend": trigger.blend,
            "footprint": int(trigger.mask.sum()),
        },
        "clean_accuracy": clean_acc,
        "attack_success_rate": "not-applicable" if asr is None else asr,
        "n_train_clean": len(data.clean_inputs),
        "n_train_poisoned": len(data.poisoned_inputs),
        "model_file": model_file.name,
        "metadata": _metadata(),
    }
    _write_json(out / "summary.json", summary)
    asr_text = summary["attack_success_rate"]
    if isinstance(asr_text, float):
        asr_text = _g(asr_text)
    print(
        f"wrote {model_file} ({args.kind}, {args.classes} classes, "
        f"clean accuracy {_g(clean_acc)}, attack success rate {asr_text})"
    )
    return 0


# ---------------------------------------------------------------------------
# scan
# ---------------------------------------------------------------------------


def _scores_rows(report) -> list:
    rows = []
    for label in sorted(report.per_label_scores):
        res = report.label_results[label]
        rows.append([
            label,
            _g(report.per_label_scores[label]),
            _g(report.anomaly_indices[label]),
            int(label in report.infected_labels),
            int(res.partial),
            res.queries_spent,
        ])
    return rows


def _export_heatmaps(report, out: Path, export_all: bool) -> None:
    hm_dir = out / "heatmaps"
    hm_dir.mkdir(exist_ok=True)
    for label, res in sorted(report.label_results.items()):
        usable = {s: m for s, m in res.best_maps.items() if m is not None}
        if not usable:
            continue
        export_heatmap_csv(label_heatmap(res, mode="best"), hm_dir / f"label_{label}.csv")
        if export_all:
            for src, m in sorted(usable.items()):
                export_heatmap_csv(m, hm_dir / f"label_{label}_src_{src}.csv")


def cmd_scan(args) -> int:
    overrides = {k: getattr(args, k) for k in _CONFIG_KEYS if hasattr(args, k)}
    out = Path(overrides.get("out") or "scan_out")
    try:
        cfg = load_campaign_config(args.config, overrides)
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        oracle, source = _open_oracle(cfg.model, cfg.endpoint)
        candidates = _load_candidates(cfg, oracle)
        bank = build_sample_bank(oracle, candidates, batch_size=cfg.samples_per_class)
        report = detect(
            oracle,
            bank,
            cfg.estimator_config(),
            peak_cfg=cfg.peak_config(),
            tau=cfg.tau,
            pair_budget=cfg.pair_budget,
            labels=cfg.labels,
            workers=cfg.workers,
            metadata={"source": source, "config": cfg.to_dict()},
        )
    except Exception as exc:  # every sub-error becomes a structured record
        record = {
            "error": type(exc).__name__,
            "message": str(exc),
            "metadata": _metadata(),
        }
        endpoint = overrides.get("endpoint")
        if endpoint:
            record["endpoint"] = endpoint
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "error.json", record)
        print(f"scan failed: {record['error']}: {record['message']}", file=sys.stderr)
        return 1

    body = report.to_dict()
    body["metadata"] = dict(body.get("metadata") or {})
    body["metadata"].update(_metadata())
    _write_json(out / "report.json", body)
    _write_csv(
        out / "scores.csv",
        ["label", "score", "anomaly_index", "infected", "partial", "queries"],
        _scores_rows(report),
    )
    _export_heatmaps(report, out, cfg.export_all_heatmaps)

    verdict = (
        f"INFECTED labels {report.infected_labels}" if report.infected_labels else "benign"
    )
    print(
        f"scan of {source}: {verdict} "
        f"(tau={_g(report.tau)}, {report.queries_total} queries) -> {out}"
    )
    return 2 if report.infected_labels else 0


# ---------------------------------------------------------------------------
# probe
# ---------------------------------------------------------------------------


def cmd_probe(args) -> int:
    if args.trials < 1:
        raise CliError("trials must be >= 1")
    if args.epsilon <= 0:
        raise CliError("epsilon must be > 0")
    oracle, source = _open_oracle(args.model, args.endpoint)
    if args.samples is not None:
        with np.load(args.samples) as npz:
            xs = np.concatenate([np.asarray(npz[k], dtype=np.float64) for k in sorted(npz.files)])
    else:
        per_class = max(1, args.n // oracle.num_labels)
        xs, _ = synthetic_dataset(
            oracle.input_shape, oracle.num_labels, per_class,
            seed=args.data_seed, noise=args.noise, sample_seed=args.data_seed + 10_000,
        )
    counts = noise_flip_counts(oracle, xs, args.epsilon, args.trials, seed=args.seed)
    fraction = float(counts.sum()) / (args.trials * len(counts))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "probe.json", {
        "source": source,
        "epsilon": args.epsilon,
        "trials": args.trials,
        "n_samples": len(counts),
        "flip_fraction": fraction,
        "metadata": _metadata(),
    })
    _write_csv(
        out / "flips.csv",
        ["sample", "flips", "trials"],
        [[i, int(c), args.trials] for i, c in enumerate(counts)],
    )
    print(
        f"noise probe of {source}: flip fraction {_g(fraction)} "
        f"({len(counts)} samples x {args.trials} trials, epsilon={_g(args.epsilon)})"
    )
    return 0


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    if not 0.0 <= args.p <= 1.0:
        raise CliError("p must lie in [0, 1]")
    if args.k < 1:
        raise CliError("k must be >= 1")
    if args.trials < 1:
        raise CliError("trials must be >= 1")
    rng = np.random.default_rng(args.seed)
    rows = []
    print("k,analytic,empirical,three_sigma")
    for k in range(1, args.k + 1):
        analytic = args.p ** k
        hits = np.all(rng.random((args.trials, k)) < args.p, axis=1)
        empirical = float(hits.mean())
        band = 3.0 * float(np.sqrt(analytic * (1.0 - analytic) / args.trials))
        rows.append([k, _g(analytic), _g(empirical), _g(band)])
        print(f"{k},{_g(analytic)},{_g(empirical)},{_g(band)}")
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "simulate.csv", ["k", "analytic", "empirical", "three_sigma"], rows)
    return 0


# ---------------------------------------------------------------------------
# serve
# ---------------------------------------------------------------------------


def cmd_serve(args) -> int:
    model = load_model(args.model)
    cfg = WireConfig(
        host=args.host, port=args.port, query_budget=args.budget, log_path=args.log
    )
    server = WireServer(model, cfg)
    host, port = server.address
    # flush so wrappers reading a pipe see the endpoint before we block
    print(f"serving {args.model} on http://{host}:{port} (ctrl-c to stop)", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gapscan", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    z = sub.add_parser("zoo", help="build a model (optionally backdoored) + summary")
    z.add_argument("--out", required=True, help="output directory")
    z.add_argument("--kind", choices=("mlp", "linear", "kernel"), default="mlp")
    z.add_argument("--shape", default="16x16x1", help="input shape HxWxC")
    z.add_argument("--classes", type=int, default=6)
    z.add_argument("--trigger", choices=("patch", "watermark", "none"), default="patch")
    z.add_argument("--patch-size", type=int, default=3)
    z.add_argument("--origin", default="1,1", help="patch origin row,col")
    z.add_argument("--blend", type=float, default=None, help="default 1.0 patch / 0.1 watermark")
    z.add_argument("--target", type=int, default=0, help="trigger target label")
    z.add_argument("--fraction", type=float, default=0.1, help="poisoned fraction")
    z.add_argument("--n-per-class", type=int, default=300)
    z.add_argument("--noise", type=float, default=0.12)
    z.add_argument("--seed", type=int, default=0)
    z.add_argument("--hidden", default="64,32", help="mlp hidden widths")
    z.add_argument("--epochs", type=int, default=120)
    z.add_argument("--lr", type=float, default=0.15)
    z.add_argument("--momentum", type=float, default=0.9)
    z.add_argument("--batch-size", type=int, default=32)
    z.add_argument("--gamma", type=float, default=20.0, help="kernel width (kernel kind)")
    z.set_defaults(func=cmd_zoo)

    s = sub.add_parser("scan", help="run a detection campaign")
    s.add_argument("--config", default=None, help="flat JSON config (keys = CampaignConfig)")
    s.add_argument("--model", default=None, help="path to a saved model file")
    s.add_argument("--endpoint", default=None, help="wire-protocol URL")
    s.add_argument("--labels", type=_int_list, default=None, help="labels to scan, e.g. 0,2,5")
    s.add_argument("--samples-per-class", dest="samples_per_class", type=int, default=None)
    s.add_argument("--candidates-per-class", dest="candidates_per_class", type=int, default=None)
    s.add_argument("--tau", type=float, default=None, help="anomaly threshold")
    s.add_argument("--pair-budget", dest="pair_budget", type=int, default=None)
    s.add_argument("--workers", type=int, default=None)
    s.add_argument("--delta", type=float, default=None)
    s.add_argument("--num-probes", dest="num_probes", type=int, default=None)
    s.add_argument("--projection-tolerance", dest="projection_tolerance", type=float, default=None)
    s.add_argument("--step-init", dest="step_init", type=float, default=None)
    s.add_argument("--max-iters", dest="max_iters", type=int, default=None)
    s.add_argument("--lam", type=float, default=None, help="sparsity weight (default 0.01/n)")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--top-k", dest="top_k", type=int, default=None)
    s.add_argument("--channel-reduce", dest="channel_reduce", default=None,
                   choices=("abs_sum", "max_abs"))
    s.add_argument("--samples", default=None, help=".npz of per-label sample pools")
    s.add_argument("--data-seed", dest="data_seed", type=int, default=None)
    s.add_argument("--bank-seed", dest="bank_seed", type=int, default=None)
    s.add_argument("--noise", type=float, default=None)
    s.add_argument("--out", default=None, help="output directory (default scan_out)")
    s.add_argument("--export-all-heatmaps", dest="export_all_heatmaps",
                   action="store_true", default=None)
    s.set_defaults(func=cmd_scan)

    pr = sub.add_parser("probe", help="noise-sensitivity probe")
    pr.add_argument("--model", default=None)
    pr.add_argument("--endpoint", default=None)
    pr.add_argument("--epsilon", type=float, default=0.025)
    pr.add_argument("--trials", type=int, default=4)
    pr.add_argument("--n", type=int, default=24, help="synthetic sample count")
    pr.add_argument("--samples", default=None, help=".npz of per-label sample pools")
    pr.add_argument("--data-seed", dest="data_seed", type=int, default=0)
    pr.add_argument("--noise", type=float, default=0.12)
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--out", default="probe_out")
    pr.set_defaults(func=cmd_probe)

    sim = sub.add_parser("simulate", help="amplified-tail table: empirical vs analytic p^k")
    sim.add_argument("--p", type=float, required=True, help="single-run tail probability")
    sim.add_argument("--k", type=int, default=8, help="max amplification rounds")
    sim.add_argument("--trials", type=int, default=100_000)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--out", default=None, help="also write simulate.csv here")
    sim.set_defaults(func=cmd_simulate)

    sv = sub.add_parser("serve", help="serve a saved model over the wire protocol")
    sv.add_argument("--model", required=True)
    sv.add_argument("--host", default="127.0.0.1")
    sv.add_argument("--port", type=int, default=8787)
    sv.add_argument("--budget", type=int, default=None)
    sv.add_argument("--log", default=None, help="access log path")
    sv.set_defaults(func=cmd_serve)
    return p


def _int_list(text: str) -> list:
    try:
        return [int(v) for v in text.split(",") if v != ""]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated ints, got {text!r}") from exc


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.func is cmd_zoo and args.blend is None:
        args.blend = 0.1 if args.trigger == "watermark" else 1.0
    try:
        return args.func(args)
    except GapScanError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
