"""Command-line entry point: ``shuflab <command>``."""
from __future__ import annotations

import csv
import io
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import click
import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import experiments, fxnet, shufcore
from .cpa.attack import DEFAULT_TAU, WeightCandidateSet, attack_network
from .cpa.segment import ShapeHints
from .errors import ConfigurationError, FormatError, ModeMismatch, ShuflabError
from .leaksim import LeakModel, read_trace, write_trace
from .leaksim.program import MODES
from .presets import PRESETS, get_preset

MANIFEST = "manifest.json"


@dataclass
class ExperimentConfig:
    preset: str = "fc-32-10-5"
    network: str = ""            # path to a saved network; overrides preset
    mode: str = "baseline"
    k: int = 16
    sigma: float = 0.25          # noise std in units of alpha
    alpha: float = 1.0
    baseline: float = 10.0
    traces: int = 100
    seeds: list[int] = field(default_factory=lambda: [0])
    rng_bits: int = 14
    out: str = "out"
    net_seed: int = 0

    def __post_init__(self):
        if not self.seeds:
            raise ConfigurationError("seed list must not be empty")
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}")
        if not 1 <= self.k <= shufcore.MAX_BINS or self.k & (self.k - 1):
            raise ConfigurationError(f"k must be a power of two in [1, {shufcore.MAX_BINS}]")
        if self.traces < 0:
            raise ConfigurationError("trace count must be >= 0")
        if not self.network:
            get_preset(self.preset)

    @property
    def model(self) -> LeakModel:
        return LeakModel(self.alpha, self.sigma * self.alpha, self.baseline)

    def build_network(self) -> fxnet.Network:
        if self.network:
            return fxnet.load_network(self.network)
        return get_preset(self.preset).build(self.net_seed)

    def to_toml(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {json.dumps(v)}")
        return "\n".join(lines) + "\n"


def load_config(path: str | None, overrides: dict) -> ExperimentConfig:
    doc = {}
    if path:
        try:
            doc = tomllib.loads(Path(path).read_text())
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise ConfigurationError(f"{path}: {exc}") from exc
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigurationError(f"unknown config keys {sorted(unknown)}")
    doc.update({k: v for k, v in overrides.items() if v is not None and v != ()})
    if "seeds" in doc:
        doc["seeds"] = [int(s) for s in doc["seeds"]]
    return ExperimentConfig(**doc)


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise click.BadParameter(f"expected comma-separated integers, got {text!r}") from None


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        click.echo(text, nl=False)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


@click.group()
@click.option("--cache-dir", envvar="SHUFLAB_CACHE_DIR", type=click.Path(file_okay=False),
              help="Template library cache (default ~/.cache/shuflab).")
@click.pass_context
def cli(ctx, cache_dir):
    """Shuffling countermeasure simulator and side-channel attacks on fixed-point networks."""
    ctx.obj = {"cache_dir": cache_dir}


@cli.command("show-config")
def show_config():
    """Print every config key with its default."""
    click.echo(ExperimentConfig().to_toml(), nl=False)


_config_options = [
    click.option("--config", "config_path", type=click.Path(dir_okay=False), help="TOML config file."),
    click.option("--preset", type=click.Choice(sorted(PRESETS))),
    click.option("--network", type=click.Path(dir_okay=False)),
    click.option("--mode", type=click.Choice(MODES)),
    click.option("--k", type=int),
    click.option("--sigma", type=float),
    click.option("--traces", type=int),
    click.option("--seed", "seeds", type=int, multiple=True),
    click.option("--out", type=click.Path(file_okay=False)),
]


def config_options(fn):
    for opt in reversed(_config_options):
        fn = opt(fn)
    return fn


@cli.command("gen-traces")
@config_options
@click.option("--annotate/--no-annotate", default=False, help="Keep ground-truth annotations.")
def gen_traces(config_path, annotate, **overrides):
    """Simulate trace sets and write them with a manifest."""
    cfg = load_config(config_path, overrides)
    out = Path(cfg.out)
    (out / "traces").mkdir(parents=True, exist_ok=True)
    net = cfg.build_network()
    fxnet.save_network(net, out / "network.json")
    entries, inputs = [], {}
    for seed in cfg.seeds:
        tr, X = experiments.generate_traces(net, cfg.mode, cfg.traces, seed, cfg.model, cfg.k, cfg.rng_bits,
                                            annotate=annotate)
        ipath = out / f"inputs_s{seed}.npy"
        np.save(ipath, X)
        inputs[str(seed)] = ipath.name
        for d, t in enumerate(tr):
            path = out / "traces" / f"{cfg.mode}_s{seed}_{d:05d}.shtr"
            try:
                write_trace(t, path, annotations=annotate)
            except OSError as exc:
                raise FormatError(f"{path}: {exc}") from exc
            entries.append({"path": str(path.relative_to(out)), "seed": seed, "index": d,
                            "trace_seed": experiments.trace_seed(seed, d), "mode": cfg.mode})
    manifest = {"config": {k: v for k, v in asdict(cfg).items() if k != "out"}, "network": "network.json", "inputs": inputs, "traces": entries}
    if not cfg.network:
        p = get_preset(cfg.preset)
        manifest["preset"] = {"name": p.name, "original": p.original, "scaling": p.scaling}
    (out / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    click.echo(str(out / MANIFEST))


def _load_manifest(path: Path) -> tuple[dict, Path]:
    if path.is_dir():
        path = path / MANIFEST
    try:
        return json.loads(path.read_text()), path.parent
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: {exc}") from exc


@cli.command()
@click.argument("manifest", type=click.Path(exists=True))
@click.option("--attack", "kind", type=click.Choice(["cpa", "swbreak"]), default="cpa")
@click.option("--out", type=click.Path(file_okay=False), help="Report directory (default: next to manifest).")
@click.option("--candidates", default=None, help="Restrict weight candidates to lo:hi (raw Q4.11).")
@click.option("--checkpoints", default=None, help="Comma-separated trace counts to report.")
@click.option("--tau", type=float, default=DEFAULT_TAU)
@click.option("--layer-sizes", default=None, help="FC widths, input first (required for swbreak).")
@click.option("--score/--no-score", default=True, help="Score against the manifest's network.")
@click.pass_context
def attack(ctx, manifest, kind, out, candidates, checkpoints, tau, layer_sizes, score):
    """Attack a generated trace set; writes report JSON and rho/PGE CSVs per seed."""
    from . import swbreak
    doc, root = _load_manifest(Path(manifest))
    cfg = doc["config"]
    mode = cfg["mode"]
    if kind == "cpa" and mode == "swshuffle":
        raise click.UsageError("software-shuffled traces need --attack swbreak")
    if kind == "swbreak" and mode != "swshuffle":
        raise click.UsageError(f"swbreak applies to swshuffle traces, manifest has {mode}")
    cands = WeightCandidateSet()
    if candidates:
        lo, _, hi = candidates.partition(":")
        cands = WeightCandidateSet(int(lo), int(hi))
    cps = _int_list(checkpoints) if checkpoints else None
    net = fxnet.load_network(root / doc["network"])
    sizes = tuple(_int_list(layer_sizes)) if layer_sizes else None
    if kind == "swbreak" and sizes is None:
        sizes = tuple(net.fc_sizes)
    out = Path(out) if out else root / "reports"
    libraries = {}
    if ctx.obj.get("cache_dir"):
        os.environ[swbreak.CACHE_ENV] = ctx.obj["cache_dir"]
    written = []
    for seed in sorted({e["seed"] for e in doc["traces"]}):
        entries = sorted((e for e in doc["traces"] if e["seed"] == seed), key=lambda e: e["index"])
        traces = [read_trace(root / e["path"], annotations=False) for e in entries]
        X = np.load(root / doc["inputs"][str(seed)])
        hints = ShapeHints(mode=mode, alpha=cfg["alpha"], baseline=cfg["baseline"], layer_sizes=sizes,
                           rng_bits=cfg["rng_bits"])
        use = [c for c in (cps or [len(traces)]) if c <= len(traces)] or [len(traces)]
        ref = net if score else None
        if kind == "cpa":
            rep = attack_network(traces, X, hints, cands, tau, ref, use)
        else:
            rep = swbreak.attack_sw_shuffled(traces, X, hints, cands, ref, use, libraries=libraries)
        if mode == "hwshuffle" and not any("low correlation" in f for f in rep.flags):
            rep.flags.append("hardware shuffling active: recovered values are not trusted")
        written += rep.write(out, f"report_s{seed}")
    click.echo("\n".join(str(p) for p in written))


@cli.command("time-table")
@click.option("--n", "ns", default="32,64,128", help="Loop lengths (columns).")
@click.option("--k", "ks", default="2,4,8,16,32,64,128", help="Bin counts (rows).")
@click.option("--rate", type=float, default=1000.0, help="Traces per second.")
@click.option("--out", type=click.Path(dir_okay=False))
def time_table(ns, ks, rate, out):
    """Years to observe every reachable order; one row per k, one column per N."""
    ns, ks = _int_list(ns), _int_list(ks)
    rows = [[k] + ["-" if k > n else shufcore.format_sci(shufcore.attack_time_years(n, k, rate)) for n in ns]
            for k in ks]
    _emit(_csv(["k"] + [f"N={n}" for n in ns], rows), out)


@cli.command()
@click.option("--n", "ns", default="8,10,16,32", help="Loop lengths.")
@click.option("--k", "ks", default="1,2,4,8,16", help="Bin counts.")
@click.option("--out", type=click.Path(dir_okay=False))
def permcount(ns, ks, out):
    """Number of distinct orders per (N, k)."""
    rows = [[n, k, shufcore.permutation_count(n, k)] for n in _int_list(ns) for k in _int_list(ks)]
    _emit(_csv(["N", "k", "permutations"], rows), out)


@cli.command("pge-curve")
@click.option("--n", type=int, default=16, help="Weights in the attacked neuron.")
@click.option("--k", "ks", default="1,2,4,8,16")
@click.option("--traces", type=int, default=200)
@click.option("--seeds", type=int, default=20, help="Number of seeds (0..seeds-1).")
@click.option("--sigma", type=float, default=0.25)
@click.option("--step", type=int, default=10, help="Checkpoint spacing.")
@click.option("--candidates", default=None, help="Restrict candidates to lo:hi.")
@click.option("--out", type=click.Path(dir_okay=False))
def pge_curve(n, ks, traces, seeds, sigma, step, candidates, out):
    """Mean PGE and correlations against trace count for each k."""
    cands = WeightCandidateSet()
    if candidates:
        lo, _, hi = candidates.partition(":")
        cands = WeightCandidateSet(int(lo), int(hi))
    cps = list(range(step, traces + 1, step))
    curves = experiments.pge_curve(n, _int_list(ks), traces, range(seeds), sigma, cps, cands)
    rows = [(k, t, f"{p:.3f}", f"{rm:.6f}", f"{rc:.6f}") for k, t, p, rm, rc in curves.rows()]
    _emit(_csv(["k", "traces", "mean_pge", "mean_rho_max", "mean_rho_correct"], rows), out)


@cli.command()
@click.option("--preset", "names", multiple=True, type=click.Choice(sorted(PRESETS)),
              help="Presets to measure (default: all).")
@click.option("--k", type=int, default=16)
@click.option("--out", type=click.Path(dir_okay=False))
def overhead(names, k, out):
    """Cycle overhead of both shuffling variants over Baseline, in percent."""
    presets = [get_preset(n) for n in names] if names else None
    rows = [(r["network"], "conv" if r["conv_heavy"] else "fc", f"{r['baseline']:.2f}",
             f"{r['swshuffle']:.2f}", f"{r['hwshuffle']:.2f}")
            for r in experiments.overhead_table(presets, k=k)]
    _emit(_csv(["network", "kind", "baseline_pct", "sw_overhead_pct", "hw_overhead_pct"], rows), out)


def _fail(kind: str, message: str, code: int) -> int:
    click.echo(json.dumps({"error": kind, "message": message}), err=True)
    return code


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="shuflab", standalone_mode=False)
    except click.UsageError as exc:
        return _fail("usage", exc.format_message(), 2)
    except click.Abort:
        return _fail("aborted", "aborted", 1)
    except click.ClickException as exc:
        return _fail("usage", exc.format_message(), 2)
    except ModeMismatch as exc:
        return _fail(exc.kind, str(exc), 2)
    except ShuflabError as exc:
        return _fail(exc.kind, str(exc), 1)
    except OSError as exc:
        return _fail("io", f"{getattr(exc, 'filename', '') or ''}: {exc}", 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
