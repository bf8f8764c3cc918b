"""``forgemorph`` command-line interface.

Exit codes: 0 success, 1 bad input, 2 no feasible design, 3 internal error.
Machine-readable results always go to files; stdout is for people.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import math
import sys
from pathlib import Path

from . import __version__
from .costmodel import DeviceProfile, LatencyTerms, PEAllocation, estimate
from .dse import ConstraintSet, MogaConfig, ParetoFront, explore, read_front_csv
from .exceptions import ForgeMorphError, MalformedDocument, NoFeasibleDesign
from .morph import (
    PowerModel,
    depth_mode,
    fit_power_model,
    merge_manifest,
    parse_mode,
    partition_blocks,
    predict_power,
    read_calibration_csv,
    width_mode,
)
from .netgraph import NetworkGraph, parse_network, to_document

log = logging.getLogger(__name__)

EXIT_OK, EXIT_INPUT, EXIT_INFEASIBLE, EXIT_INTERNAL = 0, 1, 2, 3
DATA_DIR = Path(__file__).with_name("data")


# ---------------------------------------------------------------------------
# input helpers

def _resolve(path_or_name: str, suffix: str = ".json") -> Path:
    path = Path(path_or_name)
    if path.exists():
        return path
    bundled = DATA_DIR / f"{path_or_name}{suffix}"
    if bundled.exists():
        return bundled
    raise MalformedDocument(f"no such file: {path_or_name}")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _load_net(arg: str) -> tuple[NetworkGraph, Path]:
    path = _resolve(arg)
    return parse_network(path.read_text()), path


def _load_device(arg: str) -> tuple[DeviceProfile, Path]:
    path = _resolve(arg)
    return DeviceProfile.load(path), path


def _terms_from_args(args) -> LatencyTerms:
    base = LatencyTerms.load(args.terms) if getattr(args, "terms", None) else LatencyTerms()
    overrides = {}
    for name in ("d_in", "d_out", "p_b", "p_f", "t_pad", "t_tap", "t_mul", "t_add", "t_relu"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    if getattr(args, "porch", None):
        overrides["porch_rounding"] = args.porch
    if getattr(args, "t_memory", None) is not None:
        overrides["t_memory"] = args.t_memory
    return LatencyTerms.from_dict({**base.to_dict(), **overrides})


def _add_term_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--terms", help="latency terms JSON file")
    for name in ("d-in", "d-out", "p-b", "p-f", "t-pad", "t-tap", "t-mul", "t-add", "t-relu"):
        p.add_argument(f"--{name}", dest=name.replace("-", "_"), type=int)
    p.add_argument("--t-memory", dest="t_memory", type=float, help="memory time in seconds")
    p.add_argument("--porch", choices=["ceil", "exact"], help="porch lead-in rounding")


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise MalformedDocument(f"expected comma-separated integers, got {text!r}") from None


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _run_manifest(command: str, inputs: dict[str, Path], seed, outputs: dict[str, Path]) -> dict:
    return {
        "command": command,
        "inputs": {k: {"path": str(p), "sha256": _sha256(p)} for k, p in sorted(inputs.items())},
        "outputs": {k: _sha256(p) for k, p in sorted(outputs.items())},
        "seed": seed,
        "tool_version": __version__,
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    }


def _fmt_row(cells, widths) -> str:
    return "  ".join(str(c).rjust(w) for c, w in zip(cells, widths))


# ---------------------------------------------------------------------------
# commands

def cmd_explore(args) -> int:
    g, net_path = _load_net(args.net)
    dev, dev_path = _load_device(args.device)
    terms = _terms_from_args(args).with_clock(dev)
    cons = ConstraintSet(
        max_latency_s=None if args.max_latency_ms is None else args.max_latency_ms / 1000.0,
        max_dsp=args.max_dsp, max_lut=args.max_lut, max_bram=args.max_bram).resolve(dev)
    cfg = MogaConfig(population_size=args.population, max_generations=args.generations,
                     seed=args.seed, stagnation_window=args.stagnation,
                     fixed_fc_pe=args.fc_pe, n_jobs=args.jobs)
    front = explore(g, dev, cons, cfg, terms)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path, cfg_path, man_path = out / "pareto.csv", out / "configs.json", out / "manifest.json"
    csv_path.write_text(front.to_csv())
    _write_json(cfg_path, {
        "network": to_document(g),
        "device": dev.to_dict(),
        "terms": terms.to_dict(),
        "constraints": cons.to_dict(),
        "moga": {"population_size": cfg.population_for(g), "max_generations": cfg.max_generations,
                 "crossover_rate": cfg.crossover_rate, "mutation_rate": cfg.mutation_rate,
                 "mutation_exponent": cfg.mutation_exponent,
                 "stagnation_window": cfg.stagnation_window, "fixed_fc_pe": cfg.fixed_fc_pe},
        "seed": args.seed,
        "front": front.to_dict(),
    })
    inputs = {"net": net_path, "device": dev_path}
    if args.terms:
        inputs["terms"] = Path(args.terms)
    _write_json(man_path, _run_manifest("explore", inputs, args.seed,
                                        {"pareto.csv": csv_path, "configs.json": cfg_path}))

    n_conv = len(g.conv_layers)
    header = ["#", "conv PEs", "fc_pe", "latency (ms)", "DSP", "LUT", "BRAM"]
    rows = [[i, ",".join(map(str, a.conv_pe)), a.fc_pe, f"{e.latency_s * 1e3:.4f}", e.dsp, e.lut, e.bram]
            for i, (a, e) in enumerate(front.entries)]
    widths = [max(len(str(r[c])) for r in rows + [header]) for c in range(len(header))]
    print(f"{len(front)} Pareto-optimal allocations for {g.name} ({n_conv} conv layers), "
          f"{front.generations_run} generations, {front.evaluations} distinct evaluations")
    print(_fmt_row(header, widths))
    for r in rows:
        print(_fmt_row(r, widths))
    print(f"wrote {csv_path}, {cfg_path}, {man_path}")
    return EXIT_OK


def cmd_estimate(args) -> int:
    g, _ = _load_net(args.net)
    dev, _ = _load_device(args.device)
    terms = _terms_from_args(args)
    if args.alloc_file:
        alloc = PEAllocation.from_dict(json.loads(Path(args.alloc_file).read_text()))
    elif args.alloc:
        alloc = PEAllocation(_int_list(args.alloc), args.fc_pe)
    else:
        raise MalformedDocument("give --alloc or --alloc-file")
    est = estimate(g, alloc, dev, terms)
    if args.power_model:
        predict_power(PowerModel.load(args.power_model), est)
    print(json.dumps({"allocation": alloc.to_dict(), "estimate": est.to_dict()}, indent=2))
    return EXIT_OK


def _load_config(path: str) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise MalformedDocument(f"{path}: invalid JSON: {exc}") from None
    for key in ("network", "device", "terms", "front"):
        if key not in doc:
            raise MalformedDocument(f"{path} is not an explore config (missing {key!r})")
    return doc


def cmd_morph(args) -> int:
    doc = _load_config(args.config)
    g = parse_network(doc["network"])
    dev = DeviceProfile.from_dict(doc["device"])
    terms = LatencyTerms.from_dict(doc["terms"])
    front = ParetoFront.from_dict(doc["front"])
    if not front.entries:
        raise MalformedDocument("config holds an empty Pareto front")
    if not 0 <= args.entry < len(front.entries):
        raise MalformedDocument(f"--entry must lie in [0, {len(front.entries) - 1}]")
    alloc, _ = front.entries[args.entry]
    boundaries = args.boundaries.split(",") if args.boundaries else None
    blocks = partition_blocks(g, boundaries)
    kind, value = parse_mode(args.mode)
    if kind == "depth":
        if not 1 <= value <= len(blocks):
            raise MalformedDocument(f"depth must lie in [1, {len(blocks)}] for this "
                                    f"{len(blocks)}-block design, got {value}")
        mode = depth_mode(g, blocks, value, alloc, dev, terms)
    else:
        mode = width_mode(g, value, alloc, dev, terms, blocks=blocks)
    if args.power_model:
        predict_power(PowerModel.load(args.power_model), mode.estimate)
    if args.accuracy is not None:
        mode.accuracy = args.accuracy

    out = Path(args.out) if args.out else Path(args.config).with_name("morph.json")
    existing = json.loads(out.read_text()) if out.exists() else None
    _write_json(out, merge_manifest(existing, alloc, mode))
    e = mode.estimate
    print(f"{mode.name}: blocks {[b.block_id for b in blocks]}, widths {list(mode.active_widths)}, "
          f"latency {e.latency_s * 1e3:.4f} ms, DSP {e.dsp}, LUT {e.lut}, BRAM {e.bram}"
          + (f", {e.power_mw:.1f} mW" if e.power_mw is not None else ""))
    print(f"switch latency {mode.switch_latency_s * 1e3:.4f} ms; wrote {out}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    samples = read_calibration_csv(_resolve(args.csv, ".csv"))
    model = fit_power_model(samples, nonnegative=not args.unconstrained)
    Path(args.out).write_text(json.dumps(model.to_dict(), indent=2, sort_keys=True) + "\n")
    print(f"base {model.base_mw:.3f} mW, per DSP {model.coef_dsp:.6g}, per LUT {model.coef_lut:.6g}, "
          f"per BRAM {model.coef_bram:.6g}; RMS residual {model.fit_residual:.3f} mW")
    for (dsp, lut, bram), mw in samples:
        print(f"  dsp={dsp} lut={lut} bram={bram}: measured {mw:.1f}, "
              f"predicted {model.predict(dsp, lut, bram):.1f}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    from .costmodel import conv_pe_cycles, pool_pe_cycles
    from .netgraph import LayerKind, LayerSpec
    from .streamsim import simulate_conv_stream, simulate_pool_stream

    terms = _terms_from_args(args)
    record = bool(args.trace)
    first = not args.not_first
    if args.kind == "conv":
        trace = simulate_conv_stream(args.width, args.height, args.kernel, args.stride or 1,
                                     args.pad, terms, first, record)
        layer = LayerSpec("sim", LayerKind.CONV, filters=1, kernel=args.kernel,
                          stride=args.stride or 1, padding=args.pad,
                          in_shape=(args.height, args.width, 1))
        closed = conv_pe_cycles(layer, terms, first)
    else:
        trace = simulate_pool_stream(args.width, args.height, args.kernel, args.stride, args.kind,
                                     args.pad, terms, first, record)
        kind = LayerKind.MAX_POOL if args.kind == "max" else LayerKind.AVG_POOL
        layer = LayerSpec("sim", kind, kernel=args.kernel, stride=args.stride or args.kernel,
                          padding=args.pad, in_shape=(args.height, args.width, 1))
        closed = pool_pe_cycles(layer, terms, first)
    if args.trace:
        trace.write_csv(args.trace)
    print(json.dumps({**trace.to_dict(), "closed_form_cycles": closed}, indent=2))
    return EXIT_OK


def _front_rows(path: Path) -> list[dict]:
    text = path.read_text()
    if path.suffix == ".json":
        doc = json.loads(text)
        front = ParetoFront.from_dict(doc.get("front", doc))
        return read_front_csv(front.to_csv())
    return read_front_csv(text)


def render_svg(rows: list[dict], title: str = "Pareto front") -> str:
    """Scatter of DSP against latency (log axis); Pareto entries highlighted."""
    w, h = 640, 420
    left, right, top, bottom = 80, 20, 40, 60
    lat = [math.log10(r["latency_s"]) for r in rows]
    dsp = [r["dsp"] for r in rows]
    x_lo, x_hi = math.floor(min(lat)), math.ceil(max(lat))
    if x_hi == x_lo:
        x_hi += 1
    y_lo, y_hi = 0, max(dsp) * 1.1 or 1

    def sx(v):
        return left + (v - x_lo) / (x_hi - x_lo) * (w - left - right)

    def sy(v):
        return h - bottom - (v - y_lo) / (y_hi - y_lo) * (h - top - bottom)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
           f'viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">',
           f'<rect width="{w}" height="{h}" fill="white"/>',
           f'<text x="{w / 2}" y="22" text-anchor="middle" font-size="14">{title}</text>',
           f'<line x1="{left}" y1="{h - bottom}" x2="{w - right}" y2="{h - bottom}" stroke="black"/>',
           f'<line x1="{left}" y1="{top}" x2="{left}" y2="{h - bottom}" stroke="black"/>']
    for d in range(x_lo, x_hi + 1):
        x = sx(d)
        out.append(f'<line x1="{x:.1f}" y1="{h - bottom}" x2="{x:.1f}" y2="{h - bottom + 5}" stroke="black"/>')
        out.append(f'<text x="{x:.1f}" y="{h - bottom + 18}" text-anchor="middle">1e{d}</text>')
    for i in range(6):
        v = y_lo + (y_hi - y_lo) * i / 5
        y = sy(v)
        out.append(f'<line x1="{left - 5}" y1="{y:.1f}" x2="{left}" y2="{y:.1f}" stroke="black"/>')
        out.append(f'<text x="{left - 8}" y="{y + 4:.1f}" text-anchor="end">{v:.0f}</text>')
    out.append(f'<text x="{(left + w - right) / 2}" y="{h - 15}" text-anchor="middle">'
               f'latency (s, log scale)</text>')
    out.append(f'<text transform="translate(20 {(top + h - bottom) / 2}) rotate(-90)" '
               f'text-anchor="middle">DSP slices</text>')
    for r, lx in zip(rows, lat):
        cx, cy = sx(lx), sy(r["dsp"])
        if r.get("feasible_flag", 1):
            out.append(f'<circle class="pareto" cx="{cx:.2f}" cy="{cy:.2f}" r="5" '
                       f'fill="#d62728" stroke="black"/>')
        else:
            out.append(f'<circle class="near-feasible" cx="{cx:.2f}" cy="{cy:.2f}" r="4" '
                       f'fill="none" stroke="#ff7f0e"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def cmd_report(args) -> int:
    path = Path(args.front)
    if not path.exists():
        raise MalformedDocument(f"no such file: {path}")
    rows = _front_rows(path)
    if not rows:
        raise MalformedDocument(f"{path} holds no front entries")
    out = Path(args.out)
    if args.format == "svg":
        out.write_text(render_svg(rows))
    else:
        out.write_text(_rows_csv(rows))
    print(f"wrote {out} ({len(rows)} points)")
    return EXIT_OK


def _rows_csv(rows: list[dict]) -> str:
    import csv
    import io

    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()


def cmd_schedule(args) -> int:
    from .distill import DistillParams, build_schedule

    g, _ = _load_net(args.net)
    boundaries = args.boundaries.split(",") if args.boundaries else None
    blocks = partition_blocks(g, boundaries)
    params = DistillParams(lam=args.lam, tau=args.tau, alpha0=args.alpha0, gamma=args.gamma,
                           epochs=args.epochs)
    fractions = tuple(float(f) for f in args.fractions.split(","))
    schedule = build_schedule(g, blocks, args.kind, params, fractions)
    Path(args.out).write_text(schedule.to_json() + "\n")
    for i, s in enumerate(schedule.stages, 1):
        print(f"stage {i}: blocks {''.join(s.active_blocks)}, widths {list(s.active_widths)}, "
              f"{s.teacher_epochs} teacher / {s.student_epochs} student epochs")
    print(f"wrote {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    # usage mistakes are input errors; argparse's own status 2 means "infeasible" here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="forgemorph", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"forgemorph {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("explore", help="search PE allocations for a Pareto front")
    p.add_argument("--net", required=True, help="network JSON (or bundled name)")
    p.add_argument("--device", default="zynq7100", help="device profile JSON (or bundled name)")
    p.add_argument("--max-dsp", type=int)
    p.add_argument("--max-lut", type=int)
    p.add_argument("--max-bram", type=int)
    p.add_argument("--max-latency-ms", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--generations", type=int, default=100)
    p.add_argument("--population", type=int)
    p.add_argument("--stagnation", type=int, default=25,
                   help="stop after this many generations without hypervolume gain")
    p.add_argument("--fc-pe", type=int, help="pin the FC PE count instead of searching it")
    p.add_argument("--jobs", type=int, default=1, help="parallel fitness evaluation processes")
    p.add_argument("--out", default="out", help="output directory")
    _add_term_flags(p)
    p.set_defaults(func=cmd_explore)

    p = sub.add_parser("estimate", help="cost of one allocation")
    p.add_argument("--net", required=True)
    p.add_argument("--device", default="zynq7100")
    p.add_argument("--alloc", help="comma-separated conv PE counts, e.g. 4,8,16")
    p.add_argument("--fc-pe", type=int, default=1)
    p.add_argument("--alloc-file", help='JSON {"conv_pe": [...], "fc_pe": n}')
    p.add_argument("--power-model", help="power model JSON from 'calibrate'")
    _add_term_flags(p)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("morph", help="add a depth or width mode to a morph manifest")
    p.add_argument("--config", required=True, help="configs.json written by explore")
    p.add_argument("--mode", required=True, help="depth:K or width:F")
    p.add_argument("--entry", type=int, default=0, help="front entry to morph (0 = fastest)")
    p.add_argument("--boundaries", help="comma-separated layer ids closing each block")
    p.add_argument("--power-model")
    p.add_argument("--accuracy", type=float, help="externally measured accuracy for this mode")
    p.add_argument("--out", help="morph manifest path (default: morph.json beside the config)")
    p.set_defaults(func=cmd_morph)

    p = sub.add_parser("calibrate", help="fit the power model to measured board power")
    p.add_argument("--csv", default="mnist_power_calibration",
                   help="CSV with columns dsp,lut,bram,measured_mw (or bundled name)")
    p.add_argument("--out", default="power_model.json")
    p.add_argument("--unconstrained", action="store_true",
                   help="allow negative resource coefficients")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("simulate", help="cycle-count one PE with the stream simulator")
    p.add_argument("--kind", choices=["conv", "max", "avg"], default="conv")
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--kernel", type=int, required=True)
    p.add_argument("--stride", type=int)
    p.add_argument("--pad", type=int, default=0)
    p.add_argument("--not-first", action="store_true", help="omit the input delay D_in")
    p.add_argument("--trace", help="write a per-cycle CSV trace here")
    _add_term_flags(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("report", help="plot a Pareto front")
    p.add_argument("--front", required=True, help="pareto.csv or configs.json")
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=["svg", "csv"], default="svg")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("schedule", help="emit a distillation growth schedule")
    p.add_argument("--net", required=True)
    p.add_argument("--kind", choices=["depth", "width"], default="depth")
    p.add_argument("--boundaries")
    p.add_argument("--fractions", default="0.5,1.0")
    p.add_argument("--lam", type=float, default=0.5)
    p.add_argument("--tau", type=float, default=4.0)
    p.add_argument("--alpha0", type=float, default=0.1)
    p.add_argument("--gamma", type=float, default=0.9)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--out", default="schedule.json")
    p.set_defaults(func=cmd_schedule)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NoFeasibleDesign as exc:
        print(f"error: NoFeasibleDesign: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (ForgeMorphError, ValueError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
