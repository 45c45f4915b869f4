"""Command-line front end: run scenarios, sweep parameters, dump IQ."""

from __future__ import annotations

import argparse
import sys

from .harness import ScenarioConfig, emit_report, run_scenario, sweep


def _load_config(path: str) -> ScenarioConfig:
    with open(path, encoding="utf-8") as fh:
        return ScenarioConfig.from_json(fh.read())


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="rfidsim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="simulate one scenario config")
    run_p.add_argument("config")
    run_p.add_argument("--format", choices=("csv", "text"), default="text")
    run_p.add_argument("--out", default=None, help="write the report to a file")
    run_p.add_argument("--events", default=None, help="write the event log CSV here")

    sweep_p = sub.add_parser("sweep", help="repeat a scenario across one parameter")
    sweep_p.add_argument("config")
    sweep_p.add_argument("--param", required=True)
    sweep_p.add_argument("--values", required=True, help="comma-separated values")
    sweep_p.add_argument("--out", default=None, help="write combined CSV here")

    dump_p = sub.add_parser("dump-iq", help="dump one band's downlink waveform")
    dump_p.add_argument("config")
    dump_p.add_argument("--band", type=int, required=True)
    dump_p.add_argument("--out", required=True)
    dump_p.add_argument("--duration", type=float, default=0.02, help="seconds of waveform")

    args = parser.parse_args(argv)

    if args.command == "run":
        return _cmd_run(args)
    if args.command == "sweep":
        return _cmd_sweep(args)
    return _cmd_dump_iq(args)


def _cmd_run(args) -> int:
    cfg = _load_config(args.config)
    report = run_scenario(cfg)
    payload = report.to_csv() if args.format == "csv" else report.to_text()
    if args.out:
        emit_report(report, args.format, args.out)
    else:
        sys.stdout.write(payload)
    if args.events:
        from .engine import Engine
        from .harness import write_event_log

        engine = Engine(cfg).run()
        write_event_log(engine.events, args.events)
    return 0


def _cmd_sweep(args) -> int:
    cfg = _load_config(args.config)
    values = [_parse_value(v) for v in args.values.split(",")]
    reports = sweep(cfg, args.param, values)
    rows = ["param_value,metric,band,value"]
    for value, report in zip(values, reports):
        for line in report.to_csv().strip().split("\n")[1:]:
            rows.append(f"{value},{line}")
    payload = "\n".join(rows) + "\n"
    if args.out:
        with open(args.out, "w", encoding="ascii") as fh:
            fh.write(payload)
    else:
        sys.stdout.write(payload)
    return 0


def _cmd_dump_iq(args) -> int:
    import numpy as np
    from dataclasses import replace

    from .engine import Engine
    from .iq import IqStream, write_iqf

    cfg = _load_config(args.config)
    cfg = replace(cfg, duration_s=min(cfg.duration_s, args.duration))
    engine = Engine(cfg).run()
    if not 0 <= args.band < engine.k:
        raise SystemExit(f"band {args.band} out of range for {engine.k} bands")
    tx = engine._runners[args.band].tx
    fs = engine.fs
    env = tx.sample(0.0, cfg.duration_s, fs)
    stream = IqStream(env.astype(np.complex128), fs, engine.plan.bands[args.band].center_hz)
    write_iqf(stream, args.out)
    return 0


def _parse_value(text: str):
    text = text.strip()
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    return float(text)


if __name__ == "__main__":
    raise SystemExit(main())
