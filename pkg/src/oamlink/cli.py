"""Command-line front end.

Every subcommand loads one scenario (from a preset name or a YAML file),
runs one pipeline stage and writes CSV to stdout or --out.  CSV files
start with a '#'-prefixed header block recording the schema version, the
scenario hash and the seed, so results stay attributable.

Exit codes: 0 success, 1 pipeline failure (partial output removed),
2 argument or scenario parse failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import os
import sys
from contextlib import contextmanager
from typing import Iterator, List, Optional, Sequence, TextIO

import numpy as np

from . import __version__
from .config import ConfigError, SystemConfig
from .configio import dump_config, load_config
from .channel import assemble_channel
from .estimation import run_estimation
from .linkeval import (
    ber_monte_carlo,
    build_link_chain,
    complexity_estimates,
    evaluate_link,
    mu_mimo_baseline_se,
)
from .modes import build_mode_transform, effective_oam_channel
from .precoding import build_precoder, verify_decoupling
from .presets import get_preset, preset_names


def _config_hash(config: SystemConfig) -> str:
    return hashlib.sha256(dump_config(config).encode()).hexdigest()[:16]


def _load_scenario(args: argparse.Namespace) -> SystemConfig:
    if args.preset and args.config:
        raise ConfigError("give either --preset or --config, not both")
    if args.preset:
        return get_preset(args.preset)
    if args.config:
        return load_config(args.config)
    raise ConfigError("a scenario is required: --preset NAME or --config FILE")


@contextmanager
def _output(path: Optional[str]) -> Iterator[TextIO]:
    """Stdout, or a file that is removed again if the pipeline fails."""
    if path is None:
        yield sys.stdout
        return
    fh = open(path, "w", newline="")
    try:
        yield fh
    except BaseException:
        fh.close()
        if os.path.exists(path):
            os.remove(path)
        raise
    fh.close()


def _write_header(fh: TextIO, config: SystemConfig, seed: Optional[int], kind: str) -> None:
    fh.write(f"# oamlink {__version__} {kind}\n")
    fh.write(f"# scenario_hash: {_config_hash(config)}\n")
    fh.write(f"# seed: {seed}\n")


def _channel_mode(args: argparse.Namespace) -> str:
    return "exact" if args.exact_channel else "farfield"


def _parse_snr_list(text: str) -> List[float]:
    return [float(tok) for tok in text.split(",") if tok.strip()]


def _cmd_list_presets(args: argparse.Namespace) -> None:
    for name in preset_names():
        print(name)


def _cmd_estimate(args: argparse.Namespace) -> None:
    config = _load_scenario(args)
    snr = args.snr if args.snr is not None else config.noise.snr_db
    with _output(args.out) as fh:
        _write_header(fh, config, args.seed, "estimate")
        writer = csv.writer(fh)
        writer.writerow(
            [
                "trial",
                "user",
                "range_m",
                "elevation_deg",
                "azimuth_deg",
                "nmse_range",
                "nmse_elevation",
                "nmse_azimuth",
            ]
        )
        for trial in range(args.trials):
            report = run_estimation(
                config,
                snr_db=None if args.noiseless else snr,
                seed=(args.seed, trial),
                channel_mode=_channel_mode(args),
            )
            for p in range(config.user_count):
                writer.writerow(
                    [
                        trial,
                        p + 1,
                        f"{report.r_hat[p]:.9f}",
                        f"{np.degrees(report.theta_hat[p]):.9f}",
                        f"{np.degrees(report.phi_hat[p]):.9f}",
                        f"{report.nmse_r[p]:.6e}",
                        f"{report.nmse_theta[p]:.6e}",
                        f"{report.nmse_phi[p]:.6e}",
                    ]
                )


def _cmd_channel_dump(args: argparse.Namespace) -> None:
    config = _load_scenario(args)
    channel = assemble_channel(config, mode=_channel_mode(args))
    with _output(args.out) as fh:
        _write_header(fh, config, args.seed, "channel-dump")
        writer = csv.writer(fh)
        writer.writerow(["subcarrier", "row", "col", "real", "imag"])
        for w in range(channel.data.shape[0]):
            mat = channel.data[w]
            for i in range(mat.shape[0]):
                for j in range(mat.shape[1]):
                    writer.writerow(
                        [w, i, j, f"{mat[i, j].real:.12e}", f"{mat[i, j].imag:.12e}"]
                    )


def _cmd_precoder_dump(args: argparse.Namespace) -> None:
    config = _load_scenario(args)
    channel = assemble_channel(config, mode=_channel_mode(args))
    transform = build_mode_transform(
        config.modes.data_modes,
        config.rx_element_count,
        config.user_count,
        config.ring_count,
    )
    eff = effective_oam_channel(channel, transform)
    pset = build_precoder(eff)
    report = verify_decoupling(eff, pset)
    with _output(args.out) as fh:
        _write_header(fh, config, args.seed, "precoder-dump")
        fh.write(f"# max_intra_residual: {report.max_intra:.6e}\n")
        fh.write(f"# max_cross_residual: {report.max_cross:.6e}\n")
        writer = csv.writer(fh)
        writer.writerow(["subcarrier", "row", "col", "real", "imag"])
        for w in range(pset.p.shape[0]):
            mat = pset.p[w]
            for i in range(mat.shape[0]):
                for j in range(mat.shape[1]):
                    writer.writerow(
                        [w, i, j, f"{mat[i, j].real:.12e}", f"{mat[i, j].imag:.12e}"]
                    )


def _cmd_ber(args: argparse.Namespace) -> None:
    config = _load_scenario(args)
    snrs = _parse_snr_list(args.snr_sweep)
    points = ber_monte_carlo(
        config,
        snrs,
        symbols=args.symbols,
        trials=args.trials,
        seed=args.seed,
        position_source=args.positions,
        channel_mode=_channel_mode(args),
    )
    with _output(args.out) as fh:
        _write_header(fh, config, args.seed, "ber")
        writer = csv.writer(fh)
        writer.writerow(["snr_db", "ber", "analytic_ber", "bits", "errors"])
        for pt in points:
            writer.writerow(
                [pt.snr_db, f"{pt.ber:.6e}", f"{pt.analytic_ber:.6e}", pt.bits, pt.errors]
            )


def _cmd_se(args: argparse.Namespace) -> None:
    config = _load_scenario(args)
    snrs = _parse_snr_list(args.snr_sweep)
    chain = build_link_chain(config, channel_mode=_channel_mode(args))
    with _output(args.out) as fh:
        _write_header(fh, config, args.seed, "se")
        writer = csv.writer(fh)
        writer.writerow(["snr_db", "se_bits_per_hz", "baseline_se_bits_per_hz"])
        for snr in snrs:
            link = evaluate_link(config, snr, chain=chain)
            base = (
                mu_mimo_baseline_se(config, snr, channel_mode=_channel_mode(args))
                if args.baseline
                else None
            )
            writer.writerow(
                [
                    snr,
                    f"{link.spectral_efficiency:.6f}",
                    f"{base.spectral_efficiency:.6f}" if base else "",
                ]
            )


def _cmd_ee(args: argparse.Namespace) -> None:
    config = _load_scenario(args)
    snrs = _parse_snr_list(args.snr_sweep)
    chain = build_link_chain(config, channel_mode=_channel_mode(args))
    with _output(args.out) as fh:
        _write_header(fh, config, args.seed, "ee")
        writer = csv.writer(fh)
        writer.writerow(["snr_db", "ee_bits_per_joule", "baseline_ee_bits_per_joule"])
        for snr in snrs:
            link = evaluate_link(config, snr, chain=chain)
            base = (
                mu_mimo_baseline_se(config, snr, channel_mode=_channel_mode(args))
                if args.baseline
                else None
            )
            writer.writerow(
                [
                    snr,
                    f"{link.energy_efficiency:.6e}",
                    f"{base.energy_efficiency:.6e}" if base else "",
                ]
            )


def _cmd_complexity(args: argparse.Namespace) -> None:
    config = _load_scenario(args)
    counts = complexity_estimates(config)
    with _output(args.out) as fh:
        _write_header(fh, config, args.seed, "complexity")
        writer = csv.writer(fh)
        writer.writerow(["stage", "operations"])
        for stage, ops in counts.items():
            writer.writerow([stage, f"{ops:.6e}"])


def _add_scenario_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--preset", help="named scenario")
    parser.add_argument("--config", help="scenario YAML file")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", help="output CSV path (default: stdout)")
    parser.add_argument(
        "--exact-channel",
        action="store_true",
        help="use exact element-pair distances instead of the far-field expansion",
    )
    parser.add_argument(
        "--single-thread",
        action="store_true",
        help="accepted for interface stability; the implementation is single-threaded",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="oamlink",
        description="Multi-user orbital-angular-momentum backhaul simulator",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("list-presets", help="print available scenario names")
    p.set_defaults(func=_cmd_list_presets)

    p = sub.add_parser("estimate", help="estimate user positions from training")
    _add_scenario_args(p)
    p.add_argument("--trials", type=int, default=1)
    p.add_argument("--snr", type=float, help="training SNR in dB (default: scenario)")
    p.add_argument("--noiseless", action="store_true")
    p.set_defaults(func=_cmd_estimate)

    p = sub.add_parser("channel-dump", help="write the per-subcarrier channel")
    _add_scenario_args(p)
    p.set_defaults(func=_cmd_channel_dump)

    p = sub.add_parser("precoder-dump", help="write the cascade precoder")
    _add_scenario_args(p)
    p.set_defaults(func=_cmd_precoder_dump)

    p = sub.add_parser("ber", help="bit error rate sweep")
    _add_scenario_args(p)
    p.add_argument("--snr-sweep", default="0,5,10,15,20,25")
    p.add_argument("--symbols", type=int, default=50)
    p.add_argument("--trials", type=int, default=1)
    p.add_argument("--positions", choices=("true", "estimated"), default="true")
    p.set_defaults(func=_cmd_ber)

    p = sub.add_parser("se", help="spectral efficiency sweep")
    _add_scenario_args(p)
    p.add_argument("--snr-sweep", default="0,5,10,15,20,25")
    p.add_argument("--baseline", action="store_true", help="include the MIMO reference")
    p.set_defaults(func=_cmd_se)

    p = sub.add_parser("ee", help="energy efficiency sweep")
    _add_scenario_args(p)
    p.add_argument("--snr-sweep", default="0,5,10,15,20,25")
    p.add_argument("--baseline", action="store_true", help="include the MIMO reference")
    p.set_defaults(func=_cmd_ee)

    p = sub.add_parser("complexity", help="stage operation counts")
    _add_scenario_args(p)
    p.set_defaults(func=_cmd_complexity)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        args.func(args)
    except (ConfigError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # pipeline failure
        print(f"pipeline error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
