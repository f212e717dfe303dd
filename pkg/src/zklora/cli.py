"""Command-line entry points for both parties and the offline workflows.

Exit codes: 0 success / Accept, 1 verification Reject, 2 usage or config
error, 3 runtime or protocol error.
"""

from __future__ import annotations

import argparse
import json
import logging
import random
import sys
from pathlib import Path

import numpy as np

from .field import DEFAULT_PROFILE
from .tensorio import (ManifestError, TensorFormatError, gen_synthetic, load_lora, load_model, read_tensors,
                       save_lora, save_model, write_json, write_tensors)

EXIT_OK, EXIT_REJECT, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2, 3

log = logging.getLogger("zklora")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _dims(text: str) -> list[tuple[int, int]]:
    try:
        out = []
        for part in text.split(","):
            n, d = part.lower().split("x")
            out.append((int(n), int(d)))
        return out
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected NxD[,NxD...], got {text!r}") from None


def _loras(text: str) -> list[tuple[int, int]]:
    try:
        return [tuple(int(v) for v in part.split(":")) for part in text.split(",") if part]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LAYER:RANK[,...], got {text!r}") from None


def _regimes(text: str) -> list[tuple[int, int, int, int]]:
    try:
        out = []
        for part in text.split(","):
            k, n, d, r = (int(v) for v in part.split(":"))
            out.append((k, n, d, r))
        return out
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected MODULES:N:D:R[,...], got {text!r}") from None


def _rng(args):
    if args.insecure_seed is None:
        return None
    log.warning("blinders are seeded (--insecure-seed): commitments are not hiding")
    return random.Random(args.insecure_seed)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="zklora", description="Verifiable LoRA inference between a base-model user and an adapter contributor.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="JSON file with option defaults (flags take precedence)")
        return sp

    g = common(sub.add_parser("gen-model", help="write a synthetic base model, adapters and an input batch"))
    g.add_argument("--out", help="output directory")
    g.add_argument("--seed", type=int)
    g.add_argument("--layers", type=_dims, help="one slot per layer, e.g. 64x96,96x64")
    g.add_argument("--lora", type=_loras, help="adapted layers with rank, e.g. 0:8,1:4")
    g.add_argument("--activation", choices=["relu", "none"])
    g.add_argument("--scale-bits", type=int)
    g.add_argument("--batch", type=int, help="input columns m")

    c = common(sub.add_parser("contribute", help="serve adapter deltas and proofs"))
    c.add_argument("--listen", help="HOST:PORT")
    c.add_argument("--weights", help="directory holding lora.zklt")
    c.add_argument("--manifest", help="manifest JSON (defaults to WEIGHTS/manifest.json)")
    c.add_argument("--budget", type=int, help="openings allowed per commitment set")
    c.add_argument("--state", help="directory for commitments and budget counters that survive restarts")
    c.add_argument("--witness-dir", help="persist per-session witness caches here")
    c.add_argument("--insecure-seed", type=int, help="seed blinders (tests only)")

    i = common(sub.add_parser("infer", help="run the base model with remote adapter slots"))
    i.add_argument("--connect", help="HOST:PORT")
    i.add_argument("--model", help="model directory")
    i.add_argument("--input", help="ZKLT file holding tensor X")
    i.add_argument("--out", help="ZKLT file for the outputs")
    i.add_argument("--report", help="verification report JSON")
    i.add_argument("--session-dir", help="persist activation records here")
    i.add_argument("--proof-dir", help="persist received proofs here")
    i.add_argument("--timeout", type=float)

    pr = common(sub.add_parser("prove", help="re-create proofs from a cached contributor session"))
    pr.add_argument("--witness", help="witness cache directory")
    pr.add_argument("--out", help="proof output directory")

    vf = common(sub.add_parser("verify", help="verify a proof directory against activation records"))
    vf.add_argument("--proofs", help="proof directory")
    vf.add_argument("--session", help="user session directory")
    vf.add_argument("--report", help="report JSON output")

    b = common(sub.add_parser("bench", help="settings / proof / verify timing sweep"))
    b.add_argument("--preset", choices=["sizes", "counts", "quick"])
    b.add_argument("--regimes", type=_regimes, help="MODULES:N:D:R[,...] (overrides --preset)")
    b.add_argument("--repetitions", type=int)
    b.add_argument("--batch", type=int)
    b.add_argument("--seed", type=int)
    b.add_argument("--out", help="output directory")
    b.add_argument("--interleave", action="store_true", default=None,
                   help="run repetitions round-robin across regimes")
    b.add_argument("--compare", action="store_true", default=None, help="print the trend comparison")
    return p


DEFAULTS = {
    "gen-model": {"seed": 0, "layers": [(64, 96), (96, 64), (64, 32)], "lora": [(0, 8), (1, 8), (2, 4)],
                  "activation": "relu", "scale_bits": DEFAULT_PROFILE.scale_bits, "batch": 15},
    "contribute": {"listen": "127.0.0.1:7341"},
    "infer": {"timeout": 120.0},
    "bench": {"preset": "quick", "repetitions": 3, "batch": 15, "seed": 0, "compare": False, "interleave": False},
}
REQUIRED = {
    "gen-model": ["out"],
    "contribute": ["weights"],
    "infer": ["connect", "model", "input"],
    "prove": ["witness", "out"],
    "verify": ["proofs", "session"],
    "bench": [],
}


def parse_args(argv):
    """Parse flags, merge the config file beneath them, apply defaults."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError(parser.format_usage().strip())
    sub = parser._subparsers._group_actions[0].choices[args.command]
    dests = {a.dest for a in sub._actions if a.dest not in ("help", "config")}
    merged = {}
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config {args.config}: {e}") from None
        if not isinstance(cfg, dict):
            raise UsageError("config file must hold a JSON object")
        cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
        unknown = sorted(set(cfg) - dests)
        if unknown:
            raise UsageError(f"unknown config keys for {args.command}: {', '.join(unknown)}")
        # run string values through the same converters as flags
        for a in sub._actions:
            if a.dest in cfg and isinstance(cfg[a.dest], str) and a.type is not None:
                try:
                    cfg[a.dest] = a.type(cfg[a.dest])
                except (argparse.ArgumentTypeError, ValueError) as e:
                    raise UsageError(f"config key {a.dest}: {e}") from None
            if a.dest in cfg and a.choices and cfg[a.dest] not in a.choices:
                raise UsageError(f"config key {a.dest}: {cfg[a.dest]!r} not in {list(a.choices)}")
        merged.update(cfg)
    for k in dests:
        v = getattr(args, k)
        if v is not None:
            merged[k] = v
    for k, v in DEFAULTS.get(args.command, {}).items():
        merged.setdefault(k, v)
    for k in dests:
        merged.setdefault(k, None)
    missing = [k for k in REQUIRED[args.command] if merged[k] is None]
    if missing:
        raise UsageError(f"{args.command}: missing required option(s) "
                         + ", ".join("--" + k.replace("_", "-") for k in missing))
    return argparse.Namespace(command=args.command, verbose=args.verbose, **merged)


# -- subcommands ----------------------------------------------------------------


def cmd_gen_model(a) -> int:
    layers = [[("proj", n, d)] for n, d in a.layers]
    loras = [(f"{li}.proj", r) for li, r in a.lora]
    config, tensors, manifest, weights = gen_synthetic(a.seed, layers, loras, activation=a.activation,
                                                       scale_bits=a.scale_bits)
    out = Path(a.out)
    save_model(out / "model", config, tensors)
    save_lora(out / "lora", manifest, weights)
    X = np.random.default_rng(a.seed + 1).uniform(-1, 1, size=(config.in_dim, a.batch)).astype(np.float32)
    write_tensors(out / "input.zklt", {"X": X})
    print(f"wrote {out}/model, {out}/lora and {out}/input.zklt ({len(manifest.modules)} adapted slots)")
    return EXIT_OK


def cmd_contribute(a) -> int:
    from .mpi.server import serve_contributor

    manifest, weights = load_lora(a.weights, a.manifest)
    profile = DEFAULT_PROFILE.with_scale_bits(manifest.modules[0].scale_bits) if manifest.modules else DEFAULT_PROFILE
    try:
        serve_contributor(a.listen, manifest, weights, profile, budget_limit=a.budget, state_dir=a.state,
                          rng=_rng(a), witness_root=a.witness_dir,
                          ready=lambda addr: print(f"listening on {addr[0]}:{addr[1]}", flush=True))
    except KeyboardInterrupt:
        pass
    return EXIT_OK


def cmd_infer(a) -> int:
    from .mpi.client import run_user_inference

    config, tensors = load_model(a.model)
    X = read_tensors(a.input)
    if "X" not in X:
        raise UsageError(f"{a.input} holds no tensor named X")
    res = run_user_inference(a.connect, config, tensors, X["X"], DEFAULT_PROFILE, session_dir=a.session_dir,
                             proof_dir=a.proof_dir, timeout=a.timeout)
    if a.out:
        write_tensors(a.out, {"Y": res.outputs.astype(np.float32)})
    return _finish_report(res.report, a.report)


def cmd_prove(a) -> int:
    from .mpi.records import offline_prove

    paths = offline_prove(a.witness, a.out)
    print(f"wrote {len(paths)} proof file(s) to {a.out}")
    return EXIT_OK


def cmd_verify(a) -> int:
    from .mpi.records import offline_verify

    return _finish_report(offline_verify(a.proofs, a.session), a.report)


def _finish_report(report, path) -> int:
    if path:
        write_json(path, report.to_dict())
    print(f"overall: {report.overall} ({len(report.modules)} module(s), {report.total_verify_ms:.1f} ms)")
    for m in report.modules:
        if not m.accepted:
            print(f"  module {m.module_id}: {m.reason.value}", file=sys.stderr)
    return EXIT_OK if report.accepted else EXIT_REJECT


def cmd_bench(a) -> int:
    from . import bench

    if a.regimes:
        regimes = a.regimes
    elif a.preset == "sizes":
        regimes = bench.SIZE_REGIMES
    elif a.preset == "counts":
        regimes = [(k, 512, 512, 16) for k in bench.COUNT_SWEEP]
    else:
        regimes = [(2, 256, 256, 8), (4, 256, 256, 8), (2, 512, 512, 16)]
    spec = bench.BenchSpec(regimes, m=a.batch, repetitions=a.repetitions, seed=a.seed, interleave=a.interleave)
    rows, _ = bench.run_scaling_bench(spec, a.out, log=lambda s: print(s, file=sys.stderr))
    print(",".join(bench.CSV_COLUMNS))
    for r in rows:
        print(",".join(str(v) for v in r.csv_row()))
    if a.compare:
        print(json.dumps(bench.compare_reference(rows).to_dict(), indent=2))
    return EXIT_OK


COMMANDS = {"gen-model": cmd_gen_model, "contribute": cmd_contribute, "infer": cmd_infer,
            "prove": cmd_prove, "verify": cmd_verify, "bench": cmd_bench}


def main(argv=None) -> int:
    from .mpi.client import ConnectFailed
    from .mpi.records import MissingWitness
    from .lora_proof import ProofError
    from .mpi.wire import ProtocolError, RemoteError

    try:
        a = parse_args(sys.argv[1:] if argv is None else argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[a.command](a)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except ConnectFailed as e:
        print(f"ConnectFailed: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ProtocolError, RemoteError, MissingWitness, ProofError, TensorFormatError, ManifestError,
            OSError, ValueError) as e:
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
