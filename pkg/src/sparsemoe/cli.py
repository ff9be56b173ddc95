"""Command-line entry point: ``sparsemoe {gen-fixture,run,bench,inspect,stats}``.

Exit codes: 0 ok, 1 usage, 2 model error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .analysis import accumulate_stats
from .core import PRESETS, ModelConfig, validate_config
from .engine import Engine, GenerationParams, benchmark, cache_report, format_report
from .errors import ConfigError, ContainerError, EngineError, TraceParseError
from .weightstore import open_container, write_fixture

log = logging.getLogger("sparsemoe")

EXIT_OK, EXIT_USAGE, EXIT_MODEL, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _latency(text: str) -> tuple[int, float]:
    fixed, sep, per_byte = text.partition(":")
    try:
        if not sep:
            raise ValueError
        return int(fixed), float(per_byte)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected NS_FIXED:NS_PER_BYTE, got {text!r}") from None


def _bool_list(text: str) -> list[bool]:
    table = {"on": True, "off": False, "true": True, "false": False, "1": True, "0": False}
    try:
        return [table[t.strip().lower()] for t in text.split(",")]
    except KeyError:
        raise argparse.ArgumentTypeError(f"expected a list of on/off, got {text!r}") from None


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of integers, got {text!r}") from None


def _add_run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("model", type=Path, help="weight container path")
    p.add_argument("--prompt", default="Hello", help="prompt text (UTF-8 bytes are the tokens)")
    p.add_argument("--max-tokens", type=int, default=16)
    p.add_argument("--temperature", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sparse-ffn", action="store_true", help="neuron-sparse ReGLU path")
    p.add_argument("--sparse-head", action="store_true", help="predictor-driven sparse LM head")
    p.add_argument("--offload", action="store_true", help="serve experts from storage through the LRU cache")
    p.add_argument("--cache-bytes", type=int, default=0, help="expert cache capacity (0: one-token working set)")
    p.add_argument("--inject-latency", type=_latency, default=(0, 0.0), metavar="NS_FIXED:NS_PER_BYTE")
    p.add_argument("--no-prefetch", action="store_true", help="issue expert fetches at FFN start")
    p.add_argument("--fetch-units", type=int, default=1)
    p.add_argument("--virtual-time", action="store_true", help="deterministic virtual clock")
    p.add_argument("--attention-ns", type=int, default=GenerationParams.attention_ns,
                   help="modeled attention cost per layer (virtual time)")
    p.add_argument("--expert-ns", type=int, default=GenerationParams.expert_ns,
                   help="modeled cost per expert (virtual time)")
    p.add_argument("--top-m", type=int, default=64)
    p.add_argument("--threshold", type=float, default=float("inf"))
    p.add_argument("--zero-fill", action="store_true", help="fill inactive logits with 0 instead of -inf")
    p.add_argument("--trace", type=Path, help="write a JSON-lines decode trace here")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sparsemoe", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-fixture", help="write a deterministic random model")
    src = g.add_mutually_exclusive_group()
    src.add_argument("--preset", choices=sorted(PRESETS), default="tiny")
    src.add_argument("--config", type=Path, help="key=value config file")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--no-quantize", action="store_true", help="store expert and head matrices as F32")
    g.add_argument("--predictor-rank", type=int)
    g.add_argument("-o", "--output", type=Path, required=True)

    r = sub.add_parser("run", help="generate tokens")
    _add_run_options(r)

    b = sub.add_parser("bench", help="sweep sparse/offload/cache configurations")
    _add_run_options(b)
    b.add_argument("--sweep-sparse", type=_bool_list, default=[False, True])
    b.add_argument("--sweep-offload", type=_bool_list, default=[False, True])
    b.add_argument("--sweep-cache", type=_int_list, default=[0])

    i = sub.add_parser("inspect", help="print the container index")
    i.add_argument("model", type=Path)

    s = sub.add_parser("stats", help="activation frequency and sparsity tables from traces")
    s.add_argument("traces", type=Path, nargs="+")
    s.add_argument("--activation-out", type=Path)
    s.add_argument("--sparsity-out", type=Path)
    return parser


def _params(args) -> GenerationParams:
    if not args.prompt:
        raise UsageError("empty prompt")
    try:
        return _make_params(args)
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc


def _make_params(args) -> GenerationParams:
    return GenerationParams(
        max_tokens=args.max_tokens, temperature=args.temperature, seed=args.seed,
        sparse_ffn=args.sparse_ffn, sparse_head=args.sparse_head, offload=args.offload,
        cache_bytes=args.cache_bytes, inject_latency=args.inject_latency, prefetch=not args.no_prefetch,
        virtual_time=args.virtual_time, attention_ns=args.attention_ns, expert_ns=args.expert_ns,
        fetch_units=args.fetch_units, top_m=args.top_m, threshold=args.threshold, zero_fill=args.zero_fill,
    )


def _load(path: Path):
    try:
        return open_container(path)
    except FileNotFoundError as exc:
        raise ContainerError(f"{path}: {exc.strerror}") from exc


def cmd_gen_fixture(args) -> int:
    if args.config:
        try:
            config = ModelConfig.from_text(args.config.read_text())
        except OSError as exc:
            raise UsageError(f"cannot read {args.config}: {exc}") from exc
    else:
        config = PRESETS[args.preset]
    problems = validate_config(config)
    if problems:
        raise ConfigError("; ".join(problems))
    write_fixture(config, args.seed, args.output, quantize=not args.no_quantize,
                  predictor_rank=args.predictor_rank)
    container = open_container(args.output)
    print(f"wrote {args.output}: {len(container.index)} tensors, {container.source.size} bytes, "
          f"checksum {container.checksum:016x}")
    return EXIT_OK


def cmd_run(args) -> int:
    params = _params(args)
    container = _load(args.model)
    with Engine(container, params) as engine:
        result = engine.generate(args.prompt.encode())
    if args.trace:
        with open(args.trace, "w") as fh:
            result.trace.write(fh)
    print(result.text())
    s = result.trace.summary
    print(f"{s['steps']} steps, {s['tokens_per_s']:.2f} tokens/s; {cache_report(s)}", file=sys.stderr)
    return EXIT_OK


def cmd_bench(args) -> int:
    params = _params(args)
    container = _load(args.model)
    rows = benchmark(container, args.prompt.encode(), params, args.sweep_sparse,
                     args.sweep_offload, args.sweep_cache)
    print(format_report(rows))
    return EXIT_OK


def cmd_inspect(args) -> int:
    container = _load(args.model)
    c = container.config
    print(f"format v{container.format_version}, {container.source.size} bytes, checksum {container.checksum:016x}")
    print(c.to_text(), end="")
    print(f"{'name':40} {'dtype':>5} {'rows':>7} {'cols':>7} {'offset':>12} {'length':>10}")
    for rec in container.iter_tensor_records():
        print(f"{rec.name:40} {rec.dtype.name:>5} {rec.rows:>7} {rec.cols:>7} {rec.byte_offset:>12} {rec.byte_length:>10}")
    return EXIT_OK


def cmd_stats(args) -> int:
    def lines():
        for path in args.traces:
            with open(path) as fh:
                yield from fh

    act, sparsity = accumulate_stats(lines())
    if args.activation_out:
        args.activation_out.write_text(act.table())
    if args.sparsity_out:
        args.sparsity_out.write_text(sparsity.table())
    print(f"{act.total_tokens} tokens; {act.fraction_below(0.14):.1%} of experts below frequency 0.14")
    for layer, q in sparsity.layer_quantiles().items():
        print(f"layer {layer}: inactive-neuron fraction " + " ".join(f"{v:.3f}" for v in q))
    return EXIT_OK


COMMANDS = {"gen-fixture": cmd_gen_fixture, "run": cmd_run, "bench": cmd_bench,
            "inspect": cmd_inspect, "stats": cmd_stats}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"sparsemoe: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ContainerError, ConfigError, TraceParseError) as exc:
        print(f"sparsemoe: model error: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except (EngineError, OSError) as exc:
        print(f"sparsemoe: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
