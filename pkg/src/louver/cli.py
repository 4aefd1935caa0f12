"""Command-line entry point: ``louver <command> ...``."""

from __future__ import annotations

import argparse
import sys
import time

import numpy as np

from louver.bench import (
    ALGOS,
    AblationSpec,
    SimConfig,
    ThresholdSource,
    render_text,
    rows_to_csv,
    run_ablation,
    run_decode_sim,
    speedup_estimate,
    thresholds_for,
)
from louver.build import GROUPINGS, BuildConfig, build_index
from louver.geometry import ENCLOSURE_KINDS
from louver.io import FormatError, load_dataset, load_snapshot, save_dataset, save_snapshot
from louver.query import brute_force_range, search
from louver.store import KeyStore
from louver.synth import Distribution, gen_synthetic
from louver.thresholds import OracleConfig


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x)


def _strs(text: str) -> tuple[str, ...]:
    return tuple(x for x in text.split(",") if x)


def _add_build_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--S", type=int, default=4, help="number of subspaces")
    p.add_argument("--r", type=int, default=4, help="maximum group size")
    p.add_argument("--grouping", choices=GROUPINGS, default="pca_tree")
    p.add_argument("--enclosing", choices=ENCLOSURE_KINDS, default="ball")
    p.add_argument("--seed", type=int, default=0)


def _build_config(args) -> BuildConfig:
    return BuildConfig(S=args.S, r=args.r, grouping=args.grouping, enclosing=args.enclosing, rng_seed=args.seed)


def _describe(index) -> str:
    c = index.config
    return (
        f"indexed={index.indexed_count} d={index.d} S={c.S} r={c.r} grouping={c.grouping} "
        f"enclosing={c.enclosing} groups_per_subspace={index.K} batches={index.batches}"
    )


def cmd_gen(args) -> int:
    dist = Distribution.parse(args.dist)
    keys, queries = gen_synthetic(args.n, args.d, dist, args.seed, args.queries)
    save_dataset(args.keys, keys)
    if args.query_out:
        save_dataset(args.query_out, queries)
    print(f"wrote {keys.shape[0]}x{keys.shape[1]} keys ({dist}) to {args.keys}")
    if args.query_out:
        print(f"wrote {queries.shape[0]} queries to {args.query_out}")
    return 0


def _build_and_report(args) -> int:
    keys = load_dataset(args.keys)
    t0 = time.perf_counter()
    index = build_index(KeyStore.from_arrays(keys), _build_config(args))
    print(f"built in {time.perf_counter() - t0:.3f}s: {_describe(index)}")
    if args.out:
        save_snapshot(args.out, index)
        print(f"saved snapshot to {args.out}")
    return 0


def cmd_query(args) -> int:
    keys = load_dataset(args.keys)
    store = KeyStore.from_arrays(keys)
    if args.index:
        index = load_snapshot(args.index)
        if index.d != store.d or index.indexed_count > store.n:
            print("error: snapshot does not match the key file", file=sys.stderr)
            return 2
    else:
        index = build_index(store, _build_config(args))
    queries = load_dataset(args.queries)[: args.limit]
    if args.tau is not None:
        src = ThresholdSource("tau", args.tau)
    else:
        src = ThresholdSource.parse(args.oracle)
    taus = thresholds_for(keys[: index.indexed_count], queries, src, args.seed)
    algo = "full" if args.algo == "full" else "ta"
    violations = 0
    fs = []
    for i, (q, tau) in enumerate(zip(queries, taus)):
        t0 = time.perf_counter()
        ans, cand = search(index, store, q, tau, algo)
        ms = 1e3 * (time.perf_counter() - t0)
        st = cand.stats
        fs.append(st.f_scan)
        line = f"q{i}: tau={tau:.6g} retrieved={ans.shape[0]} scanned={st.keys_scanned} f_scan={st.f_scan:.4f} ms={ms:.3f}"
        if algo == "ta":
            line += f" depth={st.ta_stop_depth} halted={st.ta_halted}"
        if args.verify:
            ok = np.array_equal(ans, brute_force_range(store, q, tau, index.indexed_count))
            violations += not ok
            line += " ok" if ok else " MISMATCH"
        print(line)
    if fs:
        f = float(np.mean(fs))
        sp = speedup_estimate(index.gate_cost, index.config.r, f)
        print(f"mean f_scan={f:.4f} speedup_estimate={sp:.2f}x over {len(fs)} queries ({src})")
    if args.verify:
        print(f"violations={violations}")
    return 1 if violations else 0


def cmd_decode_sim(args) -> int:
    need = args.prefill + args.steps
    if args.keys:
        keys = load_dataset(args.keys)
        queries = load_dataset(args.queries) if args.queries else gen_synthetic(1, keys.shape[1], "gaussian", args.seed + 1, need)[1]
    else:
        keys, queries = gen_synthetic(need, args.d, Distribution.parse(args.dist), args.seed, args.steps)
    oracle = None
    if args.tau is None:
        oracle = OracleConfig.parse(args.oracle)
    cfg = SimConfig(
        build=_build_config(args),
        steps=args.steps,
        buffer=args.buffer,
        algo=args.algo,
        oracle=oracle,
        tau=args.tau,
        verify=args.verify,
        ks=_ints(args.k),
        prefill=args.prefill,
        strict_buffer=args.strict_buffer,
        seed=args.seed,
    )
    report = run_decode_sim(keys, queries, cfg)
    for key, val in report.summary().items():
        print(f"{key}: {val:.6g}" if isinstance(val, float) else f"{key}: {val}")
    return 1 if args.verify and report.violations else 0


def cmd_ablate(args) -> int:
    if args.spec:
        spec = AblationSpec.from_json(args.spec)
    else:
        spec = AblationSpec(
            S=_ints(args.S),
            r=_ints(args.r),
            grouping=_strs(args.grouping),
            enclosing=_strs(args.enclosing),
            algo=_strs(args.algo),
            dist=args.dist,
            n=args.n,
            d=args.d,
            queries=args.queries,
            keys_path=args.keys,
            queries_path=args.query_file,
            threshold=args.threshold,
            seed=args.seed,
            repeats=args.repeats,
        )
    rows = run_ablation(spec)
    text = rows_to_csv(rows)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            fh.write(text)
    print(render_text(rows))
    return 1 if any(r.status != "ok" for r in rows) else 0


def cmd_snapshot(args) -> int:
    if args.action == "save":
        if not args.out:
            print("error: snapshot save needs --out", file=sys.stderr)
            return 2
        return _build_and_report(args)
    index = load_snapshot(args.path)
    print(_describe(index))
    return 0


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="louver", description="Halfspace range search over attention keys.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a synthetic key (and query) dataset")
    p.add_argument("--n", type=int, default=4096)
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--dist", default="gaussian", help="gaussian | mixture:k,spread | lowrank:rank,noise")
    p.add_argument("--queries", type=int, default=100, help="number of queries to draw")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--keys", required=True, help="output path for keys")
    p.add_argument("--query-out", help="output path for queries")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("build", help="index a key file")
    p.add_argument("--keys", required=True)
    p.add_argument("--out", help="write an index snapshot here")
    _add_build_flags(p)
    p.set_defaults(func=_build_and_report)

    p = sub.add_parser("query", help="run threshold queries")
    p.add_argument("--keys", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--index", help="snapshot to use instead of building")
    p.add_argument("--tau", type=float)
    p.add_argument("--oracle", default="budget:0.05", help="max | topk:m | gap | meanmax | budget:alpha")
    p.add_argument("--algo", choices=("full", "ta"), default="ta")
    p.add_argument("--verify", action="store_true", help="compare every answer with a brute-force scan")
    p.add_argument("--limit", type=int, help="only the first LIMIT queries")
    _add_build_flags(p)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("decode-sim", help="simulate decoding with buffered updates")
    p.add_argument("--keys", help="key dataset (default: synthetic)")
    p.add_argument("--queries", help="query dataset (with --keys)")
    p.add_argument("--dist", default="gaussian")
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--steps", type=int, default=512)
    p.add_argument("--prefill", type=int, default=1)
    p.add_argument("--buffer", type=int, default=128)
    p.add_argument("--tau", type=float)
    p.add_argument("--oracle", default="budget:0.05")
    p.add_argument("--algo", choices=ALGOS, default="ta")
    p.add_argument("--k", default="10", help="comma-separated recall ranks")
    p.add_argument("--strict-buffer", action="store_true", help="buffered keys below tau are not attended")
    p.add_argument("--verify", action="store_true")
    _add_build_flags(p)
    p.set_defaults(func=cmd_decode_sim)

    p = sub.add_parser("ablate", help="run a grid of index configurations")
    p.add_argument("--spec", help="JSON ablation spec; overrides the grid flags")
    p.add_argument("--S", default="2,4,8,16")
    p.add_argument("--r", default="4")
    p.add_argument("--grouping", default="contiguous")
    p.add_argument("--enclosing", default="ball")
    p.add_argument("--algo", default="ta")
    p.add_argument("--dist", default="gaussian")
    p.add_argument("--n", type=int, default=4096)
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--queries", type=int, default=32)
    p.add_argument("--keys", help="key dataset instead of synthetic data")
    p.add_argument("--query-file", help="query dataset (with --keys)")
    p.add_argument("--threshold", default="fraction:0.05", help="fraction:alpha | tau:x | oracle variant")
    p.add_argument("--repeats", type=int, help="timed repetitions per query")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="CSV output path")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("snapshot", help="save or inspect index snapshots")
    snap = p.add_subparsers(dest="action", required=True)
    s = snap.add_parser("save")
    s.add_argument("--keys", required=True)
    s.add_argument("--out", required=True)
    _add_build_flags(s)
    s = snap.add_parser("load")
    s.add_argument("path")
    p.set_defaults(func=cmd_snapshot)
    return ap


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        return args.func(args)
    except (FormatError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
