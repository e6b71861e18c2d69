"""Command-line entry point: ``trajbench <verb> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import yaml

from . import harness
from .anchor import AnchorRouter, RouteQuery
from .annotate import INSTRUCTION_FIELDS, QUERY_FIELDS, TemplateGenerator, build_prompt, generate, save_annotations
from .errors import ConfigError
from .fuse import FuseParams, TrainConfig, build_db, load_db, retrieve, save_db, train
from .geo import GeoPoint, HexConfig, load_cell_meta
from .harness import FILES, CityBundle, IntentDraw, SplitSpec
from .intent import load_pools
from .metrics import DEFAULT_EPS_KM
from .providers import HashEmbedder, provider_from_env
from .qc import ProviderJudge, select_top
from .rap import RapCaptioner
from .roadnet import load_roadnet
from .traj import load_trajectories, save_phase_seqs

log = logging.getLogger("trajbench")


def _city(args) -> CityBundle:
    return CityBundle.load(args.city)


def _path(args, key):
    return Path(args.city) / FILES[key]


def _generator(args):
    provider = provider_from_env()
    if provider is not None:
        provider.max_in_flight = args.jobs
    return provider or TemplateGenerator()


def _parts(args, bundle):
    path = _path(args, "split")
    if path.exists():
        data = harness.load_split(path)
        return data["train"], data["val"], data["test"]
    log.info("no split.json in %s, splitting with seed %d", args.city, args.seed)
    return harness.split([t.mm_id for t in bundle.trajectories], SplitSpec(seed=args.seed))


def _phase_seqs(args, bundle):
    # phases are cheap to recompute and the saved file is the published text layout
    return harness.compress_all(bundle)


def _intents(args):
    path = _path(args, "intents")
    if not path.exists():
        raise ConfigError(f"{path} missing; run sample-intents first")
    return {rec["traj_id"]: IntentDraw.from_record(rec) for rec in harness.load_jsonl(path)}


# -- verbs -----------------------------------------------------------------------------

def cmd_synth_city(args):
    bundle = harness.synth_city(args.grid, args.n_traj, args.seed, args.spacing_m, annotate=not args.no_annotate)
    bundle.save(args.out)
    print(f"wrote {len(bundle.graph)} segments, {len(bundle.cells)} cells, "
          f"{len(bundle.trajectories)} trajectories to {args.out}")


def cmd_ingest(args):
    cfg = HexConfig(GeoPoint(args.origin_lat, args.origin_lon), args.edge_m)
    bundle = CityBundle(cfg, load_roadnet(args.roadnet), load_cell_meta(args.cells, cfg),
                        load_trajectories(args.trajectories, args.min_len))
    bundle.save(args.out)
    print(f"ingested {len(bundle.trajectories)} trajectories into {args.out}")


def cmd_compress(args):
    bundle = _city(args)
    seqs = harness.compress_all(bundle)
    save_phase_seqs(seqs, _path(args, "phases"))
    print(f"compressed {len(seqs)} trajectories")


def cmd_sample_intents(args):
    bundle = _city(args)
    pools = load_pools(args.pools)
    draws = harness.sample_intents([t.mm_id for t in bundle.trajectories], args.seed, pools)
    harness.save_jsonl([d.to_record() for d in draws.values()], _path(args, "intents"), schema="intents")
    print(f"sampled {len(draws)} intent profiles")


def cmd_annotate(args):
    bundle = _city(args)
    intents = _intents(args)
    gen = _generator(args)
    seqs = _phase_seqs(args, bundle)
    prompts = [build_prompt(ps, intents[ps.traj_id].profile, intents[ps.traj_id].style,
                            intents[ps.traj_id].assignment) for ps in seqs]
    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        records = list(pool.map(lambda p: generate(gen, p), prompts))
    save_annotations(records, _path(args, "annotations"))
    print(f"annotated {len(records)} trajectories")


def _judge():
    provider = provider_from_env()
    return ProviderJudge(provider) if provider is not None else None


def cmd_qc(args):
    bundle = _city(args)
    outcomes = harness.qc_all(bundle, _phase_seqs(args, bundle), bundle.annotations, _judge())
    harness.save_jsonl([o.to_record() for o in outcomes], _path(args, "qc"), schema="qc")
    save_annotations([o.record for o in outcomes], _path(args, "annotations"))
    passed = sum(o.passed for o in outcomes)
    print(f"qc: {passed}/{len(outcomes)} records passed")


def cmd_judge(args):
    bundle = _city(args)
    cards = harness.judge_all(bundle, _phase_seqs(args, bundle), bundle.annotations, _judge())
    harness.save_jsonl([c.to_record() for c in cards], _path(args, "scores"), schema="scores")
    print(f"judged {len(cards)} records")
    if args.top:
        top = select_top([(c.item_id, c) for c in cards], min(args.top, len(cards)))
        print(json.dumps(top))


def cmd_split(args):
    bundle = _city(args)
    spec = SplitSpec(tuple(args.ratios), args.seed)
    parts = harness.split([t.mm_id for t in bundle.trajectories], spec)
    harness.save_split(parts, spec, _path(args, "split"))
    print("split sizes: " + ", ".join(str(len(p)) for p in parts))


def cmd_anchor_run(args):
    bundle = _city(args)
    train, val, test = _parts(args, bundle)
    ann = bundle.annotation_map()
    target = {"train": train, "val": val, "test": test}[args.split]
    router = AnchorRouter(bundle.graph, bundle.cells, args.mode, args.pool, args.skeleton)
    router.fit([(getattr(ann[t], f), bundle.trajectory(t)) for t in train for f in INSTRUCTION_FIELDS])
    queries = []
    for tid in target:
        gt = bundle.trajectory(tid)
        for style, f in zip(harness.STYLE_NAMES, INSTRUCTION_FIELDS):
            queries.append(RouteQuery(f"{tid}:{style}", getattr(ann[tid], f), gt.rid_list[0], gt.time_list[0]))
    preds = router.predict(queries)
    harness.save_jsonl([p.to_record() for p in preds], args.out)
    print(f"wrote {len(preds)} route predictions to {args.out}")


def cmd_fuse_train(args):
    bundle = _city(args)
    train_ids, _, _ = _parts(args, bundle)
    ann = bundle.annotation_map()
    pairs = [(getattr(ann[t], f), bundle.trajectory(t)) for t in train_ids for f in QUERY_FIELDS]
    res = train(pairs, bundle.graph, bundle.cells, HashEmbedder(),
                TrainConfig(args.epochs, args.batch_size, args.lr, args.seed))
    Path(args.out).write_text(json.dumps({"params": res.params.to_dict(), "losses": res.losses}) + "\n")
    print(f"trained on {len(pairs)} pairs, final loss {res.losses[-1]:.4f}")


def cmd_fuse_retrieve(args):
    bundle = _city(args)
    _, val, test = _parts(args, bundle)
    emb = HashEmbedder()
    if args.db and Path(args.db).exists():
        db = load_db(args.db)
    else:
        params = FuseParams.from_dict(json.loads(Path(args.params).read_text())["params"])
        ids = {"val": val, "test": test}[args.split]
        db = build_db(params, [bundle.trajectory(t) for t in ids], bundle.graph, bundle.cells, emb)
        if args.db:
            save_db(db, args.db)
    queries = args.query or [getattr(a, f) for a in bundle.annotations if a.traj_id in set(db.ids) for f in QUERY_FIELDS]
    rows = [{"query": q, "ranked": retrieve(q, db, emb, args.k)} for q in queries]
    harness.save_jsonl(rows, args.out)
    print(f"ranked {len(rows)} queries against {len(db)} trajectories")


def cmd_rap_run(args):
    bundle = _city(args)
    train_ids, val, test = _parts(args, bundle)
    ann = bundle.annotation_map()
    model = RapCaptioner(bundle.graph, bundle.cells, args.mode, args.k, generator=_generator(args))
    model.fit([(bundle.trajectory(t), ann[t].trajectory_caption) for t in train_ids])
    target = {"val": val, "test": test}[args.split]
    captions = model.predict([bundle.trajectory(t) for t in target])
    harness.save_jsonl([{"traj_id": t, "caption": c} for t, c in zip(target, captions)], args.out)
    print(f"captioned {len(captions)} trajectories")


def cmd_eval(args):
    bundle = _city(args)
    parts = _parts(args, bundle)
    method = args.method or harness.TASK_METHODS[args.task][0]
    kw = {}
    if args.task == 1:
        kw = {"eps_km": args.eps_km}
    elif args.task == 2:
        kw = {"j_mode": args.j_mode, "seed": args.seed}
    res = harness.run_benchmark(bundle, args.task, method, args.out, parts, **kw)
    print(json.dumps({k: v for k, v in res.report.items() if not isinstance(v, dict)}, sort_keys=True))


def cmd_figure_data(args):
    report = json.loads(Path(args.report).read_text())
    harness.write_figure_csv(harness.figure_rows_from_report(report), args.out)
    print(f"wrote {args.out}")


# -- parser ----------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", type=Path, help="YAML file of per-verb option defaults")
    common.add_argument("--jobs", type=int, default=1, help="max concurrent provider calls")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="trajbench", description="Trajectory-language benchmark toolkit",
                                 parents=[common])
    sub = ap.add_subparsers(dest="verb", required=True)

    def verb(name, fn, city=True, **kw):
        p = sub.add_parser(name, parents=[common], **kw)
        if city:
            p.add_argument("--city", required=True, help="city bundle directory")
        p.set_defaults(fn=fn, verb_parser=p)
        return p

    p = verb("synth-city", cmd_synth_city, city=False, help="generate a synthetic grid city")
    p.add_argument("--out", required=True)
    p.add_argument("--grid", type=int, default=5)
    p.add_argument("--n-traj", type=int, default=100)
    p.add_argument("--spacing-m", type=float, default=350.0)
    p.add_argument("--no-annotate", action="store_true")

    p = verb("ingest", cmd_ingest, city=False, help="validate and import external files")
    p.add_argument("--roadnet", required=True)
    p.add_argument("--cells", required=True)
    p.add_argument("--trajectories", required=True)
    p.add_argument("--origin-lat", type=float, required=True)
    p.add_argument("--origin-lon", type=float, required=True)
    p.add_argument("--edge-m", type=float, default=174.0)
    p.add_argument("--min-len", type=int, default=2)
    p.add_argument("--out", required=True)

    verb("compress", cmd_compress, help="write phase sequences")
    p = verb("sample-intents", cmd_sample_intents, help="draw intent profiles and personas")
    p.add_argument("--pools", help="YAML persona/style pools")
    verb("annotate", cmd_annotate, help="generate annotation records")
    verb("qc", cmd_qc, help="sanitize and check annotations")
    p = verb("judge", cmd_judge, help="score annotations against the rubric")
    p.add_argument("--top", type=int, default=0)
    p = verb("split", cmd_split, help="train/val/test split")
    p.add_argument("--ratios", type=float, nargs=3, default=[0.7, 0.1, 0.2])

    p = verb("anchor-run", cmd_anchor_run, help="instruction-to-route generation")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--mode", choices=("trajanchor", "destsp-bm25", "destsp-embed", "constrsp"), default="trajanchor")
    p.add_argument("--pool", type=int, default=5)
    p.add_argument("--skeleton", type=int, default=3)
    p.add_argument("--out", required=True)

    p = verb("fuse-train", cmd_fuse_train, help="train the fused retrieval encoder")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=0.5)
    p.add_argument("--out", required=True)

    p = verb("fuse-retrieve", cmd_fuse_retrieve, help="rank trajectories for queries")
    p.add_argument("--params")
    p.add_argument("--db", help="fused database JSONL (read if present, else written)")
    p.add_argument("--split", choices=("val", "test"), default="test")
    p.add_argument("--query", action="append")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--out", required=True)

    p = verb("rap-run", cmd_rap_run, help="caption trajectories")
    p.add_argument("--mode", choices=("struct", "sem", "rap"), default="rap")
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--split", choices=("val", "test"), default="test")
    p.add_argument("--out", required=True)

    p = verb("eval", cmd_eval, help="run a benchmark task and write its report")
    p.add_argument("--task", type=int, choices=(1, 2, 3), required=True)
    p.add_argument("--method")
    p.add_argument("--eps-km", type=float, default=DEFAULT_EPS_KM)
    p.add_argument("--j-mode", choices=("max", "mean"), default="max")
    p.add_argument("--out", required=True)

    p = verb("figure-data", cmd_figure_data, city=False, help="CSV rows for plotting from a report")
    p.add_argument("--report", required=True)
    p.add_argument("--out", required=True)
    return ap


def _apply_config(args):
    if args.config is None:
        return args
    with open(args.config, encoding="utf-8") as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{args.config}: expected a mapping of verb -> options")
    section = data.get(args.verb, {}) or {}
    for key, value in section.items():
        attr = key.replace("-", "_")
        if not hasattr(args, attr):
            raise ConfigError(f"{args.config}: unknown option {key!r} for {args.verb}")
        # explicit command-line values win over the file
        if getattr(args, attr) == args.verb_parser.get_default(attr) or getattr(args, attr) is None:
            setattr(args, attr, value)
    return args


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = _apply_config(args)
        args.fn(args)
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
