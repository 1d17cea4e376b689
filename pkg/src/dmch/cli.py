"""Command line entry point: ``dmch <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .decoder import AttentionRecord
from .embedding import load_codes, save_codes
from .errors import ConfigError, DataError, DMCHError, DMCHIOError
from .hamming import CodeDatabase, benchmark_queries, precision_at_k, query_topk
from .model import DMCHModel, TrainConfig, read_config
from .seq_metrics import CorpusItem, format_table, metric_table, read_corpus, write_corpus
from .synth import generate, load_image, make_hard_pairs, read_manifest
from .trainer import ImageCache, train

log = logging.getLogger("dmch")


def _k_list(text: str) -> list[int]:
    try:
        ks = [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad K list {text!r}") from exc
    if not ks or min(ks) < 1:
        raise argparse.ArgumentTypeError("K values must be >= 1")
    return ks


def _config(args) -> TrainConfig:
    """Config file, else the config.txt saved next to the checkpoint, else defaults; flags win."""
    path = getattr(args, "config", None)
    if path is None and getattr(args, "checkpoint", None):
        beside = Path(args.checkpoint).parent / "config.txt"
        path = beside if beside.exists() else None
    cfg = read_config(_need(path, "config")) if path else TrainConfig()
    return cfg.updated(seed=getattr(args, "seed", None), code_bits=getattr(args, "code_bits", None),
                       lam=getattr(args, "lam", None), eta=getattr(args, "eta", None),
                       **dict(getattr(args, "set", None) or []))


def _need(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise DMCHIOError(f"{what} not found: {p}")
    return p


def _load_model(args) -> DMCHModel:
    cfg = _config(args)
    return DMCHModel.load(_need(args.checkpoint, "checkpoint"), cfg)


def _kv(text: str):
    if "=" not in text:
        raise argparse.ArgumentTypeError("expected key=value")
    k, v = text.split("=", 1)
    return k.strip(), v.strip()


# ---------------------------------------------------------------- subcommands


def cmd_gen_data(args) -> None:
    seed = args.seed if args.seed is not None else 0
    m = generate(args.products, args.images_per_product, seed, args.out)
    if args.hard_fraction > 0:
        m = make_hard_pairs(m, args.hard_fraction, seed)
    print(f"wrote {len(m.records)} records for {len(m.products())} products to {args.out}/manifest.jsonl")


def cmd_train(args) -> None:
    cfg = _config(args)
    manifest = read_manifest(_need(args.manifest, "manifest"))
    result = train(cfg, manifest, args.out)
    last = result.history[-1]
    print(f"trained {len(result.history)} epochs; final loss {last.total:.4f}; "
          f"phi {last.phi:g}; checkpoint {result.checkpoints[-1]}")


def _select(manifest, domain: str, split: str | None):
    return [r for r in manifest.records if r.domain == domain and (split is None or r.split == split)]


def cmd_embed(args) -> None:
    model = _load_model(args)
    manifest = read_manifest(_need(args.manifest, "manifest"))
    recs = _select(manifest, args.domain, args.split)
    if not recs:
        raise DataError("no images selected")
    images = ImageCache(manifest)
    _, packed, _, _ = model.infer(images.batch([r.item_id for r in recs]))
    save_codes(args.out, [r.item_id for r in recs], packed, model.config.code_bits)
    print(f"wrote {len(recs)} codes ({model.config.code_bits} bits) to {args.out}")


def _open_db(path, code_bits: int, manifest=None) -> CodeDatabase:
    ids, packed, c = load_codes(_need(path, "code database"))
    if c != code_bits:
        raise ConfigError(f"code database is {c}-bit but config has code_bits={code_bits}")
    products = None
    if manifest is not None:
        by_id = {r.item_id: r.product_id for r in manifest.records}
        products = [by_id.get(i) for i in ids]
    return CodeDatabase(c, ids, packed, products or [])


def write_attention_csv(path, records: list[AttentionRecord], grid_shape: tuple[int, int]) -> None:
    gh, gw = grid_shape
    lines = []
    for t, rec in enumerate(records, 1):
        lines.append("step,beta")
        lines.append(f"{t},{rec.beta:.10g}")
        for row in rec.alpha.reshape(gh, gw):
            lines.append(",".join(f"{a:.10g}" for a in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_attention_csv(path) -> list[tuple[int, float, np.ndarray]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    out, i = [], 0
    while i < len(lines):
        if lines[i] != "step,beta":
            raise DataError(f"{path}:{i + 1}: expected 'step,beta' header")
        step, beta = lines[i + 1].split(",")
        i += 2
        rows = []
        while i < len(lines) and lines[i] != "step,beta":
            rows.append([float(x) for x in lines[i].split(",")])
            i += 1
        out.append((int(step), float(beta), np.array(rows)))
    return out


def cmd_query(args) -> None:
    model = _load_model(args)
    db = _open_db(args.codes, model.config.code_bits)
    img = load_image(_need(args.image, "image"))
    _, packed, seqs, recs = model.infer(img[None])
    res = query_topk(db, packed[0], args.k[0])
    print("rank\titem_id\thamming")
    for rank, (item, dist) in enumerate(res, 1):
        print(f"{rank}\t{item}\t{dist}")
    print("attributes\t" + " ".join(model.vocab.decode(seqs[0])))
    if args.attention_out:
        write_attention_csv(args.attention_out, recs[0], model.grid_shape)


def cmd_attn_export(args) -> None:
    model = _load_model(args)
    img = load_image(_need(args.image, "image"))
    _, _, seqs, recs = model.infer(img[None])
    write_attention_csv(args.out, recs[0], model.grid_shape)
    print(f"{len(recs[0])} steps; attributes: {' '.join(model.vocab.decode(seqs[0]))}")


def cmd_eval_retrieval(args) -> None:
    model = _load_model(args)
    manifest = read_manifest(_need(args.manifest, "manifest"))
    db = _open_db(args.codes, model.config.code_bits, manifest)
    queries = manifest.user(args.split)
    if not queries:
        raise DataError(f"no {args.split} queries in manifest")
    images = ImageCache(manifest)
    _, packed, _, _ = model.infer(images.batch([r.item_id for r in queries]))
    ks = sorted(args.k)
    results = [query_topk(db, q, ks[-1]) for q in packed]
    item_products = {i: p for i, p in zip(db.ids, db.products) if p is not None}
    print("K\tP@K\tqueries")
    for k in ks:
        p = precision_at_k(results, [r.product_id for r in queries], item_products, k)
        print(f"{k}\t{p:.4f}\t{len(queries)}")


def cmd_eval_attr(args) -> None:
    if args.corpus and not args.checkpoint:
        items = read_corpus(_need(args.corpus, "corpus"))
    else:
        if not (args.checkpoint and args.manifest):
            raise ConfigError("eval-attr needs --corpus, or --checkpoint with --manifest")
        model = _load_model(args)
        manifest = read_manifest(_need(args.manifest, "manifest"))
        recs = manifest.user(args.split)
        if not recs:
            raise DataError(f"no {args.split} images")
        images = ImageCache(manifest)
        _, _, seqs, _ = model.infer(images.batch([r.item_id for r in recs]))
        items = [CorpusItem(r.item_id, model.vocab.decode(s), list(r.attributes)) for r, s in zip(recs, seqs)]
        if args.corpus:
            write_corpus(args.corpus, items)
    print(format_table(metric_table(items)))


def cmd_bench(args) -> None:
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    nbytes = -(-args.code_bits // 8)
    if args.codes:
        ids, packed, c = load_codes(_need(args.codes, "code database"))
        db = CodeDatabase(c, ids, packed)
    else:
        packed = rng.integers(0, 256, (args.db_size, nbytes), dtype=np.uint8)
        db = CodeDatabase(args.code_bits, [f"s{i:06d}" for i in range(args.db_size)], packed)
    queries = rng.integers(0, 256, (args.queries, db.arena.shape[1]), dtype=np.uint8)
    report = benchmark_queries(db, queries, args.repetitions, k=args.k[0])
    print(report.to_tsv())


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dmch", description="Garment attribute decoding and Hamming retrieval.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, model=True):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--code-bits", type=int, choices=(32, 64, 128))
        sp.add_argument("--lambda", dest="lam", type=float)
        sp.add_argument("--eta", type=float)
        sp.add_argument("--k", type=_k_list, default=[10])
        sp.add_argument("--set", type=_kv, action="append", metavar="KEY=VALUE",
                        help="override any config key")
        if model:
            sp.add_argument("--checkpoint", required=True)

    sp = sub.add_parser("gen-data", help="render a synthetic dataset")
    common(sp, model=False)
    sp.add_argument("--out", required=True)
    sp.add_argument("--products", type=int, default=50)
    sp.add_argument("--images-per-product", type=int, default=3)
    sp.add_argument("--hard-fraction", type=float, default=0.0)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train a model")
    common(sp, model=False)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("embed", help="write binary codes for manifest images")
    common(sp)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--domain", default="shop", choices=("shop", "user"))
    sp.add_argument("--split")
    sp.set_defaults(func=cmd_embed)

    sp = sub.add_parser("query", help="retrieve for one image")
    common(sp)
    sp.add_argument("--codes", required=True)
    sp.add_argument("--image", required=True)
    sp.add_argument("--attention-out")
    sp.set_defaults(func=cmd_query)

    sp = sub.add_parser("eval-retrieval", help="P@K over test queries")
    common(sp)
    sp.add_argument("--codes", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--split", default="test")
    sp.set_defaults(func=cmd_eval_retrieval)

    sp = sub.add_parser("eval-attr", help="BLEU / ROUGE-L / CIDEr of attribute sequences")
    common(sp, model=False)
    sp.add_argument("--checkpoint")
    sp.add_argument("--manifest")
    sp.add_argument("--corpus", help="corpus file to read, or to write when decoding")
    sp.add_argument("--split", default="test")
    sp.set_defaults(func=cmd_eval_attr)

    sp = sub.add_parser("bench", help="Hamming vs float Euclidean scan latency")
    common(sp, model=False)
    sp.set_defaults(code_bits=128)
    sp.add_argument("--codes")
    sp.add_argument("--db-size", type=int, default=39756)
    sp.add_argument("--queries", type=int, default=1000)
    sp.add_argument("--repetitions", type=int, default=5)
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("attn-export", help="write per-step attention maps as CSV")
    common(sp)
    sp.add_argument("--image", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_attn_export)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except DMCHError as exc:
        print(f"dmch: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"dmch: {exc}", file=sys.stderr)
        return DMCHIOError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
