"""Command-line entry point: synth, train, eval, analyze, reproduce-synthetic.

Exit codes: 0 success, 2 usage or configuration error, 3 data or file-format
error, 4 numerical degeneracy.
"""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__
from .data import SynthSpec, generate_synthetic, load_checkpoint, read_embeddings, save_checkpoint
from .data import split_gallery_query, write_embeddings
from .errors import ConfigError, DataError, FormatError, MonoconError, NumericalError
from .experiments import (
    REFERENCE_D_ENC,
    REFERENCE_SPEC,
    REFERENCE_TRAIN,
    ablation_table,
    compression_grid,
    run_ablation,
)
from .metrics import EvalSplit, knn_accuracy, recall_curve
from .models import HEAD_KINDS, ModelConfig, embed, init_params
from .optim import EMBEDDING_KINDS, TrainConfig, fit, train_config_to_dict
from .spectra import effective_dim, pca_fit, rank_trajectory, spectral_report, write_rows_csv

log = logging.getLogger("monocon")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


@dataclass
class RunManifest:
    command: str
    config: dict
    inputs: dict[str, str]  # path -> sha256
    outputs: list[str]
    version: str = __version__
    wall_clock_seconds: float = 0.0
    extra: dict = field(default_factory=dict)

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _manifest_path(args, primary) -> Path:
    return Path(args.manifest) if args.manifest else Path(f"{primary}.manifest.json")


def _finish(args, command: str, config: dict, inputs: list, outputs: list, t0: float, **extra) -> None:
    m = RunManifest(command, config, {str(p): file_digest(p) for p in inputs},
                    [str(p) for p in outputs], wall_clock_seconds=round(time.perf_counter() - t0, 3),
                    extra=extra)
    path = _manifest_path(args, outputs[0])
    m.write(path)
    log.info("wrote %s", path)


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("values must be positive integers")
    return vals


# ---------------------------------------------------------------- synth


def _add_synth_flags(p: argparse.ArgumentParser, defaults: SynthSpec) -> None:
    g = p.add_argument_group("synthetic data")
    g.add_argument("--n-classes", type=int, default=defaults.n_classes)
    g.add_argument("--samples-per-class", type=int, default=defaults.samples_per_class)
    g.add_argument("--intrinsic-dim", type=int, default=defaults.intrinsic_dim)
    g.add_argument("--ambient-dim", type=int, default=defaults.ambient_dim)
    g.add_argument("--class-separation", type=float, default=defaults.class_separation)
    g.add_argument("--class-noise", type=float, default=defaults.class_noise)
    g.add_argument("--nuisance-noise", type=float, default=defaults.nuisance_noise)
    g.add_argument("--no-entangle", dest="entangle", action="store_false",
                   help="skip the random rotation of the ambient space")
    g.add_argument("--data-seed", "--seed", dest="data_seed", type=int, default=defaults.seed)


def _synth_spec(args) -> SynthSpec:
    spec = SynthSpec(args.n_classes, args.samples_per_class, args.intrinsic_dim, args.ambient_dim,
                     args.class_separation, args.class_noise, args.nuisance_noise, args.entangle,
                     args.data_seed)
    spec.validate()
    return spec


def cmd_synth(args) -> int:
    t0 = time.perf_counter()
    spec = _synth_spec(args)
    ds = generate_synthetic(spec)
    write_embeddings(ds, args.out)
    _finish(args, "synth", asdict(spec), [], [args.out], t0)
    return EXIT_OK


# ---------------------------------------------------------------- train


def _add_train_flags(p: argparse.ArgumentParser, defaults: TrainConfig, d_enc: int,
                     seed_alias: bool = False) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--lr-encoder", type=float, default=defaults.lr_encoder)
    g.add_argument("--lr-head", type=float, default=defaults.lr_head)
    g.add_argument("--warmup-lr-head", type=float, default=defaults.warmup_lr_head)
    g.add_argument("--temperature", type=float, default=defaults.temperature)
    g.add_argument("--batch-size", type=int, default=defaults.batch_size)
    g.add_argument("--epochs", type=int, default=defaults.max_epochs,
                   help="main-phase epochs (after warmup)")
    g.add_argument("--warmup-epochs", type=int, default=defaults.warmup_epochs)
    g.add_argument("--patience", type=int, default=defaults.patience)
    g.add_argument("--validate-every", type=int, default=defaults.validate_every)
    g.add_argument("--weight-decay", type=float, default=defaults.weight_decay)
    g.add_argument("--clip-norm", type=float, default=defaults.clip_norm)
    g.add_argument("--metric", choices=("knn", "recall@1"), default=defaults.metric)
    seed_flags = ("--train-seed", "--seed") if seed_alias else ("--train-seed",)
    g.add_argument(*seed_flags, dest="train_seed", type=int, default=defaults.seed)
    g.add_argument("--d-enc", type=int, default=d_enc)


def _train_config(args) -> TrainConfig:
    return TrainConfig(lr_encoder=args.lr_encoder, lr_head=args.lr_head,
                       warmup_lr_head=args.warmup_lr_head, temperature=args.temperature,
                       batch_size=args.batch_size, max_epochs=args.epochs,
                       warmup_epochs=args.warmup_epochs, patience=args.patience,
                       validate_every=args.validate_every, weight_decay=args.weight_decay,
                       clip_norm=args.clip_norm, seed=args.train_seed, metric=args.metric)


def cmd_train(args) -> int:
    t0 = time.perf_counter()
    cfg = _train_config(args)
    ds = read_embeddings(args.data)
    ds.check_classes()
    mc = ModelConfig(d_in=ds.dim, d_enc=args.d_enc, head=args.head)
    res = fit(ds, init_params(mc, cfg.seed), cfg, log_path=args.log)
    save_checkpoint(res.params, cfg, res.log, args.out_ckpt, extra={"data_sha256": file_digest(args.data)})
    outputs = [args.out_ckpt] + ([args.log] if args.log else [])
    _finish(args, "train", {"train": train_config_to_dict(cfg), "model": asdict(mc)}, [args.data],
            outputs, t0, best_epoch=res.log.best_epoch, best_metric=res.log.best_metric)
    return EXIT_OK


# ---------------------------------------------------------------- eval


def _labeled(path):
    ds = read_embeddings(path)
    ds.check_classes()
    return ds


def cmd_eval(args) -> int:
    t0 = time.perf_counter()
    ck = load_checkpoint(args.ckpt)
    g, q = _labeled(args.gallery), _labeled(args.query)
    split = EvalSplit(embed(g.features, ck.params, args.embedding), g.labels,
                      embed(q.features, ck.params, args.embedding), q.labels)
    report = {"embedding": args.embedding, "knn_k": args.knn_k,
              "knn_acc": knn_accuracy(split, args.knn_k)}
    for k, v in recall_curve(split, sorted(set(args.k))).items():
        report[f"recall@{k}"] = v
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
        _finish(args, "eval", {"k": args.k, "knn_k": args.knn_k, "embedding": args.embedding},
                [args.ckpt, args.gallery, args.query], [args.out], t0)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------- analyze


def cmd_analyze(args) -> int:
    t0 = time.perf_counter()
    ck = load_checkpoint(args.ckpt)
    ds = _labeled(args.data)
    frac, seed = (ck.config.gallery_fraction, ck.config.seed) if ck.config else (0.9, 42)
    g, q = split_gallery_query(ds, frac, seed)
    ge = embed(g.features, ck.params, args.embedding)
    qe = embed(q.features, ck.params, args.embedding)
    rep = spectral_report(ge, qe, args.threshold, args.corr_subset)
    pca = pca_fit(ge)
    ks = sorted({k for k in (args.truncate or []) if k <= ge.shape[1]} | {rep.d_eff, ge.shape[1]})
    grid = compression_grid(pca, ge, g.labels, qe, q.labels, ks)
    out = rep.to_dict()
    out["embedding"] = args.embedding
    out["head_kind"] = ck.params.head_kind
    out["compression"] = grid
    out["d_eff_all"] = {k: effective_dim(pca_fit(embed(g.features, ck.params, k)), args.threshold)
                        for k in EMBEDDING_KINDS}
    Path(args.out_json).write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
    outputs = [args.out_json]
    if args.out_csv:
        if ck.log is None or not ck.log.snapshots:
            raise DataError("checkpoint carries no training snapshots for the rank trajectory")
        write_rows_csv(rank_trajectory(ck.log), args.out_csv)
        outputs.append(args.out_csv)
    if args.out_grid_csv:
        write_rows_csv(grid, args.out_grid_csv)
        outputs.append(args.out_grid_csv)
    if args.out_corr_csv:
        rep.write_corr_csv(args.out_corr_csv)
        outputs.append(args.out_corr_csv)
    _finish(args, "analyze", {"threshold": args.threshold, "truncate": args.truncate,
                              "embedding": args.embedding, "corr_subset": args.corr_subset},
            [args.ckpt, args.data], outputs, t0)
    return EXIT_OK


# ---------------------------------------------------------------- reproduce-synthetic


def cmd_reproduce(args) -> int:
    t0 = time.perf_counter()
    spec = _synth_spec(args)
    cfg = _train_config(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = generate_synthetic(spec)
    data_path = out / "synthetic.emb"
    write_embeddings(ds, data_path)
    runs = run_ablation(ds, cfg, args.d_enc, args.heads)
    outputs = [out / "ablation.json", data_path]
    for h, r in runs.items():
        save_checkpoint(r.fit.params, cfg, r.fit.log, out / f"{h}.mck")
        write_rows_csv(rank_trajectory(r.fit.log), out / f"{h}_trajectory.csv")
        outputs += [out / f"{h}.mck", out / f"{h}_trajectory.csv"]
    ref = "monotonic" if "monotonic" in runs else next(iter(runs))
    table = ablation_table(runs, ref)
    write_rows_csv(table, out / "ablation.csv")
    outputs.append(out / "ablation.csv")
    (out / "ablation.json").write_text(json.dumps(
        {"spec": asdict(spec), "train": train_config_to_dict(cfg), "d_enc": args.d_enc,
         "reference_head": ref, "rows": table}, indent=2, sort_keys=True) + "\n")
    for row in table:
        print(f"{row['head']:>10}  knn {row['knn_acc']:.4f}  r@1 {row['recall@1']:.4f}  "
              f"d_eff {row['d_eff']:4d}  block {row['block_score']:.3f}")
    _finish(args, "reproduce-synthetic", {"spec": asdict(spec), "train": train_config_to_dict(cfg)},
            [], outputs, t0)
    return EXIT_OK


# ---------------------------------------------------------------- wiring


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="monocon", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--manifest", help="manifest path (default: <first output>.manifest.json)")

    s = sub.add_parser("synth", help="write a synthetic labeled dataset (EMB1)")
    _add_synth_flags(s, SynthSpec())
    s.add_argument("--out", required=True)
    common(s)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train an adapter plus head and write a checkpoint (MCK1)")
    t.add_argument("--data", required=True)
    t.add_argument("--head", choices=HEAD_KINDS, default="monotonic")
    _add_train_flags(t, TrainConfig(), REFERENCE_D_ENC, seed_alias=True)
    t.add_argument("--out-ckpt", required=True)
    t.add_argument("--log", help="JSONL training log")
    common(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="k-NN accuracy and Recall@k of a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--gallery", required=True)
    e.add_argument("--query", required=True)
    e.add_argument("--k", type=_int_list, default=[1, 5, 10], help="Recall@k list, e.g. 1,5,10")
    e.add_argument("--knn-k", type=int, default=5)
    e.add_argument("--embedding", choices=EMBEDDING_KINDS, default="head_normalized")
    e.add_argument("--out", help="JSON report path (default: stdout)")
    common(e)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", help="d_eff, reconstruction, block structure, compression grid")
    a.add_argument("--ckpt", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--threshold", type=float, default=0.99)
    a.add_argument("--truncate", type=_int_list, default=None, help="component counts, e.g. 4,8,16")
    a.add_argument("--embedding", choices=EMBEDDING_KINDS, default="head_normalized")
    a.add_argument("--corr-subset", type=int, default=None)
    a.add_argument("--out-json", required=True)
    a.add_argument("--out-csv", help="rank-trajectory CSV, one row per validation snapshot")
    a.add_argument("--out-grid-csv", help="compression grid CSV")
    a.add_argument("--out-corr-csv", help="cluster-ordered correlation matrix CSV")
    common(a)
    a.set_defaults(func=cmd_analyze)

    r = sub.add_parser("reproduce-synthetic", help="three-way head ablation on synthetic data")
    _add_synth_flags(r, REFERENCE_SPEC)
    _add_train_flags(r, REFERENCE_TRAIN, REFERENCE_D_ENC)
    r.add_argument("--heads", nargs="+", choices=HEAD_KINDS, default=list(HEAD_KINDS))
    r.add_argument("--out-dir", required=True)
    common(r)
    r.set_defaults(func=cmd_reproduce)
    return p


def _thread_limit():
    raw = os.environ.get("MONOCON_THREADS")
    if not raw:
        return contextlib.nullcontext()
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise ConfigError(f"MONOCON_THREADS must be a positive integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, NumericalError):
        return EXIT_NUMERIC
    if isinstance(exc, (FormatError, DataError, OSError)):
        return EXIT_DATA
    if isinstance(exc, (MonoconError, ValueError)):
        return EXIT_USAGE
    raise exc


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 on usage errors
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes
        code = exit_code_for(exc)
        if code == EXIT_USAGE:
            parser.print_usage(sys.stderr)
        print(f"monocon {args.command}: error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
