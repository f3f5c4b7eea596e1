"""Command-line entry point: data generation, training, sweeps, codec demo.

Exit codes: 0 ok, 2 usage error, 3 data error, 4 numeric failure.
Every run writes a manifest of the fully resolved configuration plus
sha256 hashes of its file inputs; runs with equal manifests produce equal
checkpoints, sweep CSVs, and bitstreams (the training log's wall-seconds
column is the one timing exception).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import channel, coding, config as cfgmod, model, quantizer, svgplot, training
from .channel import DataError
from .coding import BitstreamError
from .config import UsageError
from .training import NumericFailure

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _common_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", choices=sorted(cfgmod.PRESETS),
                   help="named immutable preset (desk or paper scale)")
    p.add_argument("--config", help="key=value config file (INI sections)")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="SECTION.KEY=VALUE", help="override one config key")


def _resolved(args) -> cfgmod.RunConfig:
    return cfgmod.load_config(preset=args.preset, config_file=args.config,
                              overrides=args.overrides)


def _write_manifest(cfg: cfgmod.RunConfig, out_dir: Path, name="manifest.txt"):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / name).write_text(cfg.manifest())


def _load_checkpoint_bundle(path):
    mcfg, entries = model.load_checkpoint(path)
    params = model.params_from_entries(mcfg, entries)
    hist = coding.SymbolHistogram(entries[model.ENTRY_HISTOGRAM].astype(np.float64)) \
        if model.ENTRY_HISTOGRAM in entries else None
    bits = int(entries[model.ENTRY_BITS][0]) if model.ENTRY_BITS in entries else 8
    mu = float(entries[model.ENTRY_MU][0]) if model.ENTRY_MU in entries \
        else quantizer.DEFAULT_MU
    norm = None
    if model.ENTRY_NORM in entries:
        rec = entries[model.ENTRY_NORM]
        norm = channel.NormalizationRecord(float(rec[0]), float(rec[1]))
    return mcfg, params, hist, bits, mu, norm


def _dataset_paths(data_dir: Path, profile: str) -> dict[str, Path]:
    return {split: data_dir / f"{profile}-{split}.csid"
            for split in ("train", "val", "test")}


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    cfg = _resolved(args)
    total = cfg["data.samples"]
    if total < 1:
        raise UsageError(f"data.samples must be >= 1, got {total}")
    profile = cfg["data.profile"]
    if profile not in channel.PROFILES:
        raise UsageError(f"unknown profile {profile!r} "
                         f"(have: {', '.join(sorted(channel.PROFILES))})")
    out_dir = Path(args.out_dir)
    paths = _dataset_paths(out_dir, profile)
    if not args.force:
        existing = [str(p) for p in paths.values() if p.exists()]
        if existing:
            raise DataError(f"refusing to overwrite {', '.join(existing)} "
                            "(use --force)")
    ds = channel.build_dataset(total, profile, cfg["data.seed"],
                               nc_tilde=cfg["data.nc_tilde"],
                               nc=cfg["data.nc"], nt=cfg["data.nt"])
    n_train, n_val, n_test = channel.split_counts(total)
    out_dir.mkdir(parents=True, exist_ok=True)
    offsets = {"train": (0, n_train), "val": (n_train, n_train + n_val),
               "test": (n_train + n_val, total)}
    for split, (lo, hi) in offsets.items():
        part = channel.DatasetFile(ds.samples[lo:hi], ds.norm)
        channel.save_dataset(part, paths[split])
        print(f"wrote {paths[split]} ({hi - lo} samples)")
    _write_manifest(cfg, out_dir, name=f"{profile}-manifest.txt")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolved(args)
    data_dir = Path(args.data_dir)
    paths = _dataset_paths(data_dir, cfg["data.profile"])
    for split in ("train", "val"):
        if not paths[split].exists():
            raise DataError(f"missing dataset {paths[split]} (run gen-data first)")
    train_set = channel.load_dataset(paths["train"])
    val_set = channel.load_dataset(paths["val"])
    cfg.set_input_hash("train_data", paths["train"])
    cfg.set_input_hash("val_data", paths["val"])
    mcfg = cfgmod.model_config(cfg)
    tconf = cfgmod.train_config(cfg)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_manifest(cfg, out_dir)
    log_path = out_dir / "train_log.csv"
    resume = {}
    if args.resume:
        state_path = out_dir / "train_state.npz"
        if not state_path.exists():
            raise DataError(f"--resume: no state file at {state_path}")
        resume = training.load_train_state(state_path, mcfg)
        mode = "a"
    else:
        mode = "w"
    with open(log_path, mode) as log_file:
        if mode == "w":
            log_file.write(training.LOG_HEADER + "\n")

        def on_epoch(entry):
            log_file.write(entry.row() + "\n")
            log_file.flush()

        result = training.fit(mcfg, tconf, train_set, val_set, log_cb=on_epoch,
                              **resume)
    entries = training.checkpoint_entries(result, tconf, train_set.norm)
    ckpt_path = out_dir / "best.ckpt"
    model.save_checkpoint(ckpt_path, mcfg, entries)
    training.save_train_state(out_dir / "train_state.npz", result, tconf,
                              train_set.norm)
    last = result.log[-1] if result.log else None
    print(f"wrote {ckpt_path}")
    print(f"epochs run: {result.epochs_run}"
          + (" (early stop)" if result.stopped_early else ""))
    if last is not None:
        print(f"final val NMSE: {last.val_nmse_db:.2f} dB, "
              f"entropy BPP: {last.entropy_bpp:.4f}")
    print(f"best val NMSE: {result.best_val_nmse_db:.2f} dB")
    if tconf.lam == 0:
        print("lambda = 0: rate term excluded from gradients "
              "(soft_rate_bpp column is report-only)")
    return EXIT_OK


def _run_sweep(args, bits_list, snr_list, out_name: str, svg_title: str,
               svg_series_key) -> int:
    cfg = _resolved(args)
    ckpt_paths = args.checkpoint if isinstance(args.checkpoint, list) \
        else [args.checkpoint]
    test_set = channel.load_dataset(args.data)
    rows = []
    for ckpt in ckpt_paths:
        if not Path(ckpt).exists():
            raise DataError(f"missing checkpoint {ckpt}")
        mcfg, params, _, _, mu, _ = _load_checkpoint_bundle(ckpt)
        rows.extend(training.evaluate(
            params, mcfg, test_set, bits_list, snr_list,
            seed=cfg["sweep.seed"], mu=mu, scenario=args.scenario))
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{out_name}.csv"
    csv_path.write_text(training.sweep_rows_to_csv(rows))
    print(f"wrote {csv_path} ({len(rows)} rows)")
    cfg.set_input_hash("test_data", args.data)
    _write_manifest(cfg, out_dir, name=f"{out_name}-manifest.txt")
    if args.svg:
        series: dict[str, list[tuple[float, float]]] = {}
        for r in rows:
            label, x = svg_series_key(r)
            series.setdefault(label, []).append((x, r.nmse_db))
        svg_path = out_dir / f"{out_name}.svg"
        svg_path.write_text(svgplot.render_line_chart(
            series, svg_title, args.svg_xlabel, "NMSE (dB)"))
        print(f"wrote {svg_path}")
    return EXIT_OK


def cmd_sweep_snr(args) -> int:
    cfg = _resolved(args)
    args.svg_xlabel = "SNR (dB)"
    return _run_sweep(args, cfg["sweep.bits_list"], cfg["sweep.snrs_db"],
                      "sweep_snr", "NMSE vs SNR by quantizer depth",
                      lambda r: (f"k={r.bits}", r.snr_db))


def cmd_sweep_rate(args) -> int:
    cfg = _resolved(args)
    args.svg_xlabel = "BPP"
    return _run_sweep(args, cfg["sweep.bits_list"], (float("inf"),),
                      "sweep_rate", "NMSE vs bits per pixel",
                      lambda r: (f"gamma={r.gamma:.3f}", r.measured_bpp))


def cmd_eval(args) -> int:
    cfg = _resolved(args)
    mcfg, params, _, _, mu, _ = _load_checkpoint_bundle(args.checkpoint)
    test_set = channel.load_dataset(args.data)
    snrs = tuple(float(s) for s in args.snrs.split(",")) if args.snrs \
        else (float("inf"),)
    bits = tuple(int(b) for b in args.bits.split(",")) if args.bits \
        else (cfg["quantizer.bits"],)
    rows = training.evaluate(params, mcfg, test_set, bits, snrs,
                             seed=cfg["sweep.seed"], mu=mu,
                             scenario=args.scenario)
    print(training.sweep_rows_to_csv(rows), end="")
    return EXIT_OK


def cmd_encode(args) -> int:
    mcfg, params, hist, ck_bits, mu, _ = _load_checkpoint_bundle(args.checkpoint)
    ds = channel.load_dataset(args.data)
    if not 0 <= args.index < ds.count:
        raise UsageError(f"--index {args.index} outside dataset "
                         f"(count {ds.count})")
    bits = args.bits or ck_bits
    qconf = quantizer.QuantizerConfig(bits=bits, mu=mu)
    sample = ds.channel(args.index)
    with_latent = model.encode(sample, params, mcfg)
    q = quantizer.quantize(with_latent.data, qconf)
    if bits == ck_bits and hist is not None and hist.num_symbols == qconf.levels:
        codebook = coding.huffman_build(hist)
    else:
        codebook = coding.huffman_build(coding.fit_histogram(q.symbols, qconf.levels))
    stream = coding.huffman_encode(q, codebook)
    Path(args.out).write_bytes(stream.to_bytes())
    print(f"wrote {args.out}: {stream.payload_bits} payload bits for "
          f"{stream.symbol_count} symbols "
          f"({coding.bpp(stream.payload_bits, mcfg.nc, mcfg.nt):.4f} BPP)")
    return EXIT_OK


def cmd_decode(args) -> int:
    mcfg, params, _, _, mu, ck_norm = _load_checkpoint_bundle(args.checkpoint)
    stream = coding.FeedbackBitstream.from_bytes(Path(args.bitstream).read_bytes())
    q = coding.huffman_decode(stream)
    qconf = quantizer.QuantizerConfig(bits=stream.bits, mu=mu)
    s_hat = quantizer.dequantize(q, qconf).astype(np.float32)
    recon = model.decode(s_hat, params, mcfg)
    norm = ck_norm or channel.NormalizationRecord.identity()
    reference = None
    if args.reference:
        ref_ds = channel.load_dataset(args.reference)
        norm = ref_ds.norm
        reference = ref_ds.channel(args.index).matrix
    out_ds = channel.DatasetFile(
        recon.data.reshape(1, 2, mcfg.nc, mcfg.nt), norm)
    channel.save_dataset(out_ds, args.out)
    print(f"wrote {args.out}")
    if reference is not None:
        res = training.nmse(reference[None], recon.data[None], norm)
        print(f"NMSE vs reference sample {args.index}: {res.db:.2f} dB")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="csicomp",
                description="CSI feedback compression pipeline "
                            "(generate, train, sweep, encode/decode)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate synthetic dataset files")
    _common_config_flags(g)
    g.add_argument("--out-dir", default="data")
    g.add_argument("--profile", dest="overrides_profile", default=None,
                   help="shorthand for --set data.profile=...")
    g.add_argument("--samples", type=int, default=None,
                   help="shorthand for --set data.samples=...")
    g.add_argument("--seed", type=int, default=None,
                   help="shorthand for --set data.seed=...")
    g.add_argument("--force", action="store_true")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train the codec")
    _common_config_flags(t)
    t.add_argument("--data-dir", default="data")
    t.add_argument("--out-dir", default="runs/latest")
    t.add_argument("--lambda", dest="lambda_flag", type=float, default=None,
                   help="shorthand for --set train.lambda=...")
    t.add_argument("--resume", action="store_true",
                   help="continue from the state file in --out-dir")
    t.set_defaults(fn=cmd_train)

    for name, fn, help_text in (
            ("sweep-snr", cmd_sweep_snr, "NMSE vs SNR grid at several bit depths"),
            ("sweep-rate", cmd_sweep_rate, "rate-distortion curve over (M, k)")):
        s = sub.add_parser(name, help=help_text)
        _common_config_flags(s)
        s.add_argument("--checkpoint", action="append", required=True)
        s.add_argument("--data", required=True, help="test .csid file")
        s.add_argument("--out-dir", default="runs/latest")
        s.add_argument("--scenario", default="test")
        s.add_argument("--svg", action="store_true", help="emit a line chart")
        s.set_defaults(fn=fn)

    e = sub.add_parser("eval", help="metric table for one checkpoint")
    _common_config_flags(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--bits", default=None, help="comma list, e.g. 2,4,6,8")
    e.add_argument("--snrs", default=None, help="comma list of dB values")
    e.add_argument("--scenario", default="test")
    e.set_defaults(fn=cmd_eval)

    enc = sub.add_parser("encode", help="UE side: sample -> feedback bitstream")
    enc.add_argument("--checkpoint", required=True)
    enc.add_argument("--data", required=True, help=".csid file with the sample")
    enc.add_argument("--index", type=int, default=0)
    enc.add_argument("--bits", type=int, default=None)
    enc.add_argument("--out", required=True, help="output .csib path")
    enc.set_defaults(fn=cmd_encode)

    dec = sub.add_parser("decode", help="gNB side: bitstream -> reconstruction")
    dec.add_argument("--checkpoint", required=True)
    dec.add_argument("--bitstream", required=True)
    dec.add_argument("--out", required=True, help="output .csid path")
    dec.add_argument("--reference", default=None,
                     help="original .csid for NMSE reporting")
    dec.add_argument("--index", type=int, default=0)
    dec.set_defaults(fn=cmd_decode)
    return p


def _apply_shorthands(args) -> None:
    pairs = (("overrides_profile", "data.profile"), ("samples", "data.samples"),
             ("seed", "data.seed"), ("lambda_flag", "train.lambda"))
    for attr, dotted in pairs:
        val = getattr(args, attr, None)
        if val is not None:
            args.overrides.append(f"{dotted}={val}")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _apply_shorthands(args)
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, BitstreamError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericFailure, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
