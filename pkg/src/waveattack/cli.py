"""Command-line entry point: ``waveattack <command> [options]``.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import dataio, defenses, pipeline, plotting, wavelet
from .errors import DivergenceError, ValidationError

logger = logging.getLogger("waveattack")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageExit(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad flags; usage errors must exit 1 here
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageExit(f"{self.prog}: error: {message}")


def _common(p):
    p.add_argument("--config", type=Path, help="key = value experiment config")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--out", type=Path, required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="waveattack", description="HH-subband backdoor attack toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train-clean", help="train a classifier without poisoning")
    _common(p)

    p = sub.add_parser("train-attack", help="train a backdoored classifier")
    _common(p)
    p.add_argument("--attack", choices=("wave", "badnets"), default="wave")

    p = sub.add_parser("poison-export", help="write clean, poisoned and residual PPMs")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--alpha", type=float, help="trigger strength (default: alpha_train)")
    p.add_argument("--magnify", type=float, default=5.0)

    p = sub.add_parser("eval", help="benign accuracy, attack success rate and fidelity")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--trigger-from", type=Path, help="attack checkpoint supplying the trigger")

    p = sub.add_parser("defend", help="run one defense against a checkpoint")
    _common(p)
    p.add_argument("--kind", choices=("strip", "fp", "ss", "nc", "gradcam"), required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--clean-checkpoint", type=Path, help="reference model for gradcam")

    p = sub.add_parser("dump-features", help="penultimate-layer features as CSV")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--poison-fraction", type=float, default=0.1)

    p = sub.add_parser("probe-subbands", help="add equal noise to each subband of one image")
    _common(p)
    p.add_argument("--image", type=Path, required=True, help="P6 PPM image")
    p.add_argument("--amplitude", type=float, default=0.1)

    p = sub.add_parser("make-standin", help="write the offline stand-in dataset in CIFAR-10 format")
    _common(p)
    p.add_argument("--n-train", type=int, default=5000)
    p.add_argument("--n-test", type=int, default=1000)
    return parser


def _load_cfg(args, check_paths=True) -> dataio.ExperimentConfig:
    overrides = {"seed": args.seed}
    if args.config is not None:
        cfg = dataio.load_config(args.config, overrides, check_paths=check_paths)
    else:
        cfg = dataio.ExperimentConfig(**{k: v for k, v in overrides.items() if v is not None}).validate(check_paths)
    cfg.out = str(args.out)
    return cfg


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _report_dict(report) -> dict:
    return {k: defenses._num(v) for k, v in report.to_dict().items()}


def cmd_train(args, cfg, kind):
    train_set, test = pipeline.load_datasets(cfg)
    nets, log, meta = pipeline.train(kind, cfg, train_set)
    dataio.write_jsonl(log.records, args.out / "train_log.jsonl")
    meta.pop("wall_seconds")
    dataio.save_checkpoint(args.out / "model.ckpt", nets, meta)
    clf = nets["clf"]
    plotting.training_curves(log.records, args.out / "training.png", f"{kind} training")
    result = {"attack": kind, "ba": pipeline.metrics.benign_accuracy(clf, test.images, test.labels)}
    if kind != "clean":
        reps = pipeline.evaluate_both(clf, nets, meta, test, cfg.target)
        result["reports"] = {k: _report_dict(r) for k, r in reps.items()}
    _write_json(args.out / "report.json", result)
    print(json.dumps(result, sort_keys=True))
    logger.info("training took %.1f s", log.wall_seconds)


def _alpha(meta, which):
    return meta.get("plan", {}).get(f"alpha_{which}", 1.0)


def _load_model(path):
    nets, meta = dataio.build_nets_from_checkpoint(path)
    if "clf" not in nets:
        raise ValidationError(f"{path} holds no classifier")
    return nets, meta


def cmd_eval(args, cfg):
    _, test = pipeline.load_datasets(cfg)
    nets, meta = _load_model(args.checkpoint)
    clf = nets["clf"]
    trig_nets, trig_meta = (nets, meta) if args.trigger_from is None else _load_model(args.trigger_from)
    result = {"checkpoint": str(args.checkpoint), "attack": meta.get("attack")}
    if trig_meta.get("attack") in ("wave", "badnets"):
        reps = pipeline.evaluate_both(clf, trig_nets, trig_meta, test, cfg.target)
        result["reports"] = {k: _report_dict(r) for k, r in reps.items()}
    else:
        result["reports"] = {}
    result["ba"] = pipeline.metrics.benign_accuracy(clf, test.images, test.labels)
    _write_json(args.out / "eval.json", result)
    print(json.dumps(result, sort_keys=True))


def cmd_poison_export(args, cfg):
    _, test = pipeline.load_datasets(cfg)
    nets, meta = _load_model(args.checkpoint)
    alpha = _alpha(meta, "train") if args.alpha is None else args.alpha
    fn = pipeline.poisoner(nets, meta, alpha)
    clean = test.images[: args.count]
    poisoned = fn(clean)
    for i, (c, p) in enumerate(zip(clean, poisoned)):
        dataio.export_image_ppm(c, args.out / f"clean_{i:03d}.ppm")
        dataio.export_image_ppm(p, args.out / f"poisoned_{i:03d}.ppm")
        dataio.export_residual_ppm(c, p, args.magnify, args.out / f"residual_{i:03d}.ppm")
    plotting.sample_grid(clean[:8], poisoned[:8], args.magnify, args.out / "samples.png", f"alpha = {alpha:g}")
    rows = [{"index": i, "psnr_db": pipeline.metrics.psnr(c, p)} for i, (c, p) in enumerate(zip(clean, poisoned))]
    dataio.write_csv_table(rows, ["index", "psnr_db"], args.out / "psnr.csv")


def cmd_defend(args, cfg):
    train_set, test = pipeline.load_datasets(cfg)
    nets, meta = _load_model(args.checkpoint)
    clf = nets["clf"]
    out = args.out
    kind = args.kind
    if kind == "gradcam":
        clean = _load_model(args.clean_checkpoint)[0]["clf"] if args.clean_checkpoint else None
        rep = pipeline.run_gradcam(clf, clean, test)
        rows = {"model": rep.maps[:8]}
        if clean is not None:
            rows = {"clean model": rep.reference_maps[:8], "model": rep.maps[:8]}
        plotting.heatmap_grid(test.images[:8], rows, out / "gradcam.png")
        np.save(out / "gradcam_maps.npy", rep.maps)
        reports = [rep]
    elif kind == "nc":
        reports = []
        for s in range(cfg.defense_seeds):
            rep = pipeline.run_neural_cleanse(clf, test, cfg, cfg.seed + s)
            reports.append(rep)
            rows = [{"class": c, "mask_l1": float(n), "anomaly_index": float(a)}
                    for c, (n, a) in enumerate(zip(rep.mask_norms, rep.anomaly_indices))]
            dataio.write_csv_table(rows, ["class", "mask_l1", "anomaly_index"], out / f"nc_seed{s}.csv")
            for c, m in rep.masks.items():
                dataio.export_image_ppm(np.repeat(m[None], 3, axis=0), out / f"nc_seed{s}_mask_{c}.ppm")
                dataio.export_image_ppm(rep.patterns[c], out / f"nc_seed{s}_pattern_{c}.ppm")
        plotting.anomaly_bars(reports[0].mask_norms, reports[0].anomaly_indices, out / "nc.png")
    else:
        poison_fn = pipeline.poisoner(nets, meta)
        if kind == "strip":
            reports = [pipeline.run_strip(clf, poison_fn, test, cfg, cfg.seed + s) for s in range(cfg.defense_seeds)]
            n = len(reports[0].scores) // 2
            plotting.strip_histogram(reports[0].scores[:n], reports[0].scores[n:], out / "strip.png")
        elif kind == "fp":
            reports = [pipeline.run_fine_pruning(clf, poison_fn, test, cfg)]
            cols = ["fraction", "pruned", "ba", "asr"]
            dataio.write_csv_table(reports[0].curve, cols, out / "fine_pruning.csv")
            plotting.pruning_curve(reports[0].curve, out / "fine_pruning.png")
        else:
            train_fn = pipeline.poisoner(nets, meta, _alpha(meta, "train"))
            reports = []
            for s in range(cfg.defense_seeds):
                rep, flags = pipeline.run_spectral(clf, train_set, train_fn, cfg, cfg.seed + s)
                rep.summary.pop("direction")
                reports.append(rep)
                if s == 0:
                    plotting.score_histogram(rep.scores, flags, out / "spectral.png")
    with open(out / f"defense_{kind}.jsonl", "w") as fh:
        for rep in reports:
            fh.write(rep.to_json() + "\n")
    summaries = [rep.summary for rep in reports]
    print(json.dumps({"kind": kind, "summaries": [{k: defenses._num(v) for k, v in s.items()} for s in summaries]},
                     sort_keys=True))


def cmd_dump_features(args, cfg):
    _, test = pipeline.load_datasets(cfg)
    nets, meta = _load_model(args.checkpoint)
    n_poison = int(round(args.poison_fraction * len(test)))
    images = test.images.copy()
    flags = np.zeros(len(test), dtype=int)
    if n_poison and meta.get("attack") in ("wave", "badnets"):
        idx = np.nonzero(test.labels != cfg.target)[0][:n_poison]
        images[idx] = pipeline.poisoner(nets, meta, _alpha(meta, "train"))(images[idx])
        flags[idx] = 1
    dataio.export_latent_features(nets["clf"], images, test.labels, flags, args.out / "features.csv")


def cmd_probe(args, cfg):
    image = dataio.read_ppm(args.image)
    recons, psnrs = {}, {}
    for band in wavelet.BANDS:
        recon, p = wavelet.subband_noise_probe(image, band, args.amplitude, seed=cfg.seed)
        recons[band], psnrs[band] = recon, p
        dataio.export_image_ppm(np.clip(recon, 0.0, 1.0), args.out / f"noise_{band}.ppm")
    rows = [{"band": b, "psnr_db": psnrs[b]} for b in wavelet.BANDS]
    dataio.write_csv_table(rows, ["band", "psnr_db"], args.out / "psnr.csv")
    plotting.probe_grid(image, recons, psnrs, args.out / "probe.png")
    for r in rows:
        print(f"{r['band']}\t{dataio._fmt(r['psnr_db'])}")


def cmd_make_standin(args, cfg):
    from .standin import make_standin

    train, test = make_standin(args.n_train, args.n_test, seed=cfg.seed)
    dataio.write_cifar10_binary(train, args.out / "data_batch_1.bin")
    dataio.write_cifar10_binary(test, args.out / "test_batch.bin")


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageExit as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = _load_cfg(args, check_paths=args.command != "make-standin")
        args.out.mkdir(parents=True, exist_ok=True)
        if args.command == "train-clean":
            cmd_train(args, cfg, "clean")
        elif args.command == "train-attack":
            cmd_train(args, cfg, args.attack)
        elif args.command == "eval":
            cmd_eval(args, cfg)
        elif args.command == "poison-export":
            cmd_poison_export(args, cfg)
        elif args.command == "defend":
            cmd_defend(args, cfg)
        elif args.command == "dump-features":
            cmd_dump_features(args, cfg)
        elif args.command == "probe-subbands":
            cmd_probe(args, cfg)
        elif args.command == "make-standin":
            cmd_make_standin(args, cfg)
        dataio.write_manifest(args.out, cfg, args.command, argv)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (DivergenceError, OSError, RuntimeError, ValueError, KeyError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
